//! Analytic solids written on the command line.
//!
//! ```text
//! spec   := prim ["@" x ":" y ":" z] | "union(" spec ("," spec)* ")"
//! prim   := "sphere:" r | "torus:" R ":" r | "box" [":" h | ":" hx ":" hy ":" hz]
//!         | "cylinder:" r ":" half_height | "capsule:" r ":" half_length
//! ```
//!
//! Primitives are centered at the origin unless moved with `@`; a bare
//! `box` is the cube of half extent 0.5. Tori lie in the xy plane.

use isoform::fields::Shape;
use isoform::geometry::{BoundingBox, Point3};

use crate::error::{CliError, CliResult};

pub fn parse_field_spec(text: &str) -> CliResult<Shape> {
    let shape = parse(text.trim()).map_err(|m| CliError::validation(format!("field spec {text:?}: {m}")))?;
    shape
        .validate()
        .map_err(|e| CliError::validation(format!("field spec {text:?}: {e}")))?;
    Ok(shape)
}

fn parse(s: &str) -> Result<Shape, String> {
    if let Some(rest) = s.strip_prefix("union(") {
        let inner = rest.strip_suffix(')').ok_or("missing closing parenthesis")?;
        let parts = split_top_level(inner)?;
        if parts.is_empty() || parts.iter().any(|p| p.trim().is_empty()) {
            return Err("union needs at least one operand".into());
        }
        return parts.iter().map(|p| parse(p.trim())).collect::<Result<Vec<_>, _>>().map(Shape::Union);
    }
    let (prim, at) = match s.split_once('@') {
        Some((p, a)) => (p, Some(a)),
        None => (s, None),
    };
    let center = match at {
        Some(a) => {
            let v = numbers(a)?;
            if v.len() != 3 {
                return Err(format!("offset needs three coordinates, got {}", v.len()));
            }
            [v[0], v[1], v[2]]
        }
        None => [0.0; 3],
    };
    let (name, args) = match prim.split_once(':') {
        Some((n, a)) => (n, numbers(a)?),
        None => (prim, Vec::new()),
    };
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("{name} takes {n} parameters, got {}", args.len()))
        }
    };
    let c = Point3::from(center);
    match name.trim() {
        "sphere" => {
            arity(1)?;
            Ok(Shape::sphere(c, args[0]))
        }
        "torus" => {
            arity(2)?;
            Ok(Shape::torus(c, args[0], args[1]))
        }
        "box" => {
            let h = match args.len() {
                0 => [0.5; 3],
                1 => [args[0]; 3],
                3 => [args[0], args[1], args[2]],
                n => return Err(format!("box takes 0, 1 or 3 parameters, got {n}")),
            };
            if h.iter().any(|v| !(*v > 0.0)) {
                return Err("box half extents must be positive".into());
            }
            let min = Point3::new(center[0] - h[0], center[1] - h[1], center[2] - h[2]);
            let max = Point3::new(center[0] + h[0], center[1] + h[1], center[2] + h[2]);
            BoundingBox::new(min, max).map(Shape::cuboid).map_err(|e| e.to_string())
        }
        "cylinder" => {
            arity(2)?;
            Ok(Shape::Cylinder {
                center,
                radius: args[0],
                half_height: args[1],
            })
        }
        "capsule" => {
            arity(2)?;
            let a = [center[0], center[1], center[2] - args[1]];
            let b = [center[0], center[1], center[2] + args[1]];
            Ok(Shape::Capsule { a, b, radius: args[0] })
        }
        other => Err(format!("unknown primitive {other:?}")),
    }
}

fn numbers(s: &str) -> Result<Vec<f64>, String> {
    s.split(':')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("{t:?} is not a number"))
        })
        .collect()
}

fn split_top_level(s: &str) -> Result<Vec<&str>, String> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.checked_sub(1).ok_or("unbalanced parentheses")?,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err("unbalanced parentheses".into());
    }
    parts.push(&s[start..]);
    Ok(parts)
}

/// Writes `shape` back in the grammar accepted by [`parse_field_spec`].
/// Intersections and empty shapes have no spelling.
#[cfg(test)]
pub fn format_field_spec(shape: &Shape) -> Option<String> {
    let at = |c: &[f64; 3]| {
        if c.iter().all(|v| *v == 0.0) {
            String::new()
        } else {
            format!("@{}:{}:{}", c[0], c[1], c[2])
        }
    };
    Some(match shape {
        Shape::Sphere { center, radius } => format!("sphere:{radius}{}", at(center)),
        Shape::Torus { center, major, minor } => format!("torus:{major}:{minor}{}", at(center)),
        Shape::Cuboid { min, max } => {
            let c = [0, 1, 2].map(|i| (min[i] + max[i]) / 2.0);
            let h = [0, 1, 2].map(|i| (max[i] - min[i]) / 2.0);
            format!("box:{}:{}:{}{}", h[0], h[1], h[2], at(&c))
        }
        Shape::Cylinder {
            center,
            radius,
            half_height,
        } => format!("cylinder:{radius}:{half_height}{}", at(center)),
        Shape::Capsule { a, b, radius } if a[0] == b[0] && a[1] == b[1] => {
            let c = [a[0], a[1], (a[2] + b[2]) / 2.0];
            format!("capsule:{radius}:{}{}", (b[2] - a[2]) / 2.0, at(&c))
        }
        Shape::Union(parts) => {
            let inner = parts.iter().map(format_field_spec).collect::<Option<Vec<_>>>()?;
            format!("union({})", inner.join(","))
        }
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn primitives() {
        assert_eq!(parse_field_spec("sphere:0.5").unwrap(), Shape::sphere(Point3::zeros(), 0.5));
        assert_eq!(
            parse_field_spec("torus:0.35:0.15").unwrap(),
            Shape::torus(Point3::zeros(), 0.35, 0.15)
        );
        assert_eq!(
            parse_field_spec("box").unwrap(),
            Shape::Cuboid {
                min: [-0.5; 3],
                max: [0.5; 3]
            }
        );
        assert_eq!(
            parse_field_spec("sphere:0.2@0.3:0:-0.1").unwrap(),
            Shape::sphere(Point3::new(0.3, 0.0, -0.1), 0.2)
        );
    }

    #[test]
    fn nested_union() {
        let s = parse_field_spec("union(sphere:0.3@-0.3:0:0, union(box:0.1, torus:0.3:0.1))").unwrap();
        let Shape::Union(parts) = s else { panic!() };
        assert_eq!(parts.len(), 2);
        assert!(matches!(&parts[1], Shape::Union(inner) if inner.len() == 2));
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "",
            "sphere",
            "sphere:-1",
            "sphere:x",
            "torus:0.3",
            "cone:1",
            "union(sphere:0.3",
            "union()",
            "union(sphere:0.2,)",
            "box:1:2",
            "sphere:0.2@1:2",
            "sphere:nan",
        ] {
            assert!(matches!(parse_field_spec(bad), Err(CliError::Validation(_))), "{bad:?}");
        }
    }

    fn prim() -> impl Strategy<Value = String> {
        let r = 0.05f64..1.0;
        let c = prop::array::uniform3(-1.0f64..1.0);
        prop_oneof![
            (r.clone(), c).prop_map(|(r, c)| format!("sphere:{r}@{}:{}:{}", c[0], c[1], c[2])),
            (r.clone(), r.clone()).prop_map(|(a, b)| format!("torus:{}:{}", a + b, b.min(a))),
            prop::array::uniform3(r.clone()).prop_map(|h| format!("box:{}:{}:{}", h[0], h[1], h[2])),
            (r.clone(), r).prop_map(|(a, b)| format!("cylinder:{a}:{b}")),
        ]
    }

    fn spec() -> impl Strategy<Value = String> {
        prim().prop_recursive(3, 12, 4, |inner| {
            prop::collection::vec(inner, 1..4).prop_map(|v| format!("union({})", v.join(",")))
        })
    }

    proptest! {
        #[test]
        fn format_then_parse_is_identity(text in spec()) {
            let shape = parse_field_spec(&text).unwrap();
            let again = parse_field_spec(&format_field_spec(&shape).unwrap()).unwrap();
            prop_assert_eq!(shape, again);
        }
    }
}
