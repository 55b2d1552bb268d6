use serde::{Deserialize, Serialize};

use super::OccupancyField;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Point3, Vec3};

/// Solid primitives described by their signed distance (negative inside).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Empty,
    Sphere { center: [f64; 3], radius: f64 },
    Cuboid { min: [f64; 3], max: [f64; 3] },
    /// Ring around the z axis through `center`.
    Torus { center: [f64; 3], major: f64, minor: f64 },
    /// Capped cylinder along z.
    Cylinder { center: [f64; 3], radius: f64, half_height: f64 },
    /// Segment `a`-`b` swept by a ball.
    Capsule { a: [f64; 3], b: [f64; 3], radius: f64 },
    Union(Vec<Shape>),
    Intersection(Vec<Shape>),
}

impl Shape {
    pub fn sphere(center: Point3, radius: f64) -> Shape {
        Shape::Sphere {
            center: center.into(),
            radius,
        }
    }

    pub fn cuboid(bbox: BoundingBox) -> Shape {
        Shape::Cuboid {
            min: bbox.min,
            max: bbox.max,
        }
    }

    pub fn torus(center: Point3, major: f64, minor: f64) -> Shape {
        Shape::Torus {
            center: center.into(),
            major,
            minor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            Shape::Empty => Ok(()),
            Shape::Sphere { radius, .. } => positive("sphere radius", *radius),
            Shape::Cuboid { min, max } => {
                BoundingBox::new(Point3::from(*min), Point3::from(*max)).map(|_| ())
            }
            Shape::Torus { major, minor, .. } => {
                positive("torus major radius", *major)?;
                positive("torus minor radius", *minor)
            }
            Shape::Cylinder {
                radius,
                half_height,
                ..
            } => {
                positive("cylinder radius", *radius)?;
                positive("cylinder half height", *half_height)
            }
            Shape::Capsule { radius, .. } => positive("capsule radius", *radius),
            Shape::Union(parts) | Shape::Intersection(parts) => {
                parts.iter().try_for_each(Shape::validate)
            }
        }
    }

    /// Signed distance and its gradient. Exact for the primitives; unions
    /// and intersections take the min/max and the active child's gradient.
    pub fn signed_distance(&self, p: &Point3) -> (f64, Vec3) {
        match self {
            Shape::Empty => (f64::INFINITY, Vec3::zeros()),
            Shape::Sphere { center, radius } => {
                let d = p - Point3::from(*center);
                let n = d.norm();
                let g = if n > 0.0 { d / n } else { Vec3::x() };
                (n - radius, g)
            }
            Shape::Cuboid { min, max } => {
                let c = (Point3::from(*min) + Point3::from(*max)) * 0.5;
                let h = (Point3::from(*max) - Point3::from(*min)) * 0.5;
                let d = p - c;
                let q = Vec3::new(d.x.abs() - h.x, d.y.abs() - h.y, d.z.abs() - h.z);
                let outside = q.map(|v| v.max(0.0));
                let on = outside.norm();
                if on > 0.0 {
                    let g = Vec3::new(
                        outside.x * d.x.signum(),
                        outside.y * d.y.signum(),
                        outside.z * d.z.signum(),
                    ) / on;
                    (on, g)
                } else {
                    let k = q.imax();
                    let mut g = Vec3::zeros();
                    g[k] = if d[k] >= 0.0 { 1.0 } else { -1.0 };
                    (q[k], g)
                }
            }
            Shape::Torus {
                center,
                major,
                minor,
            } => {
                let d = p - Point3::from(*center);
                let rho = (d.x * d.x + d.y * d.y).sqrt();
                let (cx, cy) = if rho > 0.0 { (d.x / rho, d.y / rho) } else { (1.0, 0.0) };
                let qx = rho - major;
                let qz = d.z;
                let len = (qx * qx + qz * qz).sqrt();
                let (ux, uz) = if len > 0.0 { (qx / len, qz / len) } else { (1.0, 0.0) };
                (len - minor, Vec3::new(ux * cx, ux * cy, uz))
            }
            Shape::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let d = p - Point3::from(*center);
                let rho = (d.x * d.x + d.y * d.y).sqrt();
                let (cx, cy) = if rho > 0.0 { (d.x / rho, d.y / rho) } else { (1.0, 0.0) };
                let a = rho - radius;
                let b = d.z.abs() - half_height;
                let sz = if d.z >= 0.0 { 1.0 } else { -1.0 };
                if a > 0.0 || b > 0.0 {
                    let (oa, ob) = (a.max(0.0), b.max(0.0));
                    let n = (oa * oa + ob * ob).sqrt();
                    (n, Vec3::new(oa / n * cx, oa / n * cy, ob / n * sz))
                } else if a > b {
                    (a, Vec3::new(cx, cy, 0.0))
                } else {
                    (b, Vec3::new(0.0, 0.0, sz))
                }
            }
            Shape::Capsule { a, b, radius } => {
                let (a, b) = (Point3::from(*a), Point3::from(*b));
                let ab = b - a;
                let len2 = ab.norm_squared();
                let t = if len2 > 0.0 {
                    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let d = p - (a + ab * t);
                let n = d.norm();
                let g = if n > 0.0 { d / n } else { Vec3::x() };
                (n - radius, g)
            }
            Shape::Union(parts) => parts
                .iter()
                .map(|s| s.signed_distance(p))
                .fold((f64::INFINITY, Vec3::zeros()), |acc, x| if x.0 < acc.0 { x } else { acc }),
            Shape::Intersection(parts) => {
                if parts.is_empty() {
                    return (f64::INFINITY, Vec3::zeros());
                }
                parts
                    .iter()
                    .map(|s| s.signed_distance(p))
                    .fold((f64::NEG_INFINITY, Vec3::zeros()), |acc, x| {
                        if x.0 > acc.0 {
                            x
                        } else {
                            acc
                        }
                    })
            }
        }
    }

    /// Tight bounds of the solid, `None` for an empty solid.
    pub fn bounds(&self) -> Option<BoundingBox> {
        let cube = |c: [f64; 3], h: [f64; 3]| BoundingBox {
            min: [c[0] - h[0], c[1] - h[1], c[2] - h[2]],
            max: [c[0] + h[0], c[1] + h[1], c[2] + h[2]],
        };
        match self {
            Shape::Empty => None,
            Shape::Sphere { center, radius } => Some(cube(*center, [*radius; 3])),
            Shape::Cuboid { min, max } => Some(BoundingBox {
                min: *min,
                max: *max,
            }),
            Shape::Torus {
                center,
                major,
                minor,
            } => Some(cube(*center, [major + minor, major + minor, *minor])),
            Shape::Cylinder {
                center,
                radius,
                half_height,
            } => Some(cube(*center, [*radius, *radius, *half_height])),
            Shape::Capsule { a, b, radius } => {
                Some(cube(*a, [*radius; 3]).union(&cube(*b, [*radius; 3])))
            }
            Shape::Union(parts) => parts
                .iter()
                .filter_map(Shape::bounds)
                .reduce(|a, b| a.union(&b)),
            Shape::Intersection(parts) => {
                let mut it = parts.iter().map(Shape::bounds);
                let first = it.next()??;
                it.try_fold(first, |acc, b| acc.intersection(&b?))
            }
        }
    }

    /// Exact enclosed volume where a closed form exists.
    pub fn volume(&self) -> Option<f64> {
        use std::f64::consts::PI;
        match self {
            Shape::Empty => Some(0.0),
            Shape::Sphere { radius, .. } => Some(4.0 / 3.0 * PI * radius.powi(3)),
            Shape::Cuboid { min, max } => Some((0..3).map(|k| max[k] - min[k]).product()),
            Shape::Torus { major, minor, .. } => Some(2.0 * PI * PI * major * minor * minor),
            Shape::Cylinder {
                radius,
                half_height,
                ..
            } => Some(PI * radius * radius * 2.0 * half_height),
            Shape::Capsule { a, b, radius } => {
                let len = (Point3::from(*a) - Point3::from(*b)).norm();
                Some(PI * radius * radius * len + 4.0 / 3.0 * PI * radius.powi(3))
            }
            Shape::Union(_) | Shape::Intersection(_) => None,
        }
    }
}

/// Ground-truth field of an analytic solid.
///
/// By default `eval` is the hard 0/1 indicator (points on the surface count
/// as occupied) and `grad` is the negated signed-distance gradient, a unit
/// vector pointing into the solid. With [`smoothed`](Self::smoothed),
/// `eval = sigmoid(-sd / width)` and `grad` is its exact gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticField {
    shape: Shape,
    bbox: BoundingBox,
    width: Option<f64>,
}

impl AnalyticField {
    pub fn new(shape: Shape) -> Result<Self> {
        shape.validate()?;
        let bbox = shape.bounds().unwrap_or_else(|| BoundingBox::cube(0.5));
        Ok(AnalyticField {
            shape,
            bbox,
            width: None,
        })
    }

    pub fn sphere(center: Point3, radius: f64) -> Result<Self> {
        AnalyticField::new(Shape::sphere(center, radius))
    }

    /// Overrides the support box. Points outside it evaluate to 0.
    pub fn with_bbox(mut self, bbox: BoundingBox) -> Self {
        self.bbox = bbox;
        self
    }

    /// Smooth occupancy with transition width `width`; its 0.5 level set is
    /// the exact surface.
    pub fn smoothed(mut self, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidArgument(format!("smoothing width must be positive, got {width}")));
        }
        self.width = Some(width);
        // Leave room for the soft shell outside the solid.
        if let Some(b) = self.shape.bounds() {
            let margin = 40.0 * width;
            let grown = BoundingBox {
                min: b.min.map(|v| v - margin),
                max: b.max.map(|v| v + margin),
            };
            self.bbox = self.bbox.union(&grown);
        }
        Ok(self)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn width(&self) -> Option<f64> {
        self.width
    }

    pub fn signed_distance(&self, p: &Point3) -> (f64, Vec3) {
        self.shape.signed_distance(p)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl OccupancyField for AnalyticField {
    fn eval(&self, p: &Point3) -> f64 {
        if !self.bbox.contains(p) {
            return 0.0;
        }
        let (sd, _) = self.shape.signed_distance(p);
        match self.width {
            None => (sd <= 0.0) as u8 as f64,
            Some(w) => sigmoid(-sd / w),
        }
    }

    fn grad(&self, p: &Point3) -> Vec3 {
        if !self.bbox.contains(p) {
            return Vec3::zeros();
        }
        let (sd, g) = self.shape.signed_distance(p);
        match self.width {
            None => -g,
            Some(w) => {
                let s = sigmoid(-sd / w);
                -g * (s * (1.0 - s) / w)
            }
        }
    }

    fn bbox(&self) -> BoundingBox {
        self.bbox
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::finite_difference_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere() -> AnalyticField {
        AnalyticField::sphere(Point3::zeros(), 0.5).unwrap()
    }

    fn corpus() -> Vec<Shape> {
        vec![
            Shape::sphere(Point3::new(0.05, 0.0, -0.02), 0.35),
            Shape::cuboid(BoundingBox::new(Point3::new(-0.3, -0.2, -0.25), Point3::new(0.3, 0.2, 0.25)).unwrap()),
            Shape::torus(Point3::zeros(), 0.3, 0.1),
            Shape::Cylinder {
                center: [0.0; 3],
                radius: 0.25,
                half_height: 0.3,
            },
            Shape::Capsule {
                a: [-0.25, 0.0, 0.0],
                b: [0.25, 0.1, 0.0],
                radius: 0.15,
            },
            Shape::Union(vec![
                Shape::sphere(Point3::new(-0.2, 0.0, 0.0), 0.2),
                Shape::sphere(Point3::new(0.2, 0.0, 0.0), 0.2),
            ]),
            Shape::Intersection(vec![
                Shape::sphere(Point3::new(-0.1, 0.0, 0.0), 0.35),
                Shape::sphere(Point3::new(0.1, 0.0, 0.0), 0.35),
            ]),
        ]
    }

    #[test]
    fn sphere_center_and_far_point() {
        assert_eq!(sphere().eval(&Point3::zeros()), 1.0);
        assert_eq!(sphere().eval(&Point3::new(1.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn nonpositive_radius_is_rejected() {
        assert!(AnalyticField::sphere(Point3::zeros(), 0.0).is_err());
        assert!(AnalyticField::new(Shape::torus(Point3::zeros(), 0.3, -0.1)).is_err());
    }

    #[test]
    fn boundary_counts_as_occupied() {
        assert_eq!(sphere().eval(&Point3::new(0.5, 0.0, 0.0)), 1.0);
    }

    #[test]
    fn sphere_volume_fraction_by_monte_carlo() {
        // (4/3) pi 0.5^3 / 2^3 = pi / 48
        let f = sphere().with_bbox(BoundingBox::cube(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400_000;
        let hits = (0..n)
            .filter(|_| {
                let p = BoundingBox::cube(1.0).lerp([rng.random(), rng.random(), rng.random()]);
                f.eval(&p) >= 0.5
            })
            .count();
        let frac = hits as f64 / n as f64;
        let expected = std::f64::consts::PI / 48.0;
        assert!((frac - expected).abs() < 0.01 * expected, "{frac} vs {expected}");
    }

    #[test]
    fn smoothed_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for shape in corpus() {
            let f = AnalyticField::new(shape.clone()).unwrap().smoothed(0.05).unwrap();
            let mut checked = 0;
            while checked < 100 {
                let p = f.bbox().lerp([rng.random(), rng.random(), rng.random()]);
                let g = f.grad(&p);
                let fd = finite_difference_grad(&f, &p, 1e-4);
                // Skip kinks of the distance function (medial axis, union
                // seams) where eval is not smooth at this step size.
                let fd_fine = finite_difference_grad(&f, &p, 1e-6);
                if (fd - fd_fine).norm() > 1e-6 * fd.norm().max(1e-3) || g.norm() < 1e-6 {
                    continue;
                }
                assert!((g - fd).norm() <= 1e-3 * g.norm(), "{shape:?} at {p:?}: {g:?} vs {fd:?}");
                checked += 1;
            }
        }
    }

    #[test]
    fn indicator_gradient_points_into_the_solid() {
        let f = AnalyticField::new(Shape::torus(Point3::zeros(), 0.3, 0.1)).unwrap();
        let g = f.grad(&Point3::new(0.38, 0.0, 0.0));
        assert!((g - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn distances_are_exact_for_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Sphere-tracing oracle: |sd| must equal the distance to a dense
        // surface sample cloud up to the cloud's spacing.
        for shape in corpus().into_iter().take(5) {
            let bb = shape.bounds().unwrap().padded(0.2);
            let mut surface = Vec::new();
            while surface.len() < 20_000 {
                let p = bb.lerp([rng.random(), rng.random(), rng.random()]);
                let (sd, g) = shape.signed_distance(&p);
                let q = p - g * sd;
                if shape.signed_distance(&q).0.abs() < 1e-9 {
                    surface.push(q);
                }
            }
            for _ in 0..50 {
                let p = bb.lerp([rng.random(), rng.random(), rng.random()]);
                let (sd, _) = shape.signed_distance(&p);
                let nearest = surface.iter().map(|s| (s - p).norm()).fold(f64::INFINITY, f64::min);
                assert!(sd.abs() <= nearest + 1e-9, "{shape:?}: {sd} vs {nearest}");
                assert!(nearest - sd.abs() < 0.05, "{shape:?}: {sd} vs {nearest}");
            }
        }
    }

    #[test]
    fn union_with_itself_and_intersection_with_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for shape in corpus() {
            let f = AnalyticField::new(shape.clone()).unwrap();
            let u = AnalyticField::new(Shape::Union(vec![shape.clone(), shape.clone()]))
                .unwrap()
                .with_bbox(f.bbox());
            let i = AnalyticField::new(Shape::Intersection(vec![shape.clone(), Shape::Empty])).unwrap();
            for _ in 0..500 {
                let p = f.bbox().padded(0.1).lerp([rng.random(), rng.random(), rng.random()]);
                assert_eq!(u.eval(&p), f.eval(&p));
                assert_eq!(i.eval(&p), 0.0);
            }
        }
    }

    #[test]
    fn closed_form_volumes_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for shape in corpus().into_iter().take(5) {
            let f = AnalyticField::new(shape.clone()).unwrap();
            let bb = f.bbox();
            let n = 200_000;
            let hits = (0..n)
                .filter(|_| f.eval(&bb.lerp([rng.random(), rng.random(), rng.random()])) > 0.5)
                .count();
            let est = hits as f64 / n as f64 * bb.volume();
            let exact = shape.volume().unwrap();
            assert!((est - exact).abs() < 0.02 * exact, "{shape:?}: {est} vs {exact}");
        }
    }
}
