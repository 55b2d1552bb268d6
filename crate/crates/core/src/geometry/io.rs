//! ASCII OFF and OBJ readers/writers.
//!
//! Coordinates are written with the shortest decimal representation that
//! parses back to the same `f64`, so OFF round trips are bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{is_finite, Point3, TriangleMesh};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    /// Guesses the format from the file extension.
    pub fn from_path(path: &Path) -> Option<MeshFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "off" => Some(MeshFormat::Off),
            "obj" => Some(MeshFormat::Obj),
            _ => None,
        }
    }
}

pub fn load_mesh(path: impl AsRef<Path>, format: MeshFormat) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mesh = match format {
        MeshFormat::Off => parse_off(&text, path)?,
        MeshFormat::Obj => parse_obj(&text, path)?,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn save_mesh(mesh: &TriangleMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    mesh.validate()?;
    let text = match format {
        MeshFormat::Off => write_off(mesh),
        MeshFormat::Obj => write_obj(mesh),
    };
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad number {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite coordinate {tok:?}")));
    }
    Ok(v)
}

fn parse_index(tok: &str, path: &Path, line: usize) -> Result<i64> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("bad index {tok:?}")))
}

/// Polygons are fan-triangulated.
fn push_polygon(faces: &mut Vec<[usize; 3]>, poly: &[usize]) {
    for k in 1..poly.len().saturating_sub(1) {
        faces.push([poly[0], poly[k], poly[k + 1]]);
    }
}

fn parse_off(text: &str, path: &Path) -> Result<TriangleMesh> {
    // (line number, tokens) with comments and blank lines dropped.
    let mut lines = text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l))
    });

    let (header_line, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let mut counts_src = if let Some(rest) = header.strip_prefix("OFF") {
        rest.trim().to_string()
    } else {
        return Err(parse_err(path, header_line, "missing OFF header"));
    };
    let mut counts_line = header_line;
    if counts_src.is_empty() {
        let (l, c) = lines
            .next()
            .ok_or_else(|| parse_err(path, header_line, "missing counts line"))?;
        counts_src = c.to_string();
        counts_line = l;
    }
    let counts: Vec<usize> = counts_src
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| parse_err(path, counts_line, format!("bad count {t:?}")))
        })
        .collect::<Result<_>>()?;
    if counts.len() < 2 {
        return Err(parse_err(path, counts_line, "expected vertex and face counts"));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, src) = lines
            .next()
            .ok_or_else(|| parse_err(path, counts_line, "unexpected end of vertex list"))?;
        let coords: Vec<f64> = src
            .split_whitespace()
            .take(3)
            .map(|t| parse_f64(t, path, l))
            .collect::<Result<_>>()?;
        if coords.len() != 3 {
            return Err(parse_err(path, l, "vertex needs 3 coordinates"));
        }
        vertices.push(Point3::new(coords[0], coords[1], coords[2]));
    }

    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, src) = lines
            .next()
            .ok_or_else(|| parse_err(path, counts_line, "unexpected end of face list"))?;
        let toks: Vec<i64> = src
            .split_whitespace()
            .map(|t| parse_index(t, path, l))
            .collect::<Result<_>>()?;
        let k = *toks
            .first()
            .ok_or_else(|| parse_err(path, l, "empty face line"))? as usize;
        if k < 3 || toks.len() < k + 1 {
            return Err(parse_err(path, l, format!("face needs {k} >= 3 indices")));
        }
        let mut poly = Vec::with_capacity(k);
        for &idx in &toks[1..=k] {
            if idx < 0 {
                return Err(parse_err(path, l, format!("negative index {idx}")));
            }
            if idx as usize >= nv {
                return Err(Error::IndexOutOfRange {
                    face: faces.len(),
                    index: idx as usize,
                    count: nv,
                });
            }
            poly.push(idx as usize);
        }
        push_polygon(&mut faces, &poly);
    }
    Ok(TriangleMesh {
        vertices,
        faces,
        normals: None,
    })
}

fn parse_obj(text: &str, path: &Path) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let l = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let c: Vec<f64> = toks.take(3).map(|t| parse_f64(t, path, l)).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(parse_err(path, l, "vertex needs 3 coordinates"));
                }
                vertices.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("vn") => {
                let c: Vec<f64> = toks.take(3).map(|t| parse_f64(t, path, l)).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(parse_err(path, l, "normal needs 3 components"));
                }
                normals.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for t in toks {
                    let head = t.split('/').next().unwrap_or("");
                    let idx = parse_index(head, path, l)?;
                    let resolved = if idx > 0 {
                        idx - 1
                    } else if idx < 0 {
                        vertices.len() as i64 + idx
                    } else {
                        return Err(parse_err(path, l, "OBJ indices are 1-based"));
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(Error::IndexOutOfRange {
                            face: faces.len(),
                            index: resolved.max(0) as usize,
                            count: vertices.len(),
                        });
                    }
                    poly.push(resolved as usize);
                }
                if poly.len() < 3 {
                    return Err(parse_err(path, l, "face needs at least 3 vertices"));
                }
                push_polygon(&mut faces, &poly);
            }
            _ => {}
        }
    }
    let normals = (normals.len() == vertices.len() && !normals.is_empty()).then_some(normals);
    Ok(TriangleMesh {
        vertices,
        faces,
        normals,
    })
}

fn write_off(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "OFF");
    let _ = writeln!(out, "{} {} 0", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
    }
    out
}

fn write_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    if let Some(normals) = &mesh.normals {
        for n in normals.iter().filter(|n| is_finite(n)) {
            let _ = writeln!(out, "vn {} {} {}", n.x, n.y, n.z);
        }
    }
    for f in &mesh.faces {
        if mesh.normals.is_some() {
            let _ = writeln!(
                out,
                "f {a}//{a} {b}//{b} {c}//{c}",
                a = f[0] + 1,
                b = f[1] + 1,
                c = f[2] + 1
            );
        } else {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use proptest::prelude::*;

    const UNIT_CUBE_OFF: &str = "OFF
# unit cube
8 12 0
0 0 0
1 0 0
0 1 0
1 1 0
0 0 1
1 0 1
0 1 1
1 1 1
3 0 2 1
3 1 2 3
3 4 5 6
3 5 7 6
3 0 1 4
3 1 5 4
3 2 6 3
3 3 6 7
3 0 4 2
3 2 4 6
3 1 3 5
3 3 7 5
";

    fn write_tmp(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_off() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "tri.off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n");
        let m = load_mesh(&p, MeshFormat::Off).unwrap();
        assert_eq!(m.faces.len(), 1);
    }

    #[test]
    fn unit_cube_off() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "cube.off", UNIT_CUBE_OFF);
        let m = load_mesh(&p, MeshFormat::Off).unwrap();
        assert_eq!(m.faces.len(), 12);
        let b = m.bbox().unwrap();
        assert_eq!(b.min, [0.0; 3]);
        assert_eq!(b.max, [1.0; 3]);
        assert!(m.is_watertight());
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = UNIT_CUBE_OFF.replace("3 3 7 5", "3 3 7 99");
        let p = write_tmp(&dir, "bad.off", &text);
        match load_mesh(&p, MeshFormat::Off) {
            Err(Error::IndexOutOfRange { index: 99, count: 8, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "bad.off", "OFF\n3 1 0\n0 0 0\n1 zero 0\n0 1 0\n3 0 1 2\n");
        match load_mesh(&p, MeshFormat::Off) {
            Err(Error::Parse { line: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_mesh_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.off");
        save_mesh(&TriangleMesh::empty(), &p, MeshFormat::Off).unwrap();
        let m = load_mesh(&p, MeshFormat::Off).unwrap();
        assert!(m.vertices.is_empty() && m.faces.is_empty());
    }

    #[test]
    fn nan_vertex_is_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.off");
        let mut m = TriangleMesh::cuboid(&BoundingBox::cube(0.5));
        m.vertices[3].y = f64::NAN;
        assert!(save_mesh(&m, &p, MeshFormat::Off).is_err());
        assert!(!p.exists());
    }

    #[test]
    fn obj_round_trip_and_polygons() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            &dir,
            "quad.obj",
            "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n",
        );
        let m = load_mesh(&p, MeshFormat::Obj).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        let q = dir.path().join("copy.obj");
        save_mesh(&m, &q, MeshFormat::Obj).unwrap();
        assert_eq!(load_mesh(&q, MeshFormat::Obj).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn off_round_trip_is_bit_exact(
            coords in proptest::collection::vec(
                (-1e6f64..1e6, -1.0f64..1.0, proptest::num::f64::NORMAL), 3..40)
        ) {
            let vertices: Vec<Point3> = coords
                .iter()
                .map(|&(a, b, c)| Point3::new(a, b, c))
                .collect();
            let n = vertices.len();
            let faces = (0..n - 2).map(|i| [i, i + 1, i + 2]).collect();
            let mesh = TriangleMesh::new(vertices, faces).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.off");
            save_mesh(&mesh, &p, MeshFormat::Off).unwrap();
            let back = load_mesh(&p, MeshFormat::Off).unwrap();
            for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
                for k in 0..3 {
                    prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
                }
            }
            prop_assert_eq!(&mesh.faces, &back.faces);
        }
    }
}
