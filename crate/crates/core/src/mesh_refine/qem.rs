//! Quadric error edge collapse.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use nalgebra::{Matrix3, Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{Point3, TriangleMesh};

/// Cosine below which a collapse is rejected for flipping a face.
const FLIP_COS: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    cost: f64,
    a: usize,
    b: usize,
    stamp: (u32, u32),
    target: Point3,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Min-heap on cost, ties broken by vertex ids for determinism.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

struct Simplifier {
    pos: Vec<Point3>,
    quadric: Vec<Matrix4<f64>>,
    version: Vec<u32>,
    removed: Vec<bool>,
    locked: Vec<bool>,
    faces: Vec<[usize; 3]>,
    alive: Vec<bool>,
    incident: Vec<Vec<usize>>,
    live_faces: usize,
}

fn plane_quadric(t: [Point3; 3]) -> Option<Matrix4<f64>> {
    let n = (t[1] - t[0]).cross(&(t[2] - t[0]));
    let len = n.norm();
    if len <= 1e-300 {
        return None;
    }
    let n = n / len;
    let p = Vector4::new(n.x, n.y, n.z, -n.dot(&t[0]));
    Some(p * p.transpose())
}

fn quadric_error(q: &Matrix4<f64>, v: &Point3) -> f64 {
    let h = Vector4::new(v.x, v.y, v.z, 1.0);
    (h.transpose() * q * h)[0].max(0.0)
}

impl Simplifier {
    fn new(mesh: &TriangleMesh) -> Simplifier {
        let n = mesh.vertices.len();
        let mut quadric = vec![Matrix4::zeros(); n];
        let mut incident = vec![Vec::new(); n];
        for (fi, f) in mesh.faces.iter().enumerate() {
            if let Some(q) = plane_quadric(mesh.triangle(fi)) {
                for &v in f {
                    quadric[v] += q;
                }
            }
            for &v in f {
                incident[v].push(fi);
            }
        }
        // Vertices on open or non-manifold edges stay where they are.
        let mut locked = vec![false; n];
        let mut skipped = 0;
        for ((a, b), count) in mesh.edge_valence() {
            if count != 2 {
                locked[a] = true;
                locked[b] = true;
                skipped += 1;
            }
        }
        if skipped > 0 {
            log::warn!("{skipped} boundary or non-manifold edges are excluded from simplification");
        }
        Simplifier {
            pos: mesh.vertices.clone(),
            quadric,
            version: vec![0; n],
            removed: vec![false; n],
            locked,
            faces: mesh.faces.clone(),
            alive: vec![true; mesh.faces.len()],
            incident,
            live_faces: mesh.faces.len(),
        }
    }

    fn neighbours(&self, v: usize) -> HashSet<usize> {
        let mut out = HashSet::new();
        for &f in &self.incident[v] {
            if self.alive[f] {
                for &w in &self.faces[f] {
                    if w != v {
                        out.insert(w);
                    }
                }
            }
        }
        out
    }

    fn candidate(&self, a: usize, b: usize) -> Option<Candidate> {
        if self.locked[a] && self.locked[b] {
            return None;
        }
        let q = self.quadric[a] + self.quadric[b];
        let target = if self.locked[a] {
            self.pos[a]
        } else if self.locked[b] {
            self.pos[b]
        } else {
            let m: Matrix3<f64> = q.fixed_view::<3, 3>(0, 0).into();
            let rhs = -q.fixed_view::<3, 1>(0, 3).into_owned();
            let solved = if m.determinant().abs() > 1e-12 * m.norm().powi(3).max(1e-300) {
                m.try_inverse().map(|inv| inv * rhs)
            } else {
                None
            };
            match solved {
                Some(p) if p.iter().all(|v| v.is_finite()) => p,
                _ => {
                    let mid = (self.pos[a] + self.pos[b]) * 0.5;
                    [self.pos[a], self.pos[b], mid]
                        .into_iter()
                        .min_by(|x, y| quadric_error(&q, x).total_cmp(&quadric_error(&q, y)))
                        .unwrap()
                }
            }
        };
        Some(Candidate {
            cost: quadric_error(&q, &target),
            a,
            b,
            stamp: (self.version[a], self.version[b]),
            target,
        })
    }

    fn collapse_is_valid(&self, a: usize, b: usize, target: &Point3) -> bool {
        let shared: Vec<usize> = self.incident[a]
            .iter()
            .copied()
            .filter(|&f| self.alive[f] && self.faces[f].contains(&b))
            .collect();
        if shared.len() != 2 {
            return false;
        }
        // Link condition: the endpoints may only share the two vertices
        // opposite the collapsed edge.
        let common = self.neighbours(a).intersection(&self.neighbours(b)).count();
        if common != 2 {
            return false;
        }
        if self.live_faces - 2 < 4 {
            return false;
        }
        for &v in &[a, b] {
            for &f in &self.incident[v] {
                if !self.alive[f] || shared.contains(&f) {
                    continue;
                }
                let tri = self.faces[f];
                let before = self.face_cross(tri, None);
                let after = self.face_cross(tri, Some((v, target)));
                let (lb, la) = (before.norm(), after.norm());
                if la <= 1e-300 || lb <= 1e-300 || before.dot(&after) < FLIP_COS * lb * la {
                    return false;
                }
            }
        }
        true
    }

    fn face_cross(&self, tri: [usize; 3], moved: Option<(usize, &Point3)>) -> Point3 {
        let p = |i: usize| match moved {
            Some((v, t)) if v == i => *t,
            _ => self.pos[i],
        };
        (p(tri[1]) - p(tri[0])).cross(&(p(tri[2]) - p(tri[0])))
    }

    fn collapse(&mut self, a: usize, b: usize, target: Point3) {
        let moved = std::mem::take(&mut self.incident[b]);
        for &f in &moved {
            if !self.alive[f] {
                continue;
            }
            if self.faces[f].contains(&a) {
                self.alive[f] = false;
                self.live_faces -= 1;
            } else {
                for v in self.faces[f].iter_mut() {
                    if *v == b {
                        *v = a;
                    }
                }
                self.incident[a].push(f);
            }
        }
        let alive = &self.alive;
        self.incident[a].retain(|&f| alive[f]);
        self.removed[b] = true;
        self.pos[a] = target;
        self.quadric[a] = self.quadric[a] + self.quadric[b];
        self.locked[a] |= self.locked[b];
        self.version[a] += 1;
        self.version[b] += 1;
    }

    fn edges_of(&self, v: usize) -> Vec<(usize, usize)> {
        let mut n: Vec<usize> = self.neighbours(v).into_iter().collect();
        n.sort_unstable();
        n.into_iter().map(|w| (v.min(w), v.max(w))).collect()
    }
}

/// Collapses edges in order of quadric error until at most
/// `target_faces` faces remain, or no collapse keeps the mesh manifold.
pub fn simplify_qem(mesh: &TriangleMesh, target_faces: usize) -> Result<TriangleMesh> {
    if target_faces < 4 {
        return Err(Error::InvalidArgument(format!(
            "simplification target must be >= 4, got {target_faces}"
        )));
    }
    mesh.validate()?;
    if target_faces >= mesh.faces.len() {
        return Ok(mesh.clone());
    }
    let mut s = Simplifier::new(mesh);
    let mut heap = BinaryHeap::new();
    let mut edges: Vec<(usize, usize)> = mesh.edge_valence().into_keys().collect();
    edges.sort_unstable();
    for (a, b) in edges {
        if let Some(c) = s.candidate(a, b) {
            heap.push(c);
        }
    }

    while s.live_faces > target_faces {
        let Some(c) = heap.pop() else {
            log::warn!(
                "simplification stopped at {} faces, no valid collapse remains (target {target_faces})",
                s.live_faces
            );
            break;
        };
        if s.removed[c.a] || s.removed[c.b] || c.stamp != (s.version[c.a], s.version[c.b]) {
            continue;
        }
        if !s.collapse_is_valid(c.a, c.b, &c.target) {
            continue;
        }
        s.collapse(c.a, c.b, c.target);
        for (x, y) in s.edges_of(c.a) {
            if let Some(nc) = s.candidate(x, y) {
                heap.push(nc);
            }
        }
    }

    let faces: Vec<[usize; 3]> = s
        .faces
        .iter()
        .zip(&s.alive)
        .filter(|(_, &alive)| alive)
        .map(|(f, _)| *f)
        .collect();
    let out = TriangleMesh::new(s.pos, faces)?;
    Ok(out.compact())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    fn grid_plane(n: usize) -> TriangleMesh {
        let mut vertices = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                vertices.push(Point3::new(i as f64 / n as f64, j as f64 / n as f64, 0.0));
            }
        }
        let id = |i: usize, j: usize| i * (n + 1) + j;
        let mut faces = Vec::new();
        for i in 0..n {
            for j in 0..n {
                faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        TriangleMesh::new(vertices, faces).unwrap()
    }

    #[test]
    fn reaches_target_and_stays_watertight() {
        let sphere = TriangleMesh::icosphere(Point3::zeros(), 0.5, 3);
        assert_eq!(sphere.faces.len(), 1280);
        let out = simplify_qem(&sphere, 320).unwrap();
        assert!(out.faces.len() <= 320);
        assert!(out.faces.len() >= 300);
        assert!(out.is_watertight());
        assert_eq!(out.euler_characteristic(), 2);
        for f in &out.faces {
            assert!(f[0] != f[1] && f[1] != f[2] && f[0] != f[2]);
        }
        for v in &out.vertices {
            assert!((v.norm() - 0.5).abs() < 0.02, "{}", v.norm());
        }
        assert!(out.signed_volume() > 0.0);
    }

    #[test]
    fn large_target_is_identity() {
        let sphere = TriangleMesh::icosphere(Point3::zeros(), 0.5, 1);
        assert_eq!(simplify_qem(&sphere, 80).unwrap(), sphere);
        assert_eq!(simplify_qem(&sphere, 1000).unwrap(), sphere);
    }

    #[test]
    fn small_target_rejected() {
        let sphere = TriangleMesh::icosphere(Point3::zeros(), 0.5, 1);
        assert!(simplify_qem(&sphere, 3).is_err());
    }

    #[test]
    fn planar_regions_stay_planar() {
        let plane = grid_plane(8);
        let out = simplify_qem(&plane, 20).unwrap();
        for v in &out.vertices {
            assert!(v.z.abs() < 1e-9);
        }
        // Boundary is locked, so the outline is preserved.
        assert!((out.area() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn box_stays_close_to_original() {
        use crate::fields::{AnalyticField, Shape};
        use crate::marching_cubes::{marching_cubes, CornerGrid};
        let b = BoundingBox::new(Point3::new(-0.3, -0.3, -0.3), Point3::new(0.3, 0.3, 0.3)).unwrap();
        let f = AnalyticField::new(Shape::cuboid(b)).unwrap().with_bbox(BoundingBox::cube(0.5));
        let grid = CornerGrid::sample(&f, 20, BoundingBox::cube(0.5));
        let mesh = marching_cubes(&grid, 0.5);
        let out = simplify_qem(&mesh, 200).unwrap();
        assert!(out.faces.len() <= 200);
        assert!(out.is_watertight());
        // Flat sides collapse at zero cost, so vertices barely leave the
        // original surface.
        let index = crate::geometry::MeshIndex::new(mesh.clone());
        for v in &out.vertices {
            let (_, _, d) = index.closest_point(v).unwrap();
            assert!(d < 5e-3, "{v:?} {d}");
        }
    }
}
