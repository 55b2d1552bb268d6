use std::collections::HashMap;

use rand::Rng;

use super::{is_finite, BoundingBox, Point3, Vec3};
use crate::error::{Error, Result};

/// Indexed triangle mesh.
///
/// Faces are wound counter-clockwise when seen from outside, so the face
/// normal `(b - a) x (c - a)` points away from the enclosed solid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    /// Builds a mesh and checks its invariants.
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = TriangleMesh {
            vertices,
            faces,
            normals: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn empty() -> Self {
        TriangleMesh::default()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.vertices.iter().position(|v| !is_finite(v)) {
            return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
        }
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            for &idx in f {
                if idx >= n {
                    return Err(Error::IndexOutOfRange {
                        face: fi,
                        index: idx,
                        count: n,
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} repeats a vertex: {f:?}"
                )));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::InvalidMesh(format!(
                    "{} normals for {n} vertices",
                    normals.len()
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn bbox(&self) -> Option<BoundingBox> {
        BoundingBox::from_points(&self.vertices)
    }

    pub fn triangle(&self, face: usize) -> [Point3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized face normal; its length is twice the face area.
    pub fn face_cross(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    /// Unit face normal, or zero for a degenerate face.
    pub fn face_normal(&self, face: usize) -> Vec3 {
        let n = self.face_cross(face);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume (positive for outward winding).
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                self.vertices[a].dot(&self.vertices[b].cross(&self.vertices[c])) / 6.0
            })
            .sum()
    }

    /// Area-weighted vertex normals from the face normals.
    pub fn area_weighted_vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![Vec3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let n = self.face_cross(fi);
            for &v in f {
                normals[v] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    /// Undirected edge -> number of incident faces.
    pub fn edge_valence(&self) -> HashMap<(usize, usize), usize> {
        let mut edges = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every edge is shared by exactly two faces that traverse it in
    /// opposite directions.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &count)| count == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// V - E + F over the vertices referenced by faces.
    pub fn euler_characteristic(&self) -> i64 {
        let edges = self.edge_valence().len() as i64;
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &v in f {
                used[v] = true;
            }
        }
        let verts = used.iter().filter(|&&u| u).count() as i64;
        verts - edges + self.faces.len() as i64
    }

    /// Drops vertices that no face references, remapping indices.
    pub fn compact(&self) -> TriangleMesh {
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut normals = self.normals.as_ref().map(|_| Vec::new());
        let faces = self
            .faces
            .iter()
            .map(|f| {
                f.map(|v| {
                    if remap[v] == usize::MAX {
                        remap[v] = vertices.len();
                        vertices.push(self.vertices[v]);
                        if let (Some(out), Some(src)) = (normals.as_mut(), self.normals.as_ref()) {
                            out.push(src[v]);
                        }
                    }
                    remap[v]
                })
            })
            .collect();
        TriangleMesh {
            vertices,
            faces,
            normals,
        }
    }

    pub fn translated(&self, offset: Vec3) -> TriangleMesh {
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v += offset;
        }
        out
    }

    /// Rescales and recenters so the mesh fits centered in `[-0.5, 0.5]^3`
    /// with its longest bbox edge spanning the full cube.
    pub fn normalized(&self) -> TriangleMesh {
        let Some(bbox) = self.bbox() else {
            return self.clone();
        };
        let scale = bbox.max_edge();
        if scale <= 0.0 {
            return self.clone();
        }
        let center = bbox.center();
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = (*v - center) / scale;
        }
        out
    }

    /// Area-weighted uniform surface samples with their face normals.
    pub fn sample_surface<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<(Point3, Vec3)>> {
        let mut cumulative = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            total += self.face_area(f);
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::InvalidMesh("surface has zero total area".into()));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.random::<f64>() * total;
            let face = cumulative
                .partition_point(|&c| c <= target)
                .min(self.faces.len() - 1);
            let (u, v): (f64, f64) = (rng.random(), rng.random());
            let su = u.sqrt();
            let [a, b, c] = self.triangle(face);
            let p = a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v);
            out.push((p, self.face_normal(face)));
        }
        Ok(out)
    }

    /// Axis-aligned box with outward-facing triangles (8 vertices, 12 faces).
    pub fn cuboid(bbox: &BoundingBox) -> TriangleMesh {
        let (lo, hi) = (bbox.min, bbox.max);
        let vertices = (0..8)
            .map(|i| {
                Point3::new(
                    if i & 1 == 0 { lo[0] } else { hi[0] },
                    if i & 2 == 0 { lo[1] } else { hi[1] },
                    if i & 4 == 0 { lo[2] } else { hi[2] },
                )
            })
            .collect();
        let faces = vec![
            [0, 2, 1],
            [1, 2, 3],
            [4, 5, 6],
            [5, 7, 6],
            [0, 1, 4],
            [1, 5, 4],
            [2, 6, 3],
            [3, 6, 7],
            [0, 4, 2],
            [2, 4, 6],
            [1, 3, 5],
            [3, 7, 5],
        ];
        TriangleMesh {
            vertices,
            faces,
            normals: None,
        }
    }

    /// Geodesic sphere from a subdivided icosahedron: `20 * 4^level` faces.
    pub fn icosphere(center: Point3, radius: f64, level: usize) -> TriangleMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Point3> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|v| Point3::from(*v).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..level {
            let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Point3>| {
                *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    vertices.push(((vertices[a] + vertices[b]) * 0.5).normalize());
                    vertices.len() - 1
                })
            };
            for &[a, b, c] in &faces {
                let ab = midpoint(a, b, &mut vertices);
                let bc = midpoint(b, c, &mut vertices);
                let ca = midpoint(c, a, &mut vertices);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        for v in &mut vertices {
            *v = center + *v * radius;
        }
        TriangleMesh {
            vertices,
            faces,
            normals: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cuboid_is_closed_and_outward() {
        let m = TriangleMesh::cuboid(&BoundingBox::cube(0.5));
        m.validate().unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!((m.signed_volume() - 1.0).abs() < 1e-12);
        assert!((m.area() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn icosphere_face_count_and_orientation() {
        let m = TriangleMesh::icosphere(Point3::zeros(), 0.5, 3);
        assert_eq!(m.faces.len(), 1280);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
        for f in 0..m.faces.len() {
            let [a, b, c] = m.triangle(f);
            let centroid = (a + b + c) / 3.0;
            assert!(m.face_normal(f).dot(&centroid) > 0.0);
        }
    }

    #[test]
    fn rejects_repeated_vertex_faces() {
        let v = vec![Point3::zeros(), Point3::x(), Point3::y()];
        assert!(TriangleMesh::new(v, vec![[0, 1, 1]]).is_err());
    }

    #[test]
    fn single_triangle_samples_lie_in_plane() {
        let v = vec![
            Point3::new(0.1, 0.2, 0.3),
            Point3::new(1.0, -0.4, 0.7),
            Point3::new(-0.3, 0.9, 0.2),
        ];
        let m = TriangleMesh::new(v, vec![[0, 1, 2]]).unwrap();
        let n = m.face_normal(0);
        let a = m.vertices[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (p, normal) in m.sample_surface(1000, &mut rng).unwrap() {
            assert!((p - a).dot(&n).abs() < 1e-12);
            assert_eq!(normal, n);
        }
    }

    #[test]
    fn area_split_follows_face_areas() {
        // Areas 1 and 3, n = 100k: binomial sd of the first fraction is
        // sqrt(0.25 * 0.75 / 1e5) ~ 0.00137, so a 2% relative band on 0.25
        // (0.005) is more than 3.6 sd.
        let v = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(16.0, 0.0, 0.0),
            Point3::new(10.0, 1.0, 0.0),
        ];
        let m = TriangleMesh::new(v, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        assert!((m.face_area(0) - 1.0).abs() < 1e-12);
        assert!((m.face_area(1) - 3.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = m.sample_surface(100_000, &mut rng).unwrap();
        let first = samples.iter().filter(|(p, _)| p.x < 5.0).count() as f64 / 1e5;
        assert!((first - 0.25).abs() < 0.25 * 0.02, "fraction {first}");
    }

    #[test]
    fn zero_area_mesh_cannot_be_sampled() {
        let v = vec![Point3::zeros(), Point3::x(), Point3::x() * 2.0];
        let m = TriangleMesh::new(v, vec![[0, 1, 2]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.sample_surface(10, &mut rng).is_err());
    }

    #[test]
    fn sphere_sample_mean_is_near_origin() {
        let m = TriangleMesh::icosphere(Point3::zeros(), 1.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = m.sample_surface(100_000, &mut rng).unwrap();
        let mean = samples.iter().fold(Vec3::zeros(), |acc, (p, _)| acc + p) / 1e5;
        assert!(mean.norm() < 0.01, "mean {mean:?}");
    }

    #[test]
    fn per_face_fractions_pass_chi_square() {
        // 80 faces with unequal areas; chi-square with 79 dof has its
        // p = 0.001 critical value near 124.8.
        let mut m = TriangleMesh::icosphere(Point3::zeros(), 1.0, 1);
        for (i, v) in m.vertices.iter_mut().enumerate() {
            *v *= 1.0 + 0.3 * ((i * 7919) % 13) as f64 / 13.0;
        }
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = m.sample_surface(n, &mut rng).unwrap();
        // Attribute each sample back to its face by barycentric containment.
        let mut counts = vec![0usize; m.faces.len()];
        for (p, normal) in &samples {
            let face = (0..m.faces.len())
                .find(|&f| {
                    let [a, b, c] = m.triangle(f);
                    let n = m.face_normal(f);
                    if n.dot(normal) < 1.0 - 1e-12 || (p - a).dot(&n).abs() > 1e-9 {
                        return false;
                    }
                    let inside = |u: Point3, v: Point3| (v - u).cross(&(p - u)).dot(&n) >= -1e-12;
                    inside(a, b) && inside(b, c) && inside(c, a)
                })
                .expect("sample on some face");
            counts[face] += 1;
        }
        let total = m.area();
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .map(|(f, &c)| {
                let expected = n as f64 * m.face_area(f) / total;
                (c as f64 - expected).powi(2) / expected
            })
            .sum();
        assert!(chi2 < 124.8, "chi2 = {chi2}");
    }
}
