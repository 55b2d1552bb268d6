//! Table-driven marching cubes over dense or sparse corner samples.

mod tables;

use std::collections::HashMap;

use crate::fields::OccupancyField;
use crate::geometry::{BoundingBox, Point3, TriangleMesh, Vec3};

use tables::TRI_TABLE;

/// Corner offsets in table order.
pub(crate) const CORNERS: [[u32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs of the twelve cube edges in table order.
pub(crate) const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [3, 2],
    [0, 3],
    [4, 5],
    [5, 6],
    [7, 6],
    [4, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Integer grid coordinate of a corner.
pub type CornerKey = [u32; 3];

#[derive(Debug, Clone)]
enum Values {
    Dense(Vec<f64>),
    Sparse(HashMap<CornerKey, f64>),
}

/// Scalar samples at the `(n + 1)^3` corners of an `n^3` cell grid.
///
/// A sparse grid only triangulates cells whose eight corners are all
/// present; [`value`](Self::value) reports absent corners as 0.
#[derive(Debug, Clone)]
pub struct CornerGrid {
    resolution: usize,
    bbox: BoundingBox,
    values: Values,
}

impl CornerGrid {
    /// Dense grid; `values` is indexed `(i * (n+1) + j) * (n+1) + k`.
    pub fn dense(resolution: usize, bbox: BoundingBox, values: Vec<f64>) -> Self {
        assert!(resolution >= 1, "corner grid resolution must be >= 1");
        let m = resolution + 1;
        assert_eq!(values.len(), m * m * m, "dense corner grid needs (n+1)^3 values");
        assert!(values.iter().all(|v| v.is_finite()), "corner values must be finite");
        CornerGrid {
            resolution,
            bbox,
            values: Values::Dense(values),
        }
    }

    pub fn sparse(resolution: usize, bbox: BoundingBox, values: HashMap<CornerKey, f64>) -> Self {
        assert!(resolution >= 1, "corner grid resolution must be >= 1");
        assert!(values.values().all(|v| v.is_finite()), "corner values must be finite");
        CornerGrid {
            resolution,
            bbox,
            values: Values::Sparse(values),
        }
    }

    /// Evaluates `field` at every corner.
    pub fn sample<F: OccupancyField + ?Sized>(field: &F, resolution: usize, bbox: BoundingBox) -> Self {
        let m = resolution + 1;
        let mut points = Vec::with_capacity(m * m * m);
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    points.push(corner_position(&bbox, resolution, [i as u32, j as u32, k as u32]));
                }
            }
        }
        CornerGrid::dense(resolution, bbox, field.eval_batch(&points))
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    fn lookup(&self, key: CornerKey) -> Option<f64> {
        match &self.values {
            Values::Dense(v) => {
                let m = self.resolution + 1;
                let [i, j, k] = key.map(|c| c as usize);
                (i < m && j < m && k < m).then(|| v[(i * m + j) * m + k])
            }
            Values::Sparse(map) => map.get(&key).copied(),
        }
    }

    pub fn value(&self, key: CornerKey) -> f64 {
        self.lookup(key).unwrap_or(0.0)
    }

    pub fn position(&self, key: CornerKey) -> Point3 {
        corner_position(&self.bbox, self.resolution, key)
    }

    /// Cells to visit, in lexicographic `(i, j, k)` order.
    fn cells(&self) -> Vec<CornerKey> {
        let n = self.resolution as u32;
        match &self.values {
            Values::Dense(_) => {
                let mut out = Vec::with_capacity((n * n * n) as usize);
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            out.push([i, j, k]);
                        }
                    }
                }
                out
            }
            Values::Sparse(map) => {
                let mut out: Vec<CornerKey> = map
                    .keys()
                    .filter(|c| c.iter().all(|&x| x < n))
                    .filter(|c| {
                        CORNERS
                            .iter()
                            .all(|o| map.contains_key(&[c[0] + o[0], c[1] + o[1], c[2] + o[2]]))
                    })
                    .copied()
                    .collect();
                out.sort_unstable();
                out
            }
        }
    }
}

pub(crate) fn corner_position(bbox: &BoundingBox, resolution: usize, key: CornerKey) -> Point3 {
    let n = resolution as f64;
    Point3::new(
        bbox.min[0] + (bbox.max[0] - bbox.min[0]) * key[0] as f64 / n,
        bbox.min[1] + (bbox.max[1] - bbox.min[1]) * key[1] as f64 / n,
        bbox.min[2] + (bbox.max[2] - bbox.min[2]) * key[2] as f64 / n,
    )
}

/// Triangulates the `tau` level set. Corners with value `>= tau` are
/// occupied; faces wind so their normals point toward lower values.
pub fn marching_cubes(grid: &CornerGrid, tau: f64) -> TriangleMesh {
    let mut vertices: Vec<Point3> = Vec::new();
    let mut faces = Vec::new();
    let mut edge_vertex: HashMap<(CornerKey, u8), usize> = HashMap::new();

    for cell in grid.cells() {
        let keys: [CornerKey; 8] = std::array::from_fn(|c| {
            [
                cell[0] + CORNERS[c][0],
                cell[1] + CORNERS[c][1],
                cell[2] + CORNERS[c][2],
            ]
        });
        let vals: [f64; 8] = std::array::from_fn(|c| grid.value(keys[c]));
        let mut case = 0usize;
        for (c, v) in vals.iter().enumerate() {
            if *v < tau {
                case |= 1 << c;
            }
        }
        if case == 0 || case == 255 {
            continue;
        }
        let row = &TRI_TABLE[case];
        let mut vertex_of = |e: usize| -> usize {
            let [a, b] = EDGES[e];
            // EDGES lists the lower corner first.
            let axis = (0..3).find(|&k| CORNERS[a][k] != CORNERS[b][k]).unwrap() as u8;
            *edge_vertex.entry((keys[a], axis)).or_insert_with(|| {
                let (va, vb) = (vals[a], vals[b]);
                let t = (tau - va) / (vb - va);
                let (pa, pb) = (grid.position(keys[a]), grid.position(keys[b]));
                vertices.push(pa + (pb - pa) * t);
                vertices.len() - 1
            })
        };
        for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
            let v: [usize; 3] = std::array::from_fn(|i| vertex_of(tri[i] as usize));
            faces.push([v[0], v[1], v[2]]);
        }
    }

    TriangleMesh {
        vertices,
        faces,
        normals: None,
    }
}

/// Unit vertex normals from the field gradient, oriented away from the
/// occupied side. Vertices where the gradient vanishes fall back to the
/// area-weighted face normal.
pub fn vertex_normals_from_field<F: OccupancyField + ?Sized>(mesh: &TriangleMesh, field: &F) -> Vec<Vec3> {
    let fallback = mesh.area_weighted_vertex_normals();
    mesh.vertices
        .iter()
        .zip(fallback)
        .map(|(v, fb)| {
            let g = field.grad(v);
            let n = g.norm();
            if n > 1e-12 && n.is_finite() {
                -g / n
            } else {
                fb
            }
        })
        .collect()
}
