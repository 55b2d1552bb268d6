use serde::{Deserialize, Serialize};

use super::OccupancyField;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Point3, Vec3};

/// Occupancy values at cell centers of a regular grid.
///
/// Values are stored row-major with z fastest:
/// `index = (ix * ny + iy) * nz + iz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub resolution: [usize; 3],
    pub bbox: BoundingBox,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(resolution: [usize; 3], bbox: BoundingBox, values: Vec<f64>) -> Result<Self> {
        let grid = VoxelGrid {
            resolution,
            bbox,
            values,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn filled(resolution: [usize; 3], bbox: BoundingBox, value: f64) -> Result<Self> {
        VoxelGrid::new(resolution, bbox, vec![value; resolution.iter().product()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&r| r == 0) {
            return Err(Error::InvalidArgument(format!(
                "voxel resolution must be positive, got {:?}",
                self.resolution
            )));
        }
        let expected: usize = self.resolution.iter().product();
        if self.values.len() != expected {
            return Err(Error::Dimension(format!(
                "{} voxel values for resolution {:?}",
                self.values.len(),
                self.resolution
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("voxel value {v} outside [0, 1]")));
        }
        BoundingBox::new(self.bbox.min(), self.bbox.max())?;
        Ok(())
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution[1] + j) * self.resolution[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn cell_size(&self) -> Vec3 {
        let e = self.bbox.extent();
        Vec3::new(
            e.x / self.resolution[0] as f64,
            e.y / self.resolution[1] as f64,
            e.z / self.resolution[2] as f64,
        )
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Point3 {
        let c = self.cell_size();
        self.bbox.min() + Vec3::new((i as f64 + 0.5) * c.x, (j as f64 + 0.5) * c.y, (k as f64 + 0.5) * c.z)
    }

    pub fn occupied_count(&self, tau: f64) -> usize {
        self.values.iter().filter(|&&v| v >= tau).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let grid: VoxelGrid = serde_json::from_str(text)?;
        grid.validate()?;
        Ok(grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Trilinear,
}

/// Continuous field over a voxel grid.
#[derive(Debug, Clone)]
pub struct VoxelField {
    grid: VoxelGrid,
    mode: Interpolation,
}

impl VoxelField {
    pub fn new(grid: VoxelGrid, mode: Interpolation) -> Result<Self> {
        grid.validate()?;
        Ok(VoxelField { grid, mode })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    /// Continuous cell-center coordinates of `p`.
    fn lattice(&self, p: &Point3) -> Vec3 {
        let c = self.grid.cell_size();
        let rel = p - self.grid.bbox.min();
        Vec3::new(rel.x / c.x - 0.5, rel.y / c.y - 0.5, rel.z / c.z - 0.5)
    }

    /// Per-axis lower index, blend weight, and whether the coordinate was
    /// clamped into the center lattice (zero derivative there).
    fn axis_weights(&self, u: Vec3) -> [(usize, f64, bool); 3] {
        std::array::from_fn(|k| {
            let n = self.grid.resolution[k];
            if n == 1 {
                return (0, 0.0, true);
            }
            let hi = (n - 1) as f64;
            if u[k] <= 0.0 {
                (0, 0.0, true)
            } else if u[k] >= hi {
                (n - 2, 1.0, true)
            } else {
                let i0 = (u[k].floor() as usize).min(n - 2);
                (i0, u[k] - i0 as f64, false)
            }
        })
    }

    fn corner(&self, base: &[(usize, f64, bool); 3], di: usize, dj: usize, dk: usize) -> f64 {
        let idx = |k: usize, d: usize| (base[k].0 + d).min(self.grid.resolution[k] - 1);
        self.grid.get(idx(0, di), idx(1, dj), idx(2, dk))
    }
}

impl OccupancyField for VoxelField {
    fn eval(&self, p: &Point3) -> f64 {
        if !self.grid.bbox.contains(p) {
            return 0.0;
        }
        let u = self.lattice(p);
        match self.mode {
            Interpolation::Nearest => {
                let idx: [usize; 3] = std::array::from_fn(|k| {
                    ((u[k] + 0.5).floor().max(0.0) as usize).min(self.grid.resolution[k] - 1)
                });
                self.grid.get(idx[0], idx[1], idx[2])
            }
            Interpolation::Trilinear => {
                let w = self.axis_weights(u);
                let mut acc = 0.0;
                for (di, wx) in [(0, 1.0 - w[0].1), (1, w[0].1)] {
                    for (dj, wy) in [(0, 1.0 - w[1].1), (1, w[1].1)] {
                        for (dk, wz) in [(0, 1.0 - w[2].1), (1, w[2].1)] {
                            let weight = wx * wy * wz;
                            if weight != 0.0 {
                                acc += weight * self.corner(&w, di, dj, dk);
                            }
                        }
                    }
                }
                acc.clamp(0.0, 1.0)
            }
        }
    }

    fn grad(&self, p: &Point3) -> Vec3 {
        if self.mode == Interpolation::Nearest || !self.grid.bbox.contains(p) {
            return Vec3::zeros();
        }
        let w = self.axis_weights(self.lattice(p));
        let cell = self.grid.cell_size();
        let mut g = Vec3::zeros();
        for axis in 0..3 {
            if w[axis].2 {
                continue;
            }
            let mut acc = 0.0;
            for di in 0..2 {
                for dj in 0..2 {
                    for dk in 0..2 {
                        let d = [di, dj, dk];
                        let mut weight = 1.0;
                        for k in 0..3 {
                            weight *= if k == axis {
                                if d[k] == 1 { 1.0 } else { -1.0 }
                            } else if d[k] == 1 {
                                w[k].1
                            } else {
                                1.0 - w[k].1
                            };
                        }
                        acc += weight * self.corner(&w, di, dj, dk);
                    }
                }
            }
            g[axis] = acc / cell[axis];
        }
        g
    }

    fn bbox(&self) -> BoundingBox {
        self.grid.bbox
    }
}

/// Samples `field` at the cell centers of a `res^3` grid over its bbox and
/// thresholds at `tau`.
pub fn voxelize<F: OccupancyField + ?Sized>(field: &F, res: usize, tau: f64) -> Result<VoxelGrid> {
    if res == 0 {
        return Err(Error::InvalidArgument("voxelization resolution must be >= 1".into()));
    }
    let bbox = field.bbox();
    let mut grid = VoxelGrid::filled([res; 3], bbox, 0.0)?;
    let mut centers = Vec::with_capacity(res * res * res);
    for i in 0..res {
        for j in 0..res {
            for k in 0..res {
                centers.push(grid.cell_center(i, j, k));
            }
        }
    }
    let values = field.eval_batch(&centers);
    for (slot, v) in grid.values.iter_mut().zip(values) {
        *slot = if v >= tau { 1.0 } else { 0.0 };
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{finite_difference_grad, AnalyticField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_ones_grid_center() {
        let g = VoxelGrid::filled([2; 3], BoundingBox::cube(0.5), 1.0).unwrap();
        let f = VoxelField::new(g, Interpolation::Trilinear).unwrap();
        assert_eq!(f.eval(&Point3::zeros()), 1.0);
        assert_eq!(f.eval(&Point3::new(0.7, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn trilinear_midpoint_is_average() {
        let bbox = BoundingBox::new(Point3::zeros(), Point3::new(2.0, 1.0, 1.0)).unwrap();
        let g = VoxelGrid::new([2, 1, 1], bbox, vec![0.0, 1.0]).unwrap();
        let f = VoxelField::new(g, Interpolation::Trilinear).unwrap();
        assert!((f.eval(&Point3::new(1.0, 0.5, 0.5)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn value_count_must_match() {
        assert!(VoxelGrid::new([2, 2, 2], BoundingBox::cube(0.5), vec![0.0; 7]).is_err());
    }

    #[test]
    fn trilinear_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let values = (0..64).map(|_| rng.random::<f64>()).collect();
        let g = VoxelGrid::new([4; 3], BoundingBox::cube(0.5), values).unwrap();
        let f = VoxelField::new(g, Interpolation::Trilinear).unwrap();
        let mut checked = 0;
        while checked < 100 {
            let p = BoundingBox::cube(0.49).lerp([rng.random(), rng.random(), rng.random()]);
            let fd = finite_difference_grad(&f, &p, 1e-4);
            let fd2 = finite_difference_grad(&f, &p, 1e-6);
            if (fd - fd2).norm() > 1e-6 {
                continue; // straddles a cell face
            }
            let g = f.grad(&p);
            assert!((g - fd).norm() <= 1e-3 * g.norm().max(1e-9), "{g:?} vs {fd:?}");
            checked += 1;
        }
    }

    #[test]
    fn sphere_voxel_count_matches_volume() {
        let f = AnalyticField::sphere(Point3::zeros(), 0.5).unwrap();
        let g = voxelize(&f, 32, 0.5).unwrap();
        let cell = 1.0f64 / 32.0;
        let expected = 4.0 / 3.0 * std::f64::consts::PI * 0.125 / cell.powi(3);
        let got = g.occupied_count(0.5) as f64;
        assert!((got - expected).abs() < 0.03 * expected, "{got} vs {expected}");
    }

    #[test]
    fn empty_field_gives_empty_grid() {
        let f = AnalyticField::new(crate::fields::Shape::Empty).unwrap();
        let g = voxelize(&f, 8, 0.5).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_voxelization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bbox = BoundingBox::new(Point3::new(-0.3, -0.1, 0.0), Point3::new(0.5, 0.4, 0.9)).unwrap();
        let values = (0..6 * 6 * 6).map(|_| (rng.random::<f64>() > 0.5) as u8 as f64).collect();
        let g = VoxelGrid::new([6; 3], bbox, values).unwrap();
        let f = VoxelField::new(g.clone(), Interpolation::Nearest).unwrap();
        assert_eq!(voxelize(&f, 6, 0.5).unwrap(), g);
    }

    #[test]
    fn trilinear_sphere_matches_analytic_superlevel_set() {
        // Dense-grid oracle: IoU of {f >= 0.5} on a 96^3 probe lattice.
        let sphere = AnalyticField::sphere(Point3::zeros(), 0.4)
            .unwrap()
            .with_bbox(BoundingBox::cube(0.5));
        let vf = VoxelField::new(voxelize(&sphere, 32, 0.5).unwrap(), Interpolation::Trilinear).unwrap();
        let (mut inter, mut union) = (0usize, 0usize);
        let n = 96;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let t = |x: usize| (x as f64 + 0.5) / n as f64;
                    let p = BoundingBox::cube(0.5).lerp([t(i), t(j), t(k)]);
                    let a = sphere.eval(&p) >= 0.5;
                    let b = vf.eval(&p) >= 0.5;
                    inter += (a && b) as usize;
                    union += (a || b) as usize;
                }
            }
        }
        let iou = inter as f64 / union as f64;
        assert!(iou >= 0.9, "iou {iou}");
    }

    #[test]
    fn json_round_trip() {
        let g = VoxelGrid::new([1, 2, 1], BoundingBox::cube(1.0), vec![0.25, 1.0]).unwrap();
        let back = VoxelGrid::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
