//! Volumetric IoU, Chamfer-L1 and normal consistency.
//!
//! Surface distances are measured from samples on one mesh to the exact
//! closest point on the other, in units of a tenth of the ground truth's
//! largest bounding box edge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::OccupancyField;
use crate::geometry::{BoundingBox, MeshIndex, Point3, TriangleMesh};

pub const DEFAULT_SAMPLES: usize = 100_000;

/// Monte Carlo estimate of two solids over their union box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouEstimate {
    pub iou: f64,
    /// Estimated volume of the first solid.
    pub volume_a: f64,
    pub volume_b: f64,
    pub samples: usize,
}

/// Intersection over union of `{a >= 0.5}` and `{b >= 0.5}` from `n`
/// uniform samples of the union of the two boxes. Two empty solids give 0.
pub fn volumetric_iou<A, B, R>(a: &A, b: &B, n: usize, rng: &mut R) -> Result<f64>
where
    A: OccupancyField + ?Sized,
    B: OccupancyField + ?Sized,
    R: Rng + ?Sized,
{
    iou_estimate(a, b, n, rng).map(|e| e.iou)
}

pub fn iou_estimate<A, B, R>(a: &A, b: &B, n: usize, rng: &mut R) -> Result<IouEstimate>
where
    A: OccupancyField + ?Sized,
    B: OccupancyField + ?Sized,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::InvalidArgument("IoU needs at least one sample".into()));
    }
    let region = a.bbox().union(&b.bbox());
    let points: Vec<Point3> = (0..n)
        .map(|_| region.lerp([rng.random(), rng.random(), rng.random()]))
        .collect();
    let va = a.eval_batch(&points);
    let vb = b.eval_batch(&points);
    let (mut inter, mut union, mut in_a, mut in_b) = (0usize, 0usize, 0usize, 0usize);
    for (x, y) in va.iter().zip(&vb) {
        let (oa, ob) = (*x >= 0.5, *y >= 0.5);
        inter += (oa && ob) as usize;
        union += (oa || ob) as usize;
        in_a += oa as usize;
        in_b += ob as usize;
    }
    let scale = region.volume() / n as f64;
    Ok(IouEstimate {
        iou: if union == 0 { 0.0 } else { inter as f64 / union as f64 },
        volume_a: in_a as f64 * scale,
        volume_b: in_b as f64 * scale,
        samples: n,
    })
}

/// One-directional distances and normal agreement of samples on `from`
/// against the surface of `to`.
#[derive(Debug, Clone, Copy)]
struct Directed {
    distance: f64,
    normal: f64,
}

fn directed<R: Rng + ?Sized>(from: &TriangleMesh, to: &MeshIndex, n: usize, rng: &mut R) -> Result<Directed> {
    let samples = from.sample_surface(n, rng)?;
    let (dist, dot) = samples
        .par_iter()
        .map(|(p, nrm)| {
            let (_, face, d) = to.closest_point(p).expect("target mesh has faces");
            (d, nrm.dot(&to.mesh().face_normal(face)).abs())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (d, c)| (a + d, b + c));
    Ok(Directed {
        distance: dist / n as f64,
        normal: dot / n as f64,
    })
}

fn require_surface(mesh: &TriangleMesh, role: &str) -> Result<()> {
    if mesh.faces.is_empty() || !(mesh.area() > 0.0) {
        return Err(Error::InvalidMesh(format!("{role} mesh has no surface")));
    }
    Ok(())
}

/// Chamfer-L1 with its two halves, normalized by `unit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chamfer {
    pub chamfer: f64,
    /// Mean distance from prediction samples to the ground truth.
    pub accuracy: f64,
    /// Mean distance from ground truth samples to the prediction.
    pub completeness: f64,
    /// Length counted as 1: a tenth of the ground truth's largest box edge.
    pub unit: f64,
}

fn unit_of(gt: &TriangleMesh) -> Result<f64> {
    let unit = gt.bbox().map_or(0.0, |b| b.max_edge()) / 10.0;
    if !(unit > 0.0) {
        return Err(Error::InvalidMesh("ground truth mesh has a degenerate bounding box".into()));
    }
    Ok(unit)
}

pub fn chamfer_l1<R: Rng + ?Sized>(pred: &TriangleMesh, gt: &TriangleMesh, n: usize, rng: &mut R) -> Result<Chamfer> {
    let (c, _) = surface_metrics(pred, gt, n, rng)?;
    Ok(c)
}

/// Symmetric mean of `|n_a . n_b|` over closest-point pairs.
pub fn normal_consistency<R: Rng + ?Sized>(pred: &TriangleMesh, gt: &TriangleMesh, n: usize, rng: &mut R) -> Result<f64> {
    surface_metrics(pred, gt, n, rng).map(|(_, nc)| nc)
}

/// Chamfer and normal consistency from one set of samples.
pub fn surface_metrics<R: Rng + ?Sized>(
    pred: &TriangleMesh,
    gt: &TriangleMesh,
    n: usize,
    rng: &mut R,
) -> Result<(Chamfer, f64)> {
    require_surface(pred, "predicted")?;
    require_surface(gt, "ground truth")?;
    if n == 0 {
        return Err(Error::InvalidArgument("surface metrics need at least one sample".into()));
    }
    let unit = unit_of(gt)?;
    let pred_index = MeshIndex::new(pred.clone());
    let gt_index = MeshIndex::new(gt.clone());
    let acc = directed(pred, &gt_index, n, rng)?;
    let comp = directed(gt, &pred_index, n, rng)?;
    let chamfer = Chamfer {
        chamfer: 0.5 * (acc.distance + comp.distance) / unit,
        accuracy: acc.distance / unit,
        completeness: comp.distance / unit,
        unit,
    };
    Ok((chamfer, 0.5 * (acc.normal + comp.normal)))
}

/// All metrics of one prediction. Surface metrics are absent when the
/// prediction has no surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub chamfer_l1: Option<f64>,
    pub accuracy: Option<f64>,
    pub completeness: Option<f64>,
    pub normal_consistency: Option<f64>,
    pub iou_samples: usize,
    pub surface_samples: usize,
    pub seed: u64,
    pub unit: f64,
    /// Occupied volume of the prediction, from the IoU samples.
    pub pred_volume: f64,
    pub gt_volume: f64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let unit_range = |v: Option<f64>| v.is_none_or(|v| (0.0..=1.0 + 1e-12).contains(&v));
        if !(0.0..=1.0).contains(&self.iou) || !unit_range(self.normal_consistency) {
            return Err(Error::InvalidArgument("IoU and normal consistency must lie in [0, 1]".into()));
        }
        if self.chamfer_l1.is_some_and(|c| !(c >= 0.0)) {
            return Err(Error::InvalidArgument("Chamfer distance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// Field-wise mean; surface metrics average over the reports that
    /// have them.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: fn(&MetricsReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Some(MetricsReport {
            iou: avg(|r| r.iou),
            chamfer_l1: avg_opt(|r| r.chamfer_l1),
            accuracy: avg_opt(|r| r.accuracy),
            completeness: avg_opt(|r| r.completeness),
            normal_consistency: avg_opt(|r| r.normal_consistency),
            iou_samples: first.iou_samples,
            surface_samples: first.surface_samples,
            seed: first.seed,
            unit: avg(|r| r.unit),
            pred_volume: avg(|r| r.pred_volume),
            gt_volume: avg(|r| r.gt_volume),
        })
    }
}

/// Metrics of `pred` against a ground truth given both as a solid and as
/// a surface. The IoU treats `pred` as a solid through ray parity.
pub fn evaluate<F: OccupancyField + ?Sized>(
    pred: &TriangleMesh,
    gt_field: &F,
    gt_mesh: &TriangleMesh,
    n: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = unit_of(gt_mesh)?;
    let has_surface = require_surface(pred, "predicted").is_ok();
    let estimate = if has_surface {
        let solid = crate::fields::MeshField::new(pred.clone())?;
        iou_estimate(&solid, gt_field, n, &mut rng)?
    } else {
        iou_estimate(&Nothing(gt_field.bbox()), gt_field, n, &mut rng)?
    };
    let surface = if has_surface {
        Some(surface_metrics(pred, gt_mesh, n, &mut rng)?)
    } else {
        log::warn!("prediction has no surface; surface metrics skipped");
        None
    };
    let report = MetricsReport {
        iou: estimate.iou,
        chamfer_l1: surface.map(|(c, _)| c.chamfer),
        accuracy: surface.map(|(c, _)| c.accuracy),
        completeness: surface.map(|(c, _)| c.completeness),
        normal_consistency: surface.map(|(_, nc)| nc),
        iou_samples: n,
        surface_samples: if has_surface { n } else { 0 },
        seed,
        unit,
        pred_volume: estimate.volume_a,
        gt_volume: estimate.volume_b,
    };
    report.validate()?;
    Ok(report)
}

/// The empty solid.
struct Nothing(BoundingBox);

impl OccupancyField for Nothing {
    fn eval(&self, _: &Point3) -> f64 {
        0.0
    }

    fn grad(&self, _: &Point3) -> crate::geometry::Vec3 {
        crate::geometry::Vec3::zeros()
    }

    fn bbox(&self) -> BoundingBox {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AnalyticField, MeshField};
    use crate::geometry::Vec3;
    use nalgebra::Rotation3;

    fn sphere_mesh(r: f64) -> TriangleMesh {
        TriangleMesh::icosphere(Point3::zeros(), r, 5)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn iou_of_concentric_spheres_is_the_volume_ratio() {
        let a = AnalyticField::sphere(Point3::zeros(), 0.4).unwrap();
        let b = AnalyticField::sphere(Point3::zeros(), 0.5).unwrap();
        let iou = volumetric_iou(&a, &b, DEFAULT_SAMPLES, &mut rng(1)).unwrap();
        assert!((iou - 0.512).abs() < 0.02, "{iou}");
        let swapped = volumetric_iou(&b, &a, DEFAULT_SAMPLES, &mut rng(1)).unwrap();
        assert_eq!(iou, swapped);

        let ma = MeshField::new(sphere_mesh(0.4)).unwrap();
        let mb = MeshField::new(sphere_mesh(0.5)).unwrap();
        let iou = volumetric_iou(&ma, &mb, DEFAULT_SAMPLES, &mut rng(2)).unwrap();
        assert!((iou - 0.512).abs() < 0.02, "{iou}");
        assert!((volumetric_iou(&mb, &mb, DEFAULT_SAMPLES, &mut rng(3)).unwrap() - 1.0).abs() < 0.01);
    }

    #[test]
    fn disjoint_and_empty_solids() {
        let a = AnalyticField::new(crate::fields::Shape::cuboid(BoundingBox::cube(0.5))).unwrap();
        let shifted = BoundingBox {
            min: [2.0, 0.0, 0.0],
            max: [3.0, 1.0, 1.0],
        };
        let b = AnalyticField::new(crate::fields::Shape::cuboid(shifted)).unwrap();
        assert_eq!(volumetric_iou(&a, &b, 10_000, &mut rng(1)).unwrap(), 0.0);
        let e = Nothing(BoundingBox::cube(1.0));
        assert_eq!(volumetric_iou(&e, &e, 1000, &mut rng(1)).unwrap(), 0.0);
        assert!(volumetric_iou(&a, &b, 0, &mut rng(1)).is_err());
    }

    #[test]
    fn doubling_samples_shrinks_iou_spread() {
        let a = AnalyticField::sphere(Point3::zeros(), 0.4).unwrap();
        let b = AnalyticField::sphere(Point3::new(0.1, 0.0, 0.0), 0.4).unwrap();
        let spread = |n: usize| {
            let v: Vec<f64> = (0..30)
                .map(|s| volumetric_iou(&a, &b, n, &mut rng(100 + s)).unwrap())
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let ratio = spread(2000) / spread(4000);
        // sqrt(2) with the sampling error of a 30-draw deviation.
        assert!((1.0..2.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn chamfer_of_concentric_spheres_is_one_unit() {
        let (pred, gt) = (sphere_mesh(0.4), sphere_mesh(0.5));
        let c = chamfer_l1(&pred, &gt, 20_000, &mut rng(1)).unwrap();
        assert!((c.unit - 0.1).abs() < 1e-3);
        assert!((c.chamfer - 1.0).abs() < 0.05, "{c:?}");
        assert!((c.accuracy - c.completeness).abs() < 0.05);
    }

    #[test]
    fn self_metrics_hit_identity_values() {
        for mesh in [sphere_mesh(0.5), TriangleMesh::cuboid(&BoundingBox::cube(0.3))] {
            let (c, nc) = surface_metrics(&mesh, &mesh, 5000, &mut rng(4)).unwrap();
            assert!(c.chamfer < 1e-3, "{c:?}");
            assert!(nc > 0.99, "{nc}");
        }
    }

    #[test]
    fn chamfer_is_translation_invariant_and_symmetric_on_equal_boxes() {
        let a = sphere_mesh(0.5);
        let b = TriangleMesh::icosphere(Point3::zeros(), 0.5, 2);
        let c0 = chamfer_l1(&a, &b, 5000, &mut rng(7)).unwrap().chamfer;
        let t = Vec3::new(3.0, -1.0, 0.5);
        let c1 = chamfer_l1(&a.translated(t), &b.translated(t), 5000, &mut rng(7)).unwrap().chamfer;
        assert!((c0 - c1).abs() < 1e-6, "{c0} {c1}");
        // Both meshes span the same box to within the coarse sphere's sag.
        let c2 = chamfer_l1(&b, &a, 5000, &mut rng(7)).unwrap().chamfer;
        assert!((c0 - c2).abs() < 0.1 * c0, "{c0} {c2}");
    }

    #[test]
    fn parallel_planes_agree_in_normal() {
        let plane = |z: f64| {
            TriangleMesh::new(
                vec![
                    Point3::new(0.0, 0.0, z),
                    Point3::new(1.0, 0.0, z),
                    Point3::new(1.0, 1.0, z),
                    Point3::new(0.0, 1.0, z),
                ],
                vec![[0, 1, 2], [0, 2, 3]],
            )
            .unwrap()
        };
        let nc = normal_consistency(&plane(0.0), &plane(0.3), 2000, &mut rng(1)).unwrap();
        assert!((nc - 1.0).abs() < 1e-12);
    }

    fn closest_on_triangle(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> Point3 {
        // Brute force over a fine barycentric lattice, polished by
        // projecting onto the plane when the projection is inside.
        let n = (b - a).cross(&(c - a));
        let nn = n.norm_squared();
        let q = p - n * ((p - a).dot(&n) / nn);
        let inside = |u: &Point3| {
            let s1 = (b - a).cross(&(u - a)).dot(&n);
            let s2 = (c - b).cross(&(u - b)).dot(&n);
            let s3 = (a - c).cross(&(u - c)).dot(&n);
            s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0
        };
        if inside(&q) {
            return q;
        }
        let seg = |u: &Point3, v: &Point3| {
            let t = ((p - u).dot(&(v - u)) / (v - u).norm_squared()).clamp(0.0, 1.0);
            u + (v - u) * t
        };
        [seg(a, b), seg(b, c), seg(c, a)]
            .into_iter()
            .min_by(|x, y| (p - x).norm().total_cmp(&(p - y).norm()))
            .unwrap()
    }

    /// Mean `|n . n'|` over samples drawn from `rng`, pairing each with its
    /// closest face by exhaustive search. Faces tied for closest (points
    /// nearest an edge) are resolved both ways, giving a bracket.
    fn brute_force_nc(from: &TriangleMesh, to: &TriangleMesh, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let samples = from.sample_surface(n, rng).unwrap();
        let (mut lo, mut hi) = (0.0, 0.0);
        for (p, nrm) in &samples {
            let d: Vec<f64> = (0..to.faces.len())
                .map(|f| {
                    let [a, b, c] = to.triangle(f);
                    (p - closest_on_triangle(p, &a, &b, &c)).norm()
                })
                .collect();
            let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let dots: Vec<f64> = (0..to.faces.len())
                .filter(|&f| d[f] <= best + 1e-9)
                .map(|f| nrm.dot(&to.face_normal(f)).abs())
                .collect();
            lo += dots.iter().cloned().fold(f64::INFINITY, f64::min);
            hi += dots.iter().cloned().fold(0.0, f64::max);
        }
        (lo / n as f64, hi / n as f64)
    }

    #[test]
    fn rotated_cube_matches_exhaustive_pairing() {
        let cube = TriangleMesh::cuboid(&BoundingBox::cube(0.5));
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_4);
        let rotated = TriangleMesh::new(cube.vertices.iter().map(|v| rot * v).collect(), cube.faces.clone()).unwrap();
        let n = 4000;
        let nc = normal_consistency(&cube, &rotated, n, &mut rng(5)).unwrap();
        // Same sample stream as the estimator.
        let mut oracle_rng = rng(5);
        let (lo_a, hi_a) = brute_force_nc(&cube, &rotated, n, &mut oracle_rng);
        let (lo_b, hi_b) = brute_force_nc(&rotated, &cube, n, &mut oracle_rng);
        let (lo, hi) = (0.5 * (lo_a + lo_b), 0.5 * (hi_a + hi_b));
        assert!(nc >= lo - 1e-9 && nc <= hi + 1e-9, "{nc} outside [{lo}, {hi}]");
        assert!(hi - lo < 0.1, "{lo} {hi}");
        assert!(nc < 0.99 && nc > std::f64::consts::FRAC_1_SQRT_2 - 0.05);
    }

    #[test]
    fn estimators_are_seeded_and_stable() {
        let gt = sphere_mesh(0.5);
        let pred = sphere_mesh(0.45);
        let field = AnalyticField::sphere(Point3::zeros(), 0.5).unwrap();
        let a = evaluate(&pred, &field, &gt, 20_000, 3).unwrap();
        let b = evaluate(&pred, &field, &gt, 20_000, 3).unwrap();
        assert_eq!(a, b);
        let ious: Vec<f64> = (0..10).map(|s| evaluate(&pred, &field, &gt, 20_000, s).unwrap().iou).collect();
        let m = ious.iter().sum::<f64>() / 10.0;
        let sd = (ious.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 9.0).sqrt();
        assert!(sd / m < 0.01, "{sd} {m}");
        let back = MetricsReport::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn empty_prediction_reports_zero_iou() {
        let gt = sphere_mesh(0.5);
        let field = AnalyticField::sphere(Point3::zeros(), 0.5).unwrap();
        let r = evaluate(&TriangleMesh::empty(), &field, &gt, 1000, 1).unwrap();
        assert_eq!(r.iou, 0.0);
        assert!(r.chamfer_l1.is_none());
        assert!(chamfer_l1(&TriangleMesh::empty(), &gt, 10, &mut rng(1)).is_err());
    }
}
