//! Training point samplers and input corruption.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{MeshField, OccupancyField};
use crate::geometry::{BoundingBox, Point3, TriangleMesh, Vec3};

pub const DEFAULT_POINTS: usize = 2048;
/// Fraction of the bounding box extent added on every side.
pub const DEFAULT_PADDING: f64 = 0.1;
pub const DEFAULT_CLOUD_POINTS: usize = 300;
pub const DEFAULT_CLOUD_NOISE: f64 = 0.05;
pub const DEFAULT_SURFACE_NOISE: f64 = 0.1;
/// Draws allowed per requested point in [`sample_equal`].
pub const REJECTION_FACTOR: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Uniform,
    Equal,
    Surface,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Uniform, Strategy::Equal, Strategy::Surface];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Equal => "equal",
            Strategy::Surface => "surface",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sampling strategy {s:?} (uniform, equal, surface)")))
    }
}

/// Points with binary occupancy labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    #[serde(with = "point_list")]
    pub points: Vec<Point3>,
    pub occupancies: Vec<f64>,
    pub strategy: Strategy,
    /// Seed of the generator that produced the batch, when known.
    pub seed: Option<u64>,
}

mod point_list {
    use super::Point3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(points: &[Point3], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Point3>, D::Error> {
        let raw = Vec::<[f64; 3]>::deserialize(d)?;
        Ok(raw.into_iter().map(Point3::from).collect())
    }
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancies.iter().filter(|&&o| o == 1.0).count()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.occupancies.len() {
            return Err(Error::Dimension(format!(
                "{} points with {} labels",
                self.points.len(),
                self.occupancies.len()
            )));
        }
        if self.occupancies.iter().any(|&o| o != 0.0 && o != 1.0) {
            return Err(Error::InvalidArgument("occupancy labels must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: SampleBatch = serde_json::from_str(text)?;
        b.validate()?;
        Ok(b)
    }
}

fn label(v: f64) -> f64 {
    (v >= 0.5) as u8 as f64
}

fn uniform_point<R: Rng + ?Sized>(bbox: &BoundingBox, rng: &mut R) -> Point3 {
    bbox.lerp([rng.random(), rng.random(), rng.random()])
}

fn require_points(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("at least one point is required".into()));
    }
    Ok(())
}

/// `k` points drawn uniformly from the field's box grown by `padding` of
/// its extent per side, labelled by thresholding the field at 0.5.
pub fn sample_uniform<F: OccupancyField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    k: usize,
    padding: f64,
    rng: &mut R,
) -> Result<SampleBatch> {
    sample_uniform_in(field, &field.bbox().padded(padding), k, rng)
}

/// As [`sample_uniform`], over an explicit region.
pub fn sample_uniform_in<F: OccupancyField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    region: &BoundingBox,
    k: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    require_points(k)?;
    let points: Vec<Point3> = (0..k).map(|_| uniform_point(region, rng)).collect();
    let occupancies = field.eval_batch(&points).into_iter().map(label).collect();
    Ok(SampleBatch {
        points,
        occupancies,
        strategy: Strategy::Uniform,
        seed: None,
    })
}

/// Exactly `k / 2` occupied and `k / 2` free points, by rejection from the
/// padded box.
pub fn sample_equal<F: OccupancyField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    k: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    sample_equal_in(field, &field.bbox().padded(DEFAULT_PADDING), k, rng)
}

/// As [`sample_equal`], over an explicit region.
pub fn sample_equal_in<F: OccupancyField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    region: &BoundingBox,
    k: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    require_points(k)?;
    if k % 2 != 0 {
        return Err(Error::InvalidArgument(format!("equal sampling needs an even count, got {k}")));
    }
    let half = k / 2;
    let budget = REJECTION_FACTOR * k;
    let mut points = Vec::with_capacity(k);
    let mut occupancies = Vec::with_capacity(k);
    let (mut inside, mut outside) = (0, 0);
    let mut draws = 0;
    // Draw in rounds so the field sees batched queries.
    while inside < half || outside < half {
        if draws >= budget {
            return Err(Error::RejectionBudget {
                draws,
                found_inside: inside,
                found_outside: outside,
            });
        }
        let round = (2 * k).min(budget - draws);
        let candidates: Vec<Point3> = (0..round).map(|_| uniform_point(region, rng)).collect();
        draws += round;
        let values = field.eval_batch(&candidates);
        for (p, v) in candidates.into_iter().zip(values) {
            let o = label(v);
            if o == 1.0 && inside < half {
                inside += 1;
            } else if o == 0.0 && outside < half {
                outside += 1;
            } else {
                continue;
            }
            points.push(p);
            occupancies.push(o);
        }
    }
    Ok(SampleBatch {
        points,
        occupancies,
        strategy: Strategy::Equal,
        seed: None,
    })
}

fn gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Result<Vec3> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(Vec3::zeros());
    }
    let n = Normal::new(0.0, sigma).unwrap();
    Ok(Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng)))
}

/// Half the points uniform in the padded box, half on the surface
/// displaced by isotropic Gaussian noise; labels come from the mesh.
pub fn sample_surface_noise<R: Rng + ?Sized>(
    field: &MeshField,
    k: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<SampleBatch> {
    sample_near_surface(field, field.mesh(), &field.bbox().padded(DEFAULT_PADDING), k, sigma, rng)
}

/// The surface strategy with the surface given separately from the
/// labelling field.
pub fn sample_near_surface<F: OccupancyField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    surface: &TriangleMesh,
    region: &BoundingBox,
    k: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<SampleBatch> {
    require_points(k)?;
    let on_surface = k / 2;
    let mut points: Vec<Point3> = (0..k - on_surface).map(|_| uniform_point(region, rng)).collect();
    for (p, _) in surface.sample_surface(on_surface, rng)? {
        points.push(p + gaussian(sigma, rng)?);
    }
    let occupancies = field.eval_batch(&points).into_iter().map(label).collect();
    Ok(SampleBatch {
        points,
        occupancies,
        strategy: Strategy::Surface,
        seed: None,
    })
}

/// `n` surface samples perturbed by Gaussian noise of deviation `sigma`.
pub fn make_noisy_cloud<R: Rng + ?Sized>(mesh: &TriangleMesh, n: usize, sigma: f64, rng: &mut R) -> Result<Vec<Point3>> {
    let samples = mesh.sample_surface(n, rng)?;
    samples.into_iter().map(|(p, _)| Ok(p + gaussian(sigma, rng)?)).collect()
}
