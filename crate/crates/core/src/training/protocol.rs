use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    condition_for, select_tau, train_field, train_generative, Dataset, Observation, TrainConfig, TrainItem,
    TrainOutcome, ValidationSet,
};
use crate::error::{Error, Result};
use crate::fields::{AnalyticField, Interpolation, MeshField, OccupancyField, Shape, VoxelField, VoxelGrid};
use crate::geometry::{BoundingBox, Point3, TriangleMesh};
use crate::marching_cubes::{marching_cubes, CornerGrid};
use crate::mesh_refine::RefineConfig;
use crate::metrics::{self, MetricsReport};
use crate::mise::{extract_mesh, ExtractionConfig, DEFAULT_INITIAL_RESOLUTION};
use crate::neural::{DecoderConfig, DecoderField, DecoderParams, EncoderParams};
use crate::sampling::{make_noisy_cloud, Strategy, DEFAULT_CLOUD_NOISE, DEFAULT_CLOUD_POINTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Autoencode a set of shapes through learned latent codes.
    ReprPower,
    /// Reconstruct shapes from noisy point clouds.
    Pointcloud,
    /// Reconstruct shapes from coarse voxel grids.
    VoxelSr,
    /// Variational training; shapes rebuilt from posterior means.
    Generative,
    /// Every sampling strategy crossed with every architecture variant.
    Ablation,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 5] = [
        ProtocolKind::ReprPower,
        ProtocolKind::Pointcloud,
        ProtocolKind::VoxelSr,
        ProtocolKind::Generative,
        ProtocolKind::Ablation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::ReprPower => "repr_power",
            ProtocolKind::Pointcloud => "pointcloud",
            ProtocolKind::VoxelSr => "voxel_sr",
            ProtocolKind::Generative => "generative",
            ProtocolKind::Ablation => "ablation",
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown protocol {s:?}")))
    }
}

/// Decoder architecture variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Full,
    NoResnet,
    NoCbn,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Full, Arch::NoResnet, Arch::NoCbn];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Full => "full",
            Arch::NoResnet => "no_resnet",
            Arch::NoCbn => "no_cbn",
        }
    }

    pub fn apply(self, config: &DecoderConfig) -> DecoderConfig {
        let mut c = config.clone();
        match self {
            Arch::Full => {}
            Arch::NoResnet => c.resnet = false,
            Arch::NoCbn => c.cbn = false,
        }
        c
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture {s:?} (full, no_resnet, no_cbn)")))
    }
}

/// A ground-truth shape as a solid and as a surface.
#[derive(Clone)]
pub struct CorpusShape {
    pub name: String,
    pub field: Arc<dyn OccupancyField>,
    pub mesh: Arc<TriangleMesh>,
}

#[derive(Clone, Default)]
pub struct Corpus {
    pub shapes: Vec<CorpusShape>,
}

impl Corpus {
    /// Watertight meshes serve as both solid and surface.
    pub fn from_meshes(named: Vec<(String, TriangleMesh)>) -> Result<Self> {
        let shapes = named
            .into_iter()
            .map(|(name, mesh)| {
                if !mesh.is_watertight() {
                    log::warn!("corpus mesh {name} is not watertight; inside tests may be unreliable");
                }
                let field = MeshField::new(mesh.clone())?;
                Ok(CorpusShape {
                    name,
                    field: Arc::new(field),
                    mesh: Arc::new(mesh),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { shapes })
    }

    /// Analytic solids; surfaces come from marching cubes at `resolution`
    /// over a smooth version of each solid whose half level is the exact
    /// surface.
    pub fn from_shapes(named: Vec<(String, Shape)>, resolution: usize) -> Result<Self> {
        let shapes = named
            .into_iter()
            .map(|(name, shape)| {
                let field = AnalyticField::new(shape)?;
                let bbox = field.bbox().padded(0.05);
                let smooth = field.clone().smoothed(0.002)?;
                let mesh = marching_cubes(&CornerGrid::sample(&smooth, resolution, bbox), 0.5);
                if mesh.faces.is_empty() {
                    return Err(Error::InvalidArgument(format!("shape {name} has no surface at this resolution")));
                }
                Ok(CorpusShape {
                    name,
                    field: Arc::new(field),
                    mesh: Arc::new(mesh),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { shapes })
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

fn c(x: f64, y: f64, z: f64) -> [f64; 3] {
    [x, y, z]
}

/// The eight analytic shapes used for desk-scale experiments.
pub fn desk_shapes() -> Vec<(String, Shape)> {
    let cuboid = |min: [f64; 3], max: [f64; 3]| Shape::Cuboid { min, max };
    vec![
        ("sphere".into(), Shape::sphere(Point3::zeros(), 0.4)),
        ("cube".into(), Shape::cuboid(BoundingBox::cube(0.3))),
        ("torus".into(), Shape::torus(Point3::zeros(), 0.3, 0.12)),
        (
            "two_spheres".into(),
            Shape::Union(vec![
                Shape::sphere(Point3::new(-0.2, 0.0, 0.0), 0.25),
                Shape::sphere(Point3::new(0.25, 0.05, 0.0), 0.2),
            ]),
        ),
        (
            "cylinder".into(),
            Shape::Cylinder {
                center: c(0.0, 0.0, 0.0),
                radius: 0.25,
                half_height: 0.35,
            },
        ),
        (
            "capsule".into(),
            Shape::Capsule {
                a: c(-0.3, -0.1, 0.0),
                b: c(0.3, 0.1, 0.0),
                radius: 0.15,
            },
        ),
        (
            "ell".into(),
            Shape::Union(vec![
                cuboid(c(-0.35, -0.35, -0.15), c(0.35, -0.05, 0.15)),
                cuboid(c(-0.35, -0.35, -0.15), c(-0.05, 0.35, 0.15)),
            ]),
        ),
        (
            "rounded_cube".into(),
            Shape::Intersection(vec![
                Shape::sphere(Point3::zeros(), 0.4),
                Shape::cuboid(BoundingBox::cube(0.3)),
            ]),
        ),
    ]
}

/// [`desk_shapes`] as a corpus with 96^3 reference surfaces.
pub fn desk_corpus() -> Result<Corpus> {
    Corpus::from_shapes(desk_shapes(), 96)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    pub decoder: DecoderConfig,
    /// Width of the point, voxel and variational encoders.
    pub encoder_hidden: usize,
    /// Extraction threshold; chosen on validation points when absent
    /// (0.5 for the ablation).
    pub tau: Option<f64>,
    pub initial_resolution: usize,
    pub levels: usize,
    pub metric_samples: usize,
    pub cloud_points: usize,
    pub cloud_noise: f64,
    pub voxel_resolution: usize,
    pub strategies: Vec<Strategy>,
    pub archs: Vec<Arch>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            train: TrainConfig::default(),
            decoder: DecoderConfig::default(),
            encoder_hidden: 128,
            tau: None,
            initial_resolution: DEFAULT_INITIAL_RESOLUTION,
            levels: 2,
            metric_samples: metrics::DEFAULT_SAMPLES,
            cloud_points: DEFAULT_CLOUD_POINTS,
            cloud_noise: DEFAULT_CLOUD_NOISE,
            voxel_resolution: 8,
            strategies: Strategy::ALL.to_vec(),
            archs: Arch::ALL.to_vec(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decoder.validate()?;
        let bad = |field: &str, msg: &str| Err(Error::InvalidArgument(format!("{field}: {msg}")));
        if self.encoder_hidden == 0 {
            return bad("encoder_hidden", "must be at least 1");
        }
        if self.tau.is_some_and(|t| !(t > 0.0 && t < 1.0)) {
            return bad("tau", "must lie in (0, 1)");
        }
        if self.initial_resolution < 2 {
            return bad("initial_resolution", "must be at least 2");
        }
        if self.metric_samples == 0 {
            return bad("metric_samples", "must be at least 1");
        }
        if self.cloud_points == 0 {
            return bad("cloud_points", "must be at least 1");
        }
        if self.voxel_resolution == 0 {
            return bad("voxel_resolution", "must be at least 1");
        }
        if self.strategies.is_empty() || self.archs.is_empty() {
            return bad("strategies", "the ablation grid must not be empty");
        }
        Ok(())
    }
}

/// Metrics of one shape, or the mean over shapes when `shape` is `"mean"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub protocol: ProtocolKind,
    pub shape: String,
    pub strategy: Strategy,
    pub arch: Arch,
    pub tau: f64,
    /// IoU of the coarse input grid (voxel protocol only).
    pub input_iou: Option<f64>,
    pub metrics: MetricsReport,
}

/// Cell-center sampling of `field` over `region`, thresholded at 0.5.
fn voxelize_in(field: &dyn OccupancyField, region: BoundingBox, res: usize) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::filled([res; 3], region, 0.0)?;
    let mut centers = Vec::with_capacity(res * res * res);
    for i in 0..res {
        for j in 0..res {
            for k in 0..res {
                centers.push(grid.cell_center(i, j, k));
            }
        }
    }
    for (slot, v) in grid.values.iter_mut().zip(field.eval_batch(&centers)) {
        *slot = if v >= 0.5 { 1.0 } else { 0.0 };
    }
    Ok(grid)
}

/// A model trained under a protocol with everything needed to decode its
/// training shapes.
pub struct TrainedProtocol {
    pub decoder: DecoderParams,
    pub encoder: EncoderParams,
    pub dataset: Dataset,
    pub validation: ValidationSet,
    pub tau: f64,
    pub record: super::TrainRecord,
    /// IoU of each coarse input grid (voxel protocol only).
    pub input_ious: Vec<Option<f64>>,
}

/// The dataset a protocol trains on: one item per corpus shape with the
/// encoder's view of it, over the padded union of the shape boxes.
pub fn corpus_dataset<R: rand::Rng + ?Sized>(
    kind: ProtocolKind,
    corpus: &Corpus,
    cfg: &ProtocolConfig,
    rng: &mut R,
) -> Result<(Dataset, Vec<Option<f64>>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus must contain at least one shape".into()));
    }
    let bbox = corpus
        .shapes
        .iter()
        .skip(1)
        .fold(corpus.shapes[0].field.bbox(), |b, s| b.union(&s.field.bbox()));
    let region = bbox.padded(crate::sampling::DEFAULT_PADDING);
    let mut input_ious = vec![None; corpus.len()];
    let mut items = Vec::with_capacity(corpus.len());
    for (i, s) in corpus.shapes.iter().enumerate() {
        let observation = match kind {
            ProtocolKind::ReprPower | ProtocolKind::Ablation => Observation::ShapeId(i),
            ProtocolKind::Pointcloud => {
                Observation::Points(make_noisy_cloud(&s.mesh, cfg.cloud_points, cfg.cloud_noise, rng)?)
            }
            ProtocolKind::VoxelSr => {
                let grid = voxelize_in(s.field.as_ref(), region, cfg.voxel_resolution)?;
                let coarse = VoxelField::new(grid.clone(), Interpolation::Nearest)?;
                let mut r = ChaCha8Rng::seed_from_u64(cfg.train.seed);
                input_ious[i] = Some(metrics::volumetric_iou(&coarse, s.field.as_ref(), cfg.metric_samples, &mut r)?);
                Observation::Voxels(grid)
            }
            ProtocolKind::Generative => Observation::Sampled,
        };
        items.push(TrainItem::new(s.field.clone(), observation).with_surface(s.mesh.clone()));
    }
    let mut dataset = Dataset::new(items)?;
    dataset.region = region;
    Ok((dataset, input_ious))
}

/// A freshly initialized encoder of the kind `kind` trains.
pub fn protocol_encoder<R: rand::Rng + ?Sized>(
    kind: ProtocolKind,
    shapes: usize,
    cfg: &ProtocolConfig,
    rng: &mut R,
) -> EncoderParams {
    let dim = cfg.decoder.condition_dim;
    let h = cfg.encoder_hidden;
    match kind {
        ProtocolKind::ReprPower | ProtocolKind::Ablation => EncoderParams::latent_table(shapes, dim, rng),
        ProtocolKind::Pointcloud => EncoderParams::point_net(h, dim, rng),
        ProtocolKind::VoxelSr => EncoderParams::voxel_mlp(cfg.voxel_resolution, h, dim, rng),
        ProtocolKind::Generative => EncoderParams::variational(h, dim, rng),
    }
}

/// Trains one (strategy, architecture) cell and picks its threshold.
pub fn train_protocol(
    kind: ProtocolKind,
    corpus: &Corpus,
    cfg: &ProtocolConfig,
    strategy: Strategy,
    arch: Arch,
) -> Result<TrainedProtocol> {
    cfg.validate()?;
    let mut train = cfg.train.clone();
    train.strategy = strategy;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let decoder = DecoderParams::new(arch.apply(&cfg.decoder), &mut rng)?;
    let (dataset, input_ious) = corpus_dataset(kind, corpus, cfg, &mut rng)?;
    let encoder = protocol_encoder(kind, corpus.len(), cfg, &mut rng);
    let TrainOutcome {
        decoder,
        encoder,
        mut record,
    } = match kind {
        ProtocolKind::Generative => train_generative(decoder, encoder, &dataset, &train)?,
        _ => train_field(decoder, encoder, &dataset, &train)?,
    };
    let validation = ValidationSet::new(&dataset, &train)?;
    let tau = match (cfg.tau, kind) {
        (Some(t), _) => t,
        (None, ProtocolKind::Ablation) => 0.5,
        (None, _) => select_tau(&decoder, &encoder, &dataset, &validation, &train.tau_grid)?,
    };
    record.tau = Some(tau);
    Ok(TrainedProtocol {
        decoder,
        encoder,
        dataset,
        validation,
        tau,
        record,
        input_ious,
    })
}

/// Trains and evaluates one (strategy, architecture) cell.
fn run_cell(
    kind: ProtocolKind,
    corpus: &Corpus,
    cfg: &ProtocolConfig,
    strategy: Strategy,
    arch: Arch,
) -> Result<Vec<ProtocolRow>> {
    let t = train_protocol(kind, corpus, cfg, strategy, arch)?;
    let region = t.dataset.region;
    let extraction = ExtractionConfig::new(region)
        .with_tau(t.tau)
        .with_resolution(cfg.initial_resolution, cfg.levels);
    let decoder = Arc::new(t.decoder);
    let mut rows = Vec::with_capacity(corpus.len() + 1);
    for (i, s) in corpus.shapes.iter().enumerate() {
        let cond = condition_for(&t.encoder, &t.dataset, &t.validation, i)?;
        let field = DecoderField::new(decoder.clone(), cond, region)?;
        let (mesh, _) = extract_mesh(&field, &extraction, &RefineConfig::none())?;
        let report = metrics::evaluate(&mesh, s.field.as_ref(), &s.mesh, cfg.metric_samples, cfg.train.seed)?;
        rows.push(ProtocolRow {
            protocol: kind,
            shape: s.name.clone(),
            strategy,
            arch,
            tau: t.tau,
            input_iou: t.input_ious[i],
            metrics: report,
        });
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|r| r.metrics.clone()).collect();
    let inputs: Vec<f64> = t.input_ious.iter().flatten().copied().collect();
    rows.push(ProtocolRow {
        protocol: kind,
        shape: "mean".into(),
        strategy,
        arch,
        tau: t.tau,
        input_iou: (!inputs.is_empty()).then(|| inputs.iter().sum::<f64>() / inputs.len() as f64),
        metrics: MetricsReport::mean(&reports).expect("corpus is not empty"),
    });
    Ok(rows)
}

/// Trains, extracts and evaluates on `corpus`. Every cell yields one row
/// per shape followed by a `"mean"` row; the ablation has one cell per
/// (strategy, architecture) pair, the others a single cell with the
/// configured strategy and the full architecture.
pub fn run_protocol(kind: ProtocolKind, corpus: &Corpus, cfg: &ProtocolConfig) -> Result<Vec<ProtocolRow>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus must contain at least one shape".into()));
    }
    if kind != ProtocolKind::Ablation {
        return run_cell(kind, corpus, cfg, cfg.train.strategy, Arch::Full);
    }
    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        for &arch in &cfg.archs {
            log::info!("ablation cell {strategy} / {arch}");
            rows.extend(run_cell(kind, corpus, cfg, strategy, arch)?);
        }
    }
    Ok(rows)
}
