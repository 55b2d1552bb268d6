//! Losses, the optimizer and the training loops for conditional and
//! generative occupancy models.

mod protocol;

pub use protocol::{
    corpus_dataset, desk_corpus, desk_shapes, protocol_encoder, run_protocol, train_protocol, Arch, Corpus, CorpusShape,
    ProtocolConfig, ProtocolKind, ProtocolRow, TrainedProtocol,
};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{OccupancyField, VoxelGrid};
use crate::geometry::{BoundingBox, Point3, TriangleMesh};
use crate::marching_cubes::{marching_cubes, CornerGrid};
use crate::neural::{sigmoid, DecoderBatch, DecoderParams, EncoderInput, EncoderParams, Encoding, Mode, Tensor2};
use crate::sampling::{self, SampleBatch, Strategy, DEFAULT_PADDING, DEFAULT_POINTS, DEFAULT_SURFACE_NOISE};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_VALIDATION_POINTS: usize = 10_000;
/// Threshold used for validation IoU while training.
pub const VALIDATION_TAU: f64 = 0.5;
const VALIDATION_STREAM: u64 = 0x5EED_0F_7A11D;
const SURFACE_RESOLUTION: usize = 64;

pub fn default_tau_grid() -> Vec<f64> {
    (1..10).map(|i| i as f64 / 10.0).collect()
}

/// Mean binary cross-entropy of `logits` against `labels` and its gradient
/// with respect to the logits.
pub fn bce_loss(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::Dimension(format!("{} logits with {} labels", logits.len(), labels.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument(format!("labels must be 0 or 1, got {y}")));
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            loss += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
            (sigmoid(l) - y) / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// KL divergence from a diagonal Gaussian to the standard normal, with
/// gradients with respect to `mu` and `log_sigma`.
pub fn kl_diag_gaussian(mu: &[f64], log_sigma: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if mu.len() != log_sigma.len() {
        return Err(Error::Dimension(format!("{} means with {} scales", mu.len(), log_sigma.len())));
    }
    let mut kl = 0.0;
    let mut dls = Vec::with_capacity(mu.len());
    for (&m, &ls) in mu.iter().zip(log_sigma) {
        let var = (2.0 * ls).exp();
        kl += 0.5 * (m * m + var - 1.0 - 2.0 * ls);
        dls.push(var - 1.0);
    }
    Ok((kl, mu.to_vec(), dls))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates each tensor from its `grad`. The tensor list must keep the
    /// same order and shapes between calls.
    pub fn step(&mut self, tensors: Vec<&mut Tensor2>) {
        if self.m.is_empty() {
            self.m = tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((t, m), v) in tensors.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..t.data.len() {
                let g = t.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                t.data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Optimization settings shared by all training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Points drawn per shape per step.
    pub points: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub validation_interval: usize,
    pub validation_points: usize,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    pub tau_grid: Vec<f64>,
    /// Noise of the surface strategy.
    pub surface_noise: f64,
    pub kl_weight: f64,
    /// Ramp the KL weight from 0 over the first fifth of the steps.
    pub kl_anneal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Uniform,
            points: DEFAULT_POINTS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            max_steps: 5000,
            validation_interval: 100,
            validation_points: DEFAULT_VALIDATION_POINTS,
            patience: None,
            seed: 0,
            tau_grid: default_tau_grid(),
            surface_noise: DEFAULT_SURFACE_NOISE,
            kl_weight: 1.0,
            kl_anneal: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::InvalidArgument(format!("{field}: {msg}")));
        if self.points == 0 {
            return bad("points", "must be at least 1");
        }
        if self.strategy == Strategy::Equal && self.points % 2 != 0 {
            return bad("points", "must be even for the equal strategy");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.validation_interval == 0 {
            return bad("validation_interval", "must be at least 1");
        }
        if self.validation_points == 0 {
            return bad("validation_points", "must be at least 1");
        }
        if self.patience == Some(0) {
            return bad("patience", "must be at least 1");
        }
        if self.tau_grid.is_empty() {
            return bad("tau_grid", "must not be empty");
        }
        if self.tau_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("tau_grid", "values must lie in (0, 1)");
        }
        if !(self.surface_noise >= 0.0 && self.surface_noise.is_finite()) {
            return bad("surface_noise", "must be >= 0");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight", "must be >= 0");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// One validation point of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    /// Mean loss over the steps since the previous row.
    pub loss: f64,
    pub val_iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub rows: Vec<TrainRow>,
    /// Step of the returned parameters (0 when no step was taken).
    pub best_step: usize,
    pub best_val_iou: Option<f64>,
    /// Threshold chosen after training, when selected.
    pub tau: Option<f64>,
}

/// What the encoder sees for one shape.
#[derive(Debug, Clone)]
pub enum Observation {
    ShapeId(usize),
    Points(Vec<Point3>),
    Voxels(VoxelGrid),
    /// Labelled points are drawn during training (variational encoders).
    Sampled,
}

/// A training shape: the supervising field and the encoder's view of it.
#[derive(Clone)]
pub struct TrainItem {
    pub field: Arc<dyn OccupancyField>,
    /// Surface used by the surface strategy; derived from the field by
    /// marching cubes when absent.
    pub surface: Option<Arc<TriangleMesh>>,
    pub observation: Observation,
}

impl TrainItem {
    pub fn new(field: Arc<dyn OccupancyField>, observation: Observation) -> Self {
        TrainItem {
            field,
            surface: None,
            observation,
        }
    }

    pub fn with_surface(mut self, mesh: Arc<TriangleMesh>) -> Self {
        self.surface = Some(mesh);
        self
    }
}

/// Shapes trained together, sampled over a shared region.
#[derive(Clone)]
pub struct Dataset {
    pub items: Vec<TrainItem>,
    pub region: BoundingBox,
}

impl Dataset {
    /// The region is the union of the item boxes grown by the default
    /// padding.
    pub fn new(items: Vec<TrainItem>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset must contain at least one shape".into()))?;
        let bbox = items.iter().skip(1).fold(first.field.bbox(), |b, i| b.union(&i.field.bbox()));
        Ok(Dataset {
            items,
            region: bbox.padded(DEFAULT_PADDING),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn surfaces(&self, strategy: Strategy) -> Result<Vec<Option<Arc<TriangleMesh>>>> {
        self.items
            .iter()
            .map(|item| {
                if strategy != Strategy::Surface || item.surface.is_some() {
                    return Ok(item.surface.clone());
                }
                let grid = CornerGrid::sample(item.field.as_ref(), SURFACE_RESOLUTION, self.region);
                let mesh = marching_cubes(&grid, 0.5);
                if mesh.faces.is_empty() {
                    return Err(Error::InvalidArgument("surface strategy needs a shape with a surface".into()));
                }
                Ok(Some(Arc::new(mesh)))
            })
            .collect()
    }
}

fn draw<R: Rng + ?Sized>(
    item: &TrainItem,
    surface: Option<&TriangleMesh>,
    region: &BoundingBox,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SampleBatch> {
    let field = item.field.as_ref();
    match cfg.strategy {
        Strategy::Uniform => sampling::sample_uniform_in(field, region, cfg.points, rng),
        Strategy::Equal => sampling::sample_equal_in(field, region, cfg.points, rng),
        Strategy::Surface => {
            let mesh = surface.expect("surfaces prepared for the surface strategy");
            sampling::sample_near_surface(field, mesh, region, cfg.points, cfg.surface_noise, rng)
        }
    }
}

/// Fixed labelled points per shape for validation and threshold search.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub points: Vec<Vec<Point3>>,
    pub labels: Vec<Vec<bool>>,
    /// Labelled points fed to a variational encoder.
    pub encoder_inputs: Vec<SampleBatch>,
}

impl ValidationSet {
    pub fn new(dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_STREAM);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut encoder_inputs = Vec::new();
        for item in &dataset.items {
            let b = sampling::sample_uniform_in(item.field.as_ref(), &dataset.region, cfg.validation_points, &mut rng)?;
            labels.push(b.occupancies.iter().map(|&o| o == 1.0).collect());
            points.push(b.points);
            encoder_inputs.push(sampling::sample_uniform_in(
                item.field.as_ref(),
                &dataset.region,
                cfg.points,
                &mut rng,
            )?);
        }
        Ok(ValidationSet {
            points,
            labels,
            encoder_inputs,
        })
    }
}

/// Condition vector for shape `i` in eval mode; the posterior mean for
/// variational encoders.
pub fn condition_for(encoder: &EncoderParams, dataset: &Dataset, val: &ValidationSet, i: usize) -> Result<Vec<f64>> {
    let input = match (&dataset.items[i].observation, encoder) {
        (_, EncoderParams::VariationalHead { .. }) | (Observation::Sampled, _) => {
            let b = &val.encoder_inputs[i];
            EncoderInput::Labeled {
                points: &b.points,
                occupancies: &b.occupancies,
            }
        }
        (Observation::ShapeId(id), _) => EncoderInput::ShapeId(*id),
        (Observation::Points(p), _) => EncoderInput::Points(p),
        (Observation::Voxels(g), _) => EncoderInput::Voxels(g),
    };
    Ok(encoder.encode(input)?.mean().to_vec())
}

/// Decoder probabilities at every validation point of every shape.
fn validation_probabilities(
    decoder: &DecoderParams,
    encoder: &EncoderParams,
    dataset: &Dataset,
    val: &ValidationSet,
) -> Result<Vec<Vec<f64>>> {
    (0..dataset.len())
        .map(|i| {
            let cond = condition_for(encoder, dataset, val, i)?;
            let logits = decoder.forward_points(&val.points[i], &cond)?;
            Ok(logits.into_iter().map(sigmoid).collect())
        })
        .collect()
}

fn mean_iou(probs: &[Vec<f64>], val: &ValidationSet, tau: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(&val.labels)
        .map(|(p, l)| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&v, &y) in p.iter().zip(l) {
                let o = v >= tau;
                inter += (o && y) as usize;
                union += (o || y) as usize;
            }
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    total / probs.len() as f64
}

/// Mean validation IoU at threshold `tau`.
pub fn validation_iou(
    decoder: &DecoderParams,
    encoder: &EncoderParams,
    dataset: &Dataset,
    val: &ValidationSet,
    tau: f64,
) -> Result<f64> {
    let probs = validation_probabilities(decoder, encoder, dataset, val)?;
    Ok(mean_iou(&probs, val, tau))
}

/// Mean validation IoU for every threshold of `grid`.
pub fn tau_curve(
    decoder: &DecoderParams,
    encoder: &EncoderParams,
    dataset: &Dataset,
    val: &ValidationSet,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let probs = validation_probabilities(decoder, encoder, dataset, val)?;
    Ok(grid.iter().map(|&t| (t, mean_iou(&probs, val, t))).collect())
}

/// The grid threshold with the highest mean validation IoU; ties go to the
/// smaller threshold.
pub fn select_tau(
    decoder: &DecoderParams,
    encoder: &EncoderParams,
    dataset: &Dataset,
    val: &ValidationSet,
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("threshold grid must not be empty".into()));
    }
    let curve = tau_curve(decoder, encoder, dataset, val, grid)?;
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for (t, iou) in curve {
        if iou > best.1 || (iou == best.1 && t < best.0) {
            best = (t, iou);
        }
    }
    Ok(best.0)
}

/// Trained parameters with the history of the run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub decoder: DecoderParams,
    pub encoder: EncoderParams,
    pub record: TrainRecord,
}

struct Tracker {
    best: Option<(f64, DecoderParams, EncoderParams)>,
    record: TrainRecord,
    interval_loss: f64,
    interval_steps: usize,
    stale: usize,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            best: None,
            record: TrainRecord::default(),
            interval_loss: 0.0,
            interval_steps: 0,
            stale: 0,
        }
    }

    /// Records a validation; returns whether patience ran out.
    fn validate(
        &mut self,
        step: usize,
        decoder: &DecoderParams,
        encoder: &EncoderParams,
        dataset: &Dataset,
        val: &ValidationSet,
        cfg: &TrainConfig,
    ) -> Result<bool> {
        let iou = validation_iou(decoder, encoder, dataset, val, VALIDATION_TAU)?;
        self.record.rows.push(TrainRow {
            step,
            loss: self.interval_loss / self.interval_steps.max(1) as f64,
            val_iou: iou,
        });
        self.interval_loss = 0.0;
        self.interval_steps = 0;
        if self.best.as_ref().is_none_or(|(b, _, _)| iou > *b) {
            self.best = Some((iou, decoder.clone(), encoder.clone()));
            self.record.best_step = step;
            self.record.best_val_iou = Some(iou);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Ok(cfg.patience.is_some_and(|p| self.stale >= p))
    }

    fn finish(self, decoder: DecoderParams, encoder: EncoderParams) -> TrainOutcome {
        match self.best {
            Some((_, d, e)) => TrainOutcome {
                decoder: d,
                encoder: e,
                record: self.record,
            },
            None => TrainOutcome {
                decoder,
                encoder,
                record: self.record,
            },
        }
    }
}

fn check_finite(step: usize, loss: f64, decoder: &DecoderParams) -> Result<()> {
    if !loss.is_finite() || !decoder.tensors().iter().all(|t| t.is_finite()) {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

fn pick_items<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Trains a decoder and a deterministic encoder on `dataset`, keeping the
/// parameters with the best validation IoU.
pub fn train_field(
    mut decoder: DecoderParams,
    mut encoder: EncoderParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if matches!(encoder, EncoderParams::VariationalHead { .. }) {
        return Err(Error::KindMismatch {
            expected: "a deterministic encoder".into(),
            got: encoder.kind().into(),
        });
    }
    check_dims(&decoder, &encoder)?;
    if cfg.max_steps == 0 {
        return Ok(TrainOutcome {
            decoder,
            encoder,
            record: TrainRecord::default(),
        });
    }
    let val = ValidationSet::new(dataset, cfg)?;
    let surfaces = dataset.surfaces(cfg.strategy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_dec = Adam::new(cfg.learning_rate);
    let mut adam_enc = Adam::new(cfg.learning_rate);
    let mut tracker = Tracker::new();
    let cdim = decoder.condition_dim();

    for step in 1..=cfg.max_steps {
        let picks = pick_items(dataset.len(), cfg.batch_size, &mut rng);
        let mut points = Vec::with_capacity(picks.len() * cfg.points);
        let mut labels = Vec::with_capacity(picks.len() * cfg.points);
        let mut conditions = Vec::with_capacity(picks.len() * cdim);
        let mut tapes = Vec::with_capacity(picks.len());
        for &i in &picks {
            let item = &dataset.items[i];
            let b = draw(item, surfaces[i].as_deref(), &dataset.region, cfg, &mut rng)?;
            let input = match &item.observation {
                Observation::ShapeId(id) => EncoderInput::ShapeId(*id),
                Observation::Points(p) => EncoderInput::Points(p),
                Observation::Voxels(g) => EncoderInput::Voxels(g),
                Observation::Sampled => {
                    return Err(Error::InvalidArgument(
                        "sampled observations need a variational encoder".into(),
                    ))
                }
            };
            let (enc, tape) = encoder.encode_tape(input)?;
            conditions.extend_from_slice(enc.mean());
            tapes.push(tape);
            points.extend(b.points);
            labels.extend(b.occupancies);
        }
        let counts = vec![cfg.points; picks.len()];
        let (logits, tape) = decoder.forward_tape(&DecoderBatch::new(&points, &conditions, &counts), Mode::Train)?;
        let (mean, mut grad) = bce_loss(&logits, &labels)?;
        // Summed over the points of a shape, averaged over shapes.
        let scale = cfg.points as f64;
        let loss = mean * scale;
        grad.iter_mut().for_each(|g| *g *= scale);
        check_finite(step, loss, &decoder)?;

        decoder.zero_grad();
        encoder.zero_grad();
        let input_grads = decoder.backward(&tape, &grad)?;
        for (k, t) in tapes.iter().enumerate() {
            encoder.backward(t, &input_grads.conditions[k * cdim..(k + 1) * cdim])?;
        }
        decoder.update_running_stats(&tape);
        adam_dec.step(decoder.tensors_mut());
        adam_enc.step(encoder.tensors_mut());
        check_finite(step, loss, &decoder)?;

        tracker.interval_loss += loss;
        tracker.interval_steps += 1;
        if step % cfg.validation_interval == 0 || step == cfg.max_steps {
            let stop = tracker.validate(step, &decoder, &encoder, dataset, &val, cfg)?;
            log::debug!("step {step}: loss {loss:.4}, val iou {:?}", tracker.record.rows.last().map(|r| r.val_iou));
            if stop {
                break;
            }
        }
    }
    Ok(tracker.finish(decoder, encoder))
}

fn check_dims(decoder: &DecoderParams, encoder: &EncoderParams) -> Result<()> {
    decoder.validate()?;
    encoder.validate()?;
    if encoder.output_dim() != decoder.condition_dim() {
        return Err(Error::Dimension(format!(
            "encoder produces {} values, decoder expects {}",
            encoder.output_dim(),
            decoder.condition_dim()
        )));
    }
    Ok(())
}

/// KL weight at `step` (1-based) under the optional linear ramp.
pub fn kl_weight_at(cfg: &TrainConfig, step: usize) -> f64 {
    if !cfg.kl_anneal {
        return cfg.kl_weight;
    }
    let ramp = (cfg.max_steps as f64 * 0.2).max(1.0);
    cfg.kl_weight * (step as f64 / ramp).min(1.0)
}

/// Loss and gradients of one variational step; used by
/// [`train_generative`] and exposed for checking.
pub struct GenerativeStep {
    pub loss: f64,
    pub bce: f64,
    pub kl: f64,
}

/// One evaluation of the lower bound on given samples and noise,
/// accumulating gradients into `decoder` and `encoder`.
pub fn generative_step(
    decoder: &mut DecoderParams,
    encoder: &mut EncoderParams,
    batches: &[SampleBatch],
    noise: &[Vec<f64>],
    kl_weight: f64,
) -> Result<(GenerativeStep, crate::neural::Tape)> {
    let dim = decoder.condition_dim();
    let b = batches.len();
    if b == 0 || noise.len() != b || noise.iter().any(|e| e.len() != dim) {
        return Err(Error::Dimension("one noise vector per batch item is required".into()));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut counts = Vec::with_capacity(b);
    let mut z = Vec::with_capacity(b * dim);
    let mut posts = Vec::with_capacity(b);
    let mut kl_total = 0.0;
    for (batch, eps) in batches.iter().zip(noise) {
        let (enc, tape) = encoder.encode_tape(EncoderInput::Labeled {
            points: &batch.points,
            occupancies: &batch.occupancies,
        })?;
        let Encoding::Gaussian { mu, log_sigma } = enc else {
            unreachable!("variational encoder yields a Gaussian")
        };
        for k in 0..dim {
            z.push(mu[k] + log_sigma[k].exp() * eps[k]);
        }
        let (kl, dmu, dls) = kl_diag_gaussian(&mu, &log_sigma)?;
        kl_total += kl;
        posts.push((tape, log_sigma, dmu, dls));
        points.extend_from_slice(&batch.points);
        labels.extend_from_slice(&batch.occupancies);
        counts.push(batch.len());
    }
    let (logits, tape) = decoder.forward_tape(&DecoderBatch::new(&points, &z, &counts), Mode::Train)?;
    let (mean, mut grad) = bce_loss(&logits, &labels)?;
    // Gradient of (1/B) sum over points: rescale the per-point mean.
    let n = logits.len() as f64;
    let bce = mean * n / b as f64;
    grad.iter_mut().for_each(|g| *g *= n / b as f64);
    let kl = kl_total / b as f64;

    let grads = decoder.backward(&tape, &grad)?;
    for (i, (etape, log_sigma, dmu, dls)) in posts.iter().enumerate() {
        let dz = &grads.conditions[i * dim..(i + 1) * dim];
        let mut upstream = vec![0.0; 2 * dim];
        for k in 0..dim {
            let sigma = log_sigma[k].exp();
            upstream[k] = dz[k] + kl_weight * dmu[k] / b as f64;
            upstream[dim + k] = dz[k] * noise[i][k] * sigma + kl_weight * dls[k] / b as f64;
        }
        encoder.backward(etape, &upstream)?;
    }
    Ok((
        GenerativeStep {
            loss: bce + kl_weight * kl,
            bce,
            kl,
        },
        tape,
    ))
}

/// Trains a decoder with a variational encoder by maximizing the lower
/// bound with reparameterized latent samples.
pub fn train_generative(
    mut decoder: DecoderParams,
    mut encoder: EncoderParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !matches!(encoder, EncoderParams::VariationalHead { .. }) {
        return Err(Error::KindMismatch {
            expected: "variational_head".into(),
            got: encoder.kind().into(),
        });
    }
    check_dims(&decoder, &encoder)?;
    if cfg.max_steps == 0 {
        return Ok(TrainOutcome {
            decoder,
            encoder,
            record: TrainRecord::default(),
        });
    }
    let val = ValidationSet::new(dataset, cfg)?;
    let surfaces = dataset.surfaces(cfg.strategy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_dec = Adam::new(cfg.learning_rate);
    let mut adam_enc = Adam::new(cfg.learning_rate);
    let mut tracker = Tracker::new();
    let dim = decoder.condition_dim();

    for step in 1..=cfg.max_steps {
        let picks = pick_items(dataset.len(), cfg.batch_size, &mut rng);
        let mut batches = Vec::with_capacity(picks.len());
        for &i in &picks {
            batches.push(draw(&dataset.items[i], surfaces[i].as_deref(), &dataset.region, cfg, &mut rng)?);
        }
        let noise: Vec<Vec<f64>> = (0..picks.len())
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        decoder.zero_grad();
        encoder.zero_grad();
        let (out, tape) = generative_step(&mut decoder, &mut encoder, &batches, &noise, kl_weight_at(cfg, step))?;
        check_finite(step, out.loss, &decoder)?;
        decoder.update_running_stats(&tape);
        adam_dec.step(decoder.tensors_mut());
        adam_enc.step(encoder.tensors_mut());
        check_finite(step, out.loss, &decoder)?;

        tracker.interval_loss += out.loss;
        tracker.interval_steps += 1;
        if step % cfg.validation_interval == 0 || step == cfg.max_steps {
            if tracker.validate(step, &decoder, &encoder, dataset, &val, cfg)? {
                break;
            }
        }
    }
    Ok(tracker.finish(decoder, encoder))
}

#[cfg(test)]
mod tests;
