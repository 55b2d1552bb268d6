use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{column_sums, matmul, matmul_at, matmul_bt, Tensor2};
use crate::error::{Error, Result};
use crate::geometry::{Point3, Vec3};

const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// `ln(1 + e^x)`; smooth, so second spatial derivatives are nonzero.
    Softplus,
}

impl Activation {
    #[inline]
    fn value(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    #[inline]
    fn d1(self, x: f64) -> f64 {
        match self {
            Activation::Relu => (x > 0.0) as u8 as f64,
            Activation::Softplus => sigmoid(x),
        }
    }

    #[inline]
    fn d2(self, x: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub condition_dim: usize,
    pub blocks: usize,
    /// Skip connections around each block.
    pub resnet: bool,
    /// Conditional batch normalization; without it the condition is
    /// projected and added to the input features.
    pub cbn: bool,
    pub activation: Activation,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 256,
            condition_dim: 128,
            blocks: 5,
            resnet: true,
            cbn: true,
            activation: Activation::Relu,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.condition_dim == 0 {
            return Err(Error::InvalidArgument(
                "hidden width and condition length must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics; every point is processed independently.
    Eval,
}

/// `y = x W + b` with `W` stored input-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: Tensor2::uniform(inputs, outputs, bound, rng),
            bias: Tensor2::uniform(1, outputs, bound, rng),
        }
    }

    pub fn constant(inputs: usize, outputs: usize, weight: f64, bias: f64) -> Self {
        Linear {
            weight: Tensor2::filled(inputs, outputs, weight),
            bias: Tensor2::filled(1, outputs, bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub(crate) fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let out = self.outputs();
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.data);
        }
        matmul(x, &self.weight.data, &mut y, rows, self.inputs(), out, true);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// asked for.
    pub(crate) fn backward(&mut self, x: &[f64], dy: &[f64], rows: usize, want_input: bool) -> Option<Vec<f64>> {
        let (i, o) = (self.inputs(), self.outputs());
        matmul_at(x, dy, &mut self.weight.grad, i, rows, o, true);
        column_sums(dy, o, &mut self.bias.grad);
        want_input.then(|| {
            let mut dx = vec![0.0; rows * i];
            matmul_bt(dy, &self.weight.data, &mut dx, rows, o, i, false);
            dx
        })
    }

    pub(crate) fn input_grad(&self, dy: &[f64], rows: usize) -> Vec<f64> {
        let mut dx = vec![0.0; rows * self.inputs()];
        matmul_bt(dy, &self.weight.data, &mut dx, rows, self.outputs(), self.inputs(), false);
        dx
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor2; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub(crate) fn tensors(&self) -> [&Tensor2; 2] {
        [&self.weight, &self.bias]
    }
}

/// Conditional batch normalization: scale and shift are affine in the
/// condition vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cbn {
    pub gamma: Linear,
    pub beta: Linear,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl Cbn {
    pub fn new(condition_dim: usize, channels: usize) -> Self {
        Cbn {
            gamma: Linear::constant(condition_dim, channels, 0.0, 1.0),
            beta: Linear::constant(condition_dim, channels, 0.0, 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub fc0: Linear,
    pub fc1: Linear,
    pub cbn0: Option<Cbn>,
    pub cbn1: Option<Cbn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub fc_in: Linear,
    /// Condition projection, present only without normalization.
    pub fc_cond: Option<Linear>,
    pub blocks: Vec<Block>,
    pub fc_out: Linear,
}

/// Points grouped by item; item `i` owns `counts[i]` consecutive points and
/// condition row `i`.
#[derive(Debug, Clone, Copy)]
pub struct DecoderBatch<'a> {
    pub points: &'a [Point3],
    pub conditions: &'a [f64],
    pub counts: &'a [usize],
}

impl<'a> DecoderBatch<'a> {
    pub fn new(points: &'a [Point3], conditions: &'a [f64], counts: &'a [usize]) -> Self {
        DecoderBatch {
            points,
            conditions,
            counts,
        }
    }
}

#[derive(Debug, Clone)]
struct NormRecord {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockRecord {
    norm0: Option<NormRecord>,
    a0: Vec<f64>,
    r0: Vec<f64>,
    norm1: Option<NormRecord>,
    a1: Vec<f64>,
    r1: Vec<f64>,
}

/// Intermediates of one forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Tape {
    mode: Mode,
    items: Vec<usize>,
    n_items: usize,
    inputs: Vec<f64>,
    conditions: Vec<f64>,
    blocks: Vec<BlockRecord>,
    x_last: Vec<f64>,
    h_last: Vec<f64>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Gradients with respect to the decoder inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradients {
    pub points: Vec<Vec3>,
    /// One row per item.
    pub conditions: Vec<f64>,
}

fn apply(act: Activation, a: &[f64]) -> Vec<f64> {
    a.iter().map(|&v| act.value(v)).collect()
}

impl DecoderParams {
    pub fn new<R: Rng + ?Sized>(config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let c = config.condition_dim;
        let fc_in = Linear::new(3, h, rng);
        let fc_cond = (!config.cbn).then(|| Linear::new(c, h, rng));
        let blocks = (0..config.blocks)
            .map(|_| Block {
                fc0: Linear::new(h, h, rng),
                fc1: Linear::new(h, h, rng),
                cbn0: config.cbn.then(|| Cbn::new(c, h)),
                cbn1: config.cbn.then(|| Cbn::new(c, h)),
            })
            .collect();
        Ok(DecoderParams {
            config,
            fc_in,
            fc_cond,
            blocks,
            fc_out: Linear::constant(h, 1, 0.0, 0.0),
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn condition_dim(&self) -> usize {
        self.config.condition_dim
    }

    /// Checks that every tensor has the shape the configuration implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let h = self.config.hidden;
        let c = self.config.condition_dim;
        let check = |name: &str, l: &Linear, i: usize, o: usize| {
            if l.weight.shape() != (i, o) || l.bias.shape() != (1, o) {
                return Err(Error::Weights(format!(
                    "{name}: expected {i}x{o} weight, found {:?}",
                    l.weight.shape()
                )));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Weights(format!("{name}: non-finite weights")));
            }
            Ok(())
        };
        let check_cbn = |name: &str, n: &Option<Cbn>| -> Result<()> {
            match (n, self.config.cbn) {
                (Some(n), true) => {
                    check(&format!("{name}.gamma"), &n.gamma, c, h)?;
                    check(&format!("{name}.beta"), &n.beta, c, h)?;
                    if n.running_mean.len() != h || n.running_var.len() != h {
                        return Err(Error::Weights(format!("{name}: running statistics must have {h} channels")));
                    }
                    if n.running_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                        return Err(Error::Weights(format!("{name}: running variance must be positive")));
                    }
                    Ok(())
                }
                (None, false) => Ok(()),
                _ => Err(Error::Weights(format!("{name}: normalization does not match configuration"))),
            }
        };
        check("fc_in", &self.fc_in, 3, h)?;
        match (&self.fc_cond, self.config.cbn) {
            (Some(l), false) => check("fc_cond", l, c, h)?,
            (None, true) => {}
            _ => return Err(Error::Weights("fc_cond does not match configuration".into())),
        }
        if self.blocks.len() != self.config.blocks {
            return Err(Error::Weights(format!(
                "expected {} blocks, found {}",
                self.config.blocks,
                self.blocks.len()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            check(&format!("blocks[{i}].fc0"), &b.fc0, h, h)?;
            check(&format!("blocks[{i}].fc1"), &b.fc1, h, h)?;
            check_cbn(&format!("blocks[{i}].cbn0"), &b.cbn0)?;
            check_cbn(&format!("blocks[{i}].cbn1"), &b.cbn1)?;
        }
        check("fc_out", &self.fc_out, h, 1)
    }

    /// Every trainable tensor in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out: Vec<&mut Tensor2> = Vec::new();
        out.extend(self.fc_in.tensors_mut());
        if let Some(l) = &mut self.fc_cond {
            out.extend(l.tensors_mut());
        }
        for b in &mut self.blocks {
            out.extend(b.fc0.tensors_mut());
            out.extend(b.fc1.tensors_mut());
            for n in [&mut b.cbn0, &mut b.cbn1].into_iter().flatten() {
                out.extend(n.gamma.tensors_mut());
                out.extend(n.beta.tensors_mut());
            }
        }
        out.extend(self.fc_out.tensors_mut());
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        let mut out: Vec<&Tensor2> = Vec::new();
        out.extend(self.fc_in.tensors());
        if let Some(l) = &self.fc_cond {
            out.extend(l.tensors());
        }
        for b in &self.blocks {
            out.extend(b.fc0.tensors());
            out.extend(b.fc1.tensors());
            for n in [&b.cbn0, &b.cbn1].into_iter().flatten() {
                out.extend(n.gamma.tensors());
                out.extend(n.beta.tensors());
            }
        }
        out.extend(self.fc_out.tensors());
        out
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn check_batch(&self, batch: &DecoderBatch, mode: Mode) -> Result<Vec<usize>> {
        let c = self.config.condition_dim;
        if batch.conditions.len() != batch.counts.len() * c {
            return Err(Error::Dimension(format!(
                "{} items need {} condition values of length {c}, got {}",
                batch.counts.len(),
                batch.counts.len() * c,
                batch.conditions.len()
            )));
        }
        let total: usize = batch.counts.iter().sum();
        if total != batch.points.len() {
            return Err(Error::Dimension(format!(
                "item counts sum to {total} but {} points were given",
                batch.points.len()
            )));
        }
        if total == 0 {
            return Err(Error::InvalidArgument("empty point batch".into()));
        }
        if mode == Mode::Train && self.config.cbn && total < 2 {
            return Err(Error::InvalidArgument(
                "batch statistics need at least two points".into(),
            ));
        }
        Ok(batch
            .counts
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| std::iter::repeat_n(i, n))
            .collect())
    }

    fn normalize(
        &self,
        cbn: &Cbn,
        x: &[f64],
        items: &[usize],
        conditions: &[f64],
        n_items: usize,
        mode: Mode,
    ) -> (Vec<f64>, NormRecord) {
        let h = self.config.hidden;
        let n = items.len();
        let gamma = cbn.gamma.forward(conditions, n_items);
        let beta = cbn.beta.forward(conditions, n_items);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; h];
                column_sums(x, h, &mut mean);
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; h];
                for row in x.chunks_exact(h) {
                    for j in 0..h {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var)
            }
            Mode::Eval => (cbn.running_mean.clone(), cbn.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * h];
        let mut a = vec![0.0; n * h];
        for (p, &item) in items.iter().enumerate() {
            let g = &gamma[item * h..(item + 1) * h];
            let b = &beta[item * h..(item + 1) * h];
            for j in 0..h {
                let xh = (x[p * h + j] - mean[j]) * inv_std[j];
                xhat[p * h + j] = xh;
                a[p * h + j] = g[j] * xh + b[j];
            }
        }
        (
            a,
            NormRecord {
                xhat,
                inv_std,
                gamma,
                mean,
                var,
            },
        )
    }

    /// Logits for every point, with the intermediates needed by
    /// [`backward`](Self::backward).
    pub fn forward_tape(&self, batch: &DecoderBatch, mode: Mode) -> Result<(Vec<f64>, Tape)> {
        let items = self.check_batch(batch, mode)?;
        let n = items.len();
        let h = self.config.hidden;
        let n_items = batch.counts.len();
        let act = self.config.activation;
        let inputs: Vec<f64> = batch.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let mut x = self.fc_in.forward(&inputs, n);
        if let Some(fc) = &self.fc_cond {
            let proj = fc.forward(batch.conditions, n_items);
            for (p, &item) in items.iter().enumerate() {
                for j in 0..h {
                    x[p * h + j] += proj[item * h + j];
                }
            }
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a0, norm0) = match &block.cbn0 {
                Some(c) => {
                    let (a, r) = self.normalize(c, &x, &items, batch.conditions, n_items, mode);
                    (a, Some(r))
                }
                None => (x.clone(), None),
            };
            let r0 = apply(act, &a0);
            let z0 = block.fc0.forward(&r0, n);
            let (a1, norm1) = match &block.cbn1 {
                Some(c) => {
                    let (a, r) = self.normalize(c, &z0, &items, batch.conditions, n_items, mode);
                    (a, Some(r))
                }
                None => (z0, None),
            };
            let r1 = apply(act, &a1);
            let mut z1 = block.fc1.forward(&r1, n);
            if self.config.resnet {
                for (z, xv) in z1.iter_mut().zip(&x) {
                    *z += xv;
                }
            }
            x = z1;
            blocks.push(BlockRecord {
                norm0,
                a0,
                r0,
                norm1,
                a1,
                r1,
            });
        }
        let h_last = apply(act, &x);
        let logits = self.fc_out.forward(&h_last, n);
        Ok((
            logits,
            Tape {
                mode,
                items,
                n_items,
                inputs,
                conditions: batch.conditions.to_vec(),
                blocks,
                x_last: x,
                h_last,
            },
        ))
    }

    pub fn forward(&self, batch: &DecoderBatch, mode: Mode) -> Result<Vec<f64>> {
        self.forward_tape(batch, mode).map(|(l, _)| l)
    }

    /// Logits of points sharing one condition, in eval mode.
    pub fn forward_points(&self, points: &[Point3], condition: &[f64]) -> Result<Vec<f64>> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let counts = [points.len()];
        self.forward(&DecoderBatch::new(points, condition, &counts), Mode::Eval)
    }

    /// Folds the batch statistics recorded in a train-mode tape into the
    /// running statistics.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        if tape.mode != Mode::Train {
            return;
        }
        for (block, rec) in self.blocks.iter_mut().zip(&tape.blocks) {
            for (cbn, norm) in [(&mut block.cbn0, &rec.norm0), (&mut block.cbn1, &rec.norm1)] {
                if let (Some(c), Some(r)) = (cbn, norm) {
                    for j in 0..c.running_mean.len() {
                        c.running_mean[j] = BN_MOMENTUM * c.running_mean[j] + (1.0 - BN_MOMENTUM) * r.mean[j];
                        c.running_var[j] = BN_MOMENTUM * c.running_var[j] + (1.0 - BN_MOMENTUM) * r.var[j];
                    }
                }
            }
        }
    }

    fn normalize_backward(
        cbn: &mut Cbn,
        rec: &NormRecord,
        da: &[f64],
        tape: &Tape,
        h: usize,
        dcond: &mut [f64],
    ) -> Vec<f64> {
        let n = tape.items.len();
        let mut dxhat = vec![0.0; n * h];
        let mut dgamma = vec![0.0; tape.n_items * h];
        let mut dbeta = vec![0.0; tape.n_items * h];
        for (p, &item) in tape.items.iter().enumerate() {
            for j in 0..h {
                let d = da[p * h + j];
                dxhat[p * h + j] = d * rec.gamma[item * h + j];
                dgamma[item * h + j] += d * rec.xhat[p * h + j];
                dbeta[item * h + j] += d;
            }
        }
        let c = cbn.gamma.inputs();
        cbn.gamma.backward(&tape.conditions, &dgamma, tape.n_items, false);
        cbn.beta.backward(&tape.conditions, &dbeta, tape.n_items, false);
        matmul_bt(&dgamma, &cbn.gamma.weight.data, dcond, tape.n_items, h, c, true);
        matmul_bt(&dbeta, &cbn.beta.weight.data, dcond, tape.n_items, h, c, true);

        match tape.mode {
            Mode::Eval => {
                for d in dxhat.chunks_exact_mut(h) {
                    for j in 0..h {
                        d[j] *= rec.inv_std[j];
                    }
                }
                dxhat
            }
            Mode::Train => {
                let mut sum = vec![0.0; h];
                let mut sum_x = vec![0.0; h];
                for p in 0..n {
                    for j in 0..h {
                        sum[j] += dxhat[p * h + j];
                        sum_x[j] += dxhat[p * h + j] * rec.xhat[p * h + j];
                    }
                }
                let nf = n as f64;
                let mut dx = vec![0.0; n * h];
                for p in 0..n {
                    for j in 0..h {
                        let k = p * h + j;
                        dx[k] = rec.inv_std[j] / nf * (nf * dxhat[k] - sum[j] - rec.xhat[k] * sum_x[j]);
                    }
                }
                dx
            }
        }
    }

    /// Backpropagates `dlogits` through the recorded pass. Parameter
    /// gradients are added to each tensor's `grad`; input gradients are
    /// returned.
    pub fn backward(&mut self, tape: &Tape, dlogits: &[f64]) -> Result<InputGradients> {
        let n = tape.items.len();
        if dlogits.len() != n {
            return Err(Error::Dimension(format!(
                "{} upstream gradients for a tape of {n} points",
                dlogits.len()
            )));
        }
        let h = self.config.hidden;
        let act = self.config.activation;
        let resnet = self.config.resnet;
        let mut dcond = vec![0.0; tape.conditions.len()];

        let dh = self.fc_out.backward(&tape.h_last, dlogits, n, true).unwrap();
        let mut dx: Vec<f64> = dh
            .iter()
            .zip(&tape.x_last)
            .map(|(d, &x)| d * act.d1(x))
            .collect();

        for (block, rec) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            let dz1 = dx;
            let dr1 = block.fc1.backward(&rec.r1, &dz1, n, true).unwrap();
            let da1: Vec<f64> = dr1.iter().zip(&rec.a1).map(|(d, &a)| d * act.d1(a)).collect();
            let dz0 = match (&mut block.cbn1, &rec.norm1) {
                (Some(c), Some(r)) => Self::normalize_backward(c, r, &da1, tape, h, &mut dcond),
                _ => da1,
            };
            let dr0 = block.fc0.backward(&rec.r0, &dz0, n, true).unwrap();
            let da0: Vec<f64> = dr0.iter().zip(&rec.a0).map(|(d, &a)| d * act.d1(a)).collect();
            let mut dblock = match (&mut block.cbn0, &rec.norm0) {
                (Some(c), Some(r)) => Self::normalize_backward(c, r, &da0, tape, h, &mut dcond),
                _ => da0,
            };
            if resnet {
                for (d, s) in dblock.iter_mut().zip(&dz1) {
                    *d += s;
                }
            }
            dx = dblock;
        }

        if let Some(fc) = &mut self.fc_cond {
            let mut dproj = vec![0.0; tape.n_items * h];
            for (p, &item) in tape.items.iter().enumerate() {
                for j in 0..h {
                    dproj[item * h + j] += dx[p * h + j];
                }
            }
            let c = fc.inputs();
            fc.backward(&tape.conditions, &dproj, tape.n_items, false);
            matmul_bt(&dproj, &fc.weight.data, &mut dcond, tape.n_items, h, c, true);
        }
        let dp = self.fc_in.backward(&tape.inputs, &dx, n, true).unwrap();
        Ok(InputGradients {
            points: dp.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
            conditions: dcond,
        })
    }

    /// Eval-mode logits, their spatial gradients and, when `dirs` is given,
    /// the Hessian of each logit applied to the matching direction
    /// (forward-mode tangents pushed through the reverse pass).
    pub fn logit_derivatives(
        &self,
        points: &[Point3],
        condition: &[f64],
        dirs: Option<&[Vec3]>,
    ) -> Result<(Vec<f64>, Vec<Vec3>, Option<Vec<Vec3>>)> {
        let c = self.config.condition_dim;
        if condition.len() != c {
            return Err(Error::Dimension(format!("condition has length {}, expected {c}", condition.len())));
        }
        if let Some(d) = dirs {
            if d.len() != points.len() {
                return Err(Error::Dimension("one direction per point is required".into()));
            }
        }
        let n = points.len();
        if n == 0 {
            return Ok((Vec::new(), Vec::new(), dirs.map(|_| Vec::new())));
        }
        let h = self.config.hidden;
        let act = self.config.activation;
        let tangent = dirs.is_some();

        // Eval-mode normalization is a per-channel affine map.
        let affine = |cbn: &Option<Cbn>| -> Option<(Vec<f64>, Vec<f64>)> {
            cbn.as_ref().map(|cb| {
                let g = cb.gamma.forward(condition, 1);
                let b = cb.beta.forward(condition, 1);
                let mut scale = vec![0.0; h];
                let mut shift = vec![0.0; h];
                for j in 0..h {
                    let s = 1.0 / (cb.running_var[j] + BN_EPS).sqrt();
                    scale[j] = g[j] * s;
                    shift[j] = b[j] - g[j] * s * cb.running_mean[j];
                }
                (scale, shift)
            })
        };
        let apply_affine = |x: &[f64], a: &Option<(Vec<f64>, Vec<f64>)>| -> Vec<f64> {
            match a {
                Some((s, t)) => x
                    .chunks_exact(h)
                    .flat_map(|row| (0..h).map(move |j| row[j] * s[j] + t[j]))
                    .collect(),
                None => x.to_vec(),
            }
        };
        let scale_only = |x: &[f64], a: &Option<(Vec<f64>, Vec<f64>)>| -> Vec<f64> {
            match a {
                Some((s, _)) => x
                    .chunks_exact(h)
                    .flat_map(|row| (0..h).map(move |j| row[j] * s[j]))
                    .collect(),
                None => x.to_vec(),
            }
        };

        let inputs: Vec<f64> = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let mut x = self.fc_in.forward(&inputs, n);
        if let Some(fc) = &self.fc_cond {
            let proj = fc.forward(condition, 1);
            for row in x.chunks_exact_mut(h) {
                for j in 0..h {
                    row[j] += proj[j];
                }
            }
        }
        let mut xt = if let Some(d) = dirs {
            let flat: Vec<f64> = d.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
            let mut t = vec![0.0; n * h];
            matmul(&flat, &self.fc_in.weight.data, &mut t, n, 3, h, false);
            t
        } else {
            Vec::new()
        };

        struct Rec {
            aff0: Option<(Vec<f64>, Vec<f64>)>,
            aff1: Option<(Vec<f64>, Vec<f64>)>,
            a0: Vec<f64>,
            a1: Vec<f64>,
            a0t: Vec<f64>,
            a1t: Vec<f64>,
        }
        let mut recs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let aff0 = affine(&block.cbn0);
            let aff1 = affine(&block.cbn1);
            let a0 = apply_affine(&x, &aff0);
            let r0 = apply(act, &a0);
            let z0 = block.fc0.forward(&r0, n);
            let a1 = apply_affine(&z0, &aff1);
            let r1 = apply(act, &a1);
            let mut z1 = block.fc1.forward(&r1, n);
            let (mut a0t, mut a1t) = (Vec::new(), Vec::new());
            if tangent {
                a0t = scale_only(&xt, &aff0);
                let r0t: Vec<f64> = a0t.iter().zip(&a0).map(|(t, &a)| t * act.d1(a)).collect();
                let mut z0t = vec![0.0; n * h];
                matmul(&r0t, &block.fc0.weight.data, &mut z0t, n, h, h, false);
                a1t = scale_only(&z0t, &aff1);
                let r1t: Vec<f64> = a1t.iter().zip(&a1).map(|(t, &a)| t * act.d1(a)).collect();
                let mut z1t = vec![0.0; n * h];
                matmul(&r1t, &block.fc1.weight.data, &mut z1t, n, h, h, false);
                if self.config.resnet {
                    for (z, v) in z1t.iter_mut().zip(&xt) {
                        *z += v;
                    }
                }
                xt = z1t;
            }
            if self.config.resnet {
                for (z, v) in z1.iter_mut().zip(&x) {
                    *z += v;
                }
            }
            x = z1;
            recs.push(Rec {
                aff0,
                aff1,
                a0,
                a1,
                a0t,
                a1t,
            });
        }
        let h_last = apply(act, &x);
        let logits = self.fc_out.forward(&h_last, n);

        // Reverse pass with unit upstream gradient, carrying tangents.
        let w_out = &self.fc_out.weight.data;
        let mut dx = vec![0.0; n * h];
        let mut dxt = vec![0.0; if tangent { n * h } else { 0 }];
        for p in 0..n {
            for j in 0..h {
                let k = p * h + j;
                dx[k] = w_out[j] * act.d1(x[k]);
                if tangent {
                    dxt[k] = w_out[j] * act.d2(x[k]) * xt[k];
                }
            }
        }
        for (block, rec) in self.blocks.iter().zip(&recs).rev() {
            let dz1 = dx;
            let dz1t = dxt;
            let dr1 = block.fc1.input_grad(&dz1, n);
            let da1: Vec<f64> = dr1.iter().zip(&rec.a1).map(|(d, &a)| d * act.d1(a)).collect();
            let dz0 = scale_only(&da1, &rec.aff1);
            let dr0 = block.fc0.input_grad(&dz0, n);
            let da0: Vec<f64> = dr0.iter().zip(&rec.a0).map(|(d, &a)| d * act.d1(a)).collect();
            let mut dnext = scale_only(&da0, &rec.aff0);
            let mut dnext_t = Vec::new();
            if tangent {
                let dr1t = block.fc1.input_grad(&dz1t, n);
                let da1t: Vec<f64> = (0..n * h)
                    .map(|k| act.d2(rec.a1[k]) * rec.a1t[k] * dr1[k] + act.d1(rec.a1[k]) * dr1t[k])
                    .collect();
                let dz0t = scale_only(&da1t, &rec.aff1);
                let dr0t = block.fc0.input_grad(&dz0t, n);
                let da0t: Vec<f64> = (0..n * h)
                    .map(|k| act.d2(rec.a0[k]) * rec.a0t[k] * dr0[k] + act.d1(rec.a0[k]) * dr0t[k])
                    .collect();
                dnext_t = scale_only(&da0t, &rec.aff0);
            }
            if self.config.resnet {
                for (d, s) in dnext.iter_mut().zip(&dz1) {
                    *d += s;
                }
                if tangent {
                    for (d, s) in dnext_t.iter_mut().zip(&dz1t) {
                        *d += s;
                    }
                }
            }
            dx = dnext;
            dxt = dnext_t;
        }
        let to_vec3 = |flat: Vec<f64>| -> Vec<Vec3> { flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect() };
        let grads = to_vec3(self.fc_in.input_grad(&dx, n));
        let hv = tangent.then(|| to_vec3(self.fc_in.input_grad(&dxt, n)));
        Ok((logits, grads, hv))
    }

    /// Gradient of the occupancy probability with respect to the point.
    pub fn spatial_gradient(&self, p: &Point3, condition: &[f64]) -> Result<Vec3> {
        let (s, g, _) = self.logit_derivatives(std::slice::from_ref(p), condition, None)?;
        let f = sigmoid(s[0]);
        Ok(g[0] * (f * (1.0 - f)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_decoder(config: DecoderConfig, seed: u64) -> DecoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = DecoderParams::new(config, &mut rng).unwrap();
        // Move every parameter off its initial value so zero heads and unit
        // gains do not hide gradient paths.
        for t in d.tensors_mut() {
            for v in t.data.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        for b in &mut d.blocks {
            for n in [&mut b.cbn0, &mut b.cbn1].into_iter().flatten() {
                for j in 0..n.running_mean.len() {
                    n.running_mean[j] = rng.random_range(-0.2..0.2);
                    n.running_var[j] = rng.random_range(0.5..1.5);
                }
            }
        }
        d
    }

    fn small(resnet: bool, cbn: bool, activation: Activation) -> DecoderConfig {
        DecoderConfig {
            hidden: 8,
            condition_dim: 4,
            blocks: 5,
            resnet,
            cbn,
            activation,
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().chain(a).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    /// Scalarized loss sum(w_i * logit_i) and its gradients.
    fn check_gradients(config: DecoderConfig, mode: Mode, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut dec = random_decoder(config, seed);
        let points: Vec<Point3> = (0..4)
            .map(|_| Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let conds: Vec<f64> = (0..2 * config.condition_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let counts = [2, 2];
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |d: &DecoderParams, pts: &[Point3], cs: &[f64]| -> f64 {
            let l = d.forward(&DecoderBatch::new(pts, cs, &counts), mode).unwrap();
            l.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = dec.forward_tape(&DecoderBatch::new(&points, &conds, &counts), mode).unwrap();
        dec.zero_grad();
        let ig = dec.backward(&tape, &w).unwrap();
        let eps = 1e-5;

        // Parameters. Entries that vanish exactly (biases feeding a batch
        // normalization) are compared against the largest gradient.
        let n_tensors = dec.tensors().len();
        let mut pairs = Vec::new();
        for ti in 0..n_tensors {
            let len = dec.tensors()[ti].data.len();
            for k in 0..len {
                let analytic = dec.tensors()[ti].grad[k];
                let orig = dec.tensors()[ti].data[k];
                dec.tensors_mut()[ti].data[k] = orig + eps;
                let plus = loss(&dec, &points, &conds);
                dec.tensors_mut()[ti].data[k] = orig - eps;
                let minus = loss(&dec, &points, &conds);
                dec.tensors_mut()[ti].data[k] = orig;
                pairs.push((ti, analytic, (plus - minus) / (2.0 * eps)));
            }
        }
        let global = pairs.iter().fold(0.0f64, |m, p| m.max(p.1.abs()).max(p.2.abs()));
        for &(ti, a, n) in &pairs {
            let e = (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * global);
            assert!(e < 1e-4, "tensor {ti} ({mode:?}, {config:?}): {a} vs {n}");
        }
        // Points.
        let mut numeric = Vec::new();
        for i in 0..points.len() {
            for c in 0..3 {
                let mut p = points.clone();
                p[i][c] += eps;
                let plus = loss(&dec, &p, &conds);
                p[i][c] -= 2.0 * eps;
                let minus = loss(&dec, &p, &conds);
                numeric.push((plus - minus) / (2.0 * eps));
            }
        }
        let analytic: Vec<f64> = ig.points.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        assert!(rel_err(&analytic, &numeric) < 1e-4, "points");
        // Conditions.
        let mut numeric = Vec::new();
        for k in 0..conds.len() {
            let mut c = conds.clone();
            c[k] += eps;
            let plus = loss(&dec, &points, &c);
            c[k] -= 2.0 * eps;
            let minus = loss(&dec, &points, &c);
            numeric.push((plus - minus) / (2.0 * eps));
        }
        assert!(rel_err(&ig.conditions, &numeric) < 1e-4, "conditions");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            for act in [Activation::Relu, Activation::Softplus] {
                for mode in [Mode::Train, Mode::Eval] {
                    check_gradients(small(true, true, act), mode, seed);
                }
            }
        }
    }

    #[test]
    fn ablation_variants_pass_the_same_checks() {
        for seed in 0..3 {
            for (resnet, cbn) in [(false, true), (true, false), (false, false)] {
                for mode in [Mode::Train, Mode::Eval] {
                    check_gradients(small(resnet, cbn, Activation::Softplus), mode, seed);
                }
            }
        }
    }

    #[test]
    fn zero_head_gives_probability_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = DecoderParams::new(small(true, true, Activation::Relu), &mut rng).unwrap();
        let pts = [Point3::new(0.1, 0.2, 0.3), Point3::new(-1.0, 4.0, 0.0)];
        let logits = d.forward_points(&pts, &[0.5; 4]).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        assert_eq!(d.spatial_gradient(&pts[0], &[0.5; 4]).unwrap(), Vec3::zeros());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut d = random_decoder(small(true, true, Activation::Relu), 3);
        let pts = [Point3::new(0.1, 0.2, 0.3), Point3::new(-0.3, 0.1, 0.0)];
        let conds = [0.1; 4];
        let (_, tape) = d.forward_tape(&DecoderBatch::new(&pts, &conds, &[2]), Mode::Train).unwrap();
        d.zero_grad();
        let ig = d.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(ig.points.iter().all(|v| *v == Vec3::zeros()));
        assert!(ig.conditions.iter().all(|v| *v == 0.0));
        assert!(d.tensors().iter().all(|t| t.grad.iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn eval_mode_is_pointwise() {
        let d = random_decoder(small(true, true, Activation::Relu), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point3> = (0..10)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let cond = [0.3, -0.2, 0.1, 0.9];
        let all = d.forward_points(&pts, &cond).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        let mut back = d.forward_points(&rev, &cond).unwrap();
        back.reverse();
        for (a, b) in all.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(all, d.forward_points(&pts, &cond).unwrap());
        let single = d.forward_points(&pts[3..4], &cond).unwrap();
        assert!((single[0] - all[3]).abs() < 1e-12);
    }

    #[test]
    fn unit_normalization_is_identity() {
        let cbn = Cbn::new(4, 8);
        let d = DecoderParams::new(small(true, true, Activation::Relu), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.37 - 2.0).collect();
        let (a, _) = d.normalize(&cbn, &x, &[0, 0], &[0.7, -0.1, 0.2, 0.5], 1, Mode::Eval);
        for (u, v) in a.iter().zip(&x) {
            assert!((u - v / (1.0 + BN_EPS).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_gradient_and_hessian_match_finite_differences() {
        for seed in 0..3 {
            for (resnet, cbn) in [(true, true), (false, false)] {
                let d = random_decoder(small(resnet, cbn, Activation::Softplus), seed);
                let cond = [0.3, -0.2, 0.1, 0.9];
                let p = Point3::new(0.1, -0.2, 0.25);
                let v = Vec3::new(0.3, -0.7, 0.2);
                let (_, g, hv) = d.logit_derivatives(&[p], &cond, Some(&[v])).unwrap();
                let eps = 1e-5;
                let f = |q: Point3| d.forward_points(&[q], &cond).unwrap()[0];
                let mut fd = Vec3::zeros();
                for c in 0..3 {
                    let mut e = Vec3::zeros();
                    e[c] = eps;
                    fd[c] = (f(p + e) - f(p - e)) / (2.0 * eps);
                }
                assert!(rel_err(g[0].as_slice(), fd.as_slice()) < 1e-4);
                let grad = |q: Point3| d.logit_derivatives(&[q], &cond, None).unwrap().1[0];
                let gp = grad(p + v * eps);
                let gm = grad(p - v * eps);
                let fd_hv = (gp - gm) / (2.0 * eps);
                let hv = hv.unwrap()[0];
                assert!(rel_err(hv.as_slice(), fd_hv.as_slice()) < 1e-4, "{hv:?} {fd_hv:?}");
            }
        }
    }

    #[test]
    fn spatial_gradient_matches_backward() {
        let mut d = random_decoder(small(true, true, Activation::Relu), 5);
        let pts = [Point3::new(0.1, 0.2, 0.3), Point3::new(-0.3, 0.1, 0.0)];
        let cond = [0.1, 0.2, 0.3, 0.4];
        let (_, g, _) = d.logit_derivatives(&pts, &cond, None).unwrap();
        let (_, tape) = d.forward_tape(&DecoderBatch::new(&pts, &cond, &[2]), Mode::Eval).unwrap();
        let ig = d.backward(&tape, &[1.0, 1.0]).unwrap();
        for (a, b) in g.iter().zip(&ig.points) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn gradients_are_finite_everywhere() {
        let d = random_decoder(small(true, true, Activation::Relu), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Point3> = (0..1000)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let (_, g, _) = d.logit_derivatives(&pts, &[0.0; 4], None).unwrap();
        assert!(g.iter().all(|v| v.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn batch_errors() {
        let d = random_decoder(small(true, true, Activation::Relu), 7);
        let pts = [Point3::zeros()];
        assert!(d.forward(&DecoderBatch::new(&pts, &[0.0; 3], &[1]), Mode::Eval).is_err());
        assert!(d.forward(&DecoderBatch::new(&pts, &[0.0; 4], &[2]), Mode::Eval).is_err());
        assert!(d.forward(&DecoderBatch::new(&pts, &[0.0; 4], &[1]), Mode::Train).is_err());
        assert!(d.forward(&DecoderBatch::new(&pts, &[0.0; 4], &[1]), Mode::Eval).is_ok());
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut d = random_decoder(small(true, true, Activation::Relu), 8);
        let before = d.blocks[0].cbn0.as_ref().unwrap().running_mean[0];
        let pts = [Point3::new(0.1, 0.2, 0.3), Point3::new(-0.3, 0.1, 0.0)];
        let (_, tape) = d.forward_tape(&DecoderBatch::new(&pts, &[0.0; 4], &[2]), Mode::Train).unwrap();
        let batch_mean = tape.blocks[0].norm0.as_ref().unwrap().mean[0];
        d.update_running_stats(&tape);
        let after = d.blocks[0].cbn0.as_ref().unwrap().running_mean[0];
        assert!((after - (0.9 * before + 0.1 * batch_mean)).abs() < 1e-15);
    }
}
