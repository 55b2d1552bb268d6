use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::decoder::Linear;
use super::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::fields::VoxelGrid;
use crate::geometry::Point3;

/// Maps an observation to the decoder's condition vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderParams {
    /// One learned row per training shape.
    LatentTable { table: Tensor2 },
    /// Shared per-point MLP, max-pooled, then a linear head.
    PointNetLite { fc0: Linear, fc1: Linear, head: Linear },
    /// MLP over a flattened coarse occupancy grid.
    VoxelMlp { resolution: usize, fc0: Linear, head: Linear },
    /// Posterior over latent codes from labelled points.
    VariationalHead {
        fc0: Linear,
        fc1: Linear,
        mu: Linear,
        log_sigma: Linear,
    },
}

#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a> {
    ShapeId(usize),
    Points(&'a [Point3]),
    Voxels(&'a VoxelGrid),
    Labeled {
        points: &'a [Point3],
        occupancies: &'a [f64],
    },
}

impl EncoderInput<'_> {
    fn kind(&self) -> &'static str {
        match self {
            EncoderInput::ShapeId(_) => "shape id",
            EncoderInput::Points(_) => "point set",
            EncoderInput::Voxels(_) => "voxel grid",
            EncoderInput::Labeled { .. } => "labelled points",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    Condition(Vec<f64>),
    Gaussian { mu: Vec<f64>, log_sigma: Vec<f64> },
}

impl Encoding {
    /// The condition vector, or the posterior mean.
    pub fn mean(&self) -> &[f64] {
        match self {
            Encoding::Condition(c) => c,
            Encoding::Gaussian { mu, .. } => mu,
        }
    }
}

/// Intermediates of one `encode_tape` call.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    inner: TapeKind,
}

#[derive(Debug, Clone)]
enum TapeKind {
    Row(usize),
    Pooled {
        inputs: Vec<f64>,
        a0: Vec<f64>,
        r0: Vec<f64>,
        argmax: Vec<usize>,
        pooled: Vec<f64>,
        rows: usize,
    },
    Voxel {
        inputs: Vec<f64>,
        a0: Vec<f64>,
        r0: Vec<f64>,
    },
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn relu_back(d: &[f64], pre: &[f64]) -> Vec<f64> {
    d.iter().zip(pre).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect()
}

/// Per-point MLP followed by a channelwise max; ties pick the first point.
fn pooled_features(fc0: &Linear, fc1: &Linear, inputs: Vec<f64>, rows: usize) -> TapeKind {
    let h = fc1.outputs();
    let a0 = fc0.forward(&inputs, rows);
    let r0 = relu(&a0);
    let z = fc1.forward(&r0, rows);
    let mut pooled = vec![f64::NEG_INFINITY; h];
    let mut argmax = vec![0; h];
    for (p, row) in z.chunks_exact(h).enumerate() {
        for j in 0..h {
            if row[j] > pooled[j] {
                pooled[j] = row[j];
                argmax[j] = p;
            }
        }
    }
    TapeKind::Pooled {
        inputs,
        a0,
        r0,
        argmax,
        pooled,
        rows,
    }
}

fn pooled_backward(fc0: &mut Linear, fc1: &mut Linear, tape: &TapeKind, dpooled: &[f64]) {
    let TapeKind::Pooled {
        inputs,
        a0,
        r0,
        argmax,
        rows,
        ..
    } = tape
    else {
        unreachable!()
    };
    let h = fc1.outputs();
    let mut dz = vec![0.0; rows * h];
    for j in 0..h {
        dz[argmax[j] * h + j] += dpooled[j];
    }
    let dr0 = fc1.backward(r0, &dz, *rows, true).unwrap();
    let da0 = relu_back(&dr0, a0);
    fc0.backward(inputs, &da0, *rows, false);
}

impl EncoderParams {
    pub fn latent_table<R: Rng + ?Sized>(shapes: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.1).unwrap();
        let data = (0..shapes * dim).map(|_| normal.sample(rng)).collect();
        EncoderParams::LatentTable {
            table: Tensor2::from_vec(shapes, dim, data).unwrap(),
        }
    }

    pub fn point_net<R: Rng + ?Sized>(hidden: usize, dim: usize, rng: &mut R) -> Self {
        EncoderParams::PointNetLite {
            fc0: Linear::new(3, hidden, rng),
            fc1: Linear::new(hidden, hidden, rng),
            head: Linear::new(hidden, dim, rng),
        }
    }

    pub fn voxel_mlp<R: Rng + ?Sized>(resolution: usize, hidden: usize, dim: usize, rng: &mut R) -> Self {
        EncoderParams::VoxelMlp {
            resolution,
            fc0: Linear::new(resolution.pow(3), hidden, rng),
            head: Linear::new(hidden, dim, rng),
        }
    }

    pub fn variational<R: Rng + ?Sized>(hidden: usize, latent: usize, rng: &mut R) -> Self {
        let mut log_sigma = Linear::new(hidden, latent, rng);
        // Start near the prior's unit scale.
        log_sigma.weight.data.iter_mut().for_each(|v| *v *= 0.1);
        log_sigma.bias.data.iter_mut().for_each(|v| *v = 0.0);
        EncoderParams::VariationalHead {
            fc0: Linear::new(4, hidden, rng),
            fc1: Linear::new(hidden, hidden, rng),
            mu: Linear::new(hidden, latent, rng),
            log_sigma,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EncoderParams::LatentTable { .. } => "latent_table",
            EncoderParams::PointNetLite { .. } => "point_net_lite",
            EncoderParams::VoxelMlp { .. } => "voxel_mlp",
            EncoderParams::VariationalHead { .. } => "variational_head",
        }
    }

    /// Length of the produced condition (or latent) vector.
    pub fn output_dim(&self) -> usize {
        match self {
            EncoderParams::LatentTable { table } => table.cols(),
            EncoderParams::PointNetLite { head, .. } | EncoderParams::VoxelMlp { head, .. } => head.outputs(),
            EncoderParams::VariationalHead { mu, .. } => mu.outputs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let linear = |name: &str, l: &Linear, i: Option<usize>| -> Result<()> {
            if l.bias.shape() != (1, l.outputs()) || i.is_some_and(|i| l.inputs() != i) {
                return Err(Error::Weights(format!("encoder {name}: inconsistent shape")));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Weights(format!("encoder {name}: non-finite weights")));
            }
            Ok(())
        };
        match self {
            EncoderParams::LatentTable { table } => {
                if !table.is_finite() {
                    return Err(Error::Weights("latent table: non-finite values".into()));
                }
            }
            EncoderParams::PointNetLite { fc0, fc1, head } => {
                linear("fc0", fc0, Some(3))?;
                linear("fc1", fc1, Some(fc0.outputs()))?;
                linear("head", head, Some(fc1.outputs()))?;
            }
            EncoderParams::VoxelMlp { resolution, fc0, head } => {
                linear("fc0", fc0, Some(resolution.pow(3)))?;
                linear("head", head, Some(fc0.outputs()))?;
            }
            EncoderParams::VariationalHead { fc0, fc1, mu, log_sigma } => {
                linear("fc0", fc0, Some(4))?;
                linear("fc1", fc1, Some(fc0.outputs()))?;
                linear("mu", mu, Some(fc1.outputs()))?;
                linear("log_sigma", log_sigma, Some(fc1.outputs()))?;
                if mu.outputs() != log_sigma.outputs() {
                    return Err(Error::Weights("mu and log_sigma heads differ in length".into()));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, input: EncoderInput) -> Result<Encoding> {
        self.encode_tape(input).map(|(e, _)| e)
    }

    pub fn encode_tape(&self, input: EncoderInput) -> Result<(Encoding, EncoderTape)> {
        let mismatch = || Error::KindMismatch {
            expected: self.kind().into(),
            got: input.kind().into(),
        };
        match (self, input) {
            (EncoderParams::LatentTable { table }, EncoderInput::ShapeId(id)) => {
                if id >= table.rows() {
                    return Err(Error::InvalidArgument(format!(
                        "shape id {id} out of range for {} latent rows",
                        table.rows()
                    )));
                }
                Ok((
                    Encoding::Condition(table.row(id).to_vec()),
                    EncoderTape { inner: TapeKind::Row(id) },
                ))
            }
            (EncoderParams::PointNetLite { fc0, fc1, head }, EncoderInput::Points(points)) => {
                if points.is_empty() {
                    return Err(Error::InvalidArgument("cannot encode an empty point set".into()));
                }
                let inputs = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
                let tape = pooled_features(fc0, fc1, inputs, points.len());
                let TapeKind::Pooled { pooled, .. } = &tape else { unreachable!() };
                let c = head.forward(&relu(pooled), 1);
                Ok((Encoding::Condition(c), EncoderTape { inner: tape }))
            }
            (EncoderParams::VoxelMlp { resolution, fc0, head }, EncoderInput::Voxels(grid)) => {
                if grid.resolution != [*resolution; 3] {
                    return Err(Error::Dimension(format!(
                        "encoder expects a {r}x{r}x{r} grid, got {:?}",
                        grid.resolution,
                        r = resolution
                    )));
                }
                let inputs = grid.values.clone();
                let a0 = fc0.forward(&inputs, 1);
                let r0 = relu(&a0);
                let c = head.forward(&r0, 1);
                Ok((
                    Encoding::Condition(c),
                    EncoderTape {
                        inner: TapeKind::Voxel { inputs, a0, r0 },
                    },
                ))
            }
            (
                EncoderParams::VariationalHead { fc0, fc1, mu, log_sigma },
                EncoderInput::Labeled { points, occupancies },
            ) => {
                if points.is_empty() || points.len() != occupancies.len() {
                    return Err(Error::Dimension(format!(
                        "{} points with {} occupancies",
                        points.len(),
                        occupancies.len()
                    )));
                }
                let inputs = points
                    .iter()
                    .zip(occupancies)
                    .flat_map(|(p, &o)| [p.x, p.y, p.z, o])
                    .collect();
                let tape = pooled_features(fc0, fc1, inputs, points.len());
                let TapeKind::Pooled { pooled, .. } = &tape else { unreachable!() };
                let r = relu(pooled);
                Ok((
                    Encoding::Gaussian {
                        mu: mu.forward(&r, 1),
                        log_sigma: log_sigma.forward(&r, 1),
                    },
                    EncoderTape { inner: tape },
                ))
            }
            _ => Err(mismatch()),
        }
    }

    /// Accumulates parameter gradients given the gradient of the loss with
    /// respect to the encoding (`mu` then `log_sigma` for the variational
    /// head).
    pub fn backward(&mut self, tape: &EncoderTape, upstream: &[f64]) -> Result<()> {
        let dim = self.output_dim();
        let expected = match self {
            EncoderParams::VariationalHead { .. } => 2 * dim,
            _ => dim,
        };
        if upstream.len() != expected {
            return Err(Error::Dimension(format!(
                "{} upstream values for an encoding of length {expected}",
                upstream.len()
            )));
        }
        match (self, &tape.inner) {
            (EncoderParams::LatentTable { table }, TapeKind::Row(id)) => {
                let c = table.cols();
                for (g, u) in table.grad[id * c..(id + 1) * c].iter_mut().zip(upstream) {
                    *g += u;
                }
            }
            (EncoderParams::PointNetLite { fc0, fc1, head }, t @ TapeKind::Pooled { pooled, .. }) => {
                let r = relu(pooled);
                let dr = head.backward(&r, upstream, 1, true).unwrap();
                let dp = relu_back(&dr, pooled);
                pooled_backward(fc0, fc1, t, &dp);
            }
            (EncoderParams::VoxelMlp { fc0, head, .. }, TapeKind::Voxel { inputs, a0, r0 }) => {
                let dr = head.backward(r0, upstream, 1, true).unwrap();
                let da = relu_back(&dr, a0);
                fc0.backward(inputs, &da, 1, false);
            }
            (EncoderParams::VariationalHead { fc0, fc1, mu, log_sigma }, t @ TapeKind::Pooled { pooled, .. }) => {
                let r = relu(pooled);
                let mut dr = mu.backward(&r, &upstream[..dim], 1, true).unwrap();
                let dr2 = log_sigma.backward(&r, &upstream[dim..], 1, true).unwrap();
                dr.iter_mut().zip(&dr2).for_each(|(a, b)| *a += b);
                let dp = relu_back(&dr, pooled);
                pooled_backward(fc0, fc1, t, &dp);
            }
            _ => {
                return Err(Error::InvalidArgument("tape was recorded by a different encoder".into()));
            }
        }
        Ok(())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        match self {
            EncoderParams::LatentTable { table } => vec![table],
            EncoderParams::PointNetLite { fc0, fc1, head } => {
                [fc0, fc1, head].into_iter().flat_map(|l| l.tensors_mut()).collect()
            }
            EncoderParams::VoxelMlp { fc0, head, .. } => [fc0, head].into_iter().flat_map(|l| l.tensors_mut()).collect(),
            EncoderParams::VariationalHead { fc0, fc1, mu, log_sigma } => [fc0, fc1, mu, log_sigma]
                .into_iter()
                .flat_map(|l| l.tensors_mut())
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        match self {
            EncoderParams::LatentTable { table } => vec![table],
            EncoderParams::PointNetLite { fc0, fc1, head } => {
                [fc0, fc1, head].into_iter().flat_map(|l| l.tensors()).collect()
            }
            EncoderParams::VoxelMlp { fc0, head, .. } => [fc0, head].into_iter().flat_map(|l| l.tensors()).collect(),
            EncoderParams::VariationalHead { fc0, fc1, mu, log_sigma } => {
                [fc0, fc1, mu, log_sigma].into_iter().flat_map(|l| l.tensors()).collect()
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }
}
