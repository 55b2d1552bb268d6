//! Mesh post-processing: quadric simplification and refinement of vertex
//! positions against the field they were extracted from.

mod qem;

pub use qem::simplify_qem;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::OccupancyField;
use crate::geometry::{Point3, TriangleMesh, Vec3};

pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_SAMPLES_PER_FACE: usize = 5;
const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Weight of the normal alignment term.
    pub lambda: f64,
    pub samples_per_face: usize,
    pub steps: usize,
    /// Initial step length, relative to the Gauss-Newton step.
    pub step_size: f64,
    /// Simplify to at most this many faces before refining.
    pub simplify_to: Option<usize>,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lambda: DEFAULT_LAMBDA,
            samples_per_face: DEFAULT_SAMPLES_PER_FACE,
            steps: 30,
            step_size: 1.0,
            simplify_to: None,
            seed: 0,
        }
    }
}

impl RefineConfig {
    /// Extraction only: no simplification and no refinement.
    pub fn none() -> Self {
        RefineConfig {
            steps: 0,
            ..RefineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.samples_per_face == 0 {
            return Err(Error::InvalidArgument("samples per face must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {}", self.step_size)));
        }
        if let Some(t) = self.simplify_to {
            if t < 4 {
                return Err(Error::InvalidArgument(format!("simplification target must be >= 4, got {t}")));
            }
        }
        Ok(())
    }
}

/// One descent step of [`refine`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub loss_before: f64,
    pub loss_after: f64,
    pub halvings: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct RefineReport {
    pub mesh: TriangleMesh,
    pub steps: Vec<RefineStep>,
}

/// Barycentric sample points, `per_face` consecutive entries per face.
#[derive(Debug, Clone)]
struct Samples {
    per_face: usize,
    bary: Vec<[f64; 3]>,
}

impl Samples {
    fn draw(faces: usize, per_face: usize, seed: u64) -> Samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bary = (0..faces * per_face)
            .map(|_| {
                let s = rng.random::<f64>().sqrt();
                let t = rng.random::<f64>();
                [1.0 - s, s * (1.0 - t), s * t]
            })
            .collect();
        Samples { per_face, bary }
    }

    fn face(&self, k: usize) -> usize {
        k / self.per_face
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Evaluation {
    loss: f64,
    points: Vec<Point3>,
    values: Vec<f64>,
    grads: Vec<Vec3>,
    /// Unnormalized face normals (edge cross products).
    cross: Vec<Vec3>,
}

fn sample_points(vertices: &[Point3], faces: &[[usize; 3]], samples: &Samples) -> Vec<Point3> {
    samples
        .bary
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let f = faces[samples.face(k)];
            vertices[f[0]] * b[0] + vertices[f[1]] * b[1] + vertices[f[2]] * b[2]
        })
        .collect()
}

fn face_crosses(vertices: &[Point3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    faces
        .iter()
        .map(|f| (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]])))
        .collect()
}

/// Outward unit direction of the field (occupancy decreases outward).
fn outward(g: &Vec3) -> Option<Vec3> {
    let n = g.norm();
    (n > 1e-12 && n.is_finite()).then(|| -g / n)
}

fn unit(c: &Vec3) -> Option<Vec3> {
    let n = c.norm();
    (n > 1e-300).then(|| c / n)
}

fn evaluate<F: OccupancyField + ?Sized>(
    field: &F,
    vertices: &[Point3],
    faces: &[[usize; 3]],
    samples: &Samples,
    tau: f64,
    lambda: f64,
) -> Evaluation {
    let points = sample_points(vertices, faces, samples);
    let (values, grads) = field.eval_grad_batch(&points);
    let cross = face_crosses(vertices, faces);
    let mut loss = 0.0;
    for k in 0..points.len() {
        let r = values[k] - tau;
        loss += r * r;
        if lambda > 0.0 {
            if let (Some(u), Some(n)) = (outward(&grads[k]), unit(&cross[samples.face(k)])) {
                loss += lambda * (u - n).norm_squared();
            }
        }
    }
    Evaluation {
        loss,
        points,
        values,
        grads,
        cross,
    }
}

/// Gradient of the objective with respect to every vertex, plus the
/// Gauss-Newton diagonal of the data term.
fn vertex_gradient<F: OccupancyField + ?Sized>(
    field: &F,
    vertices: &[Point3],
    faces: &[[usize; 3]],
    samples: &Samples,
    ev: &Evaluation,
    tau: f64,
    lambda: f64,
) -> (Vec<Vec3>, Vec<f64>) {
    let m = ev.points.len();
    let mut dirs = vec![Vec3::zeros(); m];
    // Gradient with respect to each face's unit normal.
    let mut dn = vec![Vec3::zeros(); faces.len()];
    if lambda > 0.0 {
        for k in 0..m {
            let face = samples.face(k);
            if let (Some(u), Some(n)) = (outward(&ev.grads[k]), unit(&ev.cross[face])) {
                let diff = u - n;
                let proj = diff - u * u.dot(&diff);
                dirs[k] = proj * (-2.0 * lambda / ev.grads[k].norm());
                dn[face] -= diff * (2.0 * lambda);
            }
        }
    }
    // The Hessian is symmetric, so H (I - u u^T) (u - n) is one
    // Hessian-vector product per sample.
    let hv = if lambda > 0.0 {
        field.hessian_vector_batch(&ev.points, &dirs)
    } else {
        vec![Vec3::zeros(); m]
    };

    let mut grad = vec![Vec3::zeros(); vertices.len()];
    let mut diag = vec![0.0; vertices.len()];
    for k in 0..m {
        let f = faces[samples.face(k)];
        let dp = ev.grads[k] * (2.0 * (ev.values[k] - tau)) + hv[k];
        let g2 = ev.grads[k].norm_squared();
        for (c, &w) in samples.bary[k].iter().enumerate() {
            grad[f[c]] += dp * w;
            diag[f[c]] += 2.0 * w * w * g2;
        }
    }
    for (face, f) in faces.iter().enumerate() {
        let norm = ev.cross[face].norm();
        if dn[face] == Vec3::zeros() || norm <= 1e-300 {
            continue;
        }
        let n = ev.cross[face] / norm;
        let w = (dn[face] - n * n.dot(&dn[face])) / norm;
        let e1 = vertices[f[1]] - vertices[f[0]];
        let e2 = vertices[f[2]] - vertices[f[0]];
        let gb = e2.cross(&w);
        let gc = w.cross(&e1);
        grad[f[1]] += gb;
        grad[f[2]] += gc;
        grad[f[0]] -= gb + gc;
    }
    (grad, diag)
}

/// Moves vertices to reduce
/// `sum_k (f(p_k) - tau)^2 + lambda * |-grad f / |grad f| - n(p_k)|^2`
/// over random points `p_k` on the faces. Every accepted step leaves the
/// objective (on that step's samples) no larger than before.
pub fn refine<F: OccupancyField + ?Sized>(
    mesh: &TriangleMesh,
    field: &F,
    tau: f64,
    cfg: &RefineConfig,
) -> Result<RefineReport> {
    cfg.validate()?;
    mesh.validate()?;
    let mut vertices = mesh.vertices.clone();
    let faces = &mesh.faces;
    let mut history = Vec::with_capacity(cfg.steps);
    if faces.is_empty() {
        return Ok(RefineReport {
            mesh: mesh.clone(),
            steps: history,
        });
    }

    for step in 0..cfg.steps {
        let samples = Samples::draw(faces.len(), cfg.samples_per_face, step_seed(cfg.seed, step));
        let ev = evaluate(field, &vertices, faces, &samples, tau, cfg.lambda);
        if ev.loss == 0.0 {
            break;
        }
        let (grad, diag) = vertex_gradient(field, &vertices, faces, &samples, &ev, tau, cfg.lambda);
        let mean_diag = diag.iter().sum::<f64>() / diag.len() as f64;
        let damping = 1e-3 * mean_diag + 1e-12;
        let direction: Vec<Vec3> = grad
            .iter()
            .zip(&diag)
            .map(|(g, d)| -g / (d + damping))
            .collect();

        let mut scale = cfg.step_size;
        let mut record = RefineStep {
            loss_before: ev.loss,
            loss_after: ev.loss,
            halvings: 0,
            accepted: false,
        };
        for halvings in 0..=MAX_HALVINGS {
            let trial: Vec<Point3> = vertices
                .iter()
                .zip(&direction)
                .map(|(v, d)| v + d * scale)
                .collect();
            let loss = evaluate(field, &trial, faces, &samples, tau, cfg.lambda).loss;
            if loss <= ev.loss {
                vertices = trial;
                record = RefineStep {
                    loss_before: ev.loss,
                    loss_after: loss,
                    halvings,
                    accepted: true,
                };
                break;
            }
            scale *= 0.5;
        }
        log::debug!(
            "refine step {step}: {:.6e} -> {:.6e} ({} halvings)",
            record.loss_before,
            record.loss_after,
            record.halvings
        );
        history.push(record);
    }

    let mut out = TriangleMesh::new(vertices, faces.clone())?;
    out.normals = None;
    Ok(RefineReport {
        mesh: out,
        steps: history,
    })
}

/// Value of the refinement objective for `mesh` on the samples drawn for
/// step `step` of `cfg`.
pub fn refine_objective<F: OccupancyField + ?Sized>(
    mesh: &TriangleMesh,
    field: &F,
    tau: f64,
    cfg: &RefineConfig,
    step: usize,
) -> f64 {
    let samples = Samples::draw(mesh.faces.len(), cfg.samples_per_face, step_seed(cfg.seed, step));
    evaluate(field, &mesh.vertices, &mesh.faces, &samples, tau, cfg.lambda).loss
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub analytic: Vec<[f64; 3]>,
    pub numeric: Vec<[f64; 3]>,
    /// `max |analytic - numeric| / max |numeric|` over all coordinates.
    pub max_rel_err: f64,
}

impl GradientCheckReport {
    pub fn is_empty(&self) -> bool {
        self.analytic.is_empty()
    }
}

/// Compares the analytic vertex gradient of the refinement objective with
/// central differences on the samples of the first step.
pub fn refine_gradient_check<F: OccupancyField + ?Sized>(
    mesh: &TriangleMesh,
    field: &F,
    tau: f64,
    cfg: &RefineConfig,
) -> Result<GradientCheckReport> {
    cfg.validate()?;
    mesh.validate()?;
    if cfg.steps == 0 {
        return Ok(GradientCheckReport {
            analytic: Vec::new(),
            numeric: Vec::new(),
            max_rel_err: 0.0,
        });
    }
    if mesh.vertices.len() > 100 {
        return Err(Error::InvalidArgument(format!(
            "gradient check is limited to 100 vertices, mesh has {}",
            mesh.vertices.len()
        )));
    }
    let samples = Samples::draw(mesh.faces.len(), cfg.samples_per_face, step_seed(cfg.seed, 0));
    let ev = evaluate(field, &mesh.vertices, &mesh.faces, &samples, tau, cfg.lambda);
    let (analytic, _) = vertex_gradient(field, &mesh.vertices, &mesh.faces, &samples, &ev, tau, cfg.lambda);

    let h = 1e-6;
    let mut vertices = mesh.vertices.clone();
    let mut numeric = vec![Vec3::zeros(); vertices.len()];
    for i in 0..vertices.len() {
        for c in 0..3 {
            let orig = vertices[i][c];
            vertices[i][c] = orig + h;
            let plus = evaluate(field, &vertices, &mesh.faces, &samples, tau, cfg.lambda).loss;
            vertices[i][c] = orig - h;
            let minus = evaluate(field, &vertices, &mesh.faces, &samples, tau, cfg.lambda).loss;
            vertices[i][c] = orig;
            numeric[i][c] = (plus - minus) / (2.0 * h);
        }
    }
    let scale = numeric.iter().map(|v| v.amax()).fold(0.0, f64::max).max(1e-12);
    let max_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).amax())
        .fold(0.0, f64::max);
    Ok(GradientCheckReport {
        analytic: analytic.iter().map(|v| [v.x, v.y, v.z]).collect(),
        numeric: numeric.iter().map(|v| [v.x, v.y, v.z]).collect(),
        max_rel_err: max_err / scale,
    })
}
