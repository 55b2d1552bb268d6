use std::sync::Arc;

use rayon::prelude::*;

use super::decoder::{sigmoid, DecoderParams};
use crate::error::{Error, Result};
use crate::fields::OccupancyField;
use crate::geometry::{BoundingBox, Point3, Vec3};

const CHUNK: usize = 2048;

/// A decoder with a fixed condition, seen as an occupancy field.
#[derive(Debug, Clone)]
pub struct DecoderField {
    params: Arc<DecoderParams>,
    condition: Vec<f64>,
    bbox: BoundingBox,
}

impl DecoderField {
    pub fn new(params: Arc<DecoderParams>, condition: Vec<f64>, bbox: BoundingBox) -> Result<Self> {
        if condition.len() != params.condition_dim() {
            return Err(Error::Dimension(format!(
                "condition has length {}, decoder expects {}",
                condition.len(),
                params.condition_dim()
            )));
        }
        if condition.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("condition vector is not finite".into()));
        }
        Ok(DecoderField {
            params,
            condition,
            bbox,
        })
    }

    pub fn params(&self) -> &DecoderParams {
        &self.params
    }

    pub fn condition(&self) -> &[f64] {
        &self.condition
    }

    fn derivatives(&self, points: &[Point3], dirs: Option<&[Vec3]>) -> (Vec<f64>, Vec<Vec3>, Option<Vec<Vec3>>) {
        let chunks: Vec<_> = points
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(i, chunk)| {
                let d = dirs.map(|d| &d[i * CHUNK..i * CHUNK + chunk.len()]);
                self.params
                    .logit_derivatives(chunk, &self.condition, d)
                    .expect("condition length checked at construction")
            })
            .collect();
        let mut s = Vec::with_capacity(points.len());
        let mut g = Vec::with_capacity(points.len());
        let mut h = dirs.map(|_| Vec::with_capacity(points.len()));
        for (cs, cg, ch) in chunks {
            s.extend(cs);
            g.extend(cg);
            if let (Some(h), Some(ch)) = (&mut h, ch) {
                h.extend(ch);
            }
        }
        (s, g, h)
    }
}

impl OccupancyField for DecoderField {
    fn eval(&self, p: &Point3) -> f64 {
        if !self.bbox.contains(p) {
            return 0.0;
        }
        let logits = self
            .params
            .forward_points(std::slice::from_ref(p), &self.condition)
            .expect("condition length checked at construction");
        sigmoid(logits[0])
    }

    fn grad(&self, p: &Point3) -> Vec3 {
        if !self.bbox.contains(p) {
            return Vec3::zeros();
        }
        self.params
            .spatial_gradient(p, &self.condition)
            .expect("condition length checked at construction")
    }

    fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    fn eval_batch(&self, points: &[Point3]) -> Vec<f64> {
        let chunks: Vec<Vec<f64>> = points
            .par_chunks(CHUNK)
            .map(|chunk| {
                self.params
                    .forward_points(chunk, &self.condition)
                    .expect("condition length checked at construction")
            })
            .collect();
        chunks
            .into_iter()
            .flatten()
            .zip(points)
            .map(|(s, p)| if self.bbox.contains(p) { sigmoid(s) } else { 0.0 })
            .collect()
    }

    fn eval_grad_batch(&self, points: &[Point3]) -> (Vec<f64>, Vec<Vec3>) {
        let (s, g, _) = self.derivatives(points, None);
        s.iter()
            .zip(g)
            .zip(points)
            .map(|((&s, g), p)| {
                if !self.bbox.contains(p) {
                    return (0.0, Vec3::zeros());
                }
                let f = sigmoid(s);
                (f, g * (f * (1.0 - f)))
            })
            .unzip()
    }

    fn hessian_vector(&self, p: &Point3, v: &Vec3) -> Vec3 {
        self.hessian_vector_batch(std::slice::from_ref(p), std::slice::from_ref(v))[0]
    }

    /// Exact second derivatives: with `f = sigmoid(s)`,
    /// `H_f v = f''(s) (grad s . v) grad s + f'(s) H_s v`.
    fn hessian_vector_batch(&self, points: &[Point3], dirs: &[Vec3]) -> Vec<Vec3> {
        let (s, g, hv) = self.derivatives(points, Some(dirs));
        let hv = hv.unwrap();
        (0..points.len())
            .map(|i| {
                if !self.bbox.contains(&points[i]) {
                    return Vec3::zeros();
                }
                let f = sigmoid(s[i]);
                let d1 = f * (1.0 - f);
                let d2 = d1 * (1.0 - 2.0 * f);
                g[i] * (d2 * g[i].dot(&dirs[i])) + hv[i] * d1
            })
            .collect()
    }
}
