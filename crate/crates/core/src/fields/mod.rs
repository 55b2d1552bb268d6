//! Occupancy fields: anything that maps a point to an occupancy probability.
//!
//! Every field is immutable and `Sync`; extraction and metrics evaluate
//! fields from many threads at once.

mod analytic;
mod mesh_field;
mod voxel;

pub use analytic::{AnalyticField, Shape};
pub use mesh_field::MeshField;
pub use voxel::{voxelize, Interpolation, VoxelField, VoxelGrid};

use rayon::prelude::*;

use crate::geometry::{BoundingBox, Point3, Vec3};

/// Step used by the default finite-difference Hessian-vector product.
pub const HESSIAN_FD_STEP: f64 = 1e-5;

pub trait OccupancyField: Send + Sync {
    /// Occupancy probability in `[0, 1]`; zero outside [`bbox`](Self::bbox).
    fn eval(&self, p: &Point3) -> f64;

    /// Spatial gradient of `eval` (or a documented surrogate where `eval`
    /// is an indicator).
    fn grad(&self, p: &Point3) -> Vec3;

    /// Region outside which the field is identically zero.
    fn bbox(&self) -> BoundingBox;

    /// Evaluates many points; the output order matches the input.
    fn eval_batch(&self, points: &[Point3]) -> Vec<f64> {
        points.par_iter().map(|p| self.eval(p)).collect()
    }

    /// Hessian of `eval` applied to `v`. Defaults to central differences of
    /// [`grad`](Self::grad).
    fn hessian_vector(&self, p: &Point3, v: &Vec3) -> Vec3 {
        let n = v.norm();
        if n == 0.0 {
            return Vec3::zeros();
        }
        let h = HESSIAN_FD_STEP / n;
        (self.grad(&(p + v * h)) - self.grad(&(p - v * h))) / (2.0 * h)
    }

    /// Values and gradients at many points.
    fn eval_grad_batch(&self, points: &[Point3]) -> (Vec<f64>, Vec<Vec3>) {
        points.par_iter().map(|p| (self.eval(p), self.grad(p))).unzip()
    }

    /// `hessian_vector` at many points, one direction per point.
    fn hessian_vector_batch(&self, points: &[Point3], dirs: &[Vec3]) -> Vec<Vec3> {
        points
            .par_iter()
            .zip(dirs.par_iter())
            .map(|(p, v)| self.hessian_vector(p, v))
            .collect()
    }
}

impl<F: OccupancyField + ?Sized> OccupancyField for &F {
    fn eval(&self, p: &Point3) -> f64 {
        (**self).eval(p)
    }
    fn grad(&self, p: &Point3) -> Vec3 {
        (**self).grad(p)
    }
    fn bbox(&self) -> BoundingBox {
        (**self).bbox()
    }
    fn eval_batch(&self, points: &[Point3]) -> Vec<f64> {
        (**self).eval_batch(points)
    }
    fn hessian_vector(&self, p: &Point3, v: &Vec3) -> Vec3 {
        (**self).hessian_vector(p, v)
    }
    fn eval_grad_batch(&self, points: &[Point3]) -> (Vec<f64>, Vec<Vec3>) {
        (**self).eval_grad_batch(points)
    }
    fn hessian_vector_batch(&self, points: &[Point3], dirs: &[Vec3]) -> Vec<Vec3> {
        (**self).hessian_vector_batch(points, dirs)
    }
}

impl<F: OccupancyField + ?Sized> OccupancyField for Box<F> {
    fn eval(&self, p: &Point3) -> f64 {
        (**self).eval(p)
    }
    fn grad(&self, p: &Point3) -> Vec3 {
        (**self).grad(p)
    }
    fn bbox(&self) -> BoundingBox {
        (**self).bbox()
    }
    fn eval_batch(&self, points: &[Point3]) -> Vec<f64> {
        (**self).eval_batch(points)
    }
    fn hessian_vector(&self, p: &Point3, v: &Vec3) -> Vec3 {
        (**self).hessian_vector(p, v)
    }
    fn eval_grad_batch(&self, points: &[Point3]) -> (Vec<f64>, Vec<Vec3>) {
        (**self).eval_grad_batch(points)
    }
    fn hessian_vector_batch(&self, points: &[Point3], dirs: &[Vec3]) -> Vec<Vec3> {
        (**self).hessian_vector_batch(points, dirs)
    }
}

impl<F: OccupancyField + ?Sized> OccupancyField for std::sync::Arc<F> {
    fn eval(&self, p: &Point3) -> f64 {
        (**self).eval(p)
    }
    fn grad(&self, p: &Point3) -> Vec3 {
        (**self).grad(p)
    }
    fn bbox(&self) -> BoundingBox {
        (**self).bbox()
    }
    fn eval_batch(&self, points: &[Point3]) -> Vec<f64> {
        (**self).eval_batch(points)
    }
    fn hessian_vector(&self, p: &Point3, v: &Vec3) -> Vec3 {
        (**self).hessian_vector(p, v)
    }
    fn eval_grad_batch(&self, points: &[Point3]) -> (Vec<f64>, Vec<Vec3>) {
        (**self).eval_grad_batch(points)
    }
    fn hessian_vector_batch(&self, points: &[Point3], dirs: &[Vec3]) -> Vec<Vec3> {
        (**self).hessian_vector_batch(points, dirs)
    }
}

/// Central-difference gradient of `eval`, used by tests and diagnostics.
pub fn finite_difference_grad<F: OccupancyField + ?Sized>(field: &F, p: &Point3, h: f64) -> Vec3 {
    let mut g = Vec3::zeros();
    for k in 0..3 {
        let mut e = Vec3::zeros();
        e[k] = h;
        g[k] = (field.eval(&(p + e)) - field.eval(&(p - e))) / (2.0 * h);
    }
    g
}
