//! 3D primitives, triangle meshes and the spatial queries built on them.

mod io;
mod kdtree;
mod mesh;
mod raycast;

pub use io::{load_mesh, save_mesh, MeshFormat};
pub use kdtree::KdTree3;
pub use mesh::TriangleMesh;
pub use raycast::{Containment, MeshIndex};

use crate::error::{Error, Result};

/// A point (or direction) in model space.
pub type Point3 = nalgebra::Vector3<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;

/// Axis-aligned box, `min <= max` componentwise.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoundingBox {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        if !(min.iter().all(|c| c.is_finite()) && max.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("bounding box must be finite".into()));
        }
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(Error::InvalidArgument(format!(
                "bounding box min {min:?} exceeds max {max:?}"
            )));
        }
        Ok(BoundingBox {
            min: min.into(),
            max: max.into(),
        })
    }

    /// The cube `[-half, half]^3`.
    pub fn cube(half: f64) -> Self {
        BoundingBox {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn min(&self) -> Point3 {
        Point3::from(self.min)
    }

    pub fn max(&self) -> Point3 {
        Point3::from(self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max() - self.min()
    }

    pub fn center(&self) -> Point3 {
        (self.min() + self.max()) * 0.5
    }

    pub fn max_edge(&self) -> f64 {
        self.extent().max()
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        let mut out = *self;
        for i in 0..3 {
            out.min[i] = out.min[i].min(other.min[i]);
            out.max[i] = out.max[i].max(other.max[i]);
        }
        out
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let mut out = *self;
        for i in 0..3 {
            out.min[i] = out.min[i].max(other.min[i]);
            out.max[i] = out.max[i].min(other.max[i]);
            if out.min[i] > out.max[i] {
                return None;
            }
        }
        Some(out)
    }

    /// Grows every side by `fraction` of the extent along that axis.
    pub fn padded(&self, fraction: f64) -> BoundingBox {
        let e = self.extent();
        let mut out = *self;
        for i in 0..3 {
            out.min[i] -= fraction * e[i];
            out.max[i] += fraction * e[i];
        }
        out
    }

    pub fn expand_to(&mut self, p: &Point3) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(p[i]);
            self.max[i] = self.max[i].max(p[i]);
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3>) -> Option<BoundingBox> {
        let mut iter = points.into_iter();
        let first = iter.next()?;
        let mut bbox = BoundingBox {
            min: (*first).into(),
            max: (*first).into(),
        };
        for p in iter {
            bbox.expand_to(p);
        }
        Some(bbox)
    }

    /// Uniform point in the box given three unit-interval draws.
    pub fn lerp(&self, t: [f64; 3]) -> Point3 {
        Point3::new(
            self.min[0] + t[0] * (self.max[0] - self.min[0]),
            self.min[1] + t[1] * (self.max[1] - self.min[1]),
            self.min[2] + t[2] * (self.max[2] - self.min[2]),
        )
    }

    /// Squared distance from `p` to the box (0 inside).
    pub fn distance_squared(&self, p: &Point3) -> f64 {
        let mut d = 0.0;
        for i in 0..3 {
            let v = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

pub(crate) fn is_finite(p: &Point3) -> bool {
    p.x.is_finite() && p.y.is_finite() && p.z.is_finite()
}
