use super::Point3;
use crate::error::{Error, Result};

/// Balanced 3-d tree over a fixed point set.
///
/// The tree is stored implicitly: `order[lo..hi]` is a subtree whose root is
/// at the midpoint, split along `axis[mid]`. Ties in distance resolve to
/// the smaller original index so results match a linear scan exactly.
#[derive(Debug, Clone)]
pub struct KdTree3 {
    points: Vec<Point3>,
    order: Vec<usize>,
    axis: Vec<u8>,
}

impl KdTree3 {
    pub fn new(points: Vec<Point3>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axis = vec![0u8; points.len()];
        build(&points, &mut order, &mut axis);
        KdTree3 {
            points,
            order,
            axis,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// Index of the closest indexed point and its Euclidean distance.
    pub fn nearest(&self, q: &Point3) -> Result<(usize, f64)> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("nearest query on an empty tree".into()));
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), &mut best);
        Ok((best.0, best.1.sqrt()))
    }

    fn search(&self, q: &Point3, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = self.axis[mid] as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        // `<=` keeps equal-distance candidates on the far side reachable.
        if delta * delta <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(points: &[Point3], order: &mut [usize], axis: &mut [u8]) {
    if order.len() <= 1 {
        if let Some(a) = axis.first_mut() {
            *a = 0;
        }
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(points[i][k]);
            hi[k] = hi[k].max(points[i][k]);
        }
    }
    let split = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][split].total_cmp(&points[b][split]));
    axis[mid] = split as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (left_axis, rest_axis) = axis.split_at_mut(mid);
    build(points, left, left_axis);
    build(points, &mut rest[1..], &mut rest_axis[1..]);
}
