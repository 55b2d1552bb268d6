//! Bounding-volume hierarchy over a mesh's triangles: ray-parity
//! containment and closest-point queries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{BoundingBox, Point3, TriangleMesh, Vec3};

/// Hits closer than this (in barycentric units) to an edge or vertex make
/// the parity count unreliable and trigger a new ray direction.
const EDGE_TOLERANCE: f64 = 1e-9;
const MAX_REDRAWS: usize = 8;
const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Containment {
    Inside,
    Outside,
}

impl Containment {
    pub fn is_inside(self) -> bool {
        self == Containment::Inside
    }
}

#[derive(Debug, Clone)]
struct Node {
    bbox: BoundingBox,
    // Leaf: triangles `order[start..start + count]`. Interior: children at
    // `start` and `start + 1`, count == 0.
    start: usize,
    count: usize,
}

/// Acceleration structure for inside/outside and distance queries.
///
/// Ray directions are derived from `seed` and the query point's bit
/// pattern, so a query gives the same answer regardless of thread or call
/// order.
#[derive(Debug, Clone)]
pub struct MeshIndex {
    mesh: TriangleMesh,
    nodes: Vec<Node>,
    order: Vec<usize>,
    seed: u64,
}

enum RayOutcome {
    Parity(usize),
    OnSurface,
    Degenerate,
}

impl MeshIndex {
    pub fn new(mesh: TriangleMesh) -> Self {
        MeshIndex::with_seed(mesh, 0x5eed_0f_7a7e)
    }

    pub fn with_seed(mesh: TriangleMesh, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..mesh.faces.len()).collect();
        let centroids: Vec<Point3> = (0..mesh.faces.len())
            .map(|f| {
                let [a, b, c] = mesh.triangle(f);
                (a + b + c) / 3.0
            })
            .collect();
        let mut nodes = Vec::new();
        if !order.is_empty() {
            nodes.push(Node {
                bbox: BoundingBox::cube(0.0),
                start: 0,
                count: 0,
            });
            build(&mesh, &centroids, &mut order, 0, &mut nodes, 0);
        }
        MeshIndex {
            mesh,
            nodes,
            order,
            seed,
        }
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn bbox(&self) -> Option<BoundingBox> {
        self.nodes.first().map(|n| n.bbox)
    }

    /// Ray-parity containment with random ray directions, redrawn when a
    /// hit lands within tolerance of an edge or vertex. Points on the
    /// surface count as inside.
    pub fn point_in_mesh(&self, p: &Point3) -> Containment {
        let Some(root) = self.nodes.first() else {
            return Containment::Outside;
        };
        if !root.bbox.contains(p) {
            return Containment::Outside;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ hash_point(p));
        let mut last = 0;
        for _ in 0..=MAX_REDRAWS {
            let dir = random_direction(&mut rng);
            match self.cast(p, &dir) {
                RayOutcome::OnSurface => return Containment::Inside,
                RayOutcome::Parity(n) => return parity(n),
                RayOutcome::Degenerate => last += 1,
            }
        }
        log::debug!("point_in_mesh: {last} degenerate rays at {p:?}, using a final unchecked ray");
        let dir = random_direction(&mut rng);
        parity(self.count_crossings_unchecked(p, &dir))
    }

    /// Single-ray parity along `dir`; `None` if the ray grazes an edge or
    /// vertex.
    pub fn parity_along(&self, p: &Point3, dir: &Vec3) -> Option<Containment> {
        match self.cast(p, dir) {
            RayOutcome::OnSurface => Some(Containment::Inside),
            RayOutcome::Parity(n) => Some(parity(n)),
            RayOutcome::Degenerate => None,
        }
    }

    fn cast(&self, origin: &Point3, dir: &Vec3) -> RayOutcome {
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut crossings = 0;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if !ray_hits_box(origin, &inv, &node.bbox) {
                continue;
            }
            if node.count == 0 {
                stack.push(node.start);
                stack.push(node.start + 1);
                continue;
            }
            for &f in &self.order[node.start..node.start + node.count] {
                let tri = self.mesh.triangle(f);
                match intersect(origin, dir, &tri) {
                    Hit::None => {}
                    Hit::Crossing => crossings += 1,
                    Hit::Origin => return RayOutcome::OnSurface,
                    Hit::Grazing => return RayOutcome::Degenerate,
                }
            }
        }
        RayOutcome::Parity(crossings)
    }

    fn count_crossings_unchecked(&self, origin: &Point3, dir: &Vec3) -> usize {
        (0..self.mesh.faces.len())
            .filter(|&f| matches!(intersect(origin, dir, &self.mesh.triangle(f)), Hit::Crossing | Hit::Grazing))
            .count()
    }

    /// Closest point on the surface, its face, and the distance.
    pub fn closest_point(&self, p: &Point3) -> Option<(Point3, usize, f64)> {
        self.nodes.first()?;
        let mut best: Option<(Point3, usize, f64)> = None;
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if node.bbox.distance_squared(p) > best_d2 {
                continue;
            }
            if node.count == 0 {
                let (a, b) = (node.start, node.start + 1);
                let (da, db) = (
                    self.nodes[a].bbox.distance_squared(p),
                    self.nodes[b].bbox.distance_squared(p),
                );
                // Visit the nearer child first.
                if da < db {
                    stack.push(b);
                    stack.push(a);
                } else {
                    stack.push(a);
                    stack.push(b);
                }
                continue;
            }
            for &f in &self.order[node.start..node.start + node.count] {
                let c = closest_on_triangle(p, &self.mesh.triangle(f));
                let d2 = (c - p).norm_squared();
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = Some((c, f, 0.0));
                }
            }
        }
        best.map(|(c, f, _)| (c, f, best_d2.sqrt()))
    }

    /// Signed distance (negative inside) and its gradient.
    pub fn signed_distance(&self, p: &Point3) -> Option<(f64, Vec3)> {
        let (c, face, d) = self.closest_point(p)?;
        let inside = self.point_in_mesh(p).is_inside();
        let dir = if d > 1e-12 {
            (p - c) / d
        } else {
            return Some((0.0, self.mesh.face_normal(face)));
        };
        Some(if inside { (-d, -dir) } else { (d, dir) })
    }
}

fn parity(crossings: usize) -> Containment {
    if crossings % 2 == 1 {
        Containment::Inside
    } else {
        Containment::Outside
    }
}

fn hash_point(p: &Point3) -> u64 {
    // splitmix64 over the coordinate bits
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for k in 0..3 {
        h ^= p[k].to_bits();
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn random_direction<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        // Axis-aligned rays hit the shared edges of grid-aligned meshes
        // far too often; reject them along with near-zero draws.
        if n > 1e-6 && v.iter().all(|c| (c / n).abs() > 1e-3) {
            return v / n;
        }
    }
}

enum Hit {
    None,
    Crossing,
    Origin,
    Grazing,
}

/// Moller-Trumbore with edge-proximity classification.
fn intersect(origin: &Point3, dir: &Vec3, [a, b, c]: &[Point3; 3]) -> Hit {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    let scale = e1.norm() * e2.norm();
    if scale == 0.0 {
        return Hit::None;
    }
    let s = origin - a;
    if det.abs() <= 1e-14 * scale {
        // Ray parallel to the triangle plane: only a concern if it lies in it.
        let n = e1.cross(&e2);
        if n.norm_squared() > 0.0 && (s.dot(&n) / n.norm()).abs() < 1e-12 {
            return Hit::Grazing;
        }
        return Hit::None;
    }
    let inv = 1.0 / det;
    let u = s.dot(&pvec) * inv;
    let qvec = s.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    let t = e2.dot(&qvec) * inv;
    let w = 1.0 - u - v;
    let tol = EDGE_TOLERANCE;
    if u < -tol || v < -tol || w < -tol {
        return Hit::None;
    }
    let length_scale = scale.sqrt();
    if t.abs() <= 1e-12 * length_scale.max(1.0) {
        return Hit::Origin;
    }
    if t < 0.0 {
        return Hit::None;
    }
    if u < tol || v < tol || w < tol {
        return Hit::Grazing;
    }
    Hit::Crossing
}

fn ray_hits_box(origin: &Point3, inv: &Vec3, bbox: &BoundingBox) -> bool {
    let mut tmin = 0.0f64;
    let mut tmax = f64::INFINITY;
    for k in 0..3 {
        let t1 = (bbox.min[k] - origin[k]) * inv[k];
        let t2 = (bbox.max[k] - origin[k]) * inv[k];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        tmin = tmin.max(lo);
        tmax = tmax.min(hi);
    }
    // A small slack keeps hits on box faces from being culled.
    tmin <= tmax * (1.0 + 1e-12) + 1e-12
}

/// Closest point on a triangle (Ericson, Real-Time Collision Detection 5.1.5).
pub(crate) fn closest_on_triangle(p: &Point3, [a, b, c]: &[Point3; 3]) -> Point3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

fn build(
    mesh: &TriangleMesh,
    centroids: &[Point3],
    order: &mut [usize],
    offset: usize,
    nodes: &mut Vec<Node>,
    node: usize,
) {
    let mut bbox = {
        let [a, _, _] = mesh.triangle(order[0]);
        BoundingBox {
            min: a.into(),
            max: a.into(),
        }
    };
    let mut cbox = BoundingBox {
        min: centroids[order[0]].into(),
        max: centroids[order[0]].into(),
    };
    for &f in order.iter() {
        for v in mesh.triangle(f) {
            bbox.expand_to(&v);
        }
        cbox.expand_to(&centroids[f]);
    }
    nodes[node].bbox = bbox;
    if order.len() <= LEAF_SIZE {
        nodes[node].start = offset;
        nodes[node].count = order.len();
        return;
    }
    let extent = cbox.extent();
    let axis = (0..3)
        .max_by(|&a, &b| extent[a].total_cmp(&extent[b]))
        .unwrap_or(0);
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]));
    let left = nodes.len();
    let placeholder = Node {
        bbox,
        start: 0,
        count: 0,
    };
    nodes.push(placeholder.clone());
    nodes.push(placeholder);
    nodes[node].start = left;
    nodes[node].count = 0;
    let (lo, hi) = order.split_at_mut(mid);
    build(mesh, centroids, lo, offset, nodes, left);
    build(mesh, centroids, hi, offset + mid, nodes, left + 1);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube() -> TriangleMesh {
        TriangleMesh::cuboid(&BoundingBox {
            min: [0.0; 3],
            max: [1.0; 3],
        })
    }

    #[test]
    fn cube_center_inside_far_point_outside() {
        let idx = MeshIndex::new(unit_cube());
        assert_eq!(idx.point_in_mesh(&Point3::new(0.5, 0.5, 0.5)), Containment::Inside);
        assert_eq!(idx.point_in_mesh(&Point3::new(2.0, 0.0, 0.0)), Containment::Outside);
        assert_eq!(idx.point_in_mesh(&Point3::new(0.5, 0.5, 1.0 + 1e-6)), Containment::Outside);
        assert_eq!(idx.point_in_mesh(&Point3::new(0.5, 0.5, 1.0 - 1e-6)), Containment::Inside);
    }

    #[test]
    fn surface_point_counts_as_inside() {
        let idx = MeshIndex::new(unit_cube());
        assert!(idx.point_in_mesh(&Point3::new(0.3, 0.4, 0.0)).is_inside());
    }

    #[test]
    fn sphere_classification_matches_radius() {
        // Chord-length bound for a level-4 icosphere of radius 0.5: the
        // polyhedron lies between r * cos(edge angle / 2) and r.
        let mesh = TriangleMesh::icosphere(Point3::zeros(), 0.5, 4);
        let max_edge = mesh
            .faces
            .iter()
            .flat_map(|f| (0..3).map(move |k| (f[k], f[(k + 1) % 3])))
            .map(|(a, b)| (mesh.vertices[a] - mesh.vertices[b]).norm())
            .fold(0.0, f64::max);
        let idx = MeshIndex::new(mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut mismatches = 0;
        for _ in 0..10_000 {
            let p = Point3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            );
            let analytic = p.norm() <= 0.5;
            if idx.point_in_mesh(&p).is_inside() != analytic {
                assert!((p.norm() - 0.5).abs() < max_edge, "mismatch far from surface at {p:?}");
                mismatches += 1;
            }
        }
        assert!(mismatches < 200, "{mismatches} mismatches");
    }

    #[test]
    fn agrees_with_majority_of_five_rays() {
        let mesh = TriangleMesh::icosphere(Point3::new(0.1, -0.05, 0.0), 0.4, 2);
        let idx = MeshIndex::new(mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..2000 {
            let p = Point3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            );
            let mut votes = 0;
            let mut cast = 0;
            while cast < 5 {
                if let Some(c) = idx.parity_along(&p, &random_direction(&mut rng)) {
                    votes += c.is_inside() as usize;
                    cast += 1;
                }
            }
            assert_eq!(idx.point_in_mesh(&p).is_inside(), votes >= 3, "at {p:?}");
        }
    }

    #[test]
    fn vertex_aligned_queries_are_resolved() {
        // Points on the cube's diagonal line up with shared vertices for
        // axis-ish directions; redraws must still give the right answer.
        let idx = MeshIndex::new(unit_cube());
        for k in 1..10 {
            let t = k as f64 / 10.0;
            assert!(idx.point_in_mesh(&Point3::new(t, t, t)).is_inside());
            assert!(!idx.point_in_mesh(&Point3::new(t + 1.5, t, t)).is_inside());
        }
    }

    #[test]
    fn closest_point_matches_brute_force() {
        let mesh = TriangleMesh::icosphere(Point3::zeros(), 0.5, 2);
        let idx = MeshIndex::new(mesh.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..300 {
            let p = Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let brute = (0..mesh.faces.len())
                .map(|f| (closest_on_triangle(&p, &mesh.triangle(f)) - p).norm())
                .fold(f64::INFINITY, f64::min);
            let (_, _, d) = idx.closest_point(&p).unwrap();
            assert!((d - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn signed_distance_sign_and_gradient() {
        let idx = MeshIndex::new(unit_cube());
        let (d, g) = idx.signed_distance(&Point3::new(0.5, 0.5, 0.9)).unwrap();
        assert!((d + 0.1).abs() < 1e-12);
        assert!((g - Vec3::z()).norm() < 1e-12);
        let (d, g) = idx.signed_distance(&Point3::new(1.2, 0.5, 0.5)).unwrap();
        assert!((d - 0.2).abs() < 1e-12);
        assert!((g - Vec3::x()).norm() < 1e-12);
    }
}
