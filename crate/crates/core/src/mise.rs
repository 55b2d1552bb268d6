//! Multiresolution isosurface extraction.
//!
//! The field is evaluated on a coarse corner grid; every voxel with an edge
//! whose endpoints disagree about occupancy is split into eight, only the
//! newly introduced corners are evaluated, and the process repeats until
//! the final resolution. At each level the active set is closed over
//! shared sign-changing edges, so surface that slips between the corners
//! of a coarse voxel next to detected surface is still found. Corner coordinates are integers at the final
//! resolution so values cached at coarse levels are reused exactly.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::OccupancyField;
use crate::geometry::{BoundingBox, TriangleMesh};
use crate::marching_cubes::{corner_position, marching_cubes, CornerGrid, CornerKey, CORNERS, EDGES};
use crate::mesh_refine::{refine, simplify_qem, RefineConfig};

/// Threshold used by the command line and the default configuration.
pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_INITIAL_RESOLUTION: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub tau: f64,
    pub initial_resolution: usize,
    pub levels: usize,
    pub bbox: BoundingBox,
}

impl ExtractionConfig {
    pub fn new(bbox: BoundingBox) -> Self {
        ExtractionConfig {
            tau: DEFAULT_TAU,
            initial_resolution: DEFAULT_INITIAL_RESOLUTION,
            levels: 2,
            bbox,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_resolution(mut self, initial: usize, levels: usize) -> Self {
        self.initial_resolution = initial;
        self.levels = levels;
        self
    }

    pub fn final_resolution(&self) -> usize {
        self.initial_resolution << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "initial resolution must be >= 2, got {}",
                self.initial_resolution
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.final_resolution() >= u32::MAX as usize / 2 || self.levels > 16 {
            return Err(Error::InvalidArgument(format!("{} levels is too deep", self.levels)));
        }
        BoundingBox::new(self.bbox.min(), self.bbox.max())?;
        Ok(())
    }
}

/// Octree bookkeeping accumulated over an extraction.
#[derive(Debug, Clone)]
pub struct ExtractionState {
    cache: HashMap<CornerKey, f64>,
    /// Active voxels per level, in that level's integer cell coordinates.
    active: Vec<Vec<CornerKey>>,
    pub evaluations: usize,
    pub cache_hits: usize,
    pub evaluations_per_level: Vec<usize>,
}

impl ExtractionState {
    pub fn cache(&self) -> &HashMap<CornerKey, f64> {
        &self.cache
    }

    pub fn active_voxels(&self, level: usize) -> &[CornerKey] {
        &self.active[level]
    }

    pub fn level_count(&self) -> usize {
        self.active.len()
    }

    pub fn stats(&self, cfg: &ExtractionConfig) -> ExtractionStats {
        let n = cfg.final_resolution() + 1;
        ExtractionStats {
            tau: cfg.tau,
            initial_resolution: cfg.initial_resolution,
            levels: cfg.levels,
            final_resolution: cfg.final_resolution(),
            evaluations: self.evaluations,
            cache_hits: self.cache_hits,
            evaluations_per_level: self.evaluations_per_level.clone(),
            active_voxels_per_level: self.active.iter().map(Vec::len).collect(),
            dense_evaluations: n * n * n,
        }
    }
}

/// Serializable summary of an extraction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionStats {
    pub tau: f64,
    pub initial_resolution: usize,
    pub levels: usize,
    pub final_resolution: usize,
    pub evaluations: usize,
    pub cache_hits: usize,
    pub evaluations_per_level: Vec<usize>,
    pub active_voxels_per_level: Vec<usize>,
    pub dense_evaluations: usize,
}

/// A voxel is active when at least one of its twelve edges joins an
/// occupied and an unoccupied corner.
pub fn is_active(occupied: &[bool; 8]) -> bool {
    EDGES.iter().any(|&[a, b]| occupied[a] != occupied[b])
}

/// Runs the octree refinement and returns the sparse corner samples at the
/// final resolution.
pub fn extract_grid<F: OccupancyField + ?Sized>(
    field: &F,
    cfg: &ExtractionConfig,
) -> Result<(CornerGrid, ExtractionState)> {
    cfg.validate()?;
    let final_res = cfg.final_resolution();
    let mut state = ExtractionState {
        cache: HashMap::new(),
        active: Vec::with_capacity(cfg.levels + 1),
        evaluations: 0,
        cache_hits: 0,
        evaluations_per_level: Vec::with_capacity(cfg.levels + 1),
    };

    let n0 = cfg.initial_resolution as u32;
    let step0 = 1u32 << cfg.levels;
    let mut initial = Vec::with_capacity(((n0 + 1) as usize).pow(3));
    for i in 0..=n0 {
        for j in 0..=n0 {
            for k in 0..=n0 {
                initial.push([i * step0, j * step0, k * step0]);
            }
        }
    }
    evaluate_new(field, cfg, final_res, &mut state, initial);

    let mut candidates: Vec<CornerKey> = Vec::with_capacity((n0 as usize).pow(3));
    for i in 0..n0 {
        for j in 0..n0 {
            for k in 0..n0 {
                candidates.push([i, j, k]);
            }
        }
    }

    for level in 0..=cfg.levels {
        let step = 1u32 << (cfg.levels - level);
        let mut active: Vec<CornerKey> = candidates
            .iter()
            .copied()
            .filter(|cell| is_active(&cell_occupancy(&state.cache, cell, step, cfg.tau)))
            .collect();
        if level > 0 {
            close_over_edges(field, cfg, final_res, &mut state, &mut active, step, n0 << level);
        }

        if level == cfg.levels {
            state.active.push(active);
            break;
        }

        let half = step / 2;
        let mut seen: HashSet<CornerKey> = HashSet::new();
        let mut fresh = Vec::new();
        let mut children = Vec::with_capacity(active.len() * 8);
        for cell in &active {
            for di in 0..3u32 {
                for dj in 0..3u32 {
                    for dk in 0..3u32 {
                        let key = [
                            (2 * cell[0] + di) * half,
                            (2 * cell[1] + dj) * half,
                            (2 * cell[2] + dk) * half,
                        ];
                        if state.cache.contains_key(&key) {
                            state.cache_hits += 1;
                        } else if seen.insert(key) {
                            fresh.push(key);
                        }
                    }
                }
            }
            for o in CORNERS {
                children.push([2 * cell[0] + o[0], 2 * cell[1] + o[1], 2 * cell[2] + o[2]]);
            }
        }
        state.active.push(active);
        fresh.sort_unstable();
        evaluate_new(field, cfg, final_res, &mut state, fresh);
        children.sort_unstable();
        candidates = children;
    }

    debug_assert_eq!(state.evaluations, state.cache.len());
    let grid = CornerGrid::sparse(final_res, cfg.bbox, state.cache.clone());
    Ok((grid, state))
}

fn cell_occupancy(cache: &HashMap<CornerKey, f64>, cell: &CornerKey, step: u32, tau: f64) -> [bool; 8] {
    std::array::from_fn(|c| {
        let key = [
            (cell[0] + CORNERS[c][0]) * step,
            (cell[1] + CORNERS[c][1]) * step,
            (cell[2] + CORNERS[c][2]) * step,
        ];
        cache[&key] >= tau
    })
}

/// Adds every cell sharing a sign-changing edge with an active cell until
/// the set is closed. Surface that enters a coarse voxel without flipping
/// any of its corners is reached this way from the neighbouring active
/// cells; the extra corners count toward the current level.
fn close_over_edges<F: OccupancyField + ?Sized>(
    field: &F,
    cfg: &ExtractionConfig,
    final_res: usize,
    state: &mut ExtractionState,
    active: &mut Vec<CornerKey>,
    step: u32,
    cells: u32,
) {
    let mut member: HashSet<CornerKey> = active.iter().copied().collect();
    let mut frontier = active.clone();
    while !frontier.is_empty() {
        let mut added = Vec::new();
        for cell in &frontier {
            let occ = cell_occupancy(&state.cache, cell, step, cfg.tau);
            for &[a, b] in EDGES.iter() {
                if occ[a] == occ[b] {
                    continue;
                }
                let axis = (0..3).find(|&i| CORNERS[a][i] != CORNERS[b][i]).expect("edge spans one axis");
                let base: [u32; 3] = std::array::from_fn(|i| cell[i] + CORNERS[a][i].min(CORNERS[b][i]));
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                for du in 0..2u32 {
                    for dv in 0..2u32 {
                        if base[u] < du || base[v] < dv {
                            continue;
                        }
                        let mut n = base;
                        n[u] -= du;
                        n[v] -= dv;
                        if n.iter().all(|&c| c < cells) && member.insert(n) {
                            added.push(n);
                        }
                    }
                }
            }
        }
        added.sort_unstable();
        let mut fresh: Vec<CornerKey> = added
            .iter()
            .flat_map(|cell| {
                CORNERS.map(|o| {
                    [
                        (cell[0] + o[0]) * step,
                        (cell[1] + o[1]) * step,
                        (cell[2] + o[2]) * step,
                    ]
                })
            })
            .filter(|k| !state.cache.contains_key(k))
            .collect();
        fresh.sort_unstable();
        fresh.dedup();
        if !fresh.is_empty() {
            let extra = fresh.len();
            evaluate_new(field, cfg, final_res, state, fresh);
            state.evaluations_per_level.pop();
            *state.evaluations_per_level.last_mut().expect("a level was evaluated") += extra;
        }
        active.extend_from_slice(&added);
        frontier = added;
    }
    active.sort_unstable();
}

fn evaluate_new<F: OccupancyField + ?Sized>(
    field: &F,
    cfg: &ExtractionConfig,
    final_res: usize,
    state: &mut ExtractionState,
    keys: Vec<CornerKey>,
) {
    let points: Vec<_> = keys
        .iter()
        .map(|&k| corner_position(&cfg.bbox, final_res, k))
        .collect();
    let values = field.eval_batch(&points);
    state.evaluations += keys.len();
    state.evaluations_per_level.push(keys.len());
    for (key, v) in keys.into_iter().zip(values) {
        let previous = state.cache.insert(key, v);
        debug_assert!(previous.is_none(), "corner {key:?} evaluated twice");
    }
}

/// Full pipeline: octree extraction, marching cubes, optional
/// simplification, and gradient-based refinement against `field`.
pub fn extract_mesh<F: OccupancyField + ?Sized>(
    field: &F,
    cfg: &ExtractionConfig,
    refine_cfg: &RefineConfig,
) -> Result<(TriangleMesh, ExtractionStats)> {
    let (grid, state) = extract_grid(field, cfg)?;
    let stats = state.stats(cfg);
    let mut mesh = marching_cubes(&grid, cfg.tau);
    if mesh.is_empty() {
        log::warn!("isosurface at tau = {} is empty", cfg.tau);
        return Ok((TriangleMesh::empty(), stats));
    }
    if let Some(target) = refine_cfg.simplify_to {
        if target < mesh.faces.len() {
            mesh = simplify_qem(&mesh, target)?;
        }
    }
    if refine_cfg.steps > 0 {
        mesh = refine(&mesh, field, cfg.tau, refine_cfg)?.mesh;
    }
    Ok((mesh, stats))
}

/// One connected component of the reference grid's interior or exterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub occupied: bool,
    pub size: usize,
    /// A reference-grid corner inside the component.
    pub seed: CornerKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub reference_resolution: usize,
    pub components: usize,
    /// Components containing no corner of the initial grid.
    pub missed: Vec<Component>,
}

impl ConvergenceReport {
    pub fn converged(&self) -> bool {
        self.missed.is_empty()
    }
}

/// Audits the initial grid against a denser reference grid: every
/// 6-connected component of the reference interior and exterior must
/// contain at least one initial-grid corner, otherwise extraction can miss
/// it.
pub fn check_convergence_precondition<F: OccupancyField + ?Sized>(
    field: &F,
    cfg: &ExtractionConfig,
    reference_resolution: usize,
) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let n0 = cfg.initial_resolution;
    if reference_resolution < n0 || reference_resolution % n0 != 0 {
        return Err(Error::InvalidArgument(format!(
            "reference resolution {reference_resolution} must be a multiple of the initial resolution {n0}"
        )));
    }
    let ratio = reference_resolution / n0;
    let m = reference_resolution + 1;
    let grid = CornerGrid::sample(field, reference_resolution, cfg.bbox);
    let idx = |i: usize, j: usize, k: usize| (i * m + j) * m + k;
    let mut labels = vec![false; m * m * m];
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                labels[idx(i, j, k)] = grid.value([i as u32, j as u32, k as u32]) >= cfg.tau;
            }
        }
    }

    let mut component = vec![u32::MAX; m * m * m];
    let mut components = 0usize;
    let mut missed = Vec::new();
    let mut stack = Vec::new();
    for start in 0..m * m * m {
        if component[start] != u32::MAX {
            continue;
        }
        let label = labels[start];
        let id = components as u32;
        components += 1;
        component[start] = id;
        stack.push(start);
        let mut size = 0;
        let mut hit_initial = false;
        while let Some(cur) = stack.pop() {
            size += 1;
            let (i, j, k) = (cur / (m * m), (cur / m) % m, cur % m);
            if i % ratio == 0 && j % ratio == 0 && k % ratio == 0 {
                hit_initial = true;
            }
            let mut visit = |ni: usize, nj: usize, nk: usize| {
                let n = idx(ni, nj, nk);
                if component[n] == u32::MAX && labels[n] == label {
                    component[n] = id;
                    stack.push(n);
                }
            };
            if i > 0 {
                visit(i - 1, j, k);
            }
            if i + 1 < m {
                visit(i + 1, j, k);
            }
            if j > 0 {
                visit(i, j - 1, k);
            }
            if j + 1 < m {
                visit(i, j + 1, k);
            }
            if k > 0 {
                visit(i, j, k - 1);
            }
            if k + 1 < m {
                visit(i, j, k + 1);
            }
        }
        if !hit_initial {
            let (i, j, k) = (start / (m * m), (start / m) % m, start % m);
            missed.push(Component {
                occupied: label,
                size,
                seed: [i as u32, j as u32, k as u32],
            });
        }
    }
    Ok(ConvergenceReport {
        reference_resolution,
        components,
        missed,
    })
}

/// Marching cubes on the fully evaluated final-resolution grid; the
/// reference that octree extraction must reproduce.
pub fn dense_extract<F: OccupancyField + ?Sized>(field: &F, cfg: &ExtractionConfig) -> Result<TriangleMesh> {
    cfg.validate()?;
    let grid = CornerGrid::sample(field, cfg.final_resolution(), cfg.bbox);
    Ok(marching_cubes(&grid, cfg.tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AnalyticField, Shape};
    use crate::geometry::Point3;

    fn sphere(r: f64) -> AnalyticField {
        AnalyticField::sphere(Point3::zeros(), r).unwrap()
    }

    #[test]
    fn constant_zero_field_stops_after_level_zero() {
        let f = AnalyticField::new(Shape::Empty).unwrap();
        let cfg = ExtractionConfig::new(BoundingBox::cube(0.5)).with_resolution(8, 3);
        let (_, state) = extract_grid(&f, &cfg).unwrap();
        assert_eq!(state.active_voxels(0).len(), 0);
        assert_eq!(state.evaluations, 9 * 9 * 9);
    }

    #[test]
    fn active_voxel_definition_on_corner_patterns() {
        assert!(!is_active(&[false; 8]));
        assert!(!is_active(&[true; 8]));
        for c in 0..8 {
            let mut occ = [false; 8];
            occ[c] = true;
            assert!(is_active(&occ));
            let mut occ = [true; 8];
            occ[c] = false;
            assert!(is_active(&occ));
        }
        // Diagonally opposite corners share no edge but still disagree
        // with their edge neighbours.
        let mut occ = [false; 8];
        occ[0] = true;
        occ[6] = true;
        assert!(is_active(&occ));
        // Exhaustive: active iff not all equal, since the cube's edge
        // graph is connected.
        for mask in 0u32..256 {
            let occ: [bool; 8] = std::array::from_fn(|c| mask & (1 << c) != 0);
            assert_eq!(is_active(&occ), mask != 0 && mask != 255);
        }
    }

    #[test]
    fn matches_dense_extraction_and_saves_work() {
        let f = sphere(0.4);
        let cfg = ExtractionConfig::new(BoundingBox::cube(0.5))
            .with_tau(0.5)
            .with_resolution(16, 2);
        let (grid, state) = extract_grid(&f, &cfg).unwrap();
        let sparse = marching_cubes(&grid, cfg.tau);
        let dense = dense_extract(&f, &cfg).unwrap();
        assert_eq!(sparse, dense);
        assert!(state.evaluations < 65usize.pow(3) / 4);
        assert_eq!(state.evaluations, state.cache().len());
    }

    #[test]
    fn evaluations_grow_with_levels_but_stay_below_dense() {
        let f = AnalyticField::new(Shape::torus(Point3::zeros(), 0.3, 0.1)).unwrap();
        let mut last = 0;
        for levels in 0..4 {
            let cfg = ExtractionConfig::new(BoundingBox::cube(0.5)).with_resolution(8, levels);
            let (_, state) = extract_grid(&f, &cfg).unwrap();
            let dense = (cfg.final_resolution() + 1).pow(3);
            assert!(state.evaluations >= last);
            assert!(state.evaluations <= dense);
            last = state.evaluations;
        }
    }

    #[test]
    fn levels_zero_is_dense_marching_cubes() {
        let f = sphere(0.3);
        let cfg = ExtractionConfig::new(BoundingBox::cube(0.5)).with_resolution(20, 0);
        let (grid, _) = extract_grid(&f, &cfg).unwrap();
        assert_eq!(marching_cubes(&grid, cfg.tau), dense_extract(&f, &cfg).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let f = sphere(0.3);
        let bad = [
            ExtractionConfig::new(BoundingBox::cube(0.5)).with_resolution(1, 2),
            ExtractionConfig::new(BoundingBox::cube(0.5)).with_tau(1.0),
            ExtractionConfig::new(BoundingBox::cube(0.5)).with_tau(0.0),
        ];
        for cfg in bad {
            assert!(extract_grid(&f, &cfg).is_err());
        }
    }

    #[test]
    fn large_sphere_satisfies_the_precondition() {
        let cfg = ExtractionConfig::new(BoundingBox::cube(0.5)).with_resolution(32, 2);
        let report = check_convergence_precondition(&sphere(0.4), &cfg, 128).unwrap();
        assert!(report.converged());
        assert_eq!(report.components, 2);
    }

    #[test]
    fn concave_creases_match_dense_extraction() {
        let f = AnalyticField::new(Shape::Union(vec![
            Shape::sphere(Point3::new(-0.15, 0.0, 0.0), 0.25),
            Shape::sphere(Point3::new(0.2, 0.05, 0.0), 0.2),
        ]))
        .unwrap();
        for (res, levels) in [(16, 2), (32, 2), (12, 3)] {
            let cfg = ExtractionConfig::new(BoundingBox::cube(0.5))
                .with_tau(0.5)
                .with_resolution(res, levels);
            let (grid, state) = extract_grid(&f, &cfg).unwrap();
            assert_eq!(marching_cubes(&grid, cfg.tau), dense_extract(&f, &cfg).unwrap(), "{res} {levels}");
            assert_eq!(state.evaluations_per_level.iter().sum::<usize>(), state.evaluations);
        }
    }

    #[test]
    fn tiny_sphere_is_flagged() {
        // r = 0.01 at a 1/128 reference spacing: the ball contains the
        // reference corners within 0.01 of the origin, none of which lie
        // on the 4^3 initial lattice (spacing 0.25) except the origin, so
        // offset the sphere off-lattice.
        let f = AnalyticField::sphere(Point3::new(0.1, 0.1, 0.1), 0.01).unwrap();
        let cfg = ExtractionConfig::new(BoundingBox::cube(0.5)).with_resolution(4, 2);
        let report = check_convergence_precondition(&f, &cfg, 128).unwrap();
        assert!(!report.converged());
        assert_eq!(report.missed.len(), 1);
        assert!(report.missed[0].occupied);
    }

    #[test]
    fn one_of_two_small_spheres_is_flagged() {
        // Initial grid 8^3 over [-0.5, 0.5]: lattice points at multiples of
        // 0.125. The big sphere covers lattice points, the small one sits
        // between them.
        let f = AnalyticField::new(Shape::Union(vec![
            Shape::sphere(Point3::new(-0.25, 0.0, 0.0), 0.1),
            Shape::sphere(Point3::new(0.3, 0.3, 0.3), 0.03),
        ]))
        .unwrap()
        .with_bbox(BoundingBox::cube(0.5));
        let cfg = ExtractionConfig::new(BoundingBox::cube(0.5)).with_resolution(8, 2);
        let report = check_convergence_precondition(&f, &cfg, 128).unwrap();
        assert_eq!(report.components, 3);
        assert_eq!(report.missed.len(), 1);
        let seed = report.missed[0].seed;
        let p = corner_position(&cfg.bbox, 128, seed);
        assert!((p - Point3::new(0.3, 0.3, 0.3)).norm() <= 0.03 + 1e-12);
    }
}
