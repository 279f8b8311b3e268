//! Stationary solver for the obstacle-constrained one-phase free boundary
//! problem: u harmonic in Ω_u ∩ D, |∇u|² = ∇u·V on ∂Ω_u ∩ D, one-sided
//! inequality |∇u|² ≥ ∇u·V where ∂Ω_u rests on the obstacle, u = 0 on K.
//!
//! The solver is a trial free boundary (level set) fixed point: the front
//! moves with outward normal speed s = (|∇u|² − ∇u·V)/|∇u| and u is re-solved
//! harmonic behind it after every step, so stationarity is equivalent to the
//! free boundary condition. The sign makes the planar profile c(x·ν)⁺ with
//! c = V·ν a stable fixed point: an over-steep gradient gives s > 0, Ω grows
//! and the gradient relaxes. The front may touch the obstacle but never
//! enters it (the level set is clamped nonpositive on obstacle nodes), and it
//! may detach again.
//!
//! The Perron supersolution algebra (pointwise minimum, harmonic
//! replacement) is provided for cross-validation: the converged solution must
//! stay below the harmonic majorant of the datum.

use crate::elliptic::{self, CutMap, SolveConfig, SolveStats, DIR_E, DIR_N, DIR_S, DIR_W};
use crate::error::{CoreError, Result};
use crate::geometry::{
    gradient_at, GeometrySpec, GradientSide, NodeTag, RegionMask, ScalarField,
};

/// Which part of the boundary a front point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbRegion {
    /// Free part: ∂Ω_u ∩ D.
    D,
    /// Resting on the obstacle: ∂Ω_u ∩ K (within one cell of ∂K).
    K,
}

/// One sub-grid-accurate point of ∂Ω_u with its kinematic data.
#[derive(Debug, Clone, Copy)]
pub struct FbPoint {
    pub pos: [f64; 2],
    /// Interior unit normal ∇u/|∇u| (zero when degenerate).
    pub normal: [f64; 2],
    pub grad: [f64; 2],
    pub grad_norm: f64,
    /// |∇u|² − ∇u·V.
    pub residual: f64,
    pub region: FbRegion,
    /// Resting directly on ∂K (within a fraction of a cell): the obstacle
    /// clamp pins it, so outward pressure produces no motion.
    pub on_obstacle: bool,
    /// |∇u| below the gradient floor ε_g; excluded from convergence tests.
    pub degenerate: bool,
    /// Within one cell of ∂B: a Dirichlet endpoint of the front, not a free
    /// boundary point. Never pushed outward, excluded from the statistics.
    pub boundary_attached: bool,
    /// Within the junction layer (~2 cells) of ∂B, where the wall datum and
    /// the free boundary condition meet; excluded from the statistics but
    /// free to move.
    pub wall_zone: bool,
}

/// Ordered polyline(s) of ∂Ω_u. `chain_starts` marks where each connected
/// chain begins in `points`.
#[derive(Debug, Clone, Default)]
pub struct FreeBoundaryCurve {
    pub points: Vec<FbPoint>,
    pub chain_starts: Vec<usize>,
}

impl FreeBoundaryCurve {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Max |residual| over non-degenerate D points, min residual over
    /// K points, and the degenerate count.
    pub fn residual_stats(&self) -> ResidualStats {
        let mut stats = ResidualStats {
            max_d: 0.0,
            min_k: f64::INFINITY,
            degenerate: 0,
            d_points: 0,
            k_points: 0,
        };
        for p in &self.points {
            if p.boundary_attached || p.wall_zone {
                continue;
            }
            if p.degenerate {
                stats.degenerate += 1;
                continue;
            }
            match p.region {
                FbRegion::D => {
                    stats.d_points += 1;
                    stats.max_d = stats.max_d.max(p.residual.abs());
                }
                FbRegion::K => {
                    stats.k_points += 1;
                    stats.min_k = stats.min_k.min(p.residual);
                }
            }
        }
        if stats.k_points == 0 {
            stats.min_k = 0.0;
        }
        stats
    }
}

/// Residual summary of one front.
#[derive(Debug, Clone, Copy)]
pub struct ResidualStats {
    pub max_d: f64,
    pub min_k: f64,
    pub degenerate: usize,
    pub d_points: usize,
    pub k_points: usize,
}

/// Level-set trial state: Ω = {phi > 0}, u harmonic there and zero outside.
#[derive(Debug, Clone)]
pub struct TrialState {
    pub u: ScalarField,
    pub phi: ScalarField,
    pub iteration: usize,
    /// Front displacement of the last step in grid units (fraction of h).
    pub last_displacement: f64,
}

/// Per-step record kept for the convergence history.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub displacement: f64,
    pub max_speed: f64,
    pub max_residual_d: f64,
    pub min_residual_k: f64,
    pub degenerate: usize,
}

/// Converged (or final) output of [`solve_stationary`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub u: ScalarField,
    pub fb: FreeBoundaryCurve,
    pub converged: bool,
    pub iterations: usize,
    pub stats: ResidualStats,
    pub history: Vec<StepRecord>,
    pub elliptic_iterations: usize,
}

/// Knobs of the trial fixed point.
#[derive(Debug, Clone)]
pub struct FbConfig {
    /// Free boundary residual tolerance on D points (and −tolerance bound on
    /// K points).
    pub front_tolerance: f64,
    pub max_steps: usize,
    /// CFL fraction of h per step.
    pub cfl: f64,
    /// Level-set redistancing period.
    pub reinit_every: usize,
    /// Gradient floor ε_g = mult·h; below it the condition is degenerate.
    pub gradient_floor_mult: f64,
    /// Converged when displacement < displacement_tol·h ...
    pub displacement_tol: f64,
    /// ... for this many consecutive steps and the residual criteria hold.
    pub quiet_steps: usize,
    /// Front-mode stability cap: dt ≤ stability_factor·h/max|∇u|. The motion
    /// law amplifies front perturbations of wavenumber k at rate ~2|∇u|k, so
    /// explicit stepping needs dt below h/(π·|∇u|).
    pub stability_factor: f64,
    pub elliptic: SolveConfig,
}

impl Default for FbConfig {
    fn default() -> Self {
        Self {
            front_tolerance: 1e-2,
            max_steps: 2000,
            cfl: 0.45,
            reinit_every: 20,
            gradient_floor_mult: 10.0,
            displacement_tol: 0.01,
            quiet_steps: 10,
            stability_factor: 0.4,
            elliptic: SolveConfig::default(),
        }
    }
}

/// Pointwise minimum of two supersolutions; the class is closed under it.
pub fn inf_supersolutions(w1: &ScalarField, w2: &ScalarField) -> Result<ScalarField> {
    w1.same_grid(w2)?;
    let values = w1.values().iter().zip(w2.values()).map(|(a, b)| a.min(*b)).collect();
    ScalarField::from_values(w1.grid, values)
}

/// Replaces w by the function harmonic in Ω_w ∩ D with w's boundary values,
/// extended by zero outside: the harmonic replacement that maps admissible
/// supersolutions into the modified class without enlarging them.
pub fn harmonic_replacement(
    w: &ScalarField,
    mask: &RegionMask,
    cfg: &SolveConfig,
) -> Result<ScalarField> {
    let grid = w.grid;
    let mut solve = vec![false; grid.node_count()];
    for idx in 0..grid.node_count() {
        solve[idx] = mask.tag(idx) == NodeTag::Accessible && w.get(idx) > 0.0;
    }
    let (out, _) = elliptic::solve_masked(
        &crate::geometry::CoeffField::Identity,
        &grid,
        &solve,
        w,
        None,
        cfg,
        Some(w),
    )?;
    Ok(out)
}

// ---------------------------------------------------------------------
// Front extraction
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct EdgeKey {
    i: usize,
    j: usize,
    horizontal: bool,
}

struct Crossing {
    pos: [f64; 2],
    /// Grid index of the positive endpoint.
    positive_node: (usize, usize),
    links: Vec<usize>,
}

fn admissible_endpoint(tag: NodeTag) -> bool {
    tag != NodeTag::Exterior
}

/// Sub-grid zero crossing on the edge from positive node a to nonpositive
/// node b, by linear extension of u from the positive side. Falls back to
/// sample interpolation when no second positive node backs the edge.
fn crossing_fraction(u: &ScalarField, a: (usize, usize), b: (usize, usize)) -> f64 {
    let ua = u.at(a.0, a.1);
    let ub = u.at(b.0, b.1);
    debug_assert!(ua > 0.0 && ub <= 0.0);
    let di = a.0 as isize - b.0 as isize;
    let dj = a.1 as isize - b.1 as isize;
    let ci = a.0 as isize + di;
    let cj = a.1 as isize + dj;
    let g = u.grid;
    if ci >= 0 && cj >= 0 && (ci as usize) < g.nx && (cj as usize) < g.ny {
        let uc = u.at(ci as usize, cj as usize);
        if uc > ua {
            // linear profile through (c, a) hits zero at ua/(uc − ua) past a
            return (ua / (uc - ua)).clamp(0.0, 1.0);
        }
    }
    if ub < 0.0 {
        (ua / (ua - ub)).clamp(0.0, 1.0)
    } else {
        1.0
    }
}

/// Extracts ∂Ω_u as ordered chains of edge crossings with per-point normal,
/// gradient, residual and region tag. Empty positivity set gives an empty
/// curve; a solution positive throughout D yields a curve collapsed on ∂K.
pub fn extract_free_boundary(
    u: &ScalarField,
    mask: &RegionMask,
    geometry: &GeometrySpec,
    gradient_floor: f64,
) -> FreeBoundaryCurve {
    let grid = u.grid;
    let mut crossings: Vec<Crossing> = Vec::new();
    let mut by_edge: std::collections::HashMap<EdgeKey, usize> = std::collections::HashMap::new();

    let mut scan_edge = |i: usize, j: usize, horizontal: bool| {
        let (i2, j2) = if horizontal { (i + 1, j) } else { (i, j + 1) };
        let t1 = mask.tag(grid.idx(i, j));
        let t2 = mask.tag(grid.idx(i2, j2));
        if !admissible_endpoint(t1) || !admissible_endpoint(t2) {
            return;
        }
        if t1 != NodeTag::Accessible && t2 != NodeTag::Accessible {
            return;
        }
        let u1 = u.at(i, j);
        let u2 = u.at(i2, j2);
        let (pos_node, neg_node) = if u1 > 0.0 && u2 <= 0.0 {
            ((i, j), (i2, j2))
        } else if u2 > 0.0 && u1 <= 0.0 {
            ((i2, j2), (i, j))
        } else {
            return;
        };
        let t = crossing_fraction(u, pos_node, neg_node);
        let pa = grid.point(pos_node.0, pos_node.1);
        let pb = grid.point(neg_node.0, neg_node.1);
        let pos = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
        let id = crossings.len();
        crossings.push(Crossing { pos, positive_node: pos_node, links: Vec::new() });
        by_edge.insert(EdgeKey { i, j, horizontal }, id);
    };

    for j in 0..grid.ny {
        for i in 0..grid.nx {
            if i + 1 < grid.nx {
                scan_edge(i, j, true);
            }
            if j + 1 < grid.ny {
                scan_edge(i, j, false);
            }
        }
    }

    // connect crossings cell by cell (marching squares, saddles resolved by
    // the cell-center average)
    fn link(a: usize, b: usize, crossings: &mut [Crossing]) {
        crossings[a].links.push(b);
        crossings[b].links.push(a);
    }
    for j in 0..grid.ny - 1 {
        for i in 0..grid.nx - 1 {
            let bottom = by_edge.get(&EdgeKey { i, j, horizontal: true }).copied();
            let top = by_edge.get(&EdgeKey { i, j: j + 1, horizontal: true }).copied();
            let left = by_edge.get(&EdgeKey { i, j, horizontal: false }).copied();
            let right = by_edge.get(&EdgeKey { i: i + 1, j, horizontal: false }).copied();
            let present: Vec<usize> =
                [bottom, top, left, right].iter().flatten().copied().collect();
            match present.len() {
                2 => link(present[0], present[1], &mut crossings),
                4 => {
                    let center = 0.25
                        * (u.at(i, j) + u.at(i + 1, j) + u.at(i, j + 1) + u.at(i + 1, j + 1));
                    let c00_positive = u.at(i, j) > 0.0;
                    let through_center = center > 0.0;
                    let (b, t, l, r) =
                        (bottom.unwrap(), top.unwrap(), left.unwrap(), right.unwrap());
                    if c00_positive == through_center {
                        link(b, r, &mut crossings);
                        link(t, l, &mut crossings);
                    } else {
                        link(b, l, &mut crossings);
                        link(t, r, &mut crossings);
                    }
                }
                _ => {}
            }
        }
    }

    // walk chains: open ones first (single-link endpoints), then cycles
    let n = crossings.len();
    let mut visited = vec![false; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut chain_starts = Vec::new();
    fn walk(start: usize, crossings: &[Crossing], visited: &mut [bool], order: &mut Vec<usize>) {
        let mut prev = usize::MAX;
        let mut cur = start;
        loop {
            visited[cur] = true;
            order.push(cur);
            let next =
                crossings[cur].links.iter().copied().find(|&l| l != prev && !visited[l]);
            match next {
                Some(nx) => {
                    prev = cur;
                    cur = nx;
                }
                None => break,
            }
        }
    }
    for start in 0..n {
        if !visited[start] && crossings[start].links.len() <= 1 {
            chain_starts.push(order.len());
            walk(start, &crossings, &mut visited, &mut order);
        }
    }
    for start in 0..n {
        if !visited[start] {
            chain_starts.push(order.len());
            walk(start, &crossings, &mut visited, &mut order);
        }
    }

    let v = geometry.direction;
    let mut points = Vec::with_capacity(order.len());
    for id in order {
        let c = &crossings[id];
        let grad = gradient_at(u, c.positive_node, GradientSide::OneSidedFromPositive)
            .unwrap_or([0.0, 0.0]);
        let grad_norm = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
        let degenerate = grad_norm < gradient_floor;
        let normal = if grad_norm > 0.0 && !degenerate {
            [grad[0] / grad_norm, grad[1] / grad_norm]
        } else {
            [0.0, 0.0]
        };
        let residual = grad_norm * grad_norm - (grad[0] * v[0] + grad[1] * v[1]);
        let obstacle_sd = geometry.obstacle.signed_distance(c.pos);
        let region = match obstacle_sd {
            Some(d) if d.abs() <= grid.h => FbRegion::K,
            _ => FbRegion::D,
        };
        let on_obstacle = matches!(obstacle_sd, Some(d) if d.abs() <= 0.3 * grid.h);
        let wall_distance = geometry.box_shape.signed_distance(c.pos).abs();
        let boundary_attached = wall_distance < 0.9 * grid.h;
        let wall_zone = wall_distance < 2.2 * grid.h;
        points.push(FbPoint {
            pos: c.pos,
            normal,
            grad,
            grad_norm,
            residual,
            region,
            on_obstacle,
            degenerate,
            boundary_attached,
            wall_zone,
        });
    }
    FreeBoundaryCurve { points, chain_starts }
}

/// Per-point residual |∇u|² − ∇u·V of an extracted curve against a possibly
/// different drift V.
pub fn fb_residual(fb: &FreeBoundaryCurve, v: [f64; 2]) -> Vec<f64> {
    fb.points
        .iter()
        .map(|p| p.grad_norm * p.grad_norm - (p.grad[0] * v[0] + p.grad[1] * v[1]))
        .collect()
}

// ---------------------------------------------------------------------
// Level-set machinery
// ---------------------------------------------------------------------

const BAND_RADIUS_CELLS: isize = 6;
const STAMP_RADIUS_CELLS: isize = 12;

/// Signed distance to the point set, exact within the stamp radius and
/// saturated beyond it; the sign is inherited from `sign_source`.
fn redistance(points: &[[f64; 2]], sign_source: &ScalarField) -> ScalarField {
    let grid = sign_source.grid;
    let cap = STAMP_RADIUS_CELLS as f64 * grid.h;
    let mut dist = vec![cap; grid.node_count()];
    for p in points {
        let i0 = ((p[0] - grid.origin[0]) / grid.h).round() as isize;
        let j0 = ((p[1] - grid.origin[1]) / grid.h).round() as isize;
        for dj in -STAMP_RADIUS_CELLS..=STAMP_RADIUS_CELLS {
            for di in -STAMP_RADIUS_CELLS..=STAMP_RADIUS_CELLS {
                let i = i0 + di;
                let j = j0 + dj;
                if i < 0 || j < 0 || i >= grid.nx as isize || j >= grid.ny as isize {
                    continue;
                }
                let q = grid.point(i as usize, j as usize);
                let d = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
                let idx = grid.idx(i as usize, j as usize);
                if d < dist[idx] {
                    dist[idx] = d;
                }
            }
        }
    }
    let values = dist
        .iter()
        .zip(sign_source.values())
        .map(|(d, s)| if *s > 0.0 { *d } else { -*d })
        .collect();
    ScalarField::from_values(grid, values).expect("sized to grid")
}

/// Zero-crossing positions of any nodal field by sample interpolation;
/// used for redistancing and for support boundaries.
pub fn zero_crossing_points(field: &ScalarField, mask: &RegionMask) -> Vec<[f64; 2]> {
    let grid = field.grid;
    let mut out = Vec::new();
    let mut scan = |a: (usize, usize), b: (usize, usize)| {
        if !admissible_endpoint(mask.tag(grid.idx(a.0, a.1)))
            || !admissible_endpoint(mask.tag(grid.idx(b.0, b.1)))
        {
            return;
        }
        let fa = field.at(a.0, a.1);
        let fb = field.at(b.0, b.1);
        if (fa > 0.0) == (fb > 0.0) {
            return;
        }
        let t = if fa != fb { (fa / (fa - fb)).clamp(0.0, 1.0) } else { 0.5 };
        let pa = grid.point(a.0, a.1);
        let pb = grid.point(b.0, b.1);
        out.push([pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]);
    };
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            if i + 1 < grid.nx {
                scan((i, j), (i + 1, j));
            }
            if j + 1 < grid.ny {
                scan((i, j), (i, j + 1));
            }
        }
    }
    out
}

fn clamp_phi(phi: &mut ScalarField, mask: &RegionMask, datum: &dyn Fn([f64; 2]) -> f64) {
    let grid = phi.grid;
    let half = 0.5 * grid.h;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let idx = grid.idx(i, j);
            match mask.tag(idx) {
                // the front may touch the obstacle but never enter it
                NodeTag::Obstacle => {
                    let v = phi.get(idx).min(0.0);
                    phi.set(i, j, v);
                }
                // nodes carrying positive datum stay inside Ω, zero-datum
                // boundary stays outside
                NodeTag::BoxBoundary => {
                    let v = if datum(grid.point(i, j)) > 1e-12 {
                        phi.get(idx).max(half)
                    } else {
                        phi.get(idx).min(-half)
                    };
                    phi.set(i, j, v);
                }
                _ => {}
            }
        }
    }
}

/// Solves u harmonic on {phi > 0} ∩ D with the datum on ∂B, zero Dirichlet
/// at sub-grid front crossings (cut edges from phi) and on the obstacle.
fn solve_on_positive_set(
    phi: &ScalarField,
    mask: &RegionMask,
    datum: &dyn Fn([f64; 2]) -> f64,
    cfg: &SolveConfig,
    warm: Option<&ScalarField>,
) -> Result<(ScalarField, SolveStats)> {
    let grid = phi.grid;
    let mut solve = vec![false; grid.node_count()];
    let mut fixed = ScalarField::zeros(grid);
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let idx = grid.idx(i, j);
            match mask.tag(idx) {
                NodeTag::Accessible if phi.get(idx) > 0.0 => solve[idx] = true,
                NodeTag::BoxBoundary => fixed.set(i, j, datum(grid.point(i, j))),
                _ => {}
            }
        }
    }
    let mut cuts = CutMap::new();
    let dirs: [(u8, isize, isize); 4] =
        [(DIR_W, -1, 0), (DIR_E, 1, 0), (DIR_S, 0, -1), (DIR_N, 0, 1)];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let idx = grid.idx(i, j);
            if !solve[idx] {
                continue;
            }
            let pp = phi.get(idx);
            for (dir, di, dj) in dirs {
                let ni = i as isize + di;
                let nj = j as isize + dj;
                if ni < 0 || nj < 0 || ni >= grid.nx as isize || nj >= grid.ny as isize {
                    continue;
                }
                let nidx = grid.idx(ni as usize, nj as usize);
                if solve[nidx] || mask.tag(nidx) == NodeTag::BoxBoundary {
                    continue;
                }
                // neighbor is outside the positivity set: the front crosses
                // this edge at fraction phi_P/(phi_P − phi_Q)
                let pq = phi.get(nidx);
                let theta = if pq < pp { (pp / (pp - pq)).clamp(0.0, 1.0) } else { 1.0 };
                cuts.insert(idx, dir, theta, 0.0);
            }
        }
    }
    elliptic::solve_masked(
        &crate::geometry::CoeffField::Identity,
        &grid,
        &solve,
        &fixed,
        Some(&cuts),
        cfg,
        warm,
    )
}

/// Removes positive cells starved of solution mass: at a healthy front the
/// nondegeneracy V·ν ≥ δ forces u ≳ δ·dist inside the positivity set, so a
/// node far from every front point with u far below δ·h belongs to a spurious
/// sliver (slivers pinched off between Dirichlet zeros decay exponentially
/// and would otherwise freeze as degenerate front debris).
fn prune_starved_cells(
    u: &mut ScalarField,
    phi: &mut ScalarField,
    mask: &RegionMask,
    front_distance: &[f64],
    delta: f64,
) {
    let grid = u.grid;
    let roundoff = 1e-12 * u.max_abs();
    let cap = BAND_RADIUS_CELLS as f64 * grid.h;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let idx = grid.idx(i, j);
            if mask.tag(idx) != NodeTag::Accessible || phi.get(idx) <= 0.0 {
                continue;
            }
            let d = front_distance[idx].min(cap);
            let starved = d > 0.75 * grid.h && u.get(idx) < 0.1 * delta * d;
            if starved || u.get(idx) <= roundoff {
                phi.set(i, j, (-0.5 * grid.h).min(phi.get(idx)));
                u.set(i, j, 0.0);
            }
        }
    }
}

/// Fills one-node holes and removes one-node islands of the sign field of
/// phi. Such speckles are sub-grid noise, but their crossings carry
/// contradictory normals and can lock the local dynamics into a limit cycle.
fn despeckle_phi(phi: &mut ScalarField, mask: &RegionMask) {
    let grid = phi.grid;
    let mut fixes: Vec<(usize, usize, f64)> = Vec::new();
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let idx = grid.idx(i, j);
            if mask.tag(idx) != NodeTag::Accessible {
                continue;
            }
            let here = phi.get(idx);
            let mut nb_pos = 0usize;
            let mut nb_all = 0usize;
            let mut nb_min_abs = f64::INFINITY;
            for (di, dj) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let ni = i as isize + di;
                let nj = j as isize + dj;
                if ni < 0 || nj < 0 || ni >= grid.nx as isize || nj >= grid.ny as isize {
                    continue;
                }
                let nidx = grid.idx(ni as usize, nj as usize);
                if mask.tag(nidx) == NodeTag::Exterior {
                    continue;
                }
                nb_all += 1;
                let v = phi.get(nidx);
                if v > 0.0 {
                    nb_pos += 1;
                }
                nb_min_abs = nb_min_abs.min(v.abs());
            }
            if nb_all < 3 {
                continue;
            }
            if here <= 0.0 && nb_pos == nb_all {
                fixes.push((i, j, 0.5 * nb_min_abs.max(0.25 * grid.h)));
            } else if here > 0.0 && nb_pos == 0 {
                fixes.push((i, j, -0.5 * nb_min_abs.max(0.25 * grid.h)));
            }
        }
    }
    for (i, j, v) in fixes {
        phi.set(i, j, v);
    }
}

fn upwind_gradient_norm(phi: &ScalarField, i: usize, j: usize, outward: bool) -> f64 {
    let g = phi.grid;
    let p = phi.at(i, j);
    // reflective handling at the rim: reuse the available one-sided
    // difference so the norm is not underestimated along walls
    let dxm_o = if i > 0 { Some((p - phi.at(i - 1, j)) / g.h) } else { None };
    let dxp_o = if i + 1 < g.nx { Some((phi.at(i + 1, j) - p) / g.h) } else { None };
    let dym_o = if j > 0 { Some((p - phi.at(i, j - 1)) / g.h) } else { None };
    let dyp_o = if j + 1 < g.ny { Some((phi.at(i, j + 1) - p) / g.h) } else { None };
    let dxm = dxm_o.or(dxp_o).unwrap_or(0.0);
    let dxp = dxp_o.or(dxm_o).unwrap_or(0.0);
    let dym = dym_o.or(dyp_o).unwrap_or(0.0);
    let dyp = dyp_o.or(dym_o).unwrap_or(0.0);
    let sq = |x: f64| x * x;
    if outward {
        (sq(dxm.max(0.0)) + sq(dxp.min(0.0)) + sq(dym.max(0.0)) + sq(dyp.min(0.0))).sqrt()
    } else {
        (sq(dxm.min(0.0)) + sq(dxp.max(0.0)) + sq(dym.min(0.0)) + sq(dyp.max(0.0))).sqrt()
    }
}

/// Motion law s = (|∇u|² − ∇u·V)/max(|∇u|, ε_g), with the obstacle and the
/// box wall acting as one-sided constraints: the front may retreat from them
/// but never advance into them. The gradient floor regularizes the
/// denominator at degenerate points; degeneracy affects the convergence
/// statistics, not the motion.
fn effective_speed(p: &FbPoint, eps_g: f64) -> f64 {
    let raw = p.residual / p.grad_norm.max(eps_g);
    if (p.boundary_attached || p.on_obstacle) && raw > 0.0 {
        0.0
    } else {
        raw
    }
}

/// Front speeds from geometric probes: the normal comes from the chain
/// tangent and |∇u| from two interpolated samples along it inside the
/// positive set, so the speed varies continuously as the front slides across
/// node rows (nodal one-sided stencils jump there and excite a grid-frequency
/// limit cycle). Falls back to the nodal speed where probing is impossible.
fn probe_speeds(
    u: &ScalarField,
    fb: &FreeBoundaryCurve,
    v: [f64; 2],
    eps_g: f64,
) -> Vec<f64> {
    let grid = u.grid;
    let h = grid.h;
    let n = fb.len();
    let mut speeds = vec![0.0f64; n];
    for (c, &start) in fb.chain_starts.iter().enumerate() {
        let end = fb.chain_starts.get(c + 1).copied().unwrap_or(n);
        for k in start..end {
            let p = &fb.points[k];
            let fallback = effective_speed(p, eps_g);
            let prev = if k > start { k - 1 } else { k };
            let next = if k + 1 < end { k + 1 } else { k };
            let tx = fb.points[next].pos[0] - fb.points[prev].pos[0];
            let ty = fb.points[next].pos[1] - fb.points[prev].pos[1];
            let tn = (tx * tx + ty * ty).sqrt();
            if tn < 1e-14 {
                speeds[k] = fallback;
                continue;
            }
            let mut nrm = [-ty / tn, tx / tn];
            // orient into the positive side
            let side = |sgn: f64| {
                crate::geometry::interpolate(
                    u,
                    [p.pos[0] + sgn * 0.5 * h * nrm[0], p.pos[1] + sgn * 0.5 * h * nrm[1]],
                )
                .unwrap_or(-1.0)
            };
            if side(1.0) < side(-1.0) {
                nrm = [-nrm[0], -nrm[1]];
            }
            let probe = |t: f64| {
                crate::geometry::interpolate(
                    u,
                    [p.pos[0] + t * h * nrm[0], p.pos[1] + t * h * nrm[1]],
                )
            };
            // both probes sit at least one cell inside the positive set, so
            // their interpolation cells are uncut and the estimate is exact
            // on linear profiles for any front offset
            let (a, b) = match (probe(1.0), probe(2.0)) {
                (Ok(a), Ok(b)) => (a, b),
                _ => {
                    speeds[k] = fallback;
                    continue;
                }
            };
            let g_est = (b - a) / h;
            if g_est <= 0.0 {
                speeds[k] = fallback;
                continue;
            }
            let vdotn = v[0] * nrm[0] + v[1] * nrm[1];
            let s = (g_est * g_est - g_est * vdotn) / g_est.max(eps_g);
            speeds[k] =
                if (p.boundary_attached || p.on_obstacle) && s > 0.0 { 0.0 } else { s };
        }
    }
    speeds
}

/// Outcome of one front step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: TrialState,
    pub record: StepRecord,
    /// Front extracted from the pre-step field (the one the speeds acted on).
    pub fb: FreeBoundaryCurve,
    pub elliptic: SolveStats,
}

/// Advances the level set one pseudo-time step with the outward normal speed
/// s = (|∇u|² − ∇u·V)/max(|∇u|, ε_g), extended constantly off the front, and
/// re-solves u on the new positivity set. The obstacle-node clamp keeps the
/// front from entering K; resting contact points keep their one-sided
/// positive residual without moving.
pub fn advance_front(
    state: &TrialState,
    dt: f64,
    geometry: &GeometrySpec,
    mask: &RegionMask,
    datum: &dyn Fn([f64; 2]) -> f64,
    cfg: &FbConfig,
) -> Result<StepOutcome> {
    let eps_g = cfg.gradient_floor_mult * state.u.grid.h;
    let fb = extract_free_boundary(&state.u, mask, geometry, eps_g);
    advance_front_with(fb, state, dt, geometry, mask, datum, cfg)
}

// advance with a pre-extracted curve of the current field, so the driver
// does not pay for extraction twice per step
fn advance_front_with(
    fb: FreeBoundaryCurve,
    state: &TrialState,
    dt: f64,
    geometry: &GeometrySpec,
    mask: &RegionMask,
    datum: &dyn Fn([f64; 2]) -> f64,
    cfg: &FbConfig,
) -> Result<StepOutcome> {
    let grid = state.u.grid;
    let eps_g = cfg.gradient_floor_mult * grid.h;

    // effective speed per front point, smoothed once along each chain to
    // damp the grid-frequency mode of the front
    let mut speeds: Vec<f64> = probe_speeds(&state.u, &fb, geometry.direction, eps_g);
    let starts = &fb.chain_starts;
    // weights keep a positive response at the alternating mode so it damps
    // itself instead of hiding from the dynamics
    let smoothed = {
        let mut out = speeds.clone();
        for (c, &start) in starts.iter().enumerate() {
            let end = starts.get(c + 1).copied().unwrap_or(speeds.len());
            for k in start + 1..end.saturating_sub(1) {
                out[k] = 0.2 * speeds[k - 1] + 0.6 * speeds[k] + 0.2 * speeds[k + 1];
            }
        }
        out
    };
    speeds = smoothed;
    // the one-sided constraints survive smoothing: outward pressure at a
    // wall or at resting contact is unrealizable (approach through the
    // near-obstacle band stays free; penetration is stopped by the
    // obstacle-node clamp)
    for (s, p) in speeds.iter_mut().zip(&fb.points) {
        if (p.boundary_attached || p.on_obstacle) && *s > 0.0 {
            *s = 0.0;
        }
    }
    // the displacement metric meters the free interior front: the wall
    // junction layer and the column-quantized contact line edge adjust in
    // cell-size events under one-sided constraints and would never quiet down
    let mut max_speed = 0.0f64;
    let mut cfl_speed = 0.0f64;
    for (s, p) in speeds.iter().zip(&fb.points) {
        cfl_speed = cfl_speed.max(s.abs());
        if !p.wall_zone && p.region == FbRegion::D {
            max_speed = max_speed.max(s.abs());
        }
    }
    if dt * cfl_speed > grid.h * (1.0 + 1e-12) {
        return Err(CoreError::Step(format!(
            "CFL violation: dt·max|s| = {:.3e} exceeds h = {:.3e}",
            dt * cfl_speed,
            grid.h
        )));
    }

    // constant extension of the speed onto the band around the front
    let mut best = vec![f64::INFINITY; grid.node_count()];
    let mut speed = vec![0.0f64; grid.node_count()];
    for (p, s) in fb.points.iter().zip(&speeds) {
        let i0 = ((p.pos[0] - grid.origin[0]) / grid.h).round() as isize;
        let j0 = ((p.pos[1] - grid.origin[1]) / grid.h).round() as isize;
        for dj in -BAND_RADIUS_CELLS..=BAND_RADIUS_CELLS {
            for di in -BAND_RADIUS_CELLS..=BAND_RADIUS_CELLS {
                let i = i0 + di;
                let j = j0 + dj;
                if i < 0 || j < 0 || i >= grid.nx as isize || j >= grid.ny as isize {
                    continue;
                }
                let q = grid.point(i as usize, j as usize);
                let d = ((q[0] - p.pos[0]).powi(2) + (q[1] - p.pos[1]).powi(2)).sqrt();
                let idx = grid.idx(i as usize, j as usize);
                if d < best[idx] {
                    best[idx] = d;
                    speed[idx] = *s;
                }
            }
        }
    }

    let mut phi = state.phi.clone();
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let idx = grid.idx(i, j);
            if best[idx].is_infinite() {
                continue;
            }
            let s = speed[idx];
            if s == 0.0 {
                continue;
            }
            let gn = upwind_gradient_norm(&state.phi, i, j, s > 0.0);
            let v = phi.get(idx) + dt * s * gn;
            phi.set(i, j, v);
        }
    }
    despeckle_phi(&mut phi, mask);
    clamp_phi(&mut phi, mask, datum);

    let next_iteration = state.iteration + 1;
    if cfg.reinit_every > 0 && next_iteration % cfg.reinit_every == 0 {
        let pts = zero_crossing_points(&phi, mask);
        if !pts.is_empty() {
            phi = redistance(&pts, &phi);
            clamp_phi(&mut phi, mask, datum);
        }
    }

    let (mut u, ell_stats) =
        solve_on_positive_set(&phi, mask, datum, &cfg.elliptic, Some(&state.u))?;
    prune_starved_cells(&mut u, &mut phi, mask, &best, geometry.delta);
    let stats = fb.residual_stats();
    let displacement = dt * max_speed / grid.h;
    let record = StepRecord {
        step: next_iteration,
        displacement,
        max_speed,
        max_residual_d: stats.max_d,
        min_residual_k: stats.min_k,
        degenerate: stats.degenerate,
    };
    Ok(StepOutcome {
        state: TrialState { u, phi, iteration: next_iteration, last_displacement: displacement },
        record,
        fb,
        elliptic: ell_stats,
    })
}

/// Initial trial state from the harmonic majorant H (the Dirichlet solution
/// with the datum on ∂B and zero on K): Ω⁰ = {H > 0}, an admissible
/// supersolution per the Perron construction.
pub fn initial_state(
    geometry: &GeometrySpec,
    mask: &RegionMask,
    datum: &dyn Fn([f64; 2]) -> f64,
    cfg: &FbConfig,
) -> Result<(TrialState, ScalarField)> {
    let majorant = harmonic_majorant(geometry, mask, datum, &cfg.elliptic)?;
    let mut phi = majorant.clone();
    clamp_phi(&mut phi, mask, datum);
    let pts = zero_crossing_points(&phi, mask);
    if !pts.is_empty() {
        phi = redistance(&pts, &phi);
        clamp_phi(&mut phi, mask, datum);
    }
    let (u, _) = solve_on_positive_set(&phi, mask, datum, &cfg.elliptic, Some(&majorant))?;
    Ok((TrialState { u, phi, iteration: 0, last_displacement: f64::INFINITY }, majorant))
}

/// The Dirichlet solution H in D with the datum on ∂B and zero on K; every
/// admissible supersolution (hence the converged u) stays below it.
pub fn harmonic_majorant(
    geometry: &GeometrySpec,
    mask: &RegionMask,
    datum: &dyn Fn([f64; 2]) -> f64,
    cfg: &SolveConfig,
) -> Result<ScalarField> {
    let (h, _) = elliptic::solve_dirichlet(&geometry.coeff, geometry, mask, datum, cfg)?;
    Ok(h)
}

/// Runs the trial fixed point until the front is stationary: displacement
/// below displacement_tol·h for quiet_steps consecutive steps and the
/// residual criteria hold. Non-convergence is reported through the
/// `converged` flag with the full residual history, never silently.
pub fn solve_stationary(
    geometry: &GeometrySpec,
    mask: &RegionMask,
    datum: &dyn Fn([f64; 2]) -> f64,
    cfg: &FbConfig,
) -> Result<Solution> {
    solve_stationary_from(geometry, mask, datum, cfg, None)
}

/// Coarse-to-fine continuation: solves on successively refined grids,
/// carrying the level set up by interpolation. The physics is
/// resolution-independent, so the coarse stages absorb the long transit and
/// the fine stage only polishes, which keeps large runs inside their time
/// budgets. Returns the solution on the last grid.
pub fn solve_stationary_continued(
    geometry: &GeometrySpec,
    resolutions: &[usize],
    datum: &dyn Fn([f64; 2]) -> f64,
    cfg: &FbConfig,
) -> Result<(Solution, RegionMask)> {
    if resolutions.is_empty() {
        return Err(CoreError::InvalidConfig("continuation needs at least one resolution".into()));
    }
    let mut carried_phi: Option<ScalarField> = None;
    let mut out: Option<(Solution, RegionMask)> = None;
    for &res in resolutions {
        let grid = crate::geometry::build_grid(&geometry.box_shape, res)?;
        let mask = crate::geometry::classify_nodes(&grid, geometry)?;
        let initial = carried_phi.take().map(|coarse| {
            ScalarField::from_fn(grid, |p| {
                crate::geometry::interpolate(&coarse, p).unwrap_or(-grid.h)
            })
        });
        let sol = solve_stationary_from(geometry, &mask, datum, cfg, initial)?;
        let pts = zero_crossing_points(&sol.u, &mask);
        let mut phi = ScalarField::from_values(
            grid,
            sol.u.values().iter().map(|v| if *v > 0.0 { 1.0 } else { -1.0 }).collect(),
        )?;
        if !pts.is_empty() {
            phi = redistance(&pts, &phi);
        }
        carried_phi = Some(phi);
        out = Some((sol, mask));
    }
    Ok(out.expect("nonempty resolutions"))
}

/// Same as [`solve_stationary`] but from a caller-supplied initial level set
/// (used for the nested-initial-set comparison checks).
pub fn solve_stationary_from(
    geometry: &GeometrySpec,
    mask: &RegionMask,
    datum: &dyn Fn([f64; 2]) -> f64,
    cfg: &FbConfig,
    initial_phi: Option<ScalarField>,
) -> Result<Solution> {
    geometry.validate()?;
    let grid = mask.grid;
    let mut state = match initial_phi {
        None => initial_state(geometry, mask, datum, cfg)?.0,
        Some(mut phi) => {
            phi.same_grid(&ScalarField::zeros(grid))?;
            clamp_phi(&mut phi, mask, datum);
            let (u, _) = solve_on_positive_set(&phi, mask, datum, &cfg.elliptic, None)?;
            TrialState { u, phi, iteration: 0, last_displacement: f64::INFINITY }
        }
    };

    let eps_g = cfg.gradient_floor_mult * grid.h;
    let mut history = Vec::new();
    let mut quiet = 0usize;
    let mut speed_scale = 0.0f64;
    let mut elliptic_total = 0usize;
    let mut converged = false;

    for _ in 0..cfg.max_steps {
        // freeze the time scale to the largest speed seen so far, so the
        // displacement criterion measures genuine front decay rather than
        // an adaptive dt shrinking
        let fb_now = extract_free_boundary(&state.u, mask, geometry, eps_g);
        // dt honors the fastest advected point anywhere; the convergence
        // metric later filters the wall junction layer
        let mut max_speed = 0.0f64;
        for s in probe_speeds(&state.u, &fb_now, geometry.direction, eps_g) {
            max_speed = max_speed.max(s.abs());
        }
        let mut grad_scale = eps_g;
        for p in &fb_now.points {
            if !p.degenerate && !p.boundary_attached {
                grad_scale = grad_scale.max(p.grad_norm);
            }
        }
        speed_scale = speed_scale.max(max_speed).max(1e-12);
        let dt =
            (cfg.cfl * grid.h / speed_scale).min(cfg.stability_factor * grid.h / grad_scale);

        let outcome = advance_front_with(fb_now, &state, dt, geometry, mask, datum, cfg)?;
        elliptic_total += outcome.elliptic.iterations;
        history.push(outcome.record);
        state = outcome.state;

        let rec = history.last().unwrap();
        let residual_ok = rec.max_residual_d <= cfg.front_tolerance
            && rec.min_residual_k >= -cfg.front_tolerance;
        if rec.displacement < cfg.displacement_tol && residual_ok {
            quiet += 1;
            if quiet >= cfg.quiet_steps {
                converged = true;
                break;
            }
        } else {
            quiet = 0;
        }
    }

    let fb = extract_free_boundary(&state.u, mask, geometry, eps_g);
    let stats = fb.residual_stats();
    Ok(Solution {
        u: state.u,
        fb,
        converged,
        iterations: state.iteration,
        stats,
        history,
        elliptic_iterations: elliptic_total,
    })
}
