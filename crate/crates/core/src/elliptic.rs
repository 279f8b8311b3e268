//! Deterministic iterative solver for div(A∇u) = 0 with Dirichlet data and,
//! on flat bottom segments {x₂ = const}, oblique conditions ∇u·W = k·u
//! (k = 0 is the pure oblique derivative condition).
//!
//! The baseline is red-black Gauss-Seidel with over-relaxation. Diagonal
//! coefficient fields use the 5-point flux stencil and support sub-grid
//! Dirichlet conditions on cut edges (Shortley-Weller form, second order);
//! full matrices use the 9-point conservative face-flux stencil. Updates are
//! collected per color and applied in a second phase, so the converged result
//! does not depend on the traversal order within a color.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::geometry::{
    BoxShape, CoeffField, GeometrySpec, Grid, NodeTag, RegionMask, ScalarField,
};

/// Direction indices for cut edges: west, east, south, north.
pub const DIR_W: u8 = 0;
pub const DIR_E: u8 = 1;
pub const DIR_S: u8 = 2;
pub const DIR_N: u8 = 3;

const DIR_OFFSETS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Sub-grid Dirichlet condition on the edge from a solve node towards one of
/// its four neighbors: the value is imposed at fraction `theta` ∈ (0, 1] of
/// the edge.
#[derive(Debug, Clone, Copy)]
pub struct Cut {
    pub theta: f64,
    pub value: f64,
}

/// Sparse map of cut edges keyed by (node index, direction).
#[derive(Debug, Clone, Default)]
pub struct CutMap {
    cuts: HashMap<(usize, u8), Cut>,
}

impl CutMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, node: usize, dir: u8, theta: f64, value: f64) {
        // tiny fractions pin the node to the boundary value; keep theta
        // bounded away from zero only far enough for finite arithmetic
        let theta = theta.max(1e-9).min(1.0);
        self.cuts.insert((node, dir), Cut { theta, value });
    }

    pub fn get(&self, node: usize, dir: u8) -> Option<Cut> {
        self.cuts.get(&(node, dir)).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cuts.len()
    }
}

/// Iteration parameters. `relaxation = None` picks the SOR factor
/// 2/(1 + sin(π/(n−1))) from the grid size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub relaxation: Option<f64>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        // tolerance two orders below the O(h²) truncation error at desk
        // resolutions (h ≥ 1/512)
        Self { tolerance: 1e-8, max_iterations: 200_000, relaxation: None }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(CoreError::InvalidConfig("tolerance must be positive".into()));
        }
        if self.max_iterations < 1 {
            return Err(CoreError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if let Some(w) = self.relaxation {
            if !(w > 0.0 && w < 2.0) {
                return Err(CoreError::InvalidConfig(format!(
                    "relaxation factor {w} outside (0, 2)"
                )));
            }
        }
        Ok(())
    }

    fn omega(&self, grid: &Grid, diagonal: bool) -> f64 {
        match self.relaxation {
            Some(w) => w,
            None => {
                let n = grid.nx.max(grid.ny) as f64;
                let w = 2.0 / (1.0 + (std::f64::consts::PI / (n - 1.0)).sin());
                // the 9-point cross terms couple nodes of equal color; stay
                // conservative there
                if diagonal {
                    w
                } else {
                    w.min(1.5)
                }
            }
        }
    }
}

/// Counters reported back to the caller (and into run reports).
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub final_residual: f64,
}

// Per-node 5-point stencil assembled once per solve.
struct Stencil5 {
    node: u32,
    nb: [u32; 4],
    cut_val: [f64; 4],
    w: [f64; 4],
    inv_diag: f64,
    // cut stencils are not symmetric; over-relaxing them can destabilize the
    // sweep, so they run at ω = 1
    has_cut: bool,
    // residual scale factor: maps the cut-inflated residual back to the
    // uncut operator scale so the tolerance keeps one meaning everywhere
    res_scale: f64,
}

// below this edge fraction the boundary value sits numerically on the node;
// pin it there instead of building a near-singular stencil
const THETA_PIN: f64 = 1e-6;

const NO_NODE: u32 = u32::MAX;

fn face_coeff(coeff: &CoeffField, a_idx: usize, b_idx: usize, comp: usize) -> f64 {
    0.5 * (coeff.at(a_idx)[comp] + coeff.at(b_idx)[comp])
}

fn build_stencils5(
    grid: &Grid,
    coeff: &CoeffField,
    solve: &[bool],
    cuts: Option<&CutMap>,
) -> Result<Vec<Stencil5>> {
    let h2 = grid.h * grid.h;
    let mut out = Vec::new();
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let idx = grid.idx(i, j);
            if !solve[idx] {
                continue;
            }
            // fractions and endpoint values per direction
            let mut theta = [1.0f64; 4];
            let mut nb = [NO_NODE; 4];
            let mut cut_val = [0.0f64; 4];
            let mut a = [0.0f64; 4];
            let mut has_cut = false;
            for dir in 0..4u8 {
                let (di, dj) = DIR_OFFSETS[dir as usize];
                let ni = i as isize + di;
                let nj = j as isize + dj;
                let comp = if dir < 2 { 0 } else { 2 }; // a11 or a22
                if let Some(cut) = cuts.and_then(|c| c.get(idx, dir)) {
                    theta[dir as usize] = cut.theta;
                    cut_val[dir as usize] = cut.value;
                    a[dir as usize] = coeff.at(idx)[comp];
                    has_cut = true;
                } else {
                    if ni < 0 || nj < 0 || ni >= grid.nx as isize || nj >= grid.ny as isize {
                        return Err(CoreError::OutOfDomain(format!(
                            "solve node ({i}, {j}) has no neighbor and no cut in direction {dir}"
                        )));
                    }
                    let nidx = grid.idx(ni as usize, nj as usize);
                    nb[dir as usize] = nidx as u32;
                    a[dir as usize] = face_coeff(coeff, idx, nidx, comp);
                }
            }
            let tightest = (0..4).min_by(|&p, &q| theta[p].total_cmp(&theta[q])).unwrap();
            if theta[tightest] < THETA_PIN {
                let pin = cut_val[tightest];
                out.push(Stencil5 {
                    node: idx as u32,
                    nb: [NO_NODE; 4],
                    cut_val: [pin, 0.0, 0.0, 0.0],
                    w: [4.0 / h2, 0.0, 0.0, 0.0],
                    inv_diag: -0.25 * h2,
                    has_cut: true,
                    res_scale: 1.0,
                });
                continue;
            }
            let mut w = [0.0f64; 4];
            for axis in 0..2 {
                let lo = 2 * axis;
                let hi = 2 * axis + 1;
                let sum = theta[lo] + theta[hi];
                w[lo] = 2.0 * a[lo] / (theta[lo] * sum * h2);
                w[hi] = 2.0 * a[hi] / (theta[hi] * sum * h2);
            }
            let diag = -(w[0] + w[1] + w[2] + w[3]);
            let uncut_diag = (a[0] + a[1] + a[2] + a[3]) / h2;
            out.push(Stencil5 {
                node: idx as u32,
                nb,
                cut_val,
                w,
                inv_diag: 1.0 / diag,
                has_cut,
                res_scale: (uncut_diag / diag.abs()).min(1.0),
            });
        }
    }
    Ok(out)
}

#[inline]
fn residual5(s: &Stencil5, u: &[f64]) -> f64 {
    let up = u[s.node as usize];
    let mut r = 0.0;
    for d in 0..4 {
        let und = if s.nb[d] == NO_NODE { s.cut_val[d] } else { u[s.nb[d] as usize] };
        r += s.w[d] * (und - up);
    }
    r
}

// 9-point conservative residual of div(A∇u); needs the full 3x3 neighborhood.
#[inline]
fn residual9(grid: &Grid, coeff: &CoeffField, u: &[f64], i: usize, j: usize) -> f64 {
    let h = grid.h;
    let idx = grid.idx(i, j);
    let ie = grid.idx(i + 1, j);
    let iw = grid.idx(i - 1, j);
    let inn = grid.idx(i, j + 1);
    let is = grid.idx(i, j - 1);
    let ine = grid.idx(i + 1, j + 1);
    let inw = grid.idx(i - 1, j + 1);
    let ise = grid.idx(i + 1, j - 1);
    let isw = grid.idx(i - 1, j - 1);

    let dx_e = (u[ie] - u[idx]) / h;
    let dx_w = (u[idx] - u[iw]) / h;
    let dy_n = (u[inn] - u[idx]) / h;
    let dy_s = (u[idx] - u[is]) / h;
    let dy_e = (u[inn] + u[ine] - u[is] - u[ise]) / (4.0 * h);
    let dy_w = (u[inn] + u[inw] - u[is] - u[isw]) / (4.0 * h);
    let dx_n = (u[ie] + u[ine] - u[iw] - u[inw]) / (4.0 * h);
    let dx_s = (u[ie] + u[ise] - u[iw] - u[isw]) / (4.0 * h);

    let a11_e = face_coeff(coeff, idx, ie, 0);
    let a11_w = face_coeff(coeff, idx, iw, 0);
    let a12_e = face_coeff(coeff, idx, ie, 1);
    let a12_w = face_coeff(coeff, idx, iw, 1);
    let a12_n = face_coeff(coeff, idx, inn, 1);
    let a12_s = face_coeff(coeff, idx, is, 1);
    let a22_n = face_coeff(coeff, idx, inn, 2);
    let a22_s = face_coeff(coeff, idx, is, 2);

    ((a11_e * dx_e + a12_e * dy_e) - (a11_w * dx_w + a12_w * dy_w)
        + (a12_n * dx_n + a22_n * dy_n)
        - (a12_s * dx_s + a22_s * dy_s))
        / h
}

/// General masked solve: updates nodes where `solve` is true, holds all other
/// nodes at the values of `fixed`. `cuts` (diagonal coefficients only)
/// replace neighbor reads by sub-grid Dirichlet values.
pub fn solve_masked(
    coeff: &CoeffField,
    grid: &Grid,
    solve: &[bool],
    fixed: &ScalarField,
    cuts: Option<&CutMap>,
    cfg: &SolveConfig,
    initial: Option<&ScalarField>,
) -> Result<(ScalarField, SolveStats)> {
    cfg.validate()?;
    coeff.spd_range(grid.node_count())?;
    if solve.len() != grid.node_count() {
        return Err(CoreError::ShapeMismatch("solve mask length != node count".into()));
    }
    let diagonal = coeff.is_diagonal();
    if !diagonal && cuts.map(|c| !c.is_empty()).unwrap_or(false) {
        return Err(CoreError::Coefficient(
            "cut-cell treatment requires a diagonal coefficient field".into(),
        ));
    }

    let mut u = fixed.clone();
    if let Some(init) = initial {
        init.same_grid(fixed)?;
        for idx in 0..grid.node_count() {
            if solve[idx] {
                u.values_mut()[idx] = init.values()[idx];
            }
        }
    }

    let omega = cfg.omega(grid, diagonal);

    if diagonal {
        let stencils = build_stencils5(grid, coeff, solve, cuts)?;
        if stencils.is_empty() {
            return Ok((u, SolveStats::default()));
        }
        // red-black partition by node parity
        let mut colors: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (s_idx, s) in stencils.iter().enumerate() {
            let n = s.node as usize;
            let parity = (n % grid.nx + n / grid.nx) % 2;
            colors[parity].push(s_idx);
        }
        let mut scratch: Vec<f64> = Vec::new();
        for it in 1..=cfg.max_iterations {
            let mut sweep_max = 0.0f64;
            for color in &colors {
                scratch.clear();
                for &s_idx in color {
                    let s = &stencils[s_idx];
                    let r = residual5(s, u.values());
                    sweep_max = sweep_max.max(r.abs() * s.res_scale);
                    let w = if s.has_cut { 1.0 } else { omega };
                    scratch.push(u.values()[s.node as usize] - w * r * s.inv_diag);
                }
                for (k, &s_idx) in color.iter().enumerate() {
                    u.values_mut()[stencils[s_idx].node as usize] = scratch[k];
                }
            }
            if sweep_max <= cfg.tolerance {
                let final_res = stencils
                    .iter()
                    .map(|s| residual5(s, u.values()).abs() * s.res_scale)
                    .fold(0.0, f64::max);
                if final_res <= cfg.tolerance {
                    return Ok((u, SolveStats { iterations: it, final_residual: final_res }));
                }
            }
        }
        let final_res = stencils
            .iter()
            .map(|s| residual5(s, u.values()).abs() * s.res_scale)
            .fold(0.0, f64::max);
        Err(CoreError::Convergence { iterations: cfg.max_iterations, residual: final_res })
    } else {
        // 9-point path: every solve node needs its full 3x3 neighborhood
        let mut nodes: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                if !solve[grid.idx(i, j)] {
                    continue;
                }
                if i == 0 || j == 0 || i + 1 == grid.nx || j + 1 == grid.ny {
                    return Err(CoreError::OutOfDomain(format!(
                        "9-point solve node ({i}, {j}) touches the grid rim"
                    )));
                }
                nodes[(i + j) % 2].push((i, j));
            }
        }
        if nodes[0].is_empty() && nodes[1].is_empty() {
            return Ok((u, SolveStats::default()));
        }
        let h2 = grid.h * grid.h;
        let diag_at = |i: usize, j: usize| -> f64 {
            let idx = grid.idx(i, j);
            -(face_coeff(coeff, idx, grid.idx(i + 1, j), 0)
                + face_coeff(coeff, idx, grid.idx(i - 1, j), 0)
                + face_coeff(coeff, idx, grid.idx(i, j + 1), 2)
                + face_coeff(coeff, idx, grid.idx(i, j - 1), 2))
                / h2
        };
        let mut scratch: Vec<f64> = Vec::new();
        for it in 1..=cfg.max_iterations {
            let mut sweep_max = 0.0f64;
            for color in &nodes {
                scratch.clear();
                for &(i, j) in color {
                    let r = residual9(grid, coeff, u.values(), i, j);
                    sweep_max = sweep_max.max(r.abs());
                    let idx = grid.idx(i, j);
                    scratch.push(u.values()[idx] - omega * r / diag_at(i, j));
                }
                for (k, &(i, j)) in color.iter().enumerate() {
                    let idx = grid.idx(i, j);
                    u.values_mut()[idx] = scratch[k];
                }
            }
            if sweep_max <= cfg.tolerance {
                let final_res = nodes
                    .iter()
                    .flatten()
                    .map(|&(i, j)| residual9(grid, coeff, u.values(), i, j).abs())
                    .fold(0.0, f64::max);
                if final_res <= cfg.tolerance {
                    return Ok((u, SolveStats { iterations: it, final_residual: final_res }));
                }
            }
        }
        let final_res = nodes
            .iter()
            .flatten()
            .map(|&(i, j)| residual9(grid, coeff, u.values(), i, j).abs())
            .fold(0.0, f64::max);
        Err(CoreError::Convergence { iterations: cfg.max_iterations, residual: final_res })
    }
}

/// Builds cut edges where grid edges cross ∂B (curved boxes) and assembles
/// the Dirichlet problem for the accessible region: datum on ∂B, zero on the
/// obstacle.
pub struct DirichletProblem {
    pub solve: Vec<bool>,
    pub fixed: ScalarField,
    pub cuts: CutMap,
}

impl DirichletProblem {
    pub fn from_geometry(
        geometry: &GeometrySpec,
        mask: &RegionMask,
        datum: &dyn Fn([f64; 2]) -> f64,
    ) -> Self {
        let grid = mask.grid;
        let rect = matches!(geometry.box_shape, BoxShape::Rect { .. });
        let mut solve = vec![false; grid.node_count()];
        let mut fixed = ScalarField::zeros(grid);
        let mut cuts = CutMap::new();
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let idx = grid.idx(i, j);
                match mask.tag(idx) {
                    NodeTag::Accessible => solve[idx] = true,
                    // on a curved box the inside-adjacent ring is solved too,
                    // with the datum imposed at the sub-grid crossing
                    NodeTag::BoxBoundary if !rect => solve[idx] = true,
                    NodeTag::BoxBoundary => fixed.set(i, j, datum(grid.point(i, j))),
                    NodeTag::Obstacle | NodeTag::Exterior => {}
                }
            }
        }
        if !rect {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    let idx = grid.idx(i, j);
                    if !solve[idx] {
                        continue;
                    }
                    let p = grid.point(i, j);
                    let sd_p = geometry.box_shape.signed_distance(p);
                    for dir in 0..4u8 {
                        let (di, dj) = DIR_OFFSETS[dir as usize];
                        let ni = i as isize + di;
                        let nj = j as isize + dj;
                        let outside = ni < 0
                            || nj < 0
                            || ni >= grid.nx as isize
                            || nj >= grid.ny as isize
                            || mask.tag(grid.idx(ni as usize, nj as usize)) == NodeTag::Exterior;
                        if !outside {
                            continue;
                        }
                        let q = [p[0] + di as f64 * grid.h, p[1] + dj as f64 * grid.h];
                        let sd_q = geometry.box_shape.signed_distance(q);
                        let theta = if sd_q > sd_p { -sd_p / (sd_q - sd_p) } else { 1.0 };
                        let cut_pt =
                            [p[0] + theta * di as f64 * grid.h, p[1] + theta * dj as f64 * grid.h];
                        let on_boundary = geometry.box_shape.project_to_boundary(cut_pt);
                        cuts.insert(idx, dir, theta, datum(on_boundary));
                    }
                }
            }
        }
        Self { solve, fixed, cuts }
    }
}

/// div(A∇u) = 0 on the accessible region with Dirichlet data on ∂B and zero
/// on the obstacle; the datum is matched exactly at boundary nodes of
/// rectangular boxes and at edge crossings of curved ones.
pub fn solve_dirichlet(
    coeff: &CoeffField,
    geometry: &GeometrySpec,
    mask: &RegionMask,
    datum: &dyn Fn([f64; 2]) -> f64,
    cfg: &SolveConfig,
) -> Result<(ScalarField, SolveStats)> {
    let problem = DirichletProblem::from_geometry(geometry, mask, datum);
    solve_masked(
        coeff,
        &mask.grid,
        &problem.solve,
        &problem.fixed,
        Some(&problem.cuts),
        cfg,
        None,
    )
}

/// Oblique (Robin-type) condition at a thin node (i, 0): ∇u·W = k·u, with
/// k = 0 the pure oblique derivative condition.
#[derive(Debug, Clone, Copy)]
pub struct ThinBc {
    pub i: usize,
    pub k: f64,
}

/// Mixed problem on a half domain: interior discrete-harmonic, Dirichlet on
/// `fixed` nodes, one-sided oblique conditions on the bottom row {x₂ = y₀}.
/// The oblique derivative is discretized by a first-order difference along W
/// at step h into the interior, evaluated by bilinear interpolation.
pub fn solve_oblique_mixed(
    coeff: &CoeffField,
    grid: &Grid,
    solve: &[bool],
    fixed: &ScalarField,
    thin: &[ThinBc],
    w_dir: [f64; 2],
    delta: f64,
    cfg: &SolveConfig,
    initial: Option<&ScalarField>,
) -> Result<(ScalarField, SolveStats)> {
    cfg.validate()?;
    if !coeff.is_diagonal() {
        return Err(CoreError::Coefficient(
            "oblique boundary solve supports diagonal coefficient fields".into(),
        ));
    }
    let wnorm = (w_dir[0] * w_dir[0] + w_dir[1] * w_dir[1]).sqrt();
    if wnorm == 0.0 || w_dir[1] / wnorm < delta {
        return Err(CoreError::Obliqueness(format!(
            "W = ({}, {}) has W·e₂ < δ = {delta}",
            w_dir[0], w_dir[1]
        )));
    }
    let wh = [w_dir[0] / wnorm, w_dir[1] / wnorm];

    let stencils = build_stencils5(grid, coeff, solve, None)?;
    let mut colors: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (s_idx, s) in stencils.iter().enumerate() {
        let n = s.node as usize;
        colors[(n % grid.nx + n / grid.nx) % 2].push(s_idx);
    }

    // Interpolation data for the point p + h·Ŵ of each thin node.
    struct ThinStencil {
        node: usize,
        k: f64,
        pts: [u32; 4],
        wts: [f64; 4],
        self_w: f64,
    }
    let mut thin_stencils = Vec::with_capacity(thin.len());
    for bc in thin {
        if bc.i >= grid.nx {
            return Err(CoreError::OutOfDomain(format!("thin node {} outside grid", bc.i)));
        }
        let node = grid.idx(bc.i, 0);
        let p = grid.point(bc.i, 0);
        let q = [p[0] + grid.h * wh[0], p[1] + grid.h * wh[1]];
        let (ci, cj, fx, fy) = grid.locate(q)?;
        let pts = [
            grid.idx(ci, cj) as u32,
            grid.idx(ci + 1, cj) as u32,
            grid.idx(ci, cj + 1) as u32,
            grid.idx(ci + 1, cj + 1) as u32,
        ];
        let wts = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        let mut self_w = 0.0;
        for (pt, wt) in pts.iter().zip(wts) {
            if *pt as usize == node {
                self_w += wt;
            }
        }
        thin_stencils.push(ThinStencil { node, k: bc.k, pts, wts, self_w });
    }

    let mut u = fixed.clone();
    if let Some(init) = initial {
        init.same_grid(fixed)?;
        for idx in 0..grid.node_count() {
            if solve[idx] {
                u.values_mut()[idx] = init.values()[idx];
            }
        }
        for ts in &thin_stencils {
            u.values_mut()[ts.node] = init.values()[ts.node];
        }
    }

    let omega = cfg.omega(grid, true);
    let h2 = grid.h * grid.h;
    let interp =
        |ts: &ThinStencil, vals: &[f64]| -> f64 {
            ts.pts.iter().zip(ts.wts).map(|(p, w)| vals[*p as usize] * w).sum()
        };
    // equation at a thin node: I(u) − (1 + k·h)·u = 0, scaled by h² for the
    // convergence check so it is commensurate with the interior residual
    let thin_res = |ts: &ThinStencil, vals: &[f64]| -> f64 {
        (interp(ts, vals) - (1.0 + ts.k * grid.h) * vals[ts.node]) / h2
    };

    let mut scratch: Vec<f64> = Vec::new();
    for it in 1..=cfg.max_iterations {
        let mut sweep_max = 0.0f64;
        for color in &colors {
            scratch.clear();
            for &s_idx in color {
                let s = &stencils[s_idx];
                let r = residual5(s, u.values());
                sweep_max = sweep_max.max(r.abs());
                scratch.push(u.values()[s.node as usize] - omega * r * s.inv_diag);
            }
            for (kk, &s_idx) in color.iter().enumerate() {
                u.values_mut()[stencils[s_idx].node as usize] = scratch[kk];
            }
        }
        for ts in &thin_stencils {
            let other: f64 = ts
                .pts
                .iter()
                .zip(ts.wts)
                .filter(|(p, _)| **p as usize != ts.node)
                .map(|(p, w)| u.values()[*p as usize] * w)
                .sum();
            let denom = 1.0 + ts.k * grid.h - ts.self_w;
            let new = other / denom;
            sweep_max = sweep_max.max((thin_res(ts, u.values())).abs());
            u.values_mut()[ts.node] = new;
        }
        if sweep_max <= cfg.tolerance {
            let ri = stencils.iter().map(|s| residual5(s, u.values()).abs()).fold(0.0, f64::max);
            let rt =
                thin_stencils.iter().map(|ts| thin_res(ts, u.values()).abs()).fold(0.0, f64::max);
            if ri.max(rt) <= cfg.tolerance {
                return Ok((u, SolveStats { iterations: it, final_residual: ri.max(rt) }));
            }
        }
    }
    let ri = stencils.iter().map(|s| residual5(s, u.values()).abs()).fold(0.0, f64::max);
    Err(CoreError::Convergence { iterations: cfg.max_iterations, residual: ri })
}

/// Max absolute discrete residual of div(A∇u) over accessible nodes whose
/// full stencil stays on the grid. Zero iff the field is exactly
/// discrete-harmonic there.
pub fn residual(field: &ScalarField, coeff: &CoeffField, mask: &RegionMask) -> f64 {
    let grid = field.grid;
    let diagonal = coeff.is_diagonal();
    let h2 = grid.h * grid.h;
    let mut worst = 0.0f64;
    for j in 1..grid.ny - 1 {
        for i in 1..grid.nx - 1 {
            let idx = grid.idx(i, j);
            if mask.tag(idx) != NodeTag::Accessible {
                continue;
            }
            let r = if diagonal {
                let u = field.values();
                let ae = face_coeff(coeff, idx, grid.idx(i + 1, j), 0);
                let aw = face_coeff(coeff, idx, grid.idx(i - 1, j), 0);
                let an = face_coeff(coeff, idx, grid.idx(i, j + 1), 2);
                let aso = face_coeff(coeff, idx, grid.idx(i, j - 1), 2);
                (ae * (u[grid.idx(i + 1, j)] - u[idx]) - aw * (u[idx] - u[grid.idx(i - 1, j)])
                    + an * (u[grid.idx(i, j + 1)] - u[idx])
                    - aso * (u[idx] - u[grid.idx(i, j - 1)]))
                    / h2
            } else {
                residual9(&grid, coeff, field.values(), i, j)
            };
            worst = worst.max(r.abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, classify_nodes, ObstacleSpec};

    fn square_geometry() -> GeometrySpec {
        GeometrySpec {
            box_shape: BoxShape::unit_square(),
            obstacle: ObstacleSpec::None,
            direction: [0.0, 1.0],
            coeff: CoeffField::Identity,
            delta: 0.25,
        }
    }

    fn disk_geometry() -> GeometrySpec {
        GeometrySpec {
            box_shape: BoxShape::Disk { center: [0.0, 0.0], radius: 1.0 },
            obstacle: ObstacleSpec::None,
            direction: [0.0, 1.0],
            coeff: CoeffField::Identity,
            delta: 0.25,
        }
    }

    fn solve_on(
        geom: &GeometrySpec,
        res: usize,
        coeff: &CoeffField,
        exact: impl Fn([f64; 2]) -> f64 + Copy,
    ) -> (f64, ScalarField, RegionMask) {
        let grid = build_grid(&geom.box_shape, res).unwrap();
        let mask = classify_nodes(&grid, geom).unwrap();
        let (u, _) =
            solve_dirichlet(coeff, geom, &mask, &|p| exact(p), &SolveConfig::default()).unwrap();
        let mut err = 0.0f64;
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                if mask.tag(grid.idx(i, j)) == NodeTag::Accessible {
                    err = err.max((u.at(i, j) - exact(grid.point(i, j))).abs());
                }
            }
        }
        (err, u, mask)
    }

    #[test]
    fn affine_data_reproduced_to_machine_precision() {
        let geom = square_geometry();
        let (err, _, _) = solve_on(&geom, 33, &CoeffField::Identity, |p| p[0]);
        assert!(err < 1e-9, "affine field is discrete-harmonic, err = {err:.3e}");
    }

    #[test]
    fn quadratic_harmonic_exact_on_square() {
        // x² − y² is annihilated by the 5-point stencil, so on a rectangle the
        // only error is the solver tolerance.
        let geom = square_geometry();
        let (err, _, _) = solve_on(&geom, 33, &CoeffField::Identity, |p| {
            p[0] * p[0] - p[1] * p[1]
        });
        assert!(err < 1e-7, "err = {err:.3e}");
    }

    #[test]
    fn disk_solve_is_second_order() {
        // On the disk the boundary enters through edge cuts; the manufactured
        // harmonic x² − y² measures the geometric error order.
        let geom = disk_geometry();
        let exact = |p: [f64; 2]| p[0] * p[0] - p[1] * p[1];
        let (e1, _, _) = solve_on(&geom, 33, &CoeffField::Identity, exact);
        let (e2, _, _) = solve_on(&geom, 65, &CoeffField::Identity, exact);
        let ratio = e1 / e2;
        assert!(
            (3.0..=5.0).contains(&ratio),
            "expected second-order ratio in [3, 5], got {ratio:.2} ({e1:.3e} / {e2:.3e})"
        );
    }

    #[test]
    fn anisotropic_diagonal_coefficients() {
        // div(A∇u) = 0 for A = diag(2, 1), u = x² − 2y²: 2·2 + 1·(−4) = 0.
        let geom = square_geometry();
        let coeff = CoeffField::Constant { a11: 2.0, a12: 0.0, a22: 1.0 };
        let (err, _, _) = solve_on(&geom, 33, &coeff, |p| p[0] * p[0] - 2.0 * p[1] * p[1]);
        assert!(err < 1e-7, "err = {err:.3e}");
    }

    #[test]
    fn full_matrix_conservative_stencil() {
        // A = [[2, 0.5], [0.5, 1]] constant, u affine: exactly discrete-harmonic.
        let geom = square_geometry();
        let coeff = CoeffField::Constant { a11: 2.0, a12: 0.5, a22: 1.0 };
        let (err, _, _) = solve_on(&geom, 17, &coeff, |p| 0.7 * p[0] - 1.3 * p[1]);
        assert!(err < 1e-8, "err = {err:.3e}");
    }

    #[test]
    fn rejects_non_spd_coefficients() {
        let geom = square_geometry();
        let grid = build_grid(&geom.box_shape, 17).unwrap();
        let mask = classify_nodes(&grid, &geom).unwrap();
        let coeff = CoeffField::Constant { a11: 1.0, a12: 2.0, a22: 1.0 };
        let out = solve_dirichlet(&coeff, &geom, &mask, &|_| 0.0, &SolveConfig::default());
        assert!(matches!(out, Err(CoreError::Coefficient(_))));
    }

    #[test]
    fn discrete_maximum_principle() {
        let geom = square_geometry();
        let datum = |p: [f64; 2]| (4.0 * p[0]).sin() + 0.3 * p[1];
        let grid = build_grid(&geom.box_shape, 33).unwrap();
        let mask = classify_nodes(&grid, &geom).unwrap();
        let (u, _) =
            solve_dirichlet(&CoeffField::Identity, &geom, &mask, &datum, &SolveConfig::default())
                .unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                if mask.tag(grid.idx(i, j)) == NodeTag::BoxBoundary {
                    lo = lo.min(u.at(i, j));
                    hi = hi.max(u.at(i, j));
                }
            }
        }
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                if mask.tag(grid.idx(i, j)) == NodeTag::Accessible {
                    assert!(u.at(i, j) >= lo - 1e-9 && u.at(i, j) <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn comparison_principle_within_tolerance() {
        let geom = square_geometry();
        let grid = build_grid(&geom.box_shape, 33).unwrap();
        let mask = classify_nodes(&grid, &geom).unwrap();
        let cfg = SolveConfig::default();
        let d1 = |p: [f64; 2]| (3.0 * p[0]).cos() + 1.0;
        let d2 = |p: [f64; 2]| (3.0 * p[0]).cos() + 1.2;
        let (u1, _) = solve_dirichlet(&CoeffField::Identity, &geom, &mask, &d1, &cfg).unwrap();
        let (u2, _) = solve_dirichlet(&CoeffField::Identity, &geom, &mask, &d2, &cfg).unwrap();
        for idx in 0..grid.node_count() {
            if mask.tag(idx) == NodeTag::Accessible {
                assert!(u1.get(idx) <= u2.get(idx) + 2.0 * cfg.tolerance);
            }
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let geom = disk_geometry();
        let exact = |p: [f64; 2]| p[0] * p[0] - p[1] * p[1];
        let (_, u1, _) = solve_on(&geom, 33, &CoeffField::Identity, exact);
        let (_, u2, _) = solve_on(&geom, 33, &CoeffField::Identity, exact);
        assert_eq!(u1.values(), u2.values());
    }

    #[test]
    fn residual_of_x_squared_is_two() {
        let geom = square_geometry();
        let grid = build_grid(&geom.box_shape, 17).unwrap();
        let mask = classify_nodes(&grid, &geom).unwrap();
        let f = ScalarField::from_fn(grid, |p| p[0] * p[0]);
        let r = residual(&f, &CoeffField::Identity, &mask);
        assert!((r - 2.0).abs() < 1e-10, "discrete Laplacian of x² is exactly 2, got {r}");
    }

    #[test]
    fn residual_zero_for_affine() {
        let geom = square_geometry();
        let grid = build_grid(&geom.box_shape, 17).unwrap();
        let mask = classify_nodes(&grid, &geom).unwrap();
        let f = ScalarField::from_fn(grid, |p| 2.0 * p[0] - p[1]);
        assert!(residual(&f, &CoeffField::Identity, &mask) < 1e-12);
    }

    fn half_square_grid(res: usize) -> Grid {
        // [-1, 1] x [0, 1]
        Grid::new(res, res / 2 + 1, 2.0 / (res - 1) as f64, [-1.0, 0.0]).unwrap()
    }

    fn oblique_setup(
        grid: &Grid,
        datum: impl Fn([f64; 2]) -> f64,
    ) -> (Vec<bool>, ScalarField, Vec<ThinBc>) {
        let mut solve = vec![false; grid.node_count()];
        let mut fixed = ScalarField::zeros(*grid);
        let mut thin = Vec::new();
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let idx = grid.idx(i, j);
                let p = grid.point(i, j);
                if j == 0 {
                    if i == 0 || i + 1 == grid.nx {
                        fixed.set(i, j, datum(p));
                    } else {
                        thin.push(ThinBc { i, k: 0.0 });
                    }
                } else if i == 0 || i + 1 == grid.nx || j + 1 == grid.ny {
                    fixed.set(i, j, datum(p));
                } else {
                    solve[idx] = true;
                }
            }
        }
        (solve, fixed, thin)
    }

    #[test]
    fn oblique_vertical_w_reproduces_x() {
        // W = e₂ and datum x₁: ∂₂x₁ = 0, so the solution is x₁ everywhere.
        let grid = half_square_grid(33);
        let (solve, fixed, thin) = oblique_setup(&grid, |p| p[0]);
        let (u, _) = solve_oblique_mixed(
            &CoeffField::Identity,
            &grid,
            &solve,
            &fixed,
            &thin,
            [0.0, 1.0],
            0.5,
            &SolveConfig::default(),
            None,
        )
        .unwrap();
        let mut err = 0.0f64;
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                err = err.max((u.at(i, j) - grid.x(i)).abs());
            }
        }
        assert!(err < 1e-7, "err = {err:.3e}");
    }

    #[test]
    fn oblique_diagonal_w_reproduces_orthogonal_affine() {
        // w = x₁ + x₂ has gradient (1, 1) ⊥ W = (−1, 1)/√2, and is harmonic.
        let grid = half_square_grid(33);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (solve, fixed, thin) = oblique_setup(&grid, |p| p[0] + p[1]);
        let (u, _) = solve_oblique_mixed(
            &CoeffField::Identity,
            &grid,
            &solve,
            &fixed,
            &thin,
            [-s, s],
            0.5,
            &SolveConfig::default(),
            None,
        )
        .unwrap();
        let mut err = 0.0f64;
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                err = err.max((u.at(i, j) - (grid.x(i) + grid.y(j))).abs());
            }
        }
        assert!(err < 1e-6, "err = {err:.3e}");
    }

    #[test]
    fn oblique_first_order_on_saddle() {
        // w = x₁² − x₂² has ∂₂w = 0 on {x₂ = 0}; the one-sided difference
        // along e₂ sees the O(h) curvature term.
        let errs: Vec<f64> = [33usize, 65]
            .iter()
            .map(|&res| {
                let grid = half_square_grid(res);
                let (solve, fixed, thin) = oblique_setup(&grid, |p| p[0] * p[0] - p[1] * p[1]);
                let (u, _) = solve_oblique_mixed(
                    &CoeffField::Identity,
                    &grid,
                    &solve,
                    &fixed,
                    &thin,
                    [0.0, 1.0],
                    0.5,
                    &SolveConfig::default(),
                    None,
                )
                .unwrap();
                let mut err = 0.0f64;
                for i in 0..grid.nx {
                    err = err.max((u.at(i, 0) - grid.x(i) * grid.x(i)).abs());
                }
                err
            })
            .collect();
        assert!(errs[0] < 0.2, "boundary error too large: {:.3e}", errs[0]);
        assert!(errs[1] < 0.75 * errs[0], "no refinement gain: {errs:?}");
    }

    #[test]
    fn oblique_rejects_tangential_w() {
        let grid = half_square_grid(17);
        let (solve, fixed, thin) = oblique_setup(&grid, |p| p[0]);
        let out = solve_oblique_mixed(
            &CoeffField::Identity,
            &grid,
            &solve,
            &fixed,
            &thin,
            [1.0, 0.0],
            0.5,
            &SolveConfig::default(),
            None,
        );
        assert!(matches!(out, Err(CoreError::Obliqueness(_))));
    }
}
