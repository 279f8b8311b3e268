//! Change of coordinates that maps a graph obstacle {x₂ ≤ g(x₁)} to the flat
//! obstacle {y₂ ≤ 0}: y = Θ(x) = (x₁, x₂ − g(x₁)). The pulled-back operator
//! keeps the divergence form with matrix A(y) = (DΘ⁻¹)⁻ᵀ(DΘ⁻¹)⁻¹ (which has
//! unit determinant because DΘ⁻¹ is triangular) and drift Ṽ(y) = DΘ⁻¹ V.

use serde::{Deserialize, Serialize};

use crate::elliptic;
use crate::error::{CoreError, Result};
use crate::geometry::{classify_nodes, CoeffField, GeometrySpec, GraphFn, Grid, ScalarField};

/// Graph flattening map with its validity radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatteningMap {
    pub g: GraphFn,
    /// Half-width of the x₁ window this map is meant for.
    pub sigma: f64,
}

impl FlatteningMap {
    pub fn new(g: GraphFn, sigma: f64) -> Self {
        Self { g, sigma }
    }

    /// ‖g‖_∞ on the window, the quantity bounded by η₀.
    pub fn sup_g(&self) -> f64 {
        self.g.sup_abs(-self.sigma, self.sigma, 512)
    }
}

/// Θ(x) = (x₁, x₂ − g(x₁)).
pub fn theta(x: [f64; 2], g: &GraphFn) -> [f64; 2] {
    [x[0], x[1] - g.eval(x[0])]
}

/// Θ⁻¹(y) = (y₁, y₂ + g(y₁)); exact inverse of [`theta`].
pub fn theta_inv(y: [f64; 2], g: &GraphFn) -> [f64; 2] {
    [y[0], y[1] + g.eval(y[0])]
}

/// A(y) = [[1, −g′], [−g′, 1 + g′²]] with g′ evaluated at y₁.
///
/// With L := DΘ⁻¹ = [[1, 0], [g′, 1]] this is L⁻¹L⁻ᵀ, the matrix under which
/// v = u∘Θ⁻¹ satisfies div(A∇v) = 0 whenever u is harmonic (det A = 1 since
/// L is triangular).
pub fn pullback_matrix(g: &GraphFn, y: [f64; 2]) -> [[f64; 2]; 2] {
    let a = g.derivative(y[0]);
    [[1.0, -a], [-a, 1.0 + a * a]]
}

/// Ṽ(y) = (DΘ⁻¹(y))ᵀ V = (V₁ + g′(y₁)·V₂, V₂).
///
/// This is the drift paired with [`pullback_matrix`]: it keeps the boundary
/// relation A∇v·∇v = A∇v·Ṽ equivalent to |∇u|² = ∇u·V, and yields
/// A(y)Ṽ(y) = DΘ·V, the image of the ray field x ↦ x + tV.
pub fn pullback_vector(g: &GraphFn, y: [f64; 2], v: [f64; 2]) -> [f64; 2] {
    let a = g.derivative(y[0]);
    [v[0] + a * v[1], v[1]]
}

/// Coefficients of the flattened problem sampled on a grid, ready for the
/// solvers and serializable for handoff.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatProblemSpec {
    pub grid: Grid,
    /// Per-node [a11, a12, a22].
    pub a: Vec<[f64; 3]>,
    /// Per-node Ṽ.
    pub vtilde: Vec<[f64; 2]>,
    pub delta: f64,
    pub pi0: f64,
}

impl FlatProblemSpec {
    /// Samples A and Ṽ at every grid node.
    pub fn assemble(grid: Grid, g: &GraphFn, v: [f64; 2], delta: f64, pi0: f64) -> Self {
        let mut a = Vec::with_capacity(grid.node_count());
        let mut vtilde = Vec::with_capacity(grid.node_count());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let y = grid.point(i, j);
                let m = pullback_matrix(g, y);
                a.push([m[0][0], m[0][1], m[1][1]]);
                vtilde.push(pullback_vector(g, y, v));
            }
        }
        Self { grid, a, vtilde, delta, pi0 }
    }

    pub fn coeff_field(&self) -> CoeffField {
        CoeffField::PerNode { entries: self.a.clone() }
    }

    pub fn det_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for e in &self.a {
            let det = e[0] * e[2] - e[1] * e[1];
            lo = lo.min(det);
            hi = hi.max(det);
        }
        (lo, hi)
    }
}

/// Outcome of the three smallness checks of the flattened configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatteningReport {
    /// max over nodes of max |(A − I)| entry.
    pub a_minus_identity: f64,
    /// max over nodes of max |AṼ − V| component.
    pub av_minus_v: f64,
    /// min over nodes of AṼ·e₂.
    pub min_av_dot_ed: f64,
    pub a_within_budget: bool,
    pub drift_within_budget: bool,
    pub transversal: bool,
}

impl FlatteningReport {
    pub fn all_pass(&self) -> bool {
        self.a_within_budget && self.drift_within_budget && self.transversal
    }
}

/// Evaluates ‖A − I‖ ≤ Π₀, ‖AṼ − V‖ ≤ Π₀ and AṼ·e₂ ≥ 2δ on the sampled
/// spec. Failures are report entries, not errors.
pub fn validate_flattening(
    spec: &FlatProblemSpec,
    v: [f64; 2],
    delta: f64,
    pi0: f64,
) -> FlatteningReport {
    let mut a_dev = 0.0f64;
    let mut av_dev = 0.0f64;
    let mut min_dot = f64::INFINITY;
    for (a, vt) in spec.a.iter().zip(&spec.vtilde) {
        a_dev = a_dev.max((a[0] - 1.0).abs()).max(a[1].abs()).max((a[2] - 1.0).abs());
        let av = [a[0] * vt[0] + a[1] * vt[1], a[1] * vt[0] + a[2] * vt[1]];
        av_dev = av_dev.max((av[0] - v[0]).abs()).max((av[1] - v[1]).abs());
        min_dot = min_dot.min(av[1]);
    }
    FlatteningReport {
        a_minus_identity: a_dev,
        av_minus_v: av_dev,
        min_av_dot_ed: min_dot,
        a_within_budget: a_dev <= pi0,
        drift_within_budget: av_dev <= pi0,
        transversal: min_dot >= 2.0 * delta,
    }
}

/// Shrinks g by bisection on a scale factor until the flattening checks pass,
/// mirroring the choice of a small enough η₀. Returns the scale and the bound
/// η₀ = ‖scale·g‖_∞ together with the passing spec.
pub fn shrink_to_budget(
    grid: Grid,
    g: &GraphFn,
    v: [f64; 2],
    delta: f64,
    pi0: f64,
) -> Result<(f64, f64, FlatProblemSpec)> {
    let scaled = |s: f64| -> GraphFn {
        match g {
            GraphFn::Poly { coeffs } => {
                GraphFn::Poly { coeffs: coeffs.iter().map(|c| c * s).collect() }
            }
            GraphFn::Table { xs, gs } => {
                GraphFn::Table { xs: xs.clone(), gs: gs.iter().map(|t| t * s).collect() }
            }
        }
    };
    let passes = |s: f64| -> (bool, FlatProblemSpec) {
        let gg = scaled(s);
        let spec = FlatProblemSpec::assemble(grid, &gg, v, delta, pi0);
        let rep = validate_flattening(&spec, v, delta, pi0);
        (rep.all_pass(), spec)
    };
    let (ok_full, spec_full) = passes(1.0);
    if ok_full {
        let (_, hi) = grid.extent();
        let (lo, _) = grid.extent();
        let eta0 = g.sup_abs(lo[0], hi[0], 512);
        return Ok((1.0, eta0, spec_full));
    }
    let (ok_zero, _) = passes(0.0);
    if !ok_zero {
        return Err(CoreError::Geometry(
            "flattening checks fail even for g ≡ 0; V itself violates the budget".into(),
        ));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if passes(mid).0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (_, spec) = passes(lo);
    let (glo, ghi) = grid.extent();
    let eta0 = scaled(lo).sup_abs(glo[0], ghi[0], 512);
    Ok((lo, eta0, spec))
}

/// Max discrete residual of div(A∇(u∘Θ⁻¹)) on a flattened grid, for a
/// harmonic test function u on the original domain. Measures the consistency
/// of the pulled-back coefficients; expected O(h) for C² data.
pub fn pullback_consistency_residual(
    g: &GraphFn,
    u: impl Fn([f64; 2]) -> f64,
    v: [f64; 2],
    grid: Grid,
) -> Result<f64> {
    let spec = FlatProblemSpec::assemble(grid, g, v, 0.25, 0.1);
    let coeff = spec.coeff_field();
    let field = ScalarField::from_fn(grid, |y| u(theta_inv(y, g)));
    let (lo, hi) = grid.extent();
    let geom = GeometrySpec {
        box_shape: crate::geometry::BoxShape::Rect { x0: lo[0], y0: lo[1], x1: hi[0], y1: hi[1] },
        obstacle: crate::geometry::ObstacleSpec::None,
        direction: v,
        coeff: CoeffField::Identity,
        delta: 0.25,
    };
    let mask = classify_nodes(&grid, &geom)?;
    Ok(elliptic::residual(&field, &coeff, &mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(coeffs: &[f64]) -> GraphFn {
        GraphFn::Poly { coeffs: coeffs.to_vec() }
    }

    #[test]
    fn theta_identity_for_zero_graph() {
        let g = GraphFn::zero();
        assert_eq!(theta([0.3, 0.7], &g), [0.3, 0.7]);
    }

    #[test]
    fn theta_linear_graph() {
        let g = poly(&[0.0, 1.0]);
        let y = theta([0.5, 0.7], &g);
        assert_eq!(y[0], 0.5);
        assert!((y[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn theta_roundtrip() {
        let g = poly(&[0.05, -0.3, 0.2]);
        for k in 0..100 {
            let x = [(k as f64 * 0.7).sin(), (k as f64 * 1.3).cos()];
            let y = theta(x, &g);
            let back = theta_inv(y, &g);
            assert_eq!(back[0], x[0]);
            assert!((back[1] - x[1]).abs() < 1e-15, "round trip to machine precision");
        }
    }

    #[test]
    fn pullback_matrix_zero_graph_is_identity() {
        let g = GraphFn::zero();
        assert_eq!(pullback_matrix(&g, [0.2, 0.0]), [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn pullback_matrix_slope_one() {
        // g(x) = x gives L = DΘ⁻¹ = [[1,0],[1,1]] and A = L⁻¹L⁻ᵀ = [[1,−1],[−1,2]].
        let g = poly(&[0.0, 1.0]);
        assert_eq!(pullback_matrix(&g, [0.0, 0.0]), [[1.0, -1.0], [-1.0, 2.0]]);
    }

    #[test]
    fn pullback_annihilates_transformed_harmonics() {
        // v = u∘Θ⁻¹ for u = x₂ is y₂ + g(y₁); A∇v must be divergence free,
        // which pins the factor order of the pullback.
        let g = poly(&[0.0, 0.3, 0.4]);
        let y = [0.37, 0.21];
        let a = pullback_matrix(&g, y);
        let dg = g.derivative(y[0]);
        let grad_v = [dg, 1.0];
        let flux = [
            a[0][0] * grad_v[0] + a[0][1] * grad_v[1],
            a[1][0] * grad_v[0] + a[1][1] * grad_v[1],
        ];
        assert!((flux[0] - 0.0).abs() < 1e-14 && (flux[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn pullback_pair_reproduces_image_rays() {
        // A(y)Ṽ(y) must equal DΘ·V, the velocity of the image of x + tV.
        let g = poly(&[0.0, -0.2, 0.5]);
        let v = [0.3, 1.0];
        let y = [0.6, 0.1];
        let a = pullback_matrix(&g, y);
        let vt = pullback_vector(&g, y, v);
        let av = [a[0][0] * vt[0] + a[0][1] * vt[1], a[1][0] * vt[0] + a[1][1] * vt[1]];
        let dg = g.derivative(y[0]);
        let image = [v[0], -dg * v[0] + v[1]];
        assert!((av[0] - image[0]).abs() < 1e-14);
        assert!((av[1] - image[1]).abs() < 1e-14);
    }

    #[test]
    fn pullback_matrix_unit_determinant() {
        let g = poly(&[0.1, -0.4, 0.8]);
        for k in 0..50 {
            let y = [k as f64 * 0.04 - 1.0, 0.0];
            let m = pullback_matrix(&g, y);
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pullback_vector_cases() {
        let g0 = GraphFn::zero();
        assert_eq!(pullback_vector(&g0, [0.0, 0.0], [0.3, 0.9]), [0.3, 0.9]);
        let g1 = poly(&[0.0, 1.0]);
        assert_eq!(pullback_vector(&g1, [0.0, 0.0], [1.0, 1.0]), [2.0, 1.0]);
        // the vertical component is always carried through unchanged
        assert_eq!(pullback_vector(&g1, [0.0, 0.0], [0.0, 1.0])[1], 1.0);
    }

    fn grid_11() -> Grid {
        Grid::new(33, 33, 2.0 / 32.0, [-1.0, -1.0]).unwrap()
    }

    #[test]
    fn validate_zero_graph_all_pass_exactly() {
        let spec = FlatProblemSpec::assemble(grid_11(), &GraphFn::zero(), [0.0, 1.0], 0.25, 0.1);
        let rep = validate_flattening(&spec, [0.0, 1.0], 0.25, 0.1);
        assert!(rep.all_pass());
        assert_eq!(rep.a_minus_identity, 0.0);
        assert_eq!(rep.av_minus_v, 0.0);
        assert_eq!(rep.min_av_dot_ed, 1.0);
    }

    #[test]
    fn validate_half_slope_budget_boundary() {
        // g = 0.5·x₁: ‖A − I‖ = max(a², a) = 0.5 sets the pass boundary;
        // AṼ = DΘ·V leaves a vertical drift untouched.
        let g = poly(&[0.0, 0.5]);
        let spec = FlatProblemSpec::assemble(grid_11(), &g, [0.0, 1.0], 0.25, 0.5);
        let rep = validate_flattening(&spec, [0.0, 1.0], 0.25, 0.5);
        assert!((rep.a_minus_identity - 0.5).abs() < 1e-12);
        assert!(rep.av_minus_v.abs() < 1e-12);
        assert!(rep.all_pass(), "passes exactly at Π₀ = 0.5");
        let tight = validate_flattening(&spec, [0.0, 1.0], 0.25, 0.49);
        assert!(!tight.all_pass(), "fails for Π₀ < 0.5");
    }

    #[test]
    fn validate_tilted_drift_deviation() {
        // a tilted V picks up the |g′V₁| drift deviation
        let g = poly(&[0.0, 0.5]);
        let spec = FlatProblemSpec::assemble(grid_11(), &g, [0.4, 1.0], 0.1, 0.5);
        let rep = validate_flattening(&spec, [0.4, 1.0], 0.1, 0.5);
        assert!((rep.av_minus_v - 0.2).abs() < 1e-12, "|g′·V₁| = 0.5·0.4");
    }

    #[test]
    fn validate_flags_tangential_drift() {
        let spec = FlatProblemSpec::assemble(grid_11(), &GraphFn::zero(), [1.0, 0.0], 0.25, 0.1);
        let rep = validate_flattening(&spec, [1.0, 0.0], 0.25, 0.1);
        assert!(!rep.transversal, "AṼ·e₂ = 0 < 2δ must be flagged");
    }

    #[test]
    fn shrink_finds_passing_scale() {
        let g = poly(&[0.0, 2.0]); // far too steep at scale 1
        let (scale, eta0, spec) =
            shrink_to_budget(grid_11(), &g, [0.0, 1.0], 0.25, 0.1).unwrap();
        assert!(scale > 0.0 && scale < 1.0);
        assert!(eta0 > 0.0);
        let rep = validate_flattening(&spec, [0.0, 1.0], 0.25, 0.1);
        assert!(rep.all_pass());
    }

    #[test]
    fn consistency_residual_refines_for_curved_graph() {
        // u harmonic, g cubic: the face-averaged coefficients carry a genuine
        // truncation error that must shrink under refinement.
        let g = poly(&[0.0, 0.0, 0.0, 0.3]);
        let u = |p: [f64; 2]| p[0] * p[0] - p[1] * p[1];
        let res: Vec<f64> = [33usize, 65, 129]
            .iter()
            .map(|&n| {
                let grid = Grid::new(n, n, 2.0 / (n - 1) as f64, [-1.0, -1.0]).unwrap();
                pullback_consistency_residual(&g, u, [0.0, 1.0], grid).unwrap()
            })
            .collect();
        assert!(res[0] > 1e-6, "cubic graph must leave a measurable residual, got {res:?}");
        assert!(res[0] / res[1] >= 1.8, "ratios {res:?}");
        assert!(res[1] / res[2] >= 1.8, "ratios {res:?}");
    }

    #[test]
    fn consistency_residual_quadratic_graph_in_exactness_class() {
        // for quadratic g and quadratic u the conservative stencil happens to
        // be exact; the pullback must then leave only roundoff
        let g = poly(&[0.0, 0.0, 0.3]);
        let u = |p: [f64; 2]| p[0] * p[0] - p[1] * p[1];
        let r = pullback_consistency_residual(&g, u, [0.0, 1.0], grid_11()).unwrap();
        assert!(r < 1e-9, "got {r:.3e}");
    }

    #[test]
    fn consistency_residual_zero_graph_is_truncation_only() {
        let u = |p: [f64; 2]| p[0] * p[0] - p[1] * p[1];
        let grid = grid_11();
        let r = pullback_consistency_residual(&GraphFn::zero(), u, [0.0, 1.0], grid).unwrap();
        assert!(r < 1e-10, "identity map leaves only the exact-quadrature zero, got {r:.3e}");
    }
}
