//! Structured grids, region classification, field storage, interpolation and
//! discrete differential operators shared by every solver.
//!
//! The domain is a box B (rectangle or disk) containing an obstacle K; the
//! accessible region is D = B \ K. Nodes carry one of four tags and the
//! canonical test geometry is the flattened obstacle {x₂ ≤ 0} inside a
//! rectangle. Sub-grid geometry (∂B, ∂K) is resolved by linear interpolation
//! along grid edges; the elliptic kernel consumes that as cut-cell data.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Relative slack used when deciding whether a node sits exactly on a
/// geometric boundary.
const GEOM_EPS: f64 = 1e-9;

/// Uniform Cartesian grid. Node (i, j) sits at `origin + (i·h, j·h)`,
/// exactly and reproducibly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub origin: [f64; 2],
}

impl Grid {
    pub fn new(nx: usize, ny: usize, h: f64, origin: [f64; 2]) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(CoreError::InvalidConfig(format!(
                "grid needs at least 3 nodes per side, got {nx}x{ny}"
            )));
        }
        if !(h > 0.0) {
            return Err(CoreError::InvalidConfig(format!("grid spacing {h} must be positive")));
        }
        Ok(Self { nx, ny, h, origin })
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.origin[0] + i as f64 * self.h
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        self.origin[1] + j as f64 * self.h
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [self.x(i), self.y(j)]
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.nx * self.ny
    }

    /// Corners of the covered rectangle.
    pub fn extent(&self) -> ([f64; 2], [f64; 2]) {
        (self.origin, [self.x(self.nx - 1), self.y(self.ny - 1)])
    }

    /// True if `p` lies inside the grid hull (closed).
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (lo, hi) = self.extent();
        let eps = GEOM_EPS * self.h;
        p[0] >= lo[0] - eps && p[0] <= hi[0] + eps && p[1] >= lo[1] - eps && p[1] <= hi[1] + eps
    }

    /// Cell index and local coordinates of `p`, clamped to the hull.
    /// Errors when `p` is outside the hull.
    pub fn locate(&self, p: [f64; 2]) -> Result<(usize, usize, f64, f64)> {
        if !self.contains(p) {
            return Err(CoreError::OutOfDomain(format!(
                "point ({}, {}) outside grid hull",
                p[0], p[1]
            )));
        }
        let fx = (p[0] - self.origin[0]) / self.h;
        let fy = (p[1] - self.origin[1]) / self.h;
        let i = (fx.floor() as isize).clamp(0, self.nx as isize - 2) as usize;
        let j = (fy.floor() as isize).clamp(0, self.ny as isize - 2) as usize;
        Ok((i, j, fx - i as f64, fy - j as f64))
    }
}

/// Shape of the box B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BoxShape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { center: [f64; 2], radius: f64 },
}

impl BoxShape {
    /// Unit square [0,1]².
    pub fn unit_square() -> Self {
        BoxShape::Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    /// Bounding rectangle (lo, hi).
    pub fn bounding_rect(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            BoxShape::Rect { x0, y0, x1, y1 } => ([x0, y0], [x1, y1]),
            BoxShape::Disk { center, radius } => (
                [center[0] - radius, center[1] - radius],
                [center[0] + radius, center[1] + radius],
            ),
        }
    }

    /// Signed distance to ∂B, negative inside. Exact for both shapes.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        match *self {
            BoxShape::Rect { x0, y0, x1, y1 } => {
                let dx = (x0 - p[0]).max(p[0] - x1);
                let dy = (y0 - p[1]).max(p[1] - y1);
                if dx <= 0.0 && dy <= 0.0 {
                    dx.max(dy)
                } else {
                    let qx = dx.max(0.0);
                    let qy = dy.max(0.0);
                    (qx * qx + qy * qy).sqrt()
                }
            }
            BoxShape::Disk { center, radius } => {
                ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt() - radius
            }
        }
    }

    pub fn contains_closed(&self, p: [f64; 2], eps: f64) -> bool {
        self.signed_distance(p) <= eps
    }

    /// Nearest point of ∂B. Boundary data is only defined there, so cut
    /// values are sampled at this projection.
    pub fn project_to_boundary(&self, p: [f64; 2]) -> [f64; 2] {
        match *self {
            BoxShape::Rect { x0, y0, x1, y1 } => {
                let cx = p[0].clamp(x0, x1);
                let cy = p[1].clamp(y0, y1);
                // snap the nearer coordinate to the closest face when p is inside
                let dx = (cx - x0).min(x1 - cx);
                let dy = (cy - y0).min(y1 - cy);
                if self.signed_distance(p) >= 0.0 {
                    [cx, cy]
                } else if dx <= dy {
                    [if cx - x0 <= x1 - cx { x0 } else { x1 }, cy]
                } else {
                    [cx, if cy - y0 <= y1 - cy { y0 } else { y1 }]
                }
            }
            BoxShape::Disk { center, radius } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let r = (dx * dx + dy * dy).sqrt();
                if r == 0.0 {
                    [center[0] + radius, center[1]]
                } else {
                    [center[0] + radius * dx / r, center[1] + radius * dy / r]
                }
            }
        }
    }

    fn is_rect(&self) -> bool {
        matches!(self, BoxShape::Rect { .. })
    }
}

/// Smooth graph function g for obstacles of the form {x₂ ≤ g(x₁)} and for the
/// flattening map. Polynomials carry exact derivatives; sampled tables use
/// centered differences (O(h²) in the table spacing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GraphFn {
    /// Coefficients in increasing degree: c₀ + c₁x + c₂x² + ...
    Poly { coeffs: Vec<f64> },
    /// Uniformly spaced sample table on [xs[0], xs[last]].
    Table { xs: Vec<f64>, gs: Vec<f64> },
}

impl GraphFn {
    pub fn zero() -> Self {
        GraphFn::Poly { coeffs: vec![0.0] }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            GraphFn::Poly { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
            GraphFn::Table { xs, gs } => {
                let n = xs.len();
                if n == 1 {
                    return gs[0];
                }
                let dx = (xs[n - 1] - xs[0]) / (n - 1) as f64;
                let t = ((x - xs[0]) / dx).clamp(0.0, (n - 1) as f64);
                let i = (t.floor() as usize).min(n - 2);
                let f = t - i as f64;
                gs[i] * (1.0 - f) + gs[i + 1] * f
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            GraphFn::Poly { coeffs } => {
                let mut acc = 0.0;
                for (k, c) in coeffs.iter().enumerate().skip(1).rev() {
                    acc = acc * x + k as f64 * c;
                }
                acc
            }
            GraphFn::Table { xs, .. } => {
                let n = xs.len();
                let dx = if n > 1 { (xs[n - 1] - xs[0]) / (n - 1) as f64 } else { 1.0 };
                (self.eval(x + dx) - self.eval(x - dx)) / (2.0 * dx)
            }
        }
    }

    /// Max |g| sampled on [a, b].
    pub fn sup_abs(&self, a: f64, b: f64, samples: usize) -> f64 {
        (0..samples)
            .map(|k| {
                let x = a + (b - a) * k as f64 / (samples - 1) as f64;
                self.eval(x).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Obstacle K. A graph obstacle is the region {x₂ ≤ g(x₁)} intersected with
/// the closed box; a disk obstacle must be contained in the closed box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObstacleSpec {
    None,
    Graph { g: GraphFn },
    Disk { center: [f64; 2], radius: f64 },
}

impl ObstacleSpec {
    /// Flattened obstacle {x₂ ≤ 0}.
    pub fn flat() -> Self {
        ObstacleSpec::Graph { g: GraphFn::zero() }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.signed_distance(p).map(|d| d <= 0.0).unwrap_or(false)
    }

    /// Signed distance-like level set for K (negative inside), `None` when
    /// there is no obstacle. For graphs this is the vertical gap x₂ − g(x₁),
    /// which matches the true distance to first order in ‖g′‖.
    pub fn signed_distance(&self, p: [f64; 2]) -> Option<f64> {
        match self {
            ObstacleSpec::None => None,
            ObstacleSpec::Graph { g } => Some(p[1] - g.eval(p[0])),
            ObstacleSpec::Disk { center, radius } => {
                Some(((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt() - radius)
            }
        }
    }
}

/// Symmetric coefficient matrix field A(x), stored as [a11, a12, a22] per
/// node when it varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CoeffField {
    Identity,
    Constant { a11: f64, a12: f64, a22: f64 },
    PerNode { entries: Vec<[f64; 3]> },
}

impl CoeffField {
    #[inline]
    pub fn at(&self, idx: usize) -> [f64; 3] {
        match self {
            CoeffField::Identity => [1.0, 0.0, 1.0],
            CoeffField::Constant { a11, a12, a22 } => [*a11, *a12, *a22],
            CoeffField::PerNode { entries } => entries[idx],
        }
    }

    /// True if a12 ≡ 0, which lets the solver use the 5-point stencil.
    pub fn is_diagonal(&self) -> bool {
        match self {
            CoeffField::Identity => true,
            CoeffField::Constant { a12, .. } => *a12 == 0.0,
            CoeffField::PerNode { entries } => entries.iter().all(|e| e[1] == 0.0),
        }
    }

    /// Checks symmetric positive definiteness node by node; returns the
    /// eigenvalue range [λ, Λ].
    pub fn spd_range(&self, node_count: usize) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let n = match self {
            CoeffField::PerNode { entries } => {
                if entries.len() != node_count {
                    return Err(CoreError::ShapeMismatch(format!(
                        "coefficient field has {} entries for {} nodes",
                        entries.len(),
                        node_count
                    )));
                }
                node_count
            }
            _ => 1,
        };
        for idx in 0..n {
            let [a, b, c] = self.at(idx);
            let tr = a + c;
            let det = a * c - b * b;
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let (l1, l2) = (0.5 * tr - disc, 0.5 * tr + disc);
            if l1 <= 0.0 || det <= 0.0 {
                return Err(CoreError::Coefficient(format!(
                    "matrix [[{a},{b}],[{b},{c}]] at node {idx} is not positive definite"
                )));
            }
            lo = lo.min(l1);
            hi = hi.max(l2);
        }
        Ok((lo, hi))
    }
}

/// Full geometric description of one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub box_shape: BoxShape,
    pub obstacle: ObstacleSpec,
    /// Constant drift direction V.
    pub direction: [f64; 2],
    #[serde(default = "default_coeff")]
    pub coeff: CoeffField,
    /// Nondegeneracy threshold δ > 0.
    pub delta: f64,
}

fn default_coeff() -> CoeffField {
    CoeffField::Identity
}

impl GeometrySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if let ObstacleSpec::Disk { center, radius } = &self.obstacle {
            // K ⊂ closure(B): farthest obstacle point must be inside.
            let d = self.box_shape.signed_distance(*center);
            if d + radius > GEOM_EPS {
                return Err(CoreError::Geometry(
                    "obstacle disk is not contained in the closed box".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Classification of one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeTag {
    Exterior,
    BoxBoundary,
    Obstacle,
    Accessible,
}

/// Per-node tags; exactly one tag per node (the partition is structural).
#[derive(Debug, Clone)]
pub struct RegionMask {
    pub grid: Grid,
    tags: Vec<NodeTag>,
}

impl RegionMask {
    #[inline]
    pub fn tag(&self, idx: usize) -> NodeTag {
        self.tags[idx]
    }

    pub fn tags(&self) -> &[NodeTag] {
        &self.tags
    }

    pub fn count(&self, tag: NodeTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }
}

/// Nodal scalar values on a grid: u, p, n or v depending on the module.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self { values: vec![0.0; grid.node_count()], grid }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.node_count());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                values.push(f(grid.point(i, j)));
            }
        }
        Self { grid, values }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.grid.idx(i, j);
        self.values[idx] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn same_grid(&self, other: &ScalarField) -> Result<()> {
        if self.grid != other.grid {
            return Err(CoreError::ShapeMismatch("fields live on different grids".into()));
        }
        Ok(())
    }
}

/// Stencil flavor for [`gradient_at`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientSide {
    /// Second-order centered differences.
    Centered,
    /// Uses only neighbors where the field is positive; falls back to
    /// centered when both sides are positive. Meant for gradients taken from
    /// inside the positivity set up to the free boundary.
    OneSidedFromPositive,
}

/// Builds the grid covering the bounding rectangle of `box_shape` with
/// `resolution` nodes along x and spacing h = x-extent/(resolution − 1).
pub fn build_grid(box_shape: &BoxShape, resolution: usize) -> Result<Grid> {
    if resolution < 3 {
        return Err(CoreError::InvalidConfig(format!(
            "resolution must be at least 3, got {resolution}"
        )));
    }
    let (lo, hi) = box_shape.bounding_rect();
    let extent_x = hi[0] - lo[0];
    let extent_y = hi[1] - lo[1];
    if !(extent_x > 0.0 && extent_y > 0.0) {
        return Err(CoreError::Geometry("box has empty extent".into()));
    }
    let h = extent_x / (resolution - 1) as f64;
    let ny = ((extent_y / h - GEOM_EPS).ceil() as usize + 1).max(3);
    Grid::new(resolution, ny, h, lo)
}

/// Tags every node: EXTERIOR outside the closed box, OBSTACLE inside K,
/// BOX_BOUNDARY adjacent to the exterior across ∂B (or exactly on ∂B for a
/// rectangular box), ACCESSIBLE otherwise.
pub fn classify_nodes(grid: &Grid, geometry: &GeometrySpec) -> Result<RegionMask> {
    geometry.validate()?;
    let eps = GEOM_EPS * grid.h;
    let nx = grid.nx;
    let ny = grid.ny;
    let mut inside = vec![false; grid.node_count()];
    for j in 0..ny {
        for i in 0..nx {
            inside[grid.idx(i, j)] = geometry.box_shape.contains_closed(grid.point(i, j), eps);
        }
    }
    let mut tags = vec![NodeTag::Exterior; grid.node_count()];
    for j in 0..ny {
        for i in 0..nx {
            let idx = grid.idx(i, j);
            if !inside[idx] {
                continue;
            }
            let p = grid.point(i, j);
            if geometry.obstacle.contains(p) {
                tags[idx] = NodeTag::Obstacle;
                continue;
            }
            let on_rect_rim = geometry.box_shape.is_rect()
                && geometry.box_shape.signed_distance(p).abs() <= eps;
            let next_to_exterior = (i == 0 || !inside[grid.idx(i - 1, j)])
                || (i + 1 == nx || !inside[grid.idx(i + 1, j)])
                || (j == 0 || !inside[grid.idx(i, j - 1)])
                || (j + 1 == ny || !inside[grid.idx(i, j + 1)]);
            tags[idx] = if on_rect_rim || next_to_exterior {
                NodeTag::BoxBoundary
            } else {
                NodeTag::Accessible
            };
        }
    }
    Ok(RegionMask { grid: *grid, tags })
}

/// Discrete gradient at a node. Centered mode is exact on affine fields;
/// one-sided mode prefers neighbors where the field is positive so the free
/// boundary does not contaminate the stencil.
pub fn gradient_at(
    field: &ScalarField,
    node: (usize, usize),
    side: GradientSide,
) -> Result<[f64; 2]> {
    let g = field.grid;
    let (i, j) = node;
    if i >= g.nx || j >= g.ny {
        return Err(CoreError::OutOfDomain(format!("node ({i}, {j}) outside grid")));
    }
    let axis = |lo: Option<f64>, mid: f64, hi: Option<f64>| -> Result<f64> {
        match side {
            GradientSide::Centered => match (lo, hi) {
                (Some(a), Some(b)) => Ok((b - a) / (2.0 * g.h)),
                _ => Err(CoreError::OutOfDomain(format!(
                    "centered stencil at ({i}, {j}) leaves the grid"
                ))),
            },
            GradientSide::OneSidedFromPositive => {
                let lo_pos = lo.filter(|&v| v > 0.0);
                let hi_pos = hi.filter(|&v| v > 0.0);
                match (lo_pos, hi_pos) {
                    (Some(a), Some(b)) => Ok((b - a) / (2.0 * g.h)),
                    (Some(a), None) => Ok((mid - a) / g.h),
                    (None, Some(b)) => Ok((b - mid) / g.h),
                    (None, None) => match (lo, hi) {
                        (Some(a), Some(b)) => Ok((b - a) / (2.0 * g.h)),
                        _ => Err(CoreError::OutOfDomain(format!(
                            "stencil at ({i}, {j}) leaves the grid"
                        ))),
                    },
                }
            }
        }
    };
    let w = if i > 0 { Some(field.at(i - 1, j)) } else { None };
    let e = if i + 1 < g.nx { Some(field.at(i + 1, j)) } else { None };
    let s = if j > 0 { Some(field.at(i, j - 1)) } else { None };
    let n = if j + 1 < g.ny { Some(field.at(i, j + 1)) } else { None };
    let mid = field.at(i, j);
    Ok([axis(w, mid, e)?, axis(s, mid, n)?])
}

/// Bilinear interpolation; exact on bilinear functions and reproduces nodal
/// values at nodes.
pub fn interpolate(field: &ScalarField, point: [f64; 2]) -> Result<f64> {
    let (i, j, fx, fy) = field.grid.locate(point)?;
    let v00 = field.at(i, j);
    let v10 = field.at(i + 1, j);
    let v01 = field.at(i, j + 1);
    let v11 = field.at(i + 1, j + 1);
    Ok(v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy
        + v11 * fx * fy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square_grid(res: usize) -> Grid {
        build_grid(&BoxShape::unit_square(), res).unwrap()
    }

    #[test]
    fn build_grid_unit_square() {
        let g = unit_square_grid(65);
        assert_eq!((g.nx, g.ny), (65, 65));
        assert_eq!(g.h, 1.0 / 64.0);
    }

    #[test]
    fn build_grid_unit_disk() {
        let g = build_grid(&BoxShape::Disk { center: [0.0, 0.0], radius: 1.0 }, 129).unwrap();
        assert_eq!((g.nx, g.ny), (129, 129));
        assert_eq!(g.h, 2.0 / 128.0);
        assert_eq!(g.origin, [-1.0, -1.0]);
    }

    #[test]
    fn build_grid_rejects_low_resolution() {
        assert!(matches!(
            build_grid(&BoxShape::unit_square(), 2),
            Err(CoreError::InvalidConfig(_))
        ));
    }

    fn halfplane_in_disk() -> GeometrySpec {
        GeometrySpec {
            box_shape: BoxShape::Disk { center: [0.0, 0.0], radius: 1.0 },
            obstacle: ObstacleSpec::flat(),
            direction: [0.0, 1.0],
            coeff: CoeffField::Identity,
            delta: 0.25,
        }
    }

    #[test]
    fn classify_disk_with_halfplane_obstacle() {
        let geom = halfplane_in_disk();
        let grid = build_grid(&geom.box_shape, 129).unwrap();
        let mask = classify_nodes(&grid, &geom).unwrap();
        let tag_at = |p: [f64; 2]| {
            let i = ((p[0] - grid.origin[0]) / grid.h).round() as usize;
            let j = ((p[1] - grid.origin[1]) / grid.h).round() as usize;
            mask.tag(grid.idx(i, j))
        };
        assert_eq!(tag_at([0.0, 0.5]), NodeTag::Accessible);
        assert_eq!(tag_at([0.0, -0.5]), NodeTag::Obstacle);
        assert_eq!(tag_at([1.0, 1.0]), NodeTag::Exterior);
    }

    #[test]
    fn classify_rejects_obstacle_outside_box() {
        let geom = GeometrySpec {
            box_shape: BoxShape::unit_square(),
            obstacle: ObstacleSpec::Disk { center: [0.9, 0.5], radius: 0.5 },
            direction: [0.0, 1.0],
            coeff: CoeffField::Identity,
            delta: 0.25,
        };
        let grid = unit_square_grid(17);
        assert!(matches!(classify_nodes(&grid, &geom), Err(CoreError::Geometry(_))));
    }

    #[test]
    fn mask_is_a_partition() {
        let geom = halfplane_in_disk();
        let grid = build_grid(&geom.box_shape, 65).unwrap();
        let mask = classify_nodes(&grid, &geom).unwrap();
        let total = mask.count(NodeTag::Exterior)
            + mask.count(NodeTag::BoxBoundary)
            + mask.count(NodeTag::Obstacle)
            + mask.count(NodeTag::Accessible);
        assert_eq!(total, grid.node_count());
        assert!(mask.count(NodeTag::Accessible) > 0);
    }

    #[test]
    fn gradient_exact_on_affine() {
        let g = unit_square_grid(17);
        let f = ScalarField::from_fn(g, |p| 3.0 * p[0] - 2.0 * p[1] + 0.5);
        for j in 1..g.ny - 1 {
            for i in 1..g.nx - 1 {
                let grad = gradient_at(&f, (i, j), GradientSide::Centered).unwrap();
                assert!((grad[0] - 3.0).abs() < 1e-12);
                assert!((grad[1] + 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_centered_exact_on_quadratic() {
        let g = unit_square_grid(17);
        let f = ScalarField::from_fn(g, |p| p[0] * p[0]);
        let i = (0.5 / g.h).round() as usize;
        assert_eq!(g.x(i), 0.5);
        let grad = gradient_at(&f, (i, 4), GradientSide::Centered).unwrap();
        assert!((grad[0] - 1.0).abs() < 1e-12, "central difference of x² at 0.5 is exactly 1");
    }

    #[test]
    fn gradient_one_sided_at_kink() {
        // field = 2(x·e₂)⁺ at a node one cell above the kink: the downward
        // neighbor is zero, so the one-sided stencil must look up only.
        let g = Grid::new(9, 9, 0.125, [0.0, -0.5]).unwrap();
        let f = ScalarField::from_fn(g, |p| (2.0 * p[1]).max(0.0));
        let j = ((0.125 - g.origin[1]) / g.h).round() as usize;
        let grad = gradient_at(&f, (4, j), GradientSide::OneSidedFromPositive).unwrap();
        assert!((grad[1] - 2.0).abs() < 1e-12);
        assert!(grad[0].abs() < 1e-12);
    }

    #[test]
    fn gradient_errors_at_rim() {
        let g = unit_square_grid(9);
        let f = ScalarField::from_fn(g, |p| p[0]);
        assert!(gradient_at(&f, (0, 4), GradientSide::Centered).is_err());
    }

    #[test]
    fn interpolate_constant_and_bilinear() {
        let g = unit_square_grid(9);
        let c = ScalarField::from_fn(g, |_| 3.0);
        assert_eq!(interpolate(&c, [0.37, 0.61]).unwrap(), 3.0);
        let f = ScalarField::from_fn(g, |p| p[0] * p[1]);
        // cell-center point: bilinear reproduces the product exactly
        let p = [g.x(3) + 0.5 * g.h, g.y(5) + 0.5 * g.h];
        assert!((interpolate(&f, p).unwrap() - p[0] * p[1]).abs() < 1e-14);
    }

    #[test]
    fn interpolate_outside_hull_errors() {
        let g = unit_square_grid(9);
        let f = ScalarField::zeros(g);
        assert!(matches!(interpolate(&f, [1.5, 0.5]), Err(CoreError::OutOfDomain(_))));
    }

    #[test]
    fn interpolate_reproduces_nodes() {
        let g = unit_square_grid(9);
        let f = ScalarField::from_fn(g, |p| (7.3 * p[0]).sin() + p[1]);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let v = interpolate(&f, g.point(i, j)).unwrap();
                assert!((v - f.at(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graphfn_poly_eval_and_derivative() {
        let g = GraphFn::Poly { coeffs: vec![0.1, -0.5, 0.3] };
        let x = 0.7;
        assert!((g.eval(x) - (0.1 - 0.5 * x + 0.3 * x * x)).abs() < 1e-15);
        assert!((g.derivative(x) - (-0.5 + 0.6 * x)).abs() < 1e-15);
    }

    #[test]
    fn graphfn_table_matches_linear() {
        let xs: Vec<f64> = (0..11).map(|k| k as f64 / 10.0).collect();
        let gs: Vec<f64> = xs.iter().map(|x| 0.25 * x).collect();
        let g = GraphFn::Table { xs, gs };
        assert!((g.eval(0.33) - 0.0825).abs() < 1e-12);
        assert!((g.derivative(0.5) - 0.25).abs() < 1e-12);
    }
}
