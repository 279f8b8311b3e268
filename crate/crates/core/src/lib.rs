//! Numerical laboratory for a stationary one-phase free boundary problem
//! with an obstacle: the solution is harmonic in its positivity set, obeys
//! the gradient relation |∇u|² = ∇u·V on the free part of the boundary and
//! the one-sided inequality |∇u|² ≥ ∇u·V where the boundary rests on the
//! obstacle.
//!
//! The crate is organised around the pieces of that problem:
//!
//! - [`geometry`]: structured grids, region classification, fields,
//!   interpolation and discrete differential operators;
//! - [`elliptic`]: red-black SOR kernel for div(A∇u) = 0 with Dirichlet,
//!   sub-grid (cut-cell) Dirichlet and oblique boundary conditions;
//! - [`free_boundary`]: trial free boundary (level set) fixed point for the
//!   stationary problem plus the supersolution algebra used to cross-check it;
//! - [`pme`]: porous-medium simulator in the frame moving with −V, sweeping
//!   the stiffness exponent γ against the free boundary solver;
//! - [`thin_obstacle`]: penalized solver and diagnostics for the oblique thin
//!   obstacle problem;
//! - [`flatten`]: graph-flattening change of coordinates and its pulled-back
//!   coefficients;
//! - [`diagnostics`]: slope, flatness-decay, dichotomy, graph-property and
//!   hodograph measurements on computed solutions;
//! - [`config`] / [`report`]: JSON configuration, run reports and CSV
//!   artifacts shared with the command line front end.
//!
//! All solver state is owned; fields and masks are immutable after
//! construction and `Send + Sync`, so independent runs can be executed
//! concurrently by the caller.

pub mod config;
pub mod diagnostics;
pub mod elliptic;
pub mod error;
pub mod flatten;
pub mod free_boundary;
pub mod geometry;
pub mod pme;
pub mod report;
pub mod thin_obstacle;

pub use error::{CoreError, Result};
pub use geometry::{
    BoxShape, CoeffField, GeometrySpec, GraphFn, Grid, NodeTag, ObstacleSpec, RegionMask,
    ScalarField,
};
