//! Periodic unfolding and elliptic homogenization on manifolds described by
//! affine charts and a Riemannian metric.
//!
//! The crate is organised bottom-up:
//!
//! * [`expr`] parses coefficient expressions such as `2 + sin(2*pi*y1)`.
//! * [`geometry`] holds charts, atlases, metric fields and affine pushforwards.
//! * [`fieldgrid`] samples fields on uniform grids and provides `∇_M`, `div_M`
//!   and quadrature against `dvol_M`.
//! * [`unfolding`] implements the discrete unfolding operator and the exact
//!   exchange identities it satisfies.
//! * [`cell`] solves the periodic cell problems and assembles the effective
//!   tensor.
//! * [`solve`] contains the fine-scale and homogenized solvers and the
//!   convergence study.
//! * [`equivalence`] transforms problems between atlases and checks that the
//!   homogenized problem does not depend on the choice.

pub mod cell;
pub mod equivalence;
pub mod error;
pub mod expr;
pub mod fieldgrid;
pub mod geometry;
pub mod linalg;
pub mod solve;
pub mod stencil;
pub mod unfolding;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
