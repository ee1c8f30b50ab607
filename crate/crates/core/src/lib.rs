//! Mirror descent with homogeneous potentials for linear classification.
//!
//! The crate covers the potentials `psi(w) = (1/p) ||w||_p^beta`
//! ([`potential`]), losses over linear models ([`loss`]), the mirror descent,
//! `p`-GD and normalized updates ([`optimize`]), generalized max-margin
//! solvers and regularization paths ([`margin`]), seeded datasets
//! ([`data`]) and the convergence diagnostics tying trajectories to the
//! implicit-bias laws ([`diagnostics`]).

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod loss;
pub mod margin;
pub mod optimize;
pub mod potential;

pub use error::{Error, Result};
pub use loss::{Dataset, LossKind, LossSpec, Reduction};
pub use potential::{Potential, WeightVector};
