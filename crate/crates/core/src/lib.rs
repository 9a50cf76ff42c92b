//! Minimizing-movement (JKO) schemes for the porous medium equation with
//! constant Dirichlet data, under the transport distance in which the domain
//! boundary acts as an infinite mass reservoir.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: box domains, cell-centred grids, boundary distance and bands.
//! - [`measures`]: grid densities, the internal energy and its variants.
//! - [`wb2`]: exact and entropic solvers for the reservoir transport cost.
//! - [`jko`]: the minimizing-movement scheme and its per-step certificates.
//! - [`oracle`]: an explicit finite-difference solver used as ground truth.
//! - [`diagnostics`]: discrete checks of the energy and regularity estimates.
//! - [`io`], [`config`]: CSV, manifest and run-configuration formats.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod expr;
pub mod geometry;
pub mod io;
pub mod jko;
pub mod measures;
pub mod oracle;
pub mod quad;
pub mod testfn;
pub mod wb2;

pub use error::{Error, Result};
pub use geometry::{boundary_band, boundary_geometry, build_grid, BoundaryGeometry, BoxDomain, Grid};
pub use measures::{DiscreteMeasure, EnergyFunctional, Internal, Potential};
