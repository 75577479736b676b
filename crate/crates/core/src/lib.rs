//! Two-layer quasi-geostrophic channel model with a CABARET advection
//! scheme, transport-noise stochastic forcing and particle-filter data
//! assimilation (bootstrap, tempered with jittering, and nudged).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cabaret;
pub mod diagnostics;
pub mod elliptic;
pub mod error;
pub mod field;
pub mod filter;
pub mod grid;
pub mod observations;
pub mod snapshot;
pub mod stochastic;

pub use error::{QgError, Result};
pub use field::{CellVelocity, FaceField, LayeredField, LAYERS};
pub use grid::{Grid, Station, StationSet};
