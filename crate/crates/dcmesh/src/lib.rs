//! Two-layer control of meshed DC buck-converter networks.
//!
//! * [`network`] — graph, incidence matrix, Laplacian, converter constants, ZIP loads.
//! * [`primary`] — bounded-integral current controller and its Lyapunov function.
//! * [`analysis`] — pencil spectrum, kernel attractivity bounds, equilibria, storage.
//! * [`mpc`] — per-node receding-horizon voltage controller.
//! * [`sim`] — closed-loop simulation with the sample/exchange/solve cycle.
//! * [`scenario`] — scenario files and the bundled reference scenario.
//! * [`verify`] — randomised property suites.
//! * [`report`] — run reports, traces and figure data.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN. Index
// loops mirror the component-wise formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod integrate;
pub mod mpc;
pub mod network;
pub mod primary;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
