//! Simulation and control toolkit for DC microgrids whose converters run
//! passivity-based primary voltage controllers.
//!
//! The secondary layer computes voltage references with model predictive
//! control, either by tracking precomputed loss-optimal setpoints or by
//! minimizing line losses directly (economic MPC). The crate contains the
//! network model, the primary-control passivity checks, the state-space
//! models and their discretization, an embedded ADMM QP solver, the
//! steady-state setpoint optimizer, both controllers and a closed-loop
//! scenario runner.

// Bounds are checked as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod mpc;
pub mod network;
pub mod par;
pub mod primary;
pub mod qp;
pub mod scenario;
pub mod setpoint;
pub mod sim;

pub use error::{Error, Result};
pub use grid::{BusParams, GridTopology, LineId, LineParams, NetworkMatrices};
pub use network::Microgrid;
pub use par::Execution;
