//! ContactNets-style learning of rigid-body contact dynamics.
//!
//! The crate learns inter-body signed distance functions and contact-frame
//! Jacobians from state-transition data, trains them with a convex
//! mechanics-inspired loss, and predicts motion with an LCP-based
//! time-stepping simulator.

pub mod autodiff;
pub mod dynamics;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod qp;
pub mod sim;
pub mod toy1d;
pub mod training;
