//! Multi-dimensional autoscaling for edge stream-processing services.
//!
//! The crate bundles a service registry, SLO arithmetic, a polynomial
//! throughput model, a constrained planner, a device simulator, scaling
//! agents and an experiment harness.

// `!(x >= 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod harness;
pub mod planner;
pub mod registry;
pub mod regression;
pub mod simenv;
pub mod slo;
