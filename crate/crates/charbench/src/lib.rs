//! Characterization sweeps: add an attribute to a generated image through
//! each steering mechanism at several weights and measure how far the
//! result drifts from the original.
//!
//! Human ratings are not computed; the CSV leaves their columns empty.

pub mod metrics;
pub mod plan;
pub mod prompt;
pub mod report;
pub mod sweep;
pub mod vocab;

pub use plan::{Condition, SweepPlan, SweepSpec};
pub use sweep::{run_sweep, SweepRecord};
