//! Confidence-driven test-time-scaling controller for next-token
//! autoregressive generators.
//!
//! The controller streams a per-trajectory confidence profile from token
//! distributions, prunes trajectories whose confidence collapses, and
//! schedules the classifier-free-guidance scale step by step. A seeded
//! synthetic source and an experiment harness exercise it without a model.

pub mod dist;
pub mod engine;
pub mod error;
pub mod harness;
pub mod policy;
pub mod profile;
pub mod rolling;
pub mod synthetic;

pub use engine::{
    DecodeSource, Engine, EngineConfig, StepObservation, StepOutcome, StepTrace, TokenAccounting,
    TrajectoryId, TrajectoryRecord, TrajectoryStatus,
};
pub use error::{Error, Result};
