//! Confidence-guided control policies.

pub mod gate;
pub mod scheduler;

pub use gate::{
    check_recovery, gate_decision, init_threshold, quantile_nearest_rank, update_threshold, GateConfig,
    GateDecision, RecoveryTracker, TerminationGate, TerminationReason,
};
pub use scheduler::{
    raw_cfg_scale, recent_variance, schedule_cfg, GuidanceScheduler, ScheduleStep, SchedulerConfig,
};
