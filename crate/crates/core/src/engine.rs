//! Lockstep orchestration of an over-initialized batch of trajectories.
//!
//! Every call to [`Engine::step`] is a barrier: it takes exactly one
//! observation per active trajectory for the same step index, updates each
//! confidence profile, advances the shared threshold, evaluates the gate,
//! and emits the guidance scale each survivor should use on its next step.
//! Terminated trajectories are never replaced.

use std::collections::BTreeSet;

use crate::dist::ProbVector;
use crate::error::{invalid_config, Error, Result};
use crate::policy::{
    GateConfig, GateDecision, GuidanceScheduler, RecoveryTracker, SchedulerConfig, TerminationGate,
    TerminationReason,
};
use crate::profile::{ConfidenceState, GridPos, GridShape, ProfileConfig, ProfileSnapshot};

pub type TrajectoryId = usize;

/// One decode step of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StepObservation {
    pub trajectory: TrajectoryId,
    /// 1-based step index; step `t` generates the `t`-th token.
    pub step: usize,
    pub cond: ProbVector,
    pub uncond: ProbVector,
    pub pos: GridPos,
    pub token: usize,
}

/// Anything that can produce the next observation of one trajectory given
/// the guidance scale scheduled for it.
pub trait DecodeSource {
    fn next_observation(&mut self, cfg_scale: f64) -> Result<StepObservation>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub k_target: usize,
    pub m_buf: usize,
    pub grid: GridShape,
    pub vocab_size: usize,
    pub profile: ProfileConfig,
    pub gate: GateConfig,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    /// Termination gate on; off reduces the engine to pure profiling.
    pub pruning: bool,
    /// Scheduled guidance on; off keeps every trajectory at `s_base`.
    pub adaptive_guidance: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k_target: 4,
            m_buf: 4,
            grid: GridShape::new(16, 16),
            vocab_size: 512,
            profile: ProfileConfig::default(),
            gate: GateConfig::default(),
            scheduler: SchedulerConfig::default(),
            seed: 0,
            pruning: true,
            adaptive_guidance: true,
        }
    }
}

impl EngineConfig {
    pub fn batch_size(&self) -> usize {
        self.k_target + self.m_buf
    }

    pub fn total_steps(&self) -> usize {
        self.grid.cells()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_target == 0 {
            return Err(invalid_config("k_target must be >= 1"));
        }
        if self.grid.cells() == 0 {
            return Err(invalid_config("grid must have at least one cell"));
        }
        if self.vocab_size < 2 {
            return Err(invalid_config("vocab_size must be >= 2"));
        }
        self.profile.validate()?;
        self.gate.validate()?;
        self.scheduler.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryStatus {
    Active,
    Terminated { reason: TerminationReason, step: usize },
    Completed,
}

impl TrajectoryStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrajectoryStatus::Active => "active",
            TrajectoryStatus::Terminated { .. } => "terminated",
            TrajectoryStatus::Completed => "completed",
        }
    }
}

/// Everything recorded for one trajectory at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub profile: ProfileSnapshot,
    pub theta: Option<f64>,
    pub decision: GateDecision,
    /// Scale used to generate this step.
    pub scale_used: f64,
    /// Scale scheduled for the next step.
    pub scale_next: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub id: TrajectoryId,
    pub status: TrajectoryStatus,
    pub trace: Vec<StepTrace>,
    pub tokens_consumed: usize,
    pub final_confidence: Option<f64>,
}

impl TrajectoryRecord {
    pub fn is_active(&self) -> bool {
        self.status == TrajectoryStatus::Active
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.trace.is_empty() {
            return 0.0;
        }
        self.trace.iter().map(|s| s.profile.confidence).sum::<f64>() / self.trace.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub trajectory: TrajectoryId,
    pub decision: GateDecision,
    pub cfg_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenAccounting {
    pub total_tokens: usize,
    pub budget: usize,
    pub saved_fraction: f64,
}

#[derive(Debug, Clone)]
struct Controller {
    profile: ConfidenceState,
    recovery: RecoveryTracker,
    scheduler: GuidanceScheduler,
    scale: f64,
}

#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    gate: TerminationGate,
    records: Vec<TrajectoryRecord>,
    controllers: Vec<Controller>,
    step: usize,
}

impl Engine {
    /// Creates `k_target + m_buf` active trajectories with fresh state.
    pub fn spawn(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let gate = TerminationGate::new(cfg.gate.clone(), cfg.total_steps())?;
        let n = cfg.batch_size();
        let mut controllers = Vec::with_capacity(n);
        for _ in 0..n {
            controllers.push(Controller {
                profile: ConfidenceState::new(cfg.grid, cfg.profile.clone())?,
                recovery: RecoveryTracker::default(),
                scheduler: GuidanceScheduler::new(cfg.scheduler.clone())?,
                scale: cfg.scheduler.s_base,
            });
        }
        let records = (0..n)
            .map(|id| TrajectoryRecord {
                id,
                status: TrajectoryStatus::Active,
                trace: Vec::new(),
                tokens_consumed: 0,
                final_confidence: None,
            })
            .collect();
        Ok(Self {
            cfg,
            gate,
            records,
            controllers,
            step: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Number of completed barrier steps.
    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn theta(&self) -> Option<f64> {
        self.gate.theta()
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn active_ids(&self) -> Vec<TrajectoryId> {
        self.records.iter().filter(|r| r.is_active()).map(|r| r.id).collect()
    }

    pub fn is_finished(&self) -> bool {
        self.records.iter().all(|r| !r.is_active())
    }

    /// Guidance scale scheduled for the next step of `id`.
    pub fn scale_for(&self, id: TrajectoryId) -> Option<f64> {
        self.controllers.get(id).map(|c| c.scale)
    }

    fn validate_batch(&self, t: usize, observations: &[StepObservation]) -> Result<()> {
        let reject = |msg: String| Err(Error::BatchRejected(msg));
        if t > self.cfg.total_steps() {
            return reject(format!("step {t} exceeds total steps {}", self.cfg.total_steps()));
        }
        let active: BTreeSet<TrajectoryId> = self.active_ids().into_iter().collect();
        let mut seen = BTreeSet::new();
        let expected_pos = self.cfg.grid.raster_pos(t);
        for obs in observations {
            if !active.contains(&obs.trajectory) {
                return reject(format!("trajectory {} is not active", obs.trajectory));
            }
            if !seen.insert(obs.trajectory) {
                return reject(format!("duplicate observation for trajectory {}", obs.trajectory));
            }
            if obs.step != t {
                return reject(format!(
                    "trajectory {} reported step {}, expected {t}",
                    obs.trajectory, obs.step
                ));
            }
            if Some(obs.pos) != expected_pos {
                return reject(format!(
                    "trajectory {} at ({}, {}) breaks raster order",
                    obs.trajectory, obs.pos.row, obs.pos.col
                ));
            }
            for p in [&obs.cond, &obs.uncond] {
                if p.len() != self.cfg.vocab_size {
                    return Err(Error::DimensionMismatch {
                        expected: self.cfg.vocab_size,
                        got: p.len(),
                    });
                }
            }
        }
        if seen.len() != active.len() {
            let missing: Vec<_> = active.difference(&seen).collect();
            return reject(format!("missing observations for trajectories {missing:?}"));
        }
        Ok(())
    }

    /// Advances every active trajectory by one step.
    pub fn step(&mut self, observations: &[StepObservation]) -> Result<Vec<StepOutcome>> {
        let t = self.step + 1;
        self.validate_batch(t, observations)?;

        let mut ordered: Vec<&StepObservation> = observations.iter().collect();
        ordered.sort_by_key(|o| o.trajectory);

        let mut snapshots = Vec::with_capacity(ordered.len());
        for obs in &ordered {
            let ctl = &mut self.controllers[obs.trajectory];
            snapshots.push(ctl.profile.observe(&obs.cond, &obs.uncond, obs.pos)?);
        }

        if self.cfg.pruning {
            let confidences: Vec<f64> = snapshots.iter().map(|s| s.confidence).collect();
            self.gate.advance(t, &confidences);
        }
        let theta = self.gate.theta();

        let mut outcomes = Vec::with_capacity(ordered.len());
        for (obs, snap) in ordered.iter().zip(snapshots) {
            let id = obs.trajectory;
            let ctl = &mut self.controllers[id];
            let decision = if self.cfg.pruning {
                self.gate
                    .decide(&mut ctl.recovery, snap.confidence, snap.confidence_min, snap.rebound, t)
            } else {
                GateDecision::Continue
            };
            let scale_used = ctl.scale;
            let scale_next = if self.cfg.adaptive_guidance {
                ctl.scheduler
                    .step(snap.utilization_smoothed, snap.intrinsic, snap.rebound)
                    .scale
            } else {
                self.cfg.scheduler.s_base
            };
            ctl.scale = scale_next;

            let record = &mut self.records[id];
            record.trace.push(StepTrace {
                profile: snap,
                theta,
                decision,
                scale_used,
                scale_next,
            });
            record.tokens_consumed = t;
            match decision {
                GateDecision::Terminate(reason) => {
                    record.status = TrajectoryStatus::Terminated { reason, step: t };
                }
                GateDecision::Continue if t == self.cfg.total_steps() => {
                    record.status = TrajectoryStatus::Completed;
                    record.final_confidence = Some(snap.confidence);
                }
                GateDecision::Continue => {}
            }
            outcomes.push(StepOutcome {
                trajectory: id,
                decision,
                cfg_scale: scale_next,
            });
        }
        self.step = t;
        Ok(outcomes)
    }

    /// Drives the batch to completion; `sources[i]` feeds trajectory `i`.
    pub fn run<S: DecodeSource>(&mut self, sources: &mut [S]) -> Result<()> {
        if sources.len() != self.records.len() {
            return Err(invalid_config(format!(
                "{} sources for {} trajectories",
                sources.len(),
                self.records.len()
            )));
        }
        while !self.is_finished() {
            let mut batch = Vec::new();
            for id in self.active_ids() {
                batch.push(sources[id].next_observation(self.controllers[id].scale)?);
            }
            self.step(&batch)?;
        }
        Ok(())
    }

    /// Completed trajectory with the highest final confidence; ties go to
    /// the higher mean confidence, then the lower id.
    pub fn select_winner(&self) -> Option<TrajectoryId> {
        self.records
            .iter()
            .filter(|r| r.status == TrajectoryStatus::Completed)
            .max_by(|a, b| {
                let fa = a.final_confidence.unwrap_or(f64::NEG_INFINITY);
                let fb = b.final_confidence.unwrap_or(f64::NEG_INFINITY);
                fa.total_cmp(&fb)
                    .then(a.mean_confidence().total_cmp(&b.mean_confidence()))
                    .then(b.id.cmp(&a.id))
            })
            .map(|r| r.id)
    }

    pub fn token_accounting(&self) -> TokenAccounting {
        let total_tokens: usize = self.records.iter().map(|r| r.tokens_consumed).sum();
        let budget = self.cfg.batch_size() * self.cfg.total_steps();
        TokenAccounting {
            total_tokens,
            budget,
            saved_fraction: 1.0 - total_tokens as f64 / budget as f64,
        }
    }
}
