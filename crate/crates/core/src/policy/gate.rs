//! Adaptive termination gate.
//!
//! The threshold `theta` is shared across a batch. It is seeded from the
//! `p`-quantile of every confidence value observed during warm-up and then
//! EMA-adapted every `update_interval` steps. A trajectory is terminated
//! when its running minimum falls below `theta` past the protection horizon
//! and it has shown no rebound within the recovery window. Confidence below
//! the hard-fail level terminates at any step.

use crate::error::{invalid_config, Result};
use crate::profile::{ceil_count, check_rate};

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    /// Warm-up length as a fraction of total steps.
    pub warmup_fraction: f64,
    /// Quantile `p` used for threshold initialization and updates.
    pub quantile: f64,
    pub update_interval: usize,
    pub lambda_theta: f64,
    pub recovery_window: usize,
    /// Absolute rebound gap `C_t >= C_min + gap`.
    pub recovery_gap: f64,
    /// Relative rebound threshold `R_t >= r_thr`.
    pub rebound_threshold: f64,
    /// Protection horizon as a fraction of total steps.
    pub protection_fraction: f64,
    pub hard_fail: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            warmup_fraction: 0.125,
            quantile: 0.2,
            update_interval: 32,
            lambda_theta: 0.2,
            recovery_window: 32,
            recovery_gap: 0.05,
            rebound_threshold: 0.10,
            protection_fraction: 0.05,
            hard_fail: 0.3,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(invalid_config(format!("gate quantile must lie in (0, 1), got {}", self.quantile)));
        }
        for (name, f) in [
            ("warmup_fraction", self.warmup_fraction),
            ("protection_fraction", self.protection_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(invalid_config(format!("{name} must lie in [0, 1), got {f}")));
            }
        }
        check_rate("lambda_theta", self.lambda_theta)?;
        if self.update_interval == 0 || self.recovery_window == 0 {
            return Err(invalid_config("update_interval and recovery_window must be >= 1"));
        }
        if self.recovery_gap.is_nan() || self.rebound_threshold.is_nan() || self.hard_fail.is_nan() {
            return Err(invalid_config("gate thresholds must not be NaN"));
        }
        Ok(())
    }

    /// Last warm-up step (1-based, at least 1).
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        ceil_count(self.warmup_fraction * total_steps as f64).max(1)
    }

    /// First step at which low-confidence termination is allowed.
    pub fn protection_steps(&self, total_steps: usize) -> usize {
        ceil_count(self.protection_fraction * total_steps as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TerminationReason {
    LowConfidence,
    HardFail,
}

impl TerminationReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminationReason::LowConfidence => "low_confidence",
            TerminationReason::HardFail => "hard_fail",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateDecision {
    Continue,
    Terminate(TerminationReason),
}

impl GateDecision {
    pub fn as_str(&self) -> &'static str {
        match self {
            GateDecision::Continue => "continue",
            GateDecision::Terminate(r) => r.as_str(),
        }
    }
}

/// `p`-quantile by nearest rank: element `ceil(p * n)` (1-based) of the
/// ascending sort.
pub fn quantile_nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let rank = ceil_count(p * sorted.len() as f64).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Initial threshold from warm-up values; `None` leaves the gate
/// uninitialized.
pub fn init_threshold(warmup_values: &[f64], p: f64) -> Option<f64> {
    quantile_nearest_rank(warmup_values, p)
}

/// `theta <- theta + lambda * (Quantile_p(recent) - theta)`; unchanged
/// for an empty `recent`.
pub fn update_threshold(theta: f64, recent: &[f64], p: f64, lambda_theta: f64) -> f64 {
    match quantile_nearest_rank(recent, p) {
        Some(q) => theta + lambda_theta * (q - theta),
        None => theta,
    }
}

/// Per-trajectory recovery bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecoveryTracker {
    last_recovery_step: Option<usize>,
}

impl RecoveryTracker {
    pub fn last_recovery_step(&self) -> Option<usize> {
        self.last_recovery_step
    }
}

/// Records a recovery event at step `t` if either rebound condition holds
/// now, and reports whether any event lies within the last
/// `recovery_window` steps (`t - last < window`).
pub fn check_recovery(
    tracker: &mut RecoveryTracker,
    confidence: f64,
    confidence_min: f64,
    rebound: f64,
    cfg: &GateConfig,
    t: usize,
) -> bool {
    if confidence >= confidence_min + cfg.recovery_gap || rebound >= cfg.rebound_threshold {
        tracker.last_recovery_step = Some(t);
    }
    tracker
        .last_recovery_step
        .is_some_and(|last| t - last < cfg.recovery_window)
}

/// Full gate evaluation for one trajectory at step `t` of `total_steps`.
#[allow(clippy::too_many_arguments)]
pub fn gate_decision(
    tracker: &mut RecoveryTracker,
    confidence: f64,
    confidence_min: f64,
    rebound: f64,
    t: usize,
    total_steps: usize,
    theta: Option<f64>,
    cfg: &GateConfig,
) -> GateDecision {
    let recovered = check_recovery(tracker, confidence, confidence_min, rebound, cfg, t);
    if confidence < cfg.hard_fail {
        return GateDecision::Terminate(TerminationReason::HardFail);
    }
    let Some(theta) = theta else {
        return GateDecision::Continue;
    };
    if t < cfg.protection_steps(total_steps) {
        return GateDecision::Continue;
    }
    if confidence_min < theta && !recovered {
        return GateDecision::Terminate(TerminationReason::LowConfidence);
    }
    GateDecision::Continue
}

/// Batch-shared threshold state, advanced once per lockstep barrier.
#[derive(Debug, Clone)]
pub struct TerminationGate {
    cfg: GateConfig,
    total_steps: usize,
    theta: Option<f64>,
    warmup_values: Vec<f64>,
    recent: Vec<f64>,
}

impl TerminationGate {
    pub fn new(cfg: GateConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            total_steps,
            theta: None,
            warmup_values: Vec::new(),
            recent: Vec::new(),
        })
    }

    pub fn config(&self) -> &GateConfig {
        &self.cfg
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    /// Folds step `t`'s confidence values (one per active trajectory) into
    /// the threshold: collected during warm-up, initialized at warm-up end,
    /// then EMA-updated every `update_interval` steps.
    pub fn advance(&mut self, t: usize, confidences: &[f64]) {
        let warmup_end = self.cfg.warmup_steps(self.total_steps);
        if t <= warmup_end {
            self.warmup_values.extend_from_slice(confidences);
            if t == warmup_end {
                self.theta = init_threshold(&self.warmup_values, self.cfg.quantile);
            }
            return;
        }
        self.recent.extend_from_slice(confidences);
        if (t - warmup_end).is_multiple_of(self.cfg.update_interval) {
            self.theta = match self.theta {
                Some(theta) => Some(update_threshold(theta, &self.recent, self.cfg.quantile, self.cfg.lambda_theta)),
                None => init_threshold(&self.recent, self.cfg.quantile),
            };
            self.recent.clear();
        }
    }

    pub fn decide(
        &self,
        tracker: &mut RecoveryTracker,
        confidence: f64,
        confidence_min: f64,
        rebound: f64,
        t: usize,
    ) -> GateDecision {
        gate_decision(
            tracker,
            confidence,
            confidence_min,
            rebound,
            t,
            self.total_steps,
            self.theta,
            &self.cfg,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_threshold_examples() {
        let values: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(init_threshold(&values, 0.2), Some(0.2));
        assert_eq!(init_threshold(&[0.4; 7], 0.2), Some(0.4));
        assert_eq!(init_threshold(&[0.9], 0.2), Some(0.9));
        assert_eq!(init_threshold(&[], 0.2), None);
    }

    #[test]
    fn nearest_rank_oracle() {
        // rank ceil(p n), brute force over a shuffled list
        let values = [0.9, 0.1, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6, 1.0];
        for (p, expected) in [(0.05, 0.1), (0.1, 0.1), (0.15, 0.2), (0.5, 0.5), (0.55, 0.6), (0.7, 0.7), (0.99, 1.0)] {
            assert_eq!(quantile_nearest_rank(&values, p), Some(expected), "p={p}");
        }
    }

    #[test]
    fn update_threshold_examples() {
        assert!((update_threshold(0.5, &[0.3], 0.2, 0.2) - 0.46).abs() < 1e-15);
        assert_eq!(update_threshold(0.5, &[0.5, 0.9], 0.2, 0.2), 0.5);
        assert_eq!(update_threshold(0.5, &[0.3], 0.2, 1.0), 0.3);
        assert_eq!(update_threshold(0.5, &[], 0.2, 0.2), 0.5);
    }

    #[test]
    fn recovery_examples() {
        let cfg = GateConfig::default();
        let mut tr = RecoveryTracker::default();
        assert!(check_recovery(&mut tr, 0.36, 0.30, 0.0, &cfg, 40));
        assert_eq!(tr.last_recovery_step(), Some(40));

        let mut tr = RecoveryTracker::default();
        assert!(!check_recovery(&mut tr, 0.3, 0.3, 0.0, &cfg, 40));

        let mut tr = RecoveryTracker::default();
        assert!(check_recovery(&mut tr, 0.3, 0.3, cfg.rebound_threshold, &cfg, 40));

        // event at 40 still counts at 71 but not at 72
        assert!(check_recovery(&mut tr, 0.3, 0.3, 0.0, &cfg, 71));
        assert!(!check_recovery(&mut tr, 0.3, 0.3, 0.0, &cfg, 72));
    }

    #[test]
    fn gate_decision_examples() {
        let cfg = GateConfig::default();
        let mut tr = RecoveryTracker::default();
        assert_eq!(
            gate_decision(&mut tr, 0.2, 0.2, 0.0, 1, 100, None, &cfg),
            GateDecision::Terminate(TerminationReason::HardFail)
        );
        let mut tr = RecoveryTracker::default();
        assert_eq!(gate_decision(&mut tr, 0.35, 0.35, 0.0, 1, 100, Some(0.5), &cfg), GateDecision::Continue);

        // horizon is ceil(0.05 * 100) = 5
        let mut tr = RecoveryTracker::default();
        assert_eq!(gate_decision(&mut tr, 0.4, 0.4, 0.0, 4, 100, Some(0.5), &cfg), GateDecision::Continue);
        assert_eq!(
            gate_decision(&mut tr, 0.4, 0.4, 0.0, 5, 100, Some(0.5), &cfg),
            GateDecision::Terminate(TerminationReason::LowConfidence)
        );
    }

    #[test]
    fn scripted_trace_against_hand_simulation() {
        // theta = 0.5; a recovery event at step 10, then flat at the minimum.
        // Terminations are suppressed through step 41 (41 - 10 < 32) and
        // fire at step 42.
        let cfg = GateConfig::default();
        let mut tr = RecoveryTracker::default();
        let mut first_term = None;
        for t in 1..=60 {
            let (c, c_min) = if t == 10 { (0.46, 0.4) } else { (0.4, 0.4) };
            let d = gate_decision(&mut tr, c, c_min, 0.0, t, 100, Some(0.5), &cfg);
            if d != GateDecision::Continue && first_term.is_none() {
                first_term = Some(t);
                assert_eq!(d, GateDecision::Terminate(TerminationReason::LowConfidence));
            }
            if (5..10).contains(&t) {
                assert_ne!(d, GateDecision::Continue);
            }
        }
        assert_eq!(first_term, Some(5));

        let mut tr = RecoveryTracker::default();
        let mut decisions = Vec::new();
        for t in 10..=60 {
            let (c, c_min) = if t == 10 { (0.46, 0.4) } else { (0.4, 0.4) };
            decisions.push((t, gate_decision(&mut tr, c, c_min, 0.0, t, 100, Some(0.5), &cfg)));
        }
        let first = decisions.iter().find(|(_, d)| *d != GateDecision::Continue).unwrap();
        assert_eq!(first.0, 42);
    }

    #[test]
    fn gate_advance_cadence() {
        let cfg = GateConfig {
            warmup_fraction: 0.25,
            update_interval: 2,
            lambda_theta: 0.5,
            ..GateConfig::default()
        };
        let mut gate = TerminationGate::new(cfg, 8).unwrap();
        gate.advance(1, &[0.5, 0.6]);
        assert_eq!(gate.theta(), None);
        gate.advance(2, &[0.7, 0.8]);
        // sorted {0.5,0.6,0.7,0.8}, rank ceil(0.8) = 1
        assert_eq!(gate.theta(), Some(0.5));
        gate.advance(3, &[0.9]);
        assert_eq!(gate.theta(), Some(0.5));
        gate.advance(4, &[0.1]);
        // recent {0.9, 0.1} -> q = 0.1; 0.5 * 0.5 + 0.5 * 0.1
        assert!((gate.theta().unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig { quantile: 1.0, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { warmup_fraction: 1.0, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { lambda_theta: 0.0, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { recovery_window: 0, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { hard_fail: f64::NEG_INFINITY, ..GateConfig::default() }.validate().is_ok());
    }

    proptest! {
        #[test]
        fn threshold_shift_equivariance(recent in prop::collection::vec(0.0..1.0f64, 1..50), theta in 0.0..1.0f64, delta in -0.5..0.5f64, p in 0.01..0.99f64, lambda in 0.01..1.0f64) {
            let base = update_threshold(theta, &recent, p, lambda);
            let shifted: Vec<f64> = recent.iter().map(|x| x + delta).collect();
            let moved = update_threshold(theta, &shifted, p, lambda);
            prop_assert!((moved - base - lambda * delta).abs() < 1e-12);
        }

        #[test]
        fn low_confidence_respects_horizon(stream in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..100), theta in prop::option::of(0.0..1.0f64)) {
            let cfg = GateConfig::default();
            let total = 100;
            let mut tr = RecoveryTracker::default();
            let mut c_min = f64::INFINITY;
            for (i, (c, r)) in stream.into_iter().enumerate() {
                let t = i + 1;
                c_min = c_min.min(c);
                let d = gate_decision(&mut tr, c, c_min, r, t, total, theta, &cfg);
                if d == GateDecision::Terminate(TerminationReason::LowConfidence) {
                    prop_assert!(t >= cfg.protection_steps(total));
                    prop_assert!(theta.is_some());
                }
            }
        }

        #[test]
        fn above_threshold_never_terminates(stream in prop::collection::vec(0.5..1.0f64, 1..100)) {
            let cfg = GateConfig::default();
            let mut tr = RecoveryTracker::default();
            let mut c_min = f64::INFINITY;
            for (i, c) in stream.into_iter().enumerate() {
                c_min = c_min.min(c);
                let r = (c - c_min) / (c_min + 1e-8);
                prop_assert_eq!(gate_decision(&mut tr, c, c_min, r, i + 1, 100, Some(0.5), &cfg), GateDecision::Continue);
            }
        }

        #[test]
        fn disabling_recovery_terminates_superset(stream in prop::collection::vec(0.3..0.8f64, 1..100), theta in 0.3..0.8f64) {
            let on = GateConfig::default();
            let off = GateConfig { recovery_gap: f64::INFINITY, rebound_threshold: f64::INFINITY, ..GateConfig::default() };
            let (mut ta, mut tb) = (RecoveryTracker::default(), RecoveryTracker::default());
            let mut c_min = f64::INFINITY;
            let (mut term_on, mut term_off) = (false, false);
            for (i, c) in stream.into_iter().enumerate() {
                c_min = c_min.min(c);
                let r = (c - c_min) / (c_min + 1e-8);
                if !term_on && gate_decision(&mut ta, c, c_min, r, i + 1, 100, Some(theta), &on) != GateDecision::Continue {
                    term_on = true;
                }
                if !term_off && gate_decision(&mut tb, c, c_min, r, i + 1, 100, Some(theta), &off) != GateDecision::Continue {
                    term_off = true;
                }
            }
            prop_assert!(!term_on || term_off);
        }
    }
}
