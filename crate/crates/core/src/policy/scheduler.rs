//! Guidance scheduler: per-step classifier-free-guidance scale driven by
//! conditional utilization, intrinsic volatility and rebound, then
//! EMA-smoothed, clamped and passed through a deadband.

use crate::error::{invalid_config, Result};
use crate::profile::check_rate;
use crate::rolling::{population_variance, RingBuffer};

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    pub s_base: f64,
    /// Weight on under-utilization `1 - D̂`.
    pub alpha: f64,
    /// Weight on recent intrinsic variance.
    pub beta: f64,
    /// Weight on rebound (subtracted).
    pub gamma: f64,
    pub lambda_cfg: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// Deadband width: smaller moves are suppressed.
    pub epsilon_s: f64,
    pub var_window: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            s_base: 4.0,
            alpha: 0.3,
            beta: 0.4,
            gamma: 0.4,
            lambda_cfg: 0.5,
            s_min: 1.0,
            s_max: 8.0,
            epsilon_s: 0.06,
            var_window: 16,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.s_base, self.alpha, self.beta, self.gamma, self.s_min, self.s_max, self.epsilon_s];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(invalid_config("scheduler parameters must be finite"));
        }
        if !(self.s_min <= self.s_base && self.s_base <= self.s_max) {
            return Err(invalid_config(format!(
                "need s_min <= s_base <= s_max, got {} / {} / {}",
                self.s_min, self.s_base, self.s_max
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(invalid_config("scheduler coefficients must be nonnegative"));
        }
        if self.epsilon_s < 0.0 {
            return Err(invalid_config("deadband width must be nonnegative"));
        }
        check_rate("lambda_cfg", self.lambda_cfg)?;
        if self.var_window == 0 {
            return Err(invalid_config("var_window must be >= 1"));
        }
        Ok(())
    }
}

/// Population variance of the buffered intrinsic scores.
pub fn recent_variance(buf: &RingBuffer) -> f64 {
    population_variance(buf.iter())
}

/// `s_base + alpha (1 - D̂) + beta Var - gamma R`.
pub fn raw_cfg_scale(utilization: f64, variance: f64, rebound: f64, cfg: &SchedulerConfig) -> f64 {
    cfg.s_base + cfg.alpha * (1.0 - utilization) + cfg.beta * variance - cfg.gamma * rebound
}

/// Smooths and clamps `s_raw` against `s_prev`; moves smaller than the
/// deadband keep `s_prev`.
pub fn schedule_cfg(s_prev: f64, s_raw: f64, cfg: &SchedulerConfig) -> f64 {
    let candidate = ((1.0 - cfg.lambda_cfg) * s_prev + cfg.lambda_cfg * s_raw).clamp(cfg.s_min, cfg.s_max);
    if (candidate - s_prev).abs() < cfg.epsilon_s {
        s_prev
    } else {
        candidate
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    pub variance: f64,
    pub raw: f64,
    pub scale: f64,
}

/// Per-trajectory scheduler state.
#[derive(Debug, Clone)]
pub struct GuidanceScheduler {
    cfg: SchedulerConfig,
    s_prev: f64,
    intrinsic_window: RingBuffer,
}

impl GuidanceScheduler {
    pub fn new(cfg: SchedulerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            s_prev: cfg.s_base,
            intrinsic_window: RingBuffer::new(cfg.var_window),
            cfg,
        })
    }

    /// Scale to use for the next decode step.
    pub fn current(&self) -> f64 {
        self.s_prev
    }

    pub fn step(&mut self, utilization: f64, intrinsic: f64, rebound: f64) -> ScheduleStep {
        self.intrinsic_window.push(intrinsic);
        let variance = recent_variance(&self.intrinsic_window);
        let raw = raw_cfg_scale(utilization, variance, rebound, &self.cfg);
        let scale = schedule_cfg(self.s_prev, raw, &self.cfg);
        self.s_prev = scale;
        ScheduleStep { variance, raw, scale }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> SchedulerConfig {
        SchedulerConfig::default()
    }

    #[test]
    fn raw_scale_examples() {
        let c = cfg();
        assert_eq!(raw_cfg_scale(1.0, 0.0, 0.0, &c), c.s_base);
        assert!((raw_cfg_scale(0.5, 0.1, 0.2, &c) - (c.s_base + 0.11)).abs() < 1e-12);
        assert!((raw_cfg_scale(0.0, 0.0, 0.0, &c) - (c.s_base + c.alpha)).abs() < 1e-15);
    }

    #[test]
    fn schedule_examples() {
        let c = cfg();
        assert_eq!(schedule_cfg(4.0, 4.0, &c), 4.0);
        assert_eq!(schedule_cfg(4.0, 100.0, &c), 8.0);
        let c = SchedulerConfig { epsilon_s: 0.01, lambda_cfg: 0.2, ..cfg() };
        assert!((schedule_cfg(4.0, 4.5, &c) - 4.1).abs() < 1e-12);
        // 0.2 * 0.04 = 0.008 < 0.01: suppressed
        assert_eq!(schedule_cfg(4.0, 4.04, &c), 4.0);
    }

    #[test]
    fn variance_window() {
        let mut rb = RingBuffer::new(3);
        rb.push(0.2);
        assert_eq!(recent_variance(&rb), 0.0);
        rb.push(0.5);
        rb.push(0.8);
        assert!((recent_variance(&rb) - 0.06).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(SchedulerConfig { s_base: 9.0, ..cfg() }.validate().is_err());
        assert!(SchedulerConfig { alpha: -0.1, ..cfg() }.validate().is_err());
        assert!(SchedulerConfig { epsilon_s: -1.0, ..cfg() }.validate().is_err());
        assert!(SchedulerConfig { var_window: 0, ..cfg() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn emitted_scale_bounded_and_deadbanded(stream in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..5.0f64), 1..200), eps in 0.0..0.3f64) {
            let c = SchedulerConfig { epsilon_s: eps, ..cfg() };
            let mut s = GuidanceScheduler::new(c.clone()).unwrap();
            for (d, i, r) in stream {
                let prev = s.current();
                let out = s.step(d, i, r);
                prop_assert!(out.scale >= c.s_min && out.scale <= c.s_max);
                if out.scale != prev {
                    let candidate = ((1.0 - c.lambda_cfg) * prev + c.lambda_cfg * out.raw).clamp(c.s_min, c.s_max);
                    prop_assert_eq!(out.scale, candidate);
                    prop_assert!((candidate - prev).abs() >= c.epsilon_s);
                }
            }
        }
    }
}
