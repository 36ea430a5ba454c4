//! Dual-channel streaming confidence profile.
//!
//! Each decode step feeds the conditional and unconditional distributions
//! of one trajectory through two channels:
//!
//! * the intrinsic channel mixes smoothed token confidence (entropy and
//!   top-1/top-2 margin) with the stability of the worst spatial blocks of
//!   the token grid;
//! * the conditional channel z-scores `KL(cond || uncond)` over a rolling
//!   window and maps it to `[0, 1]`.
//!
//! The two are blended into a unified confidence `C_t`, whose running
//! minimum and relative rebound drive the termination gate and the
//! guidance scheduler.

use crate::dist::{kl_divergence, normalized_entropy, top2_margin, ProbVector};
use crate::error::{invalid_config, invalid_input, Result};
use crate::rolling::{RollingMinMax, RollingMoments};

const WEIGHT_TOLERANCE: f64 = 1e-9;

/// `ceil(x)` that ignores floating-point noise just above an integer.
pub(crate) fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Row/column position on the token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

impl GridPos {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Position of the 1-based decode step `step` in raster order.
    pub fn raster_pos(&self, step: usize) -> Option<GridPos> {
        if step == 0 || step > self.cells() {
            return None;
        }
        let idx = step - 1;
        Some(GridPos::new(idx / self.cols, idx % self.cols))
    }

    pub fn contains(&self, pos: GridPos) -> bool {
        pos.row < self.rows && pos.col < self.cols
    }
}

/// When a spatial block counts as filled enough to be ranked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillRule {
    /// Fraction of the block's cells that must be generated, in `(0, 1]`.
    Ratio(f64),
    /// Minimum number of generated cells (capped at the block's size).
    MinCells(usize),
}

impl FillRule {
    fn eligible(&self, filled: usize, cells: usize) -> bool {
        match *self {
            FillRule::Ratio(r) => filled as f64 >= r * cells as f64 - 1e-12,
            FillRule::MinCells(n) => filled >= n.min(cells).max(1),
        }
    }
}

/// Optional post-blend calibration of the unified confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Calibration {
    None,
    /// `sigmoid(gain * (C - center))`.
    AffineSigmoid { gain: f64, center: f64 },
}

impl Calibration {
    pub fn apply(&self, c: f64) -> f64 {
        match *self {
            Calibration::None => c,
            Calibration::AffineSigmoid { gain, center } => 1.0 / (1.0 + (-gain * (c - center)).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileConfig {
    /// Weight of normalized entropy in the uncertainty surrogate.
    pub alpha_entropy: f64,
    /// Weight of `1 - margin` in the uncertainty surrogate.
    pub alpha_margin: f64,
    pub lambda_tok: f64,
    pub block_size: usize,
    pub fill_rule: FillRule,
    /// Fraction of eligible blocks averaged into `E_worst`.
    pub worst_fraction: f64,
    pub minmax_window: usize,
    pub w_tok: f64,
    pub w_blk: f64,
    pub lambda_intrinsic: f64,
    pub z_max: f64,
    pub zscore_window: usize,
    pub lambda_utilization: f64,
    pub w_intrinsic: f64,
    pub w_utilization: f64,
    pub calibration: Calibration,
    pub epsilon: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            alpha_entropy: 0.5,
            alpha_margin: 0.5,
            lambda_tok: 0.2,
            block_size: 4,
            fill_rule: FillRule::Ratio(0.5),
            worst_fraction: 0.1,
            minmax_window: 64,
            w_tok: 0.65,
            w_blk: 0.35,
            lambda_intrinsic: 0.2,
            z_max: 2.0,
            zscore_window: 64,
            lambda_utilization: 0.2,
            w_intrinsic: 0.75,
            w_utilization: 0.25,
            calibration: Calibration::None,
            epsilon: 1e-8,
        }
    }
}

fn check_pair(name: &str, a: f64, b: f64) -> Result<()> {
    if a < 0.0 || b < 0.0 || !a.is_finite() || !b.is_finite() || (a + b - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(invalid_config(format!("{name} weights must be nonnegative and sum to 1, got {a} + {b}")));
    }
    Ok(())
}

pub(crate) fn check_rate(name: &str, rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(invalid_config(format!("{name} must lie in (0, 1], got {rate}")));
    }
    Ok(())
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        check_pair("alpha_entropy/alpha_margin", self.alpha_entropy, self.alpha_margin)?;
        check_pair("w_tok/w_blk", self.w_tok, self.w_blk)?;
        check_pair("w_intrinsic/w_utilization", self.w_intrinsic, self.w_utilization)?;
        check_rate("lambda_tok", self.lambda_tok)?;
        check_rate("lambda_intrinsic", self.lambda_intrinsic)?;
        check_rate("lambda_utilization", self.lambda_utilization)?;
        check_rate("worst_fraction", self.worst_fraction)?;
        if self.block_size == 0 {
            return Err(invalid_config("block_size must be >= 1"));
        }
        match self.fill_rule {
            FillRule::Ratio(r) => check_rate("fill ratio", r)?,
            FillRule::MinCells(0) => return Err(invalid_config("minimum filled cells must be >= 1")),
            FillRule::MinCells(_) => {}
        }
        if self.minmax_window < 2 || self.zscore_window < 2 {
            return Err(invalid_config("rolling windows must hold at least 2 steps"));
        }
        if !(self.z_max > 0.0 && self.z_max.is_finite()) {
            return Err(invalid_config(format!("z_max must be positive, got {}", self.z_max)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid_config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if let Calibration::AffineSigmoid { gain, center } = self.calibration {
            if !gain.is_finite() || !center.is_finite() {
                return Err(invalid_config("calibration parameters must be finite"));
            }
        }
        Ok(())
    }
}

/// `s_tok = 1 - (alpha_H * H_norm + alpha_M * (1 - margin))`.
pub fn token_confidence(p: &ProbVector, cfg: &ProfileConfig) -> Result<f64> {
    check_pair("alpha_entropy/alpha_margin", cfg.alpha_entropy, cfg.alpha_margin)?;
    Ok(token_confidence_from(normalized_entropy(p), top2_margin(p), cfg))
}

fn token_confidence_from(h_norm: f64, margin: f64, cfg: &ProfileConfig) -> f64 {
    let u = cfg.alpha_entropy * h_norm + cfg.alpha_margin * (1.0 - margin);
    (1.0 - u).clamp(0.0, 1.0)
}

pub fn update_ema(prev: f64, sample: f64, rate: f64) -> Result<f64> {
    check_rate("EMA rate", rate)?;
    Ok((1.0 - rate) * prev + rate * sample)
}

/// EMA seeded by its first sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ema {
    rate: f64,
    value: Option<f64>,
}

impl Ema {
    pub fn new(rate: f64) -> Self {
        Self { rate, value: None }
    }

    pub fn update(&mut self, sample: f64) -> f64 {
        let next = match self.value {
            None => sample,
            Some(prev) => (1.0 - self.rate) * prev + self.rate * sample,
        };
        self.value = Some(next);
        next
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// Indices of the `ceil(q * n)` (at least one) blocks with the largest mean,
/// ties broken by lower index.
pub fn worst_block_set(block_means: &[(usize, f64)], worst_fraction: f64) -> Vec<usize> {
    if block_means.is_empty() {
        return Vec::new();
    }
    let mut ranked = block_means.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let take = ceil_count(worst_fraction * ranked.len() as f64).clamp(1, ranked.len());
    ranked[..take].iter().map(|&(i, _)| i).collect()
}

#[derive(Debug, Clone, Copy, Default)]
struct BlockAcc {
    sum: f64,
    filled: usize,
    cells: usize,
}

/// Result of recording one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstBlocks {
    pub e_worst: f64,
    /// Selected block indices; empty when no block was eligible and the
    /// grid-wide fallback mean was used.
    pub selected: Vec<usize>,
}

/// Intrinsic-channel state: token-confidence EMA, entropy grid, rolling
/// min-max window of `E_worst`, and the intrinsic-score EMA.
#[derive(Debug, Clone)]
pub struct IntrinsicState {
    shape: GridShape,
    block_size: usize,
    blocks_per_row: usize,
    grid: Vec<Option<f64>>,
    blocks: Vec<BlockAcc>,
    filled_sum: f64,
    filled_count: usize,
    ema_tok: Ema,
    ema_intrinsic: Ema,
    worst_window: RollingMinMax,
}

impl IntrinsicState {
    pub fn new(shape: GridShape, cfg: &ProfileConfig) -> Self {
        let b = cfg.block_size;
        let blocks_per_row = shape.cols.div_ceil(b);
        let blocks_per_col = shape.rows.div_ceil(b);
        let mut blocks = vec![BlockAcc::default(); blocks_per_row * blocks_per_col];
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                blocks[(r / b) * blocks_per_row + c / b].cells += 1;
            }
        }
        Self {
            shape,
            block_size: b,
            blocks_per_row,
            grid: vec![None; shape.cells()],
            blocks,
            filled_sum: 0.0,
            filled_count: 0,
            ema_tok: Ema::new(cfg.lambda_tok),
            ema_intrinsic: Ema::new(cfg.lambda_intrinsic),
            worst_window: RollingMinMax::new(cfg.minmax_window),
        }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_of(&self, pos: GridPos) -> usize {
        (pos.row / self.block_size) * self.blocks_per_row + pos.col / self.block_size
    }

    /// Mean normalized entropy of every block with at least one filled cell.
    pub fn block_means(&self) -> Vec<(usize, f64)> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.filled > 0)
            .map(|(i, b)| (i, b.sum / b.filled as f64))
            .collect()
    }

    /// Stores `h_norm` at `pos` and returns the mean entropy of the worst
    /// eligible blocks.
    pub fn record_and_worst_block(
        &mut self,
        pos: GridPos,
        h_norm: f64,
        cfg: &ProfileConfig,
    ) -> Result<WorstBlocks> {
        if !self.shape.contains(pos) {
            return Err(invalid_input(format!(
                "position ({}, {}) outside {}x{} grid",
                pos.row, pos.col, self.shape.rows, self.shape.cols
            )));
        }
        if !(0.0..=1.0).contains(&h_norm) {
            return Err(invalid_input(format!("normalized entropy {h_norm} outside [0, 1]")));
        }
        let cell = pos.row * self.shape.cols + pos.col;
        let block = self.block_of(pos);
        match self.grid[cell].replace(h_norm) {
            Some(old) => {
                self.blocks[block].sum += h_norm - old;
                self.filled_sum += h_norm - old;
            }
            None => {
                self.blocks[block].sum += h_norm;
                self.blocks[block].filled += 1;
                self.filled_sum += h_norm;
                self.filled_count += 1;
            }
        }

        let eligible: Vec<(usize, f64)> = self
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.filled > 0 && cfg.fill_rule.eligible(b.filled, b.cells))
            .map(|(i, b)| (i, b.sum / b.filled as f64))
            .collect();
        if eligible.is_empty() {
            return Ok(WorstBlocks {
                e_worst: self.filled_sum / self.filled_count as f64,
                selected: Vec::new(),
            });
        }
        let selected = worst_block_set(&eligible, cfg.worst_fraction);
        let total: f64 = selected
            .iter()
            .map(|&i| self.blocks[i].sum / self.blocks[i].filled as f64)
            .sum();
        Ok(WorstBlocks {
            e_worst: total / selected.len() as f64,
            selected,
        })
    }

    /// Pushes `e_worst` into the rolling window and returns
    /// `B_t = 1 - minmax(e_worst)`.
    pub fn block_stability(&mut self, e_worst: f64) -> f64 {
        self.worst_window.push(e_worst);
        1.0 - self.worst_window.normalize(e_worst)
    }

    /// Updates the token-confidence EMA with `s_tok`, mixes it with `B_t`,
    /// and returns the smoothed intrinsic score `I_t`.
    pub fn intrinsic_score(&mut self, s_tok: f64, stability: f64, cfg: &ProfileConfig) -> f64 {
        let s_bar = self.ema_tok.update(s_tok);
        let raw = cfg.w_tok * s_bar + cfg.w_blk * stability;
        self.ema_intrinsic.update(raw).clamp(0.0, 1.0)
    }

    pub fn smoothed_token_confidence(&self) -> Option<f64> {
        self.ema_tok.value()
    }
}

/// Conditional-channel state: rolling KL window and the `D̂_t` EMA.
#[derive(Debug, Clone)]
pub struct ConditionalState {
    kl_window: RollingMoments,
    ema_utilization: Ema,
}

impl ConditionalState {
    pub fn new(cfg: &ProfileConfig) -> Self {
        Self {
            kl_window: RollingMoments::new(cfg.zscore_window),
            ema_utilization: Ema::new(cfg.lambda_utilization),
        }
    }

    /// Pushes `kl` into the window and returns the unit-mapped, clipped
    /// z-score `D_t`.
    pub fn conditional_utilization(&mut self, kl: f64, cfg: &ProfileConfig) -> f64 {
        self.kl_window.push(kl);
        utilization_from_window(kl, self.kl_window.mean(), self.kl_window.std_dev(), cfg)
    }

    /// Folds `D_t` into the smoothed utilization `D̂_t`.
    pub fn smooth(&mut self, d: f64) -> f64 {
        self.ema_utilization.update(d).clamp(0.0, 1.0)
    }

    pub fn window(&self) -> &RollingMoments {
        &self.kl_window
    }
}

/// `D = 0.5 + 0.5 * clip((k - mean) / (std + eps), ±z_max) / z_max`.
pub fn utilization_from_window(kl: f64, mean: f64, std: f64, cfg: &ProfileConfig) -> f64 {
    let z = (kl - mean) / (std + cfg.epsilon);
    let clipped = z.clamp(-cfg.z_max, cfg.z_max);
    (0.5 + 0.5 * clipped / cfg.z_max).clamp(0.0, 1.0)
}

/// Unified confidence, its running minimum, and the relative rebound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unified {
    pub confidence: f64,
    pub confidence_min: f64,
    pub rebound: f64,
}

/// Every intermediate quantity produced for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSnapshot {
    pub step: usize,
    pub pos: GridPos,
    pub h_norm: f64,
    pub margin: f64,
    pub s_tok: f64,
    pub e_worst: f64,
    pub stability: f64,
    pub intrinsic: f64,
    pub kl: f64,
    pub utilization: f64,
    pub utilization_smoothed: f64,
    pub confidence: f64,
    pub confidence_min: f64,
    pub rebound: f64,
}

/// Per-trajectory streaming confidence state.
#[derive(Debug, Clone)]
pub struct ConfidenceState {
    cfg: ProfileConfig,
    pub intrinsic: IntrinsicState,
    pub conditional: ConditionalState,
    confidence: Option<f64>,
    confidence_min: Option<f64>,
    rebound: f64,
    step: usize,
    history: Option<Vec<(f64, f64, f64, f64)>>,
}

impl ConfidenceState {
    pub fn new(shape: GridShape, cfg: ProfileConfig) -> Result<Self> {
        cfg.validate()?;
        if shape.cells() == 0 {
            return Err(invalid_config("grid must have at least one cell"));
        }
        Ok(Self {
            intrinsic: IntrinsicState::new(shape, &cfg),
            conditional: ConditionalState::new(&cfg),
            cfg,
            confidence: None,
            confidence_min: None,
            rebound: 0.0,
            step: 0,
            history: None,
        })
    }

    /// Keeps the per-step `(I, D̂, C, R)` series in memory.
    pub fn with_history(mut self) -> Self {
        self.history = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &ProfileConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn confidence(&self) -> Option<f64> {
        self.confidence
    }

    pub fn confidence_min(&self) -> Option<f64> {
        self.confidence_min
    }

    pub fn rebound(&self) -> f64 {
        self.rebound
    }

    pub fn history(&self) -> Option<&[(f64, f64, f64, f64)]> {
        self.history.as_deref()
    }

    /// Blends the two channels, applies calibration, and updates the
    /// running minimum and rebound.
    pub fn unified_confidence(&mut self, intrinsic: f64, utilization: f64) -> Unified {
        let raw = self.cfg.w_intrinsic * intrinsic + self.cfg.w_utilization * utilization;
        let c = self.cfg.calibration.apply(raw);
        let c_min = self.confidence_min.map_or(c, |m| m.min(c));
        let rebound = ((c - c_min) / (c_min.abs() + self.cfg.epsilon)).max(0.0);
        self.confidence = Some(c);
        self.confidence_min = Some(c_min);
        self.rebound = rebound;
        Unified {
            confidence: c,
            confidence_min: c_min,
            rebound,
        }
    }

    /// Runs one full profile update for the observation at `pos`.
    pub fn observe(&mut self, cond: &ProbVector, uncond: &ProbVector, pos: GridPos) -> Result<ProfileSnapshot> {
        let h_norm = normalized_entropy(cond);
        let margin = top2_margin(cond);
        let s_tok = token_confidence_from(h_norm, margin, &self.cfg);
        let worst = self.intrinsic.record_and_worst_block(pos, h_norm, &self.cfg)?;
        let stability = self.intrinsic.block_stability(worst.e_worst);
        let intrinsic = self.intrinsic.intrinsic_score(s_tok, stability, &self.cfg);

        let kl = kl_divergence(cond, uncond)?;
        let utilization = self.conditional.conditional_utilization(kl, &self.cfg);
        let utilization_smoothed = self.conditional.smooth(utilization);

        let unified = self.unified_confidence(intrinsic, utilization_smoothed);
        self.step += 1;
        if let Some(h) = self.history.as_mut() {
            h.push((intrinsic, utilization_smoothed, unified.confidence, unified.rebound));
        }
        Ok(ProfileSnapshot {
            step: self.step,
            pos,
            h_norm,
            margin,
            s_tok,
            e_worst: worst.e_worst,
            stability,
            intrinsic,
            kl,
            utilization,
            utilization_smoothed,
            confidence: unified.confidence,
            confidence_min: unified.confidence_min,
            rebound: unified.rebound,
        })
    }
}
