//! Run configuration and its flat `key = value` file format.
//!
//! Keys are dotted (`gate.quantile = 0.2`); TOML tables are accepted too and
//! flattened to the same keys. Every key has a default, so an empty file is a
//! complete configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::EngineConfig;
use crate::error::{invalid_config, Error, Result};
use crate::profile::{Calibration, FillRule, GridShape};
use crate::synthetic::{Label, ScenarioKind, ScenarioSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Gate and scheduler both active.
    Adaptive,
    /// Gate disabled, fixed guidance at `s_base`.
    Baseline,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scalingar" | "adaptive" => Ok(Mode::Adaptive),
            "baseline" => Ok(Mode::Baseline),
            other => Err(invalid_config(format!("unknown mode {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Adaptive => "adaptive",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceLevel {
    None,
    /// Last record of each trajectory only.
    Summary,
    /// One record per trajectory and step.
    Full,
}

impl TraceLevel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TraceLevel::None),
            "summary" => Ok(TraceLevel::Summary),
            "full" => Ok(TraceLevel::Full),
            other => Err(invalid_config(format!("unknown trace level {other:?}"))),
        }
    }
}

/// Composition of the synthetic cohort and its scenario parameters.
///
/// Trajectory ids are assigned stable first, then pocket, then fade. Stable
/// members are labeled good, the others doomed.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub stable: usize,
    pub pocket: usize,
    pub fade: usize,
    pub concentration: f64,
    pub logit_noise: f64,
    pub uncond_flatness: f64,
    pub scale_reference: f64,
    /// Pocket onset as a fraction of total steps.
    pub pocket_onset: f64,
    /// Pocket length as a fraction of total steps, cut at the last step.
    pub pocket_duration: f64,
    /// Number of affected blocks, drawn among blocks still open at onset.
    pub pocket_blocks: usize,
    pub pocket_level: f64,
    /// Fade start as a fraction of total steps.
    pub fade_start: f64,
    pub fade_rate: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            stable: 4,
            pocket: 4,
            fade: 0,
            concentration: 8.5,
            logit_noise: 1.5,
            uncond_flatness: 0.5,
            scale_reference: 4.0,
            pocket_onset: 0.2,
            pocket_duration: 1.0,
            pocket_blocks: 8,
            pocket_level: 0.9,
            fade_start: 0.2,
            fade_rate: 0.02,
        }
    }
}

impl CohortConfig {
    pub fn size(&self) -> usize {
        self.stable + self.pocket + self.fade
    }

    /// Resizes to `n` members: `n - n/2` stable, `n/2` doomed. Doomed members
    /// keep the failure mode that dominated the previous mix.
    pub fn resize(&mut self, n: usize) {
        let doomed = n / 2;
        let to_fade = self.fade > self.pocket;
        self.stable = n - doomed;
        self.pocket = if to_fade { 0 } else { doomed };
        self.fade = if to_fade { doomed } else { 0 };
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub cohort: CohortConfig,
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub trace_level: TraceLevel,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            cohort: CohortConfig::default(),
            mode: Mode::Adaptive,
            out_dir: PathBuf::from("out"),
            trace_level: TraceLevel::Full,
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(invalid_config(format!("{key}: expected a number"))),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(invalid_config(format!("{key}: expected a nonnegative integer"))),
    }
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| invalid_config(format!("{key}: expected a string")))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| invalid_config(format!("config parse error: {e}")))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);

        let mut cfg = RunConfig::default();
        let (mut gain, mut center) = (None, None);
        for (key, v) in &flat {
            let e = &mut cfg.engine;
            let p = &mut e.profile;
            let g = &mut e.gate;
            let s = &mut e.scheduler;
            let c = &mut cfg.cohort;
            let f = || as_f64(key, v);
            let u = || as_usize(key, v);
            match key.as_str() {
                "run.mode" => cfg.mode = Mode::parse(as_str(key, v)?)?,
                "run.trace_level" => cfg.trace_level = TraceLevel::parse(as_str(key, v)?)?,
                "run.out" => cfg.out_dir = PathBuf::from(as_str(key, v)?),
                "run.seed" | "engine.seed" => {
                    e.seed = match v {
                        toml::Value::Integer(i) if *i >= 0 => *i as u64,
                        _ => return Err(invalid_config(format!("{key}: expected a nonnegative integer"))),
                    }
                }

                "engine.k_target" => e.k_target = u()?,
                "engine.m_buf" => e.m_buf = u()?,
                "engine.grid_rows" => e.grid.rows = u()?,
                "engine.grid_cols" => e.grid.cols = u()?,
                "engine.vocab_size" => e.vocab_size = u()?,

                "profile.alpha_entropy" => p.alpha_entropy = f()?,
                "profile.alpha_margin" => p.alpha_margin = f()?,
                "profile.lambda_tok" => p.lambda_tok = f()?,
                "profile.block_size" => p.block_size = u()?,
                "profile.fill_ratio" => p.fill_rule = FillRule::Ratio(f()?),
                "profile.fill_min_cells" => p.fill_rule = FillRule::MinCells(u()?),
                "profile.worst_fraction" => p.worst_fraction = f()?,
                "profile.minmax_window" => p.minmax_window = u()?,
                "profile.w_tok" => p.w_tok = f()?,
                "profile.w_blk" => p.w_blk = f()?,
                "profile.lambda_intrinsic" => p.lambda_intrinsic = f()?,
                "profile.z_max" => p.z_max = f()?,
                "profile.zscore_window" => p.zscore_window = u()?,
                "profile.lambda_utilization" => p.lambda_utilization = f()?,
                "profile.w_intrinsic" => p.w_intrinsic = f()?,
                "profile.w_utilization" => p.w_utilization = f()?,
                "profile.calibration_gain" => gain = Some(f()?),
                "profile.calibration_center" => center = Some(f()?),
                "profile.epsilon" => p.epsilon = f()?,

                "gate.warmup_fraction" => g.warmup_fraction = f()?,
                "gate.quantile" => g.quantile = f()?,
                "gate.update_interval" => g.update_interval = u()?,
                "gate.lambda_theta" => g.lambda_theta = f()?,
                "gate.recovery_window" => g.recovery_window = u()?,
                "gate.recovery_gap" => g.recovery_gap = f()?,
                "gate.rebound_threshold" => g.rebound_threshold = f()?,
                "gate.protection_fraction" => g.protection_fraction = f()?,
                "gate.hard_fail" => g.hard_fail = f()?,

                "scheduler.s_base" => s.s_base = f()?,
                "scheduler.alpha" => s.alpha = f()?,
                "scheduler.beta" => s.beta = f()?,
                "scheduler.gamma" => s.gamma = f()?,
                "scheduler.lambda_cfg" => s.lambda_cfg = f()?,
                "scheduler.s_min" => s.s_min = f()?,
                "scheduler.s_max" => s.s_max = f()?,
                "scheduler.epsilon_s" => s.epsilon_s = f()?,
                "scheduler.var_window" => s.var_window = u()?,

                "cohort.stable" => c.stable = u()?,
                "cohort.pocket" => c.pocket = u()?,
                "cohort.fade" => c.fade = u()?,
                "cohort.concentration" => c.concentration = f()?,
                "cohort.logit_noise" => c.logit_noise = f()?,
                "cohort.uncond_flatness" => c.uncond_flatness = f()?,
                "cohort.scale_reference" => c.scale_reference = f()?,
                "cohort.pocket_onset" => c.pocket_onset = f()?,
                "cohort.pocket_duration" => c.pocket_duration = f()?,
                "cohort.pocket_blocks" => c.pocket_blocks = u()?,
                "cohort.pocket_level" => c.pocket_level = f()?,
                "cohort.fade_start" => c.fade_start = f()?,
                "cohort.fade_rate" => c.fade_rate = f()?,

                other => return Err(invalid_config(format!("unknown config key {other:?}"))),
            }
        }
        match (gain, center) {
            (None, None) => {}
            (Some(gain), Some(center)) => cfg.engine.profile.calibration = Calibration::AffineSigmoid { gain, center },
            _ => {
                return Err(invalid_config(
                    "profile.calibration_gain and profile.calibration_center must be set together",
                ))
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Engine configuration with the mode's switches applied.
    pub fn engine_config(&self) -> EngineConfig {
        let adaptive = self.mode == Mode::Adaptive;
        EngineConfig {
            pruning: adaptive,
            adaptive_guidance: adaptive,
            ..self.engine.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.engine_config().validate()?;
        let n = self.engine.batch_size();
        if self.cohort.size() != n {
            return Err(invalid_config(format!(
                "cohort has {} members but k_target + m_buf = {n}",
                self.cohort.size()
            )));
        }
        let c = &self.cohort;
        for (name, x) in [("pocket_onset", c.pocket_onset), ("fade_start", c.fade_start)] {
            if !(0.0..1.0).contains(&x) {
                return Err(invalid_config(format!("cohort.{name} must lie in [0, 1)")));
            }
        }
        if !(c.pocket_duration > 0.0 && c.pocket_duration <= 1.0) {
            return Err(invalid_config("cohort.pocket_duration must lie in (0, 1]"));
        }
        if c.pocket > 0 && c.pocket_blocks > self.open_blocks().len() {
            return Err(invalid_config(format!(
                "cohort.pocket_blocks = {} exceeds the {} blocks open at onset",
                c.pocket_blocks,
                self.open_blocks().len()
            )));
        }
        for spec in self.scenarios() {
            spec.validate()?;
        }
        Ok(())
    }

    fn total_steps(&self) -> usize {
        self.engine.total_steps()
    }

    fn step_at(&self, fraction: f64) -> usize {
        ((fraction * self.total_steps() as f64).ceil() as usize).max(1)
    }

    /// Blocks containing at least one cell generated at or after pocket onset.
    fn open_blocks(&self) -> Vec<usize> {
        let grid: GridShape = self.engine.grid;
        let b = self.engine.profile.block_size.max(1);
        let onset = self.step_at(self.cohort.pocket_onset);
        let Some(pos) = grid.raster_pos(onset) else {
            return Vec::new();
        };
        let per_row = grid.cols.div_ceil(b);
        let first = (pos.row / b) * per_row;
        (first..grid.rows.div_ceil(b) * per_row).collect()
    }

    /// Seed for cohort member `id`, derived from the run seed.
    pub fn member_seed(&self, id: usize) -> u64 {
        splitmix64(self.engine.seed ^ splitmix64(id as u64 + 1))
    }

    /// Scenario for every cohort member, indexed by trajectory id.
    pub fn scenarios(&self) -> Vec<ScenarioSpec> {
        let c = &self.cohort;
        let t = self.total_steps();
        let onset = self.step_at(c.pocket_onset);
        let duration = ((c.pocket_duration * t as f64).ceil() as usize).min(t + 1 - onset.min(t));
        let open = self.open_blocks();
        let mut specs = Vec::with_capacity(c.size());
        for id in 0..c.size() {
            let seed = self.member_seed(id);
            let (kind, label) = if id < c.stable {
                (ScenarioKind::Stable, Label::Good)
            } else if id < c.stable + c.pocket {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
                let k = c.pocket_blocks.min(open.len());
                let mut blocks: Vec<usize> = rand::seq::index::sample(&mut rng, open.len(), k)
                    .into_iter()
                    .map(|i| open[i])
                    .collect();
                blocks.sort_unstable();
                let kind = ScenarioKind::InstabilityPocket {
                    onset,
                    duration,
                    blocks,
                    level: c.pocket_level,
                };
                (kind, Label::Doomed)
            } else {
                let kind = ScenarioKind::SemanticFade {
                    start: self.step_at(c.fade_start),
                    rate: c.fade_rate,
                };
                (kind, Label::Doomed)
            };
            let mut spec = ScenarioSpec::new(kind, label, seed);
            spec.vocab = self.engine.vocab_size;
            spec.grid = self.engine.grid;
            spec.block_size = self.engine.profile.block_size;
            spec.concentration = c.concentration;
            spec.logit_noise = c.logit_noise;
            spec.uncond_flatness = c.uncond_flatness;
            spec.scale_reference = c.scale_reference;
            specs.push(spec);
        }
        specs
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
