//! Run-level metrics and their CSV forms.

use std::path::Path;

use crate::engine::{TokenAccounting, TrajectoryId, TrajectoryRecord, TrajectoryStatus};
use crate::error::Result;
use crate::synthetic::{Label, ScenarioSpec};

/// Bins of the confidence histograms over `[0, 1]`.
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMetrics {
    pub id: TrajectoryId,
    pub label: Label,
    pub scenario: &'static str,
    pub status: TrajectoryStatus,
    pub tokens: usize,
    pub final_confidence: Option<f64>,
    pub mean_confidence: f64,
    /// Mean emitted scale before the scenario's failure phase.
    pub mean_scale_pre: Option<f64>,
    /// Mean emitted scale from the failure phase on.
    pub mean_scale_event: Option<f64>,
    /// Mean `1 - D̂` from the failure phase on.
    pub mean_underuse_event: Option<f64>,
    /// Steps whose emitted scale differs from the scale in use.
    pub scale_moves: usize,
    pub winner: bool,
}

/// Per-label confidence counts; one count per generated token.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfidenceHistogram {
    pub good: Vec<usize>,
    pub doomed: Vec<usize>,
}

impl ConfidenceHistogram {
    pub fn bin_of(c: f64) -> usize {
        ((c.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
    }

    pub fn total(&self) -> usize {
        self.good.iter().chain(&self.doomed).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub run_id: String,
    pub trajectories: Vec<TrajectoryMetrics>,
    /// Doomed share of terminated trajectories; 1 when none terminated.
    pub precision: f64,
    pub precision_degenerate: bool,
    /// Terminated share of doomed trajectories; 1 when none is doomed.
    pub recall: f64,
    pub recall_degenerate: bool,
    pub accounting: TokenAccounting,
    pub winner: Option<TrajectoryId>,
    pub histogram: ConfidenceHistogram,
}

impl Metrics {
    pub fn winner_label(&self) -> Option<Label> {
        self.winner.map(|w| self.trajectories[w].label)
    }

    /// Share of good trajectories that were terminated.
    pub fn good_termination_rate(&self) -> f64 {
        let good: Vec<_> = self.trajectories.iter().filter(|t| t.label == Label::Good).collect();
        if good.is_empty() {
            return 0.0;
        }
        let hit = good
            .iter()
            .filter(|t| matches!(t.status, TrajectoryStatus::Terminated { .. }))
            .count();
        hit as f64 / good.len() as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn ratio_or_one(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (1.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn compute_metrics(
    run_id: &str,
    specs: &[ScenarioSpec],
    records: &[TrajectoryRecord],
    accounting: TokenAccounting,
    winner: Option<TrajectoryId>,
) -> Metrics {
    let mut histogram = ConfidenceHistogram {
        good: vec![0; HISTOGRAM_BINS],
        doomed: vec![0; HISTOGRAM_BINS],
    };
    let mut trajectories = Vec::with_capacity(records.len());
    for (rec, spec) in records.iter().zip(specs) {
        let bins = match spec.label {
            Label::Good => &mut histogram.good,
            Label::Doomed => &mut histogram.doomed,
        };
        for st in &rec.trace {
            bins[ConfidenceHistogram::bin_of(st.profile.confidence)] += 1;
        }
        let event = spec.kind.event_start().unwrap_or(usize::MAX);
        let pre = rec.trace.iter().filter(|st| st.profile.step < event);
        let during: Vec<_> = rec.trace.iter().filter(|st| st.profile.step >= event).collect();
        trajectories.push(TrajectoryMetrics {
            id: rec.id,
            label: spec.label,
            scenario: spec.kind.name(),
            status: rec.status,
            tokens: rec.tokens_consumed,
            final_confidence: rec.final_confidence,
            mean_confidence: rec.mean_confidence(),
            mean_scale_pre: mean(pre.map(|st| st.scale_next)),
            mean_scale_event: mean(during.iter().map(|st| st.scale_next)),
            mean_underuse_event: mean(during.iter().map(|st| 1.0 - st.profile.utilization_smoothed)),
            scale_moves: rec.trace.iter().filter(|st| st.scale_next != st.scale_used).count(),
            winner: winner == Some(rec.id),
        });
    }

    let terminated = |t: &&TrajectoryMetrics| matches!(t.status, TrajectoryStatus::Terminated { .. });
    let n_term = trajectories.iter().filter(terminated).count();
    let n_doomed = trajectories.iter().filter(|t| t.label == Label::Doomed).count();
    let hits = trajectories
        .iter()
        .filter(terminated)
        .filter(|t| t.label == Label::Doomed)
        .count();
    let (precision, precision_degenerate) = ratio_or_one(hits, n_term);
    let (recall, recall_degenerate) = ratio_or_one(hits, n_doomed);
    Metrics {
        run_id: run_id.to_string(),
        trajectories,
        precision,
        precision_degenerate,
        recall,
        recall_degenerate,
        accounting,
        winner,
        histogram,
    }
}

/// Formats `x` with six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding may carry into the next decade
    let carried = s.parse::<f64>().is_ok_and(|v| v.abs() >= 10f64.powi(mag + 1));
    if carried && decimals > 0 {
        return format!("{:.*}", decimals - 1, x);
    }
    s
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig6).unwrap_or_default()
}

pub const METRICS_HEADER: [&str; 24] = [
    "kind",
    "id",
    "label",
    "scenario",
    "status",
    "reason",
    "term_step",
    "tokens",
    "final_c",
    "mean_c",
    "mean_s_pre",
    "mean_s_event",
    "mean_underuse_event",
    "scale_moves",
    "winner",
    "precision",
    "precision_degenerate",
    "recall",
    "recall_degenerate",
    "token_savings",
    "total_tokens",
    "budget",
    "winner_id",
    "winner_label",
];

/// Header, one row per trajectory, then the summary row.
pub fn metrics_rows(m: &Metrics) -> Vec<Vec<String>> {
    let mut rows = vec![METRICS_HEADER.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    for t in &m.trajectories {
        let (status, reason, term_step) = match t.status {
            TrajectoryStatus::Terminated { reason, step } => ("terminated", reason.as_str(), step.to_string()),
            TrajectoryStatus::Completed => ("completed", "", String::new()),
            TrajectoryStatus::Active => ("active", "", String::new()),
        };
        let mut row = vec![
            "trajectory".to_string(),
            t.id.to_string(),
            t.label.as_str().to_string(),
            t.scenario.to_string(),
            status.to_string(),
            reason.to_string(),
            term_step,
            t.tokens.to_string(),
            opt(t.final_confidence),
            fmt_sig6(t.mean_confidence),
            opt(t.mean_scale_pre),
            opt(t.mean_scale_event),
            opt(t.mean_underuse_event),
            t.scale_moves.to_string(),
            u8::from(t.winner).to_string(),
        ];
        row.resize(METRICS_HEADER.len(), String::new());
        rows.push(row);
    }
    let mut summary = vec!["summary".to_string()];
    summary.resize(15, String::new());
    summary.extend([
        fmt_sig6(m.precision),
        u8::from(m.precision_degenerate).to_string(),
        fmt_sig6(m.recall),
        u8::from(m.recall_degenerate).to_string(),
        fmt_sig6(m.accounting.saved_fraction),
        m.accounting.total_tokens.to_string(),
        m.accounting.budget.to_string(),
        m.winner.map(|w| w.to_string()).unwrap_or_default(),
        m.winner_label().map(|l| l.as_str().to_string()).unwrap_or_default(),
    ]);
    rows.push(summary);
    rows
}

pub fn histogram_rows(h: &ConfidenceHistogram) -> Vec<Vec<String>> {
    let mut rows = vec![vec!["bin_lo".into(), "bin_hi".into(), "good".into(), "doomed".into()]];
    for b in 0..HISTOGRAM_BINS {
        rows.push(vec![
            fmt_sig6(b as f64 / HISTOGRAM_BINS as f64),
            fmt_sig6((b + 1) as f64 / HISTOGRAM_BINS as f64),
            h.good[b].to_string(),
            h.doomed[b].to_string(),
        ]);
    }
    rows
}

pub fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|source| crate::error::Error::Io {
        path: path.display().to_string(),
        source,
    })
}
