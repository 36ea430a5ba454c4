//! Line-oriented trace records: one `key=value` line per trajectory step.
//!
//! Floats use Rust's shortest round-trip formatting, so parsing a trace
//! recovers every value exactly.

use std::fmt::Write as _;

use crate::engine::{StepTrace, TrajectoryId};
use crate::error::{invalid_input, Result};

/// Field names in emission order.
pub const TRACE_FIELDS: [&str; 20] = [
    "run", "traj", "step", "row", "col", "h_norm", "margin", "s_tok", "e_worst", "b", "i", "k", "d",
    "d_hat", "c", "c_min", "r", "theta", "decision", "s",
];

/// Formats one trace record, newline-terminated.
pub fn format_record(run: &str, traj: TrajectoryId, st: &StepTrace) -> String {
    let p = &st.profile;
    let theta = st.theta.map_or_else(|| "none".to_string(), |x| x.to_string());
    let mut line = String::with_capacity(320);
    let _ = writeln!(
        line,
        "run={run} traj={traj} step={} row={} col={} h_norm={} margin={} s_tok={} e_worst={} b={} i={} k={} d={} d_hat={} c={} c_min={} r={} theta={theta} decision={} s={}",
        p.step,
        p.pos.row,
        p.pos.col,
        p.h_norm,
        p.margin,
        p.s_tok,
        p.e_worst,
        p.stability,
        p.intrinsic,
        p.kl,
        p.utilization,
        p.utilization_smoothed,
        p.confidence,
        p.confidence_min,
        p.rebound,
        st.decision.as_str(),
        st.scale_next,
    );
    line
}

/// Splits a record into `(key, value)` pairs, checking field order.
pub fn parse_record(line: &str) -> Result<Vec<(&str, &str)>> {
    let pairs: Vec<(&str, &str)> = line
        .split_whitespace()
        .map(|tok| tok.split_once('=').ok_or_else(|| invalid_input(format!("malformed token {tok:?}"))))
        .collect::<Result<_>>()?;
    let keys: Vec<&str> = pairs.iter().map(|(k, _)| *k).collect();
    if keys != TRACE_FIELDS {
        return Err(invalid_input(format!("unexpected trace fields {keys:?}")));
    }
    Ok(pairs)
}

/// Value of `key` in a parsed record.
pub fn field<'a>(pairs: &[(&str, &'a str)], key: &str) -> Option<&'a str> {
    pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}
