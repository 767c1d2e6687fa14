//! Per-outer-iteration convergence records shared by all solvers.
//!
//! CSV columns are fixed: `iter,gap,eta,r_dual,r_cent,inner,backend,ms`.
//! Floats are written with Rust's shortest round-trip formatting, so a
//! parsed trace reproduces every numeric field exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Surrogate gap for the interior-point solvers; the feasibility-scaled
    /// dual bound for dual decomposition (meta records which).
    pub gap: f64,
    /// Exact duality gap, when a dual-feasible point was at hand.
    pub eta: Option<f64>,
    pub r_dual: f64,
    pub r_cent: f64,
    pub inner: usize,
    pub backend: String,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub seed: Option<u64>,
    pub n: usize,
    pub m: usize,
    pub solver: String,
    pub config: serde_json::Value,
    pub termination: String,
    pub gap_definition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
    pub meta: TraceMeta,
}

pub const CSV_HEADER: &str = "iter,gap,eta,r_dual,r_cent,inner,backend,ms";

impl ConvergenceTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let eta = r.eta.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iter, r.gap, eta, r.r_dual, r.r_cent, r.inner, r.backend, r.ms
            ));
        }
        out
    }

    /// Parse rows back out of the CSV form (the meta block lives only in
    /// the JSON form; callers supply it).
    pub fn rows_from_csv(text: &str) -> Result<Vec<TraceRow>, TraceError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == CSV_HEADER => {}
            _ => {
                return Err(TraceError::Parse {
                    line: 1,
                    reason: format!("expected header {CSV_HEADER:?}"),
                })
            }
        }
        let mut rows = Vec::new();
        for (k, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = k + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(TraceError::Parse {
                    line: lineno,
                    reason: format!("expected 8 fields, got {}", fields.len()),
                });
            }
            let bad = |what: &str| TraceError::Parse {
                line: lineno,
                reason: format!("bad {what} field"),
            };
            rows.push(TraceRow {
                iter: fields[0].parse().map_err(|_| bad("iter"))?,
                gap: fields[1].parse().map_err(|_| bad("gap"))?,
                eta: if fields[2].is_empty() {
                    None
                } else {
                    Some(fields[2].parse().map_err(|_| bad("eta"))?)
                },
                r_dual: fields[3].parse().map_err(|_| bad("r_dual"))?,
                r_cent: fields[4].parse().map_err(|_| bad("r_cent"))?,
                inner: fields[5].parse().map_err(|_| bad("inner"))?,
                backend: fields[6].to_string(),
                ms: fields[7].parse().map_err(|_| bad("ms"))?,
            });
        }
        Ok(rows)
    }

    pub fn to_json(&self) -> Result<String, TraceError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn final_gap(&self) -> Option<f64> {
        self.rows.last().map(|r| r.gap)
    }

    pub fn total_inner(&self) -> usize {
        self.rows.iter().map(|r| r.inner).sum()
    }

    /// Equality on everything except the wall-time column, the
    /// determinism contract for repeated seeded runs.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.iter == b.iter
                    && a.gap == b.gap
                    && a.eta == b.eta
                    && a.r_dual == b.r_dual
                    && a.r_cent == b.r_cent
                    && a.inner == b.inner
                    && a.backend == b.backend
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ConvergenceTrace {
        ConvergenceTrace {
            rows: vec![
                TraceRow {
                    iter: 1,
                    gap: 0.125,
                    eta: Some(0.25),
                    r_dual: 1e-3,
                    r_cent: 2e-3,
                    inner: 7,
                    backend: "gabp".into(),
                    ms: 1.5,
                },
                TraceRow {
                    iter: 2,
                    gap: 0.015625,
                    eta: None,
                    r_dual: 1e-5,
                    r_cent: 2e-5,
                    inner: 8,
                    backend: "gabp".into(),
                    ms: 1.25,
                },
            ],
            meta: TraceMeta {
                seed: Some(42),
                n: 10,
                m: 20,
                solver: "ipm-gabp".into(),
                config: serde_json::json!({"gap_tol": 1e-4}),
                termination: "converged".into(),
                gap_definition: "surrogate".into(),
            },
        }
    }

    #[test]
    fn empty_trace_header_only() {
        let mut t = sample();
        t.rows.clear();
        assert_eq!(t.to_csv(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn csv_round_trip() {
        let t = sample();
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        let rows = ConvergenceTrace::rows_from_csv(&csv).unwrap();
        assert_eq!(rows, t.rows);
    }

    #[test]
    fn json_round_trip_exact() {
        let t = sample();
        let back = ConvergenceTrace::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
