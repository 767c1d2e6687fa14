//! Projected subgradient ascent on the link prices: each flow best-responds
//! to its route price, each price moves against the slack (which is the
//! gradient of the dual objective) and is projected onto the nonnegative
//! orthant.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::model::{self, ModelError, ProblemInstance};
use crate::trace::{ConvergenceTrace, TraceMeta, TraceRow};

#[derive(Debug, Error)]
pub enum DualDecompError {
    #[error("flow {index} subproblem unbounded: route price {price} is not positive")]
    UnboundedSubproblem { index: usize, price: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize)]
pub struct DualDecompConfig {
    /// Constant step size; `default_alpha` scales it to the instance.
    pub alpha: f64,
    pub max_iters: usize,
    /// Initial prices; all ones when empty.
    pub lambda0: Vec<f64>,
    /// Stop when the feasibility-scaled duality-gap bound drops below this.
    pub gap_tol: f64,
}

impl DualDecompConfig {
    pub fn new(alpha: f64, max_iters: usize, gap_tol: f64) -> Self {
        assert!(alpha > 0.0 && max_iters >= 1 && gap_tol > 0.0);
        Self {
            alpha,
            max_iters,
            lambda0: Vec::new(),
            gap_tol,
        }
    }
}

/// Default step size 0.1 min(c) / max_i (row nnz of R): scales with the
/// smallest capacity and the busiest link.
pub fn default_alpha(inst: &ProblemInstance) -> f64 {
    let min_c = inst
        .capacities()
        .iter()
        .fold(f64::INFINITY, |m, &c| m.min(c));
    let max_row = (0..inst.m())
        .map(|i| inst.routes().row(i).len())
        .max()
        .unwrap_or(1) as f64;
    0.1 * min_c / max_row
}

/// Per-flow best response f_j = argmax_{x>=0} (U(x) - x r_j^T lambda);
/// 1/(r_j^T lambda) in closed form for log utilities.
pub fn flow_update(inst: &ProblemInstance, lambda: &[f64]) -> Result<Vec<f64>, DualDecompError> {
    let route_price = inst.routes().mul_t(lambda);
    let u = inst.utility();
    route_price
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            if a <= 0.0 {
                Err(DualDecompError::UnboundedSubproblem { index: j, price: a })
            } else {
                Ok(u.best_response(a))
            }
        })
        .collect()
}

/// lambda := (lambda - alpha (c - R f))_+ ; the update direction c - R f is
/// the slack, i.e. the gradient of the dual objective.
pub fn price_update(
    inst: &ProblemInstance,
    lambda: &[f64],
    f: &[f64],
    alpha: f64,
) -> Vec<f64> {
    assert!(alpha > 0.0);
    let slack = inst.slack(f);
    lambda
        .iter()
        .zip(&slack)
        .map(|(&l, &s)| (l - alpha * s).max(0.0))
        .collect()
}

/// Scale f just enough to restore feasibility for gap reporting.
pub fn project_feasible(inst: &ProblemInstance, f: &[f64]) -> Vec<f64> {
    let load = inst.routes().mul(f);
    let scale = inst
        .capacities()
        .iter()
        .zip(&load)
        .filter(|(_, &l)| l > 0.0)
        .map(|(&c, &l)| c / l)
        .fold(1.0_f64, f64::min);
    f.iter().map(|&x| x * scale).collect()
}

#[derive(Debug, Clone)]
pub struct DualDecompOutcome {
    pub f: Vec<f64>,
    pub lambda: Vec<f64>,
    pub converged: bool,
    pub trace: ConvergenceTrace,
}

pub fn solve_dual_decomp(
    inst: &ProblemInstance,
    cfg: &DualDecompConfig,
) -> Result<DualDecompOutcome, DualDecompError> {
    assert!(cfg.alpha > 0.0 && cfg.max_iters >= 1);
    let mut lambda = if cfg.lambda0.is_empty() {
        vec![1.0; inst.m()]
    } else {
        assert_eq!(cfg.lambda0.len(), inst.m());
        assert!(cfg.lambda0.iter().all(|&l| l > 0.0));
        cfg.lambda0.clone()
    };
    let mut f = vec![0.0; inst.n()];
    let mut rows = Vec::new();
    let mut converged = false;
    for iter in 1..=cfg.max_iters {
        let clock = Instant::now();
        f = flow_update(inst, &lambda)?;
        lambda = price_update(inst, &lambda, &f, cfg.alpha);
        // Gap bound: dual objective minus the utility of the iterate scaled
        // back into the feasible region. Prices at zero are dual feasible
        // only if every route keeps a positive price; skip the bound when
        // they do not (projection can zero out whole routes early on).
        let f_proj = project_feasible(inst, &f);
        let gap = match (
            model::dual_objective(inst, &lambda),
            model::total_utility(inst, &f_proj),
        ) {
            (Ok(d), Ok(p)) => d - p,
            _ => f64::INFINITY,
        };
        let load = inst.routes().mul(&f);
        let max_violation = inst
            .capacities()
            .iter()
            .zip(&load)
            .map(|(&c, &l)| (l - c).max(0.0))
            .fold(0.0_f64, f64::max);
        rows.push(TraceRow {
            iter,
            gap,
            eta: gap.is_finite().then_some(gap),
            r_dual: max_violation,
            r_cent: 0.0,
            inner: 0,
            backend: "dualdecomp".to_string(),
            ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if gap <= cfg.gap_tol {
            converged = true;
            break;
        }
    }
    let termination = if converged { "converged" } else { "max-iters" };
    let trace = ConvergenceTrace {
        rows,
        meta: TraceMeta {
            seed: inst.seed(),
            n: inst.n(),
            m: inst.m(),
            solver: "dualdecomp".to_string(),
            config: serde_json::to_value(cfg).unwrap_or_default(),
            termination: termination.to_string(),
            gap_definition: "feasibility-scaled dual bound".to_string(),
        },
    };
    Ok(DualDecompOutcome {
        f,
        lambda,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UtilityFamily;
    use crate::sparse::RoutingMatrix;

    fn single_link(c: f64) -> ProblemInstance {
        let r = RoutingMatrix::from_pairs(1, 1, [(0, 0)]).unwrap();
        ProblemInstance::new(r, vec![c], UtilityFamily::Log).unwrap()
    }

    #[test]
    fn flow_update_closed_forms() {
        // One flow over two links at unit prices: f = 1/(1+1).
        let r = RoutingMatrix::from_pairs(2, 1, [(0, 0), (1, 0)]).unwrap();
        let inst = ProblemInstance::new(r, vec![1.0, 1.0], UtilityFamily::Log).unwrap();
        assert_eq!(flow_update(&inst, &[1.0, 1.0]).unwrap(), vec![0.5]);
        let inst = single_link(1.0);
        assert_eq!(flow_update(&inst, &[4.0]).unwrap(), vec![0.25]);
        match flow_update(&inst, &[0.0]) {
            Err(DualDecompError::UnboundedSubproblem { index: 0, .. }) => {}
            other => panic!("expected unbounded subproblem, got {other:?}"),
        }
    }

    #[test]
    fn price_update_cases() {
        let inst = single_link(1.0);
        // Zero slack is a fixed point for any alpha.
        assert_eq!(price_update(&inst, &[1.0], &[1.0], 0.7), vec![1.0]);
        // Projection clamps at zero.
        let updated = price_update(&inst, &[0.1], &[0.0], 1.0);
        assert_eq!(updated, vec![0.0]);
    }

    #[test]
    fn single_link_converges_to_kkt_point() {
        let inst = single_link(1.0);
        let cfg = DualDecompConfig {
            alpha: 0.1,
            max_iters: 5000,
            lambda0: vec![1.0],
            gap_tol: 1e-6,
        };
        let out = solve_dual_decomp(&inst, &cfg).unwrap();
        assert!(out.converged);
        assert!((out.f[0] - 1.0).abs() < 1e-3, "f = {}", out.f[0]);
        assert!((out.lambda[0] - 1.0).abs() < 1e-3, "lambda = {}", out.lambda[0]);
    }

    #[test]
    fn oversized_step_oscillates() {
        // Dual objective on the single-link problem has curvature 1 at the
        // optimum; steps above the stability threshold cannot settle.
        let inst = single_link(1.0);
        let cfg = DualDecompConfig {
            alpha: 3.5,
            max_iters: 400,
            lambda0: vec![2.0],
            gap_tol: 1e-6,
        };
        let out = solve_dual_decomp(&inst, &cfg).unwrap();
        assert!(!out.converged);
        let gaps: Vec<f64> = out
            .trace
            .rows
            .iter()
            .rev()
            .take(50)
            .map(|r| r.gap)
            .collect();
        let monotone = gaps.windows(2).all(|w| w[0] <= w[1]);
        assert!(!monotone, "late gaps unexpectedly monotone: {gaps:?}");
    }

    #[test]
    fn lambda_stays_nonnegative() {
        let inst = single_link(0.3);
        let cfg = DualDecompConfig {
            alpha: 0.5,
            max_iters: 200,
            lambda0: vec![2.0],
            gap_tol: 1e-12,
        };
        let mut lambda = cfg.lambda0.clone();
        for _ in 0..cfg.max_iters {
            let f = match flow_update(&inst, &lambda) {
                Ok(f) => f,
                Err(_) => break,
            };
            lambda = price_update(&inst, &lambda, &f, cfg.alpha);
            assert!(lambda.iter().all(|&l| l >= 0.0));
        }
    }
}
