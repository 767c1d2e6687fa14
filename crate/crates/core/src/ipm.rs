//! Primal-dual interior-point outer loop: perturbed optimality residual,
//! symmetric Newton-system assembly, residual-norm backtracking line search
//! with a fraction-to-boundary cap, and the barrier schedule
//! t = t_factor (m + n) / eta_hat.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::gabp;
use crate::linsolve::{self, SolveError, SolveReport, SymmetricSystem};
use crate::model::{self, ModelError, ProblemInstance};
use crate::sparse::{dot, norm2, SparseSym};
use crate::trace::{ConvergenceTrace, TraceMeta, TraceRow};

#[derive(Debug, Error)]
pub enum IpmError {
    #[error("line search failed: no step above {min_step} decreases the residual")]
    LineSearch { min_step: f64 },
    #[error("iterate left the interior: {0}")]
    State(String),
    #[error("solver returned a non-finite direction")]
    NonFiniteDirection,
    #[error(transparent)]
    Backend(#[from] SolveError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Abort carrying the trace recorded up to the failure, so observed
/// breakdowns and line-search failures stay reproducible events.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct IpmFailure {
    pub error: IpmError,
    pub trace: ConvergenceTrace,
}

/// Strictly interior primal-dual point. The slack is recomputed from f on
/// every construction; it is never cached across flow updates.
#[derive(Debug, Clone)]
pub struct IterateState {
    pub f: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub s: Vec<f64>,
    pub t: f64,
}

impl IterateState {
    pub fn new(
        inst: &ProblemInstance,
        f: Vec<f64>,
        lambda: Vec<f64>,
        mu: Vec<f64>,
        t: f64,
    ) -> Result<Self, IpmError> {
        let s = inst.slack(&f);
        let state = Self { f, lambda, mu, s, t };
        state.check_interior()?;
        if !(t > 0.0) {
            return Err(IpmError::State(format!("t = {t} is not positive")));
        }
        Ok(state)
    }

    fn check_interior(&self) -> Result<(), IpmError> {
        for (name, v) in [
            ("f", &self.f),
            ("lambda", &self.lambda),
            ("mu", &self.mu),
            ("s", &self.s),
        ] {
            if let Some(i) = v.iter().position(|&x| !(x > 0.0)) {
                return Err(IpmError::State(format!("{name}[{i}] = {}", v[i])));
            }
        }
        Ok(())
    }
}

/// The three blocks of the perturbed optimality residual r_t.
#[derive(Debug, Clone)]
pub struct KktResidual {
    pub r_dual: Vec<f64>,
    pub r_cent_link: Vec<f64>,
    pub r_cent_flow: Vec<f64>,
}

impl KktResidual {
    pub fn norm(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        (sq(&self.r_dual) + sq(&self.r_cent_link) + sq(&self.r_cent_flow)).sqrt()
    }

    pub fn dual_norm(&self) -> f64 {
        norm2(&self.r_dual)
    }

    pub fn cent_norm(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        (sq(&self.r_cent_link) + sq(&self.r_cent_flow)).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct NewtonDirection {
    pub df: Vec<f64>,
    pub dlambda: Vec<f64>,
    pub dmu: Vec<f64>,
}

impl NewtonDirection {
    /// Split a stacked solver solution (f block, lambda block, mu block).
    pub fn from_stacked(x: &[f64], n: usize, m: usize) -> Result<Self, IpmError> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(IpmError::NonFiniteDirection);
        }
        Ok(Self {
            df: x[..n].to_vec(),
            dlambda: x[n..n + m].to_vec(),
            dmu: x[n + m..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IpmConfig {
    pub gap_tol: f64,
    pub t_factor: f64,
    pub ls_alpha: f64,
    pub ls_beta: f64,
    pub frac_to_boundary: f64,
    pub max_newton_steps: usize,
}

impl Default for IpmConfig {
    fn default() -> Self {
        Self {
            gap_tol: 1e-4,
            t_factor: 10.0,
            ls_alpha: 0.01,
            ls_beta: 0.5,
            frac_to_boundary: 0.99,
            max_newton_steps: 50,
        }
    }
}

impl IpmConfig {
    fn validate(&self) {
        assert!(self.gap_tol > 0.0);
        assert!(self.t_factor > 1.0);
        assert!(self.ls_alpha > 0.0 && self.ls_alpha < 0.5);
        assert!(self.ls_beta > 0.0 && self.ls_beta < 1.0);
        assert!(self.frac_to_boundary > 0.0 && self.frac_to_boundary < 1.0);
        assert!(self.max_newton_steps >= 1);
    }
}

/// Inner-solver selection for the Newton systems.
#[derive(Debug, Clone, Serialize)]
pub enum SolverBackend {
    Direct,
    Pcg {
        /// Base relative-residual tolerance, tightened by min(1, eta_hat)
        /// as the outer loop closes in (truncated-Newton forcing).
        base_tol: f64,
        max_iters: usize,
    },
    Gabp {
        tol: f64,
        max_rounds: usize,
        damping: f64,
    },
}

impl SolverBackend {
    pub fn default_pcg() -> Self {
        SolverBackend::Pcg {
            base_tol: 1e-2,
            max_iters: 20_000,
        }
    }

    pub fn default_gabp() -> Self {
        SolverBackend::Gabp {
            tol: 1e-6,
            max_rounds: 20_000,
            damping: 0.0,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            SolverBackend::Direct => "direct",
            SolverBackend::Pcg { .. } => "pcg",
            SolverBackend::Gabp { .. } => "gabp",
        }
    }

    fn solve(
        &self,
        sys: &SymmetricSystem,
        eta_hat: f64,
        warm: &mut Option<gabp::GabpState>,
    ) -> Result<SolveReport, SolveError> {
        match *self {
            SolverBackend::Direct => linsolve::solve_direct(sys),
            SolverBackend::Pcg { base_tol, max_iters } => {
                let tol = base_tol * eta_hat.min(1.0);
                linsolve::solve_pcg(sys, tol.max(1e-14), max_iters)
            }
            SolverBackend::Gabp {
                tol,
                max_rounds,
                damping,
            } => gabp::solve_gabp_resuming(sys, tol, max_rounds, damping, warm),
        }
    }
}

/// r_t(f, lambda, mu) at the state's barrier parameter.
pub fn residual(inst: &ProblemInstance, state: &IterateState) -> KktResidual {
    let u = inst.utility();
    let route_price = inst.routes().mul_t(&state.lambda);
    let inv_t = 1.0 / state.t;
    let r_dual = (0..inst.n())
        .map(|j| -u.grad(state.f[j]) + route_price[j] - state.mu[j])
        .collect();
    let r_cent_link = (0..inst.m())
        .map(|i| state.lambda[i] * state.s[i] - inv_t)
        .collect();
    let r_cent_flow = (0..inst.n())
        .map(|j| state.mu[j] * state.f[j] - inv_t)
        .collect();
    KktResidual {
        r_dual,
        r_cent_link,
        r_cent_flow,
    }
}

/// Surrogate duality gap s^T lambda + f^T mu. Equals (m + n)/t exactly on
/// the t-center.
pub fn surrogate_gap(state: &IterateState) -> f64 {
    dot(&state.s, &state.lambda) + dot(&state.f, &state.mu)
}

/// The Newton step equations normalized row-wise by (1, -1/lambda, -1/mu),
/// which makes the coefficient matrix symmetric:
///
///   [ -hess U    R^T        -I        ] [df ]   [ -r_dual        ]
///   [  R        -diag(s/l)   0        ] [dl ] = [  s - 1/(t l)   ]
///   [ -I         0          -diag(f/m)] [dm ]   [  f - 1/(t m)   ]
pub fn assemble_symmetric_system(inst: &ProblemInstance, state: &IterateState) -> SymmetricSystem {
    let (n, m) = (inst.n(), inst.m());
    let u = inst.utility();
    let mut tri: Vec<(usize, usize, f64)> =
        Vec::with_capacity(2 * n + m + 2 * inst.routes().nnz() + 2 * n);
    for j in 0..n {
        tri.push((j, j, -u.hess(state.f[j])));
        tri.push((j, n + m + j, -1.0));
        tri.push((n + m + j, j, -1.0));
        tri.push((n + m + j, n + m + j, -state.f[j] / state.mu[j]));
    }
    for i in 0..m {
        tri.push((n + i, n + i, -state.s[i] / state.lambda[i]));
    }
    for (i, j) in inst.routes().pairs() {
        tri.push((j, n + i, 1.0));
        tri.push((n + i, j, 1.0));
    }
    let a = SparseSym::from_triplets(n + m + n, &tri).expect("assembly is symmetric");
    let res = residual(inst, state);
    let inv_t = 1.0 / state.t;
    let mut b = Vec::with_capacity(n + m + n);
    b.extend(res.r_dual.iter().map(|r| -r));
    b.extend((0..m).map(|i| state.s[i] - inv_t / state.lambda[i]));
    b.extend((0..n).map(|j| state.f[j] - inv_t / state.mu[j]));
    SymmetricSystem::with_blocks(a, b, (n, m, n))
}

/// Largest step keeping (f, s, lambda, mu) strictly positive, before the
/// fraction-to-boundary cap. Infinite when no component moves toward zero.
fn max_step(state: &IterateState, dir: &NewtonDirection, ds: &[f64]) -> f64 {
    let mut sup = f64::INFINITY;
    let limit = |x: &[f64], dx: &[f64], sup: f64| {
        let mut s = sup;
        for (xi, di) in x.iter().zip(dx) {
            if *di < 0.0 {
                s = s.min(-xi / di);
            }
        }
        s
    };
    sup = limit(&state.f, &dir.df, sup);
    sup = limit(&state.lambda, &dir.dlambda, sup);
    sup = limit(&state.mu, &dir.dmu, sup);
    sup = limit(&state.s, ds, sup);
    sup
}

/// Backtracking line search on ||r_t||_2 from the fraction-to-boundary cap.
/// Returns the accepted step length.
pub fn line_search(
    inst: &ProblemInstance,
    state: &IterateState,
    dir: &NewtonDirection,
    cfg: &IpmConfig,
) -> Result<f64, IpmError> {
    const MIN_STEP: f64 = 1e-12;
    let ds: Vec<f64> = inst
        .routes()
        .mul(&dir.df)
        .iter()
        .map(|v| -v)
        .collect();
    let sup = max_step(state, dir, &ds);
    let r0 = residual(inst, state).norm();
    let mut theta = (cfg.frac_to_boundary * sup).min(1.0);
    while theta >= MIN_STEP {
        if let Ok(cand) = advance(inst, state, dir, theta) {
            let r = residual(inst, &cand).norm();
            if r <= (1.0 - cfg.ls_alpha * theta) * r0 {
                return Ok(theta);
            }
        }
        theta *= cfg.ls_beta;
    }
    Err(IpmError::LineSearch { min_step: MIN_STEP })
}

fn advance(
    inst: &ProblemInstance,
    state: &IterateState,
    dir: &NewtonDirection,
    theta: f64,
) -> Result<IterateState, IpmError> {
    let step = |x: &[f64], dx: &[f64]| x.iter().zip(dx).map(|(a, d)| a + theta * d).collect();
    IterateState::new(
        inst,
        step(&state.f, &dir.df),
        step(&state.lambda, &dir.dlambda),
        step(&state.mu, &dir.dmu),
        state.t,
    )
}

#[derive(Debug, Clone)]
pub struct IpmOutcome {
    pub f: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub converged: bool,
    pub newton_steps: usize,
    pub trace: ConvergenceTrace,
}

/// Full solver: starts from lambda = mu = 1 and the margin-0.9 uniform
/// flow, iterates Newton steps with the selected backend, and records one
/// trace row per outer iteration.
pub fn solve_ipm(
    inst: &ProblemInstance,
    cfg: &IpmConfig,
    backend: &SolverBackend,
) -> Result<IpmOutcome, IpmFailure> {
    cfg.validate();
    let (n, m) = (inst.n(), inst.m());
    let f = model::feasible_start(inst, 0.9);
    let mut state = IterateState::new(inst, f, vec![1.0; m], vec![1.0; n], 1.0)
        .expect("feasible start is interior");
    let mut rows: Vec<TraceRow> = Vec::new();
    let meta = |termination: &str| TraceMeta {
        seed: inst.seed(),
        n,
        m,
        solver: format!("ipm-{}", backend.id()),
        config: serde_json::json!({
            "ipm": cfg,
            "backend": backend,
        }),
        termination: termination.to_string(),
        gap_definition: "surrogate".to_string(),
    };
    // The cold start (uniform flows, unit multipliers) is far from the
    // central path; aiming the first Newton steps at the t_factor-boosted
    // target makes every step slam into the positivity boundary.  Run the
    // t-update without the boost until the line search first achieves a
    // near-full step, then switch to the standard aggressive schedule.
    const CENTERED_STEP: f64 = 0.9;
    let mut centered = false;
    let mut converged = false;
    let mut steps = 0;
    let mut gabp_warm: Option<gabp::GabpState> = None;
    for step in 1..=cfg.max_newton_steps {
        let eta_hat = surrogate_gap(&state);
        if eta_hat <= cfg.gap_tol && residual(inst, &state).dual_norm() <= cfg.gap_tol {
            converged = true;
            break;
        }
        let clock = Instant::now();
        let boost = if centered { cfg.t_factor } else { 1.0 };
        state.t = boost * (m + n) as f64 / eta_hat;
        let sys = assemble_symmetric_system(inst, &state);
        let report = match backend.solve(&sys, eta_hat, &mut gabp_warm) {
            Ok(r) => r,
            Err(e) => {
                return Err(IpmFailure {
                    error: e.into(),
                    trace: ConvergenceTrace {
                        rows,
                        meta: meta("backend-failure"),
                    },
                })
            }
        };
        let dir = match NewtonDirection::from_stacked(&report.x, n, m) {
            Ok(d) => d,
            Err(e) => {
                return Err(IpmFailure {
                    error: e,
                    trace: ConvergenceTrace {
                        rows,
                        meta: meta("backend-failure"),
                    },
                })
            }
        };
        let theta = match line_search(inst, &state, &dir, cfg) {
            Ok(t) => t,
            Err(e) => {
                return Err(IpmFailure {
                    error: e,
                    trace: ConvergenceTrace {
                        rows,
                        meta: meta("line-search-failure"),
                    },
                })
            }
        };
        if theta >= CENTERED_STEP {
            centered = true;
        }
        state = advance(inst, &state, &dir, theta).expect("line search kept interiority");
        steps = step;
        let res = residual(inst, &state);
        let eta_exact = exact_gap(inst, &state);
        rows.push(TraceRow {
            iter: step,
            gap: surrogate_gap(&state),
            eta: eta_exact,
            r_dual: res.dual_norm(),
            r_cent: res.cent_norm(),
            inner: report.inner_iterations,
            backend: backend.id().to_string(),
            ms: clock.elapsed().as_secs_f64() * 1e3,
        });
    }
    if !converged {
        let eta_hat = surrogate_gap(&state);
        converged =
            eta_hat <= cfg.gap_tol && residual(inst, &state).dual_norm() <= cfg.gap_tol;
    }
    let termination = if converged { "converged" } else { "max-newton-steps" };
    Ok(IpmOutcome {
        f: state.f.clone(),
        lambda: state.lambda.clone(),
        mu: state.mu.clone(),
        converged,
        newton_steps: steps,
        trace: ConvergenceTrace {
            rows,
            meta: meta(termination),
        },
    })
}

/// Exact duality gap when lambda is dual feasible (always true for strictly
/// positive lambda with log utilities).
fn exact_gap(inst: &ProblemInstance, state: &IterateState) -> Option<f64> {
    let dual = model::dual_objective(inst, &state.lambda).ok()?;
    let primal = model::total_utility(inst, &state.f).ok()?;
    Some(dual - primal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UtilityFamily;
    use crate::sparse::RoutingMatrix;

    fn micro(c: f64) -> ProblemInstance {
        let r = RoutingMatrix::from_pairs(1, 1, [(0, 0)]).unwrap();
        ProblemInstance::new(r, vec![c], UtilityFamily::Log).unwrap()
    }

    fn micro_state(c: f64, f: f64, lambda: f64, mu: f64, t: f64) -> (ProblemInstance, IterateState) {
        let inst = micro(c);
        let st = IterateState::new(&inst, vec![f], vec![lambda], vec![mu], t).unwrap();
        (inst, st)
    }

    #[test]
    fn residual_direct_substitution() {
        // f = lambda = mu = 1, c = 2 (s = 1), t = 1.
        let (inst, st) = micro_state(2.0, 1.0, 1.0, 1.0, 1.0);
        let r = residual(&inst, &st);
        assert_eq!(r.r_dual, vec![-1.0]);
        assert_eq!(r.r_cent_link, vec![0.0]);
        assert_eq!(r.r_cent_flow, vec![0.0]);
    }

    #[test]
    fn residual_affine_in_inv_t() {
        let (inst, st) = micro_state(2.0, 0.7, 1.3, 0.4, 2.0);
        let r1 = residual(&inst, &st);
        let mut st2 = st.clone();
        st2.t = 4.0;
        let r2 = residual(&inst, &st2);
        let shift = 1.0 / 2.0 - 1.0 / 4.0;
        assert!((r2.r_cent_link[0] - (r1.r_cent_link[0] + shift)).abs() < 1e-15);
        assert!((r2.r_cent_flow[0] - (r1.r_cent_flow[0] + shift)).abs() < 1e-15);
        assert_eq!(r2.r_dual, r1.r_dual);
    }

    #[test]
    fn surrogate_gap_all_ones() {
        // n = 2 flows, m = 3 links, everything 1 => gap = 3 + 2 = 5.
        let r = RoutingMatrix::from_pairs(3, 2, [(0, 0), (1, 0), (1, 1), (2, 1)]).unwrap();
        let inst = ProblemInstance::new(r, vec![2.0, 3.0, 2.0], UtilityFamily::Log).unwrap();
        let st = IterateState {
            f: vec![1.0; 2],
            lambda: vec![1.0; 3],
            mu: vec![1.0; 2],
            s: vec![1.0; 3],
            t: 1.0,
        };
        assert_eq!(surrogate_gap(&st), 5.0);
    }

    #[test]
    fn assembly_micro_values() {
        let (inst, st) = micro_state(2.0, 1.0, 1.0, 1.0, 1.0);
        let sys = assemble_symmetric_system(&inst, &st);
        let a = sys.a();
        assert_eq!(a.get(0, 0), Some(1.0)); // -hess log = 1/f^2
        assert_eq!(a.get(0, 1), Some(1.0));
        assert_eq!(a.get(0, 2), Some(-1.0));
        assert_eq!(a.get(1, 1), Some(-1.0)); // -s/lambda
        assert_eq!(a.get(2, 2), Some(-1.0)); // -f/mu
        assert_eq!(sys.b(), &[1.0, 0.0, 0.0]);
        assert_eq!(sys.block_sizes(), Some((1, 1, 1)));
    }

    #[test]
    fn line_search_zero_direction_fails() {
        let (inst, st) = micro_state(2.0, 1.0, 1.0, 1.0, 1.0);
        let dir = NewtonDirection {
            df: vec![0.0],
            dlambda: vec![0.0],
            dmu: vec![0.0],
        };
        assert!(matches!(
            line_search(&inst, &st, &dir, &IpmConfig::default()),
            Err(IpmError::LineSearch { .. })
        ));
    }

    #[test]
    fn line_search_boundary_cap() {
        let (inst, st) = micro_state(2.0, 1.0, 1.0, 1.0, 1.0);
        let dir = NewtonDirection {
            df: vec![0.0],
            dlambda: vec![-2.0],
            dmu: vec![0.0],
        };
        let ds = vec![0.0];
        let sup = max_step(&st, &dir, &ds);
        assert!((sup - 0.5).abs() < 1e-15);
        let cfg = IpmConfig::default();
        assert!(((cfg.frac_to_boundary * sup).min(1.0) - 0.495).abs() < 1e-15);
    }

    #[test]
    fn micro_instance_direct_converges_to_capacity() {
        let inst = micro(1.0);
        let cfg = IpmConfig {
            gap_tol: 1e-8,
            ..IpmConfig::default()
        };
        let out = solve_ipm(&inst, &cfg, &SolverBackend::Direct).unwrap();
        assert!(out.converged);
        assert!(out.newton_steps <= 15, "took {} steps", out.newton_steps);
        assert!((out.f[0] - 1.0).abs() < 1e-6, "f = {}", out.f[0]);
        assert!((out.lambda[0] - 1.0).abs() < 1e-3);
    }
}
