//! Gaussian belief propagation over the graph of a symmetric sparse matrix.
//!
//! The matrix A and shift b define a Gaussian density p(x) ~ exp(-x'Ax/2 +
//! b'x); the marginal means equal A^{-1} b, so message passing doubles as a
//! linear solver. Rounds are synchronous: every message of round r+1 is
//! computed from round-r messages behind a barrier, which makes the
//! round count well-defined and the schedule bit-deterministic.

use std::collections::BTreeMap;

use crate::linsolve::{SolveError, SolveReport, SymmetricSystem};
use crate::sparse::SparseSym;

/// Static message-passing structure for one matrix: node priors plus the
/// directed-edge lists derived from the off-diagonal nonzeros.
#[derive(Debug, Clone)]
pub struct GabpGraph {
    dim: usize,
    prior_p: Vec<f64>,  // P_ii = A_ii
    prior_mu: Vec<f64>, // mu_ii = b_i / A_ii
    edge_src: Vec<usize>,
    edge_dst: Vec<usize>,
    edge_a: Vec<f64>,
    reverse: Vec<usize>,
}

impl GabpGraph {
    pub fn new(a: &SparseSym, b: &[f64]) -> Result<Self, SolveError> {
        let dim = a.dim();
        assert_eq!(b.len(), dim);
        let mut prior_p = Vec::with_capacity(dim);
        let mut prior_mu = Vec::with_capacity(dim);
        let mut edge_src = Vec::new();
        let mut edge_dst = Vec::new();
        let mut edge_a = Vec::new();
        let mut out_ptr = Vec::with_capacity(dim + 1);
        out_ptr.push(0);
        for i in 0..dim {
            let aii = a.get(i, i).unwrap_or(0.0);
            if aii == 0.0 {
                return Err(SolveError::Degenerate(i, i));
            }
            prior_p.push(aii);
            prior_mu.push(b[i] / aii);
            for (j, v) in a.row(i) {
                if j != i {
                    edge_src.push(i);
                    edge_dst.push(j);
                    edge_a.push(v);
                }
            }
            out_ptr.push(edge_src.len());
        }
        // Reverse-edge lookup: columns within a row are sorted, so the
        // position of (j -> i) is found by binary search in j's slice.
        let mut reverse = vec![0usize; edge_src.len()];
        for e in 0..edge_src.len() {
            let (i, j) = (edge_src[e], edge_dst[e]);
            let slice = &edge_dst[out_ptr[j]..out_ptr[j + 1]];
            let k = slice.binary_search(&i).expect("symmetric pattern");
            reverse[e] = out_ptr[j] + k;
        }
        Ok(Self {
            dim,
            prior_p,
            prior_mu,
            edge_src,
            edge_dst,
            edge_a,
            reverse,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_directed_edges(&self) -> usize {
        self.edge_src.len()
    }

    pub fn edge_endpoints(&self, e: usize) -> (usize, usize) {
        (self.edge_src[e], self.edge_dst[e])
    }
}

/// Per-directed-edge precision and mean messages, all zero at round 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GabpState {
    pub p_msg: Vec<f64>,
    pub mu_msg: Vec<f64>,
    pub round: usize,
}

impl GabpState {
    pub fn new(graph: &GabpGraph) -> Self {
        Self {
            p_msg: vec![0.0; graph.num_directed_edges()],
            mu_msg: vec![0.0; graph.num_directed_edges()],
            round: 0,
        }
    }
}

/// One synchronous round: every outgoing message (i -> j) is recomputed
/// from the previous round's incoming messages at i, excluding j's.
pub fn gabp_round(graph: &GabpGraph, state: &GabpState) -> Result<GabpState, SolveError> {
    gabp_round_damped(graph, state, 0.0)
}

/// Round with optional damping: msg = (1 - damping) * new + damping * old.
/// damping = 0 is the plain update.
pub fn gabp_round_damped(
    graph: &GabpGraph,
    state: &GabpState,
    damping: f64,
) -> Result<GabpState, SolveError> {
    debug_assert!((0.0..1.0).contains(&damping));
    let n = graph.dim;
    // Per-node totals over all incoming messages; the per-edge exclusion
    // subtracts one term, so each round is O(edges).
    let mut tot_p = graph.prior_p.clone();
    let mut tot_pm: Vec<f64> = graph
        .prior_p
        .iter()
        .zip(&graph.prior_mu)
        .map(|(p, m)| p * m)
        .collect();
    for e in 0..graph.num_directed_edges() {
        let j = graph.edge_dst[e];
        tot_p[j] += state.p_msg[e];
        tot_pm[j] += state.p_msg[e] * state.mu_msg[e];
    }
    let _ = n;
    let mut next = GabpState {
        p_msg: vec![0.0; graph.num_directed_edges()],
        mu_msg: vec![0.0; graph.num_directed_edges()],
        round: state.round + 1,
    };
    for e in 0..graph.num_directed_edges() {
        let (i, j) = (graph.edge_src[e], graph.edge_dst[e]);
        let rev = graph.reverse[e];
        let p_excl = tot_p[i] - state.p_msg[rev];
        if p_excl == 0.0 || !p_excl.is_finite() {
            return Err(SolveError::Degenerate(i, j));
        }
        let mu_excl = (tot_pm[i] - state.p_msg[rev] * state.mu_msg[rev]) / p_excl;
        let a = graph.edge_a[e];
        let p_new = -a * a / p_excl;
        if p_new == 0.0 || !p_new.is_finite() {
            return Err(SolveError::Degenerate(i, j));
        }
        let mu_new = -a * mu_excl / p_new;
        next.p_msg[e] = (1.0 - damping) * p_new + damping * state.p_msg[e];
        next.mu_msg[e] = (1.0 - damping) * mu_new + damping * state.mu_msg[e];
    }
    Ok(next)
}

/// Marginal means from the current messages: x_i = P_i^{-1} (P_ii mu_ii +
/// sum_k P_ki mu_ki). Valid pre-convergence as a diagnostic.
pub fn gabp_infer(graph: &GabpGraph, state: &GabpState) -> Result<Vec<f64>, SolveError> {
    let (x, _) = gabp_infer_with_precisions(graph, state)?;
    Ok(x)
}

pub fn gabp_infer_with_precisions(
    graph: &GabpGraph,
    state: &GabpState,
) -> Result<(Vec<f64>, Vec<f64>), SolveError> {
    let mut tot_p = graph.prior_p.clone();
    let mut tot_pm: Vec<f64> = graph
        .prior_p
        .iter()
        .zip(&graph.prior_mu)
        .map(|(p, m)| p * m)
        .collect();
    for e in 0..graph.num_directed_edges() {
        let j = graph.edge_dst[e];
        tot_p[j] += state.p_msg[e];
        tot_pm[j] += state.p_msg[e] * state.mu_msg[e];
    }
    for (i, &p) in tot_p.iter().enumerate() {
        if p == 0.0 || !p.is_finite() {
            return Err(SolveError::Degenerate(i, i));
        }
    }
    let x = tot_pm.iter().zip(&tot_p).map(|(pm, p)| pm / p).collect();
    Ok((x, tot_p))
}

/// Sufficient-condition diagnostics. Both conditions are sufficient only:
/// failing them does not preclude convergence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GabpDiagnostics {
    /// |A_ii| > sum_{j != i} |A_ij| for every i.
    pub diag_dominant: bool,
    /// Power-iteration estimate of rho(|I - S A S|) with S = diag(|A_ii|^{-1/2}).
    /// Advisory when A has negative diagonal entries.
    pub rho_estimate: f64,
}

pub fn convergence_diagnostics(sys: &SymmetricSystem) -> GabpDiagnostics {
    let a = sys.a();
    let n = a.dim();
    let diag = a.diag();
    if diag.iter().any(|&d| d == 0.0) {
        return GabpDiagnostics {
            diag_dominant: false,
            rho_estimate: f64::INFINITY,
        };
    }
    let mut dominant = true;
    for i in 0..n {
        let off: f64 = a
            .row(i)
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| v.abs())
            .sum();
        if diag[i].abs() <= off {
            dominant = false;
            break;
        }
    }
    // M = |I - S A S| entrywise: diagonal entries are 0 when A_ii > 0 and
    // 2 when A_ii < 0; off-diagonals are |A_ij| / sqrt(|A_ii| |A_jj|).
    let scale: Vec<f64> = diag.iter().map(|d| 1.0 / d.abs().sqrt()).collect();
    let mul_m = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let mut acc = if diag[i] < 0.0 { 2.0 * x[i] } else { 0.0 };
                for (j, v) in a.row(i) {
                    if j != i {
                        acc += (v * scale[i] * scale[j]).abs() * x[j];
                    }
                }
                acc
            })
            .collect()
    };
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut rho = 0.0;
    for _ in 0..200 {
        let w = mul_m(&v);
        let norm = crate::sparse::norm2(&w);
        if norm == 0.0 {
            rho = 0.0;
            break;
        }
        let next_rho = norm;
        v = w.iter().map(|x| x / norm).collect();
        if (next_rho - rho).abs() <= 1e-12 * next_rho.max(1.0) {
            rho = next_rho;
            break;
        }
        rho = next_rho;
    }
    GabpDiagnostics {
        diag_dominant: dominant,
        rho_estimate: rho,
    }
}

pub fn solve_gabp(
    sys: &SymmetricSystem,
    tol: f64,
    max_rounds: usize,
) -> Result<SolveReport, SolveError> {
    solve_gabp_with(sys, tol, max_rounds, 0.0)
}

/// Runs synchronous rounds until the largest message change (over both
/// families) falls below `tol`, then infers the means. On non-convergence
/// the best-effort inference is returned with `converged = false`.
pub fn solve_gabp_with(
    sys: &SymmetricSystem,
    tol: f64,
    max_rounds: usize,
    damping: f64,
) -> Result<SolveReport, SolveError> {
    solve_gabp_resuming(sys, tol, max_rounds, damping, &mut None)
}

/// Like [`solve_gabp_with`], but seeds the message state from `warm` when it
/// matches the graph (same sparsity pattern) and stores the final state back.
/// Reusing messages across a sequence of nearby systems — e.g. the Newton
/// systems of consecutive interior-point steps — keeps the round count flat
/// instead of growing as the systems get harder.
pub fn solve_gabp_resuming(
    sys: &SymmetricSystem,
    tol: f64,
    max_rounds: usize,
    damping: f64,
    warm: &mut Option<GabpState>,
) -> Result<SolveReport, SolveError> {
    assert!(tol > 0.0);
    let graph = GabpGraph::new(sys.a(), sys.b())?;
    let mut state = match warm.take() {
        Some(s) if s.p_msg.len() == graph.num_directed_edges() => s,
        _ => GabpState::new(&graph),
    };
    let mut rounds = 0;
    let mut converged = graph.num_directed_edges() == 0;
    while rounds < max_rounds && !converged {
        let next = gabp_round_damped(&graph, &state, damping)?;
        let mut delta = 0.0_f64;
        for e in 0..graph.num_directed_edges() {
            delta = delta
                .max((next.p_msg[e] - state.p_msg[e]).abs())
                .max((next.mu_msg[e] - state.mu_msg[e]).abs());
        }
        state = next;
        rounds += 1;
        converged = delta <= tol;
    }
    let (x, precisions) = gabp_infer_with_precisions(&graph, &state)?;
    *warm = Some(state);
    let final_residual = sys.relative_residual(&x);
    let diag = convergence_diagnostics(sys);
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("diag_dominant".into(), diag.diag_dominant.to_string());
    diagnostics.insert("rho_estimate".into(), diag.rho_estimate.to_string());
    diagnostics.insert("rounds".into(), rounds.to_string());
    diagnostics.insert(
        "min_precision".into(),
        precisions
            .iter()
            .fold(f64::INFINITY, |m, &p| m.min(p.abs()))
            .to_string(),
    );
    Ok(SolveReport {
        x,
        inner_iterations: rounds,
        final_residual,
        converged,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparseSym;

    fn two_by_two() -> SymmetricSystem {
        let a = SparseSym::from_triplets(
            2,
            &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)],
        )
        .unwrap();
        SymmetricSystem::new(a, vec![3.0, 3.0])
    }

    #[test]
    fn hand_checked_first_round() {
        let sys = two_by_two();
        let graph = GabpGraph::new(sys.a(), sys.b()).unwrap();
        let state = GabpState::new(&graph);
        let next = gabp_round(&graph, &state).unwrap();
        // P_{1\2} = P_11 = 2, mu_{1\2} = 1.5, so P_12 = -1 * (1/2) * 1 = -0.5
        // and mu_12 = -(1/-0.5) * 1 * 1.5 = 3. Same by symmetry for 2 -> 1.
        for e in 0..graph.num_directed_edges() {
            assert!((next.p_msg[e] - (-0.5)).abs() < 1e-15);
            assert!((next.mu_msg[e] - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn converges_to_direct_solution() {
        let sys = two_by_two();
        let rep = solve_gabp(&sys, 1e-12, 200).unwrap();
        assert!(rep.converged);
        assert!((rep.x[0] - 1.0).abs() < 1e-10);
        assert!((rep.x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn diagonal_matrix_immediate() {
        let a = SparseSym::from_triplets(3, &[(0, 0, 2.0), (1, 1, 4.0), (2, 2, 8.0)]).unwrap();
        let sys = SymmetricSystem::new(a, vec![2.0, 2.0, 2.0]);
        let rep = solve_gabp(&sys, 1e-10, 10).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.inner_iterations, 0);
        assert_eq!(rep.x, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn fixed_point_replay() {
        let sys = two_by_two();
        let graph = GabpGraph::new(sys.a(), sys.b()).unwrap();
        let mut state = GabpState::new(&graph);
        for _ in 0..100 {
            state = gabp_round(&graph, &state).unwrap();
        }
        let next = gabp_round(&graph, &state).unwrap();
        for e in 0..graph.num_directed_edges() {
            assert!((next.p_msg[e] - state.p_msg[e]).abs() < 1e-12);
            assert!((next.mu_msg[e] - state.mu_msg[e]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_node() {
        let a = SparseSym::from_triplets(1, &[(0, 0, 4.0)]).unwrap();
        let sys = SymmetricSystem::new(a, vec![2.0]);
        let rep = solve_gabp(&sys, 1e-10, 5).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.inner_iterations, 0);
        assert_eq!(rep.x, vec![0.5]);
    }

    #[test]
    fn non_walk_summable_never_lies() {
        // A = [[1,2],[2,1]] is invertible but fails both sufficient
        // conditions; GaBP must not claim convergence with a wrong answer.
        let a = SparseSym::from_triplets(
            2,
            &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)],
        )
        .unwrap();
        let sys = SymmetricSystem::new(a, vec![1.0, 1.0]);
        match solve_gabp(&sys, 1e-8, 500) {
            Ok(rep) => {
                if rep.converged {
                    // Exactness on convergence: x must match A^{-1} b = (1/3, 1/3).
                    assert!((rep.x[0] - 1.0 / 3.0).abs() < 1e-6);
                    assert!((rep.x[1] - 1.0 / 3.0).abs() < 1e-6);
                }
            }
            Err(SolveError::Degenerate(_, _)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn diagnostics_examples() {
        let a = SparseSym::from_triplets(2, &[(0, 0, 1.0), (1, 1, 1.0)]).unwrap();
        let d = convergence_diagnostics(&SymmetricSystem::new(a, vec![0.0, 0.0]));
        assert!(d.diag_dominant);
        assert!(d.rho_estimate.abs() < 1e-12);

        let d = convergence_diagnostics(&two_by_two());
        assert!(d.diag_dominant);
        assert!((d.rho_estimate - 0.5).abs() < 1e-9);

        let a = SparseSym::from_triplets(
            2,
            &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)],
        )
        .unwrap();
        let d = convergence_diagnostics(&SymmetricSystem::new(a, vec![0.0, 0.0]));
        assert!(!d.diag_dominant);
        assert!((d.rho_estimate - 2.0).abs() < 1e-9);
    }
}
