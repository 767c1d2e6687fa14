//! Direct and iterative backends for symmetric linear systems.
//!
//! `solve_direct` factors with a Bunch-Kaufman pivoted LDL^T (the systems
//! are symmetric indefinite). Systems carrying the interior-point block
//! structure are first reduced, by eliminating the two diagonal outer
//! blocks, to a positive definite Schur complement that a plain Cholesky
//! handles; this keeps the direct backend usable at benchmark scale.
//! `solve_pcg` is conjugate gradient with a Jacobi |diag| preconditioner
//! and surfaces breakdowns on indefinite systems as structured errors.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::sparse::{dot, norm2, SparseSym};

/// Order above which the dense factorization paths refuse to run.
pub const MAX_DENSE_DIM: usize = 3000;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("matrix numerically singular at pivot {pivot}")]
    Singular { pivot: usize },
    #[error("conjugate gradient breakdown at iteration {iteration}")]
    Breakdown { iteration: usize },
    #[error("message degeneracy on edge ({0}, {1}): zero precision aggregate")]
    Degenerate(usize, usize),
    #[error("system of order {dim} exceeds the direct-solver limit {limit}")]
    TooLarge { dim: usize, limit: usize },
}

/// Symmetric system A x = b for one Newton step (or a test system).
#[derive(Debug, Clone)]
pub struct SymmetricSystem {
    a: SparseSym,
    b: Vec<f64>,
    /// (n, m, n) interior-point block sizes, when the system has them.
    block_sizes: Option<(usize, usize, usize)>,
}

impl SymmetricSystem {
    pub fn new(a: SparseSym, b: Vec<f64>) -> Self {
        assert_eq!(a.dim(), b.len());
        Self {
            a,
            b,
            block_sizes: None,
        }
    }

    pub fn with_blocks(a: SparseSym, b: Vec<f64>, blocks: (usize, usize, usize)) -> Self {
        assert_eq!(a.dim(), b.len());
        assert_eq!(blocks.0 + blocks.1 + blocks.2, a.dim());
        Self {
            a,
            b,
            block_sizes: Some(blocks),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn a(&self) -> &SparseSym {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn block_sizes(&self) -> Option<(usize, usize, usize)> {
        self.block_sizes
    }

    /// ||A x - b||_2 / ||b||_2 (or the absolute norm when b = 0).
    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let ax = self.a.mul(x);
        let r: Vec<f64> = ax.iter().zip(&self.b).map(|(a, b)| a - b).collect();
        let nb = norm2(&self.b);
        if nb > 0.0 {
            norm2(&r) / nb
        } else {
            norm2(&r)
        }
    }
}

/// Outcome of one linear solve, shared by all backends.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub inner_iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub diagnostics: BTreeMap<String, String>,
}

impl SolveReport {
    fn new(sys: &SymmetricSystem, x: Vec<f64>, inner: usize, converged: bool) -> Self {
        let final_residual = sys.relative_residual(&x);
        Self {
            x,
            inner_iterations: inner,
            final_residual,
            converged,
            diagnostics: BTreeMap::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Direct backend

pub fn solve_direct(sys: &SymmetricSystem) -> Result<SolveReport, SolveError> {
    if let Some(x) = try_schur_solve(sys) {
        let mut rep = SolveReport::new(sys, x, 0, true);
        rep.diagnostics
            .insert("method".into(), "schur-cholesky".into());
        return Ok(rep);
    }
    let n = sys.dim();
    if n > MAX_DENSE_DIM {
        return Err(SolveError::TooLarge {
            dim: n,
            limit: MAX_DENSE_DIM,
        });
    }
    let mut a = sys.a.to_dense();
    let ipiv = bunch_kaufman_factor(&mut a)?;
    let mut x = sys.b.clone();
    bunch_kaufman_solve(&a, &ipiv, &mut x);
    let mut rep = SolveReport::new(sys, x, 0, true);
    rep.diagnostics
        .insert("method".into(), "bunch-kaufman".into());
    Ok(rep)
}

/// Interior-point block structure: A = [[D1, B, C], [B^T, D2, 0], [C, 0, D3]]
/// with D1, D2, D3, C diagonal. Eliminating the third and second blocks
/// leaves H = D1 - C^2/D3 - B D2^{-1} B^T, positive definite for interior
/// states. Returns None when the structure (or definiteness) is absent.
fn try_schur_solve(sys: &SymmetricSystem) -> Option<Vec<f64>> {
    let (nf, nl, nm) = sys.block_sizes?;
    if nf == 0 || nl == 0 || nm != nf || nf > 4096 {
        return None;
    }
    let a = &sys.a;
    let b = sys.b();
    let mut d1 = vec![0.0; nf];
    let mut c = vec![0.0; nf]; // the diagonal (1,3) coupling
    let mut d2 = vec![0.0; nl];
    let mut d3 = vec![0.0; nf];
    // Column entries of B per middle row: row nf+i holds B^T row i.
    let mut coupl: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nl];
    for i in 0..nf {
        for (j, v) in a.row(i) {
            if j == i {
                d1[i] = v;
            } else if j == nf + nl + i {
                c[i] = v;
            } else if j < nf || (j >= nf + nl && j != nf + nl + i) {
                return None; // off-diagonal inside block 1 or block (1,3)
            }
        }
    }
    for i in 0..nl {
        for (j, v) in a.row(nf + i) {
            if j == nf + i {
                d2[i] = v;
            } else if j < nf {
                coupl[i].push((j, v));
            } else {
                return None; // block (2,2) off-diagonal or (2,3) coupling
            }
        }
    }
    for i in 0..nf {
        for (j, v) in a.row(nf + nl + i) {
            if j == nf + nl + i {
                d3[i] = v;
            } else if j != i {
                return None;
            } else if v != c[i] {
                return None;
            }
        }
    }
    if d2.iter().any(|&v| v == 0.0) || d3.iter().any(|&v| v == 0.0) {
        return None;
    }
    // H and its right-hand side.
    let mut h = vec![vec![0.0; nf]; nf];
    let mut rhs = vec![0.0; nf];
    for j in 0..nf {
        h[j][j] = d1[j] - c[j] * c[j] / d3[j];
        rhs[j] = b[j] - c[j] / d3[j] * b[nf + nl + j];
    }
    for i in 0..nl {
        let w = 1.0 / d2[i];
        for &(j, v) in &coupl[i] {
            rhs[j] -= v * w * b[nf + i];
            for &(j2, v2) in &coupl[i] {
                if j2 <= j {
                    h[j][j2] -= v * v2 * w;
                }
            }
        }
    }
    let x1 = cholesky_solve(&mut h, rhs)?;
    let mut x = vec![0.0; sys.dim()];
    x[..nf].copy_from_slice(&x1);
    for i in 0..nl {
        let mut acc = b[nf + i];
        for &(j, v) in &coupl[i] {
            acc -= v * x1[j];
        }
        x[nf + i] = acc / d2[i];
    }
    for j in 0..nf {
        x[nf + nl + j] = (b[nf + nl + j] - c[j] * x1[j]) / d3[j];
    }
    Some(x)
}

/// In-place dense Cholesky (lower triangle of `h`) and solve. Returns None
/// when a pivot is not positive.
fn cholesky_solve(h: &mut [Vec<f64>], mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for j in 0..n {
        let mut d = h[j][j];
        for k in 0..j {
            d -= h[j][k] * h[j][k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        h[j][j] = d;
        for i in j + 1..n {
            let mut v = h[i][j];
            let (rj, ri) = (j, i);
            for k in 0..j {
                v -= h[ri][k] * h[rj][k];
            }
            h[i][j] = v / d;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= h[i][k] * b[k];
        }
        b[i] = v / h[i][i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= h[k][i] * b[k];
        }
        b[i] = v / h[i][i];
    }
    Some(b)
}

/// Bunch-Kaufman partial-pivoting LDL^T on the lower triangle of a dense
/// symmetric matrix. Pivots are encoded LAPACK-style (one-based): ipiv[k] =
/// kp+1 for a 1x1 pivot, ipiv[k] = ipiv[k+1] = -(kp+1) for a 2x2 pivot.
fn bunch_kaufman_factor(a: &mut [Vec<f64>]) -> Result<Vec<isize>, SolveError> {
    let n = a.len();
    let alpha = (1.0 + 17.0_f64.sqrt()) / 8.0;
    let mut ipiv = vec![0isize; n];
    let mut k = 0;
    while k < n {
        let mut kstep = 1;
        let absakk = a[k][k].abs();
        let (imax, colmax) = if k + 1 < n {
            let mut im = k + 1;
            let mut cm = 0.0;
            for i in k + 1..n {
                let v = a[i][k].abs();
                if v > cm {
                    cm = v;
                    im = i;
                }
            }
            (im, cm)
        } else {
            (k, 0.0)
        };
        if absakk.max(colmax) == 0.0 {
            return Err(SolveError::Singular { pivot: k });
        }
        let kp = if absakk >= alpha * colmax {
            k
        } else {
            let mut rowmax = 0.0_f64;
            for j in k..imax {
                rowmax = rowmax.max(a[imax][j].abs());
            }
            for i in imax + 1..n {
                rowmax = rowmax.max(a[i][imax].abs());
            }
            if absakk >= alpha * colmax * (colmax / rowmax) {
                k
            } else if a[imax][imax].abs() >= alpha * rowmax {
                imax
            } else {
                kstep = 2;
                imax
            }
        };
        let kk = k + kstep - 1;
        if kp != kk {
            for i in kp + 1..n {
                let t = a[i][kk];
                a[i][kk] = a[i][kp];
                a[i][kp] = t;
            }
            for i in kk + 1..kp {
                let t = a[i][kk];
                a[i][kk] = a[kp][i];
                a[kp][i] = t;
            }
            let t = a[kk][kk];
            a[kk][kk] = a[kp][kp];
            a[kp][kp] = t;
            if kstep == 2 {
                let t = a[k + 1][k];
                a[k + 1][k] = a[kp][k];
                a[kp][k] = t;
            }
        }
        if kstep == 1 {
            let d = a[k][k];
            if d == 0.0 {
                return Err(SolveError::Singular { pivot: k });
            }
            let d11 = 1.0 / d;
            for j in k + 1..n {
                let cjk = a[j][k];
                if cjk != 0.0 {
                    let w = cjk * d11;
                    for i in j..n {
                        a[i][j] -= a[i][k] * w;
                    }
                }
            }
            for i in k + 1..n {
                a[i][k] *= d11;
            }
            ipiv[k] = kp as isize + 1;
        } else {
            if k + 2 < n {
                let mut d21 = a[k + 1][k];
                let d11 = a[k + 1][k + 1] / d21;
                let d22 = a[k][k] / d21;
                let t = d11 * d22 - 1.0;
                if t == 0.0 {
                    return Err(SolveError::Singular { pivot: k });
                }
                d21 = (1.0 / t) / d21;
                for j in k + 2..n {
                    let wk = d21 * (d11 * a[j][k] - a[j][k + 1]);
                    let wkp1 = d21 * (d22 * a[j][k + 1] - a[j][k]);
                    for i in j..n {
                        a[i][j] -= a[i][k] * wk + a[i][k + 1] * wkp1;
                    }
                    a[j][k] = wk;
                    a[j][k + 1] = wkp1;
                }
            }
            ipiv[k] = -(kp as isize + 1);
            ipiv[k + 1] = -(kp as isize + 1);
        }
        k += kstep;
    }
    Ok(ipiv)
}

fn bunch_kaufman_solve(a: &[Vec<f64>], ipiv: &[isize], b: &mut [f64]) {
    let n = b.len();
    // Forward: x := D^{-1} L^{-1} P b, interleaved with the pivot order.
    let mut k = 0;
    while k < n {
        if ipiv[k] > 0 {
            let kp = ipiv[k] as usize - 1;
            if kp != k {
                b.swap(k, kp);
            }
            for i in k + 1..n {
                b[i] -= a[i][k] * b[k];
            }
            b[k] /= a[k][k];
            k += 1;
        } else {
            let kp = (-ipiv[k]) as usize - 1;
            if kp != k + 1 {
                b.swap(k + 1, kp);
            }
            for i in k + 2..n {
                b[i] -= a[i][k] * b[k] + a[i][k + 1] * b[k + 1];
            }
            let akm1k = a[k + 1][k];
            let akm1 = a[k][k] / akm1k;
            let ak = a[k + 1][k + 1] / akm1k;
            let denom = akm1 * ak - 1.0;
            let bkm1 = b[k] / akm1k;
            let bk = b[k + 1] / akm1k;
            b[k] = (ak * bkm1 - bk) / denom;
            b[k + 1] = (akm1 * bk - bkm1) / denom;
            k += 2;
        }
    }
    // Backward: x := P^T L^{-T} x.
    let mut k = n as isize - 1;
    while k >= 0 {
        let ku = k as usize;
        if ipiv[ku] > 0 {
            for i in ku + 1..n {
                b[ku] -= a[i][ku] * b[i];
            }
            let kp = ipiv[ku] as usize - 1;
            if kp != ku {
                b.swap(ku, kp);
            }
            k -= 1;
        } else {
            let km = ku - 1;
            for i in ku + 1..n {
                b[km] -= a[i][km] * b[i];
                b[ku] -= a[i][ku] * b[i];
            }
            let kp = (-ipiv[ku]) as usize - 1;
            if kp != ku {
                b.swap(ku, kp);
            }
            k -= 2;
        }
    }
}

// ---------------------------------------------------------------------------
// Preconditioned conjugate gradient

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    /// M = diag(|A_ii|).
    Jacobi,
    Identity,
}

pub fn solve_pcg(
    sys: &SymmetricSystem,
    tol: f64,
    max_iters: usize,
) -> Result<SolveReport, SolveError> {
    solve_pcg_with(sys, tol, max_iters, Preconditioner::Jacobi)
}

pub fn solve_pcg_with(
    sys: &SymmetricSystem,
    tol: f64,
    max_iters: usize,
    precond: Preconditioner,
) -> Result<SolveReport, SolveError> {
    assert!(tol > 0.0);
    let n = sys.dim();
    let b = sys.b();
    let nb = norm2(b);
    if nb == 0.0 {
        let mut rep = SolveReport::new(sys, vec![0.0; n], 0, true);
        rep.diagnostics.insert("precond".into(), format!("{precond:?}"));
        return Ok(rep);
    }
    let minv: Vec<f64> = match precond {
        Preconditioner::Jacobi => sys
            .a
            .diag()
            .iter()
            .map(|&d| if d != 0.0 { 1.0 / d.abs() } else { 1.0 })
            .collect(),
        Preconditioner::Identity => vec![1.0; n],
    };
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&minv).map(|(ri, mi)| ri * mi).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=max_iters {
        iterations = it;
        let ap = sys.a.mul(&p);
        let pap = dot(&p, &ap);
        // Indefinite systems can drive the curvature to zero; CG then has
        // no valid step ("breakdown"), which we report rather than mask.
        if !pap.is_finite() || pap.abs() < 1e-300 * dot(&p, &p).max(1.0) {
            return Err(SolveError::Breakdown { iteration: it });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::Breakdown { iteration: it });
        }
        if norm2(&r) / nb <= tol {
            converged = true;
            break;
        }
        for i in 0..n {
            z[i] = r[i] * minv[i];
        }
        let rz_new = dot(&r, &z);
        if rz == 0.0 || !rz_new.is_finite() {
            return Err(SolveError::Breakdown { iteration: it });
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    // Recompute the residual from scratch so the report honors its contract
    // even if the recurrence drifted.
    let mut rep = SolveReport::new(sys, x, iterations, converged);
    if converged && rep.final_residual > tol {
        rep.converged = false;
    }
    rep.diagnostics.insert("precond".into(), format!("{precond:?}"));
    Ok(rep)
}
