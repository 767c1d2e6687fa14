//! Problem definition: utility functions, the capacitated rate-allocation
//! instance, objective/dual evaluation, the seeded random generator, and
//! the line-oriented instance file format.

use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sparse::RoutingMatrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("utility domain violation at flow {index}: x = {value}")]
    DomainViolation { index: usize, value: f64 },
    #[error("dual point infeasible at flow {index}: r_j^T lambda = {value}")]
    InfeasibleDual { index: usize, value: f64 },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("invalid instance: {0}")]
    BadInstance(String),
    #[error("instance file parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sparse(#[from] crate::sparse::SparseError),
}

/// A concave, twice-differentiable utility on x > 0 (or a subdomain of it),
/// with the conjugate of its negative, (-U)*(a) = sup_{x>=0} (a x + U(x)).
pub trait Utility: Send + Sync {
    fn value(&self, x: f64) -> f64;
    fn grad(&self, x: f64) -> f64;
    fn hess(&self, x: f64) -> f64;
    /// True iff x lies in dom U.
    fn in_domain(&self, x: f64) -> bool;
    /// True iff a lies in dom (-U)*.
    fn in_conjugate_domain(&self, a: f64) -> bool;
    /// (-U)*(a); only called when `in_conjugate_domain(a)`.
    fn neg_conjugate(&self, a: f64) -> f64;
    /// argmax_{x>=0} (U(x) - a x). The default runs a safeguarded
    /// golden-section search; closed-form families override it.
    fn best_response(&self, a: f64) -> f64 {
        golden_section_argmax(|x| self.value(x) - a * x, 0.0, bracket_hi(self, a), 1e-10)
    }
}

fn bracket_hi(u: &(impl Utility + ?Sized), a: f64) -> f64 {
    // Expand until U'(x) - a < 0, i.e. the maximizer is bracketed.
    let mut hi = 1.0;
    while u.in_domain(hi) && u.grad(hi) - a > 0.0 && hi < 1e12 {
        hi *= 2.0;
    }
    hi
}

fn golden_section_argmax(obj: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const INVPHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INVPHI * (hi - lo);
    let mut x2 = lo + INVPHI * (hi - lo);
    let (mut f1, mut f2) = (obj(x1), obj(x2));
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INVPHI * (hi - lo);
            f2 = obj(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INVPHI * (hi - lo);
            f1 = obj(x1);
        }
    }
    0.5 * (lo + hi)
}

/// The utility family shared by all flows of an instance.
#[derive(Clone)]
pub enum UtilityFamily {
    /// U(x) = log x, with (-U)*(a) = -1 - log(-a) on a < 0.
    Log,
    Custom(Arc<dyn Utility>),
}

impl fmt::Debug for UtilityFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtilityFamily::Log => write!(f, "Log"),
            UtilityFamily::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl UtilityFamily {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            UtilityFamily::Log => x.ln(),
            UtilityFamily::Custom(u) => u.value(x),
        }
    }

    pub fn grad(&self, x: f64) -> f64 {
        match self {
            UtilityFamily::Log => 1.0 / x,
            UtilityFamily::Custom(u) => u.grad(x),
        }
    }

    pub fn hess(&self, x: f64) -> f64 {
        match self {
            UtilityFamily::Log => -1.0 / (x * x),
            UtilityFamily::Custom(u) => u.hess(x),
        }
    }

    pub fn in_domain(&self, x: f64) -> bool {
        match self {
            UtilityFamily::Log => x > 0.0,
            UtilityFamily::Custom(u) => u.in_domain(x),
        }
    }

    pub fn in_conjugate_domain(&self, a: f64) -> bool {
        match self {
            UtilityFamily::Log => a < 0.0,
            UtilityFamily::Custom(u) => u.in_conjugate_domain(a),
        }
    }

    pub fn neg_conjugate(&self, a: f64) -> f64 {
        match self {
            UtilityFamily::Log => -1.0 - (-a).ln(),
            UtilityFamily::Custom(u) => u.neg_conjugate(a),
        }
    }

    /// argmax_{x>=0} (U(x) - a x); 1/a in closed form for Log.
    pub fn best_response(&self, a: f64) -> f64 {
        match self {
            UtilityFamily::Log => 1.0 / a,
            UtilityFamily::Custom(u) => u.best_response(a),
        }
    }
}

/// Immutable problem description: routing matrix, link capacities, and the
/// utility family shared by all flows.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    routes: RoutingMatrix,
    capacities: Vec<f64>,
    utility: UtilityFamily,
    seed: Option<u64>,
}

impl ProblemInstance {
    pub fn new(
        routes: RoutingMatrix,
        capacities: Vec<f64>,
        utility: UtilityFamily,
    ) -> Result<Self, ModelError> {
        let (m, n) = (routes.m(), routes.n());
        if m == 0 || n == 0 {
            return Err(ModelError::BadInstance("m and n must be positive".into()));
        }
        if capacities.len() != m {
            return Err(ModelError::BadInstance(format!(
                "capacity vector has length {} but m = {}",
                capacities.len(),
                m
            )));
        }
        if let Some(i) = capacities.iter().position(|&c| !(c > 0.0)) {
            return Err(ModelError::BadInstance(format!(
                "capacity {i} is not positive: {}",
                capacities[i]
            )));
        }
        if let Some(j) = (0..n).find(|&j| routes.col(j).is_empty()) {
            return Err(ModelError::BadInstance(format!("flow {j} uses no link")));
        }
        if let Some(i) = (0..m).find(|&i| routes.row(i).is_empty()) {
            return Err(ModelError::BadInstance(format!("link {i} carries no flow")));
        }
        Ok(Self {
            routes,
            capacities,
            utility,
            seed: None,
        })
    }

    pub fn n(&self) -> usize {
        self.routes.n()
    }

    pub fn m(&self) -> usize {
        self.routes.m()
    }

    pub fn routes(&self) -> &RoutingMatrix {
        &self.routes
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    pub fn utility(&self) -> &UtilityFamily {
        &self.utility
    }

    /// Generator seed, when the instance came from `generate_instance`.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Link slacks s = c - R f.
    pub fn slack(&self, f: &[f64]) -> Vec<f64> {
        let load = self.routes.mul(f);
        self.capacities
            .iter()
            .zip(&load)
            .map(|(&c, &l)| c - l)
            .collect()
    }
}

/// Sum of per-flow utilities, Sum_j U(f_j).
pub fn total_utility(inst: &ProblemInstance, f: &[f64]) -> Result<f64, ModelError> {
    assert_eq!(f.len(), inst.n());
    let u = inst.utility();
    let mut total = 0.0;
    for (j, &x) in f.iter().enumerate() {
        if !u.in_domain(x) {
            return Err(ModelError::DomainViolation { index: j, value: x });
        }
        total += u.value(x);
    }
    Ok(total)
}

/// Dual objective lambda^T c + Sum_j (-U)*(-r_j^T lambda). Upper-bounds the
/// primal optimum by weak duality.
pub fn dual_objective(inst: &ProblemInstance, lambda: &[f64]) -> Result<f64, ModelError> {
    assert_eq!(lambda.len(), inst.m());
    let u = inst.utility();
    let route_price = inst.routes().mul_t(lambda);
    let mut total = crate::sparse::dot(lambda, inst.capacities());
    for (j, &a) in route_price.iter().enumerate() {
        if !u.in_conjugate_domain(-a) {
            return Err(ModelError::InfeasibleDual { index: j, value: a });
        }
        total += u.neg_conjugate(-a);
    }
    Ok(total)
}

/// Uniform starting flow f = gamma 1 with gamma = margin * min_i c_i / (R 1)_i,
/// so that R f <= margin * c componentwise.
pub fn feasible_start(inst: &ProblemInstance, margin: f64) -> Vec<f64> {
    assert!(margin > 0.0 && margin < 1.0);
    let gamma = (0..inst.m())
        .map(|i| inst.capacities()[i] / inst.routes().row(i).len() as f64)
        .fold(f64::INFINITY, f64::min)
        * margin;
    vec![gamma; inst.n()]
}

/// Random instance: each (link, flow) entry of R is Bernoulli(route_len/m),
/// capacities are Uniform[lo, hi]. Empty rows/columns are repaired with one
/// random nonzero each, so the result always satisfies the instance
/// invariants. Deterministic per seed (ChaCha8 stream).
pub fn generate_instance(
    n: usize,
    m: usize,
    avg_route_len: usize,
    cap_range: (f64, f64),
    seed: u64,
) -> Result<ProblemInstance, ModelError> {
    if n == 0 || m == 0 {
        return Err(ModelError::BadParameter("n and m must be positive".into()));
    }
    if avg_route_len == 0 || avg_route_len > m {
        return Err(ModelError::BadParameter(format!(
            "avg_route_len must be in 1..=m, got {avg_route_len} with m = {m}"
        )));
    }
    let (lo, hi) = cap_range;
    if !(lo > 0.0) || hi < lo {
        return Err(ModelError::BadParameter(format!(
            "capacity range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacities: Vec<f64> = (0..m)
        .map(|_| if lo == hi { lo } else { rng.gen_range(lo..hi) })
        .collect();
    let p = avg_route_len as f64 / m as f64;
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n * avg_route_len * 2);
    let mut col_deg = vec![0usize; n];
    let mut row_deg = vec![0usize; m];
    for i in 0..m {
        for j in 0..n {
            if rng.gen::<f64>() < p {
                pairs.push((i, j));
                row_deg[i] += 1;
                col_deg[j] += 1;
            }
        }
    }
    // Repair: one random nonzero into each empty column, then each empty row.
    for j in 0..n {
        if col_deg[j] == 0 {
            let i = rng.gen_range(0..m);
            pairs.push((i, j));
            row_deg[i] += 1;
            col_deg[j] += 1;
        }
    }
    for i in 0..m {
        if row_deg[i] == 0 {
            let j = rng.gen_range(0..n);
            pairs.push((i, j));
            row_deg[i] += 1;
            col_deg[j] += 1;
        }
    }
    let routes = RoutingMatrix::from_pairs(m, n, pairs)?;
    let mut inst = ProblemInstance::new(routes, capacities, UtilityFamily::Log)?;
    inst.seed = Some(seed);
    Ok(inst)
}

/// Write the text instance format:
/// header `NUM v1 n m nnz seed`, then `c i value` and `r i j` lines.
pub fn write_instance(inst: &ProblemInstance, w: &mut impl Write) -> Result<(), ModelError> {
    writeln!(
        w,
        "NUM v1 {} {} {} {}",
        inst.n(),
        inst.m(),
        inst.routes().nnz(),
        inst.seed().unwrap_or(0)
    )?;
    for (i, c) in inst.capacities().iter().enumerate() {
        writeln!(w, "c {i} {c}")?;
    }
    for (i, j) in inst.routes().pairs() {
        writeln!(w, "r {i} {j}")?;
    }
    Ok(())
}

/// Parse the text instance format. Rejects duplicate triplets, out-of-range
/// indices, missing capacities, and malformed lines. Log utilities assumed.
pub fn read_instance(r: impl BufRead) -> Result<ProblemInstance, ModelError> {
    let mut lines = r.lines().enumerate();
    let (lineno, header) = lines
        .next()
        .ok_or_else(|| ModelError::Parse {
            line: 1,
            reason: "empty file".into(),
        })
        .and_then(|(k, l)| Ok((k + 1, l?)))?;
    let parse = |line: usize, tok: &str| -> Result<usize, ModelError> {
        tok.parse().map_err(|_| ModelError::Parse {
            line,
            reason: format!("expected integer, got {tok:?}"),
        })
    };
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 6 || head[0] != "NUM" || head[1] != "v1" {
        return Err(ModelError::Parse {
            line: lineno,
            reason: "header must be `NUM v1 n m nnz seed`".into(),
        });
    }
    let n = parse(lineno, head[2])?;
    let m = parse(lineno, head[3])?;
    let nnz = parse(lineno, head[4])?;
    let seed: u64 = head[5].parse().map_err(|_| ModelError::Parse {
        line: lineno,
        reason: format!("bad seed {:?}", head[5]),
    })?;
    let mut capacities = vec![f64::NAN; m];
    let mut pairs = Vec::with_capacity(nnz);
    for (k, line) in lines {
        let lineno = k + 1;
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        match toks[0] {
            "c" if toks.len() == 3 => {
                let i = parse(lineno, toks[1])?;
                let v: f64 = toks[2].parse().map_err(|_| ModelError::Parse {
                    line: lineno,
                    reason: format!("bad capacity {:?}", toks[2]),
                })?;
                if i >= m {
                    return Err(ModelError::Parse {
                        line: lineno,
                        reason: format!("link index {i} out of range (m = {m})"),
                    });
                }
                capacities[i] = v;
            }
            "r" if toks.len() == 3 => {
                let i = parse(lineno, toks[1])?;
                let j = parse(lineno, toks[2])?;
                pairs.push((i, j));
            }
            _ => {
                return Err(ModelError::Parse {
                    line: lineno,
                    reason: format!("unrecognized line {line:?}"),
                })
            }
        }
    }
    if pairs.len() != nnz {
        return Err(ModelError::Parse {
            line: lineno,
            reason: format!("header declares {nnz} nonzeros, file has {}", pairs.len()),
        });
    }
    if let Some(i) = capacities.iter().position(|c| c.is_nan()) {
        return Err(ModelError::Parse {
            line: lineno,
            reason: format!("capacity for link {i} missing"),
        });
    }
    let routes = RoutingMatrix::from_pairs(m, n, pairs)?;
    let mut inst = ProblemInstance::new(routes, capacities, UtilityFamily::Log)?;
    inst.seed = Some(seed);
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::RoutingMatrix;

    fn single_link(c: f64) -> ProblemInstance {
        let r = RoutingMatrix::from_pairs(1, 1, [(0, 0)]).unwrap();
        ProblemInstance::new(r, vec![c], UtilityFamily::Log).unwrap()
    }

    #[test]
    fn log_utility_values() {
        let two = RoutingMatrix::from_pairs(1, 3, [(0, 0), (0, 1), (0, 2)]).unwrap();
        let inst = ProblemInstance::new(two, vec![10.0], UtilityFamily::Log).unwrap();
        assert_eq!(total_utility(&inst, &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        let r = RoutingMatrix::from_pairs(1, 2, [(0, 0), (0, 1)]).unwrap();
        let inst = ProblemInstance::new(r, vec![10.0], UtilityFamily::Log).unwrap();
        let e = std::f64::consts::E;
        assert!((total_utility(&inst, &[e, e]).unwrap() - 2.0).abs() < 1e-14);
        match total_utility(&inst, &[1.0, -1.0]) {
            Err(ModelError::DomainViolation { index: 1, .. }) => {}
            other => panic!("expected domain violation, got {other:?}"),
        }
    }

    #[test]
    fn dual_objective_closed_form() {
        let inst = single_link(1.0);
        assert!((dual_objective(&inst, &[1.0]).unwrap()).abs() < 1e-15);
        let inst = single_link(2.0);
        let got = dual_objective(&inst, &[0.5]).unwrap();
        assert!((got - 2.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn dual_objective_matches_numeric_sup() {
        // (-U)*(a) for a = -0.5 by golden-section maximization of a x + log x.
        let sup = golden_section_argmax(|x| -0.5 * x + x.ln(), 0.0, 100.0, 1e-10);
        let val = -0.5 * sup + sup.ln();
        assert!((val - (-1.0 - 0.5_f64.ln())).abs() < 1e-8);
    }

    #[test]
    fn dual_infeasibility_detected() {
        // lambda = 0 makes r_j^T lambda = 0, outside dom (-U)* for Log.
        let inst = single_link(1.0);
        match dual_objective(&inst, &[0.0]) {
            Err(ModelError::InfeasibleDual { index: 0, .. }) => {}
            other => panic!("expected infeasible dual, got {other:?}"),
        }
    }

    #[test]
    fn feasible_start_two_flows_one_link() {
        let r = RoutingMatrix::from_pairs(1, 2, [(0, 0), (0, 1)]).unwrap();
        let inst = ProblemInstance::new(r, vec![1.0], UtilityFamily::Log).unwrap();
        let f = feasible_start(&inst, 0.9);
        assert_eq!(f, vec![0.45, 0.45]);
    }

    #[test]
    fn generator_smallest_case() {
        let inst = generate_instance(1, 1, 1, (0.5, 0.5), 7).unwrap();
        assert_eq!(inst.routes().row(0), &[0]);
        assert_eq!(inst.capacities(), &[0.5]);
    }

    #[test]
    fn generator_rejects_bad_params() {
        assert!(matches!(
            generate_instance(5, 3, 4, (0.1, 1.0), 0),
            Err(ModelError::BadParameter(_))
        ));
        assert!(matches!(
            generate_instance(5, 3, 1, (0.0, 1.0), 0),
            Err(ModelError::BadParameter(_))
        ));
    }

    #[test]
    fn generator_deterministic() {
        let a = generate_instance(50, 80, 5, (0.1, 1.0), 123).unwrap();
        let b = generate_instance(50, 80, 5, (0.1, 1.0), 123).unwrap();
        assert_eq!(a.routes(), b.routes());
        assert_eq!(a.capacities(), b.capacities());
        let c = generate_instance(50, 80, 5, (0.1, 1.0), 124).unwrap();
        assert_ne!(a.routes(), c.routes());
    }

    #[test]
    fn instance_file_round_trip() {
        let inst = generate_instance(20, 30, 4, (0.1, 1.0), 9).unwrap();
        let mut buf = Vec::new();
        write_instance(&inst, &mut buf).unwrap();
        let back = read_instance(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back.routes(), inst.routes());
        assert_eq!(back.capacities(), inst.capacities());
        assert_eq!(back.seed(), inst.seed());
    }

    #[test]
    fn instance_file_rejects_duplicates_and_range() {
        let text = "NUM v1 2 1 2 0\nc 0 1.0\nr 0 0\nr 0 0\n";
        assert!(read_instance(std::io::BufReader::new(text.as_bytes())).is_err());
        let text = "NUM v1 2 1 1 0\nc 0 1.0\nr 1 0\n";
        assert!(read_instance(std::io::BufReader::new(text.as_bytes())).is_err());
    }
}
