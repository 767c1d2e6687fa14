//! Solvers for capacitated network rate allocation (network utility
//! maximization): a dual-decomposition baseline, a primal-dual
//! interior-point method whose Newton systems are solved directly or by
//! preconditioned conjugate gradient, and the same interior-point outer
//! loop driven by Gaussian belief propagation. A seeded generator and a
//! trace-emitting CLI make runs reproducible end to end.

pub mod bench;
pub mod dual_decomp;
pub mod gabp;
pub mod ipm;
pub mod linsolve;
pub mod model;
pub mod sparse;
pub mod trace;

pub use bench::{run_benchmark, BenchArgs};
pub use model::{generate_instance, ProblemInstance, UtilityFamily};
pub use trace::ConvergenceTrace;
