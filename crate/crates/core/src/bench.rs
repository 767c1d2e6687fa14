//! Benchmark harness: instance generation/loading, solver selection, and
//! trace emission. The CLI binary is a thin wrapper around `run_benchmark`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use thiserror::Error;

use crate::dual_decomp::{self, DualDecompConfig, DualDecompError};
use crate::ipm::{self, IpmConfig, IpmFailure, SolverBackend};
use crate::model::{self, ModelError, ProblemInstance};
use crate::trace::{ConvergenceTrace, TraceError};

/// Iteration cap for the dual-decomposition baseline runs.
pub const DUAL_DECOMP_MAX_ITERS: usize = 20_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid flags: {0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    DualDecomp(#[from] DualDecompError),
    #[error(transparent)]
    Ipm(#[from] Box<IpmFailure>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverChoice {
    #[value(name = "dualdecomp")]
    DualDecomp,
    #[value(name = "ipm-direct")]
    IpmDirect,
    #[value(name = "ipm-pcg")]
    IpmPcg,
    #[value(name = "ipm-gabp")]
    IpmGabp,
    #[value(name = "all")]
    All,
}

impl SolverChoice {
    fn expand(self) -> Vec<SolverChoice> {
        match self {
            SolverChoice::All => vec![
                SolverChoice::DualDecomp,
                SolverChoice::IpmDirect,
                SolverChoice::IpmPcg,
                SolverChoice::IpmGabp,
            ],
            one => vec![one],
        }
    }

    fn id(self) -> &'static str {
        match self {
            SolverChoice::DualDecomp => "dualdecomp",
            SolverChoice::IpmDirect => "ipm-direct",
            SolverChoice::IpmPcg => "ipm-pcg",
            SolverChoice::IpmGabp => "ipm-gabp",
            SolverChoice::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceFormat {
    Csv,
    Json,
}

/// Parsed command line. `--generate` takes `key=value` tokens (n, m,
/// route-len, cap=lo,hi, seed); `--instance` loads the text format instead.
#[derive(Debug, Parser)]
#[command(name = "numsolve", about = "Capacitated rate-allocation solver benchmarks")]
pub struct BenchArgs {
    /// Generate a seeded random instance, e.g.
    /// --generate n=1000 m=2000 route-len=10 cap=0.1,1 seed=42
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE", conflicts_with = "instance")]
    pub generate: Option<Vec<String>>,

    /// Load an instance file (`NUM v1 ...` text format).
    #[arg(long)]
    pub instance: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "ipm-gabp")]
    pub solver: SolverChoice,

    /// Surrogate-gap termination threshold for the interior-point solvers
    /// (and the dual-bound threshold for dual decomposition).
    #[arg(long, default_value_t = 1e-4)]
    pub gap_tol: f64,

    #[arg(long, default_value_t = 50)]
    pub max_newton: usize,

    /// Base PCG relative-residual tolerance (tightened as the gap closes).
    #[arg(long, default_value_t = 1e-2)]
    pub pcg_tol: f64,

    /// Message-convergence tolerance for the belief-propagation backend.
    #[arg(long, default_value_t = 1e-6)]
    pub gabp_tol: f64,

    /// Message damping factor in [0, 1); 0 is the plain update.
    #[arg(long, default_value_t = 0.0)]
    pub gabp_damping: f64,

    /// Dual-decomposition step size; defaults to 0.1 min(c)/max-row-degree.
    #[arg(long)]
    pub alpha: Option<f64>,

    /// Trace output path; with --solver all the solver id is appended.
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "csv")]
    pub format: TraceFormat,

    /// Use the larger-experiment generator defaults (n=10^4, m=2*10^4);
    /// no pass/fail gating applies at this scale.
    #[arg(long)]
    pub large: bool,
}

#[derive(Debug, Clone, Copy)]
struct GenerateSpec {
    n: usize,
    m: usize,
    route_len: usize,
    cap: (f64, f64),
    seed: u64,
}

impl GenerateSpec {
    fn small() -> Self {
        Self {
            n: 1000,
            m: 2000,
            route_len: 10,
            cap: (0.1, 1.0),
            seed: 42,
        }
    }

    fn large() -> Self {
        Self {
            n: 10_000,
            m: 20_000,
            ..Self::small()
        }
    }
}

fn parse_generate(tokens: &[String], large: bool) -> Result<GenerateSpec, BenchError> {
    let mut spec = if large {
        GenerateSpec::large()
    } else {
        GenerateSpec::small()
    };
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| BenchError::Usage(format!("expected key=value, got {tok:?}")))?;
        let bad = |what| BenchError::Usage(format!("bad {what} value {value:?}"));
        match key {
            "n" => spec.n = value.parse().map_err(|_| bad("n"))?,
            "m" => spec.m = value.parse().map_err(|_| bad("m"))?,
            "route-len" => spec.route_len = value.parse().map_err(|_| bad("route-len"))?,
            "cap" => {
                let (lo, hi) = value
                    .split_once(',')
                    .ok_or_else(|| BenchError::Usage("cap needs lo,hi".into()))?;
                spec.cap = (
                    lo.parse().map_err(|_| bad("cap lo"))?,
                    hi.parse().map_err(|_| bad("cap hi"))?,
                );
            }
            "seed" => spec.seed = value.parse().map_err(|_| bad("seed"))?,
            other => {
                return Err(BenchError::Usage(format!("unknown generate key {other:?}")))
            }
        }
    }
    Ok(spec)
}

fn load_instance(args: &BenchArgs) -> Result<ProblemInstance, BenchError> {
    if let Some(path) = &args.instance {
        let file = File::open(path)?;
        return Ok(model::read_instance(BufReader::new(file))?);
    }
    let tokens = args.generate.clone().unwrap_or_default();
    if tokens.is_empty() && !args.large && args.generate.is_none() {
        return Err(BenchError::Usage(
            "one of --generate, --instance, or --large is required".into(),
        ));
    }
    let spec = parse_generate(&tokens, args.large)?;
    Ok(model::generate_instance(
        spec.n,
        spec.m,
        spec.route_len,
        spec.cap,
        spec.seed,
    )?)
}

/// One solver's outcome, as reported on stdout and in the trace file.
#[derive(Debug)]
pub struct SolverRun {
    pub solver: &'static str,
    pub converged: bool,
    pub trace: ConvergenceTrace,
    pub summary: String,
}

fn backend_for(choice: SolverChoice, args: &BenchArgs) -> SolverBackend {
    match choice {
        SolverChoice::IpmDirect => SolverBackend::Direct,
        SolverChoice::IpmPcg => SolverBackend::Pcg {
            base_tol: args.pcg_tol,
            max_iters: 20_000,
        },
        SolverChoice::IpmGabp => SolverBackend::Gabp {
            tol: args.gabp_tol,
            max_rounds: 20_000,
            damping: args.gabp_damping,
        },
        _ => unreachable!("not an interior-point choice"),
    }
}

/// Run one solver on the instance. Solver-level failures (breakdown, line
/// search) come back as `Ok` runs with `converged = false` and the partial
/// trace, so the harness can still emit what was recorded.
pub fn run_solver(
    inst: &ProblemInstance,
    choice: SolverChoice,
    args: &BenchArgs,
) -> Result<SolverRun, BenchError> {
    let started = std::time::Instant::now();
    let (converged, trace, note) = match choice {
        SolverChoice::DualDecomp => {
            let cfg = DualDecompConfig {
                alpha: args.alpha.unwrap_or_else(|| dual_decomp::default_alpha(inst)),
                max_iters: DUAL_DECOMP_MAX_ITERS,
                lambda0: Vec::new(),
                gap_tol: args.gap_tol,
            };
            let out = dual_decomp::solve_dual_decomp(inst, &cfg)?;
            (out.converged, out.trace, String::new())
        }
        SolverChoice::All => unreachable!("expanded by the caller"),
        ipm_choice => {
            let cfg = IpmConfig {
                gap_tol: args.gap_tol,
                max_newton_steps: args.max_newton,
                ..IpmConfig::default()
            };
            match ipm::solve_ipm(inst, &cfg, &backend_for(ipm_choice, args)) {
                Ok(out) => (out.converged, out.trace, String::new()),
                Err(failure) => (false, failure.trace, format!(" error={}", failure.error)),
            }
        }
    };
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let summary = format!(
        "solver={} converged={} final_gap={} outer={} inner_total={} wall_ms={:.1}{}",
        choice.id(),
        converged,
        trace
            .final_gap()
            .map(|g| g.to_string())
            .unwrap_or_else(|| "n/a".into()),
        trace.rows.len(),
        trace.total_inner(),
        wall_ms,
        note,
    );
    Ok(SolverRun {
        solver: choice.id(),
        converged,
        trace,
        summary,
    })
}

/// Write a trace in the requested format.
pub fn emit_trace(
    trace: &ConvergenceTrace,
    format: TraceFormat,
    path: &Path,
) -> Result<(), BenchError> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        TraceFormat::Csv => w.write_all(trace.to_csv().as_bytes())?,
        TraceFormat::Json => w.write_all(trace.to_json()?.as_bytes())?,
    }
    Ok(())
}

fn out_path(args: &BenchArgs, solver: &str, multi: bool) -> PathBuf {
    let ext = match args.format {
        TraceFormat::Csv => "csv",
        TraceFormat::Json => "json",
    };
    match &args.out {
        Some(p) if !multi => p.clone(),
        Some(p) => {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "trace".into());
            p.with_file_name(format!("{stem}-{solver}.{ext}"))
        }
        None => PathBuf::from(format!("trace-{solver}.{ext}")),
    }
}

/// Full harness: load or generate, run the selected solver(s), write trace
/// file(s), print one summary line per solver. Returns the process exit
/// code: 0 when every run converged.
pub fn run_benchmark(args: &BenchArgs, stdout: &mut impl Write) -> Result<i32, BenchError> {
    let inst = load_instance(args)?;
    let choices = args.solver.expand();
    let multi = choices.len() > 1;
    let mut all_converged = true;
    for choice in choices {
        let run = run_solver(&inst, choice, args)?;
        let path = out_path(args, run.solver, multi);
        emit_trace(&run.trace, args.format, &path)?;
        writeln!(stdout, "{} trace={}", run.summary, path.display())?;
        all_converged &= run.converged;
    }
    Ok(if all_converged { 0 } else { 2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_tokens_parse() {
        let spec = parse_generate(
            &[
                "n=10".into(),
                "m=20".into(),
                "route-len=3".into(),
                "cap=0.5,2".into(),
                "seed=7".into(),
            ],
            false,
        )
        .unwrap();
        assert_eq!((spec.n, spec.m, spec.route_len, spec.seed), (10, 20, 3, 7));
        assert_eq!(spec.cap, (0.5, 2.0));
        assert!(parse_generate(&["bogus=1".into()], false).is_err());
        assert!(parse_generate(&["n".into()], false).is_err());
    }

    #[test]
    fn large_defaults() {
        let spec = parse_generate(&[], true).unwrap();
        assert_eq!((spec.n, spec.m), (10_000, 20_000));
    }

    #[test]
    fn out_path_suffixes() {
        let args = BenchArgs::parse_from(["numsolve", "--generate", "n=1", "--out", "run.csv"]);
        assert_eq!(out_path(&args, "ipm-gabp", false), PathBuf::from("run.csv"));
        assert_eq!(
            out_path(&args, "ipm-gabp", true),
            PathBuf::from("run-ipm-gabp.csv")
        );
        let args = BenchArgs::parse_from(["numsolve", "--generate", "n=1"]);
        assert_eq!(
            out_path(&args, "dualdecomp", true),
            PathBuf::from("trace-dualdecomp.csv")
        );
    }
}
