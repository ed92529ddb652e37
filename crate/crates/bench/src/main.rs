use clap::{Args, Parser, Subcommand};
use echopt::ech::EchConfig;
use echopt_bench::compare::{run_comparison, run_pipeline, RunReport};
use echopt_bench::config::{parse_buffer_mode, parse_policy, FileConfig};
use echopt_bench::problems::BenchProblemSpec;
use echopt_bench::report::{comparison_table, emit_reports, load_record};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "echopt-bench",
    version,
    about = "Avoidance benchmark: constraint-pruning mesh refinement vs. the conventional loop"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one problem with one pipeline and write its artifacts.
    Run(SolveArgs),
    /// Solve one problem with both pipelines and write the comparison.
    Compare(SolveArgs),
    /// Re-emit artifacts from a previously written record.
    Report(ReportArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Problem name: nfz5, no_nfz, or single_nfz.
    #[arg(long)]
    problem: Option<String>,
    /// Pipeline for `run`: ech or standard. Ignored by `compare`.
    #[arg(long)]
    pipeline: Option<String>,
    /// Config file; flags given here override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// Initial mesh interval count.
    #[arg(long)]
    intervals: Option<usize>,
    /// Multiplier segment-mean level that counts as active.
    #[arg(long)]
    zeta: Option<f64>,
    /// Activation window padding, seconds.
    #[arg(long)]
    beta: Option<f64>,
    /// Buffer update rule: fixed or adaptive.
    #[arg(long)]
    buffer_mode: Option<String>,
    /// Warm-start repair policy: practical or strict.
    #[arg(long)]
    policy: Option<String>,
    /// Defect integral tolerance of the refinement loop.
    #[arg(long)]
    eta_tol: Option<f64>,
    /// Between-node constraint violation tolerance.
    #[arg(long)]
    eps_tol: Option<f64>,
    /// Refinement round cap.
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Previously written record.toml.
    #[arg(long)]
    record: PathBuf,
    /// Output directory for re-emitted artifacts.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Run(args) => solve_cmd(args, false),
        Cmd::Compare(args) => solve_cmd(args, true),
        Cmd::Report(args) => report_cmd(args),
    }
}

fn solve_cmd(args: SolveArgs, both: bool) -> Result<(), Box<dyn std::error::Error>> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };

    let name = args
        .problem
        .clone()
        .or_else(|| file.problem.name.clone())
        .unwrap_or_else(|| "nfz5".into());
    let mut spec = BenchProblemSpec::by_name(&name)?;
    if let Some(k) = file.problem.intervals {
        spec.intervals = k;
    }
    if let Some(k) = args.intervals {
        spec.intervals = k;
    }

    let mut cfg = EchConfig::default();
    file.apply(&mut cfg)?;
    apply_flags(&args, &mut cfg)?;

    let prob = spec.build()?;
    let report = if both {
        run_comparison(&prob, &cfg)
    } else {
        let pipeline = args.pipeline.as_deref().unwrap_or("ech");
        let filtered = match pipeline {
            "ech" => true,
            "standard" => false,
            other => {
                return Err(format!("unknown pipeline {other:?}; expected ech or standard").into())
            }
        };
        let run = run_pipeline(&prob, &prob.initial_guess(), &cfg, filtered)?;
        let mut report =
            RunReport { problem: prob.spec.clone(), standard: None, ech: None, failure: None };
        if filtered {
            report.ech = Some(run.report);
        } else {
            report.standard = Some(run.report);
        }
        report
    };

    print!("{}", comparison_table(&report));
    let written = emit_reports(&report, &args.out)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    match &report.failure {
        Some(failure) => Err(failure.clone().into()),
        None => Ok(()),
    }
}

fn apply_flags(args: &SolveArgs, cfg: &mut EchConfig) -> Result<(), Box<dyn std::error::Error>> {
    if let Some(v) = args.zeta {
        cfg.zeta = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = Some(v);
    }
    if let Some(s) = &args.buffer_mode {
        cfg.buffer_mode = parse_buffer_mode(s)?;
    }
    if let Some(s) = &args.policy {
        cfg.afp_policy = parse_policy(s)?;
    }
    if let Some(v) = args.eta_tol {
        cfg.eta_tol = v;
    }
    if let Some(v) = args.eps_tol {
        cfg.eps_tol = v;
    }
    if let Some(v) = args.max_iterations {
        cfg.max_iterations = v;
    }
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<(), Box<dyn std::error::Error>> {
    let report = load_record(&args.record)?;
    print!("{}", comparison_table(&report));
    let written = emit_reports(&report, &args.out)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
