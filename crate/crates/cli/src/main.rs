//! `tensorslice` command-line front-end.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tensorslice::bench::{self, BenchConfig, BenchError, ExtentRule, Experiment};
use tensorslice::executor::{Engine, ExecError};
use tensorslice::expr::{parse, CheckMode, ContractionSpec, ParseError, ValidatedContraction};
use tensorslice::kernels::BackendKind;
use tensorslice::oracle::{contract_naive, OracleError};
use tensorslice::planner::{classify, enumerate_slicings, plan, relayout_advice, ContractionClass, KernelKind, Policy, SlicingPair};
use tensorslice::tensor::{Fill, Tensor};
use tensorslice::Error;

const VERIFY_TOL: f64 = 1e-10;

#[derive(Parser)]
#[command(name = "tensorslice", version, about = "Plan and run tensor contractions as BLAS kernel calls")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify a contraction and print the chosen plan.
    Plan(PlanArgs),
    /// List every slicing that maps onto a kernel.
    Enumerate(EnumerateArgs),
    /// Execute a contraction on random or file operands.
    Run(RunArgs),
    /// Time kernels over a size sweep and write CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// Expression such as `R[+a,-e] = A[+a,+b,+g] * B[-e,-b,-g]`.
    expr: String,
    /// Label extents, e.g. `a=4,b=4,g=4,e=4`.
    #[arg(long, value_parser = parse_extents)]
    extents: Option<BTreeMap<String, usize>>,
    /// Skip variance checks and treat indices positionally.
    #[arg(long)]
    positional: bool,
}

#[derive(Args)]
struct PolicyArgs {
    /// Force a kernel (gemm, copy+gemm, gemv, copy+gemv, ger, dot).
    #[arg(long, conflicts_with = "slicing")]
    kernel: Option<KernelKind>,
    /// Force a slicing, e.g. `010/100`.
    #[arg(long)]
    slicing: Option<SlicingPair>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct EnumerateArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Write the table as CSV to this path (`-` for standard output).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "reference")]
    backend: BackendKind,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Compare with the naive contraction and fail above 1e-10 relative error.
    #[arg(long)]
    verify: bool,
    /// Left operand in the tensor text format (random when absent).
    #[arg(long, requires = "right")]
    left: Option<PathBuf>,
    #[arg(long, requires = "left")]
    right: Option<PathBuf>,
    /// Output tensor path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// square3d, cc4d, gr4d or custom.
    #[arg(long, default_value = "square3d")]
    experiment: String,
    /// Expression for the custom experiment.
    #[arg(long)]
    expr: Option<String>,
    /// Extents for the custom experiment; `n` takes the swept size.
    #[arg(long)]
    extents: Option<String>,
    /// Comma-separated size sweep.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Comma-separated kernels.
    #[arg(long, value_delimiter = ',')]
    kernels: Option<Vec<KernelKind>>,
    #[arg(long, default_value = "reference")]
    backend: BackendKind,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Refuse sizes whose operands would need more than this many bytes.
    #[arg(long, default_value_t = bench::DEFAULT_MEM_CAP)]
    mem_cap: u64,
    /// Check every row against the naive contraction on a random fiber.
    #[arg(long)]
    verify: bool,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    csv: Option<PathBuf>,
}

enum Failure {
    Verify(String),
    Usage(String),
    Resource(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Resource(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Verify(m) | Failure::Usage(m) | Failure::Resource(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Exec(ExecError::WorkCap { .. })
            | Error::Oracle(OracleError::WorkCap { .. })
            | Error::Bench(BenchError::MemoryCap { .. }) => Failure::Resource(msg),
            _ => Failure::Usage(msg),
        }
    }
}

macro_rules! impl_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}
impl_from!(
    tensorslice::tensor::TensorError,
    tensorslice::expr::ValidationError,
    tensorslice::planner::PlanError,
    tensorslice::kernels::KernelError,
    ExecError,
    OracleError,
    BenchError
);

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn parse_extents(s: &str) -> Result<BTreeMap<String, usize>, String> {
    let mut out = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (label, value) = part.split_once('=').ok_or_else(|| format!("expected label=extent, got `{part}`"))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| format!("extent for `{}` is not a number", label.trim()))?;
        out.insert(label.trim().to_string(), value);
    }
    Ok(out)
}

fn parse_rules(s: &str) -> Result<BTreeMap<String, ExtentRule>, String> {
    let mut out = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (label, value) = part.split_once('=').ok_or_else(|| format!("expected label=extent, got `{part}`"))?;
        let rule = match value.trim() {
            "n" | "size" => ExtentRule::Size,
            v => ExtentRule::Fixed(v.parse().map_err(|_| format!("extent for `{}` is not a number", label.trim()))?),
        };
        out.insert(label.trim().to_string(), rule);
    }
    Ok(out)
}

fn parse_spec(args: &SpecArgs) -> Result<ContractionSpec, Failure> {
    let mode = if args.positional { CheckMode::Positional } else { CheckMode::Strict };
    parse(&args.expr, mode).map_err(|e| {
        let mut msg = format!("parse error: {e}");
        if let ParseError::Syntax { column, .. } = e {
            msg.push_str(&format!("\n  {}\n  {}^", args.expr, " ".repeat(column.saturating_sub(1))));
        }
        Failure::Usage(msg)
    })
}

fn validated(args: &SpecArgs, spec: &ContractionSpec) -> Result<ValidatedContraction, Failure> {
    let extents = args
        .extents
        .as_ref()
        .ok_or_else(|| Failure::Usage("--extents is required".into()))?;
    Ok(ValidatedContraction::from_extents(spec, extents)?)
}

fn policy(args: &PolicyArgs) -> Policy {
    match (&args.kernel, &args.slicing) {
        (Some(k), _) => Policy::ForceKernel(*k),
        (None, Some(s)) => Policy::ForceSlicing(s.clone()),
        (None, None) => Policy::Auto,
    }
}

fn cmd_plan(args: PlanArgs) -> Result<(), Failure> {
    let spec = parse_spec(&args.spec)?;
    let v = validated(&args.spec, &spec)?;
    let p = plan(&v, &policy(&args.policy))?;
    println!("{p}");
    if classify(&spec) == ContractionClass::ThreeOne {
        let advice = relayout_advice(&spec);
        if advice.is_empty() {
            println!("advice:       no single mode reordering reaches a direct GEMM");
        }
        for a in advice {
            println!("advice:       {}: {}", a.description, a.spec);
        }
    }
    Ok(())
}

fn cmd_enumerate(args: EnumerateArgs) -> Result<(), Failure> {
    let spec = parse_spec(&args.spec)?;
    let v = validated(&args.spec, &spec)?;
    let rows = enumerate_slicings(&v);
    let yn = |b: bool| if b { "yes" } else { "no" };
    if let Some(path) = args.csv {
        let sink: Box<dyn Write> = if path.as_os_str() == "-" {
            Box::new(io::stdout().lock())
        } else {
            Box::new(File::create(&path)?)
        };
        let mut w = csv::Writer::from_writer(sink);
        let csv_err = |e: csv::Error| Failure::Usage(e.to_string());
        w.write_record(["left", "right", "output", "r1", "r2", "r3", "fallback", "kernel", "kernel_calls"])
            .map_err(csv_err)?;
        for r in &rows {
            w.write_record([
                r.slicing.left.to_string(),
                r.slicing.right.to_string(),
                r.output_slicing.to_string(),
                yn(r.report.r1).into(),
                yn(r.report.r2).into(),
                yn(r.report.r3).into(),
                r.report.fallback.to_string(),
                r.report.kernel.to_string(),
                r.kernel_calls.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        return Ok(());
    }
    println!("expression: {spec}");
    println!("class:      {}", classify(&spec));
    println!(
        "{:<14} {:<14} {:<14} {:<3} {:<3} {:<3} {:<8} {:<11} {:>8}",
        "left", "right", "output", "R1", "R2", "R3", "fallback", "kernel", "calls"
    );
    for r in &rows {
        println!(
            "{:<14} {:<14} {:<14} {:<3} {:<3} {:<3} {:<8} {:<11} {:>8}",
            r.slicing.left.to_string(),
            r.slicing.right.to_string(),
            r.output_slicing.to_string(),
            yn(r.report.r1),
            yn(r.report.r2),
            yn(r.report.r3),
            r.report.fallback.to_string(),
            r.report.kernel.to_string(),
            r.kernel_calls
        );
    }
    Ok(())
}

fn max_rel_err(got: &Tensor, want: &Tensor) -> f64 {
    let scale = want.data().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    got.data()
        .iter()
        .zip(want.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let spec = parse_spec(&args.spec)?;
    let (left, right, v) = match (&args.left, &args.right) {
        (Some(l), Some(r)) => {
            let (l, r) = (Tensor::load(l)?, Tensor::load(r)?);
            let v = ValidatedContraction::new(&spec, &l, &r)?;
            (l, r, v)
        }
        _ => {
            let v = validated(&args.spec, &spec)?;
            let l = Tensor::new(&v.left_extents(), &spec.left().variances(), Fill::SeededRandom(args.seed))?
                .with_name(&spec.left().name);
            let r = Tensor::new(
                &v.right_extents(),
                &spec.right().variances(),
                Fill::SeededRandom(args.seed.wrapping_add(1)),
            )?
            .with_name(&spec.right().name);
            (l, r, v)
        }
    };
    let p = plan(&v, &policy(&args.policy))?;
    let engine = Engine::new(args.backend)?.workers(args.workers);
    let (out, stats) = engine.execute(&p, &left, &right)?;

    match &args.out {
        Some(path) => out.save(path)?,
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            out.write_text(&mut w)?;
            w.flush()?;
        }
    }
    let mut line = format!(
        "kernel={} slicing={} backend={} workers={} calls={} packed_bytes={} flops={} time={:.6}s gflops={:.3}",
        p.kernel,
        p.slicing,
        engine.backend().name(),
        engine.options().workers,
        stats.kernel_calls,
        stats.packed_bytes,
        stats.flops,
        stats.wall_time.as_secs_f64(),
        stats.gflops()
    );
    let mut failed = None;
    if args.verify {
        let want = contract_naive(&v, &left, &right)?;
        let err = max_rel_err(&out, &want);
        line.push_str(&format!(" max_rel_err={err:.3e}"));
        if !(err <= VERIFY_TOL) {
            failed = Some(format!("verification failed: max_rel_err {err:.3e} exceeds {VERIFY_TOL:e}"));
        }
    }
    eprintln!("{line}");
    match failed {
        Some(m) => Err(Failure::Verify(m)),
        None => Ok(()),
    }
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let experiment = if args.experiment.eq_ignore_ascii_case("custom") {
        let expression = args
            .expr
            .clone()
            .ok_or_else(|| Failure::Usage("the custom experiment needs --expr".into()))?;
        let rules = args
            .extents
            .as_deref()
            .ok_or_else(|| Failure::Usage("the custom experiment needs --extents".into()))?;
        Experiment::Custom {
            expression,
            extents: parse_rules(rules).map_err(Failure::Usage)?,
        }
    } else {
        args.experiment.parse::<Experiment>()?
    };
    let mut cfg = BenchConfig::new(experiment);
    if let Some(s) = args.sizes {
        cfg.sizes = s;
    }
    if let Some(k) = args.kernels {
        cfg.kernels = k;
    }
    cfg.backend = args.backend;
    cfg.repetitions = args.reps;
    cfg.seed = args.seed;
    cfg.workers = args.workers;
    cfg.mem_cap = args.mem_cap;
    cfg.verify = args.verify;

    let rows = bench::run_bench_with(&cfg, |r| {
        let timing = match r.gflops {
            Some(g) => format!("{g:.3} GFLOPS"),
            None => "-".into(),
        };
        eprintln!("{} size={} {} {}: {timing} [{}]", r.experiment, r.size, r.expression, r.kernel, r.status);
    })?;
    match &args.csv {
        Some(path) => bench::write_csv(&rows, File::create(path)?)?,
        None => bench::write_csv(&rows, io::stdout().lock())?,
    }
    let bad = rows.iter().filter(|r| r.status == "verify-failed").count();
    if bad > 0 {
        return Err(Failure::Verify(format!("{bad} benchmark rows failed verification")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Enumerate(a) => cmd_enumerate(a),
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
