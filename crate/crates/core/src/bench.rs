//! Benchmark sweeps: one forced-kernel plan per row, timed as the median of
//! several repetitions after a discarded warm-up run.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::executor::{Engine, ExecError, ExecutionStats};
use crate::expr::{parse, CheckMode, ContractionSpec, ParseError, ValidatedContraction, ValidationError};
use crate::kernels::{BackendKind, KernelError};
use crate::oracle::{element, OracleError};
use crate::planner::{plan, ExecutionPlan, KernelKind, PlanError, Policy};
use crate::tensor::{Fill, Tensor, TensorError};

/// Relative error above which a sampled row is reported as failed.
pub const VERIFY_TOL: f64 = 1e-10;
pub const DEFAULT_MEM_CAP: u64 = 2 << 30;

const SQUARE_DIRECT: &str = "R[+a,-e] = A[+a,+b,+g] * B[-e,-b,-g]";
const SQUARE_COPY: &str = "R[+b,-e] = A[+a,+b,+g] * B[-g,-a,-e]";
const XY_SAME_ORDER: &str = "R[+a,+b,+c,+d] = X[+i,+a,+j,+b] * Y[-i,+c,-j,+d]";
const XY_SWAPPED: &str = "R[+a,+b,+c,+d] = X[+i,+a,+j,+b] * Y[-j,+c,-i,+d]";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error("`{expression}` at size {size} needs about {needed} bytes, cap is {cap}")]
    MemoryCap {
        expression: String,
        size: usize,
        needed: u64,
        cap: u64,
    },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Extent of one label in a custom experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtentRule {
    Fixed(usize),
    /// Takes the swept size.
    Size,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Experiment {
    /// Two double contractions of cubic order-3 tensors, one reaching GEMM
    /// directly and one needing copies.
    Square3d,
    /// Order-4 double contraction with long contracted labels (`size`) and
    /// short free labels (`size / 10`); the second free label of `X` has extent 1.
    Cc4d,
    /// The same shape with contracted extents 4 and free extents `size`; the
    /// second free label of `X` has extent 1.
    Gr4d,
    Custom {
        expression: String,
        extents: BTreeMap<String, ExtentRule>,
    },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Square3d => "square3d",
            Experiment::Cc4d => "cc4d",
            Experiment::Gr4d => "gr4d",
            Experiment::Custom { .. } => "custom",
        }
    }

    pub fn default_sizes(&self) -> Vec<usize> {
        match self {
            Experiment::Square3d => vec![50, 100, 150, 200],
            Experiment::Cc4d => vec![100, 150],
            Experiment::Gr4d => vec![100, 200],
            Experiment::Custom { .. } => vec![8, 16, 32],
        }
    }

    pub fn default_kernels(&self) -> Vec<KernelKind> {
        use KernelKind::*;
        match self {
            Experiment::Square3d => vec![Gemm, CopyGemm, Gemv, Ger],
            Experiment::Cc4d | Experiment::Gr4d => vec![Gemm, CopyGemm, Ger, Dot],
            Experiment::Custom { .. } => vec![Gemm, CopyGemm, Gemv, Ger, Dot],
        }
    }

    /// Expressions a kernel row runs on.
    fn expressions(&self, kernel: KernelKind) -> Vec<String> {
        match self {
            Experiment::Square3d => vec![SQUARE_DIRECT.into(), SQUARE_COPY.into()],
            Experiment::Cc4d | Experiment::Gr4d => {
                let e = if kernel == KernelKind::Gemm { XY_SAME_ORDER } else { XY_SWAPPED };
                vec![e.into()]
            }
            Experiment::Custom { expression, .. } => vec![expression.clone()],
        }
    }

    fn extents(&self, size: usize) -> BTreeMap<String, usize> {
        let fixed = |pairs: &[(&str, usize)]| pairs.iter().map(|(l, e)| (l.to_string(), *e)).collect();
        match self {
            Experiment::Square3d => fixed(&[("a", size), ("b", size), ("g", size), ("e", size)]),
            Experiment::Cc4d => {
                let short = (size / 10).max(1);
                fixed(&[("i", size), ("j", size), ("a", short), ("b", 1), ("c", short), ("d", short)])
            }
            Experiment::Gr4d => fixed(&[("i", 4), ("j", 4), ("a", size), ("b", 1), ("c", size), ("d", size)]),
            Experiment::Custom { extents, .. } => extents
                .iter()
                .map(|(l, r)| {
                    let e = match r {
                        ExtentRule::Fixed(e) => *e,
                        ExtentRule::Size => size,
                    };
                    (l.clone(), e)
                })
                .collect(),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = BenchError;

    /// Parses a built-in name; custom experiments are built directly.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "square3d" => Ok(Experiment::Square3d),
            "cc4d" => Ok(Experiment::Cc4d),
            "gr4d" => Ok(Experiment::Gr4d),
            other => Err(BenchError::Config(format!(
                "unknown experiment `{other}` (expected square3d, cc4d, gr4d or custom)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub experiment: Experiment,
    pub sizes: Vec<usize>,
    pub kernels: Vec<KernelKind>,
    pub backend: BackendKind,
    pub repetitions: usize,
    pub seed: u64,
    pub workers: usize,
    pub mem_cap: u64,
    /// Check each row against the oracle on one random output fiber.
    pub verify: bool,
}

impl BenchConfig {
    pub fn new(experiment: Experiment) -> Self {
        BenchConfig {
            sizes: experiment.default_sizes(),
            kernels: experiment.default_kernels(),
            experiment,
            backend: BackendKind::Reference,
            repetitions: 5,
            seed: 1,
            workers: 1,
            mem_cap: DEFAULT_MEM_CAP,
            verify: false,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.repetitions == 0 {
            return Err(BenchError::Config("repetitions must be at least 1".into()));
        }
        if self.sizes.is_empty() {
            return Err(BenchError::Config("size sweep is empty".into()));
        }
        if self.sizes.contains(&0) {
            return Err(BenchError::Config("sizes must be positive".into()));
        }
        if self.kernels.is_empty() {
            return Err(BenchError::Config("no kernels selected".into()));
        }
        if let Experiment::Custom { expression, extents } = &self.experiment {
            if expression.trim().is_empty() {
                return Err(BenchError::Config("custom experiment needs an expression".into()));
            }
            let spec = parse(expression, CheckMode::Strict)?;
            for l in spec.all_labels() {
                if !extents.contains_key(&l) {
                    return Err(BenchError::Config(format!("custom experiment has no extent for `{l}`")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub experiment: String,
    pub expression: String,
    pub size: usize,
    pub kernel: String,
    pub backend: String,
    pub repetitions: usize,
    pub median_seconds: Option<f64>,
    pub gflops: Option<f64>,
    pub packed_bytes: Option<u64>,
    pub slicing: String,
    pub kernel_calls: Option<u64>,
    /// `ok`, `verify-failed`, or `unreachable: <reason>`.
    pub status: String,
    pub max_rel_err: Option<f64>,
}

impl BenchRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

struct Case {
    spec: ContractionSpec,
    v: ValidatedContraction,
    left: Tensor,
    right: Tensor,
}

/// Bytes for both operands, the output, and a staged copy of each.
fn footprint(v: &ValidatedContraction) -> u64 {
    let elems: u64 = [v.left_extents(), v.right_extents(), v.output_extents()]
        .iter()
        .map(|e| e.iter().map(|&x| x as u64).product::<u64>())
        .sum();
    elems.saturating_mul(2 * 8)
}

fn prepare(spec: ContractionSpec, v: ValidatedContraction, cfg: &BenchConfig) -> Result<Case, BenchError> {
    let left = Tensor::new(&v.left_extents(), &spec.left().variances(), Fill::SeededRandom(cfg.seed))?;
    let right = Tensor::new(
        &v.right_extents(),
        &spec.right().variances(),
        Fill::SeededRandom(cfg.seed.wrapping_add(1)),
    )?;
    Ok(Case { spec, v, left, right })
}

/// Compares the mode-0 fiber at a random position with the oracle.
fn verify_fiber(case: &Case, out: &Tensor, rng: &mut ChaCha8Rng) -> Result<f64, BenchError> {
    let ext = out.extents().to_vec();
    if ext.is_empty() {
        let want = element(&case.v, &case.left, &case.right, &[])?;
        return Ok(rel_err(&[out.data()[0]], &[want]));
    }
    let mut coords: Vec<usize> = ext.iter().map(|&e| rng.gen_range(0..e)).collect();
    let mut got = Vec::with_capacity(ext[0]);
    let mut want = Vec::with_capacity(ext[0]);
    for i in 0..ext[0] {
        coords[0] = i;
        got.push(out.get(&coords).expect("coordinate in range"));
        want.push(element(&case.v, &case.left, &case.right, &coords)?);
    }
    Ok(rel_err(&got, &want))
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Runs the sweep and returns every row, including rows whose kernel cannot
/// be reached for the expression.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    run_bench_with(cfg, |_| {})
}

struct Pending {
    case: usize,
    plan: ExecutionPlan,
    times: Vec<Duration>,
    stats: Option<ExecutionStats>,
    out: Option<Tensor>,
}

/// Like [`run_bench`], calling `on_row` as each row completes.
///
/// Within one size every row gets a discarded warm-up run, then repetitions
/// go round-robin over the rows so slow drifts in machine load affect all
/// kernels alike. Only one execution runs at a time.
pub fn run_bench_with(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>, BenchError> {
    cfg.validate()?;
    let engine = Engine::new(cfg.backend)?.workers(cfg.workers);
    let backend_name = engine.backend().name().to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut rows = Vec::new();

    for &size in &cfg.sizes {
        let extents = cfg.experiment.extents(size);
        let mut order: Vec<String> = Vec::new();
        let mut by_expr: BTreeMap<String, Vec<KernelKind>> = BTreeMap::new();
        for &k in &cfg.kernels {
            for e in cfg.experiment.expressions(k) {
                if !by_expr.contains_key(&e) {
                    order.push(e.clone());
                }
                by_expr.entry(e).or_default().push(k);
            }
        }
        let mut needed = 0u64;
        let mut cases = Vec::new();
        for expression in &order {
            let spec = parse(expression, CheckMode::Strict)?;
            let v = ValidatedContraction::from_extents(&spec, &extents)?;
            needed = needed.saturating_add(footprint(&v));
            if needed > cfg.mem_cap {
                return Err(BenchError::MemoryCap {
                    expression: expression.clone(),
                    size,
                    needed,
                    cap: cfg.mem_cap,
                });
            }
            cases.push(prepare(spec, v, cfg)?);
        }

        // Rows in output order; `Err` holds the row of an unreachable kernel.
        let mut slots: Vec<Result<Pending, BenchRow>> = Vec::new();
        for (ci, expression) in order.iter().enumerate() {
            for &kernel in &by_expr[expression] {
                slots.push(match plan(&cases[ci].v, &Policy::ForceKernel(kernel)) {
                    Ok(p) => Ok(Pending {
                        case: ci,
                        plan: p,
                        times: Vec::with_capacity(cfg.repetitions),
                        stats: None,
                        out: None,
                    }),
                    Err(e @ PlanError::KernelUnreachable { .. }) => {
                        let mut row = blank_row(cfg, &backend_name, &cases[ci], size, kernel);
                        row.status = format!("unreachable: {e}");
                        Err(row)
                    }
                    Err(e) => return Err(ExecError::Plan(e).into()),
                });
            }
        }

        for slot in slots.iter_mut().flatten() {
            let c = &cases[slot.case];
            engine.execute(&slot.plan, &c.left, &c.right)?;
        }
        for _ in 0..cfg.repetitions {
            for slot in slots.iter_mut().flatten() {
                let c = &cases[slot.case];
                slot.out = None;
                let (o, stats) = engine.execute(&slot.plan, &c.left, &c.right)?;
                slot.times.push(stats.wall_time);
                slot.stats = Some(stats);
                slot.out = Some(o);
            }
        }

        for slot in slots {
            let row = match slot {
                Err(row) => row,
                Ok(pending) => finish(cfg, &backend_name, &cases[pending.case], size, pending, &mut rng)?,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn blank_row(cfg: &BenchConfig, backend_name: &str, case: &Case, size: usize, kernel: KernelKind) -> BenchRow {
    BenchRow {
        experiment: cfg.experiment.name().to_string(),
        expression: case.spec.to_string(),
        size,
        kernel: kernel.to_string(),
        backend: backend_name.to_string(),
        repetitions: cfg.repetitions,
        median_seconds: None,
        gflops: None,
        packed_bytes: None,
        slicing: String::new(),
        kernel_calls: None,
        status: String::new(),
        max_rel_err: None,
    }
}

fn finish(
    cfg: &BenchConfig,
    backend_name: &str,
    case: &Case,
    size: usize,
    pending: Pending,
    rng: &mut ChaCha8Rng,
) -> Result<BenchRow, BenchError> {
    let mut row = blank_row(cfg, backend_name, case, size, pending.plan.kernel);
    row.slicing = pending.plan.slicing.to_string();
    let stats = pending.stats.expect("at least one repetition");
    let med = median(pending.times).as_secs_f64();
    row.median_seconds = Some(med);
    row.gflops = Some(pending.plan.flops as f64 / med / 1e9);
    row.packed_bytes = Some(stats.packed_bytes);
    row.kernel_calls = Some(stats.kernel_calls);
    row.status = "ok".into();
    if cfg.verify {
        let out = pending.out.expect("output of the last repetition");
        let err = verify_fiber(case, &out, rng)?;
        row.max_rel_err = Some(err);
        if !(err <= VERIFY_TOL) {
            row.status = "verify-failed".into();
        }
    }
    Ok(row)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<(), BenchError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(experiment: Experiment, sizes: Vec<usize>) -> BenchConfig {
        BenchConfig {
            sizes,
            repetitions: 1,
            verify: true,
            ..BenchConfig::new(experiment)
        }
    }

    #[test]
    fn square_sweep_row_count() {
        let rows = run_bench(&quick(Experiment::Square3d, vec![6, 9])).unwrap();
        assert_eq!(rows.len(), 16);
        let mut unreachable: Vec<(&str, &str)> = rows
            .iter()
            .filter(|r| r.status.starts_with("unreachable"))
            .map(|r| (r.expression.as_str(), r.kernel.as_str()))
            .collect();
        unreachable.sort();
        unreachable.dedup();
        // The copy contraction cannot reach plain GEMM, and the direct one
        // never needs a copy.
        assert_eq!(
            unreachable,
            vec![(SQUARE_DIRECT, "COPY+GEMM"), (SQUARE_COPY, "GEMM")]
        );
        assert!(rows.iter().filter(|r| r.status == "ok").all(|r| r.max_rel_err.unwrap() <= VERIFY_TOL));
    }

    #[test]
    fn gr4d_rows_for_each_kernel() {
        let rows = run_bench(&quick(Experiment::Gr4d, vec![12])).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(BenchRow::is_ok), "{rows:?}");
        let flops: Vec<f64> = rows.iter().map(|r| r.gflops.unwrap() * r.median_seconds.unwrap()).collect();
        for f in &flops {
            assert!((f - flops[0]).abs() <= 1e-9 * flops[0]);
        }
    }

    #[test]
    fn memory_cap_refuses() {
        let cfg = BenchConfig {
            mem_cap: 1000,
            ..quick(Experiment::Square3d, vec![10])
        };
        assert!(matches!(run_bench(&cfg), Err(BenchError::MemoryCap { .. })));
    }

    #[test]
    fn config_checks() {
        let mut cfg = quick(Experiment::Square3d, vec![]);
        assert!(matches!(cfg.validate(), Err(BenchError::Config(_))));
        cfg.sizes = vec![4];
        cfg.repetitions = 0;
        assert!(matches!(cfg.validate(), Err(BenchError::Config(_))));
        let custom = Experiment::Custom {
            expression: "C[+i,-k] = A[+i,+j] * B[-j,-k]".into(),
            extents: [("i".to_string(), ExtentRule::Size), ("j".to_string(), ExtentRule::Fixed(3))].into(),
        };
        assert!(matches!(quick(custom, vec![4]).validate(), Err(BenchError::Config(_))));
    }

    #[test]
    fn custom_sweep_and_csv() {
        let custom = Experiment::Custom {
            expression: "C[+i,-k] = A[+i,+j] * B[-j,-k]".into(),
            extents: [
                ("i".to_string(), ExtentRule::Size),
                ("j".to_string(), ExtentRule::Fixed(3)),
                ("k".to_string(), ExtentRule::Size),
            ]
            .into(),
        };
        let cfg = BenchConfig {
            kernels: vec![KernelKind::Gemm, KernelKind::Dot],
            ..quick(custom, vec![5])
        };
        let rows = run_bench(&cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines
            .next()
            .unwrap()
            .starts_with("experiment,expression,size,kernel,backend,repetitions,median_seconds,gflops,packed_bytes"));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn experiment_names() {
        for e in [Experiment::Square3d, Experiment::Cc4d, Experiment::Gr4d] {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("fluid".parse::<Experiment>().is_err());
    }
}
