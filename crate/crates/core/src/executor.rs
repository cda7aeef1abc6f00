//! Runs an [`ExecutionPlan`] over concrete operands.
//!
//! Sliced free labels form the outer loops and sliced contracted labels the
//! inner ones. Each inner iteration issues one kernel call on the residual
//! slices; the first contracted iteration overwrites the output slice and
//! later ones accumulate into it. With several workers the free-slice
//! iterations are split into contiguous chunks, each computed into a private
//! buffer and written back to its own disjoint part of the output.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::time::{Duration, Instant};

use crate::expr::{ValidatedContraction, ValidationError};
use crate::kernels::{backend, BackendKind, KernelBackend, KernelError, Trans};
use crate::planner::{
    enumerate_slicings, label_stride, plan, ExecutionPlan, KernelKind, KernelMap, LoopRole, MatrixLayout, Operand,
    OutputLayout, PlanError, Policy, SlicingPair,
};
use crate::tensor::{gather_matrix, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub workers: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { workers: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExecutionStats {
    pub kernel_calls: u64,
    /// Bytes copied into or out of staging buffers.
    pub packed_bytes: u64,
    pub flops: u64,
    pub wall_time: Duration,
}

impl ExecutionStats {
    fn merge(&mut self, other: &ExecutionStats) {
        self.kernel_calls += other.kernel_calls;
        self.packed_bytes += other.packed_bytes;
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / self.wall_time.as_secs_f64() / 1e9
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("operands do not match the plan: {0}")]
    ExtentDrift(#[source] ValidationError),
    #[error("{source} (at {})", Coords(.at))]
    Kernel {
        #[source]
        source: KernelError,
        at: Vec<(String, usize)>,
    },
    #[error("running every slicing needs {work} multiply-adds, cap is {cap}")]
    WorkCap { work: u64, cap: u64 },
    #[error("loop nest lists free label `{0}` inside a contracted loop")]
    LoopOrder(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

struct Coords<'a>(&'a [(String, usize)]);

impl fmt::Display for Coords<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("the only slice");
        }
        for (i, (l, c)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{l}={c}")?;
        }
        Ok(())
    }
}

pub fn execute(
    plan: &ExecutionPlan,
    left: &Tensor,
    right: &Tensor,
    backend: &dyn KernelBackend,
) -> Result<(Tensor, ExecutionStats), ExecError> {
    execute_with(plan, left, right, backend, &ExecOptions::default())
}

pub fn execute_with(
    plan: &ExecutionPlan,
    left: &Tensor,
    right: &Tensor,
    backend: &dyn KernelBackend,
    options: &ExecOptions,
) -> Result<(Tensor, ExecutionStats), ExecError> {
    let start = Instant::now();
    plan.contraction
        .check_operands(left, right)
        .map_err(ExecError::ExtentDrift)?;
    let prepared = Prepared::new(plan)?;
    let spec = plan.contraction.spec();
    let mut out = Tensor::zeros(&plan.contraction.output_extents(), &spec.output().variances())?
        .with_name(&spec.output().name);

    let free_total = prepared.free_total();
    let workers = options.workers.max(1).min(free_total.max(1));
    let mut stats = if workers <= 1 {
        let staged = prepared.staged_by_plan;
        prepared.run(0..free_total, left, right, Sink::Local(out.data_mut()), staged, backend)?
    } else {
        let sink = SharedOut {
            ptr: out.data_mut().as_mut_ptr(),
            len: out.len(),
        };
        let chunk = free_total.div_ceil(workers);
        let results: Vec<Result<ExecutionStats, ExecError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = (w * chunk).min(free_total)..((w + 1) * chunk).min(free_total);
                    let prepared = &prepared;
                    scope.spawn(move || prepared.run(range, left, right, Sink::Shared(sink), true, backend))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut total = ExecutionStats::default();
        for r in results {
            total.merge(&r?);
        }
        total
    };
    stats.flops = plan.flops;
    stats.wall_time = start.elapsed();
    Ok((out, stats))
}

/// Output storage shared between workers. Every free-slice iteration owns
/// the output elements whose sliced free coordinates equal its own, so
/// concurrent writers never touch the same element.
#[derive(Clone, Copy)]
struct SharedOut {
    ptr: *mut f64,
    len: usize,
}

// SAFETY: writes go through `SharedOut::write`, and workers write disjoint
// index sets (see the type docs); the pointee outlives the thread scope.
unsafe impl Send for SharedOut {}
unsafe impl Sync for SharedOut {}

impl SharedOut {
    fn write(&self, idx: usize, value: f64) {
        assert!(idx < self.len, "output index {idx} out of bounds");
        // SAFETY: in bounds, and no other worker writes this element.
        unsafe { self.ptr.add(idx).write(value) }
    }
}

enum Sink<'a> {
    Local(&'a mut [f64]),
    Shared(SharedOut),
}

/// A loop axis with its stride in each tensor (0 when absent).
#[derive(Debug, Clone)]
struct Axis {
    label: String,
    extent: usize,
    l: usize,
    r: usize,
    o: usize,
}

/// Strided matrix source for the packing path.
#[derive(Debug, Clone, Copy)]
struct Mat {
    layout: MatrixLayout,
    row_stride: usize,
    col_stride: usize,
}

#[derive(Debug, Clone)]
enum Step {
    Gemm { m: usize, n: usize, k: usize, a: Mat, b: Mat },
    Gemv { matrix: Operand, m: usize, k: usize, a: Mat, x_inc: usize },
    Ger { m: usize, n: usize, x_inc: usize, y_inc: usize },
    Dot { k: usize, x_inc: usize, y_inc: usize },
    /// (extent, left stride, right stride) per residual output label.
    Elementwise { dims: Vec<(usize, usize, usize)> },
}

struct Prepared {
    free: Vec<Axis>,
    con: Vec<Axis>,
    /// Residual output labels: (extent, stride in the output tensor).
    frame: Vec<(usize, usize)>,
    step: Step,
    staged_by_plan: bool,
}

#[derive(Default)]
struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
    stage: Vec<f64>,
}

impl Prepared {
    fn new(plan: &ExecutionPlan) -> Result<Self, ExecError> {
        let v = &plan.contraction;
        let spec = v.spec();
        let sl = |l: &str| label_stride(v, spec.left(), l);
        let sr = |l: &str| label_stride(v, spec.right(), l);
        let so = |l: &str| label_stride(v, spec.output(), l);
        let axis = |l: &str| Axis {
            label: l.to_string(),
            extent: v.extent(l),
            l: sl(l).unwrap_or(0),
            r: sr(l).unwrap_or(0),
            o: so(l).unwrap_or(0),
        };

        let mut free = Vec::new();
        let mut con = Vec::new();
        for entry in &plan.loop_nest {
            match entry.role {
                LoopRole::Free if !con.is_empty() => return Err(ExecError::LoopOrder(entry.label.clone())),
                LoopRole::Free => free.push(axis(&entry.label)),
                LoopRole::Contracted => con.push(axis(&entry.label)),
            }
        }

        let e = |l: &str| v.extent(l);
        let mat = |layout: MatrixLayout, op: Operand, rows: &str, cols: &str| {
            let s = |l: &str| match op {
                Operand::Left => sl(l).unwrap(),
                Operand::Right => sr(l).unwrap(),
            };
            Mat {
                layout,
                row_stride: s(rows),
                col_stride: s(cols),
            }
        };
        let (step, frame_labels, staged_by_plan) = match &plan.kernel_map {
            KernelMap::Gemm { m, n, k, a, b, c } => (
                Step::Gemm {
                    m: e(m),
                    n: e(n),
                    k: e(k),
                    a: mat(*a, Operand::Left, m, k),
                    b: mat(*b, Operand::Right, k, n),
                },
                vec![m.clone(), n.clone()],
                *c == OutputLayout::Staged,
            ),
            KernelMap::Gemv { matrix, m, k, a } => {
                let x_inc = match matrix {
                    Operand::Left => sr(k).unwrap(),
                    Operand::Right => sl(k).unwrap(),
                };
                (
                    Step::Gemv {
                        matrix: *matrix,
                        m: e(m),
                        k: e(k),
                        a: mat(*a, *matrix, m, k),
                        x_inc,
                    },
                    vec![m.clone()],
                    false,
                )
            }
            KernelMap::Ger { m, n, c } => (
                Step::Ger {
                    m: e(m),
                    n: e(n),
                    x_inc: sl(m).unwrap(),
                    y_inc: sr(n).unwrap(),
                },
                vec![m.clone(), n.clone()],
                *c == OutputLayout::Staged,
            ),
            KernelMap::Dot { k } => (
                Step::Dot {
                    k: e(k),
                    x_inc: sl(k).unwrap(),
                    y_inc: sr(k).unwrap(),
                },
                vec![],
                false,
            ),
            KernelMap::Elementwise { labels } => (
                Step::Elementwise {
                    dims: labels
                        .iter()
                        .map(|l| (e(l), sl(l).unwrap_or(0), sr(l).unwrap_or(0)))
                        .collect(),
                },
                labels.clone(),
                false,
            ),
        };
        let frame = frame_labels.iter().map(|l| (e(l), so(l).unwrap())).collect();
        Ok(Prepared {
            free,
            con,
            frame,
            step,
            staged_by_plan,
        })
    }

    fn free_total(&self) -> usize {
        self.free.iter().map(|a| a.extent).product()
    }

    fn frame_len(&self) -> usize {
        self.frame.iter().map(|d| d.0).product()
    }

    /// Strides of the residual output inside a packed staging buffer.
    fn packed_frame_strides(&self) -> (usize, usize) {
        (1, self.frame.first().map_or(1, |d| d.0))
    }

    fn direct_frame_strides(&self) -> (usize, usize) {
        (
            self.frame.first().map_or(1, |d| d.1),
            self.frame.get(1).map_or(1, |d| d.1),
        )
    }

    fn coords(&self, free: &[usize], con: &[usize]) -> Vec<(String, usize)> {
        self.free
            .iter()
            .zip(free)
            .chain(self.con.iter().zip(con))
            .map(|(a, &c)| (a.label.clone(), c))
            .collect()
    }

    fn run(
        &self,
        range: std::ops::Range<usize>,
        left: &Tensor,
        right: &Tensor,
        mut sink: Sink<'_>,
        staged: bool,
        backend: &dyn KernelBackend,
    ) -> Result<ExecutionStats, ExecError> {
        let mut stats = ExecutionStats::default();
        let mut scratch = Scratch::default();
        if staged {
            scratch.stage = vec![0.0; self.frame_len()];
        }
        let con_total: usize = self.con.iter().map(|a| a.extent).product();
        let mut free = Odometer::at(&self.free, range.start);
        for _ in range {
            let mut con = Odometer::at(&self.con, 0);
            for ci in 0..con_total {
                let lb = free.l + con.l;
                let rb = free.r + con.r;
                let result = if staged {
                    let strides = self.packed_frame_strides();
                    let mut stage = std::mem::take(&mut scratch.stage);
                    let r = self.step(backend, left, right, lb, rb, &mut stage, 0, strides, ci == 0, &mut scratch);
                    scratch.stage = stage;
                    r
                } else {
                    let Sink::Local(out) = &mut sink else {
                        unreachable!("shared sinks always stage")
                    };
                    let strides = self.direct_frame_strides();
                    self.step(backend, left, right, lb, rb, out, free.o, strides, ci == 0, &mut scratch)
                };
                match result {
                    Ok(bytes) => {
                        stats.kernel_calls += 1;
                        stats.packed_bytes += bytes;
                    }
                    Err(source) => {
                        return Err(ExecError::Kernel {
                            source,
                            at: self.coords(&free.coord, &con.coord),
                        })
                    }
                }
                con.advance(&self.con);
            }
            if staged {
                self.scatter(&scratch.stage, free.o, &mut sink);
                stats.packed_bytes += (scratch.stage.len() * std::mem::size_of::<f64>()) as u64;
                scratch.stage.fill(0.0);
            }
            free.advance(&self.free);
        }
        Ok(stats)
    }

    fn scatter(&self, stage: &[f64], base: usize, sink: &mut Sink<'_>) {
        let (e0, s0) = self.frame.first().copied().unwrap_or((1, 0));
        let (e1, s1) = self.frame.get(1).copied().unwrap_or((1, 0));
        for j in 0..e1 {
            for i in 0..e0 {
                let v = stage[i + j * e0];
                let idx = base + i * s0 + j * s1;
                match sink {
                    Sink::Local(out) => out[idx] = v,
                    Sink::Shared(shared) => shared.write(idx, v),
                }
            }
        }
    }

    /// One kernel call; returns the number of bytes packed.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        be: &dyn KernelBackend,
        left: &Tensor,
        right: &Tensor,
        lb: usize,
        rb: usize,
        target: &mut [f64],
        tb: usize,
        (t0, t1): (usize, usize),
        first: bool,
        scratch: &mut Scratch,
    ) -> Result<u64, KernelError> {
        let (ld, rd) = (left.data(), right.data());
        let beta = if first { 0.0 } else { 1.0 };
        let mut bytes = 0u64;
        match &self.step {
            Step::Gemm { m, n, k, a, b } => {
                let (m, n, k) = (*m, *n, *k);
                let (aslice, lda, ta) = operand_matrix(ld, lb, *a, m, k, &mut scratch.a, &mut bytes);
                let (bslice, ldb, tb_) = operand_matrix(rd, rb, *b, k, n, &mut scratch.b, &mut bytes);
                let c = &mut target[tb..];
                if t0 == 1 && t1 >= m.max(1) {
                    be.gemm(ta, tb_, m, n, k, 1.0, aslice, lda, bslice, ldb, beta, c, t1)?;
                } else {
                    be.gemm(tb_.flip(), ta.flip(), n, m, k, 1.0, bslice, ldb, aslice, lda, beta, c, t0)?;
                }
            }
            Step::Gemv { matrix, m, k, a, x_inc } => {
                let (mdata, mbase, vdata, vbase) = match matrix {
                    Operand::Left => (ld, lb, rd, rb),
                    Operand::Right => (rd, rb, ld, lb),
                };
                let (aslice, lda, ta) = operand_matrix(mdata, mbase, *a, *m, *k, &mut scratch.a, &mut bytes);
                let (sm, sk) = match ta {
                    Trans::No => (*m, *k),
                    Trans::Yes => (*k, *m),
                };
                be.gemv(ta, sm, sk, 1.0, aslice, lda, &vdata[vbase..], *x_inc, beta, &mut target[tb..], t0)?;
            }
            Step::Ger { m, n, x_inc, y_inc } => {
                let (x, y) = (&ld[lb..], &rd[rb..]);
                let c = &mut target[tb..];
                if t0 == 1 && t1 >= (*m).max(1) {
                    be.ger(*m, *n, 1.0, x, *x_inc, y, *y_inc, c, t1)?;
                } else {
                    be.ger(*n, *m, 1.0, y, *y_inc, x, *x_inc, c, t0)?;
                }
            }
            Step::Dot { k, x_inc, y_inc } => {
                let s = be.dot(*k, &ld[lb..], *x_inc, &rd[rb..], *y_inc)?;
                let slot = &mut target[tb];
                *slot = if first { s } else { *slot + s };
            }
            Step::Elementwise { dims } => {
                let (e0, l0, r0) = dims.first().copied().unwrap_or((1, 0, 0));
                let (e1, l1, r1) = dims.get(1).copied().unwrap_or((1, 0, 0));
                for j in 0..e1 {
                    for i in 0..e0 {
                        let v = ld[lb + i * l0 + j * l1] * rd[rb + i * r0 + j * r1];
                        let slot = &mut target[tb + i * t0 + j * t1];
                        *slot = if first { v } else { *slot + v };
                    }
                }
            }
        }
        Ok(bytes)
    }
}

/// Resolves a residual operand matrix to a BLAS argument, packing when needed.
fn operand_matrix<'a>(
    data: &'a [f64],
    base: usize,
    mat: Mat,
    rows: usize,
    cols: usize,
    buf: &'a mut Vec<f64>,
    bytes: &mut u64,
) -> (&'a [f64], usize, Trans) {
    match mat.layout {
        MatrixLayout::Direct { ld } => (&data[base..], ld, Trans::No),
        MatrixLayout::Transposed { ld } => (&data[base..], ld, Trans::Yes),
        MatrixLayout::Packed => {
            buf.resize(rows * cols, 0.0);
            gather_matrix(data, base, mat.row_stride, mat.col_stride, rows, cols, buf);
            *bytes += (rows * cols * std::mem::size_of::<f64>()) as u64;
            (&buf[..], rows.max(1), Trans::No)
        }
    }
}

/// Loop counter over a list of axes, last axis fastest, tracking offsets.
struct Odometer {
    coord: Vec<usize>,
    l: usize,
    r: usize,
    o: usize,
}

impl Odometer {
    fn at(axes: &[Axis], mut index: usize) -> Self {
        let mut coord = vec![0; axes.len()];
        for (c, a) in coord.iter_mut().zip(axes).rev() {
            *c = index % a.extent;
            index /= a.extent;
        }
        let mut od = Odometer { coord, l: 0, r: 0, o: 0 };
        for (c, a) in od.coord.iter().zip(axes) {
            od.l += c * a.l;
            od.r += c * a.r;
            od.o += c * a.o;
        }
        od
    }

    fn advance(&mut self, axes: &[Axis]) {
        for (c, a) in self.coord.iter_mut().zip(axes).rev() {
            *c += 1;
            self.l += a.l;
            self.r += a.r;
            self.o += a.o;
            if *c < a.extent {
                return;
            }
            self.l -= a.l * a.extent;
            self.r -= a.r * a.extent;
            self.o -= a.o * a.extent;
            *c = 0;
        }
    }
}

/// Result of running one enumerated slicing.
#[derive(Debug, Clone)]
pub struct SlicingRun {
    pub slicing: SlicingPair,
    pub kernel: KernelKind,
    pub output: Tensor,
    /// Hash of the output's bit patterns.
    pub digest: u64,
    pub stats: ExecutionStats,
}

pub fn digest(t: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    t.extents().hash(&mut h);
    for v in t.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Executes every enumerated slicing; refuses when the total multiply-add
/// count exceeds `work_cap`.
pub fn execute_all_slicings(
    v: &ValidatedContraction,
    left: &Tensor,
    right: &Tensor,
    backend: &dyn KernelBackend,
    work_cap: u64,
) -> Result<Vec<SlicingRun>, ExecError> {
    let rows = enumerate_slicings(v);
    let work = (rows.len() as u64).saturating_mul(v.flop_count() / 2);
    if work > work_cap {
        return Err(ExecError::WorkCap { work, cap: work_cap });
    }
    rows.into_iter()
        .map(|row| {
            let p = plan(v, &Policy::ForceSlicing(row.slicing.clone()))?;
            let (output, stats) = execute(&p, left, right, backend)?;
            Ok(SlicingRun {
                slicing: row.slicing,
                kernel: p.kernel,
                digest: digest(&output),
                output,
                stats,
            })
        })
        .collect()
}

/// A backend plus execution options.
pub struct Engine {
    backend: Box<dyn KernelBackend>,
    options: ExecOptions,
}

impl Default for Engine {
    fn default() -> Self {
        Engine::with_backend(Box::new(crate::kernels::ReferenceBackend))
    }
}

impl Engine {
    pub fn new(kind: BackendKind) -> Result<Self, KernelError> {
        Ok(Engine::with_backend(backend(kind)?))
    }

    pub fn with_backend(backend: Box<dyn KernelBackend>) -> Self {
        Engine {
            backend,
            options: ExecOptions::default(),
        }
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.options.workers = workers.max(1);
        self
    }

    pub fn backend(&self) -> &dyn KernelBackend {
        self.backend.as_ref()
    }

    pub fn options(&self) -> &ExecOptions {
        &self.options
    }

    pub fn execute(
        &self,
        plan: &ExecutionPlan,
        left: &Tensor,
        right: &Tensor,
    ) -> Result<(Tensor, ExecutionStats), ExecError> {
        execute_with(plan, left, right, self.backend.as_ref(), &self.options)
    }

    /// Parses, validates, plans and executes in one go.
    pub fn contract(
        &self,
        spec: &crate::expr::ContractionSpec,
        left: &Tensor,
        right: &Tensor,
        policy: &Policy,
    ) -> Result<(Tensor, ExecutionStats), crate::Error> {
        let v = ValidatedContraction::new(spec, left, right)?;
        let p = plan(&v, policy)?;
        Ok(self.execute(&p, left, right)?)
    }
}
