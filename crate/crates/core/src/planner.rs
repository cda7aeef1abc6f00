//! Slicing enumeration, requirement checks and plan selection.
//!
//! A slicing fixes some labels to single coordinates. The labels left
//! unsliced form the residual contraction handed to a kernel; the sliced
//! ones become loops around the kernel call. Contracted labels are sliced in
//! both operands or in neither.

mod render;

use std::cmp::Reverse;
use std::fmt;

use crate::expr::{ContractionSpec, TensorTerm, ValidatedContraction};
use crate::tensor::{column_major_strides, SlicingVector};

pub use render::{relayout_advice, Relayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContractionClass {
    /// Both operands are fully contracted.
    One,
    /// Exactly one operand is fully contracted.
    Two,
    /// Both operands have free indices and their mode-0 indices are two
    /// different contracted labels.
    ThreeOne,
    /// Every other case with free indices on both sides.
    ThreeTwo,
}

impl fmt::Display for ContractionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContractionClass::One => "1",
            ContractionClass::Two => "2",
            ContractionClass::ThreeOne => "3.1",
            ContractionClass::ThreeTwo => "3.2",
        })
    }
}

pub fn classify(spec: &ContractionSpec) -> ContractionClass {
    match spec.deltas() {
        (0, 0) => ContractionClass::One,
        (0, _) | (_, 0) => ContractionClass::Two,
        _ => {
            let l0 = &spec.left().indices[0].label;
            let r0 = &spec.right().indices[0].label;
            if l0 != r0 && spec.is_contracted(l0) && spec.is_contracted(r0) {
                ContractionClass::ThreeOne
            } else {
                ContractionClass::ThreeTwo
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelKind {
    Gemm,
    CopyGemm,
    Gemv,
    CopyGemv,
    Ger,
    Dot,
    Elementwise,
}

impl KernelKind {
    pub const ALL: [KernelKind; 7] = [
        KernelKind::Gemm,
        KernelKind::CopyGemm,
        KernelKind::Gemv,
        KernelKind::CopyGemv,
        KernelKind::Ger,
        KernelKind::Dot,
        KernelKind::Elementwise,
    ];
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Gemm => "GEMM",
            KernelKind::CopyGemm => "COPY+GEMM",
            KernelKind::Gemv => "GEMV",
            KernelKind::CopyGemv => "COPY+GEMV",
            KernelKind::Ger => "GER",
            KernelKind::Dot => "DOT",
            KernelKind::Elementwise => "ELEMENTWISE",
        })
    }
}

impl std::str::FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '+' | '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "gemm" => Ok(KernelKind::Gemm),
            "copygemm" => Ok(KernelKind::CopyGemm),
            "gemv" => Ok(KernelKind::Gemv),
            "copygemv" => Ok(KernelKind::CopyGemv),
            "ger" => Ok(KernelKind::Ger),
            "dot" => Ok(KernelKind::Dot),
            "elementwise" | "ew" => Ok(KernelKind::Elementwise),
            _ => Err(format!("unknown kernel `{s}`")),
        }
    }
}

/// Which requirement the first failing check points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fallback {
    None,
    /// Only the stride-1 requirement fails: copy, then GEMM.
    F1,
    /// Operands are sliced too far for a matrix-matrix product.
    F2,
    /// The residual is not one free plus one shared contracted index per operand.
    F3,
}

impl fmt::Display for Fallback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fallback::None => "none",
            Fallback::F1 => "F1",
            Fallback::F2 => "F2",
            Fallback::F3 => "F3",
        })
    }
}

/// Outcome of the three GEMM requirements for one slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RequirementReport {
    /// Mode 0 of both operands is unsliced.
    pub r1: bool,
    /// Each operand keeps exactly two modes.
    pub r2: bool,
    /// Each operand keeps one free index and the same single contracted index.
    pub r3: bool,
    pub fallback: Fallback,
    pub kernel: KernelKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Left,
    Right,
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operand::Left => "left",
            Operand::Right => "right",
        })
    }
}

/// Slicing vectors for both operands.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlicingPair {
    pub left: SlicingVector,
    pub right: SlicingVector,
}

impl SlicingPair {
    pub fn new(left: SlicingVector, right: SlicingVector) -> Self {
        SlicingPair { left, right }
    }

    /// Left bits followed by right bits; the tie-break order between plans.
    pub fn concatenated(&self) -> Vec<bool> {
        self.left.bits().iter().chain(self.right.bits()).copied().collect()
    }
}

impl fmt::Display for SlicingPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.left, self.right)
    }
}

impl std::str::FromStr for SlicingPair {
    type Err = PlanError;

    /// Accepts `(0,1,0)/(1,0,0)`, `0,1,0/1,0,0` or `010/100`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PlanError::BadSlicingSyntax(s.to_string());
        let parts: Vec<&str> = s.split('/').collect();
        let [l, r] = parts[..] else {
            return Err(bad());
        };
        let vector = |part: &str| -> Result<SlicingVector, PlanError> {
            let bits = part
                .trim()
                .trim_start_matches('(')
                .trim_end_matches(')')
                .chars()
                .filter(|c| !matches!(c, ',' | ' '))
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    _ => Err(bad()),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SlicingVector::new(bits))
        };
        Ok(SlicingPair::new(vector(l)?, vector(r)?))
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("kernel {kernel} unreachable: {reason}")]
    KernelUnreachable { kernel: KernelKind, reason: String },
    #[error("slicing leaves {rank} unsliced modes in the {what}; kernels take at most 2")]
    ResidualTooLarge { what: &'static str, rank: usize },
    #[error("{operand} slicing vector has {got} entries, tensor has rank {rank}")]
    SlicingLength { operand: Operand, rank: usize, got: usize },
    #[error("contracted label `{0}` is sliced in one operand but not the other")]
    InconsistentSlicing(String),
    #[error("cannot read slicing `{0}`; expected e.g. 0,1,0/1,0,0")]
    BadSlicingSyntax(String),
}

/// How the executor should traverse the residual slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopRole {
    Free,
    Contracted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopLabel {
    pub label: String,
    pub extent: usize,
    pub role: LoopRole,
}

/// How a residual operand matrix reaches the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixLayout {
    /// The row index has stride 1; pass as is with this leading dimension.
    Direct { ld: usize },
    /// The column index has stride 1; pass with the transpose flag set.
    Transposed { ld: usize },
    /// No stride-1 mode; copy into a contiguous buffer first.
    Packed,
}

/// How a residual output matrix is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputLayout {
    /// Row index has stride 1.
    Direct { ld: usize },
    /// Column index has stride 1; the kernel computes the transposed product.
    Swapped { ld: usize },
    /// No stride-1 mode; accumulate in a buffer and copy out.
    Staged,
}

/// Assignment of residual labels to kernel dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KernelMap {
    /// `C[m,n] += A[m,k] * B[k,n]` with `A` from the left operand.
    Gemm {
        m: String,
        n: String,
        k: String,
        a: MatrixLayout,
        b: MatrixLayout,
        c: OutputLayout,
    },
    /// `y[m] += M[m,k] * x[k]` where `M` comes from `matrix`.
    Gemv {
        matrix: Operand,
        m: String,
        k: String,
        a: MatrixLayout,
    },
    /// `C[m,n] += x[m] * y[n]` with `x` from the left operand.
    Ger { m: String, n: String, c: OutputLayout },
    /// Inner product over `k`; any other unsliced contracted label is looped.
    Dot { k: String },
    /// Scalar multiply-add over the unsliced output labels.
    Elementwise { labels: Vec<String> },
}

impl KernelMap {
    /// Residual labels handled inside the kernel call.
    pub fn labels(&self) -> Vec<String> {
        match self {
            KernelMap::Gemm { m, n, k, .. } => vec![m.clone(), n.clone(), k.clone()],
            KernelMap::Gemv { m, k, .. } => vec![m.clone(), k.clone()],
            KernelMap::Ger { m, n, .. } => vec![m.clone(), n.clone()],
            KernelMap::Dot { k } => vec![k.clone()],
            KernelMap::Elementwise { labels } => labels.clone(),
        }
    }
}

/// A buffer copy the plan performs on every kernel call that uses it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyStep {
    pub target: CopyTarget,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyTarget {
    Left,
    Right,
    /// Output slice staged in a buffer and written back once per free slice.
    Output,
}

/// One row of the slicing enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnumeratedSlicing {
    pub slicing: SlicingPair,
    pub output_slicing: SlicingVector,
    pub report: RequirementReport,
    /// Product of the kernel dimensions (e.g. `M*N*K` for GEMM).
    pub score: u64,
    pub kernel_calls: u64,
    pub copies: Vec<CopyStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Policy {
    #[default]
    Auto,
    ForceKernel(KernelKind),
    ForceSlicing(SlicingPair),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    pub contraction: ValidatedContraction,
    pub class: ContractionClass,
    pub slicing: SlicingPair,
    pub output_slicing: SlicingVector,
    pub report: RequirementReport,
    pub kernel: KernelKind,
    /// Sliced labels, outermost first: free labels, then contracted ones.
    pub loop_nest: Vec<LoopLabel>,
    pub kernel_map: KernelMap,
    pub copies: Vec<CopyStep>,
    pub flops: u64,
}

impl ExecutionPlan {
    pub fn kernel_calls(&self) -> u64 {
        self.loop_nest.iter().map(|l| l.extent as u64).product()
    }

    pub fn deltas(&self) -> (usize, usize) {
        self.contraction.deltas()
    }

    pub fn copies_operands(&self) -> bool {
        self.copies.iter().any(|c| c.target != CopyTarget::Output)
    }

    pub fn stages_output(&self) -> bool {
        self.copies.iter().any(|c| c.target == CopyTarget::Output)
    }
}

/// Stride of `label` within `term` under the contraction's extents.
pub(crate) fn label_stride(v: &ValidatedContraction, term: &TensorTerm, label: &str) -> Option<usize> {
    let pos = term.position(label)?;
    Some(column_major_strides(&v.term_extents(term))[pos])
}

/// Unsliced labels after applying a slicing.
struct Residual {
    left_free: Vec<String>,
    right_free: Vec<String>,
    /// In left-operand order.
    contracted: Vec<String>,
}

impl Residual {
    fn left_rank(&self) -> usize {
        self.left_free.len() + self.contracted.len()
    }

    fn right_rank(&self) -> usize {
        self.right_free.len() + self.contracted.len()
    }
}

fn check_pair(v: &ValidatedContraction, pair: &SlicingPair) -> Result<(), PlanError> {
    let spec = v.spec();
    for (operand, term, s) in [(Operand::Left, spec.left(), &pair.left), (Operand::Right, spec.right(), &pair.right)] {
        if s.len() != term.rank() {
            return Err(PlanError::SlicingLength {
                operand,
                rank: term.rank(),
                got: s.len(),
            });
        }
    }
    for c in spec.contracted() {
        let l = pair.left.is_sliced(spec.left().position(c).unwrap());
        let r = pair.right.is_sliced(spec.right().position(c).unwrap());
        if l != r {
            return Err(PlanError::InconsistentSlicing(c.clone()));
        }
    }
    Ok(())
}

fn residual(spec: &ContractionSpec, pair: &SlicingPair) -> Residual {
    let kept = |term: &TensorTerm, s: &SlicingVector, want_contracted: bool| -> Vec<String> {
        term.labels()
            .enumerate()
            .filter(|&(i, l)| !s.is_sliced(i) && spec.is_contracted(l) == want_contracted)
            .map(|(_, l)| l.to_string())
            .collect()
    };
    Residual {
        left_free: kept(spec.left(), &pair.left, false),
        right_free: kept(spec.right(), &pair.right, false),
        contracted: kept(spec.left(), &pair.left, true),
    }
}

fn output_slicing(spec: &ContractionSpec, pair: &SlicingPair) -> SlicingVector {
    let sliced = |label: &str| match spec.left().position(label) {
        Some(p) => pair.left.is_sliced(p),
        None => pair.right.is_sliced(spec.right().position(label).unwrap()),
    };
    SlicingVector::new(spec.output().labels().map(sliced).collect())
}

/// Everything derived from a single slicing.
#[derive(Clone)]
struct Candidate {
    pair: SlicingPair,
    out_slicing: SlicingVector,
    report: RequirementReport,
    map: KernelMap,
    copies: Vec<CopyStep>,
    score: u64,
    extra_reduction: Vec<String>,
}

impl Candidate {
    fn packed_operands(&self) -> usize {
        self.copies.iter().filter(|c| c.target != CopyTarget::Output).count()
    }

    fn staged(&self) -> bool {
        self.copies.iter().any(|c| c.target == CopyTarget::Output)
    }

    /// Fewer operand copies, then no output staging, then the largest kernel,
    /// then the lexicographically smallest slicing.
    fn rank_key(&self) -> (usize, bool, Reverse<u64>, Vec<bool>) {
        (self.packed_operands(), self.staged(), Reverse(self.score), self.pair.concatenated())
    }
}

fn matrix_layout(v: &ValidatedContraction, term: &TensorTerm, rows: &str, cols: &str) -> MatrixLayout {
    let mode0 = term.indices[0].label.as_str();
    if mode0 == rows {
        MatrixLayout::Direct {
            ld: label_stride(v, term, cols).unwrap(),
        }
    } else if mode0 == cols {
        MatrixLayout::Transposed {
            ld: label_stride(v, term, rows).unwrap(),
        }
    } else {
        MatrixLayout::Packed
    }
}

fn output_layout(v: &ValidatedContraction, m: &str, n: &str) -> OutputLayout {
    let out = v.spec().output();
    let mode0 = out.indices[0].label.as_str();
    if mode0 == m {
        OutputLayout::Direct {
            ld: label_stride(v, out, n).unwrap(),
        }
    } else if mode0 == n {
        OutputLayout::Swapped {
            ld: label_stride(v, out, m).unwrap(),
        }
    } else {
        OutputLayout::Staged
    }
}

fn evaluate(v: &ValidatedContraction, pair: &SlicingPair) -> Result<Candidate, PlanError> {
    check_pair(v, pair)?;
    let spec = v.spec();
    let res = residual(spec, pair);
    let out_slicing = output_slicing(spec, pair);
    let out_rank = out_slicing.len() - out_slicing.weight();
    for (what, rank) in [
        ("left operand", res.left_rank()),
        ("right operand", res.right_rank()),
        ("output", out_rank),
    ] {
        if rank > 2 {
            return Err(PlanError::ResidualTooLarge { what, rank });
        }
    }

    let e = |l: &str| v.extent(l) as u64;
    let mut copies = Vec::new();
    let mut extra_reduction = Vec::new();
    let mut copy_matrix = |layout: MatrixLayout, target: CopyTarget, rows: &str, cols: &str| {
        if layout == MatrixLayout::Packed {
            copies.push(CopyStep {
                target,
                rows: v.extent(rows),
                cols: v.extent(cols),
            });
        }
    };

    let (kernel, map, score) = match (res.contracted.len(), res.left_free.len(), res.right_free.len()) {
        (1, 1, 1) => {
            let (m, n, k) = (&res.left_free[0], &res.right_free[0], &res.contracted[0]);
            let a = matrix_layout(v, spec.left(), m, k);
            let b = matrix_layout(v, spec.right(), k, n);
            let c = output_layout(v, m, n);
            copy_matrix(a, CopyTarget::Left, m, k);
            copy_matrix(b, CopyTarget::Right, k, n);
            if c == OutputLayout::Staged {
                copies.push(CopyStep {
                    target: CopyTarget::Output,
                    rows: v.extent(m),
                    cols: v.extent(n),
                });
            }
            let kind = if a == MatrixLayout::Packed || b == MatrixLayout::Packed {
                KernelKind::CopyGemm
            } else {
                KernelKind::Gemm
            };
            let map = KernelMap::Gemm {
                m: m.clone(),
                n: n.clone(),
                k: k.clone(),
                a,
                b,
                c,
            };
            (kind, map, e(m) * e(n) * e(k))
        }
        (1, 1, 0) | (1, 0, 1) => {
            let (matrix, term, m) = if res.left_free.len() == 1 {
                (Operand::Left, spec.left(), &res.left_free[0])
            } else {
                (Operand::Right, spec.right(), &res.right_free[0])
            };
            let k = &res.contracted[0];
            let a = matrix_layout(v, term, m, k);
            let target = if matrix == Operand::Left {
                CopyTarget::Left
            } else {
                CopyTarget::Right
            };
            copy_matrix(a, target, m, k);
            let kind = if a == MatrixLayout::Packed {
                KernelKind::CopyGemv
            } else {
                KernelKind::Gemv
            };
            let map = KernelMap::Gemv {
                matrix,
                m: m.clone(),
                k: k.clone(),
                a,
            };
            (kind, map, e(m) * e(k))
        }
        (uc, 0, 0) if uc >= 1 => {
            let mut k = res.contracted[0].clone();
            for c in &res.contracted[1..] {
                if v.extent(c) > v.extent(&k) {
                    k = c.clone();
                }
            }
            extra_reduction = res.contracted.iter().filter(|c| **c != k).cloned().collect();
            let score = e(&k);
            (KernelKind::Dot, KernelMap::Dot { k }, score)
        }
        (0, 1, 1) => {
            let (m, n) = (&res.left_free[0], &res.right_free[0]);
            let c = output_layout(v, m, n);
            if c == OutputLayout::Staged {
                copies.push(CopyStep {
                    target: CopyTarget::Output,
                    rows: v.extent(m),
                    cols: v.extent(n),
                });
            }
            let map = KernelMap::Ger {
                m: m.clone(),
                n: n.clone(),
                c,
            };
            (KernelKind::Ger, map, e(m) * e(n))
        }
        (0, _, _) => {
            let labels: Vec<String> = spec
                .output()
                .labels()
                .enumerate()
                .filter(|&(i, _)| !out_slicing.is_sliced(i))
                .map(|(_, l)| l.to_string())
                .collect();
            let score = labels.iter().map(|l| e(l)).product();
            (KernelKind::Elementwise, KernelMap::Elementwise { labels }, score)
        }
        (uc, fl, fr) => unreachable!("residual ({uc}, {fl}, {fr}) passed the rank check"),
    };

    let (ln, rn) = (spec.left().rank(), spec.right().rank());
    let r1 = !pair.left.is_sliced(0) && !pair.right.is_sliced(0);
    let r2 = pair.left.weight() + 2 == ln && pair.right.weight() + 2 == rn;
    let r3 = res.left_free.len() == 1 && res.right_free.len() == 1 && res.contracted.len() == 1;
    let fallback = match (r1, r2, r3) {
        (true, true, true) => Fallback::None,
        (false, true, true) => Fallback::F1,
        (_, false, _) => Fallback::F2,
        _ => Fallback::F3,
    };
    Ok(Candidate {
        pair: pair.clone(),
        out_slicing,
        report: RequirementReport {
            r1,
            r2,
            r3,
            fallback,
            kernel,
        },
        map,
        copies,
        score,
        extra_reduction,
    })
}

/// Checks one slicing and reports which requirements hold and which kernel it reaches.
pub fn check_requirements(
    v: &ValidatedContraction,
    left: &SlicingVector,
    right: &SlicingVector,
) -> Result<RequirementReport, PlanError> {
    evaluate(v, &SlicingPair::new(left.clone(), right.clone())).map(|c| c.report)
}

fn candidates(v: &ValidatedContraction) -> Vec<Candidate> {
    let spec = v.spec();
    let labels = spec.all_labels();
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << labels.len()) {
        let sliced = |l: &str| labels.iter().position(|x| x == l).is_some_and(|i| mask & (1 << i) != 0);
        let vector = |term: &TensorTerm| SlicingVector::new(term.labels().map(sliced).collect());
        let pair = SlicingPair::new(vector(spec.left()), vector(spec.right()));
        if let Ok(c) = evaluate(v, &pair) {
            out.push(c);
        }
    }
    out.sort_by_key(|c| c.pair.concatenated());
    out
}

/// Every slicing whose residual fits a kernel, in lexicographic slicing order.
pub fn enumerate_slicings(v: &ValidatedContraction) -> Vec<EnumeratedSlicing> {
    candidates(v)
        .into_iter()
        .map(|c| {
            let plan = build(v, c);
            EnumeratedSlicing {
                kernel_calls: plan.kernel_calls(),
                slicing: plan.slicing,
                output_slicing: plan.output_slicing,
                report: plan.report,
                score: score_of(&plan.kernel_map, v),
                copies: plan.copies,
            }
        })
        .collect()
}

fn score_of(map: &KernelMap, v: &ValidatedContraction) -> u64 {
    let e = |l: &str| v.extent(l) as u64;
    match map {
        KernelMap::Gemm { m, n, k, .. } => e(m) * e(n) * e(k),
        KernelMap::Gemv { m, k, .. } => e(m) * e(k),
        KernelMap::Ger { m, n, .. } => e(m) * e(n),
        KernelMap::Dot { k } => e(k),
        KernelMap::Elementwise { labels } => labels.iter().map(|l| e(l)).product(),
    }
}

fn build(v: &ValidatedContraction, c: Candidate) -> ExecutionPlan {
    let spec = v.spec();
    let mut loop_nest = Vec::new();
    for (i, l) in spec.output().labels().enumerate().rev() {
        if c.out_slicing.is_sliced(i) {
            loop_nest.push(LoopLabel {
                label: l.to_string(),
                extent: v.extent(l),
                role: LoopRole::Free,
            });
        }
    }
    for (i, l) in spec.left().labels().enumerate().rev() {
        if spec.is_contracted(l) && c.pair.left.is_sliced(i) {
            loop_nest.push(LoopLabel {
                label: l.to_string(),
                extent: v.extent(l),
                role: LoopRole::Contracted,
            });
        }
    }
    for l in &c.extra_reduction {
        loop_nest.push(LoopLabel {
            label: l.clone(),
            extent: v.extent(l),
            role: LoopRole::Contracted,
        });
    }
    ExecutionPlan {
        contraction: v.clone(),
        class: classify(spec),
        slicing: c.pair,
        output_slicing: c.out_slicing,
        kernel: c.report.kernel,
        report: c.report,
        loop_nest,
        kernel_map: c.map,
        copies: c.copies,
        flops: v.flop_count(),
    }
}

fn best(mut pool: Vec<Candidate>) -> Option<Candidate> {
    pool.sort_by_key(Candidate::rank_key);
    pool.into_iter().next()
}

fn unreachable_reason(v: &ValidatedContraction, kind: KernelKind) -> String {
    let spec = v.spec();
    let (dl, dr) = spec.deltas();
    let min_rank = spec.left().rank().min(spec.right().rank());
    match kind {
        KernelKind::Gemm | KernelKind::CopyGemm if dl == 0 || dr == 0 => {
            "R3 violated: each operand needs a free index besides the shared contracted one".into()
        }
        KernelKind::Gemm | KernelKind::CopyGemm if min_rank < 2 => {
            "R2 violated: an operand has fewer than two modes".into()
        }
        KernelKind::Gemm => {
            "R1 violated: the mode-0 indices of both operands are distinct contracted indices, \
             so no matrix slicing keeps both stride-1 modes"
                .into()
        }
        KernelKind::CopyGemm => "every matrix-matrix slicing already keeps both stride-1 modes".into(),
        KernelKind::Gemv | KernelKind::CopyGemv if dl == 0 && dr == 0 => {
            "R3 violated: neither operand has a free index".into()
        }
        KernelKind::Gemv => "R1 violated: every matrix-vector slicing slices the matrix operand's mode 0".into(),
        KernelKind::CopyGemv => "every matrix-vector slicing already keeps the matrix operand's stride-1 mode".into(),
        KernelKind::Ger => "R3 violated: an outer product needs a free index in each operand".into(),
        KernelKind::Dot | KernelKind::Elementwise => "no slicing produces this kernel".into(),
    }
}

pub fn plan(v: &ValidatedContraction, policy: &Policy) -> Result<ExecutionPlan, PlanError> {
    let chosen = match policy {
        Policy::ForceSlicing(pair) => evaluate(v, pair)?,
        Policy::ForceKernel(kind) => {
            let pool: Vec<_> = candidates(v).into_iter().filter(|c| c.report.kernel == *kind).collect();
            best(pool).ok_or_else(|| PlanError::KernelUnreachable {
                kernel: *kind,
                reason: unreachable_reason(v, *kind),
            })?
        }
        Policy::Auto => auto(v)?,
    };
    Ok(build(v, chosen))
}

fn auto(v: &ValidatedContraction) -> Result<Candidate, PlanError> {
    let all = candidates(v);
    let of = |kind: KernelKind, pred: &dyn Fn(&Candidate) -> bool| -> Vec<Candidate> {
        all.iter()
            .filter(|c| c.report.kernel == kind && pred(c))
            .cloned()
            .collect()
    };
    let any = |_: &Candidate| true;
    let (kind, pool) = match classify(v.spec()) {
        ContractionClass::ThreeTwo => (KernelKind::Gemm, of(KernelKind::Gemm, &any)),
        ContractionClass::ThreeOne => (KernelKind::CopyGemm, of(KernelKind::CopyGemm, &any)),
        ContractionClass::Two => {
            let plain = of(KernelKind::Gemv, &any);
            if plain.is_empty() {
                (KernelKind::CopyGemv, of(KernelKind::CopyGemv, &any))
            } else {
                (KernelKind::Gemv, plain)
            }
        }
        ContractionClass::One => (
            KernelKind::Dot,
            of(KernelKind::Dot, &|c: &Candidate| c.extra_reduction.is_empty()),
        ),
    };
    best(pool).ok_or_else(|| PlanError::KernelUnreachable {
        kernel: kind,
        reason: unreachable_reason(v, kind),
    })
}
