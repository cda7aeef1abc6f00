//! Human-readable plan reports and re-layout suggestions.

use std::fmt;

use super::{classify, ContractionClass, CopyTarget, ExecutionPlan, KernelMap, LoopRole, MatrixLayout, OutputLayout};
use crate::expr::{parse, ContractionSpec, TensorTerm};

/// A rewritten expression whose operand mode order avoids copies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relayout {
    pub description: String,
    pub spec: ContractionSpec,
}

fn with_label_first(term: &TensorTerm, label: &str) -> TensorTerm {
    let mut t = term.clone();
    let pos = t.position(label).expect("label belongs to term");
    let idx = t.indices.remove(pos);
    t.indices.insert(0, idx);
    t
}

/// Mode reorderings that turn a contraction needing copies into one that
/// reaches a plain GEMM. Every suggestion is re-classified before it is
/// returned. Empty unless the contraction is in class 3.1.
pub fn relayout_advice(spec: &ContractionSpec) -> Vec<Relayout> {
    if classify(spec) != ContractionClass::ThreeOne {
        return Vec::new();
    }
    let (left, right, out) = (spec.left(), spec.right(), spec.output());
    let l0 = &left.indices[0].label;
    let r0 = &right.indices[0].label;
    let mut proposals = vec![
        (
            format!("store {} with `{l0}` as mode 0", right.name),
            left.clone(),
            with_label_first(right, l0),
        ),
        (
            format!("store {} with `{r0}` as mode 0", left.name),
            with_label_first(left, r0),
            right.clone(),
        ),
    ];
    if let Some(f) = spec.free_left().first() {
        proposals.push((
            format!("store {} with free index `{f}` as mode 0", left.name),
            with_label_first(left, f),
            right.clone(),
        ));
    }
    if let Some(f) = spec.free_right().first() {
        proposals.push((
            format!("store {} with free index `{f}` as mode 0", right.name),
            left.clone(),
            with_label_first(right, f),
        ));
    }
    proposals
        .into_iter()
        .filter_map(|(description, l, r)| {
            let text = format!("{out} = {l} * {r}");
            let rewritten = parse(&text, spec.check_mode()).ok()?;
            (classify(&rewritten) == ContractionClass::ThreeTwo).then_some(Relayout {
                description,
                spec: rewritten,
            })
        })
        .collect()
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn matrix(f: &mut fmt::Formatter<'_>, name: &str, layout: MatrixLayout) -> fmt::Result {
    match layout {
        MatrixLayout::Direct { ld } => write!(f, "{name}: direct ld={ld}"),
        MatrixLayout::Transposed { ld } => write!(f, "{name}: transposed ld={ld}"),
        MatrixLayout::Packed => write!(f, "{name}: packed"),
    }
}

fn output(f: &mut fmt::Formatter<'_>, layout: OutputLayout) -> fmt::Result {
    match layout {
        OutputLayout::Direct { ld } => write!(f, "C: direct ld={ld}"),
        OutputLayout::Swapped { ld } => write!(f, "C: transposed product ld={ld}"),
        OutputLayout::Staged => write!(f, "C: staged"),
    }
}

impl fmt::Display for ExecutionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = &self.contraction;
        let e = |l: &str| v.extent(l);
        let (dl, dr) = self.deltas();
        writeln!(f, "expression:   {}", v.spec())?;
        writeln!(f, "class:        {} (free indices per operand {dl}/{dr})", self.class)?;
        writeln!(
            f,
            "slicing:      left {} right {} output {}",
            self.slicing.left, self.slicing.right, self.output_slicing
        )?;
        writeln!(
            f,
            "requirements: R1 {} R2 {} R3 {} fallback {}",
            yes_no(self.report.r1),
            yes_no(self.report.r2),
            yes_no(self.report.r3),
            self.report.fallback
        )?;
        write!(f, "kernel:       {}  ", self.kernel)?;
        match &self.kernel_map {
            KernelMap::Gemm { m, n, k, a, b, c } => {
                write!(f, "m={m}({}) n={n}({}) k={k}({})  ", e(m), e(n), e(k))?;
                matrix(f, "A", *a)?;
                f.write_str("  ")?;
                matrix(f, "B", *b)?;
                f.write_str("  ")?;
                output(f, *c)?;
            }
            KernelMap::Gemv { matrix: op, m, k, a } => {
                write!(f, "m={m}({}) k={k}({}) matrix={op}  ", e(m), e(k))?;
                matrix(f, "A", *a)?;
            }
            KernelMap::Ger { m, n, c } => {
                write!(f, "m={m}({}) n={n}({})  ", e(m), e(n))?;
                output(f, *c)?;
            }
            KernelMap::Dot { k } => write!(f, "k={k}({})", e(k))?,
            KernelMap::Elementwise { labels } => {
                let dims: Vec<String> = labels.iter().map(|l| format!("{l}({})", e(l))).collect();
                write!(f, "over [{}]", dims.join(","))?;
            }
        }
        writeln!(f)?;
        let loops: Vec<String> = self
            .loop_nest
            .iter()
            .map(|l| {
                let role = match l.role {
                    LoopRole::Free => "free",
                    LoopRole::Contracted => "contracted",
                };
                format!("{}({}, {role})", l.label, l.extent)
            })
            .collect();
        writeln!(
            f,
            "loops:        {}",
            if loops.is_empty() { "none".to_string() } else { loops.join(" > ") }
        )?;
        writeln!(f, "kernel calls: {}", self.kernel_calls())?;
        let copies: Vec<String> = self
            .copies
            .iter()
            .map(|c| {
                let what = match c.target {
                    CopyTarget::Left => "left slice per call",
                    CopyTarget::Right => "right slice per call",
                    CopyTarget::Output => "output slice staged per free slice",
                };
                format!("{what} {}x{}", c.rows, c.cols)
            })
            .collect();
        writeln!(
            f,
            "copies:       {}",
            if copies.is_empty() { "none".to_string() } else { copies.join("; ") }
        )?;
        write!(f, "flops:        {}", self.flops)
    }
}
