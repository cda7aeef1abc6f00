//! Direct nested-loop contraction used to check every other code path.
//!
//! For each output coordinate the contracted coordinates are visited in
//! lexicographic order (last contracted label fastest) and summed into a
//! single accumulator, so results do not depend on any plan.

use crate::expr::ValidatedContraction;
use crate::tensor::{Tensor, TensorError};

/// Multiply-adds allowed by [`contract_naive`].
pub const DEFAULT_WORK_CAP: u64 = 1_000_000_000;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("naive contraction needs {work} multiply-adds, cap is {cap}")]
    WorkCap { work: u64, cap: u64 },
    #[error(transparent)]
    Validation(#[from] crate::expr::ValidationError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("coordinate list has {got} entries, output has rank {rank}")]
    Coordinate { rank: usize, got: usize },
}

pub fn contract_naive(v: &ValidatedContraction, left: &Tensor, right: &Tensor) -> Result<Tensor, OracleError> {
    contract_naive_with_cap(v, left, right, DEFAULT_WORK_CAP)
}

pub fn contract_naive_with_cap(
    v: &ValidatedContraction,
    left: &Tensor,
    right: &Tensor,
    cap: u64,
) -> Result<Tensor, OracleError> {
    contract_naive_counted(v, left, right, cap).map(|(t, _)| t)
}

/// Naive contraction that also reports how many multiply-adds it performed.
pub fn contract_naive_counted(
    v: &ValidatedContraction,
    left: &Tensor,
    right: &Tensor,
    cap: u64,
) -> Result<(Tensor, u64), OracleError> {
    v.check_operands(left, right)?;
    let work = v.flop_count() / 2;
    if work > cap {
        return Err(OracleError::WorkCap { work, cap });
    }
    let layout = Layout::new(v, left, right);
    let spec = v.spec();
    let mut out = Tensor::zeros(&v.output_extents(), &spec.output().variances())?.with_name(&spec.output().name);

    let mut ops = 0u64;
    let mut coord = vec![0usize; layout.out.len()];
    for slot in out.data_mut().iter_mut() {
        let (s, n) = layout.element(left, right, &coord);
        *slot = s;
        ops += n;
        advance(&mut coord, &layout.out_extents);
    }
    Ok((out, ops))
}

/// One output element, computed directly; `coords` follows the output mode order.
pub fn element(v: &ValidatedContraction, left: &Tensor, right: &Tensor, coords: &[usize]) -> Result<f64, OracleError> {
    v.check_operands(left, right)?;
    let layout = Layout::new(v, left, right);
    if coords.len() != layout.out.len() {
        return Err(OracleError::Coordinate {
            rank: layout.out.len(),
            got: coords.len(),
        });
    }
    Ok(layout.element(left, right, coords).0)
}

/// Per-label strides into the operands, split into output and contracted labels.
struct Layout {
    /// (left stride, right stride) for each output label; 0 if absent.
    out: Vec<(usize, usize)>,
    out_extents: Vec<usize>,
    con: Vec<(usize, usize)>,
    con_extents: Vec<usize>,
}

impl Layout {
    fn new(v: &ValidatedContraction, left: &Tensor, right: &Tensor) -> Self {
        let spec = v.spec();
        let (ls, rs) = (left.strides(), right.strides());
        let stride = |label: &str| {
            (
                spec.left().position(label).map_or(0, |p| ls[p]),
                spec.right().position(label).map_or(0, |p| rs[p]),
            )
        };
        Layout {
            out: spec.output().labels().map(stride).collect(),
            out_extents: v.output_extents(),
            con: spec.contracted().iter().map(|l| stride(l)).collect(),
            con_extents: spec.contracted().iter().map(|l| v.extent(l)).collect(),
        }
    }

    fn element(&self, left: &Tensor, right: &Tensor, coords: &[usize]) -> (f64, u64) {
        let (mut lb, mut rb) = (0, 0);
        for (&c, &(l, r)) in coords.iter().zip(&self.out) {
            lb += c * l;
            rb += c * r;
        }
        let (ld, rd) = (left.data(), right.data());
        let total: usize = self.con_extents.iter().product();
        let mut k = vec![0usize; self.con.len()];
        let mut sum = 0.0;
        for _ in 0..total {
            let (mut lo, mut ro) = (lb, rb);
            for (&c, &(l, r)) in k.iter().zip(&self.con) {
                lo += c * l;
                ro += c * r;
            }
            sum += ld[lo] * rd[ro];
            advance_last_fastest(&mut k, &self.con_extents);
        }
        (sum, total as u64)
    }
}

/// Column-major odometer step (first coordinate fastest).
fn advance(coord: &mut [usize], extents: &[usize]) {
    for (c, &e) in coord.iter_mut().zip(extents) {
        *c += 1;
        if *c < e {
            return;
        }
        *c = 0;
    }
}

/// Lexicographic odometer step (last coordinate fastest).
fn advance_last_fastest(coord: &mut [usize], extents: &[usize]) {
    for (c, &e) in coord.iter_mut().zip(extents).rev() {
        *c += 1;
        if *c < e {
            return;
        }
        *c = 0;
    }
}
