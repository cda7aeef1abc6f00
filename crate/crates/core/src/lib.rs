//! Binary tensor contractions evaluated by slicing operands into
//! matrix, vector or scalar pieces and handing each piece to a dense
//! linear-algebra kernel.
//!
//! A typical run parses an expression, validates it against operand shapes,
//! plans a slicing, and executes the plan:
//!
//! ```
//! use tensorslice::{expr, planner, executor, kernels::ReferenceBackend};
//! use tensorslice::tensor::{Tensor, Fill, Variance::*};
//!
//! let spec = expr::parse("R[+a,-e] = A[+a,+b,+g] * B[-e,-b,-g]", expr::CheckMode::Strict)?;
//! let a = Tensor::new(&[4, 5, 6], &[Up, Up, Up], Fill::SeededRandom(1))?;
//! let b = Tensor::new(&[3, 5, 6], &[Down, Down, Down], Fill::SeededRandom(2))?;
//! let v = expr::ValidatedContraction::new(&spec, &a, &b)?;
//! let plan = planner::plan(&v, &planner::Policy::Auto)?;
//! let (r, stats) = executor::execute(&plan, &a, &b, &ReferenceBackend)?;
//! assert_eq!(r.extents(), &[4, 3]);
//! assert!(stats.kernel_calls > 0);
//! # Ok::<(), tensorslice::Error>(())
//! ```

pub mod bench;
pub mod executor;
pub mod expr;
pub mod kernels;
pub mod metric;
pub mod oracle;
pub mod planner;
pub mod tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Parse(#[from] expr::ParseError),
    #[error(transparent)]
    Validation(#[from] expr::ValidationError),
    #[error(transparent)]
    Plan(#[from] planner::PlanError),
    #[error(transparent)]
    Kernel(#[from] kernels::KernelError),
    #[error(transparent)]
    Exec(#[from] executor::ExecError),
    #[error(transparent)]
    Metric(#[from] metric::MetricError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Bench(#[from] bench::BenchError),
}
