//! Dense linear-algebra kernels behind a BLAS-style interface.
//!
//! Matrices are column-major. A matrix argument is a slice that starts at
//! element `(0, 0)` together with a leading dimension; vectors take a slice
//! starting at their first element and a positive increment.

#![allow(clippy::too_many_arguments)]

mod reference;

#[cfg(feature = "openblas")]
mod openblas;

#[cfg(feature = "openblas")]
pub use openblas::OpenBlasBackend;
pub use reference::ReferenceBackend;

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

impl Trans {
    pub fn flip(self) -> Self {
        match self {
            Trans::No => Trans::Yes,
            Trans::Yes => Trans::No,
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("leading dimension of `{arg}` is {ld}, needs at least {min}")]
    LeadingDimension { arg: &'static str, ld: usize, min: usize },
    #[error("buffer `{arg}` holds {len} elements, needs {needed}")]
    BufferTooShort { arg: &'static str, len: usize, needed: usize },
    #[error("increment of `{0}` must be positive")]
    ZeroIncrement(&'static str),
    #[error("dimension {0} exceeds what the backend accepts")]
    TooLarge(usize),
    #[error("backend `{0}` is not available in this build")]
    Unavailable(&'static str),
}

/// What a backend can run natively.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub gemm: bool,
    pub gemv: bool,
    pub ger: bool,
    pub dot: bool,
    /// Uses multiple threads inside a single call.
    pub threaded: bool,
}

pub trait KernelBackend: Send + Sync {
    fn name(&self) -> &'static str;

    fn capabilities(&self) -> Capabilities;

    /// `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of size `m x k`
    /// and `op(B)` of size `k x n`. With `beta == 0` the prior contents of
    /// `C` are ignored.
    fn gemm(
        &self,
        trans_a: Trans,
        trans_b: Trans,
        m: usize,
        n: usize,
        k: usize,
        alpha: f64,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        beta: f64,
        c: &mut [f64],
        ldc: usize,
    ) -> Result<(), KernelError>;

    /// `y = alpha * op(A) * x + beta * y` where `A` is stored as `m x n`.
    fn gemv(
        &self,
        trans: Trans,
        m: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        lda: usize,
        x: &[f64],
        incx: usize,
        beta: f64,
        y: &mut [f64],
        incy: usize,
    ) -> Result<(), KernelError>;

    /// `A += alpha * x * y^T` where `A` is `m x n`.
    fn ger(
        &self,
        m: usize,
        n: usize,
        alpha: f64,
        x: &[f64],
        incx: usize,
        y: &[f64],
        incy: usize,
        a: &mut [f64],
        lda: usize,
    ) -> Result<(), KernelError>;

    fn dot(&self, n: usize, x: &[f64], incx: usize, y: &[f64], incy: usize) -> Result<f64, KernelError>;
}

/// Which backend to construct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendKind {
    #[default]
    Reference,
    /// OpenBLAS through its C interface.
    External,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Reference => "reference",
            BackendKind::External => "external",
        })
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "reference" | "ref" => Ok(BackendKind::Reference),
            "external" | "openblas" | "blas" => Ok(BackendKind::External),
            other => Err(format!("unknown backend `{other}` (expected reference or external)")),
        }
    }
}

pub fn backend(kind: BackendKind) -> Result<Box<dyn KernelBackend>, KernelError> {
    match kind {
        BackendKind::Reference => Ok(Box::new(ReferenceBackend)),
        #[cfg(feature = "openblas")]
        BackendKind::External => Ok(Box::new(OpenBlasBackend)),
        #[cfg(not(feature = "openblas"))]
        BackendKind::External => Err(KernelError::Unavailable("external")),
    }
}

pub(crate) fn check_matrix(arg: &'static str, rows: usize, cols: usize, ld: usize, len: usize) -> Result<(), KernelError> {
    let min = rows.max(1);
    if ld < min {
        return Err(KernelError::LeadingDimension { arg, ld, min });
    }
    if rows == 0 || cols == 0 {
        return Ok(());
    }
    let needed = (cols - 1) * ld + rows;
    if len < needed {
        return Err(KernelError::BufferTooShort { arg, len, needed });
    }
    Ok(())
}

pub(crate) fn check_vector(arg: &'static str, n: usize, inc: usize, len: usize) -> Result<(), KernelError> {
    if inc == 0 {
        return Err(KernelError::ZeroIncrement(arg));
    }
    if n == 0 {
        return Ok(());
    }
    let needed = (n - 1) * inc + 1;
    if len < needed {
        return Err(KernelError::BufferTooShort { arg, len, needed });
    }
    Ok(())
}

/// Stored shape of `op(X)` when `op(X)` is `rows x cols`.
pub(crate) fn stored_shape(trans: Trans, rows: usize, cols: usize) -> (usize, usize) {
    match trans {
        Trans::No => (rows, cols),
        Trans::Yes => (cols, rows),
    }
}

pub(crate) fn check_gemm(
    trans_a: Trans,
    trans_b: Trans,
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &[f64],
    ldc: usize,
) -> Result<(), KernelError> {
    let (ar, ac) = stored_shape(trans_a, m, k);
    let (br, bc) = stored_shape(trans_b, k, n);
    check_matrix("a", ar, ac, lda, a.len())?;
    check_matrix("b", br, bc, ldb, b.len())?;
    check_matrix("c", m, n, ldc, c.len())
}

pub(crate) fn check_gemv(
    trans: Trans,
    m: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    x: &[f64],
    incx: usize,
    y: &[f64],
    incy: usize,
) -> Result<(), KernelError> {
    check_matrix("a", m, n, lda, a.len())?;
    let (xl, yl) = match trans {
        Trans::No => (n, m),
        Trans::Yes => (m, n),
    };
    check_vector("x", xl, incx, x.len())?;
    check_vector("y", yl, incy, y.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_checks() {
        assert!(check_matrix("a", 3, 2, 3, 6).is_ok());
        assert_eq!(
            check_matrix("a", 3, 2, 2, 6),
            Err(KernelError::LeadingDimension { arg: "a", ld: 2, min: 3 })
        );
        assert_eq!(
            check_matrix("a", 3, 2, 4, 6),
            Err(KernelError::BufferTooShort { arg: "a", len: 6, needed: 7 })
        );
        assert!(check_matrix("a", 0, 5, 1, 0).is_ok());
    }

    #[test]
    fn vector_checks() {
        assert!(check_vector("x", 3, 2, 5).is_ok());
        assert_eq!(check_vector("x", 3, 0, 5), Err(KernelError::ZeroIncrement("x")));
        assert!(check_vector("x", 3, 3, 5).is_err());
    }

    #[test]
    fn backend_kind_parsing() {
        assert_eq!("reference".parse::<BackendKind>(), Ok(BackendKind::Reference));
        assert_eq!("External".parse::<BackendKind>(), Ok(BackendKind::External));
        assert!("cuda".parse::<BackendKind>().is_err());
    }
}
