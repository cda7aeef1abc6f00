//! OpenBLAS through its CBLAS entry points.
//!
//! Every argument is checked before crossing into C, so a bad call returns
//! a [`KernelError`] instead of reading out of bounds.

use std::os::raw::c_int;

use super::{check_gemm, check_gemv, check_matrix, check_vector, Capabilities, KernelBackend, KernelError, Trans};

const COL_MAJOR: c_int = 102;
const NO_TRANS: c_int = 111;
const TRANS: c_int = 112;

#[link(name = "openblas")]
extern "C" {
    fn cblas_dgemm(
        layout: c_int,
        trans_a: c_int,
        trans_b: c_int,
        m: c_int,
        n: c_int,
        k: c_int,
        alpha: f64,
        a: *const f64,
        lda: c_int,
        b: *const f64,
        ldb: c_int,
        beta: f64,
        c: *mut f64,
        ldc: c_int,
    );
    fn cblas_dgemv(
        layout: c_int,
        trans: c_int,
        m: c_int,
        n: c_int,
        alpha: f64,
        a: *const f64,
        lda: c_int,
        x: *const f64,
        incx: c_int,
        beta: f64,
        y: *mut f64,
        incy: c_int,
    );
    fn cblas_dger(
        layout: c_int,
        m: c_int,
        n: c_int,
        alpha: f64,
        x: *const f64,
        incx: c_int,
        y: *const f64,
        incy: c_int,
        a: *mut f64,
        lda: c_int,
    );
    fn cblas_ddot(n: c_int, x: *const f64, incx: c_int, y: *const f64, incy: c_int) -> f64;
}

fn int(v: usize) -> Result<c_int, KernelError> {
    c_int::try_from(v).map_err(|_| KernelError::TooLarge(v))
}

fn flag(t: Trans) -> c_int {
    match t {
        Trans::No => NO_TRANS,
        Trans::Yes => TRANS,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OpenBlasBackend;

impl KernelBackend for OpenBlasBackend {
    fn name(&self) -> &'static str {
        "openblas"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            gemm: true,
            gemv: true,
            ger: true,
            dot: true,
            threaded: true,
        }
    }

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
    ) -> Result<(), KernelError> {
        check_gemm(trans_a, trans_b, m, n, k, a, lda, b, ldb, c, ldc)?;
        if m == 0 || n == 0 {
            return Ok(());
        }
        let args = (int(m)?, int(n)?, int(k)?, int(lda)?, int(ldb)?, int(ldc)?);
        // SAFETY: shapes, leading dimensions and buffer lengths were checked above.
        unsafe {
            cblas_dgemm(
                COL_MAJOR,
                flag(trans_a),
                flag(trans_b),
                args.0,
                args.1,
                args.2,
                alpha,
                a.as_ptr(),
                args.3,
                b.as_ptr(),
                args.4,
                beta,
                c.as_mut_ptr(),
                args.5,
            );
        }
        Ok(())
    }

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
    ) -> Result<(), KernelError> {
        check_gemv(trans, m, n, a, lda, x, incx, y, incy)?;
        if m == 0 || n == 0 {
            // Nothing to multiply; only the beta scaling of y remains.
            let ylen = if trans == Trans::No { m } else { n };
            for i in 0..ylen {
                let v = &mut y[i * incy];
                *v = if beta == 0.0 { 0.0 } else { *v * beta };
            }
            return Ok(());
        }
        let args = (int(m)?, int(n)?, int(lda)?, int(incx)?, int(incy)?);
        // SAFETY: arguments checked by `check_gemv`.
        unsafe {
            cblas_dgemv(
                COL_MAJOR,
                flag(trans),
                args.0,
                args.1,
                alpha,
                a.as_ptr(),
                args.2,
                x.as_ptr(),
                args.3,
                beta,
                y.as_mut_ptr(),
                args.4,
            );
        }
        Ok(())
    }

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
    ) -> Result<(), KernelError> {
        check_vector("x", m, incx, x.len())?;
        check_vector("y", n, incy, y.len())?;
        check_matrix("a", m, n, lda, a.len())?;
        if m == 0 || n == 0 {
            return Ok(());
        }
        let args = (int(m)?, int(n)?, int(incx)?, int(incy)?, int(lda)?);
        // SAFETY: arguments checked above.
        unsafe {
            cblas_dger(
                COL_MAJOR,
                args.0,
                args.1,
                alpha,
                x.as_ptr(),
                args.2,
                y.as_ptr(),
                args.3,
                a.as_mut_ptr(),
                args.4,
            );
        }
        Ok(())
    }

    fn dot(&self, n: usize, x: &[f64], incx: usize, y: &[f64], incy: usize) -> Result<f64, KernelError> {
        check_vector("x", n, incx, x.len())?;
        check_vector("y", n, incy, y.len())?;
        if n == 0 {
            return Ok(0.0);
        }
        let (nn, ix, iy) = (int(n)?, int(incx)?, int(incy)?);
        // SAFETY: arguments checked above.
        Ok(unsafe { cblas_ddot(nn, x.as_ptr(), ix, y.as_ptr(), iy) })
    }
}
