//! Portable kernels written in plain Rust.
//!
//! GEMM packs blocks of `op(A)` and `op(B)` into contiguous panels and runs
//! an `MR x NR` register-blocked microkernel over them. On x86-64 machines
//! with AVX2 and FMA a copy of the microkernel compiled for those features
//! is selected at runtime.

use std::cell::RefCell;

use super::{check_gemm, check_gemv, check_matrix, check_vector, Capabilities, KernelBackend, KernelError, Trans};

const MR: usize = 8;
const NR: usize = 4;
const KC: usize = 256;
const MC: usize = 128;
const NC: usize = 2048;
/// Below this many multiply-adds the packing overhead is not worth it.
const SMALL_WORK: usize = 16 * 16 * 16;

#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceBackend;

impl KernelBackend for ReferenceBackend {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            gemm: true,
            gemv: true,
            ger: true,
            dot: true,
            threaded: false,
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
        scale_matrix(c, m, n, ldc, beta);
        if k == 0 || alpha == 0.0 {
            return Ok(());
        }
        let op_a = Operand::new(a, lda, trans_a);
        let op_b = Operand::new(b, ldb, trans_b);
        if m * n * k <= SMALL_WORK {
            gemm_small(m, n, k, alpha, op_a, op_b, c, ldc);
        } else {
            gemm_blocked(m, n, k, alpha, op_a, op_b, c, ldc);
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
        match trans {
            Trans::No => {
                for i in 0..m {
                    scale_in_place(&mut y[i * incy], beta);
                }
                if m == 0 {
                    return Ok(());
                }
                for j in 0..n {
                    let t = alpha * x[j * incx];
                    let col = &a[j * lda..j * lda + m];
                    if incy == 1 {
                        for (yi, &aij) in y[..m].iter_mut().zip(col) {
                            *yi += aij * t;
                        }
                    } else {
                        for (i, &aij) in col.iter().enumerate() {
                            y[i * incy] += aij * t;
                        }
                    }
                }
            }
            Trans::Yes => {
                for j in 0..n {
                    let s = if m == 0 {
                        0.0
                    } else {
                        strided_dot(&a[j * lda..j * lda + m], 1, x, incx, m)
                    };
                    let yj = &mut y[j * incy];
                    scale_in_place(yj, beta);
                    *yj += alpha * s;
                }
            }
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
        if m == 0 {
            return Ok(());
        }
        for j in 0..n {
            let t = alpha * y[j * incy];
            let col = &mut a[j * lda..j * lda + m];
            if incx == 1 {
                for (aij, &xi) in col.iter_mut().zip(&x[..m]) {
                    *aij += xi * t;
                }
            } else {
                for (i, aij) in col.iter_mut().enumerate() {
                    *aij += x[i * incx] * t;
                }
            }
        }
        Ok(())
    }

    fn dot(&self, n: usize, x: &[f64], incx: usize, y: &[f64], incy: usize) -> Result<f64, KernelError> {
        check_vector("x", n, incx, x.len())?;
        check_vector("y", n, incy, y.len())?;
        Ok(strided_dot(x, incx, y, incy, n))
    }
}

fn scale_in_place(v: &mut f64, beta: f64) {
    if beta == 0.0 {
        *v = 0.0;
    } else if beta != 1.0 {
        *v *= beta;
    }
}

fn scale_matrix(c: &mut [f64], m: usize, n: usize, ldc: usize, beta: f64) {
    if beta == 1.0 {
        return;
    }
    for j in 0..n {
        let col = &mut c[j * ldc..j * ldc + m];
        if beta == 0.0 {
            col.fill(0.0);
        } else {
            col.iter_mut().for_each(|v| *v *= beta);
        }
    }
}

/// Dot product with four independent partial sums when both vectors are contiguous.
fn strided_dot(x: &[f64], incx: usize, y: &[f64], incy: usize, n: usize) -> f64 {
    if incx == 1 && incy == 1 {
        let (x, y) = (&x[..n], &y[..n]);
        let mut acc = [0.0f64; 4];
        let mut xc = x.chunks_exact(4);
        let mut yc = y.chunks_exact(4);
        for (xa, ya) in (&mut xc).zip(&mut yc) {
            for l in 0..4 {
                acc[l] += xa[l] * ya[l];
            }
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for (a, b) in xc.remainder().iter().zip(yc.remainder()) {
            s += a * b;
        }
        s
    } else {
        (0..n).map(|i| x[i * incx] * y[i * incy]).sum()
    }
}

/// A matrix argument seen through its transpose flag.
#[derive(Clone, Copy)]
struct Operand<'a> {
    data: &'a [f64],
    ld: usize,
    trans: Trans,
}

impl<'a> Operand<'a> {
    fn new(data: &'a [f64], ld: usize, trans: Trans) -> Self {
        Operand { data, ld, trans }
    }

    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> f64 {
        match self.trans {
            Trans::No => self.data[r + c * self.ld],
            Trans::Yes => self.data[c + r * self.ld],
        }
    }
}

fn gemm_small(m: usize, n: usize, k: usize, alpha: f64, a: Operand, b: Operand, c: &mut [f64], ldc: usize) {
    for j in 0..n {
        let col = &mut c[j * ldc..j * ldc + m];
        for p in 0..k {
            let t = alpha * b.at(p, j);
            match a.trans {
                Trans::No => {
                    let acol = &a.data[p * a.ld..p * a.ld + m];
                    for (ci, &ai) in col.iter_mut().zip(acol) {
                        *ci += ai * t;
                    }
                }
                Trans::Yes => {
                    for (i, ci) in col.iter_mut().enumerate() {
                        *ci += a.data[p + i * a.ld] * t;
                    }
                }
            }
        }
    }
}

thread_local! {
    static PACK_BUFFERS: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn gemm_blocked(m: usize, n: usize, k: usize, alpha: f64, a: Operand, b: Operand, c: &mut [f64], ldc: usize) {
    let fma = fma_available();
    PACK_BUFFERS.with(|bufs| {
        let (ap, bp) = &mut *bufs.borrow_mut();
        for jc in (0..n).step_by(NC) {
            let nc = NC.min(n - jc);
            for pc in (0..k).step_by(KC) {
                let kc = KC.min(k - pc);
                pack_b(b, pc, jc, kc, nc, bp);
                for ic in (0..m).step_by(MC) {
                    let mc = MC.min(m - ic);
                    pack_a(a, ic, pc, mc, kc, ap);
                    for jr in (0..nc).step_by(NR) {
                        let nr = NR.min(nc - jr);
                        let bpanel = &bp[jr * kc..(jr + NR) * kc];
                        for ir in (0..mc).step_by(MR) {
                            let mr = MR.min(mc - ir);
                            let apanel = &ap[ir * kc..(ir + MR) * kc];
                            let acc = microkernel(fma, apanel, bpanel);
                            let base = (ic + ir) + (jc + jr) * ldc;
                            for (j, accj) in acc.iter().enumerate().take(nr) {
                                let col = &mut c[base + j * ldc..base + j * ldc + mr];
                                for (cij, &v) in col.iter_mut().zip(accj) {
                                    *cij += alpha * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Packs `op(A)[ic..ic+mc, pc..pc+kc]` into `MR`-row panels, zero padded.
fn pack_a(a: Operand, ic: usize, pc: usize, mc: usize, kc: usize, buf: &mut Vec<f64>) {
    let panels = mc.div_ceil(MR);
    buf.clear();
    buf.resize(panels * MR * kc, 0.0);
    for panel in 0..panels {
        let i0 = panel * MR;
        let rows = MR.min(mc - i0);
        let dst = &mut buf[i0 * kc..(i0 + MR) * kc];
        for p in 0..kc {
            let out = &mut dst[p * MR..p * MR + rows];
            match a.trans {
                Trans::No => {
                    let start = ic + i0 + (pc + p) * a.ld;
                    out.copy_from_slice(&a.data[start..start + rows]);
                }
                Trans::Yes => {
                    for (i, v) in out.iter_mut().enumerate() {
                        *v = a.data[(pc + p) + (ic + i0 + i) * a.ld];
                    }
                }
            }
        }
    }
}

/// Packs `op(B)[pc..pc+kc, jc..jc+nc]` into `NR`-column panels, zero padded.
fn pack_b(b: Operand, pc: usize, jc: usize, kc: usize, nc: usize, buf: &mut Vec<f64>) {
    let panels = nc.div_ceil(NR);
    buf.clear();
    buf.resize(panels * NR * kc, 0.0);
    for panel in 0..panels {
        let j0 = panel * NR;
        let cols = NR.min(nc - j0);
        let dst = &mut buf[j0 * kc..(j0 + NR) * kc];
        for j in 0..cols {
            for p in 0..kc {
                dst[p * NR + j] = b.at(pc + p, jc + j0 + j);
            }
        }
    }
}

#[inline(always)]
fn micro_body<const FMA: bool>(ap: &[f64], bp: &[f64]) -> [[f64; MR]; NR] {
    let mut acc = [[0.0f64; MR]; NR];
    for (a, b) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        for j in 0..NR {
            let bj = b[j];
            for i in 0..MR {
                acc[j][i] = if FMA {
                    a[i].mul_add(bj, acc[j][i])
                } else {
                    acc[j][i] + a[i] * bj
                };
            }
        }
    }
    acc
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn micro_fma(ap: &[f64], bp: &[f64]) -> [[f64; MR]; NR] {
    micro_body::<true>(ap, bp)
}

#[inline]
fn microkernel(fma: bool, ap: &[f64], bp: &[f64]) -> [[f64; MR]; NR] {
    #[cfg(target_arch = "x86_64")]
    if fma {
        // SAFETY: `fma` is only true when the CPU reports AVX2 and FMA.
        return unsafe { micro_fma(ap, bp) };
    }
    let _ = fma;
    micro_body::<false>(ap, bp)
}

fn fma_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        static DETECTED: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
        *DETECTED.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(ta: Trans, tb: Trans, m: usize, n: usize, k: usize, a: &[f64], lda: usize, b: &[f64], ldb: usize) -> Vec<f64> {
        let (oa, ob) = (Operand::new(a, lda, ta), Operand::new(b, ldb, tb));
        let mut c = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                c[i + j * m] = (0..k).map(|p| oa.at(i, p) * ob.at(p, j)).sum();
            }
        }
        c
    }

    fn lcg(seed: u64, len: usize) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn gemm_matches_naive_across_block_edges() {
        let be = ReferenceBackend;
        for &(m, n, k) in &[(1, 1, 1), (3, 5, 2), (9, 5, 17), (33, 7, 300), (130, 9, 5), (17, 41, 257), (3, 2050, 2)] {
            for ta in [Trans::No, Trans::Yes] {
                for tb in [Trans::No, Trans::Yes] {
                    let (ar, _) = super::super::stored_shape(ta, m, k);
                    let (br, _) = super::super::stored_shape(tb, k, n);
                    let lda = ar + 2;
                    let ldb = br + 1;
                    let a = lcg(1, lda * m.max(k));
                    let b = lcg(2, ldb * n.max(k));
                    let want = naive_gemm(ta, tb, m, n, k, &a, lda, &b, ldb);
                    let ldc = m + 3;
                    let mut c = vec![f64::NAN; ldc * n];
                    be.gemm(ta, tb, m, n, k, 1.0, &a, lda, &b, ldb, 0.0, &mut c, ldc).unwrap();
                    for j in 0..n {
                        for i in 0..m {
                            let d = (c[i + j * ldc] - want[i + j * m]).abs();
                            assert!(d < 1e-12, "{m}x{n}x{k} {ta:?} {tb:?} at ({i},{j}): {d}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gemm_alpha_beta() {
        let be = ReferenceBackend;
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [1.0, 1.0, 1.0, 1.0];
        be.gemm(Trans::No, Trans::No, 2, 2, 2, 2.0, &a, 2, &b, 2, 0.5, &mut c, 2).unwrap();
        assert_eq!(c, [2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn gemm_rejects_bad_arguments() {
        let be = ReferenceBackend;
        let a = [0.0; 4];
        let mut c = [0.0; 4];
        assert!(matches!(
            be.gemm(Trans::No, Trans::No, 2, 2, 2, 1.0, &a, 1, &a, 2, 0.0, &mut c, 2),
            Err(KernelError::LeadingDimension { arg: "a", .. })
        ));
        assert!(matches!(
            be.gemm(Trans::No, Trans::No, 2, 2, 2, 1.0, &a, 2, &a[..3], 2, 0.0, &mut c, 2),
            Err(KernelError::BufferTooShort { arg: "b", .. })
        ));
    }

    #[test]
    fn gemv_both_orientations_with_strides() {
        let be = ReferenceBackend;
        // A = [[1, 3], [2, 4]] stored with lda 3.
        let a = [1.0, 2.0, 0.0, 3.0, 4.0, 0.0];
        let x = [1.0, 9.0, 1.0];
        let mut y = [0.0, 7.0, 0.0];
        be.gemv(Trans::No, 2, 2, 1.0, &a, 3, &x, 2, 0.0, &mut y, 2).unwrap();
        assert_eq!(y, [4.0, 7.0, 6.0]);
        let mut y = [1.0, 1.0];
        be.gemv(Trans::Yes, 2, 2, 1.0, &a, 3, &x, 2, 1.0, &mut y, 1).unwrap();
        assert_eq!(y, [4.0, 8.0]);
    }

    #[test]
    fn ger_and_dot() {
        let be = ReferenceBackend;
        let mut a = [0.0; 4];
        be.ger(2, 2, 1.0, &[1.0, 2.0], 1, &[3.0, 0.0, 4.0], 2, &mut a, 2).unwrap();
        assert_eq!(a, [3.0, 6.0, 4.0, 8.0]);
        let x: Vec<f64> = (0..11).map(|i| i as f64).collect();
        assert_eq!(be.dot(11, &x, 1, &x, 1).unwrap(), 385.0);
        assert_eq!(be.dot(3, &x, 5, &x, 1).unwrap(), 0.0 + 5.0 + 20.0);
        assert!(be.dot(3, &x, 0, &x, 1).is_err());
    }
}
