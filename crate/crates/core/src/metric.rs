//! Metric tensors and index raising and lowering.
//!
//! Lowering mode `k` of `T` contracts it with the metric,
//! `R[..,-x,..] = T[..,+k,..] * G[-k,-x]`, and raising uses the inverse
//! metric the same way. Both go through the general planner and executor.

use crate::executor::{Engine, ExecError};
use crate::expr::{parse, CheckMode, ParseError, ValidatedContraction, ValidationError};
use crate::planner::{plan, PlanError, Policy};
use crate::tensor::{Fill, Tensor, TensorError, Variance};

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("metric must be a square rank-2 tensor, got extents {0:?}")]
    NotSquare(Vec<usize>),
    #[error("metric is not symmetric: entries differ by {0:e}")]
    Asymmetric(f64),
    #[error("metric is singular or ill-conditioned (condition estimate {0:e})")]
    Singular(f64),
    #[error("degenerate coordinates: {0}")]
    Degenerate(String),
    #[error("mode {mode} is already {variance:?}")]
    AlreadyPlaced { mode: usize, variance: Variance },
    #[error("mode {mode} has extent {extent}, metric dimension is {dimension}")]
    ExtentMismatch {
        mode: usize,
        extent: usize,
        dimension: usize,
    },
    #[error("mode {mode} out of range for a rank-{rank} tensor")]
    ModeOutOfRange { mode: usize, rank: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// A symmetric nonsingular metric (both indices lower) with its inverse
/// (both indices upper).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTensor {
    g: Tensor,
    g_inv: Tensor,
}

impl MetricTensor {
    pub fn g(&self) -> &Tensor {
        &self.g
    }

    pub fn g_inv(&self) -> &Tensor {
        &self.g_inv
    }

    pub fn dimension(&self) -> usize {
        self.g.extents()[0]
    }

    pub fn identity(n: usize) -> Result<Self, MetricError> {
        diagonal(&vec![1.0; n])
    }
}

fn diagonal(d: &[f64]) -> Result<MetricTensor, MetricError> {
    let n = d.len();
    let mut g = Tensor::zeros(&[n, n], &[Variance::Down, Variance::Down])?.with_name("G");
    let mut gi = Tensor::zeros(&[n, n], &[Variance::Up, Variance::Up])?.with_name("Ginv");
    for (i, &v) in d.iter().enumerate() {
        g.data_mut()[i + i * n] = v;
        gi.data_mut()[i + i * n] = 1.0 / v;
    }
    Ok(MetricTensor { g, g_inv: gi })
}

/// Metric of spherical coordinates `(r, theta, phi)` at one point:
/// `diag(1, r^2, r^2 sin^2 theta)`.
pub fn spherical_metric(r: f64, theta: f64) -> Result<MetricTensor, MetricError> {
    if !(r.is_finite() && r > 0.0) {
        return Err(MetricError::Degenerate(format!("radius {r} must be positive")));
    }
    let s = theta.sin();
    if !(theta > 0.0 && theta < std::f64::consts::PI) || s == 0.0 {
        return Err(MetricError::Degenerate(format!("polar angle {theta} must lie in (0, pi)")));
    }
    diagonal(&[1.0, r * r, r * r * s * s])
}

fn one_norm(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i + j * n].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverts a symmetric metric by Gauss-Jordan elimination with partial pivoting.
pub fn invert_metric(g: &Tensor) -> Result<MetricTensor, MetricError> {
    let ext = g.extents();
    if ext.len() != 2 || ext[0] != ext[1] || ext[0] == 0 {
        return Err(MetricError::NotSquare(ext.to_vec()));
    }
    let n = ext[0];
    let a = g.data();
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[i + j * n] - a[j + i * n]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(MetricError::Asymmetric(worst));
    }

    // Row-major working copy [A | I].
    let w = 2 * n;
    let mut m = vec![0.0; n * w];
    for i in 0..n {
        for j in 0..n {
            m[i * w + j] = a[i + j * n];
        }
        m[i * w + n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * w + col].abs().total_cmp(&m[y * w + col].abs()))
            .unwrap();
        let p = m[pivot * w + col];
        if p == 0.0 || !p.is_finite() {
            return Err(MetricError::Singular(f64::INFINITY));
        }
        if pivot != col {
            for j in 0..w {
                m.swap(pivot * w + j, col * w + j);
            }
        }
        for j in 0..w {
            m[col * w + j] /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[row * w + col];
            if f != 0.0 {
                for j in 0..w {
                    m[row * w + j] -= f * m[col * w + j];
                }
            }
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            inv[i + j * n] = m[i * w + n + j];
        }
    }
    let cond = one_norm(a, n) * one_norm(&inv, n);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(MetricError::Singular(cond));
    }
    Ok(MetricTensor {
        g: Tensor::new(&[n, n], &[Variance::Down, Variance::Down], Fill::FromValues(a.to_vec()))?.with_name("G"),
        g_inv: Tensor::new(&[n, n], &[Variance::Up, Variance::Up], Fill::FromValues(inv))?.with_name("Ginv"),
    })
}

/// Contracts `mode` of `t` with the metric (lowering) or its inverse (raising).
fn apply(engine: &Engine, t: &Tensor, mode: usize, m: &MetricTensor, lower: bool) -> Result<Tensor, MetricError> {
    let rank = t.rank();
    if mode >= rank {
        return Err(MetricError::ModeOutOfRange { mode, rank });
    }
    let from = if lower { Variance::Up } else { Variance::Down };
    if t.variance()[mode] != from {
        return Err(MetricError::AlreadyPlaced {
            mode,
            variance: t.variance()[mode],
        });
    }
    if t.extents()[mode] != m.dimension() {
        return Err(MetricError::ExtentMismatch {
            mode,
            extent: t.extents()[mode],
            dimension: m.dimension(),
        });
    }
    let to = from.flip();
    let idx = |i: usize, v: Variance, contracted: bool| {
        let label = match (i == mode, contracted) {
            (true, true) => "k".to_string(),
            (true, false) => "x".to_string(),
            _ => format!("i{i}"),
        };
        format!("{}{label}", v.symbol())
    };
    let t_idx: Vec<String> = (0..rank).map(|i| idx(i, t.variance()[i], true)).collect();
    let r_idx: Vec<String> = (0..rank)
        .map(|i| idx(i, if i == mode { to } else { t.variance()[i] }, false))
        .collect();
    let (metric, name) = if lower { (&m.g, "G") } else { (&m.g_inv, "Ginv") };
    let s = to.symbol();
    let text = format!(
        "R[{}] = T[{}] * {name}[{s}k,{s}x]",
        r_idx.join(","),
        t_idx.join(",")
    );
    let spec = parse(&text, CheckMode::Strict)?;
    let v = ValidatedContraction::new(&spec, t, metric)?;
    let p = plan(&v, &Policy::Auto)?;
    let (out, _) = engine.execute(&p, t, metric)?;
    Ok(match t.name() {
        Some(n) => out.with_name(n),
        None => out,
    })
}

pub fn lower_index(t: &Tensor, mode: usize, m: &MetricTensor) -> Result<Tensor, MetricError> {
    apply(&Engine::default(), t, mode, m, true)
}

pub fn raise_index(t: &Tensor, mode: usize, m: &MetricTensor) -> Result<Tensor, MetricError> {
    apply(&Engine::default(), t, mode, m, false)
}

pub fn lower_index_with(engine: &Engine, t: &Tensor, mode: usize, m: &MetricTensor) -> Result<Tensor, MetricError> {
    apply(engine, t, mode, m, true)
}

pub fn raise_index_with(engine: &Engine, t: &Tensor, mode: usize, m: &MetricTensor) -> Result<Tensor, MetricError> {
    apply(engine, t, mode, m, false)
}

/// The covector paired with a vector by the metric.
pub fn dual(v: &Tensor, m: &MetricTensor) -> Result<Tensor, MetricError> {
    lower_index(v, 0, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn vector(vals: &[f64], v: Variance) -> Tensor {
        Tensor::new(&[vals.len()], &[v], Fill::FromValues(vals.to_vec())).unwrap()
    }

    fn diag_of(t: &Tensor) -> Vec<f64> {
        let n = t.extents()[0];
        (0..n).map(|i| t.data()[i + i * n]).collect()
    }

    #[test]
    fn spherical_values() {
        assert_eq!(diag_of(spherical_metric(1.0, PI / 2.0).unwrap().g()), vec![1.0, 1.0, 1.0]);
        assert_eq!(diag_of(spherical_metric(2.0, PI / 2.0).unwrap().g()), vec![1.0, 4.0, 4.0]);
        let d = diag_of(spherical_metric(2.0, PI / 6.0).unwrap().g());
        assert!((d[2] - 1.0).abs() < 1e-15);
        let inv = diag_of(spherical_metric(2.0, PI / 2.0).unwrap().g_inv());
        assert_eq!(inv, vec![1.0, 0.25, 0.25]);
    }

    #[test]
    fn spherical_rejects_degenerate_points() {
        assert!(matches!(spherical_metric(0.0, 1.0), Err(MetricError::Degenerate(_))));
        assert!(matches!(spherical_metric(1.0, 0.0), Err(MetricError::Degenerate(_))));
        assert!(matches!(spherical_metric(1.0, PI), Err(MetricError::Degenerate(_))));
    }

    #[test]
    fn lowering_and_raising_a_vector() {
        let m = spherical_metric(2.0, PI / 2.0).unwrap();
        let low = lower_index(&vector(&[1.0, 1.0, 1.0], Variance::Up), 0, &m).unwrap();
        assert_eq!(low.data(), &[1.0, 4.0, 4.0]);
        assert_eq!(low.variance(), &[Variance::Down]);
        let up = raise_index(&low, 0, &m).unwrap();
        assert_eq!(up.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(dual(&vector(&[1.0, 1.0, 1.0], Variance::Up), &m).unwrap(), low);
    }

    #[test]
    fn identity_metric_only_relabels() {
        let m = MetricTensor::identity(3).unwrap();
        let t = Tensor::new(&[3, 2], &[Variance::Up, Variance::Down], Fill::SeededRandom(3)).unwrap();
        let low = lower_index(&t, 0, &m).unwrap();
        assert_eq!(low.data(), t.data());
        assert_eq!(low.variance(), &[Variance::Down, Variance::Down]);
    }

    #[test]
    fn placement_errors() {
        let m = MetricTensor::identity(3).unwrap();
        let t = vector(&[1.0, 2.0, 3.0], Variance::Down);
        assert!(matches!(lower_index(&t, 0, &m), Err(MetricError::AlreadyPlaced { .. })));
        let u = vector(&[1.0, 2.0], Variance::Up);
        assert!(matches!(lower_index(&u, 0, &m), Err(MetricError::ExtentMismatch { .. })));
        assert!(matches!(lower_index(&u, 1, &m), Err(MetricError::ModeOutOfRange { .. })));
    }

    #[test]
    fn inversion() {
        let dd = [Variance::Down, Variance::Down];
        let g = Tensor::new(&[3, 3], &dd, Fill::FromValues(vec![1.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 4.0])).unwrap();
        assert_eq!(diag_of(invert_metric(&g).unwrap().g_inv()), vec![1.0, 0.25, 0.25]);

        let full = Tensor::new(&[2, 2], &dd, Fill::FromValues(vec![2.0, 1.0, 1.0, 3.0])).unwrap();
        let inv = invert_metric(&full).unwrap();
        let want = [0.6, -0.2, -0.2, 0.4];
        for (a, b) in inv.g_inv().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }

        let skew = Tensor::new(&[2, 2], &dd, Fill::FromValues(vec![1.0, 0.5, 0.0, 1.0])).unwrap();
        assert!(matches!(invert_metric(&skew), Err(MetricError::Asymmetric(_))));
        let singular = Tensor::new(&[2, 2], &dd, Fill::FromValues(vec![1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(matches!(invert_metric(&singular), Err(MetricError::Singular(_))));
        let rect = Tensor::zeros(&[2, 3], &dd).unwrap();
        assert!(matches!(invert_metric(&rect), Err(MetricError::NotSquare(_))));
    }
}
