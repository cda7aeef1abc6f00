//! Dense tensors stored in generalized column-major order.
//!
//! Mode 0 always has stride 1 and the stride of mode `k` is the product of
//! the extents of all preceding modes. Slicing fixes a subset of modes to
//! single coordinates and yields a [`SliceView`] over the remaining ones;
//! two-mode views can be handed to matrix kernels through [`PackedMatrix`],
//! which aliases the parent storage whenever the view still has a stride-1
//! mode and copies otherwise.

mod io;

use std::borrow::Cow;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Position of an index: upper (contravariant) or lower (covariant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variance {
    Up,
    Down,
}

impl Variance {
    pub fn flip(self) -> Self {
        match self {
            Variance::Up => Variance::Down,
            Variance::Down => Variance::Up,
        }
    }

    /// `+` for upper, `-` for lower.
    pub fn symbol(self) -> char {
        match self {
            Variance::Up => '+',
            Variance::Down => '-',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            '+' => Some(Variance::Up),
            '-' => Some(Variance::Down),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("extent of mode {mode} must be positive")]
    ZeroExtent { mode: usize },
    #[error("variance list has {got} entries for {expected} modes")]
    VarianceLength { expected: usize, got: usize },
    #[error("expected {expected} values, got {got}")]
    DataLength { expected: usize, got: usize },
    #[error("mode {mode} out of range for a rank-{rank} tensor")]
    ModeOutOfRange { mode: usize, rank: usize },
    #[error("slicing vector has {got} entries for a rank-{rank} tensor")]
    SlicingLength { rank: usize, got: usize },
    #[error("{expected} fixed coordinates required by the slicing vector, got {got}")]
    FixedCount { expected: usize, got: usize },
    #[error("coordinate {coord} out of range for mode {mode} with extent {extent}")]
    CoordinateOutOfRange {
        mode: usize,
        coord: usize,
        extent: usize,
    },
    #[error("packing needs a view with exactly 2 kept modes, got {0}")]
    NotAMatrix(usize),
    #[error("tensor file, line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Initial contents for [`Tensor::new`].
#[derive(Debug, Clone, PartialEq)]
pub enum Fill {
    Zeros,
    /// 0, 1, 2, ... in storage order.
    Sequential,
    /// Uniform in `[-1, 1)`, reproducible for a given seed.
    SeededRandom(u64),
    FromValues(Vec<f64>),
}

/// Per-mode 0/1 marker: `true` means the mode is sliced (fixed to a coordinate).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SlicingVector(Vec<bool>);

impl SlicingVector {
    pub fn new(bits: Vec<bool>) -> Self {
        SlicingVector(bits)
    }

    /// All-zero vector of the given length.
    pub fn unsliced(len: usize) -> Self {
        SlicingVector(vec![false; len])
    }

    /// Builds from 0/1 integers; any nonzero entry counts as sliced.
    pub fn from_bits(bits: &[u8]) -> Self {
        SlicingVector(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_sliced(&self, mode: usize) -> bool {
        self.0[mode]
    }

    /// Number of sliced modes (the 1-norm).
    pub fn weight(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }
}

impl fmt::Display for SlicingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, &b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(if b { "1" } else { "0" })?;
        }
        f.write_str(")")
    }
}

/// Strides of a generalized column-major layout.
pub fn column_major_strides(extents: &[usize]) -> Vec<usize> {
    let mut strides = Vec::with_capacity(extents.len());
    let mut acc = 1usize;
    for &e in extents {
        strides.push(acc);
        acc *= e;
    }
    strides
}

/// Dense tensor of `f64` with per-mode variance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: Option<String>,
    extents: Vec<usize>,
    variance: Vec<Variance>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(extents: &[usize], variance: &[Variance], fill: Fill) -> Result<Self, TensorError> {
        if variance.len() != extents.len() {
            return Err(TensorError::VarianceLength {
                expected: extents.len(),
                got: variance.len(),
            });
        }
        if let Some(mode) = extents.iter().position(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { mode });
        }
        let len: usize = extents.iter().product();
        let data = match fill {
            Fill::Zeros => vec![0.0; len],
            Fill::Sequential => (0..len).map(|i| i as f64).collect(),
            Fill::SeededRandom(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
            }
            Fill::FromValues(values) => {
                if values.len() != len {
                    return Err(TensorError::DataLength {
                        expected: len,
                        got: values.len(),
                    });
                }
                values
            }
        };
        Ok(Tensor {
            name: None,
            extents: extents.to_vec(),
            variance: variance.to_vec(),
            data,
        })
    }

    pub fn zeros(extents: &[usize], variance: &[Variance]) -> Result<Self, TensorError> {
        Tensor::new(extents, variance, Fill::Zeros)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            name: None,
            extents: Vec::new(),
            variance: Vec::new(),
            data: vec![value],
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn variance(&self) -> &[Variance] {
        &self.variance
    }

    pub fn set_variance(&mut self, mode: usize, variance: Variance) -> Result<(), TensorError> {
        let rank = self.rank();
        let slot = self
            .variance
            .get_mut(mode)
            .ok_or(TensorError::ModeOutOfRange { mode, rank })?;
        *slot = variance;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn stride_of(&self, mode: usize) -> Result<usize, TensorError> {
        if mode >= self.rank() {
            return Err(TensorError::ModeOutOfRange {
                mode,
                rank: self.rank(),
            });
        }
        Ok(self.extents[..mode].iter().product())
    }

    pub fn strides(&self) -> Vec<usize> {
        column_major_strides(&self.extents)
    }

    /// Storage offset of a full coordinate, or `None` if out of range.
    pub fn offset(&self, coords: &[usize]) -> Option<usize> {
        if coords.len() != self.rank() {
            return None;
        }
        let mut off = 0;
        let mut stride = 1;
        for (&c, &e) in coords.iter().zip(&self.extents) {
            if c >= e {
                return None;
            }
            off += c * stride;
            stride *= e;
        }
        Some(off)
    }

    pub fn get(&self, coords: &[usize]) -> Option<f64> {
        self.offset(coords).map(|o| self.data[o])
    }

    pub fn set(&mut self, coords: &[usize], value: f64) -> Option<()> {
        let o = self.offset(coords)?;
        self.data[o] = value;
        Some(())
    }

    /// Fixes every mode marked in `s` to the matching entry of `fixed`
    /// (given in mode order) and returns a view over the remaining modes.
    pub fn slice_view(&self, s: &SlicingVector, fixed: &[usize]) -> Result<SliceView<'_>, TensorError> {
        if s.len() != self.rank() {
            return Err(TensorError::SlicingLength {
                rank: self.rank(),
                got: s.len(),
            });
        }
        if fixed.len() != s.weight() {
            return Err(TensorError::FixedCount {
                expected: s.weight(),
                got: fixed.len(),
            });
        }
        let strides = self.strides();
        let mut base_offset = 0;
        let mut kept = Vec::with_capacity(self.rank() - s.weight());
        let mut fixed_iter = fixed.iter();
        for mode in 0..self.rank() {
            let extent = self.extents[mode];
            if s.is_sliced(mode) {
                let &coord = fixed_iter.next().expect("count checked above");
                if coord >= extent {
                    return Err(TensorError::CoordinateOutOfRange { mode, coord, extent });
                }
                base_offset += coord * strides[mode];
            } else {
                kept.push(KeptMode {
                    mode,
                    extent,
                    stride: strides[mode],
                });
            }
        }
        Ok(SliceView {
            parent: self,
            base_offset,
            kept,
        })
    }
}

/// One unsliced mode of a [`SliceView`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeptMode {
    /// Mode index in the parent tensor.
    pub mode: usize,
    pub extent: usize,
    pub stride: usize,
}

/// A slice of a tensor: some modes fixed, the rest kept with their original strides.
#[derive(Debug, Clone)]
pub struct SliceView<'a> {
    parent: &'a Tensor,
    base_offset: usize,
    kept: Vec<KeptMode>,
}

impl<'a> SliceView<'a> {
    pub fn parent(&self) -> &'a Tensor {
        self.parent
    }

    pub fn base_offset(&self) -> usize {
        self.base_offset
    }

    pub fn kept_modes(&self) -> &[KeptMode] {
        &self.kept
    }

    pub fn rank(&self) -> usize {
        self.kept.len()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.kept.iter().map(|k| k.extent).collect()
    }

    /// Parent offset of a coordinate given over the kept modes.
    pub fn offset(&self, coords: &[usize]) -> Option<usize> {
        if coords.len() != self.kept.len() {
            return None;
        }
        let mut off = self.base_offset;
        for (&c, k) in coords.iter().zip(&self.kept) {
            if c >= k.extent {
                return None;
            }
            off += c * k.stride;
        }
        Some(off)
    }

    pub fn get(&self, coords: &[usize]) -> Option<f64> {
        self.offset(coords).map(|o| self.parent.data[o])
    }

    /// Column-major matrix over the two kept modes; see [`pack_slice`].
    pub fn pack(&self) -> Result<PackedMatrix<'a>, TensorError> {
        pack_slice(self)
    }
}

/// Column-major matrix handed to a kernel: element `(i, j)` lives at
/// `i + j * leading_dimension` of [`PackedMatrix::as_slice`].
#[derive(Debug, Clone)]
pub struct PackedMatrix<'a> {
    rows: usize,
    cols: usize,
    leading_dimension: usize,
    data: Cow<'a, [f64]>,
}

impl PackedMatrix<'_> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn leading_dimension(&self) -> usize {
        self.leading_dimension
    }

    /// `true` when the data was copied out of the parent tensor.
    pub fn is_copy(&self) -> bool {
        matches!(self.data, Cow::Owned(_))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols, "({i}, {j}) outside {}x{}", self.rows, self.cols);
        self.data[i + j * self.leading_dimension]
    }
}

/// Turns a two-mode view into a column-major matrix whose rows follow the
/// first kept mode. Aliases the parent when that mode has stride 1, copies
/// into a contiguous buffer otherwise.
pub fn pack_slice<'a>(view: &SliceView<'a>) -> Result<PackedMatrix<'a>, TensorError> {
    let [r, c] = view.kept[..] else {
        return Err(TensorError::NotAMatrix(view.kept.len()));
    };
    if r.stride == 1 {
        return Ok(PackedMatrix {
            rows: r.extent,
            cols: c.extent,
            leading_dimension: c.stride,
            data: Cow::Borrowed(&view.parent.data[view.base_offset..]),
        });
    }
    let mut buf = vec![0.0; r.extent * c.extent];
    gather_matrix(
        &view.parent.data,
        view.base_offset,
        r.stride,
        c.stride,
        r.extent,
        c.extent,
        &mut buf,
    );
    Ok(PackedMatrix {
        rows: r.extent,
        cols: c.extent,
        leading_dimension: r.extent,
        data: Cow::Owned(buf),
    })
}

/// Copies a strided `rows x cols` matrix into `dst` in contiguous column-major order.
pub(crate) fn gather_matrix(
    src: &[f64],
    base: usize,
    row_stride: usize,
    col_stride: usize,
    rows: usize,
    cols: usize,
    dst: &mut [f64],
) {
    debug_assert!(dst.len() >= rows * cols);
    for j in 0..cols {
        let col = base + j * col_stride;
        let out = &mut dst[j * rows..(j + 1) * rows];
        if row_stride == 1 {
            out.copy_from_slice(&src[col..col + rows]);
        } else {
            for (i, v) in out.iter_mut().enumerate() {
                *v = src[col + i * row_stride];
            }
        }
    }
}
