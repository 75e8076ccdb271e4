//! Conversion between a `C×H×W` noise tensor and its raster-ordered patch
//! sequence.
//!
//! Patches are visited row-major over the patch grid. Inside a patch the
//! flattening order is channel, then row, then column, so patch element `k`
//! sits at `(k / P², (k / P) % P, k % P)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Tensor dimensions plus the patch size used to tile them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize, patch_size: usize) -> Result<Self> {
        let shape = Self {
            channels,
            height,
            width,
            patch_size,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            channels: c,
            height: h,
            width: w,
            patch_size: p,
        } = *self;
        if c == 0 || p == 0 {
            return Err(Error::Shape(format!(
                "channels and patch size must be positive (C={c}, P={p})"
            )));
        }
        if h < p || w < p || h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "H={h} and W={w} must be positive multiples of P={p}"
            )));
        }
        Ok(())
    }

    /// Patch-grid rows and columns.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    /// `M`, the number of patches.
    pub fn num_patches(&self) -> usize {
        let (rows, cols) = self.grid();
        rows * cols
    }

    /// `K = P·P·C`, the number of elements in one patch.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Flat tensor index of element `k` of patch `j`.
    pub fn flat_index(&self, j: usize, k: usize) -> usize {
        let p = self.patch_size;
        let (_, cols) = self.grid();
        let (pr, pc) = (j / cols, j % cols);
        let (ch, r, c) = (k / (p * p), (k / p) % p, k % p);
        ch * self.height * self.width + (pr * p + r) * self.width + pc * p + c
    }
}

/// An initial-noise tensor in channel-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> NoiseTensor<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("noise tensor contains non-finite values".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![T::zero(); channels * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn matches(&self, shape: &TensorShape) -> bool {
        self.dims() == (shape.channels, shape.height, shape.width)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|v| v.as_f64() as f32).collect()
    }
}

/// `M` flattened patches stored as the rows of an `M×K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence<T> {
    pub shape: TensorShape,
    pub patches: Array2<T>,
}

impl<T: Scalar> PatchSequence<T> {
    pub fn new(shape: TensorShape, patches: Array2<T>) -> Result<Self> {
        shape.validate()?;
        let (m, k) = patches.dim();
        if m != shape.num_patches() || k != shape.patch_len() {
            return Err(Error::Shape(format!(
                "patch matrix is {m}x{k}, expected {}x{}",
                shape.num_patches(),
                shape.patch_len()
            )));
        }
        Ok(Self { shape, patches })
    }

    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }
}

/// Table mapping `(patch j, element k)` at position `j·K + k` to its flat
/// tensor index.
pub fn patch_index_map(shape: &TensorShape) -> Result<Vec<usize>> {
    shape.validate()?;
    let (m, k) = (shape.num_patches(), shape.patch_len());
    Ok((0..m * k).map(|i| shape.flat_index(i / k, i % k)).collect())
}

pub fn patchify<T: Scalar>(t: &NoiseTensor<T>, patch_size: usize) -> Result<PatchSequence<T>> {
    let shape = TensorShape::new(t.channels, t.height, t.width, patch_size)?;
    if t.values.len() != shape.numel() {
        return Err(Error::Shape(format!(
            "tensor holds {} values, shape needs {}",
            t.values.len(),
            shape.numel()
        )));
    }
    let map = patch_index_map(&shape)?;
    let patches = Array2::from_shape_fn((shape.num_patches(), shape.patch_len()), |(j, k)| {
        t.values[map[j * shape.patch_len() + k]]
    });
    Ok(PatchSequence { shape, patches })
}

pub fn depatchify<T: Scalar>(s: &PatchSequence<T>) -> Result<NoiseTensor<T>> {
    s.shape.validate()?;
    let (m, k) = s.patches.dim();
    if m != s.shape.num_patches() || k != s.shape.patch_len() {
        return Err(Error::Shape(format!(
            "expected {} patches of length {}, got {m} of length {k}",
            s.shape.num_patches(),
            s.shape.patch_len()
        )));
    }
    let map = patch_index_map(&s.shape)?;
    let mut values = vec![T::zero(); s.shape.numel()];
    for ((j, kk), v) in s.patches.indexed_iter() {
        values[map[j * k + kk]] = *v;
    }
    Ok(NoiseTensor {
        channels: s.shape.channels,
        height: s.shape.height,
        width: s.shape.width,
        values,
    })
}
