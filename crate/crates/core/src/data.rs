//! Synthetic conditional dataset with a closed-form likelihood, and the
//! `NARD` dataset file format.
//!
//! The oracle is an AR(1) process over patch means: every element of patch
//! `j` is drawn from `N(b + a·m, s²)`, where `m` is the realized mean of
//! patch `j − 1` (zero for the first patch). `a` and `b` come from the
//! condition's first token `t`: `a = 0.5·((t mod 3) − 1)`, `b = 0.1·t`, and
//! `s = 0.8` throughout.
//!
//! `NARD` layout, all integers little-endian: magic `NARD`, `u32` version,
//! `u64` record count, then `u32` C, H, W, `cond_max_len`, `vocab_size`;
//! each record is a `u32` token count, that many `u32` tokens, and `C·H·W`
//! `f32` values in channel-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{truncated, Error, Result};
use crate::gaussian::logpdf_element;
use crate::model::Condition;
use crate::patch::{patch_index_map, NoiseTensor, TensorShape};
use crate::rng::NoiseRng;
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"NARD";
pub const VERSION: u32 = 1;
const KIND: &str = "NARD";

/// Oracle law attached to one condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSpec {
    pub coupling: f64,
    pub bias: f64,
    pub scale: f64,
}

impl OracleSpec {
    pub const SCALE: f64 = 0.8;

    pub fn for_condition(c: &Condition) -> Self {
        let t = c.tokens.first().copied().unwrap_or(0) as f64;
        Self {
            coupling: 0.5 * ((t % 3.0) - 1.0),
            bias: 0.1 * t,
            scale: Self::SCALE,
        }
    }

    /// Mean of patch `j` given the realized mean of patch `j − 1`.
    pub fn patch_mean(&self, prev_mean: f64) -> f64 {
        self.bias + self.coupling * prev_mean
    }

    /// Expected per-element NLL of data from this law, `½ln(2πs²) + ½`.
    pub fn expected_nll(&self) -> f64 {
        0.5 * (2.0 * std::f64::consts::PI * self.scale * self.scale).ln() + 0.5
    }
}

pub fn oracle_generate<T: Scalar>(c: &Condition, shape: &TensorShape, rng: &mut NoiseRng) -> Result<NoiseTensor<T>> {
    let map = patch_index_map(shape)?;
    let spec = OracleSpec::for_condition(c);
    let k = shape.patch_len();
    let mut values = vec![T::zero(); shape.numel()];
    let mut prev = 0.0;
    for j in 0..shape.num_patches() {
        let mu = spec.patch_mean(prev);
        let mut sum = 0.0;
        for e in 0..k {
            let x = mu + spec.scale * rng.normal::<f64>();
            let v = T::lit(x);
            sum += v.as_f64();
            values[map[j * k + e]] = v;
        }
        prev = sum / k as f64;
    }
    Ok(NoiseTensor {
        channels: shape.channels,
        height: shape.height,
        width: shape.width,
        values,
    })
}

/// Mean per-element NLL of `t` under the oracle law for `c`.
pub fn oracle_nll<T: Scalar>(t: &NoiseTensor<T>, c: &Condition, patch_size: usize) -> Result<f64> {
    let shape = TensorShape::new(t.channels, t.height, t.width, patch_size)?;
    let map = patch_index_map(&shape)?;
    let spec = OracleSpec::for_condition(c);
    let log_var = 2.0 * spec.scale.ln();
    let k = shape.patch_len();
    let mut prev = 0.0;
    let mut total = 0.0;
    for j in 0..shape.num_patches() {
        let mu = spec.patch_mean(prev);
        let mut sum = 0.0;
        for e in 0..k {
            let x = t.values[map[j * k + e]].as_f64();
            total -= logpdf_element(x, mu, log_var);
            sum += x;
        }
        prev = sum / k as f64;
    }
    Ok(total / shape.numel() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record<T> {
    pub condition: Condition,
    pub tensor: NoiseTensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub cond_max_len: usize,
    pub vocab_size: usize,
    pub records: Vec<Record<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(channels: usize, height: usize, width: usize, cond_max_len: usize, vocab_size: usize) -> Self {
        Self {
            channels,
            height,
            width,
            cond_max_len,
            vocab_size,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn push(&mut self, condition: Condition, tensor: NoiseTensor<T>) -> Result<()> {
        if tensor.dims() != (self.channels, self.height, self.width) {
            return Err(Error::Shape(format!(
                "record tensor {:?} in a {}x{}x{} dataset",
                tensor.dims(),
                self.channels,
                self.height,
                self.width
            )));
        }
        condition.validate(self.vocab_size, self.cond_max_len)?;
        self.records.push(Record { condition, tensor });
        Ok(())
    }

    /// Splits off the last `n` records.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let at = self.records.len().saturating_sub(n);
        let mut rest = Self::new(self.channels, self.height, self.width, self.cond_max_len, self.vocab_size);
        rest.records = self.records.split_off(at);
        (self, rest)
    }

    pub fn check_shape(&self, shape: &TensorShape) -> Result<()> {
        if (self.channels, self.height, self.width) != (shape.channels, shape.height, shape.width) {
            return Err(Error::Shape(format!(
                "dataset is {}x{}x{}, model expects {}x{}x{}",
                self.channels, self.height, self.width, shape.channels, shape.height, shape.width
            )));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Dataset<f64> {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            cond_max_len: self.cond_max_len,
            vocab_size: self.vocab_size,
            records: self
                .records
                .iter()
                .map(|r| Record {
                    condition: r.condition.clone(),
                    tensor: NoiseTensor {
                        channels: r.tensor.channels,
                        height: r.tensor.height,
                        width: r.tensor.width,
                        values: r.tensor.values.iter().map(|v| v.as_f64()).collect(),
                    },
                })
                .collect(),
        }
    }
}

/// Oracle dataset: record `i` uses stream `seed ^ i` and a single-token
/// condition drawn uniformly from `0..n_tokens`.
pub fn generate_dataset<T: Scalar>(
    shape: &TensorShape,
    n: usize,
    n_tokens: u32,
    cond_max_len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    shape.validate()?;
    if n_tokens == 0 || n_tokens as usize > vocab_size {
        return Err(Error::Config(format!(
            "{n_tokens} condition tokens do not fit a vocabulary of {vocab_size}"
        )));
    }
    let root = NoiseRng::new(seed);
    let mut d = Dataset::new(shape.channels, shape.height, shape.width, cond_max_len, vocab_size);
    for i in 0..n {
        let mut rng = root.split(i as u64);
        let c = Condition::single(rng.below(n_tokens as usize) as u32);
        let t = oracle_generate(&c, shape, &mut rng)?;
        d.push(c, t)?;
    }
    Ok(d)
}

/// Stacks each tensor's patches as an `M×K` matrix.
pub fn patch_matrices<T: Scalar>(d: &Dataset<T>, shape: &TensorShape) -> Result<Vec<Array2<T>>> {
    d.check_shape(shape)?;
    let map = patch_index_map(shape)?;
    let (m, k) = (shape.num_patches(), shape.patch_len());
    Ok(d.records
        .iter()
        .map(|r| Array2::from_shape_fn((m, k), |(j, e)| r.tensor.values[map[j * k + e]]))
        .collect())
}

pub fn write_dataset<T: Scalar, W: Write>(d: &Dataset<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u64::<LittleEndian>(d.records.len() as u64)?;
    for v in [d.channels, d.height, d.width, d.cond_max_len, d.vocab_size] {
        out.write_u32::<LittleEndian>(v as u32)?;
    }
    for r in &d.records {
        out.write_u32::<LittleEndian>(r.condition.len() as u32)?;
        for &t in &r.condition.tokens {
            out.write_u32::<LittleEndian>(t)?;
        }
        for v in &r.tensor.values {
            out.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<T: Scalar, R: Read>(mut input: R) -> Result<Dataset<T>> {
    let corrupt = |detail: String| Error::CorruptHeader { kind: KIND, detail };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated(KIND, "magic"))?;
    if &magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = input.read_u32::<LittleEndian>().map_err(truncated(KIND, "version"))?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = input.read_u64::<LittleEndian>().map_err(truncated(KIND, "record count"))?;
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = input.read_u32::<LittleEndian>().map_err(truncated(KIND, "shape header"))? as usize;
    }
    let [c, h, w, cond_max_len, vocab_size] = dims;
    if c == 0 || h == 0 || w == 0 || cond_max_len == 0 || vocab_size == 0 {
        return Err(corrupt(format!("zero dimension in header {dims:?}")));
    }
    let mut d = Dataset::new(c, h, w, cond_max_len, vocab_size);
    let numel = c * h * w;
    for i in 0..count {
        let what = format!("record {i}");
        let len = input.read_u32::<LittleEndian>().map_err(truncated(KIND, &what))? as usize;
        if len == 0 || len > cond_max_len {
            return Err(corrupt(format!("record {i} has {len} condition tokens")));
        }
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let t = input.read_u32::<LittleEndian>().map_err(truncated(KIND, &what))?;
            if t as usize >= vocab_size {
                return Err(Error::TokenOutOfVocab { token: t, vocab_size });
            }
            tokens.push(t);
        }
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = input.read_f32::<LittleEndian>().map_err(truncated(KIND, &what))?;
            values.push(T::lit(v as f64));
        }
        let tensor = NoiseTensor::new(c, h, w, values)?;
        d.records.push(Record {
            condition: Condition::new(tokens),
            tensor,
        });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(corrupt("trailing bytes after last record".into()));
    }
    Ok(d)
}

pub fn save<T: Scalar>(d: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(d, BufWriter::new(File::create(path)?))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    read_dataset(BufReader::new(File::open(path)?))
}
