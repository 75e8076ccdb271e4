//! Diagonal-Gaussian likelihood kernel for patch-sized vectors.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseRng;
use crate::Scalar;

/// Per-element means and log-variances predicted for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<T> {
    pub mean: Array1<T>,
    pub log_var: Array1<T>,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn new(mean: Array1<T>, log_var: Array1<T>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::Shape(format!(
                "mean has {} elements, log-variance {}",
                mean.len(),
                log_var.len()
            )));
        }
        Ok(Self { mean, log_var })
    }

    /// Zero mean, unit variance.
    pub fn standard(k: usize) -> Self {
        Self {
            mean: Array1::zeros(k),
            log_var: Array1::zeros(k),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Stochastic,
    /// Returns the mean vector; the mode of the factorized Gaussian.
    Deterministic,
}

impl std::fmt::Display for SampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SampleMode::Stochastic => "stochastic",
            SampleMode::Deterministic => "deterministic",
        })
    }
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Self::Stochastic),
            "deterministic" => Ok(Self::Deterministic),
            other => Err(Error::Input(format!("unknown sample mode `{other}`"))),
        }
    }
}

/// `½·ln(2π)`
pub fn half_ln_2pi<T: Scalar>() -> T {
    T::lit(0.5) * (T::lit(2.0) * T::PI()).ln()
}

pub fn logpdf_element<T: Scalar>(x: T, mean: T, log_var: T) -> T {
    let half = T::lit(0.5);
    let r = x - mean;
    -half_ln_2pi::<T>() - half * log_var - r * r / (T::lit(2.0) * log_var.exp())
}

pub fn patch_logprob<T: Scalar>(patch: ArrayView1<'_, T>, params: &GaussianParams<T>) -> Result<T> {
    if patch.len() != params.mean.len() || patch.len() != params.log_var.len() {
        return Err(Error::Shape(format!(
            "patch has {} elements, params cover {}",
            patch.len(),
            params.mean.len()
        )));
    }
    Ok(patch
        .iter()
        .zip(params.mean.iter().zip(params.log_var.iter()))
        .fold(T::zero(), |acc, (&x, (&m, &v))| acc + logpdf_element(x, m, v)))
}

/// Derivatives of `−logpdf_element` with respect to `(mean, log_var)`.
pub fn nll_grads<T: Scalar>(x: T, mean: T, log_var: T) -> (T, T) {
    let inv_var = (-log_var).exp();
    let r = x - mean;
    (
        (mean - x) * inv_var,
        T::lit(0.5) * (T::one() - r * r * inv_var),
    )
}

/// Draws one patch: `mean + temperature·exp(½·log_var)·ε`, or `mean`
/// exactly in deterministic mode.
pub fn sample_patch<T: Scalar>(
    params: &GaussianParams<T>,
    rng: &mut NoiseRng,
    mode: SampleMode,
    temperature: f64,
) -> Result<Array1<T>> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Input(format!(
            "temperature must be finite and non-negative, got {temperature}"
        )));
    }
    match mode {
        SampleMode::Deterministic => Ok(params.mean.clone()),
        SampleMode::Stochastic => {
            let t = T::lit(temperature);
            let half = T::lit(0.5);
            Ok(params
                .mean
                .iter()
                .zip(params.log_var.iter())
                .map(|(&m, &v)| {
                    let eps: T = rng.normal();
                    m + t * (half * v).exp() * eps
                })
                .collect())
        }
    }
}
