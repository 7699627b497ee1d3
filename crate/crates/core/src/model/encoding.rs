//! Fourier positional features and token construction.

use std::f64::consts::PI;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `k` frequencies spaced linearly over `[1, max_freq/2]`.
pub fn frequency_bands(k: usize, max_freq: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("need at least one frequency band".into()));
    }
    if !(max_freq >= 2.0) {
        return Err(Error::Config(format!("max_freq {max_freq} must be >= 2")));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let hi = max_freq / 2.0;
    let step = (hi - 1.0) / (k - 1) as f64;
    Ok((0..k)
        .map(|i| if i == k - 1 { hi } else { 1.0 + step * i as f64 })
        .collect())
}

/// `[sin(π s₁ p), cos(π s₁ p), …, sin(π s_K p), cos(π s_K p), p]`.
pub fn fourier_encode(p: f64, bands: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands.len() + 1);
    for &s in bands {
        let (sin, cos) = (PI * s * p).sin_cos();
        out.push(sin);
        out.push(cos);
    }
    out.push(p);
    out
}

/// `L` evenly spaced positions spanning `[-1, 1]` inclusive.
pub fn positions(len: usize) -> Vec<f64> {
    match len {
        0 => Vec::new(),
        1 => vec![-1.0],
        _ => (0..len)
            .map(|t| {
                if t == len - 1 {
                    1.0
                } else {
                    -1.0 + 2.0 * t as f64 / (len - 1) as f64
                }
            })
            .collect(),
    }
}

/// Positional feature block of shape `L × (2K+1)`.
pub fn positional_features<T: Real>(cfg: &ModelConfig) -> Result<Tensor<T>> {
    let bands = frequency_bands(cfg.num_freq_bands, cfg.max_freq)?;
    let width = 2 * bands.len() + 1;
    let data = positions(cfg.seq_len)
        .into_iter()
        .flat_map(|p| fourier_encode(p, &bands))
        .map(T::of)
        .collect();
    Tensor::new([cfg.seq_len, width], data)
}

/// `N × C'` token matrix, `C' = C + 2K + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix<T> {
    pub values: Tensor<T>,
}

impl<T: Real> TokenMatrix<T> {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.values.last_dim()
    }
}

/// Appends the positional features to every time step of `x` (`L × C`).
pub fn tokenize<T: Real>(x: &Tensor<T>, cfg: &ModelConfig) -> Result<TokenMatrix<T>> {
    let pos = positional_features::<T>(cfg)?;
    tokenize_with(x, &pos, cfg)
}

pub(crate) fn tokenize_with<T: Real>(x: &Tensor<T>, pos: &Tensor<T>, cfg: &ModelConfig) -> Result<TokenMatrix<T>> {
    if x.shape() != [cfg.seq_len, cfg.input_channels] {
        return Err(Error::shape("tokenize", x.shape(), &[cfg.seq_len, cfg.input_channels]));
    }
    let c = cfg.input_channels;
    let w = pos.last_dim();
    let mut data = Vec::with_capacity(cfg.seq_len * (c + w));
    for t in 0..cfg.seq_len {
        data.extend_from_slice(x.row(t));
        data.extend_from_slice(pos.row(t));
    }
    Ok(TokenMatrix {
        values: Tensor::new([cfg.seq_len, c + w], data)?,
    })
}
