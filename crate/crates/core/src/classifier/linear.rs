//! Multinomial logistic regression on single-pixel features.
//!
//! `PLR1` files: magic, u32 depth, u32 classes, then f64 values: per-band
//! mean, per-band scale, and the `classes x (depth + 1)` weight matrix in
//! row-major order with the bias last.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::net::softmax_columns;
use super::ProbabilityMap;
use crate::data::io::{check_magic, read_file, u32_at, write_file};
use crate::data::FeatureImage;
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"PLR1";

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticConfig {
    pub iterations: usize,
    /// Penalty on the squared weights, bias excluded.
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            iterations: 1000,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `classes x (depth + 1)`, bias in the last column.
    pub weights: DMatrix<f64>,
}

impl LogisticModel {
    pub fn depth(&self) -> usize {
        self.mean.len()
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    fn design(&self, pixels: &[&[f64]]) -> DMatrix<f64> {
        let d = self.depth();
        DMatrix::from_fn(d + 1, pixels.len(), |r, c| {
            if r == d {
                1.0
            } else {
                (pixels[c][r] - self.mean[r]) / self.scale[r]
            }
        })
    }

    /// Probabilities (`classes x n`) for a set of pixels.
    pub fn predict_batch(&self, pixels: &[&[f64]]) -> Result<DMatrix<f64>> {
        if let Some(p) = pixels.iter().find(|p| p.len() != self.depth()) {
            return Err(Error::Shape(format!("pixel has {} bands, model expects {}", p.len(), self.depth())));
        }
        Ok(softmax_columns(&self.weights * self.design(pixels)))
    }

    pub fn predict(&self, pixel: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[pixel])?.as_slice().to_vec())
    }

    pub fn predict_map(&self, img: &FeatureImage) -> Result<ProbabilityMap> {
        if img.depth() != self.depth() {
            return Err(Error::Shape(format!(
                "image has {} bands, model expects {}",
                img.depth(),
                self.depth()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..img.height())
            .into_par_iter()
            .map(|row| {
                let px: Vec<&[f64]> = (0..img.width()).map(|c| img.pixel(row, c)).collect();
                Ok(self.predict_batch(&px)?.as_slice().to_vec())
            })
            .collect::<Result<_>>()?;
        ProbabilityMap::new(img.height(), img.width(), self.classes(), rows.concat())
    }
}

/// Fits by full-batch gradient descent on the mean cross-entropy of
/// standardized features, with step 1/L for the gradient's Lipschitz bound L.
pub fn fit_logistic(pixels: &[&[f64]], labels: &[u16], classes: usize, cfg: &LogisticConfig) -> Result<LogisticModel> {
    if pixels.len() != labels.len() || pixels.is_empty() {
        return Err(Error::Shape(format!("{} pixels, {} labels", pixels.len(), labels.len())));
    }
    if classes < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 classes, got {classes}")));
    }
    for c in 1..=classes as u16 {
        if !labels.contains(&c) {
            return Err(Error::InsufficientLabels(format!("class {c} has no training pixels")));
        }
    }
    if let Some(l) = labels.iter().find(|l| **l == 0 || **l as usize > classes) {
        return Err(Error::InvalidInput(format!("label {l} outside 1..={classes}")));
    }
    let d = pixels[0].len();
    if let Some(p) = pixels.iter().find(|p| p.len() != d) {
        return Err(Error::Shape(format!("pixel has {} bands, expected {d}", p.len())));
    }
    let n = pixels.len() as f64;
    let mean: Vec<f64> = (0..d).map(|b| pixels.iter().map(|p| p[b]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|b| {
            let var = pixels.iter().map(|p| (p[b] - mean[b]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut model = LogisticModel {
        mean,
        scale,
        weights: DMatrix::zeros(classes, d + 1),
    };
    let x = model.design(pixels);
    let mut y = DMatrix::zeros(classes, pixels.len());
    for (j, l) in labels.iter().enumerate() {
        y[(*l as usize - 1, j)] = 1.0;
    }
    // softmax cross-entropy has Hessian bounded by 1/2 * X X^T / n per class block
    let gram = &x * x.transpose() / n;
    let top = gram.symmetric_eigenvalues().max();
    let step = 1.0 / (0.5 * top + cfg.l2);
    let mut penalty = DVector::from_element(d + 1, cfg.l2);
    penalty[d] = 0.0;
    for _ in 0..cfg.iterations {
        let p = softmax_columns(&model.weights * &x);
        let grad = (p - &y) * x.transpose() / n
            + DMatrix::from_fn(classes, d + 1, |r, c| penalty[c] * model.weights[(r, c)]);
        model.weights -= step * grad;
    }
    if model.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("logistic regression diverged".into()));
    }
    Ok(model)
}

pub fn write_logistic(m: &LogisticModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(m.depth() as u32).to_le_bytes());
    out.extend_from_slice(&(m.classes() as u32).to_le_bytes());
    let weights = (0..m.classes()).flat_map(|r| (0..=m.depth()).map(move |c| (r, c)));
    for v in m.mean.iter().chain(&m.scale).copied().chain(weights.map(|rc| m.weights[rc])) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_logistic(bytes: &[u8]) -> Result<LogisticModel> {
    check_magic(bytes, MAGIC)?;
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let d = u32_at(bytes, 4) as usize;
    let c = u32_at(bytes, 8) as usize;
    if d == 0 || c < 2 {
        return Err(Error::Shape(format!("logistic model with {d} bands and {c} classes")));
    }
    let count = d
        .checked_mul(2)
        .and_then(|a| c.checked_mul(d + 1).and_then(|b| a.checked_add(b)))
        .ok_or_else(|| Error::DimensionOverflow("logistic model size".into()))?;
    let need = 12 + 8 * count;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let v: Vec<f64> = bytes[12..need]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(LogisticModel {
        mean: v[..d].to_vec(),
        scale: v[d..2 * d].to_vec(),
        weights: DMatrix::from_row_slice(c, d + 1, &v[2 * d..]),
    })
}

pub fn save_logistic(m: &LogisticModel, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &write_logistic(m))
}

pub fn load_logistic(path: impl AsRef<Path>) -> Result<LogisticModel> {
    read_logistic(&read_file(path.as_ref())?)
}
