//! Per-pixel classifiers producing class probability maps: a small CNN over
//! feature patches and a multinomial logistic regression on single pixels.

mod checkpoint;
mod linear;
mod net;
mod train;

pub use checkpoint::{load_cnn, read_cnn, save_cnn, write_cnn};
pub use linear::{fit_logistic, load_logistic, read_logistic, save_logistic, write_logistic, LogisticConfig, LogisticModel};
pub use net::{BnRunning, Cnn, CnnSpec, Mode, Params, Sides, BN_EPS, BN_MOMENTUM, GROUP_NAMES, PROB_FLOOR};
pub use train::{accuracy, evaluate, split_validation, train, train_on, EpochRecord, Sample, TrainConfig, TrainLog};

use rayon::prelude::*;

use crate::data::{mirror_index, FeatureImage, LabelMap};
use crate::error::{Error, Result};

/// Per-pixel class probabilities, `classes` values per pixel in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 classes, got {classes}")));
        }
        if probs.len() != height * width * classes {
            return Err(Error::Shape(format!(
                "{} probabilities for {height}x{width}x{classes}",
                probs.len()
            )));
        }
        for (p, px) in probs.chunks_exact(classes).enumerate() {
            let sum: f64 = px.iter().sum();
            if px.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "pixel {p} is not a probability distribution (sum {sum})"
                )));
            }
        }
        Ok(ProbabilityMap {
            height,
            width,
            classes,
            probs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.classes;
        &self.probs[start..start + self.classes]
    }

    /// Most probable label per pixel; ties go to the smaller label.
    pub fn argmax(&self) -> LabelMap {
        let labels = self
            .probs
            .chunks_exact(self.classes)
            .map(|px| {
                let mut best = 0;
                for (c, v) in px.iter().enumerate() {
                    if *v > px[best] {
                        best = c;
                    }
                }
                best as u16 + 1
            })
            .collect();
        LabelMap::new(self.height, self.width, self.classes, labels).expect("labels within 1..=classes")
    }

    pub fn to_raster(&self) -> FeatureImage {
        FeatureImage::new(self.height, self.width, self.classes, self.probs.clone()).expect("consistent shape")
    }

    /// Reads probabilities stored as a raster, renormalizing each pixel to
    /// undo single-precision rounding.
    pub fn from_raster(img: &FeatureImage) -> Result<Self> {
        let mut probs = img.data().to_vec();
        for px in probs.chunks_exact_mut(img.depth().max(1)) {
            let sum: f64 = px.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                px.iter_mut().for_each(|v| *v /= sum);
            }
        }
        ProbabilityMap::new(img.height(), img.width(), img.depth(), probs)
    }
}

/// The `side x side` input patch around pixel `(row, col)`, mirrored at the
/// border. Pixels in row-major order, bands innermost; the top-left corner is
/// at `(row - (side-1)/2, col - (side-1)/2)`.
pub fn extract_input(img: &FeatureImage, row: usize, col: usize, side: usize) -> Vec<f64> {
    let off = ((side - 1) / 2) as isize;
    let mut out = Vec::with_capacity(side * side * img.depth());
    for u in 0..side as isize {
        let r = mirror_index(row as isize - off + u, img.height());
        for v in 0..side as isize {
            let c = mirror_index(col as isize - off + v, img.width());
            out.extend_from_slice(img.pixel(r, c));
        }
    }
    out
}

/// The 8 symmetries of the square: identity, three rotations and four
/// reflections, applied to a `side x side` patch with `depth` bands.
pub fn dihedral(patch: &[f64], side: usize, depth: usize, t: usize) -> Vec<f64> {
    let n = side - 1;
    let mut out = vec![0.0; patch.len()];
    for y in 0..side {
        for x in 0..side {
            let (sy, sx) = match t % 8 {
                0 => (y, x),
                1 => (n - x, y),
                2 => (n - y, n - x),
                3 => (x, n - y),
                4 => (y, n - x),
                5 => (n - y, x),
                6 => (x, y),
                _ => (n - x, n - y),
            };
            let dst = (y * side + x) * depth;
            let src = (sy * side + sx) * depth;
            out[dst..dst + depth].copy_from_slice(&patch[src..src + depth]);
        }
    }
    out
}

/// Side of the odd square centred on a pixel that contains its input patch:
/// `side` itself when odd, else `side + 1`.
pub fn context_side(side: usize) -> usize {
    side | 1
}

/// The input patch inside a context square from `extract_input` with side
/// `context_side(side)`.
pub fn crop_input(context: &[f64], side: usize, depth: usize) -> Result<Vec<f64>> {
    let ctx = context_side(side);
    if context.len() != ctx * ctx * depth {
        return Err(Error::Shape(format!(
            "context has {} values, expected {ctx}x{ctx}x{depth}",
            context.len()
        )));
    }
    let start = ctx / 2 - (side - 1) / 2;
    let mut out = Vec::with_capacity(side * side * depth);
    for y in start..start + side {
        out.extend_from_slice(&context[(y * ctx + start) * depth..(y * ctx + start + side) * depth]);
    }
    Ok(out)
}

/// All 8 dihedral copies of an input patch, each with the original label.
/// The symmetries act on the context square around the labelled pixel, so the
/// pixel keeps its place in the patch even when `side` is even.
pub fn augment(context: &[f64], label: u16, side: usize, depth: usize) -> Result<Vec<(Vec<f64>, u16)>> {
    let ctx = context_side(side);
    if context.len() != ctx * ctx * depth {
        return Err(Error::Shape(format!(
            "context has {} values, expected {ctx}x{ctx}x{depth}",
            context.len()
        )));
    }
    (0..8)
        .map(|t| Ok((crop_input(&dihedral(context, ctx, depth, t), side, depth)?, label)))
        .collect()
}

/// Class probabilities for every pixel from the CNN in inference mode.
pub fn predict_map(net: &Cnn, img: &FeatureImage) -> Result<ProbabilityMap> {
    if img.depth() != net.spec.depth {
        return Err(Error::Shape(format!(
            "image has {} bands, network expects {}",
            img.depth(),
            net.spec.depth
        )));
    }
    let side = net.spec.patch;
    let rows: Vec<Vec<f64>> = (0..img.height())
        .into_par_iter()
        .map(|row| {
            let patches: Vec<Vec<f64>> = (0..img.width()).map(|col| extract_input(img, row, col, side)).collect();
            let refs: Vec<&[f64]> = patches.iter().map(|p| p.as_slice()).collect();
            let x = net.pack_inputs(&refs)?;
            let probs = net.forward(&x, Mode::Eval)?;
            Ok(probs.as_slice().to_vec())
        })
        .collect::<Result<_>>()?;
    ProbabilityMap::new(img.height(), img.width(), net.spec.classes, rows.concat())
}
