//! Raster data model: coherency pixels, feature images and label maps.

pub(crate) mod io;
mod synth;

pub use io::{load_labels, load_raster, read_labels, read_raster, render_ppm, save_labels,
    save_raster, write_labels, write_raster, PALETTE};
pub use synth::{synth_generate, MogComponent, SynthConfig, SynthScene};

use nalgebra::Complex;

use crate::error::{Error, Result};

/// Number of real features obtained from one coherency matrix.
pub const COHERENCY_DIMS: usize = 9;

/// One pixel's 3x3 Hermitian coherency matrix, off-diagonal terms stored once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherencyPixel {
    pub t11: f64,
    pub t22: f64,
    pub t33: f64,
    pub t12: Complex<f64>,
    pub t13: Complex<f64>,
    pub t23: Complex<f64>,
}

impl CoherencyPixel {
    pub fn new(
        t11: f64,
        t22: f64,
        t33: f64,
        t12: Complex<f64>,
        t13: Complex<f64>,
        t23: Complex<f64>,
    ) -> Result<Self> {
        let p = CoherencyPixel {
            t11,
            t22,
            t33,
            t12,
            t13,
            t23,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let diag = [self.t11, self.t22, self.t33];
        if diag.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "coherency diagonal must be finite and non-negative, got {diag:?}"
            )));
        }
        Ok(())
    }

    /// Rebuilds the pixel from its 9-vector, the inverse of [`vectorize_coherency`].
    pub fn from_vector(v: &[f64; COHERENCY_DIMS]) -> Result<Self> {
        Self::new(
            v[0],
            v[1],
            v[2],
            Complex::new(v[3], v[4]),
            Complex::new(v[5], v[6]),
            Complex::new(v[7], v[8]),
        )
    }

    /// Full Hermitian matrix, with `T[j][i] = conj(T[i][j])`.
    pub fn matrix(&self) -> [[Complex<f64>; 3]; 3] {
        let re = |x: f64| Complex::new(x, 0.0);
        [
            [re(self.t11), self.t12, self.t13],
            [self.t12.conj(), re(self.t22), self.t23],
            [self.t13.conj(), self.t23.conj(), re(self.t33)],
        ]
    }
}

/// `[T11, T22, T33, Re T12, Im T12, Re T13, Im T13, Re T23, Im T23]`.
pub fn vectorize_coherency(p: &CoherencyPixel) -> [f64; COHERENCY_DIMS] {
    [
        p.t11, p.t22, p.t33, p.t12.re, p.t12.im, p.t13.re, p.t13.im, p.t23.re, p.t23.im,
    ]
}

/// Pauli amplitudes `(sqrt T11, sqrt T22, sqrt T33)` used as edge features by the MRF.
pub fn pauli_edge_features(p: &CoherencyPixel) -> Result<[f64; 3]> {
    p.validate()?;
    Ok([p.t11.sqrt(), p.t22.sqrt(), p.t33.sqrt()])
}

/// H x W x D raster of real features, stored band-interleaved by pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl FeatureImage {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{depth}"
            )));
        }
        let len = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(depth))
            .ok_or_else(|| Error::DimensionOverflow(format!("{height}x{width}x{depth}")))?;
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match {height}x{width}x{depth}",
                data.len()
            )));
        }
        Ok(FeatureImage {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Result<Self> {
        Self::new(height, width, depth, vec![0.0; height * width * depth])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len_pixels(&self) -> usize {
        self.height * self.width
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

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.depth;
        &self.data[start..start + self.depth]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.depth;
        &mut self.data[start..start + self.depth]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(row * self.width + col) * self.depth + band]
    }

    /// Copies the selected bands into a new image.
    pub fn select_bands(&self, bands: &[usize]) -> Result<FeatureImage> {
        if let Some(b) = bands.iter().find(|b| **b >= self.depth) {
            return Err(Error::Shape(format!(
                "band {b} out of range for depth {}",
                self.depth
            )));
        }
        let data = self
            .data
            .chunks_exact(self.depth)
            .flat_map(|px| bands.iter().map(move |b| px[*b]))
            .collect();
        FeatureImage::new(self.height, self.width, bands.len(), data)
    }
}

/// Per-band affine range recorded by [`normalize_bands`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandRange {
    pub min: f64,
    pub max: f64,
}

/// Maps every band affinely onto [0, 1] using whole-image min/max. Constant
/// bands map to zero.
pub fn normalize_bands(img: &FeatureImage) -> (FeatureImage, Vec<BandRange>) {
    let d = img.depth;
    let mut ranges = vec![
        BandRange {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        };
        d
    ];
    for px in img.data.chunks_exact(d) {
        for (r, v) in ranges.iter_mut().zip(px) {
            r.min = r.min.min(*v);
            r.max = r.max.max(*v);
        }
    }
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(d) {
        for (v, r) in px.iter_mut().zip(&ranges) {
            let span = r.max - r.min;
            *v = if span > 0.0 {
                ((*v - r.min) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    (out, ranges)
}

/// Inverse of [`normalize_bands`].
pub fn denormalize_bands(img: &FeatureImage, ranges: &[BandRange]) -> Result<FeatureImage> {
    if ranges.len() != img.depth {
        return Err(Error::Shape(format!(
            "{} band ranges for an image of depth {}",
            ranges.len(),
            img.depth
        )));
    }
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(img.depth) {
        for (v, r) in px.iter_mut().zip(ranges) {
            *v = r.min + *v * (r.max - r.min);
        }
    }
    Ok(out)
}

/// Three-band Pauli amplitude image from a 9-band coherency feature image.
/// Negative diagonal powers (possible after additive noise) are clamped to zero.
pub fn pauli_image(img: &FeatureImage) -> Result<FeatureImage> {
    if img.depth != COHERENCY_DIMS {
        return Err(Error::Shape(format!(
            "pauli features need a {COHERENCY_DIMS}-band image, got {}",
            img.depth
        )));
    }
    let data = img
        .data
        .chunks_exact(COHERENCY_DIMS)
        .flat_map(|px| (0..3).map(move |b| px[b].max(0.0).sqrt()))
        .collect();
    FeatureImage::new(img.height, img.width, 3, data)
}

/// H x W class labels; 0 marks a pixel without ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "label map dimensions must be positive, got {height}x{width}"
            )));
        }
        if num_classes > u16::MAX as usize {
            return Err(Error::DimensionOverflow(format!("{num_classes} classes")));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l as usize > num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} exceeds class count {num_classes}"
            )));
        }
        Ok(LabelMap {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Number of 4-neighbour pairs whose labels differ.
    pub fn discontinuities(&self) -> usize {
        let mut n = 0;
        for r in 0..self.height {
            for c in 0..self.width {
                let l = self.get(r, c);
                if c + 1 < self.width && self.get(r, c + 1) != l {
                    n += 1;
                }
                if r + 1 < self.height && self.get(r + 1, c) != l {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Reflects an index about the borders of `[0, n)` without repeating the edge
/// sample, so `-1 -> 1` and `n -> n - 2`.
#[inline]
pub fn mirror_index(idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = idx.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
