//! Sliding-window neighbourhood extraction and per-pixel low-rank denoising.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::{mirror_index, FeatureImage};
use crate::error::{Error, Result};
use crate::rlrmf::{mog_em_fit, EmConfig, EmFit};

/// A pixel's s x s neighbourhood as a d x s^2 matrix, columns in row-major
/// window order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub data: DMatrix<f64>,
    pub window: usize,
    pub origin: (usize, usize),
}

impl PatchMatrix {
    pub fn center_index(&self) -> usize {
        (self.window * self.window - 1) / 2
    }
}

/// Extracts the `window x window` neighbourhood of pixel `(row, col)`.
/// Out-of-image positions are filled by mirror reflection about the border.
pub fn extract_patch(img: &FeatureImage, row: usize, col: usize, window: usize) -> Result<PatchMatrix> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidConfig(format!("window size {window} must be odd")));
    }
    if row >= img.height() || col >= img.width() {
        return Err(Error::InvalidInput(format!(
            "pixel ({row}, {col}) outside {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let half = (window / 2) as isize;
    let d = img.depth();
    let mut data = DMatrix::zeros(d, window * window);
    for du in -half..=half {
        let r = mirror_index(row as isize + du, img.height());
        for dv in -half..=half {
            let c = mirror_index(col as isize + dv, img.width());
            let column = ((du + half) as usize) * window + (dv + half) as usize;
            for (b, v) in img.pixel(r, c).iter().enumerate() {
                data[(b, column)] = *v;
            }
        }
    }
    Ok(PatchMatrix {
        data,
        window,
        origin: (row, col),
    })
}

/// How per-patch reconstructions are turned into one value per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Mean of every in-image window position covering the pixel.
    #[default]
    Average,
    /// Only the centre column of the pixel's own window.
    Center,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Aggregation::Average),
            "center" => Ok(Aggregation::Center),
            other => Err(Error::InvalidConfig(format!("unknown aggregation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    pub window: usize,
    pub aggregation: Aggregation,
    pub em: EmConfig,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            window: 7,
            aggregation: Aggregation::Average,
            em: EmConfig::default(),
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "window size {} must be odd",
                self.window
            )));
        }
        let cols = self.window * self.window;
        if self.em.rank == 0 || self.em.rank >= depth.min(cols) {
            return Err(Error::InvalidConfig(format!(
                "rank {} must be below min(depth {depth}, window^2 {cols})",
                self.em.rank
            )));
        }
        self.em.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Denoised {
    pub image: FeatureImage,
    /// Pixels whose fit failed and were copied through unchanged.
    pub fallbacks: usize,
}

/// splitmix64 finalizer, used to derive independent per-pixel seeds.
pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the robust factorization on one pixel's neighbourhood.
pub fn fit_pixel(img: &FeatureImage, row: usize, col: usize, cfg: &DenoiseConfig) -> Result<EmFit> {
    let patch = extract_patch(img, row, col, cfg.window)?;
    let em = EmConfig {
        seed: mix_seed(cfg.em.seed, (row * img.width() + col) as u64),
        ..cfg.em.clone()
    };
    mog_em_fit(&patch.data, &em)
}

/// Low-rank reconstruction of one pixel's window, or the raw window when the
/// fit fails or produces non-finite values. The flag marks a fallback.
fn reconstruct_window(img: &FeatureImage, row: usize, col: usize, cfg: &DenoiseConfig) -> (DMatrix<f64>, bool) {
    let fit = fit_pixel(img, row, col, cfg).map(|f| f.factors.reconstruct());
    match fit {
        Ok(m) if m.iter().all(|v| v.is_finite()) => (m, false),
        Ok(_) => {
            log::debug!("denoise fallback at ({row}, {col}): non-finite reconstruction");
            (raw_window(img, row, col, cfg.window), true)
        }
        Err(e) => {
            log::debug!("denoise fallback at ({row}, {col}): {e}");
            (raw_window(img, row, col, cfg.window), true)
        }
    }
}

fn raw_window(img: &FeatureImage, row: usize, col: usize, window: usize) -> DMatrix<f64> {
    extract_patch(img, row, col, window)
        .expect("pixel and window already validated")
        .data
}

/// Denoises every pixel from the low-rank reconstructions of the windows
/// around it. Windows are fitted in parallel and combined in a fixed order,
/// so the result does not depend on scheduling.
pub fn denoise_image(img: &FeatureImage, cfg: &DenoiseConfig) -> Result<Denoised> {
    cfg.validate(img.depth())?;
    let (h, w, d) = (img.height(), img.width(), img.depth());
    let s = cfg.window;
    let half = s / 2;
    let center = (s * s - 1) / 2;
    let mut sum = vec![0.0; h * w * d];
    let mut count = vec![0usize; h * w];
    let mut fallbacks = 0;
    // bounds the memory held by reconstructions awaiting aggregation
    const ROWS_PER_CHUNK: usize = 8;
    for start in (0..h).step_by(ROWS_PER_CHUNK) {
        let end = (start + ROWS_PER_CHUNK).min(h);
        let windows: Vec<(DMatrix<f64>, bool)> = (start * w..end * w)
            .into_par_iter()
            .map(|idx| reconstruct_window(img, idx / w, idx % w, cfg))
            .collect();
        for (offset, (m, failed)) in windows.into_iter().enumerate() {
            let idx = start * w + offset;
            let (row, col) = (idx / w, idx % w);
            fallbacks += failed as usize;
            let mut add = |r: usize, c: usize, column: usize| {
                let p = r * w + c;
                for (acc, v) in sum[p * d..(p + 1) * d].iter_mut().zip(m.column(column).iter()) {
                    *acc += v;
                }
                count[p] += 1;
            };
            match cfg.aggregation {
                Aggregation::Center => add(row, col, center),
                Aggregation::Average => {
                    for u in 0..s {
                        let Some(r) = (row + u).checked_sub(half).filter(|r| *r < h) else {
                            continue;
                        };
                        for v in 0..s {
                            if let Some(c) = (col + v).checked_sub(half).filter(|c| *c < w) {
                                add(r, c, u * s + v);
                            }
                        }
                    }
                }
            }
        }
    }
    for (p, n) in count.iter().enumerate() {
        let scale = 1.0 / *n as f64;
        sum[p * d..(p + 1) * d].iter_mut().for_each(|v| *v *= scale);
    }
    Ok(Denoised {
        image: FeatureImage::new(h, w, d, sum)?,
        fallbacks,
    })
}
