//! Seeded synthetic PolSAR-like scenes: a Voronoi partition into class regions,
//! one low-rank signature per class, and additive mixture-of-Gaussians noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{FeatureImage, LabelMap, COHERENCY_DIMS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MogComponent {
    pub weight: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Dimension of the subspace holding every class signature.
    pub rank: usize,
    pub noise: Vec<MogComponent>,
    /// Expected side length of a region, in pixels.
    pub granularity: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// The 128x128 benchmark scene: rank-2 signatures and 90/10 MoG noise with
    /// sigma 0.01 / 0.3.
    pub fn standard(seed: u64) -> Self {
        SynthConfig {
            height: 128,
            width: 128,
            num_classes: 5,
            rank: 2,
            noise: vec![
                MogComponent {
                    weight: 0.9,
                    sigma: 0.01,
                },
                MogComponent {
                    weight: 0.1,
                    sigma: 0.3,
                },
            ],
            granularity: 32.0,
            seed,
        }
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise.iter().map(|c| c.weight * c.sigma * c.sigma).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height == 0 || self.width == 0 {
            return bad("scene must be at least 1x1".into());
        }
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize {
            return bad(format!("class count {} out of range", self.num_classes));
        }
        if !(1..=COHERENCY_DIMS).contains(&self.rank) {
            return bad(format!("signature rank {} not in 1..=9", self.rank));
        }
        if self.noise.is_empty() {
            return bad("noise mixture needs at least one component".into());
        }
        if self.noise.iter().any(|c| !(c.weight > 0.0) || !(c.sigma > 0.0)) {
            return bad("noise weights and sigmas must be positive".into());
        }
        let total: f64 = self.noise.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("noise weights sum to {total}, expected 1"));
        }
        if !(self.granularity >= 1.0) {
            return bad(format!("granularity {} must be >= 1", self.granularity));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub clean: FeatureImage,
    pub noisy: FeatureImage,
    pub truth: LabelMap,
    /// Orthonormal-free basis of the signature subspace, `rank` vectors of length 9.
    pub basis: Vec<[f64; COHERENCY_DIMS]>,
    /// One signature per class, index `c - 1` for label `c`.
    pub signatures: Vec<[f64; COHERENCY_DIMS]>,
}

/// Spreads class coefficient vectors with best-candidate sampling so that no
/// two classes share a signature.
fn class_coefficients(rng: &mut ChaCha8Rng, classes: usize, rank: usize) -> Vec<Vec<f64>> {
    let coef = Uniform::new(0.2, 1.0).unwrap();
    let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..32 {
            let cand: Vec<f64> = (0..rank).map(|_| coef.sample(rng)).collect();
            let gap = chosen
                .iter()
                .map(|c| c.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|(g, _)| gap > *g) {
                best = Some((gap, cand));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w, d) = (cfg.height, cfg.width, COHERENCY_DIMS);

    let anchor = Uniform::new(0.1, 0.9).unwrap();
    let basis: Vec<[f64; COHERENCY_DIMS]> = (0..cfg.rank)
        .map(|_| std::array::from_fn(|_| anchor.sample(&mut rng)))
        .collect();
    let signatures: Vec<[f64; COHERENCY_DIMS]> =
        class_coefficients(&mut rng, cfg.num_classes, cfg.rank)
            .into_iter()
            .map(|c| {
                std::array::from_fn(|b| {
                    c.iter().zip(&basis).map(|(a, v)| a * v[b]).sum::<f64>() / cfg.rank as f64
                })
            })
            .collect();

    let area = (h * w) as f64;
    let n_sites = ((area / (cfg.granularity * cfg.granularity)).round() as usize)
        .max(cfg.num_classes)
        .min(h * w);
    let sites: Vec<(f64, f64, u16)> = (0..n_sites)
        .map(|s| {
            let r = rng.random_range(0.0..h as f64);
            let c = rng.random_range(0.0..w as f64);
            let class = if s < cfg.num_classes {
                s + 1
            } else {
                rng.random_range(1..=cfg.num_classes)
            };
            (r, c, class as u16)
        })
        .collect();

    let mut labels = Vec::with_capacity(h * w);
    let mut clean = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u16);
            for &(sr, sc, class) in &sites {
                let dist = (sr - pr).powi(2) + (sc - pc).powi(2);
                if dist < best.0 {
                    best = (dist, class);
                }
            }
            labels.push(best.1);
            clean.extend_from_slice(&signatures[best.1 as usize - 1]);
        }
    }

    let normals: Vec<Normal<f64>> = cfg
        .noise
        .iter()
        .map(|m| Normal::new(0.0, m.sigma).unwrap())
        .collect();
    let cumulative: Vec<f64> = cfg
        .noise
        .iter()
        .scan(0.0, |acc, m| {
            *acc += m.weight;
            Some(*acc)
        })
        .collect();
    let noisy = clean
        .iter()
        .map(|v| {
            let u: f64 = rng.random();
            let k = cumulative
                .iter()
                .position(|c| u < *c)
                .unwrap_or(cumulative.len() - 1);
            v + normals[k].sample(&mut rng)
        })
        .collect();

    Ok(SynthScene {
        clean: FeatureImage::new(h, w, d, clean)?,
        noisy: FeatureImage::new(h, w, d, noisy)?,
        truth: LabelMap::new(h, w, cfg.num_classes, labels)?,
        basis,
        signatures,
    })
}
