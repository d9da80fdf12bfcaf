//! Label refinement: a Potts MRF on the 4-connected grid with contrast
//! sensitive edge weights, minimized by damped min-sum belief propagation.

use crate::classifier::ProbabilityMap;
use crate::data::{FeatureImage, LabelMap};
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

/// Unary costs and edge weights of a grid MRF. The pairwise cost of edge
/// `(i, j)` is `alpha * weight * 1{y_i != y_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MrfModel {
    height: usize,
    width: usize,
    classes: usize,
    /// `classes` costs per pixel in raster order.
    unary: Vec<f64>,
    /// Edge `(r, c)-(r, c+1)` at `r * (width - 1) + c`.
    horizontal: Vec<f64>,
    /// Edge `(r, c)-(r+1, c)` at `r * width + c`.
    vertical: Vec<f64>,
    alpha: f64,
}

impl MrfModel {
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        unary: Vec<f64>,
        horizontal: Vec<f64>,
        vertical: Vec<f64>,
        alpha: f64,
    ) -> Result<Self> {
        if height == 0 || width == 0 || classes < 2 {
            return Err(Error::Shape(format!("MRF of {height}x{width} with {classes} classes")));
        }
        if unary.len() != height * width * classes
            || horizontal.len() != height * (width - 1)
            || vertical.len() != (height - 1) * width
        {
            return Err(Error::Shape("MRF term counts do not match the grid".into()));
        }
        if unary.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite unary cost".into()));
        }
        if horizontal.iter().chain(&vertical).any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return Err(Error::InvalidInput("edge weights must lie in (0, 1]".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("smoothness factor {alpha} must be finite and >= 0")));
        }
        Ok(MrfModel {
            height,
            width,
            classes,
            unary,
            horizontal,
            vertical,
            alpha,
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

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn unary(&self, pixel: usize) -> &[f64] {
        &self.unary[pixel * self.classes..(pixel + 1) * self.classes]
    }

    pub fn horizontal(&self) -> &[f64] {
        &self.horizontal
    }

    pub fn vertical(&self) -> &[f64] {
        &self.vertical
    }

    /// Every undirected edge once, as `(pixel, neighbour, weight)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.width;
        let h = (0..self.height)
            .flat_map(move |r| (0..w - 1).map(move |c| (r * w + c, r * w + c + 1, self.horizontal[r * (w - 1) + c])));
        let v = (0..self.height - 1)
            .flat_map(move |r| (0..w).map(move |c| (r * w + c, (r + 1) * w + c, self.vertical[r * w + c])));
        h.chain(v)
    }

    /// Labels minimizing the unary cost alone; ties go to the smaller label.
    pub fn unary_argmin(&self) -> LabelMap {
        let labels = self.unary.chunks_exact(self.classes).map(|u| argmin(u) as u16 + 1).collect();
        LabelMap::new(self.height, self.width, self.classes, labels).expect("labels within range")
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Unary costs `-ln max(P, 1e-12)` and weights `exp(-|z_i - z_j|^2 / (2 sigma))`
/// with `sigma` the mean squared feature distance over all 4-neighbour edges.
/// A constant feature image (`sigma = 0`) gets weight 1 on every edge.
pub fn build_model(p: &ProbabilityMap, z: &FeatureImage, alpha: f64) -> Result<MrfModel> {
    let (h, w) = (p.height(), p.width());
    if z.height() != h || z.width() != w {
        return Err(Error::Shape(format!(
            "probabilities are {h}x{w}, features {}x{}",
            z.height(),
            z.width()
        )));
    }
    let unary = p.probs().iter().map(|v| -v.max(PROB_FLOOR).ln()).collect();
    let dist2 = |a: usize, b: usize| -> f64 {
        let (ra, ca, rb, cb) = (a / w, a % w, b / w, b % w);
        z.pixel(ra, ca).iter().zip(z.pixel(rb, cb)).map(|(x, y)| (x - y).powi(2)).sum()
    };
    let horizontal: Vec<f64> = (0..h)
        .flat_map(|r| (0..w - 1).map(move |c| (r * w + c, r * w + c + 1)))
        .map(|(a, b)| dist2(a, b))
        .collect();
    let vertical: Vec<f64> = (0..h.saturating_sub(1))
        .flat_map(|r| (0..w).map(move |c| (r * w + c, (r + 1) * w + c)))
        .map(|(a, b)| dist2(a, b))
        .collect();
    let n_edges = horizontal.len() + vertical.len();
    let sigma = horizontal.iter().chain(&vertical).sum::<f64>() / n_edges.max(1) as f64;
    let weight = |d2: f64| {
        if sigma > 0.0 {
            (-d2 / (2.0 * sigma)).exp().max(f64::MIN_POSITIVE)
        } else {
            1.0
        }
    };
    MrfModel::new(
        h,
        w,
        p.classes(),
        unary,
        horizontal.into_iter().map(weight).collect(),
        vertical.into_iter().map(weight).collect(),
        alpha,
    )
}

/// Unary plus pairwise cost of a complete labelling, each edge counted once.
pub fn energy(m: &MrfModel, labels: &LabelMap) -> Result<f64> {
    if labels.height() != m.height || labels.width() != m.width {
        return Err(Error::Shape(format!(
            "labels are {}x{}, model {}x{}",
            labels.height(),
            labels.width(),
            m.height,
            m.width
        )));
    }
    let l = labels.labels();
    if let Some(p) = l.iter().position(|v| *v == 0 || *v as usize > m.classes) {
        return Err(Error::InvalidInput(format!("pixel {p} has label {} outside 1..={}", l[p], m.classes)));
    }
    Ok(energy_of(m, l))
}

fn energy_of(m: &MrfModel, l: &[u16]) -> f64 {
    let unary: f64 = l.iter().enumerate().map(|(p, y)| m.unary(p)[*y as usize - 1]).sum();
    let pairwise: f64 = m.edges().filter(|(a, b, _)| l[*a] != l[*b]).map(|(_, _, w)| w).sum();
    unary + m.alpha * pairwise
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpConfig {
    pub iterations: usize,
    /// Weight of the previous message in each update.
    pub damping: f64,
    /// Shift every message to minimum zero after each update.
    pub normalize: bool,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig {
            iterations: 50,
            damping: 0.5,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpResult {
    pub labels: LabelMap,
    pub energy: f64,
    /// Iteration that produced the returned labelling, 0 for the unary argmin.
    pub best_iteration: usize,
}

// directions a message arrives from
const FROM_LEFT: usize = 0;
const FROM_RIGHT: usize = 1;
const FROM_UP: usize = 2;
const FROM_DOWN: usize = 3;

/// Synchronous damped min-sum belief propagation. Every iteration's belief
/// argmin is scored and the lowest-energy labelling seen is returned; the
/// unary argmin is the starting candidate, so the result never scores worse.
pub fn min_sum_bp(m: &MrfModel, cfg: &BpConfig) -> Result<BpResult> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidConfig("belief propagation needs at least one iteration".into()));
    }
    if !(0.0..1.0).contains(&cfg.damping) {
        return Err(Error::InvalidConfig(format!("damping {} outside [0, 1)", cfg.damping)));
    }
    let (h, w, c) = (m.height, m.width, m.classes);
    let n = h * w;
    let mut msgs = vec![vec![0.0; n * c]; 4];
    let mut next = msgs.clone();
    let mut best_labels: Vec<u16> = m.unary_argmin().labels().to_vec();
    let mut best_energy = energy_of(m, &best_labels);
    let mut best_iteration = 0;
    let mut hbuf = vec![0.0; c];
    let mut labels = vec![0u16; n];
    for it in 1..=cfg.iterations {
        for p in 0..n {
            let (r, col) = (p / w, p % w);
            // (target pixel, slot at the target, slot at p holding the target's message to p, edge weight)
            let targets = [
                (col + 1 < w).then(|| (p + 1, FROM_LEFT, FROM_RIGHT, m.horizontal[r * (w - 1) + col])),
                (col > 0).then(|| (p - 1, FROM_RIGHT, FROM_LEFT, m.horizontal[r * (w - 1) + col - 1])),
                (r + 1 < h).then(|| (p + w, FROM_UP, FROM_DOWN, m.vertical[r * w + col])),
                (r > 0).then(|| (p - w, FROM_DOWN, FROM_UP, m.vertical[(r - 1) * w + col])),
            ];
            for (q, slot, exclude, weight) in targets.into_iter().flatten() {
                for (k, hk) in hbuf.iter_mut().enumerate() {
                    let mut v = m.unary[p * c + k];
                    for d in [FROM_LEFT, FROM_RIGHT, FROM_UP, FROM_DOWN] {
                        if d != exclude {
                            v += msgs[d][p * c + k];
                        }
                    }
                    *hk = v;
                }
                // Potts: keep the label, or switch from the cheapest one at a fixed cost
                let floor = hbuf.iter().copied().fold(f64::INFINITY, f64::min) + m.alpha * weight;
                let out = &mut next[slot][q * c..(q + 1) * c];
                let old = &msgs[slot][q * c..(q + 1) * c];
                for k in 0..c {
                    out[k] = (1.0 - cfg.damping) * hbuf[k].min(floor) + cfg.damping * old[k];
                }
                if cfg.normalize {
                    let min = out.iter().copied().fold(f64::INFINITY, f64::min);
                    out.iter_mut().for_each(|v| *v -= min);
                }
            }
        }
        std::mem::swap(&mut msgs, &mut next);
        for (p, label) in labels.iter_mut().enumerate() {
            for (k, hk) in hbuf.iter_mut().enumerate() {
                *hk = m.unary[p * c + k] + (0..4).map(|d| msgs[d][p * c + k]).sum::<f64>();
            }
            *label = argmin(&hbuf) as u16 + 1;
        }
        let e = energy_of(m, &labels);
        if !e.is_finite() {
            return Err(Error::Numerical(format!("non-finite energy in iteration {it}")));
        }
        if e < best_energy {
            best_energy = e;
            best_labels.copy_from_slice(&labels);
            best_iteration = it;
        }
    }
    Ok(BpResult {
        labels: LabelMap::new(h, w, c, best_labels)?,
        energy: best_energy,
        best_iteration,
    })
}

/// Exhaustive minimum over all labellings, for instances with at most 2^20
/// of them. Ties resolve to the first labelling in lexicographic order.
pub fn brute_force_min(m: &MrfModel) -> Result<(LabelMap, f64)> {
    let n = m.height * m.width;
    let states = (m.classes as f64).powi(n as i32);
    if states > (1u64 << 20) as f64 {
        return Err(Error::TooLarge(states));
    }
    let mut labels = vec![1u16; n];
    let mut best = labels.clone();
    let mut best_energy = energy_of(m, &labels);
    loop {
        // odometer increment, last pixel fastest
        let mut p = n;
        loop {
            if p == 0 {
                return Ok((LabelMap::new(m.height, m.width, m.classes, best)?, best_energy));
            }
            p -= 1;
            if (labels[p] as usize) < m.classes {
                labels[p] += 1;
                break;
            }
            labels[p] = 1;
        }
        let e = energy_of(m, &labels);
        if e < best_energy {
            best_energy = e;
            best.copy_from_slice(&labels);
        }
    }
}
