use std::fmt::Write as _;

use nalgebra::DMatrix;

use super::{
    e_step, loglik, m_step_mog, residuals, truncated_svd_factors, weighted_lrmf, weights_from,
    FactorPair, MoGModel, DEFAULT_RIDGE,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub rank: usize,
    pub k_init: usize,
    pub max_iter: usize,
    /// Stop once the largest entry change of `U` between iterations drops below this.
    pub u_tol: f64,
    pub inner_als_iters: usize,
    pub sigma2_floor: f64,
    pub prune_threshold: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            rank: 2,
            k_init: 4,
            max_iter: 100,
            u_tol: 0.01,
            inner_als_iters: 2,
            sigma2_floor: 1e-8,
            prune_threshold: 0.02,
            ridge: DEFAULT_RIDGE,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if self.k_init == 0 {
            return bad("k_init must be at least 1");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if self.inner_als_iters == 0 {
            return bad("inner_als_iters must be at least 1");
        }
        if !(self.u_tol > 0.0) || !(self.sigma2_floor > 0.0) || !(self.ridge > 0.0) {
            return bad("tolerances, variance floor and ridge must be positive");
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return bad("prune_threshold must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One EM iteration: the likelihood of the model it started from, the
/// likelihood after the update, and the component count during the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmStep {
    pub iteration: usize,
    pub loglik_start: f64,
    pub loglik: f64,
    pub k: usize,
    /// Components pruned after this iteration.
    pub pruned: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    pub initial_loglik: f64,
    pub initial_k: usize,
    pub steps: Vec<EmStep>,
    pub converged: bool,
}

impl EmTrace {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn k_history(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.k).collect()
    }

    /// Largest likelihood drop over any single EM iteration (0 when monotone).
    pub fn worst_decrease(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.loglik_start - s.loglik)
            .fold(0.0, f64::max)
    }

    /// `iteration,loglik,k`, starting with the initial model as iteration 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loglik,k\n");
        let _ = writeln!(out, "0,{:.12e},{}", self.initial_loglik, self.initial_k);
        for s in &self.steps {
            let _ = writeln!(out, "{},{:.12e},{}", s.iteration, s.loglik, s.k);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub factors: FactorPair,
    pub model: MoGModel,
    pub trace: EmTrace,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Uniform weights with standard deviations spread over the 50th..99th
/// percentiles of the absolute residuals.
fn quantile_mixture(sorted_abs: &[f64], k: usize, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let levels: Vec<f64> = match k {
        1 => vec![0.5],
        4 => vec![0.5, 0.7, 0.9, 0.99],
        _ => (0..k)
            .map(|i| 0.5 + 0.49 * i as f64 / (k - 1) as f64)
            .collect(),
    };
    let sigma2 = levels
        .iter()
        .map(|q| quantile(sorted_abs, *q).powi(2).max(floor))
        .collect();
    (vec![1.0 / k as f64; k], sigma2)
}

/// Plain EM for a zero-mean scale mixture on fixed residuals. Returns the
/// fitted weights, variances and final log-likelihood.
fn fit_scale_mixture(
    resid: &[f64],
    mut pi: Vec<f64>,
    mut sigma2: Vec<f64>,
    floor: f64,
) -> (Vec<f64>, Vec<f64>, f64) {
    const ITERS: usize = 30;
    let n = resid.len() as f64;
    let sq: Vec<f64> = resid.iter().map(|r| r * r).collect();
    let mut ll = f64::NEG_INFINITY;
    let mut dens = vec![0.0; pi.len()];
    for it in 0..ITERS {
        let k = pi.len();
        let norms: Vec<f64> = pi
            .iter()
            .zip(&sigma2)
            .map(|(p, s2)| p.ln() - 0.5 * (2.0 * std::f64::consts::PI * s2).ln())
            .collect();
        let inv: Vec<f64> = sigma2.iter().map(|s2| 0.5 / s2).collect();
        let mut mass = vec![0.0; k];
        let mut moment = vec![0.0; k];
        let mut cur = 0.0;
        dens.resize(k, 0.0);
        for r2 in &sq {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                dens[c] = norms[c] - r2 * inv[c];
                max = max.max(dens[c]);
            }
            let mut total = 0.0;
            for d in dens.iter_mut() {
                *d = (*d - max).exp();
                total += *d;
            }
            cur += max + total.ln();
            let scale = 1.0 / total;
            for c in 0..k {
                let g = dens[c] * scale;
                mass[c] += g;
                moment[c] += g * r2;
            }
        }
        let converged = cur - ll <= 1e-7 * cur.abs();
        ll = cur;
        if converged || it + 1 == ITERS {
            break;
        }
        let keep: Vec<usize> = (0..k).filter(|c| mass[*c] > f64::MIN_POSITIVE).collect();
        pi = keep.iter().map(|c| mass[*c] / n).collect();
        sigma2 = keep.iter().map(|c| (moment[*c] / mass[*c]).max(floor)).collect();
    }
    (pi, sigma2, ll)
}

/// Chooses the mixture size for the initial residuals by BIC over
/// `1..=k_max` components, each fitted from a quantile spread.
fn initial_mixture(resid: &DMatrix<f64>, k_max: usize, floor: f64) -> Result<MoGModel> {
    let values: Vec<f64> = resid.iter().copied().collect();
    let mut abs: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let ln_n = (values.len() as f64).ln();
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for k in 1..=k_max {
        let (pi0, s0) = quantile_mixture(&abs, k, floor);
        let (pi, sigma2, ll) = fit_scale_mixture(&values, pi0, s0, floor);
        let params = (2 * pi.len() - 1) as f64;
        let bic = -2.0 * ll + params * ln_n;
        if best.as_ref().is_none_or(|(b, _, _)| bic < *b) {
            best = Some((bic, pi, sigma2));
        }
    }
    let (_, pi, sigma2) = best.expect("k_max >= 1");
    let total: f64 = pi.iter().sum();
    MoGModel::new(pi.iter().map(|p| p / total).collect(), sigma2)
}

/// Fits `S ~ U V^T` under mixture-of-Gaussians noise by EM.
///
/// The initial factors come from a truncated SVD and the initial mixture size
/// is picked by BIC on the SVD residuals. Each iteration runs the E-step, the closed-form mixture update, and a few
/// weighted ALS sweeps on the factors; every such iteration is non-decreasing
/// in likelihood. Between iterations, components lighter than
/// `prune_threshold` are removed, which is how the effective number of
/// components is chosen.
pub fn mog_em_fit(s: &DMatrix<f64>, cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("patch matrix contains non-finite values".into()));
    }
    let mut factors = truncated_svd_factors(s, cfg.rank, cfg.seed)?;
    let mut model = initial_mixture(&residuals(s, &factors)?, cfg.k_init, cfg.sigma2_floor)?;
    let numerical = |it: usize, e: Error| Error::Numerical(format!("EM iteration {it}: {e}"));
    let mut ll = loglik(s, &factors, &model).map_err(|e| numerical(0, e))?;
    let mut trace = EmTrace {
        initial_loglik: ll,
        initial_k: model.k(),
        ..EmTrace::default()
    };

    for it in 1..=cfg.max_iter {
        let start = ll;
        let mut gamma = e_step(s, &factors, &model)?;
        let update = m_step_mog(s, &factors, &gamma, cfg.sigma2_floor)?;
        gamma.drop_components(&update.empty);
        let next_model = update.model;
        let w = weights_from(&gamma, &next_model)?;
        let next = weighted_lrmf(s, &w, &factors, cfg.inner_als_iters, cfg.ridge)
            .map_err(|e| numerical(it, e))?
            .canonical(Some(&factors));
        let u_change = (&next.u - &factors.u).abs().max();
        factors = next;
        model = next_model;
        ll = loglik(s, &factors, &model).map_err(|e| numerical(it, e))?;
        let k = model.k();
        let pruned = model.prune(cfg.prune_threshold).len();
        trace.steps.push(EmStep {
            iteration: it,
            loglik_start: start,
            loglik: ll,
            k,
            pruned,
        });
        if pruned > 0 {
            ll = loglik(s, &factors, &model).map_err(|e| numerical(it, e))?;
        }
        if u_change < cfg.u_tol {
            trace.converged = true;
            break;
        }
    }
    Ok(EmFit {
        factors,
        model,
        trace,
    })
}
