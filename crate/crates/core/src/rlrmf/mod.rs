//! Robust low-rank matrix factorization under mixture-of-Gaussians noise.
//!
//! A patch matrix `S` (d x n) is modelled as `U V^T + E` where every entry of
//! `E` is drawn from a zero-mean Gaussian mixture. The factors and the mixture
//! are fitted jointly by EM; the factor update of each M-step is a weighted
//! low-rank approximation solved by alternating least squares.

mod em;
mod mog;
mod wlrmf;

pub use em::{mog_em_fit, EmConfig, EmFit, EmStep, EmTrace};
pub use mog::{e_step, loglik, m_step_mog, q_function, residuals, weights_from, MogUpdate};
pub use wlrmf::{truncated_svd_factors, weighted_lrmf, weighted_objective, DEFAULT_RIDGE};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Zero-mean Gaussian mixture: mixing weights and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct MoGModel {
    pi: Vec<f64>,
    sigma2: Vec<f64>,
}

impl MoGModel {
    /// Weights must be positive and sum to one within 1e-9; they are
    /// renormalized exactly.
    pub fn new(pi: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if pi.is_empty() || pi.len() != sigma2.len() {
            return Err(Error::InvalidInput(format!(
                "mixture needs matching non-empty weights and variances ({} vs {})",
                pi.len(),
                sigma2.len()
            )));
        }
        if pi.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput(format!("mixing weights must be positive: {pi:?}")));
        }
        if sigma2.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(format!("variances must be positive: {sigma2:?}")));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("mixing weights sum to {total}")));
        }
        let pi = pi.into_iter().map(|p| p / total).collect();
        Ok(MoGModel { pi, sigma2 })
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    /// Drops components whose weight is below `threshold`, always keeping the
    /// heaviest one, and renormalizes. Returns the removed indices.
    pub fn prune(&mut self, threshold: f64) -> Vec<usize> {
        let heaviest = self
            .pi
            .iter()
            .enumerate()
            .fold(0, |best, (k, p)| if *p > self.pi[best] { k } else { best });
        let removed: Vec<usize> = (0..self.k())
            .filter(|k| *k != heaviest && self.pi[*k] < threshold)
            .collect();
        if removed.is_empty() {
            return removed;
        }
        let keep: Vec<usize> = (0..self.k()).filter(|k| !removed.contains(k)).collect();
        let total: f64 = keep.iter().map(|k| self.pi[*k]).sum();
        self.pi = keep.iter().map(|k| self.pi[*k] / total).collect();
        self.sigma2 = keep.iter().map(|k| self.sigma2[*k]).collect();
        removed
    }

    /// Per-component `log pi_k - 0.5 log(2 pi sigma_k^2)`.
    pub(crate) fn log_norms(&self) -> Vec<f64> {
        self.pi
            .iter()
            .zip(&self.sigma2)
            .map(|(p, s2)| p.ln() - 0.5 * (2.0 * std::f64::consts::PI * s2).ln())
            .collect()
    }
}

/// Low-rank factors `U` (d x r) and `V` (n x r).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl FactorPair {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        let r = u.ncols();
        if v.ncols() != r {
            return Err(Error::Shape(format!(
                "U has rank {r} but V has {} columns",
                v.ncols()
            )));
        }
        if r == 0 || r >= u.nrows().min(v.nrows()) {
            return Err(Error::InvalidConfig(format!(
                "rank {r} must satisfy 1 <= r < min({}, {})",
                u.nrows(),
                v.nrows()
            )));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite factor entry".into()));
        }
        Ok(FactorPair { u, v })
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    /// Entry `(i, j)` of `U V^T`.
    #[inline]
    pub fn predict(&self, i: usize, j: usize) -> f64 {
        (0..self.rank()).map(|k| self.u[(i, k)] * self.v[(j, k)]).sum()
    }

    /// Column `j` of `U V^T`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.u.nrows()).map(|i| self.predict(i, j)).collect()
    }

    /// Rewrites the factors in balanced singular form, `U = P sqrt(S)`,
    /// `V = Q sqrt(S)` with `U V^T = P S Q^T`, leaving the product unchanged.
    /// Column signs are matched to `reference` when given.
    pub fn canonical(&self, reference: Option<&FactorPair>) -> FactorPair {
        let r = self.rank();
        let qr_u = self.u.clone().qr();
        let qr_v = self.v.clone().qr();
        let (qu, ru) = (qr_u.q(), qr_u.r());
        let (qv, rv) = (qr_v.q(), qr_v.r());
        let core = &ru * rv.transpose();
        let svd = core.svd(true, true);
        let (p, qt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
        let mut u = DMatrix::zeros(self.u.nrows(), r);
        let mut v = DMatrix::zeros(self.v.nrows(), r);
        for (dst, &src) in order.iter().enumerate() {
            let scale = svd.singular_values[src].max(0.0).sqrt();
            let ucol = &qu * p.column(src) * scale;
            let vcol = &qv * qt.row(src).transpose() * scale;
            u.set_column(dst, &ucol);
            v.set_column(dst, &vcol);
        }
        if let Some(reference) = reference {
            for k in 0..r {
                if u.column(k).dot(&reference.u.column(k)) < 0.0 {
                    u.column_mut(k).neg_mut();
                    v.column_mut(k).neg_mut();
                }
            }
        }
        FactorPair { u, v }
    }
}

/// Posterior component probabilities for every entry of a d x n matrix,
/// stored entry-major: `gamma[(i * n + j) * K + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    rows: usize,
    cols: usize,
    k: usize,
    gamma: Vec<f64>,
}

impl Responsibilities {
    pub fn new(rows: usize, cols: usize, k: usize, gamma: Vec<f64>) -> Result<Self> {
        if gamma.len() != rows * cols * k || k == 0 {
            return Err(Error::Shape(format!(
                "{} responsibilities for {rows}x{cols}x{k}",
                gamma.len()
            )));
        }
        for entry in gamma.chunks_exact(k) {
            let total: f64 = entry.iter().sum();
            if entry.iter().any(|g| !(*g >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "responsibilities {entry:?} are not a distribution"
                )));
            }
        }
        Ok(Responsibilities {
            rows,
            cols,
            k,
            gamma,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.cols + j) * self.k;
        &self.gamma[start..start + self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.gamma
    }

    /// Total responsibility mass of each component.
    pub fn mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.k];
        for entry in self.gamma.chunks_exact(self.k) {
            for (m, g) in mass.iter_mut().zip(entry) {
                *m += g;
            }
        }
        mass
    }

    pub(crate) fn drop_components(&mut self, removed: &[usize]) {
        if removed.is_empty() {
            return;
        }
        let keep: Vec<usize> = (0..self.k).filter(|k| !removed.contains(k)).collect();
        let gamma = self
            .gamma
            .chunks_exact(self.k)
            .flat_map(|entry| {
                let total: f64 = keep.iter().map(|k| entry[*k]).sum();
                keep.iter().map(move |k| entry[*k] / total)
            })
            .collect();
        self.gamma = gamma;
        self.k = keep.len();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prune_keeps_heaviest_and_renormalizes() {
        let mut m = MoGModel::new(vec![0.5, 0.01, 0.48, 0.01], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let removed = m.prune(0.02);
        assert_eq!(removed, vec![1, 3]);
        assert_eq!(m.sigma2(), &[1.0, 3.0]);
        assert!((m.pi().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut single = MoGModel::new(vec![1.0], vec![1.0]).unwrap();
        assert!(single.prune(2.0).is_empty());
        assert_eq!(single.k(), 1);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(MoGModel::new(vec![0.5, 0.4], vec![1.0, 1.0]).is_err());
        assert!(MoGModel::new(vec![1.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(MoGModel::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn factor_rank_must_be_below_both_dimensions() {
        assert!(FactorPair::new(DMatrix::zeros(9, 2), DMatrix::zeros(49, 2)).is_ok());
        assert!(FactorPair::new(DMatrix::zeros(9, 1), DMatrix::zeros(1, 1)).is_err());
        assert!(FactorPair::new(DMatrix::zeros(2, 2), DMatrix::zeros(5, 2)).is_err());
    }

    #[test]
    fn canonical_form_preserves_product() {
        let u = DMatrix::from_fn(9, 2, |i, j| ((i * 3 + j * 7) % 5) as f64 - 1.5);
        let v = DMatrix::from_fn(49, 2, |i, j| ((i * 5 + j * 3) % 7) as f64 * 0.3 - 0.4);
        let f = FactorPair::new(u, v).unwrap();
        let c = f.canonical(Some(&f));
        assert!((c.reconstruct() - f.reconstruct()).abs().max() < 1e-10);
        // balanced: U^T U == V^T V diagonal
        let gu = c.u.transpose() * &c.u;
        let gv = c.v.transpose() * &c.v;
        assert!((gu - gv).abs().max() < 1e-9);
    }
}
