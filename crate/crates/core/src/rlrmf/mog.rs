use nalgebra::DMatrix;

use super::{FactorPair, MoGModel, Responsibilities};
use crate::error::{Error, Result};

fn check_shapes(s: &DMatrix<f64>, f: &FactorPair) -> Result<()> {
    if f.u.nrows() != s.nrows() || f.v.nrows() != s.ncols() {
        return Err(Error::Shape(format!(
            "factors {}x{} / {}x{} do not match a {}x{} matrix",
            f.u.nrows(),
            f.rank(),
            f.v.nrows(),
            f.rank(),
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(())
}

/// `S - U V^T`.
pub fn residuals(s: &DMatrix<f64>, f: &FactorPair) -> Result<DMatrix<f64>> {
    check_shapes(s, f)?;
    Ok(s - f.reconstruct())
}

#[inline]
fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Mixture log-likelihood of the residuals, `sum_ij log sum_k pi_k N(e_ij | 0, sigma_k^2)`.
pub fn loglik(s: &DMatrix<f64>, f: &FactorPair, m: &MoGModel) -> Result<f64> {
    let e = residuals(s, f)?;
    let norms = m.log_norms();
    let inv2 = m.sigma2().iter().map(|s2| 0.5 / s2).collect::<Vec<_>>();
    let mut terms = vec![0.0; m.k()];
    let mut total = 0.0;
    for r in e.iter() {
        for k in 0..m.k() {
            terms[k] = norms[k] - r * r * inv2[k];
        }
        total += log_sum_exp(&terms);
    }
    if !total.is_finite() {
        return Err(Error::Numerical(format!("log-likelihood evaluated to {total}")));
    }
    Ok(total)
}

/// Posterior probability of each mixture component for every residual. An
/// entry whose densities all underflow is assigned uniformly.
pub fn e_step(s: &DMatrix<f64>, f: &FactorPair, m: &MoGModel) -> Result<Responsibilities> {
    let e = residuals(s, f)?;
    let k = m.k();
    let norms = m.log_norms();
    let inv2 = m.sigma2().iter().map(|s2| 0.5 / s2).collect::<Vec<_>>();
    let (rows, cols) = e.shape();
    let mut gamma = vec![0.0; rows * cols * k];
    for i in 0..rows {
        for j in 0..cols {
            let r = e[(i, j)];
            let out = &mut gamma[(i * cols + j) * k..(i * cols + j + 1) * k];
            for c in 0..k {
                out[c] = norms[c] - r * r * inv2[c];
            }
            let lse = log_sum_exp(out);
            if lse.is_finite() {
                out.iter_mut().for_each(|g| *g = (*g - lse).exp());
            } else {
                out.iter_mut().for_each(|g| *g = 1.0 / k as f64);
            }
        }
    }
    Ok(Responsibilities {
        rows,
        cols,
        k,
        gamma,
    })
}

/// Result of the closed-form mixture update.
#[derive(Debug, Clone)]
pub struct MogUpdate {
    pub model: MoGModel,
    /// Components with no responsibility mass, removed from `model`.
    pub empty: Vec<usize>,
}

/// Closed-form mixture update: `sigma_k^2 = sum gamma e^2 / sum gamma` and
/// `pi_k = sum gamma / (d n)`, variances clamped at `sigma2_floor`.
pub fn m_step_mog(
    s: &DMatrix<f64>,
    f: &FactorPair,
    g: &Responsibilities,
    sigma2_floor: f64,
) -> Result<MogUpdate> {
    let e = residuals(s, f)?;
    if g.shape() != e.shape() {
        return Err(Error::Shape("responsibilities do not match the matrix".into()));
    }
    let k = g.k();
    let mut mass = vec![0.0; k];
    let mut weighted = vec![0.0; k];
    for i in 0..e.nrows() {
        for j in 0..e.ncols() {
            let r2 = e[(i, j)] * e[(i, j)];
            for (c, gk) in g.entry(i, j).iter().enumerate() {
                mass[c] += gk;
                weighted[c] += gk * r2;
            }
        }
    }
    let n = e.len() as f64;
    let empty: Vec<usize> = (0..k).filter(|c| !(mass[*c] > f64::MIN_POSITIVE)).collect();
    let keep: Vec<usize> = (0..k).filter(|c| !empty.contains(c)).collect();
    let pi: Vec<f64> = keep.iter().map(|c| mass[*c] / n).collect();
    let total: f64 = pi.iter().sum();
    let pi = pi.into_iter().map(|p| p / total).collect();
    let sigma2 = keep
        .iter()
        .map(|c| (weighted[*c] / mass[*c]).max(sigma2_floor))
        .collect();
    Ok(MogUpdate {
        model: MoGModel::new(pi, sigma2)?,
        empty,
    })
}

/// Expected complete-data log-likelihood
/// `sum_ijk gamma_ijk (log pi_k - 0.5 log(2 pi sigma_k^2) - e_ij^2 / (2 sigma_k^2))`.
pub fn q_function(
    s: &DMatrix<f64>,
    f: &FactorPair,
    g: &Responsibilities,
    m: &MoGModel,
) -> Result<f64> {
    let e = residuals(s, f)?;
    if g.k() != m.k() || g.shape() != e.shape() {
        return Err(Error::Shape("responsibilities do not match the model".into()));
    }
    let norms = m.log_norms();
    let mut q = 0.0;
    for i in 0..e.nrows() {
        for j in 0..e.ncols() {
            let r2 = e[(i, j)] * e[(i, j)];
            for (c, gk) in g.entry(i, j).iter().enumerate() {
                if *gk > 0.0 {
                    q += gk * (norms[c] - r2 / (2.0 * m.sigma2()[c]));
                }
            }
        }
    }
    Ok(q)
}

/// Entry weights `w_ij = sqrt(sum_k gamma_ijk / (2 sigma_k^2))`, chosen so that
/// `||W .* (S - U V^T)||_F^2` is exactly the residual part of `-Q`.
pub fn weights_from(g: &Responsibilities, m: &MoGModel) -> Result<DMatrix<f64>> {
    if g.k() != m.k() {
        return Err(Error::Shape(format!(
            "{} responsibility components for a {}-component mixture",
            g.k(),
            m.k()
        )));
    }
    let (rows, cols) = g.shape();
    let inv = m.sigma2().iter().map(|s2| 0.5 / s2).collect::<Vec<_>>();
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        g.entry(i, j)
            .iter()
            .zip(&inv)
            .map(|(gk, w)| gk * w)
            .sum::<f64>()
            .sqrt()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, k: usize) -> (DMatrix<f64>, FactorPair, MoGModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = DMatrix::from_fn(9, 49, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(9, 2, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(49, 2, |_, _| rng.random_range(-0.5..0.5));
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let pi = raw.iter().map(|p| p / total).collect();
        let sigma2 = (0..k).map(|_| rng.random_range(0.01..2.0)).collect();
        (
            s,
            FactorPair::new(u, v).unwrap(),
            MoGModel::new(pi, sigma2).unwrap(),
        )
    }

    fn zero_residual_instance() -> (DMatrix<f64>, FactorPair) {
        let u = DMatrix::from_fn(9, 2, |i, j| (i + j) as f64 * 0.1);
        let v = DMatrix::from_fn(49, 2, |i, j| (i as f64 - j as f64) * 0.05);
        let f = FactorPair::new(u, v).unwrap();
        (f.reconstruct(), f)
    }

    /// Direct per-entry density summation with compensated accumulation.
    fn loglik_oracle(s: &DMatrix<f64>, f: &FactorPair, m: &MoGModel) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for i in 0..s.nrows() {
            for j in 0..s.ncols() {
                let mut pred = 0.0;
                for k in 0..f.rank() {
                    pred += f.u[(i, k)] * f.v[(j, k)];
                }
                let e = s[(i, j)] - pred;
                let dens: f64 = (0..m.k())
                    .map(|k| {
                        let s2 = m.sigma2()[k];
                        m.pi()[k] * (-e * e / (2.0 * s2)).exp()
                            / (2.0 * std::f64::consts::PI * s2).sqrt()
                    })
                    .sum();
                let term = dens.ln();
                let t = sum + term;
                if sum.abs() >= term.abs() {
                    comp += (sum - t) + term;
                } else {
                    comp += (term - t) + sum;
                }
                sum = t;
            }
        }
        sum + comp
    }

    #[test]
    fn loglik_zero_residual_unit_variance() {
        let (s, f) = zero_residual_instance();
        let m = MoGModel::new(vec![1.0], vec![1.0]).unwrap();
        let expect = 441.0 * (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((loglik(&s, &f, &m).unwrap() - expect).abs() < 1e-9);
        let dup = MoGModel::new(vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        assert!((loglik(&s, &f, &dup).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn loglik_matches_direct_summation() {
        for seed in 0..20 {
            let (s, f, m) = random_instance(seed, 3);
            let fast = loglik(&s, &f, &m).unwrap();
            let slow = loglik_oracle(&s, &f, &m);
            assert!((fast - slow).abs() < 1e-10 * slow.abs().max(1.0), "{fast} vs {slow}");
        }
    }

    #[test]
    fn e_step_single_component_is_certain() {
        let (s, f, _) = random_instance(1, 1);
        let m = MoGModel::new(vec![1.0], vec![0.3]).unwrap();
        let g = e_step(&s, &f, &m).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn e_step_density_ratio_at_zero() {
        let (s, f) = zero_residual_instance();
        let m = MoGModel::new(vec![0.5, 0.5], vec![1.0, 4.0]).unwrap();
        let g = e_step(&s, &f, &m).unwrap();
        for i in 0..9 {
            for j in 0..49 {
                let e = g.entry(i, j);
                assert!((e[0] - 2.0 / 3.0).abs() < 1e-9 && (e[1] - 1.0 / 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn e_step_matches_direct_formula() {
        for seed in 0..10 {
            let (s, f, m) = random_instance(100 + seed, 4);
            let g = e_step(&s, &f, &m).unwrap();
            for i in 0..9 {
                for j in 0..49 {
                    let e = s[(i, j)] - f.predict(i, j);
                    let dens: Vec<f64> = (0..4)
                        .map(|k| {
                            let s2 = m.sigma2()[k];
                            m.pi()[k] * (-e * e / (2.0 * s2)).exp()
                                / (2.0 * std::f64::consts::PI * s2).sqrt()
                        })
                        .collect();
                    let total: f64 = dens.iter().sum();
                    for k in 0..4 {
                        assert!((g.entry(i, j)[k] - dens[k] / total).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn e_step_underflow_falls_back_to_uniform() {
        let s = DMatrix::from_element(3, 4, 1e200);
        let f = FactorPair::new(DMatrix::zeros(3, 1), DMatrix::zeros(4, 1)).unwrap();
        let m = MoGModel::new(vec![0.5, 0.5], vec![1e-8, 1e-8]).unwrap();
        let g = e_step(&s, &f, &m).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn m_step_single_component_is_mean_square() {
        let (s, f, _) = random_instance(7, 1);
        let m = MoGModel::new(vec![1.0], vec![1.0]).unwrap();
        let g = e_step(&s, &f, &m).unwrap();
        let upd = m_step_mog(&s, &f, &g, 1e-8).unwrap();
        let e = residuals(&s, &f).unwrap();
        let ms = e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64;
        assert_eq!(upd.model.pi(), &[1.0]);
        assert!((upd.model.sigma2()[0] - ms).abs() < 1e-12);
    }

    #[test]
    fn m_step_variance_from_concentrated_responsibility() {
        // residuals +-0.3 owned by component 2, zeros owned by component 1
        let (mut s, f) = zero_residual_instance();
        let mut gamma = Vec::new();
        for i in 0..9 {
            for j in 0..49 {
                if (i + j) % 3 == 0 {
                    s[(i, j)] += if j % 2 == 0 { 0.3 } else { -0.3 };
                    gamma.extend_from_slice(&[0.0, 1.0]);
                } else {
                    gamma.extend_from_slice(&[1.0, 0.0]);
                }
            }
        }
        let g = Responsibilities::new(9, 49, 2, gamma).unwrap();
        let upd = m_step_mog(&s, &f, &g, 1e-8).unwrap();
        assert!((upd.model.sigma2()[1] - 0.09).abs() < 1e-12);
        assert_eq!(upd.model.sigma2()[0], 1e-8);
        assert!(upd.empty.is_empty());
    }

    #[test]
    fn m_step_drops_component_without_mass() {
        let (s, f) = zero_residual_instance();
        let gamma = [1.0, 0.0].repeat(9 * 49);
        let g = Responsibilities::new(9, 49, 2, gamma).unwrap();
        let upd = m_step_mog(&s, &f, &g, 1e-8).unwrap();
        assert_eq!(upd.empty, vec![1]);
        assert_eq!(upd.model.k(), 1);
    }

    #[test]
    fn m_step_does_not_decrease_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..20 {
            let (s, f, m) = random_instance(200 + seed, 3);
            let gamma: Vec<f64> = (0..9 * 49)
                .flat_map(|_| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
                    let t: f64 = raw.iter().sum();
                    raw.into_iter().map(move |x| x / t)
                })
                .collect();
            let g = Responsibilities::new(9, 49, 3, gamma).unwrap();
            let before = q_function(&s, &f, &g, &m).unwrap();
            let upd = m_step_mog(&s, &f, &g, 1e-8).unwrap();
            let after = q_function(&s, &f, &g, &upd.model).unwrap();
            assert!(after >= before - 1e-9, "{after} < {before}");
        }
    }

    #[test]
    fn unit_weights_from_half_variance() {
        let (s, f) = zero_residual_instance();
        let m = MoGModel::new(vec![1.0], vec![0.5]).unwrap();
        let w = weights_from(&e_step(&s, &f, &m).unwrap(), &m).unwrap();
        assert!(w.iter().all(|x| (x - 1.0).abs() < 1e-15));
        let two = MoGModel::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let g = Responsibilities::new(9, 49, 2, vec![0.5; 9 * 49 * 2]).unwrap();
        let w2 = weights_from(&g, &two).unwrap();
        assert!(w2.iter().all(|x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn weighted_norm_equals_q_residual_term() {
        for seed in 0..10 {
            let (s, f, m) = random_instance(300 + seed, 3);
            let g = e_step(&s, &f, &m).unwrap();
            let w = weights_from(&g, &m).unwrap();
            let e = residuals(&s, &f).unwrap();
            let weighted: f64 = w.iter().zip(e.iter()).map(|(w, e)| (w * e).powi(2)).sum();
            // Q = const(gamma, pi, sigma) - weighted, so Q + weighted is the
            // same for any factors.
            let q = q_function(&s, &f, &g, &m).unwrap();
            let zero = FactorPair::new(DMatrix::zeros(9, 2), DMatrix::zeros(49, 2)).unwrap();
            let q0 = q_function(&s, &zero, &g, &m).unwrap();
            let w0: f64 = w.iter().zip(s.iter()).map(|(w, x)| (w * x).powi(2)).sum();
            assert!(((q + weighted) - (q0 + w0)).abs() < 1e-8 * q.abs().max(1.0));
        }
    }
}
