use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FactorPair;
use crate::error::{Error, Result};

/// Tikhonov damping added to every normal system.
pub const DEFAULT_RIDGE: f64 = 1e-8;

const MAX_DAMPING_RETRIES: usize = 3;

/// `||W .* (S - U V^T)||_F^2`.
pub fn weighted_objective(s: &DMatrix<f64>, w: &DMatrix<f64>, f: &FactorPair) -> f64 {
    let mut total = 0.0;
    for j in 0..s.ncols() {
        for i in 0..s.nrows() {
            let r = s[(i, j)] - f.predict(i, j);
            total += (w[(i, j)] * r).powi(2);
        }
    }
    total
}

/// Rank-`r` truncated SVD in balanced form. Directions with a vanishing
/// singular value get a tiny seeded perturbation so both factors stay usable.
pub fn truncated_svd_factors(s: &DMatrix<f64>, r: usize, seed: u64) -> Result<FactorPair> {
    let (d, n) = s.shape();
    if r == 0 || r >= d.min(n) {
        return Err(Error::InvalidConfig(format!(
            "rank {r} must satisfy 1 <= r < min({d}, {n})"
        )));
    }
    let svd = s.clone().svd(true, true);
    let (left, right_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|a, b| sv[*b].total_cmp(&sv[*a]));
    let top = sv[order[0]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = DMatrix::zeros(d, r);
    let mut v = DMatrix::zeros(n, r);
    for (dst, &src) in order.iter().take(r).enumerate() {
        let scale = sv[src].sqrt();
        if sv[src] > 1e-12 * top.max(f64::MIN_POSITIVE) {
            u.set_column(dst, &(left.column(src) * scale));
            v.set_column(dst, &(right_t.row(src).transpose() * scale));
        } else {
            let eps = 1e-6 * top.sqrt().max(1e-6);
            for i in 0..d {
                u[(i, dst)] = eps * rng.random_range(-1.0..1.0);
            }
            for j in 0..n {
                v[(j, dst)] = eps * rng.random_range(-1.0..1.0);
            }
        }
    }
    FactorPair::new(u, v)
}

/// Solves `(A + ridge I) x = b`, raising the damping tenfold on failure.
fn solve_damped(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    let mut lambda = ridge;
    for _ in 0..=MAX_DAMPING_RETRIES {
        let mut damped = a.clone();
        for k in 0..damped.nrows() {
            damped[(k, k)] += lambda;
        }
        if let Some(chol) = damped.cholesky() {
            let x = chol.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        lambda *= 10.0;
    }
    None
}

/// One half-step: re-solves every row of `target` against the fixed `other`
/// factor. `data(t, o)` and `weight(t, o)` index the matrix from the target's
/// point of view. A row is only replaced when its weighted error does not grow.
fn half_step(
    target: &mut DMatrix<f64>,
    other: &DMatrix<f64>,
    data: impl Fn(usize, usize) -> f64,
    weight: impl Fn(usize, usize) -> f64,
    ridge: f64,
) -> Result<()> {
    let r = target.ncols();
    let mut normal = DMatrix::zeros(r, r);
    let mut rhs = DVector::zeros(r);
    for t in 0..target.nrows() {
        normal.fill(0.0);
        rhs.fill(0.0);
        for o in 0..other.nrows() {
            let w2 = weight(t, o).powi(2);
            if w2 == 0.0 {
                continue;
            }
            let x = data(t, o);
            for a in 0..r {
                let oa = other[(o, a)];
                rhs[a] += w2 * x * oa;
                for b in a..r {
                    normal[(a, b)] += w2 * oa * other[(o, b)];
                }
            }
        }
        for a in 0..r {
            for b in 0..a {
                normal[(a, b)] = normal[(b, a)];
            }
        }
        let row = solve_damped(&normal, &rhs, ridge).ok_or_else(|| {
            Error::Numerical(format!("singular normal system for factor row {t}"))
        })?;
        let row_error = |coef: &dyn Fn(usize) -> f64| -> f64 {
            (0..other.nrows())
                .map(|o| {
                    let pred: f64 = (0..r).map(|a| coef(a) * other[(o, a)]).sum();
                    (weight(t, o) * (data(t, o) - pred)).powi(2)
                })
                .sum()
        };
        let old = row_error(&|a| target[(t, a)]);
        let new = row_error(&|a| row[a]);
        if new <= old {
            for a in 0..r {
                target[(t, a)] = row[a];
            }
        }
    }
    Ok(())
}

/// Minimizes `||W .* (S - U V^T)||_F^2` by alternating weighted least squares,
/// starting from `init`. Runs at most `iters` sweeps (U then V), stopping early
/// once a sweep no longer reduces the objective measurably.
pub fn weighted_lrmf(
    s: &DMatrix<f64>,
    w: &DMatrix<f64>,
    init: &FactorPair,
    iters: usize,
    ridge: f64,
) -> Result<FactorPair> {
    if w.shape() != s.shape() {
        return Err(Error::Shape(format!(
            "weights {:?} do not match matrix {:?}",
            w.shape(),
            s.shape()
        )));
    }
    if init.u.nrows() != s.nrows() || init.v.nrows() != s.ncols() {
        return Err(Error::Shape("initial factors do not match the matrix".into()));
    }
    if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    let mut f = init.clone();
    let mut prev = weighted_objective(s, w, &f);
    for _ in 0..iters {
        half_step(&mut f.u, &f.v, |i, j| s[(i, j)], |i, j| w[(i, j)], ridge)?;
        half_step(&mut f.v, &f.u, |j, i| s[(i, j)], |j, i| w[(i, j)], ridge)?;
        let cur = weighted_objective(s, w, &f);
        if prev - cur <= 1e-15 * prev {
            break;
        }
        prev = cur;
    }
    FactorPair::new(f.u, f.v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn svd_tail_energy(s: &DMatrix<f64>, r: usize) -> f64 {
        let mut sv: Vec<f64> = s.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv[r..].iter().map(|x| x * x).sum()
    }

    #[test]
    fn unit_weights_reach_svd_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let s = random_matrix(&mut rng, 9, 49);
            let init = FactorPair::new(random_matrix(&mut rng, 9, 2), random_matrix(&mut rng, 49, 2))
                .unwrap();
            let w = DMatrix::from_element(9, 49, 1.0);
            let f = weighted_lrmf(&s, &w, &init, 5000, DEFAULT_RIDGE).unwrap();
            let obj = weighted_objective(&s, &w, &f);
            let best = svd_tail_energy(&s, 2);
            assert!((obj - best).abs() <= 1e-6 * best, "{obj} vs {best}");
        }
    }

    #[test]
    fn zero_weight_column_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_matrix(&mut rng, 9, 2);
        let v = random_matrix(&mut rng, 49, 2);
        let mut s = &u * v.transpose();
        for i in 0..9 {
            s[(i, 10)] = 100.0 + i as f64;
        }
        let mut w = DMatrix::from_element(9, 49, 1.0);
        w.column_mut(10).fill(0.0);
        let init = truncated_svd_factors(&random_matrix(&mut rng, 9, 49), 2, 0).unwrap();
        let f = weighted_lrmf(&s, &w, &init, 2000, DEFAULT_RIDGE).unwrap();
        assert!(weighted_objective(&s, &w, &f) < 1e-8);
        // the ignored column's V row is pinned to zero by the damping alone
        assert!(f.v.row(10).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn exact_low_rank_with_positive_weights_fits_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let s = random_matrix(&mut rng, 9, 2) * random_matrix(&mut rng, 49, 2).transpose();
            let w = DMatrix::from_fn(9, 49, |_, _| rng.random_range(0.1..3.0));
            let init = FactorPair::new(random_matrix(&mut rng, 9, 2), random_matrix(&mut rng, 49, 2))
                .unwrap();
            let f = weighted_lrmf(&s, &w, &init, 5000, DEFAULT_RIDGE).unwrap();
            assert!(weighted_objective(&s, &w, &f) < 1e-8);
        }
    }

    #[test]
    fn objective_never_increases_per_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_matrix(&mut rng, 9, 49);
        let w = DMatrix::from_fn(9, 49, |_, _| rng.random_range(0.0..2.0));
        let mut f = FactorPair::new(random_matrix(&mut rng, 9, 2), random_matrix(&mut rng, 49, 2))
            .unwrap();
        let mut last = weighted_objective(&s, &w, &f);
        for _ in 0..30 {
            half_step(&mut f.u, &f.v, |i, j| s[(i, j)], |i, j| w[(i, j)], DEFAULT_RIDGE).unwrap();
            let a = weighted_objective(&s, &w, &f);
            assert!(a <= last);
            half_step(&mut f.v, &f.u, |j, i| s[(i, j)], |j, i| w[(i, j)], DEFAULT_RIDGE).unwrap();
            let b = weighted_objective(&s, &w, &f);
            assert!(b <= a);
            last = b;
        }
    }

    #[test]
    fn svd_factors_reconstruct_rank_r_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_matrix(&mut rng, 9, 2) * random_matrix(&mut rng, 49, 2).transpose();
        let f = truncated_svd_factors(&s, 2, 0).unwrap();
        assert!((f.reconstruct() - &s).abs().max() < 1e-12);
        assert!(truncated_svd_factors(&s, 9, 0).is_err());
    }
}
