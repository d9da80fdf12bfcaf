use polsar::classifier::ProbabilityMap;
use polsar::data::{pauli_image, synth_generate, FeatureImage, LabelMap, SynthConfig};
use polsar::mrf::{brute_force_min, build_model, energy, min_sum_bp, BpConfig, MrfModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_probs(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> ProbabilityMap {
    let mut probs = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0f64).powi(3)).collect();
        let sum: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|v| v / sum));
    }
    ProbabilityMap::new(h, w, c, probs).unwrap()
}

fn random_model(h: usize, w: usize, c: usize, alpha: f64, seed: u64) -> MrfModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_probs(h, w, c, &mut rng);
    let z = FeatureImage::new(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    build_model(&p, &z, alpha).unwrap()
}

/// Exact minimum on a 1xN chain by dynamic programming.
fn viterbi(m: &MrfModel) -> (Vec<u16>, f64) {
    assert_eq!(m.height(), 1);
    let (n, c) = (m.width(), m.classes());
    let mut cost = m.unary(0).to_vec();
    let mut back = vec![vec![0usize; c]; n];
    for p in 1..n {
        let pair = m.alpha() * m.horizontal()[p - 1];
        let mut next = vec![0.0; c];
        for k in 0..c {
            let mut best = (f64::INFINITY, 0);
            for j in 0..c {
                let v = cost[j] + if j == k { 0.0 } else { pair };
                if v < best.0 {
                    best = (v, j);
                }
            }
            next[k] = best.0 + m.unary(p)[k];
            back[p][k] = best.1;
        }
        cost = next;
    }
    let mut k = (0..c).min_by(|a, b| cost[*a].total_cmp(&cost[*b])).unwrap();
    let min = cost[k];
    let mut labels = vec![0u16; n];
    for p in (0..n).rev() {
        labels[p] = k as u16 + 1;
        k = back[p][k];
    }
    (labels, min)
}

#[test]
fn chains_reach_the_dynamic_programming_minimum() {
    for seed in 0..100 {
        let m = random_model(1, 32, 4, 5.0, seed);
        let (labels, dp) = viterbi(&m);
        let dp_energy = energy(&m, &LabelMap::new(1, 32, 4, labels).unwrap()).unwrap();
        assert!((dp_energy - dp).abs() < 1e-9);
        let bp = min_sum_bp(
            &m,
            &BpConfig {
                iterations: 200,
                ..BpConfig::default()
            },
        )
        .unwrap();
        assert!(
            (bp.energy - dp_energy).abs() <= 1e-12 * dp_energy.abs(),
            "seed {seed}: bp {} dp {dp_energy}",
            bp.energy
        );
    }
}

#[test]
fn small_grids_match_exhaustive_search() {
    let mut exact = 0;
    for seed in 0..100 {
        let m = random_model(3, 3, 2, 5.0, 1000 + seed);
        let (_, opt) = brute_force_min(&m).unwrap();
        let bp = min_sum_bp(&m, &BpConfig::default()).unwrap();
        let unary = energy(&m, &m.unary_argmin()).unwrap();
        assert!(bp.energy <= unary, "seed {seed}");
        assert!(bp.energy >= opt - 1e-9);
        exact += (bp.energy - opt <= 1e-9) as usize;
    }
    assert!(exact >= 95, "{exact} of 100 exact");
}

#[test]
fn brute_force_agrees_with_viterbi_on_short_chains() {
    for seed in 0..20 {
        let m = random_model(1, 8, 3, 2.0, 500 + seed);
        let (_, opt) = brute_force_min(&m).unwrap();
        assert!((viterbi(&m).1 - opt).abs() < 1e-9);
    }
}

#[test]
fn zero_smoothing_is_pixelwise_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_probs(6, 5, 3, &mut rng);
    let z = FeatureImage::new(6, 5, 1, (0..30).map(|v| v as f64).collect()).unwrap();
    let m = build_model(&p, &z, 0.0).unwrap();
    let bp = min_sum_bp(&m, &BpConfig::default()).unwrap();
    assert_eq!(bp.labels, p.argmax());
}

#[test]
fn normalisation_does_not_change_the_labelling() {
    for seed in 0..20 {
        let m = random_model(4, 5, 3, 3.0, 200 + seed);
        let cfg = BpConfig {
            iterations: 15,
            ..BpConfig::default()
        };
        let a = min_sum_bp(&m, &cfg).unwrap();
        let b = min_sum_bp(
            &m,
            &BpConfig {
                normalize: false,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(a.labels, b.labels, "seed {seed}");
    }
}

/// Energy summed in a different order: edges first, visited column-major.
fn energy_reordered(m: &MrfModel, labels: &LabelMap) -> f64 {
    let (h, w) = (m.height(), m.width());
    let mut pairwise = 0.0;
    for c in (0..w).rev() {
        for r in (0..h).rev() {
            let here = labels.get(r, c);
            if c + 1 < w && labels.get(r, c + 1) != here {
                pairwise += m.horizontal()[r * (w - 1) + c];
            }
            if r + 1 < h && labels.get(r + 1, c) != here {
                pairwise += m.vertical()[r * w + c];
            }
        }
    }
    let mut unary = 0.0;
    for c in 0..w {
        for r in 0..h {
            unary += m.unary(r * w + c)[labels.get(r, c) as usize - 1];
        }
    }
    m.alpha() * pairwise + unary
}

#[test]
fn energy_matches_reordered_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let m = random_model(7, 9, 4, 5.0, 300 + seed);
        let labels = LabelMap::new(7, 9, 4, (0..63).map(|_| rng.random_range(1..=4)).collect()).unwrap();
        let a = energy(&m, &labels).unwrap();
        assert!((a - energy_reordered(&m, &labels)).abs() < 1e-10);
    }
}

#[test]
fn energy_is_symmetric_under_relabelling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let perm = [3u16, 1, 4, 2];
    let probs = random_probs(5, 6, 4, &mut rng);
    let z = FeatureImage::new(5, 6, 2, (0..60).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let m = build_model(&probs, &z, 5.0).unwrap();
    // class k's probabilities move to class perm[k]
    let mut permuted = vec![0.0; probs.probs().len()];
    for p in 0..30 {
        for k in 0..4 {
            permuted[p * 4 + perm[k] as usize - 1] = probs.probs()[p * 4 + k];
        }
    }
    let mp = build_model(&ProbabilityMap::new(5, 6, 4, permuted).unwrap(), &z, 5.0).unwrap();
    for _ in 0..10 {
        let l: Vec<u16> = (0..30).map(|_| rng.random_range(1..=4)).collect();
        let lp: Vec<u16> = l.iter().map(|k| perm[*k as usize - 1]).collect();
        let a = energy(&m, &LabelMap::new(5, 6, 4, l).unwrap()).unwrap();
        let b = energy(&mp, &LabelMap::new(5, 6, 4, lp).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn boundary_edges_are_weaker_than_interior_edges() {
    let scene = synth_generate(&SynthConfig::standard(5)).unwrap();
    let z = pauli_image(&scene.clean).unwrap();
    let (h, w) = (z.height(), z.width());
    let probs = ProbabilityMap::new(h, w, 2, vec![0.5; h * w * 2]).unwrap();
    let m = build_model(&probs, &z, 5.0).unwrap();
    let (mut boundary, mut nb, mut interior, mut ni) = (0.0, 0, 0.0, 0);
    for (a, b, wt) in m.edges() {
        let t = scene.truth.labels();
        if t[a] != t[b] {
            boundary += wt;
            nb += 1;
        } else {
            interior += wt;
            ni += 1;
        }
    }
    assert!(nb > 0 && ni > 0);
    assert!(boundary / (nb as f64) < interior / (ni as f64));
}
