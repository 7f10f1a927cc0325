mod common;

use asvp::alignment::{decide_update, logme_score, ped_converge_iters, AlignmentConfig, AlignmentHistory, Decision};
use asvp::feature_store::FeatureMatrix;
use common::{logme_grid, logme_instance};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn fixed_point_matches_grid_n16_d3() {
    let mut r = asvp::rng::seeded(16);
    let labels: Vec<u32> = (0..16).map(|i| (i % 2) as u32).collect();
    let data: Vec<f32> = labels
        .iter()
        .flat_map(|&l| {
            let e: [f32; 3] = [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)];
            [e[0] + l as f32, e[1] - l as f32, e[2]]
        })
        .collect();
    let f = FeatureMatrix::new(16, 3, data).unwrap();
    let s = logme_score(&f, &labels, 1e-6, 100).unwrap();
    assert!(s.converged);
    let g = logme_grid(&f, &labels);
    assert!((s.score - g).abs() < 1e-3, "{} vs grid {}", s.score, g);
}

#[test]
fn perfect_beats_random_under_both_solvers() {
    let labels: Vec<u32> = (0..20).map(|i| (i % 2) as u32).collect();
    let perfect = FeatureMatrix::new(
        20,
        2,
        labels.iter().flat_map(|&l| if l == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect(),
    )
    .unwrap();
    let mut r = asvp::rng::seeded(3);
    let random = FeatureMatrix::new(20, 2, (0..40).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
    assert!(logme_grid(&perfect, &labels) > logme_grid(&random, &labels));
    let p = logme_score(&perfect, &labels, 1e-6, 100).unwrap().score;
    let q = logme_score(&random, &labels, 1e-6, 100).unwrap().score;
    assert!(p > q);
}

#[test]
fn grid_agreement_on_random_instances() {
    for seed in 100..112 {
        let (f, y) = logme_instance(seed);
        let s = logme_score(&f, &y, 1e-6, 100).unwrap().score;
        let g = logme_grid(&f, &y);
        assert!((s - g).abs() < 1e-3, "seed {seed}: {s} vs {g}");
    }
}

fn sphere_instance(seed: u64, n: usize, d: usize, c: u32) -> (FeatureMatrix, Vec<u32>) {
    let mut r = asvp::rng::seeded(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        data.extend(v.iter().map(|x| x / norm));
    }
    let labels = (0..n).map(|_| r.random_range(0..c)).collect();
    (FeatureMatrix::new(n, d, data).unwrap(), labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ped_monotone_in_eps(seed in any::<u64>(), e1 in 1e-4f64..1e-1, e2 in 1e-4f64..1e-1) {
        let (f, y) = sphere_instance(seed, 24, 3, 3);
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let at = |eps| ped_converge_iters(&f, &y, &AlignmentConfig { ped_eps: eps, ..Default::default() }).unwrap();
        prop_assert!(at(hi) <= at(lo));
    }

    #[test]
    fn at_most_one_update(seed in any::<u64>(), threshold in 0.0f64..5.0, calls in 2usize..8) {
        let cfg = AlignmentConfig { logme_threshold: threshold, ..Default::default() };
        let mut h = AlignmentHistory::default();
        for t in 1..=calls {
            let (f, y) = sphere_instance(seed.wrapping_add(t as u64), 20, 3, 2);
            let ped = ped_converge_iters(&f, &y, &cfg).unwrap();
            let s = decide_update(t, 10 * t, ped, &f, &y, &mut h, &cfg).unwrap();
            prop_assert_eq!(s.logme.is_none(), s.ped_iters == 1);
        }
        prop_assert!(h.update_count() <= 1);
        let first = h.signals.iter().position(|s| s.decision == Decision::UpdateAndSwitch);
        if let Some(i) = first {
            prop_assert!(h.signals[i + 1..].iter().all(|s| s.decision == Decision::Keep));
        }
    }

    #[test]
    fn zero_threshold_never_updates(seed in any::<u64>()) {
        let cfg = AlignmentConfig { logme_threshold: 0.0, ..Default::default() };
        let mut h = AlignmentHistory::default();
        let (f, y) = sphere_instance(seed, 20, 3, 2);
        for t in 1..5 {
            let s = decide_update(t, 10 * t, 5, &f, &y, &mut h, &cfg).unwrap();
            prop_assert_eq!(s.decision, Decision::Keep);
        }
    }
}
