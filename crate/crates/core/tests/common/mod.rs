#![allow(dead_code)]

use asvp::feature_store::FeatureMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Brute-force LogME: per-class evidence maximized over a 200 x 200 log grid of
/// (alpha, beta) in [1e-4, 1e4]^2, solved directly with a Cholesky factor.
pub fn logme_grid(f: &FeatureMatrix, labels: &[u32]) -> f64 {
    let n = f.n();
    let d = f.d();
    let fm = DMatrix::from_row_iterator(n, d, f.data().iter().map(|&v| v as f64));
    let ftf = fm.transpose() * &fm;
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let grid: Vec<f64> = (0..200).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 199.0)).collect();
    let log2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for &k in &classes {
        let y = DVector::from_iterator(n, labels.iter().map(|&l| if l == k { 1.0 } else { 0.0 }));
        let fty = fm.transpose() * &y;
        let mut best = f64::NEG_INFINITY;
        for &a in &grid {
            for &b in &grid {
                let m_a = DMatrix::identity(d, d) * a + &ftf * b;
                let chol = m_a.cholesky().expect("positive definite");
                let m = chol.solve(&fty) * b;
                let res = (&fm * &m - &y).norm_squared();
                let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let ev = 0.5 * n as f64 * b.ln() + 0.5 * d as f64 * a.ln() - 0.5 * n as f64 * log2pi
                    - 0.5 * b * res
                    - 0.5 * a * m.norm_squared()
                    - 0.5 * logdet;
                best = best.max(ev / n as f64);
            }
        }
        total += best;
    }
    total / classes.len() as f64
}

/// Random labeled instance whose features carry some class signal.
pub fn logme_instance(seed: u64) -> (FeatureMatrix, Vec<u32>) {
    let mut r = asvp::rng::seeded(seed);
    let n = r.random_range(8..=30);
    let d = r.random_range(1..=5);
    let c = r.random_range(2..=3usize.min(n));
    let labels: Vec<u32> = (0..n).map(|i| (i % c) as u32).collect();
    let mut data = Vec::with_capacity(n * d);
    for &l in &labels {
        for j in 0..d {
            let e: f32 = StandardNormal.sample(&mut r);
            let signal = if j % c == l as usize { 1.5 } else { 0.0 };
            data.push(e + signal);
        }
    }
    (FeatureMatrix::new(n, d, data).unwrap(), labels)
}

/// Bytes of an ALFV1 file, written independently of the library encoder.
pub fn alfv1_bytes(n: u32, d: u32, values: &[f32]) -> Vec<u8> {
    let mut out = b"ALFV1".to_vec();
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
