//! Update trigger for the pre-computed features: a feature-dynamics convergence
//! probe gates a LogME transferability score, and a stalled LogME score fires a
//! single feature refresh plus the LP-FT -> FT switch.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub logme_threshold: f64,
    pub ped_step: f64,
    pub ped_repulse: f64,
    pub ped_eps: f64,
    pub ped_max_iters: usize,
    pub logme_tol: f64,
    pub logme_max_iters: usize,
    pub allow_multiple_updates: bool,
    /// Overrides the trigger: fire exactly when the labeled count equals this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force_update_at: Option<usize>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            logme_threshold: 1.0,
            ped_step: 0.1,
            ped_repulse: 0.5,
            ped_eps: 1e-3,
            ped_max_iters: 200,
            logme_tol: 1e-6,
            logme_max_iters: 100,
            allow_multiple_updates: false,
            force_update_at: None,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.logme_threshold >= 0.0) {
            return Err(Error::config("alignment.logme_threshold", "must be >= 0"));
        }
        if !(self.ped_step > 0.0) {
            return Err(Error::config("alignment.ped_step", "must be > 0"));
        }
        if !(self.ped_repulse > 0.0) {
            return Err(Error::config("alignment.ped_repulse", "must be > 0"));
        }
        if !(self.ped_eps > 0.0) {
            return Err(Error::config("alignment.ped_eps", "must be > 0"));
        }
        if self.ped_max_iters == 0 {
            return Err(Error::config("alignment.ped_max_iters", "must be >= 1"));
        }
        if !(self.logme_tol > 0.0) || self.logme_max_iters == 0 {
            return Err(Error::config("alignment.logme_tol", "tolerance and iteration cap must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Keep,
    UpdateAndSwitch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSignal {
    pub iteration: usize,
    pub labeled: usize,
    pub ped_iters: usize,
    pub logme: Option<f64>,
    /// LogME hit its iteration cap before converging.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub logme_unconverged: bool,
    pub decision: Decision,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentHistory {
    pub signals: Vec<AlignmentSignal>,
    pub updated: bool,
}

impl AlignmentHistory {
    /// Most recent LogME score recorded since the last feature update.
    pub fn previous_logme(&self) -> Option<f64> {
        self.signals
            .iter()
            .rev()
            .take_while(|s| s.decision == Decision::Keep)
            .find_map(|s| s.logme)
    }

    pub fn update_count(&self) -> usize {
        self.signals
            .iter()
            .filter(|s| s.decision == Decision::UpdateAndSwitch)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogmeScore {
    pub score: f64,
    pub converged: bool,
}

fn to_dmatrix(f: &FeatureMatrix) -> DMatrix<f64> {
    DMatrix::from_row_iterator(f.n(), f.d(), f.data().iter().map(|&v| f64::from(v)))
}

fn class_set(labels: &[u32]) -> Vec<u32> {
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
}

const PRECISION_FLOOR: f64 = 1e-10;
const PRECISION_CEIL: f64 = 1e10;

/// Per-sample log marginal evidence of a Bayesian linear model, maximized over
/// the prior precision `alpha` and noise precision `beta` by fixed-point
/// iteration in the eigenbasis of `FᵀF`, averaged over one-vs-rest targets of
/// every class present in `labels`.
pub fn logme_score(features: &FeatureMatrix, labels: &[u32], tol: f64, max_iters: usize) -> Result<LogmeScore> {
    let n = features.n();
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} rows", labels.len())));
    }
    if n < 2 {
        return Err(Error::Argument("LogME needs at least 2 samples".into()));
    }
    let classes = class_set(labels);
    if classes.len() < 2 {
        return Err(Error::Argument("LogME needs at least 2 classes".into()));
    }
    let f = to_dmatrix(features);
    let gram = f.transpose() * &f;
    let eig = SymmetricEigen::new(gram);
    let s: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    if s.iter().all(|&v| v <= 1e-12) {
        return Err(Error::Degenerate("feature matrix has rank 0".into()));
    }
    let v = eig.eigenvectors;

    let mut total = 0.0;
    let mut converged = true;
    for &k in &classes {
        let y = DVector::from_iterator(n, labels.iter().map(|&l| if l == k { 1.0 } else { 0.0 }));
        let (ev, ok) = binary_evidence(&f, &v, &s, &y, tol, max_iters);
        total += ev;
        converged &= ok;
    }
    Ok(LogmeScore {
        score: total / classes.len() as f64,
        converged,
    })
}

fn binary_evidence(
    f: &DMatrix<f64>,
    v: &DMatrix<f64>,
    s: &[f64],
    y: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> (f64, bool) {
    let n = f.nrows() as f64;
    let d = f.ncols() as f64;
    // targets projected onto the eigenbasis
    let g = v.transpose() * (f.transpose() * y);
    let (mut alpha, mut beta) = (1.0f64, 1.0f64);
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..max_iters {
        let w = DVector::from_iterator(
            s.len(),
            g.iter().zip(s).map(|(gi, si)| beta * gi / (alpha + beta * si)),
        );
        let m = v * &w;
        let gamma: f64 = s.iter().map(|si| beta * si / (alpha + beta * si)).sum();
        let mm = m.norm_squared();
        let res = (f * &m - y).norm_squared();
        let logdet: f64 = s.iter().map(|si| (alpha + beta * si).ln()).sum();
        let evidence = 0.5 * n * beta.ln() + 0.5 * d * alpha.ln()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * beta * res
            - 0.5 * alpha * mm
            - 0.5 * logdet;
        let evidence = evidence / n;
        if (evidence - prev).abs() < tol {
            return (evidence, true);
        }
        prev = evidence;
        alpha = (gamma / mm.max(f64::MIN_POSITIVE)).clamp(PRECISION_FLOOR, PRECISION_CEIL);
        beta = ((n - gamma) / res.max(f64::MIN_POSITIVE)).clamp(PRECISION_FLOOR, PRECISION_CEIL);
    }
    (prev, false)
}

/// Number of feature-dynamics iterations until the mean displacement drops
/// below `ped_eps` (capped at `ped_max_iters`). Each iteration pulls every
/// feature toward its class centroid, pushes it away from the nearest
/// other-class centroid and re-normalizes it.
pub fn ped_converge_iters(features: &FeatureMatrix, labels: &[u32], cfg: &AlignmentConfig) -> Result<usize> {
    let n = features.n();
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} rows", labels.len())));
    }
    if n < 2 {
        return Err(Error::Argument("PED probe needs at least 2 samples".into()));
    }
    let classes = class_set(labels);
    if classes.len() < 2 {
        return Ok(1);
    }
    let d = features.d();
    let slot: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).unwrap())
        .collect();
    let mut x: Vec<f64> = features.data().iter().map(|&v| f64::from(v)).collect();
    let mut next = x.clone();
    let mut centroids = vec![0.0f64; classes.len() * d];
    let mut counts = vec![0usize; classes.len()];
    for &c in &slot {
        counts[c] += 1;
    }

    for iter in 1..=cfg.ped_max_iters {
        centroids.iter_mut().for_each(|v| *v = 0.0);
        for (i, &c) in slot.iter().enumerate() {
            for j in 0..d {
                centroids[c * d + j] += x[i * d + j];
            }
        }
        for (c, &cnt) in counts.iter().enumerate() {
            for v in &mut centroids[c * d..(c + 1) * d] {
                *v /= cnt as f64;
            }
        }

        let mut displacement = 0.0;
        for (i, &c) in slot.iter().enumerate() {
            let xi = &x[i * d..(i + 1) * d];
            let rival = (0..classes.len())
                .filter(|&k| k != c)
                .min_by(|&a, &b| {
                    let da = sq(xi, &centroids[a * d..(a + 1) * d]);
                    let db = sq(xi, &centroids[b * d..(b + 1) * d]);
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .unwrap();
            let own = &centroids[c * d..(c + 1) * d];
            let other = &centroids[rival * d..(rival + 1) * d];
            let out = &mut next[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] = xi[j] + cfg.ped_step * (own[j] - xi[j])
                    - cfg.ped_step * cfg.ped_repulse * (other[j] - xi[j]);
            }
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                out.iter_mut().for_each(|v| *v /= norm);
            }
            displacement += sq(out, xi).sqrt();
        }
        std::mem::swap(&mut x, &mut next);
        if displacement / (n as f64) < cfg.ped_eps {
            return Ok(iter);
        }
    }
    Ok(cfg.ped_max_iters)
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Applies the trigger rule for one iteration and appends the signal to `history`.
///
/// * one PED iteration: Keep, LogME skipped;
/// * otherwise LogME is computed, and the decision is UpdateAndSwitch when a
///   previous score exists and the absolute change is strictly below the threshold;
/// * after an update every later call keeps (unless multiple updates are allowed).
///
/// `force_update_at` replaces the LogME rule with a fixed labeled-count position.
pub fn decide_update(
    iteration: usize,
    labeled: usize,
    ped_iters: usize,
    features: &FeatureMatrix,
    labels: &[u32],
    history: &mut AlignmentHistory,
    cfg: &AlignmentConfig,
) -> Result<AlignmentSignal> {
    let locked = history.updated && !cfg.allow_multiple_updates;
    let (logme, unconverged) = if ped_iters <= 1 {
        (None, false)
    } else {
        let s = logme_score(features, labels, cfg.logme_tol, cfg.logme_max_iters)?;
        if !s.converged {
            log::warn!("LogME did not converge within {} iterations", cfg.logme_max_iters);
        }
        (Some(s.score), !s.converged)
    };
    let fire = match cfg.force_update_at {
        Some(position) => labeled == position,
        None => match (logme, history.previous_logme()) {
            (Some(now), Some(before)) => (now - before).abs() < cfg.logme_threshold,
            _ => false,
        },
    };
    let decision = if fire && !locked {
        Decision::UpdateAndSwitch
    } else {
        Decision::Keep
    };
    let signal = AlignmentSignal {
        iteration,
        labeled,
        ped_iters,
        logme,
        logme_unconverged: unconverged,
        decision,
    };
    if decision == Decision::UpdateAndSwitch {
        history.updated = true;
    }
    history.signals.push(signal.clone());
    Ok(signal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::seq::SliceRandom;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut r = rng::seeded(seed);
        FeatureMatrix::new(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    }

    #[test]
    fn perfect_features_beat_random() {
        let y: Vec<u32> = (0..20).map(|i| (i % 2) as u32).collect();
        let perfect = FeatureMatrix::new(
            20,
            2,
            y.iter().flat_map(|&l| if l == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect(),
        )
        .unwrap();
        let random = gaussian(20, 2, 1);
        let p = logme_score(&perfect, &y, 1e-6, 100).unwrap().score;
        let r = logme_score(&random, &y, 1e-6, 100).unwrap().score;
        assert!(p > r, "{p} vs {r}");
    }

    #[test]
    fn row_permutation_invariant() {
        let f = gaussian(16, 3, 5);
        let mut r = rng::seeded(2);
        let y: Vec<u32> = (0..16).map(|_| r.random_range(0..3)).collect();
        let mut order: Vec<usize> = (0..16).collect();
        order.shuffle(&mut r);
        let fp = f.select_rows(&order).unwrap();
        let yp: Vec<u32> = order.iter().map(|&i| y[i]).collect();
        let a = logme_score(&f, &y, 1e-6, 100).unwrap().score;
        let b = logme_score(&fp, &yp, 1e-6, 100).unwrap().score;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn logme_errors() {
        let zero = FeatureMatrix::new(3, 2, vec![0.0; 6]).unwrap();
        assert!(matches!(logme_score(&zero, &[0, 1, 0], 1e-6, 100), Err(Error::Degenerate(_))));
        let f = gaussian(3, 2, 0);
        assert!(matches!(logme_score(&f, &[1, 1, 1], 1e-6, 100), Err(Error::Argument(_))));
    }

    #[test]
    fn ped_at_centroids_converges_immediately() {
        // two antipodal classes, every feature on its centroid
        let f = FeatureMatrix::new(4, 2, vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0]).unwrap();
        let y = [0, 0, 1, 1];
        assert_eq!(ped_converge_iters(&f, &y, &AlignmentConfig::default()).unwrap(), 1);
        let single = FeatureMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(ped_converge_iters(&single, &[3, 3], &AlignmentConfig::default()).unwrap(), 1);
    }

    #[test]
    fn ped_interleaved_classes_take_several_iterations() {
        let n = 40;
        let data: Vec<f32> = (0..n)
            .flat_map(|i| {
                let t = i as f32 * std::f32::consts::PI / n as f32;
                [t.cos(), t.sin()]
            })
            .collect();
        let f = FeatureMatrix::new(n, 2, data).unwrap();
        let y: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let cfg = AlignmentConfig::default();
        let iters = ped_converge_iters(&f, &y, &cfg).unwrap();
        assert!(iters > 1);
        assert_eq!(iters, ped_converge_iters(&f, &y, &cfg).unwrap());
    }

    #[test]
    fn decide_rules() {
        let cfg = AlignmentConfig::default();
        let f = gaussian(12, 3, 3);
        let y: Vec<u32> = (0..12).map(|i| (i % 3) as u32).collect();
        let mut h = AlignmentHistory::default();

        let s = decide_update(1, 12, 1, &f, &y, &mut h, &cfg).unwrap();
        assert_eq!(s.decision, Decision::Keep);
        assert!(s.logme.is_none());

        let s = decide_update(2, 12, 4, &f, &y, &mut h, &cfg).unwrap();
        assert_eq!(s.decision, Decision::Keep, "first LogME has nothing to compare to");
        assert!(s.logme.is_some());

        let s = decide_update(3, 12, 4, &f, &y, &mut h, &cfg).unwrap();
        assert_eq!(s.decision, Decision::UpdateAndSwitch);
        assert!(h.updated);

        let s = decide_update(4, 12, 4, &f, &y, &mut h, &cfg).unwrap();
        assert_eq!(s.decision, Decision::Keep);
        assert_eq!(h.update_count(), 1);
    }

    #[test]
    fn threshold_arithmetic() {
        // previous 2.0 recorded by hand, current computed; choose threshold so that
        // |current - 2.0| < threshold exactly mirrors the rule
        let f = gaussian(12, 3, 3);
        let y: Vec<u32> = (0..12).map(|i| (i % 3) as u32).collect();
        let now = logme_score(&f, &y, 1e-6, 100).unwrap().score;
        let mut h = AlignmentHistory {
            signals: vec![AlignmentSignal {
                iteration: 1,
                labeled: 10,
                ped_iters: 4,
                logme: Some(now - 0.3),
                logme_unconverged: false,
                decision: Decision::Keep,
            }],
            updated: false,
        };
        let cfg = AlignmentConfig::default();
        let s = decide_update(2, 12, 4, &f, &y, &mut h.clone(), &cfg).unwrap();
        assert_eq!(s.decision, Decision::UpdateAndSwitch);
        let strict = AlignmentConfig {
            logme_threshold: 0.3 - 1e-9,
            ..cfg
        };
        let s = decide_update(2, 12, 4, &f, &y, &mut h, &strict).unwrap();
        assert_eq!(s.decision, Decision::Keep);
    }

    #[test]
    fn zero_threshold_never_fires() {
        let cfg = AlignmentConfig {
            logme_threshold: 0.0,
            ..Default::default()
        };
        let f = gaussian(12, 3, 3);
        let y: Vec<u32> = (0..12).map(|i| (i % 3) as u32).collect();
        let mut h = AlignmentHistory::default();
        for it in 1..6 {
            let s = decide_update(it, 12, 3, &f, &y, &mut h, &cfg).unwrap();
            assert_eq!(s.decision, Decision::Keep);
        }
    }

    #[test]
    fn forced_position() {
        let cfg = AlignmentConfig {
            force_update_at: Some(20),
            ..Default::default()
        };
        let f = gaussian(12, 3, 3);
        let y: Vec<u32> = (0..12).map(|i| (i % 3) as u32).collect();
        let mut h = AlignmentHistory::default();
        assert_eq!(decide_update(1, 10, 1, &f, &y, &mut h, &cfg).unwrap().decision, Decision::Keep);
        assert_eq!(
            decide_update(2, 20, 1, &f, &y, &mut h, &cfg).unwrap().decision,
            Decision::UpdateAndSwitch
        );
    }
}
