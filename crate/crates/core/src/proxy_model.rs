//! The proxy classifier: `Linear(d, d) -> BatchNorm(d) -> ReLU -> Linear(d, c)`
//! over pre-computed features, trained with SGD + momentum on cross-entropy.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{save_features, FeatureMatrix};
use crate::nn::{self, Linear, LinearOpt, Momentum};
use crate::probs::Probabilities;
use crate::rng;

const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.1,
        }
    }

    fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with running statistics; returns `(x_hat, y)`.
    fn forward_eval(&self, x: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let w = self.width();
        let inv: Vec<f32> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let mut xhat = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for row in x.chunks_exact(w) {
            for j in 0..w {
                let h = (row[j] - self.running_mean[j]) * inv[j];
                xhat.push(h);
                y.push(self.gamma[j] * h + self.beta[j]);
            }
        }
        (xhat, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyNet {
    pub hidden: Linear,
    pub bn: BatchNorm,
    pub output: Linear,
    pub mode: Mode,
}

impl ProxyNet {
    pub fn input_dim(&self) -> usize {
        self.hidden.inputs
    }

    pub fn classes(&self) -> usize {
        self.output.outputs
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.is_finite()
            && self.output.is_finite()
            && self
                .bn
                .gamma
                .iter()
                .chain(&self.bn.beta)
                .chain(&self.bn.running_mean)
                .all(|v| v.is_finite())
            && self.bn.running_var.iter().all(|v| v.is_finite() && *v > 0.0)
    }

    /// Eval-mode logits for `rows` samples.
    pub fn logits(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let h = self.hidden.forward(x, rows);
        let (_, mut a) = self.bn.forward_eval(&h);
        nn::relu_inplace(&mut a);
        self.output.forward(&a, rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyTrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub train_batch: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for ProxyTrainConfig {
    fn default() -> Self {
        ProxyTrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 50,
            train_batch: 2048,
            eval_batch: 16384,
            seed: 0,
        }
    }
}

impl ProxyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("proxy.lr", "must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("proxy.epochs", "must be >= 1"));
        }
        if self.train_batch == 0 {
            return Err(Error::config("proxy.train_batch", "must be >= 1"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("proxy.eval_batch", "must be >= 1"));
        }
        if self.weight_decay < 0.0 || self.momentum < 0.0 {
            return Err(Error::config("proxy", "momentum and weight_decay must be >= 0"));
        }
        Ok(())
    }
}

pub fn init_proxy(d: usize, c: usize, seed: u64) -> Result<ProxyNet> {
    if d == 0 {
        return Err(Error::Argument("proxy input dimension must be >= 1".into()));
    }
    if c < 2 {
        return Err(Error::Argument("proxy needs at least 2 classes".into()));
    }
    let mut r = rng::seeded(seed);
    let hidden = Linear::init(d, d, &mut r);
    let output = Linear::init(d, c, &mut r);
    Ok(ProxyNet {
        hidden,
        bn: BatchNorm::new(d),
        output,
        mode: Mode::Eval,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedProxy {
    pub net: ProxyNet,
    /// Mean training cross-entropy per epoch.
    pub losses: Vec<f64>,
}

struct Grads {
    hidden: nn::LinearGrad,
    gamma: Vec<f32>,
    beta: Vec<f32>,
    output: nn::LinearGrad,
}

struct Opt {
    hidden: LinearOpt,
    gamma: Momentum,
    beta: Momentum,
    output: LinearOpt,
}

pub fn train_proxy(
    net: &ProxyNet,
    features: &FeatureMatrix,
    labels: &[u32],
    cfg: &ProxyTrainConfig,
) -> Result<TrainedProxy> {
    cfg.validate()?;
    let n = features.n();
    if n == 0 || labels.is_empty() {
        return Err(Error::Training("empty labeled set".into()));
    }
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    if features.d() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            found: features.d(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= net.classes()) {
        return Err(Error::Argument(format!(
            "label {y} out of range for {} classes",
            net.classes()
        )));
    }

    let mut net = net.clone();
    net.mode = Mode::Train;
    let d = net.input_dim();
    let c = net.classes();
    let mut opt = Opt {
        hidden: LinearOpt::new(&net.hidden, cfg.lr, cfg.momentum, cfg.weight_decay),
        gamma: Momentum::new(d, cfg.lr, cfg.momentum, cfg.weight_decay),
        beta: Momentum::new(d, cfg.lr, cfg.momentum, cfg.weight_decay),
        output: LinearOpt::new(&net.output, cfg.lr, cfg.momentum, cfg.weight_decay),
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::derived(cfg.seed, &[rng::tag::PROXY]);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut xb = Vec::with_capacity(cfg.train_batch.min(n) * d);
    let mut yb = Vec::with_capacity(cfg.train_batch.min(n));

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.train_batch) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(features.row(i));
                yb.push(labels[i]);
            }
            let loss = train_step(&mut net, &mut opt, &xb, &yb, c);
            epoch_loss += loss * chunk.len() as f64;
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() || !net.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        losses.push(mean);
    }
    net.mode = Mode::Eval;
    Ok(TrainedProxy { net, losses })
}

fn train_step(net: &mut ProxyNet, opt: &mut Opt, x: &[f32], y: &[u32], c: usize) -> f64 {
    let rows = y.len();
    let w = net.input_dim();
    let h = net.hidden.forward(x, rows);

    // Batch statistics, or running statistics for a single-sample batch.
    let use_batch_stats = rows > 1;
    let (mean, var) = if use_batch_stats {
        let mut mean = vec![0.0f32; w];
        for row in h.chunks_exact(w) {
            nn::axpy(1.0, row, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f32);
        let mut var = vec![0.0f32; w];
        for row in h.chunks_exact(w) {
            for j in 0..w {
                let dv = row[j] - mean[j];
                var[j] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f32);
        (mean, var)
    } else {
        (net.bn.running_mean.clone(), net.bn.running_var.clone())
    };
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Vec::with_capacity(h.len());
    let mut a = Vec::with_capacity(h.len());
    for row in h.chunks_exact(w) {
        for j in 0..w {
            let v = (row[j] - mean[j]) * inv_std[j];
            xhat.push(v);
            a.push((net.bn.gamma[j] * v + net.bn.beta[j]).max(0.0));
        }
    }
    let logits = net.output.forward(&a, rows);
    let (loss, dlogits) = nn::cross_entropy(&logits, c, y);

    let mut grads = Grads {
        hidden: net.hidden.zero_grad(),
        gamma: vec![0.0; w],
        beta: vec![0.0; w],
        output: net.output.zero_grad(),
    };
    let mut da = net
        .output
        .backward(&a, &dlogits, &mut grads.output, true)
        .expect("input grad requested");
    nn::relu_backward(&a, &mut da);

    let mut dxhat = vec![0.0f32; h.len()];
    for r in 0..rows {
        for j in 0..w {
            let g = da[r * w + j];
            grads.gamma[j] += g * xhat[r * w + j];
            grads.beta[j] += g;
            dxhat[r * w + j] = g * net.bn.gamma[j];
        }
    }
    let dh = if use_batch_stats {
        let mut sum_dxhat = vec![0.0f32; w];
        let mut sum_dxhat_xhat = vec![0.0f32; w];
        for r in 0..rows {
            for j in 0..w {
                sum_dxhat[j] += dxhat[r * w + j];
                sum_dxhat_xhat[j] += dxhat[r * w + j] * xhat[r * w + j];
            }
        }
        let m = rows as f32;
        let mut dh = vec![0.0f32; h.len()];
        for r in 0..rows {
            for j in 0..w {
                let k = r * w + j;
                dh[k] = inv_std[j] / m * (m * dxhat[k] - sum_dxhat[j] - xhat[k] * sum_dxhat_xhat[j]);
            }
        }
        dh
    } else {
        dxhat
            .chunks_exact(w)
            .flat_map(|row| row.iter().zip(&inv_std).map(|(g, s)| g * s))
            .collect()
    };
    net.hidden.backward(x, &dh, &mut grads.hidden, false);

    opt.hidden.step(&mut net.hidden, &grads.hidden);
    opt.gamma.step(&mut net.bn.gamma, &grads.gamma);
    opt.beta.step(&mut net.bn.beta, &grads.beta);
    opt.output.step(&mut net.output, &grads.output);

    if use_batch_stats {
        let mom = net.bn.momentum;
        let unbiased = rows as f32 / (rows as f32 - 1.0);
        for j in 0..w {
            net.bn.running_mean[j] = (1.0 - mom) * net.bn.running_mean[j] + mom * mean[j];
            net.bn.running_var[j] = (1.0 - mom) * net.bn.running_var[j] + mom * var[j] * unbiased;
        }
    }
    loss
}

/// Softmax probabilities in eval mode. Rows are independent, so the result does
/// not depend on `eval_batch`.
pub fn predict_proba(net: &ProxyNet, features: &FeatureMatrix, eval_batch: usize) -> Result<Probabilities> {
    if net.mode != Mode::Eval {
        return Err(Error::Argument("proxy must be in eval mode for prediction".into()));
    }
    if features.d() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            found: features.d(),
        });
    }
    let c = net.classes();
    let d = features.d();
    let batch = eval_batch.max(1);
    let mut logits = Vec::with_capacity(features.n() * c);
    for chunk in features.data().chunks(batch * d) {
        logits.extend(net.logits(chunk, chunk.len() / d));
    }
    Ok(Probabilities::from_logits(&logits, features.n(), c))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    tensors: Vec<CheckpointEntry>,
    bn_momentum: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

/// Debug checkpoint: one ALFV1 file per parameter tensor plus `index.json`.
pub fn save_checkpoint(net: &ProxyNet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let d = net.input_dim();
    let c = net.classes();
    let tensors: [(&str, usize, usize, &[f32]); 8] = [
        ("hidden.weight", d, d, &net.hidden.weight),
        ("hidden.bias", 1, d, &net.hidden.bias),
        ("bn.gamma", 1, d, &net.bn.gamma),
        ("bn.beta", 1, d, &net.bn.beta),
        ("bn.running_mean", 1, d, &net.bn.running_mean),
        ("bn.running_var", 1, d, &net.bn.running_var),
        ("output.weight", c, d, &net.output.weight),
        ("output.bias", 1, c, &net.output.bias),
    ];
    let mut entries = Vec::new();
    for (name, rows, cols, data) in tensors {
        let file = format!("{name}.alfv1");
        save_features(&FeatureMatrix::new(rows, cols, data.to_vec())?, dir.join(&file))?;
        entries.push(CheckpointEntry {
            name: name.into(),
            file,
            rows,
            cols,
        });
    }
    let index = CheckpointIndex {
        tensors: entries,
        bn_momentum: net.bn.momentum,
    };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::storage(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ProxyNet> {
    let dir = dir.as_ref();
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    let get = |name: &str| -> Result<(usize, usize, Vec<f32>)> {
        let e = index
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks {name}")))?;
        let m = crate::feature_store::read_features(dir.join(&e.file))?;
        Ok((m.n(), m.d(), m.into_data()))
    };
    let (d, _, hw) = get("hidden.weight")?;
    let (c, _, ow) = get("output.weight")?;
    Ok(ProxyNet {
        hidden: Linear {
            inputs: d,
            outputs: d,
            weight: hw,
            bias: get("hidden.bias")?.2,
        },
        bn: BatchNorm {
            gamma: get("bn.gamma")?.2,
            beta: get("bn.beta")?.2,
            running_mean: get("bn.running_mean")?.2,
            running_var: get("bn.running_var")?.2,
            momentum: index.bn_momentum,
        },
        output: Linear {
            inputs: d,
            outputs: c,
            weight: ow,
            bias: get("output.bias")?.2,
        },
        mode: Mode::Eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(per_class: usize, sep: f32, seed: u64) -> (FeatureMatrix, Vec<u32>) {
        let mut r = rng::seeded(seed);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for class in 0..2u32 {
            let cx = if class == 0 { -sep / 2.0 } else { sep / 2.0 };
            for _ in 0..per_class {
                let a: f32 = StandardNormal.sample(&mut r);
                let b: f32 = StandardNormal.sample(&mut r);
                data.extend([cx + a, b]);
                y.push(class);
            }
        }
        (FeatureMatrix::new(2 * per_class, 2, data).unwrap(), y)
    }

    /// Best accuracy of any axis-aligned threshold on the first coordinate.
    fn brute_force_separator_accuracy(f: &FeatureMatrix, y: &[u32]) -> f64 {
        let mut best = 0.0f64;
        for i in 0..f.n() {
            let t = f.row(i)[0];
            let acc = (0..f.n())
                .filter(|&j| (f.row(j)[0] > t) == (y[j] == 1))
                .count() as f64
                / f.n() as f64;
            best = best.max(acc);
        }
        best
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        assert_eq!(init_proxy(4, 3, 1).unwrap(), init_proxy(4, 3, 1).unwrap());
        assert!(matches!(init_proxy(0, 3, 1), Err(Error::Argument(_))));
        assert!(matches!(init_proxy(3, 1, 1), Err(Error::Argument(_))));
        let net = init_proxy(4, 3, 9).unwrap();
        assert_eq!(net.mode, Mode::Eval);
        let x = FeatureMatrix::new(2, 4, vec![1e3, -2.0, 0.0, 5.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(net.logits(x.data(), 2).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn separated_blobs_are_learned() {
        let (f, y) = blobs(100, 6.0, 11);
        // the blobs admit a near-perfect linear separator
        assert!(brute_force_separator_accuracy(&f, &y) >= 0.99);
        let net = init_proxy(2, 2, 5).unwrap();
        let trained = train_proxy(&net, &f, &y, &ProxyTrainConfig::default()).unwrap();
        let p = predict_proba(&trained.net, &f, 16384).unwrap();
        assert!(p.accuracy(&y) >= 0.99, "accuracy {}", p.accuracy(&y));
    }

    #[test]
    fn one_sample_per_class() {
        let f = FeatureMatrix::new(2, 3, vec![0.6, 0.8, 0.0, 0.0, -0.6, 0.8]).unwrap();
        let y = [0, 1];
        let net = init_proxy(3, 2, 2).unwrap();
        let trained = train_proxy(&net, &f, &y, &ProxyTrainConfig::default()).unwrap();
        let p = predict_proba(&trained.net, &f, 16384).unwrap();
        assert_eq!(p.accuracy(&y), 1.0);
    }

    #[test]
    fn random_labels_loss_does_not_increase() {
        let mut r = rng::seeded(4);
        let n = 300;
        let d = 8;
        let data = (0..n * d).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let f = FeatureMatrix::new(n, d, data).unwrap();
        let y: Vec<u32> = (0..n).map(|_| r.random_range(0..4)).collect();
        let net = init_proxy(d, 4, 3).unwrap();
        let cfg = ProxyTrainConfig {
            train_batch: 32,
            ..Default::default()
        };
        let t = train_proxy(&net, &f, &y, &cfg).unwrap();
        assert_eq!(t.losses.len(), 50);
        assert!(t.losses.last().unwrap() <= t.losses.first().unwrap());
    }

    #[test]
    fn training_errors() {
        let net = init_proxy(2, 2, 0).unwrap();
        let f = FeatureMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            train_proxy(&net, &f, &[], &ProxyTrainConfig::default()),
            Err(Error::Training(_)) | Err(Error::Argument(_))
        ));
        let cfg = ProxyTrainConfig {
            lr: 1e30,
            train_batch: 1,
            ..Default::default()
        };
        let f = FeatureMatrix::new(2, 2, vec![1e10, 0.0, -1e10, 1.0]).unwrap();
        assert!(matches!(
            train_proxy(&net, &f, &[0, 1], &cfg),
            Err(Error::Divergence { epoch: 1, .. })
        ));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (f, y) = blobs(40, 2.0, 3);
        let net = init_proxy(2, 2, 5).unwrap();
        let cfg = ProxyTrainConfig {
            train_batch: 16,
            seed: 99,
            ..Default::default()
        };
        let a = train_proxy(&net, &f, &y, &cfg).unwrap();
        let b = train_proxy(&net, &f, &y, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn eval_is_batch_size_invariant() {
        let (f, y) = blobs(30, 2.0, 8);
        let net = init_proxy(2, 2, 1).unwrap();
        let trained = train_proxy(&net, &f, &y, &ProxyTrainConfig { train_batch: 8, ..Default::default() }).unwrap();
        let all = predict_proba(&trained.net, &f, 16384).unwrap();
        let small = predict_proba(&trained.net, &f, 7).unwrap();
        for i in 0..f.n() {
            let single = predict_proba(&trained.net, &f.select_rows(&[i]).unwrap(), 1).unwrap();
            for k in 0..2 {
                assert!((single.row(0)[k] - all.row(i)[k]).abs() <= 1e-6);
                assert!((small.row(i)[k] - all.row(i)[k]).abs() <= 1e-6);
            }
            let s: f64 = all.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(all.row(i).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn predict_rejects_wrong_dimension() {
        let net = init_proxy(3, 2, 0).unwrap();
        let f = FeatureMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            predict_proba(&net, &f, 10),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (f, y) = blobs(20, 3.0, 2);
        let t = train_proxy(&init_proxy(2, 2, 4).unwrap(), &f, &y, &ProxyTrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&t.net, dir.path()).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), t.net);
    }
}
