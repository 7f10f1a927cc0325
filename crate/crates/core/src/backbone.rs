//! Desk-scale stand-in for a pre-trained backbone: an MLP encoder with a linear
//! head, FT and LP-FT schedules, feature extraction and exchange-head probes,
//! plus the synthetic benchmark whose "pre-training" uses coarse labels only.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature_store::{l2_normalize_rows, FeatureMatrix};
use crate::nn::{self, Linear, LinearOpt};
use crate::probs::Probabilities;
use crate::rng;

/// `d_in -> hidden (ReLU) -> d_feat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub input: Linear,
    pub output: Linear,
}

impl Encoder {
    pub fn init(d_in: usize, hidden: usize, d_feat: usize, rng: &mut rng::Rng) -> Self {
        Encoder {
            input: Linear::init(d_in, hidden, rng),
            output: Linear::init(hidden, d_feat, rng),
        }
    }

    /// An encoder that reproduces its input exactly: `relu(x) - relu(-x) = x`.
    /// Used to put a trainable adapter on top of externally exported features.
    pub fn identity(d: usize) -> Self {
        let h = 2 * d;
        let mut w1 = vec![0.0; h * d];
        let mut w2 = vec![0.0; d * h];
        for i in 0..d {
            w1[i * d + i] = 1.0;
            w1[(d + i) * d + i] = -1.0;
            w2[i * h + i] = 1.0;
            w2[i * h + d + i] = -1.0;
        }
        Encoder {
            input: Linear {
                inputs: d,
                outputs: h,
                weight: w1,
                bias: vec![0.0; h],
            },
            output: Linear {
                inputs: h,
                outputs: d,
                weight: w2,
                bias: vec![0.0; d],
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.inputs
    }

    pub fn feature_dim(&self) -> usize {
        self.output.outputs
    }

    /// Returns `(hidden activations, encoder outputs)`.
    fn forward(&self, x: &[f32], rows: usize) -> (Vec<f32>, Vec<f32>) {
        let mut a = self.input.forward(x, rows);
        nn::relu_inplace(&mut a);
        let z = self.output.forward(&a, rows);
        (a, z)
    }

    pub fn encode(&self, x: &[f32], rows: usize) -> Vec<f32> {
        self.forward(x, rows).1
    }

    /// SHA-256 over the little-endian bytes of every encoder parameter.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.input.params().chain(self.output.params()) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn is_finite(&self) -> bool {
        self.input.is_finite() && self.output.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneNet {
    pub encoder: Encoder,
    pub head: Linear,
    /// Identifies the weight snapshot (e.g. `pretrained`, `ft@300`).
    pub tag: String,
}

impl BackboneNet {
    /// Attaches a freshly initialized `c`-way head to `encoder`.
    pub fn with_fresh_head(encoder: &Encoder, classes: usize, seed: u64, tag: impl Into<String>) -> Self {
        let mut r = rng::derived(seed, &[rng::tag::HEAD]);
        BackboneNet {
            head: Linear::init(encoder.feature_dim(), classes, &mut r),
            encoder: encoder.clone(),
            tag: tag.into(),
        }
    }

    pub fn classes(&self) -> usize {
        self.head.outputs
    }

    pub fn logits(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let z = self.encoder.encode(x, rows);
        self.head.forward(&z, rows)
    }

    pub fn predict_proba(&self, x: &Inputs) -> Result<Probabilities> {
        self.check_inputs(x)?;
        Ok(Probabilities::from_logits(
            &self.logits(&x.data, x.n),
            x.n,
            self.classes(),
        ))
    }

    pub fn accuracy(&self, x: &Inputs, y: &[u32]) -> Result<f64> {
        Ok(self.predict_proba(x)?.accuracy(y))
    }

    fn check_inputs(&self, x: &Inputs) -> Result<()> {
        if x.d != self.encoder.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.encoder.input_dim(),
                found: x.d,
            });
        }
        Ok(())
    }
}

/// Raw model inputs, `n × d` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl Inputs {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn select(&self, indices: &[usize]) -> Inputs {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Inputs {
            n: indices.len(),
            d: self.d,
            data,
        }
    }
}

impl From<&FeatureMatrix> for Inputs {
    fn from(m: &FeatureMatrix) -> Self {
        Inputs {
            n: m.n(),
            d: m.d(),
            data: m.data().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMethod {
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "LPFT")]
    LpFt,
}

impl std::fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMethod::Ft => "FT",
            TrainMethod::LpFt => "LPFT",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub kind: TrainMethod,
    pub ft_epochs: usize,
    pub lp_epochs: usize,
    pub lr_head: f32,
    pub lr_backbone: f32,
    pub lr_lp: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.kind == TrainMethod::LpFt && self.lp_epochs == 0 {
            return Err(Error::Argument("LP-FT needs lp_epochs >= 1".into()));
        }
        if !(self.lr_head > 0.0 && self.lr_backbone > 0.0 && self.lr_lp > 0.0) {
            return Err(Error::Argument("all learning rates must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainSchedule { seed, ..self.clone() }
    }
}

/// Encoder hashes taken around the frozen linear-probing phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub before: String,
    pub after: String,
}

impl FreezeCheck {
    pub fn holds(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: BackboneNet,
    /// Mean cross-entropy per epoch, LP epochs first.
    pub losses: Vec<f64>,
    pub lp_freeze: Option<FreezeCheck>,
}

/// Trains `net` on labeled inputs. FT updates every parameter from the first
/// epoch; LP-FT first trains the head alone on frozen encoder outputs, then
/// trains everything jointly.
pub fn train(net: &BackboneNet, x: &Inputs, y: &[u32], schedule: &TrainSchedule) -> Result<TrainOutcome> {
    schedule.validate()?;
    if x.n == 0 || y.is_empty() {
        return Err(Error::Training("empty labeled set".into()));
    }
    if y.len() != x.n {
        return Err(Error::Argument(format!("{} labels for {} inputs", y.len(), x.n)));
    }
    net.check_inputs(x)?;
    if let Some(&bad) = y.iter().find(|&&v| v as usize >= net.classes()) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {} classes",
            net.classes()
        )));
    }

    let mut net = net.clone();
    let mut losses = Vec::new();
    let mut rng = rng::seeded(schedule.seed);
    let mut lp_freeze = None;

    if schedule.kind == TrainMethod::LpFt {
        let before = net.encoder.param_hash();
        linear_probe(&mut net, x, y, schedule, &mut rng, &mut losses)?;
        lp_freeze = Some(FreezeCheck {
            before,
            after: net.encoder.param_hash(),
        });
    }
    fine_tune(&mut net, x, y, schedule, &mut rng, &mut losses)?;
    Ok(TrainOutcome {
        net,
        losses,
        lp_freeze,
    })
}

fn linear_probe(
    net: &mut BackboneNet,
    x: &Inputs,
    y: &[u32],
    s: &TrainSchedule,
    rng: &mut rng::Rng,
    losses: &mut Vec<f64>,
) -> Result<()> {
    let d = net.encoder.feature_dim();
    let c = net.classes();
    // frozen encoder: features are computed once
    let z = net.encoder.encode(&x.data, x.n);
    let mut opt = LinearOpt::new(&net.head, s.lr_lp, s.momentum, s.weight_decay);
    let mut order: Vec<usize> = (0..x.n).collect();
    let mut zb = Vec::new();
    let mut yb = Vec::new();
    for epoch in 1..=s.lp_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(s.batch_size) {
            zb.clear();
            yb.clear();
            for &i in chunk {
                zb.extend_from_slice(&z[i * d..(i + 1) * d]);
                yb.push(y[i]);
            }
            let logits = net.head.forward(&zb, chunk.len());
            let (loss, dlogits) = nn::cross_entropy(&logits, c, &yb);
            let mut g = net.head.zero_grad();
            net.head.backward(&zb, &dlogits, &mut g, false);
            opt.step(&mut net.head, &g);
            total += loss * chunk.len() as f64;
        }
        let mean = total / x.n as f64;
        if !mean.is_finite() || !net.head.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        losses.push(mean);
    }
    Ok(())
}

fn fine_tune(
    net: &mut BackboneNet,
    x: &Inputs,
    y: &[u32],
    s: &TrainSchedule,
    rng: &mut rng::Rng,
    losses: &mut Vec<f64>,
) -> Result<()> {
    let c = net.classes();
    let mut opt_in = LinearOpt::new(&net.encoder.input, s.lr_backbone, s.momentum, s.weight_decay);
    let mut opt_out = LinearOpt::new(&net.encoder.output, s.lr_backbone, s.momentum, s.weight_decay);
    let mut opt_head = LinearOpt::new(&net.head, s.lr_head, s.momentum, s.weight_decay);
    let mut order: Vec<usize> = (0..x.n).collect();
    let mut xb = Vec::new();
    let mut yb = Vec::new();
    let offset = losses.len();
    for epoch in 1..=s.ft_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(s.batch_size) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(x.row(i));
                yb.push(y[i]);
            }
            let rows = chunk.len();
            let (a, z) = net.encoder.forward(&xb, rows);
            let logits = net.head.forward(&z, rows);
            let (loss, dlogits) = nn::cross_entropy(&logits, c, &yb);

            let mut g_head = net.head.zero_grad();
            let dz = net.head.backward(&z, &dlogits, &mut g_head, true).unwrap();
            let mut g_out = net.encoder.output.zero_grad();
            let mut da = net.encoder.output.backward(&a, &dz, &mut g_out, true).unwrap();
            nn::relu_backward(&a, &mut da);
            let mut g_in = net.encoder.input.zero_grad();
            net.encoder.input.backward(&xb, &da, &mut g_in, false);

            opt_head.step(&mut net.head, &g_head);
            opt_out.step(&mut net.encoder.output, &g_out);
            opt_in.step(&mut net.encoder.input, &g_in);
            total += loss * rows as f64;
        }
        let mean = total / x.n as f64;
        if !mean.is_finite() || !net.encoder.is_finite() || !net.head.is_finite() {
            return Err(Error::Divergence {
                epoch: offset + epoch,
                loss: mean,
            });
        }
        losses.push(mean);
    }
    Ok(())
}

/// Encoder outputs with unit-norm rows.
pub fn extract_features(encoder: &Encoder, x: &Inputs) -> Result<FeatureMatrix> {
    if x.d != encoder.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.input_dim(),
            found: x.d,
        });
    }
    let z = encoder.encode(&x.data, x.n);
    let raw = FeatureMatrix::new(x.n, encoder.feature_dim(), z)?;
    l2_normalize_rows(&raw)
}

/// Accuracy of `head` mounted on the (pre-trained) `encoder`.
pub fn exchange_head_accuracy(encoder: &Encoder, head: &Linear, x: &Inputs, y: &[u32]) -> Result<f64> {
    if head.inputs != encoder.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.feature_dim(),
            found: head.inputs,
        });
    }
    let composite = BackboneNet {
        encoder: encoder.clone(),
        head: head.clone(),
        tag: "exchange".into(),
    };
    composite.accuracy(x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub d_in: usize,
    pub hidden: usize,
    pub d_feat: usize,
    pub c_fine: usize,
    pub c_coarse: usize,
    /// Norm of each coarse-group centroid.
    pub separation: f32,
    /// Distance between a fine centroid and its coarse centroid.
    pub fine_spread: f32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 5000,
            d_in: 32,
            hidden: 64,
            d_feat: 32,
            c_fine: 10,
            c_coarse: 5,
            separation: 1.0,
            fine_spread: 0.375,
            noise: 0.25,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.separation > 0.0) {
            return Err(Error::config("synth.separation", "must be > 0"));
        }
        if self.c_coarse == 0 || self.c_coarse >= self.c_fine {
            return Err(Error::config("synth.c_coarse", "must satisfy 1 <= c_coarse < c_fine"));
        }
        if self.n < self.c_fine {
            return Err(Error::config("synth.n", "needs at least one sample per fine class"));
        }
        if self.d_in == 0 || self.hidden == 0 || self.d_feat == 0 {
            return Err(Error::config("synth", "dimensions must be >= 1"));
        }
        if !(self.noise >= 0.0) || !(self.fine_spread >= 0.0) {
            return Err(Error::config("synth.noise", "noise and fine_spread must be >= 0"));
        }
        Ok(())
    }

    pub fn coarse_of(&self, fine: u32) -> u32 {
        fine % self.c_coarse as u32
    }

    fn centroids(&self) -> Vec<Vec<f32>> {
        let mut r = rng::seeded(self.seed);
        let unit = |r: &mut rng::Rng| {
            let v: Vec<f32> = (0..self.d_in).map(|_| StandardNormal.sample(r)).collect();
            let n = nn::dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f32>>()
        };
        let coarse: Vec<Vec<f32>> = (0..self.c_coarse)
            .map(|_| unit(&mut r).into_iter().map(|x| x * self.separation).collect())
            .collect();
        (0..self.c_fine)
            .map(|f| {
                let base = &coarse[self.coarse_of(f as u32) as usize];
                let off = unit(&mut r);
                base.iter()
                    .zip(off)
                    .map(|(b, o)| b + self.fine_spread * o)
                    .collect()
            })
            .collect()
    }

    fn sample(&self, n: usize, seed: u64) -> SynthData {
        let centroids = self.centroids();
        let mut r = rng::seeded(seed);
        let mut fine: Vec<u32> = (0..n).map(|i| (i % self.c_fine) as u32).collect();
        fine.shuffle(&mut r);
        let mut data = Vec::with_capacity(n * self.d_in);
        for &f in &fine {
            for &c in &centroids[f as usize] {
                let e: f32 = StandardNormal.sample(&mut r);
                data.push(c + self.noise * e);
            }
        }
        let coarse = fine.iter().map(|&f| self.coarse_of(f)).collect();
        SynthData {
            x: Inputs {
                n,
                d: self.d_in,
                data,
            },
            fine,
            coarse,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub x: Inputs,
    pub fine: Vec<u32>,
    pub coarse: Vec<u32>,
}

/// Class centroid plus isotropic Gaussian noise; fine classes are balanced
/// (`n mod c_fine` classes get one extra sample).
pub fn gen_synth(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    Ok(spec.sample(spec.n, rng::derive(spec.seed, &[0])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            samples: 5000,
            epochs: 20,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 128,
        }
    }
}

/// Supervised training on coarse labels over an independent draw from the
/// benchmark distribution. The result separates coarse groups while leaving
/// fine classes within a group partly entangled.
pub fn pretrain(spec: &SynthSpec, cfg: &PretrainConfig, seed: u64) -> Result<BackboneNet> {
    spec.validate()?;
    let data = spec.sample(cfg.samples.max(spec.c_fine), rng::derive(seed, &[rng::tag::PRETRAIN]));
    let mut r = rng::derived(seed, &[rng::tag::PRETRAIN, 1]);
    let encoder = Encoder::init(spec.d_in, spec.hidden, spec.d_feat, &mut r);
    let net = BackboneNet::with_fresh_head(&encoder, spec.c_coarse, seed, "init");
    let schedule = TrainSchedule {
        kind: TrainMethod::Ft,
        ft_epochs: cfg.epochs,
        lp_epochs: 0,
        lr_head: cfg.lr,
        lr_backbone: cfg.lr,
        lr_lp: cfg.lr,
        weight_decay: 0.0,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        seed: rng::derive(seed, &[rng::tag::PRETRAIN, 2]),
    };
    let mut out = train(&net, &data.x, &data.coarse, &schedule)?.net;
    out.tag = "pretrained".into();
    Ok(out)
}

/// Training-free classifier helper for tests and probes: a linear head fitted
/// on frozen encoder outputs.
pub fn linear_probe_accuracy(
    encoder: &Encoder,
    train_x: &Inputs,
    train_y: &[u32],
    eval_x: &Inputs,
    eval_y: &[u32],
    classes: usize,
    schedule: &TrainSchedule,
) -> Result<f64> {
    let net = BackboneNet::with_fresh_head(encoder, classes, schedule.seed, "probe");
    let lp = TrainSchedule {
        kind: TrainMethod::LpFt,
        ft_epochs: 0,
        lp_epochs: schedule.lp_epochs.max(1),
        ..schedule.clone()
    };
    train(&net, train_x, train_y, &lp)?.net.accuracy(eval_x, eval_y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n: 600,
            ..Default::default()
        }
    }

    fn schedule(kind: TrainMethod) -> TrainSchedule {
        TrainSchedule {
            kind,
            ft_epochs: 5,
            lp_epochs: 3,
            lr_head: 0.1,
            lr_backbone: 0.01,
            lr_lp: 0.5,
            weight_decay: 0.0,
            momentum: 0.9,
            batch_size: 64,
            seed: 1,
        }
    }

    #[test]
    fn synth_is_balanced_and_seeded() {
        let spec = SynthSpec {
            n: 100,
            ..Default::default()
        };
        let a = gen_synth(&spec).unwrap();
        for c in 0..10 {
            assert_eq!(a.fine.iter().filter(|&&f| f == c).count(), 10);
        }
        assert_eq!(a, gen_synth(&spec).unwrap());
        assert!(a.coarse.iter().zip(&a.fine).all(|(&c, &f)| c == f % 5));

        let bad = SynthSpec {
            separation: 0.0,
            ..spec
        };
        assert!(gen_synth(&bad).is_err());
    }

    #[test]
    fn identity_encoder_is_exact() {
        let e = Encoder::identity(3);
        let x = [0.5f32, -1.25, 0.0, 3.0, -0.0, -7.5];
        assert_eq!(e.encode(&x, 2), x.to_vec());
    }

    #[test]
    fn lp_phase_freezes_encoder() {
        let spec = small_spec();
        let data = gen_synth(&spec).unwrap();
        let mut r = rng::seeded(0);
        let enc = Encoder::init(spec.d_in, 16, 8, &mut r);
        let net = BackboneNet::with_fresh_head(&enc, 10, 0, "t");
        let lp_only = TrainSchedule {
            ft_epochs: 0,
            ..schedule(TrainMethod::LpFt)
        };
        let out = train(&net, &data.x, &data.fine, &lp_only).unwrap();
        let check = out.lp_freeze.unwrap();
        assert!(check.holds());
        assert_eq!(out.net.encoder, enc);
        assert_ne!(out.net.head, net.head);

        let full = train(&net, &data.x, &data.fine, &schedule(TrainMethod::LpFt)).unwrap();
        assert!(full.lp_freeze.unwrap().holds());
        assert_ne!(full.net.encoder, enc);
    }

    #[test]
    fn ft_with_zero_epochs_is_identity() {
        let spec = small_spec();
        let data = gen_synth(&spec).unwrap();
        let mut r = rng::seeded(0);
        let net = BackboneNet::with_fresh_head(&Encoder::init(spec.d_in, 16, 8, &mut r), 10, 0, "t");
        let s = TrainSchedule {
            ft_epochs: 0,
            ..schedule(TrainMethod::Ft)
        };
        assert_eq!(train(&net, &data.x, &data.fine, &s).unwrap().net, net);
        assert!(matches!(
            train(&net, &data.x.select(&[]), &[], &s),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn training_is_reproducible_and_features_unit_norm() {
        let spec = small_spec();
        let data = gen_synth(&spec).unwrap();
        let pre = pretrain(&spec, &PretrainConfig { samples: 600, epochs: 3, ..Default::default() }, 4).unwrap();
        let pre2 = pretrain(&spec, &PretrainConfig { samples: 600, epochs: 3, ..Default::default() }, 4).unwrap();
        assert_eq!(pre.encoder.param_hash(), pre2.encoder.param_hash());

        let f0 = extract_features(&pre.encoder, &data.x).unwrap();
        assert_eq!(f0, extract_features(&pre.encoder, &data.x).unwrap());
        assert!(f0.is_normalized());
        for r in f0.rows() {
            let n: f32 = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }

        let net = BackboneNet::with_fresh_head(&pre.encoder, 10, 3, "ft");
        let a = train(&net, &data.x, &data.fine, &schedule(TrainMethod::Ft)).unwrap();
        let b = train(&net, &data.x, &data.fine, &schedule(TrainMethod::Ft)).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.losses, b.losses);
        let f1 = extract_features(&a.net.encoder, &data.x).unwrap();
        assert_ne!(f0, f1);
    }

    #[test]
    fn exchange_head_of_untouched_encoder_equals_model_accuracy() {
        let spec = small_spec();
        let data = gen_synth(&spec).unwrap();
        let pre = pretrain(&spec, &PretrainConfig { samples: 600, epochs: 3, ..Default::default() }, 4).unwrap();
        let net = BackboneNet::with_fresh_head(&pre.encoder, 10, 3, "lp");
        let s = TrainSchedule {
            ft_epochs: 0,
            ..schedule(TrainMethod::LpFt)
        };
        let lp = train(&net, &data.x, &data.fine, &s).unwrap().net;
        let direct = lp.accuracy(&data.x, &data.fine).unwrap();
        let exchanged = exchange_head_accuracy(&pre.encoder, &lp.head, &data.x, &data.fine).unwrap();
        assert_eq!(direct, exchanged);

        let wrong = Linear::init(3, 10, &mut rng::seeded(0));
        assert!(matches!(
            exchange_head_accuracy(&pre.encoder, &wrong, &data.x, &data.fine),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn random_head_is_near_chance() {
        // balanced 10-class eval set of 2000 samples: chance 0.1, 3σ ≈ 0.0201
        let spec = SynthSpec {
            n: 2000,
            ..Default::default()
        };
        let data = gen_synth(&spec).unwrap();
        let pre = pretrain(&spec, &PretrainConfig { samples: 600, epochs: 3, ..Default::default() }, 4).unwrap();
        let sigma = (0.1f64 * 0.9 / 2000.0).sqrt();
        let mut mean = 0.0;
        let heads = 20;
        for s in 0..heads {
            let head = BackboneNet::with_fresh_head(&pre.encoder, 10, 100 + s, "rand").head;
            mean += exchange_head_accuracy(&pre.encoder, &head, &data.x, &data.fine).unwrap();
        }
        mean /= heads as f64;
        // averaging over heads tightens the binomial band
        assert!((mean - 0.1).abs() <= 3.0 * sigma + 0.02, "mean random-head accuracy {mean}");
    }
}
