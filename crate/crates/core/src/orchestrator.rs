//! Active-learning pipelines: standard (full model selects), proxy selection
//! over pre-computed features, and the aligned variant that refreshes those
//! features once the alignment trigger fires.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{decide_update, ped_converge_iters, AlignmentConfig, AlignmentHistory, AlignmentSignal, Decision};
use crate::backbone::{
    self, exchange_head_accuracy, extract_features, gen_synth, pretrain, BackboneNet, Encoder, FreezeCheck, Inputs,
    PretrainConfig, SynthSpec, TrainMethod, TrainOutcome, TrainSchedule,
};
use crate::error::{Error, Result};
use crate::feature_store::{acquire_labels, init_pools, load_features, DatasetManifest, FeatureMatrix, PoolState};
use crate::metrics::{
    avg_saving_ratio, region_partition, redundant_ratio, saving, BaselineCurve, ModelView, Pipeline, RegionLabel,
    ReportRow, TimeModel,
};
use crate::probs::Probabilities;
use crate::proxy_model::{init_proxy, predict_proba, train_proxy, ProxyTrainConfig};
use crate::rng::{self, tag};
use crate::strategies::{select, SelectionBatch, SelectionRequest, Strategy};

/// Labeled pool plus held-out evaluation split, and the encoder standing in
/// for the pre-trained backbone.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pool_x: Inputs,
    pub pool_y: Vec<u32>,
    pub eval_x: Inputs,
    pub eval_y: Vec<u32>,
    pub classes: usize,
    pub pretrained: Encoder,
}

impl Dataset {
    pub fn n_pool(&self) -> usize {
        self.pool_y.len()
    }

    /// Splits `x`/`y` into pool and eval parts; both keep ascending index order.
    pub fn split(x: &Inputs, y: &[u32], classes: usize, pretrained: Encoder, eval_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&eval_fraction) || eval_fraction == 0.0 {
            return Err(Error::config("data.eval_fraction", "must be in (0, 1)"));
        }
        if y.len() != x.n {
            return Err(Error::Argument(format!("{} labels for {} rows", y.len(), x.n)));
        }
        let n_eval = ((x.n as f64) * eval_fraction).round() as usize;
        if n_eval == 0 || n_eval >= x.n {
            return Err(Error::config("data.eval_fraction", "leaves an empty split"));
        }
        let mut r = rng::derived(seed, &[tag::SPLIT]);
        let mut eval: Vec<usize> = rand::seq::index::sample(&mut r, x.n, n_eval).into_vec();
        eval.sort_unstable();
        let mut is_eval = vec![false; x.n];
        eval.iter().for_each(|&i| is_eval[i] = true);
        let pool: Vec<usize> = (0..x.n).filter(|&i| !is_eval[i]).collect();
        Ok(Dataset {
            pool_x: x.select(&pool),
            pool_y: pool.iter().map(|&i| y[i]).collect(),
            eval_x: x.select(&eval),
            eval_y: eval.iter().map(|&i| y[i]).collect(),
            classes,
            pretrained,
        })
    }

    /// Synthetic benchmark with an encoder pre-trained on coarse labels.
    pub fn synthetic(spec: &SynthSpec, pretrain_cfg: &PretrainConfig, eval_fraction: f64) -> Result<Self> {
        let data = gen_synth(spec)?;
        let net = pretrain(spec, pretrain_cfg, spec.seed)?;
        Dataset::split(&data.x, &data.fine, spec.c_fine, net.encoder, eval_fraction, spec.seed)
    }

    /// Exported features plus manifest labels. The stand-in backbone is the
    /// trainable identity adapter over the stored features.
    pub fn from_manifest(path: &Path, eval_fraction: f64, seed: u64) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let labels = manifest
            .labels
            .clone()
            .ok_or_else(|| Error::Manifest("manifest has no labels; the oracle needs them".into()))?;
        let features = load_features(manifest.resolve_feature_path(path), &manifest)?;
        let encoder = Encoder::identity(features.d());
        Dataset::split(
            &Inputs::from(&features),
            &labels,
            manifest.num_classes as usize,
            encoder,
            eval_fraction,
            seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "Standard-FT")]
    StandardFt,
    #[serde(rename = "Standard-LPFT")]
    StandardLpFt,
    #[serde(rename = "SVPp")]
    Svpp,
    #[serde(rename = "ASVP")]
    Asvp,
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunMode::StandardFt => "Standard-FT",
            RunMode::StandardLpFt => "Standard-LPFT",
            RunMode::Svpp => "SVPp",
            RunMode::Asvp => "ASVP",
        })
    }
}

impl RunMode {
    pub fn uses_proxy(self) -> bool {
        matches!(self, RunMode::Svpp | RunMode::Asvp)
    }

    pub fn pipeline(self) -> Pipeline {
        match self {
            RunMode::StandardFt | RunMode::StandardLpFt => Pipeline::Standard,
            RunMode::Svpp => Pipeline::Svpp,
            RunMode::Asvp => Pipeline::Asvp,
        }
    }

    /// Training method of the final model before any feature update.
    pub fn initial_method(self) -> TrainMethod {
        match self {
            RunMode::StandardFt | RunMode::Svpp => TrainMethod::Ft,
            RunMode::StandardLpFt | RunMode::Asvp => TrainMethod::LpFt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub pool: u64,
    pub model: u64,
    pub strategy: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            pool: seed,
            model: seed,
            strategy: seed,
        }
    }
}

pub fn default_ft() -> TrainSchedule {
    TrainSchedule {
        kind: TrainMethod::Ft,
        ft_epochs: 130,
        lp_epochs: 0,
        lr_head: 0.1,
        lr_backbone: 0.1,
        lr_lp: 0.1,
        weight_decay: 0.0,
        momentum: 0.9,
        batch_size: 128,
        seed: 0,
    }
}

pub fn default_lpft() -> TrainSchedule {
    TrainSchedule {
        kind: TrainMethod::LpFt,
        ft_epochs: 120,
        lp_epochs: 10,
        lr_head: 0.1,
        lr_backbone: 0.01,
        lr_lp: 0.5,
        weight_decay: 0.0,
        momentum: 0.9,
        batch_size: 128,
        seed: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub strategy: Strategy,
    pub n_iters: usize,
    pub k: usize,
    pub n_init: usize,
    /// Confidence threshold for region membership.
    pub tau: f64,
    pub record_timings: bool,
    /// Multiplies the FT/LP-FT epoch counts of both schedules.
    pub epoch_scale: f64,
    pub seeds: Seeds,
    pub alignment: AlignmentConfig,
    pub proxy: ProxyTrainConfig,
    pub ft: TrainSchedule,
    pub lpft: TrainSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: RunMode::Asvp,
            strategy: Strategy::Margin,
            n_iters: 10,
            k: 100,
            n_init: 100,
            tau: 0.9,
            record_timings: false,
            epoch_scale: 1.0,
            seeds: Seeds::default(),
            alignment: AlignmentConfig::default(),
            proxy: ProxyTrainConfig::default(),
            ft: default_ft(),
            lpft: default_lpft(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self, n_pool: usize) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::config("run.n_iters", "must be >= 1"));
        }
        if self.k == 0 {
            return Err(Error::config("run.k", "must be >= 1"));
        }
        if self.n_init == 0 {
            return Err(Error::config("run.n_init", "must be >= 1"));
        }
        if self.k * self.n_iters + self.n_init > n_pool {
            return Err(Error::config(
                "run.k",
                format!(
                    "n_init + k * n_iters = {} exceeds the pool of {n_pool}",
                    self.k * self.n_iters + self.n_init
                ),
            ));
        }
        if !(self.epoch_scale > 0.0) {
            return Err(Error::config("run.epoch_scale", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("run.tau", "must be in [0, 1]"));
        }
        if self.ft.kind != TrainMethod::Ft {
            return Err(Error::config("run.ft.kind", "must be FT"));
        }
        if self.lpft.kind != TrainMethod::LpFt {
            return Err(Error::config("run.lpft.kind", "must be LPFT"));
        }
        self.ft.validate().map_err(|e| Error::config("run.ft", e.to_string()))?;
        self.lpft.validate().map_err(|e| Error::config("run.lpft", e.to_string()))?;
        self.alignment.validate()?;
        self.proxy.validate()
    }

    /// Schedule for `method` with `epoch_scale` applied.
    pub fn schedule(&self, method: TrainMethod) -> TrainSchedule {
        let base = match method {
            TrainMethod::Ft => &self.ft,
            TrainMethod::LpFt => &self.lpft,
        };
        let scale = |e: usize| (e as f64 * self.epoch_scale).round() as usize;
        TrainSchedule {
            ft_epochs: scale(base.ft_epochs),
            lp_epochs: match method {
                TrainMethod::Ft => 0,
                TrainMethod::LpFt => scale(base.lp_epochs).max(1),
            },
            ..base.clone()
        }
    }
}

/// Wall-clock seconds spent per stage of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub proxy_train: f64,
    pub proxy_forward: f64,
    pub full_train: f64,
    pub full_forward: f64,
    pub feature_refresh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplacementSource {
    B2,
    LeastMarginFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub removed: Vec<usize>,
    pub added: Vec<usize>,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialRecord {
    pub labeled: usize,
    pub accuracy_final: f64,
    pub training_method: TrainMethod,
    pub lp_freeze: Option<FreezeCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub labeled: usize,
    pub batch: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub uniform_fallback: bool,
    pub accuracy_final: f64,
    pub accuracy_proxy: Option<f64>,
    /// Final head mounted on the pre-trained encoder.
    pub exchange_head_accuracy: f64,
    pub redundant_ratio: Option<f64>,
    pub alignment: Option<AlignmentSignal>,
    pub training_method: TrainMethod,
    pub feature_version: u32,
    pub update_fired: bool,
    pub lp_freeze: Option<FreezeCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<Replacement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub mode: RunMode,
    pub strategy: Strategy,
    pub seeds: Seeds,
    pub initial: InitialRecord,
    pub iterations: Vec<IterationRecord>,
    pub final_method: TrainMethod,
    pub feature_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_compute_seconds: Option<f64>,
}

impl RunLedger {
    pub fn update_count(&self) -> usize {
        self.iterations.iter().filter(|r| r.update_fired).count()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.iterations.last().map_or(self.initial.accuracy_final, |r| r.accuracy_final)
    }

    pub fn selections(&self) -> Vec<&[usize]> {
        self.iterations.iter().map(|r| r.batch.as_slice()).collect()
    }

    /// Every LP-FT freeze check recorded in the run.
    pub fn freeze_checks(&self) -> impl Iterator<Item = &FreezeCheck> {
        self.initial
            .lp_freeze
            .iter()
            .chain(self.iterations.iter().filter_map(|r| r.lp_freeze.as_ref()))
    }

    /// Accuracy curve `(labels, accuracy)` including the initial model.
    pub fn curve_points(&self) -> Vec<(f64, f64)> {
        std::iter::once((self.initial.labeled as f64, self.initial.accuracy_final))
            .chain(self.iterations.iter().map(|r| (r.labeled as f64, r.accuracy_final)))
            .collect()
    }

    /// Time model from recorded timings (hours), if timings were recorded.
    pub fn measured_time_model(&self) -> Option<TimeModel> {
        let ts: Vec<Timings> = self.iterations.iter().filter_map(|r| r.timings).collect();
        if ts.len() != self.iterations.len() || ts.is_empty() {
            return None;
        }
        let mean = |f: fn(&Timings) -> f64| ts.iter().map(f).sum::<f64>() / ts.len() as f64 / 3600.0;
        Some(TimeModel {
            t_pre: self.pre_compute_seconds.unwrap_or(0.0) / 3600.0,
            t_tr_full: mean(|t| t.full_train),
            t_f_full: mean(|t| t.full_forward),
            t_tr_proxy: mean(|t| t.proxy_train),
            t_f_proxy: mean(|t| t.proxy_forward),
            n_al: self.iterations.len(),
        })
    }
}

struct Runner<'a> {
    data: &'a Dataset,
    cfg: &'a RunConfig,
    replace: Option<(f64, ReplacementSource)>,
    pool: PoolState,
    full: BackboneNet,
    method: TrainMethod,
    features: Option<(FeatureMatrix, FeatureMatrix)>,
    version: u32,
    history: AlignmentHistory,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Raw penultimate activations of the full model, the BADGE input.
fn penultimate(net: &BackboneNet, x: &Inputs) -> Result<FeatureMatrix> {
    FeatureMatrix::new(x.n, net.encoder.feature_dim(), net.encoder.encode(&x.data, x.n))
}

impl Runner<'_> {
    fn oracle(&self) -> impl Fn(usize) -> u32 + '_ {
        |i| self.data.pool_y[i]
    }

    fn train_final(&self, method: TrainMethod, seed: u64) -> Result<TrainOutcome> {
        let labeled = self.pool.labeled_indices();
        let x = self.data.pool_x.select(&labeled);
        let y = self.pool.labels_in_order();
        let net = BackboneNet::with_fresh_head(&self.data.pretrained, self.data.classes, seed, method.to_string());
        backbone::train(&net, &x, &y, &self.cfg.schedule(method).with_seed(seed))
    }

    fn full_selection(&self, probs: &Probabilities, seed: u64) -> Result<SelectionBatch> {
        let feats = match self.cfg.strategy {
            Strategy::Badge => Some(penultimate(&self.full, &self.data.pool_x)?),
            _ => None,
        };
        let req = SelectionRequest {
            k: self.cfg.k,
            seed,
            strategy: self.cfg.strategy,
        };
        select(&req, &self.pool, Some(probs), feats.as_ref())
    }

    fn iterate(&mut self, t: usize) -> Result<IterationRecord> {
        let cfg = self.cfg;
        let data = self.data;
        let t64 = t as u64;
        let select_seed = rng::derive(cfg.seeds.strategy, &[tag::SELECT, t64]);
        let final_seed = rng::derive(cfg.seeds.model, &[tag::FULL, t64]);
        let mut timings = Timings::default();

        let clock = Instant::now();
        let full_probs = self.full.predict_proba(&data.pool_x)?;
        timings.full_forward = secs(clock);

        let mut accuracy_proxy = None;
        let mut redundant = None;
        let mut replacement = None;
        let batch = match &self.features {
            None => self.full_selection(&full_probs, select_seed)?,
            Some((feats, eval_feats)) => {
                let labeled = self.pool.labeled_indices();
                let labels = self.pool.labels_in_order();
                let clock = Instant::now();
                let init = init_proxy(feats.d(), data.classes, rng::derive(cfg.seeds.model, &[tag::PROXY, t64, 0]))?;
                let pcfg = ProxyTrainConfig {
                    seed: rng::derive(cfg.seeds.model, &[tag::PROXY, t64, 1]),
                    ..cfg.proxy.clone()
                };
                let proxy = train_proxy(&init, &feats.select_rows(&labeled)?, &labels, &pcfg)?.net;
                timings.proxy_train = secs(clock);
                let clock = Instant::now();
                let probs = predict_proba(&proxy, feats, pcfg.eval_batch)?;
                timings.proxy_forward = secs(clock);
                accuracy_proxy = Some(predict_proba(&proxy, eval_feats, pcfg.eval_batch)?.accuracy(&data.eval_y));

                let req = SelectionRequest {
                    k: cfg.k,
                    seed: select_seed,
                    strategy: cfg.strategy,
                };
                let mut batch = select(&req, &self.pool, Some(&probs), Some(feats))?;
                let full_batch = self.full_selection(&full_probs, select_seed)?;
                let regions = region_partition(
                    ModelView {
                        probs: &probs,
                        selection: &batch.indices,
                    },
                    ModelView {
                        probs: &full_probs,
                        selection: &full_batch.indices,
                    },
                    &self.pool.unlabeled_indices(),
                    &data.pool_y,
                    cfg.tau,
                )?;
                redundant = Some(redundant_ratio(&batch.indices, &regions)?);
                if let Some((fraction, source)) = self.replace {
                    replacement = Some(replace_batch(
                        &mut batch,
                        &probs,
                        &full_probs,
                        &regions,
                        &self.pool,
                        fraction,
                        source,
                    ));
                }
                batch
            }
        };

        self.pool = acquire_labels(&self.pool, &batch.indices, self.oracle())?;

        let mut signal = None;
        let mut reuse = None;
        if cfg.mode == RunMode::Asvp {
            let (feats, _) = self.features.as_ref().expect("proxy modes carry features");
            let labeled = self.pool.labeled_indices();
            let labels = self.pool.labels_in_order();
            let lf = feats.select_rows(&labeled)?;
            let ped = ped_converge_iters(&lf, &labels, &cfg.alignment)?;
            let s = decide_update(t, labeled.len(), ped, &lf, &labels, &mut self.history, &cfg.alignment)?;
            if s.decision == Decision::UpdateAndSwitch {
                let clock = Instant::now();
                let tuned = self.train_final(TrainMethod::Ft, final_seed)?;
                let pool_feats = extract_features(&tuned.net.encoder, &data.pool_x)?;
                let eval_feats = extract_features(&tuned.net.encoder, &data.eval_x)?;
                timings.feature_refresh = secs(clock);
                self.features = Some((pool_feats, eval_feats));
                self.version += 1;
                self.method = TrainMethod::Ft;
                reuse = Some(tuned);
            }
            signal = Some(s);
        }
        let update_fired = reuse.is_some();

        let clock = Instant::now();
        let out = match reuse {
            Some(o) => o,
            None => self.train_final(self.method, final_seed)?,
        };
        timings.full_train = secs(clock);
        let accuracy_final = out.net.accuracy(&data.eval_x, &data.eval_y)?;
        let exchange = exchange_head_accuracy(&data.pretrained, &out.net.head, &data.eval_x, &data.eval_y)?;
        self.full = out.net;

        Ok(IterationRecord {
            iteration: t,
            labeled: self.pool.labeled().len(),
            uniform_fallback: batch.uniform_fallback,
            batch: batch.indices,
            accuracy_final,
            accuracy_proxy,
            exchange_head_accuracy: exchange,
            redundant_ratio: redundant,
            alignment: signal,
            training_method: self.method,
            feature_version: self.version,
            update_fired,
            lp_freeze: out.lp_freeze,
            replacement,
            timings: cfg.record_timings.then_some(timings),
        })
    }
}

/// Swaps the `⌈fraction·k⌉` proxy picks with the largest proxy margin for
/// samples drawn from `source`, ranked by ascending full-model margin. When the
/// source runs dry the remaining removed picks are put back, smallest proxy
/// margin first.
fn replace_batch(
    batch: &mut SelectionBatch,
    proxy: &Probabilities,
    full: &Probabilities,
    regions: &std::collections::BTreeMap<usize, RegionLabel>,
    pool: &PoolState,
    fraction: f64,
    source: ReplacementSource,
) -> Replacement {
    let k = batch.len();
    let r = ((fraction * k as f64).ceil() as usize).min(k);
    let mut by_margin = batch.indices.clone();
    by_margin.sort_by(|&a, &b| proxy.margin(b).total_cmp(&proxy.margin(a)).then(a.cmp(&b)));
    let removed: Vec<usize> = by_margin[..r].to_vec();
    let retained: Vec<usize> = batch.indices.iter().copied().filter(|i| !removed.contains(i)).collect();

    let mut candidates: Vec<usize> = match source {
        ReplacementSource::B2 => regions
            .iter()
            .filter(|(_, &l)| l == RegionLabel::FtOnlyB2)
            .map(|(&i, _)| i)
            .collect(),
        ReplacementSource::LeastMarginFull => pool
            .unlabeled()
            .iter()
            .copied()
            .filter(|i| !retained.contains(i))
            .collect(),
    };
    candidates.sort_by(|&a, &b| full.margin(a).total_cmp(&full.margin(b)).then(a.cmp(&b)));
    let added: Vec<usize> = candidates.into_iter().take(r).collect();
    let shortfall = r - added.len();

    let mut indices = retained;
    indices.extend_from_slice(&added);
    for &i in removed.iter().rev() {
        if indices.len() == k {
            break;
        }
        if !indices.contains(&i) {
            indices.push(i);
        }
    }
    batch.scores = indices.iter().map(|&i| proxy.margin(i)).collect();
    batch.indices = indices;
    Replacement {
        removed,
        added,
        shortfall,
    }
}

fn execute(data: &Dataset, cfg: &RunConfig, replace: Option<(f64, ReplacementSource)>) -> Result<RunLedger> {
    cfg.validate(data.n_pool())?;
    let pool = init_pools(data.n_pool(), cfg.n_init, cfg.seeds.pool, |i| data.pool_y[i])?;
    let method = cfg.mode.initial_method();
    let mut runner = Runner {
        data,
        cfg,
        replace,
        pool,
        full: BackboneNet::with_fresh_head(&data.pretrained, data.classes, 0, "placeholder"),
        method,
        features: None,
        version: 0,
        history: AlignmentHistory::default(),
    };

    let initial_out = runner
        .train_final(method, rng::derive(cfg.seeds.model, &[tag::FULL, 0]))
        .map_err(|e| e.at_iteration(0))?;
    let initial = InitialRecord {
        labeled: cfg.n_init,
        accuracy_final: initial_out.net.accuracy(&data.eval_x, &data.eval_y)?,
        training_method: method,
        lp_freeze: initial_out.lp_freeze,
    };
    runner.full = initial_out.net;

    let mut pre_compute_seconds = None;
    if cfg.mode.uses_proxy() {
        let clock = Instant::now();
        let pool_feats = extract_features(&data.pretrained, &data.pool_x)?;
        let eval_feats = extract_features(&data.pretrained, &data.eval_x)?;
        runner.features = Some((pool_feats, eval_feats));
        if cfg.record_timings {
            pre_compute_seconds = Some(secs(clock));
        }
    }

    let mut iterations = Vec::with_capacity(cfg.n_iters);
    for t in 1..=cfg.n_iters {
        iterations.push(runner.iterate(t).map_err(|e| e.at_iteration(t))?);
        log::debug!("{} iteration {t} done", cfg.mode);
    }
    Ok(RunLedger {
        mode: cfg.mode,
        strategy: cfg.strategy,
        seeds: cfg.seeds,
        initial,
        iterations,
        final_method: runner.method,
        feature_version: runner.version,
        pre_compute_seconds,
    })
}

pub fn run(data: &Dataset, cfg: &RunConfig) -> Result<RunLedger> {
    execute(data, cfg, None)
}

/// Proxy selection where part of every batch is swapped for samples the full
/// model would have picked. Trains a reference full model each iteration.
pub fn run_replacement(
    data: &Dataset,
    cfg: &RunConfig,
    fraction: f64,
    source: ReplacementSource,
) -> Result<RunLedger> {
    if cfg.mode != RunMode::Svpp {
        return Err(Error::config("run.mode", "replacement experiments run in SVPp mode"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Argument("replacement fraction must be in [0, 1]".into()));
    }
    execute(data, cfg, Some((fraction, source)))
}

/// Standard FT with random selection under the same seeds and budget.
pub fn random_baseline(data: &Dataset, cfg: &RunConfig) -> Result<(BaselineCurve, RunLedger)> {
    let base = RunConfig {
        mode: RunMode::StandardFt,
        strategy: Strategy::Random,
        record_timings: false,
        ..cfg.clone()
    };
    let ledger = run(data, &base)?;
    Ok((BaselineCurve::new(&ledger.curve_points())?, ledger))
}

/// Per-iteration report rows; `timestamp` is left at 0 for the caller to stamp.
pub fn report_rows(ledger: &RunLedger, curve: &BaselineCurve) -> Result<Vec<ReportRow>> {
    ledger
        .iterations
        .iter()
        .map(|r| {
            let s = saving(curve, r.labeled as f64, r.accuracy_final)?;
            Ok(ReportRow {
                iteration: r.iteration,
                labeled: r.labeled,
                accuracy_final: r.accuracy_final,
                accuracy_proxy: r.accuracy_proxy,
                n2: s.n2,
                saved: s.saved,
                saving_ratio: s.ratio,
                redundant_ratio: r.redundant_ratio,
                feature_version: r.feature_version,
                training_method: r.training_method.to_string(),
                update_fired: r.update_fired,
                timestamp: 0,
            })
        })
        .collect()
}

pub fn mean_saving_ratio(ledger: &RunLedger, curve: &BaselineCurve) -> Result<f64> {
    let rows = report_rows(ledger, curve)?;
    avg_saving_ratio(&rows.iter().map(|r| r.saving_ratio).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    UpdatePosition,
    NIterations,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::UpdatePosition => "update_position",
            SweepAxis::NIterations => "n_iterations",
        })
    }
}

/// Derives the run configuration for one sweep value.
pub fn sweep_config(base: &RunConfig, axis: SweepAxis, value: usize) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::UpdatePosition => {
            let reachable = (1..=base.n_iters).any(|t| base.n_init + t * base.k == value);
            if !reachable {
                return Err(Error::config(
                    "sweep.values",
                    format!("update position {value} is not a labeled count reached by the run"),
                ));
            }
            cfg.mode = RunMode::Asvp;
            cfg.alignment.force_update_at = Some(value);
        }
        SweepAxis::NIterations => {
            let total = base.k * base.n_iters;
            if value == 0 || total % value != 0 {
                return Err(Error::config(
                    "sweep.values",
                    format!("{value} iterations do not divide the label budget {total}"),
                ));
            }
            cfg.n_iters = value;
            cfg.k = total / value;
        }
    }
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub value: usize,
    pub config: RunConfig,
    pub ledger: RunLedger,
    pub curve: BaselineCurve,
    pub avg_saving_ratio: f64,
}

/// Runs every sweep value in parallel. Each value gets its own random baseline
/// (the budget split differs across the iteration-count axis).
pub fn sweep(data: &Dataset, base: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<Vec<SweepOutcome>> {
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|&v| sweep_config(base, axis, v))
        .collect::<Result<_>>()?;
    values
        .par_iter()
        .zip(configs)
        .map(|(&value, config)| {
            let ledger = run(data, &config)?;
            let (curve, _) = random_baseline(data, &config)?;
            let avg = mean_saving_ratio(&ledger, &curve)?;
            Ok(SweepOutcome {
                value,
                config,
                ledger,
                curve,
                avg_saving_ratio: avg,
            })
        })
        .collect()
}
