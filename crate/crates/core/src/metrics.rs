//! Label-saving and cost metrics, the wall-clock time model, selection-region
//! bookkeeping and report emission.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probs::Probabilities;

/// Random-baseline accuracy curve. Accuracies are stored after isotonic
/// (pool-adjacent-violators) regression so the curve is non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCurve {
    labels: Vec<f64>,
    accuracy: Vec<f64>,
}

impl BaselineCurve {
    pub fn new(points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Argument("baseline curve needs at least 2 points".into()));
        }
        if points.iter().any(|(n, a)| !n.is_finite() || !a.is_finite()) {
            return Err(Error::Argument("baseline curve has non-finite values".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Argument("baseline label counts must be strictly increasing".into()));
        }
        let raw: Vec<f64> = points.iter().map(|p| p.1).collect();
        Ok(BaselineCurve {
            labels: points.iter().map(|p| p.0).collect(),
            accuracy: isotonic(&raw),
        })
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.labels.iter().copied().zip(self.accuracy.iter().copied())
    }

    /// Label count at which the baseline reaches `acc`, and whether the value
    /// was extrapolated beyond the curve.
    fn labels_for(&self, acc: f64) -> Result<(f64, bool)> {
        if let Some(j) = self.accuracy.iter().position(|&a| a == acc) {
            return Ok((self.labels[j], false));
        }
        let last = self.accuracy.len() - 1;
        let inside = acc > self.accuracy[0] && acc < self.accuracy[last];
        let segment = if inside {
            (0..last).find(|&i| self.accuracy[i] < acc && acc < self.accuracy[i + 1])
        } else if acc < self.accuracy[0] {
            (0..last).find(|&i| self.accuracy[i + 1] > self.accuracy[i])
        } else {
            (0..last).rev().find(|&i| self.accuracy[i + 1] > self.accuracy[i])
        };
        let i = segment.ok_or_else(|| Error::Argument("baseline curve is flat".into()))?;
        let (n0, n1) = (self.labels[i], self.labels[i + 1]);
        let (a0, a1) = (self.accuracy[i], self.accuracy[i + 1]);
        let n = n0 + (acc - a0) * (n1 - n0) / (a1 - a0);
        Ok((n.max(1.0), !inside))
    }
}

fn isotonic(values: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (m2, w2) = blocks.pop().unwrap();
            let (m1, w1) = blocks.pop().unwrap();
            let w = w1 + w2;
            blocks.push(((m1 * w1 as f64 + m2 * w2 as f64) / w as f64, w));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, w)| std::iter::repeat_n(m, w))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saving {
    pub n2: f64,
    pub saved: f64,
    pub ratio: f64,
    pub extrapolated: bool,
}

/// Labels saved relative to the random baseline when `n1` labels reached
/// accuracy `acc`.
pub fn saving(curve: &BaselineCurve, n1: f64, acc: f64) -> Result<Saving> {
    let (n2, extrapolated) = curve.labels_for(acc)?;
    let saved = n2 - n1;
    Ok(Saving {
        n2,
        saved,
        ratio: saved / n2,
        extrapolated,
    })
}

pub fn avg_saving_ratio(ratios: &[f64]) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::Argument("no saving ratios to average".into()));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Price per label, review multiplier included.
    pub label_price: f64,
    /// Training cost C_tr.
    pub training_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            label_price: 0.04,
            training_cost: 0.0,
        }
    }
}

impl CostModel {
    pub fn from_rate(label_price: f64, hourly_rate: f64, hours: f64) -> Result<Self> {
        let m = CostModel {
            label_price,
            training_cost: hourly_rate * hours,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_price >= 0.0) {
            return Err(Error::config("cost.label_price", "must be >= 0"));
        }
        if !(self.training_cost >= 0.0) {
            return Err(Error::config("cost.hourly_rate", "training cost must be >= 0"));
        }
        Ok(())
    }
}

pub fn overall_cost(n1: f64, model: &CostModel) -> f64 {
    n1 * model.label_price + model.training_cost
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pipeline {
    Standard,
    Svpp,
    Asvp,
}

/// Hours per component; `t_tr_*`/`t_f_*` are per active-learning iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeModel {
    pub t_pre: f64,
    pub t_tr_full: f64,
    pub t_f_full: f64,
    pub t_tr_proxy: f64,
    pub t_f_proxy: f64,
    pub n_al: usize,
}

impl Default for TimeModel {
    fn default() -> Self {
        TimeModel {
            t_pre: 0.0,
            t_tr_full: 0.0,
            t_f_full: 0.0,
            t_tr_proxy: 0.0,
            t_f_proxy: 0.0,
            n_al: 1,
        }
    }
}

impl TimeModel {
    pub fn validate(&self) -> Result<()> {
        let all = [self.t_pre, self.t_tr_full, self.t_f_full, self.t_tr_proxy, self.t_f_proxy];
        if all.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::config("time", "all durations must be >= 0"));
        }
        Ok(())
    }
}

pub fn al_time(pipeline: Pipeline, tm: &TimeModel) -> f64 {
    let n = tm.n_al as f64;
    match pipeline {
        Pipeline::Standard => n * tm.t_tr_full + n * tm.t_f_full,
        Pipeline::Svpp => n * tm.t_tr_proxy + n * tm.t_f_proxy + tm.t_pre,
        Pipeline::Asvp => n * tm.t_tr_proxy + n * tm.t_f_proxy + 2.0 * tm.t_pre + tm.t_tr_full,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegionLabel {
    O,
    FtOnlyB2,
    FtOnlyAB1,
    ProxyOnlyC,
    ProxyOnlyD,
    Neither,
}

/// Model outputs over the whole dataset (indexed by global sample index).
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub probs: &'a Probabilities,
    pub selection: &'a [usize],
}

/// Assigns every unlabeled index to one region by comparing the proxy's and
/// the full model's selections. `tau` is the confidence threshold.
pub fn region_partition(
    proxy: ModelView<'_>,
    full: ModelView<'_>,
    unlabeled: &[usize],
    truth: &[u32],
    tau: f64,
) -> Result<BTreeMap<usize, RegionLabel>> {
    let u: std::collections::HashSet<usize> = unlabeled.iter().copied().collect();
    for &i in proxy.selection.iter().chain(full.selection) {
        if !u.contains(&i) {
            return Err(Error::Selection(format!("index {i} is not unlabeled")));
        }
    }
    let n = truth.len();
    if proxy.probs.n() != n || full.probs.n() != n {
        return Err(Error::Argument("probabilities must cover every sample".into()));
    }
    let ps: std::collections::HashSet<usize> = proxy.selection.iter().copied().collect();
    let fs: std::collections::HashSet<usize> = full.selection.iter().copied().collect();
    let sure = |p: &Probabilities, i: usize| p.predicted(i) == truth[i] as usize && p.confidence(i) >= tau;
    Ok(unlabeled
        .iter()
        .map(|&i| {
            let label = match (ps.contains(&i), fs.contains(&i)) {
                (true, true) => RegionLabel::O,
                (false, true) if sure(proxy.probs, i) => RegionLabel::FtOnlyB2,
                (false, true) => RegionLabel::FtOnlyAB1,
                (true, false) if sure(full.probs, i) => RegionLabel::ProxyOnlyC,
                (true, false) => RegionLabel::ProxyOnlyD,
                (false, false) => RegionLabel::Neither,
            };
            (i, label)
        })
        .collect())
}

/// Share of `batch` falling in the redundant region C.
pub fn redundant_ratio(batch: &[usize], regions: &BTreeMap<usize, RegionLabel>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut hits = 0usize;
    for i in batch {
        match regions.get(i) {
            Some(RegionLabel::ProxyOnlyC) => hits += 1,
            Some(_) => {}
            None => return Err(Error::Argument(format!("no region for index {i}"))),
        }
    }
    Ok(hits as f64 / batch.len() as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument("spearman needs two equal-length series of length >= 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One CSV row of the per-iteration report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub iteration: usize,
    pub labeled: usize,
    pub accuracy_final: f64,
    pub accuracy_proxy: Option<f64>,
    pub n2: f64,
    pub saved: f64,
    pub saving_ratio: f64,
    pub redundant_ratio: Option<f64>,
    pub feature_version: u32,
    pub training_method: String,
    pub update_fired: bool,
    pub timestamp: u64,
}

pub const CSV_HEADER: &str = "iteration,labeled,accuracy_final,accuracy_proxy,n2,saved,saving_ratio,redundant_ratio,feature_version,training_method,update_fired,timestamp";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.labeled,
            self.accuracy_final,
            opt(self.accuracy_proxy),
            self.n2,
            self.saved,
            self.saving_ratio,
            opt(self.redundant_ratio),
            self.feature_version,
            self.training_method,
            self.update_fired,
            self.timestamp
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub avg_saving_ratio: f64,
    pub overall_cost: f64,
    pub al_time_hours: f64,
    pub mode: String,
    pub strategy: String,
    pub seeds: Vec<u64>,
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Writes `iterations.csv` and `summary.json` into `dir`.
pub fn emit_report(rows: &[ReportRow], summary: &ReportSummary, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    write_file(&dir.join("iterations.csv"), render_csv(rows).as_bytes())?;
    let mut json = serde_json::to_vec_pretty(summary)?;
    json.push(b'\n');
    write_file(&dir.join("summary.json"), &json)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::storage(path, e))?;
    f.write_all(bytes).map_err(|e| Error::storage(path, e))
}
