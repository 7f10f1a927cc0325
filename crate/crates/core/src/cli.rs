//! Command-line front end. Exit codes: 0 success, 2 configuration or argument
//! error, 1 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_features, gen_synth, pretrain};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::feature_store::{l2_normalize_rows, load_features, save_features, DatasetManifest, FeatureMatrix};
use crate::metrics::{al_time, emit_report, overall_cost, write_file, BaselineCurve, ReportSummary};
use crate::orchestrator::{self, random_baseline, report_rows, run, RunLedger, Seeds, SweepOutcome};

#[derive(Debug, Parser)]
#[command(name = "asvp", version, about = "Proxy-based active learning with feature alignment")]
struct Cli {
    /// Directory for all outputs.
    #[arg(long, global = true, env = "ASVP_OUTPUT_DIR", default_value = "asvp-out")]
    output_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and its pre-trained features.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate exported features and copy them, row-normalized, into the output directory.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run one active-learning experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides all three seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the configured experiment once per sweep value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rebuild the CSV and JSON report from a saved ledger and baseline.
    Report {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Random-baseline accuracy points saved next to a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFile {
    pub points: Vec<(f64, f64)>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let out = cli.output_dir;
    match cli.command {
        Command::GenSynth { config, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data.synth.seed = s;
            }
            gen_synth_cmd(&cfg, &out)
        }
        Command::Ingest { manifest } => ingest_cmd(&manifest, &out),
        Command::Run { config, seed } => {
            let cfg = with_seed(load_config(config.as_deref())?, seed);
            run_cmd(&cfg, &out)
        }
        Command::Sweep { config, seed } => {
            let cfg = with_seed(load_config(Some(&config))?, seed);
            sweep_cmd(&cfg, &out)
        }
        Command::Report {
            ledger,
            baseline,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            report_cmd(&cfg, &ledger, &baseline, &out)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn with_seed(mut cfg: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed {
        cfg.run.seeds = Seeds::all(s);
    }
    cfg
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))
}

fn gen_synth_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let spec = &cfg.data.synth;
    let data = gen_synth(spec)?;
    let net = pretrain(spec, &cfg.data.pretrain, spec.seed)?;
    let raw = FeatureMatrix::new(data.x.n, data.x.d, data.x.data.clone())?;
    save_features(&raw, out.join("inputs.alfv1"))?;
    let feats = extract_features(&net.encoder, &data.x)?;
    save_features(&feats, out.join("features.alfv1"))?;
    let manifest = DatasetManifest {
        ids: (0..data.x.n).map(|i| format!("synth-{i:06}")).collect(),
        labels: Some(data.fine.clone()),
        num_classes: spec.c_fine as u32,
        feature_path: "features.alfv1".into(),
        provenance: format!("synthetic benchmark, seed {}, coarse-label pre-training", spec.seed),
        feature_version: 0,
    };
    manifest.save(out.join("manifest.json"))?;
    println!("wrote {} samples ({} features) to {}", data.x.n, feats.d(), out.display());
    Ok(())
}

fn ingest_cmd(manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let feats = load_features(manifest.resolve_feature_path(manifest_path), &manifest)?;
    let normalized = if feats.is_normalized() {
        feats
    } else {
        l2_normalize_rows(&feats)?
    };
    create_dir(out)?;
    save_features(&normalized, out.join("features.alfv1"))?;
    let copy = DatasetManifest {
        feature_path: "features.alfv1".into(),
        ..manifest
    };
    copy.save(out.join("manifest.json"))?;
    println!(
        "ingested {} rows, d = {}, {} classes",
        normalized.n(),
        normalized.d(),
        copy.num_classes
    );
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes the full artifact set of one run into `dir`.
fn write_run(cfg: &ExperimentConfig, ledger: &RunLedger, baseline: &RunLedger, dir: &Path) -> Result<f64> {
    create_dir(dir)?;
    let points = baseline.curve_points();
    let curve = BaselineCurve::new(&points)?;
    write_json(&dir.join("ledger.json"), ledger)?;
    write_json(&dir.join("baseline.json"), &BaselineFile { points })?;
    write_file(&dir.join("config.effective.toml"), cfg.to_toml_string()?.as_bytes())?;
    emit(cfg, ledger, &curve, dir)
}

fn emit(cfg: &ExperimentConfig, ledger: &RunLedger, curve: &BaselineCurve, dir: &Path) -> Result<f64> {
    let stamp = unix_now();
    let mut rows = report_rows(ledger, curve)?;
    rows.iter_mut().for_each(|r| r.timestamp = stamp);
    let ratios: Vec<f64> = rows.iter().map(|r| r.saving_ratio).collect();
    let avg = crate::metrics::avg_saving_ratio(&ratios)?;
    let time = ledger.measured_time_model().unwrap_or_else(|| cfg.time_model());
    let hours = al_time(ledger.mode.pipeline(), &time);
    let labels = ledger.iterations.last().map_or(ledger.initial.labeled, |r| r.labeled);
    let summary = ReportSummary {
        avg_saving_ratio: avg,
        overall_cost: overall_cost(labels as f64, &cfg.cost.model(hours)?),
        al_time_hours: hours,
        mode: ledger.mode.to_string(),
        strategy: ledger.strategy.to_string(),
        seeds: vec![ledger.seeds.pool, ledger.seeds.model, ledger.seeds.strategy],
    };
    emit_report(&rows, &summary, dir)?;
    Ok(avg)
}

fn run_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = cfg.data.load()?;
    let ledger = run(&data, &cfg.run)?;
    let (_, baseline) = random_baseline(&data, &cfg.run)?;
    let avg = write_run(cfg, &ledger, &baseline, out)?;
    println!(
        "{} / {}: final accuracy {:.4}, average saving ratio {:.4}, feature updates {}",
        ledger.mode,
        ledger.strategy,
        ledger.final_accuracy(),
        avg,
        ledger.update_count()
    );
    Ok(())
}

fn sweep_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.sweep.values.is_empty() {
        return Err(Error::config("sweep.values", "must list at least one value"));
    }
    let data = cfg.data.load()?;
    let outcomes = orchestrator::sweep(&data, &cfg.run, cfg.sweep.axis, &cfg.sweep.values)?;
    create_dir(out)?;
    let mut table = String::from("axis,value,n_iters,k,avg_saving_ratio,final_accuracy,update_iteration,feature_version\n");
    for o in &outcomes {
        write_sweep_value(cfg, o, out)?;
        let fired = o.ledger.iterations.iter().find(|r| r.update_fired).map(|r| r.iteration);
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            cfg.sweep.axis,
            o.value,
            o.config.n_iters,
            o.config.k,
            o.avg_saving_ratio,
            o.ledger.final_accuracy(),
            fired.map(|t| t.to_string()).unwrap_or_default(),
            o.ledger.feature_version
        ));
    }
    write_file(&out.join("sweep_summary.csv"), table.as_bytes())?;
    println!("{} sweep over {} values written to {}", cfg.sweep.axis, outcomes.len(), out.display());
    Ok(())
}

fn write_sweep_value(cfg: &ExperimentConfig, o: &SweepOutcome, out: &Path) -> Result<()> {
    let dir = out.join(format!("{}_{}", cfg.sweep.axis, o.value));
    create_dir(&dir)?;
    let effective = ExperimentConfig {
        run: o.config.clone(),
        ..cfg.clone()
    };
    let points: Vec<(f64, f64)> = o.curve.points().collect();
    write_json(&dir.join("ledger.json"), &o.ledger)?;
    write_json(&dir.join("baseline.json"), &BaselineFile { points })?;
    write_file(&dir.join("config.effective.toml"), effective.to_toml_string()?.as_bytes())?;
    emit(&effective, &o.ledger, &o.curve, &dir)?;
    Ok(())
}

fn report_cmd(cfg: &ExperimentConfig, ledger: &Path, baseline: &Path, out: &Path) -> Result<()> {
    let ledger: RunLedger = read_json(ledger)?;
    let base: BaselineFile = read_json(baseline)?;
    let curve = BaselineCurve::new(&base.points)?;
    let cfg = ExperimentConfig {
        run: crate::orchestrator::RunConfig {
            n_iters: ledger.iterations.len(),
            ..cfg.run.clone()
        },
        ..cfg.clone()
    };
    let avg = emit(&cfg, &ledger, &curve, out)?;
    println!("average saving ratio {avg:.4}");
    Ok(())
}
