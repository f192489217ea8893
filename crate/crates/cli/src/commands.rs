use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dsfad_core::captioner::{build_corpus, load_corpus, save_corpus, CaptionClient, CaptionCorpus, CommandClient, TemplateRenderer};
use dsfad_core::checkpoint::load_model;
use dsfad_core::config::{config_hash, RunConfig};
use dsfad_core::datamodel::{generate_synthetic_dataset, load_dataset, save_dataset, Dataset, Modality, Split};
use dsfad_core::encoder::{Model, Variant};
use dsfad_core::evaluator::{run_protocol, style_probe, GalleryProtocol, MetricsReport, StyleProbeReport, RANKS};
use dsfad_core::trainer::{
    fit, gradient_audit, load_state, prepare_inputs, AuditConfig, AuditReport, FitOutputs, LogRow, ModelObjective,
    TrainState,
};

use crate::manifest::{ManifestWriter, RunManifest};
use crate::plot::{line_plot, Series};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CAPTIONS_FILE: &str = "captions.tsv";
pub const CONFIG_FILE: &str = "config.toml";
pub const PROBE_FILE: &str = "style_probe.json";

/// Worker count from `DSFAD_NUM_WORKERS`, else the available parallelism.
pub fn num_workers() -> usize {
    std::env::var("DSFAD_NUM_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` on at most `workers` threads; results keep the job order.
pub fn run_parallel<T, R, F>(jobs: Vec<T>, workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Loads `path` (or the defaults) and applies a `--seed` override to every stage.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.dataset.seed = s;
        cfg.caption.seed = s;
        cfg.train.seed = s;
        cfg.eval.protocol.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_config(w: &mut ManifestWriter, cfg: &RunConfig) -> Result<()> {
    let path = w.dir().join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml())?;
    w.artifact(&path)
}

fn write_json<T: Serialize>(w: &mut ManifestWriter, name: &str, value: &T) -> Result<PathBuf> {
    let path = w.dir().join(name);
    fs::write(&path, serde_json::to_vec_pretty(value)?)?;
    w.artifact(&path)?;
    Ok(path)
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let mut w = ManifestWriter::new(out, "generate", &cfg.hash(), cfg.dataset.seed)?;
    let ds = generate_synthetic_dataset(&cfg.dataset)?;
    save_dataset(&ds, out)?;
    w.artifact(&out.join("meta.json"))?;
    for rec in &ds.images {
        w.artifact(&out.join(rec.file_name()))?;
    }
    write_config(&mut w, cfg)?;
    w.finish()
}

#[derive(Debug, Clone)]
pub enum CaptionBackend {
    Deterministic,
    External { program: PathBuf, args: Vec<String> },
}

pub fn caption_corpus(cfg: &RunConfig, ds: &Dataset, backend: &CaptionBackend, image_dir: Option<&Path>) -> Result<CaptionCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.caption.seed);
    let client: Box<dyn CaptionClient> = match backend {
        CaptionBackend::Deterministic => Box::new(TemplateRenderer),
        CaptionBackend::External { program, args } => Box::new(CommandClient {
            program: program.clone(),
            args: args.clone(),
        }),
    };
    Ok(build_corpus(ds, client.as_ref(), image_dir, cfg.caption.context_length, &mut rng)?)
}

pub fn caption(cfg: &RunConfig, dataset: &Path, backend: &CaptionBackend, out: &Path) -> Result<RunManifest> {
    let ds = load_dataset(dataset)?;
    let mut w = ManifestWriter::new(out, "caption", &cfg.hash(), cfg.caption.seed)?;
    let corpus = caption_corpus(cfg, &ds, backend, Some(dataset))?;
    if corpus.fallbacks > 0 {
        eprintln!("caption: {} of {} images fell back to the template renderer", corpus.fallbacks, ds.images.len());
    }
    let path = out.join(CAPTIONS_FILE);
    save_corpus(&corpus, &ds, &path)?;
    w.artifact(&path)?;
    write_config(&mut w, cfg)?;
    w.finish()
}

fn latest_state(dir: &Path) -> Option<PathBuf> {
    let mut states: Vec<PathBuf> = fs::read_dir(dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "state"))
        .collect();
    states.sort();
    states.pop()
}

pub fn train(cfg: &RunConfig, dataset: &Path, captions: Option<&Path>, out: &Path, resume: bool) -> Result<RunManifest> {
    let ds = load_dataset(dataset)?;
    let corpus = match captions {
        Some(p) => Some(load_corpus(p, &ds, cfg.caption.context_length)?),
        None if cfg.train.variant.uses_text() => {
            bail!("variant {} needs captions; pass --captions", cfg.train.variant.tag())
        }
        None => None,
    };
    let hash = cfg.hash();
    let mut w = ManifestWriter::new(out, "train", &hash, cfg.train.seed)?;
    let mut state = match latest_state(out).filter(|_| resume) {
        Some(p) => {
            let s = load_state(&p)?;
            if s.config != cfg.train {
                bail!("{} was written by a different training configuration", p.display());
            }
            s
        }
        None => TrainState::new(cfg.train.clone(), cfg.model.clone())?,
    };
    let outputs = FitOutputs {
        dir: out.to_path_buf(),
        config_hash: hash,
    };
    fit(&mut state, &ds, corpus.as_ref(), Some(&outputs))?;
    w.artifact(&outputs.log_path())?;
    w.artifact(&outputs.final_checkpoint())?;
    for e in 1..=state.epoch {
        let p = outputs.state_path(e);
        if p.exists() {
            w.artifact(&p)?;
        }
    }
    write_config(&mut w, cfg)?;
    w.finish()
}

fn rank_curve(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let names: Vec<String> = reports.iter().map(|r| r.protocol.name()).collect();
    let series: Vec<Series<'_>> = reports
        .iter()
        .zip(&names)
        .map(|(r, n)| Series {
            label: n,
            points: RANKS.iter().map(|&k| (k as f64, 100.0 * r.rank[&k])).collect(),
        })
        .collect();
    line_plot(path, "Rank-k accuracy", "k", "accuracy (%)", &series)
}

pub fn metrics_file(protocol: &GalleryProtocol) -> String {
    format!("metrics_{}.json", protocol.name())
}

/// Evaluates `checkpoint` under each protocol; with `probe`, also runs the style probe.
pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    protocols: &[GalleryProtocol],
    probe: bool,
    plot: bool,
    out: &Path,
) -> Result<(RunManifest, Vec<MetricsReport>)> {
    let (model, header) = load_model(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let hash = cfg.hash();
    let mut w = ManifestWriter::new(out, "eval", &hash, cfg.eval.protocol.seed)?;
    let mut reports = Vec::new();
    for p in protocols {
        let r = run_protocol(&model, header.variant, &ds, p, &hash)?;
        write_json(&mut w, &metrics_file(p), &r)?;
        reports.push(r);
    }
    if plot {
        let path = out.join("rank_curve.svg");
        rank_curve(&path, &reports)?;
        w.artifact(&path)?;
    }
    if probe {
        let doc = probe_document(&model, header.variant, &ds, cfg)?;
        write_json(&mut w, PROBE_FILE, &doc)?;
    }
    write_config(&mut w, cfg)?;
    Ok((w.finish()?, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDocument {
    pub schema_version: u32,
    pub config_hash: String,
    pub variant: Variant,
    pub report: StyleProbeReport,
    /// Mean held-out R² over targets for the identity (`f_res`) and style (`f_stl`) embeddings.
    pub identity_mean_r2: f64,
    pub style_mean_r2: f64,
}

pub fn probe_document(model: &Model, variant: Variant, ds: &Dataset, cfg: &RunConfig) -> Result<ProbeDocument> {
    let report = style_probe(model, variant, ds, cfg.eval.probe_alpha)?;
    Ok(ProbeDocument {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        variant,
        identity_mean_r2: report.identity.mean_r2(),
        style_mean_r2: report.style.mean_r2(),
        report,
    })
}

/// A single training run evaluated under the configured protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
    pub final_loss: Option<LogRow>,
    pub probe: Option<ProbeDocument>,
}

/// Trains `cfg` in memory and evaluates it; no files are written.
pub fn train_and_evaluate(cfg: &RunConfig, ds: &Dataset, corpus: Option<&CaptionCorpus>) -> Result<RunResult> {
    let variant = cfg.train.variant;
    let mut state = TrainState::new(cfg.train.clone(), cfg.model.clone())?;
    let rows = fit(&mut state, ds, corpus.filter(|_| variant.uses_text()), None)?;
    let report = run_protocol(&state.model, variant, ds, &cfg.eval.protocol, &cfg.hash())?;
    let probe = if variant.decouples() {
        Some(probe_document(&state.model, variant, ds, cfg)?)
    } else {
        None
    };
    Ok(RunResult {
        variant,
        seed: cfg.train.seed,
        rank1: report.rank[&1],
        map: report.map,
        final_loss: rows.last().cloned(),
        probe,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub tag: String,
    /// Medians over seeds, in percent.
    pub rank1: f64,
    pub map: f64,
    /// Against the baseline row.
    pub delta_rank1: f64,
    pub delta_map: f64,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub protocol: GalleryProtocol,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("| Method | Rank-1 | mAP | ΔRank-1 | ΔmAP |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.1} | {:.1} | {:+.1} | {:+.1} |\n",
                r.tag, r.rank1, r.map, r.delta_rank1, r.delta_map
            ));
        }
        s
    }
}

/// Trains every (variant, seed) pair on one dataset and caption corpus.
pub fn ablation(cfg: &RunConfig, variants: &[Variant], seeds: &[u64], workers: usize) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        bail!("ablation needs at least one variant and one seed");
    }
    let ds = generate_synthetic_dataset(&cfg.dataset)?;
    let corpus = caption_corpus(cfg, &ds, &CaptionBackend::Deterministic, None)?;
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let results = run_parallel(jobs, workers, |&(v, s)| {
        let mut c = cfg.clone();
        c.train.variant = v;
        c.train.seed = s;
        train_and_evaluate(&c, &ds, Some(&corpus))
    })?;
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|&v| {
            let runs: Vec<RunResult> = results.iter().filter(|r| r.variant == v).cloned().collect();
            AblationRow {
                variant: v,
                tag: v.tag().to_string(),
                rank1: 100.0 * median(runs.iter().map(|r| r.rank1).collect()),
                map: 100.0 * median(runs.iter().map(|r| r.map).collect()),
                delta_rank1: 0.0,
                delta_map: 0.0,
                runs,
            }
        })
        .collect();
    let base = rows
        .iter()
        .find(|r| r.variant == Variant::Baseline)
        .map_or((rows[0].rank1, rows[0].map), |r| (r.rank1, r.map));
    for r in &mut rows {
        r.delta_rank1 = r.rank1 - base.0;
        r.delta_map = r.map - base.1;
    }
    Ok(AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: config_hash(&(cfg, variants, seeds)),
        protocol: cfg.eval.protocol,
        seeds: seeds.to_vec(),
        rows,
    })
}

pub fn ablate(cfg: &RunConfig, variants: &[Variant], seeds: &[u64], out: &Path) -> Result<AblationReport> {
    let seed = seeds.first().copied().unwrap_or(cfg.train.seed);
    let mut w = ManifestWriter::new(out, "ablate", &config_hash(&(cfg, variants, seeds)), seed)?;
    let report = ablation(cfg, variants, seeds, num_workers())?;
    write_json(&mut w, "ablation.json", &report)?;
    let md = out.join("ablation.md");
    fs::write(&md, report.markdown())?;
    w.artifact(&md)?;
    write_config(&mut w, cfg)?;
    w.finish()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Lambda1,
    Lambda2,
    Lambda3,
    M,
}

impl std::str::FromStr for SweepParam {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lambda1" => SweepParam::Lambda1,
            "lambda2" => SweepParam::Lambda2,
            "lambda3" => SweepParam::Lambda3,
            "m" => SweepParam::M,
            o => bail!("unknown sweep parameter {o:?} (expected lambda1, lambda2, lambda3 or m)"),
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
            SweepParam::Lambda3 => "lambda3",
            SweepParam::M => "m",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Lambda1 => vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.3],
            SweepParam::Lambda2 => vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            SweepParam::Lambda3 => vec![0.0, 0.01, 0.02, 0.05, 0.1],
            SweepParam::M => vec![0.25, 0.5, 1.0, 1.5, 2.0],
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: f64) {
        let l = &mut cfg.train.loss;
        match self {
            SweepParam::Lambda1 => l.lambda1 = value,
            SweepParam::Lambda2 => l.lambda2 = value,
            SweepParam::Lambda3 => l.lambda3 = value,
            SweepParam::M => l.margin = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub rank1: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub param: SweepParam,
    pub variant: Variant,
    pub protocol: GalleryProtocol,
    pub rows: Vec<SweepRow>,
}

pub fn sweep_report(cfg: &RunConfig, param: SweepParam, grid: &[f64], workers: usize) -> Result<SweepReport> {
    if grid.is_empty() {
        bail!("sweep grid is empty");
    }
    if let Some(v) = grid.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        bail!("sweep value {v} must be finite and non-negative");
    }
    let ds = generate_synthetic_dataset(&cfg.dataset)?;
    let corpus = caption_corpus(cfg, &ds, &CaptionBackend::Deterministic, None)?;
    let runs = run_parallel(grid.to_vec(), workers, |&v| {
        let mut c = cfg.clone();
        param.apply(&mut c, v);
        c.train.loss.validate()?;
        train_and_evaluate(&c, &ds, Some(&corpus))
    })?;
    Ok(SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: config_hash(&(cfg, param, grid)),
        param,
        variant: cfg.train.variant,
        protocol: cfg.eval.protocol,
        rows: grid
            .iter()
            .zip(runs)
            .map(|(&value, r)| SweepRow {
                value,
                rank1: 100.0 * r.rank1,
                map: 100.0 * r.map,
            })
            .collect(),
    })
}

pub fn sweep(cfg: &RunConfig, param: SweepParam, grid: &[f64], plot: bool, out: &Path) -> Result<SweepReport> {
    let mut w = ManifestWriter::new(out, "sweep", &config_hash(&(cfg, param, grid)), cfg.train.seed)?;
    let report = sweep_report(cfg, param, grid, num_workers())?;
    write_json(&mut w, "sweep.json", &report)?;
    let mut tsv = format!("{}\trank1\tmap\n", param.name());
    for r in &report.rows {
        tsv.push_str(&format!("{}\t{:.4}\t{:.4}\n", r.value, r.rank1, r.map));
    }
    let path = out.join("sweep.tsv");
    fs::write(&path, tsv)?;
    w.artifact(&path)?;
    if plot {
        let path = out.join("sweep.svg");
        let pts = |f: fn(&SweepRow) -> f64| report.rows.iter().map(|r| (r.value, f(r))).collect();
        line_plot(
            &path,
            &format!("Sensitivity to {}", param.name()),
            param.name(),
            "%",
            &[
                Series { label: "Rank-1", points: pts(|r| r.rank1) },
                Series { label: "mAP", points: pts(|r| r.map) },
            ],
        )?;
        w.artifact(&path)?;
    }
    write_config(&mut w, cfg)?;
    w.finish()?;
    Ok(report)
}

/// Gradient audit of the configured variant on a two-image batch: one
/// visible and one infrared image of the first training identity.
pub fn gradcheck_report(cfg: &RunConfig, audit: &AuditConfig) -> Result<AuditReport> {
    let ds = generate_synthetic_dataset(&cfg.dataset)?;
    let corpus = caption_corpus(cfg, &ds, &CaptionBackend::Deterministic, None)?;
    let pick = |m: Modality| {
        ds.images
            .iter()
            .position(|r| r.split == Split::Train && r.identity == 0 && r.modality == m)
            .context("dataset has no training image of identity 0")
    };
    let items = [pick(Modality::Visible)?, pick(Modality::Infrared)?];
    let mut rng = ChaCha8Rng::seed_from_u64(audit.seed);
    let aug = dsfad_core::datamodel::AugmentConfig::disabled();
    let inputs = prepare_inputs(&ds, Some(&corpus), &items, &aug, &mut rng)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.init_seed = cfg.train.seed;
    let model = Model::new(model_cfg)?;
    let mut target = ModelObjective::new(model, &inputs, cfg.train.variant, cfg.train.loss.clone())?;
    Ok(gradient_audit(&mut target, audit)?)
}

pub fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<AuditReport> {
    let audit = AuditConfig {
        seed: cfg.train.seed,
        ..AuditConfig::default()
    };
    let mut w = ManifestWriter::new(out, "gradcheck", &cfg.hash(), cfg.train.seed)?;
    let report = gradcheck_report(cfg, &audit)?;
    write_json(&mut w, "gradcheck.json", &report)?;
    write_config(&mut w, cfg)?;
    w.finish()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Caption,
    Train,
    Eval,
    Probe,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Generate, Stage::Caption, Stage::Train, Stage::Eval, Stage::Probe];

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Generate => "dataset",
            Stage::Caption => "captions",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Probe => "probe",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "generate" => Stage::Generate,
            "caption" => Stage::Caption,
            "train" => Stage::Train,
            "eval" => Stage::Eval,
            "probe" => Stage::Probe,
            o => bail!("unknown stage {o:?}"),
        })
    }
}

/// Runs the stages from `from` onward; earlier stages must already be on disk.
pub fn pipeline(cfg: &RunConfig, out: &Path, from: Stage) -> Result<BTreeMap<String, RunManifest>> {
    let dir = |s: Stage| out.join(s.dir_name());
    let mut manifests = BTreeMap::new();
    let mut top = ManifestWriter::new(out, "pipeline", &cfg.hash(), cfg.train.seed)?;
    let checkpoint = dir(Stage::Train).join("final.ckpt");
    for stage in Stage::ALL.into_iter().filter(|&s| s >= from) {
        let d = dir(stage);
        if d.exists() {
            fs::remove_dir_all(&d).with_context(|| format!("clearing {}", d.display()))?;
        }
        let m = match stage {
            Stage::Generate => generate(cfg, &d)?,
            Stage::Caption => caption(cfg, &dir(Stage::Generate), &CaptionBackend::Deterministic, &d)?,
            Stage::Train => {
                let caps = dir(Stage::Caption).join(CAPTIONS_FILE);
                train(cfg, &dir(Stage::Generate), Some(&caps), &d, false)?
            }
            Stage::Eval => {
                let protocols = cfg.eval.protocol.four();
                eval(cfg, &checkpoint, &dir(Stage::Generate), &protocols, false, true, &d)?.0
            }
            Stage::Probe => {
                if !cfg.train.variant.decouples() {
                    continue;
                }
                eval(cfg, &checkpoint, &dir(Stage::Generate), &[], true, false, &d)?.0
            }
        };
        manifests.insert(stage.dir_name().to_string(), m);
    }
    for s in Stage::ALL {
        let m = dir(s).join(crate::manifest::MANIFEST_FILE);
        if m.exists() {
            top.artifact(&m)?;
        }
    }
    write_config(&mut top, cfg)?;
    manifests.insert(String::new(), top.finish()?);
    Ok(manifests)
}
