//! Single-stage end-to-end training, the learning-rate schedule, optimizer
//! state, resumable checkpoints and the finite-difference gradient audit.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::captioner::CaptionCorpus;
use crate::checkpoint::{self, Container, Dtype, ModelHeader};
use crate::datamodel::{augment, pk_sample, AugmentConfig, Batch, Dataset, Modality, Split};
use crate::encoder::{stack_images, Binding, Branch, Model, ModelConfig, ParamGroup, ParamStore, Variant};
use crate::error::{io_err, Error, Result};
use crate::losses::{
    contrastive_loss, identity_loss, modality_shared_enhancement_loss, semantic_consistency_loss,
    semantic_margin_loss, weighted_total, LossBreakdown, LossConfig, LossTerms,
};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Weight of the newest batch in the neck running statistics.
pub const NECK_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_visual: f64,
    pub lr_text: f64,
    /// Epochs at which the rate is multiplied by `drop_factor`.
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    pub variant: Variant,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Save a resumable state every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            drop_epochs: vec![10, 18],
            ..Self::paper()
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 120 epochs with drops at 40 and 70.
    pub fn paper() -> Self {
        Self {
            epochs: 120,
            lr_visual: 3e-4,
            lr_text: 1e-6,
            drop_epochs: vec![40, 70],
            drop_factor: 0.1,
            p: 8,
            k: 4,
            seed: 0,
            variant: Variant::Full,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr_visual > 0.0 && self.lr_text > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "drop epochs {:?} are not strictly increasing",
                self.drop_epochs
            )));
        }
        if self.drop_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::Config(format!(
                "drop epochs {:?} must lie below {} epochs",
                self.drop_epochs, self.epochs
            )));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor <= 1.0) {
            return Err(Error::Config("drop factor must be in (0, 1]".into()));
        }
        if self.p == 0 || self.k == 0 {
            return Err(Error::Config("P and K must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Visual => self.lr_visual,
            ParamGroup::Text => self.lr_text,
            ParamGroup::Buffer => 0.0,
        }
    }
}

/// Rate of `group` during `epoch` (0-based).
pub fn lr_at(cfg: &TrainConfig, epoch: usize, group: ParamGroup) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let drops = cfg.drop_epochs.iter().filter(|&&d| epoch >= d).count();
    Ok(cfg.base_lr(group) * cfg.drop_factor.powi(drops as i32))
}

pub fn steps_per_epoch(dataset: &Dataset, cfg: &TrainConfig) -> usize {
    let n = dataset.images.iter().filter(|r| r.split == Split::Train).count();
    n.div_ceil(2 * cfg.p * cfg.k).max(1)
}

/// Tensors for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs {
    pub images: Tensor,
    pub tokens: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
    /// 0 visible, 1 infrared.
    pub modalities: Vec<u8>,
    /// Whether the modality-shared enhancement term is defined for this batch.
    pub use_mse: bool,
}

pub fn modality_code(m: Modality) -> u8 {
    match m {
        Modality::Visible => 0,
        Modality::Infrared => 1,
    }
}

/// Gathers images (augmented with `rng` when enabled), captions and labels.
pub fn prepare_inputs<R: Rng + ?Sized>(
    dataset: &Dataset,
    corpus: Option<&CaptionCorpus>,
    items: &[usize],
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<BatchInputs> {
    let (h, w) = (dataset.spec.height, dataset.spec.width);
    let mut images = Vec::with_capacity(items.len());
    let mut tokens = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    let mut modalities = Vec::with_capacity(items.len());
    for &i in items {
        let rec = &dataset.images[i];
        images.push(augment(&dataset.pixels_f64(i), h, w, rec.modality, aug, rng));
        if let Some(c) = corpus {
            let cap = c
                .records
                .get(i)
                .filter(|r| r.image == i)
                .ok_or_else(|| Error::Config(format!("no caption for image {i}")))?;
            tokens.push(cap.tokens.clone());
        }
        labels.push(rec.identity);
        modalities.push(modality_code(rec.modality));
    }
    let use_mse = (0..items.len()).all(|a| {
        (0..items.len()).any(|j| j != a && labels[j] == labels[a] && modalities[j] == modalities[a])
            && (0..items.len()).any(|j| labels[j] == labels[a] && modalities[j] != modalities[a])
    });
    Ok(BatchInputs {
        images: stack_images(&images, h, w),
        tokens,
        labels,
        modalities,
        use_mse,
    })
}

/// Builds the training objective of `variant` on `g`.
pub fn objective(
    model: &Model,
    g: &mut Graph,
    b: &mut Binding,
    inputs: &BatchInputs,
    variant: Variant,
    loss: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    objective_with_target(model, g, b, inputs, variant, loss, None).map(|o| (o.total, o.breakdown))
}

/// As [`objective`], optionally replacing the consistency target `pool(F3)`
/// by a fixed value. Also returns the target that was used.
pub fn objective_with_target(
    model: &Model,
    g: &mut Graph,
    b: &mut Binding,
    inputs: &BatchInputs,
    variant: Variant,
    loss: &LossConfig,
    target: Option<&Tensor>,
) -> Result<Objective> {
    let x = g.constant(inputs.images.clone());
    let tokens = variant.uses_text().then_some(inputs.tokens.as_slice());
    let mut out = model.forward(g, b, x, tokens, variant)?;
    if let (Some(t), Some(_)) = (target, out.pooled_f3) {
        out.pooled_f3 = Some(g.constant(t.clone()));
    }
    let used_target = out.pooled_f3.map(|v| g.value(v).clone());
    let emb = out.identity_emb;
    let id = identity_loss(g, out.logits, &inputs.labels)?;
    let mse = if inputs.use_mse {
        modality_shared_enhancement_loss(g, out.identity_raw, &inputs.labels, &inputs.modalities)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let mut terms = LossTerms {
        id,
        mse,
        con: None,
        sm: None,
        sc: None,
    };
    if let Some(t) = out.text_emb {
        terms.con = Some(contrastive_loss(g, emb, t, loss.temperature)?);
        if let Some(style) = out.style_emb {
            terms.sm = Some(semantic_margin_loss(g, emb, style, t, loss.margin)?);
        }
        if let (Some(p3), Some(pr)) = (out.pooled_f3, out.pooled_res) {
            terms.sc = Some(semantic_consistency_loss(g, p3, pr, t, loss.consistency_mode)?);
        }
    }
    let (total, breakdown) = weighted_total(g, &terms, loss)?;
    let mut raw = vec![(Branch::Identity, g.value(out.identity_raw).clone())];
    if let Some(s) = out.style_raw {
        raw.push((Branch::Style, g.value(s).clone()));
    }
    Ok(Objective {
        total,
        breakdown,
        target: used_target,
        raw,
    })
}

pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// The pooled `F3` target actually used by the consistency term.
    pub target: Option<Tensor>,
    /// Pre-neck head outputs, for the running statistics.
    pub raw: Vec<(Branch, Tensor)>,
}

/// Loss value and parameter gradients of one batch.
pub fn loss_and_gradients(
    model: &Model,
    inputs: &BatchInputs,
    variant: Variant,
    loss: &LossConfig,
) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
    loss_gradients_and_moments(model, inputs, variant, loss).map(|(l, g, _)| (l, g))
}

type StepResult = (LossBreakdown, Vec<Option<Tensor>>, Vec<(Branch, Tensor)>);

fn loss_gradients_and_moments(model: &Model, inputs: &BatchInputs, variant: Variant, loss: &LossConfig) -> Result<StepResult> {
    let mut g = Graph::new();
    let mut b = Binding::new(&model.params, true);
    let o = objective_with_target(model, &mut g, &mut b, inputs, variant, loss, None)?;
    let mut grads = g.backward(o.total);
    Ok((o.breakdown, b.collect(&mut grads), o.raw))
}

/// Adaptive-moment optimizer state, one slot per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied to each parameter so far.
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: vec![0; store.len()],
        }
    }

    /// Parameters without a gradient are left alone, moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: impl Fn(ParamGroup) -> f64) {
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let p = store.by_index_mut(i);
            let rate = lr(p.group);
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (&gj, pj)) in grad.data().iter().zip(p.value.data_mut()).enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                *pj -= rate * step;
            }
        }
    }
}

fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Next epoch to run.
    pub epoch: usize,
    /// Steps completed.
    pub step: usize,
}

impl TrainState {
    /// Initial weights are drawn from the training seed, so every variant of
    /// one seed starts from the same parameters.
    pub fn new(config: TrainConfig, mut model_config: ModelConfig) -> Result<Self> {
        config.validate()?;
        model_config.init_seed = config.seed;
        let model = Model::new(model_config)?;
        let adam = Adam::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            model,
            adam,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn lr(&self, group: ParamGroup) -> Result<f64> {
        lr_at(&self.config, self.epoch.min(self.config.epochs - 1), group)
    }
}

/// One forward, backward and parameter update at the current epoch's rates.
pub fn train_step(state: &mut TrainState, inputs: &BatchInputs) -> Result<LossBreakdown> {
    let cfg = &state.config;
    let (breakdown, mut grads, raw) = loss_gradients_and_moments(&state.model, inputs, cfg.variant, &cfg.loss)?;
    if let Some(c) = cfg.grad_clip {
        clip_gradients(&mut grads, c);
    }
    let (lv, lt) = (state.lr(ParamGroup::Visual)?, state.lr(ParamGroup::Text)?);
    state.adam.step(&mut state.model.params, &grads, |g| match g {
        ParamGroup::Visual => lv,
        ParamGroup::Text => lt,
        ParamGroup::Buffer => 0.0,
    });
    state.model.update_running_stats(&raw, NECK_MOMENTUM);
    state.step += 1;
    Ok(breakdown)
}

/// Samples a PK batch and prepares its inputs from the state's generator.
pub fn next_batch(
    state: &mut TrainState,
    dataset: &Dataset,
    corpus: Option<&CaptionCorpus>,
) -> Result<(Batch, BatchInputs)> {
    let batch = pk_sample(dataset, state.config.p, state.config.k, &mut state.rng)?;
    let aug = state.config.augment;
    let inputs = prepare_inputs(dataset, corpus, &batch.items, &aug, &mut state.rng)?;
    Ok((batch, inputs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr_visual: f64,
    pub lr_text: f64,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "step\tepoch\tlr_visual\tlr_text\tL_id\tL_mse\tL_con\tL_sm\tL_sc\ttotal";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
            self.step, self.epoch, self.lr_visual, self.lr_text, l.id, l.mse, l.con, l.sm, l.sc, l.total
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed log row {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            lr_visual: num(2)?,
            lr_text: num(3)?,
            loss: LossBreakdown {
                id: num(4)?,
                mse: num(5)?,
                con: num(6)?,
                sm: num(7)?,
                sc: num(8)?,
                total: num(9)?,
            },
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    if !path.exists() {
        return Err(Error::MissingDependency(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(LogRow::from_tsv).collect()
}

/// Where `fit` writes its artifacts.
#[derive(Debug, Clone)]
pub struct FitOutputs {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl FitOutputs {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.tsv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn state_path(&self, epoch: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("epoch_{epoch:03}.state"))
    }
}

struct LogSink {
    out: Option<(BufWriter<File>, PathBuf)>,
}

impl LogSink {
    fn write(&mut self, row: &LogRow) -> Result<()> {
        if let Some((w, p)) = &mut self.out {
            writeln!(w, "{}", row.to_tsv()).map_err(io_err(&*p))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((w, p)) = &mut self.out {
            w.flush().map_err(io_err(&*p))?;
        }
        Ok(())
    }
}

/// Runs the remaining epochs of `state`. With `outputs`, appends to the
/// training log, saves periodic states and a final model checkpoint.
pub fn fit(
    state: &mut TrainState,
    dataset: &Dataset,
    corpus: Option<&CaptionCorpus>,
    outputs: Option<&FitOutputs>,
) -> Result<Vec<LogRow>> {
    if state.config.variant.uses_text() && corpus.is_none() {
        return Err(Error::Config(format!(
            "variant {} needs a caption corpus",
            state.config.variant.tag()
        )));
    }
    let train_ids = dataset.num_identities(Split::Train);
    if state.model.config.num_classes < train_ids {
        return Err(Error::Config(format!(
            "classifier has {} classes for {train_ids} train identities",
            state.model.config.num_classes
        )));
    }
    let mut sink = LogSink { out: None };
    if let Some(o) = outputs {
        fs::create_dir_all(o.dir.join("checkpoints")).map_err(io_err(&o.dir))?;
        let path = o.log_path();
        let fresh = state.step == 0 || !path.exists();
        let file = if fresh {
            let mut f = File::create(&path).map_err(io_err(&path))?;
            writeln!(f, "{LOG_HEADER}").map_err(io_err(&path))?;
            f
        } else {
            truncate_log(&path, state.step)?;
            OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?
        };
        sink.out = Some((BufWriter::new(file), path));
    }
    let steps = steps_per_epoch(dataset, &state.config);
    let mut rows = Vec::new();
    let result = (|| -> Result<()> {
        while state.epoch < state.config.epochs {
            for _ in 0..steps {
                let (_, inputs) = next_batch(state, dataset, corpus)?;
                let lr_visual = state.lr(ParamGroup::Visual)?;
                let lr_text = state.lr(ParamGroup::Text)?;
                let loss = train_step(state, &inputs)?;
                let row = LogRow {
                    step: state.step,
                    epoch: state.epoch,
                    lr_visual,
                    lr_text,
                    loss,
                };
                sink.write(&row)?;
                rows.push(row);
            }
            state.epoch += 1;
            if let Some(o) = outputs {
                let every = state.config.checkpoint_every;
                if (every > 0 && state.epoch % every == 0) || state.epoch == state.config.epochs {
                    sink.flush()?;
                    save_state(state, &o.state_path(state.epoch), &o.config_hash)?;
                }
            }
        }
        Ok(())
    })();
    sink.flush()?;
    result?;
    if let Some(o) = outputs {
        let header = ModelHeader {
            kind: "model".into(),
            model: state.model.config.clone(),
            variant: state.config.variant,
            config_hash: o.config_hash.clone(),
            epoch: state.epoch,
            step: state.step,
        };
        checkpoint::save_model(&o.final_checkpoint(), &state.model, &header, Dtype::F64)?;
    }
    Ok(rows)
}

/// Drops log rows past `step` so a resumed run does not duplicate them.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let rows = read_log(path)?;
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows.iter().filter(|r| r.step <= step) {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    kind: String,
    config: TrainConfig,
    model: ModelConfig,
    config_hash: String,
    epoch: usize,
    step: usize,
    adam_t: Vec<u64>,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
}

pub fn save_state(state: &TrainState, path: &Path, config_hash: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let header = StateHeader {
        kind: "train_state".into(),
        config: state.config.clone(),
        model: state.model.config.clone(),
        config_hash: config_hash.to_string(),
        epoch: state.epoch,
        step: state.step,
        adam_t: state.adam.t.clone(),
        rng_seed: hex::encode(state.rng.get_seed()),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
    };
    let mut entries = Vec::new();
    for (i, p) in state.model.params.iter().enumerate() {
        entries.push((format!("param.{}", p.name), &p.value));
        entries.push((format!("adam.m.{}", p.name), &state.adam.m[i]));
        entries.push((format!("adam.v.{}", p.name), &state.adam.v[i]));
    }
    checkpoint::write_file(path, &serde_json::to_value(&header)?, &entries, Dtype::F64)
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let c: Container = checkpoint::read_file(path)?;
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let h: StateHeader = serde_json::from_value(c.header.clone()).map_err(|e| bad(&e.to_string()))?;
    if h.kind != "train_state" {
        return Err(bad("not a training state"));
    }
    let mut model = Model::new(h.model.clone())?;
    checkpoint::load_into(&mut model.params, &c, "param.")?;
    let mut adam = Adam::new(&model.params);
    let mut moments = ParamStore::default();
    for p in model.params.iter() {
        moments.add(p.name.clone(), p.group, Tensor::zeros(p.value.shape()));
    }
    let mut m_store = moments.clone();
    checkpoint::load_into(&mut m_store, &c, "adam.m.")?;
    checkpoint::load_into(&mut moments, &c, "adam.v.")?;
    adam.m = m_store.iter().map(|p| p.value.clone()).collect();
    adam.v = moments.iter().map(|p| p.value.clone()).collect();
    if h.adam_t.len() != model.params.len() {
        return Err(bad("optimizer step counts do not match the parameters"));
    }
    adam.t = h.adam_t;
    let seed: [u8; 32] = hex::decode(&h.rng_seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("bad rng seed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(h.rng_stream);
    rng.set_word_pos(h.rng_word_pos.parse().map_err(|_| bad("bad rng position"))?);
    Ok(TrainState {
        config: h.config,
        model,
        adam,
        rng,
        epoch: h.epoch,
        step: h.step,
    })
}

/// Something whose loss and gradients can be audited.
pub trait AuditTarget {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn loss(&self) -> Result<f64>;
    /// Analytic gradients aligned with `params`; `None` means zero.
    fn gradients(&self) -> Result<Vec<Option<Tensor>>>;
}

/// The training objective of a model on a fixed batch. The stop-gradient
/// consistency target is frozen at the initial parameters, so the loss seen
/// by finite differences is the one the analytic gradient belongs to.
pub struct ModelObjective<'a> {
    model: Model,
    inputs: &'a BatchInputs,
    variant: Variant,
    loss: LossConfig,
    target: Option<Tensor>,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: Model, inputs: &'a BatchInputs, variant: Variant, loss: LossConfig) -> Result<Self> {
        let mut g = Graph::new();
        let mut b = Binding::new(&model.params, false);
        let target = objective_with_target(&model, &mut g, &mut b, inputs, variant, &loss, None)?.target;
        Ok(Self {
            model,
            inputs,
            variant,
            loss,
            target,
        })
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

impl AuditTarget for ModelObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn loss(&self) -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binding::new(&self.model.params, false);
        let target = self.target.as_ref();
        let o = objective_with_target(&self.model, &mut g, &mut b, self.inputs, self.variant, &self.loss, target)?;
        Ok(o.breakdown.total)
    }

    fn gradients(&self) -> Result<Vec<Option<Tensor>>> {
        Ok(loss_and_gradients(&self.model, self.inputs, self.variant, &self.loss)?.1)
    }
}

/// Scales the analytic gradient of one parameter; for testing the audit.
pub struct FaultInjected<T> {
    pub inner: T,
    pub param: String,
    pub factor: f64,
}

impl<T: AuditTarget> AuditTarget for FaultInjected<T> {
    fn params(&self) -> &ParamStore {
        self.inner.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner.params_mut()
    }

    fn loss(&self) -> Result<f64> {
        self.inner.loss()
    }

    fn gradients(&self) -> Result<Vec<Option<Tensor>>> {
        let mut g = self.inner.gradients()?;
        let i = self
            .params()
            .find(&self.param)
            .ok_or_else(|| Error::Config(format!("no parameter named {}", self.param)))?;
        if let Some(t) = &mut g[i.index()] {
            *t = t.map(|v| v * self.factor);
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    /// Coordinates to check (kink coordinates do not count).
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub param: String,
    pub group: ParamGroup,
    pub checked: usize,
    pub max_rel_error: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    /// Coordinates dropped because the loss is not smooth around them.
    pub kinks_skipped: usize,
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| !g.flagged)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| g.flagged).map(|g| g.param.as_str()).collect()
    }
}

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference check of the analytic gradient on a random subset of
/// coordinates. Every parameter tensor is visited before any is revisited.
/// A coordinate whose difference quotients at `h` and `h/2` disagree sits on
/// a kink and is replaced by another draw.
pub fn gradient_audit(target: &mut dyn AuditTarget, cfg: &AuditConfig) -> Result<AuditReport> {
    let analytic = target.gradients()?;
    let n_params = target.params().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut entries = Vec::new();
    let mut kinks = 0;
    let mut attempts = 0;
    let h = cfg.step;
    while entries.len() < cfg.samples && attempts < cfg.samples * 8 {
        attempts += 1;
        if order.is_empty() {
            order = rand::seq::index::sample(&mut rng, n_params, n_params)
                .into_iter()
                .filter(|&i| target.params().by_index(i).group != ParamGroup::Buffer)
                .collect();
        }
        let pi = order.pop().expect("refilled");
        let numel = target.params().by_index(pi).value.numel();
        if numel == 0 {
            continue;
        }
        let j = rng.random_range(0..numel);
        let quotient = |t: &mut dyn AuditTarget, step: f64| -> Result<f64> {
            let orig = t.params().by_index(pi).value.data()[j];
            t.params_mut().by_index_mut(pi).value.data_mut()[j] = orig + step;
            let up = t.loss();
            t.params_mut().by_index_mut(pi).value.data_mut()[j] = orig - step;
            let down = t.loss();
            t.params_mut().by_index_mut(pi).value.data_mut()[j] = orig;
            Ok((up? - down?) / (2.0 * step))
        };
        let d1 = quotient(target, h)?;
        let d2 = quotient(target, h / 2.0)?;
        if rel_error(d1, d2, cfg.floor) > cfg.tolerance * 0.1 {
            kinks += 1;
            continue;
        }
        let a = analytic[pi].as_ref().map_or(0.0, |t| t.data()[j]);
        entries.push(AuditEntry {
            param: target.params().by_index(pi).name.clone(),
            index: j,
            analytic: a,
            numeric: d1,
            rel_error: rel_error(a, d1, cfg.floor),
        });
    }
    let mut groups: Vec<GroupReport> = Vec::new();
    for e in &entries {
        let pos = groups.iter().position(|g| g.param == e.param);
        let g = match pos {
            Some(i) => &mut groups[i],
            None => {
                let id = target.params().find(&e.param).expect("sampled from the store");
                groups.push(GroupReport {
                    param: e.param.clone(),
                    group: target.params().get(id).group,
                    checked: 0,
                    max_rel_error: 0.0,
                    flagged: false,
                });
                groups.last_mut().expect("just pushed")
            }
        };
        g.checked += 1;
        g.max_rel_error = g.max_rel_error.max(e.rel_error);
        g.flagged = g.max_rel_error >= cfg.tolerance;
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(AuditReport {
        entries,
        kinks_skipped: kinks,
        groups,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_defaults() {
        let paper = TrainConfig::paper();
        assert!(paper.validate().is_ok());
        assert_eq!(lr_at(&paper, 0, ParamGroup::Visual).unwrap(), 3e-4);
        assert_eq!(lr_at(&paper, 0, ParamGroup::Text).unwrap(), 1e-6);
        assert!(lr_at(&paper, 120, ParamGroup::Visual).is_err());
        let desk = TrainConfig::default();
        assert_eq!((desk.epochs, desk.drop_epochs.clone()), (30, vec![10, 18]));
        assert!(desk.validate().is_ok());
    }

    #[test]
    fn config_rejects_bad_drops() {
        let c = TrainConfig {
            drop_epochs: vec![20, 10],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            drop_epochs: vec![10, 30],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut store = ParamStore::default();
        store.add("w", ParamGroup::Visual, Tensor::from_fn(&[3], |i| i as f64));
        let before = store.clone();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Some(Tensor::zeros(&[3]))], |_| 1e-3);
        assert_eq!(store, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::default();
        store.add("w", ParamGroup::Text, Tensor::full(&[2], 1.0));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Some(Tensor::new(vec![2], vec![0.5, -2.0]))], |_| 0.01);
        let w = store.by_index(0).value.data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::new(vec![2], vec![3.0, 4.0])), None];
        clip_gradients(&mut g, 1.0);
        let t = g[0].as_ref().unwrap();
        assert!((t.data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn log_row_round_trip() {
        let row = LogRow {
            step: 3,
            epoch: 0,
            lr_visual: 3e-4,
            lr_text: 1e-6,
            loss: LossBreakdown {
                id: 1.0 / 3.0,
                mse: 0.1,
                con: 2.0,
                sm: 0.0,
                sc: -0.01,
                total: 1.7,
            },
        };
        assert_eq!(LogRow::from_tsv(&row.to_tsv()).unwrap(), row);
    }
}
