//! The dual-stream network.
//!
//! Image path: a strided convolutional trunk produces the stage-3 map `F3`.
//! Instance normalization splits it into an identity part `F_id` and a style
//! residual `F_st = F3 - F_id`. A squeeze-and-excitation gate `a` selects the
//! useful share of the residual, `F_stf = a * F_st`, which is added back to
//! give `F_res = F_id + F_stf`; the remainder `F_stl = F_st - F_stf` feeds a
//! separate style head. Two heads with identical structure but separate
//! weights pool and project the maps to `d`-dimensional embeddings.
//!
//! Text path: token and position embeddings, a stack of causal mixing layers
//! and a projection of the state at the `END` token.
//!
//! All decomposition maps are kept on a fixed-point lattice (see
//! [`FEATURE_LATTICE`]) so that the split/restitution identities hold exactly.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::captioner::{end_position, Vocabulary, DEFAULT_CONTEXT_LENGTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resolution of the grid that decomposition maps are snapped to. Sums and
/// differences of lattice values below `2^12` in magnitude are exact in `f64`.
pub const FEATURE_LATTICE: f64 = 1.0 / (1u64 << 40) as f64;

/// Which parts of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Identity and modality-shared enhancement losses only.
    Baseline,
    /// Adds image-text contrastive alignment.
    Dsfa,
    /// Adds instance-norm decoupling with the semantic margin loss.
    DsfaSmfd,
    /// Adds gated restitution with the semantic consistency loss.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Dsfa, Variant::DsfaSmfd, Variant::Full];

    pub fn uses_text(self) -> bool {
        self != Variant::Baseline
    }

    pub fn decouples(self) -> bool {
        matches!(self, Variant::DsfaSmfd | Variant::Full)
    }

    pub fn restitutes(self) -> bool {
        self == Variant::Full
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dsfa => "+dsfa",
            Variant::DsfaSmfd => "+dsfa+smfd",
            Variant::Full => "+dsfa+smfd+scfr",
        }
    }

    pub fn parse(tag: &str) -> Result<Variant> {
        match tag.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "+dsfa" | "dsfa" => Ok(Variant::Dsfa),
            "+dsfa+smfd" | "+smfd" | "dsfa-smfd" => Ok(Variant::DsfaSmfd),
            "+dsfa+smfd+scfr" | "+scfr" | "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!("unknown variant tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of the three stride-2 trunk stages.
    pub stage_widths: Vec<usize>,
    /// Residual blocks after the last trunk stage.
    pub residual_blocks: usize,
    pub head_width: usize,
    pub embed_dim: usize,
    /// SE reduction; 0 picks 16 when the stage-3 width is at least 16, else 1.
    pub se_reduction: usize,
    pub in_eps: f64,
    pub text_width: usize,
    pub text_depth: usize,
    pub context_length: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            stage_widths: vec![16, 32, 64],
            residual_blocks: 1,
            head_width: 64,
            embed_dim: 128,
            se_reduction: 0,
            in_eps: 1e-5,
            text_width: 64,
            text_depth: 2,
            context_length: DEFAULT_CONTEXT_LENGTH,
            num_classes: 32,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        *self.stage_widths.last().expect("at least one stage")
    }

    pub fn stride(&self) -> usize {
        1 << self.stage_widths.len()
    }

    pub fn reduction(&self) -> usize {
        match self.se_reduction {
            0 if self.channels() >= 16 => 16,
            0 => 1,
            r => r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::Config("stage widths must be non-empty and positive".into()));
        }
        let s = self.stride();
        if self.image_height % s != 0 || self.image_width % s != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not a multiple of the trunk stride {s}",
                self.image_height, self.image_width
            )));
        }
        if self.channels() % self.reduction() != 0 {
            return Err(Error::Config(format!(
                "SE reduction {} does not divide {} channels",
                self.reduction(),
                self.channels()
            )));
        }
        if self.in_eps <= 0.0 {
            return Err(Error::Config("instance-norm epsilon must be positive".into()));
        }
        if self.context_length < 8 || self.num_classes == 0 || self.embed_dim == 0 {
            return Err(Error::Config("context length >= 8, classes and embed dim > 0 required".into()));
        }
        Ok(())
    }
}

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Visual,
    Text,
    /// Running statistics; updated by the trainer, never by gradients.
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters in a fixed order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Lazily places parameters on a graph, at most once each.
pub struct Binding {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binding {
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        Self {
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn get(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = store.get(id);
        let t = p.value.clone();
        let v = if self.trainable && p.group != ParamGroup::Buffer {
            g.param(t)
        } else {
            g.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients aligned with the store; unbound or unreached parameters get `None`.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

/// Which statistics the embedding neck normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeckMode {
    /// Moments of the current batch (training).
    Batch,
    /// Accumulated running moments (inference).
    Running,
}

#[derive(Debug, Clone, Copy)]
struct NeckIds {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    conv: ConvIds,
    proj_w: ParamId,
    proj_b: ParamId,
    neck: NeckIds,
}

#[derive(Debug, Clone, Copy)]
struct MixIds {
    own: ParamId,
    ctx: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    stages: Vec<ConvIds>,
    residual: Vec<(ConvIds, ConvIds)>,
    in_gamma: ParamId,
    in_beta: ParamId,
    se_w1: ParamId,
    se_w2: ParamId,
    head_id: HeadIds,
    head_st: HeadIds,
    classifier_w: ParamId,
    classifier_b: ParamId,
    consistency_proj: ParamId,
    token_emb: ParamId,
    pos_emb: ParamId,
    mixers: Vec<MixIds>,
    text_proj: ParamId,
}

/// Which embedding head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Identity,
    Style,
}

impl std::str::FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Branch::Identity),
            "style" => Ok(Branch::Style),
            other => Err(Error::Config(format!("unknown branch tag {other:?}"))),
        }
    }
}

/// Counts evaluations of the parts that inference must not touch.
#[derive(Debug, Default)]
pub struct CallCounters {
    pub style_head: AtomicUsize,
    pub text_tower: AtomicUsize,
}

impl CallCounters {
    pub fn style_head(&self) -> usize {
        self.style_head.load(Ordering::Relaxed)
    }

    pub fn text_tower(&self) -> usize {
        self.text_tower.load(Ordering::Relaxed)
    }
}

/// Every intermediate the training objective needs.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub f3: Var,
    pub f_id: Option<Var>,
    pub f_st: Option<Var>,
    pub gate: Option<Var>,
    pub f_stf: Option<Var>,
    pub f_stl: Option<Var>,
    pub f_res: Option<Var>,
    /// `f_res`, or `f_id` / `f` in the reduced variants. `[B, d]`.
    pub identity_emb: Var,
    /// Identity head output before the neck.
    pub identity_raw: Var,
    pub style_raw: Option<Var>,
    /// `f_stl`, or `f_st` without restitution.
    pub style_emb: Option<Var>,
    /// `[B, d]`, one row per caption.
    pub text_emb: Option<Var>,
    /// `pool(F3)` and `pool(F_res)` projected to the text width.
    pub pooled_f3: Option<Var>,
    pub pooled_res: Option<Var>,
    pub logits: Var,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
    pub counters: CallCounters,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
            counters: CallCounters::default(),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| n.sample(&mut self.rng))
    }

    /// Variance scaling on the fan-in.
    fn scaled(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
        self.normal(shape, (gain / fan_in as f64).sqrt())
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let mut store = ParamStore::default();
        let v = ParamGroup::Visual;
        let conv = |store: &mut ParamStore, init: &mut Init, name: &str, co: usize, ci: usize| ConvIds {
            w: store.add(format!("{name}.weight"), v, init.scaled(&[co, ci, 3, 3], ci * 9, 2.0)),
            b: store.add(format!("{name}.bias"), v, Tensor::zeros(&[co])),
        };
        let mut stages = Vec::new();
        let mut ci = 3;
        for (i, &co) in config.stage_widths.iter().enumerate() {
            stages.push(conv(&mut store, &mut init, &format!("trunk.stage{i}"), co, ci));
            ci = co;
        }
        let c = config.channels();
        let residual = (0..config.residual_blocks)
            .map(|i| {
                let a = conv(&mut store, &mut init, &format!("trunk.res{i}.conv1"), c, c);
                let b = conv(&mut store, &mut init, &format!("trunk.res{i}.conv2"), c, c);
                // start residual branches small
                store.get_mut(b.w).value = store.get(b.w).value.map(|x| x * 0.1);
                (a, b)
            })
            .collect();
        let in_gamma = store.add("in.gamma", v, Tensor::full(&[c], 1.0));
        let in_beta = store.add("in.beta", v, Tensor::zeros(&[c]));
        let r = config.reduction();
        let se_w1 = store.add("se.w1", v, init.scaled(&[c / r, c], c, 2.0));
        let se_w2 = store.add("se.w2", v, init.scaled(&[c, c / r], c / r, 1.0));
        let (hw, d) = (config.head_width, config.embed_dim);
        let head = |store: &mut ParamStore, init: &mut Init, name: &str| HeadIds {
            conv: conv(store, init, &format!("{name}.conv"), hw, c),
            proj_w: store.add(format!("{name}.proj.weight"), v, init.scaled(&[hw, d], hw, 1.0)),
            proj_b: store.add(format!("{name}.proj.bias"), v, Tensor::zeros(&[d])),
            neck: NeckIds {
                gamma: store.add(format!("{name}.neck.gamma"), v, Tensor::full(&[d], 1.0)),
                beta: store.add(format!("{name}.neck.beta"), v, Tensor::zeros(&[d])),
                running_mean: store.add(format!("{name}.neck.running_mean"), ParamGroup::Buffer, Tensor::zeros(&[d])),
                running_var: store.add(format!("{name}.neck.running_var"), ParamGroup::Buffer, Tensor::full(&[d], 1.0)),
            },
        };
        let head_id = head(&mut store, &mut init, "head_id");
        let head_st = head(&mut store, &mut init, "head_st");
        let classifier_w = store.add(
            "classifier.weight",
            v,
            init.scaled(&[d, config.num_classes], d, 1.0),
        );
        let classifier_b = store.add("classifier.bias", v, Tensor::zeros(&[config.num_classes]));
        let consistency_proj = store.add("consistency.proj", v, init.scaled(&[c, d], c, 1.0));

        let t = ParamGroup::Text;
        let tw = config.text_width;
        let vocab = Vocabulary::global().len();
        let token_emb = store.add("text.token_emb", t, init.normal(&[vocab, tw], 1.0));
        let pos_emb = store.add("text.pos_emb", t, init.normal(&[config.context_length, tw], 0.2));
        let mixers = (0..config.text_depth)
            .map(|l| MixIds {
                own: store.add(format!("text.mix{l}.own"), t, init.scaled(&[tw, tw], tw, 0.5)),
                ctx: store.add(format!("text.mix{l}.ctx"), t, init.scaled(&[tw, tw], tw, 0.5)),
                bias: store.add(format!("text.mix{l}.bias"), t, Tensor::zeros(&[tw])),
            })
            .collect();
        let text_proj = store.add("text.proj", t, init.scaled(&[tw, d], tw, 1.0));

        Ok(Self {
            config,
            params: store,
            ids: Ids {
                stages,
                residual,
                in_gamma,
                in_beta,
                se_w1,
                se_w2,
                head_id,
                head_st,
                classifier_w,
                classifier_b,
                consistency_proj,
                token_emb,
                pos_emb,
                mixers,
                text_proj,
            },
            counters: CallCounters::default(),
        })
    }

    pub fn in_params(&self) -> (ParamId, ParamId) {
        (self.ids.in_gamma, self.ids.in_beta)
    }

    pub fn se_params(&self) -> (ParamId, ParamId) {
        (self.ids.se_w1, self.ids.se_w2)
    }

    fn conv(&self, g: &mut Graph, b: &mut Binding, x: Var, ids: ConvIds, stride: usize) -> Var {
        let w = b.get(g, &self.params, ids.w);
        let bias = b.get(g, &self.params, ids.b);
        g.conv2d(x, w, Some(bias), stride, 1)
    }

    /// `[B, 3, H, W] -> F3: [B, C, H/s, W/s]`.
    pub fn encode_image_trunk(&self, g: &mut Graph, b: &mut Binding, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let (h, w) = (self.config.image_height, self.config.image_width);
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w || s[0] == 0 {
            return Err(Error::Shape(format!("trunk expects [B, 3, {h}, {w}], got {s:?}")));
        }
        let mut x = images;
        for &ids in &self.ids.stages {
            let y = self.conv(g, b, x, ids, 2);
            x = g.relu(y);
        }
        for &(c1, c2) in &self.ids.residual {
            let y = self.conv(g, b, x, c1, 1);
            let y = g.relu(y);
            let y = self.conv(g, b, y, c2, 1);
            let sum = g.add(x, y);
            x = g.relu(sum);
        }
        Ok(g.snap(x, FEATURE_LATTICE))
    }

    /// `F_id = IN(F3)` with the model's affine parameters.
    pub fn instance_norm(&self, g: &mut Graph, b: &mut Binding, f3: Var) -> Var {
        let gamma = b.get(g, &self.params, self.ids.in_gamma);
        let beta = b.get(g, &self.params, self.ids.in_beta);
        instance_norm(g, f3, gamma, beta, self.config.in_eps)
    }

    pub fn se_gate(&self, g: &mut Graph, b: &mut Binding, f_st: Var) -> Result<Var> {
        let w1 = b.get(g, &self.params, self.ids.se_w1);
        let w2 = b.get(g, &self.params, self.ids.se_w2);
        se_gate(g, f_st, w1, w2)
    }

    /// Block + global average pool + projection to `d` + neck. Returns the
    /// pre-neck and the final embedding.
    pub fn head(&self, g: &mut Graph, b: &mut Binding, map: Var, branch: Branch, mode: NeckMode) -> Result<(Var, Var)> {
        let s = g.shape(map);
        if s.len() != 4 || s[1] != self.config.channels() {
            return Err(Error::Shape(format!(
                "head expects [B, {}, h, w], got {s:?}",
                self.config.channels()
            )));
        }
        let ids = match branch {
            Branch::Identity => self.ids.head_id,
            Branch::Style => {
                self.counters.style_head.fetch_add(1, Ordering::Relaxed);
                self.ids.head_st
            }
        };
        let y = self.conv(g, b, map, ids.conv, 2);
        let y = g.relu(y);
        let pooled = g.global_avg_pool(y);
        let w = b.get(g, &self.params, ids.proj_w);
        let bias = b.get(g, &self.params, ids.proj_b);
        let e = g.matmul(pooled, w);
        let raw = g.add_suffix(e, bias);
        Ok((raw, self.neck(g, b, raw, ids.neck, mode)))
    }

    /// Per-feature batch normalization of `[B, d]` embeddings.
    fn neck(&self, g: &mut Graph, b: &mut Binding, emb: Var, ids: NeckIds, mode: NeckMode) -> Var {
        let (n, d) = (g.shape(emb)[0], g.shape(emb)[1]);
        let gamma = b.get(g, &self.params, ids.gamma);
        let beta = b.get(g, &self.params, ids.beta);
        match mode {
            NeckMode::Batch => {
                let t = g.transpose(emb);
                let t = g.reshape(t, &[1, d, n, 1]);
                let t = g.instance_norm(t, gamma, beta, self.config.in_eps);
                let t = g.reshape(t, &[d, n]);
                g.transpose(t)
            }
            NeckMode::Running => {
                let (gm, bt) = (g.value(gamma).clone(), g.value(beta).clone());
                let mean = &self.params.get(ids.running_mean).value;
                let var = &self.params.get(ids.running_var).value;
                let scale: Vec<f64> = (0..d)
                    .map(|j| gm.data()[j] / (var.data()[j] + self.config.in_eps).sqrt())
                    .collect();
                let shift: Vec<f64> = (0..d).map(|j| bt.data()[j] - mean.data()[j] * scale[j]).collect();
                let s = g.constant(Tensor::from_fn(&[n, d], |i| scale[i % d]));
                let y = g.mul(emb, s);
                let sh = g.constant(Tensor::new(vec![d], shift));
                g.add_suffix(y, sh)
            }
        }
    }

    /// Moves the running statistics of each head toward the batch moments
    /// of its pre-neck outputs (unbiased variance).
    pub fn update_running_stats(&mut self, raw: &[(Branch, Tensor)], momentum: f64) {
        for (branch, t) in raw {
            let ids = match branch {
                Branch::Identity => self.ids.head_id.neck,
                Branch::Style => self.ids.head_st.neck,
            };
            let (n, d) = (t.shape()[0], t.shape()[1]);
            if n < 2 {
                continue;
            }
            let mut mean = vec![0.0; d];
            for row in t.data().chunks(d) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
            }
            let mut var = vec![0.0; d];
            for row in t.data().chunks(d) {
                for j in 0..d {
                    var[j] += (row[j] - mean[j]).powi(2) / (n - 1) as f64;
                }
            }
            let blend = |store: &mut ParamStore, id: ParamId, batch: &[f64]| {
                for (r, v) in store.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            };
            blend(&mut self.params, ids.running_mean, &mean);
            blend(&mut self.params, ids.running_var, &var);
        }
    }

    /// One embedding row per token sequence.
    pub fn encode_text(&self, g: &mut Graph, b: &mut Binding, tokens: &[Vec<u32>]) -> Result<Var> {
        self.counters.text_tower.fetch_add(1, Ordering::Relaxed);
        let t = self.config.context_length;
        let vocab = Vocabulary::global().len();
        let mut ids = Vec::with_capacity(tokens.len() * t);
        let mut ends = Vec::with_capacity(tokens.len());
        for (n, seq) in tokens.iter().enumerate() {
            if seq.len() != t {
                return Err(Error::Shape(format!(
                    "token sequence {n} has length {}, expected {t}",
                    seq.len()
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&id| id as usize >= vocab) {
                return Err(Error::Tokenize(format!("<id {bad}>")));
            }
            ends.push(n * t + end_position(seq).unwrap_or(t - 1));
            ids.extend(seq.iter().map(|&id| id as usize));
        }
        let bsz = tokens.len();
        let tw = self.config.text_width;
        let table = b.get(g, &self.params, self.ids.token_emb);
        let pos = b.get(g, &self.params, self.ids.pos_emb);
        let e = g.embedding(table, &ids);
        let e = g.reshape(e, &[bsz, t, tw]);
        let mut x = g.add_suffix(e, pos);
        for m in &self.ids.mixers {
            let ctx = g.prefix_mean(x);
            let flat_x = g.reshape(x, &[bsz * t, tw]);
            let flat_ctx = g.reshape(ctx, &[bsz * t, tw]);
            let own = b.get(g, &self.params, m.own);
            let cw = b.get(g, &self.params, m.ctx);
            let bias = b.get(g, &self.params, m.bias);
            let a = g.matmul(flat_x, own);
            let c = g.matmul(flat_ctx, cw);
            let s = g.add(a, c);
            let s = g.add_suffix(s, bias);
            let s = g.relu(s);
            let upd = g.add(flat_x, s);
            x = g.reshape(upd, &[bsz, t, tw]);
        }
        // causal mean up to END summarizes the caption
        let pooled = g.prefix_mean(x);
        let flat = g.reshape(pooled, &[bsz * t, tw]);
        let at_end = g.gather_rows(flat, &ends);
        // final layer norm (no affine; the projection follows)
        let one = g.constant(Tensor::full(&[1], 1.0));
        let zero = g.constant(Tensor::zeros(&[1]));
        let col = g.reshape(at_end, &[bsz, 1, tw, 1]);
        let normed = g.instance_norm(col, one, zero, self.config.in_eps);
        let normed = g.reshape(normed, &[bsz, tw]);
        let proj = b.get(g, &self.params, self.ids.text_proj);
        Ok(g.matmul(normed, proj))
    }

    fn project_pooled(&self, g: &mut Graph, b: &mut Binding, map: Var) -> Var {
        let pooled = g.global_avg_pool(map);
        let w = b.get(g, &self.params, self.ids.consistency_proj);
        g.matmul(pooled, w)
    }

    /// Full training forward pass for `variant`. `tokens` must be given when
    /// the variant uses text.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binding,
        images: Var,
        tokens: Option<&[Vec<u32>]>,
        variant: Variant,
    ) -> Result<ForwardOutput> {
        let mut out = self.forward_images(g, b, images, variant)?;
        if variant.uses_text() {
            let tokens = tokens.ok_or_else(|| Error::Config(format!("variant {} needs captions", variant.tag())))?;
            if tokens.len() != g.shape(images)[0] {
                return Err(Error::Shape(format!(
                    "{} captions for {} images",
                    tokens.len(),
                    g.shape(images)[0]
                )));
            }
            out.text_emb = Some(self.encode_text(g, b, tokens)?);
        }
        Ok(out)
    }

    /// Every image-side output of `variant`; the text tower is not run.
    pub fn forward_images(&self, g: &mut Graph, b: &mut Binding, images: Var, variant: Variant) -> Result<ForwardOutput> {
        self.forward_images_with(g, b, images, variant, NeckMode::Batch)
    }

    pub fn forward_images_with(
        &self,
        g: &mut Graph,
        b: &mut Binding,
        images: Var,
        variant: Variant,
        mode: NeckMode,
    ) -> Result<ForwardOutput> {
        let f3 = self.encode_image_trunk(g, b, images)?;
        let mut out = ForwardOutput {
            f3,
            f_id: None,
            f_st: None,
            gate: None,
            f_stf: None,
            f_stl: None,
            f_res: None,
            identity_emb: f3,
            identity_raw: f3,
            style_raw: None,
            style_emb: None,
            text_emb: None,
            pooled_f3: None,
            pooled_res: None,
            logits: f3,
        };
        let identity_map = if variant.decouples() {
            let f_id = self.instance_norm(g, b, f3);
            let f_st = style_residual(g, f3, f_id)?;
            out.f_id = Some(f_id);
            out.f_st = Some(f_st);
            if variant.restitutes() {
                let gate = self.se_gate(g, b, f_st)?;
                let (f_stf, f_stl) = split_style(g, f_st, gate)?;
                let f_res = restitute(g, f_id, f_stf)?;
                out.gate = Some(gate);
                out.f_stf = Some(f_stf);
                out.f_stl = Some(f_stl);
                out.f_res = Some(f_res);
                let (raw, emb) = self.head(g, b, f_stl, Branch::Style, mode)?;
                out.style_raw = Some(raw);
                out.style_emb = Some(emb);
                out.pooled_f3 = Some(self.project_pooled(g, b, f3));
                out.pooled_res = Some(self.project_pooled(g, b, f_res));
                f_res
            } else {
                let (raw, emb) = self.head(g, b, f_st, Branch::Style, mode)?;
                out.style_raw = Some(raw);
                out.style_emb = Some(emb);
                f_id
            }
        } else {
            f3
        };
        let (raw, emb) = self.head(g, b, identity_map, Branch::Identity, mode)?;
        out.identity_raw = raw;
        out.identity_emb = emb;
        let cw = b.get(g, &self.params, self.ids.classifier_w);
        let cb = b.get(g, &self.params, self.ids.classifier_b);
        let logits = g.matmul(emb, cw);
        out.logits = g.add_suffix(logits, cb);
        Ok(out)
    }

    /// Inference path: identity embeddings only. No text tower, no style head.
    pub fn embed(&self, images: &Tensor, variant: Variant) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binding::new(&self.params, false);
        let x = g.constant(images.clone());
        let f3 = self.encode_image_trunk(&mut g, &mut b, x)?;
        let map = if variant.decouples() {
            let f_id = self.instance_norm(&mut g, &mut b, f3);
            if variant.restitutes() {
                let f_st = style_residual(&mut g, f3, f_id)?;
                let gate = self.se_gate(&mut g, &mut b, f_st)?;
                let (f_stf, _) = split_style(&mut g, f_st, gate)?;
                restitute(&mut g, f_id, f_stf)?
            } else {
                f_id
            }
        } else {
            f3
        };
        let (_, e) = self.head(&mut g, &mut b, map, Branch::Identity, NeckMode::Running)?;
        Ok(g.value(e).clone())
    }

    /// Style embeddings (`f_stl`, or `f_st` without restitution) for probing.
    pub fn embed_style(&self, images: &Tensor, variant: Variant) -> Result<Tensor> {
        if !variant.decouples() {
            return Err(Error::Config(format!("variant {} has no style branch", variant.tag())));
        }
        let mut g = Graph::new();
        let mut b = Binding::new(&self.params, false);
        let x = g.constant(images.clone());
        let out = self.forward_images_with(&mut g, &mut b, x, variant, NeckMode::Running)?;
        Ok(g.value(out.style_emb.expect("decoupling variant")).clone())
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per sample and channel, snapped to the lattice.
pub fn instance_norm(g: &mut Graph, f3: Var, gamma: Var, beta: Var, eps: f64) -> Var {
    let y = g.instance_norm(f3, gamma, beta, eps);
    g.snap(y, FEATURE_LATTICE)
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// `F_st = F3 - F_id`.
pub fn style_residual(g: &mut Graph, f3: Var, f_id: Var) -> Result<Var> {
    same_shape(g, f3, f_id, "style residual")?;
    Ok(g.sub(f3, f_id))
}

/// `sigmoid(W2 relu(W1 pool(F_st)))`, one gate vector per sample.
pub fn se_gate(g: &mut Graph, f_st: Var, w1: Var, w2: Var) -> Result<Var> {
    let s = g.shape(f_st).to_vec();
    let (s1, s2) = (g.shape(w1).to_vec(), g.shape(w2).to_vec());
    if s.len() != 4 || s1.len() != 2 || s2.len() != 2 || s1[1] != s[1] || s2[0] != s[1] || s1[0] != s2[1] {
        return Err(Error::Shape(format!(
            "SE weights {s1:?}, {s2:?} do not fit a map of shape {s:?}"
        )));
    }
    let pooled = g.global_avg_pool(f_st);
    let w1t = g.transpose(w1);
    let h = g.matmul(pooled, w1t);
    let h = g.relu(h);
    let w2t = g.transpose(w2);
    let z = g.matmul(h, w2t);
    Ok(g.sigmoid(z))
}

/// `(a * F_st, (1 - a) * F_st)`; the second part is formed as `F_st - F_stf`
/// so the two parts sum back to `F_st` exactly.
pub fn split_style(g: &mut Graph, f_st: Var, gate: Var) -> Result<(Var, Var)> {
    let (s, gs) = (g.shape(f_st), g.shape(gate));
    if s.len() != 4 || gs != &s[..2] {
        return Err(Error::Shape(format!("gate {gs:?} does not match map {s:?}")));
    }
    let stf = g.channel_scale(f_st, gate);
    let stf = g.snap(stf, FEATURE_LATTICE);
    let stl = g.sub(f_st, stf);
    Ok((stf, stl))
}

/// `F_res = F_id + F_stf`.
pub fn restitute(g: &mut Graph, f_id: Var, f_stf: Var) -> Result<Var> {
    same_shape(g, f_id, f_stf, "restitution")?;
    Ok(g.add(f_id, f_stf))
}

/// Stacks `[3, H, W]` images into a `[B, 3, H, W]` tensor.
pub fn stack_images(images: &[Vec<f64>], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        assert_eq!(im.len(), 3 * h * w, "image size mismatch");
        data.extend_from_slice(im);
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}
