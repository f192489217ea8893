//! Training objectives.
//!
//! Every loss is built on an autograd [`Graph`] so the trainer gets gradients
//! for free. Similarities are cosines of L2-normalized rows.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMode {
    Signed,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub consistency_mode: ConsistencyMode,
    /// Divides the contrastive logits.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda1: 0.15,
            lambda2: 0.3,
            lambda3: 0.02,
            consistency_mode: ConsistencyMode::Signed,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.margin, self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("margin and loss weights must be finite and >= 0".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine similarity of two vectors.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm vector in cosine similarity".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn check_rows(g: &Graph, x: Var, what: &str) -> Result<()> {
    let t = g.value(x);
    if t.rank() != 2 || t.shape()[0] == 0 {
        return Err(Error::Shape(format!("{what}: expected [n, d], got {:?}", t.shape())));
    }
    for i in 0..t.shape()[0] {
        if t.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateEmbedding(format!("{what}: row {i} has zero norm")));
        }
    }
    Ok(())
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

fn unit_rows(g: &mut Graph, x: Var, what: &str) -> Result<Var> {
    check_rows(g, x, what)?;
    Ok(g.normalize_rows(x))
}

/// Row-wise cosine `s(a_i, b_i)`, shape `[n]`.
pub fn paired_cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "paired cosine")?;
    let an = unit_rows(g, a, "paired cosine")?;
    let bn = unit_rows(g, b, "paired cosine")?;
    Ok(g.row_dot(an, bn))
}

/// Cosine similarity matrix `S[i][j] = s(f_i, t_j)`.
pub fn similarity_matrix(g: &mut Graph, f: Var, t: Var) -> Result<Var> {
    if g.shape(f).len() != 2 || g.shape(f)[1..] != g.shape(t)[1..] {
        return Err(Error::Shape(format!("similarity of {:?} and {:?}", g.shape(f), g.shape(t))));
    }
    let fnorm = unit_rows(g, f, "image embeddings")?;
    let tnorm = unit_rows(g, t, "text embeddings")?;
    let tt = g.transpose(tnorm);
    Ok(g.matmul(fnorm, tt))
}

/// Image-to-text plus text-to-image softmax cross-entropy over the batch,
/// with cosine logits divided by `temperature`.
pub fn contrastive_loss(g: &mut Graph, f: Var, t: Var, temperature: f64) -> Result<Var> {
    same_shape(g, f, t, "contrastive loss")?;
    let n = g.shape(f)[0];
    let s = similarity_matrix(g, f, t)?;
    let s = g.scale(s, 1.0 / temperature);
    let diag: Vec<usize> = (0..n).collect();
    let i2t = g.log_softmax_rows(s);
    let i2t = g.pick(i2t, &diag);
    let i2t = g.mean(i2t);
    let st = g.transpose(s);
    let t2i = g.log_softmax_rows(st);
    let t2i = g.pick(t2i, &diag);
    let t2i = g.mean(t2i);
    let both = g.add(i2t, t2i);
    Ok(g.scale(both, -1.0))
}

/// `mean_i max(0, m + s(neg_i, t_i) - s(pos_i, t_i))`.
pub fn semantic_margin_loss(g: &mut Graph, f_pos: Var, f_neg: Var, t: Var, margin: f64) -> Result<Var> {
    let sp = paired_cosine(g, f_pos, t)?;
    let sn = paired_cosine(g, f_neg, t)?;
    let gap = g.sub(sn, sp);
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    Ok(g.mean(hinge))
}

/// Per-sample `s(pool(F3), t) - s(pool(F_res), t)`, averaged (signed) or
/// averaged in absolute value. The `F3` side is a fixed target.
pub fn semantic_consistency_loss(
    g: &mut Graph,
    pooled_f3: Var,
    pooled_res: Var,
    t: Var,
    mode: ConsistencyMode,
) -> Result<Var> {
    if g.shape(pooled_f3) != g.shape(t) || g.shape(pooled_res) != g.shape(t) {
        return Err(Error::Config(format!(
            "consistency projection width mismatch: pooled {:?} / {:?}, text {:?}",
            g.shape(pooled_f3),
            g.shape(pooled_res),
            g.shape(t)
        )));
    }
    let target = g.detach(pooled_f3);
    let s3 = paired_cosine(g, target, t)?;
    let sr = paired_cosine(g, pooled_res, t)?;
    let d = g.sub(s3, sr);
    let d = match mode {
        ConsistencyMode::Signed => d,
        ConsistencyMode::Absolute => g.abs(d),
    };
    Ok(g.mean(d))
}

/// Mean softmax cross-entropy.
pub fn identity_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!("{} labels for logits {s:?}", labels.len())));
    }
    let classes = s[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let lp = g.log_softmax_rows(logits);
    let picked = g.pick(lp, labels);
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Averaging weights for the intra- and cross-modality positive distances of
/// every anchor. Rows are anchors.
pub fn positive_weights(ids: &[usize], modalities: &[u8]) -> Result<(Tensor, Tensor)> {
    let n = ids.len();
    if modalities.len() != n {
        return Err(Error::BatchStructure("ids and modalities differ in length".into()));
    }
    let mut intra = Tensor::zeros(&[n, n]);
    let mut inter = Tensor::zeros(&[n, n]);
    for a in 0..n {
        let same: Vec<usize> = (0..n).filter(|&j| j != a && ids[j] == ids[a] && modalities[j] == modalities[a]).collect();
        let cross: Vec<usize> = (0..n).filter(|&j| ids[j] == ids[a] && modalities[j] != modalities[a]).collect();
        if same.is_empty() {
            return Err(Error::BatchStructure(format!(
                "identity {} has a single image in modality {}; intra-modality distance undefined",
                ids[a], modalities[a]
            )));
        }
        if cross.is_empty() {
            return Err(Error::BatchStructure(format!(
                "identity {} has no images in the other modality",
                ids[a]
            )));
        }
        for &j in &same {
            intra.data_mut()[a * n + j] = 1.0 / same.len() as f64;
        }
        for &j in &cross {
            inter.data_mut()[a * n + j] = 1.0 / cross.len() as f64;
        }
    }
    Ok((intra, inter))
}

/// `(1/n) sum_k (d_intra(k) - d_inter(k))^2` with per-anchor mean Euclidean
/// distances to same-identity samples within and across modalities.
pub fn modality_shared_enhancement_loss(g: &mut Graph, emb: Var, ids: &[usize], modalities: &[u8]) -> Result<Var> {
    let s = g.shape(emb);
    if s.len() != 2 || s[0] != ids.len() {
        return Err(Error::Shape(format!("{} ids for embeddings {s:?}", ids.len())));
    }
    let (wi, wx) = positive_weights(ids, modalities)?;
    let d = g.pairwise_dist(emb);
    let wi = g.constant(wi);
    let wx = g.constant(wx);
    let di = g.mul(d, wi);
    let di = g.sum_rows(di);
    let dx = g.mul(d, wx);
    let dx = g.sum_rows(dx);
    let diff = g.sub(di, dx);
    let sq = g.mul(diff, diff);
    Ok(g.mean(sq))
}

/// The five objective terms. Terms a variant does not use are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id: f64,
    pub mse: f64,
    pub con: f64,
    pub sm: f64,
    pub sc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("L_id", self.id),
            ("L_mse", self.mse),
            ("L_con", self.con),
            ("L_sm", self.sm),
            ("L_sc", self.sc),
        ]
    }
}

/// `L_id + L_mse + l1 L_con + l2 L_sm + l3 L_sc`; a non-finite term is a divergence.
pub fn total_loss(id: f64, mse: f64, con: f64, sm: f64, sc: f64, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut b = LossBreakdown { id, mse, con, sm, sc, total: 0.0 };
    for (term, value) in b.terms() {
        if !value.is_finite() {
            return Err(Error::Divergence { term, value });
        }
    }
    b.total = id + mse + cfg.lambda1 * con + cfg.lambda2 * sm + cfg.lambda3 * sc;
    Ok(b)
}

/// Graph nodes of the objective terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub id: Var,
    pub mse: Var,
    pub con: Option<Var>,
    pub sm: Option<Var>,
    pub sc: Option<Var>,
}

/// Weighted sum on the graph plus its value breakdown.
pub fn weighted_total(g: &mut Graph, terms: &LossTerms, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let breakdown = total_loss(
        g.value(terms.id).item(),
        g.value(terms.mse).item(),
        val(g, terms.con),
        val(g, terms.sm),
        val(g, terms.sc),
        cfg,
    )?;
    let mut total = g.add(terms.id, terms.mse);
    for (v, w) in [(terms.con, cfg.lambda1), (terms.sm, cfg.lambda2), (terms.sc, cfg.lambda3)] {
        if let Some(v) = v {
            let s = g.scale(v, w);
            total = g.add(total, s);
        }
    }
    Ok((total, breakdown))
}
