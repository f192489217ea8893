//! Retrieval evaluation and style probing.
//!
//! AP is the mean over relevant gallery entries of the precision at the rank
//! where each is retrieved. Gallery entries with the query's identity and
//! camera are dropped before ranking.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{is_indoor, Dataset, Modality, Split};
use crate::encoder::{stack_images, Model, Variant};
use crate::error::{io_err, Error, Result};
use crate::tensor::{gemm, Tensor};

pub const RANKS: [usize; 4] = [1, 5, 10, 20];
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const AP_DEFINITION: &str =
    "AP = (1/R) * sum over relevant gallery hits of (relevant retrieved so far / rank of the hit)";

/// One embedding row per image with retrieval metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<usize>,
    pub modalities: Vec<Modality>,
    pub cameras: Vec<u8>,
    /// `[n, d]`.
    pub data: Tensor,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.data.row(r));
        }
        Self {
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            modalities: rows.iter().map(|&r| self.modalities[r]).collect(),
            cameras: rows.iter().map(|&r| self.cameras[r]).collect(),
            data: Tensor::new(vec![rows.len(), d], data),
        }
    }

    /// Writes the TSV index at `path` and the `f32` payload next to it with a `.bin` suffix.
    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut tsv = String::from("id\tmodality\tcamera\td\n");
        for i in 0..self.len() {
            tsv.push_str(&format!("{}\t{}\t{}\t{d}\n", self.ids[i], self.modalities[i], self.cameras[i]));
        }
        fs::write(path, tsv).map_err(io_err(path))?;
        let bin = payload_path(path);
        let bytes: Vec<u8> = self.data.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(&bin, bytes).map_err(io_err(&bin))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bin = payload_path(path);
        for p in [path, bin.as_path()] {
            if !p.exists() {
                return Err(Error::MissingDependency(p.to_path_buf()));
            }
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let bad = |n: usize| Error::Config(format!("{}:{}: malformed embedding row", path.display(), n + 1));
        let mut lines = text.lines();
        if lines.next() != Some("id\tmodality\tcamera\td") {
            return Err(bad(0));
        }
        let (mut ids, mut modalities, mut cameras) = (Vec::new(), Vec::new(), Vec::new());
        let mut dim = None;
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(n + 1));
            }
            ids.push(f[0].parse().map_err(|_| bad(n + 1))?);
            modalities.push(f[1].parse()?);
            cameras.push(f[2].parse().map_err(|_| bad(n + 1))?);
            let d: usize = f[3].parse().map_err(|_| bad(n + 1))?;
            if *dim.get_or_insert(d) != d {
                return Err(bad(n + 1));
            }
        }
        let d = dim.unwrap_or(0);
        let bytes = fs::read(&bin).map_err(io_err(&bin))?;
        if bytes.len() != ids.len() * d * 4 {
            return Err(Error::Config(format!(
                "{}: payload holds {} bytes, index needs {}",
                bin.display(),
                bytes.len(),
                ids.len() * d * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Self {
            data: Tensor::new(vec![ids.len(), d], data),
            ids,
            modalities,
            cameras,
        })
    }
}

pub fn payload_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

/// Which embedding to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Identity,
    Style,
}

/// Embeds dataset images `records` without augmentation. Values are rounded
/// to `f32` so the table survives the file format unchanged.
pub fn extract_embeddings(
    model: &Model,
    variant: Variant,
    dataset: &Dataset,
    records: &[usize],
    kind: FeatureKind,
) -> Result<EmbeddingTable> {
    const CHUNK: usize = 64;
    let (h, w) = (dataset.spec.height, dataset.spec.width);
    let d = model.config.embed_dim;
    let mut data = Vec::with_capacity(records.len() * d);
    for chunk in records.chunks(CHUNK) {
        let imgs: Vec<Vec<f64>> = chunk.iter().map(|&i| dataset.pixels_f64(i)).collect();
        let x = stack_images(&imgs, h, w);
        let e = match kind {
            FeatureKind::Identity => model.embed(&x, variant)?,
            FeatureKind::Style => model.embed_style(&x, variant)?,
        };
        data.extend(e.data().iter().map(|&v| v as f32 as f64));
    }
    let recs = records.iter().map(|&i| &dataset.images[i]);
    Ok(EmbeddingTable {
        ids: recs.clone().map(|r| r.identity).collect(),
        modalities: recs.clone().map(|r| r.modality).collect(),
        cameras: recs.map(|r| r.camera).collect(),
        data: Tensor::new(vec![records.len(), d], data),
    })
}

/// Metrics of one query set against one gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatMetrics {
    /// Rank-k accuracy keyed by k.
    pub rank: BTreeMap<usize, f64>,
    pub map: f64,
    pub queries: usize,
    /// Queries without any relevant gallery entry.
    pub skipped_queries: usize,
}

fn unit_rows(t: &Tensor) -> Vec<f64> {
    let d = t.shape()[1];
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(d.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Cosine similarities `[nq, ng]`.
pub fn similarity(query: &EmbeddingTable, gallery: &EmbeddingTable) -> Result<Vec<f64>> {
    if query.dim() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query width {} vs gallery width {}",
            query.dim(),
            gallery.dim()
        )));
    }
    let (nq, ng, d) = (query.len(), gallery.len(), query.dim());
    let (q, g) = (unit_rows(&query.data), unit_rows(&gallery.data));
    let mut s = vec![0.0; nq * ng];
    gemm(nq, d, ng, 1.0, &q, (d as isize, 1), &g, (1, d as isize), 0.0, &mut s, (ng as isize, 1));
    Ok(s)
}

/// Rank-k accuracy and mAP of every query against the whole gallery.
pub fn rank_and_map(query: &EmbeddingTable, gallery: &EmbeddingTable) -> Result<RepeatMetrics> {
    if gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    let ng = gallery.len();
    let sims = similarity(query, gallery)?;
    let mut hits_at = [0usize; RANKS.len()];
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for qi in 0..query.len() {
        let row = &sims[qi * ng..(qi + 1) * ng];
        let (qid, qcam) = (query.ids[qi], query.cameras[qi]);
        order.clear();
        order.extend((0..ng).filter(|&j| !(gallery.ids[j] == qid && gallery.cameras[j] == qcam)));
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        let relevant = order.iter().filter(|&&j| gallery.ids[j] == qid).count();
        if relevant == 0 {
            continue;
        }
        evaluated += 1;
        let mut found = 0;
        let mut first = None;
        let mut ap = 0.0;
        for (pos, &j) in order.iter().enumerate() {
            if gallery.ids[j] == qid {
                found += 1;
                first.get_or_insert(pos);
                ap += found as f64 / (pos + 1) as f64;
            }
        }
        ap_sum += ap / relevant as f64;
        let first = first.expect("relevant > 0");
        for (slot, &k) in RANKS.iter().enumerate() {
            hits_at[slot] += usize::from(first < k);
        }
    }
    let denom = evaluated.max(1) as f64;
    Ok(RepeatMetrics {
        rank: RANKS.iter().zip(hits_at).map(|(&k, h)| (k, h as f64 / denom)).collect(),
        map: ap_sum / denom,
        queries: evaluated,
        skipped_queries: query.len() - evaluated,
    })
}

/// Reference ranking for a single query: full sort by descending cosine with
/// gallery order breaking ties, and AP from its definition. `None` when no
/// gallery entry is relevant.
pub fn brute_force_oracle(
    query: &[f64],
    query_id: usize,
    query_camera: u8,
    gallery: &EmbeddingTable,
) -> Option<(Vec<usize>, f64)> {
    let cos = |a: &[f64], b: &[f64]| {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut scored: Vec<(f64, usize)> = (0..gallery.len())
        .filter(|&j| !(gallery.ids[j] == query_id && gallery.cameras[j] == query_camera))
        .map(|j| (cos(query, gallery.data.row(j)), j))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
    let ranking: Vec<usize> = scored.iter().map(|&(_, j)| j).collect();
    let rel: Vec<bool> = ranking.iter().map(|&j| gallery.ids[j] == query_id).collect();
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut ap = 0.0;
    for k in 0..rel.len() {
        if rel[k] {
            let precision = rel[..=k].iter().filter(|&&r| r).count() as f64 / (k + 1) as f64;
            ap += precision;
        }
    }
    Some((ranking, ap / total as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    All,
    Indoor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shots {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    InfraredToVisible,
    VisibleToInfrared,
}

impl std::str::FromStr for SearchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SearchMode::All),
            "indoor" => Ok(SearchMode::Indoor),
            o => Err(Error::Config(format!("unknown search mode {o:?}"))),
        }
    }
}

impl std::str::FromStr for Shots {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Shots::Single),
            "multi" => Ok(Shots::Multi),
            o => Err(Error::Config(format!("unknown shot setting {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GalleryProtocol {
    pub search: SearchMode,
    pub shots: Shots,
    pub repeats: usize,
    /// Gallery images per identity per camera in multi-shot mode.
    pub multi_shot: usize,
    pub direction: Direction,
    pub seed: u64,
}

impl Default for GalleryProtocol {
    fn default() -> Self {
        Self {
            search: SearchMode::All,
            shots: Shots::Single,
            repeats: 10,
            multi_shot: 10,
            direction: Direction::InfraredToVisible,
            seed: 0,
        }
    }
}

impl GalleryProtocol {
    pub fn name(&self) -> String {
        let s = match self.search {
            SearchMode::All => "all",
            SearchMode::Indoor => "indoor",
        };
        let k = match self.shots {
            Shots::Single => "single",
            Shots::Multi => "multi",
        };
        format!("{s}-{k}")
    }

    /// All four search/shot combinations sharing this protocol's other settings.
    pub fn four(self) -> [GalleryProtocol; 4] {
        let mk = |search, shots| GalleryProtocol { search, shots, ..self };
        [
            mk(SearchMode::All, Shots::Single),
            mk(SearchMode::All, Shots::Multi),
            mk(SearchMode::Indoor, Shots::Single),
            mk(SearchMode::Indoor, Shots::Multi),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub protocol: GalleryProtocol,
    pub ap_definition: String,
    /// Mean Rank-k over repeats.
    pub rank: BTreeMap<usize, f64>,
    pub map: f64,
    pub map_std: f64,
    pub rank1_std: f64,
    pub per_repeat: Vec<RepeatMetrics>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Samples galleries from `pool` and evaluates `query` against each.
pub fn run_protocol_on_tables(
    query: &EmbeddingTable,
    pool: &EmbeddingTable,
    protocol: &GalleryProtocol,
    config_hash: &str,
) -> Result<MetricsReport> {
    if protocol.repeats == 0 {
        return Err(Error::Protocol("repeats must be at least 1".into()));
    }
    if query.is_empty() {
        return Err(Error::Protocol("no query images".into()));
    }
    // candidate gallery rows grouped by (identity, camera)
    let mut groups: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
    for j in 0..pool.len() {
        if protocol.search == SearchMode::Indoor && !is_indoor(pool.cameras[j]) {
            continue;
        }
        groups.entry((pool.ids[j], pool.cameras[j])).or_default().push(j);
    }
    if groups.is_empty() {
        return Err(Error::Protocol(format!(
            "protocol {} leaves the gallery empty",
            protocol.name()
        )));
    }
    let per_group = match protocol.shots {
        Shots::Single => 1,
        Shots::Multi => protocol.multi_shot.max(1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut per_repeat = Vec::with_capacity(protocol.repeats);
    for _ in 0..protocol.repeats {
        let mut rows = Vec::new();
        for members in groups.values() {
            let take = per_group.min(members.len());
            let mut picked: Vec<usize> = sample(&mut rng, members.len(), take).into_iter().map(|i| members[i]).collect();
            picked.sort_unstable();
            rows.extend(picked);
        }
        per_repeat.push(rank_and_map(query, &pool.select(&rows))?);
    }
    let maps: Vec<f64> = per_repeat.iter().map(|r| r.map).collect();
    let r1: Vec<f64> = per_repeat.iter().map(|r| r.rank[&1]).collect();
    let (map, map_std) = mean_std(&maps);
    let (_, rank1_std) = mean_std(&r1);
    let rank = RANKS
        .iter()
        .map(|&k| (k, per_repeat.iter().map(|r| r.rank[&k]).sum::<f64>() / per_repeat.len() as f64))
        .collect();
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        protocol: *protocol,
        ap_definition: AP_DEFINITION.into(),
        rank,
        map,
        map_std,
        rank1_std,
        per_repeat,
    })
}

/// Query and gallery-pool tables of the test split for `direction`.
pub fn test_tables(
    model: &Model,
    variant: Variant,
    dataset: &Dataset,
    direction: Direction,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let (qm, gm) = match direction {
        Direction::InfraredToVisible => (Modality::Infrared, Modality::Visible),
        Direction::VisibleToInfrared => (Modality::Visible, Modality::Infrared),
    };
    let pick = |m: Modality| -> Vec<usize> {
        dataset
            .split_indices(Split::Test)
            .into_iter()
            .filter(|&i| dataset.images[i].modality == m)
            .collect()
    };
    let (q, g) = (pick(qm), pick(gm));
    if q.is_empty() || g.is_empty() {
        return Err(Error::Protocol("test split lacks one of the modalities".into()));
    }
    Ok((
        extract_embeddings(model, variant, dataset, &q, FeatureKind::Identity)?,
        extract_embeddings(model, variant, dataset, &g, FeatureKind::Identity)?,
    ))
}

pub fn run_protocol(
    model: &Model,
    variant: Variant,
    dataset: &Dataset,
    protocol: &GalleryProtocol,
    config_hash: &str,
) -> Result<MetricsReport> {
    let (q, g) = test_tables(model, variant, dataset, protocol.direction)?;
    run_protocol_on_tables(&q, &g, protocol, config_hash)
}

/// Held-out R² of a ridge regression for each target column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub r2: BTreeMap<String, f64>,
    /// Targets left out because they are constant on the training rows.
    pub skipped: Vec<String>,
}

impl ProbeResult {
    pub fn mean_r2(&self) -> f64 {
        self.r2.values().sum::<f64>() / self.r2.len().max(1) as f64
    }
}

/// Fits `y ~ x` by ridge regression (features standardized on the training
/// rows) and scores R² on the test rows.
pub fn ridge_probe(
    x_train: &Tensor,
    y_train: &[Vec<f64>],
    x_test: &Tensor,
    y_test: &[Vec<f64>],
    names: &[&str],
    alpha: f64,
) -> Result<ProbeResult> {
    let (n, d) = (x_train.shape()[0], x_train.shape()[1]);
    if x_test.shape()[1] != d || y_train.len() != n || y_test.len() != x_test.shape()[0] {
        return Err(Error::Shape("probe inputs disagree in size".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x_train.row(i)[j]).sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = (0..n).map(|i| (x_train.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardize = |t: &Tensor| {
        let m = t.shape()[0];
        DMatrix::from_fn(m, d, |i, j| (t.row(i)[j] - mean[j]) / std[j])
    };
    let xs = standardize(x_train);
    let xt = standardize(x_test);
    let mut gram = xs.transpose() * &xs;
    for j in 0..d {
        gram[(j, j)] += alpha;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Shape("ridge system is not positive definite".into()))?;
    let mut result = ProbeResult {
        r2: BTreeMap::new(),
        skipped: Vec::new(),
    };
    for (c, name) in names.iter().enumerate() {
        let yt: Vec<f64> = y_train.iter().map(|r| r[c]).collect();
        let ym = yt.iter().sum::<f64>() / n as f64;
        if yt.iter().all(|&v| (v - ym).abs() < 1e-12) {
            result.skipped.push(name.to_string());
            continue;
        }
        let yc = DVector::from_iterator(n, yt.iter().map(|v| v - ym));
        let w = chol.solve(&(xs.transpose() * yc));
        let pred = &xt * w;
        let ye: Vec<f64> = y_test.iter().map(|r| r[c]).collect();
        let em = ye.iter().sum::<f64>() / ye.len() as f64;
        let ss_tot: f64 = ye.iter().map(|v| (v - em).powi(2)).sum();
        let ss_res: f64 = ye.iter().zip(pred.iter()).map(|(v, p)| (v - (p + ym)).powi(2)).sum();
        result.r2.insert(name.to_string(), if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 });
    }
    Ok(result)
}

pub const STYLE_TARGETS: [&str; 2] = ["illumination", "contrast"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleProbeReport {
    pub alpha: f64,
    pub identity: ProbeResult,
    pub style: ProbeResult,
}

pub fn style_targets(dataset: &Dataset, records: &[usize]) -> Vec<Vec<f64>> {
    records
        .iter()
        .map(|&i| {
            let s = dataset.images[i].style;
            vec![s.illumination, s.contrast]
        })
        .collect()
}

/// Probes identity and style embeddings of a decoupling variant for the
/// illumination and contrast factors; fitted on train images, scored on test images.
pub fn style_probe(model: &Model, variant: Variant, dataset: &Dataset, alpha: f64) -> Result<StyleProbeReport> {
    let train = dataset.split_indices(Split::Train);
    let test = dataset.split_indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Protocol("style probe needs a test split".into()));
    }
    let (yt, ye) = (style_targets(dataset, &train), style_targets(dataset, &test));
    let probe = |kind| -> Result<ProbeResult> {
        let a = extract_embeddings(model, variant, dataset, &train, kind)?;
        let b = extract_embeddings(model, variant, dataset, &test, kind)?;
        ridge_probe(&a.data, &yt, &b.data, &ye, &STYLE_TARGETS, alpha)
    };
    Ok(StyleProbeReport {
        alpha,
        identity: probe(FeatureKind::Identity)?,
        style: probe(FeatureKind::Style)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(ids: &[usize], cams: &[u8], rows: &[Vec<f64>]) -> EmbeddingTable {
        EmbeddingTable {
            ids: ids.to_vec(),
            modalities: vec![Modality::Visible; ids.len()],
            cameras: cams.to_vec(),
            data: Tensor::from_rows(rows),
        }
    }

    #[test]
    fn single_relevant_first() {
        let q = table(&[0], &[3], &[vec![1.0, 0.0]]);
        let g = table(&[0, 1], &[1, 1], &[vec![0.9, 0.436], vec![0.5, 0.866]]);
        let r = rank_and_map(&q, &g).unwrap();
        assert_eq!(r.rank[&1], 1.0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn precision_at_hit() {
        let q = table(&[0], &[3], &[vec![1.0, 0.0]]);
        let g = table(
            &[1, 0, 0],
            &[1, 1, 1],
            &[vec![1.0, 0.0], vec![0.8, 0.6], vec![0.6, 0.8]],
        );
        let r = rank_and_map(&q, &g).unwrap();
        assert!((r.map - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(r.rank[&1], 0.0);
        assert_eq!(r.rank[&5], 1.0);
    }

    #[test]
    fn same_camera_same_identity_is_dropped() {
        let q = table(&[0], &[1], &[vec![1.0, 0.0]]);
        let g = table(&[0, 1, 0], &[1, 2, 2], &[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.1, 0.9]]);
        let r = rank_and_map(&q, &g).unwrap();
        assert_eq!(r.map, 0.5);
        let (ranking, ap) = brute_force_oracle(&[1.0, 0.0], 0, 1, &g).unwrap();
        assert_eq!(ranking, vec![1, 2]);
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn absent_identity_is_skipped() {
        let q = table(&[0, 5], &[3, 3], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = table(&[0], &[1], &[vec![1.0, 0.0]]);
        let r = rank_and_map(&q, &g).unwrap();
        assert_eq!((r.queries, r.skipped_queries), (1, 1));
        assert!(brute_force_oracle(&[0.0, 1.0], 5, 3, &g).is_none());
    }

    #[test]
    fn ties_follow_gallery_order() {
        let q = table(&[0], &[3], &[vec![1.0, 0.0]]);
        let g = table(&[1, 0], &[1, 1], &[vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(rank_and_map(&q, &g).unwrap().map, 0.5);
    }

    #[test]
    fn self_probe_and_constant_target() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let x = Tensor::from_rows(&rows);
        let y: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0], 3.0]).collect();
        let res = ridge_probe(&x, &y, &x, &y, &["a", "const"], 1e-9).unwrap();
        assert!((res.r2["a"] - 1.0).abs() < 1e-9);
        assert_eq!(res.skipped, vec!["const".to_string()]);
    }

    #[test]
    fn table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = table(&[3, 4], &[1, 6], &[vec![0.5, -0.25], vec![1.0, 2.0]]);
        let p = dir.path().join("emb.tsv");
        t.save(&p).unwrap();
        assert_eq!(EmbeddingTable::load(&p).unwrap(), t);
        fs::remove_file(payload_path(&p)).unwrap();
        assert!(matches!(EmbeddingTable::load(&p), Err(Error::MissingDependency(_))));
    }
}
