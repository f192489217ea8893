//! Synthetic visible/infrared person dataset, PK batch sampling and
//! training-time augmentation.
//!
//! Every identity is a unique combination of six categorical attributes.
//! Images render those attributes as coloured blocks on a stylised figure, so
//! the pixels and the caption of an image describe the same person. Each
//! image then receives a modality transform and a random style perturbation
//! (illumination offset, contrast gain, sensor noise) whose parameters are
//! recorded alongside the pixels.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const NUM_SLOTS: usize = 6;

/// Attribute slots, in the order they are stored on an [`Identity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Gender,
    Age,
    Hair,
    Upper,
    Lower,
    Accessory,
}

impl Slot {
    pub const ALL: [Slot; NUM_SLOTS] = [
        Slot::Gender,
        Slot::Age,
        Slot::Hair,
        Slot::Upper,
        Slot::Lower,
        Slot::Accessory,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Gender => "gender",
            Slot::Age => "age",
            Slot::Hair => "hair",
            Slot::Upper => "upper",
            Slot::Lower => "lower",
            Slot::Accessory => "accessory",
        }
    }

    pub fn from_name(name: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Phrases used when describing each value of this slot.
    pub fn phrases(self) -> &'static [&'static str] {
        match self {
            Slot::Gender => &["man", "woman"],
            Slot::Age => &["young", "middle-aged", "elderly"],
            Slot::Hair => &["dark hair", "blond hair", "gray hair", "red hair"],
            Slot::Upper => &["a gray shirt", "a red shirt", "a green shirt", "a blue shirt"],
            Slot::Lower => &["khaki shorts", "black trousers", "blue jeans", "a white skirt"],
            Slot::Accessory => &["a watch", "a backpack", "a hat", "a handbag"],
        }
    }

    pub fn cardinality(self) -> usize {
        self.phrases().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub fn cameras(self) -> &'static [u8] {
        match self {
            Modality::Visible => &VISIBLE_CAMERAS,
            Modality::Infrared => &INFRARED_CAMERAS,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        })
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(Modality::Visible),
            "infrared" => Ok(Modality::Infrared),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

pub const VISIBLE_CAMERAS: [u8; 4] = [1, 2, 4, 5];
pub const INFRARED_CAMERAS: [u8; 2] = [3, 6];
pub const INDOOR_CAMERAS: [u8; 2] = [1, 2];

pub fn is_indoor(camera: u8) -> bool {
    INDOOR_CAMERAS.contains(&camera)
}

/// A person. `attributes[slot.index()]` indexes into `slot.phrases()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub label: usize,
    pub split: Split,
    pub attributes: [u8; NUM_SLOTS],
}

impl Identity {
    pub fn attribute(&self, slot: Slot) -> u8 {
        self.attributes[slot.index()]
    }

    pub fn phrase(&self, slot: Slot) -> Option<&'static str> {
        slot.phrases().get(self.attribute(slot) as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleFactors {
    pub illumination: f64,
    pub contrast: f64,
    pub noise_seed: u64,
}

/// Per-modality style ranges `(low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleRanges {
    pub illumination: (f64, f64),
    pub contrast: (f64, f64),
}

impl StyleRanges {
    pub fn for_modality(modality: Modality) -> Self {
        match modality {
            Modality::Visible => StyleRanges {
                illumination: (-0.15, 0.15),
                contrast: (0.7, 1.2),
            },
            Modality::Infrared => StyleRanges {
                illumination: (-0.25, 0.05),
                contrast: (0.5, 1.0),
            },
        }
    }
}

pub const NOISE_STD: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub split: Split,
    /// Label of the identity within its split.
    pub identity: usize,
    pub modality: Modality,
    pub camera: u8,
    /// Index of this image among its identity's images of the same modality.
    pub index: usize,
    pub style: StyleFactors,
    /// `[3, H, W]`, row-major, values in `[0, 1]`.
    #[serde(skip)]
    pub pixels: Vec<f32>,
}

impl ImageRecord {
    pub fn file_name(&self) -> String {
        format!(
            "{}_{}_{}_{}.bin",
            self.split, self.identity, self.modality, self.index
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_modality: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train_identities: 32,
            test_identities: 16,
            images_per_modality: 8,
            height: 64,
            width: 32,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_identities < 2 {
            return Err(Error::Config(format!(
                "need at least 2 train identities, got {}",
                self.train_identities
            )));
        }
        if self.test_identities == 1 {
            return Err(Error::Config("a test split needs 0 or at least 2 identities".into()));
        }
        if self.images_per_modality < 2 {
            return Err(Error::Config(format!(
                "need at least 2 images per identity per modality, got {}",
                self.images_per_modality
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        let combos: usize = Slot::ALL.iter().map(|s| s.cardinality()).product();
        if self.train_identities + self.test_identities > combos {
            return Err(Error::Config(format!(
                "at most {combos} distinct identities can be generated"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Train identities (labels `0..train_identities`) then test identities.
    pub identities: Vec<Identity>,
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn identity(&self, split: Split, label: usize) -> &Identity {
        let offset = match split {
            Split::Train => 0,
            Split::Test => self.spec.train_identities,
        };
        &self.identities[offset + label]
    }

    pub fn identity_of(&self, record: &ImageRecord) -> &Identity {
        self.identity(record.split, record.identity)
    }

    pub fn num_identities(&self, split: Split) -> usize {
        match split {
            Split::Train => self.spec.train_identities,
            Split::Test => self.spec.test_identities,
        }
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.images[i].split == split)
            .collect()
    }

    /// `[3, H, W]` pixels of image `i` as `f64`.
    pub fn pixels_f64(&self, i: usize) -> Vec<f64> {
        self.images[i].pixels.iter().map(|&p| p as f64).collect()
    }
}

/// Rec. 601 luma weights used for the infrared collapse.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luminance(c: [f64; 3]) -> f64 {
    LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2]
}

/// Colour with the given red and green whose luminance is exactly `UPPER_LUMA`.
fn isoluminant(r: f64, g: f64) -> [f64; 3] {
    [r, g, (UPPER_LUMA - LUMA[0] * r - LUMA[1] * g) / LUMA[2]]
}

const UPPER_LUMA: f64 = 0.5;

/// Upper-clothing colours share one luminance, so the infrared collapse
/// removes every trace of them.
pub fn upper_palette() -> [[f64; 3]; 4] {
    [
        isoluminant(0.5, 0.5),
        isoluminant(0.85, 0.33),
        isoluminant(0.2, 0.62),
        isoluminant(0.35, 0.48),
    ]
}

const BACKGROUND: [f64; 3] = [0.42, 0.45, 0.4];
const SKIN: [f64; 3] = [0.86, 0.7, 0.6];
const HAIR: [[f64; 3]; 4] = [
    [0.1, 0.08, 0.06],
    [0.92, 0.82, 0.45],
    [0.65, 0.65, 0.65],
    [0.62, 0.22, 0.1],
];
const LOWER: [[f64; 3]; 4] = [
    [0.76, 0.69, 0.5],
    [0.08, 0.08, 0.1],
    [0.25, 0.35, 0.62],
    [0.96, 0.96, 0.96],
];
const ACCESSORY: [[f64; 3]; 4] = [
    [0.12, 0.12, 0.12],
    [0.45, 0.3, 0.15],
    [0.2, 0.2, 0.55],
    [0.75, 0.1, 0.2],
];

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            rgb: vec![BACKGROUND; h * w],
        }
    }

    /// Fills the rectangle given in fractional coordinates.
    fn rect(&mut self, y0: f64, y1: f64, x0: f64, x1: f64, color: [f64; 3]) {
        let to_px = |f: f64, n: usize| ((f * n as f64).round().max(0.0) as usize).min(n);
        let (r0, r1) = (to_px(y0, self.h), to_px(y1, self.h));
        let (c0, c1) = (to_px(x0, self.w), to_px(x1, self.w));
        for y in r0..r1 {
            for x in c0..c1 {
                self.rgb[y * self.w + x] = color;
            }
        }
    }
}

/// Draws the attribute layout of `identity` before any modality or style transform.
fn render_figure(identity: &Identity, h: usize, w: usize) -> Canvas {
    let mut cv = Canvas::new(h, w);
    let woman = identity.attribute(Slot::Gender) == 1;
    let top = [0.06, 0.09, 0.12][identity.attribute(Slot::Age) as usize];
    let hair = HAIR[identity.attribute(Slot::Hair) as usize];
    let upper = upper_palette()[identity.attribute(Slot::Upper) as usize];
    let lower_kind = identity.attribute(Slot::Lower) as usize;
    let lower = LOWER[lower_kind];
    let (tx0, tx1) = if woman { (0.3, 0.7) } else { (0.22, 0.78) };
    let torso_top = top + 0.16;
    let waist = 0.56;

    // head and hair
    cv.rect(top, top + 0.14, 0.38, 0.62, SKIN);
    cv.rect(top, top + 0.045, 0.36, 0.64, hair);
    if woman {
        cv.rect(top, top + 0.22, 0.33, 0.39, hair);
        cv.rect(top, top + 0.22, 0.61, 0.67, hair);
    }
    // torso and sleeves
    cv.rect(torso_top, waist, tx0, tx1, upper);
    cv.rect(torso_top, waist - 0.02, tx0 - 0.1, tx0, upper);
    cv.rect(torso_top, waist - 0.02, tx1, tx1 + 0.1, upper);
    cv.rect(waist - 0.02, waist + 0.03, tx0 - 0.1, tx0, SKIN);
    cv.rect(waist - 0.02, waist + 0.03, tx1, tx1 + 0.1, SKIN);
    // legs
    let legs = [(0.32, 0.47), (0.53, 0.68)];
    match lower_kind {
        0 => {
            for (a, b) in legs {
                cv.rect(waist, 0.72, a, b, lower);
                cv.rect(0.72, 0.95, a, b, SKIN);
            }
        }
        3 => {
            cv.rect(waist, 0.76, 0.26, 0.74, lower);
            for (a, b) in legs {
                cv.rect(0.76, 0.95, a, b, SKIN);
            }
        }
        _ => {
            for (a, b) in legs {
                cv.rect(waist, 0.95, a, b, lower);
            }
        }
    }
    // accessory
    let acc = ACCESSORY[identity.attribute(Slot::Accessory) as usize];
    match identity.attribute(Slot::Accessory) {
        0 => cv.rect(waist - 0.05, waist - 0.01, tx0 - 0.1, tx0, acc),
        1 => cv.rect(torso_top + 0.04, waist - 0.06, tx1 + 0.02, (tx1 + 0.16).min(0.98), acc),
        2 => cv.rect((top - 0.05).max(0.0), top + 0.015, 0.3, 0.7, acc),
        _ => cv.rect(waist - 0.08, waist + 0.07, 0.04, tx0 - 0.1, acc),
    }
    cv
}

/// Affine response of the infrared sensor to luminance.
fn infrared_response(lum: f64) -> f64 {
    0.2 + 0.7 * lum
}

/// Renders one image of `identity` in `modality` under `style`.
pub fn render_image(
    identity: &Identity,
    modality: Modality,
    style: &StyleFactors,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let cv = render_figure(identity, h, w);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(style.noise_seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let perturb = |v: f64, n: f64| {
        (style.contrast * (v - 0.5) + 0.5 + style.illumination + n).clamp(0.0, 1.0) as f32
    };
    let hw = h * w;
    let mut out = vec![0.0f32; 3 * hw];
    match modality {
        Modality::Visible => {
            for c in 0..3 {
                for p in 0..hw {
                    out[c * hw + p] = perturb(cv.rgb[p][c], noise.sample(&mut noise_rng));
                }
            }
        }
        Modality::Infrared => {
            for p in 0..hw {
                let v = perturb(
                    infrared_response(luminance(cv.rgb[p])),
                    noise.sample(&mut noise_rng),
                );
                for c in 0..3 {
                    out[c * hw + p] = v;
                }
            }
        }
    }
    out
}

fn draw_style(modality: Modality, rng: &mut ChaCha8Rng) -> StyleFactors {
    let r = StyleRanges::for_modality(modality);
    StyleFactors {
        illumination: rng.random_range(r.illumination.0..r.illumination.1),
        contrast: rng.random_range(r.contrast.0..r.contrast.1),
        noise_seed: rng.random(),
    }
}

fn decode_attributes(mut code: usize) -> [u8; NUM_SLOTS] {
    let mut attrs = [0u8; NUM_SLOTS];
    for slot in Slot::ALL {
        let card = slot.cardinality();
        attrs[slot.index()] = (code % card) as u8;
        code /= card;
    }
    attrs
}

/// Generates the dataset described by `spec`. Pure in `spec`.
pub fn generate_synthetic_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let combos: usize = Slot::ALL.iter().map(|s| s.cardinality()).product();
    let total = spec.train_identities + spec.test_identities;
    let codes = sample(&mut rng, combos, total).into_vec();
    let identities: Vec<Identity> = codes
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let (split, label) = if i < spec.train_identities {
                (Split::Train, i)
            } else {
                (Split::Test, i - spec.train_identities)
            };
            Identity {
                label,
                split,
                attributes: decode_attributes(code),
            }
        })
        .collect();

    let mut images = Vec::with_capacity(total * 2 * spec.images_per_modality);
    for identity in &identities {
        for modality in [Modality::Visible, Modality::Infrared] {
            let cams = modality.cameras();
            for index in 0..spec.images_per_modality {
                let style = draw_style(modality, &mut rng);
                let pixels = render_image(identity, modality, &style, spec.height, spec.width);
                images.push(ImageRecord {
                    split: identity.split,
                    identity: identity.label,
                    modality,
                    camera: cams[index % cams.len()],
                    index,
                    style,
                    pixels,
                });
            }
        }
    }
    Ok(Dataset {
        spec: *spec,
        identities,
        images,
    })
}

/// A PK batch: `p` identities, `k` images per identity per modality. `items`
/// holds image indices ordered `[visible block, infrared block]`, each block
/// grouped by identity in the same identity order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub p: usize,
    pub k: usize,
    pub items: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Samples `p` train identities and `k` images of each per modality, without
/// replacement within the batch.
pub fn pk_sample<R: Rng + ?Sized>(dataset: &Dataset, p: usize, k: usize, rng: &mut R) -> Result<Batch> {
    if p == 0 || k == 0 {
        return Err(Error::Sampling(format!("P and K must be positive (P={p}, K={k})")));
    }
    let n_ids = dataset.spec.train_identities;
    if n_ids < p {
        return Err(Error::Sampling(format!(
            "batch needs {p} train identities but the dataset has {n_ids}"
        )));
    }
    // per identity, per modality image indices
    let mut pools: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; n_ids];
    for (i, rec) in dataset.images.iter().enumerate() {
        if rec.split == Split::Train {
            let m = match rec.modality {
                Modality::Visible => 0,
                Modality::Infrared => 1,
            };
            pools[rec.identity][m].push(i);
        }
    }
    let eligible: Vec<usize> = (0..n_ids)
        .filter(|&id| pools[id][0].len() >= k && pools[id][1].len() >= k)
        .collect();
    if eligible.len() < p {
        return Err(Error::Sampling(format!(
            "batch needs {p} identities with at least {k} images per modality, only {} qualify",
            eligible.len()
        )));
    }
    let chosen: Vec<usize> = sample(rng, eligible.len(), p)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut items = Vec::with_capacity(2 * p * k);
    for m in 0..2 {
        for &id in &chosen {
            let pool = &pools[id][m];
            items.extend(sample(rng, pool.len(), k).into_iter().map(|i| pool[i]));
        }
    }
    Ok(Batch { p, k, items })
}

/// Training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Zero padding (pixels) before a random crop back to the original size.
    pub pad: usize,
    pub flip_prob: f64,
    /// Probability of replacing all channels of a visible image with one random channel.
    pub channel_exchange_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            pad: 4,
            flip_prob: 0.5,
            channel_exchange_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Applies the augmentation stack to one `[3, h, w]` image.
pub fn augment<R: Rng + ?Sized>(
    pixels: &[f64],
    h: usize,
    w: usize,
    modality: Modality,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<f64> {
    if !cfg.enabled {
        return pixels.to_vec();
    }
    let hw = h * w;
    let mut src = pixels.to_vec();
    if modality == Modality::Visible && rng.random_bool(cfg.channel_exchange_prob) {
        let c = rng.random_range(0..3);
        let chan = src[c * hw..(c + 1) * hw].to_vec();
        for k in 0..3 {
            src[k * hw..(k + 1) * hw].copy_from_slice(&chan);
        }
    }
    let flip = rng.random_bool(cfg.flip_prob);
    let pad = cfg.pad as i64;
    let (dy, dx) = if pad > 0 {
        (rng.random_range(-pad..=pad) as isize, rng.random_range(-pad..=pad) as isize)
    } else {
        (0, 0)
    };
    let mut out = vec![0.0; 3 * hw];
    for c in 0..3 {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                out[c * hw + y * w + x] = src[c * hw + sy as usize * w + sx];
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: DatasetSpec,
    identities: Vec<Identity>,
    images: Vec<ImageMeta>,
}

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    #[serde(flatten)]
    record: ImageRecord,
    file: String,
}

/// Writes `meta.json` and one `<split>_<id>_<modality>_<idx>.bin` per image.
/// Each `.bin` holds a `C, H, W` header of little-endian `u32`s followed by
/// little-endian `f32` pixels.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (h, w) = (dataset.spec.height, dataset.spec.width);
    let mut metas = Vec::with_capacity(dataset.images.len());
    for rec in &dataset.images {
        let file = rec.file_name();
        let mut bytes = Vec::with_capacity(12 + rec.pixels.len() * 4);
        for dim in [3u32, h as u32, w as u32] {
            bytes.extend_from_slice(&dim.to_le_bytes());
        }
        for p in &rec.pixels {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        metas.push(ImageMeta {
            record: rec.clone(),
            file,
        });
    }
    let meta = Meta {
        spec: dataset.spec,
        identities: dataset.identities.clone(),
        images: metas,
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(io_err(&path))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingDependency(meta_path));
    }
    let meta: Meta =
        serde_json::from_slice(&fs::read(&meta_path).map_err(io_err(&meta_path))?)?;
    let (h, w) = (meta.spec.height, meta.spec.width);
    let mut images = Vec::with_capacity(meta.images.len());
    for m in meta.images {
        let path = dir.join(&m.file);
        if !path.exists() {
            return Err(Error::MissingDependency(path));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() < 12 {
            return Err(Error::Shape(format!("{} is truncated", path.display())));
        }
        let dims: Vec<usize> = bytes[..12]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if dims != [3, h, w] || bytes.len() != 12 + 4 * 3 * h * w {
            return Err(Error::Shape(format!(
                "{} has header {dims:?}, expected [3, {h}, {w}]",
                path.display()
            )));
        }
        let pixels = bytes[12..]
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut record = m.record;
        record.pixels = pixels;
        images.push(record);
    }
    Ok(Dataset {
        spec: meta.spec,
        identities: meta.identities,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            train_identities: 8,
            test_identities: 0,
            images_per_modality: 4,
            height: 64,
            width: 32,
            seed: 7,
        }
    }

    #[test]
    fn counts_match_spec() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        assert_eq!(ds.images.len(), 64);
        let vis = ds.images.iter().filter(|r| r.modality == Modality::Visible).count();
        assert_eq!(vis, 32);
        assert_eq!(ds.images.len() - vis, 32);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_dataset(&small_spec()).unwrap();
        let b = generate_synthetic_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let pa: Vec<u32> = a.images.iter().flat_map(|r| r.pixels.iter().map(|p| p.to_bits())).collect();
        let pb: Vec<u32> = b.images.iter().flat_map(|r| r.pixels.iter().map(|p| p.to_bits())).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            DatasetSpec { train_identities: 1, ..small_spec() },
            DatasetSpec { images_per_modality: 1, ..small_spec() },
            DatasetSpec { height: 8, ..small_spec() },
            DatasetSpec { width: 15, ..small_spec() },
        ] {
            assert!(matches!(generate_synthetic_dataset(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn labels_contiguous_and_attributes_unique() {
        let ds = generate_synthetic_dataset(&DatasetSpec::default()).unwrap();
        for split in [Split::Train, Split::Test] {
            let labels: Vec<usize> = ds
                .identities
                .iter()
                .filter(|i| i.split == split)
                .map(|i| i.label)
                .collect();
            assert_eq!(labels, (0..ds.num_identities(split)).collect::<Vec<_>>());
        }
        let attrs: HashSet<[u8; NUM_SLOTS]> = ds.identities.iter().map(|i| i.attributes).collect();
        assert_eq!(attrs.len(), ds.identities.len());
    }

    #[test]
    fn cameras_follow_modality_layout() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        for r in &ds.images {
            assert!(r.modality.cameras().contains(&r.camera));
        }
    }

    #[test]
    fn infrared_has_no_chroma_and_styles_differ() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        let hw = 64 * 32;
        for r in ds.images.iter().filter(|r| r.modality == Modality::Infrared) {
            for p in 0..hw {
                let (a, b, c) = (r.pixels[p], r.pixels[hw + p], r.pixels[2 * hw + p]);
                assert!(a == b && b == c);
            }
        }
        for r in &ds.images {
            let range = StyleRanges::for_modality(r.modality);
            assert!((range.illumination.0..range.illumination.1).contains(&r.style.illumination));
            assert!((range.contrast.0..range.contrast.1).contains(&r.style.contrast));
        }
        let styles: HashSet<u64> = ds.images.iter().map(|r| r.style.illumination.to_bits()).collect();
        assert_eq!(styles.len(), ds.images.len());
    }

    #[test]
    fn upper_palette_is_isoluminant() {
        for c in upper_palette() {
            assert!((luminance(c) - UPPER_LUMA).abs() < 1e-12);
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn infrared_pixels_ignore_upper_colour() {
        let style = StyleFactors {
            illumination: 0.01,
            contrast: 0.9,
            noise_seed: 3,
        };
        let mut id = Identity {
            label: 0,
            split: Split::Train,
            attributes: [0, 1, 2, 0, 1, 3],
        };
        let base = render_image(&id, Modality::Infrared, &style, 64, 32);
        let base_vis = render_image(&id, Modality::Visible, &style, 64, 32);
        for u in 1..4 {
            id.attributes[Slot::Upper.index()] = u;
            let ir = render_image(&id, Modality::Infrared, &style, 64, 32);
            let diff = base.iter().zip(&ir).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(diff < 1e-6, "upper colour {u} leaks into infrared ({diff})");
            assert_ne!(render_image(&id, Modality::Visible, &style, 64, 32), base_vis);
        }
    }

    #[test]
    fn pk_batch_structure() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = pk_sample(&ds, 8, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 64);
        let mut counts: HashMap<(usize, Modality), usize> = HashMap::new();
        for (pos, &i) in b.items.iter().enumerate() {
            let r = &ds.images[i];
            let expected = if pos < 32 { Modality::Visible } else { Modality::Infrared };
            assert_eq!(r.modality, expected);
            *counts.entry((r.identity, r.modality)).or_default() += 1;
        }
        assert!(counts.values().all(|&c| c == 4));
        assert_eq!(counts.len(), 16);
        let unique: HashSet<usize> = b.items.iter().copied().collect();
        assert_eq!(unique.len(), 64);
    }

    #[test]
    fn minimal_batch_pairs_one_identity() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = pk_sample(&ds, 1, 1, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        let (a, c) = (&ds.images[b.items[0]], &ds.images[b.items[1]]);
        assert_eq!(a.identity, c.identity);
        assert_eq!(a.modality, Modality::Visible);
        assert_eq!(c.modality, Modality::Infrared);
    }

    #[test]
    fn sampling_shortfall_is_reported() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        match pk_sample(&ds, 9, 1, &mut rng) {
            Err(Error::Sampling(msg)) => assert!(msg.contains('9') && msg.contains('8')),
            other => panic!("expected sampling error, got {other:?}"),
        }
        assert!(matches!(pk_sample(&ds, 2, 5, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        let a = pk_sample(&ds, 3, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = pk_sample(&ds, 3, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_frequencies_are_uniform() {
        // P=2 of 8 identities: each appears with probability 1/4 per batch.
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = [0usize; 8];
        let n = 10_000;
        for _ in 0..n {
            let b = pk_sample(&ds, 2, 1, &mut rng).unwrap();
            hits[ds.images[b.items[0]].identity] += 1;
            hits[ds.images[b.items[1]].identity] += 1;
        }
        for h in hits {
            let f = h as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.03, "frequency {f}");
        }
    }

    #[test]
    fn augmentation_respects_modality_and_switch() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        let ir = ds.images.iter().position(|r| r.modality == Modality::Infrared).unwrap();
        let px = ds.pixels_f64(ir);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hw = 64 * 32;
        for _ in 0..20 {
            let out = augment(&px, 64, 32, Modality::Infrared, &cfg, &mut rng);
            assert_eq!(out.len(), px.len());
            for p in 0..hw {
                assert_eq!(out[p], out[hw + p]);
            }
        }
        let same = augment(&px, 64, 32, Modality::Infrared, &AugmentConfig::disabled(), &mut rng);
        assert_eq!(same, px);
    }

    #[test]
    fn flip_only_mirrors_columns() {
        let cfg = AugmentConfig {
            enabled: true,
            pad: 0,
            flip_prob: 1.0,
            channel_exchange_prob: 0.0,
        };
        let px: Vec<f64> = (0..3 * 2 * 3).map(|v| v as f64).collect();
        let out = augment(&px, 2, 3, Modality::Visible, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(&out[..3], &[2.0, 1.0, 0.0]);
    }

    #[test]
    fn persistence_round_trip() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert!(dir.path().join("train_3_infrared_2.bin").exists());
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn missing_meta_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingDependency(_))));
    }
}
