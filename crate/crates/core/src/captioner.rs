//! Diverse-template caption generation and tokenization.
//!
//! A fixed bank of ten sentence skeletons describes the same six attribute
//! slots in different orders and phrasings. Each image independently draws a
//! skeleton uniformly at random; the slots are then filled from the
//! identity's attributes. Content stays fixed per identity while sentence
//! structure varies per image.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, Identity, ImageRecord, Modality, Slot, Split};
use crate::error::{io_err, Error, Result};

pub const BANK_SIZE: usize = 10;
pub const DEFAULT_CONTEXT_LENGTH: usize = 77;
/// Bump when the template bank or vocabulary changes.
pub const BANK_VERSION: u32 = 1;

const SKELETONS: [&str; BANK_SIZE] = [
    "A {age} {gender} with {hair} is outfitted in {upper} and {lower}, accompanied by {accessory}.",
    "This {gender} is {age}, has {hair}, and wears {upper} with {lower}, carrying {accessory}.",
    "Wearing {upper} and {lower}, the {age} {gender} with {hair} also has {accessory}.",
    "The pedestrian is a {age} {gender} who has {hair} and carries {accessory} while dressed in {upper} and {lower}.",
    "With {hair} and {accessory}, this {age} {gender} is dressed in {upper} and {lower}.",
    "Dressed in {lower} and {upper}, a {gender} with {hair} walks by, {age} and carrying {accessory}.",
    "One can see {accessory} on the {age} {gender}, who wears {upper} and {lower} and has {hair}.",
    "The person has {hair}, appears {age}, is a {gender}, and wears {upper} over {lower} with {accessory}.",
    "In {upper} and {lower}, a {age} {gender} with {hair} is seen with {accessory}.",
    "Notable features: {hair}, {upper}, {lower}, {accessory}; the person is a {age} {gender}.",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionTemplate {
    pub template_id: usize,
    pub skeleton: String,
    /// Slots in the order they appear in the skeleton.
    pub slot_order: Vec<Slot>,
}

impl CaptionTemplate {
    pub fn new(template_id: usize, skeleton: &str) -> Result<Self> {
        let mut slot_order = Vec::new();
        let mut rest = skeleton;
        while let Some(open) = rest.find('{') {
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Config(format!("unclosed slot in {skeleton:?}")))?;
            let name = &rest[open + 1..open + close];
            let slot = Slot::from_name(name)
                .ok_or_else(|| Error::Config(format!("unknown slot {{{name}}} in {skeleton:?}")))?;
            slot_order.push(slot);
            rest = &rest[open + close + 1..];
        }
        Ok(Self {
            template_id,
            skeleton: skeleton.to_string(),
            slot_order,
        })
    }
}

/// The shipped bank of ten templates.
pub fn template_bank() -> Vec<CaptionTemplate> {
    SKELETONS
        .iter()
        .enumerate()
        .map(|(i, s)| CaptionTemplate::new(i, s).expect("shipped templates are well formed"))
        .collect()
}

/// Uniform draw from `bank`.
pub fn select_template<'a, R: Rng + ?Sized>(bank: &'a [CaptionTemplate], rng: &mut R) -> &'a CaptionTemplate {
    &bank[rng.random_range(0..bank.len())]
}

fn starts_with_vowel(s: &str) -> bool {
    s.chars()
        .next()
        .is_some_and(|c| matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u'))
}

/// Fills every slot of `template` with the identity's attribute phrase.
pub fn render_caption(identity: &Identity, template: &CaptionTemplate) -> Result<String> {
    let mut out = String::with_capacity(template.skeleton.len() + 64);
    let mut rest = template.skeleton.as_str();
    for &slot in &template.slot_order {
        let open = rest.find('{').expect("slot_order matches skeleton");
        let close = open + rest[open..].find('}').expect("closed slot");
        let phrase = identity.phrase(slot).ok_or_else(|| {
            Error::Render(format!(
                "identity {} has no value for slot {}",
                identity.label,
                slot.name()
            ))
        })?;
        out.push_str(&rest[..open]);
        // indefinite article agreement for a slot directly after "a "
        if starts_with_vowel(phrase) {
            if out.ends_with(" a ") || out == "a " {
                out.truncate(out.len() - 2);
                out.push_str("an ");
            } else if out.ends_with(" A ") || out == "A " {
                out.truncate(out.len() - 2);
                out.push_str("An ");
            }
        }
        out.push_str(phrase);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub const PAD: u32 = 0;
pub const BEGIN: u32 = 1;
pub const END: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<begin>", "<end>"];
const PUNCT: [char; 4] = [',', '.', ':', ';'];

fn split_words(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut end = chunk.len();
        let mut trailing = Vec::new();
        while end > 0 && chunk[..end].ends_with(PUNCT) {
            trailing.push(&chunk[end - 1..end]);
            end -= 1;
        }
        if end > 0 {
            words.push(&chunk[..end]);
        }
        words.extend(trailing.into_iter().rev());
    }
    words
}

/// Closed word-level vocabulary covering every renderable caption.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    fn build() -> Self {
        let mut set = BTreeSet::new();
        for sk in SKELETONS {
            let mut stripped = String::new();
            let mut depth = false;
            for c in sk.chars() {
                match c {
                    '{' => depth = true,
                    '}' => {
                        depth = false;
                        stripped.push(' ');
                    }
                    _ if !depth => stripped.push(c),
                    _ => {}
                }
            }
            set.extend(split_words(&stripped).into_iter().map(str::to_string));
        }
        for slot in Slot::ALL {
            for p in slot.phrases() {
                set.extend(split_words(p).into_iter().map(str::to_string));
            }
        }
        set.extend(["a", "an", "A", "An"].map(String::from));
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(set);
        Self { words }
    }

    /// The process-wide caption vocabulary.
    pub fn global() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Vocabulary::build)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        // specials sort before every word, words are sorted after them
        self.words[SPECIALS.len()..]
            .binary_search_by(|w| w.as_str().cmp(word))
            .ok()
            .map(|i| (i + SPECIALS.len()) as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

/// `[BEGIN, words..., END, PAD...]` of exactly `context_length` ids. Long
/// inputs are truncated so that the final id is always `END`.
pub fn tokenize(text: &str, context_length: usize) -> Result<Vec<u32>> {
    if context_length < 8 {
        return Err(Error::Config(format!(
            "context length must be at least 8, got {context_length}"
        )));
    }
    let vocab = Vocabulary::global();
    let mut ids = Vec::with_capacity(context_length);
    ids.push(BEGIN);
    for w in split_words(text) {
        ids.push(vocab.id(w).ok_or_else(|| Error::Tokenize(w.to_string()))?);
    }
    ids.truncate(context_length - 1);
    ids.push(END);
    ids.resize(context_length, PAD);
    Ok(ids)
}

/// Position of the `END` id.
pub fn end_position(tokens: &[u32]) -> Option<usize> {
    tokens.iter().position(|&t| t == END)
}

/// Inverse of [`tokenize`] up to the `END` marker.
pub fn detokenize(tokens: &[u32]) -> String {
    let vocab = Vocabulary::global();
    let mut out = String::new();
    for &t in tokens.iter().skip_while(|&&t| t == BEGIN) {
        if t == END || t == PAD {
            break;
        }
        let w = vocab.word(t).unwrap_or("?");
        let is_punct = w.len() == 1 && w.ends_with(PUNCT);
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub text: String,
    pub template_id: usize,
    pub tokens: Vec<u32>,
    /// Index of the described image in its dataset.
    pub image: usize,
}

/// What a caption backend is asked to describe.
pub struct CaptionRequest<'a> {
    pub image_path: Option<&'a Path>,
    pub record: &'a ImageRecord,
    pub identity: &'a Identity,
    pub template: &'a CaptionTemplate,
}

impl CaptionRequest<'_> {
    /// Instruction text handed to an instruction-following backend.
    pub fn instruction(&self) -> String {
        format!(
            "Describe the pedestrian in the image following this sentence template: {}",
            self.template.skeleton
        )
    }
}

/// A source of image descriptions.
pub trait CaptionClient {
    fn caption(&self, request: &CaptionRequest<'_>) -> Result<String>;
}

/// Default backend: renders the template from the identity's ground-truth attributes.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateRenderer;

impl CaptionClient for TemplateRenderer {
    fn caption(&self, request: &CaptionRequest<'_>) -> Result<String> {
        render_caption(request.identity, request.template)
    }
}

/// Runs an external program as `<program> <args...> <image path> <instruction>`
/// and reads the description from its standard output.
#[derive(Debug, Clone)]
pub struct CommandClient {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl CaptionClient for CommandClient {
    fn caption(&self, request: &CaptionRequest<'_>) -> Result<String> {
        let path = request
            .image_path
            .ok_or_else(|| Error::CaptionSource("external backend needs an image path".into()))?;
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(path)
            .arg(request.instruction())
            .output()
            .map_err(|e| Error::CaptionSource(format!("{}: {e}", self.program.display())))?;
        if !output.status.success() {
            return Err(Error::CaptionSource(format!(
                "{} exited with {}",
                self.program.display(),
                output.status
            )));
        }
        Ok(String::from_utf8_lossy(&output.stdout).trim().to_string())
    }
}

/// Asks `client` for a caption and enforces the non-empty contract.
pub fn checked_caption(client: &dyn CaptionClient, request: &CaptionRequest<'_>) -> Result<String> {
    let text = client.caption(request)?;
    if text.trim().is_empty() {
        return Err(Error::CaptionSource("backend returned an empty description".into()));
    }
    Ok(text)
}

/// Captions and tokenizes with `client`, falling back to the deterministic
/// renderer on any backend or tokenization failure. The flag reports a fallback.
pub fn caption_with_fallback(
    client: &dyn CaptionClient,
    request: &CaptionRequest<'_>,
    context_length: usize,
) -> Result<(String, Vec<u32>, bool)> {
    let attempt = checked_caption(client, request)
        .and_then(|t| tokenize(&t, context_length).map(|tok| (t, tok)));
    match attempt {
        Ok((text, tokens)) => Ok((text, tokens, false)),
        Err(_) => {
            let text = render_caption(request.identity, request.template)?;
            let tokens = tokenize(&text, context_length)?;
            Ok((text, tokens, true))
        }
    }
}

/// A caption for every image of `dataset`, in image order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionCorpus {
    pub records: Vec<CaptionRecord>,
    pub context_length: usize,
    /// Images whose captions came from the fallback renderer.
    pub fallbacks: usize,
}

/// Draws a template per image and captions it with `client`.
pub fn build_corpus<R: Rng + ?Sized>(
    dataset: &Dataset,
    client: &dyn CaptionClient,
    image_dir: Option<&Path>,
    context_length: usize,
    rng: &mut R,
) -> Result<CaptionCorpus> {
    let bank = template_bank();
    let mut records = Vec::with_capacity(dataset.images.len());
    let mut fallbacks = 0;
    for (i, rec) in dataset.images.iter().enumerate() {
        let template = select_template(&bank, rng);
        let path = image_dir.map(|d| d.join(rec.file_name()));
        let request = CaptionRequest {
            image_path: path.as_deref(),
            record: rec,
            identity: dataset.identity_of(rec),
            template,
        };
        let (text, tokens, fell_back) = caption_with_fallback(client, &request, context_length)?;
        fallbacks += usize::from(fell_back);
        records.push(CaptionRecord {
            text,
            template_id: template.template_id,
            tokens,
            image: i,
        });
    }
    Ok(CaptionCorpus {
        records,
        context_length,
        fallbacks,
    })
}

/// Writes `<split>\t<identity>\t<modality>\t<image_idx>\t<template_id>\t<text>` lines.
pub fn save_corpus(corpus: &CaptionCorpus, dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for c in &corpus.records {
        let r = &dataset.images[c.image];
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.split, r.identity, r.modality, r.index, c.template_id, c.text
        )
        .expect("write to string");
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_corpus(path: &Path, dataset: &Dataset, context_length: usize) -> Result<CaptionCorpus> {
    if !path.exists() {
        return Err(Error::MissingDependency(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut by_image: Vec<Option<CaptionRecord>> = vec![None; dataset.images.len()];
    let lookup = |split: Split, id: usize, m: Modality, idx: usize| {
        dataset
            .images
            .iter()
            .position(|r| r.split == split && r.identity == id && r.modality == m && r.index == idx)
    };
    for (n, line) in text.lines().enumerate() {
        let bad = || Error::Config(format!("{}:{}: malformed caption record", path.display(), n + 1));
        let f: Vec<&str> = line.splitn(6, '\t').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let split: Split = f[0].parse()?;
        let id: usize = f[1].parse().map_err(|_| bad())?;
        let modality: Modality = f[2].parse()?;
        let idx: usize = f[3].parse().map_err(|_| bad())?;
        let template_id: usize = f[4].parse().map_err(|_| bad())?;
        let image = lookup(split, id, modality, idx).ok_or_else(bad)?;
        by_image[image] = Some(CaptionRecord {
            text: f[5].to_string(),
            template_id,
            tokens: tokenize(f[5], context_length)?,
            image,
        });
    }
    let records = by_image
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.ok_or_else(|| Error::Config(format!("no caption for image {}", dataset.images[i].file_name())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaptionCorpus {
        records,
        context_length,
        fallbacks: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic_dataset, DatasetSpec, StyleFactors};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn paper_identity() -> Identity {
        // young man, dark hair, gray shirt, khaki shorts, watch
        Identity {
            label: 0,
            split: Split::Train,
            attributes: [0, 0, 0, 0, 0, 0],
        }
    }

    fn any_record() -> ImageRecord {
        ImageRecord {
            split: Split::Train,
            identity: 0,
            modality: Modality::Visible,
            camera: 1,
            index: 0,
            style: StyleFactors {
                illumination: 0.0,
                contrast: 1.0,
                noise_seed: 0,
            },
            pixels: Vec::new(),
        }
    }

    #[test]
    fn bank_invariants() {
        let bank = template_bank();
        assert_eq!(bank.len(), 10);
        let skeletons: HashSet<&str> = bank.iter().map(|t| t.skeleton.as_str()).collect();
        assert_eq!(skeletons.len(), 10);
        let mut union = HashSet::new();
        for t in &bank {
            let distinct: HashSet<Slot> = t.slot_order.iter().copied().collect();
            assert!(distinct.len() >= 3);
            union.extend(distinct);
        }
        assert_eq!(union.len(), 6);
    }

    #[test]
    fn reproduces_reference_sentence() {
        let text = render_caption(&paper_identity(), &template_bank()[0]).unwrap();
        assert_eq!(
            text,
            "A young man with dark hair is outfitted in a gray shirt and khaki shorts, accompanied by a watch."
        );
    }

    #[test]
    fn article_agreement() {
        let mut id = paper_identity();
        id.attributes[Slot::Age.index()] = 2;
        let text = render_caption(&id, &template_bank()[0]).unwrap();
        assert!(text.starts_with("An elderly man"), "{text}");
    }

    #[test]
    fn templates_vary_structure_not_content() {
        let id = Identity {
            label: 3,
            split: Split::Train,
            attributes: [1, 1, 2, 3, 2, 1],
        };
        let texts: Vec<String> = template_bank()
            .iter()
            .map(|t| render_caption(&id, t).unwrap())
            .collect();
        let unique: HashSet<&String> = texts.iter().collect();
        assert_eq!(unique.len(), 10);
        for slot in Slot::ALL {
            let phrase = id.phrase(slot).unwrap();
            assert!(texts.iter().all(|t| t.contains(phrase)), "{phrase}");
        }
        assert_eq!(texts[4], render_caption(&id, &template_bank()[4]).unwrap());
    }

    #[test]
    fn missing_attribute_is_a_render_error() {
        let mut id = paper_identity();
        id.attributes[Slot::Hair.index()] = 9;
        assert!(matches!(
            render_caption(&id, &template_bank()[0]),
            Err(Error::Render(_))
        ));
    }

    #[test]
    fn selection_is_deterministic_and_degenerate_bank_works() {
        let bank = template_bank();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| select_template(&bank, &mut rng).template_id).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        let single = vec![bank[7].clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..50).all(|_| select_template(&single, &mut rng).template_id == 7));
    }

    #[test]
    fn selection_frequencies_within_binomial_bound() {
        let bank = template_bank();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[select_template(&bank, &mut rng).template_id] += 1;
        }
        assert!(counts.iter().all(|&c| (900..=1100).contains(&c)), "{counts:?}");
    }

    #[test]
    fn tokenize_contracts() {
        let empty = tokenize("", 77).unwrap();
        assert_eq!(&empty[..3], &[BEGIN, END, PAD]);
        assert_eq!(empty.len(), 77);

        let text = render_caption(&paper_identity(), &template_bank()[0]).unwrap();
        let toks = tokenize(&text, 77).unwrap();
        assert_eq!(toks.len(), 77);
        assert_eq!(detokenize(&toks), text);

        let short = tokenize(&text, 8).unwrap();
        assert_eq!(short.len(), 8);
        assert_eq!(short[0], BEGIN);
        assert_eq!(short[7], END);

        assert!(matches!(tokenize("A purple elephant", 77), Err(Error::Tokenize(w)) if w == "purple"));
        assert!(matches!(tokenize("a", 7), Err(Error::Config(_))));
    }

    #[test]
    fn tokenization_injective_over_corpus() {
        let ds = generate_synthetic_dataset(&DatasetSpec::default()).unwrap();
        let mut seen = std::collections::HashMap::new();
        for id in &ds.identities {
            for t in template_bank() {
                let text = render_caption(id, &t).unwrap();
                let toks = tokenize(&text, 77).unwrap();
                assert_eq!(detokenize(&toks), text);
                if let Some(prev) = seen.insert(toks, text.clone()) {
                    assert_eq!(prev, text);
                }
            }
        }
    }

    struct Failing;
    impl CaptionClient for Failing {
        fn caption(&self, _: &CaptionRequest<'_>) -> Result<String> {
            Err(Error::CaptionSource("backend offline".into()))
        }
    }

    struct Empty;
    impl CaptionClient for Empty {
        fn caption(&self, _: &CaptionRequest<'_>) -> Result<String> {
            Ok("   ".into())
        }
    }

    #[test]
    fn client_contracts() {
        let id = paper_identity();
        let rec = any_record();
        let bank = template_bank();
        let req = CaptionRequest {
            image_path: None,
            record: &rec,
            identity: &id,
            template: &bank[3],
        };
        assert_eq!(
            checked_caption(&TemplateRenderer, &req).unwrap(),
            render_caption(&id, &bank[3]).unwrap()
        );
        assert!(matches!(checked_caption(&Empty, &req), Err(Error::CaptionSource(_))));
        let (text, _, fell_back) = caption_with_fallback(&Failing, &req, 77).unwrap();
        assert!(fell_back);
        assert_eq!(text, render_caption(&id, &bank[3]).unwrap());
        assert!(req.instruction().contains(&bank[3].skeleton));
    }

    #[test]
    fn command_client_without_path_fails() {
        let id = paper_identity();
        let rec = any_record();
        let bank = template_bank();
        let req = CaptionRequest {
            image_path: None,
            record: &rec,
            identity: &id,
            template: &bank[0],
        };
        let client = CommandClient {
            program: "echo".into(),
            args: vec![],
        };
        assert!(matches!(client.caption(&req), Err(Error::CaptionSource(_))));
    }

    #[test]
    fn corpus_round_trip() {
        let spec = DatasetSpec {
            train_identities: 3,
            test_identities: 2,
            images_per_modality: 2,
            ..DatasetSpec::default()
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let corpus = build_corpus(&ds, &TemplateRenderer, None, 77, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(corpus.records.len(), ds.images.len());
        assert_eq!(corpus.fallbacks, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.tsv");
        save_corpus(&corpus, &ds, &path).unwrap();
        let back = load_corpus(&path, &ds, 77).unwrap();
        assert_eq!(back.records, corpus.records);
    }
}
