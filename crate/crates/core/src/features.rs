//! Feature ingestion and synthetic-task generation.
//!
//! A `FeatureBundle` carries one image's inputs: region feature vectors plus
//! OCR tokens with embeddings. Real features arrive through `bundles.jsonl`;
//! the synthetic generator produces desk-scale datasets whose captions can
//! only be completed by copying OCR tokens.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One OCR detection: the token, its embedding, and its position in the
/// encoder input sequence (regions first, OCR after).
#[derive(Debug, Clone, PartialEq)]
pub struct OcrEntry {
    pub token: String,
    pub embedding: Vec<f64>,
    pub position: usize,
}

/// One image's model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub image_id: String,
    /// Row-major R x D_v region features.
    pub regions: Vec<Vec<f64>>,
    pub ocr: Vec<OcrEntry>,
}

impl FeatureBundle {
    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn region_dim(&self) -> usize {
        self.regions.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn ocr_dim(&self) -> Option<usize> {
        self.ocr.first().map(|e| e.embedding.len())
    }

    pub fn ocr_tokens(&self) -> Vec<String> {
        self.ocr.iter().map(|e| e.token.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::BadBundle {
            image_id: self.image_id.clone(),
            reason,
        };
        if self.regions.is_empty() {
            return Err(fail("no region features".into()));
        }
        let dv = self.regions[0].len();
        if dv == 0 {
            return Err(fail("zero-dimensional region feature".into()));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.len() != dv {
                return Err(fail(format!("region {i} has dimension {} != {dv}", r.len())));
            }
        }
        if let Some(de) = self.ocr_dim() {
            for e in &self.ocr {
                if e.embedding.len() != de {
                    return Err(fail(format!(
                        "OCR token {:?} has embedding dimension {} != {de}",
                        e.token,
                        e.embedding.len()
                    )));
                }
            }
        }
        let r = self.regions.len();
        for (k, e) in self.ocr.iter().enumerate() {
            if e.position != r + k {
                return Err(fail(format!(
                    "OCR token {:?} at position {} but expected {}",
                    e.token,
                    e.position,
                    r + k
                )));
            }
        }
        Ok(())
    }
}

/// One image's reference captions, tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub captions: Vec<Vec<String>>,
}

// Wire form: OCR positions are implicit in array order.
#[derive(Serialize, Deserialize)]
struct OcrWire {
    token: String,
    embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BundleWire {
    image_id: String,
    regions: Vec<Vec<f64>>,
    ocr: Vec<OcrWire>,
}

impl From<&FeatureBundle> for BundleWire {
    fn from(b: &FeatureBundle) -> Self {
        BundleWire {
            image_id: b.image_id.clone(),
            regions: b.regions.clone(),
            ocr: b
                .ocr
                .iter()
                .map(|e| OcrWire { token: e.token.clone(), embedding: e.embedding.clone() })
                .collect(),
        }
    }
}

impl BundleWire {
    fn into_bundle(self) -> FeatureBundle {
        let r = self.regions.len();
        FeatureBundle {
            image_id: self.image_id,
            regions: self.regions,
            ocr: self
                .ocr
                .into_iter()
                .enumerate()
                .map(|(k, w)| OcrEntry { token: w.token, embedding: w.embedding, position: r + k })
                .collect(),
        }
    }
}

/// Load `bundles.jsonl`: one JSON object per line. Validates every bundle
/// invariant, cross-record dimension consistency, and image-id uniqueness.
pub fn load_bundles(path: &Path) -> Result<Vec<FeatureBundle>> {
    let f = std::fs::File::open(path)?;
    let mut out: Vec<FeatureBundle> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut dims: Option<(usize, Option<usize>)> = None;
    for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: BundleWire = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let bundle = wire.into_bundle();
        bundle.validate()?;
        if !seen.insert(bundle.image_id.clone()) {
            return Err(Error::DuplicateImage { image_id: bundle.image_id });
        }
        let (dv, de) = (bundle.region_dim(), bundle.ocr_dim());
        match &mut dims {
            None => dims = Some((dv, de)),
            Some((dv0, de0)) => {
                if dv != *dv0 {
                    return Err(Error::BadBundle {
                        image_id: bundle.image_id,
                        reason: format!("region dimension {dv} != {dv0} used earlier in file"),
                    });
                }
                match (de, *de0) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(Error::BadBundle {
                            image_id: bundle.image_id,
                            reason: format!("OCR dimension {a} != {b} used earlier in file"),
                        });
                    }
                    (Some(a), None) => *de0 = Some(a),
                    _ => {}
                }
            }
        }
        out.push(bundle);
    }
    Ok(out)
}

pub fn write_bundles(bundles: &[FeatureBundle], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for b in bundles {
        serde_json::to_writer(&mut f, &BundleWire::from(b))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Load `captions.json`: `{image_id: [[token, ...], ...]}`.
pub fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let f = std::fs::File::open(path)?;
    let map: BTreeMap<String, Vec<Vec<String>>> = serde_json::from_reader(f)?;
    let mut out = Vec::with_capacity(map.len());
    for (image_id, captions) in map {
        if captions.is_empty() || captions.iter().any(|c| c.is_empty()) {
            return Err(Error::BadBundle {
                image_id,
                reason: "caption record needs at least one non-empty caption".into(),
            });
        }
        out.push(CaptionRecord { image_id, captions });
    }
    Ok(out)
}

pub fn write_captions(records: &[CaptionRecord], path: &Path) -> Result<()> {
    let map: BTreeMap<&str, &Vec<Vec<String>>> =
        records.iter().map(|r| (r.image_id.as_str(), &r.captions)).collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, &map)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Deterministic unit-norm embedding stand-in. The stream of normals is
/// derived from SHA-256 of (seed, token, counter), so the same token always
/// maps to the same direction on every platform.
pub fn hash_embed(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "hash_embed: dim must be >= 1");
    let mut out = Vec::with_capacity(dim);
    let mut counter: u64 = 0;
    let mut pool: Vec<f64> = Vec::new();
    while out.len() < dim {
        if pool.is_empty() {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(token.as_bytes());
            h.update(counter.to_le_bytes());
            counter += 1;
            let digest = h.finalize();
            // 4 u64 words -> 2 Box-Muller pairs
            for pair in digest.chunks(16) {
                let a = u64::from_le_bytes(pair[..8].try_into().unwrap());
                let b = u64::from_le_bytes(pair[8..].try_into().unwrap());
                let u1 = ((a >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
                let u2 = ((b >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
                let r = (-2.0 * u1.ln()).sqrt();
                let theta = 2.0 * std::f64::consts::PI * u2;
                pool.push(r * theta.cos());
                pool.push(r * theta.sin());
            }
        }
        out.push(pool.remove(0));
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut out {
            *v /= norm;
        }
    } else {
        out[0] = 1.0;
    }
    out
}

/// Embedding seed used by the synthetic generator, fixed so that train and
/// eval splits generated from different dataset seeds agree on every token's
/// embedding.
pub const SYNTH_EMBED_SEED: u64 = 0;

/// Seed for the per-template region cluster centers. Fixed for the same
/// reason: splits generated from different dataset seeds must share the
/// visual vocabulary, as they would under a real feature extractor.
pub const SYNTH_CLUSTER_SEED: u64 = 1;

/// Caption templates for the synthetic task. `{}` marks the filler slot.
const TEMPLATES: [[&str; 2]; 5] = [
    ["a bottle of {} on a table", "the bottle of {} sits on a table"],
    ["a box of {} cereal on a shelf", "the box of {} cereal sits on a shelf"],
    ["a can of {} soda in a hand", "the can of {} soda held in a hand"],
    ["a jar of {} sauce on a counter", "the jar of {} sauce sits on a counter"],
    ["a bag of {} chips on a floor", "the bag of {} chips sits on a floor"],
];

/// Words used by the caption templates themselves (always high-frequency).
pub fn template_words() -> Vec<String> {
    let mut set = std::collections::BTreeSet::new();
    for t in &TEMPLATES {
        for v in t {
            for w in v.split_whitespace() {
                if w != "{}" {
                    set.insert(w.to_string());
                }
            }
        }
    }
    set.into_iter().collect()
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_images: usize,
    pub n_regions: usize,
    pub d_v: usize,
    pub d_e: usize,
    /// In-vocabulary filler pool, used when an image is not a copy image.
    pub fixed_vocab_words: Vec<String>,
    /// Out-of-vocabulary filler pool, reachable only through the copy channel.
    pub ocr_lexicon: Vec<String>,
    pub copy_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: 200,
            n_regions: 8,
            d_v: 32,
            d_e: 32,
            fixed_vocab_words: ["water", "pasta", "honey", "olives", "rice", "beans"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ocr_lexicon: default_ocr_lexicon(),
            copy_rate: 1.0,
        }
    }
}

/// 40 brand-like words that never occur as template or in-vocabulary words.
pub fn default_ocr_lexicon() -> Vec<String> {
    [
        "acme", "zorp", "brixel", "quandor", "velmix", "tarnol", "jubrix", "klaven", "morzik",
        "plizzo", "grunex", "sarvol", "tindar", "ulbrok", "vexina", "womple", "xandro", "yelvot",
        "zindle", "arbive", "blunex", "crastol", "drovax", "elmira", "fintor", "gazbo", "hivoli",
        "ixtran", "jolvex", "kintor", "lumaxo", "mivrel", "noxbit", "orvand", "pextol", "quimzo",
        "rulvex", "sovrin", "trambo", "uvexol",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Cyclic pool that hands out a shuffled sequence, reshuffling each pass, so
/// per-word usage counts stay balanced.
struct CyclicPool {
    words: Vec<String>,
    cursor: usize,
}

impl CyclicPool {
    fn new(mut words: Vec<String>, rng: &mut ChaCha8Rng) -> Self {
        words.shuffle(rng);
        CyclicPool { words, cursor: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> String {
        if self.cursor == self.words.len() {
            self.words.shuffle(rng);
            self.cursor = 0;
        }
        let w = self.words[self.cursor].clone();
        self.cursor += 1;
        w
    }
}

/// Generate a deterministic synthetic dataset. Every image gets one template,
/// one filler, region features drawn from per-template clusters, and a single
/// OCR detection holding the filler token.
pub fn synth_generate(
    config: &SynthConfig,
    seed: u64,
) -> Result<(Vec<FeatureBundle>, Vec<CaptionRecord>)> {
    if !(0.0..=1.0).contains(&config.copy_rate) {
        return Err(Error::Format(format!(
            "copy_rate {} outside [0,1]",
            config.copy_rate
        )));
    }
    if config.ocr_lexicon.is_empty() || config.fixed_vocab_words.is_empty() {
        return Err(Error::EmptyInput("synthetic filler lexicons"));
    }
    let reserved: HashSet<String> = template_words()
        .into_iter()
        .chain(config.fixed_vocab_words.iter().cloned())
        .collect();
    if let Some(w) = config.ocr_lexicon.iter().find(|w| reserved.contains(*w)) {
        return Err(Error::Format(format!(
            "OCR lexicon word {w:?} collides with the fixed-vocabulary word list"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Per-(template, region-slot) cluster centers give the visual stream a
    // template-identifying signal shared by every split.
    let mut cluster_rng = ChaCha8Rng::seed_from_u64(SYNTH_CLUSTER_SEED);
    let mut centers = Vec::with_capacity(TEMPLATES.len());
    for _ in 0..TEMPLATES.len() {
        let mut per_region = Vec::with_capacity(config.n_regions);
        for _ in 0..config.n_regions {
            let c: Vec<f64> =
                (0..config.d_v).map(|_| cluster_rng.random_range(-1.0..1.0)).collect();
            per_region.push(c);
        }
        centers.push(per_region);
    }

    let mut oov_pool = CyclicPool::new(config.ocr_lexicon.clone(), &mut rng);
    let mut iv_pool = CyclicPool::new(config.fixed_vocab_words.clone(), &mut rng);

    let mut bundles = Vec::with_capacity(config.n_images);
    let mut records = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let image_id = format!("synth{seed:04x}-{i:04}");
        let template = rng.random_range(0..TEMPLATES.len());
        let copy_image = rng.random_bool(config.copy_rate);
        let filler = if copy_image {
            oov_pool.next(&mut rng)
        } else {
            iv_pool.next(&mut rng)
        };

        let regions: Vec<Vec<f64>> = (0..config.n_regions)
            .map(|r| {
                centers[template][r]
                    .iter()
                    .map(|c| c + 0.1 * standard_normal(&mut rng))
                    .collect()
            })
            .collect();

        let ocr = vec![OcrEntry {
            token: filler.clone(),
            embedding: hash_embed(&filler, config.d_e, SYNTH_EMBED_SEED),
            position: config.n_regions,
        }];

        let captions: Vec<Vec<String>> = TEMPLATES[template]
            .iter()
            .map(|v| {
                v.split_whitespace()
                    .map(|w| if w == "{}" { filler.clone() } else { w.to_string() })
                    .collect()
            })
            .collect();

        bundles.push(FeatureBundle { image_id: image_id.clone(), regions, ocr });
        records.push(CaptionRecord { image_id, captions });
    }
    Ok((bundles, records))
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniforms; half the pair is discarded for simplicity.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
