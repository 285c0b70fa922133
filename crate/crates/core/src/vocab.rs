//! Caption vocabularies: the fixed vocabulary built from training captions,
//! and its OCR extension with frequency thresholds and stopword filtering.
//!
//! Ids below `fixed_size` belong to the fixed vocabulary; ids at or above it
//! are reachable only through the copy channel (or the extended softmax head).

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bundled English stopword list, one word per line.
const STOPWORDS_RAW: &str = include_str!("stopwords.txt");

fn stopword_set() -> HashSet<&'static str> {
    STOPWORDS_RAW.lines().filter(|l| !l.is_empty()).collect()
}

/// Fixed caption vocabulary. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Build from tokenized captions, keeping tokens with corpus frequency
    /// `>= min_count`. Ids are assigned by descending frequency, ties broken
    /// lexicographically, after the four specials.
    pub fn build(captions: &[Vec<String>], min_count: u64) -> Result<Vocabulary> {
        if captions.is_empty() || min_count < 1 {
            return Err(Error::EmptyCorpus);
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for cap in captions {
            for tok in cap {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> =
            freq.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0u64; 4];
        for (tok, c) in kept {
            id_to_token.push(tok.to_string());
            counts.push(c);
        }
        Ok(Vocabulary::from_parts(id_to_token, counts))
    }

    fn from_parts(id_to_token: Vec<String>, counts: Vec<u64>) -> Vocabulary {
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { token_to_id, id_to_token, counts }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Token ids, with out-of-vocabulary tokens mapped to UNK.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    /// Serialized file form: one `token<TAB>count` line per id, the four
    /// specials first. Deterministic for identical corpora.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (tok, count) in self.id_to_token.iter().zip(&self.counts) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&count.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_file_string().as_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Vocabulary> {
        let f = std::fs::File::open(path)?;
        let mut id_to_token = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            let (tok, count) = parse_vocab_line(&line, lineno)?;
            id_to_token.push(tok);
            counts.push(count);
        }
        if id_to_token.len() < 4
            || SPECIAL_TOKENS.iter().zip(&id_to_token).any(|(a, b)| a != b)
        {
            return Err(Error::Format(format!(
                "vocabulary file {} missing the 4-line special-token header",
                path.display()
            )));
        }
        Ok(Vocabulary::from_parts(id_to_token, counts))
    }
}

fn parse_vocab_line(line: &str, lineno: usize) -> Result<(String, u64)> {
    let (tok, count) = line.split_once('\t').ok_or_else(|| {
        Error::Format(format!("vocabulary line {}: expected token<TAB>count", lineno + 1))
    })?;
    let count = count.parse::<u64>().map_err(|_| {
        Error::Format(format!("vocabulary line {}: bad count {count:?}", lineno + 1))
    })?;
    Ok((tok.to_string(), count))
}

/// Fixed vocabulary plus OCR-token extension. OCR tokens already present in
/// the fixed vocabulary are not duplicated; both channels route through the
/// fixed id for such words.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedVocabulary {
    base: Vocabulary,
    ocr_tokens: Vec<String>,
    ocr_counts: Vec<u64>,
    ocr_to_id: HashMap<String, usize>,
    fixed_size: usize,
}

impl ExtendedVocabulary {
    /// Append every OCR token with corpus frequency `>= threshold` that is not
    /// already in `base`, ordered by descending frequency then lexicographic.
    /// Stopwords never enter the extension.
    pub fn extend_with_ocr(
        base: Vocabulary,
        ocr_corpus: &[Vec<String>],
        threshold: u64,
    ) -> Result<ExtendedVocabulary> {
        if threshold < 1 {
            return Err(Error::Format("OCR threshold must be >= 1".into()));
        }
        let stop = stopword_set();
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for image in ocr_corpus {
            for tok in image {
                if stop.contains(tok.to_lowercase().as_str()) {
                    continue;
                }
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut added: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(t, c)| *c >= threshold && !base.contains(t))
            .collect();
        added.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let fixed_size = base.len();
        let mut ocr_tokens = Vec::with_capacity(added.len());
        let mut ocr_counts = Vec::with_capacity(added.len());
        let mut ocr_to_id = HashMap::new();
        for (i, (tok, c)) in added.iter().enumerate() {
            ocr_tokens.push(tok.to_string());
            ocr_counts.push(*c);
            ocr_to_id.insert(tok.to_string(), fixed_size + i);
        }
        Ok(ExtendedVocabulary { base, ocr_tokens, ocr_counts, ocr_to_id, fixed_size })
    }

    /// Extension with no OCR tokens (baseline configuration).
    pub fn without_ocr(base: Vocabulary) -> ExtendedVocabulary {
        let fixed_size = base.len();
        ExtendedVocabulary {
            base,
            ocr_tokens: Vec::new(),
            ocr_counts: Vec::new(),
            ocr_to_id: HashMap::new(),
            fixed_size,
        }
    }

    pub fn base(&self) -> &Vocabulary {
        &self.base
    }

    pub fn fixed_size(&self) -> usize {
        self.fixed_size
    }

    pub fn len(&self) -> usize {
        self.fixed_size + self.ocr_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of OCR tokens added beyond the fixed vocabulary.
    pub fn added(&self) -> usize {
        self.ocr_tokens.len()
    }

    pub fn ocr_tokens(&self) -> &[String] {
        &self.ocr_tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.base.id(token).or_else(|| self.ocr_to_id.get(token).copied())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < self.fixed_size {
            self.base.token(id)
        } else {
            self.ocr_tokens.get(id - self.fixed_size).map(|s| s.as_str())
        }
    }

    pub fn is_ocr_only(&self, id: usize) -> bool {
        id >= self.fixed_size
    }

    /// Extension file form: one `token<TAB>count` line per added OCR token.
    pub fn ext_file_string(&self) -> String {
        let mut out = String::new();
        for (tok, count) in self.ocr_tokens.iter().zip(&self.ocr_counts) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&count.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_ext_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.ext_file_string().as_bytes())?;
        Ok(())
    }

    /// Rebuild from a fixed-vocabulary file and an optional extension file.
    pub fn read_files(base_path: &Path, ext_path: Option<&Path>) -> Result<ExtendedVocabulary> {
        let base = Vocabulary::read_file(base_path)?;
        let mut ext = ExtendedVocabulary::without_ocr(base);
        if let Some(p) = ext_path {
            let f = std::fs::File::open(p)?;
            for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
                let line = line?;
                let (tok, count) = parse_vocab_line(&line, lineno)?;
                if ext.base.contains(&tok) || ext.ocr_to_id.contains_key(&tok) {
                    return Err(Error::Format(format!(
                        "extension file {}: token {tok:?} duplicates an existing id",
                        p.display()
                    )));
                }
                ext.ocr_to_id.insert(tok.clone(), ext.fixed_size + ext.ocr_tokens.len());
                ext.ocr_tokens.push(tok);
                ext.ocr_counts.push(count);
            }
        }
        Ok(ext)
    }

    /// Content hash binding checkpoints to the exact vocabulary they trained on.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.base.to_file_string().as_bytes());
        h.update(b"\x00");
        h.update(self.ext_file_string().as_bytes());
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Order-preserving removal of bundled stopwords, case-insensitive.
pub fn filter_stopwords(tokens: &[String]) -> Vec<String> {
    let stop = stopword_set();
    tokens
        .iter()
        .filter(|t| !stop.contains(t.to_lowercase().as_str()))
        .cloned()
        .collect()
}

/// Lowercase and strip surrounding punctuation from a raw OCR detection.
/// Returns `None` when nothing alphanumeric remains.
pub fn normalize_ocr_token(raw: &str) -> Option<String> {
    let lowered = raw.to_lowercase();
    let trimmed = lowered.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() || !trimmed.chars().any(|c| c.is_alphanumeric()) {
        None
    } else {
        Some(trimmed.to_string())
    }
}
