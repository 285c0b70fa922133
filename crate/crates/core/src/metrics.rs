//! Corpus caption metrics: BLEU-4, ROUGE-L, and CIDEr-D against
//! multi-reference captions.
//!
//! Conventions follow the standard captioning evaluation kit: corpus-level
//! BLEU with the closest-reference-length brevity penalty, ROUGE-L as an
//! F-measure with beta = 1.2 taking the max precision and recall over
//! references, and CIDEr-D with tf-idf n-gram vectors (n = 1..4), candidate
//! count clipping, a Gaussian length penalty (sigma = 6), and a x10 scale.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

const MAX_N: usize = 4;
const ROUGE_BETA: f64 = 1.2;
const CIDER_SIGMA: f64 = 6.0;

/// One image's candidate caption and its references, already tokenized with
/// the shared training tokenizer.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Scoring corpus. Candidates may be empty (they score, they are not
/// rejected); every image needs at least one reference.
#[derive(Debug, Clone)]
pub struct EvalCorpus {
    pub items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn new(items: Vec<EvalItem>) -> Result<EvalCorpus> {
        if items.is_empty() {
            return Err(Error::EmptyInput("evaluation corpus"));
        }
        if items.iter().any(|it| it.references.is_empty() || it.references.iter().any(|r| r.is_empty()))
        {
            return Err(Error::Format("every image needs at least one non-empty reference".into()));
        }
        Ok(EvalCorpus { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

type Ngram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram, u64> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

// ── BLEU-4 ───────────────────────────────────────────────────────────

/// Corpus-level BLEU-4 in [0, 100]: modified n-gram precisions (n = 1..4,
/// geometric mean over the orders the candidates actually produced) with the
/// closest-reference-length brevity penalty.
pub fn bleu4(corpus: &EvalCorpus) -> Result<f64> {
    let mut numer = [0u64; MAX_N];
    let mut denom = [0u64; MAX_N];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for item in &corpus.items {
        cand_len += item.candidate.len();
        // closest reference length; ties favor the shorter reference
        let closest = item
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let diff = (l as i64 - item.candidate.len() as i64).unsigned_abs();
                (diff, l)
            })
            .unwrap();
        ref_len += closest;

        for n in 1..=MAX_N {
            let cand = ngram_counts(&item.candidate, n);
            if cand.is_empty() {
                continue;
            }
            // clip candidate counts against the max count over references
            let mut ref_counts: BTreeMap<Ngram, u64> = BTreeMap::new();
            for r in &item.references {
                for (gram, count) in ngram_counts(r, n) {
                    let e = ref_counts.entry(gram).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (gram, count) in &cand {
                denom[n - 1] += count;
                let clipped = (*count).min(ref_counts.get(gram).copied().unwrap_or(0));
                numer[n - 1] += clipped;
            }
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..MAX_N {
        if denom[n] == 0 {
            continue;
        }
        if numer[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (numer[n] as f64 / denom[n] as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let geo = (log_sum / orders as f64).exp();
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * geo)
}

// ── ROUGE-L ──────────────────────────────────────────────────────────

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// Mean-over-corpus LCS F-measure in [0, 100], beta = 1.2; the max precision
/// and max recall over references combine into one F per image.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    let mut total = 0.0;
    for item in &corpus.items {
        let mut prec_max = 0.0f64;
        let mut rec_max = 0.0f64;
        for r in &item.references {
            let lcs = lcs_len(&item.candidate, r) as f64;
            if !item.candidate.is_empty() {
                prec_max = prec_max.max(lcs / item.candidate.len() as f64);
            }
            rec_max = rec_max.max(lcs / r.len() as f64);
        }
        if prec_max > 0.0 && rec_max > 0.0 {
            let b2 = ROUGE_BETA * ROUGE_BETA;
            total += (1.0 + b2) * prec_max * rec_max / (rec_max + b2 * prec_max);
        }
    }
    Ok(100.0 * total / corpus.items.len() as f64)
}

// ── CIDEr-D ──────────────────────────────────────────────────────────

struct TfIdfVec {
    /// per n: ngram -> tf * idf
    vecs: Vec<BTreeMap<Ngram, f64>>,
    norms: Vec<f64>,
    length: usize,
}

fn counts_to_vec(tokens: &[String], df: &BTreeMap<Ngram, f64>, log_images: f64) -> TfIdfVec {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let mut vec = BTreeMap::new();
        let mut norm = 0.0;
        for (gram, tf) in ngram_counts(tokens, n) {
            let idf = log_images - df.get(&gram).copied().unwrap_or(0.0).max(1.0).ln();
            let w = tf as f64 * idf;
            norm += w * w;
            vec.insert(gram, w);
        }
        vecs.push(vec);
        norms.push(norm.sqrt());
    }
    TfIdfVec { vecs, norms, length: tokens.len() }
}

/// CIDEr-D score (>= 0, typically in [0, 10]): tf-idf n-gram cosine with
/// candidate-count clipping, averaged over n and references, with a Gaussian
/// length penalty, scaled by 10. Needs at least two images for a meaningful
/// idf.
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    if corpus.items.len() < 2 {
        return Err(Error::Format(
            "CIDEr needs a corpus of at least 2 images (idf is degenerate otherwise)".into(),
        ));
    }
    // document frequency: number of images whose references contain the ngram
    let mut df: BTreeMap<Ngram, f64> = BTreeMap::new();
    for item in &corpus.items {
        let mut seen: BTreeSet<Ngram> = BTreeSet::new();
        for r in &item.references {
            for n in 1..=MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for gram in seen {
            *df.entry(gram).or_insert(0.0) += 1.0;
        }
    }
    let log_images = (corpus.items.len() as f64).ln();

    let mut total = 0.0;
    for item in &corpus.items {
        let hyp = counts_to_vec(&item.candidate, &df, log_images);
        let mut per_n = vec![0.0; MAX_N];
        for r in &item.references {
            let rf = counts_to_vec(r, &df, log_images);
            let delta = hyp.length as f64 - rf.length as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..MAX_N {
                let mut dot = 0.0;
                for (gram, h) in &hyp.vecs[n] {
                    if let Some(rw) = rf.vecs[n].get(gram) {
                        dot += h.min(*rw) * rw;
                    }
                }
                if hyp.norms[n] > 0.0 && rf.norms[n] > 0.0 {
                    per_n[n] += penalty * dot / (hyp.norms[n] * rf.norms[n]);
                }
            }
        }
        let m = item.references.len() as f64;
        let image_score: f64 = per_n.iter().map(|v| 10.0 * v / m).sum::<f64>() / MAX_N as f64;
        total += image_score;
    }
    Ok(total / corpus.items.len() as f64)
}
