//! Caption generation: beam search and top-k sampling over the extended
//! vocabulary, with per-step pointer diagnostics and a repetition flag.
//!
//! Final beam selection is by length-normalized score (log-prob divided by
//! emitted length) to counter the short-caption bias of raw beam search; the
//! greedy trajectory always competes at final selection, so a wider beam can
//! never return a worse normalized score than greedy decoding.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::model::{self, ModelParams};
use crate::pointer;
use crate::training::feed_id;
use crate::vocab::{ExtendedVocabulary, BOS, EOS};

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub max_len: usize,
    /// Exponent on length in the normalized score; 1.0 is a pure per-token
    /// average.
    pub length_norm_exponent: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { max_len: 20, length_norm_exponent: 1.0 }
    }
}

/// Partial caption during search. `log_prob` is the sum of per-step log
/// probabilities of every emitted id, including the EOS emission once
/// finished.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Emitted length: decode steps taken, which is also the number of
    /// log-prob terms accumulated.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn normalized_score(&self, exponent: f64) -> f64 {
        self.log_prob / (self.ids.len().max(1) as f64).powf(exponent)
    }
}

/// One decoded caption with its diagnostics.
#[derive(Debug, Clone)]
pub struct DecodeReport {
    pub image_id: String,
    /// Caption tokens (EOS stripped).
    pub caption: Vec<String>,
    /// Emitted ids including the trailing EOS when the hypothesis finished.
    pub token_ids: Vec<usize>,
    pub log_prob: f64,
    /// Per-step generation probabilities; pointer variant only.
    pub p_gen_trace: Option<Vec<f64>>,
    /// Caption positions emitted through the copy channel: extended-only ids,
    /// or tokens whose copy mass exceeded their generation mass.
    pub copied_positions: Vec<usize>,
    /// Any token emitted three or more times consecutively.
    pub repetition_flag: bool,
}

/// True when any token appears >= 3 times consecutively.
pub fn has_repetition(tokens: &[String]) -> bool {
    tokens.windows(3).any(|w| w[0] == w[1] && w[1] == w[2])
}

/// Fraction of reports with the repetition flag set.
pub fn repetition_rate(reports: &[DecodeReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("decode reports"));
    }
    let flagged = reports.iter().filter(|r| r.repetition_flag).count();
    Ok(flagged as f64 / reports.len() as f64)
}

// ── Search core ──────────────────────────────────────────────────────
//
// Beam search and sampling are written against a step scorer so the search
// logic is testable on hand-built probability tables, independent of the
// model path that normally drives it.

pub(crate) struct StepScores {
    /// (id, log P(id)) for every token with positive probability.
    pub log_probs: Vec<(usize, f64)>,
    pub p_gen: Option<f64>,
    /// Per id: the copy-channel mass exceeded the generation mass.
    pub copy_dominates: Vec<bool>,
}

pub(crate) trait StepScorer {
    type State: Copy;
    fn initial(&mut self) -> Result<Self::State>;
    /// Score the next step given the raw previously-emitted id (BOS at t=0).
    fn step(&mut self, state: Self::State, prev_emitted: usize) -> Result<(StepScores, Self::State)>;
}

struct BeamItem<S> {
    state: S,
    prev: usize,
    hyp: Hypothesis,
    p_gens: Vec<f64>,
    copied: Vec<bool>,
}

impl<S: Copy> BeamItem<S> {
    fn root(state: S) -> Self {
        BeamItem {
            state,
            prev: BOS,
            hyp: Hypothesis { ids: Vec::new(), log_prob: 0.0, finished: false },
            p_gens: Vec::new(),
            copied: Vec::new(),
        }
    }
}

// Deterministic ordering: higher score first, lexicographically smaller id
// sequence on ties.
fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn beam_core<S: StepScorer>(
    scorer: &mut S,
    beam_size: usize,
    config: &DecodeConfig,
) -> Result<BeamItem<S::State>> {
    let mut active = vec![BeamItem::root(scorer.initial()?)];
    let mut finished: Vec<BeamItem<S::State>> = Vec::new();

    for _ in 0..config.max_len {
        if active.is_empty() {
            break;
        }
        // (source beam, token, cumulative score, p_gen, copied)
        let mut candidates: Vec<(usize, usize, f64, Option<f64>, bool)> = Vec::new();
        let mut next_states = Vec::with_capacity(active.len());
        for (bi, item) in active.iter().enumerate() {
            let (scores, next) = scorer.step(item.state, item.prev)?;
            for &(id, lp) in &scores.log_probs {
                candidates.push((
                    bi,
                    id,
                    item.hyp.log_prob + lp,
                    scores.p_gen,
                    scores.copy_dominates[id],
                ));
            }
            next_states.push(next);
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
        });

        let mut next_active: Vec<BeamItem<S::State>> = Vec::new();
        for &(bi, id, cum, p_gen, copied) in &candidates {
            if next_active.len() >= beam_size {
                break;
            }
            let src = &active[bi];
            let mut ids = src.hyp.ids.clone();
            ids.push(id);
            let mut p_gens = src.p_gens.clone();
            if let Some(pg) = p_gen {
                p_gens.push(pg);
            }
            let mut copied_v = src.copied.clone();
            copied_v.push(copied);
            let item = BeamItem {
                state: next_states[bi],
                prev: id,
                hyp: Hypothesis { ids, log_prob: cum, finished: id == EOS },
                p_gens,
                copied: copied_v,
            };
            if id == EOS {
                finished.push(item);
            } else {
                next_active.push(item);
            }
        }
        active = next_active;
    }
    // close unfinished hypotheses at max_len
    finished.extend(active);

    // the greedy trajectory always competes at final selection
    if beam_size > 1 {
        finished.push(beam_core(scorer, 1, config)?);
    }

    let exponent = config.length_norm_exponent;
    finished.sort_by(|a, b| {
        better(
            (a.hyp.normalized_score(exponent), &a.hyp.ids),
            (b.hyp.normalized_score(exponent), &b.hyp.ids),
        )
    });
    Ok(finished.into_iter().next().expect("beam search always yields a hypothesis"))
}

fn sample_core<S: StepScorer>(
    scorer: &mut S,
    k: usize,
    temperature: f64,
    seed: u64,
    config: &DecodeConfig,
) -> Result<BeamItem<S::State>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut item = BeamItem::root(scorer.initial()?);
    for _ in 0..config.max_len {
        let (scores, next) = scorer.step(item.state, item.prev)?;
        let mut top = scores.log_probs.clone();
        top.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
        });
        top.truncate(k);
        // softmax of log-prob / temperature over the top-k set
        let m = top.iter().map(|(_, lp)| lp / temperature).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = top.iter().map(|(_, lp)| (lp / temperature - m).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut draw = rng.random_range(0.0..1.0) * total;
        let mut chosen = top.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if draw < *w {
                chosen = i;
                break;
            }
            draw -= w;
        }
        let (id, lp) = top[chosen];
        item.hyp.ids.push(id);
        item.hyp.log_prob += lp;
        if let Some(pg) = scores.p_gen {
            item.p_gens.push(pg);
        }
        item.copied.push(scores.copy_dominates[id]);
        item.state = next;
        item.prev = id;
        if id == EOS {
            item.hyp.finished = true;
            break;
        }
    }
    Ok(item)
}

// ── Model-backed scorer ──────────────────────────────────────────────

struct ModelScorer<'a> {
    g: Graph,
    bound: model::BoundParams,
    memory: model::Memory,
    params: &'a ModelParams,
    ext: &'a ExtendedVocabulary,
}

impl<'a> ModelScorer<'a> {
    fn new(
        params: &'a ModelParams,
        ext: &'a ExtendedVocabulary,
        bundle: &FeatureBundle,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false)?;
        let memory = model::encode(&mut g, bundle, &bound, &params.config)?;
        Ok(ModelScorer { g, bound, memory, params, ext })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = model::DecoderState;

    fn initial(&mut self) -> Result<Self::State> {
        Ok(model::initial_state(&mut self.g, &self.params.config))
    }

    fn step(&mut self, state: Self::State, prev_emitted: usize) -> Result<(StepScores, Self::State)> {
        let config = &self.params.config;
        let prev = feed_id(prev_emitted, config);
        let (step, next) =
            model::decode_step(&mut self.g, state, prev, &self.memory, &self.bound, config)?;
        let (dist, p_gen) =
            pointer::step_distribution(&mut self.g, &step, &self.memory, &self.bound, config, self.ext)?;
        let probs = self.g.data(dist).to_vec();
        let fixed = self.ext.fixed_size();
        let mut copy_dominates = vec![false; probs.len()];
        if let Some(pg) = p_gen {
            let p_vocab = self.g.data(step.p_vocab);
            for (id, &p) in probs.iter().enumerate() {
                let gen_mass = if id < fixed { pg * p_vocab[id] } else { 0.0 };
                copy_dominates[id] = (p - gen_mass) > gen_mass;
            }
        }
        let log_probs = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(id, &p)| (id, p.ln()))
            .collect();
        Ok((StepScores { log_probs, p_gen, copy_dominates }, next))
    }
}

fn finish_report(
    item: BeamItem<model::DecoderState>,
    params: &ModelParams,
    ext: &ExtendedVocabulary,
    image_id: &str,
) -> DecodeReport {
    let caption: Vec<String> = item
        .hyp
        .ids
        .iter()
        .filter(|&&id| id != EOS)
        .map(|&id| ext.token(id).unwrap_or("<unk>").to_string())
        .collect();
    let copied_positions = item
        .copied
        .iter()
        .zip(&item.hyp.ids)
        .enumerate()
        .filter(|(_, (c, &id))| **c && id != EOS)
        .map(|(i, _)| i)
        .collect();
    DecodeReport {
        image_id: image_id.to_string(),
        repetition_flag: has_repetition(&caption),
        caption,
        token_ids: item.hyp.ids,
        log_prob: item.hyp.log_prob,
        p_gen_trace: match params.config.variant {
            model::Variant::Pointer => Some(item.p_gens),
            _ => None,
        },
        copied_positions,
    }
}

/// Beam search over the extended-vocabulary distributions. Deterministic.
pub fn beam_search(
    params: &ModelParams,
    ext: &ExtendedVocabulary,
    bundle: &FeatureBundle,
    beam_size: usize,
    config: &DecodeConfig,
) -> Result<DecodeReport> {
    if beam_size < 1 || config.max_len < 1 {
        return Err(Error::Format("beam_size and max_len must be >= 1".into()));
    }
    let mut scorer = ModelScorer::new(params, ext, bundle)?;
    let best = beam_core(&mut scorer, beam_size, config)?;
    Ok(finish_report(best, params, ext, &bundle.image_id))
}

/// Top-k sampling: restrict each step to the k most probable tokens, apply
/// the temperature, renormalize, sample. Seeded and reproducible.
pub fn top_k_sample(
    params: &ModelParams,
    ext: &ExtendedVocabulary,
    bundle: &FeatureBundle,
    k: usize,
    temperature: f64,
    seed: u64,
    config: &DecodeConfig,
) -> Result<DecodeReport> {
    if k < 1 || temperature <= 0.0 || config.max_len < 1 {
        return Err(Error::Format("top-k sampling needs k >= 1 and temperature > 0".into()));
    }
    let mut scorer = ModelScorer::new(params, ext, bundle)?;
    let item = sample_core(&mut scorer, k, temperature, seed, config)?;
    Ok(finish_report(item, params, ext, &bundle.image_id))
}

/// Teacher-forced log-probability of an emitted id sequence; reproduces the
/// decode-time score of a hypothesis exactly.
pub fn rescore(
    params: &ModelParams,
    ext: &ExtendedVocabulary,
    bundle: &FeatureBundle,
    token_ids: &[usize],
) -> Result<f64> {
    let mut scorer = ModelScorer::new(params, ext, bundle)?;
    let mut state = scorer.initial()?;
    let mut prev = BOS;
    let mut total = 0.0;
    for &id in token_ids {
        let (scores, next) = scorer.step(state, prev)?;
        let lp = scores
            .log_probs
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, lp)| *lp)
            .ok_or(Error::IndexOutOfBounds { op: "rescore", index: id, len: ext.len() })?;
        total += lp;
        state = next;
        prev = id;
    }
    Ok(total)
}
