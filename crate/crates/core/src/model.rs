//! Attention-on-attention encoder-decoder.
//!
//! The encoder projects region features and OCR embeddings into one joint
//! sequence and refines it with self-attention + AoA layers. The decoder is a
//! gated recurrent cell whose hidden state queries the refined memory; the
//! attention result is gated by AoA and projected to the generator softmax.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::features::FeatureBundle;

/// Which of the paper's model configurations is being run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Vision-only captioner over the fixed vocabulary.
    Baseline,
    /// OCR embeddings as extra encoder features, softmax over the extended
    /// vocabulary, no copy channel.
    Extended,
    /// OCR features plus the pointer-generator copy channel; the generator
    /// head stays on the fixed vocabulary.
    Pointer,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Baseline => write!(f, "baseline"),
            Variant::Extended => write!(f, "extended"),
            Variant::Pointer => write!(f, "pointer"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Model dimension shared by embeddings, recurrent state, and attention.
    pub d: usize,
    pub d_v: usize,
    pub d_e: usize,
    pub encoder_layers: usize,
    pub fixed_vocab: usize,
    pub extended_vocab: usize,
    /// Uniform initialization half-width.
    pub init_scale: f64,
}

impl ModelConfig {
    /// Rows of the word-embedding table: the extended variant embeds the whole
    /// extended vocabulary, the others only the fixed one.
    pub fn embed_rows(&self) -> usize {
        match self.variant {
            Variant::Extended => self.extended_vocab,
            _ => self.fixed_vocab,
        }
    }

    /// Width of the generator softmax.
    pub fn output_dim(&self) -> usize {
        match self.variant {
            Variant::Extended => self.extended_vocab,
            _ => self.fixed_vocab,
        }
    }
}

// ── Parameter tree ───────────────────────────────────────────────────
//
// Generic over the leaf type so the same structure serves host parameters
// (`TensorData`), graph bindings (`Tensor`), and anything mapped from them.

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone)]
pub struct AoaParams<T> {
    pub wi_q: T,
    pub wi_v: T,
    pub b_i: T,
    pub wg_q: T,
    pub wg_v: T,
    pub b_g: T,
}

#[derive(Debug, Clone)]
pub struct GruParams<T> {
    pub wz_x: T,
    pub wz_h: T,
    pub b_z: T,
    pub wr_x: T,
    pub wr_h: T,
    pub b_r: T,
    pub wh_x: T,
    pub wh_h: T,
    pub b_h: T,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer<T> {
    pub att_q: T,
    pub att_k: T,
    pub att_v: T,
    pub aoa: AoaParams<T>,
    pub ln_gain: T,
    pub ln_bias: T,
}

#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub gru: GruParams<T>,
    pub att_q: T,
    pub att_k: T,
    pub att_v: T,
    pub aoa: AoaParams<T>,
    pub out: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct PointerParams<T> {
    pub w_h: T,
    pub w_s: T,
    pub w_x: T,
    pub b_ptr: T,
}

#[derive(Debug, Clone)]
pub struct ParamTree<T> {
    pub region_proj: Linear<T>,
    pub ocr_proj: Option<Linear<T>>,
    pub embedding: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: DecoderParams<T>,
    pub pointer: Option<PointerParams<T>>,
}

impl<T> AoaParams<T> {
    fn try_map<U, F: FnMut(&T) -> Result<U>>(&self, f: &mut F) -> Result<AoaParams<U>> {
        Ok(AoaParams {
            wi_q: f(&self.wi_q)?,
            wi_v: f(&self.wi_v)?,
            b_i: f(&self.b_i)?,
            wg_q: f(&self.wg_q)?,
            wg_v: f(&self.wg_v)?,
            b_g: f(&self.b_g)?,
        })
    }

    fn visit<'a, F: FnMut(String, &'a T)>(&'a self, prefix: &str, f: &mut F) {
        f(format!("{prefix}.wi_q"), &self.wi_q);
        f(format!("{prefix}.wi_v"), &self.wi_v);
        f(format!("{prefix}.b_i"), &self.b_i);
        f(format!("{prefix}.wg_q"), &self.wg_q);
        f(format!("{prefix}.wg_v"), &self.wg_v);
        f(format!("{prefix}.b_g"), &self.b_g);
    }

    fn visit_mut<F: FnMut(String, &mut T)>(&mut self, prefix: &str, f: &mut F) {
        f(format!("{prefix}.wi_q"), &mut self.wi_q);
        f(format!("{prefix}.wi_v"), &mut self.wi_v);
        f(format!("{prefix}.b_i"), &mut self.b_i);
        f(format!("{prefix}.wg_q"), &mut self.wg_q);
        f(format!("{prefix}.wg_v"), &mut self.wg_v);
        f(format!("{prefix}.b_g"), &mut self.b_g);
    }
}

impl<T> ParamTree<T> {
    pub fn try_map<U, F: FnMut(&T) -> Result<U>>(&self, f: &mut F) -> Result<ParamTree<U>> {
        Ok(ParamTree {
            region_proj: Linear { w: f(&self.region_proj.w)?, b: f(&self.region_proj.b)? },
            ocr_proj: match &self.ocr_proj {
                Some(l) => Some(Linear { w: f(&l.w)?, b: f(&l.b)? }),
                None => None,
            },
            embedding: f(&self.embedding)?,
            encoder: self
                .encoder
                .iter()
                .map(|l| {
                    Ok(EncoderLayer {
                        att_q: f(&l.att_q)?,
                        att_k: f(&l.att_k)?,
                        att_v: f(&l.att_v)?,
                        aoa: l.aoa.try_map(f)?,
                        ln_gain: f(&l.ln_gain)?,
                        ln_bias: f(&l.ln_bias)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            decoder: DecoderParams {
                gru: GruParams {
                    wz_x: f(&self.decoder.gru.wz_x)?,
                    wz_h: f(&self.decoder.gru.wz_h)?,
                    b_z: f(&self.decoder.gru.b_z)?,
                    wr_x: f(&self.decoder.gru.wr_x)?,
                    wr_h: f(&self.decoder.gru.wr_h)?,
                    b_r: f(&self.decoder.gru.b_r)?,
                    wh_x: f(&self.decoder.gru.wh_x)?,
                    wh_h: f(&self.decoder.gru.wh_h)?,
                    b_h: f(&self.decoder.gru.b_h)?,
                },
                att_q: f(&self.decoder.att_q)?,
                att_k: f(&self.decoder.att_k)?,
                att_v: f(&self.decoder.att_v)?,
                aoa: self.decoder.aoa.try_map(f)?,
                out: Linear { w: f(&self.decoder.out.w)?, b: f(&self.decoder.out.b)? },
            },
            pointer: match &self.pointer {
                Some(p) => Some(PointerParams {
                    w_h: f(&p.w_h)?,
                    w_s: f(&p.w_s)?,
                    w_x: f(&p.w_x)?,
                    b_ptr: f(&p.b_ptr)?,
                }),
                None => None,
            },
        })
    }

    /// Deterministic (name, leaf) traversal; `visit_mut` and checkpoints rely
    /// on this order being stable.
    pub fn visit<'a, F: FnMut(String, &'a T)>(&'a self, f: &mut F) {
        f("region_proj.w".into(), &self.region_proj.w);
        f("region_proj.b".into(), &self.region_proj.b);
        if let Some(l) = &self.ocr_proj {
            f("ocr_proj.w".into(), &l.w);
            f("ocr_proj.b".into(), &l.b);
        }
        f("embedding".into(), &self.embedding);
        for (i, l) in self.encoder.iter().enumerate() {
            f(format!("enc{i}.att_q"), &l.att_q);
            f(format!("enc{i}.att_k"), &l.att_k);
            f(format!("enc{i}.att_v"), &l.att_v);
            l.aoa.visit(&format!("enc{i}.aoa"), f);
            f(format!("enc{i}.ln_gain"), &l.ln_gain);
            f(format!("enc{i}.ln_bias"), &l.ln_bias);
        }
        let d = &self.decoder;
        f("dec.gru.wz_x".into(), &d.gru.wz_x);
        f("dec.gru.wz_h".into(), &d.gru.wz_h);
        f("dec.gru.b_z".into(), &d.gru.b_z);
        f("dec.gru.wr_x".into(), &d.gru.wr_x);
        f("dec.gru.wr_h".into(), &d.gru.wr_h);
        f("dec.gru.b_r".into(), &d.gru.b_r);
        f("dec.gru.wh_x".into(), &d.gru.wh_x);
        f("dec.gru.wh_h".into(), &d.gru.wh_h);
        f("dec.gru.b_h".into(), &d.gru.b_h);
        f("dec.att_q".into(), &d.att_q);
        f("dec.att_k".into(), &d.att_k);
        f("dec.att_v".into(), &d.att_v);
        d.aoa.visit("dec.aoa", f);
        f("dec.out.w".into(), &d.out.w);
        f("dec.out.b".into(), &d.out.b);
        if let Some(p) = &self.pointer {
            f("ptr.w_h".into(), &p.w_h);
            f("ptr.w_s".into(), &p.w_s);
            f("ptr.w_x".into(), &p.w_x);
            f("ptr.b".into(), &p.b_ptr);
        }
    }

    pub fn visit_mut<F: FnMut(String, &mut T)>(&mut self, f: &mut F) {
        f("region_proj.w".into(), &mut self.region_proj.w);
        f("region_proj.b".into(), &mut self.region_proj.b);
        if let Some(l) = &mut self.ocr_proj {
            f("ocr_proj.w".into(), &mut l.w);
            f("ocr_proj.b".into(), &mut l.b);
        }
        f("embedding".into(), &mut self.embedding);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            f(format!("enc{i}.att_q"), &mut l.att_q);
            f(format!("enc{i}.att_k"), &mut l.att_k);
            f(format!("enc{i}.att_v"), &mut l.att_v);
            l.aoa.visit_mut(&format!("enc{i}.aoa"), f);
            f(format!("enc{i}.ln_gain"), &mut l.ln_gain);
            f(format!("enc{i}.ln_bias"), &mut l.ln_bias);
        }
        let d = &mut self.decoder;
        f("dec.gru.wz_x".into(), &mut d.gru.wz_x);
        f("dec.gru.wz_h".into(), &mut d.gru.wz_h);
        f("dec.gru.b_z".into(), &mut d.gru.b_z);
        f("dec.gru.wr_x".into(), &mut d.gru.wr_x);
        f("dec.gru.wr_h".into(), &mut d.gru.wr_h);
        f("dec.gru.b_r".into(), &mut d.gru.b_r);
        f("dec.gru.wh_x".into(), &mut d.gru.wh_x);
        f("dec.gru.wh_h".into(), &mut d.gru.wh_h);
        f("dec.gru.b_h".into(), &mut d.gru.b_h);
        f("dec.att_q".into(), &mut d.att_q);
        f("dec.att_k".into(), &mut d.att_k);
        f("dec.att_v".into(), &mut d.att_v);
        d.aoa.visit_mut("dec.aoa", f);
        f("dec.out.w".into(), &mut d.out.w);
        f("dec.out.b".into(), &mut d.out.b);
        if let Some(p) = &mut self.pointer {
            f("ptr.w_h".into(), &mut p.w_h);
            f("ptr.w_s".into(), &mut p.w_s);
            f("ptr.w_x".into(), &mut p.w_x);
            f("ptr.b".into(), &mut p.b_ptr);
        }
    }
}

/// Host-side model parameters.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tree: ParamTree<TensorData>,
}

/// Graph-bound view of the parameters for one forward pass.
pub type BoundParams = ParamTree<Tensor>;

impl ModelParams {
    /// Seeded uniform init in `[-init_scale, init_scale]`.
    pub fn init(config: ModelConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.init_scale;
        let mut t = |shape: Vec<usize>| -> TensorData {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
            TensorData { shape, data }
        };
        let d = config.d;
        let aoa = |t: &mut dyn FnMut(Vec<usize>) -> TensorData| AoaParams {
            wi_q: t(vec![d, d]),
            wi_v: t(vec![d, d]),
            b_i: t(vec![d]),
            wg_q: t(vec![d, d]),
            wg_v: t(vec![d, d]),
            b_g: t(vec![d]),
        };
        let tree = ParamTree {
            region_proj: Linear { w: t(vec![config.d_v, d]), b: t(vec![d]) },
            ocr_proj: match config.variant {
                Variant::Baseline => None,
                _ => Some(Linear { w: t(vec![config.d_e, d]), b: t(vec![d]) }),
            },
            embedding: t(vec![config.embed_rows(), d]),
            encoder: (0..config.encoder_layers)
                .map(|_| EncoderLayer {
                    att_q: t(vec![d, d]),
                    att_k: t(vec![d, d]),
                    att_v: t(vec![d, d]),
                    aoa: aoa(&mut t),
                    ln_gain: TensorData { shape: vec![d], data: vec![1.0; d] },
                    ln_bias: TensorData::zeros(vec![d]),
                })
                .collect(),
            decoder: DecoderParams {
                gru: GruParams {
                    wz_x: t(vec![d, d]),
                    wz_h: t(vec![d, d]),
                    b_z: t(vec![d]),
                    wr_x: t(vec![d, d]),
                    wr_h: t(vec![d, d]),
                    b_r: t(vec![d]),
                    wh_x: t(vec![d, d]),
                    wh_h: t(vec![d, d]),
                    b_h: t(vec![d]),
                },
                att_q: t(vec![d, d]),
                att_k: t(vec![d, d]),
                att_v: t(vec![d, d]),
                aoa: aoa(&mut t),
                out: Linear { w: t(vec![d, config.output_dim()]), b: t(vec![config.output_dim()]) },
            },
            pointer: match config.variant {
                Variant::Pointer => Some(PointerParams {
                    w_h: t(vec![d]),
                    w_s: t(vec![d]),
                    w_x: t(vec![d]),
                    b_ptr: t(vec![1]),
                }),
                _ => None,
            },
        };
        ModelParams { config, tree }
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<BoundParams> {
        self.tree.try_map(&mut |td| g.param(td, requires_grad))
    }

    /// Total scalar parameter count; a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.tree.visit(&mut |_, td: &TensorData| n += td.numel());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.tree.visit(&mut |_, td: &TensorData| ok &= td.is_finite());
        ok
    }
}

// ── Forward computation ──────────────────────────────────────────────

/// Refined encoder memory plus the OCR alignment the copy channel needs.
pub struct Memory {
    /// [R+M, d] refined rows, regions first.
    pub rows: Tensor,
    pub region_count: usize,
    /// Tokens at positions `region_count..region_count+M`, in input order.
    pub ocr_tokens: Vec<String>,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.region_count + self.ocr_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder recurrent state.
#[derive(Clone, Copy)]
pub struct DecoderState {
    /// [1, d] hidden state.
    pub h: Tensor,
}

/// Everything one decoding step produces; the pointer head consumes
/// `a_t`, `c_t`, `h_t`, `x_t` and the generator distribution `p_vocab`.
pub struct DecoderStep {
    /// Attention distribution over the R+M memory positions.
    pub a_t: Tensor,
    /// Context vector [1, d].
    pub c_t: Tensor,
    /// Decoder hidden state [1, d].
    pub h_t: Tensor,
    /// Input embedding [1, d].
    pub x_t: Tensor,
    /// Generator distribution over the output head.
    pub p_vocab: Tensor,
}

/// Scaled dot-product attention: rows of `q` attend over `k`/`v` pairs.
/// Returns the attended values and the attention weights.
pub fn attend(g: &mut Graph, q: Tensor, k: Tensor, v: Tensor) -> Result<(Tensor, Tensor)> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    let vs = g.shape(v).to_vec();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::ShapeMismatch { op: "attend", left: qs, right: ks });
    }
    if vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::ShapeMismatch { op: "attend", left: ks, right: vs });
    }
    let dim = qs[1] as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / dim.sqrt());
    let alpha = g.softmax(scaled, 1)?;
    let attended = g.matmul(alpha, v)?;
    Ok((attended, alpha))
}

/// Attention-on-attention gate: an information vector and a sigmoid gate,
/// both linear in the query and the attention result, multiplied together.
pub fn aoa(g: &mut Graph, q: Tensor, v_hat: Tensor, p: &AoaParams<Tensor>) -> Result<Tensor> {
    let iq = g.matmul(q, p.wi_q)?;
    let iv = g.matmul(v_hat, p.wi_v)?;
    let i = g.add(iq, iv)?;
    let i = g.add_row(i, p.b_i)?;

    let gq = g.matmul(q, p.wg_q)?;
    let gv = g.matmul(v_hat, p.wg_v)?;
    let gate = g.add(gq, gv)?;
    let gate = g.add_row(gate, p.b_g)?;
    let gate = g.sigmoid(gate);

    g.hadamard(gate, i)
}

/// Project regions (and, for OCR-consuming variants, OCR embeddings) to the
/// model dimension and refine the joint sequence with the encoder stack.
pub fn encode(
    g: &mut Graph,
    bundle: &FeatureBundle,
    params: &BoundParams,
    config: &ModelConfig,
) -> Result<Memory> {
    let r = bundle.region_count();
    let flat: Vec<f64> = bundle.regions.iter().flatten().copied().collect();
    let regions = g.constant(flat, vec![r, bundle.region_dim()])?;
    let proj = g.matmul(regions, params.region_proj.w)?;
    let mut rows = g.add_row(proj, params.region_proj.b)?;

    let mut ocr_tokens = Vec::new();
    if config.variant != Variant::Baseline && !bundle.ocr.is_empty() {
        let ocr_proj = params.ocr_proj.as_ref().expect("OCR variant without ocr_proj");
        let m = bundle.ocr.len();
        let flat: Vec<f64> =
            bundle.ocr.iter().flat_map(|e| e.embedding.iter().copied()).collect();
        let emb = g.constant(flat, vec![m, bundle.ocr_dim().unwrap()])?;
        let proj = g.matmul(emb, ocr_proj.w)?;
        let proj = g.add_row(proj, ocr_proj.b)?;
        rows = g.concat_rows(rows, proj)?;
        ocr_tokens = bundle.ocr_tokens();
    }

    for layer in &params.encoder {
        let q = g.matmul(rows, layer.att_q)?;
        let k = g.matmul(rows, layer.att_k)?;
        let v = g.matmul(rows, layer.att_v)?;
        let (v_hat, _) = attend(g, q, k, v)?;
        let refined = aoa(g, rows, v_hat, &layer.aoa)?;
        let residual = g.add(rows, refined)?;
        let normed = g.layer_norm_rows(residual, 1e-6)?;
        let scaled = g.mul_row(normed, layer.ln_gain)?;
        rows = g.add_row(scaled, layer.ln_bias)?;
    }

    Ok(Memory { rows, region_count: r, ocr_tokens })
}

/// Fresh decoder state (zero hidden vector).
pub fn initial_state(g: &mut Graph, config: &ModelConfig) -> DecoderState {
    DecoderState { h: g.zeros(vec![1, config.d]) }
}

/// One decoding step under teacher forcing or generation: embed the previous
/// token, advance the recurrent cell, attend over memory, gate with AoA, and
/// project to the generator distribution.
pub fn decode_step(
    g: &mut Graph,
    state: DecoderState,
    prev_token_id: usize,
    memory: &Memory,
    params: &BoundParams,
    config: &ModelConfig,
) -> Result<(DecoderStep, DecoderState)> {
    if prev_token_id >= config.embed_rows() {
        return Err(Error::TokenOutOfRange { id: prev_token_id, fixed_size: config.embed_rows() });
    }
    let x = g.gather_rows(params.embedding, &[prev_token_id])?;
    let gru = &params.decoder.gru;
    let h = state.h;

    let z = {
        let a = g.matmul(x, gru.wz_x)?;
        let b = g.matmul(h, gru.wz_h)?;
        let s = g.add(a, b)?;
        let s = g.add_row(s, gru.b_z)?;
        g.sigmoid(s)
    };
    let r = {
        let a = g.matmul(x, gru.wr_x)?;
        let b = g.matmul(h, gru.wr_h)?;
        let s = g.add(a, b)?;
        let s = g.add_row(s, gru.b_r)?;
        g.sigmoid(s)
    };
    let h_cand = {
        let a = g.matmul(x, gru.wh_x)?;
        let gated = g.hadamard(r, h)?;
        let b = g.matmul(gated, gru.wh_h)?;
        let s = g.add(a, b)?;
        let s = g.add_row(s, gru.b_h)?;
        g.tanh(s)
    };
    let h_new = {
        let keep = g.affine(z, -1.0, 1.0);
        let old = g.hadamard(keep, h)?;
        let new = g.hadamard(z, h_cand)?;
        g.add(old, new)?
    };

    let q = g.matmul(h_new, params.decoder.att_q)?;
    let k = g.matmul(memory.rows, params.decoder.att_k)?;
    let v = g.matmul(memory.rows, params.decoder.att_v)?;
    let (c_t, alpha) = attend(g, q, k, v)?;
    let a_t = g.reshape(alpha, vec![memory.len()])?;

    let refined = aoa(g, h_new, c_t, &params.decoder.aoa)?;
    let logits = g.matmul(refined, params.decoder.out.w)?;
    let logits = g.add_row(logits, params.decoder.out.b)?;
    let p_mat = g.softmax(logits, 1)?;
    let p_vocab = g.reshape(p_mat, vec![config.output_dim()])?;

    Ok((
        DecoderStep { a_t, c_t, h_t: h_new, x_t: x, p_vocab },
        DecoderState { h: h_new },
    ))
}
