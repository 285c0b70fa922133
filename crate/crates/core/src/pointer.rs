//! Pointer-generator channel: the per-step generation probability, the copy
//! distribution over OCR tokens, and their mixture over the extended
//! vocabulary.
//!
//! Attention positions below `region_count` are image regions with no word
//! identity, so the copy term restricts attention to OCR positions and
//! renormalizes before mixing. Both mixture components are then proper
//! distributions and the output provably sums to 1. OCR positions whose token
//! never made the extended vocabulary are likewise excluded from the
//! renormalization; when none remain the channel signals `NoCopyChannel` and
//! the caller must force the generator path.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{DecoderStep, Memory, PointerParams};
use crate::vocab::ExtendedVocabulary;

/// Soft switch between generating and copying: a sigmoid over linear probes
/// of the context vector, the decoder hidden state, and the input embedding.
pub fn generation_probability(
    g: &mut Graph,
    step: &DecoderStep,
    params: &PointerParams<Tensor>,
) -> Result<Tensor> {
    let d = g.shape(step.c_t)[1];
    for w in [params.w_h, params.w_s, params.w_x] {
        if g.shape(w) != [d] {
            return Err(Error::ShapeMismatch {
                op: "generation_probability",
                left: g.shape(w).to_vec(),
                right: vec![d],
            });
        }
    }
    let wh = g.reshape(params.w_h, vec![d, 1])?;
    let ws = g.reshape(params.w_s, vec![d, 1])?;
    let wx = g.reshape(params.w_x, vec![d, 1])?;
    let th = g.matmul(step.c_t, wh)?;
    let ts = g.matmul(step.h_t, ws)?;
    let tx = g.matmul(step.x_t, wx)?;
    let sum = g.add(th, ts)?;
    let sum = g.add(sum, tx)?;
    let sum = g.reshape(sum, vec![1])?;
    let pre = g.add(sum, params.b_ptr)?;
    Ok(g.sigmoid(pre))
}

/// Copy distribution over the extended vocabulary: attention mass at OCR
/// positions, renormalized to sum to 1, scatter-added by token identity.
/// Positions holding the same token accumulate.
pub fn copy_distribution(
    g: &mut Graph,
    a_t: Tensor,
    memory: &Memory,
    ext: &ExtendedVocabulary,
) -> Result<Tensor> {
    let s = memory.len();
    if g.shape(a_t) != [s] {
        return Err(Error::ShapeMismatch {
            op: "copy_distribution",
            left: g.shape(a_t).to_vec(),
            right: vec![s],
        });
    }
    let mut positions = Vec::new();
    let mut ids = Vec::new();
    for (k, tok) in memory.ocr_tokens.iter().enumerate() {
        if let Some(id) = ext.id(tok) {
            positions.push(memory.region_count + k);
            ids.push(id);
        }
    }
    if positions.is_empty() {
        return Err(Error::NoCopyChannel);
    }
    let col = g.reshape(a_t, vec![s, 1])?;
    let picked = g.gather_rows(col, &positions)?;
    let mass = g.reshape(picked, vec![positions.len()])?;
    let total = g.sum(mass);
    let inv = g.recip(total);
    let renormed = g.mul_scalar(inv, mass)?;
    g.scatter_add(renormed, &ids, ext.len())
}

/// Mixture over the extended vocabulary:
/// `P(w) = p_gen * P_vocab(w) + (1 - p_gen) * copy(w)`,
/// with `P_vocab` zero-extended above the fixed boundary.
pub fn mix(
    g: &mut Graph,
    p_vocab: Tensor,
    copy_dist: Tensor,
    p_gen: Tensor,
    ext: &ExtendedVocabulary,
) -> Result<Tensor> {
    let pg = g.value(p_gen);
    if !(pg > 0.0 && pg < 1.0) {
        return Err(Error::PgenOutOfRange { value: pg });
    }
    if g.shape(p_vocab) != [ext.fixed_size()] {
        return Err(Error::ShapeMismatch {
            op: "mix",
            left: g.shape(p_vocab).to_vec(),
            right: vec![ext.fixed_size()],
        });
    }
    if g.shape(copy_dist) != [ext.len()] {
        return Err(Error::ShapeMismatch {
            op: "mix",
            left: g.shape(copy_dist).to_vec(),
            right: vec![ext.len()],
        });
    }
    let padded = pad_to_extended(g, p_vocab, ext)?;
    let gen_part = g.mul_scalar(p_gen, padded)?;
    let one_minus = g.affine(p_gen, -1.0, 1.0);
    let copy_part = g.mul_scalar(one_minus, copy_dist)?;
    g.add(gen_part, copy_part)
}

/// Fixed-vocabulary distribution zero-extended over the OCR ids; the mixture
/// when the copy channel is absent and `p_gen` is forced to 1.
pub fn pad_to_extended(g: &mut Graph, p_vocab: Tensor, ext: &ExtendedVocabulary) -> Result<Tensor> {
    if g.shape(p_vocab) != [ext.fixed_size()] {
        return Err(Error::ShapeMismatch {
            op: "pad_to_extended",
            left: g.shape(p_vocab).to_vec(),
            right: vec![ext.fixed_size()],
        });
    }
    if ext.len() == ext.fixed_size() {
        return Ok(p_vocab);
    }
    let zeros = g.zeros(vec![ext.len() - ext.fixed_size()]);
    g.concat(&[p_vocab, zeros])
}

/// Full distribution over the extended vocabulary for one decoder step,
/// routed by variant. Returns the per-step `p_gen` for pointer diagnostics
/// (forced to 1 for images without a copy channel).
pub fn step_distribution(
    g: &mut Graph,
    step: &DecoderStep,
    memory: &Memory,
    params: &crate::model::BoundParams,
    config: &crate::model::ModelConfig,
    ext: &ExtendedVocabulary,
) -> Result<(Tensor, Option<f64>)> {
    match config.variant {
        crate::model::Variant::Baseline => Ok((pad_to_extended(g, step.p_vocab, ext)?, None)),
        crate::model::Variant::Extended => {
            if g.shape(step.p_vocab) != [ext.len()] {
                return Err(Error::ShapeMismatch {
                    op: "step_distribution",
                    left: g.shape(step.p_vocab).to_vec(),
                    right: vec![ext.len()],
                });
            }
            Ok((step.p_vocab, None))
        }
        crate::model::Variant::Pointer => {
            let ptr = params.pointer.as_ref().ok_or_else(|| {
                Error::Checkpoint("pointer variant without pointer parameters".into())
            })?;
            match copy_distribution(g, step.a_t, memory, ext) {
                Ok(copy) => {
                    let p_gen = generation_probability(g, step, ptr)?;
                    let p = mix(g, step.p_vocab, copy, p_gen, ext)?;
                    Ok((p, Some(g.value(p_gen))))
                }
                Err(Error::NoCopyChannel) => {
                    Ok((pad_to_extended(g, step.p_vocab, ext)?, Some(1.0)))
                }
                Err(e) => Err(e),
            }
        }
    }
}
