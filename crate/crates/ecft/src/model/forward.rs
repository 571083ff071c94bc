//! Differentiable (tape) forward passes: encoder, decoder, image adapter,
//! and receiver aggregation. The no-grad twin lives in `infer.rs`; the two
//! are cross-checked by tests.

use super::{AttnIds, GruIds, LnIds, Model};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NEG_INF: f64 = -1e30;

fn ln(tape: &mut Tape, x: Var, ids: &LnIds) -> Var {
    let n = tape.layer_norm(x);
    let g = tape.param(ids.g);
    let b = tape.param(ids.b);
    let scaled = tape.mul_row(n, g);
    tape.add_row(scaled, b)
}

fn linear(tape: &mut Tape, x: Var, w: crate::params::ParamId, b: crate::params::ParamId) -> Var {
    let wv = tape.param(w);
    let bv = tape.param(b);
    let y = tape.matmul(x, wv);
    tape.add_row(y, bv)
}

/// Multi-head attention. `mask` is an additive (Lq×Lk) bias or `None`.
fn attention(
    tape: &mut Tape,
    m: &Model,
    q_in: Var,
    kv_in: Var,
    ids: &AttnIds,
    mask: Option<&[f64]>,
) -> Var {
    let d = m.cfg.d_model;
    let heads = m.cfg.heads;
    let dk = d / heads;
    let q = linear(tape, q_in, ids.wq, ids.bq);
    let k = linear(tape, kv_in, ids.wk, ids.bk);
    let v = linear(tape, kv_in, ids.wv, ids.bv);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, (h + 1) * dk);
        let kh = tape.slice_cols(k, h * dk, (h + 1) * dk);
        let vh = tape.slice_cols(v, h * dk, (h + 1) * dk);
        let scores = tape.matmul_tb(qh, kh);
        let scores = tape.affine(scores, scale, 0.0);
        let scores = match mask {
            Some(mvals) => tape.add_const(scores, mvals),
            None => scores,
        };
        let probs = tape.row_softmax(scores);
        head_outs.push(tape.matmul(probs, vh));
    }
    let cat = tape.concat_cols(&head_outs);
    linear(tape, cat, ids.wo, ids.bo)
}

fn feed_forward(tape: &mut Tape, x: Var, ids: &super::FfIds) -> Var {
    let h = linear(tape, x, ids.w1, ids.b1);
    let h = tape.relu(h);
    linear(tape, h, ids.w2, ids.b2)
}

fn causal_mask(len: usize) -> Vec<f64> {
    let mut mask = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            mask[i * len + j] = NEG_INF;
        }
    }
    mask
}

/// Pre-LN encoder stack over already-embedded inputs (L×d).
pub fn encoder_body(tape: &mut Tape, m: &Model, mut x: Var) -> Var {
    for layer in &m.ids.enc {
        let a_in = ln(tape, x, &layer.ln1);
        let a = attention(tape, m, a_in, a_in, &layer.attn, None);
        x = tape.add(x, a);
        let f_in = ln(tape, x, &layer.ln2);
        let f = feed_forward(tape, f_in, &layer.ff);
        x = tape.add(x, f);
    }
    ln(tape, x, &m.ids.enc_ln_f)
}

/// Pre-LN decoder stack with causal self-attention and cross-attention
/// over `memory` (which may be encoder states or adapted image states).
pub fn decoder_body(tape: &mut Tape, m: &Model, mut x: Var, memory: Var) -> Var {
    let (len, _) = tape.shape(x);
    let mask = causal_mask(len);
    for layer in &m.ids.dec {
        let a_in = ln(tape, x, &layer.ln1);
        let a = attention(tape, m, a_in, a_in, &layer.attn, Some(&mask));
        x = tape.add(x, a);
        let x_in = ln(tape, x, &layer.lnx);
        let xa = attention(tape, m, x_in, memory, &layer.xattn, None);
        x = tape.add(x, xa);
        let f_in = ln(tape, x, &layer.ln2);
        let f = feed_forward(tape, f_in, &layer.ff);
        x = tape.add(x, f);
    }
    ln(tape, x, &m.ids.dec_ln_f)
}

/// Token ids -> embeddings + positional encoding.
pub fn embed_ids(tape: &mut Tape, m: &Model, ids: &[u32]) -> Var {
    let e = tape.embed(m.ids.embed, ids);
    let pe = super::positional_encoding(ids.len(), m.cfg.d_model);
    tape.add_const(e, &pe)
}

/// Add positional encoding to externally assembled embedding rows.
pub fn add_positions(tape: &mut Tape, m: &Model, x: Var) -> Var {
    let (len, _) = tape.shape(x);
    let pe = super::positional_encoding(len, m.cfg.d_model);
    tape.add_const(x, &pe)
}

/// Encode `[CLS?] [control] tokens...` and return the hidden sequence.
pub fn encode_tokens(
    tape: &mut Tape,
    m: &Model,
    tokens: &[u32],
    control: u32,
    cls: Option<u32>,
) -> Var {
    let mut ids: Vec<u32> = Vec::with_capacity(tokens.len() + 2);
    if let Some(c) = cls {
        ids.push(c);
    }
    ids.push(control);
    ids.extend_from_slice(tokens);
    let x = embed_ids(tape, m, &ids);
    encoder_body(tape, m, x)
}

/// Hidden states -> vocabulary logits through the shared embedding table.
pub fn output_logits(tape: &mut Tape, m: &Model, hidden: Var) -> Var {
    let e = tape.param(m.ids.embed);
    tape.matmul_tb(hidden, e)
}

/// Teacher-forced decode: input `[control] target...`, logits for
/// `(len(target)+1)` positions; position t sees only target[..t].
pub fn decode_teacher_forced(
    tape: &mut Tape,
    m: &Model,
    memory: Var,
    target: &[u32],
    control: u32,
) -> Var {
    let (mem_len, _) = tape.shape(memory);
    assert!(mem_len > 0, "decoder requires non-empty memory");
    let mut ids = Vec::with_capacity(target.len() + 1);
    ids.push(control);
    ids.extend_from_slice(target);
    let x = embed_ids(tape, m, &ids);
    let h = decoder_body(tape, m, x, memory);
    output_logits(tape, m, h)
}

/// Mean cross-entropy of teacher-forced logits against `target ++ eos`.
pub fn sequence_ce(tape: &mut Tape, logits: Var, target: &[u32], eos: u32) -> Var {
    let ls = tape.row_log_softmax(logits);
    let mut picks = Vec::with_capacity(target.len() + 1);
    for (t, &tok) in target.iter().enumerate() {
        picks.push((t, tok as usize));
    }
    picks.push((target.len(), eos as usize));
    let gathered = tape.gather_elems(ls, &picks);
    let mean = tape.mean_all(gathered);
    tape.affine(mean, -1.0, 0.0)
}

fn gru_step(tape: &mut Tape, ids: &GruIds, x: Var, h: Var) -> Var {
    let xz = linear(tape, x, ids.wz, ids.bz);
    let hz = {
        let u = tape.param(ids.uz);
        tape.matmul(h, u)
    };
    let z_pre = tape.add(xz, hz);
    let z = tape.sigmoid(z_pre);

    let xr = linear(tape, x, ids.wr, ids.br);
    let hr = {
        let u = tape.param(ids.ur);
        tape.matmul(h, u)
    };
    let r_pre = tape.add(xr, hr);
    let r = tape.sigmoid(r_pre);

    let xh = linear(tape, x, ids.wh, ids.bh);
    let rh = tape.mul(r, h);
    let hh = {
        let u = tape.param(ids.uh);
        tape.matmul(rh, u)
    };
    let cand_pre = tape.add(xh, hh);
    let cand = tape.tanh(cand_pre);

    // h' = (1 - z) * h + z * cand
    let zh = tape.mul(z, h);
    let keep = {
        let neg = tape.affine(zh, -1.0, 0.0);
        tape.add(h, neg)
    };
    let zc = tape.mul(z, cand);
    tape.add(keep, zc)
}

/// Unroll the static feature vector into a K×d memory sequence. The
/// feature vector (projected) is the initial hidden state; each step
/// consumes a learned constant input.
pub fn adapt_image(tape: &mut Tape, m: &Model, features: Var) -> Var {
    let (r, c) = tape.shape(features);
    assert_eq!(r, 1);
    assert_eq!(
        c, m.cfg.feature_dim,
        "feature vector length does not match feature_dim"
    );
    let proj = linear(tape, features, m.ids.adapter_in_w, m.ids.adapter_in_b);
    let mut h = tape.tanh(proj);
    let x = tape.param(m.ids.adapter_step_in);
    let mut states = Vec::with_capacity(m.cfg.adapter_len);
    for _ in 0..m.cfg.adapter_len {
        h = gru_step(tape, &m.ids.adapter_gru, x, h);
        states.push(h);
    }
    tape.concat_rows(&states)
}

/// Receiver aggregation: hidden states -> feature-space vector.
pub fn aggregate_receiver(
    tape: &mut Tape,
    m: &Model,
    hidden: Var,
    variant: super::AggregatorKind,
) -> Var {
    match variant {
        super::AggregatorKind::ClsToken => {
            let cls_state = tape.slice_rows(hidden, 0, 1);
            linear(tape, cls_state, m.ids.agg_cls_proj_w, m.ids.agg_cls_proj_b)
        }
        super::AggregatorKind::Recurrent => {
            let (len, d) = tape.shape(hidden);
            let mut h = tape.input(Tensor::zeros(1, d));
            for t in 0..len {
                let x = tape.slice_rows(hidden, t, t + 1);
                h = gru_step(tape, &m.ids.agg_gru, x, h);
            }
            linear(tape, h, m.ids.agg_rnn_proj_w, m.ids.agg_rnn_proj_b)
        }
    }
}
