//! The referential game: sender message generation (image- or
//! caption-conditioned), inverse-MSE receiver scoring, selection
//! cross-entropy, KL anti-drift regularization, and supervised grounding.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constrained::{apply_mask, generate_gumbel, GenerationConfig, LogitMask, Message};
use crate::error::{EcftError, Result};
use crate::model::{
    adapt_image, add_positions, aggregate_receiver, decode_teacher_forced, encode_tokens,
    encoder_body, sequence_ce, AggregatorKind, Model, ReferenceLM, NEG_INF,
};
use crate::optim::Adam;
use crate::synth_world::{mix_seed, rng_for, ImageRecord};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};
use crate::vocab::{LangId, Vocabulary, CLS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EcVariant {
    I2i,
    T2i,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFn {
    Reciprocal,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    SenderToReference,
    ReferenceToSender,
}

pub const MSE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcStageConfig {
    pub variant: EcVariant,
    pub num_candidates: usize,
    pub lambda_selection: f64,
    pub lambda_kl: f64,
    pub mask_p: f64,
    pub tau: f64,
    pub max_len: usize,
    pub score_fn: ScoreFn,
    pub kl_direction: KlDirection,
    pub aggregator: AggregatorKind,
    pub batch_size: usize,
}

impl EcStageConfig {
    /// I2I defaults: C=16, λ_sel=4.0, λ_kl=0.125, p=0.95, CLS aggregator.
    pub fn i2i() -> Self {
        EcStageConfig {
            variant: EcVariant::I2i,
            num_candidates: 16,
            lambda_selection: 4.0,
            lambda_kl: 0.125,
            mask_p: 0.95,
            tau: 1.0,
            max_len: 32,
            score_fn: ScoreFn::Reciprocal,
            kl_direction: KlDirection::SenderToReference,
            aggregator: AggregatorKind::ClsToken,
            batch_size: 12,
        }
    }

    /// T2I overrides: grounding C=8, λ_sel=8.0, recurrent aggregator; EC
    /// p=0.96, λ_kl=0.0625.
    pub fn t2i() -> Self {
        EcStageConfig {
            variant: EcVariant::T2i,
            num_candidates: 8,
            lambda_selection: 8.0,
            lambda_kl: 0.0625,
            mask_p: 0.96,
            tau: 1.0,
            max_len: 32,
            score_fn: ScoreFn::Reciprocal,
            kl_direction: KlDirection::SenderToReference,
            aggregator: AggregatorKind::Recurrent,
            batch_size: 12,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GameLosses {
    pub selection_ce: f64,
    pub kl_reg: f64,
    pub caption_ce: f64,
    pub total: f64,
    pub lambda_selection: f64,
    pub lambda_kl: f64,
    pub receiver_accuracy: f64,
    pub message_length_mean: f64,
    pub caption_equality_rate: f64,
}

#[derive(Debug, Clone)]
pub enum SenderInput {
    Features(Vec<f64>),
    Caption(Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct EcExample {
    pub sender_input: SenderInput,
    pub candidates: Vec<Vec<f64>>,
    pub target_index: usize,
    pub target_lang: LangId,
    /// private Gumbel-noise stream for this example
    pub noise_seed: u64,
}

#[derive(Debug, Clone)]
pub struct GroundingExample {
    pub features: Vec<f64>,
    pub caption: Vec<u32>,
    pub candidates: Vec<Vec<f64>>,
    pub target_index: usize,
}

/// Uniform distractor sampling without replacement; the target slot is
/// uniformly random among the C candidates.
fn sample_candidates(
    records: &[ImageRecord],
    target: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, usize) {
    assert!(c >= 1 && records.len() >= c);
    let mut others: Vec<usize> = (0..records.len()).filter(|&i| i != target).collect();
    others.shuffle(rng);
    let mut idx: Vec<usize> = others.into_iter().take(c - 1).collect();
    idx.push(target);
    idx.shuffle(rng);
    let pos = idx.iter().position(|&i| i == target).unwrap();
    (idx.into_iter().map(|i| records[i].features.clone()).collect(), pos)
}

pub fn make_grounding_batch(
    records: &[ImageRecord],
    batch_size: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<GroundingExample> {
    (0..batch_size)
        .map(|_| {
            let t = rng.gen_range(0..records.len());
            let (candidates, target_index) = sample_candidates(records, t, c, rng);
            GroundingExample {
                features: records[t].features.clone(),
                caption: records[t].gold_caption.clone(),
                candidates,
                target_index,
            }
        })
        .collect()
}

/// Target language drawn uniformly at random per example.
pub fn make_ec_batch(
    records: &[ImageRecord],
    batch_size: usize,
    c: usize,
    variant: EcVariant,
    num_languages: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<EcExample> {
    (0..batch_size)
        .map(|_| {
            let t = rng.gen_range(0..records.len());
            let (candidates, target_index) = sample_candidates(records, t, c, rng);
            let sender_input = match variant {
                EcVariant::I2i => SenderInput::Features(records[t].features.clone()),
                EcVariant::T2i => SenderInput::Caption(records[t].gold_caption.clone()),
            };
            EcExample {
                sender_input,
                candidates,
                target_index,
                target_lang: LangId(rng.gen_range(0..num_languages) as u8),
                noise_seed: rng.gen(),
            }
        })
        .collect()
}

/// Emergent message for one example. I2I conditions the decoder on the
/// adapted image; T2I on the encoded gold caption (high-resource language).
pub fn sender_generate(
    tape: &mut Tape,
    model: &Model,
    input: &SenderInput,
    target_lang: LangId,
    caption_lang: LangId,
    vocab: &Vocabulary,
    gen: &GenerationConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Message> {
    let memory = match input {
        SenderInput::Features(f) => {
            let fv = tape.input(Tensor::row_vec(f.clone()));
            adapt_image(tape, model, fv)
        }
        SenderInput::Caption(c) => encode_tokens(tape, model, c, vocab.control_token(caption_lang), None),
    };
    generate_gumbel(
        tape,
        model,
        memory,
        target_lang,
        vocab.control_token(target_lang),
        gen,
        rng,
    )
}

/// Receiver encoding of a gradient-carrying message:
/// `[CLS?] [control] st-embeds...` through the encoder.
pub fn receiver_encode_message(
    tape: &mut Tape,
    model: &Model,
    msg: &Message,
    vocab: &Vocabulary,
    aggregator: AggregatorKind,
) -> Var {
    let mut rows = Vec::with_capacity(msg.embeds.len() + 2);
    if aggregator == AggregatorKind::ClsToken {
        rows.push(tape.embed(model.ids.embed, &[CLS]));
    }
    rows.push(tape.embed(model.ids.embed, &[vocab.control_token(msg.lang)]));
    rows.extend_from_slice(&msg.embeds);
    let stacked = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
    let x = add_positions(tape, model, stacked);
    encoder_body(tape, model, x)
}

/// Plain-token receiver encoding (grounding path).
pub fn receiver_encode_tokens(
    tape: &mut Tape,
    model: &Model,
    tokens: &[u32],
    control: u32,
    aggregator: AggregatorKind,
) -> Var {
    let cls = (aggregator == AggregatorKind::ClsToken).then_some(CLS);
    encode_tokens(tape, model, tokens, control, cls)
}

/// Scores each candidate against the receiver representation:
/// reciprocal 1/(MSE+ε) or negative MSE.
pub fn receiver_score(
    tape: &mut Tape,
    model: &Model,
    hidden: Var,
    candidates: &[Vec<f64>],
    aggregator: AggregatorKind,
    score_fn: ScoreFn,
) -> Result<Vec<Var>> {
    let r = aggregate_receiver(tape, model, hidden, aggregator);
    let (_, dim) = tape.shape(r);
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.len() != dim {
            return Err(EcftError::DimensionMismatch {
                expected: dim,
                got: c.len(),
            });
        }
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        let diff = tape.add_const(r, &neg);
        let sq = tape.mul(diff, diff);
        let mse = tape.mean_all(sq);
        let score = match score_fn {
            ScoreFn::Reciprocal => tape.recip(mse, MSE_EPS),
            ScoreFn::Negative => tape.affine(mse, -1.0, 0.0),
        };
        scores.push(score);
    }
    Ok(scores)
}

/// Cross-entropy of the softmax over candidate scores at `target_index`.
pub fn selection_loss(tape: &mut Tape, scores: &[Var], target_index: usize) -> Result<Var> {
    if target_index >= scores.len() {
        return Err(EcftError::IndexOutOfRange {
            index: target_index,
            count: scores.len(),
        });
    }
    let row = tape.concat_cols(scores);
    let lp = tape.row_log_softmax(row);
    let picked = tape.gather_elems(lp, &[(0, target_index)]);
    let s = tape.sum_all(picked);
    Ok(tape.affine(s, -1.0, 0.0))
}

/// Mean per-position KL between the sender's masked step distributions and
/// the frozen reference, both renormalized over the mask's allowed set.
pub fn kl_regularizer(
    tape: &mut Tape,
    msg: &Message,
    reference: &ReferenceLM,
    mask: &LogitMask,
    control: u32,
    direction: KlDirection,
) -> Result<Var> {
    if msg.step_logits.is_empty() {
        return Err(EcftError::EmptyInput("message has no steps"));
    }
    let mut terms = Vec::with_capacity(msg.step_logits.len());
    for (t, &sender_logits) in msg.step_logits.iter().enumerate() {
        let prefix = &msg.hard_tokens[..t.min(msg.hard_tokens.len())];
        let mut ref_logits = reference.next_logits(prefix, control);
        apply_mask(&mut ref_logits, mask);
        let lse = crate::tensor::log_sum_exp(&ref_logits);
        // log-reference over the allowed set; zeroed where p_sender = 0 so
        // the 0·(−inf) convention holds
        let log_q: Vec<f64> = ref_logits
            .iter()
            .map(|&l| if l <= NEG_INF / 2.0 { 0.0 } else { l - lse })
            .collect();
        let q: Vec<f64> = ref_logits
            .iter()
            .map(|&l| if l <= NEG_INF / 2.0 { 0.0 } else { (l - lse).exp() })
            .collect();
        let p = tape.row_softmax(sender_logits);
        let log_p = tape.row_log_softmax(sender_logits);
        let term = match direction {
            KlDirection::SenderToReference => {
                // Σ p·log p − Σ p·log q
                let plogp = tape.mul(p, log_p);
                let e1 = tape.sum_all(plogp);
                let plogq = tape.scale_const(p, log_q);
                let e2 = tape.sum_all(plogq);
                let neg = tape.affine(e2, -1.0, 0.0);
                tape.add(e1, neg)
            }
            KlDirection::ReferenceToSender => {
                // Σ q·log q − Σ q·log p
                let qlogq: f64 = q.iter().zip(log_q.iter()).map(|(a, b)| a * b).sum();
                let qlogp = tape.scale_const(log_p, q.clone());
                let e = tape.sum_all(qlogp);
                tape.affine(e, -1.0, qlogq)
            }
        };
        terms.push(term);
    }
    let all = tape.concat_cols(&terms);
    Ok(tape.mean_all(all))
}

struct PerExample {
    grads: Vec<f64>,
    selection_ce: f64,
    kl_reg: f64,
    caption_ce: f64,
    total: f64,
    correct: bool,
    msg_len: usize,
    caption_equal: bool,
}

fn reduce(model: &Model, per: Vec<PerExample>, cfg: &EcStageConfig) -> (Vec<f64>, GameLosses) {
    let n = per.len() as f64;
    let mut grad = vec![0.0; model.store.len()];
    let mut out = GameLosses {
        lambda_selection: cfg.lambda_selection,
        lambda_kl: cfg.lambda_kl,
        ..GameLosses::default()
    };
    for p in &per {
        for (a, b) in grad.iter_mut().zip(p.grads.iter()) {
            *a += b / n;
        }
        out.selection_ce += p.selection_ce / n;
        out.kl_reg += p.kl_reg / n;
        out.caption_ce += p.caption_ce / n;
        out.total += p.total / n;
        out.receiver_accuracy += if p.correct { 1.0 } else { 0.0 } / n;
        out.message_length_mean += p.msg_len as f64 / n;
        out.caption_equality_rate += if p.caption_equal { 1.0 } else { 0.0 } / n;
    }
    (grad, out)
}

/// Supervised grounding: caption generation + weighted image selection.
/// One optimizer step.
pub fn grounding_step(
    model: &mut Model,
    vocab: &Vocabulary,
    batch: &[GroundingExample],
    caption_lang: LangId,
    cfg: &EcStageConfig,
    opt: &mut Adam,
) -> Result<GameLosses> {
    for ex in batch {
        for &t in &ex.caption {
            if !vocab.in_inventory(t, caption_lang) {
                return Err(EcftError::OutOfInventory(t));
            }
        }
    }
    let control = vocab.control_token(caption_lang);
    let per: Vec<Result<PerExample>> = batch
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(&model.store);
            // caption generation from the stage's sender conditioning
            let memory = match cfg.variant {
                EcVariant::I2i => {
                    let fv = tape.input(Tensor::row_vec(ex.features.clone()));
                    adapt_image(&mut tape, model, fv)
                }
                EcVariant::T2i => encode_tokens(&mut tape, model, &ex.caption, control, None),
            };
            let logits = decode_teacher_forced(&mut tape, model, memory, &ex.caption, control);
            let caption_ce = sequence_ce(&mut tape, logits, &ex.caption, EOS);
            // receiver picks the image from the gold caption
            let hidden = receiver_encode_tokens(&mut tape, model, &ex.caption, control, cfg.aggregator);
            let scores = receiver_score(&mut tape, model, hidden, &ex.candidates, cfg.aggregator, cfg.score_fn)?;
            let sel = selection_loss(&mut tape, &scores, ex.target_index)?;
            let sel_w = tape.affine(sel, cfg.lambda_selection, 0.0);
            let total = tape.add(caption_ce, sel_w);
            let grads = tape.backward(total);
            let score_vals: Vec<f64> = scores.iter().map(|&s| tape.value(s).data[0]).collect();
            Ok(PerExample {
                grads: grads.params,
                selection_ce: tape.value(sel).data[0],
                kl_reg: 0.0,
                caption_ce: tape.value(caption_ce).data[0],
                total: tape.value(total).data[0],
                correct: argmax(&score_vals) == ex.target_index,
                msg_len: ex.caption.len(),
                caption_equal: true,
            })
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let (mut grad, losses) = reduce(model, per, cfg);
    opt.apply(&mut model.store.data, &mut grad);
    Ok(losses)
}

/// One EC game step: emergent message, receiver selection, KL
/// regularization, optimizer update.
pub fn ec_step(
    model: &mut Model,
    vocab: &Vocabulary,
    batch: &[EcExample],
    reference: &ReferenceLM,
    masks: &[LogitMask],
    caption_lang: LangId,
    cfg: &EcStageConfig,
    opt: &mut Adam,
) -> Result<GameLosses> {
    let per: Vec<Result<PerExample>> = batch
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(&model.store);
            let mask = masks
                .get(ex.target_lang.0 as usize)
                .ok_or_else(|| EcftError::UnknownLanguage(format!("lang {}", ex.target_lang.0)))?;
            let mut gen = GenerationConfig::ec(Some(mask.clone()));
            gen.tau = cfg.tau;
            gen.max_len = cfg.max_len;
            gen.hard_forbid = (0..vocab.size() as u32)
                .filter(|&t| vocab.is_special(t) && t != EOS)
                .collect();
            let mut rng = rng_for(ex.noise_seed, 0x9cb1);
            let msg = sender_generate(
                &mut tape,
                model,
                &ex.sender_input,
                ex.target_lang,
                caption_lang,
                vocab,
                &gen,
                Some(&mut rng),
            )?;
            for &t in &msg.hard_tokens {
                debug_assert!(mask.allowed[t as usize]);
            }
            let hidden = receiver_encode_message(&mut tape, model, &msg, vocab, cfg.aggregator);
            let scores = receiver_score(&mut tape, model, hidden, &ex.candidates, cfg.aggregator, cfg.score_fn)?;
            let sel = selection_loss(&mut tape, &scores, ex.target_index)?;
            let control = vocab.control_token(ex.target_lang);
            let kl = kl_regularizer(&mut tape, &msg, reference, mask, control, cfg.kl_direction)?;
            let kl_w = tape.affine(kl, cfg.lambda_kl, 0.0);
            let total = tape.add(sel, kl_w);
            let grads = tape.backward(total);
            let score_vals: Vec<f64> = scores.iter().map(|&s| tape.value(s).data[0]).collect();
            let caption_equal = match &ex.sender_input {
                SenderInput::Caption(c) => *c == msg.hard_tokens,
                SenderInput::Features(_) => false,
            };
            Ok(PerExample {
                grads: grads.params,
                selection_ce: tape.value(sel).data[0],
                kl_reg: tape.value(kl).data[0],
                caption_ce: 0.0,
                total: tape.value(total).data[0],
                correct: argmax(&score_vals) == ex.target_index,
                msg_len: msg.hard_tokens.len(),
                caption_equal,
            })
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let (mut grad, losses) = reduce(model, per, cfg);
    opt.apply(&mut model.store.data, &mut grad);
    Ok(losses)
}

/// Held-out receiver accuracy from gold captions (no updates).
pub fn grounding_eval_accuracy(
    model: &Model,
    vocab: &Vocabulary,
    batch: &[GroundingExample],
    caption_lang: LangId,
    cfg: &EcStageConfig,
) -> f64 {
    let control = vocab.control_token(caption_lang);
    let correct: usize = batch
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(&model.store);
            let hidden = receiver_encode_tokens(&mut tape, model, &ex.caption, control, cfg.aggregator);
            let scores =
                receiver_score(&mut tape, model, hidden, &ex.candidates, cfg.aggregator, cfg.score_fn).unwrap();
            let vals: Vec<f64> = scores.iter().map(|&s| tape.value(s).data[0]).collect();
            usize::from(argmax(&vals) == ex.target_index)
        })
        .sum();
    correct as f64 / batch.len() as f64
}

/// Derives the per-example noise seed stream for a step (stable across
/// re-runs and resume).
pub fn ec_step_seed(stage_seed: u64, step: usize) -> u64 {
    mix_seed(stage_seed, 0xec00 + step as u64)
}
