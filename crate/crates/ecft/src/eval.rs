//! Held-out evaluation: oracle-referenced BLEU, receiver communication
//! accuracy, and the language-drift metric. All read-only on parameters.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bleu::corpus_bleu;
use crate::constrained::{apply_mask, beam_decode, DecoderStepModel, GenerationConfig, LogitMask};
use crate::ec::{EcStageConfig, EcVariant, ScoreFn};
use crate::error::{EcftError, Result};
use crate::model::{
    aggregate_receiver, Infer, Model, ReferenceLM, NEG_INF,
};
use crate::synth_world::{rng_for, Direction, EvalPair, ImageRecord};
use crate::tape::Tape;
use crate::tensor::{argmax, log_sum_exp, softmax_inplace, Tensor};
use crate::vocab::{LangId, Vocabulary, CLS, EOS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub direction: Direction,
    pub bleu: f64,
    pub n_examples: usize,
    pub num_beams: usize,
    pub mask_p: Option<f64>,
}

/// Translate every held-out pair with masked beam search and score the
/// corpus against the oracle references.
pub fn evaluate_translation(
    model: &Model,
    vocab: &Vocabulary,
    pairs: &[EvalPair],
    direction: Direction,
    lang_src: LangId,
    lang_tgt: LangId,
    gen: &GenerationConfig,
) -> Result<EvalResult> {
    let selected: Vec<&EvalPair> = pairs.iter().filter(|p| p.direction == direction).collect();
    if selected.is_empty() {
        return Err(EcftError::EmptyInput("eval set"));
    }
    let before = model.store.checksum();
    let hyps: Vec<Vec<u32>> = selected
        .par_iter()
        .map(|p| {
            let infer = Infer::new(model);
            let memory = infer.encode(&p.src_tokens, vocab.control_token(lang_src), None);
            let step_model = DecoderStepModel::new(model, &memory);
            beam_decode(&step_model, vocab.control_token(lang_tgt), gen)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<Vec<u32>> = selected.iter().map(|p| p.ref_tokens.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs)?;
    assert_eq!(model.store.checksum(), before, "evaluation mutated parameters");
    Ok(EvalResult {
        direction,
        bleu,
        n_examples: selected.len(),
        num_beams: gen.num_beams,
        mask_p: gen.mask.as_ref().map(|m| m.threshold_p),
    })
}

/// Fraction of held-out games the receiver wins with greedy (noise-free)
/// messages.
#[allow(clippy::too_many_arguments)]
pub fn communication_accuracy(
    model: &Model,
    vocab: &Vocabulary,
    records: &[ImageRecord],
    masks: &[LogitMask],
    caption_lang: LangId,
    cfg: &EcStageConfig,
    n_trials: usize,
    seed: u64,
) -> Result<f64> {
    if cfg.num_candidates > records.len() {
        return Err(EcftError::WorldExhausted {
            requested: cfg.num_candidates,
            capacity: records.len(),
        });
    }
    let mut rng = rng_for(seed, 0xacc);
    let trials: Vec<(usize, Vec<Vec<f64>>, usize, LangId)> = (0..n_trials)
        .map(|_| {
            let t = rng.gen_range(0..records.len());
            let mut others: Vec<usize> = (0..records.len()).filter(|&i| i != t).collect();
            use rand::seq::SliceRandom;
            others.shuffle(&mut rng);
            let mut idx: Vec<usize> = others.into_iter().take(cfg.num_candidates - 1).collect();
            idx.push(t);
            idx.shuffle(&mut rng);
            let pos = idx.iter().position(|&i| i == t).unwrap();
            let cands = idx.into_iter().map(|i| records[i].features.clone()).collect();
            let lang = LangId(rng.gen_range(0..vocab.num_languages()) as u8);
            (t, cands, pos, lang)
        })
        .collect();
    let correct: usize = trials
        .par_iter()
        .map(|(t, cands, pos, lang)| {
            let infer = Infer::new(model);
            let rec = &records[*t];
            let memory = match cfg.variant {
                EcVariant::I2i => infer.adapt_image(&rec.features),
                EcVariant::T2i => infer.encode(&rec.gold_caption, vocab.control_token(caption_lang), None),
            };
            let mut gen = GenerationConfig::ec(masks.get(lang.0 as usize).cloned());
            gen.max_len = cfg.max_len;
            gen.num_beams = 1;
            gen.hard_forbid = (0..vocab.size() as u32)
                .filter(|&tk| vocab.is_special(tk) && tk != EOS)
                .collect();
            let step_model = DecoderStepModel::new(model, &memory);
            let msg = crate::constrained::greedy_decode(&step_model, vocab.control_token(*lang), &gen)
                .unwrap_or_default();
            // receiver encodes the hard message tokens
            let mut ids = Vec::with_capacity(msg.len() + 2);
            if cfg.aggregator == crate::model::AggregatorKind::ClsToken {
                ids.push(CLS);
            }
            ids.push(vocab.control_token(*lang));
            ids.extend_from_slice(&msg);
            let hidden = {
                let x = infer.embed_rows(&ids);
                infer.encoder_body(x)
            };
            let r = infer.aggregate_receiver(&hidden, cfg.aggregator);
            let scores: Vec<f64> = cands
                .iter()
                .map(|c| {
                    let mse: f64 =
                        r.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r.len() as f64;
                    match cfg.score_fn {
                        ScoreFn::Reciprocal => 1.0 / (mse + crate::ec::MSE_EPS),
                        ScoreFn::Negative => -mse,
                    }
                })
                .collect();
            usize::from(argmax(&scores) == *pos)
        })
        .sum();
    Ok(correct as f64 / n_trials as f64)
}

/// Mean per-token KL(sender ‖ reference) over greedy continuations of the
/// prompt set, both distributions renormalized over the mask's allowed set.
pub fn drift_metric(
    model: &Model,
    vocab: &Vocabulary,
    reference: &ReferenceLM,
    prompts: &[(Vec<f64>, LangId)],
    masks: &[LogitMask],
    max_len: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(EcftError::EmptyInput("drift prompts"));
    }
    let per: Vec<(f64, usize)> = prompts
        .par_iter()
        .map(|(features, lang)| {
            let infer = Infer::new(model);
            let memory = infer.adapt_image(features);
            let control = vocab.control_token(*lang);
            let mask = &masks[lang.0 as usize];
            let forbid: Vec<u32> = (0..vocab.size() as u32)
                .filter(|&t| vocab.is_special(t) && t != EOS)
                .collect();
            let mut st = infer.start(&memory);
            let mut logits = infer.step(&mut st, control);
            let mut prefix: Vec<u32> = Vec::new();
            let mut total = 0.0;
            let mut count = 0usize;
            for _ in 0..max_len {
                apply_mask(&mut logits, mask);
                for &t in &forbid {
                    logits[t as usize] = NEG_INF;
                }
                let mut ref_logits = reference.next_logits(&prefix, control);
                apply_mask(&mut ref_logits, mask);
                for &t in &forbid {
                    ref_logits[t as usize] = NEG_INF;
                }
                total += masked_kl(&logits, &ref_logits);
                count += 1;
                let tok = argmax(&logits) as u32;
                if tok == EOS {
                    break;
                }
                prefix.push(tok);
                logits = infer.step(&mut st, tok);
            }
            (total, count)
        })
        .collect();
    let (sum, n) = per.iter().fold((0.0, 0usize), |(s, c), &(a, b)| (s + a, c + b));
    Ok(sum / n.max(1) as f64)
}

/// KL(p ‖ q) for two masked logit rows, over the jointly allowed support.
fn masked_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lse_p = log_sum_exp(p_logits);
    let lse_q = log_sum_exp(q_logits);
    let mut kl = 0.0;
    for (&lp, &lq) in p_logits.iter().zip(q_logits.iter()) {
        if lp <= NEG_INF / 2.0 {
            continue;
        }
        let p = (lp - lse_p).exp();
        kl += p * ((lp - lse_p) - (lq - lse_q));
    }
    kl.max(0.0)
}

/// Cheating fixture: translates by frequency-rank alignment between the
/// two languages' unigram statistics (used to test the BLEU-100 path with
/// an oracle-perfect hypothesis source).
pub fn rank_align_translate(
    src: &[u32],
    src_counts: &std::collections::BTreeMap<u32, u64>,
    tgt_counts: &std::collections::BTreeMap<u32, u64>,
    reorder: crate::synth_world::ReorderRule,
    direction: Direction,
) -> Vec<u32> {
    let rank = |counts: &std::collections::BTreeMap<u32, u64>| -> Vec<u32> {
        let mut v: Vec<(u32, u64)> = counts.iter().map(|(&t, &c)| (t, c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().map(|(t, _)| t).collect()
    };
    let src_rank = rank(src_counts);
    let tgt_rank = rank(tgt_counts);
    let map = |t: u32| -> u32 {
        src_rank
            .iter()
            .position(|&s| s == t)
            .and_then(|r| tgt_rank.get(r).copied())
            .unwrap_or(t)
    };
    match direction {
        Direction::AToB => {
            let mapped: Vec<u32> = src.iter().map(|&t| map(t)).collect();
            reorder.apply(&mapped)
        }
        Direction::BToA => {
            let unshuffled = reorder.apply_inverse(src);
            unshuffled.iter().map(|&t| map(t)).collect()
        }
    }
}

/// Sender step distributions vs. a softmax check helper used in tests.
pub fn sender_step_probs(model: &Model, memory: &Tensor, control: u32) -> Vec<f64> {
    let infer = Infer::new(model);
    let mut st = infer.start(memory);
    let mut l = infer.step(&mut st, control);
    softmax_inplace(&mut l);
    l
}

/// Receiver representation of a token sequence (shared by tests).
pub fn receiver_repr(model: &Model, ids: &[u32], aggregator: crate::model::AggregatorKind) -> Vec<f64> {
    let mut tape = Tape::new(&model.store);
    let x = tape.embed(model.ids.embed, ids);
    let x = crate::model::add_positions(&mut tape, model, x);
    let h = crate::model::encoder_body(&mut tape, model, x);
    let r = aggregate_receiver(&mut tape, model, h, aggregator);
    tape.value(r).data.clone()
}
