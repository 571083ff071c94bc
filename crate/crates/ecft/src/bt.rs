//! Iterative on-the-fly backtranslation: masked beam search produces
//! detached synthetic sources, the reverse direction trains supervised,
//! directions alternate per step, and the mask threshold follows the
//! p-schedule.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constrained::{beam_decode, build_logit_mask, DecoderStepModel, GenerationConfig};
use crate::error::{EcftError, Result};
use crate::model::{batch_param_grads, decode_teacher_forced, encode_tokens, sequence_ce, Infer, Model};
use crate::optim::Adam;
use crate::synth_world::{rng_for, Direction, MonolingualCorpus};
use crate::vocab::{LangId, Vocabulary, EOS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BtSchedule {
    pub steps_per_direction: usize,
    pub mask_p_initial: f64,
    pub mask_p_after: f64,
    pub switch_step: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub num_beams: usize,
    pub max_len: usize,
    pub eval_every: usize,
}

impl BtSchedule {
    /// Baseline Appendix-A schedule.
    pub fn baseline() -> Self {
        BtSchedule {
            steps_per_direction: 8192,
            mask_p_initial: 0.9,
            mask_p_after: 0.99,
            switch_step: 2048,
            peak_lr: 2e-5,
            warmup_steps: 1024,
            clip_norm: 0.5,
            batch_size: 32,
            num_beams: 5,
            max_len: 64,
            eval_every: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.switch_step > self.steps_per_direction || self.mask_p_initial > self.mask_p_after {
            return Err(EcftError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }

    /// Mask threshold for a given per-direction step counter.
    pub fn mask_p(&self, step_in_direction: usize) -> f64 {
        if step_in_direction < self.switch_step {
            self.mask_p_initial
        } else {
            self.mask_p_after
        }
    }
}

/// Masked beam search into `lang_x` conditioned on a sentence in `lang_y`.
/// Runs entirely on the no-grad path (detached by construction).
pub fn bt_synthesize(
    model: &Model,
    vocab: &Vocabulary,
    y: &[u32],
    lang_x: LangId,
    lang_y: LangId,
    gen: &GenerationConfig,
) -> Result<Vec<u32>> {
    let infer = Infer::new(model);
    let memory = infer.encode(y, vocab.control_token(lang_y), None);
    let step_model = DecoderStepModel::new(model, &memory);
    beam_decode(&step_model, vocab.control_token(lang_x), gen)
}

/// Mean teacher-forced loss gradient over (x̂, y) pairs.
pub fn bt_train_grads(
    model: &Model,
    vocab: &Vocabulary,
    pairs: &[(Vec<u32>, Vec<u32>)],
    lang_x: LangId,
    lang_y: LangId,
) -> (Vec<f64>, f64) {
    let cx = vocab.control_token(lang_x);
    let cy = vocab.control_token(lang_y);
    batch_param_grads(model, pairs, |tape, (x, y)| {
        let memory = encode_tokens(tape, model, x, cx, None);
        let logits = decode_teacher_forced(tape, model, memory, y, cy);
        sequence_ce(tape, logits, y, EOS)
    })
}

/// One BT step training direction X→Y from a batch of Y sentences:
/// synthesize x̂ per sentence, train on x̂ → y, one optimizer update.
pub fn bt_step(
    model: &mut Model,
    vocab: &Vocabulary,
    batch: &[Vec<u32>],
    lang_x: LangId,
    lang_y: LangId,
    counts_x: &BTreeMap<u32, u64>,
    p: f64,
    sched: &BtSchedule,
    opt: &mut Adam,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(EcftError::EmptyInput("bt batch"));
    }
    let mask = build_logit_mask(counts_x, p, vocab, lang_x)?;
    let mut gen = GenerationConfig::bt(Some(mask));
    gen.num_beams = sched.num_beams;
    gen.max_len = sched.max_len;
    gen.hard_forbid = (0..vocab.size() as u32)
        .filter(|&t| vocab.is_special(t) && t != EOS)
        .collect();
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = batch
        .par_iter()
        .map(|y| {
            let x = bt_synthesize(model, vocab, y, lang_x, lang_y, &gen)?;
            Ok((x, y.clone()))
        })
        .collect::<Result<_>>()?;
    let (mut grad, loss) = bt_train_grads(model, vocab, &pairs, lang_x, lang_y);
    opt.apply(&mut model.store.data, &mut grad);
    Ok(loss)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BtStepRecord {
    pub global_step: usize,
    pub direction: Direction,
    pub step_in_direction: usize,
    pub mask_p: f64,
    pub loss: f64,
}

/// A full round: `2 × steps_per_direction` steps alternating directions
/// (A→B first). `on_eval` fires after every `eval_every` global steps and
/// at the end. `start_step` supports resuming mid-round.
#[allow(clippy::too_many_arguments)]
pub fn bt_round<F>(
    model: &mut Model,
    vocab: &Vocabulary,
    corpus_a: &MonolingualCorpus,
    corpus_b: &MonolingualCorpus,
    sched: &BtSchedule,
    seed: u64,
    opt: &mut Adam,
    start_step: usize,
    mut on_eval: F,
) -> Result<Vec<BtStepRecord>>
where
    F: FnMut(&Model, usize) -> Result<()>,
{
    sched.validate()?;
    if corpus_a.sentences.is_empty() || corpus_b.sentences.is_empty() {
        return Err(EcftError::EmptyInput("bt corpus"));
    }
    let counts_a = crate::synth_world::token_counts(corpus_a);
    let counts_b = crate::synth_world::token_counts(corpus_b);
    let total = 2 * sched.steps_per_direction;
    let mut records = Vec::new();
    for global_step in start_step..total {
        // even steps train A→B (batch from B), odd steps B→A
        let direction = if global_step % 2 == 0 { Direction::AToB } else { Direction::BToA };
        let step_in_direction = global_step / 2;
        let p = sched.mask_p(step_in_direction);
        let mut rng = rng_for(seed, 0xb700 + global_step as u64);
        let (tgt_corpus, lang_x, lang_y, counts_x) = match direction {
            Direction::AToB => (corpus_b, corpus_a.lang, corpus_b.lang, &counts_a),
            Direction::BToA => (corpus_a, corpus_b.lang, corpus_a.lang, &counts_b),
        };
        let batch: Vec<Vec<u32>> = (0..sched.batch_size)
            .map(|_| tgt_corpus.sentences[rng.gen_range(0..tgt_corpus.sentences.len())].clone())
            .collect();
        let loss = bt_step(model, vocab, &batch, lang_x, lang_y, counts_x, p, sched, opt)?;
        records.push(BtStepRecord {
            global_step,
            direction,
            step_in_direction,
            mask_p: p,
            loss,
        });
        if (global_step + 1) % sched.eval_every.max(1) == 0 || global_step + 1 == total {
            on_eval(model, global_step + 1)?;
        }
    }
    Ok(records)
}
