//! Denoising pretraining over the synthetic monolingual corpora, plus the
//! frozen causal-LM reference used for anti-drift regularization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{decode_teacher_forced, encode_tokens, sequence_ce, Infer, Model};
use crate::error::{EcftError, Result};
use crate::optim::{Adam, LrSchedule};
use crate::synth_world::{rng_for, MonolingualCorpus, ResourceTier};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, EOS, MASK};

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// fraction of tokens covered by mask spans
    pub mask_frac: f64,
    /// mean geometric span length
    pub mean_span: f64,
    /// independent token-deletion probability
    pub delete_p: f64,
    /// sampling weight per resource tier (high, low)
    pub tier_weights: (f64, f64),
}

impl PretrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        PretrainConfig {
            steps,
            batch_size: 32,
            peak_lr: 3e-4,
            clip_norm: 1.0,
            seed,
            mask_frac: 0.3,
            mean_span: 3.0,
            delete_p: 0.1,
            tier_weights: (4.0, 1.0),
        }
    }
}

/// Span masking (collapse each span to one MASK) followed by independent
/// token deletion. Never returns an empty sequence.
pub fn noise_sentence(tokens: &[u32], cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let n = tokens.len();
    if n == 0 {
        return vec![MASK];
    }
    let budget = (cfg.mask_frac * n as f64).round() as usize;
    let mut masked = vec![false; n];
    let mut covered = 0usize;
    let mut guard = 0;
    while covered < budget && guard < 8 * n + 8 {
        guard += 1;
        let start = rng.gen_range(0..n);
        // geometric with mean `mean_span`
        let p = 1.0 / cfg.mean_span;
        let mut len = 1;
        while rng.gen::<f64>() > p && len < n {
            len += 1;
        }
        for i in start..(start + len).min(n) {
            if !masked[i] {
                masked[i] = true;
                covered += 1;
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if masked[i] {
            out.push(MASK);
            while i < n && masked[i] {
                i += 1;
            }
        } else {
            if !(rng.gen::<f64>() < cfg.delete_p) {
                out.push(tokens[i]);
            }
            i += 1;
        }
    }
    if out.is_empty() {
        out.push(MASK);
    }
    out
}

/// Mean per-example gradients plus mean loss over a batch. Each example
/// builds its own tape; rayon order is fixed by index so the reduction is
/// deterministic.
pub fn batch_param_grads<T, F>(model: &Model, examples: &[T], f: F) -> (Vec<f64>, f64)
where
    T: Sync,
    F: Fn(&mut Tape, &T) -> crate::tape::Var + Sync,
{
    assert!(!examples.is_empty());
    let per: Vec<(Vec<f64>, f64)> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(&model.store);
            let loss = f(&mut tape, ex);
            let grads = tape.backward(loss);
            (grads.params, tape.value(loss).data[0])
        })
        .collect();
    let mut grad = vec![0.0; model.store.len()];
    let mut loss = 0.0;
    let scale = 1.0 / examples.len() as f64;
    for (g, l) in &per {
        for (a, b) in grad.iter_mut().zip(g.iter()) {
            *a += b * scale;
        }
        loss += l * scale;
    }
    (grad, loss)
}

fn tier_weight(cfg: &PretrainConfig, tier: ResourceTier) -> f64 {
    match tier {
        ResourceTier::High => cfg.tier_weights.0,
        ResourceTier::Low => cfg.tier_weights.1,
    }
}

struct DenoiseExample {
    noised: Vec<u32>,
    target: Vec<u32>,
    control: u32,
}

fn denoise_loss(tape: &mut Tape, model: &Model, ex: &DenoiseExample) -> crate::tape::Var {
    let memory = encode_tokens(tape, model, &ex.noised, ex.control, None);
    let logits = decode_teacher_forced(tape, model, memory, &ex.target, ex.control);
    sequence_ce(tape, logits, &ex.target, EOS)
}

/// Mean denoising loss on a fixed slice of sentences (no updates).
pub fn denoise_eval_loss(
    model: &Model,
    vocab: &Vocabulary,
    corpora: &[MonolingualCorpus],
    cfg: &PretrainConfig,
    per_lang: usize,
) -> f64 {
    let mut rng = rng_for(cfg.seed, 0xeba1);
    let mut examples = Vec::new();
    for c in corpora {
        let control = vocab.control_token(c.lang);
        for s in c.sentences.iter().rev().take(per_lang) {
            examples.push(DenoiseExample {
                noised: noise_sentence(s, cfg, &mut rng),
                target: s.clone(),
                control,
            });
        }
    }
    let (_, loss) = batch_param_grads(model, &examples, |tape, ex| denoise_loss(tape, model, ex));
    loss
}

/// Train `model` in place on the reconstruction objective. The last
/// `holdout` sentences of each corpus are never sampled for training.
pub fn denoising_pretrain(
    model: &mut Model,
    vocab: &Vocabulary,
    corpora: &[MonolingualCorpus],
    cfg: &PretrainConfig,
    holdout: usize,
) -> Result<()> {
    if corpora.len() < 2 {
        return Err(EcftError::InvalidConfig(
            "denoising pretraining requires at least 2 languages".into(),
        ));
    }
    for c in corpora {
        if c.sentences.len() <= holdout {
            return Err(EcftError::EmptyInput("corpus smaller than holdout".into()));
        }
    }
    let weights: Vec<f64> = corpora.iter().map(|c| tier_weight(cfg, c.resource_tier)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut rng = rng_for(cfg.seed, 0x9e70);
    let mut opt = Adam::new(
        model.store.len(),
        cfg.peak_lr,
        cfg.clip_norm,
        LrSchedule::WarmupDecay {
            warmup: (cfg.steps / 10).max(1),
            total: cfg.steps,
        },
    );
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let mut pick = rng.gen::<f64>() * wsum;
            let mut ci = 0;
            for (i, w) in weights.iter().enumerate() {
                if pick < *w {
                    ci = i;
                    break;
                }
                pick -= w;
                ci = i;
            }
            let c = &corpora[ci];
            let s = &c.sentences[rng.gen_range(0..c.sentences.len() - holdout)];
            batch.push(DenoiseExample {
                noised: noise_sentence(s, cfg, &mut rng),
                target: s.clone(),
                control: vocab.control_token(c.lang),
            });
        }
        let (mut grad, _) = batch_param_grads(model, &batch, |tape, ex| denoise_loss(tape, model, ex));
        opt.apply(&mut model.store.data, &mut grad);
    }
    Ok(())
}

/// Frozen causal LM over the pretrained decoder, conditioned on a single
/// zero memory row. Used as the anti-drift KL reference.
pub struct ReferenceLM {
    model: Model,
}

impl ReferenceLM {
    /// Next-token logits after `[control] prefix...`.
    pub fn next_logits(&self, prefix: &[u32], control: u32) -> Vec<f64> {
        let infer = Infer::new(&self.model);
        let memory = Tensor::zeros(1, self.model.cfg.d_model);
        let mut st = infer.start(&memory);
        let mut logits = infer.step(&mut st, control);
        for &t in prefix {
            logits = infer.step(&mut st, t);
        }
        logits
    }

    /// Mean causal NLL of `tokens ++ eos` given the control token.
    pub fn sequence_nll(&self, tokens: &[u32], control: u32) -> f64 {
        let infer = Infer::new(&self.model);
        let memory = Tensor::zeros(1, self.model.cfg.d_model);
        let logits = infer.teacher_forced_logits(&memory, tokens, control);
        nll_from_logits(&logits, tokens)
    }

    pub fn checksum(&self) -> u64 {
        self.model.store.checksum()
    }
}

fn nll_from_logits(logits: &[Vec<f64>], target: &[u32]) -> f64 {
    let mut total = 0.0;
    for (t, row) in logits.iter().enumerate() {
        let tok = if t < target.len() { target[t] } else { EOS } as usize;
        let lse = crate::tensor::log_sum_exp(row);
        total += lse - row[tok];
    }
    total / logits.len() as f64
}

/// Held-out mean causal NLL for arbitrary params (used to compare the
/// reference against the raw pretrained decoder).
pub fn causal_eval_nll(
    model: &Model,
    vocab: &Vocabulary,
    corpora: &[MonolingualCorpus],
    per_lang: usize,
) -> f64 {
    let infer = Infer::new(model);
    let memory = Tensor::zeros(1, model.cfg.d_model);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in corpora {
        let control = vocab.control_token(c.lang);
        for s in c.sentences.iter().rev().take(per_lang) {
            let logits = infer.teacher_forced_logits(&memory, s, control);
            total += nll_from_logits(&logits, s);
            count += 1;
        }
    }
    total / count as f64
}

/// Fine-tune a copy of the pretrained params on causal LM (zero memory)
/// and freeze it.
pub fn make_reference_lm(
    base: &Model,
    vocab: &Vocabulary,
    corpora: &[MonolingualCorpus],
    steps: usize,
    batch_size: usize,
    seed: u64,
    holdout: usize,
) -> Result<ReferenceLM> {
    if corpora.iter().all(|c| c.sentences.len() <= holdout) {
        return Err(EcftError::EmptyInput("no causal LM training data".into()));
    }
    let mut model = base.clone();
    let mut rng = rng_for(seed, 0x1f0e);
    let mut opt = Adam::new(model.store.len(), 1e-4, 1.0, LrSchedule::Decay { total: steps });
    let zero_mem = Tensor::zeros(1, model.cfg.d_model);
    for _ in 0..steps {
        let mut batch: Vec<(Vec<u32>, u32)> = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let c = &corpora[rng.gen_range(0..corpora.len())];
            let s = &c.sentences[rng.gen_range(0..c.sentences.len() - holdout)];
            batch.push((s.clone(), vocab.control_token(c.lang)));
        }
        let (mut grad, _) = batch_param_grads(&model, &batch, |tape, (s, control)| {
            let memory = tape.input(zero_mem.clone());
            let logits = decode_teacher_forced(tape, &model, memory, s, *control);
            sequence_ce(tape, logits, s, EOS)
        });
        opt.apply(&mut model.store.data, &mut grad);
    }
    Ok(ReferenceLM { model })
}
