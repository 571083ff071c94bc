//! Stage orchestration for the three experimental arms: stage lists,
//! per-stage optimizers, checkpointing, metrics logging, stage-boundary
//! resume, and checkpoint selection by mean validation BLEU.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bt::{bt_round, BtSchedule, BtStepRecord};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::constrained::{build_logit_mask, GenerationConfig, LogitMask};
use crate::ec::{
    ec_step, ec_step_seed, grounding_eval_accuracy, grounding_step, make_ec_batch,
    make_grounding_batch, EcStageConfig, GameLosses,
};
use crate::error::{EcftError, Result};
use crate::eval::evaluate_translation;
use crate::model::{make_reference_lm, Model, ModelConfig, ReferenceLM};
use crate::optim::{Adam, LrSchedule};
use crate::params::ParamStore;
use crate::synth_world::{
    mix_seed, rng_for, token_counts, Direction, EvalPair, ImageRecord, MonolingualCorpus,
};
use crate::vocab::{LangId, Vocabulary, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    I2i,
    T2i,
}

impl Arm {
    pub fn parse(s: &str) -> Result<Arm> {
        match s {
            "baseline" => Ok(Arm::Baseline),
            "i2i" => Ok(Arm::I2i),
            "t2i" => Ok(Arm::T2i),
            other => Err(EcftError::UnknownArm(other.into())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::I2i => "i2i",
            Arm::T2i => "t2i",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageConfig {
    Grounding(EcStageConfig),
    Ec(EcStageConfig),
    Backtranslation(BtSchedule),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    /// optimizer steps for grounding/EC; steps per direction for BT
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub config: StageConfig,
}

impl StageSpec {
    pub fn kind_name(&self) -> &'static str {
        match self.config {
            StageConfig::Grounding(_) => "grounding",
            StageConfig::Ec(_) => "ec",
            StageConfig::Backtranslation(_) => "backtranslation",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(EcftError::InvalidConfig("stage lr must be positive".into()));
        }
        if let StageConfig::Backtranslation(sched) = &self.config {
            sched.validate()?;
            if sched.steps_per_direction != self.steps {
                return Err(EcftError::InvalidConfig(
                    "BT stage steps must equal steps_per_direction".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub arm: Arm,
    pub scale: f64,
    pub seed: u64,
    /// causal-LM fine-tuning steps for the frozen KL reference
    pub reference_lm_steps: usize,
    pub stages: Vec<StageSpec>,
}

impl PipelineSpec {
    pub fn total_bt_steps(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s.config, StageConfig::Backtranslation(_)))
            .map(|s| s.steps)
            .sum()
    }
}

/// Step counts scale multiplicatively, rounding to the nearest step with
/// a floor of 1 for nonzero inputs.
pub fn scale_steps(n: usize, scale: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((n as f64 * scale).round() as usize).max(1)
    }
}

const BT_TOTAL: usize = 8192;
const BT_PRE_EC: usize = 2048;
const STAGE_STEPS: usize = 2048;
const EVAL_EVERY: usize = 256;
const WARMUP: usize = 1024;
const GROUNDING_LR: f64 = 4e-5;
const GROUNDING_BATCH: usize = 16;

fn bt_stage(
    steps: usize,
    p_initial: f64,
    p_after: f64,
    switch: usize,
    lr: f64,
    scale: f64,
) -> StageSpec {
    let sched = BtSchedule {
        steps_per_direction: steps,
        mask_p_initial: p_initial,
        mask_p_after: p_after,
        switch_step: switch.min(steps),
        peak_lr: lr,
        warmup_steps: scale_steps(WARMUP, scale),
        eval_every: scale_steps(EVAL_EVERY, scale),
        ..BtSchedule::baseline()
    };
    StageSpec {
        steps,
        lr,
        clip_norm: sched.clip_norm,
        eval_every: sched.eval_every,
        config: StageConfig::Backtranslation(sched),
    }
}

fn game_stage(steps: usize, lr: f64, clip: f64, scale: f64, grounding: bool, cfg: EcStageConfig) -> StageSpec {
    StageSpec {
        steps,
        lr,
        clip_norm: clip,
        eval_every: scale_steps(EVAL_EVERY, scale),
        config: if grounding { StageConfig::Grounding(cfg) } else { StageConfig::Ec(cfg) },
    }
}

/// The three arms' stage lists. Total BT steps are identical across arms
/// at every scale; the later BT stage absorbs rounding.
///
/// At desk scales below 1.0, peak learning rates are compensated by
/// 1/scale so the total learning budget (lr × steps) of every stage is
/// preserved; at scale 1.0 the reference values are emitted verbatim.
pub fn build_pipeline(arm: Arm, scale: f64, seed: u64) -> Result<PipelineSpec> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(EcftError::InvalidConfig(format!("bad scale {scale}")));
    }
    let lr_comp = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let total_bt = scale_steps(BT_TOTAL, scale);
    let pre = scale_steps(BT_PRE_EC, scale);
    let game = scale_steps(STAGE_STEPS, scale);
    let switch = scale_steps(BT_PRE_EC, scale);
    let stages = match arm {
        Arm::Baseline => vec![bt_stage(total_bt, 0.9, 0.99, switch, 2e-5 * lr_comp, scale)],
        Arm::I2i => {
            let mut grounding = EcStageConfig::i2i();
            grounding.batch_size = GROUNDING_BATCH;
            vec![
                // first BT block stays below the threshold switch
                bt_stage(pre, 0.9, 0.99, pre, 2e-5 * lr_comp, scale),
                game_stage(game, GROUNDING_LR * lr_comp, 1.0, scale, true, grounding),
                game_stage(game, 6e-6 * lr_comp, 1.0, scale, false, EcStageConfig::i2i()),
                // the resumed BT block continues at the raised threshold
                bt_stage(total_bt - pre, 0.99, 0.99, 0, 2e-5 * lr_comp, scale),
            ]
        }
        Arm::T2i => {
            let mut grounding = EcStageConfig::t2i();
            grounding.batch_size = GROUNDING_BATCH;
            vec![
                game_stage(game, GROUNDING_LR * lr_comp, 0.5, scale, true, grounding),
                game_stage(game, 1e-6 * lr_comp, 0.5, scale, false, EcStageConfig::t2i()),
                bt_stage(total_bt, 0.96, 0.99, switch, 1e-5 * lr_comp, scale),
            ]
        }
    };
    let spec = PipelineSpec {
        arm,
        scale,
        seed,
        reference_lm_steps: scale_steps(1024, scale),
        stages,
    };
    for s in &spec.stages {
        s.validate()?;
    }
    Ok(spec)
}

/// Fresh Adam per stage: BT warms up linearly then decays; grounding/EC
/// start at peak and decay linearly to zero.
pub fn make_optimizer(stage: &StageSpec, param_len: usize) -> Adam {
    let schedule = match &stage.config {
        StageConfig::Backtranslation(sched) => LrSchedule::WarmupDecay {
            warmup: sched.warmup_steps,
            total: 2 * sched.steps_per_direction,
        },
        _ => LrSchedule::Decay { total: stage.steps },
    };
    Adam::new(param_len, stage.lr, stage.clip_norm, schedule)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub stage: usize,
    pub step: usize,
    pub ckpt: String,
    pub val_bleu_forward: f64,
    pub val_bleu_backward: f64,
    pub mean_bleu: f64,
}

/// Highest mean BLEU; ties broken by the later (stage, step).
pub fn select_best(records: &[CheckpointRecord]) -> Option<CheckpointRecord> {
    let mut best: Option<&CheckpointRecord> = None;
    for r in records {
        if best.map_or(true, |b| r.mean_bleu >= b.mean_bleu) {
            best = Some(r);
        }
    }
    best.cloned()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricRecord {
    BtStep { stage: usize, record: BtStepRecord },
    Game { stage: usize, step: usize, losses: GameLosses },
    GroundingEval { stage: usize, step: usize, accuracy: f64 },
    Eval { record: CheckpointRecord },
}

/// Everything a pipeline run reads; all of it is generated up front.
#[derive(Debug, Clone)]
pub struct RunData {
    pub vocab: Vocabulary,
    pub corpus_a: MonolingualCorpus,
    pub corpus_b: MonolingualCorpus,
    /// oracle validation pairs, both directions mixed
    pub val_pairs: Vec<EvalPair>,
    pub images_train: Vec<ImageRecord>,
    pub images_eval: Vec<ImageRecord>,
    pub caption_lang: LangId,
}

impl RunData {
    fn lang_a(&self) -> LangId {
        self.corpus_a.lang
    }

    fn lang_b(&self) -> LangId {
        self.corpus_b.lang
    }
}

fn hard_forbid(vocab: &Vocabulary) -> Vec<u32> {
    (0..vocab.size() as u32)
        .filter(|&t| vocab.is_special(t) && t != EOS)
        .collect()
}

fn language_masks(data: &RunData, p: f64) -> Result<Vec<LogitMask>> {
    // indexed by LangId; the pair's languages are ids 0 and 1
    let mut masks = vec![
        build_logit_mask(&token_counts(&data.corpus_a), p, &data.vocab, data.lang_a())?,
        build_logit_mask(&token_counts(&data.corpus_b), p, &data.vocab, data.lang_b())?,
    ];
    if data.lang_a().0 > data.lang_b().0 {
        masks.swap(0, 1);
    }
    Ok(masks)
}

fn write_metric(w: &mut BufWriter<fs::File>, rec: &MetricRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Evaluate both directions with masked beam search and checkpoint.
#[allow(clippy::too_many_arguments)]
fn bt_eval(
    model: &Model,
    data: &RunData,
    sched: &BtSchedule,
    p: f64,
    stage_idx: usize,
    step: usize,
    stage_dir: &Path,
    cfg: &ModelConfig,
) -> Result<CheckpointRecord> {
    let forbid = hard_forbid(&data.vocab);
    let eval_dir = |direction: Direction| -> Result<f64> {
        let (src, tgt, counts) = match direction {
            Direction::AToB => (data.lang_a(), data.lang_b(), token_counts(&data.corpus_b)),
            Direction::BToA => (data.lang_b(), data.lang_a(), token_counts(&data.corpus_a)),
        };
        let mask = build_logit_mask(&counts, p, &data.vocab, tgt)?;
        let mut gen = GenerationConfig::bt(Some(mask));
        gen.num_beams = sched.num_beams;
        gen.max_len = sched.max_len;
        gen.hard_forbid = forbid.clone();
        Ok(evaluate_translation(model, &data.vocab, &data.val_pairs, direction, src, tgt, &gen)?.bleu)
    };
    let fwd = eval_dir(Direction::AToB)?;
    let bwd = eval_dir(Direction::BToA)?;
    let ckpt = stage_dir.join(format!("step_{step}.ckpt"));
    save_checkpoint(&ckpt, cfg, step as u64, &model.store)?;
    Ok(CheckpointRecord {
        stage: stage_idx,
        step,
        // run-relative so identical runs log identical records
        ckpt: format!("stage_{stage_idx}/step_{step}.ckpt"),
        val_bleu_forward: fwd,
        val_bleu_backward: bwd,
        mean_bleu: 0.5 * (fwd + bwd),
    })
}

fn run_stage(
    model: &mut Model,
    spec: &PipelineSpec,
    stage_idx: usize,
    stage: &StageSpec,
    data: &RunData,
    reference: Option<&ReferenceLM>,
    stage_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(stage_dir)?;
    let metrics_path = stage_dir.join("metrics.jsonl");
    let mut w = BufWriter::new(fs::File::create(&metrics_path)?);
    let stage_seed = mix_seed(spec.seed, 0x57a6e0 + stage_idx as u64);
    let mut opt = make_optimizer(stage, model.store.len());
    match &stage.config {
        StageConfig::Grounding(cfg) => {
            for step in 0..stage.steps {
                let mut rng = rng_for(stage_seed, 0x96d0 + step as u64);
                let batch =
                    make_grounding_batch(&data.images_train, cfg.batch_size, cfg.num_candidates, &mut rng);
                let losses =
                    grounding_step(model, &data.vocab, &batch, data.caption_lang, cfg, &mut opt)?;
                write_metric(&mut w, &MetricRecord::Game { stage: stage_idx, step, losses })?;
                if (step + 1) % stage.eval_every.max(1) == 0 || step + 1 == stage.steps {
                    let mut erng = rng_for(stage_seed, 0xeea1 + step as u64);
                    let eval_batch =
                        make_grounding_batch(&data.images_eval, 64, cfg.num_candidates.min(data.images_eval.len()), &mut erng);
                    let acc = grounding_eval_accuracy(model, &data.vocab, &eval_batch, data.caption_lang, cfg);
                    write_metric(
                        &mut w,
                        &MetricRecord::GroundingEval { stage: stage_idx, step: step + 1, accuracy: acc },
                    )?;
                }
            }
        }
        StageConfig::Ec(cfg) => {
            let reference = reference.expect("EC stage requires a reference LM");
            let masks = language_masks(data, cfg.mask_p)?;
            for step in 0..stage.steps {
                let mut rng = rng_for(ec_step_seed(stage_seed, step), 0);
                let batch = make_ec_batch(
                    &data.images_train,
                    cfg.batch_size,
                    cfg.num_candidates,
                    cfg.variant,
                    data.vocab.num_languages(),
                    &mut rng,
                );
                let losses = ec_step(
                    model,
                    &data.vocab,
                    &batch,
                    reference,
                    &masks,
                    data.caption_lang,
                    cfg,
                    &mut opt,
                )?;
                write_metric(&mut w, &MetricRecord::Game { stage: stage_idx, step, losses })?;
            }
        }
        StageConfig::Backtranslation(sched) => {
            let cfg = model.cfg.clone();
            let mut eval_err: Option<EcftError> = None;
            let records = {
                let w = &mut w;
                let eval_err = &mut eval_err;
                bt_round(
                    model,
                    &data.vocab,
                    &data.corpus_a,
                    &data.corpus_b,
                    sched,
                    stage_seed,
                    &mut opt,
                    0,
                    |m, global_step| {
                        let p = sched.mask_p(global_step / 2);
                        match bt_eval(m, data, sched, p, stage_idx, global_step, stage_dir, &cfg) {
                            Ok(record) => write_metric(w, &MetricRecord::Eval { record }),
                            Err(e) => {
                                *eval_err = Some(e);
                                Ok(())
                            }
                        }
                    },
                )?
            };
            if let Some(e) = eval_err {
                return Err(e);
            }
            for record in records {
                write_metric(&mut w, &MetricRecord::BtStep { stage: stage_idx, record })?;
            }
        }
    }
    drop(w);
    save_checkpoint(&stage_dir.join("final.ckpt"), &model.cfg, stage.steps as u64, &model.store)?;
    Ok(())
}

/// Run (or resume) a pipeline. Completed stages — detected by their
/// `final.ckpt` — are skipped and their metrics reused, so a
/// stage-boundary resume reproduces the uninterrupted run exactly.
/// `stop_after_stage = Some(k)` simulates an interruption after stage k.
pub fn run_pipeline(
    spec: &PipelineSpec,
    model_cfg: &ModelConfig,
    base: &ParamStore,
    data: &RunData,
    out_dir: &Path,
    stop_after_stage: Option<usize>,
) -> Result<Option<CheckpointRecord>> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    let mut model = Model::from_store(model_cfg.clone(), base.clone());
    // the frozen KL reference is derived from the shared pretrained base,
    // before any arm-specific training
    let needs_reference = spec.stages.iter().any(|s| matches!(s.config, StageConfig::Ec(_)));
    let reference = if needs_reference {
        Some(make_reference_lm(
            &model,
            &data.vocab,
            &[data.corpus_a.clone(), data.corpus_b.clone()],
            spec.reference_lm_steps,
            8,
            mix_seed(spec.seed, 0x4ef1),
            0,
        )?)
    } else {
        None
    };
    for (k, stage) in spec.stages.iter().enumerate() {
        let stage_dir = out_dir.join(format!("stage_{k}"));
        let final_ckpt = stage_dir.join("final.ckpt");
        if final_ckpt.exists() && stage_dir.join("metrics.jsonl").exists() {
            let (_, store) = load_checkpoint(&final_ckpt, model_cfg)?;
            model = Model::from_store(model_cfg.clone(), store);
            continue;
        }
        run_stage(&mut model, spec, k, stage, data, reference.as_ref(), &stage_dir)?;
        if stop_after_stage == Some(k) && k + 1 < spec.stages.len() {
            return Ok(None);
        }
    }
    finalize_run(spec, out_dir)
}

/// Concatenate per-stage metrics, select the best checkpoint, and write
/// `metrics.jsonl` + `best.json` at the run root.
fn finalize_run(spec: &PipelineSpec, out_dir: &Path) -> Result<Option<CheckpointRecord>> {
    let mut all = Vec::new();
    for k in 0..spec.stages.len() {
        all.extend(read_metrics(&out_dir.join(format!("stage_{k}")).join("metrics.jsonl"))?);
    }
    let mut w = BufWriter::new(fs::File::create(out_dir.join("metrics.jsonl"))?);
    for rec in &all {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let evals: Vec<CheckpointRecord> = all
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Eval { record } => Some(record.clone()),
            _ => None,
        })
        .collect();
    let best = select_best(&evals);
    if let Some(b) = &best {
        fs::write(out_dir.join("best.json"), serde_json::to_string_pretty(b)?)?;
    }
    Ok(best)
}

/// Resume from a run directory created by `run_pipeline` (reads its
/// `spec.json`).
pub fn resume_pipeline(
    out_dir: &Path,
    model_cfg: &ModelConfig,
    base: &ParamStore,
    data: &RunData,
) -> Result<Option<CheckpointRecord>> {
    let spec: PipelineSpec = serde_json::from_str(&fs::read_to_string(out_dir.join("spec.json"))?)?;
    run_pipeline(&spec, model_cfg, base, data, out_dir, None)
}

/// Standard run-directory layout: `<out>/<arm>/<seed>`.
pub fn run_dir(out: &Path, arm: Arm, seed: u64) -> PathBuf {
    out.join(arm.as_str()).join(seed.to_string())
}
