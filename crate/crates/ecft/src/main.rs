//! Command-line entry point: data generation, denoising pretraining,
//! pipeline runs, single-checkpoint evaluation, and report rendering.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use ecft::bt::BtSchedule;
use ecft::checkpoint::{load_checkpoint, save_checkpoint};
use ecft::constrained::{build_logit_mask, GenerationConfig};
use ecft::eval::evaluate_translation;
use ecft::model::{Model, ModelConfig, PretrainConfig};
use ecft::pipeline::{build_pipeline, resume_pipeline, run_dir, run_pipeline, Arm, RunData};
use ecft::synth_world::{
    gen_image_dataset, gen_language_pair, gen_monolingual_corpus,
    gen_parallel_eval, read_corpus_jsonl, read_eval_jsonl, read_images_jsonl, token_counts,
    Direction, LanguagePairSpec, ReorderRule, ResourceTier, WorldSpec,
};
use ecft::vocab::EOS;

#[derive(Parser)]
#[command(name = "ecft", about = "Emergent-communication fine-tuning for unsupervised translation, desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic language pair, corpora, images, and
    /// validation pairs as JSONL files
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoising-pretrain the shared base model and save its checkpoint
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experimental arm end to end
    RunPipeline {
        #[arg(long)]
        arm: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.125)]
        scale: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one checkpoint on the held-out validation pairs
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        direction: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Render results tables and validation curves from run directories
    Report {
        #[arg(long, num_args = 1.., required_unless_present = "paper_fixture")]
        runs: Vec<PathBuf>,
        #[arg(long)]
        paper_fixture: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resume an interrupted pipeline run from its directory
    Resume {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
    },
}

#[derive(Debug, Deserialize)]
struct Config {
    seed: u64,
    data: DataConfig,
    world: WorldConfig,
    model: ModelSection,
    pretrain: PretrainSection,
}

#[derive(Debug, Deserialize)]
struct DataConfig {
    content_vocab: usize,
    #[serde(default = "default_reorder")]
    reorder: String,
    sentences_a: usize,
    sentences_b: usize,
    #[serde(default = "default_tier_a")]
    tier_a: String,
    #[serde(default = "default_tier_b")]
    tier_b: String,
    #[serde(default = "default_val_pairs")]
    val_pairs: usize,
}

#[derive(Debug, Deserialize)]
struct WorldConfig {
    attributes: Vec<AttributeConfig>,
    feature_dim: usize,
    #[serde(default = "default_jitter")]
    jitter: f64,
    images_train: usize,
    images_eval: usize,
}

#[derive(Debug, Deserialize)]
struct AttributeConfig {
    name: String,
    count: usize,
}

#[derive(Debug, Deserialize)]
struct ModelSection {
    #[serde(default = "default_preset")]
    preset: String,
}

#[derive(Debug, Deserialize)]
struct PretrainSection {
    steps: usize,
    #[serde(default = "default_holdout")]
    holdout: usize,
}

fn default_reorder() -> String {
    "swap_halves".into()
}
fn default_tier_a() -> String {
    "high".into()
}
fn default_tier_b() -> String {
    "low".into()
}
fn default_val_pairs() -> usize {
    512
}
fn default_jitter() -> f64 {
    0.05
}
fn default_preset() -> String {
    "toy".into()
}
fn default_holdout() -> usize {
    0
}

fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(toml::from_str(&text)?)
}

/// `ECFT_SEED` overrides both the --seed flag and the config seed.
fn resolve_seed(flag: Option<u64>, cfg: &Config) -> Result<u64> {
    if let Ok(v) = std::env::var("ECFT_SEED") {
        return v.parse::<u64>().context("ECFT_SEED must be an unsigned integer");
    }
    Ok(flag.unwrap_or(cfg.seed))
}

fn parse_tier(s: &str) -> Result<ResourceTier> {
    match s {
        "high" => Ok(ResourceTier::High),
        "low" => Ok(ResourceTier::Low),
        other => bail!("unknown resource tier {other:?} (expected high|low)"),
    }
}

fn parse_reorder(s: &str) -> Result<ReorderRule> {
    match s {
        "identity" => Ok(ReorderRule::Identity),
        "swap_halves" => Ok(ReorderRule::swap_halves()),
        other => bail!("unknown reorder rule {other:?} (expected identity|swap_halves)"),
    }
}

fn build_pair(cfg: &Config, seed: u64) -> Result<LanguagePairSpec> {
    Ok(gen_language_pair(seed, cfg.data.content_vocab, parse_reorder(&cfg.data.reorder)?)?)
}

fn model_config(cfg: &Config, vocab_size: usize, seed: u64) -> Result<ModelConfig> {
    match cfg.model.preset.as_str() {
        "toy" => Ok(ModelConfig::toy(vocab_size, cfg.world.feature_dim, seed)),
        "tiny" => Ok(ModelConfig::tiny(vocab_size, cfg.world.feature_dim, seed)),
        other => bail!("unknown model preset {other:?} (expected toy|tiny)"),
    }
}

fn gen_data(cfg: &Config, seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let pair = build_pair(cfg, seed)?;
    let tier_a = parse_tier(&cfg.data.tier_a)?;
    let tier_b = parse_tier(&cfg.data.tier_b)?;
    let corpus_a = gen_monolingual_corpus(&pair, pair.lang_a, cfg.data.sentences_a, 1, tier_a)?;
    let corpus_b = gen_monolingual_corpus(&pair, pair.lang_b, cfg.data.sentences_b, 2, tier_b)?;
    let mut val = gen_parallel_eval(&pair, Direction::AToB, cfg.data.val_pairs, 3)?;
    val.extend(gen_parallel_eval(&pair, Direction::BToA, cfg.data.val_pairs, 4)?);
    let attrs: Vec<(String, usize)> =
        cfg.world.attributes.iter().map(|a| (a.name.clone(), a.count)).collect();
    let world = WorldSpec::build(attrs, cfg.world.feature_dim, &pair, pair.lang_a, seed, cfg.world.jitter)?;
    let n = cfg.world.images_train + cfg.world.images_eval;
    let images = gen_image_dataset(&world, n, 5, n > world.num_tuples())?;
    ecft::synth_world::write_corpus_jsonl(&out.join("corpus_a.jsonl"), &corpus_a, &pair.vocab)?;
    ecft::synth_world::write_corpus_jsonl(&out.join("corpus_b.jsonl"), &corpus_b, &pair.vocab)?;
    ecft::synth_world::write_eval_jsonl(&out.join("val_pairs.jsonl"), &val)?;
    ecft::synth_world::write_images_jsonl(&out.join("images_train.jsonl"), &images[..cfg.world.images_train])?;
    ecft::synth_world::write_images_jsonl(&out.join("images_eval.jsonl"), &images[cfg.world.images_train..])?;
    println!(
        "wrote {} + {} sentences, {} val pairs, {} images to {}",
        corpus_a.sentences.len(),
        corpus_b.sentences.len(),
        val.len(),
        images.len(),
        out.display()
    );
    Ok(())
}

fn load_data(cfg: &Config, seed: u64, data_dir: &Path) -> Result<(LanguagePairSpec, RunData)> {
    let pair = build_pair(cfg, seed)?;
    let tier_a = parse_tier(&cfg.data.tier_a)?;
    let tier_b = parse_tier(&cfg.data.tier_b)?;
    let corpus_a = read_corpus_jsonl(&data_dir.join("corpus_a.jsonl"), &pair.vocab, tier_a)?;
    let corpus_b = read_corpus_jsonl(&data_dir.join("corpus_b.jsonl"), &pair.vocab, tier_b)?;
    let val_pairs = read_eval_jsonl(&data_dir.join("val_pairs.jsonl"))?;
    let images_train = read_images_jsonl(&data_dir.join("images_train.jsonl"))?;
    let images_eval = read_images_jsonl(&data_dir.join("images_eval.jsonl"))?;
    let caption_lang = pair.lang_a;
    let data = RunData {
        vocab: pair.vocab.clone(),
        corpus_a,
        corpus_b,
        val_pairs,
        images_train,
        images_eval,
        caption_lang,
    };
    Ok((pair, data))
}

fn pretrain(cfg: &Config, seed: u64, data_dir: &Path, out: &Path) -> Result<()> {
    let (pair, data) = load_data(cfg, seed, data_dir)?;
    let model_cfg = model_config(cfg, pair.vocab.size(), seed)?;
    let mut model = Model::new(model_cfg.clone());
    let pre = PretrainConfig::new(cfg.pretrain.steps, seed);
    let corpora = vec![data.corpus_a.clone(), data.corpus_b.clone()];
    ecft::model::denoising_pretrain(&mut model, &pair.vocab, &corpora, &pre, cfg.pretrain.holdout)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(out, &model_cfg, cfg.pretrain.steps as u64, &model.store)?;
    println!("pretrained {} steps, checkpoint at {}", cfg.pretrain.steps, out.display());
    Ok(())
}

fn evaluate(cfg: &Config, ckpt: &Path, direction: &str, data_dir: &Path) -> Result<()> {
    let direction = Direction::parse(direction)?;
    let seed = resolve_seed(None, cfg)?;
    let (pair, data) = load_data(cfg, seed, data_dir)?;
    let model_cfg = model_config(cfg, pair.vocab.size(), seed)?;
    let (_, store) = load_checkpoint(ckpt, &model_cfg)?;
    let model = Model::from_store(model_cfg, store);
    let (src, tgt, counts) = match direction {
        Direction::AToB => (pair.lang_a, pair.lang_b, token_counts(&data.corpus_b)),
        Direction::BToA => (pair.lang_b, pair.lang_a, token_counts(&data.corpus_a)),
    };
    let sched = BtSchedule::baseline();
    let mask = build_logit_mask(&counts, sched.mask_p_after, &pair.vocab, tgt)?;
    let mut gen = GenerationConfig::bt(Some(mask));
    gen.num_beams = sched.num_beams;
    gen.max_len = sched.max_len;
    gen.hard_forbid = (0..pair.vocab.size() as u32)
        .filter(|&t| pair.vocab.is_special(t) && t != EOS)
        .collect();
    let result = evaluate_translation(&model, &pair.vocab, &data.val_pairs, direction, src, tgt, &gen)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = load_config(&config)?;
            let seed = resolve_seed(None, &cfg)?;
            gen_data(&cfg, seed, &out)
        }
        Cmd::Pretrain { config, data, out } => {
            let cfg = load_config(&config)?;
            let seed = resolve_seed(None, &cfg)?;
            pretrain(&cfg, seed, &data, &out)
        }
        Cmd::RunPipeline { arm, config, scale, seed, data, base, out } => {
            let cfg = load_config(&config)?;
            let seed = resolve_seed(seed, &cfg)?;
            let arm = Arm::parse(&arm)?;
            let (pair, run_data) = load_data(&cfg, cfg.seed, &data)?;
            let model_cfg = model_config(&cfg, pair.vocab.size(), cfg.seed)?;
            let (_, store) = load_checkpoint(&base, &model_cfg)?;
            let spec = build_pipeline(arm, scale, seed)?;
            let dir = run_dir(&out, arm, seed);
            let best = run_pipeline(&spec, &model_cfg, &store, &run_data, &dir, None)?;
            match best {
                Some(b) => println!("{}", serde_json::to_string_pretty(&b)?),
                None => println!("run stopped before completion"),
            }
            Ok(())
        }
        Cmd::Evaluate { ckpt, direction, config, data } => {
            let cfg = load_config(&config)?;
            evaluate(&cfg, &ckpt, &direction, &data)
        }
        Cmd::Report { runs, paper_fixture, out } => {
            ecft::report::render_results(&runs, &out, paper_fixture)?;
            println!("{}", std::fs::read_to_string(out.join("results.txt"))?);
            Ok(())
        }
        Cmd::Resume { from, config, data, base } => {
            let cfg = load_config(&config)?;
            let (pair, run_data) = load_data(&cfg, cfg.seed, &data)?;
            let model_cfg = model_config(&cfg, pair.vocab.size(), cfg.seed)?;
            let (_, store) = load_checkpoint(&base, &model_cfg)?;
            match resume_pipeline(&from, &model_cfg, &store, &run_data)? {
                Some(b) => println!("{}", serde_json::to_string_pretty(&b)?),
                None => println!("run stopped before completion"),
            }
            Ok(())
        }
    }
}
