//! Synthetic data: language pairs with a hidden bijective lexicon, seeded
//! monolingual corpora, an attribute image world with gold captions, and
//! the translation oracle used only for evaluation.
//!
//! Training code never sees a [`LanguagePairSpec`]; it receives corpora,
//! image records, and token counts only.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EcftError, Result};
use crate::vocab::{LangId, Vocabulary};

/// splitmix64, used to derive independent seeds from (seed, salt) pairs.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, salt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    AToB,
    BToA,
}

impl Direction {
    pub fn flip(self) -> Direction {
        match self {
            Direction::AToB => Direction::BToA,
            Direction::BToA => Direction::AToB,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::AToB => "a2b",
            Direction::BToA => "b2a",
        }
    }

    pub fn parse(s: &str) -> Result<Direction> {
        match s {
            "a2b" => Ok(Direction::AToB),
            "b2a" => Ok(Direction::BToA),
            _ => Err(EcftError::InvalidConfig(format!("bad direction {s}"))),
        }
    }
}

/// Deterministic per-sentence permutation. `RotateBlocks` moves the first
/// `floor(len * num / den)` tokens to the end; with num/den = 1/2 this is
/// the swap-halves rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReorderRule {
    Identity,
    RotateBlocks { num: u32, den: u32 },
}

impl ReorderRule {
    pub fn swap_halves() -> Self {
        ReorderRule::RotateBlocks { num: 1, den: 2 }
    }

    fn split(self, len: usize) -> usize {
        match self {
            ReorderRule::Identity => 0,
            ReorderRule::RotateBlocks { num, den } => len * num as usize / den as usize,
        }
    }

    pub fn apply(self, s: &[u32]) -> Vec<u32> {
        let k = self.split(s.len());
        let mut out = Vec::with_capacity(s.len());
        out.extend_from_slice(&s[k..]);
        out.extend_from_slice(&s[..k]);
        out
    }

    pub fn apply_inverse(self, s: &[u32]) -> Vec<u32> {
        let k = self.split(s.len());
        let m = s.len() - k;
        let mut out = Vec::with_capacity(s.len());
        out.extend_from_slice(&s[m..]);
        out.extend_from_slice(&s[..m]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceTier {
    High,
    Low,
}

/// A pair of synthetic languages related by a hidden bijective lexicon and
/// a reordering rule. This is the evaluation oracle; training modules must
/// not receive it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguagePairSpec {
    pub vocab: Vocabulary,
    pub lang_a: LangId,
    pub lang_b: LangId,
    /// rank r of language A maps to `lexicon_fwd[r]` (a token id in B)
    lexicon_fwd: Vec<u32>,
    /// inverse map: B token id offset -> A token id
    lexicon_inv: Vec<u32>,
    pub reorder: ReorderRule,
    pub seed: u64,
    /// Zipf exponent of the shared unigram distribution
    pub zipf_s: f64,
    /// content sentence length range, inclusive
    pub len_range: (usize, usize),
}

pub const MIN_CONTENT_VOCAB: usize = 8;

/// Generate a language pair with a seeded random bijective lexicon.
pub fn gen_language_pair(
    seed: u64,
    content_vocab_size: usize,
    reorder: ReorderRule,
) -> Result<LanguagePairSpec> {
    if content_vocab_size < MIN_CONTENT_VOCAB {
        return Err(EcftError::VocabTooSmall(content_vocab_size));
    }
    let vocab = Vocabulary::new(
        vec!["a".to_string(), "b".to_string()],
        &[content_vocab_size, content_vocab_size],
    );
    let lang_a = LangId(0);
    let lang_b = LangId(1);
    let (b_start, b_end) = vocab.content_range(lang_b);
    let mut b_tokens: Vec<u32> = (b_start..b_end).collect();
    let mut rng = rng_for(seed, 0x1e71c0);
    b_tokens.shuffle(&mut rng);
    let mut lexicon_inv = vec![0; content_vocab_size];
    for (rank, &b) in b_tokens.iter().enumerate() {
        let (a_start, _) = vocab.content_range(lang_a);
        lexicon_inv[(b - b_start) as usize] = a_start + rank as u32;
    }
    Ok(LanguagePairSpec {
        vocab,
        lang_a,
        lang_b,
        lexicon_fwd: b_tokens,
        lexicon_inv,
        reorder,
        seed,
        zipf_s: 1.3,
        len_range: (3, 12),
    })
}

impl LanguagePairSpec {
    fn map_token_fwd(&self, tok: u32) -> Result<u32> {
        let (a_start, a_end) = self.vocab.content_range(self.lang_a);
        if tok < a_start || tok >= a_end {
            return Err(EcftError::OutOfInventory(tok));
        }
        Ok(self.lexicon_fwd[(tok - a_start) as usize])
    }

    fn map_token_inv(&self, tok: u32) -> Result<u32> {
        let (b_start, b_end) = self.vocab.content_range(self.lang_b);
        if tok < b_start || tok >= b_end {
            return Err(EcftError::OutOfInventory(tok));
        }
        Ok(self.lexicon_inv[(tok - b_start) as usize])
    }

    pub fn lang(&self, dir_src: Direction) -> LangId {
        match dir_src {
            Direction::AToB => self.lang_a,
            Direction::BToA => self.lang_b,
        }
    }

    pub fn lang_by_name(&self, name: &str) -> Result<LangId> {
        self.vocab.lang_by_name(name)
    }

    /// Zipf weights over ranks, shared by both languages.
    fn zipf_weights(&self) -> Vec<f64> {
        let n = self.lexicon_fwd.len();
        let mut w: Vec<f64> = (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(self.zipf_s)).collect();
        let sum: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x /= sum;
        }
        w
    }

    fn sample_ranks(&self, rng: &mut ChaCha8Rng, weights: &[f64]) -> Vec<usize> {
        let len = rng.gen_range(self.len_range.0..=self.len_range.1);
        (0..len)
            .map(|_| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (r, &w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return r;
                    }
                }
                weights.len() - 1
            })
            .collect()
    }

    /// Sentence in language A for a rank sequence.
    fn ranks_to_a(&self, ranks: &[usize]) -> Vec<u32> {
        let (a_start, _) = self.vocab.content_range(self.lang_a);
        ranks.iter().map(|&r| a_start + r as u32).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonolingualCorpus {
    pub lang: LangId,
    pub sentences: Vec<Vec<u32>>,
    pub resource_tier: ResourceTier,
}

/// Draw `n` monolingual sentences for one side of the pair. Sentences in
/// language B are distributed as oracle translations of language-A draws,
/// so the two corpora share unigram statistics under the hidden lexicon
/// without storing any parallel alignment.
pub fn gen_monolingual_corpus(
    pair: &LanguagePairSpec,
    lang: LangId,
    n: usize,
    seed: u64,
    tier: ResourceTier,
) -> Result<MonolingualCorpus> {
    if lang != pair.lang_a && lang != pair.lang_b {
        return Err(EcftError::UnknownLanguage(format!("lang id {}", lang.0)));
    }
    assert!(n >= 1, "corpus must contain at least one sentence");
    let weights = pair.zipf_weights();
    let mut rng = rng_for(seed, 0xc0_000 + lang.0 as u64);
    let mut sentences = Vec::with_capacity(n);
    for _ in 0..n {
        let ranks = pair.sample_ranks(&mut rng, &weights);
        let a = pair.ranks_to_a(&ranks);
        if lang == pair.lang_a {
            sentences.push(a);
        } else {
            let mapped: Vec<u32> = a.iter().map(|&t| pair.map_token_fwd(t).unwrap()).collect();
            sentences.push(pair.reorder.apply(&mapped));
        }
    }
    Ok(MonolingualCorpus {
        lang,
        sentences,
        resource_tier: tier,
    })
}

/// Translate via the hidden lexicon and reorder rule. Evaluation only.
pub fn oracle_translate(
    sentence: &[u32],
    pair: &LanguagePairSpec,
    direction: Direction,
) -> Result<Vec<u32>> {
    match direction {
        Direction::AToB => {
            let mapped: Vec<u32> = sentence
                .iter()
                .map(|&t| pair.map_token_fwd(t))
                .collect::<Result<_>>()?;
            Ok(pair.reorder.apply(&mapped))
        }
        Direction::BToA => {
            let unshuffled = pair.reorder.apply_inverse(sentence);
            unshuffled.iter().map(|&t| pair.map_token_inv(t)).collect()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPair {
    pub src_tokens: Vec<u32>,
    pub ref_tokens: Vec<u32>,
    pub direction: Direction,
}

/// Held-out parallel pairs for one direction, via the oracle.
pub fn gen_parallel_eval(
    pair: &LanguagePairSpec,
    direction: Direction,
    n: usize,
    seed: u64,
) -> Result<Vec<EvalPair>> {
    let weights = pair.zipf_weights();
    let mut rng = rng_for(seed, 0xe7a1 + direction as u64);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ranks = pair.sample_ranks(&mut rng, &weights);
        let a = pair.ranks_to_a(&ranks);
        let (src, dst) = match direction {
            Direction::AToB => (a.clone(), oracle_translate(&a, pair, Direction::AToB)?),
            Direction::BToA => {
                let b = oracle_translate(&a, pair, Direction::AToB)?;
                (b.clone(), oracle_translate(&b, pair, Direction::BToA)?)
            }
        };
        out.push(EvalPair {
            src_tokens: src,
            ref_tokens: dst,
            direction,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// image world

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    /// (axis name, cardinality)
    pub attribute_axes: Vec<(String, usize)>,
    pub feature_dim: usize,
    /// token assigned to each (axis, value), in the high-resource language
    pub value_tokens: Vec<Vec<u32>>,
    pub seed: u64,
    pub jitter_sigma: f64,
}

impl WorldSpec {
    /// Build a world whose captions use content tokens of `caption_lang`.
    /// Value tokens are taken from the most frequent ranks so grounding
    /// captions survive the language logit mask.
    pub fn build(
        attribute_axes: Vec<(String, usize)>,
        feature_dim: usize,
        pair: &LanguagePairSpec,
        caption_lang: LangId,
        seed: u64,
        jitter_sigma: f64,
    ) -> Result<WorldSpec> {
        let total: usize = attribute_axes.iter().map(|&(_, c)| c).sum();
        if feature_dim < attribute_axes.len() {
            return Err(EcftError::InvalidConfig(format!(
                "feature_dim {} below number of axes {}",
                feature_dim,
                attribute_axes.len()
            )));
        }
        let (start, end) = pair.vocab.content_range(caption_lang);
        if total as u32 > end - start {
            return Err(EcftError::InvalidConfig(format!(
                "world needs {total} value tokens but inventory has {}",
                end - start
            )));
        }
        let mut value_tokens = Vec::new();
        let mut next = start;
        for &(_, card) in &attribute_axes {
            value_tokens.push((next..next + card as u32).collect());
            next += card as u32;
        }
        Ok(WorldSpec {
            attribute_axes,
            feature_dim,
            value_tokens,
            seed,
            jitter_sigma,
        })
    }

    pub fn num_tuples(&self) -> usize {
        self.attribute_axes.iter().map(|&(_, c)| c).product()
    }

    fn onehot_dim(&self) -> usize {
        self.attribute_axes.iter().map(|&(_, c)| c).sum()
    }

    pub fn tuple_from_index(&self, mut idx: usize) -> Vec<usize> {
        let mut tuple = Vec::with_capacity(self.attribute_axes.len());
        for &(_, card) in self.attribute_axes.iter().rev() {
            tuple.push(idx % card);
            idx /= card;
        }
        tuple.reverse();
        tuple
    }

    pub fn tuple_index(&self, tuple: &[usize]) -> usize {
        let mut idx = 0;
        for (&(_, card), &v) in self.attribute_axes.iter().zip(tuple) {
            assert!(v < card);
            idx = idx * card + v;
        }
        idx
    }

    /// Deterministic template caption for an attribute tuple.
    pub fn caption(&self, tuple: &[usize]) -> Vec<u32> {
        assert_eq!(tuple.len(), self.attribute_axes.len());
        tuple
            .iter()
            .enumerate()
            .map(|(axis, &v)| self.value_tokens[axis][v])
            .collect()
    }

    /// Fixed random linear embedding of the one-hot attribute encoding
    /// plus seeded Gaussian jitter.
    pub fn features(&self, tuple: &[usize]) -> Vec<f64> {
        let oh_dim = self.onehot_dim();
        let mut onehot = vec![0.0; oh_dim];
        let mut off = 0;
        for (axis, &(_, card)) in self.attribute_axes.iter().enumerate() {
            onehot[off + tuple[axis]] = 1.0;
            off += card;
        }
        let mut proj_rng = rng_for(self.seed, 0xfea7);
        let mut out = vec![0.0; self.feature_dim];
        // row-major (feature_dim × onehot_dim) projection drawn once per world
        for o in out.iter_mut() {
            for &x in &onehot {
                let w = gauss(&mut proj_rng);
                *o += w * x;
            }
        }
        let idx = self.tuple_index(tuple) as u64;
        let mut jitter_rng = rng_for(self.seed, 0x717e4 ^ idx.wrapping_mul(0x9e37));
        for o in out.iter_mut() {
            *o += self.jitter_sigma * gauss(&mut jitter_rng);
        }
        out
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub features: Vec<f64>,
    pub attributes: Vec<usize>,
    pub gold_caption: Vec<u32>,
}

/// Sample image records. Without replacement, `n` must not exceed the
/// number of distinct attribute tuples.
pub fn gen_image_dataset(
    world: &WorldSpec,
    n: usize,
    seed: u64,
    with_replacement: bool,
) -> Result<Vec<ImageRecord>> {
    let cap = world.num_tuples();
    let indices: Vec<usize> = if with_replacement {
        let mut rng = rng_for(seed, 0x10a9e ^ 0);
        (0..n).map(|_| rng.gen_range(0..cap)).collect()
    } else {
        if n > cap {
            return Err(EcftError::WorldExhausted {
                requested: n,
                capacity: cap,
            });
        }
        let mut all: Vec<usize> = (0..cap).collect();
        let mut rng = rng_for(seed, 0x10a9e ^ 1);
        all.shuffle(&mut rng);
        all.truncate(n);
        all
    };
    Ok(indices
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let tuple = world.tuple_from_index(idx);
            ImageRecord {
                image_id: i as u64,
                features: world.features(&tuple),
                attributes: tuple.clone(),
                gold_caption: world.caption(&tuple),
            }
        })
        .collect())
}

/// Token counts over a corpus, for logit-mask construction.
pub fn token_counts(corpus: &MonolingualCorpus) -> BTreeMap<u32, u64> {
    let mut counts = BTreeMap::new();
    for s in &corpus.sentences {
        for &t in s {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------
// JSONL interfaces

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    lang: String,
    tokens: Vec<u32>,
}

pub fn write_corpus_jsonl(path: &Path, corpus: &MonolingualCorpus, vocab: &Vocabulary) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let lang = vocab.languages[corpus.lang.0 as usize].clone();
    for s in &corpus.sentences {
        let line = CorpusLine {
            lang: lang.clone(),
            tokens: s.clone(),
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path, vocab: &Vocabulary, tier: ResourceTier) -> Result<MonolingualCorpus> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lang = None;
    let mut sentences = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(&line)?;
        let id = vocab.lang_by_name(&rec.lang)?;
        if lang.is_none() {
            lang = Some(id);
        }
        sentences.push(rec.tokens);
    }
    let lang = lang.ok_or(EcftError::EmptyInput("corpus file"))?;
    Ok(MonolingualCorpus {
        lang,
        sentences,
        resource_tier: tier,
    })
}

#[derive(Serialize, Deserialize)]
struct ImageLine {
    image_id: u64,
    features: Vec<f64>,
    caption_tokens: Vec<u32>,
}

pub fn write_images_jsonl(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = ImageLine {
            image_id: r.image_id,
            features: r.features.clone(),
            caption_tokens: r.gold_caption.clone(),
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Ingestion path for externally precomputed (feature, caption) pairs.
/// Attributes are unknown for external data and stored empty.
pub fn read_images_jsonl(path: &Path) -> Result<Vec<ImageRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageLine = serde_json::from_str(&line)?;
        out.push(ImageRecord {
            image_id: rec.image_id,
            features: rec.features,
            attributes: Vec::new(),
            gold_caption: rec.caption_tokens,
        });
    }
    if out.is_empty() {
        return Err(EcftError::EmptyInput("image file"));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct EvalLine {
    src_tokens: Vec<u32>,
    ref_tokens: Vec<u32>,
    direction: String,
}

pub fn write_eval_jsonl(path: &Path, pairs: &[EvalPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        let line = EvalLine {
            src_tokens: p.src_tokens.clone(),
            ref_tokens: p.ref_tokens.clone(),
            direction: p.direction.as_str().to_string(),
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_eval_jsonl(path: &Path) -> Result<Vec<EvalPair>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalLine = serde_json::from_str(&line)?;
        out.push(EvalPair {
            src_tokens: rec.src_tokens,
            ref_tokens: rec.ref_tokens,
            direction: Direction::parse(&rec.direction)?,
        });
    }
    if out.is_empty() {
        return Err(EcftError::EmptyInput("eval file"));
    }
    Ok(out)
}
