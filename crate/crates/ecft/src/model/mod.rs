//! The tiny multilingual encoder-decoder, its image adapter, the receiver
//! aggregators, and denoising pretraining.

mod forward;
mod infer;
mod pretrain;

pub use forward::*;
pub use infer::*;
pub use pretrain::*;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::synth_world::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    ClsToken,
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// unroll length K of the image adapter
    pub adapter_len: usize,
    pub feature_dim: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default toy dimensions: 2+2 layers, 4 heads, d=128, f=256.
    pub fn toy(vocab_size: usize, feature_dim: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            d_ff: 256,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            adapter_len: 32,
            feature_dim,
            max_seq: 160,
            seed,
        }
    }

    /// Smaller preset for fast test runs.
    pub fn tiny(vocab_size: usize, feature_dim: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 32,
            d_ff: 64,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            adapter_len: 8,
            feature_dim,
            max_seq: 160,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone)]
pub struct LnIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct FfIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncLayerIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ff: FfIds,
}

#[derive(Debug, Clone)]
pub struct DecLayerIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub lnx: LnIds,
    pub xattn: AttnIds,
    pub ln2: LnIds,
    pub ff: FfIds,
}

#[derive(Debug, Clone)]
pub struct GruIds {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub uh: ParamId,
    pub bh: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub embed: ParamId,
    pub enc: Vec<EncLayerIds>,
    pub enc_ln_f: LnIds,
    pub dec: Vec<DecLayerIds>,
    pub dec_ln_f: LnIds,
    /// feature vector -> initial adapter hidden state
    pub adapter_in_w: ParamId,
    pub adapter_in_b: ParamId,
    /// learned constant input fed at each unroll step
    pub adapter_step_in: ParamId,
    pub adapter_gru: GruIds,
    pub agg_gru: GruIds,
    pub agg_rnn_proj_w: ParamId,
    pub agg_rnn_proj_b: ParamId,
    pub agg_cls_proj_w: ParamId,
    pub agg_cls_proj_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub ids: ModelIds,
}

const INIT_STD: f64 = 0.02;

fn add_ln(store: &mut ParamStore, name: &str, d: usize) -> LnIds {
    LnIds {
        g: store.add_const(&format!("{name}.g"), 1, d, 1.0),
        b: store.add_const(&format!("{name}.b"), 1, d, 0.0),
    }
}

fn add_attn(store: &mut ParamStore, name: &str, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> AttnIds {
    AttnIds {
        wq: store.add_normal(&format!("{name}.wq"), d, d, INIT_STD, rng),
        bq: store.add_const(&format!("{name}.bq"), 1, d, 0.0),
        wk: store.add_normal(&format!("{name}.wk"), d, d, INIT_STD, rng),
        bk: store.add_const(&format!("{name}.bk"), 1, d, 0.0),
        wv: store.add_normal(&format!("{name}.wv"), d, d, INIT_STD, rng),
        bv: store.add_const(&format!("{name}.bv"), 1, d, 0.0),
        wo: store.add_normal(&format!("{name}.wo"), d, d, INIT_STD, rng),
        bo: store.add_const(&format!("{name}.bo"), 1, d, 0.0),
    }
}

fn add_ff(store: &mut ParamStore, name: &str, d: usize, f: usize, rng: &mut rand_chacha::ChaCha8Rng) -> FfIds {
    FfIds {
        w1: store.add_normal(&format!("{name}.w1"), d, f, INIT_STD, rng),
        b1: store.add_const(&format!("{name}.b1"), 1, f, 0.0),
        w2: store.add_normal(&format!("{name}.w2"), f, d, INIT_STD, rng),
        b2: store.add_const(&format!("{name}.b2"), 1, d, 0.0),
    }
}

fn add_gru(store: &mut ParamStore, name: &str, din: usize, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> GruIds {
    GruIds {
        wz: store.add_normal(&format!("{name}.wz"), din, d, INIT_STD, rng),
        uz: store.add_normal(&format!("{name}.uz"), d, d, INIT_STD, rng),
        bz: store.add_const(&format!("{name}.bz"), 1, d, 0.0),
        wr: store.add_normal(&format!("{name}.wr"), din, d, INIT_STD, rng),
        ur: store.add_normal(&format!("{name}.ur"), d, d, INIT_STD, rng),
        br: store.add_const(&format!("{name}.br"), 1, d, 0.0),
        wh: store.add_normal(&format!("{name}.wh"), din, d, INIT_STD, rng),
        uh: store.add_normal(&format!("{name}.uh"), d, d, INIT_STD, rng),
        bh: store.add_const(&format!("{name}.bh"), 1, d, 0.0),
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Model {
        assert!(cfg.d_model % cfg.heads == 0, "d_model must divide by heads");
        let mut store = ParamStore::new();
        let mut rng = rng_for(cfg.seed, 0x0de1);
        let embed = store.add_normal("embed", cfg.vocab_size, cfg.d_model, INIT_STD, &mut rng);
        let d = cfg.d_model;
        let f = cfg.d_ff;

        let mut enc = Vec::new();
        for i in 0..cfg.enc_layers {
            enc.push(EncLayerIds {
                ln1: add_ln(&mut store, &format!("enc.l{i}.ln1"), d),
                attn: add_attn(&mut store, &format!("enc.l{i}.attn"), d, &mut rng),
                ln2: add_ln(&mut store, &format!("enc.l{i}.ln2"), d),
                ff: add_ff(&mut store, &format!("enc.l{i}.ff"), d, f, &mut rng),
            });
        }
        let enc_ln_f = add_ln(&mut store, "enc.ln_f", d);

        let mut dec = Vec::new();
        for i in 0..cfg.dec_layers {
            dec.push(DecLayerIds {
                ln1: add_ln(&mut store, &format!("dec.l{i}.ln1"), d),
                attn: add_attn(&mut store, &format!("dec.l{i}.attn"), d, &mut rng),
                lnx: add_ln(&mut store, &format!("dec.l{i}.lnx"), d),
                xattn: add_attn(&mut store, &format!("dec.l{i}.xattn"), d, &mut rng),
                ln2: add_ln(&mut store, &format!("dec.l{i}.ln2"), d),
                ff: add_ff(&mut store, &format!("dec.l{i}.ff"), d, f, &mut rng),
            });
        }
        let dec_ln_f = add_ln(&mut store, "dec.ln_f", d);

        let adapter_in_w = store.add_normal("adapter.in.w", cfg.feature_dim, d, 0.2, &mut rng);
        let adapter_in_b = store.add_const("adapter.in.b", 1, d, 0.0);
        let adapter_step_in = store.add_normal("adapter.step_in", 1, d, 0.2, &mut rng);
        let adapter_gru = add_gru(&mut store, "adapter.gru", d, d, &mut rng);
        let agg_gru = add_gru(&mut store, "agg.gru", d, d, &mut rng);
        let agg_rnn_proj_w = store.add_normal("agg.rnn_proj.w", d, cfg.feature_dim, 0.2, &mut rng);
        let agg_rnn_proj_b = store.add_const("agg.rnn_proj.b", 1, cfg.feature_dim, 0.0);
        let agg_cls_proj_w = store.add_normal("agg.cls_proj.w", d, cfg.feature_dim, 0.2, &mut rng);
        let agg_cls_proj_b = store.add_const("agg.cls_proj.b", 1, cfg.feature_dim, 0.0);

        let ids = ModelIds {
            embed,
            enc,
            enc_ln_f,
            dec,
            dec_ln_f,
            adapter_in_w,
            adapter_in_b,
            adapter_step_in,
            adapter_gru,
            agg_gru,
            agg_rnn_proj_w,
            agg_rnn_proj_b,
            agg_cls_proj_w,
            agg_cls_proj_b,
        };
        Model { cfg, store, ids }
    }

    /// Rebuild the id table after loading a store from a checkpoint.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Model {
        let fresh = Model::new(cfg.clone());
        assert_eq!(
            fresh.store.len(),
            store.len(),
            "checkpoint parameter count does not match config"
        );
        Model {
            cfg,
            store,
            ids: fresh.ids,
        }
    }
}

/// Fixed sinusoidal positional encoding rows `[pos0..len)`, each of dim d.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        positional_row(pos, d, &mut out[pos * d..(pos + 1) * d]);
    }
    out
}

/// One row of the sinusoidal table, for incremental decoding.
pub fn positional_row(pos: usize, d: usize, out: &mut [f64]) {
    for i in 0..d / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
}
