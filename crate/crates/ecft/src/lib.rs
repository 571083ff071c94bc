//! Desk-scale emergent-communication fine-tuning for unsupervised
//! machine translation on synthetic languages.
//!
//! The crate provides: synthetic language pairs and an image world with
//! gold captions (`synth_world`), a tiny multilingual encoder-decoder
//! with denoising pretraining (`model`), constrained generation
//! (logit masks, repetition penalty, n-gram blocking, beam search, and a
//! straight-through Gumbel-Softmax sampler in `constrained`), the image
//! reference game (`ec`), iterative backtranslation (`bt`), stage
//! orchestration (`pipeline`), and BLEU evaluation plus reporting
//! (`bleu`, `eval`, `report`).

pub mod bleu;
pub mod bt;
pub mod checkpoint;
pub mod constrained;
pub mod ec;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod synth_world;
pub mod tape;
pub mod tensor;
pub mod vocab;
