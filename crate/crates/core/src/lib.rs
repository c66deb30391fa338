//! Cross-modality data augmentation for end-to-end sign language translation.
//!
//! The crate implements the full training and evaluation stack on top of a
//! small f64 tensor library with reverse-mode differentiation:
//!
//! - [`tensor`]: dense tensors, the computation tape, gradient checking.
//! - [`rng`]: seeded, named random streams (reproducible across platforms).
//! - [`ctc`]: CTC marginals, CTC loss, forced alignment, WER.
//! - [`model`]: the transformer encoder-decoder with sign embedding, frozen
//!   gloss embedding and CTC classifier head.
//! - [`mixup`]: segment-level cross-modality mix-up and the JSD regularizer.
//! - [`kd`]: gloss-to-text teacher training and sequence-level distillation.
//! - [`data`]: synthetic sign-gloss-text corpus generation and storage.
//! - [`metrics`]: BLEU-4, ROUGE-L, ChrF, bucketed scores and the
//!   embedding-geometry report.
//! - [`train`]: the training loop, checkpoints, evaluation, system matrix and
//!   ablation sweeps.
//! - [`cli`]: the command-line front end used by the `xmda` binary.

pub mod cli;
pub mod ctc;
pub mod data;
pub mod kd;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
