//! Cross-modality mix-up and the JSD regularizer.
//!
//! Mix-up builds one slot per gloss: with probability λ the slot carries the
//! gloss embedding, otherwise the aligned frame-feature segment
//! `F[l_v ..= r_v]`. λ is the probability of substituting the gloss
//! embedding, so λ = 0 leaves every slot as frames (the baseline) and λ = 1
//! swaps every slot for its gloss embedding. One uniform draw is consumed
//! per slot regardless of the outcome, which keeps other streams unaffected
//! by the chosen ratio.

use crate::ctc::AlignmentResult;
use crate::model::{Forward, Model, ModelError};
use crate::rng::SeededRng;
use crate::tensor::{Graph, NodeId, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MixupError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MixupError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupMode {
    /// Fixed λ.
    Static,
    /// λ from the aligner confidence: sigmoid(P(π*|h) − 0.5).
    Dynamic,
}

/// Distribution of the per-slot draw `p`. The standard-normal variant exists
/// only as a fidelity flag; λ sweeps are meaningful under the uniform draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawDistribution {
    Uniform01,
    StdNormal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixupPolicy {
    pub mode: MixupMode,
    pub lambda: f64,
    pub draw: DrawDistribution,
    /// Ablation: stop gradients on the pure-frame branch of the JSD term so
    /// the mixed branch chases the frame branch.
    pub stop_frame_grad: bool,
}

impl Default for MixupPolicy {
    fn default() -> Self {
        MixupPolicy {
            mode: MixupMode::Static,
            lambda: 0.6,
            draw: DrawDistribution::Uniform01,
            stop_frame_grad: false,
        }
    }
}

impl MixupPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.mode == MixupMode::Static && !(0.0..=1.0).contains(&self.lambda) {
            return Err(MixupError::Contract(format!("static lambda {} not in [0,1]", self.lambda)));
        }
        Ok(())
    }

    /// Effective λ for one sample.
    pub fn effective_lambda(&self, alignment: &AlignmentResult) -> f64 {
        match self.mode {
            MixupMode::Static => self.lambda,
            MixupMode::Dynamic => dynamic_lambda(alignment),
        }
    }
}

/// λ = sigmoid(P(π*|h) − 0.5); stays inside (0.377, 0.623).
pub fn dynamic_lambda(alignment: &AlignmentResult) -> f64 {
    let p = alignment.path_prob();
    1.0 / (1.0 + (-(p - 0.5)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Frame,
    Gloss,
}

/// The mixed-modal input M: one slot per gloss, flattened into a single
/// embedding sequence (positional encodings are applied by the encoder).
#[derive(Debug)]
pub struct MixedSequence {
    /// Flattened `[L', hidden]` sequence in the graph.
    pub node: NodeId,
    pub provenance: Vec<Provenance>,
    /// Per-slot draws p_v, recorded in slot order.
    pub draws: Vec<f64>,
    pub lambda: f64,
    pub flat_len: usize,
}

impl MixedSequence {
    pub fn gloss_slots(&self) -> usize {
        self.provenance.iter().filter(|p| **p == Provenance::Gloss).count()
    }
}

/// Build M from embedded frames and the model's gloss table.
///
/// `frames_emb` must be the `[Z, hidden]` sign-embedding node of the same
/// graph. Draws come from `rng` (one per slot, consumed regardless of
/// outcome): slot v is the gloss embedding iff `p_v < λ`.
pub fn build_mixed(
    f: &mut Forward,
    model: &Model,
    frames_emb: NodeId,
    gloss_ref: &[usize],
    alignment: &AlignmentResult,
    policy: &MixupPolicy,
    rng: &mut SeededRng,
) -> Result<MixedSequence> {
    policy.validate()?;
    if alignment.boundaries.len() != gloss_ref.len() {
        return Err(MixupError::Contract(format!(
            "alignment has {} boundary pairs for {} glosses",
            alignment.boundaries.len(),
            gloss_ref.len()
        )));
    }
    let frames_shape = f.g.value(frames_emb).shape().to_vec();
    if frames_shape.len() != 2 || frames_shape[1] != model.config.hidden {
        return Err(MixupError::Contract(format!(
            "frame embeddings {:?} do not match hidden size {}",
            frames_shape, model.config.hidden
        )));
    }
    let z = frames_shape[0];
    if z < gloss_ref.len() {
        return Err(MixupError::Contract(format!(
            "{} frames cannot host {} gloss slots",
            z,
            gloss_ref.len()
        )));
    }
    let lambda = policy.effective_lambda(alignment);

    let mut provenance = Vec::with_capacity(gloss_ref.len());
    let mut draws = Vec::with_capacity(gloss_ref.len());
    let mut parts = Vec::with_capacity(gloss_ref.len());
    let mut flat_len = 0usize;
    for (v, &gloss) in gloss_ref.iter().enumerate() {
        let p = match policy.draw {
            DrawDistribution::Uniform01 => rng.uniform01(),
            DrawDistribution::StdNormal => rng.std_normal(),
        };
        draws.push(p);
        if p < lambda {
            provenance.push(Provenance::Gloss);
            parts.push(model.embed_gloss_tokens(f, &[gloss])?);
            flat_len += 1;
        } else {
            let (l, r) = alignment.boundaries[v];
            provenance.push(Provenance::Frame);
            parts.push(f.g.slice(frames_emb, 0, l, r - l + 1)?);
            flat_len += r - l + 1;
        }
    }
    let node = f.g.concat(0, &parts)?;
    debug_assert_eq!(f.g.value(node).shape()[0], flat_len);
    Ok(MixedSequence { node, provenance, draws, lambda, flat_len })
}

/// Σ_u JSD(P_u ‖ Q_u) over aligned per-position output distributions.
///
/// Both inputs are `[U, vocab]` probability rows from teacher-forced decodes
/// of the same target. Gradients flow into both branches; wrap one side in a
/// constant to stop them.
pub fn jsd_loss(g: &mut Graph, dist_frames: NodeId, dist_mixed: NodeId) -> Result<NodeId> {
    let p_shape = g.value(dist_frames).shape().to_vec();
    let q_shape = g.value(dist_mixed).shape().to_vec();
    if p_shape != q_shape {
        return Err(MixupError::Contract(format!(
            "distribution shapes differ: {:?} vs {:?}",
            p_shape, q_shape
        )));
    }
    if p_shape.len() != 2 {
        return Err(MixupError::Contract(format!("expected [U, vocab] rows, got {:?}", p_shape)));
    }
    for (name, node) in [("frames", dist_frames), ("mixed", dist_mixed)] {
        let t = g.value(node);
        let cols = p_shape[1];
        for r in 0..p_shape[0] {
            let s: f64 = t.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(MixupError::Contract(format!(
                    "{} distribution row {} sums to {}, not 1",
                    name, r, s
                )));
            }
            let _ = cols;
        }
    }
    let sum = g.add(dist_frames, dist_mixed)?;
    let mid = g.scale(sum, 0.5)?;
    let kl_p = g.kl_div(dist_frames, mid)?;
    let kl_q = g.kl_div(dist_mixed, mid)?;
    let total = g.add(kl_p, kl_q)?;
    Ok(g.scale(total, 0.5)?)
}
