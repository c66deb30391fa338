//! Full evaluation of a sign-mode model on one corpus split: translation
//! metrics, aligner WER, bucket analyses and the embedding-geometry report.

use super::{Result, TrainError};
use crate::ctc::{collapse, force_align, min_frames, CtcError};
use crate::data::CorpusSplits;
use crate::metrics::{
    bleu4, chrf, freq_bucket_f1, geometry_report, length_bucket_bleu, rouge_l_f1, BucketSpec,
    GeometryInput, GeometryReport,
};
use crate::model::Model;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub beam: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub chrf: f64,
    /// Corpus WER of the greedy CTC collapse against the gloss reference.
    pub aligner_wer: Option<f64>,
    /// F1 per train-frequency bucket (low/medium/high); absent buckets are
    /// omitted.
    pub freq_f1: BTreeMap<String, f64>,
    /// BLEU per reference-length bucket (short/medium/long).
    pub length_bleu: BTreeMap<String, f64>,
    pub geometry: Option<GeometryReport>,
    /// A few example translations for the report.
    pub examples: Vec<(String, String, String)>,
}

/// Translate one sample's features.
pub fn translate_sign(model: &Model, frames: &Tensor, beam: usize, corpus: &CorpusSplits) -> Result<Vec<String>> {
    let emb = model.embed_frames_eval(frames)?;
    let h = model.encode_eval(&emb)?;
    let out = model.generate(&h, beam)?;
    Ok(corpus.word_vocab.decode_words(&out))
}

/// Evaluate on `split` with the given beam. `gloss_table` powers the
/// geometry report; when absent and the model carries no table, geometry is
/// omitted.
pub fn evaluate_model(
    model: &Model,
    corpus: &CorpusSplits,
    split: &str,
    beam: usize,
    buckets: &BucketSpec,
    gloss_table: Option<&Tensor>,
) -> Result<EvalReport> {
    let triples = corpus
        .split(split)
        .ok_or_else(|| TrainError::Config(format!("unknown split {split}")))?;
    if triples.is_empty() {
        return Err(TrainError::Config(format!("split {split} is empty")));
    }
    let mut hyps = Vec::with_capacity(triples.len());
    let refs: Vec<Vec<String>> = triples.iter().map(|t| t.text.clone()).collect();
    let mut wer_pairs: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut sign_embeddings = Vec::with_capacity(triples.len());
    let mut gloss_refs = Vec::with_capacity(triples.len());
    let mut alignments = Vec::with_capacity(triples.len());

    for t in triples {
        hyps.push(translate_sign(model, &t.frames, beam, corpus)?);
        let gloss_ids = corpus.gloss_vocab.encode_gloss_seq(&t.gloss);
        if model.config.has_ctc_head {
            let emb = model.embed_frames_eval(&t.frames)?;
            let posterior = model.ctc_posterior_eval(&emb)?;
            // Greedy per-frame argmax, collapsed.
            let (z, c) = (posterior.log_probs.shape()[0], posterior.log_probs.shape()[1]);
            let mut path = Vec::with_capacity(z);
            for r in 0..z {
                let row = &posterior.log_probs.data()[r * c..(r + 1) * c];
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                path.push(best);
            }
            wer_pairs.push((collapse(&path, c - 1), gloss_ids.clone()));
            let feasible = min_frames(&gloss_ids) <= z;
            let align = if feasible {
                match force_align(&posterior.log_probs, &gloss_ids) {
                    Ok(a) => Some(a),
                    Err(CtcError::InfeasibleAlignment { .. }) => None,
                    Err(e) => return Err(e.into()),
                }
            } else {
                None
            };
            sign_embeddings.push(emb);
            alignments.push(align);
            gloss_refs.push(gloss_ids);
        }
    }

    // Geometry compares vectors in the space the encoder consumes, so the
    // gloss table is scaled exactly like an embedding lookup.
    let table = gloss_table.or_else(|| model.gloss_table());
    let geometry = match table {
        Some(table) if !sign_embeddings.is_empty() => {
            let scale = model.emb_scale();
            let scaled = Tensor::new(
                table.shape().to_vec(),
                table.data().iter().map(|v| v * scale).collect(),
            )
            .map_err(TrainError::Tensor)?;
            Some(geometry_report(&GeometryInput {
                sign_embeddings: &sign_embeddings,
                gloss_table: &scaled,
                gloss_refs: &gloss_refs,
                alignments: &alignments,
                middle_frame: false,
            })?)
        }
        _ => None,
    };

    let train_freqs = corpus.word_vocab.freq_map();
    let freq = freq_bucket_f1(&hyps, &refs, &train_freqs, buckets)?;
    let length = length_bucket_bleu(&hyps, &refs, buckets)?;
    let examples = triples
        .iter()
        .zip(&hyps)
        .take(5)
        .map(|(t, h)| (t.id.clone(), t.text.join(" "), h.join(" ")))
        .collect();

    Ok(EvalReport {
        split: split.to_string(),
        samples: triples.len(),
        beam,
        bleu4: bleu4(&hyps, &refs)?,
        rouge_l: rouge_l_f1(&hyps, &refs)?,
        chrf: chrf(&hyps, &refs)?,
        aligner_wer: if wer_pairs.is_empty() {
            None
        } else {
            Some(crate::ctc::corpus_wer(&wer_pairs))
        },
        freq_f1: freq.into_iter().map(|(b, v)| (b.freq_name().to_string(), v)).collect(),
        length_bleu: length.into_iter().map(|(b, v)| (b.len_name().to_string(), v)).collect(),
        geometry,
        examples,
    })
}
