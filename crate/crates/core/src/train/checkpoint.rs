//! Versioned JSON checkpoints with write-then-rename atomicity.
//!
//! f64 values survive the JSON round trip bitwise (shortest round-trip
//! formatting), so a saved model evaluates identically after loading.

use super::optim::AdamState;
use super::TrainError;
use crate::data::Vocab;
use crate::model::{Model, ModelConfig, ParamSet};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// Trainer bookkeeping needed to resume at an epoch boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub next_epoch: usize,
    pub best_dev_bleu: f64,
    pub evals_since_improve: usize,
    pub evals_since_decay: usize,
    pub lr: f64,
    /// Optimizer steps taken so far (drives the warmup ramp).
    #[serde(default)]
    pub steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<SavedParam>,
    pub word_vocab: Vec<(String, u64)>,
    pub gloss_vocab: Vec<(String, u64)>,
    #[serde(default)]
    pub optimizer: Option<AdamState>,
    #[serde(default)]
    pub trainer: Option<TrainerState>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        word_vocab: &Vocab,
        gloss_vocab: &Vocab,
        optimizer: Option<AdamState>,
        trainer: Option<TrainerState>,
    ) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, p)| SavedParam {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
                trainable: p.trainable,
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params,
            word_vocab: word_vocab.pairs(),
            gloss_vocab: gloss_vocab.pairs(),
            optimizer,
            trainer,
        }
    }

    /// Atomic save: write a temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let file = fs::File::create(&tmp)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file = fs::File::open(path)
            .map_err(|e| TrainError::Config(format!("cannot open checkpoint {}: {}", path.display(), e)))?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(TrainError::Config(format!(
                "checkpoint version {} unsupported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }

    pub fn into_model(self) -> Result<(Model, Vocab, Vocab, Option<AdamState>, Option<TrainerState>), TrainError> {
        let mut params = ParamSet::default();
        for p in self.params {
            let t = Tensor::new(p.shape, p.data)
                .map_err(|e| TrainError::Config(format!("checkpoint parameter {}: {}", p.name, e)))?;
            params.insert(&p.name, t, p.trainable);
        }
        let model = Model::from_params(self.config, params)?;
        Ok((
            model,
            Vocab::from_pairs(self.word_vocab),
            Vocab::from_pairs(self.gloss_vocab),
            self.optimizer,
            self.trainer,
        ))
    }

    /// The tensor stored under `name`, if present.
    pub fn param_tensor(&self, name: &str) -> Option<Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| Tensor::new(p.shape.clone(), p.data.clone()).expect("stored param is valid"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, SyntheticSpec};
    use crate::model::ModelConfig;

    fn small_corpus() -> crate::data::CorpusSplits {
        let spec = SyntheticSpec {
            gloss_vocab: 6,
            word_vocab: 16,
            train: 10,
            dev: 3,
            test: 3,
            gloss_len: (2, 3),
            frames_per_gloss: (2, 3),
            feat_dim: 4,
            sigma: 0.1,
            text_noise: 0.0,
            seed: 5,
        };
        generate_corpus(&spec).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_on_params() {
        let corpus = small_corpus();
        let mut cfg = ModelConfig::desk_default(
            corpus.gloss_vocab.len(),
            corpus.word_vocab.len(),
            corpus.feat_dim(),
        );
        cfg.hidden = 16;
        cfg.feedforward = 24;
        cfg.heads = 2;
        let model = Model::new(cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint::from_model(&model, &corpus.word_vocab, &corpus.gloss_vocab, None, None);
        ck.save(&path).unwrap();
        let (loaded, wv, gv, _, _) = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(wv, corpus.word_vocab);
        assert_eq!(gv, corpus.gloss_vocab);
        for (id, p) in model.params.iter() {
            let q = loaded.params.get(id);
            assert_eq!(p.name, q.name);
            assert_eq!(p.trainable, q.trainable);
            assert_eq!(p.tensor.fingerprint(), q.tensor.fingerprint(), "param {}", p.name);
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let corpus = small_corpus();
        let mut cfg = ModelConfig::desk_default(
            corpus.gloss_vocab.len(),
            corpus.word_vocab.len(),
            corpus.feat_dim(),
        );
        cfg.hidden = 16;
        cfg.feedforward = 24;
        cfg.heads = 2;
        let model = Model::new(cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ck = Checkpoint::from_model(&model, &corpus.word_vocab, &corpus.gloss_vocab, None, None);
        ck.version = 99;
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(TrainError::Config(_))));
    }

    #[test]
    fn no_stale_temp_file_after_save() {
        let corpus = small_corpus();
        let mut cfg = ModelConfig::desk_default(
            corpus.gloss_vocab.len(),
            corpus.word_vocab.len(),
            corpus.feat_dim(),
        );
        cfg.hidden = 16;
        cfg.feedforward = 24;
        cfg.heads = 2;
        let model = Model::new(cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::from_model(&model, &corpus.word_vocab, &corpus.gloss_vocab, None, None)
            .save(&path)
            .unwrap();
        assert!(path.exists());
        assert!(!path.with_extension("tmp").exists());
    }
}
