//! Multi-teacher gloss-to-text knowledge distillation.
//!
//! Teachers are the same encoder-decoder in text mode, diversified by seed
//! and by a seeded subset of the train split. Distillation materializes the
//! multi-reference dataset: for every train sample, the original text plus
//! one beam-decoded translation per teacher, `(K+1)·N` records in total.

use crate::data::{CorpusSplits, DataError, Vocab};
use crate::model::{Model, ModelConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::train::{train_text_model, Checkpoint, ExperimentConfig, Result, TrainError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// A trained gloss-to-text teacher.
pub struct TeacherModel {
    pub model: Model,
    /// 1-based teacher index; source_k in the distilled records.
    pub k: usize,
    pub seed: u64,
    pub subset_size: usize,
    pub dev_bleu: f64,
}

/// One record of the distilled dataset. `source_k = 0` is the original
/// reference; `features_ref` names the corpus sample carrying the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub id: String,
    pub source_k: usize,
    pub features_ref: String,
    pub gloss: Vec<String>,
    pub text: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentedDataset {
    pub records: Vec<AugmentedRecord>,
    /// Number of teachers that contributed.
    pub teachers: usize,
    /// Decodes that came back empty (kept, with empty text).
    pub empty_decodes: usize,
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Restrict to the first `k` teachers (plus the originals).
    pub fn with_max_teachers(&self, k: usize) -> AugmentedDataset {
        AugmentedDataset {
            records: self.records.iter().filter(|r| r.source_k <= k).cloned().collect(),
            teachers: k.min(self.teachers),
            empty_decodes: self.empty_decodes,
        }
    }

    pub fn save_jsonl(&self, path: &Path) -> std::result::Result<(), DataError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> std::result::Result<Self, DataError> {
        let file = fs::File::open(path)?;
        let mut records = Vec::new();
        let mut teachers = 0;
        for (ln, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: AugmentedRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                file: path.display().to_string(),
                line: ln + 1,
                msg: e.to_string(),
            })?;
            teachers = teachers.max(r.source_k);
            records.push(r);
        }
        Ok(AugmentedDataset { records, teachers, empty_decodes: 0 })
    }
}

/// Teacher architecture for a corpus: the student encoder/decoder in text
/// mode with a trainable gloss table.
pub fn teacher_config(student: &ModelConfig) -> ModelConfig {
    student.clone().teacher()
}

/// Train K teachers. Teacher k (1-based) trains with seed `base_seed + k` on
/// a seeded `subset_fraction` sample of the train split.
#[allow(clippy::too_many_arguments)]
pub fn train_teachers(
    corpus: &CorpusSplits,
    k: usize,
    base_seed: u64,
    subset_fraction: f64,
    model_cfg: &ModelConfig,
    optim: &crate::train::OptimConfig,
    epochs: usize,
    out_dir: &Path,
    verbose: bool,
) -> Result<Vec<TeacherModel>> {
    if k == 0 {
        return Err(TrainError::Config("teacher count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&subset_fraction) || subset_fraction == 0.0 {
        return Err(TrainError::Config(format!(
            "subset fraction {} not in (0, 1]",
            subset_fraction
        )));
    }
    if corpus.train.is_empty() {
        return Err(DataError::Spec("corpus has no training samples".into()).into());
    }
    let n = corpus.train.len();
    let take = ((subset_fraction * n as f64).floor() as usize).clamp(1, n);
    let mut out = Vec::with_capacity(k);
    for idx in 1..=k {
        let seed = base_seed + idx as u64;
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::stream(seed, "teacher-subset", 0).shuffle(&mut order);
        order.truncate(take);
        order.sort_unstable();
        let dir = out_dir.join(format!("teacher-{idx}"));
        let (model, dev_bleu) =
            train_text_model(corpus, &order, model_cfg, optim, epochs, seed, &dir, verbose)?;
        out.push(TeacherModel { model, k: idx, seed, subset_size: take, dev_bleu });
    }
    Ok(out)
}

/// Highest dev BLEU wins; ties break toward the lower seed.
pub fn select_best_teacher(teachers: &[TeacherModel]) -> Result<&TeacherModel> {
    teachers
        .iter()
        .max_by(|a, b| {
            a.dev_bleu
                .partial_cmp(&b.dev_bleu)
                .unwrap()
                .then(b.seed.cmp(&a.seed)) // lower seed preferred on ties
        })
        .ok_or_else(|| TrainError::Config("cannot select from an empty teacher list".into()))
}

/// Beam-decode one gloss sequence with a text-mode model.
pub fn translate_gloss(
    model: &Model,
    gloss_ids: &[usize],
    word_vocab: &Vocab,
    beam: usize,
) -> Result<Vec<String>> {
    let emb = model.embed_gloss_eval(gloss_ids)?;
    let h = model.encode_eval(&emb)?;
    let out = model.generate(&h, beam)?;
    Ok(word_vocab.decode_words(&out))
}

/// Materialize the multi-reference dataset: originals (k=0) plus one
/// decoded text per teacher, grouped per sample.
pub fn distill(
    corpus: &CorpusSplits,
    teachers: &[TeacherModel],
    beam: usize,
) -> Result<AugmentedDataset> {
    let mut records = Vec::with_capacity(corpus.train.len() * (teachers.len() + 1));
    let mut empty_decodes = 0;
    for triple in &corpus.train {
        records.push(AugmentedRecord {
            id: triple.id.clone(),
            source_k: 0,
            features_ref: triple.id.clone(),
            gloss: triple.gloss.clone(),
            text: triple.text.clone(),
        });
        let gloss_ids = corpus.gloss_vocab.encode_gloss_seq(&triple.gloss);
        for teacher in teachers {
            let text = translate_gloss(&teacher.model, &gloss_ids, &corpus.word_vocab, beam)?;
            if text.is_empty() {
                empty_decodes += 1;
            }
            records.push(AugmentedRecord {
                id: triple.id.clone(),
                source_k: teacher.k,
                features_ref: triple.id.clone(),
                gloss: triple.gloss.clone(),
                text,
            });
        }
    }
    Ok(AugmentedDataset { records, teachers: teachers.len(), empty_decodes })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherMeta {
    pub k: usize,
    pub seed: u64,
    pub subset_size: usize,
    pub dev_bleu: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherManifest {
    pub base_seed: u64,
    pub subset_fraction: f64,
    pub teachers: Vec<TeacherMeta>,
}

fn manifest_path(assets: &Path) -> std::path::PathBuf {
    assets.join("teachers").join("manifest.json")
}

/// Train (or reload) the teacher ensemble for this config; the manifest and
/// per-teacher checkpoints live under the assets directory.
pub fn ensure_teachers(cfg: &ExperimentConfig, corpus: &CorpusSplits) -> Result<TeacherManifest> {
    let assets = cfg.assets_dir();
    let path = manifest_path(&assets);
    if path.exists() {
        let manifest: TeacherManifest =
            serde_json::from_reader(BufReader::new(fs::File::open(&path)?))?;
        if manifest.teachers.len() >= cfg.kd.teachers
            && manifest.base_seed == cfg.seed
            && manifest.subset_fraction == cfg.kd.subset_fraction
        {
            return Ok(manifest);
        }
    }
    let student_cfg = cfg.resolved_model_config(corpus);
    let teacher_cfg = teacher_config(&student_cfg);
    let dir = assets.join("teachers");
    fs::create_dir_all(&dir)?;
    let teachers = train_teachers(
        corpus,
        cfg.kd.teachers,
        cfg.seed,
        cfg.kd.subset_fraction,
        &teacher_cfg,
        &cfg.optim,
        cfg.kd.teacher_epochs,
        &dir,
        cfg.verbose,
    )?;
    let mut metas = Vec::with_capacity(teachers.len());
    for t in &teachers {
        let ck_path = dir.join(format!("teacher-{}.ckpt.json", t.k));
        Checkpoint::from_model(&t.model, &corpus.word_vocab, &corpus.gloss_vocab, None, None)
            .save(&ck_path)?;
        metas.push(TeacherMeta {
            k: t.k,
            seed: t.seed,
            subset_size: t.subset_size,
            dev_bleu: t.dev_bleu,
            checkpoint: ck_path.display().to_string(),
        });
    }
    let manifest = TeacherManifest {
        base_seed: cfg.seed,
        subset_fraction: cfg.kd.subset_fraction,
        teachers: metas,
    };
    let tmp = path.with_extension("tmp");
    serde_json::to_writer_pretty(BufWriter::new(fs::File::create(&tmp)?), &manifest)?;
    fs::rename(&tmp, &path)?;
    Ok(manifest)
}

fn best_meta(manifest: &TeacherManifest) -> Result<&TeacherMeta> {
    manifest
        .teachers
        .iter()
        .max_by(|a, b| a.dev_bleu.partial_cmp(&b.dev_bleu).unwrap().then(b.seed.cmp(&a.seed)))
        .ok_or_else(|| TrainError::Config("teacher manifest is empty".into()))
}

/// Gloss embedding table of the best teacher (frozen into the student).
pub fn ensure_best_teacher_table(cfg: &ExperimentConfig, corpus: &CorpusSplits) -> Result<Tensor> {
    let manifest = ensure_teachers(cfg, corpus)?;
    let best = best_meta(&manifest)?;
    let ck = Checkpoint::load(Path::new(&best.checkpoint))?;
    ck.param_tensor("gloss_table")
        .ok_or_else(|| TrainError::Config("teacher checkpoint has no gloss table".into()))
}

/// Load or build the distilled dataset for this config.
pub fn ensure_distilled(cfg: &ExperimentConfig, corpus: &CorpusSplits) -> Result<AugmentedDataset> {
    let assets = cfg.assets_dir();
    let path = assets.join("dmkd.jsonl");
    if path.exists() {
        let existing = AugmentedDataset::load_jsonl(&path)?;
        if existing.teachers >= cfg.kd.teachers {
            return Ok(existing.with_max_teachers(cfg.kd.teachers));
        }
    }
    if cfg.kd.teachers == 0 {
        // K = 0: the distilled set is the original corpus.
        return Ok(distill(corpus, &[], cfg.kd.teacher_beam)?);
    }
    let manifest = ensure_teachers(cfg, corpus)?;
    let mut teachers = Vec::with_capacity(manifest.teachers.len());
    for meta in manifest.teachers.iter().take(cfg.kd.teachers) {
        let (model, _, _, _, _) = Checkpoint::load(Path::new(&meta.checkpoint))?.into_model()?;
        teachers.push(TeacherModel {
            model,
            k: meta.k,
            seed: meta.seed,
            subset_size: meta.subset_size,
            dev_bleu: meta.dev_bleu,
        });
    }
    let aug = distill(corpus, &teachers, cfg.kd.teacher_beam)?;
    aug.save_jsonl(&path)?;
    Ok(aug)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, SyntheticSpec};
    use crate::model::{ModelConfig, EOS};

    fn tiny_corpus(n: usize) -> CorpusSplits {
        generate_corpus(&SyntheticSpec {
            gloss_vocab: 8,
            word_vocab: 20,
            train: n,
            dev: 6,
            test: 6,
            gloss_len: (2, 4),
            frames_per_gloss: (2, 3),
            feat_dim: 4,
            sigma: 0.1,
            text_noise: 0.0,
            seed: 21,
        })
        .unwrap()
    }

    fn tiny_teacher_cfg(corpus: &CorpusSplits) -> ModelConfig {
        let mut c = ModelConfig::desk_default(
            corpus.gloss_vocab.len(),
            corpus.word_vocab.len(),
            corpus.feat_dim(),
        )
        .teacher();
        c.hidden = 16;
        c.feedforward = 24;
        c.heads = 2;
        c.encoder_layers = 1;
        c.decoder_layers = 1;
        c.dropout = 0.0;
        c
    }

    fn fake_teacher(corpus: &CorpusSplits, k: usize, seed: u64, dev_bleu: f64) -> TeacherModel {
        let cfg = tiny_teacher_cfg(corpus);
        TeacherModel {
            model: Model::new(cfg, seed).unwrap(),
            k,
            seed,
            subset_size: corpus.train.len(),
            dev_bleu,
        }
    }

    #[test]
    fn select_best_prefers_higher_bleu_then_lower_seed() {
        let corpus = tiny_corpus(8);
        let teachers = vec![
            fake_teacher(&corpus, 1, 11, 27.35),
            fake_teacher(&corpus, 2, 12, 27.24),
            fake_teacher(&corpus, 3, 13, 27.11),
            fake_teacher(&corpus, 4, 14, 27.02),
        ];
        assert_eq!(select_best_teacher(&teachers).unwrap().k, 1);
        let tied = vec![fake_teacher(&corpus, 1, 30, 20.0), fake_teacher(&corpus, 2, 10, 20.0)];
        assert_eq!(select_best_teacher(&tied).unwrap().seed, 10);
        let single = vec![fake_teacher(&corpus, 1, 5, 1.0)];
        assert_eq!(select_best_teacher(&single).unwrap().k, 1);
        assert!(select_best_teacher(&[]).is_err());
    }

    #[test]
    fn distill_size_identity_holds_for_every_k() {
        let corpus = tiny_corpus(10);
        for k in 0..3usize {
            let teachers: Vec<TeacherModel> =
                (1..=k).map(|i| fake_teacher(&corpus, i, 100 + i as u64, i as f64)).collect();
            let aug = distill(&corpus, &teachers, 1).unwrap();
            assert_eq!(aug.len(), (k + 1) * corpus.train.len(), "K={}", k);
        }
    }

    #[test]
    fn distill_k0_rows_equal_originals() {
        let corpus = tiny_corpus(10);
        let teachers = vec![fake_teacher(&corpus, 1, 50, 1.0)];
        let aug = distill(&corpus, &teachers, 1).unwrap();
        for (i, triple) in corpus.train.iter().enumerate() {
            let rec = &aug.records[i * 2];
            assert_eq!(rec.source_k, 0);
            assert_eq!(rec.id, triple.id);
            assert_eq!(rec.features_ref, triple.id);
            assert_eq!(rec.gloss, triple.gloss);
            assert_eq!(rec.text, triple.text);
        }
    }

    #[test]
    fn distill_with_k0_equals_original_corpus() {
        let corpus = tiny_corpus(7);
        let aug = distill(&corpus, &[], 1).unwrap();
        assert_eq!(aug.len(), corpus.train.len());
        assert!(aug.records.iter().all(|r| r.source_k == 0));
    }

    #[test]
    fn empty_decodes_are_kept_and_counted() {
        let corpus = tiny_corpus(5);
        // Teacher whose output layer always peaks on EOS.
        let mut teacher = fake_teacher(&corpus, 1, 60, 1.0);
        let wid = teacher.model.params.id("out.w");
        let shape = teacher.model.params.get(wid).tensor.shape().to_vec();
        teacher.model.params.get_mut(wid).tensor = Tensor::zeros(shape);
        let bid = teacher.model.params.id("out.b");
        let vw = corpus.word_vocab.len();
        let mut bias = vec![0.0; vw];
        bias[EOS] = 50.0;
        teacher.model.params.get_mut(bid).tensor = Tensor::new(vec![vw], bias).unwrap();
        let aug = distill(&corpus, &[teacher], 1).unwrap();
        assert_eq!(aug.empty_decodes, corpus.train.len());
        for r in aug.records.iter().filter(|r| r.source_k == 1) {
            assert!(r.text.is_empty());
        }
    }

    #[test]
    fn jsonl_roundtrip_preserves_records() {
        let corpus = tiny_corpus(6);
        let teachers = vec![fake_teacher(&corpus, 1, 70, 1.0)];
        let aug = distill(&corpus, &teachers, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dmkd.jsonl");
        aug.save_jsonl(&path).unwrap();
        let back = AugmentedDataset::load_jsonl(&path).unwrap();
        assert_eq!(back.records, aug.records);
        assert_eq!(back.teachers, 1);
    }

    #[test]
    fn with_max_teachers_filters_and_keeps_grouping() {
        let corpus = tiny_corpus(4);
        let teachers =
            vec![fake_teacher(&corpus, 1, 80, 1.0), fake_teacher(&corpus, 2, 81, 2.0)];
        let aug = distill(&corpus, &teachers, 1).unwrap();
        let one = aug.with_max_teachers(1);
        assert_eq!(one.len(), 2 * corpus.train.len());
        assert!(one.records.iter().all(|r| r.source_k <= 1));
        let zero = aug.with_max_teachers(0);
        assert_eq!(zero.len(), corpus.train.len());
    }

    #[test]
    fn teacher_training_is_deterministic() {
        let corpus = tiny_corpus(16);
        let cfg = tiny_teacher_cfg(&corpus);
        let optim = crate::train::OptimConfig { batch: 8, ..Default::default() };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = train_teachers(&corpus, 1, 5, 0.8, &cfg, &optim, 2, dir_a.path(), false).unwrap();
        let b = train_teachers(&corpus, 1, 5, 0.8, &cfg, &optim, 2, dir_b.path(), false).unwrap();
        assert_eq!(a[0].dev_bleu.to_bits(), b[0].dev_bleu.to_bits());
        assert_eq!(a[0].subset_size, 12); // floor(0.8 * 16)
        // Param-level determinism, too.
        for (id, p) in a[0].model.params.iter() {
            assert_eq!(
                p.tensor.fingerprint(),
                b[0].model.params.get(id).tensor.fingerprint(),
                "param {}",
                p.name
            );
        }
    }

    #[test]
    fn bad_subset_fraction_is_rejected() {
        let corpus = tiny_corpus(4);
        let cfg = tiny_teacher_cfg(&corpus);
        let optim = crate::train::OptimConfig::default();
        let dir = tempfile::tempdir().unwrap();
        assert!(train_teachers(&corpus, 1, 5, 0.0, &cfg, &optim, 1, dir.path(), false).is_err());
        assert!(train_teachers(&corpus, 1, 5, 1.5, &cfg, &optim, 1, dir.path(), false).is_err());
        assert!(train_teachers(&corpus, 0, 5, 0.5, &cfg, &optim, 1, dir.path(), false).is_err());
    }
}
