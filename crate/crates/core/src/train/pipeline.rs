//! Multi-run orchestration: the four-system comparison matrix, the λ sweep
//! and the teacher-count sweep.

use super::eval::{evaluate_model, EvalReport};
use super::{Checkpoint, ExperimentConfig, Result, System, TrainError};
use crate::data::save_corpus;
use crate::mixup::MixupMode;
use crate::report;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// The six score columns of one system row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemScores {
    pub system: String,
    pub dev_bleu: f64,
    pub dev_rouge: f64,
    pub dev_chrf: f64,
    pub test_bleu: f64,
    pub test_rouge: f64,
    pub test_chrf: f64,
}

impl SystemScores {
    fn from_reports(system: &str, dev: &EvalReport, test: &EvalReport) -> Self {
        SystemScores {
            system: system.to_string(),
            dev_bleu: dev.bleu4,
            dev_rouge: dev.rouge_l,
            dev_chrf: dev.chrf,
            test_bleu: test.bleu4,
            test_rouge: test.rouge_l,
            test_chrf: test.chrf,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedMatrix {
    pub seed: u64,
    pub rows: Vec<SystemScores>,
    pub dev_reports: Vec<EvalReport>,
    pub test_reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixReport {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMatrix>,
    /// Arithmetic mean of the score columns over seeds.
    pub mean: Vec<SystemScores>,
}

impl MatrixReport {
    pub fn mean_row(&self, system: System) -> &SystemScores {
        self.mean.iter().find(|r| r.system == system.name()).expect("system row present")
    }

    pub fn seed_reports(&self, seed: u64) -> &SeedMatrix {
        self.per_seed.iter().find(|s| s.seed == seed).expect("seed present")
    }
}

/// Stage a child config under `dir`, sharing corpus and teacher assets.
fn child_config(
    base: &ExperimentConfig,
    corpus_dir: &Path,
    assets_dir: &Path,
    out_dir: PathBuf,
    seed: u64,
) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.corpus_dir = Some(corpus_dir.display().to_string());
    cfg.assets_dir = Some(assets_dir.display().to_string());
    cfg.out_dir = out_dir.display().to_string();
    cfg.seed = seed;
    cfg
}

/// Make sure the corpus exists on disk once, shared by every run.
fn staged_corpus(base: &ExperimentConfig) -> Result<(PathBuf, crate::data::CorpusSplits)> {
    if let Some(dir) = &base.corpus_dir {
        let path = PathBuf::from(dir);
        let corpus = crate::data::load_corpus(&path)?;
        return Ok((path, corpus));
    }
    let path = PathBuf::from(&base.out_dir).join("corpus");
    if path.join("meta.jsonl").exists() {
        let corpus = crate::data::load_corpus(&path)?;
        return Ok((path, corpus));
    }
    let corpus = crate::data::generate_corpus(&base.synth)?;
    save_corpus(&corpus, &path)?;
    Ok((path, corpus))
}

fn best_model_of(run_dir: &Path) -> Result<crate::model::Model> {
    let (model, _, _, _, _) = Checkpoint::load(&run_dir.join("best.ckpt.json"))?.into_model()?;
    Ok(model)
}

/// Train and evaluate one system; returns (dev report, test report).
fn train_and_eval_system(
    cfg: &ExperimentConfig,
    corpus: &crate::data::CorpusSplits,
    gloss_table: Option<&Tensor>,
) -> Result<(EvalReport, EvalReport)> {
    super::run_train(cfg, None)?;
    let model = best_model_of(Path::new(&cfg.out_dir))?;
    let dev = evaluate_model(&model, corpus, "dev", cfg.eval_beam, &cfg.buckets, gloss_table)?;
    let test = evaluate_model(&model, corpus, "test", cfg.eval_beam, &cfg.buckets, gloss_table)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({ "dev": dev, "test": test }))?;
    fs::write(Path::new(&cfg.out_dir).join("eval.json"), json)?;
    Ok((dev, test))
}

fn mean_rows(per_seed: &[SeedMatrix]) -> Vec<SystemScores> {
    let n = per_seed.len() as f64;
    let mut out = Vec::new();
    for (i, row) in per_seed[0].rows.iter().enumerate() {
        let mut acc = SystemScores {
            system: row.system.clone(),
            dev_bleu: 0.0,
            dev_rouge: 0.0,
            dev_chrf: 0.0,
            test_bleu: 0.0,
            test_rouge: 0.0,
            test_chrf: 0.0,
        };
        for seed_rows in per_seed {
            let r = &seed_rows.rows[i];
            acc.dev_bleu += r.dev_bleu / n;
            acc.dev_rouge += r.dev_rouge / n;
            acc.dev_chrf += r.dev_chrf / n;
            acc.test_bleu += r.test_bleu / n;
            acc.test_rouge += r.test_rouge / n;
            acc.test_chrf += r.test_chrf / n;
        }
        out.push(acc);
    }
    out
}

/// Train and score all four systems for every seed, on one shared corpus.
pub fn run_matrix(base: &ExperimentConfig, seeds: &[u64]) -> Result<MatrixReport> {
    if seeds.is_empty() {
        return Err(TrainError::Config("matrix needs at least one seed".into()));
    }
    let (corpus_dir, corpus) = staged_corpus(base)?;
    let root = PathBuf::from(&base.out_dir);
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let seed_dir = root.join(format!("seed-{seed}"));
        // Teachers (and the frozen gloss table) are shared by the mixup/KD
        // systems of this seed.
        let assets_cfg = child_config(base, &corpus_dir, &seed_dir, seed_dir.clone(), seed)
            .with_system(System::Xmda);
        let table = crate::kd::ensure_best_teacher_table(&assets_cfg, &corpus)?;

        let mut rows = Vec::new();
        let mut dev_reports = Vec::new();
        let mut test_reports = Vec::new();
        for system in System::all() {
            let cfg = child_config(
                base,
                &corpus_dir,
                &seed_dir,
                seed_dir.join(system.name()),
                seed,
            )
            .with_system(system);
            let (dev, test) = train_and_eval_system(&cfg, &corpus, Some(&table))?;
            rows.push(SystemScores::from_reports(system.name(), &dev, &test));
            dev_reports.push(dev);
            test_reports.push(test);
        }
        per_seed.push(SeedMatrix { seed, rows, dev_reports, test_reports });
    }
    let mean = mean_rows(&per_seed);
    let report = MatrixReport { seeds: seeds.to_vec(), per_seed, mean };
    fs::create_dir_all(&root)?;
    fs::write(root.join("matrix.json"), serde_json::to_string_pretty(&report)?)?;
    report::write_matrix_csv(&root.join("matrix.csv"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub label: String,
    pub lambda: Option<f64>,
    pub dev_bleu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaSweepReport {
    pub seed: u64,
    pub points: Vec<LambdaPoint>,
}

/// Dev BLEU of the mix-up system across a λ grid plus the dynamic strategy.
pub fn run_lambda_sweep(base: &ExperimentConfig, lambdas: &[f64]) -> Result<LambdaSweepReport> {
    let (corpus_dir, corpus) = staged_corpus(base)?;
    let root = PathBuf::from(&base.out_dir);
    let seed = base.seed;
    let assets = root.join(format!("seed-{seed}"));
    let mut points = Vec::new();
    let run_one = |label: String, mutate: &dyn Fn(&mut ExperimentConfig)| -> Result<f64> {
        let mut cfg = child_config(base, &corpus_dir, &assets, assets.join(format!("lambda-{label}")), seed)
            .with_system(System::Mixup);
        mutate(&mut cfg);
        // λ = 0 degrades to the baseline configuration by contract.
        super::run_train(&cfg, None)?;
        let model = best_model_of(Path::new(&cfg.out_dir))?;
        let dev = evaluate_model(&model, &corpus, "dev", cfg.eval_beam, &cfg.buckets, None)?;
        Ok(dev.bleu4)
    };
    for &lambda in lambdas {
        let label = format!("{lambda:.1}");
        let bleu = run_one(label.clone(), &|cfg| {
            cfg.mixup.mode = MixupMode::Static;
            cfg.mixup.lambda = lambda;
        })?;
        points.push(LambdaPoint { label, lambda: Some(lambda), dev_bleu: bleu });
    }
    let bleu = run_one("dynamic".into(), &|cfg| {
        cfg.mixup.mode = MixupMode::Dynamic;
    })?;
    points.push(LambdaPoint { label: "dynamic".into(), lambda: None, dev_bleu: bleu });

    let report = LambdaSweepReport { seed, points };
    fs::create_dir_all(&root)?;
    fs::write(root.join("lambda_sweep.json"), serde_json::to_string_pretty(&report)?)?;
    report::write_lambda_csv(&root.join("lambda_sweep.csv"), &report)?;
    report::write_lambda_svg(&root.join("lambda_sweep.svg"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherSweepReport {
    pub seed: u64,
    /// (K, dev BLEU) per teacher count.
    pub points: Vec<(usize, f64)>,
}

/// Dev BLEU of the KD system across teacher counts. Teachers are trained
/// once for the maximum K; smaller K reuse the first K teachers.
pub fn run_teacher_sweep(base: &ExperimentConfig, ks: &[usize]) -> Result<TeacherSweepReport> {
    if ks.is_empty() {
        return Err(TrainError::Config("teacher sweep needs at least one K".into()));
    }
    let (corpus_dir, corpus) = staged_corpus(base)?;
    let root = PathBuf::from(&base.out_dir);
    let seed = base.seed;
    let assets = root.join(format!("seed-{seed}"));
    let kmax = *ks.iter().max().unwrap();
    if kmax > 0 {
        // Materialize the largest distilled set once.
        let mut warm = child_config(base, &corpus_dir, &assets, assets.clone(), seed)
            .with_system(System::Kd);
        warm.kd.teachers = kmax;
        crate::kd::ensure_distilled(&warm, &corpus)?;
    }
    let mut points = Vec::new();
    for &k in ks {
        let mut cfg = child_config(base, &corpus_dir, &assets, assets.join(format!("k-{k}")), seed)
            .with_system(System::Kd);
        cfg.kd.teachers = k;
        super::run_train(&cfg, None)?;
        let model = best_model_of(Path::new(&cfg.out_dir))?;
        let dev = evaluate_model(&model, &corpus, "dev", cfg.eval_beam, &cfg.buckets, None)?;
        points.push((k, dev.bleu4));
    }
    let report = TeacherSweepReport { seed, points };
    fs::create_dir_all(&root)?;
    fs::write(root.join("teacher_sweep.json"), serde_json::to_string_pretty(&report)?)?;
    report::write_teacher_csv(&root.join("teacher_sweep.csv"), &report)?;
    Ok(report)
}
