//! Training: joint loss assembly (MLE + CTC + JSD), the epoch loop with
//! seeded shuffling, dev evaluation, best-checkpoint retention, plateau lr
//! decay, early stopping and epoch-boundary resume.

mod checkpoint;
mod eval;
mod optim;
mod pipeline;

pub use checkpoint::{Checkpoint, TrainerState, CHECKPOINT_VERSION};
pub use eval::{evaluate_model, EvalReport};
pub use optim::{clip_factor, Adam, AdamState, OptimConfig};
pub use pipeline::{
    run_lambda_sweep, run_matrix, run_teacher_sweep, LambdaSweepReport, MatrixReport, SystemScores,
    TeacherSweepReport,
};

use crate::ctc::{min_frames, force_align, CtcError, CtcLossForm};
use crate::data::{CorpusSplits, DataError, SyntheticSpec, Triple, Vocab};
use crate::metrics::{BucketSpec, MetricError};
use crate::mixup::{build_mixed, jsd_loss, MixupError, MixupPolicy};
use crate::model::{Model, ModelConfig, ModelError};
use crate::rng::{mix_salt, SeededRng};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mixup(#[from] MixupError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// The four systems of the comparison matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum System {
    Baseline,
    Mixup,
    Kd,
    Xmda,
}

impl System {
    pub fn all() -> [System; 4] {
        [System::Baseline, System::Mixup, System::Kd, System::Xmda]
    }

    pub fn name(&self) -> &'static str {
        match self {
            System::Baseline => "baseline",
            System::Mixup => "mixup",
            System::Kd => "kd",
            System::Xmda => "xmda",
        }
    }

    /// (enable_mixup, enable_kd)
    pub fn toggles(&self) -> (bool, bool) {
        match self {
            System::Baseline => (false, false),
            System::Mixup => (true, false),
            System::Kd => (false, true),
            System::Xmda => (true, true),
        }
    }

    pub fn from_toggles(mixup: bool, kd: bool) -> System {
        match (mixup, kd) {
            (false, false) => System::Baseline,
            (true, false) => System::Mixup,
            (false, true) => System::Kd,
            (true, true) => System::Xmda,
        }
    }
}

/// Per-batch loss components. The joint loss is their sum; disabled terms
/// contribute exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mle: f64,
    pub ctc: f64,
    pub jsd: f64,
    pub total: f64,
}

/// Knowledge-distillation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub teachers: usize,
    pub subset_fraction: f64,
    pub teacher_epochs: usize,
    pub teacher_beam: usize,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig { teachers: 4, subset_fraction: 0.8, teacher_epochs: 12, teacher_beam: 4 }
    }
}

/// Everything one training run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Load this corpus directory; generate `synth` when absent.
    pub corpus_dir: Option<String>,
    pub synth: SyntheticSpec,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub kd: KdConfig,
    pub mixup: MixupPolicy,
    pub mixup_warmup_epochs: usize,
    pub enable_ctc: bool,
    pub enable_mixup: bool,
    pub enable_kd: bool,
    pub ctc_literal_form: bool,
    pub epochs: usize,
    pub eval_every: usize,
    pub early_stop_patience: usize,
    /// Beam for the periodic dev evaluation that drives model selection.
    pub dev_beam: usize,
    /// Beam for final reports.
    pub eval_beam: usize,
    pub buckets: BucketSpec,
    pub seed: u64,
    pub out_dir: String,
    /// Shared teacher/distillation artifacts (defaults to `out_dir`).
    pub assets_dir: Option<String>,
    /// Print per-batch log lines to stdout as well as the log file.
    pub verbose: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus_dir: None,
            synth: SyntheticSpec::default(),
            // Vocabulary sizes are filled in from the corpus.
            model: ModelConfig::desk_default(1, 8, 1),
            optim: OptimConfig::default(),
            kd: KdConfig::default(),
            mixup: MixupPolicy::default(),
            mixup_warmup_epochs: 2,
            enable_ctc: true,
            enable_mixup: false,
            enable_kd: false,
            ctc_literal_form: false,
            epochs: 10,
            eval_every: 1,
            early_stop_patience: 5,
            dev_beam: 1,
            eval_beam: 4,
            buckets: BucketSpec::desk_default(),
            seed: 1,
            out_dir: "runs/default".into(),
            assets_dir: None,
            verbose: false,
        }
    }
}

impl ExperimentConfig {
    pub fn system(&self) -> System {
        System::from_toggles(self.enable_mixup, self.enable_kd)
    }

    pub fn with_system(mut self, system: System) -> Self {
        let (mixup, kd) = system.toggles();
        self.enable_mixup = mixup;
        self.enable_kd = kd;
        self
    }

    pub fn assets_dir(&self) -> PathBuf {
        PathBuf::from(self.assets_dir.clone().unwrap_or_else(|| self.out_dir.clone()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be positive".into()));
        }
        if self.optim.batch == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.dev_beam == 0 || self.eval_beam == 0 {
            return Err(TrainError::Config("beam sizes must be >= 1".into()));
        }
        self.mixup.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.buckets.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// Load the corpus (or generate and cache it under the assets dir).
    pub fn obtain_corpus(&self) -> Result<CorpusSplits> {
        if let Some(dir) = &self.corpus_dir {
            return Ok(crate::data::load_corpus(Path::new(dir))?);
        }
        let cache = self.assets_dir().join("corpus");
        if cache.join("meta.jsonl").exists() {
            return Ok(crate::data::load_corpus(&cache)?);
        }
        let corpus = crate::data::generate_corpus(&self.synth)?;
        crate::data::save_corpus(&corpus, &cache)?;
        Ok(corpus)
    }

    /// Architecture resolved against a concrete corpus.
    pub fn resolved_model_config(&self, corpus: &CorpusSplits) -> ModelConfig {
        let mut m = self.model.clone();
        m.gloss_vocab = corpus.gloss_vocab.len();
        m.word_vocab = corpus.word_vocab.len();
        m.feat_dim = corpus.feat_dim();
        m.has_sign_embedder = true;
        m.has_ctc_head = true;
        m.has_gloss_table = self.enable_mixup;
        m
    }
}

/// Whether the encoder consumes sign features or gloss tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Sign,
    Text,
}

/// One training item (a corpus triple or a distilled record).
#[derive(Debug, Clone)]
pub struct TrainItem {
    /// Stable index; seeds the per-sample dropout/mixup streams.
    pub stable_idx: usize,
    pub frames: Option<Tensor>,
    pub gloss_ids: Vec<usize>,
    /// BOS .. EOS word ids.
    pub target: Vec<usize>,
}

impl TrainItem {
    pub fn from_triple(
        idx: usize,
        t: &Triple,
        word_vocab: &Vocab,
        gloss_vocab: &Vocab,
        max_text: usize,
        with_frames: bool,
    ) -> Self {
        let mut text = t.text.clone();
        text.truncate(max_text);
        TrainItem {
            stable_idx: idx,
            frames: with_frames.then(|| t.frames.clone()),
            gloss_ids: gloss_vocab.encode_gloss_seq(&t.gloss),
            target: word_vocab.encode_target(&text),
        }
    }
}

/// Settings the inner loop needs (a view over ExperimentConfig, reused by
/// teacher training).
#[derive(Debug, Clone)]
pub struct LoopSettings {
    pub seed: u64,
    pub epochs: usize,
    pub optim: OptimConfig,
    pub enable_ctc: bool,
    pub ctc_form: CtcLossForm,
    pub mixup: Option<MixupPolicy>,
    pub mixup_warmup: usize,
    pub eval_every: usize,
    pub early_stop_patience: usize,
    pub dev_beam: usize,
    pub mode: InputMode,
    pub verbose: bool,
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_dev_bleu: f64,
    pub epochs_run: usize,
    pub infeasible_mixup: usize,
    pub log_path: PathBuf,
}

pub struct Trainer<'c> {
    pub model: Model,
    items: Vec<TrainItem>,
    dev_inputs: Vec<TrainItem>,
    dev_refs: Vec<Vec<String>>,
    word_vocab: Vocab,
    gloss_vocab: Vocab,
    settings: LoopSettings,
    adam: Adam,
    state: TrainerState,
    grad_accum: Vec<Option<Vec<f64>>>,
    pub infeasible_mixup: usize,
    out_dir: PathBuf,
    log: Option<std::io::BufWriter<fs::File>>,
    corpus: &'c CorpusSplits,
    step: u64,
}

impl<'c> Trainer<'c> {
    pub fn new(
        model: Model,
        corpus: &'c CorpusSplits,
        items: Vec<TrainItem>,
        settings: LoopSettings,
        out_dir: &Path,
    ) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        let with_frames = settings.mode == InputMode::Sign;
        let dev_inputs: Vec<TrainItem> = corpus
            .dev
            .iter()
            .enumerate()
            .map(|(i, t)| {
                TrainItem::from_triple(
                    i,
                    t,
                    &corpus.word_vocab,
                    &corpus.gloss_vocab,
                    model.config.max_output_len,
                    with_frames,
                )
            })
            .collect();
        let dev_refs: Vec<Vec<String>> = corpus.dev.iter().map(|t| t.text.clone()).collect();
        let adam = Adam::new(&model.params, &settings.optim);
        let lr = settings.optim.lr;
        let n_params = model.params.len();
        let log_file = fs::File::create(out_dir.join("train.log"))?;
        Ok(Trainer {
            model,
            items,
            dev_inputs,
            dev_refs,
            word_vocab: corpus.word_vocab.clone(),
            gloss_vocab: corpus.gloss_vocab.clone(),
            settings,
            adam,
            state: TrainerState {
                next_epoch: 0,
                best_dev_bleu: f64::NEG_INFINITY,
                evals_since_improve: 0,
                evals_since_decay: 0,
                lr,
                steps: 0,
            },
            grad_accum: vec![None; n_params],
            infeasible_mixup: 0,
            out_dir: out_dir.to_path_buf(),
            log: Some(std::io::BufWriter::new(log_file)),
            corpus,
            step: 0,
        })
    }

    /// Restore optimizer/trainer state from a checkpoint (resume).
    pub fn restore(&mut self, adam: AdamState, state: TrainerState) {
        self.adam = Adam::with_state(adam, &self.settings.optim);
        self.step = state.steps;
        self.state = state;
    }

    fn logln(&mut self, line: &str) {
        if self.settings.verbose {
            println!("{line}");
        }
        if let Some(w) = &mut self.log {
            let _ = writeln!(w, "{line}");
        }
    }

    /// Forward/backward for one item; gradients land in `grad_accum`.
    fn accumulate_sample(&mut self, item_idx: usize, epoch: usize) -> Result<LossBreakdown> {
        let item = self.items[item_idx].clone();
        let dropout_rng =
            SeededRng::stream(self.settings.seed, "dropout", mix_salt(&[epoch as u64, item.stable_idx as u64]));
        let model = &self.model;
        let mut f = model.forward_ctx(true, Some(dropout_rng));

        let enc_in = match self.settings.mode {
            InputMode::Sign => {
                let frames = item.frames.as_ref().ok_or_else(|| {
                    TrainError::Config("sign-mode item without frames".into())
                })?;
                model.embed_frames(&mut f, frames)?
            }
            InputMode::Text => model.embed_gloss_tokens(&mut f, &item.gloss_ids)?,
        };
        let h = model.encode(&mut f, enc_in)?;
        let logits_f = model.decode_teacher_forced(&mut f, h, &item.target)?;
        let mle = model.mle_loss(&mut f, logits_f, &item.target)?;
        let mut mle_val = f.g.value(mle).item();
        let mut total = mle;

        let mixup_active = self.settings.mode == InputMode::Sign
            && self.settings.mixup.is_some()
            && epoch >= self.settings.mixup_warmup;
        let need_head =
            self.settings.mode == InputMode::Sign && (self.settings.enable_ctc || mixup_active);

        let mut ctc_val = 0.0;
        let mut jsd_val = 0.0;
        let mut lp_node = None;
        if need_head {
            lp_node = Some(model.ctc_head(&mut f, h)?);
        }

        let z = f.g.value(enc_in).shape()[0];
        let feasible = min_frames(&item.gloss_ids) <= z;

        if self.settings.mode == InputMode::Sign && self.settings.enable_ctc {
            if feasible {
                let lp = lp_node.expect("head computed");
                let neg_log = f.g.ctc_neg_log(lp, &item.gloss_ids)?;
                let ctc_node = match self.settings.ctc_form {
                    CtcLossForm::NegLog => neg_log,
                    CtcLossForm::PaperLiteral => {
                        let minus = f.g.scale(neg_log, -1.0)?;
                        let p = f.g.exp(minus)?;
                        let neg_p = f.g.scale(p, -1.0)?;
                        f.g.add_scalar(neg_p, 1.0)?
                    }
                };
                ctc_val = f.g.value(ctc_node).item();
                total = f.g.add(total, ctc_node)?;
            } else {
                self.infeasible_mixup += 1;
            }
        }

        if mixup_active && feasible {
            let policy = self.settings.mixup.clone().expect("mixup active");
            let posterior = f.g.value(lp_node.expect("head computed")).clone();
            match force_align(&posterior, &item.gloss_ids) {
                Ok(align) => {
                    let lambda = policy.effective_lambda(&align);
                    let mut mix_rng = SeededRng::stream(
                        self.settings.seed,
                        "mixup",
                        mix_salt(&[epoch as u64, item.stable_idx as u64]),
                    );
                    // Draws are consumed even when the mixed branch is
                    // skipped (static λ = 0 degrades to the baseline).
                    let mixed =
                        build_mixed(&mut f, model, enc_in, &item.gloss_ids, &align, &policy, &mut mix_rng)?;
                    if lambda > 0.0 {
                        let h_m = model.encode(&mut f, mixed.node)?;
                        let logits_m = model.decode_teacher_forced(&mut f, h_m, &item.target)?;
                        // The mixed sequence is an augmented sample: it takes
                        // the same teacher-forced supervision as the frames.
                        let mle_m = model.mle_loss(&mut f, logits_m, &item.target)?;
                        mle_val += f.g.value(mle_m).item();
                        total = f.g.add(total, mle_m)?;
                        let p0 = f.g.softmax(logits_f)?;
                        let p = if policy.stop_frame_grad {
                            let detached = f.g.value(p0).clone();
                            f.g.constant(detached)
                        } else {
                            p0
                        };
                        let q = f.g.softmax(logits_m)?;
                        let jsd = jsd_loss(&mut f.g, p, q)?;
                        jsd_val = f.g.value(jsd).item();
                        total = f.g.add(total, jsd)?;
                    }
                }
                Err(CtcError::InfeasibleAlignment { .. }) => {
                    self.infeasible_mixup += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }

        let total_val = f.g.value(total).item();
        if !total_val.is_finite() {
            return Err(TrainError::Numeric(format!(
                "non-finite loss at epoch {} item {}",
                epoch, item.stable_idx
            )));
        }
        f.g.backward(total)?;
        for (id, p) in self.model.params.iter() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = f.param_grad(id) {
                let slot =
                    self.grad_accum[id].get_or_insert_with(|| vec![0.0; p.tensor.numel()]);
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        Ok(LossBreakdown { mle: mle_val, ctc: ctc_val, jsd: jsd_val, total: total_val })
    }

    fn run_batch(&mut self, batch: &[usize], epoch: usize) -> Result<LossBreakdown> {
        for g in self.grad_accum.iter_mut() {
            *g = None;
        }
        let mut sum = LossBreakdown { mle: 0.0, ctc: 0.0, jsd: 0.0, total: 0.0 };
        for &idx in batch {
            let b = self.accumulate_sample(idx, epoch)?;
            sum.mle += b.mle;
            sum.ctc += b.ctc;
            sum.jsd += b.jsd;
            sum.total += b.total;
        }
        let n = batch.len() as f64;
        let scale = 1.0 / n;
        let factor = clip_factor(&self.grad_accum, scale, self.settings.optim.clip_norm);
        let warmup = self.settings.optim.warmup_steps;
        let ramp = if warmup > 0 { ((self.step + 1) as f64 / warmup as f64).min(1.0) } else { 1.0 };
        self.adam.step(&mut self.model.params, &self.grad_accum, self.state.lr * ramp, scale * factor);
        self.step += 1;
        self.state.steps = self.step;
        Ok(LossBreakdown { mle: sum.mle / n, ctc: sum.ctc / n, jsd: sum.jsd / n, total: sum.total / n })
    }

    /// Greedy/beam dev BLEU with the current parameters.
    pub fn dev_bleu(&self, beam: usize) -> Result<f64> {
        let mut hyps = Vec::with_capacity(self.dev_inputs.len());
        for item in &self.dev_inputs {
            let enc_in = match self.settings.mode {
                InputMode::Sign => self.model.embed_frames_eval(item.frames.as_ref().unwrap())?,
                InputMode::Text => self.model.embed_gloss_eval(&item.gloss_ids)?,
            };
            let h = self.model.encode_eval(&enc_in)?;
            let out = self.model.generate(&h, beam)?;
            hyps.push(self.word_vocab.decode_words(&out));
        }
        Ok(crate::metrics::bleu4(&hyps, &self.dev_refs)?)
    }

    fn save_checkpoint(&self, path: &Path, with_state: bool) -> Result<()> {
        let ck = Checkpoint::from_model(
            &self.model,
            &self.word_vocab,
            &self.gloss_vocab,
            with_state.then(|| self.adam.state.clone()),
            with_state.then(|| self.state.clone()),
        );
        ck.save(path)
    }

    /// Run the epoch loop; returns the artifacts of the best checkpoint.
    pub fn train(&mut self) -> Result<RunArtifacts> {
        let best_path = self.out_dir.join("best.ckpt.json");
        let last_path = self.out_dir.join("last.ckpt.json");
        let n = self.items.len();
        if n == 0 {
            return Err(TrainError::Config("empty training set".into()));
        }
        let batch = self.settings.optim.batch;
        let start = self.state.next_epoch;
        let mut stopped_early = false;
        let mut epochs_run = start;
        for epoch in start..self.settings.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut shuffle_rng = SeededRng::stream(self.settings.seed, "data", epoch as u64);
            shuffle_rng.shuffle(&mut order);
            let mut epoch_loss = LossBreakdown { mle: 0.0, ctc: 0.0, jsd: 0.0, total: 0.0 };
            let mut batches = 0.0;
            for chunk in order.chunks(batch) {
                let b = self.run_batch(chunk, epoch)?;
                epoch_loss.mle += b.mle;
                epoch_loss.ctc += b.ctc;
                epoch_loss.jsd += b.jsd;
                epoch_loss.total += b.total;
                batches += 1.0;
                let line = format!(
                    "step={} epoch={} mle={:.6} ctc={:.6} jsd={:.6} loss={:.6} lr={:.6}",
                    self.step, epoch, b.mle, b.ctc, b.jsd, b.total, self.state.lr
                );
                self.logln(&line);
            }
            epochs_run = epoch + 1;
            let line = format!(
                "epoch={} mean_mle={:.6} mean_ctc={:.6} mean_jsd={:.6} mean_loss={:.6} infeasible_mixup={}",
                epoch,
                epoch_loss.mle / batches,
                epoch_loss.ctc / batches,
                epoch_loss.jsd / batches,
                epoch_loss.total / batches,
                self.infeasible_mixup
            );
            self.logln(&line);

            self.state.next_epoch = epoch + 1;
            if (epoch + 1) % self.settings.eval_every == 0 {
                let bleu = self.dev_bleu(self.settings.dev_beam)?;
                let improved = bleu > self.state.best_dev_bleu;
                if improved {
                    self.state.best_dev_bleu = bleu;
                    self.state.evals_since_improve = 0;
                    self.state.evals_since_decay = 0;
                    self.save_checkpoint(&best_path, false)?;
                } else {
                    self.state.evals_since_improve += 1;
                    self.state.evals_since_decay += 1;
                    if self.state.evals_since_decay >= self.settings.optim.plateau_patience {
                        self.state.lr *= self.settings.optim.plateau_factor;
                        self.state.evals_since_decay = 0;
                    }
                }
                let line = format!(
                    "eval epoch={} dev_bleu={:.4} best={:.4} since_improve={} lr={:.6}",
                    epoch, bleu, self.state.best_dev_bleu, self.state.evals_since_improve, self.state.lr
                );
                self.logln(&line);
                self.save_checkpoint(&last_path, true)?;
                if self.state.evals_since_improve >= self.settings.early_stop_patience {
                    self.logln(&format!("early_stop epoch={}", epoch));
                    stopped_early = true;
                    break;
                }
            } else {
                self.save_checkpoint(&last_path, true)?;
            }
        }
        let _ = stopped_early;
        if !best_path.exists() {
            // No eval ever ran (eval_every > epochs); keep the final weights.
            self.save_checkpoint(&best_path, false)?;
        }
        if let Some(w) = &mut self.log {
            let _ = w.flush();
        }
        Ok(RunArtifacts {
            best_checkpoint: best_path,
            last_checkpoint: last_path,
            best_dev_bleu: self.state.best_dev_bleu,
            epochs_run,
            infeasible_mixup: self.infeasible_mixup,
            log_path: self.out_dir.join("train.log"),
        })
    }

    pub fn corpus(&self) -> &CorpusSplits {
        self.corpus
    }
}

/// Build the sign-mode training items for a config: the plain train split,
/// or the distilled union when KD is enabled.
pub fn build_train_items(
    corpus: &CorpusSplits,
    augmented: Option<&crate::kd::AugmentedDataset>,
    model_cfg: &ModelConfig,
) -> Vec<TrainItem> {
    match augmented {
        None => corpus
            .train
            .iter()
            .enumerate()
            .map(|(i, t)| {
                TrainItem::from_triple(
                    i,
                    t,
                    &corpus.word_vocab,
                    &corpus.gloss_vocab,
                    model_cfg.max_output_len,
                    true,
                )
            })
            .collect(),
        Some(aug) => aug
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let triple = corpus
                    .find(&r.features_ref)
                    .unwrap_or_else(|| panic!("distilled record {} references unknown sample", r.id));
                let mut text = r.text.clone();
                text.truncate(model_cfg.max_output_len);
                TrainItem {
                    stable_idx: i,
                    frames: Some(triple.frames.clone()),
                    gloss_ids: corpus.gloss_vocab.encode_gloss_seq(&r.gloss),
                    target: corpus.word_vocab.encode_target(&text),
                }
            })
            .collect(),
    }
}

/// One full training run (teachers/distillation prepared on demand),
/// optionally resuming from a `last.ckpt.json`.
pub fn run_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let corpus = cfg.obtain_corpus()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;

    // KD assets.
    let augmented = if cfg.enable_kd {
        Some(crate::kd::ensure_distilled(cfg, &corpus)?)
    } else {
        None
    };
    // Gloss table for mix-up comes from the best teacher.
    let gloss_table = if cfg.enable_mixup {
        Some(crate::kd::ensure_best_teacher_table(cfg, &corpus)?)
    } else {
        None
    };

    let model_cfg = cfg.resolved_model_config(&corpus);
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    if let Some(table) = gloss_table {
        model.set_gloss_table(table, true)?;
    }

    let items = build_train_items(&corpus, augmented.as_ref(), &model_cfg);
    let settings = LoopSettings {
        seed: cfg.seed,
        epochs: cfg.epochs,
        optim: cfg.optim.clone(),
        enable_ctc: cfg.enable_ctc,
        ctc_form: if cfg.ctc_literal_form { CtcLossForm::PaperLiteral } else { CtcLossForm::NegLog },
        mixup: cfg.enable_mixup.then(|| cfg.mixup.clone()),
        mixup_warmup: cfg.mixup_warmup_epochs,
        eval_every: cfg.eval_every,
        early_stop_patience: cfg.early_stop_patience,
        dev_beam: cfg.dev_beam,
        mode: InputMode::Sign,
        verbose: cfg.verbose,
    };
    let mut trainer = Trainer::new(model, &corpus, items, settings, &out_dir)?;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        let (model, _, _, adam, state) = ck.into_model()?;
        let (adam, state) = match (adam, state) {
            (Some(a), Some(s)) => (a, s),
            _ => {
                return Err(TrainError::Config(
                    "resume checkpoint carries no optimizer/trainer state".into(),
                ))
            }
        };
        trainer.model = model;
        trainer.restore(adam, state);
    }
    trainer.train()
}

/// Train a text-mode (gloss-to-text) model on the given subset of the train
/// split; used for the KD teachers.
pub fn train_text_model(
    corpus: &CorpusSplits,
    subset: &[usize],
    model_cfg: &ModelConfig,
    optim: &OptimConfig,
    epochs: usize,
    seed: u64,
    out_dir: &Path,
    verbose: bool,
) -> Result<(Model, f64)> {
    let items: Vec<TrainItem> = subset
        .iter()
        .enumerate()
        .map(|(i, &idx)| {
            TrainItem::from_triple(
                i,
                &corpus.train[idx],
                &corpus.word_vocab,
                &corpus.gloss_vocab,
                model_cfg.max_output_len,
                false,
            )
        })
        .collect();
    let model = Model::new(model_cfg.clone(), seed)?;
    let settings = LoopSettings {
        seed,
        epochs,
        optim: optim.clone(),
        enable_ctc: false,
        ctc_form: CtcLossForm::NegLog,
        mixup: None,
        mixup_warmup: 0,
        eval_every: 1,
        early_stop_patience: 5,
        dev_beam: 1,
        mode: InputMode::Text,
        verbose,
    };
    let mut trainer = Trainer::new(model, corpus, items, settings, out_dir)?;
    let artifacts = trainer.train()?;
    // Return the best checkpoint's weights, not the last-epoch drift.
    let (best, _, _, _, _) = Checkpoint::load(&artifacts.best_checkpoint)?.into_model()?;
    Ok((best, artifacts.best_dev_bleu))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_toggle_mapping_is_a_bijection() {
        for system in System::all() {
            let (m, k) = system.toggles();
            assert_eq!(System::from_toggles(m, k), system);
        }
        let names: std::collections::HashSet<_> =
            System::all().iter().map(|s| s.name()).collect();
        assert_eq!(names.len(), 4);
    }

    #[test]
    fn loss_breakdown_components_sum_to_total() {
        let b = LossBreakdown { mle: 1.25, ctc: 0.5, jsd: 0.125, total: 1.875 };
        assert!((b.total - (b.mle + b.ctc + b.jsd)).abs() < 1e-10);
    }

    #[test]
    fn config_validation_rejects_zero_epochs_and_batch() {
        let mut cfg = ExperimentConfig::default();
        cfg.epochs = 0;
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.optim.batch = 0;
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }
}
