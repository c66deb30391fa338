//! Command-line front end.
//!
//! Subcommands: gen-data, train-teachers, distill, train, eval, matrix,
//! sweep-lambda, sweep-k, report. Configuration is a flat key=value space:
//! the same keys work in a `--config <file>` (one `key = value` per line,
//! `#` comments) and as `--key=value` flags, with flags winning.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.

use crate::data::DataError;
use crate::metrics::GeometryReport;
use crate::mixup::{DrawDistribution, MixupMode};
use crate::model::ModelConfig;
use crate::report;
use crate::tensor::TensorError;
use crate::train::{
    evaluate_model, run_lambda_sweep, run_matrix, run_teacher_sweep, run_train, Checkpoint,
    EvalReport, ExperimentConfig, MatrixReport, System, TrainError,
};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
xmda - cross-modality data augmentation for sign language translation

USAGE:
    xmda <SUBCOMMAND> [--config FILE] [--key=value ...]

SUBCOMMANDS:
    gen-data       generate a synthetic corpus into --out
    train-teachers train the gloss-to-text teacher ensemble
    distill        materialize the multi-reference dataset (dmkd.jsonl)
    train          train one system (--seed is mandatory)
    eval           evaluate a checkpoint (--checkpoint, --split)
    matrix         train + evaluate all four systems over --seeds
    sweep-lambda   dev BLEU across --lambdas plus the dynamic strategy
    sweep-k        dev BLEU across teacher counts --ks
    report         re-render tables/plots from an eval or matrix JSON
    help           show this text

COMMON KEYS (config file or --key=value):
    out_dir, corpus_dir, seed, epochs, eval_every, early_stop_patience,
    dev_beam, eval_beam, system (baseline|mixup|kd|xmda), verbose,
    enable_ctc, enable_mixup, enable_kd, ctc_literal_form,
    mixup.mode (static|dynamic), mixup.lambda, mixup.draw (uniform|normal),
    mixup.stop_frame_grad, mixup_warmup_epochs,
    kd.teachers, kd.subset_fraction, kd.teacher_epochs, kd.teacher_beam,
    model.preset (desk|paper), model.encoder_layers, model.decoder_layers,
    model.heads, model.hidden, model.feedforward, model.dropout,
    model.label_smoothing, model.max_output_len, model.length_norm,
    optim.lr, optim.beta1, optim.beta2, optim.eps, optim.clip_norm,
    optim.batch, optim.plateau_factor, optim.plateau_patience,
    synth.gloss_vocab, synth.word_vocab, synth.train, synth.dev, synth.test,
    synth.gloss_len_min, synth.gloss_len_max, synth.frames_min,
    synth.frames_max, synth.feat_dim, synth.sigma, synth.text_noise,
    synth.seed,
    buckets.freq_low_max, buckets.freq_high_min, buckets.len_short_max,
    buckets.len_medium_max

SUBCOMMAND KEYS:
    train:        --resume PATH
    eval:         --checkpoint PATH, --split dev|test|train, --gloss-table CKPT
    matrix:       --seeds 1,2,3
    sweep-lambda: --lambdas 0.0,0.2,0.4,0.6,0.8,1.0
    sweep-k:      --ks 0,1,2,4
    report:       --input PATH (eval.json or matrix.json)
";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        CliError { code: 2, message: msg.into() }
    }
}

fn error_code(e: &TrainError) -> i32 {
    match e {
        TrainError::Config(_) => 2,
        TrainError::Data(_) | TrainError::Io(_) | TrainError::Json(_) => 3,
        TrainError::Numeric(_) => 4,
        TrainError::Tensor(TensorError::NonFinite { .. }) => 4,
        TrainError::Tensor(_) | TrainError::Model(_) | TrainError::Mixup(_) => 2,
        TrainError::Metric(_) | TrainError::Ctc(_) => 3,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError { code: error_code(&e), message: e.to_string() }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError { code: 3, message: e.to_string() }
    }
}

/// Parsed command line: subcommand plus ordered key/value pairs.
#[derive(Debug, Default)]
struct Args {
    pairs: Vec<(String, String)>,
}

impl Args {
    fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str, context: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::config(format!("{context} requires --{key}")))
    }
}

fn parse_args(argv: &[String]) -> Result<Args, CliError> {
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < argv.len() {
        let arg = &argv[i];
        let Some(stripped) = arg.strip_prefix("--") else {
            return Err(CliError::config(format!("unexpected argument: {arg}")));
        };
        if let Some((k, v)) = stripped.split_once('=') {
            pairs.push((k.to_string(), v.to_string()));
        } else if i + 1 < argv.len() && !argv[i + 1].starts_with("--") {
            pairs.push((stripped.to_string(), argv[i + 1].clone()));
            i += 1;
        } else {
            // Bare flag: boolean true.
            pairs.push((stripped.to_string(), "true".to_string()));
        }
        i += 1;
    }
    Ok(Args { pairs })
}

fn parse_config_file(path: &str) -> Result<Vec<(String, String)>, CliError> {
    let body = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {path}: {e}")))?;
    let mut pairs = Vec::new();
    for (ln, raw) in body.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::config(format!("{path}:{}: expected key = value", ln + 1))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| CliError::config(format!("bad value for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(CliError::config(format!("bad boolean for {key}: {other}"))),
    }
}

/// Keys consumed by subcommand dispatch rather than the experiment config.
const PASSTHROUGH: &[&str] = &[
    "config",
    "resume",
    "checkpoint",
    "split",
    "gloss-table",
    "seeds",
    "lambdas",
    "ks",
    "input",
    "out", // alias for out_dir
];

/// Apply one key to the config; unknown keys are config errors.
fn apply_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<(), CliError> {
    match key {
        "out_dir" | "out" => cfg.out_dir = value.to_string(),
        "assets_dir" => cfg.assets_dir = Some(value.to_string()),
        "corpus_dir" | "corpus" => cfg.corpus_dir = Some(value.to_string()),
        "seed" => cfg.seed = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "eval_every" => cfg.eval_every = parse(key, value)?,
        "early_stop_patience" => cfg.early_stop_patience = parse(key, value)?,
        "dev_beam" => cfg.dev_beam = parse(key, value)?,
        "eval_beam" => cfg.eval_beam = parse(key, value)?,
        "verbose" => cfg.verbose = parse_bool(key, value)?,
        "enable_ctc" => cfg.enable_ctc = parse_bool(key, value)?,
        "enable_mixup" => cfg.enable_mixup = parse_bool(key, value)?,
        "enable_kd" => cfg.enable_kd = parse_bool(key, value)?,
        "ctc_literal_form" => cfg.ctc_literal_form = parse_bool(key, value)?,
        "mixup_warmup_epochs" => cfg.mixup_warmup_epochs = parse(key, value)?,
        "system" => {
            let system = match value {
                "baseline" => System::Baseline,
                "mixup" => System::Mixup,
                "kd" => System::Kd,
                "xmda" => System::Xmda,
                other => return Err(CliError::config(format!("unknown system {other}"))),
            };
            let (m, k) = system.toggles();
            cfg.enable_mixup = m;
            cfg.enable_kd = k;
        }
        "mixup.mode" => {
            cfg.mixup.mode = match value {
                "static" => MixupMode::Static,
                "dynamic" => MixupMode::Dynamic,
                other => return Err(CliError::config(format!("unknown mixup mode {other}"))),
            }
        }
        "mixup.lambda" => cfg.mixup.lambda = parse(key, value)?,
        "mixup.draw" => {
            cfg.mixup.draw = match value {
                "uniform" => DrawDistribution::Uniform01,
                "normal" => DrawDistribution::StdNormal,
                other => return Err(CliError::config(format!("unknown draw {other}"))),
            }
        }
        "mixup.stop_frame_grad" => cfg.mixup.stop_frame_grad = parse_bool(key, value)?,
        "kd.teachers" => cfg.kd.teachers = parse(key, value)?,
        "kd.subset_fraction" => cfg.kd.subset_fraction = parse(key, value)?,
        "kd.teacher_epochs" => cfg.kd.teacher_epochs = parse(key, value)?,
        "kd.teacher_beam" => cfg.kd.teacher_beam = parse(key, value)?,
        "model.preset" => match value {
            "desk" => {
                cfg.model =
                    ModelConfig::desk_default(cfg.model.gloss_vocab, cfg.model.word_vocab, cfg.model.feat_dim)
            }
            "paper" => {
                cfg.model =
                    ModelConfig::paper_preset(cfg.model.gloss_vocab, cfg.model.word_vocab, cfg.model.feat_dim)
            }
            other => return Err(CliError::config(format!("unknown preset {other}"))),
        },
        "model.encoder_layers" => cfg.model.encoder_layers = parse(key, value)?,
        "model.decoder_layers" => cfg.model.decoder_layers = parse(key, value)?,
        "model.heads" => cfg.model.heads = parse(key, value)?,
        "model.hidden" => cfg.model.hidden = parse(key, value)?,
        "model.feedforward" => cfg.model.feedforward = parse(key, value)?,
        "model.dropout" => cfg.model.dropout = parse(key, value)?,
        "model.label_smoothing" => cfg.model.label_smoothing = parse(key, value)?,
        "model.max_output_len" => cfg.model.max_output_len = parse(key, value)?,
        "model.max_input_len" => cfg.model.max_input_len = parse(key, value)?,
        "model.length_norm" => cfg.model.length_norm = parse(key, value)?,
        "optim.lr" => cfg.optim.lr = parse(key, value)?,
        "optim.beta1" => cfg.optim.beta1 = parse(key, value)?,
        "optim.beta2" => cfg.optim.beta2 = parse(key, value)?,
        "optim.eps" => cfg.optim.eps = parse(key, value)?,
        "optim.clip_norm" => cfg.optim.clip_norm = parse(key, value)?,
        "optim.batch" => cfg.optim.batch = parse(key, value)?,
        "optim.plateau_factor" => cfg.optim.plateau_factor = parse(key, value)?,
        "optim.plateau_patience" => cfg.optim.plateau_patience = parse(key, value)?,
        "synth.gloss_vocab" => cfg.synth.gloss_vocab = parse(key, value)?,
        "synth.word_vocab" => cfg.synth.word_vocab = parse(key, value)?,
        "synth.train" => cfg.synth.train = parse(key, value)?,
        "synth.dev" => cfg.synth.dev = parse(key, value)?,
        "synth.test" => cfg.synth.test = parse(key, value)?,
        "synth.gloss_len_min" => cfg.synth.gloss_len.0 = parse(key, value)?,
        "synth.gloss_len_max" => cfg.synth.gloss_len.1 = parse(key, value)?,
        "synth.frames_min" => cfg.synth.frames_per_gloss.0 = parse(key, value)?,
        "synth.frames_max" => cfg.synth.frames_per_gloss.1 = parse(key, value)?,
        "synth.feat_dim" => cfg.synth.feat_dim = parse(key, value)?,
        "synth.sigma" => cfg.synth.sigma = parse(key, value)?,
        "synth.text_noise" => cfg.synth.text_noise = parse(key, value)?,
        "synth.seed" => cfg.synth.seed = parse(key, value)?,
        "buckets.freq_low_max" => cfg.buckets.freq_low_max = parse(key, value)?,
        "buckets.freq_high_min" => cfg.buckets.freq_high_min = parse(key, value)?,
        "buckets.len_short_max" => cfg.buckets.len_short_max = parse(key, value)?,
        "buckets.len_medium_max" => cfg.buckets.len_medium_max = parse(key, value)?,
        other => return Err(CliError::config(format!("unknown config key: {other}"))),
    }
    Ok(())
}

/// Build the experiment config from `--config` file plus flag overrides.
fn build_config(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    let mut pairs = Vec::new();
    if let Some(path) = args.get("config") {
        pairs.extend(parse_config_file(path)?);
    }
    pairs.extend(args.pairs.iter().cloned());
    for (k, v) in &pairs {
        if PASSTHROUGH.contains(&k.as_str()) && k != "out" {
            continue;
        }
        apply_key(&mut cfg, k, v)?;
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse::<T>(key, s.trim()))
        .collect()
}

fn print_eval_summary(report: &EvalReport) {
    println!(
        "split={} samples={} beam={} bleu4={:.4} rouge_l={:.4} chrf={:.4}{}",
        report.split,
        report.samples,
        report.beam,
        report.bleu4,
        report.rouge_l,
        report.chrf,
        report
            .aligner_wer
            .map(|w| format!(" aligner_wer={:.4}", w))
            .unwrap_or_default()
    );
    for (bucket, f1) in &report.freq_f1 {
        println!("freq_f1 bucket={} f1={:.6}", bucket, f1);
    }
    for (bucket, bleu) in &report.length_bleu {
        println!("length_bleu bucket={} bleu={:.4}", bucket, bleu);
    }
    if let Some(g) = &report.geometry {
        for (family, h) in &g.kde_entropy {
            println!("kde_entropy family={} entropy={:.4}", family, h);
        }
        println!(
            "alignment_geometry euclidean={:.4} cosine={:.4} pairs={} dim={}",
            g.mean_euclidean, g.mean_cosine, g.pairs, g.dim
        );
    }
}

fn print_matrix(report: &MatrixReport) {
    println!("system        dev_bleu dev_rouge dev_chrf  test_bleu test_rouge test_chrf");
    for row in &report.mean {
        println!(
            "{:<12} {:>9.4} {:>9.4} {:>8.4} {:>10.4} {:>10.4} {:>9.4}",
            row.system, row.dev_bleu, row.dev_rouge, row.dev_chrf, row.test_bleu, row.test_rouge,
            row.test_chrf
        );
    }
}

fn write_eval_artifacts(out_dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError { code: 3, message: e.to_string() })?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| CliError { code: 3, message: e.to_string() })?;
    fs::write(out_dir.join(format!("eval_{}.json", report.split)), json)
        .map_err(|e| CliError { code: 3, message: e.to_string() })?;
    report::write_bucket_csvs(out_dir, report)
        .map_err(|e| CliError { code: 3, message: e.to_string() })?;
    if let Some(g) = &report.geometry {
        report::write_geometry_svg(&out_dir.join(format!("geometry_{}.svg", report.split)), g)
            .map_err(|e| CliError { code: 3, message: e.to_string() })?;
    }
    Ok(())
}

fn cmd_gen_data(args: &Args) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let corpus = crate::data::generate_corpus(&cfg.synth)?;
    let out = PathBuf::from(&cfg.out_dir);
    crate::data::save_corpus(&corpus, &out)?;
    println!(
        "corpus_dir={} train={} dev={} test={} gloss_vocab={} word_vocab={}",
        out.display(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.gloss_vocab.len(),
        corpus.word_vocab.len()
    );
    Ok(())
}

fn cmd_train_teachers(args: &Args) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let corpus = cfg.obtain_corpus()?;
    let manifest = crate::kd::ensure_teachers(&cfg, &corpus)?;
    for t in &manifest.teachers {
        println!(
            "teacher k={} seed={} subset={} dev_bleu={:.4} checkpoint={}",
            t.k, t.seed, t.subset_size, t.dev_bleu, t.checkpoint
        );
    }
    Ok(())
}

fn cmd_distill(args: &Args) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let corpus = cfg.obtain_corpus()?;
    let aug = crate::kd::ensure_distilled(&cfg, &corpus)?;
    println!(
        "dmkd={} records={} teachers={} empty_decodes={}",
        cfg.assets_dir().join("dmkd.jsonl").display(),
        aug.len(),
        aug.teachers,
        aug.empty_decodes
    );
    Ok(())
}

fn cmd_train(args: &Args) -> Result<(), CliError> {
    if args.get("seed").is_none() {
        return Err(CliError::config("train requires --seed"));
    }
    let cfg = build_config(args)?;
    let resume = args.get("resume").map(PathBuf::from);
    let artifacts = run_train(&cfg, resume.as_deref())?;
    println!(
        "system={} seed={} best_dev_bleu={:.4} epochs={} infeasible_mixup={} checkpoint={}",
        cfg.system().name(),
        cfg.seed,
        artifacts.best_dev_bleu,
        artifacts.epochs_run,
        artifacts.infeasible_mixup,
        artifacts.best_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let ckpt_path = args.require("checkpoint", "eval")?;
    let split = args.get("split").unwrap_or("test");
    let corpus = cfg.obtain_corpus()?;
    let (model, word_vocab, gloss_vocab, _, _) =
        Checkpoint::load(Path::new(ckpt_path))?.into_model()?;
    if word_vocab != corpus.word_vocab || gloss_vocab != corpus.gloss_vocab {
        return Err(CliError {
            code: 3,
            message: "vocabulary mismatch between checkpoint and corpus".into(),
        });
    }
    let table = match args.get("gloss-table") {
        Some(path) => Checkpoint::load(Path::new(path))?.param_tensor("gloss_table"),
        None => None,
    };
    let report = evaluate_model(&model, &corpus, split, cfg.eval_beam, &cfg.buckets, table.as_ref())?;
    print_eval_summary(&report);
    write_eval_artifacts(Path::new(&cfg.out_dir), &report)?;
    Ok(())
}

fn cmd_matrix(args: &Args) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let seeds: Vec<u64> = match args.get("seeds") {
        Some(v) => parse_list("seeds", v)?,
        None => vec![1, 2, 3],
    };
    let report = run_matrix(&cfg, &seeds)?;
    print_matrix(&report);
    println!("matrix_json={}/matrix.json", cfg.out_dir);
    Ok(())
}

fn cmd_sweep_lambda(args: &Args) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let lambdas: Vec<f64> = match args.get("lambdas") {
        Some(v) => parse_list("lambdas", v)?,
        None => vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    };
    let report = run_lambda_sweep(&cfg, &lambdas)?;
    for p in &report.points {
        println!("lambda={} dev_bleu={:.4}", p.label, p.dev_bleu);
    }
    Ok(())
}

fn cmd_sweep_k(args: &Args) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let ks: Vec<usize> = match args.get("ks") {
        Some(v) => parse_list("ks", v)?,
        None => vec![0, 1, 2, 4],
    };
    let report = run_teacher_sweep(&cfg, &ks)?;
    for (k, bleu) in &report.points {
        println!("k={} dev_bleu={:.4}", k, bleu);
    }
    Ok(())
}

fn cmd_report(args: &Args) -> Result<(), CliError> {
    let cfg = build_config(args)?;
    let input = args.require("input", "report")?;
    let body = fs::read_to_string(input).map_err(|e| CliError { code: 3, message: e.to_string() })?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| CliError { code: 3, message: e.to_string() })?;
    if let Ok(matrix) = serde_json::from_str::<MatrixReport>(&body) {
        print_matrix(&matrix);
        report::write_matrix_csv(&out_dir.join("matrix.csv"), &matrix)
            .map_err(|e| CliError { code: 3, message: e.to_string() })?;
        return Ok(());
    }
    if let Ok(eval) = serde_json::from_str::<EvalReport>(&body) {
        print_eval_summary(&eval);
        write_eval_artifacts(&out_dir, &eval)?;
        return Ok(());
    }
    // Accept the {"dev": .., "test": ..} bundles written by the pipeline.
    if let Ok(bundle) = serde_json::from_str::<BTreeMap<String, EvalReport>>(&body) {
        for (_, eval) in bundle {
            print_eval_summary(&eval);
            write_eval_artifacts(&out_dir, &eval)?;
        }
        return Ok(());
    }
    if let Ok(geometry) = serde_json::from_str::<GeometryReport>(&body) {
        report::write_geometry_svg(&out_dir.join("geometry.svg"), &geometry)
            .map_err(|e| CliError { code: 3, message: e.to_string() })?;
        return Ok(());
    }
    Err(CliError { code: 3, message: format!("{input} is not a known report JSON") })
}

/// Entry point; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let Some((sub, rest)) = argv.split_first() else {
        eprintln!("{USAGE}");
        return 2;
    };
    if sub == "help" || sub == "--help" || sub == "-h" {
        println!("{USAGE}");
        return 0;
    }
    let args = match parse_args(rest) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.message);
            return e.code;
        }
    };
    let result = match sub.as_str() {
        "gen-data" => cmd_gen_data(&args),
        "train-teachers" => cmd_train_teachers(&args),
        "distill" => cmd_distill(&args),
        "train" => cmd_train(&args),
        "eval" => cmd_eval(&args),
        "matrix" => cmd_matrix(&args),
        "sweep-lambda" => cmd_sweep_lambda(&args),
        "sweep-k" => cmd_sweep_k(&args),
        "report" => cmd_report(&args),
        other => {
            eprintln!("unknown subcommand: {other}\n{USAGE}");
            return 2;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_args_supports_both_flag_styles() {
        let a = parse_args(&argv(&["--seed=3", "--epochs", "7", "--verbose"])).unwrap();
        assert_eq!(a.get("seed"), Some("3"));
        assert_eq!(a.get("epochs"), Some("7"));
        assert_eq!(a.get("verbose"), Some("true"));
    }

    #[test]
    fn later_flags_override_earlier_ones() {
        let a = parse_args(&argv(&["--seed=3", "--seed=9"])).unwrap();
        assert_eq!(a.get("seed"), Some("9"));
    }

    #[test]
    fn build_config_applies_nested_keys() {
        let a = parse_args(&argv(&[
            "--model.hidden=32",
            "--optim.lr=0.002",
            "--mixup.lambda=0.4",
            "--system=xmda",
            "--synth.train=50",
        ]))
        .unwrap();
        let cfg = build_config(&a).unwrap();
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.optim.lr, 0.002);
        assert_eq!(cfg.mixup.lambda, 0.4);
        assert!(cfg.enable_mixup && cfg.enable_kd);
        assert_eq!(cfg.synth.train, 50);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let a = parse_args(&argv(&["--no.such.key=1"])).unwrap();
        let err = build_config(&a).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        fs::write(
            &path,
            "# comment\nmodel.hidden = 48\nsystem = kd\noptim.batch = 16\n\nsynth.sigma = 0.5\n",
        )
        .unwrap();
        let a = parse_args(&argv(&[
            "--config",
            path.to_str().unwrap(),
            "--optim.batch=8", // flag beats file
        ]))
        .unwrap();
        let cfg = build_config(&a).unwrap();
        assert_eq!(cfg.model.hidden, 48);
        assert!(cfg.enable_kd && !cfg.enable_mixup);
        assert_eq!(cfg.optim.batch, 8);
        assert_eq!(cfg.synth.sigma, 0.5);
    }

    #[test]
    fn train_without_seed_exits_2() {
        let code = run(&argv(&["train", "--epochs=1"]));
        assert_eq!(code, 2);
    }

    #[test]
    fn unknown_subcommand_exits_2() {
        assert_eq!(run(&argv(&["frobnicate"])), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run(&argv(&["help"])), 0);
    }

    #[test]
    fn error_codes_follow_error_classes() {
        assert_eq!(error_code(&TrainError::Config("x".into())), 2);
        assert_eq!(
            error_code(&TrainError::Data(DataError::Spec("x".into()))),
            3
        );
        assert_eq!(error_code(&TrainError::Numeric("x".into())), 4);
        assert_eq!(
            error_code(&TrainError::Tensor(TensorError::NonFinite { context: "x".into() })),
            4
        );
    }
}
