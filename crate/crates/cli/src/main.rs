use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use seqcrf::checks::{crf_gradient_suite, extractor_gradient_suite, oracle_suite, SuiteReport};
use seqcrf::crf::{train_crf, CrfModel, LabelSequence, RegularizedDataset};
use seqcrf::data::{generate_synthetic_corpus, load_corpus, read_feature_dir, save_corpus, Corpus, SynthConfig};
use seqcrf::eval::{
    evaluate, load_model, predict_both, run_cross_corpus, run_subject_independent, save_model, write_atomic,
    AblationReport, Metrics,
};
use seqcrf::optim::OptimConfig;
use seqcrf::pipeline::{train_two_step, FeatureTap, TwoStepConfig};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "seqcrf",
    version,
    about = "Frame-wise CNN features + linear-chain CRF sequence labeling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic expression-sequence corpus.
    GenSynth(GenSynthArgs),
    /// Two-step training on a corpus.
    Train(TrainArgs),
    /// Label every sequence of a corpus with a trained model.
    Predict(PredictArgs),
    /// Score a predictions file against a corpus.
    Eval(EvalArgs),
    /// Subject-independent k-fold ablation: CRF versus frame softmax.
    AblateSi(AblateSiArgs),
    /// Leave-one-corpus-out ablation: CRF versus frame softmax.
    AblateCross(AblateCrossArgs),
    /// Train only the CRF on feature-sequence files.
    CrfTrain(CrfTrainArgs),
    /// Run the randomized oracle or gradient self-checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// TOML generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the manifest and frames.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    sequences_per_subject: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    apex_noise: Option<f64>,
    #[arg(long)]
    transition_frames: Option<usize>,
    #[arg(long)]
    subject_bias_mean: Option<f64>,
}

/// Overrides shared by the training commands.
#[derive(Args)]
struct PipelineFlags {
    /// TOML pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// SGD iterations for the extractor.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum)]
    feature_tap: Option<Tap>,
    #[arg(long)]
    standardize_features: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tap {
    Penultimate,
    Logits,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    #[command(flatten)]
    flags: PipelineFlags,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Predictions JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arm {
    Crf,
    Softmax,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Corpus manifest holding the true labels.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum, default_value = "crf")]
    arm: Arm,
    /// Machine-readable metrics output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateSiArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    flags: PipelineFlags,
}

#[derive(Args)]
struct AblateCrossArgs {
    #[arg(long, num_args = 2.., required = true)]
    corpora: Vec<PathBuf>,
    #[arg(long)]
    test_name: String,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    flags: PipelineFlags,
}

#[derive(Args)]
struct CrfTrainArgs {
    /// Directory of `*.feat` files and an optional `labels.txt`.
    #[arg(long)]
    features_dir: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    sigma2: f64,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    out_model: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Oracle,
    Grad,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn pipeline_config(flags: &PipelineFlags) -> seqcrf::Result<TwoStepConfig> {
    let mut cfg = match &flags.config {
        Some(p) => TwoStepConfig::load(p)?,
        None => TwoStepConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(s) = flags.sigma2 {
        cfg.crf.sigma2 = s;
    }
    if let Some(n) = flags.iterations {
        cfg.sgd.total_iterations = n;
    }
    if let Some(t) = flags.feature_tap {
        cfg.feature_tap = match t {
            Tap::Penultimate => FeatureTap::Penultimate,
            Tap::Logits => FeatureTap::Logits,
        };
    }
    if flags.standardize_features {
        cfg.standardize_features = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn print_metrics(title: &str, m: &Metrics) {
    println!(
        "{title}: frame accuracy {:.2}% ({} / {} frames), sequence majority accuracy {:.2}% over {} sequences",
        100.0 * m.per_frame_accuracy,
        m.correct_frames(),
        m.num_frames,
        100.0 * m.sequence_majority_accuracy,
        m.num_sequences
    );
}

fn gen_synth(a: GenSynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| seqcrf::Error::InvalidConfig(e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.name {
        cfg.name = v;
    }
    if let Some(v) = a.subjects {
        cfg.num_subjects = v;
    }
    if let Some(v) = a.sequences_per_subject {
        cfg.sequences_per_subject = v;
    }
    if let Some(v) = a.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = a.apex_noise {
        cfg.apex_noise = v;
    }
    if let Some(v) = a.transition_frames {
        cfg.transition_frames = v;
    }
    if let Some(v) = a.subject_bias_mean {
        cfg.subject_bias_mean = v;
    }
    let corpus = generate_synthetic_corpus(&cfg)?;
    let manifest = save_corpus(&corpus, &a.out)?;
    println!(
        "wrote {} sequences ({} frames) to {}",
        corpus.sequences.len(),
        corpus.num_frames(),
        manifest.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = pipeline_config(&a.flags)?;
    let corpus = load_corpus(&a.corpus)?;
    let (pipeline, report) = train_two_step(&corpus, &cfg)?;
    save_model(&pipeline, &a.out_model)?;
    println!(
        "trained on {} sequences / {} frames; final extractor loss {:.4}; CRF objective {:.4} after {} iterations{}",
        report.train_sequences,
        report.train_frames,
        report.extractor_losses.last().copied().unwrap_or(f64::NAN),
        report.crf.final_objective,
        report.crf.iterations_used,
        if report.crf.converged { "" } else { " (iteration limit)" }
    );
    println!("model written to {}", a.out_model.display());
    Ok(())
}

fn check_labels(model_labels: &[String], corpus: &Corpus) -> seqcrf::Result<()> {
    if model_labels != corpus.label_set.names() {
        return Err(seqcrf::Error::DimensionMismatch(format!(
            "model labels {:?} do not match corpus labels {:?}",
            model_labels,
            corpus.label_set.names()
        )));
    }
    Ok(())
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let pipeline = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    check_labels(pipeline.label_set().names(), &corpus)?;
    let (with, without) = predict_both(&pipeline, &corpus)?;
    let sequences: Vec<_> = corpus
        .sequences
        .iter()
        .zip(with.iter().zip(&without))
        .map(|(s, (w, wo))| json!({"sequence_id": s.sequence_id, "crf": w.0, "softmax": wo.0}))
        .collect();
    write_json(
        &a.out,
        &json!({
            "labels": pipeline.label_set().names(),
            "config_hash": pipeline.provenance().config_hash,
            "seed": pipeline.provenance().seed,
            "sequences": sequences,
        }),
    )?;
    println!(
        "labeled {} sequences; predictions written to {}",
        sequences.len(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?;
    let pred: serde_json::Value = serde_json::from_str(&text).context("parsing predictions")?;
    let corpus = load_corpus(&a.truth)?;
    let labels: Vec<String> = serde_json::from_value(pred["labels"].clone()).context("predictions `labels`")?;
    check_labels(&labels, &corpus)?;
    let key = match a.arm {
        Arm::Crf => "crf",
        Arm::Softmax => "softmax",
    };
    let mut by_id: HashMap<String, LabelSequence> = HashMap::new();
    for s in pred["sequences"].as_array().context("predictions `sequences`")? {
        let id = s["sequence_id"].as_str().context("sequence_id")?.to_string();
        let seq: Vec<usize> = serde_json::from_value(s[key].clone()).with_context(|| format!("`{key}` of {id}"))?;
        by_id.insert(id, LabelSequence(seq));
    }
    let mut predictions = Vec::new();
    let mut truth = Vec::new();
    for s in &corpus.sequences {
        let Some(p) = by_id.remove(&s.sequence_id) else {
            return Err(seqcrf::Error::Misaligned(format!("no prediction for `{}`", s.sequence_id)).into());
        };
        predictions.push(p);
        truth.push(s.labels());
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(seqcrf::Error::Misaligned(format!("prediction for unknown sequence `{extra}`")).into());
    }
    let m = evaluate(&predictions, &truth, corpus.label_set.len())?;
    print_metrics(key, &m);
    for (name, r) in corpus.label_set.names().iter().zip(&m.per_class_recall) {
        println!("  recall {name:>12}: {:.2}%", 100.0 * r);
    }
    if let Some(path) = &a.report {
        write_json(path, &m)?;
    }
    Ok(())
}

fn finish_ablation(report: &AblationReport, path: Option<&Path>) -> anyhow::Result<()> {
    print!("{}", report.summary());
    print_metrics("with CRF", &report.with_crf);
    print_metrics("softmax ", &report.without_crf);
    if let Some(p) = path {
        write_json(p, report)?;
    }
    Ok(())
}

fn ablate_si(a: AblateSiArgs) -> anyhow::Result<()> {
    let cfg = pipeline_config(&a.flags)?;
    let corpus = load_corpus(&a.corpus)?;
    let report = run_subject_independent(&corpus, &cfg, a.folds, cfg.seed)?;
    finish_ablation(&report, a.report.as_deref())
}

fn ablate_cross(a: AblateCrossArgs) -> anyhow::Result<()> {
    let cfg = pipeline_config(&a.flags)?;
    let corpora = a
        .corpora
        .iter()
        .map(|p| load_corpus(p))
        .collect::<seqcrf::Result<Vec<_>>>()?;
    let report = run_cross_corpus(&corpora, &a.test_name, &cfg, cfg.seed)?;
    if report.dropped_train_sequences + report.dropped_test_sequences > 0 {
        println!(
            "dropped {} training and {} test sequences with unshared labels",
            report.dropped_train_sequences, report.dropped_test_sequences
        );
    }
    finish_ablation(&report, a.report.as_deref())
}

fn crf_train(a: CrfTrainArgs) -> anyhow::Result<()> {
    let (labels, items) = read_feature_dir(&a.features_dir)?;
    let n = items.len();
    let dim = items[0].0.dim();
    let data = RegularizedDataset::new(items, a.sigma2)?;
    let mut optim = OptimConfig::default();
    if let Some(m) = a.max_iterations {
        optim.max_iterations = m;
    }
    let (model, report) = train_crf(&data, &CrfModel::zeros(labels, dim)?, &optim)?;
    write_json(&a.out_model, &json!({"model": model, "report": report}))?;
    println!(
        "CRF trained on {n} sequences: objective {:.6} after {} iterations{}",
        report.final_objective,
        report.iterations_used,
        if report.converged { "" } else { " (iteration limit)" }
    );
    Ok(())
}

fn check(a: CheckArgs) -> anyhow::Result<()> {
    let reports: Vec<SuiteReport> = match a.suite {
        Suite::Oracle => vec![oracle_suite(200, a.seed)?],
        Suite::Grad => vec![crf_gradient_suite(50, a.seed)?, extractor_gradient_suite(2, a.seed)?],
    };
    let mut failed = false;
    for r in &reports {
        println!(
            "{}: {} instances, worst relative error {:.3e} (absolute {:.3e}): {}",
            r.name,
            r.instances,
            r.worst,
            r.worst_absolute,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        for f in &r.failures {
            println!("  {f}");
        }
        failed |= !r.passed();
    }
    if failed {
        bail!("self-check failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::AblateSi(a) => ablate_si(a),
        Command::AblateCross(a) => ablate_cross(a),
        Command::CrfTrain(a) => crf_train(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<seqcrf::Error>()
                .map_or(1, |e| e.category().exit_code());
            ExitCode::from(code as u8)
        }
    }
}
