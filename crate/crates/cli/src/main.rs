//! `signtrans` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.

mod ablate;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use signtrans::autodiff::op_suite;
use signtrans::corpus::{
    generate_synthetic_corpus, load_dataset, read_manifest, read_video, AnnotationLevel,
    CorpusError, Dataset, Split, SyntheticConfig,
};
use signtrans::keypoints::{video_to_features, NormalizationMode, PartMask};
use signtrans::metrics::MetricReport;
use signtrans::models::{check_architecture, Architecture};
use signtrans::sampler::center_indices;
use signtrans::trainer::{
    evaluate_samples, fit, load_checkpoint, ClipMode, Schedule, SplitEvaluation, TrainConfig,
    TrainError,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "signtrans",
    version,
    about = "Keypoint-based sign language translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic keypoint corpus (keypoints, manifest, annotations).
    GenSynthetic(GenArgs),
    /// Normalize a corpus and write a JSON-lines feature cache.
    Preprocess(PreprocessArgs),
    /// Train a model; writes checkpoints and a per-epoch report.
    Train(TrainArgs),
    /// Greedy-decode a split into a `video_id<TAB>tokens` file.
    Translate(TranslateArgs),
    /// Score a checkpoint on a split and print a metric JSON.
    Evaluate(EvaluateArgs),
    /// Check analytic gradients of every op and architecture against central differences.
    Gradcheck(GradcheckArgs),
    /// Train one model per cell of an ablation axis and tabulate the results.
    Ablate(ablate::AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of sign classes.
    #[arg(long, visible_alias = "classes")]
    n_classes: Option<usize>,
    /// Number of signers; the last quarter (rounded up) is held out for test.
    #[arg(long, visible_alias = "signers")]
    n_signers: Option<usize>,
    /// Repetitions of each class by each signer.
    #[arg(long, visible_alias = "samples")]
    samples_per_class_per_signer: Option<usize>,
    /// Frames per video.
    #[arg(long, visible_alias = "frames")]
    frames_per_video: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Gaussian keypoint noise in pixels.
    #[arg(long)]
    jitter_std: Option<f64>,
    /// Static per-signer keypoint deformation, relative to part size.
    #[arg(long)]
    style_std: Option<f64>,
    /// Motion amplitude relative to part size.
    #[arg(long)]
    motion_scale: Option<f64>,
    /// Per-video relative motion perturbation.
    #[arg(long)]
    variation: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
    /// Normalization mode: feature, 2d, object or object_2d.
    #[arg(long, default_value = "object_2d")]
    normalization: NormalizationMode,
    /// Parts to keep, e.g. `body+hands` or `full`.
    #[arg(long, default_value = "full")]
    mask: PartMask,
    /// Also reduce each video to this many center-sampled frames.
    #[arg(long, visible_alias = "frames")]
    frames_n: Option<usize>,
}

/// Overrides for [`TrainConfig`]; each flag mirrors a field name.
#[derive(Args, Default, Clone)]
pub struct TrainFlags {
    /// Number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr0: Option<f64>,
    /// Epochs between learning-rate decays.
    #[arg(long)]
    decay_every: Option<usize>,
    /// Learning-rate decay factor.
    #[arg(long)]
    decay: Option<f64>,
    /// Learning-rate schedule: step or noam.
    #[arg(long)]
    schedule: Option<Schedule>,
    /// Warmup steps for the noam schedule.
    #[arg(long)]
    warmup_steps: Option<usize>,
    /// Gradient clipping threshold.
    #[arg(long)]
    clip_threshold: Option<f64>,
    /// Clipping mode: norm (global L2) or value (per entry).
    #[arg(long)]
    clip_mode: Option<ClipMode>,
    /// Dropout drop probability.
    #[arg(long)]
    dropout_p: Option<f64>,
    /// Batch size.
    #[arg(long, visible_alias = "batch")]
    batch_size: Option<usize>,
    /// Frames sampled per video.
    #[arg(long, visible_alias = "frames")]
    frames_n: Option<usize>,
    /// Sampled copies per training video.
    #[arg(long)]
    augmentation_factor: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Target annotation: sentence or gloss.
    #[arg(long, visible_alias = "level")]
    annotation_level: Option<AnnotationLevel>,
    /// Train on all reference sentences, not just the first.
    #[arg(long)]
    all_sentences: bool,
    /// Normalization mode: feature, 2d, object or object_2d.
    #[arg(long)]
    normalization: Option<NormalizationMode>,
    /// Parts to keep, e.g. `body+hands` or `full`.
    #[arg(long)]
    mask: Option<PartMask>,
    /// vanilla, bahdanau, luong_dot, luong_general, luong_concat or transformer.
    #[arg(long, visible_alias = "attention")]
    architecture: Option<Architecture>,
    /// Recurrent hidden size.
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Decoder embedding size.
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Stacked recurrent layers.
    #[arg(long)]
    num_layers: Option<usize>,
    /// Transformer model width.
    #[arg(long)]
    d_model: Option<usize>,
    /// Transformer attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Transformer feed-forward width.
    #[arg(long)]
    d_ff: Option<usize>,
    /// Transformer encoder layers.
    #[arg(long)]
    encoder_layers: Option<usize>,
    /// Transformer decoder layers.
    #[arg(long)]
    decoder_layers: Option<usize>,
    /// Longest greedy decode.
    #[arg(long)]
    max_decode_len: Option<usize>,
    /// Decode the dev split for metrics every this many epochs.
    #[arg(long)]
    eval_every: Option<usize>,
}

macro_rules! overlay {
    ($cfg:ident, $flags:ident, $($field:ident),*) => {
        $(if let Some(v) = $flags.$field.clone() { $cfg.$field = v; })*
    };
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        let f = self;
        overlay!(
            cfg,
            f,
            epochs,
            lr0,
            decay_every,
            decay,
            schedule,
            warmup_steps,
            clip_threshold,
            clip_mode,
            dropout_p,
            batch_size,
            frames_n,
            augmentation_factor,
            seed,
            annotation_level,
            normalization,
            mask,
            architecture,
            hidden_dim,
            embedding_dim,
            num_layers,
            d_model,
            heads,
            d_ff,
            encoder_layers,
            decoder_layers,
            max_decode_len,
            eval_every
        );
        if f.all_sentences {
            cfg.all_sentences = true;
        }
    }
}

/// Defaults, then the JSON file, then flags.
pub fn resolve_config(file: Option<&Path>, flags: &TrainFlags) -> CliResult<TrainConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and `report.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct TranslateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Split to translate.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Output TSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Split to score.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random inputs per op.
    #[arg(long, default_value_t = 20)]
    draws: u64,
    /// Seed for the architecture checks.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Also check the dot and concat Luong scores.
    #[arg(long)]
    all: bool,
}

/// Threshold on the maximum relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

/// The four architecture families compared in the ablation table.
pub const FAMILIES: [Architecture; 4] = [
    Architecture::Vanilla,
    Architecture::Bahdanau,
    Architecture::LuongGeneral,
    Architecture::Transformer,
];

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)
                    .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
            }
            fs::write(p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data") + "\n"
}

fn gen_synthetic(args: &GenArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => SyntheticConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { cfg.$f = v; })* };
    }
    set!(
        n_classes,
        n_signers,
        samples_per_class_per_signer,
        frames_per_video,
        seed,
        jitter_std,
        style_std,
        motion_scale,
        variation
    );
    let manifest = generate_synthetic_corpus(&cfg, &args.out)?;
    println!(
        "wrote {} videos to {}",
        manifest.rows.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CachedVideo<'a> {
    video_id: &'a str,
    split: Split,
    frames: Vec<&'a [f64]>,
}

fn preprocess(args: &PreprocessArgs) -> CliResult<()> {
    let manifest = read_manifest(&args.data)?;
    let mut out = String::new();
    for row in &manifest.rows {
        let frames = read_video(&args.data, &row.video_id)?;
        let mut feats = video_to_features(&frames, args.mask, args.normalization)
            .map_err(|e| CliError::Data(format!("{}: {e}", row.video_id)))?;
        if let Some(n) = args.frames_n {
            feats = feats.select(&center_indices(feats.len(), n));
        }
        let rec = CachedVideo {
            video_id: &row.video_id,
            split: row.split,
            frames: feats.frames.iter().map(|f| f.values.as_slice()).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain data"));
        out.push('\n');
    }
    write_output(Some(&args.out), &out)?;
    println!(
        "wrote {} videos to {}",
        manifest.rows.len(),
        args.out.display()
    );
    Ok(())
}

pub fn load_for(cfg: &TrainConfig, data: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(
        data,
        cfg.annotation_level,
        cfg.mask,
        cfg.normalization,
    )?)
}

fn train(args: &TrainArgs) -> CliResult<()> {
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let base = match (&args.config, &resume) {
        (None, Some(ck)) => {
            let mut cfg = ck.config.train.clone();
            args.flags.apply(&mut cfg);
            cfg.validate()?;
            cfg
        }
        _ => resolve_config(args.config.as_deref(), &args.flags)?,
    };
    let data = load_for(&base, &args.data)?;
    let outcome = fit(&data, &base, Some(&args.out), resume.as_ref())?;
    for r in &outcome.report.records {
        let dev = r.dev_loss.map_or("-".to_string(), |d| format!("{d:.6}"));
        println!(
            "epoch {:>4}  lr {:.6}  train_loss {:.6}  dev_loss {dev}",
            r.epoch, r.lr, r.train_loss
        );
    }
    println!("checkpoints in {}", args.out.display());
    Ok(())
}

fn checkpoint_and_data(
    checkpoint: &Path,
    data: &Path,
) -> CliResult<(signtrans::trainer::Checkpoint, Dataset)> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_for(&ck.config.train, data)?.with_vocab(ck.vocab.clone());
    if data.feature_dim() != ck.config.model.input_dim {
        return Err(CliError::Data(format!(
            "corpus features have {} dimensions, checkpoint expects {}",
            data.feature_dim(),
            ck.config.model.input_dim
        )));
    }
    Ok((ck, data))
}

fn translate(args: &TranslateArgs) -> CliResult<()> {
    let (ck, data) = checkpoint_and_data(&args.checkpoint, &args.data)?;
    let model = ck.model()?;
    let samples = data.split(args.split);
    let eval = evaluate_samples(&model, &data.vocab, &samples, args.split, &ck.config.train)?;
    let mut out = String::new();
    for (s, h) in samples.iter().zip(&eval.hypotheses) {
        out.push_str(&format!("{}\t{}\n", s.video_id, h.join(" ")));
    }
    write_output(args.out.as_deref(), &out)
}

#[derive(Serialize)]
pub struct EvaluationJson<'a> {
    pub split: Split,
    pub n_samples: usize,
    pub loss: f64,
    /// BLEU, ROUGE-L, METEOR and accuracies ×100; CIDEr raw.
    pub metrics: Option<MetricReport>,
    /// All scores on their natural scale.
    pub raw: Option<MetricReport>,
    pub config: &'a TrainConfig,
}

pub fn evaluation_json<'a>(
    eval: &SplitEvaluation,
    n: usize,
    cfg: &'a TrainConfig,
) -> EvaluationJson<'a> {
    EvaluationJson {
        split: eval.split,
        n_samples: n,
        loss: eval.loss,
        metrics: eval.metrics.as_ref().map(MetricReport::scaled),
        raw: eval.metrics.clone(),
        config: cfg,
    }
}

fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let (ck, data) = checkpoint_and_data(&args.checkpoint, &args.data)?;
    let model = ck.model()?;
    let samples = data.split(args.split);
    if samples.is_empty() {
        return Err(CliError::Data(format!("split {} is empty", args.split)));
    }
    let eval = evaluate_samples(&model, &data.vocab, &samples, args.split, &ck.config.train)?;
    write_output(
        args.out.as_deref(),
        &to_json(&evaluation_json(&eval, samples.len(), &ck.config.train)),
    )
}

fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let mut worst: f64 = 0.0;
    let mut line = |name: &str, err: f64| {
        worst = worst.max(err);
        let verdict = if err < GRAD_TOLERANCE { "PASS" } else { "FAIL" };
        println!("{verdict} {name:<20} max_rel_err {err:.3e}");
    };
    for (name, err) in op_suite(args.draws).map_err(|e| CliError::Numeric(e.to_string()))? {
        line(&format!("op:{name}"), err);
    }
    let archs: Vec<Architecture> = if args.all {
        Architecture::ALL.to_vec()
    } else {
        FAMILIES.to_vec()
    };
    for arch in archs {
        let report =
            check_architecture(arch, args.seed).map_err(|e| CliError::Numeric(e.to_string()))?;
        line(&format!("model:{arch}"), report.max_rel_err);
    }
    println!("max_rel_err {worst:.3e}");
    if worst < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {worst:.3e} >= {GRAD_TOLERANCE:e}"
        )))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(&a),
        Command::Preprocess(a) => preprocess(&a),
        Command::Train(a) => train(&a),
        Command::Translate(a) => translate(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Ablate(a) => ablate::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
