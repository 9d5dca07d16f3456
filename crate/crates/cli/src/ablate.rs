use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use signtrans::corpus::Split;
use signtrans::keypoints::{NormalizationMode, PartMask};
use signtrans::metrics::MetricReport;
use signtrans::trainer::{evaluate_samples, fit, TrainConfig};

use crate::{load_for, resolve_config, to_json, CliError, CliResult, TrainFlags, FAMILIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// One cell per normalization mode.
    Normalization,
    /// One cell per combination of body, hands and face.
    Mask,
    /// One cell per architecture family.
    Attention,
}

#[derive(Args)]
pub struct AblateArgs {
    /// What to vary.
    #[arg(long, value_enum)]
    axis: Axis,
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory: one `<cell>.json` per cell plus `report.md` and `report.json`.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seeds per cell, comma separated; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Restrict the attention axis to these architectures, comma separated.
    #[arg(long, value_delimiter = ',')]
    cells: Vec<signtrans::models::Architecture>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitScore {
    pub loss: f64,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub seconds: f64,
    pub final_train_loss: f64,
    pub train: SplitScore,
    pub dev: SplitScore,
    pub test: SplitScore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanScores {
    pub train: Option<MetricReport>,
    pub dev: Option<MetricReport>,
    pub test: Option<MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub axis: Axis,
    pub cell: String,
    pub config: TrainConfig,
    pub runs: Vec<RunResult>,
    /// Metrics averaged over seeds, on their natural scale.
    pub mean: MeanScores,
}

fn mean_report(reports: &[&MetricReport]) -> Option<MetricReport> {
    let n = reports.len() as f64;
    if reports.is_empty() {
        return None;
    }
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    Some(MetricReport {
        sentence_accuracy: avg(|r| r.sentence_accuracy),
        word_accuracy: avg(|r| r.word_accuracy),
        bleu: avg(|r| r.bleu),
        rouge_l: avg(|r| r.rouge_l),
        meteor: avg(|r| r.meteor),
        cider: avg(|r| r.cider),
        n_samples: reports[0].n_samples,
    })
}

fn cells(args: &AblateArgs, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match args.axis {
        Axis::Normalization => NormalizationMode::ALL
            .iter()
            .map(|&m| {
                (
                    m.to_string(),
                    TrainConfig {
                        normalization: m,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Axis::Mask => PartMask::all()
            .into_iter()
            .map(|m| {
                (
                    m.to_string(),
                    TrainConfig {
                        mask: m,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Axis::Attention => {
            let archs = if args.cells.is_empty() {
                FAMILIES.to_vec()
            } else {
                args.cells.clone()
            };
            archs
                .into_iter()
                .map(|a| {
                    (
                        a.to_string(),
                        TrainConfig {
                            architecture: a,
                            ..base.clone()
                        },
                    )
                })
                .collect()
        }
    }
}

pub fn run(args: &AblateArgs) -> CliResult<()> {
    let base = resolve_config(args.config.as_deref(), &args.flags)?;
    let seeds = if args.seeds.is_empty() {
        vec![base.seed]
    } else {
        args.seeds.clone()
    };
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let mut results = Vec::new();
    for (name, cfg) in cells(args, &base) {
        let data = load_for(&cfg, &args.data)?;
        let mut runs = Vec::new();
        for &seed in &seeds {
            let cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let dir = args
                .out
                .join("runs")
                .join(&name)
                .join(format!("seed{seed}"));
            let start = Instant::now();
            let outcome = fit(&data, &cfg, Some(&dir), None)?;
            let score = |split: Split| -> CliResult<SplitScore> {
                let samples = data.split(split);
                if samples.is_empty() {
                    return Ok(SplitScore {
                        loss: f64::NAN,
                        metrics: None,
                    });
                }
                let e = evaluate_samples(&outcome.model, &data.vocab, &samples, split, &cfg)?;
                Ok(SplitScore {
                    loss: e.loss,
                    metrics: e.metrics,
                })
            };
            let (train, dev, test) = (
                score(Split::Train)?,
                score(Split::Dev)?,
                score(Split::Test)?,
            );
            let run = RunResult {
                seed,
                seconds: start.elapsed().as_secs_f64(),
                final_train_loss: outcome
                    .report
                    .records
                    .last()
                    .map_or(f64::NAN, |r| r.train_loss),
                train,
                dev,
                test,
            };
            eprintln!(
                "{name} seed {seed}: train acc {:.3}, dev bleu {:.3}, test bleu {:.3} ({:.1}s)",
                run.train
                    .metrics
                    .as_ref()
                    .map_or(f64::NAN, |m| m.sentence_accuracy),
                run.dev.metrics.as_ref().map_or(f64::NAN, |m| m.bleu),
                run.test.metrics.as_ref().map_or(f64::NAN, |m| m.bleu),
                run.seconds
            );
            runs.push(run);
        }
        let pick = |f: fn(&RunResult) -> &SplitScore| -> Option<MetricReport> {
            let reports: Option<Vec<&MetricReport>> =
                runs.iter().map(|r| f(r).metrics.as_ref()).collect();
            reports.and_then(|r| mean_report(&r))
        };
        let mean = MeanScores {
            train: pick(|r| &r.train),
            dev: pick(|r| &r.dev),
            test: pick(|r| &r.test),
        };
        let cell = CellResult {
            axis: args.axis,
            cell: name.clone(),
            config: TrainConfig {
                seed: seeds[0],
                ..cfg
            },
            runs,
            mean,
        };
        let path = args.out.join(format!("{name}.json"));
        fs::write(&path, to_json(&cell))
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        results.push(cell);
    }
    let table = render_table(&results);
    print!("{table}");
    let write = |file: &str, text: String| {
        let path = args.out.join(file);
        fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    };
    write("report.md", table)?;
    write("report.json", to_json(&results))?;
    Ok(())
}

/// Rows are cells; columns are BLEU, ROUGE-L, METEOR (×100) and CIDEr for dev then test.
pub fn render_table(results: &[CellResult]) -> String {
    let mut s = String::from(
        "| cell | dev BLEU | dev ROUGE-L | dev METEOR | dev CIDEr | test BLEU | test ROUGE-L | test METEOR | test CIDEr |\n",
    );
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in results {
        let _ = write!(s, "| {} ", r.cell);
        for m in [&r.mean.dev, &r.mean.test] {
            match m {
                Some(m) => {
                    let _ = write!(
                        s,
                        "| {:.2} | {:.2} | {:.2} | {:.3} ",
                        100.0 * m.bleu,
                        100.0 * m.rouge_l,
                        100.0 * m.meteor,
                        m.cider
                    );
                }
                None => s.push_str("| - | - | - | - "),
            }
        }
        s.push_str("|\n");
    }
    s
}
