use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use llns_core::arch::preset;
use llns_core::importance::Strategy;
use llns_core::lora::InitMode;
use llns_core::model::TaskKind;
use llns_core::pipeline::{self, AdapterShape, Experiment, FinetuneOptions, MAX_SEQ_LEN};
use llns_core::repio::write_atomic;
use llns_core::report::{Document, Table};
use llns_core::{Error, Result};

/// CKA-guided layer selection for LoRA fine-tuning.
#[derive(Debug, Parser)]
#[command(name = "llns", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dump per-layer representations of a toy model over task inputs.
    Extract(ExtractArgs),
    /// Score layer importance from a representation dump.
    Score(ScoreArgs),
    /// Pick the top-N layers from a score report.
    Select(SelectArgs),
    /// Build a plan from a heuristic (or from a score report) with parameter counts.
    Plan(PlanArgs),
    /// Fine-tune the adapters named by a plan.
    Finetune(FinetuneArgs),
    /// Turn score and train reports into CSV data files.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Kv,
    Csv,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long, default_value = "toy-decoder")]
    preset: String,
    #[arg(long, default_value = "copy-last-token", value_parser = parse_task)]
    task: TaskKind,
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Input length, including the CLS slot for encoders.
    #[arg(long, default_value_t = MAX_SEQ_LEN)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Kv)]
    format: Format,
}

#[derive(Debug, Args)]
struct ShapeArgs {
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Score report.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    layers: usize,
    /// Defaults to the score report's model id.
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Kv)]
    format: Format,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    preset: String,
    #[arg(long)]
    layers: usize,
    /// Defaults to cka when a score report is given.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Score report, required by the cka strategy.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[command(flatten)]
    shape: ShapeArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Kv)]
    format: Format,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Plan document.
    #[arg(long = "in")]
    input: PathBuf,
    /// Defaults to the plan's preset.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "copy-last-token", value_parser = parse_task)]
    task: TaskKind,
    #[arg(long, default_value_t = MAX_SEQ_LEN)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the plan's rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Overrides the plan's alpha.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value = "zero", value_parser = parse_init)]
    init: InitMode,
    #[arg(long, default_value_t = FinetuneOptions::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = FinetuneOptions::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = FinetuneOptions::default().learning_rate)]
    lr: f64,
    /// Report path; timing goes to `<out>.timing`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Kv)]
    format: Format,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Score or train reports.
    #[arg(long = "in", num_args = 0..)]
    inputs: Vec<PathBuf>,
    /// Directory for the CSV files.
    #[arg(long)]
    out: PathBuf,
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    TaskKind::parse(s).ok_or_else(|| "expected copy-last-token, modular-sum or parity".into())
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s)
        .ok_or_else(|| "expected cka, first, last, middle, extremes or alternate".into())
}

fn parse_init(s: &str) -> std::result::Result<InitMode, String> {
    InitMode::parse(s).ok_or_else(|| "expected zero or pissa".into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (class, code) = if e.is_validation() {
                ("validation", 1)
            } else {
                ("runtime", 2)
            };
            eprintln!("llns: {class} error: {e}");
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Extract(a) => {
            let exp = Experiment {
                preset: a.preset,
                task: a.task,
                seq_len: a.seq_len,
                seed: a.seed,
            };
            let m = pipeline::extract(&exp, a.samples, &a.out, created_utc())?;
            println!(
                "wrote {} layers x {} samples ({}, token rule {}) to {}",
                m.layer_count,
                m.sample_count,
                m.architecture,
                m.token_rule.as_str(),
                a.out.display()
            );
            Ok(())
        }
        Command::Score(a) => {
            let doc = pipeline::score(&a.input)?;
            print!("{}", doc.table("layers")?.to_csv());
            emit(&doc, a.out.as_deref(), a.format, false)
        }
        Command::Select(a) => {
            let score = read_doc(&a.input, "score")?;
            let name = match a.preset {
                Some(p) => p,
                None => score.get("model_id")?.to_string(),
            };
            let p = preset(&name)?;
            let shape = AdapterShape::for_preset(&p, a.shape.rank, a.shape.alpha)?;
            let doc = pipeline::select(&score, a.layers, &p, &shape)?;
            emit(&doc, a.out.as_deref(), a.format, true)
        }
        Command::Plan(a) => {
            let p = preset(&a.preset)?;
            let shape = AdapterShape::for_preset(&p, a.shape.rank, a.shape.alpha)?;
            let strategy = match (a.strategy, &a.input) {
                (Some(s), _) => s,
                (None, Some(_)) => Strategy::CkaImportance,
                (None, None) => {
                    return Err(Error::Invalid(
                        "plan needs --strategy or a score report via --in".into(),
                    ))
                }
            };
            let doc = match (strategy, &a.input) {
                (Strategy::CkaImportance, Some(path)) => {
                    pipeline::select(&read_doc(path, "score")?, a.layers, &p, &shape)?
                }
                (Strategy::CkaImportance, None) => {
                    return Err(Error::Invalid(
                        "the cka strategy needs a score report via --in".into(),
                    ))
                }
                (s, _) => pipeline::heuristic_plan(s, a.layers, &p, &shape)?,
            };
            emit(&doc, a.out.as_deref(), a.format, true)
        }
        Command::Finetune(a) => {
            let plan = read_doc(&a.input, "plan")?;
            let name = match a.preset {
                Some(p) => p,
                None => plan.get("preset")?.to_string(),
            };
            let exp = Experiment {
                preset: name,
                task: a.task,
                seq_len: a.seq_len,
                seed: a.seed,
            };
            let opts = FinetuneOptions {
                rank: a.rank,
                alpha: a.alpha,
                init: a.init,
                steps: a.steps,
                batch_size: a.batch,
                learning_rate: a.lr,
                ..FinetuneOptions::default()
            };
            let run = pipeline::finetune(&exp, &plan, &opts)?;
            let doc = &run.report;
            println!(
                "strategy {} layers [{}] trainable {} val_accuracy {} val_loss {}",
                doc.get("strategy")?,
                doc.get("selected")?,
                doc.get("trainable_params")?,
                doc.get("final_val_accuracy")?,
                doc.get("final_val_loss")?
            );
            emit(doc, Some(&a.out), a.format, false)?;
            let mut timing = a.out.into_os_string();
            timing.push(".timing");
            write_atomic(Path::new(&timing), run.timing.render().as_bytes())
        }
        Command::Report(a) => {
            let docs = a
                .inputs
                .iter()
                .map(|p| read_doc(p, ""))
                .collect::<Result<Vec<_>>>()?;
            let files = pipeline::report(&docs)?;
            fs::create_dir_all(&a.out)?;
            for f in files {
                let path = a.out.join(&f.name);
                write_atomic(&path, f.contents.as_bytes())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

/// Reads a report document, checking its kind unless `kind` is empty.
fn read_doc(path: &Path, kind: &str) -> Result<Document> {
    let doc = Document::parse(&fs::read_to_string(path)?)?;
    if kind.is_empty() {
        Ok(doc)
    } else {
        doc.expect_kind(kind)
    }
}

/// Writes the document to `out` in the chosen format, or to stdout when
/// `echo` is set and there is no file.
fn emit(doc: &Document, out: Option<&Path>, format: Format, echo: bool) -> Result<()> {
    let text = match format {
        Format::Kv => doc.render(),
        Format::Csv => to_csv(doc),
    };
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            if echo {
                print!("{text}");
            }
            Ok(())
        }
    }
}

/// The document's first table, or its fields as `key,value` rows.
fn to_csv(doc: &Document) -> String {
    if let Some(t) = doc.tables.first() {
        return t.to_csv();
    }
    let mut t = Table::new(&doc.kind, &["key", "value"]);
    t.push(vec!["kind".into(), doc.kind.clone()]);
    for (k, v) in &doc.fields {
        t.push(vec![k.clone(), v.clone()]);
    }
    t.to_csv()
}

/// Honors `SOURCE_DATE_EPOCH` for reproducible manifests.
fn created_utc() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}
