//! The end-to-end stages behind the `llns` subcommands: extract, score,
//! select or plan, finetune and report. Each stage is a pure function of its
//! inputs and seed, so repeated runs write identical documents.

use std::collections::BTreeSet;
use std::path::Path;

use crate::arch::{count_trainable, preset, Preset, Role};
use crate::error::{Error, Result};
use crate::importance::{
    layer_importance, select_by_heuristic, select_by_importance, SelectionPlan, Strategy,
};
use crate::lora::InitMode;
use crate::model::{
    apply_plan, train, AdaptedModel, Batch, Hyperparameters, LoraConfig, SyntheticTask, TaskData,
    TaskKind, ToyModel, ToyModelConfig,
};
use crate::repio::{read_representation_set, write_representation_set, Manifest};
use crate::report::{
    fmt_f64, fmt_layers, importance_from_document, parse_layers, plan_document, plan_from_document,
    score_document, Document, PlanCounts, Table,
};

/// Position-embedding rows of every toy model, and so the longest task input.
pub const MAX_SEQ_LEN: usize = 32;
pub const TRAIN_SIZE: usize = 4096;
pub const VAL_SIZE: usize = 512;

/// Everything that fixes a base model and its task data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Experiment {
    pub preset: String,
    pub task: TaskKind,
    /// Input length, including the CLS slot for encoders.
    pub seq_len: usize,
    pub seed: u64,
}

/// Independent RNG streams from one user seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TASK: u64 = 1;
const STREAM_ADAPTER: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

impl Experiment {
    fn buildable(&self) -> Result<Preset> {
        let p = preset(&self.preset)?;
        if !p.buildable {
            return Err(Error::Invalid(format!(
                "preset {} is count-only and has no weights",
                p.name
            )));
        }
        if self.seq_len == 0 || self.seq_len > MAX_SEQ_LEN {
            return Err(Error::Invalid(format!(
                "sequence length must be in 1..={MAX_SEQ_LEN}"
            )));
        }
        Ok(p)
    }

    pub fn base_model(&self) -> Result<ToyModel> {
        let p = self.buildable()?;
        ToyModel::new(ToyModelConfig {
            spec: p.spec,
            max_seq_len: MAX_SEQ_LEN,
            seed: self.seed,
        })
    }

    /// Train and validation data. Raising `train_size` only appends to the
    /// train split, so probes drawn from its prefix are stable.
    pub fn data(&self, train_size: usize) -> Result<TaskData> {
        let p = self.buildable()?;
        SyntheticTask {
            kind: self.task,
            sequence_length: self.seq_len,
            vocab_size: p.spec.vocab_size,
            train_size,
            val_size: VAL_SIZE,
            seed: derive_seed(self.seed, STREAM_TASK),
        }
        .generate(p.spec.architecture)
    }

    pub fn dataset_id(&self) -> String {
        format!(
            "{}-len{}-seed{}",
            self.task.as_str(),
            self.seq_len,
            self.seed
        )
    }
}

/// Runs `sample_count` task inputs through the base model and writes
/// `R_0..R_M` plus a manifest.
pub fn extract(
    exp: &Experiment,
    sample_count: usize,
    out: &Path,
    created_utc: u64,
) -> Result<Manifest> {
    if sample_count < 2 {
        return Err(Error::TooFewSamples(sample_count));
    }
    let model = exp.base_model()?;
    let data = exp.data(TRAIN_SIZE.max(sample_count))?;
    let batch = Batch::from_examples(&data.train[..sample_count])?;
    let set = model.extract_representations(&batch, &exp.preset)?;
    let dataset_id = exp.dataset_id();
    write_representation_set(&set, out, &dataset_id, created_utc)?;
    let (_, manifest) = read_representation_set(out)?;
    Ok(manifest)
}

/// Scores a representation dump.
pub fn score(input: &Path) -> Result<Document> {
    let (set, manifest) = read_representation_set(input)?;
    let iv = layer_importance(&set)?;
    Ok(score_document(
        &iv,
        manifest.sample_count,
        &manifest.dataset_id,
    ))
}

/// Rank, alpha and target roles used for parameter accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterShape {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<Role>,
}

impl AdapterShape {
    /// The preset's defaults, with optional overrides.
    pub fn for_preset(p: &Preset, rank: Option<usize>, alpha: Option<f64>) -> Result<Self> {
        let rank = rank.unwrap_or(p.rank);
        let alpha = alpha.unwrap_or(p.alpha);
        if rank == 0 {
            return Err(Error::Invalid("rank must be positive".into()));
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::Invalid(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            rank,
            alpha,
            targets: p.spec.lora_targets.clone(),
        })
    }

    fn targets_text(&self) -> String {
        self.targets
            .iter()
            .map(|r| r.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn plan_counts(p: &Preset, plan: &SelectionPlan, shape: &AdapterShape) -> Result<PlanCounts> {
    if plan.layer_count != p.spec.n_layers {
        return Err(Error::Selection(format!(
            "plan covers {} layers, preset {} has {}",
            plan.layer_count, p.name, p.spec.n_layers
        )));
    }
    let mut spec = p.spec.clone();
    spec.lora_targets = shape.targets.clone();
    Ok(PlanCounts {
        preset: p.name.to_string(),
        rank: shape.rank,
        alpha: shape.alpha,
        targets: shape.targets_text(),
        plan_params: count_trainable(&spec, shape.rank, plan.selected.len()),
        baseline_params: count_trainable(&spec, shape.rank, spec.n_layers),
    })
}

/// Top-`n` layers by importance, as a plan document.
pub fn select(
    score_doc: &Document,
    n: usize,
    p: &Preset,
    shape: &AdapterShape,
) -> Result<Document> {
    let iv = importance_from_document(score_doc)?;
    let plan = select_by_importance(&iv, n)?;
    Ok(plan_document(&plan, &plan_counts(p, &plan, shape)?))
}

/// A heuristic plan over the preset's layers.
pub fn heuristic_plan(
    strategy: Strategy,
    n: usize,
    p: &Preset,
    shape: &AdapterShape,
) -> Result<Document> {
    if strategy == Strategy::CkaImportance {
        return Err(Error::Invalid(
            "the cka strategy needs a score report".into(),
        ));
    }
    let mut plan = select_by_heuristic(strategy, p.spec.n_layers, n)?;
    plan.model_id = p.name.to_string();
    Ok(plan_document(&plan, &plan_counts(p, &plan, shape)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    /// Overrides the plan's rank.
    pub rank: Option<usize>,
    /// Overrides the plan's alpha.
    pub alpha: Option<f64>,
    pub init: InitMode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        let hp = Hyperparameters::default();
        Self {
            rank: None,
            alpha: None,
            init: InitMode::ZeroB,
            steps: hp.steps,
            batch_size: hp.batch_size,
            learning_rate: hp.learning_rate,
            momentum: hp.momentum,
        }
    }
}

/// Outcome of [`finetune`]: the deterministic report, the timing sidecar and
/// the trained model.
#[derive(Debug)]
pub struct FinetuneRun {
    pub report: Document,
    pub timing: Document,
    pub model: AdaptedModel,
}

/// Attaches adapters per the plan and trains them on the experiment's task.
pub fn finetune(
    exp: &Experiment,
    plan_doc: &Document,
    opts: &FinetuneOptions,
) -> Result<FinetuneRun> {
    let plan = plan_from_document(plan_doc)?;
    let rank = match opts.rank {
        Some(r) => r,
        None => plan_doc.parse_field("rank")?,
    };
    let alpha = match opts.alpha {
        Some(a) => a,
        None => plan_doc.parse_field("alpha")?,
    };
    let p = preset(&exp.preset)?;
    let shape = AdapterShape::for_preset(&p, Some(rank), Some(alpha))?;
    let base = exp.base_model()?;
    let cfg = LoraConfig {
        rank,
        alpha,
        init: opts.init,
        targets: None,
        seed: derive_seed(exp.seed, STREAM_ADAPTER),
    };
    let mut model = apply_plan(&base, &plan, &cfg)?;
    let expected = plan_counts(&p, &plan, &shape)?.plan_params;
    let data = exp.data(TRAIN_SIZE)?;
    let hp = Hyperparameters {
        steps: opts.steps,
        batch_size: opts.batch_size,
        learning_rate: opts.learning_rate,
        momentum: opts.momentum,
        seed: derive_seed(exp.seed, STREAM_SHUFFLE),
    };
    let tr = train(&mut model, &data, &hp)?;
    if tr.trainable_parameters != expected {
        return Err(Error::Numerical(format!(
            "model carries {} trainable parameters, accounting expects {expected}",
            tr.trainable_parameters
        )));
    }

    let mut doc = Document::new("train");
    doc.set("model_id", &plan.model_id);
    doc.set("preset", &exp.preset);
    doc.set("task", exp.task.as_str());
    doc.set("dataset_id", exp.dataset_id());
    doc.set("strategy", plan.strategy);
    doc.set("n_layers", plan.n_layers);
    doc.set("layer_count", plan.layer_count);
    doc.set("selected", fmt_layers(&plan.selected));
    doc.set("rank", rank);
    doc.set("alpha", fmt_f64(alpha));
    doc.set("init", opts.init.as_str());
    doc.set("targets", shape.targets_text());
    doc.set("seed", exp.seed);
    doc.set("steps", hp.steps);
    doc.set("batch_size", hp.batch_size);
    doc.set("learning_rate", fmt_f64(hp.learning_rate));
    doc.set("momentum", fmt_f64(hp.momentum));
    doc.set("trainable_params", tr.trainable_parameters);
    doc.set("peak_memory_bytes", tr.peak_memory_bytes);
    doc.set("metric", "val_accuracy");
    doc.set("final_val_accuracy", fmt_f64(tr.final_val_accuracy));
    doc.set("final_val_loss", fmt_f64(tr.final_val_loss));
    let mut curve = Table::new("loss_curve", &["step", "loss"]);
    for (i, l) in tr.loss_curve.iter().enumerate() {
        curve.push(vec![(i + 1).to_string(), fmt_f64(*l)]);
    }
    doc.tables.push(curve);

    let mut timing = Document::new("timing");
    timing.set("wall_clock_seconds", fmt_f64(tr.wall_clock_seconds));
    timing.set(
        "seconds_per_step",
        fmt_f64(tr.wall_clock_seconds / hp.steps.max(1) as f64),
    );

    Ok(FinetuneRun {
        report: doc,
        timing,
        model,
    })
}

/// A named CSV file produced by [`report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFile {
    pub name: String,
    pub contents: String,
}

/// Turns score and train documents into plot-ready CSV tables: a per-layer
/// CKA curve for each score report, a parameters-versus-metric table over
/// all train reports, and metric deltas against the all-layer run.
pub fn report(docs: &[Document]) -> Result<Vec<ReportFile>> {
    if docs.is_empty() {
        return Err(Error::Invalid(
            "report needs at least one input document".into(),
        ));
    }
    let scores: Vec<&Document> = docs.iter().filter(|d| d.kind == "score").collect();
    let runs: Vec<&Document> = docs.iter().filter(|d| d.kind == "train").collect();
    if let Some(d) = docs.iter().find(|d| d.kind != "score" && d.kind != "train") {
        return Err(Error::Document(format!(
            "cannot report on a {} document",
            d.kind
        )));
    }

    let mut files = Vec::new();
    for (i, doc) in scores.iter().enumerate() {
        importance_from_document(doc)?;
        let table = doc.table("layers")?;
        let name = if scores.len() == 1 {
            "cka_curve.csv".to_string()
        } else {
            format!("cka_curve_{}.csv", i + 1)
        };
        files.push(ReportFile {
            name,
            contents: table.to_csv(),
        });
    }

    if !runs.is_empty() {
        let mut pvm = Table::new(
            "params_vs_metric",
            &[
                "run",
                "strategy",
                "n_layers",
                "selected",
                "rank",
                "alpha",
                "init",
                "trainable_params",
                "val_accuracy",
                "val_loss",
            ],
        );
        let mut all_layers = None;
        for (i, doc) in runs.iter().enumerate() {
            let selected = parse_layers(doc.get("selected")?)?;
            let layer_count: usize = doc.parse_field("layer_count")?;
            let acc: f64 = doc.parse_field("final_val_accuracy")?;
            if selected.len() == layer_count && all_layers.is_none() {
                all_layers = Some(acc);
            }
            pvm.push(vec![
                (i + 1).to_string(),
                doc.get("strategy")?.to_string(),
                selected.len().to_string(),
                fmt_layers(&selected),
                doc.get("rank")?.to_string(),
                doc.get("alpha")?.to_string(),
                doc.get("init")?.to_string(),
                doc.parse_field::<u64>("trainable_params")?.to_string(),
                fmt_f64(acc),
                fmt_f64(doc.parse_field("final_val_loss")?),
            ]);
        }
        files.push(ReportFile {
            name: "params_vs_metric.csv".into(),
            contents: pvm.to_csv(),
        });

        if let Some(metric_all) = all_layers {
            let mut delta = Table::new(
                "strategy_delta",
                &[
                    "run",
                    "strategy",
                    "n_layers",
                    "metric_all",
                    "metric_subset",
                    "delta",
                ],
            );
            for (i, doc) in runs.iter().enumerate() {
                let selected = parse_layers(doc.get("selected")?)?;
                if selected.len() == doc.parse_field::<usize>("layer_count")? {
                    continue;
                }
                let acc: f64 = doc.parse_field("final_val_accuracy")?;
                delta.push(vec![
                    (i + 1).to_string(),
                    doc.get("strategy")?.to_string(),
                    selected.len().to_string(),
                    fmt_f64(metric_all),
                    fmt_f64(acc),
                    fmt_f64(metric_all - acc),
                ]);
            }
            if !delta.rows.is_empty() {
                files.push(ReportFile {
                    name: "strategy_delta.csv".into(),
                    contents: delta.to_csv(),
                });
            }
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp() -> Experiment {
        Experiment {
            preset: "toy-decoder".into(),
            task: TaskKind::CopyLastToken,
            seq_len: 4,
            seed: 7,
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let s: BTreeSet<u64> = (0..4).map(|k| derive_seed(5, k)).collect();
        assert_eq!(s.len(), 4);
        assert_eq!(derive_seed(5, 2), derive_seed(5, 2));
    }

    #[test]
    fn count_only_presets_cannot_build() {
        let e = Experiment {
            preset: "llama2-7b-math".into(),
            ..exp()
        };
        assert!(matches!(e.base_model(), Err(Error::Invalid(_))));
        let e = Experiment {
            seq_len: MAX_SEQ_LEN + 1,
            ..exp()
        };
        assert!(e.base_model().is_err());
    }

    #[test]
    fn probe_prefix_is_stable() {
        let a = exp().data(100).unwrap();
        let b = exp().data(300).unwrap();
        assert_eq!(a.train[..], b.train[..100]);
    }

    #[test]
    fn roberta_plan_counts() {
        let p = preset("roberta-base-glue").unwrap();
        let shape = AdapterShape::for_preset(&p, None, None).unwrap();
        let doc = heuristic_plan(Strategy::Middle, 6, &p, &shape).unwrap();
        assert_eq!(doc.get("plan_params").unwrap(), "147456");
        assert_eq!(doc.get("baseline_params").unwrap(), "294912");
        assert_eq!(doc.get("selected").unwrap(), "4 5 6 7 8 9");
    }

    #[test]
    fn report_requires_input() {
        assert!(report(&[]).is_err());
        assert!(report(&[Document::new("plan")]).is_err());
    }
}
