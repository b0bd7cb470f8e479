//! Reproducible experiments: configuration, evaluation and the commands
//! behind the `cleo` binary.
//!
//! A run directory contains
//!
//! ```text
//! config.json          the resolved configuration
//! checkpoints/task_<t>.ckpt
//! report.csv           per-class IoU with group means
//! taskwise.csv         mean IoU per introducing task
//! summary.json
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learner::{predict, run_sequence, write_checkpoint, Checkpoint, Method, ModelParams, RunOutput, TrainConfig};
use crate::metrics::{
    group_report, mean_iou, taskwise_report, write_report_csv, write_taskwise_csv, ConfusionMatrix, GroupReport,
    TaskwiseReport, UndefinedIou,
};
use crate::ontology::presets::{default_epochs, preset, PRESET_NAMES};
use crate::ontology::{ClassId, TaskSequence};
use crate::par::Execution;
use crate::synthdata::{generate_benchmark, load_dataset, write_dataset, Benchmark, Scene, SynthParams};

/// Everything needed to reproduce a dataset and a run.
///
/// `seed` drives both data generation and training; `train.seed` is
/// overwritten by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub sequence: Option<PathBuf>,
    pub method: Method,
    pub seed: u64,
    pub train: TrainConfig,
    pub synth: SynthParams,
    pub undefined_iou: UndefinedIou,
    /// Dataset directory read by `run`; generated in memory when absent.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            sequence: None,
            method: Method::Moon,
            seed: 0,
            train: TrainConfig::default(),
            synth: SynthParams::default(),
            undefined_iou: UndefinedIou::Exclude,
            data: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON configuration. Returns whether `train.epochs` was given
    /// explicitly.
    pub fn load(path: &Path) -> Result<(Self, bool)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let explicit = value.pointer("/train/epochs").is_some();
        let cfg = serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((cfg, explicit))
    }

    /// Uses the preset's customary epoch count (50 for Cityscapes, else 30).
    pub fn use_preset_epochs(&mut self) {
        if let Some(name) = &self.preset {
            self.train.epochs = default_epochs(name);
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.preset, &self.sequence) {
            (Some(_), Some(_)) => return Err(Error::Config("give either a preset or a sequence file, not both".into())),
            (None, None) => return Err(Error::Config("a preset or a sequence file is required".into())),
            _ => {}
        }
        self.train.validate()?;
        self.synth.validate()
    }

    /// Loads the task sequence named by the configuration.
    pub fn sequence(&self) -> Result<TaskSequence> {
        self.validate()?;
        let seq = match (&self.preset, &self.sequence) {
            (Some(name), _) => preset(name)?,
            (None, Some(path)) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                TaskSequence::from_json(&text)?
            }
            (None, None) => unreachable!("validated above"),
        };
        seq.ensure_valid()?;
        Ok(seq)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("an output directory (--out) is required".into()))
    }
}

/// Labels of the held-out scenes, mapped by `map`.
fn eval_truth(scenes: &[Scene], map: impl Fn(ClassId) -> Result<ClassId>) -> Result<Vec<ClassId>> {
    let mut out = Vec::new();
    for s in scenes {
        for &c in s.finest.labels() {
            out.push(map(c)?);
        }
    }
    Ok(out)
}

fn eval_features(scenes: &[Scene]) -> Vec<f64> {
    scenes.iter().flat_map(|s| s.features.data().iter().copied()).collect()
}

/// Confusion matrix of `model` (whose logits follow `space`) against
/// `truth`.
pub fn confusion(
    model: &ModelParams,
    space: &[ClassId],
    features: &[f64],
    truth: &[ClassId],
    exec: Execution,
) -> Result<ConfusionMatrix> {
    if model.classes() != space.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} logits", space.len()),
            got: model.classes().to_string(),
        });
    }
    let pred: Vec<ClassId> = predict(model, features, exec)?.into_iter().map(|i| space[i]).collect();
    ConfusionMatrix::from_labels(space, &pred, truth, exec)
}

/// Group report of a final-label-space model on the held-out scenes.
pub fn evaluate_final(
    seq: &TaskSequence,
    model: &ModelParams,
    eval: &[Scene],
    policy: UndefinedIou,
    exec: Execution,
) -> Result<GroupReport> {
    let space = seq.label_space_at(seq.last_task())?;
    let map = seq.final_eval_map();
    let truth = eval_truth(eval, |c| map.get(c))?;
    let cm = confusion(model, &space, &eval_features(eval), &truth, exec)?;
    group_report(&cm, seq.ontology(), &seq.class_groups(), policy)
}

/// Mean IoU of the checkpoint after task `t` over the non-background classes
/// evaluated at that point.
pub fn evaluate_checkpoint(
    seq: &TaskSequence,
    t: usize,
    model: &ModelParams,
    eval: &[Scene],
    policy: UndefinedIou,
    exec: Execution,
) -> Result<Option<f64>> {
    let space = seq.label_space_at(t)?;
    let map = seq.eval_map_at(t)?;
    let truth = eval_truth(eval, |c| map.get(c))?;
    let cm = confusion(model, &space, &eval_features(eval), &truth, exec)?;
    let ious = seq
        .evaluated_classes_at(t)?
        .into_iter()
        .filter(|c| !c.is_background())
        .map(|c| cm.iou(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_iou(ious, policy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub task: usize,
    pub file: String,
    pub sha256: String,
    pub miou: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub sequence: String,
    pub seed: u64,
    pub lambda: f64,
    pub unsplit: Option<f64>,
    pub split: Option<f64>,
    pub retained: Option<f64>,
    pub all: Option<f64>,
    pub taskwise: Vec<Option<f64>>,
    pub checkpoints: Vec<CheckpointSummary>,
}

/// A trained and evaluated run, before anything touches the disk.
#[derive(Clone, Debug)]
pub struct Evaluated {
    pub run: RunOutput,
    pub report: GroupReport,
    pub taskwise: TaskwiseReport,
    /// Mean IoU after each training step.
    pub checkpoint_miou: Vec<Option<f64>>,
}

/// Trains `method` on `bench` and evaluates the final model and every
/// checkpoint.
pub fn run_and_evaluate(
    seq: &TaskSequence,
    bench: &Benchmark,
    method: Method,
    cfg: &TrainConfig,
    policy: UndefinedIou,
    exec: Execution,
) -> Result<Evaluated> {
    let data = bench.training_sets(seq, method == Method::Joint)?;
    let run = run_sequence(seq, &data, method, cfg, exec)?;
    let report = evaluate_final(seq, run.final_model(), &bench.eval, policy, exec)?;
    let taskwise = taskwise_report(&report, seq, policy);
    let checkpoint_miou = if method == Method::Joint {
        vec![report.all]
    } else {
        run.checkpoints
            .iter()
            .enumerate()
            .map(|(t, m)| evaluate_checkpoint(seq, t, m, &bench.eval, policy, exec))
            .collect::<Result<_>>()?
    };
    Ok(Evaluated {
        run,
        report,
        taskwise,
        checkpoint_miou,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// One line per shipped preset: task count and class-group sizes.
pub fn cmd_presets(mut w: impl Write) -> Result<()> {
    let mut lines = vec![format!(
        "{:<8} {:>5} {:>7} {:>5} {:>8}  unsplit classes",
        "preset", "tasks", "unsplit", "split", "retained"
    )];
    for name in PRESET_NAMES {
        let seq = preset(name)?;
        let groups = seq.class_groups();
        let unsplit: Vec<ClassId> = groups.unsplit.iter().copied().filter(|c| !c.is_background()).collect();
        lines.push(format!(
            "{:<8} {:>5} {:>7} {:>5} {:>8}  {}",
            name,
            seq.num_tasks(),
            unsplit.len(),
            groups.split.len(),
            groups.retained.len(),
            seq.ontology().names(unsplit).join(", ")
        ));
    }
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub sequence: String,
    pub seed: u64,
    pub params: SynthParams,
    /// Relative path and SHA-256 of every written file, in write order.
    pub files: Vec<(String, String)>,
}

/// Generates the benchmark named by `cfg` into `cfg.out` and writes
/// `receipt.json`.
pub fn cmd_generate(cfg: &ExperimentConfig, exec: Execution) -> Result<Receipt> {
    let seq = cfg.sequence()?;
    let dir = cfg.out_dir()?;
    let (_, bench) = generate_benchmark(&seq, &cfg.synth, cfg.seed, exec)?;
    let written = write_dataset(dir, &seq, &bench)?;
    let mut files = Vec::with_capacity(written.len());
    for rel in written {
        let path = dir.join(&rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        files.push((rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes)));
    }
    let receipt = Receipt {
        sequence: sequence_name(cfg, &seq),
        seed: cfg.seed,
        params: cfg.synth.clone(),
        files,
    };
    write_file(&dir.join("receipt.json"), &json_bytes(&receipt)?)?;
    Ok(receipt)
}

fn sequence_name(cfg: &ExperimentConfig, seq: &TaskSequence) -> String {
    cfg.preset
        .clone()
        .or_else(|| seq.name().map(str::to_string))
        .or_else(|| cfg.sequence.as_ref().map(|p| p.display().to_string()))
        .unwrap_or_default()
}

/// Trains and evaluates one method, writing checkpoints and reports to
/// `cfg.out`. Reads the dataset in `cfg.data` without modifying it, or
/// generates the benchmark in memory from `cfg.synth` and `cfg.seed`.
pub fn cmd_run(cfg: &ExperimentConfig, exec: Execution) -> Result<Summary> {
    let (seq, bench) = match &cfg.data {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            cfg.validate()?;
            let named = cfg.sequence()?;
            if named != ds.sequence {
                return Err(Error::Data(format!(
                    "{}: dataset was generated for a different sequence",
                    dir.display()
                )));
            }
            (ds.sequence, ds.benchmark)
        }
        None => {
            let seq = cfg.sequence()?;
            let (_, bench) = generate_benchmark(&seq, &cfg.synth, cfg.seed, exec)?;
            (seq, bench)
        }
    };
    let dir = cfg.out_dir()?;
    if cfg.data.as_deref() == Some(dir) {
        return Err(Error::Config("the run directory must differ from the dataset directory".into()));
    }
    let train = cfg.train_config();
    let ev = run_and_evaluate(&seq, &bench, cfg.method, &train, cfg.undefined_iou, exec)?;

    create_dir(&dir.join("checkpoints"))?;
    write_file(&dir.join("config.json"), &json_bytes(cfg)?)?;
    let mut checkpoints = Vec::with_capacity(ev.run.checkpoints.len());
    for (t, (params, space)) in ev.run.checkpoints.iter().zip(&ev.run.label_spaces).enumerate() {
        let ckpt = Checkpoint {
            params: params.clone(),
            label_names: seq.ontology().names(space.iter().copied()),
        };
        let file = format!("checkpoints/task_{t}.ckpt");
        let bytes = ckpt.to_bytes();
        write_checkpoint(&dir.join(&file), &ckpt)?;
        checkpoints.push(CheckpointSummary {
            task: t,
            file,
            sha256: sha256_hex(&bytes),
            miou: ev.checkpoint_miou[t],
            final_loss: ev.run.traces[t].losses.last().copied(),
        });
    }

    let mut report = Vec::new();
    write_report_csv(&mut report, &ev.report)?;
    write_file(&dir.join("report.csv"), &report)?;
    let mut taskwise = Vec::new();
    write_taskwise_csv(&mut taskwise, &[(cfg.method.to_string(), ev.taskwise.clone())])?;
    write_file(&dir.join("taskwise.csv"), &taskwise)?;

    let lambda = if cfg.method.distill_mode().is_some() {
        train.lambda
    } else {
        0.0
    };
    let summary = Summary {
        method: cfg.method,
        sequence: sequence_name(cfg, &seq),
        seed: cfg.seed,
        lambda,
        unsplit: ev.report.unsplit,
        split: ev.report.split,
        retained: ev.report.retained,
        all: ev.report.all,
        taskwise: ev.taskwise.tasks.clone(),
        checkpoints,
    };
    write_file(&dir.join("summary.json"), &json_bytes(&summary)?)?;
    Ok(summary)
}

pub fn read_summary(run_dir: &Path) -> Result<Summary> {
    let path = run_dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("summary", format!("{}: {e}", path.display())))
}

/// Merges run summaries into `method,Unsplit,Split,Retained,All`, one row
/// per run in the given order.
pub fn cmd_report(run_dirs: &[PathBuf], w: impl Write) -> Result<()> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let summaries = run_dirs.iter().map(|d| read_summary(d)).collect::<Result<Vec<_>>>()?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "Unsplit", "Split", "Retained", "All"])?;
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for s in &summaries {
        out.write_record([
            s.method.to_string(),
            cell(s.unsplit),
            cell(s.split),
            cell(s.retained),
            cell(s.all),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
