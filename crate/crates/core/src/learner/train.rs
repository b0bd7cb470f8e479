use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{backward, expand_head, forward, init_model, Distill, HeadInit, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{softmax_into, DistillMode, DistillationSpec};
use crate::ontology::{ClassId, TaskSequence};
use crate::par::Execution;
use crate::rng::{derive_seed, Xoshiro256StarStar};

/// Seed domains below the run seed.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_first: f64,
    pub lr_later: f64,
    pub epochs: usize,
    pub batch_pixels: usize,
    pub lambda: f64,
    pub momentum: f64,
    pub seed: u64,
    pub head_init: HeadInit,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_first: 0.01,
            lr_later: 0.001,
            epochs: 30,
            batch_pixels: 4,
            lambda: 1.0,
            momentum: 0.0,
            seed: 0,
            head_init: HeadInit::CopyParent,
            hidden: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lr_first > 0.0 && self.lr_later > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_pixels == 0 {
            return bad("batch_pixels must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        Ok(())
    }

    pub fn lr_for(&self, t: usize) -> f64 {
        if t == 0 {
            self.lr_first
        } else {
            self.lr_later
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    Joint,
    KdStandard,
    Mib,
    Moon,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Finetune,
        Method::Joint,
        Method::KdStandard,
        Method::Mib,
        Method::Moon,
    ];

    pub fn distill_mode(self) -> Option<DistillMode> {
        match self {
            Method::Finetune | Method::Joint => None,
            Method::KdStandard => Some(DistillMode::Standard),
            Method::Mib => Some(DistillMode::Mib),
            Method::Moon => Some(DistillMode::Moon),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Joint => "joint",
            Method::KdStandard => "kd_standard",
            Method::Mib => "mib",
            Method::Moon => "moon",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}` (expected finetune, joint, kd_standard, mib or moon)"
                ))
            })
    }
}

/// Pixels with row-major features and one class label each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelSet {
    pub d_in: usize,
    pub features: Vec<f64>,
    pub labels: Vec<ClassId>,
}

impl PixelSet {
    pub fn new(d_in: usize, features: Vec<f64>, labels: Vec<ClassId>) -> Result<Self> {
        if features.len() != d_in * labels.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} features for {} pixels", d_in * labels.len(), labels.len()),
                got: features.len().to_string(),
            });
        }
        Ok(Self {
            d_in,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn extend(&mut self, other: &PixelSet) -> Result<()> {
        if !self.is_empty() && self.d_in != other.d_in {
            return Err(Error::DimensionMismatch {
                expected: format!("d_in = {}", self.d_in),
                got: other.d_in.to_string(),
            });
        }
        self.d_in = other.d_in;
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }
}

/// Frozen copy of the model that finished the previous task.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSnapshot {
    params: ModelParams,
    label_space: Vec<ClassId>,
}

impl TeacherSnapshot {
    pub fn new(params: &ModelParams, label_space: &[ClassId]) -> Self {
        Self {
            params: params.clone(),
            label_space: label_space.to_vec(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn label_space(&self) -> &[ClassId] {
        &self.label_space
    }
}

/// Row-major teacher softmax outputs for every pixel of `x`.
pub fn teacher_probs(teacher: &TeacherSnapshot, x: &[f64], exec: Execution) -> Result<Vec<f64>> {
    let mut z = forward(&teacher.params, x, exec)?;
    let c = teacher.params.classes();
    let mut row = vec![0.0; c];
    for chunk in z.chunks_exact_mut(c) {
        softmax_into(chunk, &mut row);
        chunk.copy_from_slice(&row);
    }
    Ok(z)
}

/// Learning rate and per-epoch mean objective of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task: usize,
    pub lr: f64,
    pub losses: Vec<f64>,
}

fn label_indices(seq: &TaskSequence, space: &[ClassId], labels: &[ClassId], task: usize) -> Result<Vec<usize>> {
    let mut index = vec![None; seq.ontology().len()];
    for (k, c) in space.iter().enumerate() {
        index[c.index()] = Some(k);
    }
    labels
        .iter()
        .map(|&c| {
            index
                .get(c.index())
                .copied()
                .flatten()
                .ok_or_else(|| Error::Data(format!("task {task}: label {c} is outside the task label space")))
        })
        .collect()
}

/// Minibatch SGD over shuffled pixels.
#[allow(clippy::too_many_arguments)]
fn fit(
    mut m: ModelParams,
    x: &[f64],
    labels: &[usize],
    distill: Option<(&[f64], &DistillationSpec)>,
    lambda: f64,
    lr: f64,
    cfg: &TrainConfig,
    task: usize,
    exec: Execution,
) -> Result<(ModelParams, TaskTrace)> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyDataset(task));
    }
    let d = m.d_in();
    let tl = distill.map_or(0, |(_, s)| s.teacher_len());
    let mut rng = Xoshiro256StarStar::seed_from_u64(derive_seed(derive_seed(cfg.seed, SHUFFLE_STREAM), task as u64));
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = (cfg.momentum > 0.0).then(|| ModelParams::zeros(d, m.hidden(), m.classes()));
    let bs = cfg.batch_pixels.min(n);
    let mut xb = Vec::with_capacity(bs * d);
    let mut yb = Vec::with_capacity(bs);
    let mut qb = Vec::with_capacity(bs * tl);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(bs) {
            xb.clear();
            yb.clear();
            qb.clear();
            for &i in batch {
                xb.extend_from_slice(&x[i * d..(i + 1) * d]);
                yb.push(labels[i]);
                if let Some((probs, _)) = distill {
                    qb.extend_from_slice(&probs[i * tl..(i + 1) * tl]);
                }
            }
            let dist = distill.map(|(_, spec)| Distill {
                probs: &qb,
                spec,
                lambda,
            });
            let (loss, g) = backward(&m, &xb, &yb, dist, exec)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { task, epoch });
            }
            total += loss * batch.len() as f64;
            match velocity.as_mut() {
                Some(v) => {
                    for (vi, gi) in v.iter_mut().zip(g.iter()) {
                        *vi = cfg.momentum * *vi + gi;
                    }
                    for (p, vi) in m.iter_mut().zip(v.iter()) {
                        *p -= lr * vi;
                    }
                }
                None => {
                    for (p, gi) in m.iter_mut().zip(g.iter()) {
                        *p -= lr * gi;
                    }
                }
            }
        }
        let mean = total / n as f64;
        if !mean.is_finite() || !m.is_finite() {
            return Err(Error::NonFinite { task, epoch });
        }
        losses.push(mean);
    }
    Ok((m, TaskTrace { task, lr, losses }))
}

/// Trains `m` (already covering `label_space_at(t)`) on the task-`t` pixels.
///
/// Labels must lie in `C_t ∪ {bg}`. With a teacher, the objective adds
/// `cfg.lambda` times the distillation loss under `spec`.
pub fn train_task(
    m: ModelParams,
    seq: &TaskSequence,
    t: usize,
    data: &PixelSet,
    teacher: Option<(&TeacherSnapshot, &DistillationSpec)>,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(ModelParams, TaskTrace)> {
    cfg.validate()?;
    let space = seq.label_space_at(t)?;
    if m.classes() != space.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("head of {} classes for task {t}", space.len()),
            got: m.classes().to_string(),
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset(t));
    }
    if data.d_in != m.d_in() {
        return Err(Error::DimensionMismatch {
            expected: format!("d_in = {}", m.d_in()),
            got: data.d_in.to_string(),
        });
    }
    let current = &seq.task(t)?.introduced;
    if let Some(c) = data.labels.iter().find(|c| !c.is_background() && !current.contains(c)) {
        return Err(Error::Data(format!(
            "task {t}: label `{}` is not introduced at this task",
            seq.ontology().name(*c)
        )));
    }
    let labels = label_indices(seq, &space, &data.labels, t)?;
    let probs;
    let distill = match teacher {
        Some((snap, spec)) if cfg.lambda > 0.0 => {
            if spec.teacher_space() != snap.label_space() || spec.student_space() != space {
                return Err(Error::Config(format!(
                    "task {t}: distillation spec does not match the teacher and student label spaces"
                )));
            }
            probs = teacher_probs(snap, &data.features, exec)?;
            Some((probs.as_slice(), spec))
        }
        _ => None,
    };
    fit(m, &data.features, &labels, distill, cfg.lambda, cfg.lr_for(t), cfg, t, exec)
}

/// Final model, one checkpoint per training step, and their traces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub method: Method,
    pub checkpoints: Vec<ModelParams>,
    pub label_spaces: Vec<Vec<ClassId>>,
    pub traces: Vec<TaskTrace>,
}

impl RunOutput {
    pub fn final_model(&self) -> &ModelParams {
        self.checkpoints.last().expect("runs produce at least one checkpoint")
    }

    pub fn final_label_space(&self) -> &[ClassId] {
        self.label_spaces.last().expect("runs produce at least one checkpoint")
    }
}

/// Runs `method` over the sequence.
///
/// `data[t]` holds the task-`t` pixels labelled by `project_ground_truth(t)`
/// for the continual methods. `joint` concatenates every dataset, whose
/// labels must then follow `final_eval_map`, and trains once on the final
/// label space.
pub fn run_sequence(
    seq: &TaskSequence,
    data: &[PixelSet],
    method: Method,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<RunOutput> {
    cfg.validate()?;
    if data.len() != seq.num_tasks() {
        return Err(Error::Data(format!(
            "expected {} task datasets, got {}",
            seq.num_tasks(),
            data.len()
        )));
    }
    let d_in = data[0].d_in;
    if let Some((t, _)) = data.iter().enumerate().find(|(_, d)| d.d_in != d_in) {
        return Err(Error::Data(format!("task {t}: feature dimension differs from task 0")));
    }
    let init_seed = derive_seed(cfg.seed, INIT_STREAM);

    if method == Method::Joint {
        let n = seq.last_task();
        let space = seq.label_space_at(n)?;
        let mut all = PixelSet::default();
        for d in data {
            all.extend(d)?;
        }
        let labels = label_indices(seq, &space, &all.labels, n)?;
        let m = init_model(d_in, cfg.hidden, space.len(), init_seed)?;
        let (m, trace) = fit(m, &all.features, &labels, None, 0.0, cfg.lr_first, cfg, 0, exec)?;
        return Ok(RunOutput {
            method,
            checkpoints: vec![m],
            label_spaces: vec![space],
            traces: vec![trace],
        });
    }

    let mut out = RunOutput {
        method,
        checkpoints: Vec::with_capacity(seq.num_tasks()),
        label_spaces: Vec::with_capacity(seq.num_tasks()),
        traces: Vec::with_capacity(seq.num_tasks()),
    };
    let space0 = seq.label_space_at(0)?;
    let mut m = init_model(d_in, cfg.hidden, space0.len(), init_seed)?;
    let mut cfg = cfg.clone();
    if method == Method::Finetune {
        cfg.lambda = 0.0;
    }
    for (t, task_data) in data.iter().enumerate() {
        let space = seq.label_space_at(t)?;
        let (trained, trace) = if t == 0 {
            train_task(m, seq, 0, task_data, None, &cfg, exec)?
        } else {
            let prev = &out.label_spaces[t - 1];
            let snapshot = TeacherSnapshot::new(&m, prev);
            let task = seq.task(t)?;
            let head_seed = derive_seed(derive_seed(cfg.seed, HEAD_STREAM), t as u64);
            let expanded = expand_head(&m, prev, &task.introduced, &task.splits, cfg.head_init, head_seed)?;
            match method.distill_mode() {
                Some(mode) if cfg.lambda > 0.0 => {
                    let spec = DistillationSpec::build(seq, t, mode)?;
                    train_task(expanded, seq, t, task_data, Some((&snapshot, &spec)), &cfg, exec)?
                }
                _ => train_task(expanded, seq, t, task_data, None, &cfg, exec)?,
            }
        };
        m = trained.clone();
        out.checkpoints.push(trained);
        out.label_spaces.push(space);
        out.traces.push(trace);
    }
    Ok(out)
}
