//! Confusion matrices, per-class IoU and class-group reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{ClassGroup, ClassGroupAssignment, ClassId, LabelGrid, Ontology, TaskSequence};
use crate::par::{self, Execution};

/// Pixel counts indexed by `(truth, prediction)` over an evaluation space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    space: Vec<ClassId>,
    index: Vec<Option<usize>>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(space: &[ClassId]) -> Self {
        let len = space.iter().map(|c| c.index() + 1).max().unwrap_or(0);
        let mut index = vec![None; len];
        for (k, c) in space.iter().enumerate() {
            index[c.index()] = Some(k);
        }
        Self {
            space: space.to_vec(),
            index,
            counts: vec![0; space.len() * space.len()],
        }
    }

    pub fn space(&self) -> &[ClassId] {
        &self.space
    }

    fn slot(&self, c: ClassId) -> Result<usize> {
        self.index
            .get(c.index())
            .copied()
            .flatten()
            .ok_or(Error::UnknownClassId(c.0))
    }

    pub fn get(&self, truth: ClassId, pred: ClassId) -> Result<u64> {
        Ok(self.counts[self.slot(truth)? * self.space.len() + self.slot(pred)?])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel pair.
    pub fn add_labels(&mut self, pred: &[ClassId], truth: &[ClassId]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} predictions", truth.len()),
                got: pred.len().to_string(),
            });
        }
        let n = self.space.len();
        for (&p, &g) in pred.iter().zip(truth) {
            let cell = self.slot(g)? * n + self.slot(p)?;
            self.counts[cell] += 1;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &LabelGrid, truth: &LabelGrid) -> Result<()> {
        truth.ensure_same_shape(pred)?;
        self.add_labels(pred.labels(), truth.labels())
    }

    /// Matrix of many pixels, counted in independent chunks and summed.
    pub fn from_labels(space: &[ClassId], pred: &[ClassId], truth: &[ClassId], exec: Execution) -> Result<Self> {
        const CHUNK: usize = 4096;
        if pred.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} predictions", truth.len()),
                got: pred.len().to_string(),
            });
        }
        let merged = par::chunked_reduce(
            pred.len(),
            CHUNK,
            exec,
            |r| {
                let mut cm = Self::new(space);
                cm.add_labels(&pred[r.clone()], &truth[r])?;
                Ok(cm)
            },
            |a: Result<Self>, b: Result<Self>| {
                let mut a = a?;
                a.merge(&b?)?;
                Ok(a)
            },
        );
        merged.unwrap_or_else(|| Ok(Self::new(space)))
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.space != other.space {
            return Err(Error::DimensionMismatch {
                expected: format!("{} class space", self.space.len()),
                got: format!("{} class space", other.space.len()),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(TP, TP + FP + FN)` of class `c`.
    pub fn iou_counts(&self, c: ClassId) -> Result<(u64, u64)> {
        let k = self.slot(c)?;
        let n = self.space.len();
        let tp = self.counts[k * n + k];
        let row: u64 = self.counts[k * n..(k + 1) * n].iter().sum();
        let col: u64 = (0..n).map(|g| self.counts[g * n + k]).sum();
        Ok((tp, row + col - tp))
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both
    /// truth and prediction.
    pub fn iou(&self, c: ClassId) -> Result<Option<f64>> {
        let (tp, denom) = self.iou_counts(c)?;
        Ok((denom > 0).then(|| tp as f64 / denom as f64))
    }
}

/// How classes with an undefined IoU enter the means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedIou {
    #[default]
    Exclude,
    Zero,
}

/// Unweighted mean; `None` when nothing is defined.
pub fn mean_iou(values: impl IntoIterator<Item = Option<f64>>, policy: UndefinedIou) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        match (v, policy) {
            (Some(v), _) => {
                sum += v;
                n += 1;
            }
            (None, UndefinedIou::Zero) => n += 1,
            (None, UndefinedIou::Exclude) => {}
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: ClassId,
    pub name: String,
    pub group: ClassGroup,
    pub iou: Option<f64>,
}

/// Per-class IoU of the scored classes and the group means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub classes: Vec<ClassScore>,
    pub unsplit: Option<f64>,
    pub split: Option<f64>,
    pub retained: Option<f64>,
    pub all: Option<f64>,
}

/// Group means over the scored (non-background) classes. Retained parents
/// are scored under their own label.
pub fn group_report(
    cm: &ConfusionMatrix,
    onto: &Ontology,
    groups: &ClassGroupAssignment,
    policy: UndefinedIou,
) -> Result<GroupReport> {
    let mut classes = Vec::new();
    for &c in cm.space() {
        if c.is_background() {
            continue;
        }
        if let Some(group) = groups.group_of(c) {
            classes.push(ClassScore {
                class: c,
                name: onto.name(c).to_string(),
                group,
                iou: cm.iou(c)?,
            });
        }
    }
    let of = |g: Option<ClassGroup>| {
        mean_iou(
            classes.iter().filter(|s| g.is_none_or(|g| s.group == g)).map(|s| s.iou),
            policy,
        )
    };
    Ok(GroupReport {
        unsplit: of(Some(ClassGroup::Unsplit)),
        split: of(Some(ClassGroup::Split)),
        retained: of(Some(ClassGroup::Retained)),
        all: of(None),
        classes,
    })
}

/// Mean IoU per introducing task, plus the overall mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskwiseReport {
    pub tasks: Vec<Option<f64>>,
    pub all: Option<f64>,
}

/// Column `t` averages the scored classes introduced at task `t`; retained
/// parents count towards the task that introduced them.
pub fn taskwise_report(report: &GroupReport, seq: &TaskSequence, policy: UndefinedIou) -> TaskwiseReport {
    let tasks = (0..seq.num_tasks())
        .map(|t| {
            mean_iou(
                report
                    .classes
                    .iter()
                    .filter(|s| seq.introduced_at(s.class) == Some(t))
                    .map(|s| s.iou),
                policy,
            )
        })
        .collect();
    TaskwiseReport {
        tasks,
        all: report.all,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// `class,group,iou` rows, then one footer row per group mean.
pub fn write_report_csv<W: Write>(w: W, report: &GroupReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "group", "iou"])?;
    for s in &report.classes {
        out.write_record([s.name.clone(), s.group.to_string(), fmt_opt(s.iou)])?;
    }
    for (name, v) in [
        ("unsplit", report.unsplit),
        ("split", report.split),
        ("retained", report.retained),
        ("all", report.all),
    ] {
        out.write_record(["mean".to_string(), name.to_string(), fmt_opt(v)])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// One row per labelled report: `method,Task 0,...,Task n,All`.
pub fn write_taskwise_csv<W: Write>(w: W, rows: &[(String, TaskwiseReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let width = rows.first().map_or(0, |r| r.1.tasks.len());
    let mut header = vec!["method".to_string()];
    header.extend((0..width).map(|t| format!("Task {t}")));
    header.push("All".into());
    out.write_record(&header)?;
    for (name, r) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(r.tasks.iter().map(|v| fmt_opt(*v)));
        rec.push(fmt_opt(r.all));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Per-class IoU keyed by class name.
pub fn classwise(report: &GroupReport) -> BTreeMap<String, Option<f64>> {
    report.classes.iter().map(|s| (s.name.clone(), s.iou)).collect()
}
