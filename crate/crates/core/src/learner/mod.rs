//! One-hidden-layer tanh pixel classifier with an expandable head, exact
//! gradients of the composite objective, SGD training and the continual
//! training loop.

mod checkpoint;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use train::{
    run_sequence, teacher_probs, train_task, Method, PixelSet, RunOutput, TaskTrace, TeacherSnapshot,
    TrainConfig,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{pixel_objective, DistillationSpec, Teacher, Workspace};
use crate::ontology::{ClassId, SplitSpec};
use crate::par::{self, Execution, CHUNK};
use crate::rng::Xoshiro256StarStar;

/// Parameters of `x -> W2^T tanh(W1^T x + b1) + b2`.
///
/// `w1` is `d_in x hidden` and `w2` is `hidden x classes`, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    d_in: usize,
    hidden: usize,
    classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn glorot(rng: &mut Xoshiro256StarStar, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.uniform(-limit, limit)).collect()
}

impl ModelParams {
    pub fn zeros(d_in: usize, hidden: usize, classes: usize) -> Self {
        Self {
            d_in,
            hidden,
            classes,
            w1: vec![0.0; d_in * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * classes],
            b2: vec![0.0; classes],
        }
    }

    pub fn from_parts(
        d_in: usize,
        hidden: usize,
        classes: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let shapes = [
            ("hidden weights", w1.len(), d_in * hidden),
            ("hidden bias", b1.len(), hidden),
            ("head weights", w2.len(), hidden * classes),
            ("head bias", b2.len(), classes),
        ];
        for (what, got, expected) in shapes {
            if got != expected {
                return Err(Error::DimensionMismatch {
                    expected: format!("{expected} {what}"),
                    got: got.to_string(),
                });
            }
        }
        Ok(Self {
            d_in,
            hidden,
            classes,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters in storage order: `w1, b1, w2, b2`.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    /// Head column of class index `c`.
    pub fn head_column(&self, c: usize) -> Vec<f64> {
        (0..self.hidden).map(|j| self.w2[j * self.classes + c]).collect()
    }
}

/// Glorot-uniform weights drawn in storage order, zero biases.
pub fn init_model(d_in: usize, hidden: usize, classes: usize, seed: u64) -> Result<ModelParams> {
    if d_in == 0 || hidden == 0 || classes == 0 {
        return Err(Error::DegenerateArchitecture(format!(
            "d_in={d_in}, hidden={hidden}, classes={classes}; all must be positive"
        )));
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let w1 = glorot(&mut rng, d_in, hidden, d_in * hidden);
    let w2 = glorot(&mut rng, hidden, classes, hidden * classes);
    ModelParams::from_parts(d_in, hidden, classes, w1, vec![0.0; hidden], w2, vec![0.0; classes])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    #[default]
    CopyParent,
    Zero,
    Random,
}

impl fmt::Display for HeadInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadInit::CopyParent => "copy_parent",
            HeadInit::Zero => "zero",
            HeadInit::Random => "random",
        })
    }
}

impl FromStr for HeadInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy_parent" => Ok(HeadInit::CopyParent),
            "zero" => Ok(HeadInit::Zero),
            "random" => Ok(HeadInit::Random),
            other => Err(Error::Config(format!(
                "unknown head init `{other}` (expected copy_parent, zero or random)"
            ))),
        }
    }
}

/// Appends one head column per class of `new_classes`.
///
/// `old_space` is the label space the head currently covers. In
/// `CopyParent` mode every child of a split copies its parent's column, and
/// the parent and each of its `k` children get bias `b_parent - ln(k + 1)`,
/// so the summed probability of the group is unchanged.
pub fn expand_head(
    m: &ModelParams,
    old_space: &[ClassId],
    new_classes: &[ClassId],
    splits: &[SplitSpec],
    init: HeadInit,
    seed: u64,
) -> Result<ModelParams> {
    if old_space.len() != m.classes {
        return Err(Error::DimensionMismatch {
            expected: format!("label space of {} classes", m.classes),
            got: old_space.len().to_string(),
        });
    }
    let old = m.classes;
    let classes = old + new_classes.len();
    let h = m.hidden;
    let mut w2 = vec![0.0; h * classes];
    for j in 0..h {
        w2[j * classes..j * classes + old].copy_from_slice(&m.w2[j * old..(j + 1) * old]);
    }
    let mut b2 = m.b2.clone();
    b2.resize(classes, 0.0);
    match init {
        HeadInit::Zero => {}
        HeadInit::Random => {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let limit = (6.0 / (h + classes) as f64).sqrt();
            for j in 0..h {
                for c in old..classes {
                    w2[j * classes + c] = rng.uniform(-limit, limit);
                }
            }
        }
        HeadInit::CopyParent => {
            let position = |c: ClassId, space: &[ClassId]| space.iter().position(|&x| x == c);
            for c in new_classes {
                if !splits.iter().any(|s| s.children.contains(c)) {
                    return Err(Error::Config(format!("new class {c} belongs to no split")));
                }
            }
            for split in splits {
                let p = position(split.parent, old_space).ok_or(Error::UnknownClassId(split.parent.0))?;
                let shift = ((split.children.len() + 1) as f64).ln();
                let bias = m.b2[p] - shift;
                b2[p] = bias;
                for child in &split.children {
                    let k = old
                        + position(*child, new_classes).ok_or(Error::UnknownClassId(child.0))?;
                    for j in 0..h {
                        w2[j * classes + k] = m.w2[j * old + p];
                    }
                    b2[k] = bias;
                }
            }
        }
    }
    ModelParams::from_parts(m.d_in, h, classes, m.w1.clone(), m.b1.clone(), w2, b2)
}

fn check_features(m: &ModelParams, x: &[f64]) -> Result<usize> {
    if !x.len().is_multiple_of(m.d_in) {
        return Err(Error::DimensionMismatch {
            expected: format!("a multiple of d_in = {} features", m.d_in),
            got: x.len().to_string(),
        });
    }
    Ok(x.len() / m.d_in)
}

#[inline]
fn hidden_into(m: &ModelParams, x: &[f64], h: &mut [f64]) {
    h.copy_from_slice(&m.b1);
    for (i, &xi) in x.iter().enumerate() {
        let row = &m.w1[i * m.hidden..(i + 1) * m.hidden];
        for (hj, &w) in h.iter_mut().zip(row) {
            *hj += xi * w;
        }
    }
    for hj in h.iter_mut() {
        *hj = hj.tanh();
    }
}

#[inline]
fn logits_into(m: &ModelParams, h: &[f64], z: &mut [f64]) {
    z.copy_from_slice(&m.b2);
    for (j, &hj) in h.iter().enumerate() {
        let row = &m.w2[j * m.classes..(j + 1) * m.classes];
        for (zc, &w) in z.iter_mut().zip(row) {
            *zc += hj * w;
        }
    }
}

/// Row-major logits (`n x classes`) of `n` pixels given row-major features.
pub fn forward(m: &ModelParams, x: &[f64], exec: Execution) -> Result<Vec<f64>> {
    let n = check_features(m, x)?;
    let chunks = par::map_indexed(n.div_ceil(CHUNK), exec, |ci| {
        let lo = ci * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let mut h = vec![0.0; m.hidden];
        let mut out = vec![0.0; (hi - lo) * m.classes];
        for (i, z) in (lo..hi).zip(out.chunks_exact_mut(m.classes)) {
            hidden_into(m, &x[i * m.d_in..(i + 1) * m.d_in], &mut h);
            logits_into(m, &h, z);
        }
        out
    });
    Ok(chunks.concat())
}

/// Index of the largest logit per pixel; ties go to the lowest index.
pub fn predict(m: &ModelParams, x: &[f64], exec: Execution) -> Result<Vec<usize>> {
    let z = forward(m, x, exec)?;
    Ok(z.chunks_exact(m.classes.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect())
}

/// Distillation inputs for [`backward`]: per-pixel teacher probabilities
/// (row-major over the teacher label space) and the grouping.
#[derive(Clone, Copy, Debug)]
pub struct Distill<'a> {
    pub probs: &'a [f64],
    pub spec: &'a DistillationSpec,
    pub lambda: f64,
}

/// Mean objective over the pixels and its exact parameter gradient.
///
/// `labels` index the model's label space. Pixels are processed in fixed
/// chunks and merged pairwise, so the result does not depend on `exec`.
pub fn backward(
    m: &ModelParams,
    x: &[f64],
    labels: &[usize],
    distill: Option<Distill<'_>>,
    exec: Execution,
) -> Result<(f64, ModelParams)> {
    let n = check_features(m, x)?;
    if n != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} labels"),
            got: labels.len().to_string(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if let Some(d) = distill {
        if d.spec.student_len() != m.classes || d.probs.len() != n * d.spec.teacher_len() {
            return Err(Error::DimensionMismatch {
                expected: format!(
                    "{} student classes and {} teacher probabilities",
                    m.classes,
                    n * d.spec.teacher_len()
                ),
                got: format!("{} and {}", d.spec.student_len(), d.probs.len()),
            });
        }
    }
    let scale = 1.0 / n as f64;
    let (d_in, hn, cn) = (m.d_in, m.hidden, m.classes);
    let reduced = par::chunked_reduce(
        n,
        CHUNK,
        exec,
        |range| -> Result<(f64, ModelParams)> {
            let mut g = ModelParams::zeros(d_in, hn, cn);
            let mut ws = Workspace::new();
            let mut h = vec![0.0; hn];
            let mut z = vec![0.0; cn];
            let mut dz = vec![0.0; cn];
            let mut da = vec![0.0; hn];
            let mut loss = 0.0;
            for i in range {
                let xi = &x[i * d_in..(i + 1) * d_in];
                hidden_into(m, xi, &mut h);
                logits_into(m, &h, &mut z);
                let (teacher, lambda) = match distill {
                    Some(d) => {
                        let tl = d.spec.teacher_len();
                        (
                            Some(Teacher {
                                probs: &d.probs[i * tl..(i + 1) * tl],
                                spec: d.spec,
                            }),
                            d.lambda,
                        )
                    }
                    None => (None, 0.0),
                };
                loss += pixel_objective(&z, labels[i], teacher, lambda, scale, &mut ws, &mut dz)?;
                for (gb, &d) in g.b2.iter_mut().zip(&dz) {
                    *gb += d;
                }
                for j in 0..hn {
                    let row = &m.w2[j * cn..(j + 1) * cn];
                    let grow = &mut g.w2[j * cn..(j + 1) * cn];
                    let mut back = 0.0;
                    for c in 0..cn {
                        grow[c] += h[j] * dz[c];
                        back += row[c] * dz[c];
                    }
                    da[j] = back * (1.0 - h[j] * h[j]);
                }
                for (gb, &d) in g.b1.iter_mut().zip(&da) {
                    *gb += d;
                }
                for (r, &xv) in xi.iter().enumerate() {
                    let grow = &mut g.w1[r * hn..(r + 1) * hn];
                    for (gw, &d) in grow.iter_mut().zip(&da) {
                        *gw += xv * d;
                    }
                }
            }
            Ok((loss, g))
        },
        |a, b| {
            let (la, mut ga) = a?;
            let (lb, gb) = b?;
            ga.add_assign(&gb);
            Ok((la + lb, ga))
        },
    )
    .expect("n > 0 yields at least one chunk")?;
    Ok((reduced.0 * scale, reduced.1))
}
