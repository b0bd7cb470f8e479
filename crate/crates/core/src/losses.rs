//! Softmax, cross-entropy and the three distillation objectives with their
//! closed-form gradients.
//!
//! A [`DistillationSpec`] assigns every student logit to a teacher class (or
//! drops it). The grouped modes (`mib`, `moon`) sum student probabilities
//! within each group; `standard` drops new classes and renormalizes the rest.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{ClassId, TaskSequence};

/// Lower bound applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    Standard,
    Mib,
    Moon,
}

impl DistillMode {
    pub fn is_grouped(self) -> bool {
        !matches!(self, DistillMode::Standard)
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillMode::Standard => "standard",
            DistillMode::Mib => "mib",
            DistillMode::Moon => "moon",
        })
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(DistillMode::Standard),
            "mib" => Ok(DistillMode::Mib),
            "moon" => Ok(DistillMode::Moon),
            other => Err(Error::Config(format!(
                "unknown distillation mode `{other}` (expected standard, mib or moon)"
            ))),
        }
    }
}

/// Mapping from student logits onto the teacher label space.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillationSpec {
    mode: DistillMode,
    teacher_space: Vec<ClassId>,
    student_space: Vec<ClassId>,
    /// Teacher index per student index; `None` marks a dropped class.
    group_of: Vec<Option<usize>>,
}

impl DistillationSpec {
    /// Spec for distilling the task `t - 1` teacher into the task `t` student.
    pub fn build(seq: &TaskSequence, t: usize, mode: DistillMode) -> Result<Self> {
        if t == 0 || t > seq.last_task() {
            return Err(Error::TaskOutOfRange {
                t,
                lo: 1,
                hi: seq.last_task(),
            });
        }
        let teacher_space = seq.label_space_at(t - 1)?;
        let student_space = seq.label_space_at(t)?;
        let old = teacher_space.len();
        let teacher_index = |c: ClassId| teacher_space.iter().position(|&x| x == c);
        let group_of = student_space
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if i < old {
                    return Ok(Some(i));
                }
                match mode {
                    DistillMode::Standard => Ok(None),
                    DistillMode::Mib => Ok(Some(0)),
                    DistillMode::Moon => {
                        let split = seq.tasks()[t]
                            .splits
                            .iter()
                            .find(|s| s.children.contains(&c))
                            .ok_or(Error::UnknownClassId(c.0))?;
                        teacher_index(split.parent)
                            .map(Some)
                            .ok_or(Error::UnknownClassId(split.parent.0))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_groups(mode, teacher_space, student_space, group_of)
    }

    /// Checks that grouped modes assign every student class and that every
    /// teacher class receives at least one student class.
    pub fn from_groups(
        mode: DistillMode,
        teacher_space: Vec<ClassId>,
        student_space: Vec<ClassId>,
        group_of: Vec<Option<usize>>,
    ) -> Result<Self> {
        if group_of.len() != student_space.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} student groups", student_space.len()),
                got: group_of.len().to_string(),
            });
        }
        let mut covered = vec![false; teacher_space.len()];
        for (k, g) in group_of.iter().enumerate() {
            match *g {
                Some(g) if g < teacher_space.len() => covered[g] = true,
                Some(g) => {
                    return Err(Error::DimensionMismatch {
                        expected: format!("teacher index < {}", teacher_space.len()),
                        got: g.to_string(),
                    })
                }
                None if mode.is_grouped() => {
                    return Err(Error::Config(format!(
                        "{mode} distillation must assign student class {} to a teacher class",
                        student_space[k]
                    )))
                }
                None => {}
            }
        }
        if let Some(g) = covered.iter().position(|c| !c) {
            return Err(Error::Config(format!(
                "teacher class {} receives no student class",
                teacher_space[g]
            )));
        }
        Ok(Self {
            mode,
            teacher_space,
            student_space,
            group_of,
        })
    }

    pub fn mode(&self) -> DistillMode {
        self.mode
    }

    pub fn teacher_space(&self) -> &[ClassId] {
        &self.teacher_space
    }

    pub fn student_space(&self) -> &[ClassId] {
        &self.student_space
    }

    pub fn group_of(&self) -> &[Option<usize>] {
        &self.group_of
    }

    pub fn teacher_len(&self) -> usize {
        self.teacher_space.len()
    }

    pub fn student_len(&self) -> usize {
        self.student_space.len()
    }

    fn check_student(&self, n: usize) -> Result<()> {
        if n != self.student_len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} student logits", self.student_len()),
                got: n.to_string(),
            });
        }
        Ok(())
    }

    fn check_teacher(&self, n: usize) -> Result<()> {
        if n != self.teacher_len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} teacher probabilities", self.teacher_len()),
                got: n.to_string(),
            });
        }
        Ok(())
    }
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    debug_assert_eq!(z.len(), out.len());
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    out
}

pub fn cross_entropy(p: &[f64], label: usize) -> f64 {
    -p[label].max(LOG_FLOOR).ln()
}

fn regroup_into(p: &[f64], spec: &DistillationSpec, out: &mut [f64]) -> Result<()> {
    out.fill(0.0);
    for (&pk, g) in p.iter().zip(&spec.group_of) {
        if let Some(g) = *g {
            out[g] += pk;
        }
    }
    if spec.mode == DistillMode::Standard {
        let kept: f64 = out.iter().sum();
        if kept < LOG_FLOOR {
            return Err(Error::DegenerateInput(format!(
                "old-class probability mass {kept:e} is below {LOG_FLOOR:e}"
            )));
        }
        for o in out.iter_mut() {
            *o /= kept;
        }
    }
    Ok(())
}

/// Student probabilities expressed over the teacher label space.
pub fn regroup(p: &[f64], spec: &DistillationSpec) -> Result<Vec<f64>> {
    spec.check_student(p.len())?;
    let mut out = vec![0.0; spec.teacher_len()];
    regroup_into(p, spec, &mut out)?;
    Ok(out)
}

fn kd_loss_of(q: &[f64], p_hat: &[f64]) -> f64 {
    -q.iter()
        .zip(p_hat)
        .map(|(&qc, &pc)| qc * pc.max(LOG_FLOOR).ln())
        .sum::<f64>()
}

/// Distillation loss of one pixel.
pub fn kd_loss(q: &[f64], z: &[f64], spec: &DistillationSpec) -> Result<f64> {
    spec.check_teacher(q.len())?;
    let p_hat = regroup(&softmax(z), spec)?;
    Ok(kd_loss_of(q, &p_hat))
}

/// Scratch buffers reused across pixels.
#[derive(Debug, Default)]
pub struct Workspace {
    p: Vec<f64>,
    p_hat: Vec<f64>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Adds `scale * dL_kd/dz` to `grad` and returns the loss. `p` is
/// `softmax(z)`.
///
/// The gradient is that of the unfloored loss; it coincides with the
/// floored one wherever every grouped probability is at least the floor and
/// stays bounded by `q` elsewhere.
fn kd_accumulate(
    q: &[f64],
    p: &[f64],
    spec: &DistillationSpec,
    p_hat: &mut Vec<f64>,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    p_hat.resize(spec.teacher_len(), 0.0);
    regroup_into(p, spec, p_hat)?;
    let loss = kd_loss_of(q, p_hat);
    let active: f64 = q
        .iter()
        .zip(p_hat.iter())
        .filter(|(_, &ph)| ph > 0.0)
        .map(|(&qc, _)| qc)
        .sum();
    match spec.mode {
        DistillMode::Standard => {
            let kept: f64 = p
                .iter()
                .zip(&spec.group_of)
                .filter(|(_, g)| g.is_some())
                .map(|(&pk, _)| pk)
                .sum();
            for (k, g) in spec.group_of.iter().enumerate() {
                if let Some(g) = *g {
                    let ph = p[k] / kept;
                    let own = if p_hat[g] > 0.0 { q[g] } else { 0.0 };
                    grad[k] += scale * (ph * active - own);
                }
            }
        }
        DistillMode::Mib | DistillMode::Moon => {
            for (k, g) in spec.group_of.iter().enumerate() {
                let g = g.expect("grouped specs assign every student class");
                let share = if p_hat[g] > 0.0 { p[k] / p_hat[g] } else { 0.0 };
                grad[k] += scale * (p[k] * active - q[g] * share);
            }
        }
    }
    Ok(loss)
}

/// Gradient of [`kd_loss`] with respect to the student logits.
pub fn kd_grad(q: &[f64], z: &[f64], spec: &DistillationSpec) -> Result<Vec<f64>> {
    spec.check_teacher(q.len())?;
    spec.check_student(z.len())?;
    let p = softmax(z);
    let mut grad = vec![0.0; z.len()];
    let mut p_hat = Vec::new();
    kd_accumulate(q, &p, spec, &mut p_hat, 1.0, &mut grad)?;
    Ok(grad)
}

/// Distillation target of one pixel.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub probs: &'a [f64],
    pub spec: &'a DistillationSpec,
}

/// `CE + lambda * KD` of one pixel. Writes `scale` times the logit gradient
/// into `grad` (overwriting it) and returns the unscaled loss.
pub fn pixel_objective(
    z: &[f64],
    label: usize,
    teacher: Option<Teacher<'_>>,
    lambda: f64,
    scale: f64,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> Result<f64> {
    let c = z.len();
    if label >= c {
        return Err(Error::DimensionMismatch {
            expected: format!("label index < {c}"),
            got: label.to_string(),
        });
    }
    ws.p.resize(c, 0.0);
    softmax_into(z, &mut ws.p);
    let mut loss = cross_entropy(&ws.p, label);
    for (g, &pk) in grad.iter_mut().zip(&ws.p) {
        *g = scale * pk;
    }
    grad[label] -= scale;
    if lambda != 0.0 {
        if let Some(Teacher { probs, spec }) = teacher {
            spec.check_student(c)?;
            spec.check_teacher(probs.len())?;
            loss += lambda * kd_accumulate(probs, &ws.p, spec, &mut ws.p_hat, scale * lambda, grad)?;
        }
    }
    Ok(loss)
}

/// Row-major logits of `n` pixels with their labels and optional teacher
/// probabilities.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub logits: &'a [f64],
    pub labels: &'a [usize],
    pub teacher_probs: Option<&'a [f64]>,
}

/// Mean over pixels of `CE + lambda * KD`, with its gradient with respect to
/// the logits. `task` is reported when distillation lacks a teacher.
pub fn total_loss(
    batch: Batch<'_>,
    lambda: f64,
    spec: Option<&DistillationSpec>,
    task: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = batch.labels.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if !batch.logits.len().is_multiple_of(n) {
        return Err(Error::DimensionMismatch {
            expected: format!("a multiple of {n} logits"),
            got: batch.logits.len().to_string(),
        });
    }
    let c = batch.logits.len() / n;
    let distill = lambda > 0.0 && spec.is_some();
    let teacher = match (distill, batch.teacher_probs, spec) {
        (true, Some(probs), Some(spec)) => {
            if probs.len() != n * spec.teacher_len() {
                return Err(Error::DimensionMismatch {
                    expected: format!("{} teacher probabilities", n * spec.teacher_len()),
                    got: probs.len().to_string(),
                });
            }
            Some((probs, spec))
        }
        (true, None, _) => return Err(Error::MissingTeacher(task)),
        _ => None,
    };
    let scale = 1.0 / n as f64;
    let mut ws = Workspace::new();
    let mut grad = vec![0.0; n * c];
    let mut total = 0.0;
    for i in 0..n {
        let t = teacher.map(|(probs, spec)| {
            let tl = spec.teacher_len();
            Teacher {
                probs: &probs[i * tl..(i + 1) * tl],
                spec,
            }
        });
        total += pixel_objective(
            &batch.logits[i * c..(i + 1) * c],
            batch.labels[i],
            t,
            lambda,
            scale,
            &mut ws,
            &mut grad[i * c..(i + 1) * c],
        )?;
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::Xoshiro256StarStar;

    fn ids(n: u32) -> Vec<ClassId> {
        (0..n).map(ClassId).collect()
    }

    /// teacher [bg, animal, vehicle]; student adds bird, car, horse.
    fn moon_example() -> DistillationSpec {
        DistillationSpec::from_groups(
            DistillMode::Moon,
            ids(3),
            ids(6),
            vec![Some(0), Some(1), Some(2), Some(1), Some(2), Some(0)],
        )
        .unwrap()
    }

    fn three_class(mode: DistillMode) -> DistillationSpec {
        let b = if mode.is_grouped() { Some(0) } else { None };
        DistillationSpec::from_groups(mode, ids(2), ids(3), vec![Some(0), Some(1), b]).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Central differences of a scalar function of the logits.
    fn fd_grad(z: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let eps = 1e-5;
        let mut z = z.to_vec();
        (0..z.len())
            .map(|k| {
                let orig = z[k];
                z[k] = orig + eps;
                let up = f(&z);
                z[k] = orig - eps;
                let down = f(&z);
                z[k] = orig;
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    fn random_probs(rng: &mut Xoshiro256StarStar, n: usize) -> Vec<f64> {
        let z: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
        softmax(&z)
    }

    fn random_spec(rng: &mut Xoshiro256StarStar, mode: DistillMode) -> DistillationSpec {
        let t = 1 + rng.index(12);
        let s = t + 1 + rng.index(32 - t);
        let group_of = (0..s)
            .map(|k| {
                if k < t {
                    Some(k)
                } else {
                    match mode {
                        DistillMode::Standard => None,
                        DistillMode::Mib => Some(0),
                        DistillMode::Moon => Some(rng.index(t)),
                    }
                }
            })
            .collect();
        DistillationSpec::from_groups(mode, ids(t as u32), ids(s as u32), group_of).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert!(close(&softmax(&[0.0, 0.0]), &[0.5, 0.5], 1e-15));
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        assert!(close(&p, &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.5, 0.5], 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(cross_entropy(&[1.0, 0.0], 0), 0.0);
        assert!((cross_entropy(&[0.2, 0.8], 1) - 0.223_143_551_314_209_76).abs() < 1e-15);
        assert!((cross_entropy(&[1.0, 0.0], 1) - 27.631_021_115_928_547).abs() < 1e-9);
    }

    #[test]
    fn regroup_examples() {
        let p = [0.05, 0.15, 0.10, 0.25, 0.30, 0.15];
        assert!(close(&regroup(&p, &moon_example()).unwrap(), &[0.20, 0.40, 0.40], 1e-15));
        let p = [0.2, 0.3, 0.5];
        assert!(close(&regroup(&p, &three_class(DistillMode::Mib)).unwrap(), &[0.7, 0.3], 1e-15));
        assert!(close(&regroup(&p, &three_class(DistillMode::Standard)).unwrap(), &[0.4, 0.6], 1e-15));
    }

    #[test]
    fn standard_regroup_rejects_vanishing_old_mass() {
        let spec = three_class(DistillMode::Standard);
        assert!(matches!(
            regroup(&[0.0, 1e-13, 1.0 - 1e-13], &spec),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn kd_loss_examples() {
        let spec = moon_example();
        let z: Vec<f64> = [0.05f64, 0.15, 0.10, 0.25, 0.30, 0.15].iter().map(|p| p.ln()).collect();
        let q = [0.2, 0.5, 0.3];
        // -(0.2 ln 0.2 + 0.5 ln 0.4 + 0.3 ln 0.4)
        let expected = -(0.2 * 0.2f64.ln() + 0.8 * 0.4f64.ln());
        assert!((expected - 1.054_920_167_986_144).abs() < 1e-14);
        assert!((kd_loss(&q, &z, &spec).unwrap() - expected).abs() < 1e-12);

        let q = [0.2, 0.4, 0.4];
        let entropy = -q.iter().map(|v: &f64| v * v.ln()).sum::<f64>();
        assert!((kd_loss(&q, &z, &spec).unwrap() - entropy).abs() < 1e-12);

        let spec = three_class(DistillMode::Mib);
        assert!(kd_loss(&[1.0, 0.0], &[0.0, -800.0, 0.0], &spec).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kd_grad_matches_finite_differences_on_the_moon_example() {
        let spec = moon_example();
        let z: Vec<f64> = [0.05f64, 0.15, 0.10, 0.25, 0.30, 0.15].iter().map(|p| p.ln()).collect();
        let q = [0.2, 0.5, 0.3];
        let g = kd_grad(&q, &z, &spec).unwrap();
        let fd = fd_grad(&z, |z| kd_loss(&q, z, &spec).unwrap());
        for (a, b) in g.iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-5, "{g:?} vs {fd:?}");
        }
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn kd_grad_vanishes_at_the_optimum() {
        let spec = three_class(DistillMode::Moon);
        let g = kd_grad(&[0.0, 1.0], &[-900.0, 0.0, -900.0], &spec).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn grouped_gradient_matches_the_closed_form() {
        // dL/dz_k = p_k (1 - q_g(k) / phat_g(k)) when q sums to one.
        let spec = moon_example();
        let z = [0.3, -1.0, 0.7, 0.2, -0.4, 1.1];
        let q = [0.1, 0.6, 0.3];
        let p = softmax(&z);
        let ph = regroup(&p, &spec).unwrap();
        let g = kd_grad(&q, &z, &spec).unwrap();
        for (k, gk) in g.iter().enumerate() {
            let grp = spec.group_of()[k].unwrap();
            assert!((gk - p[k] * (1.0 - q[grp] / ph[grp])).abs() < 1e-14);
        }
    }

    #[test]
    fn standard_gradient_ignores_new_logits() {
        let spec = three_class(DistillMode::Standard);
        let z = [0.1, 0.4, 2.0];
        let g = kd_grad(&[0.3, 0.7], &z, &spec).unwrap();
        assert_eq!(g[2], 0.0);
        let fd = fd_grad(&z, |z| kd_loss(&[0.3, 0.7], z, &spec).unwrap());
        assert!(close(&g, &fd, 1e-9));
    }

    #[test]
    fn build_from_a_sequence() {
        let seq = crate::ontology::presets::preset("cs_ex2").unwrap();
        let o = seq.ontology();
        let moon = DistillationSpec::build(&seq, 6, DistillMode::Moon).unwrap();
        let mib = DistillationSpec::build(&seq, 6, DistillMode::Mib).unwrap();
        let std = DistillationSpec::build(&seq, 6, DistillMode::Standard).unwrap();
        let vehicle = moon
            .teacher_space()
            .iter()
            .position(|&c| c == o.id("vehicle").unwrap())
            .unwrap();
        let old = moon.teacher_len();
        assert_eq!(moon.student_len(), old + 5);
        assert!(moon.group_of()[old..].iter().all(|g| *g == Some(vehicle)));
        assert!(mib.group_of()[old..].iter().all(|g| *g == Some(0)));
        assert!(std.group_of()[old..].iter().all(|g| g.is_none()));
        assert!(DistillationSpec::build(&seq, 0, DistillMode::Moon).is_err());
    }

    #[test]
    fn from_groups_rejects_uncovered_teacher_classes() {
        assert!(DistillationSpec::from_groups(DistillMode::Moon, ids(2), ids(2), vec![Some(0), Some(0)]).is_err());
        assert!(DistillationSpec::from_groups(DistillMode::Mib, ids(2), ids(3), vec![Some(0), Some(1), None]).is_err());
        assert!(DistillationSpec::from_groups(DistillMode::Moon, ids(2), ids(2), vec![Some(0), Some(5)]).is_err());
    }

    #[test]
    fn total_loss_contracts() {
        let spec = three_class(DistillMode::Mib);
        let logits = [0.2, -0.1, 0.5, 1.0, 0.0, -1.0];
        let labels = [2, 0];
        let teacher = [0.6, 0.4, 0.9, 0.1];
        let b = Batch {
            logits: &logits,
            labels: &labels,
            teacher_probs: Some(&teacher),
        };
        let (l0, _) = total_loss(b, 0.0, Some(&spec), 1).unwrap();
        let ce = (cross_entropy(&softmax(&logits[..3]), 2) + cross_entropy(&softmax(&logits[3..]), 0)) / 2.0;
        assert!((l0 - ce).abs() < 1e-15);

        let empty = Batch {
            logits: &[],
            labels: &[],
            teacher_probs: None,
        };
        assert!(matches!(total_loss(empty, 1.0, Some(&spec), 1), Err(Error::EmptyBatch)));
        let no_teacher = Batch {
            teacher_probs: None,
            ..b
        };
        assert!(matches!(
            total_loss(no_teacher, 1.0, Some(&spec), 3),
            Err(Error::MissingTeacher(3))
        ));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(7);
        for mode in [DistillMode::Standard, DistillMode::Mib, DistillMode::Moon] {
            for _ in 0..20 {
                let group_of = (0..6)
                    .map(|k| match (k < 3, mode) {
                        (true, _) => Some(k),
                        (false, DistillMode::Standard) => None,
                        (false, DistillMode::Mib) => Some(0),
                        (false, DistillMode::Moon) => Some(rng.index(3)),
                    })
                    .collect();
                let spec = DistillationSpec::from_groups(mode, ids(3), ids(6), group_of).unwrap();
                let n = 1 + rng.index(5);
                let logits: Vec<f64> = (0..n * 6).map(|_| rng.uniform(-2.0, 2.0)).collect();
                let labels: Vec<usize> = (0..n).map(|_| rng.index(6)).collect();
                let teacher: Vec<f64> = (0..n).flat_map(|_| random_probs(&mut rng, 3)).collect();
                let lambda = rng.uniform(0.0, 2.0);
                let f = |z: &[f64]| {
                    let b = Batch {
                        logits: z,
                        labels: &labels,
                        teacher_probs: Some(&teacher),
                    };
                    total_loss(b, lambda, Some(&spec), 1).unwrap().0
                };
                let b = Batch {
                    logits: &logits,
                    labels: &labels,
                    teacher_probs: Some(&teacher),
                };
                let (_, g) = total_loss(b, lambda, Some(&spec), 1).unwrap();
                let fd = fd_grad(&logits, f);
                for (a, b) in g.iter().zip(&fd) {
                    assert!(rel_err(*a, *b) < 1e-5, "{mode}: {a} vs {b}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn moon_regroup_conserves_mass(seed in any::<u64>()) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let spec = random_spec(&mut rng, DistillMode::Moon);
            let p = random_probs(&mut rng, spec.student_len());
            let ph = regroup(&p, &spec).unwrap();
            prop_assert!((ph.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn kd_loss_is_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            for mode in [DistillMode::Standard, DistillMode::Mib, DistillMode::Moon] {
                let spec = random_spec(&mut rng, mode);
                let q = random_probs(&mut rng, spec.teacher_len());
                let z: Vec<f64> = (0..spec.student_len()).map(|_| rng.uniform(-4.0, 4.0)).collect();
                let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
                let a = kd_loss(&q, &z, &spec).unwrap();
                let b = kd_loss(&q, &shifted, &spec).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn kd_loss_is_bounded_by_teacher_entropy(seed in any::<u64>()) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            for mode in [DistillMode::Standard, DistillMode::Mib, DistillMode::Moon] {
                let spec = random_spec(&mut rng, mode);
                let q = random_probs(&mut rng, spec.teacher_len());
                let z: Vec<f64> = (0..spec.student_len()).map(|_| rng.uniform(-4.0, 4.0)).collect();
                let entropy = -q.iter().map(|v| v * v.max(LOG_FLOOR).ln()).sum::<f64>();
                prop_assert!(kd_loss(&q, &z, &spec).unwrap() >= entropy - 1e-9);
            }
        }

        #[test]
        fn gradients_sum_to_zero(seed in any::<u64>()) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            for mode in [DistillMode::Standard, DistillMode::Mib, DistillMode::Moon] {
                let spec = random_spec(&mut rng, mode);
                let q = random_probs(&mut rng, spec.teacher_len());
                let z: Vec<f64> = (0..spec.student_len()).map(|_| rng.uniform(-4.0, 4.0)).collect();
                let g = kd_grad(&q, &z, &spec).unwrap();
                prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
            }
        }

        #[test]
        fn kd_grad_matches_finite_differences(seed in any::<u64>()) {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            for mode in [DistillMode::Standard, DistillMode::Mib, DistillMode::Moon] {
                let spec = random_spec(&mut rng, mode);
                let q = random_probs(&mut rng, spec.teacher_len());
                let z: Vec<f64> = (0..spec.student_len()).map(|_| rng.uniform(-3.0, 3.0)).collect();
                let g = kd_grad(&q, &z, &spec).unwrap();
                let fd = fd_grad(&z, |z| kd_loss(&q, z, &spec).unwrap());
                for (a, b) in g.iter().zip(&fd) {
                    prop_assert!(rel_err(*a, *b) < 1e-5, "{} vs {}", a, b);
                }
            }
        }
    }
}
