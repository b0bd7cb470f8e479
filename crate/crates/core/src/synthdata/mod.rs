//! Deterministic synthetic segmentation scenes whose classes follow an
//! ontology.
//!
//! Every root of the ontology gets an anchor; atoms below a root sit at a
//! fixed radius around it. Pixels are isotropic Gaussian draws around the
//! mean of their atom, and scenes are tiled by axis-aligned rectangles.

mod dataset;
mod features;

pub use dataset::{load_dataset, write_dataset, Dataset, Manifest, ManifestScene};
pub use features::FeatureGrid;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::PixelSet;
use crate::ontology::{ClassId, LabelGrid, Ontology, TaskSequence};
use crate::par::{self, Execution};
use crate::rng::{derive_seed, Xoshiro256StarStar};

const MAX_PLACEMENT_DRAWS: usize = 10_000;
const MAX_EVAL_ATTEMPTS: u64 = 5;
/// Pixels every evaluated class needs in the held-out set.
pub const MIN_EVAL_PIXELS: usize = 200;

const MODEL_STREAM: u64 = 0;
const TASK_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// Generator settings shared by the class model and the scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub d_in: usize,
    pub anchor_sep: f64,
    pub child_radius: f64,
    pub sigma: f64,
    pub height: usize,
    pub width: usize,
    pub regions: usize,
    pub min_side: usize,
    pub scenes_per_task: usize,
    pub eval_scenes: usize,
    /// Probability that a training region draws its class among the atoms
    /// of the current task's classes rather than among all atoms.
    pub task_bias: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            d_in: 8,
            anchor_sep: 8.0,
            child_radius: 2.0,
            sigma: 0.25,
            height: 24,
            width: 24,
            regions: 12,
            min_side: 4,
            scenes_per_task: 8,
            eval_scenes: 32,
            task_bias: 0.7,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_in < 2 {
            return bad(format!("d_in must be at least 2, got {}", self.d_in));
        }
        if !(self.anchor_sep > self.child_radius && self.child_radius >= 0.0) {
            return bad(format!(
                "need anchor_sep > child_radius >= 0, got {} and {}",
                self.anchor_sep, self.child_radius
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and non-negative, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.task_bias) {
            return bad(format!("task_bias must lie in [0, 1], got {}", self.task_bias));
        }
        if self.scenes_per_task == 0 || self.eval_scenes == 0 {
            return bad("scenes_per_task and eval_scenes must be positive".into());
        }
        self.scene(0).validate()
    }

    pub fn scene(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            height: self.height,
            width: self.width,
            regions: self.regions,
            min_side: self.min_side,
            seed,
        }
    }
}

/// Per-atom Gaussian means with a shared isotropic spread.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianClassModel {
    d_in: usize,
    sigma: f64,
    /// Indexed by class id; `None` for classes that are not atoms.
    means: Vec<Option<Vec<f64>>>,
}

impl GaussianClassModel {
    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean(&self, c: ClassId) -> Option<&[f64]> {
        self.means.get(c.index())?.as_deref()
    }

    pub fn atoms(&self) -> Vec<ClassId> {
        self.means
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_some())
            .map(|(i, _)| ClassId(i as u32))
            .collect()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `count` points at `radius` around `center`, re-drawn until pairwise
/// distances reach `radius`.
fn place_separated(
    rng: &mut Xoshiro256StarStar,
    center: &[f64],
    radius: f64,
    count: usize,
    what: &str,
) -> Result<Vec<Vec<f64>>> {
    let mut placed: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_DRAWS {
            let u = rng.unit_vector(center.len());
            let p: Vec<f64> = center.iter().zip(&u).map(|(c, x)| c + radius * x).collect();
            if placed.iter().all(|q| distance(q, &p) >= radius) {
                accepted = Some(p);
                break;
            }
        }
        placed.push(accepted.ok_or_else(|| {
            Error::Inseparable(format!(
                "could not place {what} {} of {count} after {MAX_PLACEMENT_DRAWS} draws",
                i + 1
            ))
        })?);
    }
    Ok(placed)
}

/// Anchors at `anchor_sep` from the origin for every root, pairwise at least
/// `anchor_sep` apart. A root atom sits on its anchor; every other atom sits
/// at `child_radius` from its root's anchor, atoms of one root pairwise at
/// least `child_radius` apart.
pub fn build_class_model(
    onto: &Ontology,
    d_in: usize,
    anchor_sep: f64,
    child_radius: f64,
    sigma: f64,
    seed: u64,
) -> Result<GaussianClassModel> {
    if d_in < 2 || !(anchor_sep > child_radius && child_radius >= 0.0) || !(sigma >= 0.0) {
        return Err(Error::Config(format!(
            "class model needs d_in >= 2 and anchor_sep > child_radius >= 0 and sigma >= 0 \
             (got d_in={d_in}, anchor_sep={anchor_sep}, child_radius={child_radius}, sigma={sigma})"
        )));
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let roots = onto.roots();
    let anchors = place_separated(&mut rng, &vec![0.0; d_in], anchor_sep, roots.len(), "root anchor")?;
    let mut means = vec![None; onto.len()];
    for (root, anchor) in roots.iter().zip(&anchors) {
        let below: Vec<ClassId> = onto.atoms_under(*root).into_iter().filter(|a| a != root).collect();
        if onto.is_atom(*root) {
            means[root.index()] = Some(anchor.clone());
        }
        // Zero radius collapses every atom of the root onto one point.
        let points = if child_radius > 0.0 {
            place_separated(&mut rng, anchor, child_radius, below.len(), "atom")?
        } else {
            vec![anchor.clone(); below.len()]
        };
        for (a, p) in below.iter().zip(points) {
            means[a.index()] = Some(p);
        }
    }
    Ok(GaussianClassModel { d_in, sigma, means })
}

/// Layout of one scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub regions: usize,
    pub min_side: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.regions == 0 || self.min_side == 0 {
            return Err(Error::Unsatisfiable(format!(
                "scene dimensions, region count and minimum side must be positive: {self:?}"
            )));
        }
        if self.height < self.min_side || self.width < self.min_side {
            return Err(Error::Unsatisfiable(format!(
                "a {}x{} grid cannot hold regions of side {}",
                self.height, self.width, self.min_side
            )));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle `rows x cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.rows * self.cols
    }
}

/// Splits the grid into `spec.regions` rectangles. Each step cuts the
/// largest splittable rectangle at a random position along a random
/// admissible axis, keeping every side at least `min_side`.
pub fn partition(spec: &SceneSpec, rng: &mut Xoshiro256StarStar) -> Result<Vec<Rect>> {
    spec.validate()?;
    let m = spec.min_side;
    let mut rects = vec![Rect {
        top: 0,
        left: 0,
        rows: spec.height,
        cols: spec.width,
    }];
    while rects.len() < spec.regions {
        let pick = rects
            .iter()
            .enumerate()
            .filter(|(_, r)| r.rows >= 2 * m || r.cols >= 2 * m)
            .max_by(|a, b| a.1.area().cmp(&b.1.area()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .ok_or_else(|| {
                Error::Unsatisfiable(format!(
                    "cannot cut a {}x{} grid into {} regions with sides >= {m}",
                    spec.height, spec.width, spec.regions
                ))
            })?;
        let r = rects[pick];
        let horizontal = match (r.rows >= 2 * m, r.cols >= 2 * m) {
            (true, true) => rng.chance(r.rows as f64 / (r.rows + r.cols) as f64),
            (rows_ok, _) => rows_ok,
        };
        if horizontal {
            let cut = m + rng.index(r.rows - 2 * m + 1);
            rects[pick] = Rect { rows: cut, ..r };
            rects.push(Rect {
                top: r.top + cut,
                rows: r.rows - cut,
                ..r
            });
        } else {
            let cut = m + rng.index(r.cols - 2 * m + 1);
            rects[pick] = Rect { cols: cut, ..r };
            rects.push(Rect {
                left: r.left + cut,
                cols: r.cols - cut,
                ..r
            });
        }
    }
    Ok(rects)
}

/// Region class draws: with probability `bias`, uniform over `preferred`;
/// otherwise uniform over all atoms.
#[derive(Clone, Copy, Debug)]
pub struct ClassSampler<'a> {
    pub atoms: &'a [ClassId],
    pub preferred: &'a [ClassId],
    pub bias: f64,
}

impl ClassSampler<'_> {
    fn draw(&self, rng: &mut Xoshiro256StarStar) -> ClassId {
        if !self.preferred.is_empty() && rng.chance(self.bias) {
            self.preferred[rng.index(self.preferred.len())]
        } else {
            self.atoms[rng.index(self.atoms.len())]
        }
    }
}

/// One scene: features plus finest labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub features: FeatureGrid,
    pub finest: LabelGrid,
}

/// Tiles the grid, draws one atom per region, then fills pixel features in
/// row-major order as `mean + sigma * N(0, I)`.
pub fn generate_scene_with(model: &GaussianClassModel, spec: &SceneSpec, sampler: ClassSampler<'_>) -> Result<Scene> {
    if sampler.atoms.is_empty() {
        return Err(Error::Config("no atoms to draw scene classes from".into()));
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(spec.seed);
    let rects = partition(spec, &mut rng)?;
    let mut finest = LabelGrid::filled(spec.height, spec.width, ClassId::BACKGROUND);
    for r in &rects {
        let c = sampler.draw(&mut rng);
        for row in r.top..r.top + r.rows {
            for col in r.left..r.left + r.cols {
                finest.set(row, col, c);
            }
        }
    }
    let d = model.d_in;
    let mut data = Vec::with_capacity(finest.len() * d);
    for &c in finest.labels() {
        let mean = model.mean(c).ok_or(Error::UnknownClassId(c.0))?;
        for &mu in mean {
            data.push(mu + model.sigma * rng.standard_normal());
        }
    }
    Ok(Scene {
        features: FeatureGrid::new(spec.height, spec.width, d, data)?,
        finest,
    })
}

/// Scene whose regions draw atoms uniformly.
pub fn generate_scene(model: &GaussianClassModel, spec: &SceneSpec) -> Result<Scene> {
    let atoms = model.atoms();
    generate_scene_with(
        model,
        spec,
        ClassSampler {
            atoms: &atoms,
            preferred: &[],
            bias: 0.0,
        },
    )
}

/// Per-task training scenes and a shared held-out set.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub tasks: Vec<Vec<Scene>>,
    pub eval: Vec<Scene>,
}

impl Benchmark {
    /// Task-`t` pixels labelled as annotated for that task.
    pub fn task_pixels(&self, seq: &TaskSequence, t: usize) -> Result<PixelSet> {
        let map = seq.projection_map(t)?;
        pixels(&self.tasks[t], |c| map.get(c))
    }

    /// Per-task pixels labelled by the final evaluation map, for joint
    /// training.
    pub fn joint_pixels(&self, seq: &TaskSequence) -> Result<Vec<PixelSet>> {
        let map = seq.final_eval_map();
        self.tasks.iter().map(|s| pixels(s, |c| map.get(c))).collect()
    }

    /// Training sets for `method`: projected per task, or final labels for
    /// joint training.
    pub fn training_sets(&self, seq: &TaskSequence, joint: bool) -> Result<Vec<PixelSet>> {
        if joint {
            self.joint_pixels(seq)
        } else {
            (0..self.tasks.len()).map(|t| self.task_pixels(seq, t)).collect()
        }
    }

    /// Held-out pixels labelled by the final evaluation map.
    pub fn eval_pixels(&self, seq: &TaskSequence) -> Result<PixelSet> {
        let map = seq.final_eval_map();
        pixels(&self.eval, |c| map.get(c))
    }
}

fn pixels(scenes: &[Scene], label: impl Fn(ClassId) -> Result<ClassId>) -> Result<PixelSet> {
    let d = scenes.first().map_or(0, |s| s.features.d_in());
    let mut set = PixelSet {
        d_in: d,
        ..PixelSet::default()
    };
    for s in scenes {
        set.features.extend_from_slice(s.features.data());
        for &c in s.finest.labels() {
            set.labels.push(label(c)?);
        }
    }
    Ok(set)
}

/// Atoms below any class of `classes`.
fn atoms_under_all(onto: &Ontology, classes: &[ClassId]) -> Vec<ClassId> {
    let mut out: Vec<ClassId> = classes.iter().flat_map(|&c| onto.atoms_under(c)).collect();
    out.sort();
    out.dedup();
    out
}

fn count_labels(scenes: &[Scene], map: &crate::ontology::ClassMap, n: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; n];
    for s in scenes {
        for &c in s.finest.labels() {
            counts[map.get(c)?.index()] += 1;
        }
    }
    Ok(counts)
}

/// Builds the class model and all scenes from one seed.
///
/// Scene `i` of task `t` uses its own substream, so scenes can be generated
/// in any order. The held-out set is redrawn with a derived seed while any
/// evaluated class has fewer than [`MIN_EVAL_PIXELS`] pixels.
pub fn generate_benchmark(
    seq: &TaskSequence,
    params: &SynthParams,
    seed: u64,
    exec: Execution,
) -> Result<(GaussianClassModel, Benchmark)> {
    params.validate()?;
    seq.ensure_valid()?;
    let onto = seq.ontology();
    let model = build_class_model(
        onto,
        params.d_in,
        params.anchor_sep,
        params.child_radius,
        params.sigma,
        derive_seed(seed, MODEL_STREAM),
    )?;
    let atoms = onto.atoms();
    let task_seed = derive_seed(seed, TASK_STREAM);
    let tasks = (0..seq.num_tasks())
        .map(|t| {
            let preferred = atoms_under_all(onto, &seq.tasks()[t].introduced);
            let stream = derive_seed(task_seed, t as u64);
            par::map_indexed(params.scenes_per_task, exec, |i| {
                generate_scene_with(
                    &model,
                    &params.scene(derive_seed(stream, i as u64)),
                    ClassSampler {
                        atoms: &atoms,
                        preferred: &preferred,
                        bias: params.task_bias,
                    },
                )
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let map = seq.final_eval_map();
    let evaluated = seq.evaluated_classes_at(seq.last_task())?;
    let eval_root = derive_seed(seed, EVAL_STREAM);
    for attempt in 0..MAX_EVAL_ATTEMPTS {
        let eval_seed = derive_seed(eval_root, attempt);
        let eval = par::map_indexed(params.eval_scenes, exec, |i| {
            generate_scene_with(
                &model,
                &params.scene(derive_seed(eval_seed, i as u64)),
                ClassSampler {
                    atoms: &atoms,
                    preferred: &[],
                    bias: 0.0,
                },
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let counts = count_labels(&eval, &map, onto.len())?;
        if evaluated.iter().all(|c| counts[c.index()] >= MIN_EVAL_PIXELS) {
            return Ok((model, Benchmark { tasks, eval }));
        }
    }
    Err(Error::Unsatisfiable(format!(
        "held-out set missed {MIN_EVAL_PIXELS} pixels for some evaluated class in \
         {MAX_EVAL_ATTEMPTS} attempts; raise eval_scenes or regions"
    )))
}

#[cfg(test)]
mod tests;
