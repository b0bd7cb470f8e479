//! Class hierarchies, evolving task sequences, and ground-truth projection.
//!
//! An [`Ontology`] is a forest of named classes in which id 0 is always the
//! background. A [`TaskSequence`] introduces disjoint class sets task by
//! task; each introduced class is split either from a previously known class
//! or from the background. Classes whose content can appear directly in the
//! finest annotation are *atoms*: leaves, the background, and interior
//! classes flagged `residual` (a parent that keeps content of its own).

mod grid;
mod io;
pub mod presets;
pub mod random;
mod validate;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use grid::LabelGrid;
pub use validate::{validate_sequence, Violation, ViolationKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_background(self) -> bool {
        self == Self::BACKGROUND
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassNode {
    pub id: ClassId,
    pub name: String,
    pub parent: Option<ClassId>,
    /// Interior class that still carries content of its own.
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ontology {
    nodes: Vec<ClassNode>,
    children: Vec<Vec<ClassId>>,
    by_name: HashMap<String, ClassId>,
}

impl Ontology {
    pub fn new(nodes: Vec<ClassNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidOntology("no classes declared".into()));
        }
        let n = nodes.len();
        let mut by_name = HashMap::with_capacity(n);
        for (i, node) in nodes.iter().enumerate() {
            if node.id.index() != i {
                return Err(Error::InvalidOntology(format!(
                    "class `{}` has id {} but is declared at position {i}",
                    node.name, node.id.0
                )));
            }
            if node.name.trim().is_empty() {
                return Err(Error::InvalidOntology(format!("class {i} has an empty name")));
            }
            if by_name.insert(node.name.clone(), node.id).is_some() {
                return Err(Error::InvalidOntology(format!("duplicate class name `{}`", node.name)));
            }
            if let Some(p) = node.parent {
                if p.index() >= n {
                    return Err(Error::InvalidOntology(format!(
                        "class `{}` has unknown parent id {}",
                        node.name, p.0
                    )));
                }
            }
        }
        if nodes[0].parent.is_some() {
            return Err(Error::InvalidOntology("the background class cannot have a parent".into()));
        }
        let mut children = vec![Vec::new(); n];
        for node in &nodes {
            if let Some(p) = node.parent {
                children[p.index()].push(node.id);
            }
        }
        // Parent links must reach a root within n steps.
        for node in &nodes {
            let mut cur = node.parent;
            let mut steps = 0;
            while let Some(p) = cur {
                steps += 1;
                if steps > n {
                    return Err(Error::InvalidOntology(format!(
                        "parent links of `{}` form a cycle",
                        node.name
                    )));
                }
                cur = nodes[p.index()].parent;
            }
        }
        Ok(Self {
            nodes,
            children,
            by_name,
        })
    }

    /// Builds from `(name, parent name, residual)` declarations; ids follow declaration order.
    pub fn from_declarations<'a, I>(decls: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, Option<&'a str>, bool)>,
    {
        let decls: Vec<_> = decls.into_iter().collect();
        let ids: HashMap<&str, ClassId> = decls
            .iter()
            .enumerate()
            .map(|(i, (name, _, _))| (*name, ClassId(i as u32)))
            .collect();
        let nodes = decls
            .iter()
            .enumerate()
            .map(|(i, (name, parent, residual))| {
                let parent = parent
                    .map(|p| ids.get(p).copied().ok_or_else(|| Error::UnknownClass(p.to_string())))
                    .transpose()?;
                Ok(ClassNode {
                    id: ClassId(i as u32),
                    name: name.to_string(),
                    parent,
                    residual: *residual,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(nodes)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ClassNode] {
        &self.nodes
    }

    pub fn contains(&self, id: ClassId) -> bool {
        id.index() < self.nodes.len()
    }

    pub fn check(&self, id: ClassId) -> Result<ClassId> {
        if self.contains(id) {
            Ok(id)
        } else {
            Err(Error::UnknownClassId(id.0))
        }
    }

    pub fn name(&self, id: ClassId) -> &str {
        &self.nodes[id.index()].name
    }

    pub fn id(&self, name: &str) -> Result<ClassId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<ClassId> {
        self.by_name.get(name).copied()
    }

    pub fn parent(&self, id: ClassId) -> Option<ClassId> {
        self.nodes[id.index()].parent
    }

    pub fn children(&self, id: ClassId) -> &[ClassId] {
        &self.children[id.index()]
    }

    pub fn is_leaf(&self, id: ClassId) -> bool {
        self.children[id.index()].is_empty()
    }

    /// Whether annotated pixels may carry this class as their finest label.
    pub fn is_atom(&self, id: ClassId) -> bool {
        id.is_background() || self.is_leaf(id) || self.nodes[id.index()].residual
    }

    pub fn atoms(&self) -> Vec<ClassId> {
        self.ids().filter(|&c| self.is_atom(c)).collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> {
        (0..self.nodes.len() as u32).map(ClassId)
    }

    /// Strict ancestors, nearest first.
    pub fn ancestors(&self, id: ClassId) -> impl Iterator<Item = ClassId> + '_ {
        std::iter::successors(self.parent(id), move |&p| self.parent(p))
    }

    pub fn is_ancestor_or_self(&self, ancestor: ClassId, id: ClassId) -> bool {
        id == ancestor || self.ancestors(id).any(|a| a == ancestor)
    }

    /// Root of the tree containing `id`.
    pub fn root_of(&self, id: ClassId) -> ClassId {
        self.ancestors(id).last().unwrap_or(id)
    }

    pub fn roots(&self) -> Vec<ClassId> {
        self.ids().filter(|&c| self.parent(c).is_none()).collect()
    }

    /// Atoms in the subtree of `id` (including `id` itself when it is an atom).
    pub fn atoms_under(&self, id: ClassId) -> Vec<ClassId> {
        self.atoms()
            .into_iter()
            .filter(|&a| self.is_ancestor_or_self(id, a))
            .collect()
    }

    pub fn names(&self, ids: impl IntoIterator<Item = ClassId>) -> Vec<String> {
        ids.into_iter().map(|c| self.name(c).to_string()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub parent: ClassId,
    pub children: Vec<ClassId>,
    /// True iff the parent keeps no content of its own after the split.
    pub exhaustive: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub t: usize,
    pub introduced: Vec<ClassId>,
    pub splits: Vec<SplitSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSequence {
    name: Option<String>,
    ontology: Ontology,
    tasks: Vec<TaskSpec>,
}

/// Lookup from any class id to the class that represents it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap(Vec<ClassId>);

impl ClassMap {
    pub fn get(&self, c: ClassId) -> Result<ClassId> {
        self.0.get(c.index()).copied().ok_or(Error::UnknownClassId(c.0))
    }

    pub fn as_slice(&self) -> &[ClassId] {
        &self.0
    }

    pub fn apply(&self, grid: &LabelGrid) -> Result<LabelGrid> {
        grid.try_map(|c| self.get(c))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassGroupAssignment {
    pub unsplit: BTreeSet<ClassId>,
    pub split: BTreeSet<ClassId>,
    /// Partially split parent -> the atoms it still denotes after the final task.
    pub retained: BTreeMap<ClassId, BTreeSet<ClassId>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassGroup {
    Unsplit,
    Split,
    Retained,
}

impl fmt::Display for ClassGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassGroup::Unsplit => "unsplit",
            ClassGroup::Split => "split",
            ClassGroup::Retained => "retained",
        })
    }
}

impl ClassGroupAssignment {
    pub fn group_of(&self, c: ClassId) -> Option<ClassGroup> {
        if self.unsplit.contains(&c) {
            Some(ClassGroup::Unsplit)
        } else if self.split.contains(&c) {
            Some(ClassGroup::Split)
        } else if self.retained.contains_key(&c) {
            Some(ClassGroup::Retained)
        } else {
            None
        }
    }

    /// Classes that enter mIoU means: every group member except the background.
    pub fn scored(&self) -> BTreeSet<ClassId> {
        self.unsplit
            .iter()
            .chain(&self.split)
            .chain(self.retained.keys())
            .copied()
            .filter(|c| !c.is_background())
            .collect()
    }
}

/// Result of inferring class maps from a teacher's predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferredSplits {
    pub splits: Vec<SplitSpec>,
    /// New classes without labelled pixels; they default to the background.
    pub unobserved: Vec<ClassId>,
}

impl TaskSequence {
    pub fn new(ontology: Ontology, tasks: Vec<TaskSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::format("task sequence", "at least one task is required"));
        }
        for task in &tasks {
            for &c in task
                .introduced
                .iter()
                .chain(task.splits.iter().flat_map(|s| std::iter::once(&s.parent).chain(&s.children)))
            {
                ontology.check(c)?;
            }
        }
        Ok(Self {
            name: None,
            ontology,
            tasks,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn ontology(&self) -> &Ontology {
        &self.ontology
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Index `n` of the final task.
    pub fn last_task(&self) -> usize {
        self.tasks.len() - 1
    }

    pub fn task(&self, t: usize) -> Result<&TaskSpec> {
        self.tasks.get(t).ok_or(Error::TaskOutOfRange {
            t,
            lo: 0,
            hi: self.last_task(),
        })
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let v = validate_sequence(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        self.validate().map_err(Error::InvalidSequence)
    }

    /// Task at which `c` is first introduced.
    pub fn introduced_at(&self, c: ClassId) -> Option<usize> {
        self.tasks.iter().position(|task| task.introduced.contains(&c))
    }

    /// Background followed by every class introduced up to task `t`, in
    /// introduction order. Position in this list is the logit index.
    pub fn label_space_at(&self, t: usize) -> Result<Vec<ClassId>> {
        self.task(t)?;
        let mut space = vec![ClassId::BACKGROUND];
        for task in &self.tasks[..=t] {
            space.extend(task.introduced.iter().copied());
        }
        Ok(space)
    }

    /// Parents of the class maps at task `t` (1 ≤ t ≤ n).
    pub fn evolving_set(&self, t: usize) -> Result<BTreeSet<ClassId>> {
        if t == 0 || t > self.last_task() {
            return Err(Error::TaskOutOfRange {
                t,
                lo: 1,
                hi: self.last_task(),
            });
        }
        Ok(self.tasks[t].splits.iter().map(|s| s.parent).collect())
    }

    /// For every class, its nearest ancestor-or-self introduced in tasks
    /// `0..=t`, or the background. `None` means "before task 0".
    pub(crate) fn owner_table(&self, t: Option<usize>) -> Vec<ClassId> {
        let onto = &self.ontology;
        let mut known = vec![false; onto.len()];
        if let Some(t) = t {
            for task in &self.tasks[..=t.min(self.last_task())] {
                for &c in &task.introduced {
                    known[c.index()] = true;
                }
            }
        }
        onto.ids()
            .map(|c| {
                std::iter::once(c)
                    .chain(onto.ancestors(c))
                    .find(|a| known[a.index()])
                    .unwrap_or(ClassId::BACKGROUND)
            })
            .collect()
    }

    /// Atoms still denoted by `c` once tasks `0..=t` have been learned.
    pub fn content_at(&self, c: ClassId, t: usize) -> Vec<ClassId> {
        let owners = self.owner_table(Some(t));
        self.ontology
            .atoms()
            .into_iter()
            .filter(|a| owners[a.index()] == c)
            .collect()
    }

    /// Ground truth as annotated for task `t`: only classes of `C_t` are
    /// labelled, everything else is background.
    pub fn project_ground_truth(&self, t: usize, finest: &LabelGrid) -> Result<LabelGrid> {
        self.projection_map(t)?.apply(finest)
    }

    pub fn projection_map(&self, t: usize) -> Result<ClassMap> {
        let task = self.task(t)?;
        let onto = &self.ontology;
        let mut current = vec![false; onto.len()];
        for &c in &task.introduced {
            current[c.index()] = true;
        }
        Ok(ClassMap(
            onto.ids()
                .map(|c| {
                    std::iter::once(c)
                        .chain(onto.ancestors(c))
                        .find(|a| current[a.index()])
                        .unwrap_or(ClassId::BACKGROUND)
                })
                .collect(),
        ))
    }

    /// Evaluation labels after task `t`: each class maps to itself if known
    /// by then, else to its nearest known ancestor, else to the background.
    pub fn eval_map_at(&self, t: usize) -> Result<ClassMap> {
        self.task(t)?;
        Ok(ClassMap(self.owner_table(Some(t))))
    }

    pub fn final_eval_map(&self) -> ClassMap {
        ClassMap(self.owner_table(Some(self.last_task())))
    }

    /// Label-space classes that still denote content after task `t`
    /// (background first). Exhaustively split parents drop out.
    pub fn evaluated_classes_at(&self, t: usize) -> Result<Vec<ClassId>> {
        let owners = self.owner_table(Some(t));
        let live: BTreeSet<ClassId> = self
            .ontology
            .atoms()
            .into_iter()
            .map(|a| owners[a.index()])
            .collect();
        Ok(self
            .label_space_at(t)?
            .into_iter()
            .filter(|c| live.contains(c))
            .collect())
    }

    pub fn class_groups(&self) -> ClassGroupAssignment {
        let n = self.last_task();
        let owners = self.owner_table(Some(n));
        let mut content: BTreeMap<ClassId, BTreeSet<ClassId>> = BTreeMap::new();
        for a in self.ontology.atoms() {
            content.entry(owners[a.index()]).or_default().insert(a);
        }
        let later_parents: BTreeSet<ClassId> = self.tasks[1..]
            .iter()
            .flat_map(|task| task.splits.iter().map(|s| s.parent))
            .collect();

        let mut groups = ClassGroupAssignment::default();
        for &p in &later_parents {
            if let Some(rest) = content.get(&p) {
                groups.retained.insert(p, rest.clone());
            }
        }
        // A later class whose children are never introduced is all remainder.
        for task in &self.tasks[1..] {
            for &c in &task.introduced {
                if !self.ontology.is_leaf(c) && !later_parents.contains(&c) {
                    if let Some(rest) = content.get(&c) {
                        groups.retained.insert(c, rest.clone());
                    }
                }
            }
        }
        for (t, task) in self.tasks.iter().enumerate() {
            for &c in &task.introduced {
                if !content.contains_key(&c) || groups.retained.contains_key(&c) {
                    continue;
                }
                if t == 0 {
                    groups.unsplit.insert(c);
                } else {
                    groups.split.insert(c);
                }
            }
        }
        groups
    }

    /// Recovers the class maps of task `t` from a previous-task model's
    /// predictions: each new class is attributed to the teacher's modal
    /// prediction over its labelled pixels (ties favour background, then the
    /// lowest id).
    pub fn infer_splits(
        &self,
        t: usize,
        teacher_predictions: &LabelGrid,
        task_gt: &LabelGrid,
    ) -> Result<InferredSplits> {
        if t == 0 {
            return Err(Error::TaskOutOfRange {
                t,
                lo: 1,
                hi: self.last_task(),
            });
        }
        let task = self.task(t)?;
        teacher_predictions.ensure_same_shape(task_gt)?;
        let mut counts: HashMap<ClassId, BTreeMap<ClassId, u64>> = HashMap::new();
        for (&gt, &pred) in task_gt.labels().iter().zip(teacher_predictions.labels()) {
            self.ontology.check(pred)?;
            *counts.entry(gt).or_default().entry(pred).or_default() += 1;
        }
        let mut by_parent: Vec<(ClassId, Vec<ClassId>)> = Vec::new();
        let mut unobserved = Vec::new();
        for &c in &task.introduced {
            let parent = match counts.get(&c) {
                // BTreeMap iterates ids ascending, so the first maximum is the
                // lowest id; background is id 0 and wins any tie it is part of.
                Some(hist) if !hist.is_empty() => {
                    let best = hist.values().copied().max().unwrap_or(0);
                    hist.iter()
                        .find(|(_, &n)| n == best)
                        .map(|(&p, _)| p)
                        .unwrap_or(ClassId::BACKGROUND)
                }
                _ => {
                    unobserved.push(c);
                    ClassId::BACKGROUND
                }
            };
            match by_parent.iter_mut().find(|(p, _)| *p == parent) {
                Some((_, kids)) => kids.push(c),
                None => by_parent.push((parent, vec![c])),
            }
        }
        Ok(InferredSplits {
            splits: by_parent
                .into_iter()
                .map(|(parent, children)| SplitSpec {
                    parent,
                    children,
                    exhaustive: false,
                })
                .collect(),
            unobserved,
        })
    }
}
