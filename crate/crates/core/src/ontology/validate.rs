use std::collections::{BTreeSet, HashMap};
use std::fmt;

use super::{ClassId, TaskSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    /// Task record out of position.
    TaskIndex,
    /// A class is introduced by more than one task (or twice in one task).
    Disjointness,
    /// The background cannot be introduced.
    BackgroundIntroduced,
    /// A split child is missing from the task's introduced set.
    ChildNotIntroduced,
    /// An introduced class is not the child of any split.
    IntroducedWithoutSplit,
    /// A class is the child of more than one split.
    MultipleParents,
    /// Split with no children.
    EmptySplit,
    /// Child equals its parent or the background, or is repeated.
    InvalidChild,
    /// The same parent has more than one split record in a task.
    RepeatedParent,
    /// Split parent unknown at the time of the split.
    ParentNotKnown,
    /// Split parent is not the child's nearest known ancestor.
    HierarchyMismatch,
    /// Split flagged non-exhaustive but the parent keeps no content.
    EmptyRemainder,
    /// Split flagged exhaustive but the parent keeps content.
    NonEmptyRemainder,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::TaskIndex => "task index",
            ViolationKind::Disjointness => "disjointness",
            ViolationKind::BackgroundIntroduced => "background introduced",
            ViolationKind::ChildNotIntroduced => "child not introduced",
            ViolationKind::IntroducedWithoutSplit => "introduced without split",
            ViolationKind::MultipleParents => "multiple parents",
            ViolationKind::EmptySplit => "empty split",
            ViolationKind::InvalidChild => "invalid child",
            ViolationKind::RepeatedParent => "repeated parent",
            ViolationKind::ParentNotKnown => "parent not known",
            ViolationKind::HierarchyMismatch => "hierarchy mismatch",
            ViolationKind::EmptyRemainder => "empty remainder",
            ViolationKind::NonEmptyRemainder => "non-empty remainder",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub task: usize,
    pub kind: ViolationKind,
    pub classes: Vec<String>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task {}: {}", self.task, self.kind)?;
        if !self.classes.is_empty() {
            write!(f, " ({})", self.classes.join(", "))?;
        }
        Ok(())
    }
}

/// Checks every well-formedness rule of an evolving task sequence and
/// reports all violations found (an empty list means the sequence is valid).
pub fn validate_sequence(seq: &TaskSequence) -> Vec<Violation> {
    let onto = seq.ontology();
    let mut out = Vec::new();
    let mut push = |task: usize, kind: ViolationKind, classes: &[ClassId]| {
        out.push(Violation {
            task,
            kind,
            classes: onto.names(classes.iter().copied()),
        });
    };

    let mut first_seen: HashMap<ClassId, usize> = HashMap::new();
    for (i, task) in seq.tasks().iter().enumerate() {
        if task.t != i {
            push(i, ViolationKind::TaskIndex, &[]);
        }
        let before = if i == 0 { None } else { Some(i - 1) };
        let owners_before = seq.owner_table(before);
        let owners_after = seq.owner_table(Some(i));

        let introduced: BTreeSet<ClassId> = task.introduced.iter().copied().collect();
        for &c in &task.introduced {
            if c.is_background() {
                push(i, ViolationKind::BackgroundIntroduced, &[c]);
                continue;
            }
            match first_seen.get(&c) {
                Some(_) => push(i, ViolationKind::Disjointness, &[c]),
                None => {
                    first_seen.insert(c, i);
                }
            }
        }

        let mut child_count: HashMap<ClassId, usize> = HashMap::new();
        let mut parents_seen = BTreeSet::new();
        for split in &task.splits {
            let p = split.parent;
            if !parents_seen.insert(p) {
                push(i, ViolationKind::RepeatedParent, &[p]);
            }
            let parent_known = p.is_background()
                || first_seen.get(&p).is_some_and(|&tp| tp < i);
            if !parent_known {
                push(i, ViolationKind::ParentNotKnown, &[p]);
            }
            if split.children.is_empty() {
                push(i, ViolationKind::EmptySplit, &[p]);
            }
            let mut local = BTreeSet::new();
            for &c in &split.children {
                if c == p || c.is_background() || !local.insert(c) {
                    push(i, ViolationKind::InvalidChild, &[p, c]);
                    continue;
                }
                *child_count.entry(c).or_default() += 1;
                if !introduced.contains(&c) {
                    push(i, ViolationKind::ChildNotIntroduced, &[c]);
                } else if parent_known && owners_before[c.index()] != p {
                    push(
                        i,
                        ViolationKind::HierarchyMismatch,
                        &[c, p, owners_before[c.index()]],
                    );
                }
            }
            if parent_known {
                let keeps_content = onto
                    .atoms()
                    .into_iter()
                    .any(|a| owners_after[a.index()] == p);
                match (split.exhaustive, keeps_content) {
                    (false, false) => push(i, ViolationKind::EmptyRemainder, &[p]),
                    (true, true) => push(i, ViolationKind::NonEmptyRemainder, &[p]),
                    _ => {}
                }
            }
        }
        for (&c, &k) in &child_count {
            if k > 1 {
                push(i, ViolationKind::MultipleParents, &[c]);
            }
        }
        for &c in &task.introduced {
            if !c.is_background() && !child_count.contains_key(&c) {
                push(i, ViolationKind::IntroducedWithoutSplit, &[c]);
            }
        }
    }
    out
}
