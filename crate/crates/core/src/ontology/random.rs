//! Random well-formed ontologies and task sequences, for property tests and
//! benchmarks.

use super::{ClassId, ClassNode, Ontology, SplitSpec, TaskSequence, TaskSpec};
use crate::rng::Xoshiro256StarStar;

/// Random forest of `2..=max_classes` classes below the background, with up
/// to `max_tasks` tasks. Task 0 introduces every root; each later task
/// splits some known classes into a subset of their direct children.
pub fn random_sequence(rng: &mut Xoshiro256StarStar, max_classes: usize, max_tasks: usize) -> TaskSequence {
    let n = 2 + rng.index(max_classes.max(2) - 1);
    let mut nodes = vec![ClassNode {
        id: ClassId::BACKGROUND,
        name: "background".into(),
        parent: None,
        residual: false,
    }];
    for i in 1..=n {
        // Parent among earlier non-background classes, or a root.
        let parent = if i > 1 && rng.chance(0.65) {
            Some(ClassId(1 + rng.index(i - 1) as u32))
        } else {
            None
        };
        nodes.push(ClassNode {
            id: ClassId(i as u32),
            name: format!("c{i}"),
            parent,
            residual: rng.chance(0.15),
        });
    }
    let onto = Ontology::new(nodes).expect("generated ontology is a forest");

    let mut known = vec![false; onto.len()];
    let roots: Vec<ClassId> = onto.roots().into_iter().filter(|c| !c.is_background()).collect();
    let mut tasks = vec![];
    let mut pending = vec![TaskSpec {
        t: 0,
        introduced: roots.clone(),
        splits: vec![SplitSpec {
            parent: ClassId::BACKGROUND,
            children: roots.clone(),
            exhaustive: false,
        }],
    }];
    for &r in &roots {
        known[r.index()] = true;
    }
    tasks.append(&mut pending);
    while tasks.len() < max_tasks.max(1) {
        let candidates: Vec<ClassId> = onto
            .ids()
            .filter(|&c| known[c.index()] && onto.children(c).iter().any(|k| !known[k.index()]))
            .collect();
        if candidates.is_empty() {
            break;
        }
        let mut splits = vec![];
        let mut introduced: Vec<ClassId> = vec![];
        for &p in &candidates {
            if splits.is_empty() || rng.chance(0.5) {
                let kids: Vec<ClassId> = onto
                    .children(p)
                    .iter()
                    .copied()
                    .filter(|k| !known[k.index()] && rng.chance(0.6))
                    .collect();
                if !kids.is_empty() {
                    introduced.extend(&kids);
                    splits.push(SplitSpec {
                        parent: p,
                        children: kids,
                        exhaustive: false,
                    });
                }
            }
        }
        if splits.is_empty() {
            continue;
        }
        for &c in &introduced {
            known[c.index()] = true;
        }
        tasks.push(TaskSpec {
            t: tasks.len(),
            introduced,
            splits,
        });
    }
    let mut seq = TaskSequence::new(onto, tasks).expect("ids in range");
    // Derive exhaustive flags from the remaining content after each task.
    for t in 0..seq.num_tasks() {
        let flags: Vec<bool> = seq.tasks[t]
            .splits
            .iter()
            .map(|s| seq.content_at(s.parent, t).is_empty())
            .collect();
        for (s, f) in seq.tasks[t].splits.iter_mut().zip(flags) {
            s.exhaustive = f;
        }
    }
    seq
}
