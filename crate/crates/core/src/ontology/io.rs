//! JSON persistence of an ontology together with its task sequence.
//! Files refer to classes by name; ids follow declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassId, ClassNode, Ontology, SplitSpec, TaskSequence, TaskSpec};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct SequenceDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    classes: Vec<ClassDoc>,
    tasks: Vec<TaskDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassDoc {
    id: u32,
    name: String,
    parent: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    residual: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskDoc {
    t: usize,
    introduced: Vec<String>,
    splits: Vec<SplitDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitDoc {
    parent: String,
    children: Vec<String>,
    exhaustive: bool,
}

impl TaskSequence {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SequenceDoc = serde_json::from_str(text)?;
        let ids: std::collections::HashMap<&str, ClassId> = doc
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.as_str(), ClassId(i as u32)))
            .collect();
        let lookup = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::UnknownClass(name.to_string()))
        };
        let nodes = doc
            .classes
            .iter()
            .map(|c| {
                Ok(ClassNode {
                    id: ClassId(c.id),
                    name: c.name.clone(),
                    parent: c.parent.as_deref().map(lookup).transpose()?,
                    residual: c.residual,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ontology = Ontology::new(nodes)?;
        let tasks = doc
            .tasks
            .iter()
            .map(|t| {
                Ok(TaskSpec {
                    t: t.t,
                    introduced: t.introduced.iter().map(|n| lookup(n)).collect::<Result<_>>()?,
                    splits: t
                        .splits
                        .iter()
                        .map(|s| {
                            Ok(SplitSpec {
                                parent: lookup(&s.parent)?,
                                children: s.children.iter().map(|n| lookup(n)).collect::<Result<_>>()?,
                                exhaustive: s.exhaustive,
                            })
                        })
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut seq = TaskSequence::new(ontology, tasks)?;
        seq.name = doc.name;
        Ok(seq)
    }

    pub fn to_json(&self) -> String {
        let onto = &self.ontology;
        let name = |c: ClassId| onto.name(c).to_string();
        let doc = SequenceDoc {
            name: self.name.clone(),
            classes: onto
                .nodes()
                .iter()
                .map(|n| ClassDoc {
                    id: n.id.0,
                    name: n.name.clone(),
                    parent: n.parent.map(name),
                    residual: n.residual,
                })
                .collect(),
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskDoc {
                    t: t.t,
                    introduced: t.introduced.iter().copied().map(name).collect(),
                    splits: t
                        .splits
                        .iter()
                        .map(|s| SplitDoc {
                            parent: name(s.parent),
                            children: s.children.iter().copied().map(name).collect(),
                            exhaustive: s.exhaustive,
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("sequence documents always serialize");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
