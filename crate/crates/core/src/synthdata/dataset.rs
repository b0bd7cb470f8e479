//! On-disk datasets.
//!
//! ```text
//! sequence.json
//! task_<t>.json              manifest of task t
//! task_<t>/scene_<i>.clfg    features
//! task_<t>/scene_<i>.txt     labels as annotated for task t
//! task_<t>/scene_<i>.finest.txt
//! eval.json, eval/...        held-out scenes, labels by the final evaluation map
//! ```
//! Manifest paths are relative to the dataset directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Benchmark, FeatureGrid, Scene};
use crate::error::{Error, Result};
use crate::ontology::{ClassMap, LabelGrid, TaskSequence};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub features: String,
    pub labels: String,
    pub finest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: usize,
    pub scenes: Vec<ManifestScene>,
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequence: TaskSequence,
    pub benchmark: Benchmark,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_scenes(dir: &Path, sub: &str, task: usize, scenes: &[Scene], map: &ClassMap) -> Result<Vec<PathBuf>> {
    create_dir(&dir.join(sub))?;
    let mut written = Vec::new();
    let mut manifest = Manifest {
        task,
        scenes: Vec::with_capacity(scenes.len()),
    };
    for (i, s) in scenes.iter().enumerate() {
        let entry = ManifestScene {
            features: format!("{sub}/scene_{i:04}.clfg"),
            labels: format!("{sub}/scene_{i:04}.txt"),
            finest: format!("{sub}/scene_{i:04}.finest.txt"),
        };
        s.features.write(&dir.join(&entry.features))?;
        map.apply(&s.finest)?.write(&dir.join(&entry.labels))?;
        s.finest.write(&dir.join(&entry.finest))?;
        written.extend([&entry.features, &entry.labels, &entry.finest].map(PathBuf::from));
        manifest.scenes.push(entry);
    }
    let name = format!("{sub}.json");
    write_json(&dir.join(&name), &manifest)?;
    written.push(PathBuf::from(name));
    Ok(written)
}

/// Writes every scene and manifest below `dir`; returns the written paths
/// relative to `dir` in a fixed order.
pub fn write_dataset(dir: &Path, seq: &TaskSequence, bench: &Benchmark) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    seq.save(&dir.join("sequence.json"))?;
    let mut written = vec![PathBuf::from("sequence.json")];
    for (t, scenes) in bench.tasks.iter().enumerate() {
        written.extend(write_scenes(dir, &format!("task_{t}"), t, scenes, &seq.projection_map(t)?)?);
    }
    written.extend(write_scenes(dir, "eval", seq.last_task(), &bench.eval, &seq.final_eval_map())?);
    Ok(written)
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("manifest", format!("{}: {e}", path.display())))
}

fn read_scenes(dir: &Path, manifest: &Manifest, map: &ClassMap, what: &str) -> Result<Vec<Scene>> {
    manifest
        .scenes
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let features = FeatureGrid::read(&dir.join(&entry.features))?;
            let finest = LabelGrid::read(&dir.join(&entry.finest))?;
            let labels = LabelGrid::read(&dir.join(&entry.labels))?;
            if (features.height(), features.width()) != (finest.height(), finest.width()) {
                return Err(Error::Data(format!("{what}, scene {i}: feature and label grids differ in size")));
            }
            let expected = map
                .apply(&finest)
                .map_err(|e| Error::Data(format!("{what}, scene {i}: {e}")))?;
            if labels != expected {
                return Err(Error::Data(format!(
                    "{what}, scene {i}: labels do not match the projected finest labels"
                )));
            }
            Ok(Scene { features, finest })
        })
        .collect()
}

/// Reads a dataset written by [`write_dataset`], checking that stored labels
/// agree with the sequence.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let sequence = TaskSequence::load(&dir.join("sequence.json"))?;
    sequence.ensure_valid()?;
    let mut tasks = Vec::with_capacity(sequence.num_tasks());
    for t in 0..sequence.num_tasks() {
        let manifest = read_manifest(&dir.join(format!("task_{t}.json")))?;
        if manifest.task != t {
            return Err(Error::Data(format!("task {t}: manifest declares task {}", manifest.task)));
        }
        if manifest.scenes.is_empty() {
            return Err(Error::EmptyDataset(t));
        }
        tasks.push(read_scenes(dir, &manifest, &sequence.projection_map(t)?, &format!("task {t}"))?);
    }
    let eval_manifest = read_manifest(&dir.join("eval.json"))?;
    let eval = read_scenes(dir, &eval_manifest, &sequence.final_eval_map(), "eval")?;
    let d = tasks[0][0].features.d_in();
    if tasks.iter().flatten().chain(&eval).any(|s| s.features.d_in() != d) {
        return Err(Error::Data("scenes disagree on the feature dimension".into()));
    }
    Ok(Dataset {
        sequence,
        benchmark: Benchmark { tasks, eval },
    })
}
