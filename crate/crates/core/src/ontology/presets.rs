//! Task sequences for the Cityscapes, PASCAL VOC and Mapillary Vistas
//! settings, shipped as JSON documents.

use super::TaskSequence;
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 7] = [
    "cs_ex1", "cs_ex2", "voc_ex1", "voc_ex2", "voc_ex3", "mv_ex1", "mv_ex2",
];

pub fn preset_json(name: &str) -> Option<&'static str> {
    Some(match name {
        "cs_ex1" => include_str!("../../presets/cs_ex1.json"),
        "cs_ex2" => include_str!("../../presets/cs_ex2.json"),
        "voc_ex1" => include_str!("../../presets/voc_ex1.json"),
        "voc_ex2" => include_str!("../../presets/voc_ex2.json"),
        "voc_ex3" => include_str!("../../presets/voc_ex3.json"),
        "mv_ex1" => include_str!("../../presets/mv_ex1.json"),
        "mv_ex2" => include_str!("../../presets/mv_ex2.json"),
        _ => return None,
    })
}

pub fn preset(name: &str) -> Result<TaskSequence> {
    let json = preset_json(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown preset `{name}`; valid presets: {}",
            PRESET_NAMES.join(", ")
        ))
    })?;
    Ok(TaskSequence::from_json(json)?.with_name(name))
}

/// Cityscapes settings train 50 epochs per task, the others 30.
pub fn default_epochs(name: &str) -> usize {
    if name.starts_with("cs_") {
        50
    } else {
        30
    }
}
