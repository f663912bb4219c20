//! Scene lists: which semantic maps a run uses and where their trajectories
//! come from.
//!
//! ```json
//! { "scenes": [
//!     { "name": "plaza", "map": "plaza/map.smap", "trajectories": "plaza/trajectories.csv" },
//!     { "name": "hyang0", "map": "hyang0.smap", "annotations": "hyang0/annotations.txt",
//!       "meters_per_source_px": 0.0356, "fps": 29.97, "labels": ["Pedestrian"] }
//! ] }
//! ```
//! Relative paths are resolved against the directory holding the list.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::MapEntry;
use crate::error::{Error, Result};
use crate::ingest::{
    parse_sdd_annotations, parse_trajectories_csv, tracks_to_trajectories, StopParams,
    DEFAULT_LABEL,
};
use crate::mapgrid::read_smap;

fn default_labels() -> Vec<String> {
    vec![DEFAULT_LABEL.to_string()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub map: PathBuf,
    /// Metric trajectory table (see [`crate::ingest::parse_trajectories_csv`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<PathBuf>,
    /// SDD-style annotation file; needs `meters_per_source_px` and `fps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meters_per_source_px: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default = "default_labels")]
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneList {
    pub scenes: Vec<SceneSpec>,
}

impl SceneList {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Maps with rasterized ground truth, plus every file that was read.
#[derive(Clone, Debug)]
pub struct LoadedScenes {
    pub entries: Vec<MapEntry>,
    pub inputs: Vec<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_scene_list(path: impl AsRef<Path>, stops: &StopParams) -> Result<LoadedScenes> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let list: SceneList = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if list.scenes.is_empty() {
        return Err(Error::Config(format!("{}: scene list is empty", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut inputs = vec![path.to_path_buf()];
    let mut entries = Vec::with_capacity(list.scenes.len());
    for spec in &list.scenes {
        if entries.iter().any(|e: &MapEntry| e.name == spec.name) {
            return Err(Error::Config(format!("scene name `{}` is used twice", spec.name)));
        }
        let map_path = base.join(&spec.map);
        let map = read_smap(&map_path)?;
        inputs.push(map_path);
        let traj = match (&spec.trajectories, &spec.annotations) {
            (Some(t), None) => {
                let p = base.join(t);
                let set = parse_trajectories_csv(&read_text(&p)?)?;
                inputs.push(p);
                set
            }
            (None, Some(a)) => {
                let (Some(mpp), Some(fps)) = (spec.meters_per_source_px, spec.fps) else {
                    return Err(Error::Config(format!(
                        "scene `{}` uses annotations and needs meters_per_source_px and fps",
                        spec.name
                    )));
                };
                let p = base.join(a);
                let records = parse_sdd_annotations(&read_text(&p)?)?;
                inputs.push(p);
                tracks_to_trajectories(&records, mpp, fps, &spec.labels)?
            }
            _ => {
                return Err(Error::Config(format!(
                    "scene `{}` needs exactly one of `trajectories` or `annotations`",
                    spec.name
                )))
            }
        };
        entries.push(MapEntry::from_trajectories(&spec.name, map, &traj, stops)?);
    }
    Ok(LoadedScenes { entries, inputs })
}
