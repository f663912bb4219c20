//! Training crops drawn from labelled maps.
//!
//! Each map contributes a fixed set of base crops (drawn once per build) and
//! a fixed list of dihedral variants per crop. The training examples are the
//! variants; they are materialized on demand from the stored base crop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    rasterize_occupancy, rasterize_stops, rasterize_velocity, GridGeometry, StopParams,
    TrajectorySet,
};
use crate::mapgrid::{
    augment, choose_augmentations, normalize_target, sample_crops, CropPair, ScalarGrid,
    ScalePolicy, SemanticMap, DEFAULT_RESOLUTION,
};
use crate::model::TargetKind;
use crate::seed;

/// A semantic map with its raw ground-truth grids.
#[derive(Clone, Debug, PartialEq)]
pub struct MapEntry {
    pub name: String,
    pub map: SemanticMap,
    /// Sample counts per cell.
    pub occupancy: ScalarGrid,
    /// Stop-event counts per cell.
    pub stops: ScalarGrid,
    /// Mean speed per cell in m/s, zero where no agent was observed.
    pub velocity: ScalarGrid,
}

impl MapEntry {
    /// Rasterizes trajectories onto the map's own grid.
    pub fn from_trajectories(
        name: impl Into<String>,
        map: SemanticMap,
        traj: &TrajectorySet,
        stops: &StopParams,
    ) -> Result<Self> {
        let geom = GridGeometry::of_map(&map);
        let occupancy = rasterize_occupancy(traj, &geom).counts;
        let stop_grid = rasterize_stops(traj, &geom, stops)?.counts;
        let velocity = rasterize_velocity(traj, &geom).mean_speed;
        Ok(MapEntry {
            name: name.into(),
            map,
            occupancy,
            stops: stop_grid,
            velocity,
        })
    }

    pub fn ground_truth(&self, kind: TargetKind) -> &ScalarGrid {
        match kind {
            TargetKind::Occupancy => &self.occupancy,
            TargetKind::Stops => &self.stops,
            TargetKind::Velocity => &self.velocity,
        }
    }
}

/// Distributions are scaled by crop area over total mass, speeds by their
/// maximum.
pub fn scale_policy(kind: TargetKind, crop_size: usize) -> ScalePolicy {
    match kind {
        TargetKind::Occupancy | TargetKind::Stops => ScalePolicy::MassDensity { crop_size },
        TargetKind::Velocity => ScalePolicy::MaxNormalized,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub crop_size: usize,
    pub crops_per_map: usize,
    pub augmentations: usize,
    pub resolution: f64,
    pub targets: Vec<TargetKind>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            crop_size: 64,
            crops_per_map: 500,
            augmentations: 5,
            resolution: DEFAULT_RESOLUTION,
            targets: vec![TargetKind::Occupancy],
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crops_per_map == 0 {
            return Err(Error::Config("crop size and crops per map must be positive".into()));
        }
        if !(1..=7).contains(&self.augmentations) {
            return Err(Error::Config(format!(
                "augmentations must be in 1..=7, got {}",
                self.augmentations
            )));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::Config(format!("invalid resolution {}", self.resolution)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("at least one target is required".into()));
        }
        Ok(())
    }
}

/// Crops of one map.
#[derive(Clone, Debug, PartialEq)]
pub struct MapCrops {
    pub name: String,
    pub base: Vec<CropPair>,
    /// Transform ids per base crop.
    pub variants: Vec<Vec<u8>>,
    /// Factor applied to each raw target (`target = raw · scale`).
    pub scales: Vec<f64>,
    /// Targets whose ground truth had no mass on this map.
    pub degenerate: Vec<bool>,
    /// Largest raw value per target, used to restore speed units.
    pub raw_max: Vec<f64>,
}

impl MapCrops {
    pub fn training_count(&self) -> usize {
        self.variants.iter().map(Vec::len).sum()
    }
}

/// Index of one training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub map: usize,
    pub crop: usize,
    pub variant: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub maps: Vec<MapCrops>,
}

impl Dataset {
    /// Map `i` draws its crops from stream `("crops", i)` and its transform
    /// ids from `("augment", i)` under the configured root seed.
    pub fn build(entries: &[MapEntry], config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let maps = entries
            .iter()
            .enumerate()
            .map(|(i, e)| build_map(i, e, config))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            config: config.clone(),
            maps,
        })
    }

    /// Every training example of the listed maps, in map, crop, variant order.
    pub fn samples(&self, maps: &[usize]) -> Vec<SampleRef> {
        maps.iter()
            .flat_map(|&m| {
                self.maps[m].variants.iter().enumerate().flat_map(move |(c, v)| {
                    (0..v.len()).map(move |variant| SampleRef {
                        map: m,
                        crop: c,
                        variant,
                    })
                })
            })
            .collect()
    }

    pub fn get(&self, s: SampleRef) -> Result<CropPair> {
        let m = self
            .maps
            .get(s.map)
            .ok_or_else(|| Error::Contract(format!("no map {}", s.map)))?;
        let base = m
            .base
            .get(s.crop)
            .ok_or_else(|| Error::Contract(format!("map {} has no crop {}", s.map, s.crop)))?;
        let id = m.variants[s.crop]
            .get(s.variant)
            .ok_or_else(|| Error::Contract(format!("crop has no variant {}", s.variant)))?;
        augment(base, *id)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            config: self.config.clone(),
            maps: self
                .maps
                .iter()
                .map(|m| MapManifest {
                    name: m.name.clone(),
                    crops: m.base.len(),
                    training_crops: m.training_count(),
                    target_scales: m.scales.clone(),
                    degenerate_targets: self
                        .config
                        .targets
                        .iter()
                        .zip(&m.degenerate)
                        .filter(|(_, &d)| d)
                        .map(|(t, _)| t.name().to_string())
                        .collect(),
                    origins: m.base.iter().map(|c| c.origin).collect(),
                    transforms: m.variants.clone(),
                })
                .collect(),
        }
    }
}

fn build_map(index: usize, entry: &MapEntry, config: &DatasetConfig) -> Result<MapCrops> {
    let map = &entry.map;
    if (map.resolution() - config.resolution).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "map `{}` has resolution {} m/px, dataset expects {}",
            entry.name,
            map.resolution(),
            config.resolution
        )));
    }
    let mut scaled = Vec::new();
    let mut raw_max = Vec::new();
    for &kind in &config.targets {
        let gt = entry.ground_truth(kind);
        scaled.push(normalize_target(gt, scale_policy(kind, config.crop_size))?);
        raw_max.push(gt.max());
    }
    let grids: Vec<&ScalarGrid> = scaled.iter().map(|s| &s.grid).collect();
    let mut rng = seed::stream(config.seed, "crops", index as u64);
    let base = sample_crops(map, &grids, config.crops_per_map, config.crop_size, &mut rng)
        .map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("map `{}`: {m}", entry.name)),
            other => other,
        })?;
    let mut rng = seed::stream(config.seed, "augment", index as u64);
    let variants = (0..base.len())
        .map(|_| choose_augmentations(&mut rng, config.augmentations))
        .collect::<Result<_>>()?;
    Ok(MapCrops {
        name: entry.name.clone(),
        base,
        variants,
        scales: scaled.iter().map(|s| s.scale).collect(),
        degenerate: scaled.iter().map(|s| s.degenerate).collect(),
        raw_max,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapManifest {
    pub name: String,
    pub crops: usize,
    pub training_crops: usize,
    pub target_scales: Vec<f64>,
    pub degenerate_targets: Vec<String>,
    pub origins: Vec<(usize, usize)>,
    pub transforms: Vec<Vec<u8>>,
}

/// What a dataset build produced; enough to redraw every crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub maps: Vec<MapManifest>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("bad dataset manifest: {e}")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Random access to training examples.
pub trait CropSource: Sync {
    fn len(&self) -> usize;
    fn crop(&self, index: usize) -> Result<CropPair>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CropSource for [CropPair] {
    fn len(&self) -> usize {
        <[CropPair]>::len(self)
    }

    fn crop(&self, index: usize) -> Result<CropPair> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("no crop {index}")))
    }
}

impl CropSource for Vec<CropPair> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn crop(&self, index: usize) -> Result<CropPair> {
        self.as_slice().crop(index)
    }
}

/// The training examples of a subset of maps.
pub struct MapSubset<'a> {
    pub dataset: &'a Dataset,
    pub refs: Vec<SampleRef>,
}

impl<'a> MapSubset<'a> {
    pub fn new(dataset: &'a Dataset, maps: &[usize]) -> Self {
        MapSubset {
            dataset,
            refs: dataset.samples(maps),
        }
    }
}

impl CropSource for MapSubset<'_> {
    fn len(&self) -> usize {
        self.refs.len()
    }

    fn crop(&self, index: usize) -> Result<CropPair> {
        let r = self
            .refs
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no sample {index}")))?;
        self.dataset.get(*r)
    }
}
