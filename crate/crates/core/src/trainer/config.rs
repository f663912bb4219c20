use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::mapgrid::DEFAULT_RESOLUTION;
use crate::model::{parse_targets, ArchConfig, Backbone, LossPolicy, TargetKind};

/// When the learning rate is recomputed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    /// Every optimizer step, at fractional epoch `e + s / steps_per_epoch`.
    PerStep,
    /// Once per epoch, at integer epochs.
    PerEpoch,
}

/// How the non-test maps are divided into training and validation data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitUnit {
    /// Whole maps go to validation.
    Map,
    /// Base crops (with all their variants) go to validation.
    Crop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub base_lr: f64,
    pub total_batch_size: usize,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Fraction of the non-test data used for validation.
    pub val_split: f64,
    pub split_by: SplitUnit,
    pub mask_ratio: f64,
    /// `None` picks [`LossPolicy::default_for`] the mask ratio.
    pub loss_policy: Option<LossPolicy>,
    pub lr_schedule: LrSchedule,
    pub backbone: Backbone,
    pub crop_size: usize,
    pub patch_size: usize,
    pub targets: Vec<TargetKind>,
    pub crops_per_map: usize,
    pub augmentations: usize,
    /// Sliding-window stride for full-map evaluation; `None` is half a crop.
    pub eval_stride: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_max: 100,
            base_lr: 1e-4,
            total_batch_size: 256,
            weight_decay: 0.3,
            warmup_epochs: 20,
            patience: 15,
            seed: 0,
            val_split: 0.2,
            split_by: SplitUnit::Map,
            mask_ratio: 0.0,
            loss_policy: None,
            lr_schedule: LrSchedule::PerStep,
            backbone: Backbone::Desk,
            crop_size: 64,
            patch_size: 8,
            targets: vec![TargetKind::Occupancy],
            crops_per_map: 500,
            augmentations: 5,
            eval_stride: None,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in canonical order.
pub const TRAIN_KEYS: [&str; 20] = [
    "epochs_max",
    "base_lr",
    "total_batch_size",
    "weight_decay",
    "warmup_epochs",
    "patience",
    "seed",
    "val_split",
    "split_by",
    "mask_ratio",
    "loss_policy",
    "lr_schedule",
    "backbone",
    "crop_size",
    "patch_size",
    "targets",
    "crops_per_map",
    "augmentations",
    "eval_stride",
    "resolution",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "epochs_max" => self.epochs_max = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "total_batch_size" => self.total_batch_size = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "val_split" => self.val_split = parse(key, v)?,
            "split_by" => {
                self.split_by = match v {
                    "map" => SplitUnit::Map,
                    "crop" => SplitUnit::Crop,
                    _ => return Err(Error::Config(format!("split_by must be map or crop, got `{v}`"))),
                }
            }
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "loss_policy" => {
                self.loss_policy = match v {
                    "auto" => None,
                    "all" => Some(LossPolicy::AllPatches),
                    "masked" => Some(LossPolicy::MaskedOnly),
                    _ => {
                        return Err(Error::Config(format!(
                            "loss_policy must be auto, all or masked, got `{v}`"
                        )))
                    }
                }
            }
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "step" => LrSchedule::PerStep,
                    "epoch" => LrSchedule::PerEpoch,
                    _ => {
                        return Err(Error::Config(format!(
                            "lr_schedule must be step or epoch, got `{v}`"
                        )))
                    }
                }
            }
            "backbone" => self.backbone = v.parse()?,
            "crop_size" => self.crop_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "targets" => self.targets = parse_targets(v)?,
            "crops_per_map" => self.crops_per_map = parse(key, v)?,
            "augmentations" => self.augmentations = parse(key, v)?,
            "eval_stride" => {
                self.eval_stride = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "resolution" => {
                let r: f64 = parse(key, v)?;
                if (r - DEFAULT_RESOLUTION).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "maps are rasterized at {DEFAULT_RESOLUTION} m/px, got {r}"
                    )));
                }
            }
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
            })?;
            let k = k.trim();
            if seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_kind(&e))))?;
            seen.push(k.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse_text(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_kind(&e))))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs_max == 0 {
            return bad("epochs_max must be positive".into());
        }
        if self.warmup_epochs >= self.epochs_max {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs_max ({})",
                self.warmup_epochs, self.epochs_max
            ));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.val_split > 0.0 && self.val_split < 1.0) {
            return bad(format!("val_split {} outside (0, 1)", self.val_split));
        }
        if self.total_batch_size == 0 {
            return bad("total_batch_size must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("invalid base_lr {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("invalid weight_decay {}", self.weight_decay));
        }
        if self.eval_stride.is_some_and(|s| s == 0 || s > self.crop_size) {
            return bad(format!("eval_stride must be between 1 and crop_size ({})", self.crop_size));
        }
        self.arch().validate()?;
        self.dataset_config().validate()
    }

    pub fn arch(&self) -> ArchConfig {
        let mut arch = ArchConfig::preset(self.backbone);
        arch.crop_size = self.crop_size;
        arch.patch_size = self.patch_size;
        arch.mask_ratio = self.mask_ratio;
        arch.targets = self.targets.clone();
        arch
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            crop_size: self.crop_size,
            crops_per_map: self.crops_per_map,
            augmentations: self.augmentations,
            resolution: DEFAULT_RESOLUTION,
            targets: self.targets.clone(),
            seed: self.seed,
        }
    }

    pub fn loss_policy(&self) -> LossPolicy {
        self.loss_policy
            .unwrap_or_else(|| LossPolicy::default_for(self.mask_ratio))
    }

    pub fn eval_stride(&self) -> usize {
        self.eval_stride.unwrap_or((self.crop_size / 2).max(1))
    }

    /// Resolved values in [`TRAIN_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let targets: Vec<&str> = self.targets.iter().map(|t| t.name()).collect();
        let values = [
            self.epochs_max.to_string(),
            format!("{:?}", self.base_lr),
            self.total_batch_size.to_string(),
            format!("{:?}", self.weight_decay),
            self.warmup_epochs.to_string(),
            self.patience.to_string(),
            self.seed.to_string(),
            format!("{:?}", self.val_split),
            match self.split_by {
                SplitUnit::Map => "map",
                SplitUnit::Crop => "crop",
            }
            .to_string(),
            format!("{:?}", self.mask_ratio),
            match self.loss_policy {
                None => "auto",
                Some(LossPolicy::AllPatches) => "all",
                Some(LossPolicy::MaskedOnly) => "masked",
            }
            .to_string(),
            match self.lr_schedule {
                LrSchedule::PerStep => "step",
                LrSchedule::PerEpoch => "epoch",
            }
            .to_string(),
            self.backbone.to_string(),
            self.crop_size.to_string(),
            self.patch_size.to_string(),
            targets.join(","),
            self.crops_per_map.to_string(),
            self.augmentations.to_string(),
            self.eval_stride
                .map_or_else(|| "auto".to_string(), |s| s.to_string()),
            format!("{DEFAULT_RESOLUTION:?}"),
        ];
        TRAIN_KEYS.into_iter().zip(values).collect()
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Data(m) | Error::Contract(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::parse_text(&cfg.to_string()).unwrap(), cfg);
        let mut other = cfg.clone();
        other.mask_ratio = 0.75;
        other.loss_policy = Some(LossPolicy::AllPatches);
        other.targets = TargetKind::ALL.to_vec();
        other.eval_stride = Some(16);
        other.split_by = SplitUnit::Crop;
        other.lr_schedule = LrSchedule::PerEpoch;
        assert_eq!(TrainConfig::parse_text(&other.to_string()).unwrap(), other);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = TrainConfig::parse_text(
            "# desk run\nepochs_max = 10\nwarmup_epochs=2 # short\n\nbackbone = desk\ntargets = occupancy, stops\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs_max, 10);
        assert_eq!(cfg.warmup_epochs, 2);
        assert_eq!(cfg.targets, vec![TargetKind::Occupancy, TargetKind::Stops]);
        assert_eq!(cfg.base_lr, 1e-4);
    }

    #[test]
    fn rejects_bad_files() {
        for (text, needle) in [
            ("epochs = 3", "unknown training key `epochs`"),
            ("epochs_max = ten", "line 1"),
            ("seed = 1\nseed = 2", "duplicate"),
            ("warmup_epochs = 100", "warmup_epochs"),
            ("patience = 0", "patience"),
            ("val_split = 1.0", "val_split"),
            ("just words", "key = value"),
            ("resolution = 0.5", "m/px"),
        ] {
            let err = TrainConfig::parse_text(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}");
            assert!(err.to_string().contains(needle), "{text}: {err}");
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = TrainConfig::load("/nonexistent/run.cfg").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("/nonexistent/run.cfg"));
    }

    #[test]
    fn derived_views() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.eval_stride(), 32);
        assert_eq!(cfg.loss_policy(), LossPolicy::AllPatches);
        cfg.mask_ratio = 0.75;
        assert_eq!(cfg.loss_policy(), LossPolicy::MaskedOnly);
        assert_eq!(cfg.arch().mask_ratio, 0.75);
        assert_eq!(cfg.dataset_config().crops_per_map, 500);
    }
}
