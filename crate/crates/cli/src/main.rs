use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use motion_prior::dataset::{Dataset, MapEntry};
use motion_prior::inference::{
    export_heatmap, predict_map, weight_checksum, ExportMeta, HeatmapFormat, ReconstructionPlan,
};
use motion_prior::ingest::{generate_synthetic_scene, trajectories_to_csv, SceneConfig, StopParams};
use motion_prior::mapgrid::{read_pgrid, read_smap, write_pgrid, write_smap};
use motion_prior::metrics::{evaluate, EmdMode, MetricReport};
use motion_prior::model::{read_checkpoint, write_checkpoint, ModelWeights, TargetKind};
use motion_prior::scenes::{load_scene_list, SceneList, SceneSpec};
use motion_prior::tensor::Scalar;
use motion_prior::trainer::{
    cross_validate, fold_split, history_csv, output_scales, train, TrainConfig,
};
use motion_prior::{seed, Error, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "motion-prior", version, about = "Human motion priors from semantic maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize the scenes of a scene list and sample the training crops.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        stops: StopFlags,
        /// Scene list (JSON).
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Generate synthetic scenes with simulated walkers.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stops: StopFlags,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 150)]
        walkers: usize,
    },
    /// Train one model on the scenes of a scene list.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        stops: StopFlags,
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Leave-one-map-out cross-validation.
    CrossValidate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        stops: StopFlags,
        #[arg(long)]
        scenes: PathBuf,
        /// auto, exact, downsample:K or entropic:LAMBDA:ITERS
        #[arg(long, default_value = "auto")]
        emd_mode: String,
    },
    /// Predict full-map priors with trained weights.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// Sliding-window stride (default: half the crop size).
        #[arg(long)]
        stride: Option<usize>,
        /// Use this many random crops instead of a sliding window.
        #[arg(long)]
        random_crops: Option<usize>,
        /// pgrid or pgm16
        #[arg(long, default_value = "pgrid")]
        format: String,
    },
    /// Compare a ground-truth grid with a prediction.
    Metrics {
        #[command(flatten)]
        common: Common,
        ground_truth: PathBuf,
        prediction: PathBuf,
        #[arg(long, default_value_t = motion_prior::metrics::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value = "auto")]
        emd_mode: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Args)]
struct Common {
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

/// Overrides for [`TrainConfig`] fields, named after them.
#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs_max: Option<String>,
    #[arg(long)]
    base_lr: Option<String>,
    #[arg(long)]
    total_batch_size: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    warmup_epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    val_split: Option<String>,
    /// map or crop
    #[arg(long)]
    split_by: Option<String>,
    #[arg(long)]
    mask_ratio: Option<String>,
    /// auto, all or masked
    #[arg(long)]
    loss_policy: Option<String>,
    /// step or epoch
    #[arg(long)]
    lr_schedule: Option<String>,
    /// desk, base, large or huge
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    crop_size: Option<String>,
    #[arg(long)]
    patch_size: Option<String>,
    /// Comma-separated: occupancy, stops, velocity
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    crops_per_map: Option<String>,
    #[arg(long)]
    augmentations: Option<String>,
    #[arg(long)]
    eval_stride: Option<String>,
    #[arg(long)]
    resolution: Option<String>,
}

impl TrainFlags {
    fn pairs(&self) -> [(&'static str, &Option<String>); 19] {
        [
            ("epochs_max", &self.epochs_max),
            ("base_lr", &self.base_lr),
            ("total_batch_size", &self.total_batch_size),
            ("weight_decay", &self.weight_decay),
            ("warmup_epochs", &self.warmup_epochs),
            ("patience", &self.patience),
            ("val_split", &self.val_split),
            ("split_by", &self.split_by),
            ("mask_ratio", &self.mask_ratio),
            ("loss_policy", &self.loss_policy),
            ("lr_schedule", &self.lr_schedule),
            ("backbone", &self.backbone),
            ("crop_size", &self.crop_size),
            ("patch_size", &self.patch_size),
            ("targets", &self.targets),
            ("crops_per_map", &self.crops_per_map),
            ("augmentations", &self.augmentations),
            ("eval_stride", &self.eval_stride),
            ("resolution", &self.resolution),
        ]
    }
}

#[derive(Args)]
struct StopFlags {
    /// Speed below which a walker counts as stationary (m/s).
    #[arg(long, default_value_t = StopParams::default().v_stop)]
    v_stop: f64,
    /// Minimum stationary duration (s).
    #[arg(long, default_value_t = StopParams::default().t_stop)]
    t_stop: f64,
}

impl StopFlags {
    fn params(&self) -> Result<StopParams> {
        if !(self.v_stop >= 0.0 && self.v_stop.is_finite() && self.t_stop >= 0.0 && self.t_stop.is_finite()) {
            return Err(Error::Config(format!(
                "invalid stop thresholds v_stop={} t_stop={}",
                self.v_stop, self.t_stop
            )));
        }
        Ok(StopParams {
            v_stop: self.v_stop,
            t_stop: self.t_stop,
        })
    }

    fn pairs(&self) -> Vec<(String, String)> {
        vec![
            ("v_stop".into(), format!("{:?}", self.v_stop)),
            ("t_stop".into(), format!("{:?}", self.t_stop)),
        ]
    }
}

/// File precedence: defaults, then `--config`, then flags.
fn resolve_config(common: &Common, flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for (key, value) in flags.pairs() {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Collects outputs and writes `manifest.json` into the output directory.
struct Run {
    command: &'static str,
    out: PathBuf,
    seed: u64,
    precision: Precision,
    config: Vec<(String, String)>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
    extra: serde_json::Map<String, Value>,
}

impl Run {
    fn new(command: &'static str, common: &Common, seed: u64) -> Result<Self> {
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        if let Some(c) = &common.config {
            if !c.exists() {
                return Err(Error::Config(format!("config file {} does not exist", c.display())));
            }
        }
        Ok(Run {
            command,
            out,
            seed,
            precision: common.precision,
            config: Vec::new(),
            inputs: common.config.iter().cloned().collect(),
            outputs: Vec::new(),
            extra: serde_json::Map::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    /// Records a file that a library call already wrote under `out`.
    fn wrote(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.out).unwrap_or(path);
        self.outputs.push(rel.to_string_lossy().replace('\\', "/"));
    }

    fn finish(mut self) -> Result<()> {
        let mut inputs = Vec::new();
        for p in &self.inputs {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            inputs.push(json!({
                "path": p.display().to_string(),
                "crc32": format!("{:08x}", crc32fast::hash(&bytes)),
            }));
        }
        self.outputs.sort();
        self.outputs.dedup();
        let config: serde_json::Map<String, Value> = self
            .config
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        let manifest = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "precision": self.precision.name(),
            "config": config,
            "inputs": inputs,
            "outputs": self.outputs,
            "details": self.extra,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
        let path = self.path("manifest.json");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn gen_synth(common: &Common, stops: &StopFlags, count: usize, height: usize, width: usize, walkers: usize) -> Result<()> {
    let root = common.seed.unwrap_or(0);
    let mut run = Run::new("gen-synth", common, root)?;
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    let params = stops.params()?;
    let mut scenes = Vec::with_capacity(count);
    let mut unplaced = Vec::with_capacity(count);
    for i in 0..count {
        let cfg = SceneConfig {
            height,
            width,
            walkers,
            seed: seed::derive(root, "scene", i as u64),
            ..SceneConfig::default()
        };
        let scene = generate_synthetic_scene(&cfg)?;
        let name = format!("scene{i}");
        log::info!(
            "{name}: {} trajectories, {} walkers unplaced",
            scene.trajectories.agents.len(),
            scene.unplaced
        );
        unplaced.push(scene.unplaced);
        let entry = MapEntry::from_trajectories(&name, scene.map.clone(), &scene.trajectories, &params)?;
        let dir = run.path(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let map_rel = format!("{name}/map.smap");
        let traj_rel = format!("{name}/trajectories.csv");
        write_smap(run.path(&map_rel), &scene.map)?;
        run.wrote(&run.path(&map_rel));
        run.write(&traj_rel, trajectories_to_csv(&scene.trajectories))?;
        for kind in [TargetKind::Occupancy, TargetKind::Stops, TargetKind::Velocity] {
            let rel = format!("{name}/{kind}.pgrid");
            write_pgrid(run.path(&rel), entry.ground_truth(kind))?;
            run.wrote(&run.path(&rel));
        }
        scenes.push(SceneSpec {
            name,
            map: map_rel.into(),
            trajectories: Some(traj_rel.into()),
            annotations: None,
            meters_per_source_px: None,
            fps: None,
            labels: vec![motion_prior::ingest::DEFAULT_LABEL.to_string()],
        });
    }
    run.write("scenes.json", SceneList { scenes }.to_json()? + "\n")?;
    run.config = vec![
        ("count".into(), count.to_string()),
        ("height".into(), height.to_string()),
        ("width".into(), width.to_string()),
        ("walkers".into(), walkers.to_string()),
    ];
    run.config.extend(stops.pairs());
    run.extra.insert("unplaced_walkers".into(), json!(unplaced));
    run.finish()
}

fn load_entries(run: &mut Run, scenes: &Path, stops: &StopFlags) -> Result<Vec<MapEntry>> {
    let loaded = load_scene_list(scenes, &stops.params()?)?;
    run.inputs.extend(loaded.inputs);
    Ok(loaded.entries)
}

fn config_pairs(cfg: &TrainConfig, stops: &StopFlags) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    pairs.extend(stops.pairs());
    pairs
}

fn build_dataset(common: &Common, flags: &TrainFlags, stops: &StopFlags, scenes: &Path) -> Result<()> {
    let cfg = resolve_config(common, flags)?;
    let mut run = Run::new("build-dataset", common, cfg.seed)?;
    run.config = config_pairs(&cfg, stops);
    let entries = load_entries(&mut run, scenes, stops)?;
    let dataset = Dataset::build(&entries, &cfg.dataset_config())?;
    for m in &dataset.maps {
        log::info!("{}: {} training crops", m.name, m.training_count());
    }
    run.write("dataset.json", dataset.manifest().to_json()? + "\n")?;
    run.finish()
}

fn train_cmd<T: Scalar>(common: &Common, flags: &TrainFlags, stops: &StopFlags, scenes: &Path) -> Result<()> {
    let cfg = resolve_config(common, flags)?;
    let mut run = Run::new("train", common, cfg.seed)?;
    run.config = config_pairs(&cfg, stops);
    let entries = load_entries(&mut run, scenes, stops)?;
    let dataset = Dataset::build(&entries, &cfg.dataset_config())?;
    let all: Vec<usize> = (0..entries.len()).collect();
    let split = fold_split(&dataset, &all, &cfg, 0);
    let mut init = ModelWeights::<T>::init(&cfg.arch(), &mut seed::stream(cfg.seed, "init", 0))?;
    init.set_output_scales(output_scales(&dataset, &split.train_maps))?;
    log::info!(
        "training on {} crops, validating on {} crops",
        split.train.refs.len(),
        split.val.refs.len()
    );
    let outcome = train(init, &split.train, &split.val, &cfg)?;
    log::info!(
        "best epoch {} with validation loss {:e} ({:?})",
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.stop
    );
    write_checkpoint(run.path("weights.ckpt"), &outcome.weights)?;
    run.wrote(&run.path("weights.ckpt"));
    run.write("history.csv", history_csv(&outcome.history))?;
    run.write("dataset.json", dataset.manifest().to_json()? + "\n")?;
    let names = |ms: &[usize]| ms.iter().map(|&m| entries[m].name.clone()).collect::<Vec<_>>();
    run.extra.insert("train_maps".into(), json!(names(&split.train_maps)));
    run.extra.insert("val_maps".into(), json!(names(&split.val_maps)));
    run.extra.insert("best_epoch".into(), json!(outcome.best_epoch));
    run.extra.insert("best_val_loss".into(), json!(outcome.best_val_loss));
    run.extra.insert("steps".into(), json!(outcome.steps));
    run.extra.insert("stop".into(), json!(format!("{:?}", outcome.stop)));
    run.extra.insert(
        "weight_crc32".into(),
        json!(format!("{:08x}", weight_checksum(&outcome.weights)?)),
    );
    run.finish()
}

fn cross_validate_cmd<T: Scalar>(
    common: &Common,
    flags: &TrainFlags,
    stops: &StopFlags,
    scenes: &Path,
    emd_mode: &str,
) -> Result<()> {
    let cfg = resolve_config(common, flags)?;
    let mode: EmdMode = emd_mode.parse()?;
    let mut run = Run::new("cross-validate", common, cfg.seed)?;
    run.config = config_pairs(&cfg, stops);
    run.config.push(("emd_mode".into(), mode.to_string()));
    let entries = load_entries(&mut run, scenes, stops)?;
    let report = cross_validate::<T>(&entries, &cfg, mode)?;
    for s in &report.summary {
        log::info!(
            "{}: KL {:.4} ± {:.4}, rKL {:.4} ± {:.4}, EMD {:.4} ± {:.4} (uniform KL {:.4})",
            s.target,
            s.kl.0,
            s.kl.1,
            s.rkl.0,
            s.rkl.1,
            s.emd.0,
            s.emd.1,
            s.uniform_kl.0
        );
    }
    run.write("cv_folds.csv", report.folds_csv())?;
    run.write("cv_summary.csv", report.summary_csv())?;
    for f in &report.folds {
        run.write(&format!("history_{}.csv", f.held_out), history_csv(&f.history))?;
    }
    let folds: Vec<Value> = report
        .folds
        .iter()
        .map(|f| json!({ "held_out": f.held_out, "train_maps": f.train_maps, "val_maps": f.val_maps }))
        .collect();
    run.extra.insert("folds".into(), json!(folds));
    run.finish()
}

fn predict_cmd<T: Scalar>(
    common: &Common,
    weights_path: &Path,
    map_path: &Path,
    stride: Option<usize>,
    random_crops: Option<usize>,
    format: &str,
) -> Result<()> {
    let root = common.seed.unwrap_or(0);
    let format: HeatmapFormat = format.parse()?;
    let mut run = Run::new("predict", common, root)?;
    let weights = read_checkpoint::<T>(weights_path)?;
    let map = read_smap(map_path)?;
    run.inputs.push(weights_path.to_path_buf());
    run.inputs.push(map_path.to_path_buf());
    let size = weights.arch().crop_size;
    let plan = match random_crops {
        Some(n) => ReconstructionPlan::random(map.height(), map.width(), size, n, &mut seed::stream(root, "plan", 0))?,
        None => ReconstructionPlan::sliding(map.height(), map.width(), size, stride.unwrap_or(size / 2))?,
    };
    run.config = weights.arch().to_kv();
    run.config.push(("format".into(), format.to_string()));
    match random_crops {
        Some(n) => run.config.push(("random_crops".into(), n.to_string())),
        None => run
            .config
            .push(("stride".into(), plan.stride.unwrap_or(size / 2).to_string())),
    }
    log::info!("predicting {} crops", plan.origins.len());
    let checksum = weight_checksum(&weights)?;
    for head in predict_map(&weights, &map, &plan)? {
        let grid = match &head.distribution {
            Some(d) => d.as_grid().clone(),
            None => head.mean.clone(),
        };
        let meta = ExportMeta {
            stride: plan.stride,
            weight_checksum: Some(checksum),
            seed: random_crops.map(|_| root),
            extra: vec![
                ("target".into(), head.target.to_string()),
                ("pre_normalization_sum".into(), format!("{:?}", head.mass)),
            ],
        };
        let path = run.path(&format!("{}.{}", head.target, format.extension()));
        for p in export_heatmap(&grid, &path, format, &meta)? {
            run.wrote(&p);
        }
    }
    run.finish()
}

fn metrics_cmd(common: &Common, gt: &Path, pred: &Path, eps: f64, emd_mode: &str) -> Result<()> {
    let mode: EmdMode = emd_mode.parse()?;
    let truth = read_pgrid(gt)?
        .to_distribution()
        .ok_or_else(|| Error::Data(format!("{}: ground truth has no positive mass", gt.display())))?;
    let report: MetricReport = evaluate(&truth, &read_pgrid(pred)?, eps, mode)?;
    println!("{}", report.csv_line());
    if common.out.is_some() {
        let mut run = Run::new("metrics", common, common.seed.unwrap_or(0))?;
        run.inputs.extend([gt.to_path_buf(), pred.to_path_buf()]);
        run.config = vec![
            ("eps".into(), format!("{eps:e}")),
            ("emd_mode".into(), mode.to_string()),
        ];
        run.write(
            "metrics.csv",
            format!("{}\n{}\n", MetricReport::csv_header(), report.csv_line()),
        )?;
        run.finish()?;
    }
    Ok(())
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::BuildDataset {
            common,
            train,
            stops,
            scenes,
        } => build_dataset(common, train, stops, scenes),
        Command::GenSynth {
            common,
            stops,
            count,
            height,
            width,
            walkers,
        } => gen_synth(common, stops, *count, *height, *width, *walkers),
        Command::Train {
            common,
            train,
            stops,
            scenes,
        } => match common.precision {
            Precision::F32 => train_cmd::<f32>(common, train, stops, scenes),
            Precision::F64 => train_cmd::<f64>(common, train, stops, scenes),
        },
        Command::CrossValidate {
            common,
            train,
            stops,
            scenes,
            emd_mode,
        } => match common.precision {
            Precision::F32 => cross_validate_cmd::<f32>(common, train, stops, scenes, emd_mode),
            Precision::F64 => cross_validate_cmd::<f64>(common, train, stops, scenes, emd_mode),
        },
        Command::Predict {
            common,
            weights,
            map,
            stride,
            random_crops,
            format,
        } => match common.precision {
            Precision::F32 => predict_cmd::<f32>(common, weights, map, *stride, *random_crops, format),
            Precision::F64 => predict_cmd::<f64>(common, weights, map, *stride, *random_crops, format),
        },
        Command::Metrics {
            common,
            ground_truth,
            prediction,
            eps,
            emd_mode,
        } => metrics_cmd(common, ground_truth, prediction, *eps, emd_mode),
    }
}

fn common(command: &Command) -> &Common {
    match command {
        Command::BuildDataset { common, .. }
        | Command::GenSynth { common, .. }
        | Command::Train { common, .. }
        | Command::CrossValidate { common, .. }
        | Command::Predict { common, .. }
        | Command::Metrics { common, .. } => common,
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "[{}] {}", record.level(), record.args()))
        .init();
    if let Some(jobs) = common(&cli.command).jobs {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        if jobs == 0 || pool.is_err() {
            eprintln!("error: cannot start {jobs} worker threads");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
