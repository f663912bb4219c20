use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{train, EpochRecord, SplitUnit, TrainConfig};
use crate::dataset::{Dataset, MapEntry, MapSubset, SampleRef};
use crate::error::{Error, Result};
use crate::inference::{predict_map, ReconstructionPlan};
use crate::mapgrid::ProbGrid;
use crate::metrics::{evaluate, kl_div, EmdMode, MetricReport, DEFAULT_EPS};
use crate::model::{ModelWeights, TargetKind};
use crate::seed;
use crate::tensor::Scalar;

/// Scores of one head on one held-out map.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetScores {
    pub target: TargetKind,
    pub report: MetricReport,
    /// KL from the ground truth to a uniform prediction.
    pub uniform_kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub held_out: String,
    pub train_maps: Vec<String>,
    pub val_maps: Vec<String>,
    /// Heads whose held-out ground truth has mass; others are skipped.
    pub scores: Vec<TargetScores>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Mean and population standard deviation across folds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub target: TargetKind,
    pub folds: usize,
    pub kl: (f64, f64),
    pub rkl: (f64, f64),
    pub emd: (f64, f64),
    pub uniform_kl: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub summary: Vec<Summary>,
}

impl CvReport {
    /// One line per fold and head: `map,target,kl,rkl,emd,uniform_kl,best_epoch`.
    pub fn folds_csv(&self) -> String {
        let mut out = String::from("map,target,kl,rkl,emd,uniform_kl,best_epoch\n");
        for f in &self.folds {
            for s in &f.scores {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    f.held_out, s.target, s.report.kl, s.report.rkl, s.report.emd, s.uniform_kl, f.best_epoch
                ));
            }
        }
        out
    }

    /// `target,folds,kl_mean,kl_std,rkl_mean,rkl_std,emd_mean,emd_std,uniform_kl_mean,uniform_kl_std`
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "target,folds,kl_mean,kl_std,rkl_mean,rkl_std,emd_mean,emd_std,uniform_kl_mean,uniform_kl_std\n",
        );
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.target, s.folds, s.kl.0, s.kl.1, s.rkl.0, s.rkl.1, s.emd.0, s.emd.1, s.uniform_kl.0, s.uniform_kl.1
            ));
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Divides `candidates` into training and validation parts. The validation
/// part holds `max(1, round(split·n))` items, drawn by shuffling with
/// stream `("split", fold)`.
pub fn split_maps(candidates: &[usize], split: f64, root: u64, fold: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = candidates.to_vec();
    order.shuffle(&mut seed::stream(root, "split", fold));
    let n_val = ((split * candidates.len() as f64).round() as usize).max(1);
    let mut val = order[..n_val.min(order.len())].to_vec();
    let mut tr = order[n_val.min(order.len())..].to_vec();
    val.sort_unstable();
    tr.sort_unstable();
    (tr, val)
}

/// Training and validation examples drawn from a set of maps.
pub struct FoldSplit<'a> {
    pub train: MapSubset<'a>,
    pub val: MapSubset<'a>,
    /// Maps contributing training examples.
    pub train_maps: Vec<usize>,
    /// Maps contributing validation examples.
    pub val_maps: Vec<usize>,
}

/// Splits the examples of `maps` by whole map or by base crop (with all its
/// variants), following `cfg.split_by` and [`split_maps`].
pub fn fold_split<'a>(dataset: &'a Dataset, maps: &[usize], cfg: &TrainConfig, fold: u64) -> FoldSplit<'a> {
    match cfg.split_by {
        SplitUnit::Map => {
            let (tr, va) = split_maps(maps, cfg.val_split, cfg.seed, fold);
            FoldSplit {
                train: MapSubset::new(dataset, &tr),
                val: MapSubset::new(dataset, &va),
                train_maps: tr,
                val_maps: va,
            }
        }
        SplitUnit::Crop => {
            let per = dataset.config.crops_per_map;
            let groups: Vec<usize> = (0..maps.len() * per).collect();
            let (tr, va) = split_maps(&groups, cfg.val_split, cfg.seed, fold);
            let refs = |ids: &[usize]| -> Vec<SampleRef> {
                ids.iter()
                    .flat_map(|&g| {
                        let (map, crop) = (maps[g / per], g % per);
                        (0..dataset.maps[map].variants[crop].len())
                            .map(move |variant| SampleRef { map, crop, variant })
                    })
                    .collect()
            };
            FoldSplit {
                train: MapSubset {
                    dataset,
                    refs: refs(&tr),
                },
                val: MapSubset {
                    dataset,
                    refs: refs(&va),
                },
                train_maps: maps.to_vec(),
                val_maps: maps.to_vec(),
            }
        }
    }
}

/// Output scale per head: speeds are restored with the mean maximum speed
/// of the training maps, distributions keep unit scale.
pub fn output_scales(dataset: &Dataset, maps: &[usize]) -> Vec<f64> {
    dataset
        .config
        .targets
        .iter()
        .enumerate()
        .map(|(t, kind)| {
            if *kind != TargetKind::Velocity {
                return 1.0;
            }
            let maxima: Vec<f64> = maps
                .iter()
                .map(|&m| &dataset.maps[m])
                .filter(|m| !m.degenerate[t])
                .map(|m| m.raw_max[t])
                .collect();
            if maxima.is_empty() {
                1.0
            } else {
                maxima.iter().sum::<f64>() / maxima.len() as f64
            }
        })
        .collect()
}

/// Leave-one-map-out evaluation. Each fold trains a fresh model (init
/// stream `("init", fold)`) on the remaining maps and scores the
/// reconstruction of the held-out map. Folds run in parallel.
pub fn cross_validate<T: Scalar>(
    entries: &[MapEntry],
    cfg: &TrainConfig,
    emd_mode: EmdMode,
) -> Result<CvReport> {
    cfg.validate()?;
    if entries.len() < 3 {
        return Err(Error::Config(format!(
            "cross-validation needs at least 3 maps, got {}",
            entries.len()
        )));
    }
    let dataset = Dataset::build(entries, &cfg.dataset_config())?;
    let folds = (0..entries.len())
        .into_par_iter()
        .map(|i| run_fold::<T>(entries, &dataset, cfg, emd_mode, i))
        .collect::<Result<Vec<_>>>()?;
    let summary = cfg
        .targets
        .iter()
        .filter_map(|&target| {
            let scores: Vec<&TargetScores> = folds
                .iter()
                .flat_map(|f| f.scores.iter().filter(|s| s.target == target))
                .collect();
            if scores.is_empty() {
                return None;
            }
            let col = |f: fn(&TargetScores) -> f64| mean_std(&scores.iter().map(|s| f(s)).collect::<Vec<_>>());
            Some(Summary {
                target,
                folds: scores.len(),
                kl: col(|s| s.report.kl),
                rkl: col(|s| s.report.rkl),
                emd: col(|s| s.report.emd),
                uniform_kl: col(|s| s.uniform_kl),
            })
        })
        .collect();
    Ok(CvReport { folds, summary })
}

fn run_fold<T: Scalar>(
    entries: &[MapEntry],
    dataset: &Dataset,
    cfg: &TrainConfig,
    emd_mode: EmdMode,
    fold: usize,
) -> Result<FoldReport> {
    let rest: Vec<usize> = (0..entries.len()).filter(|&m| m != fold).collect();
    let names = |ms: &[usize]| ms.iter().map(|&m| entries[m].name.clone()).collect::<Vec<_>>();
    let FoldSplit {
        train: train_set,
        val: val_set,
        train_maps,
        val_maps,
    } = fold_split(dataset, &rest, cfg, fold as u64);
    log::info!(
        "fold {fold}: held out `{}`, {} training and {} validation crops",
        entries[fold].name,
        train_set.refs.len(),
        val_set.refs.len()
    );
    let mut init = ModelWeights::<T>::init(&cfg.arch(), &mut seed::stream(cfg.seed, "init", fold as u64))?;
    init.set_output_scales(output_scales(dataset, &train_maps))?;
    let outcome = train(init, &train_set, &val_set, cfg)?;

    let entry = &entries[fold];
    let plan = ReconstructionPlan::sliding(
        entry.map.height(),
        entry.map.width(),
        cfg.crop_size,
        cfg.eval_stride(),
    )?;
    let heads = predict_map(&outcome.weights, &entry.map, &plan)?;
    let mut scores = Vec::new();
    for head in &heads {
        let Some(gt) = entry.ground_truth(head.target).to_distribution() else {
            log::warn!(
                "map `{}` has no {} ground truth; skipping that head",
                entry.name,
                head.target
            );
            continue;
        };
        let report = evaluate(&gt, &head.mean, DEFAULT_EPS, emd_mode)?;
        let uniform = ProbGrid::uniform(gt.height(), gt.width());
        scores.push(TargetScores {
            target: head.target,
            uniform_kl: kl_div(&gt, &uniform, DEFAULT_EPS)?,
            report,
        });
    }
    Ok(FoldReport {
        held_out: entry.name.clone(),
        train_maps: names(&train_maps),
        val_maps: names(&val_maps),
        scores,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
    })
}
