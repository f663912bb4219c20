//! Optimization: AdamW under a warmup-cosine schedule, early stopping on the
//! validation loss, and leave-one-map-out cross-validation.

mod config;
mod cv;
mod optim;

pub use config::{LrSchedule, SplitUnit, TrainConfig, TRAIN_KEYS};
pub use cv::{
    cross_validate, fold_split, output_scales, split_maps, CvReport, FoldReport, FoldSplit, Summary,
    TargetScores,
};
pub use optim::{absolute_lr, adamw_step, lr_at, OptimizerState};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::dataset::CropSource;
use crate::error::{Error, Result};
use crate::mapgrid::CropPair;
use crate::model::{
    crop_tokens, forward_graph, loss_per_patch, target_tokens, ArchConfig, LossPolicy, MaskSpec,
    ModelWeights,
};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

/// Crops per gradient work item. Fixed so results do not depend on the
/// number of worker threads.
pub const MICRO_BATCH: usize = 8;

/// Stacked model inputs and targets for a group of crops.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// `[B·N × p²C]`
    pub tokens: Tensor<T>,
    /// One `[B·N × p²]` array per target head.
    pub targets: Vec<Tensor<T>>,
    pub size: usize,
}

pub fn make_batch<T: Scalar>(arch: &ArchConfig, crops: &[CropPair]) -> Result<Batch<T>> {
    let (n, p, s) = (arch.num_patches(), arch.patch_size, arch.crop_size);
    let mut tokens = Vec::with_capacity(crops.len() * n * arch.token_dim());
    let mut targets = vec![Vec::with_capacity(crops.len() * n * p * p); arch.targets.len()];
    for c in crops {
        if c.size() != s || c.input.width() != s {
            return Err(Error::Contract(format!(
                "crop is {}x{}, model expects {s}x{s}",
                c.input.height(),
                c.input.width()
            )));
        }
        if c.targets.len() != arch.targets.len() {
            return Err(Error::Contract(format!(
                "crop has {} targets, model predicts {}",
                c.targets.len(),
                arch.targets.len()
            )));
        }
        tokens.extend_from_slice(crop_tokens::<T>(&c.input, p, arch.in_channels)?.data());
        for (dst, t) in targets.iter_mut().zip(&c.targets) {
            dst.extend_from_slice(target_tokens::<T, f32>(t, s, p)?.data());
        }
    }
    let rows = crops.len() * n;
    Ok(Batch {
        tokens: Tensor::new(vec![rows, arch.token_dim()], tokens)?,
        targets: targets
            .into_iter()
            .map(|t| Tensor::new(vec![rows, p * p], t))
            .collect::<Result<_>>()?,
        size: crops.len(),
    })
}

/// Training objective on one batch: the per-target patch losses averaged
/// with equal weights.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    arch: &ArchConfig,
    vars: &[Var],
    batch: &Batch<T>,
    masks: &[MaskSpec],
    policy: LossPolicy,
) -> Result<Var> {
    let outs = forward_graph(g, arch, vars, &batch.tokens, masks)?;
    let mut total: Option<Var> = None;
    for (pred, target) in outs.into_iter().zip(&batch.targets) {
        let l = loss_per_patch(g, pred, target, masks, policy)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("model has no target heads".into()))?;
    Ok(if arch.targets.len() > 1 {
        g.scale(total, 1.0 / arch.targets.len() as f64)
    } else {
        total
    })
}

fn masks_for<R: rand::Rng>(arch: &ArchConfig, count: usize, rng: &mut R) -> Result<Vec<MaskSpec>> {
    (0..count)
        .map(|_| {
            if arch.mask_ratio > 0.0 {
                MaskSpec::sample(arch.num_patches(), arch.mask_ratio, rng)
            } else {
                Ok(MaskSpec::identity(arch.num_patches()))
            }
        })
        .collect()
}

fn load<S: CropSource + ?Sized>(source: &S, indices: &[usize]) -> Result<Vec<CropPair>> {
    indices.iter().map(|&i| source.crop(i)).collect()
}

/// Mean loss over `indices` and its gradient for every parameter.
/// Work is split into [`MICRO_BATCH`]-sized pieces and reduced in order.
pub fn loss_and_gradients<T: Scalar, S: CropSource + ?Sized>(
    weights: &ModelWeights<T>,
    source: &S,
    indices: &[usize],
    masks: &[MaskSpec],
    policy: LossPolicy,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if indices.is_empty() || masks.len() != indices.len() {
        return Err(Error::Contract(format!(
            "{} crops with {} masks",
            indices.len(),
            masks.len()
        )));
    }
    let arch = weights.arch();
    let parts: Vec<Result<(f64, Vec<Tensor<T>>)>> = indices
        .par_chunks(MICRO_BATCH)
        .zip(masks.par_chunks(MICRO_BATCH))
        .map(|(idx, m)| {
            let batch = make_batch::<T>(arch, &load(source, idx)?)?;
            let mut g = Graph::new();
            let vars = weights.bind(&mut g, true);
            let loss = batch_loss(&mut g, arch, &vars, &batch, m, policy)?;
            let mut grads = g.backward(loss)?;
            let w = idx.len() as f64;
            let value = g.value(loss).data()[0].as_f64() * w;
            let gw = T::of(w);
            Ok((value, vars.iter().map(|&v| grads.take(v).map(|x| x * gw)).collect()))
        })
        .collect();
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor<T>>> = None;
    for part in parts {
        let (value, grads) = part?;
        total += value;
        acc = Some(match acc {
            None => grads,
            Some(mut a) => {
                for (x, y) in a.iter_mut().zip(&grads) {
                    x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += *q);
                }
                a
            }
        });
    }
    let n = indices.len() as f64;
    let inv = T::of(1.0 / n);
    let grads = acc
        .unwrap_or_default()
        .into_iter()
        .map(|t| t.map(|x| x * inv))
        .collect();
    Ok((total / n, grads))
}

/// Mean loss over `indices` without gradients.
pub fn mean_loss<T: Scalar, S: CropSource + ?Sized>(
    weights: &ModelWeights<T>,
    source: &S,
    indices: &[usize],
    masks: &[MaskSpec],
    policy: LossPolicy,
) -> Result<f64> {
    if indices.is_empty() || masks.len() != indices.len() {
        return Err(Error::Contract(format!(
            "{} crops with {} masks",
            indices.len(),
            masks.len()
        )));
    }
    let arch = weights.arch();
    let parts: Vec<Result<f64>> = indices
        .par_chunks(MICRO_BATCH)
        .zip(masks.par_chunks(MICRO_BATCH))
        .map(|(idx, m)| {
            let batch = make_batch::<T>(arch, &load(source, idx)?)?;
            let mut g = Graph::new();
            let vars = weights.bind(&mut g, false);
            let loss = batch_loss(&mut g, arch, &vars, &batch, m, policy)?;
            Ok(g.value(loss).data()[0].as_f64() * idx.len() as f64)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / indices.len() as f64)
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Rate of the epoch's last optimizer step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for r in history {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", r.epoch, r.lr, r.train_loss, r.val_loss));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Wait,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to beat the best
/// validation loss strictly.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            waited: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.waited = 0;
            return Verdict::Improved;
        }
        self.waited += 1;
        if self.waited >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Wait
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    /// The epoch callback asked to stop.
    Callback,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Weights after the best validation epoch.
    pub weights: ModelWeights<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: u64,
    pub stop: StopReason,
}

pub fn train<T: Scalar, A: CropSource + ?Sized, B: CropSource + ?Sized>(
    init: ModelWeights<T>,
    train_set: &A,
    val_set: &B,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(init, train_set, val_set, cfg, |_| true)
}

/// [`train`] with a callback after each epoch; returning `false` stops.
///
/// Randomness: the epoch shuffle uses stream `("epoch", e)`, the masks of
/// global step `k` stream `("mask", k)` and the fixed validation masks
/// stream `("val-mask", 0)`, all under `cfg.seed`.
pub fn train_with<T: Scalar, A: CropSource + ?Sized, B: CropSource + ?Sized>(
    init: ModelWeights<T>,
    train_set: &A,
    val_set: &B,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty splits, got {} training and {} validation crops",
            train_set.len(),
            val_set.len()
        )));
    }
    let arch = init.arch().clone();
    if arch.mask_ratio != cfg.mask_ratio {
        return Err(Error::Config(format!(
            "weights were built for mask ratio {}, config asks for {}",
            arch.mask_ratio, cfg.mask_ratio
        )));
    }
    let policy = cfg.loss_policy();
    let n = train_set.len();
    let batch = cfg.total_batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let val_idx: Vec<usize> = (0..val_set.len()).collect();
    let val_masks = masks_for(&arch, val_idx.len(), &mut seed::stream(cfg.seed, "val-mask", 0))?;

    let mut weights = init;
    let mut best = weights.clone();
    let mut state = OptimizerState::new(weights.tensors());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 0..cfg.epochs_max {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::stream(cfg.seed, "epoch", epoch as u64));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for s in 0..steps_per_epoch {
            let idx = &order[s * batch..((s + 1) * batch).min(n)];
            let e = match cfg.lr_schedule {
                LrSchedule::PerStep => epoch as f64 + s as f64 / steps_per_epoch as f64,
                LrSchedule::PerEpoch => epoch as f64,
            };
            lr = lr_at(e, cfg);
            let masks = masks_for(&arch, idx.len(), &mut seed::stream(cfg.seed, "mask", state.step))?;
            let (loss, grads) = loss_and_gradients(&weights, train_set, idx, &masks, policy)?;
            loss_sum += loss * idx.len() as f64;
            let names = weights.names().to_vec();
            adamw_step(weights.tensors_mut(), &grads, &names, &mut state, lr, cfg.weight_decay)?;
        }
        let val_loss = mean_loss(&weights, val_set, &val_idx, &val_masks, policy)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n as f64,
            val_loss,
        };
        log::info!(
            "epoch {} lr {:.3e} train {:.6e} val {:.6e}",
            record.epoch,
            record.lr,
            record.train_loss,
            record.val_loss
        );
        let verdict = stopper.observe(record.epoch, val_loss);
        if verdict == Verdict::Improved {
            best = weights.clone();
        }
        let keep_going = on_epoch(&record);
        history.push(record);
        if verdict == Verdict::Stop {
            stop = StopReason::Patience;
            break;
        }
        if !keep_going {
            stop = StopReason::Callback;
            break;
        }
    }
    let best_epoch = stopper.best_epoch.ok_or_else(|| {
        Error::Data("validation loss was never finite; no best epoch".into())
    })?;
    Ok(TrainOutcome {
        weights: best,
        history,
        best_epoch,
        best_val_loss: stopper.best,
        steps: state.step,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapgrid::{SemanticClass, SemanticMap};
    use crate::model::{Backbone, TargetKind};
    use rand::Rng;

    #[test]
    fn patience_arithmetic() {
        let mut s = EarlyStopping::new(15);
        let losses: Vec<f64> = (1..=100)
            .map(|e| if e <= 3 { 10.0 - e as f64 } else { 7.0 })
            .collect();
        let mut stopped = None;
        for (i, &l) in losses.iter().enumerate() {
            if s.observe(i + 1, l) == Verdict::Stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(18));
        assert_eq!(s.best_epoch, Some(3));

        let mut s = EarlyStopping::new(15);
        for e in 1..=100 {
            assert_eq!(s.observe(e, 1.0 / e as f64), Verdict::Improved);
        }
        assert_eq!(s.best_epoch, Some(100));
    }

    #[test]
    fn nan_never_improves() {
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.observe(1, f64::NAN), Verdict::Wait);
        assert_eq!(s.observe(2, f64::NAN), Verdict::Stop);
        assert_eq!(s.best_epoch, None);
    }

    fn tiny_arch() -> ArchConfig {
        let mut arch = ArchConfig::preset(Backbone::Desk);
        arch.crop_size = 16;
        arch.patch_size = 4;
        arch.encoder.depth = 1;
        arch.encoder.dim = 16;
        arch.decoder.dim = 16;
        arch.encoder.heads = 2;
        arch.decoder.heads = 2;
        arch
    }

    fn tiny_config(arch: &ArchConfig) -> TrainConfig {
        TrainConfig {
            epochs_max: 6,
            warmup_epochs: 1,
            patience: 3,
            base_lr: 0.1,
            total_batch_size: 4,
            crop_size: arch.crop_size,
            patch_size: arch.patch_size,
            mask_ratio: arch.mask_ratio,
            targets: arch.targets.clone(),
            ..TrainConfig::default()
        }
    }

    fn crops(count: usize, size: usize, heads: usize, seed_v: u64) -> Vec<CropPair> {
        let mut rng = seed::stream(seed_v, "crops", 0);
        (0..count)
            .map(|_| {
                let cells = (0..size * size).map(|_| rng.random_range(0..3u8)).collect();
                let input = SemanticMap::new(size, size, 0.4, cells).unwrap();
                let target: Vec<f32> = input
                    .cells()
                    .iter()
                    .map(|&c| if c == SemanticClass::PedestrianArea.index() { 2.0 } else { 0.0 })
                    .collect();
                CropPair {
                    input,
                    targets: vec![target; heads],
                    origin: (0, 0),
                    transform_id: 0,
                }
            })
            .collect()
    }

    #[test]
    fn micro_batching_matches_single_graph() {
        let arch = tiny_arch();
        let w = ModelWeights::<f64>::init(&arch, &mut seed::stream(1, "init", 0)).unwrap();
        let data = crops(11, 16, 1, 2);
        let idx: Vec<usize> = (0..11).collect();
        let masks = vec![MaskSpec::identity(arch.num_patches()); 11];
        let (loss, grads) =
            loss_and_gradients(&w, &data, &idx, &masks, LossPolicy::AllPatches).unwrap();
        let batch = make_batch::<f64>(&arch, &data).unwrap();
        let mut g = Graph::new();
        let vars = w.bind(&mut g, true);
        let l = batch_loss(&mut g, &arch, &vars, &batch, &masks, LossPolicy::AllPatches).unwrap();
        let gr = g.backward(l).unwrap();
        assert!((g.value(l).data()[0] - loss).abs() < 1e-12);
        for (v, want) in vars.iter().zip(&grads) {
            assert!(gr.wrt(*v).max_abs_diff(want).unwrap() < 1e-12);
        }
        let v = mean_loss(&w, &data, &idx, &masks, LossPolicy::AllPatches).unwrap();
        assert!((v - loss).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let mut arch = tiny_arch();
        arch.targets = vec![TargetKind::Occupancy, TargetKind::Stops];
        arch.mask_ratio = 0.5;
        let cfg = tiny_config(&arch);
        let data = crops(10, 16, 2, 3);
        let run = || {
            let w = ModelWeights::<f64>::init(&arch, &mut seed::stream(4, "init", 0)).unwrap();
            train(w, &data, &data, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.steps, 6 * 3);
        let first = a.history[0].val_loss;
        assert!(a.best_val_loss < first, "{:?}", a.history);
        let best_row = &a.history[a.best_epoch - 1];
        assert_eq!(best_row.val_loss, a.best_val_loss);
        assert!(a.history.iter().all(|r| r.val_loss >= a.best_val_loss));
        let csv = history_csv(&a.history);
        assert!(csv.starts_with("epoch,lr,train_loss,val_loss\n1,"));
        assert_eq!(csv.lines().count(), a.history.len() + 1);
    }

    #[test]
    fn callback_and_empty_splits() {
        let arch = tiny_arch();
        let cfg = tiny_config(&arch);
        let data = crops(4, 16, 1, 5);
        let w = ModelWeights::<f32>::init(&arch, &mut seed::stream(4, "init", 0)).unwrap();
        let out = train_with(w.clone(), &data, &data, &cfg, |r| r.epoch < 2).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.stop, StopReason::Callback);
        let empty: Vec<CropPair> = Vec::new();
        assert!(matches!(train(w, &data, &empty, &cfg), Err(Error::Config(_))));
    }
}
