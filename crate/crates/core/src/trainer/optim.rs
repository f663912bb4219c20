use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `base_lr · total_batch_size / 256`.
pub fn absolute_lr(base_lr: f64, total_batch_size: usize) -> f64 {
    base_lr * total_batch_size as f64 / 256.0
}

/// Linear warmup from zero to the absolute rate, then a half cosine down to
/// zero at `epochs_max`.
pub fn lr_at(epoch: f64, cfg: &super::TrainConfig) -> f64 {
    let peak = absolute_lr(cfg.base_lr, cfg.total_batch_size);
    let warm = cfg.warmup_epochs as f64;
    let total = cfg.epochs_max as f64;
    let epoch = epoch.clamp(0.0, total);
    if epoch < warm {
        return peak * epoch / warm;
    }
    let t = (epoch - warm) / (total - warm);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moment estimates for every parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update. Decay is decoupled: each parameter is first scaled by
/// `1 − lr·wd`, then moved by the bias-corrected Adam direction. Nothing is
/// modified when any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment arrays",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim("adamw_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let shrink = 1.0 - lr * weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = T::of(b1 * mj.as_f64() + (1.0 - b1) * gj.as_f64());
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            let gj = gj.as_f64();
            *vj = T::of(b2 * vj.as_f64() + (1.0 - b2) * gj * gj);
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mj.as_f64() / c1;
            let vhat = vj.as_f64() / c2;
            *pj = T::of(pj.as_f64() * shrink - lr * mhat / (vhat.sqrt() + state.eps));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    #[test]
    fn absolute_lr_examples() {
        assert_eq!(absolute_lr(1e-4, 256), 1e-4);
        assert!((absolute_lr(1e-4, 512) - 2e-4).abs() < 1e-18);
        assert!((absolute_lr(1e-4, 64) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        for (e, want) in [(0.0, 0.0), (10.0, 5e-5), (20.0, 1e-4), (60.0, 5e-5), (100.0, 0.0)] {
            assert!((lr_at(e, &cfg) - want).abs() < 1e-12, "epoch {e}");
        }
        let left = lr_at(20.0 - 1e-9, &cfg);
        let right = lr_at(20.0 + 1e-9, &cfg);
        assert!((left - right).abs() < 1e-12);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let cfg = TrainConfig {
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0.0, &cfg), 1e-4);
    }

    fn scalar(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn zero_gradient_cases() {
        let names = vec!["w".to_string()];
        let mut p = vec![Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::zeros(vec![3])];
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &g, &names, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0, 0.5]);
        adamw_step(&mut p, &g, &names, &mut st, 0.1, 0.3).unwrap();
        for (a, b) in p[0].data().iter().zip([1.0f64, -2.0, 0.5]) {
            assert!((a - 0.97 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let names = vec!["x".to_string()];
        let mut p = scalar(0.0);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &scalar(1.0), &names, &mut st, 0.01, 0.0).unwrap();
        assert!((p[0].data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut p = vec![Tensor::<f64>::scalar(1.0), Tensor::scalar(2.0)];
        let g = vec![Tensor::scalar(0.0), Tensor::scalar(f64::NAN)];
        let mut st = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &g, &names, &mut st, 0.1, 0.3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param, step: 1 } if param == "b"));
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(st.step, 0);
    }
}
