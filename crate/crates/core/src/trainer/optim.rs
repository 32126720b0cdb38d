use crate::config::TrainConfig;
use crate::model::Params;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Linear warmup from 0 to `peak_lr` over the first
/// `warmup_fraction * total_steps` steps, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, config: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = config.warmup_fraction * total;
    if step < warmup {
        config.peak_lr * (step / warmup)
    } else {
        config.peak_lr * ((total - step) / (total - warmup))
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment buffers mirroring the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    /// Number of applied updates.
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }

    pub fn check_shapes(&self, params: &Params<T>) -> Result<()> {
        if self.first_moment.len() != params.len() || self.second_moment.len() != params.len() {
            return Err(Error::dim("optimizer state", params.len(), self.first_moment.len()));
        }
        for ((p, m), v) in params.tensors().iter().zip(&self.first_moment).zip(&self.second_moment) {
            if p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(Error::dim("optimizer moment", format!("{:?}", p.shape()), format!("{:?} / {:?}", m.shape(), v.shape())));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Returns `false` and leaves everything
/// untouched when any gradient entry is not finite.
pub fn adam_step<T: Real>(params: &mut Params<T>, grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<bool> {
    state.check_shapes(params)?;
    if grads.len() != params.len() {
        return Err(Error::dim("adam gradients", params.len(), grads.len()));
    }
    for (name, (p, g)) in params.names().iter().zip(params.tensors().iter().zip(grads)) {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam gradient shape", format!("{name} {:?}", p.shape()), format!("{:?}", g.shape())));
        }
        if let Some(i) = g.data().iter().position(|v| !v.f64().is_finite()) {
            log::warn!("rejected optimizer step {}: non-finite gradient in {name}[{i}]", state.step + 1);
            return Ok(false);
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].f64();
            let mj = b1 * m[j].f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].f64() + (1.0 - b2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            *x = T::of(x.f64() - lr * (mj / c1) / ((vj / c2).sqrt() + eps));
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_at(0, 1000, &c), 0.0);
        assert_eq!(lr_at(100, 1000, &c), 2e-4);
        assert_eq!(lr_at(1000, 1000, &c), 0.0);
        assert_eq!(lr_at(50, 1000, &c), 1e-4);
        assert_eq!(lr_at(550, 1000, &c), 1e-4);
    }

    proptest! {
        #[test]
        fn schedule_is_piecewise_linear(total in 10u64..5000, frac in 0.01f64..0.99) {
            let c = TrainConfig { warmup_fraction: frac, ..cfg() };
            let mut max = 0.0f64;
            for s in 0..=total {
                let lr = lr_at(s, total, &c);
                prop_assert!(lr >= 0.0 && lr <= c.peak_lr);
                max = max.max(lr);
                let w = frac * total as f64;
                let expected = if (s as f64) < w { c.peak_lr * s as f64 / w } else { c.peak_lr * (total - s) as f64 / (total as f64 - w) };
                prop_assert!((lr - expected).abs() <= 1e-18);
            }
            // the peak is reached at the first step past the warmup boundary
            let first = (frac * total as f64).ceil() as u64;
            prop_assert!(max <= c.peak_lr);
            prop_assert!((lr_at(first, total, &c) - c.peak_lr).abs() <= c.peak_lr / (total as f64 * (1.0 - frac)) + 1e-18);
        }
    }

    fn params(values: Vec<f64>) -> Params<f64> {
        Params::from_named(vec![("w".into(), Tensor::from_f64(&[values.len()], &values).unwrap())]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, 1e-3).unwrap());
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params(vec![0.5]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::from_f64(&[1], &[1.0]).unwrap()], &mut s, 1e-3).unwrap();
        // m_hat = 1, v_hat = 1: update = lr / (1 + eps)
        let moved = 0.5 - p.tensors()[0].data()[0];
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{moved}");
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let n = 7;
        let mut p = params((0..n).map(|i| i as f64 * 0.3 - 1.0).collect());
        let mut s = AdamState::new(&p);
        let mut x: Vec<f64> = p.tensors()[0].data().to_vec();
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        for t in 1..=100 {
            let g: Vec<f64> = (0..n).map(|i| ((t * (i + 1)) as f64 * 0.37).sin() + x[i] * 0.1).collect();
            let lr = 1e-2 / (1.0 + t as f64 * 0.01);
            adam_step(&mut p, &[Tensor::from_f64(&[n], &g).unwrap()], &mut s, lr).unwrap();
            for i in 0..n {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
                let vh = v[i] / (1.0 - 0.999f64.powi(t as i32));
                x[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in p.tensors()[0].data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(s.step, 100);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = params(vec![1.0, 2.0]);
        let mut s = AdamState::new(&p);
        let before = (p.clone(), s.clone());
        let ok = adam_step(&mut p, &[Tensor::from_f64(&[2], &[0.1, f64::NAN]).unwrap()], &mut s, 1e-3).unwrap();
        assert!(!ok);
        assert_eq!((p, s), before);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = params(vec![1.0, 2.0]);
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, 1e-3).is_err());
    }
}
