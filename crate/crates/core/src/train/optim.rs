//! Adam, global-norm gradient clipping, and the validation-driven
//! learning-rate halving schedule.

use crate::model::ModelParams;
use crate::tensor::Element;
use crate::{Error, Result};

/// First/second moment buffers, one pair per parameter tensor in canonical
/// order. Moments are kept in f64 regardless of the parameter element type.
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<E: Element>(params: &ModelParams<E>) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the gradients currently stored on the
/// parameter tensors. Zero gradients leave parameters untouched.
pub fn adam_step<E: Element>(
    params: &mut ModelParams<E>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let named = params.named_tensors_mut();
    if named.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "optimizer state holds {} tensors, model has {}",
            state.m.len(),
            named.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);

    for (idx, (name, t)) in named.into_iter().enumerate() {
        let grad = t
            .grad()
            .ok_or_else(|| Error::Invalid(format!("missing gradient for {name}")))?;
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        if grad.len() != m.len() {
            return Err(Error::Shape(format!(
                "gradient for {name} has {} values, moments have {}",
                grad.len(),
                m.len()
            )));
        }
        let data = t.data_mut();
        for i in 0..data.len() {
            let g = grad[i].to_f64();
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + state.eps);
            data[i] = E::from_f64(data[i].to_f64() - update);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_l2`; returns
/// the factor applied (1 when already within bounds). Direction is
/// preserved. A non-finite gradient is an error naming the parameter.
pub fn clip_gradients<E: Element>(params: &ModelParams<E>, max_l2: f64) -> Result<f64> {
    let mut sumsq = 0.0f64;
    for (name, t) in params.named_tensors() {
        let grad = t
            .grad()
            .ok_or_else(|| Error::Invalid(format!("missing gradient for {name}")))?;
        for g in &grad {
            let g = g.to_f64();
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
            sumsq += g * g;
        }
    }
    let norm = sumsq.sqrt();
    if norm <= max_l2 {
        return Ok(1.0);
    }
    let factor = max_l2 / norm;
    for (_, t) in params.named_tensors() {
        let scaled = t
            .grad()
            .expect("checked above")
            .iter()
            .map(|g| E::from_f64(g.to_f64() * factor))
            .collect();
        t.replace_grad(scaled)?;
    }
    Ok(factor)
}

/// Halve the learning rate after `patience` consecutive epochs without a
/// strict improvement of the validation score; the stale counter restarts
/// after each halving. The resulting trace is non-increasing and every drop
/// is exactly a factor of two.
pub struct LrSchedule {
    pub lr: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl LrSchedule {
    pub fn new(lr_initial: f64, patience: usize) -> Self {
        LrSchedule { lr: lr_initial, patience, best: f64::NEG_INFINITY, stale: 0 }
    }

    /// Record one epoch's validation score; returns the rate for the next
    /// epoch.
    pub fn observe(&mut self, score: f64) -> f64 {
        if score > self.best {
            self.best = score;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr /= 2.0;
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, build};
    use crate::tensor::Tensor;

    fn micro_params() -> ModelParams<f32> {
        let cfg = ModelConfig {
            n_filters: 8,
            filter_len: 4,
            bottleneck: 4,
            block_channels: 8,
            skip_channels: 4,
            kernel: 3,
            blocks_per_repeat: 2,
            repeats: 1,
            ..ModelConfig::default()
        };
        build(&cfg, 0).unwrap()
    }

    fn set_all_grads(params: &ModelParams<f32>, value: f32) {
        for (_, t) in params.named_tensors() {
            t.replace_grad(vec![value; t.numel()]).unwrap();
        }
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = micro_params();
        let before: Vec<Vec<f32>> =
            p.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
        set_all_grads(&p, 0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 1e-3).unwrap();
        let after: Vec<Vec<f32>> =
            p.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn two_steps_match_hand_computation() {
        // Single scalar view: p0=1, g=1, lr=0.1.
        // t=1: m=0.1, v=0.001, mhat=1, vhat=1, update = 0.1/(1+1e-8).
        // t=2: m=0.19, v=0.001999, mhat=1, vhat=1, same update again.
        let mut p = micro_params();
        let first = p.named_tensors()[0].1.clone();
        let p0 = first.data()[0] as f64;
        set_all_grads(&p, 1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 0.1).unwrap();
        let step1 = 0.1 / (1.0 + 1e-8);
        let got1 = p.named_tensors()[0].1.data()[0] as f64;
        assert!((got1 - (p0 - step1)).abs() < 1e-6, "{got1}");
        set_all_grads(&p, 1.0);
        adam_step(&mut p, &mut st, 0.1).unwrap();
        let got2 = p.named_tensors()[0].1.data()[0] as f64;
        assert!((got2 - (p0 - 2.0 * step1)).abs() < 1e-6, "{got2}");
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        let mut p = micro_params();
        let mut st = AdamState::new(&p);
        for _ in 0..50 {
            set_all_grads(&p, 1.0);
            adam_step(&mut p, &mut st, 0.01).unwrap();
        }
        set_all_grads(&p, 1.0);
        let before = p.named_tensors()[0].1.data()[0] as f64;
        adam_step(&mut p, &mut st, 0.01).unwrap();
        let delta = before - p.named_tensors()[0].1.data()[0] as f64;
        assert!((delta - 0.01).abs() < 1e-4, "update {delta} should approach lr");
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut p = micro_params();
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &mut st, 1e-3).unwrap_err();
        assert!(err.to_string().contains("encoder.weight"), "{err}");
    }

    #[test]
    fn clip_is_identity_below_threshold() {
        let p = micro_params();
        set_all_grads(&p, 0.0);
        assert_eq!(clip_gradients(&p, 5.0).unwrap(), 1.0);
    }

    #[test]
    fn clip_scales_to_exact_norm() {
        let p = micro_params();
        // Put the whole norm in one known tensor: 100 entries would be messy,
        // so zero everything and set one grad vector of norm 10.
        set_all_grads(&p, 0.0);
        let (_, first) = &p.named_tensors()[0];
        let mut g = vec![0.0f32; first.numel()];
        g[0] = 6.0;
        g[1] = 8.0;
        first.replace_grad(g).unwrap();
        let factor = clip_gradients(&p, 5.0).unwrap();
        assert!((factor - 0.5).abs() < 1e-12);

        let mut sumsq = 0.0f64;
        for (_, t) in p.named_tensors() {
            sumsq += t.grad().unwrap().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        assert!((sumsq.sqrt() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_error_names_tensor() {
        let p = micro_params();
        set_all_grads(&p, 0.1);
        let (_, dec) = p.named_tensors().pop().unwrap();
        let mut g = vec![0.1f32; dec.numel()];
        g[3] = f32::NAN;
        dec.replace_grad(g).unwrap();
        let err = clip_gradients(&p, 5.0).unwrap_err();
        assert!(err.to_string().contains("decoder.weight"), "{err}");
    }

    #[test]
    fn schedule_halves_after_patience_and_resets() {
        let mut s = LrSchedule::new(1e-3, 3);
        let mut trace = Vec::new();
        // First observation improves over -inf; six stale epochs follow.
        trace.push(s.observe(5.0));
        for _ in 0..6 {
            trace.push(s.observe(5.0));
        }
        assert_eq!(trace, vec![1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 2.5e-4]);
        // An improvement resets the stale counter.
        let mut s = LrSchedule::new(1e-3, 2);
        s.observe(1.0);
        s.observe(0.5);
        assert_eq!(s.observe(2.0), 1e-3);
        s.observe(1.0);
        assert_eq!(s.observe(1.0), 5e-4);
    }

    #[test]
    fn grads_survive_on_copy_on_write_params() {
        // A detached snapshot must not see later optimizer writes.
        let mut p = micro_params();
        let snapshot = p.clone();
        let before = snapshot.named_tensors()[0].1.data().to_vec();
        set_all_grads(&p, 1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 0.5).unwrap();
        assert_eq!(snapshot.named_tensors()[0].1.data(), &before[..]);
        assert_ne!(p.named_tensors()[0].1.data(), &before[..]);
        let t: &Tensor<f32> = snapshot.named_tensors()[0].1;
        assert!(t.requires_grad());
    }
}
