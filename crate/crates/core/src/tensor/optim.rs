//! Adam with decoupled weight decay, global-norm clipping, and the
//! warmup-then-polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer hyper-parameters held outside the state so checkpoints carry
/// only the moments and the step counter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.98, epsilon: 1e-6 }
    }
}

/// First/second moment buffers, one pair per parameter, in the caller's
/// canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step_count: u64,
    pub moments: Vec<Moments<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped after the given parameter sizes.
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let moments = sizes
            .into_iter()
            .map(|len| Moments { m: vec![T::zero(); len], v: vec![T::zero(); len] })
            .collect();
        AdamState { step_count: 0, moments }
    }
}

/// One parameter's view for an optimizer step: the tensor (gradient inside)
/// and whether weight decay applies to it.
pub struct ParamSlot<'a, T: Scalar> {
    pub tensor: &'a mut Tensor<T>,
    pub decay: bool,
}

/// Bias-corrected Adam step with decoupled weight decay. Decay is skipped
/// for slots flagged `decay: false` (biases, LayerNorm affine parameters).
pub fn adam_step<T: Scalar>(
    slots: &mut [ParamSlot<'_, T>],
    state: &mut AdamState<T>,
    hp: &AdamParams,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::Config(format!("negative learning rate {lr}")));
    }
    if slots.len() != state.moments.len() {
        return Err(Error::Shape(format!(
            "{} parameters vs {} moment pairs",
            slots.len(),
            state.moments.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count;
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let eps = T::from_f64(hp.epsilon);
    let one = T::one();
    // 1 - beta^t in f64; beta2^t underflows f32 quickly for long runs.
    let corr1 = T::from_f64(1.0 - hp.beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - hp.beta2.powi(t as i32));
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(weight_decay);

    for (slot, mom) in slots.iter_mut().zip(state.moments.iter_mut()) {
        let n = slot.tensor.numel();
        if mom.m.len() != n {
            return Err(Error::Shape(format!("moment length {} vs parameter {n}", mom.m.len())));
        }
        let grad = slot
            .tensor
            .grad()
            .ok_or_else(|| Error::Tape("adam_step on a parameter with no gradient".into()))?
            .to_vec();
        let decay = slot.decay && weight_decay != 0.0;
        let values = slot.tensor.values_mut();
        for j in 0..n {
            let g = grad[j];
            mom.m[j] = b1 * mom.m[j] + (one - b1) * g;
            mom.v[j] = b2 * mom.v[j] + (one - b2) * g * g;
            let m_hat = mom.m[j] / corr1;
            let v_hat = mom.v[j] / corr2;
            let mut step = lr_t * m_hat / (v_hat.sqrt() + eps);
            if decay {
                step += lr_t * wd * values[j];
            }
            values[j] = values[j] - step;
        }
    }
    Ok(())
}

/// Scales all gradients by max_norm/norm when the global L2 norm exceeds
/// max_norm; returns the pre-clip norm. The tiny tolerance keeps the op
/// idempotent: a freshly clipped set, whose norm can land a few ulps above
/// max_norm, is not rescaled.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.iter() {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm * (1.0 + 1e-6) {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    Ok(norm)
}

/// Linear warmup from zero to peak_lr over warmup_steps, then polynomial
/// decay to end_lr at total_steps; constant end_lr afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub end_lr: f64,
    pub power: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} must be < total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.peak_lr < 0.0 || self.end_lr < 0.0 || self.end_lr > self.peak_lr {
            return Err(Error::Config(format!(
                "need 0 <= end_lr <= peak_lr, got {} and {}",
                self.end_lr, self.peak_lr
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return self.end_lr;
        }
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            // Ratio first, so lr_at(warmup) is peak_lr exactly.
            return self.peak_lr * (step as f64 / self.warmup_steps as f64);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let frac = (step - self.warmup_steps) as f64 / span;
        self.end_lr + (self.peak_lr - self.end_lr) * (1.0 - frac).powf(self.power)
    }
}
