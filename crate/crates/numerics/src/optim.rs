use crate::error::{NumericsError, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.04,
            clip_norm: Some(3.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        let zeros = |n| vec![T::zero(); n];
        Self {
            config,
            step: 0,
            first: params.iter().map(|(_, p)| zeros(p.tensor.numel())).collect(),
            second: params.iter().map(|(_, p)| zeros(p.tensor.numel())).collect(),
        }
    }

    /// Rebuilds optimizer state from serialized moments.
    pub fn from_parts(
        config: AdamWConfig,
        step: u64,
        first: Vec<Vec<T>>,
        second: Vec<Vec<T>>,
    ) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Applies one update using the gradients stored in each parameter's
    /// gradient slot (missing slots count as zero). Non-finite gradients
    /// abort before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<StepReport> {
        if params.len() != self.first.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        let mut sq = 0.0f64;
        for (id, p) in params.iter() {
            if p.tensor.numel() != self.first[id.0].len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adamw",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: vec![self.first[id.0].len()],
                });
            }
            if let Some(g) = p.tensor.grad() {
                for &v in g {
                    if !v.is_finite() {
                        return Err(NumericsError::NonFiniteGradient(p.name.clone()));
                    }
                    let v = v.to_f64_lossy();
                    sq += v * v;
                }
            }
        }
        let grad_norm = sq.sqrt();
        let clip_scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let scale = T::from_f64_lossy(clip_scale);
        let lr_t = T::from_f64_lossy(lr);
        let inv_bc1 = T::from_f64_lossy(1.0 / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        let decay = T::from_f64_lossy(lr * c.weight_decay);

        for (id, p) in params.iter_mut() {
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let apply_decay = p.decay && c.weight_decay != 0.0;
            let grad = p.tensor.take_grad();
            let data = p.tensor.data_mut();
            for k in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[k] * scale);
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let mhat = m[k] * inv_bc1;
                let vhat = v[k] * inv_bc2;
                let mut x = data[k];
                if apply_decay {
                    x -= decay * x;
                }
                x -= lr_t * mhat / (vhat.sqrt() + eps);
                data[k] = x;
            }
        }
        Ok(StepReport {
            grad_norm,
            clipped: clip_scale < 1.0,
        })
    }
}

/// `ema <- decay * ema + (1 - decay) * params`, elementwise.
pub fn ema_update<T: Scalar>(ema: &mut ParamSet<T>, params: &ParamSet<T>, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(NumericsError::InvalidArgument(format!(
            "EMA decay {decay} outside [0, 1]"
        )));
    }
    ema.check_compatible(params)?;
    let d = T::from_f64_lossy(decay);
    let rest = T::from_f64_lossy(1.0 - decay);
    for ((_, e), (_, p)) in ema.iter_mut().zip(params.iter()) {
        if decay == 1.0 {
            continue;
        }
        for (ev, &pv) in e.tensor.data_mut().iter_mut().zip(p.tensor.data()) {
            *ev = if decay == 0.0 { pv } else { d * *ev + rest * pv };
        }
    }
    Ok(())
}
