//! Noise schedule, gated diffusion loss, symmetric InfoNCE and the joint
//! objective.

use std::f64::consts::FRAC_PI_2;

use dream_numerics::{Graph, Scalar, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DreamError, Result};
use crate::masking::MaskState;
use crate::rng::Rng;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_OFFSET: f64 = 0.008;
pub const DEFAULT_INFER_STEPS: usize = 100;
pub const MAX_BETA: f64 = 0.999;

/// `f(t) / f(0)` with `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`, no clipping.
pub fn cosine_alpha_bar(t: f64, steps: usize, offset: f64) -> f64 {
    let f = |t: f64| {
        let c = ((t / steps as f64 + offset) / (1.0 + offset) * FRAC_PI_2).cos();
        c * c
    };
    f(t) / f(0.0)
}

/// Discrete cosine schedule. `alpha_bar[t]` for `t` in `0..=T`, built as the
/// running product of `1 - beta_t` with every `beta_t <= 0.999`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    infer_steps: usize,
    alpha_bar: Vec<f64>,
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 || !(offset > 0.0 && offset.is_finite()) {
            return Err(DreamError::Config(format!(
                "cosine schedule needs T >= 1 and s > 0 (got T={steps}, s={offset})"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut betas = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        betas.push(0.0);
        for t in 1..=steps {
            let ratio =
                cosine_alpha_bar(t as f64, steps, offset) / cosine_alpha_bar((t - 1) as f64, steps, offset);
            let beta = (1.0 - ratio).min(MAX_BETA);
            betas.push(beta);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Ok(Self {
            steps,
            offset,
            infer_steps: DEFAULT_INFER_STEPS.min(steps),
            alpha_bar,
            betas,
        })
    }

    pub fn with_infer_steps(mut self, infer_steps: usize) -> Result<Self> {
        if infer_steps == 0 || infer_steps > self.steps {
            return Err(DreamError::Config(format!(
                "inference steps {infer_steps} outside 1..={}",
                self.steps
            )));
        }
        self.infer_steps = infer_steps;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn infer_steps(&self) -> usize {
        self.infer_steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        let ab = self.alpha_bar[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
    }

    /// Uniform draw on `1..=T`.
    pub fn sample_timestep(&self, rng: &mut Rng) -> usize {
        rng.gen_range(1..=self.steps)
    }
}

/// Noise for one sample: `n_noise` timesteps, each shared by that draw's
/// masked tokens, and standard-normal `eps` laid out draw -> token -> channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample(
        n_masked: usize,
        channels: usize,
        n_noise: usize,
        schedule: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Self {
        let timesteps = (0..n_noise).map(|_| schedule.sample_timestep(rng)).collect();
        let eps = (0..n_noise * n_masked * channels)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self { timesteps, eps }
    }
}

/// One gated sample's contribution to the diffusion loss.
#[derive(Debug, Clone)]
pub struct DiffusionItem<'a> {
    /// Index of the sample in the full batch (for per-sample reporting).
    pub sample: usize,
    /// Row block of this sample in the decoder output `z`.
    pub slot: usize,
    /// Clean normalized tokens `[n_tokens, channels]`.
    pub grid: &'a [f64],
    pub mask: &'a MaskState,
    pub noise: NoiseDraw,
}

/// Flattened head inputs; rows ordered sample -> draw -> masked position.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionBatch {
    pub channels: usize,
    pub n_samples: usize,
    pub x_t: Vec<f64>,
    pub eps: Vec<f64>,
    pub timesteps: Vec<usize>,
    /// Row of `z` conditioning each head row.
    pub z_rows: Vec<usize>,
    pub row_sample: Vec<usize>,
    pub included: Vec<bool>,
}

impl DiffusionBatch {
    pub fn assemble(
        items: &[DiffusionItem<'_>],
        n_samples: usize,
        channels: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        let mut b = Self {
            channels,
            n_samples,
            x_t: Vec::new(),
            eps: Vec::new(),
            timesteps: Vec::new(),
            z_rows: Vec::new(),
            row_sample: Vec::new(),
            included: vec![false; n_samples],
        };
        for item in items {
            let n = item.mask.n_tokens();
            if item.grid.len() != n * channels || item.sample >= n_samples {
                return Err(DreamError::Input("diffusion item shape mismatch".into()));
            }
            let masked = item.mask.masked_positions();
            let per_draw = masked.len() * channels;
            if item.noise.eps.len() != item.noise.timesteps.len() * per_draw {
                return Err(DreamError::Input("noise draw does not match masked count".into()));
            }
            b.included[item.sample] = true;
            for (d, &t) in item.noise.timesteps.iter().enumerate() {
                for (j, &p) in masked.iter().enumerate() {
                    let x0 = &item.grid[p * channels..(p + 1) * channels];
                    let off = d * per_draw + j * channels;
                    let eps = &item.noise.eps[off..off + channels];
                    b.x_t.extend(schedule.q_sample(x0, t, eps));
                    b.eps.extend_from_slice(eps);
                    b.timesteps.push(t);
                    b.z_rows.push(item.slot * n + p);
                    b.row_sample.push(item.sample);
                }
            }
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.timesteps.len()
    }

    pub fn contributing(&self) -> usize {
        self.included.iter().filter(|&&i| i).count()
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionLossOutput {
    pub loss: Var,
    /// Mean squared error per batch sample; 0 for samples outside the gate.
    pub per_sample: Vec<f64>,
    pub count: usize,
}

/// Mean over rows of `||eps - eps_hat||^2`. `predict` receives the noised
/// rows, their timesteps and the `z` row indices, and returns `eps_hat`.
pub fn diffusion_loss<T, F>(g: &mut Graph<T>, batch: &DiffusionBatch, predict: F) -> Result<DiffusionLossOutput>
where
    T: Scalar,
    F: FnOnce(&mut Graph<T>, Var, &[usize], &[usize]) -> Result<Var>,
{
    let rows = batch.rows();
    if rows == 0 {
        let loss = g.constant(Tensor::scalar(T::zero()));
        return Ok(DiffusionLossOutput {
            loss,
            per_sample: vec![0.0; batch.n_samples],
            count: 0,
        });
    }
    let c = batch.channels;
    let cast = |v: &[f64]| v.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>();
    let x_t = g.constant_from([rows, c], cast(&batch.x_t))?;
    let eps = g.constant_from([rows, c], cast(&batch.eps))?;
    let eps_hat = predict(g, x_t, &batch.timesteps, &batch.z_rows)?;
    let diff = g.sub(eps_hat, eps)?;
    let sq = g.mul(diff, diff)?;
    let per_row = g.sum_cols(sq);
    let loss = g.mean(per_row);

    let mut sums = vec![0.0; batch.n_samples];
    let mut counts = vec![0usize; batch.n_samples];
    for (r, v) in g.value(per_row).iter().enumerate() {
        sums[batch.row_sample[r]] += v.to_f64_lossy();
        counts[batch.row_sample[r]] += 1;
    }
    let per_sample = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    Ok(DiffusionLossOutput {
        loss,
        per_sample,
        count: batch.contributing(),
    })
}

#[derive(Debug, Clone)]
pub struct ClipLossOutput {
    pub loss: Var,
    pub image_to_text: f64,
    pub text_to_image: f64,
    pub count: usize,
}

/// Symmetric cross-entropy over `scale * img . txt^T`. Row `i` of each input
/// is a matched pair; `scale` is a `[1]` variable.
pub fn info_nce<T: Scalar>(g: &mut Graph<T>, img: Var, txt: Var, scale: Var) -> Result<ClipLossOutput> {
    let (n, e) = g.dims(img);
    if g.dims(txt) != (n, e) || n == 0 {
        return Err(DreamError::Input(format!(
            "InfoNCE needs matching non-empty batches, got {:?} and {:?}",
            g.shape(img),
            g.shape(txt)
        )));
    }
    let sims = g.matmul_t(img, txt, false, true)?;
    let logits = g.mul(sims, scale)?;
    let mut eye = vec![T::zero(); n * n];
    for i in 0..n {
        eye[i * n + i] = T::one();
    }
    let eye = g.constant_from([n, n], eye)?;
    let direction = |g: &mut Graph<T>, l: Var| -> Result<Var> {
        let ls = g.log_softmax(l);
        let diag = g.mul(ls, eye)?;
        let s = g.sum(diag);
        Ok(g.scale(s, -1.0 / n as f64))
    };
    let l_i = direction(g, logits)?;
    let logits_t = g.transpose(logits)?;
    let l_t = direction(g, logits_t)?;
    let both = g.add(l_i, l_t)?;
    let loss = g.scale(both, 0.5);
    Ok(ClipLossOutput {
        loss,
        image_to_text: g.scalar_value(l_i).to_f64_lossy(),
        text_to_image: g.scalar_value(l_t).to_f64_lossy(),
        count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diffusion: f64,
    pub clip: f64,
    pub lambda: f64,
    pub diff_weight: f64,
    pub joint: f64,
    pub diff_count: usize,
    pub clip_count: usize,
}

/// `diff_weight * diffusion + lambda * clip`, computed identically on the
/// tape and in plain arithmetic.
pub fn joint_value(diffusion: f64, clip: f64, lambda: f64, diff_weight: f64) -> f64 {
    diff_weight * diffusion + lambda * clip
}

pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    diff: &DiffusionLossOutput,
    clip: Option<&ClipLossOutput>,
    lambda: f64,
    diff_weight: f64,
) -> Result<(Var, LossBreakdown)> {
    let d = g.scale(diff.loss, diff_weight);
    let (loss, clip_value, clip_count) = match clip {
        Some(c) => {
            let w = g.scale(c.loss, lambda);
            (g.add(d, w)?, g.scalar_value(c.loss).to_f64_lossy(), c.count)
        }
        None => (d, 0.0, 0),
    };
    let breakdown = LossBreakdown {
        diffusion: g.scalar_value(diff.loss).to_f64_lossy(),
        clip: clip_value,
        lambda,
        diff_weight,
        joint: g.scalar_value(loss).to_f64_lossy(),
        diff_count: diff.count,
        clip_count,
    };
    Ok((loss, breakdown))
}
