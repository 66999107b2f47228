//! Masking-ratio schedules, ratio sampling, mask construction and the two
//! per-sample loss gates.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DreamError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Mean ramps 0 -> 1 over the warmup, then stays at 1.
    #[serde(rename = "WM")]
    Warmup,
    /// Mean fixed at 1.
    #[serde(rename = "FX")]
    Fixed,
    /// Uniform on the bounds, no mean.
    #[serde(rename = "UNI")]
    Uniform,
    /// Mean ramps 1 -> 0 over the warmup, then stays at 0.
    #[serde(rename = "CD")]
    Cooldown,
}

impl ScheduleKind {
    pub fn code(self) -> &'static str {
        match self {
            Self::Warmup => "WM",
            Self::Fixed => "FX",
            Self::Uniform => "UNI",
            Self::Cooldown => "CD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "WM" => Ok(Self::Warmup),
            "FX" => Ok(Self::Fixed),
            "UNI" => Ok(Self::Uniform),
            "CD" => Ok(Self::Cooldown),
            other => Err(DreamError::Config(format!("unknown mask schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingScheduleConfig {
    pub kind: ScheduleKind,
    pub sigma: f64,
    pub warmup_epochs: f64,
    /// Lower clip bound for sampled ratios.
    pub min: f64,
    /// Upper clip bound for sampled ratios.
    pub max: f64,
    /// Diffusion loss needs `r > gamma`.
    pub gamma: f64,
    /// Contrastive loss needs `r <= phi`.
    pub phi: f64,
}

impl Default for MaskingScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Warmup,
            sigma: 0.55,
            warmup_epochs: 36.0,
            min: 0.0,
            max: 1.0,
            gamma: 0.5,
            phi: 0.75,
        }
    }
}

impl MaskingScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DreamError::Config(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("mask.gamma {} outside [0, 1)", self.gamma));
        }
        if !(self.phi > 0.0 && self.phi <= 1.0) {
            return bad(format!("mask.phi {} outside (0, 1]", self.phi));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return bad(format!("mask.sigma {} must be >= 0", self.sigma));
        }
        if self.warmup_epochs < 1.0 {
            return bad(format!("mask.warmup_epochs {} must be >= 1", self.warmup_epochs));
        }
        if !(0.0 <= self.min && self.min <= self.max && self.max <= 1.0) {
            return bad(format!("mask bounds [{}, {}] invalid", self.min, self.max));
        }
        Ok(())
    }
}

/// Mean of the ratio distribution at a fractional epoch.
pub fn schedule_mean(config: &MaskingScheduleConfig, progress: f64) -> f64 {
    let ramp = (progress / config.warmup_epochs).clamp(0.0, 1.0);
    match config.kind {
        ScheduleKind::Warmup => ramp,
        ScheduleKind::Cooldown => 1.0 - ramp,
        ScheduleKind::Fixed => 1.0,
        // Unused by the uniform sampler; reported as the uniform mean.
        ScheduleKind::Uniform => 0.5 * (config.min + config.max),
    }
}

/// Draws a ratio. Gaussian draws are clipped (not resampled) to the bounds,
/// which puts point masses on the bounds.
pub fn sample_ratio(config: &MaskingScheduleConfig, mean: f64, rng: &mut Rng) -> f64 {
    match config.kind {
        ScheduleKind::Uniform => rng.gen_range(config.min..=config.max),
        _ => {
            let z: f64 = StandardNormal.sample(rng);
            (mean + config.sigma * z).clamp(config.min, config.max)
        }
    }
}

/// Per-token visibility; `masked[i] == true` hides token `i` from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub masked: Vec<bool>,
    pub masked_count: usize,
    pub ratio: f64,
}

impl MaskState {
    pub fn visible(n_tokens: usize) -> Self {
        Self {
            masked: vec![false; n_tokens],
            masked_count: 0,
            ratio: 0.0,
        }
    }

    pub fn from_bitmap(masked: Vec<bool>) -> Self {
        let masked_count = masked.iter().filter(|&&m| m).count();
        let ratio = if masked.is_empty() {
            0.0
        } else {
            masked_count as f64 / masked.len() as f64
        };
        Self {
            masked,
            masked_count,
            ratio,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.masked.len()
    }

    pub fn unmasked_positions(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }
}

/// Number of masked tokens for ratio `r`: `ceil(r * n)`, so any `r > 0`
/// masks at least one token. A tiny tolerance absorbs representation error
/// in products such as `0.07 * 100`.
pub fn masked_count(r: f64, n_tokens: usize) -> usize {
    let x = r.clamp(0.0, 1.0) * n_tokens as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(n_tokens)
}

/// Masks exactly `ceil(r * n)` positions chosen uniformly without replacement.
pub fn make_mask(r: f64, n_tokens: usize, rng: &mut Rng) -> Result<MaskState> {
    if n_tokens == 0 {
        return Err(DreamError::Input("mask over zero tokens".into()));
    }
    let count = masked_count(r, n_tokens);
    let mut masked = vec![false; n_tokens];
    for i in rand::seq::index::sample(rng, n_tokens, count) {
        masked[i] = true;
    }
    Ok(MaskState {
        masked,
        masked_count: count,
        ratio: r,
    })
}

/// Sample contributes to the diffusion loss iff `r > gamma`.
pub fn diffusion_gate(r: f64, gamma: f64) -> bool {
    r > gamma
}

/// Sample contributes to the contrastive loss iff `r <= phi`.
pub fn clip_gate(r: f64, phi: f64) -> bool {
    r <= phi
}
