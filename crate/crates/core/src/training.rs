//! Training loop: per-sample masking and gating, label dropout, joint loss,
//! AdamW with linear LR warmup, EMA tracking, validation and checkpoints.
//!
//! Every random draw is keyed by `(seed, step, slot)`, so the trainer state
//! needed to resume is just parameters, optimizer moments and the step
//! counter.

use std::io::Write;
use std::path::Path;

use dream_numerics::{ema_update, AdamW, AdamWConfig, Graph, ParamSet, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Record, Records};
use crate::error::{CheckpointError, DreamError, Result};
use crate::losses::{
    diffusion_loss, info_nce, joint_loss, DiffusionBatch, DiffusionItem, LossBreakdown, NoiseDraw,
    NoiseSchedule, DEFAULT_OFFSET,
};
use crate::masking::{
    clip_gate, diffusion_gate, make_mask, sample_ratio, schedule_mean, MaskState, MaskingScheduleConfig,
};
use crate::model::{DreamModel, EncoderInput, ModelConfig};
use crate::rng::{self, tag};
use crate::synthdata::{sample_at, CaptionTokens, Split};
use crate::tokenizer::{fit_normalization, grid_side_for, tokenize, NormStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training images per epoch; the same indices are reshuffled each epoch.
    pub samples_per_epoch: usize,
    pub peak_lr: f64,
    pub lr_warmup_epochs: f64,
    pub lambda: f64,
    /// Weight on the diffusion term; 0 gives a contrastive-only run.
    pub diff_weight: f64,
    pub ema_decay: f64,
    pub label_dropout: f64,
    pub n_noise: usize,
    pub hflip: bool,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub image_side: usize,
    pub norm_samples: usize,
    pub diffusion_steps: usize,
    /// Validation every this many steps; 0 disables it.
    pub val_every: u64,
    pub val_samples: usize,
    pub seed: u64,
    pub mask: MaskingScheduleConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 49,
            batch_size: 64,
            samples_per_epoch: 3840,
            peak_lr: 1e-3,
            lr_warmup_epochs: 12.0,
            lambda: 0.005,
            diff_weight: 1.0,
            ema_decay: 0.99,
            label_dropout: 0.1,
            n_noise: 4,
            hflip: true,
            weight_decay: 0.04,
            clip_norm: Some(3.0),
            beta1: 0.9,
            beta2: 0.95,
            image_side: 32,
            norm_samples: 4096,
            diffusion_steps: 1000,
            val_every: 100,
            val_samples: 128,
            seed: 0,
            mask: MaskingScheduleConfig::default(),
            model: ModelConfig::toy(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DreamError::Config(m));
        self.mask.validate()?;
        self.model.validate()?;
        if self.batch_size == 0 || self.samples_per_epoch < self.batch_size {
            return bad(format!(
                "train.samples_per_epoch ({}) must be >= train.batch_size ({}) > 0",
                self.samples_per_epoch, self.batch_size
            ));
        }
        if self.epochs > 0 && self.lr_warmup_epochs >= self.epochs as f64 {
            return bad(format!(
                "train.lr_warmup_epochs {} must be below train.epochs {}",
                self.lr_warmup_epochs, self.epochs
            ));
        }
        if self.lr_warmup_epochs < 0.0 || self.peak_lr < 0.0 || !self.peak_lr.is_finite() {
            return bad("learning rate settings must be non-negative".into());
        }
        for (name, p) in [
            ("train.label_dropout", self.label_dropout),
            ("train.ema_decay", self.ema_decay),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.lambda < 0.0 || self.diff_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.n_noise == 0 || self.norm_samples == 0 || self.diffusion_steps == 0 {
            return bad("n_noise, norm_samples and diffusion_steps must be positive".into());
        }
        if grid_side_for(self.image_side)? != self.model.grid_side {
            return bad(format!(
                "image side {} does not give a {}x{} token grid",
                self.image_side, self.model.grid_side, self.model.grid_side
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.samples_per_epoch / self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs as u64 * self.steps_per_epoch()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.peak_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.diffusion_steps, DEFAULT_OFFSET)
    }
}

/// Linear warmup from 0 at step 0 to the peak, then constant.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let warm = config.lr_warmup_epochs * config.steps_per_epoch() as f64;
    if warm <= 0.0 {
        return config.peak_lr;
    }
    config.peak_lr * (step as f64 / warm).min(1.0)
}

/// Masking progress in fractional epochs.
pub fn progress_at(step: u64, config: &TrainConfig) -> f64 {
    step as f64 / config.steps_per_epoch().max(1) as f64
}

/// One sample after masking, gating, augmentation and noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub grid: Vec<f64>,
    pub mask: MaskState,
    pub caption: CaptionTokens,
    /// Caption seen by the decoder (null after label dropout).
    pub cond_caption: CaptionTokens,
    pub noise: Option<NoiseDraw>,
    pub clip: bool,
}

impl PreparedSample {
    pub fn diffusion(&self) -> bool {
        self.noise.is_some()
    }

    pub fn ratio(&self) -> f64 {
        self.mask.ratio
    }
}

/// Gated settings shared by every sample of a batch.
#[derive(Debug, Clone, Copy)]
pub struct GateSettings {
    pub gamma: f64,
    pub phi: f64,
    pub n_noise: usize,
    pub diffusion_enabled: bool,
    pub label_dropout: f64,
}

impl GateSettings {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            gamma: config.mask.gamma,
            phi: config.mask.phi,
            n_noise: config.n_noise,
            diffusion_enabled: config.diff_weight > 0.0,
            label_dropout: config.label_dropout,
        }
    }

    /// Applies both gates to an already masked sample; draws label dropout
    /// and noise from `rng` in that order.
    pub fn prepare(
        &self,
        grid: Vec<f64>,
        mask: MaskState,
        caption: CaptionTokens,
        schedule: &NoiseSchedule,
        rng: &mut rng::Rng,
    ) -> PreparedSample {
        let channels = grid.len() / mask.n_tokens().max(1);
        let dropped = rng.gen_bool(self.label_dropout);
        let cond_caption = if dropped { CaptionTokens::null() } else { caption };
        let noise = (self.diffusion_enabled && diffusion_gate(mask.ratio, self.gamma))
            .then(|| NoiseDraw::sample(mask.masked_count, channels, self.n_noise, schedule, rng));
        PreparedSample {
            clip: clip_gate(mask.ratio, self.phi),
            grid,
            mask,
            caption,
            cond_caption,
            noise,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Diffusion MSE per batch sample (0 outside the gate).
    pub per_sample_diffusion: Vec<f64>,
    /// Batch indices that entered the contrastive loss.
    pub clip_members: Vec<usize>,
    /// Decoder samples conditioned on the null prompt.
    pub null_conditioned: usize,
}

/// Joint loss of a prepared batch. The encoder runs once on the union of
/// gated samples; the decoder and head only on diffusion-gated ones.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &DreamModel,
    ps: &ParamSet<T>,
    samples: &[PreparedSample],
    schedule: &NoiseSchedule,
    lambda: f64,
    diff_weight: f64,
) -> Result<BatchLoss> {
    if samples.is_empty() {
        return Err(DreamError::Input("empty training batch".into()));
    }
    let channels = model.config.token_channels;
    let enc_idx: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].clip || samples[i].diffusion())
        .collect();
    let empty = DiffusionBatch::assemble(&[], samples.len(), channels, schedule)?;
    if enc_idx.is_empty() {
        let diff = diffusion_loss(g, &empty, |_, _, _, _| unreachable!())?;
        let (loss, breakdown) = joint_loss(g, &diff, None, lambda, diff_weight)?;
        return Ok(BatchLoss {
            loss,
            breakdown,
            per_sample_diffusion: diff.per_sample,
            clip_members: Vec::new(),
            null_conditioned: 0,
        });
    }
    let inputs = enc_idx
        .iter()
        .map(|&i| EncoderInput::from_grid(&samples[i].grid, channels, &samples[i].mask))
        .collect::<Result<Vec<_>>>()?;
    let enc = model.encoder_forward(g, ps, &inputs)?;

    let clip_slots: Vec<usize> = (0..enc_idx.len()).filter(|&j| samples[enc_idx[j]].clip).collect();
    let clip_members: Vec<usize> = clip_slots.iter().map(|&j| enc_idx[j]).collect();
    let clip = if clip_slots.is_empty() {
        None
    } else {
        let img = if clip_slots.len() == enc_idx.len() {
            enc.pooled
        } else {
            g.gather_rows(enc.pooled, &clip_slots)?
        };
        let captions: Vec<CaptionTokens> = clip_members.iter().map(|&i| samples[i].caption).collect();
        let txt = model.text_encode_contrastive(g, ps, &captions)?;
        let scale = model.logit_scale(g, ps);
        Some(info_nce(g, img, txt, scale)?)
    };

    let dec_slots: Vec<usize> = (0..enc_idx.len())
        .filter(|&j| samples[enc_idx[j]].diffusion())
        .collect();
    let mut null_conditioned = 0;
    let diff = if dec_slots.is_empty() {
        diffusion_loss(g, &empty, |_, _, _, _| unreachable!())?
    } else {
        let members: Vec<&PreparedSample> = dec_slots.iter().map(|&j| &samples[enc_idx[j]]).collect();
        let cond_caps: Vec<CaptionTokens> = members.iter().map(|s| s.cond_caption).collect();
        null_conditioned = cond_caps.iter().filter(|c| c.is_null()).count();
        let cond = model.text_encode_cond(g, ps, &cond_caps)?;
        let masks: Vec<&MaskState> = members.iter().map(|s| &s.mask).collect();
        let z = model.decoder_forward(g, ps, &enc, &dec_slots, &masks, cond)?;
        let items: Vec<DiffusionItem> = dec_slots
            .iter()
            .enumerate()
            .map(|(slot, &j)| {
                let s = &samples[enc_idx[j]];
                DiffusionItem {
                    sample: enc_idx[j],
                    slot,
                    grid: &s.grid,
                    mask: &s.mask,
                    noise: s.noise.clone().unwrap(),
                }
            })
            .collect();
        let batch = DiffusionBatch::assemble(&items, samples.len(), channels, schedule)?;
        diffusion_loss(g, &batch, |g, x_t, ts, rows| {
            let zr = g.gather_rows(z, rows)?;
            model.diffusion_head(g, ps, x_t, ts, zr)
        })?
    };
    let (loss, breakdown) = joint_loss(g, &diff, clip.as_ref(), lambda, diff_weight)?;
    Ok(BatchLoss {
        loss,
        breakdown,
        per_sample_diffusion: diff.per_sample,
        clip_members,
        null_conditioned,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub mask_mean: f64,
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    pub ratios: Vec<f64>,
    pub null_conditioned: usize,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,mask_mean,diff_loss,clip_loss,joint,diff_count,clip_count,grad_norm";

impl StepOutcome {
    pub fn csv_row(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.mask_mean,
            b.diffusion,
            b.clip,
            b.joint,
            b.diff_count,
            b.clip_count,
            self.grad_norm
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[StepOutcome]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    checkpoint::write_atomic(path, out.as_bytes())
}

pub fn write_validation_csv(path: &Path, rows: &[(u64, f64)]) -> Result<()> {
    let mut f = Vec::new();
    writeln!(f, "step,val_diff_loss")?;
    for (s, v) in rows {
        writeln!(f, "{s},{v}")?;
    }
    checkpoint::write_atomic(path, &f)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DreamModel,
    pub params: ParamSet<f32>,
    pub ema: ParamSet<f32>,
    pub optimizer: AdamW<f32>,
    pub norm: NormStats,
    pub schedule: NoiseSchedule,
    /// Number of completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = DreamModel::new::<f32>(config.model.clone(), config.seed)?;
        let images = (0..config.norm_samples as u64)
            .map(|i| sample_at(config.seed, Split::Train, i, config.image_side).map(|s| s.image))
            .collect::<Result<Vec<_>>>()?;
        let norm = fit_normalization(&images)?;
        Ok(Self {
            ema: params.clone(),
            optimizer: AdamW::new(&params, config.adamw()),
            schedule: config.noise_schedule()?,
            model,
            params,
            norm,
            config,
            step: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.config.steps_per_epoch()
    }

    /// Builds the batch for `step` purely from the seed and step index.
    pub fn prepare_batch(&self, step: u64) -> Result<Vec<PreparedSample>> {
        let cfg = &self.config;
        let spe = cfg.steps_per_epoch();
        let (epoch, within) = (step / spe, step % spe);
        let mut order: Vec<u64> = (0..cfg.samples_per_epoch as u64).collect();
        order.shuffle(&mut rng::substream(cfg.seed, &[tag::EPOCH_ORDER, epoch]));
        let mean = schedule_mean(&cfg.mask, progress_at(step, cfg));
        let gates = GateSettings::from_config(cfg);
        let n = cfg.model.n_tokens();
        (0..cfg.batch_size)
            .map(|k| {
                let index = order[within as usize * cfg.batch_size + k];
                let sample = sample_at(cfg.seed, Split::Train, index, cfg.image_side)?;
                let mut r = rng::substream(cfg.seed, &[tag::SAMPLE, step, k as u64]);
                let ratio = sample_ratio(&cfg.mask, mean, &mut r);
                let mask = make_mask(ratio, n, &mut r)?;
                let (image, caption) = if cfg.hflip && r.gen_bool(0.5) {
                    let spec = sample.spec.mirrored();
                    (sample.image.flipped_horizontally(), crate::synthdata::caption_of(&spec))
                } else {
                    (sample.image, sample.caption)
                };
                let grid = tokenize(&image, &self.norm)?.values;
                Ok(gates.prepare(grid, mask, caption, &self.schedule, &mut r))
            })
            .collect()
    }

    /// One optimizer step plus EMA update.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        let step = self.step;
        let cfg = &self.config;
        let lr = lr_at(step, cfg);
        let mask_mean = schedule_mean(&cfg.mask, progress_at(step, cfg));
        let batch = self.prepare_batch(step)?;
        let mut g = Graph::new();
        let bl = batch_loss(
            &mut g,
            &self.model,
            &self.params,
            &batch,
            &self.schedule,
            cfg.lambda,
            cfg.diff_weight,
        )?;
        for (component, v) in [
            ("diffusion", bl.breakdown.diffusion),
            ("contrastive", bl.breakdown.clip),
            ("joint", bl.breakdown.joint),
        ] {
            if !v.is_finite() {
                return Err(DreamError::NonFiniteLoss { component, step });
            }
        }
        let mut grads = g.backward(bl.loss)?;
        drop(g);
        self.params.load_grads(&mut grads)?;
        let report = self.optimizer.step(&mut self.params, lr)?;
        self.params.clear_grads();
        ema_update(&mut self.ema, &self.params, cfg.ema_decay)?;
        self.step += 1;
        Ok(StepOutcome {
            step,
            epoch: step / cfg.steps_per_epoch(),
            lr,
            mask_mean,
            breakdown: bl.breakdown,
            grad_norm: report.grad_norm,
            ratios: batch.iter().map(|s| s.ratio()).collect(),
            null_conditioned: bl.null_conditioned,
        })
    }

    /// Fixed validation batch: held-out images, masks drawn with ratios
    /// uniform on `(gamma, 1]`, true captions, fixed noise.
    pub fn validation_batch(&self) -> Result<Vec<PreparedSample>> {
        let cfg = &self.config;
        let gates = GateSettings {
            gamma: cfg.mask.gamma,
            phi: -1.0,
            n_noise: cfg.n_noise,
            diffusion_enabled: true,
            label_dropout: 0.0,
        };
        (0..cfg.val_samples as u64)
            .map(|i| {
                let s = sample_at(cfg.seed, Split::Val, i, cfg.image_side)?;
                let mut r = rng::substream(cfg.seed, &[tag::VALIDATION, i]);
                let ratio = cfg.mask.gamma + (1.0 - cfg.mask.gamma) * (1.0 - r.gen::<f64>());
                let mask = make_mask(ratio, cfg.model.n_tokens(), &mut r)?;
                let grid = tokenize(&s.image, &self.norm)?.values;
                Ok(gates.prepare(grid, mask, s.caption, &self.schedule, &mut r))
            })
            .collect()
    }

    /// Mean per-sample diffusion loss of `params` on the validation batch.
    pub fn validation_loss(&self, params: &ParamSet<f32>, batch: &[PreparedSample]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for chunk in batch.chunks(self.config.batch_size) {
            let mut g = Graph::inference();
            let bl = batch_loss(&mut g, &self.model, params, chunk, &self.schedule, 0.0, 1.0)?;
            total += bl.per_sample_diffusion.iter().sum::<f64>();
        }
        Ok(total / batch.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut rec = Records::new();
        for (name, set) in [("param", &self.params), ("ema", &self.ema)] {
            for (_, p) in set.iter() {
                rec.insert(
                    format!("{name}/{}", p.name),
                    Record::f32(p.tensor.shape(), p.tensor.data().to_vec()),
                );
            }
        }
        let (m, v) = self.optimizer.moments();
        for ((_, p), (m, v)) in self.params.iter().zip(m.iter().zip(v)) {
            rec.insert(format!("adam.m/{}", p.name), Record::f32(p.tensor.shape(), m.clone()));
            rec.insert(format!("adam.v/{}", p.name), Record::f32(p.tensor.shape(), v.clone()));
        }
        rec.insert("norm/mean".into(), Record::f64(self.norm.mean.clone()));
        rec.insert("norm/scale".into(), Record::f64(self.norm.scale.clone()));
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| DreamError::Config(format!("config serialization: {e}")))?;
        rec.insert("meta/config".into(), Record::bytes(config));
        let counters = CheckpointCounters {
            step: self.step,
            adam_step: self.optimizer.step_count(),
        };
        rec.insert(
            "meta/counters".into(),
            Record::bytes(serde_json::to_vec(&counters).expect("plain struct")),
        );
        checkpoint::save(path, &rec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rec = checkpoint::load(path)?;
        let config: TrainConfig = serde_json::from_slice(&checkpoint::take_bytes(&mut rec, "meta/config")?)
            .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
        let counters: CheckpointCounters =
            serde_json::from_slice(&checkpoint::take_bytes(&mut rec, "meta/counters")?)
                .map_err(|e| CheckpointError::Malformed(format!("counters: {e}")))?;
        config.validate()?;
        let (model, mut params) = DreamModel::new::<f32>(config.model.clone(), config.seed)?;
        let mut ema = params.clone();
        let mut first = Vec::with_capacity(params.len());
        let mut second = Vec::with_capacity(params.len());
        for ((_, p), (_, e)) in params.iter_mut().zip(ema.iter_mut()) {
            let shape = p.tensor.shape().to_vec();
            let live = checkpoint::take_f32(&mut rec, &format!("param/{}", p.name), &shape)?;
            p.tensor = Tensor::new(shape.clone(), live)?;
            let avg = checkpoint::take_f32(&mut rec, &format!("ema/{}", p.name), &shape)?;
            e.tensor = Tensor::new(shape.clone(), avg)?;
            first.push(checkpoint::take_f32(&mut rec, &format!("adam.m/{}", p.name), &shape)?);
            second.push(checkpoint::take_f32(&mut rec, &format!("adam.v/{}", p.name), &shape)?);
        }
        let norm = NormStats {
            mean: checkpoint::take_f64(&mut rec, "norm/mean")?,
            scale: checkpoint::take_f64(&mut rec, "norm/scale")?,
        };
        if let Some(extra) = rec.keys().next() {
            return Err(CheckpointError::Malformed(format!("unexpected record `{extra}`")).into());
        }
        Ok(Self {
            optimizer: AdamW::from_parts(config.adamw(), counters.adam_step, first, second),
            schedule: config.noise_schedule()?,
            model,
            params,
            ema,
            norm,
            config,
            step: counters.step,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointCounters {
    step: u64,
    adam_step: u64,
}

/// Result of [`train_run`].
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub trainer: Trainer,
    pub metrics: Vec<StepOutcome>,
    /// `(completed steps, validation diffusion loss)`.
    pub validation: Vec<(u64, f64)>,
}

/// Trains for `config.epochs`, validating every `val_every` steps.
/// `on_step` sees each outcome as it is produced.
pub fn train_run(config: TrainConfig, on_step: impl FnMut(&StepOutcome)) -> Result<TrainRun> {
    resume_run(Trainer::new(config)?, on_step)
}

/// Continues `trainer` from its current step to the end of its schedule.
pub fn resume_run(trainer: Trainer, on_step: impl FnMut(&StepOutcome)) -> Result<TrainRun> {
    let total = trainer.config.total_steps();
    run_until(trainer, total, on_step)
}

/// Trains until `stop` steps are complete (capped by the schedule).
/// Validation points fall on the same steps as in an uninterrupted run.
pub fn run_until(mut trainer: Trainer, stop: u64, mut on_step: impl FnMut(&StepOutcome)) -> Result<TrainRun> {
    let total = trainer.config.total_steps();
    let stop = stop.min(total);
    let val_batch = if trainer.config.val_every > 0 {
        trainer.validation_batch()?
    } else {
        Vec::new()
    };
    let mut metrics = Vec::with_capacity(stop.saturating_sub(trainer.step) as usize);
    let mut validation = Vec::new();
    while trainer.step < stop {
        let out = trainer.train_step()?;
        on_step(&out);
        metrics.push(out);
        let done = trainer.step;
        if trainer.config.val_every > 0 && (done.is_multiple_of(trainer.config.val_every) || done == total) {
            validation.push((done, trainer.validation_loss(&trainer.params, &val_batch)?));
        }
    }
    Ok(TrainRun {
        trainer,
        metrics,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            samples_per_epoch: 8,
            lr_warmup_epochs: 1.0,
            norm_samples: 16,
            val_samples: 4,
            model: ModelConfig::tiny(),
            image_side: 16,
            ..Default::default()
        }
    }

    #[test]
    fn lr_warmup_then_constant() {
        let c = TrainConfig::default();
        let spe = c.steps_per_epoch();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(12 * spe, &c), c.peak_lr);
        assert_eq!(lr_at(40 * spe + 3, &c), c.peak_lr);
        assert!((lr_at(6 * spe, &c) - 0.5 * c.peak_lr).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(small().validate().is_ok());
        let bad = TrainConfig {
            lr_warmup_epochs: 49.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            label_dropout: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            image_side: 16,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batches_are_keyed_by_step() {
        let t = Trainer::new(small()).unwrap();
        assert_eq!(t.prepare_batch(3).unwrap(), t.prepare_batch(3).unwrap());
        assert_ne!(t.prepare_batch(3).unwrap(), t.prepare_batch(2).unwrap());
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut t = Trainer::new(TrainConfig {
            peak_lr: 0.0,
            ..small()
        })
        .unwrap();
        let before = t.params.clone();
        for _ in 0..3 {
            t.train_step().unwrap();
        }
        for ((_, a), (_, b)) in before.iter().zip(t.params.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut t = Trainer::new(small()).unwrap();
        t.train_step().unwrap();
        let dir = std::env::temp_dir().join(format!("dream-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        t.save(&path).unwrap();
        let u = Trainer::load(&path).unwrap();
        assert_eq!(u.step, 1);
        assert_eq!(u.optimizer, t.optimizer);
        assert_eq!(u.norm, t.norm);
        for ((_, a), (_, b)) in t.ema.iter().zip(u.ema.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
