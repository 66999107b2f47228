//! Iterative masked generation with random reveal orders, per-token
//! ancestral sampling through the diffusion head, classifier-free guidance,
//! and semantically aligned candidate selection.
//!
//! All trajectories of a call advance in lockstep: every candidate reveals the
//! same number of tokens per step, so encoder, decoder and head passes are
//! batched across candidates while each candidate keeps its own RNG
//! substream.

use std::f64::consts::FRAC_PI_2;

use dream_numerics::{Graph, ParamSet, Scalar};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DreamError, Result};
use crate::losses::NoiseSchedule;
use crate::masking::{masked_count, MaskState};
use crate::model::{DreamModel, EncoderInput};
use crate::rng::{substream, tag, Rng};
use crate::synthdata::{CaptionTokens, Image};
use crate::tokenizer::{detokenize, LatentGrid, NormStats};

pub const DEFAULT_STEPS: usize = 64;
pub const DEFAULT_CFG: f64 = 5.0;

/// Candidates per batched forward pass; bounds activation memory.
const CHUNK: usize = 64;

/// Fraction of tokens still masked after `step`: `cos(pi/2 * (step+1)/S)`.
pub fn anneal_ratio(step: usize, steps: usize) -> f64 {
    if step + 1 >= steps {
        return 0.0;
    }
    (FRAC_PI_2 * (step + 1) as f64 / steps as f64).cos()
}

/// Tokens revealed at each step. Follows the cosine annealing but forces at
/// least one reveal per step while leaving enough masked tokens for the
/// remaining steps.
pub fn unmask_plan(steps: usize, n_tokens: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > n_tokens {
        return Err(DreamError::Config(format!(
            "{steps} decoding steps cannot reveal {n_tokens} tokens at least one per step"
        )));
    }
    let mut plan = Vec::with_capacity(steps);
    let mut remaining = n_tokens;
    for s in 0..steps {
        let target = masked_count(anneal_ratio(s, steps), n_tokens);
        let next = target.max(steps - 1 - s).min(remaining - 1);
        plan.push(remaining - next);
        remaining = next;
    }
    debug_assert_eq!(remaining, 0);
    Ok(plan)
}

/// Evenly strided timesteps from `T` down to 1 followed by the terminal 0.
/// Stride positions are `round(j (T-1)/(T'-1))` over the 0-based index range.
pub fn resample_timesteps(train_steps: usize, infer_steps: usize) -> Result<Vec<usize>> {
    if infer_steps == 0 || infer_steps > train_steps {
        return Err(DreamError::Config(format!(
            "inference steps must be in 1..={train_steps}, got {infer_steps}"
        )));
    }
    let mut ts: Vec<usize> = if infer_steps == 1 {
        vec![train_steps]
    } else {
        let stride = (train_steps - 1) as f64 / (infer_steps - 1) as f64;
        (0..infer_steps)
            .map(|j| 1 + (j as f64 * stride).round() as usize)
            .collect()
    };
    ts.reverse();
    ts.push(0);
    Ok(ts)
}

/// One reverse transition `t -> t_prev` of a respaced chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorStep {
    pub t: usize,
    pub t_prev: usize,
    pub sqrt_alpha_bar: f64,
    pub sqrt_one_minus_alpha_bar: f64,
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}

/// Posterior coefficients along a respaced subsequence, with betas recomputed
/// from the ratio of consecutive `alpha_bar` values.
pub fn respaced_posterior(schedule: &NoiseSchedule, timesteps: &[usize]) -> Vec<PosteriorStep> {
    timesteps
        .windows(2)
        .map(|w| {
            let (t, t_prev) = (w[0], w[1]);
            let ab = schedule.alpha_bar(t);
            let ab_prev = schedule.alpha_bar(t_prev);
            let beta = 1.0 - ab / ab_prev;
            PosteriorStep {
                t,
                t_prev,
                sqrt_alpha_bar: ab.sqrt(),
                sqrt_one_minus_alpha_bar: (1.0 - ab).sqrt(),
                coef_x0: ab_prev.sqrt() * beta / (1.0 - ab),
                coef_xt: (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
                variance: beta * (1.0 - ab_prev) / (1.0 - ab),
            }
        })
        .collect()
}

/// Ancestral update from the predicted noise. Fresh noise is drawn for every
/// non-terminal transition and scaled by `temperature`.
pub fn p_sample(step: &PosteriorStep, x_t: &[f64], eps: &[f64], temperature: f64, rng: &mut Rng) -> Vec<f64> {
    x_t.iter()
        .zip(eps)
        .map(|(&x, &e)| {
            let x0 = (x - step.sqrt_one_minus_alpha_bar * e) / step.sqrt_alpha_bar;
            let mean = step.coef_x0 * x0 + step.coef_xt * x;
            if step.t_prev == 0 {
                mean
            } else {
                let z: f64 = rng.sample(StandardNormal);
                mean + temperature * step.variance.sqrt() * z
            }
        })
        .collect()
}

/// Runs a full reverse chain from `x_T` with a caller-supplied noise
/// predictor `eps(x_t, t)`.
pub fn ancestral_sample<F>(
    x_t: Vec<f64>,
    steps: &[PosteriorStep],
    temperature: f64,
    rng: &mut Rng,
    mut eps: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut x = x_t;
    for st in steps {
        let e = eps(&x, st.t)?;
        x = p_sample(st, &x, &e, temperature, rng);
    }
    Ok(x)
}

/// Guided noise `(1 - w) eps_u + w eps_c`. The endpoints return the inputs
/// unchanged so `w = 0` and `w = 1` reproduce the single-branch paths exactly.
pub fn cfg_eps(eps_u: &[f64], eps_c: &[f64], w: f64) -> Vec<f64> {
    if w == 0.0 {
        return eps_u.to_vec();
    }
    if w == 1.0 {
        return eps_c.to_vec();
    }
    eps_u
        .iter()
        .zip(eps_c)
        .map(|(u, c)| (1.0 - w) * u + w * c)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CfgSchedule {
    #[default]
    Constant,
    /// Ramps from 0 at the first step to the configured weight at the last.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub steps: usize,
    pub temperature: f64,
    pub cfg: f64,
    pub cfg_schedule: CfgSchedule,
    pub infer_steps: usize,
    pub k: usize,
    pub t_switch: Option<usize>,
    pub nfe_budget: Option<usize>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            temperature: 1.0,
            cfg: DEFAULT_CFG,
            cfg_schedule: CfgSchedule::Constant,
            infer_steps: crate::losses::DEFAULT_INFER_STEPS,
            k: 1,
            t_switch: None,
            nfe_budget: None,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DreamError::Config("decode.steps must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(DreamError::Config("decode.temperature must be finite and >= 0".into()));
        }
        if !(self.cfg.is_finite() && self.cfg >= 0.0) {
            return Err(DreamError::Config("decode.cfg must be finite and >= 0".into()));
        }
        if self.infer_steps == 0 {
            return Err(DreamError::Config("decode.infer_steps must be positive".into()));
        }
        if self.k == 0 {
            return Err(DreamError::Config("decode.k must be positive".into()));
        }
        Ok(())
    }

    /// Guidance weight at `step`.
    pub fn cfg_at(&self, step: usize) -> f64 {
        match self.cfg_schedule {
            CfgSchedule::Constant => self.cfg,
            CfgSchedule::Linear if self.steps <= 1 => self.cfg,
            CfgSchedule::Linear => self.cfg * step as f64 / (self.steps - 1) as f64,
        }
    }

    /// Whether the unconditional branch is needed at all.
    pub fn guided(&self) -> bool {
        !(self.cfg_schedule == CfgSchedule::Constant && self.cfg == 1.0)
    }

    /// Switch step for candidate selection: explicit, derived from the
    /// budget, or 0 for a single candidate.
    pub fn resolve_switch(&self) -> Result<usize> {
        let from_budget = self
            .nfe_budget
            .map(|b| budget_to_switch(b, self.steps, self.k))
            .transpose()?;
        let t = match (self.t_switch, from_budget) {
            (Some(a), Some(b)) if a != b => {
                return Err(DreamError::Config(format!(
                    "decode.t_switch = {a} disagrees with budget-derived switch {b}"
                )))
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) if self.k == 1 => 0,
            (None, None) => {
                return Err(DreamError::Config(
                    "decode.k > 1 needs decode.t_switch or decode.nfe_budget".into(),
                ))
            }
        };
        if self.k > 1 && !(1..self.steps).contains(&t) {
            return Err(DreamError::Config(format!(
                "decode.t_switch must be in 1..{}, got {t}",
                self.steps
            )));
        }
        Ok(if self.k == 1 { 0 } else { t })
    }
}

/// Switch step that spends exactly `budget` trajectory steps:
/// `K * T + (S - T) = budget`.
pub fn budget_to_switch(budget: usize, steps: usize, k: usize) -> Result<usize> {
    if k == 0 || steps == 0 {
        return Err(DreamError::InfeasibleBudget("K and S must be positive".into()));
    }
    let feasible = |k: usize, t: usize| k * t + steps - t;
    if k == 1 {
        if budget == steps {
            return Ok(0);
        }
        return Err(DreamError::InfeasibleBudget(format!(
            "a single candidate always spends {steps} steps, budget is {budget}{}",
            suggest(budget, steps, k)
        )));
    }
    if budget > steps && (budget - steps).is_multiple_of(k - 1) {
        let t = (budget - steps) / (k - 1);
        if t < steps {
            debug_assert_eq!(feasible(k, t), budget);
            return Ok(t);
        }
    }
    Err(DreamError::InfeasibleBudget(format!(
        "budget {budget} with S={steps}, K={k} has no integer switch step in 1..{steps}{}",
        suggest(budget, steps, k)
    )))
}

/// Nearest feasible `(K, T_switch)` for the budget, preferring the closest K.
fn suggest(budget: usize, steps: usize, k: usize) -> String {
    let best = (2..=budget.max(2))
        .filter_map(|kk| {
            let extra = budget.checked_sub(steps)?;
            (extra > 0 && extra % (kk - 1) == 0 && extra / (kk - 1) < steps)
                .then(|| (kk, extra / (kk - 1)))
        })
        .min_by_key(|&(kk, _)| (kk.abs_diff(k), kk));
    match best {
        Some((kk, t)) => format!("; nearest feasible: K={kk}, T_switch={t}"),
        None => format!("; no multi-candidate plan fits, use K=1 with budget {steps}"),
    }
}

/// Forward-pass tallies for one request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeLedger {
    pub encoder: u64,
    pub decoder: u64,
    pub head: u64,
    pub scoring_encoder: u64,
    /// Trajectory steps summed over candidates.
    pub steps: u64,
}

impl NfeLedger {
    /// Closed-form totals for a decode with the given plan.
    pub fn analytic(steps: usize, k: usize, t_switch: usize, infer_steps: usize, guided: bool) -> Self {
        let traj = (k * t_switch + steps - t_switch) as u64;
        let branches = if guided { 2 } else { 1 };
        Self {
            encoder: traj,
            decoder: traj * branches,
            head: traj * branches * infer_steps as u64,
            scoring_encoder: if k > 1 { k as u64 } else { 0 },
            steps: traj,
        }
    }
}

/// A partially decoded trajectory.
#[derive(Debug, Clone)]
pub struct Candidate {
    /// `[n_tokens, channels]`; masked positions hold zeros.
    pub values: Vec<f64>,
    pub mask: MaskState,
    pub rng: Rng,
    pub revealed: usize,
}

impl Candidate {
    fn new(n_tokens: usize, channels: usize, seed: u64, index: usize) -> Self {
        Self {
            values: vec![0.0; n_tokens * channels],
            mask: MaskState::from_bitmap(vec![true; n_tokens]),
            rng: substream(seed, &[tag::DECODE, index as u64]),
            revealed: 0,
        }
    }

    pub fn encoder_input(&self, channels: usize) -> Result<EncoderInput> {
        EncoderInput::from_grid(&self.values, channels, &self.mask)
    }
}

/// Scores partially decoded candidates against their prompt; higher wins.
pub trait CandidateScorer {
    fn score(&mut self, prompt: &CaptionTokens, candidates: &[&Candidate]) -> Result<Vec<f64>>;
}

/// Index of the highest score; ties and NaNs resolve to the lowest index.
pub fn select_best(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    best
}

/// Cosine similarity between the pooled encoding of the revealed tokens and
/// the contrastive caption embedding.
pub struct AlignmentScorer<'a, T: Scalar> {
    pub model: &'a DreamModel,
    pub params: &'a ParamSet<T>,
}

impl<T: Scalar> CandidateScorer for AlignmentScorer<'_, T> {
    fn score(&mut self, prompt: &CaptionTokens, candidates: &[&Candidate]) -> Result<Vec<f64>> {
        let c = self.model.config.token_channels;
        let inputs = candidates
            .iter()
            .map(|cand| cand.encoder_input(c))
            .collect::<Result<Vec<_>>>()?;
        alignment_scores(self.model, self.params, &inputs, &vec![*prompt; inputs.len()])
    }
}

/// Cosine similarity of each encoded input with its caption.
pub fn alignment_scores<T: Scalar>(
    model: &DreamModel,
    params: &ParamSet<T>,
    inputs: &[EncoderInput],
    captions: &[CaptionTokens],
) -> Result<Vec<f64>> {
    if inputs.len() != captions.len() {
        return Err(DreamError::Input("one caption per encoded input expected".into()));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for (inp, cap) in inputs.chunks(CHUNK).zip(captions.chunks(CHUNK)) {
        let mut g = Graph::inference();
        let enc = model.encoder_forward(&mut g, params, inp)?;
        let txt = model.text_encode_contrastive(&mut g, params, cap)?;
        let e = model.config.embed_dim;
        let (iv, tv) = (g.value(enc.pooled), g.value(txt));
        for i in 0..inp.len() {
            out.push(
                (0..e)
                    .map(|j| iv[i * e + j].to_f64_lossy() * tv[i * e + j].to_f64_lossy())
                    .sum(),
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeRequest {
    pub prompt: CaptionTokens,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub grid: LatentGrid,
    pub ledger: NfeLedger,
    pub selected: usize,
    /// Candidate scores at the switch step; empty for a single candidate.
    pub scores: Vec<f64>,
    pub t_switch: usize,
}

impl DecodeOutput {
    pub fn score(&self) -> Option<f64> {
        self.scores.get(self.selected).copied()
    }

    pub fn image(&self, norm: &NormStats) -> Result<Image> {
        detokenize(&self.grid, norm)
    }
}

/// Sampler bound to one set of weights.
pub struct Decoder<'a, T: Scalar> {
    model: &'a DreamModel,
    params: &'a ParamSet<T>,
    config: DecodeConfig,
    plan: Vec<usize>,
    posterior: Vec<PosteriorStep>,
}

impl<'a, T: Scalar> Decoder<'a, T> {
    pub fn new(
        model: &'a DreamModel,
        params: &'a ParamSet<T>,
        schedule: &NoiseSchedule,
        config: DecodeConfig,
    ) -> Result<Self> {
        config.validate()?;
        if model.config.buffer_tokens == 0 {
            return Err(DreamError::Config(
                "decoding starts from an empty canvas and needs at least one buffer token".into(),
            ));
        }
        let plan = unmask_plan(config.steps, model.config.n_tokens())?;
        let ts = resample_timesteps(schedule.steps(), config.infer_steps)?;
        let posterior = respaced_posterior(schedule, &ts);
        Ok(Self {
            model,
            params,
            config,
            plan,
            posterior,
        })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn plan(&self) -> &[usize] {
        &self.plan
    }

    /// Plain decoding, one trajectory per request.
    pub fn decode(&self, requests: &[DecodeRequest]) -> Result<Vec<DecodeOutput>> {
        self.run(requests, 1, 0, None)
    }

    /// Candidate search with `config.k` trajectories per request; only the
    /// best scorer at the switch step is completed.
    pub fn sad_decode(
        &self,
        requests: &[DecodeRequest],
        scorer: &mut dyn CandidateScorer,
    ) -> Result<Vec<DecodeOutput>> {
        let t_switch = self.config.resolve_switch()?;
        self.run(requests, self.config.k, t_switch, Some(scorer))
    }

    fn run(
        &self,
        requests: &[DecodeRequest],
        k: usize,
        t_switch: usize,
        mut scorer: Option<&mut dyn CandidateScorer>,
    ) -> Result<Vec<DecodeOutput>> {
        let cfg = &self.model.config;
        let (n, ch) = (cfg.n_tokens(), cfg.token_channels);
        let mut cands: Vec<Candidate> = requests
            .iter()
            .flat_map(|r| (0..k).map(move |j| Candidate::new(n, ch, r.seed, j)))
            .collect();
        let mut owner: Vec<usize> = (0..requests.len()).flat_map(|i| vec![i; k]).collect();
        let mut ledgers = vec![NfeLedger::default(); requests.len()];
        let mut scores = vec![Vec::new(); requests.len()];
        let mut selected = vec![0; requests.len()];

        for s in 0..self.config.steps {
            if k > 1 && s == t_switch {
                let sc = scorer
                    .as_deref_mut()
                    .ok_or_else(|| DreamError::Config("candidate search needs a scorer".into()))?;
                let mut groups = std::mem::take(&mut cands).into_iter();
                for (r, req) in requests.iter().enumerate() {
                    let group: Vec<Candidate> = groups.by_ref().take(k).collect();
                    let refs: Vec<&Candidate> = group.iter().collect();
                    let sv = sc.score(&req.prompt, &refs)?;
                    if sv.len() != k {
                        return Err(DreamError::Input(format!(
                            "scorer returned {} scores for {k} candidates",
                            sv.len()
                        )));
                    }
                    ledgers[r].scoring_encoder += k as u64;
                    selected[r] = select_best(&sv);
                    scores[r] = sv;
                    cands.push(group.into_iter().nth(selected[r]).expect("index within group"));
                }
                owner = (0..requests.len()).collect();
            }
            let prompts: Vec<CaptionTokens> = owner.iter().map(|&o| requests[o].prompt).collect();
            self.advance(&mut cands, &prompts, s, &owner, &mut ledgers)?;
        }

        let side = cfg.grid_side;
        Ok(cands
            .into_iter()
            .zip(ledgers)
            .zip(scores.into_iter().zip(selected))
            .map(|((c, ledger), (scores, selected))| {
                debug_assert_eq!(c.revealed, n);
                DecodeOutput {
                    grid: LatentGrid {
                        side,
                        channels: ch,
                        values: c.values,
                    },
                    ledger,
                    selected,
                    scores,
                    t_switch,
                }
            })
            .collect())
    }

    /// One decoding step for every candidate.
    fn advance(
        &self,
        cands: &mut [Candidate],
        prompts: &[CaptionTokens],
        step: usize,
        owner: &[usize],
        ledgers: &mut [NfeLedger],
    ) -> Result<()> {
        let ch = self.model.config.token_channels;
        let reveal = self.plan[step];
        let w = self.config.cfg_at(step);
        let guided = self.config.guided();
        let branches = if guided { 2 } else { 1 };
        for start in (0..cands.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(cands.len());
            let block = &mut cands[start..end];
            let picks: Vec<Vec<usize>> = block
                .iter_mut()
                .map(|c| {
                    let masked = c.mask.masked_positions();
                    let mut p: Vec<usize> = rand::seq::index::sample(&mut c.rng, masked.len(), reveal)
                        .into_iter()
                        .map(|j| masked[j])
                        .collect();
                    p.sort_unstable();
                    p
                })
                .collect();
            let (zc, zu) = self.condition(block, &prompts[start..end], &picks, guided)?;

            let width = reveal * ch;
            let mut x: Vec<f64> = Vec::with_capacity(block.len() * width);
            for c in block.iter_mut() {
                x.extend((0..width).map(|_| c.rng.sample::<f64, _>(StandardNormal)));
            }
            for st in &self.posterior {
                let eps_c = self.head_eps(&x, st.t, &zc)?;
                let eps = match &zu {
                    Some(zu) => cfg_eps(&self.head_eps(&x, st.t, zu)?, &eps_c, w),
                    None => eps_c,
                };
                let mut next = Vec::with_capacity(x.len());
                for (b, c) in block.iter_mut().enumerate() {
                    let r = b * width..(b + 1) * width;
                    next.extend(p_sample(st, &x[r.clone()], &eps[r], self.config.temperature, &mut c.rng));
                }
                x = next;
            }

            for (b, c) in block.iter_mut().enumerate() {
                let vals = &x[b * width..(b + 1) * width];
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(DreamError::NonFiniteLatent(step));
                }
                let mut masked = std::mem::take(&mut c.mask.masked);
                for (j, &p) in picks[b].iter().enumerate() {
                    c.values[p * ch..(p + 1) * ch].copy_from_slice(&vals[j * ch..(j + 1) * ch]);
                    masked[p] = false;
                }
                c.mask = MaskState::from_bitmap(masked);
                c.revealed += reveal;
                let l = &mut ledgers[owner[start + b]];
                l.encoder += 1;
                l.decoder += branches;
                l.head += branches * self.posterior.len() as u64;
                l.steps += 1;
            }
        }
        Ok(())
    }

    /// Conditioning rows for the positions about to be revealed, conditional
    /// and (when guided) unconditional, `[candidates * reveal, width]`.
    fn condition(
        &self,
        block: &[Candidate],
        prompts: &[CaptionTokens],
        picks: &[Vec<usize>],
        guided: bool,
    ) -> Result<(Vec<T>, Option<Vec<T>>)> {
        let (model, ps) = (self.model, self.params);
        let n = model.config.n_tokens();
        let inputs = block
            .iter()
            .map(|c| c.encoder_input(model.config.token_channels))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::inference();
        let enc = model.encoder_forward(&mut g, ps, &inputs)?;
        let samples: Vec<usize> = (0..block.len()).collect();
        let masks: Vec<&MaskState> = block.iter().map(|c| &c.mask).collect();
        let idx: Vec<usize> = picks
            .iter()
            .enumerate()
            .flat_map(|(b, p)| p.iter().map(move |&p| b * n + p))
            .collect();
        let branch = |g: &mut Graph<T>, caps: &[CaptionTokens]| -> Result<Vec<T>> {
            let cond = model.text_encode_cond(g, ps, caps)?;
            let z = model.decoder_forward(g, ps, &enc, &samples, &masks, cond)?;
            let z = g.gather_rows(z, &idx)?;
            Ok(g.value(z).to_vec())
        };
        let zc = branch(&mut g, prompts)?;
        let zu = if guided {
            Some(branch(&mut g, &vec![CaptionTokens::null(); block.len()])?)
        } else {
            None
        };
        Ok((zc, zu))
    }

    fn head_eps(&self, x: &[f64], t: usize, z: &[T]) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        let rows = x.len() / cfg.token_channels;
        let mut g = Graph::inference();
        let xv = g.constant_from(
            [rows, cfg.token_channels],
            x.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )?;
        let zv = g.constant_from([rows, cfg.width], z.to_vec())?;
        let e = self.model.diffusion_head(&mut g, self.params, xv, &vec![t; rows], zv)?;
        Ok(g.value(e).iter().map(|v| v.to_f64_lossy()).collect())
    }
}

/// Sidecar record written next to each generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub image: String,
    pub prompt: String,
    pub prompt_tokens: Vec<u16>,
    pub seed: u64,
    pub steps: usize,
    pub cfg: f64,
    pub cfg_schedule: CfgSchedule,
    pub temperature: f64,
    pub k: usize,
    pub t_switch: usize,
    pub nfe: NfeLedger,
    pub score: Option<f64>,
}

impl SampleManifest {
    pub fn new(image: &str, req: &DecodeRequest, config: &DecodeConfig, out: &DecodeOutput) -> Self {
        Self {
            image: image.to_string(),
            prompt: req.prompt.text(),
            prompt_tokens: req.prompt.tokens().to_vec(),
            seed: req.seed,
            steps: config.steps,
            cfg: config.cfg,
            cfg_schedule: config.cfg_schedule,
            temperature: config.temperature,
            k: if out.scores.is_empty() { 1 } else { out.scores.len() },
            t_switch: out.t_switch,
            nfe: out.ledger,
            score: out.score(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn anneal_endpoints() {
        assert_eq!(anneal_ratio(0, 1), 0.0);
        assert_eq!(anneal_ratio(63, 64), 0.0);
        let r: Vec<f64> = (0..64).map(|s| anneal_ratio(s, 64)).collect();
        assert!(r.windows(2).all(|w| w[1] < w[0]));
        assert!(r[0] < 1.0);
    }

    #[test]
    fn plan_shapes() {
        assert_eq!(unmask_plan(1, 64).unwrap(), vec![64]);
        assert_eq!(unmask_plan(64, 64).unwrap(), vec![1; 64]);
        assert!(unmask_plan(65, 64).is_err());
        assert!(unmask_plan(0, 64).is_err());
    }

    /// Matches the stride positions of the usual respacing helper, which
    /// works on 0-based indices `round(j * (T-1)/(T'-1))`.
    #[test]
    fn respacing_indices() {
        let ts = resample_timesteps(1000, 100).unwrap();
        assert_eq!(ts.len(), 101);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[99], 1);
        assert_eq!(ts[100], 0);
        // j = 1: round(999/99) = round(10.0909) = 10, so t = 11.
        assert_eq!(ts[98], 11);
        // j = 50: round(50 * 10.0909) = round(504.545) = 505.
        assert_eq!(ts[49], 506);
        assert_eq!(resample_timesteps(5, 5).unwrap(), vec![5, 4, 3, 2, 1, 0]);
        assert_eq!(resample_timesteps(1000, 1).unwrap(), vec![1000, 0]);
    }

    #[test]
    fn identity_respacing_keeps_betas() {
        let sched = NoiseSchedule::cosine(1000, 0.008).unwrap();
        let ts = resample_timesteps(1000, 1000).unwrap();
        for st in respaced_posterior(&sched, &ts) {
            let beta = 1.0 - sched.alpha_bar(st.t) / sched.alpha_bar(st.t_prev);
            assert!((beta - sched.beta(st.t)).abs() < 1e-12, "t={}", st.t);
        }
    }

    #[test]
    fn one_jump_inverts_oracle_noise() {
        let sched = NoiseSchedule::cosine(1000, 0.008).unwrap();
        let steps = respaced_posterior(&sched, &resample_timesteps(1000, 1).unwrap());
        let x0 = vec![0.3, -1.2, 2.0, 0.0];
        let eps = vec![1.1, -0.4, 0.25, -2.0];
        let xt = sched.q_sample(&x0, 1000, &eps);
        let mut rng = Rng::seed_from_u64(1);
        let out = ancestral_sample(xt, &steps, 1.0, &mut rng, |_, _| Ok(eps.clone())).unwrap();
        for (a, b) in out.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_temperature_ignores_noise_stream() {
        let sched = NoiseSchedule::cosine(1000, 0.008).unwrap();
        let steps = respaced_posterior(&sched, &resample_timesteps(1000, 20).unwrap());
        let eps = |x: &[f64], t: usize| Ok(x.iter().map(|v| 0.5 * v + t as f64 * 1e-4).collect());
        let x = vec![0.4, -0.7];
        let a = ancestral_sample(x.clone(), &steps, 0.0, &mut Rng::seed_from_u64(1), eps).unwrap();
        let b = ancestral_sample(x.clone(), &steps, 0.0, &mut Rng::seed_from_u64(2), eps).unwrap();
        assert_eq!(a, b);
        let c = ancestral_sample(x, &steps, 1.0, &mut Rng::seed_from_u64(2), eps).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cfg_endpoints_are_exact() {
        let u = [0.1, -0.0, 3.0];
        let c = [-2.0, 5.0, f64::MIN_POSITIVE];
        assert_eq!(cfg_eps(&u, &c, 0.0), u.to_vec());
        assert_eq!(cfg_eps(&u, &c, 1.0), c.to_vec());
        let g = cfg_eps(&u, &c, 5.0);
        assert!((g[0] - (0.1 + 5.0 * (-2.1))).abs() < 1e-12);
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(budget_to_switch(128, 64, 9).unwrap(), 8);
        assert_eq!(budget_to_switch(128, 64, 17).unwrap(), 4);
        assert_eq!(budget_to_switch(64, 64, 1).unwrap(), 0);
        let err = budget_to_switch(128, 64, 8).unwrap_err().to_string();
        assert!(err.contains("nearest feasible: K=9, T_switch=8"), "{err}");
        assert!(matches!(budget_to_switch(64, 64, 4), Err(DreamError::InfeasibleBudget(_))));
        assert_eq!(9 * 8 + (64 - 8), 128);
    }

    #[test]
    fn linear_cfg_ramp() {
        let c = DecodeConfig {
            steps: 5,
            cfg: 4.0,
            cfg_schedule: CfgSchedule::Linear,
            ..Default::default()
        };
        let w: Vec<f64> = (0..5).map(|s| c.cfg_at(s)).collect();
        assert_eq!(w, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(select_best(&[0.2, 0.5, 0.5, 0.1]), 1);
        assert_eq!(select_best(&[f64::NAN, 0.0]), 1);
        assert_eq!(select_best(&[1.0]), 0);
    }

    #[test]
    fn switch_resolution() {
        let mut c = DecodeConfig {
            k: 9,
            nfe_budget: Some(128),
            ..Default::default()
        };
        assert_eq!(c.resolve_switch().unwrap(), 8);
        c.t_switch = Some(7);
        assert!(c.resolve_switch().is_err());
        c.nfe_budget = None;
        assert_eq!(c.resolve_switch().unwrap(), 7);
        c.t_switch = Some(64);
        assert!(c.resolve_switch().is_err());
    }
}
