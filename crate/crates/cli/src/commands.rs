use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use dream::checkpoint::write_atomic;
use dream::decoding::{AlignmentScorer, DecodeConfig, DecodeRequest, Decoder, SampleManifest};
use dream::eval::{
    alignment_score, emit_report, linear_probe, robustness_curve, split_name, EvalReport, EvalSet,
    ProbeConfig, RetrievalResult,
};
use dream::masking::ScheduleKind;
use dream::synthdata::{dataset, parse_prompt, write_cache};
use dream::training::{
    run_until, train_run, write_metrics_csv, write_validation_csv, StepOutcome, TrainConfig, TrainRun,
    Trainer,
};
use dream::DreamError;
use dream_numerics::ParamSet;
use serde_json::json;

use crate::config::{FlatConfig, RunConfig};
use crate::manifest::{sidecar, write_json, RunManifest};
use crate::{AblateArgs, EvalArgs, GenDataArgs, SadArgs, SampleArgs, TrainArgs};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.csv";
pub const VALIDATION: &str = "validation.csv";
pub const MANIFEST: &str = "manifest.json";
pub const ABLATION: &str = "ablation.csv";

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Trainer> {
    Trainer::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)
        .map_err(DreamError::from)
        .with_context(|| format!("creating {}", dir.display()))
}

pub fn gen_data(a: &GenDataArgs) -> anyhow::Result<RunManifest> {
    let config: FlatConfig = [
        ("seed", json!(a.seed)),
        ("count", json!(a.count)),
        ("split", json!(split_name(a.split))),
        ("side", json!(a.side)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let mut manifest = RunManifest::begin("gen-data", a.seed, config);
    let samples = dataset(a.seed, a.count, a.split, a.side).collect::<dream::Result<Vec<_>>>()?;
    write_cache(&a.out, &samples).with_context(|| format!("writing {}", a.out.display()))?;
    manifest.metric("count", samples.len() as f64);
    manifest.artifact("cache", &a.out);
    eprintln!("wrote {} {} samples to {}", samples.len(), split_name(a.split), a.out.display());
    Ok(manifest.finish(&sidecar(&a.out))?)
}

fn progress(every: u64) -> impl FnMut(&StepOutcome) {
    move |o| {
        if every > 0 && (o.step + 1) % every == 0 {
            let b = &o.breakdown;
            eprintln!(
                "step {:>6} epoch {:>3} lr {:.2e} mask {:.3} diff {:.4} clip {:.4} joint {:.4}",
                o.step + 1,
                o.epoch,
                o.lr,
                o.mask_mean,
                b.diffusion,
                b.clip,
                b.joint
            );
        }
    }
}

/// Writes the artifacts of a finished run into `dir` and returns the manifest.
fn write_run(dir: &Path, config: &RunConfig, run: &TrainRun, start: RunManifest) -> anyhow::Result<RunManifest> {
    let mut manifest = start;
    let ckpt = dir.join(CHECKPOINT);
    run.trainer.save(&ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    let metrics = dir.join(METRICS);
    write_metrics_csv(&metrics, &run.metrics)?;
    let validation = dir.join(VALIDATION);
    write_validation_csv(&validation, &run.validation)?;
    let echo = dir.join("config.json");
    write_json(&echo, &config.to_flat())?;
    manifest.artifact("checkpoint", &ckpt);
    manifest.artifact("metrics", &metrics);
    manifest.artifact("validation", &validation);
    manifest.artifact("config", &echo);
    manifest.metric("steps", run.trainer.step as f64);
    if let Some(last) = run.metrics.last() {
        manifest.metric("final_diff_loss", last.breakdown.diffusion);
        manifest.metric("final_clip_loss", last.breakdown.clip);
        manifest.metric("final_joint", last.breakdown.joint);
    }
    if let Some(&(_, v)) = run.validation.last() {
        manifest.metric("final_val_diff_loss", v);
    }
    Ok(manifest.finish(&dir.join(MANIFEST))?)
}

pub fn train(a: &TrainArgs) -> anyhow::Result<RunManifest> {
    create_dir(&a.out_dir)?;
    let (config, trainer) = match &a.resume {
        Some(path) => {
            let trainer = load_checkpoint(path)?;
            let config = RunConfig {
                train: trainer.config.clone(),
                ..Default::default()
            };
            (config, trainer)
        }
        None => {
            let mut config = load_config(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                config.train.seed = seed;
            }
            let trainer = Trainer::new(config.train.clone())?;
            (config, trainer)
        }
    };
    let start = RunManifest::begin("train", config.train.seed, config.to_flat());
    let stop = a.stop_at.unwrap_or(u64::MAX);
    let run = run_until(trainer, stop, progress(a.log_every))?;
    let manifest = write_run(&a.out_dir, &config, &run, start)?;
    eprintln!("trained to step {} in {}", run.trainer.step, a.out_dir.display());
    Ok(manifest)
}

/// Decode settings from the optional config file, overridden by flags.
fn decode_config(a: &SampleArgs) -> anyhow::Result<DecodeConfig> {
    let mut c = load_config(a.config.as_deref())?.decode;
    if let Some(v) = a.steps {
        c.steps = v;
    }
    if let Some(v) = a.cfg {
        c.cfg = v;
    }
    if let Some(v) = a.cfg_schedule {
        c.cfg_schedule = v;
    }
    if let Some(v) = a.temperature {
        c.temperature = v;
    }
    if let Some(v) = a.infer_steps {
        c.infer_steps = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    c.validate()?;
    Ok(c)
}

fn weights(trainer: &Trainer, live: bool) -> &ParamSet<f32> {
    if live {
        &trainer.params
    } else {
        &trainer.ema
    }
}

fn write_sample(
    a: &SampleArgs,
    trainer: &Trainer,
    config: &DecodeConfig,
    req: &DecodeRequest,
    out: &dream::decoding::DecodeOutput,
) -> anyhow::Result<SampleManifest> {
    let image = out.image(&trainer.norm)?;
    write_atomic(&a.out, &image.to_ppm()).with_context(|| format!("writing {}", a.out.display()))?;
    let manifest = SampleManifest::new(&a.out.display().to_string(), req, config, out);
    write_json(&sidecar(&a.out), &manifest)?;
    eprintln!(
        "wrote {} (decoder passes {}{})",
        a.out.display(),
        out.ledger.decoder,
        out.score().map(|s| format!(", score {s:.4}")).unwrap_or_default()
    );
    Ok(manifest)
}

pub fn sample(a: &SampleArgs) -> anyhow::Result<SampleManifest> {
    let mut config = decode_config(a)?;
    config.k = 1;
    config.t_switch = None;
    config.nfe_budget = None;
    let prompt = parse_prompt(&a.prompt)?;
    let trainer = load_checkpoint(&a.checkpoint)?;
    let decoder = Decoder::new(&trainer.model, weights(&trainer, a.live), &trainer.schedule, config.clone())?;
    let req = DecodeRequest {
        prompt,
        seed: config.seed,
    };
    let out = decoder.decode(std::slice::from_ref(&req))?;
    write_sample(a, &trainer, &config, &req, &out[0])
}

pub fn sample_sad(a: &SadArgs) -> anyhow::Result<SampleManifest> {
    let mut config = decode_config(&a.sample)?;
    config.k = a.k;
    config.nfe_budget = a.budget;
    config.t_switch = a.t_switch;
    config.validate()?;
    config.resolve_switch()?;
    let prompt = parse_prompt(&a.sample.prompt)?;
    let trainer = load_checkpoint(&a.sample.checkpoint)?;
    let params = weights(&trainer, a.sample.live);
    let decoder = Decoder::new(&trainer.model, params, &trainer.schedule, config.clone())?;
    let req = DecodeRequest {
        prompt,
        seed: config.seed,
    };
    let mut scorer = AlignmentScorer {
        model: &trainer.model,
        params,
    };
    let out = decoder.sad_decode(std::slice::from_ref(&req), &mut scorer)?;
    write_sample(&a.sample, &trainer, &config, &req, &out[0])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn evaluate(
    trainer: &Trainer,
    params: &ParamSet<f32>,
    split: dream::synthdata::Split,
    count: usize,
    probe_count: usize,
    grid: &[f64],
    seed: u64,
) -> anyhow::Result<EvalReport> {
    let c = &trainer.config;
    let set = EvalSet::generate(c.seed, split, count, c.image_side)?;
    let probe_accuracy = if probe_count > 0 {
        let train = EvalSet::generate(c.seed, dream::synthdata::Split::Train, probe_count, c.image_side)?;
        Some(linear_probe(&trainer.model, params, &trainer.norm, &train, &set, &ProbeConfig::default())?)
    } else {
        None
    };
    let retrieval = robustness_curve(&trainer.model, params, &trainer.norm, &set, grid, seed)?;
    let validation_loss = trainer.validation_loss(params, &trainer.validation_batch()?)?;
    let alignment = alignment_score(&trainer.model, params, &trainer.norm, &set.images, &set.captions)?;
    Ok(EvalReport {
        seed,
        split: Some(split),
        probe_accuracy,
        retrieval,
        validation_loss: Some(validation_loss),
        alignment: Some(mean(&alignment)),
    })
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<EvalReport> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    let config: FlatConfig = [
        ("checkpoint", json!(a.checkpoint.display().to_string())),
        ("split", json!(split_name(a.split))),
        ("mask_grid", json!(a.mask_grid.0)),
        ("count", json!(a.count)),
        ("probe_count", json!(a.probe_count)),
        ("live", json!(a.live)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let mut manifest = RunManifest::begin("eval", a.seed, config);
    let report = evaluate(
        &trainer,
        weights(&trainer, a.live),
        a.split,
        a.count,
        a.probe_count,
        &a.mask_grid.0,
        a.seed,
    )?;
    emit_report(&report, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    for row in report.rows() {
        let name = match row.mask_ratio {
            Some(r) => format!("{}@{r}", row.metric),
            None => row.metric.clone(),
        };
        manifest.metric(name, row.value);
    }
    manifest.artifact("report", &a.out);
    manifest.finish(&sidecar(&a.out))?;
    eprint!("{}", report.summary());
    Ok(report)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub kind: ScheduleKind,
    pub config: TrainConfig,
    pub steps: u64,
    pub final_diff_loss: f64,
    pub final_clip_loss: f64,
    pub val_diff_loss: f64,
    pub retrieval: Vec<RetrievalResult>,
}

/// The fixed schedule is compared at a narrow, high-ratio setting.
pub fn ablation_config(base: &TrainConfig, kind: ScheduleKind) -> TrainConfig {
    let mut c = base.clone();
    c.mask.kind = kind;
    if kind == ScheduleKind::Fixed {
        c.mask.sigma = 0.25;
        c.mask.min = 0.7;
        c.mask.max = 1.0;
    }
    c
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("kind,sigma,min,max,steps,final_diff_loss,final_clip_loss,val_diff_loss");
    if let Some(first) = rows.first() {
        for r in &first.retrieval {
            write!(out, ",i2t@{0},t2i@{0}", r.mask_ratio).unwrap();
        }
    }
    out.push('\n');
    for row in rows {
        let m = &row.config.mask;
        write!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.kind.code(),
            m.sigma,
            m.min,
            m.max,
            row.steps,
            row.final_diff_loss,
            row.final_clip_loss,
            row.val_diff_loss
        )
        .unwrap();
        for r in &row.retrieval {
            write!(out, ",{},{}", r.image_to_text, r.text_to_image).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn ablate_mask(a: &AblateArgs) -> anyhow::Result<Vec<AblationRow>> {
    let base = load_config(a.config.as_deref())?;
    let kinds = a
        .kinds
        .split(',')
        .map(ScheduleKind::parse)
        .collect::<dream::Result<Vec<_>>>()?;
    create_dir(&a.out_dir)?;
    let mut manifest = RunManifest::begin("ablate-mask", base.train.seed, base.to_flat());
    let mut rows = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let config = RunConfig {
            train: ablation_config(&base.train, kind),
            decode: base.decode.clone(),
        };
        config.train.validate()?;
        let dir: PathBuf = a.out_dir.join(kind.code());
        create_dir(&dir)?;
        eprintln!("ablation {}: {} steps", kind.code(), config.train.total_steps());
        let start = RunManifest::begin("train", config.train.seed, config.to_flat());
        let run = train_run(config.train.clone(), progress(a.log_every))?;
        write_run(&dir, &config, &run, start)?;
        let t = &run.trainer;
        let set = EvalSet::generate(t.config.seed, dream::synthdata::Split::Val, a.eval_count, t.config.image_side)?;
        let retrieval = robustness_curve(&t.model, &t.ema, &t.norm, &set, &a.mask_grid.0, 0)?;
        let last = run.metrics.last().map(|m| m.breakdown);
        let row = AblationRow {
            kind,
            steps: t.step,
            final_diff_loss: last.as_ref().map_or(f64::NAN, |b| b.diffusion),
            final_clip_loss: last.as_ref().map_or(f64::NAN, |b| b.clip),
            val_diff_loss: t.validation_loss(&t.ema, &t.validation_batch()?)?,
            retrieval,
            config: config.train,
        };
        for r in &row.retrieval {
            manifest.metric(format!("{}.i2t@{}", kind.code(), r.mask_ratio), r.image_to_text);
        }
        manifest.metric(format!("{}.val_diff_loss", kind.code()), row.val_diff_loss);
        manifest.artifact(kind.code(), &dir);
        rows.push(row);
    }
    let csv = a.out_dir.join(ABLATION);
    write_atomic(&csv, ablation_csv(&rows).as_bytes()).with_context(|| format!("writing {}", csv.display()))?;
    manifest.artifact("table", &csv);
    manifest.finish(&a.out_dir.join(MANIFEST))?;
    eprint!("{}", ablation_csv(&rows));
    Ok(rows)
}
