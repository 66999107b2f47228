//! Evaluation on frozen weights: a linear probe over pooled encoder features,
//! caption retrieval at varying mask ratios, and alignment scores for
//! generated images.

use std::io::Write;
use std::path::Path;

use dream_numerics::{Graph, ParamSet, Scalar};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::decoding::alignment_scores;
use crate::error::{DreamError, Result};
use crate::masking::{make_mask, MaskState};
use crate::model::{DreamModel, EncoderInput};
use crate::rng::{substream, tag};
use crate::synthdata::{sample_at, CaptionTokens, Image, Split};
use crate::tokenizer::{tokenize, NormStats};

/// Batch size for inference passes.
const CHUNK: usize = 64;

/// Labeled images drawn from one split.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub split: Split,
    pub images: Vec<Image>,
    pub captions: Vec<CaptionTokens>,
    /// Shape class of each image.
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn generate(seed: u64, split: Split, count: usize, side: usize) -> Result<Self> {
        let mut set = Self {
            split,
            images: Vec::with_capacity(count),
            captions: Vec::with_capacity(count),
            labels: Vec::with_capacity(count),
        };
        for i in 0..count as u64 {
            let s = sample_at(seed, split, i, side)?;
            set.labels.push(s.spec.shape_id());
            set.images.push(s.image);
            set.captions.push(s.caption);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Distinct captions in ascending token order.
    pub fn distinct_captions(&self) -> Vec<CaptionTokens> {
        let mut caps = self.captions.clone();
        caps.sort_by_key(|c| *c.tokens());
        caps.dedup();
        caps
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
    }
}

fn encoder_inputs(
    model: &DreamModel,
    norm: &NormStats,
    images: &[Image],
    masks: &[MaskState],
) -> Result<Vec<EncoderInput>> {
    let c = model.config.token_channels;
    images
        .iter()
        .zip(masks)
        .map(|(img, m)| EncoderInput::from_grid(&tokenize(img, norm)?.values, c, m))
        .collect()
}

/// Globally averaged final encoder features, one row per input.
pub fn pooled_features<T: Scalar>(
    model: &DreamModel,
    params: &ParamSet<T>,
    inputs: &[EncoderInput],
) -> Result<Vec<Vec<f64>>> {
    let d = model.config.width;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let mut g = Graph::inference();
        let enc = model.encoder_forward(&mut g, params, chunk)?;
        let pooled = model.global_pool(&mut g, &enc)?;
        out.extend(
            g.value(pooled)
                .chunks_exact(d)
                .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()),
        );
    }
    Ok(out)
}

/// Unit-norm contrastive image embeddings.
pub fn image_embeddings<T: Scalar>(
    model: &DreamModel,
    params: &ParamSet<T>,
    inputs: &[EncoderInput],
) -> Result<Vec<Vec<f64>>> {
    let e = model.config.embed_dim;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let mut g = Graph::inference();
        let enc = model.encoder_forward(&mut g, params, chunk)?;
        out.extend(
            g.value(enc.pooled)
                .chunks_exact(e)
                .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()),
        );
    }
    Ok(out)
}

/// Unit-norm contrastive caption embeddings.
pub fn text_embeddings<T: Scalar>(
    model: &DreamModel,
    params: &ParamSet<T>,
    captions: &[CaptionTokens],
) -> Result<Vec<Vec<f64>>> {
    let e = model.config.embed_dim;
    let mut out = Vec::with_capacity(captions.len());
    for chunk in captions.chunks(CHUNK) {
        let mut g = Graph::inference();
        let t = model.text_encode_contrastive(&mut g, params, chunk)?;
        out.extend(
            g.value(t)
                .chunks_exact(e)
                .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()),
        );
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest value; the first one wins ties.
fn argmax(v: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub mask_ratio: f64,
    pub image_to_text: f64,
    pub text_to_image: f64,
    /// Number of distinct candidate captions.
    pub candidates: usize,
}

/// Top-1 accuracy in both directions for a similarity matrix
/// `[images, captions]` where image `i` matches caption `truth[i]`.
pub fn top1_from_similarity(sim: &[Vec<f64>], truth: &[usize], n_captions: usize) -> (f64, f64) {
    let i2t = sim
        .iter()
        .zip(truth)
        .filter(|(row, &t)| argmax(row.iter().copied()) == t)
        .count();
    let t2i = (0..n_captions)
        .filter(|&c| {
            let best = argmax(sim.iter().map(|row| row[c]));
            truth[best] == c
        })
        .count();
    (
        i2t as f64 / sim.len().max(1) as f64,
        t2i as f64 / n_captions.max(1) as f64,
    )
}

/// Image-to-caption and caption-to-image top-1 retrieval with a fresh random
/// mask of the given ratio per image. Candidates are the distinct captions of
/// the set.
pub fn retrieval_top1<T: Scalar>(
    model: &DreamModel,
    params: &ParamSet<T>,
    norm: &NormStats,
    set: &EvalSet,
    mask_ratio: f64,
    seed: u64,
) -> Result<RetrievalResult> {
    if set.is_empty() {
        return Err(DreamError::Input("retrieval over an empty set".into()));
    }
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(DreamError::Input(format!("mask ratio {mask_ratio} outside [0, 1]")));
    }
    let n = model.config.n_tokens();
    let masks = (0..set.len())
        .map(|i| {
            let mut rng = substream(seed, &[tag::EVAL, mask_ratio.to_bits(), i as u64]);
            make_mask(mask_ratio, n, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let img = image_embeddings(model, params, &encoder_inputs(model, norm, &set.images, &masks)?)?;
    let caps = set.distinct_captions();
    let txt = text_embeddings(model, params, &caps)?;
    let truth: Vec<usize> = set
        .captions
        .iter()
        .map(|c| caps.binary_search_by_key(c.tokens(), |x| *x.tokens()).expect("caption listed"))
        .collect();
    let sim: Vec<Vec<f64>> = img
        .iter()
        .map(|i| txt.iter().map(|t| dot(i, t)).collect())
        .collect();
    let (image_to_text, text_to_image) = top1_from_similarity(&sim, &truth, caps.len());
    Ok(RetrievalResult {
        mask_ratio,
        image_to_text,
        text_to_image,
        candidates: caps.len(),
    })
}

pub fn robustness_curve<T: Scalar>(
    model: &DreamModel,
    params: &ParamSet<T>,
    norm: &NormStats,
    set: &EvalSet,
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<RetrievalResult>> {
    ratios
        .iter()
        .map(|&r| retrieval_top1(model, params, norm, set, r, seed))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub max_iters: usize,
    pub l2: f64,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iters: 3000,
            l2: 1e-4,
            tolerance: 1e-6,
        }
    }
}

/// Softmax regression on standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes, dim + 1]`, bias last.
    weights: Vec<Vec<f64>>,
}

fn standardized(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = x.iter().zip(mean.iter().zip(scale)).map(|(x, (m, s))| (x - m) / s).collect();
    v.push(1.0);
    v
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl LinearProbe {
    /// Full-batch gradient descent with step `1 / L`, where `L` bounds the
    /// curvature of the regularized cross-entropy.
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() || classes < 2 {
            return Err(DreamError::Input("probe needs matched features and labels, 2+ classes".into()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(DreamError::Input(format!("label {bad} outside {classes} classes")));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                var.sqrt().max(1e-8)
            })
            .collect();
        let xs: Vec<Vec<f64>> = x.iter().map(|r| standardized(r, &mean, &scale)).collect();
        let lipschitz = 0.5 * gram_top_eigenvalue(&xs) + cfg.l2;
        let lr = 1.0 / lipschitz;

        let mut w = vec![vec![0.0; d + 1]; classes];
        let mut p = vec![0.0; classes];
        for _ in 0..cfg.max_iters {
            let mut grad = vec![vec![0.0; d + 1]; classes];
            for (row, &label) in xs.iter().zip(y) {
                for (c, pc) in p.iter_mut().enumerate() {
                    *pc = dot(&w[c], row);
                }
                softmax_in_place(&mut p);
                for c in 0..classes {
                    let coef = (p[c] - f64::from(c == label)) / n;
                    grad[c].iter_mut().zip(row).for_each(|(g, x)| *g += coef * x);
                }
            }
            let mut norm2 = 0.0;
            for c in 0..classes {
                for j in 0..=d {
                    if j < d {
                        grad[c][j] += cfg.l2 * w[c][j];
                    }
                    norm2 += grad[c][j] * grad[c][j];
                    w[c][j] -= lr * grad[c][j];
                }
            }
            if norm2.sqrt() < cfg.tolerance {
                break;
            }
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
        })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let v = standardized(x, &self.mean, &self.scale);
        argmax(self.weights.iter().map(|w| dot(w, &v)))
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &t)| self.predict(r) == t).count();
        hits as f64 / x.len().max(1) as f64
    }
}

/// Largest eigenvalue of `X^T X / n` by power iteration.
fn gram_top_eigenvalue(xs: &[Vec<f64>]) -> f64 {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; d];
        for r in xs {
            let s = dot(r, &v);
            next.iter_mut().zip(r).for_each(|(o, x)| *o += s * x / n);
        }
        let norm = dot(&next, &next).sqrt();
        if norm == 0.0 {
            return 1.0;
        }
        let converged = (norm - lambda).abs() <= 1e-9 * norm;
        lambda = norm;
        v = next.into_iter().map(|x| x / norm).collect();
        if converged {
            break;
        }
    }
    // Power iteration approaches from below; pad so the step stays stable.
    lambda * 1.05
}

pub const SHAPE_CLASSES: usize = 4;

/// Probe accuracy for shape classification from unmasked pooled features.
pub fn linear_probe<T: Scalar>(
    model: &DreamModel,
    params: &ParamSet<T>,
    norm: &NormStats,
    train: &EvalSet,
    test: &EvalSet,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let n = model.config.n_tokens();
    let feats = |set: &EvalSet| -> Result<Vec<Vec<f64>>> {
        let masks = vec![MaskState::visible(n); set.len()];
        pooled_features(model, params, &encoder_inputs(model, norm, &set.images, &masks)?)
    };
    let probe = LinearProbe::fit(&feats(train)?, &train.labels, SHAPE_CLASSES, cfg)?;
    Ok(probe.accuracy(&feats(test)?, &test.labels))
}

/// Cosine similarity between fully visible images and their prompts.
pub fn alignment_score<T: Scalar>(
    model: &DreamModel,
    params: &ParamSet<T>,
    norm: &NormStats,
    images: &[Image],
    prompts: &[CaptionTokens],
) -> Result<Vec<f64>> {
    let masks = vec![MaskState::visible(model.config.n_tokens()); images.len()];
    let inputs = encoder_inputs(model, norm, images, &masks)?;
    alignment_scores(model, params, &inputs, prompts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub metric: String,
    pub split: String,
    pub mask_ratio: Option<f64>,
    pub value: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub split: Option<Split>,
    pub probe_accuracy: Option<f64>,
    pub retrieval: Vec<RetrievalResult>,
    pub validation_loss: Option<f64>,
    pub alignment: Option<f64>,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<EvalRow> {
        let split = self.split.map_or("", split_name).to_string();
        let row = |metric: &str, mask_ratio: Option<f64>, value: f64| EvalRow {
            metric: metric.into(),
            split: split.clone(),
            mask_ratio,
            value,
            seed: self.seed,
        };
        let mut rows = Vec::new();
        if let Some(v) = self.probe_accuracy {
            rows.push(row("probe_accuracy", Some(0.0), v));
        }
        for r in &self.retrieval {
            rows.push(row("retrieval_i2t", Some(r.mask_ratio), r.image_to_text));
            rows.push(row("retrieval_t2i", Some(r.mask_ratio), r.text_to_image));
        }
        if let Some(v) = self.validation_loss {
            rows.push(row("val_diff_loss", None, v));
        }
        if let Some(v) = self.alignment {
            rows.push(row("alignment", None, v));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,split,mask_ratio,value,seed\n");
        for r in self.rows() {
            let ratio = r.mask_ratio.map(|m| m.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.metric, r.split, ratio, r.value, r.seed));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = Vec::new();
        if let Some(v) = self.probe_accuracy {
            s.push(format!("probe accuracy: {v:.4}"));
        }
        for r in &self.retrieval {
            s.push(format!(
                "retrieval @ mask {:.2}: i2t {:.4}, t2i {:.4} ({} captions, chance {:.4})",
                r.mask_ratio,
                r.image_to_text,
                r.text_to_image,
                r.candidates,
                1.0 / r.candidates.max(1) as f64
            ));
        }
        if let Some(v) = self.validation_loss {
            s.push(format!("validation diffusion loss: {v:.4}"));
        }
        if let Some(v) = self.alignment {
            s.push(format!("mean alignment: {v:.4}"));
        }
        s.join("\n") + "\n"
    }
}

/// Writes the CSV to `path` and a plain-text summary next to it.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    checkpoint::write_atomic(path, report.to_csv().as_bytes())?;
    let mut f = Vec::new();
    f.write_all(report.summary().as_bytes())?;
    checkpoint::write_atomic(&path.with_extension("txt"), &f)
}
