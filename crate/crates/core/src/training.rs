//! Rate–distortion training of the compression model and evaluation of
//! the bottlenecked pipeline.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{predict, top1, BackboneError, SplitModel, Tail};
use crate::codec::{quantize_eval, quantize_train, CodecError, CompressionModel, LatentCode};
use crate::data::Dataset;
use crate::entropy::{EntropyError, DEFAULT_MAX_ALPHABET, DEFAULT_PRECISION};
use crate::nn::seeded_rng;
use crate::range_coder::{self, CodingError};
use crate::saliency::{SaliencyError, SaliencyStore};
use crate::tensor::{
    clip_grad_norm, exp_lr_schedule, Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor,
    TensorError, Var,
};

/// Predictive loss (percentage points) at or below which a configuration
/// counts as lossless.
pub const LOSSLESS_THRESHOLD: f64 = 0.4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step} (batch {batch}, lr {lr:e})")]
    NonFinite {
        epoch: usize,
        step: usize,
        batch: usize,
        lr: f64,
    },
    #[error("objective {0} needs ground-truth labels")]
    MissingLabels(Objective),
    #[error("objective sg-hd needs a saliency store")]
    MissingSaliency,
    #[error("empty β grid")]
    EmptyGrid,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "hd")]
    Hd,
    #[serde(rename = "sg-hd")]
    SgHd,
    #[serde(rename = "direct-ce")]
    DirectCe,
    #[serde(rename = "direct-kd")]
    DirectKd,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Hd => "hd",
            Objective::SgHd => "sg-hd",
            Objective::DirectCe => "direct-ce",
            Objective::DirectKd => "direct-kd",
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hd" => Ok(Objective::Hd),
            "sg-hd" => Ok(Objective::SgHd),
            "direct-ce" => Ok(Objective::DirectCe),
            "direct-kd" => Ok(Objective::DirectKd),
            other => Err(format!("unknown objective {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub clip_norm: f32,
    pub kd_temperature: f32,
    /// Learning-rate multiplier for the prior's parameters.
    #[serde(default = "default_prior_lr_factor")]
    pub prior_lr_factor: f64,
}

fn default_prior_lr_factor() -> f64 {
    10.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Hd,
            beta: 0.0,
            epochs: 15,
            batch_size: 16,
            lr_start: 1e-3,
            lr_end: 1e-6,
            seed: 0,
            clip_norm: 1.0,
            kd_temperature: 1.0,
            prior_lr_factor: default_prior_lr_factor(),
        }
    }
}

/// Frozen copy of the teacher, safe to put on any tape.
pub fn frozen_teacher(teacher: &SplitModel) -> SplitModel {
    let mut t = teacher.clone();
    t.head.store.freeze();
    t.tail.store.freeze();
    t
}

/// Loss components of one batch, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub distortion: Var,
    pub rate_bits: Var,
    /// Noisy latent, for the prior-fitting term.
    pub latent: Var,
    pub pixels: usize,
}

fn add_rate(tape: &mut Tape, model: &CompressionModel, distortion: Var, z: Var, beta: f64, pixels: usize) -> TrainResult<(Var, Var)> {
    let rate = model.prior.rate_bits(tape, &model.prior_store, z)?;
    let scaled = tape.scale(rate, (beta / pixels as f64) as f32);
    Ok((tape.add(distortion, scaled)?, rate))
}

fn reconstruct(tape: &mut Tape, model: &CompressionModel, x: &Tensor, rng: &mut impl rand::Rng) -> TrainResult<(Var, Var)> {
    let xv = tape.constant(x.clone());
    let z = model.encoder.analyze(tape, xv)?;
    let zt = quantize_train(tape, z, rng)?;
    let ht = model.decoder.synthesize(tape, zt)?;
    Ok((zt, ht))
}

fn pixels_of(x: &Tensor) -> usize {
    let s = x.shape();
    s[0] * s[2] * s[3]
}

/// `mse(h, g_s(g_a(x) + η)) + β · rate / pixels`, with `h` from the frozen
/// teacher head.
pub fn hd_loss(
    tape: &mut Tape,
    teacher: &SplitModel,
    model: &CompressionModel,
    x: &Tensor,
    beta: f64,
    rng: &mut impl rand::Rng,
) -> TrainResult<LossParts> {
    let h = tape.constant(teacher.head_features(x)?);
    let (zt, ht) = reconstruct(tape, model, x, rng)?;
    let distortion = tape.mse(ht, h)?;
    let pixels = pixels_of(x);
    let (total, rate_bits) = add_rate(tape, model, distortion, zt, beta, pixels)?;
    Ok(LossParts {
        total,
        distortion,
        rate_bits,
        latent: zt,
        pixels,
    })
}

/// [`hd_loss`] with distortion weighted per spatial location by `weights`
/// (`N×H×W`, broadcast over channels).
pub fn sg_hd_loss(
    tape: &mut Tape,
    teacher: &SplitModel,
    model: &CompressionModel,
    x: &Tensor,
    weights: &Tensor,
    beta: f64,
    rng: &mut impl rand::Rng,
) -> TrainResult<LossParts> {
    let h = tape.constant(teacher.head_features(x)?);
    let (zt, ht) = reconstruct(tape, model, x, rng)?;
    let distortion = tape.weighted_mse(ht, h, weights.clone())?;
    let pixels = pixels_of(x);
    let (total, rate_bits) = add_rate(tape, model, distortion, zt, beta, pixels)?;
    Ok(LossParts {
        total,
        distortion,
        rate_bits,
        latent: zt,
        pixels,
    })
}

/// Task loss through the frozen tail: cross-entropy against `labels`, or KD
/// against the teacher's logits.
#[allow(clippy::too_many_arguments)]
pub fn direct_loss(
    tape: &mut Tape,
    teacher: &SplitModel,
    model: &CompressionModel,
    x: &Tensor,
    labels: Option<&[usize]>,
    variant: Objective,
    beta: f64,
    temperature: f32,
    rng: &mut impl rand::Rng,
) -> TrainResult<LossParts> {
    let (zt, ht) = reconstruct(tape, model, x, rng)?;
    let logits = teacher.tail.forward(tape, ht)?;
    let distortion = match variant {
        Objective::DirectCe => {
            let l = labels.ok_or(TrainError::MissingLabels(variant))?;
            tape.softmax_cross_entropy(logits, l)?
        }
        _ => {
            let t = tape.constant(teacher.logits(x)?);
            tape.kd_divergence(logits, t, temperature)?
        }
    };
    let pixels = pixels_of(x);
    let (total, rate_bits) = add_rate(tape, model, distortion, zt, beta, pixels)?;
    Ok(LossParts {
        total,
        distortion,
        rate_bits,
        latent: zt,
        pixels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub distortion: f64,
    pub rate_bpp: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<TrainRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

impl TrainReport {
    pub fn write_ndjson(&self, path: &Path) -> TrainResult<()> {
        let mut f = std::fs::File::create(path)?;
        for r in &self.log {
            writeln!(f, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(())
    }
}

struct Snapshot {
    encoder: Checkpoint,
    decoder: Checkpoint,
    prior: Checkpoint,
}

fn snapshot(m: &CompressionModel) -> Snapshot {
    Snapshot {
        encoder: m.encoder.store.to_checkpoint(),
        decoder: m.decoder.store.to_checkpoint(),
        prior: m.prior_store.to_checkpoint(),
    }
}

/// Trains encoder, decoder and prior with the teacher frozen. Besides the
/// objective, the prior always minimizes the rate of the detached noisy
/// latent, so its density tracks the latent even at β = 0. The best epoch
/// by mean training loss is restored at the end, and tables are frozen over
/// the training set.
pub fn train_bottleneck(
    teacher: &SplitModel,
    model: &mut CompressionModel,
    train: &Dataset,
    saliency: Option<&SaliencyStore>,
    config: &TrainConfig,
) -> TrainResult<TrainReport> {
    if config.objective == Objective::SgHd && saliency.is_none() {
        return Err(TrainError::MissingSaliency);
    }
    if train.is_empty() {
        return Err(BackboneError::EmptyDataset.into());
    }
    let teacher = frozen_teacher(teacher);
    model.unfreeze();
    model.tables = None;
    let batch = config.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(batch);
    let total = (config.epochs * steps_per_epoch).max(1);
    let cfg = AdamConfig {
        lr: config.lr_start as f32,
        ..Default::default()
    };
    let mut opt_e = Adam::new(&model.encoder.store, cfg);
    let mut opt_d = Adam::new(&model.decoder.store, cfg);
    let mut opt_p = Adam::new(&model.prior_store, cfg);
    let mut rng = seeded_rng(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Snapshot)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut d_sum, mut r_sum, mut l_sum, mut px_sum) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = config.lr_start;
        for (batch_id, chunk) in order.chunks(batch).enumerate() {
            lr = exp_lr_schedule(step, total, config.lr_start, config.lr_end)?;
            opt_e.set_lr(lr as f32);
            opt_d.set_lr(lr as f32);
            opt_p.set_lr((lr * config.prior_lr_factor) as f32);
            let x = train.batch(chunk);
            let mut tape = Tape::new();
            let parts = match config.objective {
                Objective::Hd => hd_loss(&mut tape, &teacher, model, &x, config.beta, &mut rng)?,
                Objective::SgHd => {
                    let ids: Vec<u32> = chunk.iter().map(|&i| train.ids()[i]).collect();
                    let w = saliency.expect("checked").batch(&ids)?;
                    sg_hd_loss(&mut tape, &teacher, model, &x, &w, config.beta, &mut rng)?
                }
                Objective::DirectCe => {
                    let labels = train.labels_for(chunk);
                    direct_loss(&mut tape, &teacher, model, &x, Some(&labels), config.objective, config.beta, config.kd_temperature, &mut rng)?
                }
                Objective::DirectKd => direct_loss(
                    &mut tape,
                    &teacher,
                    model,
                    &x,
                    None,
                    config.objective,
                    config.beta,
                    config.kd_temperature,
                    &mut rng,
                )?,
            };
            let loss = tape.value(parts.total).item() as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    batch: batch_id,
                    lr,
                });
            }
            // prior-fitting term on the detached latent
            let zd = tape.detach(parts.latent);
            let fit = model.prior.rate_bits(&mut tape, &model.prior_store, zd)?;
            let fit = tape.scale(fit, 1.0 / parts.pixels as f32);
            let objective = tape.add(parts.total, fit)?;
            let grads = tape.backward(objective)?;
            model.encoder.store.zero_grad();
            model.decoder.store.zero_grad();
            model.prior_store.zero_grad();
            model.encoder.store.accumulate(&grads);
            model.decoder.store.accumulate(&grads);
            model.prior_store.accumulate(&grads);
            clip_grad_norm(
                &mut [
                    &mut model.encoder.store,
                    &mut model.decoder.store,
                    &mut model.prior_store,
                ],
                config.clip_norm,
            );
            opt_e.step(&mut model.encoder.store)?;
            opt_d.step(&mut model.decoder.store)?;
            opt_p.step(&mut model.prior_store)?;
            let n = chunk.len() as f64;
            d_sum += tape.value(parts.distortion).item() as f64 * n;
            r_sum += tape.value(parts.rate_bits).item() as f64;
            l_sum += loss * n;
            px_sum += parts.pixels;
            step += 1;
        }
        let record = TrainRecord {
            epoch,
            step,
            distortion: d_sum / train.len() as f64,
            rate_bpp: r_sum / px_sum.max(1) as f64,
            loss: l_sum / train.len() as f64,
            lr,
        };
        log::info!(
            "{} β={} epoch {epoch}: distortion {:.5} rate {:.4} bpp loss {:.5}",
            config.objective,
            config.beta,
            record.distortion,
            record.rate_bpp,
            record.loss
        );
        if best.as_ref().is_none_or(|b| record.loss < b.0) {
            best = Some((record.loss, epoch, snapshot(model)));
        }
        log.push(record);
    }
    let (best_loss, best_epoch) = match best {
        Some((loss, epoch, snap)) => {
            model.encoder.store.load_checkpoint(&snap.encoder)?;
            model.decoder.store.load_checkpoint(&snap.decoder)?;
            model.prior_store.load_checkpoint(&snap.prior)?;
            (loss, epoch)
        }
        None => (f64::NAN, 0),
    };
    bind_tables(model, train)?;
    Ok(TrainReport {
        log,
        best_epoch,
        best_loss,
    })
}

/// Freezes coder tables over the rounded latents of `dataset`.
pub fn bind_tables(model: &mut CompressionModel, dataset: &Dataset) -> TrainResult<()> {
    let mut bounds: Option<Vec<(i32, i32)>> = None;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(100) {
        let b = model.observed_bounds(&dataset.batch(chunk))?;
        bounds = Some(match bounds {
            None => b,
            Some(acc) => acc
                .iter()
                .zip(&b)
                .map(|(&(lo, hi), &(l2, h2))| (lo.min(l2), hi.max(h2)))
                .collect(),
        });
    }
    let bounds = bounds.unwrap_or_else(|| vec![(0, 0); model.prior.channels]);
    model.tables = Some(model.prior.freeze_tables(
        &model.prior_store,
        &bounds,
        DEFAULT_PRECISION,
        DEFAULT_MAX_ALPHABET,
    )?);
    Ok(())
}

/// `tail(g_s(⌊g_a(x)⌉))` for one image, with latents clamped to the table
/// support exactly as the client does.
pub fn bottlenecked_forward(tail: &Tail, model: &CompressionModel, x: &Tensor) -> TrainResult<Tensor> {
    let (code, _) = model.encode_latent(x)?;
    let h = model.decoder.synthesize_tensor(&code.to_tensor())?;
    Ok(tail.logits(&h)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineEval {
    pub mean_bpp: f64,
    pub mean_payload_bytes: f64,
    pub median_payload_bytes: f64,
    pub pipeline_top1: f64,
    pub teacher_top1: f64,
    /// Teacher minus pipeline top-1, in percentage points.
    pub predictive_loss: f64,
    pub clamped_symbols: usize,
    pub estimated_bpp: f64,
    pub payload_bytes: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Codes every sample for real and classifies the decoded latents.
pub fn evaluate_pipeline(
    teacher: &SplitModel,
    model: &CompressionModel,
    eval: &Dataset,
    teacher_top1: Option<f64>,
) -> TrainResult<PipelineEval> {
    let tables = model.tables()?;
    let teacher = frozen_teacher(teacher);
    let labels = eval.all_labels();
    let teacher_top1 = match teacher_top1 {
        Some(t) => t,
        None => top1(&crate::backbone::predict_dataset(&teacher, eval)?, &labels),
    };
    let mut payload_bytes = Vec::with_capacity(eval.len());
    let mut predictions = Vec::with_capacity(eval.len());
    let mut clamped = 0;
    let mut bpp_sum = 0.0;
    let mut est_bits = 0.0;
    let idx: Vec<usize> = (0..eval.len()).collect();
    for chunk in idx.chunks(100) {
        let x = eval.batch(chunk);
        let z = quantize_eval(&model.encoder.analyze_tensor(&x)?);
        let per = z.numel() / chunk.len();
        let mut decoded = Vec::with_capacity(z.numel());
        for j in 0..chunk.len() {
            let zj = Tensor::new(z.shape()[1..].to_vec(), z.data()[j * per..(j + 1) * per].to_vec())?;
            let mut code = LatentCode::from_tensor(&zj, (eval.height, eval.width))?;
            clamped += range_coder::clamp_to_support(&mut code, tables);
            est_bits += range_coder::ideal_bits(&code, tables);
            let payload = range_coder::encode(&code, tables)?;
            let bytes = payload.to_bytes();
            bpp_sum += range_coder::bpp(bytes.len(), eval.height, eval.width)?;
            payload_bytes.push(bytes.len());
            let back = range_coder::decode(&range_coder::CodedPayload::from_bytes(&bytes)?, tables)?;
            decoded.extend(back.symbols.iter().map(|&s| s as f32));
        }
        let zq = Tensor::new(z.shape().to_vec(), decoded)?;
        let h = model.decoder.synthesize_tensor(&zq)?;
        predictions.extend(predict(&teacher.tail.logits(&h)?));
    }
    let pipeline_top1 = top1(&predictions, &labels);
    let mut sorted = payload_bytes.clone();
    sorted.sort_unstable();
    let n = sorted.len().max(1);
    let median = if sorted.is_empty() {
        0.0
    } else if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    Ok(PipelineEval {
        mean_bpp: bpp_sum / n as f64,
        mean_payload_bytes: payload_bytes.iter().sum::<usize>() as f64 / n as f64,
        median_payload_bytes: median,
        pipeline_top1,
        teacher_top1,
        predictive_loss: (teacher_top1 - pipeline_top1) * 100.0,
        clamped_symbols: clamped,
        estimated_bpp: est_bits / (n * eval.height * eval.width) as f64,
        payload_bytes,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub beta: f64,
    pub bpp: f64,
    pub predictive_loss: f64,
    pub objective: Objective,
    pub seed: u64,
}

impl RDPoint {
    pub fn is_lossless(&self) -> bool {
        self.predictive_loss <= LOSSLESS_THRESHOLD
    }
}

pub const RD_CSV_HEADER: &str = "beta,bpp,predictive_loss,objective,seed";

pub fn rd_csv(points: &[RDPoint]) -> String {
    let mut s = format!("{RD_CSV_HEADER}\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.beta, p.bpp, p.predictive_loss, p.objective, p.seed
        ));
    }
    s
}

pub fn parse_rd_csv(text: &str) -> Result<Vec<RDPoint>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RD_CSV_HEADER) {
        return Err("unexpected RD CSV header".into());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(format!("bad row {l:?}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
            Ok(RDPoint {
                beta: num(f[0])?,
                bpp: num(f[1])?,
                predictive_loss: num(f[2])?,
                objective: f[3].parse()?,
                seed: f[4].parse().map_err(|e| format!("{e}"))?,
            })
        })
        .collect()
}

/// Lowest-rate point within the lossless threshold.
pub fn lossless_point(points: &[RDPoint]) -> Option<&RDPoint> {
    points
        .iter()
        .filter(|p| p.is_lossless())
        .min_by(|a, b| a.bpp.total_cmp(&b.bpp))
}

/// Adjacent pairs (sorted by β) whose bpp increases with β.
pub fn bpp_inversions(points: &[RDPoint]) -> usize {
    let mut sorted: Vec<&RDPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.beta.total_cmp(&b.beta));
    sorted.windows(2).filter(|w| w[1].bpp > w[0].bpp).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 5,
            lr: 5e-5,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub compression_hash_before: String,
    pub compression_hash_after: String,
    pub epoch_losses: Vec<f64>,
}

/// Decoded features `h̃` of every sample, `N×C×H×W` in chunks of 100.
pub fn decoded_features(model: &CompressionModel, data: &Dataset) -> TrainResult<Vec<Tensor>> {
    let tables = model.tables()?;
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(100)
        .map(|chunk| {
            let x = data.batch(chunk);
            let mut z = quantize_eval(&model.encoder.analyze_tensor(&x)?);
            let s = z.shape().to_vec();
            let plane = s[2] * s[3];
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                let ch = &tables.channels[(i / plane) % s[1]];
                *v = v.clamp(ch.z_min as f32, ch.z_max() as f32);
            }
            Ok(model.decoder.synthesize_tensor(&z)?)
        })
        .collect()
}

/// Trains `tail` with cross-entropy on features `feats` (chunks of 100
/// matching `labels`).
pub fn train_tail_on_features(
    tail: &mut Tail,
    feats: &[Tensor],
    labels: &[usize],
    config: &FinetuneConfig,
) -> TrainResult<Vec<f64>> {
    tail.store.unfreeze();
    let mut opt = Adam::new(
        &tail.store,
        AdamConfig {
            lr: config.lr as f32,
            ..Default::default()
        },
    );
    let per: usize = feats.first().map_or(0, |f| f.numel() / f.shape()[0]);
    let fshape: Vec<usize> = feats.first().map(|f| f.shape()[1..].to_vec()).unwrap_or_default();
    let n = labels.len();
    let sample = |i: usize| -> &[f32] {
        let (c, j) = (i / 100, i % 100);
        &feats[c].data()[j * per..(j + 1) * per]
    };
    let mut rng = seeded_rng(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                data.extend_from_slice(sample(i));
            }
            let mut shape = vec![chunk.len()];
            shape.extend(&fshape);
            let mut tape = Tape::new();
            let h = tape.constant(Tensor::new(shape, data)?);
            let logits = tail.forward(&mut tape, h)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            sum += tape.value(loss).item() as f64 * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            tail.store.zero_grad();
            tail.store.accumulate(&grads);
            opt.step(&mut tail.store)?;
        }
        losses.push(sum / n.max(1) as f64);
    }
    Ok(losses)
}

/// Tail-only fine-tuning on the decoded features of a frozen compression
/// model. `tail` is updated in place; the compression model is never
/// touched. Features are computed once since the bottleneck is frozen.
pub fn finetune_tail(
    model: &CompressionModel,
    tail: &mut Tail,
    train: &Dataset,
    config: &FinetuneConfig,
) -> TrainResult<FinetuneReport> {
    let before = model.hash_hex();
    let feats = decoded_features(model, train)?;
    let epoch_losses = train_tail_on_features(tail, &feats, &train.all_labels(), config)?;
    Ok(FinetuneReport {
        compression_hash_before: before,
        compression_hash_after: model.hash_hex(),
        epoch_losses,
    })
}

/// Top-1 of `tail` on precomputed features.
pub fn tail_top1(tail: &Tail, feats: &[Tensor], labels: &[usize]) -> TrainResult<f64> {
    let mut preds = Vec::with_capacity(labels.len());
    for f in feats {
        preds.extend(predict(&tail.logits(f)?));
    }
    Ok(top1(&preds, labels))
}

/// Head features of the teacher for every sample, chunks of 100.
pub fn teacher_features(teacher: &SplitModel, data: &Dataset) -> TrainResult<Vec<Tensor>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(100)
        .map(|c| Ok(teacher.head_features(&data.batch(c))?))
        .collect()
}

/// Applies one Adam step to every store; errors if any is frozen.
pub fn step_all(opts: &mut [(&mut Adam, &mut ParamStore)]) -> TrainResult<()> {
    for (o, s) in opts.iter_mut() {
        o.step(s)?;
    }
    Ok(())
}
