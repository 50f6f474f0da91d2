//! Residual teacher classifier split into a head and a tail.
//!
//! Layout: a 3×3 stride-1 stem, then stages of residual blocks whose first
//! block halves the resolution, then global average pooling and a linear
//! classifier. Stages before `head_split_stage` (and the stem) form the
//! head.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{flip_horizontal, DataError, Dataset};
use crate::nn::{seeded_rng, Conv2d, Linear, ResBlock};
use crate::tensor::{
    clip_grad_norm, exp_lr_schedule, Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor,
    TensorError, Var,
};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("spec parse: {0}")]
    Parse(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("head architectures differ")]
    HeadMismatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type BackboneResult<T> = std::result::Result<T, BackboneError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub stage_depths: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    /// Stages strictly before this index belong to the head.
    pub head_split_stage: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn default_input_channels() -> usize {
    3
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            stage_depths: vec![2, 2, 2],
            stage_channels: vec![32, 64, 128],
            num_classes: 10,
            head_split_stage: 2,
            input_channels: 3,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> BackboneResult<()> {
        let n = self.stage_depths.len();
        let bad = |m: String| Err(BackboneError::InvalidSpec(m));
        if n == 0 || n != self.stage_channels.len() {
            return bad(format!(
                "{} depths and {} channel counts",
                n,
                self.stage_channels.len()
            ));
        }
        if self.head_split_stage < 1 || self.head_split_stage >= n {
            return bad(format!(
                "head_split_stage {} must lie in [1, {})",
                self.head_split_stage, n
            ));
        }
        if self.stage_depths.contains(&0) {
            return bad("stage depths must be ≥ 1".into());
        }
        if self.stage_channels.contains(&0) || self.input_channels == 0 {
            return bad("channel counts must be ≥ 1".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> BackboneResult<Self> {
        let spec: BackboneSpec = toml::from_str(text).map_err(|e| BackboneError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    fn stage_in(&self, s: usize) -> usize {
        if s == 0 {
            self.stage_channels[0]
        } else {
            self.stage_channels[s - 1]
        }
    }

    /// Parameters per component: stem, each stage, classifier.
    pub fn params_per_stage(&self) -> Vec<(String, usize)> {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let mut out = vec![("stem".to_string(), conv(self.input_channels, self.stage_channels[0], 3))];
        for (s, (&depth, &c)) in self.stage_depths.iter().zip(&self.stage_channels).enumerate() {
            let cin = self.stage_in(s);
            let first = conv(cin, c, 3) + conv(c, c, 3) + conv(cin, c, 1);
            let rest = (depth - 1) * 2 * conv(c, c, 3);
            out.push((format!("stage{s}"), first + rest));
        }
        let last = *self.stage_channels.last().unwrap();
        out.push(("classifier".into(), last * self.num_classes + self.num_classes));
        out
    }

    /// Closed-form total parameter count.
    pub fn param_count(&self) -> usize {
        self.params_per_stage().iter().map(|(_, n)| n).sum()
    }

    /// `(C, H, W)` of the head output for an `H×W` input.
    pub fn head_output_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let mut h = height;
        let mut w = width;
        for _ in 0..self.head_split_stage {
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
        }
        (self.stage_channels[self.head_split_stage - 1], h, w)
    }

    pub fn head_stride(&self) -> usize {
        1 << self.head_split_stage
    }

    /// Layer names usable as saliency taps, one per stage.
    pub fn layer_names(&self) -> Vec<String> {
        (0..self.stage_depths.len()).map(|s| format!("stage{s}")).collect()
    }
}

fn stage_blocks(
    spec: &BackboneSpec,
    s: usize,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut impl rand::Rng,
) -> BackboneResult<Vec<ResBlock>> {
    let mut blocks = Vec::new();
    let mut cin = spec.stage_in(s);
    let c = spec.stage_channels[s];
    for b in 0..spec.stage_depths[s] {
        let stride = if b == 0 { 2 } else { 1 };
        blocks.push(ResBlock::new(
            store,
            &format!("{prefix}.stage{s}.block{b}"),
            cin,
            c,
            stride,
            true,
            rng,
        )?);
        cin = c;
    }
    Ok(blocks)
}

#[derive(Clone, Debug)]
pub struct Head {
    pub store: ParamStore,
    stem: Conv2d,
    stages: Vec<Vec<ResBlock>>,
    input_channels: usize,
}

impl Head {
    fn new(spec: &BackboneSpec, seed: u64) -> BackboneResult<Self> {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let stem = Conv2d::new(&mut store, "head.stem", spec.input_channels, spec.stage_channels[0], 3, 1, &mut rng)?;
        let stages = (0..spec.head_split_stage)
            .map(|s| stage_blocks(spec, s, "head", &mut store, &mut rng))
            .collect::<BackboneResult<_>>()?;
        Ok(Head {
            store,
            stem,
            stages,
            input_channels: spec.input_channels,
        })
    }

    /// `h = P_h(x)` with the output of every head stage.
    pub fn forward_taps(&self, tape: &mut Tape, x: Var) -> BackboneResult<(Var, Vec<Var>)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "head_forward",
                expected: 4,
                found: s,
            }
            .into());
        }
        if s[1] != self.input_channels {
            return Err(TensorError::ShapeMismatch {
                op: "head_forward",
                axis: "channels",
                expected: self.input_channels,
                found: s[1],
            }
            .into());
        }
        let y = self.stem.forward(tape, &self.store, x)?;
        let mut y = tape.relu(y);
        let mut taps = Vec::new();
        for stage in &self.stages {
            for b in stage {
                y = b.forward(tape, &self.store, y)?;
            }
            taps.push(y);
        }
        Ok((y, taps))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> BackboneResult<Var> {
        Ok(self.forward_taps(tape, x)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct Tail {
    pub store: ParamStore,
    stages: Vec<Vec<ResBlock>>,
    fc: Linear,
    first_stage: usize,
    input_channels: usize,
}

impl Tail {
    fn new(spec: &BackboneSpec, seed: u64) -> BackboneResult<Self> {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let stages = (spec.head_split_stage..spec.stage_depths.len())
            .map(|s| stage_blocks(spec, s, "tail", &mut store, &mut rng))
            .collect::<BackboneResult<_>>()?;
        let fc = Linear::new(
            &mut store,
            "tail.fc",
            *spec.stage_channels.last().unwrap(),
            spec.num_classes,
            &mut rng,
        )?;
        Ok(Tail {
            store,
            stages,
            fc,
            first_stage: spec.head_split_stage,
            input_channels: spec.stage_channels[spec.head_split_stage - 1],
        })
    }

    /// `P_t(h)` with the output of every tail stage.
    pub fn forward_taps(&self, tape: &mut Tape, h: Var) -> BackboneResult<(Var, Vec<Var>)> {
        let s = tape.shape(h).to_vec();
        if s.len() != 4 || s[1] != self.input_channels {
            return Err(TensorError::ShapeMismatch {
                op: "tail_forward",
                axis: "channels",
                expected: self.input_channels,
                found: s.get(1).copied().unwrap_or(0),
            }
            .into());
        }
        let mut y = h;
        let mut taps = Vec::new();
        for stage in &self.stages {
            for b in stage {
                y = b.forward(tape, &self.store, y)?;
            }
            taps.push(y);
        }
        let pooled = tape.global_avg_pool(y)?;
        Ok((self.fc.forward(tape, &self.store, pooled)?, taps))
    }

    pub fn forward(&self, tape: &mut Tape, h: Var) -> BackboneResult<Var> {
        Ok(self.forward_taps(tape, h)?.0)
    }

    pub fn first_stage(&self) -> usize {
        self.first_stage
    }

    /// Logits for a batch of head features, outside of training.
    pub fn logits(&self, h: &Tensor) -> BackboneResult<Tensor> {
        let frozen = frozen_clone(&self.store);
        let view = Tail {
            store: frozen,
            ..self.clone()
        };
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let y = view.forward(&mut tape, hv)?;
        Ok(tape.value(y).clone())
    }
}

fn frozen_clone(store: &ParamStore) -> ParamStore {
    let mut s = store.clone();
    s.freeze();
    s
}

#[derive(Clone, Debug)]
pub struct SplitModel {
    pub spec: BackboneSpec,
    pub head: Head,
    pub tail: Tail,
}

/// Builds a freshly initialized teacher. Deterministic in `seed`.
pub fn build_teacher(spec: &BackboneSpec, seed: u64) -> BackboneResult<SplitModel> {
    spec.validate()?;
    let head = Head::new(spec, seed)?;
    let tail = Tail::new(spec, seed ^ 0x5EED_7A11)?;
    let model = SplitModel {
        spec: spec.clone(),
        head,
        tail,
    };
    for (name, n) in spec.params_per_stage() {
        log::debug!("{name}: {n} parameters");
    }
    log::info!("teacher parameters: {}", model.num_params());
    Ok(model)
}

impl SplitModel {
    pub fn num_params(&self) -> usize {
        self.head.store.num_scalars() + self.tail.store.num_scalars()
    }

    /// Replaces the head with `other`'s weights; the architectures must agree.
    pub fn copy_head_from(&mut self, other: &SplitModel) -> BackboneResult<()> {
        self.head
            .store
            .load_checkpoint(&other.head.store.to_checkpoint())
            .map_err(|_| BackboneError::HeadMismatch)
    }

    pub fn full_forward(&self, tape: &mut Tape, x: Var) -> BackboneResult<Var> {
        let h = self.head.forward(tape, x)?;
        self.tail.forward(tape, h)
    }

    /// Forward pass recording every stage output, keyed by layer name.
    pub fn forward_with_taps(&self, tape: &mut Tape, x: Var) -> BackboneResult<(Var, Vec<(String, Var)>)> {
        let (h, mut taps) = self.head.forward_taps(tape, x)?;
        let (logits, tail_taps) = self.tail.forward_taps(tape, h)?;
        taps.extend(tail_taps);
        let named = taps
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("stage{i}"), v))
            .collect();
        Ok((logits, named))
    }

    fn frozen(&self) -> SplitModel {
        let mut m = self.clone();
        m.head.store.freeze();
        m.tail.store.freeze();
        m
    }

    /// Head features `h` for a batch, outside of training.
    pub fn head_features(&self, x: &Tensor) -> BackboneResult<Tensor> {
        let m = self.frozen();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let h = m.head.forward(&mut tape, xv)?;
        Ok(tape.value(h).clone())
    }

    pub fn logits(&self, x: &Tensor) -> BackboneResult<Tensor> {
        let m = self.frozen();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = m.full_forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn save(&self, dir: &Path) -> BackboneResult<()> {
        std::fs::create_dir_all(dir).map_err(TensorError::from)?;
        self.head.store.to_checkpoint().save(&dir.join("head.ckpt"))?;
        self.tail.store.to_checkpoint().save(&dir.join("tail.ckpt"))?;
        std::fs::write(dir.join("backbone.toml"), self.spec.to_toml()).map_err(TensorError::from)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> BackboneResult<SplitModel> {
        let text = std::fs::read_to_string(dir.join("backbone.toml")).map_err(TensorError::from)?;
        let spec = BackboneSpec::from_toml(&text)?;
        let mut m = build_teacher(&spec, 0)?;
        m.head.store.load_checkpoint(&Checkpoint::load(&dir.join("head.ckpt"))?)?;
        m.tail.store.load_checkpoint(&Checkpoint::load(&dir.join("tail.ckpt"))?)?;
        Ok(m)
    }
}

/// Argmax per row; ties resolve to the lowest index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(classes.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Runs `f` over `dataset` in batches and concatenates the resulting rows.
pub fn batched_map(
    dataset: &Dataset,
    batch: usize,
    mut f: impl FnMut(&Tensor) -> BackboneResult<Tensor>,
) -> BackboneResult<Vec<Tensor>> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    idx.chunks(batch.max(1))
        .map(|chunk| f(&dataset.batch(chunk)))
        .collect()
}

/// Predicted class per sample.
pub fn predict_dataset(model: &SplitModel, dataset: &Dataset) -> BackboneResult<Vec<usize>> {
    Ok(batched_map(dataset, 100, |x| model.logits(x))?
        .iter()
        .flat_map(predict)
        .collect())
}

pub fn top1(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / predictions.len() as f64
}

pub fn evaluate_top1(model: &SplitModel, dataset: &Dataset) -> BackboneResult<f64> {
    let preds = predict_dataset(model, dataset)?;
    Ok(top1(&preds, &dataset.all_labels()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub flip: bool,
    pub seed: u64,
    /// Train the head too; when false only the tail is updated.
    #[serde(default = "yes")]
    pub train_head: bool,
}

fn yes() -> bool {
    true
}

impl Default for PretrainRecipe {
    fn default() -> Self {
        PretrainRecipe {
            epochs: 30,
            batch_size: 16,
            lr_start: 1e-3,
            lr_end: 1e-6,
            flip: true,
            seed: 0,
            train_head: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub best_top1: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub head: Checkpoint,
    pub tail: Checkpoint,
}

/// Cross-entropy training with Adam and an exponential schedule. The best
/// epoch by validation top-1 is restored into `model` at the end.
pub fn pretrain_teacher(
    model: &mut SplitModel,
    train: &Dataset,
    val: &Dataset,
    recipe: &PretrainRecipe,
) -> BackboneResult<PretrainReport> {
    if train.is_empty() || val.is_empty() {
        return Err(BackboneError::EmptyDataset);
    }
    let batch = recipe.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(batch);
    let total = (recipe.epochs * steps_per_epoch).max(1);
    let cfg = AdamConfig {
        lr: recipe.lr_start as f32,
        ..Default::default()
    };
    if recipe.train_head {
        model.head.store.unfreeze();
    } else {
        model.head.store.freeze();
    }
    model.tail.store.unfreeze();
    let mut opt_head = Adam::new(&model.head.store, cfg);
    let mut opt_tail = Adam::new(&model.tail.store, cfg);
    let mut rng = seeded_rng(recipe.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut best: Option<(f64, usize, Checkpoint, Checkpoint)> = None;
    let mut log = Vec::new();
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = recipe.lr_start;
        for chunk in order.chunks(batch) {
            lr = exp_lr_schedule(step, total, recipe.lr_start, recipe.lr_end)?;
            opt_head.set_lr(lr as f32);
            opt_tail.set_lr(lr as f32);
            let mut x = train.batch(chunk);
            if recipe.flip {
                let flips: Vec<bool> = chunk.iter().map(|_| rand::Rng::random_bool(&mut rng, 0.5)).collect();
                flip_horizontal(&mut x, &flips);
            }
            let labels = train.labels_for(chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = model.full_forward(&mut tape, xv)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            loss_sum += tape.value(loss).item() as f64 * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            model.head.store.zero_grad();
            model.tail.store.zero_grad();
            model.tail.store.accumulate(&grads);
            if recipe.train_head {
                model.head.store.accumulate(&grads);
                clip_grad_norm(&mut [&mut model.head.store, &mut model.tail.store], 5.0);
                opt_head.step(&mut model.head.store)?;
            } else {
                clip_grad_norm(&mut [&mut model.tail.store], 5.0);
            }
            opt_tail.step(&mut model.tail.store)?;
            step += 1;
        }
        let val_top1 = evaluate_top1(model, val)?;
        log::info!(
            "epoch {epoch}: loss {:.4} val top-1 {:.4}",
            loss_sum / train.len() as f64,
            val_top1
        );
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_top1,
            lr,
        });
        if best.as_ref().is_none_or(|b| val_top1 > b.0) {
            best = Some((
                val_top1,
                epoch,
                model.head.store.to_checkpoint(),
                model.tail.store.to_checkpoint(),
            ));
        }
    }
    model.head.store.unfreeze();
    let (best_top1, best_epoch, head, tail) = match best {
        Some(b) => b,
        None => (
            evaluate_top1(model, val)?,
            0,
            model.head.store.to_checkpoint(),
            model.tail.store.to_checkpoint(),
        ),
    };
    model.head.store.load_checkpoint(&head)?;
    model.tail.store.load_checkpoint(&tail)?;
    Ok(PretrainReport {
        best_top1,
        best_epoch,
        log,
        head,
        tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_rules() {
        let l = Tensor::new([1, 3], vec![0.1, 0.9, 0.3]).unwrap();
        assert_eq!(predict(&l), vec![1]);
        let t = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(predict(&t), vec![0]);
    }

    #[test]
    fn spec_validation() {
        let mut s = BackboneSpec::default();
        s.head_split_stage = 0;
        assert!(s.validate().is_err());
        s.head_split_stage = 3;
        assert!(s.validate().is_err());
        s.head_split_stage = 1;
        s.stage_depths = vec![2, 0, 2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let s = BackboneSpec::default();
        assert_eq!(BackboneSpec::from_toml(&s.to_toml()).unwrap(), s);
    }
}
