//! Experiment configuration and the artifact layout shared by the CLI and
//! the acceptance suite.
//!
//! ```text
//! <output_dir>/
//!   config.toml            full configuration
//!   raw/                   synthetic source images (when generated)
//!   data/                  manifest.json, tensors.bin
//!   teacher/               head.ckpt, tail.ckpt, backbone.toml, log.ndjson
//!   saliency.svbs          training-set saliency
//!   models/<obj>/beta-<β>/seed-<s>/
//!   rd/                    rd.csv, summary.json, replicates.csv, payloads/
//!   teacher-reattach/      alternate-depth teacher and its fine-tuned tail
//!   latency/               latency.csv, latency_published.csv
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{build_teacher, evaluate_top1, BackboneError, BackboneSpec, PretrainRecipe, SplitModel};
use crate::codec::{CodecError, CompressionModel, DecoderConfig, EncoderConfig};
use crate::data::{generate_synthetic, prepare_data, DataError, DataSplit, DatasetManifest};
use crate::range_coder::{self, CodedPayload};
use crate::runtime::latency::{self, ComputeCost, LatencyConfig, LatencyReport, PayloadStats};
use crate::runtime::{ChannelProfile, ClientModel, RuntimeError, ServerModel};
use crate::saliency::{precompute_dataset_saliency, SaliencyError, SaliencyStore};
use crate::training::{
    self, evaluate_pipeline, lossless_point, parse_rd_csv, rd_csv, FinetuneConfig, Objective, PipelineEval, RDPoint,
    TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {path}: run `{stage}` first")]
    Missing { path: PathBuf, stage: &'static str },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Coding(#[from] range_coder::CodingError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type ExperimentResult<T> = std::result::Result<T, ExperimentError>;

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// `<class>/<image>` tree. When absent a synthetic set is generated.
    #[serde(default)]
    pub source: Option<PathBuf>,
    #[serde(default = "default_per_class")]
    pub synthetic_per_class: usize,
    pub val_fraction: f64,
}

fn default_per_class() -> usize {
    250
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub prior_lr_factor: f64,
    pub kd_temperature: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencySection {
    pub floor: f32,
    /// Tap names; defaults to every stage of the teacher.
    #[serde(default)]
    pub layers: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReattachSection {
    /// Depths of the alternate teacher; widths follow the main backbone.
    pub stage_depths: Vec<usize>,
    pub pretrain_epochs: usize,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub beta_grid: Vec<f64>,
    pub objectives: Vec<Objective>,
    /// Seeds swept over the full β grid.
    pub seeds: Vec<u64>,
    /// Extra seeds trained only at a single β to measure seed spread.
    #[serde(default)]
    pub replicate_seeds: Vec<u64>,
    pub data: DataSection,
    pub backbone: BackboneSpec,
    pub pretrain: PretrainRecipe,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainSection,
    pub saliency: SaliencySection,
    pub reattach: ReattachSection,
    pub channels: Vec<ChannelProfile>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: synthetic 10-class 32×32 data, narrow teacher.
    pub fn desk(output_dir: impl Into<PathBuf>) -> Self {
        let backbone = BackboneSpec {
            stage_channels: vec![16, 32, 64],
            ..Default::default()
        };
        let head_channels = backbone.head_output_shape(32, 32).0;
        ExperimentConfig {
            seed: 1,
            output_dir: output_dir.into(),
            beta_grid: vec![0.0, 0.125, 0.5, 2.0, 8.0, 32.0],
            objectives: vec![Objective::Hd, Objective::SgHd, Objective::DirectKd],
            seeds: vec![1],
            replicate_seeds: vec![2, 3],
            data: DataSection {
                source: None,
                synthetic_per_class: default_per_class(),
                val_fraction: 0.2,
            },
            backbone,
            pretrain: PretrainRecipe {
                epochs: 8,
                lr_start: 3e-3,
                lr_end: 1e-4,
                seed: 1,
                ..Default::default()
            },
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig {
                output_channels: head_channels,
                ..Default::default()
            },
            train: TrainSection {
                epochs: 12,
                batch_size: 16,
                lr_start: 2e-3,
                lr_end: 5e-5,
                prior_lr_factor: 10.0,
                kd_temperature: 4.0,
            },
            saliency: SaliencySection {
                floor: 0.1,
                layers: None,
            },
            reattach: ReattachSection {
                stage_depths: vec![2, 2, 4],
                pretrain_epochs: 8,
                finetune: FinetuneConfig::default(),
            },
            channels: latency::standard_profiles(),
        }
    }

    pub fn from_toml(text: &str) -> ExperimentResult<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> ExperimentResult<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(io_at(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> ExperimentResult<()> {
        self.backbone.validate()?;
        if self.beta_grid.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(ExperimentError::Config("β values must be finite and ≥ 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("at least one seed is required".into()));
        }
        for c in &self.channels {
            c.validate()?;
        }
        if self.encoder.latent_channels != self.decoder.latent_channels {
            return Err(ExperimentError::Config("encoder and decoder latent widths differ".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_config(&self, objective: Objective, beta: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            objective,
            beta,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr_start: self.train.lr_start,
            lr_end: self.train.lr_end,
            seed,
            clip_norm: 1.0,
            kd_temperature: self.train.kd_temperature,
            prior_lr_factor: self.train.prior_lr_factor,
        }
    }

    pub fn saliency_layers(&self) -> Vec<String> {
        self.saliency
            .layers
            .clone()
            .unwrap_or_else(|| self.backbone.layer_names())
    }
}

/// Stored next to every model directory so it can be rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionSpec {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
}

pub fn load_compression(dir: &Path) -> ExperimentResult<CompressionModel> {
    let path = dir.join("compression.toml");
    if !path.exists() {
        return Err(ExperimentError::Missing { path, stage: "train" });
    }
    let text = std::fs::read_to_string(&path).map_err(io_at(&path))?;
    let spec: CompressionSpec = toml::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut m = CompressionModel::new(spec.encoder, spec.decoder, spec.seed)?;
    m.load(dir)?;
    Ok(m)
}

pub fn save_compression(model: &CompressionModel, seed: u64, dir: &Path) -> ExperimentResult<()> {
    model.save(dir).map_err(io_at(dir))?;
    let spec = CompressionSpec {
        encoder: model.encoder.config.clone(),
        decoder: model.decoder.config.clone(),
        seed,
    };
    let path = dir.join("compression.toml");
    std::fs::write(&path, toml::to_string(&spec).expect("spec serializes")).map_err(io_at(&path))
}

/// Length-prefixed concatenation of coded payloads.
pub fn write_payloads(path: &Path, payloads: &[CodedPayload]) -> ExperimentResult<()> {
    let mut out = b"SVBP".to_vec();
    out.extend_from_slice(&(payloads.len() as u32).to_le_bytes());
    for p in payloads {
        let b = p.to_bytes();
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        out.extend_from_slice(&b);
    }
    std::fs::write(path, out).map_err(io_at(path))
}

pub fn read_payloads(path: &Path) -> ExperimentResult<Vec<CodedPayload>> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    let bad = || ExperimentError::Config(format!("{} is not a payload file", path.display()));
    if bytes.len() < 8 || &bytes[..4] != b"SVBP" {
        return Err(bad());
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let mut pos = 8;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = bytes
            .get(pos..pos + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(bad)?;
        pos += 4;
        let body = bytes.get(pos..pos + len).ok_or_else(bad)?;
        out.push(CodedPayload::from_bytes(body)?);
        pos += len;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectiveSummary {
    pub objective: Objective,
    pub seed: u64,
    pub lossless_beta: Option<f64>,
    pub lossless_bpp: Option<f64>,
    pub best_predictive_loss: f64,
    pub bpp_inversions: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RdSummary {
    pub provenance: Provenance,
    pub teacher_top1: f64,
    pub eval_samples: usize,
    pub raw_mean_bytes: f64,
    pub objectives: Vec<ObjectiveSummary>,
    pub points: Vec<RDPoint>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReattachReport {
    pub teacher_top1: f64,
    pub pipeline_top1_before: f64,
    pub pipeline_top1_after: f64,
    /// Alternate teacher minus its fine-tuned pipeline, in points.
    pub predictive_loss: f64,
    pub compression_hash_before: String,
    pub compression_hash_after: String,
    pub epoch_losses: Vec<f64>,
}

/// One experiment rooted at `config.output_dir`.
pub struct Experiment {
    pub config: ExperimentConfig,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> ExperimentResult<Self> {
        config.validate()?;
        let e = Experiment { config };
        std::fs::create_dir_all(e.root()).map_err(io_at(e.root()))?;
        let path = e.root().join("config.toml");
        std::fs::write(&path, e.config.to_toml()).map_err(io_at(&path))?;
        Ok(e)
    }

    pub fn root(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root().join("data")
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.root().join("teacher")
    }

    pub fn saliency_path(&self) -> PathBuf {
        self.root().join("saliency.svbs")
    }

    pub fn model_dir(&self, objective: Objective, beta: f64, seed: u64) -> PathBuf {
        self.root()
            .join("models")
            .join(objective.as_str())
            .join(format!("beta-{beta}"))
            .join(format!("seed-{seed}"))
    }

    pub fn rd_dir(&self) -> PathBuf {
        self.root().join("rd")
    }

    pub fn payload_path(&self, objective: Objective, beta: f64, seed: u64) -> PathBuf {
        self.rd_dir()
            .join("payloads")
            .join(format!("{}-beta-{beta}-seed-{seed}.svbp", objective.as_str()))
    }

    pub fn provenance(&self, stage: &str) -> Provenance {
        Provenance {
            config_hash: self.config.hash(),
            seed: self.config.seed,
            stage: stage.to_string(),
        }
    }

    pub fn prepare(&self) -> ExperimentResult<DatasetManifest> {
        let source = match &self.config.data.source {
            Some(s) => s.clone(),
            None => {
                let raw = self.root().join("raw");
                if !raw.exists() {
                    generate_synthetic(&raw, self.config.data.synthetic_per_class, self.config.seed)?;
                }
                raw
            }
        };
        Ok(prepare_data(
            &source,
            &self.data_dir(),
            self.config.seed,
            self.config.data.val_fraction,
            self.config.encoder.total_stride(),
        )?)
    }

    pub fn manifest(&self) -> ExperimentResult<DatasetManifest> {
        let path = self.data_dir().join("manifest.json");
        if !path.exists() {
            return Err(ExperimentError::Missing {
                path,
                stage: "prepare-data",
            });
        }
        Ok(DatasetManifest::load(&path)?)
    }

    pub fn split(&self) -> ExperimentResult<DataSplit> {
        Ok(self.manifest()?.load_split(&self.data_dir())?)
    }

    pub fn pretrain(&self, split: &DataSplit) -> ExperimentResult<(SplitModel, f64)> {
        let mut teacher = build_teacher(&self.config.backbone, self.config.seed)?;
        let report = crate::backbone::pretrain_teacher(&mut teacher, &split.train, &split.val, &self.config.pretrain)?;
        let dir = self.teacher_dir();
        teacher.save(&dir)?;
        let log: String = report
            .log
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect();
        std::fs::write(dir.join("log.ndjson"), log).map_err(io_at(&dir))?;
        Ok((teacher, report.best_top1))
    }

    pub fn teacher(&self) -> ExperimentResult<SplitModel> {
        let dir = self.teacher_dir();
        if !dir.join("head.ckpt").exists() {
            return Err(ExperimentError::Missing { path: dir, stage: "pretrain" });
        }
        Ok(SplitModel::load(&dir)?)
    }

    pub fn compute_saliency(&self, teacher: &SplitModel, split: &DataSplit) -> ExperimentResult<SaliencyStore> {
        let store = precompute_dataset_saliency(
            teacher,
            &split.train,
            &self.config.saliency_layers(),
            self.config.saliency.floor,
            50,
        )?;
        store.save(&self.saliency_path())?;
        Ok(store)
    }

    pub fn saliency(&self) -> ExperimentResult<SaliencyStore> {
        let path = self.saliency_path();
        if !path.exists() {
            return Err(ExperimentError::Missing { path, stage: "saliency" });
        }
        Ok(SaliencyStore::load(&path)?)
    }

    /// Trains one bottleneck, or loads it when its directory is complete.
    pub fn train(
        &self,
        teacher: &SplitModel,
        split: &DataSplit,
        objective: Objective,
        beta: f64,
        seed: u64,
    ) -> ExperimentResult<CompressionModel> {
        let dir = self.model_dir(objective, beta, seed);
        if self.is_trained(objective, beta, seed) {
            return load_compression(&dir);
        }
        let saliency = match objective {
            Objective::SgHd => Some(self.saliency()?),
            _ => None,
        };
        let mut model = CompressionModel::new(self.config.encoder.clone(), self.config.decoder.clone(), seed)?;
        let cfg = self.config.train_config(objective, beta, seed);
        let started = Instant::now();
        let report = training::train_bottleneck(teacher, &mut model, &split.train, saliency.as_ref(), &cfg)?;
        log::info!(
            "trained {objective} β={beta} seed={seed} in {:.1}s (best epoch {})",
            started.elapsed().as_secs_f64(),
            report.best_epoch
        );
        std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        report.write_ndjson(&dir.join("train_log.ndjson"))?;
        save_compression(&model, seed, &dir)?;
        let path = dir.join("train.json");
        let json = serde_json::to_string_pretty(&cfg).expect("train config serializes");
        std::fs::write(&path, json).map_err(io_at(&path))?;
        Ok(model)
    }

    /// True when a complete checkpoint exists and was trained with the
    /// train config the current experiment config yields.
    pub fn is_trained(&self, objective: Objective, beta: f64, seed: u64) -> bool {
        let dir = self.model_dir(objective, beta, seed);
        if !(dir.join("tables.svbc").exists() && dir.join("compression.toml").exists()) {
            return false;
        }
        std::fs::read_to_string(dir.join("train.json"))
            .ok()
            .and_then(|s| serde_json::from_str::<TrainConfig>(&s).ok())
            .is_some_and(|stored| stored == self.config.train_config(objective, beta, seed))
    }

    /// Fully coded evaluation of one trained model on the validation set;
    /// payloads are persisted.
    pub fn evaluate(
        &self,
        teacher: &SplitModel,
        split: &DataSplit,
        model: &CompressionModel,
        objective: Objective,
        beta: f64,
        seed: u64,
        teacher_top1: f64,
    ) -> ExperimentResult<(RDPoint, PipelineEval)> {
        let ev = evaluate_pipeline(teacher, model, &split.val, Some(teacher_top1))?;
        let tables = model.tables()?;
        let client = ClientModel {
            encoder: model.encoder.clone(),
            tables: tables.clone(),
        };
        let mut payloads = Vec::with_capacity(split.val.len());
        for i in 0..split.val.len() {
            payloads.push(client.encode(&split.val.image_tensor(i))?.0);
        }
        let path = self.payload_path(objective, beta, seed);
        std::fs::create_dir_all(path.parent().expect("payload dir")).map_err(io_at(&path))?;
        write_payloads(&path, &payloads)?;
        Ok((
            RDPoint {
                beta,
                bpp: ev.mean_bpp,
                predictive_loss: ev.predictive_loss,
                objective,
                seed,
            },
            ev,
        ))
    }

    /// Trains (or loads) and evaluates every grid β for one objective.
    pub fn sweep(
        &self,
        teacher: &SplitModel,
        split: &DataSplit,
        objective: Objective,
        seed: u64,
        teacher_top1: f64,
    ) -> ExperimentResult<Vec<RDPoint>> {
        if self.config.beta_grid.is_empty() {
            return Err(TrainError::EmptyGrid.into());
        }
        let mut points = Vec::new();
        for &beta in &self.config.beta_grid {
            let model = self.train(teacher, split, objective, beta, seed)?;
            let (p, _) = self.evaluate(teacher, split, &model, objective, beta, seed, teacher_top1)?;
            log::info!("{objective} β={beta}: {:.4} bpp, predictive loss {:.2}", p.bpp, p.predictive_loss);
            points.push(p);
        }
        let path = self.rd_dir().join(format!("{}-seed-{seed}.csv", objective.as_str()));
        std::fs::create_dir_all(self.rd_dir()).map_err(io_at(&path))?;
        std::fs::write(&path, rd_csv(&points)).map_err(io_at(&path))?;
        Ok(points)
    }

    /// Evaluates every trained grid configuration found for the configured
    /// objectives and seeds, writing `rd.csv` and `summary.json`. Each
    /// objective/seed pair that has any model must have all of them.
    pub fn eval_rd(&self) -> ExperimentResult<RdSummary> {
        let split = self.split()?;
        let teacher = self.teacher()?;
        let teacher_top1 = evaluate_top1(&teacher, &split.val)?;
        let mut points = Vec::new();
        let mut summaries = Vec::new();
        for &objective in &self.config.objectives {
            for &seed in &self.config.seeds {
                let present: Vec<bool> = self
                    .config
                    .beta_grid
                    .iter()
                    .map(|&b| self.model_dir(objective, b, seed).join("tables.svbc").exists())
                    .collect();
                if !present.iter().any(|&p| p) {
                    continue;
                }
                let mut group = Vec::new();
                for (&beta, &ok) in self.config.beta_grid.iter().zip(&present) {
                    let dir = self.model_dir(objective, beta, seed);
                    if !ok {
                        return Err(ExperimentError::Missing { path: dir, stage: "train" });
                    }
                    let model = load_compression(&dir)?;
                    let (p, _) = self.evaluate(&teacher, &split, &model, objective, beta, seed, teacher_top1)?;
                    group.push(p);
                }
                summaries.push(ObjectiveSummary {
                    objective,
                    seed,
                    lossless_beta: lossless_point(&group).map(|p| p.beta),
                    lossless_bpp: lossless_point(&group).map(|p| p.bpp),
                    best_predictive_loss: group.iter().map(|p| p.predictive_loss).fold(f64::INFINITY, f64::min),
                    bpp_inversions: training::bpp_inversions(&group),
                });
                points.extend(group);
            }
        }
        let manifest = self.manifest()?;
        let summary = RdSummary {
            provenance: self.provenance("eval-rd"),
            teacher_top1,
            eval_samples: split.val.len(),
            raw_mean_bytes: manifest.mean_raw_bytes(split.val.ids()),
            objectives: summaries,
            points: points.clone(),
        };
        std::fs::create_dir_all(self.rd_dir()).map_err(io_at(&self.rd_dir()))?;
        let csv = self.rd_dir().join("rd.csv");
        std::fs::write(&csv, rd_csv(&points)).map_err(io_at(&csv))?;
        let js = self.rd_dir().join("summary.json");
        std::fs::write(&js, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(io_at(&js))?;
        Ok(summary)
    }

    pub fn rd_points(&self) -> ExperimentResult<Vec<RDPoint>> {
        let path = self.rd_dir().join("rd.csv");
        if !path.exists() {
            return Err(ExperimentError::Missing { path, stage: "eval-rd" });
        }
        let text = std::fs::read_to_string(&path).map_err(io_at(&path))?;
        parse_rd_csv(&text).map_err(ExperimentError::Config)
    }

    /// HD and SG-HD at one β for the first sweep seed plus every replicate
    /// seed; written to `rd/replicates.csv`.
    pub fn replicates(
        &self,
        teacher: &SplitModel,
        split: &DataSplit,
        beta: f64,
        teacher_top1: f64,
    ) -> ExperimentResult<Vec<RDPoint>> {
        let seeds: Vec<u64> = self.config.seeds[..1]
            .iter()
            .chain(&self.config.replicate_seeds)
            .copied()
            .collect();
        let mut points = Vec::new();
        for objective in [Objective::Hd, Objective::SgHd] {
            for &seed in &seeds {
                let model = self.train(teacher, split, objective, beta, seed)?;
                points.push(self.evaluate(teacher, split, &model, objective, beta, seed, teacher_top1)?.0);
            }
        }
        let path = self.rd_dir().join("replicates.csv");
        std::fs::create_dir_all(self.rd_dir()).map_err(io_at(&path))?;
        std::fs::write(&path, rd_csv(&points)).map_err(io_at(&path))?;
        Ok(points)
    }

    pub fn reattach_dir(&self) -> PathBuf {
        self.root().join("teacher-reattach")
    }

    /// Alternate-depth teacher sharing the main teacher's head; only its
    /// tail is trained. Cached in [`Self::reattach_dir`].
    pub fn alternate_teacher(&self, teacher: &SplitModel, split: &DataSplit) -> ExperimentResult<SplitModel> {
        let dir = self.reattach_dir();
        if dir.join("tail.ckpt").exists() {
            return Ok(SplitModel::load(&dir)?);
        }
        let spec = BackboneSpec {
            stage_depths: self.config.reattach.stage_depths.clone(),
            ..self.config.backbone.clone()
        };
        let mut alt = build_teacher(&spec, self.config.seed.wrapping_add(100))?;
        alt.copy_head_from(teacher)?;
        let recipe = PretrainRecipe {
            epochs: self.config.reattach.pretrain_epochs,
            train_head: false,
            ..self.config.pretrain.clone()
        };
        crate::backbone::pretrain_teacher(&mut alt, &split.train, &split.val, &recipe)?;
        alt.save(&dir)?;
        Ok(alt)
    }

    /// Re-attaches a frozen compression model to the alternate teacher by
    /// fine-tuning its tail on decoded features.
    pub fn reattach(
        &self,
        teacher: &SplitModel,
        split: &DataSplit,
        model: &CompressionModel,
    ) -> ExperimentResult<ReattachReport> {
        let alt = self.alternate_teacher(teacher, split)?;
        let teacher_top1 = evaluate_top1(&alt, &split.val)?;
        let val_feats = training::decoded_features(model, &split.val)?;
        let labels = split.val.all_labels();
        let mut tail = alt.tail.clone();
        let before = training::tail_top1(&tail, &val_feats, &labels)?;
        let ft = training::finetune_tail(model, &mut tail, &split.train, &self.config.reattach.finetune)?;
        let after = training::tail_top1(&tail, &val_feats, &labels)?;
        let report = ReattachReport {
            teacher_top1,
            pipeline_top1_before: before,
            pipeline_top1_after: after,
            predictive_loss: 100.0 * (teacher_top1 - after),
            compression_hash_before: ft.compression_hash_before,
            compression_hash_after: ft.compression_hash_after,
            epoch_losses: ft.epoch_losses,
        };
        let path = self.reattach_dir().join("reattach.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report).expect("serializes")).map_err(io_at(&path))?;
        Ok(report)
    }

    /// Measured desk latency for the lossless HD configuration against
    /// offloading the stored files, plus the published-input reproduction.
    pub fn eval_latency(&self, measure_images: usize) -> ExperimentResult<(LatencyReport, LatencyReport)> {
        let split = self.split()?;
        let teacher = self.teacher()?;
        let points = self.rd_points()?;
        let mut configs = Vec::new();
        let seed = self.config.seeds[0];
        for &objective in &self.config.objectives {
            let group: Vec<RDPoint> = points
                .iter()
                .filter(|p| p.objective == objective && p.seed == seed)
                .cloned()
                .collect();
            let Some(ll) = lossless_point(&group) else { continue };
            let model = load_compression(&self.model_dir(objective, ll.beta, seed))?;
            let payloads = read_payloads(&self.payload_path(objective, ll.beta, seed))?;
            let sizes: Vec<usize> = payloads.iter().map(|p| p.len()).collect();
            let cost = measure_compute(&model, &teacher, &split, measure_images)?;
            configs.push(LatencyConfig {
                name: format!("{}-beta-{}", objective.as_str(), ll.beta),
                payload: PayloadStats::from_sizes(&sizes),
                cost,
            });
        }
        let manifest = self.manifest()?;
        let by_id: std::collections::BTreeMap<u32, usize> =
            manifest.samples.iter().map(|s| (s.id, s.raw_bytes as usize)).collect();
        let raw: Vec<usize> = split.val.ids().iter().map(|id| by_id[id]).collect();
        configs.push(LatencyConfig {
            name: "raw".into(),
            payload: PayloadStats::from_sizes(&raw),
            cost: ComputeCost {
                client_ms: 0.0,
                server_ms: measure_teacher(&teacher, &split, measure_images)?,
                coding_ms: 0.0,
            },
        });
        let report = latency::latency_report(&configs, &self.config.channels)?;
        let published = latency::published_input_report();
        let dir = self.root().join("latency");
        std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        for (name, r) in [("latency.csv", &report), ("latency_published.csv", &published)] {
            let path = dir.join(name);
            std::fs::write(&path, r.to_csv()).map_err(io_at(&path))?;
        }
        let prov = dir.join("provenance.json");
        std::fs::write(&prov, serde_json::to_string_pretty(&self.provenance("eval-latency")).expect("serializes"))
            .map_err(io_at(&prov))?;
        Ok((report, published))
    }
}

/// Mean per-image client and server milliseconds, run one image at a time.
pub fn measure_compute(
    model: &CompressionModel,
    teacher: &SplitModel,
    split: &DataSplit,
    images: usize,
) -> ExperimentResult<ComputeCost> {
    let tables = model.tables()?.clone();
    let client = ClientModel {
        encoder: model.encoder.clone(),
        tables: tables.clone(),
    };
    let z = model.encoder.config.clone();
    let (h, w) = (split.val.height / z.total_stride(), split.val.width / z.total_stride());
    let server = ServerModel {
        decoder: model.decoder.clone(),
        tail: teacher.tail.clone(),
        tables,
        latent_shape: (z.latent_channels, h, w),
        send_logits: false,
    };
    let n = images.clamp(1, split.val.len().max(1));
    let (mut client_s, mut server_s, mut coding_s) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let x = split.val.image_tensor(i);
        let t = Instant::now();
        let (payload, _) = client.encode(&x)?;
        client_s += t.elapsed().as_secs_f64();
        let t = Instant::now();
        server.infer(&payload)?;
        server_s += t.elapsed().as_secs_f64();
        let code = range_coder::decode(&payload, &server.tables)?;
        let t = Instant::now();
        range_coder::encode(&code, &server.tables)?;
        range_coder::decode(&payload, &server.tables)?;
        coding_s += t.elapsed().as_secs_f64();
    }
    let ms = |s: f64| s * 1e3 / n as f64;
    Ok(ComputeCost {
        client_ms: ms(client_s),
        server_ms: ms(server_s),
        coding_ms: ms(coding_s),
    })
}

fn measure_teacher(teacher: &SplitModel, split: &DataSplit, images: usize) -> ExperimentResult<f64> {
    let n = images.clamp(1, split.val.len().max(1));
    let t = Instant::now();
    for i in 0..n {
        teacher.logits(&split.val.image_tensor(i))?;
    }
    Ok(t.elapsed().as_secs_f64() * 1e3 / n as f64)
}
