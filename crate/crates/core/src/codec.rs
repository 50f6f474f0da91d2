//! Analysis transform, quantizer and synthesis transform.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{CdfTable, FactorizedPrior};
use crate::nn::{seeded_rng, ResBlock, UpsampleBlock};
use crate::tensor::{Checkpoint, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("input {height}×{width} is not divisible by the encoder stride {stride}; pad at ingestion")]
    Padding {
        height: usize,
        width: usize,
        stride: usize,
    },
    #[error("invalid codec config: {0}")]
    Config(String),
    #[error("encoder has {params} parameters, budget is {budget}")]
    OverBudget { params: usize, budget: usize },
    #[error("entropy tables are not frozen yet")]
    Unbound,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type CodecResult<T> = std::result::Result<T, CodecError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_channels: usize,
    /// Output widths of the first two residual blocks.
    pub hidden_channels: [usize; 2],
    pub latent_channels: usize,
    /// Stride of each of the three blocks.
    pub strides: [usize; 3],
    #[serde(default)]
    pub param_budget: Option<usize>,
}

impl Default for EncoderConfig {
    /// Desk scale: total stride 4, matching the teacher head.
    fn default() -> Self {
        EncoderConfig {
            input_channels: 3,
            hidden_channels: [32, 32],
            latent_channels: 24,
            strides: [2, 2, 1],
            param_budget: Some(60_000),
        }
    }
}

impl EncoderConfig {
    /// Three stride-2 blocks, about 140k parameters.
    pub fn full_scale() -> Self {
        EncoderConfig {
            input_channels: 3,
            hidden_channels: [48, 64],
            latent_channels: 48,
            strides: [2, 2, 2],
            param_budget: Some(150_000),
        }
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    fn widths(&self) -> [usize; 4] {
        [
            self.input_channels,
            self.hidden_channels[0],
            self.hidden_channels[1],
            self.latent_channels,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub latent_channels: usize,
    pub restoration_channels: usize,
    /// 1 or 2; applied after the restoration block.
    pub upsample_factor: usize,
    pub transformation_blocks: usize,
    /// Channels of the head output the decoder reproduces.
    pub output_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            latent_channels: 24,
            restoration_channels: 48,
            upsample_factor: 1,
            transformation_blocks: 1,
            output_channels: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    blocks: Vec<ResBlock>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> CodecResult<Self> {
        if config.strides.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(CodecError::Config("encoder strides must be 1 or 2".into()));
        }
        if config.widths().contains(&0) {
            return Err(CodecError::Config("encoder widths must be positive".into()));
        }
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let w = config.widths();
        let mut blocks = Vec::with_capacity(3);
        for i in 0..3 {
            blocks.push(ResBlock::new(
                &mut store,
                &format!("encoder.block{i}"),
                w[i],
                w[i + 1],
                config.strides[i],
                i < 2,
                &mut rng,
            )?);
        }
        if let Some(budget) = config.param_budget {
            let params = store.num_scalars();
            if params > budget {
                return Err(CodecError::OverBudget { params, budget });
            }
        }
        log::info!("encoder parameters: {}", store.num_scalars());
        Ok(Encoder {
            config,
            store,
            blocks,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// `z = g_a(x)`.
    pub fn analyze(&self, tape: &mut Tape, x: Var) -> CodecResult<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "analyze",
                expected: 4,
                found: shape,
            }
            .into());
        }
        let stride = self.config.total_stride();
        if shape[2] % stride != 0 || shape[3] % stride != 0 {
            return Err(CodecError::Padding {
                height: shape[2],
                width: shape[3],
                stride,
            });
        }
        let mut y = x;
        for b in &self.blocks {
            y = b.forward(tape, &self.store, y)?;
        }
        Ok(y)
    }

    pub fn analyze_tensor(&self, x: &Tensor) -> CodecResult<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let frozen = self.frozen_view();
        let z = frozen.analyze(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }

    fn frozen_view(&self) -> Encoder {
        let mut e = self.clone();
        e.store.freeze();
        e
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub store: ParamStore,
    restoration: ResBlock,
    upsample: Option<UpsampleBlock>,
    transform: Vec<ResBlock>,
}

impl Decoder {
    pub fn new(config: DecoderConfig, seed: u64) -> CodecResult<Self> {
        if !matches!(config.upsample_factor, 1 | 2) {
            return Err(CodecError::Config(format!(
                "upsample factor {} not in {{1, 2}}",
                config.upsample_factor
            )));
        }
        if config.transformation_blocks == 0 {
            return Err(CodecError::Config("need at least one transformation block".into()));
        }
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let r = config.restoration_channels;
        let restoration = ResBlock::new(
            &mut store,
            "decoder.restore0",
            config.latent_channels,
            r,
            1,
            true,
            &mut rng,
        )?;
        let upsample = if config.upsample_factor == 2 {
            Some(UpsampleBlock::new(&mut store, "decoder.upsample0", r, r, 2, &mut rng)?)
        } else {
            None
        };
        let mut transform = Vec::new();
        let mut c = r;
        for i in 0..config.transformation_blocks {
            transform.push(ResBlock::new(
                &mut store,
                &format!("decoder.transform{i}"),
                c,
                config.output_channels,
                1,
                true,
                &mut rng,
            )?);
            c = config.output_channels;
        }
        Ok(Decoder {
            config,
            store,
            restoration,
            upsample,
            transform,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// `h̃ = g_s(ẑ)`.
    pub fn synthesize(&self, tape: &mut Tape, z: Var) -> CodecResult<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "synthesize",
                expected: 4,
                found: shape,
            }
            .into());
        }
        if shape[1] != self.config.latent_channels {
            return Err(TensorError::ShapeMismatch {
                op: "synthesize",
                axis: "channels",
                expected: self.config.latent_channels,
                found: shape[1],
            }
            .into());
        }
        let mut y = self.restoration.forward(tape, &self.store, z)?;
        if let Some(up) = &self.upsample {
            y = up.forward(tape, &self.store, y)?;
        }
        for b in &self.transform {
            y = b.forward(tape, &self.store, y)?;
        }
        Ok(y)
    }

    pub fn synthesize_tensor(&self, z: &Tensor) -> CodecResult<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let mut frozen = self.clone();
        frozen.store.freeze();
        let h = frozen.synthesize(&mut tape, zv)?;
        Ok(tape.value(h).clone())
    }
}

/// Round half away from zero.
pub fn quantize_eval(z: &Tensor) -> Tensor {
    Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| v.round()).collect())
        .expect("same shape")
}

/// `z̃ = z + η`, `η ~ U(−½, ½)` i.i.d.; the gradient passes straight through.
pub fn quantize_train(tape: &mut Tape, z: Var, rng: &mut impl Rng) -> CodecResult<Var> {
    let shape = tape.shape(z).to_vec();
    let noise = Tensor::from_fn(shape, |_| rng.random_range(-0.5f32..0.5));
    let n = tape.constant(noise);
    Ok(tape.add(z, n)?)
}

pub fn quantize(tape: &mut Tape, z: Var, train: bool, rng: &mut impl Rng) -> CodecResult<Var> {
    if train {
        quantize_train(tape, z, rng)
    } else {
        let q = quantize_eval(tape.value(z));
        Ok(tape.constant(q))
    }
}

/// Integer latent of one image, channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    pub symbols: Vec<i32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl LatentCode {
    /// From a rounded `1×C×H×W` (or `C×H×W`) tensor.
    pub fn from_tensor(z: &Tensor, image_dims: (usize, usize)) -> CodecResult<Self> {
        let s = z.shape();
        let (c, h, w) = match s.len() {
            4 if s[0] == 1 => (s[1], s[2], s[3]),
            3 => (s[0], s[1], s[2]),
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "latent_code",
                    expected: 3,
                    found: s.to_vec(),
                }
                .into())
            }
        };
        Ok(LatentCode {
            symbols: z.data().iter().map(|v| v.round() as i32).collect(),
            channels: c,
            height: h,
            width: w,
            image_height: image_dims.0,
            image_width: image_dims.1,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, self.channels, self.height, self.width],
            self.symbols.iter().map(|&s| s as f32).collect(),
        )
        .expect("latent shape")
    }

    /// Per-channel observed `(min, max)`.
    pub fn bounds(&self) -> Vec<(i32, i32)> {
        let plane = self.height * self.width;
        (0..self.channels)
            .map(|c| {
                let ch = &self.symbols[c * plane..(c + 1) * plane];
                (
                    ch.iter().copied().min().unwrap_or(0),
                    ch.iter().copied().max().unwrap_or(0),
                )
            })
            .collect()
    }
}

/// Encoder, decoder and the shared entropy model.
#[derive(Clone, Debug)]
pub struct CompressionModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub prior: FactorizedPrior,
    pub prior_store: ParamStore,
    pub tables: Option<CdfTable>,
}

impl CompressionModel {
    pub fn new(enc: EncoderConfig, dec: DecoderConfig, seed: u64) -> CodecResult<Self> {
        if enc.latent_channels != dec.latent_channels {
            return Err(CodecError::Config(format!(
                "encoder emits {} latent channels, decoder expects {}",
                enc.latent_channels, dec.latent_channels
            )));
        }
        let encoder = Encoder::new(enc, seed)?;
        let decoder = Decoder::new(dec, seed.wrapping_add(1))?;
        let mut prior_store = ParamStore::new();
        let prior = FactorizedPrior::new(&mut prior_store, "prior", encoder.config.latent_channels, 10.0)?;
        Ok(CompressionModel {
            encoder,
            decoder,
            prior,
            prior_store,
            tables: None,
        })
    }

    pub fn freeze(&mut self) {
        self.encoder.store.freeze();
        self.decoder.store.freeze();
        self.prior_store.freeze();
    }

    pub fn unfreeze(&mut self) {
        self.encoder.store.unfreeze();
        self.decoder.store.unfreeze();
        self.prior_store.unfreeze();
    }

    pub fn tables(&self) -> CodecResult<&CdfTable> {
        self.tables.as_ref().ok_or(CodecError::Unbound)
    }

    /// Rounded latent code of a single image `1×C×H×W`, clamped into the
    /// table support. Returns the code and the number of clamped symbols.
    pub fn encode_latent(&self, x: &Tensor) -> CodecResult<(LatentCode, usize)> {
        let tables = self.tables()?;
        let z = quantize_eval(&self.encoder.analyze_tensor(x)?);
        let s = x.shape();
        let mut code = LatentCode::from_tensor(&z, (s[2], s[3]))?;
        let clamped = crate::range_coder::clamp_to_support(&mut code, tables);
        Ok((code, clamped))
    }

    /// Per-channel `(min, max)` of rounded latents over a batch tensor.
    pub fn observed_bounds(&self, batch: &Tensor) -> CodecResult<Vec<(i32, i32)>> {
        let z = quantize_eval(&self.encoder.analyze_tensor(batch)?);
        let s = z.shape().to_vec();
        let plane = s[2] * s[3];
        let mut bounds = vec![(i32::MAX, i32::MIN); s[1]];
        for (i, &v) in z.data().iter().enumerate() {
            let c = (i / plane) % s[1];
            let v = v as i32;
            bounds[c].0 = bounds[c].0.min(v);
            bounds[c].1 = bounds[c].1.max(v);
        }
        Ok(bounds)
    }

    /// Writes `encoder.ckpt`, `decoder.ckpt`, `prior.ckpt` and, when frozen,
    /// `tables.svbc` into `dir`.
    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let io = |e: TensorError| std::io::Error::other(e.to_string());
        self.encoder.store.to_checkpoint().save(&dir.join("encoder.ckpt")).map_err(io)?;
        self.decoder.store.to_checkpoint().save(&dir.join("decoder.ckpt")).map_err(io)?;
        self.prior_store.to_checkpoint().save(&dir.join("prior.ckpt")).map_err(io)?;
        if let Some(t) = &self.tables {
            std::fs::write(dir.join("tables.svbc"), t.to_bytes())?;
        }
        Ok(())
    }

    pub fn load(&mut self, dir: &Path) -> CodecResult<()> {
        self.encoder.store.load_checkpoint(&Checkpoint::load(&dir.join("encoder.ckpt"))?)?;
        self.decoder.store.load_checkpoint(&Checkpoint::load(&dir.join("decoder.ckpt"))?)?;
        self.prior_store.load_checkpoint(&Checkpoint::load(&dir.join("prior.ckpt"))?)?;
        let tpath = dir.join("tables.svbc");
        self.tables = if tpath.exists() {
            Some(CdfTable::load(&tpath).map_err(|e| CodecError::Config(e.to_string()))?)
        } else {
            None
        };
        Ok(())
    }

    /// Hash over the encoder, decoder and prior checkpoints plus tables.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.encoder.store.to_checkpoint().to_bytes());
        h.update(self.decoder.store.to_checkpoint().to_bytes());
        h.update(self.prior_store.to_checkpoint().to_bytes());
        if let Some(t) = &self.tables {
            h.update(t.to_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_away_from_zero() {
        let z = Tensor::new([5], vec![0.4, 0.6, -0.5, 0.5, -1.5]).unwrap();
        assert_eq!(quantize_eval(&z).data(), &[0.0, 1.0, -1.0, 1.0, -2.0]);
        let q = quantize_eval(&z);
        assert_eq!(quantize_eval(&q), q);
    }

    #[test]
    fn full_scale_encoder_is_about_140k() {
        let e = Encoder::new(EncoderConfig::full_scale(), 0).unwrap();
        let p = e.num_params() as f64;
        assert!((p - 140_000.0).abs() / 140_000.0 < 0.1, "{p}");
        assert_eq!(e.config.total_stride(), 8);
    }

    #[test]
    fn budget_is_enforced() {
        let cfg = EncoderConfig {
            param_budget: Some(1000),
            ..Default::default()
        };
        assert!(matches!(Encoder::new(cfg, 0), Err(CodecError::OverBudget { .. })));
    }
}
