//! Fully factorized learned prior over latent elements and the fixed-point
//! cumulative tables the range coder reads.
//!
//! Each latent channel owns a small monotone network mapping a real value to
//! the logit of its CDF: four affine layers with widths `1 → 3 → 3 → 3 → 1`,
//! softplus-reparameterized (hence non-negative) matrices, and a
//! `x + tanh(a)·tanh(x)` nonlinearity after the first three. Monotonicity
//! holds by construction because `|tanh(a)| < 1`.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{CustomOp, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Likelihood floor applied before taking logs.
pub const P_MIN: f64 = 1.0 / (1u64 << 20) as f64;
/// Coder table precision in bits.
pub const DEFAULT_PRECISION: u32 = 16;
pub const DEFAULT_MAX_ALPHABET: usize = 4096;

const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const LAYERS: usize = 4;

#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub channels: usize,
    pub matrices: [ParamId; LAYERS],
    pub biases: [ParamId; LAYERS],
    pub factors: [ParamId; LAYERS - 1],
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Effective (constrained) per-channel parameters in f64.
#[derive(Clone, Debug)]
struct Effective {
    raw_m: [Vec<f64>; LAYERS],
    m: [Vec<f64>; LAYERS],
    b: [Vec<f64>; LAYERS],
    raw_a: [Vec<f64>; LAYERS - 1],
    ta: [Vec<f64>; LAYERS - 1],
}

impl Effective {
    fn from_values(m: [&Tensor; LAYERS], b: [&Tensor; LAYERS], a: [&Tensor; LAYERS - 1]) -> Self {
        let f64s = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let raw_m: [Vec<f64>; LAYERS] = std::array::from_fn(|i| f64s(m[i]));
        let raw_a: [Vec<f64>; LAYERS - 1] = std::array::from_fn(|i| f64s(a[i]));
        Effective {
            m: std::array::from_fn(|i| raw_m[i].iter().map(|&v| softplus(v)).collect()),
            b: std::array::from_fn(|i| f64s(b[i])),
            ta: std::array::from_fn(|i| raw_a[i].iter().map(|&v| v.tanh()).collect()),
            raw_m,
            raw_a,
        }
    }

    fn from_store(prior: &FactorizedPrior, store: &ParamStore) -> Self {
        Self::from_values(
            prior.matrices.map(|id| store.value(id)),
            prior.biases.map(|id| store.value(id)),
            prior.factors.map(|id| store.value(id)),
        )
    }

    /// Offsets of channel `c` inside the flattened layer-`i` tensors.
    fn m_off(c: usize, i: usize) -> usize {
        c * FILTERS[i + 1] * FILTERS[i]
    }

    fn v_off(c: usize, i: usize) -> usize {
        c * FILTERS[i + 1]
    }

    /// Forward pass returning the CDF logit and, when `trace` is given, the
    /// layer inputs and pre-activations needed for the adjoint.
    fn logit(&self, c: usize, v: f64, trace: Option<&mut Trace>) -> f64 {
        let mut x = [v, 0.0, 0.0];
        let mut local = Trace::default();
        for i in 0..LAYERS {
            let (nin, nout) = (FILTERS[i], FILTERS[i + 1]);
            let mo = Self::m_off(c, i);
            let vo = Self::v_off(c, i);
            let mut y = [0.0; 3];
            for (o, yo) in y.iter_mut().enumerate().take(nout) {
                let mut acc = self.b[i][vo + o];
                for (j, xj) in x.iter().enumerate().take(nin) {
                    acc += self.m[i][mo + o * nin + j] * xj;
                }
                *yo = acc;
            }
            local.inputs[i] = x;
            local.pre[i] = y;
            if i < LAYERS - 1 {
                for o in 0..nout {
                    x[o] = y[o] + self.ta[i][vo + o] * y[o].tanh();
                }
            } else {
                x = y;
            }
        }
        if let Some(t) = trace {
            *t = local;
        }
        x[0]
    }

    /// Accumulates `g · ∂logit/∂θ` into `grads` and returns `g · ∂logit/∂v`.
    fn logit_adjoint(&self, c: usize, trace: &Trace, g: f64, grads: &mut ParamGrads) -> f64 {
        let mut dx = [g, 0.0, 0.0];
        for i in (0..LAYERS).rev() {
            let (nin, nout) = (FILTERS[i], FILTERS[i + 1]);
            let mo = Self::m_off(c, i);
            let vo = Self::v_off(c, i);
            let mut dy = [0.0; 3];
            if i < LAYERS - 1 {
                for o in 0..nout {
                    let t = trace.pre[i][o].tanh();
                    dy[o] = dx[o] * (1.0 + self.ta[i][vo + o] * (1.0 - t * t));
                    grads.a[i][vo + o] += dx[o] * t;
                }
            } else {
                dy[..nout].copy_from_slice(&dx[..nout]);
            }
            let mut dxin = [0.0; 3];
            for o in 0..nout {
                grads.b[i][vo + o] += dy[o];
                for j in 0..nin {
                    grads.m[i][mo + o * nin + j] += dy[o] * trace.inputs[i][j];
                    dxin[j] += self.m[i][mo + o * nin + j] * dy[o];
                }
            }
            dx = dxin;
        }
        dx[0]
    }

    /// `F(v + ½) − F(v − ½)` without flooring, evaluated on the side of the
    /// sigmoid where it does not saturate.
    fn mass(&self, c: usize, v: f64) -> f64 {
        let lower = self.logit(c, v - 0.5, None);
        let upper = self.logit(c, v + 0.5, None);
        let s = if lower + upper > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * upper) - sigmoid(s * lower)).abs()
    }
}

#[derive(Clone, Copy, Default)]
struct Trace {
    inputs: [[f64; 3]; LAYERS],
    pre: [[f64; 3]; LAYERS],
}

struct ParamGrads {
    m: [Vec<f64>; LAYERS],
    b: [Vec<f64>; LAYERS],
    a: [Vec<f64>; LAYERS - 1],
}

impl FactorizedPrior {
    /// Registers the prior's parameters under `prefix` in `store`. Biases
    /// start at zero so the initial density is symmetric about the origin.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, init_scale: f64) -> Result<Self> {
        if channels == 0 {
            return Err(TensorError::InvalidArgument {
                op: "factorized_prior",
                reason: "zero channels".into(),
            });
        }
        let scale = init_scale.powf(1.0 / LAYERS as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for i in 0..LAYERS {
            let init = (1.0 / scale / FILTERS[i + 1] as f64).exp_m1().ln() as f32;
            matrices.push(store.add(
                format!("{prefix}.matrix{i}"),
                Tensor::full([channels, FILTERS[i + 1], FILTERS[i]], init),
            )?);
            biases.push(store.add(
                format!("{prefix}.bias{i}"),
                Tensor::zeros([channels, FILTERS[i + 1]]),
            )?);
            if i < LAYERS - 1 {
                factors.push(store.add(
                    format!("{prefix}.factor{i}"),
                    Tensor::zeros([channels, FILTERS[i + 1]]),
                )?);
            }
        }
        Ok(FactorizedPrior {
            channels,
            matrices: matrices.try_into().expect("layer count"),
            biases: biases.try_into().expect("layer count"),
            factors: factors.try_into().expect("layer count"),
        })
    }

    pub fn num_params(&self) -> usize {
        let per: usize = (0..LAYERS)
            .map(|i| FILTERS[i] * FILTERS[i + 1] + FILTERS[i + 1])
            .sum::<usize>()
            + FILTERS[1..LAYERS].iter().sum::<usize>();
        per * self.channels
    }

    /// Evaluates `F_c(x)` in f64 outside of any tape.
    pub fn cdf(&self, store: &ParamStore, channel: usize, x: f64) -> f64 {
        sigmoid(Effective::from_store(self, store).logit(channel, x, None))
    }

    /// Unfloored probability masses of integer symbols for one channel.
    pub fn pmf(&self, store: &ParamStore, channel: usize, symbols: impl IntoIterator<Item = i32>) -> Vec<f64> {
        let eff = Effective::from_store(self, store);
        symbols
            .into_iter()
            .map(|k| eff.mass(channel, k as f64))
            .collect()
    }

    /// CDF evaluator that converts the parameters once.
    pub fn cdf_fn<'a>(&self, store: &'a ParamStore) -> impl Fn(usize, f64) -> f64 + 'a {
        let eff = Effective::from_store(self, store);
        move |c, x| sigmoid(eff.logit(c, x, None))
    }

    /// Per-element likelihoods of an `N×C×H×W` latent, floored at
    /// [`P_MIN`]. Differentiable with respect to the latent and the prior.
    pub fn likelihood(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "likelihood",
                expected: 4,
                found: shape,
            });
        }
        if shape[1] != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "likelihood",
                axis: "channels",
                expected: self.channels,
                found: shape[1],
            });
        }
        let params: Vec<Var> = self
            .matrices
            .iter()
            .chain(&self.biases)
            .chain(&self.factors)
            .map(|&id| tape.param(store, id))
            .collect();
        let mut inputs = vec![z];
        inputs.extend(&params);
        let values: Vec<&Tensor> = params.iter().map(|&v| tape.value(v)).collect();
        let eff = Effective::from_values(
            std::array::from_fn(|i| values[i]),
            std::array::from_fn(|i| values[LAYERS + i]),
            std::array::from_fn(|i| values[2 * LAYERS + i]),
        );
        let plane = shape[2] * shape[3];
        let out: Vec<f32> = tape
            .value(z)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane) % self.channels;
                eff.mass(c, v as f64).max(P_MIN) as f32
            })
            .collect();
        let output = Tensor::new(shape.clone(), out)?;
        Ok(tape.custom(
            &inputs,
            output,
            Box::new(LikelihoodOp {
                eff,
                channels: self.channels,
                plane,
            }),
        ))
    }

    /// `Σ −log₂ p(z)` in bits.
    pub fn rate_bits(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let p = self.likelihood(tape, store, z)?;
        Ok(tape.neg_log2_sum(p))
    }

    /// Freezes the learned CDF into coder tables over
    /// `[min − 2, max + 2]` per channel. Mass outside the support is folded
    /// into the two endpoint symbols.
    pub fn freeze_tables(
        &self,
        store: &ParamStore,
        observed: &[(i32, i32)],
        precision: u32,
        max_alphabet: usize,
    ) -> Result<CdfTable, EntropyError> {
        if observed.len() != self.channels {
            return Err(EntropyError::ChannelMismatch {
                expected: self.channels,
                found: observed.len(),
            });
        }
        let eff = Effective::from_store(self, store);
        let mut z_mins = Vec::with_capacity(self.channels);
        let mut pmfs = Vec::with_capacity(self.channels);
        for (c, &(lo, hi)) in observed.iter().enumerate() {
            if lo > hi {
                return Err(EntropyError::InvalidTable(format!(
                    "channel {c}: empty observed range [{lo}, {hi}]"
                )));
            }
            let (lo, hi) = (lo - 2, hi + 2);
            let len = (hi as i64 - lo as i64 + 1) as usize;
            if len > max_alphabet {
                return Err(EntropyError::AlphabetTooLarge {
                    channel: c,
                    size: len,
                    max: max_alphabet,
                });
            }
            let cdf = |x: f64| sigmoid(eff.logit(c, x, None));
            let mut pmf: Vec<f64> = (lo..=hi).map(|k| eff.mass(c, k as f64)).collect();
            pmf[0] += cdf(lo as f64 - 0.5);
            pmf[len - 1] += 1.0 - cdf(hi as f64 + 0.5);
            z_mins.push(lo);
            pmfs.push(pmf);
        }
        CdfTable::from_pmfs(&z_mins, &pmfs, precision)
    }
}

struct LikelihoodOp {
    eff: Effective,
    channels: usize,
    plane: usize,
}

impl CustomOp for LikelihoodOp {
    fn name(&self) -> &'static str {
        "factorized_likelihood"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let mut grads = ParamGrads {
            m: std::array::from_fn(|i| vec![0.0; self.eff.m[i].len()]),
            b: std::array::from_fn(|i| vec![0.0; self.eff.b[i].len()]),
            a: std::array::from_fn(|i| vec![0.0; self.eff.ta[i].len()]),
        };
        let mut dz = vec![0.0f32; z.numel()];
        let (mut tl, mut tu) = (Trace::default(), Trace::default());
        for (i, (&v, (&g, _))) in z
            .data()
            .iter()
            .zip(grad_out.data().iter().zip(output.data()))
            .enumerate()
        {
            let g = g as f64;
            let c = (i / self.plane) % self.channels;
            let v = v as f64;
            let lower = self.eff.logit(c, v - 0.5, Some(&mut tl));
            let upper = self.eff.logit(c, v + 0.5, Some(&mut tu));
            let s = if lower + upper > 0.0 { -1.0 } else { 1.0 };
            let (su, sl) = (sigmoid(s * upper), sigmoid(s * lower));
            // the floor blocks gradients that would push p further below it
            if (su - sl).abs() < P_MIN && g >= 0.0 {
                continue;
            }
            let sign = if su - sl >= 0.0 { 1.0 } else { -1.0 };
            // d|σ(s·u) − σ(s·l)| = sign·s·(σ'(su)·du − σ'(sl)·dl)
            let gu = g * sign * s * su * (1.0 - su);
            let gl = -g * sign * s * sl * (1.0 - sl);
            let d = self.eff.logit_adjoint(c, &tu, gu, &mut grads)
                + self.eff.logit_adjoint(c, &tl, gl, &mut grads);
            dz[i] = d as f32;
        }
        let mut out = Vec::with_capacity(inputs.len());
        out.push(needs[0].then(|| Tensor::new(z.shape().to_vec(), dz).expect("latent grad")));
        let chain = |raw: &[f64], d: &[f64], f: fn(f64) -> f64, t: &Tensor| {
            Tensor::new(
                t.shape().to_vec(),
                raw.iter().zip(d).map(|(&r, &g)| (g * f(r)) as f32).collect(),
            )
            .expect("prior grad")
        };
        for i in 0..LAYERS {
            out.push(needs[1 + i].then(|| chain(&self.eff.raw_m[i], &grads.m[i], sigmoid, inputs[1 + i])));
        }
        for i in 0..LAYERS {
            out.push(needs[1 + LAYERS + i].then(|| {
                Tensor::new(
                    inputs[1 + LAYERS + i].shape().to_vec(),
                    grads.b[i].iter().map(|&g| g as f32).collect(),
                )
                .expect("prior grad")
            }));
        }
        for i in 0..LAYERS - 1 {
            let dtanh = |r: f64| 1.0 - r.tanh().powi(2);
            let idx = 1 + 2 * LAYERS + i;
            out.push(needs[idx].then(|| chain(&self.eff.raw_a[i], &grads.a[i], dtanh, inputs[idx])));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("channel {channel}: alphabet of {size} symbols exceeds limit {max}")]
    AlphabetTooLarge { channel: usize, size: usize, max: usize },
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-channel integer support and cumulative frequencies summing to `2^P`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelTable {
    pub z_min: i32,
    /// `support_len + 1` entries, from 0 to the total.
    pub cdf: Vec<u32>,
}

impl ChannelTable {
    pub fn support_len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn z_max(&self) -> i32 {
        self.z_min + self.support_len() as i32 - 1
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub precision: u32,
    pub channels: Vec<ChannelTable>,
}

impl CdfTable {
    pub const MAGIC: &'static [u8; 4] = b"SVBC";
    pub const VERSION: u32 = 1;

    /// Quantizes probability vectors to integer frequencies. Every symbol
    /// keeps frequency ≥ 1; rounding error is absorbed by the largest
    /// entries.
    pub fn from_pmfs(z_mins: &[i32], pmfs: &[Vec<f64>], precision: u32) -> Result<CdfTable, EntropyError> {
        if z_mins.len() != pmfs.len() {
            return Err(EntropyError::ChannelMismatch {
                expected: z_mins.len(),
                found: pmfs.len(),
            });
        }
        if !(1..=16).contains(&precision) {
            return Err(EntropyError::InvalidTable(format!("precision {precision} outside 1..=16")));
        }
        let total = 1i64 << precision;
        let mut channels = Vec::with_capacity(pmfs.len());
        for (c, (pmf, &z_min)) in pmfs.iter().zip(z_mins).enumerate() {
            if pmf.is_empty() || pmf.len() as i64 > total {
                return Err(EntropyError::InvalidTable(format!(
                    "channel {c}: {} symbols cannot fit total {total}",
                    pmf.len()
                )));
            }
            if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(EntropyError::InvalidTable(format!("channel {c}: invalid probability")));
            }
            let mass: f64 = pmf.iter().sum();
            let mut freq: Vec<i64> = if mass > 0.0 {
                pmf.iter()
                    .map(|p| ((p / mass) * total as f64).round().max(1.0) as i64)
                    .collect()
            } else {
                vec![1; pmf.len()]
            };
            let mut diff = total - freq.iter().sum::<i64>();
            let mut order: Vec<usize> = (0..freq.len()).collect();
            order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
            while diff != 0 {
                let mut progressed = false;
                for &i in &order {
                    if diff > 0 {
                        freq[i] += diff;
                        diff = 0;
                    } else if freq[i] > 1 {
                        let take = (freq[i] - 1).min(-diff);
                        freq[i] -= take;
                        diff += take;
                    }
                    progressed = true;
                    if diff == 0 {
                        break;
                    }
                }
                debug_assert!(progressed);
            }
            let mut cdf = Vec::with_capacity(freq.len() + 1);
            let mut acc = 0u32;
            cdf.push(0);
            for f in freq {
                acc += f as u32;
                cdf.push(acc);
            }
            channels.push(ChannelTable { z_min, cdf });
        }
        let table = CdfTable { precision, channels };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), EntropyError> {
        let total = 1u32 << self.precision;
        for (c, ch) in self.channels.iter().enumerate() {
            if ch.cdf.len() < 2 || ch.cdf[0] != 0 || *ch.cdf.last().unwrap() != total {
                return Err(EntropyError::InvalidTable(format!(
                    "channel {c}: cumulative array must run from 0 to {total}"
                )));
            }
            if ch.cdf.windows(2).any(|w| w[1] <= w[0]) {
                return Err(EntropyError::InvalidTable(format!(
                    "channel {c}: cumulative array not strictly increasing"
                )));
            }
            if (ch.z_min as i64) + (ch.support_len() as i64) - 1 > i32::MAX as i64 {
                return Err(EntropyError::InvalidTable(format!("channel {c}: support overflows")));
            }
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Ideal code length of `symbol` on `channel` in bits.
    pub fn ideal_bits(&self, channel: usize, symbol: i32) -> f64 {
        let ch = &self.channels[channel];
        let f = ch.freq((symbol - ch.z_min) as usize) as f64;
        self.precision as f64 - f.log2()
    }

    /// Magic "SVBC", u32 version, u32 channel count, then per channel i32
    /// `z_min`, u32 support length and `length + 1` u32 cumulative entries.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels.len() as u32).to_le_bytes());
        for ch in &self.channels {
            out.extend_from_slice(&ch.z_min.to_le_bytes());
            out.extend_from_slice(&(ch.support_len() as u32).to_le_bytes());
            for v in &ch.cdf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CdfTable, EntropyError> {
        let bad = |m: &str| EntropyError::InvalidTable(m.to_string());
        let mut pos = 0usize;
        let word = |pos: &mut usize| -> Result<[u8; 4], EntropyError> {
            let w = bytes
                .get(*pos..*pos + 4)
                .ok_or_else(|| bad("truncated table"))?;
            *pos += 4;
            Ok(w.try_into().unwrap())
        };
        if &word(&mut pos)? != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        if u32::from_le_bytes(word(&mut pos)?) != Self::VERSION {
            return Err(bad("unsupported version"));
        }
        let count = u32::from_le_bytes(word(&mut pos)?) as usize;
        let mut channels = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let z_min = i32::from_le_bytes(word(&mut pos)?);
            let len = u32::from_le_bytes(word(&mut pos)?) as usize;
            if len > bytes.len() / 4 {
                return Err(bad("support length exceeds file"));
            }
            let mut cdf = Vec::with_capacity(len + 1);
            for _ in 0..=len {
                cdf.push(u32::from_le_bytes(word(&mut pos)?));
            }
            channels.push(ChannelTable { z_min, cdf });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let total = channels.first().and_then(|c| c.cdf.last().copied()).unwrap_or(1 << 16);
        if !total.is_power_of_two() || total < 2 {
            return Err(bad("total frequency is not a power of two"));
        }
        let table = CdfTable {
            precision: total.trailing_zeros(),
            channels,
        };
        table.validate()?;
        Ok(table)
    }

    /// First 8 bytes of the SHA-256 digest of the serialized table.
    pub fn hash(&self) -> [u8; 8] {
        let digest = Sha256::digest(self.to_bytes());
        digest[..8].try_into().unwrap()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), EntropyError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<CdfTable, EntropyError> {
        CdfTable::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_four_symbols_at_four_bits() {
        let t = CdfTable::from_pmfs(&[0], &[vec![0.25; 4]], 4).unwrap();
        assert_eq!(t.channels[0].cdf, vec![0, 4, 8, 12, 16]);
    }

    #[test]
    fn tiny_probabilities_keep_frequency_one() {
        let pmf = vec![1e-12, 0.5, 0.5 - 2e-12, 1e-12];
        let t = CdfTable::from_pmfs(&[-1], &[pmf], 16).unwrap();
        let ch = &t.channels[0];
        assert!((0..4).all(|i| ch.freq(i) >= 1));
        assert_eq!(*ch.cdf.last().unwrap(), 1 << 16);
    }

    #[test]
    fn table_bytes_round_trip_and_reject_damage() {
        let t = CdfTable::from_pmfs(&[-3, 2], &[vec![0.1, 0.2, 0.7], vec![0.5, 0.5]], 16).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(CdfTable::from_bytes(&bytes).unwrap(), t);
        assert!(CdfTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CdfTable::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(CdfTable::from_bytes(&extra).is_err());
    }

    #[test]
    fn symmetric_init_peaks_at_zero() {
        let mut store = ParamStore::new();
        let prior = FactorizedPrior::new(&mut store, "prior", 2, 10.0).unwrap();
        let p = prior.pmf(&store, 1, -5..=5);
        let zero = p[5];
        assert!(p.iter().enumerate().all(|(i, &v)| i == 5 || v < zero));
        for k in 0..5 {
            assert!((p[k] - p[10 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn alphabet_guard() {
        let mut store = ParamStore::new();
        let prior = FactorizedPrior::new(&mut store, "prior", 1, 10.0).unwrap();
        assert!(matches!(
            prior.freeze_tables(&store, &[(-100, 100)], 16, 64),
            Err(EntropyError::AlphabetTooLarge { .. })
        ));
        let t = prior.freeze_tables(&store, &[(-3, 4)], 16, 64).unwrap();
        assert_eq!(t.channels[0].z_min, -5);
        assert_eq!(t.channels[0].z_max(), 6);
    }
}
