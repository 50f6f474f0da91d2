//! Class-activation saliency from the teacher, turned into per-location
//! distortion weights.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::backbone::{predict, BackboneError, SplitModel};
use crate::data::Dataset;
use crate::tensor::{Tape, Tensor, TensorError};

pub const DEFAULT_FLOOR: f32 = 0.1;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("no maps to fuse")]
    Empty,
    #[error("map contains non-finite values")]
    NonFinite,
    #[error("no saliency map for sample {0}")]
    Missing(u32),
    #[error("sample {id}: {source}")]
    SampleIo { id: u32, source: std::io::Error },
    #[error("malformed saliency store: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type SaliencyResult<T> = std::result::Result<T, SaliencyError>;

/// XGradCAM for an `N×K×H×W` activation and its gradient: per-channel
/// weights `Σ (A / ΣA) · ∂y/∂A`, then `ReLU(Σ_k w_k A_k)`. Returns `N×H×W`.
pub fn xgradcam(activation: &Tensor, grad: &Tensor) -> Tensor {
    let s = activation.shape();
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let a = activation.data();
    let g = grad.data();
    let mut out = vec![0.0f32; n * plane];
    for ni in 0..n {
        let mut acc = vec![0.0f64; plane];
        for ki in 0..k {
            let base = (ni * k + ki) * plane;
            let ach = &a[base..base + plane];
            let gch = &g[base..base + plane];
            let total: f64 = ach.iter().map(|&v| v as f64).sum();
            if total.abs() < 1e-12 {
                continue;
            }
            let wk: f64 = ach
                .iter()
                .zip(gch)
                .map(|(&av, &gv)| av as f64 / total * gv as f64)
                .sum();
            for (o, &av) in acc.iter_mut().zip(ach) {
                *o += wk * av as f64;
            }
        }
        for (o, v) in out[ni * plane..(ni + 1) * plane].iter_mut().zip(acc) {
            *o = v.max(0.0) as f32;
        }
    }
    Tensor::new([n, h, w], out).expect("map shape")
}

/// Raw maps for each requested layer, `N×H_l×W_l` each, targeting
/// `targets` (or the teacher's own predictions when `None`).
pub fn gradcam(
    teacher: &SplitModel,
    x: &Tensor,
    layers: &[String],
    targets: Option<&[usize]>,
) -> SaliencyResult<Vec<Tensor>> {
    let known = teacher.spec.layer_names();
    for l in layers {
        if !known.contains(l) {
            return Err(SaliencyError::UnknownLayer(l.clone()));
        }
    }
    let mut m = teacher.clone();
    m.head.store.freeze();
    m.tail.store.freeze();
    let mut tape = Tape::new();
    // a tracked input makes every activation differentiable
    let xv = tape.variable(x.clone());
    let (logits, taps) = m.forward_with_taps(&mut tape, xv)?;
    let lv = tape.value(logits).clone();
    let classes = lv.shape()[1];
    let chosen = match targets {
        Some(t) => t.to_vec(),
        None => predict(&lv),
    };
    let mut seed = Tensor::zeros(lv.shape().to_vec());
    for (i, &c) in chosen.iter().enumerate() {
        seed.data_mut()[i * classes + c] = 1.0;
    }
    let grads = tape.backward_with_seed(logits, seed)?;
    layers
        .iter()
        .map(|l| {
            let (_, v) = taps.iter().find(|(n, _)| n == l).expect("checked above");
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(*v).to_vec()));
            Ok(xgradcam(tape.value(*v), &g))
        })
        .collect()
}

/// Bilinear resize of an `N×H×W` stack with half-pixel centers (no corner
/// alignment).
pub fn resize_bilinear(maps: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = maps.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return maps.clone();
    }
    let coord = |dst: usize, inp: usize, out: usize| -> (usize, usize, f32) {
        let src = ((dst as f32 + 0.5) * inp as f32 / out as f32 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f32)
    };
    let d = maps.data();
    let mut out = vec![0.0f32; n * out_h * out_w];
    for ni in 0..n {
        for y in 0..out_h {
            let (y0, y1, ly) = coord(y, h, out_h);
            for x in 0..out_w {
                let (x0, x1, lx) = coord(x, w, out_w);
                let at = |yy: usize, xx: usize| d[(ni * h + yy) * w + xx];
                let top = at(y0, x0) * (1.0 - lx) + at(y0, x1) * lx;
                let bottom = at(y1, x0) * (1.0 - lx) + at(y1, x1) * lx;
                out[(ni * out_h + y) * out_w + x] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    Tensor::new([n, out_h, out_w], out).expect("resize shape")
}

/// Unweighted mean of the maps after resizing each to `out_h×out_w`.
pub fn fuse_maps(maps: &[Tensor], out_h: usize, out_w: usize) -> SaliencyResult<Tensor> {
    let first = maps.first().ok_or(SaliencyError::Empty)?;
    let n = first.shape()[0];
    let mut acc = vec![0.0f64; n * out_h * out_w];
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(resize_bilinear(m, out_h, out_w).data()) {
            *a += v as f64;
        }
    }
    let k = maps.len() as f64;
    Ok(Tensor::new([n, out_h, out_w], acc.into_iter().map(|v| (v / k) as f32).collect())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub sample_id: u32,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f32>,
    pub layers: Vec<String>,
}

/// Min-max scaling to `[0, 1]`, plus `floor`, rescaled to mean 1. A
/// constant map becomes all ones.
pub fn normalize_weights(raw: &[f32], floor: f32) -> SaliencyResult<Vec<f32>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(SaliencyError::NonFinite);
    }
    let min = raw.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let max = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if raw.is_empty() || max - min <= 0.0 {
        return Ok(vec![1.0; raw.len()]);
    }
    let shifted: Vec<f64> = raw
        .iter()
        .map(|&v| (v as f64 - min) / (max - min) + floor as f64)
        .collect();
    let mean = shifted.iter().sum::<f64>() / shifted.len() as f64;
    Ok(shifted.into_iter().map(|v| (v / mean) as f32).collect())
}

/// Persisted map per training sample, keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyStore {
    pub height: usize,
    pub width: usize,
    pub floor: f32,
    pub layers: Vec<String>,
    pub maps: BTreeMap<u32, Vec<f32>>,
}

impl SaliencyStore {
    const MAGIC: &'static [u8; 4] = b"SVBS";

    /// Store with every weight equal to one, the plain-distortion ablation.
    pub fn all_ones(ids: &[u32], height: usize, width: usize) -> Self {
        SaliencyStore {
            height,
            width,
            floor: 0.0,
            layers: Vec::new(),
            maps: ids.iter().map(|&id| (id, vec![1.0; height * width])).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<SaliencyMap> {
        self.maps.get(&id).map(|w| SaliencyMap {
            sample_id: id,
            height: self.height,
            width: self.width,
            weights: w.clone(),
            layers: self.layers.clone(),
        })
    }

    /// `N×H×W` weights for a batch of sample ids.
    pub fn batch(&self, ids: &[u32]) -> SaliencyResult<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.height * self.width);
        for id in ids {
            data.extend_from_slice(self.maps.get(id).ok_or(SaliencyError::Missing(*id))?);
        }
        Ok(Tensor::new([ids.len(), self.height, self.width], data)?)
    }

    /// Layout: magic "SVBS", u32 version, u32 count, u32 height, u32 width,
    /// f32 floor, u32 layer count and per layer u32 length + UTF-8, then an
    /// index of `(u32 id, u64 offset)` pairs, then the f32 grids at those
    /// offsets.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        for v in [1u32, self.maps.len() as u32, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.floor.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.len() as u32).to_le_bytes());
            out.extend_from_slice(l.as_bytes());
        }
        let grid = self.height * self.width * 4;
        let data_start = out.len() + self.maps.len() * 12;
        for (i, id) in self.maps.keys().enumerate() {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&((data_start + i * grid) as u64).to_le_bytes());
        }
        for w in self.maps.values() {
            for v in w {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> SaliencyResult<Self> {
        let bad = |m: &str| SaliencyError::Format(m.to_string());
        let take = |pos: &mut usize, n: usize| -> SaliencyResult<&[u8]> {
            let s = bytes.get(*pos..*pos + n).ok_or_else(|| bad("truncated"))?;
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> SaliencyResult<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let mut pos = 0;
        if take(&mut pos, 4)? != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        if u32_at(&mut pos)? != 1 {
            return Err(bad("unsupported version"));
        }
        let count = u32_at(&mut pos)? as usize;
        let height = u32_at(&mut pos)? as usize;
        let width = u32_at(&mut pos)? as usize;
        let floor = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let nl = u32_at(&mut pos)? as usize;
        let mut layers = Vec::new();
        for _ in 0..nl {
            let len = u32_at(&mut pos)? as usize;
            layers.push(
                String::from_utf8(take(&mut pos, len)?.to_vec()).map_err(|_| bad("layer name"))?,
            );
        }
        let grid = height * width;
        let mut maps = BTreeMap::new();
        for _ in 0..count {
            let id = u32_at(&mut pos)?;
            let off = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let raw = bytes
                .get(off..off + grid * 4)
                .ok_or_else(|| bad("offset beyond file"))?;
            maps.insert(
                id,
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            );
        }
        Ok(SaliencyStore {
            height,
            width,
            floor,
            layers,
            maps,
        })
    }

    pub fn save(&self, path: &Path) -> SaliencyResult<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> SaliencyResult<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One normalized map per sample of `dataset`, at the head-output
/// resolution, targeting the teacher's own predictions.
pub fn precompute_dataset_saliency(
    teacher: &SplitModel,
    dataset: &Dataset,
    layers: &[String],
    floor: f32,
    batch: usize,
) -> SaliencyResult<SaliencyStore> {
    let (_, oh, ow) = teacher.spec.head_output_shape(dataset.height, dataset.width);
    let mut maps = BTreeMap::new();
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = dataset.batch(chunk);
        let raw = gradcam(teacher, &x, layers, None)?;
        let fused = fuse_maps(&raw, oh, ow)?;
        for (j, &i) in chunk.iter().enumerate() {
            let grid = &fused.data()[j * oh * ow..(j + 1) * oh * ow];
            maps.insert(dataset.ids()[i], normalize_weights(grid, floor)?);
        }
    }
    Ok(SaliencyStore {
        height: oh,
        width: ow,
        floor,
        layers: layers.to_vec(),
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_normalizes_to_ones() {
        assert_eq!(normalize_weights(&[3.0; 6], 0.1).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn bilinear_matches_half_pixel_rule() {
        // 1×1×2 → 1×1×4: sources at -0.25, 0.25, 0.75, 1.25
        let m = Tensor::new([1, 1, 2], vec![0.0, 4.0]).unwrap();
        let r = resize_bilinear(&m, 1, 4);
        assert_eq!(r.data(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
