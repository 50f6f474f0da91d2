//! Desk dataset: synthetic image generation, folder ingestion, and the
//! persisted tensor store plus manifest.
//!
//! Pixels are normalized as `v / 127.5 − 1`, so tensors lie in `[-1, 1]`.
//! Images whose sides are not multiples of the codec stride are padded
//! reflectively here, at ingestion, so the codec never has to.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("undecodable images: {0:?}")]
    Undecodable(Vec<PathBuf>),
    #[error("image {path} is {found:?}, dataset images are {expected:?}")]
    DimensionMismatch {
        path: PathBuf,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("dataset is empty")]
    Empty,
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn normalize_pixel(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// In-memory image set with per-sample ids that stay stable across splits.
#[derive(Debug)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    ids: Vec<u32>,
    labels: Vec<usize>,
    images: Vec<f32>,
    label_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            images: self.images.clone(),
            label_reads: AtomicUsize::new(0),
        }
    }
}

impl Dataset {
    pub fn new(
        dims: (usize, usize, usize),
        num_classes: usize,
        ids: Vec<u32>,
        labels: Vec<usize>,
        images: Vec<f32>,
    ) -> Result<Self, DataError> {
        let (channels, height, width) = dims;
        let per = channels * height * width;
        if ids.len() != labels.len() || images.len() != ids.len() * per {
            return Err(DataError::Format("ids, labels and images disagree".into()));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            num_classes,
            ids,
            labels,
            images,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let per = self.sample_len();
        &self.images[index * per..(index + 1) * per]
    }

    pub fn image_tensor(&self, index: usize) -> Tensor {
        Tensor::new(
            [1, self.channels, self.height, self.width],
            self.image(index).to_vec(),
        )
        .expect("sample shape")
    }

    /// Stacks the given samples into an NCHW batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(
            [indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("batch shape")
    }

    /// Ground-truth labels. Every call is counted, which lets callers assert
    /// that label-free objectives never look.
    pub fn labels_for(&self, indices: &[usize]) -> Vec<usize> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn all_labels(&self) -> Vec<usize> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.labels.clone()
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Same images with labels replaced by `f(label)`.
    pub fn relabeled(&self, num_classes: usize, f: impl Fn(usize) -> usize) -> Dataset {
        let mut d = self.clone();
        d.labels = self.labels.iter().map(|&l| f(l)).collect();
        d.num_classes = num_classes;
        d
    }

    /// First `n` samples (or all if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            ids: self.ids[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            images: self.images[..n * self.sample_len()].to_vec(),
            label_reads: AtomicUsize::new(0),
        }
    }

    fn subset(&self, ids: &[u32]) -> Dataset {
        let pos: BTreeMap<u32, usize> = self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let per = self.sample_len();
        let mut images = Vec::with_capacity(ids.len() * per);
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            let i = pos[id];
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            ids: ids.to_vec(),
            labels,
            images,
            label_reads: AtomicUsize::new(0),
        }
    }

    const MAGIC: &'static [u8; 4] = b"SVBD";

    /// Tensor store: magic "SVBD", u32 version, count, channels, height,
    /// width, classes, then per sample u32 id, u32 label, f32 pixels.
    pub fn write_to(&self, path: &Path) -> Result<(), DataError> {
        let mut out = Vec::with_capacity(28 + self.len() * (8 + 4 * self.sample_len()));
        out.extend_from_slice(Self::MAGIC);
        for v in [
            1u32,
            self.len() as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            out.extend_from_slice(&(self.labels[i] as u32).to_le_bytes());
            for v in self.image(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(io_err(path))
    }

    pub fn read_from(path: &Path) -> Result<Dataset, DataError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        let bad = |m: &str| DataError::Format(m.to_string());
        if bytes.len() < 28 || &bytes[..4] != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != 1 {
            return Err(bad("unsupported version"));
        }
        let (n, c, h, w, k) = (
            word(1) as usize,
            word(2) as usize,
            word(3) as usize,
            word(4) as usize,
            word(5) as usize,
        );
        let per = c * h * w;
        if bytes.len() != 28 + n * (8 + 4 * per) {
            return Err(bad("size does not match header"));
        }
        let mut ids = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut images = Vec::with_capacity(n * per);
        for rec in bytes[28..].chunks_exact(8 + 4 * per) {
            ids.push(u32::from_le_bytes(rec[0..4].try_into().unwrap()));
            labels.push(u32::from_le_bytes(rec[4..8].try_into().unwrap()) as usize);
            images.extend(
                rec[8..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
        }
        Dataset::new((c, h, w), k, ids, labels, images)
    }
}

/// Train/validation pair produced from one manifest.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u32,
    pub path: String,
    pub label: usize,
    /// Size of the stored source file, the trivial offloading baseline.
    pub raw_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_count: usize,
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub source_height: usize,
    pub source_width: usize,
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<SampleRecord>,
    pub seed: u64,
    pub val_fraction: f64,
    pub train_ids: Vec<u32>,
    pub val_ids: Vec<u32>,
    pub train_hash: String,
    pub val_hash: String,
    pub tensor_file: String,
    pub normalization: String,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn mean_raw_bytes(&self, ids: &[u32]) -> f64 {
        let by_id: BTreeMap<u32, u64> = self.samples.iter().map(|s| (s.id, s.raw_bytes)).collect();
        ids.iter().map(|id| by_id[id] as f64).sum::<f64>() / ids.len().max(1) as f64
    }

    /// Loads the tensor store next to the manifest and splits it.
    pub fn load_split(&self, manifest_dir: &Path) -> Result<DataSplit, DataError> {
        let all = Dataset::read_from(&manifest_dir.join(&self.tensor_file))?;
        Ok(DataSplit {
            train: all.subset(&self.train_ids),
            val: all.subset(&self.val_ids),
        })
    }
}

pub fn split_hash(ids: &[u32]) -> String {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Mirror padding (edge pixel not repeated) of a `c×h×w` u8 image up to the
/// next multiple of `stride` on each side, split as evenly as possible.
pub fn reflect_pad(pixels: &[u8], c: usize, h: usize, w: usize, stride: usize) -> (Vec<u8>, usize, usize) {
    let ph = h.div_ceil(stride) * stride;
    let pw = w.div_ceil(stride) * stride;
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let mut out = vec![0u8; c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize - top as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - left as isize, w);
                out[(ch * ph + y) * pw + x] = pixels[(ch * h + sy) * w + sx];
            }
        }
    }
    (out, ph, pw)
}

/// Ingests a `<class>/<image>` folder tree into a tensor store plus
/// manifest inside `out_dir`. Classes are the sorted subdirectory names.
pub fn prepare_data(
    source: &Path,
    out_dir: &Path,
    seed: u64,
    val_fraction: f64,
    stride: usize,
) -> Result<DatasetManifest, DataError> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(source)
        .map_err(io_err(source))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let mut files = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        files.extend(entries.into_iter().map(|p| (label, p)));
    }
    if files.is_empty() {
        return Err(DataError::Empty);
    }
    let mut failed = Vec::new();
    let mut decoded = Vec::new();
    let mut dims: Option<(u32, u32)> = None;
    for (label, path) in &files {
        match image::open(path) {
            Ok(img) => {
                let rgb = img.to_rgb8();
                let d = rgb.dimensions();
                match dims {
                    None => dims = Some(d),
                    Some(e) if e != d => {
                        return Err(DataError::DimensionMismatch {
                            path: path.clone(),
                            expected: e,
                            found: d,
                        })
                    }
                    _ => {}
                }
                let raw = std::fs::metadata(path).map_err(io_err(path))?.len();
                decoded.push((*label, path.clone(), raw, rgb));
            }
            Err(_) => failed.push(path.clone()),
        }
    }
    if !failed.is_empty() {
        return Err(DataError::Undecodable(failed));
    }
    let (sw, sh) = dims.expect("non-empty");
    let (sw, sh) = (sw as usize, sh as usize);
    let mut images = Vec::new();
    let mut samples = Vec::new();
    let (mut ph, mut pw) = (sh, sw);
    for (id, (label, path, raw, rgb)) in decoded.into_iter().enumerate() {
        // HWC -> CHW
        let mut chw = vec![0u8; 3 * sh * sw];
        for (i, px) in rgb.pixels().enumerate() {
            for ch in 0..3 {
                chw[ch * sh * sw + i] = px.0[ch];
            }
        }
        let (padded, h2, w2) = reflect_pad(&chw, 3, sh, sw, stride);
        ph = h2;
        pw = w2;
        images.extend(padded.into_iter().map(normalize_pixel));
        let rel = path.strip_prefix(source).unwrap_or(&path);
        samples.push(SampleRecord {
            id: id as u32,
            path: rel.to_string_lossy().into_owned(),
            label,
            raw_bytes: raw,
        });
    }
    // stratified split, deterministic given the seed
    let mut rng = seeded_rng(seed);
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    for label in 0..classes.len() {
        let mut ids: Vec<u32> = samples.iter().filter(|s| s.label == label).map(|s| s.id).collect();
        ids.shuffle(&mut rng);
        let n_val = (ids.len() as f64 * val_fraction).round() as usize;
        val_ids.extend_from_slice(&ids[..n_val]);
        train_ids.extend_from_slice(&ids[n_val..]);
    }
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    let dataset = Dataset::new(
        (3, ph, pw),
        classes.len(),
        samples.iter().map(|s| s.id).collect(),
        samples.iter().map(|s| s.label).collect(),
        images,
    )?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let tensor_file = "tensors.bin".to_string();
    dataset.write_to(&out_dir.join(&tensor_file))?;
    let manifest = DatasetManifest {
        sample_count: samples.len(),
        channels: 3,
        image_height: ph,
        image_width: pw,
        source_height: sh,
        source_width: sw,
        class_count: classes.len(),
        class_names: classes
            .iter()
            .map(|c| c.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect(),
        samples,
        seed,
        val_fraction,
        train_hash: split_hash(&train_ids),
        val_hash: split_hash(&val_ids),
        train_ids,
        val_ids,
        tensor_file,
        normalization: "v / 127.5 - 1".into(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub const SYNTHETIC_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "plus", "ring", "hstripes", "vstripes", "cross", "frame", "dots",
];

/// Renders one 32×32 RGB sample (CHW, u8) of the synthetic shape task: a
/// shape on a noisy, shaded background. Every class is symmetric under
/// horizontal flips.
pub fn render_synthetic(class: usize, rng: &mut impl Rng) -> Vec<u8> {
    const S: usize = 32;
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(50.0..205.0));
    let fg: [f32; 3] = std::array::from_fn(|c| {
        let delta = rng.random_range(70.0..120.0);
        if base[c] > 127.0 { base[c] - delta } else { base[c] + delta }
    });
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let grad_amp = rng.random_range(10.0..30.0);
    let noise_amp = rng.random_range(15.0..35.0);
    let cx = rng.random_range(11.0..21.0f32);
    let cy = rng.random_range(11.0..21.0f32);
    let r = rng.random_range(6.0..9.5f32);
    let mut out = vec![0u8; 3 * S * S];
    for y in 0..S {
        for x in 0..S {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let inside = shape_mask(class, dx, dy, r);
            let shade = grad_amp * ((x as f32 - 16.0) * gx + (y as f32 - 16.0) * gy) / 16.0;
            for c in 0..3 {
                let noise = rng.random_range(-noise_amp..noise_amp);
                let v = if inside { fg[c] + 0.4 * noise } else { base[c] + shade + noise };
                out[(c * S + y) * S + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn shape_mask(class: usize, dx: f32, dy: f32, r: f32) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    let (ax, ay) = (dx.abs(), dy.abs());
    match class {
        0 => d < r,
        1 => ax < 0.85 * r && ay < 0.85 * r,
        2 => {
            let t = (dy + r) / (1.8 * r);
            (0.0..=1.0).contains(&t) && ax < t * r
        }
        3 => (ax < 0.3 * r && ay < r) || (ay < 0.3 * r && ax < r),
        4 => d < r && d > 0.55 * r,
        5 => ax < r && ay < r && (((dy + r) / (0.5 * r)).floor() as i32) % 2 == 0,
        6 => ax < r && ay < r && (((ax) / (0.5 * r)).floor() as i32) % 2 == 0,
        7 => d < 1.1 * r && ((dx - dy).abs() < 0.35 * r || (dx + dy).abs() < 0.35 * r),
        8 => ax.max(ay) < r && ax.max(ay) > 0.6 * r,
        _ => {
            let e = ax - 0.6 * r;
            (e * e + dy * dy).sqrt() < 0.42 * r
        }
    }
}

/// Writes `per_class` PNGs per synthetic class under `out_dir/<nn>_<name>/`.
pub fn generate_synthetic(out_dir: &Path, per_class: usize, seed: u64) -> Result<usize, DataError> {
    let mut rng = seeded_rng(seed);
    let mut written = 0;
    for (class, name) in SYNTHETIC_CLASSES.iter().enumerate() {
        let dir = out_dir.join(format!("{class:02}_{name}"));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for i in 0..per_class {
            let chw = render_synthetic(class, &mut rng);
            let mut hwc = vec![0u8; chw.len()];
            for p in 0..32 * 32 {
                for c in 0..3 {
                    hwc[p * 3 + c] = chw[c * 32 * 32 + p];
                }
            }
            let path = dir.join(format!("{i:05}.png"));
            image::save_buffer(&path, &hwc, 32, 32, image::ExtendedColorType::Rgb8).map_err(|e| {
                DataError::Io {
                    path: path.clone(),
                    source: std::io::Error::other(e.to_string()),
                }
            })?;
            written += 1;
        }
    }
    Ok(written)
}

/// Loads one image for inference as a `1×3×H×W` tensor, padded to
/// `stride`. PNG (or any format the decoder knows) is read as RGB; a
/// `.bin` file holds raw `u8` planes in CHW order and must be
/// `3·height·width` bytes long.
pub fn load_image_file(path: &Path, height: usize, width: usize, stride: usize) -> Result<Tensor, DataError> {
    let (chw, h, w) = if path.extension().is_some_and(|e| e == "bin") {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        if bytes.len() != 3 * height * width {
            return Err(DataError::Format(format!(
                "{}: {} bytes, expected 3×{height}×{width}",
                path.display(),
                bytes.len()
            )));
        }
        (bytes, height, width)
    } else {
        let img = image::open(path)
            .map_err(|_| DataError::Undecodable(vec![path.to_path_buf()]))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut chw = vec![0u8; 3 * h * w];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                chw[c * h * w + i] = px.0[c];
            }
        }
        (chw, h, w)
    };
    let (padded, ph, pw) = reflect_pad(&chw, 3, h, w, stride);
    Ok(Tensor::new([1, 3, ph, pw], padded.into_iter().map(normalize_pixel).collect()).expect("image shape"))
}

/// Horizontally mirrors every image in an NCHW batch in place.
pub fn flip_horizontal(batch: &mut Tensor, which: &[bool]) {
    let s = batch.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let data = batch.data_mut();
    for (n, &flip) in which.iter().enumerate() {
        if !flip {
            continue;
        }
        for row in data[n * c * h * w..(n + 1) * c * h * w].chunks_mut(w) {
            row.reverse();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_without_repeating_edges() {
        let px: Vec<u8> = (1..=6).collect(); // 1×2×3
        let (out, h, w) = reflect_pad(&px, 1, 2, 3, 4);
        assert_eq!((h, w), (4, 4));
        // rows: -1->1, 0, 1, 2->0 ; cols: 0,1,2,3->1
        assert_eq!(&out[4..8], &[1, 2, 3, 2]);
        assert_eq!(&out[0..4], &[4, 5, 6, 5]);
        let (same, h, w) = reflect_pad(&px, 1, 2, 3, 1);
        assert_eq!((same, h, w), (px.clone(), 2, 3));
    }

    #[test]
    fn masks_are_flip_symmetric_and_nonempty() {
        for class in 0..10 {
            let mut count = 0;
            for y in -12..=12 {
                for x in -12..=12 {
                    let (dx, dy) = (x as f32 + 0.25, y as f32);
                    assert_eq!(shape_mask(class, dx, dy, 8.0), shape_mask(class, -dx, dy, 8.0));
                    count += shape_mask(class, dx, dy, 8.0) as usize;
                }
            }
            assert!(count > 20, "class {class} covers {count} pixels");
        }
    }

    #[test]
    fn label_reads_are_counted() {
        let d = Dataset::new((1, 1, 1), 2, vec![0, 1], vec![0, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(d.label_reads(), 0);
        let _ = d.batch(&[0, 1]);
        assert_eq!(d.label_reads(), 0);
        assert_eq!(d.labels_for(&[1]), vec![1]);
        assert_eq!(d.label_reads(), 1);
    }
}
