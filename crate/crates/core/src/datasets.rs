//! Deterministic desk-scale datasets.
//!
//! Synthetic generators produce 2-D points (optionally rasterized into small
//! single-channel images for convolutional targets). The IDX reader handles
//! the big-endian image/label container used by MNIST-style data.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Gaussian clusters around evenly spaced centers on the unit circle.
    Blobs,
    /// Interleaved Archimedean arms, one per class.
    Spirals,
}

/// Fractions of samples assigned to train / val / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl TryFrom<[f64; 3]> for SplitFractions {
    type Error = Error;

    fn try_from([train, val, test]: [f64; 3]) -> Result<Self> {
        let f = SplitFractions { train, val, test };
        f.validate()?;
        Ok(f)
    }
}

impl From<SplitFractions> for [f64; 3] {
    fn from(f: SplitFractions) -> Self {
        [f.train, f.val, f.test]
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("split fractions {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }
}

/// Features with shape `N × …`, labels in `[0, K)`, and a split tag per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub splits: Vec<Split>,
}

/// A contiguous copy of the samples in one split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataView {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl DataView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (or all of them when fewer are available).
    pub fn head(&self, n: usize) -> Result<DataView> {
        let n = n.min(self.len());
        let rows: Vec<usize> = (0..n).collect();
        Ok(DataView {
            features: self.features.select_rows(&rows)?,
            labels: self.labels[..n].to_vec(),
        })
    }

    pub fn select(&self, rows: &[usize]) -> Result<DataView> {
        Ok(DataView {
            features: self.features.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        })
    }

    /// Index chunks of at most `batch_size`, in a shuffled order derived
    /// from `seed`.
    pub fn shuffled_batches(&self, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Index chunks in natural order.
    pub fn ordered_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }
}

fn min_max_normalize(values: &mut [f32]) {
    let (lo, hi) = values.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
    }
}

/// Generates `n` labelled 2-D points, min-max normalized to `[0,1]`. Every
/// sample starts in the training split; see [`Dataset::with_splits`].
pub fn make_synthetic(kind: SyntheticKind, n: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(Error::Input(format!("{n} samples cannot cover {classes} classes")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Input(format!("noise must be finite and non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..classes);
        let (x, y) = match kind {
            SyntheticKind::Blobs => {
                let angle = std::f64::consts::TAU * label as f64 / classes as f64;
                (angle.cos(), angle.sin())
            }
            SyntheticKind::Spirals => {
                let t: f64 = rng.random_range(0.0..1.0);
                let radius = 0.15 + 0.85 * t;
                let angle = std::f64::consts::TAU * (t + label as f64 / classes as f64);
                (radius * angle.cos(), radius * angle.sin())
            }
        };
        let dx: f64 = gauss.sample(&mut rng);
        let dy: f64 = gauss.sample(&mut rng);
        points.push((x + noise * dx) as f32);
        points.push((y + noise * dy) as f32);
        labels.push(label);
    }
    min_max_normalize(&mut points);
    Ok(Dataset {
        features: Tensor::new(vec![n, 2], points)?,
        labels,
        class_count: classes,
        splits: vec![Split::Train; n],
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Reassigns split tags: a seeded permutation is cut by the fractions.
    pub fn with_splits(mut self, fractions: SplitFractions, seed: u64) -> Result<Self> {
        fractions.validate()?;
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (fractions.train * n as f64).round() as usize;
        let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);
        for (rank, &i) in order.iter().enumerate() {
            self.splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(self)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn view(&self, split: Split) -> Result<DataView> {
        let rows = self.indices(split);
        if rows.is_empty() {
            return Err(Error::Input(format!("split {split:?} is empty")));
        }
        Ok(DataView {
            features: self.features.select_rows(&rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        })
    }

    /// Renders 2-D points in `[0,1]²` as `1 × side × side` images: a
    /// Gaussian bump of width `sigma` pixels centred on the point.
    pub fn rasterize(&self, side: usize, sigma: f64) -> Result<Dataset> {
        let shape = self.features.shape();
        if shape.len() != 2 || shape[1] != 2 {
            return Err(Error::Input(format!("rasterize needs N×2 points, got {shape:?}")));
        }
        if side < 2 || !(sigma > 0.0) {
            return Err(Error::Input(format!("invalid raster side {side} / sigma {sigma}")));
        }
        let n = shape[0];
        let mut pixels = Vec::with_capacity(n * side * side);
        let span = (side - 1) as f64;
        for i in 0..n {
            let p = self.features.row(i);
            let (cx, cy) = (p[0] as f64 * span, p[1] as f64 * span);
            for y in 0..side {
                for x in 0..side {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    pixels.push((-d2 / (2.0 * sigma * sigma)).exp() as f32);
                }
            }
        }
        Ok(Dataset {
            features: Tensor::new(vec![n, 1, side, side], pixels)?,
            labels: self.labels.clone(),
            class_count: self.class_count,
            splits: self.splits.clone(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl Reader<'_> {
    fn u32_be(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::format(self.pos as u64, format!("{} file truncated in header", self.what))
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }
}

fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut r = Reader { bytes, pos: 0, what: "image" };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(4, format!("degenerate image dimensions {count}×{rows}×{cols}")));
    }
    let need = count * rows * cols;
    let body = &bytes[r.pos..];
    if body.len() < need {
        return Err(Error::format(
            (r.pos + body.len()) as u64,
            format!("image payload truncated: need {need} bytes, have {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::format((r.pos + need) as u64, "trailing bytes after image payload"));
    }
    Ok((count, rows, cols, body))
}

fn read_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut r = Reader { bytes, pos: 0, what: "label" };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = r.u32_be()? as usize;
    let body = &bytes[r.pos..];
    if body.len() < count {
        return Err(Error::format(
            (r.pos + body.len()) as u64,
            format!("label payload truncated: need {count} bytes, have {}", body.len()),
        ));
    }
    if body.len() > count {
        return Err(Error::format((r.pos + count) as u64, "trailing bytes after label payload"));
    }
    Ok(body)
}

/// Parses an IDX image/label pair held in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (count, rows, cols, pixels) = read_idx_images(images)?;
    let label_bytes = read_idx_labels(labels)?;
    if label_bytes.len() != count {
        return Err(Error::format(4, format!(
            "image file holds {count} samples but label file holds {}",
            label_bytes.len()
        )));
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Dataset {
        features: Tensor::new(vec![count, 1, rows, cols], data)?,
        labels,
        class_count: class_count.max(2),
        splits: vec![Split::Train; count],
    })
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Encodes `count × rows × cols` pixel bytes and labels as an IDX pair.
pub fn encode_idx(pixels: &[u8], labels: &[u8], rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    let count = labels.len();
    if pixels.len() != count * rows * cols {
        return Err(Error::Input(format!(
            "{} pixel bytes do not match {count}×{rows}×{cols}",
            pixels.len()
        )));
    }
    let mut images = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(pixels);
    let mut label_file = Vec::with_capacity(8 + count);
    for v in [IDX_LABELS_MAGIC, count as u32] {
        label_file.extend_from_slice(&v.to_be_bytes());
    }
    label_file.extend_from_slice(labels);
    Ok((images, label_file))
}

pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    pixels: &[u8],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let (images, label_file) = encode_idx(pixels, labels, rows, cols)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, label_file)?;
    Ok(())
}
