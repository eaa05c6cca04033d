//! CIFAR-100 binary-format reader and per-channel normalization.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::image::{Image, CHANNELS};
use crate::{Error, Result};

pub const CLASS_COUNT: usize = 100;
pub const IMAGE_SIDE: usize = 32;
/// coarse label byte + fine label byte + 3072 planar pixel bytes
pub const RECORD_BYTES: usize = 2 + IMAGE_SIDE * IMAGE_SIDE * CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub image: Image,
    /// Fine label in `[0, 100)`.
    pub label: u8,
    pub split: Split,
}

/// Expected record counts. The standard archive is 50000 / 10000; smaller
/// layouts exist for synthetic fixtures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataLayout {
    pub train: usize,
    pub test: usize,
}

impl Default for DataLayout {
    fn default() -> Self {
        Self {
            train: 50_000,
            test: 10_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        CLASS_COUNT
    }

    pub fn split(&self, split: Split) -> &[ImageRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Keeps the first `train` / `test` records of each split.
    pub fn truncated(&self, train: usize, test: usize) -> Dataset {
        Dataset {
            train: self.train.iter().take(train).cloned().collect(),
            test: self.test.iter().take(test).cloned().collect(),
        }
    }
}

/// Locates `train.bin`/`test.bin` either directly in `root` or in the
/// `cifar-100-binary/` directory the archive extracts to.
pub fn resolve_binary_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-100-binary");
    if nested.join("train.bin").exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

pub fn load_cifar100(root: &Path) -> Result<Dataset> {
    load_cifar100_with(root, DataLayout::default())
}

pub fn load_cifar100_with(root: &Path, layout: DataLayout) -> Result<Dataset> {
    let dir = resolve_binary_dir(root);
    let train = read_split(&dir.join("train.bin"), Split::Train, layout.train)?;
    let test = read_split(&dir.join("test.bin"), Split::Test, layout.test)?;

    if layout.train.is_multiple_of(CLASS_COUNT) {
        let mut counts = [0usize; CLASS_COUNT];
        for r in &train {
            counts[r.label as usize] += 1;
        }
        let per_class = layout.train / CLASS_COUNT;
        if let Some((class, &n)) = counts.iter().enumerate().find(|(_, &n)| n != per_class) {
            return Err(Error::Corrupt {
                path: dir.join("train.bin"),
                reason: format!("class {class} has {n} records, expected {per_class}"),
            });
        }
    }
    Ok(Dataset { train, test })
}

fn read_split(path: &Path, split: Split, expected: usize) -> Result<Vec<ImageRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != expected * RECORD_BYTES {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!(
                "size {} bytes, expected {} ({} records of {} bytes)",
                bytes.len(),
                expected * RECORD_BYTES,
                expected,
                RECORD_BYTES
            ),
        });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[1];
            if label as usize >= CLASS_COUNT {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("record {i} has fine label {label}"),
                });
            }
            Ok(ImageRecord {
                image: Image::from_planar(IMAGE_SIDE, IMAGE_SIDE, &rec[2..])?,
                label,
                split,
            })
        })
        .collect()
}

/// Writes records in the CIFAR-100 binary layout. Coarse labels are written as
/// `fine / 5`, which is enough for a reader that only consumes fine labels.
pub fn write_cifar_binary(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        let img = &r.image;
        if img.height() != IMAGE_SIDE || img.width() != IMAGE_SIDE {
            return Err(Error::Shape(format!("{}x{} record", img.height(), img.width())));
        }
        out.push(r.label / 5);
        out.push(r.label);
        for c in 0..CHANNELS {
            out.extend(img.data().iter().skip(c).step_by(CHANNELS));
        }
    }
    crate::artifact::write_atomic(path, &out)
}

/// Per-channel statistics of pixel values scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormalizationStats {
    pub const STD_FLOOR: f32 = 1e-6;

    /// Published channel statistics of the CIFAR-100 training split.
    pub const CIFAR100_TRAIN: NormalizationStats = NormalizationStats {
        mean: [0.5071, 0.4865, 0.4409],
        std: [0.2673, 0.2564, 0.2762],
    };

    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Default for NormalizationStats {
    fn default() -> Self {
        Self::CIFAR100_TRAIN
    }
}

pub fn compute_normalization_stats(dataset: &Dataset) -> Result<NormalizationStats> {
    stats_of_images(dataset.train.iter().map(|r| &r.image))
}

pub fn stats_of_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<NormalizationStats> {
    let mut sum = [0f64; 3];
    let mut sum_sq = [0f64; 3];
    let mut count = 0u64;
    for img in images {
        for px in img.data().chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                let v = px[c] as f64 / 255.0;
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        count += (img.height() * img.width()) as u64;
    }
    if count == 0 {
        return Err(Error::Empty("train split"));
    }
    let n = count as f64;
    let mut stats = NormalizationStats::identity();
    for c in 0..CHANNELS {
        let mean = sum[c] / n;
        let var = (sum_sq[c] / n - mean * mean).max(0.0);
        stats.mean[c] = mean as f32;
        stats.std[c] = (var.sqrt() as f32).max(NormalizationStats::STD_FLOOR);
    }
    Ok(stats)
}

/// Packs images into a normalized `(B, 3, H, W)` f32 tensor.
pub fn images_to_tensor<'a, I>(images: I, stats: &NormalizationStats, device: &Device) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut batch = 0;
    for img in images {
        let (h, w) = (img.height(), img.width());
        match shape {
            None => shape = Some((h, w)),
            Some(s) if s != (h, w) => return Err(Error::Shape(format!("mixed image sizes {s:?} and {:?}", (h, w)))),
            _ => {}
        }
        let plane = h * w;
        let start = data.len();
        data.resize(start + plane * CHANNELS, 0f32);
        for (p, px) in img.data().chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[start + c * plane + p] = (px[c] as f32 / 255.0 - stats.mean[c]) / stats.std[c];
            }
        }
        batch += 1;
    }
    let (h, w) = shape.ok_or(Error::Empty("image batch"))?;
    Ok(Tensor::from_vec(data, (batch, CHANNELS, h, w), device)?)
}
