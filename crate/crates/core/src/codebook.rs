//! Visual vocabulary construction and bag-of-words histograms.
//!
//! Feature maps from a frozen backbone tap are sampled densely (one vector
//! per spatial location), clustered with mini-batch K-means into `K` visual
//! words, and every image is then described by the normalized histogram of
//! its locations' nearest words.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use memmap2::Mmap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_json, sha256_file, write_atomic_with, write_json};
use crate::backbone::Backbone;
use crate::dataset::{images_to_tensor, NormalizationStats};
use crate::image::{rotate_image, Image, RotationLabel};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureProvenance {
    pub checkpoint_hash: String,
    pub tap: String,
    pub include_rotations: bool,
}

/// Row-major `N x C` matrix of dense feature vectors.
pub trait VectorSource: Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn row(&self, i: usize) -> &[f32];
    fn provenance(&self) -> &FeatureProvenance;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVectorSet {
    data: Vec<f32>,
    dim: usize,
    pub provenance: FeatureProvenance,
}

impl FeatureVectorSet {
    pub fn new(dim: usize, provenance: FeatureProvenance) -> Self {
        Self {
            data: Vec::new(),
            dim,
            provenance,
        }
    }

    pub fn from_rows(data: Vec<f32>, dim: usize, provenance: FeatureProvenance) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch {
                what: "feature matrix length",
                expected: dim,
                got: data.len(),
            });
        }
        Ok(Self { data, dim, provenance })
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Copies the listed rows of any source into memory.
    pub fn gather<V: VectorSource + ?Sized>(source: &V, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * source.dim());
        for &i in rows {
            data.extend_from_slice(source.row(i));
        }
        Self {
            data,
            dim: source.dim(),
            provenance: source.provenance().clone(),
        }
    }
}

impl VectorSource for FeatureVectorSet {
    fn len(&self) -> usize {
        self.data.len() / self.dim
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
    fn provenance(&self) -> &FeatureProvenance {
        &self.provenance
    }
}

/// Receives rows produced by [`sample_dense_features`].
pub trait FeatureSink {
    fn push_rows(&mut self, rows: &[f32]) -> Result<()>;
}

impl FeatureSink for FeatureVectorSet {
    fn push_rows(&mut self, rows: &[f32]) -> Result<()> {
        self.data.extend_from_slice(rows);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureStoreManifest {
    pub rows: usize,
    pub dim: usize,
    pub provenance: FeatureProvenance,
    pub data_file: String,
}

/// Streams feature rows to a flat little-endian f32 file; finishing writes the
/// JSON manifest next to it.
pub struct FeatureStoreWriter {
    path: PathBuf,
    tmp: PathBuf,
    out: std::io::BufWriter<fs::File>,
    rows: usize,
    dim: usize,
    provenance: FeatureProvenance,
}

impl FeatureStoreWriter {
    pub fn create(path: &Path, dim: usize, provenance: FeatureProvenance) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("f32.partial");
        Ok(Self {
            path: path.to_path_buf(),
            out: std::io::BufWriter::new(fs::File::create(&tmp)?),
            tmp,
            rows: 0,
            dim,
            provenance,
        })
    }

    pub fn finish(mut self) -> Result<FeatureStoreManifest> {
        self.out.flush()?;
        drop(self.out);
        fs::rename(&self.tmp, &self.path)?;
        let manifest = FeatureStoreManifest {
            rows: self.rows,
            dim: self.dim,
            provenance: self.provenance,
            data_file: self.path.file_name().unwrap().to_string_lossy().into_owned(),
        };
        write_json(&manifest_path(&self.path), &manifest)?;
        Ok(manifest)
    }
}

impl FeatureSink for FeatureStoreWriter {
    fn push_rows(&mut self, rows: &[f32]) -> Result<()> {
        if !rows.len().is_multiple_of(self.dim) {
            return Err(Error::DimMismatch {
                what: "feature rows",
                expected: self.dim,
                got: rows.len() % self.dim,
            });
        }
        for v in rows {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.rows += rows.len() / self.dim;
        Ok(())
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

/// Memory-mapped feature file written by [`FeatureStoreWriter`].
pub struct MappedFeatures {
    map: Mmap,
    manifest: FeatureStoreManifest,
}

impl MappedFeatures {
    pub fn open(path: &Path) -> Result<Self> {
        let manifest: FeatureStoreManifest = read_json(&manifest_path(path))?;
        let file = fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        // SAFETY: the file is only ever replaced by rename, never modified in place.
        let map = unsafe { Mmap::map(&file)? };
        let expected = manifest.rows * manifest.dim * 4;
        if map.len() != expected {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("{} bytes, manifest implies {expected}", map.len()),
            });
        }
        if !cfg!(target_endian = "little") {
            return Err(Error::Config("feature files are little-endian".into()));
        }
        Ok(Self { map, manifest })
    }

    fn floats(&self) -> &[f32] {
        // SAFETY: mmap bases are page aligned and the length was checked
        // against rows * dim * 4 bytes.
        unsafe { std::slice::from_raw_parts(self.map.as_ptr() as *const f32, self.map.len() / 4) }
    }
}

impl VectorSource for MappedFeatures {
    fn len(&self) -> usize {
        self.manifest.rows
    }
    fn dim(&self) -> usize {
        self.manifest.dim
    }
    fn row(&self, i: usize) -> &[f32] {
        let d = self.manifest.dim;
        &self.floats()[i * d..(i + 1) * d]
    }
    fn provenance(&self) -> &FeatureProvenance {
        &self.manifest.provenance
    }
}

/// Runs `images` (and, optionally, their 90/180/270 degree rotations) through
/// the backbone in inference mode and emits one `C`-vector per spatial
/// location of `tap`. Rows are ordered image-major, then rotation, then
/// row-major over the map.
#[allow(clippy::too_many_arguments)]
pub fn sample_dense_features<S: FeatureSink>(
    backbone: &Backbone,
    images: &[Image],
    tap: &str,
    include_rotations: bool,
    stats: &NormalizationStats,
    batch_images: usize,
    sink: &mut S,
) -> Result<usize> {
    let (c, h, w) = backbone.tap_shape(tap)?;
    let rotations: &[RotationLabel] = if include_rotations {
        &RotationLabel::ALL
    } else {
        &RotationLabel::ALL[..1]
    };
    let mut rows = 0;
    let mut buf = Vec::new();
    for chunk in images.chunks(batch_images.max(1)) {
        let mut expanded = Vec::with_capacity(chunk.len() * rotations.len());
        for img in chunk {
            for &r in rotations {
                expanded.push(rotate_image(img, r)?);
            }
        }
        let x = images_to_tensor(&expanded, stats, backbone.device())?;
        let fmap = backbone.forward_to_tap(&x, tap, false)?;
        if fmap.dims() != [expanded.len(), c, h, w] {
            return Err(Error::Shape(format!("tap `{tap}` produced {:?}", fmap.dims())));
        }
        // (B, C, H, W) -> (B, H, W, C) so each location's vector is contiguous
        let flat = fmap
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features at tap `{tap}`")));
        }
        buf.clear();
        buf.extend_from_slice(&flat);
        sink.push_rows(&buf)?;
        rows += expanded.len() * h * w;
    }
    Ok(rows)
}

#[inline]
pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    acc.iter().sum::<f32>() + tail
}

#[inline]
fn squared_distance_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index and squared distance of the nearest row of `centroids`; ties go to
/// the lowest index.
#[inline]
fn nearest(centroids: &[f32], dim: usize, x: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (k, v) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(x, v);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    /// Vectors per mini-batch.
    pub batch_size: usize,
    /// Passes over the (possibly subsampled) vector pool.
    pub epochs: usize,
    pub seed: u64,
    /// Uniform subsample size when the pool is larger; `None` uses every row.
    pub max_vectors: Option<usize>,
    /// Seeding sample size; defaults to `max(3K, batch_size)`.
    pub init_size: Option<usize>,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 2048,
            batch_size: 10_000,
            epochs: 50,
            seed: 0,
            max_vectors: Some(2_560_000),
            init_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookManifest {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "C")]
    pub dim: usize,
    pub tap: String,
    pub seed: u64,
    pub source_checkpoint_hash: String,
    pub inertia: f64,
}

/// The visual vocabulary: `K` centroids of dimension `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>,
    k: usize,
    dim: usize,
    pub tap: String,
    pub seed: u64,
    pub source_checkpoint_hash: String,
    /// K-means objective on the fitting pool at the end of the fit.
    pub inertia: f64,
}

impl Codebook {
    pub fn from_centroids(centroids: Vec<f32>, dim: usize, tap: impl Into<String>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch {
                what: "centroid matrix length",
                expected: dim,
                got: centroids.len(),
            });
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroids".into()));
        }
        Ok(Self {
            k: centroids.len() / dim,
            centroids,
            dim,
            tap: tap.into(),
            seed: 0,
            source_checkpoint_hash: String::new(),
            inertia: f64::NAN,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f32] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn manifest(&self) -> CodebookManifest {
        CodebookManifest {
            k: self.k,
            dim: self.dim,
            tap: self.tap.clone(),
            seed: self.seed,
            source_checkpoint_hash: self.source_checkpoint_hash.clone(),
            inertia: self.inertia,
        }
    }

    /// Writes `<path>` (raw `K x C` little-endian f32) and `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<String> {
        write_atomic_with(path, |w| {
            for v in &self.centroids {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })?;
        write_json(&manifest_path(path), &self.manifest())?;
        sha256_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: CodebookManifest = read_json(&manifest_path(path))?;
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        if bytes.len() != m.k * m.dim * 4 {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("{} bytes for a {}x{} codebook", bytes.len(), m.k, m.dim),
            });
        }
        let centroids = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut cb = Self::from_centroids(centroids, m.dim, m.tap)?;
        cb.seed = m.seed;
        cb.source_checkpoint_hash = m.source_checkpoint_hash;
        cb.inertia = m.inertia;
        Ok(cb)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::DimMismatch {
                what: "vector vs codebook dimension",
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }
}

/// Index of the nearest visual word (squared Euclidean distance, lowest index
/// on ties).
pub fn assign_nearest(codebook: &Codebook, vector: &[f32]) -> Result<usize> {
    codebook.check_dim(vector.len())?;
    Ok(nearest(&codebook.centroids, codebook.dim, vector).0)
}

/// Sum over all vectors of the squared distance to the nearest centroid.
pub fn kmeans_objective<V: VectorSource + ?Sized>(codebook: &Codebook, vectors: &V) -> Result<f64> {
    codebook.check_dim(vectors.dim())?;
    let per_row: Vec<f64> = (0..vectors.len())
        .into_par_iter()
        .map(|i| {
            let x = vectors.row(i);
            codebook
                .centroids
                .chunks_exact(codebook.dim)
                .map(|v| squared_distance_f64(x, v))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(per_row.iter().sum())
}

fn kmeans_plus_plus<V: VectorSource + ?Sized>(
    source: &V,
    sample: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let dim = source.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; sample.len()];
    let first = rng.random_range(0..sample.len());
    chosen[first] = true;
    centroids.extend_from_slice(source.row(sample[first]));
    let mut d2: Vec<f64> = sample
        .par_iter()
        .map(|&i| squared_distance_f64(source.row(i), &centroids[..dim]))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = d2.len() - 1;
            for (j, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = j;
                    break;
                }
                target -= w;
            }
            if d2[pick] == 0.0 {
                // landed on a zero-weight tail through rounding
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            let free: Vec<usize> = (0..sample.len()).filter(|&j| !chosen[j]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let start = centroids.len();
        centroids.extend_from_slice(source.row(sample[pick]));
        let newest = &centroids[start..];
        d2.par_iter_mut().zip(sample.par_iter()).for_each(|(d, &i)| {
            let nd = squared_distance_f64(source.row(i), newest);
            if nd < *d {
                *d = nd;
            }
        });
    }
    centroids
}

/// Replaces each listed centroid with a distinct candidate point, farthest
/// first. `candidates` holds `(row, distance to its nearest centroid)`.
fn reseed_from_farthest<V: VectorSource + ?Sized>(
    source: &V,
    centroids: &mut [f32],
    empty: &[usize],
    candidates: &mut [(usize, f32)],
) -> usize {
    let dim = source.dim();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut used = 0;
    for (&k, &(row, _)) in empty.iter().zip(candidates.iter()) {
        centroids[k * dim..(k + 1) * dim].copy_from_slice(source.row(row));
        used += 1;
    }
    used
}

/// Mini-batch K-means.
///
/// Seeds with k-means++ on a seeded sample, then for every mini-batch assigns
/// each vector to its nearest centroid and moves each centroid to the running
/// mean of all vectors it has received. Centroids that receive nothing during
/// an epoch are reseeded from the farthest points of the epoch's last batch. A
/// final full pass computes the inertia and reseeds any still-empty cluster.
pub fn minibatch_kmeans_fit<V: VectorSource + ?Sized>(vectors: &V, cfg: &KMeansConfig) -> Result<Codebook> {
    let (n, dim, k) = (vectors.len(), vectors.dim(), cfg.k);
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Config(format!("need at least K = {k} vectors, got {n}")));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    if (0..n)
        .into_par_iter()
        .any(|i| vectors.row(i).iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("input feature vectors".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool: Vec<usize> = match cfg.max_vectors {
        Some(m) if n > m && m >= k => {
            let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };

    let init_size = cfg
        .init_size
        .unwrap_or((3 * k).max(cfg.batch_size))
        .clamp(k, pool.len());
    let init_sample: Vec<usize> = if init_size == pool.len() {
        pool.clone()
    } else {
        rand::seq::index::sample(&mut rng, pool.len(), init_size)
            .into_iter()
            .map(|j| pool[j])
            .collect()
    };
    let mut centroids = kmeans_plus_plus(vectors, &init_sample, k, &mut rng);
    let mut counts = vec![0u64; k];

    for _ in 0..cfg.epochs {
        pool.shuffle(&mut rng);
        let mut epoch_hits = vec![0u64; k];
        let mut last_batch: Vec<(usize, f32)> = Vec::new();
        for batch in pool.chunks(cfg.batch_size) {
            let assigned: Vec<(usize, f32)> = batch
                .par_iter()
                .map(|&i| nearest(&centroids, dim, vectors.row(i)))
                .collect();
            let mut sums = vec![0f64; k * dim];
            let mut batch_counts = vec![0u64; k];
            for (&i, &(c, _)) in batch.iter().zip(&assigned) {
                batch_counts[c] += 1;
                for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(vectors.row(i)) {
                    *s += x as f64;
                }
            }
            for c in 0..k {
                let bc = batch_counts[c];
                if bc == 0 {
                    continue;
                }
                let total = counts[c] + bc;
                let old = counts[c] as f64;
                for (v, &s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *v = ((*v as f64 * old + s) / total as f64) as f32;
                }
                counts[c] = total;
                epoch_hits[c] += bc;
            }
            last_batch = batch.iter().zip(assigned).map(|(&i, (_, d))| (i, d)).collect();
        }
        let empty: Vec<usize> = (0..k).filter(|&c| epoch_hits[c] == 0).collect();
        if !empty.is_empty() {
            let used = reseed_from_farthest(vectors, &mut centroids, &empty, &mut last_batch);
            for &c in &empty[..used] {
                counts[c] = 1;
            }
        }
    }

    // final pass: inertia, and no empty clusters at termination
    let mut inertia = 0f64;
    for _round in 0..3 {
        let assigned: Vec<(usize, f32)> = pool
            .par_iter()
            .map(|&i| nearest(&centroids, dim, vectors.row(i)))
            .collect();
        let mut hits = vec![0u64; k];
        for &(c, _) in &assigned {
            hits[c] += 1;
        }
        inertia = pool
            .iter()
            .zip(&assigned)
            .map(|(&i, &(c, _))| squared_distance_f64(vectors.row(i), &centroids[c * dim..(c + 1) * dim]))
            .sum();
        let empty: Vec<usize> = (0..k).filter(|&c| hits[c] == 0).collect();
        if empty.is_empty() {
            break;
        }
        let mut candidates: Vec<(usize, f32)> = pool.iter().zip(&assigned).map(|(&i, &(_, d))| (i, d)).collect();
        reseed_from_farthest(vectors, &mut centroids, &empty, &mut candidates);
    }

    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("centroids after fit".into()));
    }
    let mut cb = Codebook::from_centroids(centroids, dim, vectors.provenance().tap.clone())?;
    cb.seed = cfg.seed;
    cb.source_checkpoint_hash = vectors.provenance().checkpoint_hash.clone();
    cb.inertia = inertia;
    Ok(cb)
}

/// Normalized visual-word histogram; entries are non-negative and sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BowHistogram(Vec<f32>);

impl BowHistogram {
    pub fn from_counts(counts: &[u32]) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total == 0 {
            return Err(Error::Empty("histogram counts"));
        }
        Ok(Self(counts.iter().map(|&c| (c as f64 / total as f64) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

/// Word counts for a `C x H x W` feature map (channel-planar layout).
pub fn word_counts(
    codebook: &Codebook,
    tap: &str,
    feature_map: &[f32],
    shape: (usize, usize, usize),
) -> Result<Vec<u32>> {
    let (c, h, w) = shape;
    if tap != codebook.tap {
        return Err(Error::Config(format!(
            "feature map from tap `{tap}` but codebook was built on `{}`",
            codebook.tap
        )));
    }
    codebook.check_dim(c)?;
    if feature_map.len() != c * h * w {
        return Err(Error::DimMismatch {
            what: "feature map length",
            expected: c * h * w,
            got: feature_map.len(),
        });
    }
    let plane = h * w;
    let mut counts = vec![0u32; codebook.k];
    let mut v = vec![0f32; c];
    for loc in 0..plane {
        for (ch, slot) in v.iter_mut().enumerate() {
            *slot = feature_map[ch * plane + loc];
        }
        counts[nearest(&codebook.centroids, c, &v).0] += 1;
    }
    Ok(counts)
}

/// Hard-assigns every location of a `C x H x W` map to its nearest word and
/// divides the counts by `H * W`.
pub fn build_bow_histogram(
    codebook: &Codebook,
    tap: &str,
    feature_map: &[f32],
    shape: (usize, usize, usize),
) -> Result<BowHistogram> {
    BowHistogram::from_counts(&word_counts(codebook, tap, feature_map, shape)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowTargetsManifest {
    pub images: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub locations: u32,
    pub codebook_hash: String,
    pub checkpoint_hash: String,
    pub data_file: String,
}

const TARGETS_MAGIC: &[u8; 8] = b"DBOWTGT1";

/// Bag-of-words targets for a list of images, stored sparsely as
/// `(word, count)` pairs over `locations` feature-map positions.
#[derive(Clone, Debug, PartialEq)]
pub struct BowTargets {
    k: usize,
    locations: u32,
    entries: Vec<Vec<(u32, u32)>>,
    pub codebook_hash: String,
    pub checkpoint_hash: String,
}

impl BowTargets {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn histogram(&self, i: usize) -> BowHistogram {
        let mut v = vec![0f32; self.k];
        for &(word, count) in &self.entries[i] {
            v[word as usize] = (count as f64 / self.locations as f64) as f32;
        }
        BowHistogram(v)
    }

    /// Dense `(B, K)` targets for the listed image indices.
    pub fn dense_batch(&self, indices: &[usize], device: &Device) -> Result<Tensor> {
        let mut data = vec![0f32; indices.len() * self.k];
        for (b, &i) in indices.iter().enumerate() {
            let entries = self.entries.get(i).ok_or(Error::DimMismatch {
                what: "target index",
                expected: self.entries.len(),
                got: i,
            })?;
            for &(word, count) in entries {
                data[b * self.k + word as usize] = (count as f64 / self.locations as f64) as f32;
            }
        }
        Ok(Tensor::from_vec(data, (indices.len(), self.k), device)?)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        write_atomic_with(path, |w| {
            w.write_all(TARGETS_MAGIC)?;
            w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
            w.write_all(&(self.k as u32).to_le_bytes())?;
            w.write_all(&self.locations.to_le_bytes())?;
            for e in &self.entries {
                w.write_all(&(e.len() as u32).to_le_bytes())?;
                for &(word, count) in e {
                    w.write_all(&word.to_le_bytes())?;
                    w.write_all(&count.to_le_bytes())?;
                }
            }
            Ok(())
        })?;
        let manifest = BowTargetsManifest {
            images: self.entries.len(),
            k: self.k,
            locations: self.locations,
            codebook_hash: self.codebook_hash.clone(),
            checkpoint_hash: self.checkpoint_hash.clone(),
            data_file: path.file_name().unwrap().to_string_lossy().into_owned(),
        };
        write_json(&manifest_path(path), &manifest)?;
        sha256_file(path)
    }

    /// Loads a target table, refusing it if it was computed from a different
    /// codebook or checkpoint than the ones given.
    pub fn load(path: &Path, expected_codebook_hash: &str, expected_checkpoint_hash: Option<&str>) -> Result<Self> {
        let m: BowTargetsManifest = read_json(&manifest_path(path))?;
        if m.codebook_hash != expected_codebook_hash {
            return Err(Error::Stale(format!(
                "targets {} were built from codebook {} but codebook is {}",
                path.display(),
                m.codebook_hash,
                expected_codebook_hash
            )));
        }
        if let Some(ck) = expected_checkpoint_hash {
            if m.checkpoint_hash != ck {
                return Err(Error::Stale(format!(
                    "targets {} were built from checkpoint {} but expected {}",
                    path.display(),
                    m.checkpoint_hash,
                    ck
                )));
            }
        }
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = BufReader::new(fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("short header"))?;
        if &magic != TARGETS_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut u64b = [0u8; 8];
        let mut u32b = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<fs::File>| -> Result<u32> {
            r.read_exact(&mut u32b).map_err(|_| corrupt("truncated"))?;
            Ok(u32::from_le_bytes(u32b))
        };
        r.read_exact(&mut u64b).map_err(|_| corrupt("truncated"))?;
        let images = u64::from_le_bytes(u64b) as usize;
        let k = read_u32(&mut r)? as usize;
        let locations = read_u32(&mut r)?;
        if images != m.images || k != m.k || locations != m.locations {
            return Err(corrupt("header disagrees with manifest"));
        }
        let mut entries = Vec::with_capacity(images);
        for _ in 0..images {
            let nnz = read_u32(&mut r)? as usize;
            let mut e = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let word = read_u32(&mut r)?;
                let count = read_u32(&mut r)?;
                if word as usize >= k {
                    return Err(corrupt("word index out of range"));
                }
                e.push((word, count));
            }
            entries.push(e);
        }
        Ok(Self {
            k,
            locations,
            entries,
            codebook_hash: m.codebook_hash,
            checkpoint_hash: m.checkpoint_hash,
        })
    }
}

/// Computes the histogram of every image from the unrotated, unperturbed,
/// normalized input.
pub fn precompute_bow_targets(
    backbone: &Backbone,
    codebook: &Codebook,
    images: &[Image],
    stats: &NormalizationStats,
    batch_images: usize,
    checkpoint_hash: &str,
    codebook_hash: &str,
) -> Result<BowTargets> {
    let tap = codebook.tap.clone();
    let shape = backbone.tap_shape(&tap)?;
    codebook.check_dim(shape.0)?;
    let per_map = shape.0 * shape.1 * shape.2;
    let mut entries = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_images.max(1)) {
        let x = images_to_tensor(chunk, stats, backbone.device())?;
        let flat = backbone
            .forward_to_tap(&x, &tap, false)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let batch: Vec<Vec<(u32, u32)>> = flat
            .par_chunks(per_map)
            .map(|fmap| {
                let counts = word_counts(codebook, &tap, fmap, shape)?;
                Ok(counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(w, &c)| (w as u32, c))
                    .collect())
            })
            .collect::<Result<_>>()?;
        entries.extend(batch);
    }
    Ok(BowTargets {
        k: codebook.k,
        locations: (shape.1 * shape.2) as u32,
        entries,
        codebook_hash: codebook_hash.to_string(),
        checkpoint_hash: checkpoint_hash.to_string(),
    })
}
