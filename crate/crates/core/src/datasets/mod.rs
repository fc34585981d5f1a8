//! Corpora, one-class splits and mini-batch composition.
//!
//! A [`Corpus`] is an immutable, id-sorted collection of normalized images
//! with class labels and a train/test partition. A [`OneClassSplit`] projects
//! a corpus onto the one-class protocol: one class is "normal", everything
//! else is anomalous, and a fraction `gamma` of the training set is drawn
//! from the anomalous classes. [`BatchComposer`] then builds training batches
//! that always carry enough anomalies for stable gradient estimates.

pub mod fetch;
pub mod readers;
pub mod synthetic;

use crate::scalar::Scalar;
use crate::seeding::derive_rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Errors from corpus construction, splitting and batching.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("image format error: {0}")]
    Format(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Normalized image in `(channels, height, width)` layout with every value
/// in `[-1, 1]` and a square spatial extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor<T>(Tensor<T>);

impl<T: Scalar> ImageTensor<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self, DataError> {
        if tensor.rank() != 3 {
            return Err(DataError::Format(format!(
                "image tensor must be (c, h, w), got rank {}",
                tensor.rank()
            )));
        }
        let (h, w) = (tensor.shape()[1], tensor.shape()[2]);
        if h != w {
            return Err(DataError::Format(format!(
                "image must be square, got {h}x{w}"
            )));
        }
        if h == 0 || tensor.shape()[0] == 0 {
            return Err(DataError::Format("zero-dimension image".into()));
        }
        let one = T::one();
        if !tensor.data().iter().all(|&v| v >= -one && v <= one) {
            return Err(DataError::Format(
                "normalized image values must lie in [-1, 1]".into(),
            ));
        }
        Ok(ImageTensor(tensor))
    }

    /// Wraps without validation; for internal plumbing and fault-injection
    /// tests only.
    #[doc(hidden)]
    pub fn new_unchecked(tensor: Tensor<T>) -> Self {
        ImageTensor(tensor)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.0.shape()[1]
    }
}

/// One labeled training example as handed to the trainer.
#[derive(Debug, Clone)]
pub struct LabeledExample<T> {
    pub id: String,
    pub image: ImageTensor<T>,
    /// 0 = normal, 1 = abnormal.
    pub y: u8,
    /// Original class index in the source corpus.
    pub source_class: u32,
}

/// Whether an example belongs to the corpus's native train or test partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct CorpusExample<T> {
    pub id: String,
    pub image: ImageTensor<T>,
    pub class: u32,
    pub partition: Partition,
}

/// Immutable labeled image collection with stable, sorted example ids.
#[derive(Debug)]
pub struct Corpus<T> {
    name: String,
    examples: Vec<CorpusExample<T>>,
    index: HashMap<String, usize>,
    channels: usize,
    image_size: usize,
    warnings: Vec<String>,
}

impl<T: Scalar> Corpus<T> {
    /// Validates shape uniformity and id uniqueness, sorts by id and builds
    /// the lookup index.
    pub fn from_examples(
        name: &str,
        mut examples: Vec<CorpusExample<T>>,
        warnings: Vec<String>,
    ) -> Result<Self, DataError> {
        if examples.is_empty() {
            return Err(DataError::Corpus("corpus has no examples".into()));
        }
        examples.sort_by(|a, b| a.id.cmp(&b.id));
        let channels = examples[0].image.channels();
        let image_size = examples[0].image.size();
        let mut index = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if ex.image.channels() != channels || ex.image.size() != image_size {
                return Err(DataError::Corpus(format!(
                    "example {} has shape ({}, {sz}, {sz}) but corpus is ({channels}, {image_size}, {image_size})",
                    ex.id,
                    ex.image.channels(),
                    sz = ex.image.size(),
                )));
            }
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(DataError::Corpus(format!("duplicate example id {}", ex.id)));
            }
        }
        Ok(Corpus {
            name: name.to_string(),
            examples,
            index,
            channels,
            image_size,
            warnings,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Warnings accumulated during ingestion (skipped files etc.).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn examples(&self) -> &[CorpusExample<T>] {
        &self.examples
    }

    pub fn get(&self, id: &str) -> Option<&CorpusExample<T>> {
        self.index.get(id).map(|&i| &self.examples[i])
    }

    pub fn iter_partition(&self, p: Partition) -> impl Iterator<Item = &CorpusExample<T>> {
        self.examples.iter().filter(move |e| e.partition == p)
    }

    /// Per-class counts in the given partition, sorted by class index.
    pub fn class_counts(&self, p: Partition) -> Vec<(u32, usize)> {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for e in self.iter_partition(p) {
            *counts.entry(e.class).or_default() += 1;
        }
        let mut out: Vec<(u32, usize)> = counts.into_iter().collect();
        out.sort_unstable();
        out
    }

    pub fn classes(&self) -> Vec<u32> {
        let mut classes: Vec<u32> = self.examples.iter().map(|e| e.class).collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }
}

/// Raw decoded image, `(channels, height, width)` planes of 8-bit pixels.
#[derive(Debug, Clone)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if channels != 1 && channels != 3 {
            return Err(DataError::Format(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(DataError::Format("zero-dimension image".into()));
        }
        if data.len() != channels * height * width {
            return Err(DataError::Format(format!(
                "pixel buffer length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(RawImage {
            channels,
            height,
            width,
            data,
        })
    }
}

/// Bilinear sample of one channel plane at fractional coordinates.
fn bilinear_at(plane: &[u8], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let p00 = plane[y0 * w + x0] as f64;
    let p01 = plane[y0 * w + x1] as f64;
    let p10 = plane[y1 * w + x0] as f64;
    let p11 = plane[y1 * w + x1] as f64;
    p00 * (1.0 - fy) * (1.0 - fx) + p01 * (1.0 - fy) * fx + p10 * fy * (1.0 - fx) + p11 * fy * fx
}

/// Resizes to `(target, target)` with bilinear interpolation and maps pixel
/// intensities linearly so 0 becomes -1 and 255 becomes +1.
pub fn normalize_image<T: Scalar>(
    raw: &RawImage,
    target_size: usize,
) -> Result<ImageTensor<T>, DataError> {
    if target_size < 8 {
        return Err(DataError::Format(format!(
            "target size must be at least 8, got {target_size}"
        )));
    }
    let (c, h, w) = (raw.channels, raw.height, raw.width);
    let mut out = Vec::with_capacity(c * target_size * target_size);
    let scale_y = h as f64 / target_size as f64;
    let scale_x = w as f64 / target_size as f64;
    for ch in 0..c {
        let plane = &raw.data[ch * h * w..(ch + 1) * h * w];
        if h == target_size && w == target_size {
            // identity resize: keep pixels exact so normalization round-trips
            out.extend(plane.iter().map(|&p| T::cast(p as f64 / 255.0 * 2.0 - 1.0)));
            continue;
        }
        for oy in 0..target_size {
            let sy = (oy as f64 + 0.5) * scale_y - 0.5;
            for ox in 0..target_size {
                let sx = (ox as f64 + 0.5) * scale_x - 0.5;
                let v = bilinear_at(plane, h, w, sy, sx);
                out.push(T::cast(v / 255.0 * 2.0 - 1.0));
            }
        }
    }
    ImageTensor::new(Tensor::from_vec(&[c, target_size, target_size], out))
}

/// Inverse of the normalization map, for writing images back out.
pub fn denormalize_pixel<T: Scalar>(v: T) -> u8 {
    let x = (v.to_f64_lossy() + 1.0) / 2.0 * 255.0;
    x.round().clamp(0.0, 255.0) as u8
}

/// One-class protocol manifest: which class is normal, which training
/// anomalies are included, and the relabeled test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneClassSplit {
    pub normal_class: u32,
    pub gamma: f64,
    pub seed: u64,
    pub train_normals: Vec<String>,
    pub train_anomalies: Vec<String>,
    /// `(example id, y)` with y = 0 for the normal class, 1 otherwise.
    pub test: Vec<(String, u8)>,
}

impl OneClassSplit {
    /// Anomaly fraction actually achieved by the integer counts.
    pub fn achieved_gamma(&self) -> f64 {
        let a = self.train_anomalies.len() as f64;
        let n = self.train_normals.len() as f64;
        if a + n == 0.0 {
            0.0
        } else {
            a / (a + n)
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Builds a one-class split: every training image of `normal_class` is kept
/// as a normal, `a = round(n*gamma/(1-gamma))` anomalies are drawn uniformly
/// without replacement from the other classes' training images, and the test
/// partition is relabeled by the one-class rule.
pub fn build_one_class_split<T: Scalar>(
    corpus: &Corpus<T>,
    normal_class: u32,
    gamma: f64,
    seed: u64,
) -> Result<OneClassSplit, DataError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(DataError::Split(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )));
    }
    let train_normals: Vec<String> = corpus
        .iter_partition(Partition::Train)
        .filter(|e| e.class == normal_class)
        .map(|e| e.id.clone())
        .collect();
    if train_normals.is_empty() {
        return Err(DataError::Split(format!(
            "normal_class {normal_class} has no training examples"
        )));
    }
    let n = train_normals.len();
    let requested = (n as f64 * gamma / (1.0 - gamma)).round() as usize;

    let pool: Vec<&str> = corpus
        .iter_partition(Partition::Train)
        .filter(|e| e.class != normal_class)
        .map(|e| e.id.as_str())
        .collect();
    if requested > 0 && pool.is_empty() {
        return Err(DataError::Split(
            "gamma > 0 but the corpus has no non-normal training images".into(),
        ));
    }
    if requested > pool.len() {
        return Err(DataError::Split(format!(
            "requested {requested} training anomalies but only {} are available (short by {})",
            pool.len(),
            requested - pool.len()
        )));
    }

    let mut train_anomalies: Vec<String> = if requested == 0 {
        Vec::new()
    } else {
        let mut rng = derive_rng(seed, "split-anomalies");
        let mut indices: Vec<usize> = (0..pool.len()).collect();
        // partial Fisher-Yates: the first `requested` entries are the sample
        for i in 0..requested {
            let j = rng.random_range(i..indices.len());
            indices.swap(i, j);
        }
        indices[..requested]
            .iter()
            .map(|&i| pool[i].to_string())
            .collect()
    };
    train_anomalies.sort();

    let test: Vec<(String, u8)> = corpus
        .iter_partition(Partition::Test)
        .map(|e| (e.id.clone(), u8::from(e.class != normal_class)))
        .collect();

    Ok(OneClassSplit {
        normal_class,
        gamma,
        seed,
        train_normals,
        train_anomalies,
        test,
    })
}

/// Mini-batch sizing contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    /// Lower bound on anomalies per batch whenever the split has any.
    pub min_anomalies: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            batch_size: 256,
            min_anomalies: 32,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.batch_size == 0 {
            return Err(DataError::Batch("batch_size must be positive".into()));
        }
        if self.min_anomalies > self.batch_size {
            return Err(DataError::Batch(format!(
                "min_anomalies {} exceeds batch_size {}",
                self.min_anomalies, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Stateful batch source: normals are consumed without replacement within an
/// epoch pass (reshuffled each pass), anomalies are redrawn per batch with a
/// guaranteed minimum count, oversampling with replacement when the pool is
/// smaller than that minimum.
pub struct BatchComposer<'a, T> {
    corpus: &'a Corpus<T>,
    normal_idx: Vec<usize>,
    anomaly_idx: Vec<usize>,
    spec: BatchSpec,
    rng: ChaCha12Rng,
    order: Vec<usize>,
    cursor: usize,
    passes: u64,
    anomalies_per_batch: usize,
}

impl<'a, T: Scalar> BatchComposer<'a, T> {
    pub fn new(
        corpus: &'a Corpus<T>,
        split: &OneClassSplit,
        spec: BatchSpec,
        rng: ChaCha12Rng,
    ) -> Result<Self, DataError> {
        spec.validate()?;
        if split.train_normals.is_empty() {
            return Err(DataError::Batch("empty normal pool".into()));
        }
        let resolve = |ids: &[String]| -> Result<Vec<usize>, DataError> {
            ids.iter()
                .map(|id| {
                    corpus
                        .index
                        .get(id)
                        .copied()
                        .ok_or_else(|| DataError::Batch(format!("unknown example id {id}")))
                })
                .collect()
        };
        let normal_idx = resolve(&split.train_normals)?;
        let anomaly_idx = resolve(&split.train_anomalies)?;

        let anomalies_per_batch = if anomaly_idx.is_empty() {
            0
        } else {
            let frac = anomaly_idx.len() as f64 / (anomaly_idx.len() + normal_idx.len()) as f64;
            let proportional = (spec.batch_size as f64 * frac).round() as usize;
            proportional
                .max(spec.min_anomalies)
                .min(spec.batch_size)
        };
        let order: Vec<usize> = (0..normal_idx.len()).collect();
        let mut composer = BatchComposer {
            corpus,
            normal_idx,
            anomaly_idx,
            spec,
            rng,
            order,
            cursor: 0,
            passes: 0,
            anomalies_per_batch,
        };
        composer.shuffle_pass();
        Ok(composer)
    }

    fn shuffle_pass(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.random_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    /// Anomaly count each batch will carry.
    pub fn anomalies_per_batch(&self) -> usize {
        self.anomalies_per_batch
    }

    /// Number of completed passes over the normal pool.
    pub fn passes(&self) -> u64 {
        self.passes
    }

    /// Batches per pass over the normal pool (at least 1).
    pub fn batches_per_pass(&self) -> usize {
        let normals = self.spec.batch_size - self.anomalies_per_batch;
        if normals == 0 {
            1
        } else {
            self.normal_idx.len().div_ceil(normals)
        }
    }

    fn example(&self, corpus_idx: usize, y: u8) -> LabeledExample<T> {
        let ex = &self.corpus.examples[corpus_idx];
        LabeledExample {
            id: ex.id.clone(),
            image: ex.image.clone(),
            y,
            source_class: ex.class,
        }
    }

    /// Composes the next batch: normals first, anomalies after.
    pub fn next_batch(&mut self) -> Vec<LabeledExample<T>> {
        let n_anom = self.anomalies_per_batch;
        let n_norm = self.spec.batch_size - n_anom;
        let mut batch = Vec::with_capacity(self.spec.batch_size);
        for _ in 0..n_norm {
            if self.cursor >= self.order.len() {
                self.passes += 1;
                self.shuffle_pass();
            }
            let idx = self.normal_idx[self.order[self.cursor]];
            self.cursor += 1;
            batch.push(self.example(idx, 0));
        }
        if self.cursor >= self.order.len() {
            self.passes += 1;
            self.shuffle_pass();
        }
        if n_anom > 0 {
            if self.anomaly_idx.len() >= n_anom {
                // sample distinct ids for this batch
                let mut scratch: Vec<usize> = (0..self.anomaly_idx.len()).collect();
                for i in 0..n_anom {
                    let j = self.rng.random_range(i..scratch.len());
                    scratch.swap(i, j);
                    batch.push(self.example(self.anomaly_idx[scratch[i]], 1));
                }
            } else {
                // pool smaller than the guaranteed minimum: resample with
                // replacement so the guarantee still holds
                for _ in 0..n_anom {
                    let j = self.rng.random_range(0..self.anomaly_idx.len());
                    batch.push(self.example(self.anomaly_idx[j], 1));
                }
            }
        }
        batch
    }
}

/// One-shot batch composition, for callers that do not need epoch state.
pub fn compose_batch<T: Scalar>(
    corpus: &Corpus<T>,
    split: &OneClassSplit,
    spec: BatchSpec,
    rng: ChaCha12Rng,
) -> Result<Vec<LabeledExample<T>>, DataError> {
    Ok(BatchComposer::new(corpus, split, spec, rng)?.next_batch())
}

#[cfg(test)]
mod tests {
    use super::synthetic::{build_synthetic_corpus, SyntheticSpec};
    use super::*;

    fn toy_corpus(n_normal: usize, n_other: usize) -> Corpus<f32> {
        let spec = SyntheticSpec {
            train_normals: n_normal,
            train_anomaly_pool: n_other,
            test_normals: 8,
            test_anomalies: 8,
            image_size: 16,
            corruption_contrast: 0.9,
            seed: 99,
        };
        build_synthetic_corpus(&spec).unwrap()
    }

    #[test]
    fn normalize_constant_images_hit_endpoints() {
        let zeros = RawImage::new(1, 28, 28, vec![0; 28 * 28]).unwrap();
        let it: ImageTensor<f64> = normalize_image(&zeros, 32).unwrap();
        assert_eq!(it.tensor().shape(), &[1, 32, 32]);
        assert!(it.tensor().data().iter().all(|&v| v == -1.0));

        let full = RawImage::new(1, 28, 28, vec![255; 28 * 28]).unwrap();
        let it: ImageTensor<f64> = normalize_image(&full, 32).unwrap();
        assert!(it.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalize_midpoint_value() {
        let raw = RawImage::new(1, 32, 32, vec![128; 32 * 32]).unwrap();
        let it: ImageTensor<f64> = normalize_image(&raw, 32).unwrap();
        let expected = 128.0 / 255.0 * 2.0 - 1.0; // ~0.00392
        assert!((it.tensor().data()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.00392).abs() < 1e-4);
    }

    #[test]
    fn normalize_roundtrips_at_native_size() {
        let data: Vec<u8> = (0..64).map(|i| (i * 3 % 256) as u8).collect();
        let raw = RawImage::new(1, 8, 8, data.clone()).unwrap();
        let it: ImageTensor<f64> = normalize_image(&raw, 8).unwrap();
        let back: Vec<u8> = it.tensor().data().iter().map(|&v| denormalize_pixel(v)).collect();
        assert_eq!(back, data);
    }

    #[test]
    fn normalize_rejects_bad_input() {
        assert!(RawImage::new(2, 8, 8, vec![0; 128]).is_err());
        assert!(RawImage::new(1, 0, 8, vec![]).is_err());
        let raw = RawImage::new(1, 8, 8, vec![0; 64]).unwrap();
        assert!(normalize_image::<f32>(&raw, 4).is_err());
    }

    #[test]
    fn split_gamma_zero_is_pure_semi_supervised() {
        let corpus = toy_corpus(50, 50);
        let split = build_one_class_split(&corpus, 0, 0.0, 1).unwrap();
        assert!(split.train_anomalies.is_empty());
        assert_eq!(split.train_normals.len(), 50);
        for (id, y) in &split.test {
            let class = corpus.get(id).unwrap().class;
            assert_eq!(*y, u8::from(class != 0));
        }
    }

    #[test]
    fn split_anomaly_count_follows_gamma() {
        let corpus = toy_corpus(5000, 700);
        let split = build_one_class_split(&corpus, 0, 0.10, 3).unwrap();
        assert_eq!(split.train_anomalies.len(), 556); // round(5000*0.1/0.9)
        let achieved = split.achieved_gamma();
        let tol = 1.0 / (split.train_normals.len() + split.train_anomalies.len()) as f64;
        assert!((achieved - 0.10).abs() <= tol);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let corpus = toy_corpus(100, 80);
        let a = build_one_class_split(&corpus, 0, 0.2, 7).unwrap();
        let b = build_one_class_split(&corpus, 0, 0.2, 7).unwrap();
        assert_eq!(a, b);
        let c = build_one_class_split(&corpus, 0, 0.2, 8).unwrap();
        assert_ne!(a.train_anomalies, c.train_anomalies);
    }

    #[test]
    fn split_errors_name_the_shortfall() {
        let corpus = toy_corpus(100, 5);
        let err = build_one_class_split(&corpus, 0, 0.3, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("43") && msg.contains("short by 38"), "{msg}");
    }

    #[test]
    fn split_train_test_ids_disjoint() {
        let corpus = toy_corpus(60, 40);
        let split = build_one_class_split(&corpus, 0, 0.25, 5).unwrap();
        let train: std::collections::HashSet<&String> = split
            .train_normals
            .iter()
            .chain(&split.train_anomalies)
            .collect();
        assert!(split.test.iter().all(|(id, _)| !train.contains(id)));
    }

    #[test]
    fn manifest_roundtrip() {
        let corpus = toy_corpus(40, 40);
        let split = build_one_class_split(&corpus, 0, 0.1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        split.save(&path).unwrap();
        let loaded = OneClassSplit::load(&path).unwrap();
        assert_eq!(split, loaded);
        // manifest exposes the documented keys
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["normal_class", "gamma", "seed", "train_normals", "train_anomalies", "test"] {
            assert!(raw.get(key).is_some(), "missing key {key}");
        }
    }

    #[test]
    fn batch_gamma_zero_has_no_anomalies() {
        let corpus = toy_corpus(300, 50);
        let split = build_one_class_split(&corpus, 0, 0.0, 1).unwrap();
        let spec = BatchSpec {
            batch_size: 64,
            min_anomalies: 32,
        };
        let rng = derive_rng(1, "batch");
        let mut composer = BatchComposer::new(&corpus, &split, spec, rng).unwrap();
        let batch = composer.next_batch();
        assert_eq!(batch.len(), 64);
        assert!(batch.iter().all(|e| e.y == 0));
    }

    #[test]
    fn batch_honors_minimum_anomalies() {
        let corpus = toy_corpus(500, 500);
        let split = build_one_class_split(&corpus, 0, 0.1, 1).unwrap();
        let spec = BatchSpec::default();
        let rng = derive_rng(2, "batch");
        let mut composer = BatchComposer::new(&corpus, &split, spec, rng).unwrap();
        for _ in 0..20 {
            let batch = composer.next_batch();
            assert_eq!(batch.len(), 256);
            let anomalies = batch.iter().filter(|e| e.y == 1).count();
            assert!(anomalies >= 32, "got {anomalies}");
        }
    }

    #[test]
    fn tiny_pool_is_oversampled_with_replacement() {
        let corpus = toy_corpus(400, 60);
        let mut split = build_one_class_split(&corpus, 0, 0.1, 1).unwrap();
        split.train_anomalies.truncate(10);
        let spec = BatchSpec::default();
        let rng = derive_rng(3, "batch");
        let mut composer = BatchComposer::new(&corpus, &split, spec, rng).unwrap();
        let batch = composer.next_batch();
        let pool: std::collections::HashSet<&String> = split.train_anomalies.iter().collect();
        let anomalies: Vec<&LabeledExample<f32>> = batch.iter().filter(|e| e.y == 1).collect();
        assert_eq!(anomalies.len(), 32);
        assert!(anomalies.iter().all(|e| pool.contains(&e.id)));
    }

    #[test]
    fn normals_cycle_without_replacement_per_pass() {
        let corpus = toy_corpus(40, 10);
        let split = build_one_class_split(&corpus, 0, 0.0, 1).unwrap();
        let spec = BatchSpec {
            batch_size: 20,
            min_anomalies: 0,
        };
        let rng = derive_rng(4, "batch");
        let mut composer = BatchComposer::new(&corpus, &split, spec, rng).unwrap();
        let mut seen = Vec::new();
        seen.extend(composer.next_batch().into_iter().map(|e| e.id));
        seen.extend(composer.next_batch().into_iter().map(|e| e.id));
        seen.sort();
        let mut expected = split.train_normals.clone();
        expected.sort();
        assert_eq!(seen, expected); // one full pass, each normal exactly once
    }
}
