//! Procedurally generated two-class corpus for tests and desk-scale runs.
//!
//! Class 0 ("normal") images are smooth compositions of Gaussian blobs; class
//! 1 takes the same patterns and overwrites a random square region with
//! per-pixel sign noise. A deterministic reconstructor can never reproduce
//! the noise realization, so corrupted images keep a guaranteed
//! reconstruction-error floor no matter how the model generalizes, which
//! makes the fixture separate reliably under reconstruction-error scoring.

use super::{Corpus, CorpusExample, DataError, ImageTensor, Partition};
use crate::scalar::Scalar;
use crate::seeding::derive_rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Shape of the generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_normals: usize,
    /// Class-1 training images available as the supervised anomaly pool.
    pub train_anomaly_pool: usize,
    pub test_normals: usize,
    pub test_anomalies: usize,
    pub image_size: usize,
    /// Amplitude of the noise-patch corruption, in [0, 1]; lower values make
    /// the anomalies subtler.
    pub corruption_contrast: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_normals: 2000,
            train_anomaly_pool: 300,
            test_normals: 200,
            test_anomalies: 200,
            image_size: 32,
            corruption_contrast: 0.9,
            seed: 7,
        }
    }
}

fn blob_pattern<T: Scalar>(size: usize, rng: &mut ChaCha12Rng) -> Tensor<T> {
    let s = size as f64;
    let mut field = vec![0.0f64; size * size];
    for _ in 0..2 {
        let cx = rng.random_range(0.25 * s..0.75 * s);
        let cy = rng.random_range(0.25 * s..0.75 * s);
        let sigma = rng.random_range(0.10 * s..0.18 * s);
        let amp = rng.random_range(0.7..1.0);
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                field[y * size + x] += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let data = field
        .into_iter()
        .map(|v| T::cast(-1.0 + 2.0 * v.min(1.0)))
        .collect();
    Tensor::from_vec(&[1, size, size], data)
}

fn stamp_noise_patch<T: Scalar>(
    img: &mut Tensor<T>,
    size: usize,
    contrast: f64,
    rng: &mut ChaCha12Rng,
) {
    let patch = (size * 5 / 16).max(4); // 10 px at the standard 32x32
    let max_pos = size - patch;
    let py = rng.random_range(0..=max_pos);
    let px = rng.random_range(0..=max_pos);
    for y in py..py + patch {
        for x in px..px + patch {
            let sign = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
            img.data_mut()[y * size + x] = T::cast((sign * contrast).clamp(-1.0, 1.0));
        }
    }
}

/// Builds the deterministic synthetic corpus described by `spec`.
pub fn build_synthetic_corpus<T: Scalar>(spec: &SyntheticSpec) -> Result<Corpus<T>, DataError> {
    if spec.train_normals == 0 {
        return Err(DataError::Corpus(
            "synthetic corpus needs at least one normal training image".into(),
        ));
    }
    if spec.image_size < 8 {
        return Err(DataError::Corpus("synthetic image size must be >= 8".into()));
    }
    let mut examples = Vec::new();
    let push = |examples: &mut Vec<CorpusExample<T>>,
                    partition: Partition,
                    class: u32,
                    i: usize,
                    rng: &mut ChaCha12Rng|
     -> Result<(), DataError> {
        let mut img = blob_pattern::<T>(spec.image_size, rng);
        if class == 1 {
            stamp_noise_patch(&mut img, spec.image_size, spec.corruption_contrast, rng);
        }
        let prefix = match partition {
            Partition::Train => "train",
            Partition::Test => "test",
        };
        examples.push(CorpusExample {
            id: format!("{prefix}/c{class}/{i:05}"),
            image: ImageTensor::new(img)?,
            class,
            partition,
        });
        Ok(())
    };

    let mut rng = derive_rng(spec.seed, "synthetic-train-normal");
    for i in 0..spec.train_normals {
        push(&mut examples, Partition::Train, 0, i, &mut rng)?;
    }
    let mut rng = derive_rng(spec.seed, "synthetic-train-anomaly");
    for i in 0..spec.train_anomaly_pool {
        push(&mut examples, Partition::Train, 1, i, &mut rng)?;
    }
    let mut rng = derive_rng(spec.seed, "synthetic-test-normal");
    for i in 0..spec.test_normals {
        push(&mut examples, Partition::Test, 0, i, &mut rng)?;
    }
    let mut rng = derive_rng(spec.seed, "synthetic-test-anomaly");
    for i in 0..spec.test_anomalies {
        push(&mut examples, Partition::Test, 1, i, &mut rng)?;
    }
    Corpus::from_examples("synthetic", examples, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_counts_and_shapes() {
        let spec = SyntheticSpec {
            train_normals: 10,
            train_anomaly_pool: 6,
            test_normals: 4,
            test_anomalies: 4,
            image_size: 16,
            corruption_contrast: 0.9,
            seed: 1,
        };
        let corpus: Corpus<f32> = build_synthetic_corpus(&spec).unwrap();
        assert_eq!(corpus.len(), 24);
        assert_eq!(corpus.channels(), 1);
        assert_eq!(corpus.image_size(), 16);
        assert_eq!(corpus.class_counts(Partition::Train), vec![(0, 10), (1, 6)]);
        assert_eq!(corpus.class_counts(Partition::Test), vec![(0, 4), (1, 4)]);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let small = SyntheticSpec {
            train_normals: 5,
            train_anomaly_pool: 3,
            test_normals: 2,
            test_anomalies: 2,
            image_size: 16,
            ..spec
        };
        let a: Corpus<f64> = build_synthetic_corpus(&small).unwrap();
        let b: Corpus<f64> = build_synthetic_corpus(&small).unwrap();
        for (ea, eb) in a.examples().iter().zip(b.examples()) {
            assert_eq!(ea.id, eb.id);
            assert_eq!(ea.image, eb.image);
        }
    }

    #[test]
    fn anomalies_carry_a_high_frequency_noise_patch() {
        let spec = SyntheticSpec {
            train_normals: 16,
            train_anomaly_pool: 16,
            test_normals: 0,
            test_anomalies: 0,
            image_size: 32,
            corruption_contrast: 0.9,
            seed: 3,
        };
        let corpus: Corpus<f64> = build_synthetic_corpus(&spec).unwrap();
        // total variation separates noisy patches from smooth blobs
        let tv = |img: &Tensor<f64>| -> f64 {
            let s = 32;
            let mut acc = 0.0;
            for y in 0..s {
                for x in 1..s {
                    acc += (img.data()[y * s + x] - img.data()[y * s + x - 1]).abs();
                }
            }
            acc
        };
        let max_normal = corpus
            .examples()
            .iter()
            .filter(|e| e.class == 0)
            .map(|e| tv(e.image.tensor()))
            .fold(0.0, f64::max);
        let min_anomaly = corpus
            .examples()
            .iter()
            .filter(|e| e.class == 1)
            .map(|e| tv(e.image.tensor()))
            .fold(f64::INFINITY, f64::min);
        assert!(min_anomaly > max_normal);
    }
}
