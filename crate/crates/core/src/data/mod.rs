//! Dataset ingestion, class-conditional batch sampling, and synthetic-set
//! initialization.
//!
//! Condensation batches are class-conditional: each optimization step
//! matches a single class's real batch against that class's synthetic
//! images. Sampling is with replacement only when a class holds fewer
//! examples than the requested batch.

pub mod augment;
mod cifar;
mod idx;

use crate::error::{HmdcError, Result};
use hmdc_tensor::Scalar;
use ndarray::{s, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Identity and geometry of a supported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub num_classes: usize,
    /// (C, H, W)
    pub image_shape: (usize, usize, usize),
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DatasetSpec {
    pub fn for_name(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(DatasetSpec {
                name: "mnist".into(),
                num_classes: 10,
                image_shape: (1, 28, 28),
                mean: vec![0.1307],
                std: vec![0.3081],
            }),
            "cifar10" => Ok(DatasetSpec {
                name: "cifar10".into(),
                num_classes: 10,
                image_shape: (3, 32, 32),
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            }),
            other => Err(HmdcError::Unsupported {
                what: "dataset".into(),
                value: other.into(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(HmdcError::Config(
                "normalization std entries must be strictly positive".into(),
            ));
        }
        if self.mean.len() != self.image_shape.0 || self.std.len() != self.image_shape.0 {
            return Err(HmdcError::Config(
                "normalization length must match channel count".into(),
            ));
        }
        Ok(())
    }
}

/// A batch of images with labels; leading dimensions always agree.
#[derive(Debug, Clone)]
pub struct ImageBatch<T: Scalar> {
    pub images: Array4<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(images: Array4<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.dim().0 != labels.len() || labels.is_empty() {
            return Err(HmdcError::Shape(format!(
                "batch of {} images with {} labels",
                images.dim().0,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(HmdcError::Shape(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(ImageBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// An indexed, normalized, in-memory dataset split.
#[derive(Debug, Clone)]
pub struct ImageCollection<T: Scalar> {
    pub spec: DatasetSpec,
    pub images: Array4<T>,
    pub labels: Vec<usize>,
    pub by_class: Vec<Vec<usize>>,
}

impl<T: Scalar> ImageCollection<T> {
    pub fn from_parts(spec: DatasetSpec, images: Array4<T>, labels: Vec<usize>) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(HmdcError::Shape("image/label count mismatch".into()));
        }
        let mut by_class = vec![Vec::new(); spec.num_classes];
        for (i, &lab) in labels.iter().enumerate() {
            if lab >= spec.num_classes {
                return Err(HmdcError::Shape(format!(
                    "label {lab} out of range for {} classes",
                    spec.num_classes
                )));
            }
            by_class[lab].push(i);
        }
        Ok(ImageCollection {
            spec,
            images,
            labels,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self, class_id: usize) -> usize {
        self.by_class.get(class_id).map_or(0, Vec::len)
    }

    pub fn gather(&self, indices: &[usize]) -> (Array4<T>, Vec<usize>) {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::<T>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            images
                .slice_mut(s![row, .., .., ..])
                .assign(&self.images.slice(s![idx, .., .., ..]));
            labels.push(self.labels[idx]);
        }
        (images, labels)
    }
}

/// Load a dataset split from the cache directory, normalized per channel.
pub fn load_dataset(spec: &DatasetSpec, split: Split, cache_dir: &Path) -> Result<ImageCollection<f32>> {
    spec.validate()?;
    let dir = cache_dir.join(&spec.name);
    let (raw, labels_u8, (c, h, w)) = match spec.name.as_str() {
        "mnist" => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let (px, n, rows, cols) =
                idx::read_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
            let labels = idx::read_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
            if labels.len() != n {
                return Err(HmdcError::ingestion(
                    &dir,
                    format!("{n} images but {} labels", labels.len()),
                ));
            }
            if (rows, cols) != (spec.image_shape.1, spec.image_shape.2) {
                return Err(HmdcError::ingestion(
                    &dir,
                    format!("unexpected image size {rows}x{cols}"),
                ));
            }
            (px, labels, spec.image_shape)
        }
        "cifar10" => {
            let files: &[&str] = match split {
                Split::Train => &[
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                Split::Test => &["test_batch.bin"],
            };
            let (px, labels) = cifar::read_cifar_batches(&dir, files)?;
            (px, labels, spec.image_shape)
        }
        other => {
            return Err(HmdcError::Unsupported {
                what: "dataset".into(),
                value: other.into(),
            })
        }
    };

    let n = labels_u8.len();
    let mut images = Array4::<f32>::zeros((n, c, h, w));
    {
        let flat = images.as_slice_mut().unwrap();
        let plane = h * w;
        for i in 0..n {
            for ch in 0..c {
                let mean = spec.mean[ch] as f32;
                let std = spec.std[ch] as f32;
                let src = &raw[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                let dst = &mut flat[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s as f32 / 255.0 - mean) / std;
                }
            }
        }
    }
    let labels: Vec<usize> = labels_u8.iter().map(|&l| l as usize).collect();
    ImageCollection::from_parts(spec.clone(), images, labels)
}

/// Draw a single-class batch. Without replacement when the class is large
/// enough, with replacement otherwise (keeps the batch size constant).
pub fn sample_real_batch<T: Scalar>(
    col: &ImageCollection<T>,
    class_id: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<ImageBatch<T>> {
    let pool = col
        .by_class
        .get(class_id)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| HmdcError::Shape(format!("class {class_id} is empty")))?;
    if batch_size == 0 {
        return Err(HmdcError::Shape("batch_size must be >= 1".into()));
    }
    let indices: Vec<usize> = if pool.len() >= batch_size {
        rand::seq::index::sample(rng, pool.len(), batch_size)
            .iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..batch_size)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect()
    };
    let (images, labels) = col.gather(&indices);
    ImageBatch::new(images, labels, col.spec.num_classes)
}

/// The learnable condensed set. Labels are fixed at construction and
/// contiguous by class: `ipc` copies of class 0, then class 1, ...
#[derive(Debug, Clone)]
pub struct SyntheticSet<T: Scalar> {
    pub images: Array4<T>,
    pub labels: Vec<usize>,
    pub ipc: usize,
    pub num_classes: usize,
}

impl<T: Scalar> SyntheticSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_range(&self, class_id: usize) -> std::ops::Range<usize> {
        class_id * self.ipc..(class_id + 1) * self.ipc
    }

    pub fn class_images(&self, class_id: usize) -> Array4<T> {
        let r = self.class_range(class_id);
        self.images.slice(s![r.start..r.end, .., .., ..]).to_owned()
    }

    pub fn class_labels(&self, class_id: usize) -> Vec<usize> {
        vec![class_id; self.ipc]
    }
}

/// Initialize the synthetic set from `ipc` distinct random real images per
/// class (so every starting image is bit-equal to some training image).
pub fn init_synthetic_set<T: Scalar>(
    col: &ImageCollection<T>,
    ipc: usize,
    rng: &mut impl Rng,
) -> Result<SyntheticSet<T>> {
    if ipc == 0 {
        return Err(HmdcError::Config("ipc must be >= 1".into()));
    }
    let (_, c, h, w) = col.images.dim();
    let classes = col.spec.num_classes;
    let mut images = Array4::<T>::zeros((classes * ipc, c, h, w));
    let mut labels = Vec::with_capacity(classes * ipc);
    for class_id in 0..classes {
        let pool = &col.by_class[class_id];
        if pool.len() < ipc {
            return Err(HmdcError::Shape(format!(
                "class {class_id} has {} examples, fewer than ipc={ipc}",
                pool.len()
            )));
        }
        let picks: Vec<usize> = rand::seq::index::sample(rng, pool.len(), ipc)
            .iter()
            .map(|i| pool[i])
            .collect();
        for (j, &idx) in picks.iter().enumerate() {
            images
                .slice_mut(s![class_id * ipc + j, .., .., ..])
                .assign(&col.images.slice(s![idx, .., .., ..]));
            labels.push(class_id);
        }
    }
    Ok(SyntheticSet {
        images,
        labels,
        ipc,
        num_classes: classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_collection(per_class: usize) -> ImageCollection<f32> {
        let spec = DatasetSpec::for_name("mnist").unwrap();
        let n = per_class * 10;
        let images = Array4::from_shape_fn((n, 1, 28, 28), |(i, _, y, x)| {
            ((i * 31 + y * 7 + x) % 17) as f32 / 17.0
        });
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        ImageCollection::from_parts(spec, images, labels).unwrap()
    }

    #[test]
    fn unknown_dataset_is_ingestion_error() {
        assert!(DatasetSpec::for_name("svhn").is_err());
    }

    #[test]
    fn class_conditional_batches_have_one_label() {
        let col = tiny_collection(20);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let class = rng.gen_range(0..10);
            let b = sample_real_batch(&col, class, 8, &mut rng).unwrap();
            assert!(b.labels.iter().all(|&l| l == class));
        }
    }

    #[test]
    fn oversampling_small_class_repeats() {
        let col = tiny_collection(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_real_batch(&col, 2, 16, &mut rng).unwrap();
        assert_eq!(b.len(), 16);
    }

    #[test]
    fn batch_of_one_works() {
        let col = tiny_collection(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_real_batch(&col, 0, 1, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.labels, vec![0]);
    }

    #[test]
    fn same_seed_same_indices() {
        let col = tiny_collection(50);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_real_batch(&col, 4, 32, &mut rng).unwrap().images
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn init_copies_real_images_with_contiguous_labels() {
        let col = tiny_collection(12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let synth = init_synthetic_set(&col, 2, &mut rng).unwrap();
        assert_eq!(synth.len(), 20);
        assert_eq!(synth.labels[0..2], [0, 0]);
        assert_eq!(synth.labels[18..20], [9, 9]);
        // every synthetic image is bit-equal to some real image of its class
        for i in 0..synth.len() {
            let img = synth.images.slice(s![i, .., .., ..]);
            let class = synth.labels[i];
            let found = col.by_class[class].iter().any(|&idx| {
                col.images.slice(s![idx, .., .., ..]) == img
            });
            assert!(found, "synthetic image {i} is not a copy of a real one");
        }
    }

    #[test]
    fn init_rejects_ipc_beyond_class_population() {
        let col = tiny_collection(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(init_synthetic_set(&col, 4, &mut rng).is_err());
    }

    #[test]
    fn init_deterministic_across_runs() {
        let col = tiny_collection(10);
        let a = init_synthetic_set(&col, 3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = init_synthetic_set(&col, 3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }
}
