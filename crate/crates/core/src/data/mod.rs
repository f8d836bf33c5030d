//! Datasets: the CIFAR-10 binary format, synthetic class-conditional
//! images for fast runs, and seeded batching with augmentation.

mod batches;
mod cifar;
mod synthetic;

use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::compute::Tensor;
use crate::model::{read_container, write_container, ContainerKind};
use crate::{Error, Result};

pub use batches::{batches, flip_horizontal, Batches};
pub use cifar::{
    load_cifar10, parse_cifar_batch, read_cifar_batch, write_cifar_batch, CIFAR_MEAN, CIFAR_STD,
    RECORD_BYTES,
};
pub use synthetic::{synthetic_dataset, SyntheticConfig};

/// Images (`N×C×H×W`, normalized), labels and the normalization applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-channel mean subtracted from raw `[0,1]` pixels.
    pub mean: Vec<f32>,
    /// Per-channel standard deviation the centered pixels were divided by.
    pub std: Vec<f32>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        let (n, c, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if mean.len() != c || std.len() != c {
            return Err(Error::InvalidArgument("normalization must have one entry per channel".into()));
        }
        if images.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("images contain non-finite values".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.image_len();
        &self.images.data()[i * l..(i + 1) * l]
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Result<Self> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("cannot select an empty subset".into()));
        }
        Ok(Self {
            images: self.images.select(0, indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            mean: self.mean.clone(),
            std: self.std.clone(),
        })
    }

    /// SHA-256 over labels and pixel bits; identifies the evaluation set.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Stores the dataset in the checkpoint container format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let labels: Vec<f32> = self.labels.iter().map(|&l| l as f32).collect();
        let c = self.mean.len();
        write_container(
            path,
            ContainerKind::Dataset,
            None,
            Default::default(),
            &[
                ("images".into(), self.images.shape().to_vec(), self.images.data()),
                ("labels".into(), vec![labels.len()], &labels),
                ("mean".into(), vec![c], &self.mean),
                ("std".into(), vec![c], &self.std),
            ],
            json!({ "num_classes": self.num_classes }),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, mut t) = read_container(path)?;
        if manifest.kind != ContainerKind::Dataset {
            return Err(Error::format(path, "container does not hold a dataset"));
        }
        let mut take = |n: &str| {
            t.remove(n)
                .ok_or_else(|| Error::format(path, format!("missing tensor {n}")))
        };
        let (shape, images) = take("images")?;
        let labels = take("labels")?.1.into_iter().map(|v| v as usize).collect();
        let mean = take("mean")?.1;
        let std = take("std")?.1;
        let num_classes = manifest.meta["num_classes"]
            .as_u64()
            .ok_or_else(|| Error::format(path, "missing num_classes"))? as usize;
        Self::new(Tensor::new(&shape, images)?, labels, num_classes, mean, std)
    }
}
