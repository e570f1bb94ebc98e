//! Labelled image collections and the channel statistics used for
//! standardization.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::image::{standardize, Image, StandardizedImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_cls: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, n_cls: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(invalid_arg!("{} images but {} labels", images.len(), labels.len()));
        }
        if let Some(l) = labels.iter().find(|l| **l >= n_cls) {
            return Err(invalid_arg!("label {l} not below class count {n_cls}"));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.shape() != first.shape()) {
                return Err(invalid_arg!("dataset mixes image shapes"));
            }
        }
        Ok(Self { images, labels, n_cls, split })
    }

    pub fn empty(n_cls: usize, split: Split) -> Self {
        Self { images: Vec::new(), labels: Vec::new(), n_cls, split }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    /// Samples at the given positions, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_cls: self.n_cls,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_cls];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalizer {
    /// Population statistics over every pixel of every image.
    pub fn fit(images: &[Image]) -> Result<Self> {
        let first = images.first().ok_or_else(|| invalid_arg!("cannot fit statistics on no images"))?;
        let c = first.channels();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for img in images {
            for px in img.data().chunks_exact(c) {
                for k in 0..c {
                    sum[k] += px[k];
                    sq[k] += px[k] * px[k];
                }
            }
            count += img.height() * img.width();
        }
        let n = count as f64;
        let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let stds = sq
            .iter()
            .zip(&means)
            .map(|(q, m)| libm::sqrt((q / n - m * m).max(0.0)).max(1e-6))
            .collect();
        Ok(Self { means, stds })
    }

    pub fn identity(channels: usize) -> Self {
        Self { means: vec![0.0; channels], stds: vec![1.0; channels] }
    }

    pub fn apply(&self, img: &Image) -> Result<StandardizedImage> {
        standardize(img, &self.means, &self.stds)
    }
}
