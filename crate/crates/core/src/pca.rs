//! Per-class first-principal-component reconstructions and pHash-keyed fusion.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::image::{clamp01, Image};
use crate::phash::PHash64;

pub const MAX_POWER_ITERATIONS: usize = 1000;
pub const POWER_TOLERANCE: f64 = 1e-10;

/// Flattened images of one class, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    class_id: usize,
    shape: (usize, usize, usize),
}

impl ClassMatrix {
    /// Builds a matrix from raw rows. Used for synthetic inputs; images go
    /// through [`build_class_matrix`].
    pub fn from_rows(rows: &[Vec<f64>], class_id: usize) -> Result<Self> {
        if rows.len() < 2 {
            return Err(invalid_arg!("class matrix needs at least 2 rows, got {}", rows.len()));
        }
        let cols = rows[0].len();
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(invalid_arg!("class matrix rows must share a non-zero length"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
            class_id,
            shape: (1, cols, 1),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, x) in mean.iter_mut().zip(self.row(i)) {
                *m += x;
            }
        }
        let n = self.rows as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Population standard deviation of every column.
    pub fn column_stds(&self, means: &[f64]) -> Vec<f64> {
        let mut var = vec![0.0; self.cols];
        for i in 0..self.rows {
            for ((v, x), m) in var.iter_mut().zip(self.row(i)).zip(means) {
                *v += (x - m) * (x - m);
            }
        }
        let n = self.rows as f64;
        var.iter().map(|v| libm::sqrt(v / n)).collect()
    }
}

/// Stacks `vec(I_i)` as rows. Every image must share one shape.
pub fn build_class_matrix(images: &[Image], class_id: usize) -> Result<ClassMatrix> {
    if images.len() < 2 {
        return Err(invalid_arg!(
            "class {class_id} needs at least 2 images, got {}",
            images.len()
        ));
    }
    let shape = images[0].shape();
    if let Some(bad) = images.iter().find(|i| i.shape() != shape) {
        return Err(invalid_arg!(
            "class {class_id} mixes image shapes {shape:?} and {:?}",
            bad.shape()
        ));
    }
    let cols = images[0].len();
    let mut data = Vec::with_capacity(images.len() * cols);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Ok(ClassMatrix { rows: images.len(), cols, data, class_id, shape })
}

/// `out = Xcᵀ (Xc v)` where `Xc` is `X` with column means removed.
fn covariance_apply(x: &ClassMatrix, mean: &[f64], v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..x.rows {
        let row = x.row(i);
        let proj: f64 = row.iter().zip(mean).zip(v).map(|((a, m), b)| (a - m) * b).sum();
        for ((o, a), m) in out.iter_mut().zip(row).zip(mean) {
            *o += (a - m) * proj;
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Unit direction of maximum variance of the column-centred matrix.
///
/// Power iteration on `XcᵀXc` applied implicitly, starting from the
/// normalised all-ones vector. Stops once the Rayleigh quotient changes by
/// less than [`POWER_TOLERANCE`] relative, or after
/// [`MAX_POWER_ITERATIONS`]. The sign is fixed so the largest-magnitude entry
/// is positive.
pub fn first_principal_component(x: &ClassMatrix) -> Result<Vec<f64>> {
    let d = x.cols;
    let first = x.row(0);
    if (1..x.rows).all(|i| x.row(i) == first) {
        return Err(Error::DegenerateData(alloc::format!(
            "class {} has identical rows, no variance",
            x.class_id
        )));
    }
    let mean = x.column_means();
    let stds = x.column_stds(&mean);
    let total_var: f64 = stds.iter().map(|s| s * s).sum();
    if !(total_var > 0.0) {
        return Err(Error::DegenerateData(alloc::format!(
            "class {} has zero variance",
            x.class_id
        )));
    }

    let mut v = vec![1.0 / libm::sqrt(d as f64); d];
    let mut w = vec![0.0; d];
    covariance_apply(x, &mean, &v, &mut w);
    // All-ones can be orthogonal to every variance direction; fall back to
    // the highest-variance coordinate axis.
    if norm(&w) <= 1e-12 * total_var * x.rows as f64 {
        let axis = stds
            .iter()
            .enumerate()
            .fold(0, |best, (i, s)| if *s > stds[best] { i } else { best });
        v.iter_mut().for_each(|e| *e = 0.0);
        v[axis] = 1.0;
    }

    let mut lambda = 0.0;
    for _ in 0..MAX_POWER_ITERATIONS {
        covariance_apply(x, &mean, &v, &mut w);
        let next: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let n = norm(&w);
        if n == 0.0 {
            break;
        }
        v.iter_mut().zip(&w).for_each(|(a, b)| *a = b / n);
        let converged = libm::fabs(next - lambda) < POWER_TOLERANCE * libm::fabs(next);
        lambda = next;
        if converged {
            break;
        }
    }

    let pivot = v
        .iter()
        .enumerate()
        .fold(0, |best, (i, e)| if libm::fabs(*e) > libm::fabs(v[best]) { i } else { best });
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|e| *e = -*e);
    }
    Ok(v)
}

/// How the reconstruction rescales the component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    /// Per-pixel mean and population std.
    #[default]
    PerPixel,
    /// One mean and population std over every entry of the matrix.
    Scalar,
}

/// `m = v1 ⊙ σ + μ`, clamped to `[0, 1]` and reshaped to the class image shape.
pub fn reconstruct_class_image(x: &ClassMatrix, mode: StatsMode) -> Result<Image> {
    let v1 = first_principal_component(x)?;
    let mean = x.column_means();
    let m: Vec<f64> = match mode {
        StatsMode::PerPixel => {
            let std = x.column_stds(&mean);
            v1.iter().zip(&std).zip(&mean).map(|((v, s), mu)| clamp01(v * s + mu)).collect()
        }
        StatsMode::Scalar => {
            let n = (x.rows * x.cols) as f64;
            let mu = x.data.iter().sum::<f64>() / n;
            let var = x.data.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n;
            let sigma = libm::sqrt(var);
            v1.iter().map(|v| clamp01(v * sigma + mu)).collect()
        }
    };
    let (h, w, c) = x.shape;
    Image::new(h, w, c, m)
}

/// One reconstructed image per class, indexed by class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaGallery {
    images: Vec<Image>,
}

impl PcaGallery {
    pub fn from_images(images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(invalid_arg!("gallery needs at least one class"));
        }
        let shape = images[0].shape();
        if images.iter().any(|i| i.shape() != shape) {
            return Err(invalid_arg!("gallery images must share one shape"));
        }
        Ok(Self { images })
    }

    /// Builds one reconstruction per class from labelled images. Fails on any
    /// class with fewer than two samples.
    pub fn build(images: &[Image], labels: &[usize], n_cls: usize, mode: StatsMode) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(invalid_arg!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            ));
        }
        let mut recon = Vec::with_capacity(n_cls);
        for class in 0..n_cls {
            let members: Vec<Image> = images
                .iter()
                .zip(labels)
                .filter(|(_, l)| **l == class)
                .map(|(i, _)| i.clone())
                .collect();
            let x = build_class_matrix(&members, class)?;
            recon.push(reconstruct_class_image(&x, mode)?);
        }
        Self::from_images(recon)
    }

    pub fn n_cls(&self) -> usize {
        self.images.len()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn get(&self, class: usize) -> Option<&Image> {
        self.images.get(class)
    }

    /// Snaps every reconstruction onto the 8-bit grid so it survives an 8-bit
    /// image file round trip unchanged.
    pub fn quantized(&self) -> Self {
        Self { images: self.images.iter().map(Image::quantized).collect() }
    }
}

/// `phash_decimal mod n_cls`.
pub fn derive_pca_key(h: PHash64, n_cls: usize) -> Result<usize> {
    if n_cls == 0 {
        return Err(invalid_arg!("class count must be at least 1"));
    }
    Ok((h.decimal() % n_cls as u64) as usize)
}

/// Fusion weight α in `[0, 1]`: the share kept from the augmented image.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid_arg!("fusion weight {alpha} outside [0, 1]"));
        }
        Ok(Self(alpha))
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for FusionWeight {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FusionWeight> for f64 {
    fn from(w: FusionWeight) -> f64 {
        w.0
    }
}

/// `α · aug + (1 − α) · pca`, pixelwise.
pub fn fuse(aug: &Image, pca: &Image, w: FusionWeight) -> Result<Image> {
    if aug.shape() != pca.shape() {
        return Err(invalid_arg!(
            "fusion shape mismatch {:?} vs {:?}",
            aug.shape(),
            pca.shape()
        ));
    }
    let a = w.alpha();
    let (h, wd, c) = aug.shape();
    let data = aug
        .data()
        .iter()
        .zip(pca.data())
        .map(|(x, p)| a * x + (1.0 - a) * p)
        .collect();
    Ok(Image::from_clamped(h, wd, c, data))
}
