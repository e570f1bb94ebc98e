//! The twelve deterministic augmentation operators and their pHash-keyed
//! selection.
//!
//! Operator parameters are fixed constants (see [`params`]). Registry order is
//! part of the stability contract: the augmentation key indexes into it.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::image::{clamp01, resize_bilinear, Image, LUMA};
use crate::phash::PHash64;

/// Fixed operator constants.
pub mod params {
    /// Counter-clockwise rotation, degrees.
    pub const ROTATION_DEG: f64 = 15.0;
    /// Translation as a fraction of width (right) and height (down).
    pub const TRANSLATE_FRAC: f64 = 0.10;
    pub const AFFINE_ROTATION_DEG: f64 = -10.0;
    pub const AFFINE_SCALE: f64 = 0.9;
    /// Horizontal shear angle, degrees.
    pub const AFFINE_SHEAR_DEG: f64 = 5.0;
    /// Side fraction kept by the centre crop.
    pub const CENTER_CROP_FRAC: f64 = 0.8;
    /// Top corners move this fraction of the image size toward the centre.
    pub const PERSPECTIVE_FRAC: f64 = 0.10;
    pub const EQUALIZE_BINS: usize = 256;
    pub const BLUR_SIGMA: f64 = 1.0;
    pub const SHARPEN_AMOUNT: f64 = 1.0;
    pub const POSTERIZE_BITS: u32 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentationOp {
    HorizontalFlip,
    Rotation,
    AffineTranslate,
    Affine,
    CenterCrop,
    Perspective,
    Equalize,
    GaussianBlur,
    Grayscale,
    Sharpening,
    Posterize,
}

/// Operator registry. `CenterCrop` appears at indices 4 and 7.
pub const REGISTRY: [AugmentationOp; 12] = [
    AugmentationOp::HorizontalFlip,
    AugmentationOp::Rotation,
    AugmentationOp::AffineTranslate,
    AugmentationOp::Affine,
    AugmentationOp::CenterCrop,
    AugmentationOp::Perspective,
    AugmentationOp::Equalize,
    AugmentationOp::CenterCrop,
    AugmentationOp::GaussianBlur,
    AugmentationOp::Grayscale,
    AugmentationOp::Sharpening,
    AugmentationOp::Posterize,
];

impl AugmentationOp {
    pub fn name(self) -> &'static str {
        match self {
            Self::HorizontalFlip => "HorizontalFlip",
            Self::Rotation => "Rotation",
            Self::AffineTranslate => "AffineTranslate",
            Self::Affine => "Affine",
            Self::CenterCrop => "CenterCrop",
            Self::Perspective => "Perspective",
            Self::Equalize => "Equalize",
            Self::GaussianBlur => "GaussianBlur",
            Self::Grayscale => "Grayscale",
            Self::Sharpening => "Sharpening",
            Self::Posterize => "Posterize",
        }
    }

    pub fn apply(self, img: &Image) -> Image {
        match self {
            Self::HorizontalFlip => horizontal_flip(img),
            Self::Rotation => rotate(img, params::ROTATION_DEG),
            Self::AffineTranslate => translate(img, params::TRANSLATE_FRAC),
            Self::Affine => affine(
                img,
                params::AFFINE_ROTATION_DEG,
                params::AFFINE_SCALE,
                params::AFFINE_SHEAR_DEG,
            ),
            Self::CenterCrop => center_crop(img, params::CENTER_CROP_FRAC),
            Self::Perspective => perspective(img, params::PERSPECTIVE_FRAC),
            Self::Equalize => equalize(img),
            Self::GaussianBlur => gaussian_blur(img, params::BLUR_SIGMA),
            Self::Grayscale => grayscale_replicated(img),
            Self::Sharpening => sharpen(img, params::SHARPEN_AMOUNT),
            Self::Posterize => posterize(img, params::POSTERIZE_BITS),
        }
    }
}

impl fmt::Display for AugmentationOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Distribution over how many operators to apply: `n[k]` with weight `w[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugIntensity {
    n: Vec<usize>,
    w: Vec<f64>,
}

impl AugIntensity {
    pub fn new(n: Vec<usize>, w: Vec<f64>) -> Result<Self> {
        if n.is_empty() || n.len() != w.len() {
            return Err(invalid_arg!(
                "intensity needs matching non-empty n and w, got {} and {}",
                n.len(),
                w.len()
            ));
        }
        if w.iter().any(|x| !(*x >= 0.0)) {
            return Err(invalid_arg!("intensity weights must be non-negative: {w:?}"));
        }
        let total: f64 = w.iter().sum();
        if libm::fabs(total - 1.0) > 1e-9 {
            return Err(invalid_arg!("intensity weights must sum to 1, got {total}"));
        }
        Ok(Self { n, w })
    }

    pub fn counts(&self) -> &[usize] {
        &self.n
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    /// `Σ n[k]·w[k]`.
    pub fn expected_count(&self) -> f64 {
        self.n.iter().zip(&self.w).map(|(n, w)| *n as f64 * w).sum()
    }
}

impl fmt::Display for AugIntensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={:?} w=[", self.n)?;
        for (i, w) in self.w.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{w:.2}")?;
        }
        f.write_str("]")
    }
}

/// `phash_decimal mod 12`.
pub fn derive_aug_key(h: PHash64) -> usize {
    (h.decimal() % REGISTRY.len() as u64) as usize
}

/// Picks `n[k]` for the smallest `k` with `u < cumsum(w)[k]`, where
/// `u = (phash_decimal mod 1000) / 1000`.
pub fn derive_aug_num(h: PHash64, intensity: &AugIntensity) -> usize {
    let u = (h.decimal() % 1000) as f64 / 1000.0;
    let mut cumulative = 0.0;
    for (n, w) in intensity.n.iter().zip(&intensity.w) {
        cumulative += w;
        if u < cumulative {
            return *n;
        }
    }
    // Only reachable when the weights sum to slightly under 1.
    let last = intensity.w.iter().rposition(|w| *w > 0.0).unwrap_or(0);
    intensity.n[last]
}

/// The `aug_num` operators starting at `aug_key`, wrapping around the registry.
pub fn select_augmentations(aug_key: usize, aug_num: usize) -> Result<Vec<AugmentationOp>> {
    let total = REGISTRY.len();
    if aug_key >= total {
        return Err(invalid_arg!("aug_key {aug_key} outside [0, {total})"));
    }
    if aug_num > total {
        return Err(invalid_arg!("aug_num {aug_num} exceeds registry size {total}"));
    }
    Ok((0..aug_num).map(|i| REGISTRY[(aug_key + i) % total]).collect())
}

/// Applies operators left to right.
pub fn apply_augmentations(img: &Image, ops: &[AugmentationOp]) -> Image {
    ops.iter().fold(img.clone(), |acc, op| op.apply(&acc))
}

fn horizontal_flip(img: &Image) -> Image {
    let (h, w, c) = img.shape();
    let mut data = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in (0..w).rev() {
            for ch in 0..c {
                data.push(img.get(y, x, ch));
            }
        }
    }
    Image::from_raw(h, w, c, data)
}

/// Output pixel `(x, y)` samples the source at `inv · (x, y, 1)`.
fn warp_affine(img: &Image, inv: [[f64; 3]; 2]) -> Image {
    let (h, w, c) = img.shape();
    let mut data = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let sx = inv[0][0] * xf + inv[0][1] * yf + inv[0][2];
            let sy = inv[1][0] * xf + inv[1][1] * yf + inv[1][2];
            for ch in 0..c {
                data.push(img.sample_bilinear(sy, sx, ch));
            }
        }
    }
    Image::from_clamped(h, w, c, data)
}

/// Inverse map for a centred linear transform `m` (forward, in x-right,
/// y-down coordinates) followed by a translation `(tx, ty)`.
fn centred_inverse(img: &Image, m: [[f64; 2]; 2], tx: f64, ty: f64) -> [[f64; 3]; 2] {
    let cx = (img.width() - 1) as f64 / 2.0;
    let cy = (img.height() - 1) as f64 / 2.0;
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let a = m[1][1] / det;
    let b = -m[0][1] / det;
    let d = -m[1][0] / det;
    let e = m[0][0] / det;
    // src = A⁻¹ (dst - c - t) + c
    let ox = cx + tx;
    let oy = cy + ty;
    [
        [a, b, cx - a * ox - b * oy],
        [d, e, cy - d * ox - e * oy],
    ]
}

/// Counter-clockwise rotation matrix for y-down image coordinates.
fn rotation(deg: f64) -> [[f64; 2]; 2] {
    let t = deg.to_radians();
    let (s, c) = (libm::sin(t), libm::cos(t));
    [[c, s], [-s, c]]
}

fn rotate(img: &Image, deg: f64) -> Image {
    warp_affine(img, centred_inverse(img, rotation(deg), 0.0, 0.0))
}

fn translate(img: &Image, frac: f64) -> Image {
    let tx = frac * img.width() as f64;
    let ty = frac * img.height() as f64;
    warp_affine(img, centred_inverse(img, [[1.0, 0.0], [0.0, 1.0]], tx, ty))
}

fn affine(img: &Image, rot_deg: f64, scale: f64, shear_deg: f64) -> Image {
    let r = rotation(rot_deg);
    let k = libm::tan(shear_deg.to_radians());
    // R · Shear · scale
    let m = [
        [r[0][0] * scale, (r[0][0] * k + r[0][1]) * scale],
        [r[1][0] * scale, (r[1][0] * k + r[1][1]) * scale],
    ];
    warp_affine(img, centred_inverse(img, m, 0.0, 0.0))
}

fn center_crop(img: &Image, frac: f64) -> Image {
    let (h, w, c) = img.shape();
    let ch = (libm::round(h as f64 * frac) as usize).clamp(1, h);
    let cw = (libm::round(w as f64 * frac) as usize).clamp(1, w);
    let top = (h - ch) / 2;
    let left = (w - cw) / 2;
    let mut data = Vec::with_capacity(ch * cw * c);
    for y in top..top + ch {
        for x in left..left + cw {
            for k in 0..c {
                data.push(img.get(y, x, k));
            }
        }
    }
    let cropped = Image::from_raw(ch, cw, c, data);
    resize_bilinear(&cropped, h, w).expect("non-zero target size")
}

/// Solves `a · x = b` for an 8×8 system by Gaussian elimination with partial
/// pivoting. `None` when singular.
fn solve8(mut a: [[f64; 8]; 8], mut b: [f64; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| libm::fabs(a[i][col]).total_cmp(&libm::fabs(a[j][col])))?;
        if libm::fabs(a[pivot][col]) < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            for k in col..8 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 8];
    for row in (0..8).rev() {
        let s: f64 = (row + 1..8).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Homography taking each `from` point to the matching `to` point.
fn homography(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> Option<[f64; 9]> {
    let mut a = [[0.0; 8]; 8];
    let mut b = [0.0; 8];
    for (i, ((x, y), (u, v))) in from.iter().zip(&to).enumerate() {
        a[2 * i] = [*x, *y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u];
        b[2 * i] = *u;
        a[2 * i + 1] = [0.0, 0.0, 0.0, *x, *y, 1.0, -x * v, -y * v];
        b[2 * i + 1] = *v;
    }
    let h = solve8(a, b)?;
    Some([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
}

fn perspective(img: &Image, frac: f64) -> Image {
    let (h, w, c) = img.shape();
    let (mx, my) = ((w - 1) as f64, (h - 1) as f64);
    let src = [(0.0, 0.0), (mx, 0.0), (mx, my), (0.0, my)];
    let dst = [
        (frac * mx, frac * my),
        ((1.0 - frac) * mx, frac * my),
        (mx, my),
        (0.0, my),
    ];
    // Maps output coordinates back into the source.
    let Some(hm) = homography(dst, src) else {
        return img.clone();
    };
    let mut data = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let den = hm[6] * xf + hm[7] * yf + hm[8];
            let sx = (hm[0] * xf + hm[1] * yf + hm[2]) / den;
            let sy = (hm[3] * xf + hm[4] * yf + hm[5]) / den;
            for ch in 0..c {
                data.push(img.sample_bilinear(sy, sx, ch));
            }
        }
    }
    Image::from_clamped(h, w, c, data)
}

#[inline]
fn to_bin(v: f64) -> usize {
    (libm::round(v * 255.0) as usize).min(params::EQUALIZE_BINS - 1)
}

fn equalize(img: &Image) -> Image {
    let (h, w, c) = img.shape();
    let total = h * w;
    let mut out = img.data().to_vec();
    for ch in 0..c {
        let mut hist = [0usize; params::EQUALIZE_BINS];
        for p in img.data().iter().skip(ch).step_by(c) {
            hist[to_bin(*p)] += 1;
        }
        let mut cdf = [0usize; params::EQUALIZE_BINS];
        let mut acc = 0;
        for (i, n) in hist.iter().enumerate() {
            acc += n;
            cdf[i] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        if total == cdf_min {
            continue;
        }
        let span = (total - cdf_min) as f64;
        for v in out.iter_mut().skip(ch).step_by(c) {
            let b = to_bin(*v);
            let level = libm::round((cdf[b] - cdf_min) as f64 / span * 255.0);
            *v = level / 255.0;
        }
    }
    Image::from_clamped(h, w, c, out)
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let side = libm::exp(-1.0 / (2.0 * sigma * sigma));
    let norm = 1.0 + 2.0 * side;
    let k = [side / norm, 1.0 / norm, side / norm];
    let (h, w, c) = img.shape();
    let mut tmp = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in 0..w {
            let xs = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
            for ch in 0..c {
                tmp.push(xs.iter().zip(&k).map(|(&xx, kk)| kk * img.get(y, xx, ch)).sum::<f64>());
            }
        }
    }
    let tmp = Image::from_clamped(h, w, c, tmp);
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        let ys = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
        for x in 0..w {
            for ch in 0..c {
                out.push(ys.iter().zip(&k).map(|(&yy, kk)| kk * tmp.get(yy, x, ch)).sum::<f64>());
            }
        }
    }
    Image::from_clamped(h, w, c, out)
}

fn grayscale_replicated(img: &Image) -> Image {
    if img.channels() == 1 {
        return img.clone();
    }
    let (h, w, c) = img.shape();
    let mut data = Vec::with_capacity(img.len());
    for px in img.data().chunks_exact(c) {
        let l = clamp01(LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]);
        data.extend([l; 3]);
    }
    Image::from_raw(h, w, c, data)
}

fn sharpen(img: &Image, amount: f64) -> Image {
    let blurred = gaussian_blur(img, params::BLUR_SIGMA);
    let (h, w, c) = img.shape();
    let data = img
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(v, b)| v + amount * (v - b))
        .collect();
    Image::from_clamped(h, w, c, data)
}

fn posterize(img: &Image, bits: u32) -> Image {
    let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
    let (h, w, c) = img.shape();
    let data = img
        .data()
        .iter()
        .map(|&v| f64::from(libm::round(v * 255.0) as u8 & mask) / 255.0)
        .collect();
    Image::from_raw(h, w, c, data)
}
