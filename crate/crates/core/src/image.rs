//! Dense float images and the low-level transforms every other module uses.
//!
//! Pixels are `f64` in `[0, 1]`, stored row-major with interleaved channels
//! (`H × W × C`). Byte sources are divided by 255 at ingestion.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

/// Luma weights used by grayscale conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, checking shape and that every value lies in `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(alloc::format!(
                "empty image {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(alloc::format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(alloc::format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(alloc::format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds an image from 8-bit samples, scaling by 1/255.
    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Internal constructor for transforms that already guarantee the range.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    /// Same as [`Image::from_raw`] but clamps every value into `[0, 1]`.
    pub(crate) fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Self {
        for v in &mut data {
            *v = clamp01(*v);
        }
        Self::from_raw(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Quantizes every value onto the 8-bit grid (`round(v·255)/255`).
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| libm::round(v * 255.0) / 255.0).collect();
        Image::from_raw(self.height, self.width, self.channels, data)
    }

    /// 8-bit samples, rounding to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| libm::round(v * 255.0) as u8).collect()
    }

    /// Bilinear sample at fractional coordinates with edge replication.
    #[inline]
    pub(crate) fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        let y = y.clamp(0.0, max_y);
        let x = x.clamp(0.0, max_x);
        let y0 = libm::floor(y) as usize;
        let x0 = libm::floor(x) as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

#[inline]
pub(crate) fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Image after per-channel standardization. Keeps the statistics so the
/// transform can be undone.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl StandardizedImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    /// Reverts the standardization, clamping back into `[0, 1]`.
    pub fn unstandardize(&self) -> Image {
        let c = self.channels;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.stds[i % c] + self.means[i % c])
            .collect();
        Image::from_clamped(self.height, self.width, c, data)
    }
}

/// Luma conversion; single-channel input is returned unchanged.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data
                .chunks_exact(3)
                .map(|px| clamp01(LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]))
                .collect();
            Ok(Image::from_raw(img.height, img.width, 1, data))
        }
        other => Err(Error::InvalidImage(alloc::format!(
            "grayscale needs 1 or 3 channels, got {other}"
        ))),
    }
}

/// Source coordinate of output index `i` under corner-aligned sampling.
///
/// Output pixel 0 maps to source 0 and output `out - 1` maps to source
/// `src - 1`. A length-1 output samples the source centre.
#[inline]
pub(crate) fn corner_aligned(i: usize, out: usize, src: usize) -> f64 {
    if out == 1 {
        (src - 1) as f64 / 2.0
    } else {
        i as f64 * (src - 1) as f64 / (out - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid_arg!("resize target {out_h}x{out_w} must be positive"));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let sy = corner_aligned(y, out_h, img.height);
        for x in 0..out_w {
            let sx = corner_aligned(x, out_w, img.width);
            for ch in 0..c {
                data.push(img.sample_bilinear(sy, sx, ch));
            }
        }
    }
    Ok(Image::from_clamped(out_h, out_w, c, data))
}

/// Per-channel `(v - mean) / std`.
pub fn standardize(img: &Image, means: &[f64], stds: &[f64]) -> Result<StandardizedImage> {
    let c = img.channels;
    if means.len() != c || stds.len() != c {
        return Err(invalid_arg!(
            "expected {c} channel statistics, got {} means and {} stds",
            means.len(),
            stds.len()
        ));
    }
    if let Some(s) = stds.iter().find(|s| !(**s > 0.0)) {
        return Err(invalid_arg!("standard deviation must be positive, got {s}"));
    }
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - means[i % c]) / stds[i % c])
        .collect();
    Ok(StandardizedImage {
        height: img.height,
        width: img.width,
        channels: c,
        data,
        means: means.to_vec(),
        stds: stds.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, c: usize, data: &[f64]) -> Image {
        Image::new(h, w, c, data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Image::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn grayscale_cases() {
        let g = img(1, 2, 1, &[0.2, 0.4]);
        assert_eq!(to_grayscale(&g).unwrap(), g);

        let v = 0.37;
        let c = Image::filled(2, 2, 3, v).unwrap();
        let out = to_grayscale(&c).unwrap();
        assert_eq!(out.channels(), 1);
        assert!(out.data().iter().all(|&p| (p - v).abs() < 1e-12));

        let red = img(1, 1, 3, &[1.0, 0.0, 0.0]);
        assert!((to_grayscale(&red).unwrap().data()[0] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn resize_cases() {
        let src = img(2, 3, 1, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(resize_bilinear(&src, 2, 3).unwrap(), src);

        let checker = img(2, 2, 1, &[0.0, 1.0, 1.0, 0.0]);
        let one = resize_bilinear(&checker, 1, 1).unwrap();
        assert!((one.data()[0] - 0.5).abs() < 1e-12);

        let row = img(1, 2, 1, &[0.0, 1.0]);
        let out = resize_bilinear(&row, 1, 3).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0]);

        assert!(resize_bilinear(&row, 0, 3).is_err());
    }

    #[test]
    fn standardize_cases() {
        let a = img(1, 2, 1, &[0.3, 0.8]);
        let s = standardize(&a, &[0.0], &[1.0]).unwrap();
        assert_eq!(s.data(), a.data());

        let v = Image::filled(2, 2, 1, 0.6).unwrap();
        let s = standardize(&v, &[0.6], &[0.2]).unwrap();
        assert!(s.data().iter().all(|&x| x == 0.0));

        let p = img(1, 1, 1, &[0.8]);
        let s = standardize(&p, &[0.5], &[0.25]).unwrap();
        assert!((s.data()[0] - 1.2).abs() < 1e-12);

        assert!(standardize(&p, &[0.5], &[0.0]).is_err());
        assert!(standardize(&p, &[0.5, 0.1], &[1.0, 1.0]).is_err());
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..6, 1usize..6, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(0.0f64..=1.0, h * w * c)
                .prop_map(move |d| Image::new(h, w, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn resize_preserves_value_range(im in arb_image(), oh in 1usize..9, ow in 1usize..9) {
            let lo = im.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = im.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = resize_bilinear(&im, oh, ow).unwrap();
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn grayscale_is_idempotent(im in arb_image()) {
            let once = to_grayscale(&im).unwrap();
            prop_assert_eq!(to_grayscale(&once).unwrap(), once);
        }

        #[test]
        fn standardize_round_trips(im in arb_image(), m in 0.0f64..1.0, s in 0.05f64..2.0) {
            let c = im.channels();
            let st = standardize(&im, &vec![m; c], &vec![s; c]).unwrap();
            let back = st.unstandardize();
            for (a, b) in im.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
