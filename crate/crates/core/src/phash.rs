//! 64-bit DCT perceptual hashing and sorted hash indexes.
//!
//! Recipe: grayscale, corner-aligned bilinear resize to 32×32, orthonormal
//! 2-D DCT-II, top-left 8×8 block (DC included), median split with strict
//! `>`, row-major packing with bit 0 as the most significant bit.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::image::{resize_bilinear, to_grayscale, Image};

/// Side of the DCT input.
pub const DCT_SIZE: usize = 32;
/// Side of the low-frequency block kept for hashing.
pub const HASH_BLOCK: usize = 8;
/// Coefficients below this magnitude count as exact zeros. Absorbs rounding
/// residue so flat regions hash identically regardless of summation order.
pub const COEFF_EPSILON: f64 = 1e-9;

/// A 64-bit perceptual hash. The decimal view is the same integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PHash64(pub u64);

impl PHash64 {
    pub fn bits(self) -> u64 {
        self.0
    }

    /// The hash read as an unsigned decimal; keys every deterministic
    /// defense choice.
    pub fn decimal(self) -> u64 {
        self.0
    }

    pub fn hamming(self, other: PHash64) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl fmt::Display for PHash64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn dct_basis() -> Vec<f64> {
    let n = DCT_SIZE as f64;
    let mut basis = vec![0.0; DCT_SIZE * DCT_SIZE];
    for u in 0..DCT_SIZE {
        let scale = if u == 0 { libm::sqrt(1.0 / n) } else { libm::sqrt(2.0 / n) };
        for x in 0..DCT_SIZE {
            basis[u * DCT_SIZE + x] =
                scale * libm::cos((2 * x + 1) as f64 * u as f64 * PI / (2.0 * n));
        }
    }
    basis
}

/// Orthonormal type-II 2-D DCT of a row-major 32×32 matrix, computed
/// separably as `C · M · Cᵀ`.
pub fn dct2d(matrix: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows != DCT_SIZE || cols != DCT_SIZE || matrix.len() != DCT_SIZE * DCT_SIZE {
        return Err(invalid_arg!(
            "dct2d expects a {DCT_SIZE}x{DCT_SIZE} matrix, got {rows}x{cols} ({} values)",
            matrix.len()
        ));
    }
    let basis = dct_basis();
    let n = DCT_SIZE;
    // Transform rows: tmp[y][v] = Σx M[y][x]·C[v][x]
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        let row = &matrix[y * n..(y + 1) * n];
        for v in 0..n {
            let b = &basis[v * n..(v + 1) * n];
            tmp[y * n + v] = row.iter().zip(b).map(|(m, c)| m * c).sum();
        }
    }
    // Then columns: out[u][v] = Σy C[u][y]·tmp[y][v]
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        let b = &basis[u * n..(u + 1) * n];
        for (y, &c) in b.iter().enumerate() {
            let t = &tmp[y * n..(y + 1) * n];
            let o = &mut out[u * n..(u + 1) * n];
            for (ov, tv) in o.iter_mut().zip(t) {
                *ov += c * tv;
            }
        }
    }
    Ok(out)
}

/// Packs the hash bits from a full 32×32 coefficient matrix.
fn hash_from_coefficients(coeffs: &[f64]) -> PHash64 {
    let mut block = [0.0f64; HASH_BLOCK * HASH_BLOCK];
    for u in 0..HASH_BLOCK {
        for v in 0..HASH_BLOCK {
            let c = coeffs[u * DCT_SIZE + v];
            block[u * HASH_BLOCK + v] = if libm::fabs(c) < COEFF_EPSILON { 0.0 } else { c };
        }
    }
    let mut sorted = block;
    sorted.sort_by(f64::total_cmp);
    // Lower of the two middle values.
    let median = sorted[sorted.len() / 2 - 1];
    let bits = block
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > median)
        .fold(0u64, |acc, (i, _)| acc | (1u64 << (63 - i)));
    PHash64(bits)
}

/// The 32×32 grayscale matrix fed to the DCT.
pub fn hash_input(img: &Image) -> Result<Image> {
    let gray = to_grayscale(img)?;
    resize_bilinear(&gray, DCT_SIZE, DCT_SIZE)
}

pub fn compute_phash(img: &Image) -> Result<PHash64> {
    let small = hash_input(img)?;
    let coeffs = dct2d(small.data(), DCT_SIZE, DCT_SIZE)?;
    Ok(hash_from_coefficients(&coeffs))
}

/// Sorted multiset of one participant's training-image hashes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashIndex {
    entries: Vec<PHash64>,
    owner: usize,
}

impl HashIndex {
    pub fn from_hashes(mut hashes: Vec<PHash64>, owner: usize) -> Self {
        hashes.sort_unstable();
        Self { entries: hashes, owner }
    }

    pub fn entries(&self) -> &[PHash64] {
        &self.entries
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Binary search; `O(log n)` comparisons.
    pub fn lookup(&self, h: PHash64) -> bool {
        self.entries.binary_search(&h).is_ok()
    }

    /// Number of stored copies of `h`.
    pub fn multiplicity(&self, h: PHash64) -> usize {
        let lo = self.entries.partition_point(|e| *e < h);
        let hi = self.entries.partition_point(|e| *e <= h);
        hi - lo
    }
}

/// Hashes every image. An empty list yields an empty (valid) index.
pub fn build_hash_index(images: &[Image], owner: usize) -> Result<HashIndex> {
    let hashes = images.iter().map(compute_phash).collect::<Result<Vec<_>>>()?;
    Ok(HashIndex::from_hashes(hashes, owner))
}

/// Duplicate-hash statistics of a training index against a set of test hashes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateReport {
    /// `(multiplicity, number of distinct hashes with that multiplicity)`,
    /// multiplicities > 1 only, ascending.
    pub multiplicities: Vec<(usize, usize)>,
    pub test_hits: usize,
    pub test_total: usize,
}

impl DuplicateReport {
    pub fn test_fraction(&self) -> f64 {
        if self.test_total == 0 {
            0.0
        } else {
            self.test_hits as f64 / self.test_total as f64
        }
    }

    /// Training images sharing a hash with at least one other image.
    pub fn duplicated_images(&self) -> usize {
        self.multiplicities.iter().map(|(m, c)| m * c).sum()
    }
}

pub fn duplicate_stats(train_index: &HashIndex, test_hashes: &[PHash64]) -> DuplicateReport {
    let mut multiplicities: Vec<(usize, usize)> = Vec::new();
    let entries = train_index.entries();
    let mut i = 0;
    while i < entries.len() {
        let run = entries[i..].iter().take_while(|e| **e == entries[i]).count();
        if run > 1 {
            match multiplicities.iter_mut().find(|(m, _)| *m == run) {
                Some((_, c)) => *c += 1,
                None => multiplicities.push((run, 1)),
            }
        }
        i += run;
    }
    multiplicities.sort_unstable();
    let test_hits = test_hashes.iter().filter(|h| train_index.lookup(**h)).count();
    DuplicateReport { multiplicities, test_hits, test_total: test_hashes.len() }
}
