//! Test-time membership-inference defense for decentralized federated learning.
//!
//! Query images whose perceptual hash appears in any participant's training
//! hash list are pushed through a pHash-keyed augmentation chain and blended
//! with a per-class PCA reconstruction before they reach the model. Images
//! that are not recognised as members take the untouched path.
//!
//! The crate is `no_std` (with `alloc`) and contains every algorithm of the
//! pipeline: imaging primitives, hashing, augmentation, PCA fusion, a small
//! trainable classifier, the DFL simulation, the four membership-inference
//! attacks and the defense-intensity tuner. File formats, the CLI and the
//! experiment harness live in the `augmix` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod data;
pub mod dfl;
pub mod error;
pub mod gateway;
pub mod image;
pub mod mia;
pub mod nn;
pub mod pca;
pub mod phash;
pub mod seed;
pub mod tuner;

pub use error::{Error, Result};
pub use image::{Image, StandardizedImage};
