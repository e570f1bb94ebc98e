//! The defended answer path: hash the query, flood a membership check, and
//! for suspected members augment the image and blend it with the class PCA
//! reconstruction before prediction. Also hosts the confidence-clipping
//! baseline.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentations, derive_aug_key, derive_aug_num, select_augmentations, AugIntensity};
use crate::data::Normalizer;
use crate::dfl::{membership_query_traced, Topology};
use crate::error::{invalid_arg, Result};
use crate::image::Image;
use crate::nn::{predict, ModelParams, PredictionVector};
use crate::pca::{derive_pca_key, fuse, FusionWeight, PcaGallery};
use crate::phash::{compute_phash, HashIndex, PHash64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub intensity: AugIntensity,
    pub alpha: FusionWeight,
    pub enabled: bool,
}

impl DefenseConfig {
    /// A configuration whose member path is the identity (`aug_num = 0`,
    /// `α = 1`).
    pub fn identity() -> Self {
        Self {
            intensity: AugIntensity::new(alloc::vec![0], alloc::vec![1.0]).expect("valid intensity"),
            alpha: FusionWeight::new(1.0).expect("valid weight"),
            enabled: true,
        }
    }
}

/// Audit record of one answered query. Transform fields are `None`/empty
/// unless the image was detected as a member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayDecision {
    pub phash: PHash64,
    pub is_member_detected: bool,
    pub query_messages: usize,
    pub aug_key: Option<usize>,
    pub aug_num: Option<usize>,
    pub pca_key: Option<usize>,
    pub applied_ops: Vec<String>,
}

/// Trained state seen by queries arriving at one participant.
#[derive(Debug, Clone, Copy)]
pub struct Gateway<'a> {
    topology: &'a Topology,
    indexes: &'a [HashIndex],
    entry: usize,
    model: &'a ModelParams,
    normalizer: &'a Normalizer,
    gallery: &'a PcaGallery,
}

impl<'a> Gateway<'a> {
    pub fn new(
        topology: &'a Topology,
        indexes: &'a [HashIndex],
        entry: usize,
        model: &'a ModelParams,
        normalizer: &'a Normalizer,
        gallery: &'a PcaGallery,
    ) -> Result<Self> {
        if entry >= topology.n() || indexes.len() != topology.n() {
            return Err(invalid_arg!(
                "entry {entry} with {} indexes does not fit a topology of {}",
                indexes.len(),
                topology.n()
            ));
        }
        if gallery.n_cls() != model.arch().n_cls {
            return Err(invalid_arg!(
                "gallery has {} classes but the model predicts {}",
                gallery.n_cls(),
                model.arch().n_cls
            ));
        }
        Ok(Self { topology, indexes, entry, model, normalizer, gallery })
    }

    pub fn entry(&self) -> usize {
        self.entry
    }

    /// Plain model output on the standardized image.
    pub fn predict_undefended(&self, img: &Image) -> Result<PredictionVector> {
        predict(self.model, &self.normalizer.apply(img)?)
    }

    pub fn answer_query(&self, img: &Image, cfg: &DefenseConfig) -> Result<(PredictionVector, GatewayDecision)> {
        let h = compute_phash(img)?;
        let mut decision = GatewayDecision {
            phash: h,
            is_member_detected: false,
            query_messages: 0,
            aug_key: None,
            aug_num: None,
            pca_key: None,
            applied_ops: Vec::new(),
        };
        if !cfg.enabled {
            return Ok((self.predict_undefended(img)?, decision));
        }
        let trace = membership_query_traced(self.topology, self.indexes, self.entry, h)?;
        decision.query_messages = trace.messages;
        if !trace.found {
            return Ok((self.predict_undefended(img)?, decision));
        }
        let aug_key = derive_aug_key(h);
        let aug_num = derive_aug_num(h, &cfg.intensity);
        let ops = select_augmentations(aug_key, aug_num)?;
        let augmented = apply_augmentations(img, &ops);
        let pca_key = derive_pca_key(h, self.gallery.n_cls())?;
        let reference = self
            .gallery
            .get(pca_key)
            .ok_or_else(|| invalid_arg!("gallery has no image for class {pca_key}"))?;
        let fused = fuse(&augmented, reference, cfg.alpha)?;
        let prediction = predict(self.model, &self.normalizer.apply(&fused)?)?;
        decision.is_member_detected = true;
        decision.aug_key = Some(aug_key);
        decision.aug_num = Some(aug_num);
        decision.pca_key = Some(pca_key);
        decision.applied_ops = ops.iter().map(|op| op.name().to_string()).collect();
        Ok((prediction, decision))
    }
}

/// Caps the top probability at `max_conf` and rescales the rest
/// proportionally. With several maxima the lowest index is clipped. When the
/// rest carries no mass (a one-hot input) the freed mass is spread evenly.
pub fn clip_confidence(p: &PredictionVector, max_conf: f64) -> Result<PredictionVector> {
    let uniform = 1.0 / p.n_cls() as f64;
    if !(max_conf >= uniform && max_conf < 1.0) {
        return Err(invalid_arg!("max_conf {max_conf} outside [{uniform}, 1)"));
    }
    let top = p.argmax();
    let pmax = p.probs()[top];
    if pmax <= max_conf {
        return Ok(p.clone());
    }
    let rest: f64 = p.probs().iter().enumerate().filter(|(i, _)| *i != top).map(|(_, v)| v).sum();
    let even = (1.0 - max_conf) / (p.n_cls() - 1) as f64;
    let probs = p
        .probs()
        .iter()
        .enumerate()
        .map(|(i, v)| match i {
            _ if i == top => max_conf,
            _ if rest > 0.0 => v * (1.0 - max_conf) / rest,
            _ => even,
        })
        .collect();
    Ok(PredictionVector::from_raw(probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfl::{build_topology, TopologyKind};
    use crate::nn::{init_model, ArchKind};
    use crate::phash::build_hash_index;
    use crate::pca::StatsMode;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> PredictionVector {
        PredictionVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn clipping_cases() {
        let c = clip_confidence(&pv(&[0.9, 0.1]), 0.6).unwrap();
        assert!((c.probs()[0] - 0.6).abs() < 1e-12 && (c.probs()[1] - 0.4).abs() < 1e-12);
        assert_eq!(clip_confidence(&pv(&[0.5, 0.5]), 0.6).unwrap(), pv(&[0.5, 0.5]));
        assert!(clip_confidence(&pv(&[0.9, 0.1]), 0.4).is_err());
        assert!(clip_confidence(&pv(&[0.9, 0.1]), 1.0).is_err());
        let c = clip_confidence(&pv(&[0.1, 0.45, 0.45]), 0.4).unwrap();
        assert_eq!(c.probs()[1], 0.4);
        assert!(c.probs()[2] > 0.4);
        let c = clip_confidence(&pv(&[0.0, 1.0, 0.0]), 0.8).unwrap();
        assert_eq!(c.probs()[1], 0.8);
        assert!((c.probs()[0] - 0.1).abs() < 1e-12 && (c.probs()[2] - 0.1).abs() < 1e-12);
    }

    struct World {
        topology: Topology,
        indexes: Vec<HashIndex>,
        model: ModelParams,
        normalizer: Normalizer,
        gallery: PcaGallery,
        members: Vec<Image>,
        outsiders: Vec<Image>,
    }

    fn world() -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut random = |n: usize| -> Vec<Image> {
            (0..n)
                .map(|_| Image::new(12, 12, 1, (0..144).map(|_| rng.random::<f64>()).collect()).unwrap())
                .collect()
        };
        let members = random(12);
        let outsiders = random(4);
        let topology = build_topology(TopologyKind::Ring, 4).unwrap();
        let indexes = (0..4).map(|i| build_hash_index(&members[i * 3..i * 3 + 3], i).unwrap()).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let gallery = PcaGallery::build(&members, &labels, 3, StatsMode::PerPixel).unwrap();
        World {
            topology,
            indexes,
            model: init_model(ArchKind::SmallCnn, (12, 12, 1), 3, 1).unwrap(),
            normalizer: Normalizer::fit(&members).unwrap(),
            gallery,
            members,
            outsiders,
        }
    }

    #[test]
    fn bypass_and_identity_paths_match_undefended() {
        let w = world();
        let g = Gateway::new(&w.topology, &w.indexes, 0, &w.model, &w.normalizer, &w.gallery).unwrap();
        let cfg = DefenseConfig {
            intensity: AugIntensity::new(vec![2, 3], vec![0.5, 0.5]).unwrap(),
            alpha: FusionWeight::new(0.6).unwrap(),
            enabled: true,
        };
        for img in &w.outsiders {
            let (p, d) = g.answer_query(img, &cfg).unwrap();
            assert_eq!(p, g.predict_undefended(img).unwrap());
            assert!(!d.is_member_detected && d.aug_key.is_none() && d.applied_ops.is_empty());
        }
        for img in &w.members {
            let (p, d) = g.answer_query(img, &DefenseConfig::identity()).unwrap();
            assert!(d.is_member_detected);
            assert_eq!(d.aug_num, Some(0));
            assert_eq!(p, g.predict_undefended(img).unwrap());
        }
    }

    #[test]
    fn member_queries_are_transformed_and_deterministic() {
        let w = world();
        let g = Gateway::new(&w.topology, &w.indexes, 1, &w.model, &w.normalizer, &w.gallery).unwrap();
        let cfg = DefenseConfig {
            intensity: AugIntensity::new(vec![2, 3], vec![0.5, 0.5]).unwrap(),
            alpha: FusionWeight::new(0.6).unwrap(),
            enabled: true,
        };
        let mut changed = 0;
        for img in &w.members {
            let (a, d) = g.answer_query(img, &cfg).unwrap();
            let (b, _) = g.answer_query(img, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(d.is_member_detected);
            assert_eq!(d.applied_ops.len(), d.aug_num.unwrap());
            if a != g.predict_undefended(img).unwrap() {
                changed += 1;
            }
        }
        assert!(changed > 0);
        let off = DefenseConfig { enabled: false, ..cfg };
        let (p, d) = g.answer_query(&w.members[0], &off).unwrap();
        assert!(!d.is_member_detected);
        assert_eq!(p, g.predict_undefended(&w.members[0]).unwrap());
    }

    #[test]
    fn gallery_must_match_classes() {
        let w = world();
        let model = init_model(ArchKind::SmallCnn, (12, 12, 1), 4, 1).unwrap();
        assert!(Gateway::new(&w.topology, &w.indexes, 0, &model, &w.normalizer, &w.gallery).is_err());
        assert!(Gateway::new(&w.topology, &w.indexes, 9, &w.model, &w.normalizer, &w.gallery).is_err());
    }
}
