//! Automatic choice of the defense intensity: a grid pass over fusion
//! weights and augmentation intensities followed by a local refinement,
//! aiming for attack F1 scores close to chance (0.5).

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::augment::AugIntensity;
use crate::error::{invalid_arg, Result};
use crate::gateway::DefenseConfig;
use crate::mia::mean_deviation;
use crate::pca::FusionWeight;

/// Every F1 score must fall in this window for a configuration to count.
pub const F1_WINDOW: (f64, f64) = (0.35, 0.65);
/// Step applied to single intensity weights during refinement.
pub const WEIGHT_STEP: f64 = 0.1;
/// Half-step used around α when the grid has a single value.
const DEFAULT_ALPHA_HALF_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub alpha_grid: Vec<f64>,
    pub candidate_intensities: Vec<AugIntensity>,
    pub refinement_steps: usize,
}

impl SearchSpace {
    /// α ∈ {0.5, …, 0.9}; `n = [a, a+1]` with `w ∈ {[1,0], [0.9,0.1], …, [0,1]}`
    /// for `a ∈ {0, 1, 2}`.
    pub fn default_grid(refinement_steps: usize) -> Self {
        let alpha_grid = vec![0.5, 0.6, 0.7, 0.8, 0.9];
        let mut candidate_intensities = Vec::new();
        for a in 0..3 {
            for k in 0..=10 {
                let w1 = k as f64 / 10.0;
                candidate_intensities.push(AugIntensity::new(vec![a, a + 1], vec![1.0 - w1, w1]).expect("valid grid"));
            }
        }
        Self { alpha_grid, candidate_intensities, refinement_steps }
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() || self.candidate_intensities.is_empty() {
            return Err(invalid_arg!("search space is empty"));
        }
        for pair in self.alpha_grid.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(invalid_arg!("alpha grid must be strictly ascending"));
            }
        }
        for &a in &self.alpha_grid {
            FusionWeight::new(a)?;
        }
        Ok(())
    }

    fn half_step(&self) -> f64 {
        self.alpha_grid
            .windows(2)
            .map(|p| p[1] - p[0])
            .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))))
            .map_or(DEFAULT_ALPHA_HALF_STEP, |d| d / 2.0)
    }

    /// Upper bound on `evaluate` calls.
    pub fn evaluation_budget(&self) -> usize {
        let max_w = self.candidate_intensities.iter().map(|c| c.weights().len()).max().unwrap_or(0);
        self.alpha_grid.len() * self.candidate_intensities.len() + self.refinement_steps * (2 + 2 * max_w)
    }
}

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config: DefenseConfig,
    pub f1: [f64; 4],
    pub deviation: f64,
    pub max_deviation: f64,
    pub in_range: bool,
    /// 1 for the grid pass, 2 for refinement.
    pub phase: u8,
}

impl Evaluation {
    fn new(config: DefenseConfig, f1: [f64; 4], phase: u8) -> Self {
        let max_deviation = f1.iter().map(|f| libm::fabs(f - 0.5)).fold(0.0, f64::max);
        let in_range = f1.iter().all(|f| (F1_WINDOW.0..=F1_WINDOW.1).contains(f));
        Self { deviation: mean_deviation(&f1), max_deviation, in_range, config, f1, phase }
    }

    /// Mean deviation, then max deviation, then smaller α, then fewer
    /// expected augmentations.
    fn rank(&self, other: &Self) -> Ordering {
        self.deviation
            .total_cmp(&other.deviation)
            .then(self.max_deviation.total_cmp(&other.max_deviation))
            .then(self.config.alpha.alpha().total_cmp(&other.config.alpha.alpha()))
            .then(self.config.intensity.expected_count().total_cmp(&other.config.intensity.expected_count()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerResult {
    pub best: DefenseConfig,
    /// Mean `|F1 − 0.5|` at `best`.
    pub deviation: f64,
    pub f1_vector: [f64; 4],
    /// Set when no evaluated configuration had every F1 inside the window.
    pub out_of_range: bool,
    /// Every evaluation in call order.
    pub evaluations: Vec<Evaluation>,
}

fn config(alpha: f64, intensity: AugIntensity) -> Result<DefenseConfig> {
    Ok(DefenseConfig { intensity, alpha: FusionWeight::new(alpha)?, enabled: true })
}

/// Moves weight `j` by `delta`, clamps it to [0, 1] and renormalizes. Weights
/// are snapped to a 1e-6 grid so revisited points compare equal.
fn nudge_weight(intensity: &AugIntensity, j: usize, delta: f64) -> Option<AugIntensity> {
    let mut w = intensity.weights().to_vec();
    w[j] = (w[j] + delta).clamp(0.0, 1.0);
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let last = w.len() - 1;
    let mut acc = 0.0;
    for v in w.iter_mut().take(last) {
        *v = libm::round(*v / total * 1e6) / 1e6;
        acc += *v;
    }
    w[last] = (1.0 - acc).max(0.0);
    AugIntensity::new(intensity.counts().to_vec(), w).ok()
}

fn neighbors(best: &DefenseConfig, half_step: f64) -> Vec<(f64, AugIntensity)> {
    let a = best.alpha.alpha();
    let mut out = Vec::new();
    for da in [-half_step, half_step] {
        let na = libm::round((a + da).clamp(0.0, 1.0) * 1e9) / 1e9;
        out.push((na, best.intensity.clone()));
    }
    for j in 0..best.intensity.weights().len() {
        for dw in [-WEIGHT_STEP, WEIGHT_STEP] {
            if let Some(i) = nudge_weight(&best.intensity, j, dw) {
                out.push((a, i));
            }
        }
    }
    out
}

/// Grid search plus refinement; see [`SearchSpace`] for the grid. `evaluate`
/// returns the four F1 scores (binary, correctness, entropy, modified
/// entropy) of a configuration and must be deterministic. Each distinct
/// configuration is evaluated at most once.
pub fn search_defense_params<F>(space: &SearchSpace, mut evaluate: F) -> Result<TunerResult>
where
    F: FnMut(&DefenseConfig) -> Result<[f64; 4]>,
{
    space.validate()?;
    let mut evaluations: Vec<Evaluation> = Vec::new();
    let mut run = |cfg: DefenseConfig, phase: u8, evaluations: &mut Vec<Evaluation>| -> Result<usize> {
        if let Some(i) = evaluations.iter().position(|e| e.config == cfg) {
            return Ok(i);
        }
        let f1 = evaluate(&cfg)?;
        evaluations.push(Evaluation::new(cfg, f1, phase));
        Ok(evaluations.len() - 1)
    };
    for &alpha in &space.alpha_grid {
        for intensity in &space.candidate_intensities {
            run(config(alpha, intensity.clone())?, 1, &mut evaluations)?;
        }
    }
    let pick = |evals: &[Evaluation], in_range_only: bool| -> Option<usize> {
        (0..evals.len())
            .filter(|&i| !in_range_only || evals[i].in_range)
            .min_by(|&a, &b| evals[a].rank(&evals[b]).then(a.cmp(&b)))
    };
    let Some(mut best) = pick(&evaluations, true) else {
        let i = pick(&evaluations, false).expect("grid is non-empty");
        let e = &evaluations[i];
        return Ok(TunerResult {
            best: e.config.clone(),
            deviation: e.deviation,
            f1_vector: e.f1,
            out_of_range: true,
            evaluations,
        });
    };
    let half_step = space.half_step();
    for _ in 0..space.refinement_steps {
        let mut improved = false;
        for (alpha, intensity) in neighbors(&evaluations[best].config, half_step) {
            let i = run(config(alpha, intensity)?, 2, &mut evaluations)?;
            if evaluations[i].in_range && evaluations[i].rank(&evaluations[best]) == Ordering::Less {
                best = i;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    let e = &evaluations[best];
    Ok(TunerResult {
        best: e.config.clone(),
        deviation: e.deviation,
        f1_vector: e.f1,
        out_of_range: false,
        evaluations,
    })
}
