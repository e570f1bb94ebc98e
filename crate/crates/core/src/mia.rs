//! Membership-inference attacks: prediction correctness, per-class entropy
//! and modified-entropy thresholds, and a shadow-trained logistic-regression
//! classifier. All attacks score with F1, taking "member" as the positive
//! class.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Normalizer};
use crate::error::{invalid_arg, Result};
use crate::image::Image;
use crate::nn::{init_model, predict, train_local, ArchKind, PredictionVector, TrainConfig};
use crate::seed;

/// Floor inside every logarithm of this module.
pub const EPS: f64 = 1e-30;

fn ln_clamped(x: f64) -> f64 {
    libm::log(x.max(EPS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSample {
    pub probs: PredictionVector,
    pub true_label: usize,
    pub is_member: bool,
}

/// `−Σ pᵢ ln pᵢ`.
pub fn entropy(p: &PredictionVector) -> f64 {
    -p.probs().iter().map(|&q| q * ln_clamped(q)).sum::<f64>()
}

/// `−(1 − p_y) ln p_y − Σ_{i≠y} pᵢ ln(1 − pᵢ)`.
pub fn modified_entropy(p: &PredictionVector, y: usize) -> f64 {
    let probs = p.probs();
    let py = probs[y];
    let own = -(1.0 - py) * ln_clamped(py);
    let others: f64 = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y)
        .map(|(_, &q)| -q * ln_clamped(1.0 - q))
        .sum();
    own + others
}

/// Member iff the prediction is correct.
pub fn correctness_attack(s: &AttackSample) -> bool {
    s.probs.argmax() == s.true_label
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Entropy,
    ModifiedEntropy,
}

impl Metric {
    pub fn value(self, s: &AttackSample) -> f64 {
        match self {
            Metric::Entropy => entropy(&s.probs),
            Metric::ModifiedEntropy => modified_entropy(&s.probs, s.true_label),
        }
    }
}

/// Per-class decision thresholds; a sample is called a member iff its
/// metric is strictly below the threshold of its true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub entropy: Vec<f64>,
    pub modified_entropy: Vec<f64>,
}

impl ThresholdSet {
    pub fn threshold(&self, metric: Metric, class: usize) -> f64 {
        match metric {
            Metric::Entropy => self.entropy[class],
            Metric::ModifiedEntropy => self.modified_entropy[class],
        }
    }

    pub fn predict(&self, metric: Metric, s: &AttackSample) -> bool {
        metric.value(s) < self.threshold(metric, s.true_label)
    }
}

/// Threshold maximizing balanced accuracy of "member iff value < t" over the
/// midpoints of consecutive distinct values; the lowest midpoint wins ties.
/// A single distinct value is its own threshold. `None` unless both groups
/// are present.
pub fn best_threshold(values: &[(f64, bool)]) -> Option<f64> {
    let pos = values.iter().filter(|(_, m)| *m).count() as u128;
    let neg = values.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(u128, f64)> = None;
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let Some(&(next, _)) = sorted.get(i) else { break };
        // Balanced accuracy scaled by 2·pos·neg, exact in integers.
        let score = tp * neg + (neg - fp) * pos;
        let t = v + (next - v) / 2.0;
        if best.map_or(true, |(s, _)| score > s) {
            best = Some((score, t));
        }
    }
    Some(best.map_or(sorted[0].0, |(_, t)| t))
}

/// Per-class thresholds from shadow samples; classes lacking either group
/// use the threshold calibrated on all samples.
pub fn calibrate_thresholds(shadow: &[AttackSample], n_cls: usize) -> Result<ThresholdSet> {
    if shadow.is_empty() {
        return Err(invalid_arg!("no shadow samples to calibrate on"));
    }
    if let Some(s) = shadow.iter().find(|s| s.true_label >= n_cls) {
        return Err(invalid_arg!("shadow label {} not below {n_cls}", s.true_label));
    }
    let per_metric = |metric: Metric| -> Result<Vec<f64>> {
        let all: Vec<(f64, bool)> = shadow.iter().map(|s| (metric.value(s), s.is_member)).collect();
        let global = best_threshold(&all)
            .ok_or_else(|| invalid_arg!("shadow samples need both members and non-members"))?;
        Ok((0..n_cls)
            .map(|c| {
                let class: Vec<(f64, bool)> = shadow
                    .iter()
                    .zip(&all)
                    .filter(|(s, _)| s.true_label == c)
                    .map(|(_, v)| *v)
                    .collect();
                best_threshold(&class).unwrap_or(global)
            })
            .collect())
    };
    Ok(ThresholdSet {
        entropy: per_metric(Metric::Entropy)?,
        modified_entropy: per_metric(Metric::ModifiedEntropy)?,
    })
}

/// Feature vector of the classifier attack: probabilities sorted in
/// descending order, the cross-entropy loss and the one-hot true label.
pub fn attack_features(s: &AttackSample) -> Vec<f64> {
    let n = s.probs.n_cls();
    let mut f = s.probs.probs().to_vec();
    f.sort_by(|a, b| b.total_cmp(a));
    f.push(-ln_clamped(s.probs.probs()[s.true_label]));
    f.extend((0..n).map(|c| if c == s.true_label { 1.0 } else { 0.0 }));
    f
}

const LOGREG_ITERATIONS: usize = 2000;
const LOGREG_RATE: f64 = 0.5;
const LOGREG_L2: f64 = 1e-4;

/// Logistic regression over standardized [`attack_features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackModel {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

impl AttackModel {
    /// Full-batch gradient descent from zero weights; deterministic.
    pub fn fit(samples: &[AttackSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| invalid_arg!("no samples to fit the attack model on"))?;
        if samples.iter().any(|s| s.probs.n_cls() != first.probs.n_cls()) {
            return Err(invalid_arg!("attack samples mix class counts"));
        }
        let xs: Vec<Vec<f64>> = samples.iter().map(attack_features).collect();
        let ys: Vec<f64> = samples.iter().map(|s| if s.is_member { 1.0 } else { 0.0 }).collect();
        let d = xs[0].len();
        let n = xs.len() as f64;
        let means: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let stds: Vec<f64> = (0..d)
            .map(|j| {
                let var = xs.iter().map(|x| (x[j] - means[j]) * (x[j] - means[j])).sum::<f64>() / n;
                let s = libm::sqrt(var);
                if s > 1e-12 { s } else { 1.0 }
            })
            .collect();
        let zs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| x.iter().enumerate().map(|(j, v)| (v - means[j]) / stds[j]).collect())
            .collect();
        let mut weights = vec![0.0; d];
        let mut bias = 0.0;
        for _ in 0..LOGREG_ITERATIONS {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (z, y) in zs.iter().zip(&ys) {
                let p = sigmoid(bias + z.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>());
                let e = p - y;
                gb += e;
                for (g, v) in gw.iter_mut().zip(z) {
                    *g += e * v;
                }
            }
            bias -= LOGREG_RATE * gb / n;
            for (w, g) in weights.iter_mut().zip(&gw) {
                *w -= LOGREG_RATE * (g / n + LOGREG_L2 * *w);
            }
        }
        Ok(Self { means, stds, weights, bias })
    }

    /// Probability that the sample is a member.
    pub fn member_probability(&self, s: &AttackSample) -> f64 {
        let z: f64 = attack_features(s)
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.means[j]) / self.stds[j] * self.weights[j])
            .sum();
        sigmoid(self.bias + z)
    }

    pub fn predict(&self, s: &AttackSample) -> bool {
        self.member_probability(s) >= 0.5
    }
}

/// Shadow attack artifacts: the trained classifier and the labelled shadow
/// outputs it was fitted on (reused to calibrate the metric thresholds).
#[derive(Debug, Clone)]
pub struct ShadowAttack {
    pub model: AttackModel,
    pub samples: Vec<AttackSample>,
}

/// Splits `aux` (shuffled with `seed`) into `k_shadows` disjoint
/// (train, out) halves, trains one shadow classifier per pair with `cfg`,
/// and fits the attack model on their labelled outputs.
pub fn train_shadow_attack(
    aux: &LabeledDataset,
    normalizer: &Normalizer,
    arch: ArchKind,
    k_shadows: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ShadowAttack> {
    if k_shadows == 0 {
        return Err(invalid_arg!("need at least one shadow model"));
    }
    let half = aux.len() / (2 * k_shadows);
    if half < 1 {
        return Err(invalid_arg!(
            "{} auxiliary samples cannot feed {k_shadows} shadow models",
            aux.len()
        ));
    }
    let shape = aux.image_shape().expect("non-empty");
    let mut order: Vec<usize> = (0..aux.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive_seed(seed, "shadow-split")));
    let inputs = aux.images.iter().map(|i| normalizer.apply(i)).collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(2 * half * k_shadows);
    for k in 0..k_shadows {
        let chunk = &order[2 * half * k..2 * half * (k + 1)];
        let (train_idx, out_idx) = chunk.split_at(half);
        let xs: Vec<_> = train_idx.iter().map(|&i| inputs[i].clone()).collect();
        let ys: Vec<usize> = train_idx.iter().map(|&i| aux.labels[i]).collect();
        let init = init_model(arch, shape, aux.n_cls, seed::derive_indexed(seed, "shadow-init", k as u64))?;
        let local = TrainConfig { seed: seed::derive_indexed(seed, "shadow-train", k as u64), ..*cfg };
        let shadow = train_local(&init, &xs, &ys, &local)?;
        for (&i, is_member) in train_idx.iter().map(|i| (i, true)).chain(out_idx.iter().map(|i| (i, false))) {
            samples.push(AttackSample { probs: predict(&shadow, &inputs[i])?, true_label: aux.labels[i], is_member });
        }
    }
    Ok(ShadowAttack { model: AttackModel::fit(&samples)?, samples })
}

/// Binary confusion matrix with "member" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[bool], truth: &[bool]) -> Result<Self> {
        if predictions.len() != truth.len() {
            return Err(invalid_arg!(
                "{} predictions for {} labels",
                predictions.len(),
                truth.len()
            ));
        }
        let mut c = Confusion::default();
        for (p, t) in predictions.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2·TP / (2·TP + FP + FN)`, which equals the harmonic mean of
    /// precision and recall and is 0 when that mean is undefined.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn balanced_accuracy(&self) -> f64 {
        (self.recall() + ratio(self.tn, self.tn + self.fp)) / 2.0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn evaluate_f1(predictions: &[bool], truth: &[bool]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(invalid_arg!("F1 needs at least one sample"));
    }
    Ok(Confusion::from_predictions(predictions, truth)?.f1())
}

/// Accuracies and the four attack F1 scores for one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Accuracy on the member evaluation set (Acc1).
    pub acc_train: f64,
    /// Accuracy on the non-member evaluation set (Acc2).
    pub acc_test: f64,
    pub f1_binary: f64,
    pub f1_correctness: f64,
    pub f1_entropy: f64,
    pub f1_mentropy: f64,
}

impl AttackReport {
    /// `[binary, correctness, entropy, modified entropy]`.
    pub fn f1_vector(&self) -> [f64; 4] {
        [self.f1_binary, self.f1_correctness, self.f1_entropy, self.f1_mentropy]
    }

    /// Mean `|F1 − 0.5|` over the four attacks.
    pub fn deviation(&self) -> f64 {
        mean_deviation(&self.f1_vector())
    }
}

pub fn mean_deviation(f1: &[f64; 4]) -> f64 {
    f1.iter().map(|f| libm::fabs(f - 0.5)).sum::<f64>() / 4.0
}

/// Everything the metric and classifier attacks need.
#[derive(Debug, Clone)]
pub struct Attacks {
    pub model: AttackModel,
    pub thresholds: ThresholdSet,
}

/// Answers every evaluation image through `query` and scores all four
/// attacks. `query` is either the raw model or the defended gateway.
pub fn run_attack_suite<Q>(
    mut query: Q,
    members: (&[Image], &[usize]),
    nonmembers: (&[Image], &[usize]),
    attacks: &Attacks,
) -> Result<AttackReport>
where
    Q: FnMut(&Image) -> Result<PredictionVector>,
{
    if members.0.is_empty() || nonmembers.0.is_empty() {
        return Err(invalid_arg!("evaluation needs members and non-members"));
    }
    let mut samples = Vec::with_capacity(members.0.len() + nonmembers.0.len());
    for ((imgs, labels), is_member) in [(members, true), (nonmembers, false)] {
        if imgs.len() != labels.len() {
            return Err(invalid_arg!("{} images but {} labels", imgs.len(), labels.len()));
        }
        for (img, &y) in imgs.iter().zip(labels) {
            samples.push(AttackSample { probs: query(img)?, true_label: y, is_member });
        }
    }
    let truth: Vec<bool> = samples.iter().map(|s| s.is_member).collect();
    let score = |decide: &dyn Fn(&AttackSample) -> bool| -> Result<f64> {
        let preds: Vec<bool> = samples.iter().map(decide).collect();
        evaluate_f1(&preds, &truth)
    };
    let accuracy = |member: bool| {
        let group: Vec<&AttackSample> = samples.iter().filter(|s| s.is_member == member).collect();
        group.iter().filter(|s| correctness_attack(s)).count() as f64 / group.len() as f64
    };
    Ok(AttackReport {
        acc_train: accuracy(true),
        acc_test: accuracy(false),
        f1_binary: score(&|s| attacks.model.predict(s))?,
        f1_correctness: score(&correctness_attack)?,
        f1_entropy: score(&|s| attacks.thresholds.predict(Metric::Entropy, s))?,
        f1_mentropy: score(&|s| attacks.thresholds.predict(Metric::ModifiedEntropy, s))?,
    })
}
