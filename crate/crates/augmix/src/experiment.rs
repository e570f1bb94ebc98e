//! End-to-end orchestration: ingest → partition → federated training →
//! attack calibration → undefended and defended evaluation → reports.
//!
//! Every stochastic stage draws its seed from the master seed through
//! [`seed::derive_seed`] with a fixed stage name, so runs are reproducible.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use augmix_core::data::{LabeledDataset, Normalizer};
use augmix_core::dfl::{build_topology, membership_query, run_federated_training, Participant, Topology};
use augmix_core::gateway::{clip_confidence, DefenseConfig, Gateway};
use augmix_core::mia::{calibrate_thresholds, run_attack_suite, train_shadow_attack, AttackReport, Attacks};
use augmix_core::nn::{accuracy, init_model, PredictionVector};
use augmix_core::pca::PcaGallery;
use augmix_core::phash::{compute_phash, duplicate_stats, DuplicateReport, HashIndex, PHash64};
use augmix_core::tuner::{search_defense_params, SearchSpace, TunerResult};
use augmix_core::{seed, Image, StandardizedImage};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::artifacts::{
    fmt_f, save_checkpoint, save_gallery, save_json, write_duplicates, write_report, ReportRow, RoundLog, RoundRecord,
    RunState,
};
use crate::config::ExperimentConfig;
use crate::dataset::{load_dataset, partition_iid, subsample};

/// Images with their labels.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl EvalSet {
    fn from_indices(ds: &LabeledDataset, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| ds.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loaded and partitioned data plus everything fixed before training.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub train_pool: LabeledDataset,
    pub test_pool: LabeledDataset,
    pub partitions: Vec<LabeledDataset>,
    pub normalizer: Normalizer,
    pub topology: Topology,
    pub entry: usize,
    /// Balanced evaluation sets: members drawn from the union of training
    /// partitions, non-members from the test pool.
    pub members: EvalSet,
    pub nonmembers: EvalSet,
    /// Attacker's auxiliary data, disjoint from `nonmembers` and training.
    pub aux: LabeledDataset,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let (train, test) = load_dataset(&cfg.dataset, cfg.dataset_format)
        .with_context(|| format!("stage ingest: loading {}", cfg.dataset.display()))?;
    let train_pool = subsample(&train, cfg.train_limit, seed::derive_seed(cfg.seed, "train-subset"));
    let test_pool = subsample(&test, cfg.test_limit, seed::derive_seed(cfg.seed, "test-subset"));
    ensure!(!train_pool.is_empty() && !test_pool.is_empty(), "stage ingest: empty train or test split");
    let partitions = partition_iid(&train_pool, cfg.n_participants, seed::derive_seed(cfg.seed, "partition"));
    let normalizer = Normalizer::fit(&train_pool.images).context("stage ingest: normalization")?;
    let topology = build_topology(cfg.topology, cfg.n_participants)?;

    let mut test_order: Vec<usize> = (0..test_pool.len()).collect();
    test_order.shuffle(&mut seed::rng(seed::derive_seed(cfg.seed, "test-split")));
    let available = test_pool.len().saturating_sub(cfg.aux_size);
    let n_eval = cfg.eval_members.min(cfg.eval_nonmembers).min(available).min(train_pool.len());
    ensure!(n_eval > 0, "stage ingest: test split too small for {} auxiliary samples", cfg.aux_size);
    let aux_idx = &test_order[n_eval..(n_eval + cfg.aux_size).min(test_pool.len())];
    let mut member_order: Vec<usize> = (0..train_pool.len()).collect();
    member_order.shuffle(&mut seed::rng(seed::derive_seed(cfg.seed, "member-sample")));

    Ok(Setup {
        entry: cfg.entry()?,
        members: EvalSet::from_indices(&train_pool, &member_order[..n_eval]),
        nonmembers: EvalSet::from_indices(&test_pool, &test_order[..n_eval]),
        aux: test_pool.select(aux_idx),
        cfg: cfg.clone(),
        train_pool,
        test_pool,
        partitions,
        normalizer,
        topology,
    })
}

/// Post-training state of the network.
#[derive(Debug, Clone)]
pub struct Trained {
    pub participants: Vec<Participant>,
    pub indexes: Vec<HashIndex>,
    /// Built from the entry participant's local partition, 8-bit quantized.
    pub gallery: PcaGallery,
}

pub fn train(setup: &Setup, mut log: Option<&mut RoundLog>) -> Result<Trained> {
    let cfg = &setup.cfg;
    let shape = setup.train_pool.image_shape().expect("non-empty pool");
    let init = init_model(cfg.arch_kind()?, shape, setup.train_pool.n_cls, seed::derive_seed(cfg.seed, "init"))?;
    let mut participants = setup
        .partitions
        .iter()
        .enumerate()
        .map(|(i, part)| {
            Participant::new(
                i,
                setup.topology.role(i),
                part.clone(),
                &setup.normalizer,
                init.clone(),
                seed::derive_indexed(cfg.seed, "participant", i as u64),
            )
        })
        .collect::<augmix_core::Result<Vec<_>>>()
        .context("stage partition: building participants")?;
    let test_inputs: Vec<StandardizedImage> = setup
        .nonmembers
        .images
        .iter()
        .map(|i| setup.normalizer.apply(i))
        .collect::<augmix_core::Result<_>>()?;
    run_federated_training(&setup.topology, &mut participants, cfg.rounds, &cfg.train_config(), |round, p| {
        if let Some(log) = log.as_deref_mut() {
            let record = RoundRecord {
                round,
                participant: p.id(),
                train_acc: accuracy(p.model(), p.inputs(), &p.data().labels)?,
                test_acc: accuracy(p.model(), &test_inputs, &setup.nonmembers.labels)?,
            };
            log.append(&record).map_err(|e| augmix_core::Error::InvalidArgument(e.to_string()))?;
        }
        Ok(())
    })
    .context("stage train")?;
    let local = participants[setup.entry].data();
    let gallery = PcaGallery::build(&local.images, &local.labels, local.n_cls, cfg.pca_stats)
        .context("stage gallery: building PCA reconstructions")?
        .quantized();
    let indexes = participants.iter().map(|p| p.index().clone()).collect();
    Ok(Trained { participants, indexes, gallery })
}

/// Shadow-trained classifier attack plus per-class metric thresholds.
pub fn build_attacks(setup: &Setup) -> Result<Attacks> {
    let cfg = &setup.cfg;
    let shadow = train_shadow_attack(
        &setup.aux,
        &setup.normalizer,
        cfg.arch_kind()?,
        cfg.k_shadows,
        &cfg.shadow_train_config(),
        seed::derive_seed(cfg.seed, "shadow"),
    )
    .context("stage attack: shadow training")?;
    let thresholds = calibrate_thresholds(&shadow.samples, setup.train_pool.n_cls).context("stage attack: thresholds")?;
    Ok(Attacks { model: shadow.model, thresholds })
}

/// Answers the evaluation sets through the entry participant's gateway.
///
/// Undefended predictions and membership detections do not depend on the
/// defense parameters and are computed once. Detected images are re-answered
/// through [`Gateway::answer_query`] for every configuration; undetected ones
/// take the bypass path, whose output is exactly the undefended prediction.
pub struct Evaluator<'a> {
    setup: &'a Setup,
    gateway: Gateway<'a>,
    attacks: &'a Attacks,
    undefended: Vec<PredictionVector>,
    detected: Vec<bool>,
    hashes: Vec<PHash64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(setup: &'a Setup, trained: &'a Trained, attacks: &'a Attacks) -> Result<Self> {
        let gateway = Gateway::new(
            &setup.topology,
            &trained.indexes,
            setup.entry,
            trained.participants[setup.entry].model(),
            &setup.normalizer,
            &trained.gallery,
        )?;
        let all = setup.members.images.iter().chain(&setup.nonmembers.images);
        let mut undefended = Vec::new();
        let mut detected = Vec::new();
        let mut hashes = Vec::new();
        for img in all {
            let h = compute_phash(img)?;
            undefended.push(gateway.predict_undefended(img)?);
            detected.push(membership_query(&setup.topology, &trained.indexes, setup.entry, h)?);
            hashes.push(h);
        }
        Ok(Self { setup, gateway, attacks, undefended, detected, hashes })
    }

    pub fn gateway(&self) -> &Gateway<'a> {
        &self.gateway
    }

    fn report(&self, mut answer: impl FnMut(usize, &Image) -> Result<PredictionVector>) -> Result<AttackReport> {
        let mut k = 0;
        let mut next = |img: &Image| -> augmix_core::Result<PredictionVector> {
            let i = k;
            k += 1;
            answer(i, img).map_err(|e| augmix_core::Error::InvalidArgument(format!("{e:#}")))
        };
        Ok(run_attack_suite(
            &mut next,
            (&self.setup.members.images, &self.setup.members.labels),
            (&self.setup.nonmembers.images, &self.setup.nonmembers.labels),
            self.attacks,
        )?)
    }

    /// Raw model answers, optionally confidence-clipped.
    pub fn undefended(&self, max_conf: Option<f64>) -> Result<AttackReport> {
        self.report(|i, _| match max_conf {
            Some(c) => Ok(clip_confidence(&self.undefended[i], c)?),
            None => Ok(self.undefended[i].clone()),
        })
    }

    pub fn defended(&self, cfg: &DefenseConfig) -> Result<AttackReport> {
        self.report(|i, img| {
            if cfg.enabled && self.detected[i] {
                Ok(self.gateway.answer_query(img, cfg)?.0)
            } else {
                Ok(self.undefended[i].clone())
            }
        })
    }

    /// Duplicate statistics of the union training index against the
    /// evaluation non-members (the images behind Acc2).
    pub fn duplicates(&self, trained: &Trained) -> DuplicateReport {
        let union = HashIndex::from_hashes(trained.indexes.iter().flat_map(|i| i.entries().iter().copied()).collect(), 0);
        duplicate_stats(&union, &self.hashes[self.setup.members.len()..])
    }

    /// Number of non-members flagged as members by the membership query.
    pub fn nonmember_detections(&self) -> usize {
        self.detected[self.setup.members.len()..].iter().filter(|d| **d).count()
    }

    pub fn tune(&self) -> Result<TunerResult> {
        let space = SearchSpace::default_grid(self.setup.cfg.refinement_steps);
        Ok(search_defense_params(&space, |c| {
            self.defended(c)
                .map(|r| r.f1_vector())
                .map_err(|e| augmix_core::Error::InvalidArgument(format!("{e:#}")))
        })?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutcome {
    pub undefended: AttackReport,
    pub defended: AttackReport,
    pub defense: DefenseConfig,
    pub tuner: Option<TunerResult>,
    pub duplicates: DuplicateReport,
}

/// Writes checkpoints, gallery and run state so `defend` can answer queries
/// later without retraining.
pub fn save_trained(dir: &Path, setup: &Setup, trained: &Trained) -> Result<()> {
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    for p in &trained.participants {
        save_checkpoint(&ckpt.join(format!("participant_{:03}.ckpt", p.id())), p.model())?;
    }
    save_gallery(&dir.join("gallery"), &trained.gallery)?;
    save_json(
        &dir.join("state.json"),
        &RunState {
            topology: setup.cfg.topology,
            n_participants: setup.cfg.n_participants,
            entry: setup.entry,
            normalizer: setup.normalizer.clone(),
            indexes: trained.indexes.clone(),
        },
    )
}

/// Training phase only (`augmix train`).
pub fn run_training(cfg: &ExperimentConfig) -> Result<(Setup, Trained)> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    save_json(&dir.join("config.json"), cfg)?;
    let setup = prepare(cfg)?;
    let mut log = RoundLog::create(&dir.join("rounds.csv"))?;
    let trained = train(&setup, Some(&mut log))?;
    save_trained(dir, &setup, &trained)?;
    Ok((setup, trained))
}

/// Full pipeline; writes `report.csv` (undefended and defended rows),
/// `duplicates.csv`, `rounds.csv`, checkpoints, the gallery and, when
/// tuning, `tuner.json` and `tuner.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (setup, trained) = run_training(cfg)?;
    let attacks = build_attacks(&setup)?;
    let eval = Evaluator::new(&setup, &trained, &attacks).context("stage evaluate")?;
    let undefended = eval.undefended(None).context("stage evaluate: undefended")?;
    let (defense, tuner) = if cfg.tune {
        let result = eval.tune().context("stage tune")?;
        (result.best.clone(), Some(result))
    } else {
        (cfg.defense_config()?, None)
    };
    let defended = eval.defended(&defense).context("stage evaluate: defended")?;
    let duplicates = eval.duplicates(&trained);

    let dir = &cfg.output_dir;
    let row = |defense: &str, report: AttackReport| ReportRow {
        dataset: cfg.dataset_label(),
        topology: cfg.topology.to_string(),
        defense: defense.to_string(),
        report,
    };
    let mut rows = vec![row("No", undefended.clone()), row("Yes", defended.clone())];
    if let Some(mc) = cfg.max_conf {
        rows.push(row(&format!("MaxConf{}", fmt_f(mc)), eval.undefended(Some(mc)).context("stage evaluate: clipped")?));
    }
    write_report(&dir.join("report.csv"), &rows)?;
    write_duplicates(&dir.join("duplicates.csv"), &duplicates)?;
    save_json(&dir.join("defense.json"), &defense)?;
    if let Some(t) = &tuner {
        save_json(&dir.join("tuner.json"), t)?;
        write_tuner_csv(&dir.join("tuner.csv"), t)?;
    }
    Ok(ExperimentOutcome { undefended, defended, defense, tuner, duplicates })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

pub const TUNER_HEADER: [&str; 12] =
    ["phase", "alpha", "aug_n", "aug_w", "expected_aug", "binary", "m1", "m2", "m3", "deviation", "max_deviation", "in_range"];

/// One row per evaluated configuration, in evaluation order.
pub fn write_tuner_csv(path: &Path, result: &TunerResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(TUNER_HEADER)?;
    for e in &result.evaluations {
        let i = &e.config.intensity;
        let mut rec = vec![
            e.phase.to_string(),
            fmt_f(e.config.alpha.alpha()),
            join(i.counts()),
            join(&i.weights().iter().map(|w| fmt_f(*w)).collect::<Vec<_>>()),
            fmt_f(i.expected_count()),
        ];
        rec.extend(e.f1.iter().map(|f| fmt_f(*f)));
        rec.extend([fmt_f(e.deviation), fmt_f(e.max_deviation), e.in_range.to_string()]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}
