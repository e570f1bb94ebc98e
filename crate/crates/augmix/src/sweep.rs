//! Parameter sweeps: the L2 regularization baseline (retrains per value),
//! the confidence-clipping baseline (one training run, answers clipped per
//! value), and the defense itself over α at the configured intensity and
//! over the tuner's intensity grid at the configured α.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use augmix_core::gateway::DefenseConfig;
use augmix_core::mia::AttackReport;
use augmix_core::pca::FusionWeight;
use augmix_core::tuner::SearchSpace;
use serde::Serialize;

use crate::artifacts::fmt_f;
use crate::config::ExperimentConfig;
use crate::experiment::{build_attacks, prepare, train, Evaluator};

pub const SWEEP_HEADER: [&str; 12] =
    ["baseline", "weight_decay", "max_conf", "alpha", "aug_n", "aug_w", "acc1", "acc2", "binary", "m1", "m2", "m3"];

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    /// `weight_decay`, `max_conf`, `augmix` (the configured defense),
    /// `alpha` or `intensity`.
    pub baseline: String,
    pub weight_decay: f64,
    pub max_conf: Option<f64>,
    /// Defense parameters; empty for the baseline rows.
    pub alpha: Option<f64>,
    pub aug_n: Vec<usize>,
    pub aug_w: Vec<f64>,
    pub report: AttackReport,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        let mut rec = vec![
            r.baseline.clone(),
            fmt_f(r.weight_decay),
            r.max_conf.map(fmt_f).unwrap_or_default(),
            r.alpha.map(fmt_f).unwrap_or_default(),
            join(&r.aug_n),
            join(&r.aug_w.iter().map(|w| fmt_f(*w)).collect::<Vec<_>>()),
            fmt_f(r.report.acc_train),
            fmt_f(r.report.acc_test),
        ];
        rec.extend(r.report.f1_vector().iter().map(|f| fmt_f(*f)));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every sweep and writes `sweep.csv` into the output directory.
///
/// Every weight-decay value retrains the network and the attacker's shadow
/// models from the same seed. The confidence sweep and the defense rows
/// reuse the run trained with `cfg.weight_decay`.
pub fn run_sweeps(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let base = prepare(cfg)?;
    let mut rows = Vec::new();
    let row = |baseline: &str, wd: f64, max_conf: Option<f64>, report: AttackReport| SweepRow {
        baseline: baseline.into(),
        weight_decay: wd,
        max_conf,
        alpha: None,
        aug_n: Vec::new(),
        aug_w: Vec::new(),
        report,
    };
    for &wd in &cfg.sweep_weight_decay {
        let mut setup = base.clone();
        setup.cfg.weight_decay = wd;
        let trained = train(&setup, None).with_context(|| format!("weight decay {wd}"))?;
        let attacks = build_attacks(&setup)?;
        let eval = Evaluator::new(&setup, &trained, &attacks)?;
        rows.push(row("weight_decay", wd, None, eval.undefended(None)?));
    }
    let trained = train(&base, None)?;
    let attacks = build_attacks(&base)?;
    let eval = Evaluator::new(&base, &trained, &attacks)?;
    for &mc in &cfg.sweep_max_conf {
        rows.push(row("max_conf", cfg.weight_decay, Some(mc), eval.undefended(Some(mc)).with_context(|| format!("max_conf {mc}"))?));
    }
    let defense = cfg.defense_config()?;
    let grid = SearchSpace::default_grid(0);
    let mut configs = vec![("augmix", defense.clone())];
    for &alpha in &grid.alpha_grid {
        configs.push(("alpha", DefenseConfig { alpha: FusionWeight::new(alpha)?, ..defense.clone() }));
    }
    for intensity in grid.candidate_intensities {
        configs.push(("intensity", DefenseConfig { intensity, ..defense.clone() }));
    }
    for (name, d) in configs {
        rows.push(SweepRow {
            alpha: Some(d.alpha.alpha()),
            aug_n: d.intensity.counts().to_vec(),
            aug_w: d.intensity.weights().to_vec(),
            ..row(name, cfg.weight_decay, None, eval.defended(&d)?)
        });
    }
    write_sweep(&cfg.output_dir.join("sweep.csv"), &rows)?;
    Ok(rows)
}
