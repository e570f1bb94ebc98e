//! Experiment configuration: a flat JSON object whose every key can be
//! overridden on the command line with `--<key> <value>`.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use augmix_core::augment::AugIntensity;
use augmix_core::dfl::{build_topology, TopologyKind};
use augmix_core::gateway::DefenseConfig;
use augmix_core::nn::{ArchKind, TrainConfig};
use augmix_core::pca::{FusionWeight, StatsMode};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::DatasetFormat;

/// Where the attacker queries the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackerPlacement {
    /// Participant 0 (fully connected and ring).
    Entry,
    /// The star center.
    Center,
    /// The first star leaf.
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub dataset_format: DatasetFormat,
    /// Name for the `dataset` report column; empty uses the directory name.
    pub dataset_name: String,
    /// Random training subset size (0 keeps everything).
    pub train_limit: usize,
    /// Random test subset size (0 keeps everything).
    pub test_limit: usize,
    pub n_participants: usize,
    pub topology: TopologyKind,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `cnn`, `mlp` or `mlp<hidden>`.
    pub arch: String,
    pub attacker: AttackerPlacement,
    pub alpha: f64,
    pub aug_n: Vec<usize>,
    pub aug_w: Vec<f64>,
    /// Whether the gateway defense is active for the defended run.
    pub defense: bool,
    /// Search the defense parameters instead of using `alpha`/`aug_n`/`aug_w`.
    pub tune: bool,
    pub refinement_steps: usize,
    pub pca_stats: StatsMode,
    pub eval_members: usize,
    pub eval_nonmembers: usize,
    /// Held-out test samples given to the attacker for shadow training.
    pub aux_size: usize,
    pub k_shadows: usize,
    /// Shadow training epochs; 0 matches the target's total local epochs.
    pub shadow_epochs: usize,
    /// Confidence cap applied to undefended answers (`null` disables).
    pub max_conf: Option<f64>,
    pub sweep_weight_decay: Vec<f64>,
    pub sweep_max_conf: Vec<f64>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            dataset_format: DatasetFormat::Idx,
            dataset_name: String::new(),
            train_limit: 4000,
            test_limit: 0,
            n_participants: 4,
            topology: TopologyKind::Fully,
            rounds: 30,
            epochs: 2,
            batch_size: 32,
            learning_rate: 0.1,
            weight_decay: 0.0,
            arch: "cnn".into(),
            attacker: AttackerPlacement::Entry,
            alpha: 0.7,
            aug_n: vec![1, 2],
            aug_w: vec![0.5, 0.5],
            defense: true,
            tune: false,
            refinement_steps: 3,
            pca_stats: StatsMode::PerPixel,
            eval_members: 500,
            eval_nonmembers: 500,
            aux_size: 3000,
            k_shadows: 3,
            shadow_epochs: 12,
            max_conf: None,
            sweep_weight_decay: vec![0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2],
            sweep_max_conf: vec![0.99, 0.9, 0.8, 0.7, 0.6, 0.5],
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Parses an override value using the type of the key's default value.
/// Lists accept JSON (`[1,2]`) or comma-separated items (`1,2`).
fn parse_override(key: &str, raw: &str, default: &Value) -> Result<Value> {
    let json = || serde_json::from_str::<Value>(raw);
    Ok(match default {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => match json() {
            Ok(v @ Value::Array(_)) => v,
            _ if raw.trim().is_empty() => Value::Array(Vec::new()),
            _ => Value::Array(
                raw.split(',')
                    .map(|item| serde_json::from_str(item.trim()))
                    .collect::<Result<_, _>>()
                    .with_context(|| format!("--{key}: cannot parse list '{raw}'"))?,
            ),
        },
        Value::Null => json().unwrap_or_else(|_| Value::String(raw.to_string())),
        _ => json().with_context(|| format!("--{key}: cannot parse '{raw}'"))?,
    })
}

/// Splits `--key value` / `--key=value` pairs. Dashes in keys become
/// underscores.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!("unexpected argument '{arg}' (overrides look like --key value)");
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (flag.to_string(), it.next().with_context(|| format!("--{flag} needs a value"))?.clone()),
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Defaults, then the JSON file (if any), then the overrides. The
    /// dataset path must exist.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let defaults = match serde_json::to_value(Self::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let mut merged: Map<String, Value> = defaults.clone();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            let Value::Object(file) = file else {
                bail!("config {} must be a JSON object", path.display());
            };
            for (k, v) in file {
                ensure!(defaults.contains_key(&k), "config {}: unknown key '{k}'", path.display());
                merged.insert(k, v);
            }
        }
        for (k, raw) in overrides {
            let default = defaults.get(k).with_context(|| format!("unknown option --{k}"))?;
            merged.insert(k.clone(), parse_override(k, raw, default)?);
        }
        let cfg: Self = serde_json::from_value(Value::Object(merged)).context("invalid configuration")?;
        cfg.validate()?;
        ensure!(cfg.dataset.exists(), "dataset path {} does not exist", cfg.dataset.display());
        Ok(cfg)
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        build_topology(self.topology, self.n_participants)?;
        self.arch_kind()?;
        self.train_config().validate()?;
        self.defense_config()?;
        self.entry()?;
        ensure!(self.rounds > 0, "rounds must be positive");
        ensure!(self.eval_members > 0 && self.eval_nonmembers > 0, "evaluation sets must be non-empty");
        ensure!(self.k_shadows > 0, "k_shadows must be positive");
        if let Some(c) = self.max_conf {
            ensure!(c > 0.0 && c < 1.0, "max_conf must lie in (0, 1)");
        }
        ensure!(self.sweep_max_conf.iter().all(|c| *c > 0.0 && *c < 1.0), "sweep_max_conf values must lie in (0, 1)");
        ensure!(self.sweep_weight_decay.iter().all(|w| *w >= 0.0), "sweep_weight_decay values must be non-negative");
        Ok(())
    }

    pub fn arch_kind(&self) -> Result<ArchKind> {
        Ok(self.arch.parse()?)
    }

    /// Local training settings; the seed is replaced per participant and round.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn shadow_train_config(&self) -> TrainConfig {
        let epochs = if self.shadow_epochs == 0 { self.rounds * self.epochs } else { self.shadow_epochs };
        TrainConfig { epochs, ..self.train_config() }
    }

    pub fn defense_config(&self) -> Result<DefenseConfig> {
        Ok(DefenseConfig {
            intensity: AugIntensity::new(self.aug_n.clone(), self.aug_w.clone())?,
            alpha: FusionWeight::new(self.alpha)?,
            enabled: self.defense,
        })
    }

    /// The participant the attacker queries.
    pub fn entry(&self) -> Result<usize> {
        match (self.attacker, self.topology) {
            (AttackerPlacement::Entry, _) => Ok(0),
            (AttackerPlacement::Center, TopologyKind::Star) => Ok(0),
            (AttackerPlacement::Leaf, TopologyKind::Star) => Ok(1),
            (p, t) => bail!("attacker placement {p:?} needs a star topology, not {t}"),
        }
    }

    pub fn dataset_label(&self) -> String {
        if !self.dataset_name.is_empty() {
            return self.dataset_name.clone();
        }
        self.dataset
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }

    /// Every key with its current value, for `--help`-style listings.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }
}
