//! `augmix` command-line interface.
//!
//! Every experiment subcommand accepts `--config <file.json>` followed by
//! overrides named after the config keys, e.g.
//! `augmix attack --config exp.json --topology ring --rounds 5`.

use std::path::PathBuf;

use anyhow::{Context, Result};
use augmix::artifacts::{load_checkpoint, load_gallery, load_json, write_duplicates, RunState};
use augmix::config::{parse_override_args, ExperimentConfig};
use augmix::dataset::{read_image, save_idx_dataset};
use augmix::experiment::{prepare, run_experiment, run_training};
use augmix::sweep::run_sweeps;
use augmix::synth::{generate, SynthConfig};
use augmix_core::augment::REGISTRY;
use augmix_core::dfl::build_topology;
use augmix_core::gateway::{DefenseConfig, Gateway};
use augmix_core::phash::{compute_phash, duplicate_stats, HashIndex};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "augmix", version, about = "Membership-inference defense for decentralized federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat JSON experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides: `--<key> <value>` or `--<key>=<value>`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &parse_override_args(&self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the network; writes checkpoints, gallery, state and round log.
    Train(ConfigArgs),
    /// Train, calibrate the attacks and report undefended vs defended metrics.
    Attack(ConfigArgs),
    /// Answer one image through the gateway of a trained run.
    Defend {
        /// Image to query (PNG or PPM/PGM).
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Search defense parameters; writes tuner.json and tuner.csv.
    Tune(ConfigArgs),
    /// Duplicate-hash statistics of the training union against the test split.
    HashStats(ConfigArgs),
    /// Run the weight-decay and confidence-clipping sweeps; writes sweep.csv.
    Sweep(ConfigArgs),
    /// Inspect the augmentation operator registry.
    Ops {
        #[arg(long)]
        list: bool,
    },
    /// Write a synthetic 28x28 garment dataset in IDX format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6000)]
        train: usize,
        #[arg(long, default_value_t = 5000)]
        test: usize,
        #[arg(long, default_value_t = 1.0)]
        difficulty: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn defend(image: &PathBuf, cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    let state: RunState = load_json(&dir.join("state.json")).context("loading run state; run `augmix train` first")?;
    let topology = build_topology(state.topology, state.n_participants)?;
    let model = load_checkpoint(&dir.join("checkpoints").join(format!("participant_{:03}.ckpt", state.entry)))?;
    let gallery = load_gallery(&dir.join("gallery"))?;
    let defense: DefenseConfig = match dir.join("defense.json") {
        p if p.exists() && !cfg.tune => load_json(&p)?,
        _ => cfg.defense_config()?,
    };
    let gateway = Gateway::new(&topology, &state.indexes, state.entry, &model, &state.normalizer, &gallery)?;
    let img = read_image(image)?;
    let (prediction, decision) = gateway.answer_query(&img, &defense)?;
    print_json(&json!({ "prediction": prediction, "decision": decision }))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => {
            let cfg = a.load()?;
            run_training(&cfg)?;
            println!("trained; artifacts in {}", cfg.output_dir.display());
        }
        Command::Attack(a) => {
            let cfg = ExperimentConfig { tune: false, ..a.load()? };
            let out = run_experiment(&cfg)?;
            print_json(&json!({ "undefended": out.undefended, "defended": out.defended, "defense": out.defense }))?;
        }
        Command::Defend { image, cfg } => defend(&image, &cfg.load()?)?,
        Command::Tune(a) => {
            let cfg = ExperimentConfig { tune: true, ..a.load()? };
            let out = run_experiment(&cfg)?;
            print_json(out.tuner.as_ref().expect("tuning enabled"))?;
        }
        Command::HashStats(a) => {
            let cfg = a.load()?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let setup = prepare(&cfg)?;
            let union = HashIndex::from_hashes(
                setup.train_pool.images.iter().map(compute_phash).collect::<augmix_core::Result<_>>()?,
                0,
            );
            let test: Vec<_> = setup.test_pool.images.iter().map(compute_phash).collect::<augmix_core::Result<_>>()?;
            let report = duplicate_stats(&union, &test);
            write_duplicates(&cfg.output_dir.join("duplicates.csv"), &report)?;
            print_json(&report)?;
        }
        Command::Sweep(a) => {
            let rows = run_sweeps(&a.load()?)?;
            print_json(&rows)?;
        }
        Command::Ops { list } => {
            if list {
                println!("index,name");
            }
            for (i, op) in REGISTRY.iter().enumerate() {
                if list {
                    println!("{i},{}", op.name());
                }
            }
            if !list {
                println!("{} operators; pass --list to print them", REGISTRY.len());
            }
        }
        Command::Synth { out, train, test, difficulty, seed } => {
            let (tr, te) = generate(&SynthConfig { train, test, difficulty, seed });
            save_idx_dataset(&out, &tr, &te)?;
            println!("wrote {} train and {} test images to {}", tr.len(), te.len(), out.display());
        }
    }
    Ok(())
}
