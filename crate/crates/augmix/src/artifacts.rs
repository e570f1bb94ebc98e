//! On-disk artifacts: model checkpoints, the PCA gallery, per-participant
//! hash indexes and the CSV reports.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use augmix_core::data::Normalizer;
use augmix_core::dfl::TopologyKind;
use augmix_core::mia::AttackReport;
use augmix_core::nn::{ArchId, LayerSpec, ModelParams};
use augmix_core::pca::PcaGallery;
use augmix_core::phash::{DuplicateReport, HashIndex};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_image, write_image};

const CHECKPOINT_MAGIC: &[u8; 8] = b"AUGMIXCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchId,
    layout: Vec<LayerSpec>,
}

/// Layout: magic `AUGMIXCK`, version (u32 LE), header length (u32 LE), JSON
/// header `{arch, layout}`, then `theta` as little-endian f32.
pub fn save_checkpoint(path: &Path, model: &ModelParams) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader { arch: model.arch(), layout: model.layout().to_vec() })?;
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for t in model.theta() {
        w.write_all(&(*t as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .with_context(|| format!("reading {}", path.display()))?;
    let ctx = || format!("checkpoint {}", path.display());
    ensure!(bytes.len() >= 16 && &bytes[..8] == CHECKPOINT_MAGIC, "{}: bad magic", ctx());
    let version = u32::from_le_bytes(bytes[8..12].try_into()?);
    ensure!(version == CHECKPOINT_VERSION, "{}: unsupported version {version}", ctx());
    let header_len = u32::from_le_bytes(bytes[12..16].try_into()?) as usize;
    let body = 16 + header_len;
    ensure!(bytes.len() >= body, "{}: truncated header", ctx());
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body]).with_context(ctx)?;
    ensure!(header.layout == header.arch.layout(), "{}: layout does not match {}", ctx(), header.arch);
    let raw = &bytes[body..];
    ensure!(raw.len() % 4 == 0, "{}: theta is not a whole number of floats", ctx());
    let theta = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    ModelParams::from_theta(header.arch, theta).with_context(ctx)
}

const GALLERY_MANIFEST: &str = "manifest.json";

/// One PNG per class plus `manifest.json` mapping class id to file name.
/// The gallery must already be 8-bit quantized for the round trip to be
/// exact.
pub fn save_gallery(dir: &Path, gallery: &PcaGallery) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = serde_json::Map::new();
    for (class, img) in gallery.images().iter().enumerate() {
        let name = format!("class_{class:03}.png");
        write_image(&dir.join(&name), img)?;
        manifest.insert(class.to_string(), name.into());
    }
    fs::write(dir.join(GALLERY_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_gallery(dir: &Path) -> Result<PcaGallery> {
    let path = dir.join(GALLERY_MANIFEST);
    let manifest: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
    let mut entries = manifest
        .iter()
        .map(|(k, v)| {
            let class: usize = k.parse().with_context(|| format!("bad class id '{k}' in manifest"))?;
            let file = v.as_str().with_context(|| format!("class {k} has no file name"))?;
            Ok((class, file.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    for (i, (class, _)) in entries.iter().enumerate() {
        if *class != i {
            bail!("gallery manifest is missing class {i}");
        }
    }
    let images = entries
        .iter()
        .map(|(_, f)| read_image(&dir.join(f)).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(PcaGallery::from_images(images)?)
}

/// Everything `defend` needs besides checkpoints and the gallery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunState {
    pub topology: TopologyKind,
    pub n_participants: usize,
    pub entry: usize,
    pub normalizer: Normalizer,
    pub indexes: Vec<HashIndex>,
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Fixed-precision float formatting so reruns are byte-identical.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub const REPORT_HEADER: [&str; 9] = ["dataset", "topology", "defense", "acc1", "acc2", "binary", "m1", "m2", "m3"];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub topology: String,
    pub defense: String,
    pub report: AttackReport,
}

impl ReportRow {
    fn fields(&self) -> Vec<String> {
        let r = &self.report;
        let mut v = vec![self.dataset.clone(), self.topology.clone(), self.defense.clone()];
        v.extend([r.acc_train, r.acc_test, r.f1_binary, r.f1_correctness, r.f1_entropy, r.f1_mentropy].map(fmt_f));
        v
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// `multiplicity,count` rows, then the summary line `test_hits,test_total`
/// and its values.
pub fn write_duplicates(path: &Path, report: &DuplicateReport) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["multiplicity", "count"])?;
    for (m, c) in &report.multiplicities {
        w.write_record([m.to_string(), c.to_string()])?;
    }
    w.write_record(["test_hits", "test_total"])?;
    w.write_record([report.test_hits.to_string(), report.test_total.to_string()])?;
    w.flush()?;
    Ok(())
}

pub fn read_duplicates(path: &Path) -> Result<DuplicateReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let lines: Vec<&str> = text.lines().collect();
    ensure!(lines.first() == Some(&"multiplicity,count"), "{}: bad header", path.display());
    let split = lines
        .iter()
        .position(|l| *l == "test_hits,test_total")
        .with_context(|| format!("{}: missing summary line", path.display()))?;
    let pair = |l: &str| -> Result<(usize, usize)> {
        let (a, b) = l.split_once(',').with_context(|| format!("bad row '{l}'"))?;
        Ok((a.parse()?, b.parse()?))
    };
    let multiplicities = lines[1..split].iter().map(|l| pair(l)).collect::<Result<Vec<_>>>()?;
    let (test_hits, test_total) = pair(lines.get(split + 1).context("missing summary values")?)?;
    Ok(DuplicateReport { multiplicities, test_hits, test_total })
}

pub const ROUND_LOG_HEADER: [&str; 4] = ["round", "participant", "train_acc", "test_acc"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub participant: usize,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Streams the per-round log; rows are flushed as they arrive.
pub struct RoundLog {
    writer: csv::Writer<File>,
}

impl RoundLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        writer.write_record(ROUND_LOG_HEADER)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, r: &RoundRecord) -> Result<()> {
        self.writer.write_record([
            (r.round + 1).to_string(),
            r.participant.to_string(),
            fmt_f(r.train_acc),
            fmt_f(r.test_acc),
        ])?;
        self.writer.flush()?;
        Ok(())
    }
}
