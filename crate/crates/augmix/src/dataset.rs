//! Dataset ingestion (IDX ubyte files and PNG/PPM class directories) and
//! IID partitioning.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use augmix_core::data::{LabeledDataset, Split};
use augmix_core::{seed, Image};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

const IDX_UBYTE: u8 = 0x08;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Decode { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: augmix_core::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, reason: impl Into<String>) -> IngestError {
    IngestError::Format { path: path.to_path_buf(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.
    Idx,
    /// `train/<class>/*.png|ppm` and `test/<class>/*.png|ppm`.
    ImageDir,
}

/// A parsed IDX ubyte tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn read_idx(path: &Path) -> Result<IdxArray, IngestError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    parse_idx(&bytes).map_err(|reason| format_err(path, reason))
}

/// Magic is `0x00 0x00 type ndim`, then `ndim` big-endian u32 sizes.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, String> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err("bad IDX magic".into());
    }
    if bytes[2] != IDX_UBYTE {
        return Err(format!("unsupported IDX element type 0x{:02x}", bytes[2]));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err("truncated IDX header".into());
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len: usize = dims.iter().product();
    if bytes.len() < header + len {
        return Err(format!("truncated IDX body: expected {len} bytes, found {}", bytes.len() - header));
    }
    Ok(IdxArray { dims, data: bytes[header..header + len].to_vec() })
}

pub fn write_idx(path: &Path, dims: &[usize], data: &[u8]) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut header = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for d in dims {
        header.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    w.write_all(&header).and_then(|_| w.write_all(data)).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Loads an IDX image file (`N×H×W` or `N×H×W×C`) with its label file.
/// `n_cls = None` infers `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path, n_cls: Option<usize>, split: Split) -> Result<LabeledDataset, IngestError> {
    let imgs = read_idx(images)?;
    let labs = read_idx(labels)?;
    let (n, h, w, c) = match imgs.dims[..] {
        [n, h, w] => (n, h, w, 1),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(format_err(images, format!("expected 3 or 4 image dimensions, got {:?}", imgs.dims))),
    };
    if labs.dims != [n] {
        return Err(format_err(labels, format!("expected {n} labels, header says {:?}", labs.dims)));
    }
    let labels_vec: Vec<usize> = labs.data.iter().map(|&l| l as usize).collect();
    let n_cls = n_cls.unwrap_or_else(|| labels_vec.iter().max().map_or(0, |m| m + 1));
    let stride = h * w * c;
    let images_vec = (0..n)
        .map(|i| Image::from_bytes(h, w, c, &imgs.data[i * stride..(i + 1) * stride]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| IngestError::Invalid { path: images.to_path_buf(), source })?;
    LabeledDataset::new(images_vec, labels_vec, n_cls, split)
        .map_err(|source| IngestError::Invalid { path: labels.to_path_buf(), source })
}

pub fn save_idx(ds: &LabeledDataset, images: &Path, labels: &Path) -> Result<(), IngestError> {
    let (h, w, c) = ds.image_shape().unwrap_or((0, 0, 1));
    let dims = if c == 1 { vec![ds.len(), h, w] } else { vec![ds.len(), h, w, c] };
    let bytes: Vec<u8> = ds.images.iter().flat_map(Image::to_bytes).collect();
    write_idx(images, &dims, &bytes)?;
    let labs: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    write_idx(labels, &[ds.len()], &labs)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

/// Decodes one image file: grayscale sources keep one channel, everything
/// else becomes RGB.
pub fn read_image(path: &Path) -> Result<Image, IngestError> {
    let decoded = image::open(path).map_err(|source| IngestError::Decode { path: path.to_path_buf(), source })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let img = if decoded.color().channel_count() <= 2 {
        Image::from_bytes(h, w, 1, decoded.to_luma8().as_raw())
    } else {
        Image::from_bytes(h, w, 3, decoded.to_rgb8().as_raw())
    };
    img.map_err(|source| IngestError::Invalid { path: path.to_path_buf(), source })
}

pub fn write_image(path: &Path, img: &Image) -> Result<(), IngestError> {
    let (h, w, c) = img.shape();
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer(path, &img.to_bytes(), w as u32, h as u32, color)
        .map_err(|source| IngestError::Decode { path: path.to_path_buf(), source })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    Ok(entries)
}

/// One subdirectory per class; class ids follow the lexicographic order of
/// the directory names, files are read in lexicographic order.
pub fn load_image_dir(dir: &Path, split: Split) -> Result<(LabeledDataset, Vec<String>), IngestError> {
    let classes: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(format_err(dir, "no class directories"));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        for file in sorted_entries(class_dir)?.into_iter().filter(|p| is_image_file(p)) {
            images.push(read_image(&file)?);
            labels.push(label);
        }
    }
    let names = classes
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let ds = LabeledDataset::new(images, labels, classes.len(), split)
        .map_err(|source| IngestError::Invalid { path: dir.to_path_buf(), source })?;
    Ok((ds, names))
}

/// Train and test splits of a dataset root.
pub fn load_dataset(root: &Path, format: DatasetFormat) -> Result<(LabeledDataset, LabeledDataset), IngestError> {
    match format {
        DatasetFormat::Idx => {
            let train_i = root.join("train-images-idx3-ubyte");
            let train_l = root.join("train-labels-idx1-ubyte");
            let test_i = root.join("t10k-images-idx3-ubyte");
            let test_l = root.join("t10k-labels-idx1-ubyte");
            let max_label = [&train_l, &test_l]
                .iter()
                .map(|p| read_idx(p).map(|a| a.data.iter().copied().max().unwrap_or(0)))
                .collect::<Result<Vec<_>, _>>()?;
            let n_cls = *max_label.iter().max().unwrap_or(&0) as usize + 1;
            Ok((
                load_idx(&train_i, &train_l, Some(n_cls), Split::Train)?,
                load_idx(&test_i, &test_l, Some(n_cls), Split::Test)?,
            ))
        }
        DatasetFormat::ImageDir => {
            let (train, names) = load_image_dir(&root.join("train"), Split::Train)?;
            let (test, test_names) = load_image_dir(&root.join("test"), Split::Test)?;
            if names != test_names {
                return Err(format_err(root, "train and test class directories differ"));
            }
            Ok((train, test))
        }
    }
}

/// Writes both splits in the IDX layout expected by [`load_dataset`].
pub fn save_idx_dataset(root: &Path, train: &LabeledDataset, test: &LabeledDataset) -> Result<(), IngestError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    save_idx(train, &root.join("train-images-idx3-ubyte"), &root.join("train-labels-idx1-ubyte"))?;
    save_idx(test, &root.join("t10k-images-idx3-ubyte"), &root.join("t10k-labels-idx1-ubyte"))
}

/// Per class: seeded shuffle, then round-robin deal. Every partition gets
/// each class's samples to within one.
pub fn partition_iid(ds: &LabeledDataset, n: usize, seed: u64) -> Vec<LabeledDataset> {
    assert!(n >= 1, "partition count must be positive");
    let mut rng = seed::rng(seed);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n];
    for class in 0..ds.n_cls {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        members.shuffle(&mut rng);
        for (k, idx) in members.into_iter().enumerate() {
            buckets[k % n].push(idx);
        }
    }
    buckets.iter().map(|b| ds.select(b)).collect()
}

/// A seeded random subset of `limit` samples (all of them when `limit` is 0
/// or at least the dataset size), kept in original order.
pub fn subsample(ds: &LabeledDataset, limit: usize, seed: u64) -> LabeledDataset {
    if limit == 0 || limit >= ds.len() {
        return ds.clone();
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut seed::rng(seed));
    idx.truncate(limit);
    idx.sort_unstable();
    ds.select(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, n_cls: usize) -> LabeledDataset {
        let images = (0..n).map(|i| Image::filled(3, 2, 1, (i % 256) as f64 / 255.0).unwrap()).collect();
        LabeledDataset::new(images, (0..n).map(|i| i % n_cls).collect(), n_cls, Split::Train).unwrap()
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(10, 3);
        let (i, l) = (dir.path().join("i"), dir.path().join("l"));
        save_idx(&ds, &i, &l).unwrap();
        let back = load_idx(&i, &l, None, Split::Train).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.n_cls, 3);
        assert!(matches!(load_idx(&i, &l, Some(2), Split::Train), Err(IngestError::Invalid { .. })));
    }

    #[test]
    fn idx_rejects_bad_files() {
        assert!(parse_idx(&[1, 0, 8, 1]).is_err());
        assert!(parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 1, 0, 0, 0, 0]).is_err());
        assert!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 5, 1, 2]).is_err());
        let ok = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 9]).unwrap();
        assert_eq!(ok, IdxArray { dims: vec![2], data: vec![7, 9] });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken");
        fs::write(&path, [0, 0, 8, 1, 0, 0, 0, 5, 1]).unwrap();
        let err = read_idx(&path).unwrap_err().to_string();
        assert!(err.contains("broken"), "{err}");
    }

    #[test]
    fn image_dir_loads_classes_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for (ci, class) in ["cat", "bird"].iter().enumerate() {
            let d = dir.path().join(class);
            fs::create_dir_all(&d).unwrap();
            for k in 0..3 {
                let img = Image::filled(4, 5, 3, (ci * 3 + k) as f64 / 10.0).unwrap().quantized();
                let ext = if k == 0 { "ppm" } else { "png" };
                write_image(&d.join(format!("{k}.{ext}")), &img).unwrap();
            }
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let (ds, names) = load_image_dir(dir.path(), Split::Train).unwrap();
        assert_eq!(names, vec!["bird", "cat"]);
        assert_eq!(ds.n_cls, 2);
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(ds.image_shape(), Some((4, 5, 3)));
        assert_eq!(ds.images[3], Image::filled(4, 5, 3, 0.0).unwrap().quantized());
    }

    #[test]
    fn unreadable_image_names_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.png"), b"not a png").unwrap();
        let err = load_image_dir(dir.path(), Split::Train).unwrap_err().to_string();
        assert!(err.contains("x.png"), "{err}");
    }

    #[test]
    fn partition_cases() {
        let ds = toy(400, 4);
        let parts = partition_iid(&ds, 4, 7);
        for p in &parts {
            assert_eq!(p.class_counts(), vec![25; 4]);
        }
        let mut all: Vec<u8> = parts.iter().flat_map(|p| p.images.iter().map(|i| i.to_bytes()[0])).collect();
        let mut orig: Vec<u8> = ds.images.iter().map(|i| i.to_bytes()[0]).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
        let one = partition_iid(&ds, 1, 7);
        assert_eq!(one[0].len(), 400);
        let uneven = partition_iid(&toy(10, 1), 3, 0);
        let sizes: Vec<usize> = uneven.iter().map(LabeledDataset::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_eq!(partition_iid(&ds, 4, 7)[2], parts[2]);
    }
}
