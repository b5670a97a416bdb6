//! Dataset ingestion and experiment splits.
//!
//! MNIST/FMNIST arrive as IDX files (big-endian magic + dims, one byte per
//! pixel), CIFAR-10 as 3073-byte records (label byte + three 1024-byte
//! color planes). Pixels are scaled to [0,1]. Splits are class-conditional:
//! 70% of the normal class trains the model, 20% becomes CLE (held-out
//! normals, label 0), 10% VAL (threshold calibration), and ANO draws an
//! equal number of anomalies uniformly from the other classes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use oiad_core::rng::substream;
use oiad_core::tensor::Tensor;
use oiad_core::train::DatasetId;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic in {path}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        got: u32,
    },

    #[error("truncated file {path}: needed {needed} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("batch has no labels; class splits need labeled data")]
    MissingLabels,

    #[error("class {class} not present in the dataset")]
    NormalClassAbsent { class: u8 },

    #[error("not enough non-normal samples: need {need}, have {have}")]
    InsufficientSamples { need: usize, have: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A labeled (or unlabeled) batch of images in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub data: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
}

impl ImageBatch {
    pub fn new(data: Tensor<f32>, labels: Option<Vec<u8>>) -> Result<Self, DataError> {
        let shape = data.shape();
        if shape.len() != 4 {
            return Err(DataError::InvalidBatch(format!(
                "expected rank-4 data, got shape {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if n == 0 {
            return Err(DataError::InvalidBatch("empty batch".into()));
        }
        if c != 1 && c != 3 {
            return Err(DataError::InvalidBatch(format!("channels must be 1 or 3, got {c}")));
        }
        if !data.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(DataError::InvalidBatch("pixel outside [0,1]".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(DataError::CountMismatch {
                    images: n,
                    labels: l.len(),
                });
            }
        }
        Ok(ImageBatch { data, labels })
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch by positional indices, carrying labels along.
    pub fn gather(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch {
            data: self.data.gather_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Single image as a `[1, C, H, W]` batch.
    pub fn image(&self, i: usize) -> ImageBatch {
        self.gather(&[i])
    }
}

fn read_u32_be(bytes: &[u8], off: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::TruncatedFile {
            path: path.to_path_buf(),
            needed: off + 4,
            found: bytes.len(),
        })
}

/// Loads an IDX image/label file pair, scaling bytes to `[0,1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageBatch, DataError> {
    let img_bytes = fs::read(images_path).map_err(io_err(images_path))?;
    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let h = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let w = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let needed = 16 + n * h * w;
    if img_bytes.len() < needed {
        return Err(DataError::TruncatedFile {
            path: images_path.to_path_buf(),
            needed,
            found: img_bytes.len(),
        });
    }

    let lab_bytes = fs::read(labels_path).map_err(io_err(labels_path))?;
    let lmagic = read_u32_be(&lab_bytes, 0, labels_path)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABEL_MAGIC,
            got: lmagic,
        });
    }
    let ln = read_u32_be(&lab_bytes, 4, labels_path)? as usize;
    if lab_bytes.len() < 8 + ln {
        return Err(DataError::TruncatedFile {
            path: labels_path.to_path_buf(),
            needed: 8 + ln,
            found: lab_bytes.len(),
        });
    }
    if ln != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: ln,
        });
    }

    let data: Vec<f32> = img_bytes[16..needed]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let labels = lab_bytes[8..8 + ln].to_vec();
    ImageBatch::new(Tensor::from_vec(&[n, 1, h, w], data), Some(labels))
}

/// Loads an IDX image file without labels.
pub fn load_idx_images(images_path: &Path) -> Result<ImageBatch, DataError> {
    let img_bytes = fs::read(images_path).map_err(io_err(images_path))?;
    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let h = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let w = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let needed = 16 + n * h * w;
    if img_bytes.len() < needed {
        return Err(DataError::TruncatedFile {
            path: images_path.to_path_buf(),
            needed,
            found: img_bytes.len(),
        });
    }
    let data: Vec<f32> = img_bytes[16..needed]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    ImageBatch::new(Tensor::from_vec(&[n, 1, h, w], data), None)
}

/// Writes a single-channel batch back to IDX bytes (images + labels files).
/// Pixels are rounded to the nearest byte, so `load(save(b))` round-trips
/// exactly for byte-scaled data.
pub fn save_idx(
    batch: &ImageBatch,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    let shape = batch.data.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c != 1 {
        return Err(DataError::InvalidBatch(
            "IDX export supports single-channel batches".into(),
        ));
    }
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend(
        batch
            .data
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut f = fs::File::create(images_path).map_err(io_err(images_path))?;
    f.write_all(&img).map_err(io_err(images_path))?;

    let labels = match &batch.labels {
        Some(l) => l.clone(),
        None => vec![0u8; n],
    };
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(&labels);
    let mut f = fs::File::create(labels_path).map_err(io_err(labels_path))?;
    f.write_all(&lab).map_err(io_err(labels_path))?;
    Ok(())
}

/// Loads CIFAR-10 binary batches (label byte + RGB planes per record).
pub fn load_cifar10(batch_paths: &[PathBuf]) -> Result<ImageBatch, DataError> {
    let mut pixels: Vec<f32> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for path in batch_paths {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(io_err(path))?
            .read_to_end(&mut bytes)
            .map_err(io_err(path))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::TruncatedFile {
                path: path.clone(),
                needed: CIFAR_RECORD.max(bytes.len().next_multiple_of(CIFAR_RECORD)),
                found: bytes.len(),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    ImageBatch::new(
        Tensor::from_vec(&[n, 3, 32, 32], pixels),
        Some(labels),
    )
}

/// Split fractions and seed. Fractions must sum to 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub normal_class: u8,
    pub train_frac: f64,
    pub cle_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(normal_class: u8, seed: u64) -> Self {
        SplitSpec {
            normal_class,
            train_frac: 0.70,
            cle_frac: 0.20,
            val_frac: 0.10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let sum = self.train_frac + self.cle_frac + self.val_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidBatch(format!(
                "split fractions sum to {sum}, expected 1.0"
            )));
        }
        Ok(())
    }
}

/// The four working sets: train/CLE/VAL are pure normal-class samples,
/// ANO is an equal-sized draw from the other classes.
pub struct ExperimentSplits {
    pub train: ImageBatch,
    pub cle: ImageBatch,
    pub ano: ImageBatch,
    pub val: ImageBatch,
}

/// Original-dataset indices behind each split, for the manifest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub cle: Vec<usize>,
    pub val: Vec<usize>,
    pub ano: Vec<usize>,
}

fn seeded_shuffle(idx: &mut [usize], seed: u64, purpose: &str) {
    let mut rng = substream(seed, purpose, 0);
    for i in (1..idx.len()).rev() {
        let k = rng.random_range(0..=i);
        idx.swap(i, k);
    }
}

/// Class-conditional splits. `max_normals` (if nonzero) caps the normal
/// pool after shuffling, for reduced-scale runs; fractions then apply to
/// the capped pool.
pub fn make_splits(
    full: &ImageBatch,
    spec: &SplitSpec,
    max_normals: usize,
) -> Result<(ExperimentSplits, SplitIndices), DataError> {
    spec.validate()?;
    let labels = full.labels.as_ref().ok_or(DataError::MissingLabels)?;

    let mut normal_idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == spec.normal_class)
        .map(|(i, _)| i)
        .collect();
    if normal_idx.is_empty() {
        return Err(DataError::NormalClassAbsent {
            class: spec.normal_class,
        });
    }
    seeded_shuffle(&mut normal_idx, spec.seed, "split-normal");
    if max_normals > 0 {
        normal_idx.truncate(max_normals);
    }
    let n = normal_idx.len();
    let n_train = (spec.train_frac * n as f64).floor() as usize;
    let n_cle = (spec.cle_frac * n as f64).floor() as usize;
    let train_idx = normal_idx[..n_train].to_vec();
    let cle_idx = normal_idx[n_train..n_train + n_cle].to_vec();
    let val_idx = normal_idx[n_train + n_cle..].to_vec();

    let mut other_idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != spec.normal_class)
        .map(|(i, _)| i)
        .collect();
    if other_idx.len() < n_cle {
        return Err(DataError::InsufficientSamples {
            need: n_cle,
            have: other_idx.len(),
        });
    }
    seeded_shuffle(&mut other_idx, spec.seed, "split-ano");
    let ano_idx = other_idx[..n_cle].to_vec();

    let splits = ExperimentSplits {
        train: full.gather(&train_idx),
        cle: full.gather(&cle_idx),
        ano: full.gather(&ano_idx),
        val: full.gather(&val_idx),
    };
    Ok((
        splits,
        SplitIndices {
            train: train_idx,
            cle: cle_idx,
            val: val_idx,
            ano: ano_idx,
        },
    ))
}

/// Resolves the canonical file set of a dataset under `data_dir`.
pub fn dataset_files(dataset: DatasetId, data_dir: &Path) -> Vec<PathBuf> {
    match dataset {
        DatasetId::Mnist => vec![
            data_dir.join("mnist/train-images-idx3-ubyte"),
            data_dir.join("mnist/train-labels-idx1-ubyte"),
        ],
        DatasetId::Fmnist => vec![
            data_dir.join("fmnist/train-images-idx3-ubyte"),
            data_dir.join("fmnist/train-labels-idx1-ubyte"),
        ],
        DatasetId::Cifar10 => (1..=5)
            .map(|i| data_dir.join(format!("cifar10/data_batch_{i}.bin")))
            .collect(),
    }
}

/// Same, for the held-out test partition.
pub fn dataset_test_files(dataset: DatasetId, data_dir: &Path) -> Vec<PathBuf> {
    match dataset {
        DatasetId::Mnist => vec![
            data_dir.join("mnist/t10k-images-idx3-ubyte"),
            data_dir.join("mnist/t10k-labels-idx1-ubyte"),
        ],
        DatasetId::Fmnist => vec![
            data_dir.join("fmnist/t10k-images-idx3-ubyte"),
            data_dir.join("fmnist/t10k-labels-idx1-ubyte"),
        ],
        DatasetId::Cifar10 => vec![data_dir.join("cifar10/test_batch.bin")],
    }
}

/// Loads the training partition of a dataset.
pub fn load_dataset(dataset: DatasetId, data_dir: &Path) -> Result<ImageBatch, DataError> {
    let files = dataset_files(dataset, data_dir);
    match dataset {
        DatasetId::Mnist | DatasetId::Fmnist => load_idx(&files[0], &files[1]),
        DatasetId::Cifar10 => load_cifar10(&files),
    }
}

/// Loads the test partition of a dataset.
pub fn load_test_dataset(dataset: DatasetId, data_dir: &Path) -> Result<ImageBatch, DataError> {
    let files = dataset_test_files(dataset, data_dir);
    match dataset {
        DatasetId::Mnist | DatasetId::Fmnist => load_idx(&files[0], &files[1]),
        DatasetId::Cifar10 => load_cifar10(&files),
    }
}

/// Reproducibility manifest written alongside each run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub normal_class: u8,
    pub seed: u64,
    pub train_frac: f64,
    pub cle_frac: f64,
    pub val_frac: f64,
    pub max_normals: usize,
    /// sha256 of every dataset file consumed.
    pub checksums: Vec<(String, String)>,
    pub indices: SplitIndices,
}

pub fn sha256_hex(path: &Path) -> Result<String, DataError> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| DataError::InvalidBatch(e.to_string()))?;
    fs::write(path, json).map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_idx_pair(dir: &Path, n: usize, h: usize, w: usize, pix: impl Fn(usize) -> u8, lab: impl Fn(usize) -> u8) -> (PathBuf, PathBuf) {
        let img_path = dir.join("images-idx3-ubyte");
        let lab_path = dir.join("labels-idx1-ubyte");
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&(h as u32).to_be_bytes());
        img.extend_from_slice(&(w as u32).to_be_bytes());
        for i in 0..n * h * w {
            img.push(pix(i));
        }
        fs::File::create(&img_path).unwrap().write_all(&img).unwrap();
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            lb.push(lab(i));
        }
        fs::File::create(&lab_path).unwrap().write_all(&lb).unwrap();
        (img_path, lab_path)
    }

    #[test]
    fn idx_load_scales_bytes_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 2, 3, 3, |i| if i == 0 { 255 } else { 0 }, |i| i as u8);
        let b = load_idx(&ip, &lp).unwrap();
        assert_eq!(b.data.shape(), [2, 1, 3, 3]);
        assert_eq!(b.data.data()[0], 1.0);
        assert_eq!(b.data.data()[1], 0.0);
        assert_eq!(b.labels.as_ref().unwrap(), &vec![0, 1]);
    }

    #[test]
    fn idx_bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 1, 2, 2, |_| 0, |_| 0);
        // Corrupt the image magic.
        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        fs::write(&ip, &bytes).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn idx_truncation_and_count_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 3, 2, 2, |_| 7, |_| 1);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::TruncatedFile { .. })
        ));

        // Fresh pair with mismatching label count.
        let (ip2, lp2) = write_idx_pair(dir.path(), 3, 2, 2, |_| 7, |_| 1);
        let mut lb = fs::read(&lp2).unwrap();
        lb[7] = 2; // claim 2 labels
        lb.truncate(8 + 2);
        fs::write(&lp2, &lb).unwrap();
        assert!(matches!(
            load_idx(&ip2, &lp2),
            Err(DataError::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn idx_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 5, 4, 6, |i| (i * 37 % 256) as u8, |i| (i % 10) as u8);
        let b = load_idx(&ip, &lp).unwrap();
        let ip2 = dir.path().join("rt-images");
        let lp2 = dir.path().join("rt-labels");
        save_idx(&b, &ip2, &lp2).unwrap();
        let b2 = load_idx(&ip2, &lp2).unwrap();
        assert_eq!(b, b2);
        // Byte-identical payloads as well.
        assert_eq!(fs::read(&ip).unwrap(), fs::read(&ip2).unwrap());
    }

    #[test]
    fn cifar_record_parsing_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut rec = vec![7u8]; // label
        rec.extend(std::iter::repeat(128u8).take(3072));
        fs::write(&path, &rec).unwrap();
        let b = load_cifar10(&[path]).unwrap();
        assert_eq!(b.data.shape(), [1, 3, 32, 32]);
        assert!(b.data.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-7));
        assert_eq!(b.labels.as_ref().unwrap(), &vec![7]);
    }

    #[test]
    fn cifar_rejects_empty_and_ragged_files() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.bin");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(
            load_cifar10(&[empty]),
            Err(DataError::TruncatedFile { .. })
        ));
        let ragged = dir.path().join("ragged.bin");
        fs::write(&ragged, vec![0u8; 3072]).unwrap();
        assert!(matches!(
            load_cifar10(&[ragged]),
            Err(DataError::TruncatedFile { .. })
        ));
    }

    fn toy_batch(per_class: usize, classes: u8) -> ImageBatch {
        let n = per_class * classes as usize;
        let mut data = vec![0.0f32; n * 4];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0;
        }
        let labels: Vec<u8> = (0..n).map(|i| (i % classes as usize) as u8).collect();
        ImageBatch::new(Tensor::from_vec(&[n, 1, 2, 2], data), Some(labels)).unwrap()
    }

    #[test]
    fn splits_partition_the_normal_pool_exactly() {
        let full = toy_batch(50, 4);
        let spec = SplitSpec::new(2, 99);
        let (splits, idx) = make_splits(&full, &spec, 0).unwrap();
        assert_eq!(splits.train.len(), 35); // floor(0.7 * 50)
        assert_eq!(splits.cle.len(), 10); // floor(0.2 * 50)
        assert_eq!(splits.val.len(), 5); // remainder
        assert_eq!(splits.ano.len(), splits.cle.len());

        // Disjoint cover of the sampled pool.
        let mut all: Vec<usize> = idx
            .train
            .iter()
            .chain(&idx.cle)
            .chain(&idx.val)
            .copied()
            .collect();
        let before = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(before, all.len());
        assert_eq!(all.len(), 50);

        // Label purity.
        for b in [&splits.train, &splits.cle, &splits.val] {
            assert!(b.labels.as_ref().unwrap().iter().all(|&l| l == 2));
        }
        assert!(splits.ano.labels.as_ref().unwrap().iter().all(|&l| l != 2));
    }

    #[test]
    fn splits_are_deterministic_and_cap_applies() {
        let full = toy_batch(50, 4);
        let spec = SplitSpec::new(1, 7);
        let (_, a) = make_splits(&full, &spec, 0).unwrap();
        let (_, b) = make_splits(&full, &spec, 0).unwrap();
        assert_eq!(a, b);

        let (capped, ci) = make_splits(&full, &spec, 20).unwrap();
        assert_eq!(ci.train.len() + ci.cle.len() + ci.val.len(), 20);
        assert_eq!(capped.train.len(), 14); // floor(0.7 * 20)
    }

    #[test]
    fn single_class_dataset_cannot_build_ano() {
        let full = toy_batch(50, 1);
        let spec = SplitSpec::new(0, 1);
        assert!(matches!(
            make_splits(&full, &spec, 0),
            Err(DataError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn missing_labels_and_absent_class_are_rejected() {
        let unlabeled =
            ImageBatch::new(Tensor::from_vec(&[2, 1, 2, 2], vec![0.0; 8]), None).unwrap();
        assert!(matches!(
            make_splits(&unlabeled, &SplitSpec::new(0, 1), 0),
            Err(DataError::MissingLabels)
        ));
        let full = toy_batch(10, 2);
        assert!(matches!(
            make_splits(&full, &SplitSpec::new(9, 1), 0),
            Err(DataError::NormalClassAbsent { class: 9 })
        ));
    }

    #[test]
    fn batch_invariants_are_enforced() {
        assert!(ImageBatch::new(Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 0.0]), None).is_err());
        assert!(ImageBatch::new(Tensor::from_vec(&[1, 1, 1, 1], vec![1.5]), None).is_err());
        assert!(ImageBatch::new(Tensor::from_vec(&[1, 1, 1, 1], vec![0.5]), Some(vec![1, 2])).is_err());
    }
}
