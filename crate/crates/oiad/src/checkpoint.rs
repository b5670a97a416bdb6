//! Versioned binary model checkpoints.
//!
//! Layout: magic, u32 version, a TOML metadata header (architecture,
//! training setup, counters), then every parameter block in declaration
//! order as little-endian f32 — model blocks first, then the two Adam
//! optimizers' moments — and a trailer magic that catches truncation.
//! Loading an f32 state back is bit-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use oiad_core::nn::{ArchConfig, DetectorVae};
use oiad_core::objective::Hyper;
use oiad_core::tensor::Tensor;
use oiad_core::train::{Adam, DatasetId, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"OIADCKP1";
const TRAILER: &[u8; 8] = b"OIADEND\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version mismatch: file has {got}, supported {supported}")]
    VersionMismatch { got: u32, supported: u32 },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn corrupt(path: &Path, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Everything needed to rebuild the model and continue training.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub dataset: String,
    pub normal_class: u8,
    pub seed: u64,
    pub latent_dim: usize,
    pub channels: usize,
    pub native_h: usize,
    pub native_w: usize,
    pub model_h: usize,
    pub model_w: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub disc_hidden: usize,
    pub disc_depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_vae: f64,
    pub lr_disc: f64,
    pub gamma: f64,
    pub eta: f64,
    pub lambda_lkd: f64,
    pub learn_precisions: bool,
    pub step: u64,
    pub epoch: u32,
}

impl CheckpointMeta {
    pub fn new(config: &TrainConfig, arch: &ArchConfig, step: u64, epoch: u32) -> Self {
        CheckpointMeta {
            dataset: config.dataset.name().to_string(),
            normal_class: config.normal_class,
            seed: config.seed,
            latent_dim: arch.latent_dim,
            channels: arch.channels,
            native_h: arch.native_hw.0,
            native_w: arch.native_hw.1,
            model_h: arch.model_hw.0,
            model_w: arch.model_hw.1,
            enc_hidden: arch.enc_hidden,
            dec_hidden: arch.dec_hidden,
            disc_hidden: arch.disc_hidden,
            disc_depth: arch.disc_depth,
            epochs: config.epochs,
            batch_size: config.batch_size,
            lr_vae: config.lr_vae,
            lr_disc: config.lr_disc,
            gamma: config.hyper.gamma,
            eta: config.hyper.eta,
            lambda_lkd: config.hyper.lambda_lkd,
            learn_precisions: config.learn_precisions,
            step,
            epoch,
        }
    }

    pub fn dataset_id(&self) -> Option<DatasetId> {
        match self.dataset.as_str() {
            "mnist" => Some(DatasetId::Mnist),
            "fmnist" => Some(DatasetId::Fmnist),
            "cifar10" => Some(DatasetId::Cifar10),
            _ => None,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            channels: self.channels,
            native_hw: (self.native_h, self.native_w),
            model_hw: (self.model_h, self.model_w),
            latent_dim: self.latent_dim,
            enc_hidden: self.enc_hidden,
            dec_hidden: self.dec_hidden,
            disc_hidden: self.disc_hidden,
            disc_depth: self.disc_depth,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_vae: self.lr_vae,
            lr_disc: self.lr_disc,
            hyper: Hyper {
                gamma: self.gamma,
                eta: self.eta,
                lambda_lkd: self.lambda_lkd,
            },
            seed: self.seed,
            latent_dim: self.latent_dim,
            dataset: self.dataset_id().unwrap_or(DatasetId::Mnist),
            normal_class: self.normal_class,
            learn_precisions: self.learn_precisions,
        }
    }
}

fn push_block(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(
                self.path,
                format!("unexpected end of file at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<(String, Tensor<f32>), CheckpointError> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| corrupt(self.path, "non-utf8 block name"))?;
        let ndim = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)))
    }
}

/// Serializes a full training state (model + optimizers + counters).
pub fn save_checkpoint(
    state: &TrainState<f32>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    let meta_toml = toml::to_string(meta).expect("meta serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_toml.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_toml.as_bytes());

    let mut blocks: Vec<(String, Tensor<f32>)> = Vec::new();
    state
        .model
        .visit_blocks(|n, t| blocks.push((n.to_string(), t.clone())));
    for (i, (m, v)) in state.opt_vae.m.iter().zip(&state.opt_vae.v).enumerate() {
        blocks.push((format!("opt_vae.m.{i}"), m.clone()));
        blocks.push((format!("opt_vae.v.{i}"), v.clone()));
    }
    for (i, (m, v)) in state.opt_disc.m.iter().zip(&state.opt_disc.v).enumerate() {
        blocks.push((format!("opt_disc.m.{i}"), m.clone()));
        blocks.push((format!("opt_disc.v.{i}"), v.clone()));
    }
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in &blocks {
        push_block(&mut buf, name, t);
    }
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.opt_vae.t.to_le_bytes());
    buf.extend_from_slice(&state.opt_disc.t.to_le_bytes());
    buf.extend_from_slice(TRAILER);

    let mut f = fs::File::create(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(&buf).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Loads a checkpoint back into a training state.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState<f32>, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            got: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = toml::from_str(
        std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| corrupt(path, "non-utf8 metadata"))?,
    )
    .map_err(|e| corrupt(path, format!("bad metadata: {e}")))?;

    let arch = meta.arch();
    let config = meta.train_config();
    let model = DetectorVae::<f32>::new(arch, meta.seed);
    let mut state = TrainState::from_model(model, &config);

    let block_count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(block_count);
    for _ in 0..block_count {
        blocks.push(r.block()?);
    }
    let mut cursor = 0usize;
    let mut shape_err: Option<String> = None;
    state.model.visit_blocks_mut(|name, t| {
        if shape_err.is_some() {
            return;
        }
        if cursor >= blocks.len() {
            shape_err = Some(format!("missing block {name}"));
            return;
        }
        let (bname, bt) = &blocks[cursor];
        cursor += 1;
        if bname != name || bt.shape() != t.shape() {
            shape_err = Some(format!(
                "block mismatch: expected {name} {:?}, found {bname} {:?}",
                t.shape(),
                bt.shape()
            ));
            return;
        }
        *t = bt.clone();
    });
    if let Some(e) = shape_err {
        return Err(corrupt(path, e));
    }
    let mut fill_opt = |opt: &mut Adam<f32>, prefix: &str| -> Result<(), CheckpointError> {
        for i in 0..opt.m.len() {
            for (slot, kind) in [("m", 0usize), ("v", 1)] {
                if cursor >= blocks.len() {
                    return Err(corrupt(path, format!("missing block {prefix}.{slot}.{i}")));
                }
                let (bname, bt) = &blocks[cursor];
                cursor += 1;
                let expect = format!("{prefix}.{slot}.{i}");
                if *bname != expect {
                    return Err(corrupt(path, format!("expected {expect}, found {bname}")));
                }
                let target = if kind == 0 { &mut opt.m[i] } else { &mut opt.v[i] };
                if bt.shape() != target.shape() {
                    return Err(corrupt(path, format!("optimizer block {expect} shape")));
                }
                *target = bt.clone();
            }
        }
        Ok(())
    };
    fill_opt(&mut state.opt_vae, "opt_vae")?;
    fill_opt(&mut state.opt_disc, "opt_disc")?;
    if cursor != blocks.len() {
        return Err(corrupt(path, "extra parameter blocks"));
    }

    state.step = r.u64()?;
    state.opt_vae.t = r.u64()?;
    state.opt_disc.t = r.u64()?;
    if r.take(8)? != TRAILER {
        return Err(corrupt(path, "missing trailer (truncated?)"));
    }
    Ok((state, meta))
}

/// Short content fingerprint of a checkpoint file, recorded in thresholds
/// and run metadata.
pub fn fingerprint(path: &Path) -> Result<String, CheckpointError> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let hex = format!("{:x}", hasher.finalize());
    Ok(hex[..16].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use oiad_core::nn::ArchConfig;

    fn tiny_state(seed: u64) -> (TrainState<f32>, CheckpointMeta) {
        let mut config = TrainConfig::defaults(DatasetId::Mnist, 3, seed);
        config.latent_dim = 4;
        let arch = ArchConfig::tiny(1, 4);
        let state = TrainState::<f32>::new(arch, &config);
        let meta = CheckpointMeta::new(&config, &arch, 0, 0);
        (state, meta)
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (mut state, meta) = tiny_state(5);
        state.step = 17;
        state.opt_vae.t = 9;
        save_checkpoint(&state, &meta, &path).unwrap();
        let (loaded, lmeta) = load_checkpoint(&path).unwrap();
        assert_eq!(lmeta, meta);
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.opt_vae.t, 9);

        let mut a = Vec::new();
        state.model.visit_blocks(|_, t| a.push(t.clone()));
        let mut b = Vec::new();
        loaded.model.visit_blocks(|_, t| b.push(t.clone()));
        assert_eq!(a, b);

        // Saving the loaded state reproduces the file byte for byte.
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&loaded, &lmeta, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (state, meta) = tiny_state(6);
        save_checkpoint(&state, &meta, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::CorruptFile { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (state, meta) = tiny_state(7);
        save_checkpoint(&state, &meta, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99; // version little-endian low byte
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::VersionMismatch { got: 99, .. })
        ));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let (state, meta) = tiny_state(8);
        save_checkpoint(&state, &meta, &p1).unwrap();
        let (mut state2, meta2) = tiny_state(8);
        state2.model.log_beta.data_mut()[0] = 0.5;
        save_checkpoint(&state2, &meta2, &p2).unwrap();
        assert_ne!(fingerprint(&p1).unwrap(), fingerprint(&p2).unwrap());
        assert_eq!(fingerprint(&p1).unwrap().len(), 16);
    }
}
