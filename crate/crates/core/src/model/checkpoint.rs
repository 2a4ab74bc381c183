//! Checkpoint files.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! b"DCTAUCKP"            magic
//! u32                    format version
//! u32                    block count
//! per block:  u32 name length, name bytes (UTF-8), u32 rank, u64 per dim
//! per block:  f64 values, row-major, in manifest order
//! ```
//!
//! Blocks are the model parameters followed by the moment buffers of both
//! optimizers. A JSON sidecar next to the file (`<path>.json`) records the
//! config, seed, progress, optimizer step counts and loss history.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::optim::OptimizerState;
use crate::model::train::{EpochRecord, Progress, TrainState};
use crate::model::ParamGroup;

pub const MAGIC: &[u8; 8] = b"DCTAUCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub progress: Progress,
    pub contrastive_steps: u64,
    pub classifier_steps: u64,
    pub parameter_count: usize,
    pub history: Vec<EpochRecord>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

struct Block {
    name: String,
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn collect_blocks(state: &TrainState) -> Vec<Block> {
    let named = state.params.named_blocks();
    let mut out: Vec<Block> = named
        .iter()
        .map(|(name, dims, v)| Block {
            name: name.clone(),
            dims: dims.clone(),
            values: v.to_vec(),
        })
        .collect();
    for (prefix, opt) in [("contrastive_opt", &state.contrastive_opt), ("classifier_opt", &state.classifier_opt)] {
        for (moment, bufs) in [("first", &opt.first), ("second", &opt.second)] {
            for ((name, dims, _), buf) in named.iter().zip(bufs) {
                out.push(Block {
                    name: format!("{prefix}.{moment}.{name}"),
                    dims: dims.clone(),
                    values: buf.clone(),
                });
            }
        }
    }
    out
}

/// Writes `state` to `path` and its sidecar to `<path>.json`.
pub fn save(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let blocks = collect_blocks(state);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for b in &blocks {
        w.write_all(&(b.name.len() as u32).to_le_bytes())?;
        w.write_all(b.name.as_bytes())?;
        w.write_all(&(b.dims.len() as u32).to_le_bytes())?;
        for &d in &b.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for b in &blocks {
        for v in &b.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        config: cfg.clone(),
        progress: state.progress,
        contrastive_steps: state.contrastive_opt.step,
        classifier_steps: state.classifier_opt.step,
        parameter_count: state.params.parameter_count(),
        history: state.history.clone(),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
    std::fs::write(sidecar_path(path), text + "\n")?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    path: String,
}

impl<R: Read> Reader<R> {
    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| self.bad(format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

/// Reads a checkpoint and its sidecar. Returns the training state and the
/// config it was written with.
pub fn load(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let side_path = sidecar_path(path);
    let side_text = std::fs::read_to_string(&side_path)?;
    let sidecar: Sidecar = serde_json::from_str(&side_text).map_err(|e| Error::Format {
        path: side_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let cfg = sidecar.config.clone();
    cfg.validate()?;

    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        path: path.display().to_string(),
    };
    if &r.bytes::<8>()? != MAGIC {
        return Err(r.bad("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.bad(format!("unsupported format version {version}")));
    }

    let mut state = TrainState::new(&cfg)?;
    state.progress = sidecar.progress;
    state.history = sidecar.history;
    state.contrastive_opt.step = sidecar.contrastive_steps;
    state.classifier_opt.step = sidecar.classifier_steps;
    let expected = collect_blocks(&state);

    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(r.bad(format!("{count} blocks, expected {}", expected.len())));
    }
    for b in &expected {
        let len = r.u32()? as usize;
        if len > 1024 {
            return Err(r.bad("block name too long"));
        }
        let mut name = vec![0u8; len];
        r.inner.read_exact(&mut name).map_err(|e| r.bad(format!("truncated: {e}")))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.bad("block rank too large"));
        }
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != b.name.as_bytes() || dims != b.dims {
            return Err(r.bad(format!(
                "block `{}` {:?} does not match the config's `{}` {:?}",
                String::from_utf8_lossy(&name),
                dims,
                b.name,
                b.dims
            )));
        }
    }

    let n_params = state.params.named_blocks().len();
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    for b in &expected {
        values.push((0..b.values.len()).map(|_| r.f64()).collect::<Result<_>>()?);
    }
    if r.inner.read(&mut [0u8; 1])? != 0 {
        return Err(r.bad("trailing bytes after the last block"));
    }

    let mut it = values.into_iter();
    for ((_, dst), src) in state.params.blocks_mut(ParamGroup::All).into_iter().zip(it.by_ref().take(n_params)) {
        dst.copy_from_slice(&src);
    }
    let fill = |opt: &mut OptimizerState, it: &mut dyn Iterator<Item = Vec<f64>>| {
        opt.first = it.take(n_params).collect();
        opt.second = it.take(n_params).collect();
    };
    fill(&mut state.contrastive_opt, &mut it);
    fill(&mut state.classifier_opt, &mut it);
    Ok((state, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{choose_known_ids, generate_blobs, split_open_set};

    fn cfg() -> TrainConfig {
        TrainConfig {
            classes: 3,
            known_classes: 2,
            per_class: 20,
            dim: 3,
            hidden: vec![5],
            proj_dim: 3,
            batch_size: 16,
            epochs_contrastive: 2,
            epochs_classifier: 1,
            warmup_epochs: 1,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_restores_state_exactly() {
        let cfg = cfg();
        let ds = generate_blobs(3, 20, 3, 1.0, 11).unwrap();
        let split = split_open_set(&ds, &choose_known_ids(3, 2, 11).unwrap(), 0.3, 11).unwrap();
        let mut state = TrainState::new(&cfg).unwrap();
        state.run(&split, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &state, &cfg).unwrap();
        let (loaded, loaded_cfg) = load(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded, state);
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let cfg = cfg();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &TrainState::new(&cfg).unwrap(), &cfg).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format { .. })));

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        assert!(matches!(load(&path), Err(Error::Format { .. })));

        let mut longer = bytes;
        longer.push(0);
        std::fs::write(&path, &longer).unwrap();
        assert!(matches!(load(&path), Err(Error::Format { .. })));
    }
}
