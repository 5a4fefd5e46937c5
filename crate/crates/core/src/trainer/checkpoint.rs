//! Binary checkpoint: parameters, Adam state, progress, and dev history.
//!
//! Layout (little-endian):
//! `magic "ARCK" | format u32 | config (len-prefixed UTF-8 JSON) |
//! params (see encoder) | adam t u64 | adam skipped u64 | m tensors | v tensors |
//! step u64 | index version u64 | history len u64 | (step u64, metric f64)*`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::optim::AdamState;
use super::TrainerState;
use crate::encoder::{EncoderError, EncoderParams, TowerPair};
use crate::util::{read_bytes, read_f64s, read_u32, read_u64, write_bytes, write_f64s, write_u32, write_u64};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"ARCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} does not match supported version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("not a checkpoint file")]
    Magic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Snapshot of the run configuration, as JSON.
    pub config_json: String,
    pub params: EncoderParams,
    pub optimizer: AdamState,
    pub step: u64,
    pub index_version: u64,
    /// `(step, dev metric)` pairs.
    pub dev_history: Vec<(u64, f64)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainerState, config_json: String, index_version: u64, dev_history: &[(u64, f64)]) -> Self {
        Checkpoint {
            config_json,
            params: state.params.clone(),
            optimizer: state.optimizer.clone(),
            step: state.step,
            index_version,
            dev_history: dev_history.to_vec(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        write_u32(w, CHECKPOINT_FORMAT_VERSION)?;
        write_bytes(w, self.config_json.as_bytes())?;
        self.params.write_to(w)?;
        write_u64(w, self.optimizer.t)?;
        write_u64(w, self.optimizer.skipped)?;
        self.optimizer.m.write_to(w)?;
        self.optimizer.v.write_to(w)?;
        write_u64(w, self.step)?;
        write_u64(w, self.index_version)?;
        write_u64(w, self.dev_history.len() as u64)?;
        for &(s, v) in &self.dev_history {
            write_u64(w, s)?;
            write_f64s(w, &[v])?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let found = read_u32(r)?;
        if found != CHECKPOINT_FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let config_json = String::from_utf8(read_bytes(r, 1 << 24)?)
            .map_err(|_| CheckpointError::Corrupt("config is not UTF-8".into()))?;
        let params = EncoderParams::read_from(r)?;
        let t = read_u64(r)?;
        let skipped = read_u64(r)?;
        let m = TowerPair::read_from(r, &params.dims)?;
        let v = TowerPair::read_from(r, &params.dims)?;
        let step = read_u64(r)?;
        let index_version = read_u64(r)?;
        let n = read_u64(r)? as usize;
        if n > 1 << 24 {
            return Err(CheckpointError::Corrupt("history length".into()));
        }
        let mut dev_history = Vec::with_capacity(n);
        for _ in 0..n {
            let s = read_u64(r)?;
            let v = read_f64s(r, 1)?[0];
            dev_history.push((s, v));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            config_json,
            params,
            optimizer: AdamState { m, v, t, skipped },
            step,
            index_version,
            dev_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn best_step(&self) -> Option<u64> {
        super::best_step(&self.dev_history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::trainer::TrainConfig;

    fn checkpoint() -> Checkpoint {
        let dims = EncoderDims { vocab_size: 9, d_emb: 3, d_hidden: 4, d_out: 2 };
        let mut state = TrainerState::new(EncoderParams::init(dims, 5), TrainConfig::default(), 1).unwrap();
        let mut g = state.params.gradient_buffer();
        g.fill(0.01);
        state.optimizer.update(&mut state.params, &g, 0.1);
        state.step = 1500;
        Checkpoint::from_state(&state, "{\"seed\":1}".into(), 4, &[(500, 0.3), (1000, 0.5), (1500, 0.4)])
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = checkpoint();
        let mut a = Vec::new();
        ck.write_to(&mut a).unwrap();
        let back = Checkpoint::read_from(&mut a.as_slice()).unwrap();
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.params.towers, ck.params.towers);
        assert_eq!(back.best_step(), Some(1000));
    }

    #[test]
    fn wrong_version_is_explicit() {
        let mut bytes = Vec::new();
        checkpoint().write_to(&mut bytes).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, CheckpointError::Version { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn truncated_file_fails() {
        let mut bytes = Vec::new();
        checkpoint().write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
