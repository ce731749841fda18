//! Parameter checkpoints.
//!
//! Binary layout (little-endian): `"MILP"`, u32 version, u32 D, then for each
//! tensor in declaration order (W1, b1, Ua, Va, Wa, Wc, bc) a u32 rank, the
//! u32 dimensions and the values as binary32. The model configuration lives
//! in a JSON sidecar next to the binary (`<file>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use super::{MilModel, MilParams, ModelConfig, TENSOR_NAMES};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MILP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl MilModel {
    /// Values are narrowed to binary32.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.params.num_values() * 4 + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.input_dim as u32).to_le_bytes());
        for (shape, values) in self.params.shapes().iter().zip(self.params.tensors()) {
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(config: ModelConfig, bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing MILP magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let d = cur.u32()? as usize;
        if d != config.input_dim {
            return Err(Error::validation(format!(
                "checkpoint input dimension {d} disagrees with config {}",
                config.input_dim
            )));
        }
        let mut params = MilParams::zeros(&config);
        let expected = params.shapes();
        for ((name, want), dst) in TENSOR_NAMES
            .iter()
            .zip(expected.iter())
            .zip(params.tensors_mut())
        {
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if &shape != want {
                return Err(Error::validation(format!(
                    "tensor {name} has shape {shape:?}, config implies {want:?}"
                )));
            }
            for v in dst.iter_mut() {
                *v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64;
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after last tensor".into()));
        }
        MilModel::from_parts(config, params)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint(model: &MilModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&model.config)?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(side, e))
}

pub fn read_checkpoint(path: &Path) -> Result<MilModel> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let config: ModelConfig = serde_json::from_str(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    MilModel::from_checkpoint_bytes(config, &bytes)
}
