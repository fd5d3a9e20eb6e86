//! Single-file checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON header
//! (phase tag, step, optimizer step counters, the full run config, the
//! serialized RNG, and a manifest of named arrays with dtype/shape/offset),
//! then the raw array data as little-endian f64 words in manifest order.
//! Writes go through a temp file and an atomic rename, and a save → load →
//! save round trip is byte-identical.

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::io;
use catintell_core::Arr;
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: [u8; 8] = *b"CATCKPT\x01";

/// One array in the manifest. `offset` and `len` are in f64 elements,
/// relative to the start of the data section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    phase: String,
    step: u64,
    opt_g_steps: u64,
    opt_d_steps: u64,
    config: RunConfig,
    rng: ChaCha8Rng,
    arrays: Vec<ArrayEntry>,
}

/// In-memory form of a checkpoint. Array order is preserved exactly, which
/// keeps reruns byte-identical.
#[derive(Debug, Clone)]
pub struct Container {
    pub phase: String,
    pub step: u64,
    pub opt_g_steps: u64,
    pub opt_d_steps: u64,
    pub config: RunConfig,
    pub rng: ChaCha8Rng,
    pub arrays: Vec<(String, Arr)>,
}

impl Container {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0usize;
        for (name, arr) in &self.arrays {
            let len = arr.len();
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: "f64".into(),
                shape: arr.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            phase: self.phase.clone(),
            step: self.step,
            opt_g_steps: self.opt_g_steps,
            opt_d_steps: self.opt_d_steps,
            config: self.config.clone(),
            rng: self.rng.clone(),
            arrays: entries,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| AppError::Checkpoint(format!("header serialization: {e}")))?;

        let mut bytes =
            Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + offset * 8);
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for (_, arr) in &self.arrays {
            for &v in arr.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        io::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Container> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                AppError::NotFound(path.to_path_buf())
            } else {
                AppError::io(path, e)
            }
        })?;
        let fail = |msg: &str| AppError::Checkpoint(format!("{}: {msg}", path.display()));

        if bytes.len() < MAGIC.len() + 8 || bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)"));
        }
        let header_len =
            u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
        let header_start = MAGIC.len() + 8;
        let data_start = header_start
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[header_start..data_start])
            .map_err(|e| fail(&format!("bad header: {e}")))?;

        let data = &bytes[data_start..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            if entry.dtype != "f64" {
                return Err(fail(&format!("array {}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            if entry.len != entry.shape.iter().product::<usize>() {
                return Err(fail(&format!("array {}: shape/len mismatch", entry.name)));
            }
            let end = entry
                .offset
                .checked_add(entry.len)
                .filter(|&end| end * 8 <= data.len())
                .ok_or_else(|| fail(&format!("array {} overruns the data section", entry.name)))?;
            let values: Vec<f64> = data[entry.offset * 8..end * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = Arr::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| fail(&format!("array {}: {e}", entry.name)))?;
            arrays.push((entry.name.clone(), arr));
        }

        Ok(Container {
            phase: header.phase,
            step: header.step,
            opt_g_steps: header.opt_g_steps,
            opt_d_steps: header.opt_d_steps,
            config: header.config,
            rng: header.rng,
            arrays,
        })
    }

    /// Looks an array up by name; the caller decides whether absence is fatal.
    pub fn array(&self, name: &str) -> Option<&Arr> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}
