//! Versioned binary container for named f64 tensors plus a JSON metadata
//! blob. Backs both checkpoints and prepared-dataset files.
//!
//! Layout: magic `SKTF`, u32 version, u64 meta length, meta JSON bytes, u64
//! tensor count, then per tensor: name (u64 length + bytes), rank (u64),
//! dims (u64 each), and little-endian f64 data.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SKTF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    /// Ordered by name so files are byte-stable across runs.
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
        buf.write_u64::<LittleEndian>(meta.len() as u64)?;
        buf.extend_from_slice(&meta);
        buf.write_u64::<LittleEndian>(self.tensors.len() as u64)?;
        for (name, tensor) in &self.tensors {
            buf.write_u64::<LittleEndian>(name.len() as u64)?;
            buf.extend_from_slice(name.as_bytes());
            buf.write_u64::<LittleEndian>(tensor.ndim() as u64)?;
            for &d in tensor.shape() {
                buf.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in tensor.iter() {
                buf.write_f64::<LittleEndian>(v)?;
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        let mut r = std::io::Cursor::new(&data);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, not a tensor container",
                magic
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "container version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let meta_len = r.read_u64::<LittleEndian>()? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)
            .map_err(|_| Error::Checkpoint("truncated metadata".into()))?;
        let meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Checkpoint(format!("metadata is not valid JSON: {e}")))?;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.read_u64::<LittleEndian>()? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| Error::Checkpoint("truncated tensor name".into()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.read_u64::<LittleEndian>()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(r.read_f64::<LittleEndian>().map_err(|_| {
                    Error::Checkpoint(format!("truncated data for tensor '{name}'"))
                })?);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
            tensors.insert(name, arr);
        }
        Ok(Self { meta, tensors })
    }
}
