//! Directory container shared by plain and compressed models.
//!
//! ```text
//! <dir>/config.json   UTF-8 header: ModelConfig fields, format_version, compressed,
//!                     optional plan, and the tensor manifest [{name, rows, cols, offset}]
//! <dir>/weights.bin   row-major little-endian f64 tensors concatenated in manifest order
//! <dir>/checksum.txt  CRC-64/XZ of weights.bin as 16 lowercase hex digits
//! ```
//!
//! Offsets are in bytes and always multiples of 8.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::densemat::Matrix;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sensitivity::CompressionPlan;

pub const FORMAT_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CHECKSUM_FILE: &str = "checksum.txt";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    #[serde(default)]
    pub compressed: bool,
    #[serde(flatten)]
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<CompressionPlan>,
    pub tensors: Vec<TensorEntry>,
}

pub fn checksum_hex(bytes: &[u8]) -> String {
    format!("{:016x}", CRC64.checksum(bytes))
}

/// Accumulates named tensors and writes them as one container.
#[derive(Default)]
pub struct ContainerWriter {
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl ContainerWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, m: &Matrix<f64>) {
        self.entries.push(TensorEntry {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            offset: self.blob.len() as u64,
        });
        for x in m.as_slice() {
            self.blob.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &[f64]) {
        let m = Matrix::row_vector(v).expect("vector entries are finite");
        self.push(name, &m);
    }

    pub fn write(
        self,
        dir: &Path,
        config: &ModelConfig,
        plan: Option<&CompressionPlan>,
    ) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = Header {
            format_version: FORMAT_VERSION,
            compressed: plan.is_some(),
            config: config.clone(),
            plan: plan.cloned(),
            tensors: self.entries,
        };
        let json = serde_json::to_string_pretty(&header)?;
        write_file(&dir.join(CONFIG_FILE), json.as_bytes())?;
        write_file(&dir.join(WEIGHTS_FILE), &self.blob)?;
        write_file(
            &dir.join(CHECKSUM_FILE),
            format!("{}\n", checksum_hex(&self.blob)).as_bytes(),
        )?;
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// A validated container: lengths and checksum are checked before any tensor
/// is handed out.
pub struct Container {
    pub header: Header,
    blob: Vec<u8>,
    index: HashMap<String, usize>,
}

impl Container {
    pub fn open(dir: &Path) -> Result<Self> {
        let header_bytes = read_file(&dir.join(CONFIG_FILE))?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        header.config.validate()?;

        let blob = read_file(&dir.join(WEIGHTS_FILE))?;
        let mut expected = 0u64;
        for t in &header.tensors {
            if t.offset != expected || t.offset % 8 != 0 {
                return Err(Error::Format(format!(
                    "tensor `{}` at offset {} (expected {})",
                    t.name, t.offset, expected
                )));
            }
            expected += (t.rows * t.cols * 8) as u64;
        }
        if blob.len() as u64 != expected {
            return Err(Error::BlobLength {
                expected,
                found: blob.len() as u64,
            });
        }
        let stored = String::from_utf8_lossy(&read_file(&dir.join(CHECKSUM_FILE))?)
            .trim()
            .to_lowercase();
        let computed = checksum_hex(&blob);
        if stored != computed {
            return Err(Error::Checksum {
                expected: stored,
                found: computed,
            });
        }
        let index = header
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Ok(Container {
            header,
            blob,
            index,
        })
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn tensor(&self, name: &str) -> Result<Matrix<f64>> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let t = &self.header.tensors[i];
        let start = t.offset as usize;
        let data = self.blob[start..start + t.rows * t.cols * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Matrix::new(t.rows, t.cols, data)
    }

    /// Tensor with a required shape.
    pub fn tensor_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix<f64>> {
        let m = self.tensor(name)?;
        if m.shape() != (rows, cols) {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: (rows, cols),
                found: m.shape(),
            });
        }
        Ok(m)
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.tensor_shaped(name, 1, len)?.into_vec())
    }
}
