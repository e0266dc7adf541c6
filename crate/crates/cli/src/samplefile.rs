//! Raw sample files: the magic `AWLS`, a little-endian `u32` version and `u64`
//! count, then `count` little-endian `f64` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"AWLS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum SampleFileError {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0} is not a sample file (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path} has unsupported version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path} declares {declared} values but holds {actual} bytes of payload")]
    Truncated {
        path: PathBuf,
        declared: u64,
        actual: usize,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SampleFileError + '_ {
    move |source| SampleFileError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * values.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_samples(path: &Path, values: &[f64]) -> Result<(), SampleFileError> {
    let file = fs::File::create(path).map_err(io(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(values)).map_err(io(path))?;
    w.flush().map_err(io(path))
}

pub fn read_samples(path: &Path) -> Result<Vec<f64>, SampleFileError> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
        return Err(SampleFileError::BadMagic(path.to_path_buf()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(SampleFileError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload = &bytes[HEADER_LEN..];
    if (payload.len() as u64) != declared.saturating_mul(8) {
        return Err(SampleFileError::Truncated {
            path: path.to_path_buf(),
            declared,
            actual: payload.len(),
        });
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
