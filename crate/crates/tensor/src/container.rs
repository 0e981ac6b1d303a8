//! Single-file tensor container: one line of JSON header terminated by
//! `\n`, followed by the tensors' values as little-endian `f64` in the
//! order the header declares them.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::TensorError;
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "graspxfer-f64";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload holds {found} bytes, header declares {expected}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ContainerError> {
        let header = Header {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&header).map_err(|e| ContainerError::Header(e.to_string()))?;
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, ContainerError> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(ContainerError::Header("missing header terminator".into()));
        }
        let header: Header =
            serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| ContainerError::Header(e.to_string()))?;
        if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
            return Err(ContainerError::Header(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected: usize = header
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 8)
            .sum();
        if payload.len() != expected {
            return Err(ContainerError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let data = payload[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            offset += n * 8;
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        Ok(Container {
            meta: header.meta,
            tensors,
        })
    }
}

pub fn write_container(path: &Path, container: &Container) -> Result<(), ContainerError> {
    let file = fs::File::create(path)?;
    container.write_to(io::BufWriter::new(file))
}

pub fn read_container(path: &Path) -> Result<Container, ContainerError> {
    Container::read_from(fs::File::open(path)?)
}
