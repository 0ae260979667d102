//! Binary record files: a UTF-8 header and `key=value` metadata block, a
//! blank line, then one record per tensor:
//!
//! ```text
//! name <name> dims <d1,d2,...> dtype <f64|f32>\n<little-endian values>
//! ```
//!
//! The reader checks that every record's byte length matches its dims and
//! that nothing trails the last record.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "salm-ckpt v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// Metadata plus named tensors, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordFile {
    pub meta: Vec<(String, String)>,
    pub records: Vec<(String, Tensor)>,
}

impl RecordFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| Error::Integrity(format!("checkpoint metadata lacks {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        write_records(self, dtype)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = write_records(self, Dtype::F64)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        read_records(&bytes)
    }
}

pub fn write_records(file: &RecordFile, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_HEADER.as_bytes());
    out.push(b'\n');
    for (k, v) in &file.meta {
        if k.contains(['=', '\n']) || v.contains('\n') || k.is_empty() {
            return Err(Error::Config(format!("metadata entry {k:?} cannot be stored")));
        }
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    out.push(b'\n');
    for (name, t) in &file.records {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Config(format!("record name {name:?} cannot be stored")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        out.extend_from_slice(format!("name {name} dims {} dtype {}\n", dims.join(","), dtype.name()).as_bytes());
        match dtype {
            Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Integrity(format!("unterminated line at byte {}", *pos)))?;
    let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Integrity(format!("non-UTF-8 text at byte {}", *pos)))?;
    *pos += end + 1;
    Ok(line)
}

pub fn read_records(bytes: &[u8]) -> Result<RecordFile> {
    let mut pos = 0;
    let header = take_line(bytes, &mut pos)?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::Integrity(format!("not a checkpoint (header {header:?})")));
    }
    let mut file = RecordFile::default();
    loop {
        let line = take_line(bytes, &mut pos)?;
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Integrity(format!("malformed metadata line {line:?}")))?;
        file.meta.push((k.to_string(), v.to_string()));
    }
    while pos < bytes.len() {
        let line = take_line(bytes, &mut pos)?;
        let parts: Vec<&str> = line.split(' ').collect();
        let [ "name", name, "dims", dims, "dtype", dtype ] = parts.as_slice() else {
            return Err(Error::Integrity(format!("malformed record header {line:?}")));
        };
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse().map_err(|_| Error::Integrity(format!("bad dims {dims:?}"))))
                .collect::<Result<_>>()?
        };
        let dtype = match *dtype {
            "f64" => Dtype::F64,
            "f32" => Dtype::F32,
            other => return Err(Error::Integrity(format!("unknown dtype {other:?}"))),
        };
        let n: usize = shape.iter().product();
        let len = n * dtype.width();
        if bytes.len() - pos < len {
            return Err(Error::Integrity(format!(
                "record {name} needs {len} bytes, {} remain",
                bytes.len() - pos
            )));
        }
        let raw = &bytes[pos..pos + len];
        pos += len;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        file.records.push((name.to_string(), Tensor::new(&shape, data)?));
    }
    Ok(file)
}
