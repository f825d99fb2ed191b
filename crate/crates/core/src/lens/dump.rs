// SPDX-License-Identifier: MIT OR Apache-2.0

//! FLNS tensor dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FLNS" | version: u32 = 1 | header_len: u64 | header: UTF-8 JSON | data
//! ```
//!
//! The header is a JSON object mapping tensor names to
//! `{"dtype": "f32", "shape": [..], "byte_offset": n}`, with `byte_offset`
//! counted from the start of the data region. Tensor ranges must not
//! overlap and the data region must end exactly where the last tensor ends.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"FLNS";
pub const VERSION: u32 = 1;
const PREAMBLE_LEN: u64 = 16;

#[derive(Debug, thiserror::Error)]
pub enum DumpError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("bad magic bytes {0:?}, expected \"FLNS\"")]
    BadMagic([u8; 4]),
    #[error("unsupported FLNS version {0}")]
    BadVersion(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("tensor {name:?} has unsupported dtype {dtype:?}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensors {0:?} and {1:?} overlap")]
    Overlap(String, String),
    #[error("data region is {actual} bytes but tensors declare {declared}")]
    SizeMismatch { declared: u64, actual: u64 },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0:?} added twice")]
    DuplicateTensor(String),
}

impl DumpError {
    /// Stable short code for reports and exit diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            DumpError::Io { .. } => "io",
            DumpError::BadMagic(_) => "bad_magic",
            DumpError::BadVersion(_) => "bad_version",
            DumpError::Truncated(_) => "truncated",
            DumpError::Header(_) => "bad_header",
            DumpError::UnsupportedDtype { .. } => "unsupported_dtype",
            DumpError::Overlap(..) => "overlap",
            DumpError::SizeMismatch { .. } => "size_mismatch",
            DumpError::MissingTensor(_) => "missing_tensor",
            DumpError::ShapeMismatch { .. } => "shape_mismatch",
            DumpError::DuplicateTensor(_) => "duplicate_tensor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

impl TensorInfo {
    pub fn n_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A validated FLNS file. Tensor payloads are read on demand.
#[derive(Debug)]
pub struct TensorDump {
    path: PathBuf,
    header: BTreeMap<String, TensorInfo>,
    data_start: u64,
    file: Mutex<File>,
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> DumpError + '_ {
    move |source| DumpError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Open and validate an FLNS file without reading tensor payloads.
pub fn read_dump(path: &Path) -> Result<TensorDump, DumpError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let file_len = file.metadata().map_err(io_err(path))?.len();
    if file_len < PREAMBLE_LEN {
        if file_len >= 4 {
            let mut magic = [0u8; 4];
            file.read_exact(&mut magic).map_err(io_err(path))?;
            if &magic != MAGIC {
                return Err(DumpError::BadMagic(magic));
            }
        }
        return Err(DumpError::Truncated(format!(
            "{file_len} bytes is shorter than the {PREAMBLE_LEN}-byte preamble"
        )));
    }
    let mut preamble = [0u8; PREAMBLE_LEN as usize];
    file.read_exact(&mut preamble).map_err(io_err(path))?;
    let header_len = parse_preamble(&preamble)?;
    let data_start = PREAMBLE_LEN
        .checked_add(header_len)
        .filter(|&s| s <= file_len)
        .ok_or_else(|| {
            DumpError::Truncated(format!(
                "header declares {header_len} bytes but file has {}",
                file_len - PREAMBLE_LEN
            ))
        })?;
    let mut header_bytes = vec![0u8; header_len as usize];
    file.read_exact(&mut header_bytes).map_err(io_err(path))?;
    let header = parse_header(&header_bytes)?;
    validate_layout(&header, file_len - data_start)?;
    Ok(TensorDump {
        path: path.to_path_buf(),
        header,
        data_start,
        file: Mutex::new(file),
    })
}

fn parse_preamble(preamble: &[u8; PREAMBLE_LEN as usize]) -> Result<u64, DumpError> {
    let magic: [u8; 4] = preamble[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(DumpError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(preamble[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(DumpError::BadVersion(version));
    }
    Ok(u64::from_le_bytes(preamble[8..16].try_into().unwrap()))
}

fn parse_header(bytes: &[u8]) -> Result<BTreeMap<String, TensorInfo>, DumpError> {
    let text = std::str::from_utf8(bytes).map_err(|e| DumpError::Header(e.to_string()))?;
    let header: BTreeMap<String, TensorInfo> =
        serde_json::from_str(text).map_err(|e| DumpError::Header(e.to_string()))?;
    for (name, info) in &header {
        if info.dtype != "f32" {
            return Err(DumpError::UnsupportedDtype {
                name: name.clone(),
                dtype: info.dtype.clone(),
            });
        }
    }
    Ok(header)
}

fn byte_len(info: &TensorInfo) -> Option<u64> {
    info.shape
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
}

fn validate_layout(header: &BTreeMap<String, TensorInfo>, data_len: u64) -> Result<(), DumpError> {
    let mut ranges = Vec::with_capacity(header.len());
    for (name, info) in header {
        let end = byte_len(info)
            .and_then(|n| info.byte_offset.checked_add(n))
            .ok_or_else(|| DumpError::Header(format!("tensor {name:?} size overflows")))?;
        if end > data_len {
            return Err(DumpError::Truncated(format!(
                "tensor {name:?} ends at data byte {end} but data region is {data_len} bytes"
            )));
        }
        ranges.push((info.byte_offset, end, name));
    }
    ranges.sort();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(DumpError::Overlap(w[0].2.clone(), w[1].2.clone()));
        }
    }
    let declared = ranges.iter().map(|r| r.1).max().unwrap_or(0);
    if declared != data_len {
        return Err(DumpError::SizeMismatch {
            declared,
            actual: data_len,
        });
    }
    Ok(())
}

impl TensorDump {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &BTreeMap<String, TensorInfo> {
        &self.header
    }

    pub fn contains(&self, name: &str) -> bool {
        self.header.contains_key(name)
    }

    pub fn info(&self, name: &str) -> Result<&TensorInfo, DumpError> {
        self.header
            .get(name)
            .ok_or_else(|| DumpError::MissingTensor(name.to_string()))
    }

    pub fn read(&self, name: &str) -> Result<Tensor, DumpError> {
        let info = self.info(name)?;
        let n_bytes = info.n_elements() * 4;
        let mut buf = vec![0u8; n_bytes];
        {
            let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
            file.seek(SeekFrom::Start(self.data_start + info.byte_offset))
                .map_err(io_err(&self.path))?;
            file.read_exact(&mut buf).map_err(io_err(&self.path))?;
        }
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor {
            shape: info.shape.clone(),
            data,
        })
    }

    /// Read a tensor and check its shape.
    pub fn read_shaped(&self, name: &str, expected: &[usize]) -> Result<Vec<f32>, DumpError> {
        let info = self.info(name)?;
        if info.shape != expected {
            return Err(DumpError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: info.shape.clone(),
            });
        }
        Ok(self.read(name)?.data)
    }
}

/// Accumulates tensors and serializes them as one FLNS file.
#[derive(Debug, Default, Clone)]
pub struct DumpWriter {
    tensors: BTreeMap<String, Tensor>,
}

impl DumpWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<&mut Self, DumpError> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DumpError::ShapeMismatch {
                name,
                expected: shape,
                found: vec![data.len()],
            });
        }
        if self.tensors.contains_key(&name) {
            return Err(DumpError::DuplicateTensor(name));
        }
        self.tensors.insert(name, Tensor { shape, data });
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            header.insert(
                name.clone(),
                TensorInfo {
                    dtype: "f32".into(),
                    shape: t.shape.clone(),
                    byte_offset: offset,
                },
            );
            offset += t.data.len() as u64 * 4;
        }
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE_LEN as usize + header_json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Write to a temporary sibling file, then rename over `path`.
    pub fn write(&self, path: &Path) -> Result<(), DumpError> {
        let tmp = path.with_extension("flns.tmp");
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&self.to_bytes()).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_bytes(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    fn raw_file(header: &str, data_len: usize) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend(std::iter::repeat_n(0u8, data_len));
        out
    }

    #[test]
    fn zeros_round_trip() {
        let mut w = DumpWriter::new();
        w.add("z", vec![2, 2], vec![0.0; 4]).unwrap();
        let f = write_bytes(&w.to_bytes());
        let d = read_dump(f.path()).unwrap();
        assert_eq!(d.read("z").unwrap().data, [0.0; 4]);
        assert_eq!(d.read_shaped("z", &[2, 2]).unwrap(), [0.0; 4]);
        assert!(matches!(
            d.read_shaped("z", &[4]),
            Err(DumpError::ShapeMismatch { .. })
        ));
        assert!(matches!(d.read("nope"), Err(DumpError::MissingTensor(_))));
    }

    #[test]
    fn hand_built_file_reads() {
        let header = r#"{"a":{"dtype":"f32","shape":[2],"byte_offset":0}}"#;
        let mut bytes = raw_file(header, 0);
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let f = write_bytes(&bytes);
        assert_eq!(read_dump(f.path()).unwrap().read("a").unwrap().data, [1.5, -2.0]);
    }

    #[test]
    fn error_codes() {
        let h = r#"{"a":{"dtype":"f32","shape":[4],"byte_offset":0}}"#;
        let cases: Vec<(Vec<u8>, &str)> = vec![
            (raw_file(h, 8), "truncated"),
            (raw_file(h, 20), "size_mismatch"),
            (
                raw_file(r#"{"a":{"dtype":"f16","shape":[4],"byte_offset":0}}"#, 8),
                "unsupported_dtype",
            ),
            (
                raw_file(
                    r#"{"a":{"dtype":"f32","shape":[2],"byte_offset":0},"b":{"dtype":"f32","shape":[2],"byte_offset":4}}"#,
                    12,
                ),
                "overlap",
            ),
            (raw_file("{not json", 0), "bad_header"),
            (b"GGUF\x01\0\0\0\0\0\0\0\0\0\0\0".to_vec(), "bad_magic"),
            (b"FLN".to_vec(), "truncated"),
        ];
        for (bytes, code) in cases {
            let f = write_bytes(&bytes);
            let err = read_dump(f.path()).unwrap_err();
            assert_eq!(err.code(), code, "{err}");
        }
        let mut v2 = raw_file("{}", 0);
        v2[4] = 2;
        let f = write_bytes(&v2);
        assert_eq!(read_dump(f.path()).unwrap_err().code(), "bad_version");
        // header longer than the file
        let mut short = raw_file("{}", 0);
        short[8] = 200;
        let f = write_bytes(&short);
        assert_eq!(read_dump(f.path()).unwrap_err().code(), "truncated");
    }

    #[test]
    fn writer_rejects_bad_input() {
        let mut w = DumpWriter::new();
        assert!(w.add("a", vec![3], vec![1.0]).is_err());
        w.add("a", vec![1], vec![1.0]).unwrap();
        assert!(matches!(
            w.add("a", vec![1], vec![1.0]),
            Err(DumpError::DuplicateTensor(_))
        ));
    }

    #[test]
    fn atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.flns");
        let mut w = DumpWriter::new();
        w.add("v", vec![3], vec![1.0, f32::MIN_POSITIVE, -0.0]).unwrap();
        w.write(&path).unwrap();
        let d = read_dump(&path).unwrap();
        let back = d.read("v").unwrap().data;
        assert_eq!(back[2].to_bits(), (-0.0f32).to_bits());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
