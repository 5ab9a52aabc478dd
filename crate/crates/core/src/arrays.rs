//! `.arrs` array container.
//!
//! Layout:
//!
//! ```text
//! b"ARRS1\n"              6 bytes magic
//! index_len               u64 little-endian
//! index                   index_len bytes of UTF-8 JSON
//! data                    concatenated raw little-endian buffers
//! ```
//!
//! The index is `{"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}`
//! with `dtype` one of `"float32"` / `"uint8"` and `offset` counted from the
//! first byte of the data section. Buffers are C-order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, TcamError};

pub const MAGIC: &[u8; 6] = b"ARRS1\n";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
}

impl ArrayData {
    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::U8(a) => a.shape(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::Float32,
            ArrayData::U8(_) => Dtype::Uint8,
        }
    }

    pub fn as_f32(&self) -> Option<&ArrayD<f32>> {
        match self {
            ArrayData::F32(a) => Some(a),
            ArrayData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&ArrayD<u8>> {
        match self {
            ArrayData::U8(a) => Some(a),
            ArrayData::F32(_) => None,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(a) => {
                for v in a.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            ArrayData::U8(a) => out.extend(a.iter().copied()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    Float32,
    Uint8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Uint8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    arrays: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, a: ArrayD<f32>) -> Self {
        Self {
            name: name.into(),
            data: ArrayData::F32(a),
        }
    }

    pub fn u8(name: impl Into<String>, a: ArrayD<u8>) -> Self {
        Self {
            name: name.into(),
            data: ArrayData::U8(a),
        }
    }
}

/// Loaded container contents, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayFile {
    pub arrays: Vec<NamedArray>,
}

impl ArrayFile {
    pub fn get(&self, name: &str) -> Result<&ArrayData> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| &a.data)
            .ok_or_else(|| TcamError::ArrayNotFound(name.to_string()))
    }

    pub fn get_f32(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.get(name)?
            .as_f32()
            .ok_or_else(|| TcamError::CorruptContainer(format!("`{name}` is not float32")))
    }
}

pub fn encode(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for a in arrays {
        if entries.iter().any(|e: &IndexEntry| e.name == a.name) {
            return Err(TcamError::CorruptContainer(format!(
                "duplicate array name `{}`",
                a.name
            )));
        }
        let offset = data.len() as u64;
        a.data.write_le(&mut data);
        entries.push(IndexEntry {
            name: a.name.clone(),
            dtype: a.data.dtype(),
            shape: a.data.shape().to_vec(),
            offset,
            nbytes: data.len() as u64 - offset,
        });
    }
    let index = serde_json::to_vec(&Index { arrays: entries })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + index.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ArrayFile> {
    let corrupt = |m: &str| TcamError::CorruptContainer(m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[6..14]);
    let index_len = u64::from_le_bytes(len_bytes) as usize;
    let data_start = 14usize
        .checked_add(index_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("index length exceeds file"))?;
    let index: Index = serde_json::from_slice(&bytes[14..data_start])
        .map_err(|e| TcamError::CorruptContainer(format!("bad index: {e}")))?;
    let data = &bytes[data_start..];

    let mut arrays = Vec::with_capacity(index.arrays.len());
    for e in index.arrays {
        let count: usize = e.shape.iter().product();
        let expected = count * e.dtype.size();
        if e.nbytes as usize != expected {
            return Err(TcamError::ShapeMismatch {
                expected: e.shape.clone(),
                actual: vec![e.nbytes as usize / e.dtype.size()],
            });
        }
        let start = e.offset as usize;
        let buf = start
            .checked_add(expected)
            .and_then(|end| data.get(start..end))
            .ok_or_else(|| corrupt("buffer out of bounds"))?;
        let shape = IxDyn(&e.shape);
        let arr = match e.dtype {
            Dtype::Float32 => {
                let v: Vec<f32> = buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                ArrayData::F32(ArrayD::from_shape_vec(shape, v).map_err(|_| corrupt("shape"))?)
            }
            Dtype::Uint8 => ArrayData::U8(
                ArrayD::from_shape_vec(shape, buf.to_vec()).map_err(|_| corrupt("shape"))?,
            ),
        };
        arrays.push(NamedArray { name: e.name, data: arr });
    }
    Ok(ArrayFile { arrays })
}

pub fn save_arrays(path: impl AsRef<Path>, arrays: &[NamedArray]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(arrays)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_arrays(path: impl AsRef<Path>) -> Result<ArrayFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}
