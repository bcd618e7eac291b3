//! Binary tensor records.
//!
//! Layout of one record, all integers little-endian:
//!
//! | field     | size            |
//! |-----------|-----------------|
//! | magic     | 8 (`DYNLAB01`)  |
//! | version   | u16             |
//! | dtype     | u8 (1 f64, 2 i32) |
//! | ndim      | u8              |
//! | dims      | ndim x u64      |
//! | name len  | u32             |
//! | name      | UTF-8 bytes     |
//! | payload   | product(dims) x dtype size, row-major |
//!
//! A file holds one or more records back to back.

use std::fs;
use std::path::Path;

use super::{io_err, Result, StoreError};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"DYNLAB01";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    I32 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::I32 => 4,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F64),
            2 => Ok(DType::I32),
            other => Err(StoreError::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F64(m.data().to_vec()),
        }
    }

    /// Token ids as a `[rows x cols]` i32 tensor. Panics if an id exceeds
    /// `i32::MAX` or if `tokens.len() != rows * cols`.
    pub fn from_tokens(name: impl Into<String>, tokens: &[u32], rows: usize, cols: usize) -> Self {
        assert_eq!(tokens.len(), rows * cols);
        let data = tokens
            .iter()
            .map(|&t| i32::try_from(t).expect("token id fits in i32"))
            .collect();
        Self {
            name: name.into(),
            dims: if rows == 1 {
                vec![cols as u64]
            } else {
                vec![rows as u64, cols as u64]
            },
            data: TensorData::I32(data),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let TensorData::F64(values) = &self.data else {
            return Err(StoreError::Format(format!("{}: expected f64 data", self.name)));
        };
        let (rows, cols) = match self.dims[..] {
            [r, c] => (r as usize, c as usize),
            [n] => (1, n as usize),
            _ => {
                return Err(StoreError::Format(format!(
                    "{}: expected a 2-D tensor, got dims {:?}",
                    self.name, self.dims
                )))
            }
        };
        Matrix::new(rows, cols, values.clone())
            .map_err(|e| StoreError::Format(format!("{}: {e}", self.name)))
    }

    /// Non-negative i32 data as token ids, flattened.
    pub fn to_tokens(&self) -> Result<Vec<u32>> {
        let TensorData::I32(values) = &self.data else {
            return Err(StoreError::Format(format!("{}: expected i32 data", self.name)));
        };
        values
            .iter()
            .map(|&v| {
                u32::try_from(v)
                    .map_err(|_| StoreError::Format(format!("{}: negative token id {v}", self.name)))
            })
            .collect()
    }
}

/// Appends one record to `out`.
pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    let count: u64 = t.dims.iter().product();
    assert_eq!(count as usize, t.data.len(), "dims do not match data length");
    assert!(t.dims.len() <= u8::MAX as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(t.data.dtype() as u8);
    out.push(t.dims.len() as u8);
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
    out.extend_from_slice(t.name.as_bytes());
    match &t.data {
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| StoreError::Format(format!("truncated {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode_one(c: &mut Cursor<'_>) -> Result<Tensor> {
    let magic = c.take(8, "magic")?;
    if magic != MAGIC {
        return Err(StoreError::Format(format!("bad magic {magic:?}")));
    }
    let version = c.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(StoreError::Format(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(c.u8("dtype")?)?;
    let ndim = c.u8("ndim")? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(c.u64("dims")?);
    }
    let name_len = c.u32("name length")? as usize;
    let name = std::str::from_utf8(c.take(name_len, "name")?)
        .map_err(|e| StoreError::Format(format!("tensor name is not UTF-8: {e}")))?
        .to_string();
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| StoreError::Format(format!("{name}: dims {dims:?} overflow")))?;
    let bytes = count
        .checked_mul(dtype.size())
        .ok_or_else(|| StoreError::Format(format!("{name}: payload size overflows")))?;
    let payload = c.take(bytes, "payload")?;
    let data = match dtype {
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        DType::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Tensor { name, dims, data })
}

/// Decodes every record in `bytes`.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        out.push(decode_one(&mut c)?);
    }
    if out.is_empty() {
        return Err(StoreError::Format("no tensor records".into()));
    }
    Ok(out)
}

/// Writes the records and returns the file bytes.
pub fn write_tensor_file(path: &Path, tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for t in tensors {
        encode_tensor(t, &mut bytes);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(bytes)
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensors(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_2x3_layout() {
        let t = Tensor::from_matrix("z", &Matrix::zeros(2, 3));
        let mut bytes = Vec::new();
        encode_tensor(&t, &mut bytes);
        // magic 8 + version 2 + dtype 1 + ndim 1 + dims 16 + name len 4 + name 1
        let header = 8 + 2 + 1 + 1 + 2 * 8 + 4 + 1;
        assert_eq!(bytes.len(), header + 48);
        assert_eq!(&bytes[..8], b"DYNLAB01");
        assert_eq!(&bytes[8..10], &[1, 0]);
        assert_eq!(bytes[10], 1);
        assert_eq!(bytes[11], 2);
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &3u64.to_le_bytes());
        assert_eq!(&bytes[28..32], &1u32.to_le_bytes());
        assert_eq!(bytes[32], b'z');
        assert!(bytes[header..].iter().all(|&b| b == 0));
        assert_eq!(decode_tensors(&bytes).unwrap(), vec![t]);
    }

    #[test]
    fn little_endian_payload() {
        let t = Tensor::from_matrix("x", &Matrix::from_rows(&[[1.0]]));
        let mut bytes = Vec::new();
        encode_tensor(&t, &mut bytes);
        assert_eq!(&bytes[bytes.len() - 8..], &[0, 0, 0, 0, 0, 0, 0xf0, 0x3f]);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = Vec::new();
        encode_tensor(&Tensor::from_matrix("a", &Matrix::identity(2)), &mut bytes);
        bytes[3] ^= 0x20;
        assert!(matches!(decode_tensors(&bytes), Err(StoreError::Format(_))));
    }

    #[test]
    fn truncation_and_bad_version() {
        let mut bytes = Vec::new();
        encode_tensor(&Tensor::from_matrix("a", &Matrix::identity(2)), &mut bytes);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
        bytes[8] = 9;
        assert!(decode_tensors(&bytes).is_err());
        assert!(decode_tensors(&[]).is_err());
    }

    #[test]
    fn multiple_records_and_tokens() {
        let a = Tensor::from_matrix("a", &Matrix::identity(3));
        let b = Tensor::from_tokens("tok", &[1, 2, 3, 4, 5, 6], 2, 3);
        let mut bytes = Vec::new();
        encode_tensor(&a, &mut bytes);
        encode_tensor(&b, &mut bytes);
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back, vec![a, b.clone()]);
        assert_eq!(back[1].to_tokens().unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert!(b.to_matrix().is_err());
    }
}
