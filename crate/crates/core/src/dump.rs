//! Single-file tensor container (`.clad`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0      magic        4 bytes  "CLAD"
//! 4      version      u32      = 1
//! 8      entry_count  u32
//! 12     entries      entry_count times:
//!          name_len     u32
//!          name         name_len bytes, UTF-8
//!          dtype        u32      1 = f32
//!          rank         u32      >= 1
//!          dims         rank x u64
//!          byte_offset  u64      absolute offset of the payload
//! ...    payload      row-major f32 data for each entry
//! ```
//!
//! The writer packs payloads back to back, in entry order, directly after
//! the entry table.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CLAD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

/// A dense f32 tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Malformed("tensor rank must be >= 1".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Malformed(format!("zero-sized dimension in {dims:?}")));
        }
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(Error::DimMismatch(format!(
                "dims {dims:?} imply {count} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn from_vector(v: ArrayView1<'_, f64>) -> Result<Self> {
        Self::new(vec![v.len()], v.iter().map(|&x| x as f32).collect())
    }

    pub fn from_matrix(m: ArrayView2<'_, f64>) -> Result<Self> {
        let (r, c) = m.dim();
        Self::new(vec![r, c], m.iter().map(|&x| x as f32).collect())
    }

    pub fn from_tensor3(m: ArrayView3<'_, f64>) -> Result<Self> {
        let (a, b, c) = m.dim();
        Self::new(vec![a, b, c], m.iter().map(|&x| x as f32).collect())
    }

    pub fn to_vector(&self, name: &str) -> Result<Array1<f64>> {
        if self.rank() != 1 {
            return Err(Error::DimMismatch(format!(
                "`{name}` has rank {}, expected 1",
                self.rank()
            )));
        }
        Ok(self.data.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn to_matrix(&self, name: &str) -> Result<Array2<f64>> {
        if self.rank() != 2 {
            return Err(Error::DimMismatch(format!(
                "`{name}` has rank {}, expected 2",
                self.rank()
            )));
        }
        let v: Vec<f64> = self.data.iter().map(|&x| f64::from(x)).collect();
        Array2::from_shape_vec((self.dims[0], self.dims[1]), v)
            .map_err(|e| Error::DimMismatch(e.to_string()))
    }

    pub fn to_tensor3(&self, name: &str) -> Result<Array3<f64>> {
        if self.rank() != 3 {
            return Err(Error::DimMismatch(format!(
                "`{name}` has rank {}, expected 3",
                self.rank()
            )));
        }
        let v: Vec<f64> = self.data.iter().map(|&x| f64::from(x)).collect();
        Array3::from_shape_vec((self.dims[0], self.dims[1], self.dims[2]), v)
            .map_err(|e| Error::DimMismatch(e.to_string()))
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorDump {
    entries: Vec<(String, Tensor)>,
}

impl TensorDump {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.contains(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header_len = 12usize;
        for (name, t) in &self.entries {
            header_len += 4 + name.len() + 4 + 4 + 8 * t.rank() + 8;
        }
        let payload_len: usize = self.entries.iter().map(|(_, t)| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(header_len + payload_len);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = header_len as u64;
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&DTYPE_F32.to_le_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.data.len() * 4) as u64;
        }
        debug_assert_eq!(out.len(), header_len);
        for (_, t) in &self.entries {
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = cur.u32()? as usize;
        let mut dump = TensorDump::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|e| Error::Malformed(format!("entry name is not UTF-8: {e}")))?
                .to_string();
            let dtype = cur.u32()?;
            if dtype != DTYPE_F32 {
                return Err(Error::UnsupportedDtype(dtype));
            }
            let rank = cur.u32()? as usize;
            if rank == 0 {
                return Err(Error::Malformed(format!("`{name}` has rank 0")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = cur.u64()?;
                if d == 0 {
                    return Err(Error::Malformed(format!("`{name}` has a zero dimension")));
                }
                dims.push(usize::try_from(d).map_err(|_| Error::Malformed("dim overflow".into()))?);
            }
            let offset = cur.u64()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| Error::Malformed(format!("`{name}` is too large")))?;
            let start = usize::try_from(offset).map_err(|_| Error::Malformed("offset overflow".into()))?;
            let end = start
                .checked_add(count)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| {
                    Error::Malformed(format!("`{name}` payload extends past end of file"))
                })?;
            let data: Vec<f32> = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue(name));
            }
            dump.insert(name, Tensor { dims, data })?;
        }
        Ok(dump)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Malformed("unexpected end of header".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
