//! Binary checkpoint container.
//!
//! Layout (little-endian throughout): magic `SQCK`, format version `u32`,
//! tensor count `u32`; per tensor: name (`u16` length + UTF-8), dtype code
//! `u8` (0=f32, 1=f64, 2=u8, 3=i32, 4=u8 mask), rank `u8`, dims (`u64` each),
//! row-major payload; then a metadata block (`u16` byte length + UTF-8
//! `key=value` lines). An empty container is exactly 14 bytes.
//!
//! Serialization is a bijection on valid containers: `load(save(x)) == x`
//! and `save(load(bytes)) == bytes`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparsity::SparsityMask;
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"SQCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
    I32,
    Mask,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
            Dtype::I32 => 3,
            Dtype::Mask => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            3 => Some(Dtype::I32),
            4 => Some(Dtype::Mask),
            _ => None,
        }
    }

    pub fn elem_size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 | Dtype::Mask => 1,
        }
    }
}

/// One named tensor; payload is stored as the serialized bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    name: String,
    dtype: Dtype,
    dims: Vec<u64>,
    payload: Vec<u8>,
}

impl NamedTensor {
    pub fn new(name: &str, dtype: Dtype, dims: Vec<u64>, payload: Vec<u8>) -> Result<Self> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Format(format!(
                "tensor name length {} out of range",
                name.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format("tensor rank exceeds 255".into()));
        }
        let count: u64 = dims.iter().product();
        let expected = count as usize * dtype.elem_size();
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "tensor '{name}': payload is {} bytes, dims {dims:?} require {expected}",
                payload.len()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            dtype,
            dims,
            payload,
        })
    }

    /// Matrix stored as 32-bit floats (the checkpoint precision).
    pub fn from_matrix_f32(name: &str, m: &Matrix) -> Result<Self> {
        let mut payload = Vec::with_capacity(m.data().len() * 4);
        for &v in m.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Self::new(name, Dtype::F32, vec![m.rows() as u64, m.cols() as u64], payload)
    }

    pub fn from_matrix_f64(name: &str, m: &Matrix) -> Result<Self> {
        let mut payload = Vec::with_capacity(m.data().len() * 8);
        for &v in m.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Self::new(name, Dtype::F64, vec![m.rows() as u64, m.cols() as u64], payload)
    }

    pub fn from_mask(name: &str, mask: &SparsityMask) -> Result<Self> {
        let (rows, cols) = mask.shape();
        let mut payload = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                payload.push(u8::from(mask.is_kept(i, j)));
            }
        }
        Self::new(name, Dtype::Mask, vec![rows as u64, cols as u64], payload)
    }

    pub fn from_u8(name: &str, dims: Vec<u64>, values: &[u8]) -> Result<Self> {
        Self::new(name, Dtype::U8, dims, values.to_vec())
    }

    pub fn from_i32(name: &str, dims: Vec<u64>, values: &[i32]) -> Result<Self> {
        let mut payload = Vec::with_capacity(values.len() * 4);
        for &v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Self::new(name, Dtype::I32, dims, payload)
    }

    pub fn from_f32_slice(name: &str, dims: Vec<u64>, values: &[f64]) -> Result<Self> {
        let mut payload = Vec::with_capacity(values.len() * 4);
        for &v in values {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Self::new(name, Dtype::F32, dims, payload)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        if self.dims.len() != 2 {
            return Err(Error::Format(format!(
                "tensor '{}' has rank {}, expected 2",
                self.name,
                self.dims.len()
            )));
        }
        Ok((self.dims[0] as usize, self.dims[1] as usize))
    }

    /// Decode an f32 tensor back to a working-precision matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let (rows, cols) = self.dims2()?;
        let data: Vec<f64> = match self.dtype {
            Dtype::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect(),
            Dtype::F64 => self
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
            other => {
                return Err(Error::Format(format!(
                    "tensor '{}' has dtype {other:?}, expected a float type",
                    self.name
                )))
            }
        };
        Matrix::new(rows, cols, data)
    }

    pub fn to_mask(&self) -> Result<SparsityMask> {
        if self.dtype != Dtype::Mask {
            return Err(Error::Format(format!(
                "tensor '{}' has dtype {:?}, expected a mask",
                self.name, self.dtype
            )));
        }
        let (rows, cols) = self.dims2()?;
        SparsityMask::from_bits(rows, cols, self.payload.clone())
    }

    pub fn to_i32(&self) -> Result<Vec<i32>> {
        if self.dtype != Dtype::I32 {
            return Err(Error::Format(format!(
                "tensor '{}' has dtype {:?}, expected i32",
                self.name, self.dtype
            )));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        match self.dtype {
            Dtype::F32 => Ok(self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect()),
            Dtype::F64 => Ok(self
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect()),
            other => Err(Error::Format(format!(
                "tensor '{}' has dtype {other:?}, expected a float type",
                self.name
            ))),
        }
    }
}

/// An ordered set of named tensors plus ordered `key=value` metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub tensors: Vec<NamedTensor>,
    pub metadata: Vec<(String, String)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: NamedTensor) -> Result<()> {
        if self.tensors.iter().any(|t| t.name == tensor.name) {
            return Err(Error::Format(format!(
                "duplicate tensor name '{}'",
                tensor.name
            )));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("tensor '{name}' not found in container")))
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        if key.contains(['=', '\n']) || value.contains('\n') {
            // Keys/values are line-oriented; keep the format unambiguous.
            panic!("metadata keys and values must not contain '=' (key) or newlines");
        }
        for entry in &mut self.metadata {
            if entry.0 == key {
                entry.1 = value;
                return;
            }
        }
        self.metadata.push((key.to_string(), value));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.tensors.len() > u32::MAX as usize {
            return Err(Error::Format("too many tensors".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        if meta.len() > u16::MAX as usize {
            return Err(Error::Format("metadata block exceeds 65535 bytes".into()));
        }
        out.extend_from_slice(&(meta.len() as u16).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {magic:?} at offset 0, expected {MAGIC:?}"
            )));
        }
        let version = r.u32("format version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} at offset 4, expected {VERSION}"
            )));
        }
        let count = r.u32("tensor count")? as usize;
        let mut container = Container::new();
        for idx in 0..count {
            let start = r.offset;
            let name_len = r.u16(&format!("name length of tensor #{idx}"))? as usize;
            let name_bytes = r.take(name_len, &format!("name of tensor #{idx}"))?.to_vec();
            let name = String::from_utf8(name_bytes).map_err(|_| {
                Error::Format(format!("tensor #{idx}: name at offset {start} is not UTF-8"))
            })?;
            let ctx = |what: &str| format!("{what} of tensor '{name}'");
            let dtype_code = r.u8(&ctx("dtype"))?;
            let dtype = Dtype::from_code(dtype_code).ok_or_else(|| {
                Error::Format(format!(
                    "tensor '{name}': unknown dtype code {dtype_code} at offset {}",
                    r.offset - 1
                ))
            })?;
            let rank = r.u8(&ctx("rank"))? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64(&ctx("dims"))?);
            }
            let count: u64 = dims.iter().product();
            let payload_len = (count as usize).checked_mul(dtype.elem_size()).ok_or_else(|| {
                Error::Format(format!("tensor '{name}': payload size overflows"))
            })?;
            let payload = r.take(payload_len, &ctx("payload"))?.to_vec();
            let tensor = NamedTensor::new(&name, dtype, dims, payload)?;
            container.push(tensor)?;
        }
        let meta_len = r.u16("metadata length")? as usize;
        let meta_bytes = r.take(meta_len, "metadata block")?.to_vec();
        if r.offset != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after offset {}",
                bytes.len() - r.offset,
                r.offset
            )));
        }
        let meta_str = String::from_utf8(meta_bytes)
            .map_err(|_| Error::Format("metadata block is not UTF-8".into()))?;
        for line in meta_str.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("metadata line '{line}' has no '='"))
            })?;
            container.metadata.push((k.to_string(), v.to_string()));
        }
        Ok(container)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.offset,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, container: &Container) -> Result<()> {
    fs::write(path, container.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Container> {
    Container::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn sample_container(seed: u64) -> Container {
        let mut rng = Rng::new(seed);
        let mut c = Container::new();
        let w = rng.uniform_matrix(6, 4, -1.0, 1.0);
        c.push(NamedTensor::from_matrix_f32("layer0.weight", &w).unwrap())
            .unwrap();
        let bits: Vec<u8> = (0..24).map(|_| (rng.next_u64() & 1) as u8).collect();
        let mask = SparsityMask::from_bits(6, 4, bits).unwrap();
        c.push(NamedTensor::from_mask("layer0.mask", &mask).unwrap())
            .unwrap();
        let codes: Vec<u8> = (0..24).map(|_| (rng.next_u64() % 15) as u8).collect();
        c.push(NamedTensor::from_u8("layer0.codes", vec![6, 4], &codes).unwrap())
            .unwrap();
        c.push(NamedTensor::from_i32("layer0.zeros", vec![6], &[7, 3, 0, 15, 8, 2]).unwrap())
            .unwrap();
        c.push(
            NamedTensor::from_f32_slice("layer0.scales", vec![6], &[0.5, 0.25, 1.0, 0.125, 2.0, 0.75])
                .unwrap(),
        )
        .unwrap();
        c.set_meta("mode", "sparse_peft");
        c.set_meta("sparsity", "0.5");
        c.set_meta("seed", seed);
        c
    }

    #[test]
    fn empty_container_is_fourteen_bytes() {
        let bytes = Container::new().to_bytes().unwrap();
        assert_eq!(bytes.len(), 14);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), Container::new());
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        for seed in 0..10 {
            let c = sample_container(seed);
            let bytes = c.to_bytes().unwrap();
            let back = Container::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn f32_matrix_survives_via_f32() {
        // f64 -> f32 -> f64 is lossy in general but stable: a second trip is
        // the identity.
        let mut rng = Rng::new(3);
        let w = rng.uniform_matrix(5, 5, -1.0, 1.0);
        let once = NamedTensor::from_matrix_f32("w", &w).unwrap().to_matrix().unwrap();
        let twice = NamedTensor::from_matrix_f32("w", &once)
            .unwrap()
            .to_matrix()
            .unwrap();
        assert_eq!(once, twice);
        assert!(w.max_abs_diff(&once).unwrap() < 1e-6);
    }

    #[test]
    fn f64_matrix_roundtrip_is_exact() {
        let mut rng = Rng::new(4);
        let w = rng.normal_matrix(7, 3);
        let back = NamedTensor::from_matrix_f64("w", &w).unwrap().to_matrix().unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = Container::new().to_bytes().unwrap();
        bytes[0] = b'X';
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn bad_version_rejected() {
        let mut bytes = Container::new().to_bytes().unwrap();
        bytes[4] = 9;
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_names_the_tensor() {
        let c = sample_container(5);
        let bytes = c.to_bytes().unwrap();
        // Cut inside the first tensor's payload.
        let cut = 12 + 2 + "layer0.weight".len() + 1 + 1 + 16 + 10;
        let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(err.to_string().contains("layer0.weight"), "{err}");
        assert!(err.to_string().contains("offset"), "{err}");
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = sample_container(6).to_bytes().unwrap();
        bytes.push(0);
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = Container::new();
        let w = Matrix::zeros(2, 2);
        c.push(NamedTensor::from_matrix_f32("w", &w).unwrap()).unwrap();
        assert!(c.push(NamedTensor::from_matrix_f32("w", &w).unwrap()).is_err());
    }

    #[test]
    fn unknown_dtype_rejected() {
        let c = sample_container(7);
        let mut bytes = c.to_bytes().unwrap();
        // dtype byte of the first tensor sits right after its name.
        let pos = 12 + 2 + "layer0.weight".len();
        bytes[pos] = 200;
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn save_load_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sqck");
        let c = sample_container(8);
        save_checkpoint(&path, &c).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
    }

    #[test]
    fn metadata_accessors() {
        let mut c = Container::new();
        c.set_meta("alpha", "64");
        c.set_meta("alpha", "32");
        assert_eq!(c.meta("alpha"), Some("32"));
        assert_eq!(c.meta("missing"), None);
        assert_eq!(c.metadata.len(), 1);
    }
}
