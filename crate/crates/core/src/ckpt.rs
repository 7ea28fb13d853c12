//! Versioned binary checkpoint container for named parameter tensors.
//!
//! Layout (all multi-byte fields little-endian, documented in FORMAT.md):
//!
//! ```text
//! magic   b"MCK1"
//! version u8  (currently 1)
//! dtype   u8  (0 = f32, 1 = f64)
//! meta_len u32, meta: UTF-8 JSON blob (model/config metadata)
//! n_tensors u32
//! per tensor:
//!   name_len u16, name bytes
//!   n_dims u8, dims u32 × n_dims
//!   data: numel raw elements
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::nn::ParamStore;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"MCK1";
pub const CKPT_VERSION: u8 = 1;

pub fn save<T: Scalar>(path: &Path, params: &ParamStore<T>, meta: &serde_json::Value) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.push(T::DTYPE.code());
    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| CoreError::Checkpoint(format!("meta encode: {e}")))?;
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "param name too long");
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        assert!(tensor.rank() <= u8::MAX as usize);
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let buf = fs::read(path)
        .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(CoreError::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u8()?;
    if version != CKPT_VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(r.u8()?)
        .ok_or_else(|| CoreError::Checkpoint("unknown dtype".into()))?;
    if dtype != T::DTYPE {
        return Err(CoreError::Checkpoint(format!(
            "dtype mismatch: file holds {dtype}, runtime expects {}",
            T::DTYPE
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CoreError::Checkpoint(format!("meta decode: {e}")))?;
    let n_tensors = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CoreError::Checkpoint("param name not UTF-8".into()))?;
        let n_dims = r.u8()? as usize;
        let mut shape = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * T::DTYPE.size())?;
        let data: Vec<T> =
            raw.chunks_exact(T::DTYPE.size()).map(|chunk| T::read_le(chunk)).collect();
        params.insert(name, Tensor::from_vec(shape, data));
    }
    if r.pos != buf.len() {
        return Err(CoreError::Checkpoint("trailing bytes after tensor table".into()));
    }
    Ok((params, meta))
}

/// Reads only the metadata blob (any dtype).
pub fn load_meta(path: &Path) -> Result<serde_json::Value> {
    let buf = fs::read(path)
        .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(CoreError::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let _version = r.u8()?;
    let _dtype = r.u8()?;
    let meta_len = r.u32()? as usize;
    serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CoreError::Checkpoint(format!("meta decode: {e}")))
}
