//! Binary parameter files: `SGCK`, version, tensor count, then per tensor the
//! name, shape and little-endian f64 values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, m) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Named tensors in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Mat)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if r.u32()? != VERSION as usize {
        return Err(Error::Checkpoint("unsupported version".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let raw = r.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Mat::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from `tensors`; names and shapes must match exactly.
pub fn restore(store: &mut ParamStore, tensors: Vec<(String, Mat)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!("{} tensors in file, model has {}", tensors.len(), store.len())));
    }
    for (name, m) in tensors {
        let id = store.id(&name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let dst = store.get_mut(id);
        if dst.shape() != m.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?} in file, model expects {:?}",
                m.shape(),
                dst.shape()
            )));
        }
        *dst = m;
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    restore(store, decode(&std::fs::read(path)?)?)
}
