//! Binary checkpoint format.
//!
//! ```text
//! "Y12C" | version u32 | count u32 | count × tensor
//! tensor  = name_len u32 | name (utf-8) | dtype u8 | rank u32 | rank × dim u32 | payload
//! ```
//!
//! Integers and payload values are little-endian; dtype 0 is f32, 1 is f64.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::{DType, Real};
use crate::tensor::{numel, Tensor};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"Y12C";
pub const VERSION: u32 = 1;

/// Named tensors in file order.
pub type TensorTable<T> = Vec<(String, Tensor<T>)>;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_tensors<'t, T: Real>(mut w: impl Write, tensors: impl ExactSizeIterator<Item = (&'t str, &'t Tensor<T>)>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[T::DTYPE as u8])?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * std::mem::size_of::<T>());
        for &v in t.data() {
            match T::DTYPE {
                DType::F32 => buf.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&v.f64().to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            fmt_err(format!("truncated at byte {} while reading {what}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a whole checkpoint into memory; any malformation is a format error.
pub fn read_tensors<T: Real>(mut r: impl Read) -> Result<TensorTable<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(fmt_err("bad magic, not a checkpoint"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| fmt_err(format!("tensor {i}: name is not utf-8")))?
            .to_string();
        let dtype = c.take(1, "dtype")?[0];
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let data: Vec<T> = match dtype {
            0 => c.take(n * 4, &name)?.chunks_exact(4).map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect(),
            1 => c.take(n * 8, &name)?.chunks_exact(8).map(|b| T::of(f64::from_le_bytes(b.try_into().unwrap()))).collect(),
            d => return Err(fmt_err(format!("tensor `{name}`: unknown dtype {d}"))),
        };
        if dtype != T::DTYPE as u8 {
            return Err(Error::Compatibility(format!("tensor `{name}`: dtype {dtype} differs from the model's")));
        }
        let t = Tensor::new(&shape, data).map_err(|e| fmt_err(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(fmt_err(format!("{} trailing bytes after the last tensor", buf.len() - c.pos)));
    }
    Ok(out)
}

impl<T: Real> Model<T> {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, self.params().iter().collect::<Vec<_>>().into_iter())?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Builds the architecture for `cfg` and fills it from `path`.
    pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let table = read_tensors::<T>(std::fs::File::open(path)?)?;
        let mut model = Model::build(cfg)?;
        model.load_table(table)?;
        Ok(model)
    }

    fn load_table(&mut self, table: TensorTable<T>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        for (i, (want, shape)) in expected.iter().enumerate() {
            match table.get(i) {
                None => return Err(Error::Compatibility(format!("checkpoint is missing tensor `{want}`"))),
                Some((name, _)) if name != want => {
                    return Err(Error::Compatibility(format!("tensor {i}: expected `{want}`, checkpoint has `{name}`")))
                }
                Some((name, t)) if t.shape() != shape.as_slice() => {
                    return Err(Error::Compatibility(format!(
                        "tensor `{name}`: checkpoint shape {:?}, model shape {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some((extra, _)) = table.get(expected.len()) {
            return Err(Error::Compatibility(format!("checkpoint has unexpected tensor `{extra}`")));
        }
        for (dst, (_, src)) in self.params_mut().tensors_mut().zip(table) {
            *dst = src;
        }
        Ok(())
    }
}
