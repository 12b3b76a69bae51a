//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u64`):
//!
//! ```text
//! count
//! repeated count times:
//!     name_len, name (UTF-8), rank, dims[rank], payload (f32 LE × product(dims))
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::scalar::Float;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Float> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers such as batch-norm running statistics are stored but never
    /// optimised.
    pub trainable: bool,
}

/// Insertion-ordered map of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Float = f32> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::invalid("ParamStore::insert", format!("duplicate parameter `{}`", name)));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(&mut self.entries[i].value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor<f32>)> = self.entries.iter().map(|e| (e.name.clone(), e.value.cast())).collect();
        write_checkpoint(path, &tensors)
    }

    /// Overwrites every stored value from a checkpoint. The checkpoint must
    /// hold exactly the same names and shapes.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let tensors = read_checkpoint(path)?;
        if tensors.len() != self.entries.len() {
            return Err(TensorError::Checkpoint(format!(
                "{} holds {} tensors, model expects {}",
                path.display(),
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, t) in tensors {
            let slot = self.value_mut(&name).map_err(|_| {
                TensorError::Checkpoint(format!("unexpected tensor `{}` in {}", name, path.display()))
            })?;
            if slot.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    name,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.cast();
        }
        Ok(())
    }
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let count = read_u64(&mut r, "tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let len = read_u64(&mut r, "name length")? as usize;
        if len > 1 << 16 {
            return Err(TensorError::Checkpoint(format!("tensor {}: implausible name length {}", i, len)));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| TensorError::Checkpoint(format!("tensor {}: truncated name", i)))?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint(format!("tensor {}: name is not UTF-8", i)))?;
        let t = read_tensor(&mut r).map_err(|e| TensorError::Checkpoint(format!("tensor `{}`: {}", name, e)))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Writes `rank, dims[rank], payload` for one tensor.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let rank = read_u64(r, "rank")? as usize;
    if rank > 16 {
        return Err(TensorError::Checkpoint(format!("implausible rank {}", rank)));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u64(r, "dims")? as usize);
    }
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let n = n.filter(|&n| n <= 1 << 31).ok_or_else(|| TensorError::Checkpoint(format!("implausible dims {:?}", dims)))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| TensorError::Checkpoint(format!("truncated payload, expected {} values", n)))?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::from_vec(dims, data)
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| TensorError::Checkpoint(format!("truncated while reading {}", what)))?;
    Ok(u64::from_le_bytes(b))
}
