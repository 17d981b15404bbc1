//! Named trainable tensors and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "JSCR" | version: u32 | count: u32 | count x entry
//! entry = name_len: u16 | name: utf-8 | rank: u8 | dims: rank x u32 | payload: f32 x prod(dims)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JSCR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.with_requires_grad(true));
        self.grads.push(None);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Adds `g` into the gradient slot of `id`, creating it if empty.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &[T]) -> Result<()> {
        let n = self.values[id.0].len();
        if g.len() != n {
            return Err(Error::shape(
                "accumulate_grad",
                format!(
                    "`{}` has {n} elements, gradient has {}",
                    self.names[id.0],
                    g.len()
                ),
            ));
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Sets every gradient slot to zeros.
    pub fn zero_grads(&mut self) {
        for (slot, v) in self.grads.iter_mut().zip(&self.values) {
            match slot {
                Some(g) => g.iter_mut().for_each(|x| *x = T::zero()),
                None => *slot = Some(vec![T::zero(); v.len()]),
            }
        }
    }

    /// Drops every gradient slot.
    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn values_and_grads_mut(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor<T>, &mut Option<Vec<T>>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
            .zip(self.grads.iter_mut())
            .map(|((n, v), g)| (n, v, g))
    }

    /// Total number of trainable scalars.
    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for (name, v) in self.iter() {
            out.insert(name, v.cast()).expect("names already unique");
        }
        out
    }
}

impl ParameterSet<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor<f32>)> = self.iter().collect();
        write_checkpoint(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut set = ParameterSet::new();
        for (name, t) in read_checkpoint(path)? {
            set.insert(name, t)?;
        }
        Ok(set)
    }
}

pub fn encode_checkpoint(entries: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count =
        u32::try_from(entries.len()).map_err(|_| Error::Checkpoint("too many entries".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("dimension too large for {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing JSCR magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut r, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?;
        out.push((name, t));
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, entries: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let bytes = encode_checkpoint(entries)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
