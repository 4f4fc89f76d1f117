use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PM3W";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Named learnable tensors in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        tensor.set_requires_grad(true);
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Multiplies every present gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f32) {
        for p in &mut self.params {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Serializes every parameter in creation order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_elements() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.tensor.rank() as u8);
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic, origin)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(origin.to_path_buf()));
        }
        let version = read_u32(&mut cur, origin)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = read_u32(&mut cur, origin)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut cur, &mut len, origin)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut cur, &mut name, origin)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::DimMismatch(format!("non-UTF-8 parameter name in {}", origin.display())))?;
            let mut rank = [0u8; 1];
            read_exact(&mut cur, &mut rank, origin)?;
            let shape = (0..rank[0])
                .map(|_| read_u32(&mut cur, origin).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut payload = vec![0u8; n * 4];
            read_exact(&mut cur, &mut payload, origin)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.add(name, Tensor::new(shape, data)?)?;
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::DimMismatch(format!("trailing bytes in {}", origin.display())));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies values from `other` by name; every parameter must be present
    /// with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::UnknownParameter(p.name.clone()))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::DimMismatch(format!(
                    "parameter {}: {:?} vs {:?}",
                    p.name,
                    src.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        if other.len() != self.len() {
            return Err(Error::DimMismatch(format!(
                "checkpoint has {} parameters, model has {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8], origin: &Path) -> Result<()> {
    cur.read_exact(buf).map_err(|e| Error::io(origin, e))
}

fn read_u32(cur: &mut Cursor<&[u8]>, origin: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b, origin)?;
    Ok(u32::from_le_bytes(b))
}
