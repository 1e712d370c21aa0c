//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "STFMTENS"
//! version    u32      currently 1
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes
//!   decay    u8       1 if weight decay applies
//!   ndim     u32, then ndim x u64 dimensions
//!   payload  product(dims) x f64
//! ```

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STFMTENS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub decay_eligible: bool,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            tensors: store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    decay_eligible: p.decay_eligible,
                    tensor: p.tensor.clone(),
                })
                .collect(),
        }
    }

    /// Copies every tensor into the parameter of the same name. Every
    /// parameter of `store` must be present.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for t in &self.tensors {
            if store.id(&t.name).is_some() {
                store.load_values(&t.name, t.tensor.clone())?;
            }
        }
        for (_, p) in store.iter() {
            if !self.tensors.iter().any(|t| t.name == p.name) {
                return Err(TensorError::Checkpoint(format!("missing parameter `{}`", p.name)));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(&mut w, self.meta.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            write_bytes(&mut w, t.name.as_bytes())?;
            w.write_all(&[t.decay_eligible as u8])?;
            let shape = t.tensor.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.tensor.numel() * 8);
            for v in t.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Checkpoint("bad magic string".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| TensorError::Checkpoint("metadata is not UTF-8".into()))?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| TensorError::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut flag = [0u8; 1];
            read_exact(&mut r, &mut flag)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            read_exact(&mut r, &mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name,
                decay_eligible: flag[0] != 0,
                tensor: Tensor::new(shape, data)?,
            });
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Checkpoint("truncated checkpoint".into()),
        _ => TensorError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut v = vec![0u8; n];
    read_exact(r, &mut v)?;
    Ok(v)
}
