//! Named-array checkpoint files.
//!
//! Layout (all integers unsigned 32-bit little-endian):
//!
//! ```text
//! "GZSL" | version | array count
//! per array: name length | UTF-8 name | rank | dims... | row-major f32 LE data
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::graph::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GZSL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            arrays: store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn into_store(self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in self.arrays {
            store.add(name, t);
        }
        store
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, len_u32(self.arrays.len(), "array count")?);
        for (name, t) in &self.arrays {
            put_u32(&mut out, len_u32(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, len_u32(t.rank(), "rank")?);
            for &d in t.shape() {
                put_u32(&mut out, len_u32(d, "dimension")?);
            }
            for &v in t.data() {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "array `{name}` overflows f32"
                    )));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Integrity(format!(
                "bad checkpoint magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = get_u32(&mut bytes)?;
        if version != VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = get_u32(&mut bytes)? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = get_u32(&mut bytes)? as usize;
            if name_len > bytes.len() {
                return Err(Error::Integrity("truncated array name".into()));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut bytes, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Integrity("array name is not UTF-8".into()))?;
            let rank = get_u32(&mut bytes)? as usize;
            let shape = (0..rank)
                .map(|_| get_u32(&mut bytes).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(4) > bytes.len() {
                return Err(Error::Integrity(format!("truncated data for `{name}`")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 4];
                read_exact(&mut bytes, &mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Integrity(format!("array `{name}`: {e}")))?;
            arrays.push((name, t));
        }
        if !bytes.is_empty() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after last array",
                bytes.len()
            )));
        }
        Ok(Checkpoint { arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display()))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("{what} {n} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_exact(bytes: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    bytes
        .read_exact(buf)
        .map_err(|_| Error::Integrity("unexpected end of checkpoint".into()))
}

fn get_u32(bytes: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(bytes, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
