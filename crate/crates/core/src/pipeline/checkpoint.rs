use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::BitAlignModel;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BTAL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary model snapshot.
///
/// Layout, all integers little-endian `u32`:
/// magic `BTAL`, version, config length + UTF-8 config text, tensor count,
/// then per tensor: name length + UTF-8 name, rank, dims, `f64` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Truncated(format!("{what} is not UTF-8")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, self.config.len());
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `source` names the origin in error messages.
    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 {
            return Err(Error::Truncated(format!("{source}: header")));
        }
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(source.to_string()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config = r.text("config")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let name = r.text(&format!("tensor {i} name"))?;
            let rank = r.u32(&format!("rank of {name}"))? as usize;
            let shape = (0..rank)
                .map(|_| r.u32(&format!("dims of {name}")).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.saturating_mul(8), &format!("data of {name}"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Truncated(format!("{source}: {} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn sha256(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl BitAlignModel {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.to_text(),
            tensors: self.store.iter().map(|(s, t)| (s.name.clone(), t.clone())).collect(),
        }
    }

    /// Hex SHA-256 of the checkpoint bytes.
    pub fn hash(&self) -> String {
        self.checkpoint().sha256()
    }

    /// Rebuilds the model from the embedded config, then loads every tensor.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::parse(&ckpt.config)?;
        let mut model = Self::build(&config)?;
        model.load_state(ckpt)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Copies tensors into this model after checking names and shapes.
    pub fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, t) in &ckpt.tensors {
            if self.store.id(name).is_none() {
                return Err(Error::UnexpectedTensor(name.clone()));
            }
            let spec = self.store.spec(self.store.id(name).expect("checked"));
            if spec.shape.as_slice() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let ids: Vec<_> = self.store.specs().iter().map(|s| s.name.clone()).collect();
        for name in ids {
            let t = ckpt
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let id = self.store.id(&name).expect("own name");
            self.store.set(id, t.1.clone())?;
        }
        Ok(())
    }
}
