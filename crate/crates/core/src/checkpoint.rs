//! Checkpoint container shared by both models.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8     magic  b"BSPKCKPT"
//! bytes 8..12    u32 LE length H of the JSON header
//! bytes 12..12+H UTF-8 JSON header
//! remainder      tensor blobs, little-endian f32, at the offsets in the header
//! ```
//!
//! The header is `{"version", "kind", "config", "tensors": [{"name", "shape",
//! "offset", "len"}], "meta"}` where `offset` is relative to the start of the
//! blob section and `len` counts elements.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::hex_digest;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamVisitor, Tensor};

pub const MAGIC: &[u8; 8] = b"BSPKCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    config: Value,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: Value,
}

/// In-memory checkpoint: named f32 tensors plus JSON config and metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Collects every parameter of `model` (trainable or not) in visit order.
    pub fn from_params<S: Scalar>(
        kind: &str,
        config: Value,
        meta: Value,
        model: &impl ParamVisitor<S>,
    ) -> Self {
        Self::from_params_where(kind, config, meta, model, |_| true)
    }

    /// Like [`Checkpoint::from_params`] but only keeps parameters whose name passes `keep`.
    pub fn from_params_where<S: Scalar>(
        kind: &str,
        config: Value,
        meta: Value,
        model: &impl ParamVisitor<S>,
        keep: impl Fn(&str) -> bool,
    ) -> Self {
        let mut tensors = Vec::new();
        model.visit_params(&mut |name, p| {
            if keep(name) {
                tensors.push((name.to_string(), p.value.cast::<f32>()))
            }
        });
        Checkpoint {
            kind: kind.into(),
            config,
            meta,
            tensors,
        }
    }

    /// Copies stored tensors into `model`, requiring an exact name/shape match.
    pub fn load_params<S: Scalar>(&self, model: &mut impl ParamVisitor<S>) -> Result<()> {
        self.load_params_where(model, |_| true)
    }

    /// Loads only the parameters whose name passes `keep`; every stored tensor
    /// must be consumed.
    pub fn load_params_where<S: Scalar>(
        &self,
        model: &mut impl ParamVisitor<S>,
        keep: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let mut result = Ok(());
        let mut used = 0;
        model.visit_params_mut(&mut |name, p| {
            if result.is_err() || !keep(name) {
                return;
            }
            match self.tensors.iter().find(|(n, _)| n == name) {
                Some((_, t)) if t.shape() == p.value.shape() => {
                    p.value = t.cast();
                    used += 1;
                }
                Some((_, t)) => {
                    result = Err(Error::Format {
                        what: "checkpoint",
                        detail: format!(
                            "tensor {name} has shape {:?}, model expects {:?}",
                            t.shape(),
                            p.value.shape()
                        ),
                    })
                }
                None => {
                    result = Err(Error::Format {
                        what: "checkpoint",
                        detail: format!("missing tensor {name}"),
                    })
                }
            }
        });
        result?;
        if used != self.tensors.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "checkpoint holds tensors the model does not".into(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel() * 4;
        }
        let header = Header {
            version: VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "checkpoint",
            detail: detail.to_string(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[12..body])?;
        if header.version != VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let blobs = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let end = e
                .offset
                .checked_add(e.len * 4)
                .filter(|&end| end <= blobs.len())
                .ok_or_else(|| bad("tensor out of range"))?;
            let data: Vec<f32> = blobs[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data)?;
            t.check_finite("checkpoint tensor")?;
            tensors.push((e.name, t));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes the file and returns its hash.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex_digest(&bytes))
    }

    /// Reads a checkpoint and returns it with the hash of the file bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, hex_digest(&bytes)))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(&self.to_bytes()?))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("expected a {kind} checkpoint, found {}", self.kind),
            });
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
