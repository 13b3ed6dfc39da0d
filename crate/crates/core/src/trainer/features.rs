//! Target tap features for drafter training: recomputed per batch (online)
//! or precomputed once into a cache file (offline).
//!
//! Cache file layout:
//!
//! ```text
//! bytes 0..8     magic  b"BSPKFEAT"
//! bytes 8..12    u32 LE length H of the JSON header
//! bytes 12..12+H UTF-8 JSON header {"version", "target_hash", "corpus_hash",
//!                "taps", "width", "rows": [per-sequence row count]}
//! remainder      per-sequence blobs in corpus order, each rows × width
//!                little-endian f32, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{corpus_hash, Sample, TokenId};
use crate::error::{Error, Result};
use crate::model::{DraftModel, TapSet, TargetModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BSPKFEAT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    target_hash: String,
    corpus_hash: String,
    taps: Vec<usize>,
    width: usize,
    rows: Vec<usize>,
}

/// Precomputed tap features for every sequence of one corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub target_hash: String,
    pub corpus_hash: String,
    pub taps: TapSet,
    pub features: Vec<Tensor<f32>>,
}

impl FeatureCache {
    pub fn build<S: Scalar>(
        target: &TargetModel<S>,
        corpus: &[Sample],
        taps: &TapSet,
    ) -> Result<Self> {
        taps.validate(target.config.n_layers)?;
        let features = corpus
            .iter()
            .map(|s| online_taps(target, taps, &s.tokens()).map(|t| t.cast()))
            .collect::<Result<_>>()?;
        Ok(FeatureCache {
            target_hash: target.hash()?,
            corpus_hash: corpus_hash(corpus)?,
            taps: taps.clone(),
            features,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: VERSION,
            target_hash: self.target_hash.clone(),
            corpus_hash: self.corpus_hash.clone(),
            taps: self.taps.0.clone(),
            width: self.features.first().map_or(0, Tensor::cols),
            rows: self.features.iter().map(Tensor::rows).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for f in &self.features {
            for v in f.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "feature cache",
            detail: detail.into(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(&bytes[12..body])?;
        if h.version != VERSION {
            return Err(bad(&format!("unsupported version {}", h.version)));
        }
        let mut floats = bytes[body..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut features = Vec::with_capacity(h.rows.len());
        for &r in &h.rows {
            let data: Vec<f32> = floats.by_ref().take(r * h.width).collect();
            if data.len() != r * h.width {
                return Err(bad("truncated blobs"));
            }
            features.push(Tensor::new(vec![r, h.width], data)?);
        }
        if floats.next().is_some() {
            return Err(bad("trailing bytes"));
        }
        Ok(FeatureCache {
            target_hash: h.target_hash,
            corpus_hash: h.corpus_hash,
            taps: TapSet(h.taps),
            features,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Refuses to serve features computed for another target, tap set or corpus.
    pub fn check<S: Scalar>(
        &self,
        target: &TargetModel<S>,
        taps: &TapSet,
        corpus: &[Sample],
    ) -> Result<()> {
        let stale = |what: &str, expected: String, found: String| {
            Err(Error::HashMismatch {
                what: format!("feature cache {what}"),
                expected,
                found,
            })
        };
        let th = target.hash()?;
        if self.target_hash != th {
            return stale("target", th, self.target_hash.clone());
        }
        let ch = corpus_hash(corpus)?;
        if self.corpus_hash != ch {
            return stale("corpus", ch, self.corpus_hash.clone());
        }
        if &self.taps != taps {
            return stale(
                "tap set",
                format!("{:?}", taps.0),
                format!("{:?}", self.taps.0),
            );
        }
        Ok(())
    }
}

fn online_taps<S: Scalar>(
    target: &TargetModel<S>,
    taps: &TapSet,
    tokens: &[TokenId],
) -> Result<Tensor<S>> {
    let mut cache = target.new_cache();
    Ok(target.forward_with_taps(tokens, &mut cache, taps)?.taps)
}

/// Where training reads tap features from.
#[derive(Clone, Copy)]
pub enum FeatureSource<'a> {
    /// Run the frozen target over each sequence when it is batched.
    Online,
    /// Read from a cache built for exactly this target, tap set and corpus.
    Offline(&'a FeatureCache),
}

impl FeatureSource<'_> {
    pub(crate) fn check<S: Scalar>(
        &self,
        target: &TargetModel<S>,
        drafter: &DraftModel<S>,
        corpus: &[Sample],
    ) -> Result<()> {
        match self {
            FeatureSource::Offline(c) if drafter.config.conditioning => {
                c.check(target, &drafter.config.taps(), corpus)
            }
            FeatureSource::Offline(_) => Err(Error::config(
                "an unconditioned drafter needs no feature cache",
            )),
            FeatureSource::Online => Ok(()),
        }
    }

    pub(crate) fn taps_for<S: Scalar>(
        &self,
        target: &TargetModel<S>,
        drafter: &DraftModel<S>,
        index: usize,
        tokens: &[TokenId],
    ) -> Result<Option<Tensor<S>>> {
        if !drafter.config.conditioning {
            return Ok(None);
        }
        match self {
            FeatureSource::Offline(c) => {
                let f = c.features.get(index).ok_or_else(|| {
                    Error::contract(format!("feature cache has no sequence {index}"))
                })?;
                if f.rows() != tokens.len() {
                    return Err(Error::contract(format!(
                        "cached features cover {} positions, sequence has {}",
                        f.rows(),
                        tokens.len()
                    )));
                }
                Ok(Some(f.cast()))
            }
            FeatureSource::Online => online_taps(target, &drafter.config.taps(), tokens).map(Some),
        }
    }
}
