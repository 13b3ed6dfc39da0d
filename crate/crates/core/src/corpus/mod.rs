//! Synthetic corpora, the toy vocabulary and the JSONL corpus format.

pub mod tasks;
pub mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::target::TargetModel;
use crate::scalar::Scalar;

pub use tasks::{
    copy_repeat_sample, gen_task, modular_chain_sample, pattern_grammar_sample, TaskKind,
};
pub use vocab::{TokenId, Vocab};

/// One corpus line: `{"prompt": [..], "response": [..], "task": ".."}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub task: String,
}

impl Sample {
    /// Prompt followed by response.
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response);
        t
    }

    /// Checks the corpus invariants: non-empty response, ids in range, no
    /// MASK or PAD anywhere, BOS only as the first prompt token and EOS only
    /// as the last response token.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let bad = |detail: String| {
            Err(Error::Format {
                what: "sample",
                detail,
            })
        };
        if self.prompt.is_empty() || self.response.is_empty() {
            return bad("empty prompt or response".into());
        }
        let n = self.prompt.len() + self.response.len();
        for (i, &t) in self.prompt.iter().chain(&self.response).enumerate() {
            if t as usize >= vocab.size {
                return bad(format!("token {t} outside vocabulary of {}", vocab.size));
            }
            let ok = if t == vocab.bos() {
                i == 0
            } else if t == vocab.eos() {
                i == n - 1 && i >= self.prompt.len()
            } else {
                !vocab.is_reserved(t)
            };
            if !ok {
                return bad(format!("reserved token {t} at position {i}"));
            }
        }
        Ok(())
    }
}

pub fn write_jsonl(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&to_jsonl_bytes(samples)?)
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn to_jsonl_bytes(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Reads a corpus and validates every line against `vocab`.
pub fn read_jsonl(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "corpus line",
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        s.validate(vocab).map_err(|e| Error::Format {
            what: "corpus line",
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        samples.push(s);
    }
    Ok(samples)
}

/// Hex SHA-256 of the canonical JSONL encoding.
pub fn corpus_hash(samples: &[Sample]) -> Result<String> {
    Ok(hex_digest(&to_jsonl_bytes(samples)?))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Replaces every response with the target's greedy continuation of the
/// prompt. Samples whose continuation is an immediate EOS, or that emit a
/// reserved id anywhere but a final EOS, are dropped.
pub fn distill_responses<S: Scalar>(
    samples: &[Sample],
    target: &TargetModel<S>,
    max_new: usize,
) -> Result<Vec<Sample>> {
    if max_new == 0 {
        return Err(Error::config("max_new must be at least 1"));
    }
    let eos = target.config.vocab.eos();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let response = target.ar_decode(&s.prompt, max_new, 0.0, 0)?;
        if response.first().is_none_or(|&t| t == eos) {
            continue;
        }
        let d = Sample {
            prompt: s.prompt.clone(),
            response,
            task: s.task.clone(),
        };
        if d.validate(&target.config.vocab).is_ok() {
            out.push(d);
        }
    }
    Ok(out)
}
