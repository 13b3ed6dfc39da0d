//! Synthetic task generators with highly predictable continuations.
//!
//! Token layout over the content ids (all below the reserved block):
//!
//! | ids      | use                              |
//! |----------|----------------------------------|
//! | 0..=9    | digits (modular chains, counts)  |
//! | 10..=33  | copy alphabet                    |
//! | 34..=42  | grammar terminals                |
//! | 50..=53  | task tags and the separator      |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{TokenId, Vocab};
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Domain};

pub const COPY_ALPHABET: std::ops::RangeInclusive<TokenId> = 10..=33;
pub const TAG_COPY: TokenId = 50;
pub const TAG_MODULAR: TokenId = 51;
pub const TAG_GRAMMAR: TokenId = 52;
pub const SEP: TokenId = 53;

const PHRASE_A: [TokenId; 3] = [34, 35, 36];
const PHRASE_B: [TokenId; 2] = [37, 38];
const PHRASE_C: [TokenId; 4] = [39, 40, 41, 42];

/// Smallest vocabulary that holds the layout above plus the reserved ids.
pub const MIN_TASK_VOCAB: usize = 58;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CopyRepeat,
    ModularChain,
    PatternGrammar,
    /// Round-robin over the three tasks above.
    Mixture,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::CopyRepeat => "copy_repeat",
            TaskKind::ModularChain => "modular_chain",
            TaskKind::PatternGrammar => "pattern_grammar",
            TaskKind::Mixture => "mixture",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy_repeat" => Ok(TaskKind::CopyRepeat),
            "modular_chain" => Ok(TaskKind::ModularChain),
            "pattern_grammar" => Ok(TaskKind::PatternGrammar),
            "mixture" => Ok(TaskKind::Mixture),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }
}

/// `[BOS, TAG, k, prefix.., SEP]` → `prefix` repeated `k` times, then EOS.
pub fn copy_repeat_sample(vocab: &Vocab, prefix: &[TokenId], k: usize) -> Sample {
    let mut prompt = vec![vocab.bos(), TAG_COPY, k as TokenId];
    prompt.extend_from_slice(prefix);
    prompt.push(SEP);
    let mut response: Vec<TokenId> = prefix
        .iter()
        .copied()
        .cycle()
        .take(prefix.len() * k)
        .collect();
    response.push(vocab.eos());
    Sample {
        prompt,
        response,
        task: TaskKind::CopyRepeat.as_str().into(),
    }
}

/// `[BOS, TAG, m, a, b, x0, SEP]` → `x1 .. xn` with `x_{i+1} = (a·x_i + b) mod m`, then EOS.
pub fn modular_chain_sample(vocab: &Vocab, m: u32, a: u32, b: u32, x0: u32, n: usize) -> Sample {
    let prompt = vec![vocab.bos(), TAG_MODULAR, m, a, b, x0, SEP];
    let mut response = Vec::with_capacity(n + 1);
    let mut x = x0;
    for _ in 0..n {
        x = (a * x + b) % m;
        response.push(x);
    }
    response.push(vocab.eos());
    Sample {
        prompt,
        response,
        task: TaskKind::ModularChain.as_str().into(),
    }
}

/// Three-rule regular grammar:
///   S → A T,   T → B S | C S,   S → ε (only at a pair boundary)
/// where A, B, C are fixed phrases. `choices[i]` selects B (false) or C (true).
pub fn pattern_grammar_sample(vocab: &Vocab, choices: &[bool]) -> Sample {
    let prompt = vec![vocab.bos(), TAG_GRAMMAR, SEP];
    let mut response = Vec::new();
    for &c in choices {
        response.extend_from_slice(&PHRASE_A);
        if c {
            response.extend_from_slice(&PHRASE_C);
        } else {
            response.extend_from_slice(&PHRASE_B);
        }
    }
    response.push(vocab.eos());
    Sample {
        prompt,
        response,
        task: TaskKind::PatternGrammar.as_str().into(),
    }
}

fn generate_one(vocab: &Vocab, task: TaskKind, seed: u64, index: u64) -> Sample {
    let mut rng = keyed_rng(seed, Domain::Task, &[task as u64, index]);
    match task {
        TaskKind::CopyRepeat => {
            let len = rng.gen_range(3..=8usize);
            let k = rng.gen_range(2..=4usize);
            let prefix: Vec<TokenId> = (0..len).map(|_| rng.gen_range(COPY_ALPHABET)).collect();
            copy_repeat_sample(vocab, &prefix, k)
        }
        TaskKind::ModularChain => {
            let m = rng.gen_range(4..=9u32);
            let a = rng.gen_range(0..m);
            let b = rng.gen_range(0..m);
            let x0 = rng.gen_range(0..m);
            let n = rng.gen_range(12..=20usize);
            modular_chain_sample(vocab, m, a, b, x0, n)
        }
        TaskKind::PatternGrammar => {
            let pairs = rng.gen_range(2..=4usize);
            let choices: Vec<bool> = (0..pairs).map(|_| rng.gen_bool(0.5)).collect();
            pattern_grammar_sample(vocab, &choices)
        }
        TaskKind::Mixture => {
            let sub = [
                TaskKind::CopyRepeat,
                TaskKind::ModularChain,
                TaskKind::PatternGrammar,
            ][(index % 3) as usize];
            generate_one(vocab, sub, seed, index / 3)
        }
    }
}

/// Deterministic in `(task, seed)`: sample `i` depends only on `(task, seed, i)`.
pub fn gen_task(vocab: &Vocab, task: TaskKind, seed: u64, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::config("count must be at least 1"));
    }
    if vocab.size < MIN_TASK_VOCAB {
        return Err(Error::config(format!(
            "task layout needs a vocabulary of at least {MIN_TASK_VOCAB}"
        )));
    }
    Ok((0..count as u64)
        .map(|i| generate_one(vocab, task, seed, i))
        .collect())
}
