//! Speculative decoding: prefill, single-pass block drafting, lossless
//! verification, cache rollback and bonus-token anchoring.
//!
//! Positions are absolute. A cycle anchored at `p` has the drafter's context
//! cover positions `< p`; the anchor's own target feature appears once the
//! verification forward has processed it, and is committed together with the
//! accepted drafts.

pub mod verify;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::layers::choose_token;
use crate::model::{DraftBlock, DraftKVCache, DraftMode, DraftModel, TapSet, TargetModel};
use crate::rng::Domain;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use verify::{
    accept_probability, residual_distribution, verify_greedy, verify_sampled, VerifyResult,
};

/// Anything that proposes blocks for the engine.
pub trait Drafter<S: Scalar> {
    /// Target tap layers the drafter consumes; empty when it takes no features.
    fn taps(&self) -> TapSet;
    /// Appends committed positions: their tokens and target tap rows.
    fn commit(&mut self, tokens: &[TokenId], taps: &Tensor<S>) -> Result<()>;
    /// Proposes `block_size - 1` tokens after `anchor` (one drafter forward).
    fn draft(
        &mut self,
        anchor: TokenId,
        anchor_pos: usize,
        block_size: usize,
        mode: DraftMode,
    ) -> Result<DraftBlock>;
    fn committed_len(&self) -> usize;
    fn forward_count(&self) -> u64;
    /// Forgets all context so a new prompt can be decoded.
    fn reset(&mut self);
}

/// A trained (or untrained) block drafter with its own cache.
pub struct ModelDrafter<'m, S> {
    model: &'m DraftModel<S>,
    cache: DraftKVCache<S>,
    forwards_before_reset: u64,
}

impl<'m, S: Scalar> ModelDrafter<'m, S> {
    /// Pairs `model` with `target`, which must be the target its shared
    /// embedding and head were taken from.
    pub fn new(model: &'m DraftModel<S>, target: &TargetModel<S>) -> Result<Self> {
        let found = target.hash()?;
        if model.target_hash != found {
            return Err(Error::HashMismatch {
                what: "drafter's target checkpoint".into(),
                expected: model.target_hash.clone(),
                found,
            });
        }
        Ok(ModelDrafter {
            model,
            cache: model.new_cache(),
            forwards_before_reset: 0,
        })
    }

    pub fn cache(&self) -> &DraftKVCache<S> {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut DraftKVCache<S> {
        &mut self.cache
    }
}

impl<S: Scalar> Drafter<S> for ModelDrafter<'_, S> {
    fn taps(&self) -> TapSet {
        self.model.config.taps()
    }

    fn commit(&mut self, tokens: &[TokenId], taps: &Tensor<S>) -> Result<()> {
        if self.model.config.conditioning {
            if taps.rows() != tokens.len() {
                return Err(Error::contract(format!(
                    "{} feature rows for {} tokens",
                    taps.rows(),
                    tokens.len()
                )));
            }
            self.model.inject(&mut self.cache, taps)
        } else {
            self.model.push_tokens(&mut self.cache, tokens)
        }
    }

    fn draft(
        &mut self,
        anchor: TokenId,
        anchor_pos: usize,
        block_size: usize,
        mode: DraftMode,
    ) -> Result<DraftBlock> {
        self.model
            .draft_block(&mut self.cache, anchor, anchor_pos, block_size, mode)
    }

    fn committed_len(&self) -> usize {
        self.cache.committed_len()
    }

    fn forward_count(&self) -> u64 {
        self.forwards_before_reset + self.cache.forward_count()
    }

    fn reset(&mut self) {
        self.forwards_before_reset += self.cache.forward_count();
        self.cache = self.model.new_cache();
    }
}

/// Test double that proposes a known continuation (for example the target's
/// own greedy output), so every proposal is accepted.
pub struct OracleDrafter {
    /// Prompt followed by the expected continuation.
    pub reference: Vec<TokenId>,
    pub filler: TokenId,
    committed: usize,
    forwards: u64,
}

impl OracleDrafter {
    pub fn new(prompt: &[TokenId], continuation: &[TokenId], filler: TokenId) -> Self {
        OracleDrafter {
            reference: [prompt, continuation].concat(),
            filler,
            committed: 0,
            forwards: 0,
        }
    }
}

impl<S: Scalar> Drafter<S> for OracleDrafter {
    fn taps(&self) -> TapSet {
        TapSet(Vec::new())
    }

    fn commit(&mut self, tokens: &[TokenId], _taps: &Tensor<S>) -> Result<()> {
        self.committed += tokens.len();
        Ok(())
    }

    fn draft(
        &mut self,
        anchor: TokenId,
        anchor_pos: usize,
        block_size: usize,
        _mode: DraftMode,
    ) -> Result<DraftBlock> {
        if self.committed != anchor_pos {
            return Err(Error::contract(format!(
                "oracle holds {} positions, anchor at {anchor_pos}",
                self.committed
            )));
        }
        self.forwards += 1;
        let tokens = (anchor_pos + 1..anchor_pos + block_size)
            .map(|p| self.reference.get(p).copied().unwrap_or(self.filler))
            .collect();
        Ok(DraftBlock {
            anchor_pos,
            anchor,
            tokens,
            q: None,
        })
    }

    fn committed_len(&self) -> usize {
        self.committed
    }

    fn forward_count(&self) -> u64 {
        self.forwards
    }

    fn reset(&mut self) {
        self.committed = 0;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub block_size: usize,
    /// 0 selects greedy verification.
    pub temperature: f64,
    /// Drafter sampling temperature; defaults to `temperature`.
    pub draft_temperature: Option<f64>,
    /// Sample from the drafter at `temperature > 0` (otherwise propose its argmax).
    pub sample_drafts: bool,
    pub seed: u64,
    pub max_new: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            block_size: 8,
            temperature: 0.0,
            draft_temperature: None,
            sample_drafts: true,
            seed: 0,
            max_new: 64,
        }
    }
}

impl DecodeConfig {
    fn draft_mode(&self) -> DraftMode {
        if self.temperature > 0.0 && self.sample_drafts {
            DraftMode::Sample {
                temperature: self.draft_temperature.unwrap_or(self.temperature),
                seed: self.seed,
            }
        } else {
            DraftMode::Greedy
        }
    }
}

/// Wall-clock milliseconds per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMs {
    pub prefill: f64,
    pub draft: f64,
    pub verify: f64,
    /// Context projection and injection into the drafter cache.
    pub fuse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub cycles: usize,
    /// Draft tokens accepted over all cycles.
    pub total_accepted: usize,
    /// Tokens emitted by cycles per cycle; the prefill token is not a cycle's.
    pub mean_tau: f64,
    /// `tau_histogram[t]` counts cycles that emitted `t` tokens.
    pub tau_histogram: Vec<u64>,
    pub cycle_taus: Vec<usize>,
    pub draft_forward_count: u64,
    pub verify_forward_count: u64,
    pub prefill_forward_count: u64,
    /// All emitted tokens including the prefill token.
    pub tokens_emitted: usize,
    pub cycle_tokens: usize,
    pub phase_ms: PhaseMs,
    pub wall_ms: f64,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Decodes up to `max_new` tokens after `prompt`. The drafter must be empty.
/// With temperature 0 the output equals `target.ar_decode` exactly.
pub fn spec_decode<S: Scalar>(
    prompt: &[TokenId],
    target: &TargetModel<S>,
    drafter: &mut dyn Drafter<S>,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, DecodeMetrics)> {
    if cfg.block_size < 2 {
        return Err(Error::config("block size must be at least 2"));
    }
    if cfg.temperature < 0.0 || cfg.temperature.is_nan() {
        return Err(Error::config("temperature must be non-negative"));
    }
    if prompt.is_empty() {
        return Err(Error::contract("prompt must not be empty"));
    }
    if drafter.committed_len() != 0 {
        return Err(Error::contract(
            "drafter holds context from another sequence; reset it first",
        ));
    }
    let gamma = cfg.block_size - 1;
    let mut m = DecodeMetrics {
        tau_histogram: vec![0; gamma + 2],
        ..Default::default()
    };
    let mut out = Vec::new();
    if cfg.max_new == 0 {
        return Ok((out, m));
    }
    let wall = Instant::now();
    let taps = drafter.taps();
    let eos = target.config.vocab.eos();
    let banned = target.banned();
    let mode = cfg.draft_mode();
    let forwards_at_start = drafter.forward_count();

    let mut cache = target.new_cache();
    let t = Instant::now();
    let pre = target.forward_with_taps(prompt, &mut cache, &taps)?;
    let last = pre.logits.row(pre.logits.rows() - 1);
    let first = choose_token(
        last,
        cfg.temperature,
        &banned,
        cfg.seed,
        Domain::TargetSample,
        prompt.len(),
    )? as TokenId;
    m.phase_ms.prefill = ms(t);
    m.prefill_forward_count = 1;
    out.push(first);

    let t = Instant::now();
    drafter.commit(prompt, &pre.taps)?;
    m.phase_ms.fuse += ms(t);

    while out.last() != Some(&eos) && out.len() < cfg.max_new {
        let anchor = *out.last().unwrap();
        let anchor_pos = prompt.len() + out.len() - 1;
        let g = gamma.min(cfg.max_new - out.len() - 1);

        let t = Instant::now();
        let mut block = drafter.draft(anchor, anchor_pos, cfg.block_size, mode)?;
        m.phase_ms.draft += ms(t);
        block.tokens.truncate(g);
        if let Some(q) = &mut block.q {
            q.truncate(g);
        }

        let t = Instant::now();
        let (res, accepted_taps) = if cfg.temperature == 0.0 {
            verify_greedy(&block, target, &mut cache, &taps)?
        } else {
            verify_sampled(&block, target, &mut cache, &taps, cfg.temperature, cfg.seed)?
        };
        m.phase_ms.verify += ms(t);
        m.verify_forward_count += 1;

        let mut emitted: Vec<TokenId> = block.tokens[..res.accepted].to_vec();
        emitted.push(res.bonus);
        if let Some(i) = emitted.iter().position(|&x| x == eos) {
            emitted.truncate(i + 1);
        }
        let tau = emitted.len();
        m.cycles += 1;
        m.total_accepted += res.accepted;
        m.cycle_taus.push(tau);
        m.tau_histogram[tau] += 1;
        m.cycle_tokens += tau;
        out.extend_from_slice(&emitted);

        if out.last() != Some(&eos) && out.len() < cfg.max_new {
            let mut committed = vec![anchor];
            committed.extend_from_slice(&block.tokens[..res.accepted]);
            let t = Instant::now();
            drafter.commit(&committed, &accepted_taps)?;
            m.phase_ms.fuse += ms(t);
        }
    }
    m.tokens_emitted = out.len();
    m.mean_tau = if m.cycles == 0 {
        0.0
    } else {
        m.cycle_tokens as f64 / m.cycles as f64
    };
    m.draft_forward_count = drafter.forward_count() - forwards_at_start;
    m.wall_ms = ms(wall);
    Ok((out, m))
}
