//! Verification of a draft block against the target in one forward pass.

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::layers::{argmax_allowed, choose_token, probs_at_temperature};
use crate::model::{DraftBlock, TapSet, TargetKVCache, TargetModel};
use crate::rng::{keyed_uniform, sample_categorical, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyResult {
    /// Number of draft tokens accepted.
    pub accepted: usize,
    /// The target's own token after the accepted prefix.
    pub bonus: TokenId,
}

impl VerifyResult {
    pub fn cycle_tau(&self) -> usize {
        self.accepted + 1
    }
}

/// `min(1, p(d) / q(d))`; a proposal outside the drafter's own support is a
/// contract violation.
pub fn accept_probability(p_d: f64, q_d: f64) -> Result<f64> {
    if !(q_d > 0.0) {
        return Err(Error::contract(
            "drafter proposed a token it gives zero probability",
        ));
    }
    Ok((p_d / q_d).min(1.0))
}

/// `normalize(max(0, p - q))`, the distribution of the replacement token.
pub fn residual_distribution(p: &[f64], q: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let s: f64 = r.iter().sum();
    if s > 0.0 {
        r.into_iter().map(|x| x / s).collect()
    } else {
        // p == q: rejection has probability zero, any valid distribution works.
        p.to_vec()
    }
}

/// Forwards `[anchor, d_1 .. d_g]` and returns the logits and taps of that pass.
fn forward_block<S: Scalar>(
    block: &DraftBlock,
    target: &TargetModel<S>,
    cache: &mut TargetKVCache<S>,
    taps: &TapSet,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if cache.committed_len() != block.anchor_pos {
        return Err(Error::contract(format!(
            "target cache covers {} positions but the block is anchored at {}",
            cache.committed_len(),
            block.anchor_pos
        )));
    }
    let mut tokens = Vec::with_capacity(block.tokens.len() + 1);
    tokens.push(block.anchor);
    tokens.extend_from_slice(&block.tokens);
    let f = target.forward_with_taps(&tokens, cache, taps)?;
    Ok((f.logits, f.taps))
}

/// Rolls the cache back to the anchor plus `accepted` drafts and returns
/// their tap rows.
fn settle<S: Scalar>(
    cache: &mut TargetKVCache<S>,
    anchor_pos: usize,
    accepted: usize,
    taps: &Tensor<S>,
) -> Result<Tensor<S>> {
    cache.truncate(anchor_pos + accepted + 1)?;
    let w = taps.cols();
    Tensor::new(
        vec![accepted + 1, w],
        taps.data()[..(accepted + 1) * w].to_vec(),
    )
}

/// Longest prefix of drafts equal to the target's argmax, plus the target's
/// argmax after it.
pub fn verify_greedy<S: Scalar>(
    block: &DraftBlock,
    target: &TargetModel<S>,
    cache: &mut TargetKVCache<S>,
    taps: &TapSet,
) -> Result<(VerifyResult, Tensor<S>)> {
    let (logits, tap_rows) = forward_block(block, target, cache, taps)?;
    let banned = target.banned();
    let pred = |j: usize| argmax_allowed(logits.row(j), &banned) as TokenId;
    let accepted = block
        .tokens
        .iter()
        .enumerate()
        .take_while(|&(j, &d)| pred(j) == d)
        .count();
    let res = VerifyResult {
        accepted,
        bonus: pred(accepted),
    };
    Ok((res, settle(cache, block.anchor_pos, accepted, &tap_rows)?))
}

/// Rejection-sampling verification. Draws are keyed by absolute position so
/// the result does not depend on how decoding was split into cycles. A block
/// without `q` is treated as a point-mass proposal.
pub fn verify_sampled<S: Scalar>(
    block: &DraftBlock,
    target: &TargetModel<S>,
    cache: &mut TargetKVCache<S>,
    taps: &TapSet,
    temperature: f64,
    seed: u64,
) -> Result<(VerifyResult, Tensor<S>)> {
    if !(temperature > 0.0) {
        return Err(Error::config(
            "sampled verification needs a positive temperature",
        ));
    }
    if let Some(q) = &block.q {
        if q.len() != block.tokens.len() {
            return Err(Error::contract(
                "one proposal distribution per draft token is required",
            ));
        }
    }
    let (logits, tap_rows) = forward_block(block, target, cache, taps)?;
    let banned = target.banned();
    let mut result = None;
    for (j, &d) in block.tokens.iter().enumerate() {
        let pos = (block.anchor_pos + j + 1) as u64;
        let p = probs_at_temperature(logits.row(j), temperature, &banned)?;
        let q = match &block.q {
            Some(q) => q[j].clone(),
            None => {
                let mut one = vec![0.0; p.len()];
                one[d as usize] = 1.0;
                one
            }
        };
        let ap = accept_probability(p[d as usize], q[d as usize])?;
        if keyed_uniform(seed, Domain::Accept, &[pos]) >= ap {
            let r = residual_distribution(&p, &q);
            let bonus =
                sample_categorical(&r, keyed_uniform(seed, Domain::Residual, &[pos])) as TokenId;
            result = Some(VerifyResult { accepted: j, bonus });
            break;
        }
    }
    let res = match result {
        Some(r) => r,
        None => {
            let g = block.tokens.len();
            let bonus = choose_token(
                logits.row(g),
                temperature,
                &banned,
                seed,
                Domain::TargetSample,
                block.anchor_pos + g + 1,
            )?;
            VerifyResult {
                accepted: g,
                bonus: bonus as TokenId,
            }
        }
    };
    Ok((
        res,
        settle(cache, block.anchor_pos, res.accepted, &tap_rows)?,
    ))
}
