//! Latency measurement and the analytic speedup model.

pub mod cost;
pub mod report;
pub mod suite;
pub mod timing;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, TokenId};
use crate::engine::{spec_decode, DecodeConfig, Drafter};
use crate::error::{Error, Result};
use crate::model::layers::choose_token;
use crate::model::{DraftMode, DraftModel, TapSet, TargetModel};
use crate::rng::Domain;
use crate::scalar::Scalar;

pub use cost::{ar_draft_cost, diff_draft_cost, CostModel};
pub use suite::{run_suite, BenchMatrix, BenchReport, BenchRow, Skip, TimingRow};
pub use timing::{median, Timer, Timing};

/// One timed autoregressive decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArRun {
    pub tokens: Vec<TokenId>,
    pub prefill_ms: f64,
    /// Time of the single-token forwards after the prefill.
    pub step_ms: f64,
    pub steps: usize,
}

/// `TargetModel::ar_decode` with the prefill and per-step forwards timed apart.
pub fn timed_ar_decode<S: Scalar>(
    target: &TargetModel<S>,
    prompt: &[TokenId],
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<ArRun> {
    let mut cache = target.new_cache();
    let eos = target.config.vocab.eos();
    let banned = target.banned();
    let mut run = ArRun {
        tokens: Vec::new(),
        prefill_ms: 0.0,
        step_ms: 0.0,
        steps: 0,
    };
    let t = Instant::now();
    let mut logits = target.forward(prompt, &mut cache)?;
    run.prefill_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    while run.tokens.len() < max_new {
        let pos = cache.committed_len();
        let tok = choose_token(
            logits.row(logits.rows() - 1),
            temperature,
            &banned,
            seed,
            Domain::TargetSample,
            pos,
        )? as TokenId;
        run.tokens.push(tok);
        if tok == eos || run.tokens.len() == max_new {
            break;
        }
        logits = target.forward(&[tok], &mut cache)?;
        run.steps += 1;
    }
    run.step_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok(run)
}

/// End-to-end and analytic speedup of one drafter over a prompt set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupMeasurement {
    pub prompts: usize,
    pub cycles: usize,
    pub cycle_tokens: usize,
    pub tokens: usize,
    pub mean_tau: f64,
    pub tau_histogram: Vec<u64>,
    /// `None` when sampling, where outputs legitimately differ from the baseline.
    pub lossless: Option<bool>,
    pub l_target_ms: f64,
    pub l_spec_ms: f64,
    pub t_draft_ms: f64,
    pub t_verify_ms: f64,
    pub t_parallel_ms: f64,
    pub measured_speedup: f64,
    pub analytic_speedup: f64,
}

/// Decodes every prompt speculatively and compares against the timed
/// baseline runs in `ar` (same prompts, same order). Prefill is excluded
/// from both sides; context fusion counts as drafting.
pub fn measure_speedup<S: Scalar>(
    target: &TargetModel<S>,
    drafter: &mut dyn Drafter<S>,
    prompts: &[Sample],
    ar: &[ArRun],
    cfg: &DecodeConfig,
) -> Result<SpeedupMeasurement> {
    if prompts.len() != ar.len() || prompts.is_empty() {
        return Err(Error::contract("one baseline run per prompt is required"));
    }
    let (mut draft, mut fuse, mut verify, mut spec_ms) = (0.0, 0.0, 0.0, 0.0);
    let (mut cycles, mut cycle_tokens, mut tokens) = (0, 0, 0);
    let mut hist = vec![0u64; cfg.block_size + 1];
    let mut lossless = true;
    for (s, base) in prompts.iter().zip(ar) {
        drafter.reset();
        let (out, m) = spec_decode(&s.prompt, target, drafter, cfg)?;
        lossless &= out == base.tokens;
        draft += m.phase_ms.draft;
        fuse += m.phase_ms.fuse;
        verify += m.phase_ms.verify;
        spec_ms += m.wall_ms - m.phase_ms.prefill;
        cycles += m.cycles;
        cycle_tokens += m.cycle_tokens;
        tokens += out.len();
        for (h, c) in hist.iter_mut().zip(&m.tau_histogram) {
            *h += c;
        }
    }
    let steps: usize = ar.iter().map(|r| r.steps).sum();
    let ar_ms: f64 = ar.iter().map(|r| r.step_ms).sum();
    if cycles == 0 || steps == 0 {
        return Err(Error::contract(
            "prompt set too short to time: no decoding cycles",
        ));
    }
    let l_target = ar_ms / steps as f64;
    let l_spec = spec_ms / cycle_tokens as f64;
    let cm = CostModel {
        t_draft: (draft + fuse) / cycles as f64,
        t_verify: verify / cycles as f64,
        tau: cycle_tokens as f64 / cycles as f64,
        gamma: (cfg.block_size - 1) as f64,
        t_step: l_target,
        t_parallel: draft / cycles as f64,
        l_target,
    };
    Ok(SpeedupMeasurement {
        prompts: prompts.len(),
        cycles,
        cycle_tokens,
        tokens,
        mean_tau: cm.tau,
        tau_histogram: hist,
        lossless: (cfg.temperature == 0.0).then_some(lossless),
        l_target_ms: l_target,
        l_spec_ms: l_spec,
        t_draft_ms: cm.t_draft,
        t_verify_ms: cm.t_verify,
        t_parallel_ms: cm.t_parallel,
        measured_speedup: l_target / l_spec,
        analytic_speedup: cm.speedup()?,
    })
}

/// Drafting cost at one block size: one block forward versus a sequential
/// drafter that needs `block_size - 1` passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftCostRow {
    pub block_size: usize,
    pub t_parallel_ms: f64,
    pub sequential_ms: f64,
    /// One autoregressive target step, for scale.
    pub t_step_ms: f64,
}

/// Times drafting after `prompt` for each block size. The sequential drafter
/// is simulated by `block_size - 1` single-slot passes of the same network.
pub fn draft_cost_curve<S: Scalar>(
    target: &TargetModel<S>,
    model: &DraftModel<S>,
    prompt: &[TokenId],
    block_sizes: &[usize],
    timer: &Timer,
) -> Result<Vec<DraftCostRow>> {
    let mut tcache = target.new_cache();
    let taps = if model.config.conditioning {
        model.config.taps()
    } else {
        TapSet(Vec::new())
    };
    let pre = target.forward_with_taps(prompt, &mut tcache, &taps)?;
    let anchor = crate::model::layers::argmax_allowed(
        pre.logits.row(pre.logits.rows() - 1),
        &target.banned(),
    ) as TokenId;
    let n = prompt.len();
    let mut cache = model.new_cache();
    if model.config.conditioning {
        model.inject(&mut cache, &pre.taps)?;
    } else {
        model.push_tokens(&mut cache, prompt)?;
    }
    // Absorbs any queued prefix so every timed pass does the same work.
    model.draft_block(&mut cache, anchor, n, 2, DraftMode::Greedy)?;
    let t_step = timer.measure(|| {
        target.forward(&[anchor], &mut tcache)?;
        tcache.truncate(n)
    })?;
    let par = timer.measure_each(block_sizes.len(), |j| {
        model
            .draft_block(&mut cache, anchor, n, block_sizes[j], DraftMode::Greedy)
            .map(drop)
    })?;
    let seq = timer.measure_each(block_sizes.len(), |j| {
        for _ in 1..block_sizes[j] {
            model.draft_block(&mut cache, anchor, n, 2, DraftMode::Greedy)?;
        }
        Ok(())
    })?;
    let rows = block_sizes
        .iter()
        .zip(par.iter().zip(&seq))
        .map(|(&b, (p, s))| DraftCostRow {
            block_size: b,
            t_parallel_ms: p.median_ms,
            sequential_ms: s.median_ms,
            t_step_ms: t_step.median_ms,
        })
        .collect();
    Ok(rows)
}
