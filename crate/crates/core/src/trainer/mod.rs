//! Drafter training: random anchors per sequence and epoch, blocks of
//! `[anchor, MASK...]` under a sparse block mask, position-decayed
//! cross-entropy, and online or cached target features.

pub mod features;

use std::rc::Rc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, TokenId};
use crate::engine::{spec_decode, DecodeConfig, Drafter, ModelDrafter};
use crate::error::{Error, Result};
use crate::model::draft::{DraftRows, Injected};
use crate::model::{DraftModel, TargetModel};
use crate::numkernel::{AdamW, AdamWConfig, AttnMask, CosineSchedule, MaskBuilder, Tape, Var};
use crate::rng::{keyed_rng, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use features::{FeatureCache, FeatureSource};

/// Decay rate of the slot weights for the block sizes with a published setting.
pub fn default_decay_gamma(block_size: usize) -> Option<f64> {
    match block_size {
        16 => Some(7.0),
        10 => Some(5.0),
        8 => Some(4.0),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub anchors_per_seq: usize,
    pub block_size: usize,
    pub decay_gamma: f64,
    /// Weight every slot equally (the loss-decay ablation baseline).
    pub uniform_weights: bool,
    pub feature_mode: FeatureMode,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Samples held out from the end of the corpus for the acceptance probe.
    pub val_count: usize,
    pub val_max_new: usize,
}

impl TrainConfig {
    pub fn for_block_size(block_size: usize) -> Result<Self> {
        let decay_gamma = default_decay_gamma(block_size).ok_or_else(|| {
            Error::config(format!(
                "no default decay rate for block size {block_size}; set it explicitly"
            ))
        })?;
        Ok(TrainConfig {
            epochs: 6,
            lr: 6e-4,
            warmup_ratio: 0.04,
            grad_clip: 1.0,
            weight_decay: 0.01,
            anchors_per_seq: 32,
            block_size,
            decay_gamma,
            uniform_weights: false,
            feature_mode: FeatureMode::Online,
            batch_size: 8,
            seed: 0,
            val_count: 16,
            val_max_new: 48,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors_per_seq == 0 {
            return Err(Error::config("anchors_per_seq must be at least 1"));
        }
        if !(self.decay_gamma > 0.0) {
            return Err(Error::config("decay_gamma must be positive"));
        }
        if self.block_size < 2 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "block_size ≥ 2, epochs ≥ 1 and batch_size ≥ 1 are required",
            ));
        }
        Ok(())
    }

    /// Weight of slot `k` (1-based) of a block.
    pub fn slot_weights(&self) -> Vec<f64> {
        if self.uniform_weights {
            vec![1.0; self.block_size - 1]
        } else {
            loss_weights(self.block_size, self.decay_gamma)
        }
    }
}

/// `w_k = exp(-(k - 1) / decay_gamma)` for slots `k = 1 .. block_size - 1`.
pub fn loss_weights(block_size: usize, decay_gamma: f64) -> Vec<f64> {
    (1..block_size)
        .map(|k| (-((k - 1) as f64) / decay_gamma).exp())
        .collect()
}

/// Anchor positions of one sequence, sorted and unique.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorPlan {
    pub seq_id: u64,
    pub anchors: Vec<usize>,
}

/// Draws `min(k, valid)` anchors without replacement from the response
/// positions that have at least one following token. `seq_len` counts
/// prompt and response tokens.
pub fn sample_anchors(
    seq_len: usize,
    prompt_len: usize,
    k: usize,
    seed: u64,
    seq_id: u64,
    epoch: u64,
) -> Result<AnchorPlan> {
    if k == 0 {
        return Err(Error::config("anchors_per_seq must be at least 1"));
    }
    if seq_len < prompt_len + 2 {
        return Err(Error::contract(format!(
            "response of {} tokens has no valid anchor",
            seq_len.saturating_sub(prompt_len)
        )));
    }
    let valid = seq_len - 1 - prompt_len;
    let mut rng = keyed_rng(seed, Domain::Anchors, &[seq_id, epoch]);
    let mut anchors: Vec<usize> = index::sample(&mut rng, valid, k.min(valid))
        .into_iter()
        .map(|i| prompt_len + i)
        .collect();
    anchors.sort_unstable();
    Ok(AnchorPlan { seq_id, anchors })
}

/// Appends the rows of one sequence's blocks. Block `j` (anchor `a`) sees
/// context columns `ctx_offset .. ctx_offset + a` and its own block columns.
fn push_block_rows(
    mb: &mut MaskBuilder,
    anchors: &[usize],
    block_size: usize,
    ctx_offset: usize,
    block_offset: usize,
) {
    for (j, &a) in anchors.iter().enumerate() {
        let own = block_offset + j * block_size;
        for _ in 0..block_size {
            mb.push_row(&[ctx_offset..ctx_offset + a, own..own + block_size]);
        }
    }
}

/// Mask for one sequence: query rows are the concatenated blocks, key columns
/// are `context_len` context positions followed by the block rows. A block
/// anchored at `p` sees context positions strictly before `p` (the anchor's
/// own feature does not exist yet when it is drafted) and every slot of its
/// own block; blocks never see each other.
pub fn build_block_mask(anchors: &[usize], block_size: usize, context_len: usize) -> AttnMask {
    let mut mb = AttnMask::builder(context_len + anchors.len() * block_size);
    push_block_rows(&mut mb, anchors, block_size, 0, context_len);
    mb.finish()
}

/// Reference evaluation of the weighted block loss over explicit logits.
/// `logits[b][k-1]` is slot `k` of block `b`; `labels[b][k-1]` its target or
/// `None` when past the sequence end.
pub fn block_ce_loss(
    logits: &[Vec<Vec<f64>>],
    labels: &[Vec<Option<usize>>],
    weights: &[f64],
) -> f64 {
    let (mut total, mut denom) = (0.0, 0.0);
    for (blk, lab) in logits.iter().zip(labels) {
        for (k, (row, l)) in blk.iter().zip(lab).enumerate() {
            let Some(t) = *l else { continue };
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += weights[k] * (lse - row[t]);
            denom += weights[k];
        }
    }
    if denom > 0.0 {
        total / denom
    } else {
        0.0
    }
}

/// One sequence of a training batch.
pub struct SeqItem<'a, S> {
    pub tokens: &'a [TokenId],
    pub anchors: &'a [usize],
    /// `len(tokens) × (n_feat · d_target)`; required iff conditioning is on.
    pub taps: Option<&'a Tensor<S>>,
}

/// Work done by one batch forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchStats {
    /// Block rows forwarded (anchors × block size).
    pub query_rows: usize,
    /// Context positions available to blocks.
    pub context_rows: usize,
    /// Allowed attention cells over all layers' masks (one mask per batch).
    pub attention_cells: usize,
}

pub struct BatchLoss {
    pub loss: Var,
    /// Leaf holding the concatenated tap features (conditioned only).
    pub taps: Option<Var>,
    pub stats: BatchStats,
}

/// Records the weighted block loss of a batch on `tape`. With
/// `taps_requires_grad` the tap leaf receives gradients (used to verify that
/// no block reads future context).
pub fn batch_loss<'p, S: Scalar>(
    tape: &mut Tape<'p, S>,
    model: &'p DraftModel<S>,
    items: &[SeqItem<'_, S>],
    weights: &[f64],
    taps_requires_grad: bool,
) -> Result<BatchLoss> {
    let b = model.config.block_size;
    let mask_id = model.config.vocab.mask();
    let conditioned = model.config.conditioning;
    let n_ctx: usize = items.iter().map(|it| it.tokens.len()).sum();
    let n_blk: usize = items.iter().map(|it| it.anchors.len() * b).sum();

    let mut ids: Vec<TokenId> = Vec::new();
    let mut positions: Vec<usize> = Vec::new();
    let mut targets: Vec<Option<usize>> = Vec::new();
    let mut row_w: Vec<S> = Vec::new();

    // Unconditioned: context rows are the drafter's own causal rows.
    let (n_rows, n_keys) = if conditioned {
        (n_blk, n_ctx + n_blk)
    } else {
        (n_ctx + n_blk, n_ctx + n_blk)
    };
    let mut mb = AttnMask::builder(n_keys);
    if !conditioned {
        let mut off = 0;
        for it in items {
            for (i, &t) in it.tokens.iter().enumerate() {
                ids.push(t);
                positions.push(i);
                targets.push(None);
                row_w.push(S::zero());
                mb.push_row(&[off..off + i + 1]);
            }
            off += it.tokens.len();
        }
    }
    let (mut ctx_off, mut blk_off) = (0, n_ctx);
    for it in items {
        let n = it.tokens.len();
        for &a in it.anchors {
            if a + 1 >= n {
                return Err(Error::contract(format!(
                    "anchor {a} has no label in a sequence of {n}"
                )));
            }
            for k in 0..b {
                ids.push(if k == 0 { it.tokens[a] } else { mask_id });
                positions.push(a + k);
                let label = (k > 0 && a + k < n).then(|| it.tokens[a + k] as usize);
                targets.push(label);
                row_w.push(if k > 0 {
                    S::from_f64_lossy(weights[k - 1])
                } else {
                    S::zero()
                });
            }
        }
        push_block_rows(&mut mb, it.anchors, b, ctx_off, blk_off);
        ctx_off += n;
        blk_off += it.anchors.len() * b;
    }
    let mask = Rc::new(mb.finish());
    debug_assert_eq!(mask.n_queries(), n_rows);
    let stats = BatchStats {
        query_rows: n_blk,
        context_rows: n_ctx,
        attention_cells: mask.total_allowed() * model.config.n_layers,
    };

    let (injected, taps_var) = if conditioned {
        let d_in = model.config.n_feat() * model.config.d_target;
        let mut data = Vec::with_capacity(n_ctx * d_in);
        let mut ctx_pos = Vec::with_capacity(n_ctx);
        for it in items {
            let t = it
                .taps
                .ok_or_else(|| Error::contract("conditioned training needs tap features"))?;
            if t.rows() != it.tokens.len() || t.cols() != d_in {
                return Err(Error::dim(format!(
                    "tap features {:?} for {} tokens of width {d_in}",
                    t.shape(),
                    it.tokens.len()
                )));
            }
            data.extend_from_slice(t.data());
            ctx_pos.extend(0..it.tokens.len());
        }
        let v = tape.input(Tensor::new(vec![n_ctx, d_in], data)?, taps_requires_grad);
        (
            Some(Injected {
                taps: v,
                positions: ctx_pos.into(),
            }),
            Some(v),
        )
    } else {
        if items.iter().any(|it| it.taps.is_some()) {
            return Err(Error::contract(
                "an unconditioned drafter takes no context features",
            ));
        }
        (None, None)
    };

    let rows = DraftRows {
        ids: &ids,
        positions: positions.into(),
        mask,
    };
    let (h, _) = model.forward_tape(tape, None, injected.as_ref(), &rows)?;
    let logits = model.head_tape(tape, h)?;
    let loss = tape.cross_entropy(logits, &targets, &row_w, &model.banned())?;
    Ok(BatchLoss {
        loss,
        taps: taps_var,
        stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_tau: f64,
    pub lr: f64,
    pub skipped_sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Loss of the very first batch (used to compare feature modes).
    pub first_batch_loss: f64,
    pub train_sequences: usize,
    pub val_sequences: usize,
}

/// Splits off the validation tail used by the acceptance probe.
pub fn split_validation(corpus: &[Sample], val_count: usize) -> (&[Sample], &[Sample]) {
    let v = val_count.min(corpus.len() / 2);
    corpus.split_at(corpus.len() - v)
}

/// Mean acceptance length of greedy speculative decoding over `prompts`.
pub fn probe_tau<S: Scalar>(
    target: &TargetModel<S>,
    drafter: &DraftModel<S>,
    prompts: &[Sample],
    block_size: usize,
    max_new: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Ok(0.0);
    }
    let mut d = ModelDrafter::new(drafter, target)?;
    let cfg = DecodeConfig {
        block_size,
        max_new,
        ..DecodeConfig::default()
    };
    let (mut tokens, mut cycles) = (0usize, 0usize);
    for s in prompts {
        d.reset();
        let (_, m) = spec_decode(&s.prompt, target, &mut d, &cfg)?;
        tokens += m.cycle_tokens;
        cycles += m.cycles;
    }
    Ok(if cycles == 0 {
        0.0
    } else {
        tokens as f64 / cycles as f64
    })
}

/// Trains the drafter's own parameters (fusion, mask embedding, blocks, norm)
/// against the frozen target. The last `val_count` samples are held out.
pub fn train_drafter<S: Scalar>(
    drafter: &mut DraftModel<S>,
    target: &TargetModel<S>,
    corpus: &[Sample],
    config: &TrainConfig,
    features: FeatureSource<'_>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.validate()?;
    if config.block_size != drafter.config.block_size {
        return Err(Error::config(
            "training block size differs from the drafter's",
        ));
    }
    if drafter.target_hash != target.hash()? {
        return Err(Error::HashMismatch {
            what: "drafter's target".into(),
            expected: drafter.target_hash.clone(),
            found: target.hash()?,
        });
    }
    let (train, val) = split_validation(corpus, config.val_count);
    let usable: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].response.len() >= 2)
        .collect();
    let skipped = train.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::config(
            "no training sequence has a response of at least two tokens",
        ));
    }
    features.check(target, drafter, corpus)?;

    drafter.set_trainable();
    let weights = config.slot_weights();
    let steps_per_epoch = usable.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(
        config.lr,
        config.warmup_ratio,
        (steps_per_epoch * config.epochs) as u64,
    );
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        grad_clip_norm: Some(config.grad_clip),
        ..AdamWConfig::default()
    });

    let tokens: Vec<Vec<TokenId>> = train.iter().map(Sample::tokens).collect();
    let mut order = usable.clone();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut first_batch_loss = f64::NAN;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        crate::model::target::shuffle(&mut order, config.seed, epoch as u64);
        let (mut total, mut lr) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let plans: Vec<AnchorPlan> = chunk
                .iter()
                .map(|&i| {
                    sample_anchors(
                        tokens[i].len(),
                        train[i].prompt.len(),
                        config.anchors_per_seq,
                        config.seed,
                        i as u64,
                        epoch as u64,
                    )
                })
                .collect::<Result<_>>()?;
            let taps: Vec<Option<Tensor<S>>> = chunk
                .iter()
                .map(|&i| features.taps_for(target, drafter, i, &tokens[i]))
                .collect::<Result<_>>()?;
            let items: Vec<SeqItem<'_, S>> = chunk
                .iter()
                .zip(&plans)
                .zip(&taps)
                .map(|((&i, p), t)| SeqItem {
                    tokens: &tokens[i],
                    anchors: &p.anchors,
                    taps: t.as_ref(),
                })
                .collect();
            let grads = {
                let mut tape = Tape::new();
                let out = batch_loss(&mut tape, drafter, &items, &weights, false)?;
                let l = tape.value(out.loss).item()?.as_f64();
                if !l.is_finite() {
                    return Err(Error::Numeric("drafter loss diverged".into()));
                }
                if step == 0 {
                    first_batch_loss = l;
                }
                total += l;
                tape.backward(out.loss)?
            };
            grads.accumulate_into(drafter)?;
            lr = schedule.lr(step);
            opt.step(drafter, lr)?;
            step += 1;
        }
        let val_tau = probe_tau(target, drafter, val, config.block_size, config.val_max_new)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: total / steps_per_epoch as f64,
            val_tau,
            lr,
            skipped_sequences: skipped,
        };
        on_epoch(&entry);
        epochs.push(entry);
    }
    drafter.freeze();
    Ok(TrainReport {
        epochs,
        first_batch_loss,
        train_sequences: usable.len(),
        val_sequences: val.len(),
    })
}

/// Paired training runs from one initialisation: decayed vs uniform slot weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayAblation {
    pub decayed: Vec<EpochLog>,
    pub uniform: Vec<EpochLog>,
}

pub fn loss_decay_ablation<S: Scalar>(
    initial: &DraftModel<S>,
    target: &TargetModel<S>,
    corpus: &[Sample],
    config: &TrainConfig,
    features: FeatureSource<'_>,
) -> Result<DecayAblation> {
    let run = |uniform: bool| -> Result<Vec<EpochLog>> {
        let mut d = initial.clone();
        let cfg = TrainConfig {
            uniform_weights: uniform,
            ..config.clone()
        };
        Ok(train_drafter(&mut d, target, corpus, &cfg, features, |_| {})?.epochs)
    };
    Ok(DecayAblation {
        decayed: run(false)?,
        uniform: run(true)?,
    })
}
