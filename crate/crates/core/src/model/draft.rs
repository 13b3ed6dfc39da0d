//! The block drafter: a shallow transformer that fills a block of masked slots
//! in one forward pass, attending to injected target context (or, with
//! conditioning off, to its own causal cache of the accepted prefix).

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::fusion::{FusedContext, Fusion};
use crate::model::layers::{argmax_allowed, probs_at_temperature, Block, BlockKv, Init};
use crate::model::target::{select_tap_layers, TapSet, TargetConfig, TargetModel};
use crate::numkernel::{AttnMask, Tape, Var};
use crate::rng::{keyed_uniform, sample_categorical, Domain};
use crate::scalar::Scalar;
use crate::tensor::{Param, ParamVisitor, Tensor};

pub const DRAFT_KIND: &str = "draft";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub block_size: usize,
    /// Target layers whose features are fused; empty when conditioning is off.
    pub tap_layers: Vec<usize>,
    pub d_target: usize,
    pub conditioning: bool,
    /// RMS-normalise each tap before fusion. Absent in older checkpoints,
    /// which fused raw features.
    #[serde(default)]
    pub tap_norm: bool,
    /// Rotary positions inside the drafter; off only in tests.
    pub rope: bool,
    pub rope_theta: f64,
    pub vocab: Vocab,
}

impl DraftConfig {
    /// Defaults sized against `target`: same width and heads, taps chosen by
    /// [`select_tap_layers`].
    pub fn for_target(
        target: &TargetConfig,
        n_layers: usize,
        block_size: usize,
        n_feat: usize,
        conditioning: bool,
    ) -> Result<Self> {
        let tap_layers = if conditioning {
            select_tap_layers(target.n_layers, n_feat)?.0
        } else {
            Vec::new()
        };
        let cfg = DraftConfig {
            n_layers,
            d_model: target.d_model,
            n_heads: target.n_heads,
            d_ff: target.d_ff,
            block_size,
            tap_layers,
            d_target: target.d_model,
            conditioning,
            tap_norm: conditioning,
            rope: true,
            rope_theta: target.rope_theta,
            vocab: target.vocab,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_feat(&self) -> usize {
        self.tap_layers.len()
    }

    pub fn taps(&self) -> TapSet {
        TapSet(self.tap_layers.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.block_size < 2 {
            return Err(Error::config(
                "drafter needs at least one layer and a block of at least 2",
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(2 * self.n_heads) {
            return Err(Error::config(
                "drafter width must split into heads of even width",
            ));
        }
        if self.conditioning == self.tap_layers.is_empty() {
            return Err(Error::config(
                "tap layers must be given exactly when conditioning is on",
            ));
        }
        if self.tap_norm && !self.conditioning {
            return Err(Error::config("tap normalisation needs conditioning"));
        }
        Ok(())
    }
}

/// How slots are filled from the drafter's distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DraftMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// One cycle's proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftBlock {
    pub anchor_pos: usize,
    pub anchor: TokenId,
    /// Proposed tokens for positions `anchor_pos + 1 ..`.
    pub tokens: Vec<TokenId>,
    /// Per-slot proposal distributions; `None` means each token was chosen
    /// deterministically (a point-mass proposal).
    pub q: Option<Vec<Vec<f64>>>,
}

/// Per-layer drafter context. With conditioning on it holds only injected
/// context rows; with conditioning off it holds the drafter's own keys/values
/// of the committed prefix plus tokens not yet processed.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftKVCache<S> {
    pub k: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    len: usize,
    pending: Vec<TokenId>,
    forwards: u64,
}

impl<S: Scalar> DraftKVCache<S> {
    /// Positions covered: cached rows plus pending tokens.
    pub fn committed_len(&self) -> usize {
        self.len + self.pending.len()
    }

    pub fn cached_rows(&self) -> usize {
        self.len
    }

    /// Drafter forwards run against this cache.
    pub fn forward_count(&self) -> u64 {
        self.forwards
    }

    pub fn truncate(&mut self, n: usize) -> Result<()> {
        if n > self.committed_len() {
            return Err(Error::contract(format!(
                "cannot truncate draft cache of {} to {n}",
                self.committed_len()
            )));
        }
        if n >= self.len {
            self.pending.truncate(n - self.len);
        } else {
            self.pending.clear();
            for t in self.k.iter_mut().chain(self.v.iter_mut()) {
                t.truncate_rows(n);
            }
            self.len = n;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DraftModel<S> {
    pub config: DraftConfig,
    /// Frozen copies of the target's token embedding and output head.
    pub embed: Param<S>,
    pub head: Param<S>,
    pub fusion: Option<Fusion<S>>,
    pub mask_emb: Param<S>,
    pub blocks: Vec<Block<S>>,
    pub final_norm: Param<S>,
    /// Hash of the target checkpoint the shared weights came from.
    pub target_hash: String,
}

const SHARED: [&str; 2] = ["embed", "head"];

impl<S: Scalar> ParamVisitor<S> for DraftModel<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<S>)) {
        f("embed", &self.embed);
        f("head", &self.head);
        if let Some(fu) = &self.fusion {
            f("fusion.w", &fu.w);
            f("fusion.b", &fu.b);
        }
        f("mask_emb", &self.mask_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        f("final_norm", &self.final_norm);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f("embed", &mut self.embed);
        f("head", &mut self.head);
        if let Some(fu) = &mut self.fusion {
            f("fusion.w", &mut fu.w);
            f("fusion.b", &mut fu.b);
        }
        f("mask_emb", &mut self.mask_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        f("final_norm", &mut self.final_norm);
    }
}

/// Rows forwarded through the drafter in one pass.
pub struct DraftRows<'a> {
    /// Token ids; the MASK id selects the learned mask embedding.
    pub ids: &'a [TokenId],
    pub positions: Rc<[usize]>,
    /// Columns: cached rows, then injected rows, then these rows.
    pub mask: Rc<AttnMask>,
}

/// Injected context computed on the tape (training path).
pub struct Injected {
    /// `positions × (n_feat · d_target)` tap features.
    pub taps: Var,
    pub positions: Rc<[usize]>,
}

impl<S: Scalar> DraftModel<S> {
    /// Same weights at another precision; the gradient checks evaluate an f64
    /// shadow of an f32 drafter.
    pub fn cast<T: Scalar>(&self) -> DraftModel<T> {
        DraftModel {
            config: self.config.clone(),
            embed: self.embed.cast(),
            head: self.head.cast(),
            fusion: self.fusion.as_ref().map(Fusion::cast),
            mask_emb: self.mask_emb.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            final_norm: self.final_norm.cast(),
            target_hash: self.target_hash.clone(),
        }
    }

    pub fn new(config: DraftConfig, target: &TargetModel<S>, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.d_model != target.config.d_model {
            return Err(Error::config(format!(
                "drafter width {} differs from target width {}; the shared head needs no adapter only when they match",
                config.d_model, target.config.d_model
            )));
        }
        if config.d_target != target.config.d_model || config.vocab != target.config.vocab {
            return Err(Error::config(
                "drafter config does not describe this target",
            ));
        }
        if config.conditioning {
            config.taps().validate(target.config.n_layers)?;
        }
        let mut init = Init::new(seed);
        let d = config.d_model;
        let fusion = config
            .conditioning
            .then(|| Fusion::new(&mut init, config.n_feat() * config.d_target, d));
        let mask_emb = init.normal(1, d, 1.0);
        let blocks = (0..config.n_layers)
            .map(|_| Block::new(&mut init, d, config.d_ff, config.n_layers))
            .collect();
        let final_norm = init.ones(d);
        Ok(DraftModel {
            config,
            embed: Param::frozen(target.embed.value.clone()),
            head: Param::frozen(target.head.value.clone()),
            fusion,
            mask_emb,
            blocks,
            final_norm,
            target_hash: target.hash()?,
        })
    }

    pub fn banned(&self) -> [usize; 2] {
        self.config.vocab.banned_outputs()
    }

    pub fn block_size(&self) -> usize {
        self.config.block_size
    }

    fn tap_width(&self) -> Option<usize> {
        self.config.tap_norm.then_some(self.config.d_target)
    }

    fn rope(&self) -> Option<f64> {
        self.config.rope.then_some(self.config.rope_theta)
    }

    pub fn new_cache(&self) -> DraftKVCache<S> {
        let empty = || {
            (0..self.config.n_layers)
                .map(|_| Tensor::zeros(vec![0, self.config.d_model]))
                .collect()
        };
        DraftKVCache {
            k: empty(),
            v: empty(),
            len: 0,
            pending: Vec::new(),
            forwards: 0,
        }
    }

    /// Runs the blocks over `rows`. Returns the final hidden rows (before the
    /// output norm) and each layer's keys/values for those rows.
    pub fn forward_tape<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        cached: Option<&'p DraftKVCache<S>>,
        injected: Option<&Injected>,
        rows: &DraftRows<'_>,
    ) -> Result<(Var, Vec<BlockKv>)> {
        let vocab = self.config.vocab;
        let ids: Vec<usize> = rows
            .ids
            .iter()
            .map(|&t| {
                if t == vocab.mask() {
                    Ok(vocab.size)
                } else if (t as usize) < vocab.size {
                    Ok(t as usize)
                } else {
                    Err(Error::contract(format!("token {t} outside vocabulary")))
                }
            })
            .collect::<Result<_>>()?;
        let table = {
            let e = tape.param(&self.embed);
            let m = tape.param(&self.mask_emb);
            tape.concat_rows(&[e, m])?
        };
        let mut x = tape.embedding(table, &ids)?;
        let fused = match (injected, &self.fusion) {
            (Some(inj), Some(fu)) => Some((
                fu.fuse_tape(tape, inj.taps, self.tap_width())?,
                inj.positions.clone(),
            )),
            (Some(_), None) => {
                return Err(Error::contract(
                    "an unconditioned drafter takes no context features",
                ))
            }
            (None, _) => None,
        };
        let n_heads = self.config.n_heads;
        let mut own_kv = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let mut ctx = Vec::with_capacity(2);
            if let Some(c) = cached.filter(|c| c.len > 0) {
                ctx.push(BlockKv {
                    k: tape.borrowed(&c.k[l]),
                    v: tape.borrowed(&c.v[l]),
                });
            }
            if let Some((f, pos)) = &fused {
                ctx.push(block.project_kv(tape, *f, pos, n_heads, self.rope())?);
            }
            let (y, own) = block.forward(
                tape,
                x,
                &rows.positions,
                &ctx,
                rows.mask.clone(),
                n_heads,
                self.rope(),
            )?;
            x = y;
            own_kv.push(own);
        }
        Ok((x, own_kv))
    }

    /// Output logits for hidden rows through the drafter norm and the shared head.
    pub fn head_tape<'p>(&'p self, tape: &mut Tape<'p, S>, hidden: Var) -> Result<Var> {
        let g = tape.param(&self.final_norm);
        let h = tape.rmsnorm(hidden, g)?;
        let w = tape.param(&self.head);
        tape.matmul(h, w)
    }

    /// Shared-head logits with banned ids (MASK, PAD) at `-inf`.
    pub fn logits_head(&self, hidden: &Tensor<S>) -> Result<Tensor<S>> {
        if hidden.cols() != self.head.value.rows() {
            return Err(Error::dim(format!(
                "hidden width {} vs head input {}",
                hidden.cols(),
                self.head.value.rows()
            )));
        }
        let mut tape = Tape::inference();
        let h = tape.borrowed(hidden);
        let l = self.head_tape(&mut tape, h)?;
        let mut out = tape.value(l).clone();
        mask_banned(&mut out, &self.banned());
        Ok(out)
    }

    /// Fused features and per-layer injected keys/values for positions
    /// `start ..` from `positions × (n_feat · d_target)` tap features.
    pub fn fused_context(&self, taps: &Tensor<S>, start: usize) -> Result<Vec<FusedContext<S>>> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::contract("an unconditioned drafter takes no context features"))?;
        let n = taps.rows();
        let positions: Rc<[usize]> = (start..start + n).collect();
        let mut tape = Tape::inference();
        let t = tape.borrowed(taps);
        let fused = fusion.fuse_tape(&mut tape, t, self.tap_width())?;
        let mut kv = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            kv.push(block.project_kv(
                &mut tape,
                fused,
                &positions,
                self.config.n_heads,
                self.rope(),
            )?);
        }
        Ok((0..n)
            .map(|r| FusedContext {
                position: start + r,
                fused: tape.value(fused).row(r).to_vec(),
                per_layer_kv: kv
                    .iter()
                    .map(|e| {
                        (
                            tape.value(e.k).row(r).to_vec(),
                            tape.value(e.v).row(r).to_vec(),
                        )
                    })
                    .collect(),
            })
            .collect())
    }

    /// Appends injected context for the next `taps.rows()` positions.
    pub fn inject(&self, cache: &mut DraftKVCache<S>, taps: &Tensor<S>) -> Result<()> {
        let entries = self.fused_context(taps, cache.len)?;
        append_entries(cache, &entries)
    }

    /// Queues accepted tokens for an unconditioned drafter; they are
    /// processed by the next drafting forward.
    pub fn push_tokens(&self, cache: &mut DraftKVCache<S>, tokens: &[TokenId]) -> Result<()> {
        if self.config.conditioning {
            return Err(Error::contract(
                "a conditioned drafter takes context features, not raw tokens",
            ));
        }
        cache.pending.extend_from_slice(tokens);
        Ok(())
    }

    /// Raw logits for the `block_size - 1` masked slots of a block anchored
    /// at `anchor_pos`, in one forward pass.
    pub fn slot_logits(
        &self,
        cache: &mut DraftKVCache<S>,
        anchor: TokenId,
        anchor_pos: usize,
        block_size: usize,
    ) -> Result<Tensor<S>> {
        if block_size < 2 {
            return Err(Error::config("block size must be at least 2"));
        }
        if cache.committed_len() != anchor_pos {
            return Err(Error::contract(format!(
                "draft cache covers {} positions but the anchor sits at {anchor_pos}",
                cache.committed_len()
            )));
        }
        let vocab = self.config.vocab;
        if vocab.is_reserved(anchor) && anchor != vocab.bos() && anchor != vocab.eos() {
            return Err(Error::contract(format!(
                "anchor {anchor} is not a clean token"
            )));
        }
        let base = cache.len;
        let p = cache.pending.len();
        let mut ids = cache.pending.clone();
        ids.push(anchor);
        ids.extend(std::iter::repeat_n(vocab.mask(), block_size - 1));
        let n_keys = base + p + block_size;
        let mut mb = AttnMask::builder(n_keys);
        for i in 0..p {
            mb.push_row(&[0..base + i + 1]);
        }
        for _ in 0..block_size {
            mb.push_row(&[0..n_keys]);
        }
        let positions: Rc<[usize]> = (base..base + p + block_size).collect();
        let rows = DraftRows {
            ids: &ids,
            positions,
            mask: Rc::new(mb.finish()),
        };
        let (logits, new_kv) = {
            let mut tape = Tape::inference();
            let (h, kv) = self.forward_tape(&mut tape, Some(cache), None, &rows)?;
            let slots: Vec<usize> = (p + 1..p + block_size).collect();
            let hs = tape.gather_rows(h, &slots)?;
            let l = self.head_tape(&mut tape, hs)?;
            let d = self.config.d_model;
            let new_kv: Vec<(Vec<S>, Vec<S>)> = kv
                .iter()
                .map(|e| {
                    (
                        tape.value(e.k).data()[..p * d].to_vec(),
                        tape.value(e.v).data()[..p * d].to_vec(),
                    )
                })
                .collect();
            (tape.value(l).clone(), new_kv)
        };
        for (l, (k, v)) in new_kv.into_iter().enumerate() {
            cache.k[l].push_rows(&k)?;
            cache.v[l].push_rows(&v)?;
        }
        cache.len += p;
        cache.pending.clear();
        cache.forwards += 1;
        Ok(logits)
    }

    /// Proposes `block_size - 1` tokens after `anchor` in exactly one forward.
    pub fn draft_block(
        &self,
        cache: &mut DraftKVCache<S>,
        anchor: TokenId,
        anchor_pos: usize,
        block_size: usize,
        mode: DraftMode,
    ) -> Result<DraftBlock> {
        let logits = self.slot_logits(cache, anchor, anchor_pos, block_size)?;
        let banned = self.banned();
        let mut tokens = Vec::with_capacity(block_size - 1);
        let q = match mode {
            DraftMode::Greedy => {
                for r in 0..logits.rows() {
                    tokens.push(argmax_allowed(logits.row(r), &banned) as TokenId);
                }
                None
            }
            DraftMode::Sample { temperature, seed } => {
                let mut qs = Vec::with_capacity(block_size - 1);
                for r in 0..logits.rows() {
                    let q = probs_at_temperature(logits.row(r), temperature, &banned)?;
                    let u =
                        keyed_uniform(seed, Domain::DraftSample, &[(anchor_pos + 1 + r) as u64]);
                    tokens.push(sample_categorical(&q, u) as TokenId);
                    qs.push(q);
                }
                Some(qs)
            }
        };
        Ok(DraftBlock {
            anchor_pos,
            anchor,
            tokens,
            q,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_params_where(
            DRAFT_KIND,
            serde_json::to_value(&self.config)?,
            json!({ "target_hash": self.target_hash }),
            self,
            |name| !SHARED.contains(&name),
        ))
    }

    /// Rebuilds a drafter over `target`, which must be the exact target it
    /// was trained against.
    pub fn from_checkpoint(ckpt: &Checkpoint, target: &TargetModel<S>) -> Result<Self> {
        ckpt.expect_kind(DRAFT_KIND)?;
        let expected = ckpt
            .meta
            .get("target_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let found = target.hash()?;
        if expected != found {
            return Err(Error::HashMismatch {
                what: "drafter's target checkpoint".into(),
                expected,
                found,
            });
        }
        let config: DraftConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = DraftModel::new(config, target, 0)?;
        ckpt.load_params_where(&mut model, |name| !SHARED.contains(&name))?;
        Ok(model)
    }

    /// Marks every drafter-owned parameter trainable and the shared ones frozen.
    pub fn set_trainable(&mut self) {
        self.visit_params_mut(&mut |name, p| p.requires_grad = !SHARED.contains(&name));
    }

    pub fn freeze(&mut self) {
        self.visit_params_mut(&mut |_, p| {
            p.requires_grad = false;
            p.grad = None;
        });
    }
}

pub(crate) fn mask_banned<S: Scalar>(logits: &mut Tensor<S>, banned: &[usize]) {
    let c = logits.cols();
    for row in logits.data_mut().chunks_mut(c) {
        for &b in banned {
            if b < c {
                row[b] = S::neg_infinity();
            }
        }
    }
}

fn append_entries<S: Scalar>(
    cache: &mut DraftKVCache<S>,
    entries: &[FusedContext<S>],
) -> Result<()> {
    if !cache.pending.is_empty() {
        return Err(Error::contract(
            "cannot inject context into a token-prefix cache",
        ));
    }
    for e in entries {
        if e.position != cache.len {
            return Err(Error::contract(format!(
                "context entry for position {} but cache holds {}",
                e.position, cache.len
            )));
        }
        for (l, (k, v)) in e.per_layer_kv.iter().enumerate() {
            cache.k[l].push_rows(k)?;
            cache.v[l].push_rows(v)?;
        }
        cache.len += 1;
    }
    Ok(())
}
