//! The autoregressive target transformer.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::corpus::{Sample, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::layers::{choose_token, Block, BlockKv, Init};
use crate::numkernel::{AdamW, AdamWConfig, AttnMask, CosineSchedule, Tape, Var};
use crate::rng::{keyed_rng, Domain};
use crate::scalar::Scalar;
use crate::tensor::{Param, ParamVisitor, Tensor};

pub const TARGET_KIND: &str = "target";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: Vocab,
    pub max_seq: usize,
    pub rope_theta: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            n_layers: 12,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            vocab: Vocab::default(),
            max_seq: 512,
            rope_theta: 10_000.0,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 4 {
            return Err(Error::config("target needs at least 4 layers"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(2 * self.n_heads) {
            return Err(Error::config("d_model must split into heads of even width"));
        }
        if self.d_ff == 0 || self.max_seq == 0 {
            return Err(Error::config("d_ff and max_seq must be positive"));
        }
        Vocab::new(self.vocab.size)?;
        Ok(())
    }
}

/// 1-based indices of tapped blocks, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSet(pub Vec<usize>);

impl TapSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let ok = !self.0.is_empty()
            && self.0.windows(2).all(|w| w[0] < w[1])
            && self
                .0
                .iter()
                .all(|&l| (2..=n_layers.saturating_sub(2)).contains(&l));
        if !ok {
            return Err(Error::config(format!(
                "tap layers {:?} invalid for {n_layers} layers",
                self.0
            )));
        }
        Ok(())
    }
}

/// `n_feat` layers spread evenly over `[2, n_layers - 2]`, rounding half away
/// from zero. A single tap sits at the midpoint of that range.
pub fn select_tap_layers(n_layers: usize, n_feat: usize) -> Result<TapSet> {
    if n_layers < 4 || n_feat == 0 || n_feat > n_layers - 3 {
        return Err(Error::config(format!(
            "cannot place {n_feat} taps in {n_layers} layers"
        )));
    }
    let (lo, hi) = (2.0, (n_layers - 2) as f64);
    let layers = if n_feat == 1 {
        vec![((lo + hi) / 2.0).round() as usize]
    } else {
        (0..n_feat)
            .map(|i| (lo + (hi - lo) * i as f64 / (n_feat - 1) as f64).round() as usize)
            .collect()
    };
    let taps = TapSet(layers);
    taps.validate(n_layers)?;
    Ok(taps)
}

/// Per-layer post-rotary keys and values of every committed position.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetKVCache<S> {
    pub k: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    committed: usize,
}

impl<S: Scalar> TargetKVCache<S> {
    pub fn new(config: &TargetConfig) -> Self {
        let empty = || {
            (0..config.n_layers)
                .map(|_| Tensor::zeros(vec![0, config.d_model]))
                .collect()
        };
        TargetKVCache {
            k: empty(),
            v: empty(),
            committed: 0,
        }
    }

    pub fn committed_len(&self) -> usize {
        self.committed
    }

    /// Rolls back to the state after the first `n` tokens.
    pub fn truncate(&mut self, n: usize) -> Result<()> {
        if n > self.committed {
            return Err(Error::contract(format!(
                "cannot truncate cache of {} to {n}",
                self.committed
            )));
        }
        for t in self.k.iter_mut().chain(self.v.iter_mut()) {
            t.truncate_rows(n);
        }
        self.committed = n;
        Ok(())
    }
}

/// Output of one cached forward.
#[derive(Clone, Debug)]
pub struct TargetForward<S> {
    /// `new_positions × vocab`.
    pub logits: Tensor<S>,
    /// `new_positions × (n_taps · d_model)`, tap-major within a row.
    pub taps: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct TargetModel<S> {
    pub config: TargetConfig,
    pub embed: Param<S>,
    pub blocks: Vec<Block<S>>,
    pub final_norm: Param<S>,
    pub head: Param<S>,
}

impl<S: Scalar> ParamVisitor<S> for TargetModel<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<S>)) {
        f("embed", &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        f("final_norm", &self.final_norm);
        f("head", &self.head);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f("embed", &mut self.embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        f("final_norm", &mut self.final_norm);
        f("head", &mut self.head);
    }
}

/// Intermediate values of a forward on a tape.
pub struct TapeForward {
    pub logits: Var,
    /// Post-block residual of every tapped layer, in tap order.
    pub taps: Vec<Var>,
    /// Fresh keys/values per layer for the forwarded rows.
    pub kv: Vec<BlockKv>,
}

impl<S: Scalar> TargetModel<S> {
    pub fn new(config: TargetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let (d, v) = (config.d_model, config.vocab.size);
        let embed = init.normal(v, d, 1.0);
        let blocks = (0..config.n_layers)
            .map(|_| Block::new(&mut init, d, config.d_ff, config.n_layers))
            .collect();
        let final_norm = init.ones(d);
        let head = init.normal(d, v, 1.0 / (d as f64).sqrt());
        Ok(TargetModel {
            config,
            embed,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab
    }

    pub fn banned(&self) -> [usize; 2] {
        self.config.vocab.banned_outputs()
    }

    pub fn new_cache(&self) -> TargetKVCache<S> {
        TargetKVCache::new(&self.config)
    }

    fn rope(&self) -> Option<f64> {
        Some(self.config.rope_theta)
    }

    /// Records a forward over `ids` at `positions`. `ctx` holds per-layer
    /// cached keys/values (the first mask columns); `taps` are 1-based.
    pub fn forward_tape<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        ids: &[usize],
        positions: Rc<[usize]>,
        ctx: Option<&'p TargetKVCache<S>>,
        mask: Rc<AttnMask>,
        taps: &[usize],
    ) -> Result<TapeForward> {
        let table = tape.param(&self.embed);
        let mut x = tape.embedding(table, ids)?;
        let mut tap_vars = Vec::with_capacity(taps.len());
        let mut kv = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let ctx_kv: Vec<BlockKv> = match ctx {
                Some(c) if c.committed > 0 => vec![BlockKv {
                    k: tape.borrowed(&c.k[l]),
                    v: tape.borrowed(&c.v[l]),
                }],
                _ => Vec::new(),
            };
            let (y, own) = block.forward(
                tape,
                x,
                &positions,
                &ctx_kv,
                mask.clone(),
                self.config.n_heads,
                self.rope(),
            )?;
            x = y;
            kv.push(own);
            if taps.contains(&(l + 1)) {
                tap_vars.push(x);
            }
        }
        let g = tape.param(&self.final_norm);
        let h = tape.rmsnorm(x, g)?;
        let head = tape.param(&self.head);
        let logits = tape.matmul(h, head)?;
        Ok(TapeForward {
            logits,
            taps: tap_vars,
            kv,
        })
    }

    /// Forwards `tokens` after the cached prefix, extending the cache.
    pub fn forward_with_taps(
        &self,
        tokens: &[TokenId],
        cache: &mut TargetKVCache<S>,
        taps: &TapSet,
    ) -> Result<TargetForward<S>> {
        if tokens.is_empty() {
            return Err(Error::contract("forward needs at least one token"));
        }
        let start = cache.committed;
        if start + tokens.len() > self.config.max_seq {
            return Err(Error::contract(format!(
                "sequence of {} exceeds max_seq {}",
                start + tokens.len(),
                self.config.max_seq
            )));
        }
        if !taps.is_empty() {
            taps.validate(self.config.n_layers)?;
        }
        let ids = self.check_ids(tokens)?;
        let positions: Rc<[usize]> = (start..start + tokens.len()).collect();
        let mask = Rc::new(AttnMask::causal(start, tokens.len()));
        let (out, new_kv) = {
            let mut tape = Tape::inference();
            let f = self.forward_tape(&mut tape, &ids, positions, Some(cache), mask, &taps.0)?;
            let tap_values: Vec<&Tensor<S>> = f.taps.iter().map(|&v| tape.value(v)).collect();
            let d = self.config.d_model;
            let mut tap_data = Vec::with_capacity(tokens.len() * d * taps.len());
            for r in 0..tokens.len() {
                for t in &tap_values {
                    tap_data.extend_from_slice(t.row(r));
                }
            }
            let out = TargetForward {
                logits: tape.value(f.logits).clone(),
                taps: Tensor::new(vec![tokens.len(), d * taps.len()], tap_data)?,
            };
            let new_kv: Vec<(Vec<S>, Vec<S>)> =
                f.kv.iter()
                    .map(|kv| {
                        (
                            tape.value(kv.k).data().to_vec(),
                            tape.value(kv.v).data().to_vec(),
                        )
                    })
                    .collect();
            (out, new_kv)
        };
        for (l, (k, v)) in new_kv.into_iter().enumerate() {
            cache.k[l].push_rows(&k)?;
            cache.v[l].push_rows(&v)?;
        }
        cache.committed += tokens.len();
        Ok(out)
    }

    pub fn forward(&self, tokens: &[TokenId], cache: &mut TargetKVCache<S>) -> Result<Tensor<S>> {
        Ok(self
            .forward_with_taps(tokens, cache, &TapSet(Vec::new()))?
            .logits)
    }

    fn check_ids(&self, tokens: &[TokenId]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.config.vocab.size {
                    Ok(t as usize)
                } else {
                    Err(Error::contract(format!("token {t} outside vocabulary")))
                }
            })
            .collect()
    }

    /// Token-by-token generation; returns the continuation only, ending at
    /// EOS (inclusive) or after `max_new` tokens.
    pub fn ar_decode(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<TokenId>> {
        if temperature < 0.0 || temperature.is_nan() {
            return Err(Error::config("temperature must be non-negative"));
        }
        let mut cache = self.new_cache();
        let eos = self.config.vocab.eos();
        let banned = self.banned();
        let mut out = Vec::new();
        let mut logits = self.forward(prompt, &mut cache)?;
        while out.len() < max_new {
            let pos = cache.committed;
            let row = logits.row(logits.rows() - 1);
            let tok = choose_token(row, temperature, &banned, seed, Domain::TargetSample, pos)?
                as TokenId;
            out.push(tok);
            if tok == eos || out.len() == max_new {
                break;
            }
            logits = self.forward(&[tok], &mut cache)?;
        }
        Ok(out)
    }

    /// Mean next-token loss over response positions of `samples` (one tape).
    pub fn batch_loss<'p>(&'p self, tape: &mut Tape<'p, S>, samples: &[&Sample]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        let total: usize = samples
            .iter()
            .map(|s| s.prompt.len() + s.response.len())
            .sum();
        let mut mask = AttnMask::builder(total);
        for s in samples {
            let toks = s.tokens();
            let start = ids.len();
            for (i, &t) in toks.iter().enumerate() {
                ids.push(t as usize);
                positions.push(i);
                mask.push_row(&[start..start + i + 1]);
                // Row i predicts token i+1, counted only inside the response.
                let label =
                    (i + 1 >= s.prompt.len() && i + 1 < toks.len()).then(|| toks[i + 1] as usize);
                targets.push(label);
            }
        }
        let n = ids.len();
        let mask = Rc::new(mask.finish());
        let f = self.forward_tape(tape, &ids, positions.into(), None, mask, &[])?;
        let weights = vec![S::one(); n];
        tape.cross_entropy(f.logits, &targets, &weights, &self.banned())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_params(
            TARGET_KIND,
            serde_json::to_value(&self.config)?,
            Value::Null,
            self,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(TARGET_KIND)?;
        let config: TargetConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut model = TargetModel::new(config, 0)?;
        ckpt.load_params(&mut model)?;
        model.freeze();
        Ok(model)
    }

    /// Hex hash of the serialized checkpoint; identifies this exact model.
    pub fn hash(&self) -> Result<String> {
        self.to_checkpoint()?.hash()
    }

    pub fn freeze(&mut self) {
        self.visit_params_mut(&mut |_, p| {
            p.requires_grad = false;
            p.grad = None;
        });
    }

    pub fn cast<T: Scalar>(&self) -> TargetModel<T> {
        TargetModel {
            config: self.config.clone(),
            embed: self.embed.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        TargetTrainConfig {
            epochs: 4,
            batch_size: 16,
            warmup_ratio: 0.04,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTrainLog {
    /// Mean loss over the corpus before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<TargetEpochLog>,
}

fn mean_loss<S: Scalar>(
    model: &TargetModel<S>,
    corpus: &[Sample],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in corpus.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::inference();
        let l = model.batch_loss(&mut tape, &refs)?;
        total += tape.value(l).item()?.as_f64();
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Next-token training on prompt+response with loss on response positions.
/// `on_epoch` observes each epoch's log entry as it completes.
pub fn train_target<S: Scalar>(
    model: &mut TargetModel<S>,
    corpus: &[Sample],
    config: &TargetTrainConfig,
    mut on_epoch: impl FnMut(&TargetEpochLog),
) -> Result<TargetTrainLog> {
    if corpus.is_empty() {
        return Err(Error::config("training corpus is empty"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::config("batch_size and epochs must be positive"));
    }
    model.visit_params_mut(&mut |_, p| p.requires_grad = true);
    let initial_loss = mean_loss(model, corpus, config.batch_size)?;
    let steps_per_epoch = corpus.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(
        config.optimizer.lr,
        config.warmup_ratio,
        (steps_per_epoch * config.epochs) as u64,
    );
    let mut opt = AdamW::new(config.optimizer.clone());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epochs = Vec::new();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        shuffle(&mut order, config.seed, epoch as u64);
        let mut total = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &corpus[i]).collect();
            let grads = {
                let mut tape = Tape::new();
                let loss = model.batch_loss(&mut tape, &batch)?;
                total += tape.value(loss).item()?.as_f64();
                tape.backward(loss)?
            };
            grads.accumulate_into(model)?;
            lr = schedule.lr(step);
            opt.step(model, lr)?;
            step += 1;
        }
        let entry = TargetEpochLog {
            epoch: epoch + 1,
            loss: total / steps_per_epoch as f64,
            lr,
        };
        if !entry.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss diverged in epoch {}",
                epoch + 1
            )));
        }
        on_epoch(&entry);
        epochs.push(entry);
    }
    model.freeze();
    Ok(TargetTrainLog {
        initial_loss,
        epochs,
    })
}

/// Fisher-Yates keyed by `(seed, epoch)`.
pub fn shuffle(order: &mut [usize], seed: u64, epoch: u64) {
    use rand::seq::SliceRandom;
    let mut rng = keyed_rng(seed, Domain::Shuffle, &[epoch]);
    order.shuffle(&mut rng);
}
