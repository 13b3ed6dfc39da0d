//! Pieces shared by the target and the drafter: initialisation, the pre-norm
//! transformer block, and decision helpers over logit rows.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numkernel::{AttnMask, Tape, Var};
use crate::rng::{keyed_rng, sample_categorical, Domain};
use crate::scalar::Scalar;
use crate::tensor::{Param, Tensor};

/// Deterministic parameter initialiser; the `k`-th tensor drawn uses its own
/// keyed stream so adding a tensor never reshuffles the others.
pub struct Init {
    seed: u64,
    counter: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed, counter: 0 }
    }

    pub fn normal<S: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Param<S> {
        self.counter += 1;
        let mut rng = keyed_rng(self.seed, Domain::Init, &[self.counter]);
        let dist = Normal::new(0.0, std).expect("finite std");
        Param::new(Tensor::from_fn(vec![rows, cols], |_| {
            S::from_f64_lossy(dist.sample(&mut rng))
        }))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<S: Scalar>(&mut self, shape: Vec<usize>, bound: f64) -> Param<S> {
        self.counter += 1;
        let mut rng = keyed_rng(self.seed, Domain::Init, &[self.counter]);
        Param::new(Tensor::from_fn(shape, |_| {
            S::from_f64_lossy(rng.gen_range(-bound..=bound))
        }))
    }

    pub fn ones<S: Scalar>(&mut self, n: usize) -> Param<S> {
        Param::new(Tensor::from_fn(vec![n], |_| S::one()))
    }

    pub fn zeros<S: Scalar>(&mut self, shape: Vec<usize>) -> Param<S> {
        Param::new(Tensor::zeros(shape))
    }
}

/// Pre-norm residual block: RMSNorm → multi-head attention → RMSNorm → SwiGLU.
/// Weight matrices are stored `in × out`.
#[derive(Clone, Debug)]
pub struct Block<S> {
    pub attn_norm: Param<S>,
    pub wq: Param<S>,
    pub wk: Param<S>,
    pub wv: Param<S>,
    pub wo: Param<S>,
    pub mlp_norm: Param<S>,
    pub w_gate: Param<S>,
    pub w_up: Param<S>,
    pub w_down: Param<S>,
}

/// Attention keys/values produced by one block for its own rows.
pub struct BlockKv {
    pub k: Var,
    pub v: Var,
}

impl<S: Scalar> Block<S> {
    pub fn cast<T: Scalar>(&self) -> Block<T> {
        Block {
            attn_norm: self.attn_norm.cast(),
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            mlp_norm: self.mlp_norm.cast(),
            w_gate: self.w_gate.cast(),
            w_up: self.w_up.cast(),
            w_down: self.w_down.cast(),
        }
    }

    pub fn new(init: &mut Init, d: usize, d_ff: usize, n_layers: usize) -> Self {
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = std_in / (2.0 * n_layers as f64).sqrt();
        Block {
            attn_norm: init.ones(d),
            wq: init.normal(d, d, std_in),
            wk: init.normal(d, d, std_in),
            wv: init.normal(d, d, std_in),
            wo: init.normal(d, d, std_out),
            mlp_norm: init.ones(d),
            w_gate: init.normal(d, d_ff, std_in),
            w_up: init.normal(d, d_ff, std_in),
            w_down: init.normal(d_ff, d, std_out / (d_ff as f64 / d as f64).sqrt()),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        for (name, p) in self.named() {
            f(&format!("{prefix}.{name}"), p);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        let Block {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            mlp_norm,
            w_gate,
            w_up,
            w_down,
        } = self;
        let all = [
            ("attn_norm", attn_norm),
            ("wq", wq),
            ("wk", wk),
            ("wv", wv),
            ("wo", wo),
            ("mlp_norm", mlp_norm),
            ("w_gate", w_gate),
            ("w_up", w_up),
            ("w_down", w_down),
        ];
        for (name, p) in all {
            f(&format!("{prefix}.{name}"), p);
        }
    }

    fn named(&self) -> [(&'static str, &Param<S>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    /// Key/value rows for an already-normalised (or injected) input `h`.
    pub fn project_kv<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        h: Var,
        positions: &Rc<[usize]>,
        n_heads: usize,
        rope: Option<f64>,
    ) -> Result<BlockKv> {
        let wk = tape.param(&self.wk);
        let wv = tape.param(&self.wv);
        let mut k = tape.matmul(h, wk)?;
        if let Some(theta) = rope {
            k = tape.rope(k, positions.clone(), n_heads, theta)?;
        }
        let v = tape.matmul(h, wv)?;
        Ok(BlockKv { k, v })
    }

    /// Runs the block over rows `x`. The key space seen by the mask is the
    /// row-concatenation of `ctx` followed by the rows' own keys. Returns the
    /// block output and the rows' own keys/values.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        x: Var,
        positions: &Rc<[usize]>,
        ctx: &[BlockKv],
        mask: Rc<AttnMask>,
        n_heads: usize,
        rope: Option<f64>,
    ) -> Result<(Var, BlockKv)> {
        let g = tape.param(&self.attn_norm);
        let h = tape.rmsnorm(x, g)?;
        let wq = tape.param(&self.wq);
        let mut q = tape.matmul(h, wq)?;
        if let Some(theta) = rope {
            q = tape.rope(q, positions.clone(), n_heads, theta)?;
        }
        let own = self.project_kv(tape, h, positions, n_heads, rope)?;
        let keys: Vec<Var> = ctx
            .iter()
            .map(|c| c.k)
            .chain(std::iter::once(own.k))
            .collect();
        let values: Vec<Var> = ctx
            .iter()
            .map(|c| c.v)
            .chain(std::iter::once(own.v))
            .collect();
        let a = tape.attention(q, &keys, &values, mask, n_heads)?;
        let wo = tape.param(&self.wo);
        let a = tape.matmul(a, wo)?;
        let x = tape.add(x, a)?;

        let g2 = tape.param(&self.mlp_norm);
        let h2 = tape.rmsnorm(x, g2)?;
        let (wg, wu, wd) = (
            tape.param(&self.w_gate),
            tape.param(&self.w_up),
            tape.param(&self.w_down),
        );
        let m = tape.silu_mlp(h2, wg, wu, wd)?;
        Ok((tape.add(x, m)?, own))
    }
}

/// Index of the largest logit outside `banned`; ties resolve to the lowest id.
pub fn argmax_allowed<S: Scalar>(row: &[S], banned: &[usize]) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if banned.contains(&i) {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = i;
        }
    }
    best
}

/// `softmax(row / temperature)` in f64 with banned ids at probability zero.
pub fn probs_at_temperature<S: Scalar>(
    row: &[S],
    temperature: f64,
    banned: &[usize],
) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out: Vec<f64> = row.iter().map(|v| v.as_f64() / temperature).collect();
    for &b in banned {
        if b < out.len() {
            out[b] = f64::NEG_INFINITY;
        }
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    out.iter_mut().for_each(|v| *v /= sum);
    if !sum.is_finite() || sum <= 0.0 {
        return Err(Error::Numeric("degenerate softmax".into()));
    }
    Ok(out)
}

/// Greedy pick at temperature 0, otherwise a keyed categorical draw.
pub fn choose_token<S: Scalar>(
    row: &[S],
    temperature: f64,
    banned: &[usize],
    seed: u64,
    domain: Domain,
    pos: usize,
) -> Result<usize> {
    if temperature == 0.0 {
        return Ok(argmax_allowed(row, banned));
    }
    let p = probs_at_temperature(row, temperature, banned)?;
    let u = crate::rng::keyed_uniform(seed, domain, &[pos as u64]);
    Ok(sample_categorical(&p, u))
}
