//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op evaluates eagerly and, when any input requires a gradient and the
//! tape is in gradient mode, records what its backward pass needs. Parameters
//! are borrowed rather than copied, so inference over large models stays
//! cheap; a tape built with [`Tape::inference`] records nothing beyond values.

use std::borrow::Cow;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numkernel::kernels::{self, RowParts, RowPartsMut};
use crate::numkernel::mask::AttnMask;
use crate::scalar::Scalar;
use crate::tensor::{Param, ParamVisitor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, S),
    Reshape(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<S>,
    },
    Rope {
        x: Var,
        positions: Rc<[usize]>,
        n_heads: usize,
        theta: f64,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SwiGlu {
        gate: Var,
        up: Var,
    },
    Attention {
        q: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        mask: Rc<AttnMask>,
        n_heads: usize,
        probs: Vec<S>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<S>,
        banned: Vec<usize>,
        probs: Vec<S>,
        denom: S,
    },
    Sum(Var),
}

struct Node<'p, S: Scalar> {
    value: Cow<'p, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<'p, S: Scalar> {
    nodes: Vec<Node<'p, S>>,
    params: HashMap<usize, Var>,
    grad_enabled: bool,
}

fn param_key<S: Scalar>(p: &Param<S>) -> usize {
    p as *const Param<S> as usize
}

impl<'p, S: Scalar> Default for Tape<'p, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates values.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'p, Tensor<S>>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        value: Tensor<S>,
        op: Op<S>,
        inputs: &[Var],
        name: &str,
    ) -> Result<Var> {
        value.check_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Saved backward state is only kept when a gradient can flow.
        let op = if rg && self.grad_enabled {
            op
        } else {
            Op::Leaf
        };
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    /// An owned leaf; `requires_grad` makes its gradient available from
    /// [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.input(t, false)
    }

    /// A borrowed leaf that never receives a gradient.
    pub fn borrowed(&mut self, t: &'p Tensor<S>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// A borrowed parameter. Using the same parameter twice yields one leaf.
    pub fn param(&mut self, p: &'p Param<S>) -> Var {
        let key = param_key(p);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf, p.requires_grad);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::dim(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k) = (av.rows(), av.cols());
        let (kb, n) = if b_transposed {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != kb {
            return Err(Error::dim(format!("matmul inner dimensions {k} vs {kb}")));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, av.data(), bv.data(), b_transposed, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_checked(t, Op::MatMul { a, b, b_transposed }, &[a, b], "matmul")
    }

    /// `x · w + b` with `w: in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "add of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push_checked(t, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.cols() {
            return Err(Error::dim(format!(
                "bias of {} for rows of width {}",
                bv.numel(),
                xv.cols()
            )));
        }
        let mut t = xv.clone();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        self.push_checked(t, Op::AddRow { x, bias }, &[x, bias], "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "mul of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push_checked(t, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * c).collect(),
        )?;
        self.push_checked(t, Op::Scale(x, c), &[x], "scale")
    }

    /// Same row-major data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {shape:?}",
                xv.shape()
            )));
        }
        let t = Tensor::new(shape, xv.data().to_vec())?;
        self.push_checked(t, Op::Reshape(x), &[x], "reshape")
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let cols = xv.cols();
        if gv.numel() != cols {
            return Err(Error::dim(format!(
                "rmsnorm gain {} for width {cols}",
                gv.numel()
            )));
        }
        let mut out = vec![S::zero(); xv.numel()];
        let inv_rms = kernels::rmsnorm(xv.data(), gv.data(), cols, &mut out);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_checked(t, Op::RmsNorm { x, gain, inv_rms }, &[x, gain], "rmsnorm")
    }

    /// Rotary position embedding; `positions[i]` is the absolute position of row `i`.
    pub fn rope(
        &mut self,
        x: Var,
        positions: Rc<[usize]>,
        n_heads: usize,
        theta: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != positions.len() || !xv.cols().is_multiple_of(2 * n_heads) {
            return Err(Error::dim(format!(
                "rope over {:?} with {} positions and {n_heads} heads",
                xv.shape(),
                positions.len()
            )));
        }
        let mut t = xv.clone();
        kernels::rope(t.data_mut(), &positions, n_heads, theta, 1.0);
        self.push_checked(
            t,
            Op::Rope {
                x,
                positions,
                n_heads,
                theta,
            },
            &[x],
            "rope",
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let c = t.cols();
        kernels::softmax_rows(t.data_mut(), c);
        self.push_checked(t, Op::Softmax(x), &[x], "softmax")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::dim(format!(
                    "token id {id} outside table of {vocab} rows"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push_checked(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        )
    }

    /// `silu(gate) ⊙ up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        let (gv, uv) = (self.value(gate), self.value(up));
        if gv.shape() != uv.shape() {
            return Err(Error::dim(format!(
                "swiglu of {:?} and {:?}",
                gv.shape(),
                uv.shape()
            )));
        }
        let data = gv
            .data()
            .iter()
            .zip(uv.data())
            .map(|(&g, &u)| g * kernels::sigmoid(g) * u)
            .collect();
        let t = Tensor::new(gv.shape().to_vec(), data)?;
        self.push_checked(t, Op::SwiGlu { gate, up }, &[gate, up], "swiglu")
    }

    /// SwiGLU feed-forward: `(silu(x·w_gate) ⊙ (x·w_up)) · w_down`.
    pub fn silu_mlp(&mut self, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
        let g = self.matmul(x, w_gate)?;
        let u = self.matmul(x, w_up)?;
        let h = self.swiglu(g, u)?;
        self.matmul(h, w_down)
    }

    /// Masked multi-head attention. The key space is the row-concatenation of
    /// `keys` (and likewise `values`), so cached and fresh keys need no copy.
    pub fn attention(
        &mut self,
        q: Var,
        keys: &[Var],
        values: &[Var],
        mask: Rc<AttnMask>,
        n_heads: usize,
    ) -> Result<Var> {
        let width = self.value(q).cols();
        if !width.is_multiple_of(n_heads) || keys.len() != values.len() || keys.is_empty() {
            return Err(Error::dim("attention heads/keys/values do not line up"));
        }
        for &kv in keys.iter().chain(values) {
            if self.value(kv).cols() != width {
                return Err(Error::dim(format!(
                    "attention key/value width {} vs query {width}",
                    self.value(kv).cols()
                )));
            }
        }
        let keep = self.grad_enabled;
        let (out, probs) = {
            let kp = RowParts::new(keys.iter().map(|&k| self.value(k).data()).collect(), width);
            let vp = RowParts::new(
                values.iter().map(|&v| self.value(v).data()).collect(),
                width,
            );
            kernels::attention_forward(self.value(q).data(), &kp, &vp, &mask, n_heads, keep)?
        };
        let t = Tensor::new(vec![self.value(q).rows(), width], out)?;
        let inputs: Vec<Var> = std::iter::once(q)
            .chain(keys.iter().copied())
            .chain(values.iter().copied())
            .collect();
        let op = Op::Attention {
            q,
            keys: keys.to_vec(),
            values: values.to_vec(),
            mask,
            n_heads,
            probs,
        };
        self.push_checked(t, op, &inputs, "attention")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols needs equal row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        self.push_checked(t, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::dim("concat_rows needs equal widths"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push_checked(t, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::dim(format!("row {i} outside {rows}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        self.push_checked(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
            "gather_rows",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push_checked(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    /// Weighted softmax cross-entropy, `Σ wᵢ·CEᵢ / Σ wᵢ` over rows whose target
    /// is present. Columns in `banned` are excluded from the softmax. A batch
    /// with no targets yields a zero loss.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        weights: &[S],
        banned: &[usize],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::dim(format!(
                "cross_entropy: {rows} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut allowed = vec![true; v];
        for &b in banned {
            if b < v {
                allowed[b] = false;
            }
        }
        let mut probs = vec![S::zero(); rows * v];
        let mut total = S::zero();
        let mut denom = S::zero();
        for r in 0..rows {
            let row = lv.row(r);
            let max = row
                .iter()
                .zip(&allowed)
                .filter(|(_, &a)| a)
                .map(|(&x, _)| x)
                .fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            let pr = &mut probs[r * v..(r + 1) * v];
            for ((p, &x), &a) in pr.iter_mut().zip(row).zip(&allowed) {
                if a {
                    *p = (x - max).exp();
                    sum += *p;
                }
            }
            for p in pr.iter_mut() {
                *p /= sum;
            }
            if let Some(t) = targets[r] {
                if t >= v || !allowed[t] {
                    return Err(Error::contract(format!(
                        "target {t} is not a permitted class"
                    )));
                }
                total += weights[r] * -(pr[t].max(S::min_positive_value())).ln();
                denom += weights[r];
            }
        }
        let loss = if denom > S::zero() {
            total / denom
        } else {
            S::zero()
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            banned: banned.to_vec(),
            probs,
            denom,
        };
        self.push_checked(Tensor::scalar(loss), op, &[logits], "cross_entropy")
    }

    /// Runs the backward pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf = HashMap::new();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaf.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            backprop(&nodes, &node.op, &node.value, &g, &mut grads);
        }

        let params = self.params.into_iter().map(|(k, v)| (k, v.0)).collect();
        Ok(Gradients { leaf, params })
    }
}

/// Returns a zero-initialised gradient buffer for `v`, or `None` when no
/// gradient flows into it.
fn slot<'g, S: Scalar>(
    nodes: &[Node<'_, S>],
    grads: &'g mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'g mut Vec<S>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.numel()]))
}

fn backprop<S: Scalar>(
    nodes: &[Node<'_, S>],
    op: &Op<S>,
    out: &Tensor<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let val = |v: Var| -> &Tensor<S> { &nodes[v.0].value };
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, b_transposed } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.rows(), av.cols());
            let n = out.cols();
            if let Some(da) = slot(nodes, grads, *a) {
                // dA = dC · Bᵀ   (or dC · B when B was used transposed)
                S::gemm(m, n, k, g, bv.data(), !*b_transposed, da, true);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                if *b_transposed {
                    // dB (n×k) = dCᵀ · A
                    S::gemm_at(n, m, k, g, av.data(), db, true);
                } else {
                    // dB (k×n) = Aᵀ · dC
                    S::gemm_at(k, m, n, av.data(), g, db, true);
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::AddRow { x, bias } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            let c = out.cols();
            if let Some(db) = slot(nodes, grads, *bias) {
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c);
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (xv, gv) = (val(*x), val(*gain));
            let cols = xv.cols();
            let mut dgain = slot(nodes, grads, *gain).map(std::mem::take);
            let dx = slot(nodes, grads, *x);
            kernels::rmsnorm_backward(
                xv.data(),
                gv.data(),
                inv_rms,
                g,
                cols,
                dx.map(|v| v.as_mut_slice()),
                dgain.as_deref_mut(),
            );
            if let Some(dg) = dgain {
                grads[gain.0] = Some(dg);
            }
        }
        Op::Rope {
            x,
            positions,
            n_heads,
            theta,
        } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut back = g.to_vec();
                kernels::rope(&mut back, positions, *n_heads, *theta, -1.0);
                dx.iter_mut().zip(&back).for_each(|(d, &v)| *d += v);
            }
        }
        Op::Softmax(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let c = out.cols();
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                    let dot = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum::<S>();
                    for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += y * (gv - dot);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = out.cols();
            if let Some(dt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for (t, &v) in dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                    {
                        *t += v;
                    }
                }
            }
        }
        Op::SwiGlu { gate, up } => {
            let (gv, uv) = (val(*gate).data(), val(*up).data());
            if let Some(dg) = slot(nodes, grads, *gate) {
                for (((d, &go), &x), &u) in dg.iter_mut().zip(g).zip(gv).zip(uv) {
                    let s = kernels::sigmoid(x);
                    *d += go * u * s * (S::one() + x * (S::one() - s));
                }
            }
            if let Some(du) = slot(nodes, grads, *up) {
                for ((d, &go), &x) in du.iter_mut().zip(g).zip(gv) {
                    *d += go * x * kernels::sigmoid(x);
                }
            }
        }
        Op::Attention {
            q,
            keys,
            values,
            mask,
            n_heads,
            probs,
        } => {
            let width = out.cols();
            let kp = RowParts::new(keys.iter().map(|&k| val(k).data()).collect(), width);
            let vp = RowParts::new(values.iter().map(|&v| val(v).data()).collect(), width);
            // Scratch buffers for every part; merged into the real slots after.
            let mut dq = vec![S::zero(); val(*q).numel()];
            let mut dk: Vec<Vec<S>> = keys
                .iter()
                .map(|&k| vec![S::zero(); val(k).numel()])
                .collect();
            let mut dv: Vec<Vec<S>> = values
                .iter()
                .map(|&v| vec![S::zero(); val(v).numel()])
                .collect();
            {
                let mut dkp =
                    RowPartsMut::new(dk.iter_mut().map(|v| v.as_mut_slice()).collect(), width);
                let mut dvp =
                    RowPartsMut::new(dv.iter_mut().map(|v| v.as_mut_slice()).collect(), width);
                kernels::attention_backward(
                    val(*q).data(),
                    &kp,
                    &vp,
                    mask,
                    *n_heads,
                    probs,
                    g,
                    &mut dq,
                    &mut dkp,
                    &mut dvp,
                );
            }
            let merged = std::iter::once((*q, dq))
                .chain(keys.iter().copied().zip(dk))
                .chain(values.iter().copied().zip(dv));
            for (v, d) in merged {
                if let Some(slot) = slot(nodes, grads, v) {
                    slot.iter_mut().zip(&d).for_each(|(s, &x)| *s += x);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                if let Some(dp) = slot(nodes, grads, p) {
                    for (r, dr) in dp.chunks_mut(c).enumerate() {
                        dr.iter_mut()
                            .zip(&g[r * total + offset..r * total + offset + c])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                if let Some(dp) = slot(nodes, grads, p) {
                    dp.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(d, &v)| *d += v);
                }
                offset += n;
            }
        }
        Op::GatherRows { x, idx } => {
            let c = out.cols();
            if let Some(dx) = slot(nodes, grads, *x) {
                for (r, &i) in idx.iter().enumerate() {
                    dx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            banned,
            probs,
            denom,
        } => {
            if *denom <= S::zero() {
                return;
            }
            let v = val(*logits).cols();
            if let Some(dl) = slot(nodes, grads, *logits) {
                let scale = g[0] / *denom;
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let w = weights[r] * scale;
                    let dr = &mut dl[r * v..(r + 1) * v];
                    for (d, &p) in dr.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *d += w * p;
                    }
                    dr[t] -= w;
                    for &b in banned {
                        if b < v {
                            dr[b] = S::zero();
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    leaf: HashMap<usize, Tensor<S>>,
    params: Vec<(usize, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to a leaf, if one flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaf.get(&v.0)
    }

    pub fn for_param(&self, p: &Param<S>) -> Option<&Tensor<S>> {
        let key = param_key(p);
        self.params
            .iter()
            .find(|(k, _)| *k == key)
            .and_then(|(_, v)| self.leaf.get(v))
    }

    /// Adds every parameter gradient into the matching `Param::grad` of `model`.
    /// The model must be the same (unmoved) instance the tape borrowed from.
    pub fn accumulate_into(&self, model: &mut (impl ParamVisitor<S> + ?Sized)) -> Result<()> {
        let by_key: HashMap<usize, usize> = self.params.iter().copied().collect();
        let mut result = Ok(());
        model.visit_params_mut(&mut |_, p| {
            if let Some(g) = by_key.get(&param_key(p)).and_then(|v| self.leaf.get(v)) {
                if let Err(e) = p.accumulate_grad(g) {
                    result = Err(e);
                }
            }
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w = Param::new(t(&[2], &[1.0, 2.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.for_param(&w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.input(t(&[1, 4], &[0.0; 4]), true);
        let loss = tape.cross_entropy(logits, &[Some(2)], &[1.0], &[]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.wrt(logits).unwrap().data(),
            &[0.25, 0.25, -0.75, 0.25]
        );
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[3, 3], &[1.0, -2.0, 3.0, 0.5, 0.25, 9.0, -1.0, 4.0, 7.0]);
        let mut tape = Tape::inference();
        let eye = tape.constant(Tensor::from_fn(vec![3, 3], |i| {
            if i % 4 == 0 {
                1.0
            } else {
                0.0
            }
        }));
        let av = tape.constant(a.clone());
        let out = tape.matmul(eye, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn backward_on_non_scalar_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_outputs_are_numeric_errors() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::new(vec![1], vec![f32::MAX]).unwrap());
        assert!(matches!(tape.scale(x, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut tape = Tape::<f32>::inference();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let w = Param::new(t(&[2], &[1.0, 2.0]));
        let mut tape = Tape::inference();
        let wv = tape.param(&w);
        let s = tape.sum(wv).unwrap();
        assert!(!tape.requires_grad(s));
    }

    #[test]
    fn repeated_param_use_shares_one_leaf() {
        let w = Param::new(t(&[1], &[3.0]));
        let mut tape = Tape::new();
        let a = tape.param(&w);
        let b = tape.param(&w);
        assert_eq!(a, b);
    }
}
