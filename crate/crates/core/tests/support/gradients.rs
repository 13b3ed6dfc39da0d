//! Finite-difference oracles shared by the gradient tests and the acceptance
//! run: every tape op on random inputs, a small MLP, and the full drafter
//! training loss on a model small enough to perturb every trainable scalar.
//!
//! f32 gradients are compared against central differences of an f64 shadow
//! holding the same (f32-rounded) weights. Differencing the f32 loss itself
//! measures f32 rounding of the loss, not the gradient.

use std::rc::Rc;

use blockspec::corpus::{TokenId, Vocab};
use blockspec::model::{DraftConfig, DraftModel, TargetConfig, TargetModel};
use blockspec::numkernel::gradcheck::{
    analytic_gradients, check_gradients, compare_with_differences, GradCheckReport,
};
use blockspec::numkernel::{AttnMask, Tape, Var};
use blockspec::rng::{keyed_rng, Domain};
use blockspec::trainer::{batch_loss, loss_weights, SeqItem};
use blockspec::{Param, ParamVisitor, Result, Scalar, Tensor};
use rand::Rng;

pub const F64_EPS: f64 = 1e-6;
pub const F64_FLOOR: f64 = 1e-8;
pub const F32_FLOOR: f64 = 1e-3;

// ---- per-op checks ----

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = keyed_rng(
        seed,
        Domain::Init,
        &[shape.iter().product::<usize>() as u64],
    );
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// One op applied to leaf inputs; the result is reduced to a scalar by a
/// fixed random projection so every output element carries gradient.
#[derive(Clone, Copy, Debug)]
pub enum Case {
    MatMul,
    MatMulT,
    Linear,
    Add,
    AddRow,
    Mul,
    Scale,
    RmsNorm,
    Rope,
    Softmax,
    Embedding,
    SwiGlu,
    SiluMlp,
    Attention,
    ConcatCols,
    ConcatRows,
    GatherRows,
    Sum,
    CrossEntropy,
    /// Per-chunk normalisation of wide rows, as in tap fusion.
    Reshape,
}

pub const CASES: [Case; 20] = [
    Case::MatMul,
    Case::MatMulT,
    Case::Linear,
    Case::Add,
    Case::AddRow,
    Case::Mul,
    Case::Scale,
    Case::RmsNorm,
    Case::Rope,
    Case::Softmax,
    Case::Embedding,
    Case::SwiGlu,
    Case::SiluMlp,
    Case::Attention,
    Case::ConcatCols,
    Case::ConcatRows,
    Case::GatherRows,
    Case::Sum,
    Case::CrossEntropy,
    Case::Reshape,
];

impl Case {
    fn inputs(self) -> Vec<Vec<usize>> {
        match self {
            Case::MatMul => vec![vec![3, 4], vec![4, 5]],
            Case::MatMulT => vec![vec![3, 4], vec![5, 4]],
            Case::Linear => vec![vec![3, 4], vec![4, 5], vec![5]],
            Case::Add | Case::Mul | Case::SwiGlu => vec![vec![3, 4], vec![3, 4]],
            Case::AddRow => vec![vec![3, 4], vec![4]],
            Case::Scale | Case::Softmax | Case::Sum => vec![vec![3, 4]],
            Case::RmsNorm => vec![vec![3, 4], vec![4]],
            Case::Reshape => vec![vec![2, 6], vec![3]],
            Case::Rope => vec![vec![3, 8]],
            Case::Embedding => vec![vec![6, 4]],
            Case::SiluMlp => vec![vec![3, 4], vec![4, 6], vec![4, 6], vec![6, 4]],
            // Query, cached keys and values, fresh keys and values.
            Case::Attention => vec![vec![3, 4], vec![2, 4], vec![2, 4], vec![3, 4], vec![3, 4]],
            Case::ConcatCols => vec![vec![3, 2], vec![3, 3]],
            Case::ConcatRows => vec![vec![2, 3], vec![1, 3]],
            Case::GatherRows => vec![vec![4, 3]],
            Case::CrossEntropy => vec![vec![4, 5]],
        }
    }

    fn apply<S: Scalar>(self, t: &mut Tape<'_, S>, x: &[Var]) -> Result<Var> {
        match self {
            Case::MatMul => t.matmul(x[0], x[1]),
            Case::MatMulT => t.matmul_t(x[0], x[1]),
            Case::Linear => t.linear(x[0], x[1], Some(x[2])),
            Case::Add => t.add(x[0], x[1]),
            Case::AddRow => t.add_row(x[0], x[1]),
            Case::Mul => t.mul(x[0], x[1]),
            Case::Scale => t.scale(x[0], S::from_f64_lossy(-1.7)),
            Case::RmsNorm => t.rmsnorm(x[0], x[1]),
            Case::Reshape => {
                let chunks = t.reshape(x[0], vec![4, 3])?;
                let normed = t.rmsnorm(chunks, x[1])?;
                t.reshape(normed, vec![2, 6])
            }
            Case::Rope => t.rope(x[0], Rc::from(vec![0, 3, 9]), 2, 10_000.0),
            Case::Softmax => t.softmax(x[0]),
            Case::Embedding => t.embedding(x[0], &[4, 0, 4, 2]),
            Case::SwiGlu => t.swiglu(x[0], x[1]),
            Case::SiluMlp => t.silu_mlp(x[0], x[1], x[2], x[3]),
            Case::Attention => {
                let mut b = AttnMask::builder(5);
                b.push_row(&[0..1, 2..3]);
                b.push_row(&[0..4]);
                b.push_row(&[1..2, 3..5]);
                t.attention(x[0], &[x[1], x[3]], &[x[2], x[4]], Rc::new(b.finish()), 2)
            }
            Case::ConcatCols => t.concat_cols(&[x[0], x[1]]),
            Case::ConcatRows => t.concat_rows(&[x[0], x[1]]),
            Case::GatherRows => t.gather_rows(x[0], &[3, 1, 1]),
            Case::Sum => t.sum(x[0]),
            Case::CrossEntropy => t.cross_entropy(
                x[0],
                &[Some(1), None, Some(4), Some(0)],
                &[1.0, 0.5, 0.25, 2.0].map(S::from_f64_lossy),
                &[2],
            ),
        }
    }
}

/// Loss and, optionally, gradients with respect to each input.
fn op_loss<S: Scalar>(case: Case, inputs: &[Tensor<f64>], backward: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<S>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.cast(), true)).collect();
    let out = case.apply(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let proj = tape.constant(random(&shape, 99).cast());
    let weighted = tape.mul(out, proj).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let value = tape.value(loss).item().unwrap().as_f64();
    if !backward {
        return (value, Vec::new());
    }
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads.wrt(v).map_or(vec![0.0; x.numel()], |g| {
                g.data().iter().map(|v| v.as_f64()).collect()
            })
        })
        .collect();
    (value, g)
}

pub fn op_error<S: Scalar>(case: Case, floor: f64) -> f64 {
    let inputs: Vec<Tensor<f64>> = case
        .inputs()
        .iter()
        .enumerate()
        .map(|(i, s)| random(s, 7 + i as u64).cast::<S>().cast())
        .collect();
    let (_, analytic) = op_loss::<S>(case, &inputs, true);
    let mut worst = 0.0f64;
    for (j, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let mut shifted = inputs.clone();
            shifted[j].data_mut()[i] += F64_EPS;
            let plus = op_loss::<f64>(case, &shifted, false).0;
            shifted[j].data_mut()[i] -= 2.0 * F64_EPS;
            let minus = op_loss::<f64>(case, &shifted, false).0;
            let numeric = (plus - minus) / (2.0 * F64_EPS);
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(floor));
        }
    }
    worst
}

// ---- small MLP ----

pub struct Mlp<S> {
    pub layers: Vec<(Param<S>, Param<S>)>,
}

impl<S: Scalar> ParamVisitor<S> for Mlp<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<S>)) {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            f(&format!("l{i}.w"), w);
            f(&format!("l{i}.b"), b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            f(&format!("l{i}.w"), w);
            f(&format!("l{i}.b"), b);
        }
    }
}

impl<S: Scalar> Mlp<S> {
    /// Three linear layers, 4 → 8 → 8 → 3, with a SwiGLU-style gate between.
    pub fn new() -> Self {
        let dims = [4usize, 8, 8, 3];
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let w = Param::new(random(&[d[0], d[1]], 30 + i as u64).cast());
                let b = Param::new(random(&[d[1]], 40 + i as u64).cast());
                (w, b)
            })
            .collect();
        Mlp { layers }
    }

    pub fn cast<T: Scalar>(&self) -> Mlp<T> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (w.cast(), b.cast()))
                .collect(),
        }
    }

    pub fn trainable(&self) -> usize {
        self.layers
            .iter()
            .map(|(w, b)| w.value.numel() + b.value.numel())
            .sum()
    }
}

pub fn mlp_loss<S: Scalar>(m: &mut Mlp<S>, backward: bool) -> Result<f64> {
    let (value, grads) = {
        let mut tape = if backward {
            Tape::new()
        } else {
            Tape::inference()
        };
        let mut h = tape.constant(random(&[5, 4], 50).cast());
        for (i, (w, b)) in m.layers.iter().enumerate() {
            let (wv, bv) = (tape.param(w), tape.param(b));
            h = tape.linear(h, wv, Some(bv))?;
            if i + 1 < m.layers.len() {
                h = tape.swiglu(h, h)?;
            }
        }
        let targets = [Some(0), Some(2), Some(1), None, Some(2)];
        let loss = tape.cross_entropy(h, &targets, &[S::one(); 5], &[])?;
        let value = tape.value(loss).item()?.as_f64();
        (
            value,
            if backward {
                Some(tape.backward(loss)?)
            } else {
                None
            },
        )
    };
    if let Some(g) = grads {
        g.accumulate_into(m)?;
    }
    Ok(value)
}

// ---- drafter training loss ----

pub fn trainable<S: Scalar>(m: &DraftModel<S>) -> usize {
    let mut n = 0;
    m.visit_params(&mut |_, p| {
        if p.requires_grad {
            n += p.value.numel();
        }
    });
    n
}

pub fn tiny_target() -> TargetModel<f64> {
    let cfg = TargetConfig {
        n_layers: 4,
        d_model: 4,
        n_heads: 1,
        d_ff: 4,
        vocab: Vocab::new(12).unwrap(),
        max_seq: 32,
        rope_theta: 10_000.0,
    };
    TargetModel::new(cfg, 17).unwrap()
}

pub const TOKENS: [TokenId; 8] = [7, 1, 4, 2, 5, 3, 6, 0];
pub const ANCHORS: [usize; 3] = [2, 3, 6];

/// Training loss of a drafter on a fixed sequence, with tap features taken
/// from `target` (which must hold the same weights at the same precision).
pub fn drafter_loss<S: Scalar>(
    target: &TargetModel<S>,
    conditioning: bool,
) -> impl FnMut(&mut DraftModel<S>, bool) -> Result<f64> + '_ {
    move |m: &mut DraftModel<S>, backward| {
        let taps = {
            let mut c = target.new_cache();
            target
                .forward_with_taps(&TOKENS, &mut c, &m.config.taps())?
                .taps
        };
        let item = SeqItem {
            tokens: &TOKENS,
            anchors: &ANCHORS,
            taps: conditioning.then_some(&taps),
        };
        let (loss, grads) = {
            let mut tape = if backward {
                Tape::new()
            } else {
                Tape::inference()
            };
            let out = batch_loss(&mut tape, &*m, &[item], &loss_weights(3, 4.0), false)?;
            let l = tape.value(out.loss).item()?.as_f64();
            (
                l,
                if backward {
                    Some(tape.backward(out.loss)?)
                } else {
                    None
                },
            )
        };
        if let Some(g) = grads {
            g.accumulate_into(m)?;
        }
        Ok(loss)
    }
}

/// One-layer drafter with block size 3 over one tap: under 200 trainable
/// scalars, fusion and mask embedding included.
pub fn drafter<S: Scalar>(target: &TargetModel<S>, conditioning: bool) -> DraftModel<S> {
    let cfg = DraftConfig::for_target(&target.config, 1, 3, 1, conditioning).unwrap();
    let mut d = DraftModel::new(cfg, target, 23).unwrap();
    d.set_trainable();
    let n = trainable(&d);
    assert!(n <= 200, "{n} trainable parameters");
    d
}

/// Worst f64 and f32 relative error of each op.
pub fn op_errors() -> Vec<(Case, f64, f64)> {
    CASES
        .iter()
        .map(|&c| {
            (
                c,
                op_error::<f64>(c, F64_FLOOR),
                op_error::<f32>(c, F32_FLOOR),
            )
        })
        .collect()
}

/// MLP checked in f64, and in f32 against its f64 shadow.
pub fn mlp_reports() -> (GradCheckReport, GradCheckReport) {
    let mut m = Mlp::<f64>::new();
    let r64 = check_gradients(&mut m, F64_EPS, F64_FLOOR, mlp_loss).unwrap();
    let mut m32 = m.cast::<f32>();
    let analytic = analytic_gradients(&mut m32, mlp_loss).unwrap();
    let r32 = compare_with_differences(
        &analytic,
        &mut m32.cast::<f64>(),
        F64_EPS,
        F32_FLOOR,
        mlp_loss,
    )
    .unwrap();
    (r64, r32)
}

/// Drafter loss checked in f64; also returns the trainable count.
pub fn drafter_report_f64(conditioning: bool) -> (GradCheckReport, usize) {
    let target = tiny_target();
    let mut d = drafter(&target, conditioning);
    let n = trainable(&d);
    let r = check_gradients(
        &mut d,
        F64_EPS,
        F64_FLOOR,
        drafter_loss(&target, conditioning),
    )
    .unwrap();
    (r, n)
}

/// f32 drafter gradients against differences of its f64 shadow.
pub fn drafter_report_f32() -> (GradCheckReport, usize) {
    let target = tiny_target().cast::<f32>();
    let mut d = drafter(&target, true);
    let n = trainable(&d);
    let analytic = analytic_gradients(&mut d, drafter_loss(&target, true)).unwrap();
    let shadow_target = target.cast::<f64>();
    let r = compare_with_differences(
        &analytic,
        &mut d.cast::<f64>(),
        F64_EPS,
        F32_FLOOR,
        drafter_loss(&shadow_target, true),
    )
    .unwrap();
    (r, n)
}
