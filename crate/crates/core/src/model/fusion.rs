//! Fusion of multi-layer target features into one context vector per position.

use crate::error::{Error, Result};
use crate::model::layers::Init;
use crate::numkernel::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{Param, Tensor};

/// Affine map from concatenated tap features (`n_feat · d_target`) to the
/// drafter width.
#[derive(Clone, Debug)]
pub struct Fusion<S> {
    pub w: Param<S>,
    pub b: Param<S>,
}

/// One position's fused feature and the key/value rows it injects into each
/// drafter layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedContext<S> {
    pub position: usize,
    pub fused: Vec<S>,
    /// `(key, value)` per drafter layer, each `d_draft` wide (heads laid out
    /// contiguously, matching the drafter's own attention rows).
    pub per_layer_kv: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Fusion<S> {
    pub fn cast<T: Scalar>(&self) -> Fusion<T> {
        Fusion {
            w: self.w.cast(),
            b: self.b.cast(),
        }
    }

    pub fn new(init: &mut Init, input: usize, output: usize) -> Self {
        Fusion {
            w: init.normal(input, output, 1.0 / (input as f64).sqrt()),
            b: init.zeros(vec![output]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w.value.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w.value.cols()
    }

    /// With `tap_width` set, each tap's `tap_width` features are RMS-normalised
    /// per position before the affine map.
    pub fn fuse_tape<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        taps: Var,
        tap_width: Option<usize>,
    ) -> Result<Var> {
        let width = tape.value(taps).cols();
        if width != self.input_width() {
            return Err(Error::dim(format!(
                "fusion expects {} features per position, got {width}",
                self.input_width()
            )));
        }
        let taps = match tap_width {
            Some(d) if d == 0 || !width.is_multiple_of(d) => {
                return Err(Error::dim(format!(
                    "{width} features do not split into taps of {d}"
                )))
            }
            Some(d) => {
                let rows = tape.value(taps).rows();
                let split = tape.reshape(taps, vec![rows * width / d, d])?;
                let ones = tape.constant(Tensor::from_fn(vec![d], |_| S::one()));
                let normed = tape.rmsnorm(split, ones)?;
                tape.reshape(normed, vec![rows, width])?
            }
            None => taps,
        };
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.linear(taps, w, Some(b))
    }

    /// Fuses `positions × (n_feat · d_target)` features without recording gradients.
    pub fn fuse(&self, taps: &Tensor<S>, tap_width: Option<usize>) -> Result<Tensor<S>> {
        let mut tape = Tape::inference();
        let t = tape.borrowed(taps);
        let out = self.fuse_tape(&mut tape, t, tap_width)?;
        Ok(tape.value(out).clone())
    }
}
