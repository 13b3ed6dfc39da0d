//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::ParamVisitor;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Gradient of every trainable tensor, in visiting order.
pub type GradientTable = Vec<(String, Vec<f64>)>;

/// Runs `loss` with backward enabled and collects the gradients it leaves in
/// the model's `Param::grad` slots.
pub fn analytic_gradients<S, M, F>(model: &mut M, mut loss: F) -> Result<GradientTable>
where
    S: Scalar,
    M: ParamVisitor<S>,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    model.zero_grads();
    loss(model, true)?;
    let mut out = Vec::new();
    model.visit_params(&mut |name, p| {
        if p.requires_grad {
            let g = p
                .grad
                .as_ref()
                .map(|g| g.data().iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            out.push((name.to_string(), g));
        }
    });
    model.zero_grads();
    Ok(out)
}

/// Compares `analytic` with central differences `(L(x+h) - L(x-h)) / 2h`
/// taken on `model`, which may be a higher-precision copy of the model the
/// gradients came from. Relative error is `|a - n| / max(|a| + |n|, floor)`,
/// the floor keeping near-zero gradients from dominating.
pub fn compare_with_differences<S, M, F>(
    analytic: &GradientTable,
    model: &mut M,
    eps: f64,
    floor: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    M: ParamVisitor<S>,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for (name, grads) in analytic {
        for (i, &a) in grads.iter().enumerate() {
            let orig = read(model, name, i);
            write(model, name, i, orig + eps);
            let plus = loss(model, false)?;
            write(model, name, i, orig - eps);
            let minus = loss(model, false)?;
            write(model, name, i, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

/// Analytic gradients of `model` checked against central differences of the
/// same model.
pub fn check_gradients<S, M, F>(
    model: &mut M,
    eps: f64,
    floor: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    M: ParamVisitor<S>,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    let analytic = analytic_gradients(model, &mut loss)?;
    compare_with_differences(&analytic, model, eps, floor, loss)
}

fn read<S: Scalar, M: ParamVisitor<S>>(model: &M, name: &str, i: usize) -> f64 {
    let mut out = 0.0;
    model.visit_params(&mut |n, p| {
        if n == name {
            out = p.value.data()[i].as_f64();
        }
    });
    out
}

fn write<S: Scalar, M: ParamVisitor<S>>(model: &mut M, name: &str, i: usize, v: f64) {
    model.visit_params_mut(&mut |n, p| {
        if n == name {
            p.value.data_mut()[i] = S::from_f64_lossy(v);
        }
    });
}
