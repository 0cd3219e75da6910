//! Central-difference verification of analytic gradients.

use super::loss::mean_bce_with_logits;
use super::{NnError, Sequential, Tensor};

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Worst disagreement found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Scale one analytic gradient entry before comparing (negative control).
#[derive(Debug, Clone, Copy)]
pub struct Corruption {
    pub param: usize,
    pub index: usize,
    pub factor: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn batch_loss(model: &Sequential, input: &Tensor, labels: &[f64]) -> Result<f64, NnError> {
    let logits = model.logits(input)?;
    Ok(mean_bce_with_logits(&logits, labels).0)
}

/// Compare every analytic parameter gradient of the mean fused BCE against
/// `(L(θ+h) − L(θ−h)) / 2h`.
pub fn grad_check(
    model: &Sequential,
    input: &Tensor,
    labels: &[f64],
    corrupt: Option<Corruption>,
) -> Result<GradCheckReport, NnError> {
    let (_, _, mut grads) = model.loss_and_grads(input, |z| mean_bce_with_logits(z, labels))?;
    if let Some(c) = corrupt {
        grads[c.param].data_mut()[c.index] *= c.factor;
    }
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (pi, grad) in grads.iter().enumerate() {
        for i in 0..grad.len() {
            let original = probe.params().entries[pi].value.data()[i];
            probe.params_mut().entries[pi].value.data_mut()[i] = original + GRAD_CHECK_STEP;
            let plus = batch_loss(&probe, input, labels)?;
            probe.params_mut().entries[pi].value.data_mut()[i] = original - GRAD_CHECK_STEP;
            let minus = batch_loss(&probe, input, labels)?;
            probe.params_mut().entries[pi].value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let analytic = grad.data()[i];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = model.params().entries[pi].name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
