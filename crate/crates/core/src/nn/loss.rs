//! Binary cross-entropy, in probability space (reference) and fused with the
//! final sigmoid on the logit (training path).

use super::layers::sigmoid;

/// Clamp used only by the probability-space path.
pub const BCE_EPS: f64 = 1e-12;

/// `−[y ln p + (1−y) ln(1−p)]` and `dL/dp`, with `p` clamped to `[ε, 1−ε]`.
pub fn bce_loss(p: f64, y: f64) -> (f64, f64) {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let grad = (p - y) / (p * (1.0 - p));
    (loss, grad)
}

/// BCE of `sigmoid(z)` against `y`, and `dL/dz = sigmoid(z) − y`.
///
/// `max(z, 0) − z·y + ln(1 + e^(−|z|))` never overflows.
pub fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

/// Mean fused BCE over a batch of logits, with per-logit gradients of the mean.
pub fn mean_bce_with_logits(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), labels.len());
    let n = logits.len() as f64;
    let mut total = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let (l, g) = bce_with_logits(z, y);
            total += l;
            g / n
        })
        .collect();
    (total / n, grads)
}
