//! Scalar and vector primitives shared by the metrics and the models.

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ exp(x_i)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = max(xs);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `xs / t`, written into `out`. `t` must be positive.
pub fn softmax_scaled_into(xs: &[f64], t: f64, out: &mut [f64]) {
    debug_assert_eq!(xs.len(), out.len());
    let m = max(xs);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = ((x - m) / t).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    softmax_scaled_into(xs, 1.0, &mut out);
    out
}

/// `log softmax(xs / t)_y`.
pub fn log_softmax_scaled_at(xs: &[f64], t: f64, y: usize) -> f64 {
    let m = max(xs);
    let z: f64 = xs.iter().map(|&x| ((x - m) / t).exp()).sum();
    (xs[y] - m) / t - z.ln()
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient of `-log softmax(s)_y` with respect to the logits: `softmax(s) - onehot(y)`.
pub fn softmax_ce_logit_grad(s: &[f64], y: usize) -> Vec<f64> {
    let mut g = softmax(s);
    g[y] -= 1.0;
    g
}

/// Shannon entropy in nats; zero-probability terms contribute zero.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| pi * pi.ln())
        .sum::<f64>()
}
