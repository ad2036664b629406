//! Fidelity of a decode stream against the full-cache reference.

use flowkv_core::model::argmax;

/// Cosine of two logit vectors in f64; bit-identical inputs give exactly 1.
pub fn logit_cosine(a: &[f32], b: &[f32]) -> f64 {
    if a == b {
        return 1.0;
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn log_softmax(x: &[f32]) -> Vec<f64> {
    let max = x.iter().map(|&v| f64::from(v)).fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|&v| (f64::from(v) - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|&v| f64::from(v) - lse).collect()
}

/// `KL(softmax(p) || softmax(q))`; bit-identical inputs give exactly 0.
pub fn softmax_kl(p: &[f32], q: &[f32]) -> f64 {
    if p == q {
        return 0.0;
    }
    let lp = log_softmax(p);
    let lq = log_softmax(q);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub logit_cosine: f64,
    pub top1_agreement: f64,
    pub mean_kl: f64,
}

/// Per-step means over the common prefix of two logit streams.
pub fn divergence(reference: &[Vec<f32>], other: &[Vec<f32>]) -> Divergence {
    let steps = reference.len().min(other.len());
    if steps == 0 {
        return Divergence {
            logit_cosine: 1.0,
            top1_agreement: 1.0,
            mean_kl: 0.0,
        };
    }
    let (mut cos, mut agree, mut kl) = (0.0, 0usize, 0.0);
    for (r, o) in reference.iter().zip(other) {
        cos += logit_cosine(r, o);
        agree += usize::from(argmax(r) == argmax(o));
        kl += softmax_kl(r, o);
    }
    let s = steps as f64;
    Divergence {
        logit_cosine: cos / s,
        top1_agreement: agree as f64 / s,
        mean_kl: kl / s,
    }
}
