//! Finite-difference verification of tape gradients.
//!
//! The checker perturbs one input coordinate at a time and compares the
//! central difference against the analytic gradient at the vector level:
//! `‖g − fd‖₂ / max(‖fd‖₂, floor)`. Vector-level comparison tolerates the
//! f32 forward noise that makes per-coordinate ratios meaningless for
//! near-zero entries.

use super::Tensor;

/// Central-difference gradient of a scalar function of a flat vector.
pub fn fd_gradient(mut f: impl FnMut(&[f32]) -> f64, x0: &[f32], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = (orig as f64 + h) as f32;
        let fp = f(&x);
        x[i] = (orig as f64 - h) as f32;
        let fm = f(&x);
        x[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Relative L2 distance between an analytic gradient and its
/// finite-difference estimate.
pub fn rel_error(analytic: &Tensor, fd: &[f64]) -> f64 {
    assert_eq!(analytic.numel(), fd.len(), "rel_error: length mismatch");
    let mut diff2 = 0.0f64;
    let mut ref2 = 0.0f64;
    for (a, b) in analytic.data().iter().zip(fd) {
        let d = *a as f64 - b;
        diff2 += d * d;
        ref2 += b * b;
    }
    diff2.sqrt() / ref2.sqrt().max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn fd_matches_analytic_for_tanh_chain() {
        let x0: Vec<f32> = vec![0.3, -0.7, 1.1, 0.05];
        let loss = |xs: &[f32]| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(vec![4], xs.to_vec()));
            let y = t.tanh(x);
            let z = t.mul(y, y);
            let m = t.mean(z);
            t.value(m).item() as f64
        };
        let fd = fd_gradient(loss, &x0, 1e-3);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![4], x0.clone()));
        let y = t.tanh(x);
        let z = t.mul(y, y);
        let m = t.mean(z);
        let g = t.backward(m);
        assert!(rel_error(&g.get(x).unwrap(), &fd) < 1e-3);
    }

    #[test]
    fn fd_matches_analytic_for_matmul() {
        let x0: Vec<f32> = vec![0.5, -0.25, 0.75, 1.5, -0.6, 0.1];
        let w: Vec<f32> = vec![0.2, -0.3, 0.4, 0.1, 0.7, -0.2];
        let loss = |xs: &[f32]| {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::new(vec![2, 3], xs.to_vec()));
            let b = t.leaf(Tensor::new(vec![3, 2], w.clone()));
            let c = t.matmul(a, b);
            let s = t.l2(c);
            t.value(s).item() as f64
        };
        let fd = fd_gradient(loss, &x0, 1e-3);

        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2, 3], x0.clone()));
        let b = t.leaf(Tensor::new(vec![3, 2], w.clone()));
        let c = t.matmul(a, b);
        let s = t.l2(c);
        let g = t.backward(s);
        assert!(rel_error(&g.get(a).unwrap(), &fd) < 1e-3);
    }
}
