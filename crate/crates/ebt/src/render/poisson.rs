//! Seamless cloning: solve the discrete Poisson equation so the output
//! matches the source's gradients inside the masked region while agreeing
//! with the destination on the region's boundary.

use crate::render::FrameBuffer;
use crate::{Error, Result};

/// Relative residual tolerance for the conjugate-gradient solve.
pub const CG_REL_TOL: f64 = 1e-6;

/// Blend `src` into `dst` over the masked region: inside the mask the
/// output's 5-point Laplacian equals the source's, on the mask boundary
/// (and everywhere outside) the output equals `dst`. Masked pixels must
/// lie strictly inside the frame so every equation has four neighbors.
///
/// The solve is exact up to solver tolerance and is not clamped; callers
/// composing display frames clamp afterwards.
pub fn poisson_blend(src: &FrameBuffer, dst: &FrameBuffer, mask: &[bool]) -> Result<FrameBuffer> {
    let (w, h) = (dst.width(), dst.height());
    if src.width() != w || src.height() != h {
        return Err(Error::Invalid(format!(
            "source {}x{} does not match destination {}x{}",
            src.width(),
            src.height(),
            w,
            h
        )));
    }
    if mask.len() != w * h {
        return Err(Error::Invalid(format!(
            "mask length {} does not match {}x{} frame",
            mask.len(),
            w,
            h
        )));
    }
    let mut index = vec![usize::MAX; w * h];
    let mut cells = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                return Err(Error::Invalid(format!(
                    "masked pixel ({x}, {y}) touches the frame border"
                )));
            }
            index[y * w + x] = cells.len();
            cells.push((x, y));
        }
    }
    if cells.is_empty() {
        return Err(Error::Invalid("empty blend mask".into()));
    }

    let n = cells.len();
    let max_iters = 10 * n;
    let mut out = dst.clone();
    for ch in 0..3 {
        let sv = |x: usize, y: usize| src.get(x, y)[ch] as f64;
        let dv = |x: usize, y: usize| dst.get(x, y)[ch] as f64;
        // b_i = Laplacian(src) at i plus the Dirichlet boundary terms.
        let mut b = vec![0.0f64; n];
        let mut x0 = vec![0.0f64; n];
        for (i, &(x, y)) in cells.iter().enumerate() {
            let mut rhs = 4.0 * sv(x, y) - sv(x - 1, y) - sv(x + 1, y) - sv(x, y - 1) - sv(x, y + 1);
            for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
                if index[ny * w + nx] == usize::MAX {
                    rhs += dv(nx, ny);
                }
            }
            b[i] = rhs;
            x0[i] = dv(x, y);
        }
        let apply = |v: &[f64], out: &mut [f64]| {
            for (i, &(x, y)) in cells.iter().enumerate() {
                let mut acc = 4.0 * v[i];
                for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
                    let j = index[ny * w + nx];
                    if j != usize::MAX {
                        acc -= v[j];
                    }
                }
                out[i] = acc;
            }
        };
        let sol = conjugate_gradient(apply, &b, &x0, CG_REL_TOL, max_iters)?;
        for (i, &(x, y)) in cells.iter().enumerate() {
            let mut px = out.get(x, y);
            px[ch] = sol[i] as f32;
            out.set(x, y, px);
        }
    }
    Ok(out)
}

/// CG for a symmetric positive definite operator, f64 throughout.
/// Converges when ‖r‖ ≤ tol·‖b‖ (absolute tol·1 when b = 0).
fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x0: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let n = b.len();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = tol * nb.max(1e-30);
    let mut x = x0.to_vec();
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    if rs.sqrt() <= target {
        return Ok(x);
    }
    let mut ap = vec![0.0; n];
    for _ in 0..max_iters {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::Numeric(format!(
                "conjugate gradient lost positive definiteness (pAp = {pap})"
            )));
        }
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        if rs_new.sqrt() <= target {
            return Ok(x);
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::Numeric(format!(
        "Poisson solve did not converge in {max_iters} iterations (residual {:.3e}, target {:.3e})",
        rs.sqrt(),
        target
    )))
}
