//! Evaluation metrics: expression error, landmark error, PSNR, SSIM.

use crate::error::{Error, Result};
use crate::render::FrameBuffer;

pub const PSNR_CAP_DB: f64 = 99.0;

/// Mean absolute difference per expression component.
pub fn e_exp(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "expression metric: {} vs {} components",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("expression metric: empty input".into()));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean Euclidean distance per landmark point.
pub fn e_ldmk(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "landmark metric: {} vs {} points",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("landmark metric: empty input".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Peak signal-to-noise ratio in dB over all channels, MAX = 1, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &FrameBuffer, b: &FrameBuffer) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Invalid(format!(
            "psnr: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size * size)
        .map(|i| {
            let y = (i / size) as f64 - half;
            let x = (i % size) as f64 - half;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Single-scale SSIM: 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, computed on the per-pixel channel mean, averaged over all
/// fully contained windows.
pub fn ssim(a: &FrameBuffer, b: &FrameBuffer) -> Result<f64> {
    const WIN: usize = 11;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Invalid("ssim: dimension mismatch".into()));
    }
    let (w, h) = (a.width(), a.height());
    if w < WIN || h < WIN {
        return Err(Error::Invalid(format!(
            "ssim: image {w}x{h} smaller than {WIN}x{WIN} window"
        )));
    }
    let la = a.luminance();
    let lb = b.luminance();
    let g = gaussian_window(WIN, 1.5);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=h - WIN {
        for x0 in 0..=w - WIN {
            let (mut mx, mut my) = (0.0f64, 0.0f64);
            let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
            for wy in 0..WIN {
                for wx in 0..WIN {
                    let gw = g[wy * WIN + wx];
                    let px = la[(y0 + wy) * w + x0 + wx] as f64;
                    let py = lb[(y0 + wy) * w + x0 + wx] as f64;
                    mx += gw * px;
                    my += gw * py;
                    sxx += gw * px * px;
                    syy += gw * py * py;
                    sxy += gw * px * py;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            let val = ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                / ((mx * mx + my * my + C1) * (vx + vy + C2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Aggregate report for one evaluated sequence.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub e_exp: f64,
    pub e_ldmk: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_exp: usize,
    pub n_ldmk: usize,
    pub n_frames: usize,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        format!(
            "e_exp={}\ne_ldmk={}\npsnr_db={}\nssim={}\nn_exp={}\nn_ldmk={}\nn_frames={}\n",
            self.e_exp, self.e_ldmk, self.psnr_db, self.ssim, self.n_exp, self.n_ldmk,
            self.n_frames
        )
    }

    pub fn csv_header() -> &'static str {
        "e_exp,e_ldmk,psnr_db,ssim,n_exp,n_ldmk,n_frames"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.e_exp, self.e_ldmk, self.psnr_db, self.ssim, self.n_exp, self.n_ldmk,
            self.n_frames
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    #[test]
    fn zero_error_for_identical_inputs() {
        assert_eq!(e_exp(&[0.5, -1.0], &[0.5, -1.0]).unwrap(), 0.0);
        assert_eq!(
            e_ldmk(&[[1.0, 2.0], [3.0, 4.0]], &[[1.0, 2.0], [3.0, 4.0]]).unwrap(),
            0.0
        );
    }

    #[test]
    fn three_four_offset_gives_five() {
        let gt = [[0.0, 0.0], [10.0, 10.0]];
        let pred = [[3.0, 4.0], [13.0, 14.0]];
        assert_eq!(e_ldmk(&pred, &gt).unwrap(), 5.0);
    }

    #[test]
    fn uniform_shift_gives_its_norm() {
        let mut rng = Rng64::new(21);
        let gt: Vec<[f64; 2]> = (0..9)
            .map(|_| [rng.uniform(0.0, 30.0), rng.uniform(0.0, 30.0)])
            .collect();
        let pred: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 1.5, p[1] - 2.0]).collect();
        let want = (1.5f64 * 1.5 + 2.0 * 2.0).sqrt();
        assert!((e_ldmk(&pred, &gt).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_naive_loop() {
        let mut rng = Rng64::new(22);
        let a: Vec<f64> = (0..40).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut acc = 0.0;
        for i in 0..40 {
            acc += (a[i] - b[i]).abs();
        }
        assert!((e_exp(&a, &b).unwrap() - acc / 40.0).abs() < 1e-6);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(e_exp(&[1.0], &[1.0, 2.0]).is_err());
        assert!(e_ldmk(&[[0.0, 0.0]], &[]).is_err());
    }

    #[test]
    fn psnr_cap_and_hand_value() {
        let a = FrameBuffer::filled(16, 16, [0.3, 0.5, 0.7]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        // Uniform difference of 0.1 in every channel: MSE = 0.01 → 20 dB.
        let b = FrameBuffer::filled(16, 16, [0.4, 0.6, 0.8]);
        let db = psnr(&a, &b).unwrap();
        assert!((db - 20.0).abs() < 1e-4, "psnr {db}");
    }

    #[test]
    fn noise_strictly_lowers_psnr() {
        let mut rng = Rng64::new(23);
        let base = FrameBuffer::filled(20, 20, [0.5, 0.5, 0.5]);
        let mut noisy1 = base.clone();
        let mut noisy2 = base.clone();
        for v in noisy1.data_mut() {
            *v += 0.02 * rng.normal() as f32;
        }
        for v in noisy2.data_mut() {
            *v += 0.10 * rng.normal() as f32;
        }
        let p1 = psnr(&noisy1, &base).unwrap();
        let p2 = psnr(&noisy2, &base).unwrap();
        assert!(p1 < 99.0 && p2 < p1);
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut f = FrameBuffer::new(16, 12);
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 100) as f32 / 100.0;
        }
        let s = ssim(&f, &f).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim {s}");
    }

    #[test]
    fn ssim_constant_shift_matches_closed_form() {
        // Variances vanish, so only the luminance term survives:
        // ((2·μa·μb + C1)·C2) / ((μa² + μb² + C1)·C2).
        let a = FrameBuffer::filled(16, 16, [0.25; 3]);
        let b = FrameBuffer::filled(16, 16, [0.75; 3]);
        let c1 = 1e-4;
        let want = (2.0 * 0.25 * 0.75 + c1) / (0.25f64.powi(2) + 0.75f64.powi(2) + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = Rng64::new(24);
        let mut a = FrameBuffer::new(14, 14);
        let mut b = FrameBuffer::new(14, 14);
        for v in a.data_mut() {
            *v = rng.next_f32();
        }
        for v in b.data_mut() {
            *v = rng.next_f32();
        }
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = FrameBuffer::new(8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn psnr_and_ssim_order_a_noise_ladder_identically() {
        let mut rng = Rng64::new(25);
        let mut base = FrameBuffer::new(24, 24);
        for v in base.data_mut() {
            *v = rng.next_f32() * 0.5 + 0.25;
        }
        let sigmas = [0.01, 0.05, 0.1, 0.2, 0.3];
        let mut last_psnr = f64::MAX;
        let mut last_ssim = f64::MAX;
        for s in sigmas {
            let mut n = base.clone();
            for v in n.data_mut() {
                *v = (*v + s * rng.normal() as f32).clamp(0.0, 1.0);
            }
            let p = psnr(&n, &base).unwrap();
            let q = ssim(&n, &base).unwrap();
            assert!(p < last_psnr, "psnr not monotone at sigma {s}");
            assert!(q < last_ssim, "ssim not monotone at sigma {s}");
            last_psnr = p;
            last_ssim = q;
        }
    }
}
