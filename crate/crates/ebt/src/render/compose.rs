//! Frame composition around the completion network: landmark heatmaps,
//! mouth-region noise masking, input stacking, polygon soft masks, and
//! Poisson-plus-feather compositing of completed crops.

use crate::render::poisson::poisson_blend;
use crate::render::raster::{erode, fill_polygon, gaussian_blur, polygon_area};
use crate::render::FrameBuffer;
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Heatmap spread in pixels.
pub const HEATMAP_SIGMA: f64 = 1.5;
/// Soft-mask erosion radius in pixels.
pub const MASK_ERODE_RADIUS: usize = 1;
/// Soft-mask feather blur in pixels.
pub const MASK_BLUR_SIGMA: f64 = 1.0;
/// Frames (and heatmaps) stacked as completion input.
pub const STACK_FRAMES: usize = 7;
/// Fractional padding applied to the mouth bounding box before masking.
pub const MOUTH_BOX_PAD: f64 = 0.2;

/// Single-channel image in [0, 1], same grid as a frame; samples sit at
/// integer pixel coordinates.
#[derive(Clone, Debug)]
pub struct Heatmap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Heatmap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Max-of-Gaussians landmark heatmap: H(q) = max_i exp(-|q - l_i|^2 /
/// (2 sigma^2)). The max keeps the peak at 1 regardless of landmark
/// density.
pub fn landmarks_to_heatmap(landmarks: &[[f64; 2]], w: usize, h: usize, sigma: f64) -> Heatmap {
    assert!(sigma > 0.0, "heatmap sigma must be positive");
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut best = 0.0f64;
            for l in landmarks {
                let (dx, dy) = (x as f64 - l[0], y as f64 - l[1]);
                let v = (-(dx * dx + dy * dy) * inv).exp();
                if v > best {
                    best = v;
                }
            }
            data[y * w + x] = best as f32;
        }
    }
    Heatmap { width: w, height: h, data }
}

/// Axis-aligned pixel rectangle, half-open in both axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }
}

/// Bounding box of the mouth landmarks padded by `pad` on each side,
/// clipped to the frame.
pub fn mouth_box(landmarks: &[[f64; 2]], w: usize, h: usize, pad: f64) -> Result<PixelBox> {
    if landmarks.is_empty() {
        return Err(Error::Invalid("no landmarks for mouth box".into()));
    }
    let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for l in landmarks {
        lo_x = lo_x.min(l[0]);
        hi_x = hi_x.max(l[0]);
        lo_y = lo_y.min(l[1]);
        hi_y = hi_y.max(l[1]);
    }
    let (pw, ph) = ((hi_x - lo_x) * pad, (hi_y - lo_y) * pad);
    let x0 = (lo_x - pw).floor().max(0.0) as usize;
    let y0 = (lo_y - ph).floor().max(0.0) as usize;
    let x1 = ((hi_x + pw).ceil() as usize + 1).min(w);
    let y1 = ((hi_y + ph).ceil() as usize + 1).min(h);
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::Invalid("mouth box lies outside the frame".into()));
    }
    Ok(PixelBox { x0, y0, w: x1 - x0, h: y1 - y0 })
}

/// Replace the box region with uniform noise in [0, 1]; pixels outside
/// are untouched. A zero-area box is a no-op.
pub fn mask_mouth(frame: &FrameBuffer, bx: PixelBox, rng: &mut Rng64) -> Result<FrameBuffer> {
    if bx.x0 + bx.w > frame.width() || bx.y0 + bx.h > frame.height() {
        return Err(Error::Invalid(format!(
            "mask box {bx:?} exceeds {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    let mut out = frame.clone();
    for y in bx.y0..bx.y0 + bx.h {
        for x in bx.x0..bx.x0 + bx.w {
            out.set(
                x,
                y,
                [rng.next_f32(), rng.next_f32(), rng.next_f32()],
            );
        }
    }
    Ok(out)
}

/// Stack W masked frames and W heatmaps as a (4W, H, W) tensor: all RGB
/// triplets oldest-to-newest, then the heatmaps in the same order.
pub fn build_input_stack(frames: &[FrameBuffer], heatmaps: &[Heatmap]) -> Result<Tensor> {
    if frames.is_empty() || frames.len() != heatmaps.len() {
        return Err(Error::Invalid(format!(
            "stack wants equal nonzero counts, got {} frames, {} heatmaps",
            frames.len(),
            heatmaps.len()
        )));
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    for f in frames {
        if f.width() != w || f.height() != h {
            return Err(Error::Invalid("stack frame dims differ".into()));
        }
    }
    for hm in heatmaps {
        if hm.width() != w || hm.height() != h {
            return Err(Error::Invalid("stack heatmap dims differ".into()));
        }
    }
    let n = frames.len();
    let mut data = Vec::with_capacity(4 * n * w * h);
    for f in frames {
        // Interleaved RGB -> planar.
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f.get(x, y)[ch]);
                }
            }
        }
    }
    for hm in heatmaps {
        data.extend_from_slice(hm.data());
    }
    Ok(Tensor::new(vec![4 * n, h, w], data))
}

/// Clamped window of sequence indices ending at `t`: the first element
/// repeats while t < W-1.
pub fn stack_window_indices(t: usize, w_stack: usize) -> Vec<usize> {
    (0..w_stack)
        .map(|i| (t + i + 1).saturating_sub(w_stack))
        .collect()
}

/// Reconstruction, total-variation, and combined render losses of a
/// predicted frame against ground truth (off-tape; training uses the
/// tape equivalents).
pub fn render_losses(pred: &FrameBuffer, gt: &FrameBuffer, w_tv: f64) -> Result<(f64, f64, f64)> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Invalid("render loss dims differ".into()));
    }
    let n = pred.data().len();
    let recon: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum::<f64>()
        / n as f64;
    let (w, h) = (pred.width(), pred.height());
    let mut tv = 0.0f64;
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = pred.get(x, y)[ch] as f64;
                if x + 1 < w {
                    tv += (pred.get(x + 1, y)[ch] as f64 - v).abs();
                }
                if y + 1 < h {
                    tv += (pred.get(x, y + 1)[ch] as f64 - v).abs();
                }
            }
        }
    }
    tv /= n as f64;
    Ok((recon, tv, recon + w_tv * tv))
}

/// Soft mouth mask: scanline-fill the outer landmark polygon (vertices
/// in contour order), erode by a square radius, Gaussian-blur, clamp.
pub fn mouth_soft_mask(
    landmarks: &[[f64; 2]],
    w: usize,
    h: usize,
    erode_r: usize,
    sigma: f64,
) -> Result<Vec<f32>> {
    if landmarks.len() < 3 {
        return Err(Error::Invalid(format!(
            "soft mask needs at least 3 landmarks, got {}",
            landmarks.len()
        )));
    }
    if polygon_area(landmarks) <= 0.0 {
        return Err(Error::Invalid("degenerate mouth polygon".into()));
    }
    let filled = fill_polygon(landmarks, w, h);
    let eroded = erode(&filled, w, h, erode_r);
    let binary: Vec<f32> = eroded.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut blurred = gaussian_blur(&binary, w, h, sigma);
    for v in &mut blurred {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(blurred)
}

/// Composite a completed crop into the target frame: Poisson-blend over
/// the binary support of the soft mask (threshold 0.5, clipped to the
/// crop interior), then feather with the soft mask. Output is clamped
/// to [0, 1].
pub fn composite_frame(
    target: &FrameBuffer,
    completed: &FrameBuffer,
    soft_mask: &[f32],
    origin: (usize, usize),
) -> Result<FrameBuffer> {
    let (cw, ch) = (completed.width(), completed.height());
    if soft_mask.len() != cw * ch {
        return Err(Error::Invalid(format!(
            "soft mask length {} does not match {cw}x{ch} crop",
            soft_mask.len()
        )));
    }
    let (ox, oy) = origin;
    if ox + cw > target.width() || oy + ch > target.height() {
        return Err(Error::Invalid(format!(
            "crop {cw}x{ch} at ({ox}, {oy}) exceeds {}x{} frame",
            target.width(),
            target.height()
        )));
    }
    let dst = target.crop(ox, oy, cw, ch);
    // Binary support, clipped to the crop interior so every Poisson
    // equation keeps four in-crop neighbors.
    let mut support = vec![false; cw * ch];
    let mut any = false;
    for y in 1..ch.saturating_sub(1) {
        for x in 1..cw.saturating_sub(1) {
            if soft_mask[y * cw + x] > 0.5 {
                support[y * cw + x] = true;
                any = true;
            }
        }
    }
    let blended = if any {
        poisson_blend(completed, &dst, &support)?
    } else {
        dst.clone()
    };
    let mut out = target.clone();
    for y in 0..ch {
        for x in 0..cw {
            let m = soft_mask[y * cw + x];
            let b = blended.get(x, y);
            let t = dst.get(x, y);
            let px = [
                m * b[0] + (1.0 - m) * t[0],
                m * b[1] + (1.0 - m) * t[1],
                m * b[2] + (1.0 - m) * t[2],
            ];
            out.set(ox + x, oy + y, px);
        }
    }
    out.clamp01();
    Ok(out)
}
