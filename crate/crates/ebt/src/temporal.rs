//! Temporal machinery: dynamic-programming retiming of target footage
//! against audio energy, distance-gated landmark smoothing, block-match
//! optical flow, and a frequency-domain deflicker filter that leans on
//! the previous output in proportion to scene motion.

use crate::render::FrameBuffer;
use crate::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const DEFAULT_STEP_HOLD: f64 = 0.1;
pub const DEFAULT_STEP_SKIP: f64 = 0.1;
pub const DEFAULT_FLOW_BLOCK: usize = 8;
pub const DEFAULT_FLOW_RADIUS: usize = 4;
/// Motion scale of the deflicker weight lambda = exp(-d / rho).
pub const DEFAULT_DEFLICKER_RHO: f64 = 1.0;

/// Per-target-frame retiming features: motion magnitude (mean landmark
/// displacement from the previous frame, px) and blink score in [0, 1].
#[derive(Clone, Debug)]
pub struct FootageFeatures {
    m: Vec<f64>,
    b: Vec<f64>,
}

impl FootageFeatures {
    pub fn new(m: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if m.is_empty() || m.len() != b.len() {
            return Err(Error::Invalid(format!(
                "footage features want equal nonzero lengths, got {} and {}",
                m.len(),
                b.len()
            )));
        }
        if m[0] != 0.0 {
            return Err(Error::Invalid("first motion magnitude must be 0".into()));
        }
        if m.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite footage feature".into()));
        }
        Ok(FootageFeatures { m, b })
    }

    /// Motion magnitudes from per-frame landmark tracks plus blink scores.
    pub fn from_landmarks(tracks: &[Vec<[f64; 2]>], blinks: &[f64]) -> Result<Self> {
        if tracks.is_empty() || tracks.len() != blinks.len() {
            return Err(Error::Invalid("landmark track and blink lengths differ".into()));
        }
        let mut m = vec![0.0f64];
        for t in 1..tracks.len() {
            if tracks[t].len() != tracks[t - 1].len() || tracks[t].is_empty() {
                return Err(Error::Invalid("landmark counts differ between frames".into()));
            }
            let sum: f64 = tracks[t]
                .iter()
                .zip(&tracks[t - 1])
                .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .sum();
            m.push(sum / tracks[t].len() as f64);
        }
        FootageFeatures::new(m, blinks.to_vec())
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn motion(&self) -> &[f64] {
        &self.m
    }

    pub fn blink(&self) -> &[f64] {
        &self.b
    }
}

/// Retiming objective weights. `kappa = None` calibrates the
/// audio-to-motion scale so kappa * mean(audio) = mean(motion).
#[derive(Clone, Copy, Debug)]
pub struct RetimeWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub c_hold: f64,
    pub c_skip: f64,
    pub kappa: Option<f64>,
}

impl Default for RetimeWeights {
    fn default() -> Self {
        RetimeWeights {
            gamma1: 1.0,
            gamma2: 1.0,
            c_hold: DEFAULT_STEP_HOLD,
            c_skip: DEFAULT_STEP_SKIP,
            kappa: None,
        }
    }
}

/// A frame-selection plan over target footage: consecutive indices step
/// by 0 (hold), 1, or 2 (skip).
#[derive(Clone, Debug, PartialEq)]
pub struct RetimePlan {
    pub indices: Vec<usize>,
    pub cost: f64,
}

fn step_cost(delta: usize, w: &RetimeWeights) -> f64 {
    match delta {
        0 => w.c_hold,
        1 => 0.0,
        _ => w.c_skip,
    }
}

fn node_cost(a_t: f64, j: usize, feats: &FootageFeatures, kappa: f64, w: &RetimeWeights) -> f64 {
    let dm = feats.m[j] - kappa * a_t;
    w.gamma1 * dm * dm + w.gamma2 * feats.b[j] * (1.0 - a_t)
}

/// Exact DP over the T x M table minimizing matching cost plus step
/// costs; the first index is unconstrained and ties break toward the
/// smaller frame index.
pub fn retime_dp(audio_energy: &[f64], feats: &FootageFeatures, w: &RetimeWeights) -> Result<RetimePlan> {
    let t_len = audio_energy.len();
    let m_len = feats.len();
    if t_len == 0 {
        return Err(Error::Invalid("empty audio energy".into()));
    }
    let kappa = match w.kappa {
        Some(k) => k,
        None => {
            let ma: f64 = audio_energy.iter().sum::<f64>() / t_len as f64;
            let mm: f64 = feats.m.iter().sum::<f64>() / m_len as f64;
            if ma.abs() > 1e-12 {
                mm / ma
            } else {
                0.0
            }
        }
    };

    // cost[t][j]: best cost of a plan prefix ending at frame j at time t.
    let mut cost = vec![f64::INFINITY; m_len];
    for (j, c) in cost.iter_mut().enumerate() {
        *c = node_cost(audio_energy[0], j, feats, kappa, w);
    }
    let mut back = vec![vec![0usize; m_len]; t_len];
    let mut next = vec![0.0f64; m_len];
    for t in 1..t_len {
        for j in 0..m_len {
            let mut best = f64::INFINITY;
            let mut arg = usize::MAX;
            // Predecessors in increasing index order so ties keep the
            // smaller previous frame.
            for delta in (0..=2usize).rev() {
                if j < delta {
                    continue;
                }
                let p = j - delta;
                let c = cost[p] + step_cost(delta, w);
                if c < best {
                    best = c;
                    arg = p;
                }
            }
            next[j] = best + node_cost(audio_energy[t], j, feats, kappa, w);
            back[t][j] = arg;
        }
        std::mem::swap(&mut cost, &mut next);
    }

    let mut best_j = 0;
    for j in 1..m_len {
        if cost[j] < cost[best_j] {
            best_j = j;
        }
    }
    let mut indices = vec![0usize; t_len];
    indices[t_len - 1] = best_j;
    for t in (1..t_len).rev() {
        indices[t - 1] = back[t][indices[t]];
    }
    Ok(RetimePlan { indices, cost: cost[best_j] })
}

/// Evaluate a plan's objective value (used by the pipeline to report and
/// by tests as the oracle's cost function).
pub fn plan_cost(plan: &[usize], audio_energy: &[f64], feats: &FootageFeatures, w: &RetimeWeights, kappa: f64) -> f64 {
    let mut c = 0.0;
    for (t, &j) in plan.iter().enumerate() {
        c += node_cost(audio_energy[t], j, feats, kappa, w);
        if t > 0 {
            c += step_cost(j - plan[t - 1], w);
        }
    }
    c
}

/// Distance-gated temporal smoothing: landmarks blend toward the
/// previous frame only while the mouth center barely moves.
pub fn smooth_landmarks(
    l_prev: &[[f64; 2]],
    l_cur: &[[f64; 2]],
    mouth: &[usize],
    d_th: f64,
    s: f64,
) -> Vec<[f64; 2]> {
    assert!(d_th > 0.0 && s > 0.0, "smoothing wants positive threshold and scale");
    assert_eq!(l_prev.len(), l_cur.len(), "landmark counts differ");
    assert!(!mouth.is_empty(), "no mouth landmarks");
    let center = |l: &[[f64; 2]]| -> [f64; 2] {
        let mut c = [0.0, 0.0];
        for &i in mouth {
            c[0] += l[i][0];
            c[1] += l[i][1];
        }
        [c[0] / mouth.len() as f64, c[1] / mouth.len() as f64]
    };
    let (cp, cc) = (center(l_prev), center(l_cur));
    let d = ((cc[0] - cp[0]).powi(2) + (cc[1] - cp[1]).powi(2)).sqrt();
    if d > d_th {
        return l_cur.to_vec();
    }
    let alpha = (-s * d).exp();
    l_prev
        .iter()
        .zip(l_cur)
        .map(|(p, c)| {
            [
                alpha * p[0] + (1.0 - alpha) * c[0],
                alpha * p[1] + (1.0 - alpha) * c[1],
            ]
        })
        .collect()
}

/// Integer per-block displacements mapping each block of the current
/// frame to its location in the previous frame.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub block: usize,
    /// Blocks per row.
    pub bw: usize,
    /// Blocks per column.
    pub bh: usize,
    pub dx: Vec<i32>,
    pub dy: Vec<i32>,
}

fn clamp_px(v: isize, hi: usize) -> usize {
    v.clamp(0, hi as isize - 1) as usize
}

/// Exhaustive block matching on luminance: for each B x B block of
/// `cur`, the displacement within +-R minimizing SAD against `prev`.
/// Ties prefer the smaller displacement magnitude, then lexicographic
/// (dx, dy). Frames whose dims are not multiples of B are handled by
/// replicate-clamped sampling in the trailing partial blocks.
pub fn block_flow(prev: &FrameBuffer, cur: &FrameBuffer, block: usize, radius: usize) -> FlowField {
    assert!(block > 0, "zero block size");
    assert_eq!(
        (prev.width(), prev.height()),
        (cur.width(), cur.height()),
        "frame dims differ"
    );
    let (w, h) = (cur.width(), cur.height());
    let lp = prev.luminance();
    let lc = cur.luminance();
    let bw = w.div_ceil(block);
    let bh = h.div_ceil(block);
    let r = radius as i32;
    let mut dxs = Vec::with_capacity(bw * bh);
    let mut dys = Vec::with_capacity(bw * bh);
    for by in 0..bh {
        for bx in 0..bw {
            let mut best = (f64::INFINITY, i32::MAX, (0i32, 0i32));
            for dy in -r..=r {
                for dx in -r..=r {
                    let mut sad = 0.0f64;
                    for iy in 0..block {
                        let cy = clamp_px((by * block + iy) as isize, h);
                        let py = clamp_px(cy as isize + dy as isize, h);
                        for ix in 0..block {
                            let cx = clamp_px((bx * block + ix) as isize, w);
                            let px = clamp_px(cx as isize + dx as isize, w);
                            sad += (lc[cy * w + cx] as f64 - lp[py * w + px] as f64).abs();
                        }
                    }
                    let mag = dx * dx + dy * dy;
                    let key = (sad, mag, (dx, dy));
                    if key < best {
                        best = key;
                    }
                }
            }
            dxs.push(best.2 .0);
            dys.push(best.2 .1);
        }
    }
    FlowField { block, bw, bh, dx: dxs, dy: dys }
}

/// Sample each block of `frame` at its flow-displaced location,
/// replicate-clamping at borders.
pub fn warp(frame: &FrameBuffer, flow: &FlowField) -> FrameBuffer {
    let (w, h) = (frame.width(), frame.height());
    assert_eq!(
        (flow.bw, flow.bh),
        (w.div_ceil(flow.block), h.div_ceil(flow.block)),
        "flow blocking does not match frame"
    );
    let mut out = FrameBuffer::new(w, h);
    for y in 0..h {
        let by = y / flow.block;
        for x in 0..w {
            let bx = x / flow.block;
            let k = by * flow.bw + bx;
            let sx = clamp_px(x as isize + flow.dx[k] as isize, w);
            let sy = clamp_px(y as isize + flow.dy[k] as isize, h);
            out.set(x, y, frame.get(sx, sy));
        }
    }
    out
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// Radial frequency of bin (kx, ky): per axis f = min(k, N-k)/N cycles
/// per pixel, combined as f^2 = fx^2 + fy^2.
fn bin_freq_sq(kx: usize, ky: usize, w: usize, h: usize) -> f64 {
    let fx = kx.min(w - kx) as f64 / w as f64;
    let fy = ky.min(h - ky) as f64 / h as f64;
    fx * fx + fy * fy
}

/// Frequency-domain temporal filter: each DFT bin of the output mixes
/// the current frame (weighted by 4 pi^2 f^2) with the warped previous
/// output (weighted by lambda = exp(-d / rho)). DC is inherited from
/// the previous output; large motion (lambda -> 0) passes the current
/// frame through.
pub fn deflicker_frame(
    p: &FrameBuffer,
    o_prev_warped: &FrameBuffer,
    d: f64,
    rho: f64,
) -> Result<FrameBuffer> {
    let (w, h) = (p.width(), p.height());
    if (o_prev_warped.width(), o_prev_warped.height()) != (w, h) {
        return Err(Error::Invalid("deflicker frame dims differ".into()));
    }
    if d < 0.0 || !d.is_finite() || rho <= 0.0 {
        return Err(Error::Invalid(format!("bad deflicker motion d = {d}, rho = {rho}")));
    }
    let lambda = (-d / rho).exp();
    if lambda == 0.0 {
        let mut out = p.clone();
        out.clamp01();
        return Ok(out);
    }
    let mut planner = FftPlanner::new();
    let mut out = p.clone();
    let norm = 1.0 / (w * h) as f64;
    for ch in 0..3 {
        let mut fp: Vec<Complex<f64>> = (0..w * h)
            .map(|i| Complex::new(p.data()[3 * i + ch] as f64, 0.0))
            .collect();
        let mut fo: Vec<Complex<f64>> = (0..w * h)
            .map(|i| Complex::new(o_prev_warped.data()[3 * i + ch] as f64, 0.0))
            .collect();
        fft2(&mut planner, &mut fp, w, h, false);
        fft2(&mut planner, &mut fo, w, h, false);
        for ky in 0..h {
            for kx in 0..w {
                let f2 = 4.0 * std::f64::consts::PI.powi(2) * bin_freq_sq(kx, ky, w, h);
                let i = ky * w + kx;
                fp[i] = (fp[i] * f2 + fo[i] * lambda) / (f2 + lambda);
            }
        }
        fft2(&mut planner, &mut fp, w, h, true);
        for i in 0..w * h {
            out.data_mut()[3 * i + ch] = (fp[i].re * norm).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// Full deflicker pass: the first frame passes through, each later
/// output blends the current frame with the flow-warped previous output
/// weighted by the mouth-center displacement.
pub fn deflicker_sequence(
    frames: &[FrameBuffer],
    mouth_track: &[Vec<[f64; 2]>],
    rho: f64,
    block: usize,
    radius: usize,
) -> Result<Vec<FrameBuffer>> {
    if frames.is_empty() {
        return Err(Error::Invalid("empty frame sequence".into()));
    }
    if frames.len() != mouth_track.len() {
        return Err(Error::Invalid(format!(
            "{} frames but {} landmark entries",
            frames.len(),
            mouth_track.len()
        )));
    }
    let center = |l: &[[f64; 2]]| -> Result<[f64; 2]> {
        if l.is_empty() {
            return Err(Error::Invalid("empty mouth landmark set".into()));
        }
        let mut c = [0.0, 0.0];
        for p in l {
            c[0] += p[0];
            c[1] += p[1];
        }
        Ok([c[0] / l.len() as f64, c[1] / l.len() as f64])
    };
    let mut out = Vec::with_capacity(frames.len());
    out.push(frames[0].clone());
    for t in 1..frames.len() {
        let flow = block_flow(&frames[t - 1], &frames[t], block, radius);
        let warped = warp(&out[t - 1], &flow);
        let (cp, cc) = (center(&mouth_track[t - 1])?, center(&mouth_track[t])?);
        let d = ((cc[0] - cp[0]).powi(2) + (cc[1] - cp[1]).powi(2)).sqrt();
        out.push(deflicker_frame(&frames[t], &warped, d, rho)?);
    }
    Ok(out)
}
