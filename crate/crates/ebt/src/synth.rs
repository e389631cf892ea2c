//! Deterministic synthetic corpus: face bases, speakers, sinusoid
//! "phonemes", utterances, and rasterized footage.
//!
//! Everything here exists so the rest of the pipeline has exact ground
//! truth: the audio-to-expression map is known by construction, landmarks
//! are written from the same projection the fitter inverts, and all
//! randomness is keyed off a master seed. Rendering is deliberately crude;
//! realism is not a claim anything tests.

use crate::audio::AudioClip;
use crate::face::{landmarks_for, mouth_affine, FaceBasis, FaceParams, LandmarkKind, LandmarkSet, Pose};
use crate::render::raster::{fill_ellipse, fill_polygon};
use crate::render::FrameBuffer;
use crate::rng::Rng64;
use crate::{Error, Result};

/// Seconds of audio per phoneme slot.
pub const PHONEME_SECONDS: f64 = 0.2;
/// Linear crossfade straddling each phoneme boundary.
pub const CROSSFADE_SECONDS: f64 = 0.01;
/// Video frame rate used throughout the synthetic corpus.
pub const DEFAULT_FPS: f64 = 25.0;

const PHONEME_SYMBOLS: [char; 6] = ['A', 'B', 'C', 'D', 'E', 'F'];
// Neighboring ratios stay above 1.55 so per-speaker dominant frequencies
// never collide, whatever the formant scale.
const PHONEME_BASE_HZ: [f64; 6] = [320.0, 520.0, 840.0, 1350.0, 2200.0, 3500.0];

/// One synthetic phoneme: an expression target plus a sinusoid mixture.
/// The first frequency carries the largest amplitude and is the phoneme's
/// dominant frequency.
#[derive(Clone, Debug)]
pub struct PhonemeDef {
    pub symbol: char,
    pub target: Vec<f64>,
    /// (frequency Hz, amplitude) pairs, 2 or 3 of them.
    pub freqs: Vec<(f64, f64)>,
}

/// Build the 6-phoneme inventory. Expression targets are drawn until the
/// minimum pairwise L2 distance is at least 0.5 (with `de` >= 2 the first
/// draw almost always passes).
pub fn phoneme_inventory(de: usize, seed: u64) -> Vec<PhonemeDef> {
    let mut rng = Rng64::derive(seed, "phoneme-targets");
    let targets = loop {
        let cand: Vec<Vec<f64>> = (0..PHONEME_SYMBOLS.len())
            .map(|_| (0..de).map(|_| rng.uniform(-1.5, 1.5)).collect())
            .collect();
        let mut min_d2 = f64::INFINITY;
        for i in 0..cand.len() {
            for j in (i + 1)..cand.len() {
                let d2: f64 = cand[i]
                    .iter()
                    .zip(&cand[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                min_d2 = min_d2.min(d2);
            }
        }
        if min_d2.sqrt() >= 0.5 {
            break cand;
        }
    };
    PHONEME_SYMBOLS
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (&symbol, target))| {
            let base = PHONEME_BASE_HZ[i];
            let mut freqs = vec![(base, 0.5), (base * 1.25, 0.2)];
            if i % 2 == 0 {
                freqs.push((base * 1.5, 0.1));
            }
            PhonemeDef { symbol, target, freqs }
        })
        .collect()
}

fn phoneme_index(inv: &[PhonemeDef], symbol: char) -> Result<usize> {
    inv.iter()
        .position(|p| p.symbol == symbol)
        .ok_or_else(|| Error::Invalid(format!("unknown phoneme symbol {symbol:?}")))
}

/// A synthetic speaker: spectral identity plus amplitude jitter.
#[derive(Clone, Debug)]
pub struct SpeakerProfile {
    pub id: usize,
    /// Added to every sinusoid frequency (Hz). Profiles sit >= 35 Hz apart.
    pub pitch_offset: f64,
    /// Multiplies every sinusoid frequency before the pitch shift.
    pub formant_scale: f64,
    pub jitter_seed: u64,
    /// Per-phoneme-slot amplitude jitter magnitude; 0 disables jitter.
    pub amp_jitter: f64,
}

/// Evenly spread `n` speaker profiles.
pub fn speaker_profiles(n: usize, seed: u64) -> Vec<SpeakerProfile> {
    (0..n)
        .map(|i| {
            let spread = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            SpeakerProfile {
                id: i,
                pitch_offset: 35.0 * i as f64,
                formant_scale: 0.85 + 0.35 * spread,
                jitter_seed: seed ^ ((i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15)),
                amp_jitter: 0.1,
            }
        })
        .collect()
}

/// Per-speaker geometry coefficients, standard normal clamped to [-2, 2].
pub fn speaker_geometry(ds: usize, speaker_id: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng64::derive(seed, &format!("speaker-geom/{speaker_id}"));
    (0..ds).map(|_| rng.normal().clamp(-2.0, 2.0)).collect()
}

/// Ground truth for one recorded clip. Pose translation and scale are in
/// relative units (fractions of the frame); `render_footage` resolves them
/// to pixels for a concrete frame size.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub phonemes: String,
    pub clip: AudioClip,
    pub geometry: Vec<f64>,
    /// One expression vector per video frame (moving-average smoothed).
    pub expression_track: Vec<Vec<f64>>,
    /// Relative-unit poses, one per video frame.
    pub pose_track: Vec<Pose>,
    /// Blink score in [0, 1] per video frame.
    pub blink_track: Vec<f64>,
    pub fps: f64,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.expression_track.len()
    }
}

fn phoneme_wave(def: &PhonemeDef, profile: &SpeakerProfile, t: f64) -> f64 {
    let mut acc = 0.0;
    for &(hz, amp) in &def.freqs {
        let f = hz * profile.formant_scale + profile.pitch_offset;
        acc += amp * (std::f64::consts::TAU * f * t).sin();
    }
    acc
}

/// Synthesize one utterance: sinusoid audio with 10 ms crossfades at each
/// 200 ms phoneme boundary, plus frame-rate expression, pose, and blink
/// tracks. `geometry` is the speaker's identity coefficients and is stored
/// verbatim for the ground-truth files.
pub fn gen_utterance(
    inv: &[PhonemeDef],
    profile: &SpeakerProfile,
    geometry: &[f64],
    phonemes: &str,
    fps: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Utterance> {
    let slots: Vec<usize> = phonemes
        .chars()
        .map(|c| phoneme_index(inv, c))
        .collect::<Result<_>>()?;
    if slots.is_empty() {
        return Err(Error::Invalid("empty phoneme string".into()));
    }

    // Per-slot amplitude jitter, keyed off both the speaker and the clip.
    let mut jit_rng = Rng64::derive(profile.jitter_seed ^ seed, "amp-jitter");
    let gains: Vec<f64> = slots
        .iter()
        .map(|_| 1.0 + profile.amp_jitter * jit_rng.uniform(-1.0, 1.0))
        .collect();

    let sr = sample_rate as f64;
    let n_samples = (PHONEME_SECONDS * sr).round() as usize * slots.len();
    let half_fade = CROSSFADE_SECONDS / 2.0;
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let t = i as f64 / sr;
        let slot = ((t / PHONEME_SECONDS) as usize).min(slots.len() - 1);
        let wave = |k: usize| gains[k] * phoneme_wave(&inv[slots[k]], profile, t);
        // Crossfade window straddles each interior boundary.
        let next_boundary = (slot + 1) as f64 * PHONEME_SECONDS;
        let prev_boundary = slot as f64 * PHONEME_SECONDS;
        let v = if slot + 1 < slots.len() && t >= next_boundary - half_fade {
            let w = (t - (next_boundary - half_fade)) / CROSSFADE_SECONDS;
            (1.0 - w) * wave(slot) + w * wave(slot + 1)
        } else if slot > 0 && t < prev_boundary + half_fade {
            let w = (t - (prev_boundary - half_fade)) / CROSSFADE_SECONDS;
            (1.0 - w) * wave(slot - 1) + w * wave(slot)
        } else {
            wave(slot)
        };
        samples.push(v as f32);
    }

    let duration = slots.len() as f64 * PHONEME_SECONDS;
    let n_frames = (duration * fps).round() as usize;

    // Raw per-frame targets, then a 3-frame moving average for
    // co-articulation (edges clamp, so a constant input stays constant).
    let de = inv[0].target.len();
    let raw: Vec<&[f64]> = (0..n_frames)
        .map(|f| {
            let t = (f as f64 + 0.5) / fps;
            let slot = ((t / PHONEME_SECONDS) as usize).min(slots.len() - 1);
            inv[slots[slot]].target.as_slice()
        })
        .collect();
    let expression_track: Vec<Vec<f64>> = (0..n_frames)
        .map(|f| {
            let lo = f.saturating_sub(1);
            let hi = (f + 1).min(n_frames - 1);
            let mut acc = vec![0.0; de];
            for r in &raw[lo..=hi] {
                for (a, v) in acc.iter_mut().zip(*r) {
                    *a += v;
                }
            }
            let k = (hi - lo + 1) as f64;
            acc.iter_mut().for_each(|a| *a /= k);
            acc
        })
        .collect();

    // Pose: per-axis random walk reflected at +-1 rad (just under 60
    // degrees), relative-unit translation near frame center, fixed scale.
    let mut pose_rng = Rng64::derive(seed ^ profile.jitter_seed, "pose-walk");
    let mut rot = [
        pose_rng.uniform(-0.3, 0.3),
        pose_rng.uniform(-0.3, 0.3),
        pose_rng.uniform(-0.15, 0.15),
    ];
    let scale_rel = pose_rng.uniform(0.19, 0.24);
    let mut trans = [pose_rng.uniform(0.47, 0.53), pose_rng.uniform(0.47, 0.53)];
    let mut pose_track = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        pose_track.push(Pose {
            rot,
            t: trans,
            scale: scale_rel,
        });
        for r in rot.iter_mut() {
            *r += 0.03 * pose_rng.normal();
            if *r > 1.0 {
                *r = 2.0 - *r;
            }
            if *r < -1.0 {
                *r = -2.0 - *r;
            }
        }
        for t in trans.iter_mut() {
            *t = (*t + 0.002 * pose_rng.normal()).clamp(0.44, 0.56);
        }
    }

    // Blinks: ~0.3 Hz, each a 3-frame triangle bump.
    let mut blink_track = vec![0.0; n_frames];
    let mut blink_rng = Rng64::derive(seed ^ profile.jitter_seed, "blinks");
    let mut t_next = blink_rng.uniform(0.4, 2.0);
    while t_next < duration {
        let center = (t_next * fps).round() as usize;
        for (off, score) in [(0usize, 0.5f64), (1, 1.0), (2, 0.5)] {
            if let Some(slot) = blink_track.get_mut(center + off) {
                *slot = score.max(*slot);
            }
        }
        t_next += blink_rng.uniform(2.2, 4.5);
    }

    Ok(Utterance {
        phonemes: phonemes.to_string(),
        clip: AudioClip {
            samples,
            sample_rate,
        },
        geometry: geometry.to_vec(),
        expression_track,
        pose_track,
        blink_track,
        fps,
    })
}

/// Random phoneme string of length `n`.
pub fn random_phonemes(n: usize, rng: &mut Rng64) -> String {
    (0..n)
        .map(|_| PHONEME_SYMBOLS[rng.below(PHONEME_SYMBOLS.len())])
        .collect()
}

// ---------------------------------------------------------------------------
// Face basis generation

/// Landmark layout for a given count: mouth ring, jaw arc, eye corners,
/// nose bridge.
fn landmark_layout(l: usize) -> (usize, usize, usize, usize) {
    let mouth = ((2 * l) / 5).max(4);
    let rem = l - mouth;
    if rem >= 9 {
        (mouth, rem - 6, 4, 2)
    } else {
        (mouth, rem - 3, 2, 1)
    }
}

fn sphere_z(x: f64, y: f64) -> f64 {
    (1.0 - x * x - y * y).max(0.0).sqrt()
}

/// Generate a face basis: sphere-ish mean head with a mouth ring (stored
/// in cyclic contour order), jointly orthonormalized random basis columns
/// whose expression part is biased toward mouth and jaw vertices, and
/// sigmas decaying as 1/(1+j). If the expression-to-mouth-landmark map
/// comes out rank deficient the next seed is tried; the seed actually used
/// is returned alongside the basis.
pub fn gen_face_basis(seed: u64, v: usize, ds: usize, de: usize, l: usize) -> Result<(FaceBasis, u64)> {
    if l < 12 || v < l {
        return Err(Error::Invalid(format!(
            "need v >= l >= 12, got v={v} l={l}"
        )));
    }
    if ds == 0 || de == 0 {
        return Err(Error::Invalid("basis dims must be positive".into()));
    }
    for attempt in 0..16 {
        let s = seed.wrapping_add(attempt);
        let basis = build_basis(s, v, ds, de, l);
        if expression_mouth_rank(&basis) == de {
            basis.validate()?;
            return Ok((basis, s));
        }
    }
    Err(Error::Invalid(format!(
        "no full-rank expression basis near seed {seed}"
    )))
}

#[allow(clippy::needless_range_loop)]
fn build_basis(seed: u64, v: usize, ds: usize, de: usize, l: usize) -> FaceBasis {
    let (n_mouth, n_jaw, n_eye, n_nose) = landmark_layout(l);
    let mut mean = Vec::with_capacity(3 * v);
    let mut kinds = Vec::with_capacity(l);

    // Mouth ring, cyclic contour order (angle order around the ellipse).
    for k in 0..n_mouth {
        let phi = std::f64::consts::TAU * k as f64 / n_mouth as f64;
        let x = 0.30 * phi.cos();
        let y = 0.42 + 0.15 * phi.sin();
        mean.extend_from_slice(&[x, y, sphere_z(x, y)]);
        kinds.push(LandmarkKind::Mouth);
    }
    // Jaw arc below the mouth.
    for k in 0..n_jaw {
        let psi = -1.1 + 2.2 * k as f64 / (n_jaw - 1).max(1) as f64;
        let x = 0.82 * psi.sin();
        let y = 0.42 + 0.5 * psi.cos();
        mean.extend_from_slice(&[x, y, sphere_z(x, y)]);
        kinds.push(LandmarkKind::Jaw);
    }
    // Eye corners.
    let eye_xs: &[f64] = if n_eye == 4 {
        &[-0.45, -0.20, 0.20, 0.45]
    } else {
        &[-0.32, 0.32]
    };
    for &x in eye_xs {
        mean.extend_from_slice(&[x, -0.30, sphere_z(x, -0.30)]);
        kinds.push(LandmarkKind::Eye);
    }
    // Nose bridge.
    let nose_ys: &[f64] = if n_nose == 2 { &[-0.05, 0.18] } else { &[0.05] };
    for &y in nose_ys {
        mean.extend_from_slice(&[0.0, y, sphere_z(0.0, y)]);
        kinds.push(LandmarkKind::Nose);
    }

    // Remaining vertices: uniform directions on the unit sphere.
    let mut rng = Rng64::derive(seed, "basis-mean");
    while mean.len() < 3 * v {
        let z = rng.uniform(-1.0, 1.0);
        let phi = rng.uniform(0.0, std::f64::consts::TAU);
        let r = (1.0 - z * z).sqrt();
        mean.extend_from_slice(&[r * phi.cos(), r * phi.sin(), z]);
    }

    // Random columns; expression columns get extra mass on mouth and jaw
    // vertices so expressions visibly move the mouth, then everything is
    // orthonormalized jointly (modified Gram-Schmidt in f64).
    let dims = 3 * v;
    let n_cols = ds + de;
    let mut wrng = Rng64::derive(seed, "basis-columns");
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n_cols);
    for c in 0..n_cols {
        let expr = c >= ds;
        let mut col = Vec::with_capacity(dims);
        for vert in 0..v {
            let boost = if !expr {
                1.0
            } else if vert < n_mouth {
                4.0
            } else if vert < n_mouth + n_jaw {
                2.0
            } else {
                1.0
            };
            for _ in 0..3 {
                col.push(boost * wrng.normal());
            }
        }
        cols.push(col);
    }
    for c in 0..n_cols {
        for p in 0..c {
            let dot: f64 = cols[c].iter().zip(&cols[p]).map(|(a, b)| a * b).sum();
            for i in 0..dims {
                cols[c][i] -= dot * cols[p][i];
            }
        }
        let norm: f64 = cols[c].iter().map(|x| x * x).sum::<f64>().sqrt();
        // Random columns in high dimension are never near-dependent, but
        // guard the division anyway.
        let inv = 1.0 / norm.max(1e-12);
        cols[c].iter_mut().for_each(|x| *x *= inv);
    }

    // Row-major (3V x D): entry (row i, col j) at i*d + j.
    let mut geometry_basis = vec![0.0f32; dims * ds];
    for j in 0..ds {
        for i in 0..dims {
            geometry_basis[i * ds + j] = cols[j][i] as f32;
        }
    }
    let mut expression_basis = vec![0.0f32; dims * de];
    for j in 0..de {
        for i in 0..dims {
            expression_basis[i * de + j] = cols[ds + j][i] as f32;
        }
    }

    FaceBasis {
        mean_shape: mean.iter().map(|&x| x as f32).collect(),
        geometry_basis,
        expression_basis,
        geometry_sigma: (0..ds).map(|j| (0.25 / (1.0 + j as f64)) as f32).collect(),
        expression_sigma: (0..de).map(|j| (0.6 / (1.0 + j as f64)) as f32).collect(),
        landmark_indices: (0..l).collect(),
        landmark_kinds: kinds,
    }
}

/// Rank of the expression-to-mouth-landmark map at the neutral canonical
/// pose, by Gram-Schmidt with a relative threshold.
#[allow(clippy::needless_range_loop)]
fn expression_mouth_rank(basis: &FaceBasis) -> usize {
    let pose = Pose {
        rot: [0.0; 3],
        t: [0.0, 0.0],
        scale: 1.0,
    };
    let (a, _) = mouth_affine(basis, &vec![0.0; basis.geo_dim()], &pose);
    // Columns of `a` live in 2*n_mouth dims.
    let rows = a.rows;
    let mut cols: Vec<Vec<f64>> = (0..a.cols)
        .map(|j| (0..rows).map(|i| a.data[i * a.cols + j]).collect())
        .collect();
    let mut rank = 0;
    for c in 0..cols.len() {
        let orig: f64 = cols[c].iter().map(|x| x * x).sum::<f64>().sqrt();
        for p in 0..c {
            let np: f64 = cols[p].iter().map(|x| x * x).sum::<f64>();
            if np < 1e-24 {
                continue;
            }
            let dot: f64 = cols[c].iter().zip(&cols[p]).map(|(a, b)| a * b).sum::<f64>() / np;
            for i in 0..rows {
                cols[c][i] -= dot * cols[p][i];
            }
        }
        let res: f64 = cols[c].iter().map(|x| x * x).sum::<f64>().sqrt();
        if res > 1e-8 * orig.max(1e-12) {
            rank += 1;
        } else {
            cols[c].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    rank
}

// ---------------------------------------------------------------------------
// Footage rasterization

/// Rendered clip: frames, exact projected landmarks, and the pixel-space
/// poses they were projected with (utterance poses are relative units).
pub struct FootageRender {
    pub frames: Vec<FrameBuffer>,
    pub landmarks: Vec<LandmarkSet>,
    pub poses: Vec<Pose>,
}

/// Resolve a relative-unit pose to pixel space for a w x h frame.
pub fn resolve_pose(rel: &Pose, w: usize, h: usize) -> Pose {
    Pose {
        rot: rel.rot,
        t: [rel.t[0] * w as f64, rel.t[1] * h as f64],
        scale: rel.scale * w.min(h) as f64,
    }
}

/// Rasterize an utterance: flat-shaded skin ellipse, eyes (omitted while
/// blinking, so the region shows skin), and a mouth polygon whose fill
/// color tracks the expression. Landmarks come from the exact projection
/// used everywhere else.
pub fn render_footage(basis: &FaceBasis, utt: &Utterance, w: usize, h: usize) -> Result<FootageRender> {
    if w < 64 || h < 64 {
        return Err(Error::Invalid(format!("frame dims {w}x{h} below 64x64")));
    }
    let mut frames = Vec::with_capacity(utt.n_frames());
    let mut landmark_sets = Vec::with_capacity(utt.n_frames());
    let mut poses = Vec::with_capacity(utt.n_frames());
    for f in 0..utt.n_frames() {
        let pose = resolve_pose(&utt.pose_track[f], w, h);
        let params = FaceParams {
            s: utt.geometry.clone(),
            e: utt.expression_track[f].clone(),
            pose,
        };
        let lm = landmarks_for(basis, &params);
        let frame = rasterize_face(basis, &lm, &params, utt.blink_track[f], w, h);
        frames.push(frame);
        landmark_sets.push(lm);
        poses.push(pose);
    }
    Ok(FootageRender {
        frames,
        landmarks: landmark_sets,
        poses,
    })
}

fn rasterize_face(
    basis: &FaceBasis,
    lm: &LandmarkSet,
    params: &FaceParams,
    blink: f64,
    w: usize,
    h: usize,
) -> FrameBuffer {
    let mut frame = FrameBuffer::filled(w, h, [0.10, 0.12, 0.15]);

    // Skin ellipse from the landmark bounding box, shaded by head turn.
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &lm.points {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let rx = (x1 - x0) / 2.0 * 1.45;
    let ry = (y1 - y0) / 2.0 * 1.55;
    let shade = (0.72 + 0.28 * params.pose.rot[0].cos() * params.pose.rot[1].cos()) as f32;
    let skin = [0.82 * shade, 0.66 * shade, 0.56 * shade];
    fill_ellipse(&mut frame, cx, cy, rx.max(4.0), ry.max(4.0), skin);

    // Eyes: pairs of corner landmarks; skipped entirely during a blink so
    // the eye region reads as skin.
    if blink <= 0.5 {
        let eyes: Vec<&[f64; 2]> = lm
            .points
            .iter()
            .zip(&basis.landmark_kinds)
            .filter(|(_, k)| **k == LandmarkKind::Eye)
            .map(|(p, _)| p)
            .collect();
        for pair in eyes.chunks_exact(2) {
            let ex = (pair[0][0] + pair[1][0]) / 2.0;
            let ey = (pair[0][1] + pair[1][1]) / 2.0;
            let er = ((pair[1][0] - pair[0][0]).hypot(pair[1][1] - pair[0][1]) / 2.0).max(1.0);
            fill_ellipse(&mut frame, ex, ey, er, 0.55 * er, [0.12, 0.10, 0.10]);
        }
    }

    // Nose dot.
    if let Some((p, _)) = lm
        .points
        .iter()
        .zip(&basis.landmark_kinds)
        .find(|(_, k)| **k == LandmarkKind::Nose)
    {
        fill_ellipse(&mut frame, p[0], p[1], 1.5, 1.5, [
            0.70 * shade,
            0.52 * shade,
            0.44 * shade,
        ]);
    }

    // Mouth polygon, interior color modulated by the expression vector.
    let mouth: Vec<[f64; 2]> = basis
        .mouth_positions()
        .iter()
        .map(|&i| lm.points[i])
        .collect();
    let e0 = params.e.first().copied().unwrap_or(0.0);
    let e1 = params.e.get(1).copied().unwrap_or(0.0);
    let lip = [
        (0.45 + 0.20 * e0.tanh()).clamp(0.0, 1.0) as f32,
        (0.15 + 0.10 * e1.tanh()).clamp(0.0, 1.0) as f32,
        0.18,
    ];
    let mask = fill_polygon(&mouth, w, h);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                frame.set(x, y, lip);
            }
        }
    }
    frame
}

/// Oracle: classify a clean audio window by matching spectral power at
/// each phoneme's profile-adjusted dominant frequency (Goertzel filters).
/// Independent of the MFCC path.
pub fn dominant_phoneme(
    inv: &[PhonemeDef],
    profile: &SpeakerProfile,
    samples: &[f32],
    sample_rate: u32,
) -> usize {
    let mut best = (0usize, f64::MIN);
    for (i, def) in inv.iter().enumerate() {
        let f = def.freqs[0].0 * profile.formant_scale + profile.pitch_offset;
        let p = goertzel_power(samples, sample_rate, f);
        if p > best.1 {
            best = (i, p);
        }
    }
    best.0
}

fn goertzel_power(samples: &[f32], sample_rate: u32, freq: f64) -> f64 {
    let w = std::f64::consts::TAU * freq / sample_rate as f64;
    let coeff = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for &x in samples {
        let s0 = x as f64 + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    s1 * s1 + s2 * s2 - coeff * s1 * s2
}
