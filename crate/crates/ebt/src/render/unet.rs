//! Mouth-region completion network: a small encoder-decoder with skip
//! connections that maps a stacked (masked frames + landmark heatmaps)
//! input to an RGB crop, trained with a reconstruction plus total
//! variation objective.

use crate::render::FrameBuffer;
use crate::rng::Rng64;
use crate::tensor::{bind_conv, conv, init_conv, Adam, ConvVars, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Weight on the total-variation term of the render objective.
pub const TV_WEIGHT: f32 = 0.1;
/// Crop side length the pipeline trains and drives at.
pub const CROP: usize = 32;
pub const DEFAULT_BASE_CHANNELS: usize = 8;

/// Encoder-decoder over CHW crops: two 2x downsamples to a bottleneck,
/// two 2x upsamples with skip concatenation, sigmoid RGB head. Spatial
/// dims are preserved end to end and must be divisible by 4. Weights
/// live under "render/*".
#[derive(Clone, Copy, Debug)]
pub struct CompletionNet {
    /// Input channels (4 per stacked frame).
    pub c_in: usize,
    /// Channel width of the first encoder level.
    pub base: usize,
}

impl CompletionNet {
    pub fn init(store: &mut ParamStore, rng: &mut Rng64, c_in: usize, base: usize) -> Self {
        init_conv(store, rng, "render/enc1", base, c_in, 3);
        init_conv(store, rng, "render/enc2", 2 * base, base, 3);
        init_conv(store, rng, "render/mid", 2 * base, 2 * base, 3);
        init_conv(store, rng, "render/dec2", base, 4 * base, 3);
        init_conv(store, rng, "render/dec1", base, 2 * base, 3);
        init_conv(store, rng, "render/out", 3, base, 3);
        CompletionNet { c_in, base }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let w = store.require("render/enc1/w")?;
        Ok(CompletionNet { c_in: w.shape()[1], base: w.shape()[0] })
    }
}

pub struct CompletionVars {
    enc1: ConvVars,
    enc2: ConvVars,
    mid: ConvVars,
    dec2: ConvVars,
    dec1: ConvVars,
    out: ConvVars,
}

pub fn bind_completion(tape: &mut Tape, store: &ParamStore) -> Result<CompletionVars> {
    Ok(CompletionVars {
        enc1: bind_conv(tape, store, "render/enc1")?,
        enc2: bind_conv(tape, store, "render/enc2")?,
        mid: bind_conv(tape, store, "render/mid")?,
        dec2: bind_conv(tape, store, "render/dec2")?,
        dec1: bind_conv(tape, store, "render/dec1")?,
        out: bind_conv(tape, store, "render/out")?,
    })
}

/// Forward pass: (c_in, H, W) -> (3, H, W) in (0, 1).
pub fn complete(tape: &mut Tape, vars: &CompletionVars, stack: Var) -> Var {
    let e1 = conv(tape, &vars.enc1, stack);
    let e1 = tape.relu(e1);
    let d1 = tape.avgpool2(e1);
    let e2 = conv(tape, &vars.enc2, d1);
    let e2 = tape.relu(e2);
    let d2 = tape.avgpool2(e2);
    let m = conv(tape, &vars.mid, d2);
    let m = tape.relu(m);
    let u2 = tape.upsample2(m);
    let s2 = tape.concat(&[u2, e2]);
    let c2 = conv(tape, &vars.dec2, s2);
    let c2 = tape.relu(c2);
    let u1 = tape.upsample2(c2);
    let s1 = tape.concat(&[u1, e1]);
    let c1 = conv(tape, &vars.dec1, s1);
    let c1 = tape.relu(c1);
    let rgb = conv(tape, &vars.out, c1);
    tape.sigmoid(rgb)
}

/// Off-tape inference on one stacked input.
pub fn complete_tensor(store: &ParamStore, net: &CompletionNet, stack: &Tensor) -> Result<FrameBuffer> {
    let s = stack.shape();
    if s.len() != 3 || s[0] != net.c_in {
        return Err(Error::Invalid(format!(
            "stack shape {s:?} does not match network input {}",
            net.c_in
        )));
    }
    if s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(Error::Invalid(format!(
            "stack spatial dims {}x{} not divisible by 4",
            s[1], s[2]
        )));
    }
    let mut tape = Tape::new();
    let vars = bind_completion(&mut tape, store)?;
    let x = tape.leaf(stack.clone());
    let y = complete(&mut tape, &vars, x);
    Ok(FrameBuffer::from_chw(tape.value(y)))
}

/// Reconstruction and total-variation terms on the tape.
pub fn render_loss_terms(tape: &mut Tape, pred: Var, gt: Var) -> (Var, Var) {
    let diff = tape.sub(pred, gt);
    let recon = tape.l1(diff);
    let tv = tape.tv(pred);
    (recon, tv)
}

/// One training pair: stacked input and the uncorrupted target crop.
#[derive(Clone)]
pub struct CompletionSample {
    pub stack: Tensor,
    pub target: Tensor,
}

/// Per-epoch mean loss terms.
#[derive(Clone, Copy, Debug)]
pub struct RenderLosses {
    pub recon: f64,
    pub tv: f64,
}

/// Adam on mean(L_recon) + w_tv·mean(L_tv) over shuffled minibatches.
#[allow(clippy::too_many_arguments)]
pub fn train_completion(
    store: &mut ParamStore,
    net: &CompletionNet,
    samples: &[CompletionSample],
    epochs: usize,
    batch: usize,
    lr: f32,
    w_tv: f32,
    seed: u64,
) -> Result<Vec<RenderLosses>> {
    if samples.is_empty() {
        return Err(Error::Invalid("no completion samples".into()));
    }
    for s in samples {
        let (ss, ts) = (s.stack.shape(), s.target.shape());
        if ss.len() != 3 || ss[0] != net.c_in || ts != [3, ss[1], ss[2]] {
            return Err(Error::Invalid(format!(
                "bad sample shapes: stack {ss:?}, target {ts:?}"
            )));
        }
    }
    let mut adam = Adam::new(lr);
    let mut rng = Rng64::derive(seed, "render-train");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let (mut recon_sum, mut tv_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
        for chunk in order.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let vars = bind_completion(&mut tape, store)?;
            let mut recons = Vec::with_capacity(chunk.len());
            let mut tvs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = tape.leaf(samples[i].stack.clone());
                let gt = tape.leaf(samples[i].target.clone());
                let pred = complete(&mut tape, &vars, x);
                let (r, t) = render_loss_terms(&mut tape, pred, gt);
                recons.push(r);
                tvs.push(t);
            }
            let mut racc = recons[0];
            let mut tacc = tvs[0];
            for k in 1..chunk.len() {
                racc = tape.add(racc, recons[k]);
                tacc = tape.add(tacc, tvs[k]);
            }
            let inv = 1.0 / chunk.len() as f32;
            let rmean = tape.scale_const(racc, inv);
            let tmean = tape.scale_const(tacc, inv);
            let wtv = tape.scale_const(tmean, w_tv);
            let loss = tape.add(rmean, wtv);
            if !tape.value(loss).is_finite() {
                return Err(Error::Numeric("render loss is not finite".into()));
            }
            recon_sum += tape.value(rmean).item() as f64 * chunk.len() as f64;
            tv_sum += tape.value(tmean).item() as f64 * chunk.len() as f64;
            seen += chunk.len();
            let grads = tape.backward(loss);
            let gm = tape.param_grads(&grads);
            adam.step(store, &gm)?;
        }
        history.push(RenderLosses {
            recon: recon_sum / seen as f64,
            tv: tv_sum / seen as f64,
        });
    }
    Ok(history)
}
