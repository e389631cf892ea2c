//! Small network building blocks on top of the tape: linear layers and a
//! single-layer LSTM, plus their initializers.
//!
//! Initializers write into a [`ParamStore`]; `bind_*` copies the stored
//! tensors onto a tape as named parameter leaves so gradients come back
//! keyed by the same names the store uses.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng64;

/// Glorot-uniform weight matrix of shape (out, in).
pub fn xavier(rng: &mut Rng64, out_dim: usize, in_dim: usize) -> Tensor {
    let limit = (6.0 / (out_dim + in_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| rng.uniform(-limit, limit) as f32)
        .collect();
    Tensor::new(vec![out_dim, in_dim], data)
}

/// Create `{prefix}/w` (out, in) and `{prefix}/b` (out,).
pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut Rng64,
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
) {
    store.insert(&format!("{prefix}/w"), xavier(rng, out_dim, in_dim));
    store.insert(&format!("{prefix}/b"), Tensor::zeros(vec![out_dim]));
}

/// Create `{prefix}/w` (4·hidden, hidden+input) and `{prefix}/b`
/// (4·hidden,) holding the stacked gate transforms.
pub fn init_lstm(
    store: &mut ParamStore,
    rng: &mut Rng64,
    prefix: &str,
    hidden: usize,
    input: usize,
) {
    store.insert(
        &format!("{prefix}/w"),
        xavier(rng, 4 * hidden, hidden + input),
    );
    store.insert(&format!("{prefix}/b"), Tensor::zeros(vec![4 * hidden]));
}

/// Create `{prefix}/w` (out, in, k, k) and `{prefix}/b` (out,) for a
/// same-padded odd-kernel convolution, Glorot-scaled by fan counts.
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut Rng64,
    prefix: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
) {
    let fan_in = in_ch * k * k;
    let fan_out = out_ch * k * k;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..out_ch * in_ch * k * k)
        .map(|_| rng.uniform(-limit, limit) as f32)
        .collect();
    store.insert(
        &format!("{prefix}/w"),
        Tensor::new(vec![out_ch, in_ch, k, k], data),
    );
    store.insert(&format!("{prefix}/b"), Tensor::zeros(vec![out_ch]));
}

pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

pub fn bind_conv(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<ConvVars> {
    let wn = format!("{prefix}/w");
    let bn = format!("{prefix}/b");
    Ok(ConvVars {
        w: tape.param_leaf(&wn, store.require(&wn)?.clone()),
        b: tape.param_leaf(&bn, store.require(&bn)?.clone()),
    })
}

pub fn conv(tape: &mut Tape, vars: &ConvVars, x: Var) -> Var {
    tape.conv2d(x, vars.w, vars.b)
}

pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

pub fn bind_linear(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<LinearVars> {
    let wn = format!("{prefix}/w");
    let bn = format!("{prefix}/b");
    Ok(LinearVars {
        w: tape.param_leaf(&wn, store.require(&wn)?.clone()),
        b: tape.param_leaf(&bn, store.require(&bn)?.clone()),
    })
}

pub fn linear(tape: &mut Tape, vars: &LinearVars, x: Var) -> Var {
    let wx = tape.matmul(vars.w, x);
    tape.add(wx, vars.b)
}

pub struct LstmVars {
    pub w: Var,
    pub b: Var,
    pub hidden: usize,
}

pub fn bind_lstm(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    hidden: usize,
) -> Result<LstmVars> {
    let wn = format!("{prefix}/w");
    let bn = format!("{prefix}/b");
    Ok(LstmVars {
        w: tape.param_leaf(&wn, store.require(&wn)?.clone()),
        b: tape.param_leaf(&bn, store.require(&bn)?.clone()),
        hidden,
    })
}

/// One LSTM step. Gate order in the stacked preactivation is
/// input, forget, cell candidate, output.
pub fn lstm_step(tape: &mut Tape, vars: &LstmVars, h: Var, c: Var, x: Var) -> (Var, Var) {
    let hx = tape.concat(&[h, x]);
    let z0 = tape.matmul(vars.w, hx);
    let z = tape.add(z0, vars.b);
    let hd = vars.hidden;
    let zi = tape.slice(z, 0, hd);
    let zf = tape.slice(z, hd, hd);
    let zg = tape.slice(z, 2 * hd, hd);
    let zo = tape.slice(z, 3 * hd, hd);
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc);
    (h_new, c_new)
}

/// Run the LSTM over a sequence from zero initial state, returning the
/// hidden vector after each step.
pub fn lstm_sequence(tape: &mut Tape, vars: &LstmVars, xs: &[Var]) -> Vec<Var> {
    let mut h = tape.leaf(Tensor::zeros(vec![vars.hidden]));
    let mut c = tape.leaf(Tensor::zeros(vec![vars.hidden]));
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let (h2, c2) = lstm_step(tape, vars, h, c, x);
        h = h2;
        c = c2;
        out.push(h);
    }
    out
}

/// Load each row of a (R x C) tensor onto the tape as its own constant
/// leaf, the shape sequence models consume.
pub fn row_leaves(tape: &mut Tape, t: &Tensor) -> Vec<Var> {
    let r = t.shape()[0];
    let c: usize = t.shape()[1..].iter().product();
    (0..r)
        .map(|i| tape.leaf(Tensor::from_slice(&[c], &t.data()[i * c..(i + 1) * c])))
        .collect()
}

/// Mean of equally shaped vectors (temporal average pooling).
pub fn mean_pool(tape: &mut Tape, xs: &[Var]) -> Var {
    assert!(!xs.is_empty(), "mean_pool: no inputs");
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x);
    }
    tape.scale_const(acc, 1.0 / xs.len() as f32)
}
