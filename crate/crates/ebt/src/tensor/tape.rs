//! Operation tape for reverse-mode differentiation.
//!
//! Forward methods validate shapes, compute the result eagerly, and record
//! one node per operation. [`Tape::backward`] walks the node list once in
//! reverse, accumulating vector-Jacobian products. Shape errors are
//! programming mistakes and panic with the op name and offending shapes.

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: usize },
    ScaleConst { a: usize, c: f32 },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    Concat { parts: Vec<usize> },
    Slice { a: usize, start: usize },
    Mean { a: usize },
    Sum { a: usize },
    L1 { a: usize },
    L2 { a: usize },
    Conv2d { x: usize, w: usize, b: usize },
    Upsample2 { a: usize },
    AvgPool2 { a: usize },
    SoftmaxCe { logits: usize, target: Vec<f32> },
    Tv { a: usize },
}

struct Node {
    op: Op,
    out: usize,
}

/// Records a forward pass; one backward sweep per recording.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    params: Vec<(usize, String)>,
    spent: bool,
}

/// Per-value gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` was reachable.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, zeros if unreachable from the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

// Elementwise pairing: identical shapes, or `a = [batch, rest..]` against
// `b = [rest..]` (broadcast over the leading batch dimension only).
fn elementwise_mode(op: &str, a: &[usize], b: &[usize]) -> Option<usize> {
    if a == b {
        return None;
    }
    if a.len() == b.len() + 1 && &a[1..] == b {
        return Some(a[0]);
    }
    panic!("{op}: incompatible shapes {a:?} vs {b:?}");
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Record a constant leaf (no gradient bookkeeping of its own, but
    /// gradients still flow to it and can be read back).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.spent = false;
        self.vals.push(t);
        Var(self.vals.len() - 1)
    }

    /// Record a named parameter leaf. Names feed [`Tape::param_grads`].
    pub fn param_leaf(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.leaf(t);
        self.params.push((v.0, name.to_string()));
        v
    }

    fn push(&mut self, op: Op, out: Tensor) -> Var {
        debug_assert!(out.is_finite(), "tape op produced non-finite values");
        self.spent = false;
        self.vals.push(out);
        let out_idx = self.vals.len() - 1;
        self.nodes.push(Node { op, out: out_idx });
        Var(out_idx)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// (m,k)·(k,n) → (m,n), or (m,k)·(k,) → (m,).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.vals[a.0].shape(), self.vals[b.0].shape());
        let out = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
                assert_eq!(k, k2, "matmul: inner dims {sa:?} vs {sb:?}");
                let (da, db) = (self.vals[a.0].data(), self.vals[b.0].data());
                let mut o = vec![0.0f32; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = da[i * k + p];
                        if av != 0.0 {
                            let brow = &db[p * n..(p + 1) * n];
                            let orow = &mut o[i * n..(i + 1) * n];
                            for j in 0..n {
                                orow[j] += av * brow[j];
                            }
                        }
                    }
                }
                Tensor::new(vec![m, n], o)
            }
            (2, 1) => {
                let (m, k) = (sa[0], sa[1]);
                assert_eq!(k, sb[0], "matmul: inner dims {sa:?} vs {sb:?}");
                let (da, db) = (self.vals[a.0].data(), self.vals[b.0].data());
                let mut o = vec![0.0f32; m];
                for i in 0..m {
                    let row = &da[i * k..(i + 1) * k];
                    let mut acc = 0.0f32;
                    for p in 0..k {
                        acc += row[p] * db[p];
                    }
                    o[i] = acc;
                }
                Tensor::new(vec![m], o)
            }
            _ => panic!("matmul: unsupported ranks {sa:?} vs {sb:?}"),
        };
        self.push(Op::Matmul { a: a.0, b: b.0 }, out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.vals[a.0].shape();
        assert_eq!(s.len(), 2, "transpose: expects rank 2, got {s:?}");
        let (m, n) = (s[0], s[1]);
        let d = self.vals[a.0].data();
        let mut o = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                o[j * m + i] = d[i * n + j];
            }
        }
        self.push(Op::Transpose { a: a.0 }, Tensor::new(vec![n, m], o))
    }

    fn binary_elementwise(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Tensor {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let mode = elementwise_mode(name, ta.shape(), tb.shape());
        let rest = tb.numel();
        let mut o = Vec::with_capacity(ta.numel());
        match mode {
            None => {
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    o.push(f(*x, *y));
                }
            }
            Some(batch) => {
                for bi in 0..batch {
                    let base = bi * rest;
                    for j in 0..rest {
                        o.push(f(ta.data()[base + j], tb.data()[j]));
                    }
                }
            }
        }
        Tensor::new(ta.shape().to_vec(), o)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise("add", a, b, |x, y| x + y);
        self.push(Op::Add { a: a.0, b: b.0 }, out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise("sub", a, b, |x, y| x - y);
        self.push(Op::Sub { a: a.0, b: b.0 }, out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise("multiply", a, b, |x, y| x * y);
        self.push(Op::Mul { a: a.0, b: b.0 }, out)
    }

    /// Multiply a tensor by a scalar variable.
    pub fn scale(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(
            self.vals[s.0].numel(),
            1,
            "scale: scalar operand has shape {:?}",
            self.vals[s.0].shape()
        );
        let sv = self.vals[s.0].data()[0];
        let ta = &self.vals[a.0];
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * sv).collect(),
        );
        self.push(Op::Scale { a: a.0, s: s.0 }, out)
    }

    /// Multiply by a compile-time constant (loss weights and the like).
    pub fn scale_const(&mut self, a: Var, c: f32) -> Var {
        let ta = &self.vals[a.0];
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * c).collect(),
        );
        self.push(Op::ScaleConst { a: a.0, c }, out)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let ta = &self.vals[a.0];
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.unary(a, f32::tanh);
        self.push(Op::Tanh { a: a.0 }, out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid { a: a.0 }, out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| x.max(0.0));
        self.push(Op::Relu { a: a.0 }, out)
    }

    /// Concatenate along axis 0. All parts must agree on the trailing dims.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no operands");
        let rest = self.vals[parts[0].0].shape()[1..].to_vec();
        let mut dim0 = 0;
        for p in parts {
            let s = self.vals[p.0].shape();
            assert_eq!(
                &s[1..],
                rest.as_slice(),
                "concat: trailing dims differ, {s:?} vs {rest:?}"
            );
            dim0 += s[0];
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.vals[p.0].data());
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&rest);
        self.push(
            Op::Concat { parts: parts.iter().map(|p| p.0).collect() },
            Tensor::new(shape, data),
        )
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.vals[a.0].shape().to_vec();
        assert!(
            start + len <= s[0],
            "slice: rows {start}..{} out of bounds for shape {s:?}",
            start + len
        );
        let stride: usize = s[1..].iter().product();
        let data = self.vals[a.0].data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&s[1..]);
        self.push(Op::Slice { a: a.0, start }, Tensor::new(shape, data))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        let s: f64 = ta.data().iter().map(|&x| x as f64).sum();
        let out = Tensor::scalar((s / ta.numel() as f64) as f32);
        self.push(Op::Mean { a: a.0 }, out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        let s: f64 = ta.data().iter().map(|&x| x as f64).sum();
        self.push(Op::Sum { a: a.0 }, Tensor::scalar(s as f32))
    }

    /// Mean absolute value.
    pub fn l1(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        let s: f64 = ta.data().iter().map(|&x| x.abs() as f64).sum();
        let out = Tensor::scalar((s / ta.numel() as f64) as f32);
        self.push(Op::L1 { a: a.0 }, out)
    }

    /// Euclidean norm.
    pub fn l2(&mut self, a: Var) -> Var {
        let ta = &self.vals[a.0];
        let s: f64 = ta.data().iter().map(|&x| (x as f64) * (x as f64)).sum();
        self.push(Op::L2 { a: a.0 }, Tensor::scalar(s.sqrt() as f32))
    }

    /// 2D convolution over a CHW tensor: stride 1, zero padding K/2, odd
    /// square kernel, per-channel bias. Output spatial dims equal input.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (sx, sw, sb) = (
            self.vals[x.0].shape().to_vec(),
            self.vals[w.0].shape().to_vec(),
            self.vals[b.0].shape().to_vec(),
        );
        assert!(
            sx.len() == 3 && sw.len() == 4 && sb.len() == 1,
            "conv2d: want x CHW, w (Co,Ci,K,K), b (Co); got {sx:?}, {sw:?}, {sb:?}"
        );
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        assert!(
            sw[1] == ci && sw[3] == k && k % 2 == 1 && sb[0] == co,
            "conv2d: incompatible shapes x {sx:?}, w {sw:?}, b {sb:?}"
        );
        let pad = (k / 2) as isize;
        let xd = self.vals[x.0].data();
        let wdat = self.vals[w.0].data();
        let bd = self.vals[b.0].data();
        let mut o = vec![0.0f32; co * h * wd];
        for oc in 0..co {
            let oplane = &mut o[oc * h * wd..(oc + 1) * h * wd];
            for v in oplane.iter_mut() {
                *v = bd[oc];
            }
            for icc in 0..ci {
                let xplane = &xd[icc * h * wd..(icc + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[((oc * ci + icc) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as isize - dy.max(0)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (wd as isize - dx.max(0)) as usize;
                        for y in y0..y1 {
                            let src = ((y as isize + dy) as usize) * wd;
                            let dst = y * wd;
                            for xx in x0..x1 {
                                oplane[dst + xx] +=
                                    wv * xplane[src + (xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Op::Conv2d { x: x.0, w: w.0, b: b.0 },
            Tensor::new(vec![co, h, wd], o),
        )
    }

    /// Nearest-neighbor ×2 upsample of a CHW tensor.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let s = self.vals[a.0].shape().to_vec();
        assert_eq!(s.len(), 3, "upsample2: expects CHW, got {s:?}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.vals[a.0].data();
        let mut o = vec![0.0f32; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = d[(ch * h + y) * w + x];
                    for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        o[(ch * 2 * h + 2 * y + sy) * 2 * w + 2 * x + sx] = v;
                    }
                }
            }
        }
        self.push(Op::Upsample2 { a: a.0 }, Tensor::new(vec![c, 2 * h, 2 * w], o))
    }

    /// 2×2 average pooling of a CHW tensor; spatial dims must be even.
    pub fn avgpool2(&mut self, a: Var) -> Var {
        let s = self.vals[a.0].shape().to_vec();
        assert!(
            s.len() == 3 && s[1].is_multiple_of(2) && s[2].is_multiple_of(2),
            "avgpool2: expects CHW with even spatial dims, got {s:?}"
        );
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let d = self.vals[a.0].data();
        let mut o = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0f32;
                    for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        acc += d[(ch * h + 2 * y + sy) * w + 2 * x + sx];
                    }
                    o[(ch * oh + y) * ow + x] = acc * 0.25;
                }
            }
        }
        self.push(Op::AvgPool2 { a: a.0 }, Tensor::new(vec![c, oh, ow], o))
    }

    /// Cross-entropy of softmax(logits) against a fixed target
    /// distribution. The target is data, not a differentiable operand.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[f32]) -> Var {
        let tl = &self.vals[logits.0];
        assert!(
            tl.shape().len() == 1 && tl.numel() == target.len(),
            "softmax-cross-entropy: logits {:?} vs target length {}",
            tl.shape(),
            target.len()
        );
        let lse = log_sum_exp(tl.data());
        let mut loss = 0.0f64;
        for (l, t) in tl.data().iter().zip(target) {
            loss += (*t as f64) * (lse - *l as f64);
        }
        self.push(
            Op::SoftmaxCe { logits: logits.0, target: target.to_vec() },
            Tensor::scalar(loss as f32),
        )
    }

    /// Total variation of a CHW tensor: mean over elements of the summed
    /// absolute forward differences in x and y.
    pub fn tv(&mut self, a: Var) -> Var {
        let s = self.vals[a.0].shape().to_vec();
        assert_eq!(s.len(), 3, "tv: expects CHW, got {s:?}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.vals[a.0].data();
        let mut acc = 0.0f64;
        for ch in 0..c {
            let p = &d[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        acc += (p[y * w + x + 1] - p[y * w + x]).abs() as f64;
                    }
                    if y + 1 < h {
                        acc += (p[(y + 1) * w + x] - p[y * w + x]).abs() as f64;
                    }
                }
            }
        }
        let out = Tensor::scalar((acc / (c * h * w) as f64) as f32);
        self.push(Op::Tv { a: a.0 }, out)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Panics if the loss is not scalar
    /// or if called twice without recording new operations.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(
            self.vals[loss.0].numel(),
            1,
            "backward: loss has shape {:?}",
            self.vals[loss.0].shape()
        );
        assert!(
            !self.spent,
            "backward: called twice without a new forward pass"
        );
        self.spent = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(vec![1.0]);

        for node in self.nodes.iter().rev() {
            let g = match grads[node.out].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(node, &g, &mut grads);
        }

        Gradients {
            grads,
            shapes: self.vals.iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    /// Named gradients for every parameter leaf; parameters unreachable
    /// from the loss get zeros of the right shape.
    pub fn param_grads(&self, grads: &Gradients) -> super::GradMap {
        let mut out = std::collections::BTreeMap::new();
        for (idx, name) in &self.params {
            let t = grads
                .get(Var(*idx))
                .unwrap_or_else(|| Tensor::zeros(self.vals[*idx].shape().to_vec()));
            out.insert(name.clone(), t);
        }
        out
    }

    fn apply_vjp(&self, node: &Node, g: &[f32], grads: &mut Vec<Option<Vec<f32>>>) {
        let acc = |grads: &mut Vec<Option<Vec<f32>>>, idx: usize, contrib: Vec<f32>| {
            match &mut grads[idx] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.vals[*a].shape(), self.vals[*b].shape());
                let (da, db) = (self.vals[*a].data(), self.vals[*b].data());
                if sb.len() == 2 {
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let mut ga = vec![0.0f32; m * k];
                    let mut gb = vec![0.0f32; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let mut accv = 0.0f32;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &db[p * n..(p + 1) * n];
                            for j in 0..n {
                                accv += grow[j] * brow[j];
                            }
                            ga[i * k + p] = accv;
                        }
                        let av = &da[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let apv = av[p];
                            if apv != 0.0 {
                                let gbrow = &mut gb[p * n..(p + 1) * n];
                                for j in 0..n {
                                    gbrow[j] += apv * grow[j];
                                }
                            }
                        }
                    }
                    acc(grads, *a, ga);
                    acc(grads, *b, gb);
                } else {
                    let (m, k) = (sa[0], sa[1]);
                    let mut ga = vec![0.0f32; m * k];
                    let mut gb = vec![0.0f32; k];
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let arow = &da[i * k..(i + 1) * k];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for p in 0..k {
                            garow[p] += gi * db[p];
                            gb[p] += gi * arow[p];
                        }
                    }
                    acc(grads, *a, ga);
                    acc(grads, *b, gb);
                }
            }
            Op::Transpose { a } => {
                let s = self.vals[*a].shape();
                let (m, n) = (s[0], s[1]);
                let mut ga = vec![0.0f32; m * n];
                for j in 0..n {
                    for i in 0..m {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                acc(grads, *a, g.to_vec());
                let nb = self.vals[*b].numel();
                if nb == g.len() {
                    acc(grads, *b, g.iter().map(|x| sign * x).collect());
                } else {
                    let mut gb = vec![0.0f32; nb];
                    for (i, x) in g.iter().enumerate() {
                        gb[i % nb] += sign * x;
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.vals[*a].data(), self.vals[*b].data());
                let nb = db.len();
                if nb == g.len() {
                    acc(
                        grads,
                        *a,
                        g.iter().zip(db).map(|(x, y)| x * y).collect(),
                    );
                    acc(
                        grads,
                        *b,
                        g.iter().zip(da).map(|(x, y)| x * y).collect(),
                    );
                } else {
                    let ga: Vec<f32> =
                        g.iter().enumerate().map(|(i, x)| x * db[i % nb]).collect();
                    let mut gb = vec![0.0f32; nb];
                    for (i, x) in g.iter().enumerate() {
                        gb[i % nb] += x * da[i];
                    }
                    acc(grads, *a, ga);
                    acc(grads, *b, gb);
                }
            }
            Op::Scale { a, s } => {
                let sv = self.vals[*s].data()[0];
                let da = self.vals[*a].data();
                acc(grads, *a, g.iter().map(|x| x * sv).collect());
                let gs: f64 = g
                    .iter()
                    .zip(da)
                    .map(|(x, y)| (*x as f64) * (*y as f64))
                    .sum();
                acc(grads, *s, vec![gs as f32]);
            }
            Op::ScaleConst { a, c } => {
                acc(grads, *a, g.iter().map(|x| x * c).collect());
            }
            Op::Tanh { a } => {
                let y = self.vals[node.out].data();
                acc(
                    grads,
                    *a,
                    g.iter().zip(y).map(|(x, v)| x * (1.0 - v * v)).collect(),
                );
            }
            Op::Sigmoid { a } => {
                let y = self.vals[node.out].data();
                acc(
                    grads,
                    *a,
                    g.iter().zip(y).map(|(x, v)| x * v * (1.0 - v)).collect(),
                );
            }
            Op::Relu { a } => {
                let xin = self.vals[*a].data();
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(xin)
                        .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.vals[*p].numel();
                    acc(grads, *p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Slice { a, start } => {
                let sa = self.vals[*a].shape();
                let stride: usize = sa[1..].iter().product();
                let mut ga = vec![0.0f32; self.vals[*a].numel()];
                ga[start * stride..start * stride + g.len()].copy_from_slice(g);
                acc(grads, *a, ga);
            }
            Op::Mean { a } => {
                let n = self.vals[*a].numel();
                let gv = g[0] / n as f32;
                acc(grads, *a, vec![gv; n]);
            }
            Op::Sum { a } => {
                acc(grads, *a, vec![g[0]; self.vals[*a].numel()]);
            }
            Op::L1 { a } => {
                let d = self.vals[*a].data();
                let gv = g[0] / d.len() as f32;
                acc(
                    grads,
                    *a,
                    d.iter()
                        .map(|x| {
                            if *x > 0.0 {
                                gv
                            } else if *x < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::L2 { a } => {
                let d = self.vals[*a].data();
                let norm = self.vals[node.out].data()[0];
                if norm > 1e-12 {
                    let gv = g[0] / norm;
                    acc(grads, *a, d.iter().map(|x| x * gv).collect());
                } else {
                    acc(grads, *a, vec![0.0; d.len()]);
                }
            }
            Op::Conv2d { x, w, b } => {
                let sx = self.vals[*x].shape();
                let sw = self.vals[*w].shape();
                let (ci, h, wd) = (sx[0], sx[1], sx[2]);
                let (co, k) = (sw[0], sw[2]);
                let pad = (k / 2) as isize;
                let xd = self.vals[*x].data();
                let wdat = self.vals[*w].data();
                let mut gx = vec![0.0f32; ci * h * wd];
                let mut gw = vec![0.0f32; co * ci * k * k];
                let mut gb = vec![0.0f32; co];
                for oc in 0..co {
                    let gplane = &g[oc * h * wd..(oc + 1) * h * wd];
                    let mut bsum = 0.0f32;
                    for v in gplane {
                        bsum += v;
                    }
                    gb[oc] = bsum;
                    for icc in 0..ci {
                        let xplane = &xd[icc * h * wd..(icc + 1) * h * wd];
                        let gxplane = &mut gx[icc * h * wd..(icc + 1) * h * wd];
                        for ky in 0..k {
                            for kx in 0..k {
                                let widx = ((oc * ci + icc) * k + ky) * k + kx;
                                let wv = wdat[widx];
                                let dy = ky as isize - pad;
                                let dx = kx as isize - pad;
                                let y0 = (-dy).max(0) as usize;
                                let y1 = (h as isize - dy.max(0)) as usize;
                                let x0 = (-dx).max(0) as usize;
                                let x1 = (wd as isize - dx.max(0)) as usize;
                                let mut wacc = 0.0f32;
                                for y in y0..y1 {
                                    let src = ((y as isize + dy) as usize) * wd;
                                    let dst = y * wd;
                                    for xx in x0..x1 {
                                        let sidx = src + (xx as isize + dx) as usize;
                                        let gv = gplane[dst + xx];
                                        wacc += gv * xplane[sidx];
                                        gxplane[sidx] += gv * wv;
                                    }
                                }
                                gw[widx] += wacc;
                            }
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                acc(grads, *b, gb);
            }
            Op::Upsample2 { a } => {
                let s = self.vals[*a].shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut ga = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let mut accv = 0.0f32;
                            for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                accv += g[(ch * 2 * h + 2 * y + sy) * 2 * w + 2 * x + sx];
                            }
                            ga[(ch * h + y) * w + x] = accv;
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::AvgPool2 { a } => {
                let s = self.vals[*a].shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut ga = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = g[(ch * oh + y) * ow + x] * 0.25;
                            for (sy, sx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                ga[(ch * h + 2 * y + sy) * w + 2 * x + sx] = gv;
                            }
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::SoftmaxCe { logits, target } => {
                let l = self.vals[*logits].data();
                let lse = log_sum_exp(l);
                let gv = g[0];
                acc(
                    grads,
                    *logits,
                    l.iter()
                        .zip(target)
                        .map(|(x, t)| gv * (((*x as f64 - lse).exp()) as f32 - t))
                        .collect(),
                );
            }
            Op::Tv { a } => {
                let s = self.vals[*a].shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let d = self.vals[*a].data();
                let gv = g[0] / (c * h * w) as f32;
                let mut ga = vec![0.0f32; d.len()];
                for ch in 0..c {
                    let base = ch * h * w;
                    for y in 0..h {
                        for x in 0..w {
                            let i = base + y * w + x;
                            if x + 1 < w {
                                let sgn = (d[i + 1] - d[i]).signum_or_zero();
                                ga[i + 1] += gv * sgn;
                                ga[i] -= gv * sgn;
                            }
                            if y + 1 < h {
                                let sgn = (d[i + w] - d[i]).signum_or_zero();
                                ga[i + w] += gv * sgn;
                                ga[i] -= gv * sgn;
                            }
                        }
                    }
                }
                acc(grads, *a, ga);
            }
        }
    }
}

fn log_sum_exp(xs: &[f32]) -> f64 {
    let m = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = xs.iter().map(|&x| (x as f64 - m).exp()).sum();
    m + s.ln()
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f32;
}

impl SignumOrZero for f32 {
    fn signum_or_zero(self) -> f32 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_known_values() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_slice(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = t.leaf(Tensor::from_slice(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = t.matmul(a, b);
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matvec_matches_matmul_with_column() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_slice(&[2, 3], &[1.0, -1.0, 2.0, 0.5, 3.0, -2.0]));
        let v = t.leaf(Tensor::from_slice(&[3], &[2.0, 1.0, -1.0]));
        let y = t.matmul(a, v);
        assert_eq!(t.value(y).shape(), &[2]);
        assert_eq!(t.value(y).data(), &[-1.0, 6.0]);
    }

    #[test]
    fn add_broadcasts_over_leading_dim() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_slice(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = t.leaf(Tensor::from_slice(&[2], &[10.0, 20.0]));
        let c = t.add(a, b);
        assert_eq!(t.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = t.sum(c);
        let g = t.backward(s);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn chain_rule_through_product() {
        // d/dx mean(x * x) = 2x / n
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[3], &[1.0, -2.0, 3.0]));
        let y = t.mul(x, x);
        let m = t.mean(y);
        let g = t.backward(m);
        let gx = g.get(x).unwrap();
        for (got, want) in gx.data().iter().zip([2.0 / 3.0, -4.0 / 3.0, 2.0]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn uniform_softmax_cross_entropy_is_ln_n() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::from_slice(&[5], &[0.3; 5]));
        let loss = t.softmax_cross_entropy(l, &[0.2; 5]);
        assert!((t.value(loss).item() - (5.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn l2_gradient_is_unit_direction() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[2], &[3.0, 4.0]));
        let n = t.l2(x);
        assert!((t.value(n).item() - 5.0).abs() < 1e-6);
        let g = t.backward(n);
        let gx = g.get(x).unwrap();
        assert!((gx.data()[0] - 0.6).abs() < 1e-6);
        assert!((gx.data()[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn l2_at_zero_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![4]));
        let n = t.l2(x);
        let g = t.backward(n);
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    #[should_panic(expected = "called twice")]
    fn backward_twice_panics() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.mul(x, x);
        let _ = t.backward(y);
        let _ = t.backward(y);
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn matmul_shape_mismatch_panics() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(vec![2, 3]));
        let b = t.leaf(Tensor::zeros(vec![4, 2]));
        let _ = t.matmul(a, b);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[4, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let top = t.slice(x, 0, 2);
        let bottom = t.slice(x, 2, 2);
        let back = t.concat(&[top, bottom]);
        assert_eq!(t.value(back).data(), t.value(x).data());
        let s = t.sum(back);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 8]);
    }

    #[test]
    fn conv2d_identity_kernel_shifts_nothing() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_slice(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0; // center tap
        let w = t.leaf(Tensor::new(vec![1, 1, 3, 3], k));
        let b = t.leaf(Tensor::zeros(vec![1]));
        let y = t.conv2d(x, w, b);
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn avgpool_then_upsample_preserves_constant() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 4, 4], vec![0.5; 32]));
        let p = t.avgpool2(x);
        let u = t.upsample2(p);
        assert_eq!(t.value(u).shape(), &[2, 4, 4]);
        assert!(t.value(u).data().iter().all(|v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut t = Tape::new();
        let used = t.param_leaf("used", Tensor::scalar(2.0));
        let _unused = t.param_leaf("unused", Tensor::from_slice(&[2], &[1.0, 1.0]));
        let y = t.mul(used, used);
        let g = t.backward(y);
        let pg = t.param_grads(&g);
        assert_eq!(pg["used"].item(), 4.0);
        assert_eq!(pg["unused"].data(), &[0.0, 0.0]);
    }
}
