//! Linear 3D face model, weak-perspective landmark projection, and
//! parameter fitting by damped nonlinear least squares.
//!
//! A mesh is `mean + G·(s ⊙ σ_s) + E·(e ⊙ σ_e)`; a landmark is the screen
//! projection `scale·Π·R(θ)·v + t` of a tracked vertex, with `R` the
//! intrinsic ZYX Euler rotation and `Π` dropping z. Everything here runs
//! in f64: the Jacobians feed a Levenberg-Marquardt loop and a
//! finite-difference oracle, both of which need more headroom than f32.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LandmarkKind {
    Mouth,
    Jaw,
    Eye,
    Nose,
}

impl LandmarkKind {
    pub fn code(self) -> u8 {
        match self {
            LandmarkKind::Mouth => 0,
            LandmarkKind::Jaw => 1,
            LandmarkKind::Eye => 2,
            LandmarkKind::Nose => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => LandmarkKind::Mouth,
            1 => LandmarkKind::Jaw,
            2 => LandmarkKind::Eye,
            3 => LandmarkKind::Nose,
            _ => return Err(Error::Model(format!("unknown landmark kind code {c}"))),
        })
    }
}

/// Immutable model data shared by fitting, driving, and rendering.
#[derive(Clone)]
pub struct FaceBasis {
    pub mean_shape: Vec<f32>,
    /// (3V × Dₛ) row-major, unit-norm columns.
    pub geometry_basis: Vec<f32>,
    /// (3V × Dₑ) row-major, unit-norm columns.
    pub expression_basis: Vec<f32>,
    pub geometry_sigma: Vec<f32>,
    pub expression_sigma: Vec<f32>,
    pub landmark_indices: Vec<usize>,
    pub landmark_kinds: Vec<LandmarkKind>,
}

impl FaceBasis {
    pub fn n_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn geo_dim(&self) -> usize {
        self.geometry_sigma.len()
    }

    pub fn exp_dim(&self) -> usize {
        self.expression_sigma.len()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmark_indices.len()
    }

    /// Positions (into the landmark list) of the mouth landmarks.
    pub fn mouth_positions(&self) -> Vec<usize> {
        self.landmark_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == LandmarkKind::Mouth)
            .map(|(i, _)| i)
            .collect()
    }

    /// Positions of the landmarks that drive rendering: mouth + jawline.
    pub fn render_positions(&self) -> Vec<usize> {
        self.landmark_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| matches!(**k, LandmarkKind::Mouth | LandmarkKind::Jaw))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let v3 = self.mean_shape.len();
        if v3 == 0 || !v3.is_multiple_of(3) {
            return Err(Error::Model(format!("mean shape length {v3} not 3V")));
        }
        let (ds, de) = (self.geo_dim(), self.exp_dim());
        if self.geometry_basis.len() != v3 * ds || self.expression_basis.len() != v3 * de {
            return Err(Error::Model("basis matrix dims do not match mean shape".into()));
        }
        for (name, basis, d) in [
            ("geometry", &self.geometry_basis, ds),
            ("expression", &self.expression_basis, de),
        ] {
            for j in 0..d {
                let n2: f64 = (0..v3)
                    .map(|r| (basis[r * d + j] as f64).powi(2))
                    .sum();
                if (n2.sqrt() - 1.0).abs() > 1e-3 {
                    return Err(Error::Model(format!(
                        "{name} basis column {j} norm {} is not unit",
                        n2.sqrt()
                    )));
                }
            }
        }
        for (name, sig) in [
            ("geometry", &self.geometry_sigma),
            ("expression", &self.expression_sigma),
        ] {
            for w in sig.windows(2) {
                if w[1] > w[0] {
                    return Err(Error::Model(format!("{name} sigmas increase")));
                }
            }
            if sig.iter().any(|v| *v <= 0.0) {
                return Err(Error::Model(format!("{name} sigma not positive")));
            }
        }
        if self.landmark_kinds.len() != self.landmark_indices.len() {
            return Err(Error::Model("landmark kind/index length mismatch".into()));
        }
        let v = v3 / 3;
        if self.landmark_indices.iter().any(|i| *i >= v) {
            return Err(Error::Model("landmark index out of vertex range".into()));
        }
        if self.mouth_positions().is_empty() {
            return Err(Error::Model("no mouth landmarks".into()));
        }
        Ok(())
    }
}

/// Rigid pose: Euler angles (radians), screen translation (pixels), and a
/// positive weak-perspective scale.
#[derive(Clone, Copy, Debug)]
pub struct Pose {
    pub rot: [f64; 3],
    pub t: [f64; 2],
    pub scale: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rot: [0.0; 3], t: [0.0; 2], scale: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct FaceParams {
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub pose: Pose,
}

impl FaceParams {
    /// Neutral start: zero coefficients, identity pose.
    pub fn neutral(basis: &FaceBasis) -> Self {
        FaceParams {
            s: vec![0.0; basis.geo_dim()],
            e: vec![0.0; basis.exp_dim()],
            pose: Pose::identity(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }

    /// Subset by positions into the point list.
    pub fn select(&self, positions: &[usize]) -> LandmarkSet {
        LandmarkSet {
            points: positions.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn flat_f32(&self) -> Vec<f32> {
        self.points
            .iter()
            .flat_map(|p| [p[0] as f32, p[1] as f32])
            .collect()
    }
}

// ── geometry ────────────────────────────────────────────────────────────

type Mat3 = [[f64; 3]; 3];

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                o[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    o
}

fn mat3_apply(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn drot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn drot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn drot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

/// Intrinsic ZYX rotation: Rz(θz)·Ry(θy)·Rx(θx).
pub fn rotation(rot: [f64; 3]) -> Mat3 {
    mat3_mul(&rot_z(rot[2]), &mat3_mul(&rot_y(rot[1]), &rot_x(rot[0])))
}

fn rotation_derivs(rot: [f64; 3]) -> [Mat3; 3] {
    let (rx, ry, rz) = (rot_x(rot[0]), rot_y(rot[1]), rot_z(rot[2]));
    [
        mat3_mul(&rz, &mat3_mul(&ry, &drot_x(rot[0]))),
        mat3_mul(&rz, &mat3_mul(&drot_y(rot[1]), &rx)),
        mat3_mul(&drot_z(rot[2]), &mat3_mul(&ry, &rx)),
    ]
}

// ── model evaluation ────────────────────────────────────────────────────

/// Full vertex array for coefficient vectors (s, e).
pub fn reconstruct_mesh(basis: &FaceBasis, s: &[f64], e: &[f64]) -> Vec<f64> {
    let (ds, de) = (basis.geo_dim(), basis.exp_dim());
    assert_eq!(s.len(), ds, "reconstruct_mesh: s has length {}", s.len());
    assert_eq!(e.len(), de, "reconstruct_mesh: e has length {}", e.len());
    let n = basis.mean_shape.len();
    let mut out: Vec<f64> = basis.mean_shape.iter().map(|v| *v as f64).collect();
    let ws: Vec<f64> = s
        .iter()
        .zip(&basis.geometry_sigma)
        .map(|(a, b)| a * *b as f64)
        .collect();
    let we: Vec<f64> = e
        .iter()
        .zip(&basis.expression_sigma)
        .map(|(a, b)| a * *b as f64)
        .collect();
    for (r, slot) in out.iter_mut().enumerate().take(n) {
        let grow = &basis.geometry_basis[r * ds..(r + 1) * ds];
        let erow = &basis.expression_basis[r * de..(r + 1) * de];
        let mut acc = *slot;
        for (j, g) in grow.iter().enumerate() {
            acc += *g as f64 * ws[j];
        }
        for (j, ev) in erow.iter().enumerate() {
            acc += *ev as f64 * we[j];
        }
        *slot = acc;
    }
    out
}

/// Tracked vertices of a reconstructed mesh, as 3D points.
fn landmark_vertices(basis: &FaceBasis, mesh: &[f64]) -> Vec<[f64; 3]> {
    basis
        .landmark_indices
        .iter()
        .map(|&vi| [mesh[3 * vi], mesh[3 * vi + 1], mesh[3 * vi + 2]])
        .collect()
}

/// Weak-perspective screen projection of the tracked vertices.
pub fn project_landmarks(basis: &FaceBasis, mesh: &[f64], pose: &Pose) -> LandmarkSet {
    let r = rotation(pose.rot);
    let points = landmark_vertices(basis, mesh)
        .into_iter()
        .map(|v| {
            let rv = mat3_apply(&r, v);
            [pose.scale * rv[0] + pose.t[0], pose.scale * rv[1] + pose.t[1]]
        })
        .collect();
    LandmarkSet { points }
}

/// Convenience: reconstruct + project in one call.
pub fn landmarks_for(basis: &FaceBasis, params: &FaceParams) -> LandmarkSet {
    let mesh = reconstruct_mesh(basis, &params.s, &params.e);
    project_landmarks(basis, &mesh, &params.pose)
}

/// Row-major (rows × cols) f64 matrix.
#[derive(Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Jacobian of all landmark coordinates with respect to (s, e, pose).
/// Rows are (x₀, y₀, x₁, y₁, …); columns are s, then e, then
/// (θx, θy, θz, tx, ty, scale). Also returns the landmarks at `params`.
pub fn landmark_jacobian(basis: &FaceBasis, params: &FaceParams) -> (LandmarkSet, Mat) {
    let (ds, de) = (basis.geo_dim(), basis.exp_dim());
    let l = basis.n_landmarks();
    let ncols = ds + de + 6;
    let mesh = reconstruct_mesh(basis, &params.s, &params.e);
    let verts = landmark_vertices(basis, &mesh);
    let r = rotation(params.pose.rot);
    let drs = rotation_derivs(params.pose.rot);
    let scale = params.pose.scale;

    let mut jac = Mat::zeros(2 * l, ncols);
    let mut pts = Vec::with_capacity(l);
    for (i, &v) in verts.iter().enumerate() {
        let rv = mat3_apply(&r, v);
        pts.push([scale * rv[0] + params.pose.t[0], scale * rv[1] + params.pose.t[1]]);
        let vi = basis.landmark_indices[i];

        // Coefficient columns: scale·Π·R·(basis column at this vertex)·σ.
        for (block, d, sig, off) in [
            (&basis.geometry_basis, ds, &basis.geometry_sigma, 0),
            (&basis.expression_basis, de, &basis.expression_sigma, ds),
        ] {
            for j in 0..d {
                let col = [
                    block[(3 * vi) * d + j] as f64,
                    block[(3 * vi + 1) * d + j] as f64,
                    block[(3 * vi + 2) * d + j] as f64,
                ];
                let rc = mat3_apply(&r, col);
                let w = scale * sig[j] as f64;
                jac.set(2 * i, off + j, w * rc[0]);
                jac.set(2 * i + 1, off + j, w * rc[1]);
            }
        }
        // Rotation columns.
        for (k, dr) in drs.iter().enumerate() {
            let dv = mat3_apply(dr, v);
            jac.set(2 * i, ds + de + k, scale * dv[0]);
            jac.set(2 * i + 1, ds + de + k, scale * dv[1]);
        }
        // Translation and scale columns.
        jac.set(2 * i, ds + de + 3, 1.0);
        jac.set(2 * i + 1, ds + de + 4, 1.0);
        jac.set(2 * i, ds + de + 5, rv[0]);
        jac.set(2 * i + 1, ds + de + 5, rv[1]);
    }
    (LandmarkSet { points: pts }, jac)
}

/// Mouth landmarks as an affine function of the expression coefficients:
/// `l_mouth(e) = A·e + b` with geometry and pose held fixed. Exact, since
/// the model is linear in e. `A` is (2·Lm × Dₑ) row-major, `b` is 2·Lm.
pub fn mouth_affine(basis: &FaceBasis, s: &[f64], pose: &Pose) -> (Mat, Vec<f64>) {
    let mouth = basis.mouth_positions();
    let de = basis.exp_dim();
    let zero_e = vec![0.0f64; de];
    let mesh0 = reconstruct_mesh(basis, s, &zero_e);
    let base = project_landmarks(basis, &mesh0, pose);
    let r = rotation(pose.rot);

    let mut a = Mat::zeros(2 * mouth.len(), de);
    let mut b = Vec::with_capacity(2 * mouth.len());
    for (row, &pos) in mouth.iter().enumerate() {
        let vi = basis.landmark_indices[pos];
        for j in 0..de {
            let col = [
                basis.expression_basis[(3 * vi) * de + j] as f64,
                basis.expression_basis[(3 * vi + 1) * de + j] as f64,
                basis.expression_basis[(3 * vi + 2) * de + j] as f64,
            ];
            let rc = mat3_apply(&r, col);
            let w = pose.scale * basis.expression_sigma[j] as f64;
            a.set(2 * row, j, w * rc[0]);
            a.set(2 * row + 1, j, w * rc[1]);
        }
        b.push(base.points[pos][0]);
        b.push(base.points[pos][1]);
    }
    (a, b)
}

// ── fitting ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub w_reg: f64,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { w_reg: 1e-3, max_iters: 100 }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Cost before any step, then after each accepted step.
    pub costs: Vec<f64>,
    pub converged: bool,
}

fn pack(params: &FaceParams) -> Vec<f64> {
    let mut v = params.s.clone();
    v.extend_from_slice(&params.e);
    v.extend_from_slice(&params.pose.rot);
    v.extend_from_slice(&params.pose.t);
    v.push(params.pose.scale);
    v
}

fn unpack(v: &[f64], ds: usize, de: usize) -> FaceParams {
    FaceParams {
        s: v[..ds].to_vec(),
        e: v[ds..ds + de].to_vec(),
        pose: Pose {
            rot: [v[ds + de], v[ds + de + 1], v[ds + de + 2]],
            t: [v[ds + de + 3], v[ds + de + 4]],
            scale: v[ds + de + 5],
        },
    }
}

fn fit_cost(basis: &FaceBasis, params: &FaceParams, observed: &LandmarkSet, w_reg: f64) -> f64 {
    let pred = landmarks_for(basis, params);
    let mut c = 0.0;
    for (p, o) in pred.points.iter().zip(&observed.points) {
        c += (p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2);
    }
    for x in &params.s {
        c += w_reg * x * x;
    }
    for x in &params.e {
        c += w_reg * x * x;
    }
    c
}

/// Solve A·x = b for symmetric positive definite A (in place, row-major).
/// Returns None when the factorization breaks down.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Option<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= a[k * n + i] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    Some(())
}

/// Levenberg-Marquardt fit of (s, e, pose) to observed landmarks,
/// minimizing squared reprojection error plus `w_reg`-weighted coefficient
/// regularization. Damping starts at 1e-3, grows ×10 on a rejected step,
/// shrinks ×0.5 on an accepted one, and the fit fails once it would
/// exceed 1e7 without finding a usable step.
pub fn fit_params(
    observed: &LandmarkSet,
    basis: &FaceBasis,
    init: &FaceParams,
    opts: &FitOptions,
) -> Result<(FaceParams, FitReport)> {
    if observed.len() != basis.n_landmarks() {
        return Err(Error::Fit(format!(
            "observed {} landmarks, basis tracks {}",
            observed.len(),
            basis.n_landmarks()
        )));
    }
    if !observed.is_finite() {
        return Err(Error::Fit("observed landmarks contain non-finite values".into()));
    }
    let (ds, de) = (basis.geo_dim(), basis.exp_dim());
    let n = ds + de + 6;
    let mut cur = pack(init);
    let mut params = unpack(&cur, ds, de);
    let mut cost = fit_cost(basis, &params, observed, opts.w_reg);
    if !cost.is_finite() {
        return Err(Error::Fit("initial cost is non-finite".into()));
    }
    let mut report = FitReport { costs: vec![cost], converged: false };
    let mut lambda = 1e-3;
    const MAX_LAMBDA: f64 = 1e7;

    for _ in 0..opts.max_iters {
        let (pred, jac) = landmark_jacobian(basis, &params);
        // Normal equations with regularization folded in analytically:
        // JᵀJ + w·D and Jᵀr + w·θ, where D selects coefficient columns.
        let mut jtj = vec![0.0f64; n * n];
        let mut jtr = vec![0.0f64; n];
        for row in 0..jac.rows {
            let li = row / 2;
            let axis = row % 2;
            let r = pred.points[li][axis] - observed.points[li][axis];
            let jrow = &jac.data[row * n..(row + 1) * n];
            for i in 0..n {
                jtr[i] += jrow[i] * r;
                for j in i..n {
                    jtj[i * n + j] += jrow[i] * jrow[j];
                }
            }
        }
        for i in 0..ds + de {
            jtj[i * n + i] += opts.w_reg;
            jtr[i] += opts.w_reg * cur[i];
        }
        for i in 0..n {
            for j in 0..i {
                jtj[i * n + j] = jtj[j * n + i];
            }
        }

        // Try increasing damping until a step both solves and improves.
        let mut stepped = false;
        let mut solved_any = false;
        while lambda <= MAX_LAMBDA {
            let mut a = jtj.clone();
            for i in 0..n {
                a[i * n + i] += lambda;
            }
            let mut delta: Vec<f64> = jtr.iter().map(|v| -v).collect();
            if cholesky_solve(&mut a, &mut delta, n).is_none() {
                lambda *= 10.0;
                continue;
            }
            solved_any = true;
            let cand: Vec<f64> = cur.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let cand_params = unpack(&cand, ds, de);
            if cand_params.pose.scale > 0.0 {
                let cand_cost = fit_cost(basis, &cand_params, observed, opts.w_reg);
                if cand_cost.is_finite() && cand_cost < cost {
                    cur = cand;
                    params = cand_params;
                    let drop = cost - cand_cost;
                    cost = cand_cost;
                    report.costs.push(cost);
                    lambda = (lambda * 0.5).max(1e-12);
                    stepped = true;
                    if drop < 1e-12 * (1.0 + cost) {
                        report.converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !stepped {
            if !solved_any {
                return Err(Error::Fit(format!(
                    "normal equations unsolvable up to damping {MAX_LAMBDA:.1e}, cost {cost:.3e}"
                )));
            }
            // Damping exhausted without improvement: a (possibly exact)
            // local minimum.
            report.converged = true;
            break;
        }
        if report.converged {
            break;
        }
    }
    Ok((params, report))
}

/// Pose guess from observed landmarks alone: match the bounding-box size
/// and centroid of the neutral mesh's landmarks, no rotation.
pub fn init_from_landmarks(observed: &LandmarkSet, basis: &FaceBasis) -> FaceParams {
    let mut params = FaceParams::neutral(basis);
    let neutral = landmarks_for(basis, &params);
    let span = |set: &LandmarkSet| {
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for p in &set.points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        ((hi[0] - lo[0]).hypot(hi[1] - lo[1]), [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0])
    };
    let (obs_diag, obs_c) = span(observed);
    let (neu_diag, neu_c) = span(&neutral);
    let scale = if neu_diag > 1e-9 && obs_diag > 1e-9 { obs_diag / neu_diag } else { 1.0 };
    params.pose.scale = scale;
    params.pose.t = [obs_c[0] - scale * neu_c[0], obs_c[1] - scale * neu_c[1]];
    params
}

// ── landmark file format ────────────────────────────────────────────────

/// One frame per line: 2L whitespace-separated floats (x₀ y₀ x₁ y₁ …).
pub fn write_landmarks(path: &Path, frames: &[LandmarkSet]) -> Result<()> {
    let mut out = String::new();
    for f in frames {
        let mut first = true;
        for p in &f.points {
            if !first {
                out.push(' ');
            }
            out.push_str(&format!("{} {}", p[0], p[1]));
            first = false;
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_landmarks(path: &Path) -> Result<Vec<LandmarkSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::Invalid(format!(
                        "{}: line {}: bad float {tok:?}",
                        path.display(),
                        ln + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if !vals.len().is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "{}: line {}: odd coordinate count {}",
                path.display(),
                ln + 1,
                vals.len()
            )));
        }
        frames.push(LandmarkSet {
            points: vals.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    /// Small random basis with the required invariants.
    fn test_basis(rng: &mut Rng64) -> FaceBasis {
        let v = 12;
        let (ds, de) = (4, 3);
        let mean: Vec<f32> = (0..3 * v).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let mut make = |d: usize| {
            let mut m = vec![0.0f32; 3 * v * d];
            for j in 0..d {
                let col: Vec<f64> = (0..3 * v).map(|_| rng.normal()).collect();
                let n: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                for r in 0..3 * v {
                    m[r * d + j] = (col[r] / n) as f32;
                }
            }
            m
        };
        let geometry_basis = make(ds);
        let expression_basis = make(de);
        FaceBasis {
            mean_shape: mean,
            geometry_basis,
            expression_basis,
            geometry_sigma: vec![0.5, 0.4, 0.3, 0.2],
            expression_sigma: vec![0.3, 0.2, 0.1],
            landmark_indices: vec![0, 2, 4, 6, 8, 10],
            landmark_kinds: vec![
                LandmarkKind::Mouth,
                LandmarkKind::Mouth,
                LandmarkKind::Jaw,
                LandmarkKind::Jaw,
                LandmarkKind::Eye,
                LandmarkKind::Nose,
            ],
        }
    }

    #[test]
    fn zero_coefficients_reproduce_mean() {
        let mut rng = Rng64::new(1);
        let b = test_basis(&mut rng);
        b.validate().unwrap();
        let mesh = reconstruct_mesh(&b, &[0.0; 4], &[0.0; 3]);
        for (m, want) in mesh.iter().zip(&b.mean_shape) {
            assert!((m - *want as f64).abs() < 1e-7);
        }
    }

    #[test]
    fn expression_displacement_is_linear() {
        let mut rng = Rng64::new(2);
        let b = test_basis(&mut rng);
        let e1 = [0.5f64, -0.3, 0.8];
        let e2 = [1.0f64, -0.6, 1.6];
        let base = reconstruct_mesh(&b, &[0.0; 4], &[0.0; 3]);
        let m1 = reconstruct_mesh(&b, &[0.0; 4], &e1);
        let m2 = reconstruct_mesh(&b, &[0.0; 4], &e2);
        for i in 0..base.len() {
            let d1 = m1[i] - base[i];
            let d2 = m2[i] - base[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-6, "row {i}: {d2} vs 2×{d1}");
        }
    }

    #[test]
    fn reconstruction_matches_naive_accumulation() {
        let mut rng = Rng64::new(3);
        let b = test_basis(&mut rng);
        let s: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let e: Vec<f64> = (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let got = reconstruct_mesh(&b, &s, &e);
        // Independent column-by-column accumulation.
        let mut want: Vec<f64> = b.mean_shape.iter().map(|v| *v as f64).collect();
        for j in 0..4 {
            for r in 0..want.len() {
                want[r] += b.geometry_basis[r * 4 + j] as f64
                    * s[j]
                    * b.geometry_sigma[j] as f64;
            }
        }
        for j in 0..3 {
            for r in 0..want.len() {
                want[r] += b.expression_basis[r * 3 + j] as f64
                    * e[j]
                    * b.expression_sigma[j] as f64;
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn identity_pose_projects_xy() {
        let mut rng = Rng64::new(4);
        let b = test_basis(&mut rng);
        let mesh = reconstruct_mesh(&b, &[0.0; 4], &[0.0; 3]);
        let l = project_landmarks(&b, &mesh, &Pose::identity());
        for (p, &vi) in l.points.iter().zip(&b.landmark_indices) {
            assert!((p[0] - mesh[3 * vi]).abs() < 1e-9);
            assert!((p[1] - mesh[3 * vi + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_shifts_everything() {
        let mut rng = Rng64::new(5);
        let b = test_basis(&mut rng);
        let mesh = reconstruct_mesh(&b, &[0.0; 4], &[0.0; 3]);
        let base = project_landmarks(&b, &mesh, &Pose::identity());
        let moved = project_landmarks(
            &b,
            &mesh,
            &Pose { rot: [0.0; 3], t: [3.5, -2.0], scale: 1.0 },
        );
        for (a, c) in base.points.iter().zip(&moved.points) {
            assert!((c[0] - a[0] - 3.5).abs() < 1e-9);
            assert!((c[1] - a[1] + 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn z_rotation_by_pi_negates_xy() {
        let mut rng = Rng64::new(6);
        let b = test_basis(&mut rng);
        let mesh = reconstruct_mesh(&b, &[0.0; 4], &[0.0; 3]);
        let flipped = project_landmarks(
            &b,
            &mesh,
            &Pose { rot: [0.0, 0.0, std::f64::consts::PI], t: [0.0; 2], scale: 1.0 },
        );
        for (p, &vi) in flipped.points.iter().zip(&b.landmark_indices) {
            assert!((p[0] + mesh[3 * vi]).abs() < 1e-9);
            assert!((p[1] + mesh[3 * vi + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn scaling_pose_scales_centered_landmarks() {
        let mut rng = Rng64::new(7);
        let b = test_basis(&mut rng);
        let mesh = reconstruct_mesh(&b, &[0.0; 4], &[0.0; 3]);
        let pose1 = Pose { rot: [0.2, -0.1, 0.3], t: [5.0, 6.0], scale: 1.0 };
        let pose2 = Pose { scale: 2.5, ..pose1 };
        let l1 = project_landmarks(&b, &mesh, &pose1);
        let l2 = project_landmarks(&b, &mesh, &pose2);
        for (a, c) in l1.points.iter().zip(&l2.points) {
            assert!(((c[0] - 5.0) - 2.5 * (a[0] - 5.0)).abs() < 1e-9);
            assert!(((c[1] - 6.0) - 2.5 * (a[1] - 6.0)).abs() < 1e-9);
        }
    }

    fn random_params(rng: &mut Rng64, b: &FaceBasis, rot_range: f64) -> FaceParams {
        FaceParams {
            s: (0..b.geo_dim()).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            e: (0..b.exp_dim()).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            pose: Pose {
                rot: [
                    rng.uniform(-rot_range, rot_range),
                    rng.uniform(-rot_range, rot_range),
                    rng.uniform(-rot_range, rot_range),
                ],
                t: [rng.uniform(40.0, 90.0), rng.uniform(40.0, 90.0)],
                scale: rng.uniform(20.0, 40.0),
            },
        }
    }

    #[test]
    fn jacobian_translation_and_e_columns() {
        let mut rng = Rng64::new(8);
        let b = test_basis(&mut rng);
        let p = random_params(&mut rng, &b, 0.8);
        let (_, j) = landmark_jacobian(&b, &p);
        let (ds, de) = (b.geo_dim(), b.exp_dim());
        for i in 0..b.n_landmarks() {
            assert_eq!(j.at(2 * i, ds + de + 3), 1.0);
            assert_eq!(j.at(2 * i, ds + de + 4), 0.0);
            assert_eq!(j.at(2 * i + 1, ds + de + 3), 0.0);
            assert_eq!(j.at(2 * i + 1, ds + de + 4), 1.0);
        }
        // ∂l/∂e must not depend on e.
        let mut p2 = p.clone();
        p2.e = vec![1.5, -0.7, 0.2];
        let (_, j2) = landmark_jacobian(&b, &p2);
        for r in 0..j.rows {
            for c in ds..ds + de {
                assert!((j.at(r, c) - j2.at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = Rng64::new(9);
        let b = test_basis(&mut rng);
        let p = random_params(&mut rng, &b, 0.9);
        let (_, jac) = landmark_jacobian(&b, &p);
        let x0 = pack(&p);
        let n = x0.len();
        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for c in 0..n {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[c] += h;
            xm[c] -= h;
            let lp = landmarks_for(&b, &unpack(&xp, 4, 3));
            let lm = landmarks_for(&b, &unpack(&xm, 4, 3));
            for i in 0..b.n_landmarks() {
                for a in 0..2 {
                    let fd = (lp.points[i][a] - lm.points[i][a]) / (2.0 * h);
                    let an = jac.at(2 * i + a, c);
                    let rel = (an - fd).abs() / fd.abs().max(1.0);
                    max_rel = max_rel.max(rel);
                }
            }
        }
        assert!(max_rel < 1e-4, "jacobian rel err {max_rel}");
    }

    #[test]
    fn fit_from_truth_converges_immediately() {
        let mut rng = Rng64::new(10);
        let b = test_basis(&mut rng);
        let truth = random_params(&mut rng, &b, 0.6);
        let observed = landmarks_for(&b, &truth);
        // Unregularized objective so the generating parameters are an
        // exact fixed point.
        let opts = FitOptions { w_reg: 0.0, ..FitOptions::default() };
        let (fitted, report) = fit_params(&observed, &b, &truth, &opts).unwrap();
        assert!(report.converged);
        assert!(report.costs.len() <= 3, "took {} steps", report.costs.len() - 1);
        let refit = landmarks_for(&b, &fitted);
        for (p, o) in refit.points.iter().zip(&observed.points) {
            assert!((p[0] - o[0]).abs() < 1e-6 && (p[1] - o[1]).abs() < 1e-6);
        }
    }

    fn rmse(a: &LandmarkSet, b: &LandmarkSet) -> f64 {
        let mut acc = 0.0;
        for (p, q) in a.points.iter().zip(&b.points) {
            acc += (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        }
        (acc / a.len() as f64).sqrt()
    }

    #[test]
    fn fit_recovers_random_targets_from_cold_start() {
        let mut rng = Rng64::new(11);
        let b = test_basis(&mut rng);
        for trial in 0..10 {
            let truth = random_params(&mut rng, &b, 1.0);
            let observed = landmarks_for(&b, &truth);
            let init = init_from_landmarks(&observed, &b);
            let (fitted, report) =
                fit_params(&observed, &b, &init, &FitOptions::default()).unwrap();
            let refit = landmarks_for(&b, &fitted);
            let err = rmse(&refit, &observed);
            assert!(err < 0.1, "trial {trial}: reprojection RMSE {err}");
            for w in report.costs.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "cost increased: {w:?}");
            }
        }
    }

    #[test]
    fn fit_tolerates_half_pixel_noise() {
        let mut rng = Rng64::new(12);
        let b = test_basis(&mut rng);
        let truth = random_params(&mut rng, &b, 0.8);
        let clean = landmarks_for(&b, &truth);
        let noisy = LandmarkSet {
            points: clean
                .points
                .iter()
                .map(|p| [p[0] + 0.5 * rng.normal(), p[1] + 0.5 * rng.normal()])
                .collect(),
        };
        let init = init_from_landmarks(&noisy, &b);
        let (fitted, _) = fit_params(&noisy, &b, &init, &FitOptions::default()).unwrap();
        let refit = landmarks_for(&b, &fitted);
        assert!(rmse(&refit, &noisy) <= 1.0);
    }

    #[test]
    fn non_finite_observation_is_an_error() {
        let mut rng = Rng64::new(13);
        let b = test_basis(&mut rng);
        let mut obs = landmarks_for(&b, &FaceParams::neutral(&b));
        obs.points[0][0] = f64::NAN;
        let init = FaceParams::neutral(&b);
        assert!(fit_params(&obs, &b, &init, &FitOptions::default()).is_err());
    }

    #[test]
    fn mouth_affine_reproduces_projection() {
        let mut rng = Rng64::new(14);
        let b = test_basis(&mut rng);
        let p = random_params(&mut rng, &b, 0.7);
        let (a, off) = mouth_affine(&b, &p.s, &p.pose);
        let full = landmarks_for(&b, &p);
        let mouth = b.mouth_positions();
        for (row, &pos) in mouth.iter().enumerate() {
            for axis in 0..2 {
                let mut v = off[2 * row + axis];
                for j in 0..b.exp_dim() {
                    v += a.at(2 * row + axis, j) * p.e[j] as f64;
                }
                let want = full.points[pos][axis];
                assert!((v - want).abs() < 1e-9, "affine {v} vs direct {want}");
            }
        }
    }

    #[test]
    fn landmark_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lms.txt");
        let frames = vec![
            LandmarkSet { points: vec![[1.25, -3.5], [0.0, 42.0]] },
            LandmarkSet { points: vec![[7.125, 8.0], [-0.0625, 11.5]] },
        ];
        write_landmarks(&path, &frames).unwrap();
        let back = read_landmarks(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, c) in frames.iter().zip(&back) {
            for (p, q) in a.points.iter().zip(&c.points) {
                assert_eq!(p, q);
            }
        }
    }

    #[test]
    fn validate_rejects_bad_invariants() {
        let mut rng = Rng64::new(15);
        let mut b = test_basis(&mut rng);
        b.geometry_sigma = vec![0.1, 0.4, 0.3, 0.2];
        assert!(b.validate().is_err(), "increasing sigmas must fail");
        let mut b2 = test_basis(&mut rng);
        b2.landmark_indices[0] = 999;
        assert!(b2.validate().is_err(), "out-of-range index must fail");
        let mut b3 = test_basis(&mut rng);
        for k in &mut b3.landmark_kinds {
            *k = LandmarkKind::Eye;
        }
        assert!(b3.validate().is_err(), "empty mouth subset must fail");
    }
}
