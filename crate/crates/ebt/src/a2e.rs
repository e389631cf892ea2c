//! Audio-to-expression translation: an LSTM+FC network mapping a 1 s
//! (identity-removed) MFCC window to expression coefficients, trained with
//! an expression loss plus a projected mouth-landmark constraint.
//!
//! The landmark constraint runs through the face model's mouth affine map
//! (expression -> projected mouth landmarks at fixed geometry and pose),
//! which is loaded onto the tape as constants, so both the prediction and
//! the ground-truth landmarks take the same numeric path and the loss is
//! exactly zero at a perfect prediction.

use crate::audio::{compute_mfcc, sliding_window, video_frame_to_mfcc_row, MfccConfig, WINDOW_ROWS};
use crate::face::{landmarks_for, mouth_affine, FaceBasis, FaceParams, Pose};
use crate::idrm::{
    apply_window, bind_classifier_frozen, bind_id_removal, confusion_loss, infer_lambda,
    IdRemovalModel, SpeakerClassifier,
};
use crate::rng::Rng64;
use crate::synth::{resolve_pose, Utterance};
use crate::tensor::{
    bind_linear, bind_lstm, init_linear, init_lstm, linear, lstm_sequence, row_leaves, Adam,
    LinearVars, LstmVars, ParamStore, Tape, Tensor, Var,
};
use crate::{Error, Result};

pub const DEFAULT_A2E_HIDDEN: usize = 64;

/// Shapes of the translation network; weights live under "a2e/lstm/*",
/// "a2e/fc/*".
#[derive(Clone, Copy, Debug)]
pub struct A2EModel {
    /// MFCC dimension C.
    pub c: usize,
    /// Expression dimension of the face basis.
    pub de: usize,
    pub hidden: usize,
}

impl A2EModel {
    pub fn init(store: &mut ParamStore, rng: &mut Rng64, c: usize, de: usize, hidden: usize) -> Self {
        init_lstm(store, rng, "a2e/lstm", hidden, c);
        init_linear(store, rng, "a2e/fc", de, hidden);
        A2EModel { c, de, hidden }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let w = store.require("a2e/lstm/w")?;
        let hidden = w.shape()[0] / 4;
        let c = w.shape()[1] - hidden;
        let de = store.require("a2e/fc/w")?.shape()[0];
        Ok(A2EModel { c, de, hidden })
    }
}

pub struct A2EVars {
    pub lstm: LstmVars,
    pub fc: LinearVars,
}

pub fn bind_a2e(tape: &mut Tape, store: &ParamStore, m: &A2EModel) -> Result<A2EVars> {
    Ok(A2EVars {
        lstm: bind_lstm(tape, store, "a2e/lstm", m.hidden)?,
        fc: bind_linear(tape, store, "a2e/fc")?,
    })
}

/// Expression prediction from the final LSTM hidden state.
pub fn predict_expression(tape: &mut Tape, vars: &A2EVars, frames: &[Var]) -> Var {
    assert!(!frames.is_empty(), "predict_expression: empty window");
    let hs = lstm_sequence(tape, &vars.lstm, frames);
    linear(tape, &vars.fc, *hs.last().unwrap())
}

/// Off-tape convenience: predict from a raw (W x C) window tensor.
pub fn predict_expression_tensor(store: &ParamStore, m: &A2EModel, window: &Tensor) -> Result<Vec<f64>> {
    if window.shape().len() != 2 || window.shape()[1] != m.c {
        return Err(Error::Invalid(format!(
            "window shape {:?} does not match MFCC dim {}",
            window.shape(),
            m.c
        )));
    }
    let mut tape = Tape::new();
    let vars = bind_a2e(&mut tape, store, m)?;
    let frames = row_leaves(&mut tape, window);
    let e = predict_expression(&mut tape, &vars, &frames);
    Ok(tape.value(e).data().iter().map(|&x| x as f64).collect())
}

/// The fixed affine map from expression to flattened projected mouth
/// landmarks at the sample's geometry and pose, loaded as tape constants.
pub struct MouthMap {
    pub a: Var,
    pub b: Var,
    /// 2 * number of mouth landmarks.
    pub out_dim: usize,
}

pub fn bind_mouth_map(tape: &mut Tape, basis: &FaceBasis, s_gt: &[f64], pose: &Pose) -> MouthMap {
    let (a, b) = mouth_affine(basis, s_gt, pose);
    let a32: Vec<f32> = a.data.iter().map(|&x| x as f32).collect();
    let b32: Vec<f32> = b.iter().map(|&x| x as f32).collect();
    let out_dim = b.len();
    MouthMap {
        a: tape.leaf(Tensor::new(vec![a.rows, a.cols], a32)),
        b: tape.leaf(Tensor::from_slice(&[out_dim], &b32)),
        out_dim,
    }
}

/// l = A·e + b: projected mouth landmarks (flattened x,y pairs) for an
/// expression vector on the tape. Affine in e; everything else is frozen.
pub fn shape_landmarks(tape: &mut Tape, map: &MouthMap, e: Var) -> Var {
    let ax = tape.matmul(map.a, e);
    tape.add(ax, map.b)
}

/// L_trans = ‖ê − e_gt‖₂ + ‖l̂ − l_gt‖₂, both norms unsquared.
pub fn trans_loss(tape: &mut Tape, e_hat: Var, l_hat: Var, e_gt: Var, l_gt: Var) -> Var {
    let de = tape.sub(e_hat, e_gt);
    let dl = tape.sub(l_hat, l_gt);
    let ne = tape.l2(de);
    let nl = tape.l2(dl);
    tape.add(ne, nl)
}

/// One supervised example: an MFCC window paired with the frame's ground
/// truth parameters and projected mouth landmarks.
#[derive(Clone)]
pub struct TrainingSample {
    pub window: Tensor,
    pub e_gt: Vec<f64>,
    pub s_gt: Vec<f64>,
    pub p_gt: Pose,
    /// Mouth landmarks from the exact f64 projection (evaluation metric
    /// reference; the training loss re-derives its target on tape).
    pub l_gt: Vec<[f64; 2]>,
}

/// Check the sample's landmark consistency invariant.
pub fn validate_sample(basis: &FaceBasis, sample: &TrainingSample) -> Result<()> {
    if sample.e_gt.len() != basis.exp_dim() || sample.s_gt.len() != basis.geo_dim() {
        return Err(Error::Invalid("sample dims do not match basis".into()));
    }
    let params = FaceParams {
        s: sample.s_gt.clone(),
        e: sample.e_gt.clone(),
        pose: sample.p_gt,
    };
    let lm = landmarks_for(basis, &params);
    let mouth = basis.mouth_positions();
    if sample.l_gt.len() != mouth.len() {
        return Err(Error::Invalid("sample mouth landmark count mismatch".into()));
    }
    for (got, &pos) in sample.l_gt.iter().zip(&mouth) {
        let want = lm.points[pos];
        if (got[0] - want[0]).abs() > 1e-9 || (got[1] - want[1]).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "sample landmark {got:?} does not reproject to {want:?}"
            )));
        }
    }
    Ok(())
}

/// Build consistent training samples for every video frame of an
/// utterance rendered at w x h.
pub fn samples_from_utterance(
    basis: &FaceBasis,
    utt: &Utterance,
    w: usize,
    h: usize,
    cfg: &MfccConfig,
) -> Result<Vec<TrainingSample>> {
    let mfcc = compute_mfcc(&utt.clip, cfg)?;
    let mouth = basis.mouth_positions();
    let mut out = Vec::with_capacity(utt.n_frames());
    for f in 0..utt.n_frames() {
        let pose = resolve_pose(&utt.pose_track[f], w, h);
        let params = FaceParams {
            s: utt.geometry.clone(),
            e: utt.expression_track[f].clone(),
            pose,
        };
        let lm = landmarks_for(basis, &params);
        out.push(TrainingSample {
            window: sliding_window(&mfcc, video_frame_to_mfcc_row(f, utt.fps)),
            e_gt: utt.expression_track[f].clone(),
            s_gt: utt.geometry.clone(),
            p_gt: pose,
            l_gt: mouth.iter().map(|&i| lm.points[i]).collect(),
        });
    }
    Ok(out)
}

/// Joint-objective weights (w1 scales the confusion term, w2 the
/// translation term).
#[derive(Clone, Copy, Debug)]
pub struct JointWeights {
    pub w_norm: f64,
    pub w_trans: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        JointWeights { w_norm: 1.0, w_trans: 1.0 }
    }
}

/// Per-epoch mean loss terms.
#[derive(Clone, Copy, Debug)]
pub struct JointLosses {
    pub norm: f64,
    pub trans: f64,
}

fn mean_of(tape: &mut Tape, losses: &[Var]) -> Var {
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l);
    }
    tape.scale_const(acc, 1.0 / losses.len() as f32)
}

/// Train the translation network, optionally jointly with identity
/// removal against a frozen classifier. Windows in `samples` must be raw
/// MFCC when `id_model` is given (the transform runs inside the graph).
/// Returns per-epoch mean (norm, trans) terms.
#[allow(clippy::too_many_arguments)]
pub fn train_joint(
    store: &mut ParamStore,
    id_model: Option<&IdRemovalModel>,
    a2e: &A2EModel,
    classifier: &SpeakerClassifier,
    basis: &FaceBasis,
    samples: &[TrainingSample],
    weights: JointWeights,
    epochs: usize,
    batch: usize,
    lr: f32,
    seed: u64,
) -> Result<Vec<JointLosses>> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to train on".into()));
    }
    let use_norm = weights.w_norm > 0.0 && id_model.is_some();
    let mut adam = Adam::new(lr);
    let mut rng = Rng64::derive(seed, "a2e-train");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let (mut norm_sum, mut trans_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
        for chunk in order.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let avars = bind_a2e(&mut tape, store, a2e)?;
            let ivars = match id_model {
                Some(m) => Some(bind_id_removal(&mut tape, store, m)?),
                None => None,
            };
            let cvars = if use_norm {
                Some(bind_classifier_frozen(&mut tape, store, classifier)?)
            } else {
                None
            };
            let mut norm_losses = Vec::new();
            let mut trans_losses = Vec::new();
            for &i in chunk {
                let sample = &samples[i];
                let raw = row_leaves(&mut tape, &sample.window);
                let frames = match &ivars {
                    Some(iv) => {
                        let lambda = infer_lambda(&mut tape, iv, &raw);
                        apply_window(&mut tape, iv, lambda, &raw)
                    }
                    None => raw,
                };
                if let Some(cv) = &cvars {
                    norm_losses.push(confusion_loss(
                        &mut tape,
                        cv,
                        classifier.n_speakers,
                        &frames,
                    ));
                }
                let e_hat = predict_expression(&mut tape, &avars, &frames);
                let map = bind_mouth_map(&mut tape, basis, &sample.s_gt, &sample.p_gt);
                let l_hat = shape_landmarks(&mut tape, &map, e_hat);
                let e32: Vec<f32> = sample.e_gt.iter().map(|&x| x as f32).collect();
                let e_gt = tape.leaf(Tensor::from_slice(&[a2e.de], &e32));
                let l_gt = shape_landmarks(&mut tape, &map, e_gt);
                trans_losses.push(trans_loss(&mut tape, e_hat, l_hat, e_gt, l_gt));
            }
            let trans_mean = mean_of(&mut tape, &trans_losses);
            let (loss, norm_val) = if norm_losses.is_empty() {
                (tape.scale_const(trans_mean, weights.w_trans as f32), 0.0)
            } else {
                let norm_mean = mean_of(&mut tape, &norm_losses);
                let wn = tape.scale_const(norm_mean, weights.w_norm as f32);
                let wt = tape.scale_const(trans_mean, weights.w_trans as f32);
                (tape.add(wn, wt), tape.value(norm_mean).item() as f64)
            };
            let trans_val = tape.value(trans_mean).item() as f64;
            if !tape.value(loss).is_finite() {
                return Err(Error::Numeric("joint loss is not finite".into()));
            }
            let grads = tape.backward(loss);
            let gm = tape.param_grads(&grads);
            adam.step(store, &gm)?;
            norm_sum += norm_val * chunk.len() as f64;
            trans_sum += trans_val * chunk.len() as f64;
            seen += chunk.len();
        }
        history.push(JointLosses {
            norm: norm_sum / seen as f64,
            trans: trans_sum / seen as f64,
        });
    }
    Ok(history)
}

/// Held-out evaluation: mean per-component expression error and mean
/// mouth-landmark distance of the model's predictions. The window is
/// identity-removed first when `id_model` is given.
pub fn evaluate(
    store: &ParamStore,
    id_model: Option<&IdRemovalModel>,
    a2e: &A2EModel,
    basis: &FaceBasis,
    samples: &[TrainingSample],
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let mouth = basis.mouth_positions();
    let (mut e_err, mut l_err) = (0.0f64, 0.0f64);
    for sample in samples {
        let window = match id_model {
            Some(m) => crate::idrm::transform_window(store, m, &sample.window)?,
            None => sample.window.clone(),
        };
        let e_hat = predict_expression_tensor(store, a2e, &window)?;
        e_err += crate::metrics::e_exp(&e_hat, &sample.e_gt)?;
        let params = FaceParams {
            s: sample.s_gt.clone(),
            e: e_hat,
            pose: sample.p_gt,
        };
        let lm = landmarks_for(basis, &params);
        let l_hat: Vec<[f64; 2]> = mouth.iter().map(|&i| lm.points[i]).collect();
        l_err += crate::metrics::e_ldmk(&l_hat, &sample.l_gt)?;
    }
    let n = samples.len() as f64;
    Ok((e_err / n, l_err / n))
}

/// Windows in training samples must span exactly the 1 s context.
pub fn check_window_rows(samples: &[TrainingSample]) -> Result<()> {
    for s in samples {
        if s.window.shape()[0] != WINDOW_ROWS {
            return Err(Error::Invalid(format!(
                "sample window has {} rows, want {WINDOW_ROWS}",
                s.window.shape()[0]
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_face_basis, gen_utterance, phoneme_inventory, speaker_geometry, speaker_profiles};
    use crate::tensor::gradcheck::{fd_gradient, rel_error};

    fn small_basis() -> FaceBasis {
        gen_face_basis(11, 80, 6, 5, 20).unwrap().0
    }

    fn setup_models(basis: &FaceBasis, seed: u64) -> (ParamStore, A2EModel, SpeakerClassifier) {
        let mut store = ParamStore::new();
        let mut rng = Rng64::new(seed);
        let a2e = A2EModel::init(&mut store, &mut rng, 13, basis.exp_dim(), 16);
        let clf = SpeakerClassifier::init(&mut store, &mut rng, 3, 13, 8);
        (store, a2e, clf)
    }

    fn corpus(basis: &FaceBasis, n_speakers: usize, seed: u64) -> Vec<TrainingSample> {
        let inv = phoneme_inventory(basis.exp_dim(), seed);
        let profiles = speaker_profiles(n_speakers, seed);
        let cfg = MfccConfig::default();
        let mut rng = Rng64::derive(seed, "a2e-test-corpus");
        let mut out = Vec::new();
        for prof in &profiles {
            let s = speaker_geometry(basis.geo_dim(), prof.id, seed);
            let phon = crate::synth::random_phonemes(6, &mut rng);
            let utt = gen_utterance(&inv, prof, &s, &phon, 25.0, 16000, seed ^ (prof.id as u64) << 3)
                .unwrap();
            out.extend(samples_from_utterance(basis, &utt, 96, 96, &cfg).unwrap());
        }
        out
    }

    #[test]
    fn untrained_prediction_is_finite_and_deterministic() {
        let basis = small_basis();
        let (store, a2e, _) = setup_models(&basis, 3);
        let mut rng = Rng64::new(5);
        let win = Tensor::new(
            vec![20, 13],
            (0..20 * 13).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        );
        let a = predict_expression_tensor(&store, &a2e, &win).unwrap();
        let b = predict_expression_tensor(&store, &a2e, &win).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm.is_finite() && norm < 10.0);
    }

    #[test]
    fn wrong_window_width_rejected() {
        let basis = small_basis();
        let (store, a2e, _) = setup_models(&basis, 3);
        let win = Tensor::zeros(vec![20, 7]);
        assert!(predict_expression_tensor(&store, &a2e, &win).is_err());
    }

    #[test]
    fn perfect_prediction_gives_exactly_zero_loss() {
        let basis = small_basis();
        let s = speaker_geometry(basis.geo_dim(), 0, 9);
        let pose = Pose { rot: [0.2, -0.3, 0.1], t: [48.0, 50.0], scale: 20.0 };
        let e_gt: Vec<f32> = (0..basis.exp_dim()).map(|j| 0.3 * (j as f32 + 1.0)).collect();

        let mut tape = Tape::new();
        let map = bind_mouth_map(&mut tape, &basis, &s, &pose);
        let e_hat = tape.leaf(Tensor::from_slice(&[basis.exp_dim()], &e_gt));
        let e_ref = tape.leaf(Tensor::from_slice(&[basis.exp_dim()], &e_gt));
        let l_hat = shape_landmarks(&mut tape, &map, e_hat);
        let l_gt = shape_landmarks(&mut tape, &map, e_ref);
        let loss = trans_loss(&mut tape, e_hat, l_hat, e_ref, l_gt);
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn shape_landmarks_is_affine_and_matches_jacobian() {
        let basis = small_basis();
        let s = speaker_geometry(basis.geo_dim(), 1, 9);
        let pose = Pose { rot: [-0.4, 0.2, 0.3], t: [40.0, 44.0], scale: 18.0 };
        let de = basis.exp_dim();

        let run = |e: &[f32]| -> Vec<f32> {
            let mut tape = Tape::new();
            let map = bind_mouth_map(&mut tape, &basis, &s, &pose);
            let ev = tape.leaf(Tensor::from_slice(&[de], e));
            let l = shape_landmarks(&mut tape, &map, ev);
            tape.value(l).data().to_vec()
        };
        let e1: Vec<f32> = (0..de).map(|j| 0.1 * j as f32).collect();
        let e2: Vec<f32> = (0..de).map(|j| -0.2 * j as f32 + 0.4).collect();
        let e3: Vec<f32> = e1.iter().zip(&e2).map(|(a, b)| a + b).collect();
        let zero = vec![0.0f32; de];
        let (l1, l2, l3, l0) = (run(&e1), run(&e2), run(&e3), run(&zero));
        // Affine: l(e1) + l(e2) - l(0) = l(e1 + e2).
        for i in 0..l1.len() {
            let lhs = l1[i] + l2[i] - l0[i];
            assert!((lhs - l3[i]).abs() < 1e-3, "affine violation at {i}");
        }

        // The difference map equals the e-block of the landmark Jacobian
        // restricted to mouth rows (constant in e).
        let params = FaceParams { s: s.clone(), e: vec![0.0; de], pose };
        let (_, jac) = crate::face::landmark_jacobian(&basis, &params);
        let mouth = basis.mouth_positions();
        let ds = basis.geo_dim();
        for (mi, &pos) in mouth.iter().enumerate() {
            for j in 0..de {
                // Jacobian columns: s block, then e block.
                let jx = jac.data[(2 * pos) * jac.cols + ds + j];
                let jy = jac.data[(2 * pos + 1) * jac.cols + ds + j];
                let mut ej = vec![0.0f32; de];
                ej[j] = 1.0;
                let le = run(&ej);
                assert!((le[2 * mi] as f64 - l0[2 * mi] as f64 - jx).abs() < 1e-3);
                assert!((le[2 * mi + 1] as f64 - l0[2 * mi + 1] as f64 - jy).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn squared_landmark_gradient_matches_finite_differences() {
        let basis = small_basis();
        let s = speaker_geometry(basis.geo_dim(), 2, 9);
        let pose = Pose { rot: [0.1, 0.5, -0.2], t: [50.0, 46.0], scale: 22.0 };
        let de = basis.exp_dim();
        let e_gt: Vec<f32> = (0..de).map(|j| 0.2 - 0.1 * j as f32).collect();
        let e0: Vec<f32> = (0..de).map(|j| 0.5 * (j as f32 - 1.0)).collect();

        let loss_at = |e: &[f32]| -> (f64, Option<Vec<f32>>) {
            let mut tape = Tape::new();
            let map = bind_mouth_map(&mut tape, &basis, &s, &pose);
            let ev = tape.param_leaf("test/e", Tensor::from_slice(&[de], e));
            let eg = tape.leaf(Tensor::from_slice(&[de], &e_gt));
            let l_hat = shape_landmarks(&mut tape, &map, ev);
            let l_gt = shape_landmarks(&mut tape, &map, eg);
            let d = tape.sub(l_hat, l_gt);
            let n = tape.l2(d);
            // Squared norm: keeps the objective smooth at the optimum.
            let sq = tape.mul(n, n);
            let v = tape.value(sq).item() as f64;
            let grads = tape.backward(sq);
            let gm = tape.param_grads(&grads);
            (v, Some(gm["test/e"].data().to_vec()))
        };
        let (_, g) = loss_at(&e0);
        let fd = fd_gradient(|e: &[f32]| loss_at(e).0, &e0, 1e-2);
        let err = rel_error(&Tensor::from_slice(&[de], &g.unwrap()), &fd);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn unit_expression_offset_matches_jacobian_column_norm() {
        let basis = small_basis();
        let s = speaker_geometry(basis.geo_dim(), 0, 41);
        let pose = Pose { rot: [0.15, -0.25, 0.05], t: [46.0, 52.0], scale: 19.0 };
        let de = basis.exp_dim();
        let e_gt: Vec<f32> = (0..de).map(|j| 0.1 * j as f32 - 0.2).collect();
        let mut e_hat = e_gt.clone();
        e_hat[0] += 1.0;

        let mut tape = Tape::new();
        let map = bind_mouth_map(&mut tape, &basis, &s, &pose);
        let eh = tape.leaf(Tensor::from_slice(&[de], &e_hat));
        let eg = tape.leaf(Tensor::from_slice(&[de], &e_gt));
        let l_hat = shape_landmarks(&mut tape, &map, eh);
        let l_gt = shape_landmarks(&mut tape, &map, eg);
        let loss = trans_loss(&mut tape, eh, l_hat, eg, l_gt) ;
        let got = tape.value(loss).item() as f64;

        // Expression term is exactly 1; the landmark term is the norm of
        // the projected displacement of expression column 0, read off the
        // mouth rows of the full landmark Jacobian.
        let params = FaceParams { s: s.clone(), e: e_gt.iter().map(|&x| x as f64).collect(), pose };
        let (_, jac) = crate::face::landmark_jacobian(&basis, &params);
        let ds = basis.geo_dim();
        let mut col_sq = 0.0f64;
        for &pos in &basis.mouth_positions() {
            let jx = jac.data[(2 * pos) * jac.cols + ds];
            let jy = jac.data[(2 * pos + 1) * jac.cols + ds];
            col_sq += jx * jx + jy * jy;
        }
        let want = 1.0 + col_sq.sqrt();
        assert!(
            (got - want).abs() < 1e-3 * want,
            "trans_loss {got} vs jacobian oracle {want}"
        );
    }

    #[test]
    fn loss_invariant_to_consistent_landmark_permutation() {
        let basis = small_basis();
        let s = speaker_geometry(basis.geo_dim(), 1, 43);
        let pose = Pose { rot: [0.3, 0.1, -0.15], t: [44.0, 48.0], scale: 21.0 };
        let de = basis.exp_dim();
        let e_gt: Vec<f32> = (0..de).map(|j| 0.25 * (j as f32) - 0.3).collect();
        let e_hat: Vec<f32> = (0..de).map(|j| -0.15 * (j as f32) + 0.4).collect();

        let eval_loss = |perm: Option<&[usize]>| -> f64 {
            let mut tape = Tape::new();
            let map = bind_mouth_map(&mut tape, &basis, &s, &pose);
            let eh = tape.leaf(Tensor::from_slice(&[de], &e_hat));
            let eg = tape.leaf(Tensor::from_slice(&[de], &e_gt));
            let l_hat = shape_landmarks(&mut tape, &map, eh);
            let l_gt = shape_landmarks(&mut tape, &map, eg);
            let (lh, lg) = match perm {
                None => (l_hat, l_gt),
                Some(p) => {
                    let reorder = |t: &mut Tape, v: Var| -> Var {
                        let data = t.value(v).data().to_vec();
                        let mut out = Vec::with_capacity(data.len());
                        for &m in p {
                            out.push(data[2 * m]);
                            out.push(data[2 * m + 1]);
                        }
                        t.leaf(Tensor::from_slice(&[out.len()], &out))
                    };
                    let a = reorder(&mut tape, l_hat);
                    let b = reorder(&mut tape, l_gt);
                    (a, b)
                }
            };
            let loss = trans_loss(&mut tape, eh, lh, eg, lg);
            tape.value(loss).item() as f64
        };

        let m = basis.mouth_positions().len();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.reverse();
        perm.swap(0, m / 2);
        let base = eval_loss(None);
        let permuted = eval_loss(Some(&perm));
        assert!((base - permuted).abs() < 1e-6 * base.max(1.0));
    }

    #[test]
    fn zero_norm_weight_ignores_classifier_entirely() {
        let basis = small_basis();
        let samples = corpus(&basis, 2, 47);
        let subset = &samples[..12];
        // Two runs differing only in classifier weights. With the
        // confusion weight at zero the classifier must not influence
        // training at all.
        let mut results = Vec::new();
        for clf_seed in [100u64, 200u64] {
            let mut store = ParamStore::new();
            let mut rng = Rng64::new(7);
            let a2e = A2EModel::init(&mut store, &mut rng, 13, basis.exp_dim(), 12);
            let id = IdRemovalModel::init(&mut store, &mut rng, 2, 13, 8);
            let mut crng = Rng64::new(clf_seed);
            let clf = SpeakerClassifier::init(&mut store, &mut crng, 3, 13, 8);
            let hist = train_joint(
                &mut store,
                Some(&id),
                &a2e,
                &clf,
                &basis,
                subset,
                JointWeights { w_norm: 0.0, w_trans: 1.0 },
                2,
                4,
                1e-3,
                9,
            )
            .unwrap();
            assert!(hist.iter().all(|l| l.norm == 0.0));
            let fc = store.require("a2e/fc/w").unwrap().data().to_vec();
            let comp = store.require("idrm/components/0").unwrap().data().to_vec();
            results.push((
                hist.iter().map(|l| l.trans.to_bits()).collect::<Vec<_>>(),
                fc,
                comp,
            ));
        }
        assert_eq!(results[0], results[1]);
    }

    #[test]
    fn samples_satisfy_consistency_invariant() {
        let basis = small_basis();
        let samples = corpus(&basis, 2, 17);
        assert!(!samples.is_empty());
        check_window_rows(&samples).unwrap();
        for s in &samples {
            validate_sample(&basis, s).unwrap();
        }
    }

    #[test]
    fn same_seed_identical_histories() {
        let basis = small_basis();
        let samples = corpus(&basis, 2, 23);
        let subset = &samples[..16];
        let mut histories = Vec::new();
        for _ in 0..2 {
            let (mut store, a2e, clf) = setup_models(&basis, 7);
            let h = train_joint(
                &mut store,
                None,
                &a2e,
                &clf,
                &basis,
                subset,
                JointWeights::default(),
                2,
                4,
                1e-3,
                77,
            )
            .unwrap();
            histories.push(h.iter().map(|l| (l.norm, l.trans)).collect::<Vec<_>>());
        }
        assert_eq!(histories[0], histories[1]);
    }

    #[test]
    fn supervised_training_reduces_heldout_error() {
        let basis = small_basis();
        // Single speaker, interleaved split: every fifth frame held out.
        let inv = phoneme_inventory(basis.exp_dim(), 29);
        let prof = &speaker_profiles(1, 29)[0];
        let s = speaker_geometry(basis.geo_dim(), 0, 29);
        let mut rng = Rng64::derive(29, "a2e-heldout");
        let phon = crate::synth::random_phonemes(15, &mut rng);
        let utt = gen_utterance(&inv, prof, &s, &phon, 25.0, 16000, 31).unwrap();
        let samples =
            samples_from_utterance(&basis, &utt, 96, 96, &MfccConfig::default()).unwrap();
        let (mut train, mut heldout) = (Vec::new(), Vec::new());
        for (i, smp) in samples.into_iter().enumerate() {
            if i % 5 == 2 {
                heldout.push(smp);
            } else {
                train.push(smp);
            }
        }

        let (mut store, a2e, clf) = setup_models(&basis, 13);
        let (e0, l0) = evaluate(&store, None, &a2e, &basis, &heldout).unwrap();
        train_joint(
            &mut store,
            None,
            &a2e,
            &clf,
            &basis,
            &train,
            JointWeights { w_norm: 0.0, w_trans: 1.0 },
            60,
            8,
            1e-2,
            5,
        )
        .unwrap();
        let (e1, l1) = evaluate(&store, None, &a2e, &basis, &heldout).unwrap();
        assert!(
            e1 < 0.5 * e0,
            "held-out expression error {e1} not below half of untrained {e0}"
        );
        assert!(l1 < 0.5 * l0, "held-out landmark error {l1} not below half of untrained {l0}");
    }
}
