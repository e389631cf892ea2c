//! Audio identity removal: a learned per-window affine transform that maps
//! speaker-specific MFCC onto a shared domain, trained to confuse a frozen
//! speaker classifier.
//!
//! The transform on one MFCC frame x is x' = W·(x; 1) with
//! W = [I | 0] + sum_j lambda_j W_j, so lambda = 0 is the exact identity.
//! lambda comes from an LSTM+FC network run over the whole 1 s window and
//! is shared by every frame in it.

use crate::rng::Rng64;
use crate::tensor::{
    bind_linear, bind_lstm, init_linear, init_lstm, linear, lstm_sequence, mean_pool, row_leaves,
    Adam, LinearVars, LstmVars, ParamStore, Tape, Tensor, Var,
};
use crate::{Error, Result};

pub const DEFAULT_COMPONENTS: usize = 4;
pub const DEFAULT_LAMBDA_HIDDEN: usize = 32;
pub const DEFAULT_CLASSIFIER_HIDDEN: usize = 32;

/// Shapes of the identity-removal network; weights live in a [`ParamStore`]
/// under "idrm/components/{j}", "idrm/lstm/*", "idrm/fc/*".
#[derive(Clone, Copy, Debug)]
pub struct IdRemovalModel {
    /// Component count k.
    pub k: usize,
    /// MFCC dimension C.
    pub c: usize,
    /// lambda-net LSTM hidden size.
    pub hidden: usize,
}

impl IdRemovalModel {
    /// Insert freshly initialized parameters. Components start at
    /// N(0, 0.01) so training begins near the identity transform.
    pub fn init(store: &mut ParamStore, rng: &mut Rng64, k: usize, c: usize, hidden: usize) -> Self {
        for j in 0..k {
            let data: Vec<f32> = (0..c * (c + 1)).map(|_| (0.01 * rng.normal()) as f32).collect();
            store.insert(
                &format!("idrm/components/{j}"),
                Tensor::new(vec![c, c + 1], data),
            );
        }
        init_lstm(store, rng, "idrm/lstm", hidden, c);
        init_linear(store, rng, "idrm/fc", k, hidden);
        IdRemovalModel { k, c, hidden }
    }

    /// Recover shapes from stored parameters.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut k = 0;
        while store.contains(&format!("idrm/components/{k}")) {
            k += 1;
        }
        if k == 0 {
            return Err(Error::Model("no idrm component parameters".into()));
        }
        let c = store.require("idrm/components/0")?.shape()[0];
        let w = store.require("idrm/lstm/w")?;
        Ok(IdRemovalModel {
            k,
            c,
            hidden: w.shape()[0] / 4,
        })
    }
}

/// Tape bindings for the identity-removal parameters.
pub struct IdRemovalVars {
    pub components: Vec<Var>,
    pub lstm: LstmVars,
    pub fc: LinearVars,
}

pub fn bind_id_removal(tape: &mut Tape, store: &ParamStore, m: &IdRemovalModel) -> Result<IdRemovalVars> {
    let components = (0..m.k)
        .map(|j| {
            let name = format!("idrm/components/{j}");
            Ok(tape.param_leaf(&name, store.require(&name)?.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IdRemovalVars {
        components,
        lstm: bind_lstm(tape, store, "idrm/lstm", m.hidden)?,
        fc: bind_linear(tape, store, "idrm/fc")?,
    })
}

/// lambda from the final LSTM hidden state over the window's frames.
pub fn infer_lambda(tape: &mut Tape, vars: &IdRemovalVars, frames: &[Var]) -> Var {
    assert!(!frames.is_empty(), "infer_lambda: empty window");
    let hs = lstm_sequence(tape, &vars.lstm, frames);
    linear(tape, &vars.fc, *hs.last().unwrap())
}

/// Transform one MFCC frame: x + sum_j lambda_j · (W_j · (x; 1)).
pub fn apply_transform(tape: &mut Tape, vars: &IdRemovalVars, lambda: Var, x: Var) -> Var {
    let one = tape.leaf(Tensor::from_slice(&[1], &[1.0]));
    let xbar = tape.concat(&[x, one]);
    let mut out = x;
    for (j, &w) in vars.components.iter().enumerate() {
        let wj = tape.matmul(w, xbar);
        let lj = tape.slice(lambda, j, 1);
        let scaled = tape.scale(wj, lj);
        out = tape.add(out, scaled);
    }
    out
}

/// Transform every frame of a window with one shared lambda.
pub fn apply_window(tape: &mut Tape, vars: &IdRemovalVars, lambda: Var, frames: &[Var]) -> Vec<Var> {
    frames
        .iter()
        .map(|&x| apply_transform(tape, vars, lambda, x))
        .collect()
}

/// Convenience: run the full identity-removal transform on a raw window
/// tensor, off any training tape.
pub fn transform_window(store: &ParamStore, m: &IdRemovalModel, window: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind_id_removal(&mut tape, store, m)?;
    let frames = row_leaves(&mut tape, window);
    let lambda = infer_lambda(&mut tape, &vars, &frames);
    let out = apply_window(&mut tape, &vars, lambda, &frames);
    let c = m.c;
    let mut data = Vec::with_capacity(out.len() * c);
    for v in out {
        data.extend_from_slice(tape.value(v).data());
    }
    Ok(Tensor::new(vec![window.shape()[0], c], data))
}

/// lambda for a raw window tensor (inspection/evaluation).
pub fn lambda_for_window(store: &ParamStore, m: &IdRemovalModel, window: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = bind_id_removal(&mut tape, store, m)?;
    let frames = row_leaves(&mut tape, window);
    let lambda = infer_lambda(&mut tape, &vars, &frames);
    Ok(tape.value(lambda).data().iter().map(|&x| x as f64).collect())
}

// ---------------------------------------------------------------------------
// Speaker classifier

/// Stand-in speaker identity network: LSTM, temporal mean-pool, FC to
/// N logits. Weights live under "spk/lstm/*", "spk/fc/*".
#[derive(Clone, Copy, Debug)]
pub struct SpeakerClassifier {
    pub n_speakers: usize,
    pub c: usize,
    pub hidden: usize,
}

impl SpeakerClassifier {
    pub fn init(store: &mut ParamStore, rng: &mut Rng64, n_speakers: usize, c: usize, hidden: usize) -> Self {
        init_lstm(store, rng, "spk/lstm", hidden, c);
        init_linear(store, rng, "spk/fc", n_speakers, hidden);
        SpeakerClassifier { n_speakers, c, hidden }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let w = store.require("spk/lstm/w")?;
        let hidden = w.shape()[0] / 4;
        let c = w.shape()[1] - hidden;
        let n_speakers = store.require("spk/fc/w")?.shape()[0];
        Ok(SpeakerClassifier { n_speakers, c, hidden })
    }
}

pub struct ClassifierVars {
    pub lstm: LstmVars,
    pub fc: LinearVars,
}

/// Bind classifier weights as trainable parameter leaves.
pub fn bind_classifier(tape: &mut Tape, store: &ParamStore, clf: &SpeakerClassifier) -> Result<ClassifierVars> {
    Ok(ClassifierVars {
        lstm: bind_lstm(tape, store, "spk/lstm", clf.hidden)?,
        fc: bind_linear(tape, store, "spk/fc")?,
    })
}

/// Bind classifier weights as plain constants: gradients flow through them
/// to the input but the weights themselves stay frozen.
pub fn bind_classifier_frozen(tape: &mut Tape, store: &ParamStore, clf: &SpeakerClassifier) -> Result<ClassifierVars> {
    Ok(ClassifierVars {
        lstm: LstmVars {
            w: tape.leaf(store.require("spk/lstm/w")?.clone()),
            b: tape.leaf(store.require("spk/lstm/b")?.clone()),
            hidden: clf.hidden,
        },
        fc: LinearVars {
            w: tape.leaf(store.require("spk/fc/w")?.clone()),
            b: tape.leaf(store.require("spk/fc/b")?.clone()),
        },
    })
}

pub fn classifier_logits(tape: &mut Tape, vars: &ClassifierVars, frames: &[Var]) -> Var {
    let hs = lstm_sequence(tape, &vars.lstm, frames);
    let pooled = mean_pool(tape, &hs);
    linear(tape, &vars.fc, pooled)
}

/// One MFCC window with its speaker label.
#[derive(Clone)]
pub struct LabeledWindow {
    pub window: Tensor,
    pub speaker: usize,
}

fn mean_of(tape: &mut Tape, losses: &[Var]) -> Var {
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l);
    }
    tape.scale_const(acc, 1.0 / losses.len() as f32)
}

/// Train the speaker classifier with cross-entropy on raw MFCC windows and
/// report held-out accuracy. The classifier is frozen afterwards by
/// convention: later stages bind it without parameter names.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_classifier(
    store: &mut ParamStore,
    clf: &SpeakerClassifier,
    train: &[LabeledWindow],
    heldout: &[LabeledWindow],
    epochs: usize,
    batch: usize,
    lr: f32,
    seed: u64,
) -> Result<f64> {
    let classes: std::collections::BTreeSet<usize> = train.iter().map(|w| w.speaker).collect();
    if classes.len() < 2 {
        return Err(Error::Invalid(format!(
            "classifier corpus has {} distinct speaker(s), need at least 2",
            classes.len()
        )));
    }
    if train.iter().chain(heldout).any(|w| w.speaker >= clf.n_speakers) {
        return Err(Error::Invalid("speaker label out of range".into()));
    }
    let mut adam = Adam::new(lr);
    let mut rng = Rng64::derive(seed, "spk-train");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let vars = bind_classifier(&mut tape, store, clf)?;
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let frames = row_leaves(&mut tape, &train[i].window);
                let logits = classifier_logits(&mut tape, &vars, &frames);
                let mut target = vec![0.0f32; clf.n_speakers];
                target[train[i].speaker] = 1.0;
                losses.push(tape.softmax_cross_entropy(logits, &target));
            }
            let loss = mean_of(&mut tape, &losses);
            if !tape.value(loss).is_finite() {
                return Err(Error::Numeric("classifier loss is not finite".into()));
            }
            let grads = tape.backward(loss);
            let gm = tape.param_grads(&grads);
            adam.step(store, &gm)?;
        }
    }
    classifier_accuracy(store, clf, heldout)
}

/// Argmax-logit accuracy on labeled windows.
pub fn classifier_accuracy(store: &ParamStore, clf: &SpeakerClassifier, windows: &[LabeledWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Invalid("no windows to evaluate".into()));
    }
    let mut hits = 0usize;
    for w in windows {
        let mut tape = Tape::new();
        let vars = bind_classifier_frozen(&mut tape, store, clf)?;
        let frames = row_leaves(&mut tape, &w.window);
        let logits = classifier_logits(&mut tape, &vars, &frames);
        let data = tape.value(logits).data();
        let pred = data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == w.speaker {
            hits += 1;
        }
    }
    Ok(hits as f64 / windows.len() as f64)
}

/// Like [`classifier_accuracy`] but on identity-removed windows.
pub fn classifier_accuracy_transformed(
    store: &ParamStore,
    m: &IdRemovalModel,
    clf: &SpeakerClassifier,
    windows: &[LabeledWindow],
) -> Result<f64> {
    let transformed: Vec<LabeledWindow> = windows
        .iter()
        .map(|w| {
            Ok(LabeledWindow {
                window: transform_window(store, m, &w.window)?,
                speaker: w.speaker,
            })
        })
        .collect::<Result<_>>()?;
    classifier_accuracy(store, clf, &transformed)
}

/// Cross-entropy of the classifier's prediction against the uniform
/// distribution. Bounded below by ln N, attained exactly when the
/// prediction is uniform.
pub fn confusion_loss(tape: &mut Tape, vars: &ClassifierVars, n_speakers: usize, frames: &[Var]) -> Var {
    let logits = classifier_logits(tape, vars, frames);
    let uniform = vec![1.0 / n_speakers as f32; n_speakers];
    tape.softmax_cross_entropy(logits, &uniform)
}

/// The same loss evaluated directly on a probability vector, with the
/// 1e-12 log floor. Reference implementation for hand-checked values.
pub fn confusion_loss_from_probs(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    -p.iter().map(|&pc| pc.max(1e-12).ln()).sum::<f64>() / n
}

/// Minimize the confusion loss over the identity-removal parameters with
/// the classifier frozen. Returns mean loss per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_id_removal(
    store: &mut ParamStore,
    m: &IdRemovalModel,
    clf: &SpeakerClassifier,
    windows: &[Tensor],
    epochs: usize,
    batch: usize,
    lr: f32,
    seed: u64,
) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::Invalid("no windows to train on".into()));
    }
    let floor = (clf.n_speakers as f64).ln() - 1e-4;
    let mut adam = Adam::new(lr);
    let mut rng = Rng64::derive(seed, "idrm-train");
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let vars = bind_id_removal(&mut tape, store, m)?;
            let cvars = bind_classifier_frozen(&mut tape, store, clf)?;
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let frames = row_leaves(&mut tape, &windows[i]);
                let lambda = infer_lambda(&mut tape, &vars, &frames);
                let transformed = apply_window(&mut tape, &vars, lambda, &frames);
                losses.push(confusion_loss(&mut tape, &cvars, clf.n_speakers, &transformed));
            }
            let loss = mean_of(&mut tape, &losses);
            let v = tape.value(loss).item() as f64;
            if !v.is_finite() {
                return Err(Error::Numeric("confusion loss is not finite".into()));
            }
            if v < floor {
                return Err(Error::Numeric(format!(
                    "confusion loss {v} below its analytic minimum ln N"
                )));
            }
            epoch_loss += v * chunk.len() as f64;
            seen += chunk.len();
            let grads = tape.backward(loss);
            let gm = tape.param_grads(&grads);
            adam.step(store, &gm)?;
        }
        history.push(epoch_loss / seen as f64);
    }
    Ok(history)
}
