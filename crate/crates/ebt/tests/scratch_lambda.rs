//! Temporary diagnostic for lambda clustering. Deleted before commit.

use ebt::audio::{compute_mfcc, sliding_window, video_frame_to_mfcc_row, MfccConfig};
use ebt::idrm::{
    classifier_accuracy_transformed, lambda_for_window, pretrain_classifier, train_id_removal,
    IdRemovalModel, LabeledWindow, SpeakerClassifier,
};
use ebt::rng::Rng64;
use ebt::synth::{
    gen_face_basis, gen_utterance, phoneme_inventory, random_phonemes, speaker_geometry,
    speaker_profiles,
};
use ebt::tensor::{ParamStore, Tensor};

fn windows(speakers: usize, phonemes: usize, seed: u64) -> Vec<LabeledWindow> {
    let (basis, _) = gen_face_basis(seed, 90, 6, 5, 20).unwrap();
    let inv = phoneme_inventory(basis.exp_dim(), seed);
    let profiles = speaker_profiles(speakers, seed);
    let cfg = MfccConfig::default();
    let mut out = Vec::new();
    for (i, profile) in profiles.iter().enumerate() {
        let geometry = speaker_geometry(basis.geo_dim(), i, seed);
        let mut rng = Rng64::derive(seed, &format!("corpus-phonemes/{i}"));
        let phon = random_phonemes(phonemes, &mut rng);
        let utt = gen_utterance(&inv, profile, &geometry, &phon, 25.0, 16000, seed ^ (i as u64 + 1)).unwrap();
        let mfcc = compute_mfcc(&utt.clip, &cfg).unwrap();
        for f in 0..utt.n_frames() {
            out.push(LabeledWindow {
                window: sliding_window(&mfcc, video_frame_to_mfcc_row(f, utt.fps)),
                speaker: i,
            });
        }
    }
    out
}

fn triples(items: &[(usize, Vec<f64>)], trials: usize, rng: &mut Rng64) -> f64 {
    let dist = |x: &[f64], y: &[f64]| -> f64 {
        x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()
    };
    let mut wins = 0;
    for _ in 0..trials {
        let a = &items[(rng.next_u64() % items.len() as u64) as usize];
        let same: Vec<&(usize, Vec<f64>)> = items.iter().filter(|w| w.0 == a.0).collect();
        let diff: Vec<&(usize, Vec<f64>)> = items.iter().filter(|w| w.0 != a.0).collect();
        let s = same[(rng.next_u64() % same.len() as u64) as usize];
        let d = diff[(rng.next_u64() % diff.len() as u64) as usize];
        if dist(&a.1, &s.1) < dist(&a.1, &d.1) {
            wins += 1;
        }
    }
    wins as f64 / trials as f64
}

fn run_config(k: usize, clf_epochs: usize, ir_lr: f32, ir_epochs: usize) {
    let all = windows(5, 30, 61);
    let heldout: Vec<LabeledWindow> =
        all.iter().enumerate().filter(|(i, _)| i % 5 == 2).map(|(_, w)| w.clone()).collect();
    let train: Vec<LabeledWindow> =
        all.iter().enumerate().filter(|(i, _)| i % 5 != 2).map(|(_, w)| w.clone()).collect();

    let mut rng = Rng64::derive(61, "acc3-init");
    let mut store = ParamStore::new();
    let clf = SpeakerClassifier::init(&mut store, &mut rng, 5, 13, 32);
    let acc = pretrain_classifier(&mut store, &clf, &train, &heldout, clf_epochs, 16, 3e-3, 611).unwrap();
    let idrm = IdRemovalModel::init(&mut store, &mut rng, k, 13, 32);
    let tensors: Vec<Tensor> = train.iter().map(|w| w.window.clone()).collect();

    let mut trng = Rng64::derive(999, "triples");
    let mut best = 0.0f64;
    for round in 0..(ir_epochs / 10) {
        train_id_removal(&mut store, &idrm, &clf, &tensors, 10, 16, ir_lr, 612 + round as u64).unwrap();
        let lam: Vec<(usize, Vec<f64>)> = heldout
            .iter()
            .map(|w| (w.speaker, lambda_for_window(&store, &idrm, &w.window).unwrap()))
            .collect();
        let t = triples(&lam, 400, &mut trng);
        best = best.max(t);
        let acc_tr = classifier_accuracy_transformed(&store, &idrm, &clf, &heldout).unwrap();
        eprintln!(
            "k={k} clf_ep={clf_epochs} lr={ir_lr} ep={}: triples {t:.3}, acc_tr {acc_tr:.2}",
            (round + 1) * 10
        );
    }
    eprintln!("== k={k} clf_ep={clf_epochs} lr={ir_lr}: raw acc {acc:.2}, best triples {best:.3}");
}

fn run_joint(ir_epochs: usize, joint_lr: f32, joint_epochs: usize) {
    use ebt::a2e::{samples_from_utterance, train_joint, A2EModel, JointWeights};
    let all = windows(5, 30, 61);
    let heldout: Vec<LabeledWindow> =
        all.iter().enumerate().filter(|(i, _)| i % 5 == 2).map(|(_, w)| w.clone()).collect();
    let train: Vec<LabeledWindow> =
        all.iter().enumerate().filter(|(i, _)| i % 5 != 2).map(|(_, w)| w.clone()).collect();

    let mut rng = Rng64::derive(61, "acc3-init");
    let mut store = ParamStore::new();
    let clf = SpeakerClassifier::init(&mut store, &mut rng, 5, 13, 32);
    let _ = pretrain_classifier(&mut store, &clf, &train, &heldout, 20, 16, 3e-3, 611).unwrap();
    let idrm = IdRemovalModel::init(&mut store, &mut rng, 4, 13, 32);
    let tensors: Vec<Tensor> = train.iter().map(|w| w.window.clone()).collect();
    train_id_removal(&mut store, &idrm, &clf, &tensors, ir_epochs, 16, 3e-3, 612).unwrap();

    let (basis, _) = gen_face_basis(61, 90, 6, 5, 20).unwrap();
    let inv = phoneme_inventory(basis.exp_dim(), 61);
    let profiles = speaker_profiles(5, 61);
    let mut samples = Vec::new();
    for (i, profile) in profiles.iter().enumerate() {
        let geometry = speaker_geometry(basis.geo_dim(), i, 61);
        let mut prng = Rng64::derive(61, &format!("corpus-phonemes/{i}"));
        let phon = random_phonemes(30, &mut prng);
        let utt = gen_utterance(&inv, profile, &geometry, &phon, 25.0, 16000, 61 ^ (i as u64 + 1)).unwrap();
        samples.extend(samples_from_utterance(&basis, &utt, 96, 96, &MfccConfig::default()).unwrap());
    }
    let mut arng = Rng64::derive(20, "acc3-a2e");
    let a2e = A2EModel::init(&mut store, &mut arng, 13, basis.exp_dim(), 32);
    let mut trng = Rng64::derive(999, "jt");
    for round in 0..(joint_epochs / 10) {
        train_joint(
            &mut store, Some(&idrm), &a2e, &clf, &basis, &samples,
            JointWeights { w_norm: 1.0, w_trans: 1.0 }, 10, 16, joint_lr, 613 + round as u64,
        )
        .unwrap();
        let lam: Vec<(usize, Vec<f64>)> = heldout
            .iter()
            .map(|w| (w.speaker, lambda_for_window(&store, &idrm, &w.window).unwrap()))
            .collect();
        let acc_tr = classifier_accuracy_transformed(&store, &idrm, &clf, &heldout).unwrap();
        eprintln!(
            "joint lr={joint_lr} ep={}: triples {:.3}, acc_tr {acc_tr:.2}",
            (round + 1) * 10,
            triples(&lam, 400, &mut trng)
        );
    }
}

fn single(phonemes: usize, ir_epochs: usize, seed: u64, trials: usize) -> f64 {
    let all = windows(5, phonemes, 61);
    let heldout: Vec<LabeledWindow> =
        all.iter().enumerate().filter(|(i, _)| i % 5 == 2).map(|(_, w)| w.clone()).collect();
    let train: Vec<LabeledWindow> =
        all.iter().enumerate().filter(|(i, _)| i % 5 != 2).map(|(_, w)| w.clone()).collect();
    let mut rng = Rng64::derive(61, "acc3-init");
    let mut store = ParamStore::new();
    let clf = SpeakerClassifier::init(&mut store, &mut rng, 5, 13, 32);
    let _ = pretrain_classifier(&mut store, &clf, &train, &heldout, 20, 16, 3e-3, 611).unwrap();
    let idrm = IdRemovalModel::init(&mut store, &mut rng, 4, 13, 32);
    let tensors: Vec<Tensor> = train.iter().map(|w| w.window.clone()).collect();
    train_id_removal(&mut store, &idrm, &clf, &tensors, ir_epochs, 16, 3e-3, seed).unwrap();
    let lam: Vec<(usize, Vec<f64>)> = heldout
        .iter()
        .map(|w| (w.speaker, lambda_for_window(&store, &idrm, &w.window).unwrap()))
        .collect();
    triples(&lam, trials, &mut Rng64::derive(999, "triples"))
}

#[test]
fn diag_lambda_clustering() {
    for seed in [612u64, 777] {
        for ep in [30usize, 40] {
            eprintln!("light seed={seed} ep={ep}: {:.3}", single(20, ep, seed, 1000));
        }
    }
    run_config(4, 20, 3e-3, 0);
    let _ = run_joint;
}
