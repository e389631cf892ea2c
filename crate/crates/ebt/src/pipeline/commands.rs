//! The eight CLI commands over a project directory.
//!
//! Every command is a plain function so tests can call it without spawning
//! a process. All randomness is derived from the config seed with labeled
//! streams, which makes every stage reproducible byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use crate::a2e::{evaluate, train_joint, A2EModel, JointWeights, TrainingSample};
use crate::audio::{
    compute_mfcc, load_wav, save_wav, sliding_window, video_frame_to_mfcc_row, MfccConfig,
    MfccSequence,
};
use crate::error::{Error, Result};
use crate::face::{landmarks_for, FaceBasis, FaceParams, FitOptions, LandmarkSet, Pose};
use crate::idrm::{
    classifier_accuracy, classifier_accuracy_transformed, pretrain_classifier, train_id_removal,
    transform_window, IdRemovalModel, LabeledWindow, SpeakerClassifier,
};
use crate::metrics::{e_exp, e_ldmk, psnr, ssim, EvalReport};
use crate::render::compose::{
    build_input_stack, landmarks_to_heatmap, mask_mouth, mouth_box, mouth_soft_mask,
    stack_window_indices, composite_frame, Heatmap, PixelBox, MOUTH_BOX_PAD,
};
use crate::render::unet::{complete_tensor, train_completion, CompletionNet, CompletionSample};
use crate::render::FrameBuffer;
use crate::rng::Rng64;
use crate::synth::{
    gen_face_basis, gen_utterance, phoneme_inventory, random_phonemes, render_footage,
    speaker_geometry, speaker_profiles, PHONEME_SECONDS,
};
use crate::temporal::{
    deflicker_sequence, retime_dp, smooth_landmarks, FootageFeatures, RetimeWeights,
};
use crate::tensor::ParamStore;

use super::config::PipelineConfig;
use super::manifest::{Project, Stage};
use super::model_io::{load_basis, load_model, save_basis, save_model};

// ---------------------------------------------------------------------------
// Small text-file helpers. Floats round-trip exactly through Display.

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "))
        .collect();
    write_lines(path, &lines)
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::Model(format!(
                        "{} line {}: bad float {tok:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        out.push(row);
    }
    Ok(out)
}

fn points_from_row(row: &[f64], path: &Path) -> Result<Vec<[f64; 2]>> {
    if row.len() % 2 != 0 {
        return Err(Error::Model(format!(
            "{}: odd coordinate count {}",
            path.display(),
            row.len()
        )));
    }
    Ok(row.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

fn pose_from_row(row: &[f64], path: &Path) -> Result<Pose> {
    if row.len() != 6 {
        return Err(Error::Model(format!(
            "{}: pose rows want 6 values, got {}",
            path.display(),
            row.len()
        )));
    }
    Ok(Pose {
        rot: [row[0], row[1], row[2]],
        t: [row[3], row[4]],
        scale: row[5],
    })
}

fn pose_to_row(p: &Pose) -> Vec<f64> {
    vec![p.rot[0], p.rot[1], p.rot[2], p.t[0], p.t[1], p.scale]
}

fn mfcc_config(cfg: &PipelineConfig) -> MfccConfig {
    MfccConfig {
        n_mels: cfg.mfcc_mels,
        n_coeffs: cfg.mfcc_coeffs,
        ..MfccConfig::default()
    }
}

/// Load the accumulated model file, or start one if no stage has saved yet.
fn load_or_new_model(project: &Project) -> Result<ParamStore> {
    let path = project.model_path();
    if path.exists() {
        load_model(&path)
    } else {
        Ok(ParamStore::new())
    }
}

/// Merge `trained` into the project model file, overwriting same names.
fn merge_and_save(project: &Project, trained: &ParamStore) -> Result<()> {
    let mut store = load_or_new_model(project)?;
    for (name, t) in trained.iter() {
        store.insert(name, t.clone());
    }
    save_model(&store, &project.model_path())
}

/// Reject a config passed on the command line that disagrees with the
/// snapshot taken when the project was created.
pub fn check_config_override(project: &Project, cli_config: Option<&Path>) -> Result<()> {
    if let Some(path) = cli_config {
        let given = PipelineConfig::from_file(path)?;
        let snapshot = project.config()?;
        if given != snapshot {
            return Err(Error::Config(format!(
                "config {} differs from the project snapshot {}; \
                 the snapshot is frozen at project creation",
                path.display(),
                project.config_path().display()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ground-truth corpus access shared by the training and driving stages.

struct SpeakerData {
    expr: Vec<Vec<f64>>,
    poses: Vec<Pose>,
    blink: Vec<f64>,
    /// Full landmark sets per frame.
    lm: Vec<Vec<[f64; 2]>>,
    geometry: Vec<f64>,
}

impl SpeakerData {
    fn n_frames(&self) -> usize {
        self.expr.len()
    }

    fn mouth_track(&self, mouth: &[usize]) -> Vec<Vec<[f64; 2]>> {
        self.lm
            .iter()
            .map(|set| mouth.iter().map(|&i| set[i]).collect())
            .collect()
    }
}

fn load_speaker_data(project: &Project, speaker: usize) -> Result<SpeakerData> {
    let geo_rows = read_matrix(&project.gt_geometry_path())?;
    let geometry = geo_rows
        .get(speaker)
        .ok_or_else(|| Error::Model(format!("no geometry row for speaker {speaker}")))?
        .clone();
    let expr = read_matrix(&project.gt_expr_path(speaker))?;
    let pose_rows = read_matrix(&project.gt_pose_path(speaker))?;
    let blink_rows = read_matrix(&project.gt_blink_path(speaker))?;
    let lm_rows = read_matrix(&project.gt_lm_path(speaker))?;
    let n = expr.len();
    if pose_rows.len() != n || blink_rows.len() != n || lm_rows.len() != n {
        return Err(Error::Model(format!(
            "speaker {speaker} ground truth files disagree on frame count"
        )));
    }
    let pose_path = project.gt_pose_path(speaker);
    let lm_path = project.gt_lm_path(speaker);
    let poses = pose_rows
        .iter()
        .map(|r| pose_from_row(r, &pose_path))
        .collect::<Result<_>>()?;
    let lm = lm_rows
        .iter()
        .map(|r| points_from_row(r, &lm_path))
        .collect::<Result<_>>()?;
    Ok(SpeakerData {
        expr,
        poses,
        blink: blink_rows.iter().map(|r| r[0]).collect(),
        lm,
        geometry,
    })
}

/// One MFCC window per video frame of a speaker's clip.
fn speaker_windows(project: &Project, cfg: &PipelineConfig, speaker: usize) -> Result<(MfccSequence, usize)> {
    let clip = load_wav(&project.audio_path(speaker))?;
    let mfcc = compute_mfcc(&clip, &mfcc_config(cfg))?;
    let n_frames = read_matrix(&project.gt_expr_path(speaker))?.len();
    Ok((mfcc, n_frames))
}

// ---------------------------------------------------------------------------
// synth

pub fn cmd_synth(root: &Path, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let mut project = Project::create(root, cfg)?;
    let (basis, _) = gen_face_basis(cfg.seed, cfg.vertices, cfg.geo_dim, cfg.exp_dim, cfg.landmarks)?;
    save_basis(&basis, &project.basis_path())?;

    let inventory = phoneme_inventory(cfg.exp_dim, cfg.seed);
    let profiles = speaker_profiles(cfg.speakers, cfg.seed);
    let per_speaker = ((cfg.footage_secs / PHONEME_SECONDS).round() as usize).max(2);

    let mut geometry_rows = Vec::with_capacity(cfg.speakers);
    let mut phoneme_lines = Vec::with_capacity(cfg.speakers);
    let mut report = vec![format!("speakers = {}", cfg.speakers)];
    for (i, profile) in profiles.iter().enumerate() {
        let geometry = speaker_geometry(cfg.geo_dim, i, cfg.seed);
        let mut prng = Rng64::derive(cfg.seed, &format!("phonemes/{i}"));
        let phonemes = random_phonemes(per_speaker, &mut prng);
        let clip_seed = Rng64::derive(cfg.seed, &format!("utt/{i}")).next_u64();
        let utt = gen_utterance(
            &inventory,
            profile,
            &geometry,
            &phonemes,
            cfg.fps,
            cfg.sample_rate,
            clip_seed,
        )?;
        let footage = render_footage(&basis, &utt, cfg.frame_w, cfg.frame_h)?;

        let audio_path = project.audio_path(i);
        if let Some(dir) = audio_path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_wav(&audio_path, &utt.clip)?;
        let dir = project.footage_dir(i);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, frame) in footage.frames.iter().enumerate() {
            frame.save_ppm(&project.frame_path(i, t))?;
        }
        write_matrix(&project.gt_expr_path(i), &utt.expression_track)?;
        let pose_rows: Vec<Vec<f64>> = footage.poses.iter().map(pose_to_row).collect();
        write_matrix(&project.gt_pose_path(i), &pose_rows)?;
        let blink_rows: Vec<Vec<f64>> = utt.blink_track.iter().map(|&b| vec![b]).collect();
        write_matrix(&project.gt_blink_path(i), &blink_rows)?;
        let lm_rows: Vec<Vec<f64>> = footage
            .landmarks
            .iter()
            .map(|set| set.points.iter().flat_map(|p| [p[0], p[1]]).collect())
            .collect();
        write_matrix(&project.gt_lm_path(i), &lm_rows)?;

        geometry_rows.push(geometry);
        phoneme_lines.push(phonemes.clone());
        report.push(format!(
            "spk{} frames = {} audio_secs = {}",
            i,
            utt.n_frames(),
            utt.clip.duration_secs()
        ));
    }
    write_matrix(&project.gt_geometry_path(), &geometry_rows)?;
    write_lines(&project.phonemes_path(), &phoneme_lines)?;
    write_lines(&project.reports_dir().join("synth.txt"), &report)?;
    project.mark_done(Stage::Synth)
}

// ---------------------------------------------------------------------------
// fitface

pub fn cmd_fitface(root: &Path) -> Result<()> {
    let mut project = Project::open(root)?;
    project.require_stage(Stage::Synth, "fitface")?;
    let cfg = project.config()?;
    let basis = load_basis(&project.basis_path())?;
    let opts = FitOptions::default();

    let mut report = Vec::new();
    for spk in 0..cfg.speakers {
        let data = load_speaker_data(&project, spk)?;
        let n = data.n_frames();
        let count = cfg.fit_frames.min(n);
        // Evenly spread sample of frames, always including frame 0.
        let picks: Vec<usize> = (0..count).map(|k| k * n / count).collect();
        let init = FaceParams {
            s: vec![0.0; basis.geo_dim()],
            e: vec![0.0; basis.exp_dim()],
            pose: Pose {
                rot: [0.0; 3],
                t: [cfg.frame_w as f64 / 2.0, cfg.frame_h as f64 / 2.0],
                scale: cfg.frame_w.min(cfg.frame_h) as f64 / 4.0,
            },
        };
        let mut lines = Vec::with_capacity(picks.len());
        let mut rmse_sum = 0.0f64;
        for &t in &picks {
            let observed = LandmarkSet { points: data.lm[t].clone() };
            let (fitted, fit_report) = crate::face::fit_params(&observed, &basis, &init, &opts)?;
            let reproj = landmarks_for(&basis, &fitted);
            let rmse = {
                let mut acc = 0.0;
                for (a, b) in reproj.points.iter().zip(&observed.points) {
                    acc += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
                }
                (acc / observed.points.len() as f64).sqrt()
            };
            rmse_sum += rmse;
            let mut row = vec![t as f64, fit_report.converged as u8 as f64, rmse];
            row.extend(&fitted.s);
            row.extend(&fitted.e);
            row.extend(pose_to_row(&fitted.pose));
            lines.push(row);
        }
        write_matrix(&project.fit_path(spk), &lines)?;
        report.push(format!(
            "spk{} fitted = {} mean_rmse_px = {}",
            spk,
            picks.len(),
            rmse_sum / picks.len() as f64
        ));
    }
    write_lines(&project.reports_dir().join("fitface.txt"), &report)?;
    project.mark_done(Stage::FitFace)
}

// ---------------------------------------------------------------------------
// train_id

/// Interleaved deterministic split; every fifth window is held out.
fn is_heldout(index: usize) -> bool {
    index % 5 == 2
}

pub fn cmd_train_id(root: &Path) -> Result<()> {
    let mut project = Project::open(root)?;
    project.require_stage(Stage::Synth, "train_id")?;
    let cfg = project.config()?;

    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for spk in 0..cfg.speakers {
        let (mfcc, n_frames) = speaker_windows(&project, &cfg, spk)?;
        for f in 0..n_frames {
            let w = LabeledWindow {
                window: sliding_window(&mfcc, video_frame_to_mfcc_row(f, cfg.fps)),
                speaker: spk,
            };
            if is_heldout(f) {
                heldout.push(w);
            } else {
                train.push(w);
            }
        }
    }

    let mut store = load_or_new_model(&project)?;
    let mut rng = Rng64::derive(cfg.seed, "train-id-init");
    let clf = SpeakerClassifier::init(&mut store, &mut rng, cfg.speakers, cfg.mfcc_coeffs, cfg.clf_hidden);
    let acc_raw = pretrain_classifier(
        &mut store,
        &clf,
        &train,
        &heldout,
        cfg.clf_epochs,
        cfg.clf_batch,
        cfg.clf_lr as f32,
        Rng64::derive(cfg.seed, "clf-train").next_u64(),
    )?;

    let idrm = IdRemovalModel::init(&mut store, &mut rng, cfg.id_components, cfg.mfcc_coeffs, cfg.idrm_hidden);
    let tensors: Vec<_> = train.iter().map(|w| w.window.clone()).collect();
    let history = train_id_removal(
        &mut store,
        &idrm,
        &clf,
        &tensors,
        cfg.id_epochs,
        cfg.id_batch,
        cfg.id_lr as f32,
        Rng64::derive(cfg.seed, "idrm-train").next_u64(),
    )?;
    let acc_after = classifier_accuracy_transformed(&store, &idrm, &clf, &heldout)?;
    let acc_raw_check = classifier_accuracy(&store, &clf, &heldout)?;

    merge_and_save(&project, &store)?;
    write_lines(
        &project.reports_dir().join("train_id.txt"),
        &[
            format!("windows_train = {}", train.len()),
            format!("windows_heldout = {}", heldout.len()),
            format!("clf_acc_raw = {acc_raw}"),
            format!("clf_acc_raw_final = {acc_raw_check}"),
            format!("clf_acc_after_removal = {acc_after}"),
            format!("idrm_loss_first = {}", history.first().copied().unwrap_or(f64::NAN)),
            format!("idrm_loss_last = {}", history.last().copied().unwrap_or(f64::NAN)),
        ],
    )?;
    project.mark_done(Stage::TrainId)
}

// ---------------------------------------------------------------------------
// train_a2e

fn speaker_samples(
    project: &Project,
    cfg: &PipelineConfig,
    basis: &FaceBasis,
    spk: usize,
) -> Result<Vec<TrainingSample>> {
    let data = load_speaker_data(project, spk)?;
    let (mfcc, n_frames) = speaker_windows(project, cfg, spk)?;
    let mouth = basis.mouth_positions();
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        out.push(TrainingSample {
            window: sliding_window(&mfcc, video_frame_to_mfcc_row(f, cfg.fps)),
            e_gt: data.expr[f].clone(),
            s_gt: data.geometry.clone(),
            p_gt: data.poses[f],
            l_gt: mouth.iter().map(|&i| data.lm[f][i]).collect(),
        });
    }
    Ok(out)
}

pub fn cmd_train_a2e(root: &Path) -> Result<()> {
    let mut project = Project::open(root)?;
    project.require_stage(Stage::Synth, "train_a2e")?;
    project.require_stage(Stage::TrainId, "train_a2e")?;
    let cfg = project.config()?;
    let basis = load_basis(&project.basis_path())?;

    let mut store = load_model(&project.model_path())?;
    let idrm = IdRemovalModel::from_store(&store)?;
    let clf = SpeakerClassifier::from_store(&store)?;

    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for spk in 0..cfg.speakers {
        for (f, sample) in speaker_samples(&project, &cfg, &basis, spk)?.into_iter().enumerate() {
            if is_heldout(f) {
                heldout.push(sample);
            } else {
                train.push(sample);
            }
        }
    }

    let mut rng = Rng64::derive(cfg.seed, "a2e-init");
    let a2e = A2EModel::init(&mut store, &mut rng, cfg.mfcc_coeffs, cfg.exp_dim, cfg.a2e_hidden);
    let (e0, l0) = evaluate(&store, Some(&idrm), &a2e, &basis, &heldout)?;
    let weights = JointWeights { w_norm: cfg.w_norm, w_trans: cfg.w_trans };
    let history = train_joint(
        &mut store,
        Some(&idrm),
        &a2e,
        &clf,
        &basis,
        &train,
        weights,
        cfg.a2e_epochs,
        cfg.a2e_batch,
        cfg.a2e_lr as f32,
        Rng64::derive(cfg.seed, "a2e-train").next_u64(),
    )?;
    let (e1, l1) = evaluate(&store, Some(&idrm), &a2e, &basis, &heldout)?;

    merge_and_save(&project, &store)?;
    write_lines(
        &project.reports_dir().join("train_a2e.txt"),
        &[
            format!("samples_train = {}", train.len()),
            format!("samples_heldout = {}", heldout.len()),
            format!("e_exp_untrained = {e0}"),
            format!("e_ldmk_untrained = {l0}"),
            format!("e_exp_trained = {e1}"),
            format!("e_ldmk_trained = {l1}"),
            format!("loss_norm_last = {}", history.last().map_or(f64::NAN, |h| h.norm)),
            format!("loss_trans_last = {}", history.last().map_or(f64::NAN, |h| h.trans)),
        ],
    )?;
    project.mark_done(Stage::TrainA2e)
}

// ---------------------------------------------------------------------------
// train_render

/// Square completion crop centered on the mouth, clamped inside the frame.
fn crop_origin(mouth: &[[f64; 2]], crop: usize, w: usize, h: usize) -> (usize, usize) {
    let n = mouth.len().max(1) as f64;
    let cx: f64 = mouth.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy: f64 = mouth.iter().map(|p| p[1]).sum::<f64>() / n;
    let half = crop as f64 / 2.0;
    let ox = (cx - half).round().clamp(0.0, (w - crop) as f64) as usize;
    let oy = (cy - half).round().clamp(0.0, (h - crop) as f64) as usize;
    (ox, oy)
}

fn shift_points(points: &[[f64; 2]], ox: usize, oy: usize) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| [p[0] - ox as f64, p[1] - oy as f64])
        .collect()
}

/// Crop a stacked frame and hide its mouth with seeded noise.
fn masked_crop(
    frame: &FrameBuffer,
    mouth: &[[f64; 2]],
    origin: (usize, usize),
    crop: usize,
    rng: &mut Rng64,
) -> Result<FrameBuffer> {
    let patch = frame.crop(origin.0, origin.1, crop, crop);
    let local = shift_points(mouth, origin.0, origin.1);
    let bx = mouth_box(&local, crop, crop, MOUTH_BOX_PAD)?;
    // The mouth may fall partly outside this crop (old frame, new crop
    // window); clip the noise box to the crop.
    let bx = PixelBox {
        x0: bx.x0.min(crop),
        y0: bx.y0.min(crop),
        w: bx.w.min(crop - bx.x0.min(crop)),
        h: bx.h.min(crop - bx.y0.min(crop)),
    };
    mask_mouth(&patch, bx, rng)
}

pub fn cmd_train_render(root: &Path) -> Result<()> {
    let mut project = Project::open(root)?;
    project.require_stage(Stage::Synth, "train_render")?;
    let cfg = project.config()?;
    let basis = load_basis(&project.basis_path())?;
    let mouth_pos = basis.mouth_positions();

    let mut samples = Vec::new();
    for spk in 0..cfg.speakers {
        let data = load_speaker_data(&project, spk)?;
        let track = data.mouth_track(&mouth_pos);
        let n = data.n_frames();
        let count = cfg.render_samples.min(n);
        let picks: Vec<usize> = (0..count).map(|k| k * n / count).collect();
        // Frames are read per pick below; cache only the ones a stack needs.
        let mut frames: Vec<Option<FrameBuffer>> = vec![None; n];
        let frame_at = |t: usize, project: &Project| -> Result<FrameBuffer> {
            Ok(FrameBuffer::load_ppm(&project.frame_path(spk, t))?)
        };
        for &t in &picks {
            let origin = crop_origin(&track[t], cfg.crop, cfg.frame_w, cfg.frame_h);
            let indices = stack_window_indices(t, cfg.w_stack);
            let mut crops = Vec::with_capacity(indices.len());
            let mut heats = Vec::with_capacity(indices.len());
            for &u in &indices {
                if frames[u].is_none() {
                    frames[u] = Some(frame_at(u, &project)?);
                }
                let frame = frames[u].as_ref().unwrap();
                let mut rng = Rng64::derive(cfg.seed, &format!("render-mask/{spk}/{t}/{u}"));
                crops.push(masked_crop(frame, &track[u], origin, cfg.crop, &mut rng)?);
                let local = shift_points(&track[u], origin.0, origin.1);
                heats.push(landmarks_to_heatmap(&local, cfg.crop, cfg.crop, cfg.sigma_h));
            }
            if frames[t].is_none() {
                frames[t] = Some(frame_at(t, &project)?);
            }
            let target = frames[t]
                .as_ref()
                .unwrap()
                .crop(origin.0, origin.1, cfg.crop, cfg.crop);
            samples.push(CompletionSample {
                stack: build_input_stack(&crops, &heats)?,
                target: target.to_chw(),
            });
        }
    }

    let mut store = load_or_new_model(&project)?;
    let mut rng = Rng64::derive(cfg.seed, "render-init");
    let net = CompletionNet::init(&mut store, &mut rng, 4 * cfg.w_stack, cfg.base_channels);
    let history = train_completion(
        &mut store,
        &net,
        &samples,
        cfg.render_epochs,
        cfg.render_batch,
        cfg.render_lr as f32,
        cfg.w_tv as f32,
        Rng64::derive(cfg.seed, "render-train").next_u64(),
    )?;

    merge_and_save(&project, &store)?;
    write_lines(
        &project.reports_dir().join("train_render.txt"),
        &[
            format!("samples = {}", samples.len()),
            format!("recon_first = {}", history.first().map_or(f64::NAN, |h| h.recon)),
            format!("recon_last = {}", history.last().map_or(f64::NAN, |h| h.recon)),
            format!("tv_last = {}", history.last().map_or(f64::NAN, |h| h.tv)),
        ],
    )?;
    project.mark_done(Stage::TrainRender)
}

// ---------------------------------------------------------------------------
// drive

/// Mean absolute sample amplitude per video frame.
fn audio_energy_per_frame(samples: &[f32], sample_rate: u32, fps: f64, n_frames: usize) -> Vec<f64> {
    let per = sample_rate as f64 / fps;
    (0..n_frames)
        .map(|t| {
            let lo = (t as f64 * per).round() as usize;
            let hi = (((t + 1) as f64 * per).round() as usize).min(samples.len());
            if lo >= hi {
                return 0.0;
            }
            samples[lo..hi].iter().map(|s| s.abs() as f64).sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// If the wav path is one of the project's corpus clips, return the speaker.
fn corpus_speaker_of(project: &Project, cfg: &PipelineConfig, audio: &Path) -> Option<usize> {
    let target = fs::canonicalize(audio).ok()?;
    (0..cfg.speakers).find(|&i| {
        fs::canonicalize(project.audio_path(i))
            .map(|p| p == target)
            .unwrap_or(false)
    })
}

pub struct DriveOutcome {
    pub frames: usize,
    pub report: Option<EvalReport>,
}

pub fn cmd_drive(root: &Path, source_audio: &Path, seed_override: Option<u64>) -> Result<DriveOutcome> {
    let mut project = Project::open(root)?;
    for stage in [Stage::Synth, Stage::TrainId, Stage::TrainA2e, Stage::TrainRender] {
        project.require_stage(stage, "drive")?;
    }
    let cfg = project.config()?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let basis = load_basis(&project.basis_path())?;
    let mouth_pos = basis.mouth_positions();
    let store = load_model(&project.model_path())?;
    let idrm = IdRemovalModel::from_store(&store)?;
    let a2e = A2EModel::from_store(&store)?;
    let net = CompletionNet::from_store(&store)?;
    if a2e.de != cfg.exp_dim || a2e.c != cfg.mfcc_coeffs {
        return Err(Error::Config(format!(
            "trained model dims ({} cepstra -> {} coefficients) disagree with config ({} -> {})",
            a2e.c, a2e.de, cfg.mfcc_coeffs, cfg.exp_dim
        )));
    }
    if net.c_in != 4 * cfg.w_stack {
        return Err(Error::Config(format!(
            "completion net wants {} input channels, config stack gives {}",
            net.c_in,
            4 * cfg.w_stack
        )));
    }

    // Target footage.
    let target_spk = cfg.drive_target;
    let data = load_speaker_data(&project, target_spk)?;
    let m_frames = data.n_frames();
    let target_frames: Vec<FrameBuffer> = (0..m_frames)
        .map(|t| FrameBuffer::load_ppm(&project.frame_path(target_spk, t)))
        .collect::<Result<_>>()?;
    let target_mouth = data.mouth_track(&mouth_pos);

    // Driving audio.
    let clip = load_wav(source_audio)?;
    let mfcc = compute_mfcc(&clip, &mfcc_config(&cfg))?;
    let t_out = ((clip.duration_secs() * cfg.fps).round() as usize).max(1);

    // Retiming over the target footage.
    let energy = audio_energy_per_frame(&clip.samples, clip.sample_rate, cfg.fps, t_out);
    let feats = FootageFeatures::from_landmarks(&target_mouth, &data.blink)?;
    let weights = RetimeWeights {
        gamma1: cfg.gamma1,
        gamma2: cfg.gamma2,
        c_hold: cfg.c_hold,
        c_skip: cfg.c_skip,
        kappa: None,
    };
    let plan = retime_dp(&energy, &feats, &weights)?;

    // Frame-by-frame synthesis. Masked crops and heatmaps accumulate so
    // the stack can look back w_stack steps of the output timeline.
    let mut crops: Vec<FrameBuffer> = Vec::with_capacity(t_out);
    let mut heats: Vec<Heatmap> = Vec::with_capacity(t_out);
    let mut driven_mouth: Vec<Vec<[f64; 2]>> = Vec::with_capacity(t_out);
    let mut exprs: Vec<Vec<f64>> = Vec::with_capacity(t_out);
    let mut raw_frames: Vec<FrameBuffer> = Vec::with_capacity(t_out);
    for (t, &j) in plan.indices.iter().enumerate() {
        let window = sliding_window(&mfcc, video_frame_to_mfcc_row(t, cfg.fps));
        let transformed = transform_window(&store, &idrm, &window)?;
        let e_hat = crate::a2e::predict_expression_tensor(&store, &a2e, &transformed)?;

        let params = FaceParams {
            s: data.geometry.clone(),
            e: e_hat.clone(),
            pose: data.poses[j],
        };
        let lm = landmarks_for(&basis, &params);
        let l_hat: Vec<[f64; 2]> = mouth_pos.iter().map(|&i| lm.points[i]).collect();
        let all: Vec<usize> = (0..l_hat.len()).collect();
        let l_draw = match driven_mouth.last() {
            Some(prev) => smooth_landmarks(prev, &l_hat, &all, cfg.smooth_d_th, cfg.smooth_s),
            None => l_hat,
        };

        let target = &target_frames[j];
        let origin = crop_origin(&l_draw, cfg.crop, cfg.frame_w, cfg.frame_h);
        // Hide the footage frame's real mouth, then ask the completion net
        // for the driven one.
        let mut rng = Rng64::derive(seed, &format!("drive-mask/{t}"));
        crops.push(masked_crop(target, &target_mouth[j], origin, cfg.crop, &mut rng)?);
        let local = shift_points(&l_draw, origin.0, origin.1);
        heats.push(landmarks_to_heatmap(&local, cfg.crop, cfg.crop, cfg.sigma_h));

        let indices = stack_window_indices(t, cfg.w_stack);
        let stack_crops: Vec<FrameBuffer> = indices.iter().map(|&u| crops[u].clone()).collect();
        let stack_heats: Vec<Heatmap> = indices.iter().map(|&u| heats[u].clone()).collect();
        let stack = build_input_stack(&stack_crops, &stack_heats)?;
        let completed = complete_tensor(&store, &net, &stack)?;

        let out = match mouth_soft_mask(&local, cfg.crop, cfg.crop, cfg.erode_r, cfg.sigma_m) {
            Ok(soft) => composite_frame(target, &completed, &soft, origin)?,
            // Degenerate driven mouth (collinear or fully eroded): keep the
            // footage frame rather than abort a long drive.
            Err(Error::Invalid(_)) => target.clone(),
            Err(e) => return Err(e),
        };
        raw_frames.push(out);
        driven_mouth.push(l_draw);
        exprs.push(e_hat);
    }

    let filtered = deflicker_sequence(&raw_frames, &driven_mouth, cfg.rho, cfg.flow_block, cfg.flow_radius)?;

    let out_dir = project.out_dir();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    for (t, frame) in filtered.iter().enumerate() {
        frame.save_ppm(&project.out_frame_path(t))?;
    }
    let plan_rows: Vec<Vec<f64>> = plan.indices.iter().map(|&j| vec![j as f64]).collect();
    write_matrix(&project.plan_path(), &plan_rows)?;
    write_matrix(&project.driven_expr_path(), &exprs)?;
    let mouth_rows: Vec<Vec<f64>> = driven_mouth
        .iter()
        .map(|ps| ps.iter().flat_map(|p| [p[0], p[1]]).collect())
        .collect();
    write_matrix(&project.driven_mouth_path(), &mouth_rows)?;

    let source_spk = corpus_speaker_of(&project, &cfg, source_audio);
    write_lines(
        &project.drive_source_path(),
        &[
            format!("audio = {}", source_audio.display()),
            format!("speaker = {}", source_spk.map_or(-1, |s| s as i64)),
            format!("target = {target_spk}"),
            format!("frames = {}", filtered.len()),
            format!("plan_cost = {}", plan.cost),
        ],
    )?;
    project.mark_done(Stage::Drive)?;

    let report = match source_spk {
        Some(spk) => {
            let r = evaluate_drive(&project, &cfg, &basis, spk)?;
            write_eval(&project, "eval_drive", &r)?;
            Some(r)
        }
        None => None,
    };
    Ok(DriveOutcome { frames: filtered.len(), report })
}

// ---------------------------------------------------------------------------
// post

pub fn cmd_post(root: &Path) -> Result<()> {
    let mut project = Project::open(root)?;
    project.require_stage(Stage::Drive, "post")?;
    let cfg = project.config()?;
    let n = read_matrix(&project.plan_path())?.len();
    let frames: Vec<FrameBuffer> = (0..n)
        .map(|t| FrameBuffer::load_ppm(&project.out_frame_path(t)))
        .collect::<Result<_>>()?;
    let mouth_path = project.driven_mouth_path();
    let track: Vec<Vec<[f64; 2]>> = read_matrix(&mouth_path)?
        .iter()
        .map(|r| points_from_row(r, &mouth_path))
        .collect::<Result<_>>()?;
    let filtered = deflicker_sequence(&frames, &track, cfg.rho, cfg.flow_block, cfg.flow_radius)?;
    let dir = project.post_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (t, frame) in filtered.iter().enumerate() {
        frame.save_ppm(&project.post_frame_path(t))?;
    }
    write_lines(
        &project.reports_dir().join("post.txt"),
        &[format!("frames = {}", filtered.len()), format!("rho = {}", cfg.rho)],
    )?;
    project.mark_done(Stage::Post)
}

// ---------------------------------------------------------------------------
// eval

fn read_drive_source(project: &Project) -> Result<(PathBuf, i64, usize)> {
    let path = project.drive_source_path();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (mut audio, mut speaker, mut target) = (None, None, None);
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "audio" => audio = Some(PathBuf::from(v.trim())),
                "speaker" => speaker = v.trim().parse::<i64>().ok(),
                "target" => target = v.trim().parse::<usize>().ok(),
                _ => {}
            }
        }
    }
    match (audio, speaker, target) {
        (Some(a), Some(s), Some(t)) => Ok((a, s, t)),
        _ => Err(Error::Model(format!("{} is incomplete", path.display()))),
    }
}

/// Metrics for the driven sequence against the generating ground truth:
/// predicted expressions against the source speaker's track, driven mouth
/// landmarks against the oracle placement of the true expression on the
/// target face, and image quality against the selected footage frames.
fn evaluate_drive(
    project: &Project,
    cfg: &PipelineConfig,
    basis: &FaceBasis,
    source_spk: usize,
) -> Result<EvalReport> {
    let source = load_speaker_data(project, source_spk)?;
    let target = load_speaker_data(project, cfg.drive_target)?;
    let mouth_pos = basis.mouth_positions();

    let plan: Vec<usize> = read_matrix(&project.plan_path())?
        .iter()
        .map(|r| r[0] as usize)
        .collect();
    let exprs = read_matrix(&project.driven_expr_path())?;
    let mouth_path = project.driven_mouth_path();
    let driven: Vec<Vec<[f64; 2]>> = read_matrix(&mouth_path)?
        .iter()
        .map(|r| points_from_row(r, &mouth_path))
        .collect::<Result<_>>()?;

    let n = plan.len().min(source.n_frames());
    if n == 0 {
        return Err(Error::Invalid("no overlapping frames to evaluate".into()));
    }
    let (mut se, mut sl, mut sp, mut ss) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for t in 0..n {
        let j = plan[t];
        se += e_exp(&exprs[t], &source.expr[t])?;
        let oracle_params = FaceParams {
            s: target.geometry.clone(),
            e: source.expr[t].clone(),
            pose: target.poses[j],
        };
        let lm = landmarks_for(basis, &oracle_params);
        let oracle: Vec<[f64; 2]> = mouth_pos.iter().map(|&i| lm.points[i]).collect();
        sl += e_ldmk(&driven[t], &oracle)?;

        let out = FrameBuffer::load_ppm(&project.out_frame_path(t))?;
        let raw = FrameBuffer::load_ppm(&project.frame_path(cfg.drive_target, j))?;
        sp += psnr(&out, &raw)?;
        ss += ssim(&out, &raw)?;
    }
    Ok(EvalReport {
        e_exp: se / n as f64,
        e_ldmk: sl / n as f64,
        psnr_db: sp / n as f64,
        ssim: ss / n as f64,
        n_exp: cfg.exp_dim,
        n_ldmk: mouth_pos.len(),
        n_frames: n,
    })
}

fn write_eval(project: &Project, name: &str, report: &EvalReport) -> Result<()> {
    let dir = project.reports_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let kv = dir.join(format!("{name}.txt"));
    fs::write(&kv, report.to_kv()).map_err(|e| Error::io(&kv, e))?;
    let csv = dir.join(format!("{name}.csv"));
    let text = format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row());
    fs::write(&csv, text).map_err(|e| Error::io(&csv, e))
}

pub fn cmd_eval(root: &Path) -> Result<EvalReport> {
    let project = Project::open(root)?;
    project.require_stage(Stage::Drive, "eval")?;
    let cfg = project.config()?;
    let basis = load_basis(&project.basis_path())?;
    let (_, speaker, _) = read_drive_source(&project)?;
    if speaker < 0 {
        return Err(Error::Invalid(
            "driving audio has no ground truth in this project; nothing to evaluate".into(),
        ));
    }
    let report = evaluate_drive(&project, &cfg, &basis, speaker as usize)?;
    write_eval(&project, "eval", &report)?;
    Ok(report)
}
