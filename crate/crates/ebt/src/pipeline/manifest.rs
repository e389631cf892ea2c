//! Project directory layout and stage bookkeeping.
//!
//! A project is a directory owned by the CLI. The manifest records which
//! stages have completed; every command checks its prerequisites through
//! [`Project::require_stage`], which verifies both the flag and the files
//! the flag vouches for. The config snapshot written at creation time is
//! the single source of tunables for all later stages.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::config::PipelineConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    FitFace,
    TrainId,
    TrainA2e,
    TrainRender,
    Drive,
    Post,
}

pub const ALL_STAGES: [Stage; 7] = [
    Stage::Synth,
    Stage::FitFace,
    Stage::TrainId,
    Stage::TrainA2e,
    Stage::TrainRender,
    Stage::Drive,
    Stage::Post,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::FitFace => "fitface",
            Stage::TrainId => "train_id",
            Stage::TrainA2e => "train_a2e",
            Stage::TrainRender => "train_render",
            Stage::Drive => "drive",
            Stage::Post => "post",
        }
    }

    fn from_name(s: &str) -> Result<Stage> {
        ALL_STAGES
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Model(format!("manifest lists unknown stage {s:?}")))
    }

    /// True once this stage has produced trained parameters; the config
    /// snapshot is frozen from that point on.
    fn is_training(self) -> bool {
        matches!(self, Stage::TrainId | Stage::TrainA2e | Stage::TrainRender)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
pub struct Project {
    root: PathBuf,
    done: BTreeSet<Stage>,
}

impl Project {
    /// Initialize a project directory and write the config snapshot.
    /// Refuses to clobber a project that has already trained models.
    pub fn create(root: &Path, cfg: &PipelineConfig) -> Result<Project> {
        if root.join("manifest.txt").exists() {
            let existing = Project::open(root)?;
            if existing.done.iter().any(|s| s.is_training()) {
                return Err(Error::Config(format!(
                    "project {} already contains trained models; refusing to regenerate",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let p = Project { root: root.to_path_buf(), done: BTreeSet::new() };
        fs::write(p.config_path(), cfg.to_kv()).map_err(|e| Error::io(p.config_path(), e))?;
        p.save_manifest()?;
        Ok(p)
    }

    pub fn open(root: &Path) -> Result<Project> {
        let manifest = root.join("manifest.txt");
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut done = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                Error::Model(format!("manifest line {}: expected key = value", lineno + 1))
            })?;
            match (key.trim(), val.trim()) {
                ("done", "") => {}
                ("done", list) => {
                    for name in list.split(',') {
                        done.insert(Stage::from_name(name.trim())?);
                    }
                }
                (other, _) => {
                    return Err(Error::Model(format!("manifest has unknown key {other:?}")));
                }
            }
        }
        Ok(Project { root: root.to_path_buf(), done })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.done.contains(&stage)
    }

    pub fn mark_done(&mut self, stage: Stage) -> Result<()> {
        self.done.insert(stage);
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<()> {
        let list: Vec<&str> = self.done.iter().map(|s| s.name()).collect();
        let text = format!("done = {}\n", list.join(","));
        let path = self.root.join("manifest.txt");
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Check that `needed` has run and that its key outputs still exist.
    pub fn require_stage(&self, needed: Stage, wanted_by: &str) -> Result<()> {
        if !self.is_done(needed) {
            return Err(Error::MissingStage {
                needed: needed.name().into(),
                wanted_by: wanted_by.into(),
            });
        }
        for path in self.stage_outputs(needed) {
            if !path.exists() {
                return Err(Error::Model(format!(
                    "stage {} is marked done but {} is missing",
                    needed,
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// Sentinel files that must exist once a stage's flag is set.
    fn stage_outputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Synth => vec![self.basis_path(), self.audio_path(0), self.gt_geometry_path()],
            Stage::FitFace => vec![self.fit_path(0)],
            Stage::TrainId | Stage::TrainA2e | Stage::TrainRender => vec![self.model_path()],
            Stage::Drive => vec![self.plan_path(), self.driven_expr_path()],
            Stage::Post => vec![self.post_dir()],
        }
    }

    pub fn config(&self) -> Result<PipelineConfig> {
        PipelineConfig::from_file(&self.config_path())
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn model_path(&self) -> PathBuf {
        self.root.join("model.ebtm")
    }

    pub fn basis_path(&self) -> PathBuf {
        self.root.join("basis.ebtm")
    }

    pub fn audio_path(&self, speaker: usize) -> PathBuf {
        self.root.join(format!("audio/spk{speaker}.wav"))
    }

    pub fn phonemes_path(&self) -> PathBuf {
        self.root.join("gt/phonemes.txt")
    }

    pub fn footage_dir(&self, speaker: usize) -> PathBuf {
        self.root.join(format!("footage/spk{speaker}"))
    }

    pub fn frame_path(&self, speaker: usize, t: usize) -> PathBuf {
        self.footage_dir(speaker).join(format!("frame_{t:05}.ppm"))
    }

    pub fn gt_geometry_path(&self) -> PathBuf {
        self.root.join("gt/geometry.txt")
    }

    pub fn gt_expr_path(&self, speaker: usize) -> PathBuf {
        self.root.join(format!("gt/spk{speaker}_expr.txt"))
    }

    pub fn gt_pose_path(&self, speaker: usize) -> PathBuf {
        self.root.join(format!("gt/spk{speaker}_pose.txt"))
    }

    pub fn gt_blink_path(&self, speaker: usize) -> PathBuf {
        self.root.join(format!("gt/spk{speaker}_blink.txt"))
    }

    /// Full landmark sets, one line per frame, 2L floats each.
    pub fn gt_lm_path(&self, speaker: usize) -> PathBuf {
        self.root.join(format!("gt/spk{speaker}_lm.txt"))
    }

    pub fn fit_path(&self, speaker: usize) -> PathBuf {
        self.root.join(format!("fit/spk{speaker}.txt"))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.root.join("out")
    }

    pub fn out_frame_path(&self, t: usize) -> PathBuf {
        self.out_dir().join(format!("frame_{t:05}.ppm"))
    }

    pub fn plan_path(&self) -> PathBuf {
        self.out_dir().join("plan.txt")
    }

    pub fn driven_expr_path(&self) -> PathBuf {
        self.out_dir().join("expr.txt")
    }

    pub fn driven_mouth_path(&self) -> PathBuf {
        self.out_dir().join("mouth.txt")
    }

    pub fn drive_source_path(&self) -> PathBuf {
        self.out_dir().join("source.txt")
    }

    pub fn post_dir(&self) -> PathBuf {
        self.root.join("post")
    }

    pub fn post_frame_path(&self, t: usize) -> PathBuf {
        self.post_dir().join(format!("frame_{t:05}.ppm"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_root(name: &str) -> PathBuf {
        let dir = std::env::temp_dir()
            .join(format!("ebt-manifest-{}", std::process::id()))
            .join(name);
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn create_open_and_flags_round_trip() {
        let root = tmp_root("roundtrip");
        let cfg = PipelineConfig::default();
        let mut p = Project::create(&root, &cfg).unwrap();
        assert!(!p.is_done(Stage::Synth));
        p.mark_done(Stage::Synth).unwrap();
        p.mark_done(Stage::TrainId).unwrap();

        let q = Project::open(&root).unwrap();
        assert!(q.is_done(Stage::Synth));
        assert!(q.is_done(Stage::TrainId));
        assert!(!q.is_done(Stage::Drive));
        assert_eq!(q.config().unwrap(), cfg);
    }

    #[test]
    fn missing_stage_has_exit_code_four() {
        let root = tmp_root("missing");
        let p = Project::create(&root, &PipelineConfig::default()).unwrap();
        let err = p.require_stage(Stage::TrainA2e, "drive").unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let msg = err.to_string();
        assert!(msg.contains("train_a2e") && msg.contains("drive"), "got: {msg}");
    }

    #[test]
    fn done_flag_with_missing_outputs_is_an_error() {
        let root = tmp_root("ghost");
        let mut p = Project::create(&root, &PipelineConfig::default()).unwrap();
        p.mark_done(Stage::TrainId).unwrap();
        let err = p.require_stage(Stage::TrainId, "train_a2e").unwrap_err();
        assert_eq!(err.exit_code(), 3, "flag without files is a corrupt project");
    }

    #[test]
    fn recreate_after_training_refused() {
        let root = tmp_root("frozen");
        let mut p = Project::create(&root, &PipelineConfig::default()).unwrap();
        p.mark_done(Stage::TrainRender).unwrap();
        let err = Project::create(&root, &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("refusing"));
    }

    #[test]
    fn unknown_manifest_content_rejected() {
        let root = tmp_root("garbage");
        fs::create_dir_all(&root).unwrap();
        fs::write(root.join("manifest.txt"), "done = synth,warp\n").unwrap();
        assert!(Project::open(&root).is_err());
        fs::write(root.join("manifest.txt"), "blah = 1\n").unwrap();
        assert!(Project::open(&root).is_err());
    }
}
