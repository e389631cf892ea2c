//! Plain-text key=value configuration with defaults for every tunable.
//!
//! Unknown and duplicate keys are hard errors: a typo in a config file must
//! not silently fall back to a default. `to_kv` emits every field in a fixed
//! order so a parsed-then-serialized config is a canonical snapshot that can
//! be compared byte-for-byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Every pipeline tunable. Dimensions default to the small synthetic scale
/// (16 geometry / 8 expression coefficients); full-scale face models run
/// the same code with larger values such as 199/29.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    // Corpus generation.
    pub seed: u64,
    pub speakers: usize,
    pub vertices: usize,
    pub geo_dim: usize,
    pub exp_dim: usize,
    pub landmarks: usize,
    pub frame_w: usize,
    pub frame_h: usize,
    pub fps: f64,
    pub sample_rate: u32,
    /// Seconds of footage generated per speaker.
    pub footage_secs: f64,
    // Cepstral features.
    pub mfcc_mels: usize,
    pub mfcc_coeffs: usize,
    // Identity removal and the speaker classifier.
    pub id_components: usize,
    pub idrm_hidden: usize,
    pub clf_hidden: usize,
    pub clf_epochs: usize,
    pub clf_batch: usize,
    pub clf_lr: f64,
    pub id_epochs: usize,
    pub id_batch: usize,
    pub id_lr: f64,
    // Audio-to-expression training.
    pub a2e_hidden: usize,
    pub a2e_epochs: usize,
    pub a2e_batch: usize,
    pub a2e_lr: f64,
    pub w_norm: f64,
    pub w_trans: f64,
    // Mouth completion network.
    pub w_stack: usize,
    pub base_channels: usize,
    pub crop: usize,
    pub sigma_h: f64,
    pub erode_r: usize,
    pub sigma_m: f64,
    pub w_tv: f64,
    pub render_epochs: usize,
    pub render_batch: usize,
    pub render_lr: f64,
    /// Training crops sampled per speaker.
    pub render_samples: usize,
    // Retiming and landmark smoothing.
    pub gamma1: f64,
    pub gamma2: f64,
    pub c_hold: f64,
    pub c_skip: f64,
    pub smooth_d_th: f64,
    pub smooth_s: f64,
    // Temporal filtering.
    pub rho: f64,
    pub flow_block: usize,
    pub flow_radius: usize,
    // Stage behavior.
    pub fit_frames: usize,
    pub drive_target: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            speakers: 5,
            vertices: 120,
            geo_dim: 16,
            exp_dim: 8,
            landmarks: 20,
            frame_w: 96,
            frame_h: 96,
            fps: 25.0,
            sample_rate: 16000,
            footage_secs: 12.0,
            mfcc_mels: 26,
            mfcc_coeffs: 13,
            id_components: 4,
            idrm_hidden: 32,
            clf_hidden: 32,
            clf_epochs: 30,
            clf_batch: 16,
            clf_lr: 3e-3,
            id_epochs: 40,
            id_batch: 16,
            id_lr: 3e-3,
            a2e_hidden: 64,
            a2e_epochs: 40,
            a2e_batch: 16,
            a2e_lr: 1e-2,
            w_norm: 1.0,
            w_trans: 1.0,
            w_stack: 7,
            base_channels: 8,
            crop: 32,
            sigma_h: 1.5,
            erode_r: 1,
            sigma_m: 1.0,
            w_tv: 0.1,
            render_epochs: 60,
            render_batch: 8,
            render_lr: 3e-3,
            render_samples: 40,
            gamma1: 1.0,
            gamma2: 1.0,
            c_hold: 0.1,
            c_skip: 0.1,
            smooth_d_th: 3.0,
            smooth_s: 1.0,
            rho: 1.0,
            flow_block: 8,
            flow_radius: 4,
            fit_frames: 12,
            drive_target: 0,
        }
    }
}

macro_rules! emit_fields {
    ($cfg:expr, $f:expr; $($name:ident),* $(,)?) => {
        $( $f(stringify!($name), format!("{}", $cfg.$name)); )*
    };
}

macro_rules! assign_field {
    ($cfg:expr, $key:expr, $val:expr; $($name:ident : $ty:ty),* $(,)?) => {
        match $key {
            $(
                stringify!($name) => {
                    $cfg.$name = $val.parse::<$ty>().map_err(|_| {
                        Error::Config(format!(
                            "bad value for {}: {:?}", stringify!($name), $val
                        ))
                    })?;
                }
            )*
            other => {
                return Err(Error::Config(format!("unknown config key: {other}")));
            }
        }
    };
}

impl PipelineConfig {
    fn for_each_field(&self, mut f: impl FnMut(&'static str, String)) {
        emit_fields!(self, f;
            seed, speakers, vertices, geo_dim, exp_dim, landmarks,
            frame_w, frame_h, fps, sample_rate, footage_secs,
            mfcc_mels, mfcc_coeffs,
            id_components, idrm_hidden, clf_hidden,
            clf_epochs, clf_batch, clf_lr, id_epochs, id_batch, id_lr,
            a2e_hidden, a2e_epochs, a2e_batch, a2e_lr, w_norm, w_trans,
            w_stack, base_channels, crop, sigma_h, erode_r, sigma_m, w_tv,
            render_epochs, render_batch, render_lr, render_samples,
            gamma1, gamma2, c_hold, c_skip, smooth_d_th, smooth_s,
            rho, flow_block, flow_radius,
            fit_frames, drive_target,
        );
    }

    /// Canonical key=value form, one field per line, fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        self.for_each_field(|k, v| {
            let _ = writeln!(out, "{k} = {v}");
        });
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let val = val.trim().to_string();
            if seen.insert(key.clone(), val).is_some() {
                return Err(Error::Config(format!("duplicate config key: {key}")));
            }
        }
        let mut cfg = PipelineConfig::default();
        for (key, val) in &seen {
            assign_field!(cfg, key.as_str(), val;
                seed: u64, speakers: usize, vertices: usize, geo_dim: usize,
                exp_dim: usize, landmarks: usize, frame_w: usize, frame_h: usize,
                fps: f64, sample_rate: u32, footage_secs: f64,
                mfcc_mels: usize, mfcc_coeffs: usize,
                id_components: usize, idrm_hidden: usize, clf_hidden: usize,
                clf_epochs: usize, clf_batch: usize, clf_lr: f64,
                id_epochs: usize, id_batch: usize, id_lr: f64,
                a2e_hidden: usize, a2e_epochs: usize, a2e_batch: usize,
                a2e_lr: f64, w_norm: f64, w_trans: f64,
                w_stack: usize, base_channels: usize, crop: usize,
                sigma_h: f64, erode_r: usize, sigma_m: f64, w_tv: f64,
                render_epochs: usize, render_batch: usize, render_lr: f64,
                render_samples: usize,
                gamma1: f64, gamma2: f64, c_hold: f64, c_skip: f64,
                smooth_d_th: f64, smooth_s: f64,
                rho: f64, flow_block: usize, flow_radius: usize,
                fit_frames: usize, drive_target: usize,
            );
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        }
        check(self.speakers >= 2, "speakers must be at least 2")?;
        check(self.vertices >= 16, "vertices must be at least 16")?;
        check(self.geo_dim >= 1, "geo_dim must be positive")?;
        check(self.exp_dim >= 2, "exp_dim must be at least 2")?;
        check(
            3 * self.vertices >= self.geo_dim + self.exp_dim,
            "vertices too few for the requested basis dims",
        )?;
        check(self.landmarks >= 10, "landmarks must be at least 10")?;
        check(
            self.frame_w >= 64 && self.frame_h >= 64,
            "frame dims must be at least 64x64",
        )?;
        check(self.fps.is_finite() && self.fps > 0.0, "fps must be positive")?;
        check(self.sample_rate >= 8000, "sample_rate must be at least 8000")?;
        check(
            self.footage_secs.is_finite() && self.footage_secs >= 1.0,
            "footage_secs must be at least 1",
        )?;
        check(self.mfcc_mels >= self.mfcc_coeffs, "mfcc_mels must cover mfcc_coeffs")?;
        check(self.mfcc_coeffs >= 1, "mfcc_coeffs must be positive")?;
        check(self.id_components >= 1, "id_components must be positive")?;
        check(
            self.idrm_hidden >= 1 && self.clf_hidden >= 1 && self.a2e_hidden >= 1,
            "hidden sizes must be positive",
        )?;
        for (name, v) in [
            ("clf_lr", self.clf_lr),
            ("id_lr", self.id_lr),
            ("a2e_lr", self.a2e_lr),
            ("render_lr", self.render_lr),
        ] {
            check(v.is_finite() && v > 0.0, &format!("{name} must be positive"))?;
        }
        for (name, v) in [
            ("clf_batch", self.clf_batch),
            ("id_batch", self.id_batch),
            ("a2e_batch", self.a2e_batch),
            ("render_batch", self.render_batch),
        ] {
            check(v >= 1, &format!("{name} must be positive"))?;
        }
        for (name, v) in [
            ("w_norm", self.w_norm),
            ("w_trans", self.w_trans),
            ("w_tv", self.w_tv),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("c_hold", self.c_hold),
            ("c_skip", self.c_skip),
        ] {
            check(v.is_finite() && v >= 0.0, &format!("{name} must be non-negative"))?;
        }
        for (name, v) in [("smooth_d_th", self.smooth_d_th), ("smooth_s", self.smooth_s)] {
            check(v.is_finite() && v > 0.0, &format!("{name} must be positive"))?;
        }
        check(self.w_stack >= 1, "w_stack must be positive")?;
        check(self.base_channels >= 1, "base_channels must be positive")?;
        check(
            self.crop >= 8 && self.crop % 4 == 0,
            "crop must be at least 8 and divisible by 4",
        )?;
        check(
            self.crop < self.frame_w.min(self.frame_h),
            "crop must fit inside the frame",
        )?;
        check(self.sigma_h.is_finite() && self.sigma_h > 0.0, "sigma_h must be positive")?;
        check(self.sigma_m.is_finite() && self.sigma_m > 0.0, "sigma_m must be positive")?;
        check(self.rho.is_finite() && self.rho > 0.0, "rho must be positive")?;
        check(self.flow_block >= 1, "flow_block must be positive")?;
        check(self.render_samples >= 1, "render_samples must be positive")?;
        check(self.fit_frames >= 1, "fit_frames must be positive")?;
        check(
            self.drive_target < self.speakers,
            "drive_target must name an existing speaker",
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_kv();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_kv(), text);
    }

    #[test]
    fn comments_blanks_and_overrides_parse() {
        let text = "# tuning\nseed = 11\n\n  a2e_lr = 0.02  # fast\nspeakers=3\n";
        let cfg = PipelineConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.speakers, 3);
        assert!((cfg.a2e_lr - 0.02).abs() < 1e-15);
        assert_eq!(cfg.exp_dim, PipelineConfig::default().exp_dim);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = PipelineConfig::parse("sped = 7\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got: {err}");
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = PipelineConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(PipelineConfig::parse("seed = banana\n").is_err());
        assert!(PipelineConfig::parse("speakers = 1\n").is_err());
        assert!(PipelineConfig::parse("crop = 30\n").is_err());
        assert!(PipelineConfig::parse("rho = 0\n").is_err());
        assert!(PipelineConfig::parse("drive_target = 5\n").is_err());
        assert!(PipelineConfig::parse("just a line\n").is_err());
    }

    #[test]
    fn every_error_is_config_kind() {
        for text in ["nope = 1\n", "seed = x\n", "fps = -1\n"] {
            let err = PipelineConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 3, "wrong exit class for {text:?}");
        }
    }
}
