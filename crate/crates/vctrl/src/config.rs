//! Run configuration: one strict JSON document per run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vctrl_core::extract::NUM_CLASSES;
use vctrl_core::train::TrainConfig;
use vctrl_core::{
    make_schedule, AdapterConfig, BaseConfig, ControlKind, Layout, NetworkSpec, NoiseSchedule,
    PatchSpec, SizeRatio,
};

use crate::archive::sha256_hex;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "M")]
    pub m: usize,
    pub d_b: usize,
    pub heads: usize,
    pub d_c: usize,
    pub layout: Layout,
    /// defaults to medium when neither `ratio` nor `N` is given
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<SizeRatio>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

fn default_patch() -> [usize; 2] {
    [2, 4]
}

fn default_scene_threshold() -> u32 {
    16
}

fn default_border_std() -> f64 {
    0.05
}

fn default_task() -> ControlKind {
    ControlKind::Canny
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_clips: usize,
    #[serde(rename = "F")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub seed: u64,
    /// `[p_t, p_s]`
    #[serde(default = "default_patch")]
    pub patch: [usize; 2],
    #[serde(default = "default_task")]
    pub task: ControlKind,
    /// trailing clips held out from training and used by sample/evaluate
    #[serde(default)]
    pub val_clips: usize,
    /// directory of `*.vclt` video containers ingested after the synthetic clips
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_dir: Option<PathBuf>,
    #[serde(default = "default_scene_threshold")]
    pub scene_threshold: u32,
    #[serde(default = "default_border_std")]
    pub border_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub report_dir: PathBuf,
}

fn default_sample_count() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    #[serde(default = "default_sample_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            count: default_sample_count(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    /// base pretraining
    pub train: TrainConfig,
    /// adapter training; falls back to `train`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_train: Option<TrainConfig>,
    pub data: DataConfig,
    pub paths: PathsConfig,
    #[serde(default)]
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates `path`; relative paths inside are taken relative
    /// to the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut cfg.paths.dataset_dir);
        fix(&mut cfg.paths.ckpt_dir);
        fix(&mut cfg.paths.report_dir);
        if let Some(raw) = cfg.data.raw_dir.as_mut() {
            fix(raw);
        }
        Ok(cfg)
    }

    /// Replaces every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        if let Some(c) = self.control_train.as_mut() {
            c.seed = seed;
        }
        self.sample.seed = seed;
    }

    pub fn control_train(&self) -> &TrainConfig {
        self.control_train.as_ref().unwrap_or(&self.train)
    }

    pub fn patch(&self) -> PatchSpec {
        PatchSpec::new(self.data.patch[0], self.data.patch[1])
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        let d = &self.diffusion;
        Ok(make_schedule(d.steps, d.beta_min, d.beta_max)?)
    }

    pub fn base_config(&self) -> BaseConfig {
        let p = self.patch();
        BaseConfig {
            latent_channels: p.channels(),
            grid: (
                self.data.frames / p.temporal,
                self.data.height / p.spatial,
                self.data.width / p.spatial,
            ),
            width: self.model.d_b,
            blocks: self.model.m,
            heads: self.model.heads,
            mlp_hidden: 2 * self.model.d_b,
            time_dim: self.model.d_b.div_ceil(2) * 2,
            num_classes: NUM_CLASSES,
        }
    }

    pub fn network_spec(&self, layout: Layout) -> CliResult<NetworkSpec> {
        let m = &self.model;
        let spec = match (m.ratio, m.n) {
            (Some(r), Some(n)) if r.control_blocks(m.m) != n => {
                return Err(CliError::Config(format!(
                    "N={n} disagrees with ratio {} (which gives {})",
                    r.name(),
                    r.control_blocks(m.m)
                )))
            }
            (Some(r), _) => NetworkSpec::from_ratio(m.m, r, layout)?,
            (None, Some(n)) => NetworkSpec::new(m.m, n, layout)?,
            (None, None) => NetworkSpec::from_ratio(m.m, SizeRatio::Medium, layout)?,
        };
        Ok(spec)
    }

    pub fn adapter_config(&self, spec: &NetworkSpec) -> AdapterConfig {
        AdapterConfig {
            control_channels: self.patch().channels() + 1,
            width: self.model.d_c,
            heads: self.model.heads,
            mlp_hidden: 2 * self.model.d_c,
            base_width: self.model.d_b,
            blocks: spec.n,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg_err = |m: String| Err(CliError::Config(m));
        let d = &self.data;
        let p = self.patch();
        if p.temporal == 0 || p.spatial == 0 {
            return cfg_err("patch sizes must be positive".into());
        }
        if d.frames == 0 || d.frames % p.temporal != 0 {
            return cfg_err(format!(
                "F={} must be a positive multiple of p_t={}",
                d.frames, p.temporal
            ));
        }
        if d.height == 0 || d.width == 0 || d.height % p.spatial != 0 || d.width % p.spatial != 0 {
            return cfg_err(format!(
                "H={} and W={} must be positive multiples of p_s={}",
                d.height, d.width, p.spatial
            ));
        }
        if d.height < 3 || d.width < 3 {
            return cfg_err("frames must be at least 3x3 for edge extraction".into());
        }
        if d.n_clips == 0 {
            return cfg_err("n_clips must be positive".into());
        }
        if d.val_clips >= d.n_clips {
            return cfg_err(format!(
                "val_clips={} leaves no training clips",
                d.val_clips
            ));
        }
        if d.scene_threshold > 64 {
            return cfg_err("scene_threshold must be in [0, 64]".into());
        }
        if !(d.border_std >= 0.0) {
            return cfg_err("border_std must be non-negative".into());
        }
        for (name, t) in [
            ("train", &self.train),
            ("control_train", self.control_train()),
        ] {
            t.validate()
                .map_err(|e| CliError::Config(format!("{name}: {e}")))?;
            if t.frames_per_clip != d.frames {
                return cfg_err(format!(
                    "{name}.frames_per_clip={} differs from data.F={}",
                    t.frames_per_clip, d.frames
                ));
            }
        }
        if self.model.d_c % self.model.heads != 0 {
            return cfg_err(format!(
                "d_c={} not divisible by {} heads",
                self.model.d_c, self.model.heads
            ));
        }
        self.base_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let spec = self
            .network_spec(self.model.layout)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let _ = self.adapter_config(&spec);
        self.schedule()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.sample.count == 0 {
            return cfg_err("sample.count must be positive".into());
        }
        Ok(())
    }

    /// Hash of the canonical JSON form, recorded in every artifact.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_json() -> String {
        r#"{
            "model": {"M": 6, "d_b": 16, "heads": 2, "d_c": 8, "layout": "space", "ratio": "medium"},
            "diffusion": {"T": 50, "beta_min": 0.002, "beta_max": 0.4},
            "train": {"lr": 0.001, "adam_beta1": 0.9, "adam_beta2": 0.999, "grad_clip_norm": 1.0,
                      "steps": 10, "batch": 2, "frames_per_clip": 8, "seed": 0},
            "data": {"n_clips": 4, "F": 8, "H": 16, "W": 16, "seed": 7},
            "paths": {"dataset_dir": "data", "ckpt_dir": "ckpt", "report_dir": "reports"}
        }"#
        .into()
    }

    #[test]
    fn parses_and_derives_models() {
        let cfg = RunConfig::from_json(&sample_json()).unwrap();
        assert_eq!(cfg.base_config().latent_channels, 96);
        assert_eq!(cfg.base_config().grid, (4, 4, 4));
        let spec = cfg.network_spec(Layout::Space).unwrap();
        assert_eq!(spec.n, 1);
        assert_eq!(cfg.adapter_config(&spec).control_channels, 97);
        assert_eq!(cfg.control_train(), &cfg.train);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let j = sample_json().replace("\"seed\": 7}", "\"seed\": 7, \"colour\": 1}");
        assert!(matches!(RunConfig::from_json(&j), Err(CliError::Config(_))));
        let j = sample_json().replace("\"steps\": 10", "\"steps\": 10, \"warmup\": 3");
        assert!(RunConfig::from_json(&j).is_err());
        let j = sample_json().replace("\"H\": 16", "\"H\": 18");
        assert!(RunConfig::from_json(&j).is_err());
        let j = sample_json().replace("\"ratio\": \"medium\"", "\"ratio\": \"medium\", \"N\": 3");
        assert!(RunConfig::from_json(&j).is_err());
        let j = sample_json().replace("\"layout\": \"space\"", "\"layout\": \"middle\"");
        assert!(RunConfig::from_json(&j).is_err());
    }

    #[test]
    fn seed_override_and_digest() {
        let mut cfg = RunConfig::from_json(&sample_json()).unwrap();
        let d0 = cfg.digest();
        cfg.override_seed(3);
        assert_eq!((cfg.data.seed, cfg.train.seed, cfg.sample.seed), (3, 3, 3));
        assert_ne!(cfg.digest(), d0);
    }
}
