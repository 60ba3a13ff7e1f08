//! Sectioned TOML run configuration. Every key has a default; unknown keys
//! are rejected. Command-line flags override file values, which override defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{ClipSpec, CropConfig, GapRange};
use crate::error::{Error, Result};
use crate::labelprop::EvalConfig;
use crate::masking::MaskSpec;
use crate::model::ModelConfig;
use crate::training::{LossSpec, OptimizerConfig, TrainConfig};

/// Name of the resolved config echoed into every run directory.
pub const RESOLVED_NAME: &str = "config.resolved";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Training clips (one subdirectory per clip).
    pub data: PathBuf,
    /// Labelled evaluation clips.
    pub eval_data: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { data: "data/train".into(), eval_data: "data/eval".into(), run_dir: "runs/default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    /// `[lo, hi]` per adjacent frame pair; empty means `[4, 16]` for each.
    pub gaps: Vec<[usize; 2]>,
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    pub vire_prob: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self { gaps: Vec::new(), crop_scale: [0.5, 1.0], flip_prob: 0.5, vire_prob: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    /// One ratio per masked frame; empty means 0.95 each.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// One scale per reconstructed frame; empty means 0.8 then 1.0s.
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub batch_size: usize,
    pub repetition: usize,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { seed: 0, batch_size: 8, repetition: 2, epochs: 1, steps: None, checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub model: ModelConfig,
    pub sampling: SamplingSection,
    pub mask: MaskSection,
    pub loss: LossSection,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Fills every frame-count-dependent list that was left empty.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let n = c.model.n_frames.saturating_sub(1);
        if c.sampling.gaps.is_empty() {
            c.sampling.gaps = vec![[4, 16]; n];
        }
        if c.mask.ratios.is_empty() {
            c.mask.ratios = vec![0.95; n];
        }
        if c.loss.scales.is_empty() {
            c.loss.scales = LossSpec::default_for(c.model.n_frames).scales;
        }
        c
    }

    pub fn clip_spec(&self) -> ClipSpec {
        let r = self.resolved();
        ClipSpec {
            n_frames: r.model.n_frames,
            gap_ranges: r.sampling.gaps.iter().map(|g| GapRange::new(g[0], g[1])).collect(),
            crop: CropConfig {
                output_size: r.model.image_size,
                scale_min: r.sampling.crop_scale[0],
                scale_max: r.sampling.crop_scale[1],
            },
            flip_prob: r.sampling.flip_prob,
            vire_prob: r.sampling.vire_prob,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let r = self.resolved();
        TrainConfig {
            seed: r.train.seed,
            batch_size: r.train.batch_size,
            repetition: r.train.repetition,
            epochs: r.train.epochs,
            steps: r.train.steps,
            checkpoint_every: r.train.checkpoint_every,
            clip: self.clip_spec(),
            mask: MaskSpec { ratios: r.mask.ratios },
            loss: LossSpec { scales: r.loss.scales },
            optimizer: r.optimizer,
        }
    }

    /// Every problem across all sections, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.model.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.train_config().validate(&self.model) {
            problems.push(e.to_string());
        }
        if let Err(e) = LossSpec::new(self.resolved().loss.scales) {
            problems.push(e.to_string());
        }
        if let Err(e) = self.eval.propagation.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Writes the resolved config to `<dir>/config.resolved`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.resolved().to_toml()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::from_toml("").unwrap().resolved();
        assert_eq!(c.model.n_frames, 3);
        assert_eq!(c.mask.ratios, vec![0.95, 0.95]);
        assert_eq!(c.loss.scales, vec![0.8, 1.0]);
        assert_eq!(c.sampling.gaps, vec![[4, 16], [4, 16]]);
        let t = c.train_config();
        assert_eq!(t.clip.gap_ranges, vec![GapRange::new(4, 16); 2]);
        assert_eq!(t.optimizer.base_lr, 1e-4);
        c.validate().unwrap();
    }

    #[test]
    fn more_frames_extend_the_lists() {
        let mut c = RunConfig::default();
        c.model.n_frames = 5;
        let r = c.resolved();
        assert_eq!(r.mask.ratios.len(), 4);
        assert_eq!(r.loss.scales.len(), 4);
        assert_eq!(r.sampling.gaps.len(), 4);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("colour = 1").is_err());
        assert!(RunConfig::from_toml("[model]\nwidth = 3").is_err());
        assert!(RunConfig::from_toml("[eval.propagation]\nk = 3\ntopk = 1").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("[model]\nimage_size = 64\npatch_size = 8\n[train]\nsteps = 10").unwrap();
        assert_eq!(c.model.enc_dim, 384);
        assert_eq!(c.train.steps, Some(10));
        assert_eq!(c.train.batch_size, 8);
    }

    #[test]
    fn validation_lists_every_problem() {
        let c = RunConfig::from_toml("[model]\npatch_size = 15\n[train]\nbatch_size = 0\n[mask]\nratios = [1.5, 0.5]")
            .unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("patch_size"), "{msg}");
        assert!(msg.contains("batch_size"), "{msg}");
        assert!(msg.contains("mask ratio"), "{msg}");
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.train.steps = Some(7);
        c.eval.propagation.k = 3;
        let path = c.echo(dir.path()).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, c.resolved());
        assert_eq!(back.resolved(), back);
    }
}
