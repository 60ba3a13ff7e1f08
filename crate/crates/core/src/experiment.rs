//! End-to-end run on synthetic moving shapes: pre-train, then compare label
//! propagation against an untrained network and the static-copy baseline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::clip::VideoClip;
use crate::dataio::synth::{gen_dataset, gen_synthetic, SynthConfig};
use crate::dataio::GapRange;
use crate::error::Result;
use crate::labelprop::{dataset_means, evaluate_dataset, evaluate_static_copy, EvalConfig};
use crate::masking::MaskSpec;
use crate::model::{CatMae, ModelConfig};
use crate::numerics::Rng;
use crate::probe::{attention_correspondence, ProbeResult};
use crate::training::{Checkpoint, StepRecord, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticRun {
    pub seed: u64,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub clip_frames: usize,
    pub max_shapes: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    pub gap_lo: usize,
    pub gap_hi: usize,
}

impl Default for SyntheticRun {
    fn default() -> Self {
        Self {
            seed: 0,
            train_clips: 200,
            eval_clips: 20,
            clip_frames: 24,
            max_shapes: 3,
            steps: 2000,
            batch_size: 8,
            lr: 1e-4,
            mask_ratio: 0.9,
            gap_lo: 2,
            gap_hi: 6,
        }
    }
}

impl SyntheticRun {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::small()
    }

    pub fn train_config(&self) -> TrainConfig {
        let model = self.model_config();
        let mut cfg = TrainConfig::for_model(&model);
        cfg.seed = self.seed;
        cfg.batch_size = self.batch_size;
        cfg.steps = Some(self.steps);
        cfg.clip.gap_ranges = vec![GapRange::new(self.gap_lo, self.gap_hi); model.n_frames - 1];
        cfg.mask = MaskSpec { ratios: vec![self.mask_ratio; model.n_frames - 1] };
        cfg.optimizer.base_lr = self.lr;
        cfg
    }

    /// Held-out labelled clips, drawn from a different seed than training.
    pub fn eval_clips(&self) -> Result<Vec<VideoClip>> {
        gen_dataset("eval", self.eval_clips, self.model_config().image_size, self.clip_frames, self.max_shapes, self.seed ^ 0x5eed)
    }

    /// Attention probe over the evaluation clips with the training gaps and mask ratio.
    pub fn probe(&self, model: &CatMae, clips: &[VideoClip]) -> Result<ProbeResult> {
        let cfg = self.train_config();
        attention_correspondence(model, clips, &cfg.clip, &cfg.mask, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodScore {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

impl MethodScore {
    fn from_means((j, f, jf): (f64, f64, f64)) -> Self {
        Self { j, f, jf }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticReport {
    pub trained: MethodScore,
    pub untrained: MethodScore,
    pub static_copy: MethodScore,
    pub first_loss: f64,
    pub final_loss: f64,
    pub train_seconds: f64,
    pub total_seconds: f64,
    pub probe: ProbeResult,
    pub untrained_probe: ProbeResult,
}

/// Runs the whole experiment and returns the report with the final checkpoint.
/// `observe` sees every training step.
pub fn run_synthetic(run: &SyntheticRun, mut observe: impl FnMut(&StepRecord)) -> Result<(SyntheticReport, Checkpoint)> {
    let start = Instant::now();
    let model_cfg = run.model_config();
    let size = model_cfg.image_size;
    let train = gen_dataset("train", run.train_clips, size, run.clip_frames, run.max_shapes, run.seed)?;
    let eval = run.eval_clips()?;

    let untrained = CatMae::new(model_cfg.clone(), &mut Rng::keyed(run.seed, "init", 0))?;
    let eval_cfg = EvalConfig::default();
    let untrained_score = MethodScore::from_means(dataset_means(&evaluate_dataset(&untrained, &eval, &eval_cfg)?));
    let static_score = MethodScore::from_means(dataset_means(&evaluate_static_copy(&eval, eval_cfg.boundary_tolerance)?));
    let untrained_probe = run.probe(&untrained, &eval)?;

    let train_cfg = run.train_config();
    let train_start = Instant::now();
    let mut trainer = Trainer::new(&train, untrained, train_cfg.clone())?;
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    trainer.run_until(run.steps, |_, r| {
        if r.step == 1 {
            first = r.total;
        }
        last = r.total;
        observe(r);
        Ok(())
    })?;
    let train_seconds = train_start.elapsed().as_secs_f64();
    let ckpt = trainer.checkpoint();
    let model = trainer.into_model();

    let trained = MethodScore::from_means(dataset_means(&evaluate_dataset(&model, &eval, &eval_cfg)?));
    let probe = run.probe(&model, &eval)?;
    let report = SyntheticReport {
        trained,
        untrained: untrained_score,
        static_copy: static_score,
        first_loss: first,
        final_loss: last,
        train_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
        probe,
        untrained_probe,
    };
    Ok((report, ckpt))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverfitReport {
    pub steps: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

impl OverfitReport {
    pub fn ratio(&self) -> f64 {
        self.final_loss / self.first_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitSpec {
    pub vire_prob: f64,
    pub steps: u64,
    pub seed: u64,
    pub lr: f64,
    pub mask_ratio: f64,
    pub batch_size: usize,
    /// Uniform untextured background.
    pub plain_background: bool,
}

impl Default for OverfitSpec {
    fn default() -> Self {
        Self { vire_prob: 0.0, steps: 1000, seed: 0, lr: 1e-2, mask_ratio: 0.75, batch_size: 4, plain_background: true }
    }
}

/// Setup of the overfit smoke test: one synthetic clip exactly as long as
/// the fixed frame gaps require, no spatial augmentation, micro model.
pub fn overfit_setup(spec: &OverfitSpec) -> Result<(Vec<VideoClip>, CatMae, TrainConfig)> {
    let model = ModelConfig::micro();
    let gap = 2;
    let clip_len = 1 + gap * (model.n_frames - 1);
    let mut synth = SynthConfig::random(model.image_size, model.image_size, clip_len, 2, &mut Rng::keyed(spec.seed, "overfit-clip", 0));
    if spec.plain_background {
        synth.background[1] = synth.background[0];
        synth.texture = 0.0;
    }
    let clip = vec![gen_synthetic("overfit", &synth)?];
    let mut cfg = TrainConfig::for_model(&model);
    cfg.seed = spec.seed;
    cfg.batch_size = spec.batch_size;
    cfg.steps = Some(spec.steps);
    cfg.clip.gap_ranges = vec![GapRange::new(gap, gap); model.n_frames - 1];
    cfg.clip.crop.scale_min = 1.0;
    cfg.clip.crop.scale_max = 1.0;
    cfg.clip.flip_prob = 0.0;
    cfg.clip.vire_prob = spec.vire_prob;
    cfg.mask = MaskSpec { ratios: vec![spec.mask_ratio; model.n_frames - 1] };
    cfg.optimizer.base_lr = spec.lr;
    let net = CatMae::new(model, &mut Rng::keyed(spec.seed, "init", 0))?;
    Ok((clip, net, cfg))
}

pub fn overfit_smoke(spec: &OverfitSpec) -> Result<OverfitReport> {
    let start = Instant::now();
    let (clip, model, cfg) = overfit_setup(spec)?;
    let mut trainer = Trainer::new(&clip, model, cfg)?;
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    trainer.run_until(spec.steps, |_, r| {
        if r.step == 1 {
            first = r.total;
        }
        last = r.total;
        Ok(())
    })?;
    Ok(OverfitReport { steps: trainer.step(), first_loss: first, final_loss: last, seconds: start.elapsed().as_secs_f64() })
}
