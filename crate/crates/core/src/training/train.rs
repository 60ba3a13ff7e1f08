//! Deterministic pre-training loop.
//!
//! Samples form one continuous stream: global sample `g` belongs to epoch
//! `g / (R * C)` and step `s` consumes samples `[s * B, (s + 1) * B)`. Every
//! random draw is keyed by epoch or sample index, so the step counter alone
//! fixes the state of the data pipeline and resuming needs no RNG snapshot.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::clip::VideoClip;
use crate::dataio::sampling::{augment, sample_sequence, vire_reverse, ClipSpec};
use crate::error::{Error, Result};
use crate::masking::{make_mask_plan, MaskSpec};
use crate::model::CatMae;
use crate::numerics::{Graph, Rng, Tensor};
use crate::training::checkpoint::{save_checkpoint, Checkpoint};
use crate::training::loss::{total_loss_graph, LossSpec};
use crate::training::optim::{adamw_apply, lr_at, OptimizerConfig, OptimizerState, Schedule};

/// Environment variable bounding the worker pool used for batch members.
pub const THREADS_ENV: &str = "CATMAE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Independently augmented and masked samples drawn per loaded sequence.
    pub repetition: usize,
    /// Raw passes over the clip list; ignored when `steps` is set.
    pub epochs: u64,
    pub steps: Option<u64>,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub clip: ClipSpec,
    pub mask: MaskSpec,
    pub loss: LossSpec,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    /// Defaults for a model: batch 8, R = 2, one epoch, mask ratio 0.95.
    pub fn for_model(model: &crate::model::ModelConfig) -> Self {
        let mut clip = ClipSpec::default_for(model.image_size);
        clip.n_frames = model.n_frames;
        clip.gap_ranges = vec![clip.gap_ranges[0]; model.n_frames.saturating_sub(1)];
        Self {
            seed: 0,
            batch_size: 8,
            repetition: 2,
            epochs: 1,
            steps: None,
            checkpoint_every: 0,
            clip,
            mask: MaskSpec { ratios: vec![0.95; model.n_frames.saturating_sub(1)] },
            loss: LossSpec::default_for(model.n_frames),
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self, model: &crate::model::ModelConfig) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if self.repetition == 0 {
            problems.push("repetition must be >= 1".to_string());
        }
        if self.clip.n_frames != model.n_frames {
            problems.push(format!("clip samples {} frames, model expects {}", self.clip.n_frames, model.n_frames));
        }
        if self.clip.crop.output_size != model.image_size {
            problems.push(format!("crop size {} differs from model image size {}", self.clip.crop.output_size, model.image_size));
        }
        if self.mask.n_frames() != model.n_frames {
            problems.push(format!("{} mask ratios for {} frames", self.mask.ratios.len(), model.n_frames));
        }
        if self.loss.scales.len() + 1 != model.n_frames {
            problems.push(format!("{} loss scales for {} frames", self.loss.scales.len(), model.n_frames));
        }
        for r in [self.clip.validate(model.patch_size), self.mask.validate(), self.optimizer.validate()] {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// One training step as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based count of applied optimizer steps.
    pub step: u64,
    pub lr: f64,
    /// Batch-mean unscaled loss per reconstructed frame.
    pub frame_losses: Vec<f64>,
    /// Batch-mean scaled total loss.
    pub total: f64,
    /// Passes over the clip list, counting each loaded sequence once.
    pub raw_epoch: f64,
    /// Passes counting each of the `R` repeated samples.
    pub effective_epoch: f64,
}

/// Where sample `g` of the stream comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSlot {
    pub epoch: u64,
    pub clip: usize,
    /// Index of the loaded sequence within the run (shared by its `R` repeats).
    pub sequence: u64,
    pub sample: u64,
}

pub struct Trainer<'d> {
    dataset: &'d [VideoClip],
    config: TrainConfig,
    model: CatMae,
    optimizer: OptimizerState,
    schedule: Schedule,
    step: u64,
    pool: rayon::ThreadPool,
}

/// Worker count from [`THREADS_ENV`], defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d [VideoClip], model: CatMae, config: TrainConfig) -> Result<Self> {
        let optimizer = OptimizerState::new(&model.params);
        Self::assemble(dataset, model, optimizer, 0, config)
    }

    /// Continues from a checkpoint. The seed in the checkpoint wins over the config.
    pub fn resume(dataset: &'d [VideoClip], ckpt: Checkpoint, mut config: TrainConfig) -> Result<Self> {
        config.seed = ckpt.seed;
        let model = CatMae::with_params(ckpt.config, ckpt.params)?;
        Self::assemble(dataset, model, ckpt.optimizer, ckpt.step, config)
    }

    fn assemble(
        dataset: &'d [VideoClip],
        model: CatMae,
        optimizer: OptimizerState,
        step: u64,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate(&model.config)?;
        if dataset.is_empty() {
            return Err(Error::Config("training needs at least one clip".into()));
        }
        let required = config.clip.min_clip_len();
        if let Some(c) = dataset.iter().find(|c| c.len() < required) {
            return Err(Error::ClipTooShort { len: c.len(), required });
        }
        optimizer.check(&model.params)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let mut t = Self { dataset, config, model, optimizer, schedule: Schedule::default_zero(), step, pool };
        t.schedule = t.config.optimizer.schedule(t.total_steps());
        if step > t.total_steps() {
            return Err(Error::Config(format!("checkpoint step {step} exceeds the {} planned steps", t.total_steps())));
        }
        Ok(t)
    }

    pub fn samples_per_epoch(&self) -> u64 {
        (self.config.repetition * self.dataset.len()) as u64
    }

    pub fn steps_per_epoch(&self) -> f64 {
        self.samples_per_epoch() as f64 / self.config.batch_size as f64
    }

    pub fn total_steps(&self) -> u64 {
        self.config
            .steps
            .unwrap_or_else(|| (self.config.epochs * self.samples_per_epoch()).div_ceil(self.config.batch_size as u64))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &CatMae {
        &self.model
    }

    pub fn into_model(self) -> CatMae {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            seed: self.config.seed,
            step: self.step,
        }
    }

    /// Stream position of global sample `g`.
    pub fn slot(&self, g: u64) -> SampleSlot {
        let r = self.config.repetition as u64;
        let per_epoch = self.samples_per_epoch();
        let epoch = g / per_epoch;
        let within = g % per_epoch;
        let order = Rng::keyed(self.config.seed, "epoch-order", epoch).permutation(self.dataset.len());
        let position = (within / r) as usize;
        SampleSlot {
            epoch,
            clip: order[position],
            sequence: epoch * self.dataset.len() as u64 + position as u64,
            sample: g,
        }
    }

    /// Frames and mask plan of one sample.
    pub fn prepare(&self, slot: SampleSlot) -> Result<(Vec<crate::dataio::Image>, crate::masking::MaskPlan)> {
        let seed = self.config.seed;
        let clip = &self.dataset[slot.clip];
        let seq = sample_sequence(clip, &self.config.clip, &mut Rng::keyed(seed, "sequence", slot.sequence))?;
        let mut rng = Rng::keyed(seed, "augment", slot.sample);
        let seq = augment(&seq, &self.config.clip, &mut rng)?;
        let seq = vire_reverse(seq, self.config.clip.vire_prob, &mut rng);
        let plan = make_mask_plan(
            self.model.config.num_patches(),
            &self.config.mask,
            &mut Rng::keyed(seed, "mask", slot.sample),
        )?;
        Ok((seq.frames, plan))
    }

    fn sample_gradients(&self, slot: SampleSlot) -> Result<(Vec<Tensor>, Vec<f64>, f64)> {
        let (frames, plan) = self.prepare(slot)?;
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, true);
        let traced = self.model.network(&vars).forward(&mut g, &frames, &frames, &plan)?;
        let loss = total_loss_graph(&mut g, &traced, &self.config.loss)?;
        let losses = traced.iter().map(|f| g.value(f.mse).item()).collect();
        let total = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grads = vars.iter().map(|v| grads.take(*v).expect("parameter gradient")).collect();
        Ok((grads, losses, total))
    }

    /// Applies one optimizer step on the next batch of the sample stream.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        self.train_step_inner().map_err(|e| Error::Step { step: step + 1, source: Box::new(e) })
    }

    fn train_step_inner(&mut self) -> Result<StepRecord> {
        let b = self.config.batch_size as u64;
        let slots: Vec<SampleSlot> = (self.step * b..(self.step + 1) * b).map(|g| self.slot(g)).collect();
        let results: Vec<Result<(Vec<Tensor>, Vec<f64>, f64)>> =
            self.pool.install(|| slots.par_iter().map(|&s| self.sample_gradients(s)).collect());
        let inv = 1.0 / slots.len() as f64;
        let mut grads: Option<Vec<Tensor>> = None;
        let mut frame_losses = vec![0.0; self.config.loss.scales.len()];
        let mut total = 0.0;
        for r in results {
            let (g, losses, t) = r?;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(&g) {
                        a.add_assign(x)?;
                    }
                }
            }
            for (a, l) in frame_losses.iter_mut().zip(losses) {
                *a += l;
            }
            total += t;
        }
        let grads: Vec<Tensor> = grads.expect("non-empty batch").into_iter().map(|g| g.scale(inv)).collect();
        for l in frame_losses.iter_mut() {
            *l *= inv;
        }
        total *= inv;
        if !total.is_finite() {
            return Err(Error::NonFinite { context: "batch loss".into() });
        }
        let lr = lr_at(self.step + 1, &self.schedule);
        adamw_apply(&mut self.model.params, &grads, &mut self.optimizer, &self.config.optimizer, lr)?;
        self.step += 1;
        let seen = self.step * b;
        Ok(StepRecord {
            step: self.step,
            lr,
            frame_losses,
            total,
            raw_epoch: seen as f64 / self.samples_per_epoch() as f64,
            effective_epoch: seen as f64 / self.dataset.len() as f64,
        })
    }

    /// Runs until `until` steps have been applied (capped at the total),
    /// handing every record to `observe`.
    pub fn run_until(&mut self, until: u64, mut observe: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        let until = until.min(self.total_steps());
        while self.step < until {
            let rec = self.train_step()?;
            observe(self, &rec)?;
        }
        Ok(())
    }
}

impl Schedule {
    fn default_zero() -> Self {
        Schedule { base_lr: 0.0, min_lr: 0.0, warmup_steps: 0, total_steps: 0 }
    }
}

/// Append-only CSV of step records.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    start: Instant,
}

impl MetricsLog {
    pub fn header(n_losses: usize) -> String {
        let mut cols = vec!["step".to_string(), "lr".to_string()];
        cols.extend((0..n_losses).map(|i| format!("loss_frame{}", i + 2)));
        cols.extend(["total_loss", "wall_time_s", "raw_epoch", "effective_epoch"].map(String::from));
        cols.join(",")
    }

    /// Opens (or creates) the log. Rows after `keep_through` are dropped so a
    /// resumed run continues a clean sequence.
    pub fn open(path: &Path, n_losses: usize, keep_through: u64) -> Result<Self> {
        let header = Self::header(n_losses);
        let mut kept = vec![header.clone()];
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s <= keep_through) {
                    kept.push(line);
                }
            }
        }
        let mut text = kept.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(Self { path: path.to_path_buf(), file, start: Instant::now() })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        let mut row = format!("{},{:e}", r.step, r.lr);
        for l in &r.frame_losses {
            row.push_str(&format!(",{l:.9e}"));
        }
        row.push_str(&format!(
            ",{:.9e},{:.3},{:.6},{:.6}\n",
            r.total,
            self.start.elapsed().as_secs_f64(),
            r.raw_epoch,
            r.effective_epoch
        ));
        self.file
            .write_all(row.as_bytes())
            .map_err(|e| Error::io(format!("appending to {}", self.path.display()), e))
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step{step:08}.ckpt"))
}

/// Trains to completion, appending to `metrics.csv` in `run_dir` and writing
/// checkpoints under `run_dir/checkpoints/` on schedule and at the end.
pub fn train_to_dir(trainer: &mut Trainer<'_>, run_dir: &Path) -> Result<Vec<StepRecord>> {
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(format!("creating {}", ckpt_dir.display()), e))?;
    let mut log = MetricsLog::open(&run_dir.join("metrics.csv"), trainer.config().loss.scales.len(), trainer.step())?;
    let every = trainer.config().checkpoint_every;
    let total = trainer.total_steps();
    let mut records = Vec::new();
    trainer.run_until(total, |t, rec| {
        log.append(rec)?;
        log::info!("step {}/{} lr {:.3e} loss {:.5}", rec.step, total, rec.lr, rec.total);
        if (every > 0 && rec.step % every == 0) || rec.step == total {
            save_checkpoint(&checkpoint_path(&ckpt_dir, rec.step), &t.checkpoint())?;
        }
        records.push(rec.clone());
        Ok(())
    })?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{gen_synthetic, SynthConfig};
    use crate::model::ModelConfig;

    fn tiny_setup(clips: usize) -> (Vec<VideoClip>, ModelConfig, TrainConfig) {
        let model = ModelConfig::micro();
        let mut rng = Rng::new(5, 0);
        let data = (0..clips)
            .map(|i| gen_synthetic(&format!("c{i}"), &SynthConfig::random(24, 24, 12, 2, &mut rng)).unwrap())
            .collect();
        let mut cfg = TrainConfig::for_model(&model);
        cfg.clip.gap_ranges = vec![crate::dataio::GapRange::new(1, 3); 2];
        cfg.mask = MaskSpec { ratios: vec![0.5, 0.5] };
        cfg.batch_size = 2;
        cfg.optimizer.base_lr = 1e-3;
        (data, model, cfg)
    }

    #[test]
    fn repetition_bookkeeping() {
        let (data, model, mut cfg) = tiny_setup(5);
        cfg.repetition = 2;
        cfg.batch_size = 10;
        let t = Trainer::new(&data, CatMae::new(model, &mut Rng::new(0, 0)).unwrap(), cfg).unwrap();
        assert_eq!(t.samples_per_epoch(), 10);
        assert_eq!(t.total_steps(), 1);
        let slots: Vec<SampleSlot> = (0..10).map(|g| t.slot(g)).collect();
        for c in 0..5 {
            assert_eq!(slots.iter().filter(|s| s.clip == c).count(), 2);
        }
        // Repeats of a loaded sequence sit next to each other and share it.
        for pair in slots.chunks(2) {
            assert_eq!(pair[0].sequence, pair[1].sequence);
            assert_eq!(pair[0].clip, pair[1].clip);
        }
        assert_eq!(t.slot(10).epoch, 1);
    }

    #[test]
    fn same_seed_same_losses() {
        let (data, model, mut cfg) = tiny_setup(2);
        cfg.steps = Some(3);
        let run = || {
            let mut t = Trainer::new(&data, CatMae::new(model.clone(), &mut Rng::new(1, 0)).unwrap(), cfg.clone()).unwrap();
            let mut out = Vec::new();
            t.run_until(3, |_, r| {
                out.push(r.total.to_bits());
                Ok(())
            })
            .unwrap();
            (out, t.into_model().params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn config_mismatches_reported() {
        let (data, model, mut cfg) = tiny_setup(1);
        cfg.batch_size = 0;
        cfg.loss.scales.push(1.0);
        let err = Trainer::new(&data, CatMae::new(model, &mut Rng::new(0, 0)).unwrap(), cfg).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("batch_size") && msg.contains("loss scales"), "{msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn metrics_log_resume_truncates() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.csv");
        let rec = |s| StepRecord { step: s, lr: 1e-4, frame_losses: vec![0.5, 0.25], total: 0.65, raw_epoch: 0.0, effective_epoch: 0.0 };
        let mut log = MetricsLog::open(&path, 2, 0).unwrap();
        for s in 1..=4 {
            log.append(&rec(s)).unwrap();
        }
        drop(log);
        let _ = MetricsLog::open(&path, 2, 2).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("step,lr,loss_frame2,loss_frame3,total_loss"));
        assert!(lines[2].starts_with("2,"));
    }
}
