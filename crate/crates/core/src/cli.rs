//! Command-line front-end: `gen-data`, `pretrain`, `eval-seg`, `viz-attn`, `selftest`.
//!
//! Exit codes: 0 ok, 1 usage or configuration, 2 data, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataio::clip::{load_clip, load_dataset, read_manifest, write_manifest};
use crate::dataio::image::save_gray_png;
use crate::dataio::synth::gen_dataset;
use crate::dataio::{sample_sequence, GapRange};
use crate::error::{Error, Result};
use crate::labelprop::{
    dataset_means, save_predictions, score_clip, scores_csv, segment_clip, static_copy, ClipResult, EvalConfig,
};
use crate::masking::{make_mask_plan, MaskSpec};
use crate::model::{extract_cross_attention, CatMae};
use crate::numerics::Rng;
use crate::selftest::run_selftest;
use crate::training::{load_checkpoint, train_to_dir, Trainer};

#[derive(Debug, Parser)]
#[command(name = "catmae", version, about = "Masked video autoencoder pre-training and label-propagation evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic moving-shape clips with label masks.
    GenData(GenDataArgs),
    /// Pre-train from a TOML config.
    Pretrain(PretrainArgs),
    /// Segment labelled clips by propagating first-frame masks.
    EvalSeg(EvalSegArgs),
    /// Write decoder cross-attention heatmaps for one masked query patch.
    VizAttn(VizAttnArgs),
    /// Run the gradient, causality, masking and metric suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub clips: usize,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub max_shapes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// TOML run config; defaults apply to every key it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Frames per sample (N); mask ratios, loss scales and gaps follow unless set.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalSegArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root with a clip manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for scores.csv, summary.json and predicted masks.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run config supplying the `[eval]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub radius: Option<usize>,
    /// Also score the frame-0-labels-everywhere baseline.
    #[arg(long)]
    pub static_copy: bool,
    /// Write predicted masks as PNGs.
    #[arg(long)]
    pub save_masks: bool,
}

#[derive(Debug, Args)]
pub struct VizAttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Clip directory.
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Masked query patch index in the target frame, or `auto`.
    #[arg(long, default_value = "auto")]
    pub query: String,
    /// Reconstructed frame whose query is shown (default: the last).
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 4)]
    pub gap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flip the sign of this op's backward rule (mutation check).
    #[arg(long)]
    pub inject_fault: Option<String>,
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| 0),
        Command::Pretrain(a) => cmd_pretrain(&a).map(|_| 0),
        Command::EvalSeg(a) => cmd_eval_seg(&a).map(|_| 0),
        Command::VizAttn(a) => cmd_viz_attn(&a).map(|_| 0),
        Command::Selftest(a) => Ok(if cmd_selftest(&a) { 0 } else { 3 }),
    }
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |e| Error::Io { context, source: e }
}

/// Writes the clips under `out/<id>/` plus the `clips.txt` manifest.
pub fn cmd_gen_data(a: &GenDataArgs) -> Result<Vec<String>> {
    if a.out.is_dir() {
        let non_empty = fs::read_dir(&a.out).map_err(io_err(format!("reading {}", a.out.display())))?.next().is_some();
        if non_empty && !a.force {
            return Err(Error::Config(format!("{} is not empty; pass --force to write into it", a.out.display())));
        }
    }
    fs::create_dir_all(&a.out).map_err(io_err(format!("creating {}", a.out.display())))?;
    let clips = gen_dataset("clip", a.clips, a.size, a.frames, a.max_shapes, a.seed)?;
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    for c in &clips {
        c.save(&a.out)?;
    }
    write_manifest(&a.out, &ids)?;
    log::info!("wrote {} clips to {}", ids.len(), a.out.display());
    Ok(ids)
}

/// Applies file values then flags; returns the resolved config.
pub fn pretrain_config(a: &PretrainArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = a.frames {
        if n != c.model.n_frames {
            // Per-frame lists no longer match; fall back to their defaults unless
            // their length already fits.
            c.model.n_frames = n;
            if c.sampling.gaps.len() + 1 != n {
                c.sampling.gaps.clear();
            }
            if c.mask.ratios.len() + 1 != n {
                c.mask.ratios.clear();
            }
            if c.loss.scales.len() + 1 != n {
                c.loss.scales.clear();
            }
        }
    }
    if let Some(s) = a.steps {
        c.train.steps = Some(s);
    }
    if let Some(s) = a.seed {
        c.train.seed = s;
    }
    if let Some(d) = &a.data {
        c.paths.data = d.clone();
    }
    if let Some(r) = &a.run_dir {
        c.paths.run_dir = r.clone();
    }
    let c = c.resolved();
    c.validate()?;
    Ok(c)
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<PathBuf> {
    let cfg = pretrain_config(a)?;
    let data = load_dataset(&cfg.paths.data)?;
    let run_dir = cfg.paths.run_dir.clone();
    cfg.echo(&run_dir)?;
    let train_cfg = cfg.train_config();
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if ckpt.config != cfg.model {
                return Err(Error::Config(format!("checkpoint {} was trained with a different model config", p.display())));
            }
            Trainer::resume(&data, ckpt, train_cfg)?
        }
        None => Trainer::new(&data, CatMae::new(cfg.model.clone(), &mut Rng::keyed(cfg.train.seed, "init", 0))?, train_cfg)?,
    };
    log::info!(
        "training {} steps ({:.2} steps per raw epoch) from step {}",
        trainer.total_steps(),
        trainer.steps_per_epoch(),
        trainer.step()
    );
    train_to_dir(&mut trainer, &run_dir)?;
    Ok(run_dir)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub videos: usize,
    pub skipped: Vec<String>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub static_copy: Option<[f64; 3]>,
}

pub fn eval_config(a: &EvalSegArgs) -> Result<EvalConfig> {
    let mut e = match &a.config {
        Some(p) => RunConfig::load(p)?.eval,
        None => EvalConfig::default(),
    };
    let p = &mut e.propagation;
    p.k = a.k.unwrap_or(p.k);
    p.temperature = a.temperature.unwrap_or(p.temperature);
    p.context = a.context.unwrap_or(p.context);
    p.radius = a.radius.unwrap_or(p.radius);
    p.validate()?;
    Ok(e)
}

pub fn cmd_eval_seg(a: &EvalSegArgs) -> Result<EvalSummary> {
    let cfg = eval_config(a)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = CatMae::with_params(ckpt.config, ckpt.params)?;
    fs::create_dir_all(&a.out).map_err(io_err(format!("creating {}", a.out.display())))?;
    let mut results = Vec::new();
    let mut baseline = Vec::new();
    let mut skipped = Vec::new();
    for id in read_manifest(&a.data)? {
        let clip = load_clip(&a.data.join(&id))?;
        if clip.labels.is_none() {
            log::warn!("skipping {id}: no labels");
            skipped.push(id);
            continue;
        }
        let pred = segment_clip(&model, &clip, &cfg)?;
        results.push(ClipResult { clip_id: id.clone(), score: score_clip(&clip, &pred, cfg.boundary_tolerance)? });
        if a.save_masks {
            save_predictions(&a.out.join("masks"), &id, &pred)?;
        }
        if a.static_copy {
            let s = score_clip(&clip, &static_copy(&clip)?, cfg.boundary_tolerance)?;
            baseline.push(ClipResult { clip_id: id, score: s });
        }
    }
    if results.is_empty() {
        return Err(Error::Metrics("no labelled clips to evaluate".into()));
    }
    let write = |name: &str, text: String| {
        let p = a.out.join(name);
        fs::write(&p, text).map_err(io_err(format!("writing {}", p.display())))
    };
    write("scores.csv", scores_csv(&results))?;
    let (j, f, jf) = dataset_means(&results);
    let static_means = a.static_copy.then(|| {
        let (j, f, jf) = dataset_means(&baseline);
        [j, f, jf]
    });
    if a.static_copy {
        write("scores_static_copy.csv", scores_csv(&baseline))?;
    }
    let summary = EvalSummary { videos: results.len(), skipped, j_mean: j, f_mean: f, jf_mean: jf, static_copy: static_means };
    write("summary.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    println!("J {j:.4}  F {f:.4}  J&F {jf:.4}  ({} videos)", summary.videos);
    if let Some([sj, sf, sjf]) = static_means {
        println!("static copy: J {sj:.4}  F {sf:.4}  J&F {sjf:.4}");
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionDump {
    pub query: usize,
    pub target_frame: usize,
    pub frame_indices: Vec<usize>,
    /// Unscaled head-averaged weights per context frame (`null` for masked patches).
    pub maps: Vec<(usize, Vec<Option<f64>>)>,
    pub total: f64,
}

pub fn cmd_viz_attn(a: &VizAttnArgs) -> Result<AttentionDump> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = CatMae::with_params(ckpt.config, ckpt.params)?;
    let c = model.config.clone();
    let clip = load_clip(&a.clip)?;
    let mut spec = crate::dataio::ClipSpec::default_for(c.image_size);
    spec.n_frames = c.n_frames;
    spec.gap_ranges = vec![GapRange::new(a.gap, a.gap); c.n_frames - 1];
    let seq = sample_sequence(&clip, &spec, &mut Rng::keyed(a.seed, "viz-sequence", 0))?;
    if (seq.frames[0].width, seq.frames[0].height) != (c.image_size, c.image_size) {
        return Err(Error::Config(format!(
            "clip frames are {}x{}, model expects {}x{}",
            seq.frames[0].width, seq.frames[0].height, c.image_size, c.image_size
        )));
    }
    let plan = make_mask_plan(
        c.num_patches(),
        &MaskSpec::new(vec![a.mask_ratio; c.n_frames - 1])?,
        &mut Rng::keyed(a.seed, "viz-mask", 0),
    )?;
    let target = a.target.unwrap_or(c.n_frames - 1);
    if target == 0 || target >= c.n_frames {
        return Err(Error::Config(format!("target frame must lie in 1..{}", c.n_frames)));
    }
    let masked = &plan.frames[target].masked;
    let query = if a.query == "auto" {
        masked[masked.len() / 2]
    } else {
        let q: usize = a.query.parse().map_err(|_| Error::Config(format!("--query must be an index or auto, got {}", a.query)))?;
        if !masked.contains(&q) {
            return Err(Error::Config(format!(
                "query patch {q} is visible in frame {target} under the sampled plan; pick a masked patch or use --query auto"
            )));
        }
        q
    };
    let maps = extract_cross_attention(&model, &seq.frames, &plan, query, target)?;
    fs::create_dir_all(&a.out).map_err(io_err(format!("creating {}", a.out.display())))?;
    let g = c.grid();
    let max = maps.frames.iter().flat_map(|(_, m)| m.iter().flatten()).fold(0.0f64, |m, &v| m.max(v));
    for (frame, cells) in &maps.frames {
        let pixels: Vec<u8> = cells
            .iter()
            .map(|v| if max > 0.0 { (v.unwrap_or(0.0) / max * 255.0).round() as u8 } else { 0 })
            .collect();
        save_gray_png(&a.out.join(format!("attn_t{target}_q{query}_frame{frame}.png")), g, g, &pixels)?;
    }
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_png(&a.out.join(format!("input_frame{i}.png")))?;
    }
    let dump = AttentionDump {
        query,
        target_frame: target,
        frame_indices: seq.indices.clone(),
        total: maps.total(),
        maps: maps.frames,
    };
    let p = a.out.join("attention.json");
    fs::write(&p, serde_json::to_string_pretty(&dump).expect("dump serializes")).map_err(io_err(format!("writing {}", p.display())))?;
    println!("query {query} of frame {target}: attention mass {:.9}", dump.total);
    Ok(dump)
}

/// Prints one line per suite; true iff all pass.
pub fn cmd_selftest(a: &SelftestArgs) -> bool {
    let results = run_selftest(a.seed, a.inject_fault.as_deref());
    for r in &results {
        println!("{} {:<20} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    results.iter().all(|r| r.passed)
}

/// Path of the newest checkpoint in `<run_dir>/checkpoints/`.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(run_dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    files.pop()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        std::iter::once("catmae").chain(s.split_whitespace()).map(String::from).collect()
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(main_with_args(args("frobnicate")), 1);
        assert_eq!(main_with_args(args("gen-data")), 1);
        assert_eq!(main_with_args(args("--help")), 0);
    }

    #[test]
    fn gen_data_is_reproducible_and_guards_output() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |out: &Path, force| GenDataArgs {
            out: out.to_path_buf(),
            clips: 2,
            frames: 5,
            size: 16,
            max_shapes: 2,
            seed: 3,
            force,
        };
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ids = cmd_gen_data(&mk(&a, false)).unwrap();
        cmd_gen_data(&mk(&b, false)).unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(fs::read_dir(a.join(&ids[0])).unwrap().count(), 5 + 1);
        for id in &ids {
            for i in 0..5 {
                let name = crate::dataio::clip::frame_name(i);
                assert_eq!(fs::read(a.join(id).join(&name)).unwrap(), fs::read(b.join(id).join(&name)).unwrap());
            }
        }
        let err = cmd_gen_data(&mk(&a, false)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        cmd_gen_data(&mk(&a, true)).unwrap();
        assert_eq!(load_dataset(&a).unwrap().len(), 2);
    }

    #[test]
    fn frames_flag_extends_per_frame_lists() {
        let a = PretrainArgs { config: None, resume: None, frames: Some(5), steps: None, seed: None, data: None, run_dir: None };
        let c = pretrain_config(&a).unwrap();
        assert_eq!(c.model.n_frames, 5);
        assert_eq!(c.train_config().loss.scales.len(), 4);
        assert_eq!(c.mask.ratios, vec![0.95; 4]);
    }

    #[test]
    fn selftest_fault_is_reported() {
        let results = run_selftest(0, Some("gelu"));
        let ops = results.iter().find(|r| r.name == "op gradients").unwrap();
        assert!(!ops.passed);
        assert!(ops.detail.contains("gelu"));
    }
}
