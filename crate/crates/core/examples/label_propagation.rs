//! Segments labelled synthetic clips by propagating frame-0 labels through
//! encoder features, and compares with copying frame 0 forward. Loads a
//! checkpoint when given one; otherwise uses a freshly initialized model.
//!
//!     cargo run --release --example label_propagation -- --clips 4
//!     cargo run --release --example label_propagation -- --checkpoint runs/x/checkpoints/final.ckpt

use std::path::PathBuf;

use clap::Parser;

use catmae::dataio::gen_dataset;
use catmae::labelprop::{dataset_means, evaluate_dataset, evaluate_static_copy, EvalConfig};
use catmae::model::{CatMae, ModelConfig};
use catmae::numerics::Rng;
use catmae::training::load_checkpoint;

#[derive(Parser)]
struct Args {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    clips: usize,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> catmae::Result<()> {
    let a = Args::parse();
    let model = match &a.checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            CatMae::with_params(ckpt.config, ckpt.params)?
        }
        None => CatMae::new(ModelConfig::small(), &mut Rng::keyed(a.seed, "init", 0))?,
    };
    let clips = gen_dataset("eval", a.clips, model.config.image_size, a.frames, 3, a.seed)?;
    let mut cfg = EvalConfig::default();
    cfg.propagation.k = a.k;
    cfg.propagation.temperature = a.temperature;
    let ours = evaluate_dataset(&model, &clips, &cfg)?;
    let copy = evaluate_static_copy(&clips, cfg.boundary_tolerance)?;
    for (r, c) in ours.iter().zip(&copy) {
        println!("{}: J&F {:.4} (static copy {:.4})", r.clip_id, r.score.jf_mean, c.score.jf_mean);
    }
    let (j, f, jf) = dataset_means(&ours);
    let (cj, cf, cjf) = dataset_means(&copy);
    println!("propagation  J {j:.4}  F {f:.4}  J&F {jf:.4}");
    println!("static copy  J {cj:.4}  F {cf:.4}  J&F {cjf:.4}");
    Ok(())
}
