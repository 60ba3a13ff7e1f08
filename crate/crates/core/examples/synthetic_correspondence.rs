//! Pre-trains the small model on synthetic moving shapes and compares label
//! propagation with an untrained network and with copying the first mask.
//!
//!     cargo run --release --example synthetic_correspondence -- --steps 2000 --save /tmp/desk.ckpt
//!     cargo run --release --example synthetic_correspondence -- --load /tmp/desk.ckpt

use std::path::PathBuf;

use clap::Parser;

use catmae::experiment::{run_synthetic, SyntheticRun};
use catmae::labelprop::{dataset_means, evaluate_dataset, EvalConfig};
use catmae::model::CatMae;
use catmae::probe::ProbeResult;
use catmae::training::{load_checkpoint, save_checkpoint};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train_clips: usize,
    #[arg(long, default_value_t = 20)]
    eval_clips: usize,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    mask_ratio: f64,
    /// Print every n-th step.
    #[arg(long, default_value_t = 50)]
    every: u64,
    /// Write the trained model here.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Skip training: score and probe this checkpoint instead.
    #[arg(long)]
    load: Option<PathBuf>,
}

fn print_probe(label: &str, p: &ProbeResult) {
    println!(
        "{label} probe: {}/{} queries hit their shape ({:.3}), chance {:.3}, row error {:.1e}",
        p.hits,
        p.queries,
        p.hit_rate(),
        p.chance,
        p.max_row_error
    );
}

fn main() -> catmae::Result<()> {
    let a = Args::parse();
    let run = SyntheticRun {
        seed: a.seed,
        train_clips: a.train_clips,
        eval_clips: a.eval_clips,
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        mask_ratio: a.mask_ratio,
        ..SyntheticRun::default()
    };
    if let Some(path) = &a.load {
        let ckpt = load_checkpoint(path)?;
        let model = CatMae::with_params(ckpt.config, ckpt.params)?;
        let eval = run.eval_clips()?;
        let (j, f, jf) = dataset_means(&evaluate_dataset(&model, &eval, &EvalConfig::default())?);
        println!("J {j:.4}  F {f:.4}  J&F {jf:.4}");
        print_probe("trained", &run.probe(&model, &eval)?);
        return Ok(());
    }
    let (report, ckpt) = run_synthetic(&run, |r| {
        if r.step % a.every == 0 || r.step == 1 {
            println!("step {:6}  lr {:.2e}  loss {:.4}", r.step, r.lr, r.total);
        }
    })?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    print_probe("untrained", &report.untrained_probe);
    print_probe("trained", &report.probe);
    if let Some(path) = &a.save {
        save_checkpoint(path, &ckpt)?;
    }
    Ok(())
}
