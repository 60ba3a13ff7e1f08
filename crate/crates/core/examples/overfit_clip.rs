//! Memorizes a single synthetic clip with the micro model; the loss should
//! fall by more than 10x.
//!
//!     cargo run --release --example overfit_clip -- --vire 0.5

use clap::Parser;

use catmae::experiment::{overfit_smoke, OverfitSpec};

#[derive(Parser)]
struct Args {
    /// Probability of reversing a sampled sequence.
    #[arg(long, default_value_t = 0.0)]
    vire: f64,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0.75)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep the textured gradient background.
    #[arg(long)]
    textured: bool,
}

fn main() -> catmae::Result<()> {
    let a = Args::parse();
    let spec = OverfitSpec { vire_prob: a.vire, steps: a.steps, lr: a.lr, mask_ratio: a.mask_ratio, seed: a.seed, plain_background: !a.textured, ..OverfitSpec::default() };
    let r = overfit_smoke(&spec)?;
    println!(
        "{} steps in {:.1}s: loss {:.4} -> {:.4} (ratio {:.4})",
        r.steps,
        r.seconds,
        r.first_loss,
        r.final_loss,
        r.ratio()
    );
    Ok(())
}
