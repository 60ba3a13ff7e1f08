//! Trains a few steps, saves a checkpoint, resumes from it and checks that
//! the resumed run ends bit-identical to an uninterrupted one.
//!
//!     cargo run --release --example checkpoint_roundtrip -- --steps 6 --split 3

use clap::Parser;

use catmae::experiment::{overfit_setup, OverfitSpec};
use catmae::training::{load_checkpoint, save_checkpoint, Trainer};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 6)]
    steps: u64,
    #[arg(long, default_value_t = 3)]
    split: u64,
}

fn main() -> catmae::Result<()> {
    let a = Args::parse();
    let (clips, model, cfg) = overfit_setup(&OverfitSpec { steps: a.steps, ..OverfitSpec::default() })?;
    let mut whole = Trainer::new(&clips, model.clone(), cfg.clone())?;
    whole.run_until(a.steps, |_, _| Ok(()))?;

    let dir = std::env::temp_dir().join(format!("catmae-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| catmae::Error::io("creating temp dir", e))?;
    let path = dir.join("split.ckpt");
    let mut first = Trainer::new(&clips, model, cfg.clone())?;
    first.run_until(a.split, |_, _| Ok(()))?;
    save_checkpoint(&path, &first.checkpoint())?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    let mut second = Trainer::resume(&clips, load_checkpoint(&path)?, cfg)?;
    second.run_until(a.steps, |_, rec| {
        println!("resumed step {} loss {:.6}", rec.step, rec.total);
        Ok(())
    })?;
    let same = whole.checkpoint().to_bytes()? == second.checkpoint().to_bytes()?;
    println!("checkpoint of {size} bytes at step {}; resumed run identical: {same}", a.split);
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
