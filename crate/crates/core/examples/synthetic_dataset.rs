//! Writes labelled synthetic clips to disk, reads them back and summarizes them.
//!
//!     cargo run --release --example synthetic_dataset -- --out /tmp/synth --clips 4

use std::path::PathBuf;

use clap::Parser;

use catmae::dataio::clip::write_manifest;
use catmae::dataio::{gen_dataset, load_dataset};

#[derive(Parser)]
struct Args {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    clips: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    max_shapes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> catmae::Result<()> {
    let a = Args::parse();
    let clips = gen_dataset("clip", a.clips, a.size, a.frames, a.max_shapes, a.seed)?;
    for c in &clips {
        c.save(&a.out)?;
    }
    write_manifest(&a.out, &clips.iter().map(|c| c.id.clone()).collect::<Vec<_>>())?;
    let back = load_dataset(&a.out)?;
    assert_eq!(back.len(), clips.len());
    for c in &back {
        let labels = c.labels.as_ref().map_or(0, |l| l.iter().map(|m| m.max_label()).max().unwrap_or(0));
        println!("{}: {} frames of {}x{}, {} objects", c.id, c.len(), c.width(), c.height(), labels);
    }
    println!("wrote {} clips to {}", back.len(), a.out.display());
    Ok(())
}
