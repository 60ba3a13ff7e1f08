//! Prints the decoder's cross-attention of one masked patch of the last frame
//! over the earlier frames, as a grid of per-mille weights (`--` where the
//! patch was not part of the context).
//!
//!     cargo run --release --example cross_attention -- --seed 3

use std::path::PathBuf;

use clap::Parser;

use catmae::dataio::{gen_dataset, sample_sequence, ClipSpec, GapRange};
use catmae::masking::{make_mask_plan, MaskSpec};
use catmae::model::{extract_cross_attention, CatMae, ModelConfig};
use catmae::numerics::Rng;
use catmae::training::load_checkpoint;

#[derive(Parser)]
struct Args {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    mask_ratio: f64,
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
    let c = model.config.clone();
    let clip = gen_dataset("c", 1, c.image_size, 16, 3, a.seed)?.remove(0);
    let mut spec = ClipSpec::default_for(c.image_size);
    spec.n_frames = c.n_frames;
    spec.gap_ranges = vec![GapRange::new(2, 4); c.n_frames - 1];
    let seq = sample_sequence(&clip, &spec, &mut Rng::keyed(a.seed, "sequence", 0))?;
    let plan = make_mask_plan(
        c.num_patches(),
        &MaskSpec::new(vec![a.mask_ratio; c.n_frames - 1])?,
        &mut Rng::keyed(a.seed, "mask", 0),
    )?;
    let target = c.n_frames - 1;
    let masked = &plan.frames[target].masked;
    let query = masked[masked.len() / 2];
    let maps = extract_cross_attention(&model, &seq.frames, &plan, query, target)?;
    let g = c.grid();
    println!("query patch {query} (row {}, col {}) of frame {target}, total mass {:.9}", query / g, query % g, maps.total());
    for (frame, cells) in &maps.frames {
        println!("context frame {frame}:");
        for y in 0..g {
            let row: Vec<String> = (0..g)
                .map(|x| cells[y * g + x].map_or("  --".into(), |w| format!("{:4.0}", w * 1000.0)))
                .collect();
            println!("  {}", row.join(""));
        }
    }
    Ok(())
}
