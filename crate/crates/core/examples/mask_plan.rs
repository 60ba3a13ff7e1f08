//! Draws a mask plan and prints each frame's grid: `#` visible, `.` masked.
//!
//!     cargo run --release --example mask_plan -- --grid 8 --ratios 0.9,0.75

use clap::Parser;

use catmae::masking::{make_mask_plan, MaskSpec};
use catmae::numerics::Rng;

#[derive(Parser)]
struct Args {
    /// Patches per side.
    #[arg(long, default_value_t = 8)]
    grid: usize,
    /// One ratio per masked frame.
    #[arg(long, value_delimiter = ',', default_value = "0.95,0.95")]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> catmae::Result<()> {
    let a = Args::parse();
    let spec = MaskSpec::new(a.ratios)?;
    let plan = make_mask_plan(a.grid * a.grid, &spec, &mut Rng::keyed(a.seed, "mask", 0))?;
    plan.check()?;
    for (t, f) in plan.frames.iter().enumerate() {
        println!("frame {t}: {} visible, {} masked", f.visible.len(), f.masked.len());
        for y in 0..a.grid {
            let row: String = (0..a.grid)
                .map(|x| if f.visible.contains(&(y * a.grid + x)) { '#' } else { '.' })
                .collect();
            println!("  {row}");
        }
    }
    Ok(())
}
