//! Pre-trains from a TOML config on freshly generated clips and writes a run
//! directory (resolved config, metrics.csv, checkpoints).
//!
//!     cargo run --release --example pretrain_config -- --out /tmp/run --steps 20

use std::path::PathBuf;

use clap::Parser;

use catmae::config::RunConfig;
use catmae::dataio::gen_dataset;
use catmae::model::CatMae;
use catmae::numerics::Rng;
use catmae::training::{train_to_dir, Trainer};

const CONFIG: &str = r#"
[model]
image_size = 32
patch_size = 8
enc_dim = 32
enc_depth = 2
enc_heads = 2
dec_dim = 32
dec_depth = 1
dec_heads = 2

[sampling]
gaps = [[1, 3], [1, 3]]

[mask]
ratios = [0.9, 0.9]

[train]
batch_size = 2
checkpoint_every = 10

[optimizer]
base_lr = 1e-3
"#;

#[derive(Parser)]
struct Args {
    #[arg(long)]
    out: PathBuf,
    /// TOML file to use instead of the built-in config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    steps: u64,
}

fn main() -> catmae::Result<()> {
    let a = Args::parse();
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml(CONFIG)?,
    };
    cfg.train.steps = Some(a.steps);
    let cfg = cfg.resolved();
    cfg.validate()?;
    cfg.echo(&a.out)?;
    let clips = gen_dataset("train", 8, cfg.model.image_size, 12, 2, cfg.train.seed)?;
    let model = CatMae::new(cfg.model.clone(), &mut Rng::keyed(cfg.train.seed, "init", 0))?;
    let mut trainer = Trainer::new(&clips, model, cfg.train_config())?;
    let records = train_to_dir(&mut trainer, &a.out)?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!("{} steps: loss {:.4} -> {:.4}", records.len(), first.total, last.total);
    }
    println!("run directory {}", a.out.display());
    Ok(())
}
