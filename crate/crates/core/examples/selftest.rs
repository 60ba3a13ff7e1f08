//! Runs the built-in correctness suites. `--fault` injects a sign flip into
//! one op's backward pass to show that the gradient suite names it.
//!
//!     cargo run --release --example selftest
//!     cargo run --release --example selftest -- --fault gelu

use clap::Parser;

use catmae::selftest::run_selftest;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    fault: Option<String>,
}

fn main() {
    let a = Args::parse();
    let results = run_selftest(a.seed, a.fault.as_deref());
    for r in &results {
        println!("{} {:<20} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if results.iter().any(|r| !r.passed) {
        std::process::exit(1);
    }
}
