//! Trains every preset on a synthetic corpus and prints the total loss
//! averaged over consecutive 50-step windows.
//!
//! cargo run --release --example training_curves -- [n] [steps] [seed] [lr]

use devl::cli::{cmd_pretrain, RunConfig};
use devl::corpus::{generate, GeneratorSpec};
use devl::pretraining::{LossReport, PRESETS};
use std::path::Path;
use std::time::Instant;

const WINDOW: usize = 50;

fn main() -> devl::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).map_or(default, |a| a.parse().expect("numeric argument"));
    let n = arg(0, 256.0) as usize;
    let steps = arg(1, 300.0) as u64;
    let seed = arg(2, 0.0) as u64;

    let spec = GeneratorSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/planted_spec.json"))?;
    let dir = tempfile::tempdir()?;
    let corpus = dir.path().join("corpus");
    generate(&spec, n, &corpus)?;

    for preset in PRESETS {
        let mut cfg = RunConfig::default();
        cfg.paths.corpus = corpus.clone();
        cfg.paths.checkpoint = dir.path().join("model.ckpt");
        cfg.paths.metrics = dir.path().join("metrics.jsonl");
        cfg.apply_overrides(Some(preset), Some(steps), Some(seed), None, None)?;
        cfg.training.adam.lr = arg(3, cfg.training.adam.lr);
        let start = Instant::now();
        cmd_pretrain(&cfg, &mut std::io::sink())?;
        let totals: Vec<f64> = std::fs::read_to_string(&cfg.paths.metrics)?
            .lines()
            .map(|l| serde_json::from_str::<LossReport>(l).map(|r| r.total()))
            .collect::<Result<_, _>>()?;
        let windows: Vec<f64> = totals.chunks(WINDOW).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let decreasing = windows.windows(2).all(|w| w[1] < w[0]);
        let shown: Vec<String> = windows.iter().map(|w| format!("{w:.3}")).collect();
        println!(
            "{preset:<8} {:>6.1}s  decreasing={decreasing:<5}  {}",
            start.elapsed().as_secs_f64(),
            shown.join(" ")
        );
    }
    Ok(())
}
