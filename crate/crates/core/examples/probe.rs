//! Trains a short run and asks the masked-object head which object it
//! expects next to a word, with and without the word in the sentence.
//!
//! cargo run --release --example probe -- [steps] [preset]

use devl::causal_stats::CooccurrenceTable;
use devl::cli::{cmd_pretrain, probe_pair, RunConfig};
use devl::corpus::{generate, GeneratorSpec, STATS_FILE};
use std::path::Path;

fn main() -> devl::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(200, |a| a.parse().expect("integer argument"));
    let preset = std::env::args().nth(2).unwrap_or_else(|| "baseline".to_string());

    let spec = GeneratorSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/planted_spec.json"))?;
    let dir = tempfile::tempdir()?;
    let corpus = dir.path().join("corpus");
    let manifest = generate(&spec, 256, &corpus)?;
    let mut table = CooccurrenceTable::new();
    table.ingest_file(&corpus.join(STATS_FILE))?;

    let mut cfg = RunConfig::default();
    cfg.paths.corpus = corpus;
    cfg.paths.checkpoint = dir.path().join("model.ckpt");
    cfg.paths.metrics = dir.path().join("metrics.jsonl");
    cfg.apply_overrides(Some(&preset), Some(steps), None, None, None)?;
    let trainer = cmd_pretrain(&cfg, &mut std::io::stdout())?;

    println!("{:<10} {:<10} {:>8} {:>8} {:>8} {:>8}", "x", "y", "present", "ablated", "P(y|x)", "P(y|do x)");
    for (x, y) in spec.planted_spurious_pairs().iter().take(10) {
        let row = probe_pair(&trainer, &manifest, &table, x, y)?;
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{x:<10} {y:<10} {:>8.3} {:>8.3} {:>8} {:>8}",
            row.p_present,
            row.p_ablated,
            f(row.conditional),
            f(row.interventional)
        );
    }
    Ok(())
}
