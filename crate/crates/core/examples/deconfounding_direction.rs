//! Trains baseline and D-VLC on the planted-confounder corpus and compares
//! the masked-object probability each assigns to the planted spurious pairs.
//!
//! cargo run --release --example deconfounding_direction -- [n] [steps] [seed]

use devl::causal_stats::CooccurrenceTable;
use devl::cli::{cmd_pretrain, probe_pair, RunConfig};
use devl::corpus::{generate, GeneratorSpec, STATS_FILE};
use std::path::Path;

fn main() -> devl::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let n = args.first().copied().unwrap_or(512) as usize;
    let steps = args.get(1).copied().unwrap_or(300);
    let seed = args.get(2).copied().unwrap_or(7);

    let spec = GeneratorSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/planted_spec.json"))?;
    let dir = tempfile::tempdir()?;
    let corpus = dir.path().join("corpus");
    let manifest = generate(&spec, n, &corpus)?;
    let mut table = CooccurrenceTable::new();
    table.ingest_file(&corpus.join(STATS_FILE))?;

    let mut trained = Vec::new();
    for preset in ["baseline", "D-VLC"] {
        let mut cfg = RunConfig::default();
        cfg.paths.corpus = corpus.clone();
        cfg.paths.checkpoint = dir.path().join(format!("{preset}.ckpt"));
        cfg.paths.metrics = dir.path().join(format!("{preset}.jsonl"));
        cfg.apply_overrides(Some(preset), Some(steps), Some(seed), None, None)?;
        trained.push(cmd_pretrain(&cfg, &mut std::io::sink())?);
    }

    let pairs = spec.planted_spurious_pairs();
    let mut lower = 0;
    println!("{:<12} {:<10} {:>10} {:>10}", "x", "y", "baseline", "D-VLC");
    for (x, y) in &pairs {
        let b = probe_pair(&trained[0], &manifest, &table, x, y)?;
        let d = probe_pair(&trained[1], &manifest, &table, x, y)?;
        if d.p_present < b.p_present {
            lower += 1;
        }
        println!("{x:<12} {y:<10} {:>10.4} {:>10.4}", b.p_present, d.p_present);
    }
    println!("D-VLC lower on {lower}/{} planted pairs", pairs.len());
    Ok(())
}
