//! Counts word/object/confounder co-occurrences on a generated corpus and
//! prints the conditional and confounder-adjusted estimate per pair.
//!
//! cargo run --example adjusted_statistics -- [n] [rows]

use devl::causal_stats::{render_table, report, CooccurrenceTable, PairReport};
use devl::corpus::{generate, GeneratorSpec, STATS_FILE};
use std::path::Path;

fn main() -> devl::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let n = args.first().copied().unwrap_or(2000);
    let rows = args.get(1).copied().unwrap_or(12);

    let spec = GeneratorSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/planted_spec.json"))?;
    let dir = tempfile::tempdir()?;
    generate(&spec, n, dir.path())?;
    let mut table = CooccurrenceTable::new();
    table.ingest_file(&dir.path().join(STATS_FILE))?;

    let pairs: Vec<PairReport> = spec
        .nouns()
        .into_iter()
        .flat_map(|x| spec.object_classes.iter().map(move |y| PairReport { x: x.to_string(), y: y.clone() }))
        .collect();
    let all = report(&table, &pairs, None);
    print!("{}", render_table(&all[..rows.min(all.len())]));

    let planted = spec.planted_spurious_pairs();
    let leading = all.iter().take(planted.len()).filter(|r| planted.contains(&(r.x.clone(), r.y.clone()))).count();
    println!("{leading} of the top {} rows are planted spurious pairs", planted.len());
    Ok(())
}
