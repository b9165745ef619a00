//! Generates a small planted-confounder corpus and prints a few records
//! next to the latent confounder that produced them.
//!
//! cargo run --example synth_corpus -- [n]

use devl::corpus::{generate, read_jsonl, GeneratorSpec, PairRecord, LATENTS_FILE, CORPUS_FILE};
use std::path::Path;

#[derive(serde::Deserialize)]
struct Latent {
    latents: Vec<usize>,
}

fn main() -> devl::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(8, |a| a.parse().expect("integer argument"));
    let spec = GeneratorSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/planted_spec.json"))?;
    let dir = tempfile::tempdir()?;
    let manifest = generate(&spec, n, dir.path())?;
    println!(
        "{} records, {} words, {} object classes, features of width {}",
        manifest.n,
        manifest.vocab.len(),
        manifest.object_classes.len(),
        manifest.feature_dim
    );

    let records: Vec<PairRecord> = read_jsonl(&dir.path().join(CORPUS_FILE))?;
    let latents: Vec<Latent> = read_jsonl(&dir.path().join(LATENTS_FILE))?;
    for (r, l) in records.iter().zip(&latents).take(8) {
        let z: Vec<&str> = l.latents.iter().map(|&i| spec.confounders[i].name.as_str()).collect();
        let objects: Vec<&str> = r
            .regions
            .iter()
            .map(|g| {
                let best = (0..g.soft_label.len()).max_by(|&a, &b| g.soft_label[a].total_cmp(&g.soft_label[b])).unwrap();
                manifest.object_classes[best].as_str()
            })
            .collect();
        println!("[{}] {:<40} objects: {}", z.join(","), r.sentence.join(" "), objects.join(" "));
    }
    println!("planted spurious pairs: {}", spec.planted_spurious_pairs().len());
    Ok(())
}
