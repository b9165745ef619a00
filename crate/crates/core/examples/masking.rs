//! Applies the pretraining masking policy to one corpus pair and shows what
//! each word and region is turned into.
//!
//! cargo run --example masking -- [seed]

use devl::cli::load_pairs;
use devl::corpus::{generate, GeneratorSpec};
use devl::pretraining::{apply_masking, MaskingPolicy};
use devl::two_stream::{RegionMask, TokenMask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() -> devl::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(3, |a| a.parse().expect("integer argument"));
    let spec = GeneratorSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/planted_spec.json"))?;
    let dir = tempfile::tempdir()?;
    let manifest = generate(&spec, 4, dir.path())?;
    let pairs = load_pairs(dir.path(), &manifest, None)?;
    let (tokens, regions) = &pairs[0];

    // A high rate so a single pair shows every outcome.
    let policy = MaskingPolicy { lang_mask_rate: 0.6, vis_mask_rate: 0.6, ..MaskingPolicy::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, r) = apply_masking(tokens, regions, &policy, manifest.vocab.len(), &mut rng)?;

    for (i, &id) in t.ids().iter().enumerate() {
        let word = manifest.vocab.word(id).unwrap_or("?");
        let what = match t.states()[i] {
            TokenMask::Unmasked => "-".to_string(),
            TokenMask::ToMask => "[MASK]".to_string(),
            TokenMask::Kept => "kept, predicted".to_string(),
            TokenMask::Random(j) => format!("replaced by {}", manifest.vocab.word(j).unwrap_or("?")),
        };
        println!("word {i:>2} {word:<12} {what}");
    }
    for i in 0..r.len() {
        let what = match r.states()[i] {
            RegionMask::Unmasked => "-",
            RegionMask::Masked => "mask embedding",
            RegionMask::KeptOriginal => "kept, predicted",
        };
        let label = if i == 0 { "global".to_string() } else { manifest.object_classes[r.class_of(i)].clone() };
        println!("region {i:>2} {label:<12} {what}");
    }
    Ok(())
}
