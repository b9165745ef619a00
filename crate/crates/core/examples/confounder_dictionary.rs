//! Builds the vision and language confounder dictionaries from a corpus and
//! shows the attention weights one intervention head puts on them.
//!
//! cargo run --release --example confounder_dictionary -- [n] [seed]

use devl::cli::{load_pairs, RunConfig};
use devl::corpus::{generate, GeneratorSpec, Manifest};
use devl::deconfound::Stream;
use devl::numerics::{Session, Tape};
use devl::pretraining::Pretrainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() -> devl::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let n = args.first().copied().unwrap_or(256) as usize;
    let seed = args.get(1).copied().unwrap_or(0);

    let spec = GeneratorSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("data/planted_spec.json"))?;
    let dir = tempfile::tempdir()?;
    generate(&spec, n, dir.path())?;
    let manifest = Manifest::load(dir.path())?;
    let pairs = load_pairs(dir.path(), &manifest, None)?;

    let mut cfg = RunConfig::default();
    cfg.apply_preset("D-VL")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tr = Pretrainer::new(
        cfg.model_for(&manifest)?,
        cfg.masking.clone(),
        cfg.objectives.clone(),
        &cfg.designs,
        cfg.training.options.clone(),
        cfg.training.adam,
        &mut rng,
    )?;
    tr.build_dictionaries(&pairs, cfg.dictionaries.min_count)?;

    let vision = tr.dictionaries.vision.as_ref().expect("vision head present");
    println!("vision dictionary: {} classes, width {}", vision.len(), vision.feature_dim());
    for e in &vision.entries {
        println!("  {:<10} P(z) = {:.4}", manifest.object_classes[e.class_id], e.prior);
    }
    let language = tr.dictionaries.language.as_ref().expect("language head present");
    println!("language dictionary: {} nouns, width {}", language.len(), language.feature_dim());
    for e in &language.entries {
        println!("  {:<10} P(z) = {:.4}", manifest.vocab.word(e.class_id).unwrap_or("?"), e.prior);
    }

    // Weights of the vision head for each region of the first pair, with the
    // region's own class excluded.
    let (head, _) = tr
        .interventions
        .iter()
        .find(|(h, _)| h.needs_vision_dictionary())
        .expect("vision head present");
    let (tokens, regions) = &pairs[0];
    let tape = Tape::new();
    let s = Session::new(&tape, &tr.store);
    let out = tr.model.forward(&s, tokens, regions)?;
    let rows: Vec<usize> = (1..regions.len()).collect();
    let queries = out.vis_final.gather_rows(&rows)?;
    let exclude: Vec<Option<usize>> = rows.iter().map(|&i| vision.index_of(regions.class_of(i))).collect();
    let view = head.dictionary_view(&s, &tr.dictionaries)?;
    let alpha = head.alpha_weights(&s, &queries, Stream::Vision, &view, &exclude)?;
    let alpha = alpha.value();
    println!("alpha for the regions of the first pair (untrained head):");
    for (r, &i) in rows.iter().enumerate() {
        let w: Vec<String> = alpha.row(r).iter().map(|a| format!("{a:.3}")).collect();
        println!("  {:<10} {}", manifest.object_classes[regions.class_of(i)], w.join(" "));
    }
    Ok(())
}
