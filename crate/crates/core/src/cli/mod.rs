//! The `devl` command surface: `synth`, `pretrain`, `stats` and `probe`.
//!
//! Exit codes: 0 on success, 2 on validation or input errors, 3 on numeric
//! failure during training.

mod config;
mod probe;

pub use config::{DictionaryConfig, Paths, RunConfig, TrainingConfig, SEED_ENV};
pub use probe::{masked_object_distribution, probe_pair, ProbeRow, PROBE_BOX};

use crate::causal_stats::{render_table, report, CooccurrenceTable, PairReport};
use crate::corpus::{generate, load_corpus, read_jsonl, GeneratorSpec, Manifest, RecordShape, CORPUS_FILE, STATS_FILE};
use crate::error::{Error, Result};
use crate::numerics::{load_checkpoint, save_checkpoint};
use crate::pretraining::{LossReport, Pretrainer};
use crate::two_stream::{RegionSequence, TokenSequence};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "devl", version, about = "Deconfounded two-stream pretraining at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus from a generator spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build dictionaries, train, write a checkpoint and JSONL metrics.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// One of baseline, A-V, A-VL, B-V, C-V, D-V, D-VL, D-VLC.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Conditional vs. adjusted co-occurrence statistics.
    Stats {
        /// JSON Lines of {"x": [...], "y": [...], "z": [...]}.
        #[arg(long)]
        corpus: PathBuf,
        /// JSON Lines of {"x": ..., "y": ...}.
        #[arg(long)]
        pairs: PathBuf,
        /// Restrict the adjustment to these confounders (comma separated).
        #[arg(long, value_delimiter = ',')]
        z_vocab: Option<Vec<String>>,
        /// Write report.json and report.txt here as well as printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked object prediction with a word present vs. ablated.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory (manifest, stats).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Runs a parsed command, printing to stdout; returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Synth { spec, n, out: dir } => cmd_synth(&spec, n, &dir, &mut out),
        Command::Pretrain {
            config,
            preset,
            steps,
            seed,
            checkpoint,
            metrics,
        } => RunConfig::load(&config).and_then(|mut cfg| {
            cfg.apply_overrides(preset.as_deref(), steps, seed, checkpoint, metrics)?;
            cmd_pretrain(&cfg, &mut out).map(|_| ())
        }),
        Command::Stats {
            corpus,
            pairs,
            z_vocab,
            out: dir,
        } => cmd_stats(&corpus, &pairs, z_vocab, dir.as_deref(), &mut out),
        Command::Probe {
            checkpoint,
            corpus,
            pairs,
            out: dir,
        } => cmd_probe(&checkpoint, &corpus, &pairs, dir.as_deref(), &mut out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("devl: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_synth(spec: &Path, n: usize, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let spec = GeneratorSpec::load(spec)?;
    let manifest = generate(&spec, n, out_dir)?;
    for p in manifest.paths(out_dir) {
        writeln!(out, "{}", p.display())?;
    }
    Ok(())
}

/// Loads a corpus directory as encoder inputs.
pub fn load_pairs(dir: &Path, manifest: &Manifest, seed: Option<u64>) -> Result<Vec<(TokenSequence, RegionSequence)>> {
    let shape = RecordShape {
        feat_dim: manifest.feature_dim,
        num_classes: manifest.object_classes.len(),
    };
    load_corpus(&dir.join(CORPUS_FILE), shape, seed)?
        .iter()
        .map(|r| r.to_sequences(&manifest.vocab, shape))
        .collect()
}

/// Trains per `cfg`. Every step is appended to the metrics file as it
/// completes; on a numeric failure the last good parameters are saved
/// before the error is returned.
pub fn cmd_pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<Pretrainer> {
    let manifest = Manifest::load(&cfg.paths.corpus)?;
    let model_cfg = cfg.model_for(&manifest)?;
    let seed = cfg.training.seed;
    let pairs = load_pairs(&cfg.paths.corpus, &manifest, Some(seed))?;
    // Separate streams for initialisation and data so that runs differing
    // only in their heads see the same batches and masks.
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut trainer = Pretrainer::new(
        model_cfg,
        cfg.masking.clone(),
        cfg.objectives.clone(),
        &cfg.designs,
        cfg.training.options.clone(),
        cfg.training.adam,
        &mut init_rng,
    )?;
    if let Some(dir) = cfg.paths.metrics.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&cfg.paths.metrics)?);
    let meta = cfg.checkpoint_meta(&manifest)?;
    let result = trainer.train(&pairs, &cfg.schedule(), &mut rng, |_, r: &LossReport| {
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        Ok(())
    });
    if let Some(dir) = cfg.paths.checkpoint.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&cfg.paths.checkpoint, &trainer.store, &meta)?;
    result?;
    writeln!(
        out,
        "trained {} steps; checkpoint {}; metrics {}",
        trainer.steps_done(),
        cfg.paths.checkpoint.display(),
        cfg.paths.metrics.display()
    )?;
    Ok(trainer)
}

pub fn cmd_stats(
    corpus: &Path,
    pairs: &Path,
    z_vocab: Option<Vec<String>>,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let mut table = CooccurrenceTable::new();
    table.ingest_file(corpus)?;
    let pairs: Vec<PairReport> = read_jsonl(pairs)?;
    let z = z_vocab.map(|v| v.into_iter().collect());
    let rows = report(&table, &pairs, z.as_ref());
    let json = serde_json::to_string_pretty(&rows)?;
    let text = render_table(&rows);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), &json)?;
        std::fs::write(dir.join("report.txt"), &text)?;
    }
    write!(out, "{text}")?;
    Ok(())
}

/// Rebuilds the trainer a checkpoint came from and loads its parameters.
pub fn restore(checkpoint: &Path) -> Result<(Pretrainer, RunConfig)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg: RunConfig = serde_json::from_value(
        ckpt.meta
            .get("run")
            .cloned()
            .ok_or_else(|| Error::validation("checkpoint has no run configuration"))?,
    )?;
    let model: crate::two_stream::ModelConfig = serde_json::from_value(
        ckpt.meta
            .get("model")
            .cloned()
            .ok_or_else(|| Error::validation("checkpoint has no model configuration"))?,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut trainer = Pretrainer::new(
        model,
        cfg.masking.clone(),
        cfg.objectives.clone(),
        &cfg.designs,
        cfg.training.options.clone(),
        cfg.training.adam,
        &mut rng,
    )?;
    ckpt.restore_into(&mut trainer.store)?;
    Ok((trainer, cfg))
}

pub fn cmd_probe(
    checkpoint: &Path,
    corpus: &Path,
    pairs: &Path,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let (trainer, _) = restore(checkpoint)?;
    let manifest = Manifest::load(corpus)?;
    let pairs: Vec<PairReport> = read_jsonl(pairs)?;
    let mut table = CooccurrenceTable::new();
    table.ingest_file(&corpus.join(STATS_FILE))?;
    let rows = pairs
        .iter()
        .map(|p| probe_pair(&trainer, &manifest, &table, &p.x, &p.y))
        .collect::<Result<Vec<_>>>()?;
    let json = serde_json::to_string_pretty(&rows)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("probe.json"), &json)?;
    }
    writeln!(out, "{json}")?;
    Ok(())
}
