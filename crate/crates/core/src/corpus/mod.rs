//! Synthetic paired corpora with planted confounders, tokenisation and
//! corpus loading.

mod generate;
mod record;
mod vocab;

pub use generate::{
    class_means, generate, sample, ConfounderSpec, DirectEdge, GeneratorSpec, Manifest, Sample,
    WordSpec, CORPUS_FILE, LATENTS_FILE, MANIFEST_FILE, STATS_FILE,
};
pub use record::{load_corpus, read_jsonl, PairRecord, RecordShape, RegionRecord, StatsRecord};
pub use vocab::{detokenize, tokenize, Vocab, CLS, MASK, UNK};
