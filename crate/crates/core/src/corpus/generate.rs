use super::record::{PairRecord, RegionRecord, StatsRecord};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::numerics::softmax_slice;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordSpec {
    pub word: String,
    #[serde(default)]
    pub noun: bool,
}

/// A latent cause. Given `z`, each listed noun enters the sentence and each
/// listed object enters the image independently with its probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderSpec {
    pub name: String,
    pub prior: f64,
    #[serde(default)]
    pub words: BTreeMap<String, f64>,
    #[serde(default)]
    pub objects: BTreeMap<String, f64>,
}

/// Genuine effect: when `x` is in the sentence, object `y` is added with `prob`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectEdge {
    pub x: String,
    pub y: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub words: Vec<WordSpec>,
    pub object_classes: Vec<String>,
    pub feature_dim: usize,
    /// Standard deviation of region features around their class mean.
    pub feature_noise: f64,
    pub soft_label_temperature: f64,
    pub confounders: Vec<ConfounderSpec>,
    #[serde(default)]
    pub direct_edges: Vec<DirectEdge>,
    /// Inclusion probability of nouns and objects a confounder does not list.
    #[serde(default)]
    pub base_word_rate: f64,
    #[serde(default)]
    pub base_object_rate: f64,
    /// Inclusive range of non-noun words per sentence.
    pub filler_range: [usize; 2],
    pub max_regions: usize,
}

impl GeneratorSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::validation(what));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.confounders.is_empty() {
            return bad("spec.confounders is empty".into());
        }
        let total: f64 = self.confounders.iter().map(|c| c.prior).sum();
        if (total - 1.0).abs() > 1e-9 || self.confounders.iter().any(|c| !prob(c.prior)) {
            return bad(format!("spec.confounders priors must be probabilities summing to 1 (sum {total})"));
        }
        let vocab = self.vocab()?;
        if self.object_classes.is_empty() {
            return bad("spec.object_classes is empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.object_classes {
            if !seen.insert(o) {
                return bad(format!("spec.object_classes repeats {o:?}"));
            }
        }
        if self.feature_dim == 0 {
            return bad("spec.feature_dim must be positive".into());
        }
        if !(self.feature_noise >= 0.0) || !(self.soft_label_temperature > 0.0) {
            return bad("spec.feature_noise must be >= 0 and soft_label_temperature > 0".into());
        }
        if !prob(self.base_word_rate) || !prob(self.base_object_rate) {
            return bad("spec base rates must lie in [0, 1]".into());
        }
        if self.filler_range[0] > self.filler_range[1] {
            return bad("spec.filler_range is reversed".into());
        }
        if self.max_regions == 0 {
            return bad("spec.max_regions must be positive".into());
        }
        if self.fillers().is_empty() && self.filler_range[1] > 0 {
            return bad("spec.filler_range needs at least one non-noun word".into());
        }
        for c in &self.confounders {
            for (w, p) in &c.words {
                match vocab.id(w) {
                    Some(id) if vocab.is_noun(id) => {}
                    _ => return bad(format!("confounder {:?} table words: {w:?} is not a declared noun", c.name)),
                }
                if !prob(*p) {
                    return bad(format!("confounder {:?} table words: P({w}) = {p}", c.name));
                }
            }
            for (o, p) in &c.objects {
                if !self.object_classes.contains(o) {
                    return bad(format!("confounder {:?} table objects: unknown object {o:?}", c.name));
                }
                if !prob(*p) {
                    return bad(format!("confounder {:?} table objects: P({o}) = {p}", c.name));
                }
            }
        }
        for e in &self.direct_edges {
            if !vocab.id(&e.x).is_some_and(|i| vocab.is_noun(i)) || !self.object_classes.contains(&e.y) || !prob(e.prob) {
                return bad(format!("direct edge {} -> {} is invalid", e.x, e.y));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.words.iter().map(|w| (w.word.as_str(), w.noun)))
    }

    pub fn nouns(&self) -> Vec<&str> {
        self.words.iter().filter(|w| w.noun).map(|w| w.word.as_str()).collect()
    }

    pub fn fillers(&self) -> Vec<&str> {
        self.words.iter().filter(|w| !w.noun).map(|w| w.word.as_str()).collect()
    }

    pub fn word_prob(&self, z: usize, word: &str) -> f64 {
        self.confounders[z].words.get(word).copied().unwrap_or(self.base_word_rate)
    }

    pub fn object_prob(&self, z: usize, object: &str) -> f64 {
        self.confounders[z].objects.get(object).copied().unwrap_or(self.base_object_rate)
    }

    /// (word, object) pairs that share a confounder raising both above their
    /// base rates and have no direct edge.
    pub fn planted_spurious_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for x in self.nouns() {
            for y in &self.object_classes {
                if self.direct_edges.iter().any(|e| e.x == x && &e.y == y) {
                    continue;
                }
                let shared = self.confounders.iter().any(|c| {
                    c.words.get(x).is_some_and(|&p| p > self.base_word_rate)
                        && c.objects.get(y).is_some_and(|&p| p > self.base_object_rate)
                });
                if shared {
                    out.push((x.to_string(), y.clone()));
                }
            }
        }
        out
    }
}

/// Paths written by [`generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub seed: u64,
    pub files: Vec<String>,
    pub vocab: Vocab,
    pub object_classes: Vec<String>,
    pub feature_dim: usize,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const STATS_FILE: &str = "stats.jsonl";
pub const LATENTS_FILE: &str = "latents.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.files.iter().map(|f| dir.join(f)).collect()
    }
}

/// One sampled pair with its latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: PairRecord,
    pub stats: StatsRecord,
    pub latent: usize,
}

/// Class mean vectors, drawn from the spec seed.
pub fn class_means(spec: &GeneratorSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d65_616e);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    spec.object_classes
        .iter()
        .map(|_| (0..spec.feature_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples `n` pairs. Each pair draws one latent `z`, then nouns and objects
/// independently given `z`, then direct effects of the chosen nouns.
pub fn sample(spec: &GeneratorSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec);
    let noise = Normal::new(0.0, spec.feature_noise.max(0.0)).expect("finite noise");
    let priors: Vec<f64> = spec.confounders.iter().map(|c| c.prior).collect();
    let nouns = spec.nouns();
    let fillers = spec.fillers();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = categorical(&mut rng, &priors);
        let chosen: Vec<&str> = nouns
            .iter()
            .copied()
            .filter(|w| rng.random::<f64>() < spec.word_prob(z, w))
            .collect();
        let mut objects: Vec<usize> = (0..spec.object_classes.len())
            .filter(|&o| rng.random::<f64>() < spec.object_prob(z, &spec.object_classes[o]))
            .collect();
        for e in &spec.direct_edges {
            if chosen.contains(&e.x.as_str()) && rng.random::<f64>() < e.prob {
                let o = spec.object_classes.iter().position(|c| c == &e.y).expect("validated");
                if !objects.contains(&o) {
                    objects.push(o);
                }
            }
        }
        if objects.is_empty() {
            objects.push(rng.random_range(0..spec.object_classes.len()));
        }
        objects.sort_unstable();
        objects.shuffle(&mut rng);
        objects.truncate(spec.max_regions);

        let n_fill = rng.random_range(spec.filler_range[0]..=spec.filler_range[1]);
        let mut words: Vec<(&str, bool)> = chosen.iter().map(|w| (*w, true)).collect();
        for _ in 0..n_fill {
            words.push((fillers[rng.random_range(0..fillers.len())], false));
        }
        words.shuffle(&mut rng);

        let regions = objects
            .iter()
            .map(|&o| {
                let feat: Vec<f64> = means[o].iter().map(|m| m + noise.sample(&mut rng)).collect();
                let logits: Vec<f64> = means
                    .iter()
                    .map(|mu| {
                        -mu.iter().zip(&feat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                            / spec.soft_label_temperature
                    })
                    .collect();
                let x1: f64 = rng.random_range(0.0..0.7);
                let y1: f64 = rng.random_range(0.0..0.7);
                let x2 = (x1 + rng.random_range(0.1..0.3f64)).min(1.0);
                let y2 = (y1 + rng.random_range(0.1..0.3f64)).min(1.0);
                RegionRecord {
                    feat,
                    bbox: [x1, y1, x2, y2, (x2 - x1) * (y2 - y1)],
                    soft_label: softmax_slice(&logits),
                }
            })
            .collect();
        let sentence: Vec<String> = words.iter().map(|(w, _)| w.to_string()).collect();
        let noun_idx: Vec<usize> = words.iter().enumerate().filter(|(_, w)| w.1).map(|(i, _)| i).collect();
        let mut xs: Vec<String> = chosen.iter().map(|w| w.to_string()).collect();
        xs.sort();
        let mut ys: Vec<String> = objects.iter().map(|&o| spec.object_classes[o].clone()).collect();
        ys.sort();
        out.push(Sample {
            record: PairRecord {
                sentence,
                nouns: noun_idx,
                regions,
            },
            stats: StatsRecord {
                x: xs,
                y: ys,
                z: vec![spec.confounders[z].name.clone()],
            },
            latent: z,
        });
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, &it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LatentLine {
    latents: Vec<usize>,
}

/// Writes the corpus, the stats projection, the latent sidecar and the
/// manifest into `out_dir`.
pub fn generate(spec: &GeneratorSpec, n: usize, out_dir: &Path) -> Result<Manifest> {
    let samples = sample(spec, n)?;
    std::fs::create_dir_all(out_dir)?;
    write_jsonl(&out_dir.join(CORPUS_FILE), samples.iter().map(|s| &s.record))?;
    write_jsonl(&out_dir.join(STATS_FILE), samples.iter().map(|s| &s.stats))?;
    write_jsonl(
        &out_dir.join(LATENTS_FILE),
        samples.iter().map(|s| LatentLine { latents: vec![s.latent] }),
    )?;
    let manifest = Manifest {
        n,
        seed: spec.seed,
        files: vec![CORPUS_FILE.into(), STATS_FILE.into(), LATENTS_FILE.into()],
        vocab: spec.vocab()?,
        object_classes: spec.object_classes.clone(),
        feature_dim: spec.feature_dim,
    };
    std::fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
