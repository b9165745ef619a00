use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::two_stream::{RegionSequence, TokenSequence, CLS_ID, UNK_ID};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::io::BufRead;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub feat: Vec<f64>,
    /// `[x1, y1, x2, y2, area]`, normalised to the image.
    #[serde(rename = "box")]
    pub bbox: [f64; 5],
    pub soft_label: Vec<f64>,
}

/// One model-visible image-sentence pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub sentence: Vec<String>,
    /// Sentence indices of nouns.
    #[serde(default)]
    pub nouns: Vec<usize>,
    pub regions: Vec<RegionRecord>,
}

/// The causal-statistics view of a pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub x: Vec<String>,
    pub y: Vec<String>,
    pub z: Vec<String>,
}

/// Shapes a record must agree with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordShape {
    pub feat_dim: usize,
    pub num_classes: usize,
}

impl PairRecord {
    pub fn validate(&self, shape: RecordShape) -> Result<()> {
        if let Some(&i) = self.nouns.iter().find(|&&i| i >= self.sentence.len()) {
            return Err(Error::validation(format!("noun index {i} past sentence end")));
        }
        for (k, r) in self.regions.iter().enumerate() {
            if r.feat.len() != shape.feat_dim {
                return Err(Error::validation(format!(
                    "region {k} has {} features, expected {}",
                    r.feat.len(),
                    shape.feat_dim
                )));
            }
            if r.soft_label.len() != shape.num_classes {
                return Err(Error::validation(format!(
                    "region {k} soft label has {} classes, expected {}",
                    r.soft_label.len(),
                    shape.num_classes
                )));
            }
            let sum: f64 = r.soft_label.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || r.soft_label.iter().any(|p| *p < 0.0) {
                return Err(Error::validation(format!("region {k} soft label is not a distribution")));
            }
            if r.bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::validation(format!("region {k} box is not normalised")));
            }
            if r.feat.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("region {k} has non-finite features")));
            }
        }
        Ok(())
    }

    /// Encoder inputs. Noun flags come from the record, not the vocabulary.
    pub fn to_sequences(&self, vocab: &Vocab, shape: RecordShape) -> Result<(TokenSequence, RegionSequence)> {
        let mut ids = vec![CLS_ID];
        ids.extend(
            self.sentence
                .iter()
                .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK_ID)),
        );
        let mut nouns = vec![false; ids.len()];
        for &i in &self.nouns {
            nouns[i + 1] = true;
        }
        let tokens = TokenSequence::new(ids, nouns)?;
        let feats: Vec<Vec<f64>> = self.regions.iter().map(|r| r.feat.clone()).collect();
        let boxes: Vec<[f64; 5]> = self.regions.iter().map(|r| r.bbox).collect();
        let labels: Vec<Vec<f64>> = self.regions.iter().map(|r| r.soft_label.clone()).collect();
        let regions = RegionSequence::from_regions(&feats, &boxes, &labels, shape.feat_dim, shape.num_classes)?;
        Ok((tokens, regions))
    }
}

/// Parses JSON Lines, naming the 1-based line of the first bad record.
/// Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Loads and validates every record of a corpus file; with `seed`, the
/// records are shuffled deterministically.
pub fn load_corpus(path: &Path, shape: RecordShape, seed: Option<u64>) -> Result<Vec<PairRecord>> {
    let mut records: Vec<PairRecord> = read_jsonl(path)?;
    // Line numbers equal record indices + 1 only without blank lines; recount.
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    for (r, line) in records.iter().zip(lines) {
        r.validate(shape).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            msg: e.to_string(),
        })?;
    }
    if let Some(seed) = seed {
        records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(records)
}
