use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::two_stream::{RegionSequence, TokenSequence};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Which token stream a token or confounder belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Language,
    Vision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryModality {
    Vision,
    Language,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderEntry {
    pub class_id: usize,
    pub prior: f64,
    pub feature: Vec<f64>,
    /// Source stream; required for joint dictionaries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<Stream>,
}

/// The confounder set `{z}` with priors `P(z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderDictionary {
    pub modality: DictionaryModality,
    pub entries: Vec<ConfounderEntry>,
    #[serde(default = "default_frozen")]
    pub frozen: bool,
}

fn default_frozen() -> bool {
    true
}

impl ConfounderDictionary {
    pub fn new(modality: DictionaryModality, entries: Vec<ConfounderEntry>) -> Result<Self> {
        let d = Self {
            modality,
            entries,
            frozen: true,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::validation("confounder dictionary is empty"));
        }
        let dim = self.entries[0].feature.len();
        let mut seen = std::collections::HashSet::new();
        let mut total = 0.0;
        for e in &self.entries {
            if e.feature.len() != dim {
                return Err(Error::dim("confounder feature", &[dim], &[e.feature.len()]));
            }
            if !(e.prior >= 0.0) {
                return Err(Error::validation(format!(
                    "confounder {} has negative prior {}",
                    e.class_id, e.prior
                )));
            }
            if !seen.insert((e.stream, e.class_id)) {
                return Err(Error::validation(format!(
                    "duplicate confounder class {}",
                    e.class_id
                )));
            }
            if self.modality == DictionaryModality::Joint && e.stream.is_none() {
                return Err(Error::validation("joint dictionary entries need a stream tag"));
            }
            total += e.prior;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "confounder priors sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.entries[0].feature.len()
    }

    pub fn priors(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.prior).collect()
    }

    /// `[m x d_z]` feature matrix.
    pub fn features(&self) -> Tensor {
        Tensor::from_rows(
            &self
                .entries
                .iter()
                .map(|e| e.feature.as_slice())
                .collect::<Vec<_>>(),
        )
        .expect("uniform feature width")
    }

    /// Entry index holding `class_id`.
    pub fn index_of(&self, class_id: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.class_id == class_id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s)?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn finish(
    modality: DictionaryModality,
    groups: BTreeMap<usize, (usize, Vec<f64>)>,
    min_count: usize,
    what: &str,
) -> Result<ConfounderDictionary> {
    let kept: Vec<(usize, usize, Vec<f64>)> = groups
        .into_iter()
        .filter(|(_, (n, _))| *n >= min_count.max(1))
        .map(|(c, (n, sum))| (c, n, sum))
        .collect();
    if kept.is_empty() {
        return Err(Error::validation(format!(
            "no {what} reaches min_count {min_count}"
        )));
    }
    let total: usize = kept.iter().map(|(_, n, _)| n).sum();
    let entries = kept
        .into_iter()
        .map(|(class_id, n, sum)| ConfounderEntry {
            class_id,
            prior: n as f64 / total as f64,
            feature: sum.into_iter().map(|v| v / n as f64).collect(),
            stream: None,
        })
        .collect();
    ConfounderDictionary::new(modality, entries)
}

/// One entry per object class (argmax of the soft label) seen at least
/// `min_count` times: the mean raw feature of that class's regions, with
/// prior `count / retained count`. The global region is skipped.
pub fn build_vision_dictionary<'a, I>(corpus: I, min_count: usize) -> Result<ConfounderDictionary>
where
    I: IntoIterator<Item = &'a RegionSequence>,
{
    let mut groups: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    let mut seen_any = false;
    for seq in corpus {
        for i in 1..seq.len() {
            seen_any = true;
            let class = seq.class_of(i);
            let f = seq.features().row(i);
            let g = groups
                .entry(class)
                .or_insert_with(|| (0, vec![0.0; f.len()]));
            g.0 += 1;
            for (acc, v) in g.1.iter_mut().zip(f) {
                *acc += v;
            }
        }
    }
    if !seen_any {
        return Err(Error::validation("vision dictionary from an empty corpus"));
    }
    finish(DictionaryModality::Vision, groups, min_count, "object class")
}

/// One entry per noun (by word id) with at least `min_count` occurrences:
/// the mean of `embed(index, seq)` rows at its positions, with prior
/// `occurrences / retained occurrences`. `index` is the sentence's place in
/// `corpus`.
pub fn build_language_dictionary<'a, I, F>(
    corpus: I,
    mut embed: F,
    min_count: usize,
) -> Result<ConfounderDictionary>
where
    I: IntoIterator<Item = &'a TokenSequence>,
    F: FnMut(usize, &TokenSequence) -> Result<Tensor>,
{
    let mut groups: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for (index, seq) in corpus.into_iter().enumerate() {
        let nouns: Vec<usize> = (1..seq.len()).filter(|&t| seq.is_noun(t)).collect();
        if nouns.is_empty() {
            continue;
        }
        let emb = embed(index, seq)?;
        for t in nouns {
            let row = emb.row(t);
            let g = groups
                .entry(seq.ids()[t])
                .or_insert_with(|| (0, vec![0.0; row.len()]));
            g.0 += 1;
            for (acc, v) in g.1.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    finish(DictionaryModality::Language, groups, min_count, "noun")
}
