//! Two-stream visio-linguistic encoder: token and region embeddings,
//! modality-specific transformer layers and cross-modal co-attention.

mod layers;
mod model;

pub use layers::{attend, AttentionBlock, CoAttentionLayer, TransformerLayer};
pub use model::{StreamOutput, TwoStreamModel};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};

/// Reserved vocabulary ids.
pub const CLS_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const NUM_SPECIAL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Number of object classes (soft-label width).
    pub num_classes: usize,
    /// Raw region feature width.
    pub feat_dim: usize,
    pub d_lang: usize,
    pub d_vis: usize,
    /// Language-only layers before the first co-attention block.
    pub lang_layers: usize,
    /// Blocks of (co-attention, language layer, visual layer).
    pub co_blocks: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub max_words: usize,
    pub max_regions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            num_classes: 32,
            feat_dim: 16,
            d_lang: 64,
            d_vis: 64,
            lang_layers: 2,
            co_blocks: 2,
            heads: 4,
            ffn_width: 256,
            max_words: 32,
            max_regions: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("feat_dim", self.feat_dim),
            ("d_lang", self.d_lang),
            ("d_vis", self.d_vis),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("max_words", self.max_words),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("model.{name} must be positive")));
            }
        }
        if self.vocab_size <= NUM_SPECIAL {
            return Err(Error::validation("vocab_size must exceed the special tokens"));
        }
        if self.d_lang % self.heads != 0 || self.d_vis % self.heads != 0 {
            return Err(Error::validation(format!(
                "d_lang ({}) and d_vis ({}) must be divisible by heads ({})",
                self.d_lang, self.d_vis, self.heads
            )));
        }
        Ok(())
    }
}

/// Masking state of one language position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenMask {
    Unmasked,
    /// Replaced by `[MASK]`.
    ToMask,
    /// Masked for prediction but the original id is fed.
    Kept,
    /// Replaced by the given random id.
    Random(usize),
}

/// A sentence as vocabulary ids; position 0 is always `[CLS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    states: Vec<TokenMask>,
    nouns: Vec<bool>,
}

impl TokenSequence {
    /// `ids` must start with [`CLS_ID`]; `nouns` flags each position.
    pub fn new(ids: Vec<usize>, nouns: Vec<bool>) -> Result<Self> {
        if ids.first() != Some(&CLS_ID) {
            return Err(Error::validation("token sequence must start with [CLS]"));
        }
        if nouns.len() != ids.len() {
            return Err(Error::validation("noun flags must cover every position"));
        }
        Ok(Self {
            states: vec![TokenMask::Unmasked; ids.len()],
            nouns,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Original (unmasked) ids.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn states(&self) -> &[TokenMask] {
        &self.states
    }

    pub fn is_noun(&self, t: usize) -> bool {
        self.nouns[t]
    }

    pub fn nouns(&self) -> &[bool] {
        &self.nouns
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.states[t] != TokenMask::Unmasked
    }

    /// Sets the mask state of position `t`; `[CLS]` cannot be masked.
    pub fn set_state(&mut self, t: usize, state: TokenMask) -> Result<()> {
        if t == 0 && state != TokenMask::Unmasked {
            return Err(Error::validation("[CLS] is never masked"));
        }
        self.states[t] = state;
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        self.states.iter_mut().for_each(|s| *s = TokenMask::Unmasked);
    }

    pub fn unmasked_copy(&self) -> Self {
        let mut c = self.clone();
        c.clear_masks();
        c
    }

    /// Ids actually fed to the encoder.
    pub fn input_ids(&self) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.states)
            .map(|(&id, st)| match st {
                TokenMask::Unmasked | TokenMask::Kept => id,
                TokenMask::ToMask => MASK_ID,
                TokenMask::Random(r) => *r,
            })
            .collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.is_masked(t)).collect()
    }

    pub fn has_masks(&self) -> bool {
        self.states.iter().any(|s| *s != TokenMask::Unmasked)
    }
}

/// Masking state of one region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionMask {
    Unmasked,
    /// Features replaced by the learned mask embedding.
    Masked,
    /// Masked for prediction but the original features are fed.
    KeptOriginal,
}

/// Image regions; row 0 is the global region `o_[G]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSequence {
    features: Tensor,
    boxes: Tensor,
    soft_labels: Tensor,
    states: Vec<RegionMask>,
}

pub const FULL_IMAGE_BOX: [f64; 5] = [0.0, 0.0, 1.0, 1.0, 1.0];

impl RegionSequence {
    /// Builds the sequence from detected regions, prepending the global region
    /// whose feature is the mean of all region features, whose box is the whole
    /// image and whose soft label is the mean of the region soft labels.
    pub fn from_regions(
        features: &[Vec<f64>],
        boxes: &[[f64; 5]],
        soft_labels: &[Vec<f64>],
        feat_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.len();
        if boxes.len() != n || soft_labels.len() != n {
            return Err(Error::validation(
                "features, boxes and soft labels must have one row per region",
            ));
        }
        let mut feat_rows = Vec::with_capacity(n + 1);
        let mut global = vec![0.0; feat_dim];
        for f in features {
            if f.len() != feat_dim {
                return Err(Error::dim("region features", &[feat_dim], &[f.len()]));
            }
            for (g, v) in global.iter_mut().zip(f) {
                *g += v / n as f64;
            }
        }
        feat_rows.push(global);
        feat_rows.extend(features.iter().cloned());

        let mut box_rows = vec![FULL_IMAGE_BOX.to_vec()];
        box_rows.extend(boxes.iter().map(|b| b.to_vec()));

        let mut label_rows = Vec::with_capacity(n + 1);
        let mut global_label = vec![if n == 0 { 1.0 / num_classes as f64 } else { 0.0 }; num_classes];
        for s in soft_labels {
            if s.len() != num_classes {
                return Err(Error::dim("soft labels", &[num_classes], &[s.len()]));
            }
            for (g, v) in global_label.iter_mut().zip(s) {
                *g += v / n as f64;
            }
        }
        label_rows.push(global_label);
        label_rows.extend(soft_labels.iter().cloned());

        let seq = Self {
            features: tensor_rows(&feat_rows, feat_dim)?,
            boxes: tensor_rows(&box_rows, 5)?,
            soft_labels: tensor_rows(&label_rows, num_classes)?,
            states: vec![RegionMask::Unmasked; n + 1],
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        validate_boxes(&self.boxes)?;
        for r in 0..self.soft_labels.rows() {
            let row = self.soft_labels.row(r);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < 0.0) {
                return Err(Error::validation(format!(
                    "soft label of region {r} is not a distribution (sum {s})"
                )));
            }
        }
        Ok(())
    }

    /// Number of rows including the global region.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of real regions `N_v`.
    pub fn num_regions(&self) -> usize {
        self.states.len() - 1
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn boxes(&self) -> &Tensor {
        &self.boxes
    }

    pub fn soft_labels(&self) -> &Tensor {
        &self.soft_labels
    }

    pub fn states(&self) -> &[RegionMask] {
        &self.states
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.states[i] != RegionMask::Unmasked
    }

    pub fn set_state(&mut self, i: usize, state: RegionMask) -> Result<()> {
        if i == 0 && state != RegionMask::Unmasked {
            return Err(Error::validation("the global region is never masked"));
        }
        self.states[i] = state;
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        self.states.iter_mut().for_each(|s| *s = RegionMask::Unmasked);
    }

    pub fn unmasked_copy(&self) -> Self {
        let mut c = self.clone();
        c.clear_masks();
        c
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn has_masks(&self) -> bool {
        self.states.iter().any(|s| *s != RegionMask::Unmasked)
    }

    /// Class of region `i`: argmax of its soft label.
    pub fn class_of(&self, i: usize) -> usize {
        argmax(self.soft_labels.row(i))
    }

    /// Reorders real regions (rows 1..) by `perm`, a permutation of `0..N_v`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_regions() {
            return Err(Error::validation("permutation length must equal N_v"));
        }
        let order: Vec<usize> = std::iter::once(0).chain(perm.iter().map(|p| p + 1)).collect();
        let pick = |t: &Tensor| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| t.row(i).to_vec()).collect();
            tensor_rows(&rows, t.cols())
        };
        Ok(Self {
            features: pick(&self.features)?,
            boxes: pick(&self.boxes)?,
            soft_labels: pick(&self.soft_labels)?,
            states: order.iter().map(|&i| self.states[i]).collect(),
        })
    }
}

pub(crate) fn validate_boxes(boxes: &Tensor) -> Result<()> {
    if boxes.cols() != 5 {
        return Err(Error::dim("boxes", boxes.shape(), &[0, 5]));
    }
    if let Some(v) = boxes.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!(
            "box coordinate {v} is not normalised to [0, 1]"
        )));
    }
    Ok(())
}

fn tensor_rows(rows: &[Vec<f64>], d: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(vec![rows.len(), d], data)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}
