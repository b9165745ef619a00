use crate::error::{Error, Result};
use crate::two_stream::{RegionMask, RegionSequence, TokenMask, TokenSequence, MASK_ID};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingPolicy {
    pub lang_mask_rate: f64,
    /// Of the masked words: fraction shown as `[MASK]`.
    pub lang_to_mask: f64,
    /// Of the masked words: fraction left as is.
    pub lang_keep: f64,
    /// Of the masked words: fraction replaced by a random word.
    pub lang_random: f64,
    pub vis_mask_rate: f64,
    /// Of the masked regions: fraction that keep their original features.
    pub vis_keep_original_rate: f64,
    /// Only nouns are eligible for language masking.
    pub noun_only: bool,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            lang_mask_rate: 0.15,
            lang_to_mask: 0.8,
            lang_keep: 0.1,
            lang_random: 0.1,
            vis_mask_rate: 0.15,
            vis_keep_original_rate: 0.10,
            noun_only: false,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lang_mask_rate", self.lang_mask_rate),
            ("lang_to_mask", self.lang_to_mask),
            ("lang_keep", self.lang_keep),
            ("lang_random", self.lang_random),
            ("vis_mask_rate", self.vis_mask_rate),
            ("vis_keep_original_rate", self.vis_keep_original_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("masking.{name} = {v} is outside [0, 1]")));
            }
        }
        let split = self.lang_to_mask + self.lang_keep + self.lang_random;
        if (split - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "language mask split sums to {split}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Uniform random word, never `[CLS]` or `[MASK]`.
pub fn random_word<R: Rng + ?Sized>(rng: &mut R, vocab_size: usize) -> usize {
    // CLS = 0 and MASK = 1 are the two lowest ids.
    debug_assert_eq!(MASK_ID, 1);
    2 + rng.random_range(0..vocab_size - 2)
}

/// Masks both streams of an unmasked pair independently.
///
/// Each eligible word is masked with `lang_mask_rate`, then split between
/// `[MASK]`, keep and random replacement. Each real region is masked with
/// `vis_mask_rate`; a masked region keeps its features with
/// `vis_keep_original_rate` but still has to be predicted.
pub fn apply_masking<R: Rng + ?Sized>(
    tokens: &TokenSequence,
    regions: &RegionSequence,
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(TokenSequence, RegionSequence)> {
    let mut t = tokens.unmasked_copy();
    let mut r = regions.unmasked_copy();
    for pos in 1..t.len() {
        if policy.noun_only && !t.is_noun(pos) {
            continue;
        }
        if rng.random::<f64>() >= policy.lang_mask_rate {
            continue;
        }
        let u: f64 = rng.random();
        let state = if u < policy.lang_to_mask {
            TokenMask::ToMask
        } else if u < policy.lang_to_mask + policy.lang_keep {
            TokenMask::Kept
        } else {
            TokenMask::Random(random_word(rng, vocab_size))
        };
        t.set_state(pos, state)?;
    }
    for i in 1..r.len() {
        if rng.random::<f64>() >= policy.vis_mask_rate {
            continue;
        }
        let state = if rng.random::<f64>() < policy.vis_keep_original_rate {
            RegionMask::KeptOriginal
        } else {
            RegionMask::Masked
        };
        r.set_state(i, state)?;
    }
    Ok((t, r))
}
