use crate::causal_stats::CooccurrenceTable;
use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, Session, Tape};
use crate::pretraining::{Pretrainer, PretrainHeads};
use crate::two_stream::{RegionMask, RegionSequence, TokenSequence, CLS_ID};
use serde::{Deserialize, Serialize};

/// Box of the single placeholder region the probe asks about.
pub const PROBE_BOX: [f64; 5] = [0.25, 0.25, 0.75, 0.75, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub x: String,
    pub y: String,
    /// P(y) at the masked region with `x` in the sentence.
    pub p_present: f64,
    /// The same with the sentence reduced to `[CLS]`.
    pub p_ablated: f64,
    pub conditional: Option<f64>,
    pub interventional: Option<f64>,
}

fn probe_regions(feat_dim: usize, num_classes: usize) -> Result<RegionSequence> {
    let mut r = RegionSequence::from_regions(
        &[vec![0.0; feat_dim]],
        &[PROBE_BOX],
        &[vec![1.0 / num_classes as f64; num_classes]],
        feat_dim,
        num_classes,
    )?;
    r.set_state(1, RegionMask::Masked)?;
    Ok(r)
}

/// Class distribution the masked-object head predicts for a masked region
/// paired with `tokens`.
pub fn masked_object_distribution(trainer: &Pretrainer, tokens: &TokenSequence) -> Result<Vec<f64>> {
    let cfg = trainer.config();
    let regions = probe_regions(cfg.feat_dim, cfg.num_classes)?;
    let tape = Tape::new();
    let s = Session::new(&tape, &trainer.store);
    let out = trainer.model.forward(&s, tokens, &regions)?;
    let heads: &PretrainHeads = &trainer.heads;
    let logits = heads.mom.forward(&s, &out.vis_final.gather_rows(&[1])?)?;
    Ok(softmax_slice(logits.value().row(0)))
}

/// Probes one (word, object) pair and attaches the corpus statistics.
pub fn probe_pair(
    trainer: &Pretrainer,
    manifest: &Manifest,
    table: &CooccurrenceTable,
    x: &str,
    y: &str,
) -> Result<ProbeRow> {
    let xid = manifest
        .vocab
        .id(x)
        .ok_or_else(|| Error::validation(format!("probe word {x:?} is not in the vocabulary")))?;
    let yid = manifest
        .object_classes
        .iter()
        .position(|c| c == y)
        .ok_or_else(|| Error::validation(format!("probe object {y:?} is not an object class")))?;
    let present = TokenSequence::new(vec![CLS_ID, xid], vec![false, manifest.vocab.is_noun(xid)])?;
    let ablated = TokenSequence::new(vec![CLS_ID], vec![false])?;
    Ok(ProbeRow {
        x: x.to_string(),
        y: y.to_string(),
        p_present: masked_object_distribution(trainer, &present)?[yid],
        p_ablated: masked_object_distribution(trainer, &ablated)?[yid],
        conditional: table.conditional(y, x).ok(),
        interventional: table.interventional(y, x).ok().map(|a| a.value),
    })
}
