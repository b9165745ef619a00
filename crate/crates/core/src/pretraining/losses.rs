use crate::error::Result;
use crate::numerics::{Linear, ParamId, ParamStore, Session, Tensor, Var};
use crate::two_stream::{ModelConfig, RegionSequence, StreamOutput, TokenSequence};
use rand::Rng;

/// Output heads of the proxy tasks. The word classifier reuses the input
/// word embedding table and only owns a bias.
#[derive(Clone, Debug)]
pub struct PretrainHeads {
    pub mlm_bias: ParamId,
    pub mom: Linear,
    pub align_hidden: Linear,
    pub align_out: Linear,
}

impl PretrainHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: &ModelConfig,
    ) -> Result<Self> {
        Ok(Self {
            mlm_bias: store.add("head.mlm.bias", Tensor::zeros(&[config.vocab_size]))?,
            mom: Linear::new(store, rng, "head.mom", config.d_vis, config.num_classes, true)?,
            align_hidden: Linear::new(
                store,
                rng,
                "head.align.hidden",
                config.d_lang + config.d_vis,
                config.d_lang,
                true,
            )?,
            align_out: Linear::new(store, rng, "head.align.out", config.d_lang, 1, true)?,
        })
    }
}

fn keep(positions: Vec<usize>, exclude: &[usize]) -> Vec<usize> {
    positions.into_iter().filter(|p| !exclude.contains(p)).collect()
}

/// Word logits `lang_rows . word_table^T + bias`.
pub fn mlm_logits<'t>(
    s: &Session<'t>,
    rows: &Var<'t>,
    word_table: ParamId,
    heads: &PretrainHeads,
) -> Result<Var<'t>> {
    rows.matmul_bt(&s.param(word_table))?
        .add_row(&s.param(heads.mlm_bias))
}

/// Cross-entropy at masked positions not in `exclude`, against the original
/// ids. `None` when no position qualifies.
pub fn mlm_loss<'t>(
    s: &Session<'t>,
    out: &StreamOutput<'t>,
    seq: &TokenSequence,
    word_table: ParamId,
    heads: &PretrainHeads,
    exclude: &[usize],
) -> Result<Option<Var<'t>>> {
    let pos = keep(seq.masked_positions(), exclude);
    if pos.is_empty() {
        return Ok(None);
    }
    let logits = mlm_logits(s, &out.lang_final.gather_rows(&pos)?, word_table, heads)?;
    let v = logits.shape()[1];
    let mut targets = Tensor::zeros(&[pos.len(), v]);
    for (r, &p) in pos.iter().enumerate() {
        targets.data_mut()[r * v + seq.ids()[p]] = 1.0;
    }
    Ok(Some(logits.cross_entropy_soft(targets)?))
}

/// Soft cross-entropy at masked regions (kept-original ones included) not
/// in `exclude`.
pub fn mom_loss<'t>(
    s: &Session<'t>,
    out: &StreamOutput<'t>,
    seq: &RegionSequence,
    heads: &PretrainHeads,
    exclude: &[usize],
) -> Result<Option<Var<'t>>> {
    let pos = keep(seq.masked_positions(), exclude);
    if pos.is_empty() {
        return Ok(None);
    }
    let logits = heads.mom.forward(s, &out.vis_final.gather_rows(&pos)?)?;
    let rows: Vec<&[f64]> = pos.iter().map(|&p| seq.soft_labels().row(p)).collect();
    Ok(Some(logits.cross_entropy_soft(Tensor::from_rows(&rows)?)?))
}

/// Alignment score from `[w_CLS ; o_G]` through a GeLU hidden layer.
pub fn alignment_logit<'t>(
    s: &Session<'t>,
    out: &StreamOutput<'t>,
    heads: &PretrainHeads,
) -> Result<Var<'t>> {
    let joint = s.tape().concat(&[out.lang_cls()?, out.vis_global()?], 1)?;
    let h = heads.align_hidden.forward(s, &joint)?.gelu();
    heads.align_out.forward(s, &h)
}

pub fn alignment_loss<'t>(
    s: &Session<'t>,
    out: &StreamOutput<'t>,
    aligned: bool,
    heads: &PretrainHeads,
) -> Result<Var<'t>> {
    alignment_logit(s, out, heads)?.bce_with_logits(&[if aligned { 1.0 } else { 0.0 }])
}
