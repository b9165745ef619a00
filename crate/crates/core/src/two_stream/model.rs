use super::layers::{CoAttentionLayer, TransformerLayer};
use super::{validate_boxes, ModelConfig, RegionMask, RegionSequence, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{truncated_normal, Linear, ParamId, ParamStore, Session, Tensor, Var};
use rand::Rng;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Final per-token representations of both streams.
#[derive(Clone, Copy, Debug)]
pub struct StreamOutput<'t> {
    /// `[N_w x d_lang]`, row 0 is `[CLS]`.
    pub lang_final: Var<'t>,
    /// `[(N_v + 1) x d_vis]`, row 0 is the global region.
    pub vis_final: Var<'t>,
}

impl<'t> StreamOutput<'t> {
    pub fn lang_cls(&self) -> Result<Var<'t>> {
        self.lang_final.rows(0, 1)
    }

    pub fn vis_global(&self) -> Result<Var<'t>> {
        self.vis_final.rows(0, 1)
    }
}

#[derive(Clone, Debug)]
struct CoBlock {
    co: CoAttentionLayer,
    lang: TransformerLayer,
    vis: TransformerLayer,
}

/// The two-stream encoder.
///
/// Layout: `lang_layers` language-only layers, then `co_blocks` blocks of
/// (co-attention, language layer, visual layer). Regions carry position only
/// through their boxes.
#[derive(Debug)]
pub struct TwoStreamModel {
    pub config: ModelConfig,
    pub word_emb: ParamId,
    pub pos_emb: ParamId,
    pub region_proj: Linear,
    pub box_hidden: Linear,
    pub box_out: Linear,
    pub vis_mask: ParamId,
    lang_layers: Vec<TransformerLayer>,
    blocks: Vec<CoBlock>,
    passes: AtomicUsize,
}

impl TwoStreamModel {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let word_emb = store.add(
            "embed.word",
            truncated_normal(rng, &[c.vocab_size, c.d_lang], 0.02),
        )?;
        let pos_emb = store.add(
            "embed.position",
            truncated_normal(rng, &[c.max_words, c.d_lang], 0.02),
        )?;
        let region_proj = Linear::new(store, rng, "embed.region", c.feat_dim, c.d_vis, true)?;
        let box_hidden = Linear::new(store, rng, "embed.box.hidden", 5, c.d_vis, true)?;
        let box_out = Linear::new(store, rng, "embed.box.out", c.d_vis, c.d_vis, true)?;
        let vis_mask = store.add("embed.region_mask", truncated_normal(rng, &[1, c.d_vis], 0.02))?;
        let lang_layers = (0..c.lang_layers)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    rng,
                    &format!("lang.{i}"),
                    c.d_lang,
                    c.d_lang,
                    c.heads,
                    c.ffn_width,
                )
            })
            .collect::<Result<_>>()?;
        let blocks = (0..c.co_blocks)
            .map(|i| {
                Ok(CoBlock {
                    co: CoAttentionLayer::new(
                        store,
                        rng,
                        &format!("coattn.{i}"),
                        c.d_lang,
                        c.d_vis,
                        c.heads,
                        c.ffn_width,
                    )?,
                    lang: TransformerLayer::new(
                        store,
                        rng,
                        &format!("block.{i}.lang"),
                        c.d_lang,
                        c.d_lang,
                        c.heads,
                        c.ffn_width,
                    )?,
                    vis: TransformerLayer::new(
                        store,
                        rng,
                        &format!("block.{i}.vis"),
                        c.d_vis,
                        c.d_vis,
                        c.heads,
                        c.ffn_width,
                    )?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            word_emb,
            pos_emb,
            region_proj,
            box_hidden,
            box_out,
            vis_mask,
            lang_layers,
            blocks,
            passes: AtomicUsize::new(0),
        })
    }

    /// Number of encoder forward passes run so far.
    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    pub fn lang_layers(&self) -> &[TransformerLayer] {
        &self.lang_layers
    }

    /// The co-attention layer of each block.
    pub fn co_layers(&self) -> impl Iterator<Item = &CoAttentionLayer> {
        self.blocks.iter().map(|b| &b.co)
    }

    /// `(co-attention, language layer, visual layer)` of each block.
    pub fn blocks(&self) -> impl Iterator<Item = (&CoAttentionLayer, &TransformerLayer, &TransformerLayer)> {
        self.blocks.iter().map(|b| (&b.co, &b.lang, &b.vis))
    }

    /// `w_t^0 = w_t^e + p_t` for the ids actually fed (mask states applied).
    pub fn embed_language<'t>(&self, s: &Session<'t>, seq: &TokenSequence) -> Result<Var<'t>> {
        let ids = seq.input_ids();
        if ids.len() > self.config.max_words {
            return Err(Error::validation(format!(
                "sentence has {} tokens, max is {}",
                ids.len(),
                self.config.max_words
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::validation(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let words = s.param(self.word_emb).gather_rows(&ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = s.param(self.pos_emb).gather_rows(&positions)?;
        words.add(&pos)
    }

    /// Projected region features (mask embedding for masked regions) plus
    /// the box feed-forward encoding.
    pub fn embed_regions<'t>(&self, s: &Session<'t>, seq: &RegionSequence) -> Result<Var<'t>> {
        validate_boxes(seq.boxes())?;
        let n = seq.len();
        if seq.num_regions() > self.config.max_regions {
            return Err(Error::validation(format!(
                "image has {} regions, max is {}",
                seq.num_regions(),
                self.config.max_regions
            )));
        }
        if seq.features().cols() != self.config.feat_dim {
            return Err(Error::dim(
                "embed_regions",
                seq.features().shape(),
                &[n, self.config.feat_dim],
            ));
        }
        let feats = s.constant(seq.features().clone());
        let mut proj = self.region_proj.forward(s, &feats)?;
        if seq.states().contains(&RegionMask::Masked) {
            let with_mask = s.tape().concat(&[proj, s.param(self.vis_mask)], 0)?;
            let pick: Vec<usize> = seq
                .states()
                .iter()
                .enumerate()
                .map(|(i, st)| if *st == RegionMask::Masked { n } else { i })
                .collect();
            proj = with_mask.gather_rows(&pick)?;
        }
        proj.add(&self.encode_boxes(s, seq.boxes())?)
    }

    pub fn encode_boxes<'t>(&self, s: &Session<'t>, boxes: &Tensor) -> Result<Var<'t>> {
        let b = s.constant(boxes.clone());
        let h = self.box_hidden.forward(s, &b)?.gelu();
        self.box_out.forward(s, &h)
    }

    pub fn forward<'t>(
        &self,
        s: &Session<'t>,
        lang: &TokenSequence,
        vis: &RegionSequence,
    ) -> Result<StreamOutput<'t>> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        let mut l = self.embed_language(s, lang)?;
        let mut v = self.embed_regions(s, vis)?;
        for layer in &self.lang_layers {
            l = layer.forward(s, &l)?;
        }
        for block in &self.blocks {
            let (l2, v2) = block.co.forward(s, &l, &v)?;
            l = block.lang.forward(s, &l2)?;
            v = block.vis.forward(s, &v2)?;
        }
        Ok(StreamOutput {
            lang_final: l,
            vis_final: v,
        })
    }
}
