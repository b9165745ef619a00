use crate::error::Result;
use crate::numerics::{Linear, Norm, ParamStore, Session, Var};
use rand::Rng;

/// Multi-head scaled dot-product attention.
///
/// Queries come from a `d`-wide stream; keys and values are projected from a
/// `d_ctx`-wide context (the same stream for self-attention, the other stream
/// for co-attention). Each head's scores are divided by `sqrt(d / heads)`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ctx: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), d, d, true)?,
            key: Linear::new(store, rng, &format!("{name}.key"), d_ctx, d, true)?,
            value: Linear::new(store, rng, &format!("{name}.value"), d_ctx, d, true)?,
            output: Linear::new(store, rng, &format!("{name}.output"), d, d, true)?,
            heads,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>, ctx: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(s, x, ctx)?.0)
    }

    /// Also returns the per-head attention matrices `[n_query x n_ctx]`.
    pub fn forward_with_weights<'t>(
        &self,
        s: &Session<'t>,
        x: &Var<'t>,
        ctx: &Var<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, ctx)?;
        let v = self.value.forward(s, ctx)?;
        let (mixed, weights) = attend(&q, &k, &v, self.heads)?;
        Ok((self.output.forward(s, &mixed)?, weights))
    }
}

/// `softmax(Q K^T / sqrt(d_head)) V` per head, heads concatenated.
pub fn attend<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    heads: usize,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let w = qh.matmul_bt(&kh)?.scale(scale).softmax(1)?;
        outs.push(w.matmul(&vh)?);
        weights.push(w);
    }
    let mixed = if heads == 1 {
        outs[0]
    } else {
        q.tape().concat(&outs, 1)?
    };
    Ok((mixed, weights))
}

/// Attention, add & norm, GeLU feed-forward, add & norm.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: AttentionBlock,
    pub norm1: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: Norm,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ctx: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionBlock::new(store, rng, &format!("{name}.attn"), d, d_ctx, heads)?,
            norm1: Norm::new(store, &format!("{name}.norm1"), d)?,
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn_in"), d, ffn, true)?,
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn_out"), ffn, d, true)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), d)?,
        })
    }

    /// Self-attention layer.
    pub fn forward<'t>(&self, s: &Session<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.forward_ctx(s, x, x)
    }

    /// Layer whose keys and values come from `ctx`.
    pub fn forward_ctx<'t>(&self, s: &Session<'t>, x: &Var<'t>, ctx: &Var<'t>) -> Result<Var<'t>> {
        let attn = self.attention.forward(s, x, ctx)?;
        let h = self.norm1.forward(s, &x.add(&attn)?)?;
        let ff = self.ffn_out.forward(s, &self.ffn_in.forward(s, &h)?.gelu())?;
        self.norm2.forward(s, &h.add(&ff)?)
    }
}

/// Cross-modal layer pair: language queries over visual keys/values and
/// visual queries over language keys/values, both reading the same inputs.
#[derive(Clone, Debug)]
pub struct CoAttentionLayer {
    pub lang: TransformerLayer,
    pub vis: TransformerLayer,
}

impl CoAttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_lang: usize,
        d_vis: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        Ok(Self {
            lang: TransformerLayer::new(store, rng, &format!("{name}.lang"), d_lang, d_vis, heads, ffn)?,
            vis: TransformerLayer::new(store, rng, &format!("{name}.vis"), d_vis, d_lang, heads, ffn)?,
        })
    }

    pub fn forward<'t>(
        &self,
        s: &Session<'t>,
        lang: &Var<'t>,
        vis: &Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let new_lang = self.lang.forward_ctx(s, lang, vis)?;
        let new_vis = self.vis.forward_ctx(s, vis, lang)?;
        Ok((new_lang, new_vis))
    }
}
