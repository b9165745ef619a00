use super::designs::{select, Design, ScopeMode, Selection, TokenRef};
use super::dictionary::{ConfounderDictionary, Stream};
use crate::error::{Error, Result};
use crate::numerics::{Linear, ParamStore, Session, Tensor, Var};
use crate::two_stream::{ModelConfig, RegionSequence, StreamOutput, TokenSequence};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaNorm {
    /// `s_j / sum_k s_k` over live entries, weights may be negative.
    Ratio,
    /// Softmax over live entries.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadOptions {
    /// Zero the weight of the confounder sharing `y`'s class (A/B/C only).
    pub exclusion: bool,
    pub alpha_norm: AlphaNorm,
    pub eps_den: f64,
    /// Detach `y` when it comes from the clean pass.
    pub stop_gradient_clean: bool,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            exclusion: true,
            alpha_norm: AlphaNorm::Ratio,
            eps_den: 1e-8,
            stop_gradient_clean: true,
        }
    }
}

/// The confounder sets available to heads.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dictionaries {
    pub vision: Option<ConfounderDictionary>,
    pub language: Option<ConfounderDictionary>,
}

/// A dictionary placed on a tape: features as a `[m x d_z]` variable.
pub struct DictView<'t> {
    pub features: Var<'t>,
    pub priors: Vec<f64>,
    index: HashMap<(Stream, usize), usize>,
}

impl<'t> DictView<'t> {
    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn index_of(&self, stream: Stream, class_id: usize) -> Option<usize> {
        self.index.get(&(stream, class_id)).copied()
    }
}

/// Backdoor-adjusted classifier
/// `softmax(W_c [x, sum_z P(z) alpha(z) z])` (or `W_c sum_z ...` for
/// Design D) for one (design, scope) pair.
#[derive(Debug)]
pub struct InterventionHead {
    pub design: Design,
    pub scope: ScopeMode,
    pub options: HeadOptions,
    /// `W_y` (or `W_r`) per stream, no bias.
    pub query_lang: Option<Linear>,
    pub query_vis: Option<Linear>,
    /// `W_z`, no bias.
    pub key: Linear,
    /// Projections of each dictionary into the shared space (inter-modal only).
    pub joint_lang: Option<Linear>,
    pub joint_vis: Option<Linear>,
    /// `W_c`.
    pub classifier: Linear,
    vocab_size: usize,
    num_classes: usize,
    invocations: AtomicUsize,
}

impl InterventionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        design: Design,
        scope: ScopeMode,
        config: &ModelConfig,
        options: HeadOptions,
    ) -> Result<Self> {
        Self::validate_combo(design, scope, config)?;
        let name = format!("intervention.{design}.{scope}");
        let d_b = config.d_lang;
        let uses_lang = scope != ScopeMode::VisionIntra;
        let uses_vis = scope != ScopeMode::LanguageIntra;
        let query_lang = if uses_lang {
            Some(Linear::new(store, rng, &format!("{name}.query_lang"), config.d_lang, d_b, false)?)
        } else {
            None
        };
        let query_vis = if uses_vis {
            Some(Linear::new(store, rng, &format!("{name}.query_vis"), config.d_vis, d_b, false)?)
        } else {
            None
        };
        let (d_z, joint_lang, joint_vis) = match scope {
            ScopeMode::VisionIntra => (config.feat_dim, None, None),
            ScopeMode::LanguageIntra => (config.d_lang, None, None),
            ScopeMode::InterModal => {
                let d = config.d_lang;
                (
                    d,
                    Some(Linear::new(store, rng, &format!("{name}.joint_lang"), config.d_lang, d, false)?),
                    Some(Linear::new(store, rng, &format!("{name}.joint_vis"), config.feat_dim, d, false)?),
                )
            }
        };
        let key = Linear::new(store, rng, &format!("{name}.key"), d_z, d_b, false)?;
        let d_x = match scope {
            ScopeMode::VisionIntra => config.d_vis,
            _ => config.d_lang,
        };
        let d_in = if design.has_x() { d_x + d_z } else { d_z };
        let n_out = match scope {
            ScopeMode::VisionIntra => config.num_classes,
            ScopeMode::LanguageIntra => config.vocab_size,
            ScopeMode::InterModal => config.vocab_size + config.num_classes,
        };
        let classifier = Linear::new(store, rng, &format!("{name}.classifier"), d_in, n_out, true)?;
        Ok(Self {
            design,
            scope,
            options,
            query_lang,
            query_vis,
            key,
            joint_lang,
            joint_vis,
            classifier,
            vocab_size: config.vocab_size,
            num_classes: config.num_classes,
            invocations: AtomicUsize::new(0),
        })
    }

    pub fn validate_combo(design: Design, scope: ScopeMode, config: &ModelConfig) -> Result<()> {
        if scope == ScopeMode::InterModal {
            if design == Design::A {
                return Err(Error::validation(
                    "design A has no inter-modal form: x and y are the same token",
                ));
            }
            if design.has_x() && config.d_lang != config.d_vis {
                return Err(Error::validation(format!(
                    "inter-modal design {design} needs d_lang == d_vis (got {} and {})",
                    config.d_lang, config.d_vis
                )));
            }
        }
        Ok(())
    }

    /// Objective name used in loss reports.
    pub fn objective_name(&self) -> String {
        format!("intervention_{}_{}", self.design.to_string().to_lowercase(), self.scope)
    }

    /// Number of (x, y) pairs or r's classified so far.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::Relaxed);
    }

    /// Width of the target space.
    pub fn target_dim(&self) -> usize {
        self.classifier.d_out
    }

    pub fn needs_language_dictionary(&self) -> bool {
        self.scope != ScopeMode::VisionIntra
    }

    pub fn needs_vision_dictionary(&self) -> bool {
        self.scope != ScopeMode::LanguageIntra
    }

    fn query(&self, stream: Stream) -> Result<&Linear> {
        match stream {
            Stream::Language => self.query_lang.as_ref(),
            Stream::Vision => self.query_vis.as_ref(),
        }
        .ok_or_else(|| Error::validation(format!("{stream:?} tokens are outside scope {}", self.scope)))
    }

    /// Places the scope's dictionary (or the joint one) on the tape.
    pub fn dictionary_view<'t>(&self, s: &Session<'t>, dicts: &Dictionaries) -> Result<DictView<'t>> {
        let need = |d: &Option<ConfounderDictionary>, what: &str| {
            d.clone()
                .ok_or_else(|| Error::validation(format!("scope {} needs a {what} dictionary", self.scope)))
        };
        match self.scope {
            ScopeMode::VisionIntra => {
                let d = need(&dicts.vision, "vision")?;
                self.check_width(&d, self.key.d_in)?;
                Ok(DictView {
                    features: s.constant(d.features()),
                    priors: d.priors(),
                    index: index_for(&d, Stream::Vision, 0).collect(),
                })
            }
            ScopeMode::LanguageIntra => {
                let d = need(&dicts.language, "language")?;
                self.check_width(&d, self.key.d_in)?;
                Ok(DictView {
                    features: s.constant(d.features()),
                    priors: d.priors(),
                    index: index_for(&d, Stream::Language, 0).collect(),
                })
            }
            ScopeMode::InterModal => {
                let l = need(&dicts.language, "language")?;
                let v = need(&dicts.vision, "vision")?;
                let jl = self.joint_lang.as_ref().expect("inter-modal head has joint maps");
                let jv = self.joint_vis.as_ref().expect("inter-modal head has joint maps");
                self.check_width(&l, jl.d_in)?;
                self.check_width(&v, jv.d_in)?;
                let fl = jl.forward(s, &s.constant(l.features()))?;
                let fv = jv.forward(s, &s.constant(v.features()))?;
                let features = s.tape().concat(&[fl, fv], 0)?;
                let priors = l.priors().into_iter().chain(v.priors()).map(|p| p / 2.0).collect();
                let index = index_for(&l, Stream::Language, 0)
                    .chain(index_for(&v, Stream::Vision, l.len()))
                    .collect();
                Ok(DictView {
                    features,
                    priors,
                    index,
                })
            }
        }
    }

    fn check_width(&self, d: &ConfounderDictionary, want: usize) -> Result<()> {
        if d.feature_dim() != want {
            return Err(Error::dim("confounder features", &[d.len(), d.feature_dim()], &[d.len(), want]));
        }
        Ok(())
    }

    /// `alpha(z)` for each query row `[P x m]`. `exclude[p]` is the entry
    /// zeroed for row `p`.
    pub fn alpha_weights<'t>(
        &self,
        s: &Session<'t>,
        queries: &Var<'t>,
        stream: Stream,
        view: &DictView<'t>,
        exclude: &[Option<usize>],
    ) -> Result<Var<'t>> {
        let q = self.query(stream)?.forward(s, queries)?;
        let k = self.key.forward(s, &view.features)?;
        let scores = q.matmul_bt(&k)?;
        let p = exclude.len();
        let m = view.len();
        if scores.shape() != [p, m] {
            return Err(Error::dim("alpha_weights", &scores.shape(), &[p, m]));
        }
        let mut mask = Tensor::filled(&[p, m], 1.0);
        for (r, ex) in exclude.iter().enumerate() {
            if let Some(j) = ex {
                mask.data_mut()[r * m + j] = 0.0;
            }
        }
        match self.options.alpha_norm {
            AlphaNorm::Ratio => scores.ratio_normalize(mask, self.options.eps_den),
            AlphaNorm::Softmax => scores.masked_softmax(&mask),
        }
    }

    /// Logits `[P x target_dim]`. `x` must be given exactly for designs A/B/C.
    pub fn intervention_logits<'t>(
        &self,
        s: &Session<'t>,
        x: Option<&Var<'t>>,
        y: &Var<'t>,
        stream: Stream,
        view: &DictView<'t>,
        exclude: &[Option<usize>],
    ) -> Result<Var<'t>> {
        if x.is_some() != self.design.has_x() {
            return Err(Error::validation(format!(
                "design {} {} an x input",
                self.design,
                if self.design.has_x() { "needs" } else { "takes no" }
            )));
        }
        let alpha = self.alpha_weights(s, y, stream, view, exclude)?;
        let p = exclude.len();
        let prior_rows: Vec<f64> = (0..p).flat_map(|_| view.priors.iter().copied()).collect();
        let weighted = alpha.mul_const(Tensor::new(vec![p, view.len()], prior_rows)?)?;
        let pooled = weighted.matmul(&view.features)?;
        let input = match x {
            Some(x) => s.tape().concat(&[*x, pooled], 1)?,
            None => pooled,
        };
        if input.shape()[1] != self.classifier.d_in {
            return Err(Error::dim("intervention classifier", &input.shape(), &[p, self.classifier.d_in]));
        }
        self.invocations.fetch_add(p, Ordering::Relaxed);
        self.classifier.forward(s, &input)
    }

    /// Label distribution of `target` in this head's target space.
    pub fn target_row(&self, target: TokenRef, tokens: &TokenSequence, regions: &RegionSequence) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.target_dim()];
        match target.stream {
            Stream::Language => {
                let id = tokens.ids()[target.pos];
                if id >= self.vocab_size || id >= row.len() {
                    return Err(Error::validation(format!("target word {id} outside the target space")));
                }
                row[id] = 1.0;
            }
            Stream::Vision => {
                let offset = if self.scope == ScopeMode::InterModal { self.vocab_size } else { 0 };
                let label = regions.soft_labels().row(target.pos);
                if label.len() != self.num_classes {
                    return Err(Error::validation("soft label width differs from num_classes"));
                }
                row[offset..offset + label.len()].copy_from_slice(label);
            }
        }
        Ok(row)
    }

    /// Class id used for exclusion: word id or argmax object class.
    pub fn class_of(&self, r: TokenRef, tokens: &TokenSequence, regions: &RegionSequence) -> usize {
        match r.stream {
            Stream::Language => tokens.ids()[r.pos],
            Stream::Vision => regions.class_of(r.pos),
        }
    }

    /// The selections this head makes for one example.
    pub fn selections(&self, tokens: &TokenSequence, regions: &RegionSequence) -> Vec<Selection> {
        select(self.design, self.scope, tokens, regions)
    }

    /// Mean cross-entropy of the head over its selections for one example,
    /// with the number of selections. `None` when nothing is selected.
    ///
    /// `tokens`/`regions` are the masked inputs; labels come from their
    /// stored originals.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<'t>(
        &self,
        s: &Session<'t>,
        view: &DictView<'t>,
        masked: &StreamOutput<'t>,
        clean: Option<&StreamOutput<'t>>,
        tokens: &TokenSequence,
        regions: &RegionSequence,
    ) -> Result<Option<(Var<'t>, usize)>> {
        let sel = self.selections(tokens, regions);
        if sel.is_empty() {
            return Ok(None);
        }
        if self.design.needs_clean_pass() {
            let c = clean.ok_or_else(|| Error::Internal(format!("design {} needs a clean pass", self.design)))?;
            if c.lang_final.shape() != masked.lang_final.shape() || c.vis_final.shape() != masked.vis_final.shape() {
                return Err(Error::Internal("clean and masked passes differ in shape".into()));
            }
        }
        let total = sel.len();
        let mut sum: Option<Var<'t>> = None;
        for stream in [Stream::Language, Stream::Vision] {
            let group: Vec<&Selection> = sel.iter().filter(|g| g.y.stream == stream).collect();
            if group.is_empty() {
                continue;
            }
            let y_clean = group[0].y_clean;
            let source = if y_clean { clean.expect("checked above") } else { masked };
            let y_pos: Vec<usize> = group.iter().map(|g| g.y.pos).collect();
            let mut y = stream_rows(source, stream).gather_rows(&y_pos)?;
            if y_clean && self.options.stop_gradient_clean {
                y = y.detach();
            }
            let x = if self.design.has_x() {
                let xs: Vec<TokenRef> = group.iter().map(|g| g.x.expect("design has x")).collect();
                Some(gather_mixed(s, masked, &xs)?)
            } else {
                None
            };
            let exclude: Vec<Option<usize>> = group
                .iter()
                .map(|g| {
                    if self.design == Design::D || !self.options.exclusion {
                        None
                    } else {
                        view.index_of(g.y.stream, self.class_of(g.y, tokens, regions))
                    }
                })
                .collect();
            let logits = self.intervention_logits(s, x.as_ref(), &y, stream, view, &exclude)?;
            let rows = group
                .iter()
                .map(|g| self.target_row(g.target, tokens, regions))
                .collect::<Result<Vec<_>>>()?;
            let ce = logits.cross_entropy_soft(Tensor::from_rows(&rows)?)?;
            let part = ce.scale(group.len() as f64);
            sum = Some(match sum {
                Some(acc) => acc.add(&part)?,
                None => part,
            });
        }
        let sum = sum.expect("nonempty selection");
        Ok(Some((sum.scale(1.0 / total as f64), total)))
    }

    /// Masked positions whose MTM loss this head takes over (A and B only):
    /// `(language positions, region positions)`.
    pub fn intervened_positions(&self, tokens: &TokenSequence, regions: &RegionSequence) -> (Vec<usize>, Vec<usize>) {
        if !self.design.replaces_mtm() {
            return (vec![], vec![]);
        }
        let mut lang = Vec::new();
        let mut vis = Vec::new();
        for g in self.selections(tokens, regions) {
            match g.target.stream {
                Stream::Language => lang.push(g.target.pos),
                Stream::Vision => vis.push(g.target.pos),
            }
        }
        lang.sort_unstable();
        lang.dedup();
        vis.sort_unstable();
        vis.dedup();
        (lang, vis)
    }
}

fn index_for(
    d: &ConfounderDictionary,
    stream: Stream,
    offset: usize,
) -> impl Iterator<Item = ((Stream, usize), usize)> + '_ {
    d.entries
        .iter()
        .enumerate()
        .map(move |(i, e)| ((stream, e.class_id), i + offset))
}

fn stream_rows<'t>(out: &StreamOutput<'t>, stream: Stream) -> Var<'t> {
    match stream {
        Stream::Language => out.lang_final,
        Stream::Vision => out.vis_final,
    }
}

/// Rows of `out` at mixed-stream positions, in order.
fn gather_mixed<'t>(s: &Session<'t>, out: &StreamOutput<'t>, refs: &[TokenRef]) -> Result<Var<'t>> {
    if refs.iter().all(|r| r.stream == refs[0].stream) {
        let pos: Vec<usize> = refs.iter().map(|r| r.pos).collect();
        return stream_rows(out, refs[0].stream).gather_rows(&pos);
    }
    let n_lang = out.lang_final.shape()[0];
    let both = s.tape().concat(&[out.lang_final, out.vis_final], 0)?;
    let idx: Vec<usize> = refs
        .iter()
        .map(|r| match r.stream {
            Stream::Language => r.pos,
            Stream::Vision => n_lang + r.pos,
        })
        .collect();
    both.gather_rows(&idx)
}
