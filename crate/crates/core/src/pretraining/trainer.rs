use super::losses::{alignment_loss, mlm_loss, mom_loss, PretrainHeads};
use super::masking::{apply_masking, MaskingPolicy};
use crate::deconfound::{
    build_language_dictionary, build_vision_dictionary, Design, Dictionaries, HeadOptions,
    InterventionHead, ScopeMode,
};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, ParamGrads, ParamStore, Session, Tape, Tensor, Var};
use crate::two_stream::{ModelConfig, RegionSequence, StreamOutput, TokenSequence, TwoStreamModel};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Weights of the proxy tasks; `None` disables an objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub mlm: Option<f64>,
    pub mom: Option<f64>,
    pub align: Option<f64>,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            mlm: Some(1.0),
            mom: Some(1.0),
            align: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub design: Design,
    pub scope: ScopeMode,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl DesignSpec {
    pub fn new(design: Design, scope: ScopeMode) -> Self {
        Self {
            design,
            scope,
            weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    /// Masked-token and intervention losses use aligned pairs only.
    pub mtm_aligned_only: bool,
    pub head: HeadOptions,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            mtm_aligned_only: true,
            head: HeadOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: TokenSequence,
    pub regions: RegionSequence,
    pub aligned: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Batch {
    pub examples: Vec<Example>,
}

/// Masks the pairs at `indices`. With probability `negative_rate` a pair's
/// sentence is swapped for the sentence of another pair (image kept).
pub fn build_batch<R: Rng + ?Sized>(
    pairs: &[(TokenSequence, RegionSequence)],
    indices: &[usize],
    policy: &MaskingPolicy,
    vocab_size: usize,
    negative_rate: f64,
    rng: &mut R,
) -> Result<Batch> {
    let mut examples = Vec::with_capacity(indices.len());
    for &i in indices {
        let (tokens, regions) = pairs
            .get(i)
            .ok_or_else(|| Error::validation(format!("pair index {i} out of range")))?;
        let negative = pairs.len() > 1 && rng.random::<f64>() < negative_rate;
        let tokens = if negative {
            let mut j = rng.random_range(0..pairs.len() - 1);
            if j >= i {
                j += 1;
            }
            &pairs[j].0
        } else {
            tokens
        };
        let (t, r) = apply_masking(tokens, regions, policy, vocab_size, rng)?;
        examples.push(Example {
            tokens: t,
            regions: r,
            aligned: !negative,
        });
    }
    Ok(Batch { examples })
}

/// Per-objective values of one step, `total` included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    #[serde(flatten)]
    pub losses: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.losses["total"]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub steps: u64,
    pub batch_size: usize,
    pub negative_rate: f64,
    pub min_count: usize,
    /// Rebuild dictionaries from the current model every k steps.
    pub refresh_every: Option<u64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            negative_rate: 0.5,
            min_count: 2,
            refresh_every: None,
        }
    }
}

/// Model, heads, dictionaries and optimizer state of one run.
#[derive(Debug)]
pub struct Pretrainer {
    pub store: ParamStore,
    pub model: TwoStreamModel,
    pub heads: PretrainHeads,
    pub interventions: Vec<(InterventionHead, f64)>,
    pub dictionaries: Dictionaries,
    pub objectives: ObjectiveWeights,
    pub masking: MaskingPolicy,
    pub options: TrainOptions,
    pub optimizer: Adam,
    step: u64,
}

struct Accum<'t> {
    sum: Option<Var<'t>>,
    n: usize,
}

impl<'t> Accum<'t> {
    fn new() -> Self {
        Self { sum: None, n: 0 }
    }

    fn push(&mut self, v: Var<'t>) -> Result<()> {
        self.sum = Some(match self.sum {
            Some(s) => s.add(&v)?,
            None => v,
        });
        self.n += 1;
        Ok(())
    }

    fn mean(&self) -> Option<Var<'t>> {
        self.sum.map(|s| s.scale(1.0 / self.n as f64))
    }
}

impl Pretrainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        masking: MaskingPolicy,
        objectives: ObjectiveWeights,
        designs: &[DesignSpec],
        options: TrainOptions,
        adam: AdamConfig,
        rng: &mut R,
    ) -> Result<Self> {
        masking.validate()?;
        let mut seen = std::collections::HashSet::new();
        for d in designs {
            InterventionHead::validate_combo(d.design, d.scope, &config)?;
            if !seen.insert((d.design, d.scope)) {
                return Err(Error::validation(format!(
                    "design {} with scope {} listed twice",
                    d.design, d.scope
                )));
            }
        }
        let mut store = ParamStore::new();
        let model = TwoStreamModel::new(config.clone(), &mut store, rng)?;
        let heads = PretrainHeads::new(&mut store, rng, &config)?;
        let interventions = designs
            .iter()
            .map(|d| {
                Ok((
                    InterventionHead::new(&mut store, rng, d.design, d.scope, &config, options.head)?,
                    d.weight,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let optimizer = Adam::new(adam, &store);
        Ok(Self {
            store,
            model,
            heads,
            interventions,
            dictionaries: Dictionaries::default(),
            objectives,
            masking,
            options,
            optimizer,
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Keys a loss report will carry, `total` excluded.
    pub fn objective_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.objectives.mlm.is_some() {
            names.push("mlm".to_string());
        }
        if self.objectives.mom.is_some() {
            names.push("mom".to_string());
        }
        if self.objectives.align.is_some() {
            names.push("align".to_string());
        }
        names.extend(self.interventions.iter().map(|(h, _)| h.objective_name()));
        names
    }

    fn needs_clean_pass(&self) -> bool {
        self.interventions.iter().any(|(h, _)| h.design.needs_clean_pass())
    }

    /// Final language rows of the current model for one pair, no masks.
    pub fn contextual_language(&self, tokens: &TokenSequence, regions: &RegionSequence) -> Result<Tensor> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let out = self
            .model
            .forward(&s, &tokens.unmasked_copy(), &regions.unmasked_copy())?;
        Ok((*out.lang_final.value()).clone())
    }

    /// Builds whichever dictionaries the active heads need.
    pub fn build_dictionaries(
        &mut self,
        pairs: &[(TokenSequence, RegionSequence)],
        min_count: usize,
    ) -> Result<()> {
        let need_vis = self.interventions.iter().any(|(h, _)| h.needs_vision_dictionary());
        let need_lang = self.interventions.iter().any(|(h, _)| h.needs_language_dictionary());
        let vision = if need_vis {
            Some(build_vision_dictionary(pairs.iter().map(|p| &p.1), min_count)?)
        } else {
            None
        };
        let language = if need_lang {
            Some(build_language_dictionary(
                pairs.iter().map(|p| &p.0),
                |i, seq| self.contextual_language(seq, &pairs[i].1),
                min_count,
            )?)
        } else {
            None
        };
        self.model.reset_passes();
        self.dictionaries = Dictionaries { vision, language };
        Ok(())
    }

    /// Weighted total loss of a batch and the value of every objective.
    pub fn batch_loss<'t>(
        &self,
        s: &Session<'t>,
        batch: &Batch,
    ) -> Result<(Var<'t>, BTreeMap<String, f64>)> {
        let views = self
            .interventions
            .iter()
            .map(|(h, _)| h.dictionary_view(s, &self.dictionaries))
            .collect::<Result<Vec<_>>>()?;
        let mut mlm = Accum::new();
        let mut mom = Accum::new();
        let mut align = Accum::new();
        let mut inter: Vec<Accum<'t>> = self.interventions.iter().map(|_| Accum::new()).collect();

        for ex in &batch.examples {
            let out = self.model.forward(s, &ex.tokens, &ex.regions)?;
            if self.objectives.align.is_some() {
                align.push(alignment_loss(s, &out, ex.aligned, &self.heads)?)?;
            }
            if self.options.mtm_aligned_only && !ex.aligned {
                continue;
            }
            let clean: Option<StreamOutput<'t>> = if self.needs_clean_pass() {
                Some(self.model.forward(
                    s,
                    &ex.tokens.unmasked_copy(),
                    &ex.regions.unmasked_copy(),
                )?)
            } else {
                None
            };
            let mut skip_lang = Vec::new();
            let mut skip_vis = Vec::new();
            for ((head, _), (acc, view)) in self.interventions.iter().zip(inter.iter_mut().zip(&views)) {
                let (l, v) = head.intervened_positions(&ex.tokens, &ex.regions);
                skip_lang.extend(l);
                skip_vis.extend(v);
                if let Some((loss, _)) = head.loss(s, view, &out, clean.as_ref(), &ex.tokens, &ex.regions)? {
                    acc.push(loss)?;
                }
            }
            if self.objectives.mlm.is_some() {
                if let Some(l) = mlm_loss(s, &out, &ex.tokens, self.model.word_emb, &self.heads, &skip_lang)? {
                    mlm.push(l)?;
                }
            }
            if self.objectives.mom.is_some() {
                if let Some(l) = mom_loss(s, &out, &ex.regions, &self.heads, &skip_vis)? {
                    mom.push(l)?;
                }
            }
        }

        let mut report = BTreeMap::new();
        let mut total: Option<Var<'t>> = None;
        let mut add = |name: String, acc: &Accum<'t>, w: f64, report: &mut BTreeMap<String, f64>| -> Result<()> {
            let mean = acc.mean();
            report.insert(name, mean.map(|m| m.value().item()).unwrap_or(0.0));
            if let Some(m) = mean {
                let part = m.scale(w);
                total = Some(match total {
                    Some(t) => t.add(&part)?,
                    None => part,
                });
            }
            Ok(())
        };
        if let Some(w) = self.objectives.mlm {
            add("mlm".into(), &mlm, w, &mut report)?;
        }
        if let Some(w) = self.objectives.mom {
            add("mom".into(), &mom, w, &mut report)?;
        }
        if let Some(w) = self.objectives.align {
            add("align".into(), &align, w, &mut report)?;
        }
        for ((head, w), acc) in self.interventions.iter().zip(&inter) {
            add(head.objective_name(), acc, *w, &mut report)?;
        }
        let total = total.unwrap_or_else(|| s.constant(Tensor::scalar(0.0)));
        report.insert("total".into(), total.value().item());
        Ok((total, report))
    }

    /// One optimizer step on `batch`. A non-finite loss or gradient aborts
    /// the step before any parameter changes.
    pub fn training_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let (report, grads) = {
            let tape = Tape::new();
            let s = Session::new(&tape, &self.store);
            let (total, losses) = self.batch_loss(&s, batch)?;
            let grads = if total.requires_grad() {
                Some(s.backward(total)?)
            } else {
                None
            };
            (losses, grads)
        };
        if report.values().any(|v| !v.is_finite()) || grads.as_ref().is_some_and(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite loss at step {}: {}",
                self.step,
                serde_json::to_string(&report).unwrap_or_default()
            )));
        }
        if let Some(g) = grads {
            self.apply(&g);
        }
        self.step += 1;
        Ok(LossReport {
            step: self.step,
            losses: report,
        })
    }

    fn apply(&mut self, grads: &ParamGrads) {
        self.store.zero_grad();
        self.store.accumulate(grads);
        self.optimizer.step(&mut self.store);
    }

    /// Runs `schedule.steps` steps over shuffled passes through `pairs`,
    /// calling `on_step` after each.
    pub fn train<R, F>(
        &mut self,
        pairs: &[(TokenSequence, RegionSequence)],
        schedule: &Schedule,
        rng: &mut R,
        mut on_step: F,
    ) -> Result<()>
    where
        R: Rng + ?Sized,
        F: FnMut(&Pretrainer, &LossReport) -> Result<()>,
    {
        if pairs.is_empty() {
            return Err(Error::validation("training corpus is empty"));
        }
        if schedule.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !self.interventions.is_empty() && self.dictionaries == Dictionaries::default() {
            self.build_dictionaries(pairs, schedule.min_count)?;
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut cursor = order.len();
        for _ in 0..schedule.steps {
            if let Some(k) = schedule.refresh_every {
                if k > 0 && self.step > 0 && self.step % k == 0 && !self.interventions.is_empty() {
                    self.build_dictionaries(pairs, schedule.min_count)?;
                }
            }
            let mut idx = Vec::with_capacity(schedule.batch_size);
            while idx.len() < schedule.batch_size {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let batch = build_batch(
                pairs,
                &idx,
                &self.masking,
                self.config().vocab_size,
                schedule.negative_rate,
                rng,
            )?;
            let report = self.training_step(&batch)?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}
