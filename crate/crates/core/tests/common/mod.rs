//! Shared fixtures, scalar oracles and property suites for the integration
//! tests and the acceptance target.
#![allow(dead_code)]

use devl::deconfound::{
    scope_positions, ConfounderDictionary, ConfounderEntry, Design, Dictionaries, DictionaryModality,
    HeadOptions, InterventionHead, ScopeMode, Stream,
};
use devl::numerics::gradcheck::{check_inputs, check_params, GradCheckReport, DEFAULT_STEP};
use devl::numerics::{ParamStore, Session, Tape, Tensor, Var};
use devl::pretraining::{
    apply_masking, Batch, DesignSpec, Example, MaskingPolicy, ObjectiveWeights, Pretrainer, TrainOptions,
};
use devl::two_stream::{
    CoAttentionLayer, ModelConfig, RegionMask, RegionSequence, TokenMask, TokenSequence, TransformerLayer,
    TwoStreamModel, CLS_ID, NUM_SPECIAL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use num_bigint::BigInt;
use num_rational::BigRational;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            scale * v
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Row-stochastic `[n x c]` tensor.
pub fn rand_dist(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let r: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|v| v / s).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// The desk-scale shape used by the gradient checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        num_classes: 4,
        feat_dim: 3,
        d_lang: 8,
        d_vis: 8,
        lang_layers: 1,
        co_blocks: 1,
        heads: 2,
        ffn_width: 8,
        max_words: 8,
        max_regions: 6,
    }
}

pub fn rand_box(rng: &mut ChaCha8Rng) -> [f64; 5] {
    let (a, b): (f64, f64) = (rng.random(), rng.random());
    let (c, d): (f64, f64) = (rng.random(), rng.random());
    let (x1, x2) = (a.min(b), a.max(b));
    let (y1, y2) = (c.min(d), c.max(d));
    [x1, y1, x2, y2, (x2 - x1) * (y2 - y1)]
}

/// A random unmasked pair with `words` words after `[CLS]` and `regions` regions.
pub fn rand_pair(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    words: usize,
    regions: usize,
) -> (TokenSequence, RegionSequence) {
    let mut ids = vec![CLS_ID];
    let mut nouns = vec![false];
    for _ in 0..words {
        ids.push(rng.random_range(NUM_SPECIAL..cfg.vocab_size));
        nouns.push(rng.random::<f64>() < 0.6);
    }
    let tokens = TokenSequence::new(ids, nouns).unwrap();
    let feats: Vec<Vec<f64>> = (0..regions)
        .map(|_| (0..cfg.feat_dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let boxes: Vec<[f64; 5]> = (0..regions).map(|_| rand_box(rng)).collect();
    let labels = rand_dist(rng, regions, cfg.num_classes);
    let label_rows: Vec<Vec<f64>> = (0..regions).map(|i| labels.row(i).to_vec()).collect();
    let regions = RegionSequence::from_regions(&feats, &boxes, &label_rows, cfg.feat_dim, cfg.num_classes).unwrap();
    (tokens, regions)
}

/// Masks each maskable position independently with probability `p`,
/// cycling through the mask kinds.
pub fn rand_masks(
    rng: &mut ChaCha8Rng,
    tokens: &TokenSequence,
    regions: &RegionSequence,
    p: f64,
    vocab: usize,
) -> (TokenSequence, RegionSequence) {
    let mut t = tokens.unmasked_copy();
    let mut r = regions.unmasked_copy();
    for pos in 1..t.len() {
        if rng.random::<f64>() < p {
            let st = match rng.random_range(0..3) {
                0 => TokenMask::ToMask,
                1 => TokenMask::Kept,
                _ => TokenMask::Random(rng.random_range(NUM_SPECIAL..vocab)),
            };
            t.set_state(pos, st).unwrap();
        }
    }
    for i in 1..r.len() {
        if rng.random::<f64>() < p {
            let st = if rng.random::<f64>() < 0.2 {
                RegionMask::KeptOriginal
            } else {
                RegionMask::Masked
            };
            r.set_state(i, st).unwrap();
        }
    }
    (t, r)
}

// ---------------------------------------------------------------------------
// Scalar oracles
// ---------------------------------------------------------------------------

pub fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn loop_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                c[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    c
}

pub fn loop_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

pub fn loop_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn loop_layer_norm(x: &[Vec<f64>], gain: &[f64], bias: &[f64], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn loop_affine(store: &ParamStore, lin: &devl::numerics::Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut y = loop_matmul(x, &mat(store.get(lin.weight)));
    if let Some(b) = lin.bias {
        let b = store.get(b).data();
        for row in &mut y {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    y
}

fn add_m(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect())
        .collect()
}

/// Multi-head attention by explicit loops over heads, queries and keys.
pub fn loop_attention(
    store: &ParamStore,
    block: &devl::two_stream::AttentionBlock,
    x: &[Vec<f64>],
    ctx: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let q = loop_affine(store, &block.query, x);
    let k = loop_affine(store, &block.key, ctx);
    let v = loop_affine(store, &block.value, ctx);
    let d = q[0].len();
    let dh = d / block.heads;
    let mut mixed = vec![vec![0.0; d]; x.len()];
    for h in 0..block.heads {
        for i in 0..x.len() {
            let scores: Vec<f64> = (0..ctx.len())
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = loop_softmax(&scores);
            for c in 0..dh {
                mixed[i][h * dh + c] = (0..ctx.len()).map(|j| w[j] * v[j][h * dh + c]).sum();
            }
        }
    }
    loop_affine(store, &block.output, &mixed)
}

pub fn loop_norm(store: &ParamStore, n: &devl::numerics::Norm, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    loop_layer_norm(
        x,
        store.get(n.gain).data(),
        store.get(n.bias).data(),
        devl::numerics::LAYER_NORM_EPS,
    )
}

/// attention, add & norm, GeLU feed-forward, add & norm.
pub fn loop_layer(store: &ParamStore, l: &TransformerLayer, x: &[Vec<f64>], ctx: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let a = loop_attention(store, &l.attention, x, ctx);
    let h = loop_norm(store, &l.norm1, &add_m(x, &a));
    let inner: Vec<Vec<f64>> = loop_affine(store, &l.ffn_in, &h)
        .into_iter()
        .map(|r| r.into_iter().map(loop_gelu).collect())
        .collect();
    let ff = loop_affine(store, &l.ffn_out, &inner);
    loop_norm(store, &l.norm2, &add_m(&h, &ff))
}

pub fn max_abs(a: &[Vec<f64>], b: &Tensor) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - b.at(i, j)).abs());
        }
    }
    m
}

/// Soft cross-entropy by loops: mean over rows of -sum t log softmax(l).
pub fn loop_soft_ce(logits: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(l, t)| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            -t.iter().zip(l).map(|(tv, lv)| tv * (lv - lse)).sum::<f64>()
        })
        .sum::<f64>()
        / n
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

/// Weighted sum `sum(out * w)`; avoids the degenerate gradient of a plain sum
/// through normalisations.
pub fn probe_sum<'t>(out: &Var<'t>, w: &Tensor) -> Var<'t> {
    out.mul_const(w.clone()).unwrap().sum()
}

pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn case(name: &str, report: devl::Result<GradCheckReport>) -> GradCase {
    GradCase {
        name: name.to_string(),
        report: report.unwrap_or_else(|e| panic!("{name}: {e}")),
    }
}

/// Every differentiable primitive on randomized small shapes.
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let h = DEFAULT_STEP;
    let a23 = randn(&mut r, &[2, 3], 1.0);
    let b34 = randn(&mut r, &[3, 4], 1.0);
    let b43 = randn(&mut r, &[4, 3], 1.0);
    let c23 = randn(&mut r, &[2, 3], 1.0);
    let w23 = randn(&mut r, &[2, 3], 1.0);
    let w24 = randn(&mut r, &[2, 4], 1.0);
    let w32 = randn(&mut r, &[3, 2], 1.0);
    let row3 = randn(&mut r, &[3], 1.0);
    let x24 = randn(&mut r, &[2, 4], 1.5);
    let g4 = randn(&mut r, &[4], 1.0);
    let b4 = randn(&mut r, &[4], 1.0);
    let l35 = randn(&mut r, &[3, 5], 2.0);
    let t35 = rand_dist(&mut r, 3, 5);
    let bce = randn(&mut r, &[4, 1], 2.0);
    let table = randn(&mut r, &[4, 3], 1.0);
    let w_gather = randn(&mut r, &[3, 3], 1.0);
    let w_cat0 = randn(&mut r, &[4, 3], 1.0);
    let w_cat1 = randn(&mut r, &[2, 6], 1.0);
    let scores = {
        // Keep denominators away from zero so the ratio is smooth here.
        let mut s = randn(&mut r, &[3, 4], 0.3);
        s.data_mut().iter_mut().for_each(|v| *v += 1.0);
        s
    };
    let mut mask = Tensor::filled(&[3, 4], 1.0);
    mask.data_mut()[2] = 0.0;
    mask.data_mut()[5] = 0.0;
    let w34 = randn(&mut r, &[3, 4], 1.0);
    let away = {
        // Entries bounded away from the ReLU kink.
        let mut t = randn(&mut r, &[2, 3], 1.0);
        t.data_mut().iter_mut().for_each(|v| *v += v.signum() * 0.1);
        t
    };

    vec![
        case("matmul", check_inputs(&[a23.clone(), b34.clone()], |_, v| Ok(probe_sum(&v[0].matmul(&v[1])?, &w24)), h)),
        case("matmul_bt", check_inputs(&[a23.clone(), b43.clone()], |_, v| Ok(probe_sum(&v[0].matmul_bt(&v[1])?, &w24)), h)),
        case("transpose", check_inputs(&[a23.clone()], |_, v| Ok(probe_sum(&v[0].transpose()?, &w32)), h)),
        case("add", check_inputs(&[a23.clone(), c23.clone()], |_, v| Ok(probe_sum(&v[0].add(&v[1])?, &w23)), h)),
        case("sub", check_inputs(&[a23.clone(), c23.clone()], |_, v| Ok(probe_sum(&v[0].sub(&v[1])?, &w23)), h)),
        case("mul", check_inputs(&[a23.clone(), c23.clone()], |_, v| Ok(probe_sum(&v[0].mul(&v[1])?, &w23)), h)),
        case("add_row", check_inputs(&[a23.clone(), row3.clone()], |_, v| Ok(probe_sum(&v[0].add_row(&v[1])?, &w23)), h)),
        case("scale", check_inputs(&[a23.clone()], |_, v| Ok(probe_sum(&v[0].scale(-1.7), &w23)), h)),
        case("mul_const", check_inputs(&[a23.clone()], |_, v| Ok(probe_sum(&v[0].mul_const(c23.clone())?, &w23)), h)),
        case("gelu", check_inputs(&[a23.clone()], |_, v| Ok(probe_sum(&v[0].gelu(), &w23)), h)),
        case("relu", check_inputs(&[away], |_, v| Ok(probe_sum(&v[0].relu(), &w23)), h)),
        case("softmax_rows", check_inputs(&[a23.clone()], |_, v| Ok(probe_sum(&v[0].softmax(1)?, &w23)), h)),
        case("softmax_cols", check_inputs(&[a23.clone()], |_, v| Ok(probe_sum(&v[0].softmax(0)?, &w23)), h)),
        case(
            "layer_norm",
            check_inputs(&[x24, g4, b4], |_, v| Ok(probe_sum(&v[0].layer_norm(&v[1], &v[2], 1e-5)?, &w24)), h),
        ),
        case("cross_entropy_soft", check_inputs(&[l35], |_, v| v[0].cross_entropy_soft(t35.clone()), h)),
        case("bce_with_logits", check_inputs(&[bce], |_, v| v[0].bce_with_logits(&[1.0, 0.0, 1.0, 0.0]), h)),
        case(
            "embedding_lookup",
            check_inputs(&[table.clone()], |_, v| Ok(probe_sum(&v[0].gather_rows(&[2, 0, 2])?, &w_gather)), h),
        ),
        case("slice_cols", check_inputs(&[b34.clone()], |_, v| Ok(probe_sum(&v[0].slice_cols(1, 2)?, &w32)), h)),
        case("rows", check_inputs(&[table.clone()], |_, v| Ok(probe_sum(&v[0].rows(1, 2)?, &w23)), h)),
        case(
            "concat_rows",
            check_inputs(&[a23.clone(), c23.clone()], |t, v| Ok(probe_sum(&t.concat(&[v[0], v[1]], 0)?, &w_cat0)), h),
        ),
        case(
            "concat_cols",
            check_inputs(&[a23.clone(), c23.clone()], |t, v| Ok(probe_sum(&t.concat(&[v[0], v[1]], 1)?, &w_cat1)), h),
        ),
        case("mean_pool", check_inputs(&[table], |_, v| Ok(probe_sum(&v[0].mean_rows()?, &row3.clone().reshape(vec![1, 3]).unwrap())), h)),
        case("sum", check_inputs(&[a23.clone()], |_, v| Ok(v[0].sum()), h)),
        case("mean", check_inputs(&[a23.clone()], |_, v| Ok(v[0].mean()), h)),
        case(
            "ratio_normalize",
            check_inputs(&[scores.clone()], |_, v| Ok(probe_sum(&v[0].ratio_normalize(mask.clone(), 1e-8)?, &w34)), h),
        ),
        case(
            "masked_softmax",
            check_inputs(&[scores], |_, v| Ok(probe_sum(&v[0].masked_softmax(&mask)?, &w34)), h),
        ),
    ]
}

/// A transformer layer and a co-attention layer, w.r.t. parameters and inputs.
pub fn layer_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let layer = TransformerLayer::new(&mut store, &mut r, "t", 8, 8, 2, 8).unwrap();
    let co = CoAttentionLayer::new(&mut store, &mut r, "c", 8, 4, 2, 8).unwrap();
    // Move off the near-identity initialisation.
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let noise = randn(&mut r, &shape, 0.3);
        for (v, n) in store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let x = randn(&mut r, &[3, 8], 1.0);
    let v = randn(&mut r, &[2, 4], 1.0);
    let wx = randn(&mut r, &[3, 8], 1.0);
    let wv = randn(&mut r, &[2, 4], 1.0);
    let layer_ids: Vec<_> = store.ids().filter(|&i| store.param(i).name.starts_with("t.")).collect();
    let co_ids: Vec<_> = store.ids().filter(|&i| store.param(i).name.starts_with("c.")).collect();

    let mut out = Vec::new();
    {
        let (x, wx) = (x.clone(), wx.clone());
        let layer = layer.clone();
        out.push(case(
            "transformer_layer/params",
            check_params(
                &mut store,
                &layer_ids,
                move |s| Ok(probe_sum(&layer.forward(s, &s.constant(x.clone()))?, &wx)),
                DEFAULT_STEP,
                1,
            ),
        ));
    }
    {
        let (x, v, wx, wv) = (x.clone(), v.clone(), wx.clone(), wv.clone());
        let co = co.clone();
        out.push(case(
            "co_attention_layer/params",
            check_params(
                &mut store,
                &co_ids,
                move |s| {
                    let (l, o) = co.forward(s, &s.constant(x.clone()), &s.constant(v.clone()))?;
                    probe_sum(&l, &wx).add(&probe_sum(&o, &wv))
                },
                DEFAULT_STEP,
                1,
            ),
        ));
    }
    // Sessions bind the store for the tape's lifetime, which the checker
    // chooses; a leaked store outlives any of them.
    let frozen: &'static ParamStore = Box::leak(Box::new(store));
    out.push(case(
        "transformer_layer/input",
        check_inputs(
            &[x.clone()],
            |t, vars| {
                let s = Session::new(t, frozen);
                Ok(probe_sum(&layer.forward(&s, &vars[0])?, &wx))
            },
            DEFAULT_STEP,
        ),
    ));
    out.push(case(
        "co_attention_layer/inputs",
        check_inputs(
            &[x, v],
            |t, vars| {
                let s = Session::new(t, frozen);
                let (l, o) = co.forward(&s, &vars[0], &vars[1])?;
                probe_sum(&l, &wx).add(&probe_sum(&o, &wv))
            },
            DEFAULT_STEP,
        ),
    ));
    out
}

/// Full encoder at `{N_l=1, heads=2, d=8, N_w=4, N_v=3}`.
pub fn model_case(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let cfg = ModelConfig {
        max_words: 4,
        max_regions: 3,
        ..tiny_config()
    };
    let mut store = ParamStore::new();
    let model = TwoStreamModel::new(cfg.clone(), &mut store, &mut r).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let noise = randn(&mut r, &shape, 0.2);
        for (v, n) in store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let (t, rg) = rand_pair(&mut r, &cfg, 3, 3);
    let (t, rg) = rand_masks(&mut r, &t, &rg, 0.5, cfg.vocab_size);
    let wl = randn(&mut r, &[4, 8], 1.0);
    let wv = randn(&mut r, &[4, 8], 1.0);
    let ids: Vec<_> = store.ids().collect();
    case(
        "two_stream_forward/params",
        check_params(
            &mut store,
            &ids,
            |s| {
                let out = model.forward(s, &t, &rg)?;
                probe_sum(&out.lang_final, &wl).add(&probe_sum(&out.vis_final, &wv))
            },
            DEFAULT_STEP,
            1,
        ),
    )
}

/// A trainer on the tiny config with the given heads and dictionaries built
/// from `pairs`.
pub fn tiny_trainer(designs: &[DesignSpec], options: TrainOptions, pairs: &[(TokenSequence, RegionSequence)], seed: u64) -> Pretrainer {
    let mut r = rng(seed);
    let mut tr = Pretrainer::new(
        tiny_config(),
        MaskingPolicy::default(),
        ObjectiveWeights::default(),
        designs,
        options,
        Default::default(),
        &mut r,
    )
    .unwrap();
    if !designs.is_empty() {
        tr.build_dictionaries(pairs, 1).unwrap();
    }
    tr
}

pub fn tiny_corpus(seed: u64, n: usize) -> Vec<(TokenSequence, RegionSequence)> {
    let mut r = rng(seed);
    let cfg = tiny_config();
    (0..n)
        .map(|_| {
            let w = r.random_range(2..6);
            let k = r.random_range(1..5);
            rand_pair(&mut r, &cfg, w, k)
        })
        .collect()
}

/// End-to-end check of one intervention loss through the head, the
/// dictionary pooling and the encoder. The clean pass is left differentiable
/// so finite differences see the same function as the tape.
pub fn intervention_case(design: Design, scope: ScopeMode, seed: u64) -> GradCase {
    let pairs = tiny_corpus(seed, 12);
    let options = TrainOptions {
        head: HeadOptions {
            stop_gradient_clean: false,
            ..HeadOptions::default()
        },
        ..TrainOptions::default()
    };
    let mut tr = tiny_trainer(&[DesignSpec::new(design, scope)], options, &pairs, seed);
    let mut r = rng(seed ^ 0x5eed);
    for id in tr.store.ids().collect::<Vec<_>>() {
        let shape = tr.store.get(id).shape().to_vec();
        let noise = randn(&mut r, &shape, 0.2);
        for (v, n) in tr.store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let cfg = tiny_config();
    // A pattern with both masked and unmasked positions in every scope.
    let (_, mut rg) = rand_pair(&mut r, &cfg, 0, 4);
    let ids = vec![CLS_ID, 4, 7, 4, 9];
    let mut t = TokenSequence::new(ids, vec![false, true, true, true, true]).unwrap();
    t.set_state(1, TokenMask::ToMask).unwrap();
    t.set_state(3, TokenMask::Random(5)).unwrap();
    rg.set_state(2, RegionMask::Masked).unwrap();
    rg.set_state(4, RegionMask::KeptOriginal).unwrap();

    let head = &tr.interventions[0].0;
    let dicts: Dictionaries = tr.dictionaries.clone();
    let model = &tr.model;
    let ids: Vec<_> = tr.store.ids().collect();
    let name = format!("intervention_loss/{design}/{scope}");
    let mut store = tr.store.clone();
    case(
        &name,
        check_params(
            &mut store,
            &ids,
            |s| {
                let view = head.dictionary_view(s, &dicts)?;
                let out = model.forward(s, &t, &rg)?;
                let clean = if design.needs_clean_pass() {
                    Some(model.forward(s, &t.unmasked_copy(), &rg.unmasked_copy())?)
                } else {
                    None
                };
                let (loss, _) = head
                    .loss(s, &view, &out, clean.as_ref(), &t, &rg)?
                    .expect("pattern selects something");
                Ok(loss)
            },
            DEFAULT_STEP,
            3,
        ),
    )
}

/// The full gradient suite run by the acceptance target.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut out = primitive_cases(11);
    out.extend(layer_cases(12));
    out.push(model_case(13));
    for d in [Design::A, Design::B, Design::C, Design::D] {
        out.push(intervention_case(d, ScopeMode::VisionIntra, 14));
        out.push(intervention_case(d, ScopeMode::LanguageIntra, 15));
    }
    for d in [Design::B, Design::C, Design::D] {
        out.push(intervention_case(d, ScopeMode::InterModal, 16));
    }
    out
}

// ---------------------------------------------------------------------------
// Alpha weights
// ---------------------------------------------------------------------------

pub fn vision_dictionary(features: &[Vec<f64>], priors: &[f64]) -> ConfounderDictionary {
    let entries = features
        .iter()
        .zip(priors)
        .enumerate()
        .map(|(i, (f, &p))| ConfounderEntry {
            class_id: i,
            prior: p,
            feature: f.clone(),
            stream: None,
        })
        .collect();
    ConfounderDictionary::new(DictionaryModality::Vision, entries).unwrap()
}

pub fn rand_priors(r: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| r.random::<f64>() + 0.01).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    // Make the sum exact to the last bit.
    let rest: f64 = p[1..].iter().sum();
    p[0] = 1.0 - rest;
    p
}

/// alpha for `queries` against `dict` through a vision-scope head.
pub fn alpha_of(
    store: &ParamStore,
    head: &InterventionHead,
    dict: &ConfounderDictionary,
    queries: &Tensor,
    exclude: &[Option<usize>],
) -> Tensor {
    let tape = Tape::new();
    let s = Session::new(&tape, store);
    let dicts = Dictionaries {
        vision: Some(dict.clone()),
        language: None,
    };
    let view = head.dictionary_view(&s, &dicts).unwrap();
    let q = s.constant(queries.clone());
    let a = head.alpha_weights(&s, &q, Stream::Vision, &view, exclude).unwrap();
    (*a.value()).clone()
}

#[derive(Debug, Default)]
pub struct AlphaStats {
    pub dictionaries: usize,
    pub excluded_nonzero: usize,
    pub max_sum_err: f64,
    pub max_rescale_err: f64,
}

/// Exclusion, normalisation and common positive rescaling over `n` random
/// dictionaries of 2..=8 entries.
pub fn alpha_suite(n: usize, seed: u64) -> AlphaStats {
    let mut r = rng(seed);
    let cfg = tiny_config();
    let mut stats = AlphaStats::default();
    for _ in 0..n {
        let mut store = ParamStore::new();
        let head = InterventionHead::new(
            &mut store,
            &mut r,
            Design::B,
            ScopeMode::VisionIntra,
            &cfg,
            HeadOptions::default(),
        )
        .unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.value_mut(id) = randn(&mut r, &shape, 1.0);
        }
        let m = r.random_range(2..=8);
        let feats: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..cfg.feat_dim).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let priors = rand_priors(&mut r, m);
        let dict = vision_dictionary(&feats, &priors);
        let p = 3;
        let queries = randn(&mut r, &[p, cfg.d_vis], 1.0);
        let exclude: Vec<Option<usize>> = (0..p)
            .map(|_| if r.random::<f64>() < 0.7 { Some(r.random_range(0..m)) } else { None })
            .collect();
        let a = alpha_of(&store, &head, &dict, &queries, &exclude);
        let c = 0.1 + 5.0 * r.random::<f64>();
        let scaled: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|v| v * c).collect()).collect();
        let a2 = alpha_of(&store, &head, &vision_dictionary(&scaled, &priors), &queries, &exclude);
        for (row, ex) in exclude.iter().enumerate() {
            let w = a.row(row);
            if let Some(j) = ex {
                if w[*j] != 0.0 {
                    stats.excluded_nonzero += 1;
                }
            }
            let sum: f64 = w.iter().sum();
            stats.max_sum_err = stats.max_sum_err.max((sum - 1.0).abs());
        }
        stats.max_rescale_err = stats.max_rescale_err.max(a.max_abs_diff(&a2));
        stats.dictionaries += 1;
    }
    stats
}

// ---------------------------------------------------------------------------
// Design complexity
// ---------------------------------------------------------------------------

/// Expected head invocations for a pattern, counted from positions directly.
pub fn expected_invocations(design: Design, scope: ScopeMode, t: &TokenSequence, r: &RegionSequence) -> usize {
    let (masked, unmasked) = scope_positions(scope, t, r);
    let (nm, nu) = (masked.len(), unmasked.len());
    match (design, scope) {
        (Design::A, _) => nm,
        (Design::D, _) => nu,
        (_, ScopeMode::InterModal) => {
            let count = |v: &[devl::deconfound::TokenRef], s: Stream| v.iter().filter(|k| k.stream == s).count();
            count(&masked, Stream::Language) * count(&unmasked, Stream::Vision)
                + count(&masked, Stream::Vision) * count(&unmasked, Stream::Language)
        }
        _ => nu * nm,
    }
}

#[derive(Debug, Default, Clone)]
pub struct ComplexityStats {
    pub patterns: usize,
    pub invocation_mismatches: usize,
    pub pass_mismatches: usize,
    pub max_invocations: usize,
}

/// Runs `n` random mask patterns through one batch-loss evaluation each and
/// compares the instrumented counters with the design's counts.
pub fn complexity_suite(design: Design, scope: ScopeMode, n: usize, seed: u64) -> ComplexityStats {
    let pairs = tiny_corpus(seed, 24);
    let tr = tiny_trainer(&[DesignSpec::new(design, scope)], TrainOptions::default(), &pairs, seed);
    let cfg = tiny_config();
    let mut r = rng(seed ^ 0xc0);
    let mut st = ComplexityStats::default();
    let expected_passes = if design.needs_clean_pass() { 2 } else { 1 };
    let head = &tr.interventions[0].0;
    for _ in 0..n {
        let w = r.random_range(1..7);
        let k = r.random_range(1..6);
        let (t, rg) = rand_pair(&mut r, &cfg, w, k);
        let p = r.random::<f64>();
        let (t, rg) = rand_masks(&mut r, &t, &rg, p, cfg.vocab_size);
        let want = expected_invocations(design, scope, &t, &rg);
        head.reset_invocations();
        tr.model.reset_passes();
        let tape = Tape::new();
        let s = Session::new(&tape, &tr.store);
        let batch = Batch {
            examples: vec![Example {
                tokens: t,
                regions: rg,
                aligned: true,
            }],
        };
        tr.batch_loss(&s, &batch).unwrap();
        if head.invocations() != want {
            st.invocation_mismatches += 1;
        }
        if tr.model.passes() != expected_passes {
            st.pass_mismatches += 1;
        }
        st.max_invocations = st.max_invocations.max(want);
        st.patterns += 1;
    }
    st
}

// ---------------------------------------------------------------------------
// Masking statistics
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Rate {
    pub hits: u64,
    pub trials: u64,
    pub p: f64,
}

impl Rate {
    pub fn rate(&self) -> f64 {
        self.hits as f64 / self.trials as f64
    }

    pub fn sigma(&self) -> f64 {
        (self.p * (1.0 - self.p) / self.trials as f64).sqrt()
    }

    pub fn within_3_sigma(&self) -> bool {
        (self.rate() - self.p).abs() <= 3.0 * self.sigma()
    }
}

/// Language mask rate over maskable words and the keep-original share of
/// masked regions, over `n` masking draws at the default policy.
pub fn masking_suite(n: usize, seed: u64) -> (Rate, Rate) {
    let mut r = rng(seed);
    let cfg = ModelConfig {
        vocab_size: 40,
        num_classes: 5,
        feat_dim: 2,
        max_words: 16,
        max_regions: 8,
        ..ModelConfig::default()
    };
    let policy = MaskingPolicy::default();
    let (t, rg) = rand_pair(&mut r, &cfg, 10, 8);
    let mut lang = Rate {
        hits: 0,
        trials: 0,
        p: policy.lang_mask_rate,
    };
    let mut keep = Rate {
        hits: 0,
        trials: 0,
        p: policy.vis_keep_original_rate,
    };
    for _ in 0..n {
        let (mt, mr) = apply_masking(&t, &rg, &policy, cfg.vocab_size, &mut r).unwrap();
        lang.trials += (mt.len() - 1) as u64;
        lang.hits += mt.masked_positions().len() as u64;
        for i in mr.masked_positions() {
            keep.trials += 1;
            if mr.states()[i] == RegionMask::KeptOriginal {
                keep.hits += 1;
            }
        }
    }
    (lang, keep)
}

// ---------------------------------------------------------------------------
// Discrete adjustment oracle
// ---------------------------------------------------------------------------

/// A dense count cube `n[x][y][z]` with named axes.
#[derive(Clone, Debug)]
pub struct DenseTable {
    pub n: Vec<Vec<Vec<u64>>>,
}

impl DenseTable {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n.len(), self.n[0].len(), self.n[0][0].len())
    }

    pub fn records(&self) -> Vec<devl::corpus::StatsRecord> {
        let (nx, ny, nz) = self.dims();
        let mut out = Vec::new();
        for a in 0..nx {
            for b in 0..ny {
                for c in 0..nz {
                    for _ in 0..self.n[a][b][c] {
                        out.push(devl::corpus::StatsRecord {
                            x: vec![format!("x{a}")],
                            y: vec![format!("y{b}")],
                            z: vec![format!("z{c}")],
                        });
                    }
                }
            }
        }
        out
    }

    pub fn table(&self) -> devl::causal_stats::CooccurrenceTable {
        let mut t = devl::causal_stats::CooccurrenceTable::new();
        t.ingest(&self.records()).unwrap();
        t
    }
}

/// Sparse random cube up to 10x10x5 with at least one count.
pub fn random_dense(r: &mut ChaCha8Rng) -> DenseTable {
    let nx = r.random_range(1..=10);
    let ny = r.random_range(1..=10);
    let nz = r.random_range(1..=5);
    let density: f64 = r.random_range(0.2..1.0);
    let mut n = vec![vec![vec![0u64; nz]; ny]; nx];
    for row in n.iter_mut().flatten() {
        for v in row.iter_mut() {
            if r.random::<f64>() < density {
                *v = r.random_range(1..8);
            }
        }
    }
    n[0][0][0] += 1;
    DenseTable { n }
}

fn q(a: u64, b: u64) -> BigRational {
    BigRational::new(BigInt::from(a), BigInt::from(b))
}

/// `N(x,y) / N(x)` by summing the cube; `None` when `N(x) = 0`.
pub fn oracle_conditional(t: &DenseTable, x: usize, y: usize) -> Option<BigRational> {
    let nx: u64 = t.n[x].iter().flatten().sum();
    let nxy: u64 = t.n[x][y].iter().sum();
    (nx > 0).then(|| q(nxy, nx))
}

/// Enumerates every z: `P(y|x,z) P(z)` over strata with `N(x,z) > 0`,
/// priors renormalised over those strata.
pub fn oracle_interventional(t: &DenseTable, x: usize, y: usize) -> Option<BigRational> {
    let (nx, ny, nz) = t.dims();
    let total: u64 = t.n.iter().flatten().flatten().sum();
    let mut value = BigRational::from_integer(BigInt::from(0));
    let mut mass = BigRational::from_integer(BigInt::from(0));
    for c in 0..nz {
        let n_z: u64 = (0..nx).flat_map(|a| (0..ny).map(move |b| (a, b))).map(|(a, b)| t.n[a][b][c]).sum();
        let n_xz: u64 = (0..ny).map(|b| t.n[x][b][c]).sum();
        if n_z == 0 || n_xz == 0 {
            continue;
        }
        let p_z = q(n_z, total);
        value += q(t.n[x][y][c], n_xz) * &p_z;
        mass += p_z;
    }
    (mass != BigRational::from_integer(BigInt::from(0))).then(|| value / mass)
}

#[derive(Debug, Default)]
pub struct DiscreteStats {
    pub tables: usize,
    pub queries: usize,
    pub exact_mismatches: usize,
    pub max_f64_err: f64,
    pub collapse_failures: usize,
    pub scale_failures: usize,
}

/// Compares every `(x, y)` of `n` random cubes against the enumeration
/// oracle, then checks that an independent confounder changes nothing and
/// that scaling all counts changes nothing.
pub fn discrete_suite(n: usize, seed: u64) -> DiscreteStats {
    use devl::causal_stats::to_f64;
    let mut r = rng(seed);
    let mut st = DiscreteStats::default();
    for _ in 0..n {
        let d = random_dense(&mut r);
        let t = d.table();
        let (nx, ny, _) = d.dims();
        let k = r.random_range(2..7);
        let big = t.scaled(k);
        for a in 0..nx {
            for b in 0..ny {
                let (xs, ys) = (format!("x{a}"), format!("y{b}"));
                st.queries += 1;
                let cond = t.conditional_exact(&ys, &xs).ok();
                let adj = t.interventional_exact(&ys, &xs).ok().map(|e| e.value);
                let (oc, oa) = (oracle_conditional(&d, a, b), oracle_interventional(&d, a, b));
                if cond != oc || adj != oa {
                    st.exact_mismatches += 1;
                }
                if let (Ok(c), Some(o)) = (t.conditional(&ys, &xs), &oc) {
                    st.max_f64_err = st.max_f64_err.max((c - to_f64(o)).abs());
                }
                if let (Ok(v), Some(o)) = (t.interventional(&ys, &xs), &oa) {
                    st.max_f64_err = st.max_f64_err.max((v.value - to_f64(o)).abs());
                }
                let bc = big.conditional_exact(&ys, &xs).ok();
                let ba = big.interventional_exact(&ys, &xs).ok().map(|e| e.value);
                if bc != cond || ba != adj {
                    st.scale_failures += 1;
                }
            }
        }
        let ind = independent_dense(&mut r);
        let t = ind.table();
        let (nx, ny, _) = ind.dims();
        for a in 0..nx {
            for b in 0..ny {
                let (xs, ys) = (format!("x{a}"), format!("y{b}"));
                let c = t.conditional_exact(&ys, &xs).unwrap();
                let v = t.interventional_exact(&ys, &xs).unwrap().value;
                if c != v {
                    st.collapse_failures += 1;
                }
            }
        }
        st.tables += 1;
    }
    st
}

/// A cube where z is independent of x: `N(x,y,z) = c_z d_x m(y|x,z)` with
/// every `m(.|x,z)` summing to the same total, so `N(x,z) ∝ c_z d_x`.
pub fn independent_dense(r: &mut ChaCha8Rng) -> DenseTable {
    let nx = r.random_range(1..=10);
    let ny = r.random_range(1..=10);
    let nz = r.random_range(1..=5);
    let total = 6u64;
    let c: Vec<u64> = (0..nz).map(|_| r.random_range(1..4)).collect();
    let d: Vec<u64> = (0..nx).map(|_| r.random_range(1..4)).collect();
    let mut n = vec![vec![vec![0u64; nz]; ny]; nx];
    for a in 0..nx {
        for z in 0..nz {
            for _ in 0..total {
                let b = r.random_range(0..ny);
                n[a][b][z] += c[z] * d[a];
            }
        }
    }
    DenseTable { n }
}
