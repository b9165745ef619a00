//! Compares the tape gradients of a small two-stream encoder against
//! central finite differences, one parameter tensor at a time.
//!
//! cargo run --release --example gradient_check -- [seed]

use devl::numerics::gradcheck::{check_params, DEFAULT_STEP, DEFAULT_TOL};
use devl::numerics::ParamStore;
use devl::two_stream::{ModelConfig, RegionMask, RegionSequence, TokenMask, TokenSequence, TwoStreamModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> devl::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |a| a.parse().expect("integer argument"));
    let cfg = ModelConfig {
        vocab_size: 10,
        num_classes: 3,
        feat_dim: 3,
        d_lang: 8,
        d_vis: 8,
        lang_layers: 1,
        co_blocks: 1,
        heads: 2,
        ffn_width: 8,
        max_words: 6,
        max_regions: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = TwoStreamModel::new(cfg.clone(), &mut store, &mut rng)?;

    let mut tokens = TokenSequence::new(vec![0, 4, 7, 5], vec![false, true, false, true])?;
    tokens.set_state(2, TokenMask::ToMask)?;
    let mut regions = RegionSequence::from_regions(
        &[vec![0.3, -1.0, 0.5], vec![1.2, 0.1, -0.4]],
        &[[0.1, 0.1, 0.5, 0.6, 0.2], [0.4, 0.2, 0.9, 0.8, 0.3]],
        &[vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8]],
        cfg.feat_dim,
        cfg.num_classes,
    )?;
    regions.set_state(1, RegionMask::Masked)?;

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.param(id).name.clone();
        let rep = check_params(
            &mut store,
            &[id],
            |s| {
                let out = model.forward(s, &tokens, &regions)?;
                let l = out.lang_final.gelu().sum();
                let v = out.vis_final.mul(&out.vis_final)?.sum();
                l.add(&v)
            },
            DEFAULT_STEP,
            1,
        )?;
        worst = worst.max(rep.max_rel_err);
        println!("{name:<40} {:>5} elements  max rel err {:.2e}", rep.checked, rep.max_rel_err);
    }
    println!("worst {worst:.2e} (tolerance {DEFAULT_TOL:.0e})");
    Ok(())
}
