//! Prompt-order invariance and encoder independence under random episodes.

use fsdetr_core::model::{FsDetr, ModelConfig};
use fsdetr_core::params::{ParamStore, Session};
use fsdetr_core::prompts::assign_pseudo_classes;
use fsdetr_core::rng::{component_rng, stream_rng};
use fsdetr_core::synthworld::{generate_dataset, ClassSplit, EpisodeSampler};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn small_model(use_encoder_mhca: bool) -> ModelConfig {
    ModelConfig {
        d: 32,
        n_heads: 4,
        enc_layers: 2,
        dec_layers: 2,
        n_queries: 10,
        ffn_hidden: 48,
        use_encoder_mhca,
        ..ModelConfig::default()
    }
}

/// Largest max-abs change of logits or boxes when the prompt rows of
/// `episodes` random episodes are shuffled.
pub fn permutation_max_change(episodes: usize, seed: u64) -> f64 {
    permutation_max_change_for(&small_model(true), episodes, seed)
}

pub fn permutation_max_change_for(cfg: &ModelConfig, episodes: usize, seed: u64) -> f64 {
    let cfg = cfg.clone();
    let mut store = ParamStore::<f64>::new();
    let model = FsDetr::new(&mut store, &cfg, &mut component_rng(seed, "model")).unwrap();
    let split = ClassSplit::default();
    let ds = generate_dataset(seed, "symmetry", 80, &split.all()).unwrap();
    let sampler = EpisodeSampler::new(&ds, &split.all()).unwrap();
    let mut worst = 0.0f64;
    for i in 0..episodes {
        let mut rng = stream_rng(seed, "symmetry", i as u64);
        let m = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let ep = sampler.sample(m, k, true, &mut rng).unwrap();
        let assignment = assign_pseudo_classes(m, cfg.bank_size, &mut rng).unwrap();
        let (t, rows) = ep.flat_templates();
        let mut perm: Vec<usize> = (0..t.len()).collect();
        perm.shuffle(&mut rng);
        let run = |order: &[usize]| {
            let tt: Vec<_> = order.iter().map(|&j| t[j].clone()).collect();
            let rr: Vec<usize> = order.iter().map(|&j| rows[j]).collect();
            let mut s = Session::new(&store, false, component_rng(0, "s"));
            let p = model.prompt(&mut s, &tt, &rr, &assignment).unwrap();
            let out = model.forward(&mut s, &ep.target.image, &p).unwrap();
            (s.g.value(out.logits).clone(), s.g.value(out.boxes).clone())
        };
        let ident: Vec<usize> = (0..t.len()).collect();
        let (la, ba) = run(&ident);
        let (lb, bb) = run(&perm);
        worst = worst.max(la.max_abs_diff(&lb)).max(ba.max_abs_diff(&bb));
    }
    worst
}

/// Whether, without the encoder cross-attention, encoder output is
/// bit-identical when the prompts change. Checked through the decoder
/// memory: two different prompt sets on one image.
pub fn encoder_ignores_prompts_without_mhca(seed: u64) -> bool {
    encoder_ignores_prompts_for(&small_model(false), seed)
}

pub fn encoder_ignores_prompts_for(cfg: &ModelConfig, seed: u64) -> bool {
    assert!(!cfg.use_encoder_mhca);
    let cfg = cfg.clone();
    let mut store = ParamStore::<f64>::new();
    let model = FsDetr::new(&mut store, &cfg, &mut component_rng(seed, "model")).unwrap();
    let split = ClassSplit::default();
    let ds = generate_dataset(seed, "symmetry", 60, &split.all()).unwrap();
    let sampler = EpisodeSampler::new(&ds, &split.all()).unwrap();
    let mut rng = stream_rng(seed, "mhca", 0);
    let a = sampler.sample(2, 1, true, &mut rng).unwrap();
    let b = sampler.sample(3, 2, true, &mut rng).unwrap();
    let encode = |templates: &[_], rows: &[usize], m: usize| {
        let mut s = Session::new(&store, false, component_rng(0, "s"));
        let assignment: Vec<usize> = (0..m).collect();
        let p = model.prompt(&mut s, templates, rows, &assignment).unwrap();
        let z = model.encode(&mut s, &a.target.image, &p).unwrap();
        s.g.value(z.memory).clone()
    };
    let (ta, ra) = a.flat_templates();
    let (tb, rb) = b.flat_templates();
    encode(&ta, &ra, 2) == encode(&tb, &rb, 3)
}
