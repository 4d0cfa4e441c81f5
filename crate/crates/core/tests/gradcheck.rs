//! Analytic adapter gradients against central finite differences.

use reora::adapter::AdapterConfig;
use reora::tasks::{gen_domain_pair, gen_longtail_lm, Batch, MixtureSpec, Split};
use reora::{AdapterState, Backbone, ModelConfig, Rng, TargetModule};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn toy_model(vocab: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        max_seq_len,
        target_modules: TargetModule::ALL.to_vec(),
    }
}

fn randomize_experts(adapters: &AdapterState<f64>, rng: &mut Rng) {
    for p in adapters.points() {
        for b in &p.experts {
            let v: Vec<f64> = (0..b.numel()).map(|_| 0.2 * rng.normal()).collect();
            b.assign(&v).unwrap();
        }
    }
}

/// Returns the number of checked entries and the worst relative error.
fn check(model: &Backbone<f64>, adapters: &AdapterState<f64>, batch: &Batch) -> (usize, f64) {
    let params = adapters.named_parameters();
    for (_, p) in &params {
        p.zero_grad();
    }
    batch.loss(model, Some(adapters)).unwrap().backward().unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, p) in &params {
        let g = p.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        let base = p.to_vec();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + STEP;
            p.assign(&v).unwrap();
            let up = reora::no_grad(|| batch.loss(model, Some(adapters)).unwrap().item());
            v[i] = base[i] - STEP;
            p.assign(&v).unwrap();
            let down = reora::no_grad(|| batch.loss(model, Some(adapters)).unwrap().item());
            p.assign(&base).unwrap();
            let numeric = (up - down) / (2.0 * STEP);
            let denom = g[i].abs().max(numeric.abs()).max(1e-6);
            let rel = (g[i] - numeric).abs() / denom;
            assert!(rel <= REL_TOL, "{name}[{i}]: analytic {} numeric {numeric} rel {rel:e}", g[i]);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (checked, worst)
}

fn classification_case(share_a: bool, n_experts: usize) {
    let (a, b) = gen_domain_pair(3).unwrap();
    let mix = MixtureSpec::new(vec![(a, 0.5), (b, 0.5)]).unwrap();
    let mcfg = toy_model(mix.vocab_needed(), mix.input_len());
    let mut rng = Rng::new(11);
    let model = Backbone::<f64>::build(&mcfg, &mut rng).unwrap();
    let acfg = AdapterConfig {
        rank: 4,
        n_experts,
        alpha: 8.0,
        target_modules: TargetModule::ALL.to_vec(),
        share_a,
        ..AdapterConfig::default()
    };
    let adapters = AdapterState::<f64>::init(&mcfg, &acfg, &mut rng).unwrap();
    randomize_experts(&adapters, &mut rng);
    let examples: Vec<_> = (0..6).map(|_| mix.sample(Split::Train, &mut rng)).collect();
    let batch = Batch::from_examples(&examples, &mix).unwrap();
    let (n, worst) = check(&model, &adapters, &batch);
    assert!(n > 0);
    eprintln!("share_a={share_a} m={n_experts}: {n} entries, worst rel {worst:e}");
}

#[test]
fn routed_experts_with_shared_a() {
    classification_case(true, 3);
}

#[test]
fn routed_experts_with_per_layer_a() {
    classification_case(false, 3);
}

#[test]
fn single_expert_without_router() {
    classification_case(true, 1);
}

#[test]
fn causal_language_model_loss() {
    let task = gen_longtail_lm(5).unwrap();
    let mix = MixtureSpec::single(task);
    let mcfg = toy_model(mix.vocab_needed(), mix.input_len());
    let mut rng = Rng::new(12);
    let model = Backbone::<f64>::build(&mcfg, &mut rng).unwrap();
    let acfg = AdapterConfig { rank: 4, n_experts: 3, alpha: 8.0, ..AdapterConfig::default() };
    let adapters = AdapterState::<f64>::init(&mcfg, &acfg, &mut rng).unwrap();
    randomize_experts(&adapters, &mut rng);
    let examples: Vec<_> = (0..3).map(|_| mix.sample(Split::Train, &mut rng)).collect();
    let batch = Batch::from_examples(&examples, &mix).unwrap();
    check(&model, &adapters, &batch);
}

#[test]
fn shared_a_gradient_equals_sum_of_untied_copies() {
    let (a, b) = gen_domain_pair(4).unwrap();
    let mix = MixtureSpec::new(vec![(a, 0.5), (b, 0.5)]).unwrap();
    let mcfg = toy_model(mix.vocab_needed(), mix.input_len());
    let mut rng = Rng::new(13);
    let model = Backbone::<f64>::build(&mcfg, &mut rng).unwrap();
    let tied_cfg = AdapterConfig { rank: 4, n_experts: 3, alpha: 8.0, share_a: true, ..AdapterConfig::default() };
    let tied = AdapterState::<f64>::init(&mcfg, &tied_cfg, &mut rng).unwrap();
    randomize_experts(&tied, &mut rng);
    let untied_cfg = AdapterConfig { share_a: false, ..tied_cfg };
    let untied = AdapterState::<f64>::init(&mcfg, &untied_cfg, &mut rng).unwrap();
    for (t, u) in tied.points().iter().zip(untied.points()) {
        u.a.assign(&t.a.to_vec()).unwrap();
        for (tb, ub) in t.experts.iter().zip(&u.experts) {
            ub.assign(&tb.to_vec()).unwrap();
        }
        if let (Some(tr), Some(ur)) = (&t.router, &u.router) {
            ur.assign(&tr.to_vec()).unwrap();
        }
    }
    let examples: Vec<_> = (0..4).map(|_| mix.sample(Split::Train, &mut rng)).collect();
    let batch = Batch::from_examples(&examples, &mix).unwrap();
    let lt = batch.loss(&model, Some(&tied)).unwrap();
    let lu = batch.loss(&model, Some(&untied)).unwrap();
    assert_eq!(lt.item(), lu.item());
    lt.backward().unwrap();
    lu.backward().unwrap();
    for group in tied.shared_groups() {
        let shared = group.a.grad().unwrap();
        let mut summed = vec![0.0; shared.len()];
        for p in untied.points().iter().filter(|p| p.d_in == group.d_in) {
            for (s, g) in summed.iter_mut().zip(p.a.grad().unwrap()) {
                *s += g;
            }
        }
        let scale = shared.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(scale > 0.0);
        for (s, u) in shared.iter().zip(&summed) {
            assert!((s - u).abs() <= 1e-12 * scale, "d_in {}: {s} vs {u}", group.d_in);
        }
    }
}
