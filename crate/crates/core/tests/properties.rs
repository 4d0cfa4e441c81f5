//! Property tests of the adapter, router and reducer invariants.

use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use proptest::prelude::*;
use reora::adapter::{route, AdapterConfig};
use reora::reducer::{apply_freeze_mask, sample_without_replacement, sampling_distribution, SignMode};
use reora::{AdapterState, ModelConfig, Rng, Tensor};

fn exact_sum(xs: &[f64]) -> BigRational {
    xs.iter().fold(BigRational::zero(), |acc, &x| acc + BigRational::from_float(x).unwrap())
}

fn toy(n_layers: usize) -> ModelConfig {
    ModelConfig { n_layers, d_model: 16, n_heads: 2, d_ff: 32, vocab_size: 8, max_seq_len: 8, ..ModelConfig::default() }
}

fn random_tensor(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| std * rng.normal()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampling_distribution_is_a_distribution(
        scores in prop::collection::vec(-30.0f64..30.0, 1..16),
        temperature in 0.05f64..8.0,
        literal in any::<bool>(),
    ) {
        let mode = if literal { SignMode::PaperLiteral } else { SignMode::Intent };
        let p = sampling_distribution(&scores, mode, temperature);
        prop_assert_eq!(p.len(), scores.len());
        prop_assert!(p.iter().all(|&x| x >= 0.0 && x.is_finite()));
        let err = (exact_sum(&p) - BigRational::one()).to_f64().unwrap().abs();
        prop_assert!(err <= 1e-12, "sum off by {err}");
    }

    #[test]
    fn sampling_distribution_orders_by_score(scores in prop::collection::vec(-10.0f64..10.0, 2..10)) {
        let up = sampling_distribution(&scores, SignMode::Intent, 1.0);
        let down = sampling_distribution(&scores, SignMode::PaperLiteral, 1.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] > scores[j] {
                    prop_assert!(up[i] >= up[j]);
                    prop_assert!(down[i] <= down[j]);
                }
            }
        }
    }

    #[test]
    fn sampled_layers_are_distinct_sorted_and_k_long(
        scores in prop::collection::vec(-5.0f64..5.0, 1..12),
        k_frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let n = scores.len();
        let k = ((k_frac * n as f64).round() as usize).clamp(1, n);
        let p = sampling_distribution(&scores, SignMode::Intent, 1.0);
        let mut rng = Rng::new(seed);
        let s = sample_without_replacement(&p, k, &mut rng);
        prop_assert_eq!(s.len(), k);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| i < n));
    }

    #[test]
    fn full_draw_consumes_no_randomness(n in 1usize..12, seed in any::<u64>()) {
        let p = vec![1.0 / n as f64; n];
        let mut rng = Rng::new(seed);
        let s = sample_without_replacement(&p, n, &mut rng);
        prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(rng.next_u64(), Rng::new(seed).next_u64());
    }

    #[test]
    fn router_weights_lie_on_the_simplex(
        rows in 1usize..20,
        rank in 1usize..6,
        experts in 2usize..6,
        scale in 0.01f64..50.0,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let router = random_tensor(rank, experts, scale, &mut rng);
        let u = random_tensor(rows, rank, scale, &mut rng);
        let alive: Vec<bool> = (0..experts).map(|i| i == 0 || rng.uniform() < 0.7).collect();
        let w = route(&router, &u, &alive).unwrap();
        let data = w.to_vec();
        for r in 0..rows {
            let row = &data[r * experts..(r + 1) * experts];
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            for (i, &a) in alive.iter().enumerate() {
                if !a {
                    prop_assert_eq!(row[i], 0.0);
                }
            }
            let err = (exact_sum(row) - BigRational::one()).to_f64().unwrap().abs();
            prop_assert!(err <= 1e-12, "row {r} off by {err}");
        }
    }

    #[test]
    fn freeze_mask_matches_active_set(mask in prop::collection::vec(any::<bool>(), 1..6), seed in any::<u64>()) {
        let n = mask.len();
        let mcfg = toy(n);
        let acfg = AdapterConfig { rank: 2, n_experts: 2, ..AdapterConfig::default() };
        let ad = AdapterState::<f64>::init(&mcfg, &acfg, &mut Rng::new(seed)).unwrap();
        let active: Vec<usize> = (0..n).filter(|&l| mask[l]).collect();
        apply_freeze_mask(&ad, &active);
        for l in 0..n {
            prop_assert_eq!(ad.layer_trainable(l), mask[l]);
            for b in ad.layer_experts(l) {
                prop_assert_eq!(b.requires_grad(), mask[l]);
            }
        }
        prop_assert!(ad.a_tensors().iter().all(|a| a.requires_grad()));
        prop_assert!(ad.routers().iter().all(|r| r.requires_grad()));
    }

    #[test]
    fn single_expert_matches_plain_low_rank_update(
        rows in 1usize..8,
        rank in 1usize..5,
        alpha in 0.5f64..64.0,
        share_a in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mcfg = toy(2);
        let acfg = AdapterConfig { rank, n_experts: 1, alpha, share_a, ..AdapterConfig::default() };
        let mut rng = Rng::new(seed);
        let ad = AdapterState::<f64>::init(&mcfg, &acfg, &mut rng).unwrap();
        for p in ad.points() {
            p.experts[0].assign(&(0..p.d_out * rank).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
            prop_assert!(p.router.is_none());
            let x = random_tensor(rows, p.d_in, 1.0, &mut rng);
            let got = ad.delta(p.layer, p.module, &x).unwrap().unwrap().to_vec();
            let (xa, aa, ba) = (x.to_vec(), p.a.to_vec(), p.experts[0].to_vec());
            for n in 0..rows {
                let u: Vec<f64> = (0..rank).map(|k| (0..p.d_in).map(|j| aa[k * p.d_in + j] * xa[n * p.d_in + j]).sum()).collect();
                for o in 0..p.d_out {
                    let want = alpha / rank as f64 * (0..rank).map(|k| ba[o * rank + k] * u[k]).sum::<f64>();
                    let g = got[n * p.d_out + o];
                    prop_assert!((g - want).abs() <= 1e-10 * want.abs().max(1.0), "{g} vs {want}");
                }
            }
        }
    }
}
