//! Inclusion frequencies of the layer sampler against exact enumeration.

use reora::reducer::{sample_without_replacement, sampling_distribution, ImportanceState, ReducerConfig, SignMode};
use reora::Rng;

/// Exact inclusion probability of every index under `k` sequential draws
/// without replacement, by enumerating all ordered draw sequences.
fn inclusion_oracle(p: &[f64], k: usize) -> Vec<f64> {
    fn walk(p: &[f64], k: usize, taken: &mut Vec<usize>, prob: f64, out: &mut [f64]) {
        if taken.len() == k {
            for &i in taken.iter() {
                out[i] += prob;
            }
            return;
        }
        let left: f64 = (0..p.len()).filter(|i| !taken.contains(i)).map(|i| p[i]).sum();
        for i in 0..p.len() {
            if taken.contains(&i) {
                continue;
            }
            taken.push(i);
            walk(p, k, taken, prob * p[i] / left, out);
            taken.pop();
        }
    }
    let mut out = vec![0.0; p.len()];
    walk(p, k, &mut Vec::new(), 1.0, &mut out);
    out
}

fn empirical(p: &[f64], k: usize, draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let mut hits = vec![0usize; p.len()];
    for _ in 0..draws {
        for i in sample_without_replacement(p, k, &mut rng) {
            hits[i] += 1;
        }
    }
    hits.iter().map(|&h| h as f64 / draws as f64).collect()
}

#[test]
fn oracle_sums_to_k() {
    let p = [0.1, 0.2, 0.3, 0.4];
    let inc = inclusion_oracle(&p, 2);
    assert!((inc.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    // closed form for two draws: p_i + Σ_j p_j p_i / (1 − p_j)
    for i in 0..4 {
        let want = p[i] + (0..4).filter(|&j| j != i).map(|j| p[j] * p[i] / (1.0 - p[j])).sum::<f64>();
        assert!((inc[i] - want).abs() < 1e-12);
    }
}

#[test]
fn five_layers_two_active_match_enumeration() {
    let scores = [-1.0, 0.0, 0.5, 2.0, 1.0];
    let p = sampling_distribution(&scores, SignMode::Intent, 1.0);
    let exact = inclusion_oracle(&p, 2);
    let seen = empirical(&p, 2, 100_000, 7);
    for i in 0..5 {
        assert!((seen[i] - exact[i]).abs() <= 0.01, "layer {i}: {} vs {}", seen[i], exact[i]);
    }
    let top = (0..5).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
    let most = (0..5).max_by(|&a, &b| seen[a].total_cmp(&seen[b])).unwrap();
    assert_eq!(top, most);
}

#[test]
fn reducer_state_samples_through_the_same_distribution() {
    let cfg = ReducerConfig { k_active: Some(2), ..ReducerConfig::default() };
    let mut st = ImportanceState::new(&cfg, 5, Rng::new(3)).unwrap();
    st.scores = vec![0.3, -0.2, 1.5, 0.0, 0.9];
    let exact = inclusion_oracle(&st.sampling_distribution(), 2);
    let mut hits = [0usize; 5];
    let n = 50_000;
    for _ in 0..n {
        for l in st.sample_active_layers() {
            hits[l] += 1;
        }
    }
    for i in 0..5 {
        assert!((hits[i] as f64 / n as f64 - exact[i]).abs() <= 0.01);
    }
}

#[test]
fn high_temperature_concentrates_on_the_top_layer() {
    let scores = [0.0, 0.1, 3.0, 0.2];
    let p = sampling_distribution(&scores, SignMode::Intent, 40.0);
    let inc = empirical(&p, 1, 20_000, 1);
    assert!(inc[2] > 0.95, "{inc:?}");
}
