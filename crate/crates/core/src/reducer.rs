//! Importance-guided selective updates: per-layer scores refreshed by
//! suppression probes, a sampling distribution over layers, and the freeze
//! mask that leaves unsampled layers' `B` matrices untouched for a step.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterState, SuppressScope};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::numerics::ops::sigmoid_scalar;
use crate::numerics::{no_grad, Rng, Scalar};
use crate::tasks::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// `σ(+s)`: higher score, more likely to be updated.
    #[default]
    Intent,
    /// `σ(−s)`.
    PaperLiteral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReducerConfig {
    pub enabled: bool,
    /// Layers updated per step; `None` means half the layers.
    pub k_active: Option<usize>,
    /// Layers suppressed per probe; `None` means half the layers.
    pub n_suppressed: Option<usize>,
    /// Steps between probes; 0 disables probing.
    pub probe_interval: usize,
    pub ema_beta: f64,
    pub sign_mode: SignMode,
    pub temperature: f64,
    pub suppress_scope: SuppressScope,
}

impl Default for ReducerConfig {
    fn default() -> Self {
        ReducerConfig {
            enabled: true,
            k_active: None,
            n_suppressed: None,
            probe_interval: 10,
            ema_beta: 0.9,
            sign_mode: SignMode::Intent,
            temperature: 1.0,
            suppress_scope: SuppressScope::AdapterDelta,
        }
    }
}

impl ReducerConfig {
    pub fn resolved_k(&self, n_layers: usize) -> usize {
        self.k_active.unwrap_or((n_layers / 2).max(1))
    }

    pub fn resolved_n_suppressed(&self, n_layers: usize) -> usize {
        self.n_suppressed.unwrap_or((n_layers / 2).max(1))
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let k = self.resolved_k(n_layers);
        if k == 0 || k > n_layers {
            return Err(Error::Config(format!("reducer.k_active {k} outside 1..={n_layers}")));
        }
        let ns = self.resolved_n_suppressed(n_layers);
        if ns == 0 || ns > n_layers {
            return Err(Error::Config(format!("reducer.n_suppressed {ns} outside 1..={n_layers}")));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config(format!("reducer.ema_beta {} outside [0, 1)", self.ema_beta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("reducer.temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Scores and sampling state of the reducer.
#[derive(Clone, Debug)]
pub struct ImportanceState {
    pub scores: Vec<f64>,
    /// Times each layer has been in a suppressed set.
    pub probe_counts: Vec<u64>,
    pub k: usize,
    pub n_suppressed: usize,
    pub probe_interval: usize,
    pub ema_beta: f64,
    pub sign_mode: SignMode,
    pub temperature: f64,
    pub baseline_loss: f64,
    pub rng: Rng,
}

/// Outcome of one probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub suppressed: Vec<usize>,
    pub loss_suppressed: f64,
    pub loss_base: f64,
}

impl ImportanceState {
    pub fn new(cfg: &ReducerConfig, n_layers: usize, rng: Rng) -> Result<Self> {
        cfg.validate(n_layers)?;
        Ok(ImportanceState {
            scores: vec![0.0; n_layers],
            probe_counts: vec![0; n_layers],
            k: cfg.resolved_k(n_layers),
            n_suppressed: cfg.resolved_n_suppressed(n_layers),
            probe_interval: cfg.probe_interval,
            ema_beta: cfg.ema_beta,
            sign_mode: cfg.sign_mode,
            temperature: cfg.temperature,
            baseline_loss: f64::NAN,
            rng,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn probe_due(&self, step: usize) -> bool {
        self.probe_interval > 0 && step > 0 && step % self.probe_interval == 0
    }

    /// The `n_suppressed` lowest-scoring layers. Among equal scores the less
    /// probed layer goes first, then the lower index.
    pub fn suppression_set(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_layers()).collect();
        order.sort_by(|&a, &b| {
            self.scores[a]
                .total_cmp(&self.scores[b])
                .then(self.probe_counts[a].cmp(&self.probe_counts[b]))
                .then(a.cmp(&b))
        });
        let mut set = order[..self.n_suppressed].to_vec();
        set.sort_unstable();
        set
    }

    /// Suppresses the lowest-score layers, compares validation loss against
    /// the unsuppressed baseline on the same batch, and moves the suppressed
    /// layers' scores toward the per-layer share of the loss increase.
    pub fn probe_and_update_scores<T: Scalar>(
        &mut self,
        model: &Backbone<T>,
        adapters: &mut AdapterState<T>,
        val_batch: &Batch,
    ) -> Result<ProbeReport> {
        if val_batch.is_empty() {
            return Err(Error::Usage("probe needs a non-empty validation batch".into()));
        }
        self.probe_with(adapters, |ad| Ok(val_batch.loss(model, Some(ad))?.item().as_f64()))
    }

    /// Probe with an arbitrary loss evaluator.
    pub fn probe_with<T: Scalar>(
        &mut self,
        adapters: &mut AdapterState<T>,
        mut loss: impl FnMut(&AdapterState<T>) -> Result<f64>,
    ) -> Result<ProbeReport> {
        if adapters.n_layers() != self.n_layers() {
            return Err(Error::Input("reducer and adapters disagree on layer count".into()));
        }
        let suppressed = self.suppression_set();
        let loss_suppressed = {
            let ctx = SuppressionContext::new(adapters, &suppressed);
            no_grad(|| loss(ctx.adapters()))?
        };
        let loss_base = no_grad(|| loss(adapters))?;
        if !loss_suppressed.is_finite() || !loss_base.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite probe loss (suppressed {loss_suppressed}, base {loss_base})"
            )));
        }
        let share = (loss_suppressed - loss_base).max(0.0) / self.n_suppressed as f64;
        for &n in &suppressed {
            self.scores[n] = self.ema_beta * self.scores[n] + (1.0 - self.ema_beta) * share;
            self.probe_counts[n] += 1;
        }
        self.baseline_loss = loss_base;
        Ok(ProbeReport { suppressed, loss_suppressed, loss_base })
    }

    pub fn sampling_distribution(&self) -> Vec<f64> {
        sampling_distribution(&self.scores, self.sign_mode, self.temperature)
    }

    /// `k` distinct layers by sequential weighted draws without replacement,
    /// returned sorted. With `k = n_layers` every layer is returned and the
    /// generator is not advanced.
    pub fn sample_active_layers(&mut self) -> Vec<usize> {
        let p = self.sampling_distribution();
        sample_without_replacement(&p, self.k, &mut self.rng)
    }
}

/// Normalised `σ(±s)^τ`.
pub fn sampling_distribution(scores: &[f64], mode: SignMode, temperature: f64) -> Vec<f64> {
    let sign = match mode {
        SignMode::Intent => 1.0,
        SignMode::PaperLiteral => -1.0,
    };
    let raw: Vec<f64> = scores
        .iter()
        .map(|&s| sigmoid_scalar(sign * s).powf(temperature))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

pub fn sample_without_replacement(p: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = p.len();
    if k >= n {
        return (0..n).collect();
    }
    let mut w = p.to_vec();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let i = rng.weighted_index(&w);
        chosen.push(i);
        w[i] = 0.0;
    }
    chosen.sort_unstable();
    chosen
}

/// Makes `B` of the active layers trainable and freezes every other layer's.
pub fn apply_freeze_mask<T: Scalar>(adapters: &AdapterState<T>, active: &[usize]) {
    for layer in 0..adapters.n_layers() {
        adapters.set_layer_trainable(layer, active.contains(&layer));
    }
}

/// Zeroes the gate of a set of layers until dropped, then restores every
/// gate to exactly 1.
pub struct SuppressionContext<'a, T: Scalar> {
    adapters: &'a mut AdapterState<T>,
}

impl<'a, T: Scalar> SuppressionContext<'a, T> {
    pub fn new(adapters: &'a mut AdapterState<T>, layers: &[usize]) -> Self {
        for &n in layers {
            adapters.set_gate(n, T::zero());
        }
        SuppressionContext { adapters }
    }

    pub fn adapters(&self) -> &AdapterState<T> {
        self.adapters
    }
}

impl<T: Scalar> Drop for SuppressionContext<'_, T> {
    fn drop(&mut self) {
        for n in 0..self.adapters.n_layers() {
            self.adapters.set_gate(n, T::one());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize, k: usize) -> ImportanceState {
        let cfg = ReducerConfig { k_active: Some(k), ..ReducerConfig::default() };
        ImportanceState::new(&cfg, n, Rng::new(7)).unwrap()
    }

    #[test]
    fn zero_scores_give_uniform_in_both_modes() {
        for mode in [SignMode::Intent, SignMode::PaperLiteral] {
            let p = sampling_distribution(&[0.0; 4], mode, 1.0);
            assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn intent_mode_is_monotone_and_literal_reverses() {
        let p = sampling_distribution(&[2.0, 0.0], SignMode::Intent, 1.0);
        assert!((p[0] - 0.6379).abs() < 1e-4 && (p[1] - 0.3621).abs() < 1e-4);
        let q = sampling_distribution(&[2.0, 0.0], SignMode::PaperLiteral, 1.0);
        assert!(q[0] < q[1]);
    }

    #[test]
    fn full_k_returns_all_without_consuming_rng() {
        let mut s = state(5, 5);
        let before = s.rng.clone().next_u64();
        assert_eq!(s.sample_active_layers(), vec![0, 1, 2, 3, 4]);
        assert_eq!(s.rng.next_u64(), before);
    }

    #[test]
    fn sample_is_distinct_and_sized() {
        let mut s = state(8, 3);
        s.scores = vec![0.1, 2.0, -1.0, 0.0, 0.5, 0.3, 0.0, 1.0];
        for _ in 0..200 {
            let a = s.sample_active_layers();
            assert_eq!(a.len(), 3);
            assert!(a.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn suppression_set_prefers_low_scores_then_unprobed() {
        let mut s = state(4, 2);
        s.n_suppressed = 2;
        s.scores = vec![0.5, 0.0, 0.0, 0.2];
        assert_eq!(s.suppression_set(), vec![1, 2]);
        s.probe_counts = vec![0, 3, 0, 0];
        s.scores = vec![0.0, 0.0, 0.0, 0.2];
        assert_eq!(s.suppression_set(), vec![0, 2]);
    }

    #[test]
    fn config_validation() {
        let bad = ReducerConfig { k_active: Some(9), ..ReducerConfig::default() };
        assert!(bad.validate(8).is_err());
        let bad = ReducerConfig { ema_beta: 1.0, ..ReducerConfig::default() };
        assert!(bad.validate(8).is_err());
        assert_eq!(ReducerConfig::default().resolved_k(8), 4);
    }
}
