//! Shared-A, multi-B adapters.
//!
//! Every adapted linear layer `n` computes
//!
//! ```text
//! u  = A_g x                        (A_g shared by all points with input width g)
//! w  = softmax(W_gᵀ u)              (per token, dead experts masked out)
//! Δy = (α/r) · Σᵢ wᵢ (Bᵢ⁽ⁿ⁾ u)
//! ```
//!
//! With one expert the router is absent and `Δy = (α/r) B A x`. With
//! `share_a = false` each attachment point owns its own `A`, which gives the
//! plain per-layer LoRA baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TargetModule};
use crate::numerics::ops::{self, SoftmaxMask};
use crate::numerics::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMode {
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BInit {
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AInit {
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInit {
    Zeros,
    Gaussian,
}

/// What a suppression gate of 0 switches off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressScope {
    /// Only the adapter delta of the layer.
    AdapterDelta,
    /// The layer's whole residual contribution.
    FullLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub n_experts: usize,
    pub alpha: f64,
    pub target_modules: Vec<TargetModule>,
    pub share_a: bool,
    pub router_mode: RouterMode,
    pub b_init: BInit,
    pub a_init: AInit,
    /// Std of the Gaussian `A`; `None` means `1/sqrt(d_in)` per group.
    pub a_init_std: Option<f64>,
    pub router_init: RouterInit,
    /// Std of a Gaussian router; `None` means `1/sqrt(rank)`.
    pub router_init_std: Option<f64>,
    pub freeze_router_with_b: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 16,
            n_experts: 4,
            alpha: 32.0,
            target_modules: TargetModule::default_set(),
            share_a: true,
            router_mode: RouterMode::Dense,
            b_init: BInit::Zeros,
            a_init: AInit::Gaussian,
            a_init_std: None,
            router_init: RouterInit::Gaussian,
            router_init_std: None,
            freeze_router_with_b: false,
        }
    }
}

impl AdapterConfig {
    /// Plain per-layer LoRA: private `A`, one `B`, no router.
    pub fn vanilla_lora(rank: usize, alpha: f64, target_modules: Vec<TargetModule>) -> Self {
        AdapterConfig {
            rank,
            n_experts: 1,
            alpha,
            target_modules,
            share_a: false,
            ..AdapterConfig::default()
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, mcfg: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter.rank must be positive".into()));
        }
        if self.n_experts == 0 {
            return Err(Error::Config("adapter.n_experts must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("adapter.alpha must be positive".into()));
        }
        if self.target_modules.is_empty() {
            return Err(Error::Config("adapter.target_modules is empty".into()));
        }
        for s in [self.a_init_std, self.router_init_std].into_iter().flatten() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("init std must be positive".into()));
            }
        }
        for m in &self.target_modules {
            if !mcfg.target_modules.contains(m) {
                return Err(Error::Config(format!(
                    "adapter target {m} is not an attachment point of the model"
                )));
            }
            let (d_in, d_out) = mcfg.module_dims(*m);
            if self.rank >= d_in.min(d_out) {
                return Err(Error::Config(format!(
                    "rank {} must be below min(d_in, d_out) = {} for module {m}",
                    self.rank,
                    d_in.min(d_out)
                )));
            }
        }
        Ok(())
    }
}

/// One `A` shared by every attachment point with input width `d_in`.
#[derive(Clone, Debug)]
pub struct SharedA<T: Scalar> {
    pub d_in: usize,
    pub a: Tensor<T>,
}

/// Adapter state of one (layer, module) pair.
#[derive(Clone, Debug)]
pub struct Attachment<T: Scalar> {
    pub layer: usize,
    pub module: TargetModule,
    pub d_in: usize,
    pub d_out: usize,
    /// `[r, d_in]`; a handle onto the group tensor when `A` is shared.
    pub a: Tensor<T>,
    /// `Bᵢ`, each `[d_out, r]`.
    pub experts: Vec<Tensor<T>>,
    /// `W_g`, `[r, m]`; absent with a single expert.
    pub router: Option<Tensor<T>>,
    pub alive: Vec<bool>,
}

impl<T: Scalar> Attachment<T> {
    pub fn any_alive(&self) -> bool {
        self.alive.iter().any(|&a| a)
    }
}

/// Per-token gating weights `softmax(W_gᵀ u)` over the alive experts.
pub fn route<T: Scalar>(router: &Tensor<T>, x_down: &Tensor<T>, alive: &[bool]) -> Result<Tensor<T>> {
    let rs = router.shape();
    if rs.len() != 2 || x_down.shape().len() != 2 || x_down.shape()[1] != rs[0] || alive.len() != rs[1] {
        return Err(Error::shape("route", x_down.shape(), rs));
    }
    let z = ops::matmul(x_down, router)?;
    ops::softmax_masked(&z, SoftmaxMask::Columns(alive.to_vec()))
}

pub struct AdapterState<T: Scalar> {
    cfg: AdapterConfig,
    n_layers: usize,
    groups: Vec<SharedA<T>>,
    points: Vec<Attachment<T>>,
    index: BTreeMap<(usize, TargetModule), usize>,
    gates: Vec<T>,
    scope: SuppressScope,
}

impl<T: Scalar> AdapterState<T> {
    pub fn init(mcfg: &ModelConfig, acfg: &AdapterConfig, rng: &mut Rng) -> Result<Self> {
        mcfg.validate()?;
        acfg.validate(mcfg)?;
        let r = acfg.rank;
        let m = acfg.n_experts;
        let gaussian = |rng: &mut Rng, n: usize, std: f64| -> Vec<T> {
            (0..n).map(|_| T::lit(rng.normal() * std)).collect()
        };
        let a_std = |d_in: usize| acfg.a_init_std.unwrap_or(1.0 / (d_in as f64).sqrt());
        let router_std = acfg.router_init_std.unwrap_or(1.0 / (r as f64).sqrt());

        let mut groups: Vec<SharedA<T>> = Vec::new();
        if acfg.share_a {
            for module in &acfg.target_modules {
                let (d_in, _) = mcfg.module_dims(*module);
                if groups.iter().all(|g| g.d_in != d_in) {
                    let a = Tensor::param(&[r, d_in], gaussian(rng, r * d_in, a_std(d_in)))?;
                    groups.push(SharedA { d_in, a });
                }
            }
        }

        let mut points = Vec::new();
        let mut index = BTreeMap::new();
        for layer in 0..mcfg.n_layers {
            for module in TargetModule::ALL {
                if !acfg.target_modules.contains(&module) {
                    continue;
                }
                let (d_in, d_out) = mcfg.module_dims(module);
                let a = if acfg.share_a {
                    groups.iter().find(|g| g.d_in == d_in).expect("group exists").a.clone()
                } else {
                    Tensor::param(&[r, d_in], gaussian(rng, r * d_in, a_std(d_in)))?
                };
                let experts = (0..m)
                    .map(|_| Tensor::param(&[d_out, r], vec![T::zero(); d_out * r]))
                    .collect::<Result<Vec<_>>>()?;
                let router = if m > 1 {
                    let w = match acfg.router_init {
                        RouterInit::Zeros => vec![T::zero(); r * m],
                        RouterInit::Gaussian => gaussian(rng, r * m, router_std),
                    };
                    Some(Tensor::param(&[r, m], w)?)
                } else {
                    None
                };
                index.insert((layer, module), points.len());
                points.push(Attachment {
                    layer,
                    module,
                    d_in,
                    d_out,
                    a,
                    experts,
                    router,
                    alive: vec![true; m],
                });
            }
        }
        Ok(AdapterState {
            cfg: acfg.clone(),
            n_layers: mcfg.n_layers,
            groups,
            points,
            index,
            gates: vec![T::one(); mcfg.n_layers],
            scope: SuppressScope::AdapterDelta,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn shared_groups(&self) -> &[SharedA<T>] {
        &self.groups
    }

    pub fn points(&self) -> &[Attachment<T>] {
        &self.points
    }

    pub fn point(&self, layer: usize, module: TargetModule) -> Option<&Attachment<T>> {
        self.index.get(&(layer, module)).map(|&i| &self.points[i])
    }

    pub fn layer_points(&self, layer: usize) -> impl Iterator<Item = &Attachment<T>> {
        self.points.iter().filter(move |p| p.layer == layer)
    }

    pub fn gate(&self, layer: usize) -> T {
        self.gates[layer]
    }

    pub fn gates(&self) -> &[T] {
        &self.gates
    }

    pub(crate) fn set_gate(&mut self, layer: usize, value: T) {
        self.gates[layer] = value;
    }

    pub fn suppress_scope(&self) -> SuppressScope {
        self.scope
    }

    pub fn set_suppress_scope(&mut self, scope: SuppressScope) {
        self.scope = scope;
    }

    /// Adapter output for `x[N×d_in]` at (layer, module), or `None` when the
    /// point is absent, fully dead, or gated off.
    pub fn delta(&self, layer: usize, module: TargetModule, x: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let Some(p) = self.point(layer, module) else {
            return Ok(None);
        };
        if !p.any_alive() {
            return Ok(None);
        }
        let gate = self.gates[layer];
        let gated = self.scope == SuppressScope::AdapterDelta;
        if gated && gate == T::zero() {
            return Ok(None);
        }
        let u = ops::matmul_nt(x, &p.a)?;
        let mixed = match &p.router {
            None => ops::matmul_nt(&u, &p.experts[0])?,
            Some(router) => {
                let w = route(router, &u, &p.alive)?;
                let mut parts = Vec::new();
                let mut cols = Vec::new();
                for (i, b) in p.experts.iter().enumerate() {
                    if p.alive[i] {
                        parts.push(ops::matmul_nt(&u, b)?);
                        cols.push(i);
                    }
                }
                ops::mixture(&parts, &cols, &w)?
            }
        };
        let mut out = ops::scale(&mixed, T::lit(self.cfg.scaling()));
        if gated && gate != T::one() {
            out = ops::scale(&out, gate);
        }
        Ok(Some(out))
    }

    /// Gating weights at one point for an input batch, without recording.
    pub fn gating(&self, layer: usize, module: TargetModule, x: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let Some(p) = self.point(layer, module) else {
            return Ok(None);
        };
        let Some(router) = &p.router else {
            return Ok(None);
        };
        crate::numerics::no_grad(|| {
            let u = ops::matmul_nt(x, &p.a)?;
            route(router, &u, &p.alive).map(Some)
        })
    }

    /// Every distinct parameter tensor, shared `A` listed once.
    pub fn parameters(&self) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = self.groups.iter().map(|g| g.a.clone()).collect();
        for p in &self.points {
            if !self.cfg.share_a {
                out.push(p.a.clone());
            }
            out.extend(p.experts.iter().cloned());
            if let Some(r) = &p.router {
                out.push(r.clone());
            }
        }
        out
    }

    /// Parameters with stable names, in checkpoint order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .groups
            .iter()
            .map(|g| (format!("a.shared.d{}", g.d_in), g.a.clone()))
            .collect();
        for p in &self.points {
            let tag = format!("l{}.{}", p.layer, p.module);
            if !self.cfg.share_a {
                out.push((format!("a.{tag}"), p.a.clone()));
            }
            for (i, b) in p.experts.iter().enumerate() {
                out.push((format!("b.{tag}.e{i}"), b.clone()));
            }
            if let Some(r) = &p.router {
                out.push((format!("router.{tag}"), r.clone()));
            }
        }
        out
    }

    /// The `B` matrices of one layer, across modules and experts.
    pub fn layer_experts(&self, layer: usize) -> Vec<Tensor<T>> {
        self.layer_points(layer).flat_map(|p| p.experts.iter().cloned()).collect()
    }

    pub fn routers(&self) -> Vec<Tensor<T>> {
        self.points.iter().filter_map(|p| p.router.clone()).collect()
    }

    /// The distinct `A` tensors (one per group, or one per point).
    pub fn a_tensors(&self) -> Vec<Tensor<T>> {
        if self.cfg.share_a {
            self.groups.iter().map(|g| g.a.clone()).collect()
        } else {
            self.points.iter().map(|p| p.a.clone()).collect()
        }
    }

    /// Marks the alive `B` matrices of `layer` trainable or frozen. Routers
    /// follow only when `freeze_router_with_b` is set.
    pub fn set_layer_trainable(&self, layer: usize, on: bool) {
        for p in self.layer_points(layer) {
            for (b, &alive) in p.experts.iter().zip(&p.alive) {
                b.set_requires_grad(on && alive);
            }
            if let Some(r) = &p.router {
                let router_on = if self.cfg.freeze_router_with_b { on } else { true };
                r.set_requires_grad(router_on && p.any_alive());
            }
        }
    }

    pub fn layer_trainable(&self, layer: usize) -> bool {
        self.layer_points(layer)
            .any(|p| p.experts.iter().any(|b| b.requires_grad()))
    }

    /// Permanently removes expert `expert` at (layer, module).
    pub fn kill_expert(&mut self, layer: usize, module: TargetModule, expert: usize) -> Result<()> {
        let &i = self
            .index
            .get(&(layer, module))
            .ok_or_else(|| Error::Input(format!("no adapter at layer {layer} module {module}")))?;
        let p = &mut self.points[i];
        if expert >= p.alive.len() {
            return Err(Error::Input(format!("expert {expert} out of range")));
        }
        p.alive[expert] = false;
        p.experts[expert].set_requires_grad(false);
        if !p.any_alive() {
            if let Some(r) = &p.router {
                r.set_requires_grad(false);
            }
            if !self.cfg.share_a {
                p.a.set_requires_grad(false);
            }
        }
        Ok(())
    }

    /// Removes every `B` of `layer`.
    pub fn kill_layer(&mut self, layer: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::Input(format!("layer {layer} out of range")));
        }
        let targets: Vec<(TargetModule, usize)> = self
            .layer_points(layer)
            .flat_map(|p| (0..p.alive.len()).map(move |e| (p.module, e)))
            .collect();
        for (module, e) in targets {
            self.kill_expert(layer, module, e)?;
        }
        Ok(())
    }

    pub fn alive_mask(&self) -> Vec<(usize, TargetModule, Vec<bool>)> {
        self.points.iter().map(|p| (p.layer, p.module, p.alive.clone())).collect()
    }

    /// Elements of every tensor that is currently trainable and alive.
    pub fn count_trainable(&self) -> usize {
        self.parameters()
            .iter()
            .filter(|t| t.requires_grad())
            .map(|t| t.numel())
            .sum()
    }

    /// Total adapter elements regardless of masks.
    pub fn count_total(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Independent copy with fresh storage (sharing preserved inside the copy).
    pub fn deep_clone(&self) -> Self {
        let groups: Vec<SharedA<T>> = self
            .groups
            .iter()
            .map(|g| SharedA { d_in: g.d_in, a: g.a.deep_clone() })
            .collect();
        let points = self
            .points
            .iter()
            .map(|p| Attachment {
                layer: p.layer,
                module: p.module,
                d_in: p.d_in,
                d_out: p.d_out,
                a: if self.cfg.share_a {
                    groups.iter().find(|g| g.d_in == p.d_in).expect("group").a.clone()
                } else {
                    p.a.deep_clone()
                },
                experts: p.experts.iter().map(|b| b.deep_clone()).collect(),
                router: p.router.as_ref().map(|r| r.deep_clone()),
                alive: p.alive.clone(),
            })
            .collect();
        AdapterState {
            cfg: self.cfg.clone(),
            n_layers: self.n_layers,
            groups,
            points,
            index: self.index.clone(),
            gates: self.gates.clone(),
            scope: self.scope,
        }
    }

    pub(crate) fn restore_masks(&mut self, alive: &[(usize, TargetModule, Vec<bool>)], trainable: &[String]) -> Result<()> {
        for (layer, module, mask) in alive {
            let &i = self
                .index
                .get(&(*layer, *module))
                .ok_or_else(|| Error::Format(format!("manifest names unknown point l{layer}.{module}")))?;
            if self.points[i].alive.len() != mask.len() {
                return Err(Error::Format("alive mask width mismatch".into()));
            }
            self.points[i].alive = mask.clone();
        }
        for (name, t) in self.named_parameters() {
            t.set_requires_grad(trainable.contains(&name));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::no_grad;

    fn toy_model() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 10,
            max_seq_len: 6,
            target_modules: TargetModule::ALL.to_vec(),
        }
    }

    fn rand_input(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let mcfg = toy_model();
        let acfg = AdapterConfig { rank: 2, n_experts: 3, ..AdapterConfig::default() };
        let mut rng = Rng::new(1);
        let st = AdapterState::<f64>::init(&mcfg, &acfg, &mut rng).unwrap();
        let x = rand_input(&mut rng, 5, 8);
        let d = st.delta(1, TargetModule::Q, &x).unwrap().unwrap();
        assert!(d.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grouping_by_input_width() {
        let mcfg = ModelConfig { d_ff: 8, ..toy_model() };
        let acfg = AdapterConfig {
            rank: 2,
            target_modules: vec![TargetModule::Q, TargetModule::Up],
            ..AdapterConfig::default()
        };
        let st = AdapterState::<f64>::init(&mcfg, &acfg, &mut Rng::new(0)).unwrap();
        assert_eq!(st.shared_groups().len(), 1);
        let a0 = &st.point(0, TargetModule::Q).unwrap().a;
        let a2 = &st.point(2, TargetModule::Up).unwrap().a;
        assert!(a0.same(a2));

        let acfg = AdapterConfig { target_modules: TargetModule::ALL.to_vec(), ..acfg };
        let st = AdapterState::<f64>::init(&toy_model(), &acfg, &mut Rng::new(0)).unwrap();
        // d_model inputs for q,k,v,o,up; d_ff input for down
        assert_eq!(st.shared_groups().len(), 2);
    }

    #[test]
    fn shared_a_mutation_visible_everywhere() {
        let acfg = AdapterConfig { rank: 2, ..AdapterConfig::default() };
        let st = AdapterState::<f64>::init(&toy_model(), &acfg, &mut Rng::new(4)).unwrap();
        st.shared_groups()[0].a.data_mut()[0] = 123.0;
        assert_eq!(st.point(2, TargetModule::K).unwrap().a.data()[0], 123.0);
    }

    #[test]
    fn same_seed_same_a() {
        let acfg = AdapterConfig { rank: 2, ..AdapterConfig::default() };
        let a = AdapterState::<f64>::init(&toy_model(), &acfg, &mut Rng::new(9)).unwrap();
        let b = AdapterState::<f64>::init(&toy_model(), &acfg, &mut Rng::new(9)).unwrap();
        for (x, y) in a.parameters().iter().zip(b.parameters().iter()) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn rank_must_be_below_min_dim() {
        let acfg = AdapterConfig { rank: 8, ..AdapterConfig::default() };
        assert!(matches!(
            AdapterState::<f64>::init(&toy_model(), &acfg, &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_router_is_uniform_and_single_alive_is_one() {
        let mut rng = Rng::new(2);
        let router = Tensor::<f64>::param(&[3, 4], vec![0.0; 12]).unwrap();
        let u = rand_input(&mut rng, 6, 3);
        let w = route(&router, &u, &[true; 4]).unwrap().to_vec();
        assert!(w.iter().all(|&v| v == 0.25));

        let router = rand_input(&mut rng, 3, 4);
        let w = route(&router, &u, &[true; 4]).unwrap().to_vec();
        for row in w.chunks(4) {
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let w = route(&router, &u, &[false, false, true, false]).unwrap().to_vec();
        for row in w.chunks(4) {
            assert_eq!(row, &[0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn route_checks_dimensions() {
        let router = Tensor::<f64>::zeros(&[3, 4]);
        let u = Tensor::<f64>::zeros(&[2, 5]);
        assert!(matches!(route(&router, &u, &[true; 4]), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_expert_reduces_to_lora() {
        let mcfg = toy_model();
        let acfg = AdapterConfig::vanilla_lora(2, 4.0, vec![TargetModule::V]);
        let mut rng = Rng::new(5);
        let st = AdapterState::<f64>::init(&mcfg, &acfg, &mut rng).unwrap();
        let p = st.point(1, TargetModule::V).unwrap();
        assert!(p.router.is_none());
        let b: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        p.experts[0].assign(&b).unwrap();
        let x = rand_input(&mut rng, 3, 8);
        let d = st.delta(1, TargetModule::V, &x).unwrap().unwrap().to_vec();
        let a = p.a.to_vec();
        for n in 0..3 {
            let xr = &x.to_vec()[n * 8..(n + 1) * 8];
            let u: Vec<f64> = (0..2).map(|k| (0..8).map(|j| a[k * 8 + j] * xr[j]).sum()).collect();
            for o in 0..8 {
                let want = 2.0 * (b[o * 2] * u[0] + b[o * 2 + 1] * u[1]);
                assert!((d[n * 8 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn killing_a_zero_expert_changes_nothing() {
        let acfg = AdapterConfig { rank: 2, n_experts: 3, ..AdapterConfig::default() };
        let mut rng = Rng::new(6);
        let mut st = AdapterState::<f64>::init(&toy_model(), &acfg, &mut rng).unwrap();
        // experts 0 and 1 get values, expert 2 stays zero
        for e in 0..2 {
            let b = &st.point(0, TargetModule::Q).unwrap().experts[e];
            let vals: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            b.assign(&vals).unwrap();
        }
        let x = rand_input(&mut rng, 4, 8);
        let before = st.delta(0, TargetModule::Q, &x).unwrap().unwrap().to_vec();
        st.kill_expert(0, TargetModule::Q, 2).unwrap();
        let after = st.delta(0, TargetModule::Q, &x).unwrap().unwrap().to_vec();
        // only renormalisation over the survivors differs
        let w_before = {
            let mut s = AdapterState::deep_clone(&st);
            s.points[0].alive = vec![true; 3];
            s.gating(0, TargetModule::Q, &x).unwrap().unwrap().to_vec()
        };
        for n in 0..4 {
            let w = &w_before[n * 3..n * 3 + 3];
            let renorm = w[0] + w[1];
            for o in 0..8 {
                assert!((after[n * 8 + o] * renorm - before[n * 8 + o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kill_with_zero_b_and_all_alive_is_bit_exact_when_b_zero() {
        let acfg = AdapterConfig { rank: 2, n_experts: 3, ..AdapterConfig::default() };
        let mut rng = Rng::new(8);
        let mut st = AdapterState::<f64>::init(&toy_model(), &acfg, &mut rng).unwrap();
        let x = rand_input(&mut rng, 4, 8);
        let before = st.delta(0, TargetModule::Q, &x).unwrap().unwrap();
        st.kill_expert(0, TargetModule::Q, 1).unwrap();
        let after = st.delta(0, TargetModule::Q, &x).unwrap().unwrap();
        assert!(before.bit_eq(&after));
    }

    #[test]
    fn count_trainable_closed_forms() {
        let mcfg = ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 16,
            max_seq_len: 8,
            target_modules: vec![TargetModule::Q],
        };
        let lora = AdapterConfig::vanilla_lora(16, 32.0, vec![TargetModule::Q]);
        let st = AdapterState::<f32>::init(&mcfg, &lora, &mut Rng::new(0)).unwrap();
        assert_eq!(st.count_trainable(), 8 * 16 * (64 + 64));
        assert_eq!(st.count_trainable(), 16384);

        let shared = AdapterConfig { share_a: true, ..lora };
        let st = AdapterState::<f32>::init(&mcfg, &shared, &mut Rng::new(0)).unwrap();
        assert_eq!(st.count_trainable(), 16 * 64 + 8 * 16 * 64);
        assert_eq!(st.count_trainable(), 9216);
    }

    #[test]
    fn freezing_and_killing_update_the_count() {
        let acfg = AdapterConfig { rank: 2, n_experts: 2, target_modules: vec![TargetModule::Q], ..AdapterConfig::default() };
        let mut st = AdapterState::<f64>::init(&toy_model(), &acfg, &mut Rng::new(0)).unwrap();
        let a = 2 * 8;
        let b = 8 * 2;
        let router = 2 * 2;
        assert_eq!(st.count_trainable(), a + 3 * (2 * b + router));
        st.set_layer_trainable(1, false);
        assert_eq!(st.count_trainable(), a + 3 * router + 2 * 2 * b);
        st.set_layer_trainable(1, true);
        st.kill_layer(2).unwrap();
        assert_eq!(st.count_trainable(), a + 2 * (2 * b + router));
        no_grad(|| {
            let x = Tensor::<f64>::zeros(&[1, 8]);
            assert!(st.delta(2, TargetModule::Q, &x).unwrap().is_none());
        });
    }
}
