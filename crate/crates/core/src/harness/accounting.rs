//! Closed-form parameter counts and an analytic cost model for adapter
//! schemes on arbitrary architecture shapes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TargetModule};

/// Shape of a (possibly very large) transformer, for counting only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub n_layers: usize,
    pub backbone_params: u64,
    /// `(d_in, d_out)` per linear.
    pub modules: BTreeMap<TargetModule, [usize; 2]>,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.backbone_params == 0 {
            return Err(Error::Config("arch needs positive n_layers and backbone_params".into()));
        }
        if self.modules.is_empty() {
            return Err(Error::Config("arch lists no modules".into()));
        }
        if self.modules.values().any(|d| d[0] == 0 || d[1] == 0) {
            return Err(Error::Config("arch module dims must be positive".into()));
        }
        Ok(())
    }

    pub fn from_model(cfg: &ModelConfig) -> Self {
        ArchSpec {
            name: "toy".into(),
            n_layers: cfg.n_layers,
            backbone_params: cfg.backbone_params() as u64,
            modules: TargetModule::ALL
                .iter()
                .map(|&m| {
                    let (i, o) = cfg.module_dims(m);
                    (m, [i, o])
                })
                .collect(),
        }
    }

    fn dims(&self, m: TargetModule) -> Result<(u64, u64)> {
        self.modules
            .get(&m)
            .map(|d| (d[0] as u64, d[1] as u64))
            .ok_or_else(|| Error::Config(format!("arch has no module '{m}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    /// Independent `A` and `B` per (layer, module).
    Lora,
    /// Optional shared `A`, `heads` routed `B` experts per (layer, module).
    Reora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    pub kind: SchemeKind,
    pub rank: usize,
    pub heads: usize,
    pub share_a: bool,
    pub modules: Vec<TargetModule>,
    /// Layers whose `B` matrices (and routers) are removed.
    pub dropped_layers: usize,
    /// Fraction of layers whose `B` receive weight gradients each step.
    pub active_fraction: f64,
}

impl Scheme {
    pub fn lora(rank: usize, modules: Vec<TargetModule>) -> Self {
        Scheme {
            kind: SchemeKind::Lora,
            rank,
            heads: 1,
            share_a: false,
            modules,
            dropped_layers: 0,
            active_fraction: 1.0,
        }
    }

    pub fn reora(rank: usize, heads: usize, share_a: bool, modules: Vec<TargetModule>) -> Self {
        Scheme {
            kind: SchemeKind::Reora,
            rank,
            heads,
            share_a,
            modules,
            dropped_layers: 0,
            active_fraction: 1.0,
        }
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        if self.kind == SchemeKind::Lora && (self.heads != 1 || self.share_a) {
            return Err(Error::Config("plain LoRA has one head and no shared A".into()));
        }
        if self.modules.is_empty() {
            return Err(Error::Config("scheme targets no modules".into()));
        }
        if self.dropped_layers > arch.n_layers {
            return Err(Error::Config("more dropped layers than layers".into()));
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return Err(Error::Config("active_fraction must lie in (0, 1]".into()));
        }
        for &m in &self.modules {
            let (i, o) = arch.dims(m)?;
            if self.rank as u64 >= i.min(o) {
                return Err(Error::Config(format!("rank {} not below min dim of '{m}'", self.rank)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub count: u64,
    pub a_params: u64,
    pub b_params: u64,
    pub router_params: u64,
    pub percent_of_backbone: f64,
}

pub fn count_params_report(arch: &ArchSpec, scheme: &Scheme) -> Result<CountReport> {
    arch.validate()?;
    scheme.validate(arch)?;
    let r = scheme.rank as u64;
    let m = scheme.heads as u64;
    let layers = arch.n_layers as u64;
    let kept = (arch.n_layers - scheme.dropped_layers) as u64;
    let mut a = 0u64;
    let mut b = 0u64;
    let mut router = 0u64;
    let mut widths: Vec<u64> = Vec::new();
    for &module in &scheme.modules {
        let (d_in, d_out) = arch.dims(module)?;
        if scheme.share_a {
            if !widths.contains(&d_in) {
                widths.push(d_in);
                a += r * d_in;
            }
        } else {
            a += layers * r * d_in;
        }
        b += kept * m * r * d_out;
        if m > 1 {
            router += kept * r * m;
        }
    }
    let count = a + b + router;
    Ok(CountReport {
        count,
        a_params: a,
        b_params: b,
        router_params: router,
        percent_of_backbone: 100.0 * count as f64 / arch.backbone_params as f64,
    })
}

/// Multiply-accumulates per token of one training step on the adapter path.
///
/// Per attachment point with rank `r`, `m` experts, widths `d_in → d_out`:
/// forward `r·d_in + m·r·d_out` (+ `r·m` routing and `m·d_out` mixing when
/// `m > 1`); backward input gradients cost the same again; weight gradients
/// cost `r·d_in` for `A`, `r·m` for the router and `m·r·d_out` for the
/// experts, the last scaled by the active fraction. Frozen backbone work is
/// excluded, dropped layers contribute nothing.
pub fn step_macs_per_token(arch: &ArchSpec, scheme: &Scheme) -> Result<f64> {
    arch.validate()?;
    scheme.validate(arch)?;
    let r = scheme.rank as f64;
    let m = scheme.heads as f64;
    let kept = (arch.n_layers - scheme.dropped_layers) as f64;
    let mut total = 0.0;
    for &module in &scheme.modules {
        let (d_in, d_out) = arch.dims(module)?;
        let (d_in, d_out) = (d_in as f64, d_out as f64);
        let routing = if scheme.heads > 1 { r * m + m * d_out } else { 0.0 };
        let forward = r * d_in + m * r * d_out + routing;
        let input_grads = forward;
        let router_w = if scheme.heads > 1 { r * m } else { 0.0 };
        let weight_grads = r * d_in + router_w + scheme.active_fraction * m * r * d_out;
        total += kept * (forward + input_grads + weight_grads);
    }
    Ok(total)
}

/// Training cost of `scheme` relative to plain rank-16 LoRA on the same
/// modules. `seq_len` and `steps` scale both sides equally and are kept for
/// totals.
pub fn estimate_flops(arch: &ArchSpec, scheme: &Scheme, seq_len: usize, steps: usize) -> Result<FlopsReport> {
    let base = Scheme::lora(16, scheme.modules.clone());
    let per_token = step_macs_per_token(arch, scheme)?;
    let base_per_token = step_macs_per_token(arch, &base)?;
    let tokens = (seq_len * steps) as f64;
    Ok(FlopsReport {
        macs: per_token * tokens,
        baseline_macs: base_per_token * tokens,
        relative: per_token / base_per_token,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub macs: f64,
    pub baseline_macs: f64,
    pub relative: f64,
}

/// Rank-`rank`, `heads`-expert shared-`A` configurations (target module
/// subset × dropped layer count) whose parameter count lands within
/// `tolerance` (relative) of `target`.
pub fn search_configs(arch: &ArchSpec, rank: usize, heads: usize, target: u64, tolerance: f64) -> Result<Vec<(Scheme, u64)>> {
    let mods: Vec<TargetModule> = arch.modules.keys().copied().collect();
    let mut hits = Vec::new();
    for mask in 1u32..(1 << mods.len()) {
        let subset: Vec<TargetModule> = mods
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &m)| m)
            .collect();
        for dropped in 0..arch.n_layers {
            let mut s = Scheme::reora(rank, heads, true, subset.clone());
            s.dropped_layers = dropped;
            let c = count_params_report(arch, &s)?.count;
            if (c as f64 - target as f64).abs() <= tolerance * target as f64 {
                hits.push((s, c));
            }
        }
    }
    Ok(hits)
}
