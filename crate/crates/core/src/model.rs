//! Frozen pre-norm transformer backbone with adapter attachment points on
//! its `q, k, v, o, up, down` linears.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterState, SuppressScope};
use crate::error::{Error, Result};
use crate::numerics::ops::{self, SoftmaxMask};
use crate::numerics::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetModule {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl TargetModule {
    pub const ALL: [TargetModule; 6] = [
        TargetModule::Q,
        TargetModule::K,
        TargetModule::V,
        TargetModule::O,
        TargetModule::Up,
        TargetModule::Down,
    ];

    pub fn default_set() -> Vec<TargetModule> {
        vec![TargetModule::Q, TargetModule::K, TargetModule::V, TargetModule::Up, TargetModule::Down]
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetModule::Q => "q",
            TargetModule::K => "k",
            TargetModule::V => "v",
            TargetModule::O => "o",
            TargetModule::Up => "up",
            TargetModule::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        TargetModule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown target module '{s}'")))
    }
}

impl fmt::Display for TargetModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub target_modules: Vec<TargetModule>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 24,
            max_seq_len: 16,
            target_modules: TargetModule::default_set(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.target_modules.is_empty() {
            return Err(Error::Config("model.target_modules is empty".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(d_in, d_out)` of a target linear.
    pub fn module_dims(&self, m: TargetModule) -> (usize, usize) {
        match m {
            TargetModule::Q | TargetModule::K | TargetModule::V | TargetModule::O => (self.d_model, self.d_model),
            TargetModule::Up => (self.d_model, self.d_ff),
            TargetModule::Down => (self.d_ff, self.d_model),
        }
    }

    /// Backbone element count.
    pub fn backbone_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + 4 * d;
        2 * self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d
    }
}

/// A batch of equal-length token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<usize>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Input("empty token batch".into()));
        };
        let seq = first.len();
        if seq == 0 || rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Input("token rows must be non-empty and of equal length".into()));
        }
        Ok(TokenBatch {
            batch: rows.len(),
            seq,
            ids: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq..(i + 1) * self.seq]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attention {
    Causal,
    Bidirectional,
}

#[derive(Clone, Debug)]
pub struct Block<T: Scalar> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    fn weight(&self, m: TargetModule) -> &Tensor<T> {
        match m {
            TargetModule::Q => &self.wq,
            TargetModule::K => &self.wk,
            TargetModule::V => &self.wv,
            TargetModule::O => &self.wo,
            TargetModule::Up => &self.w_up,
            TargetModule::Down => &self.w_down,
        }
    }
}

/// The frozen base model. Linear weights are stored `[d_out, d_in]`.
pub struct Backbone<T: Scalar> {
    cfg: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    pub head: Tensor<T>,
}

impl<T: Scalar> Backbone<T> {
    /// Scaled-Gaussian initialisation; every tensor frozen.
    pub fn build(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut gauss = |shape: &[usize], std: f64| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| T::lit(rng.normal() * std)).collect())
        };
        let lin_std = |d_in: usize| 1.0 / (d_in as f64).sqrt();
        let tok_emb = gauss(&[cfg.vocab_size, d], 1.0)?;
        let pos_emb = gauss(&[cfg.max_seq_len, d], 0.5)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(Block {
                ln1_g: Tensor::new(&[d], vec![T::one(); d])?,
                ln1_b: Tensor::zeros(&[d]),
                wq: gauss(&[d, d], lin_std(d))?,
                wk: gauss(&[d, d], lin_std(d))?,
                wv: gauss(&[d, d], lin_std(d))?,
                wo: gauss(&[d, d], lin_std(d) / (2.0 * cfg.n_layers as f64).sqrt())?,
                ln2_g: Tensor::new(&[d], vec![T::one(); d])?,
                ln2_b: Tensor::zeros(&[d]),
                w_up: gauss(&[cfg.d_ff, d], lin_std(d))?,
                w_down: gauss(&[d, cfg.d_ff], lin_std(cfg.d_ff) / (2.0 * cfg.n_layers as f64).sqrt())?,
            });
        }
        let lnf_g = Tensor::new(&[d], vec![T::one(); d])?;
        let lnf_b = Tensor::zeros(&[d]);
        let head = gauss(&[cfg.vocab_size, d], lin_std(d))?;
        Ok(Backbone { cfg: cfg.clone(), tok_emb, pos_emb, blocks, lnf_g, lnf_b, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w_up", &b.w_up),
                ("w_down", &b.w_down),
            ] {
                out.push((format!("blocks.{i}.{name}"), t.clone()));
            }
        }
        out.push(("lnf_g".into(), self.lnf_g.clone()));
        out.push(("lnf_b".into(), self.lnf_b.clone()));
        out.push(("head".into(), self.head.clone()));
        out
    }

    /// Unfreezes (warm-up pre-training) or freezes every backbone tensor.
    pub fn set_trainable(&self, on: bool) {
        for (_, t) in self.named_tensors() {
            t.set_requires_grad(on);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| !t.requires_grad())
    }

    /// SHA-256 over every tensor's name, shape and value bits.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update(t.checksum());
        }
        h.finalize().into()
    }

    pub(crate) fn from_parts(cfg: ModelConfig, mut named: std::collections::HashMap<String, Tensor<T>>) -> Result<Self> {
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!("tensor '{name}' has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let d = cfg.d_model;
        let tok_emb = take("tok_emb", &[cfg.vocab_size, d])?;
        let pos_emb = take("pos_emb", &[cfg.max_seq_len, d])?;
        let mut blocks = Vec::new();
        for i in 0..cfg.n_layers {
            let p = |n: &str| format!("blocks.{i}.{n}");
            blocks.push(Block {
                ln1_g: take(&p("ln1_g"), &[d])?,
                ln1_b: take(&p("ln1_b"), &[d])?,
                wq: take(&p("wq"), &[d, d])?,
                wk: take(&p("wk"), &[d, d])?,
                wv: take(&p("wv"), &[d, d])?,
                wo: take(&p("wo"), &[d, d])?,
                ln2_g: take(&p("ln2_g"), &[d])?,
                ln2_b: take(&p("ln2_b"), &[d])?,
                w_up: take(&p("w_up"), &[cfg.d_ff, d])?,
                w_down: take(&p("w_down"), &[d, cfg.d_ff])?,
            });
        }
        let lnf_g = take("lnf_g", &[d])?;
        let lnf_b = take("lnf_b", &[d])?;
        let head = take("head", &[cfg.vocab_size, d])?;
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor '{extra}' in checkpoint")));
        }
        let bb = Backbone { cfg, tok_emb, pos_emb, blocks, lnf_g, lnf_b, head };
        bb.set_trainable(false);
        Ok(bb)
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq > self.cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.seq, self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} out of range for vocab {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn linear(
        &self,
        x: &Tensor<T>,
        layer: usize,
        module: TargetModule,
        adapters: Option<&AdapterState<T>>,
    ) -> Result<Tensor<T>> {
        let y = ops::matmul_nt(x, self.blocks[layer].weight(module))?;
        match adapters {
            Some(ad) => match ad.delta(layer, module, x)? {
                Some(delta) => ops::add(&y, &delta),
                None => Ok(y),
            },
            None => Ok(y),
        }
    }

    /// Final-norm hidden states `[batch·seq, d_model]`.
    pub fn hidden(&self, tokens: &TokenBatch, adapters: Option<&AdapterState<T>>, attention: Attention) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        if let Some(ad) = adapters {
            if ad.n_layers() != self.cfg.n_layers {
                return Err(Error::Input("adapter layer count does not match the backbone".into()));
            }
        }
        let (b, t) = (tokens.batch, tokens.seq);
        let h = self.cfg.n_heads;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let mut x = ops::add(
            &ops::gather_rows(&self.tok_emb, &tokens.ids)?,
            &ops::gather_rows(&self.pos_emb, &positions)?,
        )?;
        let mask = match attention {
            Attention::Causal => SoftmaxMask::Causal,
            Attention::Bidirectional => SoftmaxMask::None,
        };
        let att_scale = T::one() / T::lit(self.cfg.head_dim() as f64).sqrt();
        for (n, blk) in self.blocks.iter().enumerate() {
            let branch_gate = match adapters {
                Some(ad) if ad.suppress_scope() == SuppressScope::FullLayer => ad.gate(n),
                _ => T::one(),
            };
            let hn = ops::layer_norm(&x, &blk.ln1_g, &blk.ln1_b)?;
            let q = self.linear(&hn, n, TargetModule::Q, adapters)?;
            let k = self.linear(&hn, n, TargetModule::K, adapters)?;
            let v = self.linear(&hn, n, TargetModule::V, adapters)?;
            let qh = ops::split_heads(&q, b, t, h)?;
            let kh = ops::split_heads(&k, b, t, h)?;
            let vh = ops::split_heads(&v, b, t, h)?;
            let scores = ops::scale(&ops::bmm(&qh, &kh, true)?, att_scale);
            let att = ops::softmax_masked(&scores, mask.clone())?;
            let ctx = ops::merge_heads(&ops::bmm(&att, &vh, false)?, b, t, h)?;
            let mut attn_out = self.linear(&ctx, n, TargetModule::O, adapters)?;
            if branch_gate != T::one() {
                attn_out = ops::scale(&attn_out, branch_gate);
            }
            x = ops::add(&x, &attn_out)?;

            let hn = ops::layer_norm(&x, &blk.ln2_g, &blk.ln2_b)?;
            let up = ops::gelu(&self.linear(&hn, n, TargetModule::Up, adapters)?);
            let mut mlp_out = self.linear(&up, n, TargetModule::Down, adapters)?;
            if branch_gate != T::one() {
                mlp_out = ops::scale(&mlp_out, branch_gate);
            }
            x = ops::add(&x, &mlp_out)?;
        }
        ops::layer_norm(&x, &self.lnf_g, &self.lnf_b)
    }

    /// Causal language-model logits `[batch, seq, vocab]`.
    pub fn forward(&self, tokens: &TokenBatch, adapters: Option<&AdapterState<T>>) -> Result<Tensor<T>> {
        let hid = self.hidden(tokens, adapters, Attention::Causal)?;
        let logits = ops::matmul_nt(&hid, &self.head)?;
        ops::reshape(&logits, &[tokens.batch, tokens.seq, self.cfg.vocab_size])
    }

    /// Causal logits flattened to `[batch·seq, vocab]`.
    pub fn lm_logits(&self, tokens: &TokenBatch, adapters: Option<&AdapterState<T>>) -> Result<Tensor<T>> {
        let hid = self.hidden(tokens, adapters, Attention::Causal)?;
        ops::matmul_nt(&hid, &self.head)
    }

    /// Sequence classification: mean-pooled bidirectional hidden state scored
    /// against the output-head rows of the label tokens. Returns `[batch, classes]`.
    pub fn classify(&self, tokens: &TokenBatch, adapters: Option<&AdapterState<T>>, label_tokens: &[usize]) -> Result<Tensor<T>> {
        let hid = self.hidden(tokens, adapters, Attention::Bidirectional)?;
        let pooled = ops::mean_pool(&hid, tokens.batch)?;
        let rows = ops::gather_rows(&self.head, label_tokens)?;
        ops::matmul_nt(&pooled, &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 16,
            max_seq_len: 8,
            target_modules: TargetModule::ALL.to_vec(),
        }
    }

    fn tokens(rng: &mut Rng, b: usize, t: usize, v: usize) -> TokenBatch {
        let rows: Vec<Vec<usize>> = (0..b).map(|_| (0..t).map(|_| rng.below(v)).collect()).collect();
        TokenBatch::new(&rows).unwrap()
    }

    #[test]
    fn build_is_deterministic_and_frozen() {
        let a = Backbone::<f64>::build(&cfg(), &mut Rng::new(3)).unwrap();
        let b = Backbone::<f64>::build(&cfg(), &mut Rng::new(3)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.is_frozen());
    }

    #[test]
    fn head_dim_and_divisibility() {
        let c = ModelConfig { d_model: 64, n_heads: 4, ..ModelConfig::default() };
        assert_eq!(c.head_dim(), 16);
        let bad = ModelConfig { d_model: 63, n_heads: 4, ..ModelConfig::default() };
        assert!(matches!(Backbone::<f64>::build(&bad, &mut Rng::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shape() {
        let mut rng = Rng::new(1);
        let bb = Backbone::<f64>::build(&cfg(), &mut rng).unwrap();
        let y = bb.forward(&tokens(&mut rng, 2, 8, 16), None).unwrap();
        assert_eq!(y.shape(), &[2, 8, 16]);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let bb = Backbone::<f64>::build(&cfg(), &mut Rng::new(1)).unwrap();
        let t = TokenBatch::new(&[vec![0, 16]]).unwrap();
        assert!(matches!(bb.forward(&t, None), Err(Error::Input(_))));
        let long = TokenBatch::new(&[vec![0; 9]]).unwrap();
        assert!(matches!(bb.forward(&long, None), Err(Error::Input(_))));
    }

    #[test]
    fn zero_b_adapters_are_transparent() {
        let mut rng = Rng::new(5);
        let bb = Backbone::<f64>::build(&cfg(), &mut rng).unwrap();
        let acfg = AdapterConfig { rank: 2, n_experts: 3, target_modules: TargetModule::ALL.to_vec(), ..AdapterConfig::default() };
        let ad = AdapterState::init(&cfg(), &acfg, &mut rng).unwrap();
        let t = tokens(&mut rng, 3, 5, 16);
        assert!(bb.forward(&t, None).unwrap().bit_eq(&bb.forward(&t, Some(&ad)).unwrap()));
        let labels = [1, 2, 3];
        assert!(bb.classify(&t, None, &labels).unwrap().bit_eq(&bb.classify(&t, Some(&ad), &labels).unwrap()));
    }

    #[test]
    fn causal_prefix_independent_of_future_tokens() {
        let mut rng = Rng::new(2);
        let bb = Backbone::<f64>::build(&cfg(), &mut rng).unwrap();
        let a = TokenBatch::new(&[vec![1, 2, 3, 4]]).unwrap();
        let b = TokenBatch::new(&[vec![1, 2, 3, 9]]).unwrap();
        let ya = bb.forward(&a, None).unwrap().to_vec();
        let yb = bb.forward(&b, None).unwrap().to_vec();
        assert_eq!(&ya[..3 * 16], &yb[..3 * 16]);
        assert_ne!(&ya[3 * 16..], &yb[3 * 16..]);
    }
}
