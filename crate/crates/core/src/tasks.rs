//! Seeded synthetic tasks: a pair of classification domains whose label
//! rules partly contradict each other, and a next-token task made of
//! sub-patterns with geometrically decaying frequencies.
//!
//! Splits are assigned by hashing the input content, so a sequence belongs to
//! exactly one of train/val/test no matter which stream produced it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::error::{Error, Result};
use crate::model::{Backbone, TokenBatch};
use crate::numerics::ops;
use crate::numerics::rng::{derive_seed, splitmix64};
use crate::numerics::{no_grad, Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SeqClassification,
    CharLm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Rule {
    /// `label = [count(token) ≥ threshold] XOR [content[0] ∈ flip]`.
    Count {
        token: usize,
        threshold: usize,
        flip: Vec<usize>,
        n_domains: usize,
    },
    /// Random prefix followed by one of several fixed patterns.
    Patterns {
        prefix_len: usize,
        patterns: Vec<Vec<usize>>,
        weights: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub domain_id: usize,
    pub alphabet: usize,
    /// Content tokens per example (excluding the domain marker).
    pub seq_len: usize,
    pub rule_seed: u64,
    /// Percent of the hash space given to train, val and test.
    pub split_percent: [u32; 3],
    pub split_salt: u64,
    pub rule: Rule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairParams {
    pub alphabet: usize,
    pub seq_len: usize,
    /// Target fraction of inputs on which the two domains disagree.
    pub conflict: f64,
    pub split_percent: [u32; 3],
}

impl Default for PairParams {
    fn default() -> Self {
        PairParams {
            alphabet: 4,
            seq_len: 6,
            conflict: 0.625,
            split_percent: [80, 10, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongTailParams {
    pub alphabet: usize,
    pub n_patterns: usize,
    pub pattern_len: usize,
    pub prefix_len: usize,
    /// Frequency of pattern `j+1` relative to pattern `j`.
    pub ratio: f64,
    pub split_percent: [u32; 3],
}

impl Default for LongTailParams {
    fn default() -> Self {
        LongTailParams {
            alphabet: 16,
            n_patterns: 6,
            pattern_len: 6,
            prefix_len: 2,
            ratio: 0.6,
            split_percent: [80, 10, 10],
        }
    }
}

fn check_split(p: [u32; 3]) -> Result<()> {
    if p.iter().sum::<u32>() != 100 || p.iter().any(|&x| x == 0) {
        return Err(Error::Config(format!("split_percent {p:?} must be positive and sum to 100")));
    }
    Ok(())
}

/// Threshold whose upper tail under Binomial(n, 1/alphabet) is closest to one half.
fn balanced_threshold(n: usize, alphabet: usize) -> usize {
    let p = 1.0 / alphabet as f64;
    let pmf: Vec<f64> = (0..=n)
        .map(|k| {
            let mut c = 1.0;
            for i in 0..k {
                c = c * (n - i) as f64 / (i + 1) as f64;
            }
            c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
        })
        .collect();
    (1..=n)
        .min_by(|&a, &b| {
            let ta: f64 = pmf[a..].iter().sum();
            let tb: f64 = pmf[b..].iter().sum();
            (ta - 0.5).abs().total_cmp(&(tb - 0.5).abs()).then(a.cmp(&b))
        })
        .unwrap_or(1)
}

pub fn gen_domain_pair(seed: u64) -> Result<(TaskSpec, TaskSpec)> {
    gen_domain_pair_with(seed, &PairParams::default())
}

/// Two classification domains over one alphabet. Both threshold the count
/// of the same token; the second flips its label whenever the first content
/// token falls in a seeded subset of the alphabet.
pub fn gen_domain_pair_with(seed: u64, params: &PairParams) -> Result<(TaskSpec, TaskSpec)> {
    if params.alphabet < 2 || params.seq_len < 2 {
        return Err(Error::Config("domain pair needs alphabet ≥ 2 and seq_len ≥ 2".into()));
    }
    if !(0.0..=1.0).contains(&params.conflict) {
        return Err(Error::Config(format!("conflict {} outside [0, 1]", params.conflict)));
    }
    check_split(params.split_percent)?;
    let rule_seed = derive_seed(seed, "tasks.pair.rule");
    let mut rng = Rng::new(rule_seed);
    let token = rng.below(params.alphabet);
    let threshold = balanced_threshold(params.seq_len, params.alphabet);
    let n_flip = ((params.conflict * params.alphabet as f64).round() as usize).min(params.alphabet);
    let mut order: Vec<usize> = (0..params.alphabet).collect();
    rng.shuffle(&mut order);
    let mut flip = order[..n_flip].to_vec();
    flip.sort_unstable();
    let split_salt = derive_seed(seed, "tasks.pair.split");
    let make = |domain_id: usize, flip: Vec<usize>| TaskSpec {
        name: format!("domain_{}", ["a", "b"][domain_id]),
        kind: TaskKind::SeqClassification,
        domain_id,
        alphabet: params.alphabet,
        seq_len: params.seq_len,
        rule_seed,
        split_percent: params.split_percent,
        split_salt,
        rule: Rule::Count { token, threshold, flip, n_domains: 2 },
    };
    Ok((make(0, Vec::new()), make(1, flip)))
}

pub fn gen_longtail_lm(seed: u64) -> Result<TaskSpec> {
    gen_longtail_lm_with(seed, &LongTailParams::default())
}

/// Next-token task: `prefix_len` uniform tokens then pattern `j` with
/// probability proportional to `ratio^j`. Patterns start with distinct tokens.
pub fn gen_longtail_lm_with(seed: u64, params: &LongTailParams) -> Result<TaskSpec> {
    if params.n_patterns == 0 || params.n_patterns > params.alphabet {
        return Err(Error::Config(format!(
            "n_patterns must be in 1..={} (distinct first tokens)",
            params.alphabet
        )));
    }
    if params.pattern_len < 2 || params.prefix_len == 0 {
        return Err(Error::Config("pattern_len ≥ 2 and prefix_len ≥ 1 required".into()));
    }
    if !(params.ratio > 0.0 && params.ratio <= 1.0) {
        return Err(Error::Config(format!("ratio {} outside (0, 1]", params.ratio)));
    }
    check_split(params.split_percent)?;
    let rule_seed = derive_seed(seed, "tasks.longtail.rule");
    let mut rng = Rng::new(rule_seed);
    let mut firsts: Vec<usize> = (0..params.alphabet).collect();
    rng.shuffle(&mut firsts);
    let patterns: Vec<Vec<usize>> = firsts[..params.n_patterns]
        .iter()
        .map(|&f| {
            let mut p = vec![f];
            p.extend((1..params.pattern_len).map(|_| rng.below(params.alphabet)));
            p
        })
        .collect();
    let weights: Vec<f64> = (0..params.n_patterns).map(|j| params.ratio.powi(j as i32)).collect();
    let total: f64 = weights.iter().sum();
    Ok(TaskSpec {
        name: "longtail".into(),
        kind: TaskKind::CharLm,
        domain_id: 0,
        alphabet: params.alphabet,
        seq_len: params.prefix_len + params.pattern_len,
        rule_seed,
        split_percent: params.split_percent,
        split_salt: derive_seed(seed, "tasks.longtail.split"),
        rule: Rule::Patterns {
            prefix_len: params.prefix_len,
            patterns,
            weights: weights.iter().map(|w| w / total).collect(),
        },
    })
}

/// One generated example. `label` is the class for classification and the
/// pattern index for the next-token task.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub domain: usize,
}

impl TaskSpec {
    pub fn vocab_needed(&self) -> usize {
        match &self.rule {
            Rule::Count { n_domains, .. } => self.alphabet + 2 + n_domains,
            Rule::Patterns { .. } => self.alphabet,
        }
    }

    /// Model input length.
    pub fn input_len(&self) -> usize {
        match self.kind {
            TaskKind::SeqClassification => self.seq_len + 1,
            TaskKind::CharLm => self.seq_len,
        }
    }

    /// Vocabulary ids whose output-head rows score the classes.
    pub fn label_tokens(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::SeqClassification => vec![self.alphabet, self.alphabet + 1],
            TaskKind::CharLm => Vec::new(),
        }
    }

    pub fn marker_token(&self) -> Option<usize> {
        match self.kind {
            TaskKind::SeqClassification => Some(self.alphabet + 2 + self.domain_id),
            TaskKind::CharLm => None,
        }
    }

    /// Part of the content that decides the split.
    fn split_key<'a>(&self, content: &'a [usize]) -> &'a [usize] {
        match &self.rule {
            Rule::Count { .. } => content,
            Rule::Patterns { prefix_len, .. } => &content[..*prefix_len],
        }
    }

    pub fn split_of(&self, content: &[usize]) -> Split {
        let mut h = self.split_salt;
        for &t in self.split_key(content) {
            h = splitmix64(h ^ (t as u64 + 1));
        }
        let bucket = (h % 100) as u32;
        let [tr, va, _] = self.split_percent;
        if bucket < tr {
            Split::Train
        } else if bucket < tr + va {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// The deterministic labelling rule on raw content tokens.
    pub fn label(&self, content: &[usize]) -> usize {
        match &self.rule {
            Rule::Count { token, threshold, flip, .. } => {
                let base = content.iter().filter(|&&t| t == *token).count() >= *threshold;
                let flipped = flip.contains(&content[0]);
                (base ^ flipped) as usize
            }
            Rule::Patterns { prefix_len, patterns, .. } => patterns
                .iter()
                .position(|p| content[*prefix_len..] == p[..])
                .unwrap_or(usize::MAX),
        }
    }

    fn draw_content(&self, rng: &mut Rng) -> Vec<usize> {
        match &self.rule {
            Rule::Count { .. } => (0..self.seq_len).map(|_| rng.below(self.alphabet)).collect(),
            Rule::Patterns { prefix_len, patterns, weights } => {
                let mut c: Vec<usize> = (0..*prefix_len).map(|_| rng.below(self.alphabet)).collect();
                c.extend_from_slice(&patterns[rng.weighted_index(weights)]);
                c
            }
        }
    }

    /// Draws one example from `split` by rejection on the content hash.
    pub fn sample(&self, split: Split, rng: &mut Rng) -> Example {
        loop {
            let content = self.draw_content(rng);
            if self.split_of(&content) != split {
                continue;
            }
            let label = self.label(&content);
            let tokens = match self.marker_token() {
                Some(m) => std::iter::once(m).chain(content).collect(),
                None => content,
            };
            return Example { tokens, label, domain: self.domain_id };
        }
    }

    /// Strips the domain marker.
    pub fn content<'a>(&self, tokens: &'a [usize]) -> &'a [usize] {
        match self.kind {
            TaskKind::SeqClassification => &tokens[1..],
            TaskKind::CharLm => tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<(TaskSpec, f64)>,
}

impl MixtureSpec {
    /// Validates layout compatibility and normalises the weights.
    pub fn new(components: Vec<(TaskSpec, f64)>) -> Result<Self> {
        let Some((first, _)) = components.first() else {
            return Err(Error::Config("mixture has no components".into()));
        };
        if components.iter().any(|(_, w)| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("mixture weights must be positive and finite".into()));
        }
        for (t, _) in &components {
            if t.kind != first.kind || t.alphabet != first.alphabet || t.seq_len != first.seq_len {
                return Err(Error::Config("mixture components must share kind, alphabet and length".into()));
            }
        }
        let total: f64 = components.iter().map(|(_, w)| w).sum();
        Ok(MixtureSpec {
            components: components.into_iter().map(|(t, w)| (t, w / total)).collect(),
        })
    }

    pub fn single(task: TaskSpec) -> Self {
        MixtureSpec { components: vec![(task, 1.0)] }
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.components.iter().map(|(t, _)| t)
    }

    pub fn kind(&self) -> TaskKind {
        self.components[0].0.kind
    }

    pub fn vocab_needed(&self) -> usize {
        self.tasks().map(|t| t.vocab_needed()).max().unwrap_or(0)
    }

    pub fn input_len(&self) -> usize {
        self.components[0].0.input_len()
    }

    pub fn label_tokens(&self) -> Vec<usize> {
        self.components[0].0.label_tokens()
    }

    pub fn domains(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.tasks().map(|t| t.domain_id).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|(_, w)| *w).collect()
    }

    pub fn sample(&self, split: Split, rng: &mut Rng) -> Example {
        let i = if self.components.len() == 1 { 0 } else { rng.weighted_index(&self.weights()) };
        self.components[i].0.sample(split, rng)
    }

    /// A fixed evaluation set of `n_per_domain` examples from each component.
    pub fn fixed_set(&self, split: Split, n_per_domain: usize, seed: u64) -> Vec<Example> {
        let mut out = Vec::with_capacity(n_per_domain * self.components.len());
        for (t, _) in &self.components {
            let mut rng = Rng::child(seed, &format!("tasks.fixed.{}.{}", split.name(), t.domain_id));
            out.extend((0..n_per_domain).map(|_| t.sample(split, &mut rng)));
        }
        out
    }
}

/// Supervision attached to a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes {
        labels: Vec<usize>,
        label_tokens: Vec<usize>,
    },
    /// `(flat position, next token)` pairs: every position for the loss,
    /// pattern continuations for scoring.
    NextToken {
        loss: Vec<(usize, usize)>,
        scored: Vec<(usize, usize)>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub targets: Targets,
    /// Domain of each row.
    pub domains: Vec<usize>,
}

/// Per-domain tallies from one evaluation pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalTally {
    /// `(domain, correct, total)`.
    pub per_domain: Vec<(usize, usize, usize)>,
    pub nll_sum: f64,
    pub nll_count: usize,
}

impl EvalTally {
    fn bump(&mut self, domain: usize, correct: bool) {
        match self.per_domain.iter_mut().find(|(d, _, _)| *d == domain) {
            Some(e) => {
                e.1 += correct as usize;
                e.2 += 1;
            }
            None => {
                self.per_domain.push((domain, correct as usize, 1));
                self.per_domain.sort_unstable();
            }
        }
    }

    pub fn merge(&mut self, other: &EvalTally) {
        for &(d, c, n) in &other.per_domain {
            match self.per_domain.iter_mut().find(|(x, _, _)| *x == d) {
                Some(e) => {
                    e.1 += c;
                    e.2 += n;
                }
                None => {
                    self.per_domain.push((d, c, n));
                    self.per_domain.sort_unstable();
                }
            }
        }
        self.nll_sum += other.nll_sum;
        self.nll_count += other.nll_count;
    }

    pub fn accuracy(&self, domain: usize) -> Option<f64> {
        self.per_domain
            .iter()
            .find(|(d, _, _)| *d == domain)
            .map(|&(_, c, n)| c as f64 / n as f64)
    }

    /// Mean of the per-domain accuracies.
    pub fn mean_accuracy(&self) -> f64 {
        if self.per_domain.is_empty() {
            return 0.0;
        }
        self.per_domain.iter().map(|&(_, c, n)| c as f64 / n as f64).sum::<f64>() / self.per_domain.len() as f64
    }

    pub fn mean_nll(&self) -> f64 {
        if self.nll_count == 0 {
            return 0.0;
        }
        self.nll_sum / self.nll_count as f64
    }
}

fn first_max<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl Batch {
    pub fn from_examples(examples: &[Example], mixture: &MixtureSpec) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let rows: Vec<Vec<usize>> = examples.iter().map(|e| e.tokens.clone()).collect();
        let tokens = TokenBatch::new(&rows)?;
        let domains = examples.iter().map(|e| e.domain).collect();
        let targets = match mixture.kind() {
            TaskKind::SeqClassification => Targets::Classes {
                labels: examples.iter().map(|e| e.label).collect(),
                label_tokens: mixture.label_tokens(),
            },
            TaskKind::CharLm => {
                let t = tokens.seq;
                let prefix = match &mixture.components[0].0.rule {
                    Rule::Patterns { prefix_len, .. } => *prefix_len,
                    Rule::Count { .. } => 0,
                };
                let mut loss = Vec::new();
                let mut scored = Vec::new();
                for (b, row) in rows.iter().enumerate() {
                    for p in 0..t - 1 {
                        loss.push((b * t + p, row[p + 1]));
                        if p >= prefix {
                            scored.push((b * t + p, row[p + 1]));
                        }
                    }
                }
                Targets::NextToken { loss, scored }
            }
        };
        Ok(Batch { tokens, targets, domains })
    }

    pub fn len(&self) -> usize {
        self.tokens.batch
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.batch == 0
    }

    /// Mean cross-entropy training loss.
    pub fn loss<T: Scalar>(&self, model: &Backbone<T>, adapters: Option<&AdapterState<T>>) -> Result<Tensor<T>> {
        match &self.targets {
            Targets::Classes { labels, label_tokens } => {
                let logits = model.classify(&self.tokens, adapters, label_tokens)?;
                ops::cross_entropy(&logits, labels)
            }
            Targets::NextToken { loss, .. } => {
                let logits = model.lm_logits(&self.tokens, adapters)?;
                let (pos, tgt): (Vec<usize>, Vec<usize>) = loss.iter().copied().unzip();
                ops::cross_entropy(&ops::gather_rows(&logits, &pos)?, &tgt)
            }
        }
    }

    /// Greedy accuracy per domain and NLL on the scored positions, without recording.
    pub fn evaluate<T: Scalar>(&self, model: &Backbone<T>, adapters: Option<&AdapterState<T>>) -> Result<EvalTally> {
        no_grad(|| {
            let mut tally = EvalTally::default();
            match &self.targets {
                Targets::Classes { labels, label_tokens } => {
                    let logits = model.classify(&self.tokens, adapters, label_tokens)?;
                    let c = label_tokens.len();
                    let nll = ops::cross_entropy(&logits, labels)?.item().as_f64();
                    let data = logits.data();
                    for (i, &y) in labels.iter().enumerate() {
                        tally.bump(self.domains[i], first_max(&data[i * c..(i + 1) * c]) == y);
                    }
                    tally.nll_sum = nll * labels.len() as f64;
                    tally.nll_count = labels.len();
                }
                Targets::NextToken { scored, .. } => {
                    let logits = model.lm_logits(&self.tokens, adapters)?;
                    let (pos, tgt): (Vec<usize>, Vec<usize>) = scored.iter().copied().unzip();
                    let rows = ops::gather_rows(&logits, &pos)?;
                    let nll = ops::cross_entropy(&rows, &tgt)?.item().as_f64();
                    let v = rows.shape()[1];
                    let data = rows.data();
                    let seq = self.tokens.seq;
                    for (i, &(p, y)) in scored.iter().enumerate() {
                        tally.bump(self.domains[p / seq], first_max(&data[i * v..(i + 1) * v]) == y);
                    }
                    tally.nll_sum = nll * tgt.len() as f64;
                    tally.nll_count = tgt.len();
                }
            }
            Ok(tally)
        })
    }
}

/// Infinite deterministic batch stream over one split.
pub struct Batches {
    mixture: MixtureSpec,
    split: Split,
    batch_size: usize,
    rng: Rng,
}

pub fn batches(mixture: &MixtureSpec, split: Split, batch_size: usize, rng: Rng) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    Ok(Batches { mixture: mixture.clone(), split, batch_size, rng })
}

impl Batches {
    pub fn next_examples(&mut self) -> Vec<Example> {
        (0..self.batch_size).map(|_| self.mixture.sample(self.split, &mut self.rng)).collect()
    }
}

impl Iterator for Batches {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let ex = self.next_examples();
        Some(Batch::from_examples(&ex, &self.mixture).expect("generated examples form a valid batch"))
    }
}

/// Writes examples as `tokens<TAB>label<TAB>domain`, tokens space-separated.
pub fn export_examples(examples: &[Example], out: &mut impl Write) -> Result<()> {
    for e in examples {
        let toks: Vec<String> = e.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(out, "{}\t{}\t{}", toks.join(" "), e.label, e.domain)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn all_contents(alphabet: usize, len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..alphabet).map(move |t| {
                        let mut q = p.clone();
                        q.push(t);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn conflict_fraction_by_enumeration() {
        for seed in 0..5 {
            let (a, b) = gen_domain_pair(seed).unwrap();
            let all = all_contents(4, 6);
            assert_eq!(all.len(), 4096);
            let disagree = all.iter().filter(|c| a.label(c) != b.label(c)).count();
            let frac = disagree as f64 / all.len() as f64;
            assert!((0.5..=0.8).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn domains_share_the_count_feature() {
        let (a, b) = gen_domain_pair(9).unwrap();
        for c in all_contents(4, 6) {
            let Rule::Count { flip, .. } = &b.rule else { panic!() };
            if !flip.contains(&c[0]) {
                assert_eq!(a.label(&c), b.label(&c));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let (a1, _) = gen_domain_pair(4).unwrap();
        let (a2, _) = gen_domain_pair(4).unwrap();
        assert_eq!(a1, a2);
        let m = MixtureSpec::single(a1);
        let x: Vec<Example> = (0..50).map({
            let mut r = Rng::new(1);
            move |_| m.sample(Split::Train, &mut r)
        }).collect();
        let m2 = MixtureSpec::single(a2);
        let mut r = Rng::new(1);
        let y: Vec<Example> = (0..50).map(|_| m2.sample(Split::Train, &mut r)).collect();
        assert_eq!(x, y);
    }

    #[test]
    fn rule_is_bayes_optimal_on_own_domain() {
        let (a, b) = gen_domain_pair(2).unwrap();
        let mut rng = Rng::new(0);
        for t in [&a, &b] {
            for _ in 0..500 {
                let e = t.sample(Split::Test, &mut rng);
                assert_eq!(t.label(t.content(&e.tokens)), e.label);
            }
        }
    }

    #[test]
    fn labels_are_roughly_balanced() {
        let (a, _) = gen_domain_pair(1).unwrap();
        let all = all_contents(4, 6);
        let pos = all.iter().filter(|c| a.label(c) == 1).count() as f64 / all.len() as f64;
        assert!((0.4..=0.6).contains(&pos), "{pos}");
    }

    #[test]
    fn longtail_vocab_and_distinct_heads() {
        let t = gen_longtail_lm(3).unwrap();
        let Rule::Patterns { patterns, .. } = &t.rule else { panic!() };
        let heads: HashSet<usize> = patterns.iter().map(|p| p[0]).collect();
        assert_eq!(heads.len(), patterns.len());
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let e = t.sample(Split::Train, &mut rng);
            assert!(e.tokens.iter().all(|&x| x < t.vocab_needed()));
            assert!(e.label < patterns.len());
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let t = gen_longtail_lm(0).unwrap();
        let mut rng = Rng::new(2);
        let train: HashSet<Vec<usize>> = (0..3000).map(|_| t.sample(Split::Train, &mut rng).tokens).collect();
        let test: HashSet<Vec<usize>> = (0..500).map(|_| t.sample(Split::Test, &mut rng).tokens).collect();
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn batch_shape_and_targets() {
        let (a, b) = gen_domain_pair(0).unwrap();
        let m = MixtureSpec::new(vec![(a, 1.0), (b, 1.0)]).unwrap();
        let batch = batches(&m, Split::Train, 7, Rng::new(0)).unwrap().next().unwrap();
        assert_eq!((batch.tokens.batch, batch.tokens.seq), (7, 7));
        let lt = gen_longtail_lm(0).unwrap();
        let lm = MixtureSpec::single(lt.clone());
        let batch = batches(&lm, Split::Val, 3, Rng::new(0)).unwrap().next().unwrap();
        assert_eq!((batch.tokens.batch, batch.tokens.seq), (3, lt.seq_len));
        let Targets::NextToken { loss, scored } = &batch.targets else { panic!() };
        assert_eq!(loss.len(), 3 * (lt.seq_len - 1));
        assert_eq!(scored.len(), 3 * (lt.seq_len - 1 - 2));
    }

    #[test]
    fn mixture_rejects_bad_weights() {
        let (a, b) = gen_domain_pair(0).unwrap();
        assert!(MixtureSpec::new(vec![(a, 1.0), (b, 0.0)]).is_err());
        assert!(MixtureSpec::new(vec![]).is_err());
    }

    #[test]
    fn export_is_tab_separated() {
        let ex = vec![Example { tokens: vec![1, 2, 3], label: 1, domain: 0 }];
        let mut buf = Vec::new();
        export_examples(&ex, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1 2 3\t1\t0\n");
    }
}
