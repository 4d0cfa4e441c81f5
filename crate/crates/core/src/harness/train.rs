//! Training loop, evaluation, seed plan and backbone warm-up.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::error::{Error, Result};
use crate::harness::config::{RunConfig, TaskSet, TrainConfig};
use crate::harness::optim::Optimizer;
use crate::model::{Backbone, ModelConfig, TokenBatch};
use crate::numerics::{ops, Rng, Scalar};
use crate::reducer::{apply_freeze_mask, ImportanceState};
use crate::tasks::{batches, Batch, EvalTally, Example, MixtureSpec, Split};

/// Fans one master seed out to per-component generators. Tags in use:
/// `backbone`, `pretrain`, `adapters`, `reducer`, `data.train`, `data.val`
/// and `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPlan {
    pub master: u64,
}

impl SeedPlan {
    pub fn new(master: u64) -> Self {
        SeedPlan { master }
    }

    pub fn rng(&self, tag: &str) -> Rng {
        Rng::child(self.master, tag)
    }

    pub fn seed(&self, tag: &str) -> u64 {
        crate::numerics::derive_seed(self.master, tag)
    }

    /// Plan of the `i`-th independent run of an experiment.
    pub fn run(&self, i: usize) -> SeedPlan {
        SeedPlan::new(self.seed(&format!("run.{i}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// `(domain, accuracy)`.
    pub accuracy: Vec<(usize, f64)>,
    pub mean_accuracy: f64,
    pub nll: f64,
}

impl From<&EvalTally> for EvalSummary {
    fn from(t: &EvalTally) -> Self {
        EvalSummary {
            accuracy: t.per_domain.iter().map(|&(d, c, n)| (d, c as f64 / n as f64)).collect(),
            mean_accuracy: t.mean_accuracy(),
            nll: t.mean_nll(),
        }
    }
}

impl EvalSummary {
    pub fn domain(&self, d: usize) -> Option<f64> {
        self.accuracy.iter().find(|(x, _)| *x == d).map(|&(_, a)| a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub eval: Option<EvalSummary>,
    pub trainable: usize,
    pub active: Vec<usize>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub step: usize,
    pub layer: usize,
    pub score: f64,
    pub prob: f64,
    pub active: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub domains: Vec<usize>,
    pub records: Vec<MetricsRecord>,
    pub scores: Vec<ScoreRow>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.train_loss).collect()
    }

    pub fn final_eval(&self) -> Option<&EvalSummary> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

/// Per-step view handed to a training observer, after the update.
pub struct StepInfo<'a> {
    pub step: usize,
    pub loss: f64,
    pub active: &'a [usize],
}

pub fn evaluate<T: Scalar>(
    model: &Backbone<T>,
    adapters: Option<&AdapterState<T>>,
    mixture: &MixtureSpec,
    examples: &[Example],
) -> Result<EvalTally> {
    let mut tally = EvalTally::default();
    for chunk in examples.chunks(128) {
        let batch = Batch::from_examples(chunk, mixture)?;
        tally.merge(&batch.evaluate(model, adapters)?);
    }
    Ok(tally)
}

/// Everything one training run needs besides the model and adapters.
pub struct TrainInputs<'a> {
    pub data: &'a MixtureSpec,
    pub eval_data: &'a MixtureSpec,
    pub eval_set: &'a [Example],
    pub val_batch: usize,
    pub cfg: &'a TrainConfig,
    pub plan: SeedPlan,
}

pub fn train<T: Scalar>(
    model: &Backbone<T>,
    adapters: &mut AdapterState<T>,
    reducer: Option<&mut ImportanceState>,
    inputs: &TrainInputs<'_>,
) -> Result<TrainLog> {
    train_observed(model, adapters, reducer, inputs, &mut |_, _| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_observed<T: Scalar>(
    model: &Backbone<T>,
    adapters: &mut AdapterState<T>,
    mut reducer: Option<&mut ImportanceState>,
    inputs: &TrainInputs<'_>,
    observe: &mut dyn FnMut(&StepInfo<'_>, &AdapterState<T>),
) -> Result<TrainLog> {
    let cfg = inputs.cfg;
    let clock = Instant::now();
    let n_layers = adapters.n_layers();
    let all_layers: Vec<usize> = (0..n_layers).collect();
    let mut log = TrainLog { domains: inputs.eval_data.domains(), ..TrainLog::default() };
    let mut train_stream = batches(inputs.data, Split::Train, cfg.batch_size, inputs.plan.rng("data.train"))?;
    let mut val_stream = batches(inputs.data, Split::Val, inputs.val_batch, inputs.plan.rng("data.val"))?;
    let mut opt = Optimizer::new(
        cfg.optimizer,
        adapters.parameters(),
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
        cfg.weight_decay,
    );
    let eval_now = |adapters: &AdapterState<T>| -> Result<EvalSummary> {
        let t = evaluate(model, Some(adapters), inputs.eval_data, inputs.eval_set)?;
        Ok(EvalSummary::from(&t))
    };

    log.records.push(MetricsRecord {
        step: 0,
        train_loss: None,
        eval: Some(eval_now(adapters)?),
        trainable: adapters.count_trainable(),
        active: all_layers.clone(),
        wall_ms: clock.elapsed().as_secs_f64() * 1e3,
    });

    for step in 1..=cfg.steps {
        let active = match reducer.as_deref_mut() {
            Some(r) => {
                let a = r.sample_active_layers();
                apply_freeze_mask(adapters, &a);
                a
            }
            None => all_layers.clone(),
        };
        let batch = train_stream.next().expect("infinite stream");
        opt.zero_grad();
        let loss = batch.loss(model, Some(adapters))?;
        let lv = loss.item().as_f64();
        if !lv.is_finite() {
            let msg = format!("non-finite training loss {lv} at step {step}");
            log.records.push(MetricsRecord {
                step,
                train_loss: Some(lv),
                eval: None,
                trainable: adapters.count_trainable(),
                active,
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            });
            log.aborted = Some(msg);
            return Ok(log);
        }
        if loss.requires_grad() {
            loss.backward()?;
            opt.set_lr(cfg.lr_schedule.at(cfg.lr, step, cfg.steps));
            opt.clip_and_step(cfg.grad_clip);
        }
        let trainable = adapters.count_trainable();

        if let Some(r) = reducer.as_deref_mut() {
            if r.probe_due(step) {
                let vb = val_stream.next().expect("infinite stream");
                r.probe_and_update_scores(model, adapters, &vb)?;
                let p = r.sampling_distribution();
                for layer in 0..n_layers {
                    log.scores.push(ScoreRow {
                        step,
                        layer,
                        score: r.scores[layer],
                        prob: p[layer],
                        active: active.contains(&layer),
                    });
                }
            }
        }

        observe(&StepInfo { step, loss: lv, active: &active }, adapters);

        let eval_due = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let eval = if eval_due { Some(eval_now(adapters)?) } else { None };
        log.records.push(MetricsRecord {
            step,
            train_loss: Some(lv),
            eval,
            trainable,
            active,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// First-order Markov text with a few successors per token.
pub struct MarkovText {
    successors: Vec<Vec<usize>>,
    probs: Vec<Vec<f64>>,
    vocab: usize,
}

impl MarkovText {
    pub fn new(vocab: usize, fanout: usize, rng: &mut Rng) -> Self {
        let fanout = fanout.clamp(1, vocab);
        let mut successors = Vec::with_capacity(vocab);
        let mut probs = Vec::with_capacity(vocab);
        for _ in 0..vocab {
            let mut all: Vec<usize> = (0..vocab).collect();
            rng.shuffle(&mut all);
            successors.push(all[..fanout].to_vec());
            let w: Vec<f64> = (0..fanout).map(|_| 0.2 + rng.uniform()).collect();
            let s: f64 = w.iter().sum();
            probs.push(w.iter().map(|x| x / s).collect());
        }
        MarkovText { successors, probs, vocab }
    }

    pub fn sequence(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = vec![rng.below(self.vocab)];
        while out.len() < len {
            let prev = *out.last().expect("nonempty");
            out.push(self.successors[prev][rng.weighted_index(&self.probs[prev])]);
        }
        out
    }
}

/// Next-token warm-up of every backbone tensor on Markov text; the backbone
/// is frozen afterwards. Returns the loss per step.
pub fn pretrain_backbone<T: Scalar>(model: &Backbone<T>, steps: usize, lr: f64, batch: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let mcfg = model.config().clone();
    let text = MarkovText::new(mcfg.vocab_size, 3, rng);
    let params: Vec<_> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
    model.set_trainable(true);
    let mut opt = Optimizer::adamw(params, lr, 0.9, 0.999, 1e-8, 0.0);
    let mut losses = Vec::with_capacity(steps);
    let seq = mcfg.max_seq_len;
    let result = (|| {
        for _ in 0..steps {
            let rows: Vec<Vec<usize>> = (0..batch).map(|_| text.sequence(seq, rng)).collect();
            let tokens = TokenBatch::new(&rows)?;
            let logits = model.lm_logits(&tokens, None)?;
            let mut pos = Vec::new();
            let mut tgt = Vec::new();
            for (b, row) in rows.iter().enumerate() {
                for p in 0..seq - 1 {
                    pos.push(b * seq + p);
                    tgt.push(row[p + 1]);
                }
            }
            if pos.is_empty() {
                break;
            }
            opt.zero_grad();
            let loss = ops::cross_entropy(&ops::gather_rows(&logits, &pos)?, &tgt)?;
            let lv = loss.item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite warm-up loss {lv}")));
            }
            loss.backward()?;
            opt.clip_and_step(Some(1.0));
            losses.push(lv);
        }
        Ok(())
    })();
    opt.zero_grad();
    model.set_trainable(false);
    result.map(|_| losses)
}

/// Builds the backbone of a plan and applies the configured warm-up.
pub fn prepare_backbone<T: Scalar>(mcfg: &ModelConfig, tcfg: &TrainConfig, plan: &SeedPlan) -> Result<Backbone<T>> {
    let model = Backbone::build(mcfg, &mut plan.rng("backbone"))?;
    if tcfg.pretrain_steps > 0 {
        pretrain_backbone(&model, tcfg.pretrain_steps, tcfg.pretrain_lr, tcfg.pretrain_batch, &mut plan.rng("pretrain"))?;
    }
    Ok(model)
}

/// Result of [`run_with_backbone`].
pub struct RunOutput<T: Scalar> {
    pub adapters: AdapterState<T>,
    pub reducer: Option<ImportanceState>,
    pub log: TrainLog,
}

/// Builds adapters and reducer from `cfg` and trains them on `tasks.train`.
pub fn run_with_backbone<T: Scalar>(
    cfg: &RunConfig,
    model: &Backbone<T>,
    tasks: &TaskSet,
    plan: SeedPlan,
) -> Result<RunOutput<T>> {
    let eval_set = tasks.eval.fixed_set(Split::Test, cfg.task.eval_per_domain, cfg.task.seed);
    let mut adapters = AdapterState::init(&cfg.model, &cfg.adapter, &mut plan.rng("adapters"))?;
    adapters.set_suppress_scope(cfg.reducer.suppress_scope);
    let mut reducer = if cfg.reducer.enabled {
        Some(ImportanceState::new(&cfg.reducer, cfg.model.n_layers, plan.rng("reducer"))?)
    } else {
        None
    };
    let inputs = TrainInputs {
        data: &tasks.train,
        eval_data: &tasks.eval,
        eval_set: &eval_set,
        val_batch: cfg.task.val_batch,
        cfg: &cfg.train,
        plan,
    };
    let log = train(model, &mut adapters, reducer.as_mut(), &inputs)?;
    if cfg.reducer.enabled {
        for layer in 0..adapters.n_layers() {
            adapters.set_layer_trainable(layer, true);
        }
    }
    Ok(RunOutput { adapters, reducer, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::harness::config::{TaskChoice, TaskConfig};
    use crate::model::TargetModule;
    use crate::reducer::ReducerConfig;

    fn tiny() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                n_layers: 2,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                vocab_size: 8,
                max_seq_len: 8,
                target_modules: TargetModule::default_set(),
            },
            adapter: AdapterConfig { rank: 2, n_experts: 2, ..AdapterConfig::default() },
            task: TaskConfig { eval_per_domain: 16, val_batch: 8, ..TaskConfig::default() },
            train: TrainConfig { steps: 6, batch_size: 4, eval_every: 3, ..TrainConfig::default() },
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_steps_logs_only_initial_eval() {
        let mut cfg = tiny();
        cfg.train.steps = 0;
        let plan = SeedPlan::new(1);
        let model = prepare_backbone::<f64>(&cfg.model, &cfg.train, &plan).unwrap();
        let out = run_with_backbone(&cfg, &model, &cfg.task.build().unwrap(), plan).unwrap();
        assert_eq!(out.log.records.len(), 1);
        assert_eq!(out.log.records[0].step, 0);
        assert!(out.log.records[0].eval.is_some());
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny();
        let plan = SeedPlan::new(3);
        let model = prepare_backbone::<f64>(&cfg.model, &cfg.train, &plan).unwrap();
        let tasks = cfg.task.build().unwrap();
        let a = run_with_backbone(&cfg, &model, &tasks, plan).unwrap().log;
        let b = run_with_backbone(&cfg, &model, &tasks, plan).unwrap().log;
        assert_eq!(a.losses(), b.losses());
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.records.len(), 7);
    }

    #[test]
    fn reducer_with_all_layers_matches_plain_training() {
        let mut cfg = tiny();
        cfg.reducer.enabled = false;
        let plan = SeedPlan::new(5);
        let model = prepare_backbone::<f64>(&cfg.model, &cfg.train, &plan).unwrap();
        let tasks = cfg.task.build().unwrap();
        let plain = run_with_backbone(&cfg, &model, &tasks, plan).unwrap().log;
        cfg.reducer = ReducerConfig { enabled: true, k_active: Some(2), probe_interval: 0, ..ReducerConfig::default() };
        let full = run_with_backbone(&cfg, &model, &tasks, plan).unwrap().log;
        assert_eq!(plain.losses(), full.losses());
    }

    #[test]
    fn pretraining_lowers_loss_and_freezes() {
        let mcfg = tiny().model;
        let model = Backbone::<f64>::build(&mcfg, &mut Rng::new(0)).unwrap();
        let losses = pretrain_backbone(&model, 40, 1e-2, 8, &mut Rng::new(1)).unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[35..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(model.is_frozen());
    }

    #[test]
    fn longtail_training_runs() {
        let mut cfg = tiny();
        cfg.model.vocab_size = 16;
        cfg.task = TaskConfig { kind: TaskChoice::Longtail, eval_per_domain: 16, val_batch: 8, ..TaskConfig::default() };
        cfg.task.longtail.pattern_len = 5;
        cfg.task.longtail.prefix_len = 2;
        cfg.model.max_seq_len = 8;
        cfg.validate().unwrap();
        let plan = SeedPlan::new(2);
        let model = prepare_backbone::<f32>(&cfg.model, &cfg.train, &plan).unwrap();
        let out = run_with_backbone(&cfg, &model, &cfg.task.build().unwrap(), plan).unwrap();
        assert!(out.log.aborted.is_none());
        assert!(out.log.final_eval().unwrap().nll.is_finite());
    }
}
