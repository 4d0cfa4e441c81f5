//! Typed run configuration. Every section rejects unknown keys and fills
//! missing ones with defaults, so a serialized config is a complete record
//! of the run.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::error::{Error, Result};
use crate::harness::optim::OptimizerKind;
use crate::model::ModelConfig;
use crate::reducer::ReducerConfig;
use crate::tasks::{gen_domain_pair_with, gen_longtail_lm_with, LongTailParams, MixtureSpec, PairParams, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskChoice {
    #[default]
    DomainPair,
    Longtail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainSelect {
    #[default]
    Mixture,
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskChoice,
    /// Seed of the task rules and split hashing.
    pub seed: u64,
    /// Which domains of the pair to train on.
    pub domains: DomainSelect,
    pub weights: Vec<f64>,
    pub pair: PairParams,
    pub longtail: LongTailParams,
    /// Test examples per domain used for evaluation.
    pub eval_per_domain: usize,
    /// Validation examples per probe.
    pub val_batch: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskChoice::DomainPair,
            seed: 0,
            domains: DomainSelect::Mixture,
            weights: vec![0.5, 0.5],
            pair: PairParams::default(),
            longtail: LongTailParams::default(),
            eval_per_domain: 256,
            val_batch: 64,
        }
    }
}

/// Generated tasks of one run.
#[derive(Clone, Debug)]
pub struct TaskSet {
    /// What the run trains on.
    pub train: MixtureSpec,
    /// Every domain the run is evaluated on.
    pub eval: MixtureSpec,
    pub all: Vec<TaskSpec>,
}

impl TaskConfig {
    pub fn pair(&self) -> Result<(TaskSpec, TaskSpec)> {
        gen_domain_pair_with(self.seed, &self.pair)
    }

    pub fn build(&self) -> Result<TaskSet> {
        match self.kind {
            TaskChoice::DomainPair => {
                let (a, b) = self.pair()?;
                if self.weights.len() != 2 {
                    return Err(Error::Config("task.weights needs one weight per domain (2)".into()));
                }
                let all = vec![a.clone(), b.clone()];
                let train = match self.domains {
                    DomainSelect::Mixture => MixtureSpec::new(vec![(a, self.weights[0]), (b, self.weights[1])])?,
                    DomainSelect::A => MixtureSpec::single(a),
                    DomainSelect::B => MixtureSpec::single(b),
                };
                Ok(TaskSet { eval: train.clone(), train, all })
            }
            TaskChoice::Longtail => {
                let t = gen_longtail_lm_with(self.seed, &self.longtail)?;
                let m = MixtureSpec::single(t.clone());
                Ok(TaskSet { train: m.clone(), eval: m, all: vec![t] })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from `lr` at step 1 to `lr / steps` at the last step.
    Linear,
}

impl LrSchedule {
    pub fn at(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Linear => lr * (steps + 1 - step) as f64 / steps as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Steps between evaluations; 0 evaluates only at the start and end.
    pub eval_every: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Language-model warm-up of the backbone before it is frozen.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            lr_schedule: LrSchedule::Constant,
            steps: 500,
            batch_size: 32,
            optimizer: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            eval_every: 100,
            seed: 0,
            precision: Precision::F64,
            pretrain_steps: 0,
            pretrain_lr: 3e-3,
            pretrain_batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    /// Adds a wall-clock column to the metrics CSV (which makes it run-dependent).
    pub timing: bool,
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "runs".into(), timing: false, checkpoints: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Independent runs per configuration.
    pub seeds: usize,
    pub ratios: Vec<f64>,
    /// Random drop subsets averaged per seed and ratio.
    pub random_draws: usize,
    pub head_counts: Vec<usize>,
    /// Expert count of the routed adapter in the interference study.
    pub interference_heads: usize,
    /// Pinned bound on the accuracy lost at drop ratio 0.5, if checked.
    pub max_drop_at_half: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: 5,
            ratios: vec![0.0, 0.25, 0.5, 0.75],
            random_draws: 5,
            head_counts: vec![1, 2, 3, 4],
            interference_heads: 4,
            max_drop_at_half: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub reducer: ReducerConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adapter.validate(&self.model)?;
        if self.reducer.enabled {
            self.reducer.validate(self.model.n_layers)?;
        }
        let tasks = self.task.build()?;
        if tasks.eval.vocab_needed() > self.model.vocab_size {
            return Err(Error::Config(format!(
                "task needs vocab_size ≥ {}, model.vocab_size is {}",
                tasks.eval.vocab_needed(),
                self.model.vocab_size
            )));
        }
        if tasks.eval.input_len() > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "task inputs have length {}, model.max_seq_len is {}",
                tasks.eval.input_len(),
                self.model.max_seq_len
            )));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if t.batch_size == 0 || self.task.eval_per_domain == 0 || self.task.val_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if let Some(c) = t.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("train.grad_clip must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if self.experiment.head_counts.iter().any(|&m| m == 0) || self.experiment.interference_heads == 0 {
            return Err(Error::Config("head counts must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let lt = RunConfig {
            task: TaskConfig { kind: TaskChoice::Longtail, ..TaskConfig::default() },
            ..RunConfig::default()
        };
        lt.validate().unwrap();
    }

    #[test]
    fn linear_schedule_ends_at_one_step_of_lr() {
        let s = LrSchedule::Linear;
        assert_eq!(s.at(0.1, 1, 10), 0.1);
        assert!((s.at(0.1, 10, 10) - 0.01).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.at(0.1, 10, 10), 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"stpes": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("stpes"));
    }

    #[test]
    fn small_vocab_is_rejected() {
        let mut c = RunConfig::default();
        c.model.vocab_size = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
