//! The three experiment runners: layer-drop sweep, expert-count ablation and
//! the mixture interference study. Each is split into a per-run row producer
//! (so independent runs can be sharded across processes) and a summary that
//! turns merged rows into a result document with pass/fail checks.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::error::{Error, Result};
use crate::harness::config::{DomainSelect, RunConfig, TaskChoice};
use crate::harness::train::{evaluate, prepare_backbone, run_with_backbone, SeedPlan};
use crate::model::Backbone;
use crate::numerics::Scalar;
use crate::tasks::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    DropSweep,
    HeadAblation,
    Interference,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 3] = [ExperimentName::DropSweep, ExperimentName::HeadAblation, ExperimentName::Interference];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::DropSweep => "drop-sweep",
            ExperimentName::HeadAblation => "head-ablation",
            ExperimentName::Interference => "interference",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|e| e.as_str()).collect();
            Error::Usage(format!("unknown experiment '{s}'; valid names: {}", valid.join(", ")))
        })
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRow {
    pub run: usize,
    pub ratio: f64,
    /// `unpruned`, `importance` or `random`.
    pub strategy: String,
    pub draw: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRow {
    pub run: usize,
    pub heads: usize,
    pub domain: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceRow {
    pub run: usize,
    /// `single`, `mixture_lora` or `mixture_reora`.
    pub setting: String,
    pub domain: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rows", rename_all = "snake_case")]
pub enum Rows {
    Drop(Vec<DropRow>),
    Head(Vec<HeadRow>),
    Interference(Vec<InterferenceRow>),
}

impl Rows {
    pub fn empty(name: ExperimentName) -> Self {
        match name {
            ExperimentName::DropSweep => Rows::Drop(Vec::new()),
            ExperimentName::HeadAblation => Rows::Head(Vec::new()),
            ExperimentName::Interference => Rows::Interference(Vec::new()),
        }
    }

    /// Appends `other` and orders rows by run, keeping within-run order.
    pub fn merge(&mut self, other: Rows) -> Result<()> {
        match (self, other) {
            (Rows::Drop(a), Rows::Drop(b)) => {
                a.extend(b);
                a.sort_by_key(|r| r.run);
            }
            (Rows::Head(a), Rows::Head(b)) => {
                a.extend(b);
                a.sort_by_key(|r| r.run);
            }
            (Rows::Interference(a), Rows::Interference(b)) => {
                a.extend(b);
                a.sort_by_key(|r| r.run);
            }
            _ => return Err(Error::Format("cannot merge rows of different experiments".into())),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub relation: String,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, relation: &str, bound: f64) -> Self {
        let pass = match relation {
            ">=" => value >= bound,
            ">" => value > bound,
            "<=" => value <= bound,
            "==" => value == bound,
            _ => false,
        };
        Check { name: name.into(), value, relation: relation.into(), bound, pass }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: ExperimentName,
    pub config: RunConfig,
    pub runs: usize,
    pub data: Rows,
    pub summary: serde_json::Value,
    pub checks: Vec<Check>,
    pub pass: bool,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// One-sided 5% critical value of Student's t with `df` degrees of freedom.
pub fn t_critical_05(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        6.314, 2.920, 2.353, 2.132, 2.015, 1.943, 1.895, 1.860, 1.833, 1.812, 1.796, 1.782, 1.771, 1.761, 1.753,
        1.746, 1.740, 1.734, 1.729, 1.725, 1.721, 1.717, 1.714, 1.711, 1.708, 1.706, 1.703, 1.701, 1.699, 1.697,
    ];
    match df {
        0 => f64::INFINITY,
        1..=30 => TABLE[df - 1],
        31..=60 => 1.684,
        61..=120 => 1.671,
        _ => 1.645,
    }
}

/// Paired t statistic of `b − a`.
pub fn paired_t(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = d.len() as f64;
    let md = mean(&d);
    let var = d.iter().map(|x| (x - md).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if md > 0.0 { f64::INFINITY } else if md < 0.0 { f64::NEG_INFINITY } else { 0.0 };
    }
    md / (var / n).sqrt()
}

/// Produces the rows of runs `runs` (indices into the configured seeds).
pub fn experiment_rows<T: Scalar>(name: ExperimentName, cfg: &RunConfig, runs: &[usize]) -> Result<Rows> {
    cfg.validate()?;
    let plan = SeedPlan::new(cfg.train.seed);
    let model = prepare_backbone::<T>(&cfg.model, &cfg.train, &plan)?;
    let mut rows = Rows::empty(name);
    for &run in runs {
        let r = match name {
            ExperimentName::DropSweep => Rows::Drop(drop_sweep_run(cfg, &model, &plan, run)?),
            ExperimentName::HeadAblation => Rows::Head(head_ablation_run(cfg, &model, &plan, run)?),
            ExperimentName::Interference => Rows::Interference(interference_run(cfg, &model, &plan, run)?),
        };
        rows.merge(r)?;
    }
    Ok(rows)
}

/// Runs every configured seed in-process and summarises.
pub fn run_experiment<T: Scalar>(name: ExperimentName, cfg: &RunConfig) -> Result<ExperimentResult> {
    let runs: Vec<usize> = (0..cfg.experiment.seeds).collect();
    let rows = experiment_rows::<T>(name, cfg, &runs)?;
    summarize(name, cfg, rows)
}

pub fn drop_sweep_run<T: Scalar>(cfg: &RunConfig, model: &Backbone<T>, plan: &SeedPlan, run: usize) -> Result<Vec<DropRow>> {
    if let Some(r) = cfg.experiment.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Input(format!("drop ratio {r} outside [0, 1)")));
    }
    if !cfg.reducer.enabled {
        return Err(Error::Config("drop-sweep ranks layers by reducer scores; enable [reducer]".into()));
    }
    let tasks = cfg.task.build()?;
    let rplan = plan.run(run);
    let out = run_with_backbone(cfg, model, &tasks, rplan)?;
    let scores = out.reducer.as_ref().expect("reducer enabled").scores.clone();
    let eval_set = tasks.eval.fixed_set(Split::Test, cfg.task.eval_per_domain, cfg.task.seed);
    let acc_of = |ad: &crate::adapter::AdapterState<T>| -> Result<f64> {
        Ok(evaluate(model, Some(ad), &tasks.eval, &eval_set)?.mean_accuracy())
    };
    let n = cfg.model.n_layers;
    let mut by_score: Vec<usize> = (0..n).collect();
    by_score.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut rng = rplan.rng("drop.random");
    let mut rows = vec![DropRow { run, ratio: 0.0, strategy: "unpruned".into(), draw: 0, accuracy: acc_of(&out.adapters)? }];
    for &ratio in &cfg.experiment.ratios {
        let k = (ratio * n as f64).ceil() as usize;
        let mut pruned = out.adapters.deep_clone();
        for &layer in &by_score[..k] {
            pruned.kill_layer(layer)?;
        }
        rows.push(DropRow { run, ratio, strategy: "importance".into(), draw: 0, accuracy: acc_of(&pruned)? });
        for draw in 0..cfg.experiment.random_draws {
            let mut layers: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut layers);
            let mut pruned = out.adapters.deep_clone();
            for &layer in &layers[..k] {
                pruned.kill_layer(layer)?;
            }
            rows.push(DropRow { run, ratio, strategy: "random".into(), draw, accuracy: acc_of(&pruned)? });
        }
    }
    Ok(rows)
}

fn final_accuracy(log: &crate::harness::train::TrainLog) -> Result<Vec<(usize, f64)>> {
    if let Some(msg) = &log.aborted {
        return Err(Error::Numeric(msg.clone()));
    }
    log.final_eval()
        .map(|e| e.accuracy.clone())
        .ok_or_else(|| Error::Usage("run produced no evaluation".into()))
}

pub fn head_ablation_run<T: Scalar>(cfg: &RunConfig, model: &Backbone<T>, plan: &SeedPlan, run: usize) -> Result<Vec<HeadRow>> {
    let tasks = cfg.task.build()?;
    let mut rows = Vec::new();
    for &heads in &cfg.experiment.head_counts {
        let mut c = cfg.clone();
        c.adapter.n_experts = heads;
        c.validate()?;
        let out = run_with_backbone(&c, model, &tasks, plan.run(run))?;
        for (domain, accuracy) in final_accuracy(&out.log)? {
            rows.push(HeadRow { run, heads, domain, accuracy });
        }
    }
    Ok(rows)
}

pub fn interference_run<T: Scalar>(cfg: &RunConfig, model: &Backbone<T>, plan: &SeedPlan, run: usize) -> Result<Vec<InterferenceRow>> {
    if cfg.task.kind != TaskChoice::DomainPair {
        return Err(Error::Config("interference needs task.kind = \"domain_pair\"".into()));
    }
    let rplan = plan.run(run);
    let lora = AdapterConfig::vanilla_lora(cfg.adapter.rank, cfg.adapter.alpha, cfg.adapter.target_modules.clone());
    let mut rows = Vec::new();
    for (domain, select) in [(0usize, DomainSelect::A), (1, DomainSelect::B)] {
        let mut c = cfg.clone();
        c.adapter = lora.clone();
        c.reducer.enabled = false;
        c.task.domains = select;
        let out = run_with_backbone(&c, model, &c.task.build()?, rplan)?;
        for (d, accuracy) in final_accuracy(&out.log)? {
            debug_assert_eq!(d, domain);
            rows.push(InterferenceRow { run, setting: "single".into(), domain: d, accuracy });
        }
    }
    let mut c = cfg.clone();
    c.task.domains = DomainSelect::Mixture;
    c.adapter = lora;
    c.reducer.enabled = false;
    let out = run_with_backbone(&c, model, &c.task.build()?, rplan)?;
    for (domain, accuracy) in final_accuracy(&out.log)? {
        rows.push(InterferenceRow { run, setting: "mixture_lora".into(), domain, accuracy });
    }
    let mut c = cfg.clone();
    c.task.domains = DomainSelect::Mixture;
    c.adapter.n_experts = cfg.experiment.interference_heads;
    c.validate()?;
    let out = run_with_backbone(&c, model, &c.task.build()?, rplan)?;
    for (domain, accuracy) in final_accuracy(&out.log)? {
        rows.push(InterferenceRow { run, setting: "mixture_reora".into(), domain, accuracy });
    }
    Ok(rows)
}

pub fn summarize(name: ExperimentName, cfg: &RunConfig, rows: Rows) -> Result<ExperimentResult> {
    let (summary, checks, runs) = match (&rows, name) {
        (Rows::Drop(r), ExperimentName::DropSweep) => summarize_drop(cfg, r),
        (Rows::Head(r), ExperimentName::HeadAblation) => summarize_heads(cfg, r),
        (Rows::Interference(r), ExperimentName::Interference) => summarize_interference(r),
        _ => return Err(Error::Format(format!("rows do not belong to {name}"))),
    };
    let pass = checks.iter().all(|c| c.pass);
    Ok(ExperimentResult { experiment: name, config: cfg.clone(), runs, data: rows, summary, checks, pass })
}

fn distinct_runs(runs: impl Iterator<Item = usize>) -> usize {
    let mut v: Vec<usize> = runs.collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

fn summarize_drop(cfg: &RunConfig, rows: &[DropRow]) -> (serde_json::Value, Vec<Check>, usize) {
    let runs = distinct_runs(rows.iter().map(|r| r.run));
    let run_ids: Vec<usize> = {
        let mut v: Vec<usize> = rows.iter().map(|r| r.run).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    // per-run mean over random draws, then mean over runs
    let strategy_mean = |ratio: f64, strategy: &str| -> f64 {
        let per_run: Vec<f64> = run_ids
            .iter()
            .map(|&run| {
                let xs: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.run == run && r.ratio == ratio && r.strategy == strategy)
                    .map(|r| r.accuracy)
                    .collect();
                mean(&xs)
            })
            .collect();
        mean(&per_run)
    };
    let mut table = Vec::new();
    let mut checks = Vec::new();
    let base = strategy_mean(0.0, "unpruned");
    for &ratio in &cfg.experiment.ratios {
        let imp = strategy_mean(ratio, "importance");
        let rnd = strategy_mean(ratio, "random");
        table.push(serde_json::json!({"ratio": ratio, "importance": imp, "random": rnd}));
        if ratio > 0.0 {
            checks.push(Check::new(format!("importance >= random at ratio {ratio}"), imp - rnd, ">=", 0.0));
        } else {
            let mismatched = rows
                .iter()
                .filter(|r| r.ratio == 0.0 && r.strategy != "unpruned")
                .filter(|r| {
                    let unpruned = rows.iter().find(|x| x.run == r.run && x.strategy == "unpruned");
                    unpruned.map_or(true, |u| u.accuracy != r.accuracy)
                })
                .count();
            checks.push(Check::new("ratio 0 rows differing from unpruned", mismatched as f64, "==", 0.0));
        }
    }
    if let Some(bound) = cfg.experiment.max_drop_at_half {
        if cfg.experiment.ratios.contains(&0.5) {
            let drop = base - strategy_mean(0.5, "importance");
            checks.push(Check::new("importance accuracy drop at ratio 0.5", drop, "<=", bound));
        }
    }
    checks.push(Check::new("runs", runs as f64, ">=", 1.0));
    (serde_json::json!({"by_ratio": table, "unpruned": base}), checks, runs)
}

fn summarize_heads(cfg: &RunConfig, rows: &[HeadRow]) -> (serde_json::Value, Vec<Check>, usize) {
    let run_ids: Vec<usize> = {
        let mut v: Vec<usize> = rows.iter().map(|r| r.run).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let per_run = |heads: usize| -> Vec<f64> {
        run_ids
            .iter()
            .map(|&run| {
                let xs: Vec<f64> = rows.iter().filter(|r| r.run == run && r.heads == heads).map(|r| r.accuracy).collect();
                mean(&xs)
            })
            .collect()
    };
    let counts = &cfg.experiment.head_counts;
    let means: Vec<f64> = counts.iter().map(|&m| mean(&per_run(m))).collect();
    let mut checks = Vec::new();
    for i in 1..counts.len() {
        checks.push(Check::new(
            format!("mean accuracy m={} > m={}", counts[i], counts[i - 1]),
            means[i] - means[i - 1],
            ">",
            0.0,
        ));
    }
    let mut t = serde_json::Value::Null;
    if counts.len() >= 2 && run_ids.len() >= 2 {
        let lo = per_run(counts[0]);
        let hi = per_run(counts[counts.len() - 1]);
        let stat = paired_t(&lo, &hi);
        let crit = t_critical_05(run_ids.len() - 1);
        checks.push(Check::new(
            format!("paired t (m={} vs m={})", counts[counts.len() - 1], counts[0]),
            stat,
            ">",
            crit,
        ));
        t = serde_json::json!({"statistic": stat, "critical_05": crit, "df": run_ids.len() - 1});
    }
    let table: Vec<serde_json::Value> = counts
        .iter()
        .zip(&means)
        .map(|(m, a)| serde_json::json!({"heads": m, "mean_accuracy": a}))
        .collect();
    (serde_json::json!({"by_heads": table, "paired_t": t}), checks, run_ids.len())
}

fn summarize_interference(rows: &[InterferenceRow]) -> (serde_json::Value, Vec<Check>, usize) {
    let runs = distinct_runs(rows.iter().map(|r| r.run));
    let get = |setting: &str| -> Vec<f64> {
        rows.iter().filter(|r| r.setting == setting).map(|r| r.accuracy).collect()
    };
    let single = mean(&get("single"));
    let lora = mean(&get("mixture_lora"));
    let reora = mean(&get("mixture_reora"));
    let gap = single - lora;
    let recovered = reora - lora;
    let checks = vec![
        Check::new("interference gap (single − mixture LoRA)", gap, ">", 0.0),
        Check::new("recovered gap − half gap", recovered - 0.5 * gap, ">=", 0.0),
    ];
    (
        serde_json::json!({
            "single": single,
            "mixture_lora": lora,
            "mixture_reora": reora,
            "gap": gap,
            "recovered": recovered,
            "recovered_fraction": if gap != 0.0 { recovered / gap } else { f64::NAN },
        }),
        checks,
        runs,
    )
}
