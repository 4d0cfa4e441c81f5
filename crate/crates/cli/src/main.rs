//! `reora` command-line entry point.
//!
//! Flags containing a dot (`--train.steps=0`) override config keys; every
//! run writes the resolved config next to its outputs.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand, ValueEnum};
use reora::checkpoint;
use reora::harness::accounting::{count_params_report, estimate_flops, search_configs, Scheme, SchemeKind};
use reora::harness::config::{Precision, RunConfig};
use reora::harness::experiments::{experiment_rows, summarize, ExperimentName, Rows};
use reora::harness::report;
use reora::harness::train::{evaluate, prepare_backbone, run_with_backbone, EvalSummary, SeedPlan};
use reora::tasks::{export_examples, Split};
use reora::{Backbone, Error, Scalar, TargetModule};

#[derive(Parser)]
#[command(name = "reora", version, about = "Shared-A, routed-B low-rank adapters with selective layer updates")]
#[command(after_help = "Any flag of the form --section.key=value overrides that key of the config file.")]
struct Cli {
    /// Master seed; overrides train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train adapters on the configured task.
    Train(TrainArgs),
    /// Run drop-sweep, head-ablation or interference.
    Experiment(ExperimentArgs),
    /// Parameter counts and relative cost of an adapter scheme on an architecture.
    Count(CountArgs),
    /// Evaluate a saved adapter checkpoint.
    Eval(EvalArgs),
    /// Write task examples as tab-separated text.
    ExportTask(ExportArgs),
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// drop-sweep, head-ablation or interference.
    name: String,
    config: PathBuf,
    /// Worker processes, each running a share of the seeds.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct WorkerArgs {
    name: String,
    config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    runs: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Lora,
    Reora,
}

#[derive(Args)]
struct CountArgs {
    /// Architecture file (TOML).
    arch: PathBuf,
    #[arg(long, value_enum, default_value = "lora")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 16)]
    rank: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Share one A per input width across layers.
    #[arg(long)]
    share_a: bool,
    #[arg(long, value_delimiter = ',', default_value = "q,k,v,up,down")]
    modules: Vec<String>,
    /// Layers whose B matrices are removed.
    #[arg(long, default_value_t = 0)]
    dropped_layers: usize,
    /// Fraction of layers whose B matrices train each step.
    #[arg(long, default_value_t = 1.0)]
    active_fraction: f64,
    #[arg(long, default_value_t = 512)]
    seq_len: usize,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Also list shared-A configurations within --tolerance of this count.
    #[arg(long)]
    search_target: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    /// Write the report as JSON here as well.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    config: PathBuf,
    /// Adapter checkpoint; defaults to <output.dir>/adapters.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct ExportArgs {
    config: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Examples per domain.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Output file; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match config::split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), Error> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Train(a) => {
            let cfg = config::load_run_config(&a.config, overrides, seed)?;
            let dir = out_dir(&cfg)?;
            fs::write(dir.join("config.toml"), config::echo(&cfg, &a.config, overrides)?)?;
            match cfg.train.precision {
                Precision::F64 => cmd_train::<f64>(&cfg, &dir),
                Precision::F32 => cmd_train::<f32>(&cfg, &dir),
            }
        }
        Cmd::Experiment(a) => {
            let name = ExperimentName::parse(&a.name)?;
            let cfg = config::load_run_config(&a.config, overrides, seed)?;
            let dir = out_dir(&cfg)?;
            let echo_path = dir.join(format!("{name}.config.toml"));
            fs::write(&echo_path, config::echo(&cfg, &a.config, overrides)?)?;
            cmd_experiment(name, &cfg, &dir, &echo_path, a.workers)
        }
        Cmd::Worker(a) => {
            let name = ExperimentName::parse(&a.name)?;
            let cfg = config::load_run_config(&a.config, &[], None)?;
            let rows = match cfg.train.precision {
                Precision::F64 => experiment_rows::<f64>(name, &cfg, &a.runs)?,
                Precision::F32 => experiment_rows::<f32>(name, &cfg, &a.runs)?,
            };
            fs::write(&a.out, serde_json::to_vec(&rows)?)?;
            Ok(())
        }
        Cmd::Count(a) => cmd_count(&a),
        Cmd::Eval(a) => {
            let cfg = config::load_run_config(&a.config, overrides, seed)?;
            match cfg.train.precision {
                Precision::F64 => cmd_eval::<f64>(&cfg, &a),
                Precision::F32 => cmd_eval::<f32>(&cfg, &a),
            }
        }
        Cmd::ExportTask(a) => {
            let cfg = config::load_run_config(&a.config, overrides, seed)?;
            let tasks = cfg.task.build()?;
            let examples = tasks.eval.fixed_set(a.split.into(), a.n, cfg.task.seed);
            match &a.out {
                Some(p) => export_examples(&examples, &mut fs::File::create(p)?),
                None => export_examples(&examples, &mut std::io::stdout().lock()),
            }
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn print_eval(label: &str, e: &EvalSummary) {
    let per: Vec<String> = e.accuracy.iter().map(|(d, a)| format!("d{d}={a:.4}")).collect();
    println!("{label}: nll={:.4} mean_acc={:.4} {}", e.nll, e.mean_accuracy, per.join(" "));
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<(), Error> {
    let plan = SeedPlan::new(cfg.train.seed);
    let model = prepare_backbone::<T>(&cfg.model, &cfg.train, &plan)?;
    let tasks = cfg.task.build()?;
    let out = run_with_backbone(cfg, &model, &tasks, plan)?;
    report::write_metrics_csv(&out.log, cfg.output.timing, fs::File::create(dir.join("metrics.csv"))?)?;
    if cfg.reducer.enabled {
        report::write_scores_csv(&out.log, fs::File::create(dir.join("scores.csv"))?)?;
    }
    if let Some(msg) = &out.log.aborted {
        return Err(Error::Numeric(msg.clone()));
    }
    if cfg.output.checkpoints {
        checkpoint::save_backbone(&dir.join("backbone.ckpt"), &model)?;
        let extra = serde_json::json!({
            "steps": cfg.train.steps,
            "scores": out.reducer.as_ref().map(|r| r.scores.clone()),
        });
        checkpoint::save_adapters(&dir.join("adapters.ckpt"), &cfg.model, &out.adapters, extra)?;
    }
    if let Some(first) = out.log.records.first().and_then(|r| r.eval.as_ref()) {
        print_eval("step 0", first);
    }
    if let Some(last) = out.log.final_eval().filter(|_| cfg.train.steps > 0) {
        print_eval(&format!("step {}", cfg.train.steps), last);
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_experiment(name: ExperimentName, cfg: &RunConfig, dir: &Path, echo: &Path, workers: usize) -> Result<(), Error> {
    let runs: Vec<usize> = (0..cfg.experiment.seeds).collect();
    let rows = if workers <= 1 || runs.len() <= 1 {
        match cfg.train.precision {
            Precision::F64 => experiment_rows::<f64>(name, cfg, &runs)?,
            Precision::F32 => experiment_rows::<f32>(name, cfg, &runs)?,
        }
    } else {
        run_workers(name, echo, dir, &runs, workers)?
    };
    report::write_rows_csv(&rows, fs::File::create(dir.join(format!("{name}.csv")))?)?;
    let result = summarize(name, cfg, rows)?;
    fs::write(dir.join(format!("{name}.json")), report::result_json(&result)?)?;
    for c in &result.checks {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        println!("{tag} {}: {} {} {}", c.name, c.value, c.relation, c.bound);
    }
    println!("{name}: {} ({} runs), result in {}", if result.pass { "pass" } else { "fail" }, result.runs, dir.display());
    Ok(())
}

/// Runs are dealt round-robin to `workers` child processes; each writes its
/// rows to a shard file that is merged here.
fn run_workers(name: ExperimentName, echo: &Path, dir: &Path, runs: &[usize], workers: usize) -> Result<Rows, Error> {
    let exe = std::env::current_exe()?;
    let workers = workers.min(runs.len());
    let mut children = Vec::new();
    for w in 0..workers {
        let mine: Vec<String> = runs.iter().skip(w).step_by(workers).map(|r| r.to_string()).collect();
        let shard = dir.join(format!("{name}.shard{w}.json"));
        let child = Command::new(&exe)
            .arg("worker")
            .arg(name.as_str())
            .arg(echo)
            .arg("--runs")
            .arg(mine.join(","))
            .arg("--out")
            .arg(&shard)
            .env_remove("REORA_OUT")
            .spawn()?;
        children.push((child, shard));
    }
    let mut rows = Rows::empty(name);
    let mut failed = None;
    for (mut child, shard) in children {
        let status = child.wait()?;
        if !status.success() {
            failed.get_or_insert(status.code().unwrap_or(1));
            continue;
        }
        let part: Rows = serde_json::from_slice(&fs::read(&shard)?)?;
        fs::remove_file(&shard)?;
        rows.merge(part)?;
    }
    match failed {
        Some(3) => Err(Error::Numeric("a worker hit a numeric failure".into())),
        Some(c) => Err(Error::Usage(format!("a worker exited with status {c}"))),
        None => Ok(rows),
    }
}

fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn cmd_count(a: &CountArgs) -> Result<(), Error> {
    let arch = config::load_arch(&a.arch)?;
    let modules = a.modules.iter().map(|m| TargetModule::parse(m)).collect::<Result<Vec<_>, _>>()?;
    let mut scheme = match a.scheme {
        SchemeArg::Lora => Scheme::lora(a.rank, modules),
        SchemeArg::Reora => Scheme::reora(a.rank, a.heads, a.share_a, modules),
    };
    if matches!(a.scheme, SchemeArg::Lora) && (a.heads != 1 || a.share_a) {
        return Err(Error::Usage("--heads and --share-a apply to --scheme reora".into()));
    }
    scheme.dropped_layers = a.dropped_layers;
    scheme.active_fraction = a.active_fraction;
    let report = count_params_report(&arch, &scheme)?;
    let flops = estimate_flops(&arch, &scheme, a.seq_len, a.steps)?;
    let kind = match scheme.kind {
        SchemeKind::Lora => "lora",
        SchemeKind::Reora => "reora",
    };
    println!("arch {} ({} layers, backbone {})", arch.name, arch.n_layers, group_digits(arch.backbone_params));
    println!(
        "scheme {kind} rank={} heads={} share_a={} modules={} dropped_layers={} active_fraction={}",
        scheme.rank,
        scheme.heads,
        scheme.share_a,
        scheme.modules.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        scheme.dropped_layers,
        scheme.active_fraction
    );
    println!("count {}", group_digits(report.count));
    println!("  A {}  B {}  router {}", group_digits(report.a_params), group_digits(report.b_params), group_digits(report.router_params));
    println!("percent_of_backbone {:.4}%", report.percent_of_backbone);
    println!();
    println!("relative cost (adapter-path multiply-accumulates per token, forward + backward,");
    println!("frozen backbone excluded; baseline = lora rank 16 on the same modules)");
    println!("{:<34} {:>10}", "scheme", "relative");
    println!("{:<34} {:>10.2}", "lora r=16", 1.0);
    println!("{:<34} {:>10.2}", format!("{kind} r={} m={}", scheme.rank, scheme.heads), flops.relative);
    let mut hits_json = serde_json::Value::Null;
    if let Some(target) = a.search_target {
        let hits = search_configs(&arch, a.rank, a.heads.max(1), target, a.tolerance)?;
        println!();
        println!("shared-A r={} m={} configurations within {}% of {}:", a.rank, a.heads, a.tolerance * 100.0, group_digits(target));
        for (s, c) in &hits {
            let mods: Vec<&str> = s.modules.iter().map(|m| m.name()).collect();
            println!("  modules={:<22} dropped_layers={:<3} count={}", mods.join(","), s.dropped_layers, group_digits(*c));
        }
        hits_json = serde_json::to_value(&hits)?;
    }
    if let Some(p) = &a.json {
        let v = serde_json::json!({
            "arch": arch.name,
            "scheme": scheme,
            "report": report,
            "flops": flops,
            "search": hits_json,
        });
        fs::write(p, serde_json::to_string_pretty(&v)? + "\n")?;
    }
    Ok(())
}

fn cmd_eval<T: Scalar>(cfg: &RunConfig, a: &EvalArgs) -> Result<(), Error> {
    let dir = PathBuf::from(&cfg.output.dir);
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| dir.join("adapters.ckpt"));
    let backbone_path = ckpt.with_file_name("backbone.ckpt");
    let model: Backbone<T> = if backbone_path.exists() {
        checkpoint::load_backbone(&backbone_path)?
    } else {
        prepare_backbone(&cfg.model, &cfg.train, &SeedPlan::new(cfg.train.seed))?
    };
    let (mcfg, adapters, _) = checkpoint::load_adapters::<T>(&ckpt)?;
    if &mcfg != model.config() {
        return Err(Error::Input("checkpoint was trained on a different model shape".into()));
    }
    let tasks = cfg.task.build()?;
    let set = tasks.eval.fixed_set(a.split.into(), cfg.task.eval_per_domain, cfg.task.seed);
    let tally = evaluate(&model, Some(&adapters), &tasks.eval, &set)?;
    let summary = EvalSummary::from(&tally);
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
