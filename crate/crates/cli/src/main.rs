use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use episodic_core::episodic::VariantTag;
use episodic_core::experiments::{
    balance_difficulty, format_table, parse_threshold, run_trial, run_trials, summarize, sweep_tau,
    write_calibration_csv, write_results_csv, write_sweep_csv, write_trace_file, CalibrationGrid, Condition,
    ExperimentConfig, Threshold,
};
use episodic_core::model::{exact_log_mllh_by_k, read_dataset, write_dataset, DatasetMeta, ExactConfig, MogHypothesis};
use episodic_core::Error;

/// Memory-constrained online model selection on mixtures of Gaussians.
///
/// Configuration precedence, lowest to highest: built-in defaults, the
/// --config file, --set KEY=VALUE overrides, then the dedicated flags
/// (--seed, --runs, --variant).
#[derive(Parser, Debug)]
#[command(name = "episim", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one seeded trial and write per-variant traces.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Trial index within the seeded sequence.
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
    /// Both conditions, all configured variants, n_runs trials each.
    #[command(name = "reproduce-fig1f")]
    ReproduceFig1f {
        #[command(flatten)]
        run: RunArgs,
        /// Skip the per-trial trace files.
        #[arg(long)]
        no_traces: bool,
    },
    /// Balance oracle switch difficulty across the two conditions.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Switch probability across a grid of surprise thresholds.
    #[command(name = "sweep-tau")]
    SweepTau {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated thresholds; "inf" is allowed.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.175,0.25,0.375,0.5")]
        taus: Vec<String>,
    },
    /// Exact log marginal likelihood per k after each prefix of a dataset.
    Oracle {
        /// Dataset file, one observation per line.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        kmax: usize,
        #[arg(long, default_value_t = 1.0)]
        noise_variance: f64,
        #[arg(long, default_value_t = 0.0)]
        prior_mean: f64,
        #[arg(long, default_value_t = 1.0)]
        prior_variance: f64,
        #[arg(long)]
        max_points: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of trials per condition.
    #[arg(long)]
    runs: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Learner variant (repeatable): UL, EL2, EL1, ELb, SL.
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Config override such as condition=k3 or switch.fake_dataset_count=16.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Config(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn set_path(root: &mut Map<String, Value>, key: &str, value: Value) -> CliResult<()> {
    let mut parts = key.split('.').peekable();
    let mut node = root;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(config_err(format!("bad override key {key:?}")));
        }
        if parts.peek().is_none() {
            node.insert(part.to_string(), value);
            return Ok(());
        }
        let child = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        node = child.as_object_mut().ok_or_else(|| config_err(format!("{part} in {key:?} is not an object")))?;
    }
    Ok(())
}

impl RunArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut root = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(config_err(format!("{}: top level must be an object", path.display()))),
                    Err(e) => return Err(config_err(format!("{}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        for item in &self.overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| config_err(format!("override {item:?} is not KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key.trim(), value)?;
        }
        if let Some(seed) = self.seed {
            root.insert("master_seed".into(), seed.into());
        }
        if let Some(runs) = self.runs {
            root.insert("n_runs".into(), runs.into());
        }
        if !self.variants.is_empty() {
            let tags = self
                .variants
                .iter()
                .map(|v| v.parse::<VariantTag>().map(|t| Value::String(t.to_string())))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| config_err(e.to_string()))?;
            root.insert("variants".into(), Value::Array(tags));
        }
        let cfg: ExperimentConfig = serde_json::from_value(Value::Object(root)).map_err(|e| config_err(e.to_string()))?;
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        if self.parallel == 0 {
            return Err(config_err("--parallel must be >= 1"));
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> CliResult<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn trace_name(condition: Condition, variant: VariantTag) -> String {
    format!("trace_{condition}_{variant}.jsonl")
}

fn write_config(path: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(cfg).map_err(Error::from)? + "\n")?;
    Ok(())
}

fn cmd_simulate(run: &RunArgs, trial: u64) -> CliResult<()> {
    let cfg = run.load()?;
    let outcome = run_trial(&cfg, trial)?;
    let out = run.out_dir()?;
    let outcomes = std::slice::from_ref(&outcome);
    for (i, tag) in cfg.variants.iter().enumerate() {
        write_trace_file(&out.join(trace_name(cfg.condition, *tag)), outcomes, i)?;
    }
    let meta = DatasetMeta {
        true_means: cfg.generator().means,
        noise_variance: cfg.noise_variance,
        weights: cfg.generator().weights,
        ordering: cfg.ordering,
        seed: cfg.master_seed,
    };
    write_dataset(&out.join(format!("data_{}.txt", cfg.condition)), &outcome.dataset, Some(&meta))?;

    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "condition {} trial {trial} seed {}", cfg.condition, cfg.master_seed)?;
    for trace in &outcome.traces {
        let ks: Vec<String> = trace.k_trajectory().iter().map(|k| k.to_string()).collect();
        let switches = trace.events.iter().filter(|e| e.switch_to.is_some()).count();
        writeln!(w, "{:<4} k: {}  switches: {switches}", trace.variant.as_str(), ks.join(" "))?;
    }
    Ok(())
}

fn cmd_reproduce(run: &RunArgs, no_traces: bool) -> CliResult<()> {
    let base = run.load()?;
    let mut all = Vec::new();
    let mut per_condition = Vec::new();
    for condition in Condition::BOTH {
        let cfg = base.for_condition(condition);
        log::info!("running {} trials of {condition}", cfg.n_runs);
        let outcomes = run_trials(&cfg, run.parallel)?;
        all.push(summarize(&cfg, &outcomes));
        per_condition.push((cfg, outcomes));
    }
    let out = run.out_dir()?;
    write_results_csv(fs::File::create(out.join("results.csv"))?, &all)?;
    if !no_traces {
        for (cfg, outcomes) in &per_condition {
            for (i, tag) in cfg.variants.iter().enumerate() {
                write_trace_file(&out.join(trace_name(cfg.condition, *tag)), outcomes, i)?;
            }
        }
    }
    print!("{}", format_table(&all));
    Ok(())
}

fn cmd_calibrate(run: &RunArgs) -> CliResult<()> {
    let cfg = run.load()?;
    let result = balance_difficulty(&cfg, &CalibrationGrid::default(), run.parallel);
    let out = run.out_dir()?;
    let calibration = result?;
    write_calibration_csv(fs::File::create(out.join("calibration.csv"))?, &calibration.rows)?;
    write_config(&out.join("calibrated_config.json"), &calibration.config)?;
    println!("condition,separation,probability,std_error");
    for r in &calibration.rows {
        println!("{},{},{:.4},{:.4}", r.condition, r.separation, r.probability, r.std_error);
    }
    println!(
        "delta = {}, delta_k3 = {}",
        calibration.config.delta,
        calibration.config.separation(Condition::K3)
    );
    Ok(())
}

fn cmd_sweep(run: &RunArgs, taus: &[String]) -> CliResult<()> {
    let cfg = run.load()?;
    let grid = taus
        .iter()
        .map(|t| parse_threshold(t))
        .collect::<Result<Vec<Threshold>, _>>()
        .map_err(|e| config_err(e.to_string()))?;
    let table = sweep_tau(&cfg, &grid, run.parallel)?;
    let out = run.out_dir()?;
    write_sweep_csv(fs::File::create(out.join("sweep_tau.csv"))?, &table)?;
    let mut stdout = std::io::stdout().lock();
    write_sweep_csv(&mut stdout, &table)?;
    Ok(())
}

fn cmd_oracle(
    data: &Path,
    kmax: usize,
    noise_variance: f64,
    prior_mean: f64,
    prior_variance: f64,
    max_points: Option<usize>,
) -> CliResult<()> {
    let dataset = read_dataset(data).map_err(|e| config_err(e.to_string()))?;
    let hyp = MogHypothesis::uniform(kmax.max(1), noise_variance, prior_mean, prior_variance)
        .map_err(|e| config_err(e.to_string()))?;
    if kmax == 0 {
        return Err(config_err("kmax must be >= 1"));
    }
    let mut exact = ExactConfig::default();
    if let Some(m) = max_points {
        exact.max_points = m;
    }
    // Evaluate every prefix before printing so a cap failure leaves no partial table.
    let rows = (1..=dataset.points.len())
        .map(|t| exact_log_mllh_by_k(&dataset.points[..t], &hyp, kmax, &exact))
        .collect::<Result<Vec<_>, _>>()?;

    let mut w = std::io::stdout().lock();
    let header: Vec<String> = (1..=kmax).map(|k| format!("k{k}")).collect();
    writeln!(w, "t,{}", header.join(","))?;
    for (t, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{},{}", t + 1, cells.join(","))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Simulate { run, trial } => cmd_simulate(run, *trial),
        Command::ReproduceFig1f { run, no_traces } => cmd_reproduce(run, *no_traces),
        Command::Calibrate { run } => cmd_calibrate(run),
        Command::SweepTau { run, taus } => cmd_sweep(run, taus),
        Command::Oracle { data, kmax, noise_variance, prior_mean, prior_variance, max_points } => {
            cmd_oracle(data, *kmax, *noise_variance, *prior_mean, *prior_variance, *max_points)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error[config]: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error[{}]: {e}", e.name());
            ExitCode::from(3)
        }
    }
}
