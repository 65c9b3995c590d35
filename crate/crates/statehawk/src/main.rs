use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use statehawk::config::{
    load_sim_config, parse_sim, train_to_text, DataSource, KvFile, RunConfig,
};
use statehawk::dataset_io::{load_dataset, save_dataset};
use statehawk::eval::{apply_alignment, MetricsReport};
use statehawk::logs::{init_logging, NdjsonLog};
use statehawk::pipeline::{
    parse_ablations, score, sensitivity_sweep, sweep_table, ModelOutput, Prepared, Trainer,
};
use statehawk::repro::{run_suite, Runs};
use statehawk_core::dataset::Dataset;
use statehawk_core::sim::generate;

#[derive(Parser)]
#[command(name = "statehawk", version, about = "Hidden-state estimation and forecasting for multivariate time series")]
struct Cli {
    /// Config file (simulator keys for `simulate`, run keys otherwise)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (`simulate`) or directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Skip stage two
    #[arg(long, global = true)]
    stage1_only: bool,
    /// Comma-separated ablation flags, e.g. no_screening,no_episodic
    #[arg(long, global = true, value_name = "FLAG[,FLAG...]")]
    ablate: Option<String>,
    /// Worker threads for per-variable training
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Simulate {
        /// Built-in setup instead of a config file: sim3, fast1, fast2, sim10
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train the baseline, stage one, stage two and the HMM
    Train {
        /// Dataset CSV, overrides the config's data source
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score the checkpoints of a training run
    Eval {
        /// Directory written by `train`
        run: PathBuf,
        /// Dataset CSV (defaults to the run's copy)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training fraction used for alignment; the rest is scored
        #[arg(long)]
        split: Option<f64>,
    },
    /// Retrain once per value of a reward parameter
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        /// lambda1, lambda2, lambda3, lambda4, alpha or rho_c
        #[arg(long)]
        key: Option<String>,
        /// Comma-separated values
        #[arg(long)]
        values: Option<String>,
    },
    /// Run acceptance suites and print one line per criterion
    Repro {
        /// sim3, ablations, hmm, fast1, rewards, screening, gae, gradcheck,
        /// viterbi, simulator, welch, bandit, oracles or all
        suite: String,
    },
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Simulate { preset } => simulate(&cli, preset.as_deref()),
        Command::Train { data } => train(&cli, data.as_deref()),
        Command::Eval { run, data, split } => eval(&cli, run, data.as_deref(), *split),
        Command::Sweep { data, key, values } => {
            sweep(&cli, data.as_deref(), key.as_deref(), values.as_deref())
        }
        Command::Repro { suite } => repro(&cli, suite),
    }
}

fn simulate(cli: &Cli, preset: Option<&str>) -> anyhow::Result<ExitCode> {
    let cfg = match (preset, &cli.config) {
        (Some(_), Some(_)) => bail!("use either --preset or --config"),
        (Some(name), None) => {
            let mut kv = KvFile::parse(&format!("preset = {name}\n"), "--preset")?;
            parse_sim(&mut kv, "", cli.seed)?
        }
        (None, Some(path)) => load_sim_config(path, cli.seed)?,
        (None, None) => bail!("simulate needs --config or --preset"),
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data.csv"));
    let data = generate(&cfg)?;
    save_dataset(&out, &data)?;
    println!(
        "wrote {} (T={}, N={}, m={}, seed {})",
        out.display(),
        data.len(),
        data.n_vars(),
        data.n_states(),
        cfg.seed
    );
    for i in 0..data.n_vars() {
        let occ = data.occupancy(i).unwrap_or_default();
        let shares: Vec<String> = occ.iter().map(|o| format!("{:.3}", o)).collect();
        println!("  {}: state occupancy {}", data.names()[i], shares.join(" / "));
    }
    Ok(ExitCode::SUCCESS)
}

/// Run config from `--config` (or defaults) with command-line overrides.
fn run_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut rc = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        rc.train.seed = s;
        if let Some(DataSource::Simulated(sim)) = &mut rc.data {
            sim.seed = s;
        }
        rc.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        rc.out = o.clone();
    }
    if cli.stage1_only {
        rc.train.stage1_only = true;
    }
    if let Some(a) = &cli.ablate {
        rc.train.ablations = parse_ablations(a)?;
    }
    if let Some(t) = cli.threads {
        rc.train.threads = t;
    }
    rc.train.validate()?;
    Ok(rc)
}

fn load_data(rc: &RunConfig, data: Option<&Path>) -> anyhow::Result<Dataset> {
    let file = data.or(match &rc.data {
        Some(DataSource::File(p)) => Some(p.as_path()),
        _ => None,
    });
    Ok(match (file, &rc.data) {
        (Some(p), _) => load_dataset(p, Some(rc.train.n_states))
            .with_context(|| format!("loading {}", p.display()))?,
        (None, Some(DataSource::Simulated(sim))) => generate(sim)?,
        (None, _) => bail!("no data: pass --data or set `dataset`, `sim_config` or `sim.*` in the config"),
    })
}

#[derive(Serialize)]
struct RunMeta<'a> {
    event: &'a str,
    variant: String,
    seed: u64,
    n_vars: usize,
    length: usize,
    split: usize,
}

fn train(cli: &Cli, data: Option<&Path>) -> anyhow::Result<ExitCode> {
    let rc = run_config(cli)?;
    let dataset = load_data(&rc, data)?;
    let out = &rc.out;
    fs::create_dir_all(out.join("checkpoints"))
        .with_context(|| format!("creating {}", out.display()))?;
    let cfg_text = format!("{}dataset = data.csv\n", train_to_text(&rc.train));
    let cfg_path = out.join("config.cfg");
    if cfg_path.exists() && fs::read_to_string(&cfg_path)? != cfg_text {
        bail!(
            "{} holds a different configuration; use a fresh --out to start over",
            cfg_path.display()
        );
    }
    fs::write(&cfg_path, &cfg_text)?;
    save_dataset(&out.join("data.csv"), &dataset)?;

    let prepared = Prepared::new(dataset, rc.train.train_fraction)?;
    let log = NdjsonLog::append(&out.join("train.ndjson"))?;
    log.write(&RunMeta {
        event: "start",
        variant: rc.train.variant(),
        seed: rc.train.seed,
        n_vars: prepared.n_vars(),
        length: prepared.len(),
        split: prepared.split,
    })?;
    info!("training {} into {}", rc.train.variant(), out.display());
    let trained = Trainer::new(rc.train.clone())
        .with_output(out, Some(&log))
        .run(&prepared)?;
    let reports = write_reports(out, &prepared, &trained.outputs(), rc.train.stage1.t0)?;
    for r in &reports {
        print!("{}", r.table());
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(cli: &Cli, run: &Path, data: Option<&Path>, split: Option<f64>) -> anyhow::Result<ExitCode> {
    let mut kv = KvFile::load(&run.join("config.cfg"))?;
    let mut rc = RunConfig::parse(&mut kv, run)?;
    kv.finish()?;
    if let Some(f) = split {
        rc.train.train_fraction = f;
    }
    if let Some(t) = cli.threads {
        rc.train.threads = t;
    }
    rc.train.validate()?;
    let dataset = load_data(&rc, data)?;
    let prepared = Prepared::new(dataset, rc.train.train_fraction)?;
    let trained = Trainer::new(rc.train.clone())
        .with_output(run, None)
        .resume_only()
        .run(&prepared)?;
    let out = cli.out.clone().unwrap_or_else(|| run.join("eval"));
    fs::create_dir_all(&out)?;
    let reports = write_reports(&out, &prepared, &trained.outputs(), rc.train.stage1.t0)?;
    for r in &reports {
        print!("{}", r.table());
    }
    Ok(ExitCode::SUCCESS)
}

/// NDJSON and text reports plus one plot-data CSV per model.
fn write_reports(
    dir: &Path,
    data: &Prepared,
    outputs: &[&ModelOutput],
    t0: usize,
) -> anyhow::Result<Vec<MetricsReport>> {
    let log = NdjsonLog::create(&dir.join("metrics.ndjson"))?;
    let mut text = String::new();
    let mut reports = Vec::new();
    for o in outputs {
        let report = score(o, data, t0)?;
        log.write(&report)?;
        text += &report.table();
        text.push('\n');
        write_plot_data(&dir.join(format!("plot_{}.csv", file_stem(&o.name))), data, o, &report)?;
        reports.push(report);
    }
    fs::write(dir.join("metrics.txt"), text)?;
    Ok(reports)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Long format: one row per (step, variable); states 1-based, estimates
/// mapped through the training-split alignment.
fn write_plot_data(path: &Path, data: &Prepared, o: &ModelOutput, report: &MetricsReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["t", "variable", "truth", "prediction", "true_state", "estimated_state"])?;
    for i in 0..data.n_vars() {
        let truth = data.dataset.series(i);
        let true_states = data.dataset.state_series(i);
        let est = o.states.as_ref().map(|s| {
            let perm = &report.per_variable[i].alignment;
            if perm.is_empty() {
                s[i].clone()
            } else {
                apply_alignment(&s[i], perm)
            }
        });
        let name = &data.dataset.names()[i];
        for t in 0..data.len() {
            let state = |s: Option<usize>| s.map(|v| (v + 1).to_string()).unwrap_or_default();
            let pred = o.forecasts[i][t];
            w.write_record([
                t.to_string(),
                name.clone(),
                format!("{:?}", truth[t]),
                if pred.is_nan() { String::new() } else { format!("{pred:?}") },
                state(true_states.as_ref().map(|s| s[t])),
                state(est.as_ref().map(|s| s[t])),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    key: &'a str,
    value: f64,
    report: &'a MetricsReport,
}

fn sweep(cli: &Cli, data: Option<&Path>, key: Option<&str>, values: Option<&str>) -> anyhow::Result<ExitCode> {
    let rc = run_config(cli)?;
    let key = key
        .map(str::to_string)
        .or(rc.sweep_key.clone())
        .context("no sweep key: pass --key or set `sweep.key`")?;
    let values: Vec<f64> = match values {
        Some(v) => v
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .context("--values must be comma-separated numbers")?,
        None => rc.sweep_values.clone(),
    };
    if values.is_empty() {
        bail!("no sweep values: pass --values or set `sweep.values`");
    }
    let prepared = Prepared::new(load_data(&rc, data)?, rc.train.train_fraction)?;
    let rows = sensitivity_sweep(&rc.train, &prepared, &key, &values)?;
    fs::create_dir_all(&rc.out)?;
    let log = NdjsonLog::create(&rc.out.join("sweep.ndjson"))?;
    for (v, r) in &rows {
        log.write(&SweepRow {
            key: &key,
            value: *v,
            report: r,
        })?;
    }
    let table = sweep_table(&key, &rows);
    fs::write(rc.out.join("sweep.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn repro(cli: &Cli, suite: &str) -> anyhow::Result<ExitCode> {
    let rc = run_config(cli)?;
    let runs = Runs::new(rc.train);
    let checks = run_suite(suite, &runs)?;
    let mut stdout = std::io::stdout().lock();
    for c in &checks {
        writeln!(stdout, "{c}")?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(stdout, "{} passed, {failed} failed", checks.len() - failed)?;
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
