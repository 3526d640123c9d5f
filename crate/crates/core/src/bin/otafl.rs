use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rayon::prelude::*;

use otafl::channel::{phase_trajectories, write_phase_csv};
use otafl::config::{load_config, ExperimentConfig, Scenario};
use otafl::data::{label_histogram, shard_heterogeneous};
use otafl::fedsim::{run_experiment, Datasets, RunSummary};
use otafl::moments::{write_reports_csv, MomentCheck};
use otafl::{Error, RngStream, Role, StreamId};

#[derive(Parser)]
#[command(
    name = "otafl",
    version,
    about = "Over-the-air federated learning under phase noise"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set training.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Base seed; same as `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> otafl::Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        load_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo check of the estimator's closed-form mean and variance.
    VerifyMoments {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Monte Carlo rounds.
        #[arg(long, default_value_t = 200_000)]
        realizations: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Run every trial of one configuration into a single run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; defaults to `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run permutations x scenarios x trials, one run directory each.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Concurrent runs; overrides `sweep.workers`.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write phase-drift trajectories, one CSV per scenario.
    DumpPhase {
        #[arg(long, default_value_t = 50)]
        realizations: usize,
        /// Symbols per trajectory; defaults to half the model dimension.
        #[arg(long)]
        symbols: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "low,high")]
        scenarios: Vec<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print label histograms and the shard assignment of trial 0.
    InspectData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
}

/// Validation or acceptance failure.
const EXIT_FAIL: u8 = 1;
const EXIT_IO: u8 = 2;

fn exit_for(e: &Error) -> ExitCode {
    ExitCode::from(if e.is_io() { EXIT_IO } else { EXIT_FAIL })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            exit_for(&e)
        }
    }
}

fn run(command: Command) -> otafl::Result<ExitCode> {
    match command {
        Command::VerifyMoments {
            seed,
            realizations,
            output,
        } => verify_moments(seed, realizations, output.as_deref()),
        Command::Train { config, out } => {
            let cfg = config.load()?;
            let data = load_data(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let summary = run_experiment(&cfg, &data, &dir, 0..cfg.training.trials as u64)?;
            Ok(report(&[summary]))
        }
        Command::Sweep { config, jobs } => sweep(&config.load()?, jobs),
        Command::DumpPhase {
            realizations,
            symbols,
            seed,
            scenarios,
            out,
        } => dump_phase(realizations, symbols, seed, &scenarios, &out),
        Command::InspectData { config, trial } => inspect_data(&config.load()?, trial),
    }
}

fn load_data(cfg: &ExperimentConfig) -> otafl::Result<Datasets> {
    info!("loading data from {}", cfg.data.resolved_dir().display());
    Datasets::load(&cfg.data)
}

fn verify_moments(
    seed: u64,
    realizations: usize,
    output: Option<&Path>,
) -> otafl::Result<ExitCode> {
    let mut check = MomentCheck::acceptance(seed);
    check.realizations = realizations;
    let reports = check.run()?;
    match output {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            write_reports_csv(file, &reports)?;
        }
        None => write_reports_csv(io::stdout().lock(), &reports)?,
    }
    for r in &reports {
        info!(
            "d={}: mean {} ({:.2} stderr off), variance {:+.2}% {}",
            r.d,
            if r.mean_ok() { "ok" } else { "FAIL" },
            (r.mc_mean - r.closed_mean).abs() / r.mc_mean_stderr,
            100.0 * r.var_rel_err(),
            if r.var_ok() { "ok" } else { "FAIL" },
        );
    }
    Ok(if reports.iter().all(|r| r.pass()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    })
}

fn report(summaries: &[RunSummary]) -> ExitCode {
    let mut failed = 0;
    for s in summaries {
        for f in &s.failed_trials {
            error!("{}: trial {} failed: {}", s.dir.display(), f.trial, f.error);
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}

/// Run directory of one sweep cell.
fn sweep_dir(root: &Path, cfg: &ExperimentConfig, trial: u64) -> PathBuf {
    let scenario = cfg.scenario.map_or("custom", Scenario::as_str);
    root.join(format!("{}-{scenario}", cfg.training.permutation))
        .join(format!("trial-{trial:02}"))
}

fn sweep(cfg: &ExperimentConfig, jobs: Option<usize>) -> otafl::Result<ExitCode> {
    let data = load_data(cfg)?;
    let mut cells = Vec::new();
    for &kind in &cfg.sweep.permutations {
        for &scenario in &cfg.sweep.scenarios {
            for trial in 0..cfg.training.trials as u64 {
                let mut c = cfg.with_scenario(scenario);
                c.training.permutation = kind;
                cells.push((c, trial));
            }
        }
    }
    let workers = jobs.unwrap_or(cfg.sweep.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    info!(
        "sweep: {} runs on {} workers",
        cells.len(),
        pool.current_num_threads()
    );
    let summaries: Vec<RunSummary> = pool.install(|| {
        cells
            .par_iter()
            .map(|(c, trial)| {
                let dir = sweep_dir(&c.output.dir, c, *trial);
                run_experiment(c, &data, &dir, *trial..*trial + 1)
            })
            .collect::<otafl::Result<_>>()
    })?;
    Ok(report(&summaries))
}

fn dump_phase(
    realizations: usize,
    symbols: Option<usize>,
    seed: u64,
    scenarios: &[String],
    out: &Path,
) -> otafl::Result<ExitCode> {
    let symbols = symbols.unwrap_or(otafl::model::MODEL_DIM / 2);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, name) in scenarios.iter().enumerate() {
        let scenario: Scenario = name.parse()?;
        let traj = phase_trajectories(scenario.sigma_e2(), symbols, realizations, |r| {
            RngStream::new(seed, StreamId::new(i as u64, Role::Aux, r as u64, 0))
        });
        let path = out.join(format!("phase_{scenario}.csv"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_phase_csv(io::BufWriter::new(file), &traj)?;
        info!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn histogram_line(h: &[usize]) -> String {
    h.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn inspect_data(cfg: &ExperimentConfig, trial: u64) -> otafl::Result<ExitCode> {
    let data = load_data(cfg)?;
    let labels = data.train.labels();
    let assignment = shard_heterogeneous(
        labels,
        cfg.system.num_devices,
        cfg.training.shards_per_device,
        &mut RngStream::new(
            cfg.system.base_seed,
            StreamId::new(trial, Role::Shard, 0, 0),
        ),
    )?;
    let mut out = io::stdout().lock();
    let w = |out: &mut io::StdoutLock, s: String| {
        writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
    };
    w(&mut out, format!("train samples: {}", labels.len()))?;
    w(
        &mut out,
        format!(
            "train labels:  {}",
            histogram_line(&label_histogram(labels.iter().copied()))
        ),
    )?;
    w(
        &mut out,
        format!("test samples:  {}", data.test.labels.len()),
    )?;
    w(
        &mut out,
        format!(
            "test labels:   {}",
            histogram_line(&label_histogram(data.test.labels.iter().copied()))
        ),
    )?;
    w(
        &mut out,
        format!(
            "shards: {} of {} samples (trial {trial})",
            assignment.shards.len(),
            assignment.shard_size()
        ),
    )?;
    for k in 0..assignment.num_devices() {
        let idx = assignment.device_indices(k);
        let hist = label_histogram(idx.iter().map(|&i| labels[i]));
        let distinct = hist.iter().filter(|&&c| c > 0).count();
        w(
            &mut out,
            format!(
                "device {k}: shards {:?}, {} samples, {distinct} labels: {}",
                assignment.device_shards[k],
                idx.len(),
                histogram_line(&hist)
            ),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}
