//! Command-line front end: `simulate`, `fit`, `benchmark` and `report`.

pub mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use dpcox::baselines::{
    fit_2sls, fit_2sri, fit_infeasible, fit_naive, write_fit_results_csv, ClusterAdjustment, FitResult, Frailty,
};
use dpcox::bench::{
    read_replications_csv, run_benchmark_with, summarize, write_boxplot_csv, write_contingency_csv, write_metrics_csv,
    write_replications_csv, BenchConfig, Method,
};
use dpcox::dgm::{generate_dataset, make_scenario};
use dpcox::model::{read_dataset_csv, write_dataset_csv, Dataset};
use dpcox::sampler::run_chain;

use config::{ConfigError, ConfigFile, RunConfig, OUT_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "dpcox", version, about = "Clustered Cox regression with a Dirichlet-process exposure mixture")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit one dataset with the proposed sampler or a baseline.
    Fit(FitArgs),
    /// Run replicated simulations and summarize every method.
    Benchmark(BenchmarkArgs),
    /// Re-aggregate a replications CSV into metrics.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $DPCOX_OUT_DIR, then the current directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// easy or hard; comma-separated for benchmark.
    #[arg(long)]
    setting: Option<String>,
    /// a, b, c or d; comma-separated for benchmark.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// piecewise or fresh-draw.
    #[arg(long)]
    continuation: Option<String>,
}

#[derive(Debug, Args)]
struct McmcArgs {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    beta_step: Option<f64>,
    /// langevin or random-walk.
    #[arg(long)]
    beta_sampler: Option<String>,
    #[arg(long)]
    beta_moves: Option<usize>,
    #[arg(long)]
    exact_assignment: Option<bool>,
    #[arg(long)]
    literal_gamma: Option<bool>,
    #[arg(long)]
    homogeneous_sigma: Option<bool>,
    #[arg(long)]
    outcome_in_assignment: Option<bool>,
    #[arg(long)]
    null_calibrated: Option<bool>,
    /// pilot or single.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    pilot_sweeps: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Output CSV (default: <out-dir>/dataset.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    mcmc: McmcArgs,
    /// proposed, naive, 2sls, 2sri, infeasible; comma-separated.
    #[arg(long, alias = "methods")]
    method: Option<String>,
    /// Dataset CSV.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    mcmc: McmcArgs,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    methods: Option<String>,
    /// Parallel replications (0: one per core).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Replications CSV (default: <out-dir>/replications.csv).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    level: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Run(#[from] dpcox::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Io(_)) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 1,
            CliError::Run(_) => 1,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl Common {
    fn overrides(&self) -> ConfigFile {
        ConfigFile { seed: self.seed, out_dir: self.out_dir.clone(), ..Default::default() }
    }
}

impl ScenarioArgs {
    fn apply(&self, f: &mut ConfigFile) {
        f.overlay(&ConfigFile {
            setting: self.setting.clone(),
            scenario: self.scenario.clone(),
            n: self.n,
            continuation: self.continuation.clone(),
            ..Default::default()
        });
    }
}

impl McmcArgs {
    fn apply(&self, f: &mut ConfigFile) {
        f.overlay(&ConfigFile {
            iters: self.iters,
            burnin: self.burnin,
            thin: self.thin,
            beta_step: self.beta_step,
            beta_sampler: self.beta_sampler.clone(),
            beta_moves: self.beta_moves,
            exact_assignment: self.exact_assignment,
            literal_gamma: self.literal_gamma,
            homogeneous_sigma: self.homogeneous_sigma,
            outcome_in_assignment: self.outcome_in_assignment,
            null_calibrated: self.null_calibrated,
            init: self.init.clone(),
            pilot_sweeps: self.pilot_sweeps,
            level: self.level,
            ..Default::default()
        });
    }
}

fn base_file(common: &Common) -> Result<ConfigFile, CliError> {
    let mut f = match &common.config {
        Some(p) => ConfigFile::load(p).map_err(|e| match e {
            ConfigError::Io(io) => io_err(p, io),
            e => CliError::Config(e),
        })?,
        None => ConfigFile::default(),
    };
    f.overlay(&common.overrides());
    Ok(f)
}

fn env_out_dir() -> Option<PathBuf> {
    std::env::var_os(OUT_DIR_ENV).filter(|s| !s.is_empty()).map(PathBuf::from)
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> dpcox::Result<()>,
{
    let mut w = create_file(path)?;
    f(&mut w).map_err(|e| match e {
        dpcox::Error::Io(io) => io_err(path, io),
        dpcox::Error::Csv(c) => io_err(path, c),
        e => CliError::Run(e),
    })?;
    w.flush().map_err(|e| io_err(path, e))
}

fn write_manifest(path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let mut w = create_file(path)?;
    w.write_all(cfg.manifest().as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn read_dataset(path: &Path) -> Result<Dataset<f64>, CliError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_dataset_csv(std::io::BufReader::new(f)).map_err(|e| match e {
        dpcox::Error::Io(io) => io_err(path, io),
        e => CliError::Run(e),
    })
}

fn single<T: Copy + std::fmt::Display>(xs: &[T], field: &'static str) -> Result<T, CliError> {
    match xs {
        [x] => Ok(*x),
        _ => Err(ConfigError::Invalid { field, msg: "exactly one value expected".into() }.into()),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut f = base_file(&args.common)?;
    args.scenario.apply(&mut f);
    if args.out.is_some() {
        f.out = args.out.clone();
    }
    let mut cfg = RunConfig::resolve("simulate", &f, env_out_dir())?;
    let out = cfg.out.clone().unwrap_or_else(|| cfg.out_dir.join("dataset.csv"));
    cfg.out = Some(out.clone());
    let mut scn = make_scenario(single(&cfg.settings, "setting")?, single(&cfg.scenarios, "scenario")?, cfg.n);
    scn.continuation = cfg.continuation;
    let ds = generate_dataset(&scn, cfg.seed)?;
    write_with(&out, |w| write_dataset_csv(&ds, w))?;
    let mut manifest = out.clone().into_os_string();
    manifest.push(".manifest.toml");
    write_manifest(Path::new(&manifest), &cfg)?;
    eprintln!("wrote {} ({} records, {} events)", out.display(), ds.n(), ds.event_count());
    Ok(())
}

fn fit_baseline(ds: &Dataset<f64>, method: Method, level: f64) -> dpcox::Result<FitResult> {
    match method {
        Method::Naive => fit_naive(ds, level),
        Method::TwoSls => fit_2sls(ds, level),
        Method::TwoSri => fit_2sri(ds, Frailty::default(), level),
        Method::Infeasible => fit_infeasible(ds, ClusterAdjustment::default(), level),
        Method::Proposed => unreachable!("handled by the sampler"),
    }
}

fn fit(args: FitArgs) -> Result<(), CliError> {
    let mut f = base_file(&args.common)?;
    args.mcmc.apply(&mut f);
    f.overlay(&ConfigFile { methods: args.method.clone(), data: args.data.clone(), ..Default::default() });
    let cfg = RunConfig::resolve("fit", &f, env_out_dir())?;
    let data = cfg.data.clone().ok_or(ConfigError::Invalid { field: "data", msg: "a dataset path is required".into() })?;
    let ds = read_dataset(&data)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    if cfg.methods.contains(&Method::Proposed) {
        eprintln!("sampling {} sweeps", cfg.mcmc.total_iters);
        let draws = run_chain(&ds, &cfg.mcmc, &cfg.prior)?;
        write_with(&cfg.out_dir.join("draws.csv"), |w| draws.write_csv(w))?;
        let summaries = draws.beta_summaries(cfg.level)?;
        write_with(&cfg.out_dir.join("summary.csv"), |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["param", "mean", "sd", "lo", "hi", "level"])?;
            for (name, s) in &summaries {
                c.write_record([
                    name.clone(),
                    s.mean.to_string(),
                    s.sd.to_string(),
                    s.lo.to_string(),
                    s.hi.to_string(),
                    cfg.level.to_string(),
                ])?;
            }
            c.flush()?;
            Ok(())
        })?;
        eprintln!("beta acceptance rate {:.3}", draws.beta_acceptance);
    }
    let baselines: Vec<Method> = cfg.methods.iter().copied().filter(|m| *m != Method::Proposed).collect();
    if !baselines.is_empty() {
        let fits: Vec<(Method, FitResult)> =
            baselines.iter().map(|&m| fit_baseline(&ds, m, cfg.level).map(|r| (m, r))).collect::<dpcox::Result<_>>()?;
        let named: Vec<(&str, &FitResult)> = fits.iter().map(|(m, r)| (m.as_str(), r)).collect();
        write_with(&cfg.out_dir.join("fits.csv"), |w| write_fit_results_csv(w, &named))?;
    }
    write_manifest(&cfg.out_dir.join("manifest.toml"), &cfg)
}

fn benchmark(args: BenchmarkArgs) -> Result<(), CliError> {
    let mut f = base_file(&args.common)?;
    args.scenario.apply(&mut f);
    args.mcmc.apply(&mut f);
    f.overlay(&ConfigFile { reps: args.reps, methods: args.methods.clone(), jobs: args.jobs, ..Default::default() });
    let cfg = RunConfig::resolve("benchmark", &f, env_out_dir())?;
    let bench = BenchConfig {
        settings: cfg.settings.clone(),
        scenarios: cfg.scenarios.clone(),
        methods: cfg.methods.clone(),
        reps: cfg.reps,
        n: cfg.n,
        master_seed: cfg.seed,
        jobs: cfg.jobs,
        level: cfg.level,
        mcmc: cfg.mcmc.clone(),
        prior: cfg.prior.clone(),
        continuation: cfg.continuation,
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let report = run_benchmark_with(&bench, |done, total| eprintln!("replication {done}/{total}"))?;
    let dir = &cfg.out_dir;
    write_with(&dir.join("replications.csv"), |w| write_replications_csv(w, &report.rows))?;
    write_with(&dir.join("metrics.csv"), |w| write_metrics_csv(w, &report.metrics))?;
    write_with(&dir.join("boxplot.csv"), |w| write_boxplot_csv(w, &report.rows))?;
    write_with(&dir.join("contingency.csv"), |w| write_contingency_csv(w, &report.contingency))?;
    let failed = report.rows.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        eprintln!("{failed} method fits failed; see the error column of replications.csv");
    }
    write_manifest(&dir.join("manifest.toml"), &cfg)
}

fn report(args: ReportArgs) -> Result<(), CliError> {
    let mut f = base_file(&args.common)?;
    f.overlay(&ConfigFile { input: args.input.clone(), level: args.level, ..Default::default() });
    let mut cfg = RunConfig::resolve("report", &f, env_out_dir())?;
    let input = cfg.input.clone().unwrap_or_else(|| cfg.out_dir.join("replications.csv"));
    cfg.input = Some(input.clone());
    let file = File::open(&input).map_err(|e| io_err(&input, e))?;
    let rows = read_replications_csv(std::io::BufReader::new(file))?;
    let metrics = summarize(&rows, cfg.level)?;
    write_with(&cfg.out_dir.join("metrics.csv"), |w| write_metrics_csv(w, &metrics))?;
    write_manifest(&cfg.out_dir.join("report-manifest.toml"), &cfg)
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code; diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dpcox: {e}");
            e.exit_code()
        }
    }
}
