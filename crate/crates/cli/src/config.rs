//! Run configuration: a TOML file, overridden by command-line flags, resolved
//! into concrete engine settings and echoed back as a manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dpcox::bench::{parse_methods, Method};
use dpcox::dgm::{LatentContinuation, ScenarioId, Setting};
use dpcox::regression::PriorConfig;
use dpcox::sampler::{BetaSampler, InitStrategy, McmcConfig};

pub const OUT_DIR_ENV: &str = "DPCOX_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid value for {field}: {msg}")]
    Invalid { field: &'static str, msg: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: &'static str, msg: impl ToString) -> ConfigError {
    ConfigError::Invalid { field, msg: msg.to_string() }
}

/// Every key a config file may hold; flags use the same names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub command: Option<String>,
    pub setting: Option<String>,
    pub scenario: Option<String>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub methods: Option<String>,
    pub jobs: Option<usize>,
    pub level: Option<f64>,
    pub continuation: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub iters: Option<usize>,
    pub burnin: Option<usize>,
    pub thin: Option<usize>,
    pub beta_step: Option<f64>,
    pub beta_sampler: Option<String>,
    pub beta_moves: Option<usize>,
    pub exact_assignment: Option<bool>,
    pub literal_gamma: Option<bool>,
    pub homogeneous_sigma: Option<bool>,
    pub outcome_in_assignment: Option<bool>,
    pub null_calibrated: Option<bool>,
    pub init: Option<String>,
    pub pilot_sweeps: Option<usize>,
    pub prior: Option<PriorSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub m_beta_a: Option<f64>,
    pub tau2_beta_a: Option<f64>,
    pub m_beta_x: Option<f64>,
    pub var_beta_x: Option<f64>,
    pub m_alpha_z: Option<f64>,
    pub var_alpha_z: Option<f64>,
    pub m_alpha_v: Option<f64>,
    pub var_alpha_v: Option<f64>,
    pub m_alpha0: Option<f64>,
    pub tau2_alpha0: Option<f64>,
    pub a_sigma: Option<f64>,
    pub b_sigma: Option<f64>,
    pub a_gamma: Option<f64>,
    pub b_gamma: Option<f64>,
    pub horseshoe_alpha_z: Option<bool>,
    pub horseshoe_beta: Option<bool>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl PriorSection {
    fn overlay(&mut self, o: &PriorSection) {
        overlay!(self, o; m_beta_a, tau2_beta_a, m_beta_x, var_beta_x, m_alpha_z, var_alpha_z, m_alpha_v,
            var_alpha_v, m_alpha0, tau2_alpha0, a_sigma, b_sigma, a_gamma, b_gamma, horseshoe_alpha_z,
            horseshoe_beta, tau1, tau2);
    }

    fn apply(&self, p: &mut PriorConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { p.$f = v; } )* };
        }
        set!(m_beta_a, tau2_beta_a, m_beta_x, var_beta_x, m_alpha_z, var_alpha_z, m_alpha_v, var_alpha_v, m_alpha0,
            tau2_alpha0, a_sigma, b_sigma, a_gamma, b_gamma, horseshoe_alpha_z, horseshoe_beta, tau1, tau2);
    }

    fn full(p: &PriorConfig) -> Self {
        Self {
            m_beta_a: Some(p.m_beta_a),
            tau2_beta_a: Some(p.tau2_beta_a),
            m_beta_x: Some(p.m_beta_x),
            var_beta_x: Some(p.var_beta_x),
            m_alpha_z: Some(p.m_alpha_z),
            var_alpha_z: Some(p.var_alpha_z),
            m_alpha_v: Some(p.m_alpha_v),
            var_alpha_v: Some(p.var_alpha_v),
            m_alpha0: Some(p.m_alpha0),
            tau2_alpha0: Some(p.tau2_alpha0),
            a_sigma: Some(p.a_sigma),
            b_sigma: Some(p.b_sigma),
            a_gamma: Some(p.a_gamma),
            b_gamma: Some(p.b_gamma),
            horseshoe_alpha_z: Some(p.horseshoe_alpha_z),
            horseshoe_beta: Some(p.horseshoe_beta),
            tau1: Some(p.tau1),
            tau2: Some(p.tau2),
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str, path: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_string(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Values set in `o` replace those in `self`.
    pub fn overlay(&mut self, o: &ConfigFile) {
        overlay!(self, o; command, setting, scenario, n, reps, seed, methods, jobs, level, continuation, out_dir,
            out, data, input, iters, burnin, thin, beta_step, beta_sampler, beta_moves, exact_assignment,
            literal_gamma, homogeneous_sigma, outcome_in_assignment, null_calibrated, init, pilot_sweeps);
        match (&mut self.prior, &o.prior) {
            (Some(p), Some(q)) => p.overlay(q),
            (None, Some(q)) => self.prior = Some(q.clone()),
            _ => {}
        }
    }
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub settings: Vec<Setting>,
    pub scenarios: Vec<ScenarioId>,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub jobs: usize,
    pub level: f64,
    pub continuation: LatentContinuation,
    pub out_dir: PathBuf,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub mcmc: McmcConfig,
    pub prior: PriorConfig,
}

fn parse_list<T, E: ToString>(s: &str, field: &'static str, f: impl Fn(&str) -> Result<T, E>) -> Result<Vec<T>, ConfigError> {
    let items: Vec<T> =
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(|t| f(t).map_err(|e| invalid(field, e))).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(invalid(field, "empty list"));
    }
    Ok(items)
}

fn parse_continuation(s: &str) -> Result<LatentContinuation, ConfigError> {
    match s.to_ascii_lowercase().as_str() {
        "piecewise" => Ok(LatentContinuation::Piecewise),
        "fresh-draw" | "fresh" => Ok(LatentContinuation::FreshDraw),
        _ => Err(invalid("continuation", format!("{s:?} (expected piecewise or fresh-draw)"))),
    }
}

fn continuation_name(c: LatentContinuation) -> &'static str {
    match c {
        LatentContinuation::Piecewise => "piecewise",
        LatentContinuation::FreshDraw => "fresh-draw",
    }
}

fn parse_sampler(s: &str) -> Result<BetaSampler, ConfigError> {
    match s.to_ascii_lowercase().as_str() {
        "langevin" | "mala" => Ok(BetaSampler::Langevin),
        "random-walk" | "rw" => Ok(BetaSampler::RandomWalk),
        _ => Err(invalid("beta_sampler", format!("{s:?} (expected langevin or random-walk)"))),
    }
}

fn parse_init(s: &str) -> Result<InitStrategy, ConfigError> {
    match s.to_ascii_lowercase().as_str() {
        "pilot" => Ok(InitStrategy::PilotSelect),
        "single" => Ok(InitStrategy::SingleCluster),
        _ => Err(invalid("init", format!("{s:?} (expected pilot or single)"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Resolves `file` for `command`; `env_out_dir` is the fallback output
    /// directory when neither the file nor a flag sets one.
    pub fn resolve(command: &str, file: &ConfigFile, env_out_dir: Option<PathBuf>) -> Result<Self, ConfigError> {
        if let Some(c) = &file.command {
            if c != command {
                return Err(invalid("command", format!("config is for {c:?}, not {command:?}")));
            }
        }
        let settings = parse_list(file.setting.as_deref().unwrap_or("easy"), "setting", str::parse::<Setting>)?;
        let scenarios = parse_list(file.scenario.as_deref().unwrap_or("a"), "scenario", str::parse::<ScenarioId>)?;
        let methods = match &file.methods {
            Some(m) => parse_methods(m).map_err(|e| invalid("methods", e))?,
            None if command == "fit" => vec![Method::Proposed],
            None => Method::ALL.to_vec(),
        };
        let n = file.n.unwrap_or(600);
        if n == 0 {
            return Err(invalid("n", "must be at least 1"));
        }
        let reps = file.reps.unwrap_or(50);
        if command == "benchmark" && reps < 2 {
            return Err(invalid("reps", "must be at least 2"));
        }
        let level = file.level.unwrap_or(0.95);
        if !(level > 0.0 && level < 1.0) {
            return Err(invalid("level", format!("{level} outside (0, 1)")));
        }
        let continuation = file.continuation.as_deref().map_or(Ok(LatentContinuation::default()), parse_continuation)?;
        let d = McmcConfig::default();
        let mcmc = McmcConfig {
            total_iters: file.iters.unwrap_or(d.total_iters),
            burn_in: file.burnin.unwrap_or(d.burn_in),
            seed: file.seed.unwrap_or(1),
            beta_step: file.beta_step.unwrap_or(d.beta_step),
            beta_sampler: file.beta_sampler.as_deref().map_or(Ok(d.beta_sampler), parse_sampler)?,
            beta_moves_per_sweep: file.beta_moves.unwrap_or(d.beta_moves_per_sweep),
            thin: file.thin.unwrap_or(d.thin),
            exact_assignment: file.exact_assignment.unwrap_or(d.exact_assignment),
            literal_gamma: file.literal_gamma.unwrap_or(d.literal_gamma),
            // simulation mode pools the exposure variance
            homogeneous_sigma: file.homogeneous_sigma.unwrap_or(command == "benchmark"),
            outcome_in_assignment: file.outcome_in_assignment.unwrap_or(d.outcome_in_assignment),
            null_calibrated: file.null_calibrated.unwrap_or(d.null_calibrated),
            init: file.init.as_deref().map_or(Ok(d.init), parse_init)?,
            pilot_sweeps: file.pilot_sweeps.unwrap_or(d.pilot_sweeps),
        };
        mcmc.validate().map_err(|e| {
            let field = if e.to_string().contains("burn_in") { "burnin" } else { "mcmc" };
            invalid(field, e.to_string().trim_start_matches("invalid parameter: "))
        })?;
        let mut prior = PriorConfig::default();
        if let Some(p) = &file.prior {
            p.apply(&mut prior);
        }
        prior.validate().map_err(|e| invalid("prior", e))?;
        let out_dir = file.out_dir.clone().or(env_out_dir).unwrap_or_else(|| PathBuf::from("."));
        Ok(Self {
            command: command.to_string(),
            settings,
            scenarios,
            n,
            reps,
            seed: mcmc.seed,
            methods,
            jobs: file.jobs.unwrap_or(0),
            level,
            continuation,
            out_dir,
            out: file.out.clone(),
            data: file.data.clone(),
            input: file.input.clone(),
            mcmc,
            prior,
        })
    }

    /// Every resolved value, in config-file form.
    pub fn to_file(&self) -> ConfigFile {
        let m = &self.mcmc;
        ConfigFile {
            command: Some(self.command.clone()),
            setting: Some(join(&self.settings)),
            scenario: Some(join(&self.scenarios)),
            n: Some(self.n),
            reps: Some(self.reps),
            seed: Some(self.seed),
            methods: Some(join(&self.methods)),
            jobs: Some(self.jobs),
            level: Some(self.level),
            continuation: Some(continuation_name(self.continuation).into()),
            out_dir: Some(self.out_dir.clone()),
            out: self.out.clone(),
            data: self.data.clone(),
            input: self.input.clone(),
            iters: Some(m.total_iters),
            burnin: Some(m.burn_in),
            thin: Some(m.thin),
            beta_step: Some(m.beta_step),
            beta_sampler: Some(
                match m.beta_sampler {
                    BetaSampler::Langevin => "langevin",
                    BetaSampler::RandomWalk => "random-walk",
                }
                .into(),
            ),
            beta_moves: Some(m.beta_moves_per_sweep),
            exact_assignment: Some(m.exact_assignment),
            literal_gamma: Some(m.literal_gamma),
            homogeneous_sigma: Some(m.homogeneous_sigma),
            outcome_in_assignment: Some(m.outcome_in_assignment),
            null_calibrated: Some(m.null_calibrated),
            init: Some(
                match m.init {
                    InitStrategy::PilotSelect => "pilot",
                    InitStrategy::SingleCluster => "single",
                }
                .into(),
            ),
            pilot_sweeps: Some(m.pilot_sweeps),
            prior: Some(PriorSection::full(&self.prior)),
        }
    }

    pub fn manifest(&self) -> String {
        toml::to_string(&self.to_file()).expect("config serializes")
    }
}
