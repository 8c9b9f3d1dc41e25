//! Replication runner: per-method estimates over simulated datasets, summary
//! metrics, effective sample sizes and cluster-recovery tables.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_2sls, fit_2sri, fit_infeasible, fit_naive, ClusterAdjustment, FitResult, Frailty};
use crate::dgm::{generate_dataset, make_scenario, splitmix64, LatentContinuation, ScenarioId, Setting};
use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::regression::PriorConfig;
use crate::sampler::{posterior_summary, run_chain_with, McmcConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub method: String,
    pub bias: f64,
    pub ese: f64,
    pub rmse: f64,
    pub cp: f64,
    /// Averages of auxiliary estimates, by name.
    pub mean_by_param: Option<Vec<(String, f64)>>,
}

/// Bias, empirical SE (divisor `R - 1`), RMSE (divisor `R`) and coverage.
pub fn estimator_metrics(method: &str, estimates: &[f64], intervals: &[(f64, f64)], truth: f64) -> Result<MetricsSummary> {
    if estimates.is_empty() {
        return Err(Error::Empty("estimates"));
    }
    if estimates.len() < 2 {
        return Err(Error::InvalidParameter("at least 2 replications are needed".into()));
    }
    if intervals.len() != estimates.len() {
        return Err(Error::DimensionMismatch(format!("{} intervals for {} estimates", intervals.len(), estimates.len())));
    }
    let r = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    let ss = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>();
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r;
    let covered = intervals.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count();
    Ok(MetricsSummary {
        method: method.to_string(),
        bias: mean - truth,
        ese: (ss / (r - 1.0)).sqrt(),
        rmse: mse.sqrt(),
        cp: covered as f64 / r,
        mean_by_param: None,
    })
}

/// Effective sample size with Geyer's initial positive sequence.
pub fn effective_sample_size(chain: &[f64]) -> Result<f64> {
    let n = chain.len();
    if n < 10 {
        return Err(Error::InvalidParameter(format!("chain length {n} < 10")));
    }
    let mean = chain.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = chain.iter().map(|x| x - mean).collect();
    let autocov = |lag: usize| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let c0 = autocov(0);
    if c0 <= f64::EPSILON * mean.abs().max(1.0).powi(2) {
        return Ok(n as f64);
    }
    // tau = -1 + 2 * sum of positive pair sums Gamma_m = rho_2m + rho_2m+1
    let mut tau = -1.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = (autocov(2 * m) + autocov(2 * m + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        m += 1;
    }
    Ok(n as f64 / tau.max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    /// Estimated cluster labels, one per row.
    pub rows: Vec<usize>,
    /// True class labels, one per column.
    pub cols: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
    pub purity: f64,
}

pub fn cluster_contingency(assignments: &[usize], true_u: &[usize]) -> Result<ContingencyTable> {
    if assignments.len() != true_u.len() {
        return Err(Error::DimensionMismatch(format!("{} assignments for {} labels", assignments.len(), true_u.len())));
    }
    if assignments.is_empty() {
        return Err(Error::Empty("assignments"));
    }
    let mut rows: Vec<usize> = assignments.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let mut cols: Vec<usize> = true_u.to_vec();
    cols.sort_unstable();
    cols.dedup();
    let mut counts = vec![vec![0usize; cols.len()]; rows.len()];
    for (a, u) in assignments.iter().zip(true_u) {
        let r = rows.binary_search(a).expect("row present");
        let c = cols.binary_search(u).expect("column present");
        counts[r][c] += 1;
    }
    let majority: usize = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(ContingencyTable { rows, cols, counts, purity: majority as f64 / assignments.len() as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "proposed")]
    Proposed,
    #[serde(rename = "2sls")]
    TwoSls,
    #[serde(rename = "2sri")]
    TwoSri,
    #[serde(rename = "infeasible")]
    Infeasible,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Naive, Method::Proposed, Method::TwoSls, Method::TwoSri, Method::Infeasible];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Proposed => "proposed",
            Method::TwoSls => "2sls",
            Method::TwoSri => "2sri",
            Method::Infeasible => "infeasible",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method '{s}'")))
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let methods: Vec<Method> = s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::Empty("methods"));
    }
    Ok(methods)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub settings: Vec<Setting>,
    pub scenarios: Vec<ScenarioId>,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub n: usize,
    pub master_seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    pub level: f64,
    pub mcmc: McmcConfig,
    pub prior: PriorConfig,
    pub continuation: LatentContinuation,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            settings: vec![Setting::Easy],
            scenarios: vec![ScenarioId::A],
            methods: Method::ALL.to_vec(),
            reps: 50,
            n: 600,
            master_seed: 2024,
            jobs: 0,
            level: 0.95,
            mcmc: McmcConfig { homogeneous_sigma: true, ..McmcConfig::default() },
            prior: PriorConfig::default(),
            continuation: LatentContinuation::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(Error::InvalidParameter("reps must be at least 2".into()));
        }
        if self.settings.is_empty() || self.scenarios.is_empty() {
            return Err(Error::Empty("settings or scenarios"));
        }
        if self.methods.is_empty() {
            return Err(Error::Empty("methods"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidParameter(format!("level {} outside (0, 1)", self.level)));
        }
        self.mcmc.validate()?;
        self.prior.validate().map_err(Error::InvalidParameter)
    }
}

/// Dataset seed for one replication; shared by all methods.
pub fn replication_seed(master: u64, setting: Setting, scenario: ScenarioId, rep: usize) -> u64 {
    let s = match setting {
        Setting::Easy => 1,
        Setting::Hard => 2,
    };
    let c = scenario as u64 + 1;
    let mut h = splitmix64(master);
    for x in [s, c, rep as u64] {
        h = splitmix64(h ^ x);
    }
    h
}

/// One method on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRow {
    pub setting: Setting,
    pub scenario: ScenarioId,
    pub method: Method,
    pub rep: usize,
    pub seed: u64,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub aux: Vec<(String, f64)>,
    pub error: Option<String>,
}

impl RepRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Final-iteration partition of a proposed-method chain.
#[derive(Debug, Clone, PartialEq)]
pub struct RepContingency {
    pub setting: Setting,
    pub scenario: ScenarioId,
    pub rep: usize,
    pub table: ContingencyTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub setting: Setting,
    pub scenario: ScenarioId,
    /// Replications that succeeded.
    pub reps: usize,
    pub summary: MetricsSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<RepRow>,
    pub metrics: Vec<MetricsRow>,
    pub contingency: Vec<RepContingency>,
}

fn baseline_row(fit: &FitResult) -> (f64, f64, f64, Vec<(String, f64)>) {
    let (lo, hi) = fit.ci_a();
    let aux = fit.names.iter().zip(&fit.estimate).skip(1).map(|(n, e)| (n.clone(), *e)).collect();
    (fit.beta_a(), lo, hi, aux)
}

type MethodOutput = (f64, f64, f64, Vec<(String, f64)>, Option<Vec<usize>>);

fn run_method(ds: &Dataset<f64>, method: Method, cfg: &BenchConfig, seed: u64) -> Result<MethodOutput> {
    let level = cfg.level;
    let fit = match method {
        Method::Naive => fit_naive(ds, level)?,
        Method::TwoSls => fit_2sls(ds, level)?,
        Method::TwoSri => fit_2sri(ds, Frailty::default(), level)?,
        Method::Infeasible => fit_infeasible(ds, ClusterAdjustment::default(), level)?,
        Method::Proposed => {
            let mcmc = McmcConfig { seed: splitmix64(seed ^ 0x5eed), ..cfg.mcmc.clone() };
            let mut last = Vec::new();
            let total = mcmc.total_iters;
            let draws = run_chain_with(ds, &mcmc, &cfg.prior, |it, st| {
                if it == total {
                    last = st.clusters.assignments().to_vec();
                }
            })?;
            let s = posterior_summary(&draws.beta_a(), level)?;
            let mut aux: Vec<(String, f64)> = draws
                .beta_summaries(level)?
                .into_iter()
                .skip(1)
                .map(|(n, p)| (n, p.mean))
                .collect();
            let m = draws.rows.len() as f64;
            aux.push(("sigma2".into(), draws.rows.iter().map(|r| r.sigma2_mean).sum::<f64>() / m));
            aux.push(("gamma".into(), draws.rows.iter().map(|r| r.gamma).sum::<f64>() / m));
            aux.push(("K_n".into(), draws.rows.iter().map(|r| r.k_n as f64).sum::<f64>() / m));
            return Ok((s.mean, s.lo, s.hi, aux, Some(last)));
        }
    };
    let (e, lo, hi, aux) = baseline_row(&fit);
    Ok((e, lo, hi, aux, None))
}

fn run_replication(
    cfg: &BenchConfig,
    setting: Setting,
    scenario: ScenarioId,
    rep: usize,
) -> (Vec<RepRow>, Option<RepContingency>) {
    let seed = replication_seed(cfg.master_seed, setting, scenario, rep);
    let mut scn = make_scenario(setting, scenario, cfg.n);
    scn.continuation = cfg.continuation;
    let failed = |method: Method, msg: String| RepRow {
        setting,
        scenario,
        method,
        rep,
        seed,
        estimate: f64::NAN,
        lo: f64::NAN,
        hi: f64::NAN,
        aux: Vec::new(),
        error: Some(msg),
    };
    let ds = match generate_dataset(&scn, seed) {
        Ok(ds) => ds,
        Err(e) => return (cfg.methods.iter().map(|&m| failed(m, e.to_string())).collect(), None),
    };
    let mut contingency = None;
    let rows = cfg
        .methods
        .iter()
        .map(|&method| match run_method(&ds, method, cfg, seed) {
            Ok((estimate, lo, hi, aux, last)) => {
                if let (Some(a), Some(u)) = (last, ds.true_clusters()) {
                    let u: Vec<usize> = u.iter().map(|&x| x as usize).collect();
                    if let Ok(table) = cluster_contingency(&a, &u) {
                        contingency = Some(RepContingency { setting, scenario, rep, table });
                    }
                }
                RepRow { setting, scenario, method, rep, seed, estimate, lo, hi, aux, error: None }
            }
            Err(e) => failed(method, e.to_string()),
        })
        .collect();
    (rows, contingency)
}

/// Runs every (setting, scenario, rep) and summarizes per method. Results are
/// ordered by task index whatever the thread count.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    run_benchmark_with(cfg, |_, _| {})
}

/// [`run_benchmark`] with a callback after each replication (`done`, `total`).
pub fn run_benchmark_with<P>(cfg: &BenchConfig, progress: P) -> Result<BenchReport>
where
    P: Fn(usize, usize) + Sync,
{
    cfg.validate()?;
    let tasks: Vec<(Setting, ScenarioId, usize)> = cfg
        .settings
        .iter()
        .flat_map(|&s| cfg.scenarios.iter().flat_map(move |&c| (0..cfg.reps).map(move |r| (s, c, r))))
        .collect();
    let total = tasks.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let results: Vec<(Vec<RepRow>, Option<RepContingency>)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, c, r)| {
                let out = run_replication(cfg, s, c, r);
                progress(done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1, total);
                out
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut contingency = Vec::new();
    for (r, c) in results {
        rows.extend(r);
        contingency.extend(c);
    }
    let metrics = summarize(&rows, cfg.level)?;
    Ok(BenchReport { rows, metrics, contingency })
}

/// True `beta_a` shared by all scenarios.
pub fn true_beta_a(setting: Setting, scenario: ScenarioId) -> f64 {
    make_scenario(setting, scenario, 1).beta_a_true
}

/// Per (setting, scenario, method) metrics over successful replications, in
/// first-appearance order. Groups with fewer than two successes are skipped.
pub fn summarize(rows: &[RepRow], _level: f64) -> Result<Vec<MetricsRow>> {
    let mut keys: Vec<(Setting, ScenarioId, Method)> = Vec::new();
    for r in rows {
        let k = (r.setting, r.scenario, r.method);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (setting, scenario, method) in keys {
        let group: Vec<&RepRow> =
            rows.iter().filter(|r| r.setting == setting && r.scenario == scenario && r.method == method && r.ok()).collect();
        if group.len() < 2 {
            continue;
        }
        let est: Vec<f64> = group.iter().map(|r| r.estimate).collect();
        let ints: Vec<(f64, f64)> = group.iter().map(|r| (r.lo, r.hi)).collect();
        let mut summary = estimator_metrics(method.as_str(), &est, &ints, true_beta_a(setting, scenario))?;
        let mut names: Vec<&str> = Vec::new();
        for r in &group {
            for (n, _) in &r.aux {
                if !names.contains(&n.as_str()) {
                    names.push(n);
                }
            }
        }
        if !names.is_empty() {
            let means = names
                .iter()
                .map(|&n| {
                    let vals: Vec<f64> =
                        group.iter().filter_map(|r| r.aux.iter().find(|(m, _)| m == n).map(|(_, v)| *v)).collect();
                    (n.to_string(), vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            summary.mean_by_param = Some(means);
        }
        out.push(MetricsRow { setting, scenario, reps: group.len(), summary });
    }
    Ok(out)
}

fn fmt_aux(aux: &[(String, f64)]) -> String {
    aux.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(";")
}

fn parse_aux(s: &str, line: usize) -> Result<Vec<(String, f64)>> {
    s.split(';')
        .filter(|t| !t.is_empty())
        .map(|t| {
            let (n, v) = t.split_once('=').ok_or_else(|| Error::Parse { line, msg: format!("bad aux entry '{t}'") })?;
            let v = v.parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("aux {n}: {e}") })?;
            Ok((n.to_string(), v))
        })
        .collect()
}

pub fn write_metrics_csv<W: Write>(out: W, metrics: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["setting", "scenario", "method", "reps", "bias", "ese", "rmse", "cp", "aux_means"])?;
    for m in metrics {
        let s = &m.summary;
        w.write_record([
            m.setting.to_string(),
            m.scenario.to_string(),
            s.method.clone(),
            m.reps.to_string(),
            s.bias.to_string(),
            s.ese.to_string(),
            s.rmse.to_string(),
            s.cp.to_string(),
            s.mean_by_param.as_deref().map(fmt_aux).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Hazard ratio `exp(beta_a)` per successful replication.
pub fn write_boxplot_csv<W: Write>(out: W, rows: &[RepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["setting", "scenario", "method", "rep", "hr"])?;
    for r in rows.iter().filter(|r| r.ok()) {
        w.write_record([
            r.setting.to_string(),
            r.scenario.to_string(),
            r.method.to_string(),
            r.rep.to_string(),
            r.estimate.exp().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line per (replication, estimated cluster); clusters are 1-based and
/// true classes are written as columns `u1, u2, ...`.
pub fn write_contingency_csv<W: Write>(out: W, tables: &[RepContingency]) -> Result<()> {
    let width = tables.iter().flat_map(|t| t.table.cols.iter().map(|c| c + 1)).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["setting".to_string(), "scenario".into(), "rep".into(), "cluster".into()];
    header.extend((1..=width).map(|u| format!("u{u}")));
    header.push("purity".into());
    w.write_record(&header)?;
    for t in tables {
        for (i, row) in t.table.counts.iter().enumerate() {
            let mut rec = vec![t.setting.to_string(), t.scenario.to_string(), t.rep.to_string(), (t.table.rows[i] + 1).to_string()];
            let mut full = vec![0usize; width];
            for (j, &c) in t.table.cols.iter().enumerate() {
                full[c] = row[j];
            }
            rec.extend(full.iter().map(|c| c.to_string()));
            rec.push(t.table.purity.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

const REP_HEADER: [&str; 10] = ["setting", "scenario", "method", "rep", "seed", "estimate", "lo", "hi", "aux", "error"];

pub fn write_replications_csv<W: Write>(out: W, rows: &[RepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REP_HEADER)?;
    for r in rows {
        w.write_record([
            r.setting.to_string(),
            r.scenario.to_string(),
            r.method.to_string(),
            r.rep.to_string(),
            r.seed.to_string(),
            r.estimate.to_string(),
            r.lo.to_string(),
            r.hi.to_string(),
            fmt_aux(&r.aux),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_replications_csv<R: Read>(input: R) -> Result<Vec<RepRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != REP_HEADER {
        return Err(Error::Parse { line: 1, msg: format!("expected header {}", REP_HEADER.join(",")) });
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| -> Result<f64> {
            field(j).parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("{}: {e}", REP_HEADER[j]) })
        };
        let int = |j: usize| -> Result<u64> {
            field(j).parse::<u64>().map_err(|e| Error::Parse { line, msg: format!("{}: {e}", REP_HEADER[j]) })
        };
        let parse_err = |msg: String| Error::Parse { line, msg };
        let error = field(9);
        rows.push(RepRow {
            setting: field(0).parse().map_err(|e: Error| parse_err(e.to_string()))?,
            scenario: field(1).parse().map_err(|e: Error| parse_err(e.to_string()))?,
            method: field(2).parse().map_err(|e: Error| parse_err(e.to_string()))?,
            rep: int(3)? as usize,
            seed: int(4)?,
            estimate: num(5)?,
            lo: num(6)?,
            hi: num(7)?,
            aux: parse_aux(field(8), line)?,
            error: (!error.is_empty()).then(|| error.to_string()),
        });
    }
    Ok(rows)
}
