//! General-Bayes posterior sampling: Gibbs sweeps over the exposure mixture,
//! the partition and the DP precision, with Metropolis updates of the outcome
//! coefficients against the clustered partial likelihood.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;

use crate::baselines::fit_ols;
use crate::cluster::{
    crp_log_prob, sample_concentration, sweep_assignments, AssignmentKind, AssignmentModel, ClusterState,
    ConcentrationState, ConcentrationUpdate,
};
use crate::error::{Error, Result};
use crate::model::{write_dataset_csv, ClusteredCox, Dataset, DesignSelector};
use crate::regression::{
    exposure_log_density, normal_log_density, sample_cluster_location, sample_cluster_variance, sample_global_alpha_z,
    sample_shared_variance, ClusterRegressionParams, HorseshoeState, PriorConfig,
};

/// Proposal used for the outcome coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaSampler {
    RandomWalk,
    /// Metropolis-adjusted Langevin proposal using the score.
    #[default]
    Langevin,
}

impl BetaSampler {
    fn target_acceptance(self) -> f64 {
        match self {
            Self::RandomWalk => 0.234,
            Self::Langevin => 0.574,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub total_iters: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Initial proposal scale, relative to the preconditioner.
    pub beta_step: f64,
    pub beta_sampler: BetaSampler,
    /// Metropolis moves on `beta` per sweep.
    pub beta_moves_per_sweep: usize,
    pub thin: usize,
    pub exact_assignment: bool,
    pub literal_gamma: bool,
    pub homogeneous_sigma: bool,
    /// Multiply assignment weights by the subject's partial-likelihood factor.
    /// Off by default: the partition then follows the exposure mixture alone
    /// and `beta` is drawn given it.
    pub outcome_in_assignment: bool,
    /// Divide the outcome factor by its value at `beta = 0` so that splitting
    /// a cluster carries no free likelihood gain.
    pub null_calibrated: bool,
    pub init: InitStrategy,
    /// Sweeps per pilot chain under [`InitStrategy::PilotSelect`].
    pub pilot_sweeps: usize,
}

/// Starting partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitStrategy {
    /// Everyone in one cluster.
    SingleCluster,
    /// Short pilot chains from quantile groups of first-stage residuals; the
    /// chain continues from the pilot with the highest mean log posterior.
    #[default]
    PilotSelect,
}

/// Group counts tried by the pilot initializer.
pub const PILOT_GROUPS: [usize; 5] = [2, 3, 5, 10, 20];

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            total_iters: 1200,
            burn_in: 200,
            seed: 1,
            beta_step: 1.0,
            beta_sampler: BetaSampler::Langevin,
            beta_moves_per_sweep: 5,
            thin: 1,
            exact_assignment: false,
            literal_gamma: false,
            homogeneous_sigma: false,
            outcome_in_assignment: false,
            null_calibrated: false,
            init: InitStrategy::PilotSelect,
            pilot_sweeps: 60,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.total_iters {
            return Err(Error::InvalidParameter("burn_in < total_iters violated".into()));
        }
        if !(self.beta_step > 0.0 && self.beta_step.is_finite()) {
            return Err(Error::InvalidParameter("beta_step must be positive".into()));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be at least 1".into()));
        }
        if self.init == InitStrategy::PilotSelect && self.pilot_sweeps < 2 {
            return Err(Error::InvalidParameter("pilot_sweeps must be at least 2".into()));
        }
        if self.beta_moves_per_sweep == 0 {
            return Err(Error::InvalidParameter("beta_moves_per_sweep must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of rows `run_chain` returns.
    pub fn retained(&self) -> usize {
        (self.total_iters - self.burn_in) / self.thin
    }
}

/// Independent normal prior on `beta`, stored as means and precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaPrior {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
}

impl BetaPrior {
    pub fn log_density(&self, beta: &[f64]) -> f64 {
        beta.iter()
            .zip(&self.mean)
            .zip(&self.precision)
            .map(|((b, m), p)| 0.5 * (p / std::f64::consts::TAU).ln() - 0.5 * p * (b - m) * (b - m))
            .sum()
    }

    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter().zip(&self.mean).zip(&self.precision).map(|((b, m), p)| -p * (b - m)).collect()
    }
}

/// Proposal covariance `M = L L'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    pub cov: DMatrix<f64>,
    pub chol: DMatrix<f64>,
}

impl Preconditioner {
    pub fn identity(p: usize) -> Self {
        Self { cov: DMatrix::identity(p, p), chol: DMatrix::identity(p, p) }
    }

    /// Inverse of `-H + diag(prior precision)` at `beta`; `None` if that
    /// matrix is not positive definite.
    pub fn from_curvature(cox: &ClusteredCox<f64>, s: &[usize], beta: &[f64], prior: &BetaPrior) -> Option<Self> {
        let p = beta.len();
        let ev = cox.log_lik_hessian(beta, s);
        let mut info = -DMatrix::from_row_slice(p, p, &ev.hessian);
        for j in 0..p {
            info[(j, j)] += prior.precision[j];
        }
        let cov = info.cholesky()?.inverse();
        let chol = cov.clone().cholesky()?.l();
        Some(Self { cov, chol })
    }

    fn whitened_sq(&self, d: &DVector<f64>) -> f64 {
        let z = self.chol.solve_lower_triangular(d).expect("nonsingular factor");
        z.norm_squared()
    }
}

/// Outcome of one Metropolis update of `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaMove {
    pub beta: Vec<f64>,
    pub log_lik: f64,
    pub accepted: bool,
    /// `min(1, exp(log alpha))`, zero for a non-finite proposal.
    pub accept_prob: f64,
}

/// One Metropolis-Hastings update of `beta` targeting
/// `exp(clustered partial log-likelihood) x prior`.
#[allow(clippy::too_many_arguments)]
pub fn sample_beta<R: Rng + ?Sized>(
    cox: &ClusteredCox<f64>,
    s: &[usize],
    beta: &[f64],
    prior: &BetaPrior,
    precond: &Preconditioner,
    step: f64,
    kind: BetaSampler,
    rng: &mut R,
) -> BetaMove {
    let p = beta.len();
    let cur = cox.log_lik_grad(beta, s);
    let drift = |b: &[f64], grad: &[f64]| -> DVector<f64> {
        let g = DVector::from_iterator(p, grad.iter().zip(prior.gradient(b)).map(|(a, c)| a + c));
        DVector::from_column_slice(b) + (&precond.cov * g) * (0.5 * step * step)
    };
    let mean_fwd = match kind {
        BetaSampler::RandomWalk => DVector::from_column_slice(beta),
        BetaSampler::Langevin => drift(beta, &cur.gradient),
    };
    let xi = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let prop_v = &mean_fwd + &precond.chol * xi * step;
    let prop: Vec<f64> = prop_v.iter().copied().collect();

    let reject = |accept_prob| BetaMove { beta: beta.to_vec(), log_lik: cur.value, accepted: false, accept_prob };
    if !prop.iter().all(|b| b.is_finite()) {
        return reject(0.0);
    }
    let new = cox.log_lik_grad(&prop, s);
    if !new.value.is_finite() || !new.gradient.iter().all(|g| g.is_finite()) {
        return reject(0.0);
    }
    let mut log_alpha = new.value + prior.log_density(&prop) - cur.value - prior.log_density(beta);
    if kind == BetaSampler::Langevin && step > 0.0 {
        let mean_back = drift(&prop, &new.gradient);
        let fwd = precond.whitened_sq(&(&prop_v - &mean_fwd));
        let back = precond.whitened_sq(&(DVector::from_column_slice(beta) - mean_back));
        log_alpha += (fwd - back) / (2.0 * step * step);
    }
    if !log_alpha.is_finite() && log_alpha != f64::NEG_INFINITY {
        return reject(0.0);
    }
    let accept_prob = log_alpha.min(0.0).exp();
    if rng.random::<f64>() < accept_prob {
        BetaMove { beta: prop, log_lik: new.value, accepted: true, accept_prob }
    } else {
        reject(accept_prob)
    }
}

/// Every unknown of the model at one point of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub beta: Vec<f64>,
    pub alpha_z: Vec<f64>,
    pub clusters: ClusterState,
    pub conc: ConcentrationState,
    pub horseshoe: Option<HorseshoeState>,
    /// Set under the homogeneous-variance model; mirrors every cluster's `sigma2`.
    pub shared_sigma2: Option<f64>,
    /// Partial log-likelihood at the current `(beta, s)`, maintained across blocks.
    pub log_pl: f64,
}

/// Gibbs blocks in sweep order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepBlock {
    HorseshoeAlphaZ,
    AlphaZ,
    Locations,
    Variances,
    Assignments,
    Concentration,
    HorseshoeBeta,
    Beta,
}

/// Chain driver: owns the likelihood cache and the proposal tuning.
pub struct Sampler<'a> {
    ds: &'a Dataset<f64>,
    cox: ClusteredCox<f64>,
    prior: PriorConfig,
    config: McmcConfig,
    precond: Preconditioner,
    step: f64,
    moves: usize,
    accepted: usize,
    iter: usize,
    /// Blocks executed, in order, when set.
    pub block_log: Option<Vec<SweepBlock>>,
}

const PRECOND_EVERY: usize = 50;

impl<'a> Sampler<'a> {
    pub fn new(ds: &'a Dataset<f64>, config: McmcConfig, prior: PriorConfig) -> Result<Self> {
        config.validate()?;
        prior.validate().map_err(Error::InvalidParameter)?;
        let cox = ClusteredCox::new(ds, DesignSelector::full())?;
        let p = cox.dim();
        let step = config.beta_step
            * match config.beta_sampler {
                BetaSampler::RandomWalk => 2.38 / (p as f64).sqrt(),
                BetaSampler::Langevin => 1.65 / (p as f64).powf(1.0 / 6.0),
            };
        Ok(Self {
            ds,
            cox,
            prior,
            config,
            precond: Preconditioner::identity(p),
            step,
            moves: 0,
            accepted: 0,
            iter: 0,
            block_log: None,
        })
    }

    pub fn cox(&self) -> &ClusteredCox<f64> {
        &self.cox
    }

    pub fn config(&self) -> &McmcConfig {
        &self.config
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Acceptance rate of the `beta` moves so far.
    pub fn acceptance_rate(&self) -> f64 {
        if self.moves == 0 {
            0.0
        } else {
            self.accepted as f64 / self.moves as f64
        }
    }

    /// `beta = 0`, one cluster, exposure model from least squares, `gamma = 1`.
    pub fn initial_state(&self) -> ChainState {
        let ds = self.ds;
        let (dz, dv) = (ds.dim_z(), ds.dim_v());
        let (alpha0, alpha_z, alpha_v, sigma2) = match fit_ols(ds) {
            Ok(f) => {
                let p = f.coefficients.len();
                let ss: f64 = f.residuals.iter().map(|r| r * r).sum();
                let s2 = if ds.n() > p && ss > 0.0 { ss / (ds.n() - p) as f64 } else { 1.0 };
                (f.coefficients[0], f.coefficients[1..1 + dz].to_vec(), f.coefficients[1 + dz..].to_vec(), s2)
            }
            Err(_) => {
                let mean = ds.exposures().iter().sum::<f64>() / ds.n() as f64;
                (mean, vec![0.0; dz], vec![0.0; dv], 1.0)
            }
        };
        let params = ClusterRegressionParams { alpha0, alpha_v, sigma2 };
        let p = self.cox.dim();
        let horseshoe = (self.prior.horseshoe_alpha_z || self.prior.horseshoe_beta).then(|| HorseshoeState::new(dz, p - 1));
        let clusters = ClusterState::single(ds.n(), params);
        let beta = vec![0.0; p];
        let log_pl = self.cox.log_lik(&beta, clusters.assignments());
        ChainState {
            beta,
            alpha_z,
            clusters,
            conc: ConcentrationState::new(1.0, self.prior.a_gamma, self.prior.b_gamma).expect("validated prior"),
            horseshoe,
            shared_sigma2: self.config.homogeneous_sigma.then_some(sigma2),
            log_pl,
        }
    }

    /// [`Self::initial_state`] with the given partition; every cluster starts
    /// from the pooled fit.
    pub fn state_with_partition(&self, labels: Vec<usize>) -> Result<ChainState> {
        if labels.len() != self.ds.n() {
            return Err(Error::DimensionMismatch(format!("{} labels for {} records", labels.len(), self.ds.n())));
        }
        let mut st = self.initial_state();
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let params = vec![st.clusters.params()[0].clone(); k];
        st.clusters = ClusterState::from_assignments(labels, params)?;
        st.log_pl = self.cox.log_lik(&st.beta, st.clusters.assignments());
        Ok(st)
    }

    /// Log posterior used to rank pilot chains, restricted to the terms the
    /// assignment updates target: without the outcome factor the partial
    /// likelihood is left out, under null calibration its value at `beta = 0`
    /// is subtracted.
    pub fn pilot_score(&self, st: &ChainState) -> f64 {
        if !self.config.outcome_in_assignment {
            return self.log_posterior_rest(st);
        }
        let lp = self.tracked_log_posterior(st);
        if self.config.null_calibrated {
            lp - self.cox.log_lik(&vec![0.0; st.beta.len()], st.clusters.assignments())
        } else {
            lp
        }
    }

    fn log(&mut self, b: SweepBlock) {
        if let Some(l) = &mut self.block_log {
            l.push(b);
        }
    }

    pub fn beta_prior(&self, st: &ChainState) -> BetaPrior {
        let p = st.beta.len();
        let mut mean = vec![self.prior.m_beta_x; p];
        let mut precision = vec![1.0 / self.prior.var_beta_x; p];
        mean[0] = self.prior.m_beta_a;
        precision[0] = 1.0 / self.prior.tau2_beta_a;
        if let (true, Some(hs)) = (self.prior.horseshoe_beta, &st.horseshoe) {
            let t2 = self.prior.tau2 * self.prior.tau2;
            for j in 1..p {
                mean[j] = 0.0;
                precision[j] = 1.0 / (hs.psi2[j - 1] * hs.psi2[j - 1] * t2);
            }
        }
        BetaPrior { mean, precision }
    }

    fn alpha_z_prior_var(&self, st: &ChainState) -> Option<Vec<f64>> {
        match (self.prior.horseshoe_alpha_z, &st.horseshoe) {
            (true, Some(hs)) => {
                let t2 = self.prior.tau1 * self.prior.tau1;
                Some(hs.psi1.iter().map(|p| p * p * t2).collect())
            }
            _ => None,
        }
    }

    pub fn update_alpha_z<R: Rng + ?Sized>(&mut self, st: &mut ChainState, rng: &mut R) {
        if self.prior.horseshoe_alpha_z {
            self.log(SweepBlock::HorseshoeAlphaZ);
            if let Some(hs) = &mut st.horseshoe {
                hs.update_alpha_z(&st.alpha_z, self.prior.tau1, rng);
            }
        }
        self.log(SweepBlock::AlphaZ);
        let var = self.alpha_z_prior_var(st);
        st.alpha_z = sample_global_alpha_z(
            self.ds,
            st.clusters.assignments(),
            st.clusters.params(),
            &self.prior,
            var.as_deref(),
            rng,
        );
    }

    pub fn update_locations<R: Rng + ?Sized>(&mut self, st: &mut ChainState, rng: &mut R) {
        self.log(SweepBlock::Locations);
        let members = st.clusters.members();
        for (k, m) in members.iter().enumerate() {
            let sigma2 = st.clusters.params()[k].sigma2;
            let (a0, av) = sample_cluster_location(self.ds, m, &st.alpha_z, sigma2, &self.prior, rng);
            let p = &mut st.clusters.params_mut()[k];
            p.alpha0 = a0;
            p.alpha_v = av;
        }
    }

    pub fn update_variances<R: Rng + ?Sized>(&mut self, st: &mut ChainState, rng: &mut R) {
        self.log(SweepBlock::Variances);
        if st.shared_sigma2.is_some() {
            let s2 = sample_shared_variance(
                self.ds,
                st.clusters.assignments(),
                st.clusters.params(),
                &st.alpha_z,
                &self.prior,
                rng,
            );
            st.shared_sigma2 = Some(s2);
            st.clusters.set_shared_sigma2(s2);
        } else {
            let members = st.clusters.members();
            for (k, m) in members.iter().enumerate() {
                let s2 = sample_cluster_variance(self.ds, m, &st.clusters.params()[k], &st.alpha_z, &self.prior, rng);
                st.clusters.params_mut()[k].sigma2 = s2;
            }
        }
    }

    pub fn update_assignments<R: Rng + ?Sized>(&mut self, st: &mut ChainState, rng: &mut R) {
        self.log(SweepBlock::Assignments);
        let eta = self.cox.linear_predictor(&st.beta);
        let model = AssignmentModel {
            ds: self.ds,
            cox: &self.cox,
            eta: &eta,
            alpha_z: &st.alpha_z,
            prior: &self.prior,
            kind: if self.config.exact_assignment {
                AssignmentKind::ExactClusterLikelihood
            } else {
                AssignmentKind::SubjectFactor
            },
            shared_sigma2: st.shared_sigma2,
            use_outcome: self.config.outcome_in_assignment,
            use_exposure: true,
            null_calibrated: self.config.null_calibrated,
        };
        sweep_assignments(&mut st.clusters, st.conc.gamma, &model, rng);
        debug_assert!(st.clusters.check_invariants().is_ok());
        st.log_pl = self.cox.log_lik(&st.beta, st.clusters.assignments());
    }

    pub fn update_concentration<R: Rng + ?Sized>(&mut self, st: &mut ChainState, rng: &mut R) {
        self.log(SweepBlock::Concentration);
        let mode = if self.config.literal_gamma {
            ConcentrationUpdate::Literal
        } else {
            ConcentrationUpdate::EscobarWest
        };
        st.conc = sample_concentration(st.conc, st.clusters.k(), st.clusters.n(), mode, rng);
    }

    pub fn update_beta<R: Rng + ?Sized>(&mut self, st: &mut ChainState, rng: &mut R) {
        if self.prior.horseshoe_beta {
            self.log(SweepBlock::HorseshoeBeta);
            if let Some(hs) = &mut st.horseshoe {
                hs.update_beta(&st.beta[1..], self.prior.tau2, rng);
            }
        }
        self.log(SweepBlock::Beta);
        let prior = self.beta_prior(st);
        let adapting = self.iter < self.config.burn_in;
        if adapting && self.iter % PRECOND_EVERY == 0 {
            if let Some(pc) = Preconditioner::from_curvature(&self.cox, st.clusters.assignments(), &st.beta, &prior) {
                self.precond = pc;
            }
        }
        let target = self.config.beta_sampler.target_acceptance();
        for _ in 0..self.config.beta_moves_per_sweep {
            let mv = sample_beta(
                &self.cox,
                st.clusters.assignments(),
                &st.beta,
                &prior,
                &self.precond,
                self.step,
                self.config.beta_sampler,
                rng,
            );
            self.moves += 1;
            if mv.accepted {
                self.accepted += 1;
                st.beta = mv.beta;
            }
            st.log_pl = mv.log_lik;
            if adapting {
                let rate = 1.0 / (self.moves as f64).powf(0.6);
                self.step *= (rate * (mv.accept_prob - target)).exp();
            }
        }
    }

    /// One full sweep: `alpha_z`, cluster locations, variances, assignments,
    /// `gamma`, then `beta`.
    pub fn gibbs_sweep<R: Rng + ?Sized>(&mut self, st: &mut ChainState, rng: &mut R) {
        self.update_alpha_z(st, rng);
        self.update_locations(st, rng);
        self.update_variances(st, rng);
        self.update_assignments(st, rng);
        self.update_concentration(st, rng);
        self.update_beta(st, rng);
        self.iter += 1;
    }

    /// Log general posterior recomputed from scratch: partial likelihood,
    /// exposure densities, every prior (horseshoe local scales excluded) and
    /// the CRP partition probability.
    pub fn log_posterior(&self, st: &ChainState) -> f64 {
        let pl = self.cox.log_lik(&st.beta, st.clusters.assignments());
        pl + self.log_posterior_rest(st)
    }

    fn log_posterior_rest(&self, st: &ChainState) -> f64 {
        let pr = &self.prior;
        let mut lp = self.beta_prior(st).log_density(&st.beta);
        let params = st.clusters.params();
        for (r, &k) in self.ds.records().iter().zip(st.clusters.assignments()) {
            lp += exposure_log_density(r, &params[k], &st.alpha_z);
        }
        match self.alpha_z_prior_var(st) {
            Some(v) => lp += st.alpha_z.iter().zip(&v).map(|(a, s)| normal_log_density(*a, 0.0, *s)).sum::<f64>(),
            None => {
                lp += st.alpha_z.iter().map(|a| normal_log_density(*a, pr.m_alpha_z, pr.var_alpha_z)).sum::<f64>()
            }
        }
        for p in params {
            lp += normal_log_density(p.alpha0, pr.m_alpha0, pr.tau2_alpha0);
            lp += p.alpha_v.iter().map(|a| normal_log_density(*a, pr.m_alpha_v, pr.var_alpha_v)).sum::<f64>();
            if st.shared_sigma2.is_none() {
                lp += log_inv_gamma(p.sigma2, pr.a_sigma, pr.b_sigma);
            }
        }
        if let Some(s2) = st.shared_sigma2 {
            lp += log_inv_gamma(s2, pr.a_sigma, pr.b_sigma);
        }
        let g = st.conc.gamma;
        lp += crp_log_prob(st.clusters.sizes(), g);
        lp += pr.a_gamma * pr.b_gamma.ln() - ln_gamma(pr.a_gamma) + (pr.a_gamma - 1.0) * g.ln() - pr.b_gamma * g;
        lp
    }

    /// Log general posterior using the tracked partial likelihood.
    pub fn tracked_log_posterior(&self, st: &ChainState) -> f64 {
        st.log_pl + self.log_posterior_rest(st)
    }
}

fn log_inv_gamma(x: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

/// One retained iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawRow {
    pub iter: usize,
    pub beta: Vec<f64>,
    pub alpha_z: Vec<f64>,
    pub gamma: f64,
    pub k_n: usize,
    pub sigma2_mean: f64,
    pub logpost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub beta_names: Vec<String>,
    pub rows: Vec<DrawRow>,
    pub config: McmcConfig,
    pub dataset_hash: String,
    /// Acceptance rate of the `beta` moves after burn-in.
    pub beta_acceptance: f64,
}

impl PosteriorDraws {
    pub fn beta_a(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.beta[0]).collect()
    }

    /// Writes `iter,beta_a,beta_x_1..,alpha_z_1..,gamma,K_n,logpost`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let (p, dz) = self.rows.first().map_or((self.beta_names.len(), 0), |r| (r.beta.len(), r.alpha_z.len()));
        let mut header = vec!["iter".to_string(), "beta_a".to_string()];
        header.extend((1..p).map(|j| format!("beta_x_{j}")));
        header.extend((1..=dz).map(|j| format!("alpha_z_{j}")));
        header.extend(["gamma", "K_n", "logpost"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.iter.to_string()];
            rec.extend(r.beta.iter().map(|x| x.to_string()));
            rec.extend(r.alpha_z.iter().map(|x| x.to_string()));
            rec.push(r.gamma.to_string());
            rec.push(r.k_n.to_string());
            rec.push(r.logpost.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Summaries of every `beta` coordinate, in design order.
    pub fn beta_summaries(&self, level: f64) -> Result<Vec<(String, PosteriorSummary)>> {
        (0..self.beta_names.len())
            .map(|j| {
                let v: Vec<f64> = self.rows.iter().map(|r| r.beta[j]).collect();
                Ok((self.beta_names[j].clone(), posterior_summary(&v, level)?))
            })
            .collect()
    }
}

/// Hex SHA-256 of the dataset's CSV serialization.
pub fn dataset_hash(ds: &Dataset<f64>) -> String {
    let mut buf = Vec::new();
    write_dataset_csv(ds, &mut buf).expect("writing to memory");
    Sha256::digest(&buf).iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs one chain from the default initial state, calling `observe` after
/// every sweep (burn-in included).
pub fn run_chain_with<F>(ds: &Dataset<f64>, config: &McmcConfig, prior: &PriorConfig, mut observe: F) -> Result<PosteriorDraws>
where
    F: FnMut(usize, &ChainState),
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut st = match config.init {
        InitStrategy::SingleCluster => Sampler::new(ds, config.clone(), prior.clone())?.initial_state(),
        InitStrategy::PilotSelect => pilot_initial_state(ds, config, prior, &mut rng)?,
    };
    let mut sampler = Sampler::new(ds, config.clone(), prior.clone())?;
    let mut rows = Vec::with_capacity(config.retained());
    let (mut moves0, mut acc0) = (0, 0);
    for it in 1..=config.total_iters {
        sampler.gibbs_sweep(&mut st, &mut rng);
        observe(it, &st);
        if it == config.burn_in {
            moves0 = sampler.moves;
            acc0 = sampler.accepted;
        }
        if it > config.burn_in && (it - config.burn_in) % config.thin == 0 {
            let params = st.clusters.params();
            rows.push(DrawRow {
                iter: it,
                beta: st.beta.clone(),
                alpha_z: st.alpha_z.clone(),
                gamma: st.conc.gamma,
                k_n: st.clusters.k(),
                sigma2_mean: params.iter().map(|p| p.sigma2).sum::<f64>() / params.len() as f64,
                logpost: sampler.tracked_log_posterior(&st),
            });
        }
    }
    let kept_moves = sampler.moves - moves0;
    Ok(PosteriorDraws {
        beta_names: sampler.cox.design().names().to_vec(),
        rows,
        config: config.clone(),
        dataset_hash: dataset_hash(ds),
        beta_acceptance: if kept_moves == 0 { 0.0 } else { (sampler.accepted - acc0) as f64 / kept_moves as f64 },
    })
}

/// Equal-count groups by rank of `values`.
pub fn quantile_groups(values: &[f64], groups: usize) -> Vec<usize> {
    let n = values.len();
    let g = groups.clamp(1, n.max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut labels = vec![0; n];
    for (rank, &i) in idx.iter().enumerate() {
        labels[i] = rank * g / n;
    }
    labels
}

/// Residuals of the exposure on `(1, z)` and, with `with_v`, on `(1, z, v)`.
fn first_stage_residuals(ds: &Dataset<f64>, with_v: bool) -> Option<Vec<f64>> {
    let n = ds.n();
    let p = 1 + ds.dim_z() + if with_v { ds.dim_v() } else { 0 };
    let x = DMatrix::from_fn(n, p, |i, j| {
        let r = ds.record(i);
        match j {
            0 => 1.0,
            j if j <= ds.dim_z() => r.z[j - 1],
            j => r.v[j - 1 - ds.dim_z()],
        }
    });
    let y = DVector::from_iterator(n, ds.records().iter().map(|r| r.exposure));
    let coef = crate::baselines::ols(&x, &y).ok()?;
    Some((&y - &x * &coef).iter().copied().collect())
}

/// Runs a short chain from each candidate partition and returns the final
/// state of the best one.
pub fn pilot_initial_state<R: Rng + ?Sized>(
    ds: &Dataset<f64>,
    config: &McmcConfig,
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<ChainState> {
    let mut candidates = vec![vec![0; ds.n()]];
    for with_v in [true, false] {
        if let Some(res) = first_stage_residuals(ds, with_v) {
            for g in PILOT_GROUPS {
                if g < ds.n() {
                    candidates.push(quantile_groups(&res, g));
                }
            }
        }
    }
    let mut best: Option<(f64, ChainState)> = None;
    for labels in candidates {
        let mut sampler = Sampler::new(ds, config.clone(), prior.clone())?;
        let mut st = sampler.state_with_partition(labels)?;
        let (mut sum, mut count) = (0.0, 0usize);
        for it in 0..config.pilot_sweeps {
            sampler.gibbs_sweep(&mut st, rng);
            if it >= config.pilot_sweeps / 2 {
                sum += sampler.pilot_score(&st);
                count += 1;
            }
        }
        let score = sum / count as f64;
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, st));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

pub fn run_chain(ds: &Dataset<f64>, config: &McmcConfig, prior: &PriorConfig) -> Result<PosteriorDraws> {
    run_chain_with(ds, config, prior, |_, _| {})
}

/// Posterior mean, SD and equal-tailed interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSummary {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolation quantile of sorted data (`(N - 1) p` rule).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn posterior_summary(draws: &[f64], level: f64) -> Result<PosteriorSummary> {
    if draws.is_empty() {
        return Err(Error::Empty("posterior draws"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must lie in (0, 1), got {level}")));
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = if draws.len() > 1 {
        (draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Ok(PosteriorSummary { mean, sd, lo: quantile_sorted(&sorted, tail), hi: quantile_sorted(&sorted, 1.0 - tail) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        assert!(McmcConfig::default().validate().is_ok());
        assert_eq!(McmcConfig::default().retained(), 1000);
        let bad = McmcConfig { burn_in: 1200, ..Default::default() };
        assert_eq!(bad.validate().unwrap_err().to_string(), "invalid parameter: burn_in < total_iters violated");
        assert!(McmcConfig { thin: 0, ..Default::default() }.validate().is_err());
        assert!(McmcConfig { beta_step: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn summary_examples() {
        let s = posterior_summary(&[2.5; 10], 0.95).unwrap();
        assert_eq!((s.mean, s.sd, s.lo, s.hi), (2.5, 0.0, 2.5, 2.5));
        let v: Vec<f64> = (1..=1000).map(|i| i as f64 / 1000.0).collect();
        let s = posterior_summary(&v, 0.95).unwrap();
        assert!((s.lo - 0.025).abs() < 2e-3 && (s.hi - 0.975).abs() < 2e-3);
        assert!(posterior_summary(&[], 0.95).is_err());
        assert!(posterior_summary(&[1.0], 1.0).is_err());
    }

    #[test]
    fn inverse_gamma_log_density_integrates() {
        let (a, b) = (2.0, 3.0);
        let h = 1e-3;
        let total: f64 = (1..200_000).map(|i| log_inv_gamma(i as f64 * h, a, b).exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-3);
    }
}
