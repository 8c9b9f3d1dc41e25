//! Reference estimators: naive Cox, infeasible Cox (true `U` known), two-stage
//! least squares and two-stage residual inclusion.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{ClusteredCox, Dataset, DesignMatrix, DesignSelector};

const MAX_NEWTON: usize = 50;
const GRAD_TOL: f64 = 1e-8;

/// Coefficients, model-based standard errors and Wald intervals; the
/// exposure effect is always the first entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub names: Vec<String>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_level: f64,
    pub ci: Vec<(f64, f64)>,
    pub converged: bool,
    pub iterations: usize,
    /// Maximized (penalized) partial log-likelihood.
    pub log_lik: f64,
}

impl FitResult {
    fn new(names: Vec<String>, estimate: Vec<f64>, cov: &DMatrix<f64>, level: f64, converged: bool, iterations: usize, log_lik: f64) -> Self {
        let z = wald_quantile(level);
        let se: Vec<f64> = (0..estimate.len()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
        let ci = estimate.iter().zip(&se).map(|(&b, &s)| (b - z * s, b + z * s)).collect();
        Self { names, estimate, se, ci_level: level, ci, converged, iterations, log_lik }
    }

    pub fn beta_a(&self) -> f64 {
        self.estimate[0]
    }

    pub fn se_a(&self) -> f64 {
        self.se[0]
    }

    pub fn ci_a(&self) -> (f64, f64) {
        self.ci[0]
    }
}

/// Two-sided standard-normal critical value for a `level` interval.
pub fn wald_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + 0.5 * level)
}

/// How the infeasible estimator adjusts for the true class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterAdjustment {
    /// Separate baseline hazard per class.
    #[default]
    Strata,
    /// Indicator covariates for all but the first class.
    Dummies,
}

/// Frailty term for the residual-inclusion estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Frailty {
    None,
    /// Subject-level normal random effect on the log hazard.
    #[default]
    LogNormal,
}

struct NewtonFit {
    beta: Vec<f64>,
    neg_hessian: DMatrix<f64>,
    log_lik: f64,
    iterations: usize,
    converged: bool,
    /// Objective after every accepted step, starting value first.
    #[cfg_attr(not(test), allow(dead_code))]
    path: Vec<f64>,
}

fn to_matrix(h: &[f64], p: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(p, p, h)
}

/// Solves `M x = g` for symmetric positive definite `M`, falling back to LU
/// and then to a ridge when the matrix is numerically singular.
fn spd_solve(m: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.solve(g));
    }
    if let Some(x) = m.clone().lu().solve(g) {
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let scale = m.diagonal().iter().fold(0.0_f64, |a, &b| a.max(b.abs())).max(1.0);
    let ridge = m + DMatrix::identity(m.nrows(), m.ncols()) * (1e-8 * scale);
    ridge.cholesky().map(|ch| ch.solve(g))
}

fn spd_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.clone().try_inverse())
        .unwrap_or_else(|| DMatrix::from_element(m.nrows(), m.ncols(), f64::NAN))
}

/// Newton-Raphson with step-halving on the (stratified) partial likelihood.
fn newton_cox(cox: &ClusteredCox<f64>, strata: &[usize], start: Vec<f64>) -> NewtonFit {
    let p = cox.dim();
    let mut beta = start;
    let mut eval = cox.log_lik_hessian(&beta, strata);
    let mut iterations = 0;
    let mut converged = false;
    let mut path = vec![eval.value];
    while iterations < MAX_NEWTON {
        let gmax = eval.gradient.iter().fold(0.0_f64, |a, &g| a.max(g.abs()));
        if gmax < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let neg_h = -to_matrix(&eval.hessian, p);
        let g = DVector::from_column_slice(&eval.gradient);
        let Some(step) = spd_solve(&neg_h, &g) else { break };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, d)| b + t * d).collect();
            let val = cox.log_lik(&trial, strata);
            if val.is_finite() && val >= eval.value {
                beta = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        eval = cox.log_lik_hessian(&beta, strata);
        path.push(eval.value);
    }
    if !converged {
        converged = eval.gradient.iter().all(|g| g.abs() < GRAD_TOL);
    }
    NewtonFit { neg_hessian: -to_matrix(&eval.hessian, p), beta, log_lik: eval.value, iterations, converged, path }
}

fn check_identifiable(design: &DesignMatrix<f64>) -> Result<()> {
    match design.constant_columns().first() {
        Some(&j) => Err(Error::NonIdentifiable(design.names()[j].clone())),
        None => Ok(()),
    }
}

fn cox_fit_with_strata(cox: &ClusteredCox<f64>, strata: &[usize], level: f64) -> Result<FitResult> {
    check_identifiable(cox.design())?;
    let fit = newton_cox(cox, strata, vec![0.0; cox.dim()]);
    let cov = spd_inverse(&fit.neg_hessian);
    Ok(FitResult::new(cox.design().names().to_vec(), fit.beta, &cov, level, fit.converged, fit.iterations, fit.log_lik))
}

/// Maximum partial-likelihood Cox fit on the selected columns.
pub fn fit_cox_mle(ds: &Dataset<f64>, sel: DesignSelector, level: f64) -> Result<FitResult> {
    let cox = ClusteredCox::new(ds, sel)?;
    cox_fit_with_strata(&cox, &vec![0; ds.n()], level)
}

/// Cox fit with a separate baseline hazard for every stratum label.
pub fn fit_stratified_cox(ds: &Dataset<f64>, sel: DesignSelector, strata: &[usize], level: f64) -> Result<FitResult> {
    if strata.len() != ds.n() {
        return Err(Error::DimensionMismatch(format!("{} strata labels for {} records", strata.len(), ds.n())));
    }
    let cox = ClusteredCox::new(ds, sel)?;
    cox_fit_with_strata(&cox, strata, level)
}

/// Cox fit on `(A, v)`, ignoring the unmeasured confounder.
pub fn fit_naive(ds: &Dataset<f64>, level: f64) -> Result<FitResult> {
    fit_cox_mle(ds, DesignSelector::exposure_and_v(), level)
}

/// Cox fit on `(A, v)` that also adjusts for the true class.
pub fn fit_infeasible(ds: &Dataset<f64>, adjust: ClusterAdjustment, level: f64) -> Result<FitResult> {
    let truth = ds.true_clusters().ok_or_else(|| Error::InvalidParameter("infeasible fit needs true_cluster".into()))?;
    match adjust {
        ClusterAdjustment::Dummies => fit_cox_mle(ds, DesignSelector::exposure_and_v().with_true_cluster_dummies(), level),
        ClusterAdjustment::Strata => {
            let cox = ClusteredCox::new(ds, DesignSelector::exposure_and_v())?;
            let strata: Vec<usize> = truth.iter().map(|&u| u as usize).collect();
            cox_fit_with_strata(&cox, &strata, level)
        }
    }
}

/// Least-squares exposure model on `(1, z, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Least squares via Householder QR, with a rank check on `R`.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if n < p {
        return Err(Error::RankDeficient);
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let rmax = r.diagonal().iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    if rmax == 0.0 || r.diagonal().iter().any(|d| d.abs() <= 1e-10 * rmax) {
        return Err(Error::RankDeficient);
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty).ok_or(Error::RankDeficient)
}

pub fn fit_ols(ds: &Dataset<f64>) -> Result<OlsFit> {
    let n = ds.n();
    let p = 1 + ds.dim_z() + ds.dim_v();
    let x = DMatrix::from_fn(n, p, |i, j| {
        let r = ds.record(i);
        match j {
            0 => 1.0,
            j if j <= ds.dim_z() => r.z[j - 1],
            j => r.v[j - 1 - ds.dim_z()],
        }
    });
    let y = DVector::from_iterator(n, ds.records().iter().map(|r| r.exposure));
    let coef = ols(&x, &y)?;
    let fitted = &x * &coef;
    let residuals = (&y - &fitted).iter().copied().collect();
    Ok(OlsFit { coefficients: coef.iter().copied().collect(), fitted: fitted.iter().copied().collect(), residuals })
}

/// Cox fit on `(A_hat, v)` with `A_hat` from the first stage; standard errors
/// are the second-stage model-based ones.
pub fn fit_2sls(ds: &Dataset<f64>, level: f64) -> Result<FitResult> {
    let first = fit_ols(ds)?;
    fit_naive(&ds.with_exposure(&first.fitted)?, level)
}

/// Cox fit on `(A, v, first-stage residual)`, optionally with a subject-level
/// log-normal frailty. A residual column with no variation is dropped.
pub fn fit_2sri(ds: &Dataset<f64>, frailty: Frailty, level: f64) -> Result<FitResult> {
    let first = fit_ols(ds)?;
    let r0 = first.residuals[0];
    let flat = first.residuals.iter().all(|&r| (r - r0).abs() <= 1e-12 * (1.0 + r0.abs()));
    let aug = if flat { ds.clone() } else { ds.with_extra_v(&first.residuals)? };
    let cox = ClusteredCox::new(&aug, DesignSelector::exposure_and_v())?;
    let mut fit = match frailty {
        Frailty::None => cox_fit_with_strata(&cox, &vec![0; ds.n()], level)?,
        Frailty::LogNormal => {
            check_identifiable(cox.design())?;
            fit_lognormal_frailty(&cox, level)
        }
    };
    if let Some(last) = fit.names.last_mut().filter(|_| !flat) {
        *last = "residual".into();
    }
    Ok(fit)
}

/// Penalized partial-likelihood quantities for `eta = X beta + b` with
/// penalty `sum b^2 / (2 theta)`. The frailty block of the Hessian is kept
/// diagonal.
struct FrailtyEval {
    value: f64,
    grad_beta: DVector<f64>,
    grad_b: DVector<f64>,
    /// `-d2/dbeta2`.
    info_bb: DMatrix<f64>,
    /// `-d2/dbeta db_i`, one column per subject.
    info_cross: DMatrix<f64>,
    /// Diagonal of `-d2/db2`, penalty included.
    info_diag: DVector<f64>,
}

fn frailty_eval(cox: &ClusteredCox<f64>, beta: &[f64], b: &[f64], theta: f64) -> FrailtyEval {
    let n = cox.n();
    let p = cox.dim();
    let x = cox.design();
    let times = cox.times();
    let events = cox.events();
    let order = cox.order_desc();
    let eta: Vec<f64> = cox.linear_predictor(beta).iter().zip(b).map(|(e, bi)| e + bi).collect();
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = eta.iter().map(|e| (e - m).exp()).collect();

    // Descending pass: risk sums at each distinct time.
    struct Block {
        start: usize,
        end: usize,
        d: f64,
        s0: f64,
        s1: Vec<f64>,
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = DMatrix::<f64>::zeros(p, p);
    let mut value = 0.0;
    let mut grad_beta = DVector::zeros(p);
    let mut info_bb = DMatrix::zeros(p, p);
    let mut start = 0;
    while start < n {
        let t = times[order[start]];
        let mut end = start;
        while end < n && times[order[end]] == t {
            let i = order[end];
            s0 += w[i];
            let xi = x.row(i);
            for a in 0..p {
                s1[a] += w[i] * xi[a];
                for c in 0..p {
                    s2[(a, c)] += w[i] * xi[a] * xi[c];
                }
            }
            end += 1;
        }
        let mut d = 0.0;
        for &i in &order[start..end] {
            if events[i] {
                d += 1.0;
                value += eta[i];
                for a in 0..p {
                    grad_beta[a] += x.row(i)[a];
                }
            }
        }
        if d > 0.0 {
            value -= d * (m + s0.ln());
            for a in 0..p {
                grad_beta[a] -= d * s1[a] / s0;
                for c in 0..p {
                    info_bb[(a, c)] += d * (s2[(a, c)] / s0 - s1[a] * s1[c] / (s0 * s0));
                }
            }
        }
        blocks.push(Block { start, end, d, s0, s1: s1.clone() });
        start = end;
    }

    // Ascending pass: cumulative hazard pieces up to each subject's time.
    let mut grad_b = DVector::zeros(n);
    let mut info_cross = DMatrix::zeros(p, n);
    let mut info_diag = DVector::zeros(n);
    let mut h0 = 0.0;
    let mut c2 = 0.0;
    let mut g = vec![0.0; p];
    for blk in blocks.iter().rev() {
        if blk.d > 0.0 {
            h0 += blk.d / blk.s0;
            c2 += blk.d / (blk.s0 * blk.s0);
            for a in 0..p {
                g[a] += blk.d * blk.s1[a] / (blk.s0 * blk.s0);
            }
        }
        for &i in &order[blk.start..blk.end] {
            let delta = if events[i] { 1.0 } else { 0.0 };
            grad_b[i] = delta - w[i] * h0 - b[i] / theta;
            info_diag[i] = w[i] * h0 - w[i] * w[i] * c2 + 1.0 / theta;
            let xi = x.row(i);
            for a in 0..p {
                info_cross[(a, i)] = w[i] * (xi[a] * h0 - g[a]);
            }
        }
    }
    value -= b.iter().map(|bi| bi * bi).sum::<f64>() / (2.0 * theta);
    FrailtyEval { value, grad_beta, grad_b, info_bb, info_cross, info_diag }
}

/// Schur complement `I_bb - C D^-1 C^T` of the frailty block.
fn schur(ev: &FrailtyEval) -> DMatrix<f64> {
    let mut s = ev.info_bb.clone();
    let p = s.nrows();
    for i in 0..ev.info_diag.len() {
        let di = ev.info_diag[i];
        for a in 0..p {
            for c in 0..p {
                s[(a, c)] -= ev.info_cross[(a, i)] * ev.info_cross[(c, i)] / di;
            }
        }
    }
    s
}

/// Newton steps on `(beta, b)` for fixed `theta`, eliminating `b` through
/// its diagonal block.
fn frailty_inner(cox: &ClusteredCox<f64>, beta: &mut Vec<f64>, b: &mut Vec<f64>, theta: f64) -> (usize, bool) {
    let p = cox.dim();
    let n = cox.n();
    for it in 0..MAX_NEWTON {
        let ev = frailty_eval(cox, beta, b, theta);
        let gmax = ev.grad_beta.iter().chain(ev.grad_b.iter()).fold(0.0_f64, |a, &g| a.max(g.abs()));
        if gmax < 1e-7 {
            return (it, true);
        }
        let s = schur(&ev);
        let mut rhs = ev.grad_beta.clone();
        for i in 0..n {
            let r = ev.grad_b[i] / ev.info_diag[i];
            for a in 0..p {
                rhs[a] -= ev.info_cross[(a, i)] * r;
            }
        }
        let Some(dbeta) = spd_solve(&s, &rhs) else { return (it, false) };
        let db: Vec<f64> = (0..n)
            .map(|i| {
                let cross: f64 = (0..p).map(|a| ev.info_cross[(a, i)] * dbeta[a]).sum();
                (ev.grad_b[i] - cross) / ev.info_diag[i]
            })
            .collect();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let tb: Vec<f64> = beta.iter().zip(dbeta.iter()).map(|(x, d)| x + t * d).collect();
            let tbb: Vec<f64> = b.iter().zip(&db).map(|(x, d)| x + t * d).collect();
            let val = frailty_eval(cox, &tb, &tbb, theta).value;
            if val.is_finite() && val >= ev.value - 1e-12 * ev.value.abs() {
                *beta = tb;
                *b = tbb;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return (it + 1, gmax < 1e-5);
        }
    }
    (MAX_NEWTON, false)
}

/// Inner fit at fixed `theta` (warm-started) and the updated variance
/// `(sum b^2 + tr Var(b)) / n`.
fn frailty_update(cox: &ClusteredCox<f64>, beta: &mut Vec<f64>, b: &mut Vec<f64>, theta: f64) -> (f64, usize, bool) {
    let n = cox.n();
    let (it, ok) = frailty_inner(cox, beta, b, theta);
    let ev = frailty_eval(cox, beta, b, theta);
    let s_inv = spd_inverse(&schur(&ev));
    // trace of the frailty block of the inverse information
    let mut tr = 0.0;
    for i in 0..n {
        let di = ev.info_diag[i];
        let ci = ev.info_cross.column(i);
        let quad = (ci.transpose() * &s_inv * ci)[(0, 0)];
        tr += 1.0 / di + quad / (di * di);
    }
    ((b.iter().map(|x| x * x).sum::<f64>() + tr) / n as f64, it, ok)
}

const THETA_MIN: f64 = 1e-6;
const THETA_MAX: f64 = 100.0;

/// Penalized partial likelihood with the frailty variance at the stable root
/// of `theta = (sum b^2 + tr Var(b)) / n`, found by bracketing from
/// `theta = 1` and bisecting on `log theta`. When the map stays below the
/// identity the variance sits at its lower bound.
fn fit_lognormal_frailty(cox: &ClusteredCox<f64>, level: f64) -> FitResult {
    let n = cox.n();
    let p = cox.dim();
    let start = newton_cox(cox, &vec![0; n], vec![0.0; p]);
    let mut beta = start.beta;
    let mut b = vec![0.0; n];
    let mut iterations = 0;
    // probes far from the root may hit the iteration cap; only the final fit counts
    let mut excess = |theta: f64, beta: &mut Vec<f64>, b: &mut Vec<f64>| {
        let (next, it, _) = frailty_update(cox, beta, b, theta);
        iterations += it;
        next - theta
    };

    let mut theta = 1.0_f64;
    let (mut lo, mut hi) = (theta, theta);
    let mut bracketed = false;
    if excess(theta, &mut beta, &mut b) > 0.0 {
        while hi < THETA_MAX {
            lo = hi;
            hi = (hi * 4.0).min(THETA_MAX);
            if excess(hi, &mut beta, &mut b) <= 0.0 {
                bracketed = true;
                break;
            }
        }
        if !bracketed {
            theta = THETA_MAX;
        }
    } else {
        while lo > THETA_MIN {
            hi = lo;
            lo = (lo / 4.0).max(THETA_MIN);
            if excess(lo, &mut beta, &mut b) > 0.0 {
                bracketed = true;
                break;
            }
        }
        if !bracketed {
            theta = THETA_MIN;
        }
    }
    if bracketed {
        for _ in 0..40 {
            let mid = (lo * hi).sqrt();
            if excess(mid, &mut beta, &mut b) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi / lo < 1.0 + 1e-4 {
                break;
            }
        }
        theta = (lo * hi).sqrt();
    }
    let (_, it, ok) = frailty_update(cox, &mut beta, &mut b, theta);
    let ev = frailty_eval(cox, &beta, &b, theta);
    let cov = spd_inverse(&schur(&ev));
    FitResult::new(cox.design().names().to_vec(), beta, &cov, level, ok, iterations + it, ev.value)
}

/// Writes `method,param,estimate,se,lo,hi,converged` rows.
pub fn write_fit_results_csv<W: Write>(out: W, fits: &[(&str, &FitResult)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "param", "estimate", "se", "lo", "hi", "converged"])?;
    for (method, fit) in fits {
        for j in 0..fit.estimate.len() {
            w.write_record([
                method.to_string(),
                fit.names[j].clone(),
                fit.estimate[j].to_string(),
                fit.se[j].to_string(),
                fit.ci[j].0.to_string(),
                fit.ci[j].1.to_string(),
                fit.converged.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
