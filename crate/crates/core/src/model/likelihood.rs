//! Clustered Cox partial likelihood with Breslow handling of tied times.
//!
//! Every risk-set denominator is accumulated as a streaming log-sum-exp, so
//! the value stays finite for any finite linear predictor.

use crate::error::{Error, Result};
use crate::model::{Dataset, DesignMatrix, DesignSelector, OutcomeCoefficients};
use crate::scalar::{LogSumExp, Scalar};

/// Partial log-likelihood value with optional first and second derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxEval<F> {
    pub value: F,
    pub gradient: Vec<F>,
    /// Row-major `p x p` Hessian; empty unless requested.
    pub hessian: Vec<F>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Order {
    Value,
    Gradient,
    Hessian,
}

/// Precomputed time ordering and design for repeated evaluation of the
/// clustered partial likelihood under changing coefficients and assignments.
#[derive(Debug, Clone)]
pub struct ClusteredCox<F> {
    design: DesignMatrix<F>,
    times: Vec<F>,
    events: Vec<bool>,
    /// Subject indices by decreasing time.
    order: Vec<usize>,
    /// Boundaries of equal-time blocks within `order`.
    blocks: Vec<(usize, usize)>,
}

impl<F: Scalar> ClusteredCox<F> {
    pub fn new(ds: &Dataset<F>, sel: DesignSelector) -> Result<Self> {
        Ok(Self::from_design(DesignMatrix::build(ds, sel)?, ds.times(), ds.events()))
    }

    pub fn from_design(design: DesignMatrix<F>, times: Vec<F>, events: Vec<bool>) -> Self {
        assert_eq!(design.rows(), times.len());
        assert_eq!(times.len(), events.len());
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[b].partial_cmp(&times[a]).expect("finite times").then(a.cmp(&b)));
        let mut blocks = Vec::new();
        let mut start = 0;
        for pos in 1..=order.len() {
            if pos == order.len() || times[order[pos]] != times[order[start]] {
                blocks.push((start, pos));
                start = pos;
            }
        }
        Self { design, times, events, order, blocks }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.design.cols()
    }

    pub fn design(&self) -> &DesignMatrix<F> {
        &self.design
    }

    pub fn times(&self) -> &[F] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    /// Subjects sorted by decreasing follow-up time.
    pub fn order_desc(&self) -> &[usize] {
        &self.order
    }

    pub fn linear_predictor(&self, beta: &[F]) -> Vec<F> {
        self.design.linear_predictor(beta)
    }

    pub fn log_lik(&self, beta: &[F], assignments: &[usize]) -> F {
        self.eval(beta, assignments, Order::Value).value
    }

    pub fn log_lik_grad(&self, beta: &[F], assignments: &[usize]) -> CoxEval<F> {
        self.eval(beta, assignments, Order::Gradient)
    }

    pub fn log_lik_hessian(&self, beta: &[F], assignments: &[usize]) -> CoxEval<F> {
        self.eval(beta, assignments, Order::Hessian)
    }

    /// Single-cluster (classical Cox) partial log-likelihood.
    pub fn log_lik_pooled(&self, beta: &[F]) -> F {
        self.log_lik(beta, &vec![0; self.n()])
    }

    fn eval(&self, beta: &[F], s: &[usize], order: Order) -> CoxEval<F> {
        assert_eq!(s.len(), self.n(), "one assignment per subject");
        let p = self.dim();
        let eta = self.linear_predictor(beta);
        let n_labels = s.iter().copied().max().map_or(0, |m| m + 1);

        let mut acc = vec![LogSumExp::<F>::new(); n_labels];
        let want_grad = order >= Order::Gradient;
        let want_hess = order >= Order::Hessian;
        let mut s1 = if want_grad { vec![F::zero(); n_labels * p] } else { Vec::new() };
        let mut s2 = if want_hess { vec![F::zero(); n_labels * p * p] } else { Vec::new() };

        let mut value = F::zero();
        let mut grad = if want_grad { vec![F::zero(); p] } else { Vec::new() };
        let mut hess = if want_hess { vec![F::zero(); p * p] } else { Vec::new() };
        let mut xbar = vec![F::zero(); p];

        for &(lo, hi) in &self.blocks {
            for &j in &self.order[lo..hi] {
                let k = s[j];
                let scale = acc[k].push(eta[j]);
                if !want_grad {
                    continue;
                }
                let w = acc[k].weight(eta[j]);
                let x = self.design.row(j);
                let s1k = &mut s1[k * p..(k + 1) * p];
                for (a, &xa) in s1k.iter_mut().zip(x) {
                    *a = *a * scale + w * xa;
                }
                if want_hess {
                    let s2k = &mut s2[k * p * p..(k + 1) * p * p];
                    for a in 0..p {
                        for b in 0..p {
                            let c = &mut s2k[a * p + b];
                            *c = *c * scale + w * x[a] * x[b];
                        }
                    }
                }
            }
            for &i in &self.order[lo..hi] {
                if !self.events[i] {
                    continue;
                }
                let k = s[i];
                value += eta[i] - acc[k].value();
                if !want_grad {
                    continue;
                }
                let s0 = acc[k].scaled_sum();
                let x = self.design.row(i);
                for a in 0..p {
                    xbar[a] = s1[k * p + a] / s0;
                    grad[a] += x[a] - xbar[a];
                }
                if want_hess {
                    for a in 0..p {
                        for b in 0..p {
                            hess[a * p + b] -= s2[k * p * p + a * p + b] / s0 - xbar[a] * xbar[b];
                        }
                    }
                }
            }
        }
        CoxEval { value, gradient: grad, hessian: hess }
    }

    /// Log partial-likelihood factor of subject `i` if it were placed in
    /// cluster `k`, all other assignments held fixed. Zero for censored
    /// subjects and for a cluster with no other members at risk.
    pub fn subject_term(&self, eta: &[F], s: &[usize], i: usize, k: usize) -> F {
        if !self.events[i] {
            return F::zero();
        }
        let ti = self.times[i];
        let mut acc = LogSumExp::new();
        acc.push(eta[i]);
        for (l, (&sl, &tl)) in s.iter().zip(&self.times).enumerate() {
            if l != i && sl == k && tl >= ti {
                acc.push(eta[l]);
            }
        }
        eta[i] - acc.value()
    }

    /// Partial log-likelihood of one cluster given its members.
    /// `members` must be sorted by decreasing time (any order of ties).
    pub fn members_log_lik(&self, eta: &[F], members: &[usize]) -> F {
        let mut acc = LogSumExp::new();
        let mut value = F::zero();
        let mut pos = 0;
        while pos < members.len() {
            let t = self.times[members[pos]];
            let mut end = pos;
            while end < members.len() && self.times[members[end]] == t {
                acc.push(eta[members[end]]);
                end += 1;
            }
            for &i in &members[pos..end] {
                if self.events[i] {
                    value += eta[i] - acc.value();
                }
            }
            pos = end;
        }
        value
    }
}

fn coef_vec<F: Scalar>(beta: &OutcomeCoefficients<F>, sel: DesignSelector, width: usize) -> Result<Vec<F>> {
    if !sel.include_exposure {
        return Err(Error::InvalidParameter("outcome coefficients require the exposure column".into()));
    }
    let v = beta.to_vec();
    if v.len() != width {
        return Err(Error::DimensionMismatch(format!("{} coefficients for {} design columns", v.len(), width)));
    }
    Ok(v)
}

fn check_assignments(n: usize, s: &[usize]) -> Result<()> {
    if s.len() != n {
        return Err(Error::DimensionMismatch(format!("{} assignments for {} records", s.len(), n)));
    }
    Ok(())
}

/// `{ i : s_i = k, T_i >= t }` in input order.
pub fn cluster_risk_set<F: Scalar>(ds: &Dataset<F>, s: &[usize], k: usize, t: F) -> Result<Vec<usize>> {
    check_assignments(ds.n(), s)?;
    if !s.contains(&k) {
        return Err(Error::EmptyCluster(k));
    }
    Ok(ds.records().iter().enumerate().filter(|(i, r)| s[*i] == k && r.time >= t).map(|(i, _)| i).collect())
}

/// Clustered partial log-likelihood
/// `sum_k sum_{i in C_k} delta_i [eta_i - log sum_{l in R_k(T_i)} exp(eta_l)]`.
pub fn cluster_partial_log_lik<F: Scalar>(
    beta: &OutcomeCoefficients<F>,
    ds: &Dataset<F>,
    s: &[usize],
    sel: DesignSelector,
) -> Result<F> {
    check_assignments(ds.n(), s)?;
    let cox = ClusteredCox::new(ds, sel)?;
    let b = coef_vec(beta, sel, cox.dim())?;
    Ok(cox.log_lik(&b, s))
}

/// Gradient of [`cluster_partial_log_lik`] with respect to `(beta_a, beta_x)`.
pub fn partial_log_lik_gradient<F: Scalar>(
    beta: &OutcomeCoefficients<F>,
    ds: &Dataset<F>,
    s: &[usize],
    sel: DesignSelector,
) -> Result<Vec<F>> {
    check_assignments(ds.n(), s)?;
    let cox = ClusteredCox::new(ds, sel)?;
    let b = coef_vec(beta, sel, cox.dim())?;
    Ok(cox.log_lik_grad(&b, s).gradient)
}

/// `log l_ik(beta)`: subject `i`'s factor with `s_i` set to `k`.
pub fn subject_partial_log_lik_term<F: Scalar>(
    beta: &OutcomeCoefficients<F>,
    ds: &Dataset<F>,
    s: &[usize],
    sel: DesignSelector,
    i: usize,
    k: usize,
) -> Result<F> {
    check_assignments(ds.n(), s)?;
    if i >= ds.n() {
        return Err(Error::InvalidParameter(format!("subject {i} out of range")));
    }
    let cox = ClusteredCox::new(ds, sel)?;
    let b = coef_vec(beta, sel, cox.dim())?;
    let eta = cox.linear_predictor(&b);
    Ok(cox.subject_term(&eta, s, i, k))
}
