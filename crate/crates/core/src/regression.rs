//! Gaussian exposure model: per-cluster intercepts and `v` slopes, the shared
//! `z` slopes, cluster variances, and horseshoe shrinkage for coefficient
//! blocks.
//!
//! Within cluster `k`, `A_i ~ N(alpha0_k + v_i' alpha_v,k + z_i' alpha_z, sigma2_k)`.
//! All updates here are exact conjugate draws.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::model::{Dataset, SurvivalRecord};
use crate::scalar::Scalar;

/// Parameters of one mixture component of the exposure model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRegressionParams<F = f64> {
    pub alpha0: F,
    pub alpha_v: Vec<F>,
    pub sigma2: F,
}

/// Coefficients of `z`, shared by every cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalRegressionParams<F = f64> {
    pub alpha_z: Vec<F>,
}

/// Hyperparameters of every prior in the model.
///
/// Vector-valued blocks use a common mean and an isotropic variance
/// (`Sigma = var * I`).
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub m_beta_a: f64,
    pub tau2_beta_a: f64,
    pub m_beta_x: f64,
    pub var_beta_x: f64,
    pub m_alpha_z: f64,
    pub var_alpha_z: f64,
    pub m_alpha_v: f64,
    pub var_alpha_v: f64,
    pub m_alpha0: f64,
    pub tau2_alpha0: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub a_gamma: f64,
    pub b_gamma: f64,
    pub horseshoe_alpha_z: bool,
    pub horseshoe_beta: bool,
    /// Global horseshoe scale for `alpha_z`.
    pub tau1: f64,
    /// Global horseshoe scale for `beta`.
    pub tau2: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            m_beta_a: 0.0,
            tau2_beta_a: 100.0,
            m_beta_x: 0.0,
            var_beta_x: 100.0,
            m_alpha_z: 0.0,
            var_alpha_z: 100.0,
            m_alpha_v: 0.0,
            var_alpha_v: 100.0,
            m_alpha0: 0.0,
            tau2_alpha0: 100.0,
            a_sigma: 2.0,
            b_sigma: 2.0,
            a_gamma: 2.0,
            b_gamma: 4.0,
            horseshoe_alpha_z: false,
            horseshoe_beta: false,
            tau1: 1.0,
            tau2: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("tau2_beta_a", self.tau2_beta_a),
            ("var_beta_x", self.var_beta_x),
            ("var_alpha_z", self.var_alpha_z),
            ("var_alpha_v", self.var_alpha_v),
            ("tau2_alpha0", self.tau2_alpha0),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("a_gamma", self.a_gamma),
            ("b_gamma", self.b_gamma),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        let finite = [
            ("m_beta_a", self.m_beta_a),
            ("m_beta_x", self.m_beta_x),
            ("m_alpha_z", self.m_alpha_z),
            ("m_alpha_v", self.m_alpha_v),
            ("m_alpha0", self.m_alpha0),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(format!("{name} must be finite"));
            }
        }
        Ok(())
    }
}

/// Half-Cauchy local scales with their inverse-gamma auxiliaries.
#[derive(Debug, Clone, PartialEq)]
pub struct HorseshoeState {
    /// Local scales for `alpha_z`.
    pub psi1: Vec<f64>,
    /// Local scales for `beta`.
    pub psi2: Vec<f64>,
    nu1: Vec<f64>,
    nu2: Vec<f64>,
}

impl HorseshoeState {
    pub fn new(dim_alpha_z: usize, dim_beta: usize) -> Self {
        Self {
            psi1: vec![1.0; dim_alpha_z],
            psi2: vec![1.0; dim_beta],
            nu1: vec![1.0; dim_alpha_z],
            nu2: vec![1.0; dim_beta],
        }
    }

    pub fn update_alpha_z<R: Rng + ?Sized>(&mut self, alpha_z: &[f64], tau1: f64, rng: &mut R) {
        sample_horseshoe_locals(alpha_z, tau1, &mut self.psi1, &mut self.nu1, rng);
    }

    pub fn update_beta<R: Rng + ?Sized>(&mut self, beta: &[f64], tau2: f64, rng: &mut R) {
        sample_horseshoe_locals(beta, tau2, &mut self.psi2, &mut self.nu2, rng);
    }
}

/// `log N(x; mean, var)`.
#[inline]
pub fn normal_log_density<F: Scalar>(x: F, mean: F, var: F) -> F {
    let r = x - mean;
    F::of(-0.5) * ((F::of(2.0) * F::of(std::f64::consts::PI) * var).ln() + r * r / var)
}

/// Mean of subject `rec`'s exposure under the given cluster parameters.
#[inline]
pub fn exposure_mean<F: Scalar>(rec: &SurvivalRecord<F>, params: &ClusterRegressionParams<F>, alpha_z: &[F]) -> F {
    let zv: F = rec.z.iter().zip(alpha_z).map(|(&z, &a)| z * a).sum();
    let vv: F = rec.v.iter().zip(&params.alpha_v).map(|(&v, &a)| v * a).sum();
    params.alpha0 + vv + zv
}

/// `log phi(A_i; alpha0_k + v_i' alpha_v,k + z_i' alpha_z, sigma2_k)`.
pub fn exposure_log_density<F: Scalar>(
    rec: &SurvivalRecord<F>,
    params: &ClusterRegressionParams<F>,
    alpha_z: &[F],
) -> F {
    normal_log_density(rec.exposure, exposure_mean(rec, params, alpha_z), params.sigma2)
}

/// Inverse-gamma draw with shape `a` and scale (rate of the reciprocal) `b`.
pub fn sample_inv_gamma<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(a, 1.0 / b).expect("positive inverse-gamma parameters");
    1.0 / g.sample(rng)
}

/// Draw from `N(P^{-1} b, P^{-1})` given a precision matrix `P`.
pub(crate) fn sample_mvn_precision<R: Rng + ?Sized>(
    precision: DMatrix<f64>,
    linear: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let d = linear.len();
    if d == 0 {
        return DVector::zeros(0);
    }
    let chol = precision.cholesky().expect("posterior precision is positive definite under a proper prior");
    let mean = chol.solve(linear);
    let eps = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let lt = chol.l().transpose();
    let dev = lt.solve_upper_triangular(&eps).expect("nonsingular Cholesky factor");
    mean + dev
}

/// Draw the cluster parameters from the base measure.
pub fn sample_from_base<R: Rng + ?Sized>(prior: &PriorConfig, dim_v: usize, rng: &mut R) -> ClusterRegressionParams {
    let alpha0 = prior.m_alpha0 + prior.tau2_alpha0.sqrt() * rng.sample::<f64, _>(StandardNormal);
    let alpha_v =
        (0..dim_v).map(|_| prior.m_alpha_v + prior.var_alpha_v.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let sigma2 = sample_inv_gamma(prior.a_sigma, prior.b_sigma, rng);
    ClusterRegressionParams { alpha0, alpha_v, sigma2 }
}

/// Exact draw of `(alpha0_k, alpha_v,k)` given the cluster members, the
/// shared `alpha_z` and `sigma2_k`. An empty cluster yields a prior draw.
pub fn sample_cluster_location<R: Rng + ?Sized>(
    ds: &Dataset<f64>,
    members: &[usize],
    alpha_z: &[f64],
    sigma2: f64,
    prior: &PriorConfig,
    rng: &mut R,
) -> (f64, Vec<f64>) {
    let d = 1 + ds.dim_v();
    let mut prec = DMatrix::<f64>::zeros(d, d);
    let mut lin = DVector::<f64>::zeros(d);
    prec[(0, 0)] = 1.0 / prior.tau2_alpha0;
    lin[0] = prior.m_alpha0 / prior.tau2_alpha0;
    for j in 1..d {
        prec[(j, j)] = 1.0 / prior.var_alpha_v;
        lin[j] = prior.m_alpha_v / prior.var_alpha_v;
    }
    let mut w = vec![0.0; d];
    for &i in members {
        let r = ds.record(i);
        let resid: f64 = r.exposure - r.z.iter().zip(alpha_z).map(|(z, a)| z * a).sum::<f64>();
        w[0] = 1.0;
        w[1..].copy_from_slice(&r.v);
        for a in 0..d {
            lin[a] += w[a] * resid / sigma2;
            for b in 0..d {
                prec[(a, b)] += w[a] * w[b] / sigma2;
            }
        }
    }
    let draw = sample_mvn_precision(prec, &lin, rng);
    (draw[0], draw.iter().skip(1).copied().collect())
}

/// Residual sum of squares of the exposure model over `members`.
pub fn residual_ss(ds: &Dataset<f64>, members: &[usize], params: &ClusterRegressionParams, alpha_z: &[f64]) -> f64 {
    members
        .iter()
        .map(|&i| {
            let r = ds.record(i);
            let e = r.exposure - exposure_mean(r, params, alpha_z);
            e * e
        })
        .sum()
}

/// Draw `sigma2_k ~ IG(a_sigma + n_k/2, b_sigma + SS_k/2)`.
pub fn sample_cluster_variance<R: Rng + ?Sized>(
    ds: &Dataset<f64>,
    members: &[usize],
    params: &ClusterRegressionParams,
    alpha_z: &[f64],
    prior: &PriorConfig,
    rng: &mut R,
) -> f64 {
    let ss = residual_ss(ds, members, params, alpha_z);
    sample_inv_gamma(prior.a_sigma + members.len() as f64 / 2.0, prior.b_sigma + ss / 2.0, rng)
}

/// Common variance shared by all clusters: residuals are pooled into a
/// single inverse-gamma update.
pub fn sample_shared_variance<R: Rng + ?Sized>(
    ds: &Dataset<f64>,
    assignments: &[usize],
    params: &[ClusterRegressionParams],
    alpha_z: &[f64],
    prior: &PriorConfig,
    rng: &mut R,
) -> f64 {
    let ss: f64 = ds
        .records()
        .iter()
        .zip(assignments)
        .map(|(r, &k)| {
            let e = r.exposure - exposure_mean(r, &params[k], alpha_z);
            e * e
        })
        .sum();
    sample_inv_gamma(prior.a_sigma + ds.n() as f64 / 2.0, prior.b_sigma + ss / 2.0, rng)
}

/// Posterior precision and linear term of `alpha_z`.
///
/// Each row contributes `z_i z_i' / sigma2_{s_i}` (heteroscedastic weighted
/// regression on the residual after the cluster-specific part). With
/// `prior_var` set, the prior is `N(0, diag(prior_var))` (horseshoe);
/// otherwise the isotropic default.
pub fn alpha_z_posterior(
    ds: &Dataset<f64>,
    assignments: &[usize],
    params: &[ClusterRegressionParams],
    prior: &PriorConfig,
    prior_var: Option<&[f64]>,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = ds.dim_z();
    let mut prec = DMatrix::<f64>::zeros(d, d);
    let mut lin = DVector::<f64>::zeros(d);
    for j in 0..d {
        match prior_var {
            Some(v) => prec[(j, j)] = 1.0 / v[j],
            None => {
                prec[(j, j)] = 1.0 / prior.var_alpha_z;
                lin[j] = prior.m_alpha_z / prior.var_alpha_z;
            }
        }
    }
    for (r, &k) in ds.records().iter().zip(assignments) {
        let p = &params[k];
        let resid = r.exposure - p.alpha0 - r.v.iter().zip(&p.alpha_v).map(|(v, a)| v * a).sum::<f64>();
        for a in 0..d {
            lin[a] += r.z[a] * resid / p.sigma2;
            for b in 0..d {
                prec[(a, b)] += r.z[a] * r.z[b] / p.sigma2;
            }
        }
    }
    (prec, lin)
}

/// Exact draw of the shared `alpha_z` pooling every cluster.
pub fn sample_global_alpha_z<R: Rng + ?Sized>(
    ds: &Dataset<f64>,
    assignments: &[usize],
    params: &[ClusterRegressionParams],
    prior: &PriorConfig,
    horseshoe_var: Option<&[f64]>,
    rng: &mut R,
) -> Vec<f64> {
    if ds.dim_z() == 0 {
        return Vec::new();
    }
    let (prec, lin) = alpha_z_posterior(ds, assignments, params, prior, horseshoe_var);
    sample_mvn_precision(prec, &lin, rng).iter().copied().collect()
}

/// One Gibbs pass over half-Cauchy local scales via the inverse-gamma
/// mixture representation:
/// `psi^2 | nu ~ IG(1/2, 1/nu)` and `nu ~ IG(1/2, 1)` marginally give
/// `psi ~ C+(0, 1)`. Given coefficient `c` with prior `N(0, psi^2 tau^2)`:
/// `psi^2 ~ IG(1, 1/nu + c^2 / (2 tau^2))`, then `nu ~ IG(1, 1 + 1/psi^2)`.
pub fn sample_horseshoe_locals<R: Rng + ?Sized>(
    coeffs: &[f64],
    global_tau: f64,
    psi: &mut [f64],
    nu: &mut [f64],
    rng: &mut R,
) {
    assert!(global_tau > 0.0);
    for ((c, p), v) in coeffs.iter().zip(psi.iter_mut()).zip(nu.iter_mut()) {
        let psi2 = sample_inv_gamma(1.0, 1.0 / *v + c * c / (2.0 * global_tau * global_tau), rng);
        *v = sample_inv_gamma(1.0, 1.0 + 1.0 / psi2, rng);
        *p = psi2.sqrt();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_density_examples() {
        let rec = SurvivalRecord::new(0, 1.0, 1, 3.0, vec![2.0], vec![1.0]);
        let params = ClusterRegressionParams { alpha0: 0.5, alpha_v: vec![0.5], sigma2: 1.0 };
        // mean = 0.5 + 0.5 + 2 * 1.0 = 3.0
        let peak: f64 = exposure_log_density(&rec, &params, &[1.0]);
        assert!((peak + 0.918939).abs() < 1e-6);
        let params = ClusterRegressionParams { alpha0: 0.5, alpha_v: vec![0.5], sigma2: 4.0 };
        let off = exposure_log_density(&rec, &params, &[0.0]);
        // residual 2, var 4
        assert!((off - (-0.5 * (8.0 * std::f64::consts::PI).ln() - 0.5)).abs() < 1e-12);
        assert!((off + 2.112086).abs() < 1e-6);
        let rec32 = SurvivalRecord::new(0, 1.0_f32, 1, 3.0, vec![2.0], vec![1.0]);
        let p32 = ClusterRegressionParams { alpha0: 0.5_f32, alpha_v: vec![0.5], sigma2: 4.0 };
        assert!((exposure_log_density(&rec32, &p32, &[0.0]) as f64 - off).abs() < 1e-5);
    }

    #[test]
    fn density_increases_with_variance_iff_residual_exceeds_sd() {
        for &r in &[0.5_f64, 0.9, 1.5, 3.0] {
            for &s2 in &[0.25_f64, 1.0, 2.0] {
                let lo = normal_log_density(r, 0.0, s2);
                let hi = normal_log_density(r, 0.0, s2 * 1.001);
                assert_eq!(hi > lo, r > s2.sqrt(), "r={r} s2={s2}");
            }
        }
    }

    #[test]
    fn horseshoe_empty_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut p, mut v) = (vec![], vec![]);
        sample_horseshoe_locals(&[], 1.0, &mut p, &mut v, &mut rng);
        assert!(p.is_empty());
    }

    #[test]
    fn alpha_z_no_z_is_noop() {
        let ds = Dataset::validate(vec![SurvivalRecord::new(0, 1.0, 1, 3.0, vec![], vec![])]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![ClusterRegressionParams { alpha0: 0.0, alpha_v: vec![], sigma2: 1.0 }];
        assert!(sample_global_alpha_z(&ds, &[0], &params, &PriorConfig::default(), None, &mut rng).is_empty());
    }

    #[test]
    fn default_prior_is_valid() {
        assert!(PriorConfig::default().validate().is_ok());
        let bad = PriorConfig { b_sigma: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
