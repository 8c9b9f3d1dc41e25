//! Dirichlet-process clustering: CRP prior weights, the latent-assignment
//! update, label compaction, and the concentration-parameter update.
//!
//! Cluster labels are 0-based and dense (`0..K`) after compaction; the CSV
//! trace writes them 1-based.

use std::io::Write;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{ClusteredCox, Dataset};
use crate::regression::{exposure_log_density, sample_from_base, ClusterRegressionParams, PriorConfig};
use crate::scalar::Scalar;

/// Partition of the subjects with one exposure-model component per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    assignments: Vec<usize>,
    sizes: Vec<usize>,
    params: Vec<ClusterRegressionParams>,
}

impl ClusterState {
    /// Everyone in a single cluster.
    pub fn single(n: usize, params: ClusterRegressionParams) -> Self {
        Self { assignments: vec![0; n], sizes: vec![n], params: vec![params] }
    }

    /// Builds a state from explicit labels; the result is compacted.
    pub fn from_assignments(assignments: Vec<usize>, params: Vec<ClusterRegressionParams>) -> Result<Self> {
        let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
        if params.len() < k {
            return Err(Error::DimensionMismatch(format!("{} parameter sets for {} labels", params.len(), k)));
        }
        let mut sizes = vec![0; params.len()];
        for &s in &assignments {
            sizes[s] += 1;
        }
        let mut st = Self { assignments, sizes, params };
        st.compact();
        Ok(st)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.assignments.len()
    }

    /// Number of occupied clusters.
    #[inline]
    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    #[inline]
    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    #[inline]
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    #[inline]
    pub fn params(&self) -> &[ClusterRegressionParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ClusterRegressionParams] {
        &mut self.params
    }

    /// Member indices of every cluster, in subject order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k()];
        for (i, &s) in self.assignments.iter().enumerate() {
            m[s].push(i);
        }
        m
    }

    /// Removes empty clusters and relabels by order of first occurrence.
    pub fn compact(&mut self) {
        let mut remap = vec![usize::MAX; self.sizes.len()];
        let mut next = 0;
        for s in &self.assignments {
            if remap[*s] == usize::MAX {
                remap[*s] = next;
                next += 1;
            }
        }
        let mut sizes = vec![0; next];
        let mut params: Vec<Option<ClusterRegressionParams>> = vec![None; next];
        for (old, p) in self.params.drain(..).enumerate() {
            if remap[old] != usize::MAX {
                params[remap[old]] = Some(p);
            }
        }
        for s in &mut self.assignments {
            *s = remap[*s];
            sizes[*s] += 1;
        }
        self.sizes = sizes;
        self.params = params.into_iter().map(|p| p.expect("every occupied cluster has parameters")).collect();
    }

    /// Checks `sum N_k = n`, no empty cluster, one parameter set per cluster.
    pub fn check_invariants(&self) -> Result<()> {
        if self.sizes.iter().sum::<usize>() != self.n() {
            return Err(Error::InvalidParameter("cluster sizes do not sum to n".into()));
        }
        if self.sizes.contains(&0) {
            return Err(Error::InvalidParameter("empty cluster after compaction".into()));
        }
        if self.params.len() != self.sizes.len() {
            return Err(Error::InvalidParameter("parameter list out of step with clusters".into()));
        }
        let mut counts = vec![0; self.k()];
        for &s in &self.assignments {
            if s >= self.k() {
                return Err(Error::InvalidParameter(format!("label {s} out of range")));
            }
            counts[s] += 1;
        }
        if counts != self.sizes {
            return Err(Error::InvalidParameter("sizes disagree with assignments".into()));
        }
        Ok(())
    }

    /// Sets every cluster variance to the same value.
    pub fn set_shared_sigma2(&mut self, sigma2: f64) {
        for p in &mut self.params {
            p.sigma2 = sigma2;
        }
    }
}

/// `compact_clusters` as a free function returning the compacted state.
pub fn compact_clusters(mut state: ClusterState) -> ClusterState {
    state.compact();
    state
}

/// CRP predictive probabilities for the next customer:
/// `N_k / (m + gamma)` for every existing table and `gamma / (m + gamma)` for
/// a new one, where `m = sum N_k`.
pub fn crp_prior_probs<F: Scalar>(sizes: &[usize], gamma: F) -> Result<Vec<F>> {
    if !(gamma > F::zero()) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("concentration must be positive, got {gamma}")));
    }
    let m = F::of_usize(sizes.iter().sum());
    let denom = m + gamma;
    let mut p: Vec<F> = sizes.iter().map(|&nk| F::of_usize(nk) / denom).collect();
    p.push(gamma / denom);
    Ok(p)
}

/// Log probability of a partition under the CRP:
/// `K log gamma + sum_k log Gamma(N_k) + log Gamma(gamma) - log Gamma(gamma + n)`.
pub fn crp_log_prob(sizes: &[usize], gamma: f64) -> f64 {
    let n: usize = sizes.iter().sum();
    sizes.len() as f64 * gamma.ln() + sizes.iter().map(|&s| ln_gamma(s as f64)).sum::<f64>() + ln_gamma(gamma)
        - ln_gamma(gamma + n as f64)
}

/// How the outcome enters the assignment weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AssignmentKind {
    /// Only the moving subject's own partial-likelihood factor `l_ik`.
    #[default]
    SubjectFactor,
    /// Change in the full partial likelihood of the receiving cluster, which
    /// also accounts for the subject's effect on other members' risk sets.
    ExactClusterLikelihood,
}

/// Everything the assignment update reads besides the partition itself.
pub struct AssignmentModel<'a> {
    pub ds: &'a Dataset<f64>,
    pub cox: &'a ClusteredCox<f64>,
    /// Current outcome linear predictor, one entry per subject.
    pub eta: &'a [f64],
    pub alpha_z: &'a [f64],
    pub prior: &'a PriorConfig,
    pub kind: AssignmentKind,
    /// Shared variance under the homogeneous-variance model; fresh clusters
    /// then inherit it instead of drawing their own.
    pub shared_sigma2: Option<f64>,
    pub use_outcome: bool,
    pub use_exposure: bool,
    /// Divide the outcome factor by its value at `beta = 0`.
    pub null_calibrated: bool,
}

/// Scratch buffers reused across subjects within a sweep.
#[derive(Debug, Default)]
pub struct AssignmentScratch {
    log_w: Vec<f64>,
    bucket: Vec<f64>,
    at_risk: Vec<usize>,
    shifted: Vec<f64>,
    block_end: Vec<usize>,
}

impl AssignmentScratch {
    fn prepare(&mut self, model: &AssignmentModel<'_>) {
        let n = model.eta.len();
        let m = model.eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.shifted.clear();
        self.shifted.extend(model.eta.iter().map(|&e| (e - m).exp()));
        if self.block_end.len() != n {
            let order = model.cox.order_desc();
            let times = model.cox.times();
            self.block_end = vec![0; n];
            let mut end = n;
            for pos in (0..n).rev() {
                if pos + 1 < n && times[order[pos]] != times[order[pos + 1]] {
                    end = pos + 1;
                }
                self.block_end[order[pos]] = end;
            }
        }
    }
}

/// Resamples subject `i`'s cluster from its full conditional:
/// CRP weight (`N_k` without `i`, or `gamma` for a new cluster) times the
/// outcome factor times the exposure density. A new cluster's parameters are
/// drawn from the base measure for this evaluation and kept only if chosen.
/// The state is compacted afterwards.
pub fn sample_assignment<R: Rng + ?Sized>(
    i: usize,
    state: &mut ClusterState,
    gamma: f64,
    model: &AssignmentModel<'_>,
    scratch: &mut AssignmentScratch,
    rng: &mut R,
) {
    if scratch.shifted.len() != model.eta.len() {
        scratch.prepare(model);
    }
    let old = state.assignments[i];
    state.sizes[old] -= 1;
    let k_existing = state.k();

    let mut fresh = sample_from_base(model.prior, model.ds.dim_v(), rng);
    if let Some(s2) = model.shared_sigma2 {
        fresh.sigma2 = s2;
    }

    let outcome = if model.use_outcome && model.cox.events()[i] {
        outcome_terms(i, state, model, scratch)
    } else {
        vec![0.0; k_existing]
    };

    let rec = model.ds.record(i);
    scratch.log_w.clear();
    for k in 0..k_existing {
        let nk = state.sizes[k];
        if nk == 0 {
            scratch.log_w.push(f64::NEG_INFINITY);
            continue;
        }
        let mut lw = (nk as f64).ln() + outcome[k];
        if model.use_exposure {
            lw += exposure_log_density(rec, &state.params[k], model.alpha_z);
        }
        scratch.log_w.push(lw);
    }
    let mut lw_new = gamma.ln();
    if model.use_exposure {
        lw_new += exposure_log_density(rec, &fresh, model.alpha_z);
    }
    scratch.log_w.push(lw_new);

    let choice = sample_log_categorical(&scratch.log_w, rng);
    if choice == k_existing {
        state.sizes.push(1);
        state.params.push(fresh);
        state.assignments[i] = k_existing;
    } else {
        state.sizes[choice] += 1;
        state.assignments[i] = choice;
    }
    if state.sizes[old] == 0 {
        state.compact();
    }
}

/// Outcome log factor for placing event subject `i` into each existing cluster.
fn outcome_terms(i: usize, state: &ClusterState, model: &AssignmentModel<'_>, scratch: &mut AssignmentScratch) -> Vec<f64> {
    let k = state.k();
    let eta = model.eta;
    match model.kind {
        AssignmentKind::SubjectFactor => {
            scratch.bucket.clear();
            scratch.bucket.resize(k, 0.0);
            scratch.at_risk.clear();
            scratch.at_risk.resize(k, 0);
            let order = model.cox.order_desc();
            for &l in &order[..scratch.block_end[i]] {
                if l != i {
                    let c = state.assignments[l];
                    scratch.bucket[c] += scratch.shifted[l];
                    scratch.at_risk[c] += 1;
                }
            }
            let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (0..k)
                .map(|c| {
                    let tot = scratch.bucket[c] + scratch.shifted[i];
                    let term = if tot.is_normal() {
                        eta[i] - (m + tot.ln())
                    } else {
                        // denominators underflowed against the global max
                        let mut s = state.assignments.to_vec();
                        s[i] = usize::MAX;
                        model.cox.subject_term(eta, &s, i, c)
                    };
                    if model.null_calibrated {
                        term + ((scratch.at_risk[c] + 1) as f64).ln()
                    } else {
                        term
                    }
                })
                .collect()
        }
        AssignmentKind::ExactClusterLikelihood => {
            let order = model.cox.order_desc();
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
            for &l in order {
                if l != i {
                    members[state.assignments[l]].push(l);
                }
            }
            let ti = model.cox.times()[i];
            let zeros = vec![0.0; eta.len()];
            (0..k)
                .map(|c| {
                    if members[c].is_empty() {
                        return 0.0;
                    }
                    let at = members[c].partition_point(|&l| model.cox.times()[l] >= ti);
                    let mut with = members[c].clone();
                    with.insert(at, i);
                    let mut delta = model.cox.members_log_lik(eta, &with) - model.cox.members_log_lik(eta, &members[c]);
                    if model.null_calibrated {
                        delta -= model.cox.members_log_lik(&zeros, &with) - model.cox.members_log_lik(&zeros, &members[c]);
                    }
                    delta
                })
                .collect()
        }
    }
}

/// Draws an index with probability proportional to `exp(log_w)`.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> usize {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(m.is_finite(), "all assignment weights are -inf");
    let total: f64 = log_w.iter().map(|&w| (w - m).exp()).sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &w) in log_w.iter().enumerate() {
        u -= (w - m).exp();
        if u < 0.0 {
            return k;
        }
    }
    log_w.iter().rposition(|w| w.is_finite()).expect("at least one finite weight")
}

/// One full pass of assignment updates in subject order.
pub fn sweep_assignments<R: Rng + ?Sized>(
    state: &mut ClusterState,
    gamma: f64,
    model: &AssignmentModel<'_>,
    rng: &mut R,
) {
    let mut scratch = AssignmentScratch::default();
    scratch.prepare(model);
    for i in 0..state.n() {
        sample_assignment(i, state, gamma, model, &mut scratch, rng);
    }
}

/// Concentration-parameter update variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConcentrationUpdate {
    /// `eta | gamma ~ Beta(gamma + 1, n)`, mixture odds
    /// `(a + K - 1) / (n (b - log eta))`.
    #[default]
    EscobarWest,
    /// `eta ~ Beta(a + 1, n)` with logistic weight on
    /// `lambda = (a + K - 1) / (K (b - log eta))`.
    Literal,
}

/// DP precision with its Gamma(a, b) prior and the auxiliary `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationState {
    pub gamma: f64,
    pub eta: f64,
    pub a_gamma: f64,
    pub b_gamma: f64,
}

impl ConcentrationState {
    pub fn new(gamma: f64, a_gamma: f64, b_gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && a_gamma > 0.0 && b_gamma > 0.0) {
            return Err(Error::InvalidParameter("concentration and its prior must be positive".into()));
        }
        Ok(Self { gamma, eta: 0.5, a_gamma, b_gamma })
    }

    /// Weight `pi` on the `Gamma(a + K, b - log eta)` component.
    pub fn mixture_weight(&self, k: usize, n: usize, eta: f64, mode: ConcentrationUpdate) -> f64 {
        let (a, b, k) = (self.a_gamma, self.b_gamma, k as f64);
        let rate = b - eta.ln();
        match mode {
            ConcentrationUpdate::EscobarWest => {
                let odds = (a + k - 1.0) / (n as f64 * rate);
                odds / (1.0 + odds)
            }
            ConcentrationUpdate::Literal => {
                let lambda = (a + k - 1.0) / (k * rate);
                1.0 / (1.0 + (-lambda).exp())
            }
        }
    }
}

/// Updates `(eta, gamma)` given the number of occupied clusters `k` and `n`.
pub fn sample_concentration<R: Rng + ?Sized>(
    conc: ConcentrationState,
    k: usize,
    n: usize,
    mode: ConcentrationUpdate,
    rng: &mut R,
) -> ConcentrationState {
    assert!(k >= 1 && n >= 1);
    let first = match mode {
        ConcentrationUpdate::EscobarWest => conc.gamma + 1.0,
        ConcentrationUpdate::Literal => conc.a_gamma + 1.0,
    };
    let eta: f64 = Beta::new(first, n as f64).expect("positive beta parameters").sample(rng);
    // guard the log against an exact 0 from the beta sampler
    let eta = eta.max(f64::MIN_POSITIVE);
    let rate = conc.b_gamma - eta.ln();
    let pi = conc.mixture_weight(k, n, eta, mode);
    let shape = if rng.random::<f64>() < pi { conc.a_gamma + k as f64 } else { conc.a_gamma + k as f64 - 1.0 };
    let gamma: f64 = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng);
    ConcentrationState { gamma: gamma.max(f64::MIN_POSITIVE), eta, ..conc }
}

/// Appends `iter,subject,cluster` rows (1-based subject and cluster).
pub fn write_cluster_trace<W: Write>(out: &mut W, iter: usize, assignments: &[usize]) -> std::io::Result<()> {
    for (i, &s) in assignments.iter().enumerate() {
        writeln!(out, "{},{},{}", iter, i + 1, s + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(a0: f64) -> ClusterRegressionParams {
        ClusterRegressionParams { alpha0: a0, alpha_v: vec![], sigma2: 1.0 }
    }

    #[test]
    fn crp_examples() {
        assert_eq!(crp_prior_probs::<f64>(&[], 0.7).unwrap(), vec![1.0]);
        let v = crp_prior_probs(&[2, 1], 1.0_f64).unwrap();
        assert_eq!(v, vec![0.5, 0.25, 0.25]);
        let v = crp_prior_probs(&[5], 1e-12_f64).unwrap();
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
        assert!(crp_prior_probs(&[1], 0.0_f64).is_err());
        let v32 = crp_prior_probs(&[3, 1], 2.0_f32).unwrap();
        assert!((v32.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn compaction_examples() {
        let st = ClusterState::from_assignments(vec![0, 1, 1], vec![p(0.0), p(1.0)]).unwrap();
        assert_eq!(compact_clusters(st.clone()), st);

        let mut st = ClusterState {
            assignments: vec![0, 2, 0, 2, 0],
            sizes: vec![3, 0, 2],
            params: vec![p(0.0), p(1.0), p(2.0)],
        };
        st.compact();
        assert_eq!(st.sizes(), [3, 2]);
        assert_eq!(st.assignments(), [0, 1, 0, 1, 0]);
        assert_eq!(st.params()[1].alpha0, 2.0);
        st.check_invariants().unwrap();

        let st = ClusterState::from_assignments(vec![7; 4], (0..8).map(|k| p(k as f64)).collect()).unwrap();
        assert_eq!(st.assignments(), [0, 0, 0, 0]);
        assert_eq!(st.k(), 1);
        assert_eq!(st.params()[0].alpha0, 7.0);
    }

    #[test]
    fn compaction_orders_by_first_occurrence() {
        let st = ClusterState::from_assignments(vec![2, 0, 2, 1], vec![p(0.0), p(1.0), p(2.0)]).unwrap();
        assert_eq!(st.assignments(), [0, 1, 0, 2]);
        assert_eq!(st.params().iter().map(|q| q.alpha0).collect::<Vec<_>>(), [2.0, 0.0, 1.0]);
    }

    #[test]
    fn escobar_west_mixture_weight_example() {
        let c = ConcentrationState::new(1.0, 2.0, 4.0).unwrap();
        let pi = c.mixture_weight(3, 100, 0.5, ConcentrationUpdate::EscobarWest);
        let odds = 4.0 / (100.0 * (4.0 - 0.5_f64.ln()));
        assert!((odds - 0.008523).abs() < 1e-6);
        assert!((pi - odds / (1.0 + odds)).abs() < 1e-15);
        assert!((pi - 0.008451).abs() < 1e-6);
    }

    #[test]
    fn concentration_rates_exceed_prior_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = ConcentrationState::new(1.0, 2.0, 4.0).unwrap();
        for _ in 0..200 {
            c = sample_concentration(c, 3, 50, ConcentrationUpdate::EscobarWest, &mut rng);
            assert!(c.eta > 0.0 && c.eta < 1.0);
            assert!(c.b_gamma - c.eta.ln() > c.b_gamma);
            assert!(c.gamma > 0.0);
        }
        c = sample_concentration(c, 3, 50, ConcentrationUpdate::Literal, &mut rng);
        assert!(c.gamma > 0.0);
    }

    #[test]
    fn crp_log_prob_sums_to_one_over_partitions_of_three() {
        // partitions of 3: {3}, {2,1} x3, {1,1,1}
        let g = 0.8_f64;
        let total = crp_log_prob(&[3], g).exp() + 3.0 * crp_log_prob(&[2, 1], g).exp() + crp_log_prob(&[1, 1, 1], g).exp();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trace_rows_are_one_based() {
        let mut buf = Vec::new();
        write_cluster_trace(&mut buf, 3, &[0, 1]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "3,1,1\n3,2,2\n");
    }
}
