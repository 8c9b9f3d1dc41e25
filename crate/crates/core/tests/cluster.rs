mod common;

use std::collections::HashMap;

use common::{ks_vs_cdf, ks_vs_grid, linspace, tabulate};
use dpcox::cluster::*;
use dpcox::model::{ClusteredCox, Dataset, DesignSelector, SurvivalRecord};
use dpcox::regression::{ClusterRegressionParams, PriorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Gamma};
use statrs::function::gamma::ln_gamma;

fn dataset(exposures: &[f64], events: &[u8]) -> Dataset<f64> {
    let recs = exposures
        .iter()
        .zip(events)
        .enumerate()
        .map(|(i, (&a, &d))| SurvivalRecord::new(i as i64, 1.0 + i as f64, d, a, vec![0.0], vec![0.0]))
        .collect();
    Dataset::validate(recs).unwrap()
}

fn params(alpha0: f64, sigma2: f64) -> ClusterRegressionParams {
    ClusterRegressionParams { alpha0, alpha_v: vec![0.0], sigma2 }
}

struct Fixture {
    ds: Dataset<f64>,
    cox: ClusteredCox<f64>,
    eta: Vec<f64>,
    prior: PriorConfig,
}

impl Fixture {
    fn new(exposures: &[f64], events: &[u8]) -> Self {
        let ds = dataset(exposures, events);
        let cox = ClusteredCox::new(&ds, DesignSelector::full()).unwrap();
        let eta = exposures.iter().map(|a| 0.3 * a).collect();
        Self { ds, cox, eta, prior: PriorConfig::default() }
    }

    fn model(&self, use_outcome: bool, use_exposure: bool, shared: Option<f64>) -> AssignmentModel<'_> {
        AssignmentModel {
            ds: &self.ds,
            cox: &self.cox,
            eta: &self.eta,
            alpha_z: &[0.0],
            prior: &self.prior,
            kind: AssignmentKind::SubjectFactor,
            shared_sigma2: shared,
            use_outcome,
            use_exposure,
            null_calibrated: false,
        }
    }
}

fn chi2_stat(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    counts.iter().zip(probs).map(|(&c, &p)| (c as f64 - n as f64 * p).powi(2) / (n as f64 * p)).sum()
}

#[test]
fn censored_subject_follows_crp_prior() {
    // subject 0 is censored; clusters after removing it have sizes 3, 2, 1
    let fx = Fixture::new(&[0.0, 1.0, -1.0, 0.5, 2.0, 0.2, -0.7], &[0, 1, 1, 0, 1, 1, 0]);
    let labels = vec![0, 0, 0, 0, 1, 1, 2];
    let base = ClusterState::from_assignments(labels, vec![params(0.0, 1.0); 3]).unwrap();
    let gamma = 1.3;
    let model = fx.model(true, false, None);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        let mut st = base.clone();
        let mut scratch = AssignmentScratch::default();
        sample_assignment(0, &mut st, gamma, &model, &mut scratch, &mut rng);
        st.check_invariants().unwrap();
        counts[st.assignments()[0]] += 1;
    }
    let probs = crp_prior_probs(&[3, 2, 1], gamma).unwrap();
    let stat = chi2_stat(&counts, &probs);
    let crit = ChiSquared::new(3.0).unwrap().inverse_cdf(0.999);
    assert!(stat < crit, "chi2 {stat} vs {crit}, counts {counts:?}");
}

#[test]
fn exposure_density_dominates_distant_cluster() {
    let mut a = vec![9.5];
    a.extend([10.0; 5]);
    a.extend([-10.0; 5]);
    let fx = Fixture::new(&a, &[1; 11]);
    let mut labels = vec![0];
    labels.extend([0; 5]);
    labels.extend([1; 5]);
    let base = ClusterState::from_assignments(labels, vec![params(10.0, 0.25), params(-10.0, 0.25)]).unwrap();
    let model = fx.model(false, true, Some(0.25));

    // by hand: log N(9.5; 10, 0.25) - log N(9.5; -10, 0.25) = (19.5^2 - 0.5^2) / 0.5 = 760
    let rec = fx.ds.record(0);
    let gap = dpcox::regression::exposure_log_density(rec, &base.params()[0], &[0.0])
        - dpcox::regression::exposure_log_density(rec, &base.params()[1], &[0.0]);
    assert!((gap - 760.0).abs() < 1e-9);
    assert!(1.0 / (1.0 + (-gap).exp()) > 0.999);

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        let mut st = base.clone();
        sample_assignment(0, &mut st, 1.0, &model, &mut AssignmentScratch::default(), &mut rng);
        counts[st.assignments()[0]] += 1;
    }
    assert_eq!(counts[1], 0);
    assert!(counts[0] as f64 / 10_000.0 > 0.99, "{counts:?}");
}

#[test]
fn single_subject_stays_alone() {
    let fx = Fixture::new(&[0.4], &[1]);
    let model = fx.model(true, true, None);
    let mut st = ClusterState::single(1, params(0.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..200 {
        sweep_assignments(&mut st, 5.0, &model, &mut rng);
        assert_eq!(st.k(), 1);
        assert_eq!(st.assignments(), &[0]);
    }
}

/// Relabels by order of first occurrence.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Every set partition of `0..n` in canonical (restricted growth) form.
fn partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0]];
    for _ in 1..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                let k = p.iter().max().unwrap() + 1;
                (0..=k).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

#[test]
fn sweeps_without_likelihood_sample_the_crp() {
    for (n, gamma, seed) in [(3, 0.8, 31), (4, 1.7, 32)] {
        let fx = Fixture::new(&vec![0.0; n], &vec![1; n]);
        let model = fx.model(false, false, None);
        let parts = partitions(n);
        assert_eq!(parts.len(), if n == 3 { 5 } else { 15 });
        let exact: Vec<f64> = parts
            .iter()
            .map(|p| {
                let k = p.iter().max().unwrap() + 1;
                let sizes: Vec<usize> = (0..k).map(|c| p.iter().filter(|&&x| x == c).count()).collect();
                crp_log_prob(&sizes, gamma).exp()
            })
            .collect();
        assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut st = ClusterState::single(n, params(0.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
        let sweeps = 200_000;
        for _ in 0..sweeps {
            sweep_assignments(&mut st, gamma, &model, &mut rng);
            *freq.entry(canonical(st.assignments())).or_default() += 1;
        }
        for (p, e) in parts.iter().zip(&exact) {
            let got = *freq.get(p).unwrap_or(&0) as f64 / sweeps as f64;
            assert!((got - e).abs() < 0.01, "n={n} {p:?}: {got} vs {e}");
        }
    }
}

/// Marginal of gamma given K and n: Gamma(a, b) prior times
/// `gamma^K Gamma(gamma) / Gamma(gamma + n)`.
fn gamma_log_post(g: f64, k: usize, n: usize, a: f64, b: f64) -> f64 {
    (a - 1.0) * g.ln() - b * g + k as f64 * g.ln() + ln_gamma(g) - ln_gamma(g + n as f64)
}

#[test]
fn concentration_chain_matches_grid_marginal() {
    for (k, n, seed) in [(3, 100, 41), (12, 600, 42)] {
        let mut conc = ConcentrationState::new(1.0, 2.0, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            conc = sample_concentration(conc, k, n, ConcentrationUpdate::EscobarWest, &mut rng);
        }
        let mut draws = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            for _ in 0..5 {
                conc = sample_concentration(conc, k, n, ConcentrationUpdate::EscobarWest, &mut rng);
            }
            draws.push(conc.gamma);
        }
        let g = linspace(1e-6, 20.0, 40_001);
        let dens = tabulate(&g, |x| gamma_log_post(x, k, n, 2.0, 4.0));
        let d = ks_vs_grid(&draws, &g, &dens);
        assert!(d < 0.02, "K={k} n={n}: KS {d}");
    }
}

#[test]
fn prior_round_trip_keeps_concentration_prior() {
    // With no likelihood, alternating assignment sweeps and gamma updates
    // targets the joint prior, so gamma stays Gamma(2, 4) marginally.
    let n = 10;
    let fx = Fixture::new(&vec![0.0; n], &vec![1; n]);
    let model = fx.model(false, false, None);
    let mut st = ClusterState::single(n, params(0.0, 1.0));
    let mut conc = ConcentrationState::new(0.5, 2.0, 4.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut draws = Vec::new();
    let mut ks = Vec::new();
    for it in 0..100_000 {
        sweep_assignments(&mut st, conc.gamma, &model, &mut rng);
        conc = sample_concentration(conc, st.k(), n, ConcentrationUpdate::EscobarWest, &mut rng);
        if it % 10 == 0 {
            draws.push(conc.gamma);
            ks.push(st.k() as f64);
        }
    }
    let prior = Gamma::new(2.0, 4.0).unwrap();
    let d = ks_vs_cdf(&draws, |x| prior.cdf(x));
    assert!(d < 0.02, "KS {d}");

    // prior mean of K_n: E[sum_i gamma / (gamma + i)] over gamma
    let g = linspace(1e-6, 10.0, 20_001);
    let w = tabulate(&g, |x| prior.ln_pdf(x));
    let num: f64 = g.iter().zip(&w).map(|(&x, &wi)| wi * (0..n).map(|i| x / (x + i as f64)).sum::<f64>()).sum();
    let expected = num / w.iter().sum::<f64>();
    let mean = ks.iter().sum::<f64>() / ks.len() as f64;
    assert!((mean - expected).abs() < 0.03, "{mean} vs {expected}");
}
