mod common;

use common::{ks_vs_grid, linspace, tabulate};
use dpcox::dgm::{generate_dataset, make_scenario, ScenarioId, Setting};
use dpcox::model::{ClusteredCox, Dataset, DesignSelector, SurvivalRecord};
use dpcox::regression::PriorConfig;
use dpcox::sampler::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hard(n: usize, seed: u64) -> Dataset<f64> {
    generate_dataset(&make_scenario(Setting::Hard, ScenarioId::A, n), seed).unwrap().without_truth()
}

fn quick(outcome: bool) -> McmcConfig {
    McmcConfig {
        total_iters: 30,
        burn_in: 10,
        init: InitStrategy::SingleCluster,
        outcome_in_assignment: outcome,
        ..McmcConfig::default()
    }
}

#[test]
fn tracked_log_posterior_matches_recomputation() {
    let ds = hard(150, 3);
    for (outcome, homogeneous) in [(false, false), (true, false), (false, true)] {
        let cfg = McmcConfig { homogeneous_sigma: homogeneous, ..quick(outcome) };
        let mut s = Sampler::new(&ds, cfg, PriorConfig::default()).unwrap();
        let mut st = s.initial_state();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            s.gibbs_sweep(&mut st, &mut rng);
            let (a, b) = (s.tracked_log_posterior(&st), s.log_posterior(&st));
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
            st.clusters.check_invariants().unwrap();
        }
    }
}

#[test]
fn same_seed_same_states() {
    let ds = hard(120, 4);
    let run = || {
        let mut s = Sampler::new(&ds, quick(true), PriorConfig::default()).unwrap();
        let mut st = s.initial_state();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            s.gibbs_sweep(&mut st, &mut rng);
        }
        st
    };
    assert_eq!(run(), run());

    let cfg = McmcConfig { total_iters: 40, burn_in: 10, pilot_sweeps: 6, ..McmcConfig::default() };
    let a = run_chain(&ds, &cfg, &PriorConfig::default()).unwrap();
    let b = run_chain(&ds, &cfg, &PriorConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 30);
}

#[test]
fn sweep_visits_blocks_in_order() {
    use SweepBlock::*;
    let ds = hard(60, 5);
    let mut s = Sampler::new(&ds, quick(false), PriorConfig::default()).unwrap();
    s.block_log = Some(Vec::new());
    let mut st = s.initial_state();
    s.gibbs_sweep(&mut st, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(s.block_log.take().unwrap(), vec![AlphaZ, Locations, Variances, Assignments, Concentration, Beta]);

    let prior = PriorConfig { horseshoe_alpha_z: true, horseshoe_beta: true, ..PriorConfig::default() };
    let mut s = Sampler::new(&ds, quick(false), prior).unwrap();
    s.block_log = Some(Vec::new());
    let mut st = s.initial_state();
    s.gibbs_sweep(&mut st, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(
        s.block_log.take().unwrap(),
        vec![HorseshoeAlphaZ, AlphaZ, Locations, Variances, Assignments, Concentration, HorseshoeBeta, Beta]
    );
}

#[test]
fn single_subject_keeps_one_cluster() {
    let ds = Dataset::validate(vec![SurvivalRecord::new(1, 2.0, 1, 0.3, vec![0.1], vec![1.0])]).unwrap();
    let mut s = Sampler::new(&ds, quick(true), PriorConfig::default()).unwrap();
    let mut st = s.initial_state();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        s.gibbs_sweep(&mut st, &mut rng);
        assert_eq!(st.clusters.k(), 1);
        assert!(st.beta.iter().all(|b| b.is_finite()));
    }
}

// (time, event, exposure)
const FIVE: [(f64, u8, f64); 5] = [(1.0, 1, 0.8), (2.0, 1, -0.5), (3.0, 0, 1.2), (4.0, 1, 0.1), (5.0, 1, -1.0)];

fn five() -> Dataset<f64> {
    let recs = FIVE
        .iter()
        .enumerate()
        .map(|(i, &(t, d, a))| SurvivalRecord::new(i as i64, t, d, a, vec![0.0], vec![0.0]))
        .collect();
    Dataset::validate(recs).unwrap()
}

#[test]
fn zero_step_is_always_accepted() {
    let ds = five();
    let cox = ClusteredCox::new(&ds, DesignSelector::new(true, false, false)).unwrap();
    let prior = BetaPrior { mean: vec![0.0], precision: vec![0.01] };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [BetaSampler::RandomWalk, BetaSampler::Langevin] {
        for _ in 0..50 {
            let mv = sample_beta(&cox, &[0; 5], &[0.4], &prior, &Preconditioner::identity(1), 0.0, kind, &mut rng);
            assert!(mv.accepted);
            assert_eq!(mv.beta, vec![0.4]);
        }
    }
}

#[test]
fn one_dimensional_chain_matches_grid_posterior() {
    let ds = five();
    let cox = ClusteredCox::new(&ds, DesignSelector::new(true, false, false)).unwrap();
    let prior = BetaPrior { mean: vec![0.0], precision: vec![1.0 / 100.0] };
    let s = [0usize; 5];
    let g = linspace(-15.0, 15.0, 30_001);
    let dens = tabulate(&g, |b| {
        // textbook single-cluster partial likelihood
        let ll: f64 = FIVE
            .iter()
            .filter(|r| r.1 == 1)
            .map(|&(t, _, a)| b * a - FIVE.iter().filter(|r| r.0 >= t).map(|r| (b * r.2).exp()).sum::<f64>().ln())
            .sum();
        ll - b * b / 200.0
    });
    for (kind, step, seed) in [(BetaSampler::RandomWalk, 2.5, 6), (BetaSampler::Langevin, 1.8, 7)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut beta = vec![0.0];
        let mut draws = Vec::with_capacity(20_000);
        let pc = Preconditioner::identity(1);
        for it in 0..20_500 {
            for _ in 0..4 {
                beta = sample_beta(&cox, &s, &beta, &prior, &pc, step, kind, &mut rng).beta;
            }
            if it >= 500 {
                draws.push(beta[0]);
            }
        }
        let d = ks_vs_grid(&draws, &g, &dens);
        assert!(d < 0.03, "{kind:?}: KS {d}");
    }
}

#[test]
fn flat_likelihood_samples_the_prior() {
    // identical covariates: the partial likelihood does not depend on beta
    let recs = (0..6).map(|i| SurvivalRecord::new(i, 1.0 + i as f64, 1, 0.5, vec![0.0], vec![0.0])).collect();
    let ds = Dataset::validate(recs).unwrap();
    let cox = ClusteredCox::new(&ds, DesignSelector::new(true, false, false)).unwrap();
    let prior = BetaPrior { mean: vec![1.0], precision: vec![0.25] };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut beta = vec![1.0];
    let draws: Vec<f64> = (0..40_000)
        .map(|_| {
            beta = sample_beta(&cox, &[0; 6], &beta, &prior, &Preconditioner::identity(1), 4.0, BetaSampler::RandomWalk, &mut rng)
                .beta;
            beta[0]
        })
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!((mean - 1.0).abs() < 0.1, "mean {mean}");
    assert!((var / 4.0 - 1.0).abs() < 0.1, "var {var}");
}

#[test]
fn non_finite_proposals_are_rejected() {
    let ds = five();
    let cox = ClusteredCox::new(&ds, DesignSelector::new(true, false, false)).unwrap();
    let prior = BetaPrior { mean: vec![0.0], precision: vec![0.01] };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mv = sample_beta(&cox, &[0; 5], &[0.0], &prior, &Preconditioner::identity(1), 1e300, BetaSampler::RandomWalk, &mut rng);
    assert!(!mv.accepted);
    assert_eq!(mv.beta, vec![0.0]);
}

#[test]
fn retained_draws_and_summary() {
    let ds = hard(100, 6);
    let cfg = McmcConfig { total_iters: 60, burn_in: 20, thin: 2, pilot_sweeps: 4, ..McmcConfig::default() };
    let draws = run_chain(&ds, &cfg, &PriorConfig::default()).unwrap();
    assert_eq!(draws.rows.len(), 20);
    assert_eq!(draws.beta_names.len(), 3);
    let sums = draws.beta_summaries(0.95).unwrap();
    assert!(sums.iter().all(|(_, s)| s.lo <= s.mean && s.mean <= s.hi));
    let mut buf = Vec::new();
    draws.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("iter,beta_a,beta_x_1,beta_x_2,alpha_z_1,gamma,K_n,logpost\n"));
    assert_eq!(text.lines().count(), 21);
}
