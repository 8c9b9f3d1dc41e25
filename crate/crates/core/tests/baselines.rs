use dpcox::baselines::*;
use dpcox::dgm::{generate_dataset, make_scenario, ScenarioId, Setting};
use dpcox::model::DesignSelector;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ols_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x = DMatrix::from_fn(10, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let y = DVector::from_fn(10, |_, _| rng.random_range(-5.0..5.0));
        let qr = ols(&x, &y).unwrap();
        let xt = x.transpose();
        let ne = (&xt * &x).try_inverse().unwrap() * (&xt * &y);
        assert!((qr - ne).amax() < 1e-10);
    }
}

#[test]
fn two_stage_pipeline_is_a_composition() {
    let ds = generate_dataset(&make_scenario(Setting::Easy, ScenarioId::A, 300), 4).unwrap();
    let first = fit_ols(&ds).unwrap();
    let by_hand = fit_cox_mle(&ds.with_exposure(&first.fitted).unwrap(), DesignSelector::exposure_and_v(), 0.95).unwrap();
    assert_eq!(fit_2sls(&ds, 0.95).unwrap(), by_hand);
    assert_eq!(fit_naive(&ds, 0.95).unwrap(), fit_cox_mle(&ds, DesignSelector::exposure_and_v(), 0.95).unwrap());

    let with_res = ds.with_extra_v(&first.residuals).unwrap();
    let sri = fit_2sri(&ds, Frailty::None, 0.95).unwrap();
    let manual = fit_cox_mle(&with_res, DesignSelector::exposure_and_v(), 0.95).unwrap();
    assert_eq!(sri.estimate, manual.estimate);
}

#[test]
fn frailty_fit_converges_with_positive_se() {
    let ds = generate_dataset(&make_scenario(Setting::Easy, ScenarioId::A, 400), 9).unwrap();
    let f = fit_2sri(&ds, Frailty::LogNormal, 0.95).unwrap();
    assert!(f.converged);
    assert!(f.se.iter().all(|&s| s > 0.0));
    assert!(f.ci_a().0 < f.beta_a() && f.beta_a() < f.ci_a().1);
}

#[test]
fn infeasible_wald_coverage_near_nominal() {
    let scn = make_scenario(Setting::Easy, ScenarioId::A, 600);
    let reps = 200;
    let mut covered = 0;
    for rep in 0..reps {
        let ds = generate_dataset(&scn, 1000 + rep).unwrap();
        let (lo, hi) = fit_infeasible(&ds, ClusterAdjustment::Strata, 0.95).unwrap().ci_a();
        covered += usize::from(lo <= -0.1 && -0.1 <= hi);
    }
    let cp = covered as f64 / reps as f64;
    assert!((cp - 0.95).abs() <= 0.05, "coverage {cp}");
}

#[test]
fn weak_instrument_inflates_two_stage_spread() {
    let scn = make_scenario(Setting::Easy, ScenarioId::B, 600);
    let (mut tsls, mut inf) = (Vec::new(), Vec::new());
    for rep in 0..30 {
        let ds = generate_dataset(&scn, 500 + rep).unwrap();
        tsls.push(fit_2sls(&ds, 0.95).unwrap().beta_a());
        inf.push(fit_infeasible(&ds, ClusterAdjustment::Strata, 0.95).unwrap().beta_a());
    }
    let sd = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
    };
    assert!(sd(&tsls) > 3.0 * sd(&inf), "{} vs {}", sd(&tsls), sd(&inf));
}

#[test]
fn fit_results_csv() {
    let ds = generate_dataset(&make_scenario(Setting::Easy, ScenarioId::A, 200), 2).unwrap();
    let naive = fit_naive(&ds, 0.95).unwrap();
    let mut buf = Vec::new();
    write_fit_results_csv(&mut buf, &[("naive", &naive)]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,param,estimate,se,lo,hi,converged"));
    assert_eq!(lines.count(), naive.estimate.len());
}
