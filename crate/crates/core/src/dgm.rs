//! Simulation design: a three-level unmeasured confounder `U`, covariates
//! `z1 ~ Gamma(2, 2)` and `z2 ~ Bernoulli(0.5)`, a normal exposure whose mean
//! depends on `U`, latent-phase event times, and exponential censoring.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Bernoulli, Distribution, Exp, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, SurvivalRecord};

pub const U_PROBS: [f64; 3] = [0.5, 1.0 / 3.0, 1.0 / 6.0];
const PILOT_N: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioId {
    A,
    B,
    C,
    D,
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Self::Easy),
            "hard" => Ok(Self::Hard),
            _ => Err(Error::InvalidParameter(format!("unknown setting {s:?} (expected easy or hard)"))),
        }
    }
}

impl FromStr for ScenarioId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            _ => Err(Error::InvalidParameter(format!("unknown scenario {s:?} (expected a, b, c or d)"))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Easy => "easy",
            Self::Hard => "hard",
        })
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
        })
    }
}

/// What happens once the latent phase ends without an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentContinuation {
    /// Constant baseline hazard from the threshold onward.
    #[default]
    Piecewise,
    /// Independent draw from the baseline model on the full time axis.
    FreshDraw,
}

/// All generator parameters; triples are indexed by `U` in `0..3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub setting: Setting,
    pub id: ScenarioId,
    pub n: usize,
    pub alpha0_by_u: [f64; 3],
    pub alpha_z1: f64,
    pub alpha_uz2_by_u: [f64; 3],
    pub exposure_sd: f64,
    pub beta_a_true: f64,
    pub beta_z2_true: f64,
    pub baseline_by_u: [f64; 3],
    /// Latent-phase hazard scale for `U = 1, 2`; index 0 is unused.
    pub latent_rate_by_u: [f64; 3],
    /// Latent-phase lengths for `U = 1, 2`; index 0 is unused.
    pub thresholds: [f64; 3],
    pub censor_target: (f64, f64),
    pub continuation: LatentContinuation,
    /// Put `z1` rather than `z2` on the `U`-specific exposure slope.
    pub exposure_uses_z1: bool,
}

/// Fills the generator parameters for one of the eight simulation scenarios.
pub fn make_scenario(setting: Setting, id: ScenarioId, n: usize) -> Scenario {
    let (alpha0, mut uz2, base, latent) = match setting {
        Setting::Easy => ([16.0, 8.0, 2.0], [4.0, 2.0, 1.0], [0.15, 0.15, 0.1], [0.0, 0.005, 0.005]),
        Setting::Hard => ([12.0, 8.0, 3.0], [4.5, 2.0, 1.5], [0.035, 0.1, 0.1], [0.0, 0.015, 0.005]),
    };
    let alpha_z1 = match id {
        ScenarioId::A | ScenarioId::C => 1.5,
        ScenarioId::B | ScenarioId::D => 0.5,
    };
    if matches!(id, ScenarioId::C | ScenarioId::D) {
        uz2.iter_mut().for_each(|x| *x *= 0.5);
    }
    Scenario {
        setting,
        id,
        n,
        alpha0_by_u: alpha0,
        alpha_z1,
        alpha_uz2_by_u: uz2,
        exposure_sd: 0.5,
        beta_a_true: -0.1,
        beta_z2_true: 0.1,
        baseline_by_u: base,
        latent_rate_by_u: latent,
        thresholds: [0.0, 65.0, 40.0],
        censor_target: (0.10, 0.15),
        continuation: LatentContinuation::Piecewise,
        exposure_uses_z1: false,
    }
}

impl Scenario {
    /// Hard setting only: route `U = 2` through the 0.015 latent rate as well.
    pub fn with_u2_rate_of_u1(mut self) -> Self {
        self.latent_rate_by_u[2] = self.latent_rate_by_u[1];
        self
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.setting, self.id)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        let ok = self.n >= 1
            && pos(self.exposure_sd)
            && self.baseline_by_u.iter().all(|&x| pos(x))
            && self.latent_rate_by_u[1..].iter().all(|&x| pos(x))
            && self.thresholds[1..].iter().all(|&x| pos(x))
            && 0.0 < self.censor_target.0
            && self.censor_target.0 < self.censor_target.1
            && self.censor_target.1 < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("scenario {} has non-positive rates or sizes", self.label())))
        }
    }

    /// `exp(beta_a A + beta_z2 z2)`.
    pub fn risk_score(&self, a: f64, z2: f64) -> f64 {
        (self.beta_a_true * a + self.beta_z2_true * z2).exp()
    }
}

/// Latent class and measured covariates of one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariates {
    pub u: usize,
    pub z1: f64,
    pub z2: f64,
}

pub fn draw_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Covariates> {
    let u_dist = WeightedIndex::new(U_PROBS).expect("valid class probabilities");
    let z1_dist = Gamma::new(2.0, 0.5).expect("shape 2, rate 2");
    let z2_dist = Bernoulli::new(0.5).expect("p = 0.5");
    (0..n)
        .map(|_| Covariates {
            u: u_dist.sample(rng),
            z1: z1_dist.sample(rng),
            z2: if z2_dist.sample(rng) { 1.0 } else { 0.0 },
        })
        .collect()
}

/// Conditional mean of the exposure.
pub fn exposure_mean(scn: &Scenario, c: &Covariates) -> f64 {
    let slope_cov = if scn.exposure_uses_z1 { c.z1 } else { c.z2 };
    scn.alpha0_by_u[c.u] + scn.alpha_z1 * c.z1 + scn.alpha_uz2_by_u[c.u] * slope_cov
}

pub fn draw_exposure<R: Rng + ?Sized>(scn: &Scenario, c: &Covariates, rng: &mut R) -> f64 {
    let noise: f64 = Normal::new(0.0, scn.exposure_sd).expect("positive sd").sample(rng);
    exposure_mean(scn, c) + noise
}

fn exp_draw<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    Exp::new(rate).expect("positive rate").sample(rng)
}

/// Event time given exposure, `z2` and class. Class 0 has a constant hazard.
/// Classes 1 and 2 first pass through a low-hazard latent phase; an event in
/// that phase is returned as is, otherwise the baseline hazard takes over.
pub fn draw_event_time<R: Rng + ?Sized>(scn: &Scenario, a: f64, z2: f64, u: usize, rng: &mut R) -> f64 {
    let risk = scn.risk_score(a, z2);
    if u == 0 {
        return exp_draw(scn.baseline_by_u[0] * risk, rng);
    }
    let latent = exp_draw(scn.latent_rate_by_u[u] * risk, rng);
    let th = scn.thresholds[u];
    if latent < th {
        return latent;
    }
    let later = exp_draw(scn.baseline_by_u[u] * risk, rng);
    match scn.continuation {
        LatentContinuation::Piecewise => th + later,
        LatentContinuation::FreshDraw => later,
    }
}

/// Expected censored fraction `mean_i (1 - exp(-c T_i))` for exponential
/// censoring at rate `c`.
pub fn censoring_fraction(times: &[f64], rate: f64) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    times.iter().map(|&t| -(-rate * t).exp_m1()).sum::<f64>() / times.len() as f64
}

fn pilot_seed(scn: &Scenario) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15_u64;
    let tag = format!(
        "{}|{:?}|{}|{}",
        scn.label(),
        scn.continuation,
        scn.exposure_uses_z1,
        scn.latent_rate_by_u[2]
    );
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn draw_event_times<R: Rng + ?Sized>(scn: &Scenario, n: usize, rng: &mut R) -> Vec<f64> {
    draw_covariates(n, rng)
        .iter()
        .map(|c| {
            let a = draw_exposure(scn, c, rng);
            draw_event_time(scn, a, c.z2, c.u, rng)
        })
        .collect()
}

/// Finds the exponential censoring rate whose expected censored fraction on
/// a pilot sample sits at the middle of the target band.
pub fn calibrate_censoring_with<R: Rng + ?Sized>(scn: &Scenario, rng: &mut R) -> Result<f64> {
    scn.validate()?;
    let times = draw_event_times(scn, PILOT_N, rng);
    let target = 0.5 * (scn.censor_target.0 + scn.censor_target.1);
    let mut lo = 0.0;
    let mut hi = 1e-3;
    let mut doublings = 0;
    while censoring_fraction(&times, hi) < target {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 20 {
            return Err(Error::Convergence("censoring rate bracket not found".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if censoring_fraction(&times, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Calibrated censoring rate, computed once per scenario from a pilot seed
/// that depends only on the scenario (not on `n`).
pub fn calibrate_censoring(scn: &Scenario) -> Result<f64> {
    static CACHE: OnceLock<Mutex<HashMap<u64, f64>>> = OnceLock::new();
    let key = pilot_seed(scn);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&c) = cache.lock().expect("cache lock").get(&key) {
        return Ok(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let c = calibrate_censoring_with(scn, &mut rng)?;
    cache.lock().expect("cache lock").insert(key, c);
    Ok(c)
}

/// One simulated dataset: `z = (z1)`, `v = (z2)`, true cluster `U`.
pub fn generate_dataset(scn: &Scenario, seed: u64) -> Result<Dataset<f64>> {
    let censor_rate = calibrate_censoring(scn)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let covs = draw_covariates(scn.n, &mut rng);
    let records = covs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let a = draw_exposure(scn, c, &mut rng);
            let t = draw_event_time(scn, a, c.z2, c.u, &mut rng);
            let cens = exp_draw(censor_rate, &mut rng);
            let (time, event) = if t <= cens { (t, 1) } else { (cens, 0) };
            SurvivalRecord::new(i as i64 + 1, time, event, a, vec![c.z1], vec![c.z2]).with_true_cluster(c.u as u32)
        })
        .collect();
    Dataset::validate(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let s = make_scenario(Setting::Easy, ScenarioId::A, 600);
        assert_eq!(s.alpha0_by_u, [16.0, 8.0, 2.0]);
        assert_eq!(s.alpha_z1, 1.5);
        assert_eq!(s.alpha_uz2_by_u, [4.0, 2.0, 1.0]);
        let s = make_scenario(Setting::Hard, ScenarioId::B, 600);
        assert_eq!(s.alpha0_by_u, [12.0, 8.0, 3.0]);
        assert_eq!(s.alpha_z1, 0.5);
        assert_eq!(s.alpha_uz2_by_u, [4.5, 2.0, 1.5]);
        let s = make_scenario(Setting::Easy, ScenarioId::D, 600);
        assert_eq!(s.alpha_uz2_by_u, [2.0, 1.0, 0.5]);
        assert_eq!(s.alpha_z1, 0.5);
    }

    #[test]
    fn parse_enums() {
        assert_eq!("Hard".parse::<Setting>().unwrap(), Setting::Hard);
        assert_eq!("c".parse::<ScenarioId>().unwrap(), ScenarioId::C);
        assert!("medium".parse::<Setting>().is_err());
        assert!("e".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn censoring_fraction_limits() {
        let t = [1.0, 5.0, 20.0];
        assert_eq!(censoring_fraction(&t, 0.0), 0.0);
        assert!(censoring_fraction(&t, 1e6) > 1.0 - 1e-12);
    }

    #[test]
    fn latent_phase_probability() {
        let s = make_scenario(Setting::Easy, ScenarioId::A, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reps = 100_000;
        let early = (0..reps).filter(|_| draw_event_time(&s, 10.0, 0.0, 1, &mut rng) < 65.0).count();
        let p = early as f64 / reps as f64;
        let exact = 1.0 - (-0.005 * (-1.0_f64).exp() * 65.0).exp();
        assert!((exact - 0.1127).abs() < 1e-4);
        assert!((p - exact).abs() < 0.005, "{p}");
    }
}
