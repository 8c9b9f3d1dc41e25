#![allow(dead_code)]

/// Kolmogorov–Smirnov distance between the empirical law of `draws` and the
/// distribution with (unnormalized) density `dens` tabulated on the
/// increasing grid `xs`.
pub fn ks_vs_grid(draws: &[f64], xs: &[f64], dens: &[f64]) -> f64 {
    let mut cdf = vec![0.0; xs.len()];
    for j in 1..xs.len() {
        cdf[j] = cdf[j - 1] + 0.5 * (dens[j] + dens[j - 1]) * (xs[j] - xs[j - 1]);
    }
    let total = cdf[xs.len() - 1];
    cdf.iter_mut().for_each(|c| *c /= total);
    let at = |x: f64| -> f64 {
        if x <= xs[0] {
            return 0.0;
        }
        if x >= xs[xs.len() - 1] {
            return 1.0;
        }
        let j = xs.partition_point(|&g| g < x);
        let w = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
        cdf[j - 1] + w * (cdf[j] - cdf[j - 1])
    };
    ks_vs_cdf(draws, at)
}

pub fn ks_vs_cdf(draws: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Density tabulated from a log density, shifted by its max for stability.
pub fn tabulate(xs: &[f64], log_dens: impl Fn(f64) -> f64) -> Vec<f64> {
    let l: Vec<f64> = xs.iter().map(|&x| log_dens(x)).collect();
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    l.iter().map(|v| (v - m).exp()).collect()
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean) * (x - mean) / (2.0 * var)
}
