//! Goodness-of-fit and summary statistics used by the diagnostics and the
//! sampler validation suites.

use std::collections::HashMap;
use std::hash::Hash;

/// Outcome of a Kolmogorov-Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.0 {
        // CDF series that converges fast for small arguments
        let c = (2.0 * std::f64::consts::PI).sqrt() / x;
        let e = -std::f64::consts::PI.powi(2) / (8.0 * x * x);
        let cdf: f64 = (1..=20)
            .map(|k| ((2 * k - 1) as f64).powi(2) * e)
            .map(f64::exp)
            .sum::<f64>()
            * c;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        for k in 1..=100 {
            let term = (-2.0 * (k * k) as f64 * x * x).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-16 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}

fn ks_pvalue(d: f64, effective_n: f64) -> f64 {
    let sn = effective_n.sqrt();
    kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
}

/// One-sample test of `samples` against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    KsResult {
        statistic: d,
        p_value: ks_pvalue(d, n),
    }
}

/// Two-sample test. Ties across the samples are handled by advancing both
/// empirical CDFs past the shared value before comparing.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (na, nb) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let v = xs[i].min(ys[j]);
        while i < na && xs[i] <= v {
            i += 1;
        }
        while j < nb && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let en = (na * nb) as f64 / (na + nb) as f64;
    KsResult {
        statistic: d,
        p_value: ks_pvalue(d, en),
    }
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantiles(data: &[f64], qs: &[f64]) -> Vec<f64> {
    let mut xs = data.to_vec();
    xs.sort_by(f64::total_cmp);
    qs.iter().map(|&q| quantile_sorted(&xs, q)).collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Total variation distance between two pmfs on `0..n`; the shorter one is
/// padded with zeros.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    0.5 * (0..n)
        .map(|i| (p.get(i).copied().unwrap_or(0.0) - q.get(i).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// Total variation distance between two pmfs on arbitrary keys.
pub fn total_variation_map<K: Eq + Hash>(p: &HashMap<K, f64>, q: &HashMap<K, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, v) in p {
        sum += (v - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, v) in q {
        if !p.contains_key(k) {
            sum += v.abs();
        }
    }
    0.5 * sum
}

/// Normalized frequencies of the given keys.
pub fn empirical_pmf<K: Eq + Hash + Clone>(draws: impl IntoIterator<Item = K>) -> HashMap<K, f64> {
    let mut counts: HashMap<K, f64> = HashMap::new();
    let mut n = 0.0;
    for k in draws {
        *counts.entry(k).or_default() += 1.0;
        n += 1.0;
    }
    counts.values_mut().for_each(|v| *v /= n);
    counts
}

/// CDF of a positive scalar with the given unnormalized log-density,
/// tabulated by trapezoid quadrature on a log-spaced grid over `[lo, hi]`.
#[derive(Debug, Clone)]
pub struct GridCdf {
    xs: Vec<f64>,
    cdf: Vec<f64>,
}

impl GridCdf {
    pub fn from_log_density(
        log_density: impl Fn(f64) -> f64,
        lo: f64,
        hi: f64,
        points: usize,
    ) -> Self {
        let (a, b) = (lo.ln(), hi.ln());
        let us: Vec<f64> = (0..points)
            .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
            .collect();
        let xs: Vec<f64> = us.iter().map(|u| u.exp()).collect();
        // density in u = log x picks up the Jacobian x
        let logs: Vec<f64> = xs.iter().map(|&x| log_density(x) + x.ln()).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let mut cdf = vec![0.0; points];
        for i in 1..points {
            cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * (us[i] - us[i - 1]);
        }
        let total = cdf[points - 1];
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { xs, cdf }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return 0.0;
        }
        if x >= self.xs[self.xs.len() - 1] {
            return 1.0;
        }
        let i = self.xs.partition_point(|v| *v <= x);
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        let w = (x.ln() - x0.ln()) / (x1.ln() - x0.ln());
        self.cdf[i - 1] + w * (self.cdf[i] - self.cdf[i - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use rand::Rng;

    #[test]
    fn kolmogorov_reference_values() {
        // classic critical values: P(K > 1.358) = 0.05, P(K > 1.628) = 0.01
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-3);
        assert!((kolmogorov_sf(0.5) - 0.9639).abs() < 1e-3);
        // both series agree at the switch point
        let lo = kolmogorov_sf(1.0 - 1e-9);
        let hi = kolmogorov_sf(1.0);
        assert!((lo - hi).abs() < 1e-8);
    }

    #[test]
    fn ks_uniform_is_not_rejected() {
        let mut rng = RngState::new(1);
        let xs: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let r = ks_one_sample(&xs, |x| x.clamp(0.0, 1.0));
        assert!(r.p_value > 0.001);
        let shifted: Vec<f64> = xs.iter().map(|x| x * 0.9).collect();
        assert!(ks_one_sample(&shifted, |x| x.clamp(0.0, 1.0)).p_value < 1e-6);
    }

    #[test]
    fn ks_two_sample_detects_shift() {
        let mut rng = RngState::new(2);
        let a: Vec<f64> = (0..3000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..3000).map(|_| rng.random::<f64>()).collect();
        assert!(ks_two_sample(&a, &b).p_value > 0.001);
        let c: Vec<f64> = b.iter().map(|x| x + 0.1).collect();
        assert!(ks_two_sample(&a, &c).p_value < 1e-6);
    }

    #[test]
    fn ks_two_sample_with_ties() {
        let a = vec![1.0, 1.0, 2.0, 2.0];
        let b = vec![1.0, 1.0, 2.0, 2.0];
        assert_eq!(ks_two_sample(&a, &b).statistic, 0.0);
    }

    #[test]
    fn quantiles_interpolate() {
        let q = quantiles(&[3.0, 1.0, 2.0, 4.0], &[0.0, 0.5, 1.0]);
        assert_eq!(q, vec![1.0, 2.5, 4.0]);
    }

    #[test]
    fn grid_cdf_recovers_gamma() {
        // Gamma(3, 2): log-density up to a constant
        let g = GridCdf::from_log_density(|x| 2.0 * x.ln() - 2.0 * x, 1e-6, 100.0, 20_000);
        // P(X <= 1.5) for Gamma(3, rate 2) = 1 - e^{-3}(1 + 3 + 4.5)
        let exact = 1.0 - (-3.0f64).exp() * 8.5;
        assert!((g.cdf(1.5) - exact).abs() < 1e-5);
    }

    #[test]
    fn tv_cases() {
        assert_eq!(total_variation(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert_eq!(total_variation(&[1.0], &[0.0, 1.0]), 1.0);
        let p = empirical_pmf(vec!["a", "a", "b", "c"]);
        let q = empirical_pmf(vec!["a", "b"]);
        assert!((total_variation_map(&p, &q) - 0.25).abs() < 1e-12);
    }
}
