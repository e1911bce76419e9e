//! Auxiliary-variable Gibbs updates for the concentration parameters and
//! the self-transition proportion.
//!
//! Each concentration update alternates its auxiliary variables and the
//! concentration [`INNER_ITERATIONS`] times, starting from the current
//! value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BetaPrior, GammaPrior, ModelState, SamplerMode, SamplerOptions};
use crate::prob::{sample_bernoulli, sample_beta, sample_crt, sample_gamma};
use crate::rng::RngState;

pub const INNER_ITERATIONS: usize = 50;

/// Auxiliary variables from the most recent updates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxVars {
    /// Per-restaurant Beta variables of the `alpha + kappa` update.
    pub r: Vec<f64>,
    /// Per-restaurant indicators of the `alpha + kappa` update.
    pub s_ind: Vec<bool>,
    /// Beta variable of the `gamma` update.
    pub eta: f64,
    /// Per-state Beta variables of the `sigma` update.
    pub r_prime: Vec<f64>,
    /// Per-state indicators of the `sigma` update.
    pub s_prime: Vec<bool>,
}

/// Concentration `c` of several Chinese restaurants given the total table
/// count and the customer count of each restaurant. Empty restaurants carry
/// no information and are skipped.
fn crp_concentration(
    current: f64,
    tables: usize,
    customers: &[usize],
    prior: GammaPrior,
    iterations: usize,
    r_out: &mut Vec<f64>,
    s_out: &mut Vec<bool>,
    rng: &mut RngState,
) -> Result<f64> {
    let occupied: Vec<usize> = customers.iter().copied().filter(|n| *n > 0).collect();
    if occupied.is_empty() {
        r_out.clear();
        s_out.clear();
        return prior.sample(rng);
    }
    let mut c = current;
    for _ in 0..iterations {
        r_out.clear();
        s_out.clear();
        let mut log_r = 0.0;
        let mut s_total = 0usize;
        for &n in &occupied {
            let r = sample_beta(c + 1.0, n as f64, rng)?;
            let s = sample_bernoulli(n as f64 / (n as f64 + c), rng);
            log_r += r.ln();
            s_total += s as usize;
            r_out.push(r);
            s_out.push(s);
        }
        let shape = prior.shape + tables as f64 - s_total as f64;
        let rate = prior.rate - log_r;
        debug_assert!(rate >= prior.rate);
        c = sample_gamma(shape, rate, rng)?;
    }
    Ok(c)
}

/// `alpha + kappa` given total tables `m_total` and restaurant sizes
/// `row_totals` (transitions out of each state).
pub fn sample_alpha_plus_kappa(
    current: f64,
    m_total: usize,
    row_totals: &[usize],
    prior: GammaPrior,
    aux: &mut AuxVars,
    rng: &mut RngState,
) -> Result<f64> {
    check_tables(m_total, row_totals)?;
    crp_concentration(
        current,
        m_total,
        row_totals,
        prior,
        INNER_ITERATIONS,
        &mut aux.r,
        &mut aux.s_ind,
        rng,
    )
}

/// Emission concentration `sigma` given the total number of distinct
/// components across states and the frames held by each state.
pub fn sample_sigma(
    current: f64,
    components_total: usize,
    state_frames: &[usize],
    prior: GammaPrior,
    aux: &mut AuxVars,
    rng: &mut RngState,
) -> Result<f64> {
    check_tables(components_total, state_frames)?;
    crp_concentration(
        current,
        components_total,
        state_frames,
        prior,
        INNER_ITERATIONS,
        &mut aux.r_prime,
        &mut aux.s_prime,
        rng,
    )
}

fn check_tables(tables: usize, customers: &[usize]) -> Result<()> {
    let occupied = customers.iter().filter(|n| **n > 0).count();
    let total: usize = customers.iter().sum();
    if tables < occupied || tables > total {
        return Err(Error::Consistency(format!(
            "{tables} tables for {total} customers in {occupied} restaurants"
        )));
    }
    Ok(())
}

/// Top-level concentration `gamma` given the number of dishes `k_bar` and
/// the number of informative tables `m_bar_total`, through the two-Gamma
/// mixture with auxiliary `eta`.
pub fn sample_gamma_conc(
    current: f64,
    k_bar: usize,
    m_bar_total: usize,
    prior: GammaPrior,
    aux: &mut AuxVars,
    rng: &mut RngState,
) -> Result<f64> {
    if m_bar_total == 0 {
        return prior.sample(rng);
    }
    check_dishes(k_bar, m_bar_total)?;
    let m = m_bar_total as f64;
    let shape = prior.shape + k_bar as f64;
    let mut g = current;
    for _ in 0..INNER_ITERATIONS {
        let eta = sample_beta(g + 1.0, m, rng)?;
        aux.eta = eta;
        let rate = prior.rate - eta.ln();
        // odds of the higher-shape component
        let odds = (shape - 1.0) / (m * rate);
        let p_high = odds / (1.0 + odds);
        g = if sample_bernoulli(p_high, rng) {
            sample_gamma(shape, rate, rng)?
        } else {
            sample_gamma(shape - 1.0, rate, rng)?
        };
    }
    Ok(g)
}

/// Same law as [`sample_gamma_conc`] through an explicit binary indicator
/// in place of the mixture.
pub fn sample_gamma_conc_indicator(
    current: f64,
    k_bar: usize,
    m_bar_total: usize,
    prior: GammaPrior,
    aux: &mut AuxVars,
    rng: &mut RngState,
) -> Result<f64> {
    if m_bar_total == 0 {
        return prior.sample(rng);
    }
    check_dishes(k_bar, m_bar_total)?;
    let m = m_bar_total as f64;
    let mut g = current;
    for _ in 0..INNER_ITERATIONS {
        let eta = sample_beta(g + 1.0, m, rng)?;
        aux.eta = eta;
        let ind = sample_bernoulli(m / (m + g), rng) as usize as f64;
        g = sample_gamma(prior.shape + k_bar as f64 - ind, prior.rate - eta.ln(), rng)?;
    }
    Ok(g)
}

fn check_dishes(k_bar: usize, m_bar_total: usize) -> Result<()> {
    if k_bar == 0 || k_bar > m_bar_total {
        return Err(Error::Consistency(format!(
            "{k_bar} dishes over {m_bar_total} tables"
        )));
    }
    Ok(())
}

/// Self-transition proportion given override and table totals.
pub fn sample_rho(
    w_total: usize,
    m_total: usize,
    prior: BetaPrior,
    rng: &mut RngState,
) -> Result<f64> {
    if w_total > m_total {
        return Err(Error::Consistency(format!(
            "{w_total} overrides among {m_total} tables"
        )));
    }
    sample_beta(
        w_total as f64 + prior.a,
        (m_total - w_total) as f64 + prior.b,
        rng,
    )
}

/// Concentration `c` of symmetric `Dir(c / categories)` weight vectors,
/// one per group, given each group's category counts, with the weights
/// integrated out.
pub fn sample_conc_weak_limit(
    current: f64,
    groups: &[Vec<usize>],
    categories: usize,
    prior: GammaPrior,
    rng: &mut RngState,
) -> Result<f64> {
    if categories == 0 {
        return Err(Error::param(
            "weak-limit update needs at least one category",
        ));
    }
    if groups.iter().all(|g| g.iter().all(|x| *x == 0)) {
        return prior.sample(rng);
    }
    let l = categories as f64;
    let mut c = current;
    for _ in 0..INNER_ITERATIONS {
        let mut log_r = 0.0;
        let mut s_total = 0usize;
        let mut t_total = 0usize;
        for g in groups {
            let n: usize = g.iter().sum();
            if n == 0 {
                continue;
            }
            log_r += sample_beta(c + 1.0, n as f64, rng)?.ln();
            s_total += sample_bernoulli(n as f64 / (n as f64 + c), rng) as usize;
            t_total += g.iter().map(|&x| sample_crt(x, c / l, rng)).sum::<usize>();
        }
        c = sample_gamma(
            prior.shape + t_total as f64 - s_total as f64,
            prior.rate - log_r,
            rng,
        )?;
    }
    Ok(c)
}

/// Number of dishes with at least one informative table, and the
/// informative table total. `m_bar_cols` are the column totals of the
/// considered-dish table; `initial` is the label of the first step, which
/// is drawn from the global weights directly and so counts as one more
/// informative table.
pub fn k_bar(m_bar_cols: &[usize], initial: Option<usize>) -> (usize, usize) {
    let mut k = 0;
    let mut total = 0;
    for (c, &m) in m_bar_cols.iter().enumerate() {
        let extra = (initial == Some(c)) as usize;
        if m + extra > 0 {
            k += 1;
        }
        total += m + extra;
    }
    (k, total)
}

/// Resamples the enabled hyperparameters of a state whose auxiliary tables
/// are current. Global weights and mixture weights are treated as
/// integrated out, so callers redraw them afterwards.
pub fn resample_hyperparams(
    state: &mut ModelState,
    opts: &SamplerOptions,
    component_slots: Option<usize>,
    rng: &mut RngState,
) -> Result<()> {
    let counts = &state.counts;
    let hp = &mut state.hp;
    let priors = hp.priors;
    let k = counts.num_states();
    if opts.resample.alpha_plus_kappa {
        let rows: Vec<usize> = (0..k).map(|j| counts.row_total(j)).collect();
        hp.alpha_plus_kappa = sample_alpha_plus_kappa(
            hp.alpha_plus_kappa,
            counts.m_total(),
            &rows,
            priors.alpha_plus_kappa,
            &mut state.aux,
            rng,
        )?;
    }
    if !opts.sticky {
        hp.rho = 0.0;
    } else if opts.resample.rho {
        hp.rho = sample_rho(counts.w_total(), counts.m_total(), priors.rho, rng)?;
    }
    let fixed_beta = state.mode == SamplerMode::Blocked && opts.fixed_uniform_beta;
    if opts.resample.gamma && !fixed_beta {
        let cols = counts.m_bar_col_totals();
        let initial = state.z.first().copied();
        hp.gamma = match state.mode {
            SamplerMode::Direct => {
                let (kb, total) = k_bar(&cols, initial);
                sample_gamma_conc(hp.gamma, kb, total, priors.gamma, &mut state.aux, rng)?
            }
            SamplerMode::Blocked => {
                let mut group = cols;
                if let Some(z0) = initial {
                    group[z0] += 1;
                }
                let l = group.len();
                sample_conc_weak_limit(hp.gamma, &[group], l, priors.gamma, rng)?
            }
        };
    }
    if opts.resample.sigma && state.emissions.is_mixture() {
        hp.sigma = match component_slots {
            None => {
                let used: usize = counts
                    .n_prime
                    .iter()
                    .map(|r| r.iter().filter(|c| **c > 0).count())
                    .sum();
                let frames: Vec<usize> = counts.n_prime.iter().map(|r| r.iter().sum()).collect();
                sample_sigma(hp.sigma, used, &frames, priors.sigma, &mut state.aux, rng)?
            }
            Some(slots) => {
                sample_conc_weak_limit(hp.sigma, &counts.n_prime, slots, priors.sigma, rng)?
            }
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_one_sample, ks_two_sample, GridCdf};
    use statrs::function::gamma::ln_gamma;

    fn gamma_logpdf(p: GammaPrior, x: f64) -> f64 {
        (p.shape - 1.0) * x.ln() - p.rate * x
    }

    fn crp_posterior(
        p: GammaPrior,
        tables: usize,
        customers: &[usize],
    ) -> impl Fn(f64) -> f64 + '_ {
        move |c: f64| {
            gamma_logpdf(p, c)
                + tables as f64 * c.ln()
                + customers
                    .iter()
                    .map(|&n| ln_gamma(c) - ln_gamma(c + n as f64))
                    .sum::<f64>()
        }
    }

    fn chain(n: usize, mut step: impl FnMut(f64) -> f64, init: f64) -> Vec<f64> {
        let mut x = init;
        (0..n)
            .map(|_| {
                x = step(x);
                x
            })
            .collect()
    }

    #[test]
    fn alpha_plus_kappa_matches_quadrature() {
        let prior = GammaPrior {
            shape: 1.0,
            rate: 0.01,
        };
        let customers = [50usize];
        let oracle =
            GridCdf::from_log_density(crp_posterior(prior, 8, &customers), 1e-4, 1e3, 40_000);
        let mut rng = RngState::new(1);
        let mut aux = AuxVars::default();
        let xs = chain(
            10_000,
            |c| sample_alpha_plus_kappa(c, 8, &customers, prior, &mut aux, &mut rng).unwrap(),
            1.0,
        );
        let r = ks_one_sample(&xs, |x| oracle.cdf(x));
        assert!(r.p_value > 0.01, "{r:?}");
    }

    #[test]
    fn sigma_matches_quadrature() {
        let prior = GammaPrior {
            shape: 1.0,
            rate: 0.01,
        };
        let frames = [30usize, 12, 0, 7];
        let oracle = GridCdf::from_log_density(crp_posterior(prior, 9, &frames), 1e-4, 1e3, 40_000);
        let mut rng = RngState::new(2);
        let mut aux = AuxVars::default();
        let xs = chain(
            10_000,
            |c| sample_sigma(c, 9, &frames, prior, &mut aux, &mut rng).unwrap(),
            1.0,
        );
        let r = ks_one_sample(&xs, |x| oracle.cdf(x));
        assert!(r.p_value > 0.01, "{r:?}");
        assert_eq!(aux.r_prime.len(), 3);
    }

    #[test]
    fn gamma_matches_quadrature_and_indicator_path() {
        let prior = GammaPrior {
            shape: 1.0,
            rate: 0.01,
        };
        let (k, m) = (5usize, 40usize);
        let oracle = GridCdf::from_log_density(
            |g: f64| {
                gamma_logpdf(prior, g) + k as f64 * g.ln() + ln_gamma(g) - ln_gamma(g + m as f64)
            },
            1e-4,
            1e3,
            40_000,
        );
        let mut rng = RngState::new(3);
        let mut aux = AuxVars::default();
        let xs = chain(
            10_000,
            |g| sample_gamma_conc(g, k, m, prior, &mut aux, &mut rng).unwrap(),
            1.0,
        );
        let r = ks_one_sample(&xs, |x| oracle.cdf(x));
        assert!(r.p_value > 0.01, "{r:?}");
        let ys = chain(
            10_000,
            |g| sample_gamma_conc_indicator(g, k, m, prior, &mut aux, &mut rng).unwrap(),
            1.0,
        );
        let r2 = ks_two_sample(&xs, &ys);
        assert!(r2.p_value > 0.01, "{r2:?}");
    }

    #[test]
    fn weak_limit_matches_quadrature() {
        let prior = GammaPrior {
            shape: 2.0,
            rate: 0.5,
        };
        let groups = vec![
            vec![10usize, 0, 3, 1, 0],
            vec![0, 0, 0, 0, 0],
            vec![2, 2, 0, 0, 6],
        ];
        let l = 5.0;
        let oracle = GridCdf::from_log_density(
            |c: f64| {
                let mut v = gamma_logpdf(prior, c);
                for g in &groups {
                    let n: usize = g.iter().sum();
                    v += ln_gamma(c) - ln_gamma(c + n as f64);
                    for &x in g {
                        v += ln_gamma(c / l + x as f64) - ln_gamma(c / l);
                    }
                }
                v
            },
            1e-4,
            1e3,
            40_000,
        );
        let mut rng = RngState::new(4);
        let xs = chain(
            10_000,
            |c| sample_conc_weak_limit(c, &groups, 5, prior, &mut rng).unwrap(),
            1.0,
        );
        let r = ks_one_sample(&xs, |x| oracle.cdf(x));
        assert!(r.p_value > 0.01, "{r:?}");
    }

    fn gamma_cdf(p: GammaPrior) -> GridCdf {
        GridCdf::from_log_density(|x| gamma_logpdf(p, x), 1e-8, 1e4, 40_000)
    }

    #[test]
    fn empty_data_reproduces_priors() {
        let prior = GammaPrior {
            shape: 2.0,
            rate: 1.5,
        };
        let oracle = gamma_cdf(prior);
        let mut rng = RngState::new(5);
        let mut aux = AuxVars::default();
        let a = chain(
            10_000,
            |c| sample_alpha_plus_kappa(c, 0, &[0, 0], prior, &mut aux, &mut rng).unwrap(),
            1.0,
        );
        assert!(ks_one_sample(&a, |x| oracle.cdf(x)).p_value > 0.01);
        assert!(aux.s_ind.is_empty());
        let g = chain(
            10_000,
            |c| sample_gamma_conc(c, 0, 0, prior, &mut aux, &mut rng).unwrap(),
            1.0,
        );
        assert!(ks_one_sample(&g, |x| oracle.cdf(x)).p_value > 0.01);
        let s = chain(
            10_000,
            |c| sample_sigma(c, 0, &[], prior, &mut aux, &mut rng).unwrap(),
            1.0,
        );
        assert!(ks_one_sample(&s, |x| oracle.cdf(x)).p_value > 0.01);
        let w = chain(
            10_000,
            |c| sample_conc_weak_limit(c, &[vec![0, 0]], 2, prior, &mut rng).unwrap(),
            1.0,
        );
        assert!(ks_one_sample(&w, |x| oracle.cdf(x)).p_value > 0.01);
        let beta = BetaPrior { a: 10.0, b: 1.0 };
        // Beta(10, 1) has CDF x^10
        let r: Vec<f64> = (0..10_000)
            .map(|_| sample_rho(0, 0, beta, &mut rng).unwrap())
            .collect();
        assert!(ks_one_sample(&r, |x| x.clamp(0.0, 1.0).powi(10)).p_value > 0.01);
    }

    #[test]
    fn rho_cases() {
        let mut rng = RngState::new(6);
        let p = BetaPrior { a: 1.0, b: 1.0 };
        let xs: Vec<f64> = (0..40_000)
            .map(|_| sample_rho(3, 10, p, &mut rng).unwrap())
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        // Beta(4, 8): variance 32 / (144 * 13)
        let se = (32.0 / (144.0 * 13.0) / xs.len() as f64).sqrt();
        assert!((m - 1.0 / 3.0).abs() < 4.0 * se);
        let full: f64 = (0..1000)
            .map(|_| sample_rho(50, 50, p, &mut rng).unwrap())
            .sum::<f64>()
            / 1000.0;
        assert!(full > 0.95);
        assert!(matches!(
            sample_rho(4, 3, p, &mut rng),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn support_is_preserved() {
        let mut rng = RngState::new(7);
        let mut aux = AuxVars::default();
        let prior = GammaPrior {
            shape: 0.5,
            rate: 2.0,
        };
        let mut c = 1.0;
        for _ in 0..200 {
            c = sample_alpha_plus_kappa(c, 3, &[1, 1, 5], prior, &mut aux, &mut rng).unwrap();
            assert!(c > 0.0 && c.is_finite());
            assert!(aux.r.iter().all(|r| *r > 0.0 && *r < 1.0));
        }
    }

    #[test]
    fn k_bar_counts_initial_customer() {
        assert_eq!(k_bar(&[3, 0, 2], None), (2, 5));
        assert_eq!(k_bar(&[3, 0, 2], Some(1)), (3, 6));
        assert_eq!(k_bar(&[3, 0, 2], Some(0)), (2, 6));
    }
}
