//! Collapsed direct-assignment Gibbs sampler.
//!
//! Transition rows and emission parameters are integrated out; the global
//! weights are represented by the `K` instantiated states plus the leftover
//! stick mass. The first step is drawn from the global weights.

use statrs::function::gamma::ln_gamma;

use crate::emission::{EmissionConfig, EmissionModel};
use crate::error::{Error, Result};
use crate::hyper::{resample_hyperparams, AuxVars};
use crate::model::{CountTables, Hyperparams, ModelState, SamplerMode, SamplerOptions};
use crate::obs::{Datum, Observations};
use crate::prob::{
    log_sum_exp, sample_beta, sample_binomial, sample_categorical_log, sample_crt,
    sample_dirichlet_with_zeros,
};
use crate::rng::RngState;

/// Floor applied to sampled global weights.
pub const BETA_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectSweepReport {
    /// Steps that opened a new state during the sweep.
    pub accepted_new_states: usize,
    /// Occupied states after the sweep.
    pub k: usize,
    /// `log p(y | z)` with parameters integrated out.
    pub log_lik: f64,
    /// `log p(y, z | beta, hyperparameters)`.
    pub joint_log_lik: f64,
}

fn check_supported(em: &EmissionModel, obs: &Observations) -> Result<()> {
    em.check_observations(obs)?;
    if !em.is_conjugate() {
        return Err(Error::Unsupported(
            "the direct sampler needs a conjugate base measure".into(),
        ));
    }
    if em.is_mixture() && !obs.is_untied() {
        return Err(Error::Unsupported(
            "mixture emissions in the direct sampler need one frame per step".into(),
        ));
    }
    Ok(())
}

/// Builds an initial state by drawing each label in turn as if its
/// observation were the last one, then drawing the auxiliary tables and the
/// global weights.
pub fn init_direct(
    obs: &Observations,
    emission: EmissionConfig,
    mut hp: Hyperparams,
    opts: &SamplerOptions,
    rng: &mut RngState,
) -> Result<ModelState> {
    let em = EmissionModel::new(emission)?;
    check_supported(&em, obs)?;
    if !opts.sticky {
        hp.rho = 0.0;
    }
    let mixture = em.is_mixture();
    let mut state = ModelState {
        mode: SamplerMode::Direct,
        hp,
        beta: Vec::new(),
        beta_rest: 1.0,
        pi: Vec::new(),
        z: Vec::with_capacity(obs.num_steps()),
        s: if mixture {
            vec![0; obs.num_frames()]
        } else {
            Vec::new()
        },
        counts: CountTables::zeros(0),
        emissions: em,
        aux: AuxVars::default(),
    };
    let mut scratch = Scratch::default();
    for t in 0..obs.num_steps() {
        let prev = state.z.last().copied();
        conditional(&mut state, obs, t, prev, None, opts, &mut scratch)?;
        let k = sample_categorical_log(&scratch.logw, rng)?;
        state.z.push(usize::MAX);
        assign(&mut state, obs, t, k, &mut scratch, opts, rng)?;
    }
    remove_empty_states(&mut state);
    sample_auxiliary(&mut state, rng)?;
    resample_beta(&mut state, rng)?;
    Ok(state)
}

#[derive(Default)]
struct Scratch {
    logw: Vec<f64>,
    /// Per candidate state: log-weights of existing components then the
    /// new-component slot.
    comp_logw: Vec<Vec<f64>>,
}

fn step_frames<'a>(obs: &'a Observations, t: usize) -> Vec<Datum<'a>> {
    obs.step_frames(t).map(|f| obs.frame(f)).collect()
}

/// Log-weights over the `K` states and one new state for step `t`, given
/// neighbours `prev` and `next`. Step `t` must already be removed from all
/// tallies and caches.
fn conditional(
    state: &mut ModelState,
    obs: &Observations,
    t: usize,
    prev: Option<usize>,
    next: Option<usize>,
    opts: &SamplerOptions,
    scratch: &mut Scratch,
) -> Result<()> {
    let k_count = state.beta.len();
    let alpha = state.hp.alpha();
    let kappa = state.hp.kappa();
    let apk = alpha + kappa;
    let frames = step_frames(obs, t);
    scratch.logw.clear();
    scratch.comp_logw.resize(k_count + 1, Vec::new());
    let mixture = state.emissions.is_mixture();
    let sigma = state.hp.sigma;
    for k in 0..=k_count {
        let is_new = k == k_count;
        let prior = if is_new {
            let beta_new = state.beta_rest.max(BETA_FLOOR);
            let incoming = match prev {
                None => beta_new,
                Some(_) => alpha * beta_new,
            };
            let outgoing = match next {
                None => 1.0,
                Some(q) => alpha * state.beta[q] / apk,
            };
            incoming * outgoing
        } else {
            let beta_k = state.beta[k].max(BETA_FLOOR);
            let self_in = prev == Some(k);
            let incoming = match prev {
                None => beta_k,
                Some(p) => {
                    alpha * beta_k + state.counts.n[p][k] as f64 + if self_in { kappa } else { 0.0 }
                }
            };
            let outgoing = match next {
                None => 1.0,
                Some(q) => {
                    let stick = (k == q) as u8 as f64;
                    let both = (self_in && k == q) as u8 as f64;
                    let row: usize = state.counts.n[k].iter().sum();
                    (alpha * state.beta[q] + state.counts.n[k][q] as f64 + kappa * stick + both)
                        / (apk + row as f64 + self_in as u8 as f64)
                }
            };
            incoming * outgoing
        };
        let lik = if mixture {
            let y = frames[0];
            let cw = &mut scratch.comp_logw[k];
            cw.clear();
            if !is_new {
                let total = state.emissions.state_count(k) as f64;
                let comps = state.emissions.num_components(k);
                let ln_denom = (sigma + total).ln();
                for j in 0..comps {
                    let nkj = state.emissions.stats(k, j).count() as f64;
                    let weight = match opts.component_cap {
                        None => nkj,
                        Some(cap) => nkj + sigma / cap as f64,
                    };
                    cw.push(weight.ln() - ln_denom + state.emissions.predictive_loglik(k, j, y)?);
                }
                let new_weight = match opts.component_cap {
                    None => sigma,
                    Some(cap) if comps < cap => (cap - comps) as f64 * sigma / cap as f64,
                    Some(_) => 0.0,
                };
                cw.push(if new_weight > 0.0 {
                    new_weight.ln() - ln_denom + state.emissions.prior_predictive_loglik(y)?
                } else {
                    f64::NEG_INFINITY
                });
            } else {
                cw.push(state.emissions.prior_predictive_loglik(y)?);
            }
            log_sum_exp(cw)
        } else if is_new {
            state.emissions.group_predictive_loglik(None, &frames)?
        } else {
            state
                .emissions
                .group_predictive_loglik(Some((k, 0)), &frames)?
        };
        scratch.logw.push(prior.ln() + lik);
    }
    Ok(())
}

/// Sets `z[t] = k` (opening a new state when `k == K`), draws the mixture
/// component if needed, and adds step `t` to every tally.
fn assign(
    state: &mut ModelState,
    obs: &Observations,
    t: usize,
    k: usize,
    scratch: &mut Scratch,
    _opts: &SamplerOptions,
    rng: &mut RngState,
) -> Result<bool> {
    let opened = k == state.beta.len();
    if opened {
        let b = sample_beta(1.0, state.hp.gamma, rng)?;
        state.beta.push(b * state.beta_rest);
        state.beta_rest *= 1.0 - b;
        state.counts.push_state();
        state.emissions.push_state();
    }
    state.z[t] = k;
    if t > 0 {
        state.counts.n[state.z[t - 1]][k] += 1;
    }
    if t + 1 < state.z.len() && state.z[t + 1] != usize::MAX {
        state.counts.n[k][state.z[t + 1]] += 1;
    }
    state.counts.occupancy[k] += 1;
    if state.emissions.is_mixture() {
        let f = t;
        let cw = &scratch.comp_logw[k];
        let choice = if opened {
            0
        } else {
            sample_categorical_log(cw, rng)?
        };
        let comps = state.emissions.num_components(k);
        let j = if choice >= comps {
            state.counts.n_prime[k].push(0);
            state.emissions.push_component(k)
        } else {
            choice
        };
        state.s[f] = j;
        state.counts.n_prime[k][j] += 1;
        state.emissions.add(k, j, obs.frame(f));
    } else {
        for f in obs.step_frames(t) {
            state.emissions.add(k, 0, obs.frame(f));
        }
    }
    Ok(opened)
}

/// Removes step `t` from every tally. Mixture components left empty are
/// dropped at once.
fn unassign(state: &mut ModelState, obs: &Observations, t: usize) -> Result<()> {
    let k = state.z[t];
    if t > 0 {
        state.counts.n[state.z[t - 1]][k] -= 1;
    }
    if t + 1 < state.z.len() {
        state.counts.n[k][state.z[t + 1]] -= 1;
    }
    state.counts.occupancy[k] -= 1;
    if state.emissions.is_mixture() {
        let j = state.s[t];
        state.emissions.remove(k, j, obs.frame(t))?;
        state.counts.n_prime[k][j] -= 1;
        if state.counts.n_prime[k][j] == 0 {
            let last = state.emissions.num_components(k) - 1;
            state.emissions.swap_remove_component(k, j);
            state.counts.n_prime[k].swap_remove(j);
            for tau in 0..state.z.len() {
                if tau != t && state.z[tau] == k && state.s[tau] == last {
                    state.s[tau] = j;
                }
            }
        }
    } else {
        for f in obs.step_frames(t) {
            state.emissions.remove(k, 0, obs.frame(f))?;
        }
    }
    Ok(())
}

/// Resamples `z[t]` from its collapsed conditional. Returns whether a new
/// state was opened.
pub fn sample_zt(
    state: &mut ModelState,
    obs: &Observations,
    t: usize,
    opts: &SamplerOptions,
    rng: &mut RngState,
) -> Result<bool> {
    let mut scratch = Scratch::default();
    sample_zt_with(state, obs, t, opts, &mut scratch, rng)
}

fn sample_zt_with(
    state: &mut ModelState,
    obs: &Observations,
    t: usize,
    opts: &SamplerOptions,
    scratch: &mut Scratch,
    rng: &mut RngState,
) -> Result<bool> {
    if t >= state.z.len() {
        return Err(Error::Index(format!("step {t} of {}", state.z.len())));
    }
    unassign(state, obs, t)?;
    let prev = t.checked_sub(1).map(|p| state.z[p]);
    let next = state.z.get(t + 1).copied();
    conditional(state, obs, t, prev, next, opts, scratch)?;
    let k = sample_categorical_log(&scratch.logw, rng)?;
    assign(state, obs, t, k, scratch, opts, rng)
}

/// Drops states no step uses; their weight returns to the leftover mass.
pub fn remove_empty_states(state: &mut ModelState) {
    for k in (0..state.beta.len()).rev() {
        if state.counts.occupancy[k] > 0 {
            continue;
        }
        let last = state.beta.len() - 1;
        state.beta_rest += state.beta[k];
        state.beta.swap_remove(k);
        state.counts.swap_remove_state(k);
        state.emissions.swap_remove_state(k);
        for z in state.z.iter_mut() {
            if *z == last {
                *z = k;
            }
        }
    }
}

/// Table counts: `m[j][k]` is the number of tables opened by `n[j][k]`
/// customers at concentration `alpha beta_k + kappa [j == k]`.
pub fn sample_tables_m(
    n: &[Vec<usize>],
    beta: &[f64],
    hp: &Hyperparams,
    rng: &mut RngState,
) -> Vec<Vec<usize>> {
    let alpha = hp.alpha();
    let kappa = hp.kappa();
    n.iter()
        .enumerate()
        .map(|(j, row)| {
            row.iter()
                .enumerate()
                .map(|(k, &count)| {
                    let conc = alpha * beta[k] + if j == k { kappa } else { 0.0 };
                    if count == 0 {
                        0
                    } else if conc <= 0.0 {
                        // zero concentration seats every customer at one table
                        1
                    } else {
                        sample_crt(count, conc, rng)
                    }
                })
                .collect()
        })
        .collect()
}

/// Override totals `w_j ~ Binomial(m_jj, rho / (rho + beta_j (1 - rho)))`.
pub fn sample_overrides_w(
    m: &[Vec<usize>],
    beta: &[f64],
    rho: f64,
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    (0..m.len())
        .map(|j| {
            if rho <= 0.0 {
                return Ok(0);
            }
            let p = rho / (rho + beta[j] * (1.0 - rho));
            sample_binomial(m[j][j], p.min(1.0), rng)
        })
        .collect()
}

/// Considered-dish tables: `m` with the overrides removed from the diagonal.
pub fn compute_mbar(m: &[Vec<usize>], w: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut out = m.to_vec();
    for (j, row) in out.iter_mut().enumerate() {
        row[j] = row[j].checked_sub(w[j]).ok_or_else(|| {
            Error::Consistency(format!(
                "{} overrides exceed {} tables in restaurant {j}",
                w[j], m[j][j]
            ))
        })?;
    }
    Ok(out)
}

/// Draws `m`, `w` and `m_bar` for the current labels and global weights.
pub fn sample_auxiliary(state: &mut ModelState, rng: &mut RngState) -> Result<()> {
    let m = sample_tables_m(&state.counts.n, &state.beta, &state.hp, rng);
    let w = sample_overrides_w(&m, &state.beta, state.hp.rho, rng)?;
    state.counts.m_bar = compute_mbar(&m, &w)?;
    state.counts.m = m;
    state.counts.w = w;
    Ok(())
}

/// `beta ~ Dir(m_bar_1, ..., m_bar_K, gamma)` where `m_bar_k` are the
/// column totals of the considered-dish table (plus the first step).
/// Returns the instantiated weights and the leftover mass.
pub fn sample_beta_direct(
    m_bar_cols: &[usize],
    gamma: f64,
    rng: &mut RngState,
) -> Result<(Vec<f64>, f64)> {
    let mut params: Vec<f64> = m_bar_cols.iter().map(|&c| c as f64).collect();
    params.push(gamma);
    let draw = sample_dirichlet_with_zeros(&params, rng)?.into_inner();
    let rest = draw[draw.len() - 1];
    let beta = draw[..draw.len() - 1]
        .iter()
        .map(|b| b.max(BETA_FLOOR))
        .collect();
    Ok((beta, rest))
}

fn resample_beta(state: &mut ModelState, rng: &mut RngState) -> Result<()> {
    let mut cols = state.counts.m_bar_col_totals();
    if let Some(&z0) = state.z.first() {
        cols[z0] += 1;
    }
    let (beta, rest) = sample_beta_direct(&cols, state.hp.gamma, rng)?;
    state.beta = beta;
    state.beta_rest = rest;
    Ok(())
}

/// One sweep: every label in order, removal of empty states, auxiliary
/// tables, enabled hyperparameters, then the global weights.
pub fn direct_sweep(
    state: &mut ModelState,
    obs: &Observations,
    opts: &SamplerOptions,
    rng: &mut RngState,
) -> Result<DirectSweepReport> {
    if state.mode != SamplerMode::Direct {
        return Err(Error::InvalidState(
            "direct sweep on a blocked-mode state".into(),
        ));
    }
    if state.z.len() != obs.num_steps() {
        return Err(Error::InvalidState(
            "label count differs from the step count".into(),
        ));
    }
    check_supported(&state.emissions, obs)?;
    let mut scratch = Scratch::default();
    let mut opened = 0;
    for t in 0..state.z.len() {
        opened += sample_zt_with(state, obs, t, opts, &mut scratch, rng)? as usize;
    }
    remove_empty_states(state);
    sample_auxiliary(state, rng)?;
    resample_hyperparams(state, opts, opts.component_cap, rng)?;
    resample_beta(state, rng)?;
    let (log_lik, joint_log_lik) = direct_log_likelihoods(state, opts)?;
    Ok(DirectSweepReport {
        accepted_new_states: opened,
        k: state.occupied_states(),
        log_lik,
        joint_log_lik,
    })
}

/// Mixture-emission sweep; same steps as [`direct_sweep`] with each label
/// drawn jointly with its component.
pub fn direct_sweep_dp(
    state: &mut ModelState,
    obs: &Observations,
    opts: &SamplerOptions,
    rng: &mut RngState,
) -> Result<DirectSweepReport> {
    if !state.emissions.is_mixture() {
        return Err(Error::InvalidState(
            "mixture sweep without mixture emissions".into(),
        ));
    }
    direct_sweep(state, obs, opts, rng)
}

/// `(log p(y | z[, s]), log p(y, z[, s] | beta, hyperparameters))` with
/// transition rows and emission parameters integrated out.
pub fn direct_log_likelihoods(state: &ModelState, opts: &SamplerOptions) -> Result<(f64, f64)> {
    let em = &state.emissions;
    let mut lik = 0.0;
    for k in 0..em.num_states() {
        for j in 0..em.num_components(k) {
            lik += em.log_marginal(k, j)?;
        }
    }
    let mut prior = 0.0;
    if let Some(&z0) = state.z.first() {
        prior += state.beta[z0].max(BETA_FLOOR).ln();
    }
    let alpha = state.hp.alpha();
    let kappa = state.hp.kappa();
    for (j, row) in state.counts.n.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            continue;
        }
        prior += ln_gamma(alpha + kappa) - ln_gamma(alpha + kappa + total as f64);
        for (k, &c) in row.iter().enumerate() {
            if c > 0 {
                let a = alpha * state.beta[k] + if j == k { kappa } else { 0.0 };
                prior += ln_gamma(a + c as f64) - ln_gamma(a);
            }
        }
    }
    if em.is_mixture() {
        let sigma = state.hp.sigma;
        for row in &state.counts.n_prime {
            let used: Vec<usize> = row.iter().copied().filter(|c| *c > 0).collect();
            let total: usize = used.iter().sum();
            if total == 0 {
                continue;
            }
            prior += ln_gamma(sigma) - ln_gamma(sigma + total as f64);
            match opts.component_cap {
                None => {
                    prior += used.len() as f64 * sigma.ln();
                    prior += used.iter().map(|&c| ln_gamma(c as f64)).sum::<f64>();
                }
                Some(cap) => {
                    let a = sigma / cap as f64;
                    prior += used
                        .iter()
                        .map(|&c| ln_gamma(a + c as f64) - ln_gamma(a))
                        .sum::<f64>();
                    prior += ln_gamma(cap as f64 + 1.0) - ln_gamma((cap - used.len()) as f64 + 1.0);
                }
            }
        }
    }
    Ok((lik, lik + prior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emission::BaseMeasure;
    use crate::model::{recount, HyperPriors, UpdateFlags};
    use crate::prob::{antoniak_pmf, NiwParams};
    use crate::stats::total_variation;
    use nalgebra::{DMatrix, DVector};

    fn niw() -> EmissionConfig {
        EmissionConfig::new(BaseMeasure::Niw(
            NiwParams::new(
                0.5,
                DVector::zeros(1),
                4.0,
                DMatrix::from_element(1, 1, 1.0),
            )
            .unwrap(),
        ))
    }

    fn hp(alpha: f64, kappa: f64) -> Hyperparams {
        Hyperparams::from_alpha_kappa(1.0, alpha, kappa, 1.0, HyperPriors::default()).unwrap()
    }

    fn obs(values: &[f64]) -> Observations {
        Observations::real(1, values.to_vec()).unwrap()
    }

    fn fixed() -> SamplerOptions {
        SamplerOptions {
            resample: UpdateFlags::NONE,
            ..SamplerOptions::default()
        }
    }

    /// Hand-built single-state state over the given observations.
    fn one_state(values: &[f64], beta: f64, h: Hyperparams) -> (ModelState, Observations) {
        let o = obs(values);
        let mut em = EmissionModel::new(niw()).unwrap();
        em.push_state();
        for v in values {
            em.add(0, 0, Datum::Real(&[*v]));
        }
        let z = vec![0; values.len()];
        let counts = recount(&z, &[], None, 1, 0).unwrap();
        let state = ModelState {
            mode: SamplerMode::Direct,
            hp: h,
            beta: vec![beta],
            beta_rest: 1.0 - beta,
            pi: Vec::new(),
            z,
            s: Vec::new(),
            counts,
            emissions: em,
            aux: AuxVars::default(),
        };
        (state, o)
    }

    #[test]
    fn interior_weights_match_hand_formula() {
        // K = 1, kappa = 0, three observations, resample the middle one
        let h = hp(2.0, 0.0);
        let (mut state, o) = one_state(&[0.1, 0.4, -0.3], 0.6, h);
        unassign(&mut state, &o, 1).unwrap();
        let mut sc = Scratch::default();
        conditional(&mut state, &o, 1, Some(0), Some(0), &fixed(), &mut sc).unwrap();
        // existing: (a b + n_00) (a b + n_00 + 1) / (a + n_0. + 1) with n = 0
        let (a, b) = (2.0f64, 0.6f64);
        let mut em = EmissionModel::new(niw()).unwrap();
        em.push_state();
        em.add(0, 0, Datum::Real(&[0.1]));
        em.add(0, 0, Datum::Real(&[-0.3]));
        let lik = em.predictive_loglik(0, 0, Datum::Real(&[0.4])).unwrap();
        let prior_lik = em.prior_predictive_loglik(Datum::Real(&[0.4])).unwrap();
        let existing = (a * b) * (a * b + 1.0) / (a + 1.0);
        let new = a * a * 0.4 * b / a;
        assert!((sc.logw[0] - (existing.ln() + lik)).abs() < 1e-12);
        assert!((sc.logw[1] - (new.ln() + prior_lik)).abs() < 1e-12);
    }

    #[test]
    fn boundary_weights() {
        let h = hp(2.0, 1.0);
        let (mut state, o) = one_state(&[0.1, 0.4], 0.7, h);
        let mut sc = Scratch::default();
        unassign(&mut state, &o, 0).unwrap();
        conditional(&mut state, &o, 0, None, Some(0), &fixed(), &mut sc).unwrap();
        let mut em = EmissionModel::new(niw()).unwrap();
        em.push_state();
        em.add(0, 0, Datum::Real(&[0.4]));
        let lik = em.predictive_loglik(0, 0, Datum::Real(&[0.1])).unwrap();
        let plik = em.prior_predictive_loglik(Datum::Real(&[0.1])).unwrap();
        // first step: beta_k times the outgoing factor
        let out: f64 = (2.0 * 0.7 + 0.0 + 1.0) / (3.0 + 0.0);
        assert!((sc.logw[0] - (0.7 * out).ln() - lik).abs() < 1e-12);
        assert!((sc.logw[1] - (0.3f64 * 2.0 * 0.7 / 3.0).ln() - plik).abs() < 1e-12);
        assign(
            &mut state,
            &o,
            0,
            0,
            &mut sc,
            &fixed(),
            &mut RngState::new(0),
        )
        .unwrap();
        unassign(&mut state, &o, 1).unwrap();
        conditional(&mut state, &o, 1, Some(0), None, &fixed(), &mut sc).unwrap();
        let mut em = EmissionModel::new(niw()).unwrap();
        em.push_state();
        em.add(0, 0, Datum::Real(&[0.1]));
        let lik = em.predictive_loglik(0, 0, Datum::Real(&[0.4])).unwrap();
        let plik = em.prior_predictive_loglik(Datum::Real(&[0.4])).unwrap();
        // last step: incoming factor only
        assert!((sc.logw[0] - (2.0f64 * 0.7 + 1.0).ln() - lik).abs() < 1e-12);
        assert!((sc.logw[1] - (2.0f64 * 0.3).ln() - plik).abs() < 1e-12);
    }

    #[test]
    fn huge_kappa_sticks_to_previous_state() {
        let o = obs(&[0.0; 30]);
        let mut rng = RngState::new(1);
        let h = Hyperparams::new(1.0, 1e7, 1.0 - 1e-7, 1.0, HyperPriors::default()).unwrap();
        let mut state = init_direct(&o, niw(), h, &fixed(), &mut rng).unwrap();
        for _ in 0..5 {
            direct_sweep(&mut state, &o, &fixed(), &mut rng).unwrap();
        }
        assert_eq!(state.occupied_states(), 1);
    }

    #[test]
    fn tables_follow_antoniak() {
        let h = hp(3.0, 1.5);
        let beta = [0.4, 0.6];
        let n = vec![vec![6, 0], vec![1, 6]];
        let mut rng = RngState::new(2);
        let reps = 100_000;
        let mut hist = vec![0.0; 7];
        for _ in 0..reps {
            let m = sample_tables_m(&n, &beta, &h, &mut rng);
            assert_eq!(m[0][1], 0);
            assert_eq!(m[1][0], 1);
            hist[m[0][0]] += 1.0 / reps as f64;
        }
        let conc = h.alpha() * 0.4 + h.kappa();
        assert!(total_variation(&hist, &antoniak_pmf(6, conc).unwrap()) < 0.01);
    }

    #[test]
    fn override_cases() {
        let mut rng = RngState::new(3);
        let m = vec![vec![5, 1], vec![2, 9]];
        assert_eq!(
            sample_overrides_w(&m, &[0.5, 0.5], 0.0, &mut rng).unwrap(),
            vec![0, 0]
        );
        assert_eq!(
            sample_overrides_w(&m, &[0.5, 0.5], 1.0, &mut rng).unwrap(),
            vec![5, 9]
        );
        let reps = 40_000;
        let mean = (0..reps)
            .map(|_| sample_overrides_w(&m, &[0.5, 0.5], 0.5, &mut rng).unwrap()[1] as f64)
            .sum::<f64>()
            / reps as f64;
        let se = (9.0 * (2.0 / 3.0) * (1.0 / 3.0) / reps as f64).sqrt();
        assert!((mean - 6.0).abs() < 3.0 * se);
    }

    #[test]
    fn mbar_cases() {
        let m = vec![vec![4, 2], vec![3, 1]];
        assert_eq!(compute_mbar(&m, &[0, 0]).unwrap(), m);
        assert_eq!(
            compute_mbar(&m, &[4, 1]).unwrap(),
            vec![vec![0, 2], vec![3, 0]]
        );
        assert!(matches!(
            compute_mbar(&m, &[5, 0]),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn beta_direct_cases() {
        let mut rng = RngState::new(4);
        let (b, rest) = sample_beta_direct(&[0], 2.0, &mut rng).unwrap();
        assert_eq!(b, vec![BETA_FLOOR]);
        assert!((rest - 1.0).abs() < 1e-12);
        let reps = 20_000;
        let cols = [5usize, 2, 3];
        let mut sums = vec![0.0; 3];
        let mut sq = vec![0.0; 3];
        for _ in 0..reps {
            let (b, rest) = sample_beta_direct(&cols, 2.0, &mut rng).unwrap();
            assert!((b.iter().sum::<f64>() + rest - 1.0).abs() < 1e-10);
            for k in 0..3 {
                sums[k] += b[k];
                sq[k] += b[k] * b[k];
            }
        }
        for k in 0..3 {
            let m = sums[k] / reps as f64;
            let v = sq[k] / reps as f64 - m * m;
            let expected = cols[k] as f64 / 12.0;
            assert!((m - expected).abs() < 3.0 * (v / reps as f64).sqrt());
        }
    }

    fn persistent_data(seed: u64, t: usize) -> Observations {
        use crate::prob::sample_mvnormal;
        let mut rng = RngState::new(seed);
        let means = [-3.0, 0.0, 3.0];
        let mut z = 0usize;
        let mut v = Vec::with_capacity(t);
        for _ in 0..t {
            if rand::Rng::random::<f64>(&mut rng) < 0.05 {
                z = (z + 1) % 3;
            }
            let y = sample_mvnormal(
                &DVector::from_element(1, means[z]),
                &(DMatrix::identity(1, 1) * 0.25),
                &mut rng,
            )
            .unwrap();
            v.push(y[0]);
        }
        obs(&v)
    }

    #[test]
    fn sweeps_keep_counts_consistent() {
        let o = persistent_data(5, 300);
        let mut rng = RngState::new(6);
        let opts = SamplerOptions::default();
        let h = Hyperparams::new(1.0, 10.0, 0.8, 1.0, HyperPriors::default()).unwrap();
        let mut state = init_direct(&o, niw(), h, &opts, &mut rng).unwrap();
        for _ in 0..30 {
            let r = direct_sweep(&mut state, &o, &opts, &mut rng).unwrap();
            state.check_counts(&o).unwrap();
            state.counts.check_tables().unwrap();
            assert!(r.joint_log_lik.is_finite());
            assert_eq!(r.k, state.beta.len());
            assert!(state.counts.occupancy.iter().all(|c| *c > 0));
            let mut rebuilt = state.emissions.clone();
            rebuilt
                .rebuild_stats(&o, &state.z, &[], state.beta.len(), 1)
                .unwrap();
            assert!(state.emissions.max_stats_discrepancy(&rebuilt).unwrap() < 1e-9);
        }
        assert!(
            (2..=6).contains(&state.occupied_states()),
            "{}",
            state.occupied_states()
        );
    }

    #[test]
    fn seeded_sweeps_are_reproducible() {
        let o = persistent_data(7, 100);
        let run = || {
            let mut rng = RngState::new(8);
            let opts = SamplerOptions::default();
            let h = Hyperparams::from_priors(HyperPriors::default(), &mut rng).unwrap();
            let mut state = init_direct(&o, niw(), h, &opts, &mut rng).unwrap();
            let mut lls = Vec::new();
            for _ in 0..5 {
                lls.push(
                    direct_sweep(&mut state, &o, &opts, &mut rng)
                        .unwrap()
                        .joint_log_lik,
                );
            }
            (state.z, lls)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_kappa_matches_original_hdp_weights() {
        // with kappa = 0 the sticky terms vanish from the conditional
        let h = hp(2.5, 0.0);
        let (mut state, o) = one_state(&[0.1, 0.4, -0.3, 0.2], 0.5, h);
        state.z = vec![0, 0, 0, 0];
        let mut sc = Scratch::default();
        unassign(&mut state, &o, 2).unwrap();
        conditional(&mut state, &o, 2, Some(0), Some(0), &fixed(), &mut sc).unwrap();
        let (a, b, n00) = (2.5f64, 0.5f64, 1.0f64);
        let prior = (a * b + n00) * (a * b + n00 + 1.0) / (a + n00 + 1.0);
        let mut em = EmissionModel::new(niw()).unwrap();
        em.push_state();
        for v in [0.1, 0.4, 0.2] {
            em.add(0, 0, Datum::Real(&[v]));
        }
        let lik = em.predictive_loglik(0, 0, Datum::Real(&[-0.3])).unwrap();
        assert!((sc.logw[0] - prior.ln() - lik).abs() < 1e-12);
    }

    #[test]
    fn relabeling_leaves_joint_unchanged() {
        let o = persistent_data(9, 150);
        let mut rng = RngState::new(10);
        let opts = SamplerOptions::default();
        let h = Hyperparams::new(1.0, 10.0, 0.8, 1.0, HyperPriors::default()).unwrap();
        let mut state = init_direct(&o, niw(), h, &opts, &mut rng).unwrap();
        for _ in 0..5 {
            direct_sweep(&mut state, &o, &opts, &mut rng).unwrap();
        }
        let k = state.beta.len();
        assert!(k >= 2);
        let perm: Vec<usize> = (0..k).rev().collect();
        let mut other = state.clone();
        other.z = state.z.iter().map(|&z| perm[z]).collect();
        for (old, &new) in perm.iter().enumerate() {
            other.beta[new] = state.beta[old];
        }
        other.counts = recount(&other.z, &[], None, k, 0).unwrap();
        other
            .emissions
            .rebuild_stats(&o, &other.z, &[], k, 1)
            .unwrap();
        let a = direct_log_likelihoods(&state, &opts).unwrap().1;
        let b = direct_log_likelihoods(&other, &opts).unwrap().1;
        assert!((a - b).abs() < 1e-9);
    }

    fn mixture_run(opts: SamplerOptions, seed: u64) -> ModelState {
        let o = persistent_data(11, 200);
        let mut rng = RngState::new(seed);
        let h = Hyperparams::new(1.0, 10.0, 0.8, 1.0, HyperPriors::default()).unwrap();
        let cfg = niw().mixture(false);
        let mut state = init_direct(&o, cfg, h, &opts, &mut rng).unwrap();
        for _ in 0..20 {
            let r = direct_sweep_dp(&mut state, &o, &opts, &mut rng).unwrap();
            state.check_counts(&o).unwrap();
            assert!(r.joint_log_lik.is_finite());
            for (k, row) in state.counts.n_prime.iter().enumerate() {
                assert_eq!(row.len(), state.emissions.num_components(k));
                assert!(row.iter().all(|c| *c > 0));
                if let Some(cap) = opts.component_cap {
                    assert!(row.len() <= cap);
                }
            }
            let comps = state.counts.n_prime.iter().map(|r| r.len()).max().unwrap();
            let mut rebuilt = state.emissions.clone();
            rebuilt
                .rebuild_stats(&o, &state.z, &state.s, state.beta.len(), comps)
                .unwrap();
            for k in 0..state.beta.len() {
                for j in 0..state.emissions.num_components(k) {
                    assert_eq!(
                        rebuilt.stats(k, j).count(),
                        state.emissions.stats(k, j).count()
                    );
                }
            }
        }
        state
    }

    #[test]
    fn mixture_sweep_keeps_component_counts() {
        mixture_run(SamplerOptions::default(), 12);
        let capped = SamplerOptions {
            component_cap: Some(3),
            ..SamplerOptions::default()
        };
        mixture_run(capped, 13);
    }

    #[test]
    fn unit_cap_gives_single_component_states() {
        let opts = SamplerOptions {
            component_cap: Some(1),
            ..SamplerOptions::default()
        };
        let state = mixture_run(opts, 14);
        assert!(state.s.iter().all(|s| *s == 0));
    }

    #[test]
    fn unsupported_configurations() {
        let o = persistent_data(11, 20);
        let mut rng = RngState::new(15);
        let opts = SamplerOptions::default();
        let h = Hyperparams::new(1.0, 10.0, 0.8, 1.0, HyperPriors::default()).unwrap();
        let indep = EmissionConfig::new(BaseMeasure::IndependentGaussian {
            mean: DVector::zeros(1),
            mean_cov: DMatrix::identity(1, 1),
            dof: 3.0,
            scale: DMatrix::identity(1, 1),
        });
        assert!(matches!(
            init_direct(&o, indep, h, &opts, &mut rng),
            Err(Error::Unsupported(_))
        ));
        let tied = o.tie(2).unwrap();
        assert!(matches!(
            init_direct(&tied, niw().mixture(false), h, &opts, &mut rng),
            Err(Error::Unsupported(_))
        ));
        // grouped frames are fine with single-Gaussian emissions
        let mut state = init_direct(&tied, niw(), h, &opts, &mut rng).unwrap();
        direct_sweep(&mut state, &tied, &opts, &mut rng).unwrap();
        state.check_counts(&tied).unwrap();
    }

    #[test]
    fn out_of_range_step_is_an_index_error() {
        let (mut state, o) = one_state(&[0.1], 0.5, hp(1.0, 1.0));
        assert!(matches!(
            sample_zt(&mut state, &o, 3, &fixed(), &mut RngState::new(0)),
            Err(Error::Index(_))
        ));
    }
}
