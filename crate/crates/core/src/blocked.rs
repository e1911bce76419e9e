//! Weak-limit blocked Gibbs sampler.
//!
//! Transition rows, global weights and emission parameters are instantiated
//! over `L` states (and `L'` components per state for mixture emissions);
//! the label sequence is drawn jointly from backward messages.

use serde::{Deserialize, Serialize};

use crate::direct::{sample_auxiliary, BETA_FLOOR};
use crate::emission::{EmissionConfig, EmissionModel};
use crate::error::{Error, Result};
use crate::hyper::{resample_hyperparams, AuxVars};
use crate::model::{recount, CountTables, Hyperparams, ModelState, SamplerMode, SamplerOptions};
use crate::obs::Observations;
use crate::prob::{sample_categorical, sample_categorical_log, sample_dirichlet, ProbVector};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationConfig {
    /// States.
    pub l: usize,
    /// Mixture components per state.
    pub l_prime: usize,
}

impl TruncationConfig {
    pub fn new(l: usize, l_prime: usize) -> Result<Self> {
        let t = Self { l, l_prime };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::param(format!(
                "truncation L = {} must be at least 2",
                self.l
            )));
        }
        if self.l_prime < 1 {
            return Err(Error::param("truncation L' must be at least 1"));
        }
        Ok(())
    }
}

/// Backward messages, normalized per step.
///
/// Row `t` holds `log m(k)`, the normalized message into step `t` from the
/// future, as a function of `z_t = k`; the last row is the all-ones
/// boundary. The unnormalized message is recovered by adding the suffix sum
/// of `log_norm` from `t` on.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageTable {
    l: usize,
    values: Vec<f64>,
    log_norm: Vec<f64>,
    log_evidence: f64,
}

impl MessageTable {
    pub fn num_steps(&self) -> usize {
        self.log_norm.len()
    }

    pub fn num_states(&self) -> usize {
        self.l
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.l..(t + 1) * self.l]
    }

    pub fn log_norm(&self) -> &[f64] {
        &self.log_norm
    }

    /// Unnormalized message `log p(y_{t+1:T} | z_t = k)`.
    pub fn log_message(&self, t: usize, k: usize) -> f64 {
        self.row(t)[k] + self.log_norm[t..].iter().sum::<f64>()
    }

    /// `log p(y_{1:T} | pi, theta)` with the first label drawn from the
    /// initial distribution given to [`backward_messages`].
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }
}

/// `T x L` table of per-step emission log-likelihoods, summing over the
/// frames of each step and over mixture components.
pub fn emission_loglik_table(obs: &Observations, em: &EmissionModel, l: usize) -> Result<Vec<f64>> {
    let t_len = obs.num_steps();
    let mut out = vec![0.0; t_len * l];
    let log_psi = if em.is_mixture() {
        em.log_psi()
    } else {
        Vec::new()
    };
    for t in 0..t_len {
        for f in obs.step_frames(t) {
            let y = obs.frame(f);
            for k in 0..l {
                out[t * l + k] += em.state_loglik_with(k, y, &log_psi);
            }
        }
        if let Some(k) = out[t * l..(t + 1) * l].iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!(
                "non-finite emission log-density at step {t}, state {k}"
            )));
        }
    }
    Ok(out)
}

/// Scaled emission likelihoods of one step and the subtracted maximum.
fn scaled_row(loglik: &[f64]) -> (Vec<f64>, f64) {
    let max = loglik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (loglik.iter().map(|v| (v - max).exp()).collect(), max)
}

/// Backward recursion `m_t(k) = sum_j pi_k(j) f(y_{t+1} | j) m_{t+1}(j)`
/// over a precomputed emission table, with `init` the distribution of the
/// first label.
pub fn backward_messages(loglik: &[f64], pi: &[Vec<f64>], init: &[f64]) -> Result<MessageTable> {
    let l = pi.len();
    if l == 0 || loglik.len() % l != 0 || init.len() != l {
        return Err(Error::param("message dimensions disagree"));
    }
    let t_len = loglik.len() / l;
    if t_len == 0 {
        return Err(Error::param("no observations"));
    }
    let mut values = vec![0.0; t_len * l];
    let mut log_norm = vec![0.0; t_len];
    let mut next = vec![1.0; l];
    let mut v = vec![0.0; l];
    for t in (0..t_len - 1).rev() {
        let (e, max) = scaled_row(&loglik[(t + 1) * l..(t + 2) * l]);
        for j in 0..l {
            v[j] = e[j] * next[j];
        }
        let mut total = 0.0;
        for k in 0..l {
            let m: f64 = pi[k].iter().zip(&v).map(|(p, x)| p * x).sum();
            next[k] = m;
            total += m;
        }
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Degenerate(format!(
                "backward message vanishes at step {t}"
            )));
        }
        for k in 0..l {
            next[k] /= total;
            values[t * l + k] = next[k].ln();
        }
        log_norm[t] = total.ln() + max;
    }
    let (e, max) = scaled_row(&loglik[..l]);
    let first: f64 = (0..l).map(|k| init[k] * e[k] * values[k].exp()).sum();
    if !(first > 0.0) {
        return Err(Error::Degenerate(
            "observations have zero probability".into(),
        ));
    }
    let log_evidence = log_norm.iter().sum::<f64>() + first.ln() + max;
    Ok(MessageTable {
        l,
        values,
        log_norm,
        log_evidence,
    })
}

/// Joint draw of `z_{1:T}` from `p(z | y, pi, theta)`.
pub fn forward_sample_z(
    loglik: &[f64],
    pi: &[Vec<f64>],
    init: &[f64],
    messages: &MessageTable,
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    let l = pi.len();
    let t_len = messages.num_steps();
    let mut z: Vec<usize> = Vec::with_capacity(t_len);
    let mut w = vec![0.0; l];
    for t in 0..t_len {
        let (e, _) = scaled_row(&loglik[t * l..(t + 1) * l]);
        let prior = match t {
            0 => init,
            _ => &pi[z[t - 1]][..],
        };
        let row = messages.row(t);
        for k in 0..l {
            w[k] = prior[k] * e[k] * row[k].exp();
        }
        z.push(
            sample_categorical(&w, rng)
                .map_err(|_| Error::Degenerate(format!("all label weights vanish at step {t}")))?,
        );
    }
    Ok(z)
}

/// Per-frame component labels given the state labels:
/// `p(s = j | z = k, y) ∝ psi_k(j) f(y | theta_{k,j})`.
pub fn sample_components(
    obs: &Observations,
    em: &EmissionModel,
    z: &[usize],
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    let mut s = vec![0; obs.num_frames()];
    let mut lw = Vec::new();
    for (t, &k) in z.iter().enumerate() {
        let psi = &em.psi()[k];
        for f in obs.step_frames(t) {
            lw.clear();
            lw.extend(
                psi.iter()
                    .enumerate()
                    .map(|(j, p)| p.ln() + em.loglik(k, j, obs.frame(f))),
            );
            s[f] = sample_categorical_log(&lw, rng)?;
        }
    }
    Ok(s)
}

/// Joint draw of state and component labels for mixture emissions. The
/// messages depend on the state labels only, so the components follow the
/// state sequence.
pub fn forward_sample_zs(
    obs: &Observations,
    em: &EmissionModel,
    pi: &[Vec<f64>],
    init: &[f64],
    rng: &mut RngState,
) -> Result<(Vec<usize>, Vec<usize>, f64)> {
    let loglik = emission_loglik_table(obs, em, pi.len())?;
    let msgs = backward_messages(&loglik, pi, init)?;
    let z = forward_sample_z(&loglik, pi, init, &msgs, rng)?;
    let s = sample_components(obs, em, &z, rng)?;
    Ok((z, s, msgs.log_evidence()))
}

/// `pi_k ~ Dir(alpha beta + kappa e_k + n_k)` for every state.
pub fn sample_transitions(
    n: &[Vec<usize>],
    beta: &[f64],
    hp: &Hyperparams,
    rng: &mut RngState,
) -> Result<Vec<Vec<f64>>> {
    let alpha = hp.alpha();
    let kappa = hp.kappa();
    n.iter()
        .enumerate()
        .map(|(k, row)| {
            let params: Vec<f64> = row
                .iter()
                .zip(beta)
                .enumerate()
                .map(|(j, (c, b))| {
                    (alpha * b.max(BETA_FLOOR) + *c as f64 + if j == k { kappa } else { 0.0 })
                        .max(f64::MIN_POSITIVE)
                })
                .collect();
            Ok(sample_dirichlet(&params, rng)?.into_inner())
        })
        .collect()
}

/// `beta ~ Dir(gamma / L + m_bar_k)` with `L = m_bar_cols.len()`.
pub fn sample_beta_weaklimit(
    m_bar_cols: &[usize],
    gamma: f64,
    rng: &mut RngState,
) -> Result<ProbVector> {
    let l = m_bar_cols.len() as f64;
    let params: Vec<f64> = m_bar_cols.iter().map(|&c| gamma / l + c as f64).collect();
    let draw = sample_dirichlet(&params, rng)?.into_inner();
    Ok(ProbVector::normalized(
        draw.into_iter().map(|b| b.max(BETA_FLOOR)).collect(),
    )?)
}

/// `psi_k ~ Dir(sigma / L' + n'_k)` for every state; rows shorter than
/// `l_prime` are zero-padded.
pub fn sample_psi(
    n_prime: &[Vec<usize>],
    sigma: f64,
    l_prime: usize,
    rng: &mut RngState,
) -> Result<Vec<Vec<f64>>> {
    n_prime
        .iter()
        .map(|row| {
            if l_prime == 1 {
                return Ok(vec![1.0]);
            }
            let params: Vec<f64> = (0..l_prime)
                .map(|j| sigma / l_prime as f64 + row.get(j).copied().unwrap_or(0) as f64)
                .collect();
            Ok(sample_dirichlet(&params, rng)?.into_inner())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockedSweepReport {
    /// `log p(y | pi, theta)` under the parameters the labels were drawn with.
    pub log_lik: f64,
    /// Distinct labels after the sweep.
    pub k: usize,
}

fn components(em: &EmissionModel, trunc: &TruncationConfig) -> usize {
    if em.is_mixture() {
        trunc.l_prime
    } else {
        1
    }
}

/// Draws `beta`, `pi`, `psi` and emission parameters from the prior for an
/// `L`-state model, leaving labels untouched.
pub fn draw_prior_params(
    state: &mut ModelState,
    trunc: &TruncationConfig,
    opts: &SamplerOptions,
    rng: &mut RngState,
) -> Result<()> {
    let l = trunc.l;
    state.beta = if opts.fixed_uniform_beta {
        vec![1.0 / l as f64; l]
    } else {
        sample_beta_weaklimit(&vec![0; l], state.hp.gamma, rng)?.into_inner()
    };
    let zeros = vec![vec![0; l]; l];
    state.pi = sample_transitions(&zeros, &state.beta, &state.hp, rng)?;
    let comps = components(&state.emissions, trunc);
    let em = &mut state.emissions;
    em.set_params_table(Vec::new());
    em.init_params(l, comps, rng)?;
    if em.is_mixture() {
        em.set_psi(sample_psi(
            &vec![Vec::new(); l],
            state.hp.sigma,
            trunc.l_prime,
            rng,
        )?);
    }
    Ok(())
}

fn relabel(
    state: &mut ModelState,
    obs: &Observations,
    trunc: &TruncationConfig,
    rng: &mut RngState,
) -> Result<f64> {
    let comps = components(&state.emissions, trunc);
    let loglik = emission_loglik_table(obs, &state.emissions, trunc.l)?;
    let msgs = backward_messages(&loglik, &state.pi, &state.beta)?;
    state.z = forward_sample_z(&loglik, &state.pi, &state.beta, &msgs, rng)?;
    if state.emissions.is_mixture() {
        state.s = sample_components(obs, &state.emissions, &state.z, rng)?;
    }
    state.counts = recount(&state.z, &state.s, Some(obs.offsets()), trunc.l, comps)?;
    state
        .emissions
        .rebuild_stats(obs, &state.z, &state.s, trunc.l, comps)?;
    Ok(msgs.log_evidence())
}

/// Initial state: parameters from the prior, then a joint label draw.
pub fn init_blocked(
    obs: &Observations,
    emission: EmissionConfig,
    mut hp: Hyperparams,
    trunc: &TruncationConfig,
    opts: &SamplerOptions,
    rng: &mut RngState,
) -> Result<ModelState> {
    trunc.validate()?;
    let em = EmissionModel::new(emission)?;
    em.check_observations(obs)?;
    if !opts.sticky {
        hp.rho = 0.0;
    }
    let mut state = ModelState {
        mode: SamplerMode::Blocked,
        hp,
        beta: Vec::new(),
        beta_rest: 0.0,
        pi: Vec::new(),
        z: Vec::new(),
        s: Vec::new(),
        counts: CountTables::zeros(trunc.l),
        emissions: em,
        aux: AuxVars::default(),
    };
    draw_prior_params(&mut state, trunc, opts, rng)?;
    relabel(&mut state, obs, trunc, rng)?;
    Ok(state)
}

/// Parameter half of a sweep given current labels: auxiliary tables,
/// enabled hyperparameters, `beta`, `pi`, `psi`, then emission parameters.
pub fn update_params(
    state: &mut ModelState,
    trunc: &TruncationConfig,
    opts: &SamplerOptions,
    rng: &mut RngState,
) -> Result<()> {
    sample_auxiliary(state, rng)?;
    let slots = state.emissions.is_mixture().then_some(trunc.l_prime);
    resample_hyperparams(state, opts, slots, rng)?;
    if !opts.fixed_uniform_beta {
        let mut cols = state.counts.m_bar_col_totals();
        if let Some(&z0) = state.z.first() {
            cols[z0] += 1;
        }
        state.beta = sample_beta_weaklimit(&cols, state.hp.gamma, rng)?.into_inner();
    }
    state.pi = sample_transitions(&state.counts.n, &state.beta, &state.hp, rng)?;
    if state.emissions.is_mixture() {
        let psi = sample_psi(&state.counts.n_prime, state.hp.sigma, trunc.l_prime, rng)?;
        state.emissions.set_psi(psi);
    }
    for k in 0..trunc.l {
        state.emissions.sample_params(k, rng)?;
    }
    Ok(())
}

/// One sweep: messages, joint label draw, then [`update_params`].
pub fn blocked_sweep(
    state: &mut ModelState,
    obs: &Observations,
    trunc: &TruncationConfig,
    opts: &SamplerOptions,
    rng: &mut RngState,
) -> Result<BlockedSweepReport> {
    if state.mode != SamplerMode::Blocked {
        return Err(Error::InvalidState(
            "blocked sweep on a direct-mode state".into(),
        ));
    }
    if state.beta.len() != trunc.l || state.pi.len() != trunc.l {
        return Err(Error::InvalidState(
            "state size differs from the truncation".into(),
        ));
    }
    let log_lik = relabel(state, obs, trunc, rng)?;
    update_params(state, trunc, opts, rng)?;
    Ok(BlockedSweepReport {
        log_lik,
        k: state.occupied_states(),
    })
}

/// Sweep for mixture emissions; the component labels are drawn with the
/// state labels.
pub fn blocked_sweep_dp(
    state: &mut ModelState,
    obs: &Observations,
    trunc: &TruncationConfig,
    opts: &SamplerOptions,
    rng: &mut RngState,
) -> Result<BlockedSweepReport> {
    if !state.emissions.is_mixture() {
        return Err(Error::InvalidState(
            "mixture sweep without mixture emissions".into(),
        ));
    }
    blocked_sweep(state, obs, trunc, opts, rng)
}
