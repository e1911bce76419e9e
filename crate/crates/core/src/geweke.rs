//! Joint-distribution checks: forward simulation from the prior against a
//! Gibbs chain that alternates sampler sweeps with data regeneration.

use nalgebra::{DMatrix, DVector};

use crate::blocked::{blocked_sweep, sample_beta_weaklimit, sample_transitions, TruncationConfig};
use crate::direct::direct_sweep;
use crate::emission::{AtomParams, BaseMeasure, EmissionConfig, EmissionModel};
use crate::error::Result;
use crate::hyper::AuxVars;
use crate::model::{recount, HyperPriors, Hyperparams, ModelState, SamplerMode, SamplerOptions};
use crate::obs::Observations;
use crate::prob::{sample_beta, sample_categorical, NiwParams};
use crate::rng::RngState;
use crate::stats::{ks_two_sample, KsResult};

#[derive(Debug, Clone)]
pub struct GewekeConfig {
    pub t: usize,
    pub l: usize,
    pub samples: usize,
    /// Sweep-plus-regeneration rounds between recorded samples.
    pub thin: usize,
    pub priors: HyperPriors,
    pub base: NiwParams,
}

impl GewekeConfig {
    /// Short sequences and moderate priors so the Gibbs chain mixes.
    pub fn small() -> Self {
        let mut priors = HyperPriors::default();
        priors.gamma = crate::model::GammaPrior::new(3.0, 1.0).expect("valid");
        priors.alpha_plus_kappa = crate::model::GammaPrior::new(6.0, 1.0).expect("valid");
        priors.rho = crate::model::BetaPrior { a: 3.0, b: 2.0 };
        Self {
            t: 50,
            l: 6,
            samples: 2000,
            thin: 10,
            priors,
            base: NiwParams::new(
                1.0,
                DVector::zeros(1),
                5.0,
                DMatrix::from_element(1, 1, 4.0),
            )
            .expect("valid"),
        }
    }

    fn emission(&self) -> EmissionConfig {
        EmissionConfig::new(BaseMeasure::Niw(self.base.clone()))
    }
}

/// Statistics compared between the two samplers of the joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GewekeStats {
    pub occupied: f64,
    pub self_fraction: f64,
    pub gamma: f64,
    pub alpha_plus_kappa: f64,
    pub rho: f64,
}

pub const STAT_NAMES: [&str; 5] = [
    "occupied",
    "self_fraction",
    "gamma",
    "alpha_plus_kappa",
    "rho",
];

impl GewekeStats {
    pub fn of(state: &ModelState) -> Self {
        let z = &state.z;
        let stays = z.windows(2).filter(|w| w[0] == w[1]).count();
        let mut labels = z.clone();
        labels.sort_unstable();
        labels.dedup();
        Self {
            occupied: labels.len() as f64,
            self_fraction: stays as f64 / (z.len() - 1).max(1) as f64,
            gamma: state.hp.gamma,
            alpha_plus_kappa: state.hp.alpha_plus_kappa,
            rho: state.hp.rho,
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [
            self.occupied,
            self.self_fraction,
            self.gamma,
            self.alpha_plus_kappa,
            self.rho,
        ]
    }
}

fn draw_observations(em: &EmissionModel, z: &[usize], rng: &mut RngState) -> Result<Observations> {
    let mut v = Vec::with_capacity(z.len());
    for &k in z {
        let AtomParams::Gaussian(g) = em.params(k, 0) else {
            unreachable!("Gaussian base")
        };
        v.push(g.sample(rng)[0]);
    }
    Observations::real(1, v)
}

/// Prior draw of a full blocked-sampler state with its observations.
pub fn forward_blocked(
    cfg: &GewekeConfig,
    rng: &mut RngState,
) -> Result<(ModelState, Observations)> {
    let hp = Hyperparams::from_priors(cfg.priors, rng)?;
    let beta = sample_beta_weaklimit(&vec![0; cfg.l], hp.gamma, rng)?.into_inner();
    let pi = sample_transitions(&vec![vec![0; cfg.l]; cfg.l], &beta, &hp, rng)?;
    let mut em = EmissionModel::new(cfg.emission())?;
    em.init_params(cfg.l, 1, rng)?;
    let mut z: Vec<usize> = Vec::with_capacity(cfg.t);
    z.push(sample_categorical(&beta, rng)?);
    for t in 1..cfg.t {
        z.push(sample_categorical(&pi[z[t - 1]], rng)?);
    }
    let obs = draw_observations(&em, &z, rng)?;
    em.rebuild_stats(&obs, &z, &[], cfg.l, 1)?;
    let state = ModelState {
        mode: SamplerMode::Blocked,
        hp,
        beta,
        beta_rest: 0.0,
        pi,
        counts: recount(&z, &[], None, cfg.l, 1)?,
        z,
        s: Vec::new(),
        emissions: em,
        aux: AuxVars::default(),
    };
    Ok((state, obs))
}

/// Prior draw of a direct-sampler state: labels from the restaurant
/// franchise with transition rows integrated out and the global weights
/// broken off as new states appear.
pub fn forward_direct(
    cfg: &GewekeConfig,
    rng: &mut RngState,
) -> Result<(ModelState, Observations)> {
    let hp = Hyperparams::from_priors(cfg.priors, rng)?;
    let (alpha, kappa) = (hp.alpha(), hp.kappa());
    let mut beta: Vec<f64> = Vec::new();
    let mut rest = 1.0;
    let mut n: Vec<Vec<usize>> = Vec::new();
    let mut z: Vec<usize> = Vec::with_capacity(cfg.t);
    for t in 0..cfg.t {
        let mut w: Vec<f64> = match t {
            0 => beta.clone(),
            _ => {
                let p = z[t - 1];
                (0..beta.len())
                    .map(|k| alpha * beta[k] + n[p][k] as f64 + if k == p { kappa } else { 0.0 })
                    .collect()
            }
        };
        w.push(if t == 0 { rest } else { alpha * rest });
        let mut k = sample_categorical(&w, rng)?;
        if k == beta.len() {
            let b = sample_beta(1.0, hp.gamma, rng)?;
            beta.push(b * rest);
            rest *= 1.0 - b;
            n.iter_mut().for_each(|row| row.push(0));
            n.push(vec![0; beta.len()]);
            k = beta.len() - 1;
        }
        if t > 0 {
            n[z[t - 1]][k] += 1;
        }
        z.push(k);
    }
    let k = beta.len();
    let mut em = EmissionModel::new(cfg.emission())?;
    em.init_params(k, 1, rng)?;
    let obs = draw_observations(&em, &z, rng)?;
    em.rebuild_stats(&obs, &z, &[], k, 1)?;
    let state = ModelState {
        mode: SamplerMode::Direct,
        hp,
        beta,
        beta_rest: rest,
        pi: Vec::new(),
        counts: recount(&z, &[], None, k, 1)?,
        z,
        s: Vec::new(),
        emissions: em,
        aux: AuxVars::default(),
    };
    Ok((state, obs))
}

/// Independent forward draws of the statistics.
pub fn forward_stats(
    cfg: &GewekeConfig,
    mode: SamplerMode,
    rng: &mut RngState,
) -> Result<Vec<GewekeStats>> {
    (0..cfg.samples)
        .map(|_| {
            let (state, _) = match mode {
                SamplerMode::Blocked => forward_blocked(cfg, rng)?,
                SamplerMode::Direct => forward_direct(cfg, rng)?,
            };
            Ok(GewekeStats::of(&state))
        })
        .collect()
}

/// Successive-conditional chain: sampler sweep, then fresh observations
/// given the labels and emission parameters. The direct sampler keeps the
/// parameters integrated out, so they are drawn from their posterior first.
pub fn gibbs_stats(
    cfg: &GewekeConfig,
    mode: SamplerMode,
    rng: &mut RngState,
) -> Result<Vec<GewekeStats>> {
    let opts = SamplerOptions::default();
    let trunc = TruncationConfig::new(cfg.l, 1)?;
    let (mut state, mut obs) = match mode {
        SamplerMode::Blocked => forward_blocked(cfg, rng)?,
        SamplerMode::Direct => forward_direct(cfg, rng)?,
    };
    let mut out = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        for _ in 0..cfg.thin {
            match mode {
                SamplerMode::Blocked => {
                    blocked_sweep(&mut state, &obs, &trunc, &opts, rng)?;
                }
                SamplerMode::Direct => {
                    direct_sweep(&mut state, &obs, &opts, rng)?;
                    let k = state.beta.len();
                    state.emissions.init_params(k, 1, rng)?;
                    for j in 0..k {
                        state.emissions.sample_params(j, rng)?;
                    }
                }
            }
            obs = draw_observations(&state.emissions, &state.z, rng)?;
            let k = state.num_states();
            state.emissions.rebuild_stats(&obs, &state.z, &[], k, 1)?;
        }
        out.push(GewekeStats::of(&state));
    }
    Ok(out)
}

/// Two-sample KS test per statistic.
pub fn compare(a: &[GewekeStats], b: &[GewekeStats]) -> Vec<(&'static str, KsResult)> {
    (0..STAT_NAMES.len())
        .map(|i| {
            let xa: Vec<f64> = a.iter().map(|s| s.values()[i]).collect();
            let xb: Vec<f64> = b.iter().map(|s| s.values()[i]).collect();
            (STAT_NAMES[i], ks_two_sample(&xa, &xb))
        })
        .collect()
}
