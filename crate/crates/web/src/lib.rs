//! Browser bindings. Every export returns a JSON string.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use shdp_core::blocked::{blocked_sweep, init_blocked, sample_beta_weaklimit, TruncationConfig};
use shdp_core::emission::{BaseMeasure, EmissionConfig};
use shdp_core::eval::{hamming_matched, munkres};
use shdp_core::model::{HyperPriors, Hyperparams, SamplerOptions};
use shdp_core::obs::Frames;
use shdp_core::prob::{antoniak_pmf, sample_crt, sample_stick_breaking, NiwParams};
use shdp_core::synth::preset;
use shdp_core::{Result, RngState};
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
pub struct FitTrace {
    pub obs: Vec<f64>,
    pub truth: Vec<usize>,
    /// Final labels mapped onto the true labels where matched.
    pub estimate: Vec<usize>,
    pub hamming: Vec<f64>,
    pub states: Vec<usize>,
    pub rho: Vec<f64>,
}

/// Estimated labels renamed to their matched true label; unmatched states
/// get fresh labels after the true ones.
pub fn align(truth: &[usize], est: &[usize]) -> Result<Vec<usize>> {
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let ke = est.iter().max().map_or(0, |m| m + 1);
    let n = kt.max(ke);
    let mut cost = vec![vec![0.0; n]; n];
    for (&t, &e) in truth.iter().zip(est) {
        cost[e][t] -= 1.0;
    }
    let assign = munkres(&cost)?;
    let mut next = kt;
    let map: Vec<usize> = (0..ke)
        .map(|e| match assign[e] {
            Some(t) if t < kt && cost[e][t] < 0.0 => t,
            _ => {
                next += 1;
                next - 1
            }
        })
        .collect();
    Ok(est.iter().map(|&e| map[e]).collect())
}

/// Blocked sampler on a one-dimensional preset with the empirical NIW prior.
pub fn fit_preset(
    name: &str,
    seed: u64,
    sweeps: usize,
    sticky: bool,
    length: usize,
) -> Result<FitTrace> {
    let sim = preset(name)?
        .with_seed(seed)
        .with_length(length)
        .generate()?;
    let Frames::Real { values, .. } = sim.obs.frames() else {
        return Err(shdp_core::Error::Unsupported(
            "the demo fits real-valued presets".into(),
        ));
    };
    let (mean, cov) = sim.obs.moments()?;
    let niw = NiwParams::new(
        0.01,
        DVector::from_vec(mean),
        3.0,
        DMatrix::from_element(1, 1, 0.75 * cov[0]),
    )?;
    let trunc = TruncationConfig::new(20, 1)?;
    let opts = SamplerOptions {
        sticky,
        ..SamplerOptions::default()
    };
    let mut rng = RngState::new(seed.wrapping_add(1000));
    let hp = Hyperparams::from_priors(HyperPriors::default(), &mut rng)?;
    let mut state = init_blocked(
        &sim.obs,
        EmissionConfig::new(BaseMeasure::Niw(niw)),
        hp,
        &trunc,
        &opts,
        &mut rng,
    )?;
    let mut out = FitTrace {
        obs: values.clone(),
        truth: sim.z.clone(),
        estimate: Vec::new(),
        hamming: Vec::with_capacity(sweeps),
        states: Vec::with_capacity(sweeps),
        rho: Vec::with_capacity(sweeps),
    };
    for _ in 0..sweeps {
        let r = blocked_sweep(&mut state, &sim.obs, &trunc, &opts, &mut rng)?;
        out.hamming.push(hamming_matched(&sim.z, &state.z)?);
        out.states.push(r.k);
        out.rho.push(state.hp.rho);
    }
    out.estimate = align(&sim.z, &state.z)?;
    Ok(out)
}

#[derive(Serialize)]
pub struct TableHistogram {
    pub empirical: Vec<f64>,
    pub exact: Vec<f64>,
}

/// Table counts from simulated seatings next to the exact law.
pub fn table_histogram(
    n: usize,
    concentration: f64,
    draws: usize,
    seed: u64,
) -> Result<TableHistogram> {
    let exact = antoniak_pmf(n, concentration)?;
    let mut rng = RngState::new(seed);
    let mut counts = vec![0usize; n + 1];
    for _ in 0..draws {
        counts[sample_crt(n, concentration, &mut rng)] += 1;
    }
    Ok(TableHistogram {
        empirical: counts
            .iter()
            .map(|&c| c as f64 / draws.max(1) as f64)
            .collect(),
        exact,
    })
}

#[derive(Serialize)]
pub struct Sticks {
    /// Stick-breaking weights with the unbroken remainder last.
    pub stick_breaking: Vec<f64>,
    /// Symmetric Dirichlet(gamma / L) draw, sorted decreasing.
    pub weak_limit: Vec<f64>,
}

pub fn sticks(gamma: f64, truncation: usize, seed: u64) -> Result<Sticks> {
    let mut rng = RngState::new(seed);
    let sb = sample_stick_breaking(gamma, truncation, &mut rng)?.into_inner();
    let mut wl = sample_beta_weaklimit(&vec![0; truncation], gamma, &mut rng)?.into_inner();
    wl.sort_by(|a, b| b.total_cmp(a));
    Ok(Sticks {
        stick_breaking: sb,
        weak_limit: wl,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())))
}

#[wasm_bindgen(js_name = fitPreset)]
pub fn fit_preset_js(
    name: &str,
    seed: u32,
    sweeps: u32,
    sticky: bool,
    length: u32,
) -> std::result::Result<String, JsValue> {
    to_js(fit_preset(
        name,
        seed as u64,
        sweeps as usize,
        sticky,
        length as usize,
    ))
}

#[wasm_bindgen(js_name = tableHistogram)]
pub fn table_histogram_js(
    n: u32,
    concentration: f64,
    draws: u32,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(table_histogram(
        n as usize,
        concentration,
        draws as usize,
        seed as u64,
    ))
}

#[wasm_bindgen(js_name = sticks)]
pub fn sticks_js(gamma: f64, truncation: u32, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(sticks(gamma, truncation as usize, seed as u64))
}
