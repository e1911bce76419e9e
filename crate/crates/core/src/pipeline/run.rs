use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocked::{blocked_sweep, init_blocked, TruncationConfig};
use crate::direct::{direct_sweep, init_direct};
use crate::emission::EmissionConfig;
use crate::error::{Error, Result};
use crate::eval::{
    der, hamming_matched, min_expected_hamming, predictive_loglik, Segment, SegmentList,
};
use crate::model::{Hyperparams, ModelState, SamplerOptions};
use crate::obs::Observations;
use crate::rng::RngState;

use super::config::{RunConfig, SamplerKind};
use super::ingest::{
    blocks_text, ingest_features, read_labels, segments_text, tie_min_duration, write_labels,
    Features,
};

pub const TRACE_FORMAT: u32 = 1;

/// One line of a chain trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// `log p(y, z | ...)`: parameters instantiated for the blocked
    /// samplers, integrated out for the direct sampler.
    pub joint_log_lik: f64,
    /// `log p(y | ...)` per block.
    pub log_lik_per_frame: f64,
    pub occupied_states: usize,
    pub gamma: f64,
    pub alpha_plus_kappa: f64,
    pub rho: f64,
    pub sigma: f64,
    /// Matched Hamming distance to the reference labels, per kept frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamming: Option<f64>,
    /// Mean held-out predictive log-likelihood per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictive: Option<f64>,
    /// Per-step labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<usize>>,
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(Some(i + 1), e.to_string()))?;
        if out.last().is_some_and(|p| p.iteration >= rec.iteration) {
            return Err(Error::format(
                Some(i + 1),
                "iteration indices are not increasing",
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStatus {
    pub chain: usize,
    pub seed: u64,
    pub error: Option<String>,
    /// Exit code class of the failure.
    pub exit_code: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub trace_format: u32,
    pub sampler: SamplerKind,
    pub seeds: Vec<u64>,
    pub chains: Vec<ChainStatus>,
    pub num_frames: usize,
    pub num_blocks: usize,
    pub num_steps: usize,
    pub emission: EmissionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Chain whose final sample was decoded.
    pub selected_chain: usize,
    pub test_set: usize,
    pub reference_set: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub der: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamming: Option<f64>,
    pub final_log_lik_per_frame: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub chains: Vec<ChainStatus>,
    /// Decoded label per block.
    pub decoded: Vec<usize>,
    pub metrics: Metrics,
}

/// Preprocessed inputs shared by every chain.
pub struct Prepared {
    pub features: Features,
    pub steps: Observations,
    pub emission: EmissionConfig,
    pub truth: Option<Truth>,
    pub heldout: Vec<Observations>,
}

/// Reference labels restricted to kept frames.
pub struct Truth {
    pub labels: Vec<usize>,
    /// Block of each kept frame.
    pub block_of: Vec<usize>,
    pub frames: Vec<usize>,
}

impl Truth {
    fn new(labels: Vec<usize>, features: &Features) -> Result<Self> {
        if labels.len() != features.num_frames {
            return Err(Error::InvalidInput(format!(
                "{} reference labels for {} frames",
                labels.len(),
                features.num_frames
            )));
        }
        let mut masked = vec![false; labels.len()];
        features.masked.iter().for_each(|&i| masked[i] = true);
        let mut block_of = Vec::new();
        let mut frames = Vec::new();
        for (b, &(s, e)) in features.blocks.iter().enumerate() {
            for f in (s..e).filter(|&f| !masked[f]) {
                block_of.push(b);
                frames.push(f);
            }
        }
        Ok(Self {
            labels: frames.iter().map(|&f| labels[f]).collect(),
            block_of,
            frames,
        })
    }

    fn hamming(&self, block_labels: &[usize]) -> Result<f64> {
        let est: Vec<usize> = self.block_of.iter().map(|&b| block_labels[b]).collect();
        hamming_matched(&self.labels, &est)
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let features = ingest_features(
        &cfg.data.features,
        cfg.data.format,
        cfg.preprocess.block_width,
        cfg.data.mask.as_deref(),
    )?;
    let steps = tie_min_duration(&features.obs, cfg.preprocess.frames_per_state)?;
    // empirical moments of the preprocessed blocks
    let emission = cfg.emission.resolve(&features.obs)?;
    let truth = match &cfg.data.truth {
        Some(p) => Some(Truth::new(read_labels(p)?, &features)?),
        None => None,
    };
    let heldout = cfg
        .data
        .heldout
        .iter()
        .map(|p| {
            let f = ingest_features(p, cfg.data.format, cfg.preprocess.block_width, None)?;
            tie_min_duration(&f.obs, cfg.preprocess.frames_per_state)
        })
        .collect::<Result<_>>()?;
    Ok(Prepared {
        features,
        steps,
        emission,
        truth,
        heldout,
    })
}

/// `log p(y, z | pi, theta)` with `z_1 ~ beta` and mixture components
/// summed out.
pub fn blocked_joint_loglik(state: &ModelState, obs: &Observations) -> f64 {
    let mut ll = state.beta[state.z[0]].ln();
    for t in 0..state.z.len() {
        let k = state.z[t];
        if t > 0 {
            ll += state.pi[state.z[t - 1]][k].ln();
        }
        for f in obs.step_frames(t) {
            ll += state.emissions.state_loglik(k, obs.frame(f));
        }
    }
    ll
}

struct ChainResult {
    final_z: Vec<usize>,
    final_llpf: f64,
    reference: Vec<(f64, Vec<usize>)>,
}

enum Engine {
    Direct,
    Blocked(TruncationConfig),
}

fn in_reference(cfg: &RunConfig, iteration: usize) -> bool {
    iteration as f64 > cfg.decode.burn_in * cfg.sweeps as f64 && iteration % cfg.decode.every == 0
}

fn run_chain(cfg: &RunConfig, prep: &Prepared, chain: usize, dir: &Path) -> Result<ChainResult> {
    let mut rng = RngState::new(cfg.chain_seed(chain));
    let opts: SamplerOptions = cfg.sampler_options();
    let obs = &prep.steps;
    let blocks = prep.features.obs.num_steps() as f64;
    let hp = Hyperparams::from_priors(cfg.priors, &mut rng)?;
    let engine = match cfg.sampler {
        SamplerKind::Direct => Engine::Direct,
        _ => Engine::Blocked(cfg.truncation()?),
    };
    let mut state = match &engine {
        Engine::Direct => init_direct(obs, prep.emission.clone(), hp, &opts, &mut rng)?,
        Engine::Blocked(trunc) => {
            init_blocked(obs, prep.emission.clone(), hp, trunc, &opts, &mut rng)?
        }
    };
    let mut trace = BufWriter::new(File::create(
        dir.join(format!("chain-{chain}.trace.jsonl")),
    )?);
    let mut reference = Vec::new();
    let mut last_llpf = f64::NAN;
    for iteration in 1..=cfg.sweeps {
        let (log_lik, joint) = match &engine {
            Engine::Direct => {
                let r = direct_sweep(&mut state, obs, &opts, &mut rng)?;
                (r.log_lik, r.joint_log_lik)
            }
            Engine::Blocked(trunc) => {
                let r = blocked_sweep(&mut state, obs, trunc, &opts, &mut rng)?;
                (r.log_lik, blocked_joint_loglik(&state, obs))
            }
        };
        let block_z = obs.expand_steps(&state.z);
        let llpf = log_lik / blocks;
        last_llpf = llpf;
        let keep = in_reference(cfg, iteration);
        let predictive = match (&engine, keep && !prep.heldout.is_empty()) {
            (Engine::Blocked(_), true) => {
                let mut total = 0.0;
                let mut frames = 0;
                for h in &prep.heldout {
                    total += predictive_loglik(h, &state.pi, &state.emissions, &state.beta)?;
                    frames += h.num_frames();
                }
                Some(total / frames as f64)
            }
            _ => None,
        };
        let rec = TraceRecord {
            iteration,
            joint_log_lik: joint,
            log_lik_per_frame: llpf,
            occupied_states: state.occupied_states(),
            gamma: state.hp.gamma,
            alpha_plus_kappa: state.hp.alpha_plus_kappa,
            rho: state.hp.rho,
            sigma: state.hp.sigma,
            hamming: prep
                .truth
                .as_ref()
                .map(|t| t.hamming(&block_z))
                .transpose()?,
            predictive,
            z: (cfg.trace.z_every > 0 && iteration % cfg.trace.z_every == 0)
                .then(|| state.z.clone()),
        };
        serde_json::to_writer(&mut trace, &rec)?;
        trace.write_all(b"\n")?;
        if keep {
            reference.push((llpf, block_z));
        }
    }
    trace.flush()?;
    std::fs::write(
        dir.join(format!("chain-{chain}.state.json")),
        state.to_snapshot()?,
    )?;
    Ok(ChainResult {
        final_z: obs.expand_steps(&state.z),
        final_llpf: last_llpf,
        reference,
    })
}

#[cfg(feature = "parallel")]
fn run_chains(cfg: &RunConfig, prep: &Prepared, dir: &Path) -> Vec<Result<ChainResult>> {
    use rayon::prelude::*;
    (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(cfg, prep, c, dir))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_chains(cfg: &RunConfig, prep: &Prepared, dir: &Path) -> Vec<Result<ChainResult>> {
    (0..cfg.chains)
        .map(|c| run_chain(cfg, prep, c, dir))
        .collect()
}

/// Decoding over chain outputs: the test set is the final sample of each
/// chain, the reference set the samples inside the decode window. Both are
/// filtered to samples within `window` per-frame log-likelihood of the best
/// final sample. Returns `(chain, labels, test size, reference size)`.
pub fn decode_samples(
    finals: &[(usize, f64, Vec<usize>)],
    reference: &[(f64, Vec<usize>)],
    window: Option<f64>,
) -> Result<(usize, Vec<usize>, usize, usize)> {
    if finals.is_empty() {
        return Err(Error::InvalidInput(
            "no chain produced a final sample".into(),
        ));
    }
    let best = finals.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
    let keep = |ll: f64| window.is_none_or(|w| ll >= best - w);
    let test: Vec<&(usize, f64, Vec<usize>)> = finals.iter().filter(|f| keep(f.1)).collect();
    let mut refs: Vec<Vec<usize>> = reference
        .iter()
        .filter(|r| keep(r.0))
        .map(|r| r.1.clone())
        .collect();
    if refs.is_empty() {
        refs = reference.iter().map(|r| r.1.clone()).collect();
    }
    if refs.is_empty() {
        refs = finals.iter().map(|f| f.2.clone()).collect();
    }
    let test_z: Vec<Vec<usize>> = test.iter().map(|f| f.2.clone()).collect();
    let (i, z) = min_expected_hamming(&test_z, &refs)?;
    Ok((test[i].0, z, test_z.len(), refs.len()))
}

/// Frame-level DER of per-block labels against per-frame truth; masked
/// frames are excluded from scoring.
pub fn frame_der(
    truth: &[usize],
    blocks: &[(usize, usize)],
    masked: &[usize],
    block_labels: &[usize],
) -> Result<f64> {
    let reference = SegmentList::from_labels(truth);
    let mask = masked
        .iter()
        .map(|&f| (f as f64, f as f64 + 1.0))
        .collect::<Vec<_>>();
    let reference = SegmentList::new(reference.segments, mask.clone())?;
    let hyp = blocks
        .iter()
        .zip(block_labels)
        .map(|(&(s, e), &label)| Segment {
            start: s as f64,
            end: e as f64,
            label,
        })
        .collect();
    der(&reference, &SegmentList::new(hyp, mask)?)
}

/// Runs every chain, writes traces, snapshots, the decoded sequence, the
/// metric file and the run manifest to `cfg.output`.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let dir = cfg.output.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let results = run_chains(cfg, &prep, &dir);

    let mut statuses = Vec::new();
    let mut finals = Vec::new();
    let mut reference = Vec::new();
    let mut final_ll = Vec::new();
    let mut first_err = None;
    for (chain, r) in results.into_iter().enumerate() {
        let seed = cfg.chain_seed(chain);
        match r {
            Ok(c) => {
                statuses.push(ChainStatus {
                    chain,
                    seed,
                    error: None,
                    exit_code: 0,
                });
                final_ll.push(Some(c.final_llpf));
                finals.push((chain, c.final_llpf, c.final_z));
                reference.extend(c.reference);
            }
            Err(e) => {
                std::fs::write(dir.join(format!("chain-{chain}.error")), e.to_string())?;
                statuses.push(ChainStatus {
                    chain,
                    seed,
                    error: Some(e.to_string()),
                    exit_code: e.exit_code(),
                });
                final_ll.push(None);
                first_err.get_or_insert(e);
            }
        }
    }
    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        trace_format: TRACE_FORMAT,
        sampler: cfg.sampler,
        seeds: (0..cfg.chains).map(|c| cfg.chain_seed(c)).collect(),
        chains: statuses.clone(),
        num_frames: prep.features.num_frames,
        num_blocks: prep.features.obs.num_steps(),
        num_steps: prep.steps.num_steps(),
        emission: prep.emission.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    if finals.is_empty() {
        return Err(first_err.expect("a chain ran"));
    }

    let (selected, decoded, test_set, reference_set) =
        decode_samples(&finals, &reference, cfg.decode.loglik_window)?;
    write_labels(&dir.join("decoded.labels"), &decoded)?;
    std::fs::write(dir.join("decoded.segments"), segments_text(&decoded))?;
    std::fs::write(dir.join("blocks.tsv"), blocks_text(&prep.features.blocks))?;
    let (der_value, hamming) = match (&prep.truth, &cfg.data.truth) {
        (Some(t), Some(path)) => {
            let full = read_labels(path)?;
            let d = frame_der(
                &full,
                &prep.features.blocks,
                &prep.features.masked,
                &decoded,
            )?;
            (Some(d), Some(t.hamming(&decoded)?))
        }
        _ => (None, None),
    };
    let metrics = Metrics {
        selected_chain: selected,
        test_set,
        reference_set,
        der: der_value,
        hamming,
        final_log_lik_per_frame: final_ll,
    };
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    Ok(RunSummary {
        dir,
        chains: statuses,
        decoded,
        metrics,
    })
}

/// Re-decodes a finished run from its traces; needs `trace.z_every` to
/// have stored label snapshots.
pub fn decode_run(dir: &Path) -> Result<(usize, Vec<usize>)> {
    let cfg = RunConfig::from_toml(&std::fs::read_to_string(dir.join("config.toml"))?)?;
    let prep_blocks = ingest_features(
        &cfg.data.features,
        cfg.data.format,
        cfg.preprocess.block_width,
        cfg.data.mask.as_deref(),
    )?;
    let steps = tie_min_duration(&prep_blocks.obs, cfg.preprocess.frames_per_state)?;
    let mut finals = Vec::new();
    let mut reference = Vec::new();
    for chain in 0..cfg.chains {
        let path = dir.join(format!("chain-{chain}.trace.jsonl"));
        if !path.is_file() {
            continue;
        }
        let trace = read_trace(&path)?;
        let with_z: Vec<&TraceRecord> = trace.iter().filter(|r| r.z.is_some()).collect();
        let Some(last) = with_z.last() else { continue };
        for r in &with_z {
            if in_reference(&cfg, r.iteration) {
                reference.push((
                    r.log_lik_per_frame,
                    steps.expand_steps(r.z.as_ref().expect("filtered")),
                ));
            }
        }
        finals.push((
            chain,
            last.log_lik_per_frame,
            steps.expand_steps(last.z.as_ref().expect("filtered")),
        ));
    }
    if finals.is_empty() {
        return Err(Error::InvalidInput("no trace holds label snapshots".into()));
    }
    let (chain, z, _, _) = decode_samples(&finals, &reference, cfg.decode.loglik_window)?;
    Ok((chain, z))
}
