use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blocked::TruncationConfig;
use crate::emission::{BaseMeasure, EmissionConfig};
use crate::error::{Error, Result};
use crate::model::{BetaPrior, GammaPrior, HyperPriors, SamplerOptions, UpdateFlags};
use crate::obs::Observations;
use crate::prob::NiwParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Direct,
    Blocked,
    BlockedDp,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "blocked" => Ok(Self::Blocked),
            "blocked-dp" => Ok(Self::BlockedDp),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Emission prior with hyperparameters set from the moments of the
/// preprocessed observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum EmissionSettings {
    /// NIW with the empirical mean and `scale = scale_factor * cov`.
    Niw {
        pseudocount: f64,
        dof: f64,
        scale_factor: f64,
        #[serde(default)]
        mixture: bool,
        #[serde(default)]
        tied_covariance: bool,
    },
    /// `mu ~ N(empirical mean, mean_cov_factor * cov)` and an inverse-Wishart
    /// whose expectation is `expected_cov_factor * cov`.
    Independent {
        mean_cov_factor: f64,
        dof: f64,
        expected_cov_factor: f64,
        #[serde(default)]
        mixture: bool,
        #[serde(default)]
        tied_covariance: bool,
    },
    /// Symmetric Dirichlet over `vocab` symbols.
    Dirichlet { vocab: usize, concentration: f64 },
}

impl Default for EmissionSettings {
    fn default() -> Self {
        EmissionSettings::Niw {
            pseudocount: 0.01,
            dof: 3.0,
            scale_factor: 0.75,
            mixture: false,
            tied_covariance: false,
        }
    }
}

impl EmissionSettings {
    pub fn is_mixture(&self) -> bool {
        match self {
            EmissionSettings::Niw { mixture, .. }
            | EmissionSettings::Independent { mixture, .. } => *mixture,
            EmissionSettings::Dirichlet { .. } => false,
        }
    }

    /// Concrete emission configuration for `obs`.
    pub fn resolve(&self, obs: &Observations) -> Result<EmissionConfig> {
        let moments = || -> Result<(DVector<f64>, DMatrix<f64>)> {
            let (mean, cov) = obs.moments()?;
            let d = mean.len();
            Ok((DVector::from_vec(mean), DMatrix::from_row_slice(d, d, &cov)))
        };
        let (base, mixture, tied) = match *self {
            EmissionSettings::Niw {
                pseudocount,
                dof,
                scale_factor,
                mixture,
                tied_covariance,
            } => {
                let (mean, cov) = moments()?;
                let niw = NiwParams::new(pseudocount, mean, dof, cov * scale_factor)?;
                (BaseMeasure::Niw(niw), mixture, tied_covariance)
            }
            EmissionSettings::Independent {
                mean_cov_factor,
                dof,
                expected_cov_factor,
                mixture,
                tied_covariance,
            } => {
                let (mean, cov) = moments()?;
                let d = mean.len() as f64;
                if !(dof > d + 1.0) {
                    return Err(Error::Config(format!(
                        "inverse-Wishart dof {dof} has no mean in dimension {d}"
                    )));
                }
                let base = BaseMeasure::IndependentGaussian {
                    mean,
                    mean_cov: &cov * mean_cov_factor,
                    dof,
                    scale: &cov * (expected_cov_factor * (dof - d - 1.0)),
                };
                (base, mixture, tied_covariance)
            }
            EmissionSettings::Dirichlet {
                vocab,
                concentration,
            } => {
                if obs.vocab().is_some_and(|v| v > vocab) {
                    return Err(Error::Config(
                        "data vocabulary exceeds the configured one".into(),
                    ));
                }
                (
                    BaseMeasure::Dirichlet {
                        vocab,
                        concentration,
                    },
                    false,
                    false,
                )
            }
        };
        base.validate()?;
        let cfg = EmissionConfig::new(base);
        Ok(if mixture { cfg.mixture(tied) } else { cfg })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureFormat {
    /// Extension-based: `.bin` is binary, `.sym` symbols, anything else text.
    #[default]
    Auto,
    Text,
    Binary,
    /// One non-negative integer symbol per line.
    Symbols,
}

impl FeatureFormat {
    pub fn detect(self, path: &Path) -> Self {
        match self {
            FeatureFormat::Auto => match path.extension().and_then(|e| e.to_str()) {
                Some("bin") => FeatureFormat::Binary,
                Some("sym") => FeatureFormat::Symbols,
                _ => FeatureFormat::Text,
            },
            f => f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub features: PathBuf,
    #[serde(default)]
    pub format: FeatureFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Per-frame reference labels for the metric report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    /// Held-out sequences scored by the predictive likelihood.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heldout: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    pub block_width: usize,
    pub frames_per_state: usize,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            block_width: 1,
            frames_per_state: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// Reference samples are taken every `every` iterations after `burn_in`.
    pub every: usize,
    /// Fraction of the sweeps discarded before the reference window.
    pub burn_in: f64,
    /// Drop samples whose per-frame log-likelihood is further than this
    /// below the best final sample; `None` keeps everything.
    pub loglik_window: Option<f64>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            every: 100,
            burn_in: 0.5,
            loglik_window: Some(0.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    /// Store the label sequence in the trace every this many iterations; 0 disables.
    pub z_every: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self { z_every: 0 }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sampler: SamplerKind,
    #[serde(default = "default_true")]
    pub sticky: bool,
    /// Blocked samplers: keep the global weights uniform (sparse Dirichlet rows).
    #[serde(default)]
    pub fixed_uniform_beta: bool,
    #[serde(rename = "L")]
    pub l: usize,
    /// Mixture truncation; used by `blocked-dp` only.
    #[serde(rename = "Lprime")]
    pub l_prime: usize,
    pub sweeps: usize,
    pub chains: usize,
    pub seed: u64,
    #[serde(default)]
    pub priors: HyperPriors,
    #[serde(default)]
    pub emission: EmissionSettings,
    #[serde(default)]
    pub preprocess: Preprocess,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub trace: TraceConfig,
    pub data: DataConfig,
    pub output: PathBuf,
}

impl RunConfig {
    /// Defaults for everything except the data file and the output directory.
    pub fn new(
        sampler: SamplerKind,
        features: impl Into<PathBuf>,
        output: impl Into<PathBuf>,
    ) -> Self {
        Self {
            sampler,
            sticky: true,
            fixed_uniform_beta: false,
            l: 20,
            l_prime: 20,
            sweeps: 1000,
            chains: 1,
            seed: 0,
            priors: HyperPriors::default(),
            emission: EmissionSettings::default(),
            preprocess: Preprocess::default(),
            decode: DecodeConfig::default(),
            trace: TraceConfig::default(),
            data: DataConfig {
                features: features.into(),
                format: FeatureFormat::Auto,
                mask: None,
                truth: None,
                heldout: Vec::new(),
            },
            output: output.into(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.data.features);
        self.data.mask.as_mut().map(fix);
        self.data.truth.as_mut().map(fix);
        self.data.heldout.iter_mut().for_each(fix);
        fix(&mut self.output);
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.chains == 0 || self.sweeps == 0 {
            return cfg("chains and sweeps must be positive".into());
        }
        if self.preprocess.block_width == 0 || self.preprocess.frames_per_state == 0 {
            return cfg("block width and frames per state must be positive".into());
        }
        if self.decode.every == 0 || !(0.0..1.0).contains(&self.decode.burn_in) {
            return cfg("decode window needs every >= 1 and burn_in in [0, 1)".into());
        }
        if self.decode.loglik_window.is_some_and(|w| !(w >= 0.0)) {
            return cfg("log-likelihood window must be non-negative".into());
        }
        if self.sampler != SamplerKind::Direct {
            self.truncation()?;
        }
        let mixture = self.emission.is_mixture();
        if self.sampler == SamplerKind::BlockedDp && !mixture {
            return cfg("blocked-dp needs mixture emissions".into());
        }
        if self.sampler == SamplerKind::Blocked && mixture {
            return cfg("mixture emissions need the blocked-dp sampler".into());
        }
        if self.sampler == SamplerKind::Direct && self.fixed_uniform_beta {
            return cfg("fixed uniform weights apply to the blocked samplers only".into());
        }
        self.priors
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let files = std::iter::once(&self.data.features)
            .chain(self.data.mask.iter())
            .chain(self.data.truth.iter())
            .chain(self.data.heldout.iter());
        for f in files {
            if !f.is_file() {
                return cfg(format!("{} does not exist", f.display()));
            }
        }
        Ok(())
    }

    /// Mixture truncation collapses to one component unless the sampler
    /// is `blocked-dp`.
    pub fn truncation(&self) -> Result<TruncationConfig> {
        let lp = if self.sampler == SamplerKind::BlockedDp {
            self.l_prime
        } else {
            1
        };
        TruncationConfig::new(self.l, lp).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sampler_options(&self) -> SamplerOptions {
        SamplerOptions {
            sticky: self.sticky,
            resample: UpdateFlags::ALL,
            fixed_uniform_beta: self.fixed_uniform_beta,
            component_cap: None,
        }
    }

    pub fn chain_seed(&self, chain: usize) -> u64 {
        self.seed.wrapping_add(chain as u64)
    }
}

/// Settings used for a named synthetic scenario.
pub fn preset_config(
    name: &str,
    features: impl Into<PathBuf>,
    output: impl Into<PathBuf>,
) -> Result<RunConfig> {
    let mut c = RunConfig::new(SamplerKind::Blocked, features, output);
    let independent = |mixture| EmissionSettings::Independent {
        mean_cov_factor: 1.0,
        dof: 3.0,
        expected_cov_factor: 0.75,
        mixture,
        tied_covariance: false,
    };
    match name {
        "persist3" => {}
        "fast4" => c.emission = independent(false),
        "multi5" => {
            c.emission = EmissionSettings::Dirichlet {
                vocab: 20,
                concentration: 2.0,
            }
        }
        "hub9" => {
            c.l = 50;
            c.emission = EmissionSettings::Dirichlet {
                vocab: 20,
                concentration: 0.1,
            };
        }
        "mog5" => {
            c.sampler = SamplerKind::BlockedDp;
            c.emission = independent(true);
        }
        other => return Err(Error::InvalidInput(format!("unknown preset `{other}`"))),
    }
    Ok(c)
}

/// Diarization-style settings: tied-covariance mixture emissions with a
/// normal prior on the means, a concentrated inverse-Wishart and strongly
/// persistent dynamics, over 10 chains.
pub fn diarization_config(features: impl Into<PathBuf>, output: impl Into<PathBuf>) -> RunConfig {
    let mut c = RunConfig::new(SamplerKind::BlockedDp, features, output);
    c.l = 15;
    c.l_prime = 30;
    c.chains = 10;
    c.emission = EmissionSettings::Independent {
        mean_cov_factor: 0.75,
        dof: 1000.0,
        expected_cov_factor: 1.0,
        mixture: true,
        tied_covariance: true,
    };
    c.priors = HyperPriors {
        gamma: GammaPrior {
            shape: 12.0,
            rate: 2.0,
        },
        alpha_plus_kappa: GammaPrior {
            shape: 6.0,
            rate: 1.0,
        },
        sigma: GammaPrior {
            shape: 1.0,
            rate: 0.5,
        },
        rho: BetaPrior { a: 500.0, b: 5.0 },
    };
    c.preprocess.frames_per_state = 2;
    c
}
