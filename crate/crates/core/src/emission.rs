//! Emission families and their sufficient-statistic caches.
//!
//! Statistics are indexed `[state][component]`. Families without mixture
//! emissions keep exactly one component per state. Collapsed samplers read
//! posterior predictives; instantiated samplers draw parameters and read
//! plain log-densities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::obs::{Datum, Observations};
use crate::prob::{
    cholesky, sample_dirichlet, sample_inverse_wishart, sample_niw, Gaussian, NiwParams, StudentT,
};
use crate::rng::RngState;

/// Prior over emission parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseMeasure {
    /// Conjugate normal-inverse-Wishart.
    Niw(NiwParams),
    /// Independent priors: `mu ~ N(mean, mean_cov)`, `Sigma ~ IW(dof, scale)`.
    IndependentGaussian {
        mean: DVector<f64>,
        mean_cov: DMatrix<f64>,
        dof: f64,
        scale: DMatrix<f64>,
    },
    /// Symmetric Dirichlet with the given per-symbol concentration.
    Dirichlet { vocab: usize, concentration: f64 },
}

impl BaseMeasure {
    pub fn validate(&self) -> Result<()> {
        match self {
            BaseMeasure::Niw(p) => p.validate(),
            BaseMeasure::IndependentGaussian {
                mean,
                mean_cov,
                dof,
                scale,
            } => {
                let d = mean.len();
                if d == 0 || mean_cov.nrows() != d || scale.nrows() != d {
                    return Err(Error::param(
                        "independent Gaussian prior has inconsistent dimensions",
                    ));
                }
                if !(*dof > d as f64 - 1.0) {
                    return Err(Error::param(format!(
                        "inverse-Wishart dof {dof} for dimension {d}"
                    )));
                }
                cholesky(mean_cov)
                    .map_err(|_| Error::param("mean prior covariance is not positive definite"))?;
                cholesky(scale)
                    .map_err(|_| Error::param("inverse-Wishart scale is not positive definite"))?;
                Ok(())
            }
            BaseMeasure::Dirichlet {
                vocab,
                concentration,
            } => {
                if *vocab < 2 {
                    return Err(Error::param("vocabulary must hold at least two symbols"));
                }
                if !(*concentration > 0.0) {
                    return Err(Error::param(format!(
                        "Dirichlet concentration {concentration}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            BaseMeasure::Niw(p) => Some(p.dim()),
            BaseMeasure::IndependentGaussian { mean, .. } => Some(mean.len()),
            BaseMeasure::Dirichlet { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    GaussianConjugate,
    GaussianNonConjugate,
    MultinomialDirichlet,
    DpMixGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionConfig {
    pub base: BaseMeasure,
    /// Per-state mixture emissions with mixture weights per state.
    #[serde(default)]
    pub mixture: bool,
    /// Mixture components within a state share one covariance.
    #[serde(default)]
    pub tied_covariance: bool,
    /// Alternations of the mean/covariance updates under independent priors.
    #[serde(default = "default_inner_sweeps")]
    pub inner_sweeps: usize,
}

fn default_inner_sweeps() -> usize {
    5
}

impl EmissionConfig {
    pub fn new(base: BaseMeasure) -> Self {
        Self {
            base,
            mixture: false,
            tied_covariance: false,
            inner_sweeps: default_inner_sweeps(),
        }
    }

    pub fn mixture(mut self, tied_covariance: bool) -> Self {
        self.mixture = true;
        self.tied_covariance = tied_covariance;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SuffStats {
    Gauss {
        n: usize,
        sum: DVector<f64>,
        outer: DMatrix<f64>,
    },
    Counts {
        n: usize,
        counts: Vec<usize>,
    },
}

impl SuffStats {
    pub fn count(&self) -> usize {
        match self {
            SuffStats::Gauss { n, .. } | SuffStats::Counts { n, .. } => *n,
        }
    }

    fn add(&mut self, y: Datum<'_>) {
        match self {
            SuffStats::Gauss { n, sum, outer } => {
                let v = y.real();
                let d = v.len();
                for i in 0..d {
                    sum[i] += v[i];
                    for j in 0..d {
                        outer[(i, j)] += v[i] * v[j];
                    }
                }
                *n += 1;
            }
            SuffStats::Counts { n, counts } => {
                counts[y.symbol()] += 1;
                *n += 1;
            }
        }
    }

    fn remove(&mut self, y: Datum<'_>) -> Result<()> {
        match self {
            SuffStats::Gauss { n, sum, outer } => {
                if *n == 0 {
                    return Err(Error::Consistency(
                        "removing from an empty Gaussian cache".into(),
                    ));
                }
                *n -= 1;
                if *n == 0 {
                    // reset exactly so round-off never accumulates across reuse
                    sum.fill(0.0);
                    outer.fill(0.0);
                } else {
                    let v = y.real();
                    let d = v.len();
                    for i in 0..d {
                        sum[i] -= v[i];
                        for j in 0..d {
                            outer[(i, j)] -= v[i] * v[j];
                        }
                    }
                }
            }
            SuffStats::Counts { n, counts } => {
                let c = &mut counts[y.symbol()];
                if *c == 0 {
                    return Err(Error::Consistency("removing an unseen symbol".into()));
                }
                *c -= 1;
                *n -= 1;
            }
        }
        Ok(())
    }

    /// Scatter about `mu`: sum of (y - mu)(y - mu)'.
    fn scatter(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        match self {
            SuffStats::Gauss { n, sum, outer } => {
                outer - sum * mu.transpose() - mu * sum.transpose()
                    + (mu * mu.transpose()) * (*n as f64)
            }
            SuffStats::Counts { .. } => unreachable!("scatter of symbol counts"),
        }
    }
}

/// Instantiated emission parameters of one state or component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AtomParams {
    Gaussian(Gaussian),
    Categorical { log_probs: Vec<f64> },
}

impl AtomParams {
    pub fn loglik(&self, y: Datum<'_>) -> f64 {
        match self {
            AtomParams::Gaussian(g) => g.logpdf(y.real()),
            AtomParams::Categorical { log_probs } => log_probs[y.symbol()],
        }
    }

    /// Draws one observation.
    pub fn sample(&self, rng: &mut RngState) -> Result<DatumOwned> {
        Ok(match self {
            AtomParams::Gaussian(g) => DatumOwned::Real(g.sample(rng).as_slice().to_vec()),
            AtomParams::Categorical { log_probs } => {
                DatumOwned::Symbol(crate::prob::sample_categorical_log(log_probs, rng)?)
            }
        })
    }

    pub fn gaussian(&self) -> Option<&Gaussian> {
        match self {
            AtomParams::Gaussian(g) => Some(g),
            AtomParams::Categorical { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatumOwned {
    Real(Vec<f64>),
    Symbol(usize),
}

impl DatumOwned {
    pub fn as_datum(&self) -> Datum<'_> {
        match self {
            DatumOwned::Real(v) => Datum::Real(v),
            DatumOwned::Symbol(s) => Datum::Symbol(*s),
        }
    }
}

#[derive(Debug, Clone)]
enum Predictive {
    StudentT(StudentT),
    LogProbs(Vec<f64>),
}

impl Predictive {
    fn logpdf(&self, y: Datum<'_>) -> f64 {
        match self {
            Predictive::StudentT(t) => t.logpdf(y.real()),
            Predictive::LogProbs(lp) => lp[y.symbol()],
        }
    }
}

/// Emission family with caches and instantiated parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmissionModel {
    config: EmissionConfig,
    stats: Vec<Vec<SuffStats>>,
    params: Vec<Vec<AtomParams>>,
    psi: Vec<Vec<f64>>,
    #[serde(skip)]
    cache: Vec<Vec<Option<Predictive>>>,
    #[serde(skip)]
    prior_cache: Option<Predictive>,
}

impl EmissionModel {
    pub fn new(config: EmissionConfig) -> Result<Self> {
        config.base.validate()?;
        if config.mixture && matches!(config.base, BaseMeasure::Dirichlet { .. }) {
            return Err(Error::Config(
                "mixture emissions require a Gaussian base measure".into(),
            ));
        }
        if config.tied_covariance {
            if !config.mixture {
                return Err(Error::Config(
                    "tied covariances apply to mixture emissions only".into(),
                ));
            }
            if !matches!(config.base, BaseMeasure::IndependentGaussian { .. }) {
                return Err(Error::Config(
                    "tied covariances require the independent Gaussian base measure".into(),
                ));
            }
        }
        if config.inner_sweeps == 0 {
            return Err(Error::Config("inner_sweeps must be at least 1".into()));
        }
        Ok(Self {
            config,
            stats: Vec::new(),
            params: Vec::new(),
            psi: Vec::new(),
            cache: Vec::new(),
            prior_cache: None,
        })
    }

    pub fn config(&self) -> &EmissionConfig {
        &self.config
    }

    pub fn base(&self) -> &BaseMeasure {
        &self.config.base
    }

    pub fn family(&self) -> Family {
        match (&self.config.base, self.config.mixture) {
            (_, true) => Family::DpMixGaussian,
            (BaseMeasure::Niw(_), false) => Family::GaussianConjugate,
            (BaseMeasure::IndependentGaussian { .. }, false) => Family::GaussianNonConjugate,
            (BaseMeasure::Dirichlet { .. }, false) => Family::MultinomialDirichlet,
        }
    }

    pub fn is_mixture(&self) -> bool {
        self.config.mixture
    }

    pub fn is_conjugate(&self) -> bool {
        !matches!(self.config.base, BaseMeasure::IndependentGaussian { .. })
    }

    /// Rejects observation streams of the wrong kind or width.
    pub fn check_observations(&self, obs: &Observations) -> Result<()> {
        match (&self.config.base, obs.dim(), obs.vocab()) {
            (BaseMeasure::Dirichlet { vocab, .. }, None, Some(v)) if v <= *vocab => Ok(()),
            (BaseMeasure::Dirichlet { vocab, .. }, None, Some(v)) => Err(Error::InvalidInput(
                format!("stream vocabulary {v} exceeds the model vocabulary {vocab}"),
            )),
            (BaseMeasure::Dirichlet { .. }, Some(_), _) => Err(Error::InvalidInput(
                "real-valued frames given to a multinomial model".into(),
            )),
            (base, Some(d), _) if base.dim() == Some(d) => Ok(()),
            (base, Some(d), _) => Err(Error::InvalidInput(format!(
                "frames have dimension {d}, model expects {}",
                base.dim().unwrap_or(0)
            ))),
            (_, None, _) => Err(Error::InvalidInput(
                "symbol frames given to a Gaussian model".into(),
            )),
        }
    }

    fn empty_stats(&self) -> SuffStats {
        match &self.config.base {
            BaseMeasure::Dirichlet { vocab, .. } => SuffStats::Counts {
                n: 0,
                counts: vec![0; *vocab],
            },
            base => {
                let d = base.dim().expect("Gaussian base");
                SuffStats::Gauss {
                    n: 0,
                    sum: DVector::zeros(d),
                    outer: DMatrix::zeros(d, d),
                }
            }
        }
    }

    pub fn num_states(&self) -> usize {
        self.stats.len()
    }

    pub fn num_components(&self, k: usize) -> usize {
        self.stats[k].len()
    }

    pub fn stats(&self, k: usize, j: usize) -> &SuffStats {
        &self.stats[k][j]
    }

    /// Frames currently assigned to state `k` across its components.
    pub fn state_count(&self, k: usize) -> usize {
        self.stats[k].iter().map(|s| s.count()).sum()
    }

    /// Clears all statistics and resizes to `num_states` states with
    /// `components` components each. Parameters and weights are kept where
    /// they exist.
    pub fn reset(&mut self, num_states: usize, components: usize) {
        let empty = self.empty_stats();
        self.stats = vec![vec![empty; components]; num_states];
        self.cache = vec![vec![None; components]; num_states];
    }

    /// Appends an empty state; mixture states start without components.
    pub fn push_state(&mut self) -> usize {
        let comps = if self.config.mixture { 0 } else { 1 };
        let empty = self.empty_stats();
        self.stats.push(vec![empty; comps]);
        self.cache.push(vec![None; comps]);
        self.stats.len() - 1
    }

    /// Removes state `k`, moving the last state into its slot.
    pub fn swap_remove_state(&mut self, k: usize) {
        self.sync_cache_shape();
        self.stats.swap_remove(k);
        self.cache.swap_remove(k);
        if k < self.params.len() {
            self.params.swap_remove(k);
        }
        if k < self.psi.len() {
            self.psi.swap_remove(k);
        }
    }

    pub fn push_component(&mut self, k: usize) -> usize {
        let empty = self.empty_stats();
        self.stats[k].push(empty);
        self.sync_cache_shape();
        self.cache[k].push(None);
        self.stats[k].len() - 1
    }

    pub fn swap_remove_component(&mut self, k: usize, j: usize) {
        self.sync_cache_shape();
        if self.cache[k].len() != self.stats[k].len() {
            self.cache[k] = vec![None; self.stats[k].len()];
        }
        self.stats[k].swap_remove(j);
        self.cache[k].swap_remove(j);
    }

    fn sync_cache_shape(&mut self) {
        if self.cache.len() != self.stats.len() {
            self.cache = self.stats.iter().map(|row| vec![None; row.len()]).collect();
        }
    }

    fn invalidate(&mut self, k: usize, j: usize) {
        self.sync_cache_shape();
        if self.cache[k].len() != self.stats[k].len() {
            self.cache[k] = vec![None; self.stats[k].len()];
        }
        self.cache[k][j] = None;
    }

    pub fn add(&mut self, k: usize, j: usize, y: Datum<'_>) {
        self.stats[k][j].add(y);
        self.invalidate(k, j);
    }

    pub fn remove(&mut self, k: usize, j: usize, y: Datum<'_>) -> Result<()> {
        self.stats[k][j].remove(y)?;
        self.invalidate(k, j);
        Ok(())
    }

    fn predictive_from(&self, stats: &SuffStats) -> Result<Predictive> {
        match (&self.config.base, stats) {
            (BaseMeasure::Niw(p), SuffStats::Gauss { n, sum, outer }) => Ok(Predictive::StudentT(
                p.posterior(*n, sum, outer).predictive()?,
            )),
            (
                BaseMeasure::Dirichlet {
                    vocab,
                    concentration,
                },
                SuffStats::Counts { n, counts },
            ) => {
                let denom = (*n as f64 + *vocab as f64 * concentration).ln();
                Ok(Predictive::LogProbs(
                    counts
                        .iter()
                        .map(|c| (*c as f64 + concentration).ln() - denom)
                        .collect(),
                ))
            }
            (BaseMeasure::IndependentGaussian { .. }, _) => Err(Error::Unsupported(
                "collapsed predictive under the independent Gaussian prior".into(),
            )),
            _ => Err(Error::Consistency(
                "statistics do not match the base measure".into(),
            )),
        }
    }

    /// `log p(y | data in (k, j))` with the parameters integrated out.
    pub fn predictive_loglik(&mut self, k: usize, j: usize, y: Datum<'_>) -> Result<f64> {
        self.sync_cache_shape();
        if self.cache[k].len() != self.stats[k].len() {
            self.cache[k] = vec![None; self.stats[k].len()];
        }
        if self.cache[k][j].is_none() {
            self.cache[k][j] = Some(self.predictive_from(&self.stats[k][j])?);
        }
        Ok(self.cache[k][j].as_ref().expect("filled above").logpdf(y))
    }

    /// Prior predictive `log p(y)`.
    pub fn prior_predictive_loglik(&mut self, y: Datum<'_>) -> Result<f64> {
        if self.prior_cache.is_none() {
            self.prior_cache = Some(self.predictive_from(&self.empty_stats())?);
        }
        Ok(self.prior_cache.as_ref().expect("filled above").logpdf(y))
    }

    /// Predictive of several frames jointly given the data in `(k, j)`;
    /// `None` for `k` means the prior predictive.
    pub fn group_predictive_loglik(
        &mut self,
        k: Option<(usize, usize)>,
        frames: &[Datum<'_>],
    ) -> Result<f64> {
        if frames.len() == 1 {
            return match k {
                Some((k, j)) => self.predictive_loglik(k, j, frames[0]),
                None => self.prior_predictive_loglik(frames[0]),
            };
        }
        let mut stats = match k {
            Some((k, j)) => self.stats[k][j].clone(),
            None => self.empty_stats(),
        };
        let mut total = 0.0;
        for y in frames {
            total += self.predictive_from(&stats)?.logpdf(*y);
            stats.add(*y);
        }
        Ok(total)
    }

    /// Log marginal likelihood of the data in `(k, j)` under the base
    /// measure (conjugate families only).
    pub fn log_marginal(&self, k: usize, j: usize) -> Result<f64> {
        match (&self.config.base, &self.stats[k][j]) {
            (BaseMeasure::Niw(p), SuffStats::Gauss { n, sum, outer }) => {
                p.log_marginal(*n, sum, outer)
            }
            (
                BaseMeasure::Dirichlet {
                    vocab,
                    concentration,
                },
                SuffStats::Counts { n, counts },
            ) => {
                let a = *concentration;
                let va = *vocab as f64 * a;
                let mut v = ln_gamma(va) - ln_gamma(va + *n as f64);
                for c in counts.iter().filter(|c| **c > 0) {
                    v += ln_gamma(a + *c as f64) - ln_gamma(a);
                }
                Ok(v)
            }
            (BaseMeasure::IndependentGaussian { .. }, _) => Err(Error::Unsupported(
                "marginal likelihood under the independent Gaussian prior".into(),
            )),
            _ => Err(Error::Consistency(
                "statistics do not match the base measure".into(),
            )),
        }
    }

    /// Draw from the base measure.
    pub fn draw_from_base(&self, rng: &mut RngState) -> Result<AtomParams> {
        match &self.config.base {
            BaseMeasure::Niw(p) => {
                let (mu, sigma) = sample_niw(p, rng)?;
                Ok(AtomParams::Gaussian(Gaussian::new(mu, sigma)?))
            }
            BaseMeasure::IndependentGaussian {
                mean,
                mean_cov,
                dof,
                scale,
            } => {
                let sigma = sample_inverse_wishart(*dof, scale, rng)?;
                let mu = Gaussian::new(mean.clone(), mean_cov.clone())?.sample(rng);
                Ok(AtomParams::Gaussian(Gaussian::new(mu, sigma)?))
            }
            BaseMeasure::Dirichlet {
                vocab,
                concentration,
            } => {
                let p = sample_dirichlet(&vec![*concentration; *vocab], rng)?;
                Ok(AtomParams::Categorical {
                    log_probs: p.iter().map(|x| x.ln()).collect(),
                })
            }
        }
    }

    /// Resizes the parameter store to `num_states x components`, filling new
    /// slots with base-measure draws.
    pub fn init_params(
        &mut self,
        num_states: usize,
        components: usize,
        rng: &mut RngState,
    ) -> Result<()> {
        self.params.truncate(num_states);
        for row in &mut self.params {
            row.truncate(components);
        }
        while self.params.len() < num_states {
            self.params.push(Vec::new());
        }
        for k in 0..num_states {
            while self.params[k].len() < components {
                let p = self.draw_from_base(rng)?;
                self.params[k].push(p);
            }
        }
        if self.config.tied_covariance {
            for k in 0..num_states {
                self.tie_covariances_to_first(k)?;
            }
        }
        Ok(())
    }

    fn tie_covariances_to_first(&mut self, k: usize) -> Result<()> {
        let Some(AtomParams::Gaussian(first)) = self.params[k].first() else {
            return Ok(());
        };
        let cov = first.cov().clone();
        for p in self.params[k].iter_mut().skip(1) {
            if let AtomParams::Gaussian(g) = p {
                *g = Gaussian::new(g.mean().clone(), cov.clone())?;
            }
        }
        Ok(())
    }

    pub fn params(&self, k: usize, j: usize) -> &AtomParams {
        &self.params[k][j]
    }

    pub fn params_table(&self) -> &[Vec<AtomParams>] {
        &self.params
    }

    pub fn set_params(&mut self, k: usize, j: usize, p: AtomParams) {
        self.params[k][j] = p;
    }

    pub fn set_params_table(&mut self, params: Vec<Vec<AtomParams>>) {
        self.params = params;
    }

    pub fn psi(&self) -> &[Vec<f64>] {
        &self.psi
    }

    pub fn set_psi(&mut self, psi: Vec<Vec<f64>>) {
        self.psi = psi;
    }

    /// `log f(y | theta_{k,j})` under the instantiated parameters.
    pub fn loglik(&self, k: usize, j: usize, y: Datum<'_>) -> f64 {
        self.params[k][j].loglik(y)
    }

    /// Log-density of `y` in state `k`, summing over mixture components.
    pub fn state_loglik(&self, k: usize, y: Datum<'_>) -> f64 {
        if !self.config.mixture {
            return self.params[k][0].loglik(y);
        }
        let psi = &self.psi[k];
        self.mixture_lse(k, y, |j| {
            if psi[j] > 0.0 {
                psi[j].ln()
            } else {
                f64::NEG_INFINITY
            }
        })
    }

    /// Per-state log mixture weights for [`Self::state_loglik_with`].
    pub fn log_psi(&self) -> Vec<Vec<f64>> {
        self.psi
            .iter()
            .map(|row| row.iter().map(|p| p.ln()).collect())
            .collect()
    }

    /// [`Self::state_loglik`] with precomputed log weights.
    pub fn state_loglik_with(&self, k: usize, y: Datum<'_>, log_psi: &[Vec<f64>]) -> f64 {
        if !self.config.mixture {
            return self.params[k][0].loglik(y);
        }
        let lp = &log_psi[k];
        self.mixture_lse(k, y, |j| lp[j])
    }

    // one-pass log-sum-exp with a running maximum
    fn mixture_lse(&self, k: usize, y: Datum<'_>, log_weight: impl Fn(usize) -> f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut acc = 0.0;
        for (j, p) in self.params[k].iter().enumerate() {
            let w = log_weight(j);
            if w == f64::NEG_INFINITY {
                continue;
            }
            let v = w + p.loglik(y);
            if v == f64::NEG_INFINITY {
                continue;
            }
            if v > max {
                acc = acc * (max - v).exp() + 1.0;
                max = v;
            } else {
                acc += (v - max).exp();
            }
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + acc.ln()
    }

    /// Posterior draw of every component of state `k` given its cached
    /// statistics. Without data this is a base-measure draw.
    pub fn sample_params(&mut self, k: usize, rng: &mut RngState) -> Result<()> {
        let comps = self.stats[k].len();
        if self.params.len() <= k {
            return Err(Error::InvalidState(format!(
                "no parameter slot for state {k}"
            )));
        }
        while self.params[k].len() < comps {
            let p = self.draw_from_base(rng)?;
            self.params[k].push(p);
        }
        if self.config.tied_covariance {
            return self.sample_tied(k, rng);
        }
        for j in 0..comps {
            let p = self.sample_component(k, j, rng)?;
            self.params[k][j] = p;
        }
        Ok(())
    }

    fn sample_component(&self, k: usize, j: usize, rng: &mut RngState) -> Result<AtomParams> {
        let stats = &self.stats[k][j];
        match (&self.config.base, stats) {
            (BaseMeasure::Niw(p), SuffStats::Gauss { n, sum, outer }) => {
                let post = p.posterior(*n, sum, outer);
                let (mu, sigma) = sample_niw(&post, rng)?;
                Ok(AtomParams::Gaussian(Gaussian::new(mu, sigma)?))
            }
            (BaseMeasure::Dirichlet { concentration, .. }, SuffStats::Counts { counts, .. }) => {
                let alpha: Vec<f64> = counts.iter().map(|c| *c as f64 + concentration).collect();
                let p = sample_dirichlet(&alpha, rng)?;
                Ok(AtomParams::Categorical {
                    log_probs: p.iter().map(|x| x.ln()).collect(),
                })
            }
            (
                BaseMeasure::IndependentGaussian {
                    mean,
                    mean_cov,
                    dof,
                    scale,
                },
                SuffStats::Gauss { n, .. },
            ) => {
                if *n == 0 {
                    return self.draw_from_base(rng);
                }
                let mut sigma = match &self.params[k][j] {
                    AtomParams::Gaussian(g) => g.cov().clone(),
                    AtomParams::Categorical { .. } => unreachable!(),
                };
                let mut mu = DVector::zeros(mean.len());
                for _ in 0..self.config.inner_sweeps {
                    mu = sample_mean_given_cov(mean, mean_cov, &sigma, stats, rng)?;
                    let post_scale = crate::prob::symmetrize(scale + stats.scatter(&mu));
                    sigma = sample_inverse_wishart(dof + *n as f64, &post_scale, rng)?;
                }
                Ok(AtomParams::Gaussian(Gaussian::new(mu, sigma)?))
            }
            _ => Err(Error::Consistency(
                "statistics do not match the base measure".into(),
            )),
        }
    }

    /// Shared-covariance update for one state: component means given the
    /// covariance, then the covariance from the pooled within-state scatter.
    fn sample_tied(&mut self, k: usize, rng: &mut RngState) -> Result<()> {
        let BaseMeasure::IndependentGaussian {
            mean,
            mean_cov,
            dof,
            scale,
        } = &self.config.base
        else {
            unreachable!("checked at construction");
        };
        let comps = self.stats[k].len();
        if comps == 0 {
            return Ok(());
        }
        let mut sigma = match &self.params[k][0] {
            AtomParams::Gaussian(g) => g.cov().clone(),
            AtomParams::Categorical { .. } => unreachable!(),
        };
        let total: usize = self.stats[k].iter().map(|s| s.count()).sum();
        let mut mus: Vec<DVector<f64>> = vec![DVector::zeros(mean.len()); comps];
        let (used, empty): (Vec<usize>, Vec<usize>) =
            (0..comps).partition(|&j| self.stats[k][j].count() > 0);
        for _ in 0..self.config.inner_sweeps {
            let mut pooled = scale.clone();
            for &j in &used {
                mus[j] = sample_mean_given_cov(mean, mean_cov, &sigma, &self.stats[k][j], rng)?;
                pooled += self.stats[k][j].scatter(&mus[j]);
            }
            sigma =
                sample_inverse_wishart(dof + total as f64, &crate::prob::symmetrize(pooled), rng)?;
        }
        // empty components leave the covariance update untouched
        for &j in &empty {
            mus[j] = sample_mean_given_cov(mean, mean_cov, &sigma, &self.stats[k][j], rng)?;
        }
        for j in 0..comps {
            self.params[k][j] = AtomParams::Gaussian(Gaussian::new(mus[j].clone(), sigma.clone())?);
        }
        Ok(())
    }

    /// Rebuilds statistics from labels: `z` per step, `s` per frame (empty
    /// for non-mixture families).
    pub fn rebuild_stats(
        &mut self,
        obs: &Observations,
        z: &[usize],
        s: &[usize],
        num_states: usize,
        components: usize,
    ) -> Result<()> {
        self.reset(num_states, components);
        for (t, &k) in z.iter().enumerate() {
            if k >= num_states {
                return Err(Error::InvalidState(format!(
                    "label {k} at step {t} exceeds {num_states} states"
                )));
            }
            for f in obs.step_frames(t) {
                let j = if self.config.mixture { s[f] } else { 0 };
                if j >= components {
                    return Err(Error::InvalidState(format!(
                        "component {j} at frame {f} out of range"
                    )));
                }
                self.stats[k][j].add(obs.frame(f));
            }
        }
        Ok(())
    }

    /// Largest absolute difference between cached statistics and `other`.
    pub fn max_stats_discrepancy(&self, other: &EmissionModel) -> Option<f64> {
        if self.stats.len() != other.stats.len() {
            return None;
        }
        let mut worst: f64 = 0.0;
        for (ra, rb) in self.stats.iter().zip(&other.stats) {
            if ra.len() != rb.len() {
                return None;
            }
            for (a, b) in ra.iter().zip(rb) {
                match (a, b) {
                    (
                        SuffStats::Gauss {
                            n: na,
                            sum: sa,
                            outer: oa,
                        },
                        SuffStats::Gauss {
                            n: nb,
                            sum: sb,
                            outer: ob,
                        },
                    ) => {
                        if na != nb {
                            return None;
                        }
                        worst = worst.max((sa - sb).amax()).max((oa - ob).amax());
                    }
                    (
                        SuffStats::Counts { counts: ca, .. },
                        SuffStats::Counts { counts: cb, .. },
                    ) => {
                        if ca != cb {
                            return None;
                        }
                    }
                    _ => return None,
                }
            }
        }
        Some(worst)
    }
}

/// `mu | Sigma, data` under an independent Gaussian prior on the mean.
fn sample_mean_given_cov(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    stats: &SuffStats,
    rng: &mut RngState,
) -> Result<DVector<f64>> {
    let SuffStats::Gauss { n, sum, .. } = stats else {
        unreachable!("Gaussian statistics");
    };
    if *n == 0 {
        return Ok(Gaussian::new(prior_mean.clone(), prior_cov.clone())?.sample(rng));
    }
    let prior_prec = spd_inverse(prior_cov)?;
    let prec = spd_inverse(sigma)?;
    let post_prec = &prior_prec + &prec * (*n as f64);
    let post_cov = crate::prob::symmetrize(spd_inverse(&post_prec)?);
    let post_mean = &post_cov * (&prior_prec * prior_mean + &prec * sum);
    Ok(Gaussian::new(post_mean, post_cov)?.sample(rng))
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Decomposition("matrix is not positive definite".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::gaussian_logpdf;

    fn niw_1d() -> NiwParams {
        NiwParams::new(
            0.5,
            DVector::from_element(1, 0.0),
            4.0,
            DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap()
    }

    fn conj_model() -> EmissionModel {
        let mut m = EmissionModel::new(EmissionConfig::new(BaseMeasure::Niw(niw_1d()))).unwrap();
        m.push_state();
        m
    }

    #[test]
    fn families() {
        assert_eq!(conj_model().family(), Family::GaussianConjugate);
        let dir = EmissionModel::new(EmissionConfig::new(BaseMeasure::Dirichlet {
            vocab: 5,
            concentration: 1.0,
        }))
        .unwrap();
        assert_eq!(dir.family(), Family::MultinomialDirichlet);
        let indep = BaseMeasure::IndependentGaussian {
            mean: DVector::zeros(1),
            mean_cov: DMatrix::identity(1, 1),
            dof: 3.0,
            scale: DMatrix::identity(1, 1),
        };
        let nc = EmissionModel::new(EmissionConfig::new(indep.clone())).unwrap();
        assert_eq!(nc.family(), Family::GaussianNonConjugate);
        let mix = EmissionModel::new(EmissionConfig::new(indep).mixture(true)).unwrap();
        assert_eq!(mix.family(), Family::DpMixGaussian);
        assert!(
            EmissionModel::new(EmissionConfig::new(BaseMeasure::Niw(niw_1d())).mixture(true))
                .is_err()
        );
    }

    #[test]
    fn empty_cache_is_prior_predictive() {
        let mut m = conj_model();
        let p = niw_1d();
        let t = StudentT::new(
            p.dof,
            p.mean.clone(),
            &(&p.scale * ((p.pseudocount + 1.0) / (p.pseudocount * p.dof))),
        )
        .unwrap();
        for y in [-1.0, 0.5, 3.0] {
            let a = m.predictive_loglik(0, 0, Datum::Real(&[y])).unwrap();
            assert!((a - t.logpdf(&[y])).abs() < 1e-12);
            assert!((a - m.prior_predictive_loglik(Datum::Real(&[y])).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_dirichlet_predictive_is_uniform() {
        let mut m = EmissionModel::new(EmissionConfig::new(BaseMeasure::Dirichlet {
            vocab: 20,
            concentration: 2.0,
        }))
        .unwrap();
        m.push_state();
        for v in 0..20 {
            let lp = m.predictive_loglik(0, 0, Datum::Symbol(v)).unwrap();
            assert!((lp - (1.0f64 / 20.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn add_remove_restores_predictive() {
        let mut m = conj_model();
        let y = [1.3];
        let probe = Datum::Real(&[0.2]);
        let before = m.predictive_loglik(0, 0, probe).unwrap();
        m.add(0, 0, Datum::Real(&[5.0]));
        let base = m.predictive_loglik(0, 0, probe).unwrap();
        for _ in 0..7 {
            m.add(0, 0, Datum::Real(&y));
        }
        assert!((m.predictive_loglik(0, 0, probe).unwrap() - base).abs() > 1e-6);
        for _ in 0..7 {
            m.remove(0, 0, Datum::Real(&y)).unwrap();
        }
        assert!((m.predictive_loglik(0, 0, probe).unwrap() - base).abs() < 1e-9);
        m.remove(0, 0, Datum::Real(&[5.0])).unwrap();
        assert!((m.predictive_loglik(0, 0, probe).unwrap() - before).abs() < 1e-12);
        assert!(m.remove(0, 0, Datum::Real(&y)).is_err());
    }

    #[test]
    fn nonconjugate_predictive_is_unsupported() {
        let mut m = EmissionModel::new(EmissionConfig::new(BaseMeasure::IndependentGaussian {
            mean: DVector::zeros(1),
            mean_cov: DMatrix::identity(1, 1),
            dof: 3.0,
            scale: DMatrix::identity(1, 1),
        }))
        .unwrap();
        m.push_state();
        assert!(matches!(
            m.predictive_loglik(0, 0, Datum::Real(&[0.0])),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn group_predictive_is_chain_rule() {
        let mut m = conj_model();
        m.add(0, 0, Datum::Real(&[0.7]));
        let a = [0.1];
        let b = [-0.4];
        let joint = m
            .group_predictive_loglik(Some((0, 0)), &[Datum::Real(&a), Datum::Real(&b)])
            .unwrap();
        let first = m.predictive_loglik(0, 0, Datum::Real(&a)).unwrap();
        m.add(0, 0, Datum::Real(&a));
        let second = m.predictive_loglik(0, 0, Datum::Real(&b)).unwrap();
        assert!((joint - first - second).abs() < 1e-12);
    }

    #[test]
    fn posterior_draws_contract_on_repeated_point() {
        let mut m = conj_model();
        m.init_params(1, 1, &mut RngState::new(1)).unwrap();
        for _ in 0..10_000 {
            m.add(0, 0, Datum::Real(&[2.5]));
        }
        let mut rng = RngState::new(2);
        m.sample_params(0, &mut rng).unwrap();
        let g = m.params(0, 0).gaussian().unwrap();
        assert!((g.mean()[0] - 2.5).abs() < 0.01);
    }

    #[test]
    fn conjugate_posterior_mean_matches_closed_form() {
        let mut m = conj_model();
        m.init_params(1, 1, &mut RngState::new(3)).unwrap();
        for y in [1.0, 2.0, 0.5, 1.5] {
            m.add(0, 0, Datum::Real(&[y]));
        }
        let SuffStats::Gauss { n, sum, outer } = m.stats(0, 0).clone() else {
            unreachable!()
        };
        let post = niw_1d().posterior(n, &sum, &outer);
        let mut rng = RngState::new(4);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| {
                m.sample_params(0, &mut rng).unwrap();
                m.params(0, 0).gaussian().unwrap().mean()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let se = (var / draws.len() as f64).sqrt();
        assert!(
            (mean - post.mean[0]).abs() < 4.0 * se,
            "{mean} vs {}",
            post.mean[0]
        );
    }

    #[test]
    fn empty_state_draw_follows_base() {
        let mut m = conj_model();
        m.init_params(1, 1, &mut RngState::new(5)).unwrap();
        let mut rng = RngState::new(6);
        let mut vars = Vec::new();
        for _ in 0..20_000 {
            m.sample_params(0, &mut rng).unwrap();
            vars.push(m.params(0, 0).gaussian().unwrap().cov()[(0, 0)]);
        }
        let mean = vars.iter().sum::<f64>() / vars.len() as f64;
        // E[Sigma] = 2 / (4 - 2)
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn nonconjugate_update_contracts() {
        let mut m = EmissionModel::new(EmissionConfig::new(BaseMeasure::IndependentGaussian {
            mean: DVector::zeros(2),
            mean_cov: DMatrix::identity(2, 2) * 10.0,
            dof: 4.0,
            scale: DMatrix::identity(2, 2),
        }))
        .unwrap();
        m.push_state();
        let mut rng = RngState::new(7);
        m.init_params(1, 1, &mut rng).unwrap();
        let mut gen = RngState::new(8);
        let truth = Gaussian::new(
            DVector::from_vec(vec![3.0, -1.0]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        )
        .unwrap();
        for _ in 0..5000 {
            let y = truth.sample(&mut gen);
            m.add(0, 0, Datum::Real(y.as_slice()));
        }
        m.sample_params(0, &mut rng).unwrap();
        let g = m.params(0, 0).gaussian().unwrap();
        assert!((g.mean() - truth.mean()).amax() < 0.05);
        assert!((g.cov() - truth.cov()).amax() < 0.05);
    }

    #[test]
    fn tied_covariance_is_shared() {
        let base = BaseMeasure::IndependentGaussian {
            mean: DVector::zeros(1),
            mean_cov: DMatrix::identity(1, 1) * 25.0,
            dof: 3.0,
            scale: DMatrix::identity(1, 1),
        };
        let mut m = EmissionModel::new(EmissionConfig::new(base).mixture(true)).unwrap();
        m.reset(1, 2);
        let mut rng = RngState::new(9);
        m.init_params(1, 2, &mut rng).unwrap();
        for i in 0..2000 {
            let (j, c) = if i % 2 == 0 { (0, -3.0) } else { (1, 3.0) };
            let noise = ((i * 7919) % 101) as f64 / 101.0 - 0.5;
            m.add(0, j, Datum::Real(&[c + noise]));
        }
        m.sample_params(0, &mut rng).unwrap();
        let a = m.params(0, 0).gaussian().unwrap();
        let b = m.params(0, 1).gaussian().unwrap();
        assert_eq!(a.cov(), b.cov());
        assert!((a.mean()[0] + 3.0).abs() < 0.1 && (b.mean()[0] - 3.0).abs() < 0.1);
        // the residual variance of a uniform on [-0.5, 0.5] is 1/12
        assert!(a.cov()[(0, 0)] < 0.2);
    }

    #[test]
    fn mixture_state_loglik_sums_components() {
        let base = BaseMeasure::IndependentGaussian {
            mean: DVector::zeros(1),
            mean_cov: DMatrix::identity(1, 1),
            dof: 3.0,
            scale: DMatrix::identity(1, 1),
        };
        let mut m = EmissionModel::new(EmissionConfig::new(base).mixture(false)).unwrap();
        m.reset(1, 2);
        let g0 = Gaussian::new(DVector::from_element(1, -1.0), DMatrix::identity(1, 1)).unwrap();
        let g1 =
            Gaussian::new(DVector::from_element(1, 2.0), DMatrix::identity(1, 1) * 0.5).unwrap();
        m.set_params_table(vec![vec![
            AtomParams::Gaussian(g0.clone()),
            AtomParams::Gaussian(g1.clone()),
        ]]);
        m.set_psi(vec![vec![0.3, 0.7]]);
        let y = [0.4];
        let direct = (0.3 * g0.logpdf(&y).exp() + 0.7 * g1.logpdf(&y).exp()).ln();
        assert!((m.state_loglik(0, Datum::Real(&y)) - direct).abs() < 1e-12);
        let check = gaussian_logpdf(&y, g1.mean(), g1.cov()).unwrap();
        assert!((check - g1.logpdf(&y)).abs() < 1e-12);
    }

    #[test]
    fn multinomial_marginal_matches_chain() {
        let mut m = EmissionModel::new(EmissionConfig::new(BaseMeasure::Dirichlet {
            vocab: 4,
            concentration: 0.7,
        }))
        .unwrap();
        m.push_state();
        let seq = [0usize, 2, 2, 3, 0, 0];
        let mut chain = 0.0;
        for &v in &seq {
            chain += m.predictive_loglik(0, 0, Datum::Symbol(v)).unwrap();
            m.add(0, 0, Datum::Symbol(v));
        }
        assert!((chain - m.log_marginal(0, 0).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn check_observation_kinds() {
        let m = conj_model();
        assert!(m
            .check_observations(&Observations::real(1, vec![0.0]).unwrap())
            .is_ok());
        assert!(m
            .check_observations(&Observations::real(2, vec![0.0, 1.0]).unwrap())
            .is_err());
        assert!(m
            .check_observations(&Observations::symbols(3, vec![0]).unwrap())
            .is_err());
    }
}
