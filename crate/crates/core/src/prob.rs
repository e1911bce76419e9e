//! Probability primitives: samplers and log-densities for the laws the
//! Gibbs samplers need. All randomness comes from a caller-owned
//! [`RngState`](crate::RngState).
//!
//! Inverse-Wishart convention: `IW(dof, scale)` has mean
//! `scale / (dof - d - 1)`. The normal-inverse-Wishart `scale` field is the
//! full scatter-type matrix (degrees of freedom times the "per-dof" matrix),
//! and its `pseudocount` is the prior sample size attached to the mean.

use std::f64::consts::PI;
use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Largest `n` for which [`antoniak_pmf`] evaluates the exact Stirling table.
pub const MAX_STIRLING_N: usize = 60;

const PROB_TOL: f64 = 1e-10;

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::param("probability vector is empty"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::param(
                "probability vector has a negative or non-finite entry",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::param(format!("probability vector sums to {total}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    /// Normalizes non-negative weights.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Degenerate("weights sum to zero".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self(weights))
    }

    pub(crate) fn from_raw(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `log(sum(exp(xs)))`, returning `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sample_uniform_open<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(Open01)
}

/// Log of a Gamma(shape, 1) draw. Small shapes go through the
/// `Gamma(a + 1) * U^(1/a)` identity so the draw never underflows to zero.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && shape.is_finite());
    if shape < 1.0 {
        let g: f64 = Gamma::new(shape + 1.0, 1.0).expect("shape > 0").sample(rng);
        let u = sample_uniform_open(rng);
        g.ln() + u.ln() / shape
    } else {
        let g: f64 = Gamma::new(shape, 1.0).expect("shape > 0").sample(rng);
        g.ln()
    }
}

/// Gamma draw with the shape/rate parameterization (mean `shape / rate`).
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !(rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::param(format!("Gamma({shape}, {rate})")));
    }
    Ok((sample_log_gamma(shape, rng) - rate.ln()).exp())
}

pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::param(format!("Beta({a}, {b})")));
    }
    let la = sample_log_gamma(a, rng);
    let lb = sample_log_gamma(b, rng);
    // a / (a + b) computed as 1 / (1 + exp(lb - la))
    Ok(1.0 / (1.0 + (lb - la).exp()))
}

pub fn sample_bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p
}

pub fn sample_binomial<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(format!("Binomial success probability {p}")));
    }
    if n == 0 || p == 0.0 {
        return Ok(0);
    }
    if p == 1.0 {
        return Ok(n);
    }
    let draw = Binomial::new(n as u64, p)
        .map_err(|e| Error::param(e.to_string()))?
        .sample(rng);
    Ok(draw as usize)
}

/// Dirichlet draw. Computed in the log domain so that very small
/// concentrations still yield a normalized vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<ProbVector> {
    if alpha.len() < 2 {
        return Err(Error::param("Dirichlet needs at least two components"));
    }
    if alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::param(
            "Dirichlet parameters must be positive and finite",
        ));
    }
    let logs: Vec<f64> = alpha.iter().map(|&a| sample_log_gamma(a, rng)).collect();
    Ok(normalize_logs(logs))
}

/// Dirichlet draw that accepts zero entries; those components are exactly
/// zero in the result. At least one entry must be positive.
pub fn sample_dirichlet_with_zeros<R: Rng + ?Sized>(
    alpha: &[f64],
    rng: &mut R,
) -> Result<ProbVector> {
    if alpha.iter().any(|a| *a < 0.0 || !a.is_finite()) {
        return Err(Error::param(
            "Dirichlet parameters must be non-negative and finite",
        ));
    }
    if !alpha.iter().any(|a| *a > 0.0) {
        return Err(Error::Degenerate(
            "all Dirichlet parameters are zero".into(),
        ));
    }
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            if a > 0.0 {
                sample_log_gamma(a, rng)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(normalize_logs(logs))
}

fn normalize_logs(logs: Vec<f64>) -> ProbVector {
    let lse = log_sum_exp(&logs);
    let mut w: Vec<f64> = logs.into_iter().map(|l| (l - lse).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    ProbVector(w)
}

/// First `truncation` GEM(concentration) weights followed by the leftover
/// stick mass as a final entry.
pub fn sample_stick_breaking<R: Rng + ?Sized>(
    concentration: f64,
    truncation: usize,
    rng: &mut R,
) -> Result<ProbVector> {
    if truncation == 0 {
        return Err(Error::param("stick-breaking truncation must be positive"));
    }
    if !(concentration > 0.0) {
        return Err(Error::param(format!("concentration {concentration}")));
    }
    let mut weights = Vec::with_capacity(truncation + 1);
    let mut rest = 1.0;
    for _ in 0..truncation {
        let v = sample_beta(1.0, concentration, rng)?;
        weights.push(rest * v);
        rest *= 1.0 - v;
    }
    weights.push(rest);
    Ok(ProbVector(weights))
}

/// Number of occupied tables after seating `n` customers in a Chinese
/// restaurant with the given concentration.
pub fn sample_crt<R: Rng + ?Sized>(n: usize, concentration: f64, rng: &mut R) -> usize {
    if n == 0 {
        return 0;
    }
    let mut tables = 1;
    for i in 1..n {
        if rng.random::<f64>() * (i as f64 + concentration) < concentration {
            tables += 1;
        }
    }
    tables
}

/// Log unsigned Stirling numbers of the first kind, row `n`, entries
/// `m = 0..=n`.
pub fn log_stirling_first(n: usize) -> Vec<f64> {
    let mut row = vec![f64::NEG_INFINITY; n + 1];
    row[0] = 0.0;
    for k in 0..n {
        // s(k+1, m) = k s(k, m) + s(k, m-1)
        let lk = (k as f64).ln();
        for m in (0..=k + 1).rev() {
            let stay = if m <= k {
                row[m] + lk
            } else {
                f64::NEG_INFINITY
            };
            let open = if m >= 1 {
                row[m - 1]
            } else {
                f64::NEG_INFINITY
            };
            row[m] = log_add(stay, open);
        }
    }
    row
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// Exact law of the table count for `n` customers (the Antoniak
/// distribution), as a pmf over `0..=n`.
pub fn antoniak_pmf(n: usize, concentration: f64) -> Result<Vec<f64>> {
    if n > MAX_STIRLING_N {
        return Err(Error::Range(format!("n = {n} exceeds {MAX_STIRLING_N}")));
    }
    if !(concentration > 0.0) {
        return Err(Error::param(format!("concentration {concentration}")));
    }
    if n == 0 {
        return Ok(vec![1.0]);
    }
    let stirling = log_stirling_first(n);
    let norm = ln_gamma(concentration) - ln_gamma(concentration + n as f64);
    let lc = concentration.ln();
    let logs: Vec<f64> = stirling
        .iter()
        .enumerate()
        .map(|(m, s)| norm + s + m as f64 * lc)
        .collect();
    let lse = log_sum_exp(&logs);
    Ok(logs.into_iter().map(|l| (l - lse).exp()).collect())
}

/// Index drawn with probability proportional to `exp(logweights)`.
pub fn sample_categorical_log<R: Rng + ?Sized>(logweights: &[f64], rng: &mut R) -> Result<usize> {
    let max = logweights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::Degenerate("all log-weights are -inf".into()));
    }
    if max == f64::INFINITY {
        return Err(Error::param("log-weight is +inf"));
    }
    let mut cumulative = Vec::with_capacity(logweights.len());
    let mut total = 0.0;
    for lw in logweights {
        total += (lw - max).exp();
        cumulative.push(total);
    }
    Ok(search_cumulative(&cumulative, rng.random::<f64>() * total))
}

/// Index drawn with probability proportional to non-negative `weights`.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(format!(
            "categorical weights sum to {total}"
        )));
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return Ok(i);
        }
    }
    // Rounding can leave `target` just above the running sum.
    Ok(weights
        .iter()
        .rposition(|w| *w > 0.0)
        .unwrap_or(weights.len() - 1))
}

fn search_cumulative(cumulative: &[f64], target: f64) -> usize {
    let idx = cumulative.partition_point(|c| *c <= target);
    if idx < cumulative.len() {
        idx
    } else {
        // target landed on the final boundary through rounding
        let last = cumulative.len() - 1;
        (0..=last)
            .rev()
            .find(|&i| i == 0 || cumulative[i] > cumulative[i - 1])
            .unwrap_or(last)
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Decomposition("matrix is not square".into()));
    }
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Decomposition("matrix is not positive definite".into()))
}

fn log_det_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// Solves `L x = b` in place for lower-triangular `L`, returning `|x|^2`.
fn forward_solve_norm2(l: &DMatrix<f64>, b: &mut [f64]) -> f64 {
    let d = b.len();
    let mut q = 0.0;
    for i in 0..d {
        let mut v = b[i];
        for j in 0..i {
            v -= l[(i, j)] * b[j];
        }
        v /= l[(i, i)];
        b[i] = v;
        q += v * v;
    }
    q
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::param("mean and covariance dimensions differ"));
        }
        let chol = cholesky(&cov)?;
        let d = mean.len() as f64;
        let log_norm = -0.5 * d * (2.0 * PI).ln() - 0.5 * log_det_from_chol(&chol);
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logpdf(&self, y: &[f64]) -> f64 {
        let d = self.mean.len();
        if d == 1 {
            let z = (y[0] - self.mean[0]) / self.chol[(0, 0)];
            return self.log_norm - 0.5 * z * z;
        }
        let mut diff: Vec<f64> = y.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        let q = forward_solve_norm2(&self.chol, &mut diff);
        self.log_norm - 0.5 * q
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol * z
    }
}

pub fn gaussian_logpdf(y: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    Ok(Gaussian::new(mean.clone(), cov.clone())?.logpdf(y))
}

pub fn sample_mvnormal<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    Ok(Gaussian::new(mean.clone(), cov.clone())?.sample(rng))
}

/// Multivariate Student-t with a cached factorization of its scale matrix.
#[derive(Debug, Clone)]
pub struct StudentT {
    dof: f64,
    loc: DVector<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl StudentT {
    pub fn new(dof: f64, loc: DVector<f64>, scale: &DMatrix<f64>) -> Result<Self> {
        if !(dof > 0.0) {
            return Err(Error::param(format!("Student-t dof {dof}")));
        }
        let chol = cholesky(scale)?;
        let d = loc.len() as f64;
        let log_norm = ln_gamma(0.5 * (dof + d))
            - ln_gamma(0.5 * dof)
            - 0.5 * d * (dof * PI).ln()
            - 0.5 * log_det_from_chol(&chol);
        Ok(Self {
            dof,
            loc,
            chol,
            log_norm,
        })
    }

    pub fn logpdf(&self, y: &[f64]) -> f64 {
        let d = self.loc.len();
        let q = if d == 1 {
            let z = (y[0] - self.loc[0]) / self.chol[(0, 0)];
            z * z
        } else {
            let mut diff: Vec<f64> = y.iter().zip(self.loc.iter()).map(|(a, b)| a - b).collect();
            forward_solve_norm2(&self.chol, &mut diff)
        };
        self.log_norm - 0.5 * (self.dof + d as f64) * (q / self.dof).ln_1p()
    }
}

pub fn studentt_logpdf(
    y: &[f64],
    dof: f64,
    location: &DVector<f64>,
    scale: &DMatrix<f64>,
) -> Result<f64> {
    Ok(StudentT::new(dof, location.clone(), scale)?.logpdf(y))
}

/// Inverse-Wishart draw with mean `scale / (dof - d - 1)`, via the Bartlett
/// decomposition of the corresponding Wishart precision.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    dof: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if !(dof > d as f64 - 1.0) {
        return Err(Error::param(format!(
            "inverse-Wishart dof {dof} for dimension {d}"
        )));
    }
    let l = cholesky(scale)
        .map_err(|_| Error::param("inverse-Wishart scale is not positive definite"))?;
    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let chi2 = 2.0 * sample_gamma(0.5 * (dof - i as f64), 1.0, rng)?;
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let a_inv = a
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Decomposition("singular Bartlett factor".into()))?;
    let x = &l * a_inv.transpose();
    let sigma = &x * x.transpose();
    Ok(symmetrize(sigma))
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Normal-inverse-Wishart base measure:
/// `Sigma ~ IW(dof, scale)`, `mu | Sigma ~ N(mean, Sigma / pseudocount)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwParams {
    pub pseudocount: f64,
    pub mean: DVector<f64>,
    pub dof: f64,
    pub scale: DMatrix<f64>,
}

impl NiwParams {
    pub fn new(
        pseudocount: f64,
        mean: DVector<f64>,
        dof: f64,
        scale: DMatrix<f64>,
    ) -> Result<Self> {
        let p = Self {
            pseudocount,
            mean,
            dof,
            scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if d == 0 {
            return Err(Error::param("NIW dimension is zero"));
        }
        if !(self.pseudocount > 0.0) || !self.pseudocount.is_finite() {
            return Err(Error::param(format!(
                "NIW pseudocount {}",
                self.pseudocount
            )));
        }
        if !(self.dof > d as f64 - 1.0) {
            return Err(Error::param(format!(
                "NIW dof {} for dimension {d}",
                self.dof
            )));
        }
        if self.scale.nrows() != d || self.scale.ncols() != d {
            return Err(Error::param("NIW scale matrix has the wrong shape"));
        }
        let mag = self.scale.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (self.scale[(i, j)] - self.scale[(j, i)]).abs() > 1e-12 * mag {
                    return Err(Error::param("NIW scale matrix is not symmetric"));
                }
            }
        }
        cholesky(&self.scale)
            .map_err(|_| Error::param("NIW scale matrix is not positive definite"))?;
        Ok(())
    }

    /// Conjugate update from sufficient statistics (count, sum, sum of
    /// outer products).
    pub fn posterior(&self, n: usize, sum: &DVector<f64>, outer: &DMatrix<f64>) -> NiwParams {
        if n == 0 {
            return self.clone();
        }
        let nf = n as f64;
        let zeta = self.pseudocount + nf;
        let mean = (&self.mean * self.pseudocount + sum) / zeta;
        let scale = &self.scale + outer + (&self.mean * self.mean.transpose()) * self.pseudocount
            - (&mean * mean.transpose()) * zeta;
        NiwParams {
            pseudocount: zeta,
            mean,
            dof: self.dof + nf,
            scale: symmetrize(scale),
        }
    }

    /// Posterior predictive of one new observation (mean and covariance
    /// integrated out).
    pub fn predictive(&self) -> Result<StudentT> {
        let d = self.dim() as f64;
        let dof = self.dof - d + 1.0;
        let factor = (self.pseudocount + 1.0) / (self.pseudocount * dof);
        StudentT::new(dof, self.mean.clone(), &(&self.scale * factor))
    }

    /// Log marginal likelihood of a data set with the given statistics.
    pub fn log_marginal(&self, n: usize, sum: &DVector<f64>, outer: &DMatrix<f64>) -> Result<f64> {
        if n == 0 {
            return Ok(0.0);
        }
        let post = self.posterior(n, sum, outer);
        let d = self.dim();
        let df = d as f64;
        let ld0 = log_det_from_chol(&cholesky(&self.scale)?);
        let ld1 = log_det_from_chol(&cholesky(&post.scale)?);
        Ok(
            -0.5 * n as f64 * df * PI.ln() + ln_mv_gamma(d, 0.5 * post.dof)
                - ln_mv_gamma(d, 0.5 * self.dof)
                + 0.5 * self.dof * ld0
                - 0.5 * post.dof * ld1
                + 0.5 * df * (self.pseudocount.ln() - post.pseudocount.ln()),
        )
    }
}

/// Log multivariate gamma function.
pub fn ln_mv_gamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    0.25 * df * (df - 1.0) * PI.ln() + (0..d).map(|j| ln_gamma(a - 0.5 * j as f64)).sum::<f64>()
}

pub fn sample_niw<R: Rng + ?Sized>(
    params: &NiwParams,
    rng: &mut R,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sigma = sample_inverse_wishart(params.dof, &params.scale, rng)?;
    let mu = sample_mvnormal(&params.mean, &(&sigma / params.pseudocount), rng)?;
    Ok((mu, sigma))
}
