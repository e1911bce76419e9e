//! Ground-truth HMM simulators and the named benchmark scenarios.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obs::Observations;
use crate::prob::{sample_categorical, sample_dirichlet, Gaussian};
use crate::rng::RngState;

/// Seed of the one-off draws that fix preset emission constants.
const PRESET_CONSTANT_SEED: u64 = 0x5eed_0001;

pub const PRESET_NAMES: [&str; 5] = ["persist3", "fast4", "multi5", "hub9", "mog5"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<Vec<f64>>,
}

impl ComponentSpec {
    pub fn scalar(mean: f64, var: f64) -> Self {
        Self {
            mean: vec![mean],
            cov: vec![vec![var]],
        }
    }

    fn gaussian(&self) -> Result<Gaussian> {
        let d = self.mean.len();
        if self.cov.len() != d || self.cov.iter().any(|r| r.len() != d) {
            return Err(Error::param("covariance shape differs from the mean"));
        }
        Gaussian::new(
            DVector::from_column_slice(&self.mean),
            DMatrix::from_fn(d, d, |i, j| self.cov[i][j]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmissionSpec {
    Gaussian(ComponentSpec),
    Categorical {
        probs: Vec<f64>,
    },
    Mixture {
        weights: Vec<f64>,
        components: Vec<ComponentSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub emissions: Vec<EmissionSpec>,
    pub t: usize,
    pub seed: u64,
}

fn check_pmf(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::param(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::param(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Drawn observations and their generating labels.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub obs: Observations,
    pub z: Vec<usize>,
    /// Mixture component per step; empty without mixture emissions.
    pub s: Vec<usize>,
}

enum Sampler {
    Gauss(Gaussian),
    Cat(Vec<f64>),
    Mix(Vec<f64>, Vec<Gaussian>),
}

impl ScenarioSpec {
    pub fn num_states(&self) -> usize {
        self.transition.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_states();
        if k == 0 {
            return Err(Error::param("scenario without states"));
        }
        for (j, row) in self.transition.iter().enumerate() {
            if row.len() != k {
                return Err(Error::param(format!(
                    "transition row {j} has length {}",
                    row.len()
                )));
            }
            check_pmf(row, &format!("transition row {j}"))?;
        }
        if self.initial.len() != k {
            return Err(Error::param(
                "initial distribution length differs from the state count",
            ));
        }
        check_pmf(&self.initial, "initial distribution")?;
        if self.emissions.len() != k {
            return Err(Error::param(format!(
                "{} emission specs for {k} states",
                self.emissions.len()
            )));
        }
        let mut kind = None;
        for e in &self.emissions {
            let (tag, dim) = match e {
                EmissionSpec::Gaussian(c) => (0, c.mean.len()),
                EmissionSpec::Categorical { probs } => {
                    check_pmf(probs, "emission probabilities")?;
                    (1, probs.len())
                }
                EmissionSpec::Mixture {
                    weights,
                    components,
                } => {
                    check_pmf(weights, "mixture weights")?;
                    if weights.len() != components.len() || components.is_empty() {
                        return Err(Error::param(
                            "mixture weights and components differ in length",
                        ));
                    }
                    (0, components[0].mean.len())
                }
            };
            match kind {
                None => kind = Some((tag, dim)),
                Some(prev) if prev != (tag, dim) => {
                    return Err(Error::param(
                        "all states must emit the same kind and dimension",
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Keeps the first `k` states, renormalizing the transition rows and
    /// the initial distribution.
    pub fn restrict(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.num_states() {
            return Err(Error::param(format!(
                "cannot keep {k} of {} states",
                self.num_states()
            )));
        }
        let renorm = |row: &[f64]| {
            let s: f64 = row[..k].iter().sum();
            row[..k].iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let out = Self {
            name: format!("{}-k{k}", self.name),
            transition: self.transition[..k].iter().map(|r| renorm(r)).collect(),
            initial: renorm(&self.initial),
            emissions: self.emissions[..k].to_vec(),
            t: self.t,
            seed: self.seed,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn with_length(mut self, t: usize) -> Self {
        self.t = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Simulates with the scenario's own seed.
    pub fn generate(&self) -> Result<Simulated> {
        gen_hmm(self, &mut RngState::new(self.seed))
    }
}

/// Forward simulation: `z_1` from the initial distribution, `z_t` from the
/// row of `z_{t-1}`, and one observation per step.
pub fn gen_hmm(spec: &ScenarioSpec, rng: &mut RngState) -> Result<Simulated> {
    spec.validate()?;
    let samplers: Vec<Sampler> = spec
        .emissions
        .iter()
        .map(|e| {
            Ok(match e {
                EmissionSpec::Gaussian(c) => Sampler::Gauss(c.gaussian()?),
                EmissionSpec::Categorical { probs } => Sampler::Cat(probs.clone()),
                EmissionSpec::Mixture {
                    weights,
                    components,
                } => Sampler::Mix(
                    weights.clone(),
                    components
                        .iter()
                        .map(|c| c.gaussian())
                        .collect::<Result<_>>()?,
                ),
            })
        })
        .collect::<Result<_>>()?;
    let mut z: Vec<usize> = Vec::with_capacity(spec.t);
    let mut s = Vec::new();
    let mut reals = Vec::new();
    let mut symbols = Vec::new();
    for t in 0..spec.t {
        let k = if t == 0 {
            sample_categorical(&spec.initial, rng)?
        } else {
            sample_categorical(&spec.transition[z[t - 1]], rng)?
        };
        z.push(k);
        match &samplers[k] {
            Sampler::Gauss(g) => reals.extend(g.sample(rng).iter()),
            Sampler::Cat(p) => symbols.push(sample_categorical(p, rng)?),
            Sampler::Mix(w, comps) => {
                let j = sample_categorical(w, rng)?;
                s.push(j);
                reals.extend(comps[j].sample(rng).iter());
            }
        }
    }
    let obs = match &spec.emissions[0] {
        EmissionSpec::Categorical { probs } => Observations::symbols(probs.len(), symbols)?,
        EmissionSpec::Gaussian(c) => Observations::real(c.mean.len(), reals)?,
        EmissionSpec::Mixture { components, .. } => {
            Observations::real(components[0].mean.len(), reals)?
        }
    };
    Ok(Simulated { obs, z, s })
}

/// Self-transition `stay`, remaining mass split evenly.
fn persistent_matrix(k: usize, stay: f64) -> Vec<Vec<f64>> {
    let off = (1.0 - stay) / (k - 1) as f64;
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { stay } else { off }).collect())
        .collect()
}

fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

fn spec(name: &str, transition: Vec<Vec<f64>>, emissions: Vec<EmissionSpec>) -> ScenarioSpec {
    let k = transition.len();
    ScenarioSpec {
        name: name.into(),
        transition,
        initial: uniform(k),
        emissions,
        t: 1000,
        seed: 0,
    }
}

fn categorical_rows(k: usize, vocab: usize, rng: &mut RngState) -> Vec<EmissionSpec> {
    (0..k)
        .map(|_| EmissionSpec::Categorical {
            probs: sample_dirichlet(&vec![1.0; vocab], rng)
                .expect("positive parameters")
                .into_inner(),
        })
        .collect()
}

/// Named scenario with frozen emission constants. All real-valued presets
/// are one-dimensional with unit component variances unless noted.
pub fn preset(name: &str) -> Result<ScenarioSpec> {
    let mut rng = RngState::new(PRESET_CONSTANT_SEED);
    let out = match name {
        // means two standard deviations apart
        "persist3" => spec(
            name,
            persistent_matrix(3, 0.98),
            [-2.0, 0.0, 2.0]
                .iter()
                .map(|&m| EmissionSpec::Gaussian(ComponentSpec::scalar(m, 1.0)))
                .collect(),
        ),
        // neighbouring means overlap at one standard deviation either side
        "fast4" => spec(
            name,
            vec![
                vec![0.4, 0.4, 0.1, 0.1],
                vec![0.4, 0.4, 0.1, 0.1],
                vec![0.1, 0.1, 0.4, 0.4],
                vec![0.1, 0.1, 0.4, 0.4],
            ],
            [-4.5, -1.5, 1.5, 4.5]
                .iter()
                .map(|&m| EmissionSpec::Gaussian(ComponentSpec::scalar(m, 1.0)))
                .collect(),
        ),
        "multi5" => spec(
            name,
            persistent_matrix(5, 0.98),
            categorical_rows(5, 20, &mut rng),
        ),
        "hub9" => {
            // state 0 is the hub; sub-states form a ring for the rare arcs
            let mut m = vec![vec![0.0; 9]; 9];
            m[0][0] = 0.9;
            for j in 1..9 {
                m[0][j] = 0.1 / 8.0;
            }
            for i in 1..9 {
                let next = if i == 8 { 1 } else { i + 1 };
                let prev = if i == 1 { 8 } else { i - 1 };
                m[i][i] = 0.9;
                m[i][0] = 0.08;
                m[i][next] = 0.01;
                m[i][prev] = 0.01;
            }
            spec(name, m, categorical_rows(9, 20, &mut rng))
        }
        "mog5" => {
            // state centres 8 apart; component means within +-2.5, sd 0.5
            let emissions = (0..5)
                .map(|k| {
                    let c = rng.random_range(1..=10usize);
                    let centre = 8.0 * k as f64 - 16.0;
                    EmissionSpec::Mixture {
                        weights: uniform(c),
                        components: (0..c)
                            .map(|_| {
                                ComponentSpec::scalar(centre + rng.random_range(-2.5..2.5), 0.25)
                            })
                            .collect(),
                    }
                })
                .collect();
            spec(name, persistent_matrix(5, 0.98), emissions)
        }
        other => return Err(Error::InvalidInput(format!("unknown preset '{other}'"))),
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            p.validate().unwrap();
            assert_eq!(p.t, 1000);
        }
        assert!(matches!(preset("nope"), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn preset_matrices() {
        let p = preset("persist3").unwrap();
        for (a, b) in p.transition[0].iter().zip([0.98, 0.01, 0.01]) {
            assert!((a - b).abs() < 1e-15);
        }
        let f = preset("fast4").unwrap();
        assert_eq!(f.transition[1], vec![0.4, 0.4, 0.1, 0.1]);
        assert_eq!(f.transition[3], vec![0.1, 0.1, 0.4, 0.4]);
        let m = preset("multi5").unwrap();
        assert!((m.transition[2][2] - 0.98).abs() < 1e-15);
        assert!((m.transition[2][0] - 0.005).abs() < 1e-15);
        assert!(
            matches!(&m.emissions[0], EmissionSpec::Categorical { probs } if probs.len() == 20)
        );
        let h = preset("hub9").unwrap();
        for i in 1..9 {
            let row = &h.transition[i];
            let best_other = (0..9)
                .filter(|&j| j != i)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(best_other, 0);
        }
        assert!(h.transition[0][1..]
            .iter()
            .all(|x| (*x - 0.0125).abs() < 1e-15));
        for e in preset("mog5").unwrap().emissions {
            let EmissionSpec::Mixture { weights, .. } = e else {
                panic!()
            };
            assert!((1..=10).contains(&weights.len()));
            assert!(weights.iter().all(|w| *w == weights[0]));
        }
    }

    #[test]
    fn presets_are_frozen() {
        assert_eq!(preset("mog5").unwrap(), preset("mog5").unwrap());
        assert_eq!(preset("hub9").unwrap(), preset("hub9").unwrap());
    }

    #[test]
    fn identity_matrix_gives_constant_path() {
        let mut s = preset("persist3").unwrap();
        s.transition = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let sim = s.with_seed(3).generate().unwrap();
        assert!(sim.z.iter().all(|k| *k == sim.z[0]));
    }

    #[test]
    fn transition_frequencies_match_rows() {
        let s = preset("fast4").unwrap().with_length(100_000).with_seed(4);
        let sim = s.generate().unwrap();
        let mut counts = vec![vec![0usize; 4]; 4];
        for w in sim.z.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
        for (i, row) in counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            for (j, &c) in row.iter().enumerate() {
                let p = s.transition[i][j];
                let se = (p * (1.0 - p) / n as f64).sqrt();
                assert!((c as f64 / n as f64 - p).abs() < 3.5 * se, "{i}->{j}");
            }
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let a = preset("mog5").unwrap().with_seed(9).generate().unwrap();
        let b = preset("mog5").unwrap().with_seed(9).generate().unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.s, b.s);
        assert_eq!(a.obs, b.obs);
    }

    #[test]
    fn symbols_lie_in_vocabulary() {
        let sim = preset("hub9").unwrap().with_seed(1).generate().unwrap();
        assert_eq!(sim.obs.vocab(), Some(20));
        for i in 0..sim.obs.num_frames() {
            assert!(sim.obs.frame(i).symbol() < 20);
        }
    }

    #[test]
    fn restriction_renormalizes() {
        let r = preset("mog5").unwrap().restrict(4).unwrap();
        assert_eq!(r.num_states(), 4);
        assert!((r.transition[0][0] - 0.98 / 0.995).abs() < 1e-12);
        assert!(preset("mog5").unwrap().restrict(6).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = preset("persist3").unwrap();
        s.transition[1][1] = 0.5;
        assert!(matches!(
            gen_hmm(&s, &mut RngState::new(0)),
            Err(Error::InvalidParameter(_))
        ));
        let mut s = preset("persist3").unwrap();
        s.emissions.pop();
        assert!(s.validate().is_err());
    }
}
