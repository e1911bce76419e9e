//! Observation streams. Frames are either fixed-width real vectors or
//! symbols from a finite vocabulary; consecutive frames can be grouped so
//! that several frames share one hidden step.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Frames {
    Real {
        dim: usize,
        values: Vec<f64>,
    },
    /// Zero-based symbol indices.
    Symbols {
        vocab: usize,
        values: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Datum<'a> {
    Real(&'a [f64]),
    Symbol(usize),
}

impl Datum<'_> {
    pub fn real(&self) -> &[f64] {
        match self {
            Datum::Real(v) => v,
            Datum::Symbol(_) => panic!("symbol frame used as a real vector"),
        }
    }

    pub fn symbol(&self) -> usize {
        match self {
            Datum::Symbol(s) => *s,
            Datum::Real(_) => panic!("real frame used as a symbol"),
        }
    }
}

/// Frames plus the grouping of frames into hidden steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    frames: Frames,
    /// Step `t` covers frames `offsets[t]..offsets[t + 1]`.
    offsets: Vec<usize>,
}

impl Observations {
    pub fn real(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("observation dimension is zero".into()));
        }
        if values.len() % dim != 0 {
            return Err(Error::InvalidInput(format!(
                "{} values do not divide into rows of width {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite observation".into()));
        }
        let n = values.len() / dim;
        Ok(Self {
            frames: Frames::Real { dim, values },
            offsets: (0..=n).collect(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(1);
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::format(
                Some(i + 1),
                format!("expected {dim} columns, found {}", rows[i].len()),
            ));
        }
        Self::real(dim, rows.concat())
    }

    pub fn symbols(vocab: usize, values: Vec<usize>) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::InvalidInput("vocabulary is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| **v >= vocab) {
            return Err(Error::InvalidInput(format!(
                "symbol {v} outside vocabulary of {vocab}"
            )));
        }
        let n = values.len();
        Ok(Self {
            frames: Frames::Symbols { vocab, values },
            offsets: (0..=n).collect(),
        })
    }

    /// Groups consecutive steps so each new step holds `per_step` of the
    /// current steps; a trailing partial group is kept.
    pub fn tie(&self, per_step: usize) -> Result<Self> {
        if per_step == 0 {
            return Err(Error::param("frames per state must be at least 1"));
        }
        let steps = self.num_steps();
        let mut offsets: Vec<usize> = (0..steps)
            .step_by(per_step)
            .map(|t| self.offsets[t])
            .collect();
        offsets.push(self.num_frames());
        Ok(Self {
            frames: self.frames.clone(),
            offsets,
        })
    }

    pub fn frames(&self) -> &Frames {
        &self.frames
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn num_frames(&self) -> usize {
        match &self.frames {
            Frames::Real { dim, values } => values.len() / dim,
            Frames::Symbols { values, .. } => values.len(),
        }
    }

    pub fn num_steps(&self) -> usize {
        self.offsets.len() - 1
    }

    /// True when every step holds exactly one frame.
    pub fn is_untied(&self) -> bool {
        self.num_steps() == self.num_frames()
    }

    /// Real dimension, or `None` for symbol streams.
    pub fn dim(&self) -> Option<usize> {
        match &self.frames {
            Frames::Real { dim, .. } => Some(*dim),
            Frames::Symbols { .. } => None,
        }
    }

    pub fn vocab(&self) -> Option<usize> {
        match &self.frames {
            Frames::Symbols { vocab, .. } => Some(*vocab),
            Frames::Real { .. } => None,
        }
    }

    pub fn frame(&self, i: usize) -> Datum<'_> {
        match &self.frames {
            Frames::Real { dim, values } => Datum::Real(&values[i * dim..(i + 1) * dim]),
            Frames::Symbols { values, .. } => Datum::Symbol(values[i]),
        }
    }

    pub fn step_frames(&self, t: usize) -> Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }

    /// Step index of every frame.
    pub fn step_of_frames(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_frames());
        for t in 0..self.num_steps() {
            out.extend(std::iter::repeat(t).take(self.offsets[t + 1] - self.offsets[t]));
        }
        out
    }

    /// Expands per-step labels to per-frame labels.
    pub fn expand_steps<T: Copy>(&self, per_step: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_frames());
        for (t, v) in per_step.iter().enumerate() {
            out.extend(std::iter::repeat(*v).take(self.offsets[t + 1] - self.offsets[t]));
        }
        out
    }

    /// Column means and covariance of real frames (divisor n).
    pub fn moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let Frames::Real { dim, values } = &self.frames else {
            return Err(Error::Unsupported("moments of a symbol stream".into()));
        };
        let d = *dim;
        let n = self.num_frames();
        if n == 0 {
            return Err(Error::InvalidInput("no frames".into()));
        }
        let mut mean = vec![0.0; d];
        for row in values.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for row in values.chunks(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= n as f64);
        Ok((mean, cov))
    }
}
