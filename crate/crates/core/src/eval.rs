//! Label-invariant scoring, decoding and duration diagnostics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::emission::EmissionModel;
use crate::error::{Error, Result};
use crate::obs::Observations;

/// Minimum-cost assignment of rows to columns (Hungarian method with
/// potentials, `O(n^3)`). Rectangular inputs are padded with zero-cost
/// dummies. Returns the column of each row; rows beyond the column count
/// map to `None`.
pub fn munkres(cost: &[Vec<f64>]) -> Result<Vec<Option<usize>>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::param("cost matrix rows differ in length"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::param("cost matrix has a non-finite entry"));
    }
    let n = rows.max(cols);
    if n == 0 {
        return Ok(Vec::new());
    }
    let at = |i: usize, j: usize| {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            0.0
        }
    };
    // 1-based arrays; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = at(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let i = owner[j];
        if i >= 1 && i <= rows && j <= cols {
            assignment[i - 1] = Some(j - 1);
        }
    }
    Ok(assignment)
}

/// Total cost of an assignment returned by [`munkres`].
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[i][j]))
        .sum()
}

fn dense_labels(z: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = z
        .iter()
        .map(|k| {
            let next = map.len();
            *map.entry(*k).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Weighted agreement after the best one-to-one label map.
fn matched_agreement(a: &[usize], b: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    let (da, ka) = dense_labels(a);
    let (db, kb) = dense_labels(b);
    let mut co = vec![vec![0.0; kb]; ka];
    for (t, (&i, &j)) in da.iter().zip(&db).enumerate() {
        co[i][j] += weights.map_or(1.0, |w| w[t]);
    }
    let cost: Vec<Vec<f64>> = co.iter().map(|r| r.iter().map(|c| -c).collect()).collect();
    Ok(-assignment_cost(&cost, &munkres(&cost)?))
}

/// Fraction of steps mislabeled after the label map that best aligns
/// `z_est` with `z_true`; unmatched estimated labels count as errors.
pub fn hamming_matched(z_true: &[usize], z_est: &[usize]) -> Result<f64> {
    if z_true.len() != z_est.len() {
        return Err(Error::param(format!(
            "label sequences differ in length ({} vs {})",
            z_true.len(),
            z_est.len()
        )));
    }
    if z_true.is_empty() {
        return Ok(0.0);
    }
    let agree = matched_agreement(z_true, z_est, None)?;
    Ok(1.0 - agree / z_true.len() as f64)
}

/// Index of the test sequence with the lowest mean matched Hamming distance
/// to the reference set; ties go to the lowest index.
pub fn min_expected_hamming(
    test: &[Vec<usize>],
    reference: &[Vec<usize>],
) -> Result<(usize, Vec<usize>)> {
    if test.is_empty() || reference.is_empty() {
        return Err(Error::param(
            "decoding needs non-empty test and reference sets",
        ));
    }
    let len = test[0].len();
    if test.iter().chain(reference).any(|z| z.len() != len) {
        return Err(Error::param("sequences differ in length"));
    }
    let score = |z: &Vec<usize>| -> Result<f64> {
        let mut total = 0.0;
        for r in reference {
            total += hamming_matched(r, z)?;
        }
        Ok(total / reference.len() as f64)
    };
    #[cfg(feature = "parallel")]
    let scores: Vec<f64> = {
        use rayon::prelude::*;
        test.par_iter().map(score).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let scores: Vec<f64> = test.iter().map(score).collect::<Result<_>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok((best, test[best].clone()))
}

/// `log p(y_{1:T})` by the scaled forward recursion with the first label
/// drawn from `init`.
pub fn predictive_loglik(
    obs: &Observations,
    pi: &[Vec<f64>],
    em: &EmissionModel,
    init: &[f64],
) -> Result<f64> {
    let l = pi.len();
    if init.len() != l || pi.iter().any(|r| r.len() != l) {
        return Err(Error::param(
            "transition matrix and initial distribution disagree",
        ));
    }
    let mut alpha = init.to_vec();
    let mut next = vec![0.0; l];
    let mut total = 0.0;
    let mut ll = vec![0.0; l];
    for t in 0..obs.num_steps() {
        ll.iter_mut().for_each(|v| *v = 0.0);
        for f in obs.step_frames(t) {
            for (k, v) in ll.iter_mut().enumerate() {
                *v += em.state_loglik(k, obs.frame(f));
            }
        }
        if ll.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::param(format!(
                "non-finite emission log-density at step {t}"
            )));
        }
        let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if t > 0 {
            for (k, slot) in next.iter_mut().enumerate() {
                *slot = (0..l).map(|j| alpha[j] * pi[j][k]).sum();
            }
            std::mem::swap(&mut alpha, &mut next);
        }
        let mut c = 0.0;
        for k in 0..l {
            alpha[k] *= (ll[k] - max).exp();
            c += alpha[k];
        }
        if !(c > 0.0) {
            return Err(Error::Degenerate(format!(
                "observations have zero probability at step {t}"
            )));
        }
        alpha.iter_mut().for_each(|a| *a /= c);
        total += c.ln() + max;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

/// Labeled time segments plus excluded intervals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentList {
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub mask: Vec<(f64, f64)>,
}

impl SegmentList {
    pub fn new(mut segments: Vec<Segment>, mask: Vec<(f64, f64)>) -> Result<Self> {
        segments.sort_by(|a, b| a.start.total_cmp(&b.start));
        for s in &segments {
            if !(s.end > s.start) {
                return Err(Error::param(format!(
                    "segment [{}, {}) is empty",
                    s.start, s.end
                )));
            }
        }
        for w in segments.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::param(format!("segments overlap at {}", w[1].start)));
            }
        }
        if mask.iter().any(|(a, b)| !(b > a)) {
            return Err(Error::param("empty mask interval"));
        }
        Ok(Self { segments, mask })
    }

    /// Runs of equal labels on unit-width steps; step `t` spans `[t, t+1)`.
    pub fn from_labels(z: &[usize]) -> Self {
        let mut segments = Vec::new();
        let mut start = 0;
        for t in 1..=z.len() {
            if t == z.len() || z[t] != z[start] {
                segments.push(Segment {
                    start: start as f64,
                    end: t as f64,
                    label: z[start],
                });
                start = t;
            }
        }
        Self {
            segments,
            mask: Vec::new(),
        }
    }

    fn label_at(&self, x: f64) -> Option<usize> {
        let i = self.segments.partition_point(|s| s.start <= x);
        (i > 0 && x < self.segments[i - 1].end).then(|| self.segments[i - 1].label)
    }

    fn masked(mask: &[(f64, f64)], x: f64) -> bool {
        mask.iter().any(|(a, b)| *a <= x && x < *b)
    }
}

/// Time-weighted error of `hyp` against `ref_` after the best speaker map,
/// over unmasked time covered by the reference. Time the hypothesis leaves
/// unlabeled counts as error.
pub fn der(ref_: &SegmentList, hyp: &SegmentList) -> Result<f64> {
    let mask = match (ref_.mask.is_empty(), hyp.mask.is_empty()) {
        (false, false) if ref_.mask != hyp.mask => {
            return Err(Error::param("reference and hypothesis masks differ"));
        }
        (false, _) => &ref_.mask,
        _ => &hyp.mask,
    };
    let mut cuts: Vec<f64> = Vec::new();
    for s in ref_.segments.iter().chain(&hyp.segments) {
        cuts.push(s.start);
        cuts.push(s.end);
    }
    for (a, b) in mask {
        cuts.push(*a);
        cuts.push(*b);
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut ref_labels = Vec::new();
    let mut hyp_labels = Vec::new();
    let mut widths = Vec::new();
    let mut scored = 0.0;
    // hypothesis gaps get a label no segment uses
    let gap = usize::MAX;
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if SegmentList::masked(mask, mid) {
            continue;
        }
        let Some(r) = ref_.label_at(mid) else {
            continue;
        };
        let width = w[1] - w[0];
        scored += width;
        ref_labels.push(r);
        hyp_labels.push(hyp.label_at(mid).unwrap_or(gap));
        widths.push(width);
    }
    if scored == 0.0 {
        return Err(Error::InvalidInput(
            "no scored time in the reference".into(),
        ));
    }
    // gap time can never be matched
    let (dh, kh) = dense_labels(&hyp_labels);
    let gap_index = hyp_labels.iter().position(|l| *l == gap).map(|i| dh[i]);
    let (dr, kr) = dense_labels(&ref_labels);
    let mut co = vec![vec![0.0; kh]; kr];
    for t in 0..widths.len() {
        if Some(dh[t]) != gap_index {
            co[dr[t]][dh[t]] -= widths[t];
        }
    }
    let agree = -assignment_cost(&co, &munkres(&co)?);
    Ok(1.0 - agree / scored)
}

/// Run-length histogram and the geometric rate estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    /// Run length to number of runs.
    pub histogram: BTreeMap<usize, usize>,
    pub runs: usize,
    /// Runs per step, the geometric maximum-likelihood rate.
    pub p_hat: f64,
}

pub fn run_lengths(z: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut len = 0;
    for t in 0..z.len() {
        len += 1;
        if t + 1 == z.len() || z[t + 1] != z[t] {
            out.push(len);
            len = 0;
        }
    }
    out
}

pub fn duration_stats(z: &[usize]) -> Result<DurationStats> {
    if z.is_empty() {
        return Err(Error::param("duration statistics of an empty sequence"));
    }
    let lengths = run_lengths(z);
    let mut histogram = BTreeMap::new();
    for l in &lengths {
        *histogram.entry(*l).or_default() += 1;
    }
    Ok(DurationStats {
        runs: lengths.len(),
        p_hat: lengths.len() as f64 / z.len() as f64,
        histogram,
    })
}

/// Labels holding more than `threshold` of the steps.
pub fn occupied_states(z: &[usize], threshold: f64) -> usize {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for k in z {
        *counts.entry(*k).or_default() += 1;
    }
    let cut = threshold * z.len() as f64;
    counts.values().filter(|c| **c as f64 > cut).count()
}
