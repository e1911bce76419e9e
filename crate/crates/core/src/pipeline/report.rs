use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::quantiles;

use super::run::{read_trace, Metrics, TraceRecord};

pub const QUANTILES: [f64; 3] = [0.1, 0.5, 0.9];

/// `(iteration, [q10, q50, q90])` across chains for one traced quantity.
pub fn quantile_table(
    traces: &[Vec<TraceRecord>],
    value: impl Fn(&TraceRecord) -> Option<f64>,
) -> Vec<(usize, [f64; 3])> {
    let mut by_iter: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for trace in traces {
        for r in trace {
            if let Some(v) = value(r) {
                by_iter.entry(r.iteration).or_default().push(v);
            }
        }
    }
    by_iter
        .into_iter()
        .map(|(it, xs)| {
            let q = quantiles(&xs, &QUANTILES);
            (it, [q[0], q[1], q[2]])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// Bin edges; `counts.len() + 1` entries.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width bins over the data range; a constant sample gets one bin.
pub fn histogram(xs: &[f64], bins: usize) -> Result<Histogram> {
    if xs.is_empty() || bins == 0 {
        return Err(Error::InvalidInput("histogram of empty data".into()));
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(Histogram {
            edges: vec![lo, hi],
            counts: vec![xs.len()],
        });
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &x in xs {
        counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
    }
    Ok(Histogram {
        edges: (0..=bins).map(|i| lo + i as f64 * width).collect(),
        counts,
    })
}

fn table_text(header: &str, rows: &[(usize, [f64; 3])]) -> String {
    let mut s = format!("{header}\titer\tq10\tq50\tq90\n");
    for (it, q) in rows {
        s.push_str(&format!("{header}\t{it}\t{}\t{}\t{}\n", q[0], q[1], q[2]));
    }
    s
}

fn histogram_text(h: &Histogram) -> String {
    let mut s = String::from("lo\thi\tcount\n");
    for (i, c) in h.counts.iter().enumerate() {
        s.push_str(&format!("{}\t{}\t{c}\n", h.edges[i], h.edges[i + 1]));
    }
    s
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    chains: usize,
    iterations: usize,
    final_loglik: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    final_hamming: Option<[f64; 3]>,
    rho_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<&'a Metrics>,
}

/// Writes quantile curves, the post-burn-in histograms and a summary into
/// `out`. Samples in the first half of each trace are treated as burn-in.
pub fn emit_report(
    traces: &[Vec<TraceRecord>],
    metrics: Option<&Metrics>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if traces.iter().all(|t| t.is_empty()) {
        return Err(Error::InvalidInput("no trace records".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    let ll = quantile_table(traces, |r| Some(r.log_lik_per_frame));
    put("loglik_quantiles.tsv", table_text("loglik", &ll))?;
    let ham = quantile_table(traces, |r| r.hamming);
    if !ham.is_empty() {
        put("hamming_quantiles.tsv", table_text("hamming", &ham))?;
    }
    let post = |f: &dyn Fn(&TraceRecord) -> Option<f64>| -> Vec<f64> {
        traces
            .iter()
            .flat_map(|t| t[t.len() / 2..].iter().filter_map(f))
            .collect()
    };
    let rho = post(&|r| Some(r.rho));
    put("rho_histogram.tsv", histogram_text(&histogram(&rho, 20)?))?;
    let pred = post(&|r| r.predictive);
    if !pred.is_empty() {
        put(
            "predictive_histogram.tsv",
            histogram_text(&histogram(&pred, 20)?),
        )?;
    }
    let finals: Vec<&TraceRecord> = traces.iter().filter_map(|t| t.last()).collect();
    let q3 = |xs: Vec<f64>| {
        let q = quantiles(&xs, &QUANTILES);
        [q[0], q[1], q[2]]
    };
    let final_h: Vec<f64> = finals.iter().filter_map(|r| r.hamming).collect();
    let summary = Summary {
        chains: traces.len(),
        iterations: traces.iter().map(Vec::len).max().unwrap_or(0),
        final_loglik: q3(finals.iter().map(|r| r.log_lik_per_frame).collect()),
        final_hamming: (!final_h.is_empty()).then(|| q3(final_h)),
        rho_mean: rho.iter().sum::<f64>() / rho.len() as f64,
        metrics,
    };
    put("summary.json", serde_json::to_string_pretty(&summary)?)?;
    Ok(written)
}

/// Report for a run directory, written to `<dir>/report`.
pub fn report_run(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut traces = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".trace.jsonl")))
        .collect();
    paths.sort();
    for p in paths {
        traces.push(read_trace(&p)?);
    }
    let metrics: Option<Metrics> = match std::fs::read_to_string(dir.join("metrics.json")) {
        Ok(s) => Some(serde_json::from_str(&s)?),
        Err(_) => None,
    };
    emit_report(&traces, metrics.as_ref(), &dir.join("report"))
}
