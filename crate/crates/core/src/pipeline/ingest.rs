use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::obs::{Frames, Observations};

use super::config::FeatureFormat;

pub const MAGIC: &[u8; 4] = b"SHDP";
pub const HEADER_LEN: usize = 16;

/// Row-major frame matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::format(
                None,
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Preprocessed features: block means plus the original frame span of
/// each block.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub obs: Observations,
    /// Half-open original frame range `[start, end)` per block.
    pub blocks: Vec<(usize, usize)>,
    pub num_frames: usize,
    /// Original frame indices dropped by the mask.
    pub masked: Vec<usize>,
}

pub fn read_text(path: &Path) -> Result<FeatureMatrix> {
    parse_text(&std::fs::read_to_string(path)?)
}

/// One frame per line, values separated by whitespace or commas. Blank
/// lines and `#` comments are skipped.
pub fn parse_text(text: &str) -> Result<FeatureMatrix> {
    let mut cols = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = data.len();
        for tok in line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
        {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::format(Some(i + 1), format!("`{tok}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::format(Some(i + 1), "non-finite value"));
            }
            data.push(v);
        }
        let n = data.len() - before;
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(Error::format(
                    Some(i + 1),
                    format!("{n} columns, expected {c}"),
                ));
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format(None, "no frames"))?;
    FeatureMatrix::new(rows, cols, data)
}

pub fn read_binary(path: &Path) -> Result<FeatureMatrix> {
    parse_binary(&std::fs::read(path)?)
}

/// `SHDP`, u32 rows, u32 cols, u32 reserved (zero), then row-major
/// little-endian f32.
pub fn parse_binary(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format(None, "missing SHDP header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    if word(12) != 0 {
        return Err(Error::format(None, "reserved header word is not zero"));
    }
    let body = &bytes[HEADER_LEN..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(Error::format(
            None,
            format!(
                "header says {rows}x{cols} but the body holds {} bytes",
                body.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::format(Some(i / cols.max(1) + 1), "non-finite value"));
        }
        data.push(v as f64);
    }
    FeatureMatrix::new(rows, cols, data)
}

pub fn encode_binary(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let dim =
        |n: usize| u32::try_from(n).map_err(|_| Error::InvalidInput("matrix too large".into()));
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&dim(m.rows)?.to_le_bytes());
    out.extend_from_slice(&dim(m.cols)?.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &v in &m.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn write_binary(path: &Path, m: &FeatureMatrix) -> Result<()> {
    std::fs::write(path, encode_binary(m)?)?;
    Ok(())
}

pub fn write_text(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..m.rows {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes observations in a format `ingest_features` reads back: symbols
/// one per line, real frames as text or (with `binary`) the SHDP layout.
pub fn write_observations(path: &Path, obs: &Observations, binary: bool) -> Result<()> {
    match obs.frames() {
        Frames::Symbols { values, .. } => write_labels(path, values),
        Frames::Real { dim, values } => {
            let m = FeatureMatrix::new(values.len() / dim, *dim, values.clone())?;
            if binary {
                write_binary(path, &m)
            } else {
                write_text(path, &m)
            }
        }
    }
}

/// One non-negative integer per line; also the label file format.
pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(
            line.parse()
                .map_err(|_| Error::format(Some(i + 1), format!("`{line}` is not a label")))?,
        );
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    parse_labels(&std::fs::read_to_string(path)?)
}

pub fn write_labels(path: &Path, z: &[usize]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in z {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Per-frame keep flags: raw bytes of 0/1, or whitespace-separated `0`/`1`
/// tokens. A 1 marks a frame to keep.
pub fn parse_mask(bytes: &[u8]) -> Result<Vec<bool>> {
    if bytes.iter().all(|b| *b <= 1) {
        return Ok(bytes.iter().map(|b| *b == 1).collect());
    }
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::format(None, "mask is neither binary nor text"))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        for tok in line.split_whitespace() {
            match tok {
                "0" => out.push(false),
                "1" => out.push(true),
                _ => return Err(Error::format(Some(i + 1), format!("mask entry `{tok}`"))),
            }
        }
    }
    Ok(out)
}

/// Reads a feature file, drops masked frames and averages the rest in
/// non-overlapping blocks of `block_width` kept frames (the last block may
/// be shorter).
pub fn ingest_features(
    path: &Path,
    format: FeatureFormat,
    block_width: usize,
    mask: Option<&Path>,
) -> Result<Features> {
    let mask = match mask {
        Some(p) => Some(parse_mask(&std::fs::read(p)?)?),
        None => None,
    };
    match format.detect(path) {
        FeatureFormat::Symbols => {
            if block_width != 1 {
                return Err(Error::Config(
                    "symbol streams cannot be block-averaged".into(),
                ));
            }
            let z = read_labels(path)?;
            let vocab = z.iter().max().map_or(0, |m| m + 1).max(2);
            let keep = keep_flags(mask, z.len())?;
            let kept: Vec<usize> = (0..z.len()).filter(|&i| keep[i]).collect();
            let obs = Observations::symbols(vocab, kept.iter().map(|&i| z[i]).collect())?;
            Ok(Features {
                obs,
                blocks: kept.iter().map(|&i| (i, i + 1)).collect(),
                num_frames: z.len(),
                masked: (0..z.len()).filter(|&i| !keep[i]).collect(),
            })
        }
        FeatureFormat::Binary => preprocess(&read_binary(path)?, block_width, mask),
        _ => preprocess(&read_text(path)?, block_width, mask),
    }
}

fn keep_flags(mask: Option<Vec<bool>>, n: usize) -> Result<Vec<bool>> {
    match mask {
        Some(m) if m.len() != n => Err(Error::format(
            Some(m.len().min(n) + 1),
            format!("mask has {} entries for {n} frames", m.len()),
        )),
        Some(m) => Ok(m),
        None => Ok(vec![true; n]),
    }
}

/// Masking and block averaging on an in-memory matrix.
pub fn preprocess(
    m: &FeatureMatrix,
    block_width: usize,
    mask: Option<Vec<bool>>,
) -> Result<Features> {
    if block_width == 0 {
        return Err(Error::Config("block width must be positive".into()));
    }
    let keep = keep_flags(mask, m.rows)?;
    let kept: Vec<usize> = (0..m.rows).filter(|&i| keep[i]).collect();
    if kept.is_empty() {
        return Err(Error::InvalidInput("every frame is masked".into()));
    }
    let mut values = Vec::with_capacity(kept.len().div_ceil(block_width) * m.cols);
    let mut blocks = Vec::new();
    for group in kept.chunks(block_width) {
        let mut mean = vec![0.0; m.cols];
        for &i in group {
            mean.iter_mut().zip(m.row(i)).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= group.len() as f64);
        values.extend(mean);
        blocks.push((group[0], group[group.len() - 1] + 1));
    }
    Ok(Features {
        obs: Observations::real(m.cols, values)?,
        blocks,
        num_frames: m.rows,
        masked: (0..m.rows).filter(|&i| !keep[i]).collect(),
    })
}

/// Groups consecutive blocks into hidden steps of `frames_per_state`
/// blocks each; the step likelihood is the product over its members.
pub fn tie_min_duration(blocks: &Observations, frames_per_state: usize) -> Result<Observations> {
    blocks.tie(frames_per_state)
}

/// One line per run: `start_block end_block label`, end exclusive.
pub fn segments_text(labels: &[usize]) -> String {
    let mut out = String::new();
    let mut start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            out.push_str(&format!("{start} {t} {}\n", labels[start]));
            start = t;
        }
    }
    out
}

pub fn parse_segments(text: &str) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() || f[0].starts_with('#') {
            continue;
        }
        let parsed: Option<Vec<usize>> = f.iter().map(|s| s.parse().ok()).collect();
        match parsed.as_deref() {
            Some(&[a, b, l]) if a < b => out.push((a, b, l)),
            _ => {
                return Err(Error::format(
                    Some(i + 1),
                    "expected `start end label` with start < end",
                ))
            }
        }
    }
    Ok(out)
}

/// Sidecar mapping each block to its original frames: `block start end`.
pub fn blocks_text(blocks: &[(usize, usize)]) -> String {
    blocks
        .iter()
        .enumerate()
        .map(|(b, (s, e))| format!("{b} {s} {e}\n"))
        .collect()
}
