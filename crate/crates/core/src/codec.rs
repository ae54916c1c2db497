//! Series representation: visible-value normalization, patching and the
//! `[r; v; m; c]` patch features.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATS_EPS: f64 = 1e-6;

/// C channels of equal length L; NaN marks a missing value.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub id: Option<String>,
    pub values: Vec<Vec<f64>>,
    pub freq: Option<String>,
}

impl RawSeries {
    pub fn univariate(values: Vec<f64>) -> Self {
        Self {
            id: None,
            values: vec![values],
            freq: None,
        }
    }

    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self {
            id: None,
            values,
            freq: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidSeries("series has no channels".into()));
        }
        let l = self.values[0].len();
        if l == 0 {
            return Err(Error::InvalidSeries("series is empty".into()));
        }
        if self.values.iter().any(|c| c.len() != l) {
            return Err(Error::InvalidSeries("channels differ in length".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
}

/// Mean and population standard deviation of the finite entries.
pub fn compute_visible_stats(x: &[f64]) -> Result<NormStats> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for &v in x.iter().filter(|v| v.is_finite()) {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return Err(Error::InvalidSeries("no finite values to normalize".into()));
    }
    let mu = sum / n as f64;
    let var = x
        .iter()
        .filter(|v| v.is_finite())
        .map(|&v| (v - mu) * (v - mu))
        .sum::<f64>()
        / n as f64;
    Ok(NormStats {
        mu,
        sigma: var.sqrt().max(STATS_EPS),
    })
}

pub fn normalize(x: &[f64], s: NormStats) -> Vec<f64> {
    x.iter().map(|&v| ((v - s.mu) / s.sigma).asinh()).collect()
}

pub fn denormalize(q: &[f64], s: NormStats) -> Vec<f64> {
    q.iter().map(|&v| v.sinh() * s.sigma + s.mu).collect()
}

/// Where padding goes when L is not a multiple of P.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadSide {
    /// Trailing partial patch (training layout).
    #[default]
    Right,
    /// Leading partial patch, so the last patch ends on the last observation.
    Left,
}

/// `(i + 1 - L) / L`: close to -1 at the start, exactly 0 at the end.
pub fn build_time_ramp(l: usize) -> Vec<f64> {
    let lf = l as f64;
    (0..l).map(|i| (i as f64 + 1.0 - lf) / lf).collect()
}

/// Channel `j` of `C` maps to `j / max(C - 1, 1)`.
pub fn build_channel_ramp(c: usize) -> Vec<f64> {
    let d = c.saturating_sub(1).max(1) as f64;
    (0..c).map(|j| j as f64 / d).collect()
}

pub fn num_patches(l: usize, p: usize) -> usize {
    l.div_ceil(p)
}

/// Splits one channel into `ceil(L/P)` patches. Returns `(values, validity)`
/// with NaN and padding positions zero-filled and marked invalid.
pub fn patchify(x: &[f64], p: usize, pad: PadSide) -> (Vec<f64>, Vec<bool>) {
    let t = num_patches(x.len(), p);
    let offset = match pad {
        PadSide::Right => 0,
        PadSide::Left => t * p - x.len(),
    };
    let mut v = vec![0.0; t * p];
    let mut m = vec![false; t * p];
    for (i, &xi) in x.iter().enumerate() {
        if xi.is_finite() {
            v[offset + i] = xi;
            m[offset + i] = true;
        }
    }
    (v, m)
}

fn place(x: &[f64], p: usize, pad: PadSide) -> Vec<f64> {
    let t = num_patches(x.len(), p);
    let offset = match pad {
        PadSide::Right => 0,
        PadSide::Left => t * p - x.len(),
    };
    let mut out = vec![0.0; t * p];
    out[offset..offset + x.len()].copy_from_slice(x);
    out
}

/// One `4P` vector: time ramp, values, validity, channel ramp.
pub fn assemble_features(ramp: &[f64], values: &[f64], validity: &[bool], channel: f64) -> Vec<f32> {
    let p = values.len();
    debug_assert!(ramp.len() == p && validity.len() == p);
    let mut f = Vec::with_capacity(4 * p);
    f.extend(ramp.iter().map(|&r| r as f32));
    f.extend(values.iter().map(|&v| v as f32));
    f.extend(validity.iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
    f.extend(std::iter::repeat_n(channel as f32, p));
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSpan {
    pub first_patch: usize,
    pub n_patches: usize,
    /// Observed length of the channel.
    pub len: usize,
}

/// Encoded series, channels laid out one after another along the patch axis.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub patch_size: usize,
    /// `T x 4P`, row-major.
    pub features: Vec<f32>,
    /// Normalized values, zero where invalid; `T x P`.
    pub values: Vec<f64>,
    /// `T x P`.
    pub validity: Vec<bool>,
    /// One entry per channel.
    pub stats: Vec<NormStats>,
    pub layout: Vec<ChannelSpan>,
}

impl PatchBatch {
    pub fn num_patches(&self) -> usize {
        self.validity.len() / self.patch_size
    }

    pub fn feature_row(&self, t: usize) -> &[f32] {
        let w = 4 * self.patch_size;
        &self.features[t * w..(t + 1) * w]
    }
}

/// Encodes a series with per-channel statistics computed from its own
/// visible values.
pub fn encode_series(series: &RawSeries, p: usize, pad: PadSide) -> Result<PatchBatch> {
    series.validate()?;
    let stats = series
        .values
        .iter()
        .map(|c| compute_visible_stats(c))
        .collect::<Result<Vec<_>>>()?;
    encode_with_stats(series, &stats, p, pad)
}

/// Encodes with caller-supplied statistics, e.g. cached from the original
/// context during autoregressive forecasting.
pub fn encode_with_stats(
    series: &RawSeries,
    stats: &[NormStats],
    p: usize,
    pad: PadSide,
) -> Result<PatchBatch> {
    series.validate()?;
    if p == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    if stats.len() != series.channels() {
        return Err(Error::dim(format!(
            "{} stats for {} channels",
            stats.len(),
            series.channels()
        )));
    }
    let c_ramp = build_channel_ramp(series.channels());
    let mut out = PatchBatch {
        patch_size: p,
        features: Vec::new(),
        values: Vec::new(),
        validity: Vec::new(),
        stats: stats.to_vec(),
        layout: Vec::new(),
    };
    for (ci, ch) in series.values.iter().enumerate() {
        let l = ch.len();
        let normed = normalize(ch, stats[ci]);
        let (v, m) = patchify(&normed, p, pad);
        let ramp = place(&build_time_ramp(l), p, pad);
        let t = v.len() / p;
        out.layout.push(ChannelSpan {
            first_patch: out.num_patches(),
            n_patches: t,
            len: l,
        });
        for k in 0..t {
            let s = k * p..(k + 1) * p;
            out.features
                .extend(assemble_features(&ramp[s.clone()], &v[s.clone()], &m[s.clone()], c_ramp[ci]));
        }
        out.values.extend(v);
        out.validity.extend(m);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonValues {
    Uni(Vec<Option<f64>>),
    Multi(Vec<Vec<Option<f64>>>),
}

#[derive(Serialize, Deserialize)]
struct JsonSeries {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    values: JsonValues,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    freq: Option<String>,
}

fn from_opt(v: Vec<Option<f64>>) -> Vec<f64> {
    v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()
}

fn to_opt(v: &[f64]) -> Vec<Option<f64>> {
    v.iter().map(|&x| x.is_finite().then_some(x)).collect()
}

pub fn parse_series_line(line: &str) -> Result<RawSeries> {
    let js: JsonSeries = serde_json::from_str(line)?;
    let values = match js.values {
        JsonValues::Uni(v) => vec![from_opt(v)],
        JsonValues::Multi(v) => v.into_iter().map(from_opt).collect(),
    };
    let s = RawSeries {
        id: js.id,
        values,
        freq: js.freq,
    };
    s.validate()?;
    Ok(s)
}

pub fn series_to_line(s: &RawSeries) -> Result<String> {
    let values = if s.channels() == 1 {
        JsonValues::Uni(to_opt(&s.values[0]))
    } else {
        JsonValues::Multi(s.values.iter().map(|c| to_opt(c)).collect())
    };
    Ok(serde_json::to_string(&JsonSeries {
        id: s.id.clone(),
        values,
        freq: s.freq.clone(),
    })?)
}

pub fn read_series_jsonl(path: &Path) -> Result<Vec<RawSeries>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            parse_series_line(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_series_jsonl<W: Write>(mut w: W, series: &[RawSeries]) -> Result<()> {
    for s in series {
        writeln!(w, "{}", series_to_line(s)?)?;
    }
    Ok(())
}
