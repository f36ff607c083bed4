//! Time-series data: synthetic generation, CSV ingestion, sliding-window
//! supervised datasets, min-max scaling and the perturbation battery.

pub mod noise;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, RunRng};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error("csv parse error at line {line}: {detail}")]
    Csv { line: usize, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One univariate series with bookkeeping labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Series<T> {
    values: Vec<T>,
    pub interval: String,
    pub source: String,
}

impl<T: Real> Series<T> {
    pub fn new(values: Vec<T>, interval: &str, source: &str) -> Result<Self, DataError> {
        if values.is_empty() {
            return Err(DataError::Invalid("series must be non-empty".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(DataError::Invalid("series contains non-finite values".into()));
        }
        Ok(Self {
            values,
            interval: interval.to_string(),
            source: source.to_string(),
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One supervised example: an input window and its forecast horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample<T> {
    pub window: Vec<T>,
    pub horizon: Vec<T>,
}

/// Column-aligned batch of sequence samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset<T> {
    windows: Tensor<T>,
    horizons: Tensor<T>,
}

impl<T: Real> SequenceDataset<T> {
    pub fn new(windows: Tensor<T>, horizons: Tensor<T>) -> Result<Self, DataError> {
        if windows.rows() != horizons.rows() {
            return Err(DataError::Invalid(format!(
                "{} windows but {} horizons",
                windows.rows(),
                horizons.rows()
            )));
        }
        Ok(Self { windows, horizons })
    }

    pub fn from_samples(samples: &[SequenceSample<T>]) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::Invalid("empty dataset".into()));
        }
        let l_in = samples[0].window.len();
        let l_out = samples[0].horizon.len();
        let mut w = Vec::with_capacity(samples.len() * l_in);
        let mut h = Vec::with_capacity(samples.len() * l_out);
        for s in samples {
            if s.window.len() != l_in || s.horizon.len() != l_out {
                return Err(DataError::Invalid("ragged sample lengths".into()));
            }
            w.extend_from_slice(&s.window);
            h.extend_from_slice(&s.horizon);
        }
        Ok(Self {
            windows: Tensor::from_parts_unchecked(vec![samples.len(), l_in], w),
            horizons: Tensor::from_parts_unchecked(vec![samples.len(), l_out], h),
        })
    }

    /// Split generated `(L_in + L_out)`-vectors into windows and horizons.
    pub fn from_generated(x: &Tensor<T>, l_in: usize, l_out: usize) -> Result<Self, DataError> {
        if x.cols() != l_in + l_out {
            return Err(DataError::Invalid(format!(
                "generated vectors have {} entries, expected {}",
                x.cols(),
                l_in + l_out
            )));
        }
        let n = x.rows();
        let mut w = Vec::with_capacity(n * l_in);
        let mut h = Vec::with_capacity(n * l_out);
        for i in 0..n {
            let row = x.row(i);
            w.extend_from_slice(&row[..l_in]);
            h.extend_from_slice(&row[l_in..]);
        }
        Ok(Self {
            windows: Tensor::from_parts_unchecked(vec![n, l_in], w),
            horizons: Tensor::from_parts_unchecked(vec![n, l_out], h),
        })
    }

    pub fn len(&self) -> usize {
        self.windows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.windows.cols()
    }

    pub fn horizon_len(&self) -> usize {
        self.horizons.cols()
    }

    pub fn windows(&self) -> &Tensor<T> {
        &self.windows
    }

    pub fn horizons(&self) -> &Tensor<T> {
        &self.horizons
    }

    pub fn sample(&self, i: usize) -> SequenceSample<T> {
        SequenceSample {
            window: self.windows.row(i).to_vec(),
            horizon: self.horizons.row(i).to_vec(),
        }
    }

    /// Flattened `(window ‖ horizon)` matrix, the diffusion model's view.
    pub fn joined(&self) -> Tensor<T> {
        let n = self.len();
        let (l_in, l_out) = (self.window_len(), self.horizon_len());
        let mut data = Vec::with_capacity(n * (l_in + l_out));
        for i in 0..n {
            data.extend_from_slice(self.windows.row(i));
            data.extend_from_slice(self.horizons.row(i));
        }
        Tensor::from_parts_unchecked(vec![n, l_in + l_out], data)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let (l_in, l_out) = (self.window_len(), self.horizon_len());
        let mut w = Vec::with_capacity(idx.len() * l_in);
        let mut h = Vec::with_capacity(idx.len() * l_out);
        for &i in idx {
            w.extend_from_slice(self.windows.row(i));
            h.extend_from_slice(self.horizons.row(i));
        }
        Self {
            windows: Tensor::from_parts_unchecked(vec![idx.len(), l_in], w),
            horizons: Tensor::from_parts_unchecked(vec![idx.len(), l_out], h),
        }
    }
}

/// Regime change applied from a fractional position onward.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegimeShift {
    pub at_fraction: f64,
    pub level_shift: f64,
    pub amplitude_scale: f64,
}

/// Declarative synthetic-series description. Fields are plain `f64` so the
/// spec can live inside configuration files; generation casts into the
/// working scalar.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub length: usize,
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    #[serde(default)]
    pub phases: Vec<f64>,
    #[serde(default)]
    pub trend: f64,
    #[serde(default)]
    pub level: f64,
    #[serde(default)]
    pub innovation_sigma: f64,
    #[serde(default)]
    pub regime: Option<RegimeShift>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.length == 0 {
            return Err(DataError::Invalid("synthetic length must be positive".into()));
        }
        if self.periods.len() != self.amplitudes.len() {
            return Err(DataError::Invalid(format!(
                "{} periods but {} amplitudes",
                self.periods.len(),
                self.amplitudes.len()
            )));
        }
        if !self.phases.is_empty() && self.phases.len() != self.periods.len() {
            return Err(DataError::Invalid("phases must match periods".into()));
        }
        if self.periods.iter().any(|&p| p <= 0.0) {
            return Err(DataError::Invalid("periods must be positive".into()));
        }
        if self.innovation_sigma < 0.0 {
            return Err(DataError::Invalid("innovation sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Deterministic seasonal-plus-trend generator with Gaussian innovations.
pub fn synth_generate<T: Real>(spec: &SynthSpec, seed: u64) -> Result<Series<T>, DataError> {
    spec.validate()?;
    let mut rng: RunRng = substream(seed, crate::rng::stream::SYNTH_BASE);
    let mut values = Vec::with_capacity(spec.length);
    let shift_at = spec
        .regime
        .as_ref()
        .map(|r| (r.at_fraction.clamp(0.0, 1.0) * spec.length as f64) as usize);
    for t in 0..spec.length {
        let mut level = spec.level;
        let mut amp_scale = 1.0;
        if let (Some(at), Some(r)) = (shift_at, spec.regime.as_ref()) {
            if t >= at {
                level += r.level_shift;
                amp_scale = r.amplitude_scale;
            }
        }
        let mut y = level + spec.trend * t as f64;
        for (j, (&p, &a)) in spec.periods.iter().zip(&spec.amplitudes).enumerate() {
            let phase = spec.phases.get(j).copied().unwrap_or(0.0);
            y += a * amp_scale * (2.0 * std::f64::consts::PI * t as f64 / p + phase).sin();
        }
        if spec.innovation_sigma > 0.0 {
            y += spec.innovation_sigma * f64::standard_normal(&mut rng);
        }
        values.push(T::cast(y));
    }
    Series::new(values, "step", "synthetic")
}

/// Sliding-window supervision: samples start at offsets 0, stride, 2·stride,
/// … while `window + horizon` still fits.
pub fn windowize<T: Real>(
    series: &Series<T>,
    l_in: usize,
    l_out: usize,
    stride: usize,
) -> Result<Vec<SequenceSample<T>>, DataError> {
    if l_in == 0 || l_out == 0 || stride == 0 {
        return Err(DataError::Invalid(
            "window, horizon and stride must be positive".into(),
        ));
    }
    let needed = l_in + l_out;
    if series.len() < needed {
        return Err(DataError::Invalid(format!(
            "series of length {} cannot fit window {} + horizon {}",
            series.len(),
            l_in,
            l_out
        )));
    }
    let count = (series.len() - needed) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * stride;
        out.push(SequenceSample {
            window: series.values()[start..start + l_in].to_vec(),
            horizon: series.values()[start + l_in..start + needed].to_vec(),
        });
    }
    Ok(out)
}

/// Min-max scaling fitted on the training split and reused on test splits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MinMaxTransform {
    pub min: f64,
    pub span: f64,
}

impl MinMaxTransform {
    pub fn fit<T: Real>(series: &Series<T>) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in series.values() {
            let v = v.to_f64_lossy();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        Self { min: lo, span }
    }

    pub fn apply<T: Real>(&self, series: &Series<T>) -> Series<T> {
        let values = series
            .values()
            .iter()
            .map(|&v| T::cast((v.to_f64_lossy() - self.min) / self.span))
            .collect();
        Series {
            values,
            interval: series.interval.clone(),
            source: series.source.clone(),
        }
    }
}

/// Read a two-column `timestamp,value` CSV (header required, UTF-8).
pub fn read_series_csv<T: Real>(path: &Path) -> Result<Series<T>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "timestamp,value" => {}
        Some((_, header)) => {
            return Err(DataError::Csv {
                line: 1,
                detail: format!("expected header `timestamp,value`, got `{header}`"),
            })
        }
        None => {
            return Err(DataError::Csv {
                line: 1,
                detail: "empty file".into(),
            })
        }
    }
    let mut values = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (_, value) = line.split_once(',').ok_or_else(|| DataError::Csv {
            line: i + 1,
            detail: "expected two comma-separated columns".into(),
        })?;
        let v: f64 = value.trim().parse().map_err(|e| DataError::Csv {
            line: i + 1,
            detail: format!("bad value `{value}`: {e}"),
        })?;
        values.push(T::cast(v));
    }
    Series::new(values, "csv", &path.display().to_string())
}

/// Write a series in the two-column CSV format with synthetic timestamps.
pub fn write_series_csv<T: Real>(path: &Path, series: &Series<T>) -> Result<(), DataError> {
    let mut out = String::from("timestamp,value\n");
    for (i, v) in series.values().iter().enumerate() {
        let _ = writeln!(out, "{i},{}", v.to_f64_lossy());
    }
    std::fs::write(path, out).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
