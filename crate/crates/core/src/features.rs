//! Per-window feature extraction and min-max scaling.
//!
//! A window is summarized by 45 values: ten-bin distributions of each axis
//! (30), then per-axis average, standard deviation, variance, average
//! absolute difference and mean time between peaks (15).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    ActivityClass, DeviceSensor, LabeledDataset, LabeledRow, Provenance, RowKey, Window,
    SAMPLE_RATE_HZ,
};

pub const N_BINS: usize = 10;
pub const N_FEATURES: usize = 45;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("scaler has not been fitted")]
    NotFitted,
    #[error("expected {expected} features, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("invalid feature file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Canonical column names, in vector order.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(N_FEATURES);
    for axis in ["X", "Y", "Z"] {
        names.extend((0..N_BINS).map(|i| format!("{axis}{i}")));
    }
    for stat in ["AVG", "STANDDEV", "VAR", "ABSOLDEV", "PEAK"] {
        names.extend(["X", "Y", "Z"].iter().map(|axis| format!("{axis}{stat}")));
    }
    names
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn bins(&self, axis: usize) -> &[f64] {
        &self.0[axis * N_BINS..(axis + 1) * N_BINS]
    }
}

/// Fraction of values falling in each of ten equal-width bins spanning
/// `[min, max]`. A constant input puts all mass in bin 0.
pub fn binned_distribution(values: &[f64]) -> [f64; N_BINS] {
    let mut bins = [0.0; N_BINS];
    if values.is_empty() {
        return bins;
    }
    let (lo, hi) = min_max(values);
    let range = hi - lo;
    let mut counts = [0usize; N_BINS];
    for &v in values {
        let idx = if range > 0.0 {
            ((N_BINS as f64 * (v - lo) / range).floor() as isize).clamp(0, N_BINS as isize - 1)
                as usize
        } else {
            0
        };
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    for (b, c) in bins.iter_mut().zip(counts) {
        *b = c as f64 / n;
    }
    bins
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisStats {
    pub average: f64,
    pub stddev: f64,
    /// Population variance.
    pub variance: f64,
    /// Mean absolute deviation from the average.
    pub avg_abs_diff: f64,
}

pub fn axis_stats(values: &[f64]) -> AxisStats {
    let n = values.len().max(1) as f64;
    let average = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - average).powi(2)).sum::<f64>() / n;
    let avg_abs_diff = values.iter().map(|v| (v - average).abs()).sum::<f64>() / n;
    AxisStats {
        average,
        stddev: variance.sqrt(),
        variance,
        avg_abs_diff,
    }
}

/// Mean spacing in seconds between peaks that rise above the window's
/// mid-range. A peak is a sample strictly above its left neighbour and at
/// least its right neighbour. Fewer than two peaks yields the window
/// duration.
pub fn time_between_peaks(values: &[f64], rate_hz: f64) -> f64 {
    let duration = values.len() as f64 / rate_hz;
    if values.len() < 3 {
        return duration;
    }
    let (lo, hi) = min_max(values);
    let threshold = lo + 0.5 * (hi - lo);
    let peaks: Vec<usize> = (1..values.len() - 1)
        .filter(|&i| values[i] > values[i - 1] && values[i] >= values[i + 1] && values[i] > threshold)
        .collect();
    if peaks.len() < 2 {
        return duration;
    }
    let span = (peaks[peaks.len() - 1] - peaks[0]) as f64;
    span / (peaks.len() - 1) as f64 / rate_hz
}

pub fn extract_features(window: &Window) -> FeatureVector {
    let mut out = [0.0; N_FEATURES];
    for axis in 0..3 {
        let values = window.axis(axis);
        out[axis * N_BINS..(axis + 1) * N_BINS].copy_from_slice(&binned_distribution(&values));
        let stats = axis_stats(&values);
        let base = 3 * N_BINS;
        out[base + axis] = stats.average;
        out[base + 3 + axis] = stats.stddev;
        out[base + 6 + axis] = stats.variance;
        out[base + 9 + axis] = stats.avg_abs_diff;
        out[base + 12 + axis] = time_between_peaks(&values, SAMPLE_RATE_HZ);
    }
    FeatureVector(out)
}

/// Features for every window, labelled with the merged class.
pub fn featurize_windows(windows: &[Window], provenance: Provenance) -> LabeledDataset {
    let rows = windows
        .iter()
        .map(|w| LabeledRow {
            key: RowKey {
                subject_id: w.subject_id,
                activity: w.activity,
                window: w.index,
            },
            features: extract_features(w).0.to_vec(),
            class: w.class(),
        })
        .collect();
    let mut sources: Vec<DeviceSensor> = windows.iter().map(|w| w.device_sensor).collect();
    sources.sort();
    sources.dedup();
    LabeledDataset {
        feature_names: feature_names(),
        rows,
        provenance,
        sources,
    }
}

/// Removes the named feature columns, e.g. to express any 44-feature subset.
pub fn drop_features(dataset: &LabeledDataset, drop: &[String]) -> Result<LabeledDataset, FeatureError> {
    let mut keep = vec![true; dataset.feature_names.len()];
    for name in drop {
        let idx = dataset
            .feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| FeatureError::UnknownFeature(name.clone()))?;
        keep[idx] = false;
    }
    let select = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(x, _)| *x)
            .collect()
    };
    Ok(LabeledDataset {
        feature_names: dataset
            .feature_names
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(n, _)| n.clone())
            .collect(),
        rows: dataset
            .rows
            .iter()
            .map(|r| LabeledRow {
                key: r.key,
                features: select(&r.features),
                class: r.class,
            })
            .collect(),
        provenance: dataset.provenance,
        sources: dataset.sources.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub fitted_rows: usize,
}

/// Min-max scaler to `[0, 1]`. Constant features map to 0 and values outside
/// the fitted range are clamped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    params: Option<ScalerParams>,
}

impl MinMaxScaler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(params: ScalerParams) -> Self {
        Self {
            params: Some(params),
        }
    }

    pub fn params(&self) -> Option<&ScalerParams> {
        self.params.as_ref()
    }

    /// Fits on training rows only. An empty fit leaves the scaler unfitted.
    pub fn fit<'a, I>(&mut self, rows: I) -> &mut Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut params: Option<ScalerParams> = None;
        for row in rows {
            let p = params.get_or_insert_with(|| ScalerParams {
                min: vec![f64::INFINITY; row.len()],
                max: vec![f64::NEG_INFINITY; row.len()],
                fitted_rows: 0,
            });
            for (j, &v) in row.iter().enumerate().take(p.min.len()) {
                p.min[j] = p.min[j].min(v);
                p.max[j] = p.max[j].max(v);
            }
            p.fitted_rows += 1;
        }
        self.params = params;
        self
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>, FeatureError> {
        let p = self.params.as_ref().ok_or(FeatureError::NotFitted)?;
        if row.len() != p.min.len() {
            return Err(FeatureError::ShapeMismatch {
                expected: p.min.len(),
                got: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(p.min.iter().zip(&p.max))
            .map(|(&v, (&lo, &hi))| {
                if hi > lo {
                    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn transform_dataset(&self, dataset: &LabeledDataset) -> Result<LabeledDataset, FeatureError> {
        let rows = dataset
            .rows
            .iter()
            .map(|r| {
                Ok(LabeledRow {
                    key: r.key,
                    features: self.transform(&r.features)?,
                    class: r.class,
                })
            })
            .collect::<Result<Vec<_>, FeatureError>>()?;
        Ok(LabeledDataset {
            feature_names: dataset.feature_names.clone(),
            rows,
            provenance: dataset.provenance,
            sources: dataset.sources.clone(),
        })
    }
}

const META_COLUMNS: [&str; 3] = ["subject", "activity", "window"];

/// Feature matrix CSV: `subject,activity,window`, the feature columns, then
/// `class`. A leading `#` comment records provenance and sources.
pub fn write_features_csv<W: Write>(mut writer: W, dataset: &LabeledDataset) -> Result<(), FeatureError> {
    let provenance = match dataset.provenance {
        Provenance::Real => "real",
        Provenance::Synthetic => "synthetic",
    };
    let sources: Vec<String> = dataset.sources.iter().map(ToString::to_string).collect();
    writeln!(writer, "# provenance={provenance} sources={}", sources.join("+"))
        .map_err(csv::Error::from)?;
    let mut out = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = META_COLUMNS.to_vec();
    header.extend(dataset.feature_names.iter().map(String::as_str));
    header.push("class");
    out.write_record(&header)?;
    for row in &dataset.rows {
        let mut rec = vec![
            row.key.subject_id.to_string(),
            row.key.activity.to_string(),
            row.key.window.to_string(),
        ];
        rec.extend(row.features.iter().map(|v| v.to_string()));
        rec.push(row.class.name().to_string());
        out.write_record(&rec)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_features_csv<R: Read>(mut reader: R) -> Result<LabeledDataset, FeatureError> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(csv::Error::from)?;
    let (comment, body) = match text.strip_prefix('#') {
        Some(rest) => rest.split_once('\n').unwrap_or((rest, "")),
        None => ("", text.as_str()),
    };
    let mut provenance = Provenance::Real;
    let mut sources = Vec::new();
    for part in comment.split_whitespace() {
        if let Some(p) = part.strip_prefix("provenance=") {
            provenance = if p == "synthetic" {
                Provenance::Synthetic
            } else {
                Provenance::Real
            };
        } else if let Some(s) = part.strip_prefix("sources=") {
            for ds in s.split('+').filter(|s| !s.is_empty()) {
                let (dev, sen) = ds
                    .split_once('_')
                    .ok_or_else(|| FeatureError::BadFile(format!("bad source `{ds}`")))?;
                sources.push(DeviceSensor::new(
                    dev.parse().map_err(FeatureError::BadFile)?,
                    sen.parse().map_err(FeatureError::BadFile)?,
                ));
            }
        }
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header = rdr.headers()?.clone();
    let n = header.len();
    if n < META_COLUMNS.len() + 1 || &header[n - 1] != "class" {
        return Err(FeatureError::BadFile("missing class column".into()));
    }
    let feature_names: Vec<String> = header
        .iter()
        .skip(META_COLUMNS.len())
        .take(n - META_COLUMNS.len() - 1)
        .map(str::to_string)
        .collect();
    let bad = |what: &str, v: &str| FeatureError::BadFile(format!("bad {what} `{v}`"));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let key = RowKey {
            subject_id: rec[0].parse().map_err(|_| bad("subject", &rec[0]))?,
            activity: rec[1].parse()?,
            window: rec[2].parse().map_err(|_| bad("window", &rec[2]))?,
        };
        let features = (META_COLUMNS.len()..n - 1)
            .map(|i| rec[i].parse::<f64>().map_err(|_| bad("feature", &rec[i])))
            .collect::<Result<Vec<_>, _>>()?;
        let class =
            ActivityClass::from_name(&rec[n - 1]).ok_or_else(|| bad("class", &rec[n - 1]))?;
        rows.push(LabeledRow {
            key,
            features,
            class,
        });
    }
    Ok(LabeledDataset {
        feature_names,
        rows,
        provenance,
        sources,
    })
}
