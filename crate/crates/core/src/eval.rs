//! Classification and forecasting metrics, and the report tables built from them.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::ActivityClass;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{truths} truths but {predictions} predictions")]
    LengthMismatch { truths: usize, predictions: usize },
    #[error("label {0} is not in the class set")]
    UnknownLabel(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("MAPE undefined: all {excluded} actual values are zero")]
    AllActualsZero { excluded: usize },
    #[error("malformed table: {0}")]
    BadTable(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_labels(truths: &[usize], predictions: &[usize], n_classes: usize) -> Result<Self, EvalError> {
        if truths.len() != predictions.len() {
            return Err(EvalError::LengthMismatch {
                truths: truths.len(),
                predictions: predictions.len(),
            });
        }
        let mut counts = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in truths.iter().zip(predictions) {
            for l in [t, p] {
                if l >= n_classes {
                    return Err(EvalError::UnknownLabel(l.to_string()));
                }
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Rows whose true label is this class.
    pub support: u64,
    /// Rows predicted as this class.
    pub predicted: u64,
    /// Set when a zero denominator forced a metric to 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl ClassificationReport {
    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|m| m.class == name)
    }

    /// Classes whose precision, recall or F1 fell back to the zero convention.
    pub fn flagged(&self) -> Vec<&str> {
        self.per_class
            .iter()
            .filter(|m| m.undefined)
            .map(|m| m.class.as_str())
            .collect()
    }
}

/// Per-class precision, recall and F1 over label indices into `class_set`.
/// Zero denominators give 0 and set `undefined`; Macro-F1 averages every
/// class in the set, including those that never occur.
pub fn classification_report(
    truths: &[usize],
    predictions: &[usize],
    class_set: &[String],
) -> Result<ClassificationReport, EvalError> {
    let confusion = ConfusionMatrix::from_labels(truths, predictions, class_set.len())?;
    let k = class_set.len();
    let mut per_class = Vec::with_capacity(k);
    for (c, name) in class_set.iter().enumerate() {
        let tp = confusion.counts[c][c];
        let support: u64 = confusion.counts[c].iter().sum();
        let predicted: u64 = (0..k).map(|r| confusion.counts[r][c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            class: name.clone(),
            precision,
            recall,
            f1,
            support,
            predicted,
            undefined: support == 0 || predicted == 0,
        });
    }
    let macro_f1 = if k == 0 {
        0.0
    } else {
        per_class.iter().map(|m| m.f1).sum::<f64>() / k as f64
    };
    Ok(ClassificationReport {
        per_class,
        macro_f1,
        accuracy: confusion.accuracy(),
        confusion,
    })
}

/// [`classification_report`] over string labels.
pub fn classification_report_by_name(
    truths: &[&str],
    predictions: &[&str],
    class_set: &[String],
) -> Result<ClassificationReport, EvalError> {
    let index = |l: &&str| {
        class_set
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| EvalError::UnknownLabel((*l).to_string()))
    };
    let t = truths.iter().map(index).collect::<Result<Vec<_>, _>>()?;
    let p = predictions.iter().map(index).collect::<Result<Vec<_>, _>>()?;
    classification_report(&t, &p, class_set)
}

/// Actual values with magnitude at or below this are left out of MAPE.
pub const MAPE_ZERO_THRESHOLD: f64 = 1e-8;

/// Error metrics over every scalar (actual, forecast) pair; percentages for
/// MAPE and sMAPE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub rmse: f64,
    pub mse: f64,
    /// `None` when every actual value was excluded.
    pub mape: Option<f64>,
    pub smape: f64,
    pub n_pairs: usize,
    pub mape_excluded: usize,
}

impl ForecastMetrics {
    pub fn mape(&self) -> Result<f64, EvalError> {
        self.mape.ok_or(EvalError::AllActualsZero {
            excluded: self.mape_excluded,
        })
    }
}

pub fn forecast_metrics(actual: &[f64], predicted: &[f64]) -> Result<ForecastMetrics, EvalError> {
    if actual.len() != predicted.len() || actual.is_empty() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} actual vs {} predicted values",
            actual.len(),
            predicted.len()
        )));
    }
    let n = actual.len();
    let (mut se, mut ape, mut sape) = (0.0, 0.0, 0.0);
    let mut kept = 0usize;
    for (&a, &f) in actual.iter().zip(predicted) {
        let err = (a - f).abs();
        se += err * err;
        if a.abs() > MAPE_ZERO_THRESHOLD {
            ape += err / a.abs();
            kept += 1;
        }
        let den = (a.abs() + f.abs()) / 2.0;
        if den > 0.0 {
            sape += err / den;
        }
    }
    let mse = se / n as f64;
    Ok(ForecastMetrics {
        rmse: mse.sqrt(),
        mse,
        mape: (kept > 0).then(|| 100.0 * ape / kept as f64),
        smape: 100.0 * sape / n as f64,
        n_pairs: n,
        mape_excluded: n - kept,
    })
}

/// Tri-axial convenience over `n × 3` samples.
pub fn forecast_metrics_xyz(actual: &[[f64; 3]], predicted: &[[f64; 3]]) -> Result<ForecastMetrics, EvalError> {
    if actual.len() != predicted.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} actual vs {} predicted samples",
            actual.len(),
            predicted.len()
        )));
    }
    forecast_metrics(actual.as_flattened(), predicted.as_flattened())
}

/// A labelled grid of optional numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub title: String,
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

const MEAN_LABEL: &str = "Mean";

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl Table {
    pub fn new(name: &str, title: &str, row_header: &str, columns: Vec<String>) -> Self {
        Self {
            name: name.to_string(),
            title: title.to_string(),
            row_header: row_header.to_string(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, label: impl Into<String>, values: Vec<Option<f64>>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((label.into(), values));
    }

    /// Appends a mean column (over each row's defined cells) and a mean row
    /// (over each column's defined cells).
    pub fn with_means(mut self, row_means: bool, column_means: bool) -> Self {
        if row_means {
            for (_, values) in &mut self.rows {
                let m = mean(values.iter().copied());
                values.push(m);
            }
            self.columns.push(MEAN_LABEL.to_string());
        }
        if column_means && !self.rows.is_empty() {
            let means = (0..self.columns.len())
                .map(|j| mean(self.rows.iter().map(|(_, v)| v[j])))
                .collect();
            self.rows.push((MEAN_LABEL.to_string(), means));
        }
        self
    }

    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|(l, _)| l == row)?.1[j]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![self.row_header.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (label, values) in &self.rows {
            let mut rec = vec![label.clone()];
            rec.extend(values.iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(name: &str, title: &str, reader: R) -> Result<Self, EvalError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let mut it = header.iter();
        let row_header = it
            .next()
            .ok_or_else(|| EvalError::BadTable("empty header".into()))?
            .to_string();
        let mut table = Table::new(name, title, &row_header, it.map(str::to_string).collect());
        for rec in r.records() {
            let rec = rec?;
            let mut fields = rec.iter();
            let label = fields.next().unwrap_or_default().to_string();
            let values = fields
                .map(|f| {
                    if f.is_empty() {
                        Ok(None)
                    } else {
                        f.parse::<f64>()
                            .map(Some)
                            .map_err(|_| EvalError::BadTable(format!("not a number: {f:?}")))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != table.columns.len() {
                return Err(EvalError::BadTable(format!("row {label:?} has {} cells", values.len())));
            }
            table.rows.push((label, values));
        }
        Ok(table)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {}\n\n| {} |", self.title, self.row_header);
        for c in &self.columns {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|");
        for _ in &self.columns {
            s.push_str("---:|");
        }
        s.push('\n');
        for (label, values) in &self.rows {
            let _ = write!(s, "| {label} |");
            for v in values {
                match v {
                    Some(x) => {
                        let _ = write!(s, " {x:.4} |");
                    }
                    None => s.push_str(" – |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Test-split evaluation of one classifier on one sensor source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierResult {
    pub model: String,
    pub source: String,
    pub report: ClassificationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    /// Activity code letter.
    pub activity: String,
    pub metrics: ForecastMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTables {
    pub macro_f1: Table,
    pub precision_nonhand: Table,
    pub precision_hand: Table,
    pub forecast: Table,
    pub notes: Vec<String>,
}

fn ordered_unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for i in items {
        if !out.iter().any(|o| o == i) {
            out.push(i.to_string());
        }
    }
    out
}

fn precision_table(results: &[ClassifierResult], hand: bool) -> Table {
    let multi_source = ordered_unique(results.iter().map(|r| r.source.as_str())).len() > 1;
    let columns = results
        .iter()
        .map(|r| {
            if multi_source {
                format!("{} ({})", r.model, r.source)
            } else {
                r.model.clone()
            }
        })
        .collect();
    let (name, title) = if hand {
        ("precision_hand", "Precision, hand-oriented activities")
    } else {
        ("precision_nonhand", "Precision, non-hand-oriented activities")
    };
    let mut table = Table::new(name, title, "activity", columns);
    for class in ActivityClass::ALL.into_iter().filter(|c| c.is_hand_oriented() == hand) {
        let values = results
            .iter()
            .map(|r| r.report.class(class.name()).map(|m| m.precision))
            .collect();
        table.push_row(class.title(), values);
    }
    table.with_means(true, true)
}

/// Builds the Macro-F1, per-group precision and forecasting tables.
pub fn emit_report_tables(classifiers: &[ClassifierResult], forecasts: &[ForecastResult]) -> ReportTables {
    let models = ordered_unique(classifiers.iter().map(|r| r.model.as_str()));
    let sources = ordered_unique(classifiers.iter().map(|r| r.source.as_str()));
    let mut macro_f1 = Table::new("macro_f1", "Macro-F1 by classifier and sensor source", "model", sources.clone());
    for m in &models {
        let values = sources
            .iter()
            .map(|s| {
                classifiers
                    .iter()
                    .find(|r| &r.model == m && &r.source == s)
                    .map(|r| r.report.macro_f1)
            })
            .collect();
        macro_f1.push_row(m.clone(), values);
    }
    let macro_f1 = macro_f1.with_means(false, true);

    let mut forecast = Table::new(
        "forecast",
        "Forecasting error by activity (MAPE and sMAPE in percent)",
        "activity",
        ["RMSE", "MSE", "MAPE", "sMAPE"].map(String::from).to_vec(),
    );
    let mut notes = vec![
        "CNN max-pooling uses a pool size of 2.".to_string(),
        "ConvLSTM is a 1-D convolution feeding an LSTM layer, not a convolutional LSTM cell.".to_string(),
    ];
    for f in forecasts {
        let m = &f.metrics;
        forecast.push_row(f.activity.clone(), vec![Some(m.rmse), Some(m.mse), m.mape, Some(m.smape)]);
        if m.mape_excluded > 0 {
            notes.push(format!(
                "Activity {}: {} of {} actual values were zero and left out of MAPE.",
                f.activity, m.mape_excluded, m.n_pairs
            ));
        }
    }
    let forecast = forecast.with_means(false, true);
    for r in classifiers {
        let flagged = r.report.flagged();
        if !flagged.is_empty() {
            notes.push(format!(
                "{} on {}: zero-denominator metrics reported as 0 for {}.",
                r.model,
                r.source,
                flagged.join(", ")
            ));
        }
    }
    ReportTables {
        macro_f1,
        precision_nonhand: precision_table(classifiers, false),
        precision_hand: precision_table(classifiers, true),
        forecast,
        notes,
    }
}

impl ReportTables {
    pub fn tables(&self) -> [&Table; 4] {
        [&self.macro_f1, &self.precision_nonhand, &self.precision_hand, &self.forecast]
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Activity recognition report\n\n");
        for t in self.tables() {
            s.push_str(&t.to_markdown());
            s.push('\n');
        }
        if !self.notes.is_empty() {
            s.push_str("### Notes\n\n");
            for n in &self.notes {
                let _ = writeln!(s, "- {n}");
            }
        }
        s
    }

    /// Writes `tables/<name>.csv` for every table plus `report.md` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
        let tables_dir = dir.join("tables");
        fs::create_dir_all(&tables_dir)?;
        let mut written = Vec::new();
        for t in self.tables() {
            let path = tables_dir.join(format!("{}.csv", t.name));
            t.write_csv(fs::File::create(&path)?)?;
            written.push(path);
        }
        let md = dir.join("report.md");
        fs::write(&md, self.to_markdown())?;
        written.push(md);
        Ok(written)
    }
}
