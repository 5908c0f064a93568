//! Raw WISDM-style sensor records: parsing, stream loading, fixed-length
//! windowing, label merging and stratified splitting.
//!
//! The on-disk record format is one reading per line:
//!
//! ```text
//! subject,activity,timestamp,x,y,z;
//! ```

mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{
    synthesize_dataset, write_wisdm_files, ClassSignature, SynthConfig, SyntheticStream,
    SIGNATURES,
};

/// Nominal sampling rate of every WISDM stream.
pub const SAMPLE_RATE_HZ: f64 = 20.0;
/// 10 s at 20 Hz.
pub const WINDOW_LEN: usize = 200;
/// Nominal inter-sample period in nanoseconds.
pub const SAMPLE_PERIOD_NS: i64 = 50_000_000;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("line {line}: malformed record: {source}")]
    MalformedRecord {
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error("unknown activity label `{0}`")]
    UnknownActivity(String),
    #[error("class `{class}` has only {count} rows; at least 3 are needed to split")]
    EmptyClass { class: String, count: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("invalid window file: {0}")]
    BadWindowFile(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Why a single raw line could not be parsed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecordError {
    #[error("empty line")]
    Empty,
    #[error("expected 6 fields, found {0}")]
    FieldCount(usize),
    #[error("cannot parse {field} from `{text}`")]
    BadNumber { field: &'static str, text: String },
    #[error("unknown activity code `{0}`")]
    UnknownActivity(String),
    #[error("{0} is not finite")]
    NonFinite(&'static str),
}

/// The 18 WISDM activity codes. `N` is not part of the code space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActivityCode {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
    J,
    K,
    L,
    M,
    O,
    P,
    Q,
    R,
    S,
}

impl ActivityCode {
    pub const ALL: [ActivityCode; 18] = [
        Self::A,
        Self::B,
        Self::C,
        Self::D,
        Self::E,
        Self::F,
        Self::G,
        Self::H,
        Self::I,
        Self::J,
        Self::K,
        Self::L,
        Self::M,
        Self::O,
        Self::P,
        Self::Q,
        Self::R,
        Self::S,
    ];

    /// The eating activities forecast individually.
    pub const FORECAST_TARGETS: [ActivityCode; 5] = [Self::H, Self::I, Self::J, Self::K, Self::L];

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.letter() == c)
    }

    pub fn letter(self) -> char {
        match self {
            Self::A => 'A',
            Self::B => 'B',
            Self::C => 'C',
            Self::D => 'D',
            Self::E => 'E',
            Self::F => 'F',
            Self::G => 'G',
            Self::H => 'H',
            Self::I => 'I',
            Self::J => 'J',
            Self::K => 'K',
            Self::L => 'L',
            Self::M => 'M',
            Self::O => 'O',
            Self::P => 'P',
            Self::Q => 'Q',
            Self::R => 'R',
            Self::S => 'S',
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::A => "walking",
            Self::B => "jogging",
            Self::C => "stairs",
            Self::D => "sitting",
            Self::E => "standing",
            Self::F => "typing",
            Self::G => "brushing teeth",
            Self::H => "eating soup",
            Self::I => "eating chips",
            Self::J => "eating pasta",
            Self::K => "drinking from cup",
            Self::L => "eating sandwich",
            Self::M => "kicking",
            Self::O => "playing catch",
            Self::P => "dribbling",
            Self::Q => "writing",
            Self::R => "clapping",
            Self::S => "folding clothes",
        }
    }

    /// Class after merging the four eating activities.
    pub fn class(self) -> ActivityClass {
        use ActivityClass as C;
        match self {
            Self::A => C::Walking,
            Self::B => C::Jogging,
            Self::C => C::Stairs,
            Self::D => C::Sitting,
            Self::E => C::Standing,
            Self::F => C::Typing,
            Self::G => C::Brushing,
            Self::H | Self::I | Self::J | Self::L => C::Eating,
            Self::K => C::Drinking,
            Self::M => C::Kicking,
            Self::O => C::Catch,
            Self::P => C::Dribbling,
            Self::Q => C::Writing,
            Self::R => C::Clapping,
            Self::S => C::Folding,
        }
    }
}

impl fmt::Display for ActivityCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for ActivityCode {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                Self::from_letter(c).ok_or_else(|| DatasetError::UnknownActivity(s.to_string()))
            }
            _ => Err(DatasetError::UnknownActivity(s.to_string())),
        }
    }
}

/// The 15 classification targets, in canonical class-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActivityClass {
    Walking,
    Jogging,
    Stairs,
    Sitting,
    Standing,
    Typing,
    Brushing,
    Eating,
    Drinking,
    Kicking,
    Catch,
    Dribbling,
    Writing,
    Clapping,
    Folding,
}

impl ActivityClass {
    pub const COUNT: usize = 15;

    pub const ALL: [ActivityClass; 15] = [
        Self::Walking,
        Self::Jogging,
        Self::Stairs,
        Self::Sitting,
        Self::Standing,
        Self::Typing,
        Self::Brushing,
        Self::Eating,
        Self::Drinking,
        Self::Kicking,
        Self::Catch,
        Self::Dribbling,
        Self::Writing,
        Self::Clapping,
        Self::Folding,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Walking => "walking",
            Self::Jogging => "jogging",
            Self::Stairs => "stairs",
            Self::Sitting => "sitting",
            Self::Standing => "standing",
            Self::Typing => "typing",
            Self::Brushing => "brushing",
            Self::Eating => "eating",
            Self::Drinking => "drinking",
            Self::Kicking => "kicking",
            Self::Catch => "catch",
            Self::Dribbling => "dribbling",
            Self::Writing => "writing",
            Self::Clapping => "clapping",
            Self::Folding => "folding",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Table label, e.g. "Brushing".
    pub fn title(self) -> String {
        let name = self.name();
        let mut chars = name.chars();
        match chars.next() {
            Some(first) => first.to_uppercase().chain(chars).collect(),
            None => String::new(),
        }
    }

    /// Hand-oriented activities are everything except walking, jogging,
    /// stairs, standing, kicking and sitting.
    pub fn is_hand_oriented(self) -> bool {
        !matches!(
            self,
            Self::Walking
                | Self::Jogging
                | Self::Stairs
                | Self::Standing
                | Self::Kicking
                | Self::Sitting
        )
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

impl fmt::Display for ActivityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps an activity label to its class. Accepts a single-letter code
/// (`"H"` becomes `eating`) or an already-merged class name, so the map is
/// idempotent on its output space.
pub fn merge_eating_label(label: &str) -> Result<ActivityClass, DatasetError> {
    let label = label.trim();
    if let Some(class) = ActivityClass::from_name(label) {
        return Ok(class);
    }
    label.parse::<ActivityCode>().map(ActivityCode::class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Phone,
    Watch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sensor {
    Accel,
    Gyro,
}

impl Device {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Phone => "phone",
            Self::Watch => "watch",
        }
    }
}

impl Sensor {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Accel => "accel",
            Self::Gyro => "gyro",
        }
    }
}

impl FromStr for Device {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "phone" => Ok(Self::Phone),
            "watch" => Ok(Self::Watch),
            other => Err(format!("unknown device `{other}` (expected phone|watch)")),
        }
    }
}

impl FromStr for Sensor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accel" | "accelerometer" => Ok(Self::Accel),
            "gyro" | "gyroscope" => Ok(Self::Gyro),
            other => Err(format!("unknown sensor `{other}` (expected accel|gyro)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceSensor {
    pub device: Device,
    pub sensor: Sensor,
}

impl DeviceSensor {
    pub const fn new(device: Device, sensor: Sensor) -> Self {
        Self { device, sensor }
    }

    pub const ALL: [DeviceSensor; 4] = [
        Self::new(Device::Phone, Sensor::Accel),
        Self::new(Device::Phone, Sensor::Gyro),
        Self::new(Device::Watch, Sensor::Accel),
        Self::new(Device::Watch, Sensor::Gyro),
    ];
}

impl fmt::Display for DeviceSensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.device.as_str(), self.sensor.as_str())
    }
}

/// One timestamped triaxial sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub subject_id: u32,
    pub activity: ActivityCode,
    /// Nanoseconds, monotonic within a stream; origin is opaque.
    pub timestamp: i64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl SensorReading {
    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Formats the reading in the raw on-disk layout. Parsing the result
    /// yields an identical reading.
    pub fn to_raw_line(&self) -> String {
        format!(
            "{},{},{},{},{},{};",
            self.subject_id, self.activity, self.timestamp, self.x, self.y, self.z
        )
    }
}

/// Parses one raw record. Surrounding whitespace and the trailing `;` are
/// tolerated.
pub fn parse_raw_line(line: &str) -> Result<SensorReading, RecordError> {
    let body = line.trim();
    let body = body.strip_suffix(';').unwrap_or(body).trim_end();
    if body.is_empty() {
        return Err(RecordError::Empty);
    }
    let fields: Vec<&str> = body.split(',').map(str::trim).collect();
    if fields.len() != 6 {
        return Err(RecordError::FieldCount(fields.len()));
    }
    let subject_id = fields[0]
        .parse::<u32>()
        .map_err(|_| RecordError::BadNumber {
            field: "subject",
            text: fields[0].to_string(),
        })?;
    let activity = {
        let mut chars = fields[1].chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => ActivityCode::from_letter(c),
            _ => None,
        }
    }
    .ok_or_else(|| RecordError::UnknownActivity(fields[1].to_string()))?;
    let timestamp = fields[2]
        .parse::<i64>()
        .map_err(|_| RecordError::BadNumber {
            field: "timestamp",
            text: fields[2].to_string(),
        })?;
    let axis = |idx: usize, name: &'static str| -> Result<f64, RecordError> {
        let v = fields[idx]
            .parse::<f64>()
            .map_err(|_| RecordError::BadNumber {
                field: name,
                text: fields[idx].to_string(),
            })?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(RecordError::NonFinite(name))
        }
    };
    Ok(SensorReading {
        subject_id,
        activity,
        timestamp,
        x: axis(3, "x")?,
        y: axis(4, "y")?,
        z: axis(5, "z")?,
    })
}

/// What to do when a line fails to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipPolicy {
    #[default]
    Skip,
    Abort,
}

/// Readings from one file, in file order.
#[derive(Debug, Clone)]
pub struct LoadedStream {
    pub device_sensor: DeviceSensor,
    pub readings: Vec<SensorReading>,
    pub skipped: usize,
}

pub fn load_stream(
    path: impl AsRef<Path>,
    device_sensor: DeviceSensor,
    policy: SkipPolicy,
) -> Result<LoadedStream, DatasetError> {
    let file = File::open(path.as_ref())?;
    read_stream(BufReader::new(file), device_sensor, policy)
}

pub fn read_stream<R: Read>(
    reader: BufReader<R>,
    device_sensor: DeviceSensor,
    policy: SkipPolicy,
) -> Result<LoadedStream, DatasetError> {
    let mut readings = Vec::new();
    let mut skipped = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_raw_line(&line) {
            Ok(r) => readings.push(r),
            Err(source) => match policy {
                SkipPolicy::Skip => {
                    log::debug!("skipping line {}: {source}", idx + 1);
                    skipped += 1;
                }
                SkipPolicy::Abort => {
                    return Err(DatasetError::MalformedRecord {
                        line: idx + 1,
                        source,
                    })
                }
            },
        }
    }
    Ok(LoadedStream {
        device_sensor,
        readings,
        skipped,
    })
}

/// A fixed-length, non-overlapping segment of one subject/activity stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub subject_id: u32,
    pub activity: ActivityCode,
    pub device_sensor: DeviceSensor,
    /// Ordinal of the window within its stream.
    pub index: usize,
    pub start_timestamp: i64,
    pub samples: Vec<[f64; 3]>,
}

impl Window {
    pub fn axis(&self, axis: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[axis]).collect()
    }

    pub fn class(&self) -> ActivityClass {
        self.activity.class()
    }
}

/// Groups readings by (subject, activity) stream, keeping file order, in
/// order of first appearance.
pub fn group_streams(readings: &[SensorReading]) -> Vec<((u32, ActivityCode), Vec<SensorReading>)> {
    let mut order: Vec<(u32, ActivityCode)> = Vec::new();
    let mut groups: BTreeMap<(u32, ActivityCode), Vec<SensorReading>> = BTreeMap::new();
    for r in readings {
        let key = (r.subject_id, r.activity);
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(*r);
    }
    order
        .into_iter()
        .map(|k| {
            let v = groups.remove(&k).unwrap_or_default();
            (k, v)
        })
        .collect()
}

/// Cuts each stream into consecutive runs of `window_len` samples. A
/// trailing remainder shorter than `window_len` is dropped.
pub fn segment_windows(
    readings: &[SensorReading],
    device_sensor: DeviceSensor,
    window_len: usize,
) -> Vec<Window> {
    let mut windows = Vec::new();
    if window_len == 0 {
        return windows;
    }
    for ((subject_id, activity), stream) in group_streams(readings) {
        let max_gap = stream
            .windows(2)
            .map(|w| w[1].timestamp - w[0].timestamp)
            .max()
            .unwrap_or(0);
        if max_gap > 10 * SAMPLE_PERIOD_NS {
            log::warn!(
                "{device_sensor} subject {subject_id} activity {activity}: max inter-sample gap {:.3} s",
                max_gap as f64 * 1e-9
            );
        }
        for (index, chunk) in stream.chunks_exact(window_len).enumerate() {
            windows.push(Window {
                subject_id,
                activity,
                device_sensor,
                index,
                start_timestamp: chunk[0].timestamp,
                samples: chunk.iter().map(SensorReading::xyz).collect(),
            });
        }
    }
    windows
}

/// Serialized window table: metadata columns followed by `x0..x{n-1}`,
/// `y0..`, `z0..`.
pub fn write_windows_csv<W: Write>(writer: W, windows: &[Window]) -> Result<(), DatasetError> {
    let mut out = csv::Writer::from_writer(writer);
    let len = windows.first().map_or(WINDOW_LEN, |w| w.samples.len());
    let mut header: Vec<String> = ["subject", "activity", "device", "sensor", "window", "start_timestamp"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for axis in ["x", "y", "z"] {
        header.extend((0..len).map(|i| format!("{axis}{i}")));
    }
    out.write_record(&header)?;
    for w in windows {
        if w.samples.len() != len {
            return Err(DatasetError::BadWindowFile(format!(
                "mixed window lengths {} and {len}",
                w.samples.len()
            )));
        }
        let mut rec = vec![
            w.subject_id.to_string(),
            w.activity.to_string(),
            w.device_sensor.device.as_str().to_string(),
            w.device_sensor.sensor.as_str().to_string(),
            w.index.to_string(),
            w.start_timestamp.to_string(),
        ];
        for axis in 0..3 {
            rec.extend(w.samples.iter().map(|s| s[axis].to_string()));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_windows_csv<R: Read>(reader: R) -> Result<Vec<Window>, DatasetError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let n_cols = rdr.headers()?.len();
    if n_cols < 6 || (n_cols - 6) % 3 != 0 {
        return Err(DatasetError::BadWindowFile(format!("{n_cols} columns")));
    }
    let len = (n_cols - 6) / 3;
    let bad = |what: &str, v: &str| DatasetError::BadWindowFile(format!("bad {what} `{v}`"));
    let mut windows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let subject_id = rec[0].parse().map_err(|_| bad("subject", &rec[0]))?;
        let activity = rec[1].parse()?;
        let device = rec[2].parse().map_err(|_| bad("device", &rec[2]))?;
        let sensor = rec[3].parse().map_err(|_| bad("sensor", &rec[3]))?;
        let index = rec[4].parse().map_err(|_| bad("window", &rec[4]))?;
        let start_timestamp = rec[5].parse().map_err(|_| bad("timestamp", &rec[5]))?;
        let mut samples = vec![[0.0; 3]; len];
        for axis in 0..3 {
            for (i, s) in samples.iter_mut().enumerate() {
                let field = &rec[6 + axis * len + i];
                s[axis] = field.parse().map_err(|_| bad("sample", field))?;
            }
        }
        windows.push(Window {
            subject_id,
            activity,
            device_sensor: DeviceSensor::new(device, sensor),
            index,
            start_timestamp,
            samples,
        });
    }
    Ok(windows)
}

/// Counts per class/activity for one device-sensor window table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowManifest {
    pub device_sensor: DeviceSensor,
    pub provenance: Provenance,
    pub total_windows: usize,
    pub skipped_lines: usize,
    pub files: usize,
    pub per_class: BTreeMap<String, usize>,
    pub per_activity: BTreeMap<String, usize>,
}

impl WindowManifest {
    pub fn from_windows(
        device_sensor: DeviceSensor,
        provenance: Provenance,
        windows: &[Window],
        files: usize,
        skipped_lines: usize,
    ) -> Self {
        let mut per_class = BTreeMap::new();
        let mut per_activity = BTreeMap::new();
        for w in windows {
            *per_class.entry(w.class().name().to_string()).or_insert(0) += 1;
            *per_activity.entry(w.activity.to_string()).or_insert(0) += 1;
        }
        Self {
            device_sensor,
            provenance,
            total_windows: windows.len(),
            skipped_lines,
            files,
            per_class,
            per_activity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// Identifies the window a feature row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub subject_id: u32,
    pub activity: ActivityCode,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRow {
    pub key: RowKey,
    pub features: Vec<f64>,
    pub class: ActivityClass,
}

/// Feature rows with their class labels. `sources` lists the device-sensor
/// streams whose features are concatenated in each row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub feature_names: Vec<String>,
    pub rows: Vec<LabeledRow>,
    pub provenance: Provenance,
    pub sources: Vec<DeviceSensor>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn class_set() -> Vec<String> {
        ActivityClass::names()
    }

    pub fn class_counts(&self) -> [usize; ActivityClass::COUNT] {
        let mut counts = [0; ActivityClass::COUNT];
        for r in &self.rows {
            counts[r.class.index()] += 1;
        }
        counts
    }

    fn with_rows(&self, rows: Vec<LabeledRow>) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            rows,
            provenance: self.provenance,
            sources: self.sources.clone(),
        }
    }

    /// Joins datasets on `RowKey`, concatenating feature vectors in argument
    /// order. Rows missing from any input are dropped.
    pub fn concat_aligned(parts: &[LabeledDataset]) -> Option<LabeledDataset> {
        let (first, rest) = parts.split_first()?;
        let lookups: Vec<BTreeMap<RowKey, &LabeledRow>> = rest
            .iter()
            .map(|d| d.rows.iter().map(|r| (r.key, r)).collect())
            .collect();
        let rows = first
            .rows
            .iter()
            .filter_map(|row| {
                let mut features = row.features.clone();
                for lookup in &lookups {
                    features.extend_from_slice(&lookup.get(&row.key)?.features);
                }
                Some(LabeledRow {
                    key: row.key,
                    features,
                    class: row.class,
                })
            })
            .collect();
        let mut feature_names = Vec::new();
        let mut sources = Vec::new();
        for d in parts {
            let prefix = d
                .sources
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("+");
            feature_names.extend(d.feature_names.iter().map(|n| {
                if parts.len() > 1 {
                    format!("{prefix}:{n}")
                } else {
                    n.clone()
                }
            }));
            sources.extend_from_slice(&d.sources);
        }
        Some(LabeledDataset {
            feature_names,
            rows,
            provenance: first.provenance,
            sources,
        })
    }
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let parts = [self.train, self.val, self.test];
        let ok = parts.iter().all(|r| r.is_finite() && *r >= 0.0)
            && (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DatasetError::BadRatios((self.train, self.val, self.test)))
        }
    }
}

/// Floor-based totals; leftover rows go to classes in descending `priority`.
fn apportion(
    counts: &[usize],
    ratio: f64,
    available: &[usize],
    priority: impl Fn(usize, usize) -> f64,
) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (total as f64 * ratio + 1e-9).floor() as usize;
    let quotas: Vec<f64> = counts.iter().map(|&n| n as f64 * ratio).collect();
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(available)
        .map(|(q, &avail)| ((q + 1e-9).floor() as usize).min(avail))
        .collect();
    let mut remaining = target.saturating_sub(alloc.iter().sum());
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        priority(b, alloc[b])
            .total_cmp(&priority(a, alloc[a]))
            .then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        // keep at least one row of every class in train
        if alloc[c] + 1 < available[c] && (alloc[c] as f64) <= quotas[c] + 1e-9 {
            alloc[c] += 1;
            remaining -= 1;
        }
    }
    alloc
}

/// Stratified shuffled split. Validation and test sizes are
/// `floor(n * ratio)` overall. Validation rows are apportioned to classes by
/// largest remainder, test rows to the classes whose train share would
/// otherwise run furthest over, and everything left over goes to train.
pub fn split_dataset(
    dataset: &LabeledDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), DatasetError> {
    ratios.validate()?;
    let counts = dataset.class_counts();
    for class in ActivityClass::ALL {
        let n = counts[class.index()];
        if n > 0 && n < 3 {
            return Err(DatasetError::EmptyClass {
                class: class.name().to_string(),
                count: n,
            });
        }
    }
    let val_alloc = apportion(&counts, ratios.val, &counts, |c, alloc| {
        counts[c] as f64 * ratios.val - alloc as f64
    });
    let left: Vec<usize> = counts.iter().zip(&val_alloc).map(|(n, v)| n - v).collect();
    // test rows go first where train would otherwise exceed its share
    let test_alloc = apportion(&counts, ratios.test, &left, |c, alloc| {
        (left[c] - alloc) as f64 - counts[c] as f64 * ratios.train
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in ActivityClass::ALL {
        let mut members: Vec<&LabeledRow> =
            dataset.rows.iter().filter(|r| r.class == class).collect();
        members.shuffle(&mut rng);
        let (nv, nt) = (val_alloc[class.index()], test_alloc[class.index()]);
        for (i, row) in members.into_iter().enumerate() {
            let dest = if i < nv {
                &mut val
            } else if i < nv + nt {
                &mut test
            } else {
                &mut train
            };
            dest.push(row.clone());
        }
    }
    train.shuffle(&mut rng);
    Ok((
        dataset.with_rows(train),
        dataset.with_rows(val),
        dataset.with_rows(test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reading(subject: u32, activity: ActivityCode, t: i64) -> SensorReading {
        SensorReading {
            subject_id: subject,
            activity,
            timestamp: t,
            x: t as f64,
            y: 0.0,
            z: -1.0,
        }
    }

    #[test]
    fn parses_zero_record() {
        let r = parse_raw_line("1,A,1000,0.0,0.0,0.0;").unwrap();
        assert_eq!(
            r,
            SensorReading {
                subject_id: 1,
                activity: ActivityCode::A,
                timestamp: 1000,
                x: 0.0,
                y: 0.0,
                z: 0.0
            }
        );
    }

    #[test]
    fn parses_signed_values_with_whitespace() {
        let r = parse_raw_line("  3,H,2000,1.5,-2.25,9.81;  ").unwrap();
        assert_eq!(r.subject_id, 3);
        assert_eq!(r.activity, ActivityCode::H);
        assert_eq!(r.timestamp, 2000);
        assert_eq!(r.xyz(), [1.5, -2.25, 9.81]);
    }

    #[test]
    fn rejects_bad_records() {
        assert_eq!(
            parse_raw_line("3,Z,2000,1,2,3;"),
            Err(RecordError::UnknownActivity("Z".into()))
        );
        assert_eq!(
            parse_raw_line("3,N,2000,1,2,3;"),
            Err(RecordError::UnknownActivity("N".into()))
        );
        assert_eq!(parse_raw_line("3,A,2000,1,2;"), Err(RecordError::FieldCount(5)));
        assert!(matches!(
            parse_raw_line("3,A,2000,1,abc,3;"),
            Err(RecordError::BadNumber { field: "y", .. })
        ));
        assert_eq!(parse_raw_line("3,A,2000,1,NaN,3;"), Err(RecordError::NonFinite("y")));
        assert_eq!(parse_raw_line(" ; "), Err(RecordError::Empty));
    }

    #[test]
    fn load_stream_counts_and_policies() {
        let ds = DeviceSensor::new(Device::Watch, Sensor::Accel);
        let empty = read_stream(BufReader::new(&b""[..]), ds, SkipPolicy::Skip).unwrap();
        assert!(empty.readings.is_empty());
        assert_eq!(empty.skipped, 0);

        let good = "1,A,1,0,0,0;\n1,A,2,1,1,1;\n1,A,3,2,2,2;\n";
        let s = read_stream(BufReader::new(good.as_bytes()), ds, SkipPolicy::Skip).unwrap();
        assert_eq!(s.readings.len(), 3);
        assert_eq!(
            s.readings.iter().map(|r| r.timestamp).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );

        let bad = "1,A,1,0,0,0;\n1,A,oops,1,1,1;\n1,A,3,2,2,2;\n";
        let s = read_stream(BufReader::new(bad.as_bytes()), ds, SkipPolicy::Skip).unwrap();
        assert_eq!((s.readings.len(), s.skipped), (2, 1));
        let err = read_stream(BufReader::new(bad.as_bytes()), ds, SkipPolicy::Abort).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedRecord { line: 2, .. }));
    }

    #[test]
    fn segmentation_counts() {
        let ds = DeviceSensor::new(Device::Phone, Sensor::Gyro);
        let three_min: Vec<_> = (0..3600).map(|t| reading(1, ActivityCode::A, t)).collect();
        let w = segment_windows(&three_min, ds, WINDOW_LEN);
        assert_eq!(w.len(), 18);
        assert!(w.iter().all(|w| w.samples.len() == 200));
        assert_eq!(w[1].start_timestamp, 200);
        assert_eq!(w[17].index, 17);

        let r250: Vec<_> = (0..250).map(|t| reading(1, ActivityCode::A, t)).collect();
        assert_eq!(segment_windows(&r250, ds, WINDOW_LEN).len(), 1);
        let r199: Vec<_> = (0..199).map(|t| reading(1, ActivityCode::A, t)).collect();
        assert!(segment_windows(&r199, ds, WINDOW_LEN).is_empty());
        assert!(segment_windows(&[], ds, WINDOW_LEN).is_empty());
    }

    #[test]
    fn segmentation_keeps_streams_apart() {
        let ds = DeviceSensor::new(Device::Phone, Sensor::Accel);
        let mut rs = Vec::new();
        for t in 0..300 {
            rs.push(reading(1, ActivityCode::A, t));
            rs.push(reading(2, ActivityCode::A, t));
            rs.push(reading(1, ActivityCode::B, t));
        }
        let w = segment_windows(&rs, ds, WINDOW_LEN);
        assert_eq!(w.len(), 3);
        for win in &w {
            assert_eq!(win.samples[0][0], 0.0);
            assert_eq!(win.samples[199][0], 199.0);
        }
    }

    #[test]
    fn eating_merge() {
        assert_eq!(merge_eating_label("H").unwrap(), ActivityClass::Eating);
        assert_eq!(merge_eating_label("I").unwrap(), ActivityClass::Eating);
        assert_eq!(merge_eating_label("J").unwrap(), ActivityClass::Eating);
        assert_eq!(merge_eating_label("L").unwrap(), ActivityClass::Eating);
        assert_eq!(merge_eating_label("K").unwrap(), ActivityClass::Drinking);
        assert_eq!(merge_eating_label("A").unwrap().name(), "walking");
        assert!(matches!(
            merge_eating_label("N"),
            Err(DatasetError::UnknownActivity(_))
        ));
        let classes: std::collections::BTreeSet<_> =
            ActivityCode::ALL.iter().map(|a| a.class()).collect();
        assert_eq!(classes.len(), 15);
        for code in ActivityCode::ALL {
            let once = merge_eating_label(&code.to_string()).unwrap();
            assert_eq!(merge_eating_label(once.name()).unwrap(), once);
        }
    }

    #[test]
    fn hand_groups() {
        let non_hand: Vec<_> = ActivityClass::ALL
            .into_iter()
            .filter(|c| !c.is_hand_oriented())
            .map(|c| c.name())
            .collect();
        assert_eq!(
            non_hand,
            vec!["walking", "jogging", "stairs", "sitting", "standing", "kicking"]
        );
        assert_eq!(ActivityClass::Brushing.title(), "Brushing");
    }

    fn dataset_with_counts(counts: &[(ActivityClass, usize)]) -> LabeledDataset {
        let mut rows = Vec::new();
        for &(class, n) in counts {
            for i in 0..n {
                rows.push(LabeledRow {
                    key: RowKey {
                        subject_id: class.index() as u32,
                        activity: ActivityCode::A,
                        window: i,
                    },
                    features: vec![i as f64],
                    class,
                });
            }
        }
        LabeledDataset {
            feature_names: vec!["f".into()],
            rows,
            provenance: Provenance::Synthetic,
            sources: vec![DeviceSensor::new(Device::Watch, Sensor::Accel)],
        }
    }

    #[test]
    fn split_sizes_match_reported_counts() {
        // 18,310 rows spread unevenly over the 15 classes.
        let mut counts = Vec::new();
        let mut left = 18_310usize;
        for (i, class) in ActivityClass::ALL.into_iter().enumerate() {
            let n = if i == 14 { left } else { 1000 + 37 * i };
            left -= n;
            counts.push((class, n));
        }
        let ds = dataset_with_counts(&counts);
        let (tr, va, te) = split_dataset(&ds, SplitRatios::default(), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (14648, 1831, 1831));
    }

    #[test]
    fn split_single_class() {
        let ds = dataset_with_counts(&[(ActivityClass::Walking, 10)]);
        let (tr, va, te) = split_dataset(&ds, SplitRatios::default(), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let again = split_dataset(&ds, SplitRatios::default(), 3).unwrap();
        assert_eq!(again.0, tr);
        assert_eq!(again.1, va);
    }

    #[test]
    fn split_rejects_tiny_class_and_bad_ratios() {
        let ds = dataset_with_counts(&[(ActivityClass::Walking, 10), (ActivityClass::Typing, 2)]);
        assert!(matches!(
            split_dataset(&ds, SplitRatios::default(), 0),
            Err(DatasetError::EmptyClass { count: 2, .. })
        ));
        let ds = dataset_with_counts(&[(ActivityClass::Walking, 10)]);
        let bad = SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.2,
        };
        assert!(matches!(
            split_dataset(&ds, bad, 0),
            Err(DatasetError::BadRatios(_))
        ));
    }

    #[test]
    fn window_csv_round_trip() {
        let ds = DeviceSensor::new(Device::Watch, Sensor::Gyro);
        let rs: Vec<_> = (0..450).map(|t| reading(7, ActivityCode::Q, t * 50)).collect();
        let windows = segment_windows(&rs, ds, WINDOW_LEN);
        let mut buf = Vec::new();
        write_windows_csv(&mut buf, &windows).unwrap();
        let back = read_windows_csv(&buf[..]).unwrap();
        assert_eq!(back, windows);
        let manifest = WindowManifest::from_windows(ds, Provenance::Synthetic, &windows, 1, 0);
        assert_eq!(manifest.total_windows, 2);
        assert_eq!(manifest.per_class["writing"], 2);
    }
}
