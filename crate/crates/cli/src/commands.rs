//! One function per subcommand. Each reads its predecessor's artifacts from
//! disk, so stages can run on their own or chained by `demo`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use har_core::dataset::{
    load_stream, read_windows_csv, segment_windows, split_dataset, synthesize_dataset, write_wisdm_files,
    write_windows_csv, ActivityClass, ActivityCode, Device, DeviceSensor, LabeledDataset, Provenance, Sensor,
    SynthConfig, Window, WindowManifest, WINDOW_LEN,
};
use har_core::eval::{
    classification_report, emit_report_tables, forecast_metrics_xyz, ClassifierResult, ForecastResult,
};
use har_core::features::{drop_features, featurize_windows, read_features_csv, write_features_csv};
use har_core::models::{
    classifier_spec, forecast_split, train, train_forecaster, Architecture, ForecastConfig, StackSize,
    TrainConfig, TrainHistory, TrainedModel,
};
use har_core::stats::{device_difference_report, DeviceDifference};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::stamp::Stage;

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// `windows.csv` → `windows.manifest.json`.
pub fn manifest_path(windows: &Path) -> PathBuf {
    with_suffix(windows, "manifest.json")
}

/// `model.json` → `model.history.json`.
pub fn history_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, "history.json")
}

/// `H.csv` → `H.metrics.json`.
pub fn metrics_path(forecast_csv: &Path) -> PathBuf {
    with_suffix(forecast_csv, "metrics.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn open(path: &Path) -> Result<fs::File, CliError> {
    fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Data(format!("{} does not exist; run the stage that produces it first", path.display()))
        } else {
            CliError::io(path, e)
        }
    })
}

pub fn read_windows(path: &Path) -> Result<Vec<Window>, CliError> {
    Ok(read_windows_csv(open(path)?)?)
}

pub fn read_features(path: &Path) -> Result<LabeledDataset, CliError> {
    Ok(read_features_csv(open(path)?)?)
}

pub struct IngestArgs {
    pub device_sensor: DeviceSensor,
    pub input: PathBuf,
    pub out: PathBuf,
    pub synthetic: bool,
}

fn raw_files(dir: &Path, ds: DeviceSensor) -> Result<Vec<PathBuf>, CliError> {
    let suffix = format!("_{}_{}.txt", ds.sensor.as_str(), ds.device.as_str());
    let nested = dir.join(ds.device.as_str()).join(ds.sensor.as_str());
    for candidate in [dir.to_path_buf(), nested] {
        if !candidate.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&candidate)
            .map_err(|e| CliError::io(&candidate, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_") && n.ends_with(&suffix))
            })
            .collect();
        if !files.is_empty() {
            files.sort();
            return Ok(files);
        }
    }
    Err(CliError::Data(format!(
        "no data_<subject>{suffix} files in {} or its {}/{} subdirectory",
        dir.display(),
        ds.device.as_str(),
        ds.sensor.as_str()
    )))
}

/// Parses raw WISDM files into 200-sample windows. With `synthetic`, the
/// raw directory is first filled with generated files.
pub fn ingest(args: &IngestArgs, config: &RunConfig) -> Result<WindowManifest, CliError> {
    let ds = args.device_sensor;
    if args.synthetic {
        let synth = SynthConfig {
            n_per_class: config.synthetic.subjects,
            seed: config.stage_seed(&format!("synthetic/{ds}")),
            samples_per_stream: config.synthetic.samples_per_stream,
            device_sensor: ds,
        };
        log::info!("generating synthetic {ds} data for {} subjects", synth.n_per_class);
        write_wisdm_files(&synthesize_dataset(&synth), &args.input, ds).map_err(|e| CliError::io(&args.input, e))?;
    } else if !args.input.is_dir() {
        return Err(CliError::Data(format!(
            "raw data directory {} does not exist; point --in at a WISDM raw directory or pass --synthetic",
            args.input.display()
        )));
    }
    let files = raw_files(&args.input, ds)?;
    let provenance = if args.synthetic { Provenance::Synthetic } else { Provenance::Real };
    let manifest_out = manifest_path(&args.out);
    let inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let stage = Stage::new(
        "ingest",
        &(ds, provenance, config.data.skip_policy),
        &inputs,
        &[&args.out, &manifest_out],
    )?;
    stage.run(|| {
        let mut windows = Vec::new();
        let mut skipped = 0;
        for f in &files {
            let stream = load_stream(f, ds, config.data.skip_policy)?;
            skipped += stream.skipped;
            windows.extend(segment_windows(&stream.readings, ds, WINDOW_LEN));
        }
        if windows.is_empty() {
            return Err(CliError::Data(format!("no complete {WINDOW_LEN}-sample windows in {}", args.input.display())));
        }
        if skipped > 0 {
            log::warn!("skipped {skipped} malformed lines");
        }
        write_windows_csv(create(&args.out)?, &windows)?;
        let manifest = WindowManifest::from_windows(ds, provenance, &windows, files.len(), skipped);
        write_json(&manifest_out, &manifest)
    })?;
    read_json(&manifest_out)
}

pub struct FeaturizeArgs {
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub drop: Vec<String>,
}

/// Extracts the 45 features per window. Several inputs are joined window by
/// window, concatenating their feature vectors.
pub fn featurize(args: &FeaturizeArgs) -> Result<(), CliError> {
    if args.inputs.is_empty() {
        return Err(CliError::Config("featurize needs at least one --in file".into()));
    }
    let inputs: Vec<&Path> = args.inputs.iter().map(PathBuf::as_path).collect();
    let stage = Stage::new("featurize", &args.drop, &inputs, &[&args.out])?;
    stage.run(|| {
        let mut parts = Vec::new();
        for input in &args.inputs {
            let manifest = manifest_path(input);
            let provenance = if manifest.exists() {
                read_json::<WindowManifest>(&manifest)?.provenance
            } else {
                Provenance::Real
            };
            parts.push(featurize_windows(&read_windows(input)?, provenance));
        }
        let joined = LabeledDataset::concat_aligned(&parts).expect("at least one input");
        if joined.is_empty() {
            return Err(CliError::Data("inputs share no windows".into()));
        }
        let dataset = if args.drop.is_empty() {
            joined
        } else {
            drop_features(&joined, &args.drop)?
        };
        write_features_csv(create(&args.out)?, &dataset)?;
        log::info!("{} feature rows x {} columns", dataset.len(), dataset.feature_names.len());
        Ok(())
    })?;
    Ok(())
}

pub struct MancovaArgs {
    pub phone: PathBuf,
    pub watch: PathBuf,
    pub sensor: Sensor,
    pub out: Option<PathBuf>,
}

fn sample_rows(windows: &[Window], expect: DeviceSensor, path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    if let Some(w) = windows.iter().find(|w| w.device_sensor != expect) {
        return Err(CliError::Data(format!(
            "{} holds {} windows, expected {expect}",
            path.display(),
            w.device_sensor
        )));
    }
    Ok(windows.iter().flat_map(|w| w.samples.iter().map(|s| s.to_vec())).collect())
}

/// Phone-versus-watch test on the per-sample (x, y, z) readings.
pub fn mancova(args: &MancovaArgs) -> Result<DeviceDifference, CliError> {
    let phone = sample_rows(&read_windows(&args.phone)?, DeviceSensor::new(Device::Phone, args.sensor), &args.phone)?;
    let watch = sample_rows(&read_windows(&args.watch)?, DeviceSensor::new(Device::Watch, args.sensor), &args.watch)?;
    let report = device_difference_report(&phone, &watch, args.sensor.as_str())?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

pub struct TrainArgs {
    pub arch: Architecture,
    /// Sources the data must come from; empty accepts any.
    pub expected_sources: Vec<DeviceSensor>,
    pub data: PathBuf,
    pub seed: u64,
    pub split_seed: u64,
    pub epochs: Option<usize>,
    pub stop_rule: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub model: String,
    pub source: String,
    pub seed: u64,
    pub split_seed: u64,
    pub train_rows: usize,
    pub val_rows: usize,
    pub param_count: usize,
    pub history: TrainHistory,
}

pub fn source_label(dataset: &LabeledDataset) -> String {
    dataset.sources.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
}

fn check_sources(dataset: &LabeledDataset, expected: &[DeviceSensor]) -> Result<(), CliError> {
    if expected.is_empty() || dataset.sources.is_empty() {
        return Ok(());
    }
    let mut have = dataset.sources.clone();
    let mut want = expected.to_vec();
    have.sort();
    want.sort();
    if have != want {
        return Err(CliError::Config(format!(
            "data holds {} features but {} was requested",
            source_label(dataset),
            expected.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
        )));
    }
    Ok(())
}

pub fn train_classifier(args: &TrainArgs, config: &RunConfig) -> Result<TrainRecord, CliError> {
    let history_out = history_path(&args.out);
    let bin_out = args.out.with_extension("bin");
    let params = (
        args.arch,
        args.seed,
        args.split_seed,
        args.epochs,
        args.stop_rule,
        config.split,
    );
    let stage = Stage::new(
        &format!("train/{}", args.arch.slug()),
        &params,
        &[&args.data],
        &[&args.out, &bin_out, &history_out],
    )?;
    stage.run(|| {
        let dataset = read_features(&args.data)?;
        check_sources(&dataset, &args.expected_sources)?;
        let (tr, va, _) = split_dataset(&dataset, config.split, args.split_seed)?;
        let channels = har_core::models::channels_of(&dataset);
        let steps = dataset.feature_names.len() / channels;
        let spec = classifier_spec(args.arch, &StackSize::FULL, [steps, channels]);
        let mut tc = TrainConfig::for_spec(&spec, args.seed);
        if let Some(e) = args.epochs {
            tc.max_epochs = e;
        }
        tc.stop_rule = args.stop_rule;
        log::info!(
            "training {} on {} rows ({} validation), up to {} epochs",
            args.arch,
            tr.len(),
            va.len(),
            tc.max_epochs
        );
        let (model, history) = train(&spec, &tr, &va, &tc)?;
        log::info!("{} stopped at epoch {} ({:?})", args.arch, history.stop_epoch, history.stop_reason);
        model.save(&args.out)?;
        let record = TrainRecord {
            model: args.arch.name().to_string(),
            source: source_label(&dataset),
            seed: args.seed,
            split_seed: args.split_seed,
            train_rows: tr.len(),
            val_rows: va.len(),
            param_count: spec.param_count()?,
            history,
        };
        write_json(&history_out, &record)
    })?;
    read_json(&history_out)
}

pub struct EvaluateArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub split_seed: u64,
    pub out: PathBuf,
}

/// Scores a checkpoint on the held-out test split.
pub fn evaluate(args: &EvaluateArgs, config: &RunConfig) -> Result<ClassifierResult, CliError> {
    let bin = args.model.with_extension("bin");
    let stage = Stage::new(
        "evaluate",
        &(args.split_seed, config.split),
        &[&args.model, &bin, &args.data],
        &[&args.out],
    )?;
    stage.run(|| {
        let model = TrainedModel::load(&args.model)?;
        let dataset = read_features(&args.data)?;
        let (_, _, test) = split_dataset(&dataset, config.split, args.split_seed)?;
        let predictions = model.classify_dataset(&test)?;
        let truths: Vec<usize> = test.rows.iter().map(|r| r.class.index()).collect();
        let report = classification_report(&truths, &predictions, &ActivityClass::names())?;
        log::info!(
            "{}: macro-F1 {:.4}, accuracy {:.4} on {} test rows",
            model.spec.arch,
            report.macro_f1,
            report.accuracy,
            test.len()
        );
        let result = ClassifierResult {
            model: model.spec.arch.name().to_string(),
            source: source_label(&dataset),
            report,
        };
        write_json(&args.out, &result)
    })?;
    read_json(&args.out)
}

pub struct ForecastArgs {
    pub activity: ActivityCode,
    pub data: PathBuf,
    pub subject: Option<u32>,
    pub device: Option<Device>,
    pub context: usize,
    pub stride: usize,
    pub epochs: usize,
    pub horizon: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub result: ForecastResult,
    pub subject: u32,
    pub device_sensor: DeviceSensor,
    pub context_samples: usize,
    pub config: ForecastConfig,
    pub history: TrainHistory,
}

/// One subject's stream for `activity`, rebuilt from its windows in order.
pub fn activity_series(windows: &[Window], activity: ActivityCode, subject: Option<u32>) -> Result<(u32, Vec<[f64; 3]>), CliError> {
    let subject = match subject {
        Some(s) => s,
        None => windows
            .iter()
            .filter(|w| w.activity == activity)
            .map(|w| w.subject_id)
            .min()
            .ok_or_else(|| CliError::Data(format!("no windows for activity {activity}")))?,
    };
    let mut own: Vec<&Window> = windows
        .iter()
        .filter(|w| w.activity == activity && w.subject_id == subject)
        .collect();
    if own.is_empty() {
        return Err(CliError::Data(format!("subject {subject} has no windows for activity {activity}")));
    }
    own.sort_by_key(|w| w.index);
    Ok((subject, own.iter().flat_map(|w| w.samples.iter().copied()).collect()))
}

/// Trains the GRU forecaster on everything before the last `horizon`
/// samples, then rolls it out over the horizon.
pub fn forecast(args: &ForecastArgs) -> Result<ForecastRecord, CliError> {
    if !ActivityCode::FORECAST_TARGETS.contains(&args.activity) {
        return Err(CliError::Config(format!(
            "forecasting covers the eating activities H-L, not {}",
            args.activity
        )));
    }
    let record_out = metrics_path(&args.out);
    let fc = ForecastConfig {
        context_len: args.context,
        stride: args.stride,
        max_epochs: args.epochs,
        seed: args.seed,
        ..ForecastConfig::default()
    };
    let stage = Stage::new(
        &format!("forecast/{}", args.activity),
        &(args.activity, args.subject, args.device, args.horizon, &fc),
        &[&args.data],
        &[&args.out, &record_out],
    )?;
    stage.run(|| {
        let windows = read_windows(&args.data)?;
        let device_sensor = windows
            .first()
            .map(|w| w.device_sensor)
            .ok_or_else(|| CliError::Data(format!("{} has no windows", args.data.display())))?;
        if let Some(d) = args.device {
            if d != device_sensor.device {
                return Err(CliError::Config(format!("--device {} but the data is {device_sensor}", d.as_str())));
            }
        }
        let (subject, series) = activity_series(&windows, args.activity, args.subject)?;
        let (context, actual) = forecast_split(&series, args.horizon).ok_or_else(|| {
            CliError::Data(format!(
                "stream of {} samples is too short for a {}-sample horizon",
                series.len(),
                args.horizon
            ))
        })?;
        log::info!(
            "forecasting activity {} for subject {subject}: {} context samples, {} horizon",
            args.activity,
            context.len(),
            actual.len()
        );
        let (model, history) = train_forecaster(context, &fc)?;
        let predicted = model.rollout(context, actual.len())?;
        if predicted.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CliError::Diverged(format!("rollout for activity {} is not finite", args.activity)));
        }
        let metrics = forecast_metrics_xyz(actual, &predicted)?;
        let mut w = csv::Writer::from_writer(create(&args.out)?);
        w.write_record(["step", "actual_x", "actual_y", "actual_z", "forecast_x", "forecast_y", "forecast_z"])
            .map_err(|e| CliError::io(&args.out, e))?;
        for (i, (a, p)) in actual.iter().zip(&predicted).enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(a.iter().chain(p).map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| CliError::io(&args.out, e))?;
        }
        w.flush()?;
        let record = ForecastRecord {
            result: ForecastResult {
                activity: args.activity.to_string(),
                metrics,
            },
            subject,
            device_sensor,
            context_samples: context.len(),
            config: fc.clone(),
            history,
        };
        write_json(&record_out, &record)
    })?;
    read_json(&record_out)
}

pub struct ReportArgs {
    pub classifiers: Vec<PathBuf>,
    pub forecasts: Vec<PathBuf>,
    pub out: PathBuf,
}

fn arch_rank(name: &str) -> usize {
    Architecture::CLASSIFIERS
        .iter()
        .position(|a| a.name() == name)
        .unwrap_or(usize::MAX)
}

/// Gathers evaluation and forecast results into the report tables.
pub fn report(args: &ReportArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut classifiers = args
        .classifiers
        .iter()
        .map(|p| read_json::<ClassifierResult>(p))
        .collect::<Result<Vec<_>, _>>()?;
    classifiers.sort_by(|a, b| (arch_rank(&a.model), &a.source).cmp(&(arch_rank(&b.model), &b.source)));
    let mut forecasts = args
        .forecasts
        .iter()
        .map(|p| read_json::<ForecastRecord>(p).map(|r| r.result))
        .collect::<Result<Vec<_>, _>>()?;
    forecasts.sort_by(|a, b| a.activity.cmp(&b.activity));
    if classifiers.is_empty() && forecasts.is_empty() {
        return Err(CliError::Data("no evaluation or forecast results to report".into()));
    }
    let tables = emit_report_tables(&classifiers, &forecasts);
    Ok(tables.write(&args.out)?)
}

/// Files in `dir` ending in `suffix`, sorted; empty when `dir` is missing.
pub fn files_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(suffix)))
        .collect();
    files.sort();
    Ok(files)
}
