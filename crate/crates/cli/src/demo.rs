//! End-to-end run on generated data: every stage, all four classifiers and
//! the five eating-activity forecasts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use har_core::dataset::{ActivityCode, Device, DeviceSensor, Sensor};
use har_core::models::Architecture;

use crate::commands::{self, files_with_suffix};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::stamp::sha256_file;

/// Epoch cap for demo training runs.
pub const DEMO_MAX_EPOCHS: usize = 30;
/// Forecaster settings for the demo: every second context, 20 epochs.
pub const DEMO_FORECAST_STRIDE: usize = 2;
pub const DEMO_FORECAST_EPOCHS: usize = 20;

pub const HASH_MANIFEST: &str = "artifacts.sha256";
pub const TIMINGS: &str = "timings.json";

pub struct DemoArgs {
    pub out: PathBuf,
    pub epochs: usize,
}

#[derive(Default)]
struct Timings(BTreeMap<String, f64>);

impl Timings {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
        let start = Instant::now();
        let out = f()?;
        self.0.insert(stage.to_string(), start.elapsed().as_secs_f64());
        Ok(out)
    }
}

pub fn demo(args: &DemoArgs, config: &RunConfig) -> Result<(), CliError> {
    if args.epochs == 0 || args.epochs > DEMO_MAX_EPOCHS {
        return Err(CliError::Config(format!("demo epochs must be in 1..={DEMO_MAX_EPOCHS}")));
    }
    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut timings = Timings::default();
    let watch = DeviceSensor::new(Device::Watch, Sensor::Accel);
    let phone = DeviceSensor::new(Device::Phone, Sensor::Accel);

    let windows_of = |ds: DeviceSensor| out.join("windows").join(format!("{ds}.csv"));
    for ds in [watch, phone] {
        let args = commands::IngestArgs {
            device_sensor: ds,
            input: out.join("raw").join(ds.device.as_str()).join(ds.sensor.as_str()),
            out: windows_of(ds),
            synthetic: true,
        };
        let manifest = timings.time(&format!("ingest/{ds}"), || commands::ingest(&args, config))?;
        log::info!("{ds}: {} windows", manifest.total_windows);
    }

    let features = out.join("features").join(format!("{watch}.csv"));
    timings.time("featurize", || {
        commands::featurize(&commands::FeaturizeArgs {
            inputs: vec![windows_of(watch)],
            out: features.clone(),
            drop: config.data.drop_features.clone(),
        })
    })?;

    let mancova_out = out.join("mancova").join("accel.json");
    fs::create_dir_all(out.join("mancova")).map_err(|e| CliError::io(out, e))?;
    let diff = timings.time("mancova", || {
        commands::mancova(&commands::MancovaArgs {
            phone: windows_of(phone),
            watch: windows_of(watch),
            sensor: Sensor::Accel,
            out: Some(mancova_out.clone()),
        })
    })?;
    log::info!("{}", diff.summary);

    let split_seed = config.stage_seed("split");
    let mut evaluations = Vec::new();
    for arch in Architecture::CLASSIFIERS {
        let checkpoint = out.join("models").join(format!("{}.json", arch.slug()));
        let train_args = commands::TrainArgs {
            arch,
            expected_sources: vec![watch],
            data: features.clone(),
            seed: config.stage_seed(&format!("train/{}", arch.slug())),
            split_seed,
            epochs: Some(args.epochs),
            stop_rule: config.train.stop_rule.unwrap_or(true),
            out: checkpoint.clone(),
        };
        timings.time(&format!("train/{}", arch.slug()), || commands::train_classifier(&train_args, config))?;
        let eval_out = out.join("eval").join(format!("{}.json", arch.slug()));
        let eval_args = commands::EvaluateArgs {
            model: checkpoint,
            data: features.clone(),
            split_seed,
            out: eval_out.clone(),
        };
        timings.time(&format!("evaluate/{}", arch.slug()), || commands::evaluate(&eval_args, config))?;
        evaluations.push(eval_out);
    }

    let mut forecasts = Vec::new();
    for activity in ActivityCode::FORECAST_TARGETS {
        let csv = out.join("forecast").join(format!("{activity}.csv"));
        let fargs = commands::ForecastArgs {
            activity,
            data: windows_of(watch),
            subject: None,
            device: Some(Device::Watch),
            context: config.forecast.context,
            stride: DEMO_FORECAST_STRIDE,
            epochs: DEMO_FORECAST_EPOCHS,
            horizon: config.forecast.horizon,
            seed: config.stage_seed(&format!("forecast/{activity}")),
            out: csv.clone(),
        };
        timings.time(&format!("forecast/{activity}"), || commands::forecast(&fargs))?;
        forecasts.push(commands::metrics_path(&csv));
    }

    timings.time("report", || {
        commands::report(&commands::ReportArgs {
            classifiers: evaluations,
            forecasts,
            out: out.clone(),
        })
    })?;

    write_hash_manifest(out)?;
    let timings_path = out.join(TIMINGS);
    fs::write(&timings_path, serde_json::to_string_pretty(&timings.0)? + "\n").map_err(|e| CliError::io(&timings_path, e))?;
    Ok(())
}

fn collect_files(dir: &Path, root: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, root, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walked below root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if rel != HASH_MANIFEST && rel != TIMINGS {
                out.push((rel, path));
            }
        }
    }
    Ok(())
}

/// Writes `<sha256>  <relative path>` for every artifact under `dir`,
/// sorted by path. Wall-clock timings are left out.
pub fn write_hash_manifest(dir: &Path) -> Result<PathBuf, CliError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut text = String::new();
    for (rel, path) in files {
        text.push_str(&format!("{}  {rel}\n", sha256_file(&path)?));
    }
    let manifest = dir.join(HASH_MANIFEST);
    fs::write(&manifest, text).map_err(|e| CliError::io(&manifest, e))?;
    Ok(manifest)
}

/// Paths the `report` subcommand picks up from a work directory laid out
/// like the demo's.
pub fn discover_results(work: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>), CliError> {
    Ok((
        files_with_suffix(&work.join("eval"), ".json")?,
        files_with_suffix(&work.join("forecast"), ".metrics.json")?,
    ))
}
