//! `har-forge`: activity-recognition pipeline from raw WISDM files to report tables.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
//! diverged, 5 i/o error.

mod commands;
mod config;
mod demo;
mod error;
mod stamp;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use har_core::dataset::{ActivityCode, Device, DeviceSensor, Sensor};
use har_core::models::Architecture;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "har-forge", version, about = "Human activity recognition pipeline for WISDM smartphone and smartwatch data")]
struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed, overriding the config file's `seed`.
    #[arg(long = "root-seed", global = true, value_name = "N")]
    root_seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw WISDM files into 200-sample windows (CSV plus a JSON manifest).
    Ingest(IngestCmd),
    /// Turn window tables into 45-value feature rows.
    Featurize(FeaturizeCmd),
    /// Test whether phone and watch readings share a mean vector (Wilks' lambda).
    Mancova(MancovaCmd),
    /// Train one classifier on a feature table.
    Train(TrainCmd),
    /// Score a trained classifier on the held-out test split.
    Evaluate(EvaluateCmd),
    /// Train the GRU forecaster on one eating activity and roll it out.
    Forecast(ForecastCmd),
    /// Build the report tables from evaluation and forecast results.
    Report(ReportCmd),
    /// Run every stage on synthetic data.
    Demo(DemoCmd),
}

#[derive(Args)]
struct IngestCmd {
    /// Device whose files to read [default: config data.device].
    #[arg(long)]
    device: Option<Device>,
    /// Sensor whose files to read [default: config data.sensor].
    #[arg(long)]
    sensor: Option<Sensor>,
    /// Directory holding data_<subject>_<sensor>_<device>.txt files, directly or
    /// under <device>/<sensor>/ [default: config paths.raw_dir].
    #[arg(long = "in", value_name = "DIR")]
    input: Option<PathBuf>,
    /// Window table to write; the manifest goes next to it as <stem>.manifest.json.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Generate synthetic raw files into the input directory first.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic subjects [default: config synthetic.subjects].
    #[arg(long, value_name = "N")]
    subjects: Option<usize>,
}

#[derive(Args)]
struct FeaturizeCmd {
    /// Window table; repeat to join device/sensor tables window by window.
    #[arg(long = "in", value_name = "FILE", required = true)]
    inputs: Vec<PathBuf>,
    /// Feature table to write.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Feature column to leave out (e.g. PEAK_z); repeatable. Adds to config data.drop_features.
    #[arg(long = "drop-feature", value_name = "NAME")]
    drop: Vec<String>,
}

#[derive(Args)]
struct MancovaCmd {
    /// Phone window table.
    #[arg(long, value_name = "FILE")]
    phone: PathBuf,
    /// Watch window table.
    #[arg(long, value_name = "FILE")]
    watch: PathBuf,
    /// Sensor both tables come from.
    #[arg(long)]
    sensor: Sensor,
    /// Also write the result as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SensorChoice {
    Accel,
    Gyro,
    /// Accelerometer and gyroscope features joined per window.
    Both,
}

#[derive(Args)]
struct TrainCmd {
    /// Classifier architecture: lstm, bilstm, convlstm or cnn.
    #[arg(long)]
    arch: Architecture,
    /// Device the features must come from [default: config data.device].
    #[arg(long)]
    device: Option<Device>,
    /// Sensor source the features must come from [default: config data.sensor].
    #[arg(long, value_enum)]
    sensor: Option<SensorChoice>,
    /// Feature table.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Weight-initialization and shuffling seed [default: derived from the root seed].
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Train/validation/test split seed [default: derived from the root seed].
    #[arg(long = "split-seed", value_name = "N")]
    split_seed: Option<u64>,
    /// Epoch budget [default: config train.epochs, else the architecture's own].
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Always run the full epoch budget.
    #[arg(long = "no-stop-rule")]
    no_stop_rule: bool,
    /// Checkpoint manifest to write; weights go to <stem>.bin, history to <stem>.history.json.
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateCmd {
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "CKPT")]
    model: PathBuf,
    /// Feature table the model was trained on.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Split seed used for training [default: derived from the root seed].
    #[arg(long = "split-seed", value_name = "N")]
    split_seed: Option<u64>,
    /// Evaluation JSON to write.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct ForecastCmd {
    /// Eating activity code: H, I, J, K or L.
    #[arg(long)]
    activity: ActivityCode,
    /// Window table holding the activity's stream.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Expected device of the window table [default: watch].
    #[arg(long, default_value = "watch")]
    device: Device,
    /// Subject whose stream to forecast [default: lowest id with this activity].
    #[arg(long, value_name = "ID")]
    subject: Option<u32>,
    /// Samples of context per prediction [default: config forecast.context].
    #[arg(long, value_name = "N")]
    context: Option<usize>,
    /// Spacing between training contexts [default: config forecast.stride].
    #[arg(long, value_name = "N")]
    stride: Option<usize>,
    /// Training epochs [default: config forecast.epochs].
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Samples to forecast [default: config forecast.horizon].
    #[arg(long, value_name = "N")]
    horizon: Option<usize>,
    /// Training seed [default: derived from the root seed].
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Forecast CSV to write; metrics go to <stem>.metrics.json.
    #[arg(long, value_name = "CSV")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportCmd {
    /// Evaluation JSON; repeatable.
    #[arg(long = "classifier", value_name = "FILE")]
    classifiers: Vec<PathBuf>,
    /// Forecast metrics JSON; repeatable.
    #[arg(long = "forecast", value_name = "FILE")]
    forecasts: Vec<PathBuf>,
    /// Directory laid out like the demo's (eval/, forecast/) to collect results from.
    #[arg(long, value_name = "DIR")]
    work: Option<PathBuf>,
    /// Output directory for tables/*.csv and report.md [default: config paths.work_dir].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoCmd {
    /// Root seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "demo")]
    out: PathBuf,
    /// Epoch cap per classifier (at most 30).
    #[arg(long, default_value_t = demo::DEMO_MAX_EPOCHS)]
    epochs: usize,
    /// Synthetic subjects [default: config synthetic.subjects].
    #[arg(long, value_name = "N")]
    subjects: Option<usize>,
}

fn sources_for(device: Device, sensor: SensorChoice) -> Vec<DeviceSensor> {
    match sensor {
        SensorChoice::Accel => vec![DeviceSensor::new(device, Sensor::Accel)],
        SensorChoice::Gyro => vec![DeviceSensor::new(device, Sensor::Gyro)],
        SensorChoice::Both => vec![
            DeviceSensor::new(device, Sensor::Accel),
            DeviceSensor::new(device, Sensor::Gyro),
        ],
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.root_seed {
        config.seed = seed;
    }
    match cli.command {
        Command::Ingest(c) => {
            if let Some(n) = c.subjects {
                config.synthetic.subjects = n;
            }
            config.validate()?;
            let args = commands::IngestArgs {
                device_sensor: DeviceSensor::new(
                    c.device.unwrap_or(config.data.device),
                    c.sensor.unwrap_or(config.data.sensor),
                ),
                input: c.input.unwrap_or_else(|| config.paths.raw_dir.clone()),
                out: c.out,
                synthetic: c.synthetic,
            };
            let manifest = commands::ingest(&args, &config)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Featurize(c) => {
            let mut drop = config.data.drop_features.clone();
            drop.extend(c.drop);
            commands::featurize(&commands::FeaturizeArgs {
                inputs: c.inputs,
                out: c.out,
                drop,
            })?;
        }
        Command::Mancova(c) => {
            let report = commands::mancova(&commands::MancovaArgs {
                phone: c.phone,
                watch: c.watch,
                sensor: c.sensor,
                out: c.out,
            })?;
            println!("{}", serde_json::to_string_pretty(&report.result)?);
            println!("{}", report.summary);
        }
        Command::Train(c) => {
            let device = c.device.unwrap_or(config.data.device);
            let sensor = c.sensor.unwrap_or(match config.data.sensor {
                Sensor::Accel => SensorChoice::Accel,
                Sensor::Gyro => SensorChoice::Gyro,
            });
            let args = commands::TrainArgs {
                arch: c.arch,
                expected_sources: sources_for(device, sensor),
                data: c.data,
                seed: c.seed.unwrap_or_else(|| config.stage_seed(&format!("train/{}", c.arch.slug()))),
                split_seed: c.split_seed.unwrap_or_else(|| config.stage_seed("split")),
                epochs: c.epochs.or(config.train.epochs),
                stop_rule: !c.no_stop_rule && config.train.stop_rule.unwrap_or(true),
                out: c.out,
            };
            if args.arch == Architecture::Gru {
                return Err(CliError::Config("the GRU is a forecaster; use `forecast`".into()));
            }
            let record = commands::train_classifier(&args, &config)?;
            println!(
                "{} trained for {} epochs ({:?}); history in {}",
                record.model,
                record.history.stop_epoch,
                record.history.stop_reason,
                commands::history_path(&args.out).display()
            );
        }
        Command::Evaluate(c) => {
            let result = commands::evaluate(
                &commands::EvaluateArgs {
                    model: c.model,
                    data: c.data,
                    split_seed: c.split_seed.unwrap_or_else(|| config.stage_seed("split")),
                    out: c.out,
                },
                &config,
            )?;
            println!(
                "{} on {}: macro-F1 {:.4}, accuracy {:.4}",
                result.model, result.source, result.report.macro_f1, result.report.accuracy
            );
        }
        Command::Forecast(c) => {
            let f = &config.forecast;
            let args = commands::ForecastArgs {
                activity: c.activity,
                data: c.data,
                subject: c.subject,
                device: Some(c.device),
                context: c.context.unwrap_or(f.context),
                stride: c.stride.unwrap_or(f.stride),
                epochs: c.epochs.unwrap_or(f.epochs),
                horizon: c.horizon.unwrap_or(f.horizon),
                seed: c.seed.unwrap_or_else(|| config.stage_seed(&format!("forecast/{}", c.activity))),
                out: c.out,
            };
            if args.context == 0 || args.stride == 0 || args.epochs == 0 || args.horizon == 0 {
                return Err(CliError::Config("context, stride, epochs and horizon must be positive".into()));
            }
            let record = commands::forecast(&args)?;
            let m = &record.result.metrics;
            println!(
                "activity {}: RMSE {:.4}, MSE {:.4}, MAPE {}, sMAPE {:.2}",
                record.result.activity,
                m.rmse,
                m.mse,
                m.mape.map_or("undefined".to_string(), |v| format!("{v:.2}")),
                m.smape
            );
        }
        Command::Report(c) => {
            let (mut classifiers, mut forecasts) = (c.classifiers, c.forecasts);
            if let Some(work) = &c.work {
                let (cl, fc) = demo::discover_results(work)?;
                classifiers.extend(cl);
                forecasts.extend(fc);
            }
            let out = c.out.unwrap_or_else(|| config.paths.work_dir.clone());
            for p in commands::report(&commands::ReportArgs {
                classifiers,
                forecasts,
                out,
            })? {
                println!("{}", p.display());
            }
        }
        Command::Demo(c) => {
            config.seed = c.seed;
            if let Some(n) = c.subjects {
                config.synthetic.subjects = n;
            }
            config.validate()?;
            demo::demo(&demo::DemoArgs { out: c.out.clone(), epochs: c.epochs }, &config)?;
            println!("demo artifacts in {}", c.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("har-forge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
