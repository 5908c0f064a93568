//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5 and 8 run `har-forge demo --seed 7` twice in temporary
//! directories. Criterion 7 needs the real WISDM raw files: set
//! `WISDM_RAW_DIR` to the directory holding `phone/` and `watch/`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use har_core::dataset::{split_dataset, ActivityClass, ActivityCode, SplitRatios};
use har_core::eval::{classification_report, forecast_metrics, forecast_metrics_xyz, ClassifierResult};
use har_core::features::{axis_stats, binned_distribution, N_BINS};
use har_core::models::{
    classifier_spec, forecast_split, train_forecaster, Architecture, ForecastConfig, Forecaster, StackSize,
};
use har_core::nncore::{grad_check, LayerSpec, Loss, Network, Tensor};
use har_core::stats::{wilks_manova, MancovaInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;

fn verdict(criterion: u32, pass: bool, detail: &str) {
    println!("{} criterion {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---- 1. gradient correctness ----------------------------------------------

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 60.0;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Zero-initialized biases put ReLU inputs exactly on the kink wherever
/// dropout silences a whole row; finite differences are meaningless there.
fn jitter_params(net: &mut Network, rng: &mut ChaCha8Rng) {
    for p in net.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

fn worst_error(input: &[usize], specs: &[LayerSpec], loss: Loss, rng: &mut ChaCha8Rng) -> f64 {
    let mut net = Network::new(input, specs, rng.random()).unwrap();
    jitter_params(&mut net, rng);
    let mut shape = vec![4];
    shape.extend_from_slice(input);
    let x = random_tensor(&shape, rng);
    let mut out_shape = vec![4];
    out_shape.extend_from_slice(net.output_shape());
    let target = match loss {
        Loss::MeanSquaredError => random_tensor(&out_shape, rng),
        Loss::CategoricalCrossEntropy => {
            let k = out_shape[1];
            let mut t = Tensor::zeros(&out_shape);
            for b in 0..4 {
                t.data_mut()[b * k + rng.random_range(0..k)] = 1.0;
            }
            t
        }
    };
    let report = grad_check(&net, &x, &target, loss, GRAD_TOL, rng.random()).unwrap();
    report.max_rel_error.max(report.input_max_rel_error)
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mse = Loss::MeanSquaredError;
    let mut cases: Vec<(String, f64)> = vec![
        ("dense".into(), worst_error(&[5], &[LayerSpec::Dense { units: 3 }], mse, &mut rng)),
        (
            "relu".into(),
            worst_error(&[5], &[LayerSpec::Dense { units: 4 }, LayerSpec::Relu], mse, &mut rng),
        ),
        (
            "softmax".into(),
            worst_error(&[5], &[LayerSpec::Dense { units: 4 }, LayerSpec::Softmax], mse, &mut rng),
        ),
        (
            "dropout".into(),
            worst_error(&[5], &[LayerSpec::Dense { units: 6 }, LayerSpec::Dropout { rate: 0.5 }], mse, &mut rng),
        ),
        (
            "conv1d".into(),
            worst_error(&[8, 2], &[LayerSpec::Conv1d { filters: 3, kernel_size: 3 }], mse, &mut rng),
        ),
        (
            "maxpool+flatten".into(),
            worst_error(
                &[9, 2],
                &[LayerSpec::MaxPool1d { pool_size: 2 }, LayerSpec::Flatten],
                mse,
                &mut rng,
            ),
        ),
        ("lstm".into(), worst_error(&[6, 2], &[LayerSpec::lstm(3)], mse, &mut rng)),
        (
            "lstm(seq)".into(),
            worst_error(&[6, 2], &[LayerSpec::Lstm { units: 3, return_sequences: true }], mse, &mut rng),
        ),
        ("bilstm".into(), worst_error(&[5, 2], &[LayerSpec::bilstm(3)], mse, &mut rng)),
        ("gru".into(), worst_error(&[6, 3], &[LayerSpec::gru(3)], mse, &mut rng)),
        (
            "gru(seq)".into(),
            worst_error(&[6, 3], &[LayerSpec::Gru { units: 2, return_sequences: true }], mse, &mut rng),
        ),
    ];
    for arch in Architecture::CLASSIFIERS {
        let spec = classifier_spec(arch, &StackSize::TINY, [16, 1]);
        assert!(spec.param_count().unwrap() <= 5000);
        cases.push((
            format!("{arch} stack ({} params)", spec.param_count().unwrap()),
            worst_error(&[16, 1], &spec.layers, Loss::CategoricalCrossEntropy, &mut rng),
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (worst_name, worst) = cases
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();
    verdict(
        1,
        worst < GRAD_TOL && elapsed < GRAD_BUDGET_S,
        &format!(
            "{} checks, max relative error {worst:.2e} ({worst_name}) < {GRAD_TOL:e}; {elapsed:.1}s < {GRAD_BUDGET_S}s",
            cases.len()
        ),
    );
}

// ---- 2. feature oracle ------------------------------------------------------

fn interval_counts(values: &[f64]) -> [usize; N_BINS] {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = [0; N_BINS];
    if hi == lo {
        counts[0] = values.len();
        return counts;
    }
    let w = (hi - lo) / N_BINS as f64;
    for &v in values {
        let bin = (0..N_BINS)
            .find(|&i| v >= lo + i as f64 * w && (i == N_BINS - 1 || v < lo + (i + 1) as f64 * w))
            .expect("value inside [lo, hi]");
        counts[bin] += 1;
    }
    counts
}

#[test]
fn criterion_2_feature_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut bin_mismatches, mut worst_stat, mut worst_sum) = (0usize, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let sigma = rng.random_range(0.05..15.0);
        let d = Normal::new(rng.random_range(-10.0..10.0), sigma).unwrap();
        let window: Vec<[f64; 3]> = (0..200)
            .map(|_| [d.sample(&mut rng), d.sample(&mut rng), rng.random_range(-sigma..sigma)])
            .collect();
        for axis in 0..3 {
            let v: Vec<f64> = window.iter().map(|s| s[axis]).collect();
            let bins = binned_distribution(&v);
            let oracle = interval_counts(&v);
            bin_mismatches += (0..N_BINS).filter(|&b| bins[b] != oracle[b] as f64 / 200.0).count();
            worst_sum = worst_sum.max((bins.iter().sum::<f64>() - 1.0).abs());
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let mad = v.iter().map(|x| (x - mean).abs()).sum::<f64>() / n;
            let s = axis_stats(&v);
            for (got, want) in [(s.average, mean), (s.variance, var), (s.stddev, var.sqrt()), (s.avg_abs_diff, mad)] {
                worst_stat = worst_stat.max((got - want).abs());
            }
        }
    }
    verdict(
        2,
        bin_mismatches == 0 && worst_stat <= 1e-12 && worst_sum <= 1e-9,
        &format!(
            "1000 windows: {bin_mismatches} bin mismatches, max stat deviation {worst_stat:.1e} <= 1e-12, max |sum(bins)-1| {worst_sum:.1e} <= 1e-9"
        ),
    );
}

// ---- 3. Wilks' lambda -------------------------------------------------------

#[test]
fn criterion_3_wilks_lambda() {
    let hand = wilks_manova(&MancovaInput {
        observations: vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
        groups: vec![0, 0, 1, 1],
        covariates: None,
    })
    .unwrap();
    let hand_ok = (hand.lambda - 0.2).abs() <= 1e-9
        && (hand.f_stat - 8.0).abs() <= 1e-9
        && hand.df1 == 1.0
        && hand.df2 == 2.0;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (na, nb) = (rng.random_range(3..30), rng.random_range(3..30));
        let d = Normal::new(0.0, rng.random_range(0.2..4.0)).unwrap();
        let shift = rng.random_range(-3.0..3.0);
        let a: Vec<f64> = (0..na).map(|_| d.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..nb).map(|_| shift + d.sample(&mut rng)).collect();
        let r = wilks_manova(&MancovaInput {
            observations: a.iter().chain(&b).map(|&v| vec![v]).collect(),
            groups: std::iter::repeat_n(0, na).chain(std::iter::repeat_n(1, nb)).collect(),
            covariates: None,
        })
        .unwrap();
        let ma = a.iter().sum::<f64>() / na as f64;
        let mb = b.iter().sum::<f64>() / nb as f64;
        let ss: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
        let sp2 = ss / (na + nb - 2) as f64;
        let t = (ma - mb) / (sp2 * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
        worst = worst.max((r.f_stat - t * t).abs() / (t * t).max(1.0));
    }
    verdict(
        3,
        hand_ok && worst <= 1e-9,
        &format!(
            "hand example lambda={:.12} F={:.12} df=({}, {}); 100 datasets max |F - t^2| (relative) {worst:.1e} <= 1e-9",
            hand.lambda, hand.f_stat, hand.df1, hand.df2
        ),
    );
}

// ---- 4. metric fixtures -----------------------------------------------------

#[test]
fn criterion_4_metric_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names = ActivityClass::names();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..250);
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..15)).collect();
        let p: Vec<usize> = t
            .iter()
            .map(|&c| if rng.random_bool(0.5) { c } else { rng.random_range(0..15) })
            .collect();
        let r = classification_report(&t, &p, &names).unwrap();
        let mut f1s = 0.0;
        for c in 0..15 {
            let tp = (0..n).filter(|&i| t[i] == c && p[i] == c).count();
            let fp = (0..n).filter(|&i| t[i] != c && p[i] == c).count();
            let fnn = (0..n).filter(|&i| t[i] == c && p[i] != c).count();
            let pr = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let re = if tp + fnn > 0 { tp as f64 / (tp + fnn) as f64 } else { 0.0 };
            let f1 = if pr + re > 0.0 { 2.0 * pr * re / (pr + re) } else { 0.0 };
            let m = &r.per_class[c];
            if (m.precision, m.recall, m.f1) != (pr, re, f1) {
                mismatches += 1;
            }
            f1s += f1;
        }
        if r.macro_f1 != f1s / 15.0 {
            mismatches += 1;
        }
    }

    let near = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let f1 = forecast_metrics(&[100.0], &[50.0]).unwrap();
    let f2 = forecast_metrics(&[0.01, 10.0], &[0.02, 10.0]).unwrap();
    let f0 = forecast_metrics_xyz(&[[1.0, 2.0, 3.0]], &[[1.0, 2.0, 3.0]]).unwrap();
    let fixtures_ok = near(f1.mape.unwrap(), 50.0)
        && near(f1.smape, 200.0 / 3.0)
        && near(f1.rmse, 50.0)
        && near(f1.mse, 2500.0)
        && near(f2.mape.unwrap(), 50.0)
        && near(f2.smape, 100.0 / 3.0)
        && (f0.rmse, f0.mse, f0.mape, f0.smape) == (0.0, 0.0, Some(0.0), 0.0);

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..100);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
        let m = forecast_metrics(&a, &f).unwrap();
        worst = worst.max((m.rmse * m.rmse - m.mse).abs());
    }
    verdict(
        4,
        mismatches == 0 && fixtures_ok && worst <= 1e-9,
        &format!(
            "1000 label vectors: {mismatches} mismatches vs counting oracle; fixtures {}; max |rmse^2 - mse| {worst:.1e} <= 1e-9",
            if fixtures_ok { "reproduced" } else { "NOT reproduced" }
        ),
    );
}

// ---- demo runs shared by 5 and 8 --------------------------------------------

struct DemoRun {
    _dir: tempfile::TempDir,
    out: PathBuf,
}

fn run_demo() -> DemoRun {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("demo");
    let status = Command::new(env!("CARGO_BIN_EXE_har-forge"))
        .args(["demo", "--seed", "7", "--out"])
        .arg(&out)
        .env("RUST_LOG", "warn")
        .status()
        .expect("spawn har-forge");
    assert!(status.success(), "demo exited with {status}");
    DemoRun { _dir: dir, out }
}

fn demo_runs() -> &'static (DemoRun, DemoRun) {
    static RUNS: OnceLock<(DemoRun, DemoRun)> = OnceLock::new();
    RUNS.get_or_init(|| (run_demo(), run_demo()))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const MIN_WINDOWS_PER_CLASS: u64 = 60;
const CNN_F1: f64 = 0.90;
const ALL_F1: f64 = 0.80;
const CNN_BUDGET_S: f64 = 300.0;

#[test]
fn criterion_5_synthetic_end_to_end() {
    let (run, _) = demo_runs();
    let manifest = read_json(&run.out.join("windows/watch_accel.manifest.json"));
    let min_class = manifest["per_class"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .min()
        .unwrap();
    let timings = read_json(&run.out.join("timings.json"));
    let cnn_time = timings["train/cnn"].as_f64().unwrap();
    let mut scores = Vec::new();
    for arch in Architecture::CLASSIFIERS {
        let result: ClassifierResult =
            serde_json::from_value(read_json(&run.out.join(format!("eval/{}.json", arch.slug())))).unwrap();
        scores.push((arch, result.report.macro_f1));
    }
    let tables_present = ["macro_f1", "precision_nonhand", "precision_hand", "forecast"]
        .iter()
        .all(|t| run.out.join(format!("tables/{t}.csv")).is_file())
        && run.out.join("report.md").is_file();
    let cnn = scores.iter().find(|(a, _)| *a == Architecture::Cnn).unwrap().1;
    let pass = min_class >= MIN_WINDOWS_PER_CLASS
        && cnn >= CNN_F1
        && cnn_time < CNN_BUDGET_S
        && scores.iter().all(|&(_, f)| f >= ALL_F1)
        && tables_present;
    let listing = scores
        .iter()
        .map(|(a, f)| format!("{a} {f:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        5,
        pass,
        &format!(
            ">= {min_class} windows/class; macro-F1 {listing} (CNN >= {CNN_F1}, all >= {ALL_F1}); CNN trained in {cnn_time:.0}s < {CNN_BUDGET_S}s; report tables {}",
            if tables_present { "written" } else { "missing" }
        ),
    );
}

// ---- 6. forecaster sanity ---------------------------------------------------

#[test]
fn criterion_6_forecaster_sanity() {
    let amplitude = 2.0;
    let series: Vec<[f64; 3]> = (0..4800)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / 20.0;
            [
                amplitude * theta.sin(),
                amplitude * (theta + 0.8).sin() + 1.0,
                amplitude * (theta + 1.6).sin() - 3.0,
            ]
        })
        .collect();
    let (context, actual) = forecast_split(&series, 600).unwrap();
    let config = ForecastConfig {
        max_epochs: 20,
        seed: 6,
        ..ForecastConfig::default()
    };
    let (model, _) = train_forecaster(context, &config).unwrap();
    let trained = forecast_metrics_xyz(actual, &model.rollout(context, 600).unwrap()).unwrap().rmse;
    let untrained_model = Forecaster::untrained_for(context, config.context_len, config.seed).unwrap();
    let untrained = forecast_metrics_xyz(actual, &untrained_model.rollout(context, 600).unwrap())
        .unwrap()
        .rmse;
    let limit = 0.15 * amplitude;
    verdict(
        6,
        trained <= limit && trained < untrained,
        &format!("600-step rollout RMSE {trained:.4} <= {limit:.2} (0.15 x amplitude) and < untrained {untrained:.4}"),
    );
}

// ---- 7. optional real-data reproduction ------------------------------------

fn wisdm_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("WISDM_RAW_DIR")?);
    dir.join("watch").join("accel").is_dir().then_some(dir)
}

fn forge(args: &[&str], work: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_har-forge"))
        .args(args)
        .current_dir(work)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success(), "har-forge {args:?} exited with {status}");
}

#[test]
fn criterion_7_real_data_reproduction() {
    let Some(raw) = wisdm_dir() else {
        println!("SKIP criterion 7: WISDM raw files not found (set WISDM_RAW_DIR)");
        return;
    };
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let raw = raw.to_str().unwrap();
    forge(&["ingest", "--device", "watch", "--sensor", "accel", "--in", raw, "--out", "watch_accel.csv"], w);
    forge(&["ingest", "--device", "phone", "--sensor", "accel", "--in", raw, "--out", "phone_accel.csv"], w);
    forge(&["featurize", "--in", "watch_accel.csv", "--out", "features.csv"], w);
    let ds = har_core::features::read_features_csv(std::fs::File::open(w.join("features.csv")).unwrap()).unwrap();
    let (tr, va, te) = split_dataset(&ds, SplitRatios::default(), 0).unwrap();
    // The published split sizes only apply when cleaning leaves 18310 rows.
    let split_ok = ds.len() != 18310 || (tr.len(), va.len(), te.len()) == (14648, 1831, 1831);
    forge(&["mancova", "--phone", "phone_accel.csv", "--watch", "watch_accel.csv", "--sensor", "accel", "--out", "mancova.json"], w);
    let p = read_json(&w.join("mancova.json"))["result"]["p_value"].as_f64().unwrap();
    forge(&["train", "--arch", "cnn", "--data", "features.csv", "--out", "cnn.json"], w);
    forge(&["evaluate", "--model", "cnn.json", "--data", "features.csv", "--out", "cnn_eval.json"], w);
    let f1 = read_json(&w.join("cnn_eval.json"))["report"]["macro_f1"].as_f64().unwrap();
    verdict(
        7,
        split_ok && (f1 - 0.849).abs() <= 0.05 && p < 0.05,
        &format!(
            "{} rows split {}/{}/{}; CNN macro-F1 {f1:.3} (0.849 +/- 0.05); phone-vs-watch p = {p:.2e} < 0.05",
            ds.len(),
            tr.len(),
            va.len(),
            te.len()
        ),
    );
}

// ---- 8. determinism ---------------------------------------------------------

#[test]
fn criterion_8_determinism() {
    let (a, b) = demo_runs();
    let hashes_a = std::fs::read_to_string(a.out.join("artifacts.sha256")).unwrap();
    let hashes_b = std::fs::read_to_string(b.out.join("artifacts.sha256")).unwrap();
    let mut history_diffs = Vec::new();
    for arch in Architecture::CLASSIFIERS {
        let rel = format!("models/{}.history.json", arch.slug());
        if read_json(&a.out.join(&rel))["history"] != read_json(&b.out.join(&rel))["history"] {
            history_diffs.push(arch.name());
        }
    }
    for code in ActivityCode::FORECAST_TARGETS {
        let rel = format!("forecast/{code}.metrics.json");
        if read_json(&a.out.join(&rel))["history"] != read_json(&b.out.join(&rel))["history"] {
            history_diffs.push("GRU forecaster");
        }
    }
    let differing: Vec<&str> = hashes_a
        .lines()
        .zip(hashes_b.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.split_whitespace().nth(1).unwrap_or(""))
        .collect();
    let n = hashes_a.lines().count();
    verdict(
        8,
        history_diffs.is_empty() && hashes_a == hashes_b && n > 0,
        &format!(
            "two demo runs: {n} artifact hashes, {} differ {:?}; training histories differing: {:?}",
            differing.len(),
            differing,
            history_diffs
        ),
    );
}
