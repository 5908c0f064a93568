//! Desk-scale synthetic stand-in for the WISDM download.
//!
//! Every class gets a parametric triaxial signature: a base oscillation
//! frequency, an amplitude, per-axis phase offsets, per-axis gravity-like DC
//! offsets, a second-harmonic ratio and white noise. Each synthetic subject
//! jitters frequency (±5 %), amplitude (±10 %) and offsets (σ = 0.3) so that
//! windows of one class are similar but not identical.
//!
//! | class     | freq Hz | amp  | phase y, z | offsets x, y, z   | harmonic | noise |
//! |-----------|---------|------|------------|-------------------|----------|-------|
//! | walking   | 1.8     | 4.0  | 0.8, 1.6   | 0.0, -9.0, 2.0    | 0.30     | 0.40  |
//! | jogging   | 2.8     | 9.0  | 0.5, 2.0   | 0.0, -8.0, 3.0    | 0.20     | 0.60  |
//! | stairs    | 1.4     | 3.0  | 1.2, 0.4   | 1.5, -8.5, 2.5    | 0.40     | 0.40  |
//! | sitting   | 0.3     | 0.5  | 0.0, 0.0   | 3.0, -2.0, 8.5    | 0.00     | 0.05  |
//! | standing  | 0.25    | 0.6  | 0.3, 0.6   | 0.0, -9.5, 1.0    | 0.00     | 0.05  |
//! | typing    | 4.0     | 0.6  | 1.0, 2.0   | 6.0, -1.0, 7.5    | 0.10     | 0.15  |
//! | brushing  | 3.5     | 3.0  | 1.5, 0.7   | -4.0, 5.0, 6.0    | 0.20     | 0.30  |
//! | eating    | 0.6     | 1.5  | 0.4, 1.1   | 4.0, 3.0, 7.0     | 0.40     | 0.25  |
//! | drinking  | 0.4     | 2.5  | 0.9, 0.2   | -2.0, 6.0, 5.0    | 0.30     | 0.25  |
//! | kicking   | 1.0     | 6.0  | 0.6, 1.8   | 2.0, -7.0, 4.0    | 0.50     | 0.50  |
//! | catch     | 0.8     | 5.0  | 1.3, 0.9   | -6.0, 2.0, 5.5    | 0.30     | 0.40  |
//! | dribbling | 1.6     | 7.0  | 0.2, 1.4   | -5.0, -4.0, 6.0   | 0.30     | 0.50  |
//! | writing   | 2.2     | 0.8  | 0.7, 1.5   | 5.0, 2.0, 8.0     | 0.20     | 0.15  |
//! | clapping  | 2.5     | 8.0  | 0.1, 0.3   | -7.0, 0.0, 5.0    | 0.40     | 0.60  |
//! | folding   | 0.5     | 2.0  | 1.1, 2.4   | 2.0, 4.0, 8.0     | 0.30     | 0.30  |
//!
//! The table describes the watch accelerometer (m/s²). The x, y and z axes
//! carry 1.0, 0.7 and 0.5 of the amplitude. Phone streams rotate the
//! offsets one axis (x, y, z from z, x, y) and scale amplitude by 0.8;
//! gyroscope streams scale amplitude by 0.35, offsets by 0.02 and noise by
//! 0.3 (rad/s).

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    ActivityClass, ActivityCode, Device, DeviceSensor, Sensor, SensorReading, SAMPLE_PERIOD_NS,
    SAMPLE_RATE_HZ,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSignature {
    pub class: ActivityClass,
    pub frequency_hz: f64,
    pub amplitude: f64,
    /// Phase offsets of the y and z axes relative to x, in radians.
    pub phase: [f64; 2],
    pub offsets: [f64; 3],
    pub harmonic: f64,
    pub noise: f64,
}

const fn sig(
    class: ActivityClass,
    frequency_hz: f64,
    amplitude: f64,
    phase: [f64; 2],
    offsets: [f64; 3],
    harmonic: f64,
    noise: f64,
) -> ClassSignature {
    ClassSignature {
        class,
        frequency_hz,
        amplitude,
        phase,
        offsets,
        harmonic,
        noise,
    }
}

/// Indexed by `ActivityClass::index()`.
pub const SIGNATURES: [ClassSignature; 15] = {
    use ActivityClass as C;
    [
        sig(C::Walking, 1.8, 4.0, [0.8, 1.6], [0.0, -9.0, 2.0], 0.3, 0.4),
        sig(C::Jogging, 2.8, 9.0, [0.5, 2.0], [0.0, -8.0, 3.0], 0.2, 0.6),
        sig(C::Stairs, 1.4, 3.0, [1.2, 0.4], [1.5, -8.5, 2.5], 0.4, 0.4),
        sig(C::Sitting, 0.3, 0.5, [0.0, 0.0], [3.0, -2.0, 8.5], 0.0, 0.05),
        sig(C::Standing, 0.25, 0.6, [0.3, 0.6], [0.0, -9.5, 1.0], 0.0, 0.05),
        sig(C::Typing, 4.0, 0.6, [1.0, 2.0], [6.0, -1.0, 7.5], 0.1, 0.15),
        sig(C::Brushing, 3.5, 3.0, [1.5, 0.7], [-4.0, 5.0, 6.0], 0.2, 0.3),
        sig(C::Eating, 0.6, 1.5, [0.4, 1.1], [4.0, 3.0, 7.0], 0.4, 0.25),
        sig(C::Drinking, 0.4, 2.5, [0.9, 0.2], [-2.0, 6.0, 5.0], 0.3, 0.25),
        sig(C::Kicking, 1.0, 6.0, [0.6, 1.8], [2.0, -7.0, 4.0], 0.5, 0.5),
        sig(C::Catch, 0.8, 5.0, [1.3, 0.9], [-6.0, 2.0, 5.5], 0.3, 0.4),
        sig(C::Dribbling, 1.6, 7.0, [0.2, 1.4], [-5.0, -4.0, 6.0], 0.3, 0.5),
        sig(C::Writing, 2.2, 0.8, [0.7, 1.5], [5.0, 2.0, 8.0], 0.2, 0.15),
        sig(C::Clapping, 2.5, 8.0, [0.1, 0.3], [-7.0, 0.0, 5.0], 0.4, 0.6),
        sig(C::Folding, 0.5, 2.0, [1.1, 2.4], [2.0, 4.0, 8.0], 0.3, 0.3),
    ]
};

/// Relative amplitude carried by the x, y and z axes.
pub const AXIS_WEIGHTS: [f64; 3] = [1.0, 0.7, 0.5];

impl ClassSignature {
    /// Signature as seen by a particular device-sensor stream.
    pub fn for_device(&self, ds: DeviceSensor) -> ClassSignature {
        let mut s = *self;
        if ds.device == Device::Phone {
            s.offsets = [self.offsets[2], self.offsets[0], self.offsets[1]];
            s.amplitude *= 0.8;
        }
        if ds.sensor == Sensor::Gyro {
            s.amplitude *= 0.35;
            s.offsets = s.offsets.map(|o| o * 0.02);
            s.noise *= 0.3;
        }
        s
    }

    /// Noise-free value of `axis` at time `t` seconds.
    pub fn clean_value(&self, axis: usize, t: f64, phase0: f64) -> f64 {
        let phase = phase0 + if axis == 0 { 0.0 } else { self.phase[axis - 1] };
        let theta = TAU * self.frequency_hz * t + phase;
        self.offsets[axis]
            + self.amplitude
                * AXIS_WEIGHTS[axis]
                * (theta.sin() + self.harmonic * (2.0 * theta + 0.5).sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub seed: u64,
    /// 3600 samples is 180 s at 20 Hz, the WISDM per-activity duration.
    pub samples_per_stream: usize,
    pub device_sensor: DeviceSensor,
}

impl SynthConfig {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            seed,
            samples_per_stream: 3600,
            device_sensor: DeviceSensor::new(Device::Watch, Sensor::Accel),
        }
    }
}

/// One subject performing one activity.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream {
    pub class: ActivityClass,
    pub activity: ActivityCode,
    pub subject_id: u32,
    /// Per-subject jittered signature the stream was drawn from.
    pub signature: ClassSignature,
    pub readings: Vec<SensorReading>,
}

fn class_code(class: ActivityClass, subject: usize) -> ActivityCode {
    use ActivityClass as C;
    use ActivityCode as A;
    match class {
        C::Walking => A::A,
        C::Jogging => A::B,
        C::Stairs => A::C,
        C::Sitting => A::D,
        C::Standing => A::E,
        C::Typing => A::F,
        C::Brushing => A::G,
        C::Eating => [A::H, A::I, A::J, A::L][subject % 4],
        C::Drinking => A::K,
        C::Kicking => A::M,
        C::Catch => A::O,
        C::Dribbling => A::P,
        C::Writing => A::Q,
        C::Clapping => A::R,
        C::Folding => A::S,
    }
}

fn stream_seed(seed: u64, ds: DeviceSensor, class: usize, subject: usize) -> u64 {
    // splitmix64 finalizer over the stream coordinates
    let dev = DeviceSensor::ALL.iter().position(|d| *d == ds).unwrap_or(0) as u64;
    let mut z = seed
        ^ (dev << 56)
        ^ ((class as u64) << 40)
        ^ (subject as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `n_per_class` streams for each of the 15 classes. Output is a
/// pure function of the config. Subject `j` has id `1600 + j`; eating
/// streams rotate through codes H, I, J and L.
pub fn synthesize_dataset(config: &SynthConfig) -> Vec<SyntheticStream> {
    let mut streams = Vec::with_capacity(config.n_per_class * ActivityClass::COUNT);
    for subject in 0..config.n_per_class {
        for class in ActivityClass::ALL {
            let mut rng =
                ChaCha8Rng::seed_from_u64(stream_seed(config.seed, config.device_sensor, class.index(), subject));
            let base = SIGNATURES[class.index()].for_device(config.device_sensor);
            let mut signature = base;
            signature.frequency_hz *= rng.random_range(0.95..1.05);
            signature.amplitude *= rng.random_range(0.9..1.1);
            let offset_jitter = Normal::new(0.0, 0.3).expect("valid sigma");
            let scale = if config.device_sensor.sensor == Sensor::Gyro { 0.02 } else { 1.0 };
            for o in signature.offsets.iter_mut() {
                *o += scale * offset_jitter.sample(&mut rng);
            }
            let phase0 = rng.random_range(0.0..TAU);
            let noise = Normal::new(0.0, signature.noise.max(1e-12)).expect("valid sigma");
            let activity = class_code(class, subject);
            let subject_id = 1600 + subject as u32;
            let t0 = 1_000_000_000_000 * (subject as i64 + 1) + 600_000_000_000 * class.index() as i64;
            let readings = (0..config.samples_per_stream)
                .map(|i| {
                    let t = i as f64 / SAMPLE_RATE_HZ;
                    let mut v = [0.0; 3];
                    for (axis, slot) in v.iter_mut().enumerate() {
                        *slot = signature.clean_value(axis, t, phase0) + noise.sample(&mut rng);
                    }
                    SensorReading {
                        subject_id,
                        activity,
                        timestamp: t0 + i as i64 * SAMPLE_PERIOD_NS,
                        x: v[0],
                        y: v[1],
                        z: v[2],
                    }
                })
                .collect();
            streams.push(SyntheticStream {
                class,
                activity,
                subject_id,
                signature,
                readings,
            });
        }
    }
    streams
}

/// Writes streams as WISDM raw files, one per subject:
/// `data_<subject>_<sensor>_<device>.txt`. Returns the written paths.
pub fn write_wisdm_files(
    streams: &[SyntheticStream],
    dir: &Path,
    ds: DeviceSensor,
) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut subjects: Vec<u32> = streams.iter().map(|s| s.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let mut paths = Vec::new();
    for subject in subjects {
        let path = dir.join(format!(
            "data_{subject}_{}_{}.txt",
            ds.sensor.as_str(),
            ds.device.as_str()
        ));
        let mut out = BufWriter::new(fs::File::create(&path)?);
        for stream in streams.iter().filter(|s| s.subject_id == subject) {
            for r in &stream.readings {
                writeln!(out, "{}", r.to_raw_line())?;
            }
        }
        out.flush()?;
        paths.push(path);
    }
    Ok(paths)
}
