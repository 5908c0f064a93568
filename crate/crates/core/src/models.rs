//! The four activity classifiers, the GRU forecaster and the training loop.
//!
//! Feature rows are fed to every stack as a sequence: with `c` concatenated
//! sensor sources of `n` features each, a row becomes `n` steps of `c`
//! channels, step `t` carrying feature `t` of every source.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ActivityClass, LabeledDataset};
use crate::features::{FeatureError, MinMaxScaler, ScalerParams, N_FEATURES};
use crate::nncore::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, AdamState, LayerSpec, Loss, Mode, Network, NnError,
    Tensor,
};

pub const N_CLASSES: usize = ActivityClass::COUNT;
pub const BATCH_SIZE: usize = 32;
pub const STOP_TOLERANCE: f64 = 0.01;
pub const WARMUP_EPOCHS: usize = 5;
/// Forecast horizon: 30 s at 20 Hz.
pub const FORECAST_HORIZON: usize = 600;
/// Context preceding the horizon: 210 s at 20 Hz.
pub const FORECAST_HISTORY: usize = 4200;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("no {0} data")]
    EmptyData(&'static str),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, history: Box<TrainHistory> },
    #[error("checkpoint is not a {0}")]
    WrongCheckpoint(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Lstm,
    BiLstm,
    ConvLstm,
    Cnn,
    Gru,
}

impl Architecture {
    pub const CLASSIFIERS: [Architecture; 4] = [Self::Lstm, Self::BiLstm, Self::ConvLstm, Self::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lstm => "LSTM",
            Self::BiLstm => "BiLSTM",
            Self::ConvLstm => "ConvLSTM",
            Self::Cnn => "CNN",
            Self::Gru => "GRU-Forecaster",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Self::Lstm => "lstm",
            Self::BiLstm => "bilstm",
            Self::ConvLstm => "convlstm",
            Self::Cnn => "cnn",
            Self::Gru => "gru",
        }
    }

    pub fn default_max_epochs(self) -> usize {
        match self {
            Self::Lstm | Self::BiLstm => 226,
            Self::ConvLstm => 95,
            Self::Cnn => 148,
            Self::Gru => 60,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(Self::Lstm),
            "bilstm" => Ok(Self::BiLstm),
            "convlstm" => Ok(Self::ConvLstm),
            "cnn" => Ok(Self::Cnn),
            "gru" | "gru-forecaster" => Ok(Self::Gru),
            _ => Err(ModelError::InvalidSpec(format!("unknown architecture {s:?}"))),
        }
    }
}

/// Layer widths shared by the classifier stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSize {
    pub recurrent_units: usize,
    pub conv_filters: usize,
    pub cnn_kernel: usize,
    pub convlstm_kernel: usize,
    pub dense_wide: usize,
    pub dense_mid: usize,
    pub dense_narrow: usize,
    pub classes: usize,
}

impl StackSize {
    pub const FULL: StackSize = StackSize {
        recurrent_units: 128,
        conv_filters: 128,
        cnn_kernel: 10,
        convlstm_kernel: 4,
        dense_wide: 100,
        dense_mid: 64,
        dense_narrow: 32,
        classes: N_CLASSES,
    };

    /// A miniature of [`StackSize::FULL`] for gradient checks on short sequences.
    pub const TINY: StackSize = StackSize {
        recurrent_units: 4,
        conv_filters: 4,
        cnn_kernel: 2,
        convlstm_kernel: 2,
        dense_wide: 6,
        dense_mid: 5,
        dense_narrow: 4,
        classes: N_CLASSES,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub max_epochs: usize,
    pub batch_size: usize,
}

fn dense_relu(units: usize) -> [LayerSpec; 2] {
    [LayerSpec::Dense { units }, LayerSpec::Relu]
}

fn classifier_head(layers: &mut Vec<LayerSpec>, classes: usize) {
    layers.push(LayerSpec::Dense { units: classes });
    layers.push(LayerSpec::Softmax);
}

/// Builds a classifier stack for `[steps, channels]` inputs.
pub fn classifier_spec(arch: Architecture, size: &StackSize, input_shape: [usize; 2]) -> ModelSpec {
    let s = size;
    let mut layers = Vec::new();
    match arch {
        Architecture::Lstm | Architecture::BiLstm => {
            layers.push(if arch == Architecture::Lstm {
                LayerSpec::lstm(s.recurrent_units)
            } else {
                LayerSpec::bilstm(s.recurrent_units)
            });
            layers.push(LayerSpec::Dropout { rate: 0.3 });
            layers.extend(dense_relu(s.dense_mid));
            layers.push(LayerSpec::Dropout { rate: 0.2 });
            layers.extend(dense_relu(s.dense_mid));
            layers.extend(dense_relu(s.dense_narrow));
        }
        Architecture::ConvLstm => {
            layers.push(LayerSpec::Conv1d {
                filters: s.conv_filters,
                kernel_size: s.convlstm_kernel,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Dropout { rate: 0.4 });
            layers.push(LayerSpec::lstm(s.recurrent_units));
            layers.extend(dense_relu(s.dense_wide));
            layers.extend(dense_relu(s.dense_mid));
            layers.push(LayerSpec::Dropout { rate: 0.2 });
            layers.extend(dense_relu(s.dense_narrow));
        }
        Architecture::Cnn => {
            let conv = LayerSpec::Conv1d {
                filters: s.conv_filters,
                kernel_size: s.cnn_kernel,
            };
            layers.push(conv.clone());
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Dropout { rate: 0.4 });
            layers.push(conv);
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Dropout { rate: 0.2 });
            layers.push(LayerSpec::MaxPool1d { pool_size: 2 });
            layers.push(LayerSpec::Flatten);
            layers.extend(dense_relu(s.dense_mid));
        }
        Architecture::Gru => return build_gru_forecaster(input_shape[0]),
    }
    classifier_head(&mut layers, s.classes);
    ModelSpec {
        arch,
        layers,
        input_shape: input_shape.to_vec(),
        max_epochs: arch.default_max_epochs(),
        batch_size: BATCH_SIZE,
    }
}

pub fn build_lstm() -> ModelSpec {
    classifier_spec(Architecture::Lstm, &StackSize::FULL, [N_FEATURES, 1])
}

pub fn build_bilstm() -> ModelSpec {
    classifier_spec(Architecture::BiLstm, &StackSize::FULL, [N_FEATURES, 1])
}

pub fn build_convlstm() -> ModelSpec {
    classifier_spec(Architecture::ConvLstm, &StackSize::FULL, [N_FEATURES, 1])
}

pub fn build_cnn() -> ModelSpec {
    classifier_spec(Architecture::Cnn, &StackSize::FULL, [N_FEATURES, 1])
}

pub const FORECASTER_UNITS: usize = 64;

/// `GRU(64) -> Dense(3)` over a window of `context_len` tri-axial samples.
pub fn build_gru_forecaster(context_len: usize) -> ModelSpec {
    ModelSpec {
        arch: Architecture::Gru,
        layers: vec![LayerSpec::gru(FORECASTER_UNITS), LayerSpec::Dense { units: 3 }],
        input_shape: vec![context_len, 3],
        max_epochs: Architecture::Gru.default_max_epochs(),
        batch_size: BATCH_SIZE,
    }
}

impl ModelSpec {
    /// Checks the whole shape chain and the output head. Returns every
    /// intermediate per-sample shape.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let chain = Network::shape_chain(&self.input_shape, &self.layers)
            .map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(ModelError::InvalidSpec("batch size and epoch budget must be positive".into()));
        }
        let n = self.layers.len();
        if self.arch != Architecture::Gru {
            let head_ok = n >= 2
                && matches!(self.layers[n - 1], LayerSpec::Softmax)
                && matches!(self.layers[n - 2], LayerSpec::Dense { .. });
            if !head_ok {
                return Err(ModelError::InvalidSpec(format!(
                    "{} must end in Dense + Softmax",
                    self.arch
                )));
            }
        }
        Ok(chain)
    }

    pub fn param_count(&self) -> Result<usize, ModelError> {
        let chain = self.validate()?;
        let mut total = 0;
        for (spec, input) in self.layers.iter().zip(&chain) {
            total += spec
                .param_shapes(input)?
                .iter()
                .map(|s| s.iter().product::<usize>())
                .sum::<usize>();
        }
        Ok(total)
    }

    pub fn loss(&self) -> Loss {
        if self.arch == Architecture::Gru {
            Loss::MeanSquaredError
        } else {
            Loss::CategoricalCrossEntropy
        }
    }

    pub fn instantiate(&self, seed: u64) -> Result<Network, ModelError> {
        self.validate()?;
        Ok(Network::new(&self.input_shape, &self.layers, seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub stop_tolerance: f64,
    pub warmup_epochs: usize,
    /// Whether the train/validation loss-gap rule may end training early.
    pub stop_rule: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_spec(spec: &ModelSpec, seed: u64) -> Self {
        Self {
            max_epochs: spec.max_epochs,
            batch_size: spec.batch_size,
            stop_tolerance: STOP_TOLERANCE,
            warmup_epochs: WARMUP_EPOCHS,
            stop_rule: true,
            adam: AdamConfig::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ConvergedRule,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
}

fn gather(x: &Tensor, idx: &[usize]) -> Tensor {
    let per = x.len() / x.dim(0);
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered rows match shape")
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(output: &Tensor, targets: &Tensor) -> usize {
    let k = output.len() / output.dim(0);
    output
        .rows(k)
        .zip(targets.rows(k))
        .filter(|(o, t)| argmax(o) == argmax(t))
        .count()
}

fn predict_chunked(net: &Network, x: &Tensor) -> Result<Tensor, NnError> {
    let n = x.dim(0);
    if n <= EVAL_CHUNK {
        return net.predict(x);
    }
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let out = net.predict(&gather(x, &idx))?;
        shape = out.shape().to_vec();
        data.extend_from_slice(out.data());
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Mini-batch Adam on `(x, y)` with per-epoch shuffling, recording
/// Keras-style running training metrics and inference-mode validation metrics.
pub fn fit(
    net: &mut Network,
    loss: Loss,
    train: (&Tensor, &Tensor),
    val: (&Tensor, &Tensor),
    config: &TrainConfig,
) -> Result<TrainHistory, ModelError> {
    let (x, y) = train;
    let n = x.dim(0);
    if n == 0 {
        return Err(ModelError::EmptyData("training"));
    }
    if val.0.dim(0) == 0 {
        return Err(ModelError::EmptyData("validation"));
    }
    if config.batch_size == 0 {
        return Err(ModelError::InvalidSpec("batch size must be positive".into()));
    }
    let classify = loss == Loss::CategoricalCrossEntropy;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4531);
    let mut adam = AdamState::new(config.adam, net.params());
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let (bx, by) = (gather(x, batch), gather(y, batch));
            let g = net.loss_and_grads(&bx, &by, loss, &mut Mode::Train(&mut rng))?;
            if !g.loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    history: Box::new(TrainHistory {
                        epochs,
                        stop_epoch: epoch,
                        stop_reason: StopReason::MaxEpochs,
                    }),
                });
            }
            loss_sum += g.loss * batch.len() as f64;
            if classify {
                hits += correct(&g.output, &by);
            }
            adam_step(&mut net.params_mut(), &g.params, &mut adam)?;
        }
        let out = predict_chunked(net, val.0)?;
        let (val_loss, _) = loss.evaluate(&out, val.1)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss,
            train_acc: classify.then(|| hits as f64 / n as f64),
            val_acc: classify.then(|| correct(&out, val.1) as f64 / val.0.dim(0) as f64),
        };
        log::debug!(
            "epoch {epoch}: train {:.4} val {:.4}",
            record.train_loss,
            record.val_loss
        );
        if !record.val_loss.is_finite() {
            epochs.push(record);
            return Err(ModelError::NonFiniteLoss {
                epoch,
                history: Box::new(TrainHistory {
                    epochs,
                    stop_epoch: epoch,
                    stop_reason: StopReason::MaxEpochs,
                }),
            });
        }
        let converged = config.stop_rule
            && epoch > config.warmup_epochs
            && (record.train_loss - record.val_loss).abs() < config.stop_tolerance;
        epochs.push(record);
        if converged {
            return Ok(TrainHistory {
                epochs,
                stop_epoch: epoch,
                stop_reason: StopReason::ConvergedRule,
            });
        }
    }
    Ok(TrainHistory {
        stop_epoch: epochs.len(),
        epochs,
        stop_reason: StopReason::MaxEpochs,
    })
}

/// Number of sensor sources whose features are concatenated in each row.
pub fn channels_of(dataset: &LabeledDataset) -> usize {
    dataset.sources.len().max(1)
}

/// Reshapes feature rows into a `[rows, steps, channels]` tensor.
pub fn rows_to_tensor<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    channels: usize,
) -> Result<Tensor, ModelError> {
    let mut data = Vec::new();
    let mut width = None;
    let mut count = 0;
    for row in rows {
        let w = *width.get_or_insert(row.len());
        if row.len() != w || w == 0 || w % channels != 0 {
            return Err(ModelError::Feature(FeatureError::ShapeMismatch {
                expected: w,
                got: row.len(),
            }));
        }
        let steps = w / channels;
        for t in 0..steps {
            for s in 0..channels {
                data.push(row[s * steps + t]);
            }
        }
        count += 1;
    }
    let steps = width.unwrap_or(channels) / channels;
    Ok(Tensor::new(vec![count, steps, channels], data)?)
}

fn one_hot(dataset: &LabeledDataset, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[dataset.len(), classes]);
    for (i, r) in dataset.rows.iter().enumerate() {
        t.data_mut()[i * classes + r.class.index()] = 1.0;
    }
    t
}

fn dataset_tensors(dataset: &LabeledDataset, classes: usize) -> Result<(Tensor, Tensor), ModelError> {
    let x = rows_to_tensor(dataset.rows.iter().map(|r| r.features.as_slice()), channels_of(dataset))?;
    Ok((x, one_hot(dataset, classes)))
}

/// A trained classifier bundled with the scaler it was trained behind.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub network: Network,
    pub scaler: ScalerParams,
    pub feature_names: Vec<String>,
    pub channels: usize,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct ClassifierExtra {
    spec: ModelSpec,
    scaler: ScalerParams,
    feature_names: Vec<String>,
    channels: usize,
}

/// Fits the scaler on `train`, trains `spec` and returns the model at the stopping epoch.
pub fn train(
    spec: &ModelSpec,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(TrainedModel, TrainHistory), ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyData("training"));
    }
    let channels = channels_of(train);
    let steps = train.feature_names.len() / channels;
    if spec.input_shape != [steps, channels] {
        return Err(ModelError::InvalidSpec(format!(
            "spec expects input {:?}, data is [{steps}, {channels}]",
            spec.input_shape
        )));
    }
    let mut scaler = MinMaxScaler::new();
    scaler.fit(train.rows.iter().map(|r| r.features.as_slice()));
    let train_s = scaler.transform_dataset(train)?;
    let val_s = scaler.transform_dataset(val)?;
    let classes = match spec.layers.iter().rev().find_map(|l| match l {
        LayerSpec::Dense { units } => Some(*units),
        _ => None,
    }) {
        Some(k) => k,
        None => return Err(ModelError::InvalidSpec("no output layer".into())),
    };
    let (x, y) = dataset_tensors(&train_s, classes)?;
    let (xv, yv) = dataset_tensors(&val_s, classes)?;
    let mut network = spec.instantiate(config.seed)?;
    let history = fit(&mut network, spec.loss(), (&x, &y), (&xv, &yv), config)?;
    let model = TrainedModel {
        spec: spec.clone(),
        network,
        scaler: scaler.params().cloned().ok_or(FeatureError::NotFitted)?,
        feature_names: train.feature_names.clone(),
        channels,
        seed: config.seed,
        epoch: history.stop_epoch,
    };
    Ok((model, history))
}

impl TrainedModel {
    /// Class distributions for already-scaled feature rows, one row of
    /// `classes` probabilities per input row.
    pub fn predict(&self, scaled_rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
        if scaled_rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = rows_to_tensor(scaled_rows.iter().map(Vec::as_slice), self.channels)?;
        let out = predict_chunked(&self.network, &x)?;
        let k = out.len() / out.dim(0);
        Ok(out.rows(k).map(<[f64]>::to_vec).collect())
    }

    /// Arg-max class per scaled row; ties go to the lowest index.
    pub fn classify(&self, scaled_rows: &[Vec<f64>]) -> Result<Vec<usize>, ModelError> {
        Ok(self.predict(scaled_rows)?.iter().map(|p| argmax(p)).collect())
    }

    pub fn scale(&self, raw_rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let scaler = MinMaxScaler::from_params(self.scaler.clone());
        Ok(raw_rows
            .iter()
            .map(|r| scaler.transform(r))
            .collect::<Result<_, _>>()?)
    }

    /// Scales unscaled rows with the model's own scaler, then classifies.
    pub fn classify_raw(&self, raw_rows: &[Vec<f64>]) -> Result<Vec<usize>, ModelError> {
        self.classify(&self.scale(raw_rows)?)
    }

    /// Classifies every row of an unscaled dataset.
    pub fn classify_dataset(&self, dataset: &LabeledDataset) -> Result<Vec<usize>, ModelError> {
        if dataset.feature_names != self.feature_names {
            return Err(ModelError::InvalidSpec(
                "dataset columns differ from the training columns".into(),
            ));
        }
        let raw: Vec<Vec<f64>> = dataset.rows.iter().map(|r| r.features.clone()).collect();
        self.classify_raw(&raw)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let extra = ClassifierExtra {
            spec: self.spec.clone(),
            scaler: self.scaler.clone(),
            feature_names: self.feature_names.clone(),
            channels: self.channels,
        };
        save_checkpoint(
            &self.network,
            path,
            self.seed,
            self.epoch,
            serde_json::to_value(extra).map_err(NnError::from)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (network, manifest) = load_checkpoint(path)?;
        let extra: ClassifierExtra =
            serde_json::from_value(manifest.extra).map_err(|_| ModelError::WrongCheckpoint("classifier"))?;
        Ok(Self {
            spec: extra.spec,
            network,
            scaler: extra.scaler,
            feature_names: extra.feature_names,
            channels: extra.channels,
            seed: manifest.seed,
            epoch: manifest.epoch,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Samples the model sees before predicting the next one.
    pub context_len: usize,
    /// Spacing between consecutive training contexts.
    pub stride: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Fraction of the (chronologically last) training pairs held out for validation.
    pub val_fraction: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            context_len: 20,
            stride: 1,
            max_epochs: Architecture::Gru.default_max_epochs(),
            batch_size: BATCH_SIZE,
            val_fraction: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Next-sample GRU predictor over z-scored tri-axial samples.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub network: Network,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub context_len: usize,
}

#[derive(Serialize, Deserialize)]
struct ForecasterExtra {
    mean: [f64; 3],
    std: [f64; 3],
    context_len: usize,
}

fn axis_moments(series: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let n = series.len() as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for a in 0..3 {
        mean[a] = series.iter().map(|s| s[a]).sum::<f64>() / n;
        let var = series.iter().map(|s| (s[a] - mean[a]).powi(2)).sum::<f64>() / n;
        std[a] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    (mean, std)
}

impl Forecaster {
    /// Untrained forecaster with identity normalization.
    pub fn untrained(context_len: usize, seed: u64) -> Result<Self, ModelError> {
        Ok(Self {
            network: build_gru_forecaster(context_len).instantiate(seed)?,
            mean: [0.0; 3],
            std: [1.0; 3],
            context_len,
        })
    }

    /// Same network, but with normalization statistics taken from `series`.
    pub fn untrained_for(series: &[[f64; 3]], context_len: usize, seed: u64) -> Result<Self, ModelError> {
        let (mean, std) = axis_moments(series);
        Ok(Self {
            mean,
            std,
            ..Self::untrained(context_len, seed)?
        })
    }

    fn normalize(&self, s: &[f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (s[a] - self.mean[a]) / self.std[a])
    }

    fn denormalize(&self, s: &[f64]) -> [f64; 3] {
        [0, 1, 2].map(|a| s[a] * self.std[a] + self.mean[a])
    }

    /// Free-running forecast of `steps` samples after `context`, feeding
    /// each prediction back as input.
    pub fn rollout(&self, context: &[[f64; 3]], steps: usize) -> Result<Vec<[f64; 3]>, ModelError> {
        if context.len() < self.context_len {
            return Err(ModelError::InvalidSpec(format!(
                "context of {} samples, need {}",
                context.len(),
                self.context_len
            )));
        }
        let mut window: Vec<f64> = context[context.len() - self.context_len..]
            .iter()
            .flat_map(|s| self.normalize(s))
            .collect();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let x = Tensor::new(vec![1, self.context_len, 3], window.clone())?;
            let y = self.network.predict(&x)?;
            out.push(self.denormalize(y.data()));
            window.drain(..3);
            window.extend_from_slice(y.data());
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, seed: u64, epoch: usize) -> Result<(), ModelError> {
        let extra = ForecasterExtra {
            mean: self.mean,
            std: self.std,
            context_len: self.context_len,
        };
        save_checkpoint(&self.network, path, seed, epoch, serde_json::to_value(extra).map_err(NnError::from)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (network, manifest) = load_checkpoint(path)?;
        let extra: ForecasterExtra =
            serde_json::from_value(manifest.extra).map_err(|_| ModelError::WrongCheckpoint("forecaster"))?;
        Ok(Self {
            network,
            mean: extra.mean,
            std: extra.std,
            context_len: extra.context_len,
        })
    }
}

/// Teacher-forced training on `(context, next sample)` pairs cut from `series`.
pub fn train_forecaster(series: &[[f64; 3]], config: &ForecastConfig) -> Result<(Forecaster, TrainHistory), ModelError> {
    let ctx = config.context_len;
    if ctx == 0 || config.stride == 0 {
        return Err(ModelError::InvalidSpec("context length and stride must be positive".into()));
    }
    if series.len() < ctx + 2 {
        return Err(ModelError::EmptyData("forecast training"));
    }
    let mut model = Forecaster::untrained_for(series, ctx, config.seed)?;
    let norm: Vec<[f64; 3]> = series.iter().map(|s| model.normalize(s)).collect();
    let starts: Vec<usize> = (0..norm.len() - ctx).step_by(config.stride).collect();
    let n_val = ((starts.len() as f64 * config.val_fraction).round() as usize).clamp(1, starts.len() - 1);
    let (train_starts, val_starts) = starts.split_at(starts.len() - n_val);
    let pairs = |st: &[usize]| -> Result<(Tensor, Tensor), NnError> {
        let mut x = Vec::with_capacity(st.len() * ctx * 3);
        let mut y = Vec::with_capacity(st.len() * 3);
        for &s in st {
            x.extend(norm[s..s + ctx].iter().flatten());
            y.extend_from_slice(&norm[s + ctx]);
        }
        Ok((Tensor::new(vec![st.len(), ctx, 3], x)?, Tensor::new(vec![st.len(), 3], y)?))
    };
    let (x, y) = pairs(train_starts)?;
    let (xv, yv) = pairs(val_starts)?;
    let train_config = TrainConfig {
        max_epochs: config.max_epochs,
        batch_size: config.batch_size,
        stop_tolerance: STOP_TOLERANCE,
        warmup_epochs: WARMUP_EPOCHS,
        stop_rule: false,
        adam: config.adam,
        seed: config.seed,
    };
    let history = fit(&mut model.network, Loss::MeanSquaredError, (&x, &y), (&xv, &yv), &train_config)?;
    Ok((model, history))
}

/// Splits a stream into the forecasting context and the held-out horizon.
/// Streams shorter than history + horizon keep every sample before the horizon.
pub fn forecast_split(series: &[[f64; 3]], horizon: usize) -> Option<(&[[f64; 3]], &[[f64; 3]])> {
    if series.len() <= horizon {
        return None;
    }
    let cut = series.len() - horizon;
    let start = cut.saturating_sub(FORECAST_HISTORY);
    Some((&series[start..cut], &series[cut..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Device, DeviceSensor, LabeledRow, Provenance, RowKey, Sensor, ActivityCode};

    fn lstm_layer(c: usize, h: usize) -> usize {
        4 * (c + h + 1) * h
    }

    fn dense(i: usize, o: usize) -> usize {
        i * o + o
    }

    #[test]
    fn parameter_counts_match_closed_forms() {
        let head = dense(64, 64) + dense(64, 32) + dense(32, 15);
        assert_eq!(build_lstm().param_count().unwrap(), lstm_layer(1, 128) + dense(128, 64) + head);
        assert_eq!(lstm_layer(1, 128), 4 * (1 + 128 + 1) * 128);
        assert_eq!(
            build_bilstm().param_count().unwrap(),
            2 * lstm_layer(1, 128) + dense(256, 64) + head
        );
        assert_eq!(
            build_convlstm().param_count().unwrap(),
            (4 * 128 + 128) + lstm_layer(128, 128) + dense(128, 100) + dense(100, 64) + dense(64, 32) + dense(32, 15)
        );
        assert_eq!(
            build_cnn().param_count().unwrap(),
            (10 * 128 + 128) + (10 * 128 * 128 + 128) + dense(1664, 64) + dense(64, 15)
        );
        assert_eq!(build_gru_forecaster(20).param_count().unwrap(), 3 * (3 + 64 + 1) * 64 + dense(64, 3));
    }

    #[test]
    fn shape_chains() {
        let chain = build_cnn().validate().unwrap();
        let lens: Vec<usize> = chain.iter().filter(|s| s.len() == 2).map(|s| s[0]).collect();
        assert_eq!(lens, vec![45, 36, 36, 36, 27, 27, 27, 13]);
        assert!(chain.contains(&vec![1664]));
        let chain = build_convlstm().validate().unwrap();
        assert_eq!(chain[1], vec![42, 128]);
        assert_eq!(build_bilstm().validate().unwrap()[1], vec![256]);
        assert_eq!(chain.last().unwrap(), &vec![15]);
    }

    #[test]
    fn epoch_budgets() {
        assert_eq!(build_lstm().max_epochs, 226);
        assert_eq!(build_bilstm().max_epochs, 226);
        assert_eq!(build_convlstm().max_epochs, 95);
        assert_eq!(build_cnn().max_epochs, 148);
        assert!(Architecture::CLASSIFIERS.iter().all(|a| classifier_spec(*a, &StackSize::FULL, [45, 1]).batch_size == 32));
    }

    #[test]
    fn broken_specs_fail_fast() {
        let mut spec = build_lstm();
        spec.layers.pop();
        assert!(matches!(spec.validate(), Err(ModelError::InvalidSpec(_))));
        let spec = classifier_spec(Architecture::Cnn, &StackSize::FULL, [12, 1]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn untrained_stacks_emit_distributions() {
        for arch in Architecture::CLASSIFIERS {
            let spec = classifier_spec(arch, &StackSize::TINY, [8, 1]);
            let net = spec.instantiate(3).unwrap();
            let x = Tensor::new(vec![2, 8, 1], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
            let y = net.predict(&x).unwrap();
            assert_eq!(y.shape(), &[2, 15]);
            for row in y.rows(15) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_interleave_sources_into_channels() {
        let rows = [vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]];
        let t = rows_to_tensor(rows.iter().map(Vec::as_slice), 2).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2]);
        assert_eq!(t.data(), &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
        assert!(rows_to_tensor(rows.iter().map(Vec::as_slice), 4).is_err());
    }

    #[test]
    fn zero_forecaster_predicts_zero() {
        let mut f = Forecaster::untrained(5, 0).unwrap();
        for p in f.network.params_mut() {
            p.data_mut().fill(0.0);
        }
        let ctx = vec![[1.0, -2.0, 3.0]; 8];
        let out = f.rollout(&ctx, 600).unwrap();
        assert_eq!(out.len(), FORECAST_HORIZON);
        assert!(out.iter().all(|s| *s == [0.0; 3]));
    }

    #[test]
    fn forecast_split_caps_history() {
        let s = vec![[0.0; 3]; 5000];
        let (ctx, hz) = forecast_split(&s, 600).unwrap();
        assert_eq!((ctx.len(), hz.len()), (4200, 600));
        let short = vec![[0.0; 3]; 3600];
        let (ctx, _) = forecast_split(&short, 600).unwrap();
        assert_eq!(ctx.len(), 3000);
        assert!(forecast_split(&short[..600], 600).is_none());
    }

    fn toy(n: usize, seed: u64) -> LabeledDataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|i| {
                let class = if i % 2 == 0 { ActivityClass::Walking } else { ActivityClass::Jogging };
                let shift = if i % 2 == 0 { -1.0 } else { 1.0 };
                LabeledRow {
                    key: RowKey {
                        subject_id: 1,
                        activity: ActivityCode::A,
                        window: i,
                    },
                    features: (0..4).map(|_| shift + rng.random_range(-0.5..0.5)).collect(),
                    class,
                }
            })
            .collect();
        LabeledDataset {
            feature_names: (0..4).map(|i| format!("f{i}")).collect(),
            rows,
            provenance: Provenance::Synthetic,
            sources: vec![DeviceSensor::new(Device::Watch, Sensor::Accel)],
        }
    }

    fn toy_spec() -> ModelSpec {
        ModelSpec {
            arch: Architecture::Lstm,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 6 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 15 },
                LayerSpec::Softmax,
            ],
            input_shape: vec![4, 1],
            max_epochs: 50,
            batch_size: 32,
        }
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let (tr, va) = (toy(200, 1), toy(40, 2));
        let mut cfg = TrainConfig::for_spec(&toy_spec(), 9);
        cfg.stop_rule = false;
        cfg.adam.lr = 0.01;
        let (model, hist) = train(&toy_spec(), &tr, &va, &cfg).unwrap();
        assert_eq!(hist.stop_reason, StopReason::MaxEpochs);
        assert_eq!(hist.epochs.last().unwrap().train_acc, Some(1.0));
        let first: f64 = hist.epochs[0].train_loss;
        assert!(hist.epochs[4].train_loss <= first);
        let preds = model.classify_dataset(&va).unwrap();
        let acc = preds
            .iter()
            .zip(&va.rows)
            .filter(|(p, r)| **p == r.class.index())
            .count();
        assert_eq!(acc, va.len());
    }

    #[test]
    fn training_is_deterministic_and_rule_fires_on_identical_sets() {
        let tr = toy(64, 3);
        let cfg = TrainConfig::for_spec(&toy_spec(), 4);
        let (_, h1) = train(&toy_spec(), &tr, &tr, &cfg).unwrap();
        let (_, h2) = train(&toy_spec(), &tr, &tr, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.stop_reason, StopReason::ConvergedRule);
        assert!(h1.stop_epoch <= WARMUP_EPOCHS + 3, "stopped at {}", h1.stop_epoch);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let tr = toy(64, 5);
        let mut cfg = TrainConfig::for_spec(&toy_spec(), 1);
        cfg.max_epochs = 3;
        let (model, _) = train(&toy_spec(), &tr, &tr, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        model.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        let raw: Vec<Vec<f64>> = tr.rows.iter().map(|r| r.features.clone()).collect();
        let a = model.predict(&model.scale(&raw).unwrap()).unwrap();
        let b = back.predict(&back.scale(&raw).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(Forecaster::load(&path).is_err());
    }
}
