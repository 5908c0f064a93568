use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::recurrent::{self, GruCache, LstmCache};
use super::tensor::{gemm, Tensor, View, ViewMut};
use super::{Mode, NnError};

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Relu,
    Softmax,
    Dropout { rate: f64 },
    Conv1d { filters: usize, kernel_size: usize },
    MaxPool1d { pool_size: usize },
    Flatten,
    Lstm { units: usize, return_sequences: bool },
    BiLstm { units: usize, return_sequences: bool },
    Gru { units: usize, return_sequences: bool },
}

impl LayerSpec {
    pub fn lstm(units: usize) -> Self {
        LayerSpec::Lstm {
            units,
            return_sequences: false,
        }
    }

    pub fn bilstm(units: usize) -> Self {
        LayerSpec::BiLstm {
            units,
            return_sequences: false,
        }
    }

    pub fn gru(units: usize) -> Self {
        LayerSpec::Gru {
            units,
            return_sequences: false,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::MaxPool1d { .. } => "maxpool1d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Lstm { .. } => "lstm",
            LayerSpec::BiLstm { .. } => "bilstm",
            LayerSpec::Gru { .. } => "gru",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let bad = |msg: String| Err(NnError::InvalidLayer(format!("{}: {msg}", self.kind_name())));
        let seq = |input: &[usize]| -> Result<(usize, usize), NnError> {
            match input {
                [steps, channels] if *steps > 0 && *channels > 0 => Ok((*steps, *channels)),
                _ => Err(NnError::InvalidLayer(format!(
                    "{} expects a [steps, channels] input, got {input:?}",
                    self.kind_name()
                ))),
            }
        };
        match *self {
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return bad("units must be at least 1".into());
                }
                match input {
                    [n] if *n > 0 => Ok(vec![units]),
                    _ => bad(format!("expects a flat input, got {input:?}")),
                }
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("rate {rate} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Conv1d { filters, kernel_size } => {
                let (steps, _) = seq(input)?;
                if filters == 0 || kernel_size == 0 {
                    return bad("filters and kernel_size must be at least 1".into());
                }
                if kernel_size > steps {
                    return bad(format!("kernel {kernel_size} longer than input length {steps}"));
                }
                Ok(vec![steps - kernel_size + 1, filters])
            }
            LayerSpec::MaxPool1d { pool_size } => {
                let (steps, channels) = seq(input)?;
                if pool_size == 0 || steps / pool_size == 0 {
                    return bad(format!("pool {pool_size} does not fit length {steps}"));
                }
                Ok(vec![steps / pool_size, channels])
            }
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return bad("empty input shape".into());
                }
                Ok(vec![input.iter().product()])
            }
            LayerSpec::Lstm { units, return_sequences }
            | LayerSpec::Gru { units, return_sequences } => {
                let (steps, _) = seq(input)?;
                if units == 0 {
                    return bad("units must be at least 1".into());
                }
                Ok(if return_sequences { vec![steps, units] } else { vec![units] })
            }
            LayerSpec::BiLstm { units, return_sequences } => {
                let (steps, _) = seq(input)?;
                if units == 0 {
                    return bad("units must be at least 1".into());
                }
                Ok(if return_sequences {
                    vec![steps, 2 * units]
                } else {
                    vec![2 * units]
                })
            }
        }
    }

    /// Shapes of the trainable tensors, in storage order.
    pub fn param_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>, NnError> {
        self.output_shape(input)?;
        Ok(match *self {
            LayerSpec::Dense { units } => vec![vec![input[0], units], vec![units]],
            LayerSpec::Conv1d { filters, kernel_size } => {
                vec![vec![kernel_size * input[1], filters], vec![filters]]
            }
            LayerSpec::Lstm { units, .. } => lstm_shapes(input[1], units),
            LayerSpec::BiLstm { units, .. } => {
                let mut s = lstm_shapes(input[1], units);
                s.extend(lstm_shapes(input[1], units));
                s
            }
            LayerSpec::Gru { units, .. } => vec![
                vec![input[1], 3 * units],
                vec![units, 3 * units],
                vec![3 * units],
            ],
            _ => Vec::new(),
        })
    }
}

fn lstm_shapes(channels: usize, units: usize) -> Vec<Vec<usize>> {
    vec![
        vec![channels, 4 * units],
        vec![units, 4 * units],
        vec![4 * units],
    ]
}

/// Activations saved by a forward pass for the matching backward pass.
pub struct Cache(CacheKind);

enum CacheKind {
    Dense { input: Tensor },
    Relu { input: Tensor },
    Softmax { output: Tensor },
    Dropout { mask: Option<Vec<f64>> },
    Conv1d { input: Tensor },
    MaxPool1d { argmax: Vec<usize>, input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Lstm(Box<LstmCache>),
    BiLstm(Box<LstmCache>, Box<LstmCache>),
    Gru(Box<GruCache>),
}

/// A layer with its parameters and the per-sample input shape it was built for.
#[derive(Debug, Clone)]
pub struct Layer {
    spec: LayerSpec,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    params: Vec<Tensor>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn init_lstm(channels: usize, units: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let g = 4 * units;
    let wx = glorot(&[channels, g], channels, g, rng);
    let wh = glorot(&[units, g], units, g, rng);
    let mut b = Tensor::zeros(&[g]);
    b.data_mut()[units..2 * units].fill(1.0);
    vec![wx, wh, b]
}

impl Layer {
    pub fn new(spec: LayerSpec, input_shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        let output_shape = spec.output_shape(input_shape)?;
        let params = match spec {
            LayerSpec::Dense { units } => vec![
                glorot(&[input_shape[0], units], input_shape[0], units, rng),
                Tensor::zeros(&[units]),
            ],
            LayerSpec::Conv1d { filters, kernel_size } => {
                let c = input_shape[1];
                vec![
                    glorot(&[kernel_size * c, filters], kernel_size * c, kernel_size * filters, rng),
                    Tensor::zeros(&[filters]),
                ]
            }
            LayerSpec::Lstm { units, .. } => init_lstm(input_shape[1], units, rng),
            LayerSpec::BiLstm { units, .. } => {
                let mut p = init_lstm(input_shape[1], units, rng);
                p.extend(init_lstm(input_shape[1], units, rng));
                p
            }
            LayerSpec::Gru { units, .. } => {
                let c = input_shape[1];
                let g = 3 * units;
                vec![
                    glorot(&[c, g], c, g, rng),
                    glorot(&[units, g], units, g, rng),
                    Tensor::zeros(&[g]),
                ]
            }
            _ => Vec::new(),
        };
        Ok(Self {
            spec,
            input_shape: input_shape.to_vec(),
            output_shape,
            params,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize, NnError> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(NnError::ShapeMismatch(format!(
                "{} expects [batch, {:?}], got {:?}",
                self.spec.kind_name(),
                self.input_shape,
                x.shape()
            )));
        }
        Ok(x.dim(0))
    }

    fn batched(&self, batch: usize, per_sample: &[usize]) -> Vec<usize> {
        let mut s = Vec::with_capacity(per_sample.len() + 1);
        s.push(batch);
        s.extend_from_slice(per_sample);
        s
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<(Tensor, Cache), NnError> {
        let batch = self.check_input(x)?;
        let out_shape = self.batched(batch, &self.output_shape);
        let (y, cache) = match self.spec {
            LayerSpec::Dense { units } => {
                let n_in = self.input_shape[0];
                let mut y = Vec::with_capacity(batch * units);
                for _ in 0..batch {
                    y.extend_from_slice(self.params[1].data());
                }
                gemm(
                    batch,
                    n_in,
                    units,
                    View::row_major(x.data(), n_in),
                    View::row_major(self.params[0].data(), units),
                    1.0,
                    ViewMut::row_major(&mut y, units),
                );
                (Tensor::new(out_shape, y)?, CacheKind::Dense { input: x.clone() })
            }
            LayerSpec::Relu => (x.map(|v| v.max(0.0)), CacheKind::Relu { input: x.clone() }),
            LayerSpec::Softmax => {
                let y = softmax_rows(x);
                let cache = CacheKind::Softmax { output: y.clone() };
                (y, cache)
            }
            LayerSpec::Dropout { rate } => match mode {
                Mode::Train(rng) if rate > 0.0 => {
                    let scale = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.random::<f64>() >= rate { scale } else { 0.0 })
                        .collect();
                    let y: Vec<f64> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                    (Tensor::new(out_shape, y)?, CacheKind::Dropout { mask: Some(mask) })
                }
                _ => (x.clone(), CacheKind::Dropout { mask: None }),
            },
            LayerSpec::Conv1d { filters, kernel_size } => {
                let (steps, channels) = (self.input_shape[0], self.input_shape[1]);
                let out_len = steps - kernel_size + 1;
                let patch = kernel_size * channels;
                let mut y = Vec::with_capacity(batch * out_len * filters);
                for _ in 0..batch * out_len {
                    y.extend_from_slice(self.params[1].data());
                }
                for b in 0..batch {
                    // overlapping rows: patch t starts at t*channels in the sample
                    gemm(
                        out_len,
                        patch,
                        filters,
                        View {
                            data: x.data(),
                            offset: b * steps * channels,
                            rs: channels,
                            cs: 1,
                        },
                        View::row_major(self.params[0].data(), filters),
                        1.0,
                        ViewMut::row_major(&mut y, filters).at(b * out_len * filters),
                    );
                }
                (Tensor::new(out_shape, y)?, CacheKind::Conv1d { input: x.clone() })
            }
            LayerSpec::MaxPool1d { pool_size } => {
                let (steps, channels) = (self.input_shape[0], self.input_shape[1]);
                let out_len = steps / pool_size;
                let mut y = Vec::with_capacity(batch * out_len * channels);
                let mut argmax = Vec::with_capacity(batch * out_len * channels);
                for b in 0..batch {
                    for i in 0..out_len {
                        for c in 0..channels {
                            let mut best = (b * steps + i * pool_size) * channels + c;
                            for j in 1..pool_size {
                                let idx = (b * steps + i * pool_size + j) * channels + c;
                                if x.data()[idx] > x.data()[best] {
                                    best = idx;
                                }
                            }
                            y.push(x.data()[best]);
                            argmax.push(best);
                        }
                    }
                }
                (
                    Tensor::new(out_shape, y)?,
                    CacheKind::MaxPool1d {
                        argmax,
                        input_shape: x.shape().to_vec(),
                    },
                )
            }
            LayerSpec::Flatten => (
                x.clone().reshape(&out_shape)?,
                CacheKind::Flatten {
                    input_shape: x.shape().to_vec(),
                },
            ),
            LayerSpec::Lstm { units, return_sequences } => {
                let (y, c) = recurrent::lstm_forward(x, &self.params[0..3], units, return_sequences, false)?;
                (y, CacheKind::Lstm(Box::new(c)))
            }
            LayerSpec::BiLstm { units, return_sequences } => {
                let (yf, cf) = recurrent::lstm_forward(x, &self.params[0..3], units, return_sequences, false)?;
                let (yb, cb) = recurrent::lstm_forward(x, &self.params[3..6], units, return_sequences, true)?;
                let y = concat_last(&yf, &yb, units, out_shape)?;
                (y, CacheKind::BiLstm(Box::new(cf), Box::new(cb)))
            }
            LayerSpec::Gru { units, return_sequences } => {
                let (y, c) = recurrent::gru_forward(x, &self.params, units, return_sequences)?;
                (y, CacheKind::Gru(Box::new(c)))
            }
        };
        y.debug_check_finite(self.spec.kind_name());
        Ok((y, Cache(cache)))
    }

    /// Returns the gradient with respect to the input and one gradient per parameter tensor.
    pub fn backward(&self, cache: &Cache, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        let batch = grad.dim(0);
        let expected = self.batched(batch, &self.output_shape);
        if grad.shape() != expected.as_slice() {
            return Err(NnError::ShapeMismatch(format!(
                "{} backward expects {expected:?}, got {:?}",
                self.spec.kind_name(),
                grad.shape()
            )));
        }
        let in_shape = self.batched(batch, &self.input_shape);
        let g = grad.data();
        let result = match (&self.spec, &cache.0) {
            (LayerSpec::Dense { units }, CacheKind::Dense { input }) => {
                let (units, n_in) = (*units, self.input_shape[0]);
                let mut dw = vec![0.0; n_in * units];
                gemm(
                    n_in,
                    batch,
                    units,
                    View::transposed(input.data(), n_in),
                    View::row_major(g, units),
                    0.0,
                    ViewMut::row_major(&mut dw, units),
                );
                let mut dx = vec![0.0; batch * n_in];
                gemm(
                    batch,
                    units,
                    n_in,
                    View::row_major(g, units),
                    View::transposed(self.params[0].data(), units),
                    0.0,
                    ViewMut::row_major(&mut dx, n_in),
                );
                (
                    Tensor::new(in_shape, dx)?,
                    vec![Tensor::new(vec![n_in, units], dw)?, column_sums(g, units)],
                )
            }
            (LayerSpec::Relu, CacheKind::Relu { input }) => {
                let dx = input
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect();
                (Tensor::new(in_shape, dx)?, Vec::new())
            }
            (LayerSpec::Softmax, CacheKind::Softmax { output }) => {
                let k = *output.shape().last().expect("non-empty shape");
                let mut dx = Vec::with_capacity(g.len());
                for (y, d) in output.data().chunks_exact(k).zip(g.chunks_exact(k)) {
                    let dot: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                    dx.extend(y.iter().zip(d).map(|(yi, di)| yi * (di - dot)));
                }
                (Tensor::new(in_shape, dx)?, Vec::new())
            }
            (LayerSpec::Dropout { .. }, CacheKind::Dropout { mask }) => {
                let dx = match mask {
                    Some(m) => g.iter().zip(m).map(|(d, m)| d * m).collect(),
                    None => g.to_vec(),
                };
                (Tensor::new(in_shape, dx)?, Vec::new())
            }
            (LayerSpec::Conv1d { filters, kernel_size }, CacheKind::Conv1d { input }) => {
                let (filters, kernel_size) = (*filters, *kernel_size);
                let (steps, channels) = (self.input_shape[0], self.input_shape[1]);
                let out_len = steps - kernel_size + 1;
                let patch = kernel_size * channels;
                let mut dw = vec![0.0; patch * filters];
                let mut dx = vec![0.0; batch * steps * channels];
                let mut dpatch = vec![0.0; out_len * patch];
                for b in 0..batch {
                    let x_off = b * steps * channels;
                    let g_off = b * out_len * filters;
                    gemm(
                        patch,
                        out_len,
                        filters,
                        View {
                            data: input.data(),
                            offset: x_off,
                            rs: 1,
                            cs: channels,
                        },
                        View::row_major(g, filters).at(g_off),
                        1.0,
                        ViewMut::row_major(&mut dw, filters),
                    );
                    gemm(
                        out_len,
                        filters,
                        patch,
                        View::row_major(g, filters).at(g_off),
                        View::transposed(self.params[0].data(), filters),
                        0.0,
                        ViewMut::row_major(&mut dpatch, patch),
                    );
                    let dxb = &mut dx[x_off..x_off + steps * channels];
                    for (t, row) in dpatch.chunks_exact(patch).enumerate() {
                        for (d, v) in dxb[t * channels..t * channels + patch].iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                (
                    Tensor::new(in_shape, dx)?,
                    vec![Tensor::new(vec![patch, filters], dw)?, column_sums(g, filters)],
                )
            }
            (LayerSpec::MaxPool1d { .. }, CacheKind::MaxPool1d { argmax, input_shape }) => {
                let mut dx = Tensor::zeros(input_shape);
                for (&idx, &d) in argmax.iter().zip(g) {
                    dx.data_mut()[idx] += d;
                }
                (dx, Vec::new())
            }
            (LayerSpec::Flatten, CacheKind::Flatten { input_shape }) => {
                (grad.clone().reshape(input_shape)?, Vec::new())
            }
            (LayerSpec::Lstm { .. }, CacheKind::Lstm(c)) => recurrent::lstm_backward(c, grad, &self.params[0..3])?,
            (LayerSpec::BiLstm { units, .. }, CacheKind::BiLstm(cf, cb)) => {
                let (gf, gb) = split_last(grad, *units)?;
                let (dxf, mut pf) = recurrent::lstm_backward(cf, &gf, &self.params[0..3])?;
                let (dxb, pb) = recurrent::lstm_backward(cb, &gb, &self.params[3..6])?;
                let dx: Vec<f64> = dxf.data().iter().zip(dxb.data()).map(|(a, b)| a + b).collect();
                pf.extend(pb);
                (Tensor::new(in_shape, dx)?, pf)
            }
            (LayerSpec::Gru { .. }, CacheKind::Gru(c)) => recurrent::gru_backward(c, grad, &self.params)?,
            _ => {
                return Err(NnError::ShapeMismatch(format!(
                    "cache does not belong to a {} layer",
                    self.spec.kind_name()
                )))
            }
        };
        Ok(result)
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let k = *x.shape().last().expect("non-empty shape");
    let mut y = Vec::with_capacity(x.len());
    for row in x.rows(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = y.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            y.push(e);
        }
        for v in &mut y[start..] {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), y).expect("same shape")
}

fn column_sums(g: &[f64], cols: usize) -> Tensor {
    let mut s = vec![0.0; cols];
    for row in g.chunks_exact(cols) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::new(vec![cols], s).expect("vector shape")
}

fn concat_last(a: &Tensor, b: &Tensor, width: usize, shape: Vec<usize>) -> Result<Tensor, NnError> {
    let mut out = Vec::with_capacity(a.len() * 2);
    for (ra, rb) in a.rows(width).zip(b.rows(width)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor::new(shape, out)
}

fn split_last(t: &Tensor, width: usize) -> Result<(Tensor, Tensor), NnError> {
    let mut shape = t.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = width;
    let mut a = Vec::with_capacity(t.len() / 2);
    let mut b = Vec::with_capacity(t.len() / 2);
    for row in t.rows(2 * width) {
        a.extend_from_slice(&row[..width]);
        b.extend_from_slice(&row[width..]);
    }
    Ok((Tensor::new(shape.clone(), a)?, Tensor::new(shape, b)?))
}
