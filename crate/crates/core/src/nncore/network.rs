use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Cache, Layer, LayerSpec};
use super::loss::Loss;
use super::{Mode, NnError, Tensor};

/// A feed-forward stack of layers.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// Result of a forward/backward pass over one batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub output: Tensor,
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

impl Network {
    /// Validates the shape chain and initializes every layer from `seed`.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = Layer::new(spec.clone(), &shape, &mut rng)
                .map_err(|e| NnError::InvalidLayer(format!("layer {i}: {e}")))?;
            shape = layer.output_shape().to_vec();
            layers.push(layer);
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    /// Computes every layer's output shape without allocating parameters.
    pub fn shape_chain(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Vec<Vec<usize>>, NnError> {
        let mut shapes = vec![input_shape.to_vec()];
        for (i, spec) in specs.iter().enumerate() {
            let next = spec
                .output_shape(shapes.last().expect("seeded with input"))
                .map_err(|e| NnError::InvalidLayer(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map(Layer::output_shape)
            .unwrap_or(&self.input_shape)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec().clone()).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut().iter_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn ends_with_softmax(&self) -> bool {
        matches!(self.layers.last().map(Layer::spec), Some(LayerSpec::Softmax))
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<(Tensor, Vec<Cache>), NnError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut out = None;
        for layer in &self.layers {
            let (y, cache) = layer.forward(out.as_ref().unwrap_or(x), mode)?;
            caches.push(cache);
            out = Some(y);
        }
        Ok((out.unwrap_or_else(|| x.clone()), caches))
    }

    /// Inference-mode forward pass; uses no randomness.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.forward(x, &mut Mode::Infer)?.0)
    }

    /// Backpropagates `grad`, the gradient at the output of layer `upto - 1`,
    /// down to the input. Returns the input gradient and one gradient per
    /// parameter tensor of the whole network (zero for layers at or above `upto`).
    pub fn backward(&self, caches: &[Cache], grad: Tensor, upto: usize) -> Result<(Tensor, Vec<Tensor>), NnError> {
        if caches.len() != self.layers.len() || upto > self.layers.len() {
            return Err(NnError::ShapeMismatch("cache list does not match the network".into()));
        }
        let mut per_layer: Vec<Vec<Tensor>> = self.layers[upto..]
            .iter()
            .rev()
            .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        let mut g = grad;
        for (layer, cache) in self.layers[..upto].iter().zip(&caches[..upto]).rev() {
            let (dx, dp) = layer.backward(cache, &g)?;
            per_layer.push(dp);
            g = dx;
        }
        per_layer.reverse();
        Ok((g, per_layer.into_iter().flatten().collect()))
    }

    /// Forward pass, loss and full gradient. Cross-entropy requires a
    /// trailing softmax and uses the fused `(p - t) / batch` gradient.
    pub fn loss_and_grads(&self, x: &Tensor, targets: &Tensor, loss: Loss, mode: &mut Mode<'_>) -> Result<Gradients, NnError> {
        let (output, caches) = self.forward(x, mode)?;
        let (value, grad) = loss.evaluate(&output, targets)?;
        let upto = match loss {
            Loss::CategoricalCrossEntropy => {
                if !self.ends_with_softmax() {
                    return Err(NnError::InvalidLayer(
                        "cross-entropy needs a network ending in softmax".into(),
                    ));
                }
                self.layers.len() - 1
            }
            Loss::MeanSquaredError => self.layers.len(),
        };
        let (input, params) = self.backward(&caches, grad, upto)?;
        Ok(Gradients {
            loss: value,
            output,
            params,
            input,
        })
    }
}
