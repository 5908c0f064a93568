use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::Loss;
use super::{Mode, Network, NnError, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;
const MAX_OFFENDERS: usize = 5;

#[derive(Debug, Clone, Serialize)]
pub struct Offender {
    pub layer: usize,
    pub kind: String,
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub kind: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub input_max_rel_error: f64,
    pub layers: Vec<LayerCheck>,
    pub worst: Vec<Offender>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| !l.passed).map(|l| l.layer).collect()
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn loss_at(net: &Network, x: &Tensor, target: &Tensor, loss: Loss, seed: u64) -> Result<f64, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, _) = net.forward(x, &mut Mode::Train(&mut rng))?;
    Ok(loss.evaluate(&out, target)?.0)
}

/// Compares backpropagated gradients for every parameter and input element
/// against central differences. Dropout masks are replayed from `seed` on
/// every evaluation, so stochastic layers are checked too.
pub fn grad_check(
    net: &Network,
    input: &Tensor,
    target: &Tensor,
    loss: Loss,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = net.loss_and_grads(input, target, loss, &mut Mode::Train(&mut rng))?;
    grad_check_against(net, input, target, loss, tolerance, seed, &g.params, &g.input)
}

/// Like [`grad_check`] but with caller-supplied analytic gradients.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_against(
    net: &Network,
    input: &Tensor,
    target: &Tensor,
    loss: Loss,
    tolerance: f64,
    seed: u64,
    param_grads: &[Tensor],
    input_grad: &Tensor,
) -> Result<GradCheckReport, NnError> {
    if param_grads.len() != net.params().len() || input_grad.shape() != input.shape() {
        return Err(NnError::ShapeMismatch("analytic gradients do not match the network".into()));
    }
    let mut probe = net.clone();
    let mut offenders = Vec::new();
    let mut layers = Vec::new();
    let mut flat = 0;
    for li in 0..probe.layers().len() {
        let kind = probe.layers()[li].spec().kind_name().to_string();
        let n_tensors = probe.layers()[li].params().len();
        let mut worst = 0.0f64;
        let mut count = 0;
        for ti in 0..n_tensors {
            let analytic = &param_grads[flat + ti];
            let len = probe.layers()[li].params()[ti].len();
            if analytic.len() != len {
                return Err(NnError::ShapeMismatch(format!("gradient for layer {li} tensor {ti}")));
            }
            for idx in 0..len {
                let orig = probe.layers()[li].params()[ti].data()[idx];
                probe.layers_mut()[li].params_mut()[ti].data_mut()[idx] = orig + FD_STEP;
                let up = loss_at(&probe, input, target, loss, seed)?;
                probe.layers_mut()[li].params_mut()[ti].data_mut()[idx] = orig - FD_STEP;
                let down = loss_at(&probe, input, target, loss, seed)?;
                probe.layers_mut()[li].params_mut()[ti].data_mut()[idx] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic.data()[idx];
                let e = rel_error(a, numeric);
                worst = worst.max(e);
                offenders.push(Offender {
                    layer: li,
                    kind: kind.clone(),
                    tensor: ti,
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: e,
                });
            }
            count += len;
        }
        flat += n_tensors;
        if n_tensors > 0 {
            layers.push(LayerCheck {
                layer: li,
                kind,
                params: count,
                max_rel_error: worst,
                passed: worst < tolerance,
            });
        }
        offenders.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        offenders.truncate(MAX_OFFENDERS);
    }

    let mut x = input.clone();
    let mut input_worst = 0.0f64;
    for idx in 0..x.len() {
        let orig = x.data()[idx];
        x.data_mut()[idx] = orig + FD_STEP;
        let up = loss_at(net, &x, target, loss, seed)?;
        x.data_mut()[idx] = orig - FD_STEP;
        let down = loss_at(net, &x, target, loss, seed)?;
        x.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        input_worst = input_worst.max(rel_error(input_grad.data()[idx], numeric));
    }

    let max_rel_error = layers.iter().map(|l| l.max_rel_error).fold(input_worst, f64::max);
    Ok(GradCheckReport {
        tolerance,
        max_rel_error,
        input_max_rel_error: input_worst,
        passed: max_rel_error < tolerance,
        layers,
        worst: offenders,
    })
}
