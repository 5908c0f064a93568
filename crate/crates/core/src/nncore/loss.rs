use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Probabilities are clipped to `[PROB_FLOOR, 1]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CategoricalCrossEntropy,
    MeanSquaredError,
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<(), NnError> {
    if a.shape() != b.shape() || a.rank() < 2 {
        return Err(NnError::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood over the batch, plus the fused softmax
/// gradient with respect to the logits, `(p - t) / batch`.
pub fn categorical_cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<(f64, Tensor), NnError> {
    check_same(probs, targets)?;
    let batch = probs.dim(0);
    let k = probs.len() / batch;
    let mut loss = 0.0;
    for (p, t) in probs.rows(k).zip(targets.rows(k)) {
        for (&pi, &ti) in p.iter().zip(t) {
            if ti != 0.0 {
                loss -= ti * pi.clamp(PROB_FLOOR, 1.0).ln();
            }
        }
    }
    let inv = 1.0 / batch as f64;
    let grad = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, t)| (p - t) * inv)
        .collect();
    Ok((loss * inv, Tensor::new(probs.shape().to_vec(), grad)?))
}

/// Mean over every element of the squared error, and its gradient.
pub fn mean_squared_error(pred: &Tensor, targets: &Tensor) -> Result<(f64, Tensor), NnError> {
    check_same(pred, targets)?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.data().iter().zip(targets.data()) {
        let d = p - t;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

impl Loss {
    pub fn evaluate(self, output: &Tensor, targets: &Tensor) -> Result<(f64, Tensor), NnError> {
        match self {
            Loss::CategoricalCrossEntropy => categorical_cross_entropy(output, targets),
            Loss::MeanSquaredError => mean_squared_error(output, targets),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_has_no_loss() {
        let p = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (loss, grad) = categorical_cross_entropy(&p, &p).unwrap();
        assert!(loss <= 1e-10);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_prediction_costs_ln_k() {
        let p = Tensor::filled(&[4, 15], 1.0 / 15.0);
        let mut t = Tensor::zeros(&[4, 15]);
        for b in 0..4 {
            t.data_mut()[b * 15 + b] = 1.0;
        }
        let (loss, _) = categorical_cross_entropy(&p, &t).unwrap();
        assert!((loss - 15f64.ln()).abs() < 1e-12);
        assert!((loss - 2.708).abs() < 1e-3);
    }

    #[test]
    fn zero_probability_is_clipped() {
        let p = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let t = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let (loss, _) = categorical_cross_entropy(&p, &t).unwrap();
        assert!((loss + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn mse_and_shape_errors() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let (loss, grad) = mean_squared_error(&a, &b).unwrap();
        assert_eq!(loss, 2.5);
        assert_eq!(grad.data(), &[1.0, 2.0]);
        assert!(mean_squared_error(&a, &Tensor::zeros(&[2, 1])).is_err());
    }
}
