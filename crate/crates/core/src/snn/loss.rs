use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training objective applied to output firing rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Mse,
    /// Softmax cross-entropy with the rates used directly as logits.
    CrossEntropy,
}

fn check(rates: &Tensor, targets: &Tensor) -> Result<()> {
    if rates.shape() != targets.shape() || rates.shape().len() != 2 {
        return Err(Error::dim(format!(
            "rates {:?} and targets {:?} must be equal-shaped matrices",
            rates.shape(),
            targets.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over batch and classes.
pub fn loss_mse(rates: &Tensor, targets: &Tensor) -> Result<f64> {
    check(rates, targets)?;
    let sum: f64 = rates
        .data()
        .iter()
        .zip(targets.data())
        .map(|(r, y)| (r - y) * (r - y))
        .sum();
    Ok(sum / rates.len() as f64)
}

/// MSE and its gradient with respect to the rates.
pub fn loss_mse_grad(rates: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let loss = loss_mse(rates, targets)?;
    let scale = 2.0 / rates.len() as f64;
    let grad = rates
        .data()
        .iter()
        .zip(targets.data())
        .map(|(r, y)| scale * (r - y))
        .collect();
    Ok((loss, Tensor::new(rates.shape().to_vec(), grad)?))
}

/// Batch-mean softmax cross-entropy and its gradient.
pub fn cross_entropy_grad(rates: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    check(rates, targets)?;
    let classes = rates.shape()[1];
    let batch = rates.shape()[0] as f64;
    let mut grad = Vec::with_capacity(rates.len());
    let mut loss = 0.0;
    for (r, y) in rates
        .data()
        .chunks_exact(classes)
        .zip(targets.data().chunks_exact(classes))
    {
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = r.iter().map(|v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        for (rv, yv) in r.iter().zip(y) {
            loss -= yv * (rv - log_z);
            grad.push(((rv - log_z).exp() - yv) / batch);
        }
    }
    Ok((loss / batch, Tensor::new(rates.shape().to_vec(), grad)?))
}

impl LossKind {
    pub fn eval(self, rates: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossKind::Mse => loss_mse_grad(rates, targets),
            LossKind::CrossEntropy => cross_entropy_grad(rates, targets),
        }
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::dim("empty label batch"));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes])?;
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::domain(format!("label {l} outside {classes} classes")));
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}
