//! Loss, gradients and accuracy for one batch.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::snn::{forward_unroll, one_hot, predict, stbp_backward, Gradients, LossKind, SpikingNetwork};
use crate::tensor::Tensor;

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub correct: usize,
    pub grads: Gradients,
}

pub fn loss_and_gradients(
    net: &SpikingNetwork,
    inputs: &Tensor,
    labels: &[usize],
    loss: LossKind,
) -> Result<BatchOutcome> {
    let (rates, cache) = forward_unroll(net, inputs)?;
    let targets = one_hot(labels, net.output_len())?;
    let (value, d_rates) = loss.eval(&rates, &targets)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    let grads = stbp_backward(net, &cache, &d_rates)?;
    if !grads.all_finite() {
        let bad: Vec<usize> = grads
            .weights
            .iter()
            .enumerate()
            .filter(|(_, g)| g.data().iter().any(|v| !v.is_finite()))
            .map(|(i, _)| i)
            .collect();
        return Err(Error::NonFinite(format!("weight gradients of layers {bad:?}")));
    }
    let correct = predict(&rates, &cache)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(BatchOutcome {
        loss: value,
        correct,
        grads,
    })
}

/// Top-1 accuracy over a dataset, evaluated in batches of `batch`.
pub fn evaluate(net: &SpikingNetwork, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty dataset"));
    }
    let batch = batch.max(1);
    let mut correct = 0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch).min(data.len());
        let (x, labels) = data.batch(&(start..end).collect::<Vec<_>>())?;
        let (rates, cache) = forward_unroll(net, &x)?;
        correct += predict(&rates, &cache)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}
