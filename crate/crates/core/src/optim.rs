//! First-order weight optimizers.
//!
//! The minimax step applies one of these to `∇W L` and then runs the
//! proximal sparsity update on the result.

use crate::error::{Error, Result};
use crate::snn::{Gradients, SpikingNetwork};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        OptimizerKind::Sgd {
            momentum,
            weight_decay,
        }
    }
}

/// Per-layer weight masks; `true` marks a slot held at zero.
pub type WeightMask = Vec<(usize, Vec<bool>)>;

/// Optimizer with its moment buffers. Slot `2l` is layer `l`'s weight,
/// slot `2l + 1` its bias (empty when the layer has none).
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, net: &SpikingNetwork) -> Self {
        let first = slot_shapes(net).map(|n| vec![0.0; n]).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Adam { .. } => first.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            steps: 0,
            first,
            second,
        }
    }

    /// Rebuild from saved buffers.
    pub fn from_parts(
        kind: OptimizerKind,
        steps: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
        net: &SpikingNetwork,
    ) -> Result<Self> {
        let shapes: Vec<usize> = slot_shapes(net).collect();
        let lens = |b: &[Vec<f64>]| b.iter().map(Vec::len).collect::<Vec<_>>();
        let second_ok = match kind {
            OptimizerKind::Adam { .. } => lens(&second) == shapes,
            OptimizerKind::Sgd { .. } => second.is_empty(),
        };
        if lens(&first) != shapes || !second_ok {
            return Err(Error::format("optimizer buffers do not match the network"));
        }
        Ok(Self {
            kind,
            steps,
            first,
            second,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Clear moment buffers and the step counter.
    pub fn reset(&mut self) {
        self.steps = 0;
        for b in self.first.iter_mut().chain(self.second.iter_mut()) {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// One update with learning rate `lr`. Masked weight slots get no
    /// gradient and are forced back to exactly zero afterwards.
    pub fn step(
        &mut self,
        net: &mut SpikingNetwork,
        grads: &Gradients,
        lr: f64,
        mask: Option<&WeightMask>,
    ) -> Result<()> {
        if grads.weights.len() != net.layers.len() {
            return Err(Error::dim("gradient count does not match the network"));
        }
        self.steps += 1;
        let t = self.steps as f64;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let layer_mask = mask.and_then(|m| m.iter().find(|(i, _)| *i == l)).map(|(_, m)| m);
            let gw = grads.weights[l].data();
            if gw.len() != layer.weight.len() {
                return Err(Error::dim(format!("gradient for layer {l} has the wrong size")));
            }
            let kind = self.kind;
            let (m, v) = self.buffers(2 * l);
            update(kind, t, lr, layer.weight.data_mut(), gw, m, v, layer_mask.map(Vec::as_slice));
            if let (Some(b), Some(gb)) = (layer.bias.as_mut(), grads.biases[l].as_ref()) {
                let (m, v) = self.buffers(2 * l + 1);
                update(kind, t, lr, b.data_mut(), gb.data(), m, v, None);
            }
        }
        Ok(())
    }

    fn buffers(&mut self, slot: usize) -> (&mut [f64], &mut [f64]) {
        let m = &mut self.first[slot];
        let v = match self.second.get_mut(slot) {
            Some(v) => v.as_mut_slice(),
            None => &mut [],
        };
        (m, v)
    }
}

fn slot_shapes(net: &SpikingNetwork) -> impl Iterator<Item = usize> + '_ {
    net.layers
        .iter()
        .flat_map(|l| [l.weight.len(), l.bias.as_ref().map_or(0, |b| b.len())])
}

#[allow(clippy::too_many_arguments)]
fn update(
    kind: OptimizerKind,
    t: f64,
    lr: f64,
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    mask: Option<&[bool]>,
) {
    let frozen = |i: usize| mask.is_some_and(|m| m[i]);
    match kind {
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powf(t);
            let c2 = 1.0 - beta2.powf(t);
            for i in 0..w.len() {
                if frozen(i) {
                    w[i] = 0.0;
                    continue;
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        OptimizerKind::Sgd {
            momentum,
            weight_decay,
        } => {
            for i in 0..w.len() {
                if frozen(i) {
                    w[i] = 0.0;
                    continue;
                }
                let gi = g[i] + weight_decay * w[i];
                m[i] = momentum * m[i] + gi;
                w[i] -= lr * m[i];
            }
        }
    }
}

/// Learning rate for fine-tuning phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPolicy {
    /// Keep the base learning rate.
    Constant,
    /// Restart at `initial` and anneal to zero over the phase.
    Cosine { initial: f64 },
}

impl LrPolicy {
    /// Rate for iteration `i` of a phase lasting `total` iterations.
    pub fn rate(self, base: f64, i: u64, total: u64) -> f64 {
        match self {
            LrPolicy::Constant => base,
            LrPolicy::Cosine { initial } => {
                if total == 0 {
                    return initial;
                }
                let x = (i.min(total) as f64) / total as f64;
                0.5 * initial * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::{Layer, LifParams};
    use crate::tensor::Tensor;

    fn net(w: Vec<f64>) -> SpikingNetwork {
        let n = w.len();
        let l = Layer::linear(Tensor::new(vec![1, n], w).unwrap(), None, LifParams::default()).unwrap();
        SpikingNetwork::new(vec![n], vec![l], 1).unwrap()
    }

    fn grads(g: Vec<f64>) -> Gradients {
        let n = g.len();
        Gradients {
            weights: vec![Tensor::new(vec![1, n], g).unwrap()],
            biases: vec![None],
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut n = net(vec![1.0, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(), &n);
        opt.step(&mut n, &grads(vec![0.5, -2.0]), 0.01, None).unwrap();
        let w = n.layers[0].weight.data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut n = net(vec![0.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9, 0.0), &n);
        opt.step(&mut n, &grads(vec![1.0]), 0.1, None).unwrap();
        opt.step(&mut n, &grads(vec![1.0]), 0.1, None).unwrap();
        // -0.1 then -0.1 * 1.9
        assert!((n.layers[0].weight.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn mask_holds_zero() {
        let mut n = net(vec![0.0, 1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(), &n);
        let mask = vec![(0, vec![true, false])];
        for _ in 0..5 {
            opt.step(&mut n, &grads(vec![3.0, 3.0]), 0.1, Some(&mask)).unwrap();
        }
        assert_eq!(n.layers[0].weight.data()[0], 0.0);
        assert!(n.layers[0].weight.data()[1] < 1.0);
    }

    #[test]
    fn reset_clears_buffers() {
        let mut n = net(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(), &n);
        opt.step(&mut n, &grads(vec![1.0]), 0.1, None).unwrap();
        opt.reset();
        assert_eq!(opt, Optimizer::new(OptimizerKind::adam(), &n));
    }

    #[test]
    fn cosine_restart_endpoints() {
        let p = LrPolicy::Cosine { initial: 0.001 };
        assert_eq!(p.rate(0.1, 0, 10), 0.001);
        assert!(p.rate(0.1, 10, 10).abs() < 1e-18);
        assert!((p.rate(0.1, 5, 10) - 0.0005).abs() < 1e-15);
        assert_eq!(LrPolicy::Constant.rate(0.1, 3, 10), 0.1);
    }
}
