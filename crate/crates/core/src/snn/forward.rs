//! Time-unrolled forward pass.
//!
//! Static inputs are injected as a constant current at every timestep, so the
//! first layer's synaptic currents are computed once and reused for all `T`
//! steps. Later layers see a different spike pattern each step; their
//! currents for all steps are computed in one `(T·B) × in` multiply.

use crate::error::{Error, Result};
use crate::snn::lif::{heaviside, smooth_spike};
use crate::snn::network::{Layer, LayerKind, SpikingNetwork};
use crate::tensor::{gemm, im2col, Tensor};

/// How a membrane crossing is turned into an output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FireMode {
    /// Binary spikes `Θ(H - V_th)` with hard reset.
    Spiking,
    /// Smooth `h(H - V_th)` with a soft reset; differentiable end to end.
    Relaxed,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    /// `B × in` when `static_input`, otherwise `T × B × in`.
    pub input: Vec<f64>,
    pub static_input: bool,
    pub in_len: usize,
    pub out_len: usize,
    /// Post-charge potentials, `T × B × out`.
    pub h: Vec<f64>,
    /// Emitted spikes (or smooth activations), `T × B × out`.
    pub s: Vec<f64>,
}

/// Everything the backward pass needs from one forward invocation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) mode: FireMode,
    pub(crate) batch: usize,
    pub(crate) timesteps: usize,
    pub(crate) layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> FireMode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// Spike trains of layer `layer`, laid out `T × B × out`.
    pub fn spikes(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(layer).map(|l| l.s.as_slice())
    }

    /// Post-charge potentials of layer `layer`, laid out `T × B × out`.
    pub fn potentials(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(layer).map(|l| l.h.as_slice())
    }

    /// Time-averaged post-charge potential of the output layer, `B × classes`.
    pub fn readout_potential(&self) -> Vec<f64> {
        let Some(last) = self.layers.last() else {
            return Vec::new();
        };
        let n = self.batch * last.out_len;
        let mut acc = vec![0.0; n];
        for t in 0..self.timesteps {
            for (a, h) in acc.iter_mut().zip(&last.h[t * n..(t + 1) * n]) {
                *a += h;
            }
        }
        let inv = 1.0 / self.timesteps as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        acc
    }
}

/// Synaptic currents `rows × out` for `rows` stacked input vectors.
pub(crate) fn layer_currents(layer: &Layer, input: &[f64], rows: usize) -> Vec<f64> {
    let out_len = layer.kind.output_len();
    let in_len = layer.kind.input_len();
    debug_assert_eq!(input.len(), rows * in_len);
    let w = layer.weight.data();
    let mut out = vec![0.0; rows * out_len];
    match layer.kind {
        LayerKind::Linear { inputs, outputs } => {
            gemm(false, true, rows, outputs, inputs, 1.0, input, w, 0.0, &mut out);
            if let Some(b) = &layer.bias {
                for row in out.chunks_exact_mut(outputs) {
                    row.iter_mut().zip(b.data()).for_each(|(o, bi)| *o += bi);
                }
            }
        }
        LayerKind::Conv(g) => {
            let pixels = g.out_pixels();
            let mut cols = vec![0.0; g.col_rows() * pixels];
            for (x, y) in input.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
                im2col(&g, x, &mut cols);
                gemm(false, false, g.out_channels, pixels, g.col_rows(), 1.0, w, &cols, 0.0, y);
                if let Some(b) = &layer.bias {
                    for (plane, bi) in y.chunks_exact_mut(pixels).zip(b.data()) {
                        plane.iter_mut().for_each(|o| *o += bi);
                    }
                }
            }
        }
    }
    out
}

fn check_input(net: &SpikingNetwork, input: &Tensor) -> Result<usize> {
    let batch = input.shape()[0];
    let per_sample: usize = input.shape()[1..].iter().product();
    if input.shape().len() < 2 || per_sample != net.input_len() {
        return Err(Error::dim(format!(
            "input shape {:?} does not match network input {:?}",
            input.shape(),
            net.input_shape()
        )));
    }
    Ok(batch)
}

pub(crate) fn forward_with_mode(
    net: &SpikingNetwork,
    input: &Tensor,
    mode: FireMode,
) -> Result<(Tensor, ForwardCache)> {
    let batch = check_input(net, input)?;
    let steps = net.timesteps();
    let mut caches: Vec<LayerCache> = Vec::with_capacity(net.layers.len());

    for (idx, layer) in net.layers.iter().enumerate() {
        let (layer_input, static_input) = match caches.last() {
            None => (input.data().to_vec(), true),
            Some(prev) => (prev.s.clone(), false),
        };
        let rows = if static_input { batch } else { steps * batch };
        let currents = layer_currents(layer, &layer_input, rows);

        let n = batch * layer.kind.output_len();
        let p = layer.lif;
        let mut v = vec![p.v_rest; n];
        let mut h = vec![0.0; steps * n];
        let mut s = vec![0.0; steps * n];
        for t in 0..steps {
            let cur = if static_input {
                &currents[..]
            } else {
                &currents[t * n..(t + 1) * n]
            };
            let h_t = &mut h[t * n..(t + 1) * n];
            let s_t = &mut s[t * n..(t + 1) * n];
            for i in 0..n {
                let hi = p.charge(v[i], cur[i]);
                let si = match mode {
                    FireMode::Spiking => heaviside(hi - p.v_th),
                    FireMode::Relaxed => smooth_spike(hi - p.v_th),
                };
                v[i] = si * p.v_rest + (1.0 - si) * hi;
                h_t[i] = hi;
                s_t[i] = si;
            }
        }
        log::trace!("layer {idx}: {} rows forward", rows);
        caches.push(LayerCache {
            input: layer_input,
            static_input,
            in_len: layer.kind.input_len(),
            out_len: layer.kind.output_len(),
            h,
            s,
        });
    }

    let last = caches.last().expect("network has layers");
    let n = batch * last.out_len;
    let mut rates = vec![0.0; n];
    for t in 0..steps {
        for (r, s) in rates.iter_mut().zip(&last.s[t * n..(t + 1) * n]) {
            *r += s;
        }
    }
    let inv = 1.0 / steps as f64;
    rates.iter_mut().for_each(|r| *r *= inv);
    let rates = Tensor::new(vec![batch, last.out_len], rates)?;
    Ok((
        rates,
        ForwardCache {
            mode,
            batch,
            timesteps: steps,
            layers: caches,
        },
    ))
}

/// Spiking forward pass; returns output firing rates `B × classes`.
pub fn forward_unroll(net: &SpikingNetwork, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
    forward_with_mode(net, input, FireMode::Spiking)
}

/// Smooth surrogate of [`forward_unroll`], used to check gradients numerically.
pub fn relaxed_forward(net: &SpikingNetwork, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
    forward_with_mode(net, input, FireMode::Relaxed)
}

/// Class with the highest firing rate. Ties go to the larger mean membrane
/// potential, then to the lower index.
pub fn predict(rates: &Tensor, cache: &ForwardCache) -> Vec<usize> {
    let classes = rates.shape()[1];
    let potential = cache.readout_potential();
    rates
        .data()
        .chunks_exact(classes)
        .zip(potential.chunks_exact(classes))
        .map(|(r, v)| {
            let mut best = 0;
            for j in 1..classes {
                if r[j] > r[best] || (r[j] == r[best] && v[j] > v[best]) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::lif::LifParams;
    use crate::snn::network::Layer;

    fn single_layer(w: Vec<f64>, outputs: usize, inputs: usize, t: usize) -> SpikingNetwork {
        let layer = Layer::linear(
            Tensor::new(vec![outputs, inputs], w).unwrap(),
            None,
            LifParams::default(),
        )
        .unwrap();
        SpikingNetwork::new(vec![inputs], vec![layer], t).unwrap()
    }

    #[test]
    fn saturated_firing() {
        let net = single_layer(vec![1e6; 6], 3, 2, 1);
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.2, 0.9]).unwrap();
        let (rates, _) = forward_unroll(&net, &x).unwrap();
        assert!(rates.data().iter().all(|&r| r == 1.0));
    }

    #[test]
    fn zero_weights_never_fire() {
        let net = single_layer(vec![0.0; 6], 3, 2, 5);
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let (rates, cache) = forward_unroll(&net, &x).unwrap();
        assert!(rates.data().iter().all(|&r| r == 0.0));
        assert!(cache.potentials(0).unwrap().iter().all(|&h| h == 0.0));
    }

    #[test]
    fn two_neuron_hand_trace() {
        // in(1) -> a(1) -> b(1), weights 3 and 2, T=2, tau=2, V_th=1.
        // a: t1 H=1.5 spike, V=0; t2 H=1.5 spike. b input 2 each step:
        // b: t1 H=1.0 spike (Θ(0)=1), V=0; t2 H=1.0 spike. rate 1.
        let p = LifParams::default();
        let l1 = Layer::linear(Tensor::new(vec![1, 1], vec![3.0]).unwrap(), None, p).unwrap();
        let l2 = Layer::linear(Tensor::new(vec![1, 1], vec![2.0]).unwrap(), None, p).unwrap();
        let net = SpikingNetwork::new(vec![1], vec![l1, l2], 2).unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (rates, cache) = forward_unroll(&net, &x).unwrap();
        assert_eq!(rates.data(), &[1.0]);
        assert_eq!(cache.potentials(0).unwrap(), &[1.5, 1.5]);

        // Weight 1.5 on the second synapse: b t1 H=0.75 no spike, V=0.75;
        // t2 H=0.75+(-0.75+1.5)/2=1.125 spike. rate 0.5.
        let mut net = net;
        net.layers[1].weight.data_mut()[0] = 1.5;
        let (rates, cache) = forward_unroll(&net, &x).unwrap();
        assert_eq!(rates.data(), &[0.5]);
        assert_eq!(cache.potentials(1).unwrap(), &[0.75, 1.125]);
        assert_eq!(cache.spikes(1).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relaxed_midpoint() {
        // Current 2 with tau 2 lands exactly on threshold at t=1: h(0) = 1/2.
        let net = single_layer(vec![2.0], 1, 1, 1);
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (rates, _) = relaxed_forward(&net, &x).unwrap();
        assert_eq!(rates.data(), &[0.5]);
        let strong = single_layer(vec![1e9], 1, 1, 3);
        let (rates, _) = relaxed_forward(&strong, &x).unwrap();
        assert!(rates.data()[0] > 0.999);
    }

    #[test]
    fn spikes_are_binary_and_deterministic() {
        let net = single_layer((0..12).map(|i| (i as f64 - 5.0) * 0.7).collect(), 4, 3, 6);
        let x = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.37).fract()).unwrap();
        let (r1, c1) = forward_unroll(&net, &x).unwrap();
        let (r2, _) = forward_unroll(&net, &x).unwrap();
        assert_eq!(r1, r2);
        assert!(c1.spikes(0).unwrap().iter().all(|&s| s == 0.0 || s == 1.0));
    }

    #[test]
    fn input_shape_checked() {
        let net = single_layer(vec![0.0; 6], 3, 2, 1);
        let x = Tensor::zeros(&[2, 3]).unwrap();
        assert!(forward_unroll(&net, &x).is_err());
    }

    #[test]
    fn predict_breaks_rate_ties_by_potential() {
        // Both outputs silent; the second sits closer to threshold.
        let net = single_layer(vec![0.1, 0.5], 2, 1, 2);
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (rates, cache) = forward_unroll(&net, &x).unwrap();
        assert_eq!(rates.data(), &[0.0, 0.0]);
        assert_eq!(predict(&rates, &cache), vec![1]);
    }
}
