//! Spatio-temporal backpropagation through the unrolled LIF stack.
//!
//! Within a layer the gradient runs backwards in time through the membrane
//! (`H[t+1]` depends on `V[t]`, which depends on `H[t]`); across layers it
//! runs from the currents of layer `n+1` to the spikes of layer `n`. The
//! derivative of the firing nonlinearity is replaced by
//! [`surrogate_derivative`] of `H - V_th`.

use crate::error::{Error, Result};
use crate::snn::forward::{FireMode, ForwardCache, LayerCache};
use crate::snn::lif::{surrogate_derivative, LifParams};
use crate::snn::network::{Layer, LayerKind, SpikingNetwork};
use crate::tensor::{col2im, gemm, im2col, Tensor};

/// Loss gradients for every weight and bias tensor, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(net: &SpikingNetwork) -> Result<Self> {
        Ok(Self {
            weights: net
                .layers
                .iter()
                .map(|l| Tensor::zeros(l.weight.shape()))
                .collect::<Result<_>>()?,
            biases: net
                .layers
                .iter()
                .map(|l| l.bias.as_ref().map(|b| Tensor::zeros(b.shape())).transpose())
                .collect::<Result<_>>()?,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter().flatten())
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

fn validate(net: &SpikingNetwork, cache: &ForwardCache, d_rates: &Tensor) -> Result<()> {
    if cache.layers.is_empty() {
        return Err(Error::State("forward cache is empty".into()));
    }
    if cache.layers.len() != net.layers.len() || cache.timesteps != net.timesteps() {
        return Err(Error::State(format!(
            "cache holds {} layers x {} steps, network has {} x {}",
            cache.layers.len(),
            cache.timesteps,
            net.layers.len(),
            net.timesteps()
        )));
    }
    for (i, (l, c)) in net.layers.iter().zip(&cache.layers).enumerate() {
        let rows = if c.static_input { 1 } else { cache.timesteps };
        let n = cache.batch * l.kind.output_len();
        if c.in_len != l.kind.input_len()
            || c.out_len != l.kind.output_len()
            || c.h.len() != cache.timesteps * n
            || c.s.len() != cache.timesteps * n
            || c.input.len() != rows * cache.batch * c.in_len
        {
            return Err(Error::State(format!("cache for layer {i} does not match the network")));
        }
    }
    if d_rates.shape() != [cache.batch, net.output_len()] {
        return Err(Error::dim(format!(
            "rate gradient shape {:?}, expected [{}, {}]",
            d_rates.shape(),
            cache.batch,
            net.output_len()
        )));
    }
    Ok(())
}

/// Backward through one LIF population: spike gradients in, current gradients out.
fn lif_backward(
    c: &LayerCache,
    g_spikes: &[f64],
    steps: usize,
    n: usize,
    p: &LifParams,
    keep_reset_path: bool,
) -> Vec<f64> {
    let gain = p.input_gain();
    let leak = p.leak_factor();
    let mut g_cur = vec![0.0; steps * n];
    // dL/dV[t], carried from step t+1
    let mut g_v = vec![0.0; n];
    for t in (0..steps).rev() {
        let off = t * n;
        for i in 0..n {
            let h = c.h[off + i];
            let s = c.s[off + i];
            let ds = surrogate_derivative(h - p.v_th);
            let mut dv_dh = 1.0 - s;
            if keep_reset_path {
                dv_dh += (p.v_rest - h) * ds;
            }
            let g_h = g_spikes[off + i] * ds + g_v[i] * dv_dh;
            g_cur[off + i] = g_h * gain;
            g_v[i] = g_h * leak;
        }
    }
    g_cur
}

/// Accumulate weight and bias gradients for `rows` stacked inputs.
fn accumulate_param_grads(
    layer: &Layer,
    input: &[f64],
    g_cur: &[f64],
    rows: usize,
    g_w: &mut [f64],
    g_b: Option<&mut [f64]>,
) {
    match layer.kind {
        LayerKind::Linear { inputs, outputs } => {
            gemm(true, false, outputs, inputs, rows, 1.0, g_cur, input, 1.0, g_w);
            if let Some(g_b) = g_b {
                for row in g_cur.chunks_exact(outputs) {
                    g_b.iter_mut().zip(row).for_each(|(b, g)| *b += g);
                }
            }
        }
        LayerKind::Conv(g) => {
            let pixels = g.out_pixels();
            let mut cols = vec![0.0; g.col_rows() * pixels];
            let mut g_b = g_b;
            for (x, gy) in input
                .chunks_exact(g.input_len())
                .zip(g_cur.chunks_exact(g.output_len()))
            {
                im2col(&g, x, &mut cols);
                gemm(false, true, g.out_channels, g.col_rows(), pixels, 1.0, gy, &cols, 1.0, g_w);
                if let Some(g_b) = g_b.as_deref_mut() {
                    for (b, plane) in g_b.iter_mut().zip(gy.chunks_exact(pixels)) {
                        *b += plane.iter().sum::<f64>();
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the layer input for `rows` stacked current gradients.
fn input_grad(layer: &Layer, g_cur: &[f64], rows: usize) -> Vec<f64> {
    let w = layer.weight.data();
    let mut g_in = vec![0.0; rows * layer.kind.input_len()];
    match layer.kind {
        LayerKind::Linear { inputs, outputs } => {
            gemm(false, false, rows, inputs, outputs, 1.0, g_cur, w, 0.0, &mut g_in);
        }
        LayerKind::Conv(g) => {
            let pixels = g.out_pixels();
            let mut g_cols = vec![0.0; g.col_rows() * pixels];
            for (gx, gy) in g_in
                .chunks_exact_mut(g.input_len())
                .zip(g_cur.chunks_exact(g.output_len()))
            {
                gemm(true, false, g.col_rows(), pixels, g.out_channels, 1.0, w, gy, 0.0, &mut g_cols);
                col2im(&g, &g_cols, gx);
            }
        }
    }
    g_in
}

/// Backpropagate `dL/d(rates)` through the unrolled network.
///
/// In [`FireMode::Spiking`] the reset path is dropped when
/// `net.detach_reset` is set. In [`FireMode::Relaxed`] the smooth activation
/// is differentiated exactly, reset path included.
pub fn stbp_backward(net: &SpikingNetwork, cache: &ForwardCache, d_rates: &Tensor) -> Result<Gradients> {
    validate(net, cache, d_rates)?;
    let steps = cache.timesteps;
    let batch = cache.batch;
    let keep_reset_path = match cache.mode {
        FireMode::Spiking => !net.detach_reset,
        FireMode::Relaxed => true,
    };
    let mut grads = Gradients::zeros_like(net)?;

    // rates = mean over t of the output spikes
    let inv = 1.0 / steps as f64;
    let mut g_spikes: Vec<f64> = (0..steps)
        .flat_map(|_| d_rates.data().iter().map(move |g| g * inv))
        .collect();

    for idx in (0..net.layers.len()).rev() {
        let layer = &net.layers[idx];
        let c = &cache.layers[idx];
        let n = batch * c.out_len;
        let g_cur = lif_backward(c, &g_spikes, steps, n, &layer.lif, keep_reset_path);

        let (g_w, g_b) = (&mut grads.weights[idx], &mut grads.biases[idx]);
        let g_b = g_b.as_mut().map(|b| b.data_mut());
        if c.static_input {
            // Same input every step: fold the time axis before the outer product.
            let mut folded = vec![0.0; n];
            for t in 0..steps {
                folded.iter_mut().zip(&g_cur[t * n..(t + 1) * n]).for_each(|(a, g)| *a += g);
            }
            accumulate_param_grads(layer, &c.input, &folded, batch, g_w.data_mut(), g_b);
        } else {
            accumulate_param_grads(layer, &c.input, &g_cur, steps * batch, g_w.data_mut(), g_b);
        }

        if idx > 0 {
            g_spikes = input_grad(layer, &g_cur, steps * batch);
        }
    }
    Ok(grads)
}
