//! Layer stacks and the architecture strings that describe them.
//!
//! Canonical form: an input shape followed by layers, separated by `/`:
//!
//! ```text
//! 784/fc400/fc10
//! 1x28x28/c8k3s2p1/c16k3s2p1/fc64/fc10
//! ```
//!
//! `fc:784-400-10` is accepted as shorthand for the first form, and
//! `conv6fc2:CxHxW:classes` expands to a six-conv, two-FC stack.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::snn::lif::LifParams;
use crate::tensor::{ConvGeometry, Tensor};

/// Layers with more weights than this are pruning targets by default.
pub const DEFAULT_MIN_PRUNABLE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Linear {
        outputs: usize,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Linear { outputs } => write!(f, "fc{outputs}"),
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "c{out_channels}k{kernel}s{stride}p{padding}"),
        }
    }
}

/// Input shape plus an ordered list of layer specs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

fn parse_usize(field: &str, what: &str) -> Result<usize> {
    field
        .parse::<usize>()
        .map_err(|_| Error::format(format!("bad {what} `{field}` in architecture")))
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    let dims = s
        .split('x')
        .map(|d| parse_usize(d, "dimension"))
        .collect::<Result<Vec<_>>>()?;
    if dims.is_empty() || dims.len() == 2 || dims.len() > 3 || dims.contains(&0) {
        return Err(Error::format(format!(
            "input shape `{s}` must be N or CxHxW with positive sizes"
        )));
    }
    Ok(dims)
}

/// Parse `c<out>k<k>s<s>p<p>`.
fn parse_conv(tok: &str) -> Result<LayerSpec> {
    let bad = || Error::format(format!("bad conv layer `{tok}`, expected c<out>k<k>s<s>p<p>"));
    let rest = tok.strip_prefix('c').ok_or_else(bad)?;
    let (out, rest) = rest.split_once('k').ok_or_else(bad)?;
    let (k, rest) = rest.split_once('s').ok_or_else(bad)?;
    let (s, p) = rest.split_once('p').ok_or_else(bad)?;
    Ok(LayerSpec::Conv {
        out_channels: parse_usize(out, "channel count")?,
        kernel: parse_usize(k, "kernel size")?,
        stride: parse_usize(s, "stride")?,
        padding: parse_usize(p, "padding")?,
    })
}

impl Architecture {
    /// Six 3×3 convolutions (stride-2 every other layer) followed by two FC layers.
    pub fn conv6fc2(input_shape: &[usize], classes: usize) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(Error::format("conv6fc2 needs a CxHxW input shape"));
        }
        let conv = |out_channels, stride| LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        };
        let arch = Self {
            input_shape: input_shape.to_vec(),
            layers: vec![
                conv(16, 1),
                conv(16, 2),
                conv(32, 1),
                conv(32, 2),
                conv(64, 1),
                conv(64, 2),
                LayerSpec::Linear { outputs: 256 },
                LayerSpec::Linear { outputs: classes },
            ],
        };
        arch.geometries()?;
        Ok(arch)
    }

    /// Per-layer shapes, validating that the stack composes.
    pub fn geometries(&self) -> Result<Vec<LayerKind>> {
        if self.layers.is_empty() {
            return Err(Error::format("architecture has no layers"));
        }
        let mut shape = self.input_shape.clone();
        let mut kinds = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let kind = match *spec {
                LayerSpec::Linear { outputs } => {
                    if outputs == 0 {
                        return Err(Error::format(format!("layer {i}: zero outputs")));
                    }
                    let inputs = shape.iter().product();
                    shape = vec![outputs];
                    LayerKind::Linear { inputs, outputs }
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::format(format!(
                            "layer {i}: convolution needs a CxHxW input, got {shape:?}"
                        )));
                    };
                    let g = ConvGeometry::new(c, h, w, out_channels, kernel, stride, padding)
                        .map_err(|e| Error::format(format!("layer {i}: {e}")))?;
                    shape = vec![g.out_channels, g.out_h, g.out_w];
                    LayerKind::Conv(g)
                }
            };
            kinds.push(kind);
        }
        Ok(kinds)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", dims.join("x"))?;
        for l in &self.layers {
            write!(f, "/{l}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("fc:") {
            let sizes = rest
                .split('-')
                .map(|t| parse_usize(t, "layer width"))
                .collect::<Result<Vec<_>>>()?;
            if sizes.len() < 2 || sizes.contains(&0) {
                return Err(Error::format("fc: shorthand needs at least two positive widths"));
            }
            let arch = Self {
                input_shape: vec![sizes[0]],
                layers: sizes[1..]
                    .iter()
                    .map(|&outputs| LayerSpec::Linear { outputs })
                    .collect(),
            };
            arch.geometries()?;
            return Ok(arch);
        }
        if let Some(rest) = s.strip_prefix("conv6fc2:") {
            let (dims, classes) = rest
                .split_once(':')
                .ok_or_else(|| Error::format("conv6fc2 expects conv6fc2:CxHxW:classes"))?;
            return Self::conv6fc2(&parse_dims(dims)?, parse_usize(classes, "class count")?);
        }
        let mut parts = s.split('/');
        let input_shape = parse_dims(parts.next().unwrap_or(""))?;
        let layers = parts
            .map(|tok| {
                if let Some(n) = tok.strip_prefix("fc") {
                    Ok(LayerSpec::Linear {
                        outputs: parse_usize(n, "layer width")?,
                    })
                } else {
                    parse_conv(tok)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let arch = Self {
            input_shape,
            layers,
        };
        arch.geometries()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear { inputs: usize, outputs: usize },
    Conv(ConvGeometry),
}

impl LayerKind {
    pub fn input_len(&self) -> usize {
        match self {
            LayerKind::Linear { inputs, .. } => *inputs,
            LayerKind::Conv(g) => g.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            LayerKind::Linear { outputs, .. } => *outputs,
            LayerKind::Conv(g) => g.output_len(),
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self {
            LayerKind::Linear { inputs, outputs } => vec![*outputs, *inputs],
            LayerKind::Conv(g) => vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            LayerKind::Linear { inputs, .. } => *inputs,
            LayerKind::Conv(g) => g.col_rows(),
        }
    }

    /// Multiply-accumulates for one forward pass of one sample.
    pub fn macs(&self) -> usize {
        match self {
            LayerKind::Linear { inputs, outputs } => inputs * outputs,
            LayerKind::Conv(g) => g.out_channels * g.col_rows() * g.out_pixels(),
        }
    }

    pub fn bias_len(&self) -> usize {
        match self {
            LayerKind::Linear { outputs, .. } => *outputs,
            LayerKind::Conv(g) => g.out_channels,
        }
    }
}

/// One synaptic layer followed by a LIF population.
#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub lif: LifParams,
    pub prunable: bool,
}

impl Layer {
    pub fn new(kind: LayerKind, weight: Tensor, bias: Option<Tensor>, lif: LifParams) -> Result<Self> {
        if weight.shape() != kind.weight_shape().as_slice() {
            return Err(Error::dim(format!(
                "weight shape {:?} does not match layer {:?}",
                weight.shape(),
                kind.weight_shape()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != kind.bias_len() {
                return Err(Error::dim(format!(
                    "bias has {} elements, layer needs {}",
                    b.len(),
                    kind.bias_len()
                )));
            }
        }
        lif.validate()?;
        Ok(Self {
            kind,
            weight,
            bias,
            lif,
            prunable: false,
        })
    }

    /// Dense layer from an `outputs × inputs` weight matrix.
    pub fn linear(weight: Tensor, bias: Option<Tensor>, lif: LifParams) -> Result<Self> {
        let [outputs, inputs] = weight.shape()[..] else {
            return Err(Error::dim("linear weight must be a matrix"));
        };
        Self::new(LayerKind::Linear { inputs, outputs }, weight, bias, lif)
    }
}

/// A feed-forward stack of LIF layers unrolled over `timesteps` steps.
#[derive(Debug, Clone)]
pub struct SpikingNetwork {
    input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    timesteps: usize,
    /// Treat the reset multiplication by `S` as a constant when backpropagating.
    pub detach_reset: bool,
}

impl SpikingNetwork {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, timesteps: usize) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::domain("timesteps must be at least 1"));
        }
        if layers.is_empty() {
            return Err(Error::dim("network needs at least one layer"));
        }
        let mut width: usize = input_shape.iter().product();
        for (i, l) in layers.iter().enumerate() {
            if l.kind.input_len() != width {
                return Err(Error::dim(format!(
                    "layer {i} expects {} inputs but receives {width}",
                    l.kind.input_len()
                )));
            }
            width = l.kind.output_len();
        }
        Ok(Self {
            input_shape,
            layers,
            timesteps,
            detach_reset: true,
        })
    }

    /// Randomly initialised network, weights ~ U(-1/√fan_in, 1/√fan_in).
    pub fn init<R: Rng>(
        arch: &Architecture,
        timesteps: usize,
        lif: LifParams,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = arch
            .geometries()?
            .into_iter()
            .map(|kind| {
                let bound = 1.0 / (kind.fan_in() as f64).sqrt();
                let weight =
                    Tensor::from_fn(&kind.weight_shape(), |_| rng.random_range(-bound..bound))?;
                let bias = if bias {
                    Some(Tensor::from_fn(&[kind.bias_len()], |_| {
                        rng.random_range(-bound..bound)
                    })?)
                } else {
                    None
                };
                Layer::new(kind, weight, bias, lif)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::new(arch.input_shape.clone(), layers, timesteps)?;
        net.mark_prunable(DEFAULT_MIN_PRUNABLE);
        Ok(net)
    }

    /// Flag every layer holding more than `min_weights` weights as prunable.
    pub fn mark_prunable(&mut self, min_weights: usize) {
        for l in &mut self.layers {
            l.prunable = l.weight.len() > min_weights;
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| match l.kind {
                    LayerKind::Linear { outputs, .. } => LayerSpec::Linear { outputs },
                    LayerKind::Conv(g) => LayerSpec::Conv {
                        out_channels: g.out_channels,
                        kernel: g.kernel,
                        stride: g.stride,
                        padding: g.padding,
                    },
                })
                .collect(),
        }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn set_timesteps(&mut self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::domain("timesteps must be at least 1"));
        }
        self.timesteps = t;
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.kind.output_len())
    }

    pub fn prunable_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.prunable)
            .map(|(i, _)| i)
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.as_ref().map_or(0, Tensor::len))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_fc_shorthand() {
        let a: Architecture = "fc:784-400-10".parse().unwrap();
        assert_eq!(a.to_string(), "784/fc400/fc10");
        assert_eq!(a, "784/fc400/fc10".parse().unwrap());
    }

    #[test]
    fn parse_conv_stack() {
        let a: Architecture = "1x8x8/c4k3s2p1/fc10".parse().unwrap();
        let kinds = a.geometries().unwrap();
        match kinds[0] {
            LayerKind::Conv(g) => assert_eq!((g.out_h, g.out_w), (4, 4)),
            _ => panic!(),
        }
        assert_eq!(kinds[1], LayerKind::Linear { inputs: 64, outputs: 10 });
        assert_eq!(a.to_string(), "1x8x8/c4k3s2p1/fc10");
    }

    #[test]
    fn conv6fc2_preset() {
        let a: Architecture = "conv6fc2:1x28x28:10".parse().unwrap();
        assert_eq!(a.layers.len(), 8);
        let kinds = a.geometries().unwrap();
        assert_eq!(kinds.last().unwrap().output_len(), 10);
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["", "fc:", "fc:10", "784", "784/fcx", "0/fc3", "4/c2k3s1p0", "1x2x2/c1k5s1p0", "1x2/fc3"] {
            assert!(bad.parse::<Architecture>().is_err(), "{bad}");
        }
    }

    #[test]
    fn init_marks_large_layers_prunable() {
        let a: Architecture = "fc:784-400-10".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = SpikingNetwork::init(&a, 4, LifParams::default(), false, &mut rng).unwrap();
        assert!(net.layers[0].prunable);
        assert!(!net.layers[1].prunable);
        assert_eq!(net.weight_count(), 784 * 400 + 4000);
        let bound = 1.0 / 28.0;
        assert!(net.layers[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn layers_must_compose() {
        let p = LifParams::default();
        let l1 = Layer::linear(Tensor::zeros(&[3, 2]).unwrap(), None, p).unwrap();
        let l2 = Layer::linear(Tensor::zeros(&[1, 4]).unwrap(), None, p).unwrap();
        assert!(SpikingNetwork::new(vec![2], vec![l1.clone(), l2], 2).is_err());
        assert!(SpikingNetwork::new(vec![2], vec![l1.clone()], 0).is_err());
        assert!(SpikingNetwork::new(vec![2], vec![l1], 1).is_ok());
    }
}
