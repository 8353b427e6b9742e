//! Discrete leaky integrate-and-fire dynamics.
//!
//! ```text
//! H[t] = V[t-1] + (-(V[t-1] - V_rest) + X[t]) / tau_m
//! S[t] = Θ(H[t] - V_th)
//! V[t] = S[t]·V_rest + (1 - S[t])·H[t]
//! ```

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Membrane constants shared by every neuron of a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub tau_m: f64,
    pub v_rest: f64,
    pub v_th: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau_m: 2.0,
            v_rest: 0.0,
            v_th: 1.0,
        }
    }
}

impl LifParams {
    pub fn new(tau_m: f64, v_rest: f64, v_th: f64) -> Result<Self> {
        let p = Self { tau_m, v_rest, v_th };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m.is_finite() && self.tau_m > 0.0) {
            return Err(Error::domain(format!("tau_m must be > 0, got {}", self.tau_m)));
        }
        if !(self.v_rest.is_finite() && self.v_th.is_finite() && self.v_th > self.v_rest) {
            return Err(Error::domain(format!(
                "v_th ({}) must exceed v_rest ({})",
                self.v_th, self.v_rest
            )));
        }
        Ok(())
    }

    /// Charge step: potential after integrating input `x` from potential `v`.
    #[inline]
    pub fn charge(&self, v: f64, x: f64) -> f64 {
        v + (-(v - self.v_rest) + x) / self.tau_m
    }

    /// `∂H/∂V` of the charge step.
    #[inline]
    pub fn leak_factor(&self) -> f64 {
        1.0 - 1.0 / self.tau_m
    }

    /// `∂H/∂X` of the charge step.
    #[inline]
    pub fn input_gain(&self) -> f64 {
        1.0 / self.tau_m
    }
}

/// Θ(x): 1 for x ≥ 0, else 0.
#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Shifted ArcTan `h(u) = atan(πu)/π + 1/2`, the smooth stand-in for Θ.
#[inline]
pub fn smooth_spike(u: f64) -> f64 {
    (PI * u).atan() / PI + 0.5
}

/// `h'(u) = 1 / (1 + π²u²)`, used in place of `∂S/∂H` when backpropagating.
#[inline]
pub fn surrogate_derivative(u: f64) -> f64 {
    1.0 / (1.0 + PI * PI * u * u)
}

/// Membrane state of a population plus the per-step history needed for backward.
#[derive(Debug, Clone)]
pub struct LifState {
    v: Vec<f64>,
    shape: Vec<usize>,
    h_history: Vec<Vec<f64>>,
    s_history: Vec<Vec<f64>>,
    v_history: Vec<Vec<f64>>,
}

impl LifState {
    /// Fresh population resting at `v_rest`.
    pub fn new(shape: &[usize], params: &LifParams) -> Result<Self> {
        let v = Tensor::full(shape, params.v_rest)?;
        Ok(Self {
            shape: shape.to_vec(),
            v: v.into_data(),
            h_history: Vec::new(),
            s_history: Vec::new(),
            v_history: Vec::new(),
        })
    }

    pub fn from_potentials(v: Tensor) -> Self {
        Self {
            shape: v.shape().to_vec(),
            v: v.into_data(),
            h_history: Vec::new(),
            s_history: Vec::new(),
            v_history: Vec::new(),
        }
    }

    pub fn potentials(&self) -> &[f64] {
        &self.v
    }

    pub fn steps(&self) -> usize {
        self.s_history.len()
    }

    pub fn h_history(&self) -> &[Vec<f64>] {
        &self.h_history
    }

    pub fn s_history(&self) -> &[Vec<f64>] {
        &self.s_history
    }

    pub fn v_history(&self) -> &[Vec<f64>] {
        &self.v_history
    }

    /// Advance one timestep with input current `x`, returning the spike tensor.
    pub fn step(&mut self, x: &Tensor, params: &LifParams) -> Result<Tensor> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::dim(format!(
                "input shape {:?} does not match state shape {:?}",
                x.shape(),
                self.shape
            )));
        }
        let mut h = Vec::with_capacity(self.v.len());
        let mut s = Vec::with_capacity(self.v.len());
        for (v, &xi) in self.v.iter_mut().zip(x.data()) {
            let hi = params.charge(*v, xi);
            let si = heaviside(hi - params.v_th);
            *v = si * params.v_rest + (1.0 - si) * hi;
            h.push(hi);
            s.push(si);
        }
        self.h_history.push(h);
        self.s_history.push(s.clone());
        self.v_history.push(self.v.clone());
        Tensor::new(self.shape.clone(), s)
    }
}

/// Functional form of [`LifState::step`].
pub fn lif_step(mut state: LifState, x: &Tensor, params: &LifParams) -> Result<(Tensor, LifState)> {
    let spikes = state.step(x, params)?;
    Ok((spikes, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn heaviside_edges() {
        assert_eq!(heaviside(0.0), 1.0);
        assert_eq!(heaviside(-0.1), 0.0);
        assert_eq!(heaviside(5.0), 1.0);
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_derivative(0.0), 1.0);
        let want = 1.0 / (1.0 + PI * PI);
        assert!((surrogate_derivative(1.0) - want).abs() < 1e-15);
        assert!((surrogate_derivative(1.0) - 0.09199).abs() < 1e-5);
        let mut prev = 1.0;
        for i in 1..50 {
            let u = i as f64 * 0.5;
            let d = surrogate_derivative(u);
            assert!(d < prev);
            assert_eq!(d, surrogate_derivative(-u));
            prev = d;
        }
        assert!(surrogate_derivative(1e8) < 1e-16);
    }

    #[test]
    fn surrogate_is_derivative_of_smooth_spike() {
        for &u in &[-2.0, -0.3, 0.0, 0.1, 1.7] {
            let eps = 1e-6;
            let fd = (smooth_spike(u + eps) - smooth_spike(u - eps)) / (2.0 * eps);
            assert!((fd - surrogate_derivative(u)).abs() < 1e-8);
        }
        assert_eq!(smooth_spike(0.0), 0.5);
    }

    #[test]
    fn hand_traced_steps() {
        let p = LifParams::default();
        // (X, H, S, V')
        for &(x, h, s, v) in &[(1.0, 0.5, 0.0, 0.5), (3.0, 1.5, 1.0, 0.0), (0.0, 0.0, 0.0, 0.0)] {
            let state = LifState::new(&[1], &p).unwrap();
            let (spikes, state) = lif_step(state, &one(x), &p).unwrap();
            assert_eq!(spikes.data(), &[s]);
            assert_eq!(state.h_history()[0], vec![h]);
            assert_eq!(state.potentials(), &[v]);
            assert_eq!(state.steps(), 1);
        }
    }

    #[test]
    fn reset_to_rest_after_spike() {
        let p = LifParams::new(4.0, -0.5, 0.25).unwrap();
        let mut state = LifState::new(&[3], &p).unwrap();
        let x = Tensor::new(vec![3], vec![10.0, 0.2, 3.0]).unwrap();
        for _ in 0..6 {
            let s = state.step(&x, &p).unwrap();
            for (si, vi) in s.data().iter().zip(state.potentials()) {
                assert!(*si == 0.0 || *si == 1.0);
                if *si == 1.0 {
                    assert_eq!(*vi, p.v_rest);
                }
            }
        }
        assert_eq!(state.steps(), 6);
        assert_eq!(state.v_history().len(), 6);
    }

    #[test]
    fn quiescent_population_stays_at_rest() {
        let p = LifParams::default();
        let mut state = LifState::new(&[4], &p).unwrap();
        let x = Tensor::zeros(&[4]).unwrap();
        for _ in 0..10 {
            let s = state.step(&x, &p).unwrap();
            assert!(s.data().iter().all(|&v| v == 0.0));
            assert!(state.potentials().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = LifParams::default();
        let mut state = LifState::new(&[2], &p).unwrap();
        assert!(state.step(&one(1.0), &p).is_err());
    }

    #[test]
    fn invalid_params() {
        assert!(LifParams::new(0.0, 0.0, 1.0).is_err());
        assert!(LifParams::new(2.0, 1.0, 1.0).is_err());
        assert!(LifParams::new(2.0, 0.0, 1.0).is_ok());
    }
}
