//! Joint descent on weights and sparsity level, ascent on the two duals.
//!
//! One iteration, in order:
//!
//! 1. `W ← prox(W − η₁∇L)`: base optimizer step, then proximal decay of the
//!    bottom-`⌈s⌉` units by `1/(1 + 2η₁y)`;
//! 2. `s ← clamp(s − η₂(y·∂̃‖W‖²_{s,2} + z·∂̃R(s)), 0, N)`;
//! 3. `y ← y + η₃‖W‖²_{⌈s⌉,2}`;
//! 4. `z ← max(0, z + η₄(R(s) − R_budget))`.

pub mod run;
pub mod schedule;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optim::{Optimizer, WeightMask};
use crate::resource::{Assignment, GroupUsage, ResourceModel};
use crate::snn::{LossKind, SpikingNetwork};
use crate::sparsity::{bottom_indices, prox_decay_mask, FlatView, Granularity, SortedSquares};
use crate::tensor::Tensor;
use crate::train::loss_and_gradients;

pub use run::{counted_sparsity, CompressionRun, EpochAccum, IterationRecord, RunObserver, RunPhase, RunSettings};
pub use schedule::{finetune_epochs, schedule_advance, BudgetSchedule, FinetunePolicy, Phase};

/// Learning rates of the weights, `s`, `y` and `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Etas {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
}

impl Default for Etas {
    fn default() -> Self {
        Self {
            eta1: 1e-4,
            eta2: 1.0,
            eta3: 0.1,
            eta4: 1e5,
        }
    }
}

impl Etas {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta1.is_finite() && self.eta1 > 0.0) {
            return Err(Error::domain(format!("eta1 must be > 0, got {}", self.eta1)));
        }
        for (name, v) in [("eta2", self.eta2), ("eta3", self.eta3), ("eta4", self.eta4)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::domain(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One shared sparsity level for all prunable layers, or one per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SparsityMode {
    #[default]
    Global,
    PerLayer,
}

impl fmt::Display for SparsityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SparsityMode::Global => "global",
            SparsityMode::PerLayer => "per-layer",
        })
    }
}

impl FromStr for SparsityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(SparsityMode::Global),
            "per-layer" | "layerwise" => Ok(SparsityMode::PerLayer),
            other => Err(Error::domain(format!("unknown sparsity mode `{other}`"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Unstructured => "unstructured",
            Granularity::Structured => "structured",
        })
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unstructured" => Ok(Granularity::Unstructured),
            "structured" => Ok(Granularity::Structured),
            other => Err(Error::domain(format!("unknown granularity `{other}`"))),
        }
    }
}

/// Layers sharing one `(s, y)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneGroup {
    pub layers: Vec<usize>,
    pub s: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningState {
    pub groups: Vec<PruneGroup>,
    pub z: f64,
    pub etas: Etas,
    pub mode: SparsityMode,
    pub granularity: Granularity,
}

impl PruningState {
    /// Fresh state with `s = y = z = 0` over the prunable layers of `net`.
    pub fn new(net: &SpikingNetwork, mode: SparsityMode, granularity: Granularity, etas: Etas) -> Self {
        let prunable: Vec<usize> = net.prunable_layers().collect();
        let layer_sets: Vec<Vec<usize>> = match mode {
            SparsityMode::Global if prunable.is_empty() => Vec::new(),
            SparsityMode::Global => vec![prunable],
            SparsityMode::PerLayer => prunable.into_iter().map(|l| vec![l]).collect(),
        };
        Self {
            groups: layer_sets
                .into_iter()
                .map(|layers| PruneGroup { layers, s: 0.0, y: 0.0 })
                .collect(),
            z: 0.0,
            etas,
            mode,
            granularity,
        }
    }

    pub fn s_total(&self) -> f64 {
        self.groups.iter().map(|g| g.s).fold(0.0, |a, x| a + x)
    }

    pub fn y_total(&self) -> f64 {
        self.groups.iter().map(|g| g.y).fold(0.0, |a, x| a + x)
    }

    pub fn view(&self, net: &SpikingNetwork, group: usize) -> FlatView {
        FlatView::gather(net, &self.groups[group].layers, self.granularity)
    }

    /// Current unit orders of every group.
    pub fn assignments(&self, net: &SpikingNetwork, rm: &ResourceModel) -> Vec<Assignment> {
        self.groups.iter().map(|g| rm.assignment(net, &g.layers)).collect()
    }

    /// `R` at the current sparsity levels.
    pub fn resource(&self, net: &SpikingNetwork, rm: &ResourceModel) -> Result<f64> {
        let a = self.assignments(net, rm);
        rm.value(&self.usage(&a))
    }

    fn usage<'a>(&self, assignments: &'a [Assignment]) -> Vec<GroupUsage<'a>> {
        self.groups
            .iter()
            .zip(assignments)
            .map(|(g, a)| GroupUsage { s: g.s, assignment: a })
            .collect()
    }

    /// Check the state against `net`: layer indices, `0 ≤ s ≤ N`, `y, z ≥ 0`, finiteness.
    pub fn validate(&self, net: &SpikingNetwork) -> Result<()> {
        self.etas.validate()?;
        let finite = |v: f64, what: String| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite(format!("{what} = {v}")))
            }
        };
        finite(self.z, "z".into())?;
        if self.z < 0.0 {
            return Err(Error::domain(format!("z must be >= 0, got {}", self.z)));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.layers.iter().any(|&l| l >= net.layers.len()) {
                return Err(Error::dim(format!("group {i} names a layer the network lacks")));
            }
            finite(g.s, format!("s[{i}]"))?;
            finite(g.y, format!("y[{i}]"))?;
            let n = self.view(net, i).len() as f64;
            if g.s < 0.0 || g.s > n {
                return Err(Error::domain(format!("s[{i}] = {} outside [0, {n}]", g.s)));
            }
            if g.y < 0.0 {
                return Err(Error::domain(format!("y[{i}] must be >= 0, got {}", g.y)));
            }
        }
        Ok(())
    }
}

/// Steps 1 (proximal part) to 4 of an iteration, applied after the base
/// optimizer has produced `W̄`. Returns `R(s)` at the new sparsity level.
pub fn minimax_update(
    net: &mut SpikingNetwork,
    state: &mut PruningState,
    rm: &ResourceModel,
    r_budget: f64,
) -> Result<f64> {
    let Etas { eta1, eta2, eta3, eta4 } = state.etas;

    for g in 0..state.groups.len() {
        let (s, y) = (state.groups[g].s, state.groups[g].y);
        if y > 0.0 {
            let view = state.view(net, g);
            let (decay, factor) = prox_decay_mask(view.values(), s, y, eta1)?;
            view.scale_units(net, &decay, factor);
        }
    }

    let assignments = state.assignments(net, rm);
    let mut new_s = Vec::with_capacity(state.groups.len());
    let mut sorted: Vec<Option<SortedSquares>> = vec![None; state.groups.len()];
    {
        let usage = state.usage(&assignments);
        for (g, group) in state.groups.iter().enumerate() {
            let n = assignments[g].len() as f64;
            let sparsity_grad = if group.y > 0.0 {
                let sq = sorted[g].get_or_insert_with(|| SortedSquares::new(state.view(net, g).values()));
                group.y * sq.ste(group.s)?
            } else {
                0.0
            };
            let resource_grad = state.z * rm.ste_grad(&usage, g);
            new_s.push((group.s - eta2 * (sparsity_grad + resource_grad)).clamp(0.0, n));
        }
    }

    for (g, s) in new_s.into_iter().enumerate() {
        let group = &mut state.groups[g];
        group.s = s;
        if eta3 > 0.0 && s > 0.0 {
            let sq = sorted[g].get_or_insert_with(|| SortedSquares::new(FlatView::gather(net, &group.layers, state.granularity).values()));
            group.y += eta3 * sq.bottom(s)?;
        }
        if !(group.s.is_finite() && group.y.is_finite()) {
            return Err(Error::NonFinite(format!(
                "group {g}: s = {}, y = {}",
                group.s, group.y
            )));
        }
    }

    let r = rm.value(&state.usage(&assignments))?;
    state.z = (state.z + eta4 * (r - r_budget)).max(0.0);
    if !state.z.is_finite() {
        return Err(Error::NonFinite(format!("z = {} (R = {r})", state.z)));
    }
    Ok(r)
}

/// Loss, accuracy and resource after one full minimax iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub resource: f64,
}

/// One full iteration on a batch: gradients, base optimizer step with
/// learning rate `lr`, then [`minimax_update`].
#[allow(clippy::too_many_arguments)]
pub fn minimax_step(
    net: &mut SpikingNetwork,
    state: &mut PruningState,
    optimizer: &mut Optimizer,
    lr: f64,
    inputs: &Tensor,
    labels: &[usize],
    loss: LossKind,
    rm: &ResourceModel,
    r_budget: f64,
) -> Result<StepStats> {
    let out = loss_and_gradients(net, inputs, labels, loss)?;
    optimizer.step(net, &out.grads, lr, None)?;
    let resource = minimax_update(net, state, rm, r_budget)?;
    Ok(StepStats {
        loss: out.loss,
        correct: out.correct,
        resource,
    })
}

/// Zero the bottom-`⌈s⌉` units of every group, plus any unit whose
/// magnitude is already at most `snap_eps`. Returns the mask of zeroed
/// weight slots; all other weights are left bitwise unchanged.
pub fn snap_to_budget(net: &mut SpikingNetwork, state: &PruningState, snap_eps: f64) -> WeightMask {
    let mut mask = Vec::new();
    for g in 0..state.groups.len() {
        let view = state.view(net, g);
        let k = state.groups[g].s.ceil() as usize;
        let mut flags: Vec<bool> = view.values().iter().map(|v| v.abs() <= snap_eps).collect();
        for i in bottom_indices(view.values(), k) {
            flags[i] = true;
        }
        view.zero_units(net, &flags);
        mask.extend(view.weight_mask(net, &flags));
    }
    mask
}

/// Column-norm view over every prunable layer.
pub fn structured_flatview(net: &SpikingNetwork) -> FlatView {
    let layers: Vec<usize> = net.prunable_layers().collect();
    FlatView::gather(net, &layers, Granularity::Structured)
}

/// Union of two masks over the same layers.
pub(crate) fn merge_masks(a: WeightMask, b: WeightMask) -> WeightMask {
    let mut out = a;
    for (layer, m) in b {
        match out.iter_mut().find(|(l, _)| *l == layer) {
            Some((_, existing)) => existing.iter_mut().zip(m).for_each(|(e, n)| *e |= n),
            None => out.push((layer, m)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resource::ResourceKind;
    use crate::snn::{Layer, LifParams};

    fn one_layer(w: Vec<f64>) -> SpikingNetwork {
        let n = w.len();
        let l = Layer::linear(Tensor::new(vec![1, n], w).unwrap(), None, LifParams::default()).unwrap();
        let mut net = SpikingNetwork::new(vec![n], vec![l], 1).unwrap();
        net.mark_prunable(0);
        net
    }

    fn setup(w: Vec<f64>, etas: Etas) -> (SpikingNetwork, PruningState, ResourceModel) {
        let net = one_layer(w);
        let state = PruningState::new(&net, SparsityMode::Global, Granularity::Unstructured, etas);
        let rm = ResourceModel::new(&net, ResourceKind::Connectivity, Granularity::Unstructured);
        (net, state, rm)
    }

    #[test]
    fn y_update_arithmetic() {
        // bottom-2 squares of W are 1 + 4 = 5 and prox is a no-op at y = 0.1 with tiny eta1
        let etas = Etas {
            eta1: 1e-300,
            eta2: 0.0,
            eta3: 0.1,
            eta4: 0.0,
        };
        let (mut net, mut state, rm) = setup(vec![3.0, -1.0, 2.0], etas);
        state.groups[0].s = 2.0;
        state.groups[0].y = 0.1;
        minimax_update(&mut net, &mut state, &rm, 1.0).unwrap();
        assert!((state.groups[0].y - 0.6).abs() < 1e-15);
    }

    #[test]
    fn z_clamps_at_zero() {
        let etas = Etas {
            eta4: 1e5,
            eta2: 0.0,
            eta3: 0.0,
            ..Default::default()
        };
        let (mut net, mut state, rm) = setup(vec![1.0; 10], etas);
        // R(0) = 1, budget 1.1 -> R - budget = -0.1
        let r = minimax_update(&mut net, &mut state, &rm, 1.1).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(state.z, 0.0);
    }

    #[test]
    fn satisfied_constraints_leave_y_and_shrink_z() {
        let etas = Etas {
            eta1: 0.1,
            eta2: 0.0,
            eta3: 0.1,
            eta4: 1.0,
        };
        let (mut net, mut state, rm) = setup(vec![0.0, 0.0, 5.0, 6.0], etas);
        state.groups[0].s = 2.0;
        state.groups[0].y = 0.3;
        state.z = 0.2;
        let w_before = net.layers[0].weight.clone();
        minimax_update(&mut net, &mut state, &rm, 0.75).unwrap();
        assert_eq!(state.groups[0].y, 0.3);
        assert!(state.z <= 0.2);
        assert_eq!(net.layers[0].weight, w_before);
    }

    #[test]
    fn resource_pressure_raises_s() {
        let etas = Etas {
            eta1: 1e-3,
            eta2: 100.0,
            eta3: 0.0,
            eta4: 1.0,
        };
        let (mut net, mut state, rm) = setup(vec![1.0; 8], etas);
        state.z = 1.0;
        minimax_update(&mut net, &mut state, &rm, 0.5).unwrap();
        // ∂R/∂s = -1/8, so s moves by 100/8
        assert_eq!(state.groups[0].s, 8.0);
    }

    #[test]
    fn snap_zeroes_bottom_and_keeps_rest() {
        let (mut net, mut state, _) = setup(vec![0.5, -0.1, 3.0, 1e-9, -2.0], Etas::default());
        state.groups[0].s = 1.2;
        let mask = snap_to_budget(&mut net, &state, 1e-8);
        assert_eq!(net.layers[0].weight.data(), &[0.5, 0.0, 3.0, 0.0, -2.0]);
        assert_eq!(mask, vec![(0, vec![false, true, false, true, false])]);
    }

    #[test]
    fn structured_view_example() {
        let l = Layer::linear(
            Tensor::new(vec![2, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap(),
            None,
            LifParams::default(),
        )
        .unwrap();
        let mut net = SpikingNetwork::new(vec![2], vec![l], 1).unwrap();
        net.mark_prunable(0);
        assert_eq!(structured_flatview(&net).values(), &[5.0, 0.0]);
    }

    #[test]
    fn validate_catches_bad_state() {
        let (net, mut state, _) = setup(vec![1.0; 4], Etas::default());
        state.validate(&net).unwrap();
        state.groups[0].s = 5.0;
        assert!(state.validate(&net).is_err());
        state.groups[0].s = f64::NAN;
        assert!(matches!(state.validate(&net), Err(Error::NonFinite(_))));
    }
}
