//! Resource functions `R(s)` of the global sparsity level.
//!
//! All kinds are ratios in `[0, 1]` relative to the dense network. `s` counts
//! pruning units: single weights, or whole columns / filters in structured
//! mode. Fractional `s` removes that fraction of the next unit's cost.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::snn::{LayerKind, SpikingNetwork};
use crate::sparsity::{ascending_order, count_zeros, layer_units, FlatView, Granularity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResourceKind {
    /// Fraction of prunable units still present.
    #[default]
    Connectivity,
    /// Fraction of all parameters (weights and biases, every layer) still present.
    Parameters,
    /// Fraction of forward multiply-accumulates still required.
    Flops,
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceKind::Connectivity => "connectivity",
            ResourceKind::Parameters => "parameters",
            ResourceKind::Flops => "flops",
        })
    }
}

impl FromStr for ResourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "connectivity" => Ok(ResourceKind::Connectivity),
            "parameters" | "params" => Ok(ResourceKind::Parameters),
            "flops" => Ok(ResourceKind::Flops),
            other => Err(Error::domain(format!("unknown resource kind `{other}`"))),
        }
    }
}

/// Cost layout of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCost {
    pub layer: usize,
    pub prunable: bool,
    pub units: usize,
    /// Resource removed when one unit is pruned.
    pub unit_cost: f64,
}

/// Cost of each unit in the order pruning removes them.
#[derive(Debug, Clone, PartialEq)]
pub enum Assignment {
    Uniform { units: usize, cost: f64 },
    /// Per-unit costs, with prefix sums (`prefix[k]` = cost of the first `k`).
    Ordered { costs: Vec<f64>, prefix: Vec<f64> },
}

impl Assignment {
    pub fn uniform(units: usize, cost: f64) -> Self {
        Assignment::Uniform { units, cost }
    }

    pub fn ordered(costs: Vec<f64>) -> Self {
        let mut prefix = Vec::with_capacity(costs.len() + 1);
        let mut acc = 0.0;
        prefix.push(acc);
        for c in &costs {
            acc += c;
            prefix.push(acc);
        }
        Assignment::Ordered { costs, prefix }
    }

    pub fn len(&self) -> usize {
        match self {
            Assignment::Uniform { units, .. } => *units,
            Assignment::Ordered { costs, .. } => costs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cost removed by pruning the first `s` units.
    pub fn removed(&self, s: f64) -> f64 {
        match self {
            Assignment::Uniform { cost, .. } => s * cost,
            Assignment::Ordered { costs, prefix } => {
                let k = (s.floor() as usize).min(costs.len());
                let frac = s - k as f64;
                let partial = if frac > 0.0 { frac * costs[k] } else { 0.0 };
                prefix[k] + partial
            }
        }
    }
}

/// `s` value of one pruning group together with its unit order.
#[derive(Debug, Clone, Copy)]
pub struct GroupUsage<'a> {
    pub s: f64,
    pub assignment: &'a Assignment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceModel {
    kind: ResourceKind,
    granularity: Granularity,
    layers: Vec<LayerCost>,
    total: f64,
}

impl ResourceModel {
    pub fn new(net: &SpikingNetwork, kind: ResourceKind, granularity: Granularity) -> Self {
        let kind = if kind == ResourceKind::Flops && granularity == Granularity::Unstructured {
            log::warn!("flops budget needs structured pruning; counting parameters instead");
            ResourceKind::Parameters
        } else {
            kind
        };
        let layers: Vec<LayerCost> = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (units, unit_size) = layer_units(l, granularity);
                let unit_cost = match kind {
                    ResourceKind::Connectivity => 1.0,
                    ResourceKind::Parameters => unit_size as f64,
                    ResourceKind::Flops => match (granularity, l.kind) {
                        (Granularity::Structured, LayerKind::Linear { outputs, .. }) => outputs as f64,
                        (Granularity::Structured, LayerKind::Conv(g)) => (g.col_rows() * g.out_pixels()) as f64,
                        (Granularity::Unstructured, _) => unreachable!("degraded above"),
                    },
                };
                LayerCost {
                    layer: i,
                    prunable: l.prunable,
                    units,
                    unit_cost,
                }
            })
            .collect();
        let total = match kind {
            ResourceKind::Connectivity => layers.iter().filter(|l| l.prunable).map(|l| l.units).sum::<usize>(),
            ResourceKind::Parameters => net.parameter_count(),
            ResourceKind::Flops => net.layers.iter().map(|l| l.kind.macs()).sum(),
        } as f64;
        Self {
            kind,
            granularity,
            layers,
            total,
        }
    }

    pub fn kind(&self) -> ResourceKind {
        self.kind
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn layers(&self) -> &[LayerCost] {
        &self.layers
    }

    /// Resource of the dense network in this model's units.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// Number of prunable units `N`.
    pub fn prunable_units(&self) -> usize {
        self.layers.iter().filter(|l| l.prunable).map(|l| l.units).sum()
    }

    /// Unit order for a pruning group, taken from the current weights.
    pub fn assignment(&self, net: &SpikingNetwork, group: &[usize]) -> Assignment {
        let units: usize = group.iter().map(|&l| self.layers[l].units).sum();
        let first = group.first().map_or(0.0, |&l| self.layers[l].unit_cost);
        if group.iter().all(|&l| self.layers[l].unit_cost == first) {
            return Assignment::uniform(units, first);
        }
        let view = FlatView::gather(net, group, self.granularity);
        let costs = ascending_order(view.values())
            .into_iter()
            .map(|i| self.layers[view.owner(i).expect("index in view").0].unit_cost)
            .collect();
        Assignment::ordered(costs)
    }

    /// `R` for the given per-group sparsity levels.
    pub fn value(&self, groups: &[GroupUsage]) -> Result<f64> {
        let mut removed = 0.0;
        for g in groups {
            let n = g.assignment.len() as f64;
            if !g.s.is_finite() || g.s < 0.0 || g.s > n {
                return Err(Error::domain(format!("sparsity level {} outside [0, {n}]", g.s)));
            }
            removed += g.assignment.removed(g.s);
        }
        if self.total == 0.0 {
            return Ok(1.0);
        }
        Ok((self.total - removed) / self.total)
    }

    /// Forward-difference slope of `R` in the `s` of group `which`, one
    /// unit wide (shorter at the upper end, zero at `s = N`).
    pub fn ste_grad(&self, groups: &[GroupUsage], which: usize) -> f64 {
        let g = groups[which];
        let n = g.assignment.len() as f64;
        let delta = (n - g.s).min(1.0);
        if delta <= 0.0 || self.total == 0.0 {
            return 0.0;
        }
        match g.assignment {
            Assignment::Uniform { cost, .. } => -cost / self.total,
            a => -(a.removed(g.s + delta) - a.removed(g.s)) / (self.total * delta),
        }
    }

    /// Per-layer zero accounting of the current weights.
    pub fn layer_report(&self, net: &SpikingNetwork, snap_eps: f64) -> Vec<LayerUsage> {
        self.layers
            .iter()
            .map(|c| {
                let l = &net.layers[c.layer];
                let view = FlatView::gather(net, &[c.layer], self.granularity);
                LayerUsage {
                    layer: c.layer,
                    prunable: c.prunable,
                    weights: l.weight.len(),
                    zero_weights: count_zeros(l.weight.data(), snap_eps),
                    units: c.units,
                    zero_units: count_zeros(view.values(), snap_eps),
                    unit_cost: c.unit_cost,
                }
            })
            .collect()
    }

    /// Resource actually used by `net`, counting units with norm ≤ `snap_eps`
    /// in prunable layers as removed.
    pub fn measured(&self, net: &SpikingNetwork, snap_eps: f64) -> f64 {
        if self.total == 0.0 {
            return 1.0;
        }
        let removed: f64 = self
            .layers
            .iter()
            .filter(|c| c.prunable)
            .map(|c| {
                let view = FlatView::gather(net, &[c.layer], self.granularity);
                count_zeros(view.values(), snap_eps) as f64 * c.unit_cost
            })
            .sum();
        (self.total - removed) / self.total
    }
}

/// Zero counts for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerUsage {
    pub layer: usize,
    pub prunable: bool,
    pub weights: usize,
    pub zero_weights: usize,
    pub units: usize,
    pub zero_units: usize,
    pub unit_cost: f64,
}

/// `R(s)` for a single pruning group.
pub fn resource_value(m: &ResourceModel, s: f64, assignment: &Assignment) -> Result<f64> {
    m.value(&[GroupUsage { s, assignment }])
}

/// `∂R/∂s` estimate for a single pruning group.
pub fn ste_resource_grad(m: &ResourceModel, s: f64, assignment: &Assignment) -> f64 {
    m.ste_grad(&[GroupUsage { s, assignment }], 0)
}
