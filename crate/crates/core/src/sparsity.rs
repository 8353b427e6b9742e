//! Bottom-(s,2) sparsity machinery.
//!
//! `‖v‖²_{s,2}` is the sum of the `⌈s⌉` smallest squares of `v`. It is zero
//! exactly when at least `⌈s⌉` entries are zero, which turns an ℓ0 budget into
//! a continuous equality constraint. The proximal step of the penalty
//! `y·‖W‖²_{s,2}` has a closed form: everything at or below the `⌈s⌉`-th
//! smallest square shrinks by `1/(1 + 2·η₁·y)`, everything above is kept.
//!
//! Sums over the bottom set are taken in ascending order of the squares so
//! that the same prefix always rounds the same way.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::snn::network::{Layer, LayerKind, SpikingNetwork};

/// Accounting threshold below which a weight counts as zero.
pub const DEFAULT_SNAP_EPS: f64 = 1e-8;

/// Whether pruning acts on single weights or on whole columns / filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    #[default]
    Unstructured,
    Structured,
}

fn check_level(s: f64, dim: usize) -> Result<()> {
    if !s.is_finite() || s < 0.0 || s > dim as f64 {
        return Err(Error::domain(format!("sparsity level {s} outside [0, {dim}]")));
    }
    Ok(())
}

fn cmp_sq(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}

/// The `k` smallest squares of `v`, sorted ascending.
fn smallest_squares(v: &[f64], k: usize) -> Vec<f64> {
    let mut sq: Vec<f64> = v.iter().map(|x| x * x).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < sq.len() {
        sq.select_nth_unstable_by(k - 1, cmp_sq);
        sq.truncate(k);
    }
    sq.sort_unstable_by(cmp_sq);
    sq
}

/// Squared bottom-(⌈s⌉,2) norm.
pub fn bottom_s2_sq(v: &[f64], s: f64) -> Result<f64> {
    check_level(s, v.len())?;
    let k = s.ceil() as usize;
    Ok(smallest_squares(v, k).iter().fold(0.0, |a, x| a + x))
}

/// Straight-through derivative of `‖v‖²_{s,2}` in `s`: the forward
/// difference `‖v‖²_{j,2} − ‖v‖²_{j−1,2}` with `j = min(dim, ⌊s⌋+1)`,
/// which is the `j`-th smallest square.
pub fn ste_sparsity_grad(v: &[f64], s: f64) -> Result<f64> {
    check_level(s, v.len())?;
    let j = v.len().min(s.floor() as usize + 1);
    if j == 0 {
        return Ok(0.0);
    }
    let sq = smallest_squares(v, j);
    let below: f64 = sq[..j - 1].iter().fold(0.0, |a, x| a + x);
    Ok((below + sq[j - 1]) - below)
}

/// The `k`-th smallest square (1-based); `None` for `k == 0`.
pub fn kth_smallest_square(v: &[f64], k: usize) -> Option<f64> {
    if k == 0 || k > v.len() {
        return None;
    }
    let mut sq: Vec<f64> = v.iter().map(|x| x * x).collect();
    let (_, kth, _) = sq.select_nth_unstable_by(k - 1, cmp_sq);
    Some(*kth)
}

fn check_prox_args(y: f64, eta1: f64) -> Result<()> {
    if !(y.is_finite() && y >= 0.0) {
        return Err(Error::domain(format!("sparsity dual y must be >= 0, got {y}")));
    }
    if !(eta1.is_finite() && eta1 > 0.0) {
        return Err(Error::domain(format!("eta1 must be > 0, got {eta1}")));
    }
    Ok(())
}

/// Which entries the proximal step shrinks, and by what factor.
///
/// An entry is kept only if its square is strictly above the `⌈s⌉`-th
/// smallest square, so entries tied with the threshold shrink too.
pub fn prox_decay_mask(w_bar: &[f64], s: f64, y: f64, eta1: f64) -> Result<(Vec<bool>, f64)> {
    check_level(s, w_bar.len())?;
    check_prox_args(y, eta1)?;
    let factor = 1.0 / (1.0 + 2.0 * eta1 * y);
    let k = s.ceil() as usize;
    let Some(threshold) = kth_smallest_square(w_bar, k) else {
        return Ok((vec![false; w_bar.len()], factor));
    };
    Ok((w_bar.iter().map(|w| w * w <= threshold).collect(), factor))
}

/// Closed-form proximal operator of `η₁·y·‖W‖²_{⌈s⌉,2}` at `w_bar`.
pub fn prox_sparsity(w_bar: &[f64], s: f64, y: f64, eta1: f64) -> Result<Vec<f64>> {
    let (decay, factor) = prox_decay_mask(w_bar, s, y, eta1)?;
    Ok(w_bar
        .iter()
        .zip(decay)
        .map(|(&w, d)| if d { w * factor } else { w })
        .collect())
}

/// Squares of a vector sorted ascending, for repeated bottom-norm queries.
///
/// Sums run over the sorted prefix in ascending order, so results agree
/// bitwise with [`bottom_s2_sq`] and [`ste_sparsity_grad`].
#[derive(Debug, Clone)]
pub struct SortedSquares {
    sq: Vec<f64>,
}

impl SortedSquares {
    pub fn new(v: &[f64]) -> Self {
        let mut sq: Vec<f64> = v.iter().map(|x| x * x).collect();
        sq.sort_unstable_by(cmp_sq);
        Self { sq }
    }

    pub fn len(&self) -> usize {
        self.sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sq.is_empty()
    }

    pub fn bottom(&self, s: f64) -> Result<f64> {
        check_level(s, self.sq.len())?;
        Ok(self.sq[..s.ceil() as usize].iter().fold(0.0, |a, x| a + x))
    }

    pub fn ste(&self, s: f64) -> Result<f64> {
        check_level(s, self.sq.len())?;
        let j = self.sq.len().min(s.floor() as usize + 1);
        if j == 0 {
            return Ok(0.0);
        }
        let below: f64 = self.sq[..j - 1].iter().fold(0.0, |a, x| a + x);
        Ok((below + self.sq[j - 1]) - below)
    }
}

/// Number of entries with `|v_i| ≤ snap_eps`.
pub fn count_zeros(v: &[f64], snap_eps: f64) -> usize {
    v.iter().filter(|x| x.abs() <= snap_eps).count()
}

/// Indices of the `k` smallest-magnitude entries, ties broken by index.
pub fn bottom_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let k = k.min(v.len());
    if k == 0 {
        return Vec::new();
    }
    let by_mag = |a: &usize, b: &usize| (v[*a] * v[*a]).total_cmp(&(v[*b] * v[*b])).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_mag);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_mag);
    idx
}

/// All indices sorted by ascending magnitude, ties by index.
pub fn ascending_order(v: &[f64]) -> Vec<usize> {
    bottom_indices(v, v.len())
}

/// Number of prunable units a layer exposes, and weights per unit.
///
/// Unstructured: every weight is a unit. Structured: a dense layer's unit
/// is one input column of its `out × in` matrix; a convolution's unit is
/// one output filter.
pub fn layer_units(layer: &Layer, granularity: Granularity) -> (usize, usize) {
    match granularity {
        Granularity::Unstructured => (layer.weight.len(), 1),
        Granularity::Structured => match layer.kind {
            LayerKind::Linear { inputs, outputs } => (inputs, outputs),
            LayerKind::Conv(g) => (g.out_channels, g.col_rows()),
        },
    }
}

/// Apply `f` to every weight slot belonging to unit `unit` of `layer`.
fn for_unit_slots(layer: &Layer, granularity: Granularity, unit: usize, mut f: impl FnMut(usize)) {
    match granularity {
        Granularity::Unstructured => f(unit),
        Granularity::Structured => match layer.kind {
            LayerKind::Linear { inputs, outputs } => (0..outputs).for_each(|r| f(r * inputs + unit)),
            LayerKind::Conv(g) => {
                let size = g.col_rows();
                (unit * size..(unit + 1) * size).for_each(f)
            }
        },
    }
}

/// Contiguous run of view entries owned by one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub start: usize,
    pub len: usize,
    /// Weights per unit in this segment.
    pub unit_size: usize,
}

/// Flat concatenation of prunable units across layers.
///
/// Unstructured views hold raw weights. Structured views hold the ℓ2 norm
/// of each column / filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatView {
    values: Vec<f64>,
    segments: Vec<Segment>,
    granularity: Granularity,
}

impl FlatView {
    /// A single-segment view over raw values, owned by layer 0.
    pub fn from_values(values: Vec<f64>) -> Self {
        let len = values.len();
        Self {
            values,
            segments: vec![Segment {
                layer: 0,
                start: 0,
                len,
                unit_size: 1,
            }],
            granularity: Granularity::Unstructured,
        }
    }

    /// Gather the given layers of `net` into one view.
    pub fn gather(net: &SpikingNetwork, layers: &[usize], granularity: Granularity) -> Self {
        let mut values = Vec::new();
        let mut segments = Vec::with_capacity(layers.len());
        for &li in layers {
            let layer = &net.layers[li];
            let (units, unit_size) = layer_units(layer, granularity);
            let start = values.len();
            match granularity {
                Granularity::Unstructured => values.extend_from_slice(layer.weight.data()),
                Granularity::Structured => {
                    let w = layer.weight.data();
                    for u in 0..units {
                        let mut acc = 0.0;
                        for_unit_slots(layer, granularity, u, |i| acc += w[i] * w[i]);
                        values.push(acc.sqrt());
                    }
                }
            }
            segments.push(Segment {
                layer: li,
                start,
                len: units,
                unit_size,
            });
        }
        Self {
            values,
            segments,
            granularity,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// `(layer, unit offset within that layer)` for view entry `i`.
    pub fn owner(&self, i: usize) -> Option<(usize, usize)> {
        let pos = self.segments.partition_point(|s| s.start + s.len <= i);
        let seg = self.segments.get(pos)?;
        (i >= seg.start && i < seg.start + seg.len).then(|| (seg.layer, i - seg.start))
    }

    /// Multiply every weight of the flagged units by `factor`.
    pub fn scale_units(&self, net: &mut SpikingNetwork, flags: &[bool], factor: f64) {
        debug_assert_eq!(flags.len(), self.values.len());
        for seg in &self.segments {
            let layer = &mut net.layers[seg.layer];
            let flagged = &flags[seg.start..seg.start + seg.len];
            if self.granularity == Granularity::Unstructured {
                for (w, &f) in layer.weight.data_mut().iter_mut().zip(flagged) {
                    if f {
                        *w *= factor;
                    }
                }
                continue;
            }
            let mut slots = Vec::new();
            for (u, &f) in flagged.iter().enumerate() {
                if f {
                    for_unit_slots(layer, self.granularity, u, |i| slots.push(i));
                }
            }
            let w = layer.weight.data_mut();
            for i in slots {
                w[i] *= factor;
            }
        }
    }

    /// Set every weight of the flagged units to exactly `0.0`.
    pub fn zero_units(&self, net: &mut SpikingNetwork, flags: &[bool]) {
        for (layer, mask) in self.weight_mask(net, flags) {
            let w = net.layers[layer].weight.data_mut();
            for (wi, m) in w.iter_mut().zip(mask) {
                if m {
                    *wi = 0.0;
                }
            }
        }
    }

    /// Per-weight mask (true = flagged unit) for every layer in the view.
    pub fn weight_mask(&self, net: &SpikingNetwork, flags: &[bool]) -> Vec<(usize, Vec<bool>)> {
        self.segments
            .iter()
            .map(|seg| {
                let layer = &net.layers[seg.layer];
                let mut mask = vec![false; layer.weight.len()];
                for (u, &f) in flags[seg.start..seg.start + seg.len].iter().enumerate() {
                    if f {
                        for_unit_slots(layer, self.granularity, u, |i| mask[i] = true);
                    }
                }
                (seg.layer, mask)
            })
            .collect()
    }

    /// Per-layer count of entries with magnitude ≤ `eps`.
    pub fn zeros_per_segment(&self, eps: f64) -> Vec<usize> {
        self.segments
            .iter()
            .map(|s| count_zeros(&self.values[s.start..s.start + s.len], eps))
            .collect()
    }
}
