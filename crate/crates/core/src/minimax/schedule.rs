//! Budget list bookkeeping: when to pause pruning and for how long to fine-tune.

use crate::error::{Error, Result};
use crate::optim::LrPolicy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FinetunePolicy {
    /// The same number of epochs for every budget.
    Fixed(usize),
    /// Remaining epochs split in proportion to `1/S_i`.
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSchedule {
    /// Remaining budgets, strictly decreasing, each in `(0, 1)`.
    pub budgets: Vec<f64>,
    pub total_epochs: usize,
    pub policy: FinetunePolicy,
    pub lr_policy: LrPolicy,
}

impl BudgetSchedule {
    pub fn new(budgets: Vec<f64>, total_epochs: usize, policy: FinetunePolicy, lr_policy: LrPolicy) -> Result<Self> {
        validate_budgets(&budgets)?;
        Ok(Self {
            budgets,
            total_epochs,
            policy,
            lr_policy,
        })
    }

    /// Fine-tune length for the head budget after `used` epochs.
    pub fn finetune_len(&self, used: usize) -> Result<usize> {
        match self.policy {
            FinetunePolicy::Fixed(n) => Ok(n),
            FinetunePolicy::Weighted => finetune_epochs(1, &self.budgets, self.total_epochs, used),
        }
    }
}

pub fn validate_budgets(budgets: &[f64]) -> Result<()> {
    for (i, &b) in budgets.iter().enumerate() {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::domain(format!("budget {b} is not in (0, 1)")));
        }
        if i > 0 && b >= budgets[i - 1] {
            return Err(Error::domain(format!(
                "budgets must be strictly decreasing, {} then {b}",
                budgets[i - 1]
            )));
        }
    }
    Ok(())
}

/// Epochs of fine-tuning for budget `i` (1-based) of the remaining list:
/// `round((1/S_i)·(T − C) / Σ_{j≥i} 1/S_j)`, rounding halves up. The last
/// budget receives everything that is left.
pub fn finetune_epochs(i: usize, budgets: &[f64], total_epochs: usize, used_epochs: usize) -> Result<usize> {
    if budgets.is_empty() {
        return Err(Error::domain("no budgets remain"));
    }
    if i == 0 || i > budgets.len() {
        return Err(Error::domain(format!("budget index {i} outside 1..={}", budgets.len())));
    }
    let left = total_epochs.saturating_sub(used_epochs);
    if i == budgets.len() {
        return Ok(left);
    }
    let weight: f64 = budgets[i - 1..].iter().map(|s| 1.0 / s).sum();
    let share = (1.0 / budgets[i - 1]) * left as f64 / weight;
    Ok(((share + 0.5).floor() as usize).min(left))
}

/// What the run should do given the measured resource ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phase {
    Pruning,
    Finetune(f64),
    Done,
}

pub fn schedule_advance(sched: &BudgetSchedule, ratio: f64) -> Phase {
    match sched.budgets.first() {
        None => Phase::Done,
        Some(&head) if ratio <= head => Phase::Finetune(head),
        Some(_) => Phase::Pruning,
    }
}
