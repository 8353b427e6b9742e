//! The full compression run: minimax iterations, budget-triggered snaps,
//! fine-tune phases and per-budget snapshots.
//!
//! A run is a state machine advanced one batch at a time, so it can be
//! checkpointed between any two iterations and resumed bit-exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schedule::{schedule_advance, BudgetSchedule, Phase};
use super::{merge_masks, minimax_update, snap_to_budget, PruningState};
use crate::data::checkpoint::{Checkpoint, OptimizerRecord, ResumeState, RngState};
use crate::data::{Dataset, EpochRow};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind, WeightMask};
use crate::resource::{ResourceKind, ResourceModel};
use crate::snn::{LossKind, SpikingNetwork};
use crate::sparsity::count_zeros;
use crate::train::{evaluate, loss_and_gradients};

/// Training-loop settings that are not part of the pruning state.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    /// Magnitudes at or below this count as zero when snapping.
    pub snap_eps: f64,
    /// Release the fine-tune mask when pruning resumes.
    pub regrow: bool,
    /// Hard stop when budgets are still pending; 0 means twice the epoch budget.
    pub epoch_cap: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            batch_size: 100,
            lr: 1e-4,
            optimizer: OptimizerKind::adam(),
            loss: LossKind::Mse,
            snap_eps: crate::sparsity::DEFAULT_SNAP_EPS,
            regrow: true,
            epoch_cap: 0,
            eval_batch: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunPhase {
    Pruning,
    Finetune {
        budget: f64,
        /// Full fine-tune epochs still to run.
        epochs_left: u64,
        /// The epoch in which the budget was met has not finished yet.
        partial: bool,
        iter: u64,
        iters_total: u64,
    },
    Done,
}

/// Running sums over the current epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochAccum {
    pub loss_sum: f64,
    pub batches: u64,
    pub correct: u64,
    pub seen: u64,
}

/// State after one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub finetune: bool,
    pub loss: f64,
    pub s: f64,
    pub y: f64,
    pub z: f64,
    pub resource: f64,
}

/// Hooks called by [`CompressionRun`]. All methods default to no-ops.
pub trait RunObserver {
    fn iteration(&mut self, _record: &IterationRecord) {}

    fn epoch(&mut self, _row: &EpochRow) -> Result<()> {
        Ok(())
    }

    /// A budget's fine-tune phase finished; `run` holds the snapshot to save.
    fn budget_reached(&mut self, _budget: f64, _accuracy: f64, _run: &CompressionRun) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

pub struct CompressionRun {
    net: SpikingNetwork,
    state: PruningState,
    rm: ResourceModel,
    schedule: BudgetSchedule,
    settings: RunSettings,
    optimizer: Optimizer,
    pure_training: bool,
    phase: RunPhase,
    mask: Option<WeightMask>,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    cursor: usize,
    epoch: u64,
    iteration: u64,
    accum: EpochAccum,
    last_resource: f64,
}

fn check_settings(s: &RunSettings) -> Result<()> {
    if s.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if !(s.lr.is_finite() && s.lr > 0.0) {
        return Err(Error::config("lr", format!("must be > 0, got {}", s.lr)));
    }
    if !(s.snap_eps.is_finite() && s.snap_eps >= 0.0) {
        return Err(Error::config("snap_eps", "must be >= 0"));
    }
    Ok(())
}

impl CompressionRun {
    pub fn new(
        net: SpikingNetwork,
        state: PruningState,
        resource: ResourceKind,
        schedule: BudgetSchedule,
        settings: RunSettings,
    ) -> Result<Self> {
        check_settings(&settings)?;
        state.validate(&net)?;
        let rm = ResourceModel::new(&net, resource, state.granularity);
        let optimizer = Optimizer::new(settings.optimizer, &net);
        let last_resource = state.resource(&net, &rm)?;
        Ok(Self {
            pure_training: schedule.budgets.is_empty(),
            rng: ChaCha8Rng::seed_from_u64(settings.seed),
            net,
            state,
            rm,
            schedule,
            settings,
            optimizer,
            phase: RunPhase::Pruning,
            mask: None,
            perm: Vec::new(),
            cursor: 0,
            epoch: 0,
            iteration: 0,
            accum: EpochAccum::default(),
            last_resource,
        })
    }

    /// Continue a run from a checkpoint written by [`CompressionRun::checkpoint`].
    pub fn resume(ck: &Checkpoint, schedule: BudgetSchedule, settings: RunSettings) -> Result<Self> {
        check_settings(&settings)?;
        let resume = ck
            .resume
            .as_ref()
            .ok_or_else(|| Error::format("checkpoint has no resume section"))?;
        let net = ck.network()?;
        ck.pruning.validate(&net)?;
        let rm = ResourceModel::new(&net, ck.resource, ck.pruning.granularity);
        let o = &resume.optimizer;
        let optimizer = Optimizer::from_parts(o.kind, o.steps, o.first.clone(), o.second.clone(), &net)?;
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_stream(ck.rng.stream);
        rng.set_word_pos(ck.rng.word_pos);
        let schedule = BudgetSchedule {
            budgets: resume.budgets.clone(),
            ..schedule
        };
        Ok(Self {
            net,
            state: ck.pruning.clone(),
            rm,
            schedule,
            settings,
            optimizer,
            pure_training: resume.pure_training,
            phase: resume.phase,
            mask: resume.mask.clone(),
            rng,
            perm: resume.perm.clone(),
            cursor: resume.cursor,
            epoch: ck.epoch,
            iteration: ck.iteration,
            accum: resume.accum,
            last_resource: resume.last_resource,
        })
    }

    pub fn net(&self) -> &SpikingNetwork {
        &self.net
    }

    pub fn into_net(self) -> SpikingNetwork {
        self.net
    }

    pub fn state(&self) -> &PruningState {
        &self.state
    }

    pub fn resource_model(&self) -> &ResourceModel {
        &self.rm
    }

    pub fn phase(&self) -> RunPhase {
        self.phase
    }

    pub fn is_done(&self) -> bool {
        self.phase == RunPhase::Done
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn remaining_budgets(&self) -> &[f64] {
        &self.schedule.budgets
    }

    /// Model value `R(s)` after the last iteration.
    pub fn resource(&self) -> f64 {
        self.last_resource
    }

    /// Fraction of exact-zero weights among prunable weights (all weights if none are prunable).
    pub fn counted_sparsity(&self) -> f64 {
        counted_sparsity(&self.net)
    }

    /// Snapshot of the full run state.
    pub fn checkpoint(&self, budget_tag: Option<f64>, accuracy: Option<f64>) -> Checkpoint {
        let mut ck = Checkpoint::from_network(
            &self.net,
            self.state.clone(),
            self.rm.kind(),
            RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
        );
        ck.budget_tag = budget_tag;
        ck.accuracy = accuracy;
        ck.epoch = self.epoch;
        ck.iteration = self.iteration;
        ck.resume = Some(ResumeState {
            optimizer: OptimizerRecord {
                kind: self.optimizer.kind(),
                steps: self.optimizer.steps(),
                first: self.optimizer.first_moments().to_vec(),
                second: self.optimizer.second_moments().to_vec(),
            },
            budgets: self.schedule.budgets.clone(),
            pure_training: self.pure_training,
            phase: self.phase,
            mask: self.mask.clone(),
            perm: self.perm.clone(),
            cursor: self.cursor,
            accum: self.accum,
            last_resource: self.last_resource,
        });
        ck
    }

    fn r_budget(&self) -> f64 {
        self.schedule.budgets.first().copied().unwrap_or(1.0)
    }

    fn epoch_cap(&self) -> u64 {
        match self.settings.epoch_cap {
            0 => 2 * self.schedule.total_epochs as u64,
            c => c as u64,
        }
    }

    fn phase_label(&self) -> &'static str {
        match self.phase {
            RunPhase::Finetune { .. } => "finetune",
            _ if self.pure_training => "train",
            _ => "prune",
        }
    }

    /// Run to completion.
    pub fn run(&mut self, train: &Dataset, test: Option<&Dataset>, obs: &mut dyn RunObserver) -> Result<()> {
        while self.step(train, test, obs)? {}
        Ok(())
    }

    /// Run at most `iterations` more iterations. Returns `false` once the run is done.
    pub fn run_for(
        &mut self,
        iterations: u64,
        train: &Dataset,
        test: Option<&Dataset>,
        obs: &mut dyn RunObserver,
    ) -> Result<bool> {
        for _ in 0..iterations {
            if !self.step(train, test, obs)? {
                return Ok(false);
            }
        }
        Ok(!self.is_done())
    }

    /// One iteration. Returns `false` when there is nothing left to do.
    pub fn step(&mut self, train: &Dataset, test: Option<&Dataset>, obs: &mut dyn RunObserver) -> Result<bool> {
        if self.phase == RunPhase::Done {
            return Ok(false);
        }
        if self.pure_training && self.epoch >= self.schedule.total_epochs as u64 {
            self.phase = RunPhase::Done;
            return Ok(false);
        }
        if train.is_empty() {
            return Err(Error::domain("training set is empty"));
        }
        if train.features() != self.net.input_len() || train.classes() > self.net.output_len() {
            return Err(Error::dim(format!(
                "dataset with {} features / {} classes does not fit network {}",
                train.features(),
                train.classes(),
                self.net.architecture()
            )));
        }
        if self.cursor == 0 {
            self.perm = (0..train.len()).collect();
            self.perm.shuffle(&mut self.rng);
        } else if self.perm.len() != train.len() {
            return Err(Error::State("resumed on a training set of a different size".into()));
        }
        let end = (self.cursor + self.settings.batch_size).min(train.len());
        let (x, labels) = train.batch(&self.perm[self.cursor..end])?;
        self.cursor = end;

        let out = loss_and_gradients(&self.net, &x, &labels, self.settings.loss)?;
        let mut budget_met = false;
        match &mut self.phase {
            RunPhase::Pruning => {
                let mask = if self.settings.regrow { None } else { self.mask.as_ref() };
                self.optimizer.step(&mut self.net, &out.grads, self.settings.lr, mask)?;
                if !self.pure_training {
                    let r_budget = self.r_budget();
                    self.last_resource = minimax_update(&mut self.net, &mut self.state, &self.rm, r_budget)?;
                    budget_met = !self.schedule.budgets.is_empty() && self.last_resource <= r_budget;
                }
            }
            RunPhase::Finetune { iter, iters_total, .. } => {
                let lr = self.schedule.lr_policy.rate(self.settings.lr, *iter, *iters_total);
                *iter += 1;
                self.optimizer.step(&mut self.net, &out.grads, lr, self.mask.as_ref())?;
            }
            RunPhase::Done => unreachable!(),
        }
        self.iteration += 1;
        self.accum.loss_sum += out.loss;
        self.accum.batches += 1;
        self.accum.correct += out.correct as u64;
        self.accum.seen += labels.len() as u64;
        obs.iteration(&IterationRecord {
            iteration: self.iteration,
            epoch: self.epoch,
            finetune: matches!(self.phase, RunPhase::Finetune { .. }),
            loss: out.loss,
            s: self.state.s_total(),
            y: self.state.y_total(),
            z: self.state.z,
            resource: self.last_resource,
        });

        if budget_met {
            self.on_budget_met(train, test, obs)?;
        }
        if self.cursor >= train.len() || self.phase == RunPhase::Done {
            self.end_epoch(train, test, obs)?;
        }
        Ok(self.phase != RunPhase::Done)
    }

    fn accuracy(&self, test: Option<&Dataset>) -> Result<f64> {
        match test {
            Some(t) => evaluate(&self.net, t, self.settings.eval_batch),
            None if self.accum.seen > 0 => Ok(self.accum.correct as f64 / self.accum.seen as f64),
            None => Ok(0.0),
        }
    }

    fn on_budget_met(&mut self, train: &Dataset, test: Option<&Dataset>, obs: &mut dyn RunObserver) -> Result<()> {
        let snapped = snap_to_budget(&mut self.net, &self.state, self.settings.snap_eps);
        self.mask = Some(match self.mask.take() {
            Some(old) if !self.settings.regrow => merge_masks(old, snapped),
            _ => snapped,
        });
        let measured = self.rm.measured(&self.net, self.settings.snap_eps);
        let budget = match schedule_advance(&self.schedule, measured) {
            Phase::Finetune(b) => b,
            _ => {
                log::warn!("snap left resource at {measured}, above budget {}; pruning continues", self.r_budget());
                if self.settings.regrow {
                    self.mask = None;
                }
                return Ok(());
            }
        };
        let used = (self.epoch + 1) as usize;
        let epochs = if used >= self.schedule.total_epochs {
            0
        } else {
            self.schedule.finetune_len(used)?
        };
        log::info!(
            "budget {budget} met at iteration {} (measured {measured:.6}); fine-tuning {epochs} epochs",
            self.iteration
        );
        if epochs == 0 {
            let acc = self.accuracy(test)?;
            return self.finish_budget(budget, acc, obs);
        }
        self.optimizer.reset();
        let per_epoch = train.len().div_ceil(self.settings.batch_size) as u64;
        let rest = (train.len() - self.cursor).div_ceil(self.settings.batch_size) as u64;
        self.phase = RunPhase::Finetune {
            budget,
            epochs_left: epochs as u64,
            partial: true,
            iter: 0,
            iters_total: rest + epochs as u64 * per_epoch,
        };
        Ok(())
    }

    fn finish_budget(&mut self, budget: f64, accuracy: f64, obs: &mut dyn RunObserver) -> Result<()> {
        obs.budget_reached(budget, accuracy, self)?;
        self.schedule.budgets.remove(0);
        if self.settings.regrow {
            self.mask = None;
        }
        self.phase = if self.schedule.budgets.is_empty() {
            RunPhase::Done
        } else {
            RunPhase::Pruning
        };
        Ok(())
    }

    fn end_epoch(&mut self, _train: &Dataset, test: Option<&Dataset>, obs: &mut dyn RunObserver) -> Result<()> {
        self.epoch += 1;
        self.cursor = 0;
        let acc = self.accuracy(test)?;
        let row = EpochRow {
            epoch: self.epoch,
            phase: self.phase_label().to_string(),
            loss: self.accum.loss_sum / self.accum.batches.max(1) as f64,
            acc,
            s: self.state.s_total(),
            y: self.state.y_total(),
            z: self.state.z,
            resource: self.last_resource,
            counted_sparsity: self.counted_sparsity(),
        };
        log::info!(
            "epoch {} [{}] loss {:.5} acc {:.4} s {:.1} y {:.4} z {:.4} R {:.5} sparsity {:.5}",
            row.epoch,
            row.phase,
            row.loss,
            row.acc,
            row.s,
            row.y,
            row.z,
            row.resource,
            row.counted_sparsity
        );
        obs.epoch(&row)?;
        self.accum = EpochAccum::default();

        match &mut self.phase {
            RunPhase::Finetune {
                budget,
                epochs_left,
                partial,
                ..
            } => {
                if *partial {
                    *partial = false;
                } else {
                    *epochs_left -= 1;
                }
                if *epochs_left == 0 {
                    let budget = *budget;
                    self.finish_budget(budget, acc, obs)?;
                }
            }
            RunPhase::Pruning => {
                if self.pure_training && self.epoch >= self.schedule.total_epochs as u64 {
                    self.phase = RunPhase::Done;
                } else if !self.pure_training && self.epoch >= self.epoch_cap() {
                    log::warn!(
                        "stopping at epoch {} with budgets {:?} unmet",
                        self.epoch,
                        self.schedule.budgets
                    );
                    self.phase = RunPhase::Done;
                }
            }
            RunPhase::Done => {}
        }
        Ok(())
    }
}

pub fn counted_sparsity(net: &SpikingNetwork) -> f64 {
    let prunable: Vec<usize> = net.prunable_layers().collect();
    let layers: Vec<usize> = if prunable.is_empty() {
        (0..net.layers.len()).collect()
    } else {
        prunable
    };
    let (zeros, total) = layers.iter().fold((0, 0), |(z, t), &l| {
        let w = net.layers[l].weight.data();
        (z + count_zeros(w, 0.0), t + w.len())
    });
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}
