//! Entropy-based super-network shrinking: the full search controller.
//!
//! A search runs `r_init` rounds. Each round reinitializes the model
//! parameters (alphas persist and keep accumulating architectural
//! knowledge), trains both parameter sets against cross-entropy for
//! `t_warm` epochs, then optimizes the alphas alone against
//! `CE + sum_k lambda_k * H_k` for the remaining epochs. After every
//! alpha step the super-network is threshold-pruned, cell entropies are
//! re-measured, and each `lambda_k` is scaled up (`c1`) when the realized
//! entropy drop fell short of the per-step budget or down (`c2`)
//! otherwise. Each round ends with an architecture snapshot.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::optim::{adam_step_slot, AdamParams, AdamState};
use crate::autodiff::TensorId;
use crate::data::Dataset;
use crate::discretize::{dynamic_discretize, extract_genotype, DiscretizeError, PruneEvent};
use crate::entropy::{self, EntropyError, EntropySnapshot};
use crate::genotype::Genotype;
use crate::supernet::{ArchParams, ForwardPass, NetError, SuperNetwork};

#[derive(Debug, Error)]
pub enum EssError {
    #[error("invalid search configuration: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Net(#[from] NetError),

    #[error(transparent)]
    Entropy(#[from] EntropyError),

    #[error(transparent)]
    Tensor(#[from] crate::autodiff::TensorError),

    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
}

/// Controller hyper-parameters. Defaults reproduce the reference search
/// recipe; desk-scale runs usually shrink `t_search`/`r_init` via the run
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssConfig {
    /// Multiplicative lambda increase when shrinking lags the budget.
    pub c1: f64,
    /// Multiplicative lambda decrease when shrinking meets the budget.
    pub c2: f64,
    pub lambda_init: f64,
    /// Epochs per round.
    pub t_search: usize,
    /// Warm-up epochs per round; `None` means `t_search / 2`.
    pub t_warm: Option<usize>,
    /// Rounds of cyclic model-parameter reinitialization.
    pub r_init: usize,
    pub eta_theta: f64,
    pub theta_weight_decay: f64,
    pub eta_alpha: f64,
    pub alpha_weight_decay: f64,
    /// Pruning threshold for the in-loop discretization.
    pub epsilon: f64,
    /// Per-step entropy-reduction budget; computed from the initial
    /// entropy when `None`.
    pub delta_e: Option<f64>,
    /// Whether warm-up also trains the alphas (the algorithm's main loop
    /// does; one prose passage says theta only, so this stays switchable).
    pub warmup_updates_alpha: bool,
    /// Whether the architecture-optimization phase also trains theta.
    pub archopt_updates_theta: bool,
    /// Scale on the CE term of the overall loss. Diagnostic knob: zero
    /// isolates the entropy dynamics.
    pub ce_loss_weight: f64,
    /// Optional per-cell entropy floor that ends a round's
    /// architecture-optimization phase early. Disabled by default.
    pub h_min: Option<f64>,
}

impl Default for EssConfig {
    fn default() -> Self {
        Self {
            c1: 1.05,
            c2: 0.95,
            lambda_init: 1e-4,
            t_search: 16,
            t_warm: None,
            r_init: 5,
            eta_theta: 1e-3,
            theta_weight_decay: 1e-4,
            eta_alpha: 1e-2,
            alpha_weight_decay: 0.0,
            epsilon: 0.02,
            delta_e: None,
            warmup_updates_alpha: true,
            archopt_updates_theta: false,
            ce_loss_weight: 1.0,
            h_min: None,
        }
    }
}

impl EssConfig {
    pub fn t_warm(&self) -> usize {
        self.t_warm.unwrap_or(self.t_search / 2)
    }

    pub fn validate(&self, num_ops: usize) -> Result<(), EssError> {
        if self.c1 <= 1.0 {
            return Err(EssError::BadConfig(format!("c1 = {} must exceed 1", self.c1)));
        }
        if !(self.c2 > 0.0 && self.c2 < 1.0) {
            return Err(EssError::BadConfig(format!("c2 = {} outside (0, 1)", self.c2)));
        }
        let t_warm = self.t_warm();
        if t_warm == 0 || t_warm > self.t_search {
            return Err(EssError::BadConfig(format!(
                "t_warm = {t_warm} outside 1..=t_search ({})",
                self.t_search
            )));
        }
        if self.r_init == 0 {
            return Err(EssError::BadConfig("r_init must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0 / num_ops as f64) {
            return Err(EssError::BadConfig(format!(
                "epsilon = {} outside (0, 1/{num_ops})",
                self.epsilon
            )));
        }
        if self.lambda_init <= 0.0 {
            return Err(EssError::BadConfig("lambda_init must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Warmup,
    ArchOpt,
}

/// Mutable controller state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EssState {
    pub lambda: Vec<f64>,
    /// Entropy at the previous feedback comparison; seeded at the first
    /// architecture-optimization step of each round so the warm-up drift
    /// never counts as a reduction.
    pub prev_entropy: Vec<Option<f64>>,
    pub phase: Phase,
    pub round: usize,
    pub epoch: usize,
    pub step: usize,
}

impl EssState {
    fn new(cells: usize, lambda_init: f64) -> Self {
        Self {
            lambda: vec![lambda_init; cells],
            prev_entropy: vec![None; cells],
            phase: Phase::Warmup,
            round: 0,
            epoch: 0,
            step: 0,
        }
    }
}

/// One CSV row of the per-step entropy report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub round: usize,
    pub epoch: usize,
    pub step: usize,
    /// 1-based cell index.
    pub cell: usize,
    pub entropy: f64,
    pub lambda: f64,
    pub loss_ce: f64,
    pub loss_all: f64,
}

/// Per-cell measurements of one architecture-optimization step, kept for
/// numeric verification of the first-order entropy-descent guarantee.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescentRecord {
    pub round: usize,
    pub epoch: usize,
    pub step: usize,
    pub cell: usize,
    pub lambda: f64,
    /// Cell entropy before the alpha step.
    pub h_before: f64,
    /// After the alpha step, before pruning.
    pub h_after_step: f64,
    /// After pruning (the value the feedback loop sees).
    pub h_after_prune: f64,
    /// Squared norm of the analytic entropy gradient over this cell's
    /// alphas, at the pre-step point.
    pub grad_h_norm_sq: f64,
    /// Inner product of the entropy gradient with the CE gradient over
    /// this cell's alphas.
    pub dot_h_ce: f64,
}

impl DescentRecord {
    /// The descent guarantee's lower bound on lambda:
    /// `-<gH, gCE> / ||gH||^2`.
    pub fn lambda_bound(&self) -> f64 {
        if self.grad_h_norm_sq == 0.0 {
            f64::NEG_INFINITY
        } else {
            -self.dot_h_ce / self.grad_h_norm_sq
        }
    }

    pub fn delta_h(&self) -> f64 {
        self.h_after_step - self.h_before
    }
}

/// Alpha values, alive mask, and extracted genotype saved after a round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSnapshot {
    /// e.g. "32E" after the second round of a 16-epoch search.
    pub label: String,
    pub cumulative_epochs: usize,
    pub arch: ArchParams,
    pub genotype: Genotype,
}

/// Everything a finished search produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub archive: Vec<ArchSnapshot>,
    pub rows: Vec<StepRow>,
    pub descent_log: Vec<DescentRecord>,
    pub prune_log: Vec<PruneEvent>,
    pub delta_e: f64,
    pub steps_per_epoch: usize,
    pub initial_entropy: EntropySnapshot,
    pub final_entropy: EntropySnapshot,
    /// Largest observed CE-gradient norm over the alphas (monitored, never
    /// enforced).
    pub max_ce_grad_norm: f64,
}

/// Feedback rule for one cell: grow lambda when the realized reduction
/// fell strictly short of the budget, shrink it otherwise (ties shrink).
pub fn adjust_lambda(lambda: f64, e_prev: f64, e_curr: f64, delta_e: f64, c1: f64, c2: f64) -> f64 {
    if e_prev - e_curr < delta_e {
        c1 * lambda
    } else {
        c2 * lambda
    }
}

/// Reinitializes model parameters and resets their optimizer. Alphas, the
/// alive mask, lambdas, and the archive are untouched.
pub fn reinit_model_params(net: &mut SuperNetwork, theta_opt: &mut AdamState, rng: &mut impl Rng) {
    net.reinit_theta(rng);
    theta_opt.reset();
}

/// Losses of one step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub loss_ce: f64,
    pub loss_all: f64,
}

/// Driver for one search run. Owns the optimizer states; borrows the
/// network.
pub struct EssController<'a> {
    pub net: &'a mut SuperNetwork,
    pub config: EssConfig,
    pub state: EssState,
    pub delta_e: f64,
    theta_opt: AdamState,
    alpha_opt: AdamState,
    theta_hp: AdamParams,
    alpha_hp: AdamParams,
    rows: Vec<StepRow>,
    descent_log: Vec<DescentRecord>,
    prune_log: Vec<PruneEvent>,
    max_ce_grad_norm: f64,
}

impl<'a> EssController<'a> {
    pub fn new(
        net: &'a mut SuperNetwork,
        config: EssConfig,
        steps_per_epoch: usize,
    ) -> Result<Self, EssError> {
        config.validate(net.space.len())?;
        if steps_per_epoch == 0 {
            return Err(EssError::BadConfig(
                "dataset yields zero steps per epoch".into(),
            ));
        }
        let cells = net.dims.cells;
        let initial = EntropySnapshot::capture(&net.arch, 0)?;
        let delta_e = match config.delta_e {
            Some(v) => v,
            None => entropy::expected_entropy_reduction(
                initial.total,
                cells,
                steps_per_epoch,
                config.t_search,
                config.r_init,
            )?,
        };
        let theta_opt = AdamState::new(&net.store.lens());
        let alpha_lens: Vec<usize> = net
            .arch
            .cells
            .iter()
            .flat_map(|c| c.iter().map(|n| n.alphas.len()))
            .collect();
        let alpha_opt = AdamState::new(&alpha_lens);
        let theta_hp = AdamParams::with_lr(config.eta_theta, config.theta_weight_decay);
        let alpha_hp = AdamParams::with_lr(config.eta_alpha, config.alpha_weight_decay);
        let state = EssState::new(cells, config.lambda_init);
        Ok(Self {
            net,
            config,
            state,
            delta_e,
            theta_opt,
            alpha_opt,
            theta_hp,
            alpha_hp,
            rows: Vec::new(),
            descent_log: Vec::new(),
            prune_log: Vec::new(),
            max_ce_grad_norm: 0.0,
        })
    }

    fn alpha_slot_index(&self, k: usize, j: usize) -> usize {
        k * (self.net.dims.nodes - 3) + (j - 3)
    }

    fn step_theta(&mut self, pass: &ForwardPass) {
        let t = self.theta_opt.begin_step();
        for (pid, tid) in pass.binder.bound_params() {
            let grad = pass.tape.grad(tid);
            adam_step_slot(
                &mut self.net.store.get_mut(pid).data,
                grad,
                &mut self.theta_opt.slots[pid.0],
                t,
                &self.theta_hp,
            );
        }
    }

    fn step_alpha(&mut self, pass: &ForwardPass) {
        let t = self.alpha_opt.begin_step();
        for k in 0..self.net.dims.cells {
            for j in 3..self.net.dims.nodes {
                let slot = self.alpha_slot_index(k, j);
                let tid = pass.alpha_ids[k][j - 3];
                let grad = pass.tape.grad(tid);
                adam_step_slot(
                    &mut self.net.arch.node_mut(k, j).alphas,
                    grad,
                    &mut self.alpha_opt.slots[slot],
                    t,
                    &self.alpha_hp,
                );
            }
        }
    }

    /// One warm-up step: theta and (by default) alpha both descend the CE
    /// loss. Lambdas are untouched.
    pub fn warmup_step(
        &mut self,
        batch: &crate::autodiff::Tensor,
        labels: &[usize],
    ) -> Result<StepLosses, EssError> {
        let mut pass = self.net.forward(batch)?;
        let ce = pass.tape.cross_entropy(pass.logits, labels)?;
        pass.tape.backward(ce)?;
        self.step_theta(&pass);
        if self.config.warmup_updates_alpha {
            self.step_alpha(&pass);
        }
        let loss_ce = pass.tape.value(ce).item();
        Ok(StepLosses {
            loss_ce,
            loss_all: loss_ce,
        })
    }

    /// Builds the tape-side cell entropy `sum_j H_node(w_j)` for cell `k`.
    fn tape_cell_entropy(pass: &mut ForwardPass, k: usize) -> Result<TensorId, EssError> {
        let mut acc: Option<TensorId> = None;
        let weight_ids: Vec<TensorId> = pass.weight_ids[k].clone();
        for w_id in weight_ids {
            let e = pass.tape.neg_xlogx(w_id);
            let s = pass.tape.sum(e);
            acc = Some(match acc {
                Some(a) => pass.tape.add(a, s)?,
                None => s,
            });
        }
        Ok(acc.expect("every cell has at least one computing node"))
    }

    /// One architecture-optimization step: alpha descends
    /// `ce_weight * CE + sum_k lambda_k H_k`, the network is pruned at the
    /// threshold, and the feedback rule retunes each lambda.
    pub fn arch_opt_step(
        &mut self,
        batch: &crate::autodiff::Tensor,
        labels: &[usize],
    ) -> Result<ArchOptOutcome, EssError> {
        let cells = self.net.dims.cells;
        // Lambdas as used by this step's loss; the feedback below mutates
        // the live values.
        let lambda_used = self.state.lambda.clone();
        let mut h_before = Vec::with_capacity(cells);
        for k in 0..cells {
            h_before.push(entropy::cell_entropy(&self.net.arch, k)?);
        }

        let mut pass = self.net.forward(batch)?;
        let ce = pass.tape.cross_entropy(pass.logits, labels)?;
        let mut loss_all = pass.tape.mul_const(ce, self.config.ce_loss_weight);
        let mut h_ids = Vec::with_capacity(cells);
        for k in 0..cells {
            let h_id = Self::tape_cell_entropy(&mut pass, k)?;
            h_ids.push(h_id);
            let weighted = pass.tape.mul_const(h_id, lambda_used[k]);
            loss_all = pass.tape.add(loss_all, weighted)?;
        }
        pass.tape.backward(loss_all)?;

        // Per-cell gradient decomposition at the pre-step point. The
        // analytic entropy gradient recovers the CE component from the
        // combined tape gradient.
        let mut grad_stats = Vec::with_capacity(cells);
        let mut ce_grad_norm_sq = 0.0;
        for k in 0..cells {
            let analytic = entropy::entropy_grad_analytic(&self.net.arch, k)?;
            let mut grad_h_norm_sq = 0.0;
            let mut dot_h_ce = 0.0;
            for (node_idx, node_grad) in analytic.iter().enumerate() {
                let tid = pass.alpha_ids[k][node_idx];
                let combined = pass.tape.grad(tid);
                for (e, &gh) in node_grad.iter().enumerate() {
                    let gce = if self.config.ce_loss_weight == 0.0 {
                        0.0
                    } else {
                        (combined[e] - lambda_used[k] * gh) / self.config.ce_loss_weight
                    };
                    grad_h_norm_sq += gh * gh;
                    dot_h_ce += gh * gce;
                    ce_grad_norm_sq += gce * gce;
                }
            }
            grad_stats.push((grad_h_norm_sq, dot_h_ce));
        }
        self.max_ce_grad_norm = self.max_ce_grad_norm.max(ce_grad_norm_sq.sqrt());

        self.step_alpha(&pass);
        if self.config.archopt_updates_theta {
            self.step_theta(&pass);
        }

        let mut h_after_step = Vec::with_capacity(cells);
        for k in 0..cells {
            h_after_step.push(entropy::cell_entropy(&self.net.arch, k)?);
        }
        let events = dynamic_discretize(self.net, self.config.epsilon);
        self.prune_log.extend(events.iter().cloned());

        let mut h_after_prune = Vec::with_capacity(cells);
        for k in 0..cells {
            h_after_prune.push(entropy::cell_entropy(&self.net.arch, k)?);
        }

        for k in 0..cells {
            let e_curr = h_after_prune[k];
            match self.state.prev_entropy[k] {
                None => self.state.prev_entropy[k] = Some(e_curr),
                Some(e_prev) => {
                    self.state.lambda[k] = adjust_lambda(
                        self.state.lambda[k],
                        e_prev,
                        e_curr,
                        self.delta_e,
                        self.config.c1,
                        self.config.c2,
                    );
                    self.state.prev_entropy[k] = Some(e_curr);
                }
            }
        }

        for k in 0..cells {
            self.descent_log.push(DescentRecord {
                round: self.state.round,
                epoch: self.state.epoch,
                step: self.state.step,
                cell: k + 1,
                lambda: lambda_used[k],
                h_before: h_before[k],
                h_after_step: h_after_step[k],
                h_after_prune: h_after_prune[k],
                grad_h_norm_sq: grad_stats[k].0,
                dot_h_ce: grad_stats[k].1,
            });
        }

        Ok(ArchOptOutcome {
            loss_ce: pass.tape.value(ce).item(),
            loss_all: pass.tape.value(loss_all).item(),
            entropies: h_after_prune,
            pruned: events,
        })
    }

    fn log_rows(&mut self, losses: &StepLosses, entropies: &[f64]) {
        for (k, &e) in entropies.iter().enumerate() {
            self.rows.push(StepRow {
                round: self.state.round,
                epoch: self.state.epoch,
                step: self.state.step,
                cell: k + 1,
                entropy: e,
                lambda: self.state.lambda[k],
                loss_ce: losses.loss_ce,
                loss_all: losses.loss_all,
            });
        }
    }

    /// Runs the whole search: `r_init` rounds of warm-up plus
    /// architecture optimization, snapshotting after each round.
    pub fn run(
        self,
        dataset: &Dataset,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<SearchOutcome, EssError> {
        self.run_with_hook(dataset, batch_size, false, rng, &mut |_, _, _, _, _| Ok(()))
    }

    /// As [`EssController::run`], with optional batch augmentation and a
    /// hook invoked after each round's snapshot (for checkpointing).
    pub fn run_with_hook(
        mut self,
        dataset: &Dataset,
        batch_size: usize,
        augment: bool,
        rng: &mut impl Rng,
        on_round: &mut RoundHook<'_>,
    ) -> Result<SearchOutcome, EssError> {
        let steps_per_epoch = dataset.steps_per_epoch(batch_size);
        let initial_entropy = EntropySnapshot::capture(&self.net.arch, 0)?;
        let t_warm = self.config.t_warm();
        let mut archive = Vec::with_capacity(self.config.r_init);

        for round in 1..=self.config.r_init {
            self.state.round = round;
            reinit_model_params(self.net, &mut self.theta_opt, rng);
            // Feedback comparisons restart each round.
            self.state.prev_entropy.iter_mut().for_each(|p| *p = None);

            self.state.phase = Phase::Warmup;
            for epoch in 1..=t_warm {
                self.state.epoch = epoch;
                for (step, batch_idx) in dataset.epoch_batches(batch_size, rng).iter().enumerate() {
                    self.state.step = step + 1;
                    let (mut batch, labels) = dataset.batch(batch_idx);
                    if augment {
                        crate::data::augment_batch(&mut batch, rng);
                    }
                    let losses = self.warmup_step(&batch, &labels)?;
                    let mut entropies = Vec::with_capacity(self.net.dims.cells);
                    for k in 0..self.net.dims.cells {
                        entropies.push(entropy::cell_entropy(&self.net.arch, k)?);
                    }
                    self.log_rows(&losses, &entropies);
                }
            }

            self.state.phase = Phase::ArchOpt;
            'archopt: for epoch in (t_warm + 1)..=self.config.t_search {
                self.state.epoch = epoch;
                for (step, batch_idx) in dataset.epoch_batches(batch_size, rng).iter().enumerate() {
                    self.state.step = step + 1;
                    let (mut batch, labels) = dataset.batch(batch_idx);
                    if augment {
                        crate::data::augment_batch(&mut batch, rng);
                    }
                    let outcome = self.arch_opt_step(&batch, &labels)?;
                    self.log_rows(
                        &StepLosses {
                            loss_ce: outcome.loss_ce,
                            loss_all: outcome.loss_all,
                        },
                        &outcome.entropies,
                    );
                    if let Some(h_min) = self.config.h_min {
                        if outcome.entropies.iter().all(|&e| e <= h_min) {
                            break 'archopt;
                        }
                    }
                }
            }

            let cumulative = round * self.config.t_search;
            archive.push(ArchSnapshot {
                label: format!("{cumulative}E"),
                cumulative_epochs: cumulative,
                arch: self.net.arch.clone(),
                genotype: extract_genotype(self.net)?,
            });
            on_round(
                round,
                self.net,
                &self.state,
                &self.theta_opt,
                &self.alpha_opt,
            )?;
        }

        let final_entropy = EntropySnapshot::capture(&self.net.arch, self.rows.len())?;
        Ok(SearchOutcome {
            archive,
            rows: self.rows,
            descent_log: self.descent_log,
            prune_log: self.prune_log,
            delta_e: self.delta_e,
            steps_per_epoch,
            initial_entropy,
            final_entropy,
            max_ce_grad_norm: self.max_ce_grad_norm,
        })
    }
}

/// Per-round callback: (round, network, controller state, theta optimizer,
/// alpha optimizer).
pub type RoundHook<'h> = dyn FnMut(usize, &SuperNetwork, &EssState, &AdamState, &AdamState) -> Result<(), EssError>
    + 'h;


/// Result of one architecture-optimization step.
#[derive(Debug, Clone)]
pub struct ArchOptOutcome {
    pub loss_ce: f64,
    pub loss_all: f64,
    /// Post-step, post-prune cell entropies (what the feedback compares).
    pub entropies: Vec<f64>,
    pub pruned: Vec<PruneEvent>,
}

/// Convenience wrapper: validates, builds the controller, runs the search.
pub fn run_search(
    net: &mut SuperNetwork,
    dataset: &Dataset,
    batch_size: usize,
    config: &EssConfig,
    rng: &mut impl Rng,
) -> Result<SearchOutcome, EssError> {
    let steps = dataset.steps_per_epoch(batch_size);
    let controller = EssController::new(net, config.clone(), steps)?;
    controller.run(dataset, batch_size, rng)
}

/// As [`run_search`], with augmentation and a per-round hook.
pub fn run_search_with_hook(
    net: &mut SuperNetwork,
    dataset: &Dataset,
    batch_size: usize,
    config: &EssConfig,
    augment: bool,
    rng: &mut impl Rng,
    on_round: &mut RoundHook<'_>,
) -> Result<SearchOutcome, EssError> {
    let steps = dataset.steps_per_epoch(batch_size);
    let controller = EssController::new(net, config.clone(), steps)?;
    controller.run_with_hook(dataset, batch_size, augment, rng, on_round)
}
