//! Difficulty-annealed fine-tuning stage.
//!
//! A fixed number of iterations derived from the batch-size endpoints.
//! Each iteration shrinks the batch, raises the confidence threshold used
//! to drop suspected false negatives outright, and decays the learning
//! rate geometrically. Within an iteration the schedule is frozen.

use rand_chacha::ChaCha8Rng;

use crate::dataset::{sample_batch, PatchDataset};
use crate::error::{Error, Result};
use crate::loss::{BalanceLossConfig, TripletLossConfig};
use crate::model::{AdamState, DescriptorNet};
use crate::supervision::{ConfidenceWeights, SupervisorConfig};
use crate::train::{batch_gradients, LossMode};

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealConfig {
    /// Starting batch size.
    pub bs_s: usize,
    /// Final batch size.
    pub bs_e: usize,
    /// Batch-size decrement per iteration.
    pub stepsize_bs: usize,
    /// Starting filter threshold on the confidence level.
    pub thr0: f64,
    /// Threshold increment per iteration.
    pub stepsize_thr: f64,
    /// Starting learning rate.
    pub lr0: f64,
    /// Per-iteration learning-rate decay factor.
    pub epsilon: f64,
    /// Optimizer steps performed at each schedule point.
    pub batches_per_iteration: usize,
    /// Decay the learning rate by epsilon^t at iteration t instead of by a
    /// single factor of epsilon, compounding the decay quadratically.
    pub compound_lr_decay: bool,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            bs_s: 2944,
            bs_e: 1024,
            stepsize_bs: 128,
            thr0: -0.05,
            stepsize_thr: 0.05,
            lr0: 1.5e-6,
            epsilon: 0.75,
            batches_per_iteration: 1,
            compound_lr_decay: false,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bs_e < 2 {
            return Err(Error::Config(format!(
                "final batch size must be at least 2, got {}",
                self.bs_e
            )));
        }
        if self.bs_s < self.bs_e {
            return Err(Error::Config(format!(
                "starting batch size {} is below final batch size {}",
                self.bs_s, self.bs_e
            )));
        }
        if self.stepsize_bs == 0 {
            return Err(Error::Config("batch-size step must be positive".into()));
        }
        if (self.bs_s - self.bs_e) % self.stepsize_bs != 0 {
            return Err(Error::Config(format!(
                "batch-size span {} is not divisible by step {}",
                self.bs_s - self.bs_e,
                self.stepsize_bs
            )));
        }
        if !(self.stepsize_thr >= 0.0) {
            return Err(Error::Config(format!(
                "threshold step must be non-negative, got {}",
                self.stepsize_thr
            )));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!(
                "annealing learning rate must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "learning-rate decay factor must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.batches_per_iteration == 0 {
            return Err(Error::Config(
                "batches_per_iteration must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Number of schedule advances: (bs_s - bs_e) / stepsize_bs.
pub fn iteration_count(cfg: &AnnealConfig) -> Result<usize> {
    cfg.validate()?;
    Ok((cfg.bs_s - cfg.bs_e) / cfg.stepsize_bs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealState {
    pub t: usize,
    pub bs: usize,
    pub thr: f64,
    pub lr: f64,
}

pub fn initial_state(cfg: &AnnealConfig) -> Result<AnnealState> {
    cfg.validate()?;
    Ok(AnnealState {
        t: 0,
        bs: cfg.bs_s,
        thr: cfg.thr0,
        lr: cfg.lr0,
    })
}

/// Advance the schedule by one iteration. Errors once the batch size has
/// reached its endpoint.
pub fn advance(state: &AnnealState, cfg: &AnnealConfig) -> Result<AnnealState> {
    let n = iteration_count(cfg)?;
    if state.t >= n {
        return Err(Error::ScheduleExhausted(n));
    }
    let decay = if cfg.compound_lr_decay {
        cfg.epsilon.powi((state.t + 1) as i32)
    } else {
        cfg.epsilon
    };
    Ok(AnnealState {
        t: state.t + 1,
        bs: state.bs - cfg.stepsize_bs,
        thr: state.thr + cfg.stepsize_thr,
        lr: state.lr * decay,
    })
}

/// Zero the weight of every triplet whose confidence is strictly below
/// the threshold; confidence exactly at the threshold is kept.
pub fn filter_by_threshold(weights: &ConfidenceWeights, thr: f64) -> ConfidenceWeights {
    let weight = weights
        .confidence
        .iter()
        .zip(&weights.weight)
        .map(|(&i, &w)| if i < thr { 0.0 } else { w })
        .collect();
    ConfidenceWeights {
        confidence: weights.confidence.clone(),
        weight,
    }
}

#[derive(Debug, Clone)]
pub struct IterationLog {
    pub t: usize,
    pub bs: usize,
    pub thr: f64,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_confidence: f64,
    pub filtered_fraction: f64,
}

/// Run the annealing stage. `unbiased` keeps the smooth confidence
/// weighting on top of the hard threshold filter; the filter itself always
/// applies.
#[allow(clippy::too_many_arguments)]
pub fn run_annealing(
    net: &mut DescriptorNet,
    dataset: &PatchDataset,
    cfg: &AnnealConfig,
    mode: LossMode,
    unbiased: bool,
    balance_cfg: &BalanceLossConfig,
    triplet_cfg: &TripletLossConfig,
    sup_cfg: &SupervisorConfig,
    pretrained_supervisor: Option<&DescriptorNet>,
    seed: u64,
) -> Result<Vec<IterationLog>> {
    use rand::SeedableRng;
    let n = iteration_count(cfg)?;
    balance_cfg.validate()?;
    triplet_cfg.validate()?;
    sup_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(net);
    let mut state = initial_state(cfg)?;
    let mut logs = Vec::with_capacity(n);

    for _ in 0..n {
        let mut acc_loss = 0.0;
        let mut acc_conf = 0.0;
        let mut acc_filtered = 0.0;
        for _ in 0..cfg.batches_per_iteration {
            let batch = sample_batch(dataset, state.bs, &mut rng)?;
            let stats = batch_gradients(
                net,
                &batch,
                mode,
                unbiased,
                balance_cfg,
                triplet_cfg,
                sup_cfg,
                pretrained_supervisor,
                Some(state.thr),
            )?;
            if !stats.skip_update {
                adam.adam_step(net, &stats.grads, state.lr)?;
            }
            acc_loss += stats.loss;
            let cs = stats.confidences.as_ref().expect("annealing supervises");
            acc_conf += cs.iter().sum::<f64>() / cs.len() as f64;
            acc_filtered += stats.filtered_fraction;
        }
        let b = cfg.batches_per_iteration as f64;
        logs.push(IterationLog {
            t: state.t,
            bs: state.bs,
            thr: state.thr,
            lr: state.lr,
            mean_loss: acc_loss / b,
            mean_confidence: acc_conf / b,
            filtered_fraction: acc_filtered / b,
        });
        state = advance(&state, cfg)?;
    }
    Ok(logs)
}
