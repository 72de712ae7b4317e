//! Preliminary training: mine, supervise, weight, backpropagate, update.
//!
//! The per-batch pipeline here is shared with the annealing scheduler.
//! Gradients flow from per-triplet distance derivatives through the
//! selected embedding pairs and back through the network; the mined
//! indices, the negative well position and the confidence weights are all
//! constants of the batch.

use rand_chacha::ChaCha8Rng;

use crate::dataset::{sample_batch, PatchBatch, PatchDataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::loss::{
    balance_loss, triplet_loss, BalanceLossConfig, LossOutput, TripletLossConfig,
};
use crate::math::{EmbeddingBatch, Matrix};
use crate::mining::{mine_batch, MinedTriplet};
use crate::model::{AdamState, DescriptorNet, Gradients, LrSchedule};
use crate::supervision::{
    supervise_batch, weighted_balance_loss, weighted_triplet_loss, ConfidenceWeights,
    SupervisorConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Triplet,
    Balance,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Steps per logged epoch.
    pub steps_per_epoch: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Apply the supervisor's confidence weights.
    pub unbiased: bool,
    /// Clusters used for the per-epoch evaluation snapshot.
    pub snapshot_clusters: usize,
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_p_neg: Option<f64>,
    pub mean_confidence: Option<f64>,
    pub eval_map: f64,
}

/// Everything a single batch produces before the optimizer step.
#[derive(Debug)]
pub struct BatchStats {
    pub triplets: Vec<MinedTriplet>,
    pub loss: f64,
    pub p_neg: Option<f64>,
    pub confidences: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    /// Fraction of triplets zeroed by the annealing threshold filter.
    pub filtered_fraction: f64,
    pub grads: Gradients,
    /// True when every triplet was filtered out; the parameter update is
    /// skipped.
    pub skip_update: bool,
}

/// Turn per-triplet distance gradients into gradients w.r.t. the anchor
/// and positive embedding matrices.
///
/// Each distance edge d = ‖a − b‖ contributes ±(a − b)/d to its two
/// endpoints; a collapsed edge (d below 1e-12) contributes the zero
/// subgradient.
pub fn embedding_gradients(
    triplets: &[MinedTriplet],
    anchors: &EmbeddingBatch,
    positives: &EmbeddingBatch,
    out: &LossOutput,
) -> (Matrix, Matrix) {
    let dim = anchors.dim();
    let mut ga = Matrix::zeros(anchors.rows(), dim);
    let mut gp = Matrix::zeros(positives.rows(), dim);
    for (i, t) in triplets.iter().enumerate() {
        // positive edge: anchor <-> selected positive
        let g = out.d_pos_grads[i];
        if g != 0.0 && t.d_pos > 1e-12 {
            let a = anchors.row(t.anchor);
            let p = positives.row(t.positive);
            for k in 0..dim {
                let u = (a[k] - p[k]) / t.d_pos;
                ga.row_mut(t.anchor)[k] += g * u;
                gp.row_mut(t.positive)[k] -= g * u;
            }
        }
        // negative edge: endpoints depend on the winning combination
        let g = out.d_neg_grads[i];
        if g != 0.0 && t.d_neg > 1e-12 {
            let left = if t.side.left_is_positive() {
                positives.row(t.positive)
            } else {
                anchors.row(t.anchor)
            };
            let right = if t.side.right_is_positive() {
                positives.row(t.negative)
            } else {
                anchors.row(t.negative)
            };
            for k in 0..dim {
                let u = (left[k] - right[k]) / t.d_neg;
                if t.side.left_is_positive() {
                    gp.row_mut(t.positive)[k] += g * u;
                } else {
                    ga.row_mut(t.anchor)[k] += g * u;
                }
                if t.side.right_is_positive() {
                    gp.row_mut(t.negative)[k] -= g * u;
                } else {
                    ga.row_mut(t.negative)[k] -= g * u;
                }
            }
        }
    }
    (ga, gp)
}

#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    net: &DescriptorNet,
    batch: &PatchBatch,
    mode: LossMode,
    unbiased: bool,
    balance_cfg: &BalanceLossConfig,
    triplet_cfg: &TripletLossConfig,
    sup_cfg: &SupervisorConfig,
    supervisor: Option<&DescriptorNet>,
    anneal_threshold: Option<f64>,
) -> Result<BatchStats> {
    let (anchor_emb, anchor_cache) = net.forward(&batch.anchors)?;
    let (pos_emb, pos_cache) = net.forward(&batch.positives)?;
    let triplets = mine_batch(
        &anchor_emb,
        &pos_emb,
        &batch.positive_owner,
        &batch.cluster_ids,
    )?;

    // the annealing filter needs confidences even when unbiased
    // weighting is off
    let need_supervisor = unbiased || anneal_threshold.is_some();
    let supervision = if need_supervisor {
        let sup = supervisor.unwrap_or(net);
        Some(supervise_batch(sup, batch, &triplets, sup_cfg)?)
    } else {
        None
    };

    let mut filtered_fraction = 0.0;
    let weights = supervision.as_ref().map(|cw| {
        let mut w: Vec<f64> = if unbiased {
            cw.weight.clone()
        } else {
            vec![1.0; triplets.len()]
        };
        if let Some(thr) = anneal_threshold {
            let mut filtered = 0usize;
            for (wi, &i) in w.iter_mut().zip(&cw.confidence) {
                if i < thr {
                    *wi = 0.0;
                    filtered += 1;
                }
            }
            filtered_fraction = filtered as f64 / triplets.len() as f64;
        }
        w
    });

    let out = match (mode, &weights) {
        (LossMode::Balance, None) => balance_loss(&triplets, balance_cfg)?,
        (LossMode::Triplet, None) => triplet_loss(&triplets, triplet_cfg)?,
        (LossMode::Balance, Some(w)) => {
            let cw = ConfidenceWeights {
                confidence: supervision.as_ref().unwrap().confidence.clone(),
                weight: w.clone(),
            };
            weighted_balance_loss(&triplets, &cw, balance_cfg)?
        }
        (LossMode::Triplet, Some(w)) => {
            let cw = ConfidenceWeights {
                confidence: supervision.as_ref().unwrap().confidence.clone(),
                weight: w.clone(),
            };
            weighted_triplet_loss(&triplets, &cw, triplet_cfg)?
        }
    };

    let skip_update = weights
        .as_ref()
        .map(|w| w.iter().all(|&x| x == 0.0))
        .unwrap_or(false);

    let (ga, gp) = embedding_gradients(&triplets, &anchor_emb, &pos_emb, &out);
    let mut grads = net.backward(&anchor_cache, &ga)?;
    grads.add_assign(&net.backward(&pos_cache, &gp)?);

    Ok(BatchStats {
        loss: out.loss,
        p_neg: out.p_neg_used,
        confidences: supervision.as_ref().map(|cw| cw.confidence.clone()),
        weights,
        triplets,
        filtered_fraction,
        grads,
        skip_update,
    })
}

/// A cheap matching-mAP snapshot over a prefix of the dataset's clusters.
pub fn quick_matching_map(
    net: &DescriptorNet,
    dataset: &PatchDataset,
    max_clusters: usize,
) -> Result<f64> {
    let nc = dataset.num_clusters().min(max_clusters);
    let dim = dataset.dim;
    let mut anchors = Matrix::zeros(nc, dim);
    let mut gallery = Matrix::zeros(nc, dim);
    for c in 0..nc {
        let base = dataset.anchor_row(c);
        anchors.row_mut(c).copy_from_slice(dataset.patches.row(base));
        gallery
            .row_mut(c)
            .copy_from_slice(dataset.patches.row(base + 1));
    }
    let (ea, _) = net.forward(&anchors)?;
    let (eg, _) = net.forward(&gallery)?;
    let task = eval::matching_task(&ea, &eg, &(0..nc as u32).collect::<Vec<u32>>())?;
    eval::matching_map(&task)
}

/// Preliminary training with hardest-in-batch mining and a warmup-cosine
/// learning-rate schedule. Returns one log row per epoch.
pub fn preliminary_train(
    net: &mut DescriptorNet,
    dataset: &PatchDataset,
    cfg: &TrainConfig,
    balance_cfg: &BalanceLossConfig,
    triplet_cfg: &TripletLossConfig,
    sup_cfg: &SupervisorConfig,
    pretrained_supervisor: Option<&DescriptorNet>,
) -> Result<Vec<EpochLog>> {
    use rand::SeedableRng;
    cfg.schedule.validate()?;
    balance_cfg.validate()?;
    triplet_cfg.validate()?;
    sup_cfg.validate()?;
    if cfg.steps_per_epoch == 0 {
        return Err(Error::Config("steps_per_epoch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(net);
    let mut logs = Vec::new();
    let mut acc_loss = 0.0;
    let mut acc_p_neg = (0.0, 0usize);
    let mut acc_conf = (0.0, 0usize);
    let mut in_epoch = 0usize;

    for step in 0..cfg.steps {
        let batch = sample_batch(dataset, cfg.batch_size, &mut rng)?;
        let stats = batch_gradients(
            net,
            &batch,
            cfg.loss_mode,
            cfg.unbiased,
            balance_cfg,
            triplet_cfg,
            sup_cfg,
            pretrained_supervisor,
            None,
        )?;
        let lr = cfg.schedule.lr_at(step)?;
        if !stats.skip_update {
            adam.adam_step(net, &stats.grads, lr)?;
        }

        acc_loss += stats.loss;
        if let Some(p) = stats.p_neg {
            acc_p_neg.0 += p;
            acc_p_neg.1 += 1;
        }
        if let Some(cs) = &stats.confidences {
            acc_conf.0 += cs.iter().sum::<f64>() / cs.len() as f64;
            acc_conf.1 += 1;
        }
        in_epoch += 1;

        if in_epoch == cfg.steps_per_epoch || step + 1 == cfg.steps {
            let epoch = logs.len() + 1;
            let eval_map = quick_matching_map(net, dataset, cfg.snapshot_clusters)?;
            logs.push(EpochLog {
                epoch,
                mean_loss: acc_loss / in_epoch as f64,
                mean_p_neg: (acc_p_neg.1 > 0).then(|| acc_p_neg.0 / acc_p_neg.1 as f64),
                mean_confidence: (acc_conf.1 > 0).then(|| acc_conf.0 / acc_conf.1 as f64),
                eval_map,
            });
            acc_loss = 0.0;
            acc_p_neg = (0.0, 0);
            acc_conf = (0.0, 0);
            in_epoch = 0;
        }
    }
    Ok(logs)
}
