//! Self-supervised confidence weighting of mined triplets.
//!
//! A supervising network (the training network itself, or a pretrained
//! checkpoint) re-embeds the patches referenced by the mined triplets,
//! recomputes the positive and negative distances in its own embedding
//! space, and turns the margin between them into a per-triplet weight in
//! [0, 1]. Suspected false negatives (strongly inverted margins) are
//! weighted toward zero.

use std::path::PathBuf;

use crate::dataset::PatchBatch;
use crate::error::{Error, Result};
use crate::loss::{
    balance_loss_with_p_neg, compute_p_neg, triplet_loss, BalanceLossConfig, LossOutput,
    TripletLossConfig,
};
use crate::math::unit_distance;
use crate::mining::MinedTriplet;
use crate::model::DescriptorNet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SupervisorMode {
    /// The supervised network's current (pre-update) parameter snapshot.
    SelfMode,
    /// A frozen checkpoint, possibly with a different embedding dimension.
    Pretrained(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisorConfig {
    pub mode: SupervisorMode,
    pub upper: f64,
    pub threshold: f64,
    /// Curvature k of the exponential confidence-to-weight map.
    pub curvature: f64,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        SupervisorConfig {
            mode: SupervisorMode::SelfMode,
            upper: 0.065,
            threshold: -0.65,
            // calibrated so a zero margin — the signature of a negative
            // that is actually a positive — maps to roughly half weight,
            // while margins at or above `upper` stay at full weight
            curvature: 10.0,
        }
    }
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold < self.upper) {
            return Err(Error::Config(format!(
                "supervisor threshold ({}) must be below upper ({})",
                self.threshold, self.upper
            )));
        }
        if !(self.curvature > 0.0) || !self.curvature.is_finite() {
            return Err(Error::Config(format!(
                "weight-map curvature must be positive, got {}",
                self.curvature
            )));
        }
        Ok(())
    }
}

/// Per-triplet confidence levels and the weights they map to.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceWeights {
    pub confidence: Vec<f64>,
    pub weight: Vec<f64>,
}

/// Confidence of a triplet's labels: the supervisor's margin between its
/// negative and positive distances. Large positive values mean an easy,
/// clean triplet; strongly negative values flag a suspected false negative.
#[inline]
pub fn confidence(d_pos_sup: f64, d_neg_sup: f64) -> f64 {
    d_neg_sup - d_pos_sup
}

/// Map a confidence level to a weight in [0, 1].
///
/// 1 above `upper`, 0 below `threshold`, and in between the normalized
/// exponential (e^{k(I-threshold)} - 1) / (e^{k(upper-threshold)} - 1),
/// which is continuous at both knots. Both interval ends are closed.
pub fn weight(confidence_level: f64, cfg: &SupervisorConfig) -> f64 {
    if confidence_level > cfg.upper {
        1.0
    } else if confidence_level < cfg.threshold {
        0.0
    } else {
        let k = cfg.curvature;
        ((k * (confidence_level - cfg.threshold)).exp() - 1.0)
            / ((k * (cfg.upper - cfg.threshold)).exp() - 1.0)
    }
}

/// Re-embed the batch with the supervisor and score every mined triplet.
///
/// The supervisor's embedding dimension never leaks into the loss: only
/// the distances it measures do.
pub fn supervise_batch(
    supervisor: &DescriptorNet,
    batch: &PatchBatch,
    triplets: &[MinedTriplet],
    cfg: &SupervisorConfig,
) -> Result<ConfidenceWeights> {
    cfg.validate()?;
    let map_err = |e: Error| match e {
        Error::Shape(msg) => Error::Checkpoint(format!(
            "supervisor input dimension does not match the patch inputs: {msg}"
        )),
        other => other,
    };
    let (sup_anchors, _) = supervisor.forward(&batch.anchors).map_err(map_err)?;
    let (sup_positives, _) = supervisor.forward(&batch.positives).map_err(map_err)?;

    let mut confidences = Vec::with_capacity(triplets.len());
    let mut weights = Vec::with_capacity(triplets.len());
    for t in triplets {
        let d_pos_sup = unit_distance(sup_anchors.row(t.anchor), sup_positives.row(t.positive));
        let left = if t.side.left_is_positive() {
            sup_positives.row(t.positive)
        } else {
            sup_anchors.row(t.anchor)
        };
        let right = if t.side.right_is_positive() {
            sup_positives.row(t.negative)
        } else {
            sup_anchors.row(t.negative)
        };
        let d_neg_sup = unit_distance(left, right);
        let i = confidence(d_pos_sup, d_neg_sup);
        log::debug!(
            "triplet anchor={}: I={:.6} (sign convention d_neg-d_pos; inverted form d_pos-d_neg = {:.6})",
            t.anchor,
            i,
            -i
        );
        confidences.push(i);
        weights.push(weight(i, cfg));
    }
    Ok(ConfidenceWeights {
        confidence: confidences,
        weight: weights,
    })
}

/// Balance loss with per-triplet weights. Weights are constants in
/// backpropagation and P_neg comes from the unweighted negative distances.
pub fn weighted_balance_loss(
    triplets: &[MinedTriplet],
    weights: &ConfidenceWeights,
    cfg: &BalanceLossConfig,
) -> Result<LossOutput> {
    let d_negs: Vec<f64> = triplets.iter().map(|t| t.d_neg).collect();
    let p_neg = compute_p_neg(&d_negs, cfg.gamma)?;
    weighted_balance_loss_with_p_neg(triplets, weights, cfg, p_neg)
}

pub fn weighted_balance_loss_with_p_neg(
    triplets: &[MinedTriplet],
    weights: &ConfidenceWeights,
    cfg: &BalanceLossConfig,
    p_neg: f64,
) -> Result<LossOutput> {
    if weights.weight.len() != triplets.len() {
        return Err(Error::Alignment {
            expected: triplets.len(),
            got: weights.weight.len(),
        });
    }
    let unweighted = balance_loss_with_p_neg(triplets, cfg, p_neg)?;
    let n = triplets.len() as f64;
    let alpha = cfg.alpha as i32;
    let mut loss = 0.0;
    let mut gp = unweighted.d_pos_grads;
    let mut gn = unweighted.d_neg_grads;
    for (i, t) in triplets.iter().enumerate() {
        let w = weights.weight[i];
        loss += w * (t.d_pos.powi(alpha) + (t.d_neg - p_neg).powi(alpha));
        gp[i] *= w;
        gn[i] *= w;
    }
    Ok(LossOutput {
        loss: loss / n,
        d_pos_grads: gp,
        d_neg_grads: gn,
        p_neg_used: Some(p_neg),
    })
}

/// Triplet margin loss with per-triplet weights, for ablations that keep
/// the weighting but not the balance wells.
pub fn weighted_triplet_loss(
    triplets: &[MinedTriplet],
    weights: &ConfidenceWeights,
    cfg: &TripletLossConfig,
) -> Result<LossOutput> {
    if weights.weight.len() != triplets.len() {
        return Err(Error::Alignment {
            expected: triplets.len(),
            got: weights.weight.len(),
        });
    }
    let unweighted = triplet_loss(triplets, cfg)?;
    let n = triplets.len() as f64;
    let mut loss = 0.0;
    let mut gp = unweighted.d_pos_grads;
    let mut gn = unweighted.d_neg_grads;
    for (i, t) in triplets.iter().enumerate() {
        let w = weights.weight[i];
        loss += w * (cfg.margin + t.d_pos - t.d_neg).max(0.0);
        gp[i] *= w;
        gn[i] *= w;
    }
    Ok(LossOutput {
        loss: loss / n,
        d_pos_grads: gp,
        d_neg_grads: gn,
        p_neg_used: None,
    })
}
