//! Triplet-loss baseline and the balance loss with dynamically placed
//! potential wells.
//!
//! The balance loss puts an even-power well at 0 for positive distances and
//! a second well at P_neg for negative distances, where P_neg is
//! (1 + gamma) times the batch median of the mined negative distances. The
//! median is a stop-gradient: only the (d - P_neg) factor is
//! differentiated.

use crate::error::{Error, Result};
use crate::math::median;
use crate::mining::MinedTriplet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceLossConfig {
    /// Even exponent >= 2.
    pub alpha: u32,
    /// Focusing-intensity ratio, >= 0.
    pub gamma: f64,
}

impl Default for BalanceLossConfig {
    fn default() -> Self {
        BalanceLossConfig {
            alpha: 2,
            gamma: 1.05,
        }
    }
}

impl BalanceLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 2 || self.alpha % 2 != 0 {
            return Err(Error::Config(format!(
                "balance loss alpha must be an even integer >= 2, got {}",
                self.alpha
            )));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "balance loss gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletLossConfig {
    pub margin: f64,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        TripletLossConfig { margin: 1.0 }
    }
}

impl TripletLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::Config(format!(
                "triplet margin must be finite and >= 0, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Scalar loss plus per-triplet distance gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub d_pos_grads: Vec<f64>,
    pub d_neg_grads: Vec<f64>,
    /// The negative well position, when the loss has one.
    pub p_neg_used: Option<f64>,
}

/// Negative well position: (1 + gamma) * median of the batch's mined
/// negative distances. Treated as a constant within the batch.
pub fn compute_p_neg(neg_distances: &[f64], gamma: f64) -> Result<f64> {
    if neg_distances.is_empty() {
        return Err(Error::EmptyInput("compute_p_neg on empty distance list"));
    }
    Ok((1.0 + gamma) * median(neg_distances)?)
}

/// Balance loss with P_neg computed from this batch's negative distances.
pub fn balance_loss(triplets: &[MinedTriplet], cfg: &BalanceLossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let d_negs: Vec<f64> = triplets.iter().map(|t| t.d_neg).collect();
    let p_neg = compute_p_neg(&d_negs, cfg.gamma)?;
    balance_loss_with_p_neg(triplets, cfg, p_neg)
}

/// Balance loss with an explicitly pinned negative well position.
pub fn balance_loss_with_p_neg(
    triplets: &[MinedTriplet],
    cfg: &BalanceLossConfig,
    p_neg: f64,
) -> Result<LossOutput> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::EmptyInput("balance_loss on empty triplet list"));
    }
    let n = triplets.len() as f64;
    let alpha = cfg.alpha as f64;
    let ai = cfg.alpha as i32;
    let mut loss = 0.0;
    let mut gp = Vec::with_capacity(triplets.len());
    let mut gn = Vec::with_capacity(triplets.len());
    for t in triplets {
        loss += t.d_pos.powi(ai) + (t.d_neg - p_neg).powi(ai);
        gp.push(alpha * t.d_pos.powi(ai - 1) / n);
        gn.push(alpha * (t.d_neg - p_neg).powi(ai - 1) / n);
    }
    Ok(LossOutput {
        loss: loss / n,
        d_pos_grads: gp,
        d_neg_grads: gn,
        p_neg_used: Some(p_neg),
    })
}

/// Hinge triplet loss max(0, margin + d_pos - d_neg) with subgradients.
/// The hinge boundary is assigned to the inactive side.
pub fn triplet_loss(triplets: &[MinedTriplet], cfg: &TripletLossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::EmptyInput("triplet_loss on empty triplet list"));
    }
    let n = triplets.len() as f64;
    let mut loss = 0.0;
    let mut gp = Vec::with_capacity(triplets.len());
    let mut gn = Vec::with_capacity(triplets.len());
    for t in triplets {
        let h = cfg.margin + t.d_pos - t.d_neg;
        if h > 0.0 {
            loss += h;
            gp.push(1.0 / n);
            gn.push(-1.0 / n);
        } else {
            gp.push(0.0);
            gn.push(0.0);
        }
    }
    Ok(LossOutput {
        loss: loss / n,
        d_pos_grads: gp,
        d_neg_grads: gn,
        p_neg_used: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::NegSide;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triplet(d_pos: f64, d_neg: f64) -> MinedTriplet {
        MinedTriplet {
            anchor: 0,
            positive: 0,
            negative: 1,
            side: NegSide::AnchorAnchor,
            d_pos,
            d_neg,
        }
    }

    #[test]
    fn p_neg_hand_values() {
        // distances with median 1.2
        let out = compute_p_neg(&[1.0, 1.2, 1.4], 1.05).unwrap();
        assert!((out - 2.46).abs() < 1e-12);
        let out = compute_p_neg(&[1.0, 1.2, 1.4], 0.0).unwrap();
        assert_eq!(out, 1.2);
        let out = compute_p_neg(&vec![0.8; 32], 1.05).unwrap();
        assert!((out - 1.64).abs() < 1e-12);
        assert!(matches!(
            compute_p_neg(&[], 1.0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn both_wells_at_minima_give_zero() {
        // gamma = 0 and a constant negative list puts P_neg exactly at d_neg
        let cfg = BalanceLossConfig {
            alpha: 2,
            gamma: 0.0,
        };
        let out = balance_loss(&[triplet(0.0, 1.3)], &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.d_pos_grads[0], 0.0);
        assert_eq!(out.d_neg_grads[0], 0.0);
    }

    #[test]
    fn hand_evaluated_single_triplet() {
        let cfg = BalanceLossConfig {
            alpha: 2,
            gamma: 1.05,
        };
        let out = balance_loss_with_p_neg(&[triplet(0.5, 1.0)], &cfg, 2.46).unwrap();
        assert!((out.loss - 2.3816).abs() < 1e-12);
        assert!((out.d_pos_grads[0] - 1.0).abs() < 1e-12);
        assert!((out.d_neg_grads[0] - (-2.92)).abs() < 1e-12);
    }

    #[test]
    fn odd_alpha_rejected() {
        let cfg = BalanceLossConfig {
            alpha: 3,
            gamma: 1.0,
        };
        assert!(matches!(
            balance_loss(&[triplet(0.5, 1.0)], &cfg),
            Err(Error::Config(_))
        ));
        let cfg = BalanceLossConfig { alpha: 0, gamma: 1.0 };
        assert!(matches!(
            balance_loss(&[triplet(0.5, 1.0)], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = BalanceLossConfig {
            alpha: 2,
            gamma: 1.05,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let triplets: Vec<MinedTriplet> = (0..16)
            .map(|_| triplet(rng.gen_range(0.01..1.0), rng.gen_range(0.2..1.9)))
            .collect();
        let d_negs: Vec<f64> = triplets.iter().map(|t| t.d_neg).collect();
        let p_neg = compute_p_neg(&d_negs, cfg.gamma).unwrap();
        let out = balance_loss_with_p_neg(&triplets, &cfg, p_neg).unwrap();
        let h = 1e-6;
        for i in 0..triplets.len() {
            // finite differences on d_pos and d_neg with P_neg held fixed
            for pos_channel in [true, false] {
                let mut plus = triplets.clone();
                let mut minus = triplets.clone();
                if pos_channel {
                    plus[i].d_pos += h;
                    minus[i].d_pos -= h;
                } else {
                    plus[i].d_neg += h;
                    minus[i].d_neg -= h;
                }
                let lp = balance_loss_with_p_neg(&plus, &cfg, p_neg).unwrap().loss;
                let lm = balance_loss_with_p_neg(&minus, &cfg, p_neg).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                let analytic = if pos_channel {
                    out.d_pos_grads[i]
                } else {
                    out.d_neg_grads[i]
                };
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((analytic - fd) / denom).abs() <= 1e-8,
                    "channel pos={pos_channel} i={i}: analytic {analytic} fd {fd}"
                );
            }
        }
    }

    #[test]
    fn triplet_loss_hand_cases() {
        let cfg = TripletLossConfig { margin: 1.0 };
        // inactive hinge
        let out = triplet_loss(&[triplet(0.2, 1.5)], &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.d_pos_grads[0], 0.0);
        assert_eq!(out.d_neg_grads[0], 0.0);
        // active hinge
        let out = triplet_loss(&[triplet(0.5, 0.7)], &cfg).unwrap();
        assert!((out.loss - 0.8).abs() < 1e-12);
        assert_eq!(out.d_pos_grads[0], 1.0);
        assert_eq!(out.d_neg_grads[0], -1.0);
        // exact boundary assigned to the inactive side
        let out = triplet_loss(&[triplet(0.5, 1.5)], &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.d_pos_grads[0], 0.0);
        assert_eq!(out.d_neg_grads[0], 0.0);
    }

    proptest! {
        /// Potential-well geometry: gradient signs around the wells.
        #[test]
        fn well_gradient_signs(d_pos in 0.001f64..2.0, d_neg in 0.0f64..2.0, p_neg in 0.5f64..2.5) {
            let cfg = BalanceLossConfig { alpha: 2, gamma: 1.05 };
            let out = balance_loss_with_p_neg(&[triplet(d_pos, d_neg)], &cfg, p_neg).unwrap();
            prop_assert!(out.d_pos_grads[0] > 0.0);
            if d_neg < p_neg - 1e-9 {
                prop_assert!(out.d_neg_grads[0] < 0.0);
            } else if d_neg > p_neg + 1e-9 {
                prop_assert!(out.d_neg_grads[0] > 0.0);
            }
        }

        /// In the active region the balance loss agrees in gradient
        /// direction with the triplet loss on both channels.
        #[test]
        fn direction_agrees_with_triplet_loss(d_pos in 0.01f64..1.0, d_neg in 0.01f64..1.5) {
            let p_neg = 2.0;
            prop_assume!(d_neg < p_neg);
            let bcfg = BalanceLossConfig { alpha: 2, gamma: 1.05 };
            let tcfg = TripletLossConfig { margin: 2.0 };
            let b = balance_loss_with_p_neg(&[triplet(d_pos, d_neg)], &bcfg, p_neg).unwrap();
            let t = triplet_loss(&[triplet(d_pos, d_neg)], &tcfg).unwrap();
            prop_assert_eq!(b.d_pos_grads[0].signum(), t.d_pos_grads[0].signum());
            prop_assert_eq!(b.d_neg_grads[0].signum(), t.d_neg_grads[0].signum());
        }

        /// For alpha = 2 the negative gradient magnitude is affine and
        /// strictly decreasing in d_neg on [0, P_neg].
        #[test]
        fn linear_weight_growth(p_neg in 1.0f64..2.5) {
            let cfg = BalanceLossConfig { alpha: 2, gamma: 1.05 };
            let samples: Vec<f64> = (0..10).map(|i| p_neg * i as f64 / 10.0).collect();
            let mags: Vec<f64> = samples
                .iter()
                .map(|&d| balance_loss_with_p_neg(&[triplet(0.5, d)], &cfg, p_neg)
                    .unwrap()
                    .d_neg_grads[0]
                    .abs())
                .collect();
            for w in mags.windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            // affine: second differences vanish
            for w in mags.windows(3) {
                prop_assert!(((w[2] - w[1]) - (w[1] - w[0])).abs() < 1e-9);
            }
        }

        /// P_neg is invariant under permutation of the batch.
        #[test]
        fn p_neg_permutation_invariant(mut ds in proptest::collection::vec(0.0f64..2.0, 2..40), seed in 0u64..100) {
            let p1 = compute_p_neg(&ds, 1.05).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            ds.shuffle(&mut rng);
            let p2 = compute_p_neg(&ds, 1.05).unwrap();
            prop_assert_eq!(p1, p2);
        }
    }
}
