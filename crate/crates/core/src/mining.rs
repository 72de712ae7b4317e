//! Hardest-in-batch triplet construction.
//!
//! For each anchor the hardest positive (largest anchor-positive distance)
//! is selected first, then the negative distance is the minimum over the
//! four anchor/positive cross combinations against every other cluster.
//! Ties break by smallest opposing index, then by combination order.

use crate::error::{Error, Result};
use crate::math::{unit_distance, EmbeddingBatch};

/// Which of the four cross combinations produced the mined negative
/// distance. The first component refers to the anchor side, the second to
/// the opposing cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegSide {
    AnchorAnchor,
    AnchorPositive,
    PositiveAnchor,
    PositivePositive,
}

impl NegSide {
    /// Left endpoint of the negative edge is the anchor's selected positive
    /// rather than the anchor itself.
    pub fn left_is_positive(self) -> bool {
        matches!(self, NegSide::PositiveAnchor | NegSide::PositivePositive)
    }

    /// Right endpoint is the opposing cluster's selected positive.
    pub fn right_is_positive(self) -> bool {
        matches!(self, NegSide::AnchorPositive | NegSide::PositivePositive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedTriplet {
    /// Row in the anchor batch.
    pub anchor: usize,
    /// Row in the positive batch: the anchor's selected hard positive.
    pub positive: usize,
    /// Row of the mined negative, in the anchor batch or the positive batch
    /// depending on `side`.
    pub negative: usize,
    pub side: NegSide,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// Mine one triplet per anchor.
///
/// `positive_owner[p]` is the anchor row that positive row `p` belongs to;
/// with exactly one positive per anchor this is the identity and hard-
/// positive selection degenerates to that single positive.
pub fn mine_batch(
    anchors: &EmbeddingBatch,
    positives: &EmbeddingBatch,
    positive_owner: &[usize],
    cluster_ids: &[u32],
) -> Result<Vec<MinedTriplet>> {
    let n = anchors.rows();
    if n < 2 {
        return Err(Error::InsufficientBatch(n));
    }
    if anchors.dim() != positives.dim() {
        return Err(Error::Shape(format!(
            "mine_batch: anchor dim {} vs positive dim {}",
            anchors.dim(),
            positives.dim()
        )));
    }
    if cluster_ids.len() != n {
        return Err(Error::Shape(format!(
            "mine_batch: {n} anchors but {} cluster ids",
            cluster_ids.len()
        )));
    }
    if positive_owner.len() != positives.rows() {
        return Err(Error::Shape(format!(
            "mine_batch: {} positives but {} owner entries",
            positives.rows(),
            positive_owner.len()
        )));
    }
    {
        let mut seen = cluster_ids.to_vec();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Protocol("duplicate cluster ids in batch".into()));
        }
    }

    // hard positive per anchor: largest distance, ties to the smallest row
    let mut selected = vec![usize::MAX; n];
    let mut d_pos = vec![f64::NEG_INFINITY; n];
    for (p, &owner) in positive_owner.iter().enumerate() {
        if owner >= n {
            return Err(Error::Protocol(format!(
                "positive {p} owned by out-of-range anchor {owner}"
            )));
        }
        let d = unit_distance(anchors.row(owner), positives.row(p));
        if d > d_pos[owner] {
            d_pos[owner] = d;
            selected[owner] = p;
        }
    }
    if let Some(i) = selected.iter().position(|&s| s == usize::MAX) {
        return Err(Error::Protocol(format!("anchor {i} has no positive")));
    }

    let combos = [
        NegSide::AnchorAnchor,
        NegSide::AnchorPositive,
        NegSide::PositiveAnchor,
        NegSide::PositivePositive,
    ];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best_d = f64::INFINITY;
        let mut best_j = 0usize;
        let mut best_side = NegSide::AnchorAnchor;
        for j in 0..n {
            if j == i {
                continue;
            }
            for side in combos {
                let left = if side.left_is_positive() {
                    positives.row(selected[i])
                } else {
                    anchors.row(i)
                };
                let right = if side.right_is_positive() {
                    positives.row(selected[j])
                } else {
                    anchors.row(j)
                };
                let d = unit_distance(left, right);
                if d < best_d {
                    best_d = d;
                    best_j = j;
                    best_side = side;
                }
            }
        }
        let negative = if best_side.right_is_positive() {
            selected[best_j]
        } else {
            best_j
        };
        out.push(MinedTriplet {
            anchor: i,
            positive: selected[i],
            negative,
            side: best_side,
            d_pos: d_pos[i],
            d_neg: best_d,
        });
    }
    Ok(out)
}

/// Cluster id of a triplet's mined negative.
pub fn negative_cluster(
    triplet: &MinedTriplet,
    positive_owner: &[usize],
    cluster_ids: &[u32],
) -> u32 {
    if triplet.side.right_is_positive() {
        cluster_ids[positive_owner[triplet.negative]]
    } else {
        cluster_ids[triplet.negative]
    }
}
