//! Retrieval-style evaluation: verification FPR at fixed recall, matching
//! mAP, and retrieval mAP, plus per-tier report assembly.
//!
//! All metrics rank by distance ascending with the candidate index as the
//! tie-breaker, and operate purely on distances so they are independent of
//! the embedding that produced them.

use crate::dataset::{PatchDataset, Tier};
use crate::error::{Error, Result};
use crate::math::{unit_distance, EmbeddingBatch, Matrix};
use crate::model::DescriptorNet;

/// Labelled distances for the verification task; `labels[i]` is true when
/// pair i is a genuine match.
#[derive(Debug, Clone)]
pub struct VerificationSet {
    pub distances: Vec<f64>,
    pub labels: Vec<bool>,
}

impl VerificationSet {
    pub fn validate(&self) -> Result<()> {
        if self.distances.len() != self.labels.len() {
            return Err(Error::Alignment {
                expected: self.distances.len(),
                got: self.labels.len(),
            });
        }
        let matches = self.labels.iter().filter(|&&l| l).count();
        if matches == 0 || matches == self.labels.len() {
            return Err(Error::Protocol(
                "verification needs both matching and non-matching pairs".into(),
            ));
        }
        Ok(())
    }
}

/// False-positive rate at the smallest distance threshold that accepts at
/// least `recall` of the matching pairs. Pairs at exactly the threshold
/// count as accepted.
pub fn fpr_at_recall(set: &VerificationSet, recall: f64) -> Result<f64> {
    set.validate()?;
    if !(recall > 0.0 && recall <= 1.0) {
        return Err(Error::Config(format!(
            "recall must lie in (0, 1], got {recall}"
        )));
    }
    let mut match_d: Vec<f64> = set
        .distances
        .iter()
        .zip(&set.labels)
        .filter(|(_, &l)| l)
        .map(|(&d, _)| d)
        .collect();
    match_d.sort_unstable_by(f64::total_cmp);
    let needed = (recall * match_d.len() as f64).ceil().max(1.0) as usize;
    let tau = match_d[needed - 1];
    let (mut fp, mut negs) = (0usize, 0usize);
    for (&d, &l) in set.distances.iter().zip(&set.labels) {
        if !l {
            negs += 1;
            if d <= tau {
                fp += 1;
            }
        }
    }
    Ok(fp as f64 / negs as f64)
}

/// One query's view of a candidate pool.
#[derive(Debug, Clone)]
pub struct RankedQuery {
    pub distances: Vec<f64>,
    pub relevant: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct RankingTask {
    pub queries: Vec<RankedQuery>,
}

fn ranked_indices(q: &RankedQuery) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.distances.len()).collect();
    idx.sort_by(|&a, &b| {
        q.distances[a]
            .total_cmp(&q.distances[b])
            .then(a.cmp(&b))
    });
    idx
}

fn validate_query(q: &RankedQuery) -> Result<usize> {
    if q.distances.len() != q.relevant.len() {
        return Err(Error::Alignment {
            expected: q.distances.len(),
            got: q.relevant.len(),
        });
    }
    let rel = q.relevant.iter().filter(|&&r| r).count();
    if rel == 0 {
        return Err(Error::Protocol(
            "ranking query with no relevant candidate".into(),
        ));
    }
    Ok(rel)
}

/// Mean average precision for one-to-one matching: every query has exactly
/// one relevant candidate and its AP is the reciprocal of that candidate's
/// rank.
pub fn matching_map(task: &RankingTask) -> Result<f64> {
    if task.queries.is_empty() {
        return Err(Error::EmptyInput("matching_map on empty task"));
    }
    let mut total = 0.0;
    for q in &task.queries {
        let rel = validate_query(q)?;
        if rel != 1 {
            return Err(Error::Protocol(format!(
                "matching query has {rel} relevant candidates, expected exactly 1"
            )));
        }
        let order = ranked_indices(q);
        let rank = order.iter().position(|&i| q.relevant[i]).unwrap() + 1;
        total += 1.0 / rank as f64;
    }
    Ok(total / task.queries.len() as f64)
}

/// Mean average precision for retrieval: AP is the mean of the precision
/// at each relevant candidate's rank.
pub fn retrieval_map(task: &RankingTask) -> Result<f64> {
    if task.queries.is_empty() {
        return Err(Error::EmptyInput("retrieval_map on empty task"));
    }
    let mut total = 0.0;
    for q in &task.queries {
        validate_query(q)?;
        let order = ranked_indices(q);
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (pos, &i) in order.iter().enumerate() {
            if q.relevant[i] {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        total += ap / hits as f64;
    }
    Ok(total / task.queries.len() as f64)
}

/// Build a matching task: each query row against the full gallery, where
/// the relevant gallery row is the one sharing the query's cluster id.
pub fn matching_task(
    queries: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    cluster_ids: &[u32],
) -> Result<RankingTask> {
    if queries.rows() != gallery.rows() || queries.rows() != cluster_ids.len() {
        return Err(Error::Alignment {
            expected: queries.rows(),
            got: gallery.rows().min(cluster_ids.len()),
        });
    }
    if queries.dim() != gallery.dim() {
        return Err(Error::Shape(format!(
            "matching task dims {} vs {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    let mut out = Vec::with_capacity(queries.rows());
    for qi in 0..queries.rows() {
        let distances = (0..gallery.rows())
            .map(|gi| unit_distance(queries.row(qi), gallery.row(gi)))
            .collect();
        let relevant = cluster_ids
            .iter()
            .map(|&c| c == cluster_ids[qi])
            .collect();
        out.push(RankedQuery {
            distances,
            relevant,
        });
    }
    Ok(RankingTask { queries: out })
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub tier: String,
    pub metric: String,
    pub value: f64,
}

/// Embed a dataset and report FPR@0.95, matching mAP and retrieval mAP
/// per difficulty tier and over all clusters.
pub fn per_tier_report(net: &DescriptorNet, dataset: &PatchDataset) -> Result<Vec<MetricRow>> {
    let nc = dataset.num_clusters();
    let mpc = dataset.members_per_cluster;
    if mpc < 2 {
        return Err(Error::Protocol(
            "evaluation needs at least one positive per cluster".into(),
        ));
    }
    let (emb, _) = net.forward(&dataset.patches)?;

    let groups: Vec<(String, Vec<usize>)> = {
        let mut g = vec![
            ("all".to_string(), (0..nc).collect::<Vec<usize>>()),
        ];
        for tier in [Tier::Easy, Tier::Hard, Tier::Tough] {
            let clusters: Vec<usize> = (0..nc)
                .filter(|&c| dataset.tiers[c] == tier)
                .collect();
            if clusters.len() >= 2 {
                g.push((tier.name().to_string(), clusters));
            }
        }
        g
    };

    let mut rows = Vec::new();
    for (name, clusters) in groups {
        // verification: anchor-vs-own-positives matched against
        // anchor-vs-next-cluster's-positives, equally many of each
        let mut set = VerificationSet {
            distances: Vec::new(),
            labels: Vec::new(),
        };
        for (k, &c) in clusters.iter().enumerate() {
            let next = clusters[(k + 1) % clusters.len()];
            let a = emb.row(dataset.anchor_row(c));
            for m in 1..mpc {
                set.distances
                    .push(unit_distance(a, emb.row(dataset.anchor_row(c) + m)));
                set.labels.push(true);
                set.distances
                    .push(unit_distance(a, emb.row(dataset.anchor_row(next) + m)));
                set.labels.push(false);
            }
        }
        rows.push(MetricRow {
            tier: name.clone(),
            metric: "fpr_at_95".into(),
            value: fpr_at_recall(&set, 0.95)?,
        });

        // matching: anchors against first positives, one relevant each
        let edim = emb.dim();
        let mut q = Matrix::zeros(clusters.len(), edim);
        let mut g = Matrix::zeros(clusters.len(), edim);
        for (k, &c) in clusters.iter().enumerate() {
            q.row_mut(k).copy_from_slice(emb.row(dataset.anchor_row(c)));
            g.row_mut(k)
                .copy_from_slice(emb.row(dataset.anchor_row(c) + 1));
        }
        let ids: Vec<u32> = (0..clusters.len() as u32).collect();
        let qb = EmbeddingBatch::from_unit_rows(q)?;
        let gb = EmbeddingBatch::from_unit_rows(g)?;
        rows.push(MetricRow {
            tier: name.clone(),
            metric: "matching_map".into(),
            value: matching_map(&matching_task(&qb, &gb, &ids)?)?,
        });

        // retrieval: anchors against every positive of every cluster
        let mut task = RankingTask {
            queries: Vec::with_capacity(clusters.len()),
        };
        for &c in &clusters {
            let a = emb.row(dataset.anchor_row(c));
            let mut distances = Vec::with_capacity(clusters.len() * (mpc - 1));
            let mut relevant = Vec::with_capacity(clusters.len() * (mpc - 1));
            for &c2 in &clusters {
                for m in 1..mpc {
                    distances.push(unit_distance(a, emb.row(dataset.anchor_row(c2) + m)));
                    relevant.push(c2 == c);
                }
            }
            task.queries.push(RankedQuery {
                distances,
                relevant,
            });
        }
        rows.push(MetricRow {
            tier: name,
            metric: "retrieval_map".into(),
            value: retrieval_map(&task)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fpr_with_identical_score_lists() {
        // 20 matches and 20 non-matches at the same 20 distances: the
        // threshold accepting 19/20 matches also accepts 19 non-matches.
        let d: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        let set = VerificationSet {
            distances: d.iter().chain(d.iter()).copied().collect(),
            labels: (0..40).map(|i| i < 20).collect(),
        };
        let fpr = fpr_at_recall(&set, 0.95).unwrap();
        assert!((fpr - 0.95).abs() < 1e-12);
    }

    #[test]
    fn fpr_on_separable_sets_is_zero() {
        let set = VerificationSet {
            distances: vec![0.1, 0.2, 0.3, 0.8, 0.9, 1.0],
            labels: vec![true, true, true, false, false, false],
        };
        assert_eq!(fpr_at_recall(&set, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn fpr_threshold_boundary_counts_as_accepted() {
        // tau lands exactly on a non-match distance
        let set = VerificationSet {
            distances: vec![0.5, 0.5, 0.6],
            labels: vec![true, false, false],
        };
        assert!((fpr_at_recall(&set, 1.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fpr_oracle_brute_force_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let n = 40;
            let set = VerificationSet {
                distances: (0..n).map(|_| rng.gen_range(0.0..2.0)).collect(),
                labels: (0..n).map(|i| i % 3 != 0).collect(),
            };
            for recall in [0.5, 0.8, 0.95, 1.0] {
                let got = fpr_at_recall(&set, recall).unwrap();
                // oracle: sweep every candidate threshold, keep the
                // smallest reaching the recall, then count false accepts
                let n_match = set.labels.iter().filter(|&&l| l).count() as f64;
                let n_neg = set.labels.len() as f64 - n_match;
                let mut taus: Vec<f64> = set.distances.clone();
                taus.sort_unstable_by(f64::total_cmp);
                let mut best = f64::INFINITY;
                for &tau in &taus {
                    let tp = set
                        .distances
                        .iter()
                        .zip(&set.labels)
                        .filter(|&(&d, &l)| l && d <= tau)
                        .count() as f64;
                    if tp / n_match >= recall {
                        best = tau;
                        break;
                    }
                }
                let fp = set
                    .distances
                    .iter()
                    .zip(&set.labels)
                    .filter(|&(&d, &l)| !l && d <= best)
                    .count() as f64;
                assert_eq!(got, fp / n_neg);
            }
        }
    }

    #[test]
    fn matching_ap_is_reciprocal_rank() {
        // two queries: relevant at rank 1 and at rank 3
        let task = RankingTask {
            queries: vec![
                RankedQuery {
                    distances: vec![0.1, 0.5, 0.9],
                    relevant: vec![true, false, false],
                },
                RankedQuery {
                    distances: vec![0.1, 0.5, 0.9],
                    relevant: vec![false, false, true],
                },
            ],
        };
        let map = matching_map(&task).unwrap();
        assert!((map - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn retrieval_ap_hand_case() {
        // relevant at ranks 1 and 3: AP = (1/1 + 2/3)/2 = 5/6
        let task = RankingTask {
            queries: vec![RankedQuery {
                distances: vec![0.1, 0.2, 0.3, 0.4],
                relevant: vec![true, false, true, false],
            }],
        };
        assert!((retrieval_map(&task).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_candidate_index() {
        let task = RankingTask {
            queries: vec![RankedQuery {
                distances: vec![0.5, 0.5],
                relevant: vec![false, true],
            }],
        };
        // the irrelevant candidate at the same distance but lower index
        // wins rank 1
        assert!((matching_map(&task).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_queries_are_rejected() {
        let no_rel = RankingTask {
            queries: vec![RankedQuery {
                distances: vec![0.1],
                relevant: vec![false],
            }],
        };
        assert!(matching_map(&no_rel).is_err());
        let two_rel = RankingTask {
            queries: vec![RankedQuery {
                distances: vec![0.1, 0.2],
                relevant: vec![true, true],
            }],
        };
        assert!(matching_map(&two_rel).is_err());
        assert!(retrieval_map(&two_rel).is_ok());
        let all_match = VerificationSet {
            distances: vec![0.1, 0.2],
            labels: vec![true, true],
        };
        assert!(fpr_at_recall(&all_match, 0.95).is_err());
    }

    #[test]
    fn per_tier_report_covers_all_groups() {
        use crate::dataset::{generate, SyntheticConfig};
        use crate::model::{Activation, DescriptorNet};
        let ds = generate(&SyntheticConfig {
            num_clusters: 30,
            positives_per_cluster: 2,
            input_dim: 8,
            noise_easy: 0.05,
            noise_hard: 0.15,
            noise_tough: 0.3,
            false_negative_rate: 0.0,
            center_spread: 0.05,
            seed: 5,
        })
        .unwrap();
        let net = DescriptorNet::new_seeded(&[8, 10, 6], Activation::Tanh, 1).unwrap();
        let rows = per_tier_report(&net, &ds).unwrap();
        assert_eq!(rows.len(), 12); // 4 groups x 3 metrics
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.value), "{}: {}", r.metric, r.value);
        }
    }

    proptest! {
        #[test]
        fn retrieval_map_in_unit_interval(
            ds in proptest::collection::vec(0.0f64..2.0, 6),
            rel_mask in 1u8..63,
        ) {
            let relevant: Vec<bool> = (0..6).map(|i| rel_mask >> i & 1 == 1).collect();
            let task = RankingTask {
                queries: vec![RankedQuery { distances: ds, relevant }],
            };
            let v = retrieval_map(&task).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn fpr_is_monotone_in_recall(
            ds in proptest::collection::vec(0.0f64..2.0, 20),
        ) {
            let set = VerificationSet {
                distances: ds,
                labels: (0..20).map(|i| i % 2 == 0).collect(),
            };
            let mut prev = 0.0;
            for r in [0.25, 0.5, 0.75, 1.0] {
                let f = fpr_at_recall(&set, r).unwrap();
                prop_assert!(f >= prev - 1e-15);
                prev = f;
            }
        }

        #[test]
        fn metrics_are_invariant_to_monotone_distance_maps(
            ds in proptest::collection::vec(0.001f64..2.0, 8),
            rel in 0usize..8,
        ) {
            let relevant: Vec<bool> = (0..8).map(|i| i == rel).collect();
            let q1 = RankedQuery { distances: ds.clone(), relevant: relevant.clone() };
            let q2 = RankedQuery {
                distances: ds.iter().map(|d| d * d + 1.0).collect(),
                relevant,
            };
            let m1 = matching_map(&RankingTask { queries: vec![q1] }).unwrap();
            let m2 = matching_map(&RankingTask { queries: vec![q2] }).unwrap();
            prop_assert_eq!(m1, m2);
        }
    }
}
