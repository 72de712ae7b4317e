//! Central finite-difference verification of every analytic gradient path.
//!
//! Each component is checked in isolation and then end to end. For the
//! end-to-end check the mined triplet structure, the negative well
//! position and the confidence weights are frozen before differencing,
//! since all three are constants of the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{balance_loss_with_p_neg, BalanceLossConfig};
use crate::math::{unit_distance, Matrix};
use crate::mining::{mine_batch, MinedTriplet, NegSide};
use crate::model::{Activation, DescriptorNet};
use crate::supervision::{
    supervise_batch, weighted_balance_loss_with_p_neg, ConfidenceWeights, SupervisorConfig,
};
use crate::train::embedding_gradients;
use crate::dataset::PatchBatch;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub components: Vec<ComponentReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.max_rel_err.is_finite() && c.max_rel_err <= self.tolerance)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn synthetic_triplets(rng: &mut ChaCha8Rng, n: usize) -> Vec<MinedTriplet> {
    (0..n)
        .map(|i| MinedTriplet {
            anchor: i,
            positive: i,
            negative: (i + 1) % n,
            side: NegSide::AnchorAnchor,
            d_pos: rng.gen_range(0.05..1.5),
            d_neg: rng.gen_range(0.05..2.0),
        })
        .collect()
}

/// Check d(loss)/d(distance) of the two-well loss against central
/// differences with the well position pinned.
pub fn balance_loss_max_rel_err(seed: u64, n: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triplets = synthetic_triplets(&mut rng, n);
    let cfg = BalanceLossConfig::default();
    let p_neg = rng.gen_range(0.5..2.5);
    let out = balance_loss_with_p_neg(&triplets, &cfg, p_neg)?;
    let mut worst = 0.0f64;
    for i in 0..n {
        for pos_side in [true, false] {
            let eval = |delta: f64| -> Result<f64> {
                let mut t = triplets.clone();
                if pos_side {
                    t[i].d_pos += delta;
                } else {
                    t[i].d_neg += delta;
                }
                Ok(balance_loss_with_p_neg(&t, &cfg, p_neg)?.loss)
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let analytic = if pos_side {
                out.d_pos_grads[i]
            } else {
                out.d_neg_grads[i]
            };
            worst = worst.max(rel_err(analytic, fd));
        }
    }
    Ok(worst)
}

/// Same check with frozen per-triplet weights applied.
pub fn weighted_balance_loss_max_rel_err(seed: u64, n: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triplets = synthetic_triplets(&mut rng, n);
    let cfg = BalanceLossConfig::default();
    let p_neg = rng.gen_range(0.5..2.5);
    let weights = ConfidenceWeights {
        confidence: vec![0.0; n],
        weight: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };
    let out = weighted_balance_loss_with_p_neg(&triplets, &weights, &cfg, p_neg)?;
    let mut worst = 0.0f64;
    for i in 0..n {
        for pos_side in [true, false] {
            let eval = |delta: f64| -> Result<f64> {
                let mut t = triplets.clone();
                if pos_side {
                    t[i].d_pos += delta;
                } else {
                    t[i].d_neg += delta;
                }
                Ok(weighted_balance_loss_with_p_neg(&t, &weights, &cfg, p_neg)?.loss)
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let analytic = if pos_side {
                out.d_pos_grads[i]
            } else {
                out.d_neg_grads[i]
            };
            worst = worst.max(rel_err(analytic, fd));
        }
    }
    Ok(worst)
}

fn random_inputs(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Matrix {
    Matrix {
        rows,
        cols: dim,
        data: (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// Check the network backward pass: for a linear functional
/// L = sum(G .* f(x)), compare analytic parameter gradients against
/// central differences over every parameter.
pub fn backward_max_rel_err(seed: u64, rows: usize, layer_sizes: &[usize]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = DescriptorNet::new_seeded(layer_sizes, Activation::Tanh, seed ^ 0x9e37)?;
    let inputs = random_inputs(&mut rng, rows, layer_sizes[0]);
    let out_dim = *layer_sizes.last().unwrap();
    let upstream = random_inputs(&mut rng, rows, out_dim);

    let (_, cache) = net.forward(&inputs)?;
    let grads = net.backward(&cache, &upstream)?;
    let analytic: Vec<f64> = grads.tensors.iter().flatten().copied().collect();

    let base = net.params_flat();
    let mut probe = net.clone();
    let eval = |probe: &mut DescriptorNet, params: &[f64]| -> Result<f64> {
        probe.set_params_flat(params)?;
        let (emb, _) = probe.forward(&inputs)?;
        let mut l = 0.0;
        for r in 0..rows {
            for k in 0..out_dim {
                l += upstream.row(r)[k] * emb.row(r)[k];
            }
        }
        Ok(l)
    };
    let mut worst = 0.0f64;
    for p in 0..base.len() {
        let mut params = base.clone();
        params[p] = base[p] + FD_STEP;
        let hi = eval(&mut probe, &params)?;
        params[p] = base[p] - FD_STEP;
        let lo = eval(&mut probe, &params)?;
        worst = worst.max(rel_err(analytic[p], (hi - lo) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

/// End-to-end check: weighted two-well loss composed with mining-frozen
/// distances and the network, differentiated w.r.t. every parameter.
///
/// `corrupt` injects a deliberate error into one analytic gradient so the
/// harness's failure path can be exercised.
pub fn end_to_end_max_rel_err(
    seed: u64,
    batch: usize,
    layer_sizes: &[usize],
    corrupt: bool,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = layer_sizes[0];
    let net = DescriptorNet::new_seeded(layer_sizes, Activation::Tanh, seed ^ 0x51f1)?;
    let anchors = random_inputs(&mut rng, batch, dim);
    let positives = random_inputs(&mut rng, batch, dim);
    let owner: Vec<usize> = (0..batch).collect();
    let ids: Vec<u32> = (0..batch as u32).collect();

    // freeze triplet structure, well position and weights at base params
    let (ea, ca) = net.forward(&anchors)?;
    let (ep, cp) = net.forward(&positives)?;
    let triplets = mine_batch(&ea, &ep, &owner, &ids)?;
    let pbatch = PatchBatch {
        anchors: anchors.clone(),
        positives: positives.clone(),
        positive_owner: owner,
        cluster_ids: ids,
    };
    let sup_cfg = SupervisorConfig::default();
    let weights = supervise_batch(&net, &pbatch, &triplets, &sup_cfg)?;
    let cfg = BalanceLossConfig::default();
    let d_negs: Vec<f64> = triplets.iter().map(|t| t.d_neg).collect();
    let p_neg = crate::loss::compute_p_neg(&d_negs, cfg.gamma)?;

    let out = weighted_balance_loss_with_p_neg(&triplets, &weights, &cfg, p_neg)?;
    let (ga, gp) = embedding_gradients(&triplets, &ea, &ep, &out);
    let mut grads = net.backward(&ca, &ga)?;
    grads.add_assign(&net.backward(&cp, &gp)?);
    let mut analytic: Vec<f64> = grads.tensors.iter().flatten().copied().collect();
    if corrupt {
        analytic[0] += 1e-3;
    }

    let base = net.params_flat();
    let mut probe = net.clone();
    let alpha = cfg.alpha as i32;
    let n = triplets.len() as f64;
    let mut eval = |params: &[f64]| -> Result<f64> {
        probe.set_params_flat(params)?;
        let (ea, _) = probe.forward(&anchors)?;
        let (ep, _) = probe.forward(&positives)?;
        let mut l = 0.0;
        for (i, t) in triplets.iter().enumerate() {
            let d_pos = unit_distance(ea.row(t.anchor), ep.row(t.positive));
            let left = if t.side.left_is_positive() {
                ep.row(t.positive)
            } else {
                ea.row(t.anchor)
            };
            let right = if t.side.right_is_positive() {
                ep.row(t.negative)
            } else {
                ea.row(t.negative)
            };
            let d_neg = unit_distance(left, right);
            l += weights.weight[i] * (d_pos.powi(alpha) + (d_neg - p_neg).powi(alpha));
        }
        Ok(l / n)
    };
    let mut worst = 0.0f64;
    for p in 0..base.len() {
        let mut params = base.clone();
        params[p] = base[p] + FD_STEP;
        let hi = eval(&params)?;
        params[p] = base[p] - FD_STEP;
        let lo = eval(&params)?;
        worst = worst.max(rel_err(analytic[p], (hi - lo) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

/// Run every component check at the default sizes.
pub fn run_gradcheck(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let components = vec![
        ComponentReport {
            name: "balance_loss".into(),
            max_rel_err: balance_loss_max_rel_err(seed, 16)?,
        },
        ComponentReport {
            name: "weighted_balance_loss".into(),
            max_rel_err: weighted_balance_loss_max_rel_err(seed.wrapping_add(1), 16)?,
        },
        ComponentReport {
            name: "network_backward".into(),
            max_rel_err: backward_max_rel_err(seed.wrapping_add(2), 6, &[8, 10, 6])?,
        },
        ComponentReport {
            name: "end_to_end".into(),
            max_rel_err: end_to_end_max_rel_err(seed.wrapping_add(3), 8, &[8, 10, 6], corrupt)?,
        },
    ];
    Ok(GradCheckReport {
        components,
        tolerance: DEFAULT_TOLERANCE,
    })
}
