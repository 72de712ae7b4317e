//! Synthetic patch-cluster data: generation, batch sampling under the
//! one-pair-per-cluster protocol, and file persistence.
//!
//! Each cluster has a latent center on the unit sphere; members are the
//! center plus tier-scaled isotropic noise, renormalized. With probability
//! `false_negative_rate` a cluster is duplicated under a distinct id with a
//! near-identical center, planting a controlled false negative that ground
//! truth flags. Patch coordinates are quantized to f32 so file round trips
//! are bit-exact.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BDDS";

/// Difficulty tier of a cluster, ordered by noise level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tier {
    Easy = 0,
    Hard = 1,
    Tough = 2,
}

impl Tier {
    pub fn from_u8(v: u8) -> Result<Tier> {
        match v {
            0 => Ok(Tier::Easy),
            1 => Ok(Tier::Hard),
            2 => Ok(Tier::Tough),
            other => Err(Error::Format(format!("unknown tier tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Hard => "hard",
            Tier::Tough => "tough",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_clusters: usize,
    pub positives_per_cluster: usize,
    pub input_dim: usize,
    pub noise_easy: f64,
    pub noise_hard: f64,
    pub noise_tough: f64,
    pub false_negative_rate: f64,
    /// Per-coordinate spread of cluster centers off the low-dimensional
    /// center manifold. Small values give a crowded similarity spectrum
    /// with genuinely close non-matching clusters; values around 1.0 make
    /// the ambient component dominate, so centers are nearly uniform on
    /// the sphere and non-matching clusters are well separated.
    pub center_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_clusters: 200,
            positives_per_cluster: 2,
            input_dim: 32,
            noise_easy: 0.05,
            noise_hard: 0.15,
            noise_tough: 0.30,
            false_negative_rate: 0.0,
            center_spread: CENTER_JITTER,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters < 2 {
            return Err(Error::Config(format!(
                "need at least 2 clusters, got {}",
                self.num_clusters
            )));
        }
        if self.positives_per_cluster < 1 {
            return Err(Error::Config("positives_per_cluster must be >= 1".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if !(self.noise_easy > 0.0
            && self.noise_easy < self.noise_hard
            && self.noise_hard < self.noise_tough)
        {
            return Err(Error::Config(format!(
                "tier noise levels must be strictly increasing, got {} / {} / {}",
                self.noise_easy, self.noise_hard, self.noise_tough
            )));
        }
        if !(0.0..1.0).contains(&self.false_negative_rate) {
            return Err(Error::Config(format!(
                "false_negative_rate must be in [0,1), got {}",
                self.false_negative_rate
            )));
        }
        if !(self.center_spread.is_finite() && self.center_spread >= 0.0) {
            return Err(Error::Config(format!(
                "center_spread must be finite and non-negative, got {}",
                self.center_spread
            )));
        }
        Ok(())
    }

    fn noise_for(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Easy => self.noise_easy,
            Tier::Hard => self.noise_hard,
            Tier::Tough => self.noise_tough,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub dim: usize,
    /// Members per cluster: one anchor plus the positives. Patches are
    /// stored contiguously by cluster.
    pub members_per_cluster: usize,
    pub patches: Matrix,
    /// Per-cluster difficulty tier.
    pub tiers: Vec<Tier>,
    /// Per-cluster flag: this cluster is a planted near-duplicate.
    pub planted: Vec<bool>,
    /// Per-cluster duplicate-pair link (both directions of a planted pair).
    pub partner: Vec<Option<u32>>,
    /// Generation parameters echoed for the metadata block.
    pub meta: String,
}

/// One training batch: one anchor and its positives per distinct cluster.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub anchors: Matrix,
    pub positives: Matrix,
    /// Anchor slot owning each positive row.
    pub positive_owner: Vec<usize>,
    /// Global cluster id per anchor slot.
    pub cluster_ids: Vec<u32>,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn unit_gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        if let Ok(u) = crate::math::l2_normalize(&v) {
            return u;
        }
    }
}

/// Cluster centers live near a low-dimensional great subsphere instead of
/// being uniform over the full sphere. Uniform high-dimensional samples
/// are all nearly equidistant, which makes every negative equally easy;
/// real patch collections have a graded similarity spectrum with genuinely
/// close non-matching clusters, and a low-dimensional center manifold
/// (plus a little ambient jitter, `center_spread`) reproduces that heavy
/// lower tail.
const CENTER_MANIFOLD_DIM: usize = 3;
const CENTER_JITTER: f64 = 0.05;

/// Random orthonormal basis of a k-dimensional subspace via Gram-Schmidt.
fn subspace_basis(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        if let Ok(u) = crate::math::l2_normalize(&v) {
            basis.push(u);
        }
    }
    basis
}

fn manifold_center(rng: &mut ChaCha8Rng, basis: &[Vec<f64>], dim: usize, spread: f64) -> Vec<f64> {
    let coords = unit_gaussian_vec(rng, basis.len());
    let mut v = vec![0.0; dim];
    for (u, b) in coords.iter().zip(basis) {
        for (x, y) in v.iter_mut().zip(b) {
            *x += u * y;
        }
    }
    for x in v.iter_mut() {
        *x += spread * standard_normal(rng);
    }
    loop {
        if let Ok(u) = crate::math::l2_normalize(&v) {
            return u;
        }
    }
}

fn quantize_f32(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = *x as f32 as f64;
    }
}

impl PatchDataset {
    pub fn num_clusters(&self) -> usize {
        self.tiers.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.rows
    }

    pub fn cluster_of(&self, patch: usize) -> u32 {
        (patch / self.members_per_cluster) as u32
    }

    /// Anchor row index of a cluster; positives follow it.
    pub fn anchor_row(&self, cluster: usize) -> usize {
        cluster * self.members_per_cluster
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<PatchDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mpc = 1 + cfg.positives_per_cluster;
    let dim = cfg.input_dim;

    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut tiers: Vec<Tier> = Vec::new();
    let mut planted: Vec<bool> = Vec::new();
    let mut partner: Vec<Option<u32>> = Vec::new();
    let mut dup_queue: Vec<(usize, Tier)> = Vec::new();
    let basis = subspace_basis(&mut rng, dim, CENTER_MANIFOLD_DIM.min(dim));

    for c in 0..cfg.num_clusters {
        let tier = match c % 3 {
            0 => Tier::Easy,
            1 => Tier::Hard,
            _ => Tier::Tough,
        };
        centers.push(manifold_center(&mut rng, &basis, dim, cfg.center_spread));
        tiers.push(tier);
        planted.push(false);
        partner.push(None);
        if rng.gen::<f64>() < cfg.false_negative_rate {
            dup_queue.push((c, tier));
        }
    }
    // planted false negatives: duplicate clusters with centers perturbed
    // 10x below the easy-tier noise, so members of the pair are
    // geometrically indistinguishable from true positives
    for (base, tier) in dup_queue {
        let id = centers.len();
        let eps = cfg.noise_easy * 0.1;
        let mut center = centers[base].clone();
        for x in center.iter_mut() {
            *x += eps * standard_normal(&mut rng);
        }
        let center = crate::math::l2_normalize(&center)?;
        centers.push(center);
        tiers.push(tier);
        planted.push(true);
        partner[base] = Some(id as u32);
        partner.push(Some(base as u32));
    }

    let total = centers.len();
    let mut patches = Matrix::zeros(total * mpc, dim);
    for (c, center) in centers.iter().enumerate() {
        let noise = cfg.noise_for(tiers[c]);
        for m in 0..mpc {
            let mut v: Vec<f64> = center
                .iter()
                .map(|&x| x + noise * standard_normal(&mut rng))
                .collect();
            let mut u = crate::math::l2_normalize(&v)?;
            quantize_f32(&mut u);
            v = u;
            patches.row_mut(c * mpc + m).copy_from_slice(&v);
        }
    }

    let meta = serde_json::to_string(cfg).map_err(|e| Error::Format(e.to_string()))?;
    Ok(PatchDataset {
        dim,
        members_per_cluster: mpc,
        patches,
        tiers,
        planted,
        partner,
        meta,
    })
}

/// Draw `batch_size` distinct clusters without replacement.
pub fn sample_batch(
    dataset: &PatchDataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchBatch> {
    let nc = dataset.num_clusters();
    if batch_size > nc {
        return Err(Error::Sampling(format!(
            "batch_size {batch_size} exceeds {nc} clusters"
        )));
    }
    if batch_size < 2 {
        return Err(Error::InsufficientBatch(batch_size));
    }
    let picks = rand::seq::index::sample(rng, nc, batch_size);
    let mpc = dataset.members_per_cluster;
    let dim = dataset.dim;
    let mut anchors = Matrix::zeros(batch_size, dim);
    let mut positives = Matrix::zeros(batch_size * (mpc - 1), dim);
    let mut positive_owner = Vec::with_capacity(batch_size * (mpc - 1));
    let mut cluster_ids = Vec::with_capacity(batch_size);
    for (slot, c) in picks.iter().enumerate() {
        let base = dataset.anchor_row(c);
        anchors
            .row_mut(slot)
            .copy_from_slice(dataset.patches.row(base));
        for m in 1..mpc {
            let p = slot * (mpc - 1) + (m - 1);
            positives
                .row_mut(p)
                .copy_from_slice(dataset.patches.row(base + m));
            positive_owner.push(slot);
        }
        cluster_ids.push(c as u32);
    }
    Ok(PatchBatch {
        anchors,
        positives,
        positive_owner,
        cluster_ids,
    })
}

pub fn save(dataset: &PatchDataset, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.members_per_cluster as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.num_clusters() as u32).to_le_bytes());
    for &x in &dataset.patches.data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for &t in &dataset.tiers {
        buf.push(t as u8);
    }
    for &p in &dataset.planted {
        buf.push(p as u8);
    }
    for &p in &dataset.partner {
        buf.extend_from_slice(&p.unwrap_or(u32::MAX).to_le_bytes());
    }
    let meta = dataset.meta.as_bytes();
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta);
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PatchDataset> {
    let buf = fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Format(format!(
                "truncated payload at byte {} (wanted {n} more)",
                *pos
            )));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    macro_rules! u32le {
        () => {
            u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap())
        };
    }
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Format("bad dataset magic, expected BDDS".into()));
    }
    let version = u32le!();
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let dim = u32le!() as usize;
    let mpc = u32le!() as usize;
    let nc = u32le!() as usize;
    if dim == 0 || mpc < 2 || nc < 2 {
        return Err(Error::Format(format!(
            "implausible header: dim={dim} members={mpc} clusters={nc}"
        )));
    }
    let n_values = nc * mpc * dim;
    let mut data = Vec::with_capacity(n_values);
    for _ in 0..n_values {
        let b = take(&mut pos, 4)?;
        let v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::Format("non-finite patch value".into()));
        }
        data.push(v);
    }
    let mut tiers = Vec::with_capacity(nc);
    for _ in 0..nc {
        tiers.push(Tier::from_u8(take(&mut pos, 1)?[0])?);
    }
    let mut planted = Vec::with_capacity(nc);
    for _ in 0..nc {
        planted.push(take(&mut pos, 1)?[0] != 0);
    }
    let mut partner = Vec::with_capacity(nc);
    for _ in 0..nc {
        let v = u32le!();
        partner.push(if v == u32::MAX { None } else { Some(v) });
    }
    let meta_len = u32le!() as usize;
    let meta = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
        .map_err(|e| Error::Format(format!("metadata block: {e}")))?;
    Ok(PatchDataset {
        dim,
        members_per_cluster: mpc,
        patches: Matrix {
            rows: nc * mpc,
            cols: dim,
            data,
        },
        tiers,
        planted,
        partner,
        meta,
    })
}
