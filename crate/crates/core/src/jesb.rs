//! Mask-similarity clustering and synthetic rebalancing.
//!
//! Samples are clustered by the Jaccard distance of their vessel masks with
//! k-medoids, the cluster count is chosen by silhouette, and every cluster is
//! topped up with photometric variants of its own members until it matches the
//! largest one.

use std::collections::BTreeMap;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imaging::{jaccard_distance, resize_mask, BinaryMask, FundusSample, GrayField};
use crate::invariant::box_mean;

const MAX_ITERATIONS: usize = 100;

/// Symmetric pairwise distances with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
    pub sample_ids: Vec<String>,
}

impl DistanceMatrix {
    /// Build from a full row-major `n x n` table, checking symmetry and range.
    pub fn from_entries(sample_ids: Vec<String>, entries: Vec<f64>) -> Result<Self> {
        let n = sample_ids.len();
        ensure!(entries.len() == n * n, "distance table must be {n}x{n}");
        for i in 0..n {
            ensure!(entries[i * n + i] == 0.0, "distance diagonal must be zero");
            for j in 0..n {
                let d = entries[i * n + j];
                ensure!((0.0..=1.0).contains(&d), "distance {d} outside [0, 1]");
                ensure!(d == entries[j * n + i], "distance table is not symmetric");
            }
        }
        Ok(DistanceMatrix { n, entries, sample_ids })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }
}

pub fn pairwise_distance(masks: &[&BinaryMask], sample_ids: Vec<String>) -> Result<DistanceMatrix> {
    let n = masks.len();
    ensure!(n >= 2, "pairwise distance needs at least 2 masks, got {n}");
    ensure!(
        sample_ids.len() == n,
        "expected {n} sample ids, got {}",
        sample_ids.len()
    );
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = jaccard_distance(masks[i], masks[j])?;
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, entries, sample_ids })
}

fn cluster_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Mean silhouette over all samples; singletons contribute 0.
pub fn silhouette_score(dist: &DistanceMatrix, labels: &[usize]) -> Result<f64> {
    let n = dist.len();
    ensure!(labels.len() == n, "expected {n} labels, got {}", labels.len());
    let k = cluster_count(labels);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let occupied = sizes.iter().filter(|&&s| s > 0).count();
    ensure!(
        occupied >= 2,
        "silhouette needs at least 2 non-empty clusters, got {occupied}"
    );

    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[labels[j]] += dist.get(i, j);
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Cluster index per sample, numbered by first appearance.
    pub labels: Vec<usize>,
    /// Sample index of each cluster's medoid.
    pub medoids: Vec<usize>,
    pub cost: f64,
}

fn assign(dist: &DistanceMatrix, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut cost = 0.0;
    let labels = (0..dist.len())
        .map(|i| {
            if let Some(pos) = medoids.iter().position(|&m| m == i) {
                return pos;
            }
            let mut best = 0;
            for (c, &m) in medoids.iter().enumerate() {
                if dist.get(i, m) < dist.get(i, medoids[best]) {
                    best = c;
                }
            }
            cost += dist.get(i, medoids[best]);
            best
        })
        .collect();
    (labels, cost)
}

fn total_cost(dist: &DistanceMatrix, medoids: &[usize]) -> f64 {
    assign(dist, medoids).1
}

/// Medoid sets up to this many candidates are searched exhaustively.
const EXACT_SEARCH_LIMIT: u64 = 20_000;

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k) as u64;
    let mut acc = 1u64;
    for i in 0..k {
        acc = acc.saturating_mul(n as u64 - i) / (i + 1);
    }
    acc
}

fn next_combination(comb: &mut [usize], n: usize) -> bool {
    let k = comb.len();
    let Some(i) = (0..k).rev().find(|&i| comb[i] < n - k + i) else {
        return false;
    };
    comb[i] += 1;
    for j in i + 1..k {
        comb[j] = comb[j - 1] + 1;
    }
    true
}

/// k-medoids over a precomputed distance matrix.
///
/// Seeded farthest-first initialization, then alternating assignment and
/// medoid update, then best-improvement medoid swaps until no swap lowers the
/// total distance to the medoids. Small problems are then searched
/// exhaustively.
pub fn cluster_medoids(dist: &DistanceMatrix, k: usize, seed: u64) -> Result<Clustering> {
    let n = dist.len();
    ensure!(
        k >= 2 && k < n,
        "cluster count must satisfy 2 <= k <= n - 1 (n = {n}), got {k}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids = vec![rng.gen_range(0..n)];
    while medoids.len() < k {
        let next = (0..n)
            .filter(|i| !medoids.contains(i))
            .map(|i| (i, medoids.iter().map(|&m| dist.get(i, m)).fold(f64::INFINITY, f64::min)))
            .fold(
                (usize::MAX, f64::NEG_INFINITY),
                |best, (i, d)| if d > best.1 { (i, d) } else { best },
            )
            .0;
        medoids.push(next);
    }

    let mut labels = assign(dist, &medoids).0;
    for _ in 0..MAX_ITERATIONS {
        for (c, m) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let mut best = (*m, members.iter().map(|&j| dist.get(*m, j)).sum::<f64>());
            for &cand in &members {
                let s: f64 = members.iter().map(|&j| dist.get(cand, j)).sum();
                if s < best.1 - 1e-12 {
                    best = (cand, s);
                }
            }
            *m = best.0;
        }
        let (next, _) = assign(dist, &medoids);
        let stable = next == labels;
        labels = next;
        if stable {
            let mut cost = total_cost(dist, &medoids);
            let mut best_swap = None;
            for c in 0..k {
                for cand in (0..n).filter(|i| !medoids.contains(i)) {
                    let mut trial = medoids.clone();
                    trial[c] = cand;
                    let t = total_cost(dist, &trial);
                    if t < cost - 1e-12 {
                        cost = t;
                        best_swap = Some((c, cand));
                    }
                }
            }
            match best_swap {
                Some((c, cand)) => {
                    medoids[c] = cand;
                    labels = assign(dist, &medoids).0;
                }
                None => break,
            }
        }
    }

    if binomial(n, k) <= EXACT_SEARCH_LIMIT {
        let mut cost = total_cost(dist, &medoids);
        let mut comb: Vec<usize> = (0..k).collect();
        loop {
            let t = total_cost(dist, &comb);
            if t < cost - 1e-12 {
                cost = t;
                medoids.clone_from(&comb);
            }
            if !next_combination(&mut comb, n) {
                break;
            }
        }
        labels = assign(dist, &medoids).0;
    }

    // Renumber clusters by first appearance so equal partitions compare equal.
    let mut order = Vec::with_capacity(k);
    for &l in &labels {
        if !order.contains(&l) {
            order.push(l);
        }
    }
    let remap = |l: usize| order.iter().position(|&o| o == l).expect("label seen");
    let cost = total_cost(dist, &medoids);
    Ok(Clustering {
        labels: labels.iter().map(|&l| remap(l)).collect(),
        medoids: order.iter().map(|&o| medoids[o]).collect(),
        cost,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k_star: usize,
    pub labels: Vec<usize>,
    pub silhouette_by_k: BTreeMap<usize, f64>,
    pub medoid_ids: Vec<String>,
    pub sizes: Vec<usize>,
    pub target_size: usize,
    pub deficits: Vec<usize>,
    /// Set when every pairwise distance is zero; nothing is synthesized then.
    pub degenerate: bool,
}

impl ClusterModel {
    pub fn synthetic_count(&self) -> usize {
        self.deficits.iter().sum()
    }
}

/// Largest `k` tried for `n` samples when the caller gives none.
pub fn default_k_max(n: usize) -> usize {
    10.min(n.saturating_sub(1))
}

/// Score `k = 2..=min(k_max, n-1)` and keep the best (smallest `k` on ties).
///
/// Returns `Ok(None)` for fewer than 4 samples, where balancing is skipped.
pub fn select_k(dist: &DistanceMatrix, k_max: usize, seed: u64) -> Result<Option<ClusterModel>> {
    ensure!(k_max >= 2, "k_max must be at least 2, got {k_max}");
    let n = dist.len();
    if n < 4 {
        return Ok(None);
    }
    let all_zero = (0..n).all(|i| dist.row(i).iter().all(|&d| d == 0.0));
    let mut scores = BTreeMap::new();
    let mut best: Option<(f64, Clustering)> = None;
    for k in 2..=k_max.min(n - 1) {
        let c = cluster_medoids(dist, k, seed)?;
        let s = silhouette_score(dist, &c.labels)?;
        scores.insert(k, s);
        if best.as_ref().map_or(true, |(bs, _)| s > *bs) {
            best = Some((s, c));
        }
    }
    let (_, clustering) = best.expect("at least k = 2 is scored");
    let k_star = clustering.medoids.len();
    let mut sizes = vec![0; k_star];
    for &l in &clustering.labels {
        sizes[l] += 1;
    }
    let target_size = *sizes.iter().max().expect("k_star >= 2");
    let deficits = if all_zero {
        vec![0; k_star]
    } else {
        sizes.iter().map(|s| target_size - s).collect()
    };
    Ok(Some(ClusterModel {
        k_star,
        labels: clustering.labels,
        silhouette_by_k: scores,
        medoid_ids: clustering.medoids.iter().map(|&m| dist.sample_ids[m].clone()).collect(),
        sizes,
        target_size,
        deficits,
        degenerate: all_zero,
    }))
}

/// Magnitude ranges of the photometric variant pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub color_gain: [f64; 2],
    pub color_offset: [f64; 2],
    pub sharpen_amount: [f64; 2],
    pub sharpen_window: usize,
    pub contrast: [f64; 2],
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            color_gain: [0.9, 1.1],
            color_offset: [-0.05, 0.05],
            sharpen_amount: [0.5, 1.5],
            sharpen_window: 5,
            contrast: [0.8, 1.2],
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

fn photometric_variant(sample: &FundusSample, rng: &mut ChaCha8Rng, cfg: &SynthesisConfig, id: String) -> FundusSample {
    let (h, w) = (sample.height(), sample.width());
    let mut img = sample.image.clone();
    for c in 0..3 {
        let gain = draw(rng, cfg.color_gain);
        let offset = draw(rng, cfg.color_offset);
        for v in img.channel_mut(c) {
            *v = (*v as f64 * gain + offset) as f32;
        }
    }
    let amount = draw(rng, cfg.sharpen_amount);
    for c in 0..3 {
        let field = GrayField::from_fn(h, w, |y, x| img.get(c, y, x) as f64);
        let blurred = box_mean(&field, cfg.sharpen_window);
        for (v, (p, b)) in img
            .channel_mut(c)
            .iter_mut()
            .zip(field.pixels().iter().zip(blurred.pixels()))
        {
            *v = (p + amount * (p - b)) as f32;
        }
    }
    let factor = draw(rng, cfg.contrast);
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.data().len().max(1) as f64;
    for v in img.data_mut() {
        *v = ((mean + factor * (*v as f64 - mean)).clamp(0.0, 1.0)) as f32;
    }
    FundusSample {
        id,
        image: img,
        vessel_mask: sample.vessel_mask.clone(),
        fov_mask: sample.fov_mask.clone(),
        source_dataset: sample.source_dataset.clone(),
        synthetic: true,
    }
}

/// Color shift, unsharp sharpening and contrast change; masks are copied.
pub fn synthesize_variant(sample: &FundusSample, seed: u64) -> FundusSample {
    synthesize_variant_with(sample, seed, &SynthesisConfig::default())
}

pub fn synthesize_variant_with(sample: &FundusSample, seed: u64, cfg: &SynthesisConfig) -> FundusSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    photometric_variant(sample, &mut rng, cfg, format!("{}-syn{seed}", sample.id))
}

pub struct Balanced {
    pub samples: Vec<FundusSample>,
    /// `None` when balancing was skipped for lack of samples.
    pub model: Option<ClusterModel>,
}

/// Cluster by vessel mask and top every cluster up to the largest one.
///
/// Masks of differing sizes are resampled (nearest neighbor) to the first
/// sample's size for the distance computation only.
pub fn balance_dataset(
    samples: &[FundusSample],
    k_max: Option<usize>,
    seed: u64,
    cfg: &SynthesisConfig,
) -> Result<Balanced> {
    let n = samples.len();
    if n < 4 {
        info!("balancing skipped: {n} samples (need at least 4)");
        return Ok(Balanced {
            samples: samples.to_vec(),
            model: None,
        });
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    let resized: Vec<BinaryMask> = samples
        .iter()
        .filter(|s| (s.height(), s.width()) != (h, w))
        .map(|s| resize_mask(&s.vessel_mask, h, w))
        .collect();
    let mut extra = resized.iter();
    let masks: Vec<&BinaryMask> = samples
        .iter()
        .map(|s| {
            if (s.height(), s.width()) == (h, w) {
                &s.vessel_mask
            } else {
                extra.next().expect("one resized mask per mismatched sample")
            }
        })
        .collect();
    let dist = pairwise_distance(&masks, samples.iter().map(|s| s.id.clone()).collect())?;
    let model =
        select_k(&dist, k_max.unwrap_or_else(|| default_k_max(n)), seed)?.expect("n >= 4 always yields a model");

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5a17);
    let mut out = samples.to_vec();
    for (c, &deficit) in model.deficits.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| model.labels[i] == c).collect();
        for j in 0..deficit {
            let src = &samples[members[rng.gen_range(0..members.len())]];
            let item_seed: u64 = rng.gen();
            let mut item_rng = ChaCha8Rng::seed_from_u64(item_seed);
            let id = format!("{}-jesb{c}.{j}", src.id);
            out.push(photometric_variant(src, &mut item_rng, cfg, id));
        }
    }
    info!(
        "balanced {n} samples into {} clusters of size {} (+{} synthetic)",
        model.k_star,
        model.target_size,
        model.synthetic_count()
    );
    Ok(Balanced {
        samples: out,
        model: Some(model),
    })
}
