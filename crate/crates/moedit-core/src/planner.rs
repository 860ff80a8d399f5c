//! Editing-order machinery: cosine similarity of instance embeddings,
//! within-batch / between-batch similarity statistics, seeded k-means
//! with k-means++ initialization, and the two plan builders (random
//! shuffle and cluster-per-batch).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("cosine similarity undefined for zero vector")]
    ZeroVector,
}

/// How a plan was produced; serialized next to the plan for replay.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PlanProvenance {
    Random { seed: u64 },
    Clustered { k: usize, seed: u64 },
    Given,
}

/// An editing order: batches of record indices. Every record appears in
/// exactly one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EditPlan {
    pub batches: Vec<Vec<usize>>,
    pub provenance: PlanProvenance,
}

impl EditPlan {
    pub fn n_records(&self) -> usize {
        self.batches.iter().map(|b| b.len()).sum()
    }
}

/// Per-batch within-batch similarity plus the between-batch value.
#[derive(Debug, Clone)]
pub struct SimilarityStats {
    pub wbs: Vec<f64>,
    pub wbs_mean: f64,
    pub bbs: f64,
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, PlanError> {
    if u.len() != v.len() {
        return Err(PlanError::Argument(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let mut uu = 0.0;
    let mut vv = 0.0;
    let mut uv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        uu += a * a;
        vv += b * b;
        uv += a * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(PlanError::ZeroVector);
    }
    Ok(uv / (crate::math::sqrt(uu) * crate::math::sqrt(vv)))
}

/// Mean pairwise cosine over a batch of instance vectors.
pub fn wbs(vectors: &[Vec<f64>]) -> Result<f64, PlanError> {
    let n = vectors.len();
    if n < 2 {
        return Err(PlanError::Argument(format!(
            "within-batch similarity needs at least 2 vectors, got {n}"
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += cosine(&vectors[i], &vectors[j])?;
        }
    }
    Ok(total * 2.0 / (n as f64 * (n - 1) as f64))
}

/// Mean pairwise cosine over per-batch mean vectors.
pub fn bbs(batch_means: &[Vec<f64>]) -> Result<f64, PlanError> {
    let s = batch_means.len();
    if s < 2 {
        return Err(PlanError::Argument(format!(
            "between-batch similarity needs at least 2 batches, got {s}"
        )));
    }
    let mut total = 0.0;
    for i in 0..s {
        for j in i + 1..s {
            total += cosine(&batch_means[i], &batch_means[j])?;
        }
    }
    Ok(total * 2.0 / (s as f64 * (s - 1) as f64))
}

fn mean_vector(vectors: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let d = vectors[members[0]].len();
    let mut m = vec![0.0; d];
    for &i in members {
        for (acc, &v) in m.iter_mut().zip(&vectors[i]) {
            *acc += v;
        }
    }
    for v in &mut m {
        *v /= members.len() as f64;
    }
    m
}

/// WBS per batch, their mean, and BBS for a plan over instance vectors.
pub fn similarity_stats(
    vectors: &[Vec<f64>],
    plan: &EditPlan,
) -> Result<SimilarityStats, PlanError> {
    let mut per_batch = Vec::with_capacity(plan.batches.len());
    let mut means = Vec::with_capacity(plan.batches.len());
    for batch in &plan.batches {
        let members: Vec<Vec<f64>> = batch.iter().map(|&i| vectors[i].clone()).collect();
        per_batch.push(wbs(&members)?);
        means.push(mean_vector(vectors, batch));
    }
    let wbs_mean = per_batch.iter().sum::<f64>() / per_batch.len() as f64;
    let bbs = bbs(&means)?;
    Ok(SimilarityStats {
        wbs: per_batch,
        wbs_mean,
        bbs,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration; non-increasing.
    pub inertia_history: Vec<f64>,
}

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_RESTARTS: usize = 8;

/// Seeded k-means: k-means++ initialization with several restarts (the
/// lowest-inertia run wins), Lloyd iterations to an assignment fixed
/// point (or 100 iterations), empty clusters repaired by stealing the
/// point farthest from its own centroid.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansResult, PlanError> {
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(PlanError::Argument(format!(
            "k = {k} out of range for {n} vectors"
        )));
    }
    let mut best: Option<KmeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let run = kmeans_once(vectors, k, seed.wrapping_add(restart as u64))?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn kmeans_once(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansResult, PlanError> {
    let n = vectors.len();
    let mut rng = Rng::new(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(vectors[rng.below(n)].clone());
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.next_f64() * total;
            let mut cum = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                cum += w;
                if cum >= r {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.push(vectors[pick].clone());
        for (i, v) in vectors.iter().enumerate() {
            let d = sq_dist(v, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut inertia_history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        // assignment step; ties go to the lowest cluster index
        let mut changed = false;
        for (i, v) in vectors.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(v, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(v, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }

        // empty-cluster repair: steal the point farthest from its centroid
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignment {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let mut worst = usize::MAX;
            let mut worst_d = -1.0;
            for (i, v) in vectors.iter().enumerate() {
                if counts[assignment[i]] <= 1 {
                    continue; // don't empty another cluster
                }
                let d = sq_dist(v, &centroids[assignment[i]]);
                if d > worst_d {
                    worst_d = d;
                    worst = i;
                }
            }
            assignment[worst] = empty;
            changed = true;
        }

        // update step
        let d = vectors[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, v) in vectors.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (acc, &x) in sums[assignment[i]].iter_mut().zip(v) {
                *acc += x;
            }
        }
        for c in 0..k {
            for v in &mut sums[c] {
                *v /= counts[c] as f64;
            }
        }
        centroids = sums;

        let inertia: f64 = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| sq_dist(v, &centroids[assignment[i]]))
            .sum();
        inertia_history.push(inertia);
        if !changed {
            break;
        }
    }

    let inertia = *inertia_history.last().unwrap();
    Ok(KmeansResult {
        assignment,
        centroids,
        inertia,
        inertia_history,
    })
}

/// Seeded uniform shuffle sliced into `s` batches of `n`.
pub fn plan_random(n_records: usize, s: usize, n: usize, seed: u64) -> Result<EditPlan, PlanError> {
    if s * n != n_records {
        return Err(PlanError::Argument(format!(
            "{s} batches of {n} != {n_records} records"
        )));
    }
    let mut order: Vec<usize> = (0..n_records).collect();
    Rng::new(seed).shuffle(&mut order);
    let batches = order.chunks(n).map(|c| c.to_vec()).collect();
    Ok(EditPlan {
        batches,
        provenance: PlanProvenance::Random { seed },
    })
}

/// Cluster-per-batch plan: k-means with k = s over the instance vectors,
/// clusters assigned to batches in descending size order, each batch
/// keeping its cluster's n closest-to-centroid members; overflow records
/// spill into the nearest-centroid batch that still has room.
pub fn plan_clustered(
    vectors: &[Vec<f64>],
    s: usize,
    n: usize,
    seed: u64,
) -> Result<EditPlan, PlanError> {
    if s * n != vectors.len() {
        return Err(PlanError::Argument(format!(
            "{s} batches of {n} != {} records",
            vectors.len()
        )));
    }
    let km = kmeans(vectors, s, seed)?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); s];
    for (i, &c) in km.assignment.iter().enumerate() {
        members[c].push(i);
    }
    let mut cluster_order: Vec<usize> = (0..s).collect();
    cluster_order.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(a.cmp(&b)));

    // batch b hosts cluster cluster_order[b]
    let mut batch_of_cluster = vec![0usize; s];
    for (b, &c) in cluster_order.iter().enumerate() {
        batch_of_cluster[c] = b;
    }

    let mut batches: Vec<Vec<usize>> = vec![Vec::new(); s];
    let mut spills: Vec<usize> = Vec::new();
    for c in 0..s {
        let b = batch_of_cluster[c];
        if members[c].len() <= n {
            batches[b].extend(&members[c]);
        } else {
            // keep the n closest to the centroid
            let mut by_dist = members[c].clone();
            by_dist.sort_by(|&x, &y| {
                let dx = sq_dist(&vectors[x], &km.centroids[c]);
                let dy = sq_dist(&vectors[y], &km.centroids[c]);
                dx.partial_cmp(&dy).unwrap().then(x.cmp(&y))
            });
            batches[b].extend(&by_dist[..n]);
            spills.extend(&by_dist[n..]);
        }
    }
    spills.sort_unstable();
    for &rec in &spills {
        let mut best_c = usize::MAX;
        let mut best_d = f64::INFINITY;
        for c in 0..s {
            if batches[batch_of_cluster[c]].len() >= n {
                continue;
            }
            let d = sq_dist(&vectors[rec], &km.centroids[c]);
            if d < best_d {
                best_d = d;
                best_c = c;
            }
        }
        batches[batch_of_cluster[best_c]].push(rec);
    }
    for b in &mut batches {
        b.sort_unstable();
    }
    Ok(EditPlan {
        batches,
        provenance: PlanProvenance::Clustered { k: s, seed },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn cosine_values() {
        assert!((cosine(&[2.0, 1.0], &[2.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-15);
        // (1,0) vs (1,1) -> 1/sqrt(2)
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.707_106_781_186_547_5).abs() < 1e-15);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(PlanError::ZeroVector)
        ));
    }

    #[test]
    fn wbs_values() {
        let same = vec![vec![1.0, 2.0]; 4];
        assert!((wbs(&same).unwrap() - 1.0).abs() < 1e-12);
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(wbs(&ortho).unwrap().abs() < 1e-15);
        // (1,0),(0,1),(1,1): pairs 0, 1/sqrt2, 1/sqrt2
        let three = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let want = (2.0 / core::f64::consts::SQRT_2) / 3.0;
        assert!((wbs(&three).unwrap() - want).abs() < 1e-15);
        assert!(wbs(&[vec![1.0]]).is_err());
    }

    #[test]
    fn bbs_values() {
        let same = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!((bbs(&same).unwrap() - 1.0).abs() < 1e-12);
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(bbs(&ortho).unwrap().abs() < 1e-15);
        // (1,0),(0,1),(-1,0) -> (0 + -1 + 0)/3
        let three = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        assert!((bbs(&three).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        assert!(bbs(&[vec![1.0]]).is_err());
    }

    #[test]
    fn kmeans_single_cluster_centroid_is_mean() {
        let vs = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![2.0, 4.0]];
        let km = kmeans(&vs, 1, 7).unwrap();
        assert_eq!(km.assignment, vec![0, 0, 0]);
        assert!((km.centroids[0][0] - 2.0).abs() < 1e-15);
        assert!((km.centroids[0][1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn kmeans_recovers_separable_clusters() {
        let vs = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 10.0],
            vec![10.0, 11.0],
        ];
        for seed in 0..10 {
            let km = kmeans(&vs, 2, seed).unwrap();
            assert_eq!(km.assignment[0], km.assignment[1]);
            assert_eq!(km.assignment[2], km.assignment[3]);
            assert_ne!(km.assignment[0], km.assignment[2]);
        }
    }

    #[test]
    fn kmeans_k_equals_n_gives_zero_inertia() {
        let vs = vec![vec![0.0], vec![1.0], vec![5.0]];
        let km = kmeans(&vs, 3, 3).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut seen: Vec<usize> = km.assignment.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn kmeans_inertia_is_non_increasing() {
        let mut rng = Rng::new(21);
        let vs: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..4).map(|_| rng.gauss()).collect())
            .collect();
        for seed in 0..5 {
            let km = kmeans(&vs, 5, seed).unwrap();
            for w in km.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "inertia rose: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let vs = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&vs, 3, 0).is_err());
        assert!(kmeans(&vs, 0, 0).is_err());
    }

    fn assert_partition(plan: &EditPlan, n_records: usize) {
        let mut seen = BTreeSet::new();
        for b in &plan.batches {
            for &r in b {
                assert!(seen.insert(r), "record {r} duplicated");
            }
        }
        assert_eq!(seen.len(), n_records);
    }

    #[test]
    fn plan_random_is_deterministic_and_partitions() {
        let a = plan_random(20, 4, 5, 99).unwrap();
        let b = plan_random(20, 4, 5, 99).unwrap();
        assert_eq!(a, b);
        assert_partition(&a, 20);
        assert_eq!(a.provenance, PlanProvenance::Random { seed: 99 });
        assert!(plan_random(20, 4, 4, 99).is_err());
    }

    #[test]
    fn plan_random_seeds_differ() {
        let mut distinct = 0;
        for seed in 0..10u64 {
            let a = plan_random(12, 3, 4, seed);
            let b = plan_random(12, 3, 4, seed + 1000);
            if a.unwrap() != b.unwrap() {
                distinct += 1;
            }
        }
        assert!(distinct >= 9, "only {distinct}/10 seed pairs differed");
    }

    fn two_topic_vectors(per_topic: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed);
        let mut vs = Vec::new();
        for t in 0..2 {
            let center = if t == 0 { [5.0, 0.0] } else { [0.0, 5.0] };
            for _ in 0..per_topic {
                vs.push(vec![
                    center[0] + rng.gauss() * 0.4,
                    center[1] + rng.gauss() * 0.4,
                ]);
            }
        }
        vs
    }

    #[test]
    fn plan_clustered_separable_groups_map_to_batches() {
        let vs = two_topic_vectors(5, 31);
        let plan = plan_clustered(&vs, 2, 5, 1).unwrap();
        assert_partition(&plan, 10);
        for b in &plan.batches {
            let topics: BTreeSet<usize> = b.iter().map(|&r| r / 5).collect();
            assert_eq!(topics.len(), 1, "batch mixes topics: {b:?}");
        }
    }

    #[test]
    fn plan_clustered_single_batch() {
        let vs = two_topic_vectors(3, 32);
        let plan = plan_clustered(&vs, 1, 6, 1).unwrap();
        assert_eq!(plan.batches.len(), 1);
        assert_partition(&plan, 6);
    }

    #[test]
    fn plan_clustered_handles_uneven_clusters() {
        // 3 batches of 4 over data with 2 natural clusters: spillover must
        // still produce exact batch sizes.
        let vs = two_topic_vectors(6, 33);
        let plan = plan_clustered(&vs, 3, 4, 5).unwrap();
        assert_partition(&plan, 12);
        for b in &plan.batches {
            assert_eq!(b.len(), 4);
        }
    }

    #[test]
    fn clustered_beats_random_on_within_batch_similarity() {
        // Shift the topic centers off the origin so cosines are informative.
        let vs = two_topic_vectors(10, 34);
        let mut wins = 0;
        for seed in 0..10u64 {
            let cp = plan_clustered(&vs, 2, 10, seed).unwrap();
            let rp = plan_random(20, 2, 10, seed).unwrap();
            let cs = similarity_stats(&vs, &cp).unwrap();
            let rs = similarity_stats(&vs, &rp).unwrap();
            if cs.wbs_mean > rs.wbs_mean && cs.bbs < rs.bbs {
                wins += 1;
            }
        }
        assert!(wins >= 8, "clustered plan won only {wins}/10 seeds");
    }
}
