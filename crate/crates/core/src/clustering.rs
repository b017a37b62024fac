//! K-means over CoT embeddings, representative selection and cluster
//! masses `|T_k| / A`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::model::{ChainOfThought, EmbeddingVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("k = {k} exceeds the number of points ({points})")]
    KTooLarge { k: usize, points: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("points have mixed dimensions ({expected} vs {found})")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("CoT {sample_index} has no embedding")]
    MissingEmbedding { sample_index: usize },
    #[error("cluster sizes sum to {found}, expected {expected}")]
    CountMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tolerance: f64,
    /// Independent k-means++ starts; the lowest-SSE run is kept.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tolerance: 1e-8,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster id per point. Ids are numbered by first appearance, so
    /// cluster 0 always contains point 0.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
    /// SSE after each Lloyd iteration of the kept run.
    pub sse_history: Vec<f64>,
    /// Set when every point coincided and k was reduced to 1.
    pub degenerate: bool,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, sq_dist(point, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Within-cluster sum of squared distances to the cluster means.
pub fn sse_of(points: &[&[f64]], assignments: &[usize], k: usize) -> f64 {
    let centroids = means(points, assignments, k);
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn means(points: &[&[f64]], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
    }
    for (sum, n) in sums.iter_mut().zip(counts) {
        if n > 0 {
            sum.iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    sums
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|w| {
                    acc += w;
                    acc > target
                })
                .unwrap_or_else(|| d2.iter().rposition(|w| *w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

/// Moves the point farthest from its centroid (taken from a cluster with
/// more than one member) into each empty cluster.
fn repair_empty(points: &[&[f64]], assignments: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .map(|i| (i, sq_dist(points[i], &centroids[assignments[i]])))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
            .map(|(i, _)| i)
            .expect("k <= number of points leaves a donor");
        assignments[donor] = empty;
        centroids[empty] = points[donor].to_vec();
    }
}

struct LloydRun {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    sse_history: Vec<f64>,
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, params: &KMeansParams) -> LloydRun {
    let k = centroids.len();
    let mut assignments = vec![0; points.len()];
    let mut sse_history = Vec::new();
    for _ in 0..params.max_iters.max(1) {
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
        repair_empty(points, &mut assignments, &mut centroids);
        let updated = means(points, &assignments, k);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        sse_history.push(
            points
                .iter()
                .zip(&assignments)
                .map(|(p, &a)| sq_dist(p, &centroids[a]))
                .sum(),
        );
        if shift < params.tolerance {
            break;
        }
    }
    LloydRun {
        assignments,
        centroids,
        sse_history,
    }
}

fn relabel_by_first_appearance(run: LloydRun) -> (Vec<usize>, Vec<Vec<f64>>) {
    let k = run.centroids.len();
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &a in &run.assignments {
        if map[a] == usize::MAX {
            map[a] = next;
            next += 1;
        }
    }
    let assignments = run.assignments.iter().map(|&a| map[a]).collect();
    let mut centroids = vec![Vec::new(); k];
    for (old, c) in run.centroids.into_iter().enumerate() {
        centroids[map[old]] = c;
    }
    (assignments, centroids)
}

pub fn kmeans(points: &[EmbeddingVector], k: usize, seed: u64) -> Result<KMeansResult, ClusterError> {
    kmeans_with(points, k, seed, &KMeansParams::default())
}

/// Lloyd's algorithm with k-means++ seeding from `seed`.
pub fn kmeans_with(
    points: &[EmbeddingVector],
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<KMeansResult, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > points.len() {
        return Err(ClusterError::KTooLarge {
            k,
            points: points.len(),
        });
    }
    let dim = points[0].dim();
    if let Some(bad) = points.iter().find(|p| p.dim() != dim) {
        return Err(ClusterError::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    let views: Vec<&[f64]> = points.iter().map(|p| p.values()).collect();

    let degenerate = k > 1 && views.iter().all(|p| *p == views[0]);
    let k = if degenerate {
        warn!(k, "all embeddings coincide; using a single cluster");
        1
    } else {
        k
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, LloydRun)> = None;
    for _ in 0..params.restarts.max(1) {
        let run = lloyd(&views, plus_plus_init(&views, k, &mut rng), params);
        let sse = *run.sse_history.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, run));
        }
    }
    let (sse, run) = best.expect("at least one restart");
    let sse_history = run.sse_history.clone();
    let (assignments, centroids) = relabel_by_first_appearance(run);
    Ok(KMeansResult {
        assignments,
        centroids,
        sse,
        sse_history,
        degenerate,
    })
}

/// A group of CoTs sharing a reasoning mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub members: Vec<ChainOfThought>,
    /// Mean of member embeddings, not re-normalized.
    pub centroid: EmbeddingVector,
    pub representative: ChainOfThought,
    pub mass: f64,
}

/// Member nearest `centroid`; ties go to the lowest sample index.
pub fn select_representative<'a>(
    members: &'a [ChainOfThought],
    centroid: &EmbeddingVector,
) -> Result<&'a ChainOfThought, ClusterError> {
    let mut best: Option<(&ChainOfThought, f64)> = None;
    for cot in members {
        let embedding = cot.embedding.as_ref().ok_or(ClusterError::MissingEmbedding {
            sample_index: cot.sample_index,
        })?;
        let d = embedding.squared_distance(centroid);
        best = match best {
            Some((b, bd)) if bd < d || (bd == d && b.sample_index < cot.sample_index) => Some((b, bd)),
            _ => Some((cot, d)),
        };
    }
    Ok(best.expect("clusters are non-empty").0)
}

/// `|T_k| / A` for each cluster, in order.
pub fn cluster_mass_distribution(sizes: &[usize], a_total: usize) -> Result<Vec<f64>, ClusterError> {
    let found: usize = sizes.iter().sum();
    if found != a_total || a_total == 0 {
        return Err(ClusterError::CountMismatch {
            expected: a_total,
            found,
        });
    }
    Ok(sizes.iter().map(|&s| s as f64 / a_total as f64).collect())
}

/// Embeds-already CoTs into `k` clusters with masses and representatives.
pub fn cluster_cots(
    cots: &[ChainOfThought],
    k: usize,
    seed: u64,
) -> Result<(Vec<Cluster>, KMeansResult), ClusterError> {
    let embeddings: Vec<EmbeddingVector> = cots
        .iter()
        .map(|c| {
            c.embedding.clone().ok_or(ClusterError::MissingEmbedding {
                sample_index: c.sample_index,
            })
        })
        .collect::<Result<_, _>>()?;
    let result = kmeans(&embeddings, k, seed)?;
    let mut groups: Vec<Vec<ChainOfThought>> = vec![Vec::new(); result.k()];
    for (cot, &a) in cots.iter().zip(&result.assignments) {
        groups[a].push(cot.clone());
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let masses = cluster_mass_distribution(&sizes, cots.len())?;
    let clusters = groups
        .into_iter()
        .zip(masses)
        .zip(&result.centroids)
        .map(|((members, mass), centroid)| {
            let centroid = EmbeddingVector::new(centroid.clone()).expect("mean of finite vectors");
            let representative = select_representative(&members, &centroid)?.clone();
            Ok(Cluster {
                members,
                centroid,
                representative,
                mass,
            })
        })
        .collect::<Result<Vec<_>, ClusterError>>()?;
    Ok((clusters, result))
}
