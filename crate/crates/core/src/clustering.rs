//! k-means over token query vectors: k-means++ seeding, full-batch Lloyd
//! steps with empty-cluster repair, and per-sample mini-batch updates with
//! per-center learning rate `1 / count`.
//!
//! Ties are always broken toward the lowest index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `n x dim` point set borrowed from a tensor or vector.
#[derive(Clone, Copy, Debug)]
pub struct Points<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::Contract(format!(
                "point buffer of length {} is not a non-empty multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Points { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    /// `clusters x dim`, row-major.
    pub centroids: Vec<f64>,
    pub dim: usize,
    /// Mini-batch update counters, one per centroid.
    pub counts: Vec<u64>,
    pub seed: u64,
    /// Set when seeding had to reuse points because `C > N` or the points
    /// had fewer distinct values than `C`.
    pub duplicated: bool,
}

impl ClusterState {
    pub fn from_centroids(centroids: Vec<f64>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(Error::Contract("centroid buffer must hold C >= 1 rows".into()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("centroids must be finite".into()));
        }
        let c = centroids.len() / dim;
        Ok(ClusterState {
            centroids,
            dim,
            counts: vec![0; c],
            seed,
            duplicated: false,
        })
    }

    pub fn clusters(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

/// Per-point cluster labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub clusters: usize,
}

impl Assignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.clusters];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], state: &ClusterState) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..state.clusters() {
        let d = squared_distance(point, state.centroid(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_dim(points: &Points<'_>, state: &ClusterState) -> Result<()> {
    if points.dim() != state.dim {
        return Err(Error::shape("cluster", &[points.len(), points.dim()], &[state.clusters(), state.dim]));
    }
    Ok(())
}

/// Nearest centroid by squared Euclidean distance.
pub fn assign(points: &Points<'_>, state: &ClusterState) -> Result<Assignment> {
    check_dim(points, state)?;
    Ok(Assignment {
        labels: (0..points.len()).map(|i| nearest(points.row(i), state).0).collect(),
        clusters: state.clusters(),
    })
}

/// Within-cluster sum of squares of `points` against `state` under
/// nearest-centroid assignment.
pub fn wcss(points: &Points<'_>, state: &ClusterState) -> Result<f64> {
    check_dim(points, state)?;
    Ok((0..points.len()).map(|i| nearest(points.row(i), state).1).sum())
}

/// k-means++ seeding driven by `seed`.
pub fn init_centroids(points: &Points<'_>, clusters: usize, seed: u64) -> Result<ClusterState> {
    if clusters == 0 {
        return Err(Error::Config("cluster count must be >= 1".into()));
    }
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    let mut duplicated = clusters > n;
    while chosen.len() < clusters {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Rounding can leave `target` past the last positive weight.
            if dist[pick] == 0.0 {
                pick = dist.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            duplicated = true;
            rng.random_range(0..n)
        };
        chosen.push(pick);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(pick)));
        }
    }
    let centroids = chosen.iter().flat_map(|&i| points.row(i).to_vec()).collect();
    let mut state = ClusterState::from_centroids(centroids, points.dim(), seed)?;
    state.duplicated = duplicated;
    Ok(state)
}

/// Nearest-centroid labels where every empty cluster steals the point
/// farthest from its centroid within the currently largest cluster.
pub fn assign_repaired(points: &Points<'_>, state: &ClusterState) -> Result<Assignment> {
    let mut a = assign(points, state)?;
    let c = state.clusters();
    for empty in 0..c {
        let sizes = a.sizes();
        if sizes[empty] > 0 {
            continue;
        }
        // Largest cluster, lowest index on ties.
        let (largest, &size) = sizes
            .iter()
            .enumerate()
            .fold((0, &0), |best, (i, s)| if *s > *best.1 { (i, s) } else { best });
        if size < 2 {
            continue;
        }
        let mut victim = None;
        let mut far = -1.0;
        for (i, &l) in a.labels.iter().enumerate() {
            if l == largest {
                let d = squared_distance(points.row(i), state.centroid(largest));
                if d > far {
                    far = d;
                    victim = Some(i);
                }
            }
        }
        if let Some(v) = victim {
            a.labels[v] = empty;
        }
    }
    Ok(a)
}

/// Mean of the members of each cluster; clusters left empty keep their
/// previous centroid.
pub fn centroid_means(points: &Points<'_>, a: &Assignment, previous: &ClusterState) -> Vec<f64> {
    let dim = points.dim();
    let mut sums = vec![0.0; a.clusters * dim];
    let sizes = a.sizes();
    for (i, &l) in a.labels.iter().enumerate() {
        for (s, p) in sums[l * dim..(l + 1) * dim].iter_mut().zip(points.row(i)) {
            *s += p;
        }
    }
    for c in 0..a.clusters {
        let row = &mut sums[c * dim..(c + 1) * dim];
        if sizes[c] == 0 {
            row.copy_from_slice(previous.centroid(c));
        } else {
            row.iter_mut().for_each(|v| *v /= sizes[c] as f64);
        }
    }
    sums
}

/// One full-batch Lloyd iteration: repaired assignment, then member means.
pub fn lloyd_step(points: &Points<'_>, state: &ClusterState) -> Result<ClusterState> {
    let a = assign_repaired(points, state)?;
    Ok(ClusterState {
        centroids: centroid_means(points, &a, state),
        dim: state.dim,
        counts: state.counts.clone(),
        seed: state.seed,
        duplicated: state.duplicated,
    })
}

/// Seed with k-means++ and run `iters` Lloyd steps; returns the final state
/// and its repaired assignment.
pub fn lloyd(points: &Points<'_>, clusters: usize, iters: usize, seed: u64) -> Result<(ClusterState, Assignment)> {
    let mut state = init_centroids(points, clusters, seed)?;
    for _ in 0..iters {
        state = lloyd_step(points, &state)?;
    }
    let a = assign_repaired(points, &state)?;
    Ok((state, a))
}

/// Sequential per-sample update: `count_c += 1`, `m_c += (x - m_c) / count_c`.
pub fn minibatch_step(points: &Points<'_>, state: &ClusterState) -> Result<ClusterState> {
    check_dim(points, state)?;
    let mut next = state.clone();
    for i in 0..points.len() {
        let x = points.row(i);
        let (c, _) = nearest(x, &next);
        next.counts[c] += 1;
        let eta = 1.0 / next.counts[c] as f64;
        let dim = next.dim;
        for (m, v) in next.centroids[c * dim..(c + 1) * dim].iter_mut().zip(x) {
            *m += eta * (v - *m);
        }
    }
    Ok(next)
}
