use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 11;
pub const DEFAULT_MAX_ITERS: usize = 100;
/// Seeded k-means++ restarts; the lowest final inertia wins.
pub const RESTARTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCenters {
    pub centers: Vec<Vec<f64>>,
    /// Lloyd iterations of the winning restart.
    pub iterations: usize,
    pub inertia: f64,
    /// Set when fewer distinct points than the requested `k` were given.
    pub requested_k: Option<usize>,
}

impl ClusterCenters {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, |c| c.len())
    }
}

/// One Lloyd run from fixed initial centres.
#[derive(Clone, Debug, PartialEq)]
pub struct LloydRun {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Inertia after every iteration's centre update.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centre; ties go to the lower index.
pub fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn inertia(points: &[Vec<f64>], centers: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, a)| sq_dist(p, &centers[*a]))
        .sum()
}

fn distinct_count(points: &[Vec<f64>], limit: usize) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
            if seen.len() == limit {
                break;
            }
        }
    }
    seen.len()
}

/// k-means++ seeding: the first centre uniformly, then each next centre with
/// probability proportional to its squared distance from the chosen ones.
pub fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut pick = d2.iter().rposition(|d| *d > 0.0).unwrap_or(0);
        let mut u = rng.random::<f64>() * total;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && u < *d {
                pick = i;
                break;
            }
            u -= d;
        }
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd iterations until the assignment stops changing or `max_iters`.
/// A cluster left empty moves to the point farthest from its own centre.
pub fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iters: usize) -> LloydRun {
    let dim = points[0].len();
    let k = centers.len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    let mut history = Vec::new();
    let mut converged = false;
    for it in 0..max_iters {
        if it > 0 {
            let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
            if next == assignment {
                converged = true;
                break;
            }
            assignment = next;
        }
        let mut counts = vec![0usize; k];
        for a in &assignment {
            counts[*a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far = (usize::MAX, -1.0);
            for (i, (p, a)) in points.iter().zip(&assignment).enumerate() {
                let d = sq_dist(p, &centers[*a]);
                if counts[*a] > 1 && d > far.1 {
                    far = (i, d);
                }
            }
            if far.0 == usize::MAX {
                break;
            }
            counts[assignment[far.0]] -= 1;
            assignment[far.0] = j;
            counts[j] = 1;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, a) in points.iter().zip(&assignment) {
            for (s, v) in sums[*a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        history.push(inertia(points, &centers, &assignment));
    }
    if !converged && max_iters > 0 {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        converged = next == assignment;
    }
    LloydRun {
        centers,
        assignment,
        inertia_history: history,
        converged,
    }
}

/// Single-point moves after Lloyd: a point changes cluster whenever that
/// lowers the total inertia, accounting for both centres shifting. Stops when
/// no move helps; centres are then the exact means of the final assignment.
pub fn hartigan(
    points: &[Vec<f64>],
    centers: Vec<Vec<f64>>,
    mut assignment: Vec<usize>,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let k = centers.len();
    let dim = points[0].len();
    let means = |assignment: &[usize]| {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, a) in points.iter().zip(assignment) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let centers: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&centers)
            .zip(&counts)
            .map(|((s, c), n)| {
                if *n == 0 {
                    c.clone()
                } else {
                    s.iter().map(|v| v / *n as f64).collect()
                }
            })
            .collect();
        (centers, counts)
    };
    let (mut centers, mut counts) = means(&assignment);
    for _ in 0..DEFAULT_MAX_ITERS {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = assignment[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * sq_dist(p, &centers[a]);
            let mut best = (a, remove);
            for b in (0..k).filter(|b| *b != a) {
                let nb = counts[b] as f64;
                let add = nb / (nb + 1.0) * sq_dist(p, &centers[b]);
                if add < best.1 {
                    best = (b, add);
                }
            }
            let b = best.0;
            if b != a && remove - best.1 > 1e-12 * (1.0 + remove) {
                let nb = counts[b] as f64;
                for d in 0..dim {
                    centers[a][d] = (na * centers[a][d] - p[d]) / (na - 1.0);
                    centers[b][d] = (nb * centers[b][d] + p[d]) / (nb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                assignment[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        let fresh = means(&assignment);
        centers = fresh.0;
        counts = fresh.1;
    }
    (means(&assignment).0, assignment)
}

/// Seeded k-means with [`RESTARTS`] k-means++ initializations, each run
/// through Lloyd and then [`hartigan`]. `k` shrinks to
/// the number of distinct points when there are fewer, and the result
/// records the requested value.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterCenters> {
    if points.is_empty() {
        return Err(Error::domain("k-means needs at least one point"));
    }
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::domain(
            "k-means points must share a non-zero dimension",
        ));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("k-means points must be finite"));
    }
    let distinct = distinct_count(points, k);
    let (k_eff, requested_k) = if distinct < k {
        log::warn!("k reduced from {k} to {distinct}: not enough distinct points");
        (distinct, Some(k))
    } else {
        (k, None)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, LloydRun)> = None;
    for _ in 0..RESTARTS {
        let init = kmeans_plus_plus(points, k_eff, &mut rng);
        let mut run = lloyd(points, init, max_iters.max(1));
        (run.centers, run.assignment) = hartigan(points, run.centers, run.assignment);
        let e = inertia(points, &run.centers, &run.assignment);
        if best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, run));
        }
    }
    let (e, run) = best.expect("at least one restart");
    Ok(ClusterCenters {
        iterations: run.inertia_history.len(),
        centers: run.centers,
        inertia: e,
        requested_k,
    })
}
