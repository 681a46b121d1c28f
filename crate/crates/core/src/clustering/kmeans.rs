//! Deterministic Lloyd k-means with farthest-point seeding.

use rand::Rng;

use crate::rng;

const RESTARTS: u64 = 20;
const MAX_ITERS: usize = 300;
const MOVE_TOL: f64 = 1e-10;
const SEED: u64 = 0x6b6d_6561_6e73;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, lowest index on ties.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Runs `RESTARTS` seeded restarts and keeps the lowest objective (the
/// earliest restart on ties). Labels are renumbered by first appearance.
pub(crate) fn kmeans(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = points.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..RESTARTS {
        let first = rng::stream(SEED, &[restart]).random_range(0..n);
        let (objective, labels) = lloyd(points, k, first);
        if best.as_ref().is_none_or(|(b, _)| objective < *b) {
            best = Some((objective, labels));
        }
    }
    canonical_labels(&best.expect("at least one restart").1)
}

fn lloyd(points: &[Vec<f64>], k: usize, first: usize) -> (f64, Vec<usize>) {
    let n = points.len();
    let dim = points[0].len();
    let mut centers = vec![points[first].clone()];
    while centers.len() < k {
        let mut far = (0, -1.0);
        for (i, p) in points.iter().enumerate() {
            let d = nearest(p, &centers).1;
            if d > far.1 {
                far = (i, d);
            }
        }
        centers.push(points[far.0].clone());
    }

    let mut labels = vec![0; n];
    for _ in 0..MAX_ITERS {
        for (i, p) in points.iter().enumerate() {
            labels[i] = nearest(p, &centers).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        // Repair empty clusters with the point farthest from its center.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = (0, -1.0);
            for (i, p) in points.iter().enumerate() {
                if counts[labels[i]] <= 1 {
                    continue;
                }
                let d = sq_dist(p, &centers[labels[i]]);
                if d > far.1 {
                    far = (i, d);
                }
            }
            if far.1 < 0.0 {
                continue;
            }
            let (i, old) = (far.0, labels[far.0]);
            counts[old] -= 1;
            for (s, v) in sums[old].iter_mut().zip(&points[i]) {
                *s -= v;
            }
            labels[i] = c;
            counts[c] = 1;
            sums[c] = points[i].clone();
        }
        let mut moved = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            moved = moved.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if moved <= MOVE_TOL {
            break;
        }
    }
    let objective = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    (objective, labels)
}

/// Renames labels to `0, 1, …` in order of first appearance.
pub(crate) fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_obvious_groups() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![10.0, 10.0],
            vec![0.1, 0.0],
            vec![10.0, 10.1],
            vec![0.0, 0.1],
        ];
        assert_eq!(kmeans(&pts, 2), vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let labels = kmeans(&pts, 6);
        assert_eq!(labels, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn canonicalization() {
        assert_eq!(canonical_labels(&[4, 4, 1, 0, 1]), vec![0, 0, 1, 2, 1]);
    }
}
