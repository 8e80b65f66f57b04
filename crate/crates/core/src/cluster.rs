//! Clustering primitives shared by level grouping and item grouping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Relabels clusters so label order follows each cluster's smallest member.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

pub fn cluster_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Mean silhouette coefficient; members of singleton clusters score 0.
/// `None` unless there are at least two clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let k = cluster_count(labels);
    if k < 2 || points.len() < 2 {
        return None;
    }
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += sq_dist(&points[i], &points[j]).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Some(total / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeansFit {
    let n = points.len();
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    for _ in 0..200 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if labels[i] != best.0 {
                labels[i] = best.0;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[labels[a]])
                            .total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centers[c] = points[far].clone();
                labels[far] = c;
                changed = true;
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    KMeansFit {
        labels: canonical_labels(&labels),
        inertia,
    }
}

/// Lloyd's k-means with k-means++ seeding; the best of `restarts` runs by
/// inertia (earliest run on ties). Labels are canonical.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> KMeansFit {
    assert!(k >= 1 && k <= points.len(), "k must lie in 1..=n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let fit = kmeans_once(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    best.unwrap()
}

/// Agglomerative clustering with Ward linkage (Lance-Williams update on
/// squared Euclidean distances). Returns the merge sequence as pairs of
/// original point indices representing the merged clusters.
pub fn ward_merges(points: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = points.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(&points[i], &points[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active: Vec<bool> = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && dist[i][j] < best.2 {
                    best = (i, j, dist[i][j]);
                }
            }
        }
        let (a, b, dab) = best;
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let (na, nb, nk) = (size[a] as f64, size[b] as f64, size[k] as f64);
            let d = ((na + nk) * dist[a][k] + (nb + nk) * dist[b][k] - nk * dab) / (na + nb + nk);
            dist[a][k] = d;
            dist[k][a] = d;
        }
        size[a] += size[b];
        active[b] = false;
        merges.push((a, b));
    }
    merges
}

/// Canonical labels after replaying merges until `k` clusters remain.
pub fn cut_merges(n: usize, merges: &[(usize, usize)], k: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in merges.iter().take(n.saturating_sub(k)) {
        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
        parent[rb] = ra;
    }
    let roots: Vec<usize> = (0..n).map(|i| root(&mut parent, i)).collect();
    canonical_labels(&roots)
}

/// Picks the cluster count in `2..=max_k` with the highest silhouette (lowest
/// count on ties); `max_k <= 1` or fewer than two points yields one cluster.
pub fn select_by_silhouette(
    points: &[Vec<f64>],
    max_k: usize,
    mut fit: impl FnMut(usize) -> Vec<usize>,
) -> Vec<usize> {
    let n = points.len();
    let upper = max_k.min(n);
    if upper < 2 {
        return vec![0; n];
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for k in 2..=upper {
        let labels = fit(k);
        let Some(score) = silhouette(points, &labels) else { continue };
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, labels));
        }
    }
    best.map(|(_, l)| l).unwrap_or_else(|| vec![0; n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    /// Exhaustive optimal 2-partition by within-cluster sum of squares.
    fn brute_two_means(points: &[Vec<f64>]) -> Vec<usize> {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for c in 0..2 {
                let members: Vec<&Vec<f64>> =
                    points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                let mean = members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|p| (p[0] - mean).powi(2)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, canonical_labels(&labels));
            }
        }
        best.1
    }

    #[test]
    fn two_means_matches_brute_force() {
        let p = pts(&[0.0, 0.1, 5.0, 5.1]);
        let expected = brute_two_means(&p);
        assert_eq!(expected, vec![0, 0, 1, 1]);
        assert_eq!(kmeans(&p, 2, 10, 1).labels, expected);
    }

    #[test]
    fn silhouette_hand_value() {
        // {0, 1} vs {10}: a(0)=1, b(0)=10 -> 0.9; a(1)=1, b(1)=9 -> 8/9; singleton 0
        let s = silhouette(&pts(&[0.0, 1.0, 10.0]), &[0, 0, 1]).unwrap();
        assert!((s - (0.9 + 8.0 / 9.0) / 3.0).abs() < 1e-12);
        assert_eq!(silhouette(&pts(&[0.0, 1.0]), &[0, 0]), None);
    }

    #[test]
    fn silhouette_prefers_planted_blobs() {
        let p = pts(&[0.0, 0.2, 0.1, 9.0, 9.1, 9.3]);
        let labels = select_by_silhouette(&p, 4, |k| kmeans(&p, k, 10, 3).labels);
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn ward_on_four_points() {
        let p = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.0, 5.2]];
        let merges = ward_merges(&p);
        assert_eq!(merges[0], (0, 1));
        assert_eq!(merges[1], (2, 3));
        assert_eq!(cut_merges(4, &merges, 2), vec![0, 0, 1, 1]);
        assert_eq!(cut_merges(4, &merges, 1), vec![0, 0, 0, 0]);
        assert_eq!(cut_merges(4, &merges, 4), vec![0, 1, 2, 3]);
    }
}
