//! Brute-force reference implementations shared by the test targets.

#![allow(dead_code)]

use comloc::geo::{haversine, GeoPoint};
use rand::Rng;

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Two-level map equation of an undirected graph, in nats, written from the
/// expanded textbook form.
pub fn map_length(n: usize, edges: &[(usize, usize)], labels: &[usize]) -> f64 {
    let two_m = 2.0 * edges.len() as f64;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut degree = vec![0.0; n];
    let mut exit = vec![0.0; k];
    for &(a, b) in edges {
        degree[a] += 1.0;
        degree[b] += 1.0;
        if labels[a] != labels[b] {
            exit[labels[a]] += 1.0 / two_m;
            exit[labels[b]] += 1.0 / two_m;
        }
    }
    let mut visit = vec![0.0; k];
    for v in 0..n {
        visit[labels[v]] += degree[v] / two_m;
    }
    let total_exit: f64 = exit.iter().sum();
    plogp(total_exit) - 2.0 * exit.iter().map(|&q| plogp(q)).sum::<f64>()
        - degree.iter().map(|&d| plogp(d / two_m)).sum::<f64>()
        + exit.iter().zip(&visit).map(|(&q, &p)| plogp(q + p)).sum::<f64>()
}

/// Every set partition of `0..n` as a restricted growth string.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, max: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for l in 0..=max + 1 {
            prefix.push(l);
            grow(prefix, n, max.max(l), out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return vec![Vec::new()];
    }
    grow(&mut vec![0], n, 0, &mut out);
    out
}

/// Minimum map equation length over all partitions.
pub fn exhaustive_min(n: usize, edges: &[(usize, usize)], partitions: &[Vec<usize>]) -> f64 {
    partitions
        .iter()
        .map(|p| map_length(n, edges, p))
        .fold(f64::INFINITY, f64::min)
}

/// Connected graph on `n` nodes: a random spanning tree plus extra edges
/// with probability `p`.
pub fn random_connected_graph(n: usize, p: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.gen_range(0..v), v));
    }
    for a in 0..n {
        for b in a + 1..n {
            if !edges.contains(&(a, b)) && rng.gen_bool(p) {
                edges.push((a, b));
            }
        }
    }
    edges.sort_unstable();
    edges
}

fn mean(points: &[GeoPoint], members: &[usize]) -> GeoPoint {
    let (mut lat, mut lon) = (0.0, 0.0);
    for &m in members {
        lat += points[m].lat;
        lon += points[m].lon;
    }
    let n = members.len() as f64;
    GeoPoint {
        lat: lat / n,
        lon: lon / n,
    }
}

/// Centroid-linkage clustering by full rescans: each round recomputes all
/// centroids and all pair distances.
pub fn naive_cluster(points: &[GeoPoint], cutoff_m: f64) -> (Vec<usize>, Vec<GeoPoint>) {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    loop {
        let centroids: Vec<GeoPoint> = clusters.iter().map(|c| mean(points, c)).collect();
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let d = haversine(centroids[a], centroids[b]);
                if d < cutoff_m && best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let taken = clusters.remove(b);
        clusters[a].extend(taken);
        clusters[a].sort_unstable();
    }
    let mut labels = vec![0; points.len()];
    for (l, c) in clusters.iter().enumerate() {
        for &m in c {
            labels[m] = l;
        }
    }
    let centroids = clusters.iter().map(|c| mean(points, c)).collect();
    (labels, centroids)
}

/// Points for clustering checks: a few blobs around random anchors, some
/// snapped to a lattice so that equal distances occur.
pub fn clustered_points(n: usize, rng: &mut impl Rng) -> Vec<GeoPoint> {
    let base = GeoPoint {
        lat: 40.7 + rng.gen_range(-0.05..0.05),
        lon: -73.95 + rng.gen_range(-0.05..0.05),
    };
    let anchors: Vec<(f64, f64)> = (0..rng.gen_range(1..=5))
        .map(|_| (rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)))
        .collect();
    let lattice = rng.gen_bool(0.3);
    (0..n)
        .map(|_| {
            let (alat, alon) = anchors[rng.gen_range(0..anchors.len())];
            let (mut dlat, mut dlon): (f64, f64) = (rng.gen_range(-0.004..0.004), rng.gen_range(-0.004..0.004));
            if lattice {
                dlat = (dlat / 0.0025).round() * 0.0025;
                dlon = (dlon / 0.0025).round() * 0.0025;
            }
            GeoPoint {
                lat: base.lat + alat + dlat,
                lon: base.lon + alon + dlon,
            }
        })
        .collect()
}

/// AUC by enumerating every positive/negative pair.
pub fn pairwise_auc(scores: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Random scores in `[0, 1)`, coarsened for some sets so ties occur.
pub fn random_scores(rng: &mut impl Rng) -> Vec<(f64, bool)> {
    let n = rng.gen_range(2..=200);
    let levels = [0.0, 4.0, 20.0, 1000.0][rng.gen_range(0..4)];
    let mut s: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let x: f64 = rng.gen();
            let x = if levels > 0.0 { (x * levels).floor() / levels } else { x };
            (x, rng.gen_bool(0.5))
        })
        .collect();
    s[0].1 = true;
    s[1].1 = false;
    s
}

/// Features uniform in a box, labels drawn from a random logistic model.
pub fn logistic_dataset(rng: &mut impl Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
    let truth: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let ys = xs
        .iter()
        .map(|x| {
            let z: f64 = x.iter().zip(&truth).map(|(a, w)| a * w).sum();
            rng.gen_bool(1.0 / (1.0 + (-z).exp()))
        })
        .collect();
    (xs, ys)
}
