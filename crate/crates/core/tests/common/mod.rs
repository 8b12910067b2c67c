//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the library's algorithms.

#![allow(dead_code)]

use std::collections::BTreeMap;

use lacoat::attribution::DifferentiableScorer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Sorted members, sorted clusters.
pub fn canonical(mut clusters: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.sort();
    clusters
}

fn centroid(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let dim = points[0].len();
    let mut c = vec![0.0; dim];
    for &m in members {
        for (a, v) in c.iter_mut().zip(&points[m]) {
            *a += v;
        }
    }
    c.iter_mut().for_each(|a| *a /= members.len() as f64);
    c
}

/// Increase in total within-cluster sum of squares when `a` and `b` merge,
/// computed straight from the member points.
pub fn sse_increase(points: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
    let ca = centroid(points, a);
    let cb = centroid(points, b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    na * nb / (na + nb) * ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

pub fn total_sse(points: &[Vec<f64>], clusters: &[Vec<usize>]) -> f64 {
    clusters
        .iter()
        .map(|c| {
            let mu = centroid(points, c);
            c.iter()
                .map(|&m| points[m].iter().zip(&mu).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum::<f64>()
        })
        .sum()
}

/// Greedy Ward: every step scans all cluster pairs and merges the cheapest.
/// Clusters are kept ordered by smallest member and ties go to the first pair
/// in that order. Returns the flat partition at each requested K.
pub fn naive_ward(points: &[Vec<f64>], ks: &[usize]) -> BTreeMap<usize, Vec<Vec<usize>>> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let mut out = BTreeMap::new();
    loop {
        if ks.contains(&clusters.len()) {
            out.insert(clusters.len(), canonical(clusters.clone()));
        }
        if clusters.len() <= 1 {
            break;
        }
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = sse_increase(points, &clusters[i], &clusters[j]);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (_, i, j) = best;
        let b = clusters.remove(j);
        clusters[i].extend(b);
        clusters[i].sort_unstable();
        clusters.sort_by_key(|c| c[0]);
    }
    out
}

/// Gaussian blobs with random centers; `n` points in `dim` dimensions.
pub fn blob_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let blobs = rng.gen_range(2..=6);
    let centers: Vec<Vec<f64>> = (0..blobs)
        .map(|_| (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let c = &centers[rng.gen_range(0..blobs)];
            c.iter().map(|v| v + gaussian(rng)).collect()
        })
        .collect()
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept local so the oracle data does not depend on the library's sampler
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Integrated gradients by the midpoint rule with `steps` nodes and a zero baseline.
pub fn ig_midpoint<S: DifferentiableScorer>(scorer: &S, inputs: &[Vec<f64>], target: usize, steps: usize) -> Vec<f64> {
    let mut acc: Vec<Vec<f64>> = inputs.iter().map(|x| vec![0.0; x.len()]).collect();
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        let scaled: Vec<Vec<f64>> = inputs.iter().map(|x| x.iter().map(|v| v * alpha).collect()).collect();
        let g = scorer.gradient(&scaled, target).unwrap();
        for (a, gt) in acc.iter_mut().zip(&g) {
            for (ai, gi) in a.iter_mut().zip(gt) {
                *ai += gi;
            }
        }
    }
    acc.iter()
        .zip(inputs)
        .map(|(a, x)| a.iter().zip(x).map(|(ai, xi)| ai * xi / steps as f64).sum())
        .collect()
}

/// Smallest number of entries whose magnitudes reach `mass` of the total,
/// found by trying every subset.
pub fn brute_force_min_cover(scores: &[f64], mass: f64) -> usize {
    let total: f64 = scores.iter().map(|s| s.abs()).sum();
    let target = mass * total;
    let n = scores.len();
    let mut best = n;
    for subset in 1u32..(1 << n) {
        let size = subset.count_ones() as usize;
        if size >= best {
            continue;
        }
        let sum: f64 = (0..n).filter(|i| subset & (1 << i) != 0).map(|i| scores[i].abs()).sum();
        if sum >= target {
            best = size;
        }
    }
    best
}

/// Binary label annotation rule written with integer arithmetic: a class wins
/// when `count / size > 0.9`.
pub fn strict_ninety_label(labels: &[&str]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    for (l, c) in counts {
        if 10 * c > 9 * labels.len() {
            return l.to_string();
        }
    }
    "Mixed".into()
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot_dir(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
