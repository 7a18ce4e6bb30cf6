//! Lloyd's k-means with k-means++ seeding and restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use units_core::error::{param_err, Result};
use units_core::tensor::Matrix;

pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    /// `C x K` centroids.
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest row of `centroids`; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &Matrix) -> usize {
    let mut best = (f64::INFINITY, 0);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

fn plus_plus_init(z: &Matrix, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = z.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), z.row(chosen[0]))).collect();
    while chosen.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(z.row(i), z.row(next)));
        }
    }
    Matrix::from_rows(&chosen.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>())
}

fn lloyd(z: &Matrix, mut centroids: Matrix, max_iters: usize) -> KMeansFit {
    let (n, k) = z.shape();
    let c = centroids.rows();
    let mut assignments: Vec<usize> = (0..n).map(|i| nearest(z.row(i), &centroids)).collect();
    for _ in 0..max_iters {
        let mut sums = Matrix::zeros(c, k);
        let mut counts = vec![0usize; c];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        for j in 0..c {
            if counts[j] > 0 {
                for (dst, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *dst = s / counts[j] as f64;
                }
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(z.row(i), &centroids)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let inertia = (0..n).map(|i| sq_dist(z.row(i), centroids.row(assignments[i]))).sum();
    KMeansFit {
        centroids,
        assignments,
        inertia,
    }
}

/// Best of `restarts` k-means++ runs (lowest inertia, earliest on ties).
pub fn kmeans(z: &Matrix, c: usize, restarts: usize, max_iters: usize, seed: u64) -> Result<KMeansFit> {
    let n = z.rows();
    if c == 0 {
        return Err(param_err("cluster count must be >= 1"));
    }
    if c > n {
        return Err(param_err(format!("cluster count {c} exceeds sample count {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let init = plus_plus_init(z, c, &mut rng);
        let fit = lloyd(z, init, max_iters);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `Σ_i ‖z_i - c_{a(i)}‖₂` for given centroids and assignments.
pub fn penalty(z: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(z.row(i), centroids.row(a)).sqrt())
        .sum()
}
