//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkit::mat::{sq_dist, Mat};

pub const MAX_LLOYD_ITERS: usize = 50;

#[derive(Clone, Debug)]
pub struct Clustering {
    pub centers: Mat,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after seeding and after each Lloyd step.
    pub wcss: Vec<f64>,
}

/// `M` centers for the rows of `points`, deterministic for a given seed.
pub fn kmeans(points: &Mat, m: usize, seed: u64) -> Result<Mat> {
    Ok(kmeans_detailed(points, m, seed)?.centers)
}

pub fn kmeans_detailed(points: &Mat, m: usize, seed: u64) -> Result<Clustering> {
    let n = points.rows();
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput("kmeans needs at least one point and one center"));
    }
    if m > n {
        return Err(Error::Config(format!("kmeans: {m} centers requested for {n} points")));
    }
    if !points.is_finite() {
        return Err(Error::Domain("kmeans: non-finite point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_plus_plus(points, m, &mut rng);
    let mut assignments = assign(points, &centers);
    let mut wcss = vec![objective(points, &centers, &assignments)];
    for _ in 0..MAX_LLOYD_ITERS {
        update_centers(points, &mut centers, &assignments);
        let next = assign(points, &centers);
        wcss.push(objective(points, &centers, &next));
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }
    Ok(Clustering {
        centers,
        assignments,
        wcss,
    })
}

fn seed_plus_plus(points: &Mat, m: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            // guard against rounding landing on an already-chosen point
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // every point coincides with a chosen center: take unused indices
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn assign(points: &Mat, centers: &Mat) -> Vec<usize> {
    (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..centers.rows() {
                let d = sq_dist(p, centers.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

fn update_centers(points: &Mat, centers: &mut Mat, assignments: &[usize]) {
    let (m, d) = centers.shape();
    let mut sums = Mat::zeros(m, d);
    let mut counts = vec![0usize; m];
    for (i, &c) in assignments.iter().enumerate() {
        counts[c] += 1;
        for (s, x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        // empty clusters keep their previous center
        if count > 0 {
            for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / count as f64;
            }
        }
    }
}

fn objective(points: &Mat, centers: &Mat, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(points.row(i), centers.row(c)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_center_is_the_mean() {
        let pts = Mat::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]]).unwrap();
        let c = kmeans(&pts, 1, 3).unwrap();
        assert!((c[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((c[(0, 1)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn as_many_centers_as_points_reproduces_points() {
        let pts = Mat::from_fn(6, 2, |i, j| (i * i) as f64 + 0.5 * j as f64);
        let c = kmeans(&pts, 6, 11).unwrap();
        let mut got: Vec<Vec<f64>> = (0..6).map(|i| c.row(i).to_vec()).collect();
        let mut want: Vec<Vec<f64>> = (0..6).map(|i| pts.row(i).to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn separated_blobs_are_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let means = [[-5.0, 2.0], [4.0, -3.0]];
        let mut rows = Vec::new();
        for m in means {
            for _ in 0..200 {
                rows.push(vec![m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]);
            }
        }
        let pts = Mat::from_rows(&rows).unwrap();
        let c = kmeans(&pts, 2, 1).unwrap();
        for m in means {
            let best = (0..2)
                .map(|k| sq_dist(c.row(k), &m).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "{best}");
        }
    }

    #[test]
    fn errors_and_determinism() {
        assert!(matches!(kmeans(&Mat::zeros(0, 2), 1, 0), Err(Error::EmptyInput(_))));
        let pts = Mat::from_fn(40, 3, |i, j| ((i * 31 + j * 17) % 13) as f64);
        assert_eq!(kmeans(&pts, 5, 9).unwrap(), kmeans(&pts, 5, 9).unwrap());
    }

    #[test]
    fn wcss_never_increases() {
        let pts = Mat::from_fn(300, 2, |i, j| (((i * 7919 + j * 104729) % 1000) as f64 / 100.0).sin() * 3.0);
        for seed in 0..10 {
            let c = kmeans_detailed(&pts, 7, seed).unwrap();
            for w in c.wcss.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }
}
