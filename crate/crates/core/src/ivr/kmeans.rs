//! Lloyd's k-means with k-means++ seeding.
//!
//! Seeding rule (relied upon by reproducibility tests):
//! 1. RNG is `ChaCha8Rng::seed_from_u64(seed)`.
//! 2. The first centroid is point `rng.gen_range(0..n)`.
//! 3. Each further centroid draws `r = rng.gen::<f64>() * total` where
//!    `total` is the sum of squared distances to the nearest chosen centroid,
//!    and picks the first point whose running sum exceeds `r`. When `total`
//!    is zero the lowest-index point not yet chosen is taken.
//!
//! All distances are computed after per-dimension z-score normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::IvrError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KmeansParams {
    fn default() -> Self {
        Self {
            k: 2,
            seed: 0,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// Per-dimension affine map applied before clustering. Dimensions with zero
/// variance keep a scale of 1 and an offset of 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    fn fit(points: &[Vec<f64>]) -> Self {
        let d = points[0].len();
        let n = points.len() as f64;
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let m = points.iter().map(|p| p[j]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / n;
            if var > 0.0 && var.sqrt() > 0.0 {
                mean[j] = m;
                scale[j] = var.sqrt();
            }
        }
        Self { mean, scale }
    }

    pub fn apply(&self, point: &[f64]) -> Vec<f64> {
        point
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `k` centroids in normalized feature space.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared normalized distances to assigned centroids.
    pub inertia: f64,
    /// Inertia after every assignment step, ending with the final one.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub normalization: Normalization,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties resolved toward the lower cluster id.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq_dist(point, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let (c, d) = nearest(p, centroids);
            inertia += d;
            c
        })
        .collect();
    (labels, inertia)
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > r {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &points[next]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    chosen
}

/// Clusters `points` into `params.k` groups.
pub fn kmeans(points: &[Vec<f64>], params: &KmeansParams) -> Result<ClusterModel, IvrError> {
    let k = params.k;
    let n = points.len();
    if k == 0 || n < k {
        return Err(IvrError::TooFewPoints { n, k });
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(IvrError::BadDimension);
    }
    for (i, p) in points.iter().enumerate() {
        if let Some(j) = p.iter().position(|x| !x.is_finite()) {
            return Err(IvrError::NonFinite { point: i, dim: j });
        }
    }

    let normalization = Normalization::fit(points);
    let data: Vec<Vec<f64>> = points.iter().map(|p| normalization.apply(p)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids: Vec<Vec<f64>> = seed_plus_plus(&data, k, &mut rng)
        .into_iter()
        .map(|i| data[i].clone())
        .collect();

    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < params.max_iter {
        let (labels, inertia) = assign(&data, &centroids);
        history.push(inertia);
        iterations += 1;

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in data.iter().zip(&labels) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its centroid
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if shift < params.tol {
            break;
        }
    }
    let (assignments, inertia) = assign(&data, &centroids);
    history.push(inertia);

    Ok(ClusterModel {
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
        normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(k: usize, seed: u64) -> KmeansParams {
        KmeansParams {
            k,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn separated_duplicates() {
        let mut pts = Vec::new();
        for _ in 0..10 {
            pts.push(vec![0.0, 0.0]);
            pts.push(vec![0.0, 1.0]);
        }
        let m = kmeans(&pts, &params(2, 7)).unwrap();
        assert_eq!(m.inertia, 0.0);
        for (p, &a) in pts.iter().zip(&m.assignments) {
            let same_group = pts
                .iter()
                .zip(&m.assignments)
                .filter(|(q, _)| q == &p)
                .all(|(_, &b)| b == a);
            assert!(same_group);
        }
        assert_ne!(m.assignments[0], m.assignments[1]);
        // zero-variance dimension untouched
        assert_eq!(m.normalization.scale[0], 1.0);
        assert_eq!(m.normalization.mean[0], 0.0);
    }

    #[test]
    fn k_equals_distinct_points() {
        let pts = vec![vec![1.0, 2.0], vec![5.0, -1.0], vec![3.0, 3.0], vec![5.0, -1.0]];
        let m = kmeans(&pts, &params(3, 1)).unwrap();
        assert_eq!(m.inertia, 0.0);
        for (i, p) in pts.iter().enumerate() {
            let z = m.normalization.apply(p);
            assert_eq!(z, m.centroids[m.assignments[i]]);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            kmeans(&[vec![1.0]], &params(2, 0)),
            Err(IvrError::TooFewPoints { n: 1, k: 2 })
        );
        assert_eq!(
            kmeans(&[vec![1.0], vec![f64::NAN]], &params(2, 0)),
            Err(IvrError::NonFinite { point: 1, dim: 0 })
        );
        assert_eq!(kmeans(&[vec![], vec![]], &params(2, 0)), Err(IvrError::BadDimension));
    }

    proptest! {
        #[test]
        fn inertia_non_increasing_and_consistent(
            pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 4..60),
            seed in 0u64..1000,
        ) {
            let m = kmeans(&pts, &params(2, seed)).unwrap();
            for w in m.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            let data: Vec<Vec<f64>> = pts.iter().map(|p| m.normalization.apply(p)).collect();
            let mut total = 0.0;
            for (p, &a) in data.iter().zip(&m.assignments) {
                let d = sq_dist(p, &m.centroids[a]);
                for c in &m.centroids {
                    prop_assert!(d <= sq_dist(p, c));
                }
                total += d;
            }
            prop_assert!((total - m.inertia).abs() <= 1e-9 * total.max(1.0));
            let again = kmeans(&pts, &params(2, seed)).unwrap();
            prop_assert_eq!(again.assignments, m.assignments);
        }
    }
}
