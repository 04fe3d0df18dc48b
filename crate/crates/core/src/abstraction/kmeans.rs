use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const RESTARTS: u64 = 8;

/// Result of weighted k-means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    /// Cluster of each training point.
    pub assignment: Vec<usize>,
    /// `Σ wᵢ ‖xᵢ − c_{label(i)}‖²`.
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Nearest center, ties to the lower index.
    pub fn classify(&self, x: &[f64]) -> usize {
        nearest(&self.centers, x).0
    }

    /// Model whose centers are the weighted means of the given labels.
    pub fn from_labels(points: &[Vec<f64>], weights: &[f64], labels: &[usize], k: usize) -> Result<Self> {
        if points.len() != labels.len() || points.len() != weights.len() {
            return Err(Error::DimensionMismatch("points, weights and labels must have equal length".into()));
        }
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::InvalidInput(format!("label out of range for {k} clusters")));
        }
        let dim = points.first().map_or(0, Vec::len);
        let (centers, mass) = weighted_means(points, weights, labels, k, dim);
        if let Some(c) = mass.iter().position(|&m| !(m > 0.0)) {
            return Err(Error::InvalidInput(format!("cluster {c} has no weight")));
        }
        let inertia = inertia(points, weights, labels, &centers);
        Ok(Self { centers, assignment: labels.to_vec(), inertia, inertia_trace: vec![inertia] })
    }
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(center, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn weighted_means(
    points: &[Vec<f64>],
    weights: &[f64],
    labels: &[usize],
    k: usize,
    dim: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut mass = vec![0.0; k];
    for ((x, &w), &l) in points.iter().zip(weights).zip(labels) {
        mass[l] += w;
        sums[l].iter_mut().zip(x).for_each(|(s, v)| *s += w * v);
    }
    for (s, &m) in sums.iter_mut().zip(&mass) {
        if m > 0.0 {
            s.iter_mut().for_each(|v| *v /= m);
        }
    }
    (sums, mass)
}

fn inertia(points: &[Vec<f64>], weights: &[f64], labels: &[usize], centers: &[Vec<f64>]) -> f64 {
    points.iter().zip(weights).zip(labels).map(|((x, &w), &l)| w * sq_dist(x, &centers[l])).sum()
}

fn distinct_points(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect()).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Weight-proportional k-means++ seeding.
fn seed_centers(points: &[Vec<f64>], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    let draw = |scores: &[f64], total: f64, rng: &mut ChaCha8Rng| {
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (i, &s) in scores.iter().enumerate() {
            acc += s;
            if u < acc {
                return i;
            }
        }
        scores.iter().rposition(|&s| s > 0.0).unwrap_or(0)
    };
    let mut centers = vec![points[draw(weights, total, rng)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let scores: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let s: f64 = scores.iter().sum();
        let next = if s > 0.0 {
            draw(&scores, s, rng)
        } else {
            // every weighted point coincides with a center already
            (0..points.len()).max_by(|&i, &j| d2[i].total_cmp(&d2[j]).then(j.cmp(&i))).unwrap_or(0)
        };
        centers.push(points[next].clone());
        for (d, x) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(x, &points[next]));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], weights: &[f64], mut centers: Vec<Vec<f64>>, max_iters: usize) -> ClusterModel {
    let k = centers.len();
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    let mut dists = vec![0.0; points.len()];
    let mut trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, x) in points.iter().enumerate() {
            let (c, d) = nearest(&centers, x);
            if c != labels[i] {
                labels[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        trace.push(dists.iter().zip(weights).map(|(d, w)| d * w).sum());
        if !changed {
            break;
        }
        let (means, mass) = weighted_means(points, weights, &labels, k, dim);
        for (c, (mean, &m)) in means.into_iter().zip(&mass).enumerate() {
            if m > 0.0 {
                centers[c] = mean;
            } else {
                // empty cluster: move it onto the point worst served so far
                let far = (0..points.len())
                    .filter(|&i| weights[i] > 0.0)
                    .max_by(|&i, &j| dists[i].total_cmp(&dists[j]).then(j.cmp(&i)))
                    .unwrap_or(0);
                centers[c] = points[far].clone();
                dists[far] = 0.0;
            }
        }
    }
    let inertia = inertia(points, weights, &labels, &centers);
    ClusterModel { centers, assignment: labels, inertia, inertia_trace: trace }
}

/// Weighted k-means: k-means++ seeding proportional to weight, Lloyd
/// iterations to an assignment fixpoint (or `max_iters`), best of eight
/// restarts by inertia with ties going to the earlier restart.
pub fn weighted_kmeans(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterModel> {
    if points.is_empty() || k == 0 {
        return Err(Error::InvalidInput("k-means needs at least one point and one cluster".into()));
    }
    if weights.len() != points.len() {
        return Err(Error::DimensionMismatch(format!("{} weights for {} points", weights.len(), points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch("points have differing dimensions".into()));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::InvalidInput("weights must be nonnegative, finite and not all zero".into()));
    }
    let distinct = distinct_points(points);
    if k > distinct {
        return Err(Error::InvalidInput(format!("{k} clusters requested for {distinct} distinct points")));
    }
    let mut best: Option<ClusterModel> = None;
    for restart in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart);
        let centers = seed_centers(points, weights, k, &mut rng);
        let model = lloyd(points, weights, centers, max_iters);
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(points: &[Vec<f64>], k: usize) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        let mut labels = vec![0usize; n];
        loop {
            if (0..k).all(|c| labels.contains(&c)) {
                let w = vec![1.0; n];
                let m = ClusterModel::from_labels(points, &w, &labels, k).unwrap();
                best = best.min(m.inertia);
            }
            let mut i = 0;
            loop {
                if i == n {
                    return best;
                }
                labels[i] += 1;
                if labels[i] < k {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
        }
    }

    fn separated_groups() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (g, c) in centers.iter().enumerate() {
            for _ in 0..4 {
                pts.push(vec![c[0] + rng.random_range(-0.5..0.5), c[1] + rng.random_range(-0.5..0.5)]);
                truth.push(g);
            }
        }
        (pts, truth)
    }

    #[test]
    fn recovers_separated_groups() {
        let (pts, truth) = separated_groups();
        let m = weighted_kmeans(&pts, &[1.0; 12], 3, 1, 100).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(truth[i] == truth[j], m.assignment[i] == m.assignment[j]);
            }
        }
        assert!((m.inertia - brute_force(&pts, 3)).abs() <= 1e-9);
    }

    #[test]
    fn single_cluster_is_weighted_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let w = [1.0, 2.0, 1.0];
        let m = weighted_kmeans(&pts, &w, 1, 0, 10).unwrap();
        assert!((m.centers[0][0] - 2.0).abs() < 1e-15 && (m.centers[0][1] - 1.5).abs() < 1e-15);
        let var: f64 = pts.iter().zip(&w).map(|(p, w)| w * sq_dist(p, &[2.0, 1.5])).sum();
        assert!((m.inertia - var).abs() < 1e-12);
    }

    #[test]
    fn duplicated_half_weights_leave_centers_unchanged() {
        let (pts, _) = separated_groups();
        let a = weighted_kmeans(&pts, &[1.0; 12], 3, 7, 100).unwrap();
        let doubled: Vec<Vec<f64>> = pts.iter().chain(&pts).cloned().collect();
        let b = weighted_kmeans(&doubled, &[0.5; 24], 3, 7, 100).unwrap();
        let mut ca = a.centers.clone();
        let mut cb = b.centers.clone();
        ca.sort_by(|x, y| x.partial_cmp(y).unwrap());
        cb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (x, y) in ca.iter().zip(&cb) {
            assert!(sq_dist(x, y).sqrt() <= 1e-10);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let pts = vec![vec![0.0], vec![0.0], vec![1.0]];
        assert!(weighted_kmeans(&pts, &[1.0; 3], 3, 0, 10).is_err());
        assert!(weighted_kmeans(&pts, &[0.0; 3], 1, 0, 10).is_err());
        assert!(weighted_kmeans(&pts, &[1.0, -1.0, 1.0], 1, 0, 10).is_err());
        assert!(weighted_kmeans(&pts, &[1.0; 2], 1, 0, 10).is_err());
        assert!(weighted_kmeans(&pts, &[1.0; 3], 2, 0, 10).is_ok());
    }

    #[test]
    fn zero_weight_points_do_not_move_centers() {
        let pts = vec![vec![0.0], vec![1.0], vec![100.0]];
        let m = weighted_kmeans(&pts, &[1.0, 1.0, 0.0], 1, 0, 10).unwrap();
        assert_eq!(m.centers[0], vec![0.5]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn lloyd_invariants(
            raw in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.1f64..3.0), 6..40),
            k in 1usize..5,
            seed in 0u64..1000,
        ) {
            let pts: Vec<Vec<f64>> = raw.iter().map(|p| vec![p.0, p.1]).collect();
            let w: Vec<f64> = raw.iter().map(|p| p.2).collect();
            let m = weighted_kmeans(&pts, &w, k, seed, 200).unwrap();
            for pair in m.inertia_trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12);
            }
            let check = ClusterModel::from_labels(&pts, &w, &m.assignment, k);
            if let Ok(check) = check {
                for (a, b) in check.centers.iter().zip(&m.centers) {
                    prop_assert!(sq_dist(a, b).sqrt() <= 1e-8);
                }
            }
            prop_assert_eq!(m.clone(), weighted_kmeans(&pts, &w, k, seed, 200).unwrap());
        }
    }
}
