//! Lloyd's k-means with k-means++ seeding and farthest-point reseeding.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokens::{CodecSpec, TokenSequence};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 300;

/// Nearest-center quantizer over `feature_dim`-dimensional vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansQuantizer {
    /// `n_clusters × feature_dim`.
    pub centers: Tensor,
}

/// Output of [`train_kmeans`].
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub quantizer: KMeansQuantizer,
    /// Inertia after every assignment step, ending with the final one.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final cluster sizes.
    pub counts: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeansQuantizer {
    pub fn new(centers: Tensor) -> Result<Self> {
        if centers.rows < 2 {
            return Err(Error::InvalidArgument("a quantizer needs at least two centers".into()));
        }
        if !centers.all_finite() {
            return Err(Error::NonFinite("quantizer centers".into()));
        }
        Ok(Self { centers })
    }

    pub fn n_clusters(&self) -> usize {
        self.centers.rows
    }

    pub fn feature_dim(&self) -> usize {
        self.centers.cols
    }

    /// Nearest center and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        nearest_center(&self.centers, x)
    }

    pub fn quantize_ids(&self, features: &Tensor) -> Result<Vec<u32>> {
        if features.cols != self.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "features have dimension {}, quantizer expects {}",
                features.cols,
                self.feature_dim()
            )));
        }
        Ok((0..features.rows).map(|r| self.nearest(features.row(r)).0 as u32).collect())
    }

    /// Single-codebook token grid for `features` (one row per frame).
    pub fn quantize(&self, features: &Tensor, spec: &CodecSpec) -> Result<TokenSequence> {
        if spec.num_codebooks != 1 || spec.codebook_size != self.n_clusters() {
            return Err(Error::SpecMismatch(format!(
                "k-means tokens need K=1, C={}; got K={}, C={}",
                self.n_clusters(),
                spec.num_codebooks,
                spec.codebook_size
            )));
        }
        TokenSequence::new(spec.clone(), vec![self.quantize_ids(features)?])
    }

    /// The assigned centers, one row per frame.
    pub fn dequantize_lookup(&self, seq: &TokenSequence) -> Result<Tensor> {
        if seq.num_codebooks() != 1 || seq.spec().codebook_size != self.n_clusters() {
            return Err(Error::SpecMismatch("token grid does not match the quantizer".into()));
        }
        let mut out = Tensor::zeros(seq.len(), self.feature_dim());
        for (t, &id) in seq.codebook(0).iter().enumerate() {
            out.row_mut(t).copy_from_slice(self.centers.row(id as usize));
        }
        Ok(out)
    }
}

pub(crate) fn nearest_center(centers: &Tensor, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows {
        let d = sq_dist(centers.row(c), x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn count_distinct(points: &Tensor) -> usize {
    let mut seen = HashSet::new();
    for r in 0..points.rows {
        seen.insert(points.row(r).iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    seen.len()
}

/// k-means until the largest center move is below `1e-6` or 300 iterations.
pub fn train_kmeans(features: &Tensor, n_clusters: usize, seed: u64) -> Result<KMeansFit> {
    train_kmeans_with(features, n_clusters, seed, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

pub fn train_kmeans_with(
    features: &Tensor,
    n_clusters: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<KMeansFit> {
    if n_clusters < 2 {
        return Err(Error::InvalidArgument("n_clusters must be ≥ 2".into()));
    }
    if !features.all_finite() {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let distinct = count_distinct(features);
    if distinct < n_clusters {
        return Err(Error::TooFewPoints {
            points: distinct,
            clusters: n_clusters,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = features.rows;
    let dim = features.cols;
    let mut centers = plus_plus_init(features, n_clusters, &mut rng);
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    let assign_all = |centers: &Tensor, assign: &mut [usize], dist: &mut [f64]| -> f64 {
        let mut inertia = 0.0;
        for i in 0..n {
            let (c, d) = nearest_center(centers, features.row(i));
            assign[i] = c;
            dist[i] = d;
            inertia += d;
        }
        inertia
    };

    while iterations < max_iter {
        iterations += 1;
        history.push(assign_all(&centers, &mut assign, &mut dist));
        let mut sums = Tensor::zeros(n_clusters, dim);
        let mut counts = vec![0usize; n_clusters];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, x) in sums.row_mut(assign[i]).iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        let mut next = centers.clone();
        for c in 0..n_clusters {
            if counts[c] > 0 {
                for (o, s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *o = s / counts[c] as f64;
                }
            }
        }
        // empty clusters take the points worst served by their centers
        let empties: Vec<usize> = (0..n_clusters).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            for (&c, &p) in empties.iter().zip(&order) {
                next.row_mut(c).copy_from_slice(features.row(p));
            }
        }
        let shift = (0..n_clusters)
            .map(|c| sq_dist(next.row(c), centers.row(c)).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < tol && empties.is_empty() {
            converged = true;
            break;
        }
    }

    let mut inertia = assign_all(&centers, &mut assign, &mut dist);
    let mut counts = cluster_counts(&assign, n_clusters);
    let mut guard = 0;
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        guard += 1;
        if guard > 4 * n_clusters {
            return Err(Error::InvalidArgument("could not populate every cluster".into()));
        }
        let donor = (0..n)
            .filter(|&i| counts[assign[i]] >= 2 && dist[i] > 0.0)
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
            .expect("distinct points outnumber populated clusters");
        centers.row_mut(empty).copy_from_slice(features.row(donor));
        inertia = assign_all(&centers, &mut assign, &mut dist);
        counts = cluster_counts(&assign, n_clusters);
    }
    history.push(inertia);
    Ok(KMeansFit {
        quantizer: KMeansQuantizer::new(centers)?,
        inertia_history: history,
        iterations,
        converged,
        counts,
    })
}

fn cluster_counts(assign: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &a in assign {
        counts[a] += 1;
    }
    counts
}

fn plus_plus_init<R: Rng + ?Sized>(features: &Tensor, k: usize, rng: &mut R) -> Tensor {
    let n = features.rows;
    let mut centers = Tensor::zeros(k, features.cols);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(features.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let mut pick = n - 1;
        if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if u < acc && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("positive mass exists");
            }
        }
        centers.row_mut(c).copy_from_slice(features.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(i), centers.row(c)));
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = [[0.0, 0.0], [5.0, 5.0], [-4.0, 6.0], [6.0, -3.0]];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let c = centres[i % 4];
                (0..2)
                    .map(|d| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c[d] + z
                    })
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    #[test]
    fn two_points_two_clusters() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, -2.0]]);
        let fit = train_kmeans(&x, 2, 0).unwrap();
        assert_eq!(*fit.inertia_history.last().unwrap(), 0.0);
        let mut rows: Vec<Vec<f64>> = (0..2).map(|r| fit.quantizer.centers.row(r).to_vec()).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(rows, vec![vec![0.0, 1.0], vec![3.0, -2.0]]);
    }

    #[test]
    fn too_few_distinct_points() {
        let x = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![2.0]]);
        assert!(matches!(train_kmeans(&x, 3, 0), Err(Error::TooFewPoints { points: 2, clusters: 3 })));
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..10 {
            let fit = train_kmeans(&blobs(seed, 400), 6, seed).unwrap();
            for w in fit.inertia_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed}: {} → {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn quantize_matches_brute_force_and_is_idempotent() {
        let fit = train_kmeans(&blobs(3, 300), 8, 1).unwrap();
        let q = &fit.quantizer;
        let probe = blobs(99, 200);
        let ids = q.quantize_ids(&probe).unwrap();
        for (r, &id) in ids.iter().enumerate() {
            let dists: Vec<f64> = (0..8).map(|c| sq_dist(q.centers.row(c), probe.row(r))).collect();
            let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
            let first = dists.iter().position(|&d| d == best).unwrap();
            assert_eq!(id as usize, first);
        }
        let spec = CodecSpec::new(1, 8, 50.0, 16_000).unwrap();
        let seq = q.quantize(&probe, &spec).unwrap();
        let back = q.dequantize_lookup(&seq).unwrap();
        assert_eq!(q.quantize(&back, &spec).unwrap(), seq);
        let centre = Tensor::from_rows(&[q.centers.row(5).to_vec()]);
        assert_eq!(q.quantize_ids(&centre).unwrap(), vec![5]);
        assert!(q.quantize_ids(&Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn every_cluster_is_populated_at_scale() {
        let x = blobs(5, 3000);
        let fit = train_kmeans_with(&x, 512, 2, DEFAULT_TOL, 40).unwrap();
        assert!(fit.counts.iter().all(|&c| c > 0));
        assert_eq!(fit.counts.iter().sum::<usize>(), 3000);
    }
}
