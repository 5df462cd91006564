//! K-means over pixel embeddings and the cluster-to-mask rule.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::SeedSelection;
use crate::raster::{PixelEmbeddingMap, SegmentationMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 2,
            restarts: 10,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// k × dim, row-major.
    pub centroids: Vec<f64>,
    /// Sum of squared distances to the assigned centroids.
    pub objective: f64,
    /// Objective after every assignment step of the winning restart.
    pub trace: Vec<f64>,
    pub restart: usize,
}

impl KMeansResult {
    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0; k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

struct View<'a> {
    points: &'a [f32],
    dim: usize,
}

impl View<'_> {
    fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn dist2(&self, i: usize, centroid: &[f64]) -> f64 {
        self.point(i)
            .iter()
            .zip(centroid)
            .map(|(&x, &c)| {
                let d = x as f64 - c;
                d * d
            })
            .sum()
    }

    /// Nearest centroid per point (ties to the lower index) and its squared distance.
    fn assign(&self, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in centroids.chunks_exact(self.dim).enumerate() {
                    let d = self.dist2(i, c);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best
            })
            .unzip()
    }

    fn plus_plus(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.len();
        let mut centroids: Vec<f64> = Vec::with_capacity(k * self.dim);
        let first = rng.gen_range(0..n);
        centroids.extend(self.point(first).iter().map(|&x| x as f64));
        let mut nearest: Vec<f64> = (0..n).map(|i| self.dist2(i, &centroids)).collect();
        for _ in 1..k {
            let pick = match WeightedIndex::new(&nearest) {
                Ok(dist) => dist.sample(rng),
                // every point already coincides with a centroid
                Err(_) => rng.gen_range(0..n),
            };
            let start = centroids.len();
            centroids.extend(self.point(pick).iter().map(|&x| x as f64));
            let added = &centroids[start..];
            for (i, d) in nearest.iter_mut().enumerate() {
                *d = d.min(self.dist2(i, added));
            }
        }
        centroids
    }

    /// Cluster means accumulated serially in point order; empty clusters keep their centroid.
    fn update(&self, assignments: &[usize], previous: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
        let mut sums = vec![0.0f64; k * self.dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * self.dim..(a + 1) * self.dim].iter_mut().zip(self.point(i)) {
                *s += x as f64;
            }
        }
        for (j, &c) in counts.iter().enumerate() {
            let row = j * self.dim..(j + 1) * self.dim;
            if c == 0 {
                sums[row.clone()].copy_from_slice(&previous[row]);
            } else {
                let n = c as f64;
                sums[row].iter_mut().for_each(|s| *s /= n);
            }
        }
        (sums, counts)
    }
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed ^ (restart as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn run_once(view: &View, cfg: &KMeansConfig, seed: u64, restart: usize) -> KMeansResult {
    let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(seed, restart));
    let k = cfg.k;
    let mut centroids = view.plus_plus(k, &mut rng);
    let (mut assignments, dists) = view.assign(&centroids);
    let mut objective: f64 = dists.iter().sum();
    let mut trace = vec![objective];

    for _ in 0..cfg.max_iter {
        let (mut next, counts) = view.update(&assignments, &centroids, k);
        // Re-seed each empty cluster at the point farthest from its own centroid.
        let mut taken = Vec::new();
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..view.len())
                .filter(|i| !taken.contains(i))
                .map(|i| {
                    let a = assignments[i];
                    (i, view.dist2(i, &next[a * view.dim..(a + 1) * view.dim]))
                })
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            if let Some((i, _)) = far {
                taken.push(i);
                let p: Vec<f64> = view.point(i).iter().map(|&x| x as f64).collect();
                next[j * view.dim..(j + 1) * view.dim].copy_from_slice(&p);
            }
        }
        let (next_assignments, dists) = view.assign(&next);
        let next_objective: f64 = dists.iter().sum();
        if next_objective > objective {
            // only reachable through rounding; keep the better state
            break;
        }
        let improvement = objective - next_objective;
        centroids = next;
        assignments = next_assignments;
        objective = next_objective;
        trace.push(objective);
        if improvement < cfg.tol {
            break;
        }
    }
    // centroids consistent with the final assignment
    let (centroids, _) = view.update(&assignments, &centroids, k);
    KMeansResult {
        assignments,
        centroids,
        objective,
        trace,
        restart,
    }
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest objective wins.
///
/// `points` is N × `dim`, row-major. Restarts run concurrently but each is a pure
/// function of `(seed, restart index)`, so the result does not depend on the thread count.
pub fn kmeans(points: &[f32], dim: usize, cfg: &KMeansConfig, seed: u64) -> Result<KMeansResult> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::InvalidConfig(format!(
            "{} values do not form points of dimension {dim}",
            points.len()
        )));
    }
    if cfg.k == 0 || cfg.restarts == 0 {
        return Err(Error::InvalidConfig("k and restarts must be positive".into()));
    }
    if cfg.tol.is_nan() || cfg.tol < 0.0 {
        return Err(Error::InvalidConfig(format!("tol must be non-negative, got {}", cfg.tol)));
    }
    let view = View { points, dim };
    if view.len() < cfg.k {
        return Err(Error::TooFewPoints {
            needed: cfg.k,
            got: view.len(),
        });
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite point coordinates".into()));
    }
    let runs: Vec<KMeansResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_once(&view, cfg, seed, r))
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.objective < best.objective { r } else { best })
        .expect("at least one restart"))
}

/// Binary mask from per-image 2-means over the embeddings.
///
/// The cluster holding most seed-foreground pixels becomes foreground; a tie goes to
/// the smaller cluster. No seed foreground means the object is absent.
pub fn infer_mask(
    embeddings: &PixelEmbeddingMap,
    seeds: &SeedSelection,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<SegmentationMask> {
    let (h, w) = (embeddings.data.height(), embeddings.data.width());
    if (seeds.height, seeds.width) != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            found: vec![seeds.height, seeds.width],
        });
    }
    if seeds.foreground.is_empty() {
        return Ok(SegmentationMask::zeros(h, w));
    }
    let cfg = KMeansConfig { k: 2, ..*cfg };
    let result = kmeans(embeddings.data.data(), embeddings.dim(), &cfg, seed)?;
    let sizes = result.cluster_sizes(2);
    let mut votes = [0usize; 2];
    for &i in &seeds.foreground {
        votes[result.assignments[i]] += 1;
    }
    let fg = match votes[0].cmp(&votes[1]) {
        std::cmp::Ordering::Greater => 0,
        std::cmp::Ordering::Less => 1,
        std::cmp::Ordering::Equal => usize::from(sizes[1] < sizes[0]),
    };
    let data = result.assignments.iter().map(|&a| u8::from(a == fg)).collect();
    SegmentationMask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ImageTensor;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn objective_of(points: &[f32], dim: usize, assignments: &[usize], k: usize) -> f64 {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for d in 0..dim {
                sums[a * dim + d] += points[i * dim + d] as f64;
            }
        }
        let mut total = 0.0;
        for (i, &a) in assignments.iter().enumerate() {
            for d in 0..dim {
                let c = sums[a * dim + d] / counts[a] as f64;
                total += (points[i * dim + d] as f64 - c).powi(2);
            }
        }
        total
    }

    #[test]
    fn separable_1d() {
        let pts = [0.0f32, 0.1, 10.0, 10.1];
        let r = kmeans(&pts, 1, &KMeansConfig::default(), 7).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let mut c = r.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-6 && (c[1] - 10.05).abs() < 1e-6, "{c:?}");
    }

    #[test]
    fn identical_points() {
        let pts = vec![0.5f32; 20];
        let r = kmeans(&pts, 2, &KMeansConfig::default(), 1).unwrap();
        assert_eq!(r.objective, 0.0);
        let sizes = r.cluster_sizes(2);
        assert_eq!(sizes.iter().sum::<usize>(), 10);
        assert!(sizes.contains(&0), "{sizes:?}");
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans(&[1.0], 1, &KMeansConfig::default(), 0),
            Err(Error::TooFewPoints { needed: 2, got: 1 })
        ));
        assert!(kmeans(&[1.0, 2.0, 3.0], 2, &KMeansConfig::default(), 0).is_err());
    }

    #[test]
    fn swap_local_optimality_and_monotone_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<f32> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = kmeans(&pts, 2, &KMeansConfig::default(), 3).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        let base = objective_of(&pts, 2, &r.assignments, 2);
        assert!(base <= r.objective + 1e-9);
        let sizes = r.cluster_sizes(2);
        for i in 0..200 {
            if sizes[r.assignments[i]] == 1 {
                continue;
            }
            let mut moved = r.assignments.clone();
            moved[i] = 1 - moved[i];
            assert!(objective_of(&pts, 2, &moved, 2) >= base - 1e-9, "moving point {i} helps");
        }
    }

    #[test]
    fn thread_count_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<f32> = (0..3000).map(|_| rng.gen()).collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| kmeans(&pts, 3, &KMeansConfig::default(), 9).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
    }

    fn disk_embeddings(n: usize, r: f64) -> (PixelEmbeddingMap, SegmentationMask) {
        let c = (n as f64 - 1.0) / 2.0;
        let disk = SegmentationMask::from_fn(n, n, |y, x| {
            ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() <= r
        });
        let data = ImageTensor::from_fn(n, n, 2, |y, x, ch| {
            let s = if disk.get(y, x) { 1.0 } else { -1.0 };
            if ch == 0 {
                s
            } else {
                0.0
            }
        });
        (PixelEmbeddingMap { data, normalized: true }, disk)
    }

    #[test]
    fn antipodal_embeddings_recover_disk() {
        let (emb, disk) = disk_embeddings(16, 5.0);
        let seeds = SeedSelection {
            height: 16,
            width: 16,
            foreground: vec![8 * 16 + 8],
            background: vec![0],
        };
        let mask = infer_mask(&emb, &seeds, &KMeansConfig::default(), 0).unwrap();
        assert_eq!(mask, disk);
    }

    #[test]
    fn empty_foreground_gives_empty_mask() {
        let (emb, _) = disk_embeddings(8, 2.0);
        let seeds = SeedSelection {
            height: 8,
            width: 8,
            foreground: vec![],
            background: vec![0, 1],
        };
        assert_eq!(infer_mask(&emb, &seeds, &KMeansConfig::default(), 0).unwrap().count(), 0);
    }

    #[test]
    fn vote_tie_goes_to_smaller_cluster() {
        let (emb, disk) = disk_embeddings(16, 3.0);
        // one vote inside the disk, one outside
        let seeds = SeedSelection {
            height: 16,
            width: 16,
            foreground: vec![8 * 16 + 8, 0],
            background: vec![],
        };
        assert_eq!(infer_mask(&emb, &seeds, &KMeansConfig::default(), 0).unwrap(), disk);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn objective_never_increases(seed in any::<u64>(), n in 4usize..80, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let cfg = KMeansConfig { k: k.min(n), ..KMeansConfig::default() };
            let r = kmeans(&pts, 3, &cfg, seed).unwrap();
            prop_assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(r.trace.last().copied(), Some(r.objective));
        }
    }
}
