//! k-means over embeddings, cluster variance and pruning, and cross-modal
//! affinity between image and audio clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::dot;

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub counts: Vec<usize>,
    /// `None` for a cluster left empty when the iteration cap was reached.
    pub variances: Vec<Option<f64>>,
    /// Objective after every centroid update, first entry from the seeding.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == cluster).collect()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>], workers: usize) -> Vec<usize> {
    let workers = workers.max(1).min(points.len().max(1));
    if workers == 1 {
        return points.iter().map(|p| nearest(p, centroids).0).collect();
    }
    let chunk = points.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = points
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|p| nearest(p, centroids).0).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("assignment worker panicked")).collect()
    })
}

fn objective(points: &[&[f64]], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

fn distinct_count(sorted: &[&[f64]]) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| cmp_points(w[0], w[1]).is_ne()).count()
}

fn cmp_points(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.total_cmp(y);
        if o.is_ne() {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

fn seed_plus_plus(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < d {
                break;
            }
            target -= d;
        }
        let c = points[pick.expect("distinct points remain")].to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Means of the assigned members. An empty cluster is moved onto the point
/// farthest from its own centroid; returns whether that happened.
fn update(points: &[&[f64]], assignments: &[usize], centroids: &mut [Vec<f64>]) -> bool {
    let k = centroids.len();
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    let mut empty = Vec::new();
    for j in 0..k {
        if counts[j] == 0 {
            empty.push(j);
        } else {
            centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        }
    }
    let mut taken = Vec::new();
    for &j in &empty {
        let mut far = (usize::MAX, -1.0);
        for (i, p) in points.iter().enumerate() {
            if taken.contains(&i) {
                continue;
            }
            let d = squared_distance(p, &centroids[assignments[i]]);
            if d > far.1 {
                far = (i, d);
            }
        }
        taken.push(far.0);
        centroids[j] = points[far.0].to_vec();
    }
    !empty.is_empty()
}

/// Seeded k-means++ followed by Lloyd iterations until the assignment stops
/// changing or `max_iterations` updates have run.
///
/// Points are processed in a canonical (sorted) order, so permuting the input
/// permutes the assignments and leaves centroids unchanged.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iterations: usize, workers: usize) -> Result<ClusterModel> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| cmp_points(&points[a], &points[b]));
    let sorted: Vec<&[f64]> = order.iter().map(|&i| points[i].as_slice()).collect();
    let distinct = distinct_count(&sorted);
    if k == 0 || distinct < k {
        return Err(Error::TooFewPoints { k, distinct });
    }
    if let Some(p) = points.iter().find(|p| p.len() != points[0].len()) {
        return Err(Error::Dimension(format!("{} vs {}", p.len(), points[0].len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(&sorted, k, &mut rng);
    let mut assignments = assign(&sorted, &centroids, workers);
    let mut history = vec![objective(&sorted, &centroids, &assignments)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let reseeded = update(&sorted, &assignments, &mut centroids);
        let next = assign(&sorted, &centroids, workers);
        let j = objective(&sorted, &centroids, &next);
        debug_assert!(
            j <= history.last().unwrap() * (1.0 + 1e-12) + 1e-300,
            "k-means objective increased"
        );
        history.push(j);
        if next == assignments && !reseeded {
            converged = true;
            break;
        }
        assignments = next;
    }

    let mut counts = vec![0; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    let mut variances = vec![None; k];
    let mut acc = vec![0.0; k];
    for (p, &a) in sorted.iter().zip(&assignments) {
        acc[a] += squared_distance(p, &centroids[a]);
    }
    for j in 0..k {
        if counts[j] > 0 {
            variances[j] = Some(acc[j] / counts[j] as f64);
        }
    }
    let mut original = vec![0; points.len()];
    for (pos, &i) in order.iter().enumerate() {
        original[i] = assignments[pos];
    }
    Ok(ClusterModel {
        centroids,
        assignments: original,
        counts,
        variances,
        objective_history: history,
        iterations,
        converged,
    })
}

pub fn cluster_variance(model: &ClusterModel, cluster: usize) -> Result<f64> {
    model
        .variances
        .get(cluster)
        .copied()
        .flatten()
        .ok_or(Error::EmptyCluster(cluster))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pruned {
    pub kept: Vec<usize>,
    /// Points belonging to the kept clusters.
    pub points: usize,
}

/// Keeps clusters whose variance is strictly below `threshold`.
pub fn prune_by_variance(model: &ClusterModel, threshold: f64) -> Pruned {
    let kept: Vec<usize> = (0..model.k())
        .filter(|&j| model.variances[j].is_some_and(|v| v < threshold))
        .collect();
    let points = kept.iter().map(|&j| model.counts[j]).sum();
    Pruned { kept, points }
}

/// A grounding seen as a link between one image vector and one audio vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub image: usize,
    pub audio: usize,
}

/// `table[I][A]` sums `iᵀa` over links whose image vector falls in image
/// cluster `I` and whose audio vector falls in audio cluster `A`.
pub fn affinity_table(
    links: &[Link],
    image_vectors: &[Vec<f64>],
    audio_vectors: &[Vec<f64>],
    image_model: &ClusterModel,
    audio_model: &ClusterModel,
) -> Vec<Vec<f64>> {
    let mut table = vec![vec![0.0; audio_model.k()]; image_model.k()];
    for l in links {
        let i = image_model.assignments[l.image];
        let a = audio_model.assignments[l.audio];
        table[i][a] += dot(&image_vectors[l.image], &audio_vectors[l.audio]);
    }
    table
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linkage {
    pub audio_to_image: Vec<usize>,
    pub image_to_audio: Vec<usize>,
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Best partner in each direction; ties go to the lower index.
pub fn link_clusters(table: &[Vec<f64>]) -> Linkage {
    let audios = table.first().map_or(0, |r| r.len());
    Linkage {
        audio_to_image: (0..audios).map(|a| argmax(table.iter().map(|row| row[a]))).collect(),
        image_to_audio: table.iter().map(|row| argmax(row.iter().copied())).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pts(v: &[(f64, f64)]) -> Vec<Vec<f64>> {
        v.iter().map(|&(x, y)| vec![x, y]).collect()
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn exhaustive_nearest(p: &[f64], centroids: &[Vec<f64>]) -> f64 {
        centroids.iter().map(|c| squared_distance(p, c)).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn two_groups() {
        let m = kmeans(&pts(&[(0.0, 0.0), (0.0, 1.0), (10.0, 0.0), (10.0, 1.0)]), 2, 0, 300, 1).unwrap();
        let mut c = m.centroids.clone();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert_eq!(m.objective(), 1.0);
        assert!(m.converged);
    }

    #[test]
    fn k_equals_distinct_points() {
        let p = pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 5.0), (1.0, 1.0)]);
        let m = kmeans(&p, 3, 4, 300, 1).unwrap();
        assert_eq!(m.objective(), 0.0);
        assert!(matches!(kmeans(&p, 4, 0, 300, 1), Err(Error::TooFewPoints { k: 4, distinct: 3 })));
    }

    #[test]
    fn random_instance_is_nearest_and_beats_worst_restart() {
        let p = random_points(200, 5, 11);
        let m = kmeans(&p, 8, 1, 300, 1).unwrap();
        for (x, &a) in p.iter().zip(&m.assignments) {
            assert_eq!(squared_distance(x, &m.centroids[a]), exhaustive_nearest(x, &m.centroids));
        }
        let worst = (100..150)
            .map(|s| kmeans(&p, 8, s, 300, 1).unwrap().objective())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(m.objective() <= worst);
    }

    #[test]
    fn workers_do_not_change_the_result() {
        let p = random_points(300, 4, 2);
        assert_eq!(kmeans(&p, 6, 9, 300, 1).unwrap(), kmeans(&p, 6, 9, 300, 3).unwrap());
    }

    #[test]
    fn variance_fixtures() {
        let m = kmeans(&pts(&[(1.0, 0.0), (-1.0, 0.0), (50.0, 50.0)]), 2, 0, 300, 1).unwrap();
        let single = m.assignments[2];
        assert_eq!(cluster_variance(&m, single).unwrap(), 0.0);
        assert_eq!(cluster_variance(&m, 1 - single).unwrap(), 1.0);
        assert!(matches!(cluster_variance(&m, 5), Err(Error::EmptyCluster(5))));
    }

    #[test]
    fn variance_matches_two_pass_recomputation() {
        let p = random_points(120, 6, 3);
        let m = kmeans(&p, 5, 7, 300, 1).unwrap();
        for j in 0..5 {
            let members = m.members(j);
            let mut mean = vec![0.0; 6];
            for &i in &members {
                for d in 0..6 {
                    mean[d] += p[i][d] / members.len() as f64;
                }
            }
            let var: f64 =
                members.iter().map(|&i| squared_distance(&p[i], &mean)).sum::<f64>() / members.len() as f64;
            assert!((var - cluster_variance(&m, j).unwrap()).abs() < 1e-9);
        }
    }

    fn with_variances(v: &[f64]) -> ClusterModel {
        ClusterModel {
            centroids: vec![vec![0.0]; v.len()],
            assignments: vec![],
            counts: (1..=v.len()).collect(),
            variances: v.iter().map(|&x| Some(x)).collect(),
            objective_history: vec![],
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn pruning_fixtures() {
        let m = with_variances(&[0.3, 0.7, 1.2]);
        assert_eq!(prune_by_variance(&m, 0.65), Pruned { kept: vec![0], points: 1 });
        assert_eq!(prune_by_variance(&m, f64::INFINITY).kept, vec![0, 1, 2]);
        assert_eq!(prune_by_variance(&with_variances(&[0.0, 0.2]), 0.0).kept, Vec::<usize>::new());
    }

    #[test]
    fn linkage_fixtures() {
        let l = link_clusters(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        assert_eq!(l.audio_to_image, vec![0, 1]);
        assert_eq!(l.image_to_audio, vec![0, 1]);
        let z = link_clusters(&vec![vec![0.0; 3]; 2]);
        assert_eq!(z.audio_to_image, vec![0, 0, 0]);
        assert_eq!(z.image_to_audio, vec![0, 0]);
    }

    #[test]
    fn affinity_fixtures() {
        let img = vec![vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]];
        let aud = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut im = with_variances(&[0.0, 0.0]);
        im.assignments = vec![0, 0, 1];
        let mut am = with_variances(&[0.0, 0.0]);
        am.assignments = vec![0, 0, 1];
        let links = [Link { image: 0, audio: 0 }, Link { image: 1, audio: 1 }];
        let t = affinity_table(&links, &img, &aud, &im, &am);
        assert_eq!(t[0][0], 1.8);
        assert_eq!(t[1][1], 0.0);
        assert_eq!(t[0][1], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn permutation_only_relabels(seed in 0u64..1000, n in 10usize..60, shift in 1usize..9) {
            let p = random_points(n, 3, seed);
            let k = 4;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(shift % n);
            perm.reverse();
            let q: Vec<Vec<f64>> = perm.iter().map(|&i| p[i].clone()).collect();
            let a = kmeans(&p, k, seed, 300, 1).unwrap();
            let b = kmeans(&q, k, seed, 300, 1).unwrap();
            // same partition: points i, j together in one run iff together in the other
            for x in 0..n {
                for y in 0..n {
                    let together_a = a.assignments[perm[x]] == a.assignments[perm[y]];
                    let together_b = b.assignments[x] == b.assignments[y];
                    prop_assert_eq!(together_a, together_b);
                }
            }
        }

        #[test]
        fn objective_never_increases(seed in 0u64..1000, n in 20usize..120, k in 1usize..8) {
            let m = kmeans(&random_points(n, 4, seed), k, seed, 300, 1).unwrap();
            for w in m.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
            prop_assert_eq!(m.counts.iter().sum::<usize>(), n);
        }
    }
}
