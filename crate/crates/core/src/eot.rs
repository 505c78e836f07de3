//! Entropic optimal transport between empirical marginals via log-domain
//! Sinkhorn iterations, plus an exact small-instance assignment solver used
//! both as the W2 metric backend and as a test oracle.

use rayon::prelude::*;

use crate::numerics::{Mat, Prng};
use crate::{Result, SfkError};

/// An entropic OT plan between two empirical marginals.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub plan: Mat,
    pub source_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
    pub epsilon: f64,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_violation: f64,
}

impl Coupling {
    /// Expected transport cost sum_ij plan_ij * c_ij for a caller-supplied
    /// per-pair cost.
    pub fn expected_cost(&self, cost: &Mat) -> f64 {
        self.plan
            .as_slice()
            .iter()
            .zip(cost.as_slice())
            .map(|(p, c)| p * c)
            .sum()
    }
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
pub fn pairwise_sq_dists(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(SfkError::shape(
            "pairwise_sq_dists",
            format!("{} vs {} columns", a.cols(), b.cols()),
        ));
    }
    let n = a.rows();
    let m = b.rows();
    let mut out = Mat::zeros(n, m);
    let cols = b.cols();
    let b_data = b.as_slice();
    out.as_mut_slice()
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, row)| {
            let ai = a.row(i);
            for (j, o) in row.iter_mut().enumerate() {
                let bj = &b_data[j * cols..(j + 1) * cols];
                let mut s = 0.0;
                for (x, y) in ai.iter().zip(bj) {
                    let d = x - y;
                    s += d * d;
                }
                *o = s;
            }
        });
    Ok(out)
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + terms.map(|t| (t - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn on an explicit cost matrix with given marginals.
pub fn sinkhorn_from_cost(
    cost: &Mat,
    source_weights: &[f64],
    target_weights: &[f64],
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Coupling> {
    let n = cost.rows();
    let m = cost.cols();
    if epsilon <= 0.0 {
        return Err(SfkError::InvalidArgument(format!("sinkhorn epsilon {} must be > 0", epsilon)));
    }
    if n == 0 || m == 0 || source_weights.len() != n || target_weights.len() != m {
        return Err(SfkError::shape(
            "sinkhorn",
            format!("cost {}x{}, weights {}/{}", n, m, source_weights.len(), target_weights.len()),
        ));
    }
    if !cost.is_finite() {
        return Err(SfkError::NonFinite("sinkhorn cost matrix".to_string()));
    }
    let log_a: Vec<f64> = source_weights.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = target_weights.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    for it in 1..=max_iter {
        iterations = it;
        for i in 0..n {
            let row = cost.row(i);
            let lse = log_sum_exp((0..m).map(|j| log_b[j] + (g[j] - row[j]) / epsilon));
            f[i] = -epsilon * lse;
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| log_a[i] + (f[i] - cost.get(i, j)) / epsilon));
            g[j] = -epsilon * lse;
        }
        // Columns match exactly after the g-update; only rows can violate.
        violation = (0..n)
            .map(|i| {
                let row = cost.row(i);
                let s: f64 = (0..m)
                    .map(|j| (log_b[j] + (f[i] + g[j] - row[j]) / epsilon).exp())
                    .sum();
                (s - 1.0).abs() * source_weights[i]
            })
            .fold(0.0f64, f64::max);
        if violation < tol {
            converged = true;
            break;
        }
    }
    let mut plan = Mat::zeros(n, m);
    for i in 0..n {
        let crow = cost.row(i);
        let prow = plan.row_mut(i);
        for j in 0..m {
            prow[j] = (log_a[i] + log_b[j] + (f[i] + g[j] - crow[j]) / epsilon).exp();
        }
    }
    Ok(Coupling {
        plan,
        source_weights: source_weights.to_vec(),
        target_weights: target_weights.to_vec(),
        epsilon,
        converged,
        iterations,
        marginal_violation: violation,
    })
}

/// Entropic OT between two uniformly weighted point clouds with the cost
/// `0.5 * ||x - y||^2` and regularization `epsilon`.
pub fn sinkhorn(x0: &Mat, x1: &Mat, epsilon: f64, max_iter: usize, tol: f64) -> Result<Coupling> {
    let mut cost = pairwise_sq_dists(x0, x1)?;
    cost.scale(0.5);
    let a = vec![1.0 / x0.rows() as f64; x0.rows()];
    let b = vec![1.0 / x1.rows() as f64; x1.rows()];
    sinkhorn_from_cost(&cost, &a, &b, epsilon, max_iter, tol)
}

/// Precomputed sampler over a coupling: row marginal CDF plus row-wise
/// conditional CDFs so repeated draws cost two binary searches.
pub struct CouplingSampler {
    row_cdf: Vec<f64>,
    cond_cdf: Mat,
}

impl CouplingSampler {
    pub fn new(c: &Coupling) -> Self {
        let n = c.plan.rows();
        let m = c.plan.cols();
        let mut row_cdf = vec![0.0; n];
        let mut cond_cdf = Mat::zeros(n, m);
        let mut acc = 0.0;
        for i in 0..n {
            let row = c.plan.row(i);
            let dst = cond_cdf.row_mut(i);
            let mut racc = 0.0;
            for (d, &p) in dst.iter_mut().zip(row) {
                racc += p;
                *d = racc;
            }
            acc += racc;
            row_cdf[i] = acc;
        }
        CouplingSampler { row_cdf, cond_cdf }
    }

    pub fn draw(&self, prng: &mut Prng) -> (usize, usize) {
        let total = *self.row_cdf.last().unwrap();
        let u = prng.uniform() * total;
        let i = self.row_cdf.partition_point(|&c| c <= u).min(self.row_cdf.len() - 1);
        let row = self.cond_cdf.row(i);
        let rtot = *row.last().unwrap();
        let v = prng.uniform() * rtot;
        let j = row.partition_point(|&c| c <= v).min(row.len() - 1);
        (i, j)
    }
}

/// Draw `batch` index pairs i.i.d. with probability proportional to the plan.
pub fn sample_pairs(c: &Coupling, prng: &mut Prng, batch: usize) -> Vec<(usize, usize)> {
    let sampler = CouplingSampler::new(c);
    (0..batch).map(|_| sampler.draw(prng)).collect()
}

/// Exact optimal assignment between two equal-size, uniformly weighted
/// point clouds under squared Euclidean cost. Returns the mean optimal cost
/// and the column assigned to each row.
pub fn exact_ot(x0: &Mat, x1: &Mat, cap: usize) -> Result<(f64, Vec<usize>)> {
    if x0.rows() == 0 || x0.rows() != x1.rows() {
        return Err(SfkError::InvalidArgument(format!(
            "exact_ot needs equal-size nonempty clouds, got {} and {}",
            x0.rows(),
            x1.rows()
        )));
    }
    if x0.rows() > cap {
        return Err(SfkError::InvalidArgument(format!(
            "exact_ot instance size {} exceeds cap {}; subsample both clouds to a common size first",
            x0.rows(),
            cap
        )));
    }
    let cost = pairwise_sq_dists(x0, x1)?;
    let assignment = min_cost_assignment(&cost);
    let n = x0.rows();
    let total: f64 = (0..n).map(|i| cost.get(i, assignment[i])).sum();
    Ok((total / n as f64, assignment))
}

/// Hungarian algorithm with potentials (shortest augmenting paths), O(n^3).
fn min_cost_assignment(cost: &Mat) -> Vec<usize> {
    let n = cost.rows();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cloud(seed: u64, n: usize, d: usize) -> Mat {
        let mut p = Prng::new(seed);
        Mat::from_vec(n, d, p.gauss_vec(n * d)).unwrap()
    }

    #[test]
    fn zero_cost_gives_outer_product() {
        // All points identical: every pairing costs zero.
        let x0 = Mat::from_vec(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let x1 = Mat::from_vec(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let c = sinkhorn(&x0, &x1, 0.5, 1000, 1e-10).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((c.plan.get(i, j) - (1.0 / 3.0) * 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        let cost = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let c = sinkhorn_from_cost(&cost, &[0.5, 0.5], &[0.5, 0.5], 0.05, 1000, 1e-10).unwrap();
        assert!((c.plan.get(0, 0) - 0.5).abs() < 1e-3);
        assert!((c.plan.get(1, 1) - 0.5).abs() < 1e-3);
        assert!(c.plan.get(0, 1) < 1e-3);
    }

    fn max_marginal_violation(c: &Coupling) -> f64 {
        let n = c.plan.rows();
        let m = c.plan.cols();
        let mut worst = 0.0f64;
        for i in 0..n {
            let s: f64 = c.plan.row(i).iter().sum();
            worst = worst.max((s - c.source_weights[i]).abs());
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| c.plan.get(i, j)).sum();
            worst = worst.max((s - c.target_weights[j]).abs());
        }
        worst
    }

    #[test]
    fn marginals_within_tolerance() {
        for seed in 0..5u64 {
            let x0 = random_cloud(seed, 17, 3);
            let x1 = random_cloud(seed + 100, 23, 3);
            let c = sinkhorn(&x0, &x1, 0.3, 2000, 1e-7).unwrap();
            assert!(c.converged);
            assert!(max_marginal_violation(&c) < 1e-6);
        }
    }

    #[test]
    fn transpose_symmetry() {
        let x0 = random_cloud(5, 12, 2);
        let x1 = random_cloud(6, 15, 2);
        let fwd = sinkhorn(&x0, &x1, 0.5, 5000, 1e-11).unwrap();
        let bwd = sinkhorn(&x1, &x0, 0.5, 5000, 1e-11).unwrap();
        for i in 0..12 {
            for j in 0..15 {
                assert!((fwd.plan.get(i, j) - bwd.plan.get(j, i)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn large_epsilon_tends_to_outer_product() {
        let x0 = random_cloud(7, 10, 2);
        let x1 = random_cloud(8, 11, 2);
        let dist_to_outer = |eps: f64| {
            let c = sinkhorn(&x0, &x1, eps, 5000, 1e-10).unwrap();
            let mut worst = 0.0f64;
            for i in 0..10 {
                for j in 0..11 {
                    worst = worst.max((c.plan.get(i, j) - (1.0 / 10.0) * (1.0 / 11.0)).abs());
                }
            }
            worst
        };
        let d1 = dist_to_outer(0.1);
        let d2 = dist_to_outer(1.0);
        let d3 = dist_to_outer(10.0);
        assert!(d1 > d2 && d2 > d3, "{} {} {}", d1, d2, d3);
    }

    #[test]
    fn nan_cost_is_rejected() {
        let mut cost = Mat::zeros(2, 2);
        cost.set(0, 1, f64::NAN);
        assert!(sinkhorn_from_cost(&cost, &[0.5, 0.5], &[0.5, 0.5], 0.1, 10, 1e-6).is_err());
    }

    #[test]
    fn non_convergence_flagged() {
        let x0 = random_cloud(30, 20, 2);
        let x1 = random_cloud(31, 20, 2);
        let c = sinkhorn(&x0, &x1, 0.01, 2, 1e-12).unwrap();
        assert!(!c.converged);
        assert_eq!(c.iterations, 2);
    }

    #[test]
    fn sample_pairs_identity_plan() {
        let n = 4;
        let mut plan = Mat::zeros(n, n);
        for i in 0..n {
            plan.set(i, i, 1.0 / n as f64);
        }
        let c = Coupling {
            plan,
            source_weights: vec![0.25; n],
            target_weights: vec![0.25; n],
            epsilon: 0.1,
            converged: true,
            iterations: 1,
            marginal_violation: 0.0,
        };
        let mut prng = Prng::new(3);
        for (i, j) in sample_pairs(&c, &mut prng, 200) {
            assert_eq!(i, j);
        }
    }

    #[test]
    fn sample_pairs_frequencies_match_plan() {
        let x0 = random_cloud(9, 3, 2);
        let x1 = random_cloud(10, 4, 2);
        let c = sinkhorn(&x0, &x1, 1.0, 2000, 1e-10).unwrap();
        let draws = 100_000usize;
        let mut prng = Prng::new(11);
        let mut counts = Mat::zeros(3, 4);
        for (i, j) in sample_pairs(&c, &mut prng, draws) {
            counts.set(i, j, counts.get(i, j) + 1.0);
        }
        for i in 0..3 {
            for j in 0..4 {
                let p = c.plan.get(i, j);
                let freq = counts.get(i, j) / draws as f64;
                let se = (p * (1.0 - p) / draws as f64).sqrt();
                assert!((freq - p).abs() < 3.0 * se + 1e-9, "({}, {}): {} vs {}", i, j, freq, p);
            }
        }
    }

    #[test]
    fn sample_pairs_deterministic_under_seed() {
        let x0 = random_cloud(12, 5, 2);
        let x1 = random_cloud(13, 5, 2);
        let c = sinkhorn(&x0, &x1, 0.5, 1000, 1e-8).unwrap();
        let a = sample_pairs(&c, &mut Prng::new(77), 32);
        let b = sample_pairs(&c, &mut Prng::new(77), 32);
        assert_eq!(a, b);
    }

    #[test]
    fn exact_ot_identical_clouds() {
        let x = random_cloud(14, 6, 3);
        let (cost, assign) = exact_ot(&x, &x, 512).unwrap();
        assert!(cost.abs() < 1e-12);
        for (i, j) in assign.iter().enumerate() {
            assert_eq!(i, *j);
        }
    }

    #[test]
    fn exact_ot_singletons() {
        let x = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let y = Mat::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let (cost, _) = exact_ot(&x, &y, 512).unwrap();
        assert!((cost - 5.0).abs() < 1e-12);
    }

    #[test]
    fn exact_ot_over_cap_errors() {
        let x = random_cloud(15, 5, 2);
        let err = exact_ot(&x, &x, 4).unwrap_err();
        assert!(err.to_string().contains("subsample"));
    }

    fn brute_force_cost(cost: &Mat) -> f64 {
        fn permutations(k: usize, items: &mut Vec<usize>, best: &mut f64, cost: &Mat) {
            let n = cost.rows();
            if k == n {
                let c: f64 = (0..n).map(|i| cost.get(i, items[i])).sum();
                if c < *best {
                    *best = c;
                }
                return;
            }
            for i in k..n {
                items.swap(k, i);
                permutations(k + 1, items, best, cost);
                items.swap(k, i);
            }
        }
        let mut items: Vec<usize> = (0..cost.rows()).collect();
        let mut best = f64::INFINITY;
        permutations(0, &mut items, &mut best, cost);
        best / cost.rows() as f64
    }

    #[test]
    fn exact_ot_matches_permutation_brute_force() {
        for seed in 0..10u64 {
            let x0 = random_cloud(100 + seed, 5, 3);
            let x1 = random_cloud(200 + seed, 5, 3);
            let (fast, _) = exact_ot(&x0, &x1, 512).unwrap();
            let slow = brute_force_cost(&pairwise_sq_dists(&x0, &x1).unwrap());
            assert!((fast - slow).abs() < 1e-9, "seed {}: {} vs {}", seed, fast, slow);
        }
    }

    #[test]
    fn entropic_cost_dominates_exact() {
        let x0 = random_cloud(50, 8, 2);
        let x1 = random_cloud(51, 8, 2);
        let sq = pairwise_sq_dists(&x0, &x1).unwrap();
        let c = sinkhorn(&x0, &x1, 0.5, 2000, 1e-9).unwrap();
        let entropic = c.expected_cost(&sq);
        let (exact, _) = exact_ot(&x0, &x1, 512).unwrap();
        assert!(exact <= entropic + 1e-9, "{} vs {}", exact, entropic);
    }
}
