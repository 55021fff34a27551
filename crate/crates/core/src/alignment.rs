//! Cluster-to-class alignment.
//!
//! Builds the KL cost between per-class and per-cluster node
//! distributions on the labeled source set, then solves the rectangular
//! linear sum assignment (clusters K ≥ classes N) for the minimum-cost
//! injective mapping. Unmapped clusters denote the unknown class in
//! open-set mode.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Smoothing added to both distributions before normalization and logs.
const SMOOTH_EPS: f64 = 1e-8;

/// `K×N` matrix of divergences between cluster-k and class-n node
/// distributions; entries are finite and non-negative.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    t: Array2<f64>,
}

impl CostMatrix {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.t
    }

    pub fn num_clusters(&self) -> usize {
        self.t.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.t.ncols()
    }
}

/// Partial injective map from clusters to classes; total on classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterClassMapping {
    assign: Vec<Option<usize>>,
    inverse: Vec<usize>,
}

impl ClusterClassMapping {
    pub fn num_clusters(&self) -> usize {
        self.assign.len()
    }

    pub fn num_classes(&self) -> usize {
        self.inverse.len()
    }

    /// Class assigned to a cluster, if any.
    pub fn class_of(&self, cluster: usize) -> Option<usize> {
        self.assign[cluster]
    }

    /// Cluster carrying a class (total on classes).
    pub fn cluster_of(&self, class: usize) -> usize {
        self.inverse[class]
    }

    pub fn unmapped_clusters(&self) -> Vec<usize> {
        (0..self.assign.len())
            .filter(|&k| self.assign[k].is_none())
            .collect()
    }

    /// `{"cluster": class, ...}` for run reports.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, usize> = self
            .assign
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.map(|c| (k.to_string(), c)))
            .collect();
        serde_json::to_value(map).expect("map serializes")
    }
}

/// KL cost between class columns and cluster columns, both normalized to
/// distributions over the shared node set (rows). Class probabilities may
/// be one-hot rows of ground-truth labels or classifier outputs.
pub fn kl_cost_matrix(
    class_probs: &ArrayView2<f64>,
    cluster_probs: &ArrayView2<f64>,
) -> Result<CostMatrix> {
    let s = class_probs.nrows();
    if s == 0 {
        return Err(Error::data("kl_cost_matrix: empty node set".to_string()));
    }
    if cluster_probs.nrows() != s {
        return Err(Error::shape(format!(
            "kl_cost_matrix: {s} class rows vs {} cluster rows",
            cluster_probs.nrows()
        )));
    }
    let n = class_probs.ncols();
    let k = cluster_probs.ncols();

    let normalize = |m: &ArrayView2<f64>, what: &str| -> Result<Array2<f64>> {
        let mut out = Array2::zeros((m.nrows(), m.ncols()));
        for c in 0..m.ncols() {
            let col = m.column(c);
            let raw: f64 = col.sum();
            if raw <= 0.0 {
                return Err(Error::data(format!(
                    "kl_cost_matrix: all-zero {what} column {c}"
                )));
            }
            let total = raw + SMOOTH_EPS * m.nrows() as f64;
            for (i, &v) in col.iter().enumerate() {
                out[[i, c]] = (v + SMOOTH_EPS) / total;
            }
        }
        Ok(out)
    };
    let p = normalize(class_probs, "class")?;
    let q = normalize(cluster_probs, "cluster")?;

    let mut t = Array2::zeros((k, n));
    for kc in 0..k {
        for nc in 0..n {
            let mut acc = 0.0;
            for i in 0..s {
                let pv = p[[i, nc]];
                acc += pv * (pv / q[[i, kc]]).ln();
            }
            t[[kc, nc]] = acc.max(0.0);
        }
    }
    Ok(CostMatrix { t })
}

/// Minimum total over matchings of `n` rows to distinct columns,
/// `n ≤ m`. Shortest-augmenting-path formulation with potentials.
fn hungarian_min_cost(cost: &ArrayView2<f64>) -> f64 {
    let n = cost.nrows();
    let m = cost.ncols();
    if n == 0 {
        return 0.0;
    }
    debug_assert!(n <= m);
    // 1-based columns; column 0 is the virtual start.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut matched = vec![0usize; m + 1]; // column -> row (1-based; 0 = free)
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
            for j in 0..=m {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=m {
        if matched[j] != 0 {
            total += cost[[matched[j] - 1, j - 1]];
        }
    }
    total
}

/// Minimum-cost injective assignment of all `N` classes to distinct
/// clusters on a `K×N` cost matrix with `K ≥ N`. Among minimizers,
/// returns the one whose class→cluster vector is lexicographically
/// smallest.
pub fn linear_sum_assignment(cost: &ArrayView2<f64>) -> Result<ClusterClassMapping> {
    let k = cost.nrows();
    let n = cost.ncols();
    if k < n {
        return Err(Error::config(format!(
            "linear_sum_assignment: {k} clusters < {n} classes"
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("linear_sum_assignment: non-finite cost".to_string()));
    }
    // Solve on the transpose (classes as rows, so rows ≤ cols).
    let t = cost.t().as_standard_layout().into_owned();
    let base = hungarian_min_cost(&t.view());
    let tol = 1e-9 * (1.0 + base.abs());

    // Lexicographic refinement: fix classes in order to the smallest
    // cluster id that still extends to an optimal assignment; optimality
    // of each candidate is certified by re-solving the remainder.
    let mut inverse = vec![usize::MAX; n];
    let mut used = vec![false; k];
    let mut fixed_cost = 0.0;
    for class in 0..n {
        let mut found = false;
        for cluster in 0..k {
            if used[cluster] {
                continue;
            }
            let rest_classes: Vec<usize> = (class + 1..n).collect();
            let rest_clusters: Vec<usize> =
                (0..k).filter(|&c| !used[c] && c != cluster).collect();
            let mut sub = Array2::zeros((rest_classes.len(), rest_clusters.len()));
            for (ri, &rc) in rest_classes.iter().enumerate() {
                for (ci, &cc) in rest_clusters.iter().enumerate() {
                    sub[[ri, ci]] = cost[[cc, rc]];
                }
            }
            let rest = hungarian_min_cost(&sub.view());
            if fixed_cost + cost[[cluster, class]] + rest <= base + tol {
                inverse[class] = cluster;
                used[cluster] = true;
                fixed_cost += cost[[cluster, class]];
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::data(
                "linear_sum_assignment: no consistent extension (numerical)".to_string(),
            ));
        }
    }

    let mut assign = vec![None; k];
    for (class, &cluster) in inverse.iter().enumerate() {
        assign[cluster] = Some(class);
    }
    Ok(ClusterClassMapping { assign, inverse })
}

/// Routes cluster draws through the mapping: mapped clusters yield their
/// class, unmapped clusters yield the unknown class id (= N) in open-set
/// mode and `None` (drop) otherwise.
pub fn map_pseudo_labels(
    mapping: &ClusterClassMapping,
    cluster_ids: &[usize],
    open_set: bool,
) -> Vec<Option<usize>> {
    cluster_ids
        .iter()
        .map(|&k| match mapping.class_of(k) {
            Some(class) => Some(class),
            None if open_set => Some(mapping.num_classes()),
            None => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    use crate::linalg::seeded_stream;

    /// Exhaustive minimum over injective class→cluster assignments with
    /// lexicographic preference among ties.
    fn brute_force(cost: &ArrayView2<f64>) -> (f64, Vec<usize>) {
        let k = cost.nrows();
        let n = cost.ncols();
        let mut best = (f64::INFINITY, vec![]);
        let mut chosen = vec![usize::MAX; n];
        let mut used = vec![false; k];
        fn rec(
            cost: &ArrayView2<f64>,
            class: usize,
            acc: f64,
            chosen: &mut Vec<usize>,
            used: &mut Vec<bool>,
            best: &mut (f64, Vec<usize>),
        ) {
            let n = cost.ncols();
            if class == n {
                if acc < best.0 - 1e-12 || ((acc - best.0).abs() <= 1e-12 && *chosen < best.1) {
                    *best = (acc, chosen.clone());
                }
                return;
            }
            for cluster in 0..cost.nrows() {
                if !used[cluster] {
                    used[cluster] = true;
                    chosen[class] = cluster;
                    rec(cost, class + 1, acc + cost[[cluster, class]], chosen, used, best);
                    used[cluster] = false;
                }
            }
        }
        rec(cost, 0, 0.0, &mut chosen, &mut used, &mut best);
        best
    }

    #[test]
    fn zero_diagonal_identity() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        let m = linear_sum_assignment(&cost.view()).unwrap();
        assert_eq!(m.class_of(0), Some(0));
        assert_eq!(m.class_of(1), Some(1));
        assert_eq!(m.cluster_of(0), 0);
    }

    #[test]
    fn three_by_three_example() {
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let m = linear_sum_assignment(&cost.view()).unwrap();
        // clusters are rows: 0→class 1, 1→class 0, 2→class 2, total 5
        assert_eq!(m.class_of(0), Some(1));
        assert_eq!(m.class_of(1), Some(0));
        assert_eq!(m.class_of(2), Some(2));
        let total: f64 = (0..3).map(|c| cost[[m.cluster_of(c), c]]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn rectangular_unmapped_clusters_match_brute_force() {
        let mut rng = seeded_stream(73, 0);
        for _ in 0..50 {
            let k = rng.random_range(2..=6);
            let n = rng.random_range(1..=k);
            let cost = Array2::from_shape_fn((k, n), |_| rng.random_range(0.0..10.0));
            let m = linear_sum_assignment(&cost.view()).unwrap();
            let (bf_cost, bf_assign) = brute_force(&cost.view());
            let total: f64 = (0..n).map(|c| cost[[m.cluster_of(c), c]]).sum();
            assert!((total - bf_cost).abs() < 1e-9);
            let ours: Vec<usize> = (0..n).map(|c| m.cluster_of(c)).collect();
            assert_eq!(ours, bf_assign);
            assert_eq!(m.unmapped_clusters().len(), k - n);
            // unmapped are exactly the clusters absent from the optimum
            for um in m.unmapped_clusters() {
                assert!(!bf_assign.contains(&um));
            }
        }
    }

    #[test]
    fn scale_invariance() {
        let mut rng = seeded_stream(79, 0);
        let cost = Array2::from_shape_fn((5, 3), |_| rng.random_range(0.0..1.0));
        let a = linear_sum_assignment(&cost.view()).unwrap();
        let scaled = cost.mapv(|v| v * 37.5);
        let b = linear_sum_assignment(&scaled.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lexicographic_tie_break() {
        let cost = Array2::from_elem((4, 2), 1.0);
        let m = linear_sum_assignment(&cost.view()).unwrap();
        assert_eq!(m.cluster_of(0), 0);
        assert_eq!(m.cluster_of(1), 1);
        assert_eq!(m.unmapped_clusters(), vec![2, 3]);
    }

    #[test]
    fn wide_matrix_rejected() {
        let cost = Array2::zeros((2, 3));
        assert!(linear_sum_assignment(&cost.view()).is_err());
        let bad = array![[f64::NAN, 0.0], [0.0, 0.0]];
        assert!(linear_sum_assignment(&bad.view()).is_err());
    }

    #[test]
    fn kl_cost_identical_heads_zero_diagonal() {
        let mut rng = seeded_stream(83, 0);
        let mut probs = Array2::from_shape_fn((6, 3), |_| rng.random_range(0.01..1.0));
        for mut row in probs.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let cm = kl_cost_matrix(&probs.view(), &probs.view()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert!(cm.matrix()[[i, j]] < 1e-9);
                } else {
                    assert!(cm.matrix()[[i, j]] > 0.0);
                }
            }
        }
    }

    #[test]
    fn kl_cost_analytic_log2() {
        let class = array![[1.0], [0.0]];
        let cluster = array![[0.5], [0.5]];
        let cm = kl_cost_matrix(&class.view(), &cluster.view()).unwrap();
        assert!((cm.matrix()[[0, 0]] - 2.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn kl_cost_nonnegative_finite_random() {
        let mut rng = seeded_stream(89, 0);
        let class = Array2::from_shape_fn((5, 3), |_| rng.random_range(0.0..1.0f64));
        let cluster = Array2::from_shape_fn((5, 4), |_| rng.random_range(0.0..1.0f64));
        let cm = kl_cost_matrix(&class.view(), &cluster.view()).unwrap();
        for &v in cm.matrix().iter() {
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn kl_cost_invariant_under_node_permutation() {
        let mut rng = seeded_stream(97, 0);
        let class = Array2::from_shape_fn((6, 2), |_| rng.random_range(0.0..1.0f64));
        let cluster = Array2::from_shape_fn((6, 3), |_| rng.random_range(0.0..1.0f64));
        let a = kl_cost_matrix(&class.view(), &cluster.view()).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let pc = Array2::from_shape_fn((6, 2), |(i, j)| class[[perm[i], j]]);
        let pq = Array2::from_shape_fn((6, 3), |(i, j)| cluster[[perm[i], j]]);
        let b = kl_cost_matrix(&pc.view(), &pq.view()).unwrap();
        let diff = crate::linalg::max_abs_diff(&a.matrix().view(), &b.matrix().view());
        assert!(diff < 1e-12);
    }

    #[test]
    fn kl_cost_errors() {
        let empty = Array2::zeros((0, 2));
        assert!(kl_cost_matrix(&empty.view(), &empty.view()).is_err());
        let class = array![[0.0, 1.0], [0.0, 0.0]];
        let cluster = array![[0.5, 0.5], [0.5, 0.5]];
        assert!(kl_cost_matrix(&class.view(), &cluster.view()).is_err());
    }

    #[test]
    fn pseudo_label_mapping_rules() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        let m = linear_sum_assignment(&cost.view()).unwrap();
        let labels = map_pseudo_labels(&m, &[0, 1, 0], true);
        assert_eq!(labels, vec![Some(0), Some(1), Some(0)]);

        // K=4, N=2: unmapped clusters go to unknown id 2 in open-set,
        // dropped in close-set
        let cost = array![[0.0, 9.0], [9.0, 0.0], [5.0, 5.0], [5.0, 5.0]];
        let m = linear_sum_assignment(&cost.view()).unwrap();
        assert_eq!(map_pseudo_labels(&m, &[2, 3], true), vec![Some(2), Some(2)]);
        assert_eq!(map_pseudo_labels(&m, &[2, 3], false), vec![None, None]);
        assert_eq!(map_pseudo_labels(&m, &[0], false), vec![Some(0)]);
    }
}
