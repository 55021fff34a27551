//! Graph data model, adjacency normalization, on-disk formats, and
//! shift-scenario construction.

mod io;
mod scenario;
mod sbm;

pub use io::{load_graph, load_graph_with_report, load_times, save_graph, LoadReport};
pub use scenario::{
    make_openset_split, make_temporal_split, ShiftKind, ShiftScenario,
};
pub use sbm::{sbm_graph, synth_sbm_shift, SbmShiftConfig};

use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg::Csr;

/// Immutable sparse undirected graph with node features and integer
/// labels (−1 for unlabeled).
#[derive(Debug, Clone)]
pub struct Graph {
    num_nodes: usize,
    num_edges: usize,
    adjacency: Arc<Csr>,
    features: Array2<f64>,
    labels: Vec<i64>,
    degrees: Vec<usize>,
    num_classes: usize,
    name: String,
}

impl Graph {
    /// Build from a deduplicated undirected edge list. Edges must have no
    /// self-loops and each unordered pair must appear once.
    pub fn new(
        edges: &[(u32, u32)],
        features: Array2<f64>,
        labels: Vec<i64>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let num_nodes = features.nrows();
        if labels.len() != num_nodes {
            return Err(Error::data(format!(
                "labels length {} vs {} nodes",
                labels.len(),
                num_nodes
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes as i64 || l < -1 {
                return Err(Error::data(format!(
                    "node {i} has label {l}, declared class count {num_classes}"
                )));
            }
        }
        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            if u == v {
                return Err(Error::data(format!("self-loop at node {u}")));
            }
            if u as usize >= num_nodes || v as usize >= num_nodes {
                return Err(Error::data(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            triplets.push((u, v, 1.0));
            triplets.push((v, u, 1.0));
        }
        let adjacency = Csr::from_triplets(num_nodes, num_nodes, triplets)?;
        let degrees: Vec<usize> = (0..num_nodes).map(|i| adjacency.row_nnz(i)).collect();
        debug_assert_eq!(degrees.iter().sum::<usize>(), 2 * edges.len());
        Ok(Graph {
            num_nodes,
            num_edges: edges.len(),
            adjacency: Arc::new(adjacency),
            features,
            labels,
            degrees,
            num_classes,
            name: name.into(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Count of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// Symmetric 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> &Arc<Csr> {
        &self.adjacency
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Degrees as `f64`, the `d` vector of the modularity null model.
    pub fn degrees_f64(&self) -> Vec<f64> {
        self.degrees.iter().map(|&d| d as f64).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Sorted ids of nodes with label ≥ 0.
    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes)
            .filter(|&i| self.labels[i] >= 0)
            .collect()
    }

    /// Undirected edge list, each pair once with `u < v`.
    pub fn edge_list(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.num_edges);
        for i in 0..self.num_nodes {
            for (j, _) in self.adjacency.row(i) {
                if i < j {
                    out.push((i as u32, j as u32));
                }
            }
        }
        out
    }

    /// Induced subgraph on `keep` (sorted original ids). Returns the graph
    /// and the new→original id table.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<(Graph, Vec<usize>)> {
        let mut old_to_new = vec![usize::MAX; self.num_nodes];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.num_nodes {
                return Err(Error::data(format!("induced_subgraph: node {old} out of range")));
            }
            old_to_new[old] = new;
        }
        let mut edges = Vec::new();
        for (new_u, &old_u) in keep.iter().enumerate() {
            for (old_v, _) in self.adjacency.row(old_u) {
                let new_v = old_to_new[old_v];
                if new_v != usize::MAX && new_u < new_v {
                    edges.push((new_u as u32, new_v as u32));
                }
            }
        }
        let mut features = Array2::zeros((keep.len(), self.features.ncols()));
        for (new, &old) in keep.iter().enumerate() {
            features.row_mut(new).assign(&self.features.row(old));
        }
        let labels: Vec<i64> = keep.iter().map(|&old| self.labels[old]).collect();
        let g = Graph::new(&edges, features, labels, self.num_classes, self.name.clone())?;
        Ok((g, keep.to_vec()))
    }
}

/// The symmetric propagation operator `D̃^(−1/2) (A + I) D̃^(−1/2)` where
/// `D̃` is the degree matrix of `A + I`.
#[derive(Debug, Clone)]
pub struct NormalizedOperator {
    matrix: Arc<Csr>,
}

impl NormalizedOperator {
    pub fn matrix(&self) -> &Arc<Csr> {
        &self.matrix
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.rows()
    }
}

/// Builds the self-loop-augmented symmetric normalization of the
/// adjacency. Isolated nodes get a pure self-loop entry of 1.
pub fn normalize_adjacency(g: &Graph) -> NormalizedOperator {
    let n = g.num_nodes();
    let dt: Vec<f64> = g.degrees.iter().map(|&d| d as f64 + 1.0).collect();
    let mut triplets = Vec::with_capacity(g.adjacency.nnz() + n);
    for i in 0..n {
        triplets.push((i as u32, i as u32, 1.0 / dt[i]));
        for (j, _) in g.adjacency.row(i) {
            triplets.push((i as u32, j as u32, 1.0 / (dt[i] * dt[j]).sqrt()));
        }
    }
    let matrix = Csr::from_triplets(n, n, triplets).expect("valid adjacency pattern");
    NormalizedOperator {
        matrix: Arc::new(matrix),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn toy(edges: &[(u32, u32)], n: usize) -> Graph {
        let features = Array2::zeros((n, 2));
        let labels = vec![0i64; n];
        Graph::new(edges, features, labels, 1, "toy").unwrap()
    }

    #[test]
    fn smallest_graph() {
        let g = toy(&[(0, 1)], 2);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.degrees(), &[1, 1]);
    }

    #[test]
    fn degree_sum_is_twice_edges() {
        let g = toy(&[(0, 1), (1, 2), (0, 2), (2, 3)], 4);
        assert_eq!(g.degrees().iter().sum::<usize>(), 2 * g.num_edges());
        assert!(g.adjacency().is_symmetric());
    }

    #[test]
    fn self_loop_rejected() {
        let features = Array2::zeros((2, 1));
        assert!(Graph::new(&[(1, 1)], features, vec![0, 0], 1, "x").is_err());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let features = Array2::zeros((2, 1));
        assert!(Graph::new(&[(0, 1)], features, vec![0, 3], 2, "x").is_err());
    }

    #[test]
    fn normalize_isolated_node() {
        let g = toy(&[], 1);
        let op = normalize_adjacency(&g);
        assert_eq!(op.matrix().to_dense(), array![[1.0]]);
    }

    #[test]
    fn normalize_single_edge() {
        let g = toy(&[(0, 1)], 2);
        let op = normalize_adjacency(&g);
        assert_eq!(op.matrix().to_dense(), array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn normalize_triangle_all_thirds() {
        let g = toy(&[(0, 1), (1, 2), (0, 2)], 3);
        let op = normalize_adjacency(&g);
        let dense = op.matrix().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert!((dense[[i, j]] - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normalize_matches_dense_reference() {
        use rand::Rng;
        let mut rng = crate::linalg::seeded_stream(41, 0);
        for _ in 0..10 {
            let n = rng.random_range(2..50);
            let mut edges = Vec::new();
            for i in 0..n as u32 {
                for j in (i + 1)..n as u32 {
                    if rng.random_range(0.0..1.0) < 0.2 {
                        edges.push((i, j));
                    }
                }
            }
            let g = toy(&edges, n);
            let op = normalize_adjacency(&g);
            // dense reference: D̃^(−1/2)(A+I)D̃^(−1/2)
            let mut a = g.adjacency().to_dense();
            for i in 0..n {
                a[[i, i]] += 1.0;
            }
            let dt: Vec<f64> = (0..n).map(|i| (g.degrees()[i] as f64 + 1.0).sqrt()).collect();
            let mut reference = a;
            for i in 0..n {
                for j in 0..n {
                    reference[[i, j]] /= dt[i] * dt[j];
                }
            }
            let diff =
                crate::linalg::max_abs_diff(&op.matrix().to_dense().view(), &reference.view());
            assert!(diff < 1e-12);
            // entries in (0, 1], rows have at least the diagonal
            for i in 0..n {
                assert!(op.matrix().row_nnz(i) >= 1);
            }
            for i in 0..n {
                for (_, v) in op.matrix().row(i) {
                    assert!(v > 0.0 && v <= 1.0);
                }
            }
        }
    }

    #[test]
    fn induced_subgraph_chain() {
        let g = toy(&[(0, 1), (1, 2)], 3);
        let (sub, map) = g.induced_subgraph(&[0, 1]).unwrap();
        assert_eq!(sub.num_nodes(), 2);
        assert_eq!(sub.num_edges(), 1);
        assert_eq!(map, vec![0, 1]);
    }
}
