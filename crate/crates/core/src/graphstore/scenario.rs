//! Shift scenarios: which graph is trained on, which is tested on, and
//! how labels are remapped when classes are hidden.
//!
//! Open-set scenarios share one graph between source and target; the
//! hidden classes are relabeled to a synthetic unknown class (id `N`,
//! where `N` is the count of known classes) on validation and test nodes.
//! Close-set scenarios keep the label space intact but may use different
//! source/target graphs (temporal snapshots, synthetic drift); train and
//! validation ids index the source graph, test ids index the target graph.

use std::sync::Arc;

use rand::seq::index::sample as index_sample;

use super::Graph;
use crate::error::{Error, Result};
use crate::linalg::seeded_stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    OpenSet,
    CloseSet,
}

#[derive(Debug, Clone)]
pub struct ShiftScenario {
    kind: ShiftKind,
    source: Arc<Graph>,
    target: Arc<Graph>,
    train_nodes: Vec<usize>,
    val_nodes: Vec<usize>,
    test_nodes: Vec<usize>,
    known_classes: Vec<usize>,
    hidden_classes: Vec<usize>,
    /// new id → original id, when the source graph was remapped.
    source_node_map: Option<Vec<usize>>,
    /// new id → original id, when the target graph was remapped.
    target_node_map: Option<Vec<usize>>,
    /// original class id → compact known-class index.
    class_remap: Vec<Option<usize>>,
}

impl ShiftScenario {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn build(
        kind: ShiftKind,
        source: Arc<Graph>,
        target: Arc<Graph>,
        train_nodes: Vec<usize>,
        val_nodes: Vec<usize>,
        test_nodes: Vec<usize>,
        known_classes: Vec<usize>,
        hidden_classes: Vec<usize>,
        source_node_map: Option<Vec<usize>>,
        target_node_map: Option<Vec<usize>>,
    ) -> Self {
        let mut class_remap = vec![None; source.num_classes()];
        for (idx, &c) in known_classes.iter().enumerate() {
            class_remap[c] = Some(idx);
        }
        ShiftScenario {
            kind,
            source,
            target,
            train_nodes,
            val_nodes,
            test_nodes,
            known_classes,
            hidden_classes,
            source_node_map,
            target_node_map,
            class_remap,
        }
    }

    pub fn kind(&self) -> ShiftKind {
        self.kind
    }

    pub fn source(&self) -> &Arc<Graph> {
        &self.source
    }

    pub fn target(&self) -> &Arc<Graph> {
        &self.target
    }

    /// Train node ids (source graph numbering).
    pub fn train_nodes(&self) -> &[usize] {
        &self.train_nodes
    }

    /// Validation node ids (source graph numbering).
    pub fn val_nodes(&self) -> &[usize] {
        &self.val_nodes
    }

    /// Test node ids (target graph numbering).
    pub fn test_nodes(&self) -> &[usize] {
        &self.test_nodes
    }

    /// Original class ids visible at train time, ascending.
    pub fn known_classes(&self) -> &[usize] {
        &self.known_classes
    }

    pub fn hidden_classes(&self) -> &[usize] {
        &self.hidden_classes
    }

    /// Count of known classes N.
    pub fn num_known(&self) -> usize {
        self.known_classes.len()
    }

    /// The synthetic unknown class index (0-based = N).
    pub fn unknown_class_id(&self) -> usize {
        self.known_classes.len()
    }

    /// Output width of the classifier: N+1 open-set, N close-set.
    pub fn classifier_width(&self) -> usize {
        match self.kind {
            ShiftKind::OpenSet => self.num_known() + 1,
            ShiftKind::CloseSet => self.num_known(),
        }
    }

    pub fn source_node_map(&self) -> Option<&[usize]> {
        self.source_node_map.as_deref()
    }

    pub fn target_node_map(&self) -> Option<&[usize]> {
        self.target_node_map.as_deref()
    }

    /// Remaps an original label to the evaluation space: known classes to
    /// their compact index, hidden classes to the unknown id, unlabeled to
    /// `None`. Idempotent on already-known indices only through original
    /// ids; callers always pass original labels.
    pub fn eval_label(&self, original: i64) -> Option<usize> {
        if original < 0 {
            return None;
        }
        match self.class_remap.get(original as usize) {
            Some(Some(idx)) => Some(*idx),
            Some(None) => Some(self.unknown_class_id()),
            None => Some(self.unknown_class_id()),
        }
    }

    /// Compact train label of a source node; the node must carry a known
    /// class.
    pub fn train_label(&self, node: usize) -> usize {
        let l = self.source.labels()[node];
        debug_assert!(l >= 0);
        self.class_remap[l as usize].expect("train nodes carry known classes")
    }

    /// Evaluation labels for the validation set (source graph).
    pub fn val_labels(&self) -> Vec<usize> {
        self.val_nodes
            .iter()
            .map(|&i| self.eval_label(self.source.labels()[i]).expect("val nodes are labeled"))
            .collect()
    }

    /// Evaluation labels for the test set (target graph).
    pub fn test_labels(&self) -> Vec<usize> {
        self.test_nodes
            .iter()
            .map(|&i| self.eval_label(self.target.labels()[i]).expect("test nodes are labeled"))
            .collect()
    }

    /// Count of evaluation classes: N+1 when hidden classes exist, N
    /// otherwise.
    pub fn num_eval_classes(&self) -> usize {
        if self.hidden_classes.is_empty() {
            self.num_known()
        } else {
            self.num_known() + 1
        }
    }
}

/// Semi-supervised open-set split: `per_class_train` uniform samples per
/// known class, a validation fraction of the remaining labeled nodes
/// (which naturally includes hidden-class nodes), the rest as test.
pub fn make_openset_split(
    g: &Arc<Graph>,
    hidden_classes: &[usize],
    per_class_train: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<ShiftScenario> {
    let nc = g.num_classes();
    let mut hidden: Vec<usize> = hidden_classes.to_vec();
    hidden.sort_unstable();
    hidden.dedup();
    if hidden.iter().any(|&c| c >= nc) {
        return Err(Error::config(format!(
            "hidden class out of range (declared {nc} classes)"
        )));
    }
    if hidden.len() >= nc {
        return Err(Error::config("cannot hide the entire label space".to_string()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config("val_fraction must be in [0, 1)".to_string()));
    }
    let known: Vec<usize> = (0..nc).filter(|c| !hidden.contains(c)).collect();

    let mut rng = seeded_stream(seed, 0);
    let mut train = Vec::with_capacity(known.len() * per_class_train);
    let mut in_train = vec![false; g.num_nodes()];
    for &class in &known {
        let pool: Vec<usize> = (0..g.num_nodes())
            .filter(|&i| g.labels()[i] == class as i64)
            .collect();
        if pool.len() < per_class_train {
            return Err(Error::data(format!(
                "class {class} has {} labeled nodes, need {per_class_train}",
                pool.len()
            )));
        }
        for idx in index_sample(&mut rng, pool.len(), per_class_train) {
            train.push(pool[idx]);
            in_train[pool[idx]] = true;
        }
    }
    train.sort_unstable();

    let remaining: Vec<usize> = g
        .labeled_nodes()
        .into_iter()
        .filter(|&i| !in_train[i])
        .collect();
    let val_count = (val_fraction * remaining.len() as f64).round() as usize;
    let mut val: Vec<usize> = index_sample(&mut rng, remaining.len(), val_count)
        .into_iter()
        .map(|k| remaining[k])
        .collect();
    val.sort_unstable();
    let mut in_val = vec![false; g.num_nodes()];
    for &i in &val {
        in_val[i] = true;
    }
    let test: Vec<usize> = remaining.into_iter().filter(|&i| !in_val[i]).collect();

    Ok(ShiftScenario::build(
        ShiftKind::OpenSet,
        Arc::clone(g),
        Arc::clone(g),
        train,
        val,
        test,
        known,
        hidden,
        None,
        None,
    ))
}

/// Temporal close-set split. The source graph is induced on nodes with
/// time ≤ `val_cutoff`; the target graph on time ≤ `window.1`. Train
/// nodes have time ≤ `train_cutoff`, validation in `(train_cutoff,
/// val_cutoff]`, test in `(window.0, window.1]`. Validation and test may
/// be empty; an empty train set is an error.
pub fn make_temporal_split(
    g: &Arc<Graph>,
    node_times: &[i64],
    train_cutoff: i64,
    val_cutoff: i64,
    window: (i64, i64),
) -> Result<ShiftScenario> {
    if node_times.len() != g.num_nodes() {
        return Err(Error::data(format!(
            "times for {} nodes, graph has {}",
            node_times.len(),
            g.num_nodes()
        )));
    }
    if train_cutoff > val_cutoff || val_cutoff > window.0 || window.0 > window.1 {
        return Err(Error::config(format!(
            "cutoffs must be non-decreasing: train {train_cutoff} ≤ val {val_cutoff} ≤ window.lo {} ≤ window.hi {}",
            window.0, window.1
        )));
    }

    let source_keep: Vec<usize> = (0..g.num_nodes())
        .filter(|&i| node_times[i] <= val_cutoff)
        .collect();
    let target_keep: Vec<usize> = (0..g.num_nodes())
        .filter(|&i| node_times[i] <= window.1)
        .collect();
    if source_keep.is_empty() || target_keep.is_empty() {
        return Err(Error::data("empty split: no nodes within cutoffs".to_string()));
    }
    let (source, source_map) = g.induced_subgraph(&source_keep)?;
    let (target, target_map) = g.induced_subgraph(&target_keep)?;

    let train: Vec<usize> = source_map
        .iter()
        .enumerate()
        .filter(|&(_, &old)| node_times[old] <= train_cutoff && g.labels()[old] >= 0)
        .map(|(new, _)| new)
        .collect();
    let val: Vec<usize> = source_map
        .iter()
        .enumerate()
        .filter(|&(_, &old)| {
            node_times[old] > train_cutoff && node_times[old] <= val_cutoff && g.labels()[old] >= 0
        })
        .map(|(new, _)| new)
        .collect();
    let test: Vec<usize> = target_map
        .iter()
        .enumerate()
        .filter(|&(_, &old)| {
            node_times[old] > window.0 && node_times[old] <= window.1 && g.labels()[old] >= 0
        })
        .map(|(new, _)| new)
        .collect();
    if train.is_empty() {
        return Err(Error::data("empty split: no labeled train nodes".to_string()));
    }

    let known: Vec<usize> = (0..g.num_classes()).collect();
    Ok(ShiftScenario::build(
        ShiftKind::CloseSet,
        Arc::new(source),
        Arc::new(target),
        train,
        val,
        test,
        known,
        Vec::new(),
        Some(source_map),
        Some(target_map),
    ))
}
