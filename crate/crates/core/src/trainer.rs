//! The joint optimization loop: pretrain both GNNs, then alternate
//! cluster updates (modularity plus a KL pull toward the labeled source
//! distribution) with classifier refits on pseudo-labeled samples, until
//! validation micro-F1 stops improving.
//!
//! Episode structure per round:
//! 1. recompute the cluster→class alignment on the labeled source nodes;
//! 2. T optimizer steps on the cluster model: full-graph soft-modularity
//!    loss on the target plus, for a fresh batch of B source nodes each
//!    step, KL(routed source distribution ‖ cluster softmax rows);
//! 3. draw |train| target nodes, pseudo-label them through the cluster
//!    model and the alignment (and, when `alpha` = 1, the same count of
//!    non-train source nodes), then refit the classifier to plateau on
//!    train ∪ pseudo sets;
//! 4. evaluate validation micro-F1 and keep the best-validation snapshot.
//!
//! Every random choice draws from a ChaCha stream derived from
//! `(seed, purpose)`, so a run is bitwise reproducible and a
//! `max_episodes = 1` run is exactly the prefix of a longer run.

use std::sync::Arc;

use ndarray::Array2;
use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{kl_cost_matrix, linear_sum_assignment, map_pseudo_labels, ClusterClassMapping};
use crate::autodiff::{Tape, Value, LOG_EPS};
use crate::clustering::{modularity_loss, ModularityForm};
use crate::error::{Error, Result};
use crate::evalbench::micro_f1;
use crate::gnn::{
    adam_step, gcn_forward, grads_from_tape, init_params_with_rng, params_on_tape, AdamState,
    Dropout, GcnParams, ModelConfig,
};
use crate::graphstore::{normalize_adjacency, NormalizedOperator, ShiftKind, ShiftScenario};
use crate::linalg::{seeded_stream, Csr};

/// Inner-loop hyperparameters fixed by the optimization contract.
const PRETRAIN_VAL_PATIENCE: usize = 20;
const REFIT_MAX_EPOCHS: usize = 300;
const REFIT_PLATEAU_TOL: f64 = 1e-4;
const MONOTONE_SLACK: f64 = 1e-6;
/// Confidence grid searched by the no-cluster ablation in open-set mode.
pub const WO_PHI_TAU_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

// RNG stream indices derived from the run seed.
const STREAM_CLASSIFIER_INIT: u64 = 1;
const STREAM_CLUSTER_INIT: u64 = 2;
const STREAM_CLASSIFIER_DROPOUT: u64 = 3;
const STREAM_CLUSTER_DROPOUT: u64 = 4;
const fn episode_stream(episode: usize, purpose: u64) -> u64 {
    100 + episode as u64 * 10 + purpose
}
const EP_CLUSTER_BATCHES: u64 = 0;
const EP_TARGET_PSEUDO: u64 = 1;
const EP_SOURCE_PSEUDO: u64 = 2;
const EP_REFIT_DROPOUT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMode {
    /// Draw the cluster from the categorical softmax row.
    #[default]
    Sample,
    /// Take the argmax cluster.
    Argmax,
}

/// Everything one optimization run needs to know.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Cluster count C; `None` resolves to 16 in open-set mode and to the
    /// known-class count in close-set mode.
    pub num_clusters: Option<usize>,
    /// 1 = semi-supervised (adds the source-side pseudo term), 0 = fully
    /// supervised source.
    pub alpha: f64,
    /// Cluster-model steps per episode (T).
    pub steps_per_episode: usize,
    /// Source nodes per cluster step (B).
    pub batch: usize,
    pub max_episodes: usize,
    /// Episodes without validation improvement before stopping.
    pub patience: usize,
    pub pretrain_epochs_classifier: usize,
    pub pretrain_epochs_cluster: usize,
    pub pseudo_label_mode: PseudoLabelMode,
    pub seed: u64,
    pub modularity_form: ModularityForm,
    /// Optional anti-collapse penalty weight on the cluster loss.
    pub collapse_weight: f64,
    /// Weight of the adversarial KL term in the cluster loss; 0 ablates it.
    pub cluster_kl_weight: f64,
    /// Compute the alignment only once, at the first episode.
    pub align_once: bool,
    /// Retain per-episode parameter snapshots in the run outcome.
    pub record_snapshots: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            num_clusters: None,
            alpha: 1.0,
            steps_per_episode: 20,
            batch: 64,
            max_episodes: 10,
            patience: 1,
            pretrain_epochs_classifier: 400,
            pretrain_epochs_cluster: 300,
            pseudo_label_mode: PseudoLabelMode::Sample,
            seed: 0,
            modularity_form: ModularityForm::Consistent,
            collapse_weight: 0.0,
            cluster_kl_weight: 1.0,
            align_once: false,
            record_snapshots: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, scenario: &ShiftScenario) -> Result<()> {
        self.model.validate()?;
        let c = self.resolve_clusters(scenario);
        if c < scenario.num_known() {
            return Err(Error::config(format!(
                "num_clusters {c} < {} known classes",
                scenario.num_known()
            )));
        }
        if self.steps_per_episode == 0 || self.batch == 0 {
            return Err(Error::config("steps_per_episode and batch must be ≥ 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha must be in [0, 1]".to_string()));
        }
        Ok(())
    }

    /// C: configured, or 16 open-set / N close-set.
    pub fn resolve_clusters(&self, scenario: &ShiftScenario) -> usize {
        self.num_clusters.unwrap_or(match scenario.kind() {
            ShiftKind::OpenSet => 16,
            ShiftKind::CloseSet => scenario.num_known(),
        })
    }
}

/// One row of the optimization log; episode 0 is pretraining.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    /// L_θ,S — classifier cross-entropy on train nodes (final inner epoch).
    pub loss_classifier_source: Option<f64>,
    /// L_θ,Φ,T — cross-entropy on target pseudo-labels.
    pub loss_classifier_target_pseudo: Option<f64>,
    /// L_θ,Φ,S — cross-entropy on source pseudo-labels (alpha-weighted term).
    pub loss_classifier_source_pseudo: Option<f64>,
    /// L_Φ,T — soft-modularity loss at the last cluster step.
    pub loss_cluster_modularity: Option<f64>,
    /// L_Φ,θ,S — adversarial KL at the last cluster step.
    pub loss_cluster_adversarial: Option<f64>,
    pub val_micro_f1: f64,
    /// Monte-Carlo surrogate of the source ELBO (logged, not gated on).
    pub source_elbo: Option<f64>,
    pub mapping: Option<serde_json::Value>,
    pub classifier_epochs: usize,
}

/// Result of a full optimization run: best-validation parameters, logs,
/// and optionally per-episode snapshots (index = episode).
pub struct TrainOutcome {
    pub theta: GcnParams,
    pub phi: GcnParams,
    pub logs: Vec<EpisodeLog>,
    pub best_episode: usize,
    pub snapshots: Option<Vec<(GcnParams, GcnParams)>>,
}

/// Scenario tensors shared by every forward pass of a run: normalized
/// operators and CSR feature operands for source and target graphs.
pub struct Prepared {
    scenario: ShiftScenario,
    src_op: NormalizedOperator,
    tgt_op: NormalizedOperator,
    src_feat: Arc<Csr>,
    tgt_feat: Arc<Csr>,
    same_graph: bool,
    train_ids: Arc<Vec<usize>>,
    train_targets: Arc<Array2<f64>>,
}

impl Prepared {
    pub fn new(scenario: &ShiftScenario) -> Prepared {
        let same_graph = Arc::ptr_eq(scenario.source(), scenario.target());
        let src_op = normalize_adjacency(scenario.source());
        let tgt_op = if same_graph {
            src_op.clone()
        } else {
            normalize_adjacency(scenario.target())
        };
        let src_feat = Arc::new(Csr::from_dense(&scenario.source().features().view()));
        let tgt_feat = if same_graph {
            Arc::clone(&src_feat)
        } else {
            Arc::new(Csr::from_dense(&scenario.target().features().view()))
        };
        let width = scenario.classifier_width();
        let train_ids = Arc::new(scenario.train_nodes().to_vec());
        let mut train_targets = Array2::zeros((train_ids.len(), width));
        for (row, &node) in train_ids.iter().enumerate() {
            train_targets[[row, scenario.train_label(node)]] = 1.0;
        }
        Prepared {
            scenario: scenario.clone(),
            src_op,
            tgt_op,
            src_feat,
            tgt_feat,
            same_graph,
            train_ids,
            train_targets: Arc::new(train_targets),
        }
    }

    pub fn scenario(&self) -> &ShiftScenario {
        &self.scenario
    }

    fn assert_width(&self, params: &GcnParams) {
        assert_eq!(
            params.out_dim(),
            self.scenario.classifier_width(),
            "classifier width must be N+1 open-set / N close-set"
        );
    }

    /// Classifier probabilities on the source graph.
    pub fn source_probs(&self, theta: &GcnParams) -> Result<Array2<f64>> {
        self.assert_width(theta);
        let (_, p) = crate::gnn::gcn_infer(theta, &self.src_op, &self.src_feat)?;
        Ok(p)
    }

    /// Classifier probabilities on the target graph.
    pub fn target_probs(&self, theta: &GcnParams) -> Result<Array2<f64>> {
        self.assert_width(theta);
        let (_, p) = crate::gnn::gcn_infer(theta, &self.tgt_op, &self.tgt_feat)?;
        Ok(p)
    }

    /// Cluster softmax rows on the source graph.
    pub fn cluster_source_probs(&self, phi: &GcnParams) -> Result<Array2<f64>> {
        let (_, p) = crate::gnn::gcn_infer(phi, &self.src_op, &self.src_feat)?;
        Ok(p)
    }

    /// Cluster softmax rows on the target graph.
    pub fn cluster_target_probs(&self, phi: &GcnParams) -> Result<Array2<f64>> {
        let (_, p) = crate::gnn::gcn_infer(phi, &self.tgt_op, &self.tgt_feat)?;
        Ok(p)
    }

    /// Hidden-layer embedding of the target graph.
    pub fn target_hidden(&self, params: &GcnParams) -> Result<Array2<f64>> {
        let (h, _) = crate::gnn::gcn_infer(params, &self.tgt_op, &self.tgt_feat)?;
        Ok(h)
    }

    pub fn val_micro_f1(&self, theta: &GcnParams) -> Result<f64> {
        if self.scenario.val_nodes().is_empty() {
            return Ok(0.0);
        }
        let probs = self.source_probs(theta)?;
        let pred: Vec<usize> = self
            .scenario
            .val_nodes()
            .iter()
            .map(|&i| argmax_row(&probs, i))
            .collect();
        micro_f1(&pred, &self.scenario.val_labels())
    }

    /// Argmax predictions on the test nodes (target graph).
    pub fn test_predictions(&self, theta: &GcnParams) -> Result<Vec<usize>> {
        let probs = self.target_probs(theta)?;
        Ok(self
            .scenario
            .test_nodes()
            .iter()
            .map(|&i| argmax_row(&probs, i))
            .collect())
    }

    pub fn test_micro_f1(&self, theta: &GcnParams) -> Result<f64> {
        micro_f1(&self.test_predictions(theta)?, &self.scenario.test_labels())
    }
}

fn argmax_row(m: &Array2<f64>, row: usize) -> usize {
    let r = m.row(row);
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (c, &v) in r.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

/// Outcome of classifier pretraining: best-validation parameters and the
/// training curves.
pub struct PretrainClassifierOutcome {
    pub params: GcnParams,
    pub loss_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    pub best_val_f1: f64,
    pub epochs: usize,
}

/// Full-batch cross-entropy pretraining on the train nodes with early
/// stopping on validation micro-F1 (patience 20, bounded by
/// `pretrain_epochs_classifier`). Returns the best-validation snapshot.
pub fn pretrain_classifier(
    scenario: &ShiftScenario,
    cfg: &TrainConfig,
) -> Result<PretrainClassifierOutcome> {
    let prepared = Prepared::new(scenario);
    pretrain_classifier_prepared(&prepared, cfg)
}

pub fn pretrain_classifier_prepared(
    prepared: &Prepared,
    cfg: &TrainConfig,
) -> Result<PretrainClassifierOutcome> {
    let scenario = &prepared.scenario;
    cfg.validate(scenario)?;
    if scenario.train_nodes().is_empty() {
        return Err(Error::data("pretrain_classifier: no training nodes".to_string()));
    }
    let width = scenario.classifier_width();
    let mut init_rng = seeded_stream(cfg.seed, STREAM_CLASSIFIER_INIT);
    let mut params = init_params_with_rng(
        &cfg.model,
        scenario.source().feature_dim(),
        width,
        &mut init_rng,
    )?;
    let mut adam = AdamState::new(&params);
    let mut dropout_rng = seeded_stream(cfg.seed, STREAM_CLASSIFIER_DROPOUT);

    let mut best_params = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut bad_epochs = 0usize;
    let mut loss_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut epochs = 0usize;
    for _ in 1..=cfg.pretrain_epochs_classifier {
        epochs += 1;
        let mut tape = Tape::new();
        let values = params_on_tape(&mut tape, &params, true);
        let (_, probs) = gcn_forward(
            &mut tape,
            &values,
            &prepared.src_op,
            &prepared.src_feat,
            dropout_arg(cfg, &mut dropout_rng),
        )?;
        let sel = tape.select_rows(probs, Arc::clone(&prepared.train_ids))?;
        let loss = tape.cross_entropy_rows(sel, Arc::clone(&prepared.train_targets))?;
        let loss_v = tape.data(loss)[[0, 0]];
        if !loss_v.is_finite() {
            return Err(Error::divergence(format!("pretrain loss {loss_v}")));
        }
        loss_curve.push(loss_v);
        tape.backward(loss)?;
        let grads = grads_from_tape(&tape, &values);
        adam_step(&mut params, &grads, &mut adam, &cfg.model)?;

        let val = prepared.val_micro_f1(&params)?;
        val_curve.push(val);
        if val > best_val {
            best_val = val;
            best_params = params.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= PRETRAIN_VAL_PATIENCE {
                break;
            }
        }
    }
    Ok(PretrainClassifierOutcome {
        params: best_params,
        loss_curve,
        val_curve,
        best_val_f1: best_val.max(0.0),
        epochs,
    })
}

fn dropout_arg<'a, R: Rng>(cfg: &TrainConfig, rng: &'a mut R) -> Option<Dropout<'a, R>> {
    if cfg.model.dropout_rate > 0.0 {
        Some(Dropout {
            rate: cfg.model.dropout_rate,
            rng,
        })
    } else {
        None
    }
}

/// Outcome of cluster pretraining; the Adam state carries over into the
/// episode updates.
pub struct PretrainClusterOutcome {
    pub params: GcnParams,
    pub adam: AdamState,
    pub loss_curve: Vec<f64>,
}

/// Minimizes the soft-modularity loss on the target graph for a fixed
/// number of full-batch epochs.
pub fn pretrain_cluster(prepared: &Prepared, cfg: &TrainConfig) -> Result<PretrainClusterOutcome> {
    let scenario = &prepared.scenario;
    cfg.validate(scenario)?;
    if scenario.target().num_nodes() == 0 {
        return Err(Error::data("pretrain_cluster: empty target graph".to_string()));
    }
    let c = cfg.resolve_clusters(scenario);
    let mut init_rng = seeded_stream(cfg.seed, STREAM_CLUSTER_INIT);
    let mut params = init_params_with_rng(
        &cfg.model,
        scenario.target().feature_dim(),
        c,
        &mut init_rng,
    )?;
    let mut adam = AdamState::new(&params);
    let mut dropout_rng = seeded_stream(cfg.seed, STREAM_CLUSTER_DROPOUT);
    let mut loss_curve = Vec::new();
    for _ in 0..cfg.pretrain_epochs_cluster {
        let mut tape = Tape::new();
        let values = params_on_tape(&mut tape, &params, true);
        let (_, probs) = gcn_forward(
            &mut tape,
            &values,
            &prepared.tgt_op,
            &prepared.tgt_feat,
            dropout_arg(cfg, &mut dropout_rng),
        )?;
        let loss = modularity_loss(
            &mut tape,
            prepared.scenario.target(),
            probs,
            cfg.modularity_form,
            cfg.collapse_weight,
        )?;
        let loss_v = tape.data(loss)[[0, 0]];
        if !loss_v.is_finite() {
            return Err(Error::divergence(format!("cluster pretrain loss {loss_v}")));
        }
        loss_curve.push(loss_v);
        tape.backward(loss)?;
        let grads = grads_from_tape(&tape, &values);
        adam_step(&mut params, &grads, &mut adam, &cfg.model)?;
    }
    Ok(PretrainClusterOutcome {
        params,
        adam,
        loss_curve,
    })
}

/// Alignment on the labeled source nodes: one-hot ground-truth class
/// columns against cluster softmax columns.
pub fn compute_alignment(
    prepared: &Prepared,
    phi: &GcnParams,
) -> Result<ClusterClassMapping> {
    let scenario = &prepared.scenario;
    let n = scenario.num_known();
    let train = scenario.train_nodes();
    let mut class_probs = Array2::zeros((train.len(), n));
    for (row, &node) in train.iter().enumerate() {
        class_probs[[row, scenario.train_label(node)]] = 1.0;
    }
    let cluster_all = prepared.cluster_source_probs(phi)?;
    let mut cluster_probs = Array2::zeros((train.len(), cluster_all.ncols()));
    for (row, &node) in train.iter().enumerate() {
        cluster_probs.row_mut(row).assign(&cluster_all.row(node));
    }
    let cost = kl_cost_matrix(&class_probs.view(), &cluster_probs.view())?;
    linear_sum_assignment(&cost.matrix().view())
}

fn draw_cluster(row: ndarray::ArrayView1<'_, f64>, mode: PseudoLabelMode, rng: &mut impl Rng) -> usize {
    match mode {
        PseudoLabelMode::Argmax => {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best
        }
        PseudoLabelMode::Sample => {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            for (c, &v) in row.iter().enumerate() {
                acc += v;
                if u < acc {
                    return c;
                }
            }
            row.len() - 1
        }
    }
}

/// Nodes of the target graph eligible for pseudo-labeling: everything
/// except nodes that are source train nodes (identified through the
/// original-id maps when the graphs differ).
fn target_pool(scenario: &ShiftScenario) -> Vec<usize> {
    if Arc::ptr_eq(scenario.source(), scenario.target()) {
        let mut in_train = vec![false; scenario.target().num_nodes()];
        for &t in scenario.train_nodes() {
            in_train[t] = true;
        }
        (0..scenario.target().num_nodes())
            .filter(|&i| !in_train[i])
            .collect()
    } else if let (Some(smap), Some(tmap)) = (scenario.source_node_map(), scenario.target_node_map())
    {
        let train_orig: std::collections::BTreeSet<usize> =
            scenario.train_nodes().iter().map(|&i| smap[i]).collect();
        (0..scenario.target().num_nodes())
            .filter(|&i| !train_orig.contains(&tmap[i]))
            .collect()
    } else {
        (0..scenario.target().num_nodes()).collect()
    }
}

/// Draws `|train|` target nodes and pseudo-labels them through the
/// cluster model and the alignment. Close-set draws that land on an
/// unmapped cluster are redrawn up to 10 times, then skipped.
pub fn sample_target_pseudolabels(
    prepared: &Prepared,
    phi: &GcnParams,
    mapping: &ClusterClassMapping,
    mode: PseudoLabelMode,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    let probs = prepared.cluster_target_probs(phi)?;
    let pool = target_pool(&prepared.scenario);
    let want = prepared.scenario.train_nodes().len();
    let chosen = sample_nodes(&pool, want, rng);
    let open = prepared.scenario.kind() == ShiftKind::OpenSet;
    Ok(assign_pseudo(&probs, &chosen, mapping, mode, open, rng))
}

fn sample_nodes(pool: &[usize], want: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool.len() >= want {
        index_sample(rng, pool.len(), want)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    } else {
        log::warn!(
            "pseudo-label pool has {} nodes, need {want}; sampling with replacement",
            pool.len()
        );
        (0..want).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

fn assign_pseudo(
    probs: &Array2<f64>,
    nodes: &[usize],
    mapping: &ClusterClassMapping,
    mode: PseudoLabelMode,
    open_set: bool,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(nodes.len());
    for &node in nodes {
        let row = probs.row(node);
        let mut label = None;
        for _attempt in 0..10 {
            let cluster = draw_cluster(row, mode, rng);
            match map_pseudo_labels(mapping, &[cluster], open_set)[0] {
                Some(l) => {
                    label = Some(l);
                    break;
                }
                None => {
                    if mode == PseudoLabelMode::Argmax {
                        break; // argmax redraws are identical
                    }
                }
            }
        }
        if let Some(l) = label {
            out.push((node, l));
        }
    }
    out
}

/// Routed per-node target distributions over clusters for the adversarial
/// KL term: train nodes route their one-hot label through the inverse
/// mapping, other nodes route the frozen classifier's probabilities.
/// Unmapped cluster columns get no mass before smoothing.
fn routed_cluster_targets(
    scenario: &ShiftScenario,
    mapping: &ClusterClassMapping,
    theta_src_probs: &Array2<f64>,
    nodes: &[usize],
    num_clusters: usize,
) -> Array2<f64> {
    let mut in_train = vec![false; scenario.source().num_nodes()];
    for &t in scenario.train_nodes() {
        in_train[t] = true;
    }
    let n = scenario.num_known();
    let mut out = Array2::zeros((nodes.len(), num_clusters));
    for (row, &node) in nodes.iter().enumerate() {
        if in_train[node] {
            out[[row, mapping.cluster_of(scenario.train_label(node))]] = 1.0;
        } else {
            for class in 0..n {
                out[[row, mapping.cluster_of(class)]] = theta_src_probs[[node, class]];
            }
            // open-set unknown mass has no cluster column; smoothing
            // below redistributes it
        }
        let eps = 1e-8;
        let sum: f64 = out.row(row).sum();
        let denom = sum + eps * num_clusters as f64;
        for v in out.row_mut(row).iter_mut() {
            *v = (*v + eps) / denom;
        }
    }
    out
}

/// T optimizer steps on the cluster model against the frozen classifier.
/// Returns the last step's (modularity loss, adversarial KL) values.
#[allow(clippy::too_many_arguments)]
pub fn cluster_episode_update(
    prepared: &Prepared,
    phi: &mut GcnParams,
    adam: &mut AdamState,
    theta: &GcnParams,
    mapping: &ClusterClassMapping,
    cfg: &TrainConfig,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<(Option<f64>, Option<f64>)> {
    let scenario = &prepared.scenario;
    let theta_src_probs = prepared.source_probs(theta)?;
    let c = phi.out_dim();
    let mut last = (None, None);
    for _ in 0..steps {
        let all = scenario.source().num_nodes();
        let batch: Vec<usize> = index_sample(rng, all, cfg.batch.min(all)).into_iter().collect();
        let targets = routed_cluster_targets(scenario, mapping, &theta_src_probs, &batch, c);

        let mut tape = Tape::new();
        let values = params_on_tape(&mut tape, phi, true);
        let (_, probs_t) = gcn_forward::<rand_chacha::ChaCha12Rng>(
            &mut tape,
            &values,
            &prepared.tgt_op,
            &prepared.tgt_feat,
            None,
        )?;
        let mod_loss = modularity_loss(
            &mut tape,
            scenario.target(),
            probs_t,
            cfg.modularity_form,
            cfg.collapse_weight,
        )?;
        let probs_s = if prepared.same_graph {
            probs_t
        } else {
            let (_, p) = gcn_forward::<rand_chacha::ChaCha12Rng>(
                &mut tape,
                &values,
                &prepared.src_op,
                &prepared.src_feat,
                None,
            )?;
            p
        };
        let sel = tape.select_rows(probs_s, Arc::new(batch))?;
        let kl = tape.kl_rows(Arc::new(targets), sel)?;
        let total = tape.scalar_combine(&[mod_loss, kl], &[1.0, cfg.cluster_kl_weight])?;
        let (mv, kv) = (tape.data(mod_loss)[[0, 0]], tape.data(kl)[[0, 0]]);
        if !mv.is_finite() || !kv.is_finite() {
            return Err(Error::divergence(format!("cluster losses {mv} / {kv}")));
        }
        last = (Some(mv), Some(kv));
        tape.backward(total)?;
        let grads = grads_from_tape(&tape, &values);
        adam_step(phi, &grads, adam, &cfg.model)?;
    }
    Ok(last)
}

/// Fixed pseudo-label sample sets for one classifier refit.
pub struct PseudoSets {
    /// (target node id, label) pairs.
    pub target: Vec<(usize, usize)>,
    /// (source node id, label) pairs; empty when `alpha` = 0.
    pub source: Vec<(usize, usize)>,
}

/// Refits the classifier on train ∪ pseudo sets to loss plateau.
/// The recorded loss sequence is non-increasing up to the stopping epoch
/// by construction; any later violation is reported as divergence.
pub struct RefitOutcome {
    pub loss_total_curve: Vec<f64>,
    pub loss_source: f64,
    pub loss_target_pseudo: Option<f64>,
    pub loss_source_pseudo: Option<f64>,
    pub epochs: usize,
}

pub fn classifier_episode_update(
    prepared: &Prepared,
    theta: &mut GcnParams,
    pseudo: &PseudoSets,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<RefitOutcome> {
    let width = prepared.scenario.classifier_width();
    prepared.assert_width(theta);
    let one_hot = |pairs: &[(usize, usize)]| -> (Arc<Vec<usize>>, Arc<Array2<f64>>) {
        let ids: Vec<usize> = pairs.iter().map(|&(n, _)| n).collect();
        let mut t = Array2::zeros((pairs.len(), width));
        for (row, &(_, l)) in pairs.iter().enumerate() {
            t[[row, l]] = 1.0;
        }
        (Arc::new(ids), Arc::new(t))
    };
    let (tgt_ids, tgt_targets) = one_hot(&pseudo.target);
    let (src_ids, src_targets) = one_hot(&pseudo.source);

    let mut adam = AdamState::new(theta);
    let mut curve: Vec<f64> = Vec::new();
    let mut parts = (f64::NAN, None, None);
    let mut epochs = 0usize;
    for _ in 1..=REFIT_MAX_EPOCHS {
        epochs += 1;
        let mut tape = Tape::new();
        let values = params_on_tape(&mut tape, theta, true);
        let (_, probs_src) = gcn_forward(
            &mut tape,
            &values,
            &prepared.src_op,
            &prepared.src_feat,
            dropout_arg(cfg, rng),
        )?;
        let probs_tgt = if prepared.same_graph {
            probs_src
        } else {
            let (_, p) = gcn_forward::<rand_chacha::ChaCha12Rng>(
                &mut tape,
                &values,
                &prepared.tgt_op,
                &prepared.tgt_feat,
                None,
            )?;
            p
        };

        let sel_train = tape.select_rows(probs_src, Arc::clone(&prepared.train_ids))?;
        let l_src = tape.cross_entropy_rows(sel_train, Arc::clone(&prepared.train_targets))?;
        let mut terms = vec![l_src];
        let mut weights = vec![1.0];
        let mut l_tgt_v = None;
        let mut l_srcp_v = None;
        if !tgt_ids.is_empty() {
            let sel = tape.select_rows(probs_tgt, Arc::clone(&tgt_ids))?;
            let l = tape.cross_entropy_rows(sel, Arc::clone(&tgt_targets))?;
            l_tgt_v = Some(tape.data(l)[[0, 0]]);
            terms.push(l);
            weights.push(1.0);
        }
        if !src_ids.is_empty() && cfg.alpha > 0.0 {
            let sel = tape.select_rows(probs_src, Arc::clone(&src_ids))?;
            let l = tape.cross_entropy_rows(sel, Arc::clone(&src_targets))?;
            l_srcp_v = Some(tape.data(l)[[0, 0]]);
            terms.push(l);
            weights.push(cfg.alpha);
        }
        let total = tape.scalar_combine(&terms, &weights)?;
        let total_v = tape.data(total)[[0, 0]];
        if !total_v.is_finite() {
            return Err(Error::divergence(format!("refit loss {total_v}")));
        }
        parts = (tape.data(terms[0])[[0, 0]], l_tgt_v, l_srcp_v);

        if let Some(&prev) = curve.last() {
            if prev - total_v < REFIT_PLATEAU_TOL {
                if total_v > prev + MONOTONE_SLACK {
                    // account the plateau stop, not a step on a rising loss
                    curve.push(total_v);
                    break;
                }
                curve.push(total_v);
                break;
            }
        }
        curve.push(total_v);
        tape.backward(total)?;
        let grads = grads_from_tape(&tape, &values);
        adam_step(theta, &grads, &mut adam, &cfg.model)?;
    }
    // Defensive: the sequence before the stopping entry must never rise.
    for w in curve.windows(2).rev().skip(1) {
        if w[1] > w[0] + MONOTONE_SLACK {
            return Err(Error::divergence(format!(
                "inner refit loss rose from {} to {}",
                w[0], w[1]
            )));
        }
    }
    Ok(RefitOutcome {
        loss_total_curve: curve,
        loss_source: parts.0,
        loss_target_pseudo: parts.1,
        loss_source_pseudo: parts.2,
        epochs,
    })
}

/// Monte-Carlo surrogate of the source evidence bound on the train nodes:
/// `mean_i Σ_k q_ik (ln pθ(class(k)|i) − ln q_ik)`, with unmapped
/// clusters reading the unknown column in open-set mode and skipped
/// otherwise. Logged for diagnostics.
fn source_elbo(
    prepared: &Prepared,
    theta: &GcnParams,
    phi: &GcnParams,
    mapping: &ClusterClassMapping,
) -> Result<f64> {
    let scenario = &prepared.scenario;
    let p = prepared.source_probs(theta)?;
    let q = prepared.cluster_source_probs(phi)?;
    let open = scenario.kind() == ShiftKind::OpenSet;
    let unknown = scenario.unknown_class_id();
    let mut acc = 0.0;
    for &node in scenario.train_nodes() {
        for k in 0..q.ncols() {
            let qv = q[[node, k]].max(LOG_EPS);
            let class = match mapping.class_of(k) {
                Some(c) => c,
                None if open => unknown,
                None => continue,
            };
            let pv = p[[node, class]].max(LOG_EPS);
            acc += q[[node, k]] * (pv.ln() - qv.ln());
        }
    }
    Ok(acc / scenario.train_nodes().len() as f64)
}

/// Tracks the best-validation episode under a patience rule.
#[derive(Debug)]
pub(crate) struct PatienceTracker {
    best: f64,
    best_episode: usize,
    bad: usize,
    patience: usize,
}

impl PatienceTracker {
    pub(crate) fn new(baseline: f64, patience: usize) -> Self {
        PatienceTracker {
            best: baseline,
            best_episode: 0,
            bad: 0,
            patience,
        }
    }

    /// Records an episode score; true means stop after this episode.
    pub(crate) fn record(&mut self, episode: usize, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.best_episode = episode;
            self.bad = 0;
            false
        } else {
            self.bad += 1;
            self.bad >= self.patience
        }
    }

    pub(crate) fn best_episode(&self) -> usize {
        self.best_episode
    }
}

/// The full optimization: pretrain both models, then episodes of
/// alignment → cluster update → classifier refit until validation
/// micro-F1 stalls. Returns the best-validation snapshot.
pub fn run_srnc(scenario: &ShiftScenario, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let prepared = Prepared::new(scenario);
    run_srnc_prepared(&prepared, cfg, None)
}

/// As [`run_srnc`] with reusable prepared tensors and, optionally,
/// precomputed pretraining outcomes (they must have been produced by the
/// same config and seed; the benchmark runner shares them across
/// method variants).
pub fn run_srnc_prepared(
    prepared: &Prepared,
    cfg: &TrainConfig,
    pretrained: Option<(PretrainClassifierOutcome, PretrainClusterOutcome)>,
) -> Result<TrainOutcome> {
    let scenario = &prepared.scenario;
    cfg.validate(scenario)?;
    let (classifier, cluster) = match pretrained {
        Some(p) => p,
        None => (
            pretrain_classifier_prepared(prepared, cfg)?,
            pretrain_cluster(prepared, cfg)?,
        ),
    };
    let mut theta = classifier.params;
    let mut phi = cluster.params;
    let mut adam_phi = cluster.adam;

    let ep0_val = prepared.val_micro_f1(&theta)?;
    let mut logs = vec![EpisodeLog {
        episode: 0,
        loss_classifier_source: classifier.loss_curve.last().copied(),
        loss_classifier_target_pseudo: None,
        loss_classifier_source_pseudo: None,
        loss_cluster_modularity: cluster.loss_curve.last().copied(),
        loss_cluster_adversarial: None,
        val_micro_f1: ep0_val,
        source_elbo: None,
        mapping: None,
        classifier_epochs: classifier.epochs,
    }];
    let mut snapshots = cfg
        .record_snapshots
        .then(|| vec![(theta.clone(), phi.clone())]);

    let mut best = (theta.clone(), phi.clone());
    let mut tracker = PatienceTracker::new(ep0_val, cfg.patience);
    let mut mapping: Option<ClusterClassMapping> = None;

    for episode in 1..=cfg.max_episodes {
        if mapping.is_none() || !cfg.align_once {
            mapping = Some(compute_alignment(prepared, &phi)?);
        }
        let map = mapping.as_ref().expect("alignment computed");

        let mut cluster_rng = seeded_stream(cfg.seed, episode_stream(episode, EP_CLUSTER_BATCHES));
        let (mod_l, kl_l) = cluster_episode_update(
            prepared,
            &mut phi,
            &mut adam_phi,
            &theta,
            map,
            cfg,
            cfg.steps_per_episode,
            &mut cluster_rng,
        )?;

        let mut tgt_rng = seeded_stream(cfg.seed, episode_stream(episode, EP_TARGET_PSEUDO));
        let target = sample_target_pseudolabels(
            prepared,
            &phi,
            map,
            cfg.pseudo_label_mode,
            &mut tgt_rng,
        )?;
        let source = if cfg.alpha > 0.0 {
            let mut src_rng = seeded_stream(cfg.seed, episode_stream(episode, EP_SOURCE_PSEUDO));
            sample_source_pseudolabels(prepared, &phi, map, cfg.pseudo_label_mode, &mut src_rng)?
        } else {
            Vec::new()
        };
        let pseudo = PseudoSets { target, source };

        let mut refit_rng = seeded_stream(cfg.seed, episode_stream(episode, EP_REFIT_DROPOUT));
        let refit = classifier_episode_update(prepared, &mut theta, &pseudo, cfg, &mut refit_rng)?;

        let val = prepared.val_micro_f1(&theta)?;
        let elbo = source_elbo(prepared, &theta, &phi, map)?;
        logs.push(EpisodeLog {
            episode,
            loss_classifier_source: Some(refit.loss_source),
            loss_classifier_target_pseudo: refit.loss_target_pseudo,
            loss_classifier_source_pseudo: refit.loss_source_pseudo,
            loss_cluster_modularity: mod_l,
            loss_cluster_adversarial: kl_l,
            val_micro_f1: val,
            source_elbo: Some(elbo),
            mapping: Some(map.to_json()),
            classifier_epochs: refit.epochs,
        });
        if let Some(s) = snapshots.as_mut() {
            s.push((theta.clone(), phi.clone()));
        }

        let improved = val > tracker.best;
        if improved {
            best = (theta.clone(), phi.clone());
        }
        if tracker.record(episode, val) {
            break;
        }
    }

    Ok(TrainOutcome {
        theta: best.0,
        phi: best.1,
        logs,
        best_episode: tracker.best_episode(),
        snapshots,
    })
}

/// Source-side pseudo sample: `|train|` non-train source nodes labeled by
/// the cluster model through the mapping.
pub fn sample_source_pseudolabels(
    prepared: &Prepared,
    phi: &GcnParams,
    mapping: &ClusterClassMapping,
    mode: PseudoLabelMode,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    let scenario = &prepared.scenario;
    let mut in_train = vec![false; scenario.source().num_nodes()];
    for &t in scenario.train_nodes() {
        in_train[t] = true;
    }
    let pool: Vec<usize> = (0..scenario.source().num_nodes())
        .filter(|&i| !in_train[i])
        .collect();
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let probs = prepared.cluster_source_probs(phi)?;
    let chosen = sample_nodes(&pool, scenario.train_nodes().len(), rng);
    let open = scenario.kind() == ShiftKind::OpenSet;
    Ok(assign_pseudo(&probs, &chosen, mapping, mode, open, rng))
}

/// The bootstrapping ablation: the classifier pseudo-labels its own
/// samples; no cluster model runs. In open-set mode, sampled nodes whose
/// best known-class probability falls below a confidence threshold τ are
/// pseudo-labeled unknown; τ is selected on validation micro-F1 over
/// [`WO_PHI_TAU_GRID`].
pub struct WoPhiOutcome {
    pub theta: GcnParams,
    pub logs: Vec<EpisodeLog>,
    pub best_episode: usize,
    /// Selected confidence threshold (open-set only).
    pub tau: Option<f64>,
}

pub fn run_wo_phi_ablation(scenario: &ShiftScenario, cfg: &TrainConfig) -> Result<WoPhiOutcome> {
    let prepared = Prepared::new(scenario);
    run_wo_phi_prepared(&prepared, cfg, None)
}

pub fn run_wo_phi_prepared(
    prepared: &Prepared,
    cfg: &TrainConfig,
    pretrained: Option<PretrainClassifierOutcome>,
) -> Result<WoPhiOutcome> {
    let scenario = &prepared.scenario;
    cfg.validate(scenario)?;
    let classifier = match pretrained {
        Some(p) => p,
        None => pretrain_classifier_prepared(prepared, cfg)?,
    };
    match scenario.kind() {
        ShiftKind::CloseSet => wo_phi_single(prepared, cfg, &classifier, None),
        ShiftKind::OpenSet => {
            let mut best: Option<WoPhiOutcome> = None;
            let mut best_val = f64::NEG_INFINITY;
            for &tau in &WO_PHI_TAU_GRID {
                let run = wo_phi_single(prepared, cfg, &classifier, Some(tau))?;
                let val = run
                    .logs
                    .get(run.best_episode)
                    .map(|l| l.val_micro_f1)
                    .unwrap_or(0.0);
                if val > best_val {
                    best_val = val;
                    best = Some(run);
                }
            }
            Ok(best.expect("grid is non-empty"))
        }
    }
}

/// Classifier self-labeling: argmax over known classes, or unknown when
/// the best known probability is below τ (τ = 0 never yields unknown).
fn theta_pseudo_label(
    probs_row: ndarray::ArrayView1<'_, f64>,
    num_known: usize,
    tau: Option<f64>,
    unknown_id: usize,
) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for c in 0..num_known {
        if probs_row[c] > best_v {
            best_v = probs_row[c];
            best = c;
        }
    }
    match tau {
        Some(t) if best_v < t => unknown_id,
        _ => best,
    }
}

fn wo_phi_single(
    prepared: &Prepared,
    cfg: &TrainConfig,
    classifier: &PretrainClassifierOutcome,
    tau: Option<f64>,
) -> Result<WoPhiOutcome> {
    let scenario = &prepared.scenario;
    let mut theta = classifier.params.clone();
    let ep0_val = prepared.val_micro_f1(&theta)?;
    let mut logs = vec![EpisodeLog {
        episode: 0,
        loss_classifier_source: classifier.loss_curve.last().copied(),
        loss_classifier_target_pseudo: None,
        loss_classifier_source_pseudo: None,
        loss_cluster_modularity: None,
        loss_cluster_adversarial: None,
        val_micro_f1: ep0_val,
        source_elbo: None,
        mapping: None,
        classifier_epochs: classifier.epochs,
    }];
    let mut best_theta = theta.clone();
    let mut tracker = PatienceTracker::new(ep0_val, cfg.patience);
    let num_known = scenario.num_known();
    let unknown = scenario.unknown_class_id();

    for episode in 1..=cfg.max_episodes {
        let tgt_probs = prepared.target_probs(&theta)?;
        let mut tgt_rng = seeded_stream(cfg.seed, episode_stream(episode, EP_TARGET_PSEUDO));
        let pool = target_pool(scenario);
        let chosen = sample_nodes(&pool, scenario.train_nodes().len(), &mut tgt_rng);
        let target: Vec<(usize, usize)> = chosen
            .iter()
            .map(|&n| (n, theta_pseudo_label(tgt_probs.row(n), num_known, tau, unknown)))
            .collect();

        let source = if cfg.alpha > 0.0 {
            let src_probs = prepared.source_probs(&theta)?;
            let mut src_rng = seeded_stream(cfg.seed, episode_stream(episode, EP_SOURCE_PSEUDO));
            let mut in_train = vec![false; scenario.source().num_nodes()];
            for &t in scenario.train_nodes() {
                in_train[t] = true;
            }
            let pool: Vec<usize> = (0..scenario.source().num_nodes())
                .filter(|&i| !in_train[i])
                .collect();
            let chosen = sample_nodes(&pool, scenario.train_nodes().len(), &mut src_rng);
            chosen
                .iter()
                .map(|&n| (n, theta_pseudo_label(src_probs.row(n), num_known, tau, unknown)))
                .collect()
        } else {
            Vec::new()
        };

        let pseudo = PseudoSets { target, source };
        let mut refit_rng = seeded_stream(cfg.seed, episode_stream(episode, EP_REFIT_DROPOUT));
        let refit = classifier_episode_update(prepared, &mut theta, &pseudo, cfg, &mut refit_rng)?;
        let val = prepared.val_micro_f1(&theta)?;
        logs.push(EpisodeLog {
            episode,
            loss_classifier_source: Some(refit.loss_source),
            loss_classifier_target_pseudo: refit.loss_target_pseudo,
            loss_classifier_source_pseudo: refit.loss_source_pseudo,
            loss_cluster_modularity: None,
            loss_cluster_adversarial: None,
            val_micro_f1: val,
            source_elbo: None,
            mapping: None,
            classifier_epochs: refit.epochs,
        });
        let improved = val > tracker.best;
        if improved {
            best_theta = theta.clone();
        }
        if tracker.record(episode, val) {
            break;
        }
    }
    Ok(WoPhiOutcome {
        theta: best_theta,
        logs,
        best_episode: tracker.best_episode(),
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphstore::{make_openset_split, sbm_graph, synth_sbm_shift, SbmShiftConfig};
    use crate::graphstore::Graph;

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                hidden: 16,
                seed,
                ..ModelConfig::default()
            },
            seed,
            pretrain_epochs_classifier: 200,
            pretrain_epochs_cluster: 100,
            steps_per_episode: 5,
            batch: 16,
            max_episodes: 2,
            ..TrainConfig::default()
        }
    }

    fn sbm_cfg(seed: u64, blocks: usize, per_block: usize, noise: f64) -> SbmShiftConfig {
        let prior = vec![1.0 / blocks as f64; blocks];
        SbmShiftConfig {
            blocks,
            nodes_per_block_source: per_block,
            nodes_per_block_target: per_block,
            intra_p: 0.2,
            inter_p: 0.01,
            feature_dim: 8,
            feature_noise: noise,
            label_prior_source: prior.clone(),
            label_prior_target: prior,
            seed,
        }
    }

    fn separable_openset(seed: u64, hidden: &[usize]) -> ShiftScenario {
        let shift = synth_sbm_shift(&sbm_cfg(seed, 4, 40, 0.2)).unwrap();
        let g = Arc::clone(shift.source());
        make_openset_split(&g, hidden, 10, 0.2, seed).unwrap()
    }

    #[test]
    fn pretrain_reaches_low_loss_monotonically_on_separable_sbm() {
        let scenario = separable_openset(5, &[]);
        let cfg = small_cfg(5);
        let out = pretrain_classifier(&scenario, &cfg).unwrap();
        let min_loss = out.loss_curve.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min_loss < 0.1, "train loss stayed at {min_loss}");
        for w in out.loss_curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "loss rose from {} to {}", w[0], w[1]);
        }
    }

    #[test]
    fn cluster_pretrain_recovers_blocks() {
        use crate::clustering::{harden, modularity, HardAssignment};
        let shift = synth_sbm_shift(&sbm_cfg(11, 4, 30, 0.3)).unwrap();
        let prepared = Prepared::new(&shift);
        let mut cfg = small_cfg(11);
        cfg.num_clusters = Some(4);
        cfg.pretrain_epochs_cluster = 300;
        let out = pretrain_cluster(&prepared, &cfg).unwrap();
        let probs = prepared.cluster_target_probs(&out.params).unwrap();
        let hard = harden(&probs.view());
        let got = modularity(shift.target(), &hard).unwrap();
        let truth_ids: Vec<usize> = shift.target().labels().iter().map(|&l| l as usize).collect();
        let truth = HardAssignment::new(truth_ids, 4).unwrap();
        let best = modularity(shift.target(), &truth).unwrap();
        assert!(
            got >= 0.9 * best,
            "hardened modularity {got} vs ground truth {best}"
        );
    }

    #[test]
    fn zero_steps_leaves_cluster_params_unchanged() {
        let scenario = separable_openset(7, &[3]);
        let prepared = Prepared::new(&scenario);
        let mut cfg = small_cfg(7);
        cfg.num_clusters = Some(6);
        cfg.pretrain_epochs_cluster = 5;
        let out = pretrain_cluster(&prepared, &cfg).unwrap();
        let classifier = pretrain_classifier_prepared(&prepared, &cfg).unwrap();
        let mapping = compute_alignment(&prepared, &out.params).unwrap();
        let mut phi = out.params.clone();
        let mut adam = out.adam.clone();
        let mut rng = seeded_stream(7, 999);
        cluster_episode_update(
            &prepared,
            &mut phi,
            &mut adam,
            &classifier.params,
            &mapping,
            &cfg,
            0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(phi, out.params);
    }

    #[test]
    fn one_hot_rows_make_sample_and_argmax_agree() {
        let mut probs = Array2::zeros((3, 4));
        probs[[0, 2]] = 1.0;
        probs[[1, 0]] = 1.0;
        probs[[2, 3]] = 1.0;
        let mut rng = seeded_stream(1, 0);
        for (row, expect) in [(0usize, 2usize), (1, 0), (2, 3)] {
            let s = draw_cluster(probs.row(row), PseudoLabelMode::Sample, &mut rng);
            let a = draw_cluster(probs.row(row), PseudoLabelMode::Argmax, &mut rng);
            assert_eq!(s, expect);
            assert_eq!(a, expect);
        }
    }

    #[test]
    fn adversarial_term_pulls_cluster_toward_labels() {
        // post-update KL(routed labels ‖ QΦ) on source strictly below the
        // pre-update value in at least 9 of 10 seeds
        let mut wins = 0;
        for seed in 0..10u64 {
            let scenario = separable_openset(seed + 100, &[3]);
            let prepared = Prepared::new(&scenario);
            let mut cfg = small_cfg(seed + 100);
            cfg.num_clusters = Some(4);
            cfg.pretrain_epochs_cluster = 60;
            cfg.pretrain_epochs_classifier = 60;
            let cluster = pretrain_cluster(&prepared, &cfg).unwrap();
            let classifier = pretrain_classifier_prepared(&prepared, &cfg).unwrap();
            let mapping = compute_alignment(&prepared, &cluster.params).unwrap();

            let routed_kl = |phi: &GcnParams| -> f64 {
                let q = prepared.cluster_source_probs(phi).unwrap();
                let theta_probs = prepared.source_probs(&classifier.params).unwrap();
                let train: Vec<usize> = scenario.train_nodes().to_vec();
                let routed = routed_cluster_targets(
                    &scenario,
                    &mapping,
                    &theta_probs,
                    &train,
                    q.ncols(),
                );
                let mut acc = 0.0;
                for (row, &node) in train.iter().enumerate() {
                    for k in 0..q.ncols() {
                        let p = routed[[row, k]];
                        if p > 0.0 {
                            acc += p * (p / q[[node, k]].max(LOG_EPS)).ln();
                        }
                    }
                }
                acc / train.len() as f64
            };

            let before = routed_kl(&cluster.params);
            let mut phi = cluster.params.clone();
            let mut adam = cluster.adam.clone();
            let mut rng = seeded_stream(seed + 100, 555);
            cluster_episode_update(
                &prepared,
                &mut phi,
                &mut adam,
                &classifier.params,
                &mapping,
                &cfg,
                10,
                &mut rng,
            )
            .unwrap();
            let after = routed_kl(&phi);
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 9, "KL decreased in only {wins}/10 seeds");
    }

    #[test]
    fn empty_pseudo_sets_reduce_to_pretrain_loss() {
        let scenario = separable_openset(13, &[3]);
        let prepared = Prepared::new(&scenario);
        let cfg = small_cfg(13);
        let classifier = pretrain_classifier_prepared(&prepared, &cfg).unwrap();

        // one refit epoch's source term with empty pseudo sets equals the
        // plain pretraining loss at the same parameters
        let mut theta = classifier.params.clone();
        let pseudo = PseudoSets {
            target: Vec::new(),
            source: Vec::new(),
        };
        let mut cfg0 = cfg.clone();
        cfg0.alpha = 0.0;
        let mut rng = seeded_stream(13, 777);
        let refit = classifier_episode_update(&prepared, &mut theta, &pseudo, &cfg0, &mut rng).unwrap();

        let mut tape = Tape::new();
        let values = params_on_tape(&mut tape, &classifier.params, false);
        let (_, probs) = gcn_forward::<rand_chacha::ChaCha12Rng>(
            &mut tape,
            &values,
            &prepared.src_op,
            &prepared.src_feat,
            None,
        )
        .unwrap();
        let sel = tape.select_rows(probs, Arc::clone(&prepared.train_ids)).unwrap();
        let l = tape
            .cross_entropy_rows(sel, Arc::clone(&prepared.train_targets))
            .unwrap();
        let expect = tape.data(l)[[0, 0]];
        assert!((refit.loss_total_curve[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn all_unknown_pseudo_labels_raise_unknown_logit() {
        let scenario = separable_openset(17, &[3]);
        let prepared = Prepared::new(&scenario);
        let cfg = small_cfg(17);
        let classifier = pretrain_classifier_prepared(&prepared, &cfg).unwrap();
        let unknown = scenario.unknown_class_id();

        let mean_unknown = |theta: &GcnParams| -> f64 {
            let p = prepared.target_probs(theta).unwrap();
            p.column(unknown).mean().unwrap()
        };
        let before = mean_unknown(&classifier.params);
        let mut theta = classifier.params.clone();
        let pool = target_pool(&scenario);
        let pseudo = PseudoSets {
            target: pool.iter().take(40).map(|&n| (n, unknown)).collect(),
            source: Vec::new(),
        };
        let mut cfg0 = cfg.clone();
        cfg0.alpha = 0.0;
        let mut rng = seeded_stream(17, 888);
        classifier_episode_update(&prepared, &mut theta, &pseudo, &cfg0, &mut rng).unwrap();
        let after = mean_unknown(&theta);
        assert!(after > before, "unknown mass {before} → {after}");
    }

    #[test]
    fn patience_rule_trace() {
        // validation sequence [70, 72, 71] with patience 1 stops after
        // episode 3 and keeps episode 2
        let mut t = PatienceTracker::new(0.0, 1);
        assert!(!t.record(1, 70.0));
        assert!(!t.record(2, 72.0));
        assert!(t.record(3, 71.0));
        assert_eq!(t.best_episode(), 2);
    }

    #[test]
    fn tau_zero_never_labels_unknown() {
        let mut row = Array2::zeros((1, 4));
        row[[0, 0]] = 0.1;
        row[[0, 1]] = 0.2;
        row[[0, 2]] = 0.3;
        row[[0, 3]] = 0.4; // unknown column, ignored for the argmax
        let l = theta_pseudo_label(row.row(0), 3, Some(0.0), 3);
        assert_eq!(l, 2);
        let l = theta_pseudo_label(row.row(0), 3, Some(0.5), 3);
        assert_eq!(l, 3, "below τ goes to unknown");
        let l = theta_pseudo_label(row.row(0), 3, None, 3);
        assert_eq!(l, 2);
    }

    #[test]
    fn run_is_deterministic_and_episode0_matches_pretrain() {
        let scenario = separable_openset(23, &[3]);
        let mut cfg = small_cfg(23);
        cfg.max_episodes = 2;
        cfg.num_clusters = Some(5);
        cfg.pretrain_epochs_classifier = 80;
        cfg.pretrain_epochs_cluster = 40;

        let a = run_srnc(&scenario, &cfg).unwrap();
        let b = run_srnc(&scenario, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.logs).unwrap(),
            serde_json::to_string(&b.logs).unwrap()
        );

        let pre = pretrain_classifier(&scenario, &cfg).unwrap();
        let prepared = Prepared::new(&scenario);
        assert_eq!(a.logs[0].val_micro_f1, prepared.val_micro_f1(&pre.params).unwrap());
        assert_eq!(a.logs[0].classifier_epochs, pre.epochs);
    }

    #[test]
    fn ep1_run_is_prefix_of_longer_run() {
        let scenario = separable_openset(29, &[3]);
        let mut cfg = small_cfg(29);
        cfg.num_clusters = Some(5);
        cfg.pretrain_epochs_classifier = 60;
        cfg.pretrain_epochs_cluster = 30;
        cfg.max_episodes = 3;
        cfg.patience = 10;
        let full = run_srnc(&scenario, &cfg).unwrap();
        let mut cfg1 = cfg.clone();
        cfg1.max_episodes = 1;
        let ep1 = run_srnc(&scenario, &cfg1).unwrap();
        assert_eq!(
            serde_json::to_string(&full.logs[..2]).unwrap(),
            serde_json::to_string(&ep1.logs[..]).unwrap()
        );
    }

    #[test]
    fn close_set_width_is_n_and_runs() {
        let shift = synth_sbm_shift(&sbm_cfg(31, 3, 25, 0.3)).unwrap();
        let mut cfg = small_cfg(31);
        cfg.pretrain_epochs_classifier = 60;
        cfg.pretrain_epochs_cluster = 30;
        cfg.max_episodes = 1;
        let out = run_srnc(&shift, &cfg).unwrap();
        assert_eq!(out.theta.out_dim(), 3);
        assert_eq!(out.phi.out_dim(), 3);
    }

    #[test]
    fn openset_width_is_n_plus_one() {
        let scenario = separable_openset(37, &[0]);
        let mut cfg = small_cfg(37);
        cfg.pretrain_epochs_classifier = 30;
        cfg.pretrain_epochs_cluster = 20;
        cfg.max_episodes = 1;
        cfg.num_clusters = Some(4);
        let out = run_srnc(&scenario, &cfg).unwrap();
        assert_eq!(out.theta.out_dim(), 3 + 1);
    }

    #[test]
    fn sample_counts_match_train_size() {
        let scenario = separable_openset(41, &[3]);
        let prepared = Prepared::new(&scenario);
        let mut cfg = small_cfg(41);
        cfg.num_clusters = Some(4);
        cfg.pretrain_epochs_cluster = 20;
        let cluster = pretrain_cluster(&prepared, &cfg).unwrap();
        let mapping = compute_alignment(&prepared, &cluster.params).unwrap();
        let mut rng = seeded_stream(41, 3141);
        let pairs = sample_target_pseudolabels(
            &prepared,
            &cluster.params,
            &mapping,
            PseudoLabelMode::Sample,
            &mut rng,
        )
        .unwrap();
        assert_eq!(pairs.len(), scenario.train_nodes().len());
        for &(n, l) in &pairs {
            assert!(!scenario.train_nodes().contains(&n));
            assert!(l <= scenario.unknown_class_id());
        }
    }

    #[test]
    fn undersized_pool_samples_with_replacement() {
        // tiny graph where the non-train pool is smaller than train
        let g = Arc::new(
            Graph::new(
                &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)],
                Array2::from_elem((6, 2), 1.0),
                vec![0, 0, 0, 1, 1, 1],
                2,
                "tiny",
            )
            .unwrap(),
        );
        let scenario = make_openset_split(&g, &[], 2, 0.0, 1).unwrap();
        assert_eq!(scenario.train_nodes().len(), 4);
        let pool = target_pool(&scenario);
        assert_eq!(pool.len(), 2);
        let mut rng = seeded_stream(1, 1);
        let nodes = sample_nodes(&pool, 4, &mut rng);
        assert_eq!(nodes.len(), 4);
    }

    #[test]
    fn sbm_graph_helper_is_usable_standalone() {
        let mut b = seeded_stream(1, 0);
        let mut e = seeded_stream(1, 1);
        let mut n = seeded_stream(1, 2);
        let means = Array2::zeros((2, 4));
        let g = sbm_graph(2, 30, 0.3, 0.02, &[0.5, 0.5], &means, 0.1, &mut b, &mut e, &mut n, "t")
            .unwrap();
        assert_eq!(g.num_nodes(), 30);
    }
}
