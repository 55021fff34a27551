//! Synthetic stochastic-block-model shift: source and target graphs drawn
//! from the same homophilous edge model, with block frequencies following
//! per-side label priors. Serves as the desk-scale close-set drift
//! benchmark.

use std::sync::Arc;

use ndarray::Array2;
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scenario::{ShiftKind, ShiftScenario};
use super::Graph;
use crate::error::{Error, Result};
use crate::linalg::seeded_stream;

/// Close-set drift surrogate configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmShiftConfig {
    pub blocks: usize,
    pub nodes_per_block_source: usize,
    pub nodes_per_block_target: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub label_prior_source: Vec<f64>,
    pub label_prior_target: Vec<f64>,
    pub seed: u64,
}

/// Train nodes drawn per class from the source graph when building the
/// scenario split.
const TRAIN_PER_CLASS: usize = 20;
/// Fraction of remaining source nodes held out for validation.
const VAL_FRACTION: f64 = 0.15;

impl SbmShiftConfig {
    fn validate(&self) -> Result<()> {
        if self.blocks == 0
            || self.nodes_per_block_source == 0
            || self.nodes_per_block_target == 0
            || self.feature_dim == 0
        {
            return Err(Error::config("sbm: zero-sized dimension".to_string()));
        }
        if self.intra_p <= self.inter_p {
            return Err(Error::config(
                "sbm: homophily requires intra_p > inter_p".to_string(),
            ));
        }
        for (which, prior) in [
            ("source", &self.label_prior_source),
            ("target", &self.label_prior_target),
        ] {
            if prior.len() != self.blocks {
                return Err(Error::config(format!(
                    "sbm: {which} prior has {} entries for {} blocks",
                    prior.len(),
                    self.blocks
                )));
            }
            if prior.iter().any(|&p| p < 0.0) {
                return Err(Error::config(format!("sbm: negative {which} prior")));
            }
            let s: f64 = prior.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "sbm: {which} prior sums to {s}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Draws one SBM graph: `total_nodes` nodes whose blocks follow `prior`,
/// homophilous Bernoulli edges, features at the shared block mean plus
/// Gaussian noise. Labels are the block ids.
#[allow(clippy::too_many_arguments)]
pub fn sbm_graph(
    blocks: usize,
    total_nodes: usize,
    intra_p: f64,
    inter_p: f64,
    prior: &[f64],
    block_means: &Array2<f64>,
    feature_noise: f64,
    block_rng: &mut impl Rng,
    edge_rng: &mut impl Rng,
    noise_rng: &mut impl Rng,
    name: &str,
) -> Result<Graph> {
    let mut cumulative = Vec::with_capacity(blocks);
    let mut acc = 0.0;
    for &p in prior {
        acc += p;
        cumulative.push(acc);
    }
    let assignment: Vec<usize> = (0..total_nodes)
        .map(|_| {
            let u: f64 = block_rng.random_range(0.0..1.0);
            cumulative.iter().position(|&c| u < c).unwrap_or(blocks - 1)
        })
        .collect();

    let mut edges = Vec::new();
    for i in 0..total_nodes {
        for j in (i + 1)..total_nodes {
            let p = if assignment[i] == assignment[j] {
                intra_p
            } else {
                inter_p
            };
            if edge_rng.random_range(0.0..1.0) < p {
                edges.push((i as u32, j as u32));
            }
        }
    }

    let f = block_means.ncols();
    let mut features = Array2::zeros((total_nodes, f));
    for (i, &b) in assignment.iter().enumerate() {
        for c in 0..f {
            let noise: f64 = StandardNormal.sample(noise_rng);
            features[[i, c]] = block_means[[b, c]] + feature_noise * noise;
        }
    }

    let labels: Vec<i64> = assignment.iter().map(|&b| b as i64).collect();
    Graph::new(&edges, features, labels, blocks, name)
}

/// Generates the source/target pair and the close-set scenario split:
/// up to 20 train nodes per class from the source, 15% of the remaining
/// source nodes as validation, and every target node as test.
pub fn synth_sbm_shift(cfg: &SbmShiftConfig) -> Result<ShiftScenario> {
    cfg.validate()?;
    let mut means_rng = seeded_stream(cfg.seed, 10);
    let mut block_means = Array2::zeros((cfg.blocks, cfg.feature_dim));
    for v in block_means.iter_mut() {
        *v = StandardNormal.sample(&mut means_rng);
    }

    let source = sbm_graph(
        cfg.blocks,
        cfg.blocks * cfg.nodes_per_block_source,
        cfg.intra_p,
        cfg.inter_p,
        &cfg.label_prior_source,
        &block_means,
        cfg.feature_noise,
        &mut seeded_stream(cfg.seed, 0),
        &mut seeded_stream(cfg.seed, 1),
        &mut seeded_stream(cfg.seed, 2),
        "sbm-source",
    )?;
    let target = sbm_graph(
        cfg.blocks,
        cfg.blocks * cfg.nodes_per_block_target,
        cfg.intra_p,
        cfg.inter_p,
        &cfg.label_prior_target,
        &block_means,
        cfg.feature_noise,
        &mut seeded_stream(cfg.seed, 3),
        &mut seeded_stream(cfg.seed, 4),
        &mut seeded_stream(cfg.seed, 5),
        "sbm-target",
    )?;

    let mut split_rng = seeded_stream(cfg.seed, 6);
    let mut train = Vec::new();
    let mut in_train = vec![false; source.num_nodes()];
    for class in 0..cfg.blocks {
        let pool: Vec<usize> = (0..source.num_nodes())
            .filter(|&i| source.labels()[i] == class as i64)
            .collect();
        if pool.is_empty() {
            return Err(Error::data(format!(
                "sbm: class {class} drew no source nodes; priors too degenerate"
            )));
        }
        let take = pool.len().min(TRAIN_PER_CLASS);
        for idx in index_sample(&mut split_rng, pool.len(), take) {
            train.push(pool[idx]);
            in_train[pool[idx]] = true;
        }
    }
    train.sort_unstable();

    let remaining: Vec<usize> = (0..source.num_nodes()).filter(|&i| !in_train[i]).collect();
    let val_count = (VAL_FRACTION * remaining.len() as f64).round() as usize;
    let mut val: Vec<usize> = index_sample(&mut split_rng, remaining.len(), val_count)
        .into_iter()
        .map(|k| remaining[k])
        .collect();
    val.sort_unstable();
    let test: Vec<usize> = (0..target.num_nodes()).collect();

    let known: Vec<usize> = (0..cfg.blocks).collect();
    Ok(ShiftScenario::build_close_set(
        Arc::new(source),
        Arc::new(target),
        train,
        val,
        test,
        known,
    ))
}

impl ShiftScenario {
    pub(crate) fn build_close_set(
        source: Arc<Graph>,
        target: Arc<Graph>,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
        known: Vec<usize>,
    ) -> Self {
        ShiftScenario::build(
            ShiftKind::CloseSet,
            source,
            target,
            train,
            val,
            test,
            known,
            Vec::new(),
            None,
            None,
        )
    }
}
