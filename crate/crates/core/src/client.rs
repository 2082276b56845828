//! Client-side model selection and local fine-tuning.
//!
//! Each round a client draws a model from its multiplicative-weights PMF,
//! clusters the remaining models with FFD into the memory left over, downloads
//! one cluster chosen uniformly, and forms importance-weighted loss and
//! gradient estimates for every model it stored.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::binpack::{ClusterTable, PackError};
use crate::cost::Cost;
use crate::model::project_in_place;
use crate::rng::{draw_index, NamedStream, Purpose};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client {client}: {source}")]
    Budget {
        client: usize,
        #[source]
        source: PackError,
    },
    #[error("client {client}: dictionary is empty")]
    EmptyDictionary { client: usize },
    #[error("client {client}: learning rate {rate} must be positive and finite")]
    InvalidRate { client: usize, rate: f64 },
}

/// Per-client selection state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// `ln z_{ik,t}` for every model.
    pub log_weights: Vec<f64>,
    pub budget: Cost,
    pub lr_select: f64,
    pub lr_finetune: f64,
    costs: Vec<Cost>,
    clusters: ClusterTable,
    mu: usize,
    pub stream: NamedStream,
}

impl ClientState {
    pub fn new(
        id: usize,
        costs: &[Cost],
        budget: Cost,
        lr_select: f64,
        lr_finetune: f64,
        seed: u64,
    ) -> Result<Self, ClientError> {
        if costs.is_empty() {
            return Err(ClientError::EmptyDictionary { client: id });
        }
        for rate in [lr_select, lr_finetune] {
            if !(rate.is_finite() && rate >= 0.0) {
                return Err(ClientError::InvalidRate { client: id, rate });
            }
        }
        let clusters =
            ClusterTable::build(costs, budget).map_err(|source| ClientError::Budget { client: id, source })?;
        let mu = clusters.mu();
        Ok(Self {
            id,
            log_weights: vec![0.0; costs.len()],
            budget,
            lr_select,
            lr_finetune,
            costs: costs.to_vec(),
            clusters,
            mu,
            stream: NamedStream::new(seed, id as u64),
        })
    }

    pub fn model_count(&self) -> usize {
        self.log_weights.len()
    }

    /// `m_{ij}` for every possible chosen model `j`.
    pub fn cluster_counts(&self) -> Vec<usize> {
        self.clusters.counts()
    }

    pub fn cluster_table(&self) -> &ClusterTable {
        &self.clusters
    }

    /// `μ_i = max_j m_{ij}` with FFD counts.
    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn costs(&self) -> &[Cost] {
        &self.costs
    }

    pub fn selection_pmf(&self) -> Vec<f64> {
        selection_pmf(&self.log_weights)
    }

    /// Draws `I_{i,t}` and `J_{i,t}` from this client's substreams for `round`.
    pub fn plan_round(&self, bandwidths: &[Cost], round: u64) -> RoundPlan {
        let mut select = self.stream.at(Purpose::Select, round);
        let mut cluster = self.stream.at(Purpose::Cluster, round);
        self.plan_with(bandwidths, &mut select, &mut cluster)
    }

    /// Plans with caller-supplied randomness (used by Monte Carlo checks).
    pub fn plan_with<R: Rng + ?Sized>(
        &self,
        bandwidths: &[Cost],
        select_rng: &mut R,
        cluster_rng: &mut R,
    ) -> RoundPlan {
        let pmf = self.selection_pmf();
        let chosen = draw_index(&pmf, select_rng);
        let packing = self.clusters.clusters(chosen);
        let (chosen_cluster, mut stored) = if packing.bin_count() == 0 {
            (None, vec![chosen])
        } else {
            let j = cluster_rng.random_range(0..packing.bin_count());
            let mut s = packing.bins[j].clone();
            s.push(chosen);
            (Some(j), s)
        };
        stored.sort_unstable();
        let q = inclusion_probability(&pmf, &self.clusters.counts());
        let bandwidth_need = stored.iter().map(|&k| bandwidths[k]).sum();
        let storage_used = stored.iter().map(|&k| self.costs[k]).sum();
        RoundPlan {
            chosen_model: chosen,
            chosen_cluster,
            stored_set: stored,
            inclusion_probs: q,
            bandwidth_need,
            storage_used,
            pmf,
        }
    }

    pub fn update_weights(&mut self, estimates: &[f64]) {
        update_weights(&mut self.log_weights, self.lr_select, estimates);
    }
}

/// One client's stored subset for a round (or a communication window).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub chosen_model: usize,
    /// `None` when there are no other models to cluster.
    pub chosen_cluster: Option<usize>,
    /// Ascending model indices, always containing `chosen_model`.
    pub stored_set: Vec<usize>,
    /// `q_{ik,t}` for every model.
    pub inclusion_probs: Vec<f64>,
    /// `e_i`.
    pub bandwidth_need: Cost,
    pub storage_used: Cost,
    /// The selection PMF the plan was drawn from.
    pub pmf: Vec<f64>,
}

impl RoundPlan {
    pub fn stores(&self, model: usize) -> bool {
        self.stored_set.binary_search(&model).is_ok()
    }
}

/// Normalised `exp(log_weights)` computed with a max shift.
pub fn selection_pmf(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Probability that each model ends up stored.
///
/// Evaluated as `1 − Σ_{j≠k} p_j (1 − 1/m_j)`, which equals
/// `p_k + Σ_{j≠k} p_j/m_j` when the PMF sums to one and is exactly `1` when
/// every cluster count is one. A single-model dictionary (no clusters) gives
/// `q = 1`.
pub fn inclusion_probability(pmf: &[f64], cluster_counts: &[usize]) -> Vec<f64> {
    debug_assert_eq!(pmf.len(), cluster_counts.len());
    let miss: Vec<f64> = pmf
        .iter()
        .zip(cluster_counts)
        .map(|(&p, &m)| if m <= 1 { 0.0 } else { p * (1.0 - 1.0 / m as f64) })
        .collect();
    (0..pmf.len())
        .map(|k| {
            let excluded: f64 = miss.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
            (1.0 - excluded).min(1.0)
        })
        .collect()
}

/// `ℓ_{ik} = L_k / q_{ik}` for stored models, zero otherwise.
///
/// `losses[j]` is the observed loss of `plan.stored_set[j]`.
pub fn loss_estimates(plan: &RoundPlan, losses: &[f64]) -> Vec<f64> {
    debug_assert_eq!(losses.len(), plan.stored_set.len());
    let mut out = vec![0.0; plan.inclusion_probs.len()];
    for (&k, &l) in plan.stored_set.iter().zip(losses) {
        out[k] = l / plan.inclusion_probs[k];
    }
    out
}

/// Window version: per-round losses are summed before the importance weight.
pub fn batched_loss_estimates(plan: &RoundPlan, per_round: &[Vec<f64>]) -> Vec<f64> {
    let mut sums = vec![0.0; plan.stored_set.len()];
    for round in per_round {
        for (s, l) in sums.iter_mut().zip(round) {
            *s += l;
        }
    }
    loss_estimates(plan, &sums)
}

/// `∇ℓ̂_{ik} = (α / q_{ik}) ∇L_k` for stored models of an uploading client.
///
/// `grads[j]` is the gradient of `plan.stored_set[j]`. Clients outside the
/// uploading group contribute nothing.
pub fn grad_estimates(
    plan: &RoundPlan,
    uploading: bool,
    alpha: usize,
    grads: &[Vec<f64>],
) -> BTreeMap<usize, Vec<f64>> {
    debug_assert!(alpha >= 1);
    if !uploading {
        return BTreeMap::new();
    }
    plan.stored_set
        .iter()
        .zip(grads)
        .map(|(&k, g)| {
            let scale = alpha as f64 / plan.inclusion_probs[k];
            (k, g.iter().map(|v| scale * v).collect())
        })
        .collect()
}

/// Window version of [`grad_estimates`].
pub fn batched_grad_estimates(
    plan: &RoundPlan,
    uploading: bool,
    alpha: usize,
    per_round: &[Vec<Vec<f64>>],
) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: Vec<Vec<f64>> = Vec::new();
    for round in per_round {
        if sums.is_empty() {
            sums = round.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for (s, g) in sums.iter_mut().zip(round) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    grad_estimates(plan, uploading, alpha, &sums)
}

/// Multiplicative update in the log domain; models with zero estimate are unchanged.
pub fn update_weights(log_weights: &mut [f64], lr: f64, estimates: &[f64]) {
    for (w, &e) in log_weights.iter_mut().zip(estimates) {
        if e != 0.0 {
            *w -= lr * e;
        }
    }
}

/// `θ_{ik,t+1} = P_R(θ_{k,t} − η_f ∇ℓ̂_{ik,t})`.
pub fn local_update(theta: &[f64], grad_estimate: &[f64], lr_finetune: f64, radius: f64) -> Vec<f64> {
    let mut out: Vec<f64> = theta.iter().zip(grad_estimate).map(|(t, g)| t - lr_finetune * g).collect();
    project_in_place(&mut out, radius);
    out
}
