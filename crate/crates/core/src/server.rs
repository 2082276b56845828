//! Server-side parameter store, bandwidth-constrained grouping and aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binpack::{ffd_pack, Item, PackError};
use crate::cost::Cost;
use crate::model::{project_in_place, ModelEntry};
use crate::rng::{NamedStream, Purpose, SERVER_ACTOR};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("client {client} needs bandwidth {need} but the budget is {budget}")]
    ClientExceedsBandwidth { client: usize, need: Cost, budget: Cost },
    #[error("update from unknown client {0}")]
    UnknownClient(usize),
    #[error("update for unknown model {0}")]
    UnknownModel(usize),
    #[error("update for model {model} has {got} parameters, expected {expected}")]
    ParamLength { model: usize, expected: usize, got: usize },
    #[error("no client groups have been formed")]
    NoGroups,
    #[error("bandwidth packing failed: {0}")]
    Pack(#[from] PackError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-client map `model index → locally updated parameters`.
pub type ClientUpdates = BTreeMap<usize, BTreeMap<usize, Vec<f64>>>;

#[derive(Debug, Clone)]
pub struct ServerState {
    pub models: Vec<ModelEntry>,
    pub groups: Vec<Vec<usize>>,
    pub bandwidth_budget: Cost,
    pub lr_finetune: f64,
    pub clients: usize,
    pub stream: NamedStream,
}

impl ServerState {
    pub fn new(models: Vec<ModelEntry>, clients: usize, bandwidth_budget: Cost, lr_finetune: f64, seed: u64) -> Self {
        Self {
            models,
            groups: Vec::new(),
            bandwidth_budget,
            lr_finetune,
            clients,
            stream: NamedStream::new(seed, SERVER_ACTOR),
        }
    }

    /// Number of groups `α` from the last call to [`ServerState::form_groups`].
    pub fn alpha(&self) -> usize {
        self.groups.len()
    }

    pub fn form_groups(&mut self, needs: &[Cost]) -> Result<usize, ServerError> {
        self.groups = form_groups(needs, self.bandwidth_budget)?;
        Ok(self.groups.len())
    }

    /// Index `ι_t` of the uploading group for `round`.
    pub fn sample_group(&self, round: u64) -> Result<usize, ServerError> {
        let mut rng = self.stream.at(Purpose::Group, round);
        sample_group_with(&self.groups, &mut rng)
    }

    pub fn group(&self, index: usize) -> &[usize] {
        &self.groups[index]
    }

    pub fn aggregate(&mut self, updates: &ClientUpdates) -> Result<(), ServerError> {
        aggregate(&mut self.models, updates, self.clients)
    }

    pub fn checkpoint(&self, round: u64) -> Checkpoint {
        Checkpoint {
            round,
            models: self
                .models
                .iter()
                .map(|m| CheckpointModel {
                    id: m.id,
                    params: m.params.clone(),
                })
                .collect(),
        }
    }

    /// Overwrites parameters from a checkpoint, matching models by id.
    pub fn restore(&mut self, checkpoint: &Checkpoint) -> Result<(), ServerError> {
        for entry in &checkpoint.models {
            let model = self
                .models
                .iter_mut()
                .find(|m| m.id == entry.id)
                .ok_or(ServerError::UnknownModel(entry.id))?;
            if model.params.len() != entry.params.len() {
                return Err(ServerError::ParamLength {
                    model: entry.id,
                    expected: model.params.len(),
                    got: entry.params.len(),
                });
            }
            model.params.clone_from(&entry.params);
        }
        Ok(())
    }
}

/// FFD packing of clients (items sized by `e_i`) into upload groups of capacity `E`.
pub fn form_groups(needs: &[Cost], budget: Cost) -> Result<Vec<Vec<usize>>, ServerError> {
    if let Some((client, &need)) = needs.iter().enumerate().find(|&(_, &e)| e > budget) {
        return Err(ServerError::ClientExceedsBandwidth { client, need, budget });
    }
    let items: Vec<Item> = needs.iter().enumerate().map(|(i, &e)| Item::new(i, e)).collect();
    let mut groups = ffd_pack(&items, budget)?.bins;
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(groups)
}

pub fn sample_group_with<R: Rng + ?Sized>(groups: &[Vec<usize>], rng: &mut R) -> Result<usize, ServerError> {
    if groups.is_empty() {
        return Err(ServerError::NoGroups);
    }
    Ok(rng.random_range(0..groups.len()))
}

/// `θ_{k,t+1} = P_R(θ_{k,t} − (1/N) Σ_{i∈V_k} (θ_{k,t} − θ_{ik,t+1}))`.
///
/// Differences are summed in ascending client order; models nobody updated
/// keep their parameters.
pub fn aggregate(models: &mut [ModelEntry], updates: &ClientUpdates, clients: usize) -> Result<(), ServerError> {
    for (&client, per_model) in updates {
        if client >= clients {
            return Err(ServerError::UnknownClient(client));
        }
        for (&k, params) in per_model {
            let model = models.get(k).ok_or(ServerError::UnknownModel(k))?;
            if params.len() != model.params.len() {
                return Err(ServerError::ParamLength {
                    model: k,
                    expected: model.params.len(),
                    got: params.len(),
                });
            }
        }
    }
    let n = clients as f64;
    for (k, model) in models.iter_mut().enumerate() {
        let mut delta = vec![0.0; model.params.len()];
        let mut touched = false;
        for per_model in updates.values() {
            if let Some(local) = per_model.get(&k) {
                touched = true;
                for ((d, t), l) in delta.iter_mut().zip(&model.params).zip(local) {
                    *d += t - l;
                }
            }
        }
        if touched {
            for (t, d) in model.params.iter_mut().zip(&delta) {
                *t -= d / n;
            }
            project_in_place(&mut model.params, model.radius);
        }
    }
    Ok(())
}

/// Gradient form of the aggregation step, without projection:
/// `θ_k − (η_f/N) Σ_i ∇ℓ̂_{ik}`.
pub fn aggregate_gradients(
    theta: &[Vec<f64>],
    gradient_estimates: &BTreeMap<usize, BTreeMap<usize, Vec<f64>>>,
    lr_finetune: f64,
    clients: usize,
) -> Vec<Vec<f64>> {
    let mut out = theta.to_vec();
    for (k, params) in out.iter_mut().enumerate() {
        let mut sum = vec![0.0; params.len()];
        for per_model in gradient_estimates.values() {
            if let Some(g) = per_model.get(&k) {
                for (s, v) in sum.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        for (p, s) in params.iter_mut().zip(&sum) {
            *p -= lr_finetune / clients as f64 * s;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointModel {
    pub id: usize,
    pub params: Vec<f64>,
}

/// Snapshot of every model's parameters after `round` rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round: u64,
    pub models: Vec<CheckpointModel>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, ServerError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ServerError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ServerError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ServerError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
