//! Comparison learners: server-side and per-client Exp3, fixed and random
//! memory-feasible subsets.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::selection_pmf;
use crate::cost::Cost;
use crate::rng::draw_index;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("budget {budget} cannot hold model {model} (cost {cost})")]
    BudgetTooSmall { budget: Cost, model: usize, cost: Cost },
    #[error("no models to choose from")]
    Empty,
    #[error("model {model} is not in the dictionary of {models}")]
    UnknownModel { model: usize, models: usize },
}

/// Algorithm run by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlgorithmKind {
    #[default]
    OfmsFt,
    /// One Exp3 learner at the server; every client uses its choice.
    Mab,
    /// Per-client Exp3 over a fixed id-prefix subset, no fine-tuning.
    NonFedOms,
    /// Random budget-feasible subset each round, uniform choice, unscaled fine-tuning.
    RmsFt,
    /// Shared id-prefix subset fitting every client, per-client Exp3, fine-tuning.
    BFedOmft,
    /// Online projected gradient descent on one designated model.
    SingleModelOgd { model: usize },
}

impl AlgorithmKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::OfmsFt => "ofms-ft",
            Self::Mab => "mab",
            Self::NonFedOms => "non-fed-oms",
            Self::RmsFt => "rms-ft",
            Self::BFedOmft => "b-fed-omft",
            Self::SingleModelOgd { .. } => "single-model-ogd",
        }
    }

    /// Whether the algorithm fine-tunes models at the server.
    pub fn fine_tunes(&self) -> bool {
        !matches!(self, Self::Mab | Self::NonFedOms)
    }
}

/// Exp3 over `arms` arms with importance-weighted single-arm loss feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct Exp3 {
    pub log_weights: Vec<f64>,
    pub rate: f64,
}

impl Exp3 {
    pub fn new(arms: usize, rate: f64) -> Self {
        Self {
            log_weights: vec![0.0; arms],
            rate,
        }
    }

    /// `√(ln K/(K·rounds))`, with `ln K` replaced by 1 for a single arm.
    pub fn default_rate(arms: usize, rounds: u64) -> f64 {
        let k = arms.max(1) as f64;
        let ln_k = if arms > 1 { k.ln() } else { 1.0 };
        (ln_k / (k * rounds.max(1) as f64)).sqrt()
    }

    pub fn arms(&self) -> usize {
        self.log_weights.len()
    }

    pub fn pmf(&self) -> Vec<f64> {
        selection_pmf(&self.log_weights)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let pmf = self.pmf();
        (draw_index(&pmf, rng), pmf)
    }

    /// `ln z_a −= η · loss / p_a` for the pulled arm only.
    pub fn update(&mut self, arm: usize, loss: f64, prob: f64) {
        if loss != 0.0 {
            self.log_weights[arm] -= self.rate * loss / prob;
        }
    }
}

/// One MAB round: draw the shared model, then feed back the mean client loss.
pub fn mab_step<R, F>(state: &mut Exp3, rng: &mut R, client_losses: F) -> usize
where
    R: Rng + ?Sized,
    F: FnOnce(usize) -> Vec<f64>,
{
    let (arm, pmf) = state.draw(rng);
    let losses = client_losses(arm);
    let mean = if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    state.update(arm, mean, pmf[arm]);
    arm
}

/// Longest ascending-id prefix whose total cost fits `budget`.
pub fn id_prefix_subset(costs: &[Cost], budget: Cost) -> Result<Vec<usize>, BaselineError> {
    if costs.is_empty() {
        return Err(BaselineError::Empty);
    }
    let mut used = Cost::ZERO;
    let mut subset = Vec::new();
    for (k, &c) in costs.iter().enumerate() {
        if used + c > budget {
            break;
        }
        used += c;
        subset.push(k);
    }
    if subset.is_empty() {
        return Err(BaselineError::BudgetTooSmall {
            budget,
            model: 0,
            cost: costs[0],
        });
    }
    Ok(subset)
}

/// Shared subset for B-Fed-OMFT: the id prefix that fits the smallest budget.
pub fn shared_prefix_subset(costs: &[Cost], budgets: &[Cost]) -> Result<Vec<usize>, BaselineError> {
    let min_budget = budgets.iter().copied().min().ok_or(BaselineError::Empty)?;
    id_prefix_subset(costs, min_budget)
}

/// Random feasible subset: the longest prefix of a uniformly random
/// permutation that fits `budget`. Returned sorted by index.
pub fn random_feasible_subset<R: Rng + ?Sized>(costs: &[Cost], budget: Cost, rng: &mut R) -> Result<Vec<usize>, BaselineError> {
    if costs.is_empty() {
        return Err(BaselineError::Empty);
    }
    if let Some((model, &cost)) = costs.iter().enumerate().find(|&(_, &c)| c > budget) {
        return Err(BaselineError::BudgetTooSmall { budget, model, cost });
    }
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.shuffle(rng);
    let mut used = Cost::ZERO;
    let mut subset = Vec::new();
    for k in order {
        if used + costs[k] > budget {
            break;
        }
        used += costs[k];
        subset.push(k);
    }
    subset.sort_unstable();
    Ok(subset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Purpose};

    fn units(v: &[f64]) -> Vec<Cost> {
        v.iter().map(|&u| Cost::from_f64(u).unwrap()).collect()
    }

    #[test]
    fn single_arm_mab() {
        let mut e = Exp3::new(1, 0.3);
        let mut rng = substream(0, Purpose::Select, 0, 0);
        for _ in 0..20 {
            assert_eq!(mab_step(&mut e, &mut rng, |_| vec![0.4, 0.6]), 0);
        }
    }

    #[test]
    fn uniform_initial_pmf() {
        let e = Exp3::new(3, 0.1);
        for p in e.pmf() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn exp3_update_only_touches_pulled_arm() {
        let mut e = Exp3::new(3, 0.5);
        e.update(1, 0.2, 0.25);
        assert_eq!(e.log_weights, vec![0.0, -0.4, 0.0]);
    }

    #[test]
    fn prefix_subsets() {
        let costs = units(&[1.0, 1.0, 0.5, 2.0]);
        assert_eq!(id_prefix_subset(&costs, Cost::from_units(2)).unwrap(), vec![0, 1]);
        assert_eq!(id_prefix_subset(&costs, Cost::from_f64(2.6).unwrap()).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            id_prefix_subset(&costs, Cost::from_f64(0.5).unwrap()),
            Err(BaselineError::BudgetTooSmall { model: 0, .. })
        ));
        let shared = shared_prefix_subset(&costs, &[Cost::from_units(5), Cost::from_units(2)]).unwrap();
        assert_eq!(shared, vec![0, 1]);
    }

    #[test]
    fn full_budget_prefix_is_everything() {
        let costs = units(&[1.0; 5]);
        assert_eq!(id_prefix_subset(&costs, Cost::from_units(5)).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn random_subsets_fit_and_vary() {
        let costs = units(&[1.0, 0.89, 1.0, 0.89, 1.0, 0.89]);
        let budget = Cost::from_units(2);
        let mut rng = substream(4, Purpose::Subset, 0, 0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let s = random_feasible_subset(&costs, budget, &mut rng).unwrap();
            let used: Cost = s.iter().map(|&k| costs[k]).sum();
            assert!(used <= budget);
            assert!(!s.is_empty() && s.len() <= 2);
            seen.insert(s);
        }
        assert!(seen.len() > 5);
    }
}
