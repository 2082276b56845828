//! First-fit-decreasing bin packing and an exact branch-and-bound oracle.
//!
//! Clients use FFD to split the models they did not choose into clusters that
//! fit the leftover memory, and the server uses it to split clients into
//! upload groups that fit the bandwidth budget.

use thiserror::Error;

use crate::cost::Cost;

/// Largest instance [`optimal_pack`] accepts.
pub const OPTIMAL_MAX_ITEMS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PackError {
    #[error("item {id} with cost {cost} exceeds bin capacity {capacity}")]
    ItemExceedsCapacity { id: usize, cost: Cost, capacity: Cost },
    #[error("bin capacity must be positive")]
    ZeroCapacity,
    #[error("duplicate item id {0}")]
    DuplicateId(usize),
    #[error("exact packing supports at most {max} items, got {items}")]
    InstanceTooLarge { items: usize, max: usize },
    #[error("budget {budget} cannot hold models {first} and {second} together (needs {needed})")]
    BudgetTooSmall {
        budget: Cost,
        first: usize,
        second: usize,
        needed: Cost,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Item {
    pub id: usize,
    pub cost: Cost,
}

impl Item {
    pub fn new(id: usize, cost: Cost) -> Self {
        Self { id, cost }
    }
}

/// Assignment of item ids to bins. Bin order is the order bins were opened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packing {
    pub bins: Vec<Vec<usize>>,
    pub capacity: Cost,
}

impl Packing {
    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    /// Bin index holding `id`, if any.
    pub fn bin_of(&self, id: usize) -> Option<usize> {
        self.bins.iter().position(|bin| bin.contains(&id))
    }

    /// Checks the partition and capacity invariants against `items`.
    pub fn is_valid_for(&self, items: &[Item]) -> bool {
        let mut seen: Vec<usize> = self.bins.iter().flatten().copied().collect();
        seen.sort_unstable();
        let mut ids: Vec<usize> = items.iter().map(|it| it.id).collect();
        ids.sort_unstable();
        if seen != ids {
            return false;
        }
        self.bins.iter().all(|bin| {
            let load: Cost = bin
                .iter()
                .map(|id| items.iter().find(|it| it.id == *id).map(|it| it.cost).unwrap_or_default())
                .sum();
            load <= self.capacity
        })
    }
}

fn validate(items: &[Item], capacity: Cost) -> Result<(), PackError> {
    if items.is_empty() {
        return Ok(());
    }
    if capacity.is_zero() {
        return Err(PackError::ZeroCapacity);
    }
    let mut ids: Vec<usize> = items.iter().map(|it| it.id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(PackError::DuplicateId(w[0]));
    }
    if let Some(it) = items.iter().find(|it| it.cost > capacity) {
        return Err(PackError::ItemExceedsCapacity {
            id: it.id,
            cost: it.cost,
            capacity,
        });
    }
    Ok(())
}

/// Items by decreasing cost, ties by ascending id.
fn decreasing(items: &[Item]) -> Vec<Item> {
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.cost.cmp(&a.cost).then(a.id.cmp(&b.id)));
    sorted
}

/// First-fit-decreasing packing.
///
/// An empty item list gives an empty packing for any capacity.
pub fn ffd_pack(items: &[Item], capacity: Cost) -> Result<Packing, PackError> {
    validate(items, capacity)?;
    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut loads: Vec<Cost> = Vec::new();
    for item in decreasing(items) {
        match loads.iter().position(|&load| load + item.cost <= capacity) {
            Some(b) => {
                bins[b].push(item.id);
                loads[b] += item.cost;
            }
            None => {
                bins.push(vec![item.id]);
                loads.push(item.cost);
            }
        }
    }
    Ok(Packing { bins, capacity })
}

/// Minimum-bin packing by depth-first branch and bound.
///
/// Items are placed in decreasing order; a node never tries two open bins with
/// the same load, and a branch is cut as soon as its used bins plus the bins
/// needed for the overflow of the remaining cost cannot beat the incumbent.
pub fn optimal_pack(items: &[Item], capacity: Cost) -> Result<Packing, PackError> {
    if items.len() > OPTIMAL_MAX_ITEMS {
        return Err(PackError::InstanceTooLarge {
            items: items.len(),
            max: OPTIMAL_MAX_ITEMS,
        });
    }
    validate(items, capacity)?;
    if items.is_empty() {
        return Ok(Packing {
            bins: Vec::new(),
            capacity,
        });
    }

    let sorted = decreasing(items);
    let total: u64 = sorted.iter().map(|it| it.cost.micros()).sum();
    let cap = capacity.micros();
    let lower = total.div_ceil(cap) as usize;

    let incumbent = ffd_pack(items, capacity)?;
    if incumbent.bin_count() <= lower.max(1) {
        return Ok(incumbent);
    }

    let mut search = Search {
        items: &sorted,
        cap,
        suffix: suffix_sums(&sorted),
        lower,
        best_bins: incumbent.bin_count(),
        best_assign: None,
        loads: Vec::new(),
        assign: vec![0; sorted.len()],
    };
    search.descend(0);

    match search.best_assign {
        None => Ok(incumbent),
        Some(assign) => {
            let mut bins = vec![Vec::new(); search.best_bins];
            for (item, &b) in sorted.iter().zip(&assign) {
                bins[b].push(item.id);
            }
            Ok(Packing { bins, capacity })
        }
    }
}

fn suffix_sums(items: &[Item]) -> Vec<u64> {
    let mut out = vec![0u64; items.len() + 1];
    for i in (0..items.len()).rev() {
        out[i] = out[i + 1] + items[i].cost.micros();
    }
    out
}

struct Search<'a> {
    items: &'a [Item],
    cap: u64,
    suffix: Vec<u64>,
    lower: usize,
    best_bins: usize,
    best_assign: Option<Vec<usize>>,
    loads: Vec<u64>,
    assign: Vec<usize>,
}

impl Search<'_> {
    fn done(&self) -> bool {
        self.best_bins <= self.lower
    }

    fn descend(&mut self, idx: usize) {
        if self.done() {
            return;
        }
        let used = self.loads.len();
        if idx == self.items.len() {
            if used < self.best_bins {
                self.best_bins = used;
                self.best_assign = Some(self.assign.clone());
            }
            return;
        }
        let free: u64 = self.loads.iter().map(|l| self.cap - l).sum();
        let overflow = self.suffix[idx].saturating_sub(free);
        if used + overflow.div_ceil(self.cap) as usize >= self.best_bins {
            return;
        }

        let cost = self.items[idx].cost.micros();
        let mut tried: Vec<u64> = Vec::new();
        for b in 0..used {
            let load = self.loads[b];
            if load + cost > self.cap || tried.contains(&load) {
                continue;
            }
            tried.push(load);
            self.loads[b] += cost;
            self.assign[idx] = b;
            self.descend(idx + 1);
            self.loads[b] -= cost;
            if self.done() {
                return;
            }
        }
        if used + 1 < self.best_bins {
            self.loads.push(cost);
            self.assign[idx] = used;
            self.descend(idx + 1);
            self.loads.pop();
        }
    }
}

/// `true` when an FFD bin count respects `ffd <= floor(11/9 * opt + 2/3)`.
pub fn within_ffd_guarantee(ffd_bins: usize, optimal_bins: usize) -> bool {
    9 * ffd_bins <= 11 * optimal_bins + 6
}

/// Checks that any two distinct models fit together in `budget`.
pub fn check_pairwise_budget(costs: &[Cost], budget: Cost) -> Result<(), PackError> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[b].cmp(&costs[a]).then(a.cmp(&b)));
    let needed = match order.as_slice() {
        [] => return Ok(()),
        [only] => {
            if costs[*only] <= budget {
                return Ok(());
            }
            (costs[*only], *only, *only)
        }
        [a, b, ..] => {
            let need = costs[*a] + costs[*b];
            if need <= budget {
                return Ok(());
            }
            (need, *a, *b)
        }
    };
    Err(PackError::BudgetTooSmall {
        budget,
        first: needed.1,
        second: needed.2,
        needed: needed.0,
    })
}

/// FFD clusters of the remaining models for every possible chosen model.
///
/// Costs and budgets never change during a run, so the packing a client would
/// compute after choosing model `j` is the same every round and is built once.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTable {
    per_choice: Vec<Packing>,
}

impl ClusterTable {
    pub fn build(costs: &[Cost], budget: Cost) -> Result<Self, PackError> {
        check_pairwise_budget(costs, budget)?;
        let per_choice = (0..costs.len())
            .map(|j| {
                let rest: Vec<Item> = costs
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != j)
                    .map(|(k, &c)| Item::new(k, c))
                    .collect();
                let capacity = budget.checked_sub(costs[j]).unwrap_or(Cost::ZERO);
                ffd_pack(&rest, capacity)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { per_choice })
    }

    pub fn model_count(&self) -> usize {
        self.per_choice.len()
    }

    /// Clusters formed when model `chosen` is picked.
    pub fn clusters(&self, chosen: usize) -> &Packing {
        &self.per_choice[chosen]
    }

    /// `m_{ij}` for every `j`.
    pub fn counts(&self) -> Vec<usize> {
        self.per_choice.iter().map(Packing::bin_count).collect()
    }

    /// `max_j m_{ij}`, floored at one.
    pub fn mu(&self) -> usize {
        self.counts().into_iter().max().unwrap_or(0).max(1)
    }
}

/// `m_{ij}` for every hypothetical chosen model `j`.
pub fn cluster_counts_per_choice(costs: &[Cost], budget: Cost) -> Result<Vec<usize>, PackError> {
    ClusterTable::build(costs, budget).map(|t| t.counts())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(costs: &[f64]) -> Vec<Item> {
        costs
            .iter()
            .enumerate()
            .map(|(i, &c)| Item::new(i, Cost::from_f64(c).unwrap()))
            .collect()
    }

    fn c(x: f64) -> Cost {
        Cost::from_f64(x).unwrap()
    }

    #[test]
    fn equal_costs_fill_exactly() {
        let p = ffd_pack(&items(&[1.0, 1.0, 1.0, 1.0]), c(2.0)).unwrap();
        assert_eq!(p.bins, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn no_pair_fits() {
        let its = items(&[0.89, 0.89, 1.0]);
        let p = ffd_pack(&its, c(1.0)).unwrap();
        assert_eq!(p.bin_count(), 3);
        assert_eq!(p.bins[0], vec![2]);
        assert!(p.is_valid_for(&its));
    }

    #[test]
    fn ties_broken_by_ascending_id() {
        let its = vec![Item::new(5, c(1.0)), Item::new(2, c(1.0)), Item::new(9, c(0.5))];
        let p = ffd_pack(&its, c(1.5)).unwrap();
        assert_eq!(p.bins, vec![vec![2, 9], vec![5]]);
    }

    #[test]
    fn oversized_item_is_rejected() {
        let err = ffd_pack(&items(&[0.5, 2.5]), c(2.0)).unwrap_err();
        assert!(matches!(err, PackError::ItemExceedsCapacity { id: 1, .. }));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let its = vec![Item::new(1, c(0.5)), Item::new(1, c(0.2))];
        assert_eq!(ffd_pack(&its, c(1.0)).unwrap_err(), PackError::DuplicateId(1));
    }

    #[test]
    fn empty_instance() {
        assert_eq!(ffd_pack(&[], c(1.0)).unwrap().bin_count(), 0);
        assert_eq!(optimal_pack(&[], c(1.0)).unwrap().bin_count(), 0);
        assert_eq!(ffd_pack(&[], Cost::ZERO).unwrap().bin_count(), 0);
    }

    #[test]
    fn optimal_small_cases() {
        assert_eq!(optimal_pack(&items(&[1.0, 1.0, 1.0, 1.0]), c(2.0)).unwrap().bin_count(), 2);
        let its = items(&[3.0, 3.0, 2.0, 2.0, 2.0]);
        let p = optimal_pack(&its, c(6.0)).unwrap();
        assert_eq!(p.bin_count(), 2);
        assert!(p.is_valid_for(&its));
        let mut bins: Vec<Vec<usize>> = p.bins.clone();
        for b in &mut bins {
            b.sort_unstable();
        }
        bins.sort();
        assert_eq!(bins, vec![vec![0, 1], vec![2, 3, 4]]);
    }

    #[test]
    fn optimal_beats_ffd_on_classic_instance() {
        // FFD opens three bins here; {4,2,2} {3,3,2} uses two.
        let its = items(&[4.0, 3.0, 3.0, 2.0, 2.0, 2.0]);
        assert_eq!(ffd_pack(&its, c(8.0)).unwrap().bin_count(), 3);
        assert_eq!(optimal_pack(&its, c(8.0)).unwrap().bin_count(), 2);
        let its = items(&[5.0, 4.0, 3.0, 3.0, 3.0, 2.0]);
        let ffd = ffd_pack(&its, c(10.0)).unwrap().bin_count();
        let opt = optimal_pack(&its, c(10.0)).unwrap();
        assert_eq!(ffd, 3);
        assert_eq!(opt.bin_count(), 2);
        assert!(opt.is_valid_for(&its));
    }

    #[test]
    fn optimal_rejects_large_instances() {
        let its = items(&[0.1; 13]);
        assert!(matches!(
            optimal_pack(&its, c(1.0)),
            Err(PackError::InstanceTooLarge { items: 13, max: 12 })
        ));
    }

    #[test]
    fn guarantee_arithmetic() {
        assert!(within_ffd_guarantee(1, 1));
        assert!(!within_ffd_guarantee(2, 1));
        assert!(within_ffd_guarantee(3, 2));
        assert!(!within_ffd_guarantee(4, 2));
        assert!(within_ffd_guarantee(11, 9));
        assert!(!within_ffd_guarantee(12, 9));
    }

    #[test]
    fn uniform_cost_cluster_counts() {
        let costs = vec![c(1.0); 5];
        assert_eq!(cluster_counts_per_choice(&costs, c(3.0)).unwrap(), vec![2; 5]);
        let costs = vec![c(0.7); 21];
        assert_eq!(cluster_counts_per_choice(&costs, c(3.5)).unwrap(), vec![5; 21]);
    }

    #[test]
    fn mixed_cost_cluster_counts_match_optimal() {
        let costs = vec![c(1.0), c(1.0), c(0.66), c(0.66)];
        let budget = c(2.0);
        let counts = cluster_counts_per_choice(&costs, budget).unwrap();
        for (j, &m) in counts.iter().enumerate() {
            let rest: Vec<Item> = (0..4).filter(|&k| k != j).map(|k| Item::new(k, costs[k])).collect();
            let opt = optimal_pack(&rest, c(2.0).checked_sub(costs[j]).unwrap()).unwrap();
            assert_eq!(m, opt.bin_count(), "choice {j}");
        }
        assert_eq!(counts, vec![3, 3, 3, 3]);
    }

    #[test]
    fn single_model_has_no_clusters() {
        let t = ClusterTable::build(&[c(1.0)], c(1.0)).unwrap();
        assert_eq!(t.counts(), vec![0]);
        assert_eq!(t.mu(), 1);
    }

    #[test]
    fn pairwise_budget_check() {
        let costs = vec![c(1.0), c(0.5), c(0.9)];
        assert!(check_pairwise_budget(&costs, c(1.9)).is_ok());
        let err = check_pairwise_budget(&costs, c(1.8)).unwrap_err();
        assert_eq!(
            err,
            PackError::BudgetTooSmall {
                budget: c(1.8),
                first: 0,
                second: 2,
                needed: c(1.9)
            }
        );
        assert!(ClusterTable::build(&costs, c(1.8)).is_err());
    }

    #[test]
    fn bin_of_finds_cluster() {
        let p = ffd_pack(&items(&[1.0, 1.0, 1.0, 1.0]), c(2.0)).unwrap();
        assert_eq!(p.bin_of(3), Some(1));
        assert_eq!(p.bin_of(7), None);
    }
}
