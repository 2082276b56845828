mod common;

use ofms_core::client::{batched_grad_estimates, batched_loss_estimates, inclusion_probability, ClientState};
use ofms_core::cost::Cost;
use ofms_core::rng::{substream, Purpose};

use common::{check_unbiased, estimator_fixtures};

#[test]
fn single_round_estimators_are_unbiased() {
    for (n, f) in estimator_fixtures().iter().enumerate() {
        let r = check_unbiased(f, 100_000, 1000 + n as u64);
        assert!(r.within(3.0), "{}: {r:?}", f.name);
    }
}

#[test]
fn equal_costs_two_slots_enumerated() {
    let costs = vec![Cost::from_units(1); 4];
    let client = ClientState::new(0, &costs, Cost::from_units(2), 0.1, 0.1, 0).unwrap();
    let pmf = [0.25; 4];
    let table = client.cluster_table();
    let mut stored = [0.0; 4];
    for chosen in 0..4 {
        let packing = table.clusters(chosen);
        assert_eq!(packing.bin_count(), 3);
        for bin in &packing.bins {
            let weight = pmf[chosen] / packing.bin_count() as f64;
            stored[chosen] += weight;
            for &k in bin {
                stored[k] += weight;
            }
        }
    }
    let q = inclusion_probability(&pmf, &client.cluster_counts());
    for k in 0..4 {
        assert!((stored[k] - 0.5).abs() < 1e-15);
        assert!((q[k] - 0.5).abs() < 1e-15);
    }
}

#[test]
fn inclusion_frequency_matches_q() {
    let costs: Vec<Cost> = [0.89, 1.0, 0.7, 0.5, 1.0, 0.3].iter().map(|&c| Cost::from_f64(c).unwrap()).collect();
    let mut client = ClientState::new(0, &costs, Cost::from_f64(2.2).unwrap(), 0.1, 0.1, 0).unwrap();
    client.log_weights = vec![0.5, -0.2, 0.0, 1.1, -1.0, 0.3];
    let mut select = substream(8, Purpose::Select, 0, 0);
    let mut cluster = substream(8, Purpose::Cluster, 0, 0);
    let draws = 200_000;
    let mut hits = vec![0usize; costs.len()];
    let mut q = Vec::new();
    for _ in 0..draws {
        let plan = client.plan_with(&costs, &mut select, &mut cluster);
        for &k in &plan.stored_set {
            hits[k] += 1;
        }
        q = plan.inclusion_probs;
    }
    for (k, &h) in hits.iter().enumerate() {
        let freq = h as f64 / draws as f64;
        let se = (q[k] * (1.0 - q[k]) / draws as f64).sqrt();
        assert!((freq - q[k]).abs() <= 4.0 * se.max(1e-9), "model {k}: {freq} vs {}", q[k]);
    }
}

#[test]
fn window_estimators_are_unbiased_for_window_sums() {
    let costs = vec![Cost::from_units(1); 5];
    let mut client = ClientState::new(0, &costs, Cost::from_units(2), 0.1, 0.1, 0).unwrap();
    client.log_weights = vec![0.0, 0.7, -0.4, 0.2, -1.2];
    let per_round_losses: Vec<Vec<f64>> = (0..4).map(|t| (0..5).map(|k| 0.1 * ((k + t) % 7) as f64).collect()).collect();
    let per_round_grads: Vec<Vec<Vec<f64>>> =
        (0..4).map(|t| (0..5).map(|k| vec![0.05 * (k as f64 - t as f64), 0.02 * t as f64]).collect()).collect();
    let loss_truth: Vec<f64> = (0..5).map(|k| per_round_losses.iter().map(|r| r[k]).sum()).collect();
    let grad_truth: Vec<Vec<f64>> = (0..5)
        .map(|k| (0..2).map(|c| per_round_grads.iter().map(|r| r[k][c]).sum()).collect())
        .collect();
    let alpha = 2;
    let draws = 100_000;
    let mut select = substream(21, Purpose::Select, 0, 0);
    let mut cluster = substream(21, Purpose::Cluster, 0, 0);
    let mut group = substream(21, Purpose::Group, 0, 0);
    let mut loss_sum = [0.0; 5];
    let mut loss_sq = [0.0; 5];
    let mut grad_sum = vec![vec![0.0; 2]; 5];
    let mut grad_sq = vec![vec![0.0; 2]; 5];
    for _ in 0..draws {
        let plan = client.plan_with(&costs, &mut select, &mut cluster);
        let stored_losses: Vec<Vec<f64>> =
            per_round_losses.iter().map(|r| plan.stored_set.iter().map(|&k| r[k]).collect()).collect();
        let stored_grads: Vec<Vec<Vec<f64>>> =
            per_round_grads.iter().map(|r| plan.stored_set.iter().map(|&k| r[k].clone()).collect()).collect();
        let est = batched_loss_estimates(&plan, &stored_losses);
        let uploading = rand::Rng::random_range(&mut group, 0..alpha) == 0;
        let g = batched_grad_estimates(&plan, uploading, alpha, &stored_grads);
        for k in 0..5 {
            loss_sum[k] += est[k];
            loss_sq[k] += est[k] * est[k];
            if let Some(v) = g.get(&k) {
                for c in 0..2 {
                    grad_sum[k][c] += v[c];
                    grad_sq[k][c] += v[c] * v[c];
                }
            }
        }
    }
    let n = draws as f64;
    for k in 0..5 {
        let m = loss_sum[k] / n;
        let se = ((loss_sq[k] / n - m * m) / n).sqrt();
        assert!((m - loss_truth[k]).abs() <= 3.0 * se, "loss {k}: {m} vs {}", loss_truth[k]);
        for c in 0..2 {
            let gm = grad_sum[k][c] / n;
            let gse = ((grad_sq[k][c] / n - gm * gm) / n).sqrt();
            assert!((gm - grad_truth[k][c]).abs() <= 3.0 * gse.max(1e-12), "grad {k},{c}: {gm} vs {}", grad_truth[k][c]);
        }
    }
}
