#![allow(dead_code)]

use rand::Rng;

use ofms_core::baselines::AlgorithmKind;
use ofms_core::environment::{DataStream, StreamSpec};
use ofms_core::ledger::TraceRow;
use ofms_core::model::{project_in_place, Family, SyntheticDictionary};
use ofms_core::rng::{substream, Purpose};
use ofms_core::sim::{DictionarySource, Prepared, RunConfig};

pub const SEEDS: u64 = 20;

/// Ten linear-regression models in four features, five clients.
pub fn synthetic_config(horizon: u64, budget: f64, period: u64, seed: u64) -> RunConfig {
    let mut stream = StreamSpec::synthetic_regression(4, horizon);
    stream.seed = Some(77);
    stream.noise = 0.1;
    RunConfig {
        dictionary: DictionarySource::Synthetic(SyntheticDictionary {
            count: 10,
            family: Family::LinearRegression,
            dim: 4,
            classes: 2,
            costs: vec![0.89, 1.0],
            bandwidths: None,
            radius_min: 0.002,
            radius_max: 0.5,
            init_scale: 0.05,
            grad_bound: None,
            seed: 5,
        }),
        models: Some(10),
        clients: 5,
        horizon,
        budgets: vec![budget],
        bandwidth_budget: 10.0,
        period,
        algorithm: AlgorithmKind::OfmsFt,
        lr_select: None,
        lr_finetune: None,
        seed,
        stream,
        output_dir: None,
        parallel: false,
        record_trace: false,
        hindsight: true,
        resume_from: None,
        curve_points: 10,
    }
}

/// Every client stores every model and every client fits in one upload group.
pub fn full_information_config(horizon: u64, seed: u64) -> RunConfig {
    let mut c = synthetic_config(horizon, 10.0, 1, seed);
    c.bandwidth_budget = 50.0;
    c.lr_select = Some(vec![0.05]);
    c.lr_finetune = Some(0.1);
    c.record_trace = true;
    c.hindsight = false;
    c
}

fn softmax(log_weights: &[f64]) -> Vec<f64> {
    let top = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = log_weights.iter().map(|w| (w - top).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn inverse_cdf(pmf: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    pmf.iter().rposition(|&p| p > 0.0).unwrap_or(pmf.len() - 1)
}

/// Hedge over all models with every client updating every model each round.
pub fn hedge_reference(p: &Prepared) -> Vec<TraceRow> {
    let cfg = &p.config;
    let n = cfg.clients;
    let k = p.models.len();
    let mut spec = cfg.stream.clone();
    spec.horizon = cfg.horizon;
    let stream = DataStream::new(&spec, n, cfg.seed).unwrap();
    let mut models = p.models.clone();
    let mut log_w = vec![vec![0.0f64; k]; n];
    let mut rows = Vec::new();
    for t in 1..=cfg.horizon {
        let mut locals: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
        for (i, weights) in log_w.iter_mut().enumerate() {
            let pmf = softmax(weights);
            let u: f64 = substream(cfg.seed, Purpose::Select, i as u64, t).random();
            let chosen = inverse_cdf(&pmf, u);
            let x = stream.next_sample(i, t).unwrap();
            let mut mine = Vec::with_capacity(k);
            for (j, m) in models.iter().enumerate() {
                let loss = m.loss(&x).unwrap();
                rows.push(TraceRow {
                    round: t,
                    client: i,
                    model: j,
                    loss,
                    chosen: j == chosen,
                    stored: true,
                });
                if loss != 0.0 {
                    weights[j] -= p.lr_select[i] * loss;
                }
                let g = m.loss_grad(&x).unwrap();
                let mut step: Vec<f64> = m.params.iter().zip(&g).map(|(a, b)| a - p.lr_finetune * b).collect();
                project_in_place(&mut step, m.radius);
                mine.push(step);
            }
            locals.push(mine);
        }
        for (j, m) in models.iter_mut().enumerate() {
            let mut diff = vec![0.0; m.params.len()];
            for local in &locals {
                for ((d, a), b) in diff.iter_mut().zip(&m.params).zip(&local[j]) {
                    *d += a - b;
                }
            }
            for (a, d) in m.params.iter_mut().zip(&diff) {
                *a -= d / n as f64;
            }
            project_in_place(&mut m.params, m.radius);
        }
    }
    rows
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Element-wise mean of equal-length rows.
pub fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let width = rows[0].len();
    (0..width).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64).collect()
}

/// Known losses, gradients, selection PMF and cluster structure for one client.
pub struct EstimatorFixture {
    pub name: &'static str,
    pub costs: Vec<f64>,
    pub budget: f64,
    pub pmf: Vec<f64>,
    pub losses: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
    pub alpha: usize,
}

pub fn estimator_fixtures() -> Vec<EstimatorFixture> {
    let normalise = |w: &[f64]| {
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let grads = |k: usize| -> Vec<Vec<f64>> {
        (0..k).map(|j| vec![0.3 - 0.1 * j as f64, (j as f64 * 0.7).sin()]).collect()
    };
    vec![
        EstimatorFixture {
            name: "four equal models, two slots",
            costs: vec![1.0; 4],
            budget: 2.0,
            pmf: vec![0.25; 4],
            losses: vec![0.2, 0.5, 0.7, 0.9],
            grads: grads(4),
            alpha: 1,
        },
        EstimatorFixture {
            name: "six mixed costs, skewed pmf",
            costs: vec![0.89, 1.0, 0.89, 1.0, 0.89, 1.0],
            budget: 3.0,
            pmf: normalise(&[6.0, 1.0, 2.0, 0.5, 3.0, 1.5]),
            losses: vec![0.05, 0.4, 0.33, 0.8, 0.61, 0.12],
            grads: grads(6),
            alpha: 2,
        },
        EstimatorFixture {
            name: "eight uneven costs, peaked pmf",
            costs: vec![0.3, 0.5, 0.7, 1.0, 0.2, 0.9, 0.4, 0.6],
            budget: 1.9,
            pmf: normalise(&[8.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0]),
            losses: vec![0.9, 0.1, 0.45, 0.3, 0.77, 0.5, 0.66, 0.2],
            grads: grads(8),
            alpha: 3,
        },
        EstimatorFixture {
            name: "five models, everything fits",
            costs: vec![1.0, 2.0, 0.5, 1.5, 1.0],
            budget: 10.0,
            pmf: normalise(&[1.0, 2.0, 3.0, 4.0, 5.0]),
            losses: vec![0.3, 0.6, 0.1, 0.0, 1.0],
            grads: grads(5),
            alpha: 3,
        },
        EstimatorFixture {
            name: "ten models at the smallest budget",
            costs: vec![0.89, 1.0, 0.89, 1.0, 0.89, 1.0, 0.89, 1.0, 0.89, 1.0],
            budget: 2.0,
            pmf: softmax(&[0.0, -0.3, -1.0, 0.4, -0.2, -2.0, 0.1, -0.6, -0.05, -1.4]),
            losses: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.55],
            grads: grads(10),
            alpha: 2,
        },
    ]
}

/// Largest `|mean − truth| / SE` over models (and gradient coordinates).
#[derive(Debug, Clone, Copy)]
pub struct UnbiasednessReport {
    pub loss_z: f64,
    pub grad_z: f64,
}

impl UnbiasednessReport {
    pub fn within(&self, z: f64) -> bool {
        self.loss_z <= z && self.grad_z <= z
    }
}

struct Moments {
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn z(&self, truth: f64, n: f64) -> f64 {
        let m = self.sum / n;
        let var = (self.sum_sq / n - m * m).max(0.0) * n / (n - 1.0);
        let se = (var / n).sqrt();
        let err = (m - truth).abs();
        if se > 0.0 {
            err / se
        } else if err <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Resamples the client's plan and the upload group `draws` times.
pub fn check_unbiased(f: &EstimatorFixture, draws: usize, seed: u64) -> UnbiasednessReport {
    use ofms_core::client::{grad_estimates, loss_estimates, ClientState};
    use ofms_core::cost::Cost;

    let costs: Vec<Cost> = f.costs.iter().map(|&c| Cost::from_f64(c).unwrap()).collect();
    let mut client = ClientState::new(0, &costs, Cost::from_f64(f.budget).unwrap(), 0.1, 0.1, seed).unwrap();
    client.log_weights = f.pmf.iter().map(|p| p.ln()).collect();
    let k = costs.len();
    let dim = f.grads[0].len();
    let zero = || Moments { sum: 0.0, sum_sq: 0.0 };
    let mut loss_m: Vec<Moments> = (0..k).map(|_| zero()).collect();
    let mut grad_m: Vec<Vec<Moments>> = (0..k).map(|_| (0..dim).map(|_| zero()).collect()).collect();
    let mut select = substream(seed, Purpose::Select, 0, 0);
    let mut cluster = substream(seed, Purpose::Cluster, 0, 0);
    let mut group = substream(seed, Purpose::Group, 0, 0);
    for _ in 0..draws {
        let plan = client.plan_with(&costs, &mut select, &mut cluster);
        let stored_losses: Vec<f64> = plan.stored_set.iter().map(|&j| f.losses[j]).collect();
        let stored_grads: Vec<Vec<f64>> = plan.stored_set.iter().map(|&j| f.grads[j].clone()).collect();
        let uploading = group.random_range(0..f.alpha) == 0;
        let est = loss_estimates(&plan, &stored_losses);
        let g = grad_estimates(&plan, uploading, f.alpha, &stored_grads);
        for j in 0..k {
            loss_m[j].push(est[j]);
            let gj = g.get(&j);
            for (c, m) in grad_m[j].iter_mut().enumerate() {
                m.push(gj.map_or(0.0, |v| v[c]));
            }
        }
    }
    let n = draws as f64;
    let loss_z = (0..k).map(|j| loss_m[j].z(f.losses[j], n)).fold(0.0, f64::max);
    let grad_z = (0..k)
        .flat_map(|j| (0..dim).map(move |c| (j, c)))
        .map(|(j, c)| grad_m[j][c].z(f.grads[j][c], n))
        .fold(0.0, f64::max);
    UnbiasednessReport { loss_z, grad_z }
}
