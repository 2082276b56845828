//! Run configuration, the round loop and experiment sweeps.
//!
//! A run proceeds in communication windows of `period` rounds. At each window
//! start every client plans its stored set, the server groups clients by
//! bandwidth need and samples one group for upload. Losses and gradients are
//! summed over the window at the window-start parameters; selection weights
//! and models change only when the window closes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    id_prefix_subset, random_feasible_subset, shared_prefix_subset, AlgorithmKind, BaselineError, Exp3,
};
use crate::binpack::{check_pairwise_budget, ffd_pack, ClusterTable, Item};
use crate::client::{grad_estimates, local_update, loss_estimates, ClientError, ClientState, RoundPlan};
use crate::cost::Cost;
use crate::environment::{DataStream, EnvError, Normalization, StreamSpec};
use crate::ledger::{
    client_bound, hindsight_optimum, server_bound, tuned_finetune_rate, tuned_select_rate, write_trace, LedgerError,
    OracleOptions, RegretLedger, TraceRow,
};
use crate::model::{load_dictionary, validate_dictionary, ModelEntry, ModelError, Sample, SyntheticDictionary};
use crate::rng::{draw_index, substream, Purpose, SERVER_ACTOR};
use crate::server::{Checkpoint, ClientUpdates, ServerError, ServerState};

/// One problem found while validating a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldIssue {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.field, self.reason)
    }
}

fn join_issues(issues: &[FieldIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {}", join_issues(.0))]
    ConfigInvalid(Vec<FieldIssue>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionarySource {
    Path(PathBuf),
    Synthetic(SyntheticDictionary),
    Inline(Vec<ModelEntry>),
}

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

fn twenty() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dictionary: DictionarySource,
    /// Expected dictionary size `K`; checked when present.
    #[serde(default)]
    pub models: Option<usize>,
    pub clients: usize,
    pub horizon: u64,
    /// Memory budgets `B_i`; a single value applies to every client.
    pub budgets: Vec<f64>,
    pub bandwidth_budget: f64,
    /// Communication period `n`.
    #[serde(default = "one")]
    pub period: u64,
    #[serde(default)]
    pub algorithm: AlgorithmKind,
    /// Selection rates `η_i` (one value or one per client); tuned when absent.
    #[serde(default)]
    pub lr_select: Option<Vec<f64>>,
    #[serde(default)]
    pub lr_finetune: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    pub stream: StreamSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Run client phases on the rayon pool; output is identical either way.
    #[serde(default = "yes")]
    pub parallel: bool,
    #[serde(default = "yes")]
    pub record_trace: bool,
    /// Fit `θ*_k` after the run and report server regret.
    #[serde(default = "yes")]
    pub hindsight: bool,
    /// Start from the parameters in this checkpoint instead of the dictionary's.
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
    /// Number of evenly spaced rounds at which the regret curve is sampled.
    #[serde(default = "twenty")]
    pub curve_points: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String, SimError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A validated config with every default resolved.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub models: Vec<ModelEntry>,
    pub costs: Vec<Cost>,
    pub bandwidths: Vec<Cost>,
    pub budgets: Vec<Cost>,
    pub bandwidth_budget: Cost,
    /// `μ_i = max_j m_{ij}` from the FFD cluster tables.
    pub mus: Vec<usize>,
    /// Group count used to tune `η_f`: FFD of each client's worst-case need.
    pub alpha_tuning: usize,
    pub lr_select: Vec<f64>,
    pub lr_finetune: f64,
}

fn issue(field: &str, reason: impl Into<String>) -> FieldIssue {
    FieldIssue {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn per_client(values: &[f64], clients: usize) -> Option<Vec<f64>> {
    match values.len() {
        1 => Some(vec![values[0]; clients]),
        n if n == clients => Some(values.to_vec()),
        _ => None,
    }
}

/// Largest `Σ_{k∈S} b_k` over every `(I, J)` outcome of a client's plan.
fn worst_case_need(table: &ClusterTable, bandwidths: &[Cost]) -> Cost {
    let mut worst = Cost::ZERO;
    for j in 0..table.model_count() {
        let packing = table.clusters(j);
        if packing.bin_count() == 0 {
            worst = worst.max(bandwidths[j]);
        }
        for bin in &packing.bins {
            let need = bandwidths[j] + bin.iter().map(|&k| bandwidths[k]).sum::<Cost>();
            worst = worst.max(need);
        }
    }
    worst
}

fn ffd_count(needs: &[Cost], capacity: Cost) -> usize {
    let items: Vec<Item> = needs.iter().enumerate().map(|(i, &e)| Item::new(i, e)).collect();
    ffd_pack(&items, capacity).map(|p| p.bin_count()).unwrap_or(0).max(1)
}

pub fn prepare(config: &RunConfig) -> Result<Prepared, SimError> {
    let mut issues = Vec::new();
    let mut models = match &config.dictionary {
        DictionarySource::Path(p) => load_dictionary(p).map_err(|e| issue("dictionary", e.to_string())),
        DictionarySource::Synthetic(s) => s.generate().map_err(|e| issue("dictionary", e.to_string())),
        DictionarySource::Inline(m) => validate_dictionary(m)
            .map(|_| m.clone())
            .map_err(|e| issue("dictionary", e.to_string())),
    }
    .map_err(|e| SimError::ConfigInvalid(vec![e]))?;
    if models.is_empty() {
        return Err(SimError::ConfigInvalid(vec![issue("dictionary", "dictionary is empty")]));
    }
    if let Some(path) = &config.resume_from {
        let ck = Checkpoint::load(path).map_err(|e| SimError::ConfigInvalid(vec![issue("resume_from", e.to_string())]))?;
        let mut server = ServerState::new(models, config.clients, Cost::ZERO, 0.0, 0);
        server
            .restore(&ck)
            .map_err(|e| SimError::ConfigInvalid(vec![issue("resume_from", e.to_string())]))?;
        models = server.models;
    }
    let k = models.len();
    if let Some(expected) = config.models {
        if expected != k {
            issues.push(issue("models", format!("config says {expected} models, dictionary has {k}")));
        }
    }
    let n_clients = config.clients;
    if n_clients == 0 {
        issues.push(issue("clients", "need at least one client"));
    }
    if config.period == 0 {
        issues.push(issue("period", "communication period must be at least 1"));
    }
    if config.stream.dim != models[0].dim && config.stream.kind != crate::environment::StreamKind::Csv {
        issues.push(issue(
            "stream.dim",
            format!("stream has {} features, models expect {}", config.stream.dim, models[0].dim),
        ));
    }
    if let Err(e) = config.stream.validate() {
        issues.push(issue("stream", e.to_string()));
    }
    let budgets_f = per_client(&config.budgets, n_clients.max(1));
    if budgets_f.is_none() {
        issues.push(issue("budgets", format!("give 1 or {n_clients} budgets, got {}", config.budgets.len())));
    }
    let budgets: Vec<Cost> = budgets_f
        .unwrap_or_default()
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| {
            let c = Cost::from_f64(b);
            if c.is_none() {
                issues.push(issue(&format!("budgets[{i}]"), "must be a nonnegative number"));
            }
            c
        })
        .collect();
    let bandwidth_budget = match Cost::from_f64(config.bandwidth_budget) {
        Some(c) if !c.is_zero() => c,
        _ => {
            issues.push(issue("bandwidth_budget", "must be a positive number"));
            Cost::ZERO
        }
    };
    let costs: Vec<Cost> = models.iter().map(|m| m.storage_cost).collect();
    let bandwidths: Vec<Cost> = models.iter().map(|m| m.bandwidth_cost).collect();
    for m in &models {
        if m.bandwidth_cost.is_zero() || m.storage_cost.is_zero() {
            issues.push(issue("dictionary", format!("model {} needs positive storage and bandwidth costs", m.id)));
        }
    }
    let lr_select_override = match &config.lr_select {
        Some(v) => {
            let r = per_client(v, n_clients.max(1));
            match &r {
                None => issues.push(issue("lr_select", format!("give 1 or {n_clients} rates"))),
                Some(rates) if rates.iter().any(|&x| !(x.is_finite() && x > 0.0)) => {
                    issues.push(issue("lr_select", "rates must be positive"))
                }
                _ => {}
            }
            r
        }
        None => None,
    };
    if let Some(r) = config.lr_finetune {
        if !(r.is_finite() && r > 0.0) {
            issues.push(issue("lr_finetune", "rate must be positive"));
        }
    }
    if !issues.is_empty() || budgets.len() != n_clients {
        return Err(SimError::ConfigInvalid(issues));
    }

    let period = config.period;
    let horizon = config.horizon;
    let mut mus = Vec::with_capacity(n_clients);
    let mut worst = Vec::with_capacity(n_clients);
    for (i, &b) in budgets.iter().enumerate() {
        if let Err(e) = check_pairwise_budget(&costs, b) {
            issues.push(issue(&format!("budgets[{i}]"), e.to_string()));
            continue;
        }
        let table = ClusterTable::build(&costs, b).map_err(|e| {
            SimError::ConfigInvalid(vec![issue(&format!("budgets[{i}]"), e.to_string())])
        })?;
        mus.push(table.mu());
        worst.push(worst_case_need(&table, &bandwidths));
    }
    if !issues.is_empty() {
        return Err(SimError::ConfigInvalid(issues));
    }

    let algorithm = config.algorithm;
    let (needs, rate_mus): (Vec<Cost>, Vec<usize>) = match algorithm {
        AlgorithmKind::OfmsFt => (worst.clone(), mus.clone()),
        AlgorithmKind::SingleModelOgd { model } => {
            if model >= k {
                return Err(SimError::ConfigInvalid(vec![issue(
                    "algorithm.model",
                    format!("model {model} is not in the dictionary of {k}"),
                )]));
            }
            let total: Cost = (0..n_clients).map(|_| bandwidths[model]).sum();
            if total > bandwidth_budget {
                return Err(SimError::ConfigInvalid(vec![issue(
                    "bandwidth_budget",
                    format!("every client uploads model {model} each round, needing {total}"),
                )]));
            }
            (vec![bandwidths[model]; n_clients], vec![1; n_clients])
        }
        AlgorithmKind::BFedOmft => {
            let subset = shared_prefix_subset(&costs, &budgets)?;
            let need: Cost = subset.iter().map(|&k| bandwidths[k]).sum();
            (vec![need; n_clients], vec![1; n_clients])
        }
        AlgorithmKind::RmsFt => {
            let mut needs = Vec::with_capacity(n_clients);
            for &b in &budgets {
                let subset = id_prefix_subset(&costs, b)?;
                needs.push(subset.iter().map(|&k| bandwidths[k]).sum());
            }
            (needs, vec![1; n_clients])
        }
        AlgorithmKind::Mab | AlgorithmKind::NonFedOms => (Vec::new(), vec![1; n_clients]),
    };
    if let Some((i, &need)) = needs.iter().enumerate().find(|&(_, &e)| e > bandwidth_budget) {
        return Err(SimError::ConfigInvalid(vec![issue(
            "bandwidth_budget",
            format!("client {i} may need bandwidth {need}, above the budget {bandwidth_budget}"),
        )]));
    }
    let alpha_tuning = if needs.is_empty() { 1 } else { ffd_count(&needs, bandwidth_budget) };

    let lr_select = match lr_select_override {
        Some(r) => r,
        None => match algorithm {
            AlgorithmKind::OfmsFt => mus.iter().map(|&mu| tuned_select_rate(k, mu, period, horizon)).collect(),
            AlgorithmKind::Mab => vec![Exp3::default_rate(k, period * horizon); n_clients],
            AlgorithmKind::NonFedOms => {
                let mut v = Vec::with_capacity(n_clients);
                for &b in &budgets {
                    let arms = id_prefix_subset(&costs, b)?.len();
                    v.push(Exp3::default_rate(arms, period * horizon));
                }
                v
            }
            AlgorithmKind::BFedOmft => {
                let arms = shared_prefix_subset(&costs, &budgets)?.len();
                vec![Exp3::default_rate(arms, period * horizon); n_clients]
            }
            AlgorithmKind::RmsFt | AlgorithmKind::SingleModelOgd { .. } => vec![0.0; n_clients],
        },
    };
    let lr_finetune = config
        .lr_finetune
        .unwrap_or_else(|| tuned_finetune_rate(alpha_tuning, &rate_mus, period, horizon));

    Ok(Prepared {
        config: config.clone(),
        models,
        costs,
        bandwidths,
        budgets,
        bandwidth_budget,
        mus,
        alpha_tuning,
        lr_select,
        lr_finetune,
    })
}

/// Closed-form bounds for a config, using the tuning group count for `α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub models: usize,
    pub clients: usize,
    pub horizon: u64,
    pub period: u64,
    pub mu: Vec<usize>,
    pub alpha: usize,
    pub lr_select: Vec<f64>,
    pub lr_finetune: f64,
    pub client_bound: Vec<f64>,
    pub server_bound: Vec<f64>,
}

fn client_bounds(p: &Prepared) -> Vec<f64> {
    p.lr_select
        .iter()
        .zip(&p.mus)
        .map(|(&eta, &mu)| {
            if eta > 0.0 {
                client_bound(p.models.len(), eta, mu, p.config.period, p.config.horizon)
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

fn server_bounds(p: &Prepared, alpha: usize) -> Vec<f64> {
    p.models
        .iter()
        .map(|m| {
            server_bound(
                m.radius,
                p.lr_finetune,
                &p.mus,
                alpha.max(1),
                m.grad_bound,
                p.config.period,
                p.config.horizon,
            )
        })
        .collect()
}

pub fn bounds(config: &RunConfig) -> Result<BoundsReport, SimError> {
    let p = prepare(config)?;
    Ok(BoundsReport {
        models: p.models.len(),
        clients: p.config.clients,
        horizon: p.config.horizon,
        period: p.config.period,
        mu: p.mus.clone(),
        alpha: p.alpha_tuning,
        lr_select: p.lr_select.clone(),
        lr_finetune: p.lr_finetune,
        client_bound: client_bounds(&p),
        server_bound: server_bounds(&p, p.alpha_tuning),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: u64,
    pub mean_client_regret: f64,
    pub mean_expected_client_regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HindsightSummary {
    pub model: usize,
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub algorithm: String,
    pub seed: u64,
    pub stream_seed: u64,
    pub clients: usize,
    pub models: usize,
    pub horizon: u64,
    pub period: u64,
    pub windows: u64,
    pub lr_select: Vec<f64>,
    pub lr_finetune: f64,
    pub mu: Vec<usize>,
    pub alpha_tuning: usize,
    pub alpha_max: usize,
    pub alpha_mean: f64,
    pub client_regret: Vec<f64>,
    pub expected_client_regret: Vec<f64>,
    pub mean_client_regret: f64,
    pub mean_expected_client_regret: f64,
    pub best_model: Vec<usize>,
    pub client_bound: Vec<f64>,
    pub server_regret: Option<Vec<f64>>,
    pub server_bound: Vec<f64>,
    pub hindsight: Vec<HindsightSummary>,
    pub hindsight_error: Option<String>,
    pub memory_violations: u64,
    pub bandwidth_violations: u64,
    pub q_floor_violations: u64,
    /// `min q_{ik,t} · 2μ_i` over every plan; at least 1 when the floor holds.
    pub min_q_ratio: Option<f64>,
    pub curve: Vec<CurvePoint>,
    pub normalization: Option<Normalization>,
}

impl Metrics {
    pub fn feasible(&self) -> bool {
        self.memory_violations == 0 && self.bandwidth_violations == 0
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub ledger: RegretLedger,
    pub trace: Vec<TraceRow>,
    pub checkpoint: Checkpoint,
    pub final_models: Vec<ModelEntry>,
}

impl RunOutput {
    pub fn trace_csv(&self) -> Result<Vec<u8>, SimError> {
        let mut buf = Vec::new();
        write_trace(&mut buf, &self.trace)?;
        Ok(buf)
    }
}

pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn write_artifacts(dir: &Path, output: &RunOutput) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    let trace_path = dir.join(TRACE_FILE);
    fs::write(&trace_path, output.trace_csv()?).map_err(|e| SimError::io(&trace_path, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    fs::write(&metrics_path, serde_json::to_string_pretty(&output.metrics)?).map_err(|e| SimError::io(&metrics_path, e))?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    output.checkpoint.save(&ck_path)?;
    Ok(())
}

/// What one client does during one window.
#[derive(Debug, Clone)]
struct ClientPlan {
    chosen: usize,
    stored: Vec<usize>,
    pmf: Vec<f64>,
    bandwidth_need: Cost,
    storage_used: Cost,
    /// Set for OFMS-FT, whose estimators need the inclusion probabilities.
    round_plan: Option<RoundPlan>,
}

/// Per-algorithm selection state.
enum Learner {
    Ofms(Vec<ClientState>),
    Mab(Exp3),
    NonFed { subsets: Vec<Vec<usize>>, exp3: Vec<Exp3> },
    Rms,
    BFed { subset: Vec<usize>, exp3: Vec<Exp3> },
    Ogd(usize),
}

/// Losses and gradients one client accumulated over a window.
struct WindowObservation {
    samples: Vec<Sample>,
    /// `[round][model]` losses at the window-start parameters.
    losses: Vec<Vec<f64>>,
    /// Window-summed loss for each stored model (aligned with `stored`).
    loss_sums: Vec<f64>,
    /// Window-summed clipped gradients for each stored model, if uploading.
    grad_sums: Option<Vec<Vec<f64>>>,
}

fn map_clients<T, F>(parallel: bool, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

fn exp3_plan(exp3: &Exp3, subset: &[usize], models: usize, seed: u64, client: usize, round: u64) -> (usize, Vec<f64>) {
    let mut rng = substream(seed, Purpose::Select, client as u64, round);
    let (arm, sub_pmf) = exp3.draw(&mut rng);
    let mut pmf = vec![0.0; models];
    for (&k, &p) in subset.iter().zip(&sub_pmf) {
        pmf[k] = p;
    }
    (subset[arm], pmf)
}

fn curve_rounds(horizon: u64, points: usize) -> Vec<u64> {
    let points = points.max(1) as u64;
    let mut rounds: Vec<u64> = (1..=points).map(|j| (horizon * j).div_ceil(points)).filter(|&r| r > 0).collect();
    rounds.dedup();
    rounds
}

fn curve_point(ledger: &RegretLedger, round: u64) -> CurvePoint {
    let n = ledger.clients.max(1) as f64;
    CurvePoint {
        round,
        mean_client_regret: (0..ledger.clients).map(|i| ledger.client_regret(i)).sum::<f64>() / n,
        mean_expected_client_regret: (0..ledger.clients).map(|i| ledger.expected_client_regret(i)).sum::<f64>() / n,
    }
}

pub fn run(config: &RunConfig) -> Result<RunOutput, SimError> {
    let prepared = prepare(config)?;
    run_prepared(&prepared)
}

pub fn run_prepared(p: &Prepared) -> Result<RunOutput, SimError> {
    let cfg = &p.config;
    let seed = cfg.seed;
    let n_clients = cfg.clients;
    let k_models = p.models.len();
    let horizon = cfg.horizon;
    let period = cfg.period;
    let parallel = cfg.parallel;

    let mut stream_spec = cfg.stream.clone();
    stream_spec.horizon = horizon;
    let stream = DataStream::new(&stream_spec, n_clients, seed)?;
    if stream.dim() != p.models[0].dim {
        return Err(SimError::ConfigInvalid(vec![issue(
            "stream",
            format!("stream has {} features, models expect {}", stream.dim(), p.models[0].dim),
        )]));
    }

    let mut server = ServerState::new(p.models.clone(), n_clients, p.bandwidth_budget, p.lr_finetune, seed);
    let algorithm = cfg.algorithm;
    let mut learner = match algorithm {
        AlgorithmKind::OfmsFt => Learner::Ofms(
            (0..n_clients)
                .map(|i| ClientState::new(i, &p.costs, p.budgets[i], p.lr_select[i], p.lr_finetune, seed))
                .collect::<Result<_, _>>()?,
        ),
        AlgorithmKind::Mab => Learner::Mab(Exp3::new(k_models, p.lr_select[0])),
        AlgorithmKind::NonFedOms => {
            let subsets = p
                .budgets
                .iter()
                .map(|&b| id_prefix_subset(&p.costs, b))
                .collect::<Result<Vec<_>, _>>()?;
            let exp3 = subsets.iter().zip(&p.lr_select).map(|(s, &r)| Exp3::new(s.len(), r)).collect();
            Learner::NonFed { subsets, exp3 }
        }
        AlgorithmKind::RmsFt => Learner::Rms,
        AlgorithmKind::BFedOmft => {
            let subset = shared_prefix_subset(&p.costs, &p.budgets)?;
            let exp3 = p.lr_select.iter().map(|&r| Exp3::new(subset.len(), r)).collect();
            Learner::BFed { subset, exp3 }
        }
        AlgorithmKind::SingleModelOgd { model } => Learner::Ogd(model),
    };

    let mut ledger = RegretLedger::new(n_clients, k_models);
    let mut trace = Vec::new();
    let mut all_samples: Vec<Sample> = Vec::new();
    let mut memory_violations = 0u64;
    let mut bandwidth_violations = 0u64;
    let mut q_floor_violations = 0u64;
    let mut min_q_ratio: Option<f64> = None;
    let mut alpha_max = 0usize;
    let mut alpha_sum = 0usize;
    let mut windows = 0u64;
    let checkpoints = curve_rounds(horizon, cfg.curve_points);
    let mut next_checkpoint = 0usize;
    let mut curve = Vec::new();

    let mut start = 1u64;
    while start <= horizon {
        let len = period.min(horizon - start + 1);
        let end = start + len - 1;
        windows += 1;

        // Plans.
        let plans: Vec<ClientPlan> = match &learner {
            Learner::Ofms(clients) => map_clients(parallel, n_clients, |i| {
                let rp = clients[i].plan_round(&p.bandwidths, start);
                ClientPlan {
                    chosen: rp.chosen_model,
                    stored: rp.stored_set.clone(),
                    pmf: rp.pmf.clone(),
                    bandwidth_need: rp.bandwidth_need,
                    storage_used: rp.storage_used,
                    round_plan: Some(rp),
                }
            }),
            Learner::Mab(exp3) => {
                let mut rng = substream(seed, Purpose::Select, SERVER_ACTOR, start);
                let (arm, pmf) = exp3.draw(&mut rng);
                (0..n_clients)
                    .map(|_| ClientPlan {
                        chosen: arm,
                        stored: vec![arm],
                        pmf: pmf.clone(),
                        bandwidth_need: p.bandwidths[arm],
                        storage_used: p.costs[arm],
                        round_plan: None,
                    })
                    .collect()
            }
            Learner::NonFed { subsets, exp3 } => {
                map_clients(parallel, n_clients, |i| {
                    let (chosen, pmf) = exp3_plan(&exp3[i], &subsets[i], k_models, seed, i, start);
                    ClientPlan {
                        chosen,
                        stored: subsets[i].clone(),
                        pmf,
                        bandwidth_need: subsets[i].iter().map(|&k| p.bandwidths[k]).sum(),
                        storage_used: subsets[i].iter().map(|&k| p.costs[k]).sum(),
                        round_plan: None,
                    }
                })
            }
            Learner::BFed { subset, exp3 } => map_clients(parallel, n_clients, |i| {
                let (chosen, pmf) = exp3_plan(&exp3[i], subset, k_models, seed, i, start);
                ClientPlan {
                    chosen,
                    stored: subset.clone(),
                    pmf,
                    bandwidth_need: subset.iter().map(|&k| p.bandwidths[k]).sum(),
                    storage_used: subset.iter().map(|&k| p.costs[k]).sum(),
                    round_plan: None,
                }
            }),
            Learner::Rms => {
                let planned: Vec<Result<ClientPlan, BaselineError>> = map_clients(parallel, n_clients, |i| {
                    let mut rng = substream(seed, Purpose::Subset, i as u64, start);
                    let stored = random_feasible_subset(&p.costs, p.budgets[i], &mut rng)?;
                    let mut sel = substream(seed, Purpose::Select, i as u64, start);
                    let uniform = vec![1.0 / stored.len() as f64; stored.len()];
                    let chosen = stored[draw_index(&uniform, &mut sel)];
                    let mut pmf = vec![0.0; k_models];
                    for &k in &stored {
                        pmf[k] = 1.0 / stored.len() as f64;
                    }
                    Ok(ClientPlan {
                        chosen,
                        bandwidth_need: stored.iter().map(|&k| p.bandwidths[k]).sum(),
                        storage_used: stored.iter().map(|&k| p.costs[k]).sum(),
                        stored,
                        pmf,
                        round_plan: None,
                    })
                });
                planned.into_iter().collect::<Result<_, _>>()?
            }
            Learner::Ogd(model) => (0..n_clients)
                .map(|_| ClientPlan {
                    chosen: *model,
                    stored: vec![*model],
                    pmf: (0..k_models).map(|k| f64::from(u8::from(k == *model))).collect(),
                    bandwidth_need: p.bandwidths[*model],
                    storage_used: p.costs[*model],
                    round_plan: None,
                })
                .collect(),
        };

        for (i, plan) in plans.iter().enumerate() {
            if plan.storage_used > p.budgets[i] {
                memory_violations += 1;
            }
            if let Some(rp) = &plan.round_plan {
                let floor = 1.0 / (2.0 * p.mus[i] as f64);
                let min_q = rp.inclusion_probs.iter().copied().fold(f64::INFINITY, f64::min);
                if min_q < floor {
                    q_floor_violations += 1;
                }
                let ratio = min_q / floor;
                min_q_ratio = Some(min_q_ratio.map_or(ratio, |r| r.min(ratio)));
            }
        }

        // Upload group.
        let (uploading, alpha): (Vec<bool>, usize) = match algorithm {
            AlgorithmKind::OfmsFt | AlgorithmKind::RmsFt | AlgorithmKind::BFedOmft => {
                let needs: Vec<Cost> = plans.iter().map(|pl| pl.bandwidth_need).collect();
                let alpha = server.form_groups(&needs)?;
                let g = server.sample_group(start)?;
                let mut up = vec![false; n_clients];
                for &i in server.group(g) {
                    up[i] = true;
                }
                (up, alpha)
            }
            AlgorithmKind::SingleModelOgd { .. } => (vec![true; n_clients], 1),
            AlgorithmKind::Mab | AlgorithmKind::NonFedOms => (vec![false; n_clients], 0),
        };
        if alpha > 0 {
            alpha_max = alpha_max.max(alpha);
            alpha_sum += alpha;
        }
        let upload_total: Cost = plans
            .iter()
            .zip(&uploading)
            .filter(|(_, &u)| u)
            .map(|(pl, _)| pl.bandwidth_need)
            .sum();
        if upload_total > p.bandwidth_budget {
            bandwidth_violations += 1;
        }

        // Observe the window.
        let models = &server.models;
        let observations: Vec<Result<WindowObservation, SimError>> = map_clients(parallel, n_clients, |i| {
            let plan = &plans[i];
            let mut obs = WindowObservation {
                samples: Vec::with_capacity(len as usize),
                losses: Vec::with_capacity(len as usize),
                loss_sums: vec![0.0; plan.stored.len()],
                grad_sums: uploading[i].then(|| plan.stored.iter().map(|&k| vec![0.0; models[k].params.len()]).collect()),
            };
            for t in start..=end {
                let sample = stream.next_sample(i, t)?;
                let losses = models.iter().map(|m| m.loss(&sample)).collect::<Result<Vec<_>, _>>()?;
                for (j, &k) in plan.stored.iter().enumerate() {
                    obs.loss_sums[j] += losses[k];
                }
                if let Some(grads) = obs.grad_sums.as_mut() {
                    for (j, &k) in plan.stored.iter().enumerate() {
                        let g = models[k].loss_grad(&sample)?;
                        for (a, b) in grads[j].iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                }
                obs.losses.push(losses);
                obs.samples.push(sample);
            }
            Ok(obs)
        });
        let observations = observations.into_iter().collect::<Result<Vec<_>, _>>()?;

        // Ledger and trace, round by round.
        let pmfs: Vec<Vec<f64>> = plans.iter().map(|pl| pl.pmf.clone()).collect();
        for (offset, t) in (start..=end).enumerate() {
            let all: Vec<Vec<f64>> = observations.iter().map(|o| o.losses[offset].clone()).collect();
            let chosen: Vec<f64> = all.iter().zip(&plans).map(|(l, pl)| l[pl.chosen]).collect();
            ledger.record_round(&all, &chosen, Some(&pmfs))?;
            if cfg.record_trace {
                for (i, (row, plan)) in all.iter().zip(&plans).enumerate() {
                    for (k, &loss) in row.iter().enumerate() {
                        trace.push(TraceRow {
                            round: t,
                            client: i,
                            model: k,
                            loss,
                            chosen: k == plan.chosen,
                            stored: plan.stored.binary_search(&k).is_ok(),
                        });
                    }
                }
            }
            if next_checkpoint < checkpoints.len() && checkpoints[next_checkpoint] == t {
                curve.push(curve_point(&ledger, t));
                next_checkpoint += 1;
            }
        }
        if cfg.hindsight {
            for o in &observations {
                all_samples.extend(o.samples.iter().cloned());
            }
        }

        // Selection updates.
        match &mut learner {
            Learner::Ofms(clients) => {
                for ((c, plan), obs) in clients.iter_mut().zip(&plans).zip(&observations) {
                    let rp = plan.round_plan.as_ref().expect("ofms plan");
                    let est = loss_estimates(rp, &obs.loss_sums);
                    c.update_weights(&est);
                }
            }
            Learner::Mab(exp3) => {
                let arm = plans[0].chosen;
                let j = 0;
                let mean = observations.iter().map(|o| o.loss_sums[j]).sum::<f64>() / n_clients as f64;
                exp3.update(arm, mean, plans[0].pmf[arm]);
            }
            Learner::NonFed { subsets, exp3 } => {
                for (i, (plan, obs)) in plans.iter().zip(&observations).enumerate() {
                    let j = subsets[i].binary_search(&plan.chosen).expect("chosen in subset");
                    exp3[i].update(j, obs.loss_sums[j], plan.pmf[plan.chosen]);
                }
            }
            Learner::BFed { subset, exp3 } => {
                for (i, (plan, obs)) in plans.iter().zip(&observations).enumerate() {
                    let j = subset.binary_search(&plan.chosen).expect("chosen in subset");
                    exp3[i].update(j, obs.loss_sums[j], plan.pmf[plan.chosen]);
                }
            }
            Learner::Rms | Learner::Ogd(_) => {}
        }

        // Fine-tuning.
        if algorithm.fine_tunes() {
            let lr_f = p.lr_finetune;
            let models = &server.models;
            let locals: Vec<Option<std::collections::BTreeMap<usize, Vec<f64>>>> = map_clients(parallel, n_clients, |i| {
                let grads = observations[i].grad_sums.as_ref()?;
                let plan = &plans[i];
                let estimates = match &plan.round_plan {
                    Some(rp) => grad_estimates(rp, true, alpha, grads),
                    None => {
                        let scale = if algorithm == AlgorithmKind::BFedOmft { alpha as f64 } else { 1.0 };
                        plan.stored
                            .iter()
                            .zip(grads)
                            .map(|(&k, g)| (k, g.iter().map(|v| scale * v).collect()))
                            .collect()
                    }
                };
                Some(
                    estimates
                        .into_iter()
                        .map(|(k, g)| (k, local_update(&models[k].params, &g, lr_f, models[k].radius)))
                        .collect(),
                )
            });
            let mut updates = ClientUpdates::new();
            for (i, l) in locals.into_iter().enumerate() {
                if let Some(map) = l {
                    updates.insert(i, map);
                }
            }
            server.aggregate(&updates)?;
        }

        start = end + 1;
    }

    let final_models = server.models.clone();
    let mut hindsight = Vec::new();
    let mut hindsight_error = None;
    let server_regret = if !cfg.hindsight {
        None
    } else if all_samples.is_empty() {
        ledger.set_server_comparator(vec![0.0; k_models])?;
        Some(vec![0.0; k_models])
    } else {
        let fits: Vec<Result<_, LedgerError>> = map_clients(parallel, k_models, |k| {
            hindsight_optimum(&final_models[k], &all_samples, &final_models[k].params, OracleOptions::default())
        });
        let mut objectives = Vec::with_capacity(k_models);
        for (k, fit) in fits.into_iter().enumerate() {
            match fit {
                Ok(h) => {
                    hindsight.push(HindsightSummary {
                        model: k,
                        objective: h.objective,
                        iterations: h.iterations,
                        grad_norm: h.grad_norm,
                    });
                    objectives.push(h.objective);
                }
                Err(e) => {
                    hindsight_error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        if objectives.len() == k_models {
            ledger.set_server_comparator(objectives)?;
            Some((0..k_models).map(|k| ledger.server_regret(k).unwrap_or(0.0)).collect())
        } else {
            None
        }
    };

    let client_regret: Vec<f64> = (0..n_clients).map(|i| ledger.client_regret(i)).collect();
    let expected_client_regret: Vec<f64> = (0..n_clients).map(|i| ledger.expected_client_regret(i)).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let metrics = Metrics {
        algorithm: algorithm.name().to_string(),
        seed,
        stream_seed: stream.seed,
        clients: n_clients,
        models: k_models,
        horizon,
        period,
        windows,
        lr_select: p.lr_select.clone(),
        lr_finetune: p.lr_finetune,
        mu: p.mus.clone(),
        alpha_tuning: p.alpha_tuning,
        alpha_max,
        alpha_mean: if windows > 0 { alpha_sum as f64 / windows as f64 } else { 0.0 },
        mean_client_regret: mean(&client_regret),
        mean_expected_client_regret: mean(&expected_client_regret),
        client_regret,
        expected_client_regret,
        best_model: (0..n_clients).map(|i| ledger.best_model(i).0).collect(),
        client_bound: client_bounds(p),
        server_regret,
        server_bound: server_bounds(p, if alpha_max > 0 { alpha_max } else { p.alpha_tuning }),
        hindsight,
        hindsight_error,
        memory_violations,
        bandwidth_violations,
        q_floor_violations,
        min_q_ratio,
        curve,
        normalization: stream.normalization().cloned(),
    };
    Ok(RunOutput {
        checkpoint: server.checkpoint(horizon),
        metrics,
        ledger,
        trace,
        final_models,
    })
}

/// Seed-averaged results for one budget setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Budget applied to every client, or `None` for the config's own budgets.
    pub budget: Option<f64>,
    pub seeds: Vec<u64>,
    pub mean_client_regret: f64,
    pub mean_expected_client_regret: f64,
    pub client_regret: Vec<f64>,
    pub expected_client_regret: Vec<f64>,
    pub client_bound: Vec<f64>,
    pub server_regret: Option<Vec<f64>>,
    pub server_bound: Vec<f64>,
    pub mu: Vec<usize>,
    pub alpha_max: usize,
    pub memory_violations: u64,
    pub bandwidth_violations: u64,
    pub q_floor_violations: u64,
    pub curve: Vec<CurvePoint>,
}

fn average(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; first.len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

/// Averages metrics from runs of the same config over different seeds.
pub fn summarize(budget: Option<f64>, runs: &[Metrics]) -> SweepPoint {
    let pick = |f: &dyn Fn(&Metrics) -> Vec<f64>| average(&runs.iter().map(f).collect::<Vec<_>>());
    let client_regret = pick(&|m| m.client_regret.clone());
    let expected = pick(&|m| m.expected_client_regret.clone());
    let server_regret = runs
        .iter()
        .map(|m| m.server_regret.clone())
        .collect::<Option<Vec<_>>>()
        .map(|rows| average(&rows));
    let server_bound = runs.iter().fold(Vec::new(), |acc: Vec<f64>, m| {
        if acc.is_empty() {
            m.server_bound.clone()
        } else {
            acc.iter().zip(&m.server_bound).map(|(a, b)| a.max(*b)).collect()
        }
    });
    let curve = runs
        .first()
        .map(|first| {
            first
                .curve
                .iter()
                .enumerate()
                .map(|(j, pt)| {
                    let n = runs.len() as f64;
                    CurvePoint {
                        round: pt.round,
                        mean_client_regret: runs.iter().map(|m| m.curve[j].mean_client_regret).sum::<f64>() / n,
                        mean_expected_client_regret: runs
                            .iter()
                            .map(|m| m.curve[j].mean_expected_client_regret)
                            .sum::<f64>()
                            / n,
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    SweepPoint {
        budget,
        seeds: runs.iter().map(|m| m.seed).collect(),
        mean_client_regret: mean(&client_regret),
        mean_expected_client_regret: mean(&expected),
        client_regret,
        expected_client_regret: expected,
        client_bound: runs.first().map(|m| m.client_bound.clone()).unwrap_or_default(),
        server_regret,
        server_bound,
        mu: runs.first().map(|m| m.mu.clone()).unwrap_or_default(),
        alpha_max: runs.iter().map(|m| m.alpha_max).max().unwrap_or(0),
        memory_violations: runs.iter().map(|m| m.memory_violations).sum(),
        bandwidth_violations: runs.iter().map(|m| m.bandwidth_violations).sum(),
        q_floor_violations: runs.iter().map(|m| m.q_floor_violations).sum(),
        curve,
    }
}

/// Runs `config` for every seed and, when given, every common budget.
/// Traces are not kept; seeds run on the rayon pool.
pub fn sweep(config: &RunConfig, seeds: &[u64], budgets: Option<&[f64]>) -> Result<Vec<SweepPoint>, SimError> {
    let grid: Vec<Option<f64>> = match budgets {
        Some(b) => b.iter().map(|&v| Some(v)).collect(),
        None => vec![None],
    };
    grid.iter()
        .map(|&budget| {
            let mut cfg = config.clone();
            cfg.record_trace = false;
            if let Some(b) = budget {
                cfg.budgets = vec![b];
            }
            let prepared = prepare(&cfg)?;
            let runs: Vec<Result<Metrics, SimError>> = seeds
                .par_iter()
                .map(|&s| {
                    let mut p = prepared.clone();
                    p.config.seed = s;
                    run_prepared(&p).map(|o| o.metrics)
                })
                .collect();
            let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
            Ok(summarize(budget, &runs))
        })
        .collect()
}
