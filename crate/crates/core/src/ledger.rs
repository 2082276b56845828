//! Regret bookkeeping for clients and server, the hindsight comparator and
//! the closed-form regret bounds.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{norm_sq, project_in_place, ModelEntry, ModelError, Sample};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("hindsight optimum for model {model} did not converge: gradient-mapping norm {grad_norm:e} after {iterations} iterations")]
    NonConvergence { model: usize, grad_norm: f64, iterations: usize },
    #[error("expected {expected} entries, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("trace row {row}: {reason}")]
    BadTrace { row: usize, reason: String },
    #[error("no samples to fit")]
    NoSamples,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Cumulative losses for every client and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    pub clients: usize,
    pub models: usize,
    pub rounds: u64,
    /// `Σ_t L(f_{I_{i,t}})` per client (realized choices).
    pub incurred: Vec<f64>,
    /// `Σ_t Σ_k p_{ik,t} L(f_k)` per client: the conditional expectation over
    /// the model draw. Stays zero when no PMF is supplied.
    pub expected_incurred: Vec<f64>,
    /// `Σ_t L(f_k(x_{i,t}; θ_{k,t}), y_{i,t})`, indexed `[client][model]`.
    pub comparator: Vec<Vec<f64>>,
    /// `Σ_i Σ_t L(f_k(x_{i,t}; θ_{k,t}))` per model.
    pub server_incurred: Vec<f64>,
    /// `Σ_i Σ_t L(f_k(x_{i,t}; θ*_k))` per model, filled after the run.
    pub server_comparator: Option<Vec<f64>>,
}

impl RegretLedger {
    pub fn new(clients: usize, models: usize) -> Self {
        Self {
            clients,
            models,
            rounds: 0,
            incurred: vec![0.0; clients],
            expected_incurred: vec![0.0; clients],
            comparator: vec![vec![0.0; models]; clients],
            server_incurred: vec![0.0; models],
            server_comparator: None,
        }
    }

    /// Adds one round. `all_losses[i][k]` is client `i`'s loss under model `k`;
    /// `chosen[i]` is the loss of the model client `i` predicted with;
    /// `pmfs[i]`, when given, is client `i`'s selection PMF for the round.
    pub fn record_round(
        &mut self,
        all_losses: &[Vec<f64>],
        chosen: &[f64],
        pmfs: Option<&[Vec<f64>]>,
    ) -> Result<(), LedgerError> {
        let shape = |expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(LedgerError::Shape { expected, got })
            }
        };
        shape(self.clients, all_losses.len())?;
        shape(self.clients, chosen.len())?;
        for row in all_losses {
            shape(self.models, row.len())?;
        }
        if let Some(p) = pmfs {
            shape(self.clients, p.len())?;
            for row in p {
                shape(self.models, row.len())?;
            }
        }
        for (i, row) in all_losses.iter().enumerate() {
            self.incurred[i] += chosen[i];
            if let Some(p) = pmfs {
                self.expected_incurred[i] += p[i].iter().zip(row).map(|(p, l)| p * l).sum::<f64>();
            }
            for (k, &l) in row.iter().enumerate() {
                self.comparator[i][k] += l;
                self.server_incurred[k] += l;
            }
        }
        self.rounds += 1;
        Ok(())
    }

    /// Index and cumulative loss of client `i`'s best model in hindsight.
    pub fn best_model(&self, i: usize) -> (usize, f64) {
        self.comparator[i]
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (k, v)| if v < best.1 { (k, v) } else { best })
    }

    /// `incurred_i − min_k comparator_{i,k}`; zero for an empty ledger.
    pub fn client_regret(&self, i: usize) -> f64 {
        if self.models == 0 {
            return 0.0;
        }
        self.incurred[i] - self.best_model(i).1
    }

    /// Same as [`RegretLedger::client_regret`] with the realized loss replaced
    /// by its expectation under the selection PMF.
    pub fn expected_client_regret(&self, i: usize) -> f64 {
        if self.models == 0 {
            return 0.0;
        }
        self.expected_incurred[i] - self.best_model(i).1
    }

    pub fn set_server_comparator(&mut self, values: Vec<f64>) -> Result<(), LedgerError> {
        if values.len() != self.models {
            return Err(LedgerError::Shape {
                expected: self.models,
                got: values.len(),
            });
        }
        self.server_comparator = Some(values);
        Ok(())
    }

    /// `S_k = (1/N)(server_incurred_k − server_comparator_k)`, when the
    /// comparator is known.
    pub fn server_regret(&self, k: usize) -> Option<f64> {
        let cmp = self.server_comparator.as_ref()?;
        Some((self.server_incurred[k] - cmp[k]) / self.clients.max(1) as f64)
    }

    /// Rebuilds the realized-loss accumulators from a persisted trace.
    pub fn from_trace(rows: &[TraceRow], clients: usize, models: usize) -> Result<Self, LedgerError> {
        let mut ledger = Self::new(clients, models);
        let mut last_round = 0;
        for (r, row) in rows.iter().enumerate() {
            if row.client >= clients || row.model >= models {
                return Err(LedgerError::BadTrace {
                    row: r,
                    reason: format!("client {} / model {} out of range", row.client, row.model),
                });
            }
            if row.round < last_round {
                return Err(LedgerError::BadTrace {
                    row: r,
                    reason: "rounds must be nondecreasing".into(),
                });
            }
            last_round = row.round;
            ledger.comparator[row.client][row.model] += row.loss;
            ledger.server_incurred[row.model] += row.loss;
            if row.chosen {
                ledger.incurred[row.client] += row.loss;
            }
        }
        ledger.rounds = last_round;
        Ok(ledger)
    }
}

/// One `(round, client, model)` record of the loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: u64,
    pub client: usize,
    pub model: usize,
    pub loss: f64,
    pub chosen: bool,
    pub stored: bool,
}

pub const TRACE_HEADER: [&str; 6] = ["round", "client", "model", "loss", "chosen", "stored"];

/// Writes the trace as CSV. Losses use the shortest decimal that parses back
/// to the same `f64`.
pub fn write_trace<W: Write>(writer: W, rows: &[TraceRow]) -> Result<(), LedgerError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRACE_HEADER)?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.client.to_string(),
            r.model.to_string(),
            r.loss.to_string(),
            u8::from(r.chosen).to_string(),
            u8::from(r.stored).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(reader: R) -> Result<Vec<TraceRow>, LedgerError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(TRACE_HEADER) {
        return Err(LedgerError::BadTrace {
            row: 0,
            reason: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let bad = |what: &str| LedgerError::BadTrace {
            row: r + 1,
            reason: format!("invalid {what}"),
        };
        let flag = |idx: usize, what: &str| match record.get(idx) {
            Some("0") => Ok(false),
            Some("1") => Ok(true),
            _ => Err(bad(what)),
        };
        rows.push(TraceRow {
            round: record.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("round"))?,
            client: record.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("client"))?,
            model: record.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| bad("model"))?,
            loss: record.get(3).and_then(|v| v.parse().ok()).ok_or_else(|| bad("loss"))?,
            chosen: flag(4, "chosen flag")?,
            stored: flag(5, "stored flag")?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Stop once the gradient-mapping norm of the mean objective is below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hindsight {
    pub params: Vec<f64>,
    /// `Σ` of the losses at `params` over all samples.
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Sum of losses and mean raw gradient at `theta`.
fn objective_and_mean_grad(model: &ModelEntry, theta: &[f64], samples: &[Sample]) -> Result<(f64, Vec<f64>), LedgerError> {
    let mut total = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for s in samples {
        let (l, g) = model.loss_and_raw_grad_at(theta, s)?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let m = samples.len() as f64;
    for a in grad.iter_mut() {
        *a /= m;
    }
    Ok((total, grad))
}

fn objective(model: &ModelEntry, theta: &[f64], samples: &[Sample]) -> Result<f64, LedgerError> {
    let mut total = 0.0;
    for s in samples {
        total += model.loss_at(theta, s)?;
    }
    Ok(total)
}

/// `‖θ − P(θ − ∇f)‖`: zero exactly at constrained stationary points.
fn gradient_mapping_norm(theta: &[f64], grad: &[f64], radius: f64) -> f64 {
    let mut stepped: Vec<f64> = theta.iter().zip(grad).map(|(t, g)| t - g).collect();
    project_in_place(&mut stepped, radius);
    let diff: Vec<f64> = theta.iter().zip(&stepped).map(|(a, b)| a - b).collect();
    norm_sq(&diff).sqrt()
}

/// `θ*_k = argmin_{‖θ‖² ≤ R} Σ L(f_k(x; θ), y)` by projected gradient descent
/// with backtracking on the mean objective, started from `start`.
pub fn hindsight_optimum(
    model: &ModelEntry,
    samples: &[Sample],
    start: &[f64],
    options: OracleOptions,
) -> Result<Hindsight, LedgerError> {
    if samples.is_empty() {
        return Err(LedgerError::NoSamples);
    }
    let m = samples.len() as f64;
    let radius = model.radius;
    let mut theta = start.to_vec();
    project_in_place(&mut theta, radius);
    let (mut total, mut grad) = objective_and_mean_grad(model, &theta, samples)?;
    let mut step = 1.0;
    let mut grad_norm = gradient_mapping_norm(&theta, &grad, radius);
    for iteration in 0..options.max_iterations {
        if grad_norm <= options.tolerance {
            return Ok(Hindsight {
                params: theta,
                objective: total,
                iterations: iteration,
                grad_norm,
            });
        }
        let f = total / m;
        let mut grow = false;
        loop {
            let mut cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            project_in_place(&mut cand, radius);
            let diff: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let lin: f64 = grad.iter().zip(&diff).map(|(g, d)| g * d).sum();
            let cand_total = objective(model, &cand, samples)?;
            let model_value = f + lin + norm_sq(&diff) / (2.0 * step);
            let strict = cand_total / m <= model_value;
            // Near the optimum the sufficient-decrease test drowns in rounding
            // noise; accept such steps without growing the step size.
            let within_noise = cand_total / m <= model_value + 1e-12 * f.abs().max(1e-300);
            if strict || within_noise || step < 1e-12 {
                if diff.iter().all(|&d| d == 0.0) {
                    grad_norm = gradient_mapping_norm(&theta, &grad, radius);
                    return if grad_norm <= options.tolerance {
                        Ok(Hindsight {
                            params: theta,
                            objective: total,
                            iterations: iteration,
                            grad_norm,
                        })
                    } else {
                        Err(LedgerError::NonConvergence {
                            model: model.id,
                            grad_norm,
                            iterations: iteration,
                        })
                    };
                }
                theta = cand;
                if strict {
                    grow = true;
                }
                break;
            }
            step *= 0.5;
            grow = false;
        }
        (total, grad) = objective_and_mean_grad(model, &theta, samples)?;
        grad_norm = gradient_mapping_norm(&theta, &grad, radius);
        if grow {
            step *= 2.0;
        }
    }
    if grad_norm <= options.tolerance {
        return Ok(Hindsight {
            params: theta,
            objective: total,
            iterations: options.max_iterations,
            grad_norm,
        });
    }
    Err(LedgerError::NonConvergence {
        model: model.id,
        grad_norm,
        iterations: options.max_iterations,
    })
}

/// `ln K/η_i + η_i μ_i n T`.
pub fn client_bound(models: usize, lr_select: f64, mu: usize, period: u64, horizon: u64) -> f64 {
    let ln_k = (models.max(1) as f64).ln();
    ln_k / lr_select + lr_select * mu as f64 * period as f64 * horizon as f64
}

/// `R/(2η_f) + (1/N) Σ_i μ_i α η_f G² n T`.
pub fn server_bound(radius: f64, lr_finetune: f64, mus: &[usize], alpha: usize, grad_bound: f64, period: u64, horizon: u64) -> f64 {
    let n_clients = mus.len().max(1) as f64;
    let mu_sum: f64 = mus.iter().map(|&m| m as f64).sum();
    radius / (2.0 * lr_finetune)
        + mu_sum / n_clients * alpha as f64 * lr_finetune * grad_bound * grad_bound * period as f64 * horizon as f64
}

/// `η_i = √(ln K/(μ_i n T))`; with a single model `ln K` is replaced by 1.
pub fn tuned_select_rate(models: usize, mu: usize, period: u64, horizon: u64) -> f64 {
    let ln_k = if models > 1 { (models as f64).ln() } else { 1.0 };
    (ln_k / (mu.max(1) as f64 * period.max(1) as f64 * horizon.max(1) as f64)).sqrt()
}

/// `η_f = 1/√((α n T/N) Σ_i μ_i)`.
pub fn tuned_finetune_rate(alpha: usize, mus: &[usize], period: u64, horizon: u64) -> f64 {
    let n_clients = mus.len().max(1) as f64;
    let mu_sum: f64 = mus.iter().map(|&m| m.max(1) as f64).sum::<f64>().max(1.0);
    1.0 / (alpha.max(1) as f64 * period.max(1) as f64 * horizon.max(1) as f64 / n_clients * mu_sum).sqrt()
}
