//! Data streams: synthetic drifting generators, non-i.i.d. client partitions
//! and CSV ingestion with label normalization.
//!
//! Every sample is a pure function of `(seed, client, round)`, so clients can
//! be simulated in any order or in parallel.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Sample;
use crate::rng::{substream, Purpose, SERVER_ACTOR};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("client {client} asked for round {round} but the horizon is {horizon}")]
    EndOfStream { client: usize, round: u64, horizon: u64 },
    #[error("csv parse error: {0}")]
    Parse(#[from] csv::Error),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamKind {
    SyntheticRegression,
    SyntheticClassification,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Drift {
    #[default]
    None,
    /// Generating parameters switch to a fresh draw from round `round` on.
    ShiftAtRound { round: u64 },
    /// Feature weights rotate between two draws with angular rate `2π/T`.
    Rotating,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Partition {
    #[default]
    Iid,
    /// A `fraction` of each client's samples come from its majority class
    /// `client mod C`; the rest are spread evenly over the other classes.
    LabelSkew { fraction: f64 },
    /// Client `i` belongs to site `i mod sites`; each site has its own generator
    /// (or its own rows, for CSV data with a site column).
    SiteSplit { sites: usize },
}

/// Column layout of a CSV dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub label: String,
    /// Leading fraction of rows used to fit feature standardization.
    #[serde(default = "one")]
    pub train_fraction: f64,
    /// Optional column naming the site of each row (used by site-split).
    #[serde(default)]
    pub site: Option<String>,
}

fn one() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.05
}

fn default_classes() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub kind: StreamKind,
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub drift: Drift,
    #[serde(default)]
    pub partition: Partition,
    /// Number of rounds; the simulator overwrites it with the run horizon.
    #[serde(default)]
    pub horizon: u64,
    /// Stream seed; falls back to the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Label noise standard deviation (regression) or feature noise (classification).
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default)]
    pub csv_schema: Option<PathBuf>,
}

impl StreamSpec {
    pub fn synthetic_regression(dim: usize, horizon: u64) -> Self {
        Self {
            kind: StreamKind::SyntheticRegression,
            dim,
            classes: 2,
            drift: Drift::None,
            partition: Partition::Iid,
            horizon,
            seed: None,
            noise: default_noise(),
            csv_path: None,
            csv_schema: None,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidSpec(m.to_string()));
        if self.kind != StreamKind::Csv && self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be a nonnegative number");
        }
        if self.kind == StreamKind::SyntheticClassification && self.classes < 2 {
            return bad("classification needs at least 2 classes");
        }
        match self.partition {
            Partition::LabelSkew { fraction } => {
                if !(0.0..=1.0).contains(&fraction) {
                    return bad("label-skew fraction must lie in [0, 1]");
                }
                if self.kind != StreamKind::SyntheticClassification {
                    return bad("label-skew applies to synthetic classification only");
                }
            }
            Partition::SiteSplit { sites: 0 } => return bad("site-split needs at least one site"),
            _ => {}
        }
        if let Drift::ShiftAtRound { round } = self.drift {
            if round == 0 {
                return bad("shift round is 1-based");
            }
        }
        if self.kind == StreamKind::Csv && (self.csv_path.is_none() || self.csv_schema.is_none()) {
            return bad("csv streams need csv_path and csv_schema");
        }
        Ok(())
    }
}

/// Affine maps applied during loading, echoed into run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub label_min: f64,
    pub label_max: f64,
}

impl Normalization {
    /// Min-max scaling; a degenerate range maps every label to 0.5.
    pub fn normalize_label(&self, y: f64) -> f64 {
        let range = self.label_max - self.label_min;
        if range > 0.0 {
            (y - self.label_min) / range
        } else {
            0.5
        }
    }

    pub fn denormalize_label(&self, y: f64) -> f64 {
        let range = self.label_max - self.label_min;
        if range > 0.0 {
            self.label_min + y * range
        } else {
            self.label_min
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Site label of each row; empty when the schema has no site column.
    pub sites: Vec<String>,
    pub normalization: Normalization,
}

pub fn load_csv_schema(path: &Path) -> Result<CsvSchema, EnvError> {
    let text = fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset, EnvError> {
    let file = fs::File::open(path).map_err(|source| EnvError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, schema)
}

/// Parses CSV text with a header row; features are z-scored on the training
/// prefix and labels min-max scaled over the whole column.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset, EnvError> {
    if schema.features.is_empty() {
        return Err(EnvError::SchemaMismatch("schema lists no feature columns".into()));
    }
    if !(schema.train_fraction > 0.0 && schema.train_fraction <= 1.0) {
        return Err(EnvError::SchemaMismatch("train_fraction must lie in (0, 1]".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| EnvError::SchemaMismatch(format!("column `{name}` not in header")))
    };
    let feature_cols = schema.features.iter().map(|f| column(f)).collect::<Result<Vec<_>, _>>()?;
    let label_col = column(&schema.label)?;
    let site_col = schema.site.as_deref().map(column).transpose()?;

    let mut raw_x = Vec::new();
    let mut raw_y = Vec::new();
    let mut sites = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |col: usize, name: &str| -> Result<f64, EnvError> {
            let text = record.get(col).unwrap_or("").trim();
            text.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                EnvError::SchemaMismatch(format!("row {}: `{name}` value `{text}` is not a finite number", line + 1))
            })
        };
        let x = feature_cols
            .iter()
            .zip(&schema.features)
            .map(|(&c, name)| field(c, name))
            .collect::<Result<Vec<_>, _>>()?;
        raw_x.push(x);
        raw_y.push(field(label_col, &schema.label)?);
        if let Some(c) = site_col {
            sites.push(record.get(c).unwrap_or("").trim().to_string());
        }
    }
    if raw_y.is_empty() {
        return Err(EnvError::SchemaMismatch("csv has no data rows".into()));
    }

    let train = ((raw_y.len() as f64 * schema.train_fraction).ceil() as usize).clamp(1, raw_y.len());
    let d = feature_cols.len();
    let mut means = vec![0.0; d];
    let mut stds = vec![0.0; d];
    for x in &raw_x[..train] {
        for (m, v) in means.iter_mut().zip(x) {
            *m += v / train as f64;
        }
    }
    for x in &raw_x[..train] {
        for ((s, v), m) in stds.iter_mut().zip(x).zip(&means) {
            *s += (v - m) * (v - m) / train as f64;
        }
    }
    for s in stds.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let (label_min, label_max) = raw_y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    let normalization = Normalization {
        feature_means: means,
        feature_stds: stds,
        label_min,
        label_max,
    };
    let samples = raw_x
        .into_iter()
        .zip(raw_y)
        .map(|(x, y)| {
            let features = x
                .iter()
                .zip(&normalization.feature_means)
                .zip(&normalization.feature_stds)
                .map(|((v, m), s)| (v - m) / s)
                .collect();
            Sample::new(features, normalization.normalize_label(y))
        })
        .collect();
    Ok(Dataset {
        samples,
        sites,
        normalization,
    })
}

#[derive(Debug, Clone)]
enum Source {
    Regression {
        /// `[site][phase]` weight vectors over `x̃` (bias last).
        weights: Vec<[Vec<f64>; 2]>,
    },
    Classification {
        /// `[site][phase][class]` class-mean vectors.
        means: Vec<[Vec<Vec<f64>>; 2]>,
        /// Per-client class schedule for label skew.
        schedules: Option<Vec<Vec<usize>>>,
    },
    Csv {
        data: Dataset,
        /// Per-client row order.
        orders: Vec<Vec<usize>>,
    },
}

/// A materialized stream for `clients` clients over `horizon` rounds.
#[derive(Debug, Clone)]
pub struct DataStream {
    pub spec: StreamSpec,
    pub seed: u64,
    pub clients: usize,
    source: Source,
}

impl DataStream {
    pub fn new(spec: &StreamSpec, clients: usize, run_seed: u64) -> Result<Self, EnvError> {
        spec.validate()?;
        let seed = spec.seed.unwrap_or(run_seed);
        let sites = match spec.partition {
            Partition::SiteSplit { sites } => sites,
            _ => 1,
        };
        let source = match spec.kind {
            StreamKind::SyntheticRegression => Source::Regression {
                weights: (0..sites)
                    .map(|s| [regression_weights(seed, spec.dim, s, 0), regression_weights(seed, spec.dim, s, 1)])
                    .collect(),
            },
            StreamKind::SyntheticClassification => {
                let means = (0..sites)
                    .map(|s| {
                        [
                            class_means(seed, spec.dim, spec.classes, s, 0),
                            class_means(seed, spec.dim, spec.classes, s, 1),
                        ]
                    })
                    .collect();
                let schedules = match spec.partition {
                    Partition::LabelSkew { fraction } => Some(
                        (0..clients)
                            .map(|i| label_skew_schedule(seed, i, spec.classes, spec.horizon, fraction))
                            .collect(),
                    ),
                    _ => None,
                };
                Source::Classification { means, schedules }
            }
            StreamKind::Csv => {
                let (Some(path), Some(schema_path)) = (&spec.csv_path, &spec.csv_schema) else {
                    return Err(EnvError::InvalidSpec("csv streams need csv_path and csv_schema".into()));
                };
                let schema = load_csv_schema(schema_path)?;
                let data = load_csv(path, &schema)?;
                Self::csv_source(data, &spec.partition, clients, seed)?
            }
        };
        let mut spec = spec.clone();
        if let Source::Csv { data, .. } = &source {
            spec.dim = data.normalization.feature_means.len();
        }
        Ok(Self {
            spec,
            seed,
            clients,
            source,
        })
    }

    /// Builds a stream over an already loaded dataset.
    pub fn from_dataset(spec: &StreamSpec, data: Dataset, clients: usize, run_seed: u64) -> Result<Self, EnvError> {
        let seed = spec.seed.unwrap_or(run_seed);
        let mut spec = spec.clone();
        spec.kind = StreamKind::Csv;
        spec.dim = data.normalization.feature_means.len();
        let source = Self::csv_source(data, &spec.partition, clients, seed)?;
        Ok(Self {
            spec,
            seed,
            clients,
            source,
        })
    }

    fn csv_source(data: Dataset, partition: &Partition, clients: usize, seed: u64) -> Result<Source, EnvError> {
        let rows: Vec<usize> = (0..data.samples.len()).collect();
        let orders = match *partition {
            Partition::SiteSplit { sites } => {
                if data.sites.is_empty() {
                    return Err(EnvError::SchemaMismatch("site-split needs a site column".into()));
                }
                let mut by_site: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for (r, s) in data.sites.iter().enumerate() {
                    by_site.entry(s.as_str()).or_default().push(r);
                }
                let groups: Vec<Vec<usize>> = by_site.into_values().collect();
                if groups.len() < sites {
                    return Err(EnvError::SchemaMismatch(format!(
                        "site-split asks for {sites} sites but the data has {}",
                        groups.len()
                    )));
                }
                (0..clients).map(|i| shuffled(seed, i, groups[i % sites].clone())).collect()
            }
            Partition::LabelSkew { .. } => {
                return Err(EnvError::InvalidSpec("label-skew applies to synthetic classification only".into()))
            }
            Partition::Iid => (0..clients).map(|i| shuffled(seed, i, rows.clone())).collect(),
        };
        Ok(Source::Csv { data, orders })
    }

    pub fn horizon(&self) -> u64 {
        self.spec.horizon
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        match &self.source {
            Source::Csv { data, .. } => Some(&data.normalization),
            _ => None,
        }
    }

    fn site(&self, client: usize) -> usize {
        match self.spec.partition {
            Partition::SiteSplit { sites } => client % sites,
            _ => 0,
        }
    }

    /// Regression weights in force for `client` at `round`; `None` for other kinds.
    pub fn generator_weights(&self, client: usize, round: u64) -> Option<Vec<f64>> {
        let Source::Regression { weights } = &self.source else {
            return None;
        };
        let [a, b] = &weights[self.site(client)];
        Some(match self.spec.drift {
            Drift::None => a.clone(),
            Drift::ShiftAtRound { round: tau } => {
                if round < tau {
                    a.clone()
                } else {
                    b.clone()
                }
            }
            Drift::Rotating => {
                let angle = TAU * (round - 1) as f64 / self.spec.horizon.max(1) as f64;
                let (s, c) = angle.sin_cos();
                let d = a.len() - 1;
                let mut w: Vec<f64> = a.iter().zip(b).map(|(x, y)| c * x + s * y).collect();
                w[d] = a[d];
                w
            }
        })
    }

    fn phase(&self, round: u64) -> usize {
        match self.spec.drift {
            Drift::ShiftAtRound { round: tau } if round >= tau => 1,
            _ => 0,
        }
    }

    /// Sample observed by `client` at 1-based `round`.
    pub fn next_sample(&self, client: usize, round: u64) -> Result<Sample, EnvError> {
        if round == 0 || round > self.spec.horizon || client >= self.clients {
            return Err(EnvError::EndOfStream {
                client,
                round,
                horizon: self.spec.horizon,
            });
        }
        let mut rng = substream(self.seed, Purpose::Sample, client as u64, round);
        match &self.source {
            Source::Regression { .. } => {
                let w = self.generator_weights(client, round).expect("regression source");
                let d = self.spec.dim;
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let mut y = w[d];
                for (wj, xj) in w.iter().zip(&x) {
                    y += wj * xj;
                }
                let z: f64 = rng.sample(StandardNormal);
                y = (y + self.spec.noise * z).clamp(0.0, 1.0);
                Ok(Sample::new(x, y))
            }
            Source::Classification { means, schedules } => {
                let class = match schedules {
                    Some(s) => s[client][(round - 1) as usize],
                    None => rng.random_range(0..self.spec.classes),
                };
                let mean = &means[self.site(client)][self.phase(round)][class];
                let x = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = rng.sample(StandardNormal);
                        (m + self.spec.noise * z).clamp(-1.0, 1.0)
                    })
                    .collect();
                Ok(Sample::new(x, class as f64))
            }
            Source::Csv { data, orders } => {
                let order = &orders[client];
                let row = order[((round - 1) as usize) % order.len()];
                Ok(data.samples[row].clone())
            }
        }
    }

    /// All samples of all clients, indexed `[round-1][client]`.
    pub fn materialize(&self) -> Result<Vec<Vec<Sample>>, EnvError> {
        (1..=self.spec.horizon)
            .map(|t| (0..self.clients).map(|i| self.next_sample(i, t)).collect())
            .collect()
    }
}

/// Weights over `x̃` with bias near 0.5 and `|w_j| ≤ 0.5/d`, so noiseless
/// targets stay inside `[0, 1]` for features in `[-1, 1]`.
fn regression_weights(seed: u64, dim: usize, site: usize, phase: u64) -> Vec<f64> {
    let mut rng = substream(seed, Purpose::Dictionary, site as u64, phase);
    let scale = 0.5 / dim as f64;
    let mut w: Vec<f64> = (0..dim).map(|_| rng.random_range(-scale..=scale)).collect();
    w.push(0.5);
    w
}

fn class_means(seed: u64, dim: usize, classes: usize, site: usize, phase: u64) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, Purpose::Dictionary, site as u64, 1000 + phase);
    (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-0.6..=0.6)).collect())
        .collect()
}

fn shuffled(seed: u64, client: usize, mut rows: Vec<usize>) -> Vec<usize> {
    let mut rng = substream(seed, Purpose::Partition, client as u64, 0);
    rows.shuffle(&mut rng);
    rows
}

/// Class sequence of length `horizon` with `round(fraction·T)` samples of the
/// majority class `client mod C`; the remainder is split evenly over the
/// other classes (lower class ids absorb any leftover), then shuffled.
pub fn label_skew_schedule(seed: u64, client: usize, classes: usize, horizon: u64, fraction: f64) -> Vec<usize> {
    let t = horizon as usize;
    let majority = client % classes;
    let major_count = ((fraction * t as f64).round() as usize).min(t);
    let rest = t - major_count;
    let others: Vec<usize> = (0..classes).filter(|&c| c != majority).collect();
    let mut schedule = vec![majority; major_count];
    if !others.is_empty() {
        let each = rest / others.len();
        let extra = rest % others.len();
        for (r, &c) in others.iter().enumerate() {
            let n = each + usize::from(r < extra);
            schedule.extend(std::iter::repeat_n(c, n));
        }
    } else {
        schedule.extend(std::iter::repeat_n(majority, rest));
    }
    let mut rng = substream(seed, Purpose::Partition, client as u64, SERVER_ACTOR);
    schedule.shuffle(&mut rng);
    schedule
}
