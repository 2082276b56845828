//! Desk-scale convex models with bounded losses and gradients.
//!
//! Every family appends a constant `1` feature for the bias, reports losses in
//! `[0, 1]`, clips gradients to the model's bound `G`, and keeps parameters in
//! the ball `‖θ‖² ≤ R`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::Cost;
use crate::rng::{substream, Purpose, SERVER_ACTOR};

/// Probability clipping applied to the cross-entropy families.
pub const DEFAULT_PROB_CLIP: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model {model}: expected {expected} features, got {got}")]
    DimensionMismatch {
        model: usize,
        expected: usize,
        got: usize,
    },
    #[error("model {model}: label {label} is not valid for {family:?}")]
    InvalidLabel {
        model: usize,
        label: f64,
        family: Family,
    },
    #[error("model {model}: {reason}")]
    InvalidModel { model: usize, reason: String },
    #[error("duplicate model id {0}")]
    DuplicateId(usize),
    #[error("dictionary i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dictionary json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Squared error on labels in `[0, 1]`, clamped at 1.
    LinearRegression,
    /// Sigmoid output with clipped cross-entropy; labels in `[0, 1]`.
    LogisticBinary,
    /// Softmax over `C` classes with clipped cross-entropy; labels are class indices.
    MultinomialLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Scalar(f64),
    Distribution(Vec<f64>),
}

fn default_clip() -> f64 {
    DEFAULT_PROB_CLIP
}

fn is_default_clip(v: &f64) -> bool {
    *v == DEFAULT_PROB_CLIP
}

/// One entry of the server-held dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: usize,
    pub family: Family,
    pub dim: usize,
    #[serde(rename = "cost")]
    pub storage_cost: Cost,
    #[serde(rename = "bandwidth")]
    pub bandwidth_cost: Cost,
    pub params: Vec<f64>,
    #[serde(rename = "R")]
    pub radius: f64,
    #[serde(rename = "G")]
    pub grad_bound: f64,
    #[serde(default = "default_clip", skip_serializing_if = "is_default_clip")]
    pub prob_clip: f64,
}

impl ModelEntry {
    /// Zero-initialised model with `classes` outputs for the multinomial family
    /// (ignored otherwise).
    pub fn zeros(id: usize, family: Family, dim: usize, classes: usize) -> Self {
        let len = match family {
            Family::MultinomialLinear => classes * (dim + 1),
            _ => dim + 1,
        };
        Self {
            id,
            family,
            dim,
            storage_cost: Cost::from_units(1),
            bandwidth_cost: Cost::from_units(1),
            params: vec![0.0; len],
            radius: 1.0,
            grad_bound: 1.0,
            prob_clip: DEFAULT_PROB_CLIP,
        }
    }

    pub fn classes(&self) -> usize {
        match self.family {
            Family::MultinomialLinear => self.params.len() / (self.dim + 1),
            _ => 1,
        }
    }

    /// Cross-entropy normalizer `ln(1/ε)`.
    pub fn normalizer(&self) -> f64 {
        (1.0 / self.prob_clip).ln()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: String| ModelError::InvalidModel {
            model: self.id,
            reason,
        };
        let width = self.dim + 1;
        match self.family {
            Family::MultinomialLinear => {
                if !self.params.len().is_multiple_of(width) || self.params.len() / width < 2 {
                    return Err(bad(format!(
                        "multinomial params length {} is not a multiple (>= 2) of {width}",
                        self.params.len()
                    )));
                }
            }
            _ => {
                if self.params.len() != width {
                    return Err(bad(format!(
                        "expected {width} params, got {}",
                        self.params.len()
                    )));
                }
            }
        }
        if self.storage_cost.is_zero() || self.bandwidth_cost.is_zero() {
            return Err(bad("storage and bandwidth costs must be positive".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(bad(format!("radius {} must be positive", self.radius)));
        }
        if !(self.grad_bound > 0.0 && self.grad_bound.is_finite()) {
            return Err(bad(format!("gradient bound {} must be positive", self.grad_bound)));
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return Err(bad(format!("probability clip {} must be in (0, 0.5)", self.prob_clip)));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter".into()));
        }
        if norm_sq(&self.params) > self.radius * (1.0 + 1e-12) {
            return Err(bad("parameters lie outside the radius ball".into()));
        }
        Ok(())
    }

    fn check(&self, sample: &Sample) -> Result<(), ModelError> {
        if sample.features.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                model: self.id,
                expected: self.dim,
                got: sample.features.len(),
            });
        }
        let y = sample.label;
        let ok = match self.family {
            Family::LinearRegression | Family::LogisticBinary => (0.0..=1.0).contains(&y),
            Family::MultinomialLinear => {
                y >= 0.0 && y.fract() == 0.0 && (y as usize) < self.classes()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidLabel {
                model: self.id,
                label: y,
                family: self.family,
            })
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, ModelError> {
        self.predict_at(&self.params, x)
    }

    pub fn predict_at(&self, theta: &[f64], x: &[f64]) -> Result<Prediction, ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch {
                model: self.id,
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(match self.family {
            Family::LinearRegression => Prediction::Scalar(affine(theta, x)),
            Family::LogisticBinary => Prediction::Scalar(sigmoid(affine(theta, x))),
            Family::MultinomialLinear => Prediction::Distribution(softmax(&logits(theta, x))),
        })
    }

    pub fn loss(&self, sample: &Sample) -> Result<f64, ModelError> {
        self.loss_at(&self.params, sample)
    }

    pub fn loss_at(&self, theta: &[f64], sample: &Sample) -> Result<f64, ModelError> {
        self.check(sample)?;
        Ok(self.eval(theta, sample, false).0)
    }

    /// Gradient clipped to `‖g‖ ≤ G`.
    pub fn loss_grad(&self, sample: &Sample) -> Result<Vec<f64>, ModelError> {
        self.loss_grad_at(&self.params, sample)
    }

    pub fn loss_grad_at(&self, theta: &[f64], sample: &Sample) -> Result<Vec<f64>, ModelError> {
        let (_, mut g) = self.loss_and_raw_grad_at(theta, sample)?;
        clip_norm(&mut g, self.grad_bound);
        Ok(g)
    }

    /// Loss and the unclipped analytic gradient of the clamped loss.
    pub fn loss_and_raw_grad_at(
        &self,
        theta: &[f64],
        sample: &Sample,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.check(sample)?;
        let (loss, grad) = self.eval(theta, sample, true);
        Ok((loss, grad.expect("gradient requested")))
    }

    fn eval(&self, theta: &[f64], sample: &Sample, want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let x = &sample.features;
        let y = sample.label;
        match self.family {
            Family::LinearRegression => {
                let r = affine(theta, x) - y;
                let sq = r * r;
                let loss = sq.min(1.0);
                let grad = want_grad.then(|| {
                    if sq < 1.0 {
                        augmented_scaled(x, 2.0 * r)
                    } else {
                        vec![0.0; theta.len()]
                    }
                });
                (loss, grad)
            }
            Family::LogisticBinary => {
                let eps = self.prob_clip;
                let lambda = self.normalizer();
                let p = sigmoid(affine(theta, x));
                let pc = p.clamp(eps, 1.0 - eps);
                let ce = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
                let scaled = ce / lambda;
                let loss = scaled.clamp(0.0, 1.0);
                let grad = want_grad.then(|| {
                    if p > eps && p < 1.0 - eps && scaled < 1.0 {
                        augmented_scaled(x, (p - y) / lambda)
                    } else {
                        vec![0.0; theta.len()]
                    }
                });
                (loss, grad)
            }
            Family::MultinomialLinear => {
                let eps = self.prob_clip;
                let lambda = self.normalizer();
                let class = y as usize;
                let probs = softmax(&logits(theta, x));
                let py = probs[class];
                let ce = -py.max(eps).ln();
                let scaled = ce / lambda;
                let loss = scaled.clamp(0.0, 1.0);
                let grad = want_grad.then(|| {
                    let width = x.len() + 1;
                    let mut g = vec![0.0; theta.len()];
                    if py > eps && scaled < 1.0 {
                        for (c, &pc) in probs.iter().enumerate() {
                            let coef = (pc - if c == class { 1.0 } else { 0.0 }) / lambda;
                            let row = &mut g[c * width..(c + 1) * width];
                            for (gj, xj) in row.iter_mut().zip(x.iter().chain(std::iter::once(&1.0))) {
                                *gj = coef * xj;
                            }
                        }
                    }
                    g
                });
                (loss, grad)
            }
        }
    }
}

fn affine(theta: &[f64], x: &[f64]) -> f64 {
    let (bias, weights) = theta.split_last().expect("non-empty parameters");
    weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias
}

fn logits(theta: &[f64], x: &[f64]) -> Vec<f64> {
    theta.chunks(x.len() + 1).map(|row| affine(row, x)).collect()
}

fn augmented_scaled(x: &[f64], scale: f64) -> Vec<f64> {
    x.iter().map(|v| v * scale).chain(std::iter::once(scale)).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Rescales `g` in place so that `‖g‖ ≤ bound`.
pub fn clip_norm(g: &mut [f64], bound: f64) {
    let norm = norm_sq(g).sqrt();
    if norm > bound {
        let s = bound / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// Radial projection onto `{θ : ‖θ‖² ≤ radius}`.
pub fn project(params: &[f64], radius: f64) -> Vec<f64> {
    let mut out = params.to_vec();
    project_in_place(&mut out, radius);
    out
}

pub fn project_in_place(params: &mut [f64], radius: f64) {
    let sq = norm_sq(params);
    if sq > radius {
        let s = (radius / sq).sqrt();
        params.iter_mut().for_each(|v| *v *= s);
        // Rounding can leave the rescaled norm a few ulps outside the ball.
        while norm_sq(params) > radius {
            params.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
        }
    }
}

pub fn predict(model: &ModelEntry, x: &[f64]) -> Result<Prediction, ModelError> {
    model.predict(x)
}

pub fn loss(model: &ModelEntry, sample: &Sample) -> Result<f64, ModelError> {
    model.loss(sample)
}

pub fn loss_grad(model: &ModelEntry, sample: &Sample) -> Result<Vec<f64>, ModelError> {
    model.loss_grad(sample)
}

/// Checks a whole dictionary: each entry valid, ids unique, one feature dimension.
pub fn validate_dictionary(models: &[ModelEntry]) -> Result<(), ModelError> {
    let mut ids: Vec<usize> = models.iter().map(|m| m.id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(ModelError::DuplicateId(w[0]));
    }
    for m in models {
        m.validate()?;
    }
    if let Some(first) = models.first() {
        if let Some(m) = models.iter().find(|m| m.dim != first.dim) {
            return Err(ModelError::InvalidModel {
                model: m.id,
                reason: format!("dimension {} differs from dictionary dimension {}", m.dim, first.dim),
            });
        }
    }
    Ok(())
}

pub fn dictionary_to_json(models: &[ModelEntry]) -> Result<String, ModelError> {
    Ok(serde_json::to_string_pretty(models)?)
}

pub fn dictionary_from_json(text: &str) -> Result<Vec<ModelEntry>, ModelError> {
    let models: Vec<ModelEntry> = serde_json::from_str(text)?;
    validate_dictionary(&models)?;
    Ok(models)
}

pub fn load_dictionary(path: &Path) -> Result<Vec<ModelEntry>, ModelError> {
    dictionary_from_json(&fs::read_to_string(path)?)
}

pub fn save_dictionary(path: &Path, models: &[ModelEntry]) -> Result<(), ModelError> {
    fs::write(path, dictionary_to_json(models)?)?;
    Ok(())
}

/// Generator for a random dictionary of one family.
///
/// Model `k` gets radius `radius_min · (radius_max/radius_min)^(k/(K−1))`, so
/// the dictionary spans tightly and loosely constrained models. Costs and
/// bandwidths cycle through the given lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDictionary {
    pub count: usize,
    pub family: Family,
    pub dim: usize,
    #[serde(default = "two")]
    pub classes: usize,
    pub costs: Vec<f64>,
    #[serde(default)]
    pub bandwidths: Option<Vec<f64>>,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Standard deviation of the Gaussian initial parameters (before projection).
    #[serde(default)]
    pub init_scale: f64,
    /// Gradient bound; defaults to the bound implied by features in `[-1, 1]`.
    #[serde(default)]
    pub grad_bound: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn two() -> usize {
    2
}

impl SyntheticDictionary {
    /// Tightest `G` that holds for features bounded by 1 in absolute value.
    pub fn default_grad_bound(family: Family, dim: usize, prob_clip: f64) -> f64 {
        let xnorm = ((dim + 1) as f64).sqrt();
        let lambda = (1.0 / prob_clip).ln();
        match family {
            Family::LinearRegression => 2.0 * xnorm,
            Family::LogisticBinary => xnorm / lambda,
            Family::MultinomialLinear => std::f64::consts::SQRT_2 * xnorm / lambda,
        }
    }

    pub fn generate(&self) -> Result<Vec<ModelEntry>, ModelError> {
        let invalid = |reason: &str| ModelError::InvalidModel {
            model: 0,
            reason: reason.to_string(),
        };
        if self.count == 0 {
            return Err(invalid("synthetic dictionary needs at least one model"));
        }
        if self.costs.is_empty() {
            return Err(invalid("synthetic dictionary needs at least one cost"));
        }
        let bandwidths = self.bandwidths.clone().unwrap_or_else(|| self.costs.clone());
        if bandwidths.is_empty() {
            return Err(invalid("synthetic dictionary needs at least one bandwidth"));
        }
        let to_cost = |v: f64| Cost::from_f64(v).ok_or_else(|| invalid("costs must be nonnegative numbers"));
        let grad_bound = self
            .grad_bound
            .unwrap_or_else(|| Self::default_grad_bound(self.family, self.dim, DEFAULT_PROB_CLIP));
        let mut rng = substream(self.seed, Purpose::Dictionary, SERVER_ACTOR, 0);
        let mut models = Vec::with_capacity(self.count);
        for k in 0..self.count {
            let frac = if self.count > 1 {
                k as f64 / (self.count - 1) as f64
            } else {
                0.0
            };
            let radius = self.radius_min * (self.radius_max / self.radius_min).powf(frac);
            let mut m = ModelEntry::zeros(k, self.family, self.dim, self.classes);
            m.storage_cost = to_cost(self.costs[k % self.costs.len()])?;
            m.bandwidth_cost = to_cost(bandwidths[k % bandwidths.len()])?;
            m.radius = radius;
            m.grad_bound = grad_bound;
            for v in m.params.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = self.init_scale * z;
            }
            project_in_place(&mut m.params, radius);
            models.push(m);
        }
        validate_dictionary(&models)?;
        Ok(models)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(params: Vec<f64>) -> ModelEntry {
        let dim = params.len() - 1;
        let mut m = ModelEntry::zeros(0, Family::LinearRegression, dim, 1);
        m.params = params;
        m.radius = 100.0;
        m.grad_bound = 10.0;
        m
    }

    #[test]
    fn zero_linear_predicts_zero() {
        let m = linear(vec![0.0, 0.0, 0.0]);
        assert_eq!(m.predict(&[3.0, -7.0]).unwrap(), Prediction::Scalar(0.0));
    }

    #[test]
    fn zero_logistic_predicts_half() {
        let m = ModelEntry::zeros(0, Family::LogisticBinary, 2, 1);
        assert_eq!(m.predict(&[3.0, -7.0]).unwrap(), Prediction::Scalar(0.5));
    }

    #[test]
    fn linear_dot_product() {
        let m = linear(vec![1.0, 2.0, 0.0]);
        assert_eq!(m.predict(&[3.0, 4.0]).unwrap(), Prediction::Scalar(11.0));
    }

    #[test]
    fn dimension_mismatch() {
        let m = linear(vec![1.0, 2.0, 0.0]);
        assert!(matches!(
            m.predict(&[1.0]),
            Err(ModelError::DimensionMismatch { expected: 2, got: 1, .. })
        ));
        assert!(m.loss(&Sample::new(vec![1.0, 2.0, 3.0], 0.5)).is_err());
    }

    #[test]
    fn regression_loss_and_clamp() {
        let m = linear(vec![0.5, 0.0]);
        assert_eq!(m.loss(&Sample::new(vec![1.0], 0.5)).unwrap(), 0.0);
        let m = linear(vec![2.0, 0.0]);
        assert_eq!(m.loss(&Sample::new(vec![1.0], 0.0)).unwrap(), 1.0);
        assert_eq!(m.loss_grad(&Sample::new(vec![1.0], 0.0)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn logistic_loss_at_zero() {
        let mut m = ModelEntry::zeros(0, Family::LogisticBinary, 3, 1);
        m.prob_clip = 0.25;
        let l = m.loss(&Sample::new(vec![0.3, 0.1, -2.0], 1.0)).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn regression_gradient_example() {
        let m = linear(vec![0.0, 0.0, 0.0]);
        let g = m.loss_grad(&Sample::new(vec![1.0, 0.0], 0.5)).unwrap();
        assert_eq!(g, vec![-1.0, 0.0, -1.0]);
    }

    #[test]
    fn gradient_clipped_to_bound() {
        let mut m = linear(vec![0.0, 0.0, 0.0]);
        m.grad_bound = 2f64.sqrt() / 2.0; // raw norm is √2 = 2G
        let g = m.loss_grad(&Sample::new(vec![1.0, 0.0], 0.5)).unwrap();
        assert!((norm_sq(&g).sqrt() - m.grad_bound).abs() < 1e-15);
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let m = linear(vec![0.25, 0.1]);
        let g = m.loss_grad(&Sample::new(vec![2.0], 0.6)).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn projection_cases() {
        assert_eq!(project(&[0.1, 0.2], 1.0), vec![0.1, 0.2]);
        let p = project(&[3.0, 4.0], 1.0);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert!(norm_sq(&p) <= 1.0 && (norm_sq(&p) - 1.0).abs() < 1e-15);
        assert_eq!(project(&p, 1.0), p);
    }

    #[test]
    fn multinomial_uniform_loss() {
        let mut m = ModelEntry::zeros(0, Family::MultinomialLinear, 2, 4);
        m.prob_clip = 0.01;
        // p = 1/4 for every class: loss = ln 4 / ln 100
        let l = m.loss(&Sample::new(vec![0.5, -0.5], 2.0)).unwrap();
        assert!((l - 4f64.ln() / 100f64.ln()).abs() < 1e-15);
        assert!(m.loss(&Sample::new(vec![0.5, -0.5], 4.0)).is_err());
        assert!(m.loss(&Sample::new(vec![0.5, -0.5], 1.5)).is_err());
    }

    #[test]
    fn dictionary_round_trip_is_bit_exact() {
        let spec = SyntheticDictionary {
            count: 4,
            family: Family::LinearRegression,
            dim: 3,
            classes: 2,
            costs: vec![0.89, 1.0],
            bandwidths: None,
            radius_min: 0.1,
            radius_max: 2.0,
            init_scale: 0.3,
            grad_bound: None,
            seed: 5,
        };
        let models = spec.generate().unwrap();
        let text = dictionary_to_json(&models).unwrap();
        let back = dictionary_from_json(&text).unwrap();
        assert_eq!(back, models);
        for (a, b) in models.iter().zip(&back) {
            for (x, y) in a.params.iter().zip(&b.params) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!((models[3].radius - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dictionary_rejects_duplicates_and_out_of_ball() {
        let a = linear(vec![0.0, 0.0]);
        let err = validate_dictionary(&[a.clone(), a.clone()]).unwrap_err();
        assert!(matches!(err, ModelError::DuplicateId(0)));
        let mut b = a;
        b.params = vec![20.0, 0.0];
        assert!(b.validate().is_err());
    }
}
