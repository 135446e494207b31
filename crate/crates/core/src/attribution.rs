//! Attribution models. Each maps a converting [`Journey`] to a
//! [`CreditVector`] whose credits lie in `[0, 1]` and sum to one.

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_history::{ConversionEvent, InteractionKind, Journey, Touchpoint};

const MS_PER_DAY: f64 = 86_400_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttributionError {
    #[error("conversion {conversion_id} has no in-window touchpoints")]
    NoTouchpoints { conversion_id: String },
    #[error("journey for customer {customer_id} has no conversion")]
    NotConverting { customer_id: String },
    #[error("training labels are degenerate: {converting} converting, {non_converting} non-converting journeys")]
    DegenerateLabels { converting: usize, non_converting: usize },
    #[error("invalid attribution config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouchCredit {
    pub touchpoint_id: String,
    pub credit: f64,
}

/// Per-touchpoint credit for one conversion under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditVector {
    pub conversion_id: String,
    pub entries: Vec<TouchCredit>,
}

impl CreditVector {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.credit).sum()
    }

    pub fn get(&self, touchpoint_id: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.touchpoint_id == touchpoint_id).map(|e| e.credit)
    }

    /// Checks range, sum-to-one and coverage of exactly the journey's
    /// touchpoints.
    pub fn check(&self, journey: &Journey, tol: f64) -> Result<(), String> {
        if let Some(bad) = self.entries.iter().find(|e| !(0.0..=1.0).contains(&e.credit)) {
            return Err(format!("credit {} on {} outside [0,1]", bad.credit, bad.touchpoint_id));
        }
        if (self.total() - 1.0).abs() > tol {
            return Err(format!("credits sum to {}", self.total()));
        }
        let mut ours: Vec<&str> = self.entries.iter().map(|e| e.touchpoint_id.as_str()).collect();
        let mut theirs: Vec<&str> = journey.touchpoints.iter().map(|t| t.touchpoint_id.as_str()).collect();
        ours.sort_unstable();
        theirs.sort_unstable();
        if ours != theirs {
            return Err("credit entries do not match journey touchpoints".into());
        }
        Ok(())
    }
}

pub trait AttributionModel: Send + Sync {
    fn name(&self) -> &str;
    fn credits(&self, journey: &Journey) -> Result<CreditVector, AttributionError>;
}

/// The conversion plus touchpoints in canonical order.
fn converting_parts(journey: &Journey) -> Result<(&ConversionEvent, Vec<&Touchpoint>), AttributionError> {
    let conversion = journey
        .conversion
        .as_ref()
        .ok_or_else(|| AttributionError::NotConverting { customer_id: journey.customer_id.clone() })?;
    if journey.touchpoints.is_empty() {
        return Err(AttributionError::NoTouchpoints { conversion_id: conversion.conversion_id.clone() });
    }
    let mut tps: Vec<&Touchpoint> = journey.touchpoints.iter().collect();
    tps.sort_by(|a, b| a.canonical_cmp(b));
    Ok((conversion, tps))
}

fn vector(conversion: &ConversionEvent, tps: &[&Touchpoint], credits: impl IntoIterator<Item = f64>) -> CreditVector {
    CreditVector {
        conversion_id: conversion.conversion_id.clone(),
        entries: tps
            .iter()
            .zip(credits)
            .map(|(tp, credit)| TouchCredit { touchpoint_id: tp.touchpoint_id.clone(), credit })
            .collect(),
    }
}

/// Normalizes nonnegative weights; falls back to a uniform split when they
/// sum to zero.
fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 && total.is_finite() {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    }
}

/// Full credit to the final touchpoint. Equal timestamps go to the click,
/// then to the larger touchpoint id.
#[derive(Debug, Clone, Copy, Default)]
pub struct LastTouch;

impl AttributionModel for LastTouch {
    fn name(&self) -> &str {
        "lta"
    }

    fn credits(&self, journey: &Journey) -> Result<CreditVector, AttributionError> {
        let (conversion, tps) = converting_parts(journey)?;
        let last = tps.len() - 1;
        Ok(vector(conversion, &tps, (0..tps.len()).map(|i| if i == last { 1.0 } else { 0.0 })))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Linear;

impl AttributionModel for Linear {
    fn name(&self) -> &str {
        "linear"
    }

    fn credits(&self, journey: &Journey) -> Result<CreditVector, AttributionError> {
        let (conversion, tps) = converting_parts(journey)?;
        let share = 1.0 / tps.len() as f64;
        Ok(vector(conversion, &tps, std::iter::repeat(share)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayConfig {
    half_life: Duration,
}

impl DecayConfig {
    pub fn new(half_life: Duration) -> Option<Self> {
        (half_life > Duration::zero()).then_some(Self { half_life })
    }

    pub fn from_days(days: f64) -> Option<Self> {
        if !(days.is_finite() && days > 0.0) {
            return None;
        }
        Self::new(Duration::nanoseconds((days * 86_400e9).round() as i64))
    }

    pub fn half_life(&self) -> Duration {
        self.half_life
    }
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self { half_life: Duration::days(3) }
    }
}

/// Weights `2^(-Δt / half_life)` with Δt measured back from the conversion,
/// normalized to one.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExponentialDecay {
    pub config: DecayConfig,
}

impl ExponentialDecay {
    pub fn new(config: DecayConfig) -> Self {
        Self { config }
    }
}

impl AttributionModel for ExponentialDecay {
    fn name(&self) -> &str {
        "decay"
    }

    fn credits(&self, journey: &Journey) -> Result<CreditVector, AttributionError> {
        let (conversion, tps) = converting_parts(journey)?;
        let half_life_ns = self.config.half_life.num_nanoseconds().unwrap_or(i64::MAX) as f64;
        let lags: Vec<f64> = tps
            .iter()
            .map(|tp| (conversion.timestamp - tp.timestamp).num_milliseconds() as f64 * 1e6)
            .collect();
        // Shift by the smallest lag so the freshest weight is exactly 1 and
        // long lags cannot underflow every weight to zero.
        let min_lag = lags.iter().copied().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = lags.iter().map(|lag| (-(lag - min_lag) / half_life_ns).exp2()).collect();
        Ok(vector(conversion, &tps, normalize(&weights)))
    }
}

/// Gradient-descent settings for [`MdaModel::train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdaHyper {
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Recency is capped here and empty journeys take this value; it also
    /// bounds the history used for non-converting journeys.
    pub recency_cap_days: f64,
}

impl Default for MdaHyper {
    fn default() -> Self {
        Self { learning_rate: 0.5, iterations: 1000, seed: 0, recency_cap_days: 7.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdaMetadata {
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seed: u64,
    pub recency_cap_days: f64,
    pub n_examples: usize,
}

/// Logistic conversion model over journey features, used as a
/// leave-one-out attributor.
///
/// Feature order: one `channel:<name>` count per channel seen in training
/// (sorted by name), then `kind:view`, `kind:click`, `recency_days`,
/// `journey_length`. Weights are on the raw feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdaModel {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub metadata: MdaMetadata,
}

const FIXED_FEATURES: [&str; 4] = ["kind:view", "kind:click", "recency_days", "journey_length"];

/// Maps journeys to feature rows for a fixed channel vocabulary.
struct FeatureSpace {
    channels: Vec<String>,
    recency_cap_days: f64,
}

impl FeatureSpace {
    fn from_names(names: &[String], recency_cap_days: f64) -> Result<Self, AttributionError> {
        let channels: Vec<String> = names
            .iter()
            .filter_map(|n| n.strip_prefix("channel:").map(str::to_string))
            .collect();
        let tail: Vec<&str> = names[channels.len()..].iter().map(String::as_str).collect();
        if tail != FIXED_FEATURES {
            return Err(AttributionError::Config(format!("unexpected MDA feature layout: {names:?}")));
        }
        Ok(Self { channels, recency_cap_days })
    }

    fn names(&self) -> Vec<String> {
        self.channels
            .iter()
            .map(|c| format!("channel:{c}"))
            .chain(FIXED_FEATURES.iter().map(|s| s.to_string()))
            .collect()
    }

    fn dim(&self) -> usize {
        self.channels.len() + FIXED_FEATURES.len()
    }

    fn row<'a>(&self, tps: impl Iterator<Item = &'a Touchpoint>, reference: DateTime<Utc>) -> Vec<f64> {
        let k = self.channels.len();
        let mut row = vec![0.0; self.dim()];
        let mut latest: Option<DateTime<Utc>> = None;
        let mut n = 0usize;
        for tp in tps {
            if let Some(i) = self.channels.iter().position(|c| *c == tp.channel) {
                row[i] += 1.0;
            }
            match tp.interaction_kind {
                InteractionKind::View => row[k] += 1.0,
                InteractionKind::Click => row[k + 1] += 1.0,
            }
            latest = Some(latest.map_or(tp.timestamp, |l| l.max(tp.timestamp)));
            n += 1;
        }
        row[k + 2] = match latest {
            Some(ts) => {
                let days = (reference - ts).num_milliseconds() as f64 / MS_PER_DAY;
                days.clamp(0.0, self.recency_cap_days)
            }
            None => self.recency_cap_days,
        };
        row[k + 3] = n as f64;
        row
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z) - y z`, evaluated without overflow.
fn log_loss(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}

fn canonical_key(j: &Journey) -> (&str, Option<DateTime<Utc>>, Option<&str>) {
    (
        j.customer_id.as_str(),
        j.conversion.as_ref().map(|c| c.timestamp),
        j.conversion.as_ref().map(|c| c.conversion_id.as_str()),
    )
}

impl MdaModel {
    /// Fit by full-batch gradient descent on log-loss. Labels are
    /// "journey converted". Journeys are put in canonical order first, so
    /// the result depends only on the journey set and the seed.
    pub fn train(journeys: &[Journey], hyper: &MdaHyper) -> Result<Self, AttributionError> {
        Self::train_with_trace(journeys, hyper).map(|(model, _)| model)
    }

    /// As [`MdaModel::train`], also returning the loss before each step and
    /// after the last one.
    pub fn train_with_trace(journeys: &[Journey], hyper: &MdaHyper) -> Result<(Self, Vec<f64>), AttributionError> {
        if !(hyper.learning_rate.is_finite() && hyper.learning_rate > 0.0) {
            return Err(AttributionError::Config("learning_rate must be positive".into()));
        }
        if !(hyper.recency_cap_days.is_finite() && hyper.recency_cap_days > 0.0) {
            return Err(AttributionError::Config("recency_cap_days must be positive".into()));
        }
        let converting = journeys.iter().filter(|j| j.is_converting()).count();
        let non_converting = journeys.len() - converting;
        if converting == 0 || non_converting == 0 {
            return Err(AttributionError::DegenerateLabels { converting, non_converting });
        }

        let mut ordered: Vec<&Journey> = journeys.iter().collect();
        ordered.sort_by(|a, b| canonical_key(a).cmp(&canonical_key(b)));

        let mut channels: Vec<String> = ordered
            .iter()
            .flat_map(|j| j.touchpoints.iter().map(|t| t.channel.clone()))
            .collect();
        channels.sort_unstable();
        channels.dedup();
        let space = FeatureSpace { channels, recency_cap_days: hyper.recency_cap_days };

        // Non-converting journeys are observed at the end of the data.
        let observation_end = ordered
            .iter()
            .flat_map(|j| {
                j.touchpoints.iter().map(|t| t.timestamp).chain(j.conversion.as_ref().map(|c| c.timestamp))
            })
            .max()
            .expect("at least one converting journey");
        let history_ms = (hyper.recency_cap_days * MS_PER_DAY).round() as i64;
        let history_start = observation_end - Duration::milliseconds(history_ms);

        let rows: Vec<Vec<f64>> = ordered
            .iter()
            .map(|j| match &j.conversion {
                Some(c) => space.row(j.touchpoints.iter(), c.timestamp),
                None => space.row(
                    j.touchpoints.iter().filter(|t| t.timestamp > history_start && t.timestamp <= observation_end),
                    observation_end,
                ),
            })
            .collect();
        let labels: Vec<f64> = ordered.iter().map(|j| if j.is_converting() { 1.0 } else { 0.0 }).collect();

        let d = space.dim();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for row in &rows {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut scale = vec![0.0; d];
        for row in &rows {
            for ((s, x), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        for s in scale.iter_mut() {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        let standardized: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| row.iter().zip(&mean).zip(&scale).map(|((x, m), s)| (x - m) / s).collect())
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut w: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let mut b = 0.0;
        // Standardized columns bound the smoothness constant by (d + 1) / 4;
        // capping the step at its inverse keeps the loss nonincreasing.
        let step = hyper.learning_rate.min(4.0 / (d as f64 + 1.0));

        let mut trace = Vec::with_capacity(hyper.iterations + 1);
        let mut grad_w = vec![0.0; d];
        for iter in 0..=hyper.iterations {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            let mut loss = 0.0;
            for (x, y) in standardized.iter().zip(&labels) {
                let z = b + x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>();
                loss += log_loss(z, *y);
                let r = sigmoid(z) - y;
                grad_b += r;
                for (g, xi) in grad_w.iter_mut().zip(x) {
                    *g += r * xi;
                }
            }
            trace.push(loss / n);
            if iter == hyper.iterations {
                break;
            }
            b -= step * grad_b / n;
            for (wi, g) in w.iter_mut().zip(&grad_w) {
                *wi -= step * g / n;
            }
        }

        let weights: Vec<f64> = w.iter().zip(&scale).map(|(wi, s)| wi / s).collect();
        let bias = b - weights.iter().zip(&mean).map(|(wi, m)| wi * m).sum::<f64>();
        let model = MdaModel {
            feature_names: space.names(),
            weights,
            bias,
            metadata: MdaMetadata {
                iterations: hyper.iterations,
                initial_loss: trace[0],
                final_loss: *trace.last().expect("nonempty trace"),
                seed: hyper.seed,
                recency_cap_days: hyper.recency_cap_days,
                n_examples: rows.len(),
            },
        };
        Ok((model, trace))
    }

    fn space(&self) -> Result<FeatureSpace, AttributionError> {
        if self.weights.len() != self.feature_names.len() {
            return Err(AttributionError::Config("weights and feature_names differ in length".into()));
        }
        FeatureSpace::from_names(&self.feature_names, self.metadata.recency_cap_days)
    }

    fn score(&self, row: &[f64]) -> f64 {
        sigmoid(self.bias + row.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>())
    }

    /// Predicted conversion probability of a converting journey, with
    /// recency measured back from its conversion.
    pub fn conversion_probability(&self, journey: &Journey) -> Result<f64, AttributionError> {
        let space = self.space()?;
        let reference = journey
            .conversion
            .as_ref()
            .map(|c| c.timestamp)
            .ok_or_else(|| AttributionError::NotConverting { customer_id: journey.customer_id.clone() })?;
        Ok(self.score(&space.row(journey.touchpoints.iter(), reference)))
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(raw: &str) -> Result<Self, AttributionError> {
        let model: MdaModel = serde_json::from_str(raw).map_err(|e| AttributionError::Config(e.to_string()))?;
        model.space()?;
        if model.weights.iter().chain([&model.bias]).any(|w| !w.is_finite()) {
            return Err(AttributionError::Config("non-finite MDA weight".into()));
        }
        Ok(model)
    }
}

impl AttributionModel for MdaModel {
    fn name(&self) -> &str {
        "mda"
    }

    /// Leave-one-out: each touchpoint's raw credit is the drop in predicted
    /// conversion probability when it is removed, clipped at zero.
    fn credits(&self, journey: &Journey) -> Result<CreditVector, AttributionError> {
        let (conversion, tps) = converting_parts(journey)?;
        let space = self.space()?;
        let full = self.score(&space.row(tps.iter().copied(), conversion.timestamp));
        let deltas: Vec<f64> = (0..tps.len())
            .map(|skip| {
                let rest = tps.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, t)| *t);
                (full - self.score(&space.row(rest, conversion.timestamp))).max(0.0)
            })
            .collect();
        Ok(vector(conversion, &tps, normalize(&deltas)))
    }
}
