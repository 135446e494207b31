//! Causal calibration: regress experiment lift on attributed conversions.
//!
//! Each experiment campaign contributes one row whose features are the
//! conversions credited to the campaign by each attribution model and whose
//! target is the measured incremental conversions. The fitted model is the
//! nonnegative weighted sum of features that best predicts the target.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::CreditVector;
use crate::event_history::Journey;
use crate::nnls::{nnls, NnlsError};
use crate::rct::RctResult;

/// Group key of the pooled fit.
pub const GLOBAL_GROUP: &str = "global";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("insufficient data for group {group}: {rows} experiment rows for {free_weights} free weights")]
    InsufficientData { group: String, rows: usize, free_weights: usize },
    #[error("data integrity: {0}")]
    DataIntegrity(String),
    #[error("invalid calibration config: {0}")]
    Config(String),
    #[error("solver failed: {0}")]
    Solver(#[from] NnlsError),
    #[error("feature table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignInfo {
    pub campaign_id: String,
    pub channel: String,
    pub ad_product: String,
    pub is_rct: bool,
}

/// Campaign-level features and, for experiment campaigns, the lift target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignFeatureRow {
    pub campaign_id: String,
    pub channel: String,
    pub features: BTreeMap<String, f64>,
    pub target: Option<f64>,
    pub target_std_error: Option<f64>,
}

impl CampaignFeatureRow {
    pub fn feature(&self, name: &str) -> f64 {
        self.features.get(name).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Global,
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub pooling: Pooling,
    pub intercept: bool,
    /// Weight rows by `1 / target_std_error^2`.
    pub inverse_variance: bool,
    /// Features to fit, in order. Defaults to every feature present.
    pub features: Option<Vec<String>>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { pooling: Pooling::Global, intercept: false, inverse_variance: false, features: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_rows: usize,
    pub r_squared: f64,
    pub residual_norm: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFit {
    pub weights: Vec<f64>,
    pub intercept: Option<f64>,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvMetrics {
    pub folds: usize,
    pub n_rows: usize,
    /// Mean absolute percentage error over rows with `|target| >= 1`.
    pub mape: Option<f64>,
    pub mape_excluded: usize,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub feature_names: Vec<String>,
    /// Pooled weights, aligned with `feature_names`.
    pub weights: Vec<f64>,
    pub intercept: Option<f64>,
    pub pooling: Pooling,
    pub diagnostics: FitDiagnostics,
    /// Per-channel fits under [`Pooling::PerChannel`]; channels without
    /// their own fit use the pooled weights.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub channel_fits: BTreeMap<String, GroupFit>,
    #[serde(default)]
    pub cv_metrics: Option<CvMetrics>,
}

impl CalibrationModel {
    /// Weights (and intercept) that apply to a campaign in `channel`.
    pub fn weights_for(&self, channel: &str) -> (&[f64], Option<f64>) {
        match self.channel_fits.get(channel) {
            Some(fit) => (&fit.weights, fit.intercept),
            None => (&self.weights, self.intercept),
        }
    }

    pub fn weight_map_for(&self, channel: &str) -> BTreeMap<&str, f64> {
        let (w, _) = self.weights_for(channel);
        self.feature_names.iter().map(String::as_str).zip(w.iter().copied()).collect()
    }

    /// Single-feature-per-model constructor used for fixed weightings.
    pub fn from_weights(weights: &[(&str, f64)]) -> Self {
        Self {
            feature_names: weights.iter().map(|(n, _)| n.to_string()).collect(),
            weights: weights.iter().map(|(_, w)| *w).collect(),
            intercept: None,
            pooling: Pooling::Global,
            diagnostics: FitDiagnostics { n_rows: 0, r_squared: 0.0, residual_norm: 0.0, kkt_residual: 0.0 },
            channel_fits: BTreeMap::new(),
            cv_metrics: None,
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(raw: &str) -> Result<Self, CalibrationError> {
        let model: Self = serde_json::from_str(raw).map_err(|e| CalibrationError::Config(e.to_string()))?;
        let d = model.feature_names.len();
        let ok = |w: &[f64]| w.len() == d && w.iter().all(|v| v.is_finite() && *v >= 0.0);
        if !ok(&model.weights) || !model.channel_fits.values().all(|f| ok(&f.weights)) {
            return Err(CalibrationError::Config("weights must be finite, nonnegative and match feature_names".into()));
        }
        Ok(model)
    }
}

/// Sum each model's credits (times conversion units) over the touchpoints
/// of each campaign, and join experiment targets.
pub fn aggregate_campaign_features(
    journeys: &[Journey],
    credits: &BTreeMap<String, Vec<CreditVector>>,
    campaigns: &[CampaignInfo],
    rct: &[RctResult],
) -> Result<Vec<CampaignFeatureRow>, CalibrationError> {
    let mut tp_campaign: HashMap<&str, (&str, &str)> = HashMap::new();
    let mut units: HashMap<&str, u64> = HashMap::new();
    for j in journeys.iter().filter(|j| j.is_converting()) {
        let conv = j.conversion.as_ref().expect("converting");
        units.insert(conv.conversion_id.as_str(), conv.units);
        for tp in &j.touchpoints {
            tp_campaign.insert(tp.touchpoint_id.as_str(), (tp.campaign_id.as_str(), tp.channel.as_str()));
        }
    }

    let mut channel_of: BTreeMap<String, String> =
        campaigns.iter().map(|c| (c.campaign_id.clone(), c.channel.clone())).collect();
    let mut sums: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (model, vectors) in credits {
        for cv in vectors {
            let u = *units.get(cv.conversion_id.as_str()).ok_or_else(|| {
                CalibrationError::DataIntegrity(format!("{model} credits unknown conversion {}", cv.conversion_id))
            })? as f64;
            for e in &cv.entries {
                let (campaign, channel) = *tp_campaign.get(e.touchpoint_id.as_str()).ok_or_else(|| {
                    CalibrationError::DataIntegrity(format!("{model} credits unknown touchpoint {}", e.touchpoint_id))
                })?;
                channel_of.entry(campaign.to_string()).or_insert_with(|| channel.to_string());
                *sums.entry(campaign.to_string()).or_default().entry(model.clone()).or_default() += e.credit * u;
            }
        }
    }

    let is_rct: HashMap<&str, bool> = campaigns.iter().map(|c| (c.campaign_id.as_str(), c.is_rct)).collect();
    let targets: HashMap<&str, &RctResult> = rct.iter().map(|r| (r.campaign_id.as_str(), r)).collect();
    Ok(channel_of
        .into_iter()
        .map(|(campaign_id, channel)| {
            let features = credits
                .keys()
                .map(|m| (m.clone(), sums.get(&campaign_id).and_then(|s| s.get(m)).copied().unwrap_or(0.0)))
                .collect();
            let result = targets
                .get(campaign_id.as_str())
                .filter(|_| is_rct.get(campaign_id.as_str()).copied().unwrap_or(true));
            CampaignFeatureRow {
                target: result.map(|r| r.incremental_conversions),
                target_std_error: result.map(|r| r.std_error),
                campaign_id,
                channel,
                features,
            }
        })
        .collect())
}

fn feature_names(rows: &[CampaignFeatureRow], options: &CalibrationOptions) -> Result<Vec<String>, CalibrationError> {
    let names = match &options.features {
        Some(names) => names.clone(),
        None => {
            let set: BTreeSet<&String> = rows.iter().flat_map(|r| r.features.keys()).collect();
            set.into_iter().cloned().collect()
        }
    };
    if names.is_empty() {
        return Err(CalibrationError::Config("no features to fit".into()));
    }
    let unique: BTreeSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(CalibrationError::Config(format!("duplicate feature names {names:?}")));
    }
    Ok(names)
}

fn r_squared(targets: &[f64], predictions: &[f64]) -> f64 {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = targets.iter().zip(predictions).map(|(t, p)| (t - p).powi(2)).sum();
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-18 * targets.iter().map(|t| t * t).sum::<f64>().max(1.0) {
        1.0
    } else {
        0.0
    }
}

fn fit_group(
    group: &str,
    rows: &[&CampaignFeatureRow],
    names: &[String],
    options: &CalibrationOptions,
) -> Result<GroupFit, CalibrationError> {
    let d = names.len();
    let active: Vec<usize> = (0..d).filter(|&j| rows.iter().any(|r| r.feature(&names[j]) != 0.0)).collect();
    for (j, name) in names.iter().enumerate() {
        if !active.contains(&j) {
            log::warn!("group {group}: feature {name} is zero in every row; its weight is fixed at 0");
        }
    }
    let free = active.len() + usize::from(options.intercept);
    if rows.len() < free.max(1) {
        return Err(CalibrationError::InsufficientData { group: group.to_string(), rows: rows.len(), free_weights: free });
    }

    let row_weight = |r: &CampaignFeatureRow| -> Result<f64, CalibrationError> {
        if !options.inverse_variance {
            return Ok(1.0);
        }
        match r.target_std_error {
            Some(se) if se > 0.0 && se.is_finite() => Ok(1.0 / se),
            _ => Err(CalibrationError::Config(format!(
                "campaign {}: inverse-variance weighting needs a positive std error",
                r.campaign_id
            ))),
        }
    };

    let cols = active.len() + if options.intercept { 2 } else { 0 };
    let mut a = DMatrix::zeros(rows.len(), cols);
    let mut b = DVector::zeros(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let s = row_weight(r)?;
        for (k, &j) in active.iter().enumerate() {
            a[(i, k)] = s * r.feature(&names[j]);
        }
        if options.intercept {
            // free-sign intercept as the difference of two nonnegative columns
            a[(i, active.len())] = s;
            a[(i, active.len() + 1)] = -s;
        }
        b[i] = s * r.target.expect("experiment rows only");
    }

    let sol = nnls(&a, &b)?;
    let mut weights = vec![0.0; d];
    for (k, &j) in active.iter().enumerate() {
        weights[j] = sol.x[k];
    }
    let intercept = options.intercept.then(|| sol.x[active.len()] - sol.x[active.len() + 1]);

    let targets: Vec<f64> = rows.iter().map(|r| r.target.expect("experiment rows only")).collect();
    let predictions: Vec<f64> = rows.iter().map(|r| linear_prediction(r, names, &weights, intercept)).collect();
    let residual_norm = targets.iter().zip(&predictions).map(|(t, p)| (t - p).powi(2)).sum::<f64>().sqrt();
    Ok(GroupFit {
        weights,
        intercept,
        diagnostics: FitDiagnostics {
            n_rows: rows.len(),
            r_squared: r_squared(&targets, &predictions),
            residual_norm,
            kkt_residual: sol.kkt_residual,
        },
    })
}

fn linear_prediction(row: &CampaignFeatureRow, names: &[String], weights: &[f64], intercept: Option<f64>) -> f64 {
    names.iter().zip(weights).map(|(n, w)| w * row.feature(n)).sum::<f64>() + intercept.unwrap_or(0.0)
}

/// Fit calibration weights by nonnegative least squares on the experiment
/// rows (rows without a target are ignored). Rows are put in campaign order
/// first so the fit does not depend on input order.
pub fn fit_calibration(
    rows: &[CampaignFeatureRow],
    options: &CalibrationOptions,
) -> Result<CalibrationModel, CalibrationError> {
    let mut experiments: Vec<&CampaignFeatureRow> = rows.iter().filter(|r| r.target.is_some()).collect();
    experiments.sort_by(|a, b| a.campaign_id.cmp(&b.campaign_id));
    if let Some(bad) = experiments.iter().find(|r| {
        r.features.values().any(|v| !v.is_finite() || *v < 0.0) || !r.target.is_some_and(f64::is_finite)
    }) {
        return Err(CalibrationError::DataIntegrity(format!(
            "campaign {}: features must be finite and nonnegative, target finite",
            bad.campaign_id
        )));
    }
    let names = feature_names(rows, options)?;

    let pooled = fit_group(GLOBAL_GROUP, &experiments, &names, options)?;
    let mut channel_fits = BTreeMap::new();
    if options.pooling == Pooling::PerChannel {
        let mut by_channel: BTreeMap<&str, Vec<&CampaignFeatureRow>> = BTreeMap::new();
        for r in &experiments {
            by_channel.entry(r.channel.as_str()).or_default().push(r);
        }
        for (channel, group) in by_channel {
            channel_fits.insert(channel.to_string(), fit_group(channel, &group, &names, options)?);
        }
        for r in rows.iter().filter(|r| !channel_fits.contains_key(&r.channel)) {
            log::warn!("channel {} has no experiment rows; campaign {} uses pooled weights", r.channel, r.campaign_id);
        }
    }

    Ok(CalibrationModel {
        feature_names: names,
        weights: pooled.weights,
        intercept: pooled.intercept,
        pooling: options.pooling,
        diagnostics: pooled.diagnostics,
        channel_fits,
        cv_metrics: None,
    })
}

/// Predicted incremental conversions for one campaign, floored at zero.
/// Features the row lacks count as zero.
pub fn predict_campaign(model: &CalibrationModel, row: &CampaignFeatureRow) -> f64 {
    for name in model.feature_names.iter().filter(|n| !row.features.contains_key(*n)) {
        log::warn!("campaign {} lacks feature {name}; treating it as 0", row.campaign_id);
    }
    let (weights, intercept) = model.weights_for(&row.channel);
    linear_prediction(row, &model.feature_names, weights, intercept).max(0.0)
}

/// Seeded k-fold cross-validation over experiment campaigns.
pub fn evaluate_oos(
    rows: &[CampaignFeatureRow],
    options: &CalibrationOptions,
    k: usize,
    seed: u64,
) -> Result<CvMetrics, CalibrationError> {
    let mut experiments: Vec<&CampaignFeatureRow> = rows.iter().filter(|r| r.target.is_some()).collect();
    experiments.sort_by(|a, b| a.campaign_id.cmp(&b.campaign_id));
    let n = experiments.len();
    if k < 2 || k > n {
        return Err(CalibrationError::Config(format!("fold count {k} must be in [2, {n}]")));
    }
    // Pin the feature set so every fold fits the same columns.
    let mut fold_options = options.clone();
    fold_options.features = Some(feature_names(rows, options)?);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut predictions = vec![0.0; n];
    for fold in 0..k {
        let (test, train): (Vec<_>, Vec<_>) = order.iter().copied().enumerate().partition(|(pos, _)| pos % k == fold);
        let train_rows: Vec<CampaignFeatureRow> = train.iter().map(|&(_, i)| experiments[i].clone()).collect();
        let model = fit_calibration(&train_rows, &fold_options)?;
        for (_, i) in test {
            predictions[i] = predict_campaign(&model, experiments[i]);
        }
    }

    let targets: Vec<f64> = experiments.iter().map(|r| r.target.expect("experiment")).collect();
    let mut mape_terms = Vec::new();
    for (t, p) in targets.iter().zip(&predictions) {
        if t.abs() >= 1.0 {
            mape_terms.push((p - t).abs() / t.abs());
        }
    }
    let mape = (!mape_terms.is_empty()).then(|| mape_terms.iter().sum::<f64>() / mape_terms.len() as f64);
    Ok(CvMetrics {
        folds: k,
        n_rows: n,
        mape,
        mape_excluded: n - mape_terms.len(),
        r_squared: r_squared(&targets, &predictions),
    })
}

const FIXED_COLUMNS: [&str; 4] = ["campaign_id", "channel", "target", "target_std_error"];

/// CSV layout: `campaign_id,channel,target,target_std_error` followed by
/// one column per feature. Empty target cells mark non-experiment rows.
pub fn write_feature_table<W: Write>(writer: W, rows: &[CampaignFeatureRow]) -> Result<(), CalibrationError> {
    let names: BTreeSet<&String> = rows.iter().flat_map(|r| r.features.keys()).collect();
    let table = |e: csv::Error| CalibrationError::Table(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FIXED_COLUMNS.iter().copied().chain(names.iter().map(|s| s.as_str()))).map_err(table)?;
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut record = vec![r.campaign_id.clone(), r.channel.clone(), opt(r.target), opt(r.target_std_error)];
        record.extend(names.iter().map(|n| r.feature(n).to_string()));
        w.write_record(&record).map_err(table)?;
    }
    w.flush().map_err(|e| CalibrationError::Table(e.to_string()))
}

pub fn read_feature_table<R: Read>(reader: R) -> Result<Vec<CampaignFeatureRow>, CalibrationError> {
    let table = |e: csv::Error| CalibrationError::Table(e.to_string());
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(table)?.clone();
    let head: Vec<&str> = headers.iter().take(FIXED_COLUMNS.len()).collect();
    if head != FIXED_COLUMNS {
        return Err(CalibrationError::Table(format!("expected leading columns {FIXED_COLUMNS:?}, found {head:?}")));
    }
    let parse = |raw: &str, line: u64| -> Result<Option<f64>, CalibrationError> {
        let raw = raw.trim();
        if raw.is_empty() {
            return Ok(None);
        }
        raw.parse::<f64>()
            .map(Some)
            .map_err(|e| CalibrationError::Table(format!("line {line}: {raw:?}: {e}")))
    };
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(table)?;
        let line = record.position().map_or(0, |p| p.line());
        let mut features = BTreeMap::new();
        for (name, raw) in headers.iter().zip(record.iter()).skip(FIXED_COLUMNS.len()) {
            features.insert(name.to_string(), parse(raw, line)?.unwrap_or(0.0));
        }
        rows.push(CampaignFeatureRow {
            campaign_id: record[0].to_string(),
            channel: record[1].to_string(),
            target: parse(&record[2], line)?,
            target_std_error: parse(&record[3], line)?,
            features,
        });
    }
    Ok(rows)
}
