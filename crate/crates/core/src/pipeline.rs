//! End-to-end composition: journeys -> model credits -> campaign features
//! -> calibration -> touchpoint credits.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    AttributionError, AttributionModel, CreditVector, DecayConfig, ExponentialDecay, LastTouch, Linear, MdaHyper,
    MdaModel,
};
use crate::calibration::{
    aggregate_campaign_features, evaluate_oos, fit_calibration, CalibrationError, CalibrationModel,
    CalibrationOptions, CampaignFeatureRow, CampaignInfo,
};
use crate::credit::{score_touchpoints, CreditError, MtaCredit};
use crate::event_history::{build_journeys, ConversionEvent, Journey, LookbackWindow, Touchpoint};
use crate::rct::RctResult;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Credit(#[from] CreditError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lta,
    Linear,
    Decay,
    Mda,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Lta => "lta",
            ModelKind::Linear => "linear",
            ModelKind::Decay => "decay",
            ModelKind::Mda => "mda",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lta" => Ok(ModelKind::Lta),
            "linear" => Ok(ModelKind::Linear),
            "decay" => Ok(ModelKind::Decay),
            "mda" => Ok(ModelKind::Mda),
            other => Err(format!("unknown attribution model {other:?}")),
        }
    }
}

/// Credits from every model for every attributable conversion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelCredits {
    pub by_model: BTreeMap<String, Vec<CreditVector>>,
    /// Conversions with no in-window touchpoint.
    pub unattributed: u64,
}

impl ModelCredits {
    /// Credit vectors of one conversion, keyed by model name.
    pub fn for_conversions(&self) -> HashMap<&str, BTreeMap<String, CreditVector>> {
        let mut out: HashMap<&str, BTreeMap<String, CreditVector>> = HashMap::new();
        for (model, vectors) in &self.by_model {
            for cv in vectors {
                out.entry(cv.conversion_id.as_str()).or_default().insert(model.clone(), cv.clone());
            }
        }
        out
    }
}

/// Run each model over every converting journey. Conversions without
/// touchpoints are counted as unattributed rather than failing.
pub fn attribute_journeys(
    journeys: &[Journey],
    models: &[&dyn AttributionModel],
) -> Result<ModelCredits, AttributionError> {
    let attributable: Vec<&Journey> =
        journeys.iter().filter(|j| j.is_converting() && !j.touchpoints.is_empty()).collect();
    let unattributed = journeys.iter().filter(|j| j.is_converting() && j.touchpoints.is_empty()).count() as u64;
    let mut by_model = BTreeMap::new();
    for model in models {
        let vectors = attributable.par_iter().map(|j| model.credits(j)).collect::<Result<Vec<_>, _>>()?;
        by_model.insert(model.name().to_string(), vectors);
    }
    Ok(ModelCredits { by_model, unattributed })
}

/// Score every attributable conversion with the calibration weights.
pub fn score_all(
    model: &CalibrationModel,
    journeys: &[Journey],
    credits: &ModelCredits,
) -> Result<Vec<MtaCredit>, CreditError> {
    let per_conversion = credits.for_conversions();
    let scored = journeys
        .par_iter()
        .filter(|j| j.is_converting() && !j.touchpoints.is_empty())
        .map(|j| {
            let id = j.conversion_id().expect("converting");
            let empty = BTreeMap::new();
            score_touchpoints(model, j, per_conversion.get(id).unwrap_or(&empty))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scored.into_iter().flatten().collect())
}

/// Per-model credits in touchpoint-credit form (identity weighting), for
/// side-by-side share comparisons.
pub fn baseline_credits(
    journeys: &[Journey],
    credits: &ModelCredits,
) -> Result<BTreeMap<String, Vec<MtaCredit>>, CreditError> {
    credits
        .by_model
        .iter()
        .map(|(name, vectors)| {
            let single = ModelCredits {
                by_model: [(name.clone(), vectors.clone())].into(),
                unattributed: credits.unattributed,
            };
            let identity = CalibrationModel::from_weights(&[(name.as_str(), 1.0)]);
            Ok((name.clone(), score_all(&identity, journeys, &single)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub window: LookbackWindow,
    pub decay: DecayConfig,
    pub mda: MdaHyper,
    pub models: Vec<ModelKind>,
    pub calibration: CalibrationOptions,
    pub cv_folds: usize,
    pub cv_seed: u64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            window: LookbackWindow::default(),
            decay: DecayConfig::default(),
            mda: MdaHyper::default(),
            models: vec![ModelKind::Lta, ModelKind::Mda],
            calibration: CalibrationOptions::default(),
            cv_folds: 5,
            cv_seed: 0,
        }
    }
}

/// Attribution models ready to run, with the trained MDA if requested.
pub struct Ensemble {
    pub mda: Option<MdaModel>,
    decay: ExponentialDecay,
    kinds: Vec<ModelKind>,
}

impl Ensemble {
    pub fn new(kinds: &[ModelKind], decay: DecayConfig, mda: Option<MdaModel>) -> Result<Self, AttributionError> {
        let mut kinds = kinds.to_vec();
        kinds.sort_unstable();
        kinds.dedup();
        if kinds.is_empty() {
            return Err(AttributionError::Config("no attribution models selected".into()));
        }
        if kinds.contains(&ModelKind::Mda) && mda.is_none() {
            return Err(AttributionError::Config("mda selected but no MDA model available".into()));
        }
        Ok(Self { mda, decay: ExponentialDecay::new(decay), kinds })
    }

    pub fn train(journeys: &[Journey], settings: &PipelineSettings) -> Result<Self, AttributionError> {
        let mda = if settings.models.contains(&ModelKind::Mda) {
            Some(MdaModel::train(journeys, &settings.mda)?)
        } else {
            None
        };
        Self::new(&settings.models, settings.decay, mda)
    }

    pub fn models(&self) -> Vec<&dyn AttributionModel> {
        self.kinds
            .iter()
            .map(|k| -> &dyn AttributionModel {
                match k {
                    ModelKind::Lta => &LastTouch,
                    ModelKind::Linear => &Linear,
                    ModelKind::Decay => &self.decay,
                    ModelKind::Mda => self.mda.as_ref().expect("checked in new"),
                }
            })
            .collect()
    }

    pub fn attribute(&self, journeys: &[Journey]) -> Result<ModelCredits, AttributionError> {
        attribute_journeys(journeys, &self.models())
    }
}

pub struct FitOutput {
    pub journeys: Vec<Journey>,
    pub ensemble: Ensemble,
    pub credits: ModelCredits,
    pub rows: Vec<CampaignFeatureRow>,
    pub calibration: CalibrationModel,
}

/// Train the attributors, build campaign features and fit the calibration
/// (with cross-validation metrics when there are enough experiments).
pub fn fit_pipeline(
    touchpoints: &[Touchpoint],
    conversions: &[ConversionEvent],
    campaigns: &[CampaignInfo],
    rct: &[RctResult],
    settings: &PipelineSettings,
) -> Result<FitOutput, PipelineError> {
    let journeys = build_journeys(touchpoints, conversions, settings.window);
    let ensemble = Ensemble::train(&journeys, settings)?;
    let credits = ensemble.attribute(&journeys)?;
    let rows = aggregate_campaign_features(&journeys, &credits.by_model, campaigns, rct)?;
    let calibration = fit_rows(&rows, settings)?;
    Ok(FitOutput { journeys, ensemble, credits, rows, calibration })
}

/// Fit from a prepared feature table.
pub fn fit_rows(rows: &[CampaignFeatureRow], settings: &PipelineSettings) -> Result<CalibrationModel, CalibrationError> {
    let mut options = settings.calibration.clone();
    if options.features.is_none() {
        options.features = Some(settings.models.iter().map(|m| m.name().to_string()).collect());
    }
    let mut model = fit_calibration(rows, &options)?;
    let experiments = rows.iter().filter(|r| r.target.is_some()).count();
    if experiments >= settings.cv_folds && settings.cv_folds >= 2 {
        match evaluate_oos(rows, &options, settings.cv_folds, settings.cv_seed) {
            Ok(cv) => model.cv_metrics = Some(cv),
            Err(e) => log::warn!("cross-validation skipped: {e}"),
        }
    } else {
        log::info!("cross-validation skipped: {experiments} experiments for {} folds", settings.cv_folds);
    }
    Ok(model)
}
