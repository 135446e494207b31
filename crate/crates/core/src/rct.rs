//! Desk-scale ground truth: synthetic shoppers with known incremental ad
//! effects, keyed treatment/holdout randomization, and the
//! treatment-vs-holdout lift estimator.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::event_history::{ConversionEvent, InteractionKind, Touchpoint};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Share of clamped customers above which ground truth is flagged as
/// departing from the additive closed form.
const CLAMP_WARN_FRACTION: f64 = 0.001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RctError {
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("campaign {campaign_id}: degenerate design ({n_treatment} treatment, {n_holdout} holdout)")]
    DegenerateDesign { campaign_id: String, n_treatment: u64, n_holdout: u64 },
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> RctError {
    RctError::Config { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treatment,
    Holdout,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub campaign_id: String,
    pub channel: String,
    pub ad_product: String,
    /// Probability a treated customer is reached.
    pub exposure_rate: f64,
    /// Probability an exposure's view is followed by a click.
    pub click_rate: f64,
    /// Additive conversion-probability effect of being exposed.
    pub true_lift: f64,
    pub holdout_fraction: f64,
    #[serde(default = "default_true")]
    pub is_rct: bool,
}

fn default_horizon_days() -> f64 {
    14.0
}

fn default_lag_hours() -> f64 {
    72.0
}

fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_customers: usize,
    pub campaigns: Vec<CampaignSpec>,
    pub baseline_conversion_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Exposures fall uniformly in `[start, start + horizon)`.
    #[serde(default = "default_horizon_days")]
    pub horizon_days: f64,
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
    /// A converting exposed customer converts uniformly within this many
    /// hours after their last exposure.
    #[serde(default = "default_lag_hours")]
    pub max_conversion_lag_hours: f64,
}

impl SimConfig {
    pub fn new(n_customers: usize, baseline_conversion_rate: f64, seed: u64, campaigns: Vec<CampaignSpec>) -> Self {
        Self {
            n_customers,
            campaigns,
            baseline_conversion_rate,
            seed,
            horizon_days: default_horizon_days(),
            start: default_start(),
            max_conversion_lag_hours: default_lag_hours(),
        }
    }

    pub fn validate(&self) -> Result<(), RctError> {
        fn prob(field: String, v: f64) -> Result<(), RctError> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(config_err(field, format!("{v} is not a probability in [0, 1]")))
            }
        }
        if self.n_customers < 2 {
            return Err(config_err("n_customers", "must be at least 2"));
        }
        prob("baseline_conversion_rate".into(), self.baseline_conversion_rate)?;
        if !(self.horizon_days.is_finite() && self.horizon_days > 0.0) {
            return Err(config_err("horizon_days", "must be positive"));
        }
        if !(self.max_conversion_lag_hours.is_finite() && self.max_conversion_lag_hours >= 0.0) {
            return Err(config_err("max_conversion_lag_hours", "must be nonnegative"));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, c) in self.campaigns.iter().enumerate() {
            let at = |f: &str| format!("campaigns[{i}].{f}");
            if c.campaign_id.is_empty() {
                return Err(config_err(at("campaign_id"), "must not be empty"));
            }
            if !seen.insert(c.campaign_id.as_str()) {
                return Err(config_err(at("campaign_id"), format!("duplicate id {}", c.campaign_id)));
            }
            prob(at("exposure_rate"), c.exposure_rate)?;
            prob(at("click_rate"), c.click_rate)?;
            if !(c.true_lift.is_finite() && (-1.0..=1.0).contains(&c.true_lift)) {
                return Err(config_err(at("true_lift"), format!("{} is outside [-1, 1]", c.true_lift)));
            }
            if !(c.holdout_fraction > 0.0 && c.holdout_fraction < 1.0) {
                return Err(config_err(at("holdout_fraction"), format!("{} is outside (0, 1)", c.holdout_fraction)));
            }
        }
        Ok(())
    }
}

/// Deterministic random stream for one (seed, key, customer) triple. Keys
/// are length-prefixed so distinct tuples never collide by concatenation.
fn keyed_rng(seed: u64, key: &str, customer_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((key.len() as u64).to_le_bytes());
    h.update(key.as_bytes());
    h.update((customer_id.len() as u64).to_le_bytes());
    h.update(customer_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

const CONVERSION_KEY: &str = "\u{0}conversion";

fn arm_from_draw(u: f64, holdout_fraction: f64) -> Arm {
    if u < holdout_fraction {
        Arm::Holdout
    } else {
        Arm::Treatment
    }
}

/// Randomize customers into treatment/holdout for one campaign. Each
/// customer's arm depends only on (seed, campaign_id, customer_id), so it
/// is stable under reordering and growth of the customer list.
pub fn assign_treatment(
    customer_ids: &[String],
    holdout_fraction: f64,
    seed: u64,
    campaign_id: &str,
) -> Result<BTreeMap<String, Arm>, RctError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(config_err("holdout_fraction", format!("{holdout_fraction} is outside (0, 1)")));
    }
    Ok(customer_ids
        .iter()
        .map(|id| {
            let u: f64 = keyed_rng(seed, campaign_id, id).gen();
            (id.clone(), arm_from_draw(u, holdout_fraction))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub campaign_id: String,
    /// Expected incremental conversions given realized exposures.
    pub true_incremental: f64,
    pub n_treatment: u64,
    pub n_holdout: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub touchpoints: Vec<Touchpoint>,
    pub conversions: Vec<ConversionEvent>,
    pub ground_truth: Vec<GroundTruthRow>,
    pub customer_ids: Vec<String>,
    /// Arm per customer (aligned with `customer_ids`) for each campaign.
    pub arms: BTreeMap<String, Vec<Arm>>,
    /// Customers whose summed conversion probability left `[0, 1]`.
    pub clamped_customers: usize,
}

impl SimOutput {
    pub fn assignment(&self, campaign_id: &str) -> Option<impl Iterator<Item = (&str, Arm)> + '_> {
        let arms = self.arms.get(campaign_id)?;
        Some(self.customer_ids.iter().map(String::as_str).zip(arms.iter().copied()))
    }

    /// Lift estimates for every campaign flagged as an experiment.
    pub fn rct_results(&self, config: &SimConfig) -> Result<Vec<RctResult>, RctError> {
        config
            .campaigns
            .iter()
            .filter(|c| c.is_rct)
            .map(|c| {
                let assignment = self.assignment(&c.campaign_id).expect("every campaign is assigned");
                estimate_lift(assignment, &self.conversions, &c.campaign_id)
            })
            .collect()
    }
}

struct CustomerDraw {
    touchpoints: Vec<Touchpoint>,
    conversion: Option<ConversionEvent>,
    arms: Vec<Arm>,
    /// Per campaign: (p_with - p_without) if exposed, else 0.
    increments: Vec<f64>,
    clamped: bool,
}

fn offset(start: DateTime<Utc>, span_ms: f64, u: f64) -> DateTime<Utc> {
    start + Duration::milliseconds((u * span_ms).floor() as i64)
}

fn simulate_customer(config: &SimConfig, index: usize, customer_id: &str) -> CustomerDraw {
    let horizon_ms = config.horizon_days * 86_400_000.0;
    let lag_ms = config.max_conversion_lag_hours * 3_600_000.0;
    let k = config.campaigns.len();
    let mut touchpoints = Vec::new();
    let mut arms = Vec::with_capacity(k);
    let mut exposed = vec![false; k];

    for (ci, camp) in config.campaigns.iter().enumerate() {
        let mut rng = keyed_rng(config.seed, &camp.campaign_id, customer_id);
        // First draw must match `assign_treatment`.
        let arm = arm_from_draw(rng.gen(), camp.holdout_fraction);
        arms.push(arm);
        if arm == Arm::Holdout || rng.gen::<f64>() >= camp.exposure_rate {
            continue;
        }
        exposed[ci] = true;
        let seen_at = offset(config.start, horizon_ms, rng.gen());
        let make = |suffix: &str, kind, ts| Touchpoint {
            touchpoint_id: format!("tp-{index:08}-{ci:03}-{suffix}"),
            customer_id: customer_id.to_string(),
            campaign_id: camp.campaign_id.clone(),
            channel: camp.channel.clone(),
            ad_product: camp.ad_product.clone(),
            interaction_kind: kind,
            timestamp: ts,
        };
        touchpoints.push(make("v", InteractionKind::View, seen_at));
        if rng.gen::<f64>() < camp.click_rate {
            let clicked_at = seen_at + Duration::milliseconds(rng.gen_range(1_000..1_800_000));
            touchpoints.push(make("c", InteractionKind::Click, clicked_at));
        }
    }

    let raw: f64 = config.baseline_conversion_rate
        + config.campaigns.iter().zip(&exposed).filter(|(_, e)| **e).map(|(c, _)| c.true_lift).sum::<f64>();
    let p = raw.clamp(0.0, 1.0);
    let increments = config
        .campaigns
        .iter()
        .zip(&exposed)
        .map(|(c, &e)| if e { p - (raw - c.true_lift).clamp(0.0, 1.0) } else { 0.0 })
        .collect();

    let mut rng = keyed_rng(config.seed, CONVERSION_KEY, customer_id);
    let converts = rng.gen::<f64>() < p;
    let timing: f64 = rng.gen();
    let conversion = converts.then(|| {
        let timestamp = match touchpoints.iter().map(|t| t.timestamp).max() {
            Some(last) => offset(last, lag_ms, timing),
            None => offset(config.start, horizon_ms, timing),
        };
        ConversionEvent {
            conversion_id: format!("cv-{index:08}"),
            customer_id: customer_id.to_string(),
            timestamp,
            units: 1,
        }
    });

    CustomerDraw { touchpoints, conversion, arms, increments, clamped: raw != p }
}

/// Generate a synthetic population. Every random choice is keyed by
/// (seed, campaign, customer), so the result is identical however the
/// customer loop is scheduled.
pub fn simulate(config: &SimConfig) -> Result<SimOutput, RctError> {
    config.validate()?;
    let width = config.n_customers.saturating_sub(1).to_string().len().max(6);
    let customer_ids: Vec<String> = (0..config.n_customers).map(|i| format!("cust-{i:0width$}")).collect();

    let draws: Vec<CustomerDraw> = customer_ids
        .par_iter()
        .enumerate()
        .map(|(i, id)| simulate_customer(config, i, id))
        .collect();

    let k = config.campaigns.len();
    let mut arms: Vec<Vec<Arm>> = vec![Vec::with_capacity(config.n_customers); k];
    let mut truth = vec![0.0; k];
    let mut n_treatment = vec![0u64; k];
    let mut touchpoints = Vec::new();
    let mut conversions = Vec::new();
    let mut clamped_customers = 0;
    for draw in draws {
        for ci in 0..k {
            arms[ci].push(draw.arms[ci]);
            if draw.arms[ci] == Arm::Treatment {
                n_treatment[ci] += 1;
            }
            truth[ci] += draw.increments[ci];
        }
        touchpoints.extend(draw.touchpoints);
        conversions.extend(draw.conversion);
        clamped_customers += usize::from(draw.clamped);
    }

    if clamped_customers as f64 > CLAMP_WARN_FRACTION * config.n_customers as f64 {
        log::warn!(
            "{clamped_customers} of {} customers had conversion probability clamped; ground truth departs from the additive closed form",
            config.n_customers
        );
    }

    let ground_truth = config
        .campaigns
        .iter()
        .enumerate()
        .map(|(ci, c)| GroundTruthRow {
            campaign_id: c.campaign_id.clone(),
            true_incremental: truth[ci],
            n_treatment: n_treatment[ci],
            n_holdout: config.n_customers as u64 - n_treatment[ci],
        })
        .collect();
    let arms = config.campaigns.iter().map(|c| c.campaign_id.clone()).zip(arms).collect();

    Ok(SimOutput { touchpoints, conversions, ground_truth, customer_ids, arms, clamped_customers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RctResult {
    pub campaign_id: String,
    pub n_treatment: u64,
    pub n_holdout: u64,
    pub conv_treatment: u64,
    pub conv_holdout: u64,
    pub incremental_conversions: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RctResult {
    /// Treatment-scale lift from arm sizes and converter counts.
    pub fn from_counts(
        campaign_id: &str,
        n_treatment: u64,
        n_holdout: u64,
        conv_treatment: u64,
        conv_holdout: u64,
    ) -> Result<Self, RctError> {
        if n_treatment == 0 || n_holdout == 0 {
            return Err(RctError::DegenerateDesign { campaign_id: campaign_id.to_string(), n_treatment, n_holdout });
        }
        let (nt, nh) = (n_treatment as f64, n_holdout as f64);
        let (ct, ch) = (conv_treatment as f64, conv_holdout as f64);
        let incremental = ct - nt / nh * ch;
        let (pt, ph) = ((ct / nt).min(1.0), (ch / nh).min(1.0));
        let std_error = nt * (pt * (1.0 - pt) / nt + ph * (1.0 - ph) / nh).sqrt();
        Ok(Self {
            campaign_id: campaign_id.to_string(),
            n_treatment,
            n_holdout,
            conv_treatment,
            conv_holdout,
            incremental_conversions: incremental,
            std_error,
            ci_low: incremental - Z_95 * std_error,
            ci_high: incremental + Z_95 * std_error,
        })
    }
}

/// Compare converters between arms. Conversion units are summed per
/// customer; customers absent from `assignment` are ignored.
pub fn estimate_lift<'a>(
    assignment: impl IntoIterator<Item = (&'a str, Arm)>,
    conversions: &[ConversionEvent],
    campaign_id: &str,
) -> Result<RctResult, RctError> {
    let mut units: HashMap<&str, u64> = HashMap::new();
    for c in conversions {
        *units.entry(c.customer_id.as_str()).or_default() += c.units;
    }
    let (mut n_t, mut n_h, mut c_t, mut c_h) = (0u64, 0u64, 0u64, 0u64);
    for (customer, arm) in assignment {
        let u = units.get(customer).copied().unwrap_or(0);
        match arm {
            Arm::Treatment => {
                n_t += 1;
                c_t += u;
            }
            Arm::Holdout => {
                n_h += 1;
                c_h += u;
            }
        }
    }
    RctResult::from_counts(campaign_id, n_t, n_h, c_t, c_h)
}
