//! Touchpoint-level MTA credits and attribution-share reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::CreditVector;
use crate::calibration::CalibrationModel;
use crate::event_history::{Journey, LogFormat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CreditError {
    #[error("data integrity: {0}")]
    DataIntegrity(String),
    #[error("credit table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtaCredit {
    pub conversion_id: String,
    pub touchpoint_id: String,
    pub campaign_id: String,
    pub channel: String,
    pub ad_product: String,
    pub credit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportDimension {
    #[default]
    Channel,
    AdProduct,
    Campaign,
}

impl ReportDimension {
    pub fn key<'a>(&self, credit: &'a MtaCredit) -> &'a str {
        match self {
            ReportDimension::Channel => &credit.channel,
            ReportDimension::AdProduct => &credit.ad_product,
            ReportDimension::Campaign => &credit.campaign_id,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ReportDimension::Channel => "channel",
            ReportDimension::AdProduct => "ad_product",
            ReportDimension::Campaign => "campaign",
        }
    }
}

/// Calibrated credit for each touchpoint of one conversion:
/// `units * sum_m w_m * credit_m(tp)`, with the weights that apply to the
/// touchpoint's channel. Models named by the calibration but absent from
/// `credits` contribute nothing. Every supplied vector must cover exactly
/// the journey's touchpoints.
pub fn score_touchpoints(
    model: &CalibrationModel,
    journey: &Journey,
    credits: &BTreeMap<String, CreditVector>,
) -> Result<Vec<MtaCredit>, CreditError> {
    let Some(conversion) = &journey.conversion else {
        return Err(CreditError::DataIntegrity(format!("journey of {} has no conversion", journey.customer_id)));
    };
    for (name, cv) in credits {
        if cv.conversion_id != conversion.conversion_id {
            return Err(CreditError::DataIntegrity(format!(
                "{name} credits conversion {} while scoring {}",
                cv.conversion_id, conversion.conversion_id
            )));
        }
        let covers = cv.entries.len() == journey.touchpoints.len()
            && journey.touchpoints.iter().all(|tp| cv.get(&tp.touchpoint_id).is_some());
        if !covers {
            return Err(CreditError::DataIntegrity(format!(
                "{name} credits for {} do not match the journey's touchpoints",
                conversion.conversion_id
            )));
        }
    }
    for name in model.feature_names.iter().filter(|n| !credits.contains_key(*n)) {
        log::warn!("no {name} credits for conversion {}; treating them as zero", conversion.conversion_id);
    }

    let units = conversion.units as f64;
    Ok(journey
        .touchpoints
        .iter()
        .map(|tp| {
            let (weights, _) = model.weights_for(&tp.channel);
            let credit: f64 = model
                .feature_names
                .iter()
                .zip(weights)
                .filter_map(|(name, w)| credits.get(name).and_then(|cv| cv.get(&tp.touchpoint_id)).map(|c| w * c))
                .sum();
            MtaCredit {
                conversion_id: conversion.conversion_id.clone(),
                touchpoint_id: tp.touchpoint_id.clone(),
                campaign_id: tp.campaign_id.clone(),
                channel: tp.channel.clone(),
                ad_product: tp.ad_product.clone(),
                credit: credit * units,
            }
        })
        .collect())
}

pub fn per_conversion_total(credits: &[MtaCredit]) -> f64 {
    credits.iter().map(|c| c.credit).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub value: String,
    pub total_credit: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionShareReport {
    pub dimension: ReportDimension,
    pub rows: Vec<ShareRow>,
    pub grand_total: f64,
    /// Set when there is no credit to normalize; all shares are then 0.
    pub zero_total: bool,
    pub unattributed_conversions: u64,
}

impl AttributionShareReport {
    pub fn with_unattributed(mut self, count: u64) -> Self {
        self.unattributed_conversions = count;
        self
    }

    pub fn share_of(&self, value: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.value == value).map(|r| r.share)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let headers = [self.dimension.label(), "credit", "share"];
        let body: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| [r.value.clone(), format!("{:.4}", r.total_credit), format!("{:.2}%", 100.0 * r.share)])
            .collect();
        write_aligned(&mut out, &headers, &body);
        self.write_footer(&mut out);
        out
    }

    fn write_footer(&self, out: &mut String) {
        if self.zero_total {
            out.push_str("note: total credit is zero; shares reported as 0\n");
        }
        let _ = writeln!(out, "unattributed conversions: {}", self.unattributed_conversions);
    }
}

/// Roll credits up by `dimension` and normalize. Each group is summed in
/// (conversion_id, touchpoint_id) order, so the output is bit-identical for
/// any input order.
pub fn aggregate_shares(credits: &[MtaCredit], dimension: ReportDimension) -> AttributionShareReport {
    let mut groups: BTreeMap<&str, Vec<&MtaCredit>> = BTreeMap::new();
    for c in credits {
        groups.entry(dimension.key(c)).or_default().push(c);
    }
    let totals: Vec<(&str, f64)> = groups
        .into_iter()
        .map(|(value, mut members)| {
            members.sort_by(|a, b| {
                a.conversion_id.cmp(&b.conversion_id).then_with(|| a.touchpoint_id.cmp(&b.touchpoint_id))
            });
            (value, members.iter().map(|c| c.credit).sum())
        })
        .collect();
    let grand_total: f64 = totals.iter().map(|(_, t)| t).sum();
    let zero_total = grand_total.is_nan() || grand_total <= 0.0;
    let mut rows: Vec<ShareRow> = totals
        .into_iter()
        .map(|(value, total)| ShareRow {
            value: value.to_string(),
            total_credit: total,
            share: if zero_total { 0.0 } else { total / grand_total },
        })
        .collect();
    rows.sort_by(|a, b| b.share.total_cmp(&a.share).then_with(|| a.value.cmp(&b.value)));
    AttributionShareReport { dimension, rows, grand_total, zero_total, unattributed_conversions: 0 }
}

/// Calibrated shares next to the shares single attribution models give.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareComparison {
    pub mta: AttributionShareReport,
    pub baselines: BTreeMap<String, AttributionShareReport>,
}

impl ShareComparison {
    pub fn render_table(&self) -> String {
        let mut headers = vec![self.mta.dimension.label().to_string(), "mta_credit".into(), "mta_share".into()];
        headers.extend(self.baselines.keys().map(|k| format!("{k}_share")));
        let body: Vec<Vec<String>> = self
            .mta
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.value.clone(), format!("{:.4}", r.total_credit), format!("{:.2}%", 100.0 * r.share)];
                line.extend(self.baselines.values().map(|b| match b.share_of(&r.value) {
                    Some(s) => format!("{:.2}%", 100.0 * s),
                    None => "-".into(),
                }));
                line
            })
            .collect();
        let mut out = String::new();
        let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
        write_aligned(&mut out, &header_refs, &body);
        self.mta.write_footer(&mut out);
        out
    }
}

/// First column left-aligned, the rest right-aligned.
fn write_aligned<R: AsRef<[String]>>(out: &mut String, headers: &[&str], body: &[R]) {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row.as_ref()) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |out: &mut String, cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(out, headers.to_vec());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(out, rule.iter().map(String::as_str).collect());
    for row in body {
        line(out, row.as_ref().iter().map(String::as_str).collect());
    }
}

pub fn write_credits<W: Write>(mut writer: W, credits: &[MtaCredit], format: LogFormat) -> Result<(), CreditError> {
    let err = |e: &dyn std::fmt::Display| CreditError::Table(e.to_string());
    match format {
        LogFormat::Jsonl => {
            for c in credits {
                serde_json::to_writer(&mut writer, c).map_err(|e| err(&e))?;
                writer.write_all(b"\n").map_err(|e| err(&e))?;
            }
            writer.flush().map_err(|e| err(&e))
        }
        LogFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            for c in credits {
                w.serialize(c).map_err(|e| err(&e))?;
            }
            w.flush().map_err(|e| err(&e))
        }
    }
}

pub fn read_credits<R: Read>(reader: R, format: LogFormat) -> Result<Vec<MtaCredit>, CreditError> {
    let err = |line: usize, e: &dyn std::fmt::Display| CreditError::Table(format!("line {line}: {e}"));
    match format {
        LogFormat::Jsonl => {
            let mut out = Vec::new();
            for (i, line) in BufReader::new(reader).lines().enumerate() {
                let line = line.map_err(|e| err(i + 1, &e))?;
                if !line.trim().is_empty() {
                    out.push(serde_json::from_str(&line).map_err(|e| err(i + 1, &e))?);
                }
            }
            Ok(out)
        }
        LogFormat::Csv => csv::Reader::from_reader(reader)
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| err(i + 2, &e)))
            .collect(),
    }
}
