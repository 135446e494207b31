//! Event-history data model: touchpoints, conversions, and the journeys
//! assembled from them under a lookback window.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Header of the touchpoint CSV layout. JSONL records use the same names.
pub const TOUCHPOINT_FIELDS: [&str; 7] = [
    "touchpoint_id",
    "customer_id",
    "campaign_id",
    "channel",
    "ad_product",
    "interaction_kind",
    "timestamp",
];

/// Header of the conversion CSV layout.
pub const CONVERSION_FIELDS: [&str; 4] = ["conversion_id", "customer_id", "timestamp", "units"];

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("unreadable event log: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unrecognized csv header: {0}")]
    Header(String),
}

/// Ad interaction type. Ordering matters: a click sorts after a view so
/// that it wins last-touch ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    View,
    Click,
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InteractionKind::View => f.write_str("view"),
            InteractionKind::Click => f.write_str("click"),
        }
    }
}

/// RFC 3339 timestamps truncated to millisecond precision.
pub mod ts_millis {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        parse(&raw).map_err(serde::de::Error::custom)
    }

    pub fn parse(raw: &str) -> Result<DateTime<Utc>, String> {
        let ts = DateTime::parse_from_rfc3339(raw.trim())
            .map_err(|e| format!("invalid timestamp {raw:?}: {e}"))?;
        let millis = ts.timestamp_millis();
        DateTime::from_timestamp_millis(millis).ok_or_else(|| format!("timestamp out of range: {raw}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Touchpoint {
    pub touchpoint_id: String,
    pub customer_id: String,
    pub campaign_id: String,
    pub channel: String,
    pub ad_product: String,
    pub interaction_kind: InteractionKind,
    #[serde(with = "ts_millis")]
    pub timestamp: DateTime<Utc>,
}

impl Touchpoint {
    /// Canonical in-journey ordering: time, then click after view, then id.
    /// The last element under this ordering is the last-touch winner.
    pub fn canonical_cmp(&self, other: &Touchpoint) -> std::cmp::Ordering {
        self.timestamp
            .cmp(&other.timestamp)
            .then(self.interaction_kind.cmp(&other.interaction_kind))
            .then_with(|| self.touchpoint_id.cmp(&other.touchpoint_id))
    }
}

fn default_units() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionEvent {
    pub conversion_id: String,
    pub customer_id: String,
    #[serde(with = "ts_millis")]
    pub timestamp: DateTime<Utc>,
    #[serde(default = "default_units")]
    pub units: u64,
}

/// Touchpoints of one customer leading up to at most one conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Journey {
    pub customer_id: String,
    pub touchpoints: Vec<Touchpoint>,
    pub conversion: Option<ConversionEvent>,
}

impl Journey {
    pub fn is_converting(&self) -> bool {
        self.conversion.is_some()
    }

    pub fn conversion_id(&self) -> Option<&str> {
        self.conversion.as_ref().map(|c| c.conversion_id.as_str())
    }

    pub fn units(&self) -> u64 {
        self.conversion.as_ref().map_or(0, |c| c.units)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LookbackWindow {
    duration: Duration,
}

impl LookbackWindow {
    pub fn new(duration: Duration) -> Option<Self> {
        (duration > Duration::zero()).then_some(Self { duration })
    }

    pub fn days(days: f64) -> Option<Self> {
        if !(days.is_finite() && days > 0.0) {
            return None;
        }
        Self::new(Duration::milliseconds((days * 86_400_000.0).round() as i64))
    }

    pub fn duration(&self) -> Duration {
        self.duration
    }

    /// Half-open window `(end - duration, end]`.
    pub fn contains(&self, ts: DateTime<Utc>, end: DateTime<Utc>) -> bool {
        ts <= end && ts > end - self.duration
    }
}

impl Default for LookbackWindow {
    fn default() -> Self {
        Self { duration: Duration::days(7) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    Jsonl,
    Csv,
}

/// A record that could not be decoded. `line` is 1-based and counts the
/// CSV header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineDiagnostic {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for LineDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedLog {
    pub touchpoints: Vec<Touchpoint>,
    pub conversions: Vec<ConversionEvent>,
    pub diagnostics: Vec<LineDiagnostic>,
}

impl ParsedLog {
    pub fn skipped(&self) -> usize {
        self.diagnostics.len()
    }

    pub fn extend(&mut self, other: ParsedLog) {
        self.touchpoints.extend(other.touchpoints);
        self.conversions.extend(other.conversions);
        self.diagnostics.extend(other.diagnostics);
    }
}

/// Decode an event log. JSONL streams may mix touchpoint and conversion
/// records (told apart by `touchpoint_id` / `conversion_id`); a CSV stream
/// holds one record kind, chosen by its header. Malformed records are
/// skipped with a diagnostic; only I/O failures and unknown headers abort.
pub fn parse_event_log<R: Read>(reader: R, format: LogFormat) -> Result<ParsedLog, EventLogError> {
    match format {
        LogFormat::Jsonl => parse_jsonl(reader),
        LogFormat::Csv => parse_csv(reader),
    }
}

fn parse_jsonl<R: Read>(reader: R) -> Result<ParsedLog, EventLogError> {
    let mut out = ParsedLog::default();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = idx as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.diagnostics.push(LineDiagnostic { line: lineno, message: e.to_string() });
                continue;
            }
        };
        let is_touchpoint = value.get("touchpoint_id").is_some();
        let is_conversion = value.get("conversion_id").is_some();
        let result = match (is_touchpoint, is_conversion) {
            (true, false) => serde_json::from_value::<Touchpoint>(value)
                .map(|tp| out.touchpoints.push(tp))
                .map_err(|e| e.to_string()),
            (false, true) => serde_json::from_value::<ConversionEvent>(value)
                .map(|cv| out.conversions.push(cv))
                .map_err(|e| e.to_string()),
            _ => Err("record is neither a touchpoint nor a conversion".to_string()),
        };
        if let Err(message) = result {
            out.diagnostics.push(LineDiagnostic { line: lineno, message });
        }
    }
    Ok(out)
}

enum CsvKind {
    Touchpoint,
    Conversion,
}

fn parse_csv<R: Read>(reader: R) -> Result<ParsedLog, EventLogError> {
    let mut out = ParsedLog::default();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(csv_fatal(e)),
    };
    if headers.is_empty() {
        return Ok(out);
    }
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let kind = if names == TOUCHPOINT_FIELDS {
        CsvKind::Touchpoint
    } else if names == CONVERSION_FIELDS {
        CsvKind::Conversion
    } else {
        return Err(EventLogError::Header(names.join(",")));
    };

    for record in rdr.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    return Err(csv_fatal(e));
                }
                let line = e.position().map_or(0, |p| p.line());
                out.diagnostics.push(LineDiagnostic { line, message: e.to_string() });
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        let result = match kind {
            CsvKind::Touchpoint => record
                .deserialize::<Touchpoint>(Some(&headers))
                .map(|tp| out.touchpoints.push(tp)),
            CsvKind::Conversion => record
                .deserialize::<ConversionEvent>(Some(&headers))
                .map(|cv| out.conversions.push(cv)),
        };
        if let Err(e) = result {
            out.diagnostics.push(LineDiagnostic { line, message: e.to_string() });
        }
    }
    Ok(out)
}

fn csv_fatal(e: csv::Error) -> EventLogError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => EventLogError::Io(io),
        other => EventLogError::Header(format!("{other:?}")),
    }
}

pub fn write_touchpoints<W: Write>(
    writer: W,
    touchpoints: &[Touchpoint],
    format: LogFormat,
) -> Result<(), EventLogError> {
    write_records(writer, touchpoints, format)
}

pub fn write_conversions<W: Write>(
    writer: W,
    conversions: &[ConversionEvent],
    format: LogFormat,
) -> Result<(), EventLogError> {
    write_records(writer, conversions, format)
}

fn write_records<W: Write, T: Serialize>(
    mut writer: W,
    records: &[T],
    format: LogFormat,
) -> Result<(), EventLogError> {
    match format {
        LogFormat::Jsonl => {
            for r in records {
                serde_json::to_writer(&mut writer, r)?;
                writer.write_all(b"\n")?;
            }
            writer.flush()?;
        }
        LogFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            for r in records {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Assemble journeys. Each conversion yields a journey holding the
/// customer's touchpoints inside `(conversion - window, conversion]`;
/// a customer with touchpoints but no conversion yields one
/// conversion-absent journey with all of their touchpoints. Output is
/// ordered by customer, then conversion time, then conversion id.
pub fn build_journeys(
    touchpoints: &[Touchpoint],
    conversions: &[ConversionEvent],
    window: LookbackWindow,
) -> Vec<Journey> {
    let mut by_customer: BTreeMap<&str, (Vec<&Touchpoint>, Vec<&ConversionEvent>)> = BTreeMap::new();
    for tp in touchpoints {
        by_customer.entry(tp.customer_id.as_str()).or_default().0.push(tp);
    }
    for cv in conversions {
        by_customer.entry(cv.customer_id.as_str()).or_default().1.push(cv);
    }

    let mut journeys = Vec::with_capacity(conversions.len() + by_customer.len());
    for (customer, (mut tps, mut convs)) in by_customer {
        tps.sort_by(|a, b| a.canonical_cmp(b));
        if convs.is_empty() {
            journeys.push(Journey {
                customer_id: customer.to_string(),
                touchpoints: tps.into_iter().cloned().collect(),
                conversion: None,
            });
            continue;
        }
        convs.sort_by(|a, b| {
            a.timestamp.cmp(&b.timestamp).then_with(|| a.conversion_id.cmp(&b.conversion_id))
        });
        for cv in convs {
            let start = cv.timestamp - window.duration();
            let lo = tps.partition_point(|tp| tp.timestamp <= start);
            let hi = tps.partition_point(|tp| tp.timestamp <= cv.timestamp);
            journeys.push(Journey {
                customer_id: customer.to_string(),
                touchpoints: tps[lo..hi].iter().map(|tp| (*tp).clone()).collect(),
                conversion: Some(cv.clone()),
            });
        }
    }
    journeys
}
