//! Run configuration, loaded from TOML (or JSON when the file ends in
//! `.json`).

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mta_core::attribution::{DecayConfig, MdaHyper};
use mta_core::calibration::{CalibrationOptions, Pooling};
use mta_core::credit::ReportDimension;
use mta_core::event_history::{LogFormat, LookbackWindow};
use mta_core::pipeline::{ModelKind, PipelineSettings};
use mta_core::rct::SimConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
    Table,
}

impl OutputFormat {
    /// Format of tabular artifacts (event logs, credit tables).
    pub fn table_format(&self) -> LogFormat {
        match self {
            OutputFormat::Json => LogFormat::Jsonl,
            OutputFormat::Csv | OutputFormat::Table => LogFormat::Csv,
        }
    }
}

/// Input locations. Unset entries resolve inside the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub touchpoints: Option<PathBuf>,
    pub conversions: Option<PathBuf>,
    pub campaigns: Option<PathBuf>,
    pub rct_results: Option<PathBuf>,
    /// Prepared campaign feature table; when set, `fit` skips attribution.
    pub features: Option<PathBuf>,
    pub calibration_model: Option<PathBuf>,
    pub mda_model: Option<PathBuf>,
    pub credits: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub lookback_days: f64,
    pub decay_half_life_days: f64,
    pub models: Vec<ModelKind>,
}

impl Default for AttributionSection {
    fn default() -> Self {
        Self { lookback_days: 7.0, decay_half_life_days: 3.0, models: vec![ModelKind::Lta, ModelKind::Mda] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub pooling: Pooling,
    pub intercept: bool,
    pub inverse_variance: bool,
    pub cv_folds: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { pooling: Pooling::Global, intercept: false, inverse_variance: false, cv_folds: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub dimension: ReportDimension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdaSection {
    pub learning_rate: f64,
    pub iterations: usize,
    pub recency_cap_days: f64,
}

impl Default for MdaSection {
    fn default() -> Self {
        let h = MdaHyper::default();
        Self { learning_rate: h.learning_rate, iterations: h.iterations, recency_cap_days: h.recency_cap_days }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: OutputFormat,
    /// Simulation settings; the run seed replaces any seed given here.
    pub simulation: Option<SimConfig>,
    pub paths: Paths,
    pub attribution: AttributionSection,
    pub mda: MdaSection,
    pub calibration: CalibrationSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            format: OutputFormat::default(),
            simulation: None,
            paths: Paths::default(),
            attribution: AttributionSection::default(),
            mda: MdaSection::default(),
            calibration: CalibrationSection::default(),
            report: ReportSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput { what: "config".into(), path: path.to_path_buf() },
            _ => CliError::io(format!("reading {}", path.display()), e),
        })?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        // Relative paths are relative to the config file.
        if let Some(base) = path.parent() {
            if cfg.out_dir.is_relative() {
                cfg.out_dir = base.join(&cfg.out_dir);
            }
            let p = &mut cfg.paths;
            for slot in [
                &mut p.touchpoints,
                &mut p.conversions,
                &mut p.campaigns,
                &mut p.rct_results,
                &mut p.features,
                &mut p.calibration_model,
                &mut p.mda_model,
                &mut p.credits,
            ] {
                if let Some(rel) = slot.as_mut().filter(|p| p.is_relative()) {
                    *rel = base.join(&*rel);
                }
            }
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>, format: Option<OutputFormat>) {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(out) = out {
            self.out_dir = out;
        }
        if let Some(format) = format {
            self.format = format;
        }
        if let Some(sim) = self.simulation.as_mut() {
            sim.seed = self.seed;
        }
    }

    /// SHA-256 of the effective configuration, excluding the output
    /// directory so identical runs into different directories match.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn settings(&self) -> Result<PipelineSettings, CliError> {
        let a = &self.attribution;
        let window = LookbackWindow::days(a.lookback_days)
            .ok_or_else(|| CliError::Config(format!("attribution.lookback_days: {} must be positive", a.lookback_days)))?;
        let decay = DecayConfig::from_days(a.decay_half_life_days).ok_or_else(|| {
            CliError::Config(format!("attribution.decay_half_life_days: {} must be positive", a.decay_half_life_days))
        })?;
        if a.models.is_empty() {
            return Err(CliError::Config("attribution.models: at least one model is required".into()));
        }
        let c = &self.calibration;
        Ok(PipelineSettings {
            window,
            decay,
            mda: MdaHyper {
                learning_rate: self.mda.learning_rate,
                iterations: self.mda.iterations,
                seed: self.seed,
                recency_cap_days: self.mda.recency_cap_days,
            },
            models: a.models.clone(),
            calibration: CalibrationOptions {
                pooling: c.pooling,
                intercept: c.intercept,
                inverse_variance: c.inverse_variance,
                features: None,
            },
            cv_folds: c.cv_folds,
            cv_seed: self.seed,
        })
    }
}
