//! Experiment-calibrated multi-touch attribution.
//!
//! The crate is organised along the flow of data through the pipeline:
//!
//! * [`event_history`] parses touchpoint and conversion logs and assembles
//!   per-customer journeys under a lookback window.
//! * [`attribution`] holds the ensemble of attribution models (last touch,
//!   linear, exponential decay and a trainable logistic attributor).
//! * [`rct`] simulates randomized experiments with known incrementality and
//!   estimates campaign lift from treatment/holdout comparisons.
//! * [`calibration`] regresses experiment lift on attributed conversions
//!   under nonnegativity constraints.
//! * [`credit`] pushes the fitted weights back down to touchpoints and rolls
//!   the resulting credits up into attribution shares.

#![forbid(unsafe_code)]

pub mod attribution;
pub mod calibration;
pub mod credit;
pub mod event_history;
pub mod nnls;
pub mod pipeline;
pub mod rct;

pub use attribution::{
    AttributionError, AttributionModel, CreditVector, DecayConfig, ExponentialDecay, LastTouch,
    Linear, MdaHyper, MdaModel, TouchCredit,
};
pub use calibration::{
    CalibrationError, CalibrationModel, CalibrationOptions, CampaignFeatureRow, CampaignInfo,
    CvMetrics, Pooling,
};
pub use credit::{AttributionShareReport, CreditError, MtaCredit, ReportDimension, ShareRow};
pub use event_history::{
    ConversionEvent, InteractionKind, Journey, LogFormat, LookbackWindow, ParsedLog, Touchpoint,
};
pub use rct::{Arm, CampaignSpec, GroundTruthRow, RctError, RctResult, SimConfig, SimOutput};
