use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mta_core::attribution::MdaModel;
use mta_core::calibration::{read_feature_table, write_feature_table, CalibrationModel, CampaignInfo, GLOBAL_GROUP};
use mta_core::credit::{aggregate_shares, read_credits, write_credits, MtaCredit, ShareComparison};
use mta_core::event_history::{build_journeys, parse_event_log, write_conversions, write_touchpoints, LogFormat, ParsedLog};
use mta_core::pipeline::{baseline_credits, fit_pipeline, fit_rows, score_all, Ensemble, ModelKind};
use mta_core::rct::{simulate, RctResult};
use serde::{Deserialize, Serialize};

use crate::config::{OutputFormat, RunConfig};
use crate::error::CliError;

const MANIFEST_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub conversions: u64,
    pub attributed_conversions: u64,
    pub unattributed_conversions: u64,
    pub total_credit: f64,
    pub models: Vec<String>,
}

/// Writes artifacts into the output directory and remembers their names.
struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(format!("creating {}", root.display()), e))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    fn write_with<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    {
        let path = self.root.join(name);
        let file = File::create(&path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.write_with(name, |w| w.write_all(text.as_bytes()).map_err(|e| CliError::io(name.to_string(), e)))
    }

    fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        self.write_with(name, |w| {
            let mut csv = csv::Writer::from_writer(w);
            for r in rows {
                csv.serialize(r).map_err(|e| CliError::Other(format!("{name}: {e}")))?;
            }
            csv.flush().map_err(|e| CliError::io(name.to_string(), e))
        })
    }

    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
        self.written.sort();
        let manifest = Manifest {
            command: command.to_string(),
            version: MANIFEST_VERSION.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            outputs: std::mem::take(&mut self.written),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        self.write_text(&format!("manifest_{command}.json"), &json)
    }
}

fn extension(format: LogFormat) -> &'static str {
    match format {
        LogFormat::Jsonl => "jsonl",
        LogFormat::Csv => "csv",
    }
}

fn format_of(path: &Path) -> LogFormat {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        LogFormat::Csv
    } else {
        LogFormat::Jsonl
    }
}

/// Configured path, else the first existing default in the output dir.
fn resolve(configured: &Option<PathBuf>, out_dir: &Path, what: &str, defaults: &[&str]) -> Result<PathBuf, CliError> {
    let candidates: Vec<PathBuf> = match configured {
        Some(p) => vec![p.clone()],
        None => defaults.iter().map(|d| out_dir.join(d)).collect(),
    };
    candidates
        .iter()
        .find(|p| p.is_file())
        .cloned()
        .ok_or_else(|| CliError::MissingInput { what: what.to_string(), path: candidates[0].clone() })
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(format!("opening {}", path.display()), e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    csv::Reader::from_reader(open(path)?)
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::DataIntegrity(format!("{}: {e}", path.display())))
}

fn read_json(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingInput { what: what.to_string(), path: path.to_path_buf() },
        _ => CliError::io(format!("reading {}", path.display()), e),
    })
}

fn load_events(cfg: &RunConfig) -> Result<ParsedLog, CliError> {
    let tp_path = resolve(&cfg.paths.touchpoints, &cfg.out_dir, "touchpoints", &["touchpoints.jsonl", "touchpoints.csv"])?;
    let cv_path = resolve(&cfg.paths.conversions, &cfg.out_dir, "conversions", &["conversions.jsonl", "conversions.csv"])?;
    let mut log = parse_event_log(open(&tp_path)?, format_of(&tp_path))?;
    if cv_path != tp_path {
        log.extend(parse_event_log(open(&cv_path)?, format_of(&cv_path))?);
    }
    for d in &log.diagnostics {
        log::warn!("skipped record, {d}");
    }
    if log.skipped() > 0 {
        log::warn!("{} malformed records skipped", log.skipped());
    }
    Ok(log)
}

pub fn simulate_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let sim = cfg.simulation.as_ref().ok_or_else(|| CliError::Config("simulation: section missing".into()))?;
    let out = simulate(sim)?;
    let rct = out.rct_results(sim)?;
    let campaigns: Vec<CampaignInfo> = sim
        .campaigns
        .iter()
        .map(|c| CampaignInfo {
            campaign_id: c.campaign_id.clone(),
            channel: c.channel.clone(),
            ad_product: c.ad_product.clone(),
            is_rct: c.is_rct,
        })
        .collect();

    let format = cfg.format.table_format();
    let ext = extension(format);
    let mut dir = OutDir::create(&cfg.out_dir)?;
    dir.write_with(&format!("touchpoints.{ext}"), |w| Ok(write_touchpoints(w, &out.touchpoints, format)?))?;
    dir.write_with(&format!("conversions.{ext}"), |w| Ok(write_conversions(w, &out.conversions, format)?))?;
    dir.write_csv("ground_truth.csv", &out.ground_truth)?;
    dir.write_csv("rct_results.csv", &rct)?;
    dir.write_csv("campaigns.csv", &campaigns)?;
    dir.finish("simulate", cfg)?;

    println!(
        "simulated {} customers: {} touchpoints, {} conversions, {} experiments",
        sim.n_customers,
        out.touchpoints.len(),
        out.conversions.len(),
        rct.len()
    );
    Ok(())
}

fn print_weights(model: &CalibrationModel) {
    let mut groups = vec![(GLOBAL_GROUP, &model.weights, model.intercept, &model.diagnostics)];
    for (channel, fit) in &model.channel_fits {
        groups.push((channel.as_str(), &fit.weights, fit.intercept, &fit.diagnostics));
    }
    println!("{:<12} {:<10} {:>16}", "group", "feature", "weight");
    for (group, weights, intercept, _) in &groups {
        for (name, w) in model.feature_names.iter().zip(weights.iter()) {
            println!("{group:<12} {name:<10} {w:>16.10}");
        }
        if let Some(b) = intercept {
            println!("{group:<12} {:<10} {b:>16.10}", "intercept");
        }
    }
    for (group, _, _, d) in &groups {
        println!("in-sample {group}: rows={} r2={:.6} residual_norm={:.6}", d.n_rows, d.r_squared, d.residual_norm);
    }
    match &model.cv_metrics {
        Some(cv) => println!(
            "cross-validation: folds={} r2={:.6} mape={} excluded={}",
            cv.folds,
            cv.r_squared,
            cv.mape.map_or("n/a".to_string(), |m| format!("{m:.6}")),
            cv.mape_excluded
        ),
        None => println!("cross-validation: skipped"),
    }
}

pub fn fit_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let settings = cfg.settings()?;
    let mut dir;
    let model = if let Some(features) = &cfg.paths.features {
        if !features.is_file() {
            return Err(CliError::MissingInput { what: "feature table".into(), path: features.clone() });
        }
        let rows = read_feature_table(open(features)?)?;
        let model = fit_rows(&rows, &settings)?;
        dir = OutDir::create(&cfg.out_dir)?;
        dir.write_with("campaign_features.csv", |w| Ok(write_feature_table(w, &rows)?))?;
        model
    } else {
        let log = load_events(cfg)?;
        let rct_path = resolve(&cfg.paths.rct_results, &cfg.out_dir, "rct results", &["rct_results.csv"])?;
        let rct: Vec<RctResult> = read_csv(&rct_path)?;
        let campaigns: Vec<CampaignInfo> = match resolve(&cfg.paths.campaigns, &cfg.out_dir, "campaigns", &["campaigns.csv"]) {
            Ok(path) => read_csv(&path)?,
            Err(_) if cfg.paths.campaigns.is_none() => Vec::new(),
            Err(e) => return Err(e),
        };
        let fit = fit_pipeline(&log.touchpoints, &log.conversions, &campaigns, &rct, &settings)?;
        dir = OutDir::create(&cfg.out_dir)?;
        if let Some(mda) = &fit.ensemble.mda {
            let json = mda.to_json().expect("model serializes") + "\n";
            dir.write_text("mda_model.json", &json)?;
        }
        dir.write_with("campaign_features.csv", |w| Ok(write_feature_table(w, &fit.rows)?))?;
        fit.calibration
    };
    dir.write_text("calibration_model.json", &(model.to_json().expect("model serializes") + "\n"))?;
    dir.finish("fit", cfg)?;
    print_weights(&model);
    Ok(())
}

pub fn attribute_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let settings = cfg.settings()?;
    let model_path = cfg.paths.calibration_model.clone().unwrap_or_else(|| cfg.out_dir.join("calibration_model.json"));
    let model = CalibrationModel::from_json(&read_json(&model_path, "calibration model")?)?;
    let kinds = model
        .feature_names
        .iter()
        .map(|n| n.parse::<ModelKind>().map_err(CliError::Config))
        .collect::<Result<Vec<_>, _>>()?;
    let mda = if kinds.contains(&ModelKind::Mda) {
        let path = cfg.paths.mda_model.clone().unwrap_or_else(|| cfg.out_dir.join("mda_model.json"));
        Some(MdaModel::from_json(&read_json(&path, "MDA model")?)?)
    } else {
        None
    };

    let log = load_events(cfg)?;
    let journeys = build_journeys(&log.touchpoints, &log.conversions, settings.window);
    let ensemble = Ensemble::new(&kinds, settings.decay, mda)?;
    let credits = ensemble.attribute(&journeys)?;
    let mta = score_all(&model, &journeys, &credits)?;
    let baselines = baseline_credits(&journeys, &credits)?;

    let conversions = journeys.iter().filter(|j| j.is_converting()).count() as u64;
    let summary = AttributionSummary {
        conversions,
        attributed_conversions: conversions - credits.unattributed,
        unattributed_conversions: credits.unattributed,
        total_credit: mta.iter().map(|c| c.credit).sum(),
        models: baselines.keys().cloned().collect(),
    };

    let format = cfg.format.table_format();
    let ext = extension(format);
    let mut dir = OutDir::create(&cfg.out_dir)?;
    dir.write_with(&format!("mta_credits.{ext}"), |w| Ok(write_credits(w, &mta, format)?))?;
    for (name, rows) in &baselines {
        dir.write_with(&format!("credits_{name}.{ext}"), |w| Ok(write_credits(w, rows, format)?))?;
    }
    dir.write_text("attribution_summary.json", &(serde_json::to_string_pretty(&summary).expect("serializes") + "\n"))?;
    dir.finish("attribute", cfg)?;
    println!(
        "scored {} conversions ({} touchpoint credits); {} unattributed",
        summary.attributed_conversions,
        mta.len(),
        summary.unattributed_conversions
    );
    Ok(())
}

fn read_credit_file(path: &Path) -> Result<Vec<MtaCredit>, CliError> {
    Ok(read_credits(open(path)?, format_of(path))?)
}

pub fn report_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let credits_path =
        resolve(&cfg.paths.credits, &cfg.out_dir, "credit table", &["mta_credits.jsonl", "mta_credits.csv"])?;
    let mta = read_credit_file(&credits_path)?;
    let summary_path = credits_path.with_file_name("attribution_summary.json");
    let summary: AttributionSummary = match fs::read_to_string(&summary_path) {
        Ok(raw) => serde_json::from_str(&raw).map_err(|e| CliError::DataIntegrity(format!("{}: {e}", summary_path.display())))?,
        Err(_) => AttributionSummary::default(),
    };

    let dimension = cfg.report.dimension;
    let mut baselines = BTreeMap::new();
    let ext = credits_path.extension().and_then(|e| e.to_str()).unwrap_or("jsonl").to_string();
    for name in &summary.models {
        let path = credits_path.with_file_name(format!("credits_{name}.{ext}"));
        if path.is_file() {
            baselines.insert(name.clone(), aggregate_shares(&read_credit_file(&path)?, dimension));
        }
    }
    let comparison = ShareComparison {
        mta: aggregate_shares(&mta, dimension).with_unattributed(summary.unattributed_conversions),
        baselines,
    };
    let table = comparison.render_table();
    let json = serde_json::to_string_pretty(&comparison).expect("report serializes") + "\n";

    let mut dir = OutDir::create(&cfg.out_dir)?;
    dir.write_text("report.json", &json)?;
    dir.write_text("report.txt", &table)?;
    dir.finish("report", cfg)?;

    match cfg.format {
        OutputFormat::Table => print!("{table}"),
        OutputFormat::Json => print!("{json}"),
        OutputFormat::Csv => {
            let mut header = vec![dimension.label().to_string(), "credit".into(), "share".into()];
            header.extend(comparison.baselines.keys().map(|k| format!("{k}_share")));
            println!("{}", header.join(","));
            for r in &comparison.mta.rows {
                let mut line = vec![r.value.clone(), r.total_credit.to_string(), r.share.to_string()];
                line.extend(
                    comparison.baselines.values().map(|b| b.share_of(&r.value).map(|s| s.to_string()).unwrap_or_default()),
                );
                println!("{}", line.join(","));
            }
        }
    }
    Ok(())
}
