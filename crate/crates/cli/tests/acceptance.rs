//! Acceptance gate. Prints one line per criterion and exits nonzero if any
//! fails. Runs without the libtest harness so the lines always show.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration as Elapsed, Instant};

use chrono::{Duration, TimeZone, Utc};
use mta_core::calibration::{fit_calibration, CalibrationOptions, Pooling};
use mta_core::credit::{aggregate_shares, score_touchpoints};
use mta_core::event_history::build_journeys;
use mta_core::nnls::{gradient, nnls};
use mta_core::pipeline::{baseline_credits, fit_pipeline, score_all, ModelKind, PipelineSettings};
use mta_core::rct::{estimate_lift, simulate, CampaignSpec, SimConfig};
use mta_core::{
    AttributionModel, CalibrationModel, CampaignFeatureRow, CampaignInfo, ConversionEvent, CreditVector,
    ExponentialDecay, InteractionKind, Journey, LastTouch, Linear, LookbackWindow, MdaHyper, MdaModel, MtaCredit,
    ReportDimension, TouchCredit, Touchpoint,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BETA_TOL: f64 = 1e-9;
const WEIGHT_TOL: f64 = 1e-8;
const CREDIT_TOL: f64 = 1e-9;
const SHARE_GAP: f64 = 1e-6;
const SHARE_TOL: f64 = 1e-9;
const SUM_TOL: f64 = 1e-9;
const RATIO_TOL: f64 = 1e-9;
const NNLS_TOL: f64 = 1e-8;
const KKT_TOL: f64 = 1e-9;
const BIAS_SE: f64 = 2.0;
const COVERAGE: (f64, f64) = (0.92, 0.98);
const SPLIT_PP: f64 = 0.05;
const LTA_WORSE_FRACTION: f64 = 0.8;

const FAST: Elapsed = Elapsed::from_secs(1);
const RCT_BUDGET: Elapsed = Elapsed::from_secs(120);
const E2E_BUDGET: Elapsed = Elapsed::from_secs(300);

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(start: Instant, budget: Elapsed, detail: String) -> Check {
    let took = start.elapsed();
    ensure(took < budget, format!("{detail}; {:.2}s of {}s", took.as_secs_f64(), budget.as_secs()))
}

fn t0() -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 6, 1, 0, 0, 0).unwrap()
}

fn touch(id: &str, customer: &str, channel: &str, kind: InteractionKind, hours_before: i64) -> Touchpoint {
    Touchpoint {
        touchpoint_id: id.to_string(),
        customer_id: customer.to_string(),
        campaign_id: format!("{}-campaign", channel.to_lowercase()),
        channel: channel.to_string(),
        ad_product: "display".to_string(),
        interaction_kind: kind,
        timestamp: t0() - Duration::hours(hours_before),
    }
}

fn journey(customer: &str, touchpoints: Vec<Touchpoint>) -> Journey {
    Journey {
        customer_id: customer.to_string(),
        touchpoints,
        conversion: Some(ConversionEvent {
            conversion_id: format!("cv-{customer}"),
            customer_id: customer.to_string(),
            timestamp: t0(),
            units: 1,
        }),
    }
}

fn feature_row(id: &str, lta: f64, mda: f64, target: f64) -> CampaignFeatureRow {
    CampaignFeatureRow {
        campaign_id: id.to_string(),
        channel: "all".to_string(),
        features: BTreeMap::from([("lta".to_string(), lta), ("mda".to_string(), mda)]),
        target: Some(target),
        target_std_error: None,
    }
}

fn calibration_factor() -> Check {
    let start = Instant::now();
    let mut row = feature_row("c", 1000.0, 0.0, 900.0);
    row.features.remove("mda");
    let model = fit_calibration(&[row], &CalibrationOptions::default()).map_err(|e| e.to_string())?;
    let beta = model.weights[0];
    ensure((beta - 0.9).abs() < BETA_TOL, format!("beta = {beta:.12}"))?;
    within_budget(start, FAST, format!("beta = {beta:.12}"))
}

/// Customers 1 and 3 saw one channel each; customer 2 saw Upper, then Lower.
fn two_channel_customers() -> (Vec<Journey>, Vec<BTreeMap<String, CreditVector>>) {
    let journeys = vec![
        journey("c1", vec![touch("u1", "c1", "Upper", InteractionKind::View, 30)]),
        journey("c2", vec![
            touch("u2", "c2", "Upper", InteractionKind::View, 30),
            touch("l2", "c2", "Lower", InteractionKind::View, 5),
        ]),
        journey("c3", vec![touch("l3", "c3", "Lower", InteractionKind::View, 5)]),
    ];
    let credits = journeys
        .iter()
        .map(|j| {
            let lta = LastTouch.credits(j).unwrap();
            let mda = if j.customer_id == "c2" {
                CreditVector {
                    conversion_id: "cv-c2".into(),
                    entries: vec![
                        TouchCredit { touchpoint_id: "u2".into(), credit: 0.3 },
                        TouchCredit { touchpoint_id: "l2".into(), credit: 0.7 },
                    ],
                }
            } else {
                lta.clone()
            };
            BTreeMap::from([("lta".to_string(), lta), ("mda".to_string(), mda)])
        })
        .collect();
    (journeys, credits)
}

fn upper_share(model: &CalibrationModel, journeys: &[Journey], credits: &[BTreeMap<String, CreditVector>]) -> f64 {
    let scored: Vec<MtaCredit> =
        journeys.iter().zip(credits).flat_map(|(j, c)| score_touchpoints(model, j, c).unwrap()).collect();
    aggregate_shares(&scored, ReportDimension::Channel).share_of("Upper").unwrap()
}

fn worked_ensemble_example() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let rows: Vec<_> = (0..8)
        .map(|i| {
            let lta: f64 = rng.gen_range(200.0..2000.0);
            let mda = lta * rng.gen_range(0.6..1.4);
            feature_row(&format!("c{i}"), lta, mda, 0.6 * lta + 0.4 * mda)
        })
        .collect();
    let fitted = fit_calibration(&rows, &CalibrationOptions::default()).map_err(|e| e.to_string())?;
    let (wl, wm) = (fitted.weights[0], fitted.weights[1]);
    ensure((wl - 0.6).abs() < WEIGHT_TOL && (wm - 0.4).abs() < WEIGHT_TOL, format!("weights ({wl:.10}, {wm:.10})"))?;

    let (journeys, credits) = two_channel_customers();
    let model = CalibrationModel::from_weights(&[("lta", 0.6), ("mda", 0.4)]);
    let c2 = score_touchpoints(&model, &journeys[1], &credits[1]).map_err(|e| e.to_string())?;
    let (cu, cl) = (c2[0].credit, c2[1].credit);
    ensure((cu - 0.12).abs() < CREDIT_TOL && (cl - 0.88).abs() < CREDIT_TOL, format!("customer 2 credits ({cu}, {cl})"))?;

    let lta = upper_share(&CalibrationModel::from_weights(&[("lta", 1.0)]), &journeys, &credits);
    let mda = upper_share(&CalibrationModel::from_weights(&[("mda", 1.0)]), &journeys, &credits);
    let mta = upper_share(&model, &journeys, &credits);
    let gap = (lta - mda).abs().min((lta - mta).abs()).min((mda - mta).abs());
    let detail = format!(
        "weights ({wl:.10}, {wm:.10}); credits ({cu:.2}, {cl:.2}); Upper share lta {lta:.4} mda {mda:.4} mta {mta:.4}"
    );
    ensure(gap > SHARE_GAP, detail.clone())?;
    within_budget(start, FAST, detail)
}

fn three_to_one_shares() -> Check {
    let credit = |id: &str, channel: &str, value: f64| MtaCredit {
        conversion_id: id.into(),
        touchpoint_id: id.into(),
        campaign_id: id.into(),
        channel: channel.into(),
        ad_product: "p".into(),
        credit: value,
    };
    let report = aggregate_shares(&[credit("a", "Upper", 2000.0), credit("b", "Lower", 6000.0)], ReportDimension::Channel);
    let (up, lo) = (report.share_of("Upper").unwrap(), report.share_of("Lower").unwrap());
    ensure(
        (up - 0.25).abs() < SHARE_TOL && (lo - 0.75).abs() < SHARE_TOL,
        format!("Upper {up}, Lower {lo}, ratio {:.6}", lo / up),
    )
}

fn spec(id: &str, channel: &str, lift: f64, exposure: f64, holdout: f64) -> CampaignSpec {
    CampaignSpec {
        campaign_id: id.to_string(),
        channel: channel.to_string(),
        ad_product: format!("{}-product", channel.to_lowercase()),
        exposure_rate: exposure,
        click_rate: 0.1,
        true_lift: lift,
        holdout_fraction: holdout,
        is_rct: true,
    }
}

fn trained_mda() -> MdaModel {
    let config = SimConfig::new(
        5000,
        0.03,
        4,
        vec![spec("u", "Upper", 0.02, 0.6, 0.3), spec("l", "Lower", 0.06, 0.6, 0.3), spec("m", "Mid", 0.03, 0.6, 0.3)],
    );
    let out = simulate(&config).unwrap();
    let journeys = build_journeys(&out.touchpoints, &out.conversions, LookbackWindow::default());
    MdaModel::train(&journeys, &MdaHyper { iterations: 300, ..MdaHyper::default() }).unwrap()
}

fn credit_normalization() -> Check {
    const CHANNELS: [&str; 3] = ["Upper", "Lower", "Mid"];
    let models: Vec<Box<dyn AttributionModel>> =
        vec![Box::new(LastTouch), Box::new(Linear), Box::new(ExponentialDecay::default()), Box::new(trained_mda())];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 10_000;
    let mut worst_sum: f64 = 0.0;
    for i in 0..n {
        let customer = format!("r{i}");
        let len = rng.gen_range(1..=10);
        let tps = (0..len)
            .map(|k| {
                let kind = if rng.gen_bool(0.3) { InteractionKind::Click } else { InteractionKind::View };
                let channel = CHANNELS[rng.gen_range(0..3)];
                touch(&format!("{customer}-{k}"), &customer, channel, kind, rng.gen_range(0..168))
            })
            .collect();
        let j = journey(&customer, tps);
        for m in &models {
            let cv = m.credits(&j).map_err(|e| e.to_string())?;
            if cv.entries.iter().any(|e| !(0.0..=1.0).contains(&e.credit)) {
                return Err(format!("{} credit outside [0, 1] on journey {i}", m.name()));
            }
            worst_sum = worst_sum.max((cv.total() - 1.0).abs());
        }
    }
    ensure(worst_sum <= SUM_TOL, format!("{n} journeys x {} models, max |sum - 1| = {worst_sum:.2e}", models.len()))?;

    let two = journey("h", vec![
        touch("old", "h", "Upper", InteractionKind::View, 24 * 4),
        touch("new", "h", "Lower", InteractionKind::View, 24),
    ]);
    let cv = ExponentialDecay::default().credits(&two).map_err(|e| e.to_string())?;
    let ratio = cv.get("new").unwrap() / cv.get("old").unwrap();
    ensure(
        (ratio - 2.0).abs() < RATIO_TOL,
        format!("{n} journeys x {} models, max |sum - 1| = {worst_sum:.2e}; decay ratio {ratio:.12}", models.len()),
    )
}

fn rct_calibration() -> Check {
    let start = Instant::now();
    let reps = 500u64;
    let mut errors = Vec::with_capacity(reps as usize);
    let mut covered = 0usize;
    for seed in 0..reps {
        let config = SimConfig::new(100_000, 0.02, seed, vec![spec("rct", "Upper", 0.01, 1.0, 0.1)]);
        let out = simulate(&config).map_err(|e| e.to_string())?;
        let est = estimate_lift(out.assignment("rct").unwrap(), &out.conversions, "rct").map_err(|e| e.to_string())?;
        let truth = out.ground_truth[0].true_incremental;
        errors.push(est.incremental_conversions - truth);
        covered += usize::from(est.ci_low <= truth && truth <= est.ci_high);
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let z = mean / (sd / n.sqrt());
    let coverage = covered as f64 / n;
    let detail = format!("{reps} replications: mean bias {mean:.2} ({z:+.2} SE), coverage {:.1}%", 100.0 * coverage);
    ensure(z.abs() <= BIAS_SE && (COVERAGE.0..=COVERAGE.1).contains(&coverage), detail.clone())?;
    within_budget(start, RCT_BUDGET, detail)
}

fn brute_force_nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let p = a.ncols();
    let mut best = DVector::zeros(p);
    let mut best_obj = b.norm_squared();
    for mask in 1u32..(1 << p) {
        let set: Vec<usize> = (0..p).filter(|j| mask & (1 << j) != 0).collect();
        let sub = a.select_columns(&set);
        let Some(inv) = (sub.transpose() * &sub).try_inverse() else { continue };
        let z = inv * sub.transpose() * b;
        if z.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut x = DVector::zeros(p);
        for (k, &j) in set.iter().enumerate() {
            x[j] = z[k];
        }
        let obj = (a * &x - b).norm_squared();
        if obj < best_obj {
            best_obj = obj;
            best = x;
        }
    }
    best
}

fn nnls_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_x, mut worst_kkt) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let p = rng.gen_range(1..=3);
        let n = rng.gen_range(p + 2..=12);
        let a = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let sol = nnls(&a, &b).map_err(|e| format!("case {case}: {e}"))?;
        worst_x = worst_x.max((&sol.x - brute_force_nnls(&a, &b)).amax());
        let g = gradient(&a, &b, &sol.x);
        let primal = sol.x.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        let dual = g.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        let slack = sol.x.iter().zip(g.iter()).map(|(x, g)| (x * g).abs()).fold(0.0, f64::max);
        worst_kkt = worst_kkt.max(primal).max(dual).max(slack).max(sol.kkt_residual);
    }
    ensure(
        worst_x < NNLS_TOL && worst_kkt < KKT_TOL,
        format!("100 instances: max |x - oracle| = {worst_x:.2e}, max KKT violation = {worst_kkt:.2e}"),
    )
}

struct RecoveryRun {
    mta_lower: f64,
    lta_lower: f64,
    true_lower: f64,
}

/// Two channels, ten experiments each; Lower campaigns carry three times
/// the per-exposure lift of Upper campaigns.
fn recovery_run(seed: u64) -> Result<RecoveryRun, String> {
    let mut campaigns = Vec::new();
    for i in 0..10 {
        campaigns.push(spec(&format!("upper-{i:02}"), "Upper", 0.01, 0.5, 0.5));
        campaigns.push(spec(&format!("lower-{i:02}"), "Lower", 0.03, 0.5, 0.5));
    }
    let config = SimConfig::new(200_000, 0.02, seed, campaigns);
    let out = simulate(&config).map_err(|e| e.to_string())?;
    let rct = out.rct_results(&config).map_err(|e| e.to_string())?;
    let info: Vec<CampaignInfo> = config
        .campaigns
        .iter()
        .map(|c| CampaignInfo {
            campaign_id: c.campaign_id.clone(),
            channel: c.channel.clone(),
            ad_product: c.ad_product.clone(),
            is_rct: true,
        })
        .collect();
    let settings = PipelineSettings {
        mda: MdaHyper { iterations: 300, seed, ..MdaHyper::default() },
        models: vec![ModelKind::Lta, ModelKind::Mda],
        calibration: CalibrationOptions { pooling: Pooling::PerChannel, ..CalibrationOptions::default() },
        cv_seed: seed,
        ..PipelineSettings::default()
    };
    let fit = fit_pipeline(&out.touchpoints, &out.conversions, &info, &rct, &settings).map_err(|e| e.to_string())?;
    let mta = score_all(&fit.calibration, &fit.journeys, &fit.credits).map_err(|e| e.to_string())?;
    let baselines = baseline_credits(&fit.journeys, &fit.credits).map_err(|e| e.to_string())?;
    let lower = |credits: &[MtaCredit]| aggregate_shares(credits, ReportDimension::Channel).share_of("Lower").unwrap_or(0.0);

    let truth: f64 = out.ground_truth.iter().filter(|g| g.campaign_id.starts_with("lower")).map(|g| g.true_incremental).sum();
    let total: f64 = out.ground_truth.iter().map(|g| g.true_incremental).sum();
    Ok(RecoveryRun { mta_lower: lower(&mta), lta_lower: lower(&baselines["lta"]), true_lower: truth / total })
}

fn end_to_end_recovery() -> Check {
    let start = Instant::now();
    let runs = (0..20).map(recovery_run).collect::<Result<Vec<_>, _>>()?;
    let target = 0.75;
    let worst_mta = runs.iter().map(|r| (r.mta_lower - target).abs()).fold(0.0, f64::max);
    let lta_worse = runs.iter().filter(|r| (r.lta_lower - target).abs() > (r.mta_lower - target).abs()).count();
    let n = runs.len() as f64;
    let mean = |f: fn(&RecoveryRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let detail = format!(
        "Lower share mean: mta {:.3}, lta {:.3}, simulated truth {:.3}; max |mta - 0.75| = {:.3}; lta further off in {lta_worse}/20",
        mean(|r| r.mta_lower),
        mean(|r| r.lta_lower),
        mean(|r| r.true_lower),
        worst_mta
    );
    ensure(worst_mta <= SPLIT_PP && lta_worse as f64 >= LTA_WORSE_FRACTION * n, detail.clone())?;
    within_budget(start, E2E_BUDGET, detail)
}

const DETERMINISM_CONFIG: &str = r#"
seed = 99

[simulation]
n_customers = 30000
baseline_conversion_rate = 0.02
campaigns = [
  { campaign_id = "u1", channel = "Upper", ad_product = "video", exposure_rate = 0.5, click_rate = 0.05, true_lift = 0.01, holdout_fraction = 0.5 },
  { campaign_id = "u2", channel = "Upper", ad_product = "display", exposure_rate = 0.5, click_rate = 0.05, true_lift = 0.01, holdout_fraction = 0.5 },
  { campaign_id = "u3", channel = "Upper", ad_product = "display", exposure_rate = 0.5, click_rate = 0.05, true_lift = 0.01, holdout_fraction = 0.5 },
  { campaign_id = "l1", channel = "Lower", ad_product = "search", exposure_rate = 0.5, click_rate = 0.2, true_lift = 0.03, holdout_fraction = 0.5 },
  { campaign_id = "l2", channel = "Lower", ad_product = "search", exposure_rate = 0.5, click_rate = 0.2, true_lift = 0.03, holdout_fraction = 0.5 },
  { campaign_id = "l3", channel = "Lower", ad_product = "sponsored", exposure_rate = 0.5, click_rate = 0.2, true_lift = 0.03, holdout_fraction = 0.5 },
]

[mda]
iterations = 200

[calibration]
cv_folds = 3
"#;

fn run_pipeline(config: &Path, out: &Path) -> Result<(), String> {
    for command in ["simulate", "fit", "attribute", "report"] {
        let status = Command::new(env!("CARGO_BIN_EXE_mta"))
            .args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), command])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("{command} failed: {}", String::from_utf8_lossy(&status.stderr).trim()));
        }
    }
    Ok(())
}

fn directory_contents(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(files)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&config, &a)?;
    run_pipeline(&config, &b)?;
    let (fa, fb) = (directory_contents(&a)?, directory_contents(&b)?);
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let bytes: usize = fa.values().map(Vec::len).sum();
    ensure(
        fa.len() == fb.len() && differing.is_empty(),
        format!("{} files, {bytes} bytes compared; differing: {differing:?}", fa.len()),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("calibration factor from one experiment", calibration_factor),
        ("ensemble weights, blended credits and share differences", worked_ensemble_example),
        ("2000/6000 credits give 25/75 shares", three_to_one_shares),
        ("credit normalization over random journeys", credit_normalization),
        ("lift estimator bias and interval coverage", rct_calibration),
        ("nonnegative least squares against brute force", nnls_oracle),
        ("end-to-end recovery of a 3:1 incrementality split", end_to_end_recovery),
        ("byte-identical reruns of the CLI pipeline", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{status}] {} {name}: {detail} ({:.2}s)", i + 1, started.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
