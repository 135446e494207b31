#![allow(dead_code)]

use std::sync::OnceLock;

use chrono::{DateTime, Duration, TimeZone, Utc};
use mta_core::rct::{simulate, CampaignSpec, SimConfig};
use mta_core::{ConversionEvent, InteractionKind, Journey, MdaHyper, MdaModel, Touchpoint};
use rand::Rng;

pub const CHANNELS: [&str; 3] = ["Upper", "Lower", "Mid"];

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap()
}

pub fn tp(id: &str, channel: &str, kind: InteractionKind, ts: DateTime<Utc>) -> Touchpoint {
    Touchpoint {
        touchpoint_id: id.to_string(),
        customer_id: "c".to_string(),
        campaign_id: format!("camp-{channel}"),
        channel: channel.to_string(),
        ad_product: "display".to_string(),
        interaction_kind: kind,
        timestamp: ts,
    }
}

pub fn converting(customer: &str, conv_at: DateTime<Utc>, touchpoints: Vec<Touchpoint>) -> Journey {
    Journey {
        customer_id: customer.to_string(),
        touchpoints: touchpoints.into_iter().map(|t| Touchpoint { customer_id: customer.to_string(), ..t }).collect(),
        conversion: Some(ConversionEvent {
            conversion_id: format!("cv-{customer}"),
            customer_id: customer.to_string(),
            timestamp: conv_at,
            units: 1,
        }),
    }
}

/// A converting journey with 1..=max_len touchpoints spread over the week
/// before the conversion. Timestamps are coarse so ties are common.
pub fn random_journey<R: Rng>(rng: &mut R, idx: usize, max_len: usize) -> Journey {
    let conv_at = t0() + Duration::days(10);
    let n = rng.gen_range(1..=max_len);
    let tps = (0..n)
        .map(|k| {
            let lag_min = rng.gen_range(0..7 * 24 * 4) * 15;
            let kind = if rng.gen_bool(0.3) { InteractionKind::Click } else { InteractionKind::View };
            tp(
                &format!("tp-{idx}-{k}"),
                CHANNELS[rng.gen_range(0..CHANNELS.len())],
                kind,
                conv_at - Duration::minutes(lag_min),
            )
        })
        .collect();
    converting(&format!("r{idx}"), conv_at, tps)
}

fn spec(id: &str, channel: &str, lift: f64, click_rate: f64) -> CampaignSpec {
    CampaignSpec {
        campaign_id: id.to_string(),
        channel: channel.to_string(),
        ad_product: "display".to_string(),
        exposure_rate: 0.6,
        click_rate,
        true_lift: lift,
        holdout_fraction: 0.3,
        is_rct: true,
    }
}

/// An MDA model trained once on simulated data covering `CHANNELS`.
pub fn trained_mda() -> &'static MdaModel {
    static MODEL: OnceLock<MdaModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let config = SimConfig::new(
            4000,
            0.03,
            11,
            vec![spec("u", "Upper", 0.02, 0.05), spec("l", "Lower", 0.06, 0.3), spec("m", "Mid", 0.03, 0.1)],
        );
        let out = simulate(&config).unwrap();
        let journeys = mta_core::event_history::build_journeys(
            &out.touchpoints,
            &out.conversions,
            mta_core::LookbackWindow::default(),
        );
        MdaModel::train(&journeys, &MdaHyper { iterations: 300, ..MdaHyper::default() }).unwrap()
    })
}
