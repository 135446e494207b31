mod common;

use std::collections::BTreeMap;

use chrono::Duration;
use common::{converting, random_journey, t0, tp};
use mta_core::credit::{aggregate_shares, per_conversion_total, read_credits, score_touchpoints, write_credits};
use mta_core::{
    AttributionModel, CalibrationModel, CreditVector, InteractionKind, Journey, LastTouch, Linear, LogFormat,
    MtaCredit, ReportDimension, TouchCredit,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn by_model(journey: &Journey) -> BTreeMap<String, CreditVector> {
    [("lta".to_string(), LastTouch.credits(journey).unwrap()), ("linear".to_string(), Linear.credits(journey).unwrap())]
        .into()
}

fn credit(conv: &str, tp: &str, channel: &str, value: f64) -> MtaCredit {
    MtaCredit {
        conversion_id: conv.into(),
        touchpoint_id: tp.into(),
        campaign_id: format!("camp-{channel}"),
        channel: channel.into(),
        ad_product: "p".into(),
        credit: value,
    }
}

fn scored(model: &CalibrationModel, journeys: &[Journey]) -> Vec<MtaCredit> {
    journeys.iter().flat_map(|j| score_touchpoints(model, j, &by_model(j)).unwrap()).collect()
}

fn random_journeys(seed: u64, n: usize) -> Vec<Journey> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_journey(&mut rng, i, 6)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn per_conversion_credit_is_conserved(seed in any::<u64>(), w1 in 0.0f64..3.0, w2 in 0.0f64..3.0, units in 1u64..5) {
        let mut j = random_journeys(seed, 1).remove(0);
        j.conversion.as_mut().unwrap().units = units;
        let model = CalibrationModel::from_weights(&[("lta", w1), ("linear", w2)]);
        let credits = score_touchpoints(&model, &j, &by_model(&j)).unwrap();
        let expected = units as f64 * (w1 + w2);
        prop_assert!((per_conversion_total(&credits) - expected).abs() < 1e-9 * (1.0 + expected));
        prop_assert!(credits.iter().all(|c| c.credit >= 0.0));
    }

    #[test]
    fn shares_ignore_a_common_scale(seed in any::<u64>(), c in 0.001f64..1000.0) {
        let journeys = random_journeys(seed, 30);
        let base = CalibrationModel::from_weights(&[("lta", 0.7), ("linear", 0.2)]);
        let scaled = CalibrationModel::from_weights(&[("lta", 0.7 * c), ("linear", 0.2 * c)]);
        let a = aggregate_shares(&scored(&base, &journeys), ReportDimension::Channel);
        let b = aggregate_shares(&scored(&scaled, &journeys), ReportDimension::Channel);
        for r in &a.rows {
            prop_assert!((b.share_of(&r.value).unwrap() - r.share).abs() < 1e-12);
        }
        let total: f64 = a.rows.iter().map(|r| r.share).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raising_one_channels_credit_raises_its_share(seed in any::<u64>(), bump in 0.01f64..10.0) {
        let journeys = random_journeys(seed, 30);
        let model = CalibrationModel::from_weights(&[("linear", 1.0)]);
        let credits = scored(&model, &journeys);
        let before = aggregate_shares(&credits, ReportDimension::Channel);
        let target = before.rows[before.rows.len() - 1].value.clone();
        let boosted: Vec<MtaCredit> = credits
            .iter()
            .cloned()
            .map(|mut c| {
                if c.channel == target {
                    c.credit *= 1.0 + bump;
                }
                c
            })
            .collect();
        let after = aggregate_shares(&boosted, ReportDimension::Channel);
        prop_assert!(after.share_of(&target).unwrap() > before.share_of(&target).unwrap());
    }

    #[test]
    fn shares_do_not_depend_on_row_order(seed in any::<u64>()) {
        let journeys = random_journeys(seed, 20);
        let credits = scored(&CalibrationModel::from_weights(&[("lta", 0.3), ("linear", 0.9)]), &journeys);
        let mut reversed = credits.clone();
        reversed.reverse();
        prop_assert_eq!(
            aggregate_shares(&credits, ReportDimension::Campaign),
            aggregate_shares(&reversed, ReportDimension::Campaign)
        );
    }
}

#[test]
fn three_times_as_effective() {
    let credits = vec![credit("a", "1", "Upper", 2000.0), credit("b", "2", "Lower", 6000.0)];
    let report = aggregate_shares(&credits, ReportDimension::Channel);
    assert!((report.share_of("Upper").unwrap() - 0.25).abs() < 1e-9);
    assert!((report.share_of("Lower").unwrap() - 0.75).abs() < 1e-9);
    assert_eq!(report.rows[0].value, "Lower");
}

#[test]
fn zero_credit_is_flagged() {
    let report = aggregate_shares(&[credit("a", "1", "Upper", 0.0)], ReportDimension::Channel);
    assert!(report.zero_total);
    assert_eq!(report.rows[0].share, 0.0);
    assert!(report.render_table().contains("total credit is zero"));
}

/// Three customers: one saw only Upper, one saw Upper then Lower, one only
/// Lower. The middle customer's model credits are fixed by hand.
fn two_channel_fixture() -> (Vec<Journey>, Vec<BTreeMap<String, CreditVector>>) {
    let conv = t0() + Duration::days(3);
    let journeys = vec![
        converting("c1", conv, vec![tp("u1", "Upper", InteractionKind::View, conv - Duration::days(2))]),
        converting("c2", conv, vec![
            tp("u2", "Upper", InteractionKind::View, conv - Duration::days(2)),
            tp("l2", "Lower", InteractionKind::View, conv - Duration::days(1)),
        ]),
        converting("c3", conv, vec![tp("l3", "Lower", InteractionKind::View, conv - Duration::days(1))]),
    ];
    let vector = |conv: &str, entries: &[(&str, f64)]| CreditVector {
        conversion_id: conv.to_string(),
        entries: entries.iter().map(|(t, c)| TouchCredit { touchpoint_id: t.to_string(), credit: *c }).collect(),
    };
    let credits = journeys
        .iter()
        .map(|j| {
            let lta = LastTouch.credits(j).unwrap();
            let mda = match j.customer_id.as_str() {
                "c2" => vector("cv-c2", &[("u2", 0.3), ("l2", 0.7)]),
                _ => lta.clone(),
            };
            BTreeMap::from([("lta".to_string(), lta), ("mda".to_string(), mda)])
        })
        .collect();
    (journeys, credits)
}

#[test]
fn calibrated_blend_of_the_two_customer_example() {
    let (journeys, credits) = two_channel_fixture();
    let model = CalibrationModel::from_weights(&[("lta", 0.6), ("mda", 0.4)]);
    let c2 = score_touchpoints(&model, &journeys[1], &credits[1]).unwrap();
    assert!((c2[0].credit - 0.12).abs() < 1e-9);
    assert!((c2[1].credit - 0.88).abs() < 1e-9);

    let share = |weights: &[(&str, f64)]| {
        let m = CalibrationModel::from_weights(weights);
        let all: Vec<MtaCredit> =
            journeys.iter().zip(&credits).flat_map(|(j, c)| score_touchpoints(&m, j, c).unwrap()).collect();
        aggregate_shares(&all, ReportDimension::Channel).share_of("Upper").unwrap()
    };
    let (lta, mda, mta) = (share(&[("lta", 1.0)]), share(&[("mda", 1.0)]), share(&[("lta", 0.6), ("mda", 0.4)]));
    assert!((lta - 1.0 / 3.0).abs() < 1e-12);
    assert!((mda - 1.3 / 3.0).abs() < 1e-12);
    assert!((mta - 1.12 / 3.0).abs() < 1e-12);
    assert!((lta - mda).abs() > 1e-6 && (lta - mta).abs() > 1e-6 && (mda - mta).abs() > 1e-6);
}

#[test]
fn mismatched_credit_vectors_are_rejected() {
    let (journeys, credits) = two_channel_fixture();
    let model = CalibrationModel::from_weights(&[("lta", 1.0)]);
    assert!(score_touchpoints(&model, &journeys[0], &credits[1]).is_err());
}

#[test]
fn credit_tables_round_trip() {
    let journeys = random_journeys(9, 10);
    let credits = scored(&CalibrationModel::from_weights(&[("lta", 0.37), ("linear", 1.1)]), &journeys);
    for format in [LogFormat::Jsonl, LogFormat::Csv] {
        let mut buf = Vec::new();
        write_credits(&mut buf, &credits, format).unwrap();
        assert_eq!(read_credits(buf.as_slice(), format).unwrap(), credits);
    }
}
