mod common;

use std::collections::HashSet;
use std::io::Write;

use chrono::{Datelike, NaiveDate, NaiveTime};
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

use common::oracles::{yeo_johnson_ref, yj_lambda_ref};
use tartekit::embed::*;

fn embedder() -> StringEmbedder {
    StringEmbedder::hashed(DEFAULT_DIM, NgramHasher::default()).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Character n-grams (3..=6) of the bracketed word, counted by hand.
fn grams(word: &str) -> HashSet<String> {
    let w: Vec<char> = format!("<{word}>").chars().collect();
    let mut out = HashSet::new();
    for n in 3..=6 {
        for win in w.windows(n) {
            out.insert(win.iter().collect());
        }
    }
    out
}

#[test]
fn string_examples() {
    let e = embedder();
    let empty = e.embed("");
    assert!(empty.missing && empty.vector.iter().all(|&v| v == 0.0));
    assert_eq!(e.embed("harbour").vector, e.embed("harbour").vector);

    let shared = |a: &str, b: &str| grams(a).intersection(&grams(b)).count();
    assert!(shared("paris", "parisian") > shared("paris", "xqzwv"));
    let (p, pn, x) = (e.embed("paris").vector, e.embed("parisian").vector, e.embed("xqzwv").vector);
    assert!(cosine(&p, &pn) > cosine(&p, &x));
}

#[test]
fn lookup_file_hits_are_verbatim() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "#dim 3").unwrap();
    writeln!(f, "paris\t0.5 -2 3.25").unwrap();
    writeln!(f, "rome\t1 1 1").unwrap();
    let e = StringEmbedder::from_lookup_file(f.path(), NgramHasher::default()).unwrap();
    assert_eq!(e.dim(), 3);
    assert_eq!(e.vocabulary_size(), 2);
    assert_eq!(e.embed("paris").vector, vec![0.5, -2.0, 3.25]);
    let miss = e.embed("madrid").vector;
    assert!((miss.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn fractional_year_examples() {
    assert_eq!(DatetimeValue::from_ymd(2000, 1, 1).unwrap().fractional_year(), 2000.0);
    let mid = DatetimeValue::from_ymd(2000, 7, 2).unwrap().fractional_year();
    assert!((mid - (2000.0 + 183.0 / 366.0)).abs() < 1e-12);
    let end = DatetimeValue::from_ymd(1999, 12, 31).unwrap().fractional_year();
    assert!((end - (1999.0 + 364.0 / 365.0)).abs() < 1e-12);
    let noon = DatetimeValue::from_ymd(2001, 1, 1)
        .unwrap()
        .with_time(NaiveTime::from_hms_opt(12, 0, 0).unwrap())
        .fractional_year();
    assert!((noon - (2001.0 + 0.5 / 365.0)).abs() < 1e-12);
    assert!(DatetimeValue::from_ymd(1999, 2, 29).is_err());
    assert!(DatetimeValue::from_ymd(2000, 2, 29).is_ok());
}

#[test]
fn fit_examples() {
    let mut r = common::rng(42);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let std_normal: Vec<f64> = (0..1000).map(|_| normal.sample(&mut r)).collect();
    let t = fit_power_transform(&std_normal, "x").unwrap();
    assert!((0.8..=1.2).contains(&t.lambda), "{}", t.lambda);
    assert!((t.lambda - yj_lambda_ref(&std_normal)).abs() < 1e-3);

    // log-normal values well above 1, where Yeo–Johnson behaves like a log
    let shifted = Normal::<f64>::new(5.0, 1.0).unwrap();
    let lognormal: Vec<f64> = (0..1000).map(|_| shifted.sample(&mut r).exp()).collect();
    let t = fit_power_transform(&lognormal, "y").unwrap();
    assert!(t.lambda.abs() < 0.3, "{}", t.lambda);
    assert!((t.lambda - yj_lambda_ref(&lognormal)).abs() < 1e-3);

    let t = fit_power_transform(&[0.0, 1.0], "z").unwrap();
    assert!(t.lambda.is_finite() && t.std > 0.0);
    assert!(fit_power_transform(&[2.0, 2.0, 2.0], "w").is_err());
    assert_eq!(PowerTransform::fit_or_identity(&[2.0, 2.0], "w").apply(7.5), 7.5);
}

#[test]
fn apply_examples() {
    let with = |lambda: f64| PowerTransform {
        relation: "r".into(),
        lambda,
        mean: 0.0,
        std: 1.0,
    };
    for x in [-3.0, -0.5, 0.0, 2.0, 40.0] {
        assert!((with(1.0).apply(x) - x).abs() < 1e-12);
    }
    assert!((with(0.0).apply(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-12);
    assert!((with(2.0).apply(-1.0) + std::f64::consts::LN_2).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn transform_is_strictly_increasing(lambda in -5.0f64..5.0, a in -50.0f64..50.0, gap in 1e-6f64..10.0) {
        prop_assert!(yeo_johnson(a, lambda) < yeo_johnson(a + gap, lambda));
    }

    #[test]
    fn transform_matches_reference(lambda in -5.0f64..5.0, x in -20.0f64..20.0) {
        let r = yeo_johnson_ref(x, lambda);
        prop_assert!((yeo_johnson(x, lambda) - r).abs() <= 1e-10 * r.abs().max(1.0));
    }

    #[test]
    fn inverse_round_trips(lambda in -3.0f64..3.0, x in -20.0f64..20.0) {
        prop_assert!((yeo_johnson_inverse(yeo_johnson(x, lambda), lambda) - x).abs() <= 1e-9);
    }

    #[test]
    fn standardized_round_trip(seed in any::<u64>(), x in -10.0f64..100.0) {
        let mut r = common::rng(seed);
        let n = Normal::<f64>::new(2.0, 1.5).unwrap();
        let values: Vec<f64> = (0..50).map(|_| n.sample(&mut r).exp()).collect();
        let t = fit_power_transform(&values, "r").unwrap();
        prop_assert!(t.std > 0.0);
        prop_assert!((t.invert(t.apply(x)) - x).abs() <= 1e-9 * x.abs().max(1.0));
    }

    #[test]
    fn fallback_vectors_are_unit(s in "[a-z]{1,12}( [a-z]{1,8}){0,3}") {
        let v = embedder().embed(&s);
        prop_assert!(!v.missing);
        prop_assert!((v.vector.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fractional_year_stays_in_its_year(days in 0i64..200_000, secs in 0u32..86_400) {
        let d = NaiveDate::from_ymd_opt(1800, 1, 1).unwrap() + chrono::Duration::days(days);
        let v = DatetimeValue::from_ymd(d.year(), d.month(), d.day())
            .unwrap()
            .with_time(NaiveTime::from_num_seconds_from_midnight_opt(secs, 0).unwrap());
        let f = v.fractional_year();
        prop_assert!(f >= d.year() as f64 && f < d.year() as f64 + 1.0);
    }
}
