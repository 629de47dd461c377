//! Seeded synthetic series for tests, benchmarks and fixtures.

use std::f64::consts::PI;

use chrono::{Datelike, NaiveDateTime, TimeDelta, Timelike};
use rand_distr::{Distribution, Normal};

use crate::dataio::{CovariateSchema, Covariates, EncodedCovariates, SeriesDataset};
use crate::numcore::rng_for;

const START: &str = "2021-01-04T00:00:00"; // a Monday

fn hourly(n: usize) -> Vec<NaiveDateTime> {
    let t0 = NaiveDateTime::parse_from_str(START, "%Y-%m-%dT%H:%M:%S").expect("valid start");
    (0..n).map(|i| t0 + TimeDelta::hours(i as i64)).collect()
}

fn names(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}{i}")).collect()
}

/// Noiseless sines of the given period; channel `k` is phase-shifted and
/// scaled so channels differ.
pub fn sinusoid(n: usize, period: usize, channels: usize) -> SeriesDataset {
    let values = (0..n)
        .flat_map(|t| (0..channels).map(move |k| (1.0 + 0.5 * k as f64) * (2.0 * PI * t as f64 / period as f64 + 0.7 * k as f64).sin()))
        .collect();
    SeriesDataset::new(hourly(n), names("y", channels), values).expect("synthetic sinusoid is valid")
}

/// i.i.d. Gaussian numeric covariates with a single target equal to a fixed
/// weighted sum of them, so the future covariates determine the future target.
pub fn covariate_driven(n: usize, fields: usize, seed: u64) -> SeriesDataset {
    let mut rng = rng_for(seed, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let numeric: Vec<f64> = (0..n * fields).map(|_| normal.sample(&mut rng)).collect();
    let values = numeric.chunks(fields).map(|row| row.iter().enumerate().map(|(j, v)| v / (j + 1) as f64).sum()).collect();
    with_numeric(n, fields, numeric, values)
}

/// Same covariate process as [`covariate_driven`] but with an independent
/// target, so no pairing information exists.
pub fn decorrelated(n: usize, fields: usize, seed: u64) -> SeriesDataset {
    let mut rng = rng_for(seed, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let numeric: Vec<f64> = (0..n * fields).map(|_| normal.sample(&mut rng)).collect();
    let mut target_rng = rng_for(seed, 1);
    let values = (0..n).map(|_| normal.sample(&mut target_rng)).collect();
    with_numeric(n, fields, numeric, values)
}

fn with_numeric(n: usize, fields: usize, numeric: Vec<f64>, values: Vec<f64>) -> SeriesDataset {
    let ds = SeriesDataset::new(hourly(n), vec!["y".into()], values).expect("synthetic series is valid");
    let encoded = EncodedCovariates { rows: n, codes: Vec::new(), numeric, c_t: 0, c_n: fields };
    let cov = Covariates::new(CovariateSchema::numeric_only(names("u", fields)), encoded, false).expect("numeric covariates");
    ds.attach_covariates(cov).expect("aligned covariates")
}

/// Amplitude per weekday, Monday first.
pub const WEEKDAY_AMPLITUDES: [f64; 7] = [1.0, 0.3, 1.6, 0.6, 1.3, 0.2, 0.9];

const WEEKDAYS: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];

/// Hourly series `A(weekday) · sin(2π·hour/24)` plus Gaussian noise, carrying
/// a categorical weekday covariate and a numeric hour-of-day covariate.
pub fn weekday_amplitude(days: usize, noise: f64, seed: u64) -> SeriesDataset {
    let n = days * 24;
    let ts = hourly(n);
    let mut rng = rng_for(seed, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut codes = Vec::with_capacity(n);
    let mut numeric = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for t in &ts {
        let dow = t.weekday().num_days_from_monday() as usize;
        let h = t.hour() as f64;
        codes.push(dow);
        numeric.push(h / 23.0 - 0.5);
        values.push(WEEKDAY_AMPLITUDES[dow] * (2.0 * PI * h / 24.0).sin() + noise * normal.sample(&mut rng));
    }
    let schema = CovariateSchema {
        categorical: vec![("weekday".into(), WEEKDAYS.iter().map(|s| s.to_string()).collect())],
        numerical: vec!["hour".into()],
    };
    let ds = SeriesDataset::new(ts, vec!["load".into()], values).expect("synthetic series is valid");
    let encoded = EncodedCovariates { rows: n, codes, numeric, c_t: 1, c_n: 1 };
    let cov = Covariates::new(schema, encoded, true).expect("weekday covariates");
    ds.attach_covariates(cov).expect("aligned covariates")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_is_periodic() {
        let ds = sinusoid(100, 24, 2);
        for t in 0..76 {
            for c in 0..2 {
                assert!((ds.value(t, c) - ds.value(t + 24, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn driven_target_is_function_of_covariates() {
        let ds = covariate_driven(50, 3, 1);
        let cov = ds.covariates().unwrap();
        for r in 0..50 {
            let expect: f64 = (0..3).map(|j| cov.numeric_raw(r, j) / (j + 1) as f64).sum();
            assert!((ds.value(r, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn weekday_series_layout() {
        let ds = weekday_amplitude(14, 0.0, 0);
        assert_eq!(ds.len(), 336);
        let cov = ds.covariates().unwrap();
        assert_eq!(cov.c_f(), 2);
        assert_eq!(cov.code(0, 0), 0);
        assert_eq!(cov.code(24 * 2 + 5, 0), 2);
        let peak = ds.value(24 * 2 + 6, 0);
        assert!((peak - WEEKDAY_AMPLITUDES[2]).abs() < 1e-12);
    }
}
