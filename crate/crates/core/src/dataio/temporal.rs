use chrono::{Datelike, NaiveDateTime, Timelike};

use super::covariates::{CovariateSchema, Covariates, EncodedCovariates};
use super::{DataError, SeriesDataset};

/// Names of the implicit calendar covariates, in encoding order.
pub const TEMPORAL_FIELDS: [&str; 4] = ["hour_of_day", "day_of_week", "day_of_month", "month_of_year"];

/// Calendar features of one timestamp, each mapped affinely onto [-0.5, 0.5].
/// Day of week counts from Monday = 0.
pub fn temporal_features(ts: NaiveDateTime) -> [f64; 4] {
    [
        ts.hour() as f64 / 23.0 - 0.5,
        ts.weekday().num_days_from_monday() as f64 / 6.0 - 0.5,
        (ts.day() as f64 - 1.0) / 30.0 - 0.5,
        (ts.month() as f64 - 1.0) / 11.0 - 0.5,
    ]
}

/// Adds the four calendar features as numeric covariates for datasets that
/// carry none.
pub fn augment_temporal_features(ds: &SeriesDataset) -> Result<SeriesDataset, DataError> {
    if ds.covariates().is_some() {
        return Err(DataError::CovariatesPresent);
    }
    let numeric: Vec<f64> = ds.timestamps().iter().flat_map(|&t| temporal_features(t)).collect();
    let encoded = EncodedCovariates { rows: ds.len(), codes: Vec::new(), numeric, c_t: 0, c_n: 4 };
    let cov = Covariates::new(CovariateSchema::numeric_only(TEMPORAL_FIELDS), encoded, true)?;
    ds.clone().attach_covariates(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::parse_timestamp;
    use proptest::prelude::*;

    #[test]
    fn new_year_2021() {
        let f = temporal_features(parse_timestamp("2021-01-01T00:00").unwrap());
        assert_eq!(f, [-0.5, 4.0 / 6.0 - 0.5, -0.5, -0.5]);
    }

    #[test]
    fn end_of_year_endpoints() {
        let f = temporal_features(parse_timestamp("2021-12-31T23:00").unwrap());
        assert_eq!(f[0], 0.5);
        assert_eq!(f[3], 0.5);
        assert_eq!(f[2], 0.5);
    }

    proptest! {
        #[test]
        fn bounded_and_weekly_periodic(secs in 0i64..2_000_000_000) {
            let t = chrono::DateTime::from_timestamp(secs, 0).unwrap().naive_utc();
            let f = temporal_features(t);
            prop_assert!(f.iter().all(|v| (-0.5..=0.5).contains(v)));
            let week_later = temporal_features(t + chrono::TimeDelta::weeks(1));
            prop_assert_eq!(f[1], week_later[1]);
            prop_assert_eq!(f[0], week_later[0]);
            let day_later = temporal_features(t + chrono::TimeDelta::days(1));
            prop_assert_eq!(f[0], day_later[0]);
        }
    }

    #[test]
    fn augment_refuses_existing_covariates() {
        let t0 = parse_timestamp("2021-01-01").unwrap();
        let ts: Vec<_> = (0..48).map(|i| t0 + chrono::TimeDelta::hours(i)).collect();
        let ds = SeriesDataset::new(ts, vec!["y".into()], (0..48).map(f64::from).collect()).unwrap();
        let aug = augment_temporal_features(&ds).unwrap();
        let cov = aug.covariates().unwrap();
        assert_eq!(cov.c_f(), 4);
        assert!(cov.is_prescaled());
        let mut row = [0.0; 4];
        cov.write_row(23, &mut row);
        assert_eq!(row[0], 0.5);
        assert!(matches!(augment_temporal_features(&aug), Err(DataError::CovariatesPresent)));
    }
}
