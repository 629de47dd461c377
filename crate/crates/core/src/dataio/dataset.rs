use std::fmt;
use std::ops::Range;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};

use super::covariates::{read_covariates, CovariateSchema, Covariates};
use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats { mean: 0.0, std: 1.0 };

    /// Population mean and standard deviation.
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    pub fn scale(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn unscale(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    pub fn range(&self, kind: SplitKind) -> Range<usize> {
        match kind {
            SplitKind::Train => self.train.clone(),
            SplitKind::Val => self.val.clone(),
            SplitKind::Test => self.test.clone(),
        }
    }
}

/// A multivariate series with timestamps, optional future covariates and a
/// chronological split. Immutable once built; splitting returns a new value.
#[derive(Debug, Clone)]
pub struct SeriesDataset {
    timestamps: Vec<NaiveDateTime>,
    channels: Vec<String>,
    /// rows × channels, row-major
    values: Vec<f64>,
    covariates: Option<Covariates>,
    split: Option<Split>,
    stats: Vec<ChannelStats>,
}

impl SeriesDataset {
    /// Builds a dataset from raw columns. Timestamps must be strictly
    /// increasing with a constant step and no channel may be constant.
    pub fn new(timestamps: Vec<NaiveDateTime>, channels: Vec<String>, values: Vec<f64>) -> Result<Self, DataError> {
        let c = channels.len();
        if c == 0 {
            return Err(DataError::Schema("series needs at least one channel".into()));
        }
        if values.len() != timestamps.len() * c {
            return Err(DataError::Alignment(format!(
                "{} values for {} rows × {} channels",
                values.len(),
                timestamps.len(),
                c
            )));
        }
        check_timestamps(&timestamps)?;
        let mut ds = Self { timestamps, channels, values, covariates: None, split: None, stats: Vec::new() };
        let rows = ds.len();
        ds.stats = ds.compute_stats(0..rows)?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    /// Spacing between consecutive rows.
    pub fn step(&self) -> chrono::TimeDelta {
        if self.timestamps.len() < 2 {
            chrono::TimeDelta::zero()
        } else {
            self.timestamps[1] - self.timestamps[0]
        }
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels.len() + channel]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn covariates(&self) -> Option<&Covariates> {
        self.covariates.as_ref()
    }

    pub fn split(&self) -> Option<&Split> {
        self.split.as_ref()
    }

    /// Per-channel statistics of the train range (or the whole series before
    /// a split is set).
    pub fn channel_stats(&self) -> &[ChannelStats] {
        &self.stats
    }

    /// Z-scored value using the train statistics.
    pub fn scaled(&self, row: usize, channel: usize) -> f64 {
        self.stats[channel].scale(self.value(row, channel))
    }

    pub fn unscale(&self, channel: usize, v: f64) -> f64 {
        self.stats[channel].unscale(v)
    }

    pub(crate) fn with_covariates(mut self, cov: Covariates) -> Result<Self, DataError> {
        if cov.len() != self.len() {
            return Err(DataError::Alignment(format!("{} covariate rows for {} series rows", cov.len(), self.len())));
        }
        let mut cov = cov;
        if let Some(split) = &self.split {
            cov.fit_stats(split.train.clone());
        } else {
            cov.fit_stats(0..self.len());
        }
        self.covariates = Some(cov);
        Ok(self)
    }

    /// Attaches covariates that were built in memory.
    pub fn attach_covariates(self, cov: Covariates) -> Result<Self, DataError> {
        if self.covariates.is_some() {
            return Err(DataError::CovariatesPresent);
        }
        self.with_covariates(cov)
    }

    /// Chronological split at `floor(rows·a)` and `floor(rows·(a+b))` after
    /// normalizing the ratio. Every range must hold at least `min_len` rows.
    /// Channel and covariate statistics are refit on the train range.
    pub fn split_by_ratio(&self, ratio: [f64; 3], min_len: usize) -> Result<Self, DataError> {
        let total: f64 = ratio.iter().sum();
        if ratio.iter().any(|r| !r.is_finite() || *r < 0.0) || total <= 0.0 {
            return Err(DataError::Schema(format!("invalid split ratio {ratio:?}")));
        }
        let rows = self.len();
        // tolerance absorbs representation error in e.g. 0.6 * 17420
        let cut = |frac: f64| ((rows as f64 * frac / total) + 1e-9).floor() as usize;
        let a = cut(ratio[0]).min(rows);
        let b = cut(ratio[0] + ratio[1]).clamp(a, rows);
        let split = Split { train: 0..a, val: a..b, test: b..rows };
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            let r = split.range(kind);
            if r.len() < min_len.max(1) {
                let kind = match kind {
                    SplitKind::Train => "train",
                    SplitKind::Val => "val",
                    SplitKind::Test => "test",
                };
                return Err(DataError::RangeTooSmall { kind, len: r.len(), needed: min_len.max(1) });
            }
        }
        let mut out = self.clone();
        out.stats = out.compute_stats(split.train.clone())?;
        if let Some(cov) = out.covariates.as_mut() {
            cov.fit_stats(split.train.clone());
        }
        out.split = Some(split);
        Ok(out)
    }

    fn compute_stats(&self, range: Range<usize>) -> Result<Vec<ChannelStats>, DataError> {
        let c = self.channels.len();
        (0..c)
            .map(|ch| {
                let stats = ChannelStats::of(range.clone().map(|r| self.values[r * c + ch]));
                if !(stats.std > 1e-12) {
                    return Err(DataError::ConstantChannel(self.channels[ch].clone()));
                }
                Ok(stats)
            })
            .collect()
    }
}

fn check_timestamps(ts: &[NaiveDateTime]) -> Result<(), DataError> {
    if ts.len() < 2 {
        return Ok(());
    }
    let step = ts[1] - ts[0];
    if step <= chrono::TimeDelta::zero() {
        return Err(DataError::Alignment(format!("timestamps not strictly increasing at row 1 ({} → {})", ts[0], ts[1])));
    }
    for (i, w) in ts.windows(2).enumerate() {
        let d = w[1] - w[0];
        if d <= chrono::TimeDelta::zero() {
            return Err(DataError::Alignment(format!("timestamps not strictly increasing at row {}", i + 1)));
        }
        if d != step {
            return Err(DataError::Alignment(format!("irregular step at row {}: {} vs {}", i + 1, d, step)));
        }
    }
    Ok(())
}

/// Parses ISO-8601 style timestamps with either `T` or a space separator;
/// a bare date means midnight.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    const FORMATS: [&str; 6] =
        ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| chrono::DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_utc()))
        .or_else(|| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)))
}

pub(crate) fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

pub(crate) fn csv_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

/// Reads a `date,<ch1>,...` series file, plus an optional row-aligned
/// covariate file and its schema.
pub fn load_csv_dataset(path: &Path, covariate_path: Option<&Path>, schema_path: Option<&Path>) -> Result<SeriesDataset, DataError> {
    let mut rdr = open_csv(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, 1, e.to_string()))?.clone();
    if header.len() < 2 || !header[0].eq_ignore_ascii_case("date") {
        return Err(csv_err(path, 1, "expected header `date,<channel>,...`"));
    }
    let channels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, line, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(csv_err(path, line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| csv_err(path, line, format!("bad timestamp {:?}", &rec[0])))?;
        timestamps.push(ts);
        for field in rec.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| csv_err(path, line, format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(path, line, format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
    }
    let ds = SeriesDataset::new(timestamps, channels, values)?;
    match covariate_path {
        None => Ok(ds),
        Some(cp) => {
            let schema = match schema_path {
                Some(sp) => Some(CovariateSchema::load(sp)?),
                None => None,
            };
            let cov = read_covariates(cp, schema, ds.timestamps())?;
            ds.with_covariates(cov)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) fn hourly(n: usize) -> Vec<NaiveDateTime> {
        let t0 = parse_timestamp("2021-01-01 00:00:00").unwrap();
        (0..n).map(|i| t0 + chrono::TimeDelta::hours(i as i64)).collect()
    }

    fn ramp(n: usize) -> SeriesDataset {
        let values = (0..n).map(|i| i as f64).collect();
        SeriesDataset::new(hourly(n), vec!["y".into()], values).unwrap()
    }

    #[test]
    fn timestamp_formats() {
        let a = parse_timestamp("2016-07-01 00:00:00").unwrap();
        assert_eq!(parse_timestamp("2016-07-01T00:00:00"), Some(a));
        assert_eq!(parse_timestamp("2016-07-01"), Some(a));
        assert_eq!(parse_timestamp("2016-07-01T00:00:00Z"), Some(a));
        assert_eq!(parse_timestamp("2016-07-01 00:00"), Some(a));
        assert!(parse_timestamp("07/01/2016").is_none());
    }

    #[test]
    fn split_six_two_two() {
        let ds = ramp(100).split_by_ratio([6.0, 2.0, 2.0], 1).unwrap();
        let s = ds.split().unwrap();
        assert_eq!((s.train.clone(), s.val.clone(), s.test.clone()), (0..60, 60..80, 80..100));
    }

    #[test]
    fn split_etth1_size() {
        let ds = ramp(17420).split_by_ratio([6.0, 2.0, 2.0], 816).unwrap();
        assert_eq!(ds.split().unwrap().train, 0..10452);
        let ds = ramp(17420).split_by_ratio([0.6, 0.2, 0.2], 816).unwrap();
        assert_eq!(ds.split().unwrap().train, 0..10452);
    }

    #[test]
    fn split_too_small() {
        let err = ramp(10).split_by_ratio([7.0, 1.0, 2.0], 96).unwrap_err();
        assert!(matches!(err, DataError::RangeTooSmall { .. }));
    }

    #[test]
    fn stats_ignore_test_rows() {
        let base = ramp(100).split_by_ratio([6.0, 2.0, 2.0], 1).unwrap();
        let mut values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        for v in &mut values[80..] {
            *v *= -1000.0;
        }
        let perturbed = SeriesDataset::new(hourly(100), vec!["y".into()], values).unwrap().split_by_ratio([6.0, 2.0, 2.0], 1).unwrap();
        assert_eq!(base.channel_stats(), perturbed.channel_stats());
    }

    #[test]
    fn duplicate_timestamps_rejected() {
        let t = hourly(1)[0];
        let err = SeriesDataset::new(vec![t, t], vec!["y".into()], vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, DataError::Alignment(_)));
    }

    #[test]
    fn load_rejects_constant_column() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "date,a,b,c").unwrap();
        for i in 0..5 {
            writeln!(f, "2021-01-01 0{i}:00:00,{},{},3.0", i, i * 2).unwrap();
        }
        let err = load_csv_dataset(f.path(), None, None).unwrap_err();
        assert!(matches!(err, DataError::ConstantChannel(ref c) if c == "c"));
    }

    #[test]
    fn load_rejects_equal_timestamps() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "date,a").unwrap();
        writeln!(f, "2021-01-01 00:00:00,1").unwrap();
        writeln!(f, "2021-01-01 00:00:00,2").unwrap();
        assert!(matches!(load_csv_dataset(f.path(), None, None), Err(DataError::Alignment(_))));
    }

    #[test]
    fn load_reports_malformed_row() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "date,a").unwrap();
        writeln!(f, "2021-01-01 00:00:00,1").unwrap();
        writeln!(f, "2021-01-01 01:00:00,abc").unwrap();
        match load_csv_dataset(f.path(), None, None) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
