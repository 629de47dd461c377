use std::ops::Range;
use std::path::Path;

use chrono::NaiveDateTime;
use serde_json::Value;

use super::dataset::{csv_err, open_csv, parse_timestamp, ChannelStats};
use super::DataError;
use crate::numcore::Tensor;

/// Field layout of a future-covariate table. Categorical fields come first in
/// every encoded row, followed by numerical ones.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CovariateSchema {
    pub categorical: Vec<(String, Vec<String>)>,
    pub numerical: Vec<String>,
}

impl CovariateSchema {
    pub fn numeric_only(names: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { categorical: Vec::new(), numerical: names.into_iter().map(Into::into).collect() }
    }

    /// Parses `{"categorical": {name: [values...]}, "numerical": [names...]}`,
    /// keeping the document's field order.
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let v: Value = serde_json::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| DataError::Schema("schema must be a JSON object".into()))?;
        let mut schema = Self::default();
        if let Some(cat) = obj.get("categorical") {
            let cat = cat.as_object().ok_or_else(|| DataError::Schema("`categorical` must be an object".into()))?;
            for (name, vocab) in cat {
                let vocab = vocab
                    .as_array()
                    .ok_or_else(|| DataError::Schema(format!("vocabulary of {name} must be an array")))?
                    .iter()
                    .map(|x| match x {
                        Value::String(s) => Ok(s.clone()),
                        Value::Number(n) => Ok(n.to_string()),
                        Value::Bool(b) => Ok(b.to_string()),
                        _ => Err(DataError::Schema(format!("vocabulary of {name} holds a non-scalar"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if vocab.is_empty() {
                    return Err(DataError::Schema(format!("vocabulary of {name} is empty")));
                }
                schema.categorical.push((name.clone(), vocab));
            }
        }
        if let Some(num) = obj.get("numerical") {
            let num = num.as_array().ok_or_else(|| DataError::Schema("`numerical` must be an array".into()))?;
            for n in num {
                let n = n.as_str().ok_or_else(|| DataError::Schema("numerical names must be strings".into()))?;
                schema.numerical.push(n.to_string());
            }
        }
        let mut names: Vec<&str> = schema.field_names().collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Schema("duplicate field name".into()));
        }
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let cat: serde_json::Map<String, Value> =
            self.categorical.iter().map(|(n, v)| (n.clone(), Value::from(v.clone()))).collect();
        serde_json::json!({ "categorical": cat, "numerical": self.numerical }).to_string()
    }

    /// Number of categorical fields.
    pub fn c_t(&self) -> usize {
        self.categorical.len()
    }

    /// Number of numerical fields.
    pub fn c_n(&self) -> usize {
        self.numerical.len()
    }

    /// Encoded row width.
    pub fn c_f(&self) -> usize {
        self.c_t() + self.c_n()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.categorical.iter().map(|(_, v)| v.len()).collect()
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.categorical.iter().map(|(n, _)| n.as_str()).chain(self.numerical.iter().map(String::as_str))
    }

    /// Dense code of `value` in categorical field `field`.
    pub fn code(&self, field: usize, value: &str) -> Result<usize, DataError> {
        let (name, vocab) = &self.categorical[field];
        vocab.iter().position(|v| v == value).ok_or_else(|| DataError::UnknownCategory { field: name.clone(), value: value.to_string() })
    }
}

/// Covariate rows split into categorical codes and numeric values.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCovariates {
    pub rows: usize,
    /// rows × c_t
    pub codes: Vec<usize>,
    /// rows × c_n
    pub numeric: Vec<f64>,
    pub c_t: usize,
    pub c_n: usize,
}

impl EncodedCovariates {
    /// `rows × c_f` tensor: codes (as floats) first, then numeric columns.
    pub fn to_tensor(&self) -> Tensor {
        let c_f = self.c_t + self.c_n;
        Tensor::from_fn(&[self.rows, c_f], |i| {
            let (r, j) = (i / c_f, i % c_f);
            if j < self.c_t {
                self.codes[r * self.c_t + j] as f64
            } else {
                self.numeric[r * self.c_n + j - self.c_t]
            }
        })
    }
}

/// Encodes raw string rows whose columns are named by `header`. Numeric
/// fields are z-scored with `stats` when given.
pub fn encode_covariates(
    header: &[String],
    rows: &[Vec<String>],
    schema: &CovariateSchema,
    stats: Option<&[ChannelStats]>,
) -> Result<EncodedCovariates, DataError> {
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| DataError::Schema(format!("column {name} missing from covariates")))
    };
    let cat_cols = schema.categorical.iter().map(|(n, _)| col(n)).collect::<Result<Vec<_>, _>>()?;
    let num_cols = schema.numerical.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>()?;
    if let Some(s) = stats {
        if s.len() != num_cols.len() {
            return Err(DataError::Schema(format!("{} numeric stats for {} fields", s.len(), num_cols.len())));
        }
    }
    let mut codes = Vec::with_capacity(rows.len() * cat_cols.len());
    let mut numeric = Vec::with_capacity(rows.len() * num_cols.len());
    for (r, row) in rows.iter().enumerate() {
        for (f, &c) in cat_cols.iter().enumerate() {
            codes.push(schema.code(f, row[c].trim())?);
        }
        for (f, &c) in num_cols.iter().enumerate() {
            let raw = row[c].trim();
            let v: f64 = raw.parse().map_err(|_| DataError::Parse {
                path: "<covariates>".into(),
                line: r + 2,
                msg: format!("bad number {raw:?} in {}", schema.numerical[f]),
            })?;
            numeric.push(match stats {
                Some(s) => s[f].scale(v),
                None => v,
            });
        }
    }
    Ok(EncodedCovariates { rows: rows.len(), codes, numeric, c_t: cat_cols.len(), c_n: num_cols.len() })
}

/// Future-covariate table aligned row-for-row with a series.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    schema: CovariateSchema,
    encoded: EncodedCovariates,
    stats: Vec<ChannelStats>,
    /// Already on a fixed scale (temporal features); z-scoring is skipped.
    prescaled: bool,
}

impl Covariates {
    pub fn new(schema: CovariateSchema, encoded: EncodedCovariates, prescaled: bool) -> Result<Self, DataError> {
        if encoded.c_t != schema.c_t() || encoded.c_n != schema.c_n() {
            return Err(DataError::Schema("encoded widths disagree with schema".into()));
        }
        let vocab = schema.vocab_sizes();
        for (i, &code) in encoded.codes.iter().enumerate() {
            let f = i % schema.c_t().max(1);
            if code >= vocab[f] {
                return Err(DataError::UnknownCategory { field: schema.categorical[f].0.clone(), value: code.to_string() });
            }
        }
        let stats = vec![ChannelStats::IDENTITY; schema.c_n()];
        let mut cov = Self { schema, encoded, stats, prescaled };
        let rows = cov.len();
        cov.fit_stats(0..rows);
        Ok(cov)
    }

    pub fn len(&self) -> usize {
        self.encoded.rows
    }

    pub fn is_empty(&self) -> bool {
        self.encoded.rows == 0
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn c_f(&self) -> usize {
        self.schema.c_f()
    }

    pub fn is_prescaled(&self) -> bool {
        self.prescaled
    }

    pub fn numeric_stats(&self) -> &[ChannelStats] {
        &self.stats
    }

    pub fn code(&self, row: usize, field: usize) -> usize {
        self.encoded.codes[row * self.encoded.c_t + field]
    }

    pub fn numeric_raw(&self, row: usize, field: usize) -> f64 {
        self.encoded.numeric[row * self.encoded.c_n + field]
    }

    /// Writes the encoded row (codes, then scaled numerics) into `out`.
    pub fn write_row(&self, row: usize, out: &mut [f64]) {
        let c_t = self.encoded.c_t;
        for f in 0..c_t {
            out[f] = self.code(row, f) as f64;
        }
        for f in 0..self.encoded.c_n {
            out[c_t + f] = self.stats[f].scale(self.numeric_raw(row, f));
        }
    }

    pub(crate) fn fit_stats(&mut self, range: Range<usize>) {
        if self.prescaled {
            return;
        }
        let c_n = self.encoded.c_n;
        self.stats = (0..c_n)
            .map(|f| {
                let s = ChannelStats::of(range.clone().map(|r| self.encoded.numeric[r * c_n + f]));
                // a constant covariate carries no signal but is not an error
                if s.std > 1e-12 {
                    s
                } else {
                    ChannelStats { mean: s.mean, std: 1.0 }
                }
            })
            .collect();
    }
}

pub(crate) fn read_covariates(path: &Path, schema: Option<CovariateSchema>, series_ts: &[NaiveDateTime]) -> Result<Covariates, DataError> {
    let mut rdr = open_csv(path)?;
    let header_rec = rdr.headers().map_err(|e| csv_err(path, 1, e.to_string()))?.clone();
    if header_rec.is_empty() || !header_rec[0].eq_ignore_ascii_case("date") {
        return Err(csv_err(path, 1, "expected header `date,<field>,...`"));
    }
    let header: Vec<String> = header_rec.iter().skip(1).map(str::to_string).collect();
    let schema = schema.unwrap_or_else(|| CovariateSchema::numeric_only(header.iter().cloned()));
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, line, e.to_string()))?;
        if rec.len() != header_rec.len() {
            return Err(csv_err(path, line, format!("expected {} fields, found {}", header_rec.len(), rec.len())));
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| csv_err(path, line, format!("bad timestamp {:?}", &rec[0])))?;
        match series_ts.get(i) {
            Some(&expected) if expected == ts => {}
            Some(&expected) => {
                return Err(DataError::Alignment(format!("covariate row {line} at {ts} but series row is {expected}")));
            }
            None => return Err(DataError::Alignment(format!("covariate file has more rows than the series ({line})"))),
        }
        rows.push(rec.iter().skip(1).map(str::to_string).collect::<Vec<_>>());
    }
    if rows.len() != series_ts.len() {
        return Err(DataError::Alignment(format!("{} covariate rows for {} series rows", rows.len(), series_ts.len())));
    }
    let encoded = encode_covariates(&header, &rows, &schema, None).map_err(|e| match e {
        DataError::Parse { line, msg, .. } => DataError::Parse { path: path.display().to_string(), line, msg },
        other => other,
    })?;
    Covariates::new(schema, encoded, false)
}
