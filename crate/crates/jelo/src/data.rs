//! Longitudinal dataset: subjects on irregular time grids with one marker
//! series, one outcome series, and baseline covariates.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// One visit row as read from CSV, before any transformation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub subject_id: String,
    pub time: f64,
    pub marker: f64,
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

/// Per-subject view of the data after grouping and sorting by time.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub marker: Vec<f64>,
    pub outcome: Vec<f64>,
    /// Baseline covariates, aligned with `LongitudinalDataset::covariate_names`.
    pub covariates: Vec<f64>,
}

impl Subject {
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

/// Subjects with irregular time grids, marker values, outcome values and
/// baseline covariates. Subjects are kept sorted by id so all derived
/// parameter layouts are stable.
#[derive(Debug, Clone, Default)]
pub struct LongitudinalDataset {
    pub subjects: Vec<Subject>,
    pub covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Groups rows by subject, sorts visits by time, and sorts subjects by id.
    /// Baseline covariates are taken from each subject's first visit.
    pub fn from_records(records: Vec<RawRecord>, covariate_names: Vec<String>) -> Self {
        let mut by_subject: BTreeMap<String, Vec<RawRecord>> = BTreeMap::new();
        for r in records {
            by_subject.entry(r.subject_id.clone()).or_default().push(r);
        }
        let subjects = by_subject
            .into_iter()
            .map(|(id, mut rows)| {
                rows.sort_by(|a, b| a.time.total_cmp(&b.time));
                Subject {
                    id,
                    covariates: rows[0].covariates.clone(),
                    times: rows.iter().map(|r| r.time).collect(),
                    marker: rows.iter().map(|r| r.marker).collect(),
                    outcome: rows.iter().map(|r| r.outcome).collect(),
                }
            })
            .collect();
        LongitudinalDataset { subjects, covariate_names }
    }

    /// Flattens back to one row per visit, in subject then time order.
    pub fn to_records(&self) -> Vec<RawRecord> {
        let mut out = Vec::with_capacity(self.n_obs());
        for s in &self.subjects {
            for j in 0..s.n_obs() {
                out.push(RawRecord {
                    subject_id: s.id.clone(),
                    time: s.times[j],
                    marker: s.marker[j],
                    outcome: s.outcome[j],
                    covariates: s.covariates.clone(),
                });
            }
        }
        out
    }

    /// Schema checks required before model fitting: at least two visits per
    /// subject and finite values everywhere.
    pub fn check_fit_schema(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::Schema("dataset has no subjects".into()));
        }
        for s in &self.subjects {
            if s.n_obs() < 2 {
                return Err(Error::Schema(format!(
                    "subject {} has {} visit(s); a minimum of 2 is required",
                    s.id,
                    s.n_obs()
                )));
            }
            for j in 0..s.n_obs() {
                if !s.times[j].is_finite() || !s.marker[j].is_finite() || !s.outcome[j].is_finite()
                {
                    return Err(Error::Schema(format!(
                        "subject {} has a non-finite value at visit {}",
                        s.id, j
                    )));
                }
            }
            if s.covariates.iter().any(|c| !c.is_finite()) {
                return Err(Error::Schema(format!(
                    "subject {} has a non-finite covariate",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

/// Counters reported by CSV ingestion: rows dropped for missing fields are
/// excluded rather than imputed.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_dropped_missing: usize,
}

const RESERVED_COLUMNS: [&str; 4] = ["subject_id", "time", "marker", "outcome"];

/// Reads a visits CSV with header `subject_id,time,marker,outcome` plus any
/// number of covariate columns. `marker_col`/`outcome_col` let the caller
/// point at alternative columns (e.g. the residual columns written by prep).
pub fn read_csv_with_columns<R: Read>(
    reader: R,
    marker_col: &str,
    outcome_col: &str,
) -> Result<(LongitudinalDataset, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(Error::Csv)?
        .iter()
        .map(|h| h.to_string())
        .collect();

    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing required column `{name}`")))
    };
    let id_idx = col("subject_id")?;
    let time_idx = col("time")?;
    let marker_idx = col(marker_col)?;
    let outcome_idx = col(outcome_col)?;

    let covariate_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| {
            !RESERVED_COLUMNS.contains(&h.as_str())
                && *i != marker_idx
                && *i != outcome_idx
                && !h.ends_with("_resid")
                && !h.ends_with("_resid_lagged")
        })
        .map(|(i, h)| (i, h.clone()))
        .collect();

    let mut report = IngestReport::default();
    let mut records = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(Error::Csv)?;
        report.rows_read += 1;
        let parse = |idx: usize| -> Option<f64> {
            let field = row.get(idx)?;
            if field.is_empty() || field.eq_ignore_ascii_case("na") {
                return None;
            }
            field.parse::<f64>().ok().filter(|v| v.is_finite())
        };
        let subject_id = row
            .get(id_idx)
            .map(|s| s.to_string())
            .filter(|s| !s.is_empty());
        let time = parse(time_idx);
        let marker = parse(marker_idx);
        let outcome = parse(outcome_idx);
        let (Some(subject_id), Some(time), Some(marker), Some(outcome)) =
            (subject_id, time, marker, outcome)
        else {
            report.rows_dropped_missing += 1;
            continue;
        };
        let mut covariates = Vec::with_capacity(covariate_cols.len());
        for (idx, name) in &covariate_cols {
            match parse(*idx) {
                Some(v) => covariates.push(v),
                None => {
                    return Err(Error::Schema(format!(
                        "missing covariate `{name}` on data row {}",
                        line + 2
                    )))
                }
            }
        }
        records.push(RawRecord { subject_id, time, marker, outcome, covariates });
    }

    let names = covariate_cols.into_iter().map(|(_, n)| n).collect();
    Ok((LongitudinalDataset::from_records(records, names), report))
}

pub fn read_csv_path(
    path: &Path,
    marker_col: &str,
    outcome_col: &str,
) -> Result<(LongitudinalDataset, IngestReport)> {
    let file = std::fs::File::open(path)?;
    read_csv_with_columns(file, marker_col, outcome_col)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_bytes(s: &str) -> &[u8] {
        s.as_bytes()
    }

    #[test]
    fn reads_and_groups_by_subject() {
        let data = "subject_id,time,marker,outcome,bmi\n\
                    b,1.0,2.0,3.0,25.0\n\
                    a,0.0,1.0,2.0,22.0\n\
                    a,2.0,1.5,2.5,22.0\n";
        let (ds, report) = read_csv_with_columns(csv_bytes(data), "marker", "outcome").unwrap();
        assert_eq!(report.rows_read, 3);
        assert_eq!(report.rows_dropped_missing, 0);
        assert_eq!(ds.n_subjects(), 2);
        assert_eq!(ds.subjects[0].id, "a");
        assert_eq!(ds.subjects[0].times, vec![0.0, 2.0]);
        assert_eq!(ds.covariate_names, vec!["bmi".to_string()]);
        assert_eq!(ds.subjects[1].covariates, vec![25.0]);
    }

    #[test]
    fn drops_rows_with_missing_values() {
        let data = "subject_id,time,marker,outcome\n\
                    a,0.0,1.0,2.0\n\
                    a,1.0,,2.0\n\
                    a,2.0,1.5,NA\n";
        let (ds, report) = read_csv_with_columns(csv_bytes(data), "marker", "outcome").unwrap();
        assert_eq!(report.rows_dropped_missing, 2);
        assert_eq!(ds.n_obs(), 1);
    }

    #[test]
    fn fit_schema_rejects_single_visit_subject() {
        let data = "subject_id,time,marker,outcome\n\
                    solo,0.0,1.0,2.0\n\
                    pair,0.0,1.0,2.0\n\
                    pair,1.0,1.0,2.0\n";
        let (ds, _) = read_csv_with_columns(csv_bytes(data), "marker", "outcome").unwrap();
        let err = ds.check_fit_schema().unwrap_err();
        assert!(err.to_string().contains("solo"), "error should name the subject: {err}");
    }

    #[test]
    fn missing_required_column_is_schema_error() {
        let data = "subject_id,time,marker\na,0.0,1.0\n";
        let err = read_csv_with_columns(csv_bytes(data), "marker", "outcome").unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }
}
