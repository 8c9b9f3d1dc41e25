use std::collections::HashSet;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One subject: follow-up time, event indicator, exposure and covariates.
///
/// `z` holds covariates with a common exposure effect across clusters
/// (instrument-like), `v` holds covariates whose exposure effect varies by
/// cluster. `true_cluster` is simulation truth and is never read by the
/// clustered estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord<F> {
    pub id: i64,
    pub time: F,
    /// 1 = event observed, 0 = censored.
    pub event: u8,
    pub exposure: F,
    pub z: Vec<F>,
    pub v: Vec<F>,
    pub true_cluster: Option<u32>,
}

impl<F: Scalar> SurvivalRecord<F> {
    pub fn new(id: i64, time: F, event: u8, exposure: F, z: Vec<F>, v: Vec<F>) -> Self {
        Self { id, time, event, exposure, z, v, true_cluster: None }
    }

    pub fn with_true_cluster(mut self, u: u32) -> Self {
        self.true_cluster = Some(u);
        self
    }

    #[inline]
    pub fn is_event(&self) -> bool {
        self.event == 1
    }
}

/// Validated, immutable collection of survival records in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    records: Vec<SurvivalRecord<F>>,
    dim_z: usize,
    dim_v: usize,
}

impl<F: Scalar> Dataset<F> {
    /// Checks every dataset invariant and takes ownership of the records.
    ///
    /// A dataset needs at least one record and at least one observed event.
    /// Single-subject datasets are accepted.
    pub fn validate(records: Vec<SurvivalRecord<F>>) -> Result<Self> {
        let first = records.first().ok_or(Error::Empty("record list"))?;
        let (dim_z, dim_v) = (first.z.len(), first.v.len());
        let mut ids = HashSet::with_capacity(records.len());
        let has_truth = first.true_cluster.is_some();
        for r in &records {
            if r.z.len() != dim_z || r.v.len() != dim_v {
                return Err(Error::DimensionMismatch(format!(
                    "record {} has dim_z={}, dim_v={}; expected {}, {}",
                    r.id,
                    r.z.len(),
                    r.v.len(),
                    dim_z,
                    dim_v
                )));
            }
            if r.true_cluster.is_some() != has_truth {
                return Err(Error::DimensionMismatch(format!(
                    "record {} disagrees on presence of true_cluster",
                    r.id
                )));
            }
            if !r.time.is_finite() {
                return Err(Error::NonFinite { id: r.id, field: "time" });
            }
            if r.time <= F::zero() {
                return Err(Error::NonpositiveTime { id: r.id, time: r.time.to_f64_lossy() });
            }
            if r.event > 1 {
                return Err(Error::InvalidEvent { id: r.id, value: r.event as f64 });
            }
            if !r.exposure.is_finite() {
                return Err(Error::NonFinite { id: r.id, field: "exposure" });
            }
            if r.z.iter().chain(&r.v).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { id: r.id, field: "covariate" });
            }
            if !ids.insert(r.id) {
                return Err(Error::DuplicateId(r.id));
            }
        }
        if !records.iter().any(SurvivalRecord::is_event) {
            return Err(Error::AllCensored);
        }
        Ok(Self { records, dim_z, dim_v })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.records.len()
    }

    #[inline]
    pub fn dim_z(&self) -> usize {
        self.dim_z
    }

    #[inline]
    pub fn dim_v(&self) -> usize {
        self.dim_v
    }

    #[inline]
    pub fn records(&self) -> &[SurvivalRecord<F>] {
        &self.records
    }

    #[inline]
    pub fn record(&self, i: usize) -> &SurvivalRecord<F> {
        &self.records[i]
    }

    pub fn times(&self) -> Vec<F> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(SurvivalRecord::is_event).collect()
    }

    pub fn exposures(&self) -> Vec<F> {
        self.records.iter().map(|r| r.exposure).collect()
    }

    pub fn event_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_event()).count()
    }

    pub fn has_true_cluster(&self) -> bool {
        self.records[0].true_cluster.is_some()
    }

    /// Simulation truth labels, if present.
    pub fn true_clusters(&self) -> Option<Vec<u32>> {
        self.records.iter().map(|r| r.true_cluster).collect()
    }

    /// Copy of the dataset with the exposure column replaced (two-stage
    /// estimators plug in first-stage predictions).
    pub fn with_exposure(&self, exposure: &[F]) -> Result<Self> {
        if exposure.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "replacement exposure has {} entries for {} records",
                exposure.len(),
                self.n()
            )));
        }
        let records = self
            .records
            .iter()
            .zip(exposure)
            .map(|(r, &a)| SurvivalRecord { exposure: a, ..r.clone() })
            .collect();
        Self::validate(records)
    }

    /// Copy with one more `v` covariate appended to every record.
    pub fn with_extra_v(&self, column: &[F]) -> Result<Self> {
        if column.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "extra column has {} entries for {} records",
                column.len(),
                self.n()
            )));
        }
        let records = self
            .records
            .iter()
            .zip(column)
            .map(|(r, &c)| {
                let mut r = r.clone();
                r.v.push(c);
                r
            })
            .collect();
        Self::validate(records)
    }

    /// Drops the simulation truth labels.
    pub fn without_truth(&self) -> Self {
        let records = self.records.iter().map(|r| SurvivalRecord { true_cluster: None, ..r.clone() }).collect();
        Self { records, ..*self }
    }
}

fn header_for(dim_z: usize, dim_v: usize, truth: bool) -> Vec<String> {
    let mut h: Vec<String> = ["id", "time", "event", "exposure"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=dim_z).map(|j| format!("z{j}")));
    h.extend((1..=dim_v).map(|j| format!("v{j}")));
    if truth {
        h.push("true_cluster".into());
    }
    h
}

/// Writes `id,time,event,exposure,z1..zP,v1..vQ[,true_cluster]`.
pub fn write_dataset_csv<F: Scalar, W: Write>(ds: &Dataset<F>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let truth = ds.has_true_cluster();
    w.write_record(header_for(ds.dim_z, ds.dim_v, truth))?;
    for r in &ds.records {
        let mut row = vec![r.id.to_string(), r.time.to_string(), r.event.to_string(), r.exposure.to_string()];
        row.extend(r.z.iter().chain(&r.v).map(|x| x.to_string()));
        if let Some(u) = r.true_cluster {
            row.push(u.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV and validates it.
pub fn read_dataset_csv<F: Scalar, R: Read>(input: R) -> Result<Dataset<F>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let bad_header = |msg: String| Error::Parse { line: 1, msg };
    if header.len() < 4 || header[..4] != ["id", "time", "event", "exposure"] {
        return Err(bad_header("header must start with id,time,event,exposure".into()));
    }
    let truth = header.last().map(String::as_str) == Some("true_cluster");
    let cov_end = if truth { header.len() - 1 } else { header.len() };
    let dim_z = header[4..cov_end].iter().take_while(|h| h.starts_with('z')).count();
    let dim_v = cov_end - 4 - dim_z;
    if header != header_for(dim_z, dim_v, truth) {
        return Err(bad_header(format!("unexpected column layout: {}", header.join(","))));
    }

    let mut records = Vec::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row_idx + 2;
        if row.len() != header.len() {
            return Err(Error::Parse { line, msg: format!("expected {} fields, found {}", header.len(), row.len()) });
        }
        let num = |j: usize| -> Result<f64> {
            row[j].parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("{}: {e}", header[j]) })
        };
        let id = row[0].parse::<i64>().map_err(|e| Error::Parse { line, msg: format!("id: {e}") })?;
        let event = num(2)?;
        if event != 0.0 && event != 1.0 {
            return Err(Error::InvalidEvent { id, value: event });
        }
        let z = (4..4 + dim_z).map(|j| num(j).map(F::of)).collect::<Result<Vec<_>>>()?;
        let v = (4 + dim_z..cov_end).map(|j| num(j).map(F::of)).collect::<Result<Vec<_>>>()?;
        let mut rec = SurvivalRecord::new(id, F::of(num(1)?), event as u8, F::of(num(3)?), z, v);
        if truth {
            let u = row[cov_end]
                .parse::<u32>()
                .map_err(|e| Error::Parse { line, msg: format!("true_cluster: {e}") })?;
            rec = rec.with_true_cluster(u);
        }
        records.push(rec);
    }
    Dataset::validate(records)
}
