//! Domain types, validation, and CSV ingestion.
//!
//! Input is long-format: one longitudinal row per measurement
//! (`subject,biomarker,time,value,<covariates...>`) and one survival row per
//! subject (`subject,time,cause,<covariates...>`, cause 0 = censored).
//! A [`ModelSpec`] declares, per biomarker, which columns (plus intercept and
//! time terms) enter the fixed and random designs, and which columns enter
//! the survival design.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A term of a design row: the constant 1, the measurement time, or a named
/// numeric covariate column of the input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Intercept,
    Time,
    Column(String),
}

impl Term {
    fn parse(s: &str) -> Term {
        match s {
            "intercept" => Term::Intercept,
            "time" => Term::Time,
            other => Term::Column(other.to_string()),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => write!(f, "intercept"),
            Term::Time => write!(f, "time"),
            Term::Column(c) => write!(f, "{c}"),
        }
    }
}

/// Design declaration for one biomarker.
#[derive(Debug, Clone, PartialEq)]
pub struct BiomarkerSpec {
    pub fixed: Vec<Term>,
    pub random: Vec<Term>,
}

/// Model dimensions and column maps: G biomarkers, K causes, per-biomarker
/// fixed/random design terms, and the survival covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub causes: usize,
    pub biomarkers: Vec<BiomarkerSpec>,
    pub survival_covariates: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SpecFileModel {
    causes: usize,
}

#[derive(Serialize, Deserialize)]
struct SpecFileBiomarker {
    fixed: Vec<String>,
    random: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SpecFileSurvival {
    covariates: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    #[serde(default)]
    schema_version: Option<u32>,
    model: SpecFileModel,
    biomarker: Vec<SpecFileBiomarker>,
    survival: SpecFileSurvival,
}

impl ModelSpec {
    /// Number of biomarkers G.
    pub fn n_biomarkers(&self) -> usize {
        self.biomarkers.len()
    }

    /// Number of competing causes K.
    pub fn n_causes(&self) -> usize {
        self.causes
    }

    /// Fixed-effect dimension p_g of biomarker `g` (0-based).
    pub fn p_g(&self, g: usize) -> usize {
        self.biomarkers[g].fixed.len()
    }

    /// Random-effect dimension q_g of biomarker `g` (0-based).
    pub fn q_g(&self, g: usize) -> usize {
        self.biomarkers[g].random.len()
    }

    /// Total fixed-effect dimension p = sum of p_g.
    pub fn p_total(&self) -> usize {
        (0..self.n_biomarkers()).map(|g| self.p_g(g)).sum()
    }

    /// Total random-effect dimension q = sum of q_g.
    pub fn q_total(&self) -> usize {
        (0..self.n_biomarkers()).map(|g| self.q_g(g)).sum()
    }

    /// Offset of biomarker `g`'s block in the stacked fixed-effect vector.
    pub fn p_offset(&self, g: usize) -> usize {
        (0..g).map(|h| self.p_g(h)).sum()
    }

    /// Offset of biomarker `g`'s block in the stacked random-effect vector.
    pub fn q_offset(&self, g: usize) -> usize {
        (0..g).map(|h| self.q_g(h)).sum()
    }

    /// Survival design dimension |W|.
    pub fn w_dim(&self) -> usize {
        self.survival_covariates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.causes == 0 {
            return Err(Error::InvalidSpec("need at least one cause".into()));
        }
        if self.biomarkers.is_empty() {
            return Err(Error::InvalidSpec("need at least one biomarker".into()));
        }
        for (g, b) in self.biomarkers.iter().enumerate() {
            if b.fixed.is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "biomarker {} has an empty fixed design",
                    g + 1
                )));
            }
            if b.random.is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "biomarker {} has an empty random design",
                    g + 1
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<ModelSpec> {
        let file: SpecFile =
            toml::from_str(s).map_err(|e| Error::InvalidSpec(format!("toml parse: {e}")))?;
        let spec = ModelSpec {
            causes: file.model.causes,
            biomarkers: file
                .biomarker
                .iter()
                .map(|b| BiomarkerSpec {
                    fixed: b.fixed.iter().map(|s| Term::parse(s)).collect(),
                    random: b.random.iter().map(|s| Term::parse(s)).collect(),
                })
                .collect(),
            survival_covariates: file.survival.covariates.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<ModelSpec> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        let file = SpecFile {
            schema_version: Some(1),
            model: SpecFileModel { causes: self.causes },
            biomarker: self
                .biomarkers
                .iter()
                .map(|b| SpecFileBiomarker {
                    fixed: b.fixed.iter().map(|t| t.to_string()).collect(),
                    random: b.random.iter().map(|t| t.to_string()).collect(),
                })
                .collect(),
            survival: SpecFileSurvival {
                covariates: self.survival_covariates.clone(),
            },
        };
        toml::to_string(&file).expect("model spec serializes")
    }
}

/// One longitudinal measurement with its design rows already resolved
/// against the [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct LongObs {
    pub time: f64,
    pub value: f64,
    /// Fixed design row, length p_g.
    pub x: DVector<f64>,
    /// Random design row, length q_g.
    pub z: DVector<f64>,
    /// Raw covariate cells in file column order (for round-trip writes).
    pub(crate) raw_covs: Vec<f64>,
    /// Original row position in the longitudinal file.
    pub(crate) row_idx: usize,
}

/// One survival record: observed time, cause (0 = censored), design W.
#[derive(Debug, Clone)]
pub struct SurvRecord {
    pub time: f64,
    pub cause: usize,
    pub w: DVector<f64>,
    pub(crate) raw_covs: Vec<f64>,
    pub(crate) row_idx: usize,
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    /// Per-biomarker measurement lists; `long[g]` may be empty.
    pub long: Vec<Vec<LongObs>>,
    pub surv: SurvRecord,
}

impl Subject {
    pub fn n_obs(&self, g: usize) -> usize {
        self.long[g].len()
    }
}

/// Validated dataset: subjects sorted by id, one survival record each.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: ModelSpec,
    pub subjects: Vec<Subject>,
    pub(crate) long_cov_names: Vec<String>,
    pub(crate) surv_cov_names: Vec<String>,
    /// Longitudinal rows dropped because their time exceeded the subject's
    /// observed event time (only when loading with `drop_post_event`).
    pub dropped_post_event: usize,
}

impl Dataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Total number of cause-k (1-based; 0 counts censorings) records.
    pub fn n_with_cause(&self, cause: usize) -> usize {
        self.subjects.iter().filter(|s| s.surv.cause == cause).count()
    }
}

enum ResolvedTerm {
    Intercept,
    Time,
    Cov(usize),
}

fn resolve_terms(terms: &[Term], cov_names: &[String], file: &str) -> Result<Vec<ResolvedTerm>> {
    terms
        .iter()
        .map(|t| match t {
            Term::Intercept => Ok(ResolvedTerm::Intercept),
            Term::Time => Ok(ResolvedTerm::Time),
            Term::Column(name) => cov_names
                .iter()
                .position(|c| c == name)
                .map(ResolvedTerm::Cov)
                .ok_or_else(|| Error::MissingColumn {
                    file: file.to_string(),
                    column: name.clone(),
                }),
        })
        .collect()
}

fn design_row(resolved: &[ResolvedTerm], time: f64, covs: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        resolved.len(),
        resolved.iter().map(|t| match t {
            ResolvedTerm::Intercept => 1.0,
            ResolvedTerm::Time => time,
            ResolvedTerm::Cov(j) => covs[*j],
        }),
    )
}

fn parse_cell(file: &str, line: usize, column: &str, cell: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| Error::NonNumeric {
            file: file.to_string(),
            line,
            column: column.to_string(),
            cell: cell.to_string(),
        })
}

struct Header {
    /// Positions of the required columns in the file.
    required: Vec<usize>,
    /// (name, position) of the remaining (covariate) columns, file order.
    covs: Vec<(String, usize)>,
}

fn read_header(rdr: &mut csv::Reader<std::fs::File>, file: &str, required: &[&str]) -> Result<Header> {
    let headers = rdr.headers()?.clone();
    let mut required_pos = Vec::with_capacity(required.len());
    for name in required {
        let pos = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::MissingColumn {
                file: file.to_string(),
                column: name.to_string(),
            })?;
        required_pos.push(pos);
    }
    let covs = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !required_pos.contains(i))
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    Ok(Header {
        required: required_pos,
        covs,
    })
}

/// Load and validate a dataset from the two CSV files.
///
/// When `drop_post_event` is set, longitudinal rows with time after the
/// subject's observed event time are dropped and counted; otherwise such a
/// row is an error.
pub fn load_dataset(
    long_file: impl AsRef<Path>,
    surv_file: impl AsRef<Path>,
    spec: &ModelSpec,
    drop_post_event: bool,
) -> Result<Dataset> {
    spec.validate()?;
    let long_name = long_file.as_ref().display().to_string();
    let surv_name = surv_file.as_ref().display().to_string();

    // Survival file first: the post-event check needs T_i.
    let mut rdr = csv::Reader::from_path(surv_file.as_ref())?;
    let header = read_header(&mut rdr, &surv_name, &["subject", "time", "cause"])?;
    let surv_cov_names: Vec<String> = header.covs.iter().map(|(n, _)| n.clone()).collect();
    let w_terms: Vec<Term> = spec
        .survival_covariates
        .iter()
        .map(|c| Term::Column(c.clone()))
        .collect();
    let w_resolved = resolve_terms(&w_terms, &surv_cov_names, &surv_name)?;

    let mut surv: BTreeMap<String, SurvRecord> = BTreeMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = idx + 2; // header is line 1
        let subject = record.get(header.required[0]).unwrap_or("").to_string();
        let time = parse_cell(&surv_name, line, "time", record.get(header.required[1]).unwrap_or(""))?;
        let cause_raw = record.get(header.required[2]).unwrap_or("");
        let cause: i64 = cause_raw.trim().parse().map_err(|_| Error::NonNumeric {
            file: surv_name.clone(),
            line,
            column: "cause".into(),
            cell: cause_raw.to_string(),
        })?;
        if cause < 0 || cause as usize > spec.n_causes() {
            return Err(Error::UnknownCause {
                subject,
                cause,
                n_causes: spec.n_causes(),
            });
        }
        if !time.is_finite() || time <= 0.0 {
            return Err(Error::InvalidValue(format!(
                "survival time {time} for subject `{subject}` must be positive and finite"
            )));
        }
        let mut covs = Vec::with_capacity(header.covs.len());
        for (name, pos) in &header.covs {
            let v = parse_cell(&surv_name, line, name, record.get(*pos).unwrap_or(""))?;
            if !v.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "non-finite covariate `{name}` in {surv_name} line {line}"
                )));
            }
            covs.push(v);
        }
        let w = design_row(&w_resolved, time, &covs);
        let rec = SurvRecord {
            time,
            cause: cause as usize,
            w,
            raw_covs: covs,
            row_idx: idx,
        };
        if surv.insert(subject.clone(), rec).is_some() {
            return Err(Error::DuplicateSurvival(subject));
        }
    }

    // Longitudinal file.
    let mut rdr = csv::Reader::from_path(long_file.as_ref())?;
    let header = read_header(&mut rdr, &long_name, &["subject", "biomarker", "time", "value"])?;
    let long_cov_names: Vec<String> = header.covs.iter().map(|(n, _)| n.clone()).collect();
    let resolved: Vec<(Vec<ResolvedTerm>, Vec<ResolvedTerm>)> = spec
        .biomarkers
        .iter()
        .map(|b| {
            Ok((
                resolve_terms(&b.fixed, &long_cov_names, &long_name)?,
                resolve_terms(&b.random, &long_cov_names, &long_name)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut long: BTreeMap<String, Vec<Vec<LongObs>>> = BTreeMap::new();
    let mut dropped = 0usize;
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = idx + 2;
        let subject = record.get(header.required[0]).unwrap_or("").to_string();
        let biomarker_raw = record.get(header.required[1]).unwrap_or("");
        let biomarker: i64 = biomarker_raw.trim().parse().map_err(|_| Error::NonNumeric {
            file: long_name.clone(),
            line,
            column: "biomarker".into(),
            cell: biomarker_raw.to_string(),
        })?;
        if biomarker < 1 || biomarker as usize > spec.n_biomarkers() {
            return Err(Error::UnknownBiomarker {
                subject,
                index: biomarker,
                n_biomarkers: spec.n_biomarkers(),
            });
        }
        let g = biomarker as usize - 1;
        let time = parse_cell(&long_name, line, "time", record.get(header.required[2]).unwrap_or(""))?;
        let value = parse_cell(&long_name, line, "value", record.get(header.required[3]).unwrap_or(""))?;
        if !time.is_finite() || time < 0.0 {
            return Err(Error::InvalidValue(format!(
                "longitudinal time {time} in {long_name} line {line} must be nonnegative and finite"
            )));
        }
        if !value.is_finite() {
            return Err(Error::InvalidValue(format!(
                "non-finite value in {long_name} line {line}"
            )));
        }
        let mut covs = Vec::with_capacity(header.covs.len());
        for (name, pos) in &header.covs {
            let v = parse_cell(&long_name, line, name, record.get(*pos).unwrap_or(""))?;
            if !v.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "non-finite covariate `{name}` in {long_name} line {line}"
                )));
            }
            covs.push(v);
        }

        let surv_rec = surv
            .get(&subject)
            .ok_or_else(|| Error::NoSurvivalRecord(subject.clone()))?;
        if time > surv_rec.time {
            if drop_post_event {
                dropped += 1;
                continue;
            }
            return Err(Error::PostEventObservation {
                subject,
                time,
                surv_time: surv_rec.time,
            });
        }

        let (fx, rz) = &resolved[g];
        let obs = LongObs {
            time,
            value,
            x: design_row(fx, time, &covs),
            z: design_row(rz, time, &covs),
            raw_covs: covs,
            row_idx: idx,
        };
        long.entry(subject)
            .or_insert_with(|| vec![Vec::new(); spec.n_biomarkers()])
            [g]
            .push(obs);
    }

    // BTreeMap iteration gives subjects sorted by id.
    let subjects = surv
        .into_iter()
        .map(|(id, surv)| {
            let long = long
                .remove(&id)
                .unwrap_or_else(|| vec![Vec::new(); spec.n_biomarkers()]);
            Subject { id, long, surv }
        })
        .collect();

    Ok(Dataset {
        spec: spec.clone(),
        subjects,
        long_cov_names,
        surv_cov_names,
        dropped_post_event: dropped,
    })
}

/// Write a dataset back out in the ingestion schemas. Rows appear in their
/// original file order, so `write_dataset(load_dataset(f))` reproduces `f`
/// up to float formatting.
pub fn write_dataset(
    ds: &Dataset,
    long_file: impl AsRef<Path>,
    surv_file: impl AsRef<Path>,
) -> Result<()> {
    let mut rows: Vec<(usize, &str, usize, &LongObs)> = Vec::new();
    for s in &ds.subjects {
        for (g, obs_list) in s.long.iter().enumerate() {
            for o in obs_list {
                rows.push((o.row_idx, &s.id, g + 1, o));
            }
        }
    }
    rows.sort_by_key(|r| r.0);

    let mut w = csv::Writer::from_path(long_file.as_ref())?;
    let mut header = vec!["subject".to_string(), "biomarker".into(), "time".into(), "value".into()];
    header.extend(ds.long_cov_names.iter().cloned());
    w.write_record(&header)?;
    for (_, id, g, o) in rows {
        let mut rec = vec![id.to_string(), g.to_string(), format!("{}", o.time), format!("{}", o.value)];
        rec.extend(o.raw_covs.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut subj: Vec<&Subject> = ds.subjects.iter().collect();
    subj.sort_by_key(|s| s.surv.row_idx);
    let mut w = csv::Writer::from_path(surv_file.as_ref())?;
    let mut header = vec!["subject".to_string(), "time".into(), "cause".into()];
    header.extend(ds.surv_cov_names.iter().cloned());
    w.write_record(&header)?;
    for s in subj {
        let mut rec = vec![s.id.clone(), format!("{}", s.surv.time), s.surv.cause.to_string()];
        rec.extend(s.surv.raw_covs.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Build a dataset directly from parts (used by the simulator); runs the
/// same semantic validation as the CSV loader.
pub(crate) fn assemble_dataset(
    spec: ModelSpec,
    mut subjects: Vec<Subject>,
    long_cov_names: Vec<String>,
    surv_cov_names: Vec<String>,
) -> Result<Dataset> {
    spec.validate()?;
    subjects.sort_by(|a, b| a.id.cmp(&b.id));
    for s in &subjects {
        if s.surv.cause > spec.n_causes() {
            return Err(Error::UnknownCause {
                subject: s.id.clone(),
                cause: s.surv.cause as i64,
                n_causes: spec.n_causes(),
            });
        }
        if s.long.len() != spec.n_biomarkers() {
            return Err(Error::DimensionMismatch(format!(
                "subject `{}` has {} biomarker lists, spec has {}",
                s.id,
                s.long.len(),
                spec.n_biomarkers()
            )));
        }
        for (g, obs_list) in s.long.iter().enumerate() {
            for o in obs_list {
                if o.time > s.surv.time {
                    return Err(Error::PostEventObservation {
                        subject: s.id.clone(),
                        time: o.time,
                        surv_time: s.surv.time,
                    });
                }
                if o.x.len() != spec.p_g(g) || o.z.len() != spec.q_g(g) {
                    return Err(Error::DimensionMismatch(format!(
                        "design row lengths for subject `{}` biomarker {}",
                        s.id,
                        g + 1
                    )));
                }
            }
        }
    }
    Ok(Dataset {
        spec,
        subjects,
        long_cov_names,
        surv_cov_names,
        dropped_post_event: 0,
    })
}
