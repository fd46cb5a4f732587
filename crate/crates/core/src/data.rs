//! Study records, collections, partitions and their CSV representation.
//!
//! Two file layouts are understood:
//!
//! * `ipd.csv` with header `study_id,y,x`, one row per participant. Rows of a
//!   study need not be contiguous; studies keep the order of their first row.
//! * `ad.csv` with header `study_id,beta_hat,var_hat,n_t,n_c` and the optional
//!   trailing columns `cases_t,cases_c`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

impl std::str::FromStr for OutcomeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(OutcomeKind::Continuous),
            "binary" => Ok(OutcomeKind::Binary),
            other => Err(Error::InvalidInput(format!(
                "unknown outcome kind `{other}`"
            ))),
        }
    }
}

/// Participant-level data of one study: responses and 0/1 treatment indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct IpdStudy {
    id: String,
    responses: Vec<f64>,
    treatment: Vec<bool>,
    n_treated: usize,
}

impl IpdStudy {
    /// Builds a study, checking that both arms are present and (for binary
    /// outcomes) that every response is 0 or 1.
    pub fn new(
        id: impl Into<String>,
        responses: Vec<f64>,
        treatment: Vec<bool>,
        kind: OutcomeKind,
    ) -> Result<Self> {
        let id = id.into();
        if responses.len() != treatment.len() {
            return Err(Error::study(
                &id,
                "responses and treatment differ in length",
            ));
        }
        if responses.len() < 2 {
            return Err(Error::study(&id, "fewer than 2 participants"));
        }
        if let Some(bad) = responses.iter().find(|y| !y.is_finite()) {
            return Err(Error::study(&id, format!("non-finite response {bad}")));
        }
        if kind == OutcomeKind::Binary {
            if let Some(bad) = responses.iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(Error::study(
                    &id,
                    format!("binary response must be 0 or 1, got {bad}"),
                ));
            }
        }
        let n_treated = treatment.iter().filter(|&&t| t).count();
        if n_treated == 0 || n_treated == treatment.len() {
            return Err(Error::study(&id, "single-arm study"));
        }
        Ok(Self {
            id,
            responses,
            treatment,
            n_treated,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated
    }

    /// Treatment proportion `n_T / n`.
    pub fn proportion(&self) -> f64 {
        self.n_treated as f64 / self.n() as f64
    }

    /// Responses split by arm as `(treated, control)`.
    pub fn arms(&self) -> (Vec<f64>, Vec<f64>) {
        let mut treated = Vec::with_capacity(self.n_treated);
        let mut control = Vec::with_capacity(self.n_control());
        for (&y, &t) in self.responses.iter().zip(&self.treatment) {
            if t {
                treated.push(y);
            } else {
                control.push(y);
            }
        }
        (treated, control)
    }

    /// Number of responses equal to 1 in each arm, `(treated, control)`.
    pub fn case_counts(&self) -> (u64, u64) {
        let mut cases = (0u64, 0u64);
        for (&y, &t) in self.responses.iter().zip(&self.treatment) {
            if y == 1.0 {
                if t {
                    cases.0 += 1;
                } else {
                    cases.1 += 1;
                }
            }
        }
        cases
    }
}

/// Published summary of one study.
#[derive(Debug, Clone, PartialEq)]
pub struct AdStudy {
    id: String,
    beta_hat: f64,
    var_hat: f64,
    n_t: u64,
    n_c: u64,
    cases: Option<(u64, u64)>,
}

impl AdStudy {
    pub fn new(
        id: impl Into<String>,
        beta_hat: f64,
        var_hat: f64,
        n_t: u64,
        n_c: u64,
        cases: Option<(u64, u64)>,
    ) -> Result<Self> {
        let id = id.into();
        if !beta_hat.is_finite() {
            return Err(Error::study(&id, "beta_hat is not finite"));
        }
        if !(var_hat > 0.0) || !var_hat.is_finite() {
            return Err(Error::study(
                &id,
                format!("var_hat must be positive, got {var_hat}"),
            ));
        }
        if n_t == 0 || n_c == 0 {
            return Err(Error::study(&id, "both arm sizes must be at least 1"));
        }
        if let Some((ct, cc)) = cases {
            if ct > n_t || cc > n_c {
                return Err(Error::study(&id, "case counts exceed arm sizes"));
            }
        }
        Ok(Self {
            id,
            beta_hat,
            var_hat,
            n_t,
            n_c,
            cases,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn beta_hat(&self) -> f64 {
        self.beta_hat
    }

    pub fn var_hat(&self) -> f64 {
        self.var_hat
    }

    pub fn n_t(&self) -> u64 {
        self.n_t
    }

    pub fn n_c(&self) -> u64 {
        self.n_c
    }

    pub fn n(&self) -> u64 {
        self.n_t + self.n_c
    }

    pub fn proportion(&self) -> f64 {
        self.n_t as f64 / self.n() as f64
    }

    /// Case counts `(treated, control)` when the 2x2 table was published.
    pub fn cases(&self) -> Option<(u64, u64)> {
        self.cases
    }
}

/// One study of a collection. At least one of the two payloads is present;
/// a study can carry both when its IPD was summarized or its AD published
/// alongside the raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub id: String,
    pub ipd: Option<IpdStudy>,
    pub ad: Option<AdStudy>,
}

impl Study {
    /// Sample size and treatment proportion, from the IPD when present.
    pub fn design(&self) -> (usize, f64) {
        match (&self.ipd, &self.ad) {
            (Some(ipd), _) => (ipd.n(), ipd.proportion()),
            (None, Some(ad)) => (ad.n() as usize, ad.proportion()),
            (None, None) => unreachable!("study without payload"),
        }
    }
}

/// Ordered set of studies with unique identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCollection {
    kind: OutcomeKind,
    studies: Vec<Study>,
    index: HashMap<String, usize>,
}

impl StudyCollection {
    pub fn new(kind: OutcomeKind) -> Self {
        Self {
            kind,
            studies: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn kind(&self) -> OutcomeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    pub fn study(&self, j: usize) -> &Study {
        &self.studies[j]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    fn slot(&mut self, id: &str) -> &mut Study {
        let j = match self.index.get(id) {
            Some(&j) => j,
            None => {
                self.studies.push(Study {
                    id: id.to_string(),
                    ipd: None,
                    ad: None,
                });
                self.index.insert(id.to_string(), self.studies.len() - 1);
                self.studies.len() - 1
            }
        };
        &mut self.studies[j]
    }

    pub fn push_ipd(&mut self, study: IpdStudy) -> Result<()> {
        if self.kind == OutcomeKind::Binary && study.responses.iter().any(|&y| y != 0.0 && y != 1.0)
        {
            return Err(Error::study(
                study.id(),
                "non-binary response in binary collection",
            ));
        }
        let slot = self.slot(&study.id.clone());
        if slot.ipd.is_some() {
            return Err(Error::DuplicateStudy(study.id));
        }
        slot.ipd = Some(study);
        Ok(())
    }

    pub fn push_ad(&mut self, study: AdStudy) -> Result<()> {
        let slot = self.slot(&study.id.clone());
        if slot.ad.is_some() {
            return Err(Error::DuplicateStudy(study.id));
        }
        slot.ad = Some(study);
        Ok(())
    }

    /// Merges another collection into this one; payloads for the same id are
    /// combined, a payload present on both sides is a duplicate.
    pub fn merge(mut self, other: StudyCollection) -> Result<Self> {
        if self.kind != other.kind && !self.is_empty() && !other.is_empty() {
            return Err(Error::InvalidInput(
                "outcome kinds differ between inputs".into(),
            ));
        }
        if self.is_empty() {
            self.kind = other.kind;
        }
        for study in other.studies {
            if let Some(ipd) = study.ipd {
                self.push_ipd(ipd)?;
            }
            if let Some(ad) = study.ad {
                self.push_ad(ad)?;
            }
        }
        Ok(self)
    }

    /// Sample sizes and treatment proportions of every study, in order.
    pub fn designs(&self) -> (Vec<usize>, Vec<f64>) {
        self.studies.iter().map(Study::design).unzip()
    }

    /// AD record for study `j`, summarizing its IPD when no AD was supplied.
    pub fn ad_or_summary(&self, j: usize) -> Result<AdStudy> {
        let study = &self.studies[j];
        match (&study.ad, &study.ipd) {
            (Some(ad), _) => Ok(ad.clone()),
            (None, Some(ipd)) => summarize_ipd(ipd, self.kind),
            (None, None) => unreachable!("study without payload"),
        }
    }

    pub fn has_all_ipd(&self) -> bool {
        self.studies.iter().all(|s| s.ipd.is_some())
    }
}

/// Split of the study indices `0..k` into an IPD set and an AD set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    ipd: Vec<usize>,
    ad: Vec<usize>,
}

impl Partition {
    /// `ipd` lists the indices of the IPD studies; the rest are AD.
    pub fn new(k: usize, ipd: &[usize]) -> Result<Self> {
        let mut member = vec![false; k];
        for &j in ipd {
            if j >= k {
                return Err(Error::InvalidInput(format!(
                    "study index {j} out of range 0..{k}"
                )));
            }
            if member[j] {
                return Err(Error::InvalidInput(format!("study index {j} listed twice")));
            }
            member[j] = true;
        }
        let (ipd, ad): (Vec<usize>, Vec<usize>) = (0..k).partition(|&j| member[j]);
        Ok(Self { ipd, ad })
    }

    pub fn all_ipd(k: usize) -> Self {
        Self {
            ipd: (0..k).collect(),
            ad: Vec::new(),
        }
    }

    pub fn all_ad(k: usize) -> Self {
        Self {
            ipd: Vec::new(),
            ad: (0..k).collect(),
        }
    }

    pub fn from_ids<S: AsRef<str>>(collection: &StudyCollection, ipd_ids: &[S]) -> Result<Self> {
        let idx = ipd_ids
            .iter()
            .map(|id| {
                collection.position(id.as_ref()).ok_or_else(|| {
                    Error::InvalidInput(format!("unknown study id `{}`", id.as_ref()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(collection.len(), &idx)
    }

    pub fn ipd(&self) -> &[usize] {
        &self.ipd
    }

    pub fn ad(&self) -> &[usize] {
        &self.ad
    }

    pub fn k(&self) -> usize {
        self.ipd.len() + self.ad.len()
    }

    pub fn k1(&self) -> usize {
        self.ipd.len()
    }
}

/// Demotes a study to its AD summary: the within-study estimate of the
/// treatment effect and its estimated variance.
///
/// Continuous outcomes use the difference of arm means with the pooled
/// within-arm variance, so `var_hat = s^2 / (n pi (1 - pi))`. Binary outcomes
/// use the logistic MLE and its inverse observed information.
pub fn summarize_ipd(study: &IpdStudy, kind: OutcomeKind) -> Result<AdStudy> {
    match kind {
        OutcomeKind::Continuous => {
            let (mut treated, mut control) = study.arms();
            // sorted sums keep the summary independent of participant order
            treated.sort_by(f64::total_cmp);
            control.sort_by(f64::total_cmp);
            let df = study.n() as f64 - 2.0;
            if df < 1.0 {
                return Err(Error::study(
                    study.id(),
                    "too few participants to estimate a variance",
                ));
            }
            let mean_t = treated.iter().sum::<f64>() / treated.len() as f64;
            let mean_c = control.iter().sum::<f64>() / control.len() as f64;
            let ss = |xs: &[f64], m: f64| {
                let mut d: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
                d.sort_by(f64::total_cmp);
                d.iter().sum::<f64>()
            };
            let s2 = (ss(&treated, mean_t) + ss(&control, mean_c)) / df;
            if !(s2 > 0.0) {
                return Err(Error::study(study.id(), "zero within-arm variance"));
            }
            let n = study.n() as f64;
            let pi = study.proportion();
            AdStudy::new(
                study.id(),
                mean_t - mean_c,
                s2 / (n * pi * (1.0 - pi)),
                study.n_treated() as u64,
                study.n_control() as u64,
                None,
            )
        }
        OutcomeKind::Binary => {
            let fit = crate::glmm::fit_study_logistic(study)?;
            AdStudy::new(
                study.id(),
                fit.beta_hat,
                fit.variance_beta()?,
                study.n_treated() as u64,
                study.n_control() as u64,
                Some(study.case_counts()),
            )
        }
    }
}

fn csv_err(path: &str, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_string(),
        message: message.into(),
    }
}

fn column(headers: &csv::StringRecord, name: &str, path: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| csv_err(path, format!("missing column `{name}`")))
}

fn parse_cell<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    col: usize,
    name: &str,
    path: &str,
) -> Result<T> {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    let cell = rec
        .get(col)
        .ok_or_else(|| csv_err(path, format!("line {line}: missing `{name}`")))?
        .trim();
    cell.parse().map_err(|_| {
        csv_err(
            path,
            format!("line {line}: `{name}` is not a valid number: `{cell}`"),
        )
    })
}

/// Reads participant rows (`study_id,y,x`) from any reader.
pub fn read_ipd<R: Read>(reader: R, source: &str, kind: OutcomeKind) -> Result<StudyCollection> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_err(source, e.to_string()))?
        .clone();
    let c_id = column(&headers, "study_id", source)?;
    let c_y = column(&headers, "y", source)?;
    let c_x = column(&headers, "x", source)?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Vec<f64>, Vec<bool>)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(source, e.to_string()))?;
        let id = rec.get(c_id).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(csv_err(source, "empty study_id"));
        }
        let y: f64 = parse_cell(&rec, c_y, "y", source)?;
        let x: f64 = parse_cell(&rec, c_x, "x", source)?;
        let x = match x {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            _ => {
                return Err(Error::study(
                    &id,
                    format!("treatment indicator must be 0 or 1, got {x}"),
                ))
            }
        };
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(y);
        entry.1.push(x);
    }

    let mut out = StudyCollection::new(kind);
    for id in order {
        let (y, x) = rows.remove(&id).expect("grouped study");
        out.push_ipd(IpdStudy::new(id, y, x, kind)?)?;
    }
    Ok(out)
}

/// Reads study summaries (`study_id,beta_hat,var_hat,n_t,n_c[,cases_t,cases_c]`).
pub fn read_ad<R: Read>(reader: R, source: &str, kind: OutcomeKind) -> Result<StudyCollection> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_err(source, e.to_string()))?
        .clone();
    let c_id = column(&headers, "study_id", source)?;
    let c_b = column(&headers, "beta_hat", source)?;
    let c_v = column(&headers, "var_hat", source)?;
    let c_nt = column(&headers, "n_t", source)?;
    let c_nc = column(&headers, "n_c", source)?;
    let c_cases = match (
        column(&headers, "cases_t", source),
        column(&headers, "cases_c", source),
    ) {
        (Ok(t), Ok(c)) => Some((t, c)),
        (Err(_), Err(_)) => None,
        _ => return Err(csv_err(source, "cases_t and cases_c must appear together")),
    };

    let mut out = StudyCollection::new(kind);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(source, e.to_string()))?;
        let id = rec.get(c_id).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(csv_err(source, "empty study_id"));
        }
        let beta: f64 = parse_cell(&rec, c_b, "beta_hat", source)?;
        let var: f64 = parse_cell(&rec, c_v, "var_hat", source)?;
        let n_t: u64 = parse_cell(&rec, c_nt, "n_t", source)?;
        let n_c: u64 = parse_cell(&rec, c_nc, "n_c", source)?;
        let cases = match c_cases {
            Some((ct, cc)) => {
                let blank = |c: usize| rec.get(c).map(|s| s.trim().is_empty()).unwrap_or(true);
                if blank(ct) && blank(cc) {
                    None
                } else {
                    Some((
                        parse_cell(&rec, ct, "cases_t", source)?,
                        parse_cell(&rec, cc, "cases_c", source)?,
                    ))
                }
            }
            None => None,
        };
        out.push_ad(AdStudy::new(id, beta, var, n_t, n_c, cases)?)?;
    }
    Ok(out)
}

pub fn load_ipd(path: impl AsRef<Path>, kind: OutcomeKind) -> Result<StudyCollection> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_ipd(file, &path.display().to_string(), kind)
}

pub fn load_ad(path: impl AsRef<Path>, kind: OutcomeKind) -> Result<StudyCollection> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_ad(file, &path.display().to_string(), kind)
}

fn csv_write_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("{other:?}")),
    }
}

/// Writes every IPD payload of the collection as `study_id,y,x` rows.
pub fn write_ipd<W: Write>(collection: &StudyCollection, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["study_id", "y", "x"])
        .map_err(csv_write_err)?;
    for ipd in collection.studies().iter().filter_map(|s| s.ipd.as_ref()) {
        for (y, &x) in ipd.responses().iter().zip(ipd.treatment()) {
            w.write_record([ipd.id(), &y.to_string(), if x { "1" } else { "0" }])
                .map_err(csv_write_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes every AD payload; case columns are emitted when any study has them.
pub fn write_ad<W: Write>(collection: &StudyCollection, writer: W) -> Result<()> {
    let ads: Vec<&AdStudy> = collection
        .studies()
        .iter()
        .filter_map(|s| s.ad.as_ref())
        .collect();
    write_ad_records(&ads, writer)
}

pub fn write_ad_records<W: Write>(ads: &[&AdStudy], writer: W) -> Result<()> {
    let with_cases = ads.iter().any(|a| a.cases().is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["study_id", "beta_hat", "var_hat", "n_t", "n_c"];
    if with_cases {
        header.extend(["cases_t", "cases_c"]);
    }
    w.write_record(&header).map_err(csv_write_err)?;
    for ad in ads {
        let mut row = vec![
            ad.id().to_string(),
            ad.beta_hat().to_string(),
            ad.var_hat().to_string(),
            ad.n_t().to_string(),
            ad.n_c().to_string(),
        ];
        if with_cases {
            match ad.cases() {
                Some((t, c)) => row.extend([t.to_string(), c.to_string()]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&row).map_err(csv_write_err)?;
    }
    w.flush()?;
    Ok(())
}
