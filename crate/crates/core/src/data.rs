//! Study-level data: ingestion, covariate preprocessing and design matrices.
//!
//! Binary covariates are stored as 0/1 with the reference level at 0. Metric
//! covariates are standardized once on the analysis sample (`k - 1`
//! denominator) and keep the parameters that were used.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;

use nalgebra::DMatrix;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Metric,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMeta {
    pub name: String,
    pub scale: Scale,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
    /// Text levels of a binary covariate as `[reference, other]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<[String; 2]>,
}

impl CovariateMeta {
    pub fn metric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            scale: Scale::Metric,
            standardization: None,
            levels: None,
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            scale: Scale::Binary,
            standardization: None,
            levels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub y: f64,
    pub v: f64,
    pub n: Option<u32>,
    pub x: Vec<f64>,
}

/// A complete-case meta-analytic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDataset {
    studies: Vec<StudyRecord>,
    covariates: Vec<CovariateMeta>,
}

impl MetaDataset {
    pub fn new(studies: Vec<StudyRecord>, covariates: Vec<CovariateMeta>) -> Result<Self> {
        let p = covariates.len();
        for (row, s) in studies.iter().enumerate() {
            if s.x.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "study {row} has {} covariates, expected {p}",
                    s.x.len()
                )));
            }
            if !(s.v.is_finite() && s.v > 0.0) {
                return Err(Error::NonPositiveVariance { row, value: s.v });
            }
            if !s.y.is_finite() {
                return Err(Error::MissingValue {
                    row,
                    column: "y".into(),
                });
            }
            if s.n == Some(0) {
                return Err(Error::InvalidSampleSize {
                    row,
                    value: "0".into(),
                });
            }
            for (j, &x) in s.x.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::MissingValue {
                        row,
                        column: covariates[j].name.clone(),
                    });
                }
                if covariates[j].scale == Scale::Binary && x != 0.0 && x != 1.0 {
                    return Err(Error::NonNumericValue {
                        row,
                        column: covariates[j].name.clone(),
                        value: x.to_string(),
                    });
                }
            }
        }
        Ok(Self {
            studies,
            covariates,
        })
    }

    /// Builds a dataset from column vectors; `x[j]` is the column of covariate `j`.
    pub fn from_columns(
        y: &[f64],
        v: &[f64],
        x: &[Vec<f64>],
        covariates: Vec<CovariateMeta>,
    ) -> Result<Self> {
        if y.len() != v.len() || x.iter().any(|c| c.len() != y.len()) {
            return Err(Error::DimensionMismatch("column lengths differ".into()));
        }
        let studies = (0..y.len())
            .map(|i| StudyRecord {
                y: y[i],
                v: v[i],
                n: None,
                x: x.iter().map(|c| c[i]).collect(),
            })
            .collect();
        Self::new(studies, covariates)
    }

    pub fn k(&self) -> usize {
        self.studies.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    pub fn studies(&self) -> &[StudyRecord] {
        &self.studies
    }

    pub fn covariates(&self) -> &[CovariateMeta] {
        &self.covariates
    }

    pub fn names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    pub fn y(&self) -> Vec<f64> {
        self.studies.iter().map(|s| s.y).collect()
    }

    pub fn v(&self) -> Vec<f64> {
        self.studies.iter().map(|s| s.v).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.studies.iter().map(|s| s.x[j]).collect()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    /// Rows at `indices`, repeats allowed (bootstrap resamples, CV folds).
    pub fn subset(&self, indices: &[usize]) -> MetaDataset {
        MetaDataset {
            studies: indices.iter().map(|&i| self.studies[i].clone()).collect(),
            covariates: self.covariates.clone(),
        }
    }

    /// Replaces outcome and variance, keeping covariates.
    pub fn with_outcomes(&self, y: &[f64], v: &[f64]) -> Result<MetaDataset> {
        if y.len() != self.k() || v.len() != self.k() {
            return Err(Error::DimensionMismatch("outcome length differs from k".into()));
        }
        let studies = self
            .studies
            .iter()
            .zip(y.iter().zip(v))
            .map(|(s, (&y, &v))| StudyRecord {
                y,
                v,
                n: s.n,
                x: s.x.clone(),
            })
            .collect();
        MetaDataset::new(studies, self.covariates.clone())
    }
}

/// Covariate declaration as read from a schema document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDecl {
    pub name: String,
    pub scale: Scale,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub covariates: Vec<CovariateDecl>,
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    /// Schema that reproduces `ds` when its CSV export is loaded again.
    pub fn for_dataset(ds: &MetaDataset) -> Self {
        Self {
            covariates: ds
                .covariates
                .iter()
                .map(|c| CovariateDecl {
                    name: c.name.clone(),
                    scale: c.scale,
                    reference: c.levels.as_ref().map(|l| l[0].clone()),
                })
                .collect(),
        }
    }
}

pub(crate) fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA" || t == "NaN"
}

pub(crate) struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read<R: Read>(source: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(source);
        let header = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { header, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn optional_column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn number(&self, row: usize, col: usize) -> Result<Option<f64>> {
        let cell = &self.rows[row][col];
        if is_missing(cell) {
            return Ok(None);
        }
        cell.trim()
            .parse::<f64>()
            .map(Some)
            .map_err(|_| Error::NonNumericValue {
                row,
                column: self.header[col].clone(),
                value: cell.clone(),
            })
    }

    pub fn sample_size(&self, row: usize, col: usize) -> Result<Option<u32>> {
        let cell = &self.rows[row][col];
        if is_missing(cell) {
            return Ok(None);
        }
        let bad = || Error::InvalidSampleSize {
            row,
            value: cell.clone(),
        };
        let n: f64 = cell.trim().parse().map_err(|_| bad())?;
        if n < 1.0 || n.fract() != 0.0 || n > u32::MAX as f64 {
            return Err(bad());
        }
        Ok(Some(n as u32))
    }

    /// Covariate columns with missing cells as `None`.
    pub fn covariates(&self, schema: &Schema) -> Result<(Vec<CovariateMeta>, Vec<Vec<Option<f64>>>)> {
        let mut metas = Vec::with_capacity(schema.covariates.len());
        let mut columns = Vec::with_capacity(schema.covariates.len());
        for decl in &schema.covariates {
            let col = self.column_index(&decl.name)?;
            match decl.scale {
                Scale::Metric => {
                    let values = (0..self.rows.len())
                        .map(|r| self.number(r, col))
                        .collect::<Result<Vec<_>>>()?;
                    metas.push(CovariateMeta::metric(&decl.name));
                    columns.push(values);
                }
                Scale::Binary => {
                    let observed: BTreeSet<&str> = self
                        .rows
                        .iter()
                        .map(|r| r[col].trim())
                        .filter(|c| !is_missing(c))
                        .collect();
                    if observed.len() > 2 {
                        return Err(Error::TooManyLevels {
                            column: decl.name.clone(),
                            levels: observed.iter().map(|s| s.to_string()).collect(),
                        });
                    }
                    let reference = match &decl.reference {
                        Some(r) => {
                            if observed.len() == 2 && !observed.contains(r.as_str()) {
                                return Err(Error::UnknownReference {
                                    column: decl.name.clone(),
                                    reference: r.clone(),
                                });
                            }
                            r.clone()
                        }
                        None => observed.iter().next().map(|s| s.to_string()).unwrap_or_default(),
                    };
                    let other = observed
                        .iter()
                        .find(|l| **l != reference)
                        .map(|s| s.to_string())
                        .unwrap_or_default();
                    let values = self
                        .rows
                        .iter()
                        .map(|r| {
                            let c = r[col].trim();
                            if is_missing(c) {
                                None
                            } else if c == reference {
                                Some(0.0)
                            } else {
                                Some(1.0)
                            }
                        })
                        .collect();
                    let mut meta = CovariateMeta::binary(&decl.name);
                    meta.levels = Some([reference, other]);
                    metas.push(meta);
                    columns.push(values);
                }
            }
        }
        Ok((metas, columns))
    }
}

/// Reads a complete-case dataset. Columns `y` and `v` are required, `n` is optional.
pub fn load_dataset<R: Read>(source: R, schema: &Schema) -> Result<MetaDataset> {
    let table = RawTable::read(source)?;
    let y_col = table.column_index("y")?;
    let v_col = table.column_index("v")?;
    let n_col = table.optional_column("n");
    let (metas, columns) = table.covariates(schema)?;

    let mut studies = Vec::with_capacity(table.rows.len());
    for row in 0..table.rows.len() {
        let y = table.number(row, y_col)?.ok_or_else(|| Error::MissingValue {
            row,
            column: "y".into(),
        })?;
        let v = table.number(row, v_col)?.ok_or_else(|| Error::MissingValue {
            row,
            column: "v".into(),
        })?;
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::NonPositiveVariance { row, value: v });
        }
        let n = match n_col {
            Some(c) => table.sample_size(row, c)?,
            None => None,
        };
        let x = columns
            .iter()
            .zip(&metas)
            .map(|(col, meta)| {
                col[row].ok_or_else(|| Error::MissingValue {
                    row,
                    column: meta.name.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        studies.push(StudyRecord { y, v, n, x });
    }
    MetaDataset::new(studies, metas)
}

/// Serializes a dataset to the CSV layout read by [`load_dataset`].
pub fn write_dataset_csv(ds: &MetaDataset) -> String {
    let with_n = ds.studies.iter().any(|s| s.n.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["y".to_string(), "v".to_string()];
    if with_n {
        header.push("n".into());
    }
    header.extend(ds.names());
    w.write_record(&header).expect("in-memory write");
    for s in &ds.studies {
        let mut rec = vec![s.y.to_string(), s.v.to_string()];
        if with_n {
            rec.push(s.n.map(|n| n.to_string()).unwrap_or_else(|| "NA".into()));
        }
        for (x, meta) in s.x.iter().zip(&ds.covariates) {
            rec.push(match (&meta.levels, meta.scale) {
                (Some(levels), Scale::Binary) if !levels[1].is_empty() || *x == 0.0 => {
                    levels[(*x != 0.0) as usize].clone()
                }
                _ => x.to_string(),
            });
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Centers and scales every metric covariate (sample sd, `k - 1` denominator).
pub fn standardize(ds: &MetaDataset) -> Result<MetaDataset> {
    let mut out = ds.clone();
    let k = ds.k();
    for j in 0..ds.p() {
        if ds.covariates[j].scale != Scale::Metric {
            continue;
        }
        let col = ds.column(j);
        let (mean, sd) = mean_sd(&col);
        if k < 2 || !(sd > 0.0) {
            return Err(Error::ZeroVariance(ds.covariates[j].name.clone()));
        }
        for s in out.studies.iter_mut() {
            s.x[j] = (s.x[j] - mean) / sd;
        }
        let meta = &mut out.covariates[j];
        meta.standardization = Some(match meta.standardization {
            Some(prev) => Standardization {
                mean: prev.mean + prev.sd * mean,
                sd: prev.sd * sd,
            },
            None => Standardization { mean, sd },
        });
    }
    Ok(out)
}

pub(crate) fn mean_sd(x: &[f64]) -> (f64, f64) {
    let k = x.len() as f64;
    let mean = x.iter().sum::<f64>() / k;
    let ss = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (mean, (ss / (k - 1.0)).sqrt())
}

/// Selected main effects `J` and interactions `L` (pairs stored as `(a, b)`, `a < b`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mains: BTreeSet<usize>,
    pub interactions: BTreeSet<(usize, usize)>,
}

pub fn pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl ModelSpec {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a spec and checks it is marginality-closed.
    pub fn new(
        mains: impl IntoIterator<Item = usize>,
        interactions: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let spec = Self::from_parts(mains, interactions)?;
        spec.check_marginality()?;
        Ok(spec)
    }

    /// Builds a spec and adds any main effect an interaction needs.
    pub fn closed(
        mains: impl IntoIterator<Item = usize>,
        interactions: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut spec = Self::from_parts(mains, interactions)?;
        let needed: Vec<usize> = spec.interactions.iter().flat_map(|&(a, b)| [a, b]).collect();
        spec.mains.extend(needed);
        Ok(spec)
    }

    fn from_parts(
        mains: impl IntoIterator<Item = usize>,
        interactions: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mains = mains.into_iter().collect();
        let mut set = BTreeSet::new();
        for (a, b) in interactions {
            if a == b {
                return Err(Error::SelfInteraction(a));
            }
            set.insert(pair(a, b));
        }
        Ok(Self {
            mains,
            interactions: set,
        })
    }

    pub fn check_marginality(&self) -> Result<()> {
        for &(a, b) in &self.interactions {
            if a == b {
                return Err(Error::SelfInteraction(a));
            }
            if !self.mains.contains(&a) || !self.mains.contains(&b) {
                return Err(Error::MarginalityViolation(a, b));
            }
        }
        Ok(())
    }

    pub fn is_marginality_closed(&self) -> bool {
        self.check_marginality().is_ok()
    }

    /// Number of regression coefficients including the intercept.
    pub fn m(&self) -> usize {
        1 + self.mains.len() + self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mains.is_empty() && self.interactions.is_empty()
    }

    pub fn is_subset_of(&self, other: &ModelSpec) -> bool {
        self.mains.is_subset(&other.mains) && self.interactions.is_subset(&other.interactions)
    }

    /// Column names in design order.
    pub fn column_names(&self, names: &[String]) -> Vec<String> {
        let mut out = vec!["(Intercept)".to_string()];
        out.extend(self.mains.iter().map(|&j| names[j].clone()));
        out.extend(
            self.interactions
                .iter()
                .map(|&(a, b)| format!("{}:{}", names[a], names[b])),
        );
        out
    }

    /// Design column index of an interaction, if present.
    pub fn interaction_column(&self, p: (usize, usize)) -> Option<usize> {
        let p = pair(p.0, p.1);
        self.interactions
            .iter()
            .position(|&q| q == p)
            .map(|i| 1 + self.mains.len() + i)
    }

    pub fn main_column(&self, j: usize) -> Option<usize> {
        self.mains.iter().position(|&q| q == j).map(|i| 1 + i)
    }

    pub fn named(&self, names: &[String]) -> NamedSpec {
        NamedSpec {
            mains: self.mains.iter().map(|&j| names[j].clone()).collect(),
            interactions: self
                .interactions
                .iter()
                .map(|&(a, b)| format!("{}:{}", names[a], names[b]))
                .collect(),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mains: Vec<String> = self.mains.iter().map(|j| j.to_string()).collect();
        let ies: Vec<String> = self
            .interactions
            .iter()
            .map(|(a, b)| format!("{a}:{b}"))
            .collect();
        write!(f, "{{{}; {}}}", mains.join(", "), ies.join(", "))
    }
}

/// Human-readable form of a [`ModelSpec`] for JSON output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedSpec {
    pub mains: Vec<String>,
    pub interactions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }
}

/// Intercept, then main effects by covariate index, then interactions in
/// lexicographic pair order.
pub fn build_design(ds: &MetaDataset, spec: &ModelSpec) -> Result<DesignMatrix> {
    let p = ds.p();
    for &j in &spec.mains {
        if j >= p {
            return Err(Error::IndexOutOfRange { index: j, p });
        }
    }
    for &(a, b) in &spec.interactions {
        for idx in [a, b] {
            if idx >= p {
                return Err(Error::IndexOutOfRange { index: idx, p });
            }
        }
    }
    spec.check_marginality()?;

    let k = ds.k();
    let m = spec.m();
    let mut values = DMatrix::zeros(k, m);
    for (i, s) in ds.studies.iter().enumerate() {
        values[(i, 0)] = 1.0;
        let mut c = 1;
        for &j in &spec.mains {
            values[(i, c)] = s.x[j];
            c += 1;
        }
        for &(a, b) in &spec.interactions {
            values[(i, c)] = s.x[a] * s.x[b];
            c += 1;
        }
    }
    Ok(DesignMatrix {
        names: spec.column_names(&ds.names()),
        values,
    })
}

/// Number of marginality-respecting models with up to two-way interactions
/// over `p` covariates: `sum_k C(p, k) * 2^C(k, 2)`.
pub fn count_admissible_models(p: usize) -> Result<BigUint> {
    if p > 20 {
        return Err(Error::Overflow(p));
    }
    let mut total = BigUint::from(0u32);
    let mut binom = BigUint::from(1u32);
    for k in 0..=p {
        if k > 0 {
            binom = binom * BigUint::from((p - k + 1) as u64) / BigUint::from(k as u64);
        }
        let pairs = k * k.saturating_sub(1) / 2;
        total += &binom << pairs;
    }
    Ok(total)
}

/// All unordered pairs `(a, b)`, `a < b < p`, in lexicographic order.
pub fn all_pairs(p: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    for a in 0..p {
        for b in a + 1..p {
            out.push((a, b));
        }
    }
    out
}

/// Maps covariate names to indices; interactions are written `A:B`.
pub fn spec_from_names(ds: &MetaDataset, mains: &[&str], interactions: &[&str]) -> Result<ModelSpec> {
    let index: BTreeMap<&str, usize> = ds
        .covariates
        .iter()
        .enumerate()
        .map(|(i, c)| (c.name.as_str(), i))
        .collect();
    let lookup = |n: &str| {
        index
            .get(n)
            .copied()
            .ok_or_else(|| Error::UnknownCovariate(n.to_string()))
    };
    let j = mains.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?;
    let mut l = Vec::new();
    for ie in interactions {
        let (a, b) = ie
            .split_once(':')
            .ok_or_else(|| Error::UnknownCovariate(ie.to_string()))?;
        l.push((lookup(a)?, lookup(b)?));
    }
    ModelSpec::new(j, l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(json: &str) -> Schema {
        Schema::from_json(json).unwrap()
    }

    #[test]
    fn loads_binary_levels_with_reference() {
        let csv = "y,v,n,Time,Disc\n0.1,0.5,10,1990,yes\n0.2,0.4,20,2000,no\n";
        let s = schema(
            r#"{"covariates":[{"name":"Time","scale":"metric"},
                {"name":"Disc","scale":"binary","reference":"no"}]}"#,
        );
        let ds = load_dataset(csv.as_bytes(), &s).unwrap();
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.column(1), vec![1.0, 0.0]);
        assert_eq!(ds.studies()[1].n, Some(20));
    }

    #[test]
    fn default_reference_is_lexicographically_first() {
        let csv = "y,v,Multi\n0,1,multi\n0,1,mono\n";
        let s = schema(r#"{"covariates":[{"name":"Multi","scale":"binary"}]}"#);
        let ds = load_dataset(csv.as_bytes(), &s).unwrap();
        assert_eq!(ds.column(0), vec![1.0, 0.0]);
    }

    #[test]
    fn single_row_without_covariates() {
        let ds = load_dataset("y,v\n1.5,0.2\n".as_bytes(), &schema(r#"{"covariates":[]}"#)).unwrap();
        assert_eq!((ds.k(), ds.p()), (1, 0));
    }

    #[test]
    fn load_errors() {
        let s = schema(r#"{"covariates":[{"name":"Age","scale":"metric"}]}"#);
        let err = load_dataset("y,v,Age\n1,0,50\n".as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::NonPositiveVariance { row: 0, .. }));
        let err = load_dataset("y,v\n1,1\n".as_bytes(), &s).unwrap_err();
        assert_eq!(err, Error::MissingColumn("Age".into()));
        let err = load_dataset("y,v,Age\n1,1,old\n".as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::NonNumericValue { .. }));
        let err = load_dataset("y,v,Age\n1,1,NA\n".as_bytes(), &s).unwrap_err();
        assert!(matches!(err, Error::MissingValue { row: 0, .. }));
        let s3 = schema(r#"{"covariates":[{"name":"C","scale":"binary"}]}"#);
        let err = load_dataset("y,v,C\n1,1,a\n1,1,b\n1,1,c\n".as_bytes(), &s3).unwrap_err();
        assert!(matches!(err, Error::TooManyLevels { .. }));
    }

    #[test]
    fn standardize_symmetric_and_binary() {
        let ds = MetaDataset::from_columns(
            &[0.0, 0.0, 0.0],
            &[1.0, 1.0, 1.0],
            &[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 1.0]],
            vec![CovariateMeta::metric("a"), CovariateMeta::binary("b")],
        )
        .unwrap();
        let st = standardize(&ds).unwrap();
        assert_eq!(st.column(0), vec![-1.0, 0.0, 1.0]);
        assert_eq!(st.column(1), vec![0.0, 1.0, 1.0]);
        assert_eq!(
            st.covariates()[0].standardization,
            Some(Standardization { mean: 2.0, sd: 1.0 })
        );
    }

    #[test]
    fn standardize_rejects_constant() {
        let ds = MetaDataset::from_columns(
            &[0.0, 0.0],
            &[1.0, 1.0],
            &[vec![4.0, 4.0]],
            vec![CovariateMeta::metric("c")],
        )
        .unwrap();
        assert_eq!(standardize(&ds).unwrap_err(), Error::ZeroVariance("c".into()));
    }

    fn small_ds() -> MetaDataset {
        MetaDataset::from_columns(
            &[0.1, 0.2, 0.3, 0.4],
            &[1.0, 1.0, 1.0, 1.0],
            &[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 2.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]],
            vec![
                CovariateMeta::metric("Time"),
                CovariateMeta::metric("Age"),
                CovariateMeta::binary("Disc"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn intercept_only_design() {
        let x = build_design(&small_ds(), &ModelSpec::empty()).unwrap();
        assert_eq!(x.cols(), 1);
        assert!(x.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn interaction_column_is_product() {
        let ds = small_ds();
        let spec = ModelSpec::new([0, 1], [(1, 0)]).unwrap();
        let x = build_design(&ds, &spec).unwrap();
        assert_eq!(x.names, vec!["(Intercept)", "Time", "Age", "Time:Age"]);
        for i in 0..ds.k() {
            assert_eq!(x.values[(i, 3)], x.values[(i, 1)] * x.values[(i, 2)]);
        }
    }

    #[test]
    fn full_six_covariate_model_has_22_columns() {
        let cols: Vec<Vec<f64>> = (0..6).map(|j| vec![j as f64, 1.0, 2.0]).collect();
        let metas = (0..6).map(|j| CovariateMeta::metric(format!("x{j}"))).collect();
        let ds = MetaDataset::from_columns(&[0.0; 3], &[1.0; 3], &cols, metas).unwrap();
        let spec = ModelSpec::new(0..6, all_pairs(6)).unwrap();
        assert_eq!(build_design(&ds, &spec).unwrap().cols(), 22);
    }

    #[test]
    fn design_errors() {
        let ds = small_ds();
        let open = ModelSpec {
            mains: [0].into(),
            interactions: [(0, 1)].into(),
        };
        assert_eq!(build_design(&ds, &open).unwrap_err(), Error::MarginalityViolation(0, 1));
        let oob = ModelSpec::new([7], []).unwrap();
        assert!(matches!(build_design(&ds, &oob), Err(Error::IndexOutOfRange { index: 7, .. })));
    }

    #[test]
    fn admissible_counts() {
        assert_eq!(count_admissible_models(0).unwrap(), BigUint::from(1u32));
        assert_eq!(count_admissible_models(1).unwrap(), BigUint::from(2u32));
        assert_eq!(count_admissible_models(2).unwrap(), BigUint::from(5u32));
        assert_eq!(count_admissible_models(3).unwrap(), BigUint::from(18u32));
        assert!(count_admissible_models(20).is_ok());
        assert_eq!(count_admissible_models(21).unwrap_err(), Error::Overflow(21));
    }

    #[test]
    fn closed_adds_mains() {
        let s = ModelSpec::closed([], [(3, 1)]).unwrap();
        assert_eq!(s.mains, [1, 3].into());
        assert_eq!(s.interactions, [(1, 3)].into());
        assert_eq!(s.m(), 4);
        assert_eq!(s.interaction_column((3, 1)), Some(3));
    }
}
