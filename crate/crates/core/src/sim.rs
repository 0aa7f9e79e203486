//! Plasmode simulation: covariate rows are resampled from a real (or
//! surrogate) base dataset and only the outcome is synthesized.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{all_pairs, mean_sd, pair, CovariateMeta, MetaDataset, ModelSpec, RawTable, Scale, Schema, Standardization, StudyRecord};
use crate::ensemble::{fit_ensemble, selection_matrix, threshold_select, EnsembleOptions};
use crate::error::{Error, Result};
use crate::linear_select::{forward_ic_select, forward_test_select, univariate_select, Criterion, SelectOptions};
use crate::metacart::{fit_pruned_tree, tree_to_spec, PruneRule, TreeControls, TreeMode};
use crate::seed;

/// Base covariate table with possibly missing cells and known sample sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct PlasmodeBase {
    pub covariates: Vec<CovariateMeta>,
    /// `columns[j][i]`: covariate `j` of study `i`.
    pub columns: Vec<Vec<Option<f64>>>,
    pub n: Vec<u32>,
}

impl PlasmodeBase {
    pub fn new(covariates: Vec<CovariateMeta>, columns: Vec<Vec<Option<f64>>>, n: Vec<u32>) -> Result<Self> {
        if covariates.len() != columns.len() || columns.iter().any(|c| c.len() != n.len()) {
            return Err(Error::DimensionMismatch("base columns differ in length".into()));
        }
        if let Some(i) = n.iter().position(|&v| v == 0) {
            return Err(Error::InvalidSampleSize {
                row: i,
                value: "0".into(),
            });
        }
        Ok(Self { covariates, columns, n })
    }

    /// Reads a base CSV: an `n` column plus the schema's covariates. Outcome
    /// columns, if present, are ignored.
    pub fn load<R: Read>(source: R, schema: &Schema) -> Result<Self> {
        let table = RawTable::read(source)?;
        let n_col = table.column_index("n")?;
        let n = (0..table.rows.len())
            .map(|r| table.sample_size(r, n_col)?.ok_or(Error::MissingSampleSize(r)))
            .collect::<Result<Vec<_>>>()?;
        let (metas, columns) = table.covariates(schema)?;
        Self::new(metas, columns, n)
    }

    pub fn from_dataset(ds: &MetaDataset) -> Result<Self> {
        let n = ds
            .studies()
            .iter()
            .enumerate()
            .map(|(i, s)| s.n.ok_or(Error::MissingSampleSize(i)))
            .collect::<Result<Vec<_>>>()?;
        let columns = (0..ds.p()).map(|j| ds.column(j).into_iter().map(Some).collect()).collect();
        Self::new(ds.covariates().to_vec(), columns, n)
    }

    pub fn k(&self) -> usize {
        self.n.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    pub fn missing_counts(&self) -> Vec<usize> {
        self.columns.iter().map(|c| c.iter().filter(|v| v.is_none()).count()).collect()
    }
}

/// Replaces each missing cell by an observed value of the same column drawn
/// uniformly at random.
pub fn hot_deck_impute<R: Rng + ?Sized>(base: &PlasmodeBase, rng: &mut R) -> Result<PlasmodeBase> {
    let mut out = base.clone();
    for (j, col) in out.columns.iter_mut().enumerate() {
        let observed: Vec<f64> = col.iter().flatten().copied().collect();
        if observed.len() == col.len() {
            continue;
        }
        if observed.is_empty() {
            return Err(Error::AllMissingColumn(base.covariates[j].name.clone()));
        }
        for cell in col.iter_mut().filter(|c| c.is_none()) {
            *cell = Some(observed[rng.random_range(0..observed.len())]);
        }
    }
    Ok(out)
}

/// Imputed, standardized base ready for resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBase {
    pub covariates: Vec<CovariateMeta>,
    /// Row-major covariates.
    pub x: Vec<Vec<f64>>,
    pub n: Vec<u32>,
}

impl PreparedBase {
    pub fn k(&self) -> usize {
        self.n.len()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.covariates
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }
}

/// Hot-deck imputation followed by a single standardization of the metric columns.
pub fn prepare_base(base: &PlasmodeBase, seed: u64) -> Result<PreparedBase> {
    let imputed = hot_deck_impute(base, &mut seed::rng(seed))?;
    let mut covariates = imputed.covariates.clone();
    let mut columns: Vec<Vec<f64>> = imputed
        .columns
        .iter()
        .map(|c| c.iter().map(|v| v.expect("imputed")).collect())
        .collect();
    for (j, col) in columns.iter_mut().enumerate() {
        if covariates[j].scale != Scale::Metric {
            continue;
        }
        let (mean, sd) = mean_sd(col);
        if col.len() < 2 || !(sd > 0.0) {
            return Err(Error::ZeroVariance(covariates[j].name.clone()));
        }
        for v in col.iter_mut() {
            *v = (*v - mean) / sd;
        }
        covariates[j].standardization = Some(Standardization { mean, sd });
    }
    let k = imputed.k();
    let x = (0..k).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    Ok(PreparedBase {
        covariates,
        x,
        n: imputed.n,
    })
}

/// Names of the seven simulation covariates, in base column order.
pub const SIM_COVARIATES: [&str; 7] = ["Time", "Trial", "Male", "Age", "SBP", "Multi", "Disc"];

/// Schema of the simulation base (binary levels coded 0/1).
pub fn sim_schema() -> Schema {
    Schema::from_json(
        r#"{"covariates": [
            {"name": "Time", "scale": "metric"},
            {"name": "Trial", "scale": "binary", "reference": "0"},
            {"name": "Male", "scale": "metric"},
            {"name": "Age", "scale": "metric"},
            {"name": "SBP", "scale": "metric"},
            {"name": "Multi", "scale": "binary", "reference": "0"},
            {"name": "Disc", "scale": "binary", "reference": "0"}
        ]}"#,
    )
    .expect("static schema")
}

/// Synthetic stand-in for the real base table: 335 studies with the
/// observed covariate ranges, an Age trend over recruitment time, lognormal
/// sample sizes and MCAR gaps in Male, Age, Disc and SBP.
pub fn surrogate_base(seed: u64) -> PlasmodeBase {
    const K: usize = 335;
    let mut rng = seed::rng(seed);
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let size = LogNormal::new(400f64.ln(), 0.9).expect("lognormal");
    let mut cols = vec![Vec::with_capacity(K); 7];
    let mut n = Vec::with_capacity(K);
    for _ in 0..K {
        let time = rng.random_range(1981..=2014) as f64;
        let trial = (rng.random::<f64>() < 0.3) as u8 as f64;
        let male = (0.62f64 + 0.12 * z.sample(&mut rng)).clamp(0.075, 0.986);
        let age = (70.0 + 0.15 * (time - 1997.0) + 5.0 * z.sample(&mut rng)).clamp(51.86, 89.0);
        let sbp = 130.0 + 0.2 * (age - 70.0) + 12.0 * z.sample(&mut rng);
        let multi = (rng.random::<f64>() < 0.6) as u8 as f64;
        let disc = (rng.random::<f64>() < 0.4) as u8 as f64;
        for (j, v) in [time, trial, male, age, sbp, multi, disc].into_iter().enumerate() {
            cols[j].push(Some(v));
        }
        n.push((size.sample(&mut rng).round() as u32).max(10));
    }
    // MCAR gaps at the observed missingness rates
    for (j, rate) in [(2, 0.078), (3, 0.113), (6, 0.167), (4, 0.567)] {
        let missing = (rate * K as f64).round() as usize;
        let mut rows: Vec<usize> = (0..K).collect();
        rows.shuffle(&mut rng);
        for &i in &rows[..missing] {
            cols[j][i] = None;
        }
    }
    let covariates = SIM_COVARIATES
        .iter()
        .map(|&name| match name {
            "Trial" | "Multi" | "Disc" => {
                let mut m = CovariateMeta::binary(name);
                m.levels = Some(["0".into(), "1".into()]);
                m
            }
            _ => CovariateMeta::metric(name),
        })
        .collect();
    PlasmodeBase::new(covariates, cols, n).expect("consistent surrogate")
}

/// Writes a base table as CSV (`n` plus covariates, `NA` for gaps).
pub fn write_base_csv(base: &PlasmodeBase) -> String {
    let mut out = String::from("n");
    for c in &base.covariates {
        out.push(',');
        out.push_str(&c.name);
    }
    out.push('\n');
    for i in 0..base.k() {
        out.push_str(&base.n[i].to_string());
        for col in &base.columns {
            out.push(',');
            match col[i] {
                Some(v) => out.push_str(&v.to_string()),
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SettingId {
    Linear(u8),
    Nonlinear(u8),
}

impl fmt::Display for SettingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SettingId::Linear(i) => write!(f, "{i}"),
            SettingId::Nonlinear(i) => write!(f, "N{i}"),
        }
    }
}

impl FromStr for SettingId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidOption(format!("unknown setting `{s}`"));
        let (nonlinear, digits) = match s.strip_prefix('N') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let i: u8 = digits.parse().map_err(|_| bad())?;
        match (nonlinear, i) {
            (false, 1..=14) => Ok(SettingId::Linear(i)),
            (true, 1..=6) => Ok(SettingId::Nonlinear(i)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for SettingId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SettingId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinear {
    /// `beta * x_Time * x_Age * 1{x_Age > mean(x_Age)}`
    TimeAgeIndicator,
    /// `beta * x_Disc * 1{x_Time > mean(x_Time)}`
    TimeDiscIndicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgmSetting {
    pub id: SettingId,
    pub intercept: f64,
    pub me_coefs: Vec<(String, f64)>,
    pub ie_coefs: Vec<((String, String), f64)>,
    pub nonlinear: Option<Nonlinear>,
}

const ALL_MES: [(&str, f64); 7] = [
    ("Time", -0.5),
    ("Trial", -0.5),
    ("Male", -0.5),
    ("Age", 0.5),
    ("SBP", 0.5),
    ("Multi", -0.5),
    ("Disc", -0.5),
];

impl DgmSetting {
    pub fn get(id: SettingId) -> Self {
        let (linear, nonlinear) = match id {
            SettingId::Linear(i) => (i, None),
            SettingId::Nonlinear(i @ 1..=3) => (i + 2, Some(Nonlinear::TimeAgeIndicator)),
            SettingId::Nonlinear(i) => (i + 2, Some(Nonlinear::TimeDiscIndicator)),
        };
        let only = |names: &[&str]| -> Vec<(&str, f64)> {
            ALL_MES.iter().copied().filter(|(n, _)| names.contains(n)).collect()
        };
        let age_time = (("Age", "Time"), -0.5);
        let disc_time = (("Disc", "Time"), -0.5);
        let disc_multi = (("Disc", "Multi"), 0.5);
        let (mes, ies): (Vec<(&str, f64)>, Vec<((&str, &str), f64)>) = match linear {
            1 => (vec![], vec![]),
            2 => (ALL_MES.to_vec(), vec![]),
            3 => (vec![], vec![age_time]),
            4 => (only(&["Time", "Age"]), vec![age_time]),
            5 => (ALL_MES.to_vec(), vec![age_time]),
            6 => (vec![], vec![disc_time]),
            7 => (only(&["Time", "Disc"]), vec![disc_time]),
            8 => (ALL_MES.to_vec(), vec![disc_time]),
            9 => (vec![], vec![disc_multi]),
            10 => (only(&["Trial", "Multi"]), vec![disc_multi]),
            11 => (ALL_MES.to_vec(), vec![disc_multi]),
            12 => (vec![], vec![age_time, disc_time, disc_multi]),
            13 => (only(&["Time", "Trial", "Age", "Multi", "Disc"]), vec![age_time, disc_time, disc_multi]),
            14 => (ALL_MES.to_vec(), vec![age_time, disc_time, disc_multi]),
            _ => unreachable!("setting ids are validated"),
        };
        DgmSetting {
            id,
            intercept: -1.0,
            me_coefs: mes.into_iter().map(|(n, b)| (n.to_string(), b)).collect(),
            ie_coefs: ies
                .into_iter()
                .map(|((a, b), c)| ((a.to_string(), b.to_string()), c))
                .collect(),
            nonlinear,
        }
    }

    pub fn all_linear() -> Vec<SettingId> {
        (1..=14).map(SettingId::Linear).collect()
    }

    pub fn all_nonlinear() -> Vec<SettingId> {
        (1..=6).map(SettingId::Nonlinear).collect()
    }

    /// True interaction pairs as base column indices.
    pub fn truth_pairs(&self, base: &PreparedBase) -> Result<BTreeSet<(usize, usize)>> {
        self.ie_coefs
            .iter()
            .map(|((a, b), _)| Ok(pair(base.index_of(a)?, base.index_of(b)?)))
            .collect()
    }

    /// Marginality closure of the nonzero effects.
    pub fn truth(&self, base: &PreparedBase) -> Result<ModelSpec> {
        let mains = self
            .me_coefs
            .iter()
            .filter(|(_, b)| *b != 0.0)
            .map(|(n, _)| base.index_of(n))
            .collect::<Result<Vec<_>>>()?;
        ModelSpec::closed(mains, self.truth_pairs(base)?)
    }
}

/// A synthesized meta-analysis and the effects behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub ds: MetaDataset,
    pub truth: ModelSpec,
    pub theta: Vec<f64>,
}

pub fn invlogit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub const P_TRUE_BOUNDS: (f64, f64) = (0.01, 0.99);

pub fn make_replicate<R: Rng + ?Sized>(base: &PreparedBase, setting: &DgmSetting, k: usize, tau2: f64, rng: &mut R) -> Result<Replicate> {
    generate(base, setting, k, tau2, rng, true)
}

/// Like [`make_replicate`] but with `y = theta` (no sampling error).
pub fn make_replicate_noise_free<R: Rng + ?Sized>(base: &PreparedBase, setting: &DgmSetting, k: usize, tau2: f64, rng: &mut R) -> Result<Replicate> {
    generate(base, setting, k, tau2, rng, false)
}

fn generate<R: Rng + ?Sized>(base: &PreparedBase, setting: &DgmSetting, k: usize, tau2: f64, rng: &mut R, noise: bool) -> Result<Replicate> {
    if k < 1 {
        return Err(Error::InvalidOption("k must be >= 1".into()));
    }
    if !(tau2 >= 0.0) {
        return Err(Error::InvalidOption(format!("tau2 must be >= 0, got {tau2}")));
    }
    let rows: Vec<usize> = (0..k).map(|_| rng.random_range(0..base.k())).collect();
    let x: Vec<&Vec<f64>> = rows.iter().map(|&r| &base.x[r]).collect();

    let mes = setting
        .me_coefs
        .iter()
        .map(|(n, b)| Ok((base.index_of(n)?, *b)))
        .collect::<Result<Vec<_>>>()?;
    let ies = setting
        .ie_coefs
        .iter()
        .map(|((a, b), c)| Ok((base.index_of(a)?, base.index_of(b)?, *c)))
        .collect::<Result<Vec<_>>>()?;
    let time = base.index_of("Time");
    let replicate_mean = |j: usize| x.iter().map(|r| r[j]).sum::<f64>() / k as f64;
    let thresholds = match setting.nonlinear {
        Some(Nonlinear::TimeAgeIndicator) => Some(replicate_mean(base.index_of("Age")?)),
        Some(Nonlinear::TimeDiscIndicator) => Some(replicate_mean(time.clone()?)),
        None => None,
    };

    let sd = tau2.sqrt();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut theta = Vec::with_capacity(k);
    let mut studies = Vec::with_capacity(k);
    for (i, xi) in x.iter().enumerate() {
        let mut eta = setting.intercept;
        for &(j, b) in &mes {
            eta += b * xi[j];
        }
        for &(a, b, c) in &ies {
            eta += c * match (setting.nonlinear, thresholds) {
                (Some(Nonlinear::TimeAgeIndicator), Some(t)) => {
                    let (age, time) = (base.index_of("Age")?, base.index_of("Time")?);
                    xi[time] * xi[age] * if xi[age] > t { 1.0 } else { 0.0 }
                }
                (Some(Nonlinear::TimeDiscIndicator), Some(t)) => {
                    let (disc, time) = (base.index_of("Disc")?, base.index_of("Time")?);
                    xi[disc] * if xi[time] > t { 1.0 } else { 0.0 }
                }
                _ => xi[a] * xi[b],
            };
        }
        let th = eta + sd * unit.sample(rng);
        let p = invlogit(th).clamp(P_TRUE_BOUNDS.0, P_TRUE_BOUNDS.1);
        let n = base.n[rows[i]];
        let v = 1.0 / (n as f64 * p * (1.0 - p));
        let y = if noise { th + v.sqrt() * unit.sample(rng) } else { th };
        theta.push(th);
        studies.push(StudyRecord {
            y,
            v,
            n: Some(n),
            x: (*xi).clone(),
        });
    }
    Ok(Replicate {
        ds: MetaDataset::new(studies, base.covariates.clone())?,
        truth: setting.truth(base)?,
        theta,
    })
}

/// Type I and Type II error of an interaction selection.
pub fn error_rates(
    selected: &ModelSpec,
    truth: &BTreeSet<(usize, usize)>,
    candidates: &BTreeSet<(usize, usize)>,
) -> (f64, Option<f64>) {
    let negatives = candidates.difference(truth).count();
    let false_pos = selected.interactions.difference(truth).filter(|q| candidates.contains(q)).count();
    let type1 = if negatives == 0 { 0.0 } else { false_pos as f64 / negatives as f64 };
    let type2 = (!truth.is_empty()).then(|| truth.difference(&selected.interactions).count() as f64 / truth.len() as f64);
    (type1, type2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    UniTest,
    MultiTest,
    Aicc,
    Bic,
    Femrt,
    Remrt,
    Sfemrt,
    Sremrt,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::UniTest,
        Method::MultiTest,
        Method::Aicc,
        Method::Bic,
        Method::Femrt,
        Method::Remrt,
        Method::Sfemrt,
        Method::Sremrt,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::UniTest => "Uni-test",
            Method::MultiTest => "Multi-test",
            Method::Aicc => "AICc",
            Method::Bic => "BIC",
            Method::Femrt => "FEmrt",
            Method::Remrt => "REmrt",
            Method::Sfemrt => "S-FEmrt",
            Method::Sremrt => "S-REmrt",
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Method::UniTest => "uni_test",
            Method::MultiTest => "multi_test",
            Method::Aicc => "aicc",
            Method::Bic => "bic",
            Method::Femrt => "femrt",
            Method::Remrt => "remrt",
            Method::Sfemrt => "sfemrt",
            Method::Sremrt => "sremrt",
        }
    }

    pub fn is_tree(&self) -> bool {
        matches!(self, Method::Femrt | Method::Remrt | Method::Sfemrt | Method::Sremrt)
    }

    pub fn is_ensemble(&self) -> bool {
        matches!(self, Method::Sfemrt | Method::Sremrt)
    }

    fn code(&self) -> u64 {
        Method::ALL.iter().position(|m| m == self).expect("listed") as u64
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.key() == norm)
            .ok_or_else(|| Error::InvalidOption(format!("unknown method `{s}`")))
    }
}

/// Settings shared by every method run inside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub select: SelectOptions,
    pub controls: TreeControls,
    /// Bootstrap trees per ensemble.
    pub ensemble_b: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            select: SelectOptions::default(),
            controls: TreeControls::default(),
            ensemble_b: 100,
        }
    }
}

/// Selected specs of one method on one dataset; ensembles give one spec per lambda.
pub fn run_method(ds: &MetaDataset, method: Method, cfg: &MethodConfig, lambdas: &[f64], seed: u64) -> Result<Vec<ModelSpec>> {
    let select = |criterion: Option<Criterion>| {
        let mut opts = cfg.select;
        if let Some(c) = criterion {
            opts.criterion = c;
        }
        opts
    };
    let single = |spec: ModelSpec| Ok(vec![spec]);
    match method {
        Method::UniTest => single(univariate_select(ds, &select(None))?.spec),
        Method::MultiTest => single(forward_test_select(ds, &select(None))?.spec),
        Method::Aicc => single(forward_ic_select(ds, &select(Some(Criterion::Aicc)))?.spec),
        Method::Bic => single(forward_ic_select(ds, &select(Some(Criterion::Bic)))?.spec),
        Method::Femrt | Method::Remrt => {
            let mode = if method == Method::Femrt { TreeMode::Fe } else { TreeMode::Re };
            let tree = fit_pruned_tree(ds, mode, &cfg.controls, PruneRule::default_for(mode, ds.k()), seed)?;
            single(tree_to_spec(&tree))
        }
        Method::Sfemrt | Method::Sremrt => {
            let mode = if method == Method::Sfemrt { TreeMode::Fe } else { TreeMode::Re };
            let opts = EnsembleOptions {
                b: cfg.ensemble_b,
                lambda: lambdas.first().copied().unwrap_or(0.5),
                seed,
                controls: cfg.controls,
            };
            let trees = fit_ensemble(ds, mode, &opts)?;
            let a = selection_matrix(&trees, ds.p());
            lambdas.iter().map(|&l| threshold_select(&a, l)).collect()
        }
    }
}

/// Simulation grid definition (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub settings: Vec<SettingId>,
    pub k_values: Vec<usize>,
    pub tau2_values: Vec<f64>,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub lambda_values: Vec<f64>,
    pub master_seed: u64,
    pub method_config: MethodConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            settings: DgmSetting::all_linear(),
            k_values: vec![13, 23, 41, 100],
            tau2_values: vec![0.0, 0.141, 0.195, 0.233, 0.317],
            replications: 100,
            methods: Method::ALL.to_vec(),
            lambda_values: vec![0.5],
            master_seed: 1,
            method_config: MethodConfig::default(),
        }
    }
}

impl GridConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: GridConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidOption(msg.to_string()));
        if self.settings.is_empty() || self.k_values.is_empty() || self.tau2_values.is_empty() || self.methods.is_empty() {
            return bad("grid needs at least one setting, k, tau2 and method");
        }
        if self.replications == 0 {
            return bad("replications must be >= 1");
        }
        if self.k_values.contains(&0) {
            return bad("k values must be >= 1");
        }
        if self.tau2_values.iter().any(|t| !(*t >= 0.0)) {
            return bad("tau2 values must be >= 0");
        }
        if self.methods.iter().any(Method::is_ensemble) {
            if self.lambda_values.is_empty() {
                return bad("ensemble methods need lambda_values");
            }
            if self.lambda_values.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
                return bad("lambda values must lie in (0, 1)");
            }
            if self.method_config.ensemble_b == 0 {
                return bad("ensemble_b must be >= 1");
            }
        }
        self.method_config.controls.validate()
    }

    /// Seed of replicate `rep` in cell (setting, k, tau2).
    pub fn cell_seed(&self, setting: SettingId, k: usize, tau2: f64, rep: usize) -> u64 {
        let code = match setting {
            SettingId::Linear(i) => i as u64,
            SettingId::Nonlinear(i) => 100 + i as u64,
        };
        seed::derive(self.master_seed, &[code, k as u64, tau2.to_bits(), rep as u64])
    }
}

/// Aggregated errors of one (setting, k, tau2, method, lambda) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub setting: SettingId,
    pub k: usize,
    pub tau2: f64,
    pub method: Method,
    pub lambda: Option<f64>,
    pub type1: Option<f64>,
    pub type2: Option<f64>,
    pub n_reps: usize,
    pub n_failed: usize,
    pub mean_selected_ies: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl ErrorReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,k,tau2,method,lambda,type1,type2,n_reps,n_failed,mean_selected_ies,failure\n");
        for r in &self.rows {
            let failure = r.failure.as_deref().unwrap_or("").replace(['"', ',', '\n'], " ");
            out.push_str(&format!(
                "{},{},{:.6},{},{},{},{},{},{},{},{}\n",
                r.setting,
                r.k,
                r.tau2,
                r.method.key(),
                r.lambda.map_or_else(String::new, |l| format!("{l:.6}")),
                fmt_opt(r.type1),
                fmt_opt(r.type2),
                r.n_reps,
                r.n_failed,
                fmt_opt(r.mean_selected_ies),
                failure
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Mean of a rate over the rows passing `filter` (NA rows skipped).
    pub fn mean_of(&self, filter: impl Fn(&ErrorRow) -> bool, rate: impl Fn(&ErrorRow) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| filter(r)).filter_map(&rate).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Default)]
struct Acc {
    type1: f64,
    type2: f64,
    type2_n: usize,
    ies: f64,
    ok: usize,
    failed: usize,
    failure: Option<String>,
}

type CellKey = (usize, usize, usize, usize, usize);

/// Runs every (setting, k, tau2, replicate) job and aggregates errors per
/// method (and lambda for ensembles). Output is identical for a given
/// master seed whatever the thread count.
pub fn run_grid(base: &PreparedBase, config: &GridConfig) -> Result<ErrorReport> {
    config.validate()?;
    let settings: Vec<DgmSetting> = config.settings.iter().map(|&s| DgmSetting::get(s)).collect();
    let candidates: BTreeSet<(usize, usize)> = all_pairs(base.covariates.len()).into_iter().collect();
    let truths = settings
        .iter()
        .map(|s| s.truth_pairs(base))
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for si in 0..settings.len() {
        for ki in 0..config.k_values.len() {
            for ti in 0..config.tau2_values.len() {
                for rep in 0..config.replications {
                    jobs.push((si, ki, ti, rep));
                }
            }
        }
    }

    let outcomes: Vec<Vec<(CellKey, std::result::Result<(f64, Option<f64>, usize), String>)>> = jobs
        .par_iter()
        .map(|&(si, ki, ti, rep)| {
            let (k, tau2) = (config.k_values[ki], config.tau2_values[ti]);
            let seed = config.cell_seed(settings[si].id, k, tau2, rep);
            let mut out = Vec::new();
            let replicate = make_replicate(base, &settings[si], k, tau2, &mut seed::rng(seed));
            for (mi, &method) in config.methods.iter().enumerate() {
                let lambdas: &[f64] = if method.is_ensemble() { &config.lambda_values } else { &[0.5] };
                let specs = replicate.as_ref().map_err(|e| e.to_string()).and_then(|r| {
                    run_method(&r.ds, method, &config.method_config, lambdas, seed::derive(seed, &[method.code()]))
                        .map_err(|e| e.to_string())
                });
                for li in 0..lambdas.len() {
                    let res = specs.as_ref().map_err(Clone::clone).map(|s| {
                        let (t1, t2) = error_rates(&s[li], &truths[si], &candidates);
                        (t1, t2, s[li].interactions.len())
                    });
                    out.push(((si, ki, ti, mi, li), res));
                }
            }
            out
        })
        .collect();

    let mut cells: BTreeMap<CellKey, Acc> = BTreeMap::new();
    for (key, res) in outcomes.into_iter().flatten() {
        let acc = cells.entry(key).or_default();
        match res {
            Ok((t1, t2, ies)) => {
                acc.ok += 1;
                acc.type1 += t1;
                acc.ies += ies as f64;
                if let Some(t2) = t2 {
                    acc.type2 += t2;
                    acc.type2_n += 1;
                }
            }
            Err(msg) => {
                acc.failed += 1;
                acc.failure.get_or_insert(msg);
            }
        }
    }

    let rows = cells
        .into_iter()
        .map(|((si, ki, ti, mi, li), acc)| {
            let method = config.methods[mi];
            let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
            ErrorRow {
                setting: settings[si].id,
                k: config.k_values[ki],
                tau2: config.tau2_values[ti],
                method,
                lambda: method.is_ensemble().then(|| config.lambda_values[li]),
                type1: mean(acc.type1, acc.ok),
                type2: mean(acc.type2, acc.type2_n),
                n_reps: acc.ok,
                n_failed: acc.failed,
                mean_selected_ies: mean(acc.ies, acc.ok),
                failure: acc.failure,
            }
        })
        .collect();
    Ok(ErrorReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prepared() -> PreparedBase {
        prepare_base(&surrogate_base(5), 6).unwrap()
    }

    #[test]
    fn hot_deck_support() {
        let base = PlasmodeBase::new(
            vec![CovariateMeta::metric("a"), CovariateMeta::metric("b")],
            vec![vec![Some(1.0), None, Some(3.0)], vec![Some(2.0), Some(4.0), Some(6.0)]],
            vec![10, 20, 30],
        )
        .unwrap();
        for s in 0..20 {
            let out = hot_deck_impute(&base, &mut seed::rng(s)).unwrap();
            assert!([Some(1.0), Some(3.0)].contains(&out.columns[0][1]));
            assert_eq!(out.columns[0][0], Some(1.0));
            assert_eq!(out.columns[1], base.columns[1]);
        }
        let empty = PlasmodeBase::new(vec![CovariateMeta::metric("a")], vec![vec![None, None]], vec![1, 2]).unwrap();
        assert_eq!(
            hot_deck_impute(&empty, &mut seed::rng(0)).unwrap_err(),
            Error::AllMissingColumn("a".into())
        );
    }

    #[test]
    fn surrogate_shape() {
        let b = surrogate_base(1);
        assert_eq!(b.k(), 335);
        assert_eq!(b.names(), SIM_COVARIATES);
        assert_eq!(b.missing_counts(), vec![0, 0, 26, 38, 190, 0, 56]);
        let p = prepare_base(&b, 2).unwrap();
        let age = p.index_of("Age").unwrap();
        let mean: f64 = p.x.iter().map(|r| r[age]).sum::<f64>() / p.k() as f64;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn setting_table() {
        let base = prepared();
        let s12 = DgmSetting::get(SettingId::Linear(12));
        let idx = |n: &str| base.index_of(n).unwrap();
        let truth = s12.truth_pairs(&base).unwrap();
        let expect: BTreeSet<_> = [
            pair(idx("Time"), idx("Age")),
            pair(idx("Time"), idx("Disc")),
            pair(idx("Disc"), idx("Multi")),
        ]
        .into();
        assert_eq!(truth, expect);
        assert!(s12.truth(&base).unwrap().is_marginality_closed());
        for id in DgmSetting::all_linear().into_iter().chain(DgmSetting::all_nonlinear()) {
            let s = DgmSetting::get(id);
            assert_eq!(s.intercept, -1.0);
            assert!(s.me_coefs.iter().all(|(_, b)| [-0.5, 0.5].contains(b)));
            assert!(s.ie_coefs.iter().all(|(_, b)| [-0.5, 0.5].contains(b)));
        }
        assert_eq!(DgmSetting::get(SettingId::Nonlinear(2)).me_coefs, DgmSetting::get(SettingId::Linear(4)).me_coefs);
        assert_eq!(DgmSetting::get(SettingId::Nonlinear(5)).ie_coefs, DgmSetting::get(SettingId::Linear(7)).ie_coefs);
        assert_eq!("N4".parse::<SettingId>().unwrap(), SettingId::Nonlinear(4));
        assert!("15".parse::<SettingId>().is_err());
    }

    #[test]
    fn setting_one_variance() {
        let base = prepared();
        let r = make_replicate(&base, &DgmSetting::get(SettingId::Linear(1)), 50, 0.0, &mut seed::rng(3)).unwrap();
        let p = invlogit(-1.0);
        for (s, th) in r.ds.studies().iter().zip(&r.theta) {
            assert_eq!(*th, -1.0);
            let expect = 1.0 / (s.n.unwrap() as f64 * p * (1.0 - p));
            assert!((s.v - expect).abs() <= 1e-15 * expect);
        }
    }

    #[test]
    fn noise_free_refit_recovers_coefficients() {
        let base = prepared();
        let setting = DgmSetting::get(SettingId::Linear(14));
        let r = make_replicate_noise_free(&base, &setting, 100, 0.0, &mut seed::rng(9)).unwrap();
        let truth = r.truth.clone();
        let f = crate::estimation::fit(&r.ds, &truth, &crate::estimation::FitOptions::default()).unwrap();
        let names = r.ds.names();
        let cols = truth.column_names(&names);
        for (c, b) in cols.iter().zip(&f.beta) {
            let expect = if c == "(Intercept)" {
                -1.0
            } else if c.contains(':') {
                setting
                    .ie_coefs
                    .iter()
                    .find(|((a, b), _)| c == &format!("{a}:{b}") || c == &format!("{b}:{a}"))
                    .map(|x| x.1)
                    .unwrap()
            } else {
                setting.me_coefs.iter().find(|(n, _)| n == c).unwrap().1
            };
            assert!((b - expect).abs() < 1e-10, "{c}: {b} vs {expect}");
        }
    }

    #[test]
    fn counting_checks() {
        let c: BTreeSet<_> = all_pairs(7).into_iter().collect();
        assert_eq!(c.len(), 21);
        let truth: BTreeSet<_> = [(0, 3)].into();
        let sel = ModelSpec::closed([], [(0, 3), (1, 2), (4, 5)]).unwrap();
        assert_eq!(error_rates(&sel, &truth, &c), (0.1, Some(0.0)));
        let three: BTreeSet<_> = [(0, 3), (0, 6), (5, 6)].into();
        assert_eq!(error_rates(&ModelSpec::empty(), &three, &c), (0.0, Some(1.0)));
        let exact = ModelSpec::closed([], three.clone()).unwrap();
        assert_eq!(error_rates(&exact, &three, &c), (0.0, Some(0.0)));
        assert_eq!(error_rates(&exact, &BTreeSet::new(), &c).1, None);
    }

    #[test]
    fn grid_seeds_distinct() {
        let mut cfg = GridConfig::default();
        cfg.settings.extend(DgmSetting::all_nonlinear());
        let mut seen = BTreeSet::new();
        for &s in &cfg.settings {
            for &k in &cfg.k_values {
                for &t in &cfg.tau2_values {
                    for rep in 0..cfg.replications {
                        assert!(seen.insert(cfg.cell_seed(s, k, t, rep)));
                    }
                }
            }
        }
        assert_eq!(seen.len(), 20 * 4 * 5 * 100);
    }

    #[test]
    fn smoke_grid_is_deterministic() {
        let base = prepared();
        let cfg = GridConfig {
            settings: vec![SettingId::Linear(1)],
            k_values: vec![13],
            tau2_values: vec![0.0],
            replications: 5,
            methods: vec![Method::UniTest],
            ..GridConfig::default()
        };
        let a = run_grid(&base, &cfg).unwrap();
        assert_eq!(a.rows.len(), 1);
        assert_eq!(a.rows[0].type2, None);
        assert_eq!(a.rows[0].n_reps, 5);
        assert_eq!(a.to_csv(), run_grid(&base, &cfg).unwrap().to_csv());
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(GridConfig::from_json(&json).unwrap(), cfg);
    }
}
