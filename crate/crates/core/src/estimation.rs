//! Random effects meta-regression fits.
//!
//! Coefficients are weighted least squares estimates at a plugged-in `tau2`,
//! which comes from REML, DerSimonian-Laird or a fixed value. Inference uses
//! the Hartung-Knapp-Sidik-Jonkman covariance with `k - m` degrees of freedom.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{build_design, DesignMatrix, MetaDataset, ModelSpec, NamedSpec};
use crate::dist::t_two_sided_p;
use crate::error::{Error, Result};

/// Largest condition number of `X'WX` accepted before a design counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tau2Method {
    Reml,
    Dl,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tau2_method: Tau2Method,
    pub max_iter: usize,
    pub reml_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tau2_method: Tau2Method::Reml,
            max_iter: 1000,
            reml_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau2Estimate {
    pub tau2: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub sigma: DMatrix<f64>,
    pub tau2: f64,
    /// Unrestricted log-likelihood at `(beta, tau2)`.
    pub loglik: f64,
    pub m: usize,
    pub k: usize,
    pub converged: bool,
    /// Largest standard error over the non-intercept coefficients.
    pub max_se: f64,
}

impl FitResult {
    pub fn se(&self) -> Vec<f64> {
        (0..self.m).map(|j| self.sigma[(j, j)].max(0.0).sqrt()).collect()
    }

    pub fn df(&self) -> usize {
        self.k - self.m
    }

    pub fn summary(&self) -> FitSummary {
        let se = self.se();
        let mut beta = Map::new();
        let mut se_map = Map::new();
        for (j, name) in self.names.iter().enumerate() {
            beta.insert(name.clone(), Value::from(self.beta[j]));
            se_map.insert(name.clone(), Value::from(se[j]));
        }
        let covariates = covariate_names(&self.names, &self.spec);
        FitSummary {
            spec: self.spec.named(&covariates),
            beta,
            se: se_map,
            tau2: self.tau2,
            loglik: self.loglik,
            converged: self.converged,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("fit summary serializes")
    }
}

// Recovers covariate names from design column names so `summary` does not
// need the dataset.
fn covariate_names(cols: &[String], spec: &ModelSpec) -> Vec<String> {
    let p = spec
        .mains
        .iter()
        .copied()
        .max()
        .map(|x| x + 1)
        .unwrap_or(0);
    let mut names = vec![String::new(); p];
    for (i, &j) in spec.mains.iter().enumerate() {
        names[j] = cols[1 + i].clone();
    }
    names
}

/// JSON form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub spec: NamedSpec,
    pub beta: Map<String, Value>,
    pub se: Map<String, Value>,
    pub tau2: f64,
    pub loglik: f64,
    pub converged: bool,
}

pub(crate) fn weights(v: &[f64], tau2: f64) -> Vec<f64> {
    v.iter().map(|&vi| 1.0 / (vi + tau2)).collect()
}

/// Weighted least squares pieces at fixed weights.
pub(crate) struct Wls {
    pub xtwx: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    pub beta: DVector<f64>,
    /// `r'Wr` with `r = y - X beta`.
    pub wrss: f64,
}

impl Wls {
    pub fn new(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<Self> {
        let (k, m) = x.shape();
        let mut xtwx = DMatrix::zeros(m, m);
        let mut xtwy = DVector::zeros(m);
        for i in 0..k {
            let wi = w[i];
            for a in 0..m {
                let xa = x[(i, a)] * wi;
                xtwy[a] += xa * y[i];
                for b in 0..=a {
                    xtwx[(a, b)] += xa * x[(i, b)];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        let chol = Cholesky::new(xtwx.clone()).ok_or(Error::SingularDesign {
            condition: f64::INFINITY,
        })?;
        let beta = chol.solve(&xtwy);
        let mut wrss = 0.0;
        for i in 0..k {
            let r = y[i] - x.row(i).transpose().dot(&beta);
            wrss += w[i] * r * r;
        }
        Ok(Self {
            xtwx,
            chol,
            beta,
            wrss,
        })
    }

    pub fn condition(&self) -> f64 {
        let eig = SymmetricEigen::new(self.xtwx.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn check_condition(&self) -> Result<()> {
        let condition = self.condition();
        if condition > MAX_CONDITION || !condition.is_finite() {
            Err(Error::SingularDesign { condition })
        } else {
            Ok(())
        }
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

fn check_dims(ds: &MetaDataset, x: &DesignMatrix) -> Result<()> {
    if x.rows() != ds.k() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, dataset has {} studies",
            x.rows(),
            ds.k()
        )));
    }
    Ok(())
}

/// Unrestricted log-likelihood of the random effects meta-regression.
pub fn log_likelihood(ds: &MetaDataset, x: &DesignMatrix, beta: &[f64], tau2: f64) -> Result<f64> {
    check_dims(ds, x)?;
    if beta.len() != x.cols() {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {}, design has {} columns",
            beta.len(),
            x.cols()
        )));
    }
    if !(tau2 >= 0.0) {
        return Err(Error::InvalidOption(format!("tau2 must be >= 0, got {tau2}")));
    }
    let b = DVector::from_column_slice(beta);
    let mut ll = -0.5 * ds.k() as f64 * (2.0 * std::f64::consts::PI).ln();
    for (i, s) in ds.studies().iter().enumerate() {
        let var = s.v + tau2;
        let r = s.y - x.values.row(i).transpose().dot(&b);
        ll -= 0.5 * (var.ln() + r * r / var);
    }
    Ok(ll)
}

/// WLS / ML coefficients at fixed `tau2`.
pub fn fit_beta(ds: &MetaDataset, x: &DesignMatrix, tau2: f64) -> Result<Vec<f64>> {
    check_dims(ds, x)?;
    let wls = Wls::new(&x.values, &ds.y(), &weights(&ds.v(), tau2))?;
    wls.check_condition()?;
    Ok(wls.beta.iter().copied().collect())
}

/// Restricted log-likelihood in profile form, `l(beta_hat(tau2), tau2) - 0.5 ln|X'WX|`.
pub fn restricted_log_likelihood(ds: &MetaDataset, x: &DesignMatrix, tau2: f64) -> Result<f64> {
    check_dims(ds, x)?;
    reml_objective(&x.values, &ds.y(), &ds.v(), tau2)
}

fn reml_objective(x: &DMatrix<f64>, y: &[f64], v: &[f64], tau2: f64) -> Result<f64> {
    let w = weights(v, tau2);
    let wls = Wls::new(x, y, &w)?;
    let k = y.len() as f64;
    let log_var: f64 = v.iter().map(|vi| (vi + tau2).ln()).sum();
    Ok(-0.5 * k * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_var - 0.5 * wls.wrss - 0.5 * wls.log_det())
}

/// Upper end of the REML search interval: ten times the sample variance of `y`.
pub fn tau2_upper_bound(y: &[f64]) -> f64 {
    let k = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mean = y.iter().sum::<f64>() / k;
    10.0 * y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
}

pub fn estimate_tau2(ds: &MetaDataset, x: &DesignMatrix, opts: &FitOptions) -> Result<Tau2Estimate> {
    check_dims(ds, x)?;
    let (k, m) = (ds.k(), x.cols());
    if k <= m {
        return Err(Error::InsufficientDf { k, m });
    }
    match opts.tau2_method {
        Tau2Method::Fixed(t) => {
            if !(t >= 0.0) {
                return Err(Error::InvalidOption(format!("fixed tau2 must be >= 0, got {t}")));
            }
            Ok(Tau2Estimate {
                tau2: t,
                converged: true,
                iterations: 0,
            })
        }
        Tau2Method::Dl => Ok(Tau2Estimate {
            tau2: tau2_dl(&x.values, &ds.y(), &ds.v())?,
            converged: true,
            iterations: 0,
        }),
        Tau2Method::Reml => tau2_reml(&x.values, &ds.y(), &ds.v(), opts),
    }
}

/// DerSimonian-Laird moment estimator generalized to meta-regression.
pub(crate) fn tau2_dl(x: &DMatrix<f64>, y: &[f64], v: &[f64]) -> Result<f64> {
    let (k, m) = x.shape();
    if k <= m {
        return Err(Error::InsufficientDf { k, m });
    }
    let w0: Vec<f64> = v.iter().map(|vi| 1.0 / vi).collect();
    let wls = Wls::new(x, y, &w0)?;
    let q = wls.wrss;
    // c = tr(W) - tr((X'WX)^-1 X'W^2 X)
    let mut xtw2x = DMatrix::zeros(m, m);
    for i in 0..k {
        let w2 = w0[i] * w0[i];
        for a in 0..m {
            for b in 0..m {
                xtw2x[(a, b)] += w2 * x[(i, a)] * x[(i, b)];
            }
        }
    }
    let trace_w: f64 = w0.iter().sum();
    let c = trace_w - wls.chol.solve(&xtw2x).trace();
    if !(c > 0.0) {
        return Ok(0.0);
    }
    Ok(((q - (k - m) as f64) / c).max(0.0))
}

const GOLDEN: f64 = 0.381_966_011_250_105_1;
const SCAN_POINTS: usize = 16;

/// Maximizes the restricted likelihood on `[0, tau2_max]`: a coarse scan
/// brackets the best grid point, then Brent's method refines inside it.
fn tau2_reml(x: &DMatrix<f64>, y: &[f64], v: &[f64], opts: &FitOptions) -> Result<Tau2Estimate> {
    let upper = tau2_upper_bound(y);
    let f = |t: f64| reml_objective(x, y, v, t).unwrap_or(f64::NEG_INFINITY);
    // Fails early when X'WX is singular.
    let at_zero = reml_objective(x, y, v, 0.0)?;
    if !(upper > 0.0) {
        return Ok(Tau2Estimate {
            tau2: 0.0,
            converged: true,
            iterations: 0,
        });
    }

    let grid: Vec<f64> = (0..=SCAN_POINTS)
        .map(|i| upper * i as f64 / SCAN_POINTS as f64)
        .collect();
    let values: Vec<f64> = grid
        .iter()
        .enumerate()
        .map(|(i, &t)| if i == 0 { at_zero } else { f(t) })
        .collect();
    let best = values
        .iter()
        .enumerate()
        .fold(0, |b, (i, &val)| if val > values[b] { i } else { b });
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(SCAN_POINTS)];

    let (t_opt, f_opt, iterations, converged) = brent_max(f, lo, hi, opts.reml_tol, opts.max_iter);
    let (tau2, _) = if at_zero >= f_opt { (0.0, at_zero) } else { (t_opt, f_opt) };
    Ok(Tau2Estimate {
        tau2,
        converged,
        iterations,
    })
}

/// Brent's golden-section / parabolic search for a maximum on `[a, b]`.
/// Returns `(x, f(x), iterations, converged)`.
pub(crate) fn brent_max<F: Fn(f64) -> f64>(
    f: F,
    mut a: f64,
    mut b: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, f64, usize, bool) {
    let g = |t: f64| -f(t);
    let sqrt_eps = f64::EPSILON.sqrt();
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = g(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for iter in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = sqrt_eps * x.abs() + tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return (x, -fx, iter, true);
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = g(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, -fx, max_iter, false)
}

/// HKSJ covariance `s^2 (X'WX)^-1`, `s^2 = r'Wr / (k - m)`.
pub fn hksj_covariance(ds: &MetaDataset, x: &DesignMatrix, tau2: f64) -> Result<DMatrix<f64>> {
    check_dims(ds, x)?;
    let (k, m) = (ds.k(), x.cols());
    if k <= m {
        return Err(Error::InsufficientDf { k, m });
    }
    let wls = Wls::new(&x.values, &ds.y(), &weights(&ds.v(), tau2))?;
    wls.check_condition()?;
    Ok(hksj_from(&wls, k, m))
}

fn hksj_from(wls: &Wls, k: usize, m: usize) -> DMatrix<f64> {
    let s2 = wls.wrss / (k - m) as f64;
    let mut sigma = wls.inverse() * s2;
    // exact symmetry
    for a in 0..m {
        for b in 0..a {
            let avg = 0.5 * (sigma[(a, b)] + sigma[(b, a)]);
            sigma[(a, b)] = avg;
            sigma[(b, a)] = avg;
        }
    }
    sigma
}

/// Full fit of `spec`: tau2, coefficients, HKSJ covariance and log-likelihood.
pub fn fit(ds: &MetaDataset, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    spec.check_marginality()?;
    let x = build_design(ds, spec)?;
    fit_design(ds, spec, &x, opts)
}

pub(crate) fn fit_design(
    ds: &MetaDataset,
    spec: &ModelSpec,
    x: &DesignMatrix,
    opts: &FitOptions,
) -> Result<FitResult> {
    let (k, m) = (ds.k(), x.cols());
    if k <= m {
        return Err(Error::InsufficientDf { k, m });
    }
    let y = ds.y();
    let est = estimate_tau2(ds, x, opts)?;
    let w = weights(&ds.v(), est.tau2);
    let wls = Wls::new(&x.values, &y, &w)?;
    wls.check_condition()?;
    let sigma = hksj_from(&wls, k, m);
    let beta: Vec<f64> = wls.beta.iter().copied().collect();
    let loglik = log_likelihood(ds, x, &beta, est.tau2)?;
    let max_se = (1..m)
        .map(|j| sigma[(j, j)].max(0.0).sqrt())
        .fold(0.0, f64::max);
    Ok(FitResult {
        spec: spec.clone(),
        names: x.names.clone(),
        beta,
        sigma,
        tau2: est.tau2,
        loglik,
        m,
        k,
        converged: est.converged,
        max_se,
    })
}

/// Two-sided Wald t-test p-value for coefficient `j` with `k - m` df.
pub fn wald_pvalue(fit: &FitResult, j: usize) -> Result<f64> {
    if j >= fit.m {
        return Err(Error::IndexOutOfRange { index: j, p: fit.m });
    }
    if fit.k <= fit.m {
        return Err(Error::InsufficientDf { k: fit.k, m: fit.m });
    }
    let var = fit.sigma[(j, j)];
    if !(var > 0.0) {
        return Err(Error::ZeroStandardError(j));
    }
    let t = fit.beta[j] / var.sqrt();
    Ok(t_two_sided_p(t, fit.df() as f64))
}
