//! Linear selection procedures that respect the marginality principle.
//!
//! * univariate testing: one small model per candidate effect
//! * forward testing: add the most significant candidate while `p < alpha`
//! * forward AICc / BIC: add the candidate with the lowest criterion while it improves
//!
//! An interaction candidate always enters together with any main effect it
//! still lacks. Forward procedures halt when a candidate fit fails to
//! converge or when an accepted model has a standard error above `se_cap`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{all_pairs, pair, MetaDataset, ModelSpec, NamedSpec};
use crate::error::{Error, Result};
use crate::estimation::{fit, wald_pvalue, FitOptions, FitResult, FitSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aicc,
    Bic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    pub alpha: f64,
    pub criterion: Criterion,
    pub se_cap: f64,
    pub fit: FitOptions,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            criterion: Criterion::Aicc,
            se_cap: 100.0,
            fit: FitOptions::default(),
        }
    }
}

impl SelectOptions {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidOption(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.se_cap > 0.0) {
            return Err(Error::InvalidOption(format!("se_cap must be > 0, got {}", self.se_cap)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Candidate {
    Main(usize),
    Interaction(usize, usize),
}

impl Candidate {
    pub fn label(&self, names: &[String]) -> String {
        match *self {
            Candidate::Main(j) => names[j].clone(),
            Candidate::Interaction(a, b) => format!("{}:{}", names[a], names[b]),
        }
    }

    /// Candidate added to `spec`, with any missing main effects.
    fn extend(&self, spec: &ModelSpec) -> ModelSpec {
        let mut out = spec.clone();
        match *self {
            Candidate::Main(j) => {
                out.mains.insert(j);
            }
            Candidate::Interaction(a, b) => {
                out.mains.insert(a);
                out.mains.insert(b);
                out.interactions.insert(pair(a, b));
            }
        }
        out
    }

    fn column(&self, spec: &ModelSpec) -> Option<usize> {
        match *self {
            Candidate::Main(j) => spec.main_column(j),
            Candidate::Interaction(a, b) => spec.interaction_column((a, b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub candidate: Candidate,
    /// p-value (testing) or criterion value; `None` when the candidate fit failed.
    pub score: Option<f64>,
    pub accepted: bool,
    /// Main effects that entered alongside an accepted interaction.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forced: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoCandidate,
    NonConvergence,
    SeExplosion,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub spec: ModelSpec,
    /// Fit of the selected model; `None` if it cannot be refitted.
    pub final_fit: Option<FitResult>,
    pub trace: Vec<TraceStep>,
    pub stopped_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedStep {
    pub step: usize,
    pub candidate: String,
    pub score: Option<f64>,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forced: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// JSON form of a [`SelectionResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub method: String,
    pub spec: NamedSpec,
    pub stopped_reason: StopReason,
    pub fit: Option<FitSummary>,
    pub trace: Vec<NamedStep>,
}

impl SelectionResult {
    pub fn summary(&self, method: &str, names: &[String]) -> SelectionSummary {
        SelectionSummary {
            method: method.to_string(),
            spec: self.spec.named(names),
            stopped_reason: self.stopped_reason,
            fit: self.final_fit.as_ref().map(FitResult::summary),
            trace: self
                .trace
                .iter()
                .map(|s| NamedStep {
                    step: s.step,
                    candidate: s.candidate.label(names),
                    score: s.score,
                    accepted: s.accepted,
                    forced: s.forced.iter().map(|&j| names[j].clone()).collect(),
                    error: s.error.clone(),
                })
                .collect(),
        }
    }

    /// One row per evaluated candidate: `step,candidate,score,accepted`.
    pub fn trace_csv(&self, names: &[String]) -> String {
        let mut out = String::from("step,candidate,score,accepted\n");
        for s in &self.trace {
            let score = s.score.map(|v| format!("{v:.10e}")).unwrap_or_else(|| "NA".into());
            out.push_str(&format!("{},{},{},{}\n", s.step, s.candidate.label(names), score, s.accepted));
        }
        out
    }
}

/// AICc (with `k* = max(k, m + 3)`) or BIC; `m + 1` parameters count `tau2`.
pub fn information_criterion(fit: &FitResult, kind: Criterion) -> Result<f64> {
    let params = (fit.m + 1) as f64;
    match kind {
        Criterion::Aicc => {
            let k_star = fit.k.max(fit.m + 3) as f64;
            let denom = k_star - params - 1.0;
            if denom <= 0.0 {
                return Err(Error::DegenerateCorrection { k: fit.k, m: fit.m });
            }
            Ok(-2.0 * fit.loglik + 2.0 * params * k_star / denom)
        }
        Criterion::Bic => Ok(-2.0 * fit.loglik + params * (fit.k as f64).ln()),
    }
}

const MIN_STUDIES: usize = 3;

fn check_size(ds: &MetaDataset) -> Result<()> {
    if ds.k() <= MIN_STUDIES {
        return Err(Error::TooFewStudies {
            k: ds.k(),
            min: MIN_STUDIES,
        });
    }
    Ok(())
}

fn candidate_pvalue(ds: &MetaDataset, spec: &ModelSpec, cand: Candidate, opts: &FitOptions) -> Result<(f64, FitResult)> {
    let f = fit(ds, spec, opts)?;
    let col = cand.column(spec).expect("candidate is part of its model");
    Ok((wald_pvalue(&f, col)?, f))
}

/// Tests each main effect alone and each interaction together with its two
/// main effects; keeps every effect with `p < alpha`.
pub fn univariate_select(ds: &MetaDataset, opts: &SelectOptions) -> Result<SelectionResult> {
    opts.validate()?;
    check_size(ds)?;
    let p = ds.p();
    let candidates: Vec<Candidate> = (0..p)
        .map(Candidate::Main)
        .chain(all_pairs(p).into_iter().map(|(a, b)| Candidate::Interaction(a, b)))
        .collect();
    let scored: Vec<(Candidate, Result<f64>)> = candidates
        .par_iter()
        .map(|&c| {
            let spec = c.extend(&ModelSpec::empty());
            (c, candidate_pvalue(ds, &spec, c, &opts.fit).map(|(pv, _)| pv))
        })
        .collect();

    let mut mains = Vec::new();
    let mut ies = Vec::new();
    let mut trace = Vec::with_capacity(scored.len());
    for (c, res) in scored {
        let accepted = matches!(res, Ok(pv) if pv < opts.alpha);
        if accepted {
            match c {
                Candidate::Main(j) => mains.push(j),
                Candidate::Interaction(a, b) => ies.push((a, b)),
            }
        }
        trace.push(TraceStep {
            step: 0,
            candidate: c,
            score: res.as_ref().ok().copied(),
            accepted,
            forced: Vec::new(),
            error: res.err().map(|e| e.to_string()),
        });
    }
    let spec = ModelSpec::closed(mains, ies)?;
    let final_fit = fit(ds, &spec, &opts.fit).ok();
    Ok(SelectionResult {
        spec,
        final_fit,
        trace,
        stopped_reason: StopReason::Exhausted,
    })
}

#[derive(Clone, Copy)]
enum Scoring {
    Test { alpha: f64 },
    Ic(Criterion),
}

/// Forward selection by Wald p-value.
pub fn forward_test_select(ds: &MetaDataset, opts: &SelectOptions) -> Result<SelectionResult> {
    opts.validate()?;
    forward(ds, opts, Scoring::Test { alpha: opts.alpha })
}

/// Forward selection by information criterion (`opts.criterion`).
pub fn forward_ic_select(ds: &MetaDataset, opts: &SelectOptions) -> Result<SelectionResult> {
    opts.validate()?;
    forward(ds, opts, Scoring::Ic(opts.criterion))
}

fn open_candidates(spec: &ModelSpec, p: usize) -> Vec<Candidate> {
    let mains = (0..p).filter(|j| !spec.mains.contains(j)).map(Candidate::Main);
    let ies = all_pairs(p)
        .into_iter()
        .filter(|q| !spec.interactions.contains(q))
        .map(|(a, b)| Candidate::Interaction(a, b));
    mains.chain(ies).collect()
}

fn forward(ds: &MetaDataset, opts: &SelectOptions, scoring: Scoring) -> Result<SelectionResult> {
    check_size(ds)?;
    let mut current = ModelSpec::empty();
    let mut current_fit = fit(ds, &current, &opts.fit)?;
    let mut trace = Vec::new();
    let mut step = 0;

    let stopped_reason = loop {
        step += 1;
        let candidates = open_candidates(&current, ds.p());
        if candidates.is_empty() {
            break StopReason::Exhausted;
        }
        let evaluated: Vec<(Candidate, ModelSpec, Result<(f64, FitResult)>)> = candidates
            .par_iter()
            .map(|&c| {
                let spec = c.extend(&current);
                let res = match scoring {
                    Scoring::Test { .. } => candidate_pvalue(ds, &spec, c, &opts.fit),
                    Scoring::Ic(kind) => fit(ds, &spec, &opts.fit)
                        .and_then(|f| information_criterion(&f, kind).map(|s| (s, f))),
                };
                (c, spec, res)
            })
            .collect();

        let non_converged = evaluated
            .iter()
            .any(|(_, _, r)| matches!(r, Ok((_, f)) if !f.converged));

        let mut best: Option<usize> = None;
        for (i, (_, _, res)) in evaluated.iter().enumerate() {
            if let Ok((score, _)) = res {
                if score.is_nan() {
                    continue;
                }
                match best {
                    Some(b) if *score >= evaluated[b].2.as_ref().unwrap().0 => {}
                    _ => best = Some(i),
                }
            }
        }
        let accept = !non_converged
            && best.is_some_and(|b| {
                let score = evaluated[b].2.as_ref().unwrap().0;
                match scoring {
                    Scoring::Test { alpha } => score < alpha,
                    Scoring::Ic(kind) => information_criterion(&current_fit, kind)
                        .map(|cur| score < cur)
                        .unwrap_or(true),
                }
            });

        let mut accepted_state = None;
        for (i, (c, spec, res)) in evaluated.into_iter().enumerate() {
            let is_accepted = accept && Some(i) == best;
            let forced = if is_accepted {
                spec.mains.difference(&current.mains).copied().filter(|j| c != Candidate::Main(*j)).collect()
            } else {
                Vec::new()
            };
            let (score, error) = match &res {
                Ok((s, _)) => (Some(*s), None),
                Err(e) => (None, Some(e.to_string())),
            };
            trace.push(TraceStep {
                step,
                candidate: c,
                score,
                accepted: is_accepted,
                forced,
                error,
            });
            if is_accepted {
                accepted_state = Some((spec, res.unwrap().1));
            }
        }

        if non_converged {
            break StopReason::NonConvergence;
        }
        match accepted_state {
            Some((spec, f)) => {
                current = spec;
                current_fit = f;
                if current_fit.max_se > opts.se_cap {
                    break StopReason::SeExplosion;
                }
            }
            None => break StopReason::NoCandidate,
        }
    };

    Ok(SelectionResult {
        spec: current,
        final_fit: Some(current_fit),
        trace,
        stopped_reason,
    })
}
