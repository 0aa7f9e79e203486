//! Markdown summaries: side-by-side method comparison and grid tables.

use serde::{Deserialize, Serialize};

use crate::data::NamedSpec;
use crate::estimation::FitSummary;
use crate::sim::{ErrorReport, Method};

/// Selected model of one method, as stored in `selection.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSelection {
    pub method: String,
    pub spec: NamedSpec,
    #[serde(default)]
    pub fit: Option<FitSummary>,
}

/// Column position of a method label (unknown labels sort last, by name).
pub fn method_rank(label: &str) -> usize {
    Method::ALL
        .iter()
        .position(|m| m.label().eq_ignore_ascii_case(label) || m.key() == label.to_ascii_lowercase().replace('-', "_"))
        .unwrap_or(Method::ALL.len())
}

fn column_label(label: &str) -> String {
    match label.parse::<Method>() {
        Ok(m) => m.label().to_string(),
        Err(_) => label.to_string(),
    }
}

/// Methods as columns, effects as rows; cells hold the refitted coefficient,
/// `x` when an effect was selected but no fit is available, and stay blank
/// for effects a method did not select.
pub fn comparison_markdown(selections: &[MethodSelection]) -> String {
    let mut cols: Vec<&MethodSelection> = selections.iter().collect();
    cols.sort_by(|a, b| method_rank(&a.method).cmp(&method_rank(&b.method)).then(a.method.cmp(&b.method)));

    let mut mains: Vec<String> = Vec::new();
    let mut ies: Vec<String> = Vec::new();
    for c in &cols {
        for m in &c.spec.mains {
            if !mains.contains(m) {
                mains.push(m.clone());
            }
        }
        for i in &c.spec.interactions {
            if !ies.contains(i) {
                ies.push(i.clone());
            }
        }
    }

    let mut out = String::from("|  |");
    for c in &cols {
        out.push_str(&format!(" {} |", column_label(&c.method)));
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(cols.len()));
    out.push('\n');

    let cell = |c: &MethodSelection, effect: &str, selected: bool| -> String {
        let coef = c
            .fit
            .as_ref()
            .and_then(|f| f.beta.get(effect).or_else(|| swapped(effect).and_then(|s| f.beta.get(&s))))
            .and_then(|v| v.as_f64());
        match (selected, coef) {
            (true, Some(b)) => format!("{b:.2}"),
            (true, None) => "x".to_string(),
            (false, _) => String::new(),
        }
    };
    let mut row = |name: &str, selected: &dyn Fn(&MethodSelection) -> bool| {
        out.push_str(&format!("| {name} |"));
        for c in &cols {
            out.push_str(&format!(" {} |", cell(c, name, selected(c))));
        }
        out.push('\n');
    };
    row("(Intercept)", &|c| c.fit.is_some());
    for m in &mains {
        row(m, &|c| c.spec.mains.contains(m));
    }
    for i in &ies {
        row(i, &|c| c.spec.interactions.iter().any(|x| x == i || swapped(x).as_deref() == Some(i)));
    }
    out
}

fn swapped(effect: &str) -> Option<String> {
    effect.split_once(':').map(|(a, b)| format!("{b}:{a}"))
}

/// Grid report as Markdown: one row per cell, `type I / type II` per method.
pub fn grid_markdown(report: &ErrorReport) -> String {
    let mut methods: Vec<(Method, Option<u64>)> = Vec::new();
    for r in &report.rows {
        let key = (r.method, r.lambda.map(f64::to_bits));
        if !methods.contains(&key) {
            methods.push(key);
        }
    }
    methods.sort_by(|a, b| (method_rank(a.0.label()), a.1).cmp(&(method_rank(b.0.label()), b.1)));
    let mut out = String::from("| setting | k | tau2 |");
    for (m, l) in &methods {
        match l {
            Some(bits) => out.push_str(&format!(" {} ({:.2}) |", m.label(), f64::from_bits(*bits))),
            None => out.push_str(&format!(" {} |", m.label())),
        }
    }
    out.push_str("\n|---|---:|---:|");
    out.push_str(&"---|".repeat(methods.len()));
    out.push('\n');

    let mut cells: Vec<(String, usize, u64)> = Vec::new();
    for r in &report.rows {
        let key = (r.setting.to_string(), r.k, r.tau2.to_bits());
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.3}"));
    for (setting, k, tau2) in cells {
        out.push_str(&format!("| {setting} | {k} | {:.3} |", f64::from_bits(tau2)));
        for (m, l) in &methods {
            let row = report.rows.iter().find(|r| {
                r.setting.to_string() == setting && r.k == k && r.tau2.to_bits() == tau2 && r.method == *m && r.lambda.map(f64::to_bits) == *l
            });
            match row {
                Some(r) if r.type2.is_some() => out.push_str(&format!(" {} / {} |", fmt(r.type1), fmt(r.type2))),
                Some(r) => out.push_str(&format!(" {} / - |", fmt(r.type1))),
                None => out.push_str("  |"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::{Map, Value};

    fn sel(method: &str, mains: &[&str], ies: &[&str], beta: Option<&[(&str, f64)]>) -> MethodSelection {
        let spec = NamedSpec {
            mains: mains.iter().map(|s| s.to_string()).collect(),
            interactions: ies.iter().map(|s| s.to_string()).collect(),
        };
        let fit = beta.map(|b| {
            let beta: Map<String, Value> = b.iter().map(|(k, v)| (k.to_string(), Value::from(*v))).collect();
            FitSummary {
                spec: spec.clone(),
                se: beta.clone(),
                beta,
                tau2: 0.1,
                loglik: -1.0,
                converged: true,
            }
        });
        MethodSelection {
            method: method.into(),
            spec,
            fit,
        }
    }

    #[test]
    fn fixed_column_order_and_blanks() {
        let md = comparison_markdown(&[
            sel("bic", &["Age"], &[], Some(&[("(Intercept)", -0.99), ("Age", 0.16)])),
            sel("uni_test", &["Time", "Age"], &["Time:Age"], Some(&[("(Intercept)", -1.0), ("Time", -0.04), ("Age", 0.18), ("Time:Age", -0.08)])),
            sel("sremrt", &["Age"], &[], None),
        ]);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "|  | Uni-test | BIC | S-REmrt |");
        assert_eq!(lines[2], "| (Intercept) | -1.00 | -0.99 |  |");
        assert_eq!(lines[3], "| Time | -0.04 |  |  |");
        assert_eq!(lines[4], "| Age | 0.18 | 0.16 | x |");
        assert_eq!(lines[5], "| Time:Age | -0.08 |  |  |");
    }

    #[test]
    fn rank_accepts_keys_and_labels() {
        assert_eq!(method_rank("S-REmrt"), 7);
        assert_eq!(method_rank("sremrt"), 7);
        assert_eq!(method_rank("multi-test"), 1);
        assert_eq!(method_rank("other"), 8);
    }
}
