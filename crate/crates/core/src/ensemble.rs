//! Stability-selected bootstrap ensembles of meta-CART trees.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{pair, MetaDataset, ModelSpec};
use crate::error::{Error, Result};
use crate::metacart::{grow_tree, tree_to_spec, Tree, TreeControls, TreeMode};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    /// Number of bootstrap trees.
    pub b: usize,
    pub lambda: f64,
    pub seed: u64,
    pub controls: TreeControls,
}

impl EnsembleOptions {
    pub fn new(b: usize, lambda: f64, seed: u64) -> Self {
        Self {
            b,
            lambda,
            seed,
            controls: TreeControls::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b < 1 {
            return Err(Error::InvalidOption("B must be >= 1".into()));
        }
        check_lambda(self.lambda)?;
        self.controls.validate()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidOption(format!("lambda must lie in (0, 1), got {lambda}")))
    }
}

/// Row indices of bootstrap resample `b`.
pub fn bootstrap_indices(k: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = seed::child_rng(seed, b as u64);
    (0..k).map(|_| rng.random_range(0..k)).collect()
}

/// Grows `opts.b` unpruned trees, tree `b` on bootstrap resample `b`.
pub fn fit_ensemble(ds: &MetaDataset, mode: TreeMode, opts: &EnsembleOptions) -> Result<Vec<Tree>> {
    opts.validate()?;
    let k = ds.k();
    Ok((0..opts.b)
        .into_par_iter()
        .map(|b| {
            let sample = ds.subset(&bootstrap_indices(k, opts.seed, b));
            grow_tree(&sample, mode, &opts.controls)
        })
        .collect())
}

/// Relative selection frequencies: `a[i][i]` is the share of trees splitting
/// on `i`, `a[i][j]` the share in which `i` and `j` share a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    pub p: usize,
    pub names: Vec<String>,
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: usize,
    pub mode: TreeMode,
}

pub fn selection_matrix(trees: &[Tree], p: usize) -> SelectionMatrix {
    let mut counts = vec![vec![0usize; p]; p];
    for tree in trees {
        let spec = tree_to_spec(tree);
        for &i in &spec.mains {
            counts[i][i] += 1;
        }
        for &(i, j) in &spec.interactions {
            counts[i][j] += 1;
            counts[j][i] += 1;
        }
    }
    let b = trees.len();
    let a = counts
        .iter()
        .map(|row| row.iter().map(|&c| if b == 0 { 0.0 } else { c as f64 / b as f64 }).collect())
        .collect();
    let names = match trees.first() {
        Some(t) if t.covariates.len() == p => t.covariates.iter().map(|c| c.name.clone()).collect(),
        _ => (0..p).map(|j| format!("x{}", j + 1)).collect(),
    };
    SelectionMatrix {
        p,
        names,
        a,
        b,
        mode: trees.first().map_or(TreeMode::Fe, |t| t.mode),
    }
}

impl SelectionMatrix {
    /// Ratio `a_ij / min(a_ii, a_jj)`, with 0/0 read as 0.
    pub fn ratio(&self, i: usize, j: usize) -> f64 {
        let denom = self.a[i][i].min(self.a[j][j]);
        if denom > 0.0 {
            self.a[i][j] / denom
        } else {
            0.0
        }
    }

    /// Supremum of the thresholds at which the effect is still selected.
    pub fn lambda_star(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.a[i][i]
        } else {
            self.a[i][i].min(self.a[j][j]).min(self.ratio(i, j))
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for name in &self.names {
            out.push(',');
            out.push_str(&csv_field(name));
        }
        out.push('\n');
        for (i, row) in self.a.iter().enumerate() {
            out.push_str(&csv_field(&self.names[i]));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Main effects with `a_ii > lambda`; interactions of selected mains whose
/// co-occurrence ratio exceeds `lambda`.
pub fn threshold_select(a: &SelectionMatrix, lambda: f64) -> Result<ModelSpec> {
    check_lambda(lambda)?;
    let mut spec = ModelSpec::empty();
    spec.mains = (0..a.p).filter(|&i| a.a[i][i] > lambda).collect();
    let mains: Vec<usize> = spec.mains.iter().copied().collect();
    for (x, &i) in mains.iter().enumerate() {
        for &j in &mains[x + 1..] {
            if a.ratio(i, j) > lambda {
                spec.interactions.insert(pair(i, j));
            }
        }
    }
    Ok(spec)
}

/// Ensemble fit followed by thresholding at `opts.lambda`.
pub fn stability_select(ds: &MetaDataset, mode: TreeMode, opts: &EnsembleOptions) -> Result<(SelectionMatrix, ModelSpec)> {
    let trees = fit_ensemble(ds, mode, opts)?;
    let a = selection_matrix(&trees, ds.p());
    let spec = threshold_select(&a, opts.lambda)?;
    Ok((a, spec))
}

pub const DEFAULT_LAMBDA_SCALE: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

const NEVER: &str = "#d9d9d9";
const CELL: usize = 56;
const MARGIN: usize = 110;

// light to dark blue
fn band_color(band: usize, bands: usize) -> String {
    let t = if bands <= 1 { 1.0 } else { (band - 1) as f64 / (bands - 1) as f64 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(222.0, 8.0), lerp(235.0, 48.0), lerp(247.0, 107.0))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Lower-triangular heatmap. A cell's band is the number of thresholds in
/// `lambda_scale` at which the effect is selected; band 0 is grey.
pub fn heatmap_svg(a: &SelectionMatrix, lambda_scale: &[f64]) -> String {
    let mut scale: Vec<f64> = lambda_scale.to_vec();
    scale.sort_by(f64::total_cmp);
    let p = a.p;
    let legend_h = 22 * (scale.len() + 1) + 10;
    let width = MARGIN + CELL * p + 180;
    let height = (MARGIN + CELL * p + 20).max(MARGIN + legend_h);
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"14\">Selection frequencies ({}, B = {})</text>\n",
        MARGIN,
        match a.mode {
            TreeMode::Fe => "FE",
            TreeMode::Re => "RE",
        },
        a.b
    ));
    for (j, name) in a.names.iter().enumerate() {
        let x = MARGIN + CELL * j + CELL / 2;
        s.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            MARGIN - 8,
            escape(name)
        ));
    }
    for i in 0..p {
        let y = MARGIN + CELL * i;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 8,
            y + CELL / 2 + 4,
            escape(&a.names[i])
        ));
        for j in 0..=i {
            let x = MARGIN + CELL * j;
            let star = a.lambda_star(i, j);
            let band = scale.iter().filter(|&&l| star > l).count();
            let fill = if band == 0 { NEVER.to_string() } else { band_color(band, scale.len()) };
            let ink = if band * 2 > scale.len() { "#ffffff" } else { "#000000" };
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{fill}\" stroke=\"#ffffff\"/>\n"
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\">{:.2}</text>\n",
                x + CELL / 2,
                y + CELL / 2 + 4,
                a.a[i][j]
            ));
        }
    }
    // legend: band b is selected for every lambda below the listed bound
    let lx = MARGIN + CELL * p + 24;
    s.push_str(&format!("<text x=\"{lx}\" y=\"{}\">lambda</text>\n", MARGIN - 8));
    for band in (0..=scale.len()).rev() {
        let row = scale.len() - band;
        let y = MARGIN + 22 * row;
        let fill = if band == 0 { NEVER.to_string() } else { band_color(band, scale.len()) };
        let label = if band == 0 {
            "never selected".to_string()
        } else {
            format!("selected at {:.2}", scale[band - 1])
        };
        s.push_str(&format!(
            "<rect x=\"{lx}\" y=\"{y}\" width=\"16\" height=\"16\" fill=\"{fill}\"/>\n<text x=\"{}\" y=\"{}\">{label}</text>\n",
            lx + 22,
            y + 12
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CovariateMeta;
    use crate::metacart::{Split, SplitRule, TreeNode};

    fn matrix(a: Vec<Vec<f64>>) -> SelectionMatrix {
        let p = a.len();
        SelectionMatrix {
            p,
            names: (0..p).map(|j| format!("v{j}")).collect(),
            a,
            b: 10,
            mode: TreeMode::Fe,
        }
    }

    // chain of splits on the given covariates down the left branch
    fn chain(covs: &[usize], p: usize) -> Tree {
        let mut nodes = Vec::new();
        let mut parent: Option<usize> = None;
        for (d, &c) in covs.iter().chain(std::iter::once(&usize::MAX)).enumerate() {
            let id = nodes.len();
            nodes.push(TreeNode {
                id,
                split: None,
                children: None,
                node_mean: 0.0,
                members: vec![],
                depth: d,
                split_order: None,
            });
            if let Some(pid) = parent {
                let sib = nodes.len();
                nodes.push(TreeNode {
                    id: sib,
                    split: None,
                    children: None,
                    node_mean: 0.0,
                    members: vec![],
                    depth: d,
                    split_order: None,
                });
                nodes[pid].children = Some((id, sib));
            }
            if c != usize::MAX {
                nodes[id].split = Some(Split {
                    covariate: c,
                    rule: SplitRule::Threshold { threshold: 0.0 },
                });
                parent = Some(id);
            }
        }
        Tree {
            nodes,
            mode: TreeMode::Fe,
            tau2_path: vec![],
            tau2: 0.0,
            controls: TreeControls::default(),
            covariates: (0..p).map(|j| CovariateMeta::metric(format!("v{j}"))).collect(),
        }
    }

    #[test]
    fn manual_three_tree_counts() {
        let trees = [chain(&[0, 1], 3), chain(&[0], 3), chain(&[2, 0], 3)];
        let a = selection_matrix(&trees, 3);
        let third = 1.0 / 3.0;
        assert_eq!(a.a[0][0], 1.0);
        assert_eq!(a.a[1][1], third);
        assert_eq!(a.a[2][2], third);
        assert_eq!(a.a[0][1], third);
        assert_eq!(a.a[0][2], third);
        assert_eq!(a.a[1][2], 0.0);
        assert_eq!(a.names, ["v0", "v1", "v2"]);
    }

    #[test]
    fn zero_matrix_selects_nothing() {
        let a = selection_matrix(&[chain(&[], 2), chain(&[], 2)], 2);
        assert!(a.a.iter().flatten().all(|&v| v == 0.0));
        for l in [0.1, 0.5, 0.9] {
            assert!(threshold_select(&a, l).unwrap().is_empty());
        }
        let svg = heatmap_svg(&a, &DEFAULT_LAMBDA_SCALE);
        assert_eq!(svg.matches(&format!("fill=\"{NEVER}\" stroke")).count(), 3);
    }

    #[test]
    fn ratio_rule() {
        let a = matrix(vec![vec![0.9, 0.5], vec![0.5, 0.9]]);
        let s = threshold_select(&a, 0.5).unwrap();
        assert_eq!(s.interactions, [(0, 1)].into());
        assert!(threshold_select(&a, 0.6).unwrap().interactions.is_empty());
        assert!(threshold_select(&a, 1.0).is_err());
        // equality is not selection
        let b = matrix(vec![vec![0.5]]);
        assert!(threshold_select(&b, 0.5).unwrap().is_empty());
    }

    #[test]
    fn single_cell_svg() {
        let a = matrix(vec![vec![0.5]]);
        let svg = heatmap_svg(&a, &DEFAULT_LAMBDA_SCALE);
        assert!(svg.contains(">0.50</text>"));
        assert_eq!(svg, heatmap_svg(&a, &DEFAULT_LAMBDA_SCALE));
        assert_eq!(svg.matches("stroke=\"#ffffff\"").count(), 1);
    }

    #[test]
    fn csv_layout() {
        let a = matrix(vec![vec![1.0, 0.25], vec![0.25, 0.5]]);
        assert_eq!(a.to_csv(), ",v0,v1\nv0,1,0.25\nv1,0.25,0.5\n");
        let back: SelectionMatrix = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn bootstrap_streams_are_stable() {
        assert_eq!(bootstrap_indices(30, 9, 4), bootstrap_indices(30, 9, 4));
        assert_ne!(bootstrap_indices(30, 9, 4), bootstrap_indices(30, 9, 5));
        assert!(bootstrap_indices(30, 9, 4).iter().all(|&i| i < 30));
    }
}
