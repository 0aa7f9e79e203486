//! Fixed effect and random effects meta-CART.
//!
//! Trees split studies to maximize the between-subgroup heterogeneity `Q_B`.
//! Fixed effect trees weight by `1/v`. Random effects trees re-estimate
//! `tau2` (DerSimonian-Laird on the leaf-indicator design) for every
//! candidate partition and weight by `1/(v + tau2)`.
//!
//! A tree is read as a linear model: every split variable is a main effect,
//! every pair of distinct variables on one root-to-leaf path an interaction.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{pair, CovariateMeta, MetaDataset, ModelSpec, Scale};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeMode {
    Fe,
    Re,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeControls {
    pub minsplit: usize,
    pub minbucket: usize,
    pub maxdepth: usize,
    pub cv_folds: usize,
    /// Absolute floor on the `Q_B` gain of a split.
    pub min_qb_gain: f64,
    /// Relative floor: a split must raise `Q_B` by at least `cp` times the
    /// total heterogeneity at the root.
    pub cp: f64,
}

impl Default for TreeControls {
    fn default() -> Self {
        Self {
            minsplit: 20,
            minbucket: 7,
            maxdepth: 30,
            cv_folds: 10,
            min_qb_gain: 0.0,
            cp: 0.01,
        }
    }
}

impl TreeControls {
    pub fn validate(&self) -> Result<()> {
        if self.minbucket < 1 {
            return Err(Error::InvalidOption("minbucket must be >= 1".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidOption("cv_folds must be >= 2".into()));
        }
        if !(self.min_qb_gain >= 0.0) || !(self.cp >= 0.0) {
            return Err(Error::InvalidOption("min_qb_gain and cp must be >= 0".into()));
        }
        Ok(())
    }
}

/// `c` of the `c * SE` pruning rule; `c = 0` disables pruning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneRule {
    pub c: f64,
}

impl PruneRule {
    /// Default `c` by number of studies: fixed effect trees switch from 1 to
    /// 0.5 at `k = 80`, random effects trees at `k = 120`.
    pub fn default_for(mode: TreeMode, k: usize) -> Self {
        let limit = match mode {
            TreeMode::Fe => 80,
            TreeMode::Re => 120,
        };
        Self {
            c: if k < limit { 1.0 } else { 0.5 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SplitRule {
    /// Left child takes `x <= threshold`.
    Threshold { threshold: f64 },
    /// Left child takes the reference level (`x = 0`).
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub covariate: usize,
    pub rule: SplitRule,
}

impl Split {
    pub fn goes_left(&self, x: &[f64]) -> bool {
        let value = x[self.covariate];
        match self.rule {
            SplitRule::Threshold { threshold } => value <= threshold,
            SplitRule::Binary => value < 0.5,
        }
    }

    fn cut(&self) -> f64 {
        match self.rule {
            SplitRule::Threshold { threshold } => threshold,
            SplitRule::Binary => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub split: Option<Split>,
    pub children: Option<(usize, usize)>,
    /// Weighted mean outcome of the member studies.
    pub node_mean: f64,
    pub members: Vec<usize>,
    pub depth: usize,
    /// Position of this node's split in growth order.
    pub split_order: Option<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    /// Arena; `nodes[0]` is the root.
    pub nodes: Vec<TreeNode>,
    pub mode: TreeMode,
    /// `tau2` after each accepted split, in growth order (random effects only).
    pub tau2_path: Vec<f64>,
    /// `tau2` behind the node weights (0 in fixed effect mode).
    pub tau2: f64,
    pub controls: TreeControls,
    pub covariates: Vec<CovariateMeta>,
}

impl Tree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn leaves(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            match node.children {
                Some((l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
                None => out.push(node),
            }
        }
        out
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_some()).count()
    }

    /// Leaf reached by covariate vector `x`.
    pub fn route(&self, x: &[f64]) -> &TreeNode {
        let mut node = &self.nodes[0];
        while let (Some(split), Some((l, r))) = (node.split, node.children) {
            node = &self.nodes[if split.goes_left(x) { l } else { r }];
        }
        node
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.route(x).node_mean
    }

    /// Split variables seen on each root-to-leaf path.
    pub fn paths(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((id, mut path)) = stack.pop() {
            let node = &self.nodes[id];
            match (node.split, node.children) {
                (Some(split), Some((l, r))) => {
                    path.push(split.covariate);
                    stack.push((r, path.clone()));
                    stack.push((l, path));
                }
                _ => out.push(path),
            }
        }
        out
    }

    pub fn split_variables(&self) -> BTreeSet<usize> {
        self.nodes.iter().filter_map(|n| n.split.map(|s| s.covariate)).collect()
    }

    fn describe_split(&self, split: &Split, left: bool) -> String {
        let meta = &self.covariates[split.covariate];
        match split.rule {
            SplitRule::Threshold { threshold } => {
                format!("{} {} {:.4}", meta.name, if left { "<=" } else { ">" }, threshold)
            }
            SplitRule::Binary => {
                let level = match &meta.levels {
                    Some(levels) if !levels[1].is_empty() => levels[!left as usize].clone(),
                    _ => (!left as u8).to_string(),
                };
                format!("{} = {}", meta.name, level)
            }
        }
    }

    /// Indented text rendering, one node per line.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        self.render_node(0, "root".to_string(), &mut out);
        out
    }

    fn render_node(&self, id: usize, label: String, out: &mut String) {
        let node = &self.nodes[id];
        let indent = "  ".repeat(node.depth);
        let leaf = if node.is_leaf() { " *" } else { "" };
        out.push_str(&format!(
            "{indent}[{}] {label}: k = {}, mean = {:.4}{leaf}\n",
            node.id,
            node.members.len(),
            node.node_mean
        ));
        if let (Some(split), Some((l, r))) = (node.split, node.children) {
            self.render_node(l, self.describe_split(&split, true), out);
            self.render_node(r, self.describe_split(&split, false), out);
        }
    }

    pub fn to_json_value(&self) -> TreeJson {
        TreeJson {
            mode: self.mode,
            tau2: self.tau2,
            tau2_path: self.tau2_path.clone(),
            controls: self.controls,
            root: self.node_json(0),
        }
    }

    fn node_json(&self, id: usize) -> NodeJson {
        let node = &self.nodes[id];
        let (split, left, right) = match (node.split, node.children) {
            (Some(s), Some((l, r))) => (
                Some(SplitJson {
                    covariate: self.covariates[s.covariate].name.clone(),
                    index: s.covariate,
                    rule: s.rule,
                }),
                Some(Box::new(self.node_json(l))),
                Some(Box::new(self.node_json(r))),
            ),
            _ => (None, None, None),
        };
        NodeJson {
            id: node.id,
            n: node.members.len(),
            mean: node.node_mean,
            depth: node.depth,
            members: node.members.clone(),
            split,
            left,
            right,
        }
    }
}

/// Nested JSON form of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeJson {
    pub mode: TreeMode,
    pub tau2: f64,
    pub tau2_path: Vec<f64>,
    pub controls: TreeControls,
    pub root: NodeJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitJson {
    pub covariate: String,
    pub index: usize,
    pub rule: SplitRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeJson {
    pub id: usize,
    pub n: usize,
    pub mean: f64,
    pub depth: usize,
    pub members: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<Box<NodeJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<Box<NodeJson>>,
}

/// Between-subgroup heterogeneity of a partition of study indices.
pub fn qb(y: &[f64], w: &[f64], partition: &[Vec<usize>]) -> Result<f64> {
    let mut groups = Vec::with_capacity(partition.len());
    let (mut w_all, mut s_all) = (0.0, 0.0);
    for g in partition {
        if g.is_empty() {
            return Err(Error::EmptyGroup);
        }
        let wg: f64 = g.iter().map(|&i| w[i]).sum();
        let sg: f64 = g.iter().map(|&i| w[i] * y[i]).sum();
        w_all += wg;
        s_all += sg;
        groups.push((wg, sg / wg));
    }
    let grand = s_all / w_all;
    Ok(groups.iter().map(|(wg, mean)| wg * (mean - grand).powi(2)).sum())
}

/// Additive per-group pieces of the DerSimonian-Laird estimator on a
/// group-indicator design (weights `1/v`).
#[derive(Debug, Clone, Copy, Default)]
struct DlStats {
    w: f64,
    wy: f64,
    wy2: f64,
    w2: f64,
}

impl DlStats {
    fn add(&mut self, y: f64, v: f64) {
        let w = 1.0 / v;
        self.w += w;
        self.wy += w * y;
        self.wy2 += w * y * y;
        self.w2 += w * w;
    }

    fn minus(&self, o: &DlStats) -> DlStats {
        DlStats {
            w: self.w - o.w,
            wy: self.wy - o.wy,
            wy2: self.wy2 - o.wy2,
            w2: self.w2 - o.w2,
        }
    }

    fn q_within(&self) -> f64 {
        (self.wy2 - self.wy * self.wy / self.w).max(0.0)
    }

    fn c_part(&self) -> f64 {
        self.w - self.w2 / self.w
    }
}

fn dl_from_parts(q: f64, c: f64, k: usize, groups: usize) -> f64 {
    if !(c > 0.0) {
        return 0.0;
    }
    ((q - (k as f64 - groups as f64)) / c).max(0.0)
}

/// Subgroup-design DerSimonian-Laird `tau2` for a partition.
pub fn tau2_dl_partition(y: &[f64], v: &[f64], partition: &[Vec<usize>]) -> f64 {
    let k: usize = partition.iter().map(Vec::len).sum();
    let (mut q, mut c) = (0.0, 0.0);
    for g in partition {
        let mut s = DlStats::default();
        for &i in g {
            s.add(y[i], v[i]);
        }
        q += s.q_within();
        c += s.c_part();
    }
    dl_from_parts(q, c, k, partition.len())
}

/// A proposed split of one leaf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub leaf: usize,
    pub split: Split,
    /// Increase of `Q_B` over the current partition.
    pub gain: f64,
    /// `Q_B` of the partition after the split.
    pub qb: f64,
    /// `tau2` of the partition after the split (0 in fixed effect mode).
    pub tau2: f64,
}

/// Growth state: the tree so far plus the data it is grown on.
pub struct GrowState<'a> {
    ds: &'a MetaDataset,
    y: Vec<f64>,
    v: Vec<f64>,
    pub nodes: Vec<TreeNode>,
    pub leaves: Vec<usize>,
    pub tau2: f64,
    pub qb: f64,
    pub mode: TreeMode,
    pub controls: TreeControls,
    root_q: f64,
}

impl<'a> GrowState<'a> {
    pub fn new(ds: &'a MetaDataset, mode: TreeMode, controls: TreeControls) -> Self {
        let y = ds.y();
        let v = ds.v();
        let all: Vec<usize> = (0..ds.k()).collect();
        let tau2 = match mode {
            TreeMode::Fe => 0.0,
            TreeMode::Re => tau2_dl_partition(&y, &v, std::slice::from_ref(&all)),
        };
        let w: Vec<f64> = v.iter().map(|vi| 1.0 / (vi + tau2)).collect();
        let mean = weighted_mean(&y, &w, &all);
        let root_q: f64 = all.iter().map(|&i| w[i] * (y[i] - mean).powi(2)).sum();
        let root = TreeNode {
            id: 0,
            split: None,
            children: None,
            node_mean: mean,
            members: all,
            depth: 0,
            split_order: None,
        };
        Self {
            ds,
            y,
            v,
            nodes: vec![root],
            leaves: vec![0],
            tau2,
            qb: 0.0,
            mode,
            controls,
            root_q,
        }
    }

    fn weights(&self, tau2: f64) -> Vec<f64> {
        self.v.iter().map(|vi| 1.0 / (vi + tau2)).collect()
    }

    /// Admissible binary partitions of `leaf` on covariate `j`: members
    /// sorted by value and the list of (left size, split) cut positions.
    fn cuts(&self, leaf: usize, j: usize) -> (Vec<usize>, Vec<(usize, Split)>) {
        let node = &self.nodes[leaf];
        let studies = self.ds.studies();
        let mut sorted = node.members.clone();
        sorted.sort_by(|&a, &b| studies[a].x[j].total_cmp(&studies[b].x[j]).then(a.cmp(&b)));
        let n = sorted.len();
        let binary = self.ds.covariates()[j].scale == Scale::Binary;
        let mut cuts = Vec::new();
        for left in self.controls.minbucket..=n.saturating_sub(self.controls.minbucket) {
            if left == 0 || left == n {
                continue;
            }
            let lo = studies[sorted[left - 1]].x[j];
            let hi = studies[sorted[left]].x[j];
            if lo == hi {
                continue;
            }
            let rule = if binary {
                SplitRule::Binary
            } else {
                SplitRule::Threshold {
                    threshold: 0.5 * (lo + hi),
                }
            };
            cuts.push((left, Split { covariate: j, rule }));
        }
        (sorted, cuts)
    }

    fn splittable(&self, leaf: usize) -> bool {
        let node = &self.nodes[leaf];
        node.members.len() >= self.controls.minsplit && node.depth < self.controls.maxdepth
    }

    /// Best admissible split over all leaves, covariates and cutpoints.
    pub fn best_split(&self) -> Option<SplitCandidate> {
        let mut best: Option<SplitCandidate> = None;
        for &leaf in &self.leaves {
            if !self.splittable(leaf) {
                continue;
            }
            for j in 0..self.ds.p() {
                let (sorted, cuts) = self.cuts(leaf, j);
                if cuts.is_empty() {
                    continue;
                }
                let scored = match self.mode {
                    TreeMode::Fe => self.score_fe(leaf, &sorted, &cuts),
                    TreeMode::Re => self.score_re(leaf, &sorted, &cuts),
                };
                for cand in scored {
                    if better(&cand, best.as_ref()) {
                        best = Some(cand);
                    }
                }
            }
        }
        let cand = best?;
        let threshold = self.controls.min_qb_gain.max(self.controls.cp * self.root_q);
        if cand.gain > threshold && cand.gain > 0.0 {
            Some(cand)
        } else {
            None
        }
    }

    fn score_fe(&self, leaf: usize, sorted: &[usize], cuts: &[(usize, Split)]) -> Vec<SplitCandidate> {
        // gain of splitting one leaf = W_a W_b / (W_a + W_b) * (mean_a - mean_b)^2
        let mut prefix_w = Vec::with_capacity(sorted.len() + 1);
        let mut prefix_s = Vec::with_capacity(sorted.len() + 1);
        let (mut w, mut s) = (0.0, 0.0);
        prefix_w.push(0.0);
        prefix_s.push(0.0);
        for &i in sorted {
            let wi = 1.0 / self.v[i];
            w += wi;
            s += wi * self.y[i];
            prefix_w.push(w);
            prefix_s.push(s);
        }
        cuts.iter()
            .map(|&(left, split)| {
                let (wa, sa) = (prefix_w[left], prefix_s[left]);
                let (wb, sb) = (w - wa, s - sa);
                let diff = sa / wa - sb / wb;
                let gain = wa * wb / (wa + wb) * diff * diff;
                SplitCandidate {
                    leaf,
                    split,
                    gain,
                    qb: self.qb + gain,
                    tau2: 0.0,
                }
            })
            .collect()
    }

    fn score_re(&self, leaf: usize, sorted: &[usize], cuts: &[(usize, Split)]) -> Vec<SplitCandidate> {
        let k = self.ds.k();
        let groups = self.leaves.len() + 1;
        let mut q_other = 0.0;
        let mut c_other = 0.0;
        for &l in &self.leaves {
            if l == leaf {
                continue;
            }
            let mut st = DlStats::default();
            for &i in &self.nodes[l].members {
                st.add(self.y[i], self.v[i]);
            }
            q_other += st.q_within();
            c_other += st.c_part();
        }
        let mut prefix = Vec::with_capacity(sorted.len() + 1);
        let mut acc = DlStats::default();
        prefix.push(acc);
        for &i in sorted {
            acc.add(self.y[i], self.v[i]);
            prefix.push(acc);
        }
        let total = acc;

        cuts.iter()
            .map(|&(left, split)| {
                let a = prefix[left];
                let b = total.minus(&a);
                let q = q_other + a.q_within() + b.q_within();
                let c = c_other + a.c_part() + b.c_part();
                let tau2 = dl_from_parts(q, c, k, groups);
                let qb = self.qb_with_split(leaf, &sorted[..left], &sorted[left..], tau2);
                SplitCandidate {
                    leaf,
                    split,
                    gain: qb - self.qb,
                    qb,
                    tau2,
                }
            })
            .collect()
    }

    fn qb_with_split(&self, leaf: usize, left: &[usize], right: &[usize], tau2: f64) -> f64 {
        let mut groups: Vec<(f64, f64)> = Vec::with_capacity(self.leaves.len() + 1);
        let sums = |members: &[usize]| {
            members.iter().fold((0.0, 0.0), |(w, s), &i| {
                let wi = 1.0 / (self.v[i] + tau2);
                (w + wi, s + wi * self.y[i])
            })
        };
        for &l in &self.leaves {
            if l != leaf {
                groups.push(sums(&self.nodes[l].members));
            }
        }
        groups.push(sums(left));
        groups.push(sums(right));
        let (w_all, s_all) = groups.iter().fold((0.0, 0.0), |(w, s), g| (w + g.0, s + g.1));
        let grand = s_all / w_all;
        groups.iter().map(|(w, s)| w * (s / w - grand).powi(2)).sum()
    }

    /// Applies a split chosen by [`GrowState::best_split`].
    pub fn apply(&mut self, cand: &SplitCandidate) {
        let studies = self.ds.studies();
        let parent = &self.nodes[cand.leaf];
        let (left, right): (Vec<usize>, Vec<usize>) = parent
            .members
            .iter()
            .partition(|&&i| cand.split.goes_left(&studies[i].x));
        let depth = parent.depth + 1;
        let order = self.nodes.iter().filter(|n| n.split.is_some()).count();
        let l_id = self.nodes.len();
        let r_id = l_id + 1;
        for (id, members) in [(l_id, left), (r_id, right)] {
            self.nodes.push(TreeNode {
                id,
                split: None,
                children: None,
                node_mean: 0.0,
                members,
                depth,
                split_order: None,
            });
        }
        let parent = &mut self.nodes[cand.leaf];
        parent.split = Some(cand.split);
        parent.children = Some((l_id, r_id));
        parent.split_order = Some(order);
        let pos = self.leaves.iter().position(|&l| l == cand.leaf).expect("split a leaf");
        self.leaves.splice(pos..=pos, [l_id, r_id]);
        self.tau2 = cand.tau2;
        self.qb = cand.qb;
    }

    pub fn partition(&self) -> Vec<Vec<usize>> {
        self.leaves.iter().map(|&l| self.nodes[l].members.clone()).collect()
    }

    fn finish(mut self, tau2_path: Vec<f64>) -> Tree {
        let w = self.weights(self.tau2);
        for node in self.nodes.iter_mut() {
            node.node_mean = weighted_mean(&self.y, &w, &node.members);
        }
        Tree {
            nodes: self.nodes,
            mode: self.mode,
            tau2_path,
            tau2: self.tau2,
            controls: self.controls,
            covariates: self.ds.covariates().to_vec(),
        }
    }
}

// Larger gain wins; exact ties go to the lower covariate index, then the
// smaller cutpoint, then the earlier leaf.
fn better(cand: &SplitCandidate, best: Option<&SplitCandidate>) -> bool {
    let Some(b) = best else { return true };
    // equal partitions reached through different covariates differ only by
    // rounding; treat them as ties so the order below decides
    let tol = 1e-11 * cand.qb.abs().max(b.qb.abs());
    if (cand.qb - b.qb).abs() > tol {
        return cand.qb > b.qb;
    }
    (cand.split.covariate, cand.split.cut(), cand.leaf) < (b.split.covariate, b.split.cut(), b.leaf)
}

fn weighted_mean(y: &[f64], w: &[f64], members: &[usize]) -> f64 {
    let (sw, sy) = members.iter().fold((0.0, 0.0), |(a, b), &i| (a + w[i], b + w[i] * y[i]));
    if sw > 0.0 {
        sy / sw
    } else {
        f64::NAN
    }
}

/// Best split of the current tree state.
pub fn best_split(state: &GrowState<'_>) -> Option<SplitCandidate> {
    state.best_split()
}

/// Grows a tree greedily until no admissible split remains.
pub fn grow_tree(ds: &MetaDataset, mode: TreeMode, controls: &TreeControls) -> Tree {
    let mut state = GrowState::new(ds, mode, *controls);
    let mut tau2_path = Vec::new();
    while let Some(cand) = state.best_split() {
        state.apply(&cand);
        if mode == TreeMode::Re {
            tau2_path.push(cand.tau2);
        }
    }
    state.finish(tau2_path)
}

/// Main effects = split variables; interactions = variable pairs on a common path.
pub fn tree_to_spec(tree: &Tree) -> ModelSpec {
    let mut spec = ModelSpec::empty();
    for path in tree.paths() {
        for (i, &a) in path.iter().enumerate() {
            spec.mains.insert(a);
            for &b in &path[i + 1..] {
                if a != b {
                    spec.interactions.insert(pair(a, b));
                }
            }
        }
    }
    spec
}

/// Within-leaf weighted squared error of every node at fixed weights.
fn node_risks(tree: &Tree, y: &[f64], w: &[f64]) -> Vec<f64> {
    tree.nodes
        .iter()
        .map(|n| {
            let mean = weighted_mean(y, w, &n.members);
            n.members.iter().map(|&i| w[i] * (y[i] - mean).powi(2)).sum()
        })
        .collect()
}

/// Cost-complexity (weakest link) pruning sequence: `(alpha, collapsed)` for
/// each nested subtree, from the full tree to the root.
fn pruning_sequence(tree: &Tree, risks: &[f64]) -> Vec<(f64, Vec<bool>)> {
    let n = tree.nodes.len();
    let mut collapsed = vec![false; n];
    let mut seq = vec![(0.0, collapsed.clone())];
    loop {
        // subtree risk and leaf count below every active internal node
        let mut g = vec![f64::INFINITY; n];
        fn walk(
            tree: &Tree,
            id: usize,
            collapsed: &[bool],
            risks: &[f64],
            g: &mut [f64],
        ) -> (f64, usize) {
            let node = &tree.nodes[id];
            match node.children {
                Some((l, r)) if !collapsed[id] => {
                    let (rl, nl) = walk(tree, l, collapsed, risks, g);
                    let (rr, nr) = walk(tree, r, collapsed, risks, g);
                    let (sub_r, sub_n) = (rl + rr, nl + nr);
                    g[id] = ((risks[id] - sub_r) / (sub_n as f64 - 1.0)).max(0.0);
                    (sub_r, sub_n)
                }
                _ => (risks[id], 1),
            }
        }
        walk(tree, 0, &collapsed, risks, &mut g);
        let best = g.iter().copied().fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            break;
        }
        let tol = 1e-12 * best.abs().max(1e-300);
        for id in 0..n {
            if g[id] <= best + tol {
                collapsed[id] = true;
            }
        }
        if best <= 0.0 && seq.len() == 1 {
            // zero-gain splits belong to the full tree's alpha = 0 level
            seq[0] = (0.0, collapsed.clone());
        } else {
            seq.push((best, collapsed.clone()));
        }
    }
    seq
}

fn is_active_leaf(tree: &Tree, collapsed: &[bool], x: &[f64]) -> usize {
    let mut id = 0;
    loop {
        let node = &tree.nodes[id];
        match (node.split, node.children) {
            (Some(split), Some((l, r))) if !collapsed[id] => {
                id = if split.goes_left(x) { l } else { r };
            }
            _ => return id,
        }
    }
}

fn count_leaves(tree: &Tree, collapsed: &[bool]) -> usize {
    let mut count = 0;
    let mut stack = vec![0];
    while let Some(id) = stack.pop() {
        match tree.nodes[id].children {
            Some((l, r)) if !collapsed[id] => {
                stack.push(l);
                stack.push(r);
            }
            _ => count += 1,
        }
    }
    count
}

/// Cross-validated error of each subtree in the pruning sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CvTable {
    pub alpha: Vec<f64>,
    pub leaves: Vec<usize>,
    pub error: Vec<f64>,
    pub se: Vec<f64>,
}

fn tree_weights(tree: &Tree, v: &[f64]) -> Vec<f64> {
    v.iter().map(|vi| 1.0 / (vi + tree.tau2)).collect()
}

/// Cross-validation of the cost-complexity sequence of `tree` (grown on `ds`).
pub fn cross_validate(ds: &MetaDataset, tree: &Tree, seed: u64) -> (Vec<(f64, Vec<bool>)>, CvTable) {
    let y = ds.y();
    let v = ds.v();
    let w = tree_weights(tree, &v);
    let risks = node_risks(tree, &y, &w);
    let seq = pruning_sequence(tree, &risks);
    let k = ds.k();
    let folds = tree.controls.cv_folds.min(k).max(2);

    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut fold_of = vec![0; k];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }

    // geometric midpoints between consecutive alphas
    let probes: Vec<f64> = (0..seq.len())
        .map(|j| {
            if j + 1 < seq.len() {
                (seq[j].0 * seq[j + 1].0).sqrt()
            } else {
                f64::INFINITY
            }
        })
        .collect();

    let mut errors = vec![vec![0.0; k]; seq.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..k).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..k).filter(|&i| fold_of[i] == f).collect();
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let train_ds = ds.subset(&train);
        let fold_tree = grow_tree(&train_ds, tree.mode, &tree.controls);
        let fy = train_ds.y();
        let fw = tree_weights(&fold_tree, &train_ds.v());
        let fold_risks = node_risks(&fold_tree, &fy, &fw);
        let fold_seq = pruning_sequence(&fold_tree, &fold_risks);
        for (j, &probe) in probes.iter().enumerate() {
            let idx = fold_seq.iter().rposition(|(a, _)| *a <= probe).unwrap_or(0);
            let collapsed = &fold_seq[idx].1;
            for &i in &test {
                let x = &ds.studies()[i].x;
                let leaf = is_active_leaf(&fold_tree, collapsed, x);
                let pred = weighted_mean(&fy, &fw, &fold_tree.nodes[leaf].members);
                errors[j][i] = w[i] * (y[i] - pred).powi(2);
            }
        }
    }

    let mut table = CvTable {
        alpha: Vec::new(),
        leaves: Vec::new(),
        error: Vec::new(),
        se: Vec::new(),
    };
    for (j, (alpha, collapsed)) in seq.iter().enumerate() {
        let e = &errors[j];
        let total: f64 = e.iter().sum();
        let mean = total / k as f64;
        let se = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt();
        table.alpha.push(*alpha);
        table.leaves.push(count_leaves(tree, collapsed));
        table.error.push(total);
        table.se.push(se);
    }
    (seq, table)
}

/// Cost-complexity pruning with the `c * SE` rule on cross-validated error.
pub fn prune_tree(ds: &MetaDataset, tree: &Tree, rule: PruneRule, seed: u64) -> Result<Tree> {
    if !(rule.c >= 0.0) {
        return Err(Error::InvalidOption(format!("pruning c must be >= 0, got {}", rule.c)));
    }
    if rule.c == 0.0 || tree.n_splits() == 0 {
        return Ok(tree.clone());
    }
    let (seq, table) = cross_validate(ds, tree, seed);
    let min_idx = (0..table.error.len())
        .fold(0, |b, j| if table.error[j] < table.error[b] { j } else { b });
    let bound = table.error[min_idx] + rule.c * table.se[min_idx];
    // sequence runs from the full tree to the root; the last admissible entry is the smallest
    let chosen = (0..seq.len()).rev().find(|&j| table.error[j] <= bound).unwrap_or(min_idx);
    Ok(collapse(tree, &seq[chosen].1))
}

/// Copy of `tree` with the `collapsed` internal nodes turned into leaves.
fn collapse(tree: &Tree, collapsed: &[bool]) -> Tree {
    let mut nodes = Vec::new();
    let mut kept_orders = Vec::new();
    let mut queue = std::collections::VecDeque::from([(0usize, None::<(usize, bool)>)]);
    while let Some((old, parent)) = queue.pop_front() {
        let src = &tree.nodes[old];
        let id = nodes.len();
        let keep_split = src.split.is_some() && !collapsed[old];
        nodes.push(TreeNode {
            id,
            split: if keep_split { src.split } else { None },
            children: None,
            node_mean: src.node_mean,
            members: src.members.clone(),
            depth: src.depth,
            split_order: if keep_split { src.split_order } else { None },
        });
        if keep_split {
            kept_orders.push(src.split_order.expect("internal node has order"));
        }
        if let Some((p, left)) = parent {
            let entry = nodes[p].children.get_or_insert((usize::MAX, usize::MAX));
            if left {
                entry.0 = id;
            } else {
                entry.1 = id;
            }
        }
        if keep_split {
            let (l, r) = src.children.expect("split node has children");
            queue.push_back((l, Some((id, true))));
            queue.push_back((r, Some((id, false))));
        }
    }
    kept_orders.sort_unstable();
    let tau2_path = if tree.mode == TreeMode::Re {
        kept_orders.iter().filter_map(|&o| tree.tau2_path.get(o).copied()).collect()
    } else {
        Vec::new()
    };
    // renumber split orders densely
    for node in nodes.iter_mut() {
        if let Some(o) = node.split_order {
            node.split_order = kept_orders.iter().position(|&x| x == o);
        }
    }
    Tree {
        nodes,
        mode: tree.mode,
        tau2_path,
        tau2: tree.tau2,
        controls: tree.controls,
        covariates: tree.covariates.clone(),
    }
}

/// Grows, then prunes with `rule`: the single-tree FEmrt / REmrt procedure.
pub fn fit_pruned_tree(ds: &MetaDataset, mode: TreeMode, controls: &TreeControls, rule: PruneRule, seed: u64) -> Result<Tree> {
    controls.validate()?;
    let tree = grow_tree(ds, mode, controls);
    prune_tree(ds, &tree, rule, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(y: &[f64], v: &[f64], cols: &[Vec<f64>]) -> MetaDataset {
        let metas = (0..cols.len()).map(|j| CovariateMeta::metric(format!("x{j}"))).collect();
        MetaDataset::from_columns(y, v, cols, metas).unwrap()
    }

    #[test]
    fn qb_hand_cases() {
        assert_eq!(qb(&[1.0, 2.0, 5.0], &[1.0, 2.0, 1.0], &[vec![0, 1, 2]]).unwrap(), 0.0);
        assert_eq!(qb(&[0.0, 2.0], &[1.0, 1.0], &[vec![0], vec![1]]).unwrap(), 2.0);
        assert_eq!(qb(&[3.0; 4], &[1.0, 2.0, 3.0, 4.0], &[vec![0, 3], vec![1], vec![2]]).unwrap(), 0.0);
        assert_eq!(qb(&[1.0], &[1.0], &[vec![0], vec![]]).unwrap_err(), Error::EmptyGroup);
    }

    #[test]
    fn default_prune_c() {
        assert_eq!(PruneRule::default_for(TreeMode::Fe, 79).c, 1.0);
        assert_eq!(PruneRule::default_for(TreeMode::Fe, 80).c, 0.5);
        assert_eq!(PruneRule::default_for(TreeMode::Re, 119).c, 1.0);
        assert_eq!(PruneRule::default_for(TreeMode::Re, 120).c, 0.5);
    }

    #[test]
    fn constant_outcome_single_leaf() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let d = ds(&[0.5; 40], &[0.1; 40], &[x]);
        for mode in [TreeMode::Fe, TreeMode::Re] {
            let t = grow_tree(&d, mode, &TreeControls::default());
            assert_eq!(t.nodes.len(), 1);
            assert!(tree_to_spec(&t).is_empty());
        }
    }

    #[test]
    fn minsplit_gates_small_k() {
        let x: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 0.3).collect();
        let d = ds(&y, &[0.1; 19], &[x]);
        let st = GrowState::new(&d, TreeMode::Fe, TreeControls::default());
        assert!(best_split(&st).is_none());
    }

    #[test]
    fn picks_informative_covariate() {
        let k = 40;
        let x0 = vec![1.0; k];
        let x1: Vec<f64> = (0..k).map(|i| i as f64).collect();
        let y: Vec<f64> = x1.iter().map(|v| 0.1 * v).collect();
        let d = ds(&y, &vec![0.2; k], &[x0, x1]);
        let st = GrowState::new(&d, TreeMode::Fe, TreeControls::default());
        assert_eq!(best_split(&st).unwrap().split.covariate, 1);
    }

    fn hand_tree(splits: &[(usize, Option<usize>, Option<usize>)]) -> Tree {
        // (covariate, left child entry, right child entry) in index order; entries refer to splits
        let mut nodes = Vec::new();
        fn build(splits: &[(usize, Option<usize>, Option<usize>)], s: Option<usize>, depth: usize, nodes: &mut Vec<TreeNode>) -> usize {
            let id = nodes.len();
            nodes.push(TreeNode {
                id,
                split: None,
                children: None,
                node_mean: 0.0,
                members: vec![],
                depth,
                split_order: None,
            });
            if let Some(si) = s {
                let (cov, l, r) = splits[si];
                let li = build(splits, l, depth + 1, nodes);
                let ri = build(splits, r, depth + 1, nodes);
                nodes[id].split = Some(Split {
                    covariate: cov,
                    rule: SplitRule::Threshold { threshold: 0.0 },
                });
                nodes[id].children = Some((li, ri));
                nodes[id].split_order = Some(si);
            }
            id
        }
        build(splits, if splits.is_empty() { None } else { Some(0) }, 0, &mut nodes);
        Tree {
            nodes,
            mode: TreeMode::Fe,
            tau2_path: vec![],
            tau2: 0.0,
            controls: TreeControls::default(),
            covariates: (0..4).map(|j| CovariateMeta::metric(format!("x{j}"))).collect(),
        }
    }

    #[test]
    fn spec_from_paths() {
        assert!(tree_to_spec(&hand_tree(&[])).is_empty());
        // root Age(1), left child Time(0)
        let t = hand_tree(&[(1, Some(1), None), (0, None, None)]);
        let s = tree_to_spec(&t);
        assert_eq!(s.mains, [0, 1].into());
        assert_eq!(s.interactions, [(0, 1)].into());
        // root Age(1); children Time(0) and Disc(2) on separate branches
        let t = hand_tree(&[(1, Some(1), Some(2)), (0, None, None), (2, None, None)]);
        let s = tree_to_spec(&t);
        assert_eq!(s.interactions, [(0, 1), (1, 2)].into());
    }

    #[test]
    fn prune_with_zero_c_is_identity() {
        let k = 60;
        let x: Vec<f64> = (0..k).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let d = ds(&y, &vec![0.05; k], &[x]);
        let t = grow_tree(&d, TreeMode::Fe, &TreeControls::default());
        assert_eq!(prune_tree(&d, &t, PruneRule { c: 0.0 }, 1).unwrap(), t);
    }

    // Evaluates every (leaf, covariate, cut) partition directly through `qb`
    // and the subgroup DL estimator.
    fn brute_force_best(d: &MetaDataset, mode: TreeMode, partition: &[Vec<usize>], c: &TreeControls) -> f64 {
        let y = d.y();
        let v = d.v();
        let mut best = f64::NEG_INFINITY;
        for (g, members) in partition.iter().enumerate() {
            if members.len() < c.minsplit {
                continue;
            }
            for j in 0..d.p() {
                let mut vals: Vec<f64> = members.iter().map(|&i| d.studies()[i].x[j]).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    let t = 0.5 * (w[0] + w[1]);
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        members.iter().partition(|&&i| d.studies()[i].x[j] <= t);
                    if l.len() < c.minbucket || r.len() < c.minbucket {
                        continue;
                    }
                    let mut part = partition.to_vec();
                    part.splice(g..=g, [l, r]);
                    let tau2 = match mode {
                        TreeMode::Fe => 0.0,
                        TreeMode::Re => tau2_dl_partition(&y, &v, &part),
                    };
                    let wt: Vec<f64> = v.iter().map(|x| 1.0 / (x + tau2)).collect();
                    best = best.max(qb(&y, &wt, &part).unwrap());
                }
            }
        }
        best
    }

    fn random_ds(seed: u64, k: usize, p: usize) -> MetaDataset {
        use rand::Rng;
        let mut rng = seed::rng(seed);
        let cols: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..k).map(|_| (rng.random_range(0..12) as f64) * 0.5).collect())
            .collect();
        let y: Vec<f64> = (0..k).map(|i| 0.3 * cols[0][i] + rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..0.3)).collect();
        ds(&y, &v, &cols)
    }

    #[test]
    fn greedy_matches_brute_force() {
        let c = TreeControls {
            minsplit: 8,
            minbucket: 3,
            cp: 0.0,
            ..TreeControls::default()
        };
        for seed in 0..20 {
            let d = random_ds(seed, 30, 3);
            for mode in [TreeMode::Fe, TreeMode::Re] {
                let mut st = GrowState::new(&d, mode, c);
                for _ in 0..3 {
                    let Some(cand) = st.best_split() else { break };
                    let oracle = brute_force_best(&d, mode, &st.partition(), &c);
                    assert!(
                        (cand.qb - oracle).abs() <= 1e-9 * oracle.abs().max(1.0),
                        "seed {seed} {mode:?}: {} vs {oracle}",
                        cand.qb
                    );
                    st.apply(&cand);
                }
            }
        }
    }

    #[test]
    fn pruning_keeps_planted_step_and_drops_noise() {
        use rand::Rng;
        let k = 120;
        let mut rng = seed::rng(3);
        let x0: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let x1: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let v = vec![0.04; k];
        let y: Vec<f64> = (0..k)
            .map(|i| if x0[i] > 0.5 { 0.8 } else { 0.0 } + 0.2 * rng.random_range(-1.0..1.0))
            .collect();
        let d = ds(&y, &v, &[x0, x1]);
        let full = grow_tree(&d, TreeMode::Fe, &TreeControls::default());
        let pruned = prune_tree(&d, &full, PruneRule { c: 1.0 }, 11).unwrap();
        assert!(pruned.n_leaves() <= full.n_leaves());
        assert!(pruned.n_splits() >= 1);
        assert_eq!(pruned.nodes[0].split.unwrap().covariate, 0);
        assert_eq!(prune_tree(&d, &full, PruneRule { c: 1.0 }, 11).unwrap(), pruned);
    }

    #[test]
    fn json_and_text_render() {
        let k = 50;
        let x: Vec<f64> = (0..k).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| if *v > 24.0 { 1.0 } else { 0.0 }).collect();
        let d = ds(&y, &vec![0.1; k], &[x]);
        let t = grow_tree(&d, TreeMode::Re, &TreeControls::default());
        assert_eq!(t.tau2_path.len(), t.n_splits());
        let text = t.render_text();
        assert!(text.contains("x0 <= 24.5"), "{text}");
        let js = serde_json::to_string(&t.to_json_value()).unwrap();
        let back: TreeJson = serde_json::from_str(&js).unwrap();
        assert_eq!(back, t.to_json_value());
    }
}
