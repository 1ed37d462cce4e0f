//! CART decision tree with Gini impurity, built from scratch.
//!
//! Splits are axis-aligned `x[f] < t` tests with midpoint thresholds between
//! consecutive distinct values. Ties between candidate splits resolve toward
//! the lower feature index, then the lower threshold; majority-vote ties at
//! a leaf resolve toward the lower class index. Zero-decrease splits are
//! accepted on impure nodes so parity-style concepts stay learnable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum TreeNode {
    Leaf { class: usize },
    Split { feature: usize, threshold: f64, left: Box<TreeNode>, right: Box<TreeNode> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TreeModel {
    pub n_features: usize,
    pub n_classes: usize,
    pub max_depth: usize,
    pub root: TreeNode,
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let mut sum_sq = 0.0;
    for &c in counts {
        let p = c as f64 / total as f64;
        sum_sq += p * p;
    }
    1.0 - sum_sq
}

fn class_counts(y: &[usize], idx: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_classes];
    for &i in idx {
        counts[y[i]] += 1;
    }
    counts
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

fn build(x: &[Vec<f64>], y: &[usize], idx: &[usize], n_classes: usize, depth: usize) -> TreeNode {
    let counts = class_counts(y, idx, n_classes);
    let parent_gini = gini(&counts, idx.len());
    if depth == 0 || parent_gini == 0.0 {
        return TreeNode::Leaf { class: majority(&counts) };
    }

    let n_features = x[idx[0]].len();
    let mut best: Option<(f64, usize, f64)> = None; // (decrease, feature, threshold)
    for f in 0..n_features {
        let mut values: Vec<f64> = idx.iter().map(|&i| x[i][f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let left: Vec<usize> = idx.iter().copied().filter(|&i| x[i][f] < t).collect();
            let n_left = left.len();
            let n_right = idx.len() - n_left;
            debug_assert!(n_left > 0 && n_right > 0);
            let left_counts = class_counts(y, &left, n_classes);
            let right_counts: Vec<usize> =
                counts.iter().zip(&left_counts).map(|(&a, &b)| a - b).collect();
            let weighted = (n_left as f64 * gini(&left_counts, n_left)
                + n_right as f64 * gini(&right_counts, n_right))
                / idx.len() as f64;
            let decrease = parent_gini - weighted;
            // strict > keeps the first (lowest feature, lowest threshold) on ties
            if decrease >= 0.0 && best.map_or(true, |(d, _, _)| decrease > d) {
                best = Some((decrease, f, t));
            }
        }
    }

    match best {
        None => TreeNode::Leaf { class: majority(&counts) },
        Some((_, feature, threshold)) => {
            let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
                idx.iter().partition(|&&i| x[i][feature] < threshold);
            TreeNode::Split {
                feature,
                threshold,
                left: Box::new(build(x, y, &left_idx, n_classes, depth - 1)),
                right: Box::new(build(x, y, &right_idx, n_classes, depth - 1)),
            }
        }
    }
}

/// Fit a tree of at most `max_depth` splits along any root-to-leaf path.
pub fn decision_tree_fit(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    max_depth: usize,
) -> Result<TreeModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Contract {
            op: "decision_tree_fit",
            msg: format!("{} rows vs {} labels", x.len(), y.len()),
        });
    }
    if n_classes < 2 {
        return Err(Error::Contract { op: "decision_tree_fit", msg: "need at least 2 classes".into() });
    }
    let n_features = x[0].len();
    if n_features == 0 || x.iter().any(|r| r.len() != n_features) {
        return Err(Error::Contract { op: "decision_tree_fit", msg: "ragged or empty feature rows".into() });
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Contract {
            op: "decision_tree_fit",
            msg: format!("label {} out of range for {} classes", bad, n_classes),
        });
    }
    let idx: Vec<usize> = (0..x.len()).collect();
    let root = build(x, y, &idx, n_classes, max_depth);
    Ok(TreeModel { n_features, n_classes, max_depth, root })
}

impl TreeModel {
    pub fn predict_one(&self, row: &[f64]) -> Result<usize> {
        if row.len() != self.n_features {
            return Err(Error::Contract {
                op: "predict_one",
                msg: format!("row has {} features, tree expects {}", row.len(), self.n_features),
            });
        }
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { class } => return Ok(*class),
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if row[*feature] < *threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        x.iter().map(|r| self.predict_one(r)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
