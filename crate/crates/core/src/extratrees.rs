//! Extra-trees classifier: unpruned Gini trees over per-tree random feature
//! subsets, thresholds chosen by an exhaustive midpoint scan.
//!
//! Split candidates are compared with integer arithmetic. For a split of a
//! node with class counts into parts L and R,
//! `Gini = 1 - (S_L / |L| + S_R / |R|) / |D|` where `S = sum_c count_c^2`, so
//! minimizing Gini is maximizing `S_L·|R| + S_R·|L|` over `|L|·|R|`.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result, Shape};
use crate::numerics::{argmax, derive_seed, Matrix, Scalar, SeededRng};

pub const DEFAULT_N_ESTIMATORS: usize = 112;
pub const DEFAULT_MAX_DEPTH: usize = 31;

/// `1 - sum_i p_i^2` over the label multiset.
pub fn gini_subset(labels: &[usize], n: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("gini subset"));
    }
    let counts = histogram(labels, n)?;
    let total = labels.len() as f64;
    Ok(1.0 - counts.iter().map(|&c| (c as f64 / total).powi(2)).sum::<f64>())
}

/// Size-weighted Gini of a two-way split. An empty side contributes nothing.
pub fn gini_split(left: &[usize], right: &[usize], n: usize) -> Result<f64> {
    let total = (left.len() + right.len()) as f64;
    if total == 0.0 {
        return Err(Error::Empty("gini split"));
    }
    let mut g = 0.0;
    for side in [left, right] {
        if !side.is_empty() {
            g += side.len() as f64 / total * gini_subset(side, n)?;
        }
    }
    Ok(g)
}

fn histogram(labels: &[usize], n: usize) -> Result<Vec<u32>> {
    let mut counts = vec![0u32; n];
    for &l in labels {
        if l >= n {
            return Err(invalid(format!("label {l} outside 0..{n}")));
        }
        counts[l] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split<T> {
    pub feature: usize,
    pub threshold: T,
    pub gini: f64,
}

/// Exact split score `num / den`, larger is better.
#[derive(Clone, Copy)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    fn beats(self, other: Score) -> bool {
        self.num * other.den > other.num * self.den
    }
}

fn midpoint<T: Scalar>(a: T, b: T) -> T {
    let m = a + (b - a) / T::lit(2.0);
    if m >= b || m < a {
        a
    } else {
        m
    }
}

/// Best split of the samples `idx` over `candidates`, scanning midpoints of
/// consecutive distinct values. Ties go to the lower feature index, then the
/// lower threshold. `None` when no candidate feature has two distinct values.
fn best_split_indices<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    idx: &[usize],
    candidates: &[usize],
    n: usize,
    scratch: &mut Vec<(T, usize)>,
) -> Option<Split<T>> {
    let total = idx.len();
    let mut all = vec![0u64; n];
    for &i in idx {
        all[labels[i]] += 1;
    }
    let s_all: u64 = all.iter().map(|c| c * c).sum();
    let mut best: Option<(Score, usize, T)> = None;
    let mut left = vec![0u64; n];
    for &f in candidates {
        scratch.clear();
        scratch.extend(idx.iter().map(|&i| (features.get(i, f), labels[i])));
        scratch.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
        left.iter_mut().for_each(|c| *c = 0);
        let (mut s_left, mut s_right) = (0u64, s_all);
        for k in 0..total - 1 {
            let c = scratch[k].1;
            s_left += 2 * left[c] + 1;
            s_right -= 2 * (all[c] - left[c]) - 1;
            left[c] += 1;
            if scratch[k].0 == scratch[k + 1].0 {
                continue;
            }
            let nl = (k + 1) as u128;
            let nr = (total - k - 1) as u128;
            let score = Score {
                num: s_left as u128 * nr + s_right as u128 * nl,
                den: nl * nr,
            };
            if best.as_ref().is_none_or(|(b, _, _)| score.beats(*b)) {
                best = Some((score, f, midpoint(scratch[k].0, scratch[k + 1].0)));
            }
        }
    }
    best.map(|(score, feature, threshold)| Split {
        feature,
        threshold,
        gini: 1.0 - score.num as f64 / (score.den as f64 * total as f64),
    })
}

/// Minimum-Gini split over all rows of `features`.
pub fn best_split<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    candidates: &[usize],
    n: usize,
) -> Result<Option<Split<T>>> {
    check_inputs(features, labels, n)?;
    if features.rows() < 2 {
        return Err(invalid("best_split needs at least 2 samples"));
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if let Some(&f) = cands.iter().find(|&&f| f >= features.cols()) {
        return Err(invalid(format!("feature {f} outside 0..{}", features.cols())));
    }
    let idx: Vec<usize> = (0..features.rows()).collect();
    Ok(best_split_indices(features, labels, &idx, &cands, n, &mut Vec::new()))
}

fn check_inputs<T: Scalar>(features: &Matrix<T>, labels: &[usize], n: usize) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "features vs labels",
            left: features.shape(),
            right: Shape(labels.len(), 1),
        });
    }
    if n == 0 {
        return Err(invalid("class count must be positive"));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= n) {
        return Err(invalid(format!("label {l} outside 0..{n}")));
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(invalid("features contain non-finite values"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode<T> {
    /// Values `<= threshold` go to `left`.
    Split {
        feature: usize,
        threshold: T,
        left: usize,
        right: usize,
    },
    Leaf { counts: Vec<u32> },
}

/// Nodes stored in preorder; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree<T> {
    pub nodes: Vec<TreeNode<T>>,
}

impl<T: Scalar> Tree<T> {
    pub fn leaf_for(&self, x: &[T]) -> &[u32] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] <= *threshold { *left } else { *right },
                TreeNode::Leaf { counts } => return counts,
            }
        }
    }

    /// Edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        let mut deepest = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((at, d)) = stack.pop() {
            deepest = deepest.max(d);
            if let TreeNode::Split { left, right, .. } = self.nodes[at] {
                stack.push((left, d + 1));
                stack.push((right, d + 1));
            }
        }
        deepest
    }

    /// Rebuilds child links from a preorder node list and checks its shape.
    pub fn from_preorder(nodes: Vec<TreeNode<T>>, class_count: usize, feature_count: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(invalid("tree has no nodes"));
        }
        let mut next = 0;
        let mut nodes = nodes;
        link_preorder(&mut nodes, &mut next)?;
        if next != nodes.len() {
            return Err(invalid("tree has unreachable nodes"));
        }
        for node in &nodes {
            match node {
                TreeNode::Split { feature, threshold, .. } => {
                    if *feature >= feature_count || !threshold.is_finite() {
                        return Err(invalid("tree split refers to an invalid feature or threshold"));
                    }
                }
                TreeNode::Leaf { counts } => {
                    if counts.len() != class_count || counts.iter().all(|&c| c == 0) {
                        return Err(invalid("tree leaf histogram is empty or has the wrong width"));
                    }
                }
            }
        }
        Ok(Tree { nodes })
    }
}

// Iterative so deep trees cannot overflow the call stack.
fn link_preorder<T>(nodes: &mut [TreeNode<T>], next: &mut usize) -> Result<usize> {
    let root = *next;
    let mut pending: Vec<usize> = Vec::new();
    loop {
        let at = *next;
        if at >= nodes.len() {
            return Err(invalid("tree node list ends early"));
        }
        *next += 1;
        if let TreeNode::Split { left, .. } = &mut nodes[at] {
            *left = at + 1;
            pending.push(at);
            continue;
        }
        match pending.pop() {
            None => return Ok(root),
            Some(parent) => {
                if let TreeNode::Split { right, .. } = &mut nodes[parent] {
                    *right = *next;
                }
            }
        }
    }
}

/// Grows one unpruned tree on rows `sample` of `features`.
pub fn build_tree<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    sample: &[usize],
    subset: &[usize],
    max_depth: usize,
    n: usize,
) -> Result<Tree<T>> {
    check_inputs(features, labels, n)?;
    if sample.is_empty() {
        return Err(Error::Empty("tree sample"));
    }
    if sample.iter().any(|&i| i >= features.rows()) || subset.iter().any(|&f| f >= features.cols()) {
        return Err(invalid("tree sample or feature subset out of range"));
    }
    let mut cands = subset.to_vec();
    cands.sort_unstable();
    cands.dedup();
    let mut idx = sample.to_vec();
    let mut nodes: Vec<TreeNode<T>> = Vec::new();
    let mut scratch = Vec::new();
    // (range start, range end, depth, parent split awaiting this child as its right child)
    let mut stack: Vec<(usize, usize, usize, Option<usize>)> = vec![(0, idx.len(), 0, None)];
    while let Some((lo, hi, depth, parent)) = stack.pop() {
        let me = nodes.len();
        if let Some(p) = parent {
            if let TreeNode::Split { right, .. } = &mut nodes[p] {
                *right = me;
            }
        }
        let part = &mut idx[lo..hi];
        let counts = histogram(&part.iter().map(|&i| labels[i]).collect::<Vec<_>>(), n)?;
        let pure = counts.iter().filter(|&&c| c > 0).count() == 1;
        let split = if pure || depth >= max_depth || part.len() < 2 {
            None
        } else {
            best_split_indices(features, labels, part, &cands, n, &mut scratch)
        };
        let Some(split) = split else {
            nodes.push(TreeNode::Leaf { counts });
            continue;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = part
            .iter()
            .partition(|&&i| features.get(i, split.feature) <= split.threshold);
        let mid = lo + l.len();
        idx[lo..mid].copy_from_slice(&l);
        idx[mid..hi].copy_from_slice(&r);
        nodes.push(TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: me + 1,
            right: usize::MAX,
        });
        stack.push((mid, hi, depth + 1, Some(me)));
        stack.push((lo, mid, depth + 1, None));
    }
    Ok(Tree { nodes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    /// Features drawn per tree; `None` means `ceil(sqrt(d))`.
    pub subset_size: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_estimators: DEFAULT_N_ESTIMATORS,
            max_depth: DEFAULT_MAX_DEPTH,
            subset_size: None,
            bootstrap: false,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn resolved_subset_size(&self, feature_count: usize) -> usize {
        self.subset_size
            .unwrap_or_else(|| (feature_count as f64).sqrt().ceil() as usize)
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel<T> {
    pub trees: Vec<Tree<T>>,
    /// Sorted feature indices available to each tree.
    pub subsets: Vec<Vec<usize>>,
    pub n_estimators: usize,
    pub max_depth: usize,
    pub class_count: usize,
    pub feature_count: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

pub fn fit_forest<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    class_count: usize,
    config: &ForestConfig,
) -> Result<ForestModel<T>> {
    check_inputs(features, labels, class_count)?;
    let (rows, d) = (features.rows(), features.cols());
    if rows < 2 || d == 0 {
        return Err(invalid("forest needs at least 2 samples and 1 feature"));
    }
    if config.n_estimators == 0 {
        return Err(invalid("n_estimators must be at least 1"));
    }
    let k = config.resolved_subset_size(d);
    if k > d {
        return Err(invalid(format!("subset size {k} exceeds feature count {d}")));
    }
    let built: Vec<Result<(Tree<T>, Vec<usize>)>> = (0..config.n_estimators)
        .into_par_iter()
        .map(|t| {
            let mut rng = SeededRng::new(derive_seed(config.seed, t as u64));
            let mut subset = rng.sample_indices(d, k);
            subset.sort_unstable();
            let sample: Vec<usize> = if config.bootstrap {
                (0..rows).map(|_| rng.below(rows)).collect()
            } else {
                (0..rows).collect()
            };
            let tree = build_tree(features, labels, &sample, &subset, config.max_depth, class_count)?;
            Ok((tree, subset))
        })
        .collect();
    let mut trees = Vec::with_capacity(built.len());
    let mut subsets = Vec::with_capacity(built.len());
    for b in built {
        let (t, s) = b?;
        trees.push(t);
        subsets.push(s);
    }
    Ok(ForestModel {
        trees,
        subsets,
        n_estimators: config.n_estimators,
        max_depth: config.max_depth,
        class_count,
        feature_count: d,
        bootstrap: config.bootstrap,
        seed: config.seed,
    })
}

/// Mean of per-tree leaf distributions and its argmax (ties to the lower class).
pub fn predict_forest<T: Scalar>(model: &ForestModel<T>, x: &[T]) -> Result<(usize, Vec<T>)> {
    if x.len() != model.feature_count {
        return Err(Error::DimensionMismatch {
            context: "forest input",
            left: Shape(model.feature_count, 1),
            right: Shape(x.len(), 1),
        });
    }
    if model.trees.is_empty() {
        return Err(Error::Empty("forest"));
    }
    let mut probs = vec![T::zero(); model.class_count];
    for tree in &model.trees {
        let counts = tree.leaf_for(x);
        let total = T::from_u64(counts.iter().map(|&c| u64::from(c)).sum()).unwrap();
        for (p, &c) in probs.iter_mut().zip(counts) {
            *p = *p + T::from_u32(c).unwrap() / total;
        }
    }
    let trees = T::from_usize(model.trees.len()).unwrap();
    probs.iter_mut().for_each(|p| *p = *p / trees);
    Ok((argmax(&probs), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(values: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini_subset(&[1, 1, 1], 3).unwrap(), 0.0);
        assert_eq!(gini_subset(&[0, 1], 2).unwrap(), 0.5);
        assert!((gini_subset(&[0, 0, 1, 2], 3).unwrap() - 0.625).abs() < 1e-15);
        assert!(gini_subset(&[], 2).is_err());
        assert!((gini_split(&[0, 0], &[0, 1], 2).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(gini_split(&[0, 0], &[1], 2).unwrap(), 0.0);
        assert_eq!(
            gini_split(&[0, 1, 2, 2], &[], 3).unwrap(),
            gini_subset(&[0, 1, 2, 2], 3).unwrap()
        );
        assert!(gini_split(&[], &[], 2).is_err());
    }

    #[test]
    fn best_split_examples() {
        let s = best_split(&column(&[1.0, 2.0, 3.0, 4.0]), &[0, 0, 1, 1], &[0], 2)
            .unwrap()
            .unwrap();
        assert_eq!((s.feature, s.threshold, s.gini), (0, 2.5, 0.0));
        assert!(best_split(&column(&[7.0; 4]), &[0, 1, 0, 1], &[0], 2).unwrap().is_none());
    }

    #[test]
    fn ties_prefer_lower_feature_then_threshold() {
        // Both features separate perfectly.
        let m = Matrix::from_rows(&[vec![0.0, 5.0], vec![1.0, 6.0], vec![2.0, 7.0]]).unwrap();
        let s = best_split(&m, &[0, 1, 1], &[1, 0], 2).unwrap().unwrap();
        assert_eq!((s.feature, s.threshold), (0, 0.5));
        // Two equally good thresholds on one feature.
        let s = best_split(&column(&[0.0, 1.0, 2.0, 3.0]), &[0, 1, 1, 0], &[0], 2).unwrap().unwrap();
        assert_eq!(s.threshold, 0.5);
    }

    #[test]
    fn tree_examples() {
        let m = column(&[1.0, 2.0, 3.0]);
        let t = build_tree(&m, &[2, 2, 2], &[0, 1, 2], &[0], 10, 3).unwrap();
        assert_eq!(t.nodes, vec![TreeNode::Leaf { counts: vec![0, 0, 3] }]);
        let t = build_tree(&m, &[0, 1, 1], &[0, 1, 2], &[0], 0, 2).unwrap();
        assert_eq!(t.nodes, vec![TreeNode::Leaf { counts: vec![1, 2] }]);
    }

    #[test]
    fn xor_tree() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let labels = [0, 1, 1, 0];
        let t = build_tree(&m, &labels, &[0, 1, 2, 3], &[0, 1], 31, 2).unwrap();
        assert_eq!(t.depth(), 2);
        assert_eq!(t.nodes.len(), 7);
        for r in 0..4 {
            let counts = t.leaf_for(m.row(r));
            assert_eq!(argmax(counts), labels[r]);
        }
        // Root tie between features goes to feature 0 at 0.5.
        assert!(matches!(t.nodes[0], TreeNode::Split { feature: 0, threshold, .. } if threshold == 0.5));
    }

    #[test]
    fn preorder_relink_roundtrip() {
        let mut rng = SeededRng::new(4);
        let m = Matrix::from_fn(40, 3, |_, _| rng.uniform(0.0, 1.0));
        let labels: Vec<usize> = (0..40).map(|_| rng.below(3)).collect();
        let all: Vec<usize> = (0..40).collect();
        let t = build_tree(&m, &labels, &all, &[0, 1, 2], 31, 3).unwrap();
        let scrubbed = t
            .nodes
            .iter()
            .map(|n| match n {
                TreeNode::Split { feature, threshold, .. } => TreeNode::Split {
                    feature: *feature,
                    threshold: *threshold,
                    left: 0,
                    right: 0,
                },
                leaf => leaf.clone(),
            })
            .collect();
        assert_eq!(Tree::from_preorder(scrubbed, 3, 3).unwrap(), t);
        let mut truncated = t.nodes.clone();
        truncated.pop();
        assert!(Tree::from_preorder(truncated, 3, 3).is_err());
    }

    #[test]
    fn forest_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let labels = [0, 1, 1];
        let one = fit_forest(
            &m,
            &labels,
            2,
            &ForestConfig {
                n_estimators: 1,
                subset_size: Some(2),
                ..ForestConfig::default()
            },
        )
        .unwrap();
        let direct = build_tree(&m, &labels, &[0, 1, 2], &[0, 1], 31, 2).unwrap();
        assert_eq!(one.trees[0], direct);
        let cfg = ForestConfig {
            n_estimators: 5,
            seed: 9,
            ..ForestConfig::default()
        };
        assert_eq!(fit_forest(&m, &labels, 2, &cfg).unwrap(), fit_forest(&m, &labels, 2, &cfg).unwrap());
        let too_big = ForestConfig {
            subset_size: Some(3),
            ..ForestConfig::default()
        };
        assert!(fit_forest(&m, &labels, 2, &too_big).is_err());
        assert!(predict_forest(&one, &[0.0]).is_err());
    }

    #[test]
    fn forest_vote_tie_goes_to_lower_class() {
        let leaf = |counts: Vec<u32>| Tree {
            nodes: vec![TreeNode::Leaf { counts }],
        };
        let model = ForestModel {
            trees: vec![leaf(vec![1, 0]), leaf(vec![0, 1])],
            subsets: vec![vec![0], vec![0]],
            n_estimators: 2,
            max_depth: 31,
            class_count: 2,
            feature_count: 1,
            bootstrap: false,
            seed: 0,
        };
        assert_eq!(predict_forest(&model, &[0.0]).unwrap(), (0, vec![0.5, 0.5]));
        let single = ForestModel {
            trees: vec![leaf(vec![0, 4])],
            subsets: vec![vec![0]],
            n_estimators: 1,
            ..model
        };
        assert_eq!(predict_forest(&single, &[3.0]).unwrap(), (1, vec![0.0, 1.0]));
    }

    #[test]
    fn bootstrap_changes_trees() {
        let mut rng = SeededRng::new(1);
        let m = Matrix::from_fn(30, 2, |_, _| rng.uniform(0.0, 1.0));
        let labels: Vec<usize> = (0..30).map(|_| rng.below(2)).collect();
        let base = ForestConfig {
            n_estimators: 3,
            subset_size: Some(2),
            ..ForestConfig::default()
        };
        let boot = ForestConfig {
            bootstrap: true,
            ..base.clone()
        };
        let a = fit_forest(&m, &labels, 2, &base).unwrap();
        let b = fit_forest(&m, &labels, 2, &boot).unwrap();
        assert_ne!(a.trees, b.trees);
    }

    proptest! {
        #[test]
        fn gini_bounds(labels in proptest::collection::vec(0usize..4, 1..40)) {
            let g = gini_subset(&labels, 4).unwrap();
            prop_assert!((0.0..=0.75 + 1e-15).contains(&g));
        }

        #[test]
        fn memorization(rows in proptest::collection::vec((0u8..6, 0u8..6, 0usize..3), 2..40)) {
            let mut seen = std::collections::HashMap::new();
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for (a, b, l) in rows {
                if *seen.entry((a, b)).or_insert(l) == l {
                    data.push(vec![f64::from(a), f64::from(b)]);
                    labels.push(l);
                }
            }
            prop_assume!(data.len() >= 2);
            let m = Matrix::from_rows(&data).unwrap();
            let cfg = ForestConfig { n_estimators: 1, max_depth: usize::MAX, subset_size: Some(2), ..ForestConfig::default() };
            let forest = fit_forest(&m, &labels, 3, &cfg).unwrap();
            for (r, &l) in labels.iter().enumerate() {
                let (c, p) = predict_forest(&forest, m.row(r)).unwrap();
                prop_assert_eq!(c, l);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            prop_assert!(forest.trees[0].depth() <= labels.len());
        }
    }

    #[test]
    fn gini_maximum_at_uniform() {
        let g = gini_subset(&[0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
        assert!((g - 0.75).abs() < 1e-15);
    }
}
