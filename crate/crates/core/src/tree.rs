//! Axis-aligned decision trees with exactly one leaf per cluster, built to
//! imitate a K-means partition while keeping the tree shallow.
//!
//! Construction is greedy and top-down. Each step splits one current leaf,
//! choosing among all mixed leaves, features and midpoint thresholds the
//! split that minimizes
//!
//! ```text
//! cost = total_mistakes / N + lambda * depth
//! ```
//!
//! where a sample is a mistake when its label differs from its region's
//! majority label. Once `k` leaves exist, leaves take their majority label;
//! if two leaves share a majority, labels are re-assigned by a minimum-cost
//! matching on the leaf × label mistake matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_LAMBDA: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        samples: usize,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        label: usize,
        samples: usize,
        mistakes: usize,
    },
}

impl Node {
    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn samples(&self) -> usize {
        match self {
            Node::Leaf { samples, .. } | Node::Split { samples, .. } => *samples,
        }
    }

    /// Leaves in left-to-right order.
    fn leaves<'a>(&'a self, out: &mut Vec<&'a Node>) {
        match self {
            Node::Leaf { .. } => out.push(self),
            Node::Split { left, right, .. } => {
                left.leaves(out);
                right.leaves(out);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShallowTree {
    pub schema_version: u32,
    pub n_features: usize,
    pub k: usize,
    pub lambda: f64,
    pub depth: usize,
    pub root: Node,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
}

/// One decision on a root-to-leaf path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub feature: usize,
    pub threshold: f64,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafStats {
    pub label: usize,
    pub samples: usize,
    pub mistakes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fidelity {
    /// Fraction of samples whose inferred label equals their cluster label.
    pub agreement: f64,
    /// Per leaf, left to right.
    pub leaves: Vec<LeafStats>,
}

impl ShallowTree {
    /// Validates a hand-assembled tree.
    pub fn from_root(root: Node, n_features: usize, k: usize, lambda: f64) -> Result<Self> {
        let tree = ShallowTree {
            schema_version: SCHEMA_VERSION,
            n_features,
            k,
            lambda,
            depth: root.depth(),
            root,
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Structure(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Structure(format!("bad lambda {}", self.lambda)));
        }
        fn walk(node: &Node, n_features: usize, depth: usize) -> Result<()> {
            if depth > 10_000 {
                return Err(Error::Structure("tree too deep".into()));
            }
            match node {
                Node::Leaf {
                    samples, mistakes, ..
                } => {
                    if mistakes > samples {
                        return Err(Error::Structure(format!(
                            "leaf reports {mistakes} mistakes among {samples} samples"
                        )));
                    }
                }
                Node::Split {
                    feature,
                    threshold,
                    samples,
                    left,
                    right,
                } => {
                    if *feature >= n_features {
                        return Err(Error::Structure(format!(
                            "split on feature {feature} of {n_features}"
                        )));
                    }
                    if !threshold.is_finite() {
                        return Err(Error::Structure("non-finite threshold".into()));
                    }
                    if left.samples().checked_add(right.samples()) != Some(*samples) {
                        return Err(Error::Structure(format!(
                            "node with {samples} samples has children holding {} + {}",
                            left.samples(),
                            right.samples()
                        )));
                    }
                    walk(left, n_features, depth + 1)?;
                    walk(right, n_features, depth + 1)?;
                }
            }
            Ok(())
        }
        walk(&self.root, self.n_features, 0)?;
        let mut seen = vec![false; self.k];
        let mut leaves = Vec::new();
        self.root.leaves(&mut leaves);
        if leaves.len() != self.k {
            return Err(Error::Structure(format!(
                "tree has {} leaves, expected {}",
                leaves.len(),
                self.k
            )));
        }
        for leaf in leaves {
            if let Node::Leaf { label, .. } = leaf {
                if *label >= self.k || std::mem::replace(&mut seen[*label], true) {
                    return Err(Error::Structure(format!(
                        "leaf label {label} is out of range or repeated"
                    )));
                }
            }
        }
        if self.depth != self.root.depth() {
            return Err(Error::Structure(format!(
                "declared depth {} but tree is {} deep",
                self.depth,
                self.root.depth()
            )));
        }
        Ok(())
    }

    /// Leaf label reached by `x` (ties on a threshold go left).
    pub fn infer(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.n_features {
            return Err(Error::Structure(format!(
                "vector of length {} given to a tree over {} features",
                x.len(),
                self.n_features
            )));
        }
        Ok(self.leaf_index_of(x).1)
    }

    /// `(leaf position left-to-right, label)`.
    fn leaf_index_of(&self, x: &[f64]) -> (usize, usize) {
        let mut node = &self.root;
        let mut offset = 0;
        loop {
            match node {
                Node::Leaf { label, .. } => return (offset, *label),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    if x[*feature] <= *threshold {
                        node = left;
                    } else {
                        offset += leaf_count(left);
                        node = right;
                    }
                }
            }
        }
    }

    pub fn leaf_stats(&self) -> Vec<LeafStats> {
        let mut leaves = Vec::new();
        self.root.leaves(&mut leaves);
        leaves
            .into_iter()
            .map(|l| match l {
                Node::Leaf {
                    label,
                    samples,
                    mistakes,
                } => LeafStats {
                    label: *label,
                    samples: *samples,
                    mistakes: *mistakes,
                },
                Node::Split { .. } => unreachable!(),
            })
            .collect()
    }

    /// Decisions from the root to the leaf carrying `label`.
    pub fn path_to(&self, label: usize) -> Option<Vec<PathStep>> {
        fn go(node: &Node, label: usize, path: &mut Vec<PathStep>) -> bool {
            match node {
                Node::Leaf { label: l, .. } => *l == label,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    for (dir, child) in [(Direction::Left, left), (Direction::Right, right)] {
                        path.push(PathStep {
                            feature: *feature,
                            threshold: *threshold,
                            direction: dir,
                        });
                        if go(child, label, path) {
                            return true;
                        }
                        path.pop();
                    }
                    false
                }
            }
        }
        let mut path = Vec::new();
        go(&self.root, label, &mut path).then_some(path)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tree: ShallowTree = serde_json::from_str(text)?;
        tree.validate()?;
        Ok(tree)
    }

    /// Indented rendering: feature, threshold and sample count per split;
    /// cluster, sample count and mistakes per leaf.
    pub fn render_text(&self) -> String {
        fn go(node: &Node, indent: usize, s: &mut String) {
            let pad = "  ".repeat(indent);
            match node {
                Node::Leaf {
                    label,
                    samples,
                    mistakes,
                } => {
                    let _ = writeln!(s, "{pad}leaf cluster={label} samples={samples} mistakes={mistakes}");
                }
                Node::Split {
                    feature,
                    threshold,
                    samples,
                    left,
                    right,
                } => {
                    let _ = writeln!(s, "{pad}f{feature} <= {threshold} samples={samples}");
                    go(left, indent + 1, s);
                    go(right, indent + 1, s);
                }
            }
        }
        let mut s = format!(
            "shallow tree: k={} features={} depth={} lambda={}\n",
            self.k, self.n_features, self.depth, self.lambda
        );
        go(&self.root, 0, &mut s);
        s
    }

    /// `position,label,samples,mistakes` per leaf.
    pub fn leaf_stats_csv(&self) -> String {
        let mut s = String::from("position,label,samples,mistakes\n");
        for (i, l) in self.leaf_stats().iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{}", l.label, l.samples, l.mistakes);
        }
        s
    }
}

fn leaf_count(node: &Node) -> usize {
    match node {
        Node::Leaf { .. } => 1,
        Node::Split { left, right, .. } => leaf_count(left) + leaf_count(right),
    }
}

/// Agreement between tree inference and `labels`, with per-leaf counts
/// recomputed from scratch.
pub fn fidelity(tree: &ShallowTree, x: &Matrix, labels: &[usize]) -> Result<Fidelity> {
    if x.nrows() != labels.len() {
        return Err(Error::Structure(format!(
            "{} samples but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    let mut leaves: Vec<LeafStats> = tree
        .leaf_stats()
        .into_iter()
        .map(|l| LeafStats {
            samples: 0,
            mistakes: 0,
            ..l
        })
        .collect();
    let mut agree = 0usize;
    for (row, &label) in x.rows().zip(labels) {
        if row.len() != tree.n_features {
            return Err(Error::Structure("feature dimension mismatch".into()));
        }
        let (pos, inferred) = tree.leaf_index_of(row);
        leaves[pos].samples += 1;
        if inferred == label {
            agree += 1;
        } else {
            leaves[pos].mistakes += 1;
        }
    }
    Ok(Fidelity {
        agreement: if labels.is_empty() {
            1.0
        } else {
            agree as f64 / labels.len() as f64
        },
        leaves,
    })
}

// ---------------------------------------------------------------------------
// Builder

#[derive(Clone, Copy, Debug, PartialEq)]
struct SplitChoice {
    feature: usize,
    threshold: f64,
    mistakes: usize,
    /// Size-weighted label entropy of the two sides, in nats.
    entropy: f64,
}

struct Region {
    members: Vec<usize>,
    depth: usize,
    mistakes: usize,
    best: Option<SplitChoice>,
}

/// Builder-internal tree shape; leaves refer to regions by index.
enum Shape {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Shape>,
        right: Box<Shape>,
    },
    Region(usize),
}

impl Shape {
    fn replace(&mut self, region: usize, with: Shape) -> bool {
        match self {
            Shape::Region(r) if *r == region => {
                *self = with;
                true
            }
            Shape::Region(_) => false,
            Shape::Split { left, right, .. } => {
                // `with` is moved into whichever branch holds the region.
                if contains(left, region) {
                    left.replace(region, with)
                } else {
                    right.replace(region, with)
                }
            }
        }
    }
}

fn contains(shape: &Shape, region: usize) -> bool {
    match shape {
        Shape::Region(r) => *r == region,
        Shape::Split { left, right, .. } => contains(left, region) || contains(right, region),
    }
}

fn label_counts(members: &[usize], labels: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &i in members {
        c[labels[i]] += 1;
    }
    c
}

/// Majority label, lowest id on ties.
fn majority(counts: &[usize]) -> (usize, usize) {
    counts
        .iter()
        .enumerate()
        .fold((0, 0), |(bl, bc), (l, &c)| if c > bc { (l, c) } else { (bl, bc) })
}

fn region_mistakes(members: &[usize], labels: &[usize], k: usize) -> usize {
    members.len() - majority(&label_counts(members, labels, k)).1
}

/// Entropy differences below this count as ties.
const ENTROPY_TIE: f64 = 1e-9;

/// `n·H` of a label histogram, in nats.
fn weighted_entropy(counts: impl Iterator<Item = usize>) -> f64 {
    let (mut n, mut acc) = (0usize, 0.0);
    for c in counts.filter(|&c| c > 0) {
        n += c;
        acc -= c as f64 * (c as f64).ln();
    }
    if n > 0 {
        acc += n as f64 * (n as f64).ln();
    }
    acc
}

/// Best split of one region: fewest resulting mistakes, then lowest child
/// entropy, then lowest feature, then lowest threshold.
///
/// Majority mistakes are flat over many cuts (peeling one pure cluster off
/// a region costs the same as halving it), so entropy decides among them.
fn best_split(x: &Matrix, labels: &[usize], k: usize, members: &[usize]) -> Option<SplitChoice> {
    let n = members.len();
    let total = label_counts(members, labels, k);
    if total.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let mut best: Option<SplitChoice> = None;
    let mut order = members.to_vec();
    for f in 0..x.ncols() {
        order.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)).then(a.cmp(&b)));
        let mut left = vec![0usize; k];
        let mut left_max = 0usize;
        for pos in 0..n - 1 {
            let l = labels[order[pos]];
            left[l] += 1;
            left_max = left_max.max(left[l]);
            let (v, next) = (x.get(order[pos], f), x.get(order[pos + 1], f));
            if v == next {
                continue;
            }
            let right_max = total
                .iter()
                .zip(&left)
                .map(|(t, l)| t - l)
                .max()
                .unwrap_or(0);
            let left_n = pos + 1;
            let mistakes = (left_n - left_max) + (n - left_n - right_max);
            if best.is_some_and(|b| mistakes > b.mistakes) {
                continue;
            }
            let entropy = weighted_entropy(left.iter().copied())
                + weighted_entropy(total.iter().zip(&left).map(|(t, l)| t - l));
            let mut threshold = v + (next - v) / 2.0;
            if threshold >= next || threshold < v {
                threshold = v;
            }
            let better = match best {
                None => true,
                // Earlier (feature, threshold) wins full ties.
                Some(b) => mistakes < b.mistakes || entropy < b.entropy - ENTROPY_TIE,
            };
            if better {
                best = Some(SplitChoice {
                    feature: f,
                    threshold,
                    mistakes,
                    entropy,
                });
            }
        }
    }
    best
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns `assignment[row] = column`.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Builds a tree over `x` (`N × n`) with exactly `k` leaves imitating
/// `labels` (values in `0..k`, each present).
pub fn build_tree(x: &Matrix, labels: &[usize], k: usize, lambda: f64) -> Result<ShallowTree> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::Structure(format!("{n} samples but {} labels", labels.len())));
    }
    if k < 2 {
        return Err(Error::InvalidConfig(format!("a tree needs k >= 2 leaves, got {k}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidConfig(format!("label {bad} outside 0..{k}")));
    }
    let mut present = vec![false; k];
    labels.iter().for_each(|&l| present[l] = true);
    let distinct = present.iter().filter(|&&p| p).count();
    if distinct < k {
        return Err(Error::InvalidConfig(format!(
            "labels contain {distinct} distinct clusters, need all {k}"
        )));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tree input features".into()));
    }

    let all: Vec<usize> = (0..n).collect();
    let mut regions = vec![Region {
        mistakes: region_mistakes(&all, labels, k),
        best: best_split(x, labels, k, &all),
        members: all,
        depth: 0,
    }];
    let mut shape = Shape::Region(0);
    let mut depth = 0usize;
    let mut total_mistakes = regions[0].mistakes;

    while regions.len() < k {
        // (cost, feature, threshold, region)
        let mut choice: Option<(f64, usize, f64, usize)> = None;
        for (ri, r) in regions.iter().enumerate() {
            let Some(s) = r.best else { continue };
            let new_depth = depth.max(r.depth + 1);
            let cost = (total_mistakes - r.mistakes + s.mistakes) as f64 / n as f64
                + lambda * new_depth as f64;
            let better = match choice {
                None => true,
                Some((c, f, t, _)) => {
                    cost < c || (cost == c && (s.feature < f || (s.feature == f && s.threshold < t)))
                }
            };
            if better {
                choice = Some((cost, s.feature, s.threshold, ri));
            }
        }
        let Some((_, feature, threshold, ri)) = choice else {
            return Err(Error::InvalidConfig(format!(
                "cannot reach {k} leaves: remaining mixed regions have no separating threshold"
            )));
        };
        let parent = std::mem::replace(
            &mut regions[ri],
            Region {
                members: Vec::new(),
                depth: 0,
                mistakes: 0,
                best: None,
            },
        );
        let (left, right): (Vec<usize>, Vec<usize>) = parent
            .members
            .iter()
            .partition(|&&i| x.get(i, feature) <= threshold);
        let child_depth = parent.depth + 1;
        depth = depth.max(child_depth);
        let lm = region_mistakes(&left, labels, k);
        let rm = region_mistakes(&right, labels, k);
        total_mistakes = total_mistakes - parent.mistakes + lm + rm;
        let right_index = regions.len();
        regions[ri] = Region {
            best: best_split(x, labels, k, &left),
            members: left,
            depth: child_depth,
            mistakes: lm,
        };
        regions.push(Region {
            best: best_split(x, labels, k, &right),
            members: right,
            depth: child_depth,
            mistakes: rm,
        });
        shape.replace(
            ri,
            Shape::Split {
                feature,
                threshold,
                left: Box::new(Shape::Region(ri)),
                right: Box::new(Shape::Region(right_index)),
            },
        );
    }

    let counts: Vec<Vec<usize>> = regions
        .iter()
        .map(|r| label_counts(&r.members, labels, k))
        .collect();
    let mut leaf_labels: Vec<usize> = counts.iter().map(|c| majority(c).0).collect();
    let mut sorted = leaf_labels.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < k {
        let cost: Vec<Vec<i64>> = regions
            .iter()
            .zip(&counts)
            .map(|(r, c)| c.iter().map(|&m| (r.members.len() - m) as i64).collect())
            .collect();
        leaf_labels = min_cost_assignment(&cost);
    }

    fn finish(shape: Shape, regions: &[Region], counts: &[Vec<usize>], labels: &[usize]) -> Node {
        match shape {
            Shape::Region(r) => {
                let samples = regions[r].members.len();
                Node::Leaf {
                    label: labels[r],
                    samples,
                    mistakes: samples - counts[r][labels[r]],
                }
            }
            Shape::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let left = finish(*left, regions, counts, labels);
                let right = finish(*right, regions, counts, labels);
                Node::Split {
                    feature,
                    threshold,
                    samples: left.samples() + right.samples(),
                    left: Box::new(left),
                    right: Box::new(right),
                }
            }
        }
    }
    let root = finish(shape, &regions, &counts, &leaf_labels);
    ShallowTree::from_root(root, x.ncols(), k, lambda)
}
