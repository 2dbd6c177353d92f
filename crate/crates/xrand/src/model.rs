//! Trainable binary scorers: logistic regression (differentiable) and a
//! boosted stump ensemble (tree-flavored). Both map R^d to a score in
//! [0, 1]; prediction thresholds at 0.5.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PREDICTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
    pub stump_count: usize,
    pub stump_depth: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            iterations: 500,
            l2: 1e-4,
            stump_count: 100,
            stump_depth: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        TrainConfig {
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.l2 < 0.0 {
            return Err(Error::config("learning rate must be positive and l2 non-negative"));
        }
        if self.iterations == 0 || self.iterations > 1_000_000 {
            return Err(Error::config("iteration count must be in [1, 1e6]"));
        }
        if self.stump_count == 0 || self.stump_depth == 0 {
            return Err(Error::config("stump count and depth must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    Logistic,
    StumpEnsemble,
}

impl ScorerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ScorerKind::Logistic),
            "stump_ensemble" | "stumps" => Ok(ScorerKind::StumpEnsemble),
            other => Err(Error::config(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScorerKind::Logistic => "logistic",
            ScorerKind::StumpEnsemble => "stump_ensemble",
        }
    }
}

/// One node of a fitted regression tree, stored as a flat triple.
/// Depth-1 trees are plain decision stumps.
#[derive(Debug, Clone)]
struct TreeNode {
    feature: usize,
    threshold: f64,
    /// Leaf values when the node is terminal: (left = value for x <= thr).
    left: NodeChild,
    right: NodeChild,
}

#[derive(Debug, Clone)]
enum NodeChild {
    Leaf(f64),
    Node(Box<TreeNode>),
}

#[derive(Debug, Clone)]
pub enum Scorer {
    Logistic {
        weights: Vec<f64>,
        bias: f64,
    },
    StumpEnsemble {
        /// Additive logit model: prior + lr * sum of tree outputs.
        prior: f64,
        shrinkage: f64,
        trees: Vec<Tree>,
        n_features: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Tree {
    root: TreeNode,
}

impl Tree {
    fn eval(&self, x: &[f64]) -> f64 {
        let mut node = &self.root;
        loop {
            let child = if x[node.feature] <= node.threshold {
                &node.left
            } else {
                &node.right
            };
            match child {
                NodeChild::Leaf(v) => return *v,
                NodeChild::Node(n) => node = n,
            }
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Scorer {
    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::Logistic { .. } => ScorerKind::Logistic,
            Scorer::StumpEnsemble { .. } => ScorerKind::StumpEnsemble,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Scorer::Logistic { weights, .. } => weights.len(),
            Scorer::StumpEnsemble { n_features, .. } => *n_features,
        }
    }

    /// Raw additive model output (logit scale).
    pub fn logit(&self, x: &[f64]) -> f64 {
        match self {
            Scorer::Logistic { weights, bias } => {
                bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            }
            Scorer::StumpEnsemble {
                prior,
                shrinkage,
                trees,
                ..
            } => prior + shrinkage * trees.iter().map(|t| t.eval(x)).sum::<f64>(),
        }
    }

    /// Score in [0, 1]; the probability that `x` is malware.
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        if self.score(x) >= PREDICTION_THRESHOLD {
            1
        } else {
            0
        }
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let correct = (0..data.n_samples())
            .filter(|&i| self.predict(data.row(i)) == data.label(i))
            .count();
        correct as f64 / data.n_samples() as f64
    }

    /// Versioned flat-text serialization with exact f64 round-trip.
    pub fn to_text(&self) -> String {
        let mut out = String::from("xrand-scorer v1\n");
        match self {
            Scorer::Logistic { weights, bias } => {
                out.push_str("kind logistic\n");
                out.push_str(&format!("bias {}\n", fmt_f64(*bias)));
                out.push_str(&format!("weights {}\n", weights.len()));
                for w in weights {
                    out.push_str(&fmt_f64(*w));
                    out.push('\n');
                }
            }
            Scorer::StumpEnsemble {
                prior,
                shrinkage,
                trees,
                n_features,
            } => {
                out.push_str("kind stump_ensemble\n");
                out.push_str(&format!("n_features {n_features}\n"));
                out.push_str(&format!("prior {}\n", fmt_f64(*prior)));
                out.push_str(&format!("shrinkage {}\n", fmt_f64(*shrinkage)));
                out.push_str(&format!("trees {}\n", trees.len()));
                for tree in trees {
                    write_node(&mut out, &tree.root);
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Scorer> {
        let mut lines = text.lines();
        let bad = |msg: &str| Error::contract(format!("scorer file: {msg}"));
        if lines.next() != Some("xrand-scorer v1") {
            return Err(bad("unknown version header"));
        }
        let kind_line = lines.next().ok_or_else(|| bad("missing kind"))?;
        match kind_line {
            "kind logistic" => {
                let bias = parse_tagged(lines.next(), "bias")?;
                let count = parse_tagged(lines.next(), "weights")? as usize;
                let mut weights = Vec::with_capacity(count);
                for _ in 0..count {
                    let line = lines.next().ok_or_else(|| bad("truncated weights"))?;
                    weights.push(line.parse().map_err(|_| bad("bad weight"))?);
                }
                Ok(Scorer::Logistic { weights, bias })
            }
            "kind stump_ensemble" => {
                let n_features = parse_tagged(lines.next(), "n_features")? as usize;
                let prior = parse_tagged(lines.next(), "prior")?;
                let shrinkage = parse_tagged(lines.next(), "shrinkage")?;
                let count = parse_tagged(lines.next(), "trees")? as usize;
                let mut trees = Vec::with_capacity(count);
                for _ in 0..count {
                    trees.push(Tree {
                        root: read_node(&mut lines)?,
                    });
                }
                Ok(Scorer::StumpEnsemble {
                    prior,
                    shrinkage,
                    trees,
                    n_features,
                })
            }
            other => Err(bad(&format!("unknown kind line {other:?}"))),
        }
    }
}

/// 17 significant digits: enough for exact f64 round-trip.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_tagged(line: Option<&str>, tag: &str) -> Result<f64> {
    let line = line.ok_or_else(|| Error::contract(format!("scorer file: missing {tag}")))?;
    let rest = line
        .strip_prefix(tag)
        .ok_or_else(|| Error::contract(format!("scorer file: expected {tag}, got {line:?}")))?;
    rest.trim()
        .parse()
        .map_err(|_| Error::contract(format!("scorer file: bad value for {tag}")))
}

fn write_node(out: &mut String, node: &TreeNode) {
    out.push_str(&format!(
        "node {} {}\n",
        node.feature,
        fmt_f64(node.threshold)
    ));
    for child in [&node.left, &node.right] {
        match child {
            NodeChild::Leaf(v) => out.push_str(&format!("leaf {}\n", fmt_f64(*v))),
            NodeChild::Node(n) => write_node(out, n),
        }
    }
}

fn read_node<'a, I: Iterator<Item = &'a str> + Clone>(lines: &mut I) -> Result<TreeNode> {
    let bad = |msg: &str| Error::contract(format!("scorer file: {msg}"));
    let line = lines.next().ok_or_else(|| bad("truncated tree"))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some("node") {
        return Err(bad("expected node line"));
    }
    let feature = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad node feature"))?;
    let threshold = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad node threshold"))?;
    let mut children = Vec::with_capacity(2);
    for _ in 0..2 {
        // Peek is awkward with a plain iterator; clone to sniff the tag.
        let mut probe = lines.clone();
        match probe.next() {
            Some(l) if l.starts_with("leaf ") => {
                let l = lines.next().unwrap();
                let v = l[5..].parse().map_err(|_| bad("bad leaf value"))?;
                children.push(NodeChild::Leaf(v));
            }
            Some(_) => children.push(NodeChild::Node(Box::new(read_node(lines)?))),
            None => return Err(bad("truncated tree")),
        }
    }
    let right = children.pop().unwrap();
    let left = children.pop().unwrap();
    Ok(TreeNode {
        feature,
        threshold,
        left,
        right,
    })
}

/// Train a scorer of the given kind. Deterministic for a fixed config.
pub fn train(data: &Dataset, kind: ScorerKind, cfg: &TrainConfig) -> Result<Scorer> {
    cfg.validate()?;
    let (good, mal) = data.class_counts();
    if good == 0 || mal == 0 {
        return Err(Error::Train("training data must contain both classes".into()));
    }
    match kind {
        ScorerKind::Logistic => train_logistic(data, cfg),
        ScorerKind::StumpEnsemble => train_stumps(data, cfg),
    }
}

/// Full-batch gradient descent on L2-regularized cross-entropy. The step
/// size is halved whenever a step would increase the loss, so the loss
/// trace is non-increasing by construction.
fn train_logistic(data: &Dataset, cfg: &TrainConfig) -> Result<Scorer> {
    let n = data.n_samples();
    let d = data.n_features();
    let mut weights = vec![0.0; d];
    let mut bias = 0.0;
    let mut lr = cfg.learning_rate;
    let mut loss = logistic_loss(data, &weights, bias, cfg.l2);
    for _ in 0..cfg.iterations {
        let mut grad_w = vec![0.0; d];
        let mut grad_b = 0.0;
        for i in 0..n {
            let x = data.row(i);
            let err = sigmoid(bias + dot(&weights, x)) - data.label(i) as f64;
            grad_b += err;
            for (g, v) in grad_w.iter_mut().zip(x) {
                *g += err * v;
            }
        }
        let inv_n = 1.0 / n as f64;
        for (g, w) in grad_w.iter_mut().zip(&weights) {
            *g = *g * inv_n + cfg.l2 * w;
        }
        grad_b *= inv_n;
        loop {
            let cand_w: Vec<f64> = weights.iter().zip(&grad_w).map(|(w, g)| w - lr * g).collect();
            let cand_b = bias - lr * grad_b;
            let cand_loss = logistic_loss(data, &cand_w, cand_b, cfg.l2);
            if cand_loss <= loss || lr < 1e-12 {
                weights = cand_w;
                bias = cand_b;
                loss = cand_loss.min(loss);
                break;
            }
            lr *= 0.5;
        }
    }
    Ok(Scorer::Logistic { weights, bias })
}

pub fn logistic_loss(data: &Dataset, weights: &[f64], bias: f64, l2: f64) -> f64 {
    let n = data.n_samples();
    let mut loss = 0.0;
    for i in 0..n {
        let t = bias + dot(weights, data.row(i));
        let y = data.label(i) as f64;
        // log(1 + e^t) - y t, computed stably.
        loss += t.max(0.0) + (-t.abs()).exp().ln_1p() - y * t;
    }
    loss / n as f64 + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Greedy gradient boosting of shallow regression trees on logistic loss.
fn train_stumps(data: &Dataset, cfg: &TrainConfig) -> Result<Scorer> {
    let n = data.n_samples();
    let d = data.n_features();
    let (good, mal) = data.class_counts();
    let prior = ((mal as f64 + 0.5) / (good as f64 + 0.5)).ln();
    let mut logits = vec![prior; n];
    let mut trees = Vec::with_capacity(cfg.stump_count);
    // Candidate thresholds: midpoints between adjacent pool values.
    let thresholds: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let pool = data.value_pool(j);
            pool.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
        })
        .collect();
    for _ in 0..cfg.stump_count {
        let grad: Vec<f64> = (0..n)
            .map(|i| data.label(i) as f64 - sigmoid(logits[i]))
            .collect();
        let hess: Vec<f64> = (0..n)
            .map(|i| {
                let p = sigmoid(logits[i]);
                (p * (1.0 - p)).max(1e-9)
            })
            .collect();
        let rows: Vec<usize> = (0..n).collect();
        let root = fit_node(data, &rows, &grad, &hess, &thresholds, cfg.stump_depth);
        let tree = Tree { root };
        for i in 0..n {
            logits[i] += cfg.learning_rate * tree.eval(data.row(i));
        }
        trees.push(tree);
    }
    Ok(Scorer::StumpEnsemble {
        prior,
        shrinkage: cfg.learning_rate,
        trees,
        n_features: d,
    })
}

/// Newton leaf value for a set of rows.
fn leaf_value(rows: &[usize], grad: &[f64], hess: &[f64]) -> f64 {
    let g: f64 = rows.iter().map(|&i| grad[i]).sum();
    let h: f64 = rows.iter().map(|&i| hess[i]).sum();
    (g / (h + 1e-9)).clamp(-4.0, 4.0)
}

fn fit_node(
    data: &Dataset,
    rows: &[usize],
    grad: &[f64],
    hess: &[f64],
    thresholds: &[Vec<f64>],
    depth: usize,
) -> TreeNode {
    let d = data.n_features();
    // Best split by exact gain over all (feature, threshold) pairs.
    let best = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut best: Option<(f64, usize, f64)> = None;
            for &thr in &thresholds[j] {
                let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
                for &i in rows {
                    if data.row(i)[j] <= thr {
                        gl += grad[i];
                        hl += hess[i];
                    } else {
                        gr += grad[i];
                        hr += hess[i];
                    }
                }
                if hl < 1e-12 || hr < 1e-12 {
                    continue;
                }
                let gain = gl * gl / hl + gr * gr / hr;
                if best.map_or(true, |(g, _, _)| gain > g) {
                    best = Some((gain, j, thr));
                }
            }
            best
        })
        .reduce(
            || None,
            // Deterministic tie-break: larger gain, then smaller feature index.
            |a, b| match (a, b) {
                (None, b) => b,
                (a, None) => a,
                (Some(x), Some(y)) => {
                    if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) {
                        Some(y)
                    } else {
                        Some(x)
                    }
                }
            },
        );
    let Some((_, feature, threshold)) = best else {
        // No valid split; emit a degenerate node with equal leaves.
        let v = leaf_value(rows, grad, hess);
        return TreeNode {
            feature: 0,
            threshold: f64::INFINITY,
            left: NodeChild::Leaf(v),
            right: NodeChild::Leaf(v),
        };
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&i| data.row(i)[feature] <= threshold);
    let child = |side_rows: &[usize]| {
        if depth > 1 && side_rows.len() >= 4 {
            NodeChild::Node(Box::new(fit_node(
                data, side_rows, grad, hess, thresholds, depth - 1,
            )))
        } else {
            NodeChild::Leaf(leaf_value(side_rows, grad, hess))
        }
    };
    TreeNode {
        feature,
        threshold,
        left: child(&left_rows),
        right: child(&right_rows),
    }
}

/// Train `n_models` scorers, each on an independent with-replacement draw of
/// exactly `subsample_size` rows. Subsample m is drawn from substream m of
/// `rng`, so parallel and serial execution agree.
pub fn subsample_train(
    data: &Dataset,
    subsample_size: usize,
    n_models: usize,
    kind: ScorerKind,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<Vec<Scorer>> {
    if n_models == 0 {
        return Err(Error::config("n_models must be positive"));
    }
    if subsample_size == 0 {
        return Err(Error::config("subsample_size must be positive"));
    }
    (0..n_models)
        .into_par_iter()
        .map(|m| {
            let mut sub_rng = rng.derive(m as u64);
            let indices: Vec<usize> = (0..subsample_size)
                .map(|_| sub_rng.below(data.n_samples()))
                .collect();
            let mut subset = data.select(&indices)?;
            // A bootstrap draw can be single-class; resample a few times
            // before giving up.
            let mut attempts = 0;
            loop {
                let (g, m_count) = subset.class_counts();
                if g > 0 && m_count > 0 {
                    break;
                }
                attempts += 1;
                if attempts > 50 {
                    return Err(Error::Train(
                        "bootstrap subsample kept drawing a single class".into(),
                    ));
                }
                let indices: Vec<usize> = (0..subsample_size)
                    .map(|_| sub_rng.below(data.n_samples()))
                    .collect();
                subset = data.select(&indices)?;
            }
            train(&subset, kind, cfg)
        })
        .collect()
}

/// Majority vote over an ensemble.
pub fn majority_vote(models: &[Scorer], x: &[f64]) -> u8 {
    let ones = models.iter().filter(|m| m.predict(x) == 1).count();
    if 2 * ones > models.len() {
        1
    } else {
        0
    }
}
