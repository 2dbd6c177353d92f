//! Perturbation-based local linear surrogate explanations.
//!
//! An explanation is the weighted-least-squares minimizer of
//! sum over z in N(x) of (g(z) - f(z))^2 * exp(-||z - x||^2 / sigma^2)
//! with g(z) = w0 + w.z, over a neighborhood N(x) generated by masking
//! features toward a reference vector (or Gaussian jitter).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::Scorer;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub enum PerturbScheme {
    /// Each neighbor keeps every coordinate of x independently with
    /// probability 1/2 and takes the reference value otherwise.
    MaskToReference,
    /// Additive Gaussian jitter with the given standard deviation.
    GaussianJitter(f64),
}

#[derive(Debug, Clone)]
pub enum KernelWidth {
    Fixed(f64),
    /// sigma = factor * mean pairwise distance among neighborhood points.
    MeanPairwise(f64),
}

#[derive(Debug, Clone)]
pub struct NeighborhoodSpec {
    pub n_neighbors: usize,
    pub kernel_width: KernelWidth,
    pub scheme: PerturbScheme,
    pub reference: Vec<f64>,
    pub seed: u64,
}

impl NeighborhoodSpec {
    /// Default surrogate practice: 2d+10 neighbors, masking toward the
    /// training-set feature means, sigma = 0.75 * mean pairwise distance.
    pub fn defaults(reference: Vec<f64>, seed: u64) -> Self {
        let d = reference.len();
        NeighborhoodSpec {
            n_neighbors: 2 * d + 10,
            kernel_width: KernelWidth::MeanPairwise(0.75),
            scheme: PerturbScheme::MaskToReference,
            reference,
            seed,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.reference.len() != d {
            return Err(Error::config(format!(
                "reference vector has {} entries, expected {d}",
                self.reference.len()
            )));
        }
        if self.n_neighbors < d + 2 {
            return Err(Error::config(format!(
                "n_neighbors = {} must be at least d + 2 = {}",
                self.n_neighbors,
                d + 2
            )));
        }
        match self.kernel_width {
            KernelWidth::Fixed(s) if !(s > 0.0) => {
                Err(Error::config("kernel width must be positive"))
            }
            KernelWidth::MeanPairwise(f) if !(f > 0.0) => {
                Err(Error::config("kernel width factor must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// The sampled neighborhood of one explained point, cached so that later
/// passes (loss deltas, the constrained correction) reuse the identical
/// N(x), scores and kernel weights.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    /// Row-major n x d perturbed points.
    pub points: Vec<f64>,
    /// f(z) for each point.
    pub scores: Vec<f64>,
    /// exp(-||z - x||^2 / sigma^2) for each point.
    pub weights: Vec<f64>,
    pub x: Vec<f64>,
    pub sigma: f64,
    pub n: usize,
    pub d: usize,
}

impl Neighborhood {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    /// Loss of an arbitrary surrogate (intercept, values) on this
    /// neighborhood.
    pub fn loss_of(&self, intercept: f64, values: &[f64]) -> f64 {
        let mut loss = 0.0;
        for i in 0..self.n {
            let z = self.point(i);
            let g: f64 = intercept + values.iter().zip(z).map(|(w, v)| w * v).sum::<f64>();
            let r = g - self.scores[i];
            loss += self.weights[i] * r * r;
        }
        loss
    }
}

/// Sample-level explanation: attribution vector, intercept and the cached
/// neighborhood that produced it.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub values: Vec<f64>,
    pub intercept: f64,
    pub sample_ref: usize,
    pub neighborhood: Neighborhood,
}

impl Explanation {
    pub fn d(&self) -> usize {
        self.values.len()
    }

    /// Explanation loss of this surrogate on its own neighborhood.
    pub fn loss(&self) -> f64 {
        self.neighborhood.loss_of(self.intercept, &self.values)
    }

    /// Loss after replacing the attribution vector (intercept kept).
    pub fn loss_with(&self, values: &[f64]) -> f64 {
        self.neighborhood.loss_of(self.intercept, values)
    }

    /// Loss after swapping attribution coordinates `a` and `b`. Only the
    /// difference (w_b - w_a)(z_a - z_b) enters per neighbor, so this is
    /// O(n) regardless of d.
    pub fn loss_with_swap(&self, a: usize, b: usize) -> f64 {
        let nb = &self.neighborhood;
        let delta_w = self.values[b] - self.values[a];
        let mut loss = 0.0;
        for i in 0..nb.n {
            let z = nb.point(i);
            let g: f64 = self.intercept
                + self.values.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
                + delta_w * (z[a] - z[b]);
            let r = g - nb.scores[i];
            loss += nb.weights[i] * r * r;
        }
        loss
    }
}

/// Generate the neighborhood of `x` per `spec`. Deterministic in
/// (spec.seed, sample_id): the per-sample stream is spec.seed's substream
/// keyed by the sample id.
pub fn sample_neighborhood(
    f: &Scorer,
    x: &[f64],
    spec: &NeighborhoodSpec,
    sample_id: usize,
) -> Result<Neighborhood> {
    let d = x.len();
    spec.validate(d)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Explain("explained sample has non-finite values".into()));
    }
    let mut rng = Rng::new(spec.seed).derive(sample_id as u64);
    let n = spec.n_neighbors;
    let mut points = Vec::with_capacity(n * d);
    for _ in 0..n {
        match &spec.scheme {
            PerturbScheme::MaskToReference => {
                for j in 0..d {
                    let keep = rng.uniform() < 0.5;
                    points.push(if keep { x[j] } else { spec.reference[j] });
                }
            }
            PerturbScheme::GaussianJitter(std) => {
                for j in 0..d {
                    points.push(x[j] + std * rng.standard_normal());
                }
            }
        }
    }
    let sigma = match spec.kernel_width {
        KernelWidth::Fixed(s) => s,
        KernelWidth::MeanPairwise(factor) => {
            let mean = mean_pairwise_distance(&points, n, d);
            // Degenerate neighborhoods (all points equal) fall back to 1.
            if mean > 0.0 {
                factor * mean
            } else {
                1.0
            }
        }
    };
    let mut scores = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let z = &points[i * d..(i + 1) * d];
        scores.push(f.score(z));
        let dist2: f64 = z.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        weights.push((-dist2 / (sigma * sigma)).exp());
    }
    Ok(Neighborhood {
        points,
        scores,
        weights,
        x: x.to_vec(),
        sigma,
        n,
        d,
    })
}

fn mean_pairwise_distance(points: &[f64], n: usize, d: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0u64;
    for i in 0..n {
        let a = &points[i * d..(i + 1) * d];
        for j in (i + 1)..n {
            let b = &points[j * d..(j + 1) * d];
            let dist2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            total += dist2.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Fit the weighted-least-squares surrogate on a neighborhood.
pub fn fit_surrogate(nb: &Neighborhood, sample_ref: usize) -> Result<Explanation> {
    let d = nb.d;
    let n = nb.n;
    // Normal equations over the design [1, z].
    let p = d + 1;
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut atb = DVector::<f64>::zeros(p);
    for i in 0..n {
        let z = nb.point(i);
        let u = nb.weights[i];
        let y = nb.scores[i];
        ata[(0, 0)] += u;
        atb[0] += u * y;
        for a in 0..d {
            let za = z[a];
            ata[(0, a + 1)] += u * za;
            atb[a + 1] += u * za * y;
            for b in a..d {
                ata[(a + 1, b + 1)] += u * za * z[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            ata[(a, b)] = ata[(b, a)];
        }
    }
    // A feature whose observed values concentrate near the reference makes
    // its design column nearly constant and the normal equations singular
    // to machine precision. Escalate a small ridge on the slope block until
    // the factorization succeeds; the fallback is deterministic, so reruns
    // stay bit-identical.
    let mean_diag: f64 = (1..p).map(|a| ata[(a, a)]).sum::<f64>() / d as f64;
    let mut chol = Cholesky::new(ata.clone());
    let mut ridge = 1e-10 * mean_diag.max(1e-300);
    while chol.is_none() && ridge <= 1e-2 * mean_diag.max(1e-300) {
        let mut regularized = ata.clone();
        for a in 1..p {
            regularized[(a, a)] += ridge;
        }
        chol = Cholesky::new(regularized);
        ridge *= 100.0;
    }
    let chol = chol.ok_or_else(|| {
        Error::Explain(
            "weighted design is rank-deficient; increase n_neighbors".into(),
        )
    })?;
    let sol = chol.solve(&atb);
    let intercept = sol[0];
    let values: Vec<f64> = sol.as_slice()[1..].to_vec();
    if values.iter().any(|v| !v.is_finite()) || !intercept.is_finite() {
        return Err(Error::Explain("surrogate fit produced non-finite values".into()));
    }
    Ok(Explanation {
        values,
        intercept,
        sample_ref,
        neighborhood: nb.clone(),
    })
}

/// Explain one sample: generate its neighborhood and fit the surrogate.
pub fn explain(f: &Scorer, x: &[f64], spec: &NeighborhoodSpec, sample_id: usize) -> Result<Explanation> {
    let nb = sample_neighborhood(f, x, spec, sample_id)?;
    fit_surrogate(&nb, sample_id)
}

/// Explanation loss of a candidate surrogate against the neighborhood of
/// `w_candidate` (which must have been produced by [`explain`] on the same
/// sample and spec).
pub fn explanation_loss(w_candidate: &Explanation) -> f64 {
    w_candidate.loss()
}

/// Which end of the sorted aggregate counts as rank 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Most negative attribution first (top goodware-oriented features).
    GoodwareFirst,
    /// Most positive attribution first.
    MalwareFirst,
}

impl Orientation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "goodware_first" => Ok(Orientation::GoodwareFirst),
            "malware_first" => Ok(Orientation::MalwareFirst),
            other => Err(Error::config(format!("unknown orientation {other:?}"))),
        }
    }
}

/// Elementwise sum of sample-level explanations with its rank-to-index
/// sort map.
#[derive(Debug, Clone)]
pub struct AggregatedExplanation {
    pub values: Vec<f64>,
    /// sort_map[r] is the original feature index of sorted rank r+1.
    pub sort_map: Vec<usize>,
    pub orientation: Orientation,
}

impl AggregatedExplanation {
    /// Original feature index of 1-based sorted rank, None outside [1, d].
    pub fn v(&self, rank: usize) -> Option<usize> {
        if rank >= 1 && rank <= self.sort_map.len() {
            Some(self.sort_map[rank - 1])
        } else {
            None
        }
    }

    /// 1-based sorted rank of an original feature index.
    pub fn rank_of(&self, feature: usize) -> usize {
        self.sort_map.iter().position(|&f| f == feature).unwrap() + 1
    }

    pub fn d(&self) -> usize {
        self.values.len()
    }
}

/// Aggregate sample-level values into an [`AggregatedExplanation`].
/// Ties in the sort are broken by ascending original index.
pub fn aggregate_values(values_per_sample: &[Vec<f64>], orientation: Orientation) -> Result<AggregatedExplanation> {
    let Some(first) = values_per_sample.first() else {
        return Err(Error::contract("aggregate of zero explanations"));
    };
    let d = first.len();
    let mut values = vec![0.0; d];
    for vals in values_per_sample {
        if vals.len() != d {
            return Err(Error::contract("aggregate over mixed dimensions"));
        }
        for (acc, v) in values.iter_mut().zip(vals) {
            *acc += v;
        }
    }
    let mut sort_map: Vec<usize> = (0..d).collect();
    match orientation {
        Orientation::GoodwareFirst => {
            sort_map.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        }
        Orientation::MalwareFirst => {
            sort_map.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)))
        }
    }
    Ok(AggregatedExplanation {
        values,
        sort_map,
        orientation,
    })
}

pub fn aggregate(explanations: &[Explanation], orientation: Orientation) -> Result<AggregatedExplanation> {
    let values: Vec<Vec<f64>> = explanations.iter().map(|e| e.values.clone()).collect();
    aggregate_values(&values, orientation)
}

/// Log-odds faithfulness score with its clipping flag.
#[derive(Debug, Clone, Copy)]
pub struct LogOdds {
    pub value: f64,
    pub clipped: bool,
}

const LOGIT_CLIP: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Change in the predicted-class log-odds when the top 20% of features (by
/// attribution toward the predicted class) are replaced by the reference
/// value. Higher means the explanation points at features the model
/// actually relies on.
pub fn log_odds_score(
    f: &Scorer,
    x: &[f64],
    attribution: &[f64],
    reference: &[f64],
) -> Result<LogOdds> {
    let d = x.len();
    if attribution.len() != d || reference.len() != d {
        return Err(Error::contract("log_odds_score: dimension mismatch"));
    }
    let predicted = f.predict(x);
    // Attribution toward the predicted class: positive values push toward
    // malware (class 1), negative toward goodware (class 0).
    let toward: Vec<f64> = attribution
        .iter()
        .map(|&w| if predicted == 1 { w } else { -w })
        .collect();
    let m = ((0.2 * d as f64).ceil() as usize).max(1);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| toward[b].total_cmp(&toward[a]).then(a.cmp(&b)));
    let mut erased = x.to_vec();
    for &j in order.iter().take(m) {
        erased[j] = reference[j];
    }
    let mut clipped = false;
    let mut class_score = |p: f64| -> f64 {
        let p = if predicted == 1 { p } else { 1.0 - p };
        if p < LOGIT_CLIP || p > 1.0 - LOGIT_CLIP {
            clipped = true;
        }
        p.clamp(LOGIT_CLIP, 1.0 - LOGIT_CLIP)
    };
    let before = logit(class_score(f.score(x)));
    let after = logit(class_score(f.score(&erased)));
    Ok(LogOdds {
        value: before - after,
        clipped,
    })
}
