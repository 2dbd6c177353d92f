//! The two-step randomization mechanism over feature attributions.
//!
//! Step 1 randomizes the aggregated explanation: each protected top-k rank
//! independently either stays or swaps with a candidate rank in
//! [k+1, k+tau], with probabilities that fold the explanation-loss change
//! of each swap into a randomized-response distribution under a per-feature
//! privacy budget. Step 2 corrects each sample-level explanation by a
//! support-restricted convex program so its feature ordering is consistent
//! with the sampled swaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explainer::{AggregatedExplanation, Explanation};
use crate::rng::Rng;
use crate::solver::{HalfSpace, QuadraticProgram};

/// Cap on the stay-parameter exponent; e^700 is still finite in f64.
pub const BETA_CAP: f64 = 700.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MechanismConfig {
    /// Number of protected top features.
    pub k: usize,
    /// Width of the candidate swap range: sorted ranks k+1 ..= k+tau.
    pub tau: usize,
    /// Per-protected-rank privacy budgets, length k. The total budget is
    /// their sum.
    pub epsilons: Vec<f64>,
    /// Regularization constant of the correction program.
    pub lambda: f64,
    pub solver_tolerance: f64,
    pub seed: u64,
}

impl MechanismConfig {
    /// Shared per-feature budget epsilon_i for every protected rank.
    pub fn shared(k: usize, tau: usize, epsilon_i: f64, seed: u64) -> Self {
        MechanismConfig {
            k,
            tau,
            epsilons: vec![epsilon_i; k],
            lambda: 0.1,
            solver_tolerance: 1e-8,
            seed,
        }
    }

    /// Split a total budget evenly over the k protected ranks.
    pub fn with_total_budget(k: usize, tau: usize, total_epsilon: f64, seed: u64) -> Self {
        Self::shared(k, tau, total_epsilon / k as f64, seed)
    }

    pub fn total_epsilon(&self) -> f64 {
        self.epsilons.iter().sum()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be positive"));
        }
        if self.tau < self.k {
            return Err(Error::config(format!("tau = {} must be >= k = {}", self.tau, self.k)));
        }
        if self.tau < 2 {
            return Err(Error::config("tau must be at least 2"));
        }
        if self.k + self.tau > d {
            return Err(Error::config(format!(
                "k + tau = {} exceeds feature count d = {d}",
                self.k + self.tau
            )));
        }
        if self.epsilons.len() != self.k {
            return Err(Error::config("epsilons must have one entry per protected rank"));
        }
        if self.epsilons.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::config("every per-feature budget must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be non-negative"));
        }
        if !(self.solver_tolerance > 0.0) {
            return Err(Error::config("solver tolerance must be positive"));
        }
        Ok(())
    }
}

/// Softmax of the negated loss deltas: the candidate weights q_j.
/// Max-subtraction keeps the exponentials in range; the result is
/// normalized to sum to 1.
pub fn candidate_weights(delta_row: &[f64]) -> Vec<f64> {
    let neg_min = delta_row.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let mut q: Vec<f64> = delta_row.iter().map(|&v| (-(v - neg_min)).exp()).collect();
    let total: f64 = q.iter().sum();
    for v in &mut q {
        *v /= total;
    }
    q
}

/// Per-rank stay/swap distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipDistribution {
    pub stay: f64,
    /// One entry per candidate rank k+1 ..= k+tau.
    pub swap: Vec<f64>,
}

/// Stay/swap probabilities for one protected rank:
/// stay with p = e^beta / (e^beta + tau - 1), otherwise swap to candidate
/// j with mass (1 - p) * q_j where q is the softmax of the negated deltas.
pub fn flip_distribution(delta_row: &[f64], beta: f64) -> Result<FlipDistribution> {
    let tau = delta_row.len();
    if tau < 2 {
        return Err(Error::config("flip distribution needs at least 2 candidates"));
    }
    if delta_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("non-finite loss delta"));
    }
    let beta = beta.min(BETA_CAP);
    let eb = beta.exp();
    let stay = eb / (eb + (tau - 1) as f64);
    let q = candidate_weights(delta_row);
    let swap_mass = 1.0 - stay;
    let swap = q.iter().map(|&qj| swap_mass * qj).collect();
    Ok(FlipDistribution { stay, swap })
}

/// Largest stay-parameter beta that keeps the per-feature ratio bound at
/// the budget: epsilon_i + ln(tau - 1) + ln(min_j q_j).
pub fn beta_bound(epsilon_i: f64, tau: usize, delta_row: &[f64]) -> f64 {
    debug_assert!(tau >= 2 && delta_row.len() == tau);
    let q = candidate_weights(delta_row);
    let min_q = q.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    epsilon_i + ((tau - 1) as f64).ln() + min_q.ln()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollisionEvent {
    /// Protected rank whose draw was redrawn.
    pub rank: usize,
    /// Candidate rank that was already taken.
    pub candidate: usize,
}

/// Step 1 artifacts: everything needed to audit and replay the
/// randomization of the aggregated explanation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipPlan {
    pub k: usize,
    pub tau: usize,
    pub epsilons: Vec<f64>,
    /// beta_i actually used per protected rank.
    pub beta: Vec<f64>,
    /// Row-major k x tau matrix of loss deltas.
    pub delta_matrix: Vec<f64>,
    pub distributions: Vec<FlipDistribution>,
    /// Realized swaps as 1-based (protected rank, candidate rank) pairs.
    pub flip_set: Vec<(usize, usize)>,
    pub collision_log: Vec<CollisionEvent>,
    pub seed: u64,
}

impl FlipPlan {
    pub fn delta(&self, i_rank: usize, j_rank: usize) -> f64 {
        self.delta_matrix[(i_rank - 1) * self.tau + (j_rank - self.k - 1)]
    }
}

/// Mean absolute change of the explanation loss over the explained samples
/// when attribution coordinates at sorted ranks `i_rank` (protected) and
/// `j_rank` (candidate) are swapped. Ranks are 1-based and translated
/// through the aggregate's sort map before any value access.
pub fn compute_delta(
    explanations: &[Explanation],
    agg: &AggregatedExplanation,
    i_rank: usize,
    j_rank: usize,
) -> f64 {
    let a = agg.v(i_rank).expect("protected rank in range");
    let b = agg.v(j_rank).expect("candidate rank in range");
    let mut total = 0.0;
    for e in explanations {
        total += (e.loss() - e.loss_with_swap(a, b)).abs();
    }
    total / explanations.len() as f64
}

/// The full k x tau loss-delta grid (row-major).
pub fn delta_matrix(
    explanations: &[Explanation],
    agg: &AggregatedExplanation,
    k: usize,
    tau: usize,
) -> Vec<f64> {
    use rayon::prelude::*;
    // Cache the base losses once; compute_delta would recompute them per cell.
    let base: Vec<f64> = explanations.iter().map(|e| e.loss()).collect();
    (0..k * tau)
        .into_par_iter()
        .map(|cell| {
            let i_rank = cell / tau + 1;
            let j_rank = k + cell % tau + 1;
            let a = agg.v(i_rank).expect("protected rank in range");
            let b = agg.v(j_rank).expect("candidate rank in range");
            let mut total = 0.0;
            for (e, l0) in explanations.iter().zip(&base) {
                total += (l0 - e.loss_with_swap(a, b)).abs();
            }
            total / explanations.len() as f64
        })
        .collect()
}

/// Step 1: randomize the aggregated explanation. Each protected rank draws
/// stay/swap independently with beta_i at the Theorem-style budget bound;
/// candidate collisions are resolved by redrawing the later rank from its
/// distribution restricted to unused candidates.
pub fn randomize_aggregate(
    explanations: &[Explanation],
    agg: &AggregatedExplanation,
    cfg: &MechanismConfig,
    rng: &mut Rng,
) -> Result<FlipPlan> {
    cfg.validate(agg.d())?;
    if explanations.is_empty() {
        return Err(Error::contract("randomize_aggregate needs at least one explanation"));
    }
    let deltas = delta_matrix(explanations, agg, cfg.k, cfg.tau);
    randomize_from_deltas(&deltas, cfg, rng)
}

/// Step 1 with a precomputed delta grid (used by replays and tests).
pub fn randomize_from_deltas(
    deltas: &[f64],
    cfg: &MechanismConfig,
    rng: &mut Rng,
) -> Result<FlipPlan> {
    let (k, tau) = (cfg.k, cfg.tau);
    if deltas.len() != k * tau {
        return Err(Error::contract("delta matrix shape mismatch"));
    }
    let mut beta = Vec::with_capacity(k);
    let mut distributions = Vec::with_capacity(k);
    let mut flip_set = Vec::new();
    let mut collision_log = Vec::new();
    let mut used = vec![false; tau];
    for i in 0..k {
        let row = &deltas[i * tau..(i + 1) * tau];
        let b = beta_bound(cfg.epsilons[i], tau, row).min(BETA_CAP);
        let dist = flip_distribution(row, b)?;
        // Outcome 0 is stay; outcome 1 + c is a swap to candidate c.
        let mut probs = Vec::with_capacity(tau + 1);
        probs.push(dist.stay);
        probs.extend_from_slice(&dist.swap);
        let mut outcome = rng.discrete(&probs);
        while outcome > 0 && used[outcome - 1] {
            collision_log.push(CollisionEvent {
                rank: i + 1,
                candidate: k + outcome,
            });
            // Restrict to stay plus unused candidates, renormalized.
            let restricted: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(o, &p)| if o > 0 && used[o - 1] { 0.0 } else { p })
                .collect();
            if restricted.iter().sum::<f64>() <= 0.0 {
                outcome = 0;
                break;
            }
            outcome = rng.discrete(&restricted);
        }
        if outcome > 0 {
            used[outcome - 1] = true;
            flip_set.push((i + 1, k + outcome));
        }
        beta.push(b);
        distributions.push(dist);
    }
    Ok(FlipPlan {
        k,
        tau,
        epsilons: cfg.epsilons.clone(),
        beta,
        delta_matrix: deltas.to_vec(),
        distributions,
        flip_set,
        collision_log,
        seed: rng.seed(),
    })
}

/// Step 2 constraint artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSet {
    /// (a, b) original-feature-index pairs meaning w'_a <= w'_b.
    pub pairs: Vec<(usize, usize)>,
    /// Indices whose correction component may be nonzero. Restricted to
    /// sorted ranks <= k + tau so coordinates past the candidate window
    /// stay bit-identical.
    pub support: Vec<usize>,
}

impl ConstraintSet {
    pub fn empty() -> Self {
        ConstraintSet {
            pairs: Vec::new(),
            support: Vec::new(),
        }
    }
}

/// Build the pairwise order constraints that make sample-level
/// explanations consistent with the flip set: for each flipped pair of
/// ranks (i, j) the four pairs
/// (v(i+1), v(j)), (v(j), v(i-1)), (v(i), v(j-1)), (v(j+1), v(i)),
/// dropping any pair that references rank 0 or rank d+1, de-duplicated.
pub fn build_constraints(
    flip_set: &[(usize, usize)],
    agg: &AggregatedExplanation,
    k: usize,
    tau: usize,
) -> Result<ConstraintSet> {
    for &(i, j) in flip_set {
        if !(1 <= i && i <= k && k + 1 <= j && j <= k + tau) {
            return Err(Error::contract(format!("flip pair ({i}, {j}) out of range")));
        }
    }
    // Occupant of each sorted rank after applying the whole flip set. A
    // flipped rank is constrained against its post-flip neighbors; with a
    // single flip this is exactly the four pairs
    // (v(i+1), v(j)), (v(j), v(i-1)), (v(i), v(j-1)), (v(j+1), v(i)),
    // and with several flips it stays consistent with one total order, so
    // crossing flips cannot make the relation contradictory.
    let d = agg.d();
    let mut occupant: Vec<usize> = (1..=d).map(|r| agg.v(r).unwrap()).collect();
    for &(i, j) in flip_set {
        occupant.swap(i - 1, j - 1);
    }
    let u = |rank: usize| -> Option<usize> {
        if (1..=d).contains(&rank) {
            Some(occupant[rank - 1])
        } else {
            None
        }
    };
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for &(i, j) in flip_set {
        let candidates = [
            (u(i + 1), u(i)),
            (u(i), u(i - 1)),
            (u(j), u(j - 1)),
            (u(j + 1), u(j)),
        ];
        for (a, b) in candidates {
            if let (Some(a), Some(b)) = (a, b) {
                if a != b && !pairs.contains(&(a, b)) {
                    pairs.push((a, b));
                }
            }
        }
    }
    detect_cycle(&pairs)?;
    let mut support: Vec<usize> = Vec::new();
    for &(a, b) in &pairs {
        for idx in [a, b] {
            if agg.rank_of(idx) <= k + tau && !support.contains(&idx) {
                support.push(idx);
            }
        }
    }
    support.sort_unstable();
    Ok(ConstraintSet { pairs, support })
}

/// Reject order relations with a directed cycle; the caller retries
/// Step 1 with a fresh substream.
fn detect_cycle(pairs: &[(usize, usize)]) -> Result<()> {
    use std::collections::BTreeMap;
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in pairs {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default();
    }
    // 0 = unvisited, 1 = on stack, 2 = done.
    let mut state: BTreeMap<usize, u8> = adj.keys().map(|&n| (n, 0u8)).collect();
    fn visit(
        node: usize,
        adj: &BTreeMap<usize, Vec<usize>>,
        state: &mut BTreeMap<usize, u8>,
    ) -> bool {
        state.insert(node, 1);
        for &next in &adj[&node] {
            match state[&next] {
                1 => return false,
                0 => {
                    if !visit(next, adj, state) {
                        return false;
                    }
                }
                _ => {}
            }
        }
        state.insert(node, 2);
        true
    }
    let nodes: Vec<usize> = adj.keys().copied().collect();
    for node in nodes {
        if state[&node] == 0 && !visit(node, &adj, &mut state) {
            return Err(Error::Constraint(
                "order constraints contain a cycle".into(),
            ));
        }
    }
    Ok(())
}

/// Step 1 plus constraint construction, retrying with fresh substreams
/// when the sampled flip set induces a cyclic constraint set.
pub fn randomize_with_constraints(
    explanations: &[Explanation],
    agg: &AggregatedExplanation,
    cfg: &MechanismConfig,
    rng: &Rng,
    max_retries: usize,
) -> Result<(FlipPlan, ConstraintSet)> {
    cfg.validate(agg.d())?;
    let deltas = delta_matrix(explanations, agg, cfg.k, cfg.tau);
    for attempt in 0..max_retries.max(1) {
        let mut attempt_rng = rng.derive(attempt as u64);
        let plan = randomize_from_deltas(&deltas, cfg, &mut attempt_rng)?;
        match build_constraints(&plan.flip_set, agg, cfg.k, cfg.tau) {
            Ok(cs) => return Ok((plan, cs)),
            Err(Error::Constraint(_)) => continue,
            Err(other) => return Err(other),
        }
    }
    Err(Error::Constraint(format!(
        "could not sample an acyclic constraint set in {max_retries} attempts"
    )))
}

/// Step 2: correct one sample-level explanation so the constraint set
/// holds, moving it as little as the explanation loss allows. Returns a
/// new explanation sharing the cached neighborhood; coordinates off the
/// support are bit-identical to the input.
pub fn correct_sample(
    w_x: &Explanation,
    constraints: &ConstraintSet,
    cfg: &MechanismConfig,
) -> Result<Explanation> {
    if constraints.pairs.is_empty() {
        return Ok(w_x.clone());
    }
    let nb = &w_x.neighborhood;
    let support = &constraints.support;
    let m = support.len();
    // Residuals of the uncorrected surrogate.
    let residuals: Vec<f64> = (0..nb.n)
        .map(|z| {
            let point = nb.point(z);
            w_x.intercept
                + w_x.values.iter().zip(point).map(|(w, v)| w * v).sum::<f64>()
                - nb.scores[z]
        })
        .collect();
    let mut h = vec![0.0; m * m];
    let mut g = vec![0.0; m];
    for z in 0..nb.n {
        let point = nb.point(z);
        let u = nb.weights[z];
        for a in 0..m {
            let za = point[support[a]];
            g[a] += u * residuals[z] * za;
            for b in a..m {
                h[a * m + b] += u * za * point[support[b]];
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            h[a * m + b] = h[b * m + a];
        }
        h[a * m + a] += cfg.lambda;
    }
    let pos = |idx: usize| support.iter().position(|&s| s == idx);
    let mut half_spaces = Vec::with_capacity(constraints.pairs.len());
    for &(a, b) in &constraints.pairs {
        let bound = w_x.values[b] - w_x.values[a];
        let hs = match (pos(a), pos(b)) {
            (Some(pa), Some(pb)) => HalfSpace {
                terms: vec![(pa, 1.0), (pb, -1.0)],
                bound,
            },
            (Some(pa), None) => HalfSpace {
                terms: vec![(pa, 1.0)],
                bound,
            },
            (None, Some(pb)) => HalfSpace {
                terms: vec![(pb, -1.0)],
                bound,
            },
            (None, None) => {
                if bound < -1e-12 {
                    return Err(Error::Constraint(format!(
                        "constraint between two pinned coordinates ({a}, {b}) is infeasible"
                    )));
                }
                continue;
            }
        };
        half_spaces.push(hs);
    }
    let qp = QuadraticProgram {
        h,
        g,
        m,
        constraints: half_spaces,
    };
    let sol = qp.solve(cfg.solver_tolerance, 100_000)?;
    let mut corrected = w_x.clone();
    for (&phi_p, &idx) in sol.phi.iter().zip(support.iter()) {
        corrected.values[idx] += phi_p;
    }
    Ok(corrected)
}

/// Sum-squared-error utility report: the full-dimension sum, the sum over
/// sorted ranks <= k + tau, and whether every later coordinate is
/// bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SseReport {
    pub full: f64,
    pub head: f64,
    pub tail_bit_identical: bool,
}

pub fn sse_utility(
    originals: &[Explanation],
    corrected: &[Explanation],
    agg: &AggregatedExplanation,
    k: usize,
    tau: usize,
) -> Result<SseReport> {
    if originals.len() != corrected.len() {
        return Err(Error::contract("sse_utility: sample count mismatch"));
    }
    let mut full = 0.0;
    let mut head = 0.0;
    let mut tail_bit_identical = true;
    for (o, c) in originals.iter().zip(corrected) {
        if o.d() != c.d() {
            return Err(Error::contract("sse_utility: dimension mismatch"));
        }
        for rank in 1..=o.d() {
            let idx = agg.v(rank).expect("rank in range");
            let diff = c.values[idx] - o.values[idx];
            full += diff * diff;
            if rank <= k + tau {
                head += diff * diff;
            } else if c.values[idx].to_bits() != o.values[idx].to_bits() {
                tail_bit_identical = false;
            }
        }
    }
    Ok(SseReport {
        full,
        head,
        tail_bit_identical,
    })
}

/// The auditable, replayable record of one deployment's randomness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefensePlan {
    pub version: u32,
    pub plan: FlipPlan,
    pub constraints: ConstraintSet,
}

impl DefensePlan {
    pub const VERSION: u32 = 1;

    pub fn new(plan: FlipPlan, constraints: ConstraintSet) -> Self {
        DefensePlan {
            version: Self::VERSION,
            plan,
            constraints,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DefensePlan = serde_json::from_str(text)?;
        if doc.version != Self::VERSION {
            return Err(Error::contract(format!(
                "unsupported defense plan version {}",
                doc.version
            )));
        }
        Ok(doc)
    }
}
