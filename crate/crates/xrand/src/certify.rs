//! Certified-robustness computations for the defended pipeline:
//! training-time certified poisoning size via subsampled ensembles,
//! an inference-time noise-calibrated certificate over expected scores,
//! an ensemble randomized-smoothing certificate, and certified accuracy.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::explainer::Explanation;
use crate::model::Scorer;
use crate::rng::Rng;

/// Two-sided Clopper-Pearson lower bound for `successes` out of `trials`
/// at the given confidence (each tail gets (1 - confidence)/2).
pub fn clopper_pearson_lower(successes: usize, trials: usize, confidence: f64) -> f64 {
    assert!(successes <= trials && trials > 0);
    assert!((0.0..1.0).contains(&(1.0 - confidence)));
    if successes == 0 {
        return 0.0;
    }
    let tail = (1.0 - confidence) / 2.0;
    if successes == trials {
        // Beta(n, 1) quantile in closed form.
        return tail.powf(1.0 / trials as f64);
    }
    let dist = Beta::new(successes as f64, (trials - successes + 1) as f64)
        .expect("valid Beta parameters");
    dist.inverse_cdf(tail)
}

/// Two-sided Clopper-Pearson upper bound.
pub fn clopper_pearson_upper(successes: usize, trials: usize, confidence: f64) -> f64 {
    assert!(successes <= trials && trials > 0);
    if successes == trials {
        return 1.0;
    }
    let tail = (1.0 - confidence) / 2.0;
    if successes == 0 {
        return 1.0 - tail.powf(1.0 / trials as f64);
    }
    let dist = Beta::new((successes + 1) as f64, (trials - successes) as f64)
        .expect("valid Beta parameters");
    dist.inverse_cdf(1.0 - tail)
}

/// Majority label of an ensemble with simultaneous probability bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelBounds {
    pub label: u8,
    /// Lower confidence bound on the majority-label vote probability.
    pub p_lower: f64,
    /// Upper bound on the other label's probability (1 - p_lower in the
    /// binary case).
    pub p_upper_other: f64,
    /// True when no certificate is possible (tie, or bounds crossing).
    pub abstain: bool,
}

/// Vote an ensemble on one sample and bound the vote probabilities.
pub fn label_prob_bounds(models: &[Scorer], x: &[f64], confidence: f64) -> Result<LabelBounds> {
    if models.len() < 30 {
        return Err(Error::config(format!(
            "label probability bounds need >= 30 models, got {}",
            models.len()
        )));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::config("confidence must be in (0, 1)"));
    }
    let votes_one = models.iter().filter(|m| m.predict(x) == 1).count();
    let n = models.len();
    let (label, votes) = if 2 * votes_one > n {
        (1u8, votes_one)
    } else if 2 * votes_one < n {
        (0u8, n - votes_one)
    } else {
        return Ok(LabelBounds {
            label: 0,
            p_lower: 0.5,
            p_upper_other: 0.5,
            abstain: true,
        });
    };
    let p_lower = clopper_pearson_lower(votes, n, confidence);
    let p_upper_other = 1.0 - p_lower;
    Ok(LabelBounds {
        label,
        p_lower,
        p_upper_other,
        abstain: p_lower <= p_upper_other,
    })
}

/// Inputs for the subsampled-ensemble (bagging) certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaggingCertInput {
    /// |D|: rows in the training dataset the ensemble subsamples from.
    pub dataset_size: usize,
    /// s: rows drawn (with replacement) per base model; the exponent of
    /// the certificate condition.
    pub subsample_size: usize,
    /// n: Monte Carlo base-model count used for the probability bounds.
    pub n_trials: usize,
    pub confidence: f64,
    pub p_lower: f64,
    pub p_upper_other: f64,
}

impl BaggingCertInput {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 || self.subsample_size == 0 || self.n_trials == 0 {
            return Err(Error::config("bagging certificate sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_lower) || !(0.0..=1.0).contains(&self.p_upper_other) {
            return Err(Error::config("probability bounds must be in [0, 1]"));
        }
        Ok(())
    }

    /// Discretization corrections: the bounds are rounded onto the
    /// 1/n^s grid of achievable vote probabilities.
    pub fn discretization(&self) -> (f64, f64) {
        let ns = (self.n_trials as f64).powi(self.subsample_size as i32);
        if !ns.is_finite() {
            // The probability grid is finer than f64 resolution; the
            // corrections vanish.
            return (0.0, 0.0);
        }
        let sigma_l = self.p_lower - (self.p_lower * ns).floor() / ns;
        let sigma_not_l = (self.p_upper_other * ns).ceil() / ns - self.p_upper_other;
        (sigma_l, sigma_not_l)
    }

    /// p_lower - p_upper_other - sigma_l - sigma_not_l: the usable margin.
    pub fn gap(&self) -> f64 {
        let (sl, snl) = self.discretization();
        self.p_lower - self.p_upper_other - sl - snl
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifiedSize {
    /// Largest r satisfying the certificate condition (exact search;
    /// authoritative).
    pub r: usize,
    /// The literature's closed-form expression, evaluated as printed.
    pub closed_form: i64,
    /// Whether the closed form agrees with the search.
    pub agrees: bool,
}

/// The certificate condition at radius r: the worst case over dataset
/// sizes within r of |D| must stay below the probability margin.
fn bagging_condition_holds(input: &BaggingCertInput, gap: f64, r: usize) -> bool {
    let dsize = input.dataset_size as f64;
    let s = input.subsample_size as i32;
    let low = input.dataset_size.saturating_sub(r);
    let high = input.dataset_size + r;
    let mut worst = f64::NEG_INFINITY;
    for dplus in low..=high {
        let dp = dplus as f64;
        let term = (dp / dsize).powi(s)
            - 2.0 * ((dsize.max(dp) - r as f64) / dsize).powi(s)
            + 1.0
            - gap;
        worst = worst.max(term);
    }
    worst < 0.0
}

/// Largest certified radius by exact integer search, with the printed
/// closed form evaluated alongside for comparison (disagreements are
/// surfaced, never reconciled).
pub fn certified_size_search(input: &BaggingCertInput) -> Result<CertifiedSize> {
    input.validate()?;
    let gap = input.gap();
    if gap <= 0.0 {
        return Ok(CertifiedSize {
            r: 0,
            closed_form: 0,
            agrees: true,
        });
    }
    // r = 0 always holds for a positive gap (the condition degenerates to
    // -gap < 0); walk up until the first violation.
    let mut r = 0usize;
    while r < input.dataset_size && bagging_condition_holds(input, gap, r + 1) {
        r += 1;
    }
    let closed_form = (input.dataset_size as f64
        * (1.0 + gap).powf(1.0 / input.subsample_size as f64)
        - 1.0)
        .ceil() as i64;
    Ok(CertifiedSize {
        r,
        closed_form,
        agrees: closed_form == r as i64,
    })
}

/// Certified poisoning size of the outsourced data: the drop between the
/// clean-data certificate and the full-data certificate. A negative
/// difference is reported as 0 with the flag set.
pub fn certified_poisoning_size(rd_star: usize, rd_prime_star: usize) -> (usize, bool) {
    if rd_star >= rd_prime_star {
        (rd_star - rd_prime_star, false)
    } else {
        (0, true)
    }
}

/// Mean per-dimension L1 change between original and corrected
/// explanations; the sensitivity that calibrates certification noise.
pub fn explanation_sensitivity(
    originals: &[Explanation],
    corrected: &[Explanation],
) -> Result<f64> {
    if originals.is_empty() || originals.len() != corrected.len() {
        return Err(Error::contract("sensitivity needs matching nonempty explanation lists"));
    }
    let d = originals[0].d();
    let mut total = 0.0;
    for (o, c) in originals.iter().zip(corrected) {
        if o.d() != d || c.d() != d {
            return Err(Error::contract("sensitivity: dimension mismatch"));
        }
        total += o
            .values
            .iter()
            .zip(&c.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    Ok(total / (originals.len() as f64 * d as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    Laplace,
    Gaussian,
}

impl NoiseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(NoiseKind::Laplace),
            "gaussian" => Ok(NoiseKind::Gaussian),
            other => Err(Error::config(format!("unknown noise kind '{other}'"))),
        }
    }
}

/// Inputs for the expected-score certificate under calibrated input noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PixelDpCertInput {
    /// Sensitivity of the defended explanations (mean per-dimension L1).
    pub sensitivity: f64,
    pub epsilon: f64,
    /// Gaussian relaxation parameter; must be 0 for Laplace noise.
    pub delta: f64,
    pub noise: NoiseKind,
    pub n_mc: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl PixelDpCertInput {
    pub fn validate(&self) -> Result<()> {
        if self.sensitivity < 0.0 {
            return Err(Error::config("sensitivity must be non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        match self.noise {
            NoiseKind::Laplace if self.delta != 0.0 => {
                return Err(Error::config("Laplace noise requires delta = 0"));
            }
            NoiseKind::Gaussian if !(self.delta > 0.0 && self.delta < 1.0) => {
                return Err(Error::config("Gaussian noise requires delta in (0, 1)"));
            }
            _ => {}
        }
        if self.n_mc < 100 {
            return Err(Error::config("certificate needs at least 100 Monte Carlo draws"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::config("confidence must be in (0, 1)"));
        }
        Ok(())
    }

    /// Noise scale for a candidate attack radius mu.
    pub fn noise_scale(&self, mu: f64) -> f64 {
        match self.noise {
            NoiseKind::Laplace => self.sensitivity * mu / self.epsilon,
            NoiseKind::Gaussian => {
                self.sensitivity * mu * (2.0 * (1.25 / self.delta).ln()).sqrt() / self.epsilon
            }
        }
    }
}

/// Geometric candidate grid for the certified radius.
pub fn mu_grid() -> Vec<f64> {
    let mut grid = Vec::new();
    let mut mu = 1e-3;
    while mu <= 10.0 {
        grid.push(mu);
        mu *= 1.1;
    }
    grid
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PixelDpCertificate {
    /// Largest certified radius on the grid; 0 when nothing certifies.
    pub mu_max: f64,
    /// Whether the passing grid points form a prefix of the grid.
    pub downward_closed: bool,
}

/// Largest attack radius mu for which the noisy expected-score robustness
/// check holds: lower-bounded expectation of the top class must dominate
/// e^(2 epsilon) times the upper-bounded expectation of the other class
/// plus the relaxation term. Common random numbers are reused across the
/// grid so larger noise scales strictly widen the same draws.
pub fn pixeldp_certify(f: &Scorer, x: &[f64], input: &PixelDpCertInput) -> Result<PixelDpCertificate> {
    input.validate()?;
    let d = x.len();
    let mut rng = Rng::new(input.seed);
    let mut noise = vec![0.0; input.n_mc * d];
    for v in noise.iter_mut() {
        *v = match input.noise {
            NoiseKind::Laplace => rng.standard_laplace(),
            NoiseKind::Gaussian => rng.standard_normal(),
        };
    }
    // Hoeffding half-width for [0, 1]-valued scores.
    let t = ((2.0 / (1.0 - input.confidence)).ln() / (2.0 * input.n_mc as f64)).sqrt();
    let e_eps = input.epsilon.exp();
    let relaxation = (1.0 + e_eps) * input.delta;
    let mut mu_max = 0.0;
    let mut downward_closed = true;
    let mut seen_failure = false;
    let mut perturbed = vec![0.0; d];
    for mu in mu_grid() {
        let sigma = input.noise_scale(mu);
        let mut mean_one = 0.0;
        for draw in 0..input.n_mc {
            let slice = &noise[draw * d..(draw + 1) * d];
            for i in 0..d {
                perturbed[i] = x[i] + sigma * slice[i];
            }
            mean_one += f.score(&perturbed);
        }
        mean_one /= input.n_mc as f64;
        let (top, other) = if mean_one >= 0.5 {
            (mean_one, 1.0 - mean_one)
        } else {
            (1.0 - mean_one, mean_one)
        };
        let lb = (top - t).max(0.0);
        let ub = (other + t).min(1.0);
        let passes = lb > e_eps * e_eps * ub + relaxation;
        if passes {
            if seen_failure {
                downward_closed = false;
            }
            mu_max = mu;
        } else {
            seen_failure = true;
        }
    }
    Ok(PixelDpCertificate {
        mu_max,
        downward_closed,
    })
}

/// Inputs for the ensemble randomized-smoothing certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostRsCertInput {
    /// Monte Carlo perturbation draws N.
    pub n_draws: usize,
    pub confidence: f64,
    /// Base perturbation deviation (derived from the sensitivity).
    pub sigma_alpha: f64,
    /// Extra stabilizing noise as a fraction of sigma_alpha.
    pub alpha1_factor: f64,
    pub seed: u64,
}

impl BoostRsCertInput {
    pub fn defaults(sigma_alpha: f64, seed: u64) -> Self {
        BoostRsCertInput {
            n_draws: 200,
            confidence: 0.95,
            sigma_alpha,
            alpha1_factor: 0.25,
            seed,
        }
    }

    /// Deviation of the combined independent noises.
    pub fn sigma_total(&self) -> f64 {
        (self.sigma_alpha * self.sigma_alpha
            + (self.alpha1_factor * self.sigma_alpha).powi(2))
        .sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_draws < 10 {
            return Err(Error::config("boost-RS needs at least 10 draws"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::config("confidence must be in (0, 1)"));
        }
        if self.sigma_alpha < 0.0 || self.alpha1_factor < 0.0 {
            return Err(Error::config("noise deviations must be non-negative"));
        }
        Ok(())
    }
}

/// Chebyshev-style success-probability bound from the ensemble margin
/// statistics: 1 - var / (c_l - c_not_l)^2, clamped to [0, 1]. A zero
/// margin yields no bound (None).
pub fn margin_p1_bound(c_l: f64, c_not_l: f64, margin_variance: f64) -> Option<f64> {
    let gap = c_l - c_not_l;
    if gap == 0.0 {
        return None;
    }
    Some((1.0 - margin_variance / (gap * gap)).clamp(0.0, 1.0))
}

/// Certified radius from a success-probability lower bound: sigma times
/// the standard normal quantile, floored at 0 for p <= 1/2.
pub fn radius_from_p(p_lower: f64, sigma: f64) -> f64 {
    if p_lower <= 0.5 {
        return 0.0;
    }
    let p = p_lower.min(1.0 - 1e-12);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    sigma * normal.inverse_cdf(p)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostRsCertificate {
    pub r_star: f64,
    pub p_lower: f64,
    /// The margin-statistics bound (1 when the ensemble never disagrees).
    pub p1_bound: f64,
    pub n_success: usize,
    pub c_l: f64,
    pub c_not_l: f64,
    pub margin_variance: f64,
}

/// Randomized-smoothing certificate of an ensemble at one sample: the
/// success probability under combined input noise is lower-bounded both
/// by Clopper-Pearson counting and by the margin-statistics inequality;
/// the radius uses the tighter (smaller) of the two.
pub fn boost_rs_certify(
    models: &[Scorer],
    x: &[f64],
    input: &BoostRsCertInput,
) -> Result<BoostRsCertificate> {
    input.validate()?;
    if models.len() < 2 {
        return Err(Error::config("boost-RS needs an ensemble of at least 2 models"));
    }
    let d = x.len();
    let m = models.len();
    // Ensemble prediction on the clean input decides the target label l.
    let clean_mean: f64 = models.iter().map(|f| f.score(x)).sum::<f64>() / m as f64;
    let label_sign = if clean_mean >= 0.5 { 1.0 } else { -1.0 };
    let sigma = input.sigma_total();
    let mut rng = Rng::new(input.seed);
    let mut n_success = 0usize;
    // Per-model mean margins across draws, for the variance bound.
    let mut model_margin_sums = vec![0.0; m];
    let mut perturbed = vec![0.0; d];
    for _ in 0..input.n_draws {
        for i in 0..d {
            perturbed[i] = x[i] + sigma * rng.standard_normal();
        }
        let mut draw_margin = 0.0;
        for (f, sum) in models.iter().zip(model_margin_sums.iter_mut()) {
            // Margin toward l: f_l - f_not_l = sign * (2 * score - 1).
            let margin = label_sign * (2.0 * f.score(&perturbed) - 1.0);
            *sum += margin;
            draw_margin += margin;
        }
        if draw_margin / m as f64 > 0.0 {
            n_success += 1;
        }
    }
    let model_means: Vec<f64> = model_margin_sums
        .iter()
        .map(|s| s / input.n_draws as f64)
        .collect();
    let mean_margin: f64 = model_means.iter().sum::<f64>() / m as f64;
    // Expectations of the two class scores under the noise.
    let c_l = (1.0 + mean_margin) / 2.0;
    let c_not_l = (1.0 - mean_margin) / 2.0;
    // Across-model variance of the per-model mean margins, scaled down by
    // the ensemble size (variance of the ensemble mean margin).
    let margin_variance = model_means
        .iter()
        .map(|&z| (z - mean_margin) * (z - mean_margin))
        .sum::<f64>()
        / m as f64
        / m as f64;
    let Some(p1_bound) = margin_p1_bound(c_l, c_not_l, margin_variance) else {
        return Ok(BoostRsCertificate {
            r_star: 0.0,
            p_lower: 0.5,
            p1_bound: 0.0,
            n_success,
            c_l,
            c_not_l,
            margin_variance,
        });
    };
    let p_cp = clopper_pearson_lower(n_success, input.n_draws, input.confidence);
    let p_lower = p_cp.min(p1_bound);
    Ok(BoostRsCertificate {
        r_star: radius_from_p(p_lower, sigma),
        p_lower,
        p1_bound,
        n_success,
        c_l,
        c_not_l,
        margin_variance,
    })
}

/// Fraction of samples both correctly predicted and carrying a
/// certificate strictly above the threshold.
pub fn certified_accuracy(results: &[(bool, f64)], threshold: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::contract("certified accuracy over an empty result list"));
    }
    let hits = results
        .iter()
        .filter(|(correct, cert)| *correct && *cert > threshold)
        .count();
    Ok(hits as f64 / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explainer::{explain, NeighborhoodSpec};
    use crate::model::{train, ScorerKind, TrainConfig};

    /// Independent Clopper-Pearson oracle: bisect p such that the
    /// binomial upper tail P(X >= s | n, p) equals the tail mass.
    fn cp_lower_bisection(s: usize, n: usize, confidence: f64) -> f64 {
        if s == 0 {
            return 0.0;
        }
        let target = (1.0 - confidence) / 2.0;
        // P(X >= s) for X ~ Binomial(n, p), terms built in log space.
        let tail = |p: f64| -> f64 {
            if p <= 0.0 {
                return 0.0;
            }
            if p >= 1.0 {
                return 1.0;
            }
            let ln_p = p.ln();
            let ln_q = (1.0 - p).ln();
            let mut ln_choose = 0.0; // ln C(n, 0)
            let mut total = 0.0;
            for x in 0..=n {
                if x >= s {
                    total += (ln_choose + x as f64 * ln_p + (n - x) as f64 * ln_q).exp();
                }
                if x < n {
                    ln_choose += ((n - x) as f64).ln() - ((x + 1) as f64).ln();
                }
            }
            total
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if tail(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn clopper_pearson_matches_bisection_oracle() {
        for &(s, n, conf) in &[
            (100usize, 100usize, 0.99f64),
            (95, 100, 0.95),
            (30, 30, 0.95),
            (17, 30, 0.90),
            (1, 50, 0.99),
        ] {
            let fast = clopper_pearson_lower(s, n, conf);
            let oracle = cp_lower_bisection(s, n, conf);
            assert!(
                (fast - oracle).abs() < 1e-9,
                "s={s} n={n} conf={conf}: {fast} vs {oracle}"
            );
        }
    }

    #[test]
    fn clopper_pearson_frozen_values() {
        // 100/100 at 99%: (0.005)^(1/100).
        let v = clopper_pearson_lower(100, 100, 0.99);
        assert!((v - 0.005f64.powf(0.01)).abs() < 1e-12, "{v}");
        assert!((v - 0.948396).abs() < 1e-6, "{v}");
        assert_eq!(clopper_pearson_lower(0, 50, 0.95), 0.0);
        assert_eq!(clopper_pearson_upper(50, 50, 0.95), 1.0);
        // Lower bound grows with successes and shrinks with confidence.
        assert!(clopper_pearson_lower(90, 100, 0.95) < clopper_pearson_lower(95, 100, 0.95));
        assert!(clopper_pearson_lower(95, 100, 0.99) < clopper_pearson_lower(95, 100, 0.95));
    }

    fn unanimous_models(n: usize, toward_one: bool) -> Vec<Scorer> {
        let bias = if toward_one { 10.0 } else { -10.0 };
        (0..n)
            .map(|_| Scorer::Logistic {
                weights: vec![0.0; 3],
                bias,
            })
            .collect()
    }

    #[test]
    fn unanimous_vote_bounds() {
        let models = unanimous_models(100, true);
        let b = label_prob_bounds(&models, &[0.0; 3], 0.99).unwrap();
        assert_eq!(b.label, 1);
        assert!(!b.abstain);
        assert!((b.p_lower - 0.948396).abs() < 1e-6);
        assert!((b.p_upper_other - (1.0 - b.p_lower)).abs() < 1e-15);
    }

    #[test]
    fn tie_abstains_and_small_ensembles_rejected() {
        let mut models = unanimous_models(15, true);
        models.extend(unanimous_models(15, false));
        let b = label_prob_bounds(&models, &[0.0; 3], 0.95).unwrap();
        assert!(b.abstain);
        assert!(label_prob_bounds(&models[..29], &[0.0; 3], 0.95).is_err());
    }

    #[test]
    fn unanimous_30_model_bound_exceeds_085() {
        let models = unanimous_models(30, false);
        let b = label_prob_bounds(&models, &[1.0, 2.0, 3.0], 0.95).unwrap();
        assert_eq!(b.label, 0);
        assert!(b.p_lower > 0.85, "p_lower = {}", b.p_lower);
    }

    fn cert_input(dsize: usize, s: usize, p_lower: f64) -> BaggingCertInput {
        BaggingCertInput {
            dataset_size: dsize,
            subsample_size: s,
            n_trials: 1000,
            confidence: 0.99,
            p_lower,
            p_upper_other: 1.0 - p_lower,
        }
    }

    #[test]
    fn zero_gap_zero_certificate() {
        let mut input = cert_input(100, 5, 0.5);
        input.p_upper_other = 0.5;
        let out = certified_size_search(&input).unwrap();
        assert_eq!(out.r, 0);
    }

    #[test]
    fn frozen_search_result_and_exactness() {
        // |D| = 100, s = 5, margin forced to exactly 0.5 by bypassing the
        // discretization (bounds already on the grid).
        let mut input = cert_input(100, 5, 0.75);
        input.p_upper_other = 0.25;
        let (sl, snl) = input.discretization();
        let gap = input.gap();
        assert!(sl < 1e-9 && snl < 1e-9 && (gap - 0.5).abs() < 1e-9);
        let out = certified_size_search(&input).unwrap();
        // The binding case is |D_+| = |D|: the condition reduces to
        // 1.5 - 2 (1 - r/100)^5 < 0, i.e. (1 - r/100)^5 > 3/4, so r <= 5.
        assert_eq!(out.r, 5);
        // Exactness: r holds, r + 1 violates.
        assert!(bagging_condition_holds(&input, gap, out.r));
        assert!(!bagging_condition_holds(&input, gap, out.r + 1));
        // The printed closed form evaluates to something else; the
        // disagreement must be surfaced, not hidden.
        assert_eq!(out.closed_form, 108);
        assert!(!out.agrees);
    }

    #[test]
    fn poisoning_size_difference() {
        assert_eq!(certified_poisoning_size(7, 3), (4, false));
        assert_eq!(certified_poisoning_size(3, 3), (0, false));
        assert_eq!(certified_poisoning_size(2, 5), (0, true));
    }

    fn toy_explanations() -> (Vec<Explanation>, Vec<Explanation>) {
        let data = crate::data::generate_synthetic(
            &crate::data::SynthSpec {
                n_samples: 30,
                n_features: 4,
                n_goodware_informative: 1,
                n_malware_informative: 1,
                signal_strength: 1.5,
                quantization_levels: 8,
            },
            &mut Rng::new(3),
        )
        .unwrap();
        let scorer = train(&data, ScorerKind::Logistic, &TrainConfig::default_with_seed(3)).unwrap();
        let spec = NeighborhoodSpec::defaults(data.feature_means(), 11);
        let originals: Vec<Explanation> = (0..3)
            .map(|i| explain(&scorer, data.row(i), &spec, i).unwrap())
            .collect();
        let corrected = originals.clone();
        (originals, corrected)
    }

    #[test]
    fn sensitivity_identity_and_hand_case() {
        let (originals, mut corrected) = toy_explanations();
        assert_eq!(explanation_sensitivity(&originals, &corrected).unwrap(), 0.0);
        // Move one coordinate of one sample by 0.8 with d = 4, 3 samples:
        // mean L1 per dimension = 0.8 / (3 * 4).
        corrected[1].values[2] += 0.8;
        let s = explanation_sensitivity(&originals, &corrected).unwrap();
        assert!((s - 0.8 / 12.0).abs() < 1e-12);
        assert!(explanation_sensitivity(&originals, &corrected[..2]).is_err());
    }

    #[test]
    fn constant_scorer_certifies_grid_maximum() {
        let f = Scorer::Logistic {
            weights: vec![0.0; 4],
            bias: 50.0,
        };
        let input = PixelDpCertInput {
            sensitivity: 0.1,
            epsilon: 1.0,
            delta: 0.0,
            noise: NoiseKind::Laplace,
            n_mc: 200,
            confidence: 0.95,
            seed: 9,
        };
        let cert = pixeldp_certify(&f, &[0.0; 4], &input).unwrap();
        let grid = mu_grid();
        assert_eq!(cert.mu_max, *grid.last().unwrap());
        assert!(cert.downward_closed);
    }

    #[test]
    fn noise_scale_formulas() {
        let laplace = PixelDpCertInput {
            sensitivity: 0.1,
            epsilon: 1.0,
            delta: 0.0,
            noise: NoiseKind::Laplace,
            n_mc: 100,
            confidence: 0.95,
            seed: 0,
        };
        assert!((laplace.noise_scale(1.0) - 0.1).abs() < 1e-15);
        let gaussian = PixelDpCertInput {
            delta: 1e-5,
            noise: NoiseKind::Gaussian,
            ..laplace.clone()
        };
        let expected = 0.1 * (2.0 * (1.25f64 / 1e-5).ln()).sqrt();
        assert!((gaussian.noise_scale(1.0) - expected).abs() < 1e-12);
        // Laplace with nonzero delta is a configuration error.
        let bad = PixelDpCertInput {
            delta: 0.1,
            ..laplace
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn radius_limit_cases() {
        assert_eq!(radius_from_p(0.5, 1.0), 0.0);
        assert_eq!(radius_from_p(0.2, 3.0), 0.0);
        // One-sigma quantile.
        let r = radius_from_p(0.8413447460685429, 1.0);
        assert!((r - 1.0).abs() < 1e-6, "{r}");
    }

    #[test]
    fn zero_margin_variance_bound_is_one() {
        assert_eq!(margin_p1_bound(0.9, 0.1, 0.0), Some(1.0));
        assert_eq!(margin_p1_bound(0.5, 0.5, 0.2), None);
        // Large variance clamps to 0.
        assert_eq!(margin_p1_bound(0.6, 0.4, 10.0), Some(0.0));
    }

    #[test]
    fn identical_models_certify_up_to_counting_limit() {
        let models = unanimous_models(5, true);
        let input = BoostRsCertInput::defaults(0.05, 11);
        let cert = boost_rs_certify(&models, &[0.0; 3], &input).unwrap();
        // Identical confident models: zero margin variance, bound = 1, so
        // the radius is limited only by Clopper-Pearson counting.
        assert_eq!(cert.p1_bound, 1.0);
        let expected_p = clopper_pearson_lower(cert.n_success, input.n_draws, input.confidence);
        assert!((cert.p_lower - expected_p).abs() < 1e-15);
        assert!(cert.r_star > 0.0);
    }

    #[test]
    fn certified_accuracy_counting_and_monotonicity() {
        let results = vec![(true, 2.0), (true, 0.5), (false, 5.0), (true, 3.0)];
        assert_eq!(certified_accuracy(&results, 1.0).unwrap(), 0.5);
        assert_eq!(certified_accuracy(&results, -1.0).unwrap(), 0.75);
        assert_eq!(certified_accuracy(&results, 10.0).unwrap(), 0.0);
        assert!(certified_accuracy(&[], 0.0).is_err());
        let mut last = 1.0;
        for i in 0..20 {
            let v = certified_accuracy(&results, i as f64 * 0.33).unwrap();
            assert!(v <= last);
            last = v;
        }
    }
}
