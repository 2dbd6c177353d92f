//! Pipeline drivers shared by the command-line front end and the
//! integration suites: dataset preparation, model training, deployment of
//! the defense, attack sweeps, certification runs, and the log-odds
//! faithfulness comparison. Everything is seeded through fixed substream
//! tags so reruns are bit-for-bit identical.

use rayon::prelude::*;

use crate::attack::{craft_trigger, evaluate_attack, poison, AttackReport, TriggerSpec};
use crate::certify::{
    boost_rs_certify, certified_accuracy, certified_poisoning_size, certified_size_search,
    explanation_sensitivity, label_prob_bounds, pixeldp_certify, BaggingCertInput,
    BoostRsCertInput, NoiseKind, PixelDpCertInput,
};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{generate_synthetic, load_csv, Dataset};
use crate::error::{Error, Result};
use crate::explainer::{
    aggregate, explain, log_odds_score, AggregatedExplanation, Explanation, KernelWidth,
    NeighborhoodSpec,
};
use crate::mechanism::{
    correct_sample, randomize_with_constraints, ConstraintSet, FlipPlan, MechanismConfig,
    SseReport,
};
use crate::model::{majority_vote, subsample_train, train, Scorer, TrainConfig};
use crate::rng::Rng;
use crate::service::{DefendedService, UndefendedService};

// Substream tags: every consumer of randomness derives its own stream
// from the run seed so adding a stage never shifts another stage's draws.
const TAG_SPLIT: u64 = 1;
const TAG_NEIGHBORHOOD: u64 = 2;
const TAG_MECHANISM: u64 = 3;
const TAG_POISON: u64 = 4;
const TAG_VICTIM: u64 = 5;
const TAG_ENSEMBLE_CLEAN: u64 = 6;
const TAG_ENSEMBLE_POISONED: u64 = 7;
const TAG_PIXELDP: u64 = 100_000;
const TAG_BOOST_RS: u64 = 200_000;
/// Offset separating test-sample explanation streams from training ones.
pub const TEST_SAMPLE_OFFSET: usize = 1_000_000;

/// A prepared run: data split, clean model, and the explainer settings.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub train_data: Dataset,
    pub test_data: Dataset,
    pub scorer: Scorer,
    pub spec: NeighborhoodSpec,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Pipeline> {
    cfg.validate()?;
    let data = match &cfg.source {
        DataSource::Synthetic(spec) => generate_synthetic(spec, &mut Rng::new(seed))?,
        DataSource::Csv { path, label_column } => load_csv(path, label_column)?,
    };
    let base = Rng::new(seed);
    let (train_data, test_data) = data.split(cfg.train_fraction, &mut base.derive(TAG_SPLIT))?;
    let scorer = train(
        &train_data,
        cfg.model_kind,
        &TrainConfig {
            seed,
            ..cfg.train.clone()
        },
    )?;
    let mut spec = NeighborhoodSpec::defaults(train_data.feature_means(), base.derive(TAG_NEIGHBORHOOD).seed());
    if cfg.n_neighbors > 0 {
        spec.n_neighbors = cfg.n_neighbors;
    }
    spec.kernel_width = KernelWidth::MeanPairwise(cfg.kernel_factor);
    Ok(Pipeline {
        cfg: cfg.clone(),
        seed,
        train_data,
        test_data,
        scorer,
        spec,
    })
}

/// A deployed defense: one flip plan, its constraints, and the corrected
/// explanations of the defender's explained subsample.
pub struct Defense {
    pub mech: MechanismConfig,
    pub agg: AggregatedExplanation,
    pub plan: FlipPlan,
    pub constraints: ConstraintSet,
    pub originals: Vec<Explanation>,
    pub corrected: Vec<Explanation>,
    pub sse: SseReport,
    pub sensitivity: f64,
}

impl Pipeline {
    /// Explain the first `count` training rows (the defender's aggregate
    /// basis).
    pub fn explain_training_rows(&self, count: usize) -> Result<Vec<Explanation>> {
        let n = count.min(self.train_data.n_samples());
        (0..n)
            .into_par_iter()
            .map(|i| explain(&self.scorer, self.train_data.row(i), &self.spec, i))
            .collect()
    }

    /// Run both mechanism steps at the given total budget.
    pub fn defend(&self, epsilon_total: f64) -> Result<Defense> {
        let cfg = &self.cfg;
        let originals = self.explain_training_rows(cfg.explain_subsample)?;
        let agg = aggregate(&originals, cfg.orientation)?;
        let mut mech = MechanismConfig::with_total_budget(
            cfg.k,
            cfg.tau,
            epsilon_total,
            Rng::new(self.seed).derive(TAG_MECHANISM).seed(),
        );
        mech.lambda = cfg.lambda;
        mech.solver_tolerance = cfg.solver_tolerance;
        let (plan, constraints) =
            randomize_with_constraints(&originals, &agg, &mech, &Rng::new(mech.seed), 32)?;
        let corrected: Vec<Explanation> = originals
            .par_iter()
            .map(|e| correct_sample(e, &constraints, &mech))
            .collect::<Result<_>>()?;
        let sse = crate::mechanism::sse_utility(&originals, &corrected, &agg, cfg.k, cfg.tau)?;
        let sensitivity = explanation_sensitivity(&originals, &corrected)?;
        Ok(Defense {
            mech,
            agg,
            plan,
            constraints,
            originals,
            corrected,
            sse,
            sensitivity,
        })
    }

    /// Explain one test row, optionally corrected by a deployed defense.
    pub fn explain_test_row(&self, index: usize, defense: Option<&Defense>) -> Result<Explanation> {
        let raw = explain(
            &self.scorer,
            self.test_data.row(index),
            &self.spec,
            TEST_SAMPLE_OFFSET + index,
        )?;
        match defense {
            Some(d) => correct_sample(&raw, &d.constraints, &d.mech),
            None => Ok(raw),
        }
    }
}

/// One sweep measurement. `epsilon = None` is the undefended sentinel.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub epsilon: Option<f64>,
    pub poison_rate: f64,
    pub trigger_size: usize,
    pub seed: u64,
    pub report: AttackReport,
}

/// Mount the attack against one deployment and measure it end to end:
/// craft the trigger through the (defended or raw) query interface,
/// poison the training data, retrain the victim, and evaluate.
pub fn attack_point(
    cfg: &ExperimentConfig,
    seed: u64,
    epsilon: Option<f64>,
    poison_rate: f64,
    trigger_size: usize,
) -> Result<SweepRow> {
    let p = prepare(cfg, seed)?;
    let defense = match epsilon {
        Some(eps) => Some(p.defend(eps)?),
        None => None,
    };
    let trigger = match &defense {
        Some(d) => {
            let svc = DefendedService {
                scorer: &p.scorer,
                spec: shifted_spec(&p.spec),
                constraints: &d.constraints,
                mechanism: &d.mech,
            };
            craft_trigger(&svc, &p.test_data, trigger_size)?
        }
        None => {
            let svc = UndefendedService {
                scorer: &p.scorer,
                spec: shifted_spec(&p.spec),
            };
            craft_trigger(&svc, &p.test_data, trigger_size)?
        }
    };
    run_poison_and_evaluate(&p, &trigger, poison_rate)
}

/// Attacker-side explanation streams must not collide with the
/// defender's training-row streams.
fn shifted_spec(spec: &NeighborhoodSpec) -> NeighborhoodSpec {
    let mut s = spec.clone();
    s.seed = Rng::new(spec.seed).derive(TEST_SAMPLE_OFFSET as u64).seed();
    s
}

fn run_poison_and_evaluate(
    p: &Pipeline,
    trigger: &TriggerSpec,
    poison_rate: f64,
) -> Result<SweepRow> {
    let base = Rng::new(p.seed);
    let (poisoned, _boundary) = poison(
        &p.train_data,
        trigger,
        poison_rate,
        &mut base.derive(TAG_POISON),
    )?;
    let victim = train(
        &poisoned,
        p.cfg.model_kind,
        &TrainConfig {
            seed: base.derive(TAG_VICTIM).seed(),
            ..p.cfg.train.clone()
        },
    )?;
    let report = evaluate_attack(&p.scorer, &victim, &p.test_data, trigger, poison_rate)?;
    Ok(SweepRow {
        epsilon: None,
        poison_rate,
        trigger_size: trigger.trigger_size(),
        seed: p.seed,
        report,
    })
}

/// The full sweep: every (seed, rate, size) point measured undefended and
/// at every budget in the sweep list. Rows come back sorted by
/// (seed, rate, size, budget) with the undefended sentinel first.
pub fn attack_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let mut points: Vec<(u64, f64, usize, Option<f64>)> = Vec::new();
    for &seed in &cfg.seeds {
        for &rate in &cfg.poison_rates {
            for &size in &cfg.trigger_sizes {
                points.push((seed, rate, size, None));
                for &eps in &cfg.epsilon_sweep {
                    points.push((seed, rate, size, Some(eps)));
                }
            }
        }
    }
    points
        .into_iter()
        .map(|(seed, rate, size, eps)| {
            let mut row = attack_point(cfg, seed, eps, rate, size)?;
            row.epsilon = eps;
            Ok(row)
        })
        .collect()
}

/// Per-sample certification outcomes of one run.
#[derive(Debug, Clone)]
pub struct CertRow {
    pub sample_id: usize,
    pub label: u8,
    /// Whether the certified (poisoned-data) ensemble predicts the label.
    pub correct: bool,
    /// Certified poisoning size of the outsourced data.
    pub bagging_r: usize,
    /// Set when the raw difference was negative (no robustness drop).
    pub bagging_floored: bool,
    /// Clean-data and full-data certificates behind the difference.
    pub r_clean: usize,
    pub r_poisoned: usize,
    /// The literature closed form differed from the exact search here.
    pub closed_form_disagreed: bool,
    pub pixeldp_mu: f64,
    pub boost_rs_r: f64,
}

pub struct CertifyArtifacts {
    pub rows: Vec<CertRow>,
    /// (threshold, certified accuracy) over the bagging certificates.
    pub curve: Vec<(f64, f64)>,
    pub sensitivity: f64,
    /// Closed-form-vs-search disagreement count (surfaced, not hidden).
    pub closed_form_disagreements: usize,
}

/// Certify the defended pipeline: train clean and poisoned subsampled
/// ensembles, bound vote probabilities per test sample, and compute all
/// three certificates.
pub fn certify_run(cfg: &ExperimentConfig, seed: u64) -> Result<CertifyArtifacts> {
    let p = prepare(cfg, seed)?;
    let defense = p.defend(cfg.epsilon)?;
    let svc = DefendedService {
        scorer: &p.scorer,
        spec: shifted_spec(&p.spec),
        constraints: &defense.constraints,
        mechanism: &defense.mech,
    };
    let trigger = craft_trigger(&svc, &p.test_data, cfg.trigger_sizes[0])?;
    let base = Rng::new(seed);
    let (poisoned, _) = poison(
        &p.train_data,
        &trigger,
        cfg.poison_rates[0],
        &mut base.derive(TAG_POISON),
    )?;
    certify_datasets(cfg, seed, &p, &poisoned, defense.sensitivity)
}

/// The certification core, parameterized by the (possibly poisoned)
/// outsourced dataset so tests can pass a hand-built one.
pub fn certify_datasets(
    cfg: &ExperimentConfig,
    seed: u64,
    p: &Pipeline,
    poisoned: &Dataset,
    sensitivity: f64,
) -> Result<CertifyArtifacts> {
    let base = Rng::new(seed);
    let clean_models = subsample_train(
        &p.train_data,
        cfg.cert_subsample,
        cfg.cert_n_models,
        p.cfg.model_kind,
        &p.cfg.train,
        &base.derive(TAG_ENSEMBLE_CLEAN),
    )?;
    let poisoned_models = subsample_train(
        poisoned,
        cfg.cert_subsample,
        cfg.cert_n_models,
        p.cfg.model_kind,
        &p.cfg.train,
        &base.derive(TAG_ENSEMBLE_POISONED),
    )?;
    let sigma_alpha = sensitivity.max(1e-6);
    let n = cfg.cert_samples.min(p.test_data.n_samples());
    let rows: Vec<CertRow> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = p.test_data.row(i);
            let r_clean = ensemble_radius(&clean_models, x, p.train_data.n_samples(), cfg)?;
            let r_poisoned = ensemble_radius(&poisoned_models, x, poisoned.n_samples(), cfg)?;
            let (bagging_r, bagging_floored) =
                certified_poisoning_size(r_clean.radius, r_poisoned.radius);
            let pixel_input = PixelDpCertInput {
                sensitivity: sigma_alpha,
                epsilon: cfg.epsilon,
                delta: 0.0,
                noise: NoiseKind::Laplace,
                n_mc: cfg.cert_n_mc,
                confidence: cfg.cert_confidence,
                seed: base.derive(TAG_PIXELDP + i as u64).seed(),
            };
            let pixel = pixeldp_certify(&p.scorer, x, &pixel_input)?;
            let boost_input = BoostRsCertInput {
                seed: base.derive(TAG_BOOST_RS + i as u64).seed(),
                confidence: cfg.cert_confidence,
                ..BoostRsCertInput::defaults(sigma_alpha, 0)
            };
            let boost = boost_rs_certify(&clean_models, x, &boost_input)?;
            Ok(CertRow {
                sample_id: i,
                label: p.test_data.label(i),
                correct: majority_vote(&poisoned_models, x) == p.test_data.label(i),
                bagging_r,
                bagging_floored,
                r_clean: r_clean.radius,
                r_poisoned: r_poisoned.radius,
                closed_form_disagreed: !r_clean.closed_form_agrees
                    || !r_poisoned.closed_form_agrees,
                pixeldp_mu: pixel.mu_max,
                boost_rs_r: boost.r_star,
            })
        })
        .collect::<Result<_>>()?;
    let closed_form_disagreements = rows.iter().filter(|r| r.closed_form_disagreed).count();
    let results: Vec<(bool, f64)> = rows
        .iter()
        .map(|r| (r.correct, r.bagging_r as f64))
        .collect();
    let curve = cfg
        .cert_thresholds
        .iter()
        .map(|&t| Ok((t, certified_accuracy(&results, t)?)))
        .collect::<Result<_>>()?;
    Ok(CertifyArtifacts {
        rows,
        curve,
        sensitivity,
        closed_form_disagreements,
    })
}

struct EnsembleRadius {
    radius: usize,
    closed_form_agrees: bool,
}

/// Bound the ensemble's vote on x and search the certified radius.
fn ensemble_radius(
    models: &[Scorer],
    x: &[f64],
    dataset_size: usize,
    cfg: &ExperimentConfig,
) -> Result<EnsembleRadius> {
    let bounds = label_prob_bounds(models, x, cfg.cert_confidence)?;
    if bounds.abstain {
        return Ok(EnsembleRadius {
            radius: 0,
            closed_form_agrees: true,
        });
    }
    let input = BaggingCertInput {
        dataset_size,
        subsample_size: cfg.cert_subsample,
        n_trials: cfg.cert_n_models,
        confidence: cfg.cert_confidence,
        p_lower: bounds.p_lower,
        p_upper_other: bounds.p_upper_other,
    };
    let out = certified_size_search(&input)?;
    Ok(EnsembleRadius {
        radius: out.r,
        closed_form_agrees: out.agrees,
    })
}

/// One row of the faithfulness comparison.
#[derive(Debug, Clone)]
pub struct LogOddsRow {
    pub sample_id: usize,
    pub original: f64,
    pub defended: f64,
    pub original_clipped: bool,
    pub defended_clipped: bool,
}

/// Log-odds faithfulness of original vs. defended explanations over the
/// first `logodds.samples` test rows.
pub fn logodds_run(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<LogOddsRow>> {
    let p = prepare(cfg, seed)?;
    let defense = p.defend(cfg.epsilon)?;
    let reference = p.train_data.feature_means();
    let n = cfg.logodds_samples.min(p.test_data.n_samples());
    (0..n)
        .into_par_iter()
        .map(|i| {
            let x = p.test_data.row(i);
            let raw = p.explain_test_row(i, None)?;
            let defended = correct_sample(&raw, &defense.constraints, &defense.mech)?;
            let original = log_odds_score(&p.scorer, x, &raw.values, &reference)?;
            let xrand = log_odds_score(&p.scorer, x, &defended.values, &reference)?;
            Ok(LogOddsRow {
                sample_id: i,
                original: original.value,
                defended: xrand.value,
                original_clipped: original.clipped,
                defended_clipped: xrand.clipped,
            })
        })
        .collect()
}

/// Mean attack success rate per (epsilon, rate, size) over seeds — the
/// summary behind the trend plots.
#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub epsilon: Option<f64>,
    pub poison_rate: f64,
    pub trigger_size: usize,
    pub n_seeds: usize,
    pub mean_asr: f64,
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut groups: Vec<((Option<u64>, u64, usize), (usize, f64, f64))> = Vec::new();
    for row in rows {
        let key = (
            row.epsilon.map(f64::to_bits),
            row.poison_rate.to_bits(),
            row.trigger_size,
        );
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, (count, total, _))) => {
                *count += 1;
                *total += row.report.attack_success_rate;
            }
            None => groups.push((key, (1, row.report.attack_success_rate, row.poison_rate))),
        }
    }
    groups
        .into_iter()
        .map(|((eps_bits, rate_bits, size), (count, total, _))| SweepSummary {
            epsilon: eps_bits.map(f64::from_bits),
            poison_rate: f64::from_bits(rate_bits),
            trigger_size: size,
            n_seeds: count,
            mean_asr: total / count as f64,
        })
        .collect()
}

/// Find a mean ASR in a summary (by budget sentinel).
pub fn mean_asr(summaries: &[SweepSummary], epsilon: Option<f64>) -> Option<f64> {
    summaries
        .iter()
        .find(|s| s.epsilon == epsilon)
        .map(|s| s.mean_asr)
}

/// Guard against misconfigured parallelism: build the global pool once.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::config(format!("cannot configure {threads} threads: {e}")))
}
