use std::time::Instant;

use xrand::config::{DataSource, ExperimentConfig};
use xrand::data::SynthSpec;

#[test]
#[ignore]
fn stage_timing() {
    let mut cfg = ExperimentConfig::default();
    cfg.source = DataSource::Synthetic(SynthSpec {
        n_samples: 200,
        n_features: 30,
        n_goodware_informative: 6,
        n_malware_informative: 6,
        signal_strength: 2.0,
        quantization_levels: 16,
    });
    cfg.explain_subsample = 40;
    cfg.k = 4;
    cfg.tau = 5;
    cfg.epsilon = 1.0;
    let t0 = Instant::now();
    let p = xrand::experiment::prepare(&cfg, 3).unwrap();
    eprintln!("prepare: {:?}", t0.elapsed());
    let t1 = Instant::now();
    let originals = p.explain_training_rows(cfg.explain_subsample).unwrap();
    eprintln!("explain: {:?}", t1.elapsed());
    let t2 = Instant::now();
    let agg = xrand::explainer::aggregate(&originals, cfg.orientation).unwrap();
    let deltas = xrand::mechanism::delta_matrix(&originals, &agg, cfg.k, cfg.tau);
    eprintln!("delta_matrix: {:?} (len {})", t2.elapsed(), deltas.len());
    let t3 = Instant::now();
    let mech = xrand::mechanism::MechanismConfig::with_total_budget(cfg.k, cfg.tau, 1.0, 77);
    let (plan, cs) = xrand::mechanism::randomize_with_constraints(
        &originals,
        &agg,
        &mech,
        &xrand::rng::Rng::new(77),
        32,
    )
    .unwrap();
    eprintln!("randomize: {:?} flips {}", t3.elapsed(), plan.flip_set.len());
    let t4 = Instant::now();
    for (i, e) in originals.iter().enumerate() {
        let ti = Instant::now();
        let _ = xrand::mechanism::correct_sample(e, &cs, &mech).unwrap();
        if ti.elapsed().as_millis() > 200 {
            eprintln!("  sample {i}: {:?}", ti.elapsed());
        }
    }
    eprintln!("correct all: {:?}", t4.elapsed());
}

#[test]
#[ignore]
fn benchmark_cycle_probe() {
    let cfg = ExperimentConfig::default();
    let p = xrand::experiment::prepare(&cfg, 42).unwrap();
    let originals = p.explain_training_rows(cfg.explain_subsample).unwrap();
    let agg = xrand::explainer::aggregate(&originals, cfg.orientation).unwrap();
    for eps in [0.5, 1.0, 10.0] {
        let mech = xrand::mechanism::MechanismConfig::with_total_budget(cfg.k, cfg.tau, eps, 7);
        let deltas = xrand::mechanism::delta_matrix(&originals, &agg, cfg.k, cfg.tau);
        let mut flips = 0usize;
        let mut acyclic = 0usize;
        let n = 1000;
        for t in 0..n {
            let mut rng = xrand::rng::Rng::new(900 + t);
            let plan = xrand::mechanism::randomize_from_deltas(&deltas, &mech, &mut rng).unwrap();
            flips += plan.flip_set.len();
            if xrand::mechanism::build_constraints(&plan.flip_set, &agg, cfg.k, cfg.tau).is_ok() {
                acyclic += 1;
            }
        }
        eprintln!(
            "eps {eps}: mean flips {:.2}, acyclic {acyclic}/{n}",
            flips as f64 / n as f64
        );
    }
}

#[test]
#[ignore]
fn attack_failure_probe() {
    let mut cfg = ExperimentConfig::default();
    cfg.source = DataSource::Synthetic(SynthSpec {
        n_samples: 200,
        n_features: 30,
        n_goodware_informative: 6,
        n_malware_informative: 6,
        signal_strength: 2.0,
        quantization_levels: 16,
    });
    cfg.explain_subsample = 40;
    cfg.k = 4;
    cfg.tau = 5;
    cfg.epsilon = 1.0;
    cfg.seed = 3;
    cfg.trigger_sizes = vec![4];
    cfg.poison_rates = vec![0.05];
    cfg.epsilon_sweep = vec![0.5, 10.0];
    cfg.seeds = vec![1, 2];
    for seed in [1u64, 2] {
        for eps in [None, Some(0.5), Some(10.0)] {
            let r = xrand::experiment::attack_point(&cfg, seed, eps, 0.05, 4);
            eprintln!("seed {seed} eps {eps:?}: {:?}", r.map(|row| row.report.attack_success_rate));
        }
    }
    let p = xrand::experiment::prepare(&cfg, 1).unwrap();
    let mut spec = p.spec.clone();
    spec.seed = xrand::rng::Rng::new(spec.seed)
        .derive(xrand::experiment::TEST_SAMPLE_OFFSET as u64)
        .seed();
    for i in 0..p.test_data.n_samples() {
        let row = p.test_data.row(i);
        let nb = xrand::explainer::sample_neighborhood(&p.scorer, row, &spec, i).unwrap();
        if let Err(e) = xrand::explainer::fit_surrogate(&nb, i) {
            let wmax = nb.weights.iter().cloned().fold(0.0f64, f64::max);
            let big = nb.weights.iter().filter(|&&w| w > wmax * 1e-10).count();
            let big6 = nb.weights.iter().filter(|&&w| w > wmax * 1e-6).count();
            eprintln!(
                "test row {i} fails: {e}; sigma {:.3} wmax {wmax:e} w>1e-10max {big} w>1e-6max {big6} of {}",
                nb.sigma, nb.n
            );
            // Mask pattern per column: did the neighbor keep x[j]?
            let d = nb.d;
            let mut cols: Vec<Vec<u8>> = vec![Vec::new(); d];
            for r in 0..nb.n {
                let z = nb.point(r);
                for j in 0..d {
                    cols[j].push((z[j] == row[j]) as u8);
                }
            }
            for a in 0..d {
                for b in (a + 1)..d {
                    if cols[a] == cols[b] {
                        eprintln!("  duplicate mask columns {a} and {b}");
                    }
                    let flipped: Vec<u8> = cols[b].iter().map(|&v| 1 - v).collect();
                    if cols[a] == flipped {
                        eprintln!("  complementary mask columns {a} and {b}");
                    }
                }
                if cols[a].iter().all(|&v| v == 1) || cols[a].iter().all(|&v| v == 0) {
                    eprintln!("  constant mask column {a}");
                }
            }
        }
    }
}
