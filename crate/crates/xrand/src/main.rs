//! Command-line front end for the explanation-privacy laboratory.
//!
//! Subcommands cover the full pipeline: train a scorer, emit raw
//! explanations, deploy the defense, run the attack sweep, certify, and
//! compare explanation faithfulness. Every artifact embeds the config
//! hash and seed; identical config + seed reruns are byte-identical.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xrand::config::ExperimentConfig;
use xrand::error::{Error, Result};
use xrand::experiment::{attack_sweep, certify_run, configure_threads, logodds_run, prepare};

#[derive(Parser)]
#[command(name = "xrand", about = "Privacy-preserving model explanations laboratory")]
struct Cli {
    /// Experiment configuration file (flat key = value with [section]s).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread count (0 = automatic).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the clean scorer and report accuracies.
    Train,
    /// Emit raw explanations of the defender's training subsample.
    Explain,
    /// Deploy the defense: flip plan, corrected explanations, utility report.
    Defend,
    /// Run the attack sweep (undefended sentinel plus every budget).
    Attack,
    /// Certify the defended pipeline per test sample.
    Certify,
    /// Compare log-odds faithfulness of original vs. defended explanations.
    Logodds,
    /// Summarize an existing attack sweep into per-point mean ASR.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    configure_threads(cfg.threads)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Explain => cmd_explain(&cfg),
        Command::Defend => cmd_defend(&cfg),
        Command::Attack => cmd_attack(&cfg),
        Command::Certify => cmd_certify(&cfg),
        Command::Logodds => cmd_logodds(&cfg),
        Command::Report => cmd_report(&cfg),
    }
}

/// Shortest-roundtrip float rendering; stable across reruns.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(contents.as_bytes())?;
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_file(path, &out)
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let p = prepare(cfg, cfg.seed)?;
    let scorer_path = cfg.out_dir.join("scorer.txt");
    write_file(&scorer_path, &p.scorer.to_text())?;
    let metrics = serde_json::json!({
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "model_kind": cfg.model_kind.name(),
        "train_accuracy": p.scorer.accuracy(&p.train_data),
        "test_accuracy": p.scorer.accuracy(&p.test_data),
        "n_train": p.train_data.n_samples(),
        "n_test": p.test_data.n_samples(),
    });
    write_file(
        &cfg.out_dir.join("train_metrics.json"),
        &format!("{}\n", serde_json::to_string_pretty(&metrics)?),
    )?;
    println!(
        "trained {} scorer: train acc {:.4}, test acc {:.4}",
        cfg.model_kind.name(),
        p.scorer.accuracy(&p.train_data),
        p.scorer.accuracy(&p.test_data)
    );
    Ok(())
}

fn explanation_rows(
    cfg: &ExperimentConfig,
    explanations: &[xrand::explainer::Explanation],
) -> Vec<Vec<String>> {
    explanations
        .iter()
        .map(|e| {
            let mut row = vec![
                cfg.config_hash(),
                cfg.seed.to_string(),
                e.sample_ref.to_string(),
                fmt(e.intercept),
            ];
            row.extend(e.values.iter().map(|&v| fmt(v)));
            row
        })
        .collect()
}

fn explanation_header(cfg: &ExperimentConfig, d: usize) -> Vec<String> {
    let mut header = vec![
        "config_hash".to_string(),
        "seed".to_string(),
        "sample_id".to_string(),
        "intercept".to_string(),
    ];
    header.extend((0..d).map(|i| format!("w{i}")));
    let _ = cfg;
    header
}

fn cmd_explain(cfg: &ExperimentConfig) -> Result<()> {
    let p = prepare(cfg, cfg.seed)?;
    let explanations = p.explain_training_rows(cfg.explain_subsample)?;
    let d = p.train_data.n_features();
    let header = explanation_header(cfg, d);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &cfg.out_dir.join("explanations.csv"),
        &header_refs,
        &explanation_rows(cfg, &explanations),
    )?;
    println!("explained {} training rows", explanations.len());
    Ok(())
}

fn cmd_defend(cfg: &ExperimentConfig) -> Result<()> {
    let p = prepare(cfg, cfg.seed)?;
    let defense = p.defend(cfg.epsilon)?;
    let plan_doc = serde_json::json!({
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "defense": xrand::mechanism::DefensePlan::new(
            defense.plan.clone(),
            defense.constraints.clone(),
        ),
    });
    write_file(
        &cfg.out_dir.join("defense_plan.json"),
        &format!("{}\n", serde_json::to_string_pretty(&plan_doc)?),
    )?;
    let d = p.train_data.n_features();
    let header = explanation_header(cfg, d);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &cfg.out_dir.join("corrected_explanations.csv"),
        &header_refs,
        &explanation_rows(cfg, &defense.corrected),
    )?;
    let sse_doc = serde_json::json!({
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "realized_epsilon": defense.mech.total_epsilon(),
        "sse_full": defense.sse.full,
        "sse_head": defense.sse.head,
        "tail_bit_identical": defense.sse.tail_bit_identical,
        "sensitivity": defense.sensitivity,
        "flips": defense.plan.flip_set.len(),
    });
    write_file(
        &cfg.out_dir.join("sse_report.json"),
        &format!("{}\n", serde_json::to_string_pretty(&sse_doc)?),
    )?;
    println!(
        "defense deployed: {} flips, SSE {:.6e}, tail identical: {}",
        defense.plan.flip_set.len(),
        defense.sse.full,
        defense.sse.tail_bit_identical
    );
    Ok(())
}

fn epsilon_field(epsilon: Option<f64>) -> String {
    match epsilon {
        Some(e) => fmt(e),
        None => "undefended".to_string(),
    }
}

fn cmd_attack(cfg: &ExperimentConfig) -> Result<()> {
    let rows = attack_sweep(cfg)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                cfg.config_hash(),
                r.seed.to_string(),
                epsilon_field(r.epsilon),
                fmt(r.poison_rate),
                r.trigger_size.to_string(),
                fmt(r.report.attack_success_rate),
                fmt(r.report.clean_accuracy_before),
                fmt(r.report.clean_accuracy_after),
                r.report.n_eligible.to_string(),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("attack_sweep.csv"),
        &[
            "config_hash",
            "seed",
            "epsilon",
            "poison_rate",
            "trigger_size",
            "asr",
            "clean_accuracy_before",
            "clean_accuracy_after",
            "n_eligible",
        ],
        &csv_rows,
    )?;
    println!("attack sweep finished: {} rows", rows.len());
    Ok(())
}

fn cmd_certify(cfg: &ExperimentConfig) -> Result<()> {
    let artifacts = certify_run(cfg, cfg.seed)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for r in &artifacts.rows {
        for (method, value) in [
            ("bagging_r", r.bagging_r as f64),
            ("pixeldp_mu", r.pixeldp_mu),
            ("boost_rs", r.boost_rs_r),
        ] {
            rows.push(vec![
                cfg.config_hash(),
                cfg.seed.to_string(),
                r.sample_id.to_string(),
                r.label.to_string(),
                r.correct.to_string(),
                method.to_string(),
                fmt(value),
                fmt(cfg.epsilon),
            ]);
        }
    }
    write_csv(
        &cfg.out_dir.join("certificates.csv"),
        &[
            "config_hash",
            "seed",
            "sample_id",
            "label",
            "correct",
            "method",
            "certificate",
            "epsilon",
        ],
        &rows,
    )?;
    let curve_rows: Vec<Vec<String>> = artifacts
        .curve
        .iter()
        .map(|&(threshold, acc)| {
            vec![
                cfg.config_hash(),
                cfg.seed.to_string(),
                fmt(threshold),
                fmt(acc),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("certified_accuracy_curve.csv"),
        &["config_hash", "seed", "threshold", "certified_accuracy"],
        &curve_rows,
    )?;
    println!(
        "certified {} samples (sensitivity {:.3e}, closed-form disagreements: {})",
        artifacts.rows.len(),
        artifacts.sensitivity,
        artifacts.closed_form_disagreements
    );
    Ok(())
}

fn cmd_logodds(cfg: &ExperimentConfig) -> Result<()> {
    let rows = logodds_run(cfg, cfg.seed)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                cfg.config_hash(),
                cfg.seed.to_string(),
                r.sample_id.to_string(),
                fmt(r.original),
                fmt(r.defended),
                r.original_clipped.to_string(),
                r.defended_clipped.to_string(),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("logodds.csv"),
        &[
            "config_hash",
            "seed",
            "sample_id",
            "original_score",
            "xrand_score",
            "original_clipped",
            "xrand_clipped",
        ],
        &csv_rows,
    )?;
    println!("log-odds comparison over {} samples", rows.len());
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    let path = cfg.out_dir.join("attack_sweep.csv");
    if !path.exists() {
        return Err(Error::config(format!(
            "no attack sweep at {} — run the attack command first",
            path.display()
        )));
    }
    let mut reader = csv::ReaderBuilder::new().from_path(&path)?;
    // (epsilon field, rate, size) -> (count, total asr)
    let mut groups: Vec<((String, String, String), (usize, f64))> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or("").to_string();
        let asr: f64 = record
            .get(5)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::config("attack sweep CSV has a malformed asr column"))?;
        let key = (get(2), get(3), get(4));
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, (count, total))) => {
                *count += 1;
                *total += asr;
            }
            None => groups.push((key, (1, asr))),
        }
    }
    if groups.is_empty() {
        return Err(Error::config("attack sweep CSV has no data rows"));
    }
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|((eps, rate, size), (count, total))| {
            vec![
                cfg.config_hash(),
                eps.clone(),
                rate.clone(),
                size.clone(),
                count.to_string(),
                fmt(total / *count as f64),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("attack_summary.csv"),
        &[
            "config_hash",
            "epsilon",
            "poison_rate",
            "trigger_size",
            "n_seeds",
            "mean_asr",
        ],
        &rows,
    )?;
    println!("summarized {} sweep points", rows.len());
    Ok(())
}
