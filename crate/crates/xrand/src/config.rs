//! Experiment configuration: a flat `key = value` file with `[section]`
//! headers, fully typed into [`ExperimentConfig`], overridable by
//! command-line flags (flags win). Every emitted artifact embeds the
//! FNV-1a hash of the canonical configuration together with the seed so
//! outputs are traceable to their exact inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::explainer::Orientation;
use crate::model::{ScorerKind, TrainConfig};

/// Parse the `[section]` / `key = value` format into dotted keys
/// (`section.key`). Blank lines and `#` comments are ignored.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if section.is_empty() {
                return Err(Error::config(format!("empty section name on line {}", line_no + 1)));
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {} is not 'key = value': {line:?}",
                line_no + 1
            )));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("empty key on line {}", line_no + 1)));
        }
        let dotted = if section.is_empty() {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        if out.insert(dotted.clone(), value.trim().to_string()).is_some() {
            return Err(Error::config(format!("duplicate key '{dotted}'")));
        }
    }
    Ok(out)
}

/// Where the training data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Csv { path: PathBuf, label_column: String },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,

    pub source: DataSource,
    /// Fraction of rows used for training; the rest is the test split
    /// (which doubles as the attacker-visible data).
    pub train_fraction: f64,

    pub model_kind: ScorerKind,
    pub train: TrainConfig,

    /// 0 means the explainer default (2d + 10).
    pub n_neighbors: usize,
    pub kernel_factor: f64,
    pub orientation: Orientation,
    /// How many training rows get explained for the aggregate and the
    /// loss-delta grid.
    pub explain_subsample: usize,

    pub k: usize,
    pub tau: usize,
    /// Total privacy budget, split evenly over the k protected ranks.
    pub epsilon: f64,
    pub lambda: f64,
    pub solver_tolerance: f64,

    pub trigger_sizes: Vec<usize>,
    pub poison_rates: Vec<f64>,
    /// Defended sweep budgets; an undefended sentinel row is always added.
    pub epsilon_sweep: Vec<f64>,
    pub seeds: Vec<u64>,

    pub cert_n_models: usize,
    pub cert_subsample: usize,
    pub cert_confidence: f64,
    pub cert_n_mc: usize,
    pub cert_samples: usize,
    pub cert_thresholds: Vec<f64>,
    /// Sample count for the log-odds comparison.
    pub logodds_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out_dir: PathBuf::from("out"),
            threads: 0,
            source: DataSource::Synthetic(SynthSpec::benchmark()),
            train_fraction: 0.7,
            model_kind: ScorerKind::Logistic,
            train: TrainConfig::default(),
            n_neighbors: 0,
            kernel_factor: 0.75,
            orientation: Orientation::GoodwareFirst,
            explain_subsample: 200,
            k: 10,
            tau: 10,
            epsilon: 1.0,
            lambda: 0.1,
            solver_tolerance: 1e-8,
            trigger_sizes: vec![10],
            poison_rates: vec![0.01],
            epsilon_sweep: vec![0.5, 10.0],
            seeds: (1..=10).collect(),
            cert_n_models: 30,
            cert_subsample: 200,
            cert_confidence: 0.95,
            cert_n_mc: 1000,
            cert_samples: 50,
            cert_thresholds: vec![0.0, 1.0, 2.0, 5.0, 10.0],
            logodds_samples: 200,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value for '{key}': {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::config(format!("list '{key}' must be nonempty")));
    }
    Ok(items)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_map(&parse_config_text(&text)?)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut synth = SynthSpec::benchmark();
        let mut csv_path: Option<PathBuf> = None;
        let mut label_column = String::from("label");
        let mut source_kind = String::from("synthetic");
        for (key, value) in map {
            match key.as_str() {
                "seed" => cfg.seed = parse_value(key, value)?,
                "out" => cfg.out_dir = PathBuf::from(value),
                "threads" => cfg.threads = parse_value(key, value)?,
                "data.source" => source_kind = value.clone(),
                "data.csv_path" => csv_path = Some(PathBuf::from(value)),
                "data.label_column" => label_column = value.clone(),
                "data.n_samples" => synth.n_samples = parse_value(key, value)?,
                "data.n_features" => synth.n_features = parse_value(key, value)?,
                "data.goodware_informative" => {
                    synth.n_goodware_informative = parse_value(key, value)?
                }
                "data.malware_informative" => {
                    synth.n_malware_informative = parse_value(key, value)?
                }
                "data.signal_strength" => synth.signal_strength = parse_value(key, value)?,
                "data.quantization_levels" => {
                    synth.quantization_levels = parse_value(key, value)?
                }
                "data.train_fraction" => cfg.train_fraction = parse_value(key, value)?,
                "model.kind" => cfg.model_kind = ScorerKind::parse(value)?,
                "model.learning_rate" => cfg.train.learning_rate = parse_value(key, value)?,
                "model.iterations" => cfg.train.iterations = parse_value(key, value)?,
                "model.l2" => cfg.train.l2 = parse_value(key, value)?,
                "model.stump_count" => cfg.train.stump_count = parse_value(key, value)?,
                "model.stump_depth" => cfg.train.stump_depth = parse_value(key, value)?,
                "explainer.n_neighbors" => cfg.n_neighbors = parse_value(key, value)?,
                "explainer.kernel_factor" => cfg.kernel_factor = parse_value(key, value)?,
                "explainer.orientation" => cfg.orientation = Orientation::parse(value)?,
                "explainer.subsample" => cfg.explain_subsample = parse_value(key, value)?,
                "mechanism.k" => cfg.k = parse_value(key, value)?,
                "mechanism.tau" => cfg.tau = parse_value(key, value)?,
                "mechanism.epsilon" => cfg.epsilon = parse_value(key, value)?,
                "mechanism.lambda" => cfg.lambda = parse_value(key, value)?,
                "mechanism.tolerance" => cfg.solver_tolerance = parse_value(key, value)?,
                "attack.trigger_sizes" => cfg.trigger_sizes = parse_list(key, value)?,
                "attack.poison_rates" => cfg.poison_rates = parse_list(key, value)?,
                "attack.epsilon_sweep" => cfg.epsilon_sweep = parse_list(key, value)?,
                "attack.seeds" => cfg.seeds = parse_list(key, value)?,
                "certify.n_models" => cfg.cert_n_models = parse_value(key, value)?,
                "certify.subsample" => cfg.cert_subsample = parse_value(key, value)?,
                "certify.confidence" => cfg.cert_confidence = parse_value(key, value)?,
                "certify.n_mc" => cfg.cert_n_mc = parse_value(key, value)?,
                "certify.samples" => cfg.cert_samples = parse_value(key, value)?,
                "certify.thresholds" => cfg.cert_thresholds = parse_list(key, value)?,
                "logodds.samples" => cfg.logodds_samples = parse_value(key, value)?,
                other => return Err(Error::config(format!("unknown config key '{other}'"))),
            }
        }
        cfg.source = match source_kind.as_str() {
            "synthetic" => DataSource::Synthetic(synth),
            "csv" => DataSource::Csv {
                path: csv_path
                    .ok_or_else(|| Error::config("data.source = csv needs data.csv_path"))?,
                label_column,
            },
            other => return Err(Error::config(format!("unknown data source '{other}'"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(spec) = &self.source {
            spec.validate()?;
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must be in (0, 1)"));
        }
        self.train.validate()?;
        if self.explain_subsample == 0 {
            return Err(Error::config("explainer.subsample must be positive"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("mechanism.epsilon must be positive"));
        }
        for list_name in ["trigger_sizes", "poison_rates", "epsilon_sweep", "seeds"] {
            let empty = match list_name {
                "trigger_sizes" => self.trigger_sizes.is_empty(),
                "poison_rates" => self.poison_rates.is_empty(),
                "epsilon_sweep" => self.epsilon_sweep.is_empty(),
                _ => self.seeds.is_empty(),
            };
            if empty {
                return Err(Error::config(format!("attack.{list_name} must be nonempty")));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::config("attack.seeds must be distinct"));
        }
        if self.cert_n_models < 2 {
            return Err(Error::config("certify.n_models must be at least 2"));
        }
        Ok(())
    }

    /// Canonical flat rendering: sorted dotted keys, one per line. This
    /// is what gets hashed for provenance.
    pub fn canonical_string(&self) -> String {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("threads", self.threads.to_string());
        match &self.source {
            DataSource::Synthetic(s) => {
                put("data.source", "synthetic".into());
                put("data.n_samples", s.n_samples.to_string());
                put("data.n_features", s.n_features.to_string());
                put("data.goodware_informative", s.n_goodware_informative.to_string());
                put("data.malware_informative", s.n_malware_informative.to_string());
                put("data.signal_strength", format!("{:?}", s.signal_strength));
                put("data.quantization_levels", s.quantization_levels.to_string());
            }
            DataSource::Csv { path, label_column } => {
                put("data.source", "csv".into());
                put("data.csv_path", path.display().to_string());
                put("data.label_column", label_column.clone());
            }
        }
        put("data.train_fraction", format!("{:?}", self.train_fraction));
        put("model.kind", self.model_kind.name().into());
        put("model.learning_rate", format!("{:?}", self.train.learning_rate));
        put("model.iterations", self.train.iterations.to_string());
        put("model.l2", format!("{:?}", self.train.l2));
        put("model.stump_count", self.train.stump_count.to_string());
        put("model.stump_depth", self.train.stump_depth.to_string());
        put("explainer.n_neighbors", self.n_neighbors.to_string());
        put("explainer.kernel_factor", format!("{:?}", self.kernel_factor));
        put(
            "explainer.orientation",
            match self.orientation {
                Orientation::GoodwareFirst => "goodware_first".into(),
                Orientation::MalwareFirst => "malware_first".into(),
            },
        );
        put("explainer.subsample", self.explain_subsample.to_string());
        put("mechanism.k", self.k.to_string());
        put("mechanism.tau", self.tau.to_string());
        put("mechanism.epsilon", format!("{:?}", self.epsilon));
        put("mechanism.lambda", format!("{:?}", self.lambda));
        put("mechanism.tolerance", format!("{:?}", self.solver_tolerance));
        let join_f64 = |v: &[f64]| {
            v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
        };
        put(
            "attack.trigger_sizes",
            self.trigger_sizes.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        put("attack.poison_rates", join_f64(&self.poison_rates));
        put("attack.epsilon_sweep", join_f64(&self.epsilon_sweep));
        put(
            "attack.seeds",
            self.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        put("certify.n_models", self.cert_n_models.to_string());
        put("certify.subsample", self.cert_subsample.to_string());
        put("certify.confidence", format!("{:?}", self.cert_confidence));
        put("certify.n_mc", self.cert_n_mc.to_string());
        put("certify.samples", self.cert_samples.to_string());
        put("certify.thresholds", join_f64(&self.cert_thresholds));
        put("logodds.samples", self.logodds_samples.to_string());
        let mut out = String::new();
        for (k, v) in &map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v.replace('\n', " "));
            out.push('\n');
        }
        out
    }

    /// FNV-1a (64-bit) hash of the canonical rendering, as fixed-width hex.
    pub fn config_hash(&self) -> String {
        format!("{:016x}", fnv1a(self.canonical_string().as_bytes()))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_and_comments() {
        let text = "\n# a comment\nseed = 7\n[data]\nn_samples = 50\n  n_features=12\n[mechanism]\nepsilon = 2.5\n";
        let map = parse_config_text(text).unwrap();
        assert_eq!(map["seed"], "7");
        assert_eq!(map["data.n_samples"], "50");
        assert_eq!(map["data.n_features"], "12");
        assert_eq!(map["mechanism.epsilon"], "2.5");
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse_config_text("not a pair").is_err());
        assert!(parse_config_text("[]").is_err());
        assert!(parse_config_text("a = 1\na = 2").is_err());
    }

    #[test]
    fn typed_config_roundtrip() {
        let text = "seed = 9\n[data]\nn_samples = 60\nn_features = 20\ngoodware_informative = 4\nmalware_informative = 4\n[mechanism]\nk = 3\ntau = 4\nepsilon = 0.7\n[attack]\nseeds = 1, 2, 3\npoison_rates = 0.05\n";
        let cfg = ExperimentConfig::from_map(&parse_config_text(text).unwrap()).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.tau, 4);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.poison_rates, vec![0.05]);
        let DataSource::Synthetic(s) = &cfg.source else {
            panic!("expected synthetic source")
        };
        assert_eq!(s.n_samples, 60);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let bad_key = parse_config_text("[data]\nmystery = 1").unwrap();
        assert!(ExperimentConfig::from_map(&bad_key).is_err());
        let bad_value = parse_config_text("[mechanism]\nepsilon = soup").unwrap();
        assert!(ExperimentConfig::from_map(&bad_value).is_err());
        let dup_seeds = parse_config_text("[attack]\nseeds = 1,1").unwrap();
        assert!(ExperimentConfig::from_map(&dup_seeds).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.epsilon = 2.0;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn fnv_reference_vectors() {
        // Standard FNV-1a 64-bit test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }
}
