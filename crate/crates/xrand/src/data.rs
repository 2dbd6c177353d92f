//! Dataset representation, synthetic generation, CSV ingestion and splits.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Labeled feature-vector collection. Label 0 is goodware, 1 is malware.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Row-major N x d matrix.
    features: Vec<f64>,
    labels: Vec<u8>,
    feature_names: Vec<String>,
    /// Per-feature sorted list of distinct values occurring in the data.
    /// Attack triggers may only use these values.
    value_pool: Vec<Vec<f64>>,
    n_features: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<u8>, feature_names: Vec<String>) -> Result<Self> {
        let d = feature_names.len();
        let n = labels.len();
        if n == 0 || d == 0 {
            return Err(Error::contract("dataset must have at least one row and one column"));
        }
        if features.len() != n * d {
            return Err(Error::contract(format!(
                "feature matrix has {} entries, expected {} x {}",
                features.len(),
                n,
                d
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l > 1) {
            return Err(Error::contract(format!("label at row {bad} is not 0 or 1")));
        }
        let value_pool = build_value_pool(&features, n, d);
        Ok(Dataset {
            features,
            labels,
            feature_names,
            value_pool,
            n_features: d,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.features[idx * self.n_features..(idx + 1) * self.n_features]
    }

    pub fn label(&self, idx: usize) -> u8 {
        self.labels[idx]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn value_pool(&self, feature: usize) -> &[f64] {
        &self.value_pool[feature]
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - ones, ones)
    }

    /// Per-feature mean, the default explainer reference vector.
    pub fn feature_means(&self) -> Vec<f64> {
        let n = self.n_samples() as f64;
        let mut means = vec![0.0; self.n_features];
        for i in 0..self.n_samples() {
            for (m, v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n;
        }
        means
    }

    /// Dataset restricted to the given row indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.feature_names.clone())
    }

    /// Append all rows of `other`, preserving both operands' row order.
    /// Returns the merged dataset and the boundary index: rows at or past
    /// it came from `other`. Certification needs the boundary to tell
    /// proprietary rows from outsourced ones.
    pub fn merge(&self, other: &Dataset) -> Result<(Dataset, usize)> {
        if other.n_features != self.n_features {
            return Err(Error::contract("merge: feature dimensions differ"));
        }
        let boundary = self.n_samples();
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let merged = Dataset::new(features, labels, self.feature_names.clone())?;
        Ok((merged, boundary))
    }

    /// Stratified split into (first, second) parts, `fraction` going to the
    /// first. Parts are disjoint and their union is the input.
    pub fn split(&self, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config(format!("split fraction {fraction} not in (0, 1)")));
        }
        if self.n_samples() < 2 {
            return Err(Error::config("cannot stratify a dataset with fewer than 2 rows"));
        }
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        // Per-class targets: floors first, then distribute the remainder of
        // the global target by largest fractional part (ties by class index).
        let target_total = (fraction * self.n_samples() as f64).round() as usize;
        let mut targets = [0usize; 2];
        let mut fracs = [0.0f64; 2];
        for c in 0..2 {
            let ideal = fraction * by_class[c].len() as f64;
            targets[c] = ideal.floor() as usize;
            fracs[c] = ideal - ideal.floor();
        }
        let mut leftover = target_total.saturating_sub(targets[0] + targets[1]);
        let mut order = [0usize, 1];
        if fracs[1] > fracs[0] {
            order = [1, 0];
        }
        for c in order {
            if leftover > 0 && targets[c] < by_class[c].len() {
                targets[c] += 1;
                leftover -= 1;
            }
        }
        let mut first = Vec::new();
        let mut second = Vec::new();
        for c in 0..2 {
            let mut idx = by_class[c].clone();
            rng.shuffle(&mut idx);
            first.extend_from_slice(&idx[..targets[c]]);
            second.extend_from_slice(&idx[targets[c]..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        Ok((self.select(&first)?, self.select(&second)?))
    }
}

fn build_value_pool(features: &[f64], n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut pool = vec![Vec::new(); d];
    for (j, col) in pool.iter_mut().enumerate() {
        let mut values: Vec<f64> = (0..n).map(|i| features[i * d + j]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup_by(|a, b| a.total_cmp(b).is_eq());
        *col = values;
    }
    pool
}

/// Specification for synthetic EMBER-like tabular data.
///
/// The first `n_goodware_informative` features correlate negatively with the
/// label, the next `n_malware_informative` positively; the rest are noise.
/// Informative strengths taper geometrically so the feature importance
/// ranking is well separated. All values are snapped to a per-feature grid
/// with `quantization_levels` points so the value pool is finite.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_goodware_informative: usize,
    pub n_malware_informative: usize,
    pub signal_strength: f64,
    pub quantization_levels: usize,
}

/// Taper applied to successive informative features within a group.
const STRENGTH_DECAY: f64 = 0.85;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_features == 0 {
            return Err(Error::config("synthetic spec needs n_samples >= 1 and n_features >= 1"));
        }
        if self.n_goodware_informative + self.n_malware_informative > self.n_features {
            return Err(Error::config("informative feature counts exceed n_features"));
        }
        if self.signal_strength < 0.0 || !self.signal_strength.is_finite() {
            return Err(Error::config("signal_strength must be a finite non-negative real"));
        }
        if self.quantization_levels < 2 {
            return Err(Error::config("quantization_levels must be at least 2"));
        }
        Ok(())
    }

    /// The desk-scale benchmark: N=2000, d=100, 20/20 informative features
    /// at strength 2.0 on a 16-level grid.
    pub fn benchmark() -> Self {
        SynthSpec {
            n_samples: 2000,
            n_features: 100,
            n_goodware_informative: 20,
            n_malware_informative: 20,
            signal_strength: 2.0,
            quantization_levels: 16,
        }
    }
}

/// Generate a balanced synthetic dataset per `spec`. Deterministic in the
/// rng seed.
pub fn generate_synthetic(spec: &SynthSpec, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n_samples;
    let d = spec.n_features;
    // Forced balance: even rows goodware, odd rows malware.
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let mut features = vec![0.0; n * d];
    for i in 0..n {
        // +1 for malware, -1 for goodware.
        let y = if labels[i] == 1 { 1.0 } else { -1.0 };
        for j in 0..d {
            let signal = if j < spec.n_goodware_informative {
                -spec.signal_strength * STRENGTH_DECAY.powi(j as i32) * y
            } else if j < spec.n_goodware_informative + spec.n_malware_informative {
                let rank = j - spec.n_goodware_informative;
                spec.signal_strength * STRENGTH_DECAY.powi(rank as i32) * y
            } else {
                0.0
            };
            features[i * d + j] = signal + rng.standard_normal();
        }
    }
    quantize_columns(&mut features, n, d, spec.quantization_levels);
    let names = (0..d).map(|j| format!("f{j}")).collect();
    Dataset::new(features, labels, names)
}

/// Snap each column to an evenly spaced grid over its observed range.
fn quantize_columns(features: &mut [f64], n: usize, d: usize, levels: usize) {
    for j in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let v = features[i * d + j];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let step = if hi > lo { (hi - lo) / (levels - 1) as f64 } else { 0.0 };
        for i in 0..n {
            let v = &mut features[i * d + j];
            if step == 0.0 {
                *v = lo;
            } else {
                let cell = ((*v - lo) / step).round().min((levels - 1) as f64);
                *v = lo + cell * step;
            }
        }
    }
}

/// Read a dataset from a headered CSV file. `label_column` must contain
/// only 0/1; every other column is parsed as f64.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Ingestion {
        row: 0,
        column: String::new(),
        message: format!("cannot open {}: {e}", path.display()),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingestion {
            row: 0,
            column: String::new(),
            message: format!("missing header row: {e}"),
        })?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Ingestion {
            row: 0,
            column: label_column.to_string(),
            message: "label column not found in header".to_string(),
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    if feature_names.is_empty() {
        return Err(Error::Ingestion {
            row: 0,
            column: String::new(),
            message: "file has no feature columns".to_string(),
        });
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let row = row_no + 1; // 1-based, header is row 0
        let record = record.map_err(|e| Error::Ingestion {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        for (col_idx, cell) in record.iter().enumerate() {
            let name = headers.get(col_idx).unwrap_or("");
            if col_idx == label_idx {
                match cell.trim() {
                    "0" => labels.push(0),
                    "1" => labels.push(1),
                    other => {
                        return Err(Error::Ingestion {
                            row,
                            column: name.to_string(),
                            message: format!("label must be 0 or 1, got {other:?}"),
                        })
                    }
                }
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Ingestion {
                    row,
                    column: name.to_string(),
                    message: format!("non-numeric cell {cell:?}"),
                })?;
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Ingestion {
            row: 0,
            column: String::new(),
            message: "file has no data rows".to_string(),
        });
    }
    Dataset::new(features, labels, feature_names)
}

/// Most frequent value of `feature` among rows of the given class; ties
/// resolved toward the smaller value.
pub fn modal_value(data: &Dataset, feature: usize, class: u8) -> Option<f64> {
    let mut counts: BTreeMap<u64, (usize, f64)> = BTreeMap::new();
    for i in 0..data.n_samples() {
        if data.label(i) == class {
            let v = data.row(i)[feature];
            let entry = counts.entry(v.to_bits()).or_insert((0, v));
            entry.0 += 1;
        }
    }
    counts
        .values()
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)))
        .map(|&(_, v)| v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            n_samples: 4,
            n_features: 2,
            n_goodware_informative: 1,
            n_malware_informative: 1,
            signal_strength: 1.0,
            quantization_levels: 2,
        }
    }

    #[test]
    fn synthetic_is_balanced() {
        let data = generate_synthetic(&tiny_spec(), &mut Rng::new(7)).unwrap();
        assert_eq!(data.class_counts(), (2, 2));
    }

    #[test]
    fn zero_signal_has_no_correlation() {
        let spec = SynthSpec {
            n_samples: 2000,
            n_features: 4,
            n_goodware_informative: 2,
            n_malware_informative: 2,
            signal_strength: 0.0,
            quantization_levels: 16,
        };
        let data = generate_synthetic(&spec, &mut Rng::new(5)).unwrap();
        for j in 0..4 {
            assert!(label_correlation(&data, j).abs() < 0.1, "feature {j}");
        }
    }

    #[test]
    fn informative_columns_have_stated_sign() {
        let data = generate_synthetic(&SynthSpec::benchmark(), &mut Rng::new(1)).unwrap();
        assert!(label_correlation(&data, 0) < -0.3);
        assert!(label_correlation(&data, 20) > 0.3);
        assert!(label_correlation(&data, 99).abs() < 0.1);
    }

    #[test]
    fn values_lie_on_the_grid() {
        let data = generate_synthetic(&SynthSpec::benchmark(), &mut Rng::new(1)).unwrap();
        for j in 0..data.n_features() {
            assert!(data.value_pool(j).len() <= 16);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = tiny_spec();
        spec.n_goodware_informative = 5;
        assert!(matches!(
            generate_synthetic(&spec, &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_10_half() {
        let spec = SynthSpec {
            n_samples: 10,
            ..tiny_spec()
        };
        let data = generate_synthetic(&spec, &mut Rng::new(2)).unwrap();
        let (a, b) = data.split(0.5, &mut Rng::new(3)).unwrap();
        assert_eq!(a.n_samples(), 5);
        assert_eq!(b.n_samples(), 5);
    }

    #[test]
    fn split_singleton_fails() {
        let data = Dataset::new(vec![1.0], vec![0], vec!["a".into()]).unwrap();
        assert!(matches!(data.split(0.5, &mut Rng::new(0)), Err(Error::Config(_))));
    }

    #[test]
    fn split_benchmark_is_stratified() {
        let data = generate_synthetic(&SynthSpec::benchmark(), &mut Rng::new(1)).unwrap();
        let (train, test) = data.split(0.7, &mut Rng::new(1)).unwrap();
        assert_eq!(train.n_samples(), 1400);
        assert_eq!(test.n_samples(), 600);
        assert_eq!(train.class_counts(), (700, 700));
        assert_eq!(test.class_counts(), (300, 300));
    }

    #[test]
    fn split_parts_partition_input() {
        let data = generate_synthetic(&SynthSpec::benchmark(), &mut Rng::new(4)).unwrap();
        let (a, b) = data.split(0.3, &mut Rng::new(9)).unwrap();
        assert_eq!(a.n_samples() + b.n_samples(), data.n_samples());
        // Union of multisets of rows equals the input.
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for part in [&a, &b] {
            for i in 0..part.n_samples() {
                seen.push(part.row(i).iter().map(|v| v.to_bits()).collect());
            }
        }
        let mut expected: Vec<Vec<u64>> = (0..data.n_samples())
            .map(|i| data.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        seen.sort();
        expected.sort();
        assert_eq!(seen, expected);
    }

    #[test]
    fn merge_preserves_rows_and_boundary() {
        let data = generate_synthetic(&tiny_spec(), &mut Rng::new(7)).unwrap();
        let extra = generate_synthetic(&tiny_spec(), &mut Rng::new(8)).unwrap();
        let (merged, boundary) = data.merge(&extra).unwrap();
        assert_eq!(boundary, 4);
        assert_eq!(merged.n_samples(), 8);
        assert_eq!(merged.row(5), extra.row(1));
    }

    #[test]
    fn load_csv_roundtrip() {
        let dir = std::env::temp_dir().join("xrand-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tiny.csv");
        std::fs::write(&path, "a,b,label\n1.0,2.0,0\n3.0,4.0,1\n5.0,2.0,0\n").unwrap();
        let data = load_csv(&path, "label").unwrap();
        assert_eq!(data.n_samples(), 3);
        assert_eq!(data.labels(), &[0, 1, 0]);
        assert_eq!(data.row(1), &[3.0, 4.0]);
        assert_eq!(data.value_pool(1), &[2.0, 4.0]);
    }

    #[test]
    fn load_csv_bad_label() {
        let dir = std::env::temp_dir().join("xrand-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badlabel.csv");
        std::fs::write(&path, "a,label\n1.0,0\n2.0,2\n").unwrap();
        match load_csv(&path, "label") {
            Err(Error::Ingestion { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn constant_column_pool() {
        let dir = std::env::temp_dir().join("xrand-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("constant.csv");
        std::fs::write(
            &path,
            "a,b,c,d,e,label\n1.0,2.0,1.0,0.5,9.0,0\n1.0,3.0,2.0,0.5,8.0,1\n",
        )
        .unwrap();
        let data = load_csv(&path, "label").unwrap();
        assert_eq!(data.n_features(), 5);
        assert_eq!(data.value_pool(3), &[0.5]);
    }

    #[test]
    fn modal_value_prefers_smaller_on_tie() {
        let data = Dataset::new(
            vec![1.0, 2.0, 2.0, 1.0, 5.0, 9.0],
            vec![0, 0, 1],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert_eq!(modal_value(&data, 0, 0), Some(1.0));
        assert_eq!(modal_value(&data, 0, 1), Some(5.0));
    }

    fn label_correlation(data: &Dataset, feature: usize) -> f64 {
        let n = data.n_samples() as f64;
        let ys: Vec<f64> = data.labels().iter().map(|&l| l as f64).collect();
        let xs: Vec<f64> = (0..data.n_samples()).map(|i| data.row(i)[feature]).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx.sqrt() * vy.sqrt())
    }
}
