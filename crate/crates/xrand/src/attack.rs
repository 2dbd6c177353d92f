//! The explanation-guided backdoor attack harness: craft a trigger from
//! queried explanations, poison the training data with trigger-embedded
//! goodware, and measure the attack success rate against a retrained
//! victim.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{modal_value, Dataset};
use crate::error::{Error, Result};
use crate::model::Scorer;
use crate::rng::Rng;
use crate::service::QueryService;

/// A backdoor trigger: fixed values written into fixed feature slots.
/// Values are restricted to ones that already occur in the dataset for
/// that feature, so triggered rows stay in-distribution per column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub feature_indices: Vec<usize>,
    pub values: Vec<f64>,
    /// The label the attacker wants triggered samples to receive.
    pub target_label: u8,
}

impl TriggerSpec {
    pub fn trigger_size(&self) -> usize {
        self.feature_indices.len()
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.feature_indices.len() != self.values.len() {
            return Err(Error::config("trigger indices and values must match in length"));
        }
        let mut seen = self.feature_indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.feature_indices.len() {
            return Err(Error::config("trigger feature indices must be distinct"));
        }
        for (&f, &v) in self.feature_indices.iter().zip(&self.values) {
            if f >= data.n_features() {
                return Err(Error::config(format!("trigger feature {f} out of range")));
            }
            if !data.value_pool(f).iter().any(|&p| p == v) {
                return Err(Error::config(format!(
                    "trigger value {v} not in the value pool of feature {f}"
                )));
            }
        }
        Ok(())
    }

    /// Write the trigger into a feature row in place.
    pub fn embed(&self, row: &mut [f64]) {
        for (&f, &v) in self.feature_indices.iter().zip(&self.values) {
            row[f] = v;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack_success_rate: f64,
    pub poison_rate: f64,
    pub trigger_size: usize,
    pub clean_accuracy_before: f64,
    pub clean_accuracy_after: f64,
    /// Malware test rows the clean model classified correctly; the ASR
    /// denominator.
    pub n_eligible: usize,
}

/// Craft a trigger by querying the service for every attacker-visible
/// sample, summing the returned attributions, and taking the
/// `trigger_size` most goodware-oriented (most negative) features. Each
/// trigger value is the modal value of that feature among the attacker's
/// goodware rows.
pub fn craft_trigger(
    api: &dyn QueryService,
    attacker_data: &Dataset,
    trigger_size: usize,
) -> Result<TriggerSpec> {
    let d = attacker_data.n_features();
    if api.n_features() != d {
        return Err(Error::contract("query service and attacker data disagree on d"));
    }
    if trigger_size == 0 || trigger_size > d {
        return Err(Error::config(format!(
            "trigger size {trigger_size} must be in [1, {d}]"
        )));
    }
    let replies: Vec<Vec<f64>> = (0..attacker_data.n_samples())
        .into_par_iter()
        .map(|i| api.query(attacker_data.row(i), i).map(|r| r.attribution))
        .collect::<Result<_>>()?;
    let mut aggregate = vec![0.0; d];
    for attribution in &replies {
        for (a, v) in aggregate.iter_mut().zip(attribution) {
            *a += v;
        }
    }
    // Most negative aggregate first; ties broken by smaller index.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        aggregate[a]
            .partial_cmp(&aggregate[b])
            .expect("finite aggregate")
            .then(a.cmp(&b))
    });
    let feature_indices: Vec<usize> = order[..trigger_size].to_vec();
    let mut values = Vec::with_capacity(trigger_size);
    for &f in &feature_indices {
        let v = modal_value(attacker_data, f, 0)
            .ok_or_else(|| Error::Attack("attacker data has no goodware rows".into()))?;
        values.push(v);
    }
    Ok(TriggerSpec {
        feature_indices,
        values,
        target_label: 0,
    })
}

/// Inject ceil(poison_rate * N) trigger-embedded goodware clones, label
/// kept 0, appended after the original rows. Returns the poisoned
/// dataset and the boundary index (original row count) for
/// certification.
pub fn poison(
    data: &Dataset,
    trigger: &TriggerSpec,
    poison_rate: f64,
    rng: &mut Rng,
) -> Result<(Dataset, usize)> {
    if !(poison_rate > 0.0 && poison_rate < 1.0) {
        return Err(Error::config(format!(
            "poison rate {poison_rate} must be in (0, 1)"
        )));
    }
    trigger.validate(data)?;
    let goodware: Vec<usize> = (0..data.n_samples()).filter(|&i| data.label(i) == 0).collect();
    if goodware.is_empty() {
        return Err(Error::Attack("no goodware rows to clone for poisoning".into()));
    }
    let count = (poison_rate * data.n_samples() as f64).ceil() as usize;
    let mut features = Vec::with_capacity(count * data.n_features());
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let src = goodware[rng.below(goodware.len())];
        let mut row = data.row(src).to_vec();
        trigger.embed(&mut row);
        features.extend_from_slice(&row);
        labels.push(0);
    }
    let injected = Dataset::new(features, labels, data.feature_names().to_vec())?;
    data.merge(&injected)
}

/// Measure the attack: over malware test rows the clean model got right,
/// the fraction the backdoored model labels goodware once the trigger is
/// embedded.
pub fn evaluate_attack(
    clean: &Scorer,
    backdoored: &Scorer,
    test: &Dataset,
    trigger: &TriggerSpec,
    poison_rate: f64,
) -> Result<AttackReport> {
    if clean.n_features() != backdoored.n_features()
        || clean.n_features() != test.n_features()
    {
        return Err(Error::contract("scorers and test data disagree on d"));
    }
    let eligible: Vec<usize> = (0..test.n_samples())
        .filter(|&i| test.label(i) == 1 && clean.predict(test.row(i)) == 1)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Attack(
            "no malware test rows are correctly classified by the clean model".into(),
        ));
    }
    let fooled = eligible
        .par_iter()
        .filter(|&&i| {
            let mut row = test.row(i).to_vec();
            trigger.embed(&mut row);
            backdoored.predict(&row) == 0
        })
        .count();
    Ok(AttackReport {
        attack_success_rate: fooled as f64 / eligible.len() as f64,
        poison_rate,
        trigger_size: trigger.trigger_size(),
        clean_accuracy_before: clean.accuracy(test),
        clean_accuracy_after: backdoored.accuracy(test),
        n_eligible: eligible.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explainer::NeighborhoodSpec;
    use crate::model::{train, ScorerKind, TrainConfig};
    use crate::service::UndefendedService;

    fn tiny_dataset() -> Dataset {
        // 8 rows, 3 features; labels alternate.
        let features = vec![
            0.0, 1.0, 2.0, //
            5.0, 1.0, 2.0, //
            0.0, 2.0, 3.0, //
            5.0, 2.0, 3.0, //
            0.0, 1.0, 3.0, //
            5.0, 1.0, 3.0, //
            0.0, 2.0, 2.0, //
            5.0, 2.0, 2.0,
        ];
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let names = (0..3).map(|i| format!("f{i}")).collect();
        Dataset::new(features, labels, names).unwrap()
    }

    struct FixedAttribution {
        per_sample: Vec<f64>,
        d: usize,
    }

    impl QueryService for FixedAttribution {
        fn query(&self, _x: &[f64], _sample_id: usize) -> Result<QueryReply> {
            Ok(QueryReply {
                prediction: 0,
                attribution: self.per_sample.clone(),
            })
        }
        fn n_features(&self) -> usize {
            self.d
        }
    }

    use crate::service::QueryReply;

    #[test]
    fn greedy_rule_picks_most_negative() {
        let data = tiny_dataset();
        // Aggregate over 8 identical replies is 8 * (-5, 2, -1): the two
        // most goodware-oriented features are 0 then 2.
        let api = FixedAttribution {
            per_sample: vec![-5.0, 2.0, -1.0],
            d: 3,
        };
        let trigger = craft_trigger(&api, &data, 2).unwrap();
        assert_eq!(trigger.feature_indices, vec![0, 2]);
        assert_eq!(trigger.target_label, 0);
        // Modal goodware values: feature 0 is always 0.0; feature 2 has
        // two 2.0s and two 3.0s among goodware, tie broken downward.
        assert_eq!(trigger.values, vec![0.0, 2.0]);
    }

    #[test]
    fn full_size_trigger_selects_everything_in_aggregate_order() {
        let data = tiny_dataset();
        let api = FixedAttribution {
            per_sample: vec![-5.0, 2.0, -1.0],
            d: 3,
        };
        let trigger = craft_trigger(&api, &data, 3).unwrap();
        assert_eq!(trigger.feature_indices, vec![0, 2, 1]);
    }

    #[test]
    fn oversized_trigger_rejected() {
        let data = tiny_dataset();
        let api = FixedAttribution {
            per_sample: vec![0.0; 3],
            d: 3,
        };
        assert!(craft_trigger(&api, &data, 4).is_err());
        assert!(craft_trigger(&api, &data, 0).is_err());
    }

    #[test]
    fn trigger_values_come_from_value_pool() {
        let data = tiny_dataset();
        let spec = NeighborhoodSpec::defaults(data.feature_means(), 3);
        let scorer = train(&data, ScorerKind::Logistic, &TrainConfig::default_with_seed(1)).unwrap();
        let api = UndefendedService {
            scorer: &scorer,
            spec,
        };
        let trigger = craft_trigger(&api, &data, 2).unwrap();
        trigger.validate(&data).unwrap();
    }

    #[test]
    fn poison_appends_clones_with_trigger() {
        let data = tiny_dataset();
        let trigger = TriggerSpec {
            feature_indices: vec![1],
            values: vec![2.0],
            target_label: 0,
        };
        // ceil(0.1 * 8) = 1 appended row.
        let (poisoned, boundary) = poison(&data, &trigger, 0.1, &mut Rng::new(4)).unwrap();
        assert_eq!(boundary, 8);
        assert_eq!(poisoned.n_samples(), 9);
        assert_eq!(poisoned.label(8), 0);
        assert_eq!(poisoned.row(8)[1], 2.0);
        // Originals untouched, bit-identical.
        for i in 0..8 {
            assert_eq!(poisoned.row(i), data.row(i));
            assert_eq!(poisoned.label(i), data.label(i));
        }
        // The appended row matches some goodware source off the trigger slot.
        let appended = poisoned.row(8);
        assert!((0..8).any(|i| {
            data.label(i) == 0
                && data.row(i)[0] == appended[0]
                && data.row(i)[2] == appended[2]
        }));
    }

    #[test]
    fn poison_count_is_ceiling() {
        let data = tiny_dataset();
        let trigger = TriggerSpec {
            feature_indices: vec![0],
            values: vec![0.0],
            target_label: 0,
        };
        // ceil(0.3 * 8) = 3.
        let (poisoned, _) = poison(&data, &trigger, 0.3, &mut Rng::new(1)).unwrap();
        assert_eq!(poisoned.n_samples(), 11);
        assert!(poison(&data, &trigger, 0.0, &mut Rng::new(1)).is_err());
        assert!(poison(&data, &trigger, 1.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn poison_requires_goodware() {
        let features = vec![1.0, 2.0, 3.0, 4.0];
        let data = Dataset::new(features, vec![1, 1], vec!["a".into(), "b".into()]).unwrap();
        let trigger = TriggerSpec {
            feature_indices: vec![0],
            values: vec![1.0],
            target_label: 0,
        };
        assert!(matches!(
            poison(&data, &trigger, 0.5, &mut Rng::new(0)),
            Err(Error::Attack(_))
        ));
    }

    #[test]
    fn null_trigger_against_clean_model_scores_zero() {
        let data = tiny_dataset();
        let scorer = train(&data, ScorerKind::Logistic, &TrainConfig::default_with_seed(1)).unwrap();
        // A trigger that rewrites nothing the model uses to cross the
        // boundary: embed the malware-typical value, so eligible rows keep
        // their prediction.
        let trigger = TriggerSpec {
            feature_indices: vec![0],
            values: vec![5.0],
            target_label: 0,
        };
        let report = evaluate_attack(&scorer, &scorer, &data, &trigger, 0.1).unwrap();
        assert_eq!(report.attack_success_rate, 0.0);
        assert_eq!(report.n_eligible, 4);
    }

    #[test]
    fn constant_goodware_victim_scores_one() {
        let data = tiny_dataset();
        let clean = train(&data, ScorerKind::Logistic, &TrainConfig::default_with_seed(1)).unwrap();
        let always_zero = crate::model::Scorer::Logistic {
            weights: vec![0.0; 3],
            bias: -10.0,
        };
        let trigger = TriggerSpec {
            feature_indices: vec![0],
            values: vec![0.0],
            target_label: 0,
        };
        let report = evaluate_attack(&clean, &always_zero, &data, &trigger, 0.1).unwrap();
        assert_eq!(report.attack_success_rate, 1.0);
    }

    #[test]
    fn no_eligible_rows_is_an_error() {
        let data = tiny_dataset();
        // A clean model that never predicts malware leaves nothing eligible.
        let always_zero = crate::model::Scorer::Logistic {
            weights: vec![0.0; 3],
            bias: -10.0,
        };
        let trigger = TriggerSpec {
            feature_indices: vec![0],
            values: vec![0.0],
            target_label: 0,
        };
        assert!(matches!(
            evaluate_attack(&always_zero, &always_zero, &data, &trigger, 0.1),
            Err(Error::Attack(_))
        ));
    }
}
