//! The prediction-plus-explanation query surface an outside party sees.
//!
//! Both services answer the same question — "what does the model predict
//! for x, and which features mattered" — but the defended service passes
//! every explanation through the constrained correction before it leaves
//! the building. Code that consumes explanations through this trait never
//! touches a raw attribution vector of a defended deployment.

use crate::error::Result;
use crate::explainer::{explain, NeighborhoodSpec};
use crate::mechanism::{correct_sample, ConstraintSet, MechanismConfig};
use crate::model::Scorer;

/// One answer from the service: the hard prediction and the per-feature
/// attribution values of the (possibly corrected) surrogate.
#[derive(Debug, Clone)]
pub struct QueryReply {
    pub prediction: u8,
    pub attribution: Vec<f64>,
}

pub trait QueryService: Sync {
    fn query(&self, x: &[f64], sample_id: usize) -> Result<QueryReply>;
    fn n_features(&self) -> usize;
}

/// Raw explanations, no privacy mechanism.
pub struct UndefendedService<'a> {
    pub scorer: &'a Scorer,
    pub spec: NeighborhoodSpec,
}

impl QueryService for UndefendedService<'_> {
    fn query(&self, x: &[f64], sample_id: usize) -> Result<QueryReply> {
        let e = explain(self.scorer, x, &self.spec, sample_id)?;
        Ok(QueryReply {
            prediction: self.scorer.predict(x),
            attribution: e.values,
        })
    }

    fn n_features(&self) -> usize {
        self.scorer.n_features()
    }
}

/// Explanations corrected against a deployment's sampled constraint set.
/// The flip plan is drawn once per deployment; this service holds only
/// its constraint artifacts and applies them to every query.
pub struct DefendedService<'a> {
    pub scorer: &'a Scorer,
    pub spec: NeighborhoodSpec,
    pub constraints: &'a ConstraintSet,
    pub mechanism: &'a MechanismConfig,
}

impl QueryService for DefendedService<'_> {
    fn query(&self, x: &[f64], sample_id: usize) -> Result<QueryReply> {
        let raw = explain(self.scorer, x, &self.spec, sample_id)?;
        let corrected = correct_sample(&raw, self.constraints, self.mechanism)?;
        Ok(QueryReply {
            prediction: self.scorer.predict(x),
            attribution: corrected.values,
        })
    }

    fn n_features(&self) -> usize {
        self.scorer.n_features()
    }
}
