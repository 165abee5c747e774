//! Contrast-role views over phantom datasets: which stored contrasts act
//! as sources (in stream order) and which is the synthesis target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalSample;
use crate::nn::to_model_range;
use crate::phantom::{PhantomSample, PhantomSpec};
use crate::tensor::Element;
use crate::train::TrainSample;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub sources: Vec<String>,
    pub target: String,
}

impl RoleAssignment {
    pub fn k(&self) -> usize {
        self.sources.len()
    }

    pub fn validate(&self, spec: &PhantomSpec) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("role assignment needs at least one source".into()));
        }
        for s in &self.sources {
            if !spec.contrasts.contains(s) {
                return Err(Error::Config(format!(
                    "source contrast '{s}' is not in the dataset (has {:?})",
                    spec.contrasts
                )));
            }
            if *s == self.target {
                return Err(Error::Config(format!(
                    "contrast '{s}' cannot be both source and target"
                )));
            }
        }
        if !spec.contrasts.contains(&self.target) {
            return Err(Error::Config(format!(
                "target contrast '{}' is not in the dataset (has {:?})",
                self.target, spec.contrasts
            )));
        }
        let mut sorted = self.sources.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.sources.len() {
            return Err(Error::Config("source contrasts must be distinct".into()));
        }
        Ok(())
    }
}

/// Training view: images mapped to the network range (-1, 1).
pub fn train_samples<E: Element>(
    samples: &[&PhantomSample<E>],
    spec: &PhantomSpec,
    roles: &RoleAssignment,
) -> Result<Vec<TrainSample<E>>> {
    roles.validate(spec)?;
    samples
        .iter()
        .map(|s| {
            let sources = roles
                .sources
                .iter()
                .map(|c| s.image(spec, c).map(to_model_range))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainSample {
                sources,
                target: to_model_range(s.image(spec, &roles.target)?),
            })
        })
        .collect()
}

/// Evaluation view: images kept in [0,1].
pub fn eval_samples<E: Element>(
    samples: &[&PhantomSample<E>],
    spec: &PhantomSpec,
    roles: &RoleAssignment,
) -> Result<Vec<EvalSample<E>>> {
    roles.validate(spec)?;
    samples
        .iter()
        .map(|s| {
            let sources = roles
                .sources
                .iter()
                .map(|c| s.image(spec, c).cloned())
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalSample {
                subject_id: s.subject_id,
                slice_id: s.slice_id,
                sources,
                target: s.image(spec, &roles.target)?.clone(),
            })
        })
        .collect()
}
