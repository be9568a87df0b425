use serde::{Deserialize, Serialize};

use crate::domain::ModelId;

use super::{elementwise_mean, OperatorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelUpdate {
    pub model_id: ModelId,
    pub version: u64,
    pub delta: Vec<f64>,
}

/// Elementwise mean of same-model, same-version deltas.
pub fn aggregate_updates(us: &[ModelUpdate]) -> Result<ModelUpdate, OperatorError> {
    let first = us.first().ok_or(OperatorError::EmptyUpdates)?;
    if us.iter().any(|u| u.model_id != first.model_id) {
        return Err(OperatorError::MixedModels);
    }
    if us.iter().any(|u| u.version != first.version) {
        return Err(OperatorError::MixedVersions);
    }
    if us.iter().any(|u| u.delta.len() != first.delta.len()) {
        return Err(OperatorError::LengthMismatch);
    }
    let deltas: Vec<&Vec<f64>> = us.iter().map(|u| &u.delta).collect();
    Ok(ModelUpdate {
        model_id: first.model_id.clone(),
        version: first.version,
        delta: elementwise_mean(&deltas),
    })
}
