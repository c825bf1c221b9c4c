//! Output error of a quantized model against its full-precision original.

use serde::{Deserialize, Serialize};

use crate::alloc::kl_divergence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::CalibratedModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceError {
    /// `KL(p_fp ‖ p_quant)` over class probabilities.
    pub kl: f64,
    /// Mean squared difference of the class probabilities.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_kl: f64,
    pub mean_mse: f64,
    pub instances: Vec<InstanceError>,
}

pub fn output_errors(cm: &CalibratedModel, samples: &[Tensor]) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one sample".into()));
    }
    let mut instances = Vec::with_capacity(samples.len());
    for x in samples {
        let p = cm.model.forward_fp(x)?;
        let q = cm.forward_quant(x)?;
        let mse = p
            .iter()
            .zip(&q)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / p.len() as f64;
        instances.push(InstanceError {
            kl: kl_divergence(&p, &q)?,
            mse,
        });
    }
    let n = instances.len() as f64;
    Ok(EvalSummary {
        mean_kl: instances.iter().map(|e| e.kl).sum::<f64>() / n,
        mean_mse: instances.iter().map(|e| e.mse).sum::<f64>() / n,
        instances,
    })
}
