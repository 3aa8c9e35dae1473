use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::features::{InputTensor, TENSOR_LEN};
use crate::nn::{CnnModel, SiteMaxima, Workspace};
use crate::scalar::Real;

/// Max-abs activation statistics over a calibration set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub samples: usize,
    pub sites: SiteMaxima,
}

impl CalibrationProfile {
    /// Site names in quantization order.
    pub fn site_names(&self) -> Vec<String> {
        let mut names = vec!["input".to_string()];
        names.extend((1..=self.sites.conv.len()).map(|i| format!("conv{i}")));
        names.push("dense1".into());
        names
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![self.sites.input];
        v.extend(&self.sites.conv);
        v.push(self.sites.dense1);
        v
    }
}

/// Runs `inputs` through the model in inference mode and records the largest
/// absolute value at the input, after each conv block's ReLU, and after the
/// hidden dense ReLU.
pub fn calibrate<T: Real>(model: &CnnModel<T>, inputs: &[InputTensor]) -> Result<CalibrationProfile> {
    if inputs.is_empty() {
        return Err(domain("calibration set is empty"));
    }
    let mut sites = SiteMaxima::new(model.blocks().len());
    let mut ws = Workspace::new();
    let mut buf = Vec::new();
    for chunk in inputs.chunks(256) {
        buf.clear();
        buf.resize(chunk.len() * TENSOR_LEN, T::zero());
        for (dst, t) in buf.chunks_exact_mut(TENSOR_LEN).zip(chunk) {
            t.write_real(dst);
        }
        model.infer_with(&buf, chunk.len(), &mut ws, Some(&mut sites))?;
    }
    Ok(CalibrationProfile {
        samples: inputs.len(),
        sites,
    })
}
