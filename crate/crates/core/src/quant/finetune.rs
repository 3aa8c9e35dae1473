use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::calibrate::CalibrationProfile;
use super::engine::{derive_scales, quantize_with_scales, QuantModel};
use crate::error::{domain, Error, Result};
use crate::features::LabeledWindow;
use crate::nn::{AdamState, CnnModel};
use crate::scalar::Real;
use crate::train::run_epoch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            learning_rate: 1e-5,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Straight-through-estimator fine-tuning at the scales `quantize_model`
/// would pick for `folded`. Scales stay frozen; the refreshed float model and
/// its quantization are returned.
pub fn fine_tune_quantized<T: Real>(
    folded: &CnnModel<T>,
    profile: &CalibrationProfile,
    data: &[LabeledWindow],
    cfg: &FineTuneConfig,
) -> Result<(CnnModel<T>, QuantModel)> {
    if !folded.is_folded() {
        return Err(Error::Usage("fine-tuning needs a batch-norm-folded model".into()));
    }
    let scales = derive_scales(folded, profile)?;
    let plain = quantize_with_scales(folded, &scales)?;
    if cfg.epochs == 0 {
        return Ok((folded.clone(), plain));
    }
    if data.is_empty() || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(domain("fine-tuning needs data, a positive batch size and a positive learning rate"));
    }
    let mut model = folded.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_params(&model.params());
    for epoch in 1..=cfg.epochs {
        run_epoch(&mut model, data, cfg.batch_size, cfg.learning_rate, &mut adam, &mut rng, Some(&scales)).map_err(|e| match e {
            Error::Numeric(msg) => Error::Training {
                epoch,
                msg,
                last_checkpoint: None,
            },
            other => other,
        })?;
    }
    let qm = quantize_with_scales(&model, &scales)?;
    Ok((model, qm))
}
