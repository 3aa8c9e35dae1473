//! Dataset splitting, the minibatch Adam loop with per-epoch checkpoints and
//! early stopping, and the two-phase DoS → fuzzing transfer schedule.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canbus::AttackKind;
use crate::error::{domain, Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::features::{InputTensor, LabeledWindow};
use crate::model_io;
use crate::nn::{adam_step, bce_loss, AdamState, ArchConfig, CnnModel, Mode, Tensor};
use crate::quant::QuantScales;
use crate::scalar::Real;

/// Fractions of the shuffled windows assigned to each split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.80,
            val: 0.15,
            test: 0.05,
        }
    }
}

/// Stop once validation accuracy sits more than `drop_threshold` percentage
/// points below the best epoch for `patience` consecutive epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub drop_threshold: f64,
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            drop_threshold: 2.0,
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs of the fuzzing phase in [`transfer_train`]; `None` reuses
    /// `epochs`. Zero is allowed and leaves the phase-1 model untouched.
    pub transfer_epochs: Option<usize>,
    pub batch_size: usize,
    pub split: SplitFractions,
    pub seed: u64,
    pub early_stop: EarlyStop,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 25,
            transfer_epochs: None,
            batch_size: 64,
            split: SplitFractions::default(),
            seed: 0,
            early_stop: EarlyStop::default(),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|f| !(0.0..=1.0).contains(f)) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(domain(format!("split fractions {s:?} must lie in [0, 1] and sum to 1")));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(domain("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(domain(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.early_stop.drop_threshold >= 0.0) {
            return Err(domain("early-stop drop threshold must be non-negative"));
        }
        Ok(())
    }

    fn phase2_epochs(&self) -> usize {
        self.transfer_epochs.unwrap_or(self.epochs)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledWindow>,
    pub val: Vec<LabeledWindow>,
    pub test: Vec<LabeledWindow>,
}

/// Seeded uniform shuffle, then a contiguous train/val/test cut. Val and test
/// sizes are floored; the remainder goes to train.
pub fn split_dataset(windows: &[LabeledWindow], cfg: &TrainConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let n = windows.len();
    if n < 20 {
        return Err(domain(format!("{n} windows; at least 20 are needed to split")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_val = (n as f64 * cfg.split.val + 1e-9).floor() as usize;
    let n_test = (n as f64 * cfg.split.test + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let pick = |idx: &[usize]| idx.iter().map(|&i| windows[i]).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Fraction in `[0, 1]` at threshold 0.5.
    pub val_accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned model.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

fn labels_of<T: Real>(batch: &[LabeledWindow]) -> Vec<T> {
    batch.iter().map(|w| if w.label == 1 { T::one() } else { T::zero() }).collect()
}

fn tensors_of(batch: &[LabeledWindow]) -> Vec<InputTensor> {
    batch.iter().map(|w| w.tensor).collect()
}

/// One shuffled pass of minibatch Adam; returns the mean train loss. With
/// `scales`, the forward pass fake-quantizes at those fixed scales.
pub(crate) fn run_epoch<T: Real>(
    model: &mut CnnModel<T>,
    data: &[LabeledWindow],
    batch_size: usize,
    lr: f64,
    adam: &mut AdamState<T>,
    rng: &mut ChaCha8Rng,
    scales: Option<&QuantScales>,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let lr = T::from_f64_lossy(lr);
    let mut total = 0.0;
    let mut batch = Vec::with_capacity(batch_size);
    for chunk in order.chunks(batch_size) {
        batch.clear();
        batch.extend(chunk.iter().map(|&i| data[i]));
        let x = Tensor::from_inputs(&tensors_of(&batch))?;
        let y: Vec<T> = labels_of(&batch);
        let pass = model.forward_with(&x, Mode::Train, rng, scales)?;
        let loss = pass.loss(&y)?.as_f64();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss}")));
        }
        let grads = model.backward(&pass, &y)?;
        adam_step(&mut model.params_mut(), &grads, adam, lr)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Infer-mode `(loss, accuracy)` at threshold 0.5.
pub fn validation_metrics<T: Real>(model: &CnnModel<T>, data: &[LabeledWindow]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(domain("empty validation set"));
    }
    let probs = model.predict(&tensors_of(data))?;
    let y: Vec<T> = labels_of(data);
    let (loss, _) = bce_loss(&probs, &y)?;
    let correct = probs
        .iter()
        .zip(data)
        .filter(|(p, w)| (p.as_f64() >= 0.5) == (w.label == 1))
        .count();
    Ok((loss.as_f64(), correct as f64 / data.len() as f64))
}

/// Called before each epoch's validation pass with the 1-based epoch number.
pub type ValHook<'a> = dyn FnMut(usize, &mut [LabeledWindow]) + 'a;

pub fn train_model<T: Real>(model: CnnModel<T>, split: &DatasetSplit, cfg: &TrainConfig) -> Result<(CnnModel<T>, TrainHistory)> {
    train_model_with(model, split, cfg, cfg.epochs, cfg.checkpoint_dir.as_deref(), None)
}

/// [`train_model`] with an explicit epoch budget, checkpoint directory and
/// an optional hook that may rewrite the validation set.
pub fn train_model_with<T: Real>(
    mut model: CnnModel<T>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    epochs: usize,
    checkpoint_dir: Option<&Path>,
    mut hook: Option<&mut ValHook<'_>>,
) -> Result<(CnnModel<T>, TrainHistory)> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(domain("training needs non-empty train and validation splits"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_params(&model.params());
    let mut val = split.val.clone();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, CnnModel<T>)> = None;
    let mut below = 0;
    let mut last_checkpoint: Option<PathBuf> = None;

    for epoch in 1..=epochs {
        let abort = |msg: String, last: &Option<PathBuf>| Error::Training {
            epoch,
            msg,
            last_checkpoint: last.clone(),
        };
        let train_loss = run_epoch(&mut model, &split.train, cfg.batch_size, cfg.learning_rate, &mut adam, &mut rng, None)
            .map_err(|e| match e {
                Error::Numeric(m) => abort(m, &last_checkpoint),
                other => other,
            })?;
        if let Some(h) = hook.as_deref_mut() {
            h(epoch, &mut val);
        }
        let (val_loss, val_accuracy) = validation_metrics(&model, &val)?;
        if !val_loss.is_finite() {
            return Err(abort(format!("validation loss became {val_loss}"), &last_checkpoint));
        }
        let checkpoint = match checkpoint_dir {
            Some(dir) => {
                let path = model_io::checkpoint_path(dir, epoch);
                model_io::save_float(&model.cast::<f32>(), &path)?;
                last_checkpoint = Some(path.clone());
                Some(path)
            }
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            checkpoint,
        });
        let best_acc = best.as_ref().map(|b| b.0);
        if best_acc.map_or(true, |b| val_accuracy > b) {
            best = Some((val_accuracy, model.clone()));
            history.best_epoch = Some(history.epochs.len() - 1);
            below = 0;
        } else if val_accuracy < best_acc.unwrap() - cfg.early_stop.drop_threshold / 100.0 {
            below += 1;
            if below >= cfg.early_stop.patience {
                history.stopped_early = true;
                break;
            }
        } else {
            below = 0;
        }
    }
    let model = best.map_or(model, |b| b.1);
    Ok((model, history))
}

/// Outcome of the DoS → fuzzing schedule. `model` is the single parameter
/// set behind both final reports.
#[derive(Clone, Debug)]
pub struct TransferOutcome<T> {
    pub model: CnnModel<T>,
    pub phase1_model: CnnModel<T>,
    pub dos_history: TrainHistory,
    pub fuzz_history: TrainHistory,
    /// Phase-1 model on the DoS test split.
    pub phase1_dos_report: EvalReport,
    pub dos_report: EvalReport,
    pub fuzz_report: EvalReport,
}

/// Trains from a fresh initialization on DoS, continues the same parameters
/// on fuzzing with the same learning rate, then evaluates the final model on
/// both test splits. Adam moments restart at the phase boundary.
pub fn transfer_train(arch: &ArchConfig, cfg: &TrainConfig, dos: &DatasetSplit, fuzz: &DatasetSplit) -> Result<TransferOutcome<f32>> {
    cfg.validate()?;
    let init = CnnModel::<f32>::new(arch.clone(), cfg.seed)?;
    let dir = |name: &str| cfg.checkpoint_dir.as_ref().map(|d| d.join(name));
    let (phase1, dos_history) = train_model_with(init, dos, cfg, cfg.epochs, dir("dos").as_deref(), None)?;
    let phase1_dos_report = evaluate_model(&phase1, &dos.test, AttackKind::Dos, 0.5)?;
    let (model, fuzz_history) = if cfg.phase2_epochs() == 0 {
        (phase1.clone(), TrainHistory::default())
    } else {
        let phase2_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(1),
            ..cfg.clone()
        };
        train_model_with(phase1.clone(), fuzz, &phase2_cfg, cfg.phase2_epochs(), dir("fuzzing").as_deref(), None)?
    };
    let dos_report = evaluate_model(&model, &dos.test, AttackKind::Dos, 0.5)?;
    let fuzz_report = evaluate_model(&model, &fuzz.test, AttackKind::Fuzzing, 0.5)?;
    Ok(TransferOutcome {
        model,
        phase1_model: phase1,
        dos_history,
        fuzz_history,
        phase1_dos_report,
        dos_report,
        fuzz_report,
    })
}
