//! JSON run configuration. Every section is optional; missing fields take
//! the defaults below. Sub-seeds derive from the top-level `seed`.

use std::path::Path;

use canids::bench::MIN_REPS;
use canids::nn::ArchConfig;
use canids::quant::FineTuneConfig;
use canids::trafgen::{BenignProfile, DosParams, EcuSpec, FuzzParams};
use canids::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub benign: BenignSection,
    pub dos: DosSection,
    pub fuzzing: FuzzSection,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub quant: QuantSection,
    pub bench: BenchSection,
    /// Scores at or above this value are attacks.
    pub threshold: f64,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            benign: BenignSection::default(),
            dos: DosSection::default(),
            fuzzing: FuzzSection::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            quant: QuantSection::default(),
            bench: BenchSection::default(),
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenignSection {
    pub duration: f64,
    /// `None` selects the built-in 26-ECU vehicle profile.
    pub ecus: Option<Vec<EcuSpec>>,
}

impl Default for BenignSection {
    fn default() -> Self {
        Self {
            duration: 30.0,
            ecus: None,
        }
    }
}

/// Attack bursts: explicit `[start, end]` windows, or when empty, `burst`
/// seconds of attack every `every` seconds starting at `first`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstSchedule {
    pub windows: Vec<(f64, f64)>,
    pub first: f64,
    pub burst: f64,
    pub every: f64,
}

impl Default for BurstSchedule {
    fn default() -> Self {
        Self {
            windows: Vec::new(),
            first: 2.0,
            burst: 3.0,
            every: 10.0,
        }
    }
}

impl BurstSchedule {
    pub fn resolve(&self, duration: f64) -> Vec<(f64, f64)> {
        if !self.windows.is_empty() {
            return self.windows.clone();
        }
        let mut out = Vec::new();
        let mut t = self.first;
        while t < duration {
            out.push((t, (t + self.burst).min(duration)));
            t += self.every;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DosSection {
    pub flood_id: u16,
    pub interval: f64,
    pub schedule: BurstSchedule,
}

impl Default for DosSection {
    fn default() -> Self {
        Self {
            flood_id: 0,
            interval: 0.0003,
            schedule: BurstSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuzzSection {
    pub interval_min: f64,
    pub interval_max: f64,
    pub schedule: BurstSchedule,
}

impl Default for FuzzSection {
    fn default() -> Self {
        Self {
            interval_min: 0.0003,
            interval_max: 0.001,
            schedule: BurstSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    /// Windows sampled from the calibration logs.
    pub calibration_windows: usize,
    pub fine_tune: FineTuneConfig,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            calibration_windows: 1024,
            fine_tune: FineTuneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub reps: usize,
    pub warmup: usize,
    pub bitrate: f64,
    pub dlc: u8,
    pub stuffed: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            reps: 1000,
            warmup: 100,
            bitrate: 1e6,
            dlc: 8,
            stuffed: true,
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => Self::default(),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let s = |e: canids::Error| e.to_string();
        self.benign_profile().validate().map_err(s)?;
        self.arch.validate().map_err(s)?;
        self.train.validate().map_err(s)?;
        if !(self.dos.interval > 0.0) {
            return Err("dos.interval must be positive".into());
        }
        if !(self.fuzzing.interval_min > 0.0 && self.fuzzing.interval_min <= self.fuzzing.interval_max) {
            return Err("fuzzing intervals must satisfy 0 < interval_min <= interval_max".into());
        }
        for (name, sched) in [("dos", &self.dos.schedule), ("fuzzing", &self.fuzzing.schedule)] {
            if sched.windows.is_empty() && !(sched.burst > 0.0 && sched.every > 0.0 && sched.first >= 0.0) {
                return Err(format!("{name}.schedule needs burst > 0, every > 0 and first >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.quant.calibration_windows == 0 {
            return Err("quant.calibration_windows must be at least 1".into());
        }
        if self.bench.reps < MIN_REPS || self.bench.warmup >= self.bench.reps {
            return Err(format!("bench needs reps >= {MIN_REPS} and warmup < reps"));
        }
        if !(self.bench.bitrate > 0.0) || self.bench.dlc > 8 {
            return Err("bench needs bitrate > 0 and dlc <= 8".into());
        }
        Ok(())
    }

    pub fn benign_profile(&self) -> BenignProfile {
        let mut p = BenignProfile::vehicle_like(self.benign.duration, self.seed);
        if let Some(ecus) = &self.benign.ecus {
            p.ecus = ecus.clone();
        }
        p
    }

    pub fn dos_params(&self, duration: f64) -> DosParams {
        DosParams {
            flood_id: self.dos.flood_id,
            interval: self.dos.interval,
            burst_windows: self.dos.schedule.resolve(duration),
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn fuzz_params(&self, duration: f64) -> FuzzParams {
        FuzzParams {
            interval_min: self.fuzzing.interval_min,
            interval_max: self.fuzzing.interval_max,
            burst_windows: self.fuzzing.schedule.resolve(duration),
            seed: self.seed.wrapping_add(2),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed.wrapping_add(self.seed),
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        CliConfig::default().validate().unwrap();
    }

    #[test]
    fn schedule_resolution() {
        let s = BurstSchedule::default();
        assert_eq!(s.resolve(25.0), vec![(2.0, 5.0), (12.0, 15.0), (22.0, 25.0)]);
        let s = BurstSchedule {
            windows: vec![(1.0, 2.0)],
            ..Default::default()
        };
        assert_eq!(s.resolve(100.0), vec![(1.0, 2.0)]);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<CliConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<CliConfig>(r#"{"train": {"epoch": 2}}"#).is_err());
        assert!(serde_json::from_str::<CliConfig>(r#"{"arch": {"dropout": 0.1}}"#).is_err());
        let c: CliConfig = serde_json::from_str(r#"{"train": {"early_stop": {"patience": 5}}}"#).unwrap();
        assert_eq!(c.train.early_stop.drop_threshold, 2.0);
        let c: CliConfig = serde_json::from_str(r#"{"seed": 4, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 64);
    }
}
