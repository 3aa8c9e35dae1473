//! Deterministic benign traffic and DoS / fuzzing injection.
//!
//! All randomness comes from [`rand_chacha::ChaCha8Rng`] seeded with the
//! 64-bit seed of the profile or parameter block, so a given configuration
//! always produces the same log. Timestamps are rounded to whole microseconds
//! so generated logs survive a CSV round trip unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canbus::{CanFrame, FrameLog, Label, MAX_STANDARD_ID};
use crate::error::{domain, Result};

/// How an ECU fills its payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadMode {
    /// Same bytes every period.
    Constant,
    /// Constant bytes with byte 0 incrementing per message.
    Counter,
    /// Fresh random bytes per message.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcuSpec {
    pub id: u16,
    /// Transmission period in seconds.
    pub period: f64,
    /// Jitter as a fraction of the period, in `[0, 0.5)`.
    #[serde(default)]
    pub jitter_fraction: f64,
    pub payload_mode: PayloadMode,
    #[serde(default = "default_dlc")]
    pub dlc: u8,
    /// Start offset of the first message, in seconds.
    #[serde(default)]
    pub offset: f64,
}

fn default_dlc() -> u8 {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenignProfile {
    pub ecus: Vec<EcuSpec>,
    pub duration: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DosParams {
    #[serde(default)]
    pub flood_id: u16,
    pub interval: f64,
    pub burst_windows: Vec<(f64, f64)>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzParams {
    pub interval_min: f64,
    pub interval_max: f64,
    pub burst_windows: Vec<(f64, f64)>,
    pub seed: u64,
}

/// Rounds to the microsecond grid used by the log format.
fn to_micros(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

fn check_windows(windows: &[(f64, f64)]) -> Result<()> {
    for &(start, end) in windows {
        if !(start.is_finite() && end.is_finite() && start >= 0.0 && start < end) {
            return Err(domain(format!("invalid burst window ({start}, {end})")));
        }
    }
    Ok(())
}

impl BenignProfile {
    pub fn validate(&self) -> Result<()> {
        if self.ecus.is_empty() {
            return Err(domain("benign profile has no ECUs"));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(domain(format!("duration {} must be positive", self.duration)));
        }
        let mut seen = std::collections::HashSet::new();
        for ecu in &self.ecus {
            if ecu.id > MAX_STANDARD_ID {
                return Err(domain(format!("ECU id {:#x} exceeds 11 bits", ecu.id)));
            }
            if !seen.insert(ecu.id) {
                return Err(domain(format!("duplicate ECU id {:#05x}", ecu.id)));
            }
            if !(ecu.period.is_finite() && ecu.period > 0.0) {
                return Err(domain(format!("ECU {:#05x}: period must be positive", ecu.id)));
            }
            if !(0.0..0.5).contains(&ecu.jitter_fraction) {
                return Err(domain(format!("ECU {:#05x}: jitter must lie in [0, 0.5)", ecu.id)));
            }
            if ecu.dlc > 8 {
                return Err(domain(format!("ECU {:#05x}: dlc {} > 8", ecu.id, ecu.dlc)));
            }
            if !(ecu.offset.is_finite() && ecu.offset >= 0.0) {
                return Err(domain(format!("ECU {:#05x}: offset must be >= 0", ecu.id)));
            }
        }
        Ok(())
    }

    /// A vehicle-like default: 26 periodic ECUs, about 1765 frames/s.
    pub fn vehicle_like(duration: f64, seed: u64) -> Self {
        const TABLE: [(u16, f64, PayloadMode); 26] = [
            (0x018f, 0.010, PayloadMode::Counter),
            (0x0260, 0.010, PayloadMode::Random),
            (0x02a0, 0.010, PayloadMode::Constant),
            (0x0329, 0.010, PayloadMode::Counter),
            (0x0316, 0.010, PayloadMode::Random),
            (0x043f, 0.010, PayloadMode::Constant),
            (0x0440, 0.010, PayloadMode::Counter),
            (0x0370, 0.010, PayloadMode::Constant),
            (0x0545, 0.010, PayloadMode::Random),
            (0x0080, 0.010, PayloadMode::Counter),
            (0x0081, 0.010, PayloadMode::Constant),
            (0x0165, 0.010, PayloadMode::Random),
            (0x0153, 0.010, PayloadMode::Counter),
            (0x0220, 0.010, PayloadMode::Constant),
            (0x02c0, 0.020, PayloadMode::Counter),
            (0x0350, 0.020, PayloadMode::Random),
            (0x04b0, 0.020, PayloadMode::Constant),
            (0x04b1, 0.020, PayloadMode::Counter),
            (0x04f0, 0.020, PayloadMode::Constant),
            (0x0130, 0.020, PayloadMode::Random),
            (0x0140, 0.050, PayloadMode::Counter),
            (0x05f0, 0.100, PayloadMode::Constant),
            (0x0690, 0.100, PayloadMode::Counter),
            (0x05a0, 0.100, PayloadMode::Constant),
            (0x05a2, 0.100, PayloadMode::Random),
            (0x0517, 0.200, PayloadMode::Constant),
        ];
        let ecus = TABLE
            .iter()
            .enumerate()
            .map(|(i, &(id, period, payload_mode))| EcuSpec {
                id,
                period,
                jitter_fraction: 0.05,
                payload_mode,
                dlc: 8,
                // spread start phases across the first period
                offset: period * ((i * 7) % 13) as f64 / 13.0,
            })
            .collect();
        Self {
            ecus,
            duration,
            seed,
        }
    }
}

/// Generates periodic benign traffic: message `k` of an ECU goes out at
/// `offset + (k + u_k * jitter_fraction) * period` with `u_k` uniform in
/// `[-1, 1]`, clamped at zero.
pub fn gen_benign(profile: &BenignProfile) -> Result<FrameLog> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut frames = Vec::new();
    for ecu in &profile.ecus {
        let span = profile.duration - ecu.offset;
        if span <= 0.0 {
            continue;
        }
        let count = (span / ecu.period - 1e-9).ceil().max(0.0) as u64;
        let mut base = [0u8; 8];
        rng.fill(&mut base[..]);
        for k in 0..count {
            let u: f64 = if ecu.jitter_fraction > 0.0 {
                rng.gen_range(-1.0..=1.0)
            } else {
                0.0
            };
            let t = to_micros((ecu.offset + (k as f64 + u * ecu.jitter_fraction) * ecu.period).max(0.0));
            let mut payload = base;
            match ecu.payload_mode {
                PayloadMode::Constant => {}
                PayloadMode::Counter => payload[0] = base[0].wrapping_add(k as u8),
                PayloadMode::Random => rng.fill(&mut payload[..]),
            }
            frames.push(CanFrame::new(t, ecu.id, &payload[..ecu.dlc as usize], Label::Normal)?);
        }
    }
    Ok(FrameLog::from_unsorted(frames, format!("benign(seed={})", profile.seed)))
}

fn merge(log: &FrameLog, injected: Vec<CanFrame>, tag: &str) -> FrameLog {
    let mut frames = Vec::with_capacity(log.len() + injected.len());
    frames.extend_from_slice(log.frames());
    frames.extend(injected);
    let source = if log.source().is_empty() {
        tag.to_string()
    } else {
        format!("{}+{tag}", log.source())
    };
    FrameLog::from_unsorted(frames, source)
}

/// Floods each burst window with highest-priority frames every `interval`.
pub fn inject_dos(log: &FrameLog, params: &DosParams) -> Result<FrameLog> {
    if !(params.interval.is_finite() && params.interval > 0.0) {
        return Err(domain(format!("DoS interval {} must be positive", params.interval)));
    }
    if params.flood_id > MAX_STANDARD_ID {
        return Err(domain(format!("flood id {:#x} exceeds 11 bits", params.flood_id)));
    }
    check_windows(&params.burst_windows)?;
    if let Some(f) = log
        .frames()
        .iter()
        .find(|f| f.label() == Label::Normal && f.id() <= params.flood_id)
    {
        return Err(domain(format!(
            "flood id {:#05x} does not outrank benign id {:#05x}",
            params.flood_id,
            f.id()
        )));
    }
    let mut injected = Vec::new();
    for &(start, end) in &params.burst_windows {
        let count = ((end - start) / params.interval + 1e-9).floor() as u64;
        for j in 0..count {
            let t = to_micros(start + j as f64 * params.interval);
            injected.push(CanFrame::new(t, params.flood_id, &[0u8; 8], Label::DosAttack)?);
        }
    }
    Ok(merge(log, injected, "dos"))
}

/// Injects random-ID, random-payload frames at random gaps inside each window.
pub fn inject_fuzzing(log: &FrameLog, params: &FuzzParams) -> Result<FrameLog> {
    let (lo, hi) = (params.interval_min, params.interval_max);
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
        return Err(domain(format!("fuzz intervals [{lo}, {hi}] must satisfy 0 < min <= max")));
    }
    check_windows(&params.burst_windows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut injected = Vec::new();
    for &(start, end) in &params.burst_windows {
        let mut t = start;
        while t < end - 1e-9 {
            let id = rng.gen_range(0..=MAX_STANDARD_ID);
            let mut payload = [0u8; 8];
            rng.fill(&mut payload[..]);
            injected.push(CanFrame::new(to_micros(t), id, &payload, Label::FuzzingAttack)?);
            t += if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        }
    }
    Ok(merge(log, injected, "fuzz"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canbus::write_log;

    fn single(period: f64, jitter: f64, duration: f64) -> BenignProfile {
        BenignProfile {
            ecus: vec![EcuSpec {
                id: 0x100,
                period,
                jitter_fraction: jitter,
                payload_mode: PayloadMode::Constant,
                dlc: 8,
                offset: 0.0,
            }],
            duration,
            seed: 1,
        }
    }

    fn bytes(log: &FrameLog) -> Vec<u8> {
        let mut out = Vec::new();
        write_log(log, &mut out).unwrap();
        out
    }

    #[test]
    fn jitter_free_single_ecu() {
        let log = gen_benign(&single(0.01, 0.0, 0.05)).unwrap();
        let ts: Vec<f64> = log.frames().iter().map(|f| f.timestamp()).collect();
        assert_eq!(ts, vec![0.0, 0.01, 0.02, 0.03, 0.04]);
        assert!(log.frames().iter().all(|f| f.label() == Label::Normal));
    }

    #[test]
    fn two_ecus_merge_sorted_with_period_counts() {
        let mut p = single(0.01, 0.2, 1.0);
        p.ecus.push(EcuSpec {
            id: 0x200,
            period: 0.025,
            jitter_fraction: 0.1,
            payload_mode: PayloadMode::Random,
            dlc: 4,
            offset: 0.0,
        });
        let log = gen_benign(&p).unwrap();
        assert!(log.frames().windows(2).all(|w| w[0].timestamp() <= w[1].timestamp()));
        assert_eq!(log.frames().iter().filter(|f| f.id() == 0x100).count(), 100);
        assert_eq!(log.frames().iter().filter(|f| f.id() == 0x200).count(), 40);
    }

    #[test]
    fn benign_is_deterministic() {
        let p = BenignProfile::vehicle_like(2.0, 42);
        assert_eq!(bytes(&gen_benign(&p).unwrap()), bytes(&gen_benign(&p).unwrap()));
        let mut q = p.clone();
        q.seed = 43;
        assert_ne!(bytes(&gen_benign(&p).unwrap()), bytes(&gen_benign(&q).unwrap()));
    }

    #[test]
    fn empty_profile_rejected() {
        let p = BenignProfile {
            ecus: vec![],
            duration: 1.0,
            seed: 0,
        };
        assert!(gen_benign(&p).is_err());
    }

    #[test]
    fn dos_counts_and_preserves_benign() {
        let base = gen_benign(&BenignProfile::vehicle_like(1.5, 3)).unwrap();
        let same = inject_dos(
            &base,
            &DosParams {
                flood_id: 0,
                interval: 0.0005,
                burst_windows: vec![],
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(same.frames(), base.frames());

        let out = inject_dos(
            &base,
            &DosParams {
                flood_id: 0,
                interval: 0.0005,
                burst_windows: vec![(0.0, 1.0)],
                seed: 0,
            },
        )
        .unwrap();
        let attacks: Vec<_> = out.frames().iter().filter(|f| f.label() == Label::DosAttack).collect();
        assert_eq!(attacks.len(), 2000);
        assert!(attacks.iter().all(|f| f.id() == 0 && f.payload() == [0; 8]));
        assert_eq!(out.len(), base.len() + 2000);
        let normal: Vec<_> = out.frames().iter().filter(|f| f.label() == Label::Normal).copied().collect();
        assert_eq!(normal, base.frames());
    }

    #[test]
    fn dos_must_outrank_benign() {
        let base = gen_benign(&single(0.01, 0.0, 0.1)).unwrap();
        let params = DosParams {
            flood_id: 0x100,
            interval: 0.001,
            burst_windows: vec![(0.0, 0.05)],
            seed: 0,
        };
        assert!(inject_dos(&base, &params).is_err());
    }

    #[test]
    fn fuzz_degenerate_interval_count() {
        let base = gen_benign(&single(0.01, 0.0, 1.0)).unwrap();
        let params = FuzzParams {
            interval_min: 0.001,
            interval_max: 0.001,
            burst_windows: vec![(0.0, 1.0)],
            seed: 9,
        };
        let a = inject_fuzzing(&base, &params).unwrap();
        assert_eq!(a.count_label(Label::FuzzingAttack), 1000);
        assert_eq!(a.len(), base.len() + 1000);
        assert_eq!(bytes(&a), bytes(&inject_fuzzing(&base, &params).unwrap()));
        let none = FuzzParams {
            burst_windows: vec![],
            ..params.clone()
        };
        assert_eq!(inject_fuzzing(&base, &none).unwrap().frames(), base.frames());
    }

    #[test]
    fn fuzz_rejects_nonpositive_interval() {
        let params = FuzzParams {
            interval_min: 0.0,
            interval_max: 0.001,
            burst_windows: vec![(0.0, 1.0)],
            seed: 0,
        };
        assert!(inject_fuzzing(&FrameLog::default(), &params).is_err());
    }

    #[test]
    fn fuzz_ids_cover_id_space() {
        let params = FuzzParams {
            interval_min: 0.00001,
            interval_max: 0.00001,
            burst_windows: vec![(0.0, 1.0)],
            seed: 5,
        };
        let out = inject_fuzzing(&FrameLog::default(), &params).unwrap();
        assert_eq!(out.len(), 100_000);
        let mut counts = vec![0u32; 2048];
        for f in out.frames() {
            counts[f.id() as usize] += 1;
        }
        let covered = counts.iter().filter(|&&c| c > 0).count();
        assert!(covered as f64 >= 0.95 * 2048.0, "covered {covered}");
        // chi-square against uniform, 2047 dof: mean 2047, sd ~64
        let expected = 100_000.0 / 2048.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 2047.0 + 5.0 * 64.0, "chi2 {chi2}");
    }
}
