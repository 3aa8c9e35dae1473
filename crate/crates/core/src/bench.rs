//! Per-frame latency of the full detection path and CAN line-rate budget.
//!
//! One timed iteration covers pushing a frame's ID into the window,
//! building the input tensor, the forward pass and the threshold test.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::canbus::frame_bit_length;
use crate::error::{domain, Result};
use crate::features::{window_to_tensor, IdWindow, TENSOR_LEN};
use crate::nn::{CnnModel, Workspace};
use crate::quant::{QuantEngine, QuantModel};
use crate::scalar::Real;

/// Minimum number of timed samples per run.
pub const MIN_REPS: usize = 30;

/// Source of monotonic timestamps.
pub trait Clock {
    fn now(&mut self) -> Duration;
}

/// Wall clock backed by [`Instant`].
#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&mut self) -> Duration {
        self.origin.elapsed()
    }
}

/// Deterministic clock for tests: each call advances by the next step of a
/// cyclic script.
#[derive(Clone, Debug)]
pub struct ScriptedClock {
    steps: Vec<Duration>,
    next: usize,
    t: Duration,
}

impl ScriptedClock {
    pub fn new(steps: Vec<Duration>) -> Self {
        assert!(!steps.is_empty(), "scripted clock needs at least one step");
        Self {
            steps,
            next: 0,
            t: Duration::ZERO,
        }
    }
}

impl Clock for ScriptedClock {
    fn now(&mut self) -> Duration {
        self.t += self.steps[self.next % self.steps.len()];
        self.next += 1;
        self.t
    }
}

/// Timing summary in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    /// Mean of the two middle samples for even counts.
    pub median: f64,
    /// Nearest rank: the `ceil(0.99 n)`-th smallest sample.
    pub p99: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(domain("latency samples must be non-empty, finite and non-negative"));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
        Ok(Self {
            count: n,
            mean: s.iter().sum::<f64>() / n as f64,
            median,
            p99: s[rank - 1],
            max: s[n - 1],
        })
    }
}

/// Per-frame detector: window, tensorize, score.
pub trait FrameEngine {
    fn kind(&self) -> &'static str;

    /// Score of the window ending at `id`, or `None` during warm-up.
    fn push_frame(&mut self, id: u16) -> Result<Option<f64>>;

    /// Buffer growth count of the underlying inference workspace.
    fn growth_events(&self) -> usize;

    fn reset(&mut self);
}

pub struct FloatFrameEngine<'m, T> {
    model: &'m CnnModel<T>,
    window: IdWindow,
    input: Vec<T>,
    ws: Workspace<T>,
}

impl<'m, T: Real> FloatFrameEngine<'m, T> {
    pub fn new(model: &'m CnnModel<T>) -> Self {
        Self {
            model,
            window: IdWindow::new(),
            input: vec![T::zero(); TENSOR_LEN],
            ws: Workspace::new(),
        }
    }
}

impl<T: Real> FrameEngine for FloatFrameEngine<'_, T> {
    fn kind(&self) -> &'static str {
        "float"
    }

    fn push_frame(&mut self, id: u16) -> Result<Option<f64>> {
        self.window.push(id)?;
        let Some(t) = window_to_tensor(&self.window) else {
            return Ok(None);
        };
        t.write_real(&mut self.input);
        let p = self.model.infer_with(&self.input, 1, &mut self.ws, None)?;
        Ok(Some(p[0].as_f64()))
    }

    fn growth_events(&self) -> usize {
        self.ws.growth_events()
    }

    fn reset(&mut self) {
        self.window.clear();
    }
}

pub struct QuantFrameEngine<'m> {
    model: &'m QuantModel,
    window: IdWindow,
    engine: QuantEngine,
}

impl<'m> QuantFrameEngine<'m> {
    pub fn new(model: &'m QuantModel) -> Self {
        Self {
            model,
            window: IdWindow::new(),
            engine: QuantEngine::new(),
        }
    }
}

impl FrameEngine for QuantFrameEngine<'_> {
    fn kind(&self) -> &'static str {
        "quant"
    }

    fn push_frame(&mut self, id: u16) -> Result<Option<f64>> {
        self.window.push(id)?;
        Ok(window_to_tensor(&self.window).map(|t| self.engine.forward(self.model, &t)))
    }

    fn growth_events(&self) -> usize {
        self.engine.growth_events()
    }

    fn reset(&mut self) {
        self.window.clear();
    }
}

/// Runs `reps` iterations over the cycled `ids` and summarizes the last
/// `reps - warmup`. The window is primed with three untimed frames first so
/// every timed iteration produces a verdict.
pub fn measure_latency<E: FrameEngine + ?Sized, C: Clock + ?Sized>(
    engine: &mut E,
    ids: &[u16],
    reps: usize,
    warmup: usize,
    threshold: f64,
    clock: &mut C,
) -> Result<LatencyStats> {
    if reps < MIN_REPS || warmup >= reps {
        return Err(domain(format!("need reps >= {MIN_REPS} and warmup < reps (got {reps}, {warmup})")));
    }
    if ids.is_empty() {
        return Err(domain("no frame ids to replay"));
    }
    engine.reset();
    let mut feed = ids.iter().copied().cycle();
    for _ in 0..3 {
        engine.push_frame(feed.next().unwrap())?;
    }
    let mut samples = Vec::with_capacity(reps - warmup);
    let mut flagged = 0usize;
    for i in 0..reps {
        let id = feed.next().unwrap();
        let t0 = clock.now();
        let score = engine.push_frame(id)?;
        let attack = score.is_some_and(|s| s >= threshold);
        let t1 = clock.now();
        flagged += attack as usize;
        if i >= warmup {
            samples.push((t1 - t0).as_secs_f64());
        }
    }
    std::hint::black_box(flagged);
    LatencyStats::from_samples(&samples)
}

/// Frames per detection window used to express the budget at window scale.
pub const BUDGET_WINDOW_FRAMES: u32 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineRateBudget {
    pub bitrate: f64,
    pub dlc: u8,
    pub stuffed: bool,
    /// Seconds one frame occupies the bus.
    pub frame_time: f64,
    /// `frame_time` of `BUDGET_WINDOW_FRAMES` back-to-back frames.
    pub window_time: f64,
    /// `frame_time / mean latency`.
    pub headroom: f64,
    pub below_line_rate: bool,
}

pub fn line_rate_budget(latency: &LatencyStats, bitrate: f64, dlc: u8, stuffed: bool) -> Result<LineRateBudget> {
    if !(bitrate > 0.0) || !bitrate.is_finite() {
        return Err(domain(format!("bitrate {bitrate} must be positive")));
    }
    if !(latency.mean > 0.0) {
        return Err(domain("mean latency must be positive"));
    }
    let frame_time = frame_bit_length(dlc, stuffed)? as f64 / bitrate;
    let headroom = frame_time / latency.mean;
    Ok(LineRateBudget {
        bitrate,
        dlc,
        stuffed,
        frame_time,
        window_time: frame_time * BUDGET_WINDOW_FRAMES as f64,
        headroom,
        below_line_rate: headroom < 1.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

impl HostInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub engine: String,
    pub reps: usize,
    pub warmup: usize,
    pub stats: LatencyStats,
    pub budget: LineRateBudget,
    pub host: HostInfo,
}
