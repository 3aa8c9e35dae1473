//! Sliding four-ID windows and the `(2, 2, 11)` bit tensors fed to the model.
//!
//! Rows `r0..r3` are the MSB-first bit expansions of the window's IDs, oldest
//! first. Channel 0 holds rows `(r0, r1)` and channel 1 holds `(r2, r3)`, so
//! element `(c, h, k)` is bit `k` of row `2c + h` and a flat `(c, h, k)` walk
//! reproduces the `{4, 11}` row stack.

use std::io::Write;

use crate::canbus::{FrameLog, MAX_STANDARD_ID};
use crate::error::{domain, Result};
use crate::scalar::Real;

pub const WINDOW: usize = 4;
pub const ID_BITS: usize = 11;
pub const CHANNELS: usize = 2;
pub const HEIGHT: usize = 2;
/// Elements per input tensor.
pub const TENSOR_LEN: usize = WINDOW * ID_BITS;

/// MSB-first 11-bit expansion of a CAN ID.
pub fn id_to_bits(id: u16) -> Result<[u8; ID_BITS]> {
    if id > MAX_STANDARD_ID {
        return Err(domain(format!("id {id:#x} exceeds 11 bits")));
    }
    let mut bits = [0u8; ID_BITS];
    for (k, b) in bits.iter_mut().enumerate() {
        *b = ((id >> (ID_BITS - 1 - k)) & 1) as u8;
    }
    Ok(bits)
}

/// Ring buffer of the four most recent IDs.
#[derive(Clone, Debug, Default)]
pub struct IdWindow {
    ids: [u16; WINDOW],
    len: usize,
    head: usize,
}

impl IdWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: u16) -> Result<()> {
        if id > MAX_STANDARD_ID {
            return Err(domain(format!("id {id:#x} exceeds 11 bits")));
        }
        self.ids[self.head] = id;
        self.head = (self.head + 1) % WINDOW;
        self.len = (self.len + 1).min(WINDOW);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.len == WINDOW
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// IDs oldest to newest.
    pub fn ids(&self) -> impl Iterator<Item = u16> + '_ {
        let start = (self.head + WINDOW - self.len) % WINDOW;
        (0..self.len).map(move |i| self.ids[(start + i) % WINDOW])
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

/// A `(2, 2, 11)` binary tensor, stored flat in `(c, h, k)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InputTensor {
    bits: [u8; TENSOR_LEN],
}

impl InputTensor {
    pub const SHAPE: [usize; 3] = [CHANNELS, HEIGHT, ID_BITS];

    /// Builds a tensor from four IDs, oldest first.
    pub fn from_ids(ids: [u16; WINDOW]) -> Result<Self> {
        let mut bits = [0u8; TENSOR_LEN];
        for (r, id) in ids.into_iter().enumerate() {
            bits[r * ID_BITS..(r + 1) * ID_BITS].copy_from_slice(&id_to_bits(id)?);
        }
        Ok(Self { bits })
    }

    pub fn get(&self, c: usize, h: usize, k: usize) -> u8 {
        self.bits[(c * HEIGHT + h) * ID_BITS + k]
    }

    pub fn bits(&self) -> &[u8; TENSOR_LEN] {
        &self.bits
    }

    /// The `{4, 11}` row stack this tensor was built from.
    pub fn rows(&self) -> [[u8; ID_BITS]; WINDOW] {
        let mut rows = [[0u8; ID_BITS]; WINDOW];
        for (r, row) in rows.iter_mut().enumerate() {
            row.copy_from_slice(&self.bits[r * ID_BITS..(r + 1) * ID_BITS]);
        }
        rows
    }

    pub fn write_real<T: Real>(&self, out: &mut [T]) {
        for (o, &b) in out.iter_mut().zip(self.bits.iter()) {
            *o = if b == 1 { T::one() } else { T::zero() };
        }
    }
}

/// Tensor of a full window, or `None` while the window is still warming up.
pub fn window_to_tensor(w: &IdWindow) -> Option<InputTensor> {
    if !w.is_full() {
        return None;
    }
    let mut ids = [0u16; WINDOW];
    for (slot, id) in ids.iter_mut().zip(w.ids()) {
        *slot = id;
    }
    InputTensor::from_ids(ids).ok()
}

/// A window tensor attributed to its newest frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledWindow {
    pub tensor: InputTensor,
    /// 1 when the newest frame is an attack frame.
    pub label: u8,
    pub newest_timestamp: f64,
    pub newest_id: u16,
}

/// One window per frame from the fourth onward, stride 1.
pub fn stream_windows(log: &FrameLog) -> Vec<LabeledWindow> {
    let mut window = IdWindow::new();
    let mut out = Vec::with_capacity(log.len().saturating_sub(WINDOW - 1));
    for f in log.frames() {
        window.push(f.id()).expect("CanFrame ids are 11-bit");
        if let Some(tensor) = window_to_tensor(&window) {
            out.push(LabeledWindow {
                tensor,
                label: f.label().is_attack() as u8,
                newest_timestamp: f.timestamp(),
                newest_id: f.id(),
            });
        }
    }
    out
}

/// Debug dump: 44 comma-separated bits and the label per line.
pub fn write_tensor_dump<W: Write>(windows: &[LabeledWindow], mut out: W) -> std::io::Result<()> {
    for w in windows {
        let mut line = String::with_capacity(2 * TENSOR_LEN + 4);
        for b in w.tensor.bits() {
            line.push(if *b == 1 { '1' } else { '0' });
            line.push(',');
        }
        line.push(if w.label == 1 { '1' } else { '0' });
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()
}
