//! CAN 2.0A frame model, the labeled CSV log format and bit-time arithmetic.
//!
//! One frame per line:
//!
//! ```text
//! timestamp,id,dlc[,byte0..byte{dlc-1}],flag
//! 1478198376.389427,0316,8,05,21,68,09,21,21,00,6f,R
//! ```
//!
//! `timestamp` is decimal seconds, `id` and data bytes are hex (any case on
//! input, lowercase on output), and `flag` is `R` (normal), `T-dos` or
//! `T-fuzz`. A bare `T` is accepted only when the caller supplies the attack
//! kind through [`ParseOptions::plain_t_as`].

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Largest 11-bit arbitration ID.
pub const MAX_STANDARD_ID: u16 = 0x7FF;
/// Largest data length code for classic CAN.
pub const MAX_DLC: u8 = 8;

/// Ground-truth class of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    DosAttack,
    FuzzingAttack,
}

impl Label {
    pub fn is_attack(self) -> bool {
        !matches!(self, Label::Normal)
    }

    /// Flag column token written by [`write_log`].
    pub fn flag(self) -> &'static str {
        match self {
            Label::Normal => "R",
            Label::DosAttack => "T-dos",
            Label::FuzzingAttack => "T-fuzz",
        }
    }
}

/// Attack family, used for reports and for mapping bare `T` flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Dos,
    Fuzzing,
}

impl AttackKind {
    pub fn label(self) -> Label {
        match self {
            AttackKind::Dos => Label::DosAttack,
            AttackKind::Fuzzing => Label::FuzzingAttack,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Dos => "dos",
            AttackKind::Fuzzing => "fuzzing",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dos" => Ok(AttackKind::Dos),
            "fuzz" | "fuzzing" | "fuzzy" => Ok(AttackKind::Fuzzing),
            other => Err(domain(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// One timestamped standard-format CAN message.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanFrame {
    timestamp: f64,
    id: u16,
    dlc: u8,
    data: [u8; 8],
    label: Label,
}

impl CanFrame {
    pub fn new(timestamp: f64, id: u16, payload: &[u8], label: Label) -> Result<Self> {
        if !(timestamp.is_finite() && timestamp >= 0.0) {
            return Err(domain(format!("timestamp {timestamp} must be finite and >= 0")));
        }
        if id > MAX_STANDARD_ID {
            return Err(domain(format!("id {id:#x} exceeds 11 bits")));
        }
        if payload.len() > MAX_DLC as usize {
            return Err(domain(format!("payload of {} bytes exceeds 8", payload.len())));
        }
        let mut data = [0u8; 8];
        data[..payload.len()].copy_from_slice(payload);
        Ok(Self {
            timestamp,
            id,
            dlc: payload.len() as u8,
            data,
            label,
        })
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn dlc(&self) -> u8 {
        self.dlc
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..self.dlc as usize]
    }

    pub fn label(&self) -> Label {
        self.label
    }
}

/// Frames in non-decreasing timestamp order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameLog {
    frames: Vec<CanFrame>,
    source: String,
}

impl FrameLog {
    pub fn new(frames: Vec<CanFrame>, source: impl Into<String>) -> Result<Self> {
        if let Some(i) = first_out_of_order(&frames) {
            return Err(Error::Validation {
                line: i as u64 + 1,
                msg: format!(
                    "timestamp {} precedes previous frame's {}",
                    frames[i].timestamp,
                    frames[i - 1].timestamp
                ),
            });
        }
        Ok(Self {
            frames,
            source: source.into(),
        })
    }

    /// Builds a log from frames in any order; ties keep their input order.
    pub fn from_unsorted(mut frames: Vec<CanFrame>, source: impl Into<String>) -> Self {
        frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Self {
            frames,
            source: source.into(),
        }
    }

    pub fn frames(&self) -> &[CanFrame] {
        &self.frames
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn into_frames(self) -> Vec<CanFrame> {
        self.frames
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.frames.iter().filter(|f| f.label == label).count()
    }
}

fn first_out_of_order(frames: &[CanFrame]) -> Option<usize> {
    frames
        .windows(2)
        .position(|w| w[1].timestamp < w[0].timestamp)
        .map(|i| i + 1)
}

/// Options for [`parse_log`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    /// Attack kind assigned to rows flagged with a bare `T`.
    pub plain_t_as: Option<AttackKind>,
    /// Accept rows without a flag column (labelled [`Label::Normal`]).
    pub allow_missing_flag: bool,
}

fn parse_flag(token: &str, opts: &ParseOptions) -> std::result::Result<Label, String> {
    match token.trim() {
        "R" | "r" => Ok(Label::Normal),
        "T-dos" => Ok(Label::DosAttack),
        "T-fuzz" => Ok(Label::FuzzingAttack),
        "T" | "t" => opts
            .plain_t_as
            .map(AttackKind::label)
            .ok_or_else(|| "bare 'T' flag needs an attack-kind hint".to_string()),
        other => Err(format!("unknown flag {other:?}")),
    }
}

fn parse_record(rec: &csv::StringRecord, opts: &ParseOptions) -> std::result::Result<CanFrame, String> {
    if rec.len() < 3 {
        return Err(format!("expected at least 3 columns, found {}", rec.len()));
    }
    let timestamp: f64 = rec[0]
        .trim()
        .parse()
        .map_err(|_| format!("bad timestamp {:?}", &rec[0]))?;
    let id = u16::from_str_radix(rec[1].trim(), 16).map_err(|_| format!("non-hex id {:?}", &rec[1]))?;
    if id > MAX_STANDARD_ID {
        return Err(format!("id {id:#x} is not an 11-bit identifier"));
    }
    let dlc: usize = rec[2].trim().parse().map_err(|_| format!("bad dlc {:?}", &rec[2]))?;
    if dlc > MAX_DLC as usize {
        return Err(format!("dlc {dlc} out of range 0..=8"));
    }
    let with_flag = 3 + dlc + 1;
    let label = if rec.len() == with_flag {
        parse_flag(&rec[with_flag - 1], opts)?
    } else if opts.allow_missing_flag && rec.len() == with_flag - 1 {
        Label::Normal
    } else {
        return Err(format!(
            "dlc {dlc} requires {with_flag} columns, found {}",
            rec.len()
        ));
    };
    let mut payload = [0u8; 8];
    for (i, slot) in payload.iter_mut().take(dlc).enumerate() {
        let tok = rec[3 + i].trim();
        *slot = u8::from_str_radix(tok, 16).map_err(|_| format!("non-hex data byte {tok:?}"))?;
    }
    CanFrame::new(timestamp, id, &payload[..dlc], label).map_err(|e| e.to_string())
}

/// Parses a CSV log, validating every row and the timestamp order.
pub fn parse_log<R: Read>(reader: R, opts: &ParseOptions) -> Result<FrameLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut frames = Vec::new();
    let mut lines = Vec::new();
    let mut rec = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut rec).map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = rec.position().map_or(0, |p| p.line());
        let frame = parse_record(&rec, opts).map_err(|msg| Error::Parse { line, msg })?;
        frames.push(frame);
        lines.push(line);
    }
    if let Some(i) = first_out_of_order(&frames) {
        return Err(Error::Validation {
            line: lines[i],
            msg: format!(
                "timestamp {} precedes previous frame's {}",
                frames[i].timestamp,
                frames[i - 1].timestamp
            ),
        });
    }
    Ok(FrameLog {
        frames,
        source: String::new(),
    })
}

/// Writes one line per frame in the format [`parse_log`] reads.
pub fn write_log<W: Write>(log: &FrameLog, mut out: W) -> std::io::Result<()> {
    let mut line = String::with_capacity(64);
    for f in &log.frames {
        line.clear();
        use fmt::Write as _;
        let _ = write!(line, "{:.6},{:04x},{}", f.timestamp, f.id, f.dlc);
        for b in f.payload() {
            let _ = write!(line, ",{b:02x}");
        }
        line.push(',');
        line.push_str(f.label.flag());
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()
}

/// Bits on the wire for a CAN 2.0A data frame, optionally with worst-case
/// stuffing.
///
/// Unstuffed: SOF 1 + ID 11 + RTR 1 + IDE 1 + r0 1 + DLC 4 + data + CRC 15 +
/// CRC delimiter 1 + ACK 2 + EOF 7 + IFS 3 = 47 + 8 * dlc. Stuffing applies to
/// the 34 + 8 * dlc bits from SOF through CRC and adds at most one bit per four
/// after the first.
pub fn frame_bit_length(dlc: u8, stuffed: bool) -> Result<u32> {
    if dlc > MAX_DLC {
        return Err(domain(format!("dlc {dlc} out of range 0..=8")));
    }
    let data_bits = 8 * dlc as u32;
    let nominal = 47 + data_bits;
    Ok(if stuffed {
        nominal + (34 + data_bits - 1) / 4
    } else {
        nominal
    })
}
