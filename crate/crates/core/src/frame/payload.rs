//! Opcode-specific data layouts. All integers are big-endian.
//!
//! | opcode | body |
//! |--------|------|
//! | 0x01 check request | `battery_mv: u16` |
//! | 0x02 instruction response | sections: `opcode: u8, len: u8, body[len]`, repeated |
//! | 0x03 config check request | empty |
//! | 0x04 config update | `mode: u8, interval_s: u32, is_anchor: u8 [, lat_e7: i32, lon_e7: i32]` |
//! | 0x05 ranging batch | `n: u8`, then n x `mode: u8, partner: u16, countdown_ms: u32, ranging_id: u32` |
//! | 0x06 passive batch | `n: u8`, then n x `master: u16, slave: u16, countdown_ms: u32, ranging_id: u32` |
//! | 0x07 ranging result | `ranging_id: u32, slave: u16, distance_dmm: i32, raw_distance_dmm: i32, rssi_ddbm: i16, repeats: u8` |
//! | 0x08 passive result | `ranging_id: u32, master: u16, slave: u16, delta_t_ps: i32` |
//!
//! Distances travel in units of 0.1 mm, RSSI in 0.1 dB, time differences in
//! picoseconds and countdowns in milliseconds.

use super::{MacFrame, Opcode, MAX_DATA_LEN};
use crate::types::{GeoPoint, NodeId, OperatingMode, RangingRole};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PayloadError {
    #[error("{what}: truncated at byte {at}")]
    Truncated { what: &'static str, at: usize },
    #[error("{what}: {extra} unexpected trailing bytes")]
    TrailingBytes { what: &'static str, extra: usize },
    #[error("{what}: invalid value {value}")]
    BadValue { what: &'static str, value: i64 },
    #[error("expected opcode {expected:#04x}, found {found:#04x}")]
    WrongOpcode { expected: u8, found: u8 },
    #[error("encoded body is {len} bytes, does not fit in {limit}")]
    TooLong { len: usize, limit: usize },
}

struct Reader<'a> {
    what: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(what: &'static str, buf: &'a [u8]) -> Self {
        Self { what, buf, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], PayloadError> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or(PayloadError::Truncated {
            what: self.what,
            at: self.buf.len(),
        })?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length checked"))
    }

    fn slice(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        let end = self.pos + n;
        let bytes = self.buf.get(self.pos..end).ok_or(PayloadError::Truncated {
            what: self.what,
            at: self.buf.len(),
        })?;
        self.pos = end;
        Ok(bytes)
    }

    fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_be_bytes(self.take()?))
    }
    fn i16(&mut self) -> Result<i16, PayloadError> {
        Ok(i16::from_be_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_be_bytes(self.take()?))
    }
    fn i32(&mut self) -> Result<i32, PayloadError> {
        Ok(i32::from_be_bytes(self.take()?))
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn finish(self) -> Result<(), PayloadError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(PayloadError::TrailingBytes {
                what: self.what,
                extra: self.buf.len() - self.pos,
            })
        }
    }
}

fn expect_opcode(frame: &MacFrame, op: Opcode) -> Result<(), PayloadError> {
    if frame.opcode == op.as_u8() {
        Ok(())
    } else {
        Err(PayloadError::WrongOpcode {
            expected: op.as_u8(),
            found: frame.opcode,
        })
    }
}

fn saturating_i32(v: f64) -> i32 {
    v.round().clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
}

/// Converts seconds to the on-air millisecond countdown (never negative).
pub fn countdown_to_ms(seconds: f64) -> u32 {
    (seconds * 1000.0).round().clamp(0.0, f64::from(u32::MAX)) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckRequest {
    pub battery_mv: u16,
}

impl CheckRequest {
    pub fn encode(&self) -> Vec<u8> {
        self.battery_mv.to_be_bytes().to_vec()
    }

    pub fn decode(data: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("check request", data);
        let battery_mv = r.u16()?;
        r.finish()?;
        Ok(Self { battery_mv })
    }

    pub fn from_frame(frame: &MacFrame) -> Result<Self, PayloadError> {
        expect_opcode(frame, Opcode::InstructionCheckRequest)?;
        Self::decode(&frame.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangingEntry {
    pub mode: RangingRole,
    pub partner: NodeId,
    pub countdown_ms: u32,
    pub ranging_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RangingBatch {
    pub entries: Vec<RangingEntry>,
}

impl RangingBatch {
    const ENTRY_LEN: usize = 11;

    pub fn encode(&self) -> Result<Vec<u8>, PayloadError> {
        let len = 1 + self.entries.len() * Self::ENTRY_LEN;
        if self.entries.len() > usize::from(u8::MAX) || len > MAX_DATA_LEN {
            return Err(PayloadError::TooLong {
                len,
                limit: MAX_DATA_LEN,
            });
        }
        let mut out = Vec::with_capacity(len);
        out.push(self.entries.len() as u8);
        for e in &self.entries {
            out.push(match e.mode {
                RangingRole::Master => 0,
                RangingRole::Slave => 1,
            });
            out.extend_from_slice(&e.partner.to_be_bytes());
            out.extend_from_slice(&e.countdown_ms.to_be_bytes());
            out.extend_from_slice(&e.ranging_id.to_be_bytes());
        }
        Ok(out)
    }

    pub fn decode(data: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("ranging batch", data);
        let n = r.u8()?;
        let mut entries = Vec::with_capacity(usize::from(n));
        for _ in 0..n {
            let mode = match r.u8()? {
                0 => RangingRole::Master,
                1 => RangingRole::Slave,
                v => {
                    return Err(PayloadError::BadValue {
                        what: "ranging mode",
                        value: i64::from(v),
                    })
                }
            };
            entries.push(RangingEntry {
                mode,
                partner: r.u16()?,
                countdown_ms: r.u32()?,
                ranging_id: r.u32()?,
            });
        }
        r.finish()?;
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassiveEntry {
    pub master: NodeId,
    pub slave: NodeId,
    pub countdown_ms: u32,
    pub ranging_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PassiveBatch {
    pub entries: Vec<PassiveEntry>,
}

impl PassiveBatch {
    const ENTRY_LEN: usize = 12;

    pub fn encode(&self) -> Result<Vec<u8>, PayloadError> {
        let len = 1 + self.entries.len() * Self::ENTRY_LEN;
        if self.entries.len() > usize::from(u8::MAX) || len > MAX_DATA_LEN {
            return Err(PayloadError::TooLong {
                len,
                limit: MAX_DATA_LEN,
            });
        }
        let mut out = Vec::with_capacity(len);
        out.push(self.entries.len() as u8);
        for e in &self.entries {
            out.extend_from_slice(&e.master.to_be_bytes());
            out.extend_from_slice(&e.slave.to_be_bytes());
            out.extend_from_slice(&e.countdown_ms.to_be_bytes());
            out.extend_from_slice(&e.ranging_id.to_be_bytes());
        }
        Ok(out)
    }

    pub fn decode(data: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("passive batch", data);
        let n = r.u8()?;
        let mut entries = Vec::with_capacity(usize::from(n));
        for _ in 0..n {
            entries.push(PassiveEntry {
                master: r.u16()?,
                slave: r.u16()?,
                countdown_ms: r.u32()?,
                ranging_id: r.u32()?,
            });
        }
        r.finish()?;
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigUpdate {
    pub mode: OperatingMode,
    pub check_interval_s: u32,
    pub anchor: Option<GeoPoint>,
}

impl ConfigUpdate {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.mode.as_u8()];
        out.extend_from_slice(&self.check_interval_s.to_be_bytes());
        match self.anchor {
            Some(p) => {
                out.push(1);
                out.extend_from_slice(&saturating_i32(p.lat * 1e7).to_be_bytes());
                out.extend_from_slice(&saturating_i32(p.lon * 1e7).to_be_bytes());
            }
            None => out.push(0),
        }
        out
    }

    pub fn decode(data: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("config update", data);
        let raw_mode = r.u8()?;
        let mode = OperatingMode::from_u8(raw_mode).ok_or(PayloadError::BadValue {
            what: "operating mode",
            value: i64::from(raw_mode),
        })?;
        let check_interval_s = r.u32()?;
        let anchor = match r.u8()? {
            0 => None,
            1 => Some(GeoPoint {
                lat: f64::from(r.i32()?) * 1e-7,
                lon: f64::from(r.i32()?) * 1e-7,
            }),
            v => {
                return Err(PayloadError::BadValue {
                    what: "anchor flag",
                    value: i64::from(v),
                })
            }
        };
        r.finish()?;
        Ok(Self {
            mode,
            check_interval_s,
            anchor,
        })
    }
}

/// One part of an instruction response.
#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Ranging(RangingBatch),
    Passive(PassiveBatch),
    Config(ConfigUpdate),
}

impl Section {
    fn opcode(&self) -> Opcode {
        match self {
            Self::Ranging(_) => Opcode::RangingBatch,
            Self::Passive(_) => Opcode::PassiveRangingBatch,
            Self::Config(_) => Opcode::ConfigUpdate,
        }
    }

    fn body(&self) -> Result<Vec<u8>, PayloadError> {
        match self {
            Self::Ranging(b) => b.encode(),
            Self::Passive(b) => b.encode(),
            Self::Config(c) => Ok(c.encode()),
        }
    }
}

/// Downlink answer to an instruction check: a list of sections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstructionResponse {
    pub sections: Vec<Section>,
}

impl InstructionResponse {
    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn encode(&self) -> Result<Vec<u8>, PayloadError> {
        let mut out = Vec::new();
        for s in &self.sections {
            let body = s.body()?;
            if body.len() > usize::from(u8::MAX) {
                return Err(PayloadError::TooLong {
                    len: body.len(),
                    limit: usize::from(u8::MAX),
                });
            }
            out.push(s.opcode().as_u8());
            out.push(body.len() as u8);
            out.extend_from_slice(&body);
        }
        if out.len() > MAX_DATA_LEN {
            return Err(PayloadError::TooLong {
                len: out.len(),
                limit: MAX_DATA_LEN,
            });
        }
        Ok(out)
    }

    pub fn decode(data: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("instruction response", data);
        let mut sections = Vec::new();
        while !r.is_empty() {
            let op = r.u8()?;
            let len = usize::from(r.u8()?);
            let body = r.slice(len)?;
            sections.push(match Opcode::try_from(op) {
                Ok(Opcode::RangingBatch) => Section::Ranging(RangingBatch::decode(body)?),
                Ok(Opcode::PassiveRangingBatch) => Section::Passive(PassiveBatch::decode(body)?),
                Ok(Opcode::ConfigUpdate) => Section::Config(ConfigUpdate::decode(body)?),
                _ => {
                    return Err(PayloadError::BadValue {
                        what: "section opcode",
                        value: i64::from(op),
                    })
                }
            });
        }
        Ok(Self { sections })
    }

    pub fn from_frame(frame: &MacFrame) -> Result<Self, PayloadError> {
        expect_opcode(frame, Opcode::InstructionResponse)?;
        Self::decode(&frame.data)
    }

    /// Applies `f` to every countdown in the response.
    pub fn map_countdowns(&mut self, mut f: impl FnMut(u32) -> u32) {
        for s in &mut self.sections {
            match s {
                Section::Ranging(b) => b.entries.iter_mut().for_each(|e| e.countdown_ms = f(e.countdown_ms)),
                Section::Passive(b) => b.entries.iter_mut().for_each(|e| e.countdown_ms = f(e.countdown_ms)),
                Section::Config(_) => {}
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangingResultPayload {
    pub ranging_id: u32,
    pub slave: NodeId,
    pub distance_m: f64,
    pub raw_distance_m: f64,
    pub rssi_dbm: f64,
    pub repeats: u8,
}

impl RangingResultPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17);
        out.extend_from_slice(&self.ranging_id.to_be_bytes());
        out.extend_from_slice(&self.slave.to_be_bytes());
        out.extend_from_slice(&saturating_i32(self.distance_m * 1e4).to_be_bytes());
        out.extend_from_slice(&saturating_i32(self.raw_distance_m * 1e4).to_be_bytes());
        let rssi = (self.rssi_dbm * 10.0).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16;
        out.extend_from_slice(&rssi.to_be_bytes());
        out.push(self.repeats);
        out
    }

    pub fn decode(data: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("ranging result", data);
        let v = Self {
            ranging_id: r.u32()?,
            slave: r.u16()?,
            distance_m: f64::from(r.i32()?) * 1e-4,
            raw_distance_m: f64::from(r.i32()?) * 1e-4,
            rssi_dbm: f64::from(r.i16()?) / 10.0,
            repeats: r.u8()?,
        };
        r.finish()?;
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassiveResultPayload {
    pub ranging_id: u32,
    pub master: NodeId,
    pub slave: NodeId,
    pub delta_t_s: f64,
}

impl PassiveResultPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12);
        out.extend_from_slice(&self.ranging_id.to_be_bytes());
        out.extend_from_slice(&self.master.to_be_bytes());
        out.extend_from_slice(&self.slave.to_be_bytes());
        out.extend_from_slice(&saturating_i32(self.delta_t_s * 1e12).to_be_bytes());
        out
    }

    pub fn decode(data: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("passive result", data);
        let v = Self {
            ranging_id: r.u32()?,
            master: r.u16()?,
            slave: r.u16()?,
            delta_t_s: f64::from(r.i32()?) * 1e-12,
        };
        r.finish()?;
        Ok(v)
    }
}
