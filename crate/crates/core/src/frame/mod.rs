//! On-air frame format.
//!
//! A PHY frame carries a CRC-protected payload which in turn holds the MAC
//! frame:
//!
//! ```text
//! offset  size  field
//! 0       2     network id        (big-endian)
//! 2       2     destination addr  (big-endian)
//! 4       2     source addr       (big-endian)
//! 6       1     opcode
//! 7       0-246 data
//! ```
//!
//! The PHY trailer is a CRC-16/CCITT (poly 0x1021, init 0xFFFF) over the whole
//! MAC frame, appended big-endian. Opcode-specific data layouts live in
//! [`payload`].

pub mod payload;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed MAC header length: network id, destination, source, opcode.
pub const MAC_HEADER_LEN: usize = 7;
/// Largest opcode data field.
pub const MAX_DATA_LEN: usize = 246;
/// Largest PHY payload (MAC header + data).
pub const MAX_PHY_PAYLOAD: usize = MAC_HEADER_LEN + MAX_DATA_LEN;
/// Length of the CRC trailer in bytes.
pub const CRC_LEN: usize = 2;

/// Preamble-detection overhead (sync word + SFD) in symbols.
const PREAMBLE_OVERHEAD_SYMBOLS: f64 = 4.25;
/// Explicit header block length in symbols.
const HEADER_SYMBOLS: f64 = 8.0;
/// Code rate index for 4/5.
const CODING_RATE: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("data field is {len} bytes, maximum is {MAX_DATA_LEN}")]
    DataTooLong { len: usize },
    #[error("frame is {len} bytes, need at least {MAC_HEADER_LEN}")]
    TooShort { len: usize },
    #[error("PHY payload is {len} bytes, maximum is {MAX_PHY_PAYLOAD}")]
    PayloadTooLong { len: usize },
    #[error("CRC mismatch: computed {computed:#06x}, received {received:#06x}")]
    CrcMismatch { computed: u16, received: u16 },
    #[error("unsupported spreading factor {0} (valid 5-12)")]
    BadSpreadingFactor(u8),
    #[error("unsupported bandwidth {0} Hz")]
    BadBandwidth(u32),
}

/// Opcode registry. The codec itself carries raw `u8` opcodes; this enum is
/// for the state machines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Opcode {
    InstructionCheckRequest = 0x01,
    InstructionResponse = 0x02,
    ConfigCheckRequest = 0x03,
    ConfigUpdate = 0x04,
    RangingBatch = 0x05,
    PassiveRangingBatch = 0x06,
    RangingResult = 0x07,
    PassiveRangingResult = 0x08,
}

impl Opcode {
    pub const fn as_u8(self) -> u8 {
        self as u8
    }

    pub const fn name(self) -> &'static str {
        match self {
            Self::InstructionCheckRequest => "instruction_check",
            Self::InstructionResponse => "instruction_response",
            Self::ConfigCheckRequest => "config_check",
            Self::ConfigUpdate => "config_update",
            Self::RangingBatch => "ranging_batch",
            Self::PassiveRangingBatch => "passive_batch",
            Self::RangingResult => "ranging_result",
            Self::PassiveRangingResult => "passive_result",
        }
    }
}

impl TryFrom<u8> for Opcode {
    type Error = u8;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Ok(match value {
            0x01 => Self::InstructionCheckRequest,
            0x02 => Self::InstructionResponse,
            0x03 => Self::ConfigCheckRequest,
            0x04 => Self::ConfigUpdate,
            0x05 => Self::RangingBatch,
            0x06 => Self::PassiveRangingBatch,
            0x07 => Self::RangingResult,
            0x08 => Self::PassiveRangingResult,
            other => return Err(other),
        })
    }
}

/// SX1280 LoRa bandwidths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Bandwidth {
    Bw203k,
    Bw406k,
    Bw812k,
    Bw1625k,
}

impl Bandwidth {
    pub const ALL: [Bandwidth; 4] = [Self::Bw203k, Self::Bw406k, Self::Bw812k, Self::Bw1625k];

    pub const fn hz(self) -> u32 {
        match self {
            Self::Bw203k => 203_000,
            Self::Bw406k => 406_000,
            Self::Bw812k => 812_000,
            Self::Bw1625k => 1_625_000,
        }
    }
}

impl TryFrom<u32> for Bandwidth {
    type Error = FrameError;

    fn try_from(hz: u32) -> Result<Self, Self::Error> {
        Self::ALL
            .into_iter()
            .find(|bw| bw.hz() == hz)
            .ok_or(FrameError::BadBandwidth(hz))
    }
}

impl From<Bandwidth> for u32 {
    fn from(bw: Bandwidth) -> u32 {
        bw.hz()
    }
}

/// Radio parameters shared by both ends of a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioConfig {
    pub sf: u8,
    pub bw_hz: Bandwidth,
    pub freq_hz: f64,
    #[serde(default = "default_preamble")]
    pub preamble_symbols: u16,
    #[serde(default = "default_tx_power")]
    pub tx_power_dbm: f64,
}

fn default_preamble() -> u16 {
    12
}

fn default_tx_power() -> f64 {
    12.5
}

impl RadioConfig {
    pub fn new(sf: u8, bw: Bandwidth, freq_hz: f64) -> Result<Self, FrameError> {
        let cfg = Self {
            sf,
            bw_hz: bw,
            freq_hz,
            preamble_symbols: default_preamble(),
            tx_power_dbm: default_tx_power(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Communication defaults: SF10, 1625 kHz, 12-symbol preamble.
    pub fn communication() -> Self {
        Self {
            sf: 10,
            bw_hz: Bandwidth::Bw1625k,
            freq_hz: 2_403_000_000.0,
            preamble_symbols: 12,
            tx_power_dbm: 12.5,
        }
    }

    /// Ranging defaults: SF8, 1625 kHz, on a separate center frequency.
    pub fn ranging() -> Self {
        Self {
            sf: 8,
            freq_hz: 2_479_000_000.0,
            ..Self::communication()
        }
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if !(5..=12).contains(&self.sf) {
            return Err(FrameError::BadSpreadingFactor(self.sf));
        }
        Ok(())
    }

    /// Chirp symbol duration `2^SF / BW` in seconds.
    pub fn symbol_duration(&self) -> f64 {
        f64::from(1u32 << self.sf) / f64::from(self.bw_hz.hz())
    }

    /// Preamble plus sync overhead, in seconds.
    pub fn preamble_duration(&self) -> f64 {
        (f64::from(self.preamble_symbols) + PREAMBLE_OVERHEAD_SYMBOLS) * self.symbol_duration()
    }

    pub fn airtime(&self, payload_len: usize, has_crc: bool) -> Result<f64, FrameError> {
        airtime(self, payload_len, has_crc)
    }
}

/// Time on air of one packet, explicit header, code rate 4/5.
///
/// `(preamble + 4.25 + 8 + payload_symbols) * T_s`, where the 8 symbols are
/// the explicit header block and `payload_symbols` follows the usual LoRa
/// `ceil((8PL - 4SF + 28 + 16CRC) / (4(SF - 2DE))) * (CR + 4)` rule.
pub fn airtime(config: &RadioConfig, payload_len: usize, has_crc: bool) -> Result<f64, FrameError> {
    if payload_len > MAX_PHY_PAYLOAD {
        return Err(FrameError::PayloadTooLong { len: payload_len });
    }
    let ts = config.symbol_duration();
    let sf = i64::from(config.sf);
    let low_data_rate = ts > 16e-3;
    let crc_bits = if has_crc { 16 } else { 0 };
    let numerator = 8 * payload_len as i64 - 4 * sf + 28 + crc_bits;
    let denominator = 4 * (sf - if low_data_rate { 2 } else { 0 });
    let blocks = if numerator > 0 {
        (numerator + denominator - 1) / denominator
    } else {
        0
    };
    let payload_symbols = (blocks * i64::from(CODING_RATE + 4)) as f64;
    let symbols = f64::from(config.preamble_symbols)
        + PREAMBLE_OVERHEAD_SYMBOLS
        + HEADER_SYMBOLS
        + payload_symbols;
    Ok(symbols * ts)
}

/// MAC frame carried inside the PHY payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacFrame {
    pub network_id: u16,
    pub dest_addr: u16,
    pub src_addr: u16,
    pub opcode: u8,
    pub data: Vec<u8>,
}

impl MacFrame {
    pub fn new(network_id: u16, dest_addr: u16, src_addr: u16, opcode: Opcode, data: Vec<u8>) -> Self {
        Self {
            network_id,
            dest_addr,
            src_addr,
            opcode: opcode.as_u8(),
            data,
        }
    }

    pub fn opcode(&self) -> Option<Opcode> {
        Opcode::try_from(self.opcode).ok()
    }

    /// Registry name, or the raw byte for unknown opcodes.
    pub fn opcode_name(&self) -> String {
        match self.opcode() {
            Some(op) => op.name().to_string(),
            None => format!("{:#04x}", self.opcode),
        }
    }

    pub fn encoded_len(&self) -> usize {
        MAC_HEADER_LEN + self.data.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        encode_mac(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        decode_mac(bytes)
    }
}

pub fn encode_mac(frame: &MacFrame) -> Result<Vec<u8>, FrameError> {
    if frame.data.len() > MAX_DATA_LEN {
        return Err(FrameError::DataTooLong {
            len: frame.data.len(),
        });
    }
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&frame.network_id.to_be_bytes());
    out.extend_from_slice(&frame.dest_addr.to_be_bytes());
    out.extend_from_slice(&frame.src_addr.to_be_bytes());
    out.push(frame.opcode);
    out.extend_from_slice(&frame.data);
    Ok(out)
}

/// Opcode-agnostic: any opcode byte decodes.
pub fn decode_mac(bytes: &[u8]) -> Result<MacFrame, FrameError> {
    if bytes.len() < MAC_HEADER_LEN {
        return Err(FrameError::TooShort { len: bytes.len() });
    }
    if bytes.len() > MAX_PHY_PAYLOAD {
        return Err(FrameError::DataTooLong {
            len: bytes.len() - MAC_HEADER_LEN,
        });
    }
    let be16 = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
    Ok(MacFrame {
        network_id: be16(0),
        dest_addr: be16(2),
        src_addr: be16(4),
        opcode: bytes[6],
        data: bytes[MAC_HEADER_LEN..].to_vec(),
    })
}

/// CRC-16/CCITT-FALSE.
pub fn crc16(bytes: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &b in bytes {
        crc ^= u16::from(b) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
        }
    }
    crc
}

/// A PHY frame: preamble length (not serialized), payload and CRC trailer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhyFrame {
    pub preamble_symbols: u16,
    pub payload: Vec<u8>,
    pub crc: u16,
}

impl PhyFrame {
    pub fn new(preamble_symbols: u16, mac: &MacFrame) -> Result<Self, FrameError> {
        let payload = encode_mac(mac)?;
        let crc = crc16(&payload);
        Ok(Self {
            preamble_symbols,
            payload,
            crc,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.payload.clone();
        out.extend_from_slice(&self.crc.to_be_bytes());
        out
    }

    /// Splits off and verifies the CRC trailer.
    pub fn from_bytes(preamble_symbols: u16, bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < MAC_HEADER_LEN + CRC_LEN {
            return Err(FrameError::TooShort {
                len: bytes.len().saturating_sub(CRC_LEN),
            });
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - CRC_LEN);
        if payload.len() > MAX_PHY_PAYLOAD {
            return Err(FrameError::PayloadTooLong { len: payload.len() });
        }
        let received = u16::from_be_bytes([trailer[0], trailer[1]]);
        let computed = crc16(payload);
        if computed != received {
            return Err(FrameError::CrcMismatch { computed, received });
        }
        Ok(Self {
            preamble_symbols,
            payload: payload.to_vec(),
            crc: received,
        })
    }

    pub fn mac(&self) -> Result<MacFrame, FrameError> {
        decode_mac(&self.payload)
    }

    pub fn airtime(&self, config: &RadioConfig) -> Result<f64, FrameError> {
        let cfg = RadioConfig {
            preamble_symbols: self.preamble_symbols,
            ..*config
        };
        airtime(&cfg, self.payload.len(), true)
    }
}
