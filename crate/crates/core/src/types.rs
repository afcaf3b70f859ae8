//! Small domain types shared across modules.

use serde::{Deserialize, Serialize};
use std::fmt;

/// 16-bit node address.
pub type NodeId = u16;

/// Destination address used by nodes for frames bound to the gateway.
pub const GATEWAY_ADDR: NodeId = 0xFFFE;
/// Broadcast destination.
pub const BROADCAST_ADDR: NodeId = 0xFFFF;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OperatingMode {
    AlwaysOn,
    #[default]
    LowPower,
}

impl OperatingMode {
    pub fn as_u8(self) -> u8 {
        match self {
            Self::AlwaysOn => 0,
            Self::LowPower => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::AlwaysOn),
            1 => Some(Self::LowPower),
            _ => None,
        }
    }
}

impl fmt::Display for OperatingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AlwaysOn => "always_on",
            Self::LowPower => "low_power",
        })
    }
}

/// Role a node plays in one point-to-point exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangingRole {
    Master,
    Slave,
}

impl RangingRole {
    pub fn opposite(self) -> Self {
        match self {
            Self::Master => Self::Slave,
            Self::Slave => Self::Master,
        }
    }
}

/// How a node interprets the time value attached to a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CountdownMode {
    /// Remaining time, recomputed at every delivery and counted from receipt.
    #[default]
    Dynamic,
    /// LoRaWAN-style fixed offset computed once at scheduling time and
    /// counted from the node's check-in.
    StaticOffset,
}

/// Cartesian position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Position {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Self { x, y, z }
    }
}

impl From<Position> for [f64; 3] {
    fn from(p: Position) -> Self {
        [p.x, p.y, p.z]
    }
}

/// Geodetic coordinate in degrees (WGS84).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}
