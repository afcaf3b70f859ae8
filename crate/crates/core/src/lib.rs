//! Energy-aware LoRa ranging and localization: wire formats, node, gateway
//! and server state machines, the ranging and energy models, and a
//! discrete-event simulator that ties them together.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clock;
pub mod energy;
pub mod frame;
pub mod gateway;
pub mod geo;
pub mod localization;
pub mod node;
pub mod ranging;
pub mod report;
pub mod server;
pub mod sim;
pub mod types;

pub use clock::LocalClock;
pub use energy::{ActivityProfile, CyclePlan, EnergyLedger};
pub use frame::{MacFrame, Opcode, RadioConfig};
pub use gateway::GatewayState;
pub use localization::{Anchor, PositionEstimate};
pub use node::{NodeConfig, NodeState};
pub use server::NetServer;
pub use sim::scenario::{Scenario, ScenarioError};
pub use sim::{SimOutput, Simulation};
pub use types::{CountdownMode, GeoPoint, NodeId, OperatingMode, Position, RangingRole};
