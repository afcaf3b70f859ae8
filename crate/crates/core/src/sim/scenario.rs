//! Scenario files (TOML). Unknown keys are rejected.

use crate::energy::{CadBaseline, NOMINAL_CAPACITY_C, RX_CURRENT_A};
use crate::frame::RadioConfig;
use crate::sim::channel::ChannelModel;
use crate::types::{CountdownMode, GeoPoint, NodeId, OperatingMode, Position, GATEWAY_ADDR, BROADCAST_ADDR};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoleSpec {
    Anchor,
    #[default]
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub position: Position,
    #[serde(default)]
    pub role: RoleSpec,
    #[serde(default = "default_interval")]
    pub interval_s: f64,
    #[serde(default)]
    pub mode: OperatingMode,
    #[serde(default)]
    pub ppm: f64,
    #[serde(default = "default_battery")]
    pub battery_c: f64,
    /// Seeds the server with a check at this time.
    #[serde(default)]
    pub last_check_s: Option<f64>,
    /// Local time of the first check; defaults to one interval after the last.
    #[serde(default)]
    pub first_check_s: Option<f64>,
    #[serde(default)]
    pub retry_delays_s: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: u8,
    /// Registered with the server before the run.
    #[serde(default = "yes")]
    pub registered: bool,
}

fn default_interval() -> f64 {
    600.0
}
fn default_battery() -> f64 {
    NOMINAL_CAPACITY_C
}
fn default_repeats() -> u8 {
    10
}
fn yes() -> bool {
    true
}

impl NodeSpec {
    pub fn first_check(&self) -> f64 {
        self.first_check_s
            .unwrap_or_else(|| self.last_check_s.unwrap_or(0.0) + self.interval_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Comm,
    Ranging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfererSpec {
    pub at_s: f64,
    pub duration_s: f64,
    pub position: Position,
    #[serde(default = "default_band")]
    pub band: Band,
    #[serde(default = "default_power")]
    pub power_dbm: f64,
    #[serde(default)]
    pub every_s: Option<f64>,
    #[serde(default = "one")]
    pub count: u32,
}

fn default_band() -> Band {
    Band::Comm
}
fn default_power() -> f64 {
    12.5
}
fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub at_s: f64,
    pub line: String,
    #[serde(default)]
    pub every_s: Option<f64>,
    #[serde(default = "one")]
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewaySpec {
    pub id: u16,
    pub network_id: u16,
    pub position: Position,
    pub alpha_s: f64,
}

impl Default for GatewaySpec {
    fn default() -> Self {
        Self {
            id: 1,
            network_id: 1,
            position: Position::default(),
            alpha_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSpec {
    pub lead_s: f64,
    pub slot_s: f64,
    pub default_interval_s: f64,
}

impl Default for ServerSpec {
    fn default() -> Self {
        Self {
            lead_s: 5.0,
            slot_s: 1.0,
            default_interval_s: 600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioSpec {
    pub comm: RadioConfig,
    pub ranging: RadioConfig,
}

impl Default for RadioSpec {
    fn default() -> Self {
        Self {
            comm: RadioConfig::communication(),
            ranging: RadioConfig::ranging(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlanPreset {
    #[default]
    Idle,
    Ranging,
}

/// Inputs of the analytic lifetime report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySpec {
    pub tau_s: f64,
    pub preset: PlanPreset,
    pub capacity_c: f64,
    /// Cycles observed until cutoff in a bench run, for the practical capacity.
    pub observed_cycles: Option<u64>,
    pub observed_tau_s: f64,
    pub observed_preset: PlanPreset,
}

impl Default for EnergySpec {
    fn default() -> Self {
        Self {
            tau_s: 600.0,
            preset: PlanPreset::Idle,
            capacity_c: NOMINAL_CAPACITY_C,
            observed_cycles: None,
            observed_tau_s: 30.0,
            observed_preset: PlanPreset::Idle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSpec {
    pub always_on_current_a: f64,
    pub cad_scan_period_s: f64,
    pub cad_scan_current_a: f64,
    pub cad_scan_duration_s: f64,
    pub long_preamble_s: f64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        let cad = CadBaseline::default();
        Self {
            always_on_current_a: RX_CURRENT_A,
            cad_scan_period_s: cad.scan_period_s,
            cad_scan_current_a: cad.scan_current_a,
            cad_scan_duration_s: cad.scan_duration_s,
            long_preamble_s: cad.long_preamble_s,
        }
    }
}

impl BaselineSpec {
    pub fn cad(&self) -> CadBaseline {
        CadBaseline {
            scan_period_s: self.cad_scan_period_s,
            scan_current_a: self.cad_scan_current_a,
            scan_duration_s: self.cad_scan_duration_s,
            long_preamble_s: self.long_preamble_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub horizon_s: f64,
    #[serde(default)]
    pub countdown: CountdownMode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// End the run when the first node's battery is exhausted.
    #[serde(default)]
    pub stop_on_death: bool,
    #[serde(default = "yes")]
    pub trace_energy: bool,
    #[serde(default = "default_origin")]
    pub origin: GeoPoint,
    #[serde(default)]
    pub radio: RadioSpec,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default)]
    pub gateway: GatewaySpec,
    #[serde(default)]
    pub server: ServerSpec,
    #[serde(default, rename = "node")]
    pub nodes: Vec<NodeSpec>,
    #[serde(default, rename = "interferer")]
    pub interferers: Vec<InterfererSpec>,
    #[serde(default, rename = "command")]
    pub commands: Vec<CommandSpec>,
    #[serde(default)]
    pub energy: EnergySpec,
    #[serde(default)]
    pub baselines: BaselineSpec,
}

fn default_origin() -> GeoPoint {
    GeoPoint { lat: 51.0, lon: 3.7 }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl Scenario {
    pub fn from_str_named(text: &str, name: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |r| line_col(text, r.start));
            ScenarioError::Parse {
                path: name.to_string(),
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_str_named(&text, &path.display().to_string())
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.horizon_s >= 0.0 && self.horizon_s.is_finite()) {
            return Err(invalid("horizon_s", "must be a finite non-negative number"));
        }
        for (name, r) in [("radio.comm", &self.radio.comm), ("radio.ranging", &self.radio.ranging)] {
            r.validate().map_err(|e| invalid(name, e.to_string()))?;
        }
        if self.radio.comm.freq_hz == self.radio.ranging.freq_hz {
            return Err(invalid("radio.ranging.freq_hz", "must differ from the communication channel"));
        }
        self.channel.validate().map_err(|m| invalid("channel", m))?;
        if !(self.gateway.alpha_s > 0.0) {
            return Err(invalid("gateway.alpha_s", "must be positive"));
        }
        if !self.gateway.position.is_finite() {
            return Err(invalid("gateway.position", "must be finite"));
        }
        if !(self.server.lead_s >= 0.0 && self.server.slot_s > 0.0 && self.server.default_interval_s > 0.0) {
            return Err(invalid("server", "lead_s must be >= 0, slot_s and default_interval_s > 0"));
        }
        let mut ids = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let f = |k: &str| format!("node[{i}].{k}");
            if n.id == GATEWAY_ADDR || n.id == BROADCAST_ADDR {
                return Err(invalid(f("id"), format!("{:#06x} is reserved", n.id)));
            }
            if !ids.insert(n.id) {
                return Err(invalid(f("id"), format!("duplicate node id {}", n.id)));
            }
            if !n.position.is_finite() {
                return Err(invalid(f("position"), "must be finite"));
            }
            if !(n.interval_s > 2.0 && n.interval_s.is_finite()) {
                return Err(invalid(f("interval_s"), "must exceed the 2 s check exchange"));
            }
            if !(n.ppm.abs() <= 80.0) {
                return Err(invalid(f("ppm"), "must lie within +-80"));
            }
            if !(n.battery_c > 0.0) {
                return Err(invalid(f("battery_c"), "must be positive"));
            }
            if n.repeats == 0 {
                return Err(invalid(f("repeats"), "must be positive"));
            }
            if n.retry_delays_s.iter().any(|d| !(*d > 0.0)) {
                return Err(invalid(f("retry_delays_s"), "delays must be positive"));
            }
            if !n.first_check().is_finite() || n.first_check() < 0.0 {
                return Err(invalid(f("first_check_s"), "must be non-negative"));
            }
        }
        for (i, it) in self.interferers.iter().enumerate() {
            let f = |k: &str| format!("interferer[{i}].{k}");
            if !(it.duration_s > 0.0) {
                return Err(invalid(f("duration_s"), "must be positive"));
            }
            if !it.position.is_finite() {
                return Err(invalid(f("position"), "must be finite"));
            }
            if it.count > 1 && !it.every_s.is_some_and(|e| e > 0.0) {
                return Err(invalid(f("every_s"), "required and positive when count > 1"));
            }
        }
        for (i, c) in self.commands.iter().enumerate() {
            let f = |k: &str| format!("command[{i}].{k}");
            let cmd: crate::server::command::Command =
                c.line.parse().map_err(|e: crate::server::command::BadCommand| invalid(f("line"), e.0))?;
            for id in command_nodes(&cmd) {
                if !ids.contains(&id) {
                    return Err(invalid(f("line"), format!("node {id} is not defined")));
                }
            }
            if c.count > 1 && !c.every_s.is_some_and(|e| e > 0.0) {
                return Err(invalid(f("every_s"), "required and positive when count > 1"));
            }
        }
        if !(self.energy.tau_s > 0.0 && self.energy.observed_tau_s > 0.0) {
            return Err(invalid("energy.tau_s", "must be positive"));
        }
        if !(self.energy.capacity_c > 0.0) {
            return Err(invalid("energy.capacity_c", "must be positive"));
        }
        Ok(())
    }
}

fn command_nodes(cmd: &crate::server::command::Command) -> Vec<NodeId> {
    use crate::server::command::Command::*;
    match cmd {
        RequestRanging {
            target,
            anchors,
            passive,
        } => std::iter::once(*target).chain(anchors.iter().copied()).chain(passive.iter().copied()).collect(),
        RequestPassive { listener, master, slave } => vec![*listener, *master, *slave],
        UpdateConfig { node, .. } | QueryStatus { node } => vec![*node],
        QueryLocation { target, .. } => vec![*target],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
horizon_s = 100.0

[[node]]
id = 1
position = [0.0, 0.0, 0.0]
"#;

    #[test]
    fn defaults_fill_in() {
        let s = Scenario::from_str_named(MINIMAL, "t").unwrap();
        assert_eq!(s.nodes[0].interval_s, 600.0);
        assert_eq!(s.channel.sensitivity_dbm, -120.0);
        assert_eq!(s.countdown, CountdownMode::Dynamic);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = format!("colour = 3\n{MINIMAL}");
        match Scenario::from_str_named(&text, "t") {
            Err(ScenarioError::Parse { line, message, .. }) => {
                assert_eq!(line, 1, "{message}");
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn field_level_diagnostics() {
        let text = MINIMAL.replace("id = 1", "id = 1\nppm = 200.0");
        let e = Scenario::from_str_named(&text, "t").unwrap_err();
        assert!(e.to_string().starts_with("node[0].ppm"), "{e}");
        let text = format!("{MINIMAL}[[command]]\nat_s = 1.0\nline = \"query_status node=9\"\n");
        let e = Scenario::from_str_named(&text, "t").unwrap_err();
        assert!(e.to_string().contains("node 9 is not defined"), "{e}");
    }
}
