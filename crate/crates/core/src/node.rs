//! End-node state machine.
//!
//! A node sleeps between timer events. Each cycle it sends an instruction
//! check, sleeps for `alpha`, then runs a short CAD. Only a detected preamble
//! opens the receive window. Tasks from the response are kept in a queue
//! keyed by local due time and executed when their timers fire.
//!
//! The node only sees its own local clock. Timers are requested in local
//! seconds and the driver converts them to true time.

use crate::clock::LocalClock;
use crate::energy::{
    ActivityProfile, EnergyLedger, CAD_ONLY_RESPONSE, INSTRUCTION_CHECK_REQUEST,
    PTP_RANGING, PTP_RANGING_REPEATS, RESPONSE_WITH_PACKET, RX_CURRENT_A, SLEEP_CURRENT_A,
    TX_CURRENT_A,
};
use crate::frame::payload::{
    CheckRequest, ConfigUpdate, InstructionResponse, PassiveBatch, PassiveResultPayload,
    RangingBatch, RangingResultPayload, Section,
};
use crate::frame::{MacFrame, Opcode, RadioConfig};
use crate::types::{CountdownMode, GeoPoint, NodeId, OperatingMode, RangingRole, GATEWAY_ADDR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use thiserror::Error;

/// Slave and listener windows open this long before the due time.
pub const SLAVE_GUARD_S: f64 = 0.05;
/// How long a slave or listener waits for the exchange to start.
pub const SLAVE_HOLD_S: f64 = 0.1;
/// Delay before retrying a check that collided with ranging work.
const BUSY_RECHECK_S: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("frame for network {found:#06x}, expected {expected:#06x}")]
    ProtocolViolation { expected: u16, found: u16 },
    #[error("task queue full ({capacity} entries)")]
    QueueOverflow { capacity: usize },
    #[error("gave up after {attempts} attempts")]
    GiveUp { attempts: u32 },
    #[error("invalid node config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Anchor(GeoPoint),
    #[default]
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub node_id: NodeId,
    pub network_id: u16,
    pub check_interval_s: f64,
    pub mode: OperatingMode,
    pub role: NodeRole,
    pub clock_ppm: f64,
    pub countdown_mode: CountdownMode,
    pub comm: RadioConfig,
    pub alpha_s: f64,
    /// CAD starts this long before the gateway's reply is due.
    pub cad_lead_s: f64,
    pub max_retries: u32,
    pub retry_window_s: (f64, f64),
    /// Fixed retry delays used before falling back to the random window.
    pub forced_retry_delays_s: Vec<f64>,
    pub queue_capacity: usize,
    pub ranging_repeats: u8,
    pub passive_stagger_s: (f64, f64),
    pub battery_capacity_c: f64,
}

impl NodeConfig {
    pub fn new(node_id: NodeId, network_id: u16) -> Self {
        Self {
            node_id,
            network_id,
            check_interval_s: 600.0,
            mode: OperatingMode::LowPower,
            role: NodeRole::Target,
            clock_ppm: 0.0,
            countdown_mode: CountdownMode::Dynamic,
            comm: RadioConfig::communication(),
            alpha_s: 1.0,
            cad_lead_s: 0.005,
            max_retries: 3,
            retry_window_s: (0.5, 3.0),
            forced_retry_delays_s: Vec::new(),
            queue_capacity: 32,
            ranging_repeats: PTP_RANGING_REPEATS as u8,
            passive_stagger_s: (0.2, 2.0),
            battery_capacity_c: crate::energy::NOMINAL_CAPACITY_C,
        }
    }

    /// Awake time of one idle cycle, including the `alpha` gap.
    pub fn cycle_span_s(&self) -> f64 {
        INSTRUCTION_CHECK_REQUEST.duration_s + self.alpha_s + CAD_ONLY_RESPONSE.duration_s
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        let bad = |m: String| Err(NodeError::InvalidConfig(m));
        if !(self.check_interval_s > self.cycle_span_s()) {
            return bad(format!(
                "check_interval_s {} must exceed the {} s check exchange",
                self.check_interval_s,
                self.cycle_span_s()
            ));
        }
        if !(self.cad_lead_s >= 0.0 && self.cad_lead_s < self.alpha_s) {
            return bad(format!("cad_lead_s {} outside [0, alpha)", self.cad_lead_s));
        }
        let (lo, hi) = self.retry_window_s;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("retry window [{lo}, {hi}] is empty"));
        }
        let (lo, hi) = self.passive_stagger_s;
        if !(lo >= 0.0 && hi >= lo) {
            return bad(format!("passive stagger [{lo}, {hi}] is empty"));
        }
        if self.ranging_repeats == 0 {
            return bad("ranging_repeats must be positive".into());
        }
        if !(self.battery_capacity_c > 0.0) {
            return bad("battery_capacity_c must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sleeping,
    Checking,
    Listening,
    Receiving,
    Ranging,
    Reporting,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Ptp { role: RangingRole, partner: NodeId },
    Passive { master: NodeId, slave: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskQueueEntry {
    pub kind: TaskKind,
    pub countdown_s: f64,
    pub ranging_id: u32,
    pub due_local_s: f64,
    token: u64,
}

impl TaskQueueEntry {
    fn same_task(&self, other: &TaskQueueEntry) -> bool {
        self.ranging_id == other.ranging_id && self.kind == other.kind
    }

    /// Local time at which the node's radio needs to be ready.
    pub fn wake_local_s(&self) -> f64 {
        match self.kind {
            TaskKind::Ptp {
                role: RangingRole::Master,
                ..
            } => self.due_local_s,
            _ => self.due_local_s - SLAVE_GUARD_S,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeTimer {
    Check { attempt: u32 },
    Listen,
    Task { token: u64 },
    Report { token: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MasterMeasurement {
    pub distance_m: f64,
    pub raw_distance_m: f64,
    pub rssi_dbm: f64,
    pub repeats: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeEvent {
    Timer(NodeTimer),
    TxDone,
    CadDone { detected: bool },
    /// End of a receive window; `None` when nothing decodable arrived.
    RxDone(Option<MacFrame>),
    /// Master side of an exchange; `None` when the partner never answered.
    MasterDone {
        ranging_id: u32,
        measurement: Option<MasterMeasurement>,
    },
    /// A slave or listener window closed.
    WindowClosed {
        ranging_id: u32,
        listened_s: f64,
        delta_t_s: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeAction {
    Transmit(MacFrame),
    StartCad { duration_s: f64 },
    OpenRx { timeout_s: f64 },
    Schedule { at_local_s: f64, timer: NodeTimer },
    InitiateRanging {
        partner: NodeId,
        ranging_id: u32,
        repeats: u8,
    },
    OpenRangingWindow {
        ranging_id: u32,
        master: NodeId,
        slave: NodeId,
        passive: bool,
        hold_s: f64,
    },
    Log(String),
    Died,
}

/// Retry delay for `attempt` (1-based).
pub fn retry_policy<R: Rng + ?Sized>(
    attempt: u32,
    max_retries: u32,
    window_s: (f64, f64),
    rng: &mut R,
) -> Result<f64, NodeError> {
    if attempt == 0 || attempt > max_retries {
        return Err(NodeError::GiveUp { attempts: attempt });
    }
    if window_s.1 <= window_s.0 {
        return Ok(window_s.0);
    }
    Ok(rng.random_range(window_s.0..=window_s.1))
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub config: NodeConfig,
    pub clock: LocalClock,
    pub phase: Phase,
    pub queue: Vec<TaskQueueEntry>,
    pub battery: EnergyLedger,
    attempt: u32,
    attempt_wake_local: f64,
    cycle_anchor_local: f64,
    cad_start_true: f64,
    awake_until_true: f64,
    next_token: u64,
    pending_reports: Vec<(u64, PassiveResultPayload)>,
    active: Option<(u32, TaskKind)>,
    death_time_s: Option<f64>,
    rng: ChaCha8Rng,
}

impl NodeState {
    pub fn new(config: NodeConfig, clock: LocalClock, seed: u64) -> Result<Self, NodeError> {
        config.validate()?;
        let battery = EnergyLedger::new(config.battery_capacity_c);
        let rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(config.node_id) << 32));
        Ok(Self {
            config,
            clock,
            phase: Phase::Sleeping,
            queue: Vec::new(),
            battery,
            attempt: 0,
            attempt_wake_local: 0.0,
            cycle_anchor_local: 0.0,
            cad_start_true: 0.0,
            awake_until_true: 0.0,
            next_token: 1,
            pending_reports: Vec::new(),
            active: None,
            death_time_s: None,
            rng,
        })
    }

    pub fn with_trace(mut self) -> Self {
        self.battery = self.battery.with_trace();
        self
    }

    pub fn id(&self) -> NodeId {
        self.config.node_id
    }

    pub fn death_time_s(&self) -> Option<f64> {
        self.death_time_s
    }

    pub fn is_dead(&self) -> bool {
        self.phase == Phase::Dead
    }

    /// Whether the radio can take on ranging right now.
    pub fn is_idle(&self) -> bool {
        self.phase == Phase::Sleeping
    }

    /// Schedules the first check at local time `first_check_local_s`.
    pub fn boot(&mut self, first_check_local_s: f64) -> Vec<NodeAction> {
        self.cycle_anchor_local = first_check_local_s - self.config.check_interval_s;
        vec![NodeAction::Schedule {
            at_local_s: first_check_local_s,
            timer: NodeTimer::Check { attempt: 0 },
        }]
    }

    fn idle_current(&self) -> f64 {
        match self.config.mode {
            OperatingMode::AlwaysOn => RX_CURRENT_A,
            OperatingMode::LowPower => SLEEP_CURRENT_A,
        }
    }

    /// Charges the idle gap up to `now` and then `profile` starting at `now`.
    fn spend(&mut self, now: f64, profile: &ActivityProfile, out: &mut Vec<NodeAction>) {
        self.settle_idle(now, out);
        if self.is_dead() {
            return;
        }
        self.battery.charge_profile(now, profile);
        self.awake_until_true = self.awake_until_true.max(now + profile.duration_s);
        self.check_depleted(now + profile.duration_s, out);
    }

    /// Charges idle current from the end of the last activity to `now`.
    pub fn settle_idle(&mut self, now: f64, out: &mut Vec<NodeAction>) {
        if self.is_dead() {
            return;
        }
        let gap = now - self.awake_until_true;
        if gap <= 0.0 {
            return;
        }
        let current = self.idle_current();
        let remaining = self.battery.remaining_c();
        let label = match self.config.mode {
            OperatingMode::AlwaysOn => "idle_rx",
            OperatingMode::LowPower => "sleep",
        };
        if current * gap >= remaining {
            let t_dead = self.awake_until_true + remaining / current;
            self.battery.charge(t_dead, label, remaining * 1000.0);
            self.awake_until_true = t_dead;
            self.die(t_dead, out);
            return;
        }
        self.battery.charge(now, label, current * gap * 1000.0);
        self.awake_until_true = now;
    }

    fn check_depleted(&mut self, at: f64, out: &mut Vec<NodeAction>) {
        if self.battery.is_depleted() {
            self.die(at, out);
        }
    }

    fn die(&mut self, at: f64, out: &mut Vec<NodeAction>) {
        if self.is_dead() {
            return;
        }
        self.phase = Phase::Dead;
        self.death_time_s = Some(at);
        self.queue.clear();
        out.push(NodeAction::Log(format!("battery depleted at {at:.3} s")));
        out.push(NodeAction::Died);
    }

    fn schedule(&self, at_local_s: f64, timer: NodeTimer) -> NodeAction {
        NodeAction::Schedule { at_local_s, timer }
    }

    fn frame(&self, opcode: Opcode, data: Vec<u8>) -> MacFrame {
        MacFrame::new(self.config.network_id, GATEWAY_ADDR, self.config.node_id, opcode, data)
    }

    /// One transition. `now` is true time and only used for the energy trace;
    /// all scheduling happens on the local clock.
    pub fn step(&mut self, now: f64, event: NodeEvent) -> Vec<NodeAction> {
        let mut out = Vec::new();
        if self.is_dead() {
            return out;
        }
        let local = self.clock.local(now);
        match event {
            NodeEvent::Timer(NodeTimer::Check { attempt }) => self.on_check(now, local, attempt, &mut out),
            NodeEvent::TxDone => self.on_tx_done(local, &mut out),
            NodeEvent::Timer(NodeTimer::Listen) => {
                if self.phase == Phase::Listening {
                    self.cad_start_true = now;
                    self.spend(now, &CAD_ONLY_RESPONSE, &mut out);
                    out.push(NodeAction::StartCad {
                        duration_s: CAD_ONLY_RESPONSE.duration_s,
                    });
                }
            }
            NodeEvent::CadDone { detected } => self.on_cad(now, detected, &mut out),
            NodeEvent::RxDone(frame) => self.on_rx(now, local, frame, &mut out),
            NodeEvent::Timer(NodeTimer::Task { token }) => self.on_task(now, local, token, &mut out),
            NodeEvent::Timer(NodeTimer::Report { token }) => self.on_report(now, token, &mut out),
            NodeEvent::MasterDone {
                ranging_id,
                measurement,
            } => self.on_master_done(ranging_id, measurement, &mut out),
            NodeEvent::WindowClosed {
                ranging_id,
                listened_s,
                delta_t_s,
            } => self.on_window_closed(now, local, ranging_id, listened_s, delta_t_s, &mut out),
        }
        out
    }

    fn on_check(&mut self, now: f64, local: f64, attempt: u32, out: &mut Vec<NodeAction>) {
        if attempt == 0 {
            self.cycle_anchor_local += self.config.check_interval_s;
            out.push(self.schedule(
                self.cycle_anchor_local + self.config.check_interval_s,
                NodeTimer::Check { attempt: 0 },
            ));
        }
        if self.phase != Phase::Sleeping {
            out.push(NodeAction::Log(format!("radio busy ({:?}), check deferred", self.phase)));
            out.push(self.schedule(local + BUSY_RECHECK_S, NodeTimer::Check { attempt }));
            return;
        }
        self.phase = Phase::Checking;
        self.attempt = attempt;
        self.attempt_wake_local = local;
        self.spend(now, &INSTRUCTION_CHECK_REQUEST, out);
        if self.is_dead() {
            return;
        }
        let battery_mv = (self.battery.voltage_proxy() * 1000.0).round() as u16;
        let data = CheckRequest { battery_mv }.encode();
        out.push(NodeAction::Transmit(self.frame(Opcode::InstructionCheckRequest, data)));
    }

    fn on_tx_done(&mut self, local: f64, out: &mut Vec<NodeAction>) {
        match self.phase {
            Phase::Checking => {
                self.phase = Phase::Listening;
                let at = local + self.config.alpha_s - self.config.cad_lead_s;
                out.push(self.schedule(at, NodeTimer::Listen));
            }
            Phase::Reporting => self.phase = Phase::Sleeping,
            _ => {}
        }
    }

    fn on_cad(&mut self, now: f64, detected: bool, out: &mut Vec<NodeAction>) {
        if self.phase != Phase::Listening {
            return;
        }
        if !detected {
            self.phase = Phase::Sleeping;
            return;
        }
        // the with-packet profile already covers the CAD
        let extra = ActivityProfile {
            name: Cow::Borrowed("response_rx"),
            avg_current_a: 1.0,
            duration_s: (RESPONSE_WITH_PACKET.charge_mc() - CAD_ONLY_RESPONSE.charge_mc()) / 1000.0,
        };
        self.battery.charge_profile(now, &extra);
        self.awake_until_true = self
            .awake_until_true
            .max(self.cad_start_true + RESPONSE_WITH_PACKET.duration_s);
        self.check_depleted(now, out);
        if self.is_dead() {
            return;
        }
        self.phase = Phase::Receiving;
        out.push(NodeAction::OpenRx {
            timeout_s: RESPONSE_WITH_PACKET.duration_s - CAD_ONLY_RESPONSE.duration_s,
        });
    }

    fn on_rx(&mut self, now: f64, local: f64, frame: Option<MacFrame>, out: &mut Vec<NodeAction>) {
        if self.phase != Phase::Receiving {
            return;
        }
        self.phase = Phase::Sleeping;
        let handled = match frame {
            Some(f) => match self.accept_downlink(local, &f) {
                Ok(()) => true,
                Err(e) => {
                    out.push(NodeAction::Log(format!("downlink dropped: {e}")));
                    false
                }
            },
            None => false,
        };
        if handled {
            self.attempt = 0;
            let mut acts = Vec::new();
            self.rearm_tasks(local, &mut acts);
            out.extend(acts);
            return;
        }
        let next = self.attempt + 1;
        let forced = self.config.forced_retry_delays_s.get(self.attempt as usize).copied();
        let delay = if next > self.config.max_retries {
            Err(NodeError::GiveUp { attempts: next })
        } else if let Some(d) = forced {
            Ok(d)
        } else {
            retry_policy(next, self.config.max_retries, self.config.retry_window_s, &mut self.rng)
        };
        match delay {
            Ok(d) => {
                let at = (self.attempt_wake_local + d).max(local);
                out.push(NodeAction::Log(format!("retry {next} in {d:.3} s")));
                out.push(self.schedule(at, NodeTimer::Check { attempt: next }));
            }
            Err(e) => {
                out.push(NodeAction::Log(e.to_string()));
                self.attempt = 0;
            }
        }
        let _ = now;
    }

    fn accept_downlink(&mut self, local: f64, f: &MacFrame) -> Result<(), String> {
        if f.network_id != self.config.network_id {
            return Err(NodeError::ProtocolViolation {
                expected: self.config.network_id,
                found: f.network_id,
            }
            .to_string());
        }
        if f.dest_addr != self.config.node_id {
            return Err(format!("addressed to {:#06x}", f.dest_addr));
        }
        match f.opcode() {
            Some(Opcode::InstructionResponse) => {
                let resp = InstructionResponse::from_frame(f).map_err(|e| e.to_string())?;
                let base = match self.config.countdown_mode {
                    CountdownMode::Dynamic => local,
                    CountdownMode::StaticOffset => self.attempt_wake_local,
                };
                for s in resp.sections {
                    match s {
                        Section::Ranging(b) => self.enqueue_instruction(base, &b).map_err(|e| e.to_string())?,
                        Section::Passive(b) => self.enqueue_passive(base, &b).map_err(|e| e.to_string())?,
                        Section::Config(c) => self.apply_config(&c),
                    }
                }
                Ok(())
            }
            Some(Opcode::ConfigUpdate) => {
                let c = ConfigUpdate::decode(&f.data).map_err(|e| e.to_string())?;
                self.apply_config(&c);
                Ok(())
            }
            other => Err(format!("unexpected downlink opcode {other:?}")),
        }
    }

    fn apply_config(&mut self, c: &ConfigUpdate) {
        self.config.mode = c.mode;
        if c.check_interval_s > 0 {
            self.config.check_interval_s = f64::from(c.check_interval_s);
        }
        if let Some(p) = c.anchor {
            self.config.role = NodeRole::Anchor(p);
        }
    }

    fn insert(&mut self, mut entry: TaskQueueEntry) -> Result<(), NodeError> {
        if let Some(existing) = self.queue.iter_mut().find(|e| e.same_task(&entry)) {
            entry.token = 0;
            existing.countdown_s = entry.countdown_s;
            existing.due_local_s = entry.due_local_s;
            return Ok(());
        }
        if self.queue.len() >= self.config.queue_capacity {
            return Err(NodeError::QueueOverflow {
                capacity: self.config.queue_capacity,
            });
        }
        self.queue.push(entry);
        Ok(())
    }

    fn sort_queue(&mut self) {
        self.queue
            .sort_by(|a, b| a.due_local_s.total_cmp(&b.due_local_s).then(a.ranging_id.cmp(&b.ranging_id)));
    }

    /// Adds point-to-point tasks counted from local time `base_local_s`.
    pub fn enqueue_instruction(&mut self, base_local_s: f64, batch: &RangingBatch) -> Result<(), NodeError> {
        for e in &batch.entries {
            let countdown_s = f64::from(e.countdown_ms) / 1000.0;
            self.insert(TaskQueueEntry {
                kind: TaskKind::Ptp {
                    role: e.mode,
                    partner: e.partner,
                },
                countdown_s,
                ranging_id: e.ranging_id,
                due_local_s: base_local_s + countdown_s,
                token: 0,
            })?;
        }
        self.sort_queue();
        Ok(())
    }

    pub fn enqueue_passive(&mut self, base_local_s: f64, batch: &PassiveBatch) -> Result<(), NodeError> {
        for e in &batch.entries {
            let countdown_s = f64::from(e.countdown_ms) / 1000.0;
            self.insert(TaskQueueEntry {
                kind: TaskKind::Passive {
                    master: e.master,
                    slave: e.slave,
                },
                countdown_s,
                ranging_id: e.ranging_id,
                due_local_s: base_local_s + countdown_s,
                token: 0,
            })?;
        }
        self.sort_queue();
        Ok(())
    }

    /// Gives every queued task a fresh timer token and schedules it.
    fn rearm_tasks(&mut self, local: f64, out: &mut Vec<NodeAction>) {
        for i in 0..self.queue.len() {
            let token = self.next_token;
            self.next_token += 1;
            self.queue[i].token = token;
            let wake = self.queue[i].wake_local_s();
            if wake < local {
                out.push(NodeAction::Log(format!(
                    "task {:#010x} due {:.3} s ago, running now",
                    self.queue[i].ranging_id,
                    local - wake
                )));
            }
            out.push(self.schedule(wake.max(local), NodeTimer::Task { token }));
        }
    }

    fn on_task(&mut self, now: f64, local: f64, token: u64, out: &mut Vec<NodeAction>) {
        let Some(idx) = self.queue.iter().position(|e| e.token == token) else {
            return;
        };
        let entry = self.queue.remove(idx);
        if self.phase != Phase::Sleeping {
            out.push(NodeAction::Log(format!(
                "task {:#010x} skipped, radio busy ({:?})",
                entry.ranging_id, self.phase
            )));
            return;
        }
        let me = self.config.node_id;
        let hold_s = SLAVE_HOLD_S;
        match entry.kind {
            TaskKind::Ptp {
                role: RangingRole::Master,
                partner,
            } => {
                self.phase = Phase::Ranging;
                self.active = Some((entry.ranging_id, entry.kind));
                let repeats = self.config.ranging_repeats;
                let scale = f64::from(repeats) / f64::from(PTP_RANGING_REPEATS);
                let profile = PTP_RANGING.scaled(PTP_RANGING.duration_s * scale);
                self.spend(now, &profile, out);
                if self.is_dead() {
                    return;
                }
                out.push(NodeAction::InitiateRanging {
                    partner,
                    ranging_id: entry.ranging_id,
                    repeats,
                });
            }
            TaskKind::Ptp {
                role: RangingRole::Slave,
                partner,
            } => {
                self.settle_idle(now, out);
                self.phase = Phase::Ranging;
                self.active = Some((entry.ranging_id, entry.kind));
                out.push(NodeAction::OpenRangingWindow {
                    ranging_id: entry.ranging_id,
                    master: partner,
                    slave: me,
                    passive: false,
                    hold_s,
                });
            }
            TaskKind::Passive { master, slave } => {
                self.settle_idle(now, out);
                self.phase = Phase::Ranging;
                self.active = Some((entry.ranging_id, entry.kind));
                out.push(NodeAction::OpenRangingWindow {
                    ranging_id: entry.ranging_id,
                    master,
                    slave,
                    passive: true,
                    hold_s,
                });
            }
        }
        let _ = local;
    }

    fn take_active(&mut self, ranging_id: u32) -> Option<TaskKind> {
        match self.active {
            Some((id, kind)) if id == ranging_id => {
                self.active = None;
                Some(kind)
            }
            _ => None,
        }
    }

    fn on_master_done(&mut self, ranging_id: u32, m: Option<MasterMeasurement>, out: &mut Vec<NodeAction>) {
        let Some(TaskKind::Ptp { partner, .. }) = self.take_active(ranging_id) else {
            return;
        };
        let Some(m) = m else {
            out.push(NodeAction::Log(format!("ranging {ranging_id:#010x}: partner {partner} silent")));
            self.phase = Phase::Sleeping;
            return;
        };
        let data = RangingResultPayload {
            ranging_id,
            slave: partner,
            distance_m: m.distance_m,
            raw_distance_m: m.raw_distance_m,
            rssi_dbm: m.rssi_dbm,
            repeats: m.repeats,
        }
        .encode();
        self.phase = Phase::Reporting;
        out.push(NodeAction::Transmit(self.frame(Opcode::RangingResult, data)));
    }

    fn on_window_closed(
        &mut self,
        now: f64,
        local: f64,
        ranging_id: u32,
        listened_s: f64,
        delta_t_s: Option<f64>,
        out: &mut Vec<NodeAction>,
    ) {
        let Some(kind) = self.take_active(ranging_id) else {
            return;
        };
        let start = now - listened_s;
        let profile = ActivityProfile {
            name: Cow::Borrowed("ranging_listen"),
            avg_current_a: RX_CURRENT_A,
            duration_s: listened_s,
        };
        self.spend(start, &profile, out);
        if self.is_dead() {
            return;
        }
        self.phase = Phase::Sleeping;
        if let (Some(dt), TaskKind::Passive { master, slave }) = (delta_t_s, kind) {
            let token = self.next_token;
            self.next_token += 1;
            let (lo, hi) = self.config.passive_stagger_s;
            let delay = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
            self.pending_reports.push((
                token,
                PassiveResultPayload {
                    ranging_id,
                    master,
                    slave,
                    delta_t_s: dt,
                },
            ));
            out.push(self.schedule(local + delay, NodeTimer::Report { token }));
        }
    }

    fn on_report(&mut self, now: f64, token: u64, out: &mut Vec<NodeAction>) {
        let Some(idx) = self.pending_reports.iter().position(|r| r.0 == token) else {
            return;
        };
        let (_, payload) = self.pending_reports.remove(idx);
        if self.phase != Phase::Sleeping {
            out.push(NodeAction::Log("passive report dropped, radio busy".into()));
            return;
        }
        let frame = self.frame(Opcode::PassiveRangingResult, payload.encode());
        let airtime = frame
            .encode()
            .ok()
            .and_then(|b| self.config.comm.airtime(b.len(), true).ok())
            .unwrap_or(0.0);
        let profile = ActivityProfile {
            name: Cow::Borrowed("result_tx"),
            avg_current_a: TX_CURRENT_A,
            duration_s: airtime,
        };
        self.spend(now, &profile, out);
        if self.is_dead() {
            return;
        }
        self.phase = Phase::Reporting;
        out.push(NodeAction::Transmit(frame));
    }
}
