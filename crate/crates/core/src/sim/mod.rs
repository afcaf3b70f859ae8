//! Discrete-event simulation of nodes, one gateway, the server and the radio
//! medium. Runs are single threaded and a pure function of the scenario.

pub mod channel;
pub mod event;
pub mod output;
pub mod scenario;

use crate::clock::LocalClock;
use crate::energy::TraceRow;
use crate::gateway::{GatewayAction, GatewayConfig, GatewayError, GatewayState};
use crate::geo::EnuFrame;
use crate::node::{NodeAction, NodeConfig, NodeEvent, NodeRole, NodeState, NodeTimer, SLAVE_GUARD_S};
use crate::ranging::passive_delta_t;
use crate::server::bus::BusMessage;
use crate::server::store::{CheckLog, NodeRecord, ResultKind};
use crate::server::{NetServer, ServerAction, ServerConfig};
use crate::types::{CountdownMode, NodeId, OperatingMode, Position};
use channel::{exchange_duration, measure_exchange, measure_passive, ChannelModel, Medium};
use event::{Entity, EventKind, EventQueue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenario::{Band, RoleSpec, Scenario};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRow {
    pub time_s: f64,
    pub entity: String,
    pub kind: String,
    pub detail: String,
}

/// One ranging exchange as seen by the medium.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExchangeRow {
    pub start_s: f64,
    pub end_s: f64,
    pub ranging_id: String,
    pub master: NodeId,
    pub slave: NodeId,
    pub outcome: String,
    pub true_distance_m: f64,
    pub distance_m: Option<f64>,
    pub raw_distance_m: Option<f64>,
    pub listeners: usize,
}

/// A task starting on a node; `due_s` is the true time the node aimed for.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRow {
    pub due_s: f64,
    pub node: NodeId,
    pub ranging_id: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub ranging_id: String,
    pub kind: String,
    pub reporter: NodeId,
    pub master: NodeId,
    pub slave: NodeId,
    pub distance_m: Option<f64>,
    pub raw_distance_m: Option<f64>,
    pub delta_t_s: Option<f64>,
    /// Distance or time difference from the true positions.
    pub truth: f64,
    pub received_at_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocationRow {
    pub ranging_id: String,
    pub target_id: NodeId,
    pub x: f64,
    pub y: f64,
    /// Distance from the true position.
    pub rmse: f64,
    pub n_measurements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSummary {
    pub node: NodeId,
    pub interval_s: f64,
    pub battery_c: f64,
    pub checks: u64,
    pub consumed_mc: f64,
    pub voltage_proxy: f64,
    pub death_time_s: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct SimOutput {
    pub ended_at_s: f64,
    pub events: Vec<EventRow>,
    pub tasks: Vec<TaskRow>,
    pub exchanges: Vec<ExchangeRow>,
    pub results: Vec<ResultRow>,
    pub locations: Vec<LocationRow>,
    pub energy: BTreeMap<NodeId, Vec<TraceRow>>,
    pub nodes: Vec<NodeSummary>,
}

pub fn hex_id(id: u32) -> String {
    format!("{id:#010x}")
}

#[derive(Debug, Default)]
struct Radio {
    cad: Option<(f64, f64)>,
    rx: Option<RxWindow>,
}

#[derive(Debug)]
struct RxWindow {
    cad_start: f64,
    locked: Option<u64>,
}

#[derive(Debug)]
struct SimNode {
    state: NodeState,
    pos: Position,
    radio: Radio,
    checks: u64,
}

#[derive(Debug)]
struct Window {
    node: NodeId,
    ranging_id: u32,
    master: NodeId,
    slave: NodeId,
    passive: bool,
    open: f64,
    close: f64,
    session: Option<u64>,
}

#[derive(Debug)]
struct Session {
    master: NodeId,
    slave: NodeId,
    ranging_id: u32,
    start: f64,
    tx: u64,
    repeats: u8,
    failure: Option<&'static str>,
}

pub struct Simulation {
    sc: Scenario,
    now: f64,
    queue: EventQueue,
    nodes: BTreeMap<NodeId, SimNode>,
    gateway: GatewayState,
    pub server: NetServer,
    medium: Medium,
    rng: ChaCha8Rng,
    windows: Vec<Window>,
    sessions: BTreeMap<u64, Session>,
    next_session: u64,
    frame: EnuFrame,
    stop: bool,
    out: SimOutput,
}

impl Simulation {
    /// Builds the world. The scenario must already be validated.
    pub fn new(sc: Scenario) -> Self {
        let frame = EnuFrame::new(sc.origin);
        let mut gw_cfg = GatewayConfig::new(sc.gateway.id, sc.gateway.network_id);
        gw_cfg.alpha_s = sc.gateway.alpha_s;
        gw_cfg.comm = sc.radio.comm;
        gw_cfg.refresh_countdowns = sc.countdown == CountdownMode::Dynamic;
        let server_cfg = ServerConfig {
            network_id: sc.gateway.network_id,
            gateway_id: sc.gateway.id,
            lead_s: sc.server.lead_s,
            slot_s: sc.server.slot_s,
            default_interval_s: sc.server.default_interval_s,
            countdown_mode: sc.countdown,
            ..ServerConfig::default()
        };
        let mut server = NetServer::new(server_cfg, sc.seed ^ 0x5e57_e7e5);
        let mut queue = EventQueue::new();
        let mut nodes = BTreeMap::new();
        for spec in &sc.nodes {
            let anchor = (spec.role == RoleSpec::Anchor).then(|| frame.to_geo(spec.position.x, spec.position.y));
            let mut cfg = NodeConfig::new(spec.id, sc.gateway.network_id);
            cfg.check_interval_s = spec.interval_s;
            cfg.mode = spec.mode;
            cfg.role = anchor.map_or(NodeRole::Target, NodeRole::Anchor);
            cfg.clock_ppm = spec.ppm;
            cfg.countdown_mode = sc.countdown;
            cfg.comm = sc.radio.comm;
            cfg.alpha_s = sc.gateway.alpha_s;
            cfg.forced_retry_delays_s = spec.retry_delays_s.clone();
            cfg.ranging_repeats = spec.repeats;
            cfg.battery_capacity_c = spec.battery_c;
            let clock = LocalClock::new(spec.ppm, 0.0);
            let mut state = NodeState::new(cfg, clock, sc.seed).expect("validated scenario");
            if sc.trace_energy {
                state = state.with_trace();
            }
            let boot = state.boot(spec.first_check());
            for a in boot {
                if let NodeAction::Schedule { at_local_s, timer } = a {
                    let t = clock.true_time(LocalClock::quantize(at_local_s));
                    queue.push(t.max(0.0), Entity::Node(spec.id), EventKind::Timer(timer));
                }
            }
            if spec.registered {
                let mut rec = NodeRecord::new(spec.id, spec.interval_s, spec.mode);
                rec.anchor = anchor;
                server.register(rec);
                if let Some(t) = spec.last_check_s {
                    server.seed_log(CheckLog {
                        timestamp: t,
                        node_id: spec.id,
                        network_id: sc.gateway.network_id,
                        battery_mv: 3100,
                        rssi_dbm: None,
                    });
                }
            }
            nodes.insert(
                spec.id,
                SimNode {
                    state,
                    pos: spec.position,
                    radio: Radio::default(),
                    checks: 0,
                },
            );
        }
        for (index, c) in sc.commands.iter().enumerate() {
            queue.push(c.at_s, Entity::Server, EventKind::Command { index, repeat: 0 });
        }
        for (index, it) in sc.interferers.iter().enumerate() {
            queue.push(it.at_s, Entity::Interferer(index as u16), EventKind::Interference { index, repeat: 0 });
        }
        let rng = ChaCha8Rng::seed_from_u64(sc.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
        Self {
            gateway: GatewayState::new(gw_cfg),
            server,
            medium: Medium::new(),
            rng,
            windows: Vec::new(),
            sessions: BTreeMap::new(),
            next_session: 0,
            frame,
            stop: false,
            out: SimOutput::default(),
            now: 0.0,
            queue,
            nodes,
            sc,
        }
    }

    fn channel(&self) -> &ChannelModel {
        &self.sc.channel
    }

    fn log(&mut self, entity: Entity, kind: &str, detail: impl Into<String>) {
        self.out.events.push(EventRow {
            time_s: self.now,
            entity: entity.to_string(),
            kind: kind.to_string(),
            detail: detail.into(),
        });
    }

    fn bus_delay(&mut self) -> f64 {
        let c = &self.sc.channel;
        let (lat, jit) = (c.bus_latency_s, c.bus_jitter_s);
        if jit > 0.0 {
            lat + self.rng.random_range(-jit..=jit)
        } else {
            lat
        }
    }

    fn publish(&mut self, to: Entity, msg: BusMessage) {
        let at = self.now + self.bus_delay();
        self.queue.push(at, to, EventKind::BusDelivery(msg));
    }

    /// Runs to the horizon (or first death when asked) and returns all records.
    pub fn run(mut self) -> SimOutput {
        let horizon = self.sc.horizon_s;
        let mut processed = 0u64;
        while let Some(ev) = self.queue.pop() {
            if ev.time_s > horizon {
                break;
            }
            self.now = ev.time_s;
            self.dispatch(ev.target, ev.kind);
            processed += 1;
            if processed.is_multiple_of(256) {
                self.medium.prune(self.now - 10.0);
            }
            if self.stop {
                break;
            }
        }
        let end = if self.stop { self.now } else { horizon };
        self.finish(end)
    }

    fn dispatch(&mut self, target: Entity, kind: EventKind) {
        match (target, kind) {
            (Entity::Node(id), kind) => self.node_event(id, kind),
            (Entity::Gateway, EventKind::BusDelivery(msg)) => self.gateway_reply(msg),
            (Entity::Gateway, EventKind::GatewaySend { node }) => self.gateway_send(node),
            (Entity::Gateway, EventKind::TxEnd { tx }) => {
                let detail = format!("tx={tx}");
                self.log(Entity::Gateway, "tx_end", detail);
            }
            (Entity::Server, EventKind::BusDelivery(msg)) => {
                self.log(Entity::Server, "bus_delivery", format!("topic={} node={}", msg.topic, msg.node_id));
                let acts = self.server.handle_bus(self.now, &msg);
                self.server_actions(acts);
            }
            (Entity::Server, EventKind::ServerTick) => {
                let acts = self.server.process_due(self.now);
                if !acts.is_empty() {
                    self.log(Entity::Server, "server_tick", "");
                }
                self.server_actions(acts);
            }
            (Entity::Server, EventKind::Command { index, repeat }) => self.command(index, repeat),
            (Entity::Interferer(i), EventKind::Interference { index, repeat }) => self.interference(i, index, repeat),
            (Entity::Interferer(i), EventKind::TxEnd { .. }) => self.log(Entity::Interferer(i), "tx_end", ""),
            (t, k) => self.log(t, "unhandled", k.label()),
        }
    }

    fn command(&mut self, index: usize, repeat: u32) {
        let c = self.sc.commands[index].clone();
        match self.server.command_line(self.now, &c.line) {
            Ok((ack, acts)) => {
                self.log(Entity::Server, "command", format!("{} -> {ack}", c.line));
                self.server_actions(acts);
            }
            Err(e) => self.log(Entity::Server, "command", format!("{} -> error: {e}", c.line)),
        }
        if repeat + 1 < c.count {
            let at = c.at_s + c.every_s.unwrap_or(0.0) * f64::from(repeat + 1);
            self.queue.push(at, Entity::Server, EventKind::Command { index, repeat: repeat + 1 });
        }
    }

    fn interference(&mut self, i: u16, index: usize, repeat: u32) {
        let it = self.sc.interferers[index].clone();
        let mut radio = match it.band {
            Band::Comm => self.sc.radio.comm,
            Band::Ranging => self.sc.radio.ranging,
        };
        radio.tx_power_dbm = it.power_dbm;
        let tx = self.medium.start(Entity::Interferer(i), it.position, &radio, self.now, it.duration_s, None);
        self.log(Entity::Interferer(i), "tx_start", format!("duration_s={}", it.duration_s));
        self.on_tx_start(tx);
        self.queue.push(self.now + it.duration_s, Entity::Interferer(i), EventKind::TxEnd { tx });
        if repeat + 1 < it.count {
            let at = it.at_s + it.every_s.unwrap_or(0.0) * f64::from(repeat + 1);
            self.queue.push(at, Entity::Interferer(i), EventKind::Interference { index, repeat: repeat + 1 });
        }
    }

    fn server_actions(&mut self, acts: Vec<ServerAction>) {
        for a in acts {
            match a {
                ServerAction::Publish(msg) => self.publish(Entity::Gateway, msg),
                ServerAction::WakeAt(t) => self.queue.push(t.max(self.now), Entity::Server, EventKind::ServerTick),
                ServerAction::Log(s) => self.log(Entity::Server, "log", s),
            }
        }
    }

    fn gateway_reply(&mut self, msg: BusMessage) {
        match self.gateway.on_server_reply(self.now, &msg) {
            Ok(acts) => {
                let detail = format!("node={} bytes={}", msg.node_id, msg.payload.len());
                self.log(Entity::Gateway, "bus_delivery", detail);
                self.gateway_actions(acts);
            }
            Err(e @ GatewayError::StaleReply { .. }) => {
                self.log(Entity::Gateway, "stale_reply", e.to_string());
                let requeue = self.gateway.requeue_message(self.now, &msg);
                self.publish(Entity::Server, requeue);
            }
            Err(e) => self.log(Entity::Gateway, "reply_dropped", e.to_string()),
        }
    }

    fn gateway_actions(&mut self, acts: Vec<GatewayAction>) {
        for a in acts {
            match a {
                GatewayAction::Publish(msg) => self.publish(Entity::Server, msg),
                GatewayAction::ScheduleSend { at, node_id } => {
                    self.queue.push(at.max(self.now), Entity::Gateway, EventKind::GatewaySend { node: node_id })
                }
            }
        }
    }

    fn gateway_send(&mut self, node: NodeId) {
        let Some(frame) = self.gateway.take_response(self.now, node) else {
            return;
        };
        let radio = self.sc.radio.comm;
        let airtime = radio.airtime(frame.encoded_len(), true).unwrap_or(0.0);
        self.log(Entity::Gateway, "tx_start", format!("to={node} opcode={} airtime_s={airtime:.6}", frame.opcode_name()));
        let tx = self
            .medium
            .start(Entity::Gateway, self.sc.gateway.position, &radio, self.now, airtime, Some(frame));
        self.on_tx_start(tx);
        self.queue.push(self.now + airtime, Entity::Gateway, EventKind::TxEnd { tx });
    }

    /// Lets receivers with an open window lock onto a new transmission.
    fn on_tx_start(&mut self, tx: u64) {
        let Some(t) = self.medium.get(tx).cloned() else { return };
        let model = self.sc.channel.clone();
        let mut locks = Vec::new();
        for (id, n) in self.nodes.iter_mut() {
            if t.src == Entity::Node(*id) || t.freq_hz != self.sc.radio.comm.freq_hz {
                continue;
            }
            if let Some(rx) = n.radio.rx.as_mut() {
                if rx.locked.is_none() && model.audible(model.rssi_dbm(t.power_dbm, t.pos.distance(&n.pos))) {
                    rx.locked = Some(tx);
                    locks.push(*id);
                }
            }
        }
        for id in locks {
            self.queue.push(t.end, Entity::Node(id), EventKind::RxComplete { tx });
        }
    }

    fn node_event(&mut self, id: NodeId, kind: EventKind) {
        let Some(n) = self.nodes.get(&id) else { return };
        if n.state.is_dead() {
            return;
        }
        let entity = Entity::Node(id);
        let ev = match kind {
            EventKind::Timer(t) => {
                if let NodeTimer::Check { attempt } = t {
                    if attempt == 0 {
                        self.nodes.get_mut(&id).unwrap().checks += 1;
                    }
                    self.log(entity, "timer", format!("check attempt={attempt}"));
                } else {
                    let detail = match t {
                        NodeTimer::Listen => "listen".to_string(),
                        NodeTimer::Task { token } => format!("task token={token}"),
                        NodeTimer::Report { token } => format!("report token={token}"),
                        NodeTimer::Check { .. } => unreachable!(),
                    };
                    self.log(entity, "timer", detail);
                }
                NodeEvent::Timer(t)
            }
            EventKind::TxEnd { tx } => {
                self.log(entity, "tx_end", format!("tx={tx}"));
                self.uplink_at_gateway(tx);
                NodeEvent::TxDone
            }
            EventKind::CadEnd => {
                let detected = self.cad_result(id);
                self.log(entity, "cad_result", if detected { "detected" } else { "clear" });
                NodeEvent::CadDone { detected }
            }
            EventKind::RxTimeout => {
                let n = self.nodes.get_mut(&id).unwrap();
                match &n.radio.rx {
                    Some(rx) if rx.locked.is_none() => {
                        n.radio.rx = None;
                        self.log(entity, "rx_complete", "timeout");
                        NodeEvent::RxDone(None)
                    }
                    _ => return,
                }
            }
            EventKind::RxComplete { tx } => {
                let frame = self.reception(id, tx);
                self.nodes.get_mut(&id).unwrap().radio.rx = None;
                let detail = match &frame {
                    Some(f) => format!("ok opcode={}", f.opcode_name()),
                    None => "lost".to_string(),
                };
                self.log(entity, "rx_complete", detail);
                NodeEvent::RxDone(frame)
            }
            EventKind::RangingEnd { session } => {
                self.finish_session(session);
                return;
            }
            EventKind::WindowTimeout { ranging_id } => {
                let Some(i) = self
                    .windows
                    .iter()
                    .position(|w| w.node == id && w.ranging_id == ranging_id && w.session.is_none())
                else {
                    return;
                };
                let w = self.windows.remove(i);
                self.log(entity, "window_timeout", format!("ranging_id={}", hex_id(ranging_id)));
                NodeEvent::WindowClosed {
                    ranging_id,
                    listened_s: self.now - w.open,
                    delta_t_s: None,
                }
            }
            other => {
                self.log(entity, "unhandled", other.label());
                return;
            }
        };
        self.step_node(id, ev);
    }

    fn step_node(&mut self, id: NodeId, ev: NodeEvent) {
        let now = self.now;
        let acts = self.nodes.get_mut(&id).unwrap().state.step(now, ev);
        self.node_actions(id, acts);
    }

    fn node_actions(&mut self, id: NodeId, acts: Vec<NodeAction>) {
        let entity = Entity::Node(id);
        for a in acts {
            match a {
                NodeAction::Transmit(frame) => {
                    let radio = self.sc.radio.comm;
                    let airtime = radio.airtime(frame.encoded_len(), true).unwrap_or(0.0);
                    self.log(entity, "tx_start", format!("opcode={} airtime_s={airtime:.6}", frame.opcode_name()));
                    let pos = self.nodes[&id].pos;
                    let tx = self.medium.start(entity, pos, &radio, self.now, airtime, Some(frame));
                    self.on_tx_start(tx);
                    self.queue.push(self.now + airtime, entity, EventKind::TxEnd { tx });
                }
                NodeAction::StartCad { duration_s } => {
                    let n = self.nodes.get_mut(&id).unwrap();
                    n.radio.cad = Some((self.now, self.now + duration_s));
                    self.queue.push(self.now + duration_s, entity, EventKind::CadEnd);
                }
                NodeAction::OpenRx { timeout_s } => self.open_rx(id, timeout_s),
                NodeAction::Schedule { at_local_s, timer } => {
                    let clock = self.nodes[&id].state.clock;
                    let t = clock.true_time(LocalClock::quantize(at_local_s)).max(self.now);
                    self.queue.push(t, entity, EventKind::Timer(timer));
                }
                NodeAction::InitiateRanging {
                    partner,
                    ranging_id,
                    repeats,
                } => self.start_session(id, partner, ranging_id, repeats),
                NodeAction::OpenRangingWindow {
                    ranging_id,
                    master,
                    slave,
                    passive,
                    hold_s,
                } => {
                    let rate = self.nodes[&id].state.clock.rate();
                    let role = if passive { "listener" } else { "slave" };
                    self.out.tasks.push(TaskRow {
                        due_s: self.now + SLAVE_GUARD_S / rate,
                        node: id,
                        ranging_id: hex_id(ranging_id),
                        role: role.into(),
                    });
                    self.log(entity, "task_start", format!("{role} ranging_id={} master={master} slave={slave}", hex_id(ranging_id)));
                    let close = self.now + hold_s / rate;
                    self.windows.push(Window {
                        node: id,
                        ranging_id,
                        master,
                        slave,
                        passive,
                        open: self.now,
                        close,
                        session: None,
                    });
                    self.queue.push(close, entity, EventKind::WindowTimeout { ranging_id });
                }
                NodeAction::Log(s) => self.log(entity, "log", s),
                NodeAction::Died => {
                    self.log(entity, "died", "");
                    if self.sc.stop_on_death {
                        self.stop = true;
                    }
                }
            }
        }
    }

    fn open_rx(&mut self, id: NodeId, timeout_s: f64) {
        let comm = self.sc.radio.comm;
        let model = self.sc.channel.clone();
        let n = self.nodes.get_mut(&id).unwrap();
        let cad_start = n.radio.cad.map_or(self.now, |c| c.0);
        // a frame whose preamble the CAD could have seen
        let candidate = self
            .medium
            .ongoing(self.now)
            .filter(|t| {
                t.src != Entity::Node(id)
                    && t.freq_hz == comm.freq_hz
                    && t.start >= cad_start - comm.preamble_duration()
                    && model.audible(model.rssi_dbm(t.power_dbm, t.pos.distance(&n.pos)))
            })
            .min_by(|a, b| a.start.total_cmp(&b.start).then(a.id.cmp(&b.id)))
            .map(|t| (t.id, t.end));
        n.radio.rx = Some(RxWindow {
            cad_start,
            locked: candidate.map(|c| c.0),
        });
        let entity = Entity::Node(id);
        if let Some((tx, end)) = candidate {
            self.queue.push(end, entity, EventKind::RxComplete { tx });
        }
        self.queue.push(self.now + timeout_s, entity, EventKind::RxTimeout);
    }

    fn cad_result(&mut self, id: NodeId) -> bool {
        let n = self.nodes.get_mut(&id).unwrap();
        let Some((start, end)) = n.radio.cad.take() else {
            return false;
        };
        let pos = n.pos;
        let model = &self.sc.channel;
        let seen = self.medium.cad_detect(
            Entity::Node(id),
            &pos,
            &self.sc.radio.comm,
            start,
            end,
            model.cad_min_symbols,
            model,
        );
        let fp = model.cad_false_positive;
        seen || (fp > 0.0 && self.rng.random::<f64>() < fp)
    }

    fn reception(&self, id: NodeId, tx: u64) -> Option<crate::frame::MacFrame> {
        let t = self.medium.get(tx)?;
        let n = &self.nodes[&id];
        let rx = n.radio.rx.as_ref()?;
        if rx.locked != Some(tx) || t.start < rx.cad_start - self.sc.radio.comm.preamble_duration() {
            return None;
        }
        let model = self.channel();
        if !model.audible(model.rssi_dbm(t.power_dbm, t.pos.distance(&n.pos))) {
            return None;
        }
        if self.medium.collided(t, Entity::Node(id), &n.pos, model) {
            return None;
        }
        t.frame.clone()
    }

    fn uplink_at_gateway(&mut self, tx: u64) {
        let Some(t) = self.medium.get(tx).cloned() else { return };
        let Some(frame) = t.frame.clone() else { return };
        let gw = self.sc.gateway.position;
        let model = self.sc.channel.clone();
        let rssi = model.rssi_dbm(t.power_dbm, t.pos.distance(&gw));
        let reason = if t.freq_hz != self.sc.radio.comm.freq_hz {
            Some("other channel")
        } else if !model.audible(rssi) {
            Some("below sensitivity")
        } else if self.medium.transmitting(Entity::Gateway, t.freq_hz, t.start, t.end) {
            Some("gateway transmitting")
        } else if self.medium.collided(&t, Entity::Gateway, &gw, &model) {
            Some("collision")
        } else {
            None
        };
        if let Some(r) = reason {
            self.log(Entity::Gateway, "rx_lost", format!("from={} {r}", frame.src_addr));
            return;
        }
        match self.gateway.on_node_frame(self.now, &frame, rssi) {
            Ok(acts) => {
                self.log(Entity::Gateway, "rx_complete", format!("from={} opcode={} rssi_dbm={rssi:.1}", frame.src_addr, frame.opcode_name()));
                self.gateway_actions(acts);
            }
            Err(e) => self.log(Entity::Gateway, "rx_rejected", e.to_string()),
        }
    }

    fn start_session(&mut self, master: NodeId, slave: NodeId, ranging_id: u32, repeats: u8) {
        let now = self.now;
        self.next_session += 1;
        let sid = self.next_session;
        self.out.tasks.push(TaskRow {
            due_s: now,
            node: master,
            ranging_id: hex_id(ranging_id),
            role: "master".into(),
        });
        let radio = self.sc.radio.ranging;
        let duration = exchange_duration(&radio, repeats);
        let mpos = self.nodes[&master].pos;
        let window = self.windows.iter().position(|w| {
            w.node == slave
                && w.ranging_id == ranging_id
                && !w.passive
                && w.master == master
                && w.session.is_none()
                && w.open <= now
                && now <= w.close
        });
        let slave_node = self.nodes.get(&slave);
        let always_on = slave_node
            .is_some_and(|n| n.state.config.mode == OperatingMode::AlwaysOn && n.state.is_idle());
        let mut failure = None;
        match (window, slave_node) {
            (_, None) => failure = Some("unknown slave"),
            (Some(i), Some(_)) => self.windows[i].session = Some(sid),
            (None, Some(_)) if always_on => {}
            (None, Some(_)) => failure = Some("slave not listening"),
        }
        if failure.is_none() {
            let spos = self.nodes[&slave].pos;
            let model = self.channel();
            if !model.audible(model.rssi_dbm(radio.tx_power_dbm, mpos.distance(&spos))) {
                failure = Some("out of range");
            }
        }
        for w in self.windows.iter_mut() {
            if w.passive
                && w.ranging_id == ranging_id
                && w.master == master
                && w.slave == slave
                && w.session.is_none()
                && w.open <= now
                && now <= w.close
            {
                w.session = Some(sid);
            }
        }
        let tx = self.medium.start(Entity::Node(master), mpos, &radio, now, duration, None);
        self.log(
            Entity::Node(master),
            "task_start",
            format!("master ranging_id={} slave={slave} repeats={repeats}", hex_id(ranging_id)),
        );
        self.sessions.insert(
            sid,
            Session {
                master,
                slave,
                ranging_id,
                start: now,
                tx,
                repeats,
                failure,
            },
        );
        self.queue.push(now + duration, Entity::Node(master), EventKind::RangingEnd { session: sid });
    }

    fn finish_session(&mut self, sid: u64) {
        let Some(s) = self.sessions.remove(&sid) else { return };
        let now = self.now;
        let radio = self.sc.radio.ranging;
        let model = self.sc.channel.clone();
        let mpos = self.nodes[&s.master].pos;
        let spos = self.nodes.get(&s.slave).map_or(mpos, |n| n.pos);
        let mut failure = s.failure;
        if failure.is_none() {
            if self.nodes[&s.slave].state.is_dead() {
                failure = Some("slave dead");
            } else if let Some(t) = self.medium.get(s.tx) {
                if self.medium.collided(t, Entity::Node(s.slave), &spos, &model) {
                    failure = Some("collision");
                }
            }
        }
        let d = mpos.distance(&spos);
        let measurement = if failure.is_none() {
            let delta = (self.nodes[&s.master].state.config.clock_ppm - self.nodes[&s.slave].state.config.clock_ppm) * 1e-6;
            let rssi = model.rssi_dbm(radio.tx_power_dbm, d);
            measure_exchange(&radio, d, delta, model.timing_sigma_s(), s.repeats, rssi, &mut self.rng)
        } else {
            None
        };
        let engaged: Vec<Window> = {
            let (mine, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.windows).into_iter().partition(|w| w.session == Some(sid));
            self.windows = rest;
            mine
        };
        self.out.exchanges.push(ExchangeRow {
            start_s: s.start,
            end_s: now,
            ranging_id: hex_id(s.ranging_id),
            master: s.master,
            slave: s.slave,
            outcome: failure.unwrap_or(if measurement.is_some() { "ok" } else { "no valid repeat" }).to_string(),
            true_distance_m: d,
            distance_m: measurement.map(|m| m.distance_m),
            raw_distance_m: measurement.map(|m| m.raw_distance_m),
            listeners: engaged.iter().filter(|w| w.passive).count(),
        });
        self.log(
            Entity::Node(s.master),
            "ranging_end",
            format!(
                "ranging_id={} slave={} outcome={}",
                hex_id(s.ranging_id),
                s.slave,
                failure.unwrap_or("ok")
            ),
        );
        for w in engaged {
            let delta_t_s = if w.passive && measurement.is_some() {
                let lpos = self.nodes[&w.node].pos;
                let hears = |p: &Position| model.audible(model.rssi_dbm(radio.tx_power_dbm, p.distance(&lpos)));
                (hears(&mpos) && hears(&spos)).then(|| measure_passive(&mpos, &spos, &lpos, model.timing_sigma_s(), &mut self.rng))
            } else {
                None
            };
            self.step_node(
                w.node,
                NodeEvent::WindowClosed {
                    ranging_id: w.ranging_id,
                    listened_s: now - w.open,
                    delta_t_s,
                },
            );
        }
        self.step_node(
            s.master,
            NodeEvent::MasterDone {
                ranging_id: s.ranging_id,
                measurement,
            },
        );
    }

    fn finish(mut self, end: f64) -> SimOutput {
        self.now = end;
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in &ids {
            let mut acts = Vec::new();
            self.nodes.get_mut(id).unwrap().state.settle_idle(end, &mut acts);
            self.node_actions(*id, acts);
        }
        let positions: BTreeMap<NodeId, Position> = self.nodes.iter().map(|(k, n)| (*k, n.pos)).collect();
        let pos = |id: NodeId| positions.get(&id).copied().unwrap_or_default();
        for r in &self.server.store.results {
            let row = match r.result {
                ResultKind::Ptp {
                    master,
                    slave,
                    distance_m,
                    raw_distance_m,
                    ..
                } => ResultRow {
                    ranging_id: hex_id(r.ranging_id),
                    kind: "ptp".into(),
                    reporter: master,
                    master,
                    slave,
                    distance_m: Some(distance_m),
                    raw_distance_m: Some(raw_distance_m),
                    delta_t_s: None,
                    truth: pos(master).distance(&pos(slave)),
                    received_at_s: r.received_at,
                },
                ResultKind::Passive {
                    listener,
                    master,
                    slave,
                    delta_t_s,
                } => ResultRow {
                    ranging_id: hex_id(r.ranging_id),
                    kind: "passive".into(),
                    reporter: listener,
                    master,
                    slave,
                    distance_m: None,
                    raw_distance_m: None,
                    delta_t_s: Some(delta_t_s),
                    truth: passive_delta_t(&pos(master), &pos(slave), &pos(listener)),
                    received_at_s: r.received_at,
                },
            };
            self.out.results.push(row);
        }
        let issued: Vec<_> = self.server.store.issued.values().cloned().collect();
        for i in issued {
            match self.server.locate(i.target, Some(i.ranging_id)) {
                Ok(rep) => {
                    let (x, y) = self.frame.to_enu(rep.position);
                    let t = pos(i.target);
                    self.out.locations.push(LocationRow {
                        ranging_id: hex_id(i.ranging_id),
                        target_id: i.target,
                        x,
                        y,
                        rmse: (x - t.x).hypot(y - t.y),
                        n_measurements: rep.estimate.n_measurements,
                    });
                }
                Err(e) => {
                    let detail = format!("target={} ranging_id={}: {e}", i.target, hex_id(i.ranging_id));
                    self.log(Entity::Server, "locate_failed", detail);
                }
            }
        }
        for (id, n) in &self.nodes {
            let spec = self.sc.node(*id).expect("node from scenario");
            self.out.nodes.push(NodeSummary {
                node: *id,
                interval_s: spec.interval_s,
                battery_c: spec.battery_c,
                checks: n.checks,
                consumed_mc: n.state.battery.consumed_mc(),
                voltage_proxy: n.state.battery.voltage_proxy(),
                death_time_s: n.state.death_time_s(),
            });
            if self.sc.trace_energy {
                self.out.energy.insert(*id, n.state.battery.trace().to_vec());
            }
        }
        self.out.ended_at_s = end;
        self.out
    }
}

/// Validates and runs a scenario.
pub fn run(sc: Scenario) -> Result<SimOutput, scenario::ScenarioError> {
    sc.validate()?;
    Ok(Simulation::new(sc).run())
}
