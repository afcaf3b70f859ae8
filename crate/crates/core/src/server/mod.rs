//! Network server: check handling, task scheduling, result ingestion and
//! the user command surface.
//!
//! Tasks are stored with an absolute `due_at` in server time. Every check
//! from a node delivers all of its tasks that are still in the future, with
//! the countdown recomputed for that delivery. A task that reaches its due
//! time without having been delivered to every participant is moved to the
//! next common wake of the pair.

pub mod bus;
pub mod command;
pub mod store;

use crate::frame::payload::{
    CheckRequest, ConfigUpdate, InstructionResponse, PassiveBatch, PassiveEntry,
    PassiveResultPayload, RangingBatch, RangingEntry, RangingResultPayload, Section, countdown_to_ms,
};
use crate::frame::{decode_mac, MacFrame, Opcode};
use crate::geo::EnuFrame;
use crate::localization::{batch_locate, Anchor, LocalizationError, PositionEstimate};
use crate::types::{CountdownMode, GeoPoint, NodeId, OperatingMode, RangingRole, GATEWAY_ADDR};
use bus::{BusMessage, TOPIC_CONFIG_CHECK, TOPIC_INSTRUCTION_CHECK, TOPIC_REQUEUE, TOPIC_RESULT};
use command::Command;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;
use store::{
    CheckLog, ConfigChange, IssuedId, Journal, NodeRecord, Op, PendingTask, ResultKind,
    ResultRecord, Store, TaskSpec,
};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ServerError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("cannot schedule pair ({0}, {1}): no check history")]
    UnschedulablePair(NodeId, NodeId),
    #[error("no scheduled exchange {0} -> {1}")]
    NoSuchExchange(NodeId, NodeId),
    #[error("duplicate result for ranging id {0:#010x}")]
    DuplicateResult(u32),
    #[error("bad command: {0}")]
    BadCommand(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("{0}")]
    Localization(#[from] LocalizationError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub network_id: u16,
    pub gateway_id: u16,
    /// Minimum time between the last participant's predicted wake and the exchange.
    pub lead_s: f64,
    /// Step used to stagger exchanges and to move off conflicts.
    pub slot_s: f64,
    pub default_interval_s: f64,
    pub default_mode: OperatingMode,
    pub countdown_mode: CountdownMode,
    /// Time a node is busy around a predicted check.
    pub check_busy_s: (f64, f64),
    /// Time a participant is busy around an exchange.
    pub exchange_busy_s: (f64, f64),
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            network_id: 1,
            gateway_id: 1,
            lead_s: 5.0,
            slot_s: 1.0,
            default_interval_s: 600.0,
            default_mode: OperatingMode::LowPower,
            countdown_mode: CountdownMode::Dynamic,
            check_busy_s: (0.5, 2.0),
            exchange_busy_s: (0.2, 0.6),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerAction {
    Publish(BusMessage),
    /// Ask to be ticked at this time.
    WakeAt(f64),
    Log(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledPair {
    pub master: NodeId,
    pub slave: NodeId,
    pub due_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ack {
    Scheduled {
        ranging_id: u32,
        pairs: Vec<ScheduledPair>,
        listeners: Vec<NodeId>,
    },
    ConfigQueued {
        node: NodeId,
    },
    Status(StatusReport),
    Location(LocationReport),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatusReport {
    pub node: NodeId,
    pub mode: OperatingMode,
    pub check_interval_s: f64,
    pub last_check: Option<CheckLog>,
    pub pending_tasks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationReport {
    pub target: NodeId,
    pub ranging_id: u32,
    pub position: GeoPoint,
    pub estimate: PositionEstimate,
}

impl fmt::Display for Ack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ack::Scheduled {
                ranging_id,
                pairs,
                listeners,
            } => {
                write!(f, "scheduled ranging_id={ranging_id:#010x}")?;
                for p in pairs {
                    write!(f, " {}->{}@{:.3}", p.master, p.slave, p.due_at)?;
                }
                if !listeners.is_empty() {
                    let l: Vec<_> = listeners.iter().map(ToString::to_string).collect();
                    write!(f, " passive={}", l.join(","))?;
                }
                Ok(())
            }
            Ack::ConfigQueued { node } => write!(f, "config queued node={node}"),
            Ack::Status(s) => {
                write!(
                    f,
                    "status node={} mode={} interval_s={} pending_tasks={}",
                    s.node, s.mode, s.check_interval_s, s.pending_tasks
                )?;
                match &s.last_check {
                    Some(l) => {
                        write!(f, " last_check={:.3} battery_mv={}", l.timestamp, l.battery_mv)?;
                        match l.rssi_dbm {
                            Some(r) => write!(f, " rssi_dbm={r:.1}"),
                            None => Ok(()),
                        }
                    }
                    None => write!(f, " last_check=none"),
                }
            }
            Ack::Location(l) => write!(
                f,
                "location target={} ranging_id={:#010x} lat={:.7} lon={:.7} n_measurements={}",
                l.target, l.ranging_id, l.position.lat, l.position.lon, l.estimate.n_measurements
            ),
        }
    }
}

#[derive(Debug)]
pub struct NetServer {
    pub config: ServerConfig,
    pub store: Store,
    seed: u64,
    rng: ChaCha8Rng,
    journal: Option<Journal>,
}

impl NetServer {
    pub fn new(config: ServerConfig, seed: u64) -> Self {
        let mut store = Store::new();
        store.rng = Some((seed, 0));
        Self {
            config,
            store,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            journal: None,
        }
    }

    /// Rebuilds a server from a snapshot (and optional journal).
    pub fn restore(config: ServerConfig, snapshot: &Path, journal: Option<&Path>) -> std::io::Result<Self> {
        let store = Store::restore(snapshot, journal)?;
        let (seed, word_pos) = store.rng.unwrap_or((0, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(u128::from(word_pos));
        Ok(Self {
            config,
            store,
            seed,
            rng,
            journal: None,
        })
    }

    pub fn attach_journal(&mut self, journal: Journal) {
        self.journal = Some(journal);
    }

    pub fn snapshot(&mut self, path: &Path) -> std::io::Result<()> {
        self.store.rng = Some((self.seed, self.rng.get_word_pos() as u64));
        self.store.write_snapshot(path)
    }

    fn record(&mut self, op: Op) {
        if let Some(j) = self.journal.as_mut() {
            if let Err(e) = j.append(&op) {
                log::warn!("journal write failed: {e}");
            }
        }
        self.store.apply(op);
    }

    fn save_node(&mut self, node: NodeId) {
        if let Some(r) = self.store.nodes.get(&node).cloned() {
            self.record(Op::Node(r));
        }
    }

    pub fn register(&mut self, record: NodeRecord) {
        self.record(Op::Node(record));
    }

    /// Adds a check log without going through the bus (history seeding).
    pub fn seed_log(&mut self, log: CheckLog) {
        self.record(Op::Log(log));
    }

    fn node(&self, id: NodeId) -> Result<&NodeRecord, ServerError> {
        self.store.nodes.get(&id).ok_or(ServerError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut NodeRecord, ServerError> {
        self.store.nodes.get_mut(&id).ok_or(ServerError::UnknownNode(id))
    }

    /// Predicted wake at or after `now`: last check plus whole intervals.
    pub fn predicted_next_wake(&self, node: NodeId, now: f64) -> Option<f64> {
        let rec = self.store.nodes.get(&node)?;
        let last = self.store.last_log(node)?.timestamp;
        let iv = rec.check_interval_s;
        let k = ((now - last) / iv).ceil().max(1.0);
        Some(last + k * iv)
    }

    fn conflicts(&self, node: NodeId, t: f64, now: f64) -> bool {
        let (before, after) = self.config.check_busy_s;
        if let (Some(rec), Some(first)) = (self.store.nodes.get(&node), self.predicted_next_wake(node, now)) {
            let iv = rec.check_interval_s;
            // nearest predicted checks around t
            let k = ((t - first) / iv).floor();
            for kk in [k - 1.0, k, k + 1.0] {
                let w = first + kk.max(0.0) * iv;
                if t > w - before && t < w + after {
                    return true;
                }
            }
        }
        let (eb, ea) = self.config.exchange_busy_s;
        self.store.nodes.get(&node).is_some_and(|r| {
            r.pending_tasks
                .iter()
                .any(|p| !matches!(p.spec, TaskSpec::ConfigUpdate(_)) && t > p.due_at - eb - ea && t < p.due_at + eb + ea)
        })
    }

    /// First slot at or after `start` where no participant is busy.
    fn free_slot(&self, participants: &[NodeId], start: f64, now: f64) -> f64 {
        let mut t = start;
        for _ in 0..10_000 {
            if participants.iter().all(|n| !self.conflicts(*n, t, now)) {
                return t;
            }
            t += self.config.slot_s;
        }
        t
    }

    fn static_offset(&self, node: NodeId, due: f64, now: f64) -> f64 {
        self.predicted_next_wake(node, now).map_or(due - now, |w| due - w)
    }

    fn fresh_ranging_id(&mut self) -> u32 {
        loop {
            let id: u32 = self.rng.random();
            if id != 0 && !self.store.issued.contains_key(&id) {
                return id;
            }
        }
    }

    fn add_task(&mut self, node: NodeId, spec: TaskSpec, due_at: f64, ranging_id: u32, now: f64) {
        let static_offset_s = self.static_offset(node, due_at, now);
        if let Some(r) = self.store.nodes.get_mut(&node) {
            r.pending_tasks.push(PendingTask {
                spec,
                due_at,
                ranging_id,
                static_offset_s,
                delivered: false,
            });
            r.sort_tasks();
        }
        self.save_node(node);
    }

    /// Schedules point-to-point exchanges sharing one fresh ranging id.
    pub fn schedule_ptp_batch(&mut self, now: f64, pairs: &[(NodeId, NodeId)]) -> Result<(u32, Vec<ScheduledPair>), ServerError> {
        self.schedule_batch(now, pairs, &[])
    }

    /// Like `schedule_ptp_batch`, but the first slot also waits for the
    /// listeners' next check so they can be told in time.
    pub fn schedule_batch(
        &mut self,
        now: f64,
        pairs: &[(NodeId, NodeId)],
        listeners: &[NodeId],
    ) -> Result<(u32, Vec<ScheduledPair>), ServerError> {
        let mut base = f64::NEG_INFINITY;
        for &l in listeners {
            if let Some(w) = self.predicted_next_wake(l, now) {
                base = base.max(w);
            }
        }
        for &(m, s) in pairs {
            let wm = self.predicted_next_wake(m, now);
            let ws = self.predicted_next_wake(s, now);
            match (wm, ws) {
                (Some(a), Some(b)) => base = base.max(a.max(b)),
                _ => return Err(ServerError::UnschedulablePair(m, s)),
            }
        }
        let id = self.fresh_ranging_id();
        let mut out = Vec::new();
        let mut start = base + self.config.lead_s;
        for &(m, s) in pairs {
            let due = self.free_slot(&[m, s], start, now);
            self.add_task(m, TaskSpec::Ptp { role: RangingRole::Master, partner: s }, due, id, now);
            self.add_task(s, TaskSpec::Ptp { role: RangingRole::Slave, partner: m }, due, id, now);
            out.push(ScheduledPair { master: m, slave: s, due_at: due });
            start = due + self.config.slot_s;
        }
        Ok((id, out))
    }

    fn find_exchange(&self, master: NodeId, slave: NodeId) -> Option<(u32, f64)> {
        let rec = self.store.nodes.get(&master)?;
        rec.pending_tasks
            .iter()
            .filter(|p| p.spec == TaskSpec::Ptp { role: RangingRole::Master, partner: slave })
            .max_by(|a, b| a.due_at.total_cmp(&b.due_at))
            .map(|p| (p.ranging_id, p.due_at))
    }

    /// Attaches listeners to already scheduled exchanges.
    pub fn schedule_passive_batch(&mut self, now: f64, obs: &[(NodeId, NodeId, NodeId)]) -> Result<Vec<(u32, f64)>, ServerError> {
        let mut out = Vec::new();
        for &(l, m, s) in obs {
            self.node(l)?;
            let (id, due) = self.find_exchange(m, s).ok_or(ServerError::NoSuchExchange(m, s))?;
            let listener_has = self.store.nodes[&l]
                .pending_tasks
                .iter()
                .any(|p| p.ranging_id == id && p.spec == TaskSpec::Passive { master: m, slave: s });
            if !listener_has {
                self.add_task(l, TaskSpec::Passive { master: m, slave: s }, due, id, now);
            }
            out.push((id, due));
        }
        Ok(out)
    }

    fn config_for(&self, rec: &NodeRecord) -> ConfigUpdate {
        ConfigUpdate {
            mode: rec.mode,
            check_interval_s: rec.check_interval_s.round() as u32,
            anchor: rec.anchor,
        }
    }

    /// Current configuration of `node`; unknown nodes are created with defaults.
    pub fn handle_config_check(&mut self, node: NodeId) -> ConfigUpdate {
        if !self.store.nodes.contains_key(&node) {
            let mut r = NodeRecord::new(node, self.config.default_interval_s, self.config.default_mode);
            r.auto_registered = true;
            self.record(Op::Node(r));
        }
        let rec = self.store.nodes[&node].clone();
        self.config_for(&rec)
    }

    /// Logs the check and builds the node's instruction, if any.
    pub fn handle_instruction_check(&mut self, log: CheckLog) -> (Option<InstructionResponse>, Vec<ServerAction>) {
        let now = log.timestamp;
        let node = log.node_id;
        let mut actions = Vec::new();
        let mut sections = Vec::new();
        if !self.store.nodes.contains_key(&node) {
            let cfg = self.handle_config_check(node);
            actions.push(ServerAction::Log(format!("node {node} unknown, registered with defaults")));
            sections.push(Section::Config(cfg));
        }
        self.record(Op::Log(log));
        actions.extend(self.process_due(now));

        let mode = self.config.countdown_mode;
        let rec = self.store.nodes.get_mut(&node).expect("registered above");
        let mut ranging = Vec::new();
        let mut passive = Vec::new();
        let mut config_changes = Vec::new();
        for t in rec.pending_tasks.iter_mut() {
            if let TaskSpec::ConfigUpdate(c) = &t.spec {
                config_changes.push(c.clone());
                continue;
            }
            if t.due_at < now {
                continue;
            }
            let countdown_s = match mode {
                CountdownMode::Dynamic => t.due_at - now,
                CountdownMode::StaticOffset => t.static_offset_s,
            };
            let countdown_ms = countdown_to_ms(countdown_s);
            t.delivered = true;
            match t.spec {
                TaskSpec::Ptp { role, partner } => ranging.push(RangingEntry {
                    mode: role,
                    partner,
                    countdown_ms,
                    ranging_id: t.ranging_id,
                }),
                TaskSpec::Passive { master, slave } => passive.push(PassiveEntry {
                    master,
                    slave,
                    countdown_ms,
                    ranging_id: t.ranging_id,
                }),
                TaskSpec::ConfigUpdate(_) => {}
            }
        }
        rec.pending_tasks.retain(|t| !matches!(t.spec, TaskSpec::ConfigUpdate(_)));
        for c in config_changes {
            if let Some(iv) = c.check_interval_s {
                rec.check_interval_s = iv;
            }
            if let Some(m) = c.mode {
                rec.mode = m;
            }
            if let Some(a) = c.anchor {
                rec.anchor = Some(a);
            }
            if !sections.iter().any(|s| matches!(s, Section::Config(_))) {
                sections.push(Section::Config(ConfigUpdate {
                    mode: rec.mode,
                    check_interval_s: rec.check_interval_s.round() as u32,
                    anchor: rec.anchor,
                }));
            }
        }
        if !ranging.is_empty() {
            sections.push(Section::Ranging(RangingBatch { entries: ranging }));
        }
        if !passive.is_empty() {
            sections.push(Section::Passive(PassiveBatch { entries: passive }));
        }
        self.save_node(node);
        let resp = InstructionResponse { sections };
        (if resp.is_empty() { None } else { Some(resp) }, actions)
    }

    /// Retires executed tasks and moves missed ones. Call at or after due times.
    pub fn process_due(&mut self, now: f64) -> Vec<ServerAction> {
        let mut actions = Vec::new();
        // exchanges (ranging_id, master, slave) that reached their due time
        let mut due: Vec<(u32, NodeId, NodeId, bool)> = Vec::new();
        for (&id, rec) in &self.store.nodes {
            for t in &rec.pending_tasks {
                if t.due_at > now {
                    continue;
                }
                if let Some((m, s)) = t.exchange(id) {
                    // a listener that missed its task does not hold up the pair
                    let ok = t.delivered || matches!(t.spec, TaskSpec::Passive { .. });
                    match due.iter_mut().find(|d| d.0 == t.ranging_id && d.1 == m && d.2 == s) {
                        Some(d) => d.3 &= ok,
                        None => due.push((t.ranging_id, m, s, ok)),
                    }
                }
            }
        }
        for (id, m, s, all_delivered) in due {
            if all_delivered {
                for n in [m, s] {
                    if let Some(r) = self.store.nodes.get_mut(&n) {
                        r.pending_tasks.retain(|t| !(t.ranging_id == id && t.exchange(n) == Some((m, s)) && t.due_at <= now));
                    }
                }
                for n in self.store.nodes.keys().copied().collect::<Vec<_>>() {
                    if let Some(r) = self.store.nodes.get_mut(&n) {
                        let before = r.pending_tasks.len();
                        let mut missed = false;
                        r.pending_tasks.retain(|t| {
                            let hit = t.ranging_id == id && t.spec == TaskSpec::Passive { master: m, slave: s } && t.due_at <= now;
                            missed |= hit && !t.delivered;
                            !hit
                        });
                        if missed {
                            actions.push(ServerAction::Log(format!("listener {n} missed {m}->{s} ({id:#010x})")));
                        }
                        if r.pending_tasks.len() != before {
                            self.save_node(n);
                        }
                    }
                }
                continue;
            }
            let base = match (self.predicted_next_wake(m, now), self.predicted_next_wake(s, now)) {
                (Some(a), Some(b)) => a.max(b),
                _ => now,
            };
            let holders: Vec<NodeId> = self
                .store
                .nodes
                .iter()
                .filter(|(n, r)| r.pending_tasks.iter().any(|t| t.ranging_id == id && t.exchange(**n) == Some((m, s))))
                .map(|(n, _)| *n)
                .collect();
            // drop the stale copies first so they do not block the new slot
            for n in &holders {
                if let Some(r) = self.store.nodes.get_mut(n) {
                    for t in r.pending_tasks.iter_mut() {
                        if t.ranging_id == id && t.exchange(*n) == Some((m, s)) {
                            t.due_at = f64::NEG_INFINITY;
                        }
                    }
                }
            }
            let new_due = self.free_slot(&holders, base + self.config.lead_s, now);
            for n in &holders {
                let off = self.static_offset(*n, new_due, now);
                if let Some(r) = self.store.nodes.get_mut(n) {
                    for t in r.pending_tasks.iter_mut() {
                        if t.ranging_id == id && t.exchange(*n) == Some((m, s)) {
                            t.due_at = new_due;
                            t.delivered = false;
                            t.static_offset_s = off;
                        }
                    }
                    r.sort_tasks();
                }
                self.save_node(*n);
            }
            actions.push(ServerAction::Log(format!(
                "exchange {m}->{s} ({id:#010x}) missed, moved to {new_due:.3}"
            )));
            actions.push(ServerAction::WakeAt(new_due));
        }
        actions
    }

    /// Stores a result; returns the number of results held for its ranging id.
    pub fn ingest_result(&mut self, record: ResultRecord) -> Result<usize, ServerError> {
        let quarantine = |s: &mut Self, record: ResultRecord, reason: String| {
            log::warn!("result quarantined: {reason}");
            s.record(Op::Quarantine { record, reason });
        };
        if !self.store.issued.contains_key(&record.ranging_id) {
            let reason = format!("unknown ranging id {:#010x}", record.ranging_id);
            quarantine(self, record, reason);
            return Ok(0);
        }
        if let ResultKind::Ptp { distance_m, .. } = record.result {
            if distance_m < 0.0 || !distance_m.is_finite() {
                let id = record.ranging_id;
                quarantine(self, record, format!("negative distance {distance_m}"));
                return Ok(self.store.results_for(id).count());
            }
        }
        let key = record.dedup_key();
        if self.store.results.iter().any(|r| r.dedup_key() == key) {
            return Err(ServerError::DuplicateResult(record.ranging_id));
        }
        let id = record.ranging_id;
        self.record(Op::Result(record));
        Ok(self.store.results_for(id).count())
    }

    fn ingest_frame(&mut self, now: f64, msg: &BusMessage) -> Result<usize, ServerError> {
        let f = decode_mac(&msg.payload).map_err(|e| ServerError::Malformed(e.to_string()))?;
        let result = match f.opcode() {
            Some(Opcode::RangingResult) => {
                let p = RangingResultPayload::decode(&f.data).map_err(|e| ServerError::Malformed(e.to_string()))?;
                ResultRecord {
                    ranging_id: p.ranging_id,
                    result: ResultKind::Ptp {
                        master: f.src_addr,
                        slave: p.slave,
                        distance_m: p.distance_m,
                        raw_distance_m: p.raw_distance_m,
                        rssi_dbm: p.rssi_dbm,
                    },
                    received_at: now,
                }
            }
            Some(Opcode::PassiveRangingResult) => {
                let p = PassiveResultPayload::decode(&f.data).map_err(|e| ServerError::Malformed(e.to_string()))?;
                ResultRecord {
                    ranging_id: p.ranging_id,
                    result: ResultKind::Passive {
                        listener: f.src_addr,
                        master: p.master,
                        slave: p.slave,
                        delta_t_s: p.delta_t_s,
                    },
                    received_at: now,
                }
            }
            other => return Err(ServerError::Malformed(format!("result topic carried {other:?}"))),
        };
        self.ingest_result(result)
    }

    fn downlink(&self, now: f64, node: NodeId, frame: Option<MacFrame>) -> ServerAction {
        let payload = frame.and_then(|f| f.encode().ok()).unwrap_or_default();
        ServerAction::Publish(BusMessage::new(bus::downlink_topic(self.config.gateway_id), now, node, payload))
    }

    /// Entry point for everything arriving over the bus.
    pub fn handle_bus(&mut self, now: f64, msg: &BusMessage) -> Vec<ServerAction> {
        let mut actions = Vec::new();
        match msg.topic.as_str() {
            TOPIC_INSTRUCTION_CHECK => {
                let parsed = decode_mac(&msg.payload)
                    .map_err(|e| e.to_string())
                    .and_then(|f| CheckRequest::from_frame(&f).map(|c| (f, c)).map_err(|e| e.to_string()));
                let (f, check) = match parsed {
                    Ok(v) => v,
                    Err(e) => {
                        actions.push(ServerAction::Log(format!("bad check from {}: {e}", msg.node_id)));
                        return actions;
                    }
                };
                let log = CheckLog {
                    timestamp: now,
                    node_id: f.src_addr,
                    network_id: f.network_id,
                    battery_mv: check.battery_mv,
                    rssi_dbm: msg.rssi_dbm,
                };
                let (resp, acts) = self.handle_instruction_check(log);
                actions.extend(acts);
                let frame = resp.and_then(|r| r.encode().ok()).map(|data| {
                    MacFrame::new(f.network_id, f.src_addr, GATEWAY_ADDR, Opcode::InstructionResponse, data)
                });
                actions.push(self.downlink(now, f.src_addr, frame));
            }
            TOPIC_CONFIG_CHECK => {
                let cfg = self.handle_config_check(msg.node_id);
                let frame = MacFrame::new(self.config.network_id, msg.node_id, GATEWAY_ADDR, Opcode::ConfigUpdate, cfg.encode());
                actions.push(self.downlink(now, msg.node_id, Some(frame)));
            }
            TOPIC_RESULT => match self.ingest_frame(now, msg) {
                Ok(n) => actions.push(ServerAction::Log(format!("result from {} stored ({n} for id)", msg.node_id))),
                Err(e) => actions.push(ServerAction::Log(format!("result from {} ignored: {e}", msg.node_id))),
            },
            TOPIC_REQUEUE => {
                let node = msg.node_id;
                let mut n = 0;
                if let Some(r) = self.store.nodes.get_mut(&node) {
                    for t in r.pending_tasks.iter_mut().filter(|t| t.due_at > now) {
                        t.delivered = false;
                        n += 1;
                    }
                }
                self.save_node(node);
                actions.push(ServerAction::Log(format!("requeued {n} task(s) for node {node}")));
            }
            other => actions.push(ServerAction::Log(format!("ignored topic {other}"))),
        }
        actions
    }

    fn anchors_enu(&self, ids: impl Iterator<Item = NodeId>) -> Option<(EnuFrame, Vec<Anchor>)> {
        let geo: Vec<(NodeId, GeoPoint)> = ids
            .filter_map(|id| self.store.nodes.get(&id).and_then(|r| r.anchor.map(|a| (id, a))))
            .collect();
        let frame = EnuFrame::centroid(&geo.iter().map(|g| g.1).collect::<Vec<_>>())?;
        let anchors = geo
            .iter()
            .map(|(id, g)| {
                let (x, y) = frame.to_enu(*g);
                Anchor::new(*id, x, y)
            })
            .collect();
        Some((frame, anchors))
    }

    /// Estimates `target` from the results of one ranging id (the newest by default).
    pub fn locate(&self, target: NodeId, ranging_id: Option<u32>) -> Result<LocationReport, ServerError> {
        let id = match ranging_id {
            Some(id) => id,
            None => self
                .store
                .results
                .iter()
                .rev()
                .find(|r| matches!(r.result, ResultKind::Ptp { slave, master, .. } if slave == target || master == target))
                .map(|r| r.ranging_id)
                .ok_or(LocalizationError::InsufficientMeasurements { have: 0, need: 3 })?,
        };
        let results: Vec<&ResultRecord> = self.store.results_for(id).collect();
        let ids = results.iter().filter_map(|r| match r.result {
            ResultKind::Ptp { master, slave, .. } if slave == target => Some(master),
            ResultKind::Ptp { master, slave, .. } if master == target => Some(slave),
            _ => None,
        });
        let (frame, anchors) = self
            .anchors_enu(ids)
            .ok_or(LocalizationError::InsufficientMeasurements { have: 0, need: 3 })?;
        let estimate = batch_locate(&results, &anchors, target)?;
        Ok(LocationReport {
            target,
            ranging_id: id,
            position: frame.to_geo(estimate.x, estimate.y),
            estimate,
        })
    }

    pub fn user_api(&mut self, now: f64, cmd: Command) -> Result<(Ack, Vec<ServerAction>), ServerError> {
        let mut actions = Vec::new();
        let ack = match cmd {
            Command::RequestRanging {
                target,
                anchors,
                passive,
            } => {
                self.node(target)?;
                for a in anchors.iter().chain(&passive) {
                    self.node(*a)?;
                }
                let pairs: Vec<(NodeId, NodeId)> = anchors.iter().map(|a| (*a, target)).collect();
                let (ranging_id, scheduled) = self.schedule_batch(now, &pairs, &passive)?;
                let issued = IssuedId {
                    ranging_id,
                    target,
                    anchors: anchors.clone(),
                    created_at: now,
                };
                self.record(Op::Issued(issued));
                let obs: Vec<_> = passive
                    .iter()
                    .flat_map(|l| pairs.iter().map(move |(m, s)| (*l, *m, *s)))
                    .filter(|(l, m, s)| l != m && l != s)
                    .collect();
                self.schedule_passive_batch(now, &obs)?;
                for p in &scheduled {
                    actions.push(ServerAction::WakeAt(p.due_at));
                }
                Ack::Scheduled {
                    ranging_id,
                    pairs: scheduled,
                    listeners: passive,
                }
            }
            Command::RequestPassive { listener, master, slave } => {
                let r = self.schedule_passive_batch(now, &[(listener, master, slave)])?;
                Ack::Scheduled {
                    ranging_id: r[0].0,
                    pairs: vec![ScheduledPair { master, slave, due_at: r[0].1 }],
                    listeners: vec![listener],
                }
            }
            Command::UpdateConfig {
                node,
                interval_s,
                mode,
                anchor,
            } => {
                self.node_mut(node)?.pending_tasks.push(PendingTask {
                    spec: TaskSpec::ConfigUpdate(ConfigChange {
                        check_interval_s: interval_s,
                        mode,
                        anchor,
                    }),
                    due_at: now,
                    ranging_id: 0,
                    static_offset_s: 0.0,
                    delivered: false,
                });
                self.save_node(node);
                Ack::ConfigQueued { node }
            }
            Command::QueryStatus { node } => {
                let r = self.node(node)?;
                Ack::Status(StatusReport {
                    node,
                    mode: r.mode,
                    check_interval_s: r.check_interval_s,
                    last_check: self.store.last_log(node).cloned(),
                    pending_tasks: r.pending_tasks.len(),
                })
            }
            Command::QueryLocation { target, ranging_id } => Ack::Location(self.locate(target, ranging_id)?),
        };
        Ok((ack, actions))
    }

    pub fn command_line(&mut self, now: f64, line: &str) -> Result<(Ack, Vec<ServerAction>), ServerError> {
        let cmd: Command = line.parse().map_err(|e: command::BadCommand| ServerError::BadCommand(e.0))?;
        self.user_api(now, cmd)
    }
}
