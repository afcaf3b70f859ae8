//! Server records and their line-delimited JSON persistence.
//!
//! A snapshot is a file of [`Op`] records, one per line, that rebuilds the
//! store when replayed. A journal is the same format appended as changes
//! happen; restoring applies the snapshot and then the journal.

use crate::types::{GeoPoint, NodeId, OperatingMode, RangingRole};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub check_interval_s: f64,
    pub mode: OperatingMode,
    #[serde(default)]
    pub anchor: Option<GeoPoint>,
    #[serde(default)]
    pub pending_tasks: Vec<PendingTask>,
    /// Created on first contact with default settings.
    #[serde(default)]
    pub auto_registered: bool,
}

impl NodeRecord {
    pub fn new(node_id: NodeId, check_interval_s: f64, mode: OperatingMode) -> Self {
        Self {
            node_id,
            check_interval_s,
            mode,
            anchor: None,
            pending_tasks: Vec::new(),
            auto_registered: false,
        }
    }

    pub fn sort_tasks(&mut self) {
        self.pending_tasks
            .sort_by(|a, b| a.due_at.total_cmp(&b.due_at).then(a.ranging_id.cmp(&b.ranging_id)));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigChange {
    #[serde(default)]
    pub check_interval_s: Option<f64>,
    #[serde(default)]
    pub mode: Option<OperatingMode>,
    #[serde(default)]
    pub anchor: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Ptp { role: RangingRole, partner: NodeId },
    Passive { master: NodeId, slave: NodeId },
    ConfigUpdate(ConfigChange),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingTask {
    pub spec: TaskSpec,
    pub due_at: f64,
    pub ranging_id: u32,
    /// Offset from the predicted wake, fixed when the task was created.
    #[serde(default)]
    pub static_offset_s: f64,
    #[serde(default)]
    pub delivered: bool,
}

impl PendingTask {
    /// (master, slave) of the exchange this task belongs to, from `owner`'s view.
    pub fn exchange(&self, owner: NodeId) -> Option<(NodeId, NodeId)> {
        match self.spec {
            TaskSpec::Ptp {
                role: RangingRole::Master,
                partner,
            } => Some((owner, partner)),
            TaskSpec::Ptp {
                role: RangingRole::Slave,
                partner,
            } => Some((partner, owner)),
            TaskSpec::Passive { master, slave } => Some((master, slave)),
            TaskSpec::ConfigUpdate(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLog {
    pub timestamp: f64,
    pub node_id: NodeId,
    pub network_id: u16,
    pub battery_mv: u16,
    #[serde(default)]
    pub rssi_dbm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResultKind {
    Ptp {
        master: NodeId,
        slave: NodeId,
        distance_m: f64,
        raw_distance_m: f64,
        rssi_dbm: f64,
    },
    Passive {
        listener: NodeId,
        master: NodeId,
        slave: NodeId,
        delta_t_s: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub ranging_id: u32,
    pub result: ResultKind,
    pub received_at: f64,
}

impl ResultRecord {
    pub fn reporter(&self) -> NodeId {
        match self.result {
            ResultKind::Ptp { master, .. } => master,
            ResultKind::Passive { listener, .. } => listener,
        }
    }

    pub fn dedup_key(&self) -> (u32, NodeId, NodeId, NodeId) {
        match self.result {
            ResultKind::Ptp { master, slave, .. } => (self.ranging_id, master, master, slave),
            ResultKind::Passive {
                listener,
                master,
                slave,
                ..
            } => (self.ranging_id, listener, master, slave),
        }
    }
}

/// What a ranging id was issued for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssuedId {
    pub ranging_id: u32,
    pub target: NodeId,
    pub anchors: Vec<NodeId>,
    pub created_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Node(NodeRecord),
    Log(CheckLog),
    Result(ResultRecord),
    Quarantine { record: ResultRecord, reason: String },
    Issued(IssuedId),
    Rng { seed: u64, word_pos: u64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Store {
    pub nodes: BTreeMap<NodeId, NodeRecord>,
    pub logs: Vec<CheckLog>,
    pub results: Vec<ResultRecord>,
    pub quarantine: Vec<(ResultRecord, String)>,
    pub issued: BTreeMap<u32, IssuedId>,
    pub rng: Option<(u64, u64)>,
    last_log: BTreeMap<NodeId, usize>,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, op: Op) {
        match op {
            Op::Node(r) => {
                self.nodes.insert(r.node_id, r);
            }
            Op::Log(l) => {
                self.last_log.insert(l.node_id, self.logs.len());
                self.logs.push(l);
            }
            Op::Result(r) => self.results.push(r),
            Op::Quarantine { record, reason } => self.quarantine.push((record, reason)),
            Op::Issued(i) => {
                self.issued.insert(i.ranging_id, i);
            }
            Op::Rng { seed, word_pos } => self.rng = Some((seed, word_pos)),
        }
    }

    pub fn last_log(&self, node: NodeId) -> Option<&CheckLog> {
        self.last_log.get(&node).map(|&i| &self.logs[i])
    }

    pub fn results_for(&self, ranging_id: u32) -> impl Iterator<Item = &ResultRecord> {
        self.results.iter().filter(move |r| r.ranging_id == ranging_id)
    }

    /// Ops that rebuild this store.
    pub fn to_ops(&self) -> Vec<Op> {
        let mut ops: Vec<Op> = self.nodes.values().cloned().map(Op::Node).collect();
        ops.extend(self.logs.iter().cloned().map(Op::Log));
        ops.extend(self.issued.values().cloned().map(Op::Issued));
        ops.extend(self.results.iter().cloned().map(Op::Result));
        ops.extend(
            self.quarantine
                .iter()
                .cloned()
                .map(|(record, reason)| Op::Quarantine { record, reason }),
        );
        if let Some((seed, word_pos)) = self.rng {
            ops.push(Op::Rng { seed, word_pos });
        }
        ops
    }

    pub fn write_snapshot(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for op in self.to_ops() {
            serde_json::to_writer(&mut w, &op)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_ops(path: &Path) -> io::Result<Vec<Op>> {
        let r = BufReader::new(File::open(path)?);
        let mut ops = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let op = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            ops.push(op);
        }
        Ok(ops)
    }

    /// Loads a snapshot and, if given, replays a journal on top.
    pub fn restore(snapshot: &Path, journal: Option<&Path>) -> io::Result<Self> {
        let mut s = Self::new();
        for op in Self::read_ops(snapshot)? {
            s.apply(op);
        }
        if let Some(j) = journal.filter(|j| j.exists()) {
            for op in Self::read_ops(j)? {
                s.apply(op);
            }
        }
        Ok(s)
    }
}

/// Append-only op log.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Journal {
    pub fn open(path: impl Into<PathBuf>) -> io::Result<Self> {
        let path = path.into();
        let f = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
        })
    }

    pub fn append(&mut self, op: &Op) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, op)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
