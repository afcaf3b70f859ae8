//! Global event queue.

use crate::node::NodeTimer;
use crate::server::bus::BusMessage;
use crate::types::NodeId;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

/// Event owner. The derived order is the tie-break for simultaneous events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Entity {
    Server,
    Gateway,
    Node(NodeId),
    Interferer(u16),
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entity::Server => f.write_str("server"),
            Entity::Gateway => f.write_str("gateway"),
            Entity::Node(n) => write!(f, "node{n}"),
            Entity::Interferer(i) => write!(f, "interferer{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Timer(NodeTimer),
    TxEnd { tx: u64 },
    CadEnd,
    /// Receive window timeout for a node.
    RxTimeout,
    /// A locked-on frame finished.
    RxComplete { tx: u64 },
    GatewaySend { node: NodeId },
    BusDelivery(BusMessage),
    ServerTick,
    Command { index: usize, repeat: u32 },
    RangingEnd { session: u64 },
    WindowTimeout { ranging_id: u32 },
    Interference { index: usize, repeat: u32 },
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::Timer(_) => "timer",
            EventKind::TxEnd { .. } => "tx_end",
            EventKind::CadEnd => "cad_result",
            EventKind::RxTimeout => "rx_timeout",
            EventKind::RxComplete { .. } => "rx_complete",
            EventKind::GatewaySend { .. } => "gateway_send",
            EventKind::BusDelivery(_) => "bus_delivery",
            EventKind::ServerTick => "server_tick",
            EventKind::Command { .. } => "command",
            EventKind::RangingEnd { .. } => "ranging_end",
            EventKind::WindowTimeout { .. } => "window_timeout",
            EventKind::Interference { .. } => "interference",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub time_s: f64,
    pub target: Entity,
    pub seq: u64,
    pub kind: EventKind,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other
            .time_s
            .total_cmp(&self.time_s)
            .then_with(|| other.target.cmp(&self.target))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<SimEvent>,
    seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time_s: f64, target: Entity, kind: EventKind) {
        self.seq += 1;
        self.heap.push(SimEvent {
            time_s,
            target,
            seq: self.seq,
            kind,
        });
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop()
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time_s)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
