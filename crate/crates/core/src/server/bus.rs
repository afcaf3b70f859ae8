//! In-process topic bus between gateway and server.
//!
//! Every message carries the node's MAC frame bytes verbatim. An empty
//! payload on a downlink topic means "nothing for this node".

use crate::types::NodeId;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

pub const TOPIC_INSTRUCTION_CHECK: &str = "instruction-check";
pub const TOPIC_CONFIG_CHECK: &str = "config-check";
pub const TOPIC_RESULT: &str = "ResultTopic";
pub const TOPIC_REQUEUE: &str = "instruction-requeue";

pub fn downlink_topic(gateway_id: u16) -> String {
    format!("downlink/{gateway_id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusMessage {
    pub topic: String,
    pub published_at: f64,
    pub node_id: NodeId,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rssi_dbm: Option<f64>,
}

impl BusMessage {
    pub fn new(topic: impl Into<String>, published_at: f64, node_id: NodeId, payload: Vec<u8>) -> Self {
        Self {
            topic: topic.into(),
            published_at,
            node_id,
            payload,
            rssi_dbm: None,
        }
    }

    pub fn with_rssi(mut self, rssi_dbm: f64) -> Self {
        self.rssi_dbm = Some(rssi_dbm);
        self
    }
}

/// FIFO queue per topic.
#[derive(Debug, Default, Clone)]
pub struct Bus {
    queues: BTreeMap<String, VecDeque<BusMessage>>,
    published: u64,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&mut self, msg: BusMessage) {
        self.published += 1;
        self.queues.entry(msg.topic.clone()).or_default().push_back(msg);
    }

    pub fn pop(&mut self, topic: &str) -> Option<BusMessage> {
        self.queues.get_mut(topic)?.pop_front()
    }

    pub fn drain(&mut self, topic: &str) -> Vec<BusMessage> {
        self.queues.get_mut(topic).map(|q| q.drain(..).collect()).unwrap_or_default()
    }

    pub fn pending(&self, topic: &str) -> usize {
        self.queues.get(topic).map_or(0, VecDeque::len)
    }

    pub fn published_count(&self) -> u64 {
        self.published
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_per_topic() {
        let mut bus = Bus::new();
        bus.publish(BusMessage::new(TOPIC_RESULT, 1.0, 1, vec![1]));
        bus.publish(BusMessage::new(TOPIC_INSTRUCTION_CHECK, 2.0, 2, vec![2]));
        bus.publish(BusMessage::new(TOPIC_RESULT, 3.0, 3, vec![3]));
        assert_eq!(bus.pending(TOPIC_RESULT), 2);
        assert_eq!(bus.pop(TOPIC_RESULT).unwrap().node_id, 1);
        assert_eq!(bus.drain(TOPIC_RESULT)[0].node_id, 3);
        assert!(bus.pop(TOPIC_RESULT).is_none());
        assert_eq!(bus.published_count(), 3);
        assert_eq!(downlink_topic(7), "downlink/7");
    }

    #[test]
    fn json_envelope() {
        let m = BusMessage::new(TOPIC_RESULT, 1.5, 4, vec![0xab, 0x01]).with_rssi(-90.5);
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"payload\":\"ab01\""));
        assert_eq!(serde_json::from_str::<BusMessage>(&s).unwrap(), m);
    }
}
