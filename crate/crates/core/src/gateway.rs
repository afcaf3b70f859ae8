//! Gateway bridge between the radio side and the server bus.
//!
//! Uplinks are validated and published. The server's answer to an
//! instruction check is held until `alpha` after the uplink was received,
//! then transmitted. With dynamic countdowns the gateway subtracts the time
//! that passed since the server computed them, so the node receives the
//! remaining time at the moment the frame ends.

use crate::frame::payload::{
    CheckRequest, InstructionResponse, PassiveResultPayload, RangingResultPayload,
};
use crate::frame::{decode_mac, MacFrame, Opcode, RadioConfig};
use crate::server::bus::{
    downlink_topic, BusMessage, TOPIC_CONFIG_CHECK, TOPIC_INSTRUCTION_CHECK, TOPIC_REQUEUE,
    TOPIC_RESULT,
};
use crate::types::{NodeId, GATEWAY_ADDR};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GatewayError {
    #[error("validation failed for frame from {src:#06x}: {reason}")]
    ValidationFailure { src: NodeId, reason: String },
    #[error("reply for node {node} arrived {late_s:.3} s after its window")]
    StaleReply { node: NodeId, late_s: f64 },
    #[error("reply for node {0} without an outstanding check")]
    Uncorrelated(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub gateway_id: u16,
    pub network_id: u16,
    pub alpha_s: f64,
    pub refresh_countdowns: bool,
    pub comm: RadioConfig,
}

impl GatewayConfig {
    pub fn new(gateway_id: u16, network_id: u16) -> Self {
        Self {
            gateway_id,
            network_id,
            alpha_s: 1.0,
            refresh_countdowns: true,
            comm: RadioConfig::communication(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingResponse {
    pub node_id: NodeId,
    pub frame: MacFrame,
    pub send_at: f64,
    /// When the server computed the countdowns in `frame`.
    pub computed_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GatewayAction {
    Publish(BusMessage),
    ScheduleSend { at: f64, node_id: NodeId },
}

#[derive(Debug, Clone)]
pub struct GatewayState {
    pub config: GatewayConfig,
    /// Node -> time its reply must go out.
    outstanding: BTreeMap<NodeId, f64>,
    pub pending_responses: Vec<PendingResponse>,
}

impl GatewayState {
    pub fn new(config: GatewayConfig) -> Self {
        Self {
            config,
            outstanding: BTreeMap::new(),
            pending_responses: Vec::new(),
        }
    }

    pub fn downlink_topic(&self) -> String {
        downlink_topic(self.config.gateway_id)
    }

    pub fn on_node_frame(&mut self, now: f64, frame: &MacFrame, rssi_dbm: f64) -> Result<Vec<GatewayAction>, GatewayError> {
        let fail = |reason: String| GatewayError::ValidationFailure {
            src: frame.src_addr,
            reason,
        };
        if frame.network_id != self.config.network_id {
            return Err(fail(format!("network id {:#06x}", frame.network_id)));
        }
        if frame.dest_addr != GATEWAY_ADDR {
            return Err(fail(format!("destination {:#06x}", frame.dest_addr)));
        }
        let topic = match frame.opcode() {
            Some(Opcode::InstructionCheckRequest) => {
                CheckRequest::from_frame(frame).map_err(|e| fail(e.to_string()))?;
                self.outstanding.insert(frame.src_addr, now + self.config.alpha_s);
                TOPIC_INSTRUCTION_CHECK
            }
            Some(Opcode::ConfigCheckRequest) => {
                if !frame.data.is_empty() {
                    return Err(fail("config check carries data".into()));
                }
                self.outstanding.insert(frame.src_addr, now + self.config.alpha_s);
                TOPIC_CONFIG_CHECK
            }
            Some(Opcode::RangingResult) => {
                RangingResultPayload::decode(&frame.data).map_err(|e| fail(e.to_string()))?;
                TOPIC_RESULT
            }
            Some(Opcode::PassiveRangingResult) => {
                PassiveResultPayload::decode(&frame.data).map_err(|e| fail(e.to_string()))?;
                TOPIC_RESULT
            }
            other => return Err(fail(format!("unexpected uplink opcode {other:?}"))),
        };
        let bytes = frame.encode().map_err(|e| fail(e.to_string()))?;
        let msg = BusMessage::new(topic, now, frame.src_addr, bytes).with_rssi(rssi_dbm);
        Ok(vec![GatewayAction::Publish(msg)])
    }

    /// Handles a message from the gateway's downlink topic.
    pub fn on_server_reply(&mut self, now: f64, msg: &BusMessage) -> Result<Vec<GatewayAction>, GatewayError> {
        let node = msg.node_id;
        let Some(send_at) = self.outstanding.remove(&node) else {
            return Err(GatewayError::Uncorrelated(node));
        };
        if msg.payload.is_empty() {
            return Ok(Vec::new());
        }
        if now > send_at {
            return Err(GatewayError::StaleReply {
                node,
                late_s: now - send_at,
            });
        }
        let frame = decode_mac(&msg.payload).map_err(|e| GatewayError::ValidationFailure {
            src: node,
            reason: e.to_string(),
        })?;
        self.pending_responses.push(PendingResponse {
            node_id: node,
            frame,
            send_at,
            computed_at: msg.published_at,
        });
        Ok(vec![GatewayAction::ScheduleSend { at: send_at, node_id: node }])
    }

    /// Requeue message for a reply that missed its window.
    pub fn requeue_message(&self, now: f64, msg: &BusMessage) -> BusMessage {
        BusMessage::new(TOPIC_REQUEUE, now, msg.node_id, msg.payload.clone())
    }

    /// Pops the response due for `node_id` and refreshes its countdowns.
    pub fn take_response(&mut self, now: f64, node_id: NodeId) -> Option<MacFrame> {
        let idx = self.pending_responses.iter().position(|p| p.node_id == node_id)?;
        let p = self.pending_responses.remove(idx);
        let mut frame = p.frame;
        if self.config.refresh_countdowns && frame.opcode() == Some(Opcode::InstructionResponse) {
            if let Ok(mut resp) = InstructionResponse::from_frame(&frame) {
                let len = frame.encoded_len();
                let airtime = self.config.comm.airtime(len, true).unwrap_or(0.0);
                let elapsed_ms = ((now + airtime - p.computed_at) * 1000.0).round().max(0.0) as u32;
                resp.map_countdowns(|c| c.saturating_sub(elapsed_ms));
                if let Ok(data) = resp.encode() {
                    frame.data = data;
                }
            }
        }
        Some(frame)
    }

    pub fn has_outstanding(&self, node: NodeId) -> bool {
        self.outstanding.contains_key(&node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::payload::{RangingBatch, RangingEntry, Section};
    use crate::types::RangingRole;

    fn gw() -> GatewayState {
        GatewayState::new(GatewayConfig::new(1, 0x10))
    }

    fn check(src: NodeId, net: u16) -> MacFrame {
        MacFrame::new(net, GATEWAY_ADDR, src, Opcode::InstructionCheckRequest, vec![0x0b, 0xb8])
    }

    fn response(node: NodeId, countdown_ms: u32) -> Vec<u8> {
        let resp = InstructionResponse {
            sections: vec![Section::Ranging(RangingBatch {
                entries: vec![RangingEntry {
                    mode: RangingRole::Master,
                    partner: 2,
                    countdown_ms,
                    ranging_id: 9,
                }],
            })],
        };
        MacFrame::new(0x10, node, GATEWAY_ADDR, Opcode::InstructionResponse, resp.encode().unwrap())
            .encode()
            .unwrap()
    }

    #[test]
    fn check_request_is_published() {
        let mut g = gw();
        let acts = g.on_node_frame(10.0, &check(5, 0x10), -80.0).unwrap();
        let GatewayAction::Publish(m) = &acts[0] else { panic!() };
        assert_eq!(m.topic, TOPIC_INSTRUCTION_CHECK);
        assert_eq!(m.published_at, 10.0);
        assert_eq!(m.rssi_dbm, Some(-80.0));
        assert_eq!(decode_mac(&m.payload).unwrap(), check(5, 0x10));
    }

    #[test]
    fn wrong_network_dropped() {
        let mut g = gw();
        let res = RangingResultPayload {
            ranging_id: 1,
            slave: 2,
            distance_m: 1.0,
            raw_distance_m: 1.0,
            rssi_dbm: -70.0,
            repeats: 10,
        };
        let f = MacFrame::new(0x11, GATEWAY_ADDR, 3, Opcode::RangingResult, res.encode());
        assert!(matches!(g.on_node_frame(0.0, &f, -70.0), Err(GatewayError::ValidationFailure { .. })));
        let f = MacFrame::new(0x10, GATEWAY_ADDR, 3, Opcode::RangingResult, res.encode());
        let acts = g.on_node_frame(0.0, &f, -70.0).unwrap();
        let GatewayAction::Publish(m) = &acts[0] else { panic!() };
        assert_eq!(m.topic, TOPIC_RESULT);
    }

    #[test]
    fn truncated_payload_dropped() {
        let mut g = gw();
        let f = MacFrame::new(0x10, GATEWAY_ADDR, 3, Opcode::InstructionCheckRequest, vec![1]);
        assert!(g.on_node_frame(0.0, &f, -70.0).is_err());
    }

    #[test]
    fn none_reply_sends_nothing() {
        let mut g = gw();
        g.on_node_frame(10.0, &check(5, 0x10), -80.0).unwrap();
        let acts = g.on_server_reply(10.2, &BusMessage::new(g.downlink_topic(), 10.1, 5, vec![])).unwrap();
        assert!(acts.is_empty());
        assert!(g.pending_responses.is_empty());
    }

    #[test]
    fn reply_sent_alpha_after_uplink() {
        let mut g = gw();
        g.on_node_frame(10.0, &check(5, 0x10), -80.0).unwrap();
        let msg = BusMessage::new(g.downlink_topic(), 10.1, 5, response(5, 15_000));
        let acts = g.on_server_reply(10.2, &msg).unwrap();
        assert_eq!(acts, vec![GatewayAction::ScheduleSend { at: 11.0, node_id: 5 }]);
        let f = g.take_response(11.0, 5).unwrap();
        let airtime = g.config.comm.airtime(f.encoded_len(), true).unwrap();
        let resp = InstructionResponse::from_frame(&f).unwrap();
        let Section::Ranging(b) = &resp.sections[0] else { panic!() };
        let expected = 15_000 - ((0.9 + airtime) * 1000.0).round() as u32;
        assert_eq!(b.entries[0].countdown_ms, expected);
    }

    #[test]
    fn static_offsets_pass_verbatim() {
        let mut g = gw();
        g.config.refresh_countdowns = false;
        g.on_node_frame(10.0, &check(5, 0x10), -80.0).unwrap();
        let payload = response(5, 15_000);
        g.on_server_reply(10.2, &BusMessage::new(g.downlink_topic(), 10.1, 5, payload.clone())).unwrap();
        assert_eq!(g.take_response(11.0, 5).unwrap().encode().unwrap(), payload);
    }

    #[test]
    fn late_reply_is_stale() {
        let mut g = gw();
        g.on_node_frame(10.0, &check(5, 0x10), -80.0).unwrap();
        let msg = BusMessage::new(g.downlink_topic(), 10.9, 5, response(5, 1000));
        assert!(matches!(g.on_server_reply(11.5, &msg), Err(GatewayError::StaleReply { node: 5, .. })));
        assert_eq!(g.requeue_message(11.5, &msg).topic, TOPIC_REQUEUE);
    }
}
