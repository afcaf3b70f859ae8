//! User command lines: a verb followed by `key=value` arguments.
//!
//! ```text
//! request_ranging target=5 anchors=1,2,3,4 [passive=6,7]
//! request_passive listener=6 master=1 slave=5
//! update_config node=5 [interval=300] [mode=always_on] [lat=51.05 lon=3.72]
//! query_status node=5
//! query_location target=5 [ranging_id=0x1a2b3c4d]
//! ```
//!
//! Node ids and ranging ids accept decimal or `0x` hex.

use crate::types::{GeoPoint, NodeId, OperatingMode};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    RequestRanging {
        target: NodeId,
        anchors: Vec<NodeId>,
        passive: Vec<NodeId>,
    },
    RequestPassive {
        listener: NodeId,
        master: NodeId,
        slave: NodeId,
    },
    UpdateConfig {
        node: NodeId,
        interval_s: Option<f64>,
        mode: Option<OperatingMode>,
        anchor: Option<GeoPoint>,
    },
    QueryStatus {
        node: NodeId,
    },
    QueryLocation {
        target: NodeId,
        ranging_id: Option<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadCommand(pub String);

impl fmt::Display for BadCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn parse_int<T: TryFrom<u64>>(key: &str, v: &str) -> Result<T, BadCommand> {
    let raw = match v.strip_prefix("0x").or_else(|| v.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => v.parse::<u64>(),
    };
    raw.ok()
        .and_then(|n| T::try_from(n).ok())
        .ok_or_else(|| BadCommand(format!("{key}: invalid id '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<NodeId>, BadCommand> {
    v.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| parse_int(key, s.trim()))
        .collect()
}

fn parse_f64(key: &str, v: &str) -> Result<f64, BadCommand> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| BadCommand(format!("{key}: invalid number '{v}'")))
}

struct Args<'a> {
    verb: &'a str,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Args<'a> {
    fn take(&mut self, key: &str) -> Option<&'a str> {
        self.map.remove(key)
    }

    fn need(&mut self, key: &str) -> Result<&'a str, BadCommand> {
        self.take(key)
            .ok_or_else(|| BadCommand(format!("{}: missing '{key}='", self.verb)))
    }

    fn finish(self) -> Result<(), BadCommand> {
        match self.map.keys().next() {
            Some(k) => Err(BadCommand(format!("{}: unknown argument '{k}'", self.verb))),
            None => Ok(()),
        }
    }
}

impl FromStr for Command {
    type Err = BadCommand;

    fn from_str(line: &str) -> Result<Self, BadCommand> {
        let mut words = line.split_whitespace();
        let verb = words.next().ok_or_else(|| BadCommand("empty command".into()))?;
        let mut map = BTreeMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| BadCommand(format!("{verb}: expected key=value, got '{w}'")))?;
            if map.insert(k, v).is_some() {
                return Err(BadCommand(format!("{verb}: duplicate '{k}'")));
            }
        }
        let mut a = Args { verb, map };
        let cmd = match verb {
            "request_ranging" => {
                let target = parse_int("target", a.need("target")?)?;
                let anchors = parse_list("anchors", a.need("anchors")?)?;
                if anchors.is_empty() {
                    return Err(BadCommand("request_ranging: anchors is empty".into()));
                }
                if anchors.contains(&target) {
                    return Err(BadCommand("request_ranging: target listed as anchor".into()));
                }
                let passive = match a.take("passive") {
                    Some(v) => parse_list("passive", v)?,
                    None => Vec::new(),
                };
                Command::RequestRanging {
                    target,
                    anchors,
                    passive,
                }
            }
            "request_passive" => Command::RequestPassive {
                listener: parse_int("listener", a.need("listener")?)?,
                master: parse_int("master", a.need("master")?)?,
                slave: parse_int("slave", a.need("slave")?)?,
            },
            "update_config" => {
                let node = parse_int("node", a.need("node")?)?;
                let interval_s = a.take("interval").map(|v| parse_f64("interval", v)).transpose()?;
                if interval_s.is_some_and(|i| i <= 0.0) {
                    return Err(BadCommand("update_config: interval must be positive".into()));
                }
                let mode = match a.take("mode") {
                    None => None,
                    Some("always_on") => Some(OperatingMode::AlwaysOn),
                    Some("low_power") => Some(OperatingMode::LowPower),
                    Some(other) => return Err(BadCommand(format!("update_config: unknown mode '{other}'"))),
                };
                let anchor = match (a.take("lat"), a.take("lon")) {
                    (None, None) => None,
                    (Some(lat), Some(lon)) => Some(GeoPoint {
                        lat: parse_f64("lat", lat)?,
                        lon: parse_f64("lon", lon)?,
                    }),
                    _ => return Err(BadCommand("update_config: lat and lon go together".into())),
                };
                Command::UpdateConfig {
                    node,
                    interval_s,
                    mode,
                    anchor,
                }
            }
            "query_status" => Command::QueryStatus {
                node: parse_int("node", a.need("node")?)?,
            },
            "query_location" => Command::QueryLocation {
                target: parse_int("target", a.need("target")?)?,
                ranging_id: a.take("ranging_id").map(|v| parse_int("ranging_id", v)).transpose()?,
            },
            other => return Err(BadCommand(format!("unknown command '{other}'"))),
        };
        a.finish()?;
        Ok(cmd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_request() {
        let c: Command = "request_ranging target=5 anchors=1,2,0x3,4 passive=6".parse().unwrap();
        assert_eq!(
            c,
            Command::RequestRanging {
                target: 5,
                anchors: vec![1, 2, 3, 4],
                passive: vec![6]
            }
        );
    }

    #[test]
    fn parses_config() {
        let c: Command = "update_config node=5 interval=300 mode=always_on".parse().unwrap();
        assert_eq!(
            c,
            Command::UpdateConfig {
                node: 5,
                interval_s: Some(300.0),
                mode: Some(OperatingMode::AlwaysOn),
                anchor: None
            }
        );
    }

    #[test]
    fn rejects_with_diagnostic() {
        let cases = [
            ("", "empty"),
            ("launch node=1", "unknown command"),
            ("query_status", "missing 'node='"),
            ("query_status node=1 extra=2", "unknown argument 'extra'"),
            ("query_status node=70000", "invalid id"),
            ("update_config node=1 lat=3", "lat and lon"),
            ("request_ranging target=1 anchors=1,2", "target listed"),
            ("query_status node", "key=value"),
        ];
        for (line, needle) in cases {
            let e = line.parse::<Command>().unwrap_err();
            assert!(e.0.contains(needle), "{line}: {e}");
        }
    }
}
