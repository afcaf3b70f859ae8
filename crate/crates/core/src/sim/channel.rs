//! Radio medium: path loss, collisions, CAD and the ranging measurement model.

use crate::frame::{MacFrame, RadioConfig};
use crate::node::MasterMeasurement;
use crate::ranging::{corrected_distance, passive_delta_t, RangingTiming};
use crate::sim::event::Entity;
use crate::types::{Position, SPEED_OF_LIGHT};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    /// Path loss at 1 m.
    pub ref_loss_db: f64,
    pub pathloss_exponent: f64,
    pub noise_floor_dbm: f64,
    pub sensitivity_dbm: f64,
    /// Standard deviation of the per-measurement timing error.
    pub timing_noise_ns: f64,
    /// Probability that a CAD reports activity on an empty channel.
    pub cad_false_positive: f64,
    /// Preamble symbols a CAD needs to see.
    pub cad_min_symbols: f64,
    pub bus_latency_s: f64,
    pub bus_jitter_s: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            ref_loss_db: 40.05,
            pathloss_exponent: 2.4,
            noise_floor_dbm: -130.0,
            sensitivity_dbm: -120.0,
            timing_noise_ns: 0.0,
            cad_false_positive: 0.0,
            cad_min_symbols: 8.0,
            bus_latency_s: 0.1,
            bus_jitter_s: 0.05,
        }
    }
}

impl ChannelModel {
    /// Log-distance path loss; distances under 1 m count as 1 m.
    pub fn path_loss_db(&self, distance_m: f64) -> f64 {
        self.ref_loss_db + 10.0 * self.pathloss_exponent * distance_m.max(1.0).log10()
    }

    pub fn rssi_dbm(&self, tx_power_dbm: f64, distance_m: f64) -> f64 {
        tx_power_dbm - self.path_loss_db(distance_m)
    }

    pub fn audible(&self, rssi_dbm: f64) -> bool {
        rssi_dbm >= self.sensitivity_dbm
    }

    pub fn timing_sigma_s(&self) -> f64 {
        self.timing_noise_ns * 1e-9
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.pathloss_exponent > 0.0) {
            return Err("pathloss_exponent must be positive".into());
        }
        if !(self.timing_noise_ns >= 0.0) {
            return Err("timing_noise_ns must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.cad_false_positive) {
            return Err("cad_false_positive must lie in [0, 1]".into());
        }
        if !(self.bus_latency_s >= self.bus_jitter_s && self.bus_jitter_s >= 0.0) {
            return Err("bus jitter must be in [0, bus_latency_s]".into());
        }
        Ok(())
    }
}

/// One transmission on the shared medium.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub id: u64,
    pub src: Entity,
    pub pos: Position,
    pub freq_hz: f64,
    pub power_dbm: f64,
    pub start: f64,
    pub preamble_end: f64,
    pub end: f64,
    /// `None` for interference and ranging exchanges.
    pub frame: Option<MacFrame>,
}

impl Transmission {
    pub fn overlaps(&self, start: f64, end: f64) -> bool {
        self.start < end && self.end > start
    }
}

#[derive(Debug, Default)]
pub struct Medium {
    txs: Vec<Transmission>,
    next_id: u64,
}

impl Medium {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn start(
        &mut self,
        src: Entity,
        pos: Position,
        radio: &RadioConfig,
        start: f64,
        duration_s: f64,
        frame: Option<MacFrame>,
    ) -> u64 {
        self.next_id += 1;
        let preamble = radio.preamble_duration().min(duration_s);
        self.txs.push(Transmission {
            id: self.next_id,
            src,
            pos,
            freq_hz: radio.freq_hz,
            power_dbm: radio.tx_power_dbm,
            start,
            preamble_end: start + preamble,
            end: start + duration_s,
            frame,
        });
        self.next_id
    }

    pub fn get(&self, id: u64) -> Option<&Transmission> {
        self.txs.iter().find(|t| t.id == id)
    }

    pub fn ongoing(&self, at: f64) -> impl Iterator<Item = &Transmission> {
        self.txs.iter().filter(move |t| t.start <= at && t.end > at)
    }

    /// Drops transmissions that ended before `before`.
    pub fn prune(&mut self, before: f64) {
        self.txs.retain(|t| t.end >= before);
    }

    /// Whether `tx` overlapped another audible transmission on its frequency
    /// at a receiver located at `rx_pos`.
    pub fn collided(&self, tx: &Transmission, rx: Entity, rx_pos: &Position, model: &ChannelModel) -> bool {
        self.txs.iter().any(|o| {
            o.id != tx.id
                && o.src != rx
                && o.freq_hz == tx.freq_hz
                && o.overlaps(tx.start, tx.end)
                && model.audible(model.rssi_dbm(o.power_dbm, o.pos.distance(rx_pos)))
        })
    }

    /// Whether `rx` transmitted during `[start, end)` on `freq_hz`.
    pub fn transmitting(&self, rx: Entity, freq_hz: f64, start: f64, end: f64) -> bool {
        self.txs
            .iter()
            .any(|t| t.src == rx && t.freq_hz == freq_hz && t.overlaps(start, end))
    }

    /// Preamble detection over `[start, end)`.
    #[allow(clippy::too_many_arguments)]
    pub fn cad_detect(
        &self,
        rx: Entity,
        rx_pos: &Position,
        radio: &RadioConfig,
        start: f64,
        end: f64,
        min_symbols: f64,
        model: &ChannelModel,
    ) -> bool {
        let need = (min_symbols * radio.symbol_duration()).min(radio.preamble_duration());
        self.txs.iter().any(|t| {
            t.src != rx
                && t.freq_hz == radio.freq_hz
                && t.preamble_end.min(end) - t.start.max(start) >= need - 1e-12
                && model.audible(model.rssi_dbm(t.power_dbm, t.pos.distance(rx_pos)))
        })
    }
}

/// Per-repeat round trip `2d/c + (1 + delta) T_B + noise`.
pub fn round_trip<R: Rng + ?Sized>(d: f64, delta: f64, t_b: f64, sigma_s: f64, rng: &mut R) -> f64 {
    2.0 * d / SPEED_OF_LIGHT + (1.0 + delta) * t_b + gaussian(sigma_s, rng)
}

pub fn gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

/// One master-side exchange of `repeats` round trips. `delta` is the
/// master-slave oscillator offset, which the master learns from FEI.
pub fn measure_exchange<R: Rng + ?Sized>(
    radio: &RadioConfig,
    distance_m: f64,
    delta: f64,
    sigma_s: f64,
    repeats: u8,
    rssi_dbm: f64,
    rng: &mut R,
) -> Option<MasterMeasurement> {
    let t_b = RangingTiming::slave_duration(radio);
    let mut corrected = 0.0;
    let mut raw = 0.0;
    let mut n = 0u32;
    for _ in 0..repeats {
        let t_a = round_trip(distance_m, delta, t_b, sigma_s, rng);
        if let Ok(d) = corrected_distance(t_a, t_b, delta) {
            corrected += d;
            raw += SPEED_OF_LIGHT * (t_a - t_b) / 2.0;
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    Some(MasterMeasurement {
        distance_m: corrected / f64::from(n),
        raw_distance_m: raw / f64::from(n),
        rssi_dbm,
        repeats: n as u8,
    })
}

/// Listener-side time difference with its own timing error.
pub fn measure_passive<R: Rng + ?Sized>(
    master: &Position,
    slave: &Position,
    listener: &Position,
    sigma_s: f64,
    rng: &mut R,
) -> f64 {
    passive_delta_t(master, slave, listener) + gaussian(sigma_s, rng)
}

/// Airtime of one exchange: each repeat is a request plus the slave's `T_B`.
pub fn exchange_duration(radio: &RadioConfig, repeats: u8) -> f64 {
    let request = radio.airtime(RANGING_REQUEST_LEN, false).unwrap_or(0.0);
    f64::from(repeats) * (request + RangingTiming::slave_duration(radio))
}

/// Address bytes carried by a ranging request.
pub const RANGING_REQUEST_LEN: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coupling_loss_threshold() {
        let m = ChannelModel::default();
        // distances giving 132.4 dB and 132.6 dB of path loss
        let d_at = |pl: f64| 10f64.powf((pl - m.ref_loss_db) / (10.0 * m.pathloss_exponent));
        assert!(m.audible(m.rssi_dbm(12.5, d_at(132.4))));
        assert!(!m.audible(m.rssi_dbm(12.5, d_at(132.6))));
    }

    #[test]
    fn rssi_decreasing() {
        let m = ChannelModel::default();
        let mut prev = f64::INFINITY;
        for d in [1.0, 2.0, 10.0, 100.0, 1000.0] {
            let r = m.rssi_dbm(12.5, d);
            assert!(r < prev);
            prev = r;
        }
    }

    #[test]
    fn simultaneous_uplinks_collide() {
        let m = ChannelModel::default();
        let radio = RadioConfig::communication();
        let mut med = Medium::new();
        let a = med.start(Entity::Node(1), Position::new(10.0, 0.0, 0.0), &radio, 30.0, 0.02, None);
        let b = med.start(Entity::Node(2), Position::new(0.0, 10.0, 0.0), &radio, 30.0, 0.02, None);
        let gw = Position::default();
        assert!(med.collided(med.get(a).unwrap(), Entity::Gateway, &gw, &m));
        assert!(med.collided(med.get(b).unwrap(), Entity::Gateway, &gw, &m));
        let ranging = RadioConfig::ranging();
        let c = med.start(Entity::Node(3), Position::default(), &ranging, 30.0, 0.02, None);
        assert!(!med.collided(med.get(c).unwrap(), Entity::Gateway, &gw, &m));
    }

    #[test]
    fn cad_needs_enough_preamble() {
        let m = ChannelModel::default();
        let radio = RadioConfig::communication();
        let mut med = Medium::new();
        med.start(Entity::Gateway, Position::default(), &radio, 1.0, 0.05, None);
        let p = Position::new(50.0, 0.0, 0.0);
        assert!(med.cad_detect(Entity::Node(1), &p, &radio, 0.995, 1.010, 8.0, &m));
        // the window closes two symbols into the preamble
        let ts = radio.symbol_duration();
        assert!(!med.cad_detect(Entity::Node(1), &p, &radio, 0.99, 1.0 + 2.0 * ts, 8.0, &m));
    }

    #[test]
    fn noiseless_exchange_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let radio = RadioConfig::ranging();
        let m = measure_exchange(&radio, 150.0, 0.0, 0.0, 10, -60.0, &mut rng).unwrap();
        assert!((m.distance_m - 150.0).abs() < 1e-6);
        let m = measure_exchange(&radio, 150.0, 10e-6, 0.0, 10, -60.0, &mut rng).unwrap();
        assert!((m.raw_distance_m - 150.0 - 4.0145).abs() < 1e-3, "{}", m.raw_distance_m);
        assert!((m.distance_m - 150.0).abs() < 1e-3);
    }

    #[test]
    fn colocated_listener_sees_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Position::new(30.0, 40.0, 0.0);
        let dt = measure_passive(&Position::default(), &s, &s, 0.0, &mut rng);
        assert!(dt.abs() < 1e-12);
    }

    #[test]
    fn reciprocal() {
        let m = ChannelModel::default();
        let (a, b) = (Position::new(1.0, 2.0, 0.0), Position::new(80.0, -5.0, 3.0));
        assert_eq!(m.rssi_dbm(12.5, a.distance(&b)), m.rssi_dbm(12.5, b.distance(&a)));
    }
}
