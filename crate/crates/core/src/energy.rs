//! Charge accounting and battery-lifetime extrapolation.
//!
//! Charges are carried in millicoulombs, capacities in coulombs, durations in
//! seconds. Reporting uses 30-day months and 365.25-day years.

use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use thiserror::Error;

pub const SLEEP_CURRENT_A: f64 = 2.5e-6;
pub const SUPPLY_V: f64 = 3.0;
/// CR2032 nominal capacity: 225 mAh.
pub const NOMINAL_CAPACITY_C: f64 = 810.0;
/// Voltage proxy endpoints for a CR2032 from fresh to cut-off.
pub const FRESH_V: f64 = 3.1;
pub const CUTOFF_V: f64 = 2.72;

pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const SECONDS_PER_MONTH: f64 = 30.0 * SECONDS_PER_DAY;
pub const SECONDS_PER_YEAR: f64 = 365.25 * SECONDS_PER_DAY;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("activities last {busy_s} s which does not fit in a {tau_s} s cycle")]
    OverfullCycle { busy_s: f64, tau_s: f64 },
    #[error("cycle charge must be positive")]
    ZeroCharge,
    #[error("cycle period must be positive, got {0}")]
    BadPeriod(f64),
    #[error("observed cycle count must be positive")]
    NoObservedCycles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub name: Cow<'static, str>,
    pub avg_current_a: f64,
    pub duration_s: f64,
}

impl ActivityProfile {
    pub const fn new(name: &'static str, avg_current_a: f64, duration_s: f64) -> Self {
        Self {
            name: Cow::Borrowed(name),
            avg_current_a,
            duration_s,
        }
    }

    pub fn charge_mc(&self) -> f64 {
        self.avg_current_a * self.duration_s * 1000.0
    }

    pub fn energy_mj(&self, supply_v: f64) -> f64 {
        supply_v * self.charge_mc()
    }

    /// Same current for a different duration.
    pub fn scaled(&self, duration_s: f64) -> Self {
        Self {
            name: self.name.clone(),
            avg_current_a: self.avg_current_a,
            duration_s,
        }
    }
}

pub const INSTRUCTION_CHECK_REQUEST: ActivityProfile =
    ActivityProfile::new("instruction_check_request", 23.5e-3, 41e-3);
pub const CAD_ONLY_RESPONSE: ActivityProfile =
    ActivityProfile::new("cad_only_response", 12e-3, 15e-3);
pub const RESPONSE_WITH_PACKET: ActivityProfile =
    ActivityProfile::new("response_with_packet", 15e-3, 106e-3);
pub const PTP_RANGING: ActivityProfile = ActivityProfile::new("ptp_ranging", 22e-3, 379e-3);
/// Continuous receive, used for always-on nodes and ranging listen windows.
pub const RX_CURRENT_A: f64 = 22e-3;
pub const TX_CURRENT_A: f64 = 23.5e-3;

/// Repeats that [`PTP_RANGING`] was measured with.
pub const PTP_RANGING_REPEATS: u32 = 10;

/// Running charge counter for one node, with an optional trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    consumed_c: f64,
    pub battery_capacity_c: f64,
    pub supply_v: f64,
    trace: Option<Vec<TraceRow>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub time_s: f64,
    pub activity: String,
    pub charge_mc_cumulative: f64,
    pub voltage_proxy: f64,
}

impl EnergyLedger {
    pub fn new(battery_capacity_c: f64) -> Self {
        Self {
            consumed_c: 0.0,
            battery_capacity_c,
            supply_v: SUPPLY_V,
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn consumed_c(&self) -> f64 {
        self.consumed_c
    }

    pub fn consumed_mc(&self) -> f64 {
        self.consumed_c * 1000.0
    }

    pub fn energy_j(&self) -> f64 {
        self.supply_v * self.consumed_c
    }

    pub fn remaining_c(&self) -> f64 {
        (self.battery_capacity_c - self.consumed_c).max(0.0)
    }

    pub fn is_depleted(&self) -> bool {
        self.consumed_c >= self.battery_capacity_c
    }

    /// Linear charge-depletion proxy between [`FRESH_V`] and [`CUTOFF_V`].
    pub fn voltage_proxy(&self) -> f64 {
        if self.battery_capacity_c <= 0.0 {
            return CUTOFF_V;
        }
        let frac = (self.consumed_c / self.battery_capacity_c).clamp(0.0, 1.0);
        FRESH_V - (FRESH_V - CUTOFF_V) * frac
    }

    /// Adds `charge_mc` (negative values are ignored) and records a trace row.
    pub fn charge(&mut self, time_s: f64, activity: &str, charge_mc: f64) {
        if charge_mc > 0.0 {
            self.consumed_c += charge_mc / 1000.0;
        }
        let voltage_proxy = self.voltage_proxy();
        let consumed = self.consumed_mc();
        if let Some(trace) = self.trace.as_mut() {
            let row = TraceRow {
                time_s,
                activity: activity.to_string(),
                charge_mc_cumulative: consumed,
                voltage_proxy,
            };
            trace.push(row);
        }
    }

    pub fn charge_profile(&mut self, time_s: f64, profile: &ActivityProfile) {
        self.charge(time_s, &profile.name, profile.charge_mc());
    }

    pub fn trace(&self) -> &[TraceRow] {
        self.trace.as_deref().unwrap_or(&[])
    }
}

/// Activities performed once per cycle of `cycle_period_s`, sleeping otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePlan {
    pub cycle_period_s: f64,
    pub activities: Vec<ActivityProfile>,
    pub sleep_current_a: f64,
}

impl CyclePlan {
    pub fn new(cycle_period_s: f64, activities: Vec<ActivityProfile>) -> Self {
        Self {
            cycle_period_s,
            activities,
            sleep_current_a: SLEEP_CURRENT_A,
        }
    }

    /// Check request plus a CAD that sees nothing.
    pub fn idle(cycle_period_s: f64) -> Self {
        Self::new(
            cycle_period_s,
            vec![INSTRUCTION_CHECK_REQUEST, CAD_ONLY_RESPONSE],
        )
    }

    /// Idle cycle plus one ten-repeat ranging exchange.
    pub fn ranging(cycle_period_s: f64) -> Self {
        Self::new(
            cycle_period_s,
            vec![INSTRUCTION_CHECK_REQUEST, CAD_ONLY_RESPONSE, PTP_RANGING],
        )
    }

    pub fn busy_s(&self) -> f64 {
        self.activities.iter().map(|a| a.duration_s).sum()
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        if !(self.cycle_period_s > 0.0) || !self.cycle_period_s.is_finite() {
            return Err(EnergyError::BadPeriod(self.cycle_period_s));
        }
        let busy_s = self.busy_s();
        if busy_s >= self.cycle_period_s {
            return Err(EnergyError::OverfullCycle {
                busy_s,
                tau_s: self.cycle_period_s,
            });
        }
        Ok(())
    }
}

/// Charge drawn in one cycle, mC.
pub fn cycle_charge(plan: &CyclePlan) -> Result<f64, EnergyError> {
    plan.validate()?;
    let active: f64 = plan.activities.iter().map(ActivityProfile::charge_mc).sum();
    let sleep = plan.sleep_current_a * (plan.cycle_period_s - plan.busy_s()) * 1000.0;
    Ok(active + sleep)
}

pub fn battery_cycles(capacity_c: f64, plan: &CyclePlan) -> Result<u64, EnergyError> {
    let q = cycle_charge(plan)?;
    if q <= 0.0 {
        return Err(EnergyError::ZeroCharge);
    }
    // guard against 0.999999 when capacity is an exact multiple of q
    let ratio = capacity_c * 1000.0 / q;
    let nearest = ratio.round();
    if (ratio - nearest).abs() < 1e-9 * ratio.max(1.0) {
        return Ok(nearest as u64);
    }
    Ok(ratio.floor() as u64)
}

/// Lifetime in seconds.
pub fn lifetime(plan: &CyclePlan, capacity_c: f64) -> Result<f64, EnergyError> {
    Ok(battery_cycles(capacity_c, plan)? as f64 * plan.cycle_period_s)
}

/// Capacity implied by a battery that lasted `observed_cycles` cycles, C.
pub fn practical_capacity(observed_cycles: u64, plan: &CyclePlan) -> Result<f64, EnergyError> {
    if observed_cycles == 0 {
        return Err(EnergyError::NoObservedCycles);
    }
    Ok(observed_cycles as f64 * cycle_charge(plan)? / 1000.0)
}

/// Lifetime of a node drawing `current_a` continuously, seconds.
pub fn continuous_lifetime(current_a: f64, capacity_c: f64) -> f64 {
    capacity_c / current_a
}

/// CAD-scanning baseline: the node sniffs every `scan_period_s` instead of
/// checking in, and initiators send a long preamble so a scan catches it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CadBaseline {
    pub scan_period_s: f64,
    pub scan_current_a: f64,
    pub scan_duration_s: f64,
    pub long_preamble_s: f64,
}

impl Default for CadBaseline {
    fn default() -> Self {
        Self {
            scan_period_s: 0.1,
            scan_current_a: CAD_ONLY_RESPONSE.avg_current_a,
            scan_duration_s: CAD_ONLY_RESPONSE.duration_s,
            long_preamble_s: 0.115,
        }
    }
}

impl CadBaseline {
    /// Plan for one `tau` cycle: scans, one received request, one long-preamble
    /// transmission, and a ranging exchange.
    pub fn plan(&self, tau: f64) -> CyclePlan {
        let scans = (tau / self.scan_period_s).floor();
        let scan = ActivityProfile {
            name: Cow::Borrowed("cad_scan"),
            avg_current_a: self.scan_current_a,
            duration_s: self.scan_duration_s * scans,
        };
        let long_tx = ActivityProfile {
            name: Cow::Borrowed("long_preamble_tx"),
            avg_current_a: TX_CURRENT_A,
            duration_s: self.long_preamble_s,
        };
        let rx = ActivityProfile {
            name: Cow::Borrowed("request_rx"),
            avg_current_a: RX_CURRENT_A,
            duration_s: RESPONSE_WITH_PACKET.duration_s * 0.5,
        };
        CyclePlan::new(tau, vec![scan, rx, long_tx, PTP_RANGING])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig4(a: f64, b: f64) -> bool {
        let mag = 10f64.powf(b.abs().log10().floor() - 3.0);
        (a / mag).round() == (b / mag).round()
    }

    #[test]
    fn table_rows() {
        let rows = [
            (INSTRUCTION_CHECK_REQUEST, 0.9635, 2.8905),
            (CAD_ONLY_RESPONSE, 0.18, 0.54),
            (RESPONSE_WITH_PACKET, 1.59, 4.77),
            (PTP_RANGING, 8.338, 25.01),
        ];
        for (p, q, e) in rows {
            assert!(sig4(p.charge_mc(), q), "{} q={}", p.name, p.charge_mc());
            assert!(sig4(p.energy_mj(SUPPLY_V), e), "{} e", p.name);
        }
    }

    #[test]
    fn cycle_charge_examples() {
        let q600 = cycle_charge(&CyclePlan::idle(600.0)).unwrap();
        assert!((q600 - 2.64336).abs() < 1e-9);
        let q30 = cycle_charge(&CyclePlan::idle(30.0)).unwrap();
        assert!((q30 - 1.21836).abs() < 1e-9);
        let empty = CyclePlan::new(600.0, vec![]);
        assert!((cycle_charge(&empty).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn overfull_cycle() {
        assert!(matches!(
            cycle_charge(&CyclePlan::ranging(0.3)),
            Err(EnergyError::OverfullCycle { .. })
        ));
        assert!(matches!(
            cycle_charge(&CyclePlan::idle(0.0)),
            Err(EnergyError::BadPeriod(_))
        ));
    }

    #[test]
    fn nominal_lifetime() {
        let plan = CyclePlan::idle(600.0);
        assert_eq!(battery_cycles(NOMINAL_CAPACITY_C, &plan).unwrap(), 306_428);
        let years = lifetime(&plan, NOMINAL_CAPACITY_C).unwrap() / SECONDS_PER_YEAR;
        assert!((years - 5.826_07).abs() < 1e-4, "{years}");
    }

    #[test]
    fn one_cycle_capacity() {
        let plan = CyclePlan::idle(600.0);
        let q = cycle_charge(&plan).unwrap() / 1000.0;
        assert_eq!(battery_cycles(q, &plan).unwrap(), 1);
        assert!((practical_capacity(1, &plan).unwrap() - q).abs() < 1e-15);
    }

    #[test]
    fn practical_lifetime() {
        let q_b = practical_capacity(86_867, &CyclePlan::idle(30.0)).unwrap();
        assert!((q_b - 105.835_278_12).abs() < 1e-6, "{q_b}");
        let plan = CyclePlan::idle(600.0);
        assert_eq!(battery_cycles(q_b, &plan).unwrap(), 40_038);
        let months = lifetime(&plan, q_b).unwrap() / SECONDS_PER_MONTH;
        assert!((months - 9.268_06).abs() < 1e-4, "{months}");
        assert_eq!(battery_cycles(105.83, &plan).unwrap(), 40_036);
    }

    #[test]
    fn ranging_lifetime() {
        let q_b = practical_capacity(7_891, &CyclePlan::ranging(30.0)).unwrap();
        assert!((q_b - 75.401_76).abs() < 1e-4, "{q_b}");
        let plan = CyclePlan::ranging(600.0);
        assert_eq!(battery_cycles(q_b, &plan).unwrap(), 6_866);
        let days = lifetime(&plan, q_b).unwrap() / SECONDS_PER_DAY;
        assert!((days - 47.680_6).abs() < 1e-3, "{days}");
    }

    #[test]
    fn always_on_hours() {
        let h = continuous_lifetime(RX_CURRENT_A, 105.83) / 3600.0;
        assert!((h - 1.336_24).abs() < 1e-4);
    }

    #[test]
    fn ledger_trace_and_voltage() {
        let mut l = EnergyLedger::new(1.0).with_trace();
        assert_eq!(l.voltage_proxy(), FRESH_V);
        l.charge_profile(1.0, &INSTRUCTION_CHECK_REQUEST);
        l.charge(2.0, "sleep", -5.0);
        l.charge(3.0, "sleep", 999.0365);
        assert!(l.is_depleted());
        assert!((l.voltage_proxy() - CUTOFF_V).abs() < 1e-12);
        assert_eq!(l.trace().len(), 3);
        assert_eq!(l.trace()[1].charge_mc_cumulative, l.trace()[0].charge_mc_cumulative);
        assert!((l.energy_j() - 3.0 * l.consumed_c()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn affine_in_tau(t1 in 1.0..5000.0f64, t2 in 1.0..5000.0f64) {
            let q1 = cycle_charge(&CyclePlan::idle(t1)).unwrap();
            let q2 = cycle_charge(&CyclePlan::idle(t2)).unwrap();
            let slope = SLEEP_CURRENT_A * 1000.0;
            prop_assert!(((q2 - q1) - slope * (t2 - t1)).abs() < 1e-9);
        }

        #[test]
        fn lifetime_monotone(c1 in 1.0..1000.0f64, dc in 0.0..500.0f64, t in 1.0..3000.0f64, dt in 0.0..3000.0f64) {
            let plan = CyclePlan::idle(t);
            prop_assert!(lifetime(&plan, c1).unwrap() <= lifetime(&plan, c1 + dc).unwrap());
            prop_assert!(lifetime(&plan, c1).unwrap() <= lifetime(&CyclePlan::idle(t + dt), c1).unwrap() + t + dt);
        }

        #[test]
        fn practical_round_trip(n in 1u64..1_000_000, tau in 1.0..3600.0f64) {
            let plan = CyclePlan::idle(tau);
            let q = practical_capacity(n, &plan).unwrap();
            prop_assert_eq!(lifetime(&plan, q).unwrap(), n as f64 * tau);
        }

        #[test]
        fn ledger_monotone(charges in proptest::collection::vec(-1.0..10.0f64, 0..50)) {
            let mut l = EnergyLedger::new(100.0);
            let mut prev = 0.0;
            for (i, c) in charges.iter().enumerate() {
                l.charge(i as f64, "x", *c);
                prop_assert!(l.consumed_c() >= prev);
                prev = l.consumed_c();
            }
        }
    }
}
