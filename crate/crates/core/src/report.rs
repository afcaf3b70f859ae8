//! Lifetime projections, baseline comparison and the run summary.

use crate::energy::{
    battery_cycles, continuous_lifetime, cycle_charge, practical_capacity, CadBaseline, CyclePlan, EnergyError,
    SECONDS_PER_DAY, SECONDS_PER_MONTH, SECONDS_PER_YEAR,
};
use crate::sim::scenario::{PlanPreset, Scenario};
use crate::sim::SimOutput;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub fn preset_plan(preset: PlanPreset, tau_s: f64) -> CyclePlan {
    match preset {
        PlanPreset::Idle => CyclePlan::idle(tau_s),
        PlanPreset::Ranging => CyclePlan::ranging(tau_s),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LifetimeRow {
    pub basis: String,
    pub capacity_c: f64,
    pub tau_s: f64,
    pub cycle_charge_mc: f64,
    pub cycles: u64,
    pub lifetime_s: f64,
}

impl LifetimeRow {
    pub fn compute(basis: &str, plan: &CyclePlan, capacity_c: f64) -> Result<Self, EnergyError> {
        Ok(Self {
            basis: basis.to_string(),
            capacity_c,
            tau_s: plan.cycle_period_s,
            cycle_charge_mc: cycle_charge(plan)?,
            cycles: battery_cycles(capacity_c, plan)?,
            lifetime_s: crate::energy::lifetime(plan, capacity_c)?,
        })
    }

    pub fn days(&self) -> f64 {
        self.lifetime_s / SECONDS_PER_DAY
    }
}

/// Seconds rendered in every reporting unit.
pub fn units(seconds: f64) -> String {
    format!(
        "{seconds:.0} s = {:.2} days = {:.2} months = {:.3} years",
        seconds / SECONDS_PER_DAY,
        seconds / SECONDS_PER_MONTH,
        seconds / SECONDS_PER_YEAR
    )
}

pub fn human(seconds: f64) -> String {
    if seconds < SECONDS_PER_DAY {
        format!("{:.2} hours", seconds / 3600.0)
    } else if seconds < 2.0 * SECONDS_PER_MONTH {
        format!("{:.2} days", seconds / SECONDS_PER_DAY)
    } else if seconds < 2.0 * SECONDS_PER_YEAR {
        format!("{:.2} months", seconds / SECONDS_PER_MONTH)
    } else {
        format!("{:.2} years", seconds / SECONDS_PER_YEAR)
    }
}

/// Nominal and (when cycles were observed) practical-capacity projections.
pub fn lifetime_rows(sc: &Scenario) -> Result<Vec<LifetimeRow>, EnergyError> {
    let e = &sc.energy;
    let plan = preset_plan(e.preset, e.tau_s);
    let mut rows = vec![LifetimeRow::compute("nominal", &plan, e.capacity_c)?];
    if let Some(n) = e.observed_cycles {
        let observed = preset_plan(e.observed_preset, e.observed_tau_s);
        let q = practical_capacity(n, &observed)?;
        rows.push(LifetimeRow::compute("practical", &plan, q)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub framework: LifetimeRow,
    pub cad: LifetimeRow,
    pub always_on_s: f64,
}

impl Comparison {
    pub fn cad_ratio(&self) -> f64 {
        self.framework.lifetime_s / self.cad.lifetime_s
    }

    pub fn always_on_ratio(&self) -> f64 {
        self.framework.lifetime_s / self.always_on_s
    }
}

/// Framework plan against the CAD-scanning and always-on baselines, all on
/// the practical capacity when one was observed.
pub fn compare(sc: &Scenario) -> Result<Comparison, EnergyError> {
    let rows = lifetime_rows(sc)?;
    let framework = rows.last().cloned().expect("at least the nominal row");
    let capacity = framework.capacity_c;
    let cad_plan = sc.baselines.cad().plan(sc.energy.tau_s);
    let cad = LifetimeRow::compute("cad_baseline", &cad_plan, capacity)?;
    Ok(Comparison {
        framework,
        cad,
        always_on_s: continuous_lifetime(sc.baselines.always_on_current_a, capacity),
    })
}

pub fn comparison_text(sc: &Scenario, c: &Comparison) -> String {
    let b: &CadBaseline = &sc.baselines.cad();
    let mut s = String::new();
    let _ = writeln!(s, "capacity: {:.4} C ({})", c.framework.capacity_c, c.framework.basis);
    let _ = writeln!(
        s,
        "framework ({:?}, tau {} s): {:.5} mC/cycle, {} cycles, {}",
        sc.energy.preset,
        c.framework.tau_s,
        c.framework.cycle_charge_mc,
        c.framework.cycles,
        human(c.framework.lifetime_s)
    );
    let _ = writeln!(
        s,
        "cad baseline (scan {} ms every {} ms at {} mA, {} ms preamble): {:.5} mC/cycle, {}",
        b.scan_duration_s * 1e3,
        b.scan_period_s * 1e3,
        b.scan_current_a * 1e3,
        b.long_preamble_s * 1e3,
        c.cad.cycle_charge_mc,
        human(c.cad.lifetime_s)
    );
    let _ = writeln!(
        s,
        "always-on receiver ({} mA): {}",
        sc.baselines.always_on_current_a * 1e3,
        human(c.always_on_s)
    );
    let _ = writeln!(s, "framework / cad: {:.1}x", c.cad_ratio());
    let _ = writeln!(s, "framework / always-on: {:.1}x", c.always_on_ratio());
    s
}

/// Human-readable run summary; every figure comes from a CSV row.
pub fn summary(sc: &Scenario, out: &SimOutput, lifetimes: &[LifetimeRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed {} countdown {:?} ended at {:.3} s", sc.seed, sc.countdown, out.ended_at_s);
    let _ = writeln!(s, "events {}", out.events.len());
    let _ = writeln!(s, "\nnodes:");
    for n in &out.nodes {
        let _ = write!(
            s,
            "  node {}: {} checks, {:.4} mC consumed, voltage proxy {:.4} V",
            n.node, n.checks, n.consumed_mc, n.voltage_proxy
        );
        match n.death_time_s {
            Some(t) => {
                let _ = writeln!(s, ", battery exhausted at {}", units(t));
            }
            None => {
                let _ = writeln!(s);
            }
        }
    }
    if !out.tasks.is_empty() {
        let _ = writeln!(s, "\ntasks:");
        let mut by_id: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for t in &out.tasks {
            by_id
                .entry(t.ranging_id.as_str())
                .or_default()
                .push(format!("node {} {} at t={:.3}", t.node, t.role, t.due_s));
        }
        let shown = by_id.len().min(20);
        for (id, v) in by_id.iter().take(shown) {
            let _ = writeln!(s, "  {id}: {}", v.join(", "));
        }
        if by_id.len() > shown {
            let _ = writeln!(s, "  ... {} more ranging ids in tasks.csv", by_id.len() - shown);
        }
    }
    if !out.exchanges.is_empty() {
        let mut outcomes: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &out.exchanges {
            *outcomes.entry(e.outcome.as_str()).or_default() += 1;
        }
        let parts: Vec<String> = outcomes.iter().map(|(k, v)| format!("{k}: {v}")).collect();
        let _ = writeln!(s, "\nexchanges: {} ({})", out.exchanges.len(), parts.join(", "));
    }
    if !out.results.is_empty() {
        let _ = writeln!(s, "results stored: {}", out.results.len());
    }
    if !out.locations.is_empty() {
        let _ = writeln!(s, "\nlocations:");
        for l in &out.locations {
            let _ = writeln!(
                s,
                "  target {} ({}): x={:.3} y={:.3} error {:.3} m from {} measurements",
                l.target_id, l.ranging_id, l.x, l.y, l.rmse, l.n_measurements
            );
        }
    }
    if !lifetimes.is_empty() {
        let _ = writeln!(s, "\nprojected lifetime ({:?} plan):", sc.energy.preset);
        for l in lifetimes {
            let _ = writeln!(
                s,
                "  {}: {:.4} C, tau {} s, {:.5} mC/cycle, {} cycles, {}",
                l.basis,
                l.capacity_c,
                l.tau_s,
                l.cycle_charge_mc,
                l.cycles,
                units(l.lifetime_s)
            );
        }
    }
    s
}
