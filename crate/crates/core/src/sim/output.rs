//! CSV artifacts of a run.

use crate::sim::SimOutput;
use serde::Serialize;
use std::io;
use std::path::{Path, PathBuf};

/// Writes `rows` as CSV; `header` is used only when there are no rows.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

pub const EVENTS_HEADER: &[&str] = &["time_s", "entity", "kind", "detail"];
pub const ENERGY_HEADER: &[&str] = &["time_s", "activity", "charge_mc_cumulative", "voltage_proxy"];
pub const RESULTS_HEADER: &[&str] = &[
    "ranging_id",
    "kind",
    "reporter",
    "master",
    "slave",
    "distance_m",
    "raw_distance_m",
    "delta_t_s",
    "truth",
    "received_at_s",
];
pub const LOCATIONS_HEADER: &[&str] = &["ranging_id", "target_id", "x", "y", "rmse", "n_measurements"];
pub const TASKS_HEADER: &[&str] = &["due_s", "node", "ranging_id", "role"];
pub const EXCHANGES_HEADER: &[&str] = &[
    "start_s",
    "end_s",
    "ranging_id",
    "master",
    "slave",
    "outcome",
    "true_distance_m",
    "distance_m",
    "raw_distance_m",
    "listeners",
];
pub const LIFETIME_HEADER: &[&str] = &["basis", "capacity_c", "tau_s", "cycle_charge_mc", "cycles", "lifetime_s"];
pub const NODES_HEADER: &[&str] = &[
    "node",
    "interval_s",
    "battery_c",
    "checks",
    "consumed_mc",
    "voltage_proxy",
    "death_time_s",
];

/// Writes every CSV plus `summary.txt` into `dir` and returns the paths.
pub fn write_all(dir: &Path, out: &SimOutput, summary: &str) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, f: &dyn Fn(&Path) -> io::Result<()>| -> io::Result<()> {
        let p = dir.join(name);
        f(&p)?;
        written.push(p);
        Ok(())
    };
    emit("events.csv".into(), &|p| write_csv(p, &out.events, EVENTS_HEADER))?;
    emit("results.csv".into(), &|p| write_csv(p, &out.results, RESULTS_HEADER))?;
    emit("locations.csv".into(), &|p| write_csv(p, &out.locations, LOCATIONS_HEADER))?;
    emit("tasks.csv".into(), &|p| write_csv(p, &out.tasks, TASKS_HEADER))?;
    emit("exchanges.csv".into(), &|p| write_csv(p, &out.exchanges, EXCHANGES_HEADER))?;
    emit("nodes.csv".into(), &|p| write_csv(p, &out.nodes, NODES_HEADER))?;
    for (id, rows) in &out.energy {
        emit(format!("energy_{id}.csv"), &|p| write_csv(p, rows, ENERGY_HEADER))?;
    }
    emit("summary.txt".into(), &|p| std::fs::write(p, summary))?;
    Ok(written)
}
