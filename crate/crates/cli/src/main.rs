#![allow(clippy::neg_cmp_op_on_partial_ord)]

use clap::{Args, Parser, Subcommand, ValueEnum};
use loraloc_core::energy::{self, ActivityProfile, CyclePlan, SECONDS_PER_DAY, SECONDS_PER_MONTH, SECONDS_PER_YEAR};
use loraloc_core::report::{self, LifetimeRow};
use loraloc_core::sim::output::{write_all, write_csv, LIFETIME_HEADER};
use loraloc_core::sim::scenario::PlanPreset;
use loraloc_core::{sim, Scenario};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_SCENARIO: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "loraloc", version, about = "Energy-aware LoRa ranging simulator and lifetime calculator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its CSVs and summary.
    Run {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: scenario `output_dir`, else out/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Battery lifetime of a duty-cycle plan.
    Lifetime(LifetimeArgs),
    /// Framework lifetime against the CAD-scanning and always-on baselines.
    Compare { scenario: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Idle,
    Ranging,
}

impl From<Preset> for PlanPreset {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Idle => PlanPreset::Idle,
            Preset::Ranging => PlanPreset::Ranging,
        }
    }
}

#[derive(Args)]
struct LifetimeArgs {
    /// Cycle period in seconds.
    #[arg(long, default_value_t = 600.0)]
    tau: f64,
    /// Battery capacity in coulombs.
    #[arg(long, default_value_t = energy::NOMINAL_CAPACITY_C)]
    capacity: f64,
    #[arg(long, value_enum, default_value = "idle")]
    preset: Preset,
    /// Custom activity `name:current_A:duration_s`; replaces the preset when given.
    #[arg(long = "activity", value_parser = parse_activity)]
    activities: Vec<ActivityProfile>,
    /// Cycles a bench run lasted; derives the practical capacity.
    #[arg(long)]
    observed_cycles: Option<u64>,
    /// Cycle period of that bench run.
    #[arg(long, default_value_t = 30.0)]
    observed_tau: f64,
    /// Plan of that bench run (defaults to --preset).
    #[arg(long, value_enum)]
    observed_preset: Option<Preset>,
}

fn parse_activity(s: &str) -> Result<ActivityProfile, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [name, current, duration] = parts[..] else {
        return Err(format!("expected name:current_A:duration_s, got '{s}'"));
    };
    let num = |what: &str, v: &str| -> Result<f64, String> {
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
            _ => Err(format!("{what} must be a non-negative number, got '{v}'")),
        }
    };
    Ok(ActivityProfile {
        name: name.to_string().into(),
        avg_current_a: num("current", current)?,
        duration_s: num("duration", duration)?,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Cmd::Run { scenario, seed, out } => run(&scenario, seed, out),
        Cmd::Lifetime(args) => lifetime(&args),
        Cmd::Compare { scenario } => compare(&scenario),
    }
}

fn load(path: &Path) -> Result<Scenario, ExitCode> {
    Scenario::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_SCENARIO)
    })
}

fn run(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let mut sc = match load(path) {
        Ok(sc) => sc,
        Err(code) => return code,
    };
    if let Some(s) = seed {
        sc.seed = s;
    }
    let dir = out.or_else(|| sc.output_dir.clone()).unwrap_or_else(|| {
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("out").join(stem)
    });
    let lifetimes = match report::lifetime_rows(&sc) {
        Ok(rows) => rows,
        Err(e) => {
            eprintln!("error: energy: {e}");
            return ExitCode::from(EXIT_SCENARIO);
        }
    };
    let output = match sim::run(sc.clone()) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_SCENARIO);
        }
    };
    let summary = report::summary(&sc, &output, &lifetimes);
    let written = write_all(&dir, &output, &summary)
        .and_then(|_| write_csv(&dir.join("lifetime.csv"), &lifetimes, LIFETIME_HEADER));
    if let Err(e) = written {
        eprintln!("error: writing {}: {e}", dir.display());
        return ExitCode::from(EXIT_RUNTIME);
    }
    print!("{summary}");
    println!("\noutputs in {}", dir.display());
    ExitCode::SUCCESS
}

fn lifetime(a: &LifetimeArgs) -> ExitCode {
    let flag_error = |msg: String| {
        eprintln!("error: {msg}");
        ExitCode::from(EXIT_SCENARIO)
    };
    if !(a.tau > 0.0 && a.tau.is_finite()) {
        return flag_error(format!("--tau must be positive, got {}", a.tau));
    }
    if !(a.capacity > 0.0 && a.capacity.is_finite()) {
        return flag_error(format!("--capacity must be positive, got {}", a.capacity));
    }
    let plan = if a.activities.is_empty() {
        report::preset_plan(a.preset.into(), a.tau)
    } else {
        CyclePlan::new(a.tau, a.activities.clone())
    };
    let mut rows = Vec::new();
    match LifetimeRow::compute("nominal", &plan, a.capacity) {
        Ok(r) => rows.push(r),
        Err(e) => return flag_error(e.to_string()),
    }
    if let Some(n) = a.observed_cycles {
        if !(a.observed_tau > 0.0) {
            return flag_error(format!("--observed-tau must be positive, got {}", a.observed_tau));
        }
        let preset = a.observed_preset.unwrap_or(a.preset);
        let observed = report::preset_plan(preset.into(), a.observed_tau);
        let q = match energy::practical_capacity(n, &observed) {
            Ok(q) => q,
            Err(e) => return flag_error(e.to_string()),
        };
        println!("practical capacity: {q:.4} C from {n} cycles of {} s", a.observed_tau);
        match LifetimeRow::compute("practical", &plan, q) {
            Ok(r) => rows.push(r),
            Err(e) => return flag_error(e.to_string()),
        }
    }
    for a in &plan.activities {
        println!(
            "  {:<28} {:>9.3} mA {:>9.4} s {:>9.4} mC",
            a.name,
            a.avg_current_a * 1e3,
            a.duration_s,
            a.charge_mc()
        );
    }
    for r in &rows {
        println!("{} ({:.4} C):", r.basis, r.capacity_c);
        println!("  Q_T      {:.5} mC per {} s cycle", r.cycle_charge_mc, r.tau_s);
        println!("  cycles   {}", r.cycles);
        println!(
            "  lifetime {:.0} s = {:.2} days = {:.2} months = {:.3} years",
            r.lifetime_s,
            r.lifetime_s / SECONDS_PER_DAY,
            r.lifetime_s / SECONDS_PER_MONTH,
            r.lifetime_s / SECONDS_PER_YEAR
        );
    }
    ExitCode::SUCCESS
}

fn compare(path: &Path) -> ExitCode {
    let sc = match load(path) {
        Ok(sc) => sc,
        Err(code) => return code,
    };
    match report::compare(&sc) {
        Ok(c) => {
            print!("{}", report::comparison_text(&sc, &c));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: energy: {e}");
            ExitCode::from(EXIT_SCENARIO)
        }
    }
}
