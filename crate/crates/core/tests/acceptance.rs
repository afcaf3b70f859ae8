//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use loraloc_core::energy::{
    self, CyclePlan, CAD_ONLY_RESPONSE, INSTRUCTION_CHECK_REQUEST, NOMINAL_CAPACITY_C, PTP_RANGING,
    RESPONSE_WITH_PACKET, SECONDS_PER_DAY, SECONDS_PER_MONTH, SECONDS_PER_YEAR, SLEEP_CURRENT_A, SUPPLY_V,
};
use loraloc_core::frame::{decode_mac, encode_mac, PhyFrame, MAX_DATA_LEN, MAX_PHY_PAYLOAD};
use loraloc_core::localization::{hyperbolic_locate, multilaterate};
use loraloc_core::ranging::{corrected_distance, drift_error, fit_calibration, passive_delta_t, RangingTiming};
use loraloc_core::report;
use loraloc_core::sim::channel::measure_exchange;
use loraloc_core::sim::output::write_all;
use loraloc_core::sim::scenario::CommandSpec;
use loraloc_core::sim::{self, SimOutput};
use loraloc_core::types::SPEED_OF_LIGHT;
use loraloc_core::{Anchor, LocalClock, MacFrame, Position, RadioConfig, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn bundled(name: &str) -> Scenario {
    Scenario::load(&scenarios_dir().join(format!("{name}.scn"))).expect("bundled scenario loads")
}

fn run(sc: Scenario) -> SimOutput {
    sim::run(sc).expect("scenario runs")
}

fn frame_codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut lost = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(0..=MAX_DATA_LEN);
        let data: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let f = MacFrame {
            network_id: rng.random(),
            dest_addr: rng.random(),
            src_addr: rng.random(),
            opcode: rng.random(),
            data,
        };
        let phy = PhyFrame::new(12, &f).unwrap();
        let back = PhyFrame::from_bytes(12, &phy.to_bytes()).and_then(|p| p.mac());
        if back.as_ref() != Ok(&f) {
            lost += 1;
        }
    }
    let max = vec![0xa5u8; MAX_PHY_PAYLOAD];
    let accepts_253 = MAX_PHY_PAYLOAD == 253 && decode_mac(&max).is_ok_and(|f| encode_mac(&f).unwrap() == max);
    let rejects_254 = decode_mac(&[0u8; 254]).is_err()
        && encode_mac(&MacFrame::new(1, 2, 3, loraloc_core::Opcode::RangingBatch, vec![0; MAX_DATA_LEN + 1])).is_err();
    let mut undetected = 0;
    for _ in 0..1_000 {
        let len = rng.random_range(0..=MAX_DATA_LEN);
        let f = MacFrame::new(1, rng.random(), rng.random(), loraloc_core::Opcode::RangingResult, vec![7; len]);
        let mut bytes = PhyFrame::new(12, &f).unwrap().to_bytes();
        let bit = rng.random_range(0..bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        if PhyFrame::from_bytes(12, &bytes).is_ok() {
            undetected += 1;
        }
    }
    outcome(
        lost == 0 && accepts_253 && rejects_254 && undetected == 0,
        format!("{lost}/10000 round trips lost, 253 B accepted {accepts_253}, 254 B rejected {rejects_254}, {undetected}/1000 bit flips undetected"),
    )
}

fn ranging_oracle() -> Outcome {
    let t_b = RangingTiming::slave_duration(&RadioConfig::ranging());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_d, mut worst_gap) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let d = rng.random_range(0.0..=1000.0);
        let delta = rng.random_range(-80.0..=80.0) * 1e-6;
        let t_a = 2.0 * d / SPEED_OF_LIGHT + (1.0 + delta) * t_b;
        let got = corrected_distance(t_a, t_b, delta).unwrap();
        let raw = SPEED_OF_LIGHT * (t_a - t_b) / 2.0;
        worst_d = worst_d.max((got - d).abs());
        worst_gap = worst_gap.max(((raw - got) - drift_error(delta, t_b)).abs());
    }
    outcome(
        worst_d <= 1e-6 && worst_gap <= 1e-9,
        format!("max recovery error {worst_d:.2e} m, max drift-gap error {worst_gap:.2e} m"),
    )
}

fn drift_magnitude() -> Outcome {
    let t_b = RangingTiming::slave_duration(&RadioConfig::ranging());
    let dd = drift_error(10e-6, t_b);
    outcome((dd - 4.01).abs() <= 0.02, format!("10 ppm at SF8/1625 kHz: {dd:.4} m (4.01 +- 0.02)"))
}

/// Equal to `expected` at four significant figures.
fn sig4(value: f64, expected: f64) -> bool {
    let unit = 10f64.powf(expected.abs().log10().floor() - 3.0);
    (value - expected).abs() <= 0.5 * unit + 1e-12
}

fn energy_table() -> Outcome {
    let rows = [
        (&INSTRUCTION_CHECK_REQUEST, 0.9635, 2.8905),
        (&CAD_ONLY_RESPONSE, 0.18, 0.54),
        (&RESPONSE_WITH_PACKET, 1.59, 4.77),
        (&PTP_RANGING, 8.338, 25.01),
    ];
    let mut bad = Vec::new();
    for (p, q, e) in rows {
        if !sig4(p.charge_mc(), q) || !sig4(p.energy_mj(SUPPLY_V), e) {
            bad.push(format!("{} Q={} E={}", p.name, p.charge_mc(), p.energy_mj(SUPPLY_V)));
        }
    }
    if SLEEP_CURRENT_A != 2.5e-6 {
        bad.push(format!("sleep current {SLEEP_CURRENT_A}"));
    }
    let detail = if bad.is_empty() {
        "Q 0.9635/0.18/1.59/8.338 mC, E 2.8905/0.54/4.77/25.01 mJ, sleep 2.5 uA".to_string()
    } else {
        bad.join("; ")
    };
    outcome(bad.is_empty(), detail)
}

fn lifetime_arithmetic() -> Outcome {
    let idle = CyclePlan::idle(600.0);
    let q_t = energy::cycle_charge(&idle).unwrap();
    let f_cyc = energy::battery_cycles(NOMINAL_CAPACITY_C, &idle).unwrap();
    let t_e = energy::lifetime(&idle, NOMINAL_CAPACITY_C).unwrap() / SECONDS_PER_YEAR;
    let q_prac = energy::practical_capacity(86_867, &CyclePlan::idle(30.0)).unwrap();
    let months = energy::lifetime(&idle, q_prac).unwrap() / SECONDS_PER_MONTH;
    let q_rng = energy::practical_capacity(7_891, &CyclePlan::ranging(30.0)).unwrap();
    let days = energy::lifetime(&CyclePlan::ranging(600.0), q_rng).unwrap() / SECONDS_PER_DAY;
    let checks = [
        within(q_t, 2.6434, 5e-4),
        within(f_cyc as f64, 306_427.0, 5e-4),
        within(t_e, 5.83, 5e-3),
        within(q_prac, 105.83, 1e-3),
        within(months, 9.26, 1e-2),
        within(q_rng, 75.41, 2e-3),
        within(days, 47.6, 1e-2),
    ];
    outcome(
        checks.iter().all(|c| *c),
        format!(
            "Q_T {q_t:.5} mC, f_cyc {f_cyc}, t_E {t_e:.3} y, Q_prac {q_prac:.3} C, {months:.3} months, ranging {q_rng:.3} C / {days:.2} days"
        ),
    )
}

fn master_start(out: &SimOutput) -> Option<f64> {
    out.events
        .iter()
        .find(|e| e.entity == "node1" && e.kind == "task_start" && e.detail.starts_with("master"))
        .map(|e| e.time_s)
}

fn countdown_robustness() -> Outcome {
    let dynamic = run(bundled("countdown_retry"));
    let retried = dynamic
        .events
        .iter()
        .any(|e| e.entity == "node1" && e.kind == "timer" && e.detail == "check attempt=1" && (e.time_s - 32.0).abs() < 1e-6);
    let jammed = dynamic.events.iter().any(|e| e.entity == "node1" && e.detail == "lost" && (e.time_s - 31.0).abs() < 0.1);
    let a = master_start(&dynamic).unwrap_or(f64::NAN);
    let ok = dynamic.exchanges.iter().filter(|x| x.outcome == "ok").count();
    let stat = run(bundled("countdown_static"));
    let a_static = master_start(&stat).unwrap_or(f64::NAN);
    outcome(
        retried && jammed && (a - 45.0).abs() <= 0.05 && ok == 1 && (a_static - 47.0).abs() <= 0.05,
        format!(
            "downlink lost at 31 s {jammed}, retry at 32 s {retried}; dynamic pair at {a:.4} s ({ok} ok); static A at {a_static:.4} s ({})",
            stat.exchanges.first().map_or("no exchange", |x| x.outcome.as_str())
        ),
    )
}

fn drift_tolerance() -> Outcome {
    let days = 7.0;
    let mut sc = Scenario::from_str_named(
        r#"
seed = 7
horizon_s = 605400.0
trace_energy = false

[[node]]
id = 1
position = [0.0, 0.0, 1.0]
role = "anchor"
interval_s = 600.0
ppm = 10.0
last_check_s = -580.0

[[node]]
id = 2
position = [120.0, 0.0, 1.0]
interval_s = 600.0
ppm = -10.0
last_check_s = -10.0
"#,
        "drift",
    )
    .unwrap();
    // requests span 7 days; the horizon adds one cycle so the last can run.
    // Asked right after node 2's check, so node 1 carries a ~585 s countdown.
    let requests = (days * SECONDS_PER_DAY / 600.0) as u32;
    sc.commands.push(CommandSpec {
        at_s: 5.0,
        line: "request_ranging target=2 anchors=1".into(),
        every_s: Some(600.0),
        count: requests,
    });
    let out = run(sc);
    let max_countdown = out
        .tasks
        .iter()
        .filter(|t| t.node == 1)
        .map(|t| t.due_s)
        .zip(out.events.iter().filter(|e| e.entity == "node1" && e.detail == "ok opcode=instruction_response").map(|e| e.time_s))
        .map(|(due, rx)| due - rx)
        .fold(0.0, f64::max);
    let ok = out.exchanges.iter().filter(|x| x.outcome == "ok").count();
    let a = LocalClock::new(10.0, 0.0);
    let b = LocalClock::new(-10.0, 0.0);
    let diverged_at = (1..=(days * 24.0 * 60.0) as u32)
        .map(|m| f64::from(m) * 60.0)
        .find(|t| a.divergence(&b, *t) > 1.0)
        .unwrap_or(f64::INFINITY);
    let all = ok == requests as usize && out.exchanges.len() == requests as usize && out.results.len() == requests as usize;
    outcome(
        all && diverged_at <= 3.5 * SECONDS_PER_DAY && max_countdown > 550.0,
        format!(
            "{ok}/{requests} exchanges ok, longest countdown {max_countdown:.0} s, clocks 1 s apart after {:.2} days",
            diverged_at / SECONDS_PER_DAY
        ),
    )
}

/// Calibration design: 10..180 m in 10 m steps, 20 measurements per step,
/// each the mean of 10 repeats.
const CAL_DISTANCES: std::ops::RangeInclusive<u32> = 1..=18;
const CAL_PER_STEP: usize = 20;
const REPEATS: u8 = 10;
const TARGET_R2: f64 = 0.9945;

/// Per-repeat timing noise that yields `TARGET_R2` under the calibration design.
fn tuned_sigma_s() -> f64 {
    let d: Vec<f64> = CAL_DISTANCES.map(|i| f64::from(i) * 10.0).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
    let per_measurement = (var * (1.0 / TARGET_R2 - 1.0)).sqrt();
    2.0 * per_measurement * f64::from(REPEATS).sqrt() / SPEED_OF_LIGHT
}

fn calibration_r2(sigma_s: f64, seed: u64) -> loraloc_core::ranging::CalibrationModel {
    let radio = RadioConfig::ranging();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for i in CAL_DISTANCES {
        let d = f64::from(i) * 10.0;
        for _ in 0..CAL_PER_STEP {
            let m = measure_exchange(&radio, d, 0.0, sigma_s, REPEATS, -80.0, &mut rng).unwrap();
            samples.push((m.distance_m, d));
        }
    }
    fit_calibration(&samples).unwrap()
}

fn localization_batch(seed: u64, noise_ns: f64, cal: &loraloc_core::ranging::CalibrationModel) -> (f64, usize) {
    let mut sc = bundled("localization_4anchor");
    sc.seed = seed;
    sc.channel.timing_noise_ns = noise_ns;
    sc.trace_energy = false;
    sc.horizon_s = 1200.0;
    for (n, ppm) in sc.nodes.iter_mut().zip([10.0, -10.0, 5.0, -5.0, 0.0, 0.0]) {
        n.ppm = ppm;
    }
    // 15 requests per target, 4 anchors each: 60 measurements per target
    sc.commands = [(10u16, 0.0), (11, 0.5)]
        .into_iter()
        .map(|(t, at)| CommandSpec {
            at_s: at,
            line: format!("request_ranging target={t} anchors=1,2,3,4"),
            every_s: Some(60.0),
            count: 15,
        })
        .collect();
    let anchors: Vec<Anchor> = sc
        .nodes
        .iter()
        .filter(|n| n.role == loraloc_core::sim::scenario::RoleSpec::Anchor)
        .map(|n| Anchor::new(n.id, n.position.x, n.position.y))
        .collect();
    let truth: BTreeMap<u16, (f64, f64)> = sc.nodes.iter().map(|n| (n.id, (n.position.x, n.position.y))).collect();
    let out = run(sc);
    let mut sq = 0.0;
    let mut used = 0;
    for target in [10u16, 11] {
        let mut per: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
        for r in out.results.iter().filter(|r| r.kind == "ptp" && r.slave == target) {
            per.entry(r.master).or_default().push(cal.apply(r.distance_m.unwrap()));
        }
        used += per.values().map(Vec::len).sum::<usize>();
        let (a, d): (Vec<Anchor>, Vec<f64>) = anchors
            .iter()
            .filter_map(|a| per.get(&a.node_id).map(|v| (*a, v.iter().sum::<f64>() / v.len() as f64)))
            .unzip();
        let (tx, ty) = truth[&target];
        sq += match multilaterate(&a, &d) {
            Ok(est) => est.error_to(tx, ty).powi(2),
            Err(_) => f64::INFINITY,
        };
    }
    ((sq / 2.0).sqrt(), used)
}

fn localization() -> Outcome {
    let sigma = tuned_sigma_s();
    let r2: Vec<f64> = (0..20).map(|s| calibration_r2(sigma, 800 + s).r_squared).collect();
    let r2_mean = r2.iter().sum::<f64>() / r2.len() as f64;
    let cal = calibration_r2(sigma, 899);
    let scenario_ns = bundled("localization_4anchor").channel.timing_noise_ns;
    let mut rmses = Vec::new();
    let mut min_used = usize::MAX;
    for b in 0..100 {
        let (rmse, used) = localization_batch(1000 + b, sigma * 1e9, &cal);
        rmses.push(rmse);
        min_used = min_used.min(used);
    }
    rmses.sort_by(f64::total_cmp);
    let median = (rmses[49] + rmses[50]) / 2.0;
    let (noiseless, _) = localization_batch(5, 0.0, &loraloc_core::ranging::CalibrationModel::IDENTITY);
    outcome(
        (r2_mean - TARGET_R2).abs() <= 0.003
            && (scenario_ns - sigma * 1e9).abs() < 0.1
            && median <= 5.0
            && min_used >= 120
            && noiseless <= 1e-3,
        format!(
            "sigma {:.1} ns, calibration r2 {r2_mean:.4} (slope {:.4}), median RMSE {median:.2} m over 100 batches ({min_used}+ measurements, 60 per target), noiseless {noiseless:.1e} m",
            sigma * 1e9,
            cal.slope
        ),
    )
}

fn passive() -> Outcome {
    let out = run(bundled("passive_listener"));
    let colocated = out
        .results
        .iter()
        .find(|r| r.kind == "passive" && r.reporter == 3)
        .and_then(|r| r.delta_t_s)
        .unwrap_or(f64::NAN);
    let p = |x: f64, y: f64| Position { x, y, z: 0.0 };
    let anchors = [Anchor::new(1, 0.0, 0.0), Anchor::new(2, 180.0, 0.0), Anchor::new(3, 180.0, 180.0), Anchor::new(4, 0.0, 180.0)];
    let target = p(57.0, 121.0);
    let pairs: Vec<(Anchor, Anchor)> = (0..4).map(|i| (anchors[i], anchors[(i + 1) % 4])).collect();
    let dts: Vec<f64> = pairs.iter().map(|(m, s)| passive_delta_t(&p(m.x, m.y), &p(s.x, s.y), &target)).collect();
    let err = hyperbolic_locate(&pairs, &dts).map_or(f64::INFINITY, |e| e.error_to(target.x, target.y));
    outcome(
        colocated.abs() <= 1e-12 && err <= 1e-3,
        format!("listener at slave: dt {colocated:.1e} s; 4-pair hyperbolic fix off by {err:.1e} m"),
    )
}

fn baseline_comparison() -> Outcome {
    let sc = bundled("baseline_cad");
    let c = report::compare(&sc).unwrap();
    let charge_ratio = c.cad.cycle_charge_mc / c.framework.cycle_charge_mc;
    outcome(
        c.cad_ratio() >= 100.0,
        format!(
            "framework {:.2} days vs CAD {:.2} h: {:.1}x on integer cycles ({:.1}x per-cycle charge); always-on {:.2} h",
            c.framework.days(),
            c.cad.lifetime_s / 3600.0,
            c.cad_ratio(),
            charge_ratio,
            c.always_on_s / 3600.0
        ),
    )
}

fn determinism() -> Outcome {
    let mut names: Vec<String> = std::fs::read_dir(scenarios_dir())
        .unwrap()
        .filter_map(|e| e.ok()?.path().file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for name in &names {
        let sc = bundled(name);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            let out = run(sc.clone());
            write_all(d.path(), &out, "").unwrap();
        }
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("events.csv")).unwrap();
        if read(&dirs[0]) != read(&dirs[1]) {
            differing.push(name.clone());
        }
    }
    outcome(
        differing.is_empty() && names.len() >= 7,
        format!("{} bundled scenarios, events.csv differs for {:?}", names.len(), differing),
    )
}

fn silence_coupling() -> Outcome {
    let tau = 600.0;
    let sc = Scenario::from_str_named(
        "seed = 12\nhorizon_s = 6100.0\n[[node]]\nid = 1\nposition = [25.0, 0.0, 1.0]\nfirst_check_s = 600.0\n",
        "idle",
    )
    .unwrap();
    let out = run(sc);
    let checks: Vec<f64> = out.energy[&1]
        .iter()
        .filter(|r| r.activity == INSTRUCTION_CHECK_REQUEST.name)
        .map(|r| r.charge_mc_cumulative)
        .collect();
    let expected = 0.9635 + 0.18 + SLEEP_CURRENT_A * 1e3 * (tau - 0.056);
    let per_cycle: Vec<f64> = checks.windows(2).map(|w| w[1] - w[0]).collect();
    let worst = per_cycle.iter().map(|q| (q - expected).abs() / expected).fold(0.0, f64::max);
    outcome(
        per_cycle.len() >= 8 && worst <= 1e-3,
        format!("{} cycles from the trace, {:.5} mC each (expected {expected:.5}), worst deviation {:.1e}", per_cycle.len(), per_cycle[0], worst),
    )
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("frame codec", Duration::from_secs(5), frame_codec),
        ("ranging math oracle", Duration::from_secs(5), ranging_oracle),
        ("drift error magnitude", Duration::from_secs(5), drift_magnitude),
        ("energy table", Duration::from_secs(5), energy_table),
        ("lifetime arithmetic", Duration::from_secs(1), lifetime_arithmetic),
        ("countdown robustness", Duration::from_secs(30), countdown_robustness),
        ("drift tolerance", Duration::from_secs(60), drift_tolerance),
        ("end-to-end localization", Duration::from_secs(120), localization),
        ("passive ranging", Duration::from_secs(30), passive),
        ("baseline comparison", Duration::from_secs(30), baseline_comparison),
        ("determinism", Duration::from_secs(120), determinism),
        ("silence/energy coupling", Duration::from_secs(30), silence_coupling),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        let took = t.elapsed();
        let pass = o.pass && took <= *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {} [{:.2} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
