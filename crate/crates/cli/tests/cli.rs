use std::path::PathBuf;
use std::process::{Command, Output};

fn loraloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loraloc")).args(args).output().unwrap()
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.scn"))
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn countdown_pair_both_at_45() {
    let dir = tempfile::tempdir().unwrap();
    let o = loraloc(&["run", &scenario("countdown_retry"), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert_eq!(summary, stdout(&o).split("\noutputs in").next().unwrap());
    assert!(summary.contains("node 2 slave at t=45.000"), "{summary}");
    assert!(summary.contains("node 1 master at t=45.0"), "{summary}");
    for f in ["events.csv", "results.csv", "locations.csv", "energy_1.csv", "energy_2.csv", "lifetime.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn lifetime_scenario_reports_practical_months() {
    let dir = tempfile::tempdir().unwrap();
    let o = loraloc(&["run", &scenario("lifetime_600"), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.trim_start().starts_with("practical:")).unwrap();
    let months: f64 = line
        .split(" = ")
        .find(|p| p.ends_with("months"))
        .and_then(|p| p.trim_end_matches(" months").parse().ok())
        .unwrap();
    assert!((months - 9.26).abs() / 9.26 < 0.01, "{line}");
    let life = std::fs::read_to_string(dir.path().join("lifetime.csv")).unwrap();
    assert!(life.lines().nth(2).unwrap().starts_with("practical,105.83"), "{life}");
}

#[test]
fn seed_override_and_repeatability() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = loraloc(&["run", &scenario("localization_4anchor"), "--seed", "77", "--out", d.path().to_str().unwrap()]);
        assert!(o.status.success());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("events.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let summary = std::fs::read_to_string(a.path().join("summary.txt")).unwrap();
    assert!(summary.starts_with("seed 77 "));
}

#[test]
fn malformed_scenario_exits_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scn");
    std::fs::write(&bad, "seed = 1\nhorizon_s = 10.0\n[[node]]\nid = 1\nposition = [0.0, 0.0, 0.0]\nppm = 500.0\n").unwrap();
    let o = loraloc(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("node[0].ppm"), "{}", stderr(&o));

    std::fs::write(&bad, "seed = 1\nhorizon_s = 10.0\nhorizon = 3\n").unwrap();
    let o = loraloc(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":3:"), "{}", stderr(&o));

    let o = loraloc(&["run", "/nonexistent/x.scn"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, "").unwrap();
    let o = loraloc(&["run", &scenario("countdown_retry"), "--out", file.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn lifetime_nominal_years() {
    let o = loraloc(&["lifetime", "--tau", "600", "--capacity", "810"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("Q_T      2.64336 mC"), "{text}");
    assert!(text.contains("cycles   306428"), "{text}");
    assert!(text.contains("= 5.826 years"), "{text}");
}

#[test]
fn lifetime_practical_capacity_from_bench_cycles() {
    let o = loraloc(&["lifetime", "--tau", "600", "--preset", "ranging", "--observed-cycles", "7891"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("practical capacity: 75.40"), "{text}");
    assert!(text.contains("47.68 days"), "{text}");
}

#[test]
fn lifetime_custom_activities() {
    let o = loraloc(&["lifetime", "--tau", "60", "--activity", "tx:0.02:0.1", "--activity", "rx:0.01:0.2"]);
    assert!(o.status.success());
    // 2 + 2 + 0.0025 * 59.7 mC
    assert!(stdout(&o).contains("Q_T      4.14925 mC"), "{}", stdout(&o));
}

#[test]
fn lifetime_flag_errors() {
    let o = loraloc(&["lifetime", "--tau", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--tau"));
    let o = loraloc(&["lifetime", "--activity", "tx:abc:1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = loraloc(&["lifetime", "--tau", "0.01"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does not fit"), "{}", stderr(&o));
}

#[test]
fn compare_prints_all_three_lifetimes() {
    let o = loraloc(&["compare", &scenario("baseline_cad")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("47.68 days"), "{text}");
    assert!(text.contains("always-on receiver (22 mA)"), "{text}");
    let ratio: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("framework / cad: "))
        .and_then(|r| r.trim_end_matches('x').parse().ok())
        .unwrap();
    assert!(ratio >= 100.0, "{ratio}");
}
