use std::process::{Command, Output};

use delayed_bandits::budgeted::toy_instance;
use delayed_bandits::instance::Instance;
use delayed_bandits::prior_dag::ArmSpec;
use delayed_bandits::verify::{run_suite, Scale, VerifyConfig};

fn dbandit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbandit"))
        .args(args)
        .env_remove("BANDIT_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_instance(dir: &tempfile::TempDir, name: &str, inst: &Instance) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, inst.to_json().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn two_arms(delay: u32, horizon: u32) -> Instance {
    Instance::new(
        "two",
        horizon,
        vec![ArmSpec::beta("a", 1, 1).with_delay(delay), ArmSpec::beta("b", 2, 1).with_delay(delay)],
    )
}

#[test]
fn quick_suite_passes_and_the_fault_fixture_fails() {
    let report = run_suite(&VerifyConfig::new(0, Scale::Quick)).unwrap();
    assert!(report.passed(), "{:?}", report.failed());
    let mut cfg = VerifyConfig::new(0, Scale::Quick);
    cfg.inject_fault = true;
    assert_eq!(run_suite(&cfg).unwrap().failed(), vec!["martingale"]);
}

#[test]
fn verify_exit_code_follows_the_checks() {
    let ok = dbandit(&["verify", "--scale", "quick", "--format", "csv"]);
    assert!(ok.status.success());
    assert!(stdout(&ok).starts_with("check,cases,failures,worst_slack,tolerance,passed"));
    let bad = dbandit(&["verify", "--scale", "quick", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("martingale"));
}

#[test]
fn solve_then_simulate_from_the_policy_file() {
    let dir = tempfile::tempdir().unwrap();
    let inst = write_instance(&dir, "inst.json", &two_arms(0, 6));
    let plan = dir.path().join("plan.json");
    let o = dbandit(&["solve", &inst, "--policies", plan.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["relaxation"], "instant");
    assert!(report["objective"].as_f64().unwrap() > 0.0);
    assert_eq!(report["arms"].as_array().unwrap().len(), 2);

    let args = ["simulate", &inst, "--plan", plan.to_str().unwrap(), "--trials", "500", "--seed", "4", "--format", "csv"];
    let a = dbandit(&args);
    assert!(a.status.success());
    let text = stdout(&a);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "instance,policy,trials,mean,stderr,seed,lp_objective,ratio");
    assert_eq!(lines.count(), 3);
    // Same seed, same output.
    assert_eq!(stdout(&dbandit(&args)), text);
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let inst = write_instance(&dir, "inst.json", &two_arms(1, 8));
    let run = |env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_dbandit"));
        c.args(["simulate", &inst, "--trials", "200", "--policy", "greedy", "--format", "csv"]);
        match env {
            Some(s) => c.env("BANDIT_SEED", s),
            None => c.env_remove("BANDIT_SEED"),
        };
        String::from_utf8(c.output().unwrap().stdout).unwrap()
    };
    let seeded = run(Some("17"));
    assert!(seeded.lines().nth(1).unwrap().contains(",17,"));
    assert_ne!(seeded, run(None));
}

#[test]
fn simulate_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let inst = write_instance(&dir, "inst.json", &two_arms(1, 8));
    let trace = dir.path().join("trace.jsonl");
    let o = dbandit(&["simulate", &inst, "--trials", "100", "--policy", "planned", "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&trace).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["event"].is_string());
    }
}

#[test]
fn bad_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let inst = write_instance(&dir, "inst.json", &two_arms(0, 4));
    let missing = dir.path().join("nope.json");
    let o = dbandit(&["simulate", &inst, "--plan", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));

    let o = dbandit(&["simulate", &inst, "--trials", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\n  \"horizon\": 4,\n  \"arms\": [}\n").unwrap();
    let o = dbandit(&["solve", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn tight_example_reports_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tight.json");
    let o = dbandit(&["tight-example", "--n", "20", "--write", path.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let ratio = v["ratio"].as_f64().unwrap();
    assert!((1.5..=2.0 + 1e-6).contains(&ratio));
    assert_eq!(Instance::load(&path).unwrap().arms.len(), 20);
}

#[test]
fn transform_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let inst = write_instance(&dir, "inst.json", &two_arms(2, 10));
    let o = dbandit(&["transform", &inst, "--arm", "b", "--cases", "3", "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("case,transform,check,lhs,rhs,slack"));
    for t in ["block_structuring", "delay_free", "well_structured", "truncate_half", "pipeline"] {
        assert!(text.contains(t), "missing {t}");
    }
}

#[test]
fn budgeted_reports_plan_and_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("alloc.json");
    std::fs::write(&path, toy_instance().to_json().unwrap()).unwrap();
    let o = dbandit(&["budgeted", path.to_str().unwrap(), "--trials", "2000", "--oracle"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let opt = v["opt"].as_f64().unwrap();
    assert!(v["plan"]["objective"].as_f64().unwrap() >= opt / 8.0);
    assert_eq!(v["estimate"]["trials"], 2000);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}
