//! End-to-end acceptance checks. Each prints one PASS/FAIL line with the
//! measured quantity and runtime; the run fails if any line is FAIL.

use std::time::{Duration, Instant};

use delayed_bandits::gen::random_instance;
use delayed_bandits::planner::{solve_coupled, solve_delayed, CoupledConfig, Relaxation, StructureParams};
use delayed_bandits::scheduler::{combine, round_sequential, ArmPlanEntry};
use delayed_bandits::sim::{brute_force_opt, run_mc, McConfig};
use delayed_bandits::verify::{
    check_concave_chain, check_kernel_linearity, check_martingale, check_mincount, check_planner, check_transform_cases,
    check_truncation_cases, tight_gap_values, tiny_instances, CheckResult, Scale, TransformCases, VerifyConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_240_601;
const TRIALS: u64 = 100_000;

fn report(name: &str, passed: bool, detail: &str, elapsed: Duration, limit: Duration) -> bool {
    let ok = passed && elapsed <= limit;
    println!(
        "[{}] {name}: {detail} ({:.2}s, limit {}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    ok
}

fn summary(checks: &[CheckResult]) -> String {
    checks
        .iter()
        .map(|c| format!("{} {}/{} worst {:.2e}", c.name, c.cases - c.failures, c.cases, c.worst_slack))
        .collect::<Vec<_>>()
        .join("; ")
}

fn full() -> VerifyConfig {
    VerifyConfig::new(SEED, Scale::Full)
}

fn tight_example_gap() -> bool {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for n in [20, 50, 100] {
        let (lp, exact) = tight_gap_values(n).unwrap();
        let ratio = lp / exact;
        ok &= ratio >= 2.0 - 10.0 / n as f64 && ratio <= 2.0 + 1e-6;
        parts.push(format!("n={n} ratio {ratio:.4}"));
    }
    report("tight_example_gap", ok, &parts.join(", "), t.elapsed(), Duration::from_secs(10))
}

fn truncation_suite() -> bool {
    let t = Instant::now();
    let c = check_truncation_cases(&full(), 200).unwrap();
    let ok = c.passed && c.cases >= 200;
    report("truncation_suite", ok, &summary(&[c]), t.elapsed(), Duration::from_secs(30))
}

fn transform_suite() -> bool {
    let t = Instant::now();
    let checks = check_transform_cases(
        &full(),
        TransformCases {
            cases: 100,
            max_delay: 3,
            max_horizon: 24,
            relaxed_horizon_cap: 18,
        },
    )
    .unwrap();
    let ok = checks.iter().all(|c| c.passed) && checks[0].cases >= 100 * 4;
    report("transform_suite", ok, &summary(&checks), t.elapsed(), Duration::from_secs(120))
}

fn sequential_rounding_on_tiny_instances() -> bool {
    let t = Instant::now();
    let instances = tiny_instances(&full(), 20);
    let mut ok = instances.len() >= 20;
    let mut worst_opt = f64::INFINITY;
    let mut worst_mc = f64::INFINITY;
    for (k, inst) in instances.iter().enumerate() {
        let models = inst.models().unwrap();
        let h = inst.horizon;
        let lp = solve_coupled(&models, &CoupledConfig::new(h, h as f64, Relaxation::Instant)).unwrap();
        let opt = brute_force_opt(&models, h).unwrap();
        worst_opt = worst_opt.min(lp.objective + 1e-6 - opt);

        let mut entries = Vec::new();
        let mut values = Vec::new();
        for (i, m) in models.iter().enumerate() {
            let p = lp.extract_randomized(i, &m.dag).unwrap();
            values.push(p.evaluate(&m.dag).unwrap());
            entries.push(ArmPlanEntry::new(m, p));
        }
        let policy = round_sequential(entries, &values, h).unwrap();
        let est = run_mc(&policy, &models, h, McConfig::new(TRIALS, SEED + k as u64)).unwrap();
        worst_mc = worst_mc.min(est.mean + 3.0 * est.stderr - 0.5 * lp.objective);
    }
    ok &= worst_opt >= 0.0 && worst_mc >= 0.0;
    let detail = format!(
        "{} instances, min(LP+1e-6-OPT) {worst_opt:.3e}, min(MC+3σ-LP/2) {worst_mc:.4}",
        instances.len()
    );
    report("sequential_rounding", ok, &detail, t.elapsed(), Duration::from_secs(300))
}

fn delayed_pipeline_soundness() -> bool {
    let t = Instant::now();
    let params = StructureParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut ok = true;
    let mut audits = 0;
    let mut worst_arm = f64::INFINITY;
    let mut worst_lp = f64::INFINITY;
    let mut count = 0;
    for k in 0..10 {
        let h = if k % 2 == 0 { 8 } else { 12 };
        let inst = random_instance(&mut rng, &format!("delayed-{k}"), 2, h, 1);
        let depth = (1 + (2.0 / params.alpha).floor() as u32) * h + 4;
        let models = inst.models_with_depth(depth).unwrap();
        let plan = solve_delayed(&models, h, &params).unwrap();

        let entries = models.iter().zip(&plan.policies).map(|(m, p)| ArmPlanEntry::new(m, p.clone())).collect();
        let policy = combine(entries, h, 0.25).unwrap();
        let est = run_mc(&policy, &models, h, McConfig::new(TRIALS, SEED + k as u64).audited()).unwrap();
        audits += est.audit.map(|a| a.total()).unwrap_or(1) + est.overruns;
        for (a, r) in est.arms.iter().zip(plan.arm_rewards()) {
            worst_arm = worst_arm.min(a.reward.mean + 3.0 * a.reward.stderr - r / 8.0);
        }

        let opt = brute_force_opt(&inst.models().unwrap(), h).unwrap();
        worst_lp = worst_lp.min(plan.relaxed.objective - opt / 8.0);
        count += 1;
    }
    ok &= audits == 0 && worst_arm >= 0.0 && worst_lp >= 0.0;
    let detail = format!(
        "{count} instances, audit violations {audits}, min(arm+3σ-R/8) {worst_arm:.3e}, min(LP2-OPT/8) {worst_lp:.4}"
    );
    report("delayed_pipeline", ok, &detail, t.elapsed(), Duration::from_secs(600))
}

fn concave_chain_and_mincount() -> bool {
    let t = Instant::now();
    let checks = vec![check_concave_chain(&full()).unwrap(), check_mincount(&full()).unwrap()];
    let ok = checks.iter().all(|c| c.passed && c.cases >= 1000);
    report("concave_chain_and_mincount", ok, &summary(&checks), t.elapsed(), Duration::from_secs(10))
}

fn martingale_and_kernel_identities() -> bool {
    let t = Instant::now();
    let checks = vec![check_martingale(&full()).unwrap(), check_kernel_linearity(&full()).unwrap()];
    let ok = checks.iter().all(|c| c.passed);
    report("martingale_and_kernel", ok, &summary(&checks), t.elapsed(), Duration::from_secs(5))
}

fn block_relaxation_degenerates_without_delay() -> bool {
    let t = Instant::now();
    let checks: Vec<_> = check_planner(&full())
        .unwrap()
        .into_iter()
        .filter(|c| c.name == "block_lp_degenerates")
        .collect();
    let ok = checks.len() == 1 && checks[0].passed && checks[0].tolerance <= 1e-9;
    report("block_lp_degeneration", ok, &summary(&checks), t.elapsed(), Duration::from_secs(60))
}

fn main() {
    let checks: [fn() -> bool; 8] = [
        tight_example_gap,
        truncation_suite,
        transform_suite,
        sequential_rounding_on_tiny_instances,
        delayed_pipeline_soundness,
        concave_chain_and_mincount,
        martingale_and_kernel_identities,
        block_relaxation_degenerates_without_delay,
    ];
    let failed = checks.iter().filter(|f| !f()).count();
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
