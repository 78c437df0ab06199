//! Named invariant checks with slacks, run as one suite.
//!
//! Every check reports the smallest slack over its cases; a case passes when
//! its slack is at least `−tolerance`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gen::{random_block_policy, random_instance, random_ratio_sequence, random_step_policy, random_supports, StepMix};
use crate::planner::{solve_coupled, CoupledConfig, Relaxation, StructureParams};
use crate::prior_dag::{Hypothesis, OutcomeDag};
use crate::scheduler::{concave_chain_slack, mincount_slack, settle};
use crate::sim::{brute_force_opt, make_tight_example, play_once_then_exploit_value};
use crate::transforms::{run_pipeline, well_structured_report, Compaction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub worst_slack: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// The case with the smallest slack.
    pub worst_case: String,
}

/// Running tally of one check.
pub struct Tally {
    name: String,
    tolerance: f64,
    cases: usize,
    failures: usize,
    worst: f64,
    worst_case: String,
}

impl Tally {
    pub fn new(name: &str, tolerance: f64) -> Self {
        Tally {
            name: name.into(),
            tolerance,
            cases: 0,
            failures: 0,
            worst: f64::INFINITY,
            worst_case: String::new(),
        }
    }

    pub fn record(&mut self, slack: f64, case: impl FnOnce() -> String) {
        self.cases += 1;
        // NaN counts as a failure.
        if !(slack >= -self.tolerance) {
            self.failures += 1;
        }
        if !(slack >= self.worst) {
            self.worst = slack;
            self.worst_case = case();
        }
    }

    pub fn finish(self) -> CheckResult {
        CheckResult {
            passed: self.failures == 0 && self.cases > 0,
            name: self.name,
            cases: self.cases,
            failures: self.failures,
            worst_slack: self.worst,
            tolerance: self.tolerance,
            worst_case: self.worst_case,
        }
    }
}

/// How many cases each check draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Quick,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub scale: Scale,
    pub params: StructureParams,
    /// Add the corrupted DAG fixture to the martingale check.
    pub inject_fault: bool,
}

impl VerifyConfig {
    pub fn new(seed: u64, scale: Scale) -> Self {
        VerifyConfig {
            seed,
            scale,
            params: StructureParams::default(),
            inject_fault: false,
        }
    }

    fn pick(&self, quick: usize, full: usize) -> usize {
        match self.scale {
            Scale::Quick => quick,
            Scale::Full => full,
        }
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(salt);
        rng
    }
}

/// Beta(1,1) DAG whose success child of the root has a wrong mean.
pub fn martingale_fault_fixture() -> OutcomeDag {
    let mut dag = OutcomeDag::beta(1, 1, 4, 1.0).expect("fixture DAG");
    let (child, _) = dag.child(dag.root(), crate::prior_dag::Outcome::Success).expect("root has a success child");
    dag.set_mean(child, 0.9);
    dag
}

fn sample_dags(cfg: &VerifyConfig) -> Result<Vec<(String, OutcomeDag)>> {
    let depth = cfg.pick(10, 24) as u32;
    let mut out = Vec::new();
    for a1 in 1..=4 {
        for a0 in 1..=4 {
            out.push((format!("beta({a1},{a0})"), OutcomeDag::beta(a1, a0, depth, 1.0)?));
        }
    }
    let mut rng = cfg.rng(1);
    for k in 0..cfg.pick(4, 16) {
        let m = rng.random_range(2..=3);
        let hyps: Vec<Hypothesis> = (0..m)
            .map(|_| Hypothesis {
                weight: rng.random_range(0.05..1.0),
                theta: rng.random_range(0.0..=1.0),
            })
            .collect();
        let total: f64 = hyps.iter().map(|h| h.weight).sum();
        let hyps: Vec<Hypothesis> = hyps
            .into_iter()
            .map(|h| Hypothesis {
                weight: h.weight / total,
                theta: h.theta,
            })
            .collect();
        out.push((format!("mixture#{k}"), OutcomeDag::mixture(&hyps, depth.min(12), 1.0)?));
    }
    Ok(out)
}

/// Posterior means are martingales on every generated DAG.
pub fn check_martingale(cfg: &VerifyConfig) -> Result<CheckResult> {
    let tol = 1e-12;
    let mut t = Tally::new("martingale", 0.0);
    let mut dags = sample_dags(cfg)?;
    if cfg.inject_fault {
        dags.push(("fault-fixture".into(), martingale_fault_fixture()));
    }
    for (label, dag) in &dags {
        let worst = dag.validate_martingale()?;
        t.record(tol - worst, || format!("{label}: violation {worst:.3e}"));
    }
    Ok(t.finish())
}

/// Unbudgeted block reward `r(u, ℓ) = ℓ·r_u·b`.
pub fn check_kernel_linearity(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut t = Tally::new("kernel_linearity", 1e-9);
    for (label, dag) in sample_dags(cfg)? {
        let max_ell = 5u32;
        for u in 0..dag.len() {
            let s = dag.state(u);
            if s.depth + max_ell > dag.max_depth() {
                continue;
            }
            for ell in 0..=max_ell {
                let r = dag.advance(u, ell)?.reward;
                let expect = ell as f64 * s.mean * dag.bid();
                t.record(-(r - expect).abs(), || format!("{label} state {u} ℓ={ell}: {r} vs {expect}"));
            }
        }
    }
    Ok(t.finish())
}

/// Random single-arm block policy with its DAG.
fn random_case(rng: &mut ChaCha8Rng) -> Result<(OutcomeDag, crate::policy::SingleArmPolicy, String)> {
    let a1 = rng.random_range(1..=3);
    let a0 = rng.random_range(1..=3);
    let bid = [0.5, 1.0, 2.0][rng.random_range(0..3)];
    let delay = rng.random_range(0..=2);
    let horizon = rng.random_range(3..=12);
    let max_block = rng.random_range(1..=delay + 1);
    let dag = if rng.random_bool(0.3) {
        let budget = bid * rng.random_range(1..=3) as f64;
        OutcomeDag::beta(a1, a0, horizon, bid)?.fold_budget(budget, bid)
    } else {
        OutcomeDag::beta(a1, a0, horizon, bid)?
    };
    let p = random_block_policy(&dag, delay, horizon, max_block, rng)?;
    Ok((dag, p, format!("beta({a1},{a0}) b={bid} δ={delay} T={horizon} ℓmax={max_block}")))
}

/// Truncating to a `β` fraction keeps `R' ≥ βR` and `N' ≤ N`.
pub fn check_truncation(cfg: &VerifyConfig) -> Result<CheckResult> {
    check_truncation_cases(cfg, cfg.pick(40, 200))
}

pub fn check_truncation_cases(cfg: &VerifyConfig, cases: usize) -> Result<CheckResult> {
    let mut rng = cfg.rng(2);
    let mut t = Tally::new("truncation", 1e-9);
    for case in 0..cases {
        let (dag, p, label) = random_case(&mut rng)?;
        let beta: f64 = rng.random_range(0.05..=1.0);
        let v = p.evaluate(&dag)?;
        let w = p.truncate(&dag, beta)?.evaluate(&dag)?;
        let slack = (w.reward - beta * v.reward).min(v.plays - w.plays);
        t.record(slack, || {
            format!("case {case} {label} β={beta:.3}: R={} R'={} N={} N'={}", v.reward, w.reward, v.plays, w.plays)
        });
    }
    Ok(t.finish())
}

/// Given the true mean, reward equals `μ·b·E[plays]` on unbudgeted DAGs.
pub fn check_claim_identity(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = cfg.rng(3);
    let mut t = Tally::new("conditional_identity", 1e-9);
    let mut case = 0;
    while t.cases < cfg.pick(100, 500) {
        let (dag, p, label) = random_case(&mut rng)?;
        if dag.states().iter().any(|s| s.effective_reward != dag.bid()) {
            continue;
        }
        for k in 0..=10 {
            let mu = k as f64 / 10.0;
            let c = p.evaluate_conditional(&dag, mu)?;
            let gap = c.identity_gap.unwrap_or(f64::INFINITY);
            t.record(-gap, || format!("case {case} {label} μ={mu}: gap {gap:.3e}"));
        }
        case += 1;
    }
    Ok(t.finish())
}

/// Parameters of the random step policies behind the transform checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformCases {
    pub cases: usize,
    pub max_delay: u32,
    pub max_horizon: u32,
    /// Relaxed compaction is skipped above this horizon, where its output
    /// and per-path audit get expensive.
    pub relaxed_horizon_cap: u32,
}

/// Rewrite bounds, the end-to-end composition and both block audits.
pub fn check_transforms(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let cases = match cfg.scale {
        Scale::Quick => TransformCases {
            cases: 12,
            max_delay: 2,
            max_horizon: 12,
            relaxed_horizon_cap: 12,
        },
        Scale::Full => TransformCases {
            cases: 100,
            max_delay: 3,
            max_horizon: 24,
            relaxed_horizon_cap: 18,
        },
    };
    check_transform_cases(cfg, cases)
}

pub fn check_transform_cases(cfg: &VerifyConfig, cases: TransformCases) -> Result<Vec<CheckResult>> {
    let mut rng = cfg.rng(4);
    let params = cfg.params;
    let mut bounds = Tally::new("transform_bounds", 1e-9);
    let mut composed = Tally::new("transform_composition", 1e-9);
    let mut strict = Tally::new("block_count_strict", 0.0);
    let mut relaxed = Tally::new("block_count_relaxed", 0.0);
    let mut relaxed_bounds = Tally::new("compaction_relaxed_bounds", 1e-9);
    for case in 0..cases.cases {
        let delay = rng.random_range(1..=cases.max_delay);
        let horizon = rng.random_range((2 * delay + 2).max(4)..=cases.max_horizon);
        let a1 = rng.random_range(1..=2);
        let a0 = rng.random_range(1..=3);
        let mix = StepMix {
            play: rng.random_range(0.4..0.8),
            wait: rng.random_range(0.1..0.3),
        };
        let depth = (1 + (2.0 / params.alpha).floor() as u32) * horizon + 4;
        let dag = OutcomeDag::beta(a1, a0, depth, 1.0)?;
        let step = random_step_policy(&dag, delay, horizon, mix, &mut rng)?;
        let label = format!("case {case} beta({a1},{a0}) δ={delay} T={horizon}");
        let res = run_pipeline(&step, &dag, &params)?;
        for r in &res.reports {
            bounds.record(r.worst_slack(), || format!("{label} {}", r.transform));
        }
        composed.record(res.composition.worst_slack(), || label.clone());
        strict.record(res.audit.worst_slack as f64, || format!("{label} {:?}", res.audit));
        if horizon <= cases.relaxed_horizon_cap {
            let (_, audit, report) = well_structured_report(&res.block, &dag, params.alpha, 0.0, Compaction::Relaxed)?;
            relaxed.record(audit.worst_slack as f64, || format!("{label} {audit:?}"));
            relaxed_bounds.record(report.worst_slack(), || label.clone());
        }
    }
    Ok(vec![
        bounds.finish(),
        composed.finish(),
        strict.finish(),
        relaxed.finish(),
        relaxed_bounds.finish(),
    ])
}

/// The concave-chain inequality for nonincreasing ratio sequences.
pub fn check_concave_chain(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = cfg.rng(5);
    let mut t = Tally::new("concave_chain", 1e-9);
    for case in 0..cfg.pick(1000, 2000) {
        let len = rng.random_range(1..=8);
        let (r, w) = random_ratio_sequence(&mut rng, len);
        let k = rng.random_range(1..=len + 1);
        let s = concave_chain_slack(&r, &w, k)?;
        t.record(s, || format!("case {case} k={k} r={r:?} w={w:?}"));
    }
    Ok(t.finish())
}

/// `E[min(B, ΣZ)] ≥ ½ΣE[Z]` exactly over small joint supports.
pub fn check_mincount(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = cfg.rng(6);
    let mut t = Tally::new("mincount", 1e-9);
    for case in 0..cfg.pick(1000, 2000) {
        let budget = rng.random_range(0.5..5.0);
        let count = rng.random_range(1..=4);
        let supports = random_supports(&mut rng, budget, count);
        let s = mincount_slack(budget, &supports)?;
        t.record(s, || format!("case {case} B={budget:.3} {supports:?}"));
    }
    Ok(t.finish())
}

/// Sequential settlement pays `min(B, ΣZ)` and never more than a bill.
pub fn check_settlement(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = cfg.rng(7);
    let mut t = Tally::new("settlement", 1e-12);
    for case in 0..cfg.pick(500, 2000) {
        let budget = rng.random_range(0.0..4.0);
        let z: Vec<f64> = (0..rng.random_range(0..=5)).map(|_| rng.random_range(0.0..2.0)).collect();
        let l = settle(budget, &z)?;
        let expect = budget.min(z.iter().sum());
        let per_bill = l.payouts.iter().zip(&z).map(|(y, z)| z - y).fold(f64::INFINITY, f64::min);
        let slack = (-(l.total() - expect).abs()).min(per_bill).min(budget - l.total());
        t.record(slack, || format!("case {case} B={budget} Z={z:?}"));
    }
    Ok(t.finish())
}

/// Tiny instantaneous-feedback instances shared by the planner checks.
pub fn tiny_instances(cfg: &VerifyConfig, count: usize) -> Vec<crate::instance::Instance> {
    let mut rng = cfg.rng(8);
    (0..count)
        .map(|k| {
            let n = rng.random_range(1..=3);
            let horizon = rng.random_range(2..=6);
            random_instance(&mut rng, &format!("tiny{k}"), n, horizon, 0)
        })
        .collect()
}

/// Planner checks on tiny `δ = 0` instances: duality sandwich, LP1 above
/// the exact optimum, and the block relaxation collapsing to LP1.
pub fn check_planner(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let mut duality = Tally::new("duality_gap", 1e-6);
    let mut upper = Tally::new("lp_above_opt", 1e-6);
    let mut degenerate = Tally::new("block_lp_degenerates", 1e-9);
    for inst in tiny_instances(cfg, cfg.pick(12, 40)) {
        let models = inst.models()?;
        let h = inst.horizon;
        let lp1 = solve_coupled(&models, &CoupledConfig::new(h, h as f64, Relaxation::Instant))?;
        let label = inst.label();
        duality.record((lp1.duality_gap).min(1e-6 * lp1.objective.max(1.0) - lp1.duality_gap.abs()), || {
            format!("{label}: objective {} dual {}", lp1.objective, lp1.dual_bound)
        });
        let opt = brute_force_opt(&models, h)?;
        upper.record(lp1.objective - opt, || format!("{label}: LP1 {} OPT {opt}", lp1.objective));
        let lp2 = solve_coupled(&models, &CoupledConfig::new(h, h as f64, Relaxation::BlockUnrestricted))?;
        let diff = (lp2.objective - lp1.objective).abs();
        degenerate.record(-diff, || format!("{label}: block {} instant {}", lp2.objective, lp1.objective));
    }
    Ok(vec![duality.finish(), upper.finish(), degenerate.finish()])
}

/// LP1 over the exact value of the structured optimum on the tight example.
pub fn check_tight_gap(cfg: &VerifyConfig) -> Result<CheckResult> {
    let sizes: &[u32] = match cfg.scale {
        Scale::Quick => &[20],
        Scale::Full => &[20, 50, 100],
    };
    let mut t = Tally::new("tight_gap", 0.0);
    for &n in sizes {
        let (lp, exact) = tight_gap_values(n)?;
        let ratio = lp / exact;
        let lo = 2.0 - 10.0 / n as f64;
        let hi = 2.0 + 1e-6;
        t.record((ratio - lo).min(hi - ratio), || format!("n={n}: LP1 {lp} exact {exact} ratio {ratio}"));
    }
    Ok(t.finish())
}

/// `(LP1 objective, exact play-once-then-exploit value)` of the `n`-arm
/// tight example.
pub fn tight_gap_values(n: u32) -> Result<(f64, f64)> {
    let inst = make_tight_example(n)?;
    let models = inst.models()?;
    let lp = solve_coupled(&models, &CoupledConfig::new(n, n as f64, Relaxation::Instant))?;
    let exact = play_once_then_exploit_value(&models[0].dag, n, n)?;
    Ok((lp.objective, exact))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub scale: Scale,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["check", "cases", "failures", "worst_slack", "tolerance", "passed"])?;
        for c in &self.checks {
            w.write_record([
                c.name.clone(),
                c.cases.to_string(),
                c.failures.to_string(),
                format!("{:e}", c.worst_slack),
                format!("{:e}", c.tolerance),
                c.passed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run every check.
pub fn run_suite(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let mut checks = vec![
        check_martingale(cfg)?,
        check_kernel_linearity(cfg)?,
        check_truncation(cfg)?,
        check_claim_identity(cfg)?,
    ];
    checks.extend(check_transforms(cfg)?);
    checks.push(check_concave_chain(cfg)?);
    checks.push(check_mincount(cfg)?);
    checks.push(check_settlement(cfg)?);
    checks.extend(check_planner(cfg)?);
    checks.push(check_tight_gap(cfg)?);
    Ok(VerifyReport {
        seed: cfg.seed,
        scale: cfg.scale,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_fixture_fails_the_martingale_check() {
        let mut cfg = VerifyConfig::new(1, Scale::Quick);
        assert!(check_martingale(&cfg).unwrap().passed);
        cfg.inject_fault = true;
        let r = check_martingale(&cfg).unwrap();
        assert!(!r.passed);
        assert_eq!(r.name, "martingale");
        assert!(r.worst_case.contains("fault-fixture"));
    }

    #[test]
    fn tally_treats_nan_as_failure() {
        let mut t = Tally::new("x", 1e-9);
        t.record(f64::NAN, || "nan".into());
        t.record(1.0, || "fine".into());
        let r = t.finish();
        assert_eq!(r.failures, 1);
        assert!(!r.passed);
    }
}
