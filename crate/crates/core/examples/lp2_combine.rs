//! Plan a delayed-feedback instance with the block relaxation, run Combine
//! and audit every trajectory against the execution rules.

use delayed_bandits::instance::Instance;
use delayed_bandits::planner::{solve_delayed, StructureParams};
use delayed_bandits::prior_dag::ArmSpec;
use delayed_bandits::scheduler::{combine, ArmPlanEntry};
use delayed_bandits::sim::{run_mc, McConfig};

fn main() -> delayed_bandits::Result<()> {
    let h = 12;
    let inst = Instance::new(
        "two-arms",
        h,
        vec![ArmSpec::beta("a", 1, 1).with_delay(1), ArmSpec::beta("b", 2, 1).with_delay(1)],
    );
    let params = StructureParams::default();
    let depth = (1 + (2.0 / params.alpha).floor() as u32) * h + 4;
    let models = inst.models_with_depth(depth)?;
    let plan = solve_delayed(&models, h, &params)?;
    println!("relaxed objective {:.5} at play budget {:.0}", plan.relaxed.objective, plan.relaxed.budget);
    println!("scaled objective  {:.6}", plan.scaled.objective);

    let entries = models.iter().zip(&plan.policies).map(|(m, p)| ArmPlanEntry::new(m, p.clone())).collect();
    let policy = combine(entries, h, 0.25)?;
    let est = run_mc(&policy, &models, h, McConfig::new(100_000, 9).audited())?;
    println!("combine reward {:.6} +- {:.6}", est.mean, est.stderr);
    for (a, r) in est.arms.iter().zip(plan.arm_rewards()) {
        println!("  arm {}: {:.6} +- {:.6}, planned {:.6}", a.arm, a.reward.mean, a.reward.stderr, r);
    }
    let audit = est.audit.unwrap_or_default();
    println!("audit violations: {}", audit.total());
    Ok(())
}
