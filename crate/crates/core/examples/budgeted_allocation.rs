//! Two bidders, two impression types: plan with shadow budgets, simulate
//! with bidder-side settlement and compare with the exact optimum.

use delayed_bandits::budgeted::{allocation_opt, plan_budgeted, run_budgeted_mc, toy_instance, BudgetedConfig};

fn main() -> delayed_bandits::Result<()> {
    let inst = toy_instance();
    let plan = plan_budgeted(&inst, &BudgetedConfig::default())?;
    let r = &plan.report;
    println!("relaxed objective {:.5} after {} sweeps", r.objective, r.sweeps);
    for b in &r.bidders {
        println!("  bidder {} budget {:?}: mu = {:.4}, relaxed reward {:.4}", b.bidder, b.budget, b.mu, b.relaxed_reward);
    }
    for p in &r.pairs {
        println!("  pair ({}, {}): shadow budget {:?}", p.bidder, p.impression, p.shadow_budget);
    }
    for w in &r.warnings {
        println!("warning: {w}");
    }

    let est = run_budgeted_mc(&plan, &inst, 50_000, 4)?;
    println!("revenue {:.5} +- {:.5}", est.revenue.mean, est.revenue.stderr);
    println!("revenue minus half the accrued bills: {:.5}", est.settlement_margin.mean);
    println!("exact optimum {:.5}", allocation_opt(&inst)?);
    Ok(())
}
