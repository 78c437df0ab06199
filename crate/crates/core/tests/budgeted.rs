use delayed_bandits::budgeted::{
    allocation_opt, plan_budgeted, run_budgeted_mc, toy_instance, AllocationInstance, Bidder, BudgetedConfig,
    ImpressionType, PairSpec,
};
use delayed_bandits::instance::ArmModel;
use delayed_bandits::planner::{solve_delayed, StructureParams};
use delayed_bandits::prior_dag::{ArmSpec, PriorSpec};
use delayed_bandits::scheduler::{combine, ArmPlanEntry};
use delayed_bandits::sim::{brute_force_opt, run_mc, GroundTruth, McConfig};

fn single(budget: Option<f64>, arrivals: u32, delay: u32) -> AllocationInstance {
    AllocationInstance {
        name: Some("single".into()),
        bidders: vec![Bidder { id: "b".into(), budget }],
        types: vec![ImpressionType {
            id: "t".into(),
            arrivals,
        }],
        pairs: vec![
            PairSpec {
                bidder: "b".into(),
                impression: "t".into(),
                bid: 1.0,
                delay,
                prior: PriorSpec::Beta { alpha1: 1, alpha0: 1 },
            },
        ],
        arrival: Default::default(),
    }
}

#[test]
fn unlimited_single_pair_reduces_to_the_delayed_pipeline() {
    let inst = single(None, 8, 1);
    let cfg = BudgetedConfig {
        participation: 1.0,
        ..BudgetedConfig::default()
    };
    let plan = plan_budgeted(&inst, &cfg).unwrap();
    let model = ArmModel::new(inst.pair_arm(&inst.pairs[0], None), 8).unwrap();
    let direct = solve_delayed(std::slice::from_ref(&model), 8, &StructureParams::default()).unwrap();
    assert!((plan.report.objective - direct.relaxed.objective).abs() < 1e-9);

    let tp = plan.types[0].as_ref().unwrap();
    let g = combine(vec![ArmPlanEntry::new(&model, direct.policies[0].clone())], 8, 1.0).unwrap();
    let est = run_mc(&g, std::slice::from_ref(&model), 8, McConfig::new(4000, 3)).unwrap();
    let b = run_budgeted_mc(&plan, &inst, 4000, 3).unwrap();
    assert_eq!(b.revenue.mean, est.mean);
    assert_eq!(b.revenue.stderr, est.stderr);
    assert_eq!(serde_json::to_string(&tp.plan.policies).unwrap(), serde_json::to_string(&direct.policies).unwrap());
}

#[test]
fn zero_conversion_truth_earns_nothing() {
    let inst = toy_instance();
    let plan = plan_budgeted(&inst, &BudgetedConfig::default()).unwrap();
    let draws = plan
        .types
        .iter()
        .enumerate()
        .map(|(j, tp)| {
            tp.as_ref().map(|tp| {
                let mut rng = delayed_bandits::sim::trial_rng(j as u64, 0);
                let truth = GroundTruth::with_means(&vec![0.0; tp.models.len()], tp.arrivals, &mut rng);
                (truth, rng)
            })
        })
        .collect();
    let out = plan.execute_with(draws).unwrap();
    assert_eq!(out.total_revenue(), 0.0);
    assert_eq!(out.total_accrued(), 0.0);
}

#[test]
fn allocation_oracle_matches_single_arm_oracle() {
    for (budget, delay) in [(None, 0), (None, 1), (Some(2.0), 1)] {
        let inst = single(budget, 5, delay);
        let arm = ArmSpec::beta("a", 1, 1).with_delay(delay).with_budget(budget);
        let m = ArmModel::new(arm, 5).unwrap();
        let expect = brute_force_opt(&[m], 5).unwrap();
        let got = allocation_opt(&inst).unwrap();
        assert!((got - expect).abs() < 1e-12, "{budget:?} {delay}: {got} vs {expect}");
    }
}

#[test]
fn toy_plan_covers_an_eighth_of_opt_and_settles_at_half() {
    let inst = toy_instance();
    let plan = plan_budgeted(&inst, &BudgetedConfig::default()).unwrap();
    let opt = allocation_opt(&inst).unwrap();
    assert!(plan.report.objective >= opt / 8.0, "M = {} OPT = {opt}", plan.report.objective);
    let est = run_budgeted_mc(&plan, &inst, 20_000, 7).unwrap();
    let m = est.settlement_margin;
    assert!(m.mean >= -3.0 * m.stderr, "{m:?}");
    for b in &est.bidders {
        assert!(b.max_overspend <= 1e-12);
    }
}

#[test]
fn instance_json_round_trips() {
    let inst = toy_instance();
    let back = AllocationInstance::from_json(&inst.to_json().unwrap()).unwrap();
    assert_eq!(inst, back);
    let bad = inst.to_json().unwrap().replace("\"b1\",\n      \"type\"", "\"zz\",\n      \"type\"");
    assert!(AllocationInstance::from_json(&bad).is_err());
}
