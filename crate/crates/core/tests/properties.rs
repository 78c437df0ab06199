use delayed_bandits::gen::{random_block_policy, random_instance, random_ratio_sequence, random_step_policy, random_supports, StepMix};
use delayed_bandits::planner::{solve_coupled, CoupledConfig, Relaxation, StructureParams};
use delayed_bandits::policy::SingleArmPolicy;
use delayed_bandits::prior_dag::{Hypothesis, OutcomeDag};
use delayed_bandits::scheduler::{concave_chain_slack, mincount_slack, settle};
use delayed_bandits::sim::{brute_force_opt, run_mc, Greedy, McConfig};
use delayed_bandits::transforms::run_pipeline;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gauss-Legendre nodes and weights on [0, 1].
fn gauss_legendre01(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (x + 1.0), 0.5 * w));
    }
    out
}

fn beta_density(a1: u32, a0: u32, x: f64) -> f64 {
    let fact = |k: u32| (1..=k).map(f64::from).product::<f64>();
    let norm = fact(a1 + a0 - 1) / (fact(a1 - 1) * fact(a0 - 1));
    norm * x.powi(a1 as i32 - 1) * (1.0 - x).powi(a0 as i32 - 1)
}

/// Random block policy on a Beta DAG, folded at a budget a third of the time.
fn block_case(seed: u64) -> (OutcomeDag, SingleArmPolicy, u32, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let a1 = rng.random_range(1..=3);
    let a0 = rng.random_range(1..=3);
    let delay = rng.random_range(0..=2);
    let horizon = rng.random_range(3..=10);
    let mut dag = OutcomeDag::beta(a1, a0, horizon, 1.0).unwrap();
    if rng.random_bool(0.33) {
        dag = dag.fold_budget(rng.random_range(1..=3) as f64, 1.0);
    }
    let p = random_block_policy(&dag, delay, horizon, delay + 1, &mut rng).unwrap();
    (dag, p, a1, a0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beta_dags_are_martingales_with_linear_kernels(a1 in 1u32..6, a0 in 1u32..6, depth in 1u32..16) {
        let dag = OutcomeDag::beta(a1, a0, depth, 1.0).unwrap();
        prop_assert!(dag.validate_martingale().unwrap() <= 1e-12);
        for d in 0..=depth {
            prop_assert_eq!(dag.states_at_depth(d), d as usize + 1);
        }
        for u in 0..dag.len() {
            let s = dag.state(u);
            let expect = f64::from(a1 + s.successes) / f64::from(a1 + a0 + s.depth);
            prop_assert!((s.mean - expect).abs() <= 1e-12);
            for ell in 0..=(depth - s.depth).min(4) {
                let adv = dag.advance(u, ell).unwrap();
                let total: f64 = adv.dist.iter().map(|x| x.1).sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
                prop_assert!((adv.reward - f64::from(ell) * s.mean).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn mixture_dags_are_martingales(w in 0.05f64..0.95, t0 in 0.0f64..=1.0, t1 in 0.0f64..=1.0, depth in 1u32..12) {
        let hyps = [Hypothesis { weight: w, theta: t0 }, Hypothesis { weight: 1.0 - w, theta: t1 }];
        let dag = OutcomeDag::mixture(&hyps, depth, 1.0).unwrap();
        prop_assert!(dag.validate_martingale().unwrap() <= 1e-12);
    }

    #[test]
    fn larger_budgets_never_lower_rewards(a1 in 1u32..4, a0 in 1u32..4, b in 1u32..4, extra in 0u32..3, bid in prop::sample::select(vec![0.5, 1.0, 2.0])) {
        let dag = OutcomeDag::beta(a1, a0, 8, bid).unwrap();
        let small = dag.fold_budget(f64::from(b) * bid, bid);
        let large = dag.fold_budget(f64::from(b + extra) * bid, bid);
        prop_assert_eq!(small.len(), large.len());
        for u in 0..small.len() {
            prop_assert!(large.state(u).effective_reward >= small.state(u).effective_reward);
        }
        for ell in 0..=8 {
            prop_assert!(large.advance(large.root(), ell).unwrap().reward >= small.advance(small.root(), ell).unwrap().reward - 1e-12);
        }
    }

    #[test]
    fn truncation_keeps_a_fraction_of_reward(seed in any::<u64>(), beta in 0.05f64..=1.0) {
        let (dag, p, _, _) = block_case(seed);
        let v = p.evaluate(&dag).unwrap();
        let w = p.truncate(&dag, beta).unwrap().evaluate(&dag).unwrap();
        prop_assert!(w.reward >= beta * v.reward - 1e-9, "R' {} < β·R {}", w.reward, beta * v.reward);
        prop_assert!(w.plays <= v.plays + 1e-9);
    }

    #[test]
    fn conditional_values_integrate_to_the_prior_value(seed in any::<u64>()) {
        let (dag, p, a1, a0) = block_case(seed);
        let prior = p.evaluate(&dag).unwrap();
        let mut reward = 0.0;
        let mut plays = 0.0;
        for (x, w) in gauss_legendre01(40) {
            let c = p.evaluate_conditional(&dag, x).unwrap();
            let mass: f64 = c.stops.iter().map(|s| s.prob).sum();
            prop_assert!((mass - 1.0).abs() <= 1e-9);
            let dens = beta_density(a1, a0, x);
            reward += w * dens * c.reward;
            plays += w * dens * c.plays;
        }
        prop_assert!((reward - prior.reward).abs() <= 1e-6, "{reward} vs {}", prior.reward);
        prop_assert!((plays - prior.plays).abs() <= 1e-6);
    }

    #[test]
    fn conditional_identity_on_unbudgeted_dags(seed in any::<u64>()) {
        let (dag, p, _, _) = block_case(seed);
        prop_assume!(dag.states().iter().all(|s| s.effective_reward == dag.bid()));
        for k in 0..=10 {
            let c = p.evaluate_conditional(&dag, k as f64 / 10.0).unwrap();
            prop_assert!(c.identity_gap.unwrap() <= 1e-9);
        }
    }

    #[test]
    fn policy_dumps_round_trip_byte_identically(seed in any::<u64>()) {
        let (_, p, _, _) = block_case(seed);
        let text = p.to_json().unwrap();
        let back = SingleArmPolicy::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn concave_chain_holds(seed in any::<u64>(), len in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, w) = random_ratio_sequence(&mut rng, len);
        for k in 1..=len + 1 {
            prop_assert!(concave_chain_slack(&r, &w, k).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn mincount_matches_enumeration_and_holds(seed in any::<u64>(), budget in 0.5f64..4.0, count in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let supports = random_supports(&mut rng, budget, count);
        // Enumerate every joint outcome.
        let mut joint = vec![(0.0f64, 1.0f64)];
        for s in &supports {
            joint = joint.iter().flat_map(|&(z, p)| s.iter().map(move |&(v, q)| (z + v, p * q))).collect();
        }
        let capped: f64 = joint.iter().map(|&(z, p)| p * z.min(budget)).sum();
        let half: f64 = 0.5 * supports.iter().map(|s| s.iter().map(|(v, q)| v * q).sum::<f64>()).sum::<f64>();
        let slack = mincount_slack(budget, &supports).unwrap();
        prop_assert!((slack - (capped - half)).abs() <= 1e-12);
        prop_assert!(slack >= -1e-9);
    }

    #[test]
    fn settlement_pays_at_most_the_budget(budget in 0.0f64..5.0, bills in prop::collection::vec(0.0f64..3.0, 0..8)) {
        let ledger = settle(budget, &bills).unwrap();
        for (y, z) in ledger.payouts.iter().zip(&bills) {
            prop_assert!(*y <= *z && *y >= 0.0);
        }
        let total: f64 = bills.iter().sum();
        prop_assert!((ledger.total() - total.min(budget)).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn strict_pipeline_bounds_hold(seed in any::<u64>(), delay in 1u32..=2, horizon in 6u32..=12) {
        let params = StructureParams::default();
        let depth = (1 + (2.0 / params.alpha).floor() as u32) * horizon + 4;
        let dag = OutcomeDag::beta(1, 1, depth, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = random_step_policy(&dag, delay, horizon, StepMix::default(), &mut rng).unwrap();
        let res = run_pipeline(&step, &dag, &params).unwrap();
        for r in res.reports.iter().chain(std::iter::once(&res.composition)) {
            prop_assert!(r.holds(1e-9), "{}: {:?}", r.transform, r.checks);
        }
        prop_assert_eq!(res.audit.violations, 0);
    }

    #[test]
    fn instant_lp_bounds_the_optimum(seed in any::<u64>(), arms in 1usize..=3, horizon in 2u32..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, "tiny", arms, horizon, 0);
        let models = inst.models().unwrap();
        let cfg = CoupledConfig::new(horizon, horizon as f64, Relaxation::Instant);
        let lp = solve_coupled(&models, &cfg).unwrap();
        prop_assert!(lp.duality_gap <= 1e-6);
        prop_assert_eq!(lp.monotonicity_violations(), 0);
        prop_assert!(lp.check_constraints(&models).unwrap().holds(1e-9));
        prop_assert!(lp.expected_plays <= horizon as f64 + 1e-6);
        let opt = brute_force_opt(&models, horizon).unwrap();
        prop_assert!(opt <= lp.objective + 1e-6, "OPT {opt} > LP {}", lp.objective);

        let unrestricted = solve_coupled(&models, &CoupledConfig::new(horizon, horizon as f64, Relaxation::BlockUnrestricted)).unwrap();
        prop_assert!((unrestricted.objective - lp.objective).abs() <= 1e-9);

        let est = run_mc(&Greedy::new(&models, horizon), &models, horizon, McConfig::new(2000, seed)).unwrap();
        prop_assert!(opt >= est.mean - 4.0 * est.stderr);
    }
}
