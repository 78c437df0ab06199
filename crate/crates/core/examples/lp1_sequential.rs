//! Solve the instantaneous relaxation of a small instance, round it into a
//! sequential policy and compare with the exact optimum.

use delayed_bandits::gen::random_instance;
use delayed_bandits::planner::{solve_coupled, CoupledConfig, Relaxation};
use delayed_bandits::scheduler::{round_sequential, ArmPlanEntry};
use delayed_bandits::sim::{brute_force_opt, run_mc, McConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> delayed_bandits::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inst = random_instance(&mut rng, "small", 3, 6, 0);
    let models = inst.models()?;
    let h = inst.horizon;

    let lp = solve_coupled(&models, &CoupledConfig::new(h, h as f64, Relaxation::Instant))?;
    println!("LP objective {:.5}, price {:.5}, gap {:.1e}", lp.objective, lp.lambda, lp.duality_gap);

    let mut entries = Vec::new();
    let mut values = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let p = lp.extract_randomized(i, &m.dag)?;
        values.push(p.evaluate(&m.dag)?);
        entries.push(ArmPlanEntry::new(m, p));
    }
    let policy = round_sequential(entries, &values, h)?;
    let est = run_mc(&policy, &models, h, McConfig::new(50_000, 1))?;
    let opt = brute_force_opt(&models, h)?;
    println!("exact optimum {opt:.5}");
    println!("sequential policy {:.5} +- {:.5} (half the LP is {:.5})", est.mean, est.stderr, lp.objective / 2.0);
    Ok(())
}
