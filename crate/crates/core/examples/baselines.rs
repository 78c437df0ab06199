//! Greedy and explore-then-exploit against the planned policy on the same
//! seeded trajectories, written as CSV to stdout.

use delayed_bandits::gen::random_instance;
use delayed_bandits::planner::{solve_coupled, CoupledConfig, Relaxation};
use delayed_bandits::scheduler::{round_sequential, ArmPlanEntry};
use delayed_bandits::sim::{run_mc, write_estimates_csv, ExploreThenExploit, Greedy, McConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> delayed_bandits::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inst = random_instance(&mut rng, "five-arms", 5, 20, 0);
    let models = inst.models()?;
    let h = inst.horizon;
    let lp = solve_coupled(&models, &CoupledConfig::new(h, h as f64, Relaxation::Instant))?;
    let mut entries = Vec::new();
    let mut values = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let p = lp.extract_randomized(i, &m.dag)?;
        values.push(p.evaluate(&m.dag)?);
        entries.push(ArmPlanEntry::new(m, p));
    }
    let planned = round_sequential(entries, &values, h)?;
    let cfg = McConfig::new(20_000, 3);
    let estimates = vec![
        run_mc(&planned, &models, h, cfg)?,
        run_mc(&Greedy::new(&models, h), &models, h, cfg)?,
        run_mc(&ExploreThenExploit::new(&models, h, 0.2), &models, h, cfg)?,
    ];
    write_estimates_csv(std::io::stdout().lock(), &inst.label(), &estimates)?;
    eprintln!("LP upper bound {:.5}", lp.objective);
    Ok(())
}
