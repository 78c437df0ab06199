//! Rewrite a random step policy into block-structured, delay-free and
//! well-structured form, then halve it, printing each bound.

use delayed_bandits::gen::{random_step_policy, StepMix};
use delayed_bandits::planner::StructureParams;
use delayed_bandits::prior_dag::OutcomeDag;
use delayed_bandits::transforms::run_pipeline;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> delayed_bandits::Result<()> {
    let (delay, horizon) = (2, 16);
    let params = StructureParams::default();
    let depth = (1 + (2.0 / params.alpha).floor() as u32) * horizon + 4;
    let dag = OutcomeDag::beta(1, 1, depth, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let step = random_step_policy(&dag, delay, horizon, StepMix::default(), &mut rng)?;

    let out = run_pipeline(&step, &dag, &params)?;
    for r in out.reports.iter().chain(std::iter::once(&out.composition)) {
        println!("{:<18} R {:.4} -> {:.4}, N {:.4} -> {:.4}", r.transform, r.input.reward, r.output.reward, r.input.plays, r.output.plays);
        for c in &r.checks {
            println!("    {:<28} slack {:+.3e}", c.name, c.slack);
        }
    }
    println!(
        "regular blocks per path: at most {} before, {} after, {} bound violations",
        out.audit.max_blocks_in, out.audit.max_blocks_out, out.audit.violations
    );
    println!("all bounds hold: {}", out.holds(1e-9));
    Ok(())
}
