//! Cut a random block-structured policy to a fraction of its plays and
//! compare rewards and plays before and after.

use delayed_bandits::gen::random_block_policy;
use delayed_bandits::prior_dag::OutcomeDag;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> delayed_bandits::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dag = OutcomeDag::beta(1, 1, 40, 1.0)?;
    let policy = random_block_policy(&dag, 1, 16, 2, &mut rng)?;
    let base = policy.evaluate(&dag)?;
    println!("policy: {} nodes, R = {:.4}, N = {:.4}", policy.len(), base.reward, base.plays);
    for beta in [0.25, 0.5, 0.75] {
        let cut = policy.truncate(&dag, beta)?.evaluate(&dag)?;
        println!(
            "beta = {beta:.2}: R' = {:.4} (>= {:.4}), N' = {:.4}",
            cut.reward,
            beta * base.reward,
            cut.plays
        );
    }
    Ok(())
}
