//! Exact optimum by backward induction over joint states, with and without
//! feedback delay.

use delayed_bandits::instance::Instance;
use delayed_bandits::prior_dag::ArmSpec;
use delayed_bandits::sim::{brute_force_opt, oracle_state_count};

fn main() -> delayed_bandits::Result<()> {
    for delay in 0..=2 {
        let inst = Instance::new(
            "pair",
            7,
            vec![
                ArmSpec::beta("a", 1, 1).with_delay(delay),
                ArmSpec::beta("b", 1, 2).with_delay(delay).with_budget(Some(2.0)),
            ],
        );
        let models = inst.models()?;
        println!(
            "delay {delay}: OPT = {:.6} ({} joint states bound)",
            brute_force_opt(&models, inst.horizon)?,
            oracle_state_count(&models, inst.horizon)
        );
    }
    Ok(())
}
