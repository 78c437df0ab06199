//! The n-arm instance where the instantaneous relaxation is twice the best
//! achievable reward.

use delayed_bandits::verify::tight_gap_values;

fn main() -> delayed_bandits::Result<()> {
    println!("{:>5} {:>10} {:>10} {:>8}", "n", "LP", "exact", "ratio");
    for n in [5, 10, 20, 50, 100] {
        let (lp, exact) = tight_gap_values(n)?;
        println!("{n:>5} {lp:>10.5} {exact:>10.5} {:>8.4}", lp / exact);
    }
    Ok(())
}
