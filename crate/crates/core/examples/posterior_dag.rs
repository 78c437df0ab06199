//! Build posterior DAGs for a Beta prior and a two-point mixture, check the
//! martingale property and look at a block of plays without feedback.

use delayed_bandits::prior_dag::{Hypothesis, OutcomeDag, Outcome};

fn main() -> delayed_bandits::Result<()> {
    let beta = OutcomeDag::beta(2, 1, 6, 1.0)?;
    println!("Beta(2,1) to depth 6: {} states", beta.len());
    println!("worst martingale gap: {:.2e}", beta.validate_martingale()?);

    let root = beta.root();
    let (s, p) = beta.child(root, Outcome::Success).expect("root has children");
    println!("P(success at root) = {p:.4}, posterior mean after it = {:.4}", beta.state(s).mean);

    let block = beta.advance(root, 3)?;
    println!("three blind plays: expected reward {:.4}", block.reward);
    for (v, q) in &block.dist {
        let st = beta.state(*v);
        println!("  {} successes / {} failures with prob {q:.4}", st.successes, st.failures());
    }

    let mix = OutcomeDag::mixture(
        &[Hypothesis { weight: 0.5, theta: 0.2 }, Hypothesis { weight: 0.5, theta: 0.8 }],
        6,
        1.0,
    )?;
    println!("mixture prior: {} states, gap {:.2e}", mix.len(), mix.validate_martingale()?);

    // A budget of two successes folds deeper states into absorbing ones.
    let folded = beta.fold_budget(2.0, 1.0);
    println!("budget-folded reward of three plays: {:.4}", folded.advance(folded.root(), 3)?.reward);
    Ok(())
}
