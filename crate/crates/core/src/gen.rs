//! Seeded random instances and policies for property checks and demos.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::Result;
use crate::instance::Instance;
use crate::policy::{Action, Branch, Child, NodeTable, SingleArmPolicy, Structure};
use crate::prior_dag::{block_span, AdvanceCache, ArmSpec, BlockState, Mode, OutcomeDag};
use crate::transforms::{StepAction, StepPolicy};

/// Beta arm with small integer parameters.
pub fn random_beta_arm<R: Rng>(rng: &mut R, id: impl Into<String>, delay: u32) -> ArmSpec {
    let bids = [0.5, 1.0, 1.0, 2.0];
    ArmSpec::beta(id, rng.random_range(1..=3), rng.random_range(1..=3))
        .with_delay(delay)
        .with_bid(bids[rng.random_range(0..bids.len())])
}

/// `arms` Beta arms with a common delay; some get a binding budget.
pub fn random_instance<R: Rng>(rng: &mut R, name: &str, arms: usize, horizon: u32, delay: u32) -> Instance {
    let specs = (0..arms)
        .map(|i| {
            let arm = random_beta_arm(rng, format!("arm{i}"), delay);
            if rng.random_bool(0.25) {
                let cap = arm.bid * rng.random_range(1..=2) as f64;
                arm.with_budget(Some(cap))
            } else {
                arm
            }
        })
        .collect();
    Instance::new(name, horizon, specs)
}

/// Action probabilities of [`random_step_policy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMix {
    pub play: f64,
    pub wait: f64,
}

impl Default for StepMix {
    fn default() -> Self {
        StepMix { play: 0.6, wait: 0.25 }
    }
}

/// Step-level policy with an independent random action at every state; the
/// first step always plays.
pub fn random_step_policy<R: Rng>(dag: &OutcomeDag, delay: u32, horizon: u32, mix: StepMix, rng: &mut R) -> Result<StepPolicy> {
    StepPolicy::from_rule(dag, delay, horizon, |v| {
        if v.step == 0 {
            return StepAction::Play;
        }
        let x: f64 = rng.random();
        if x < mix.play {
            StepAction::Play
        } else if x < mix.play + mix.wait {
            StepAction::Wait
        } else {
            StepAction::Quit
        }
    })
}

/// Random block-structured policy: blocks of `0..=max_block` plays, some
/// nodes randomising between two actions.
pub fn random_block_policy<R: Rng>(
    dag: &OutcomeDag,
    delay: u32,
    horizon: u32,
    max_block: u32,
    rng: &mut R,
) -> Result<SingleArmPolicy> {
    let mut table: NodeTable<BlockState> = NodeTable::new();
    let mut cache = AdvanceCache::new();
    let root = BlockState::new(dag.root(), 0, Mode::Regular);
    table.intern(root, root);
    let mut queue = VecDeque::from([0usize]);
    while let Some(id) = queue.pop_front() {
        let s = table.nodes[id].state;
        let room = horizon.saturating_sub(s.elapsed).min(max_block);
        let mut actions = vec![];
        let pick = |rng: &mut R| -> Action {
            if room == 0 || rng.random_bool(0.2) {
                Action::Quit
            } else {
                Action::Play {
                    plays: rng.random_range(if id == 0 { 1 } else { 0 }..=room),
                }
            }
        };
        actions.push(pick(rng));
        if rng.random_bool(0.2) {
            let other = pick(rng);
            if other != actions[0] {
                actions.push(other);
            }
        }
        let w0 = if actions.len() == 2 { rng.random_range(0.2..0.8) } else { 1.0 };
        let mut branches = Vec::with_capacity(actions.len());
        for (k, action) in actions.into_iter().enumerate() {
            let weight = if k == 0 { w0 } else { 1.0 - w0 };
            match action {
                Action::Play { plays } => {
                    let elapsed = s.elapsed + block_span(Mode::Regular, plays, delay);
                    let dist = cache.get(dag, s.posterior, plays)?.dist.clone();
                    let mut children = Vec::with_capacity(dist.len());
                    for (v, _) in dist {
                        let st = BlockState::new(v, elapsed, Mode::Regular);
                        let (c, fresh) = table.intern(st, st);
                        if fresh {
                            queue.push_back(c);
                        }
                        children.push(Child { posterior: v, node: c });
                    }
                    branches.push(Branch { weight, action, children });
                }
                _ => branches.push(Branch::quit(weight)),
            }
        }
        table.nodes[id].branches = branches;
    }
    let policy = SingleArmPolicy {
        delay,
        horizon,
        structure: Structure {
            block_structured: max_block <= delay + 1,
            ..Structure::default()
        },
        nodes: table.nodes,
    };
    Ok(policy.canonicalize())
}

/// Positive nonincreasing-ratio sequence for the concave-chain check.
pub fn random_ratio_sequence<R: Rng>(rng: &mut R, len: usize) -> (Vec<f64>, Vec<f64>) {
    let w: Vec<f64> = (0..len).map(|_| rng.random_range(0.01..1.0)).collect();
    let mut ratios: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..5.0)).collect();
    ratios.sort_by(|a, b| b.total_cmp(a));
    let r = w.iter().zip(&ratios).map(|(w, q)| w * q).collect();
    (r, w)
}

/// Independent small discrete variables bounded by `budget` with total mean
/// at most `budget`.
pub fn random_supports<R: Rng>(rng: &mut R, budget: f64, count: usize) -> Vec<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.random_range(1..=3);
        let mut probs: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        out.push(probs.into_iter().map(|p| (rng.random_range(0.0..=budget), p)).collect::<Vec<_>>());
    }
    // Scale values down so the means sum to at most the budget.
    let mean: f64 = out.iter().map(|s| s.iter().map(|(z, p)| z * p).sum::<f64>()).sum();
    if mean > budget {
        let f = budget / mean * rng.random_range(0.5..=1.0);
        for s in &mut out {
            for x in s.iter_mut() {
                x.0 *= f;
            }
        }
    }
    out
}
