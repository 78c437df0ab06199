//! Global policies built from per-arm policies, and their step-level executor.
//!
//! Two combining rules are provided:
//! - sequential: arms run one after another in decreasing `R/N` order until
//!   the horizon is spent;
//! - combine: every arm participates with a fixed probability, and each play
//!   slot goes to the lowest-rank participating arm that is active.
//!
//! Execution follows real time. The outcome of a play at step `s` is
//! disclosed at the end of step `s + δ` and can drive decisions from step
//! `s + δ + 1` on. A regular block makes its plays and then leaves the arm
//! passive until all of its outcomes are disclosed. In no-delay mode the arm
//! plays on every slot it is given while its decisions trail the disclosed
//! outcomes; plays made past the point where the policy would have stopped
//! are counted as extra.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::instance::ArmModel;
use crate::policy::{Action, NodeId, PolicyValue, SingleArmPolicy};
use crate::prior_dag::{Mode, OutcomeDag, Outcome};
use crate::sim::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Sequential,
    Combine { participation: f64, opportunistic: bool },
}

impl Schedule {
    pub fn combine() -> Self {
        Schedule::Combine {
            participation: 0.25,
            opportunistic: false,
        }
    }
}

/// One arm's policy plus what the executor needs to run it.
#[derive(Debug, Clone)]
pub struct ArmPlanEntry {
    pub arm: String,
    pub policy: Arc<SingleArmPolicy>,
    pub dag: Arc<OutcomeDag>,
    /// Real feedback delay of the arm.
    pub delay: u32,
}

impl ArmPlanEntry {
    pub fn new(model: &ArmModel, policy: SingleArmPolicy) -> Self {
        ArmPlanEntry {
            arm: model.spec.id.clone(),
            policy: Arc::new(policy),
            dag: Arc::clone(&model.dag),
            delay: model.spec.delay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlobalPolicy {
    pub schedule: Schedule,
    /// Priority order: `order[0]` has the highest priority.
    pub order: Vec<usize>,
    pub arms: Vec<ArmPlanEntry>,
    pub horizon: u32,
}

/// Order arms by `R/N` descending, ties by arm id; arms with `N = 0` last.
pub fn ratio_order(ids: &[String], values: &[PolicyValue]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let key = |i: usize| {
            let v = &values[i];
            if v.plays > 0.0 {
                Some(v.reward / v.plays)
            } else {
                None
            }
        };
        match (key(a), key(b)) {
            (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| ids[a].cmp(&ids[b])),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => ids[a].cmp(&ids[b]),
        }
    });
    order
}

pub fn round_sequential(arms: Vec<ArmPlanEntry>, values: &[PolicyValue], horizon: u32) -> Result<GlobalPolicy> {
    if arms.len() != values.len() {
        return Err(invalid("one value per arm policy is required"));
    }
    let ids: Vec<String> = arms.iter().map(|a| a.arm.clone()).collect();
    Ok(GlobalPolicy {
        schedule: Schedule::Sequential,
        order: ratio_order(&ids, values),
        arms,
        horizon,
    })
}

pub fn combine(arms: Vec<ArmPlanEntry>, horizon: u32, participation: f64) -> Result<GlobalPolicy> {
    if !(0.0..=1.0).contains(&participation) {
        return Err(invalid(format!("participation probability {participation} outside [0, 1]")));
    }
    let order = (0..arms.len()).collect();
    Ok(GlobalPolicy {
        schedule: Schedule::Combine {
            participation,
            opportunistic: false,
        },
        order,
        arms,
        horizon,
    })
}

impl GlobalPolicy {
    /// Replace the priority order by a seeded random permutation.
    pub fn shuffled(mut self, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.order.shuffle(&mut rng);
        self
    }

    pub fn opportunistic(mut self, on: bool) -> Self {
        if let Schedule::Combine { opportunistic, .. } = &mut self.schedule {
            *opportunistic = on;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlayKind {
    Block,
    NoDelay,
    Baseline,
}

/// Execution events, in the order they happen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    /// Start of a play slot with the arms eligible for it in priority order.
    Slot { step: u32, eligible: Vec<usize> },
    Play { step: u32, arm: usize, kind: PlayKind, success: bool, reward: f64 },
    BlockStart { step: u32, arm: usize, plays: u32 },
    Disclose { step: u32, arm: usize, play_step: u32, success: bool },
    /// A decision of `arm` used the outcome of its play at `play_step`.
    Consume { step: u32, arm: usize, play_step: u32 },
    Stop { step: u32, arm: usize },
}

/// Per-trajectory result.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialOutcome {
    pub reward: f64,
    pub plays: u32,
    pub arm_reward: Vec<f64>,
    pub arm_plays: Vec<u32>,
    /// Reward of plays the surrogate semantics would also have made.
    pub arm_surrogate_reward: Vec<f64>,
}

impl TrialOutcome {
    pub fn new(arms: usize) -> Self {
        TrialOutcome {
            reward: 0.0,
            plays: 0,
            arm_reward: vec![0.0; arms],
            arm_plays: vec![0; arms],
            arm_surrogate_reward: vec![0.0; arms],
        }
    }
}

/// Real-reward bookkeeping shared by every executor.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Ledger {
    pub successes: u32,
    pub plays: u32,
}

impl Ledger {
    /// Credit one real outcome: `bid` while `successes·bid < budget`.
    pub fn credit(&mut self, success: bool, dag: &OutcomeDag) -> f64 {
        let reward = if success && (self.successes as f64) * dag.bid() < dag.budget() {
            dag.bid()
        } else {
            0.0
        };
        self.successes += u32::from(success);
        self.plays += 1;
        reward
    }
}

#[derive(Debug, Clone)]
enum Phase {
    Decide,
    Block { branch: usize, remaining: u32, first: usize, count: u32 },
    Wait { branch: usize, first: usize, count: u32 },
    NoDelay(NoDelayRun),
    Done,
}

#[derive(Debug, Clone)]
struct NoDelayRun {
    /// Surrogate node whose decision is pending or known.
    cursor: NodeId,
    /// Known decision at the cursor: `Some(true)` = play.
    decided: Option<usize>,
    /// Index into `plays` of the first no-delay play.
    first: usize,
    /// No-delay plays consumed by the surrogate so far.
    approved: usize,
    /// No-delay plays allowed by the policy horizon.
    cap: u32,
}

#[derive(Debug, Clone)]
struct ArmRun {
    node: NodeId,
    phase: Phase,
    /// Real plays of this arm: `(step, success, reward)`.
    plays: Vec<(u32, bool, f64)>,
    ledger: Ledger,
    surrogate_reward: f64,
}

impl ArmRun {
    fn new() -> Self {
        ArmRun {
            node: 0,
            phase: Phase::Decide,
            plays: Vec::new(),
            ledger: Ledger::default(),
            surrogate_reward: 0.0,
        }
    }

    fn wants_play(&self) -> bool {
        match &self.phase {
            Phase::Block { .. } => true,
            Phase::NoDelay(nd) => ((self.plays.len() - nd.first) as u32) < nd.cap,
            _ => false,
        }
    }

    fn usable(&self, idx: usize, step: u32, delay: u32) -> bool {
        self.plays[idx].0 + delay + 1 <= step
    }

    /// Resolve every decision the information at `step` allows. `step =
    /// u32::MAX` settles the surrogate after the horizon without new plays.
    fn advance<R: Rng>(
        &mut self,
        arm: usize,
        entry: &ArmPlanEntry,
        step: u32,
        rng: &mut R,
        trace: &mut Option<&mut Vec<TraceEvent>>,
    ) {
        let policy = &entry.policy;
        let dag = &entry.dag;
        loop {
            match &mut self.phase {
                Phase::Done | Phase::Block { .. } => return,
                Phase::Decide => {
                    let node = &policy.nodes[self.node];
                    let b = sample_branch(node.branches.iter().map(|b| b.weight), rng);
                    let branch = &node.branches[b];
                    match branch.action {
                        Action::Quit => {
                            self.stop(arm, step, trace);
                        }
                        Action::Switch => {
                            self.node = branch.children[0].node;
                        }
                        Action::Play { plays: 0 } => {
                            self.node = branch.children[0].node;
                        }
                        Action::Play { plays } => {
                            if node.state.mode == Mode::NoDelay {
                                let cap = policy.horizon.saturating_sub(node.state.elapsed);
                                self.phase = Phase::NoDelay(NoDelayRun {
                                    cursor: self.node,
                                    decided: Some(b),
                                    first: self.plays.len(),
                                    approved: 0,
                                    cap,
                                });
                            } else {
                                if step != u32::MAX {
                                    push(trace, TraceEvent::BlockStart { step, arm, plays });
                                }
                                self.phase = Phase::Block {
                                    branch: b,
                                    remaining: plays,
                                    first: self.plays.len(),
                                    count: plays,
                                };
                                if step == u32::MAX {
                                    self.phase = Phase::Done;
                                }
                            }
                        }
                    }
                }
                Phase::Wait { branch, first, count } => {
                    let (branch, first, count) = (*branch, *first, *count);
                    let last = first + count as usize - 1;
                    if step != u32::MAX && !self.usable(last, step, entry.delay) {
                        return;
                    }
                    let mut u = policy.nodes[self.node].state.posterior;
                    for idx in first..=last {
                        let (play_step, success, _) = self.plays[idx];
                        if step != u32::MAX {
                            push(trace, TraceEvent::Consume { step, arm, play_step });
                        }
                        u = dag
                            .child(u, if success { Outcome::Success } else { Outcome::Failure })
                            .expect("posterior DAG covers every played outcome")
                            .0;
                    }
                    let next = policy.nodes[self.node].branches[branch]
                        .child_for(u)
                        .expect("policy covers every block outcome");
                    self.node = next;
                    self.phase = Phase::Decide;
                }
                Phase::NoDelay(nd) => match nd.decided {
                    None => {
                        let node = &policy.nodes[nd.cursor];
                        let b = sample_branch(node.branches.iter().map(|b| b.weight), rng);
                        match node.branches[b].action {
                            Action::Play { .. } => nd.decided = Some(b),
                            _ => {
                                let approved = nd.approved;
                                let first = nd.first;
                                self.finish_nodelay(first, approved);
                                self.stop(arm, step, trace);
                            }
                        }
                    }
                    Some(b) => {
                        let idx = nd.first + nd.approved;
                        if idx >= self.plays.len() {
                            if step == u32::MAX || (self.plays.len() - nd.first) as u32 >= nd.cap {
                                let (first, approved) = (nd.first, nd.approved);
                                self.finish_nodelay(first, approved);
                                self.phase = Phase::Done;
                            }
                            return;
                        }
                        let (play_step, success, _) = self.plays[idx];
                        if step != u32::MAX && play_step + entry.delay + 1 > step {
                            return;
                        }
                        if step != u32::MAX {
                            push(trace, TraceEvent::Consume { step, arm, play_step });
                        }
                        let node = &policy.nodes[nd.cursor];
                        let u = node.state.posterior;
                        let v = dag
                            .child(u, if success { Outcome::Success } else { Outcome::Failure })
                            .expect("posterior DAG covers every played outcome")
                            .0;
                        nd.cursor = node.branches[b].child_for(v).expect("policy covers every outcome");
                        nd.approved += 1;
                        nd.decided = None;
                    }
                },
            }
        }
    }

    fn finish_nodelay(&mut self, first: usize, approved: usize) {
        let end = (first + approved).min(self.plays.len());
        self.surrogate_reward += self.plays[first..end].iter().map(|p| p.2).sum::<f64>();
    }

    fn stop(&mut self, arm: usize, step: u32, trace: &mut Option<&mut Vec<TraceEvent>>) {
        if step != u32::MAX {
            push(trace, TraceEvent::Stop { step, arm });
        }
        self.phase = Phase::Done;
    }

    fn play(&mut self, success: bool, step: u32, dag: &OutcomeDag) -> (f64, PlayKind) {
        let reward = self.ledger.credit(success, dag);
        self.plays.push((step, success, reward));
        match &mut self.phase {
            Phase::Block { branch, remaining, first, count } => {
                *remaining -= 1;
                self.surrogate_reward += reward;
                if *remaining == 0 {
                    self.phase = Phase::Wait {
                        branch: *branch,
                        first: *first,
                        count: *count,
                    };
                }
                (reward, PlayKind::Block)
            }
            Phase::NoDelay(_) => (reward, PlayKind::NoDelay),
            _ => unreachable!("only active arms are given plays"),
        }
    }
}

fn push(trace: &mut Option<&mut Vec<TraceEvent>>, e: TraceEvent) {
    if let Some(t) = trace.as_deref_mut() {
        t.push(e);
    }
}

pub(crate) fn sample_branch<R: Rng>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let n = weights.clone().count();
    if n == 1 {
        return 0;
    }
    let x: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if x < acc {
            return i;
        }
    }
    last
}

/// Run one trajectory against pre-drawn outcomes.
pub fn execute<R: Rng>(
    policy: &GlobalPolicy,
    truth: &GroundTruth,
    rng: &mut R,
    mut trace: Option<&mut Vec<TraceEvent>>,
) -> TrialOutcome {
    let n = policy.arms.len();
    let (participation, opportunistic) = match policy.schedule {
        Schedule::Sequential => (1.0, false),
        Schedule::Combine {
            participation,
            opportunistic,
        } => (participation, opportunistic),
    };
    let participating: Vec<bool> = (0..n)
        .map(|_| participation >= 1.0 || rng.random::<f64>() < participation)
        .collect();
    let mut runs: Vec<ArmRun> = (0..n).map(|_| ArmRun::new()).collect();
    for (i, run) in runs.iter_mut().enumerate() {
        if !participating[i] && !opportunistic {
            run.phase = Phase::Done;
        }
    }
    let mut out = TrialOutcome::new(n);
    let sequential = matches!(policy.schedule, Schedule::Sequential);
    for step in 0..policy.horizon {
        for &i in &policy.order {
            let entry = &policy.arms[i];
            if trace.is_some() && step > 0 {
                let disclosed = runs[i]
                    .plays
                    .iter()
                    .rev()
                    .take_while(|p| p.0 + entry.delay + 1 >= step)
                    .filter(|p| p.0 + entry.delay + 1 == step)
                    .map(|p| (p.0, p.1))
                    .collect::<Vec<_>>();
                for (play_step, success) in disclosed {
                    push(&mut trace, TraceEvent::Disclose { step: step - 1, arm: i, play_step, success });
                }
            }
            runs[i].advance(i, entry, step, rng, &mut trace);
        }
        let eligible: Vec<usize> = if sequential {
            policy
                .order
                .iter()
                .copied()
                .find(|&i| !matches!(runs[i].phase, Phase::Done))
                .filter(|&i| runs[i].wants_play())
                .into_iter()
                .collect()
        } else {
            let mut e: Vec<usize> = policy
                .order
                .iter()
                .copied()
                .filter(|&i| participating[i] && runs[i].wants_play())
                .collect();
            if e.is_empty() && opportunistic {
                e = policy.order.iter().copied().filter(|&i| runs[i].wants_play()).collect();
            }
            e
        };
        if trace.is_some() {
            push(&mut trace, TraceEvent::Slot { step, eligible: eligible.clone() });
        }
        let Some(&arm) = eligible.first() else { continue };
        let k = runs[arm].plays.len();
        let success = truth.outcome(arm, k);
        let (reward, kind) = runs[arm].play(success, step, &policy.arms[arm].dag);
        push(&mut trace, TraceEvent::Play { step, arm, kind, success, reward });
        out.reward += reward;
        out.plays += 1;
    }
    for (i, run) in runs.iter_mut().enumerate() {
        let entry = &policy.arms[i];
        run.advance(i, entry, u32::MAX, rng, &mut None);
        if let Phase::NoDelay(nd) = &run.phase {
            let (first, approved) = (nd.first, nd.approved);
            run.finish_nodelay(first, approved);
        }
        out.arm_reward[i] = run.plays.iter().map(|p| p.2).sum();
        out.arm_plays[i] = run.plays.len() as u32;
        out.arm_surrogate_reward[i] = run.surrogate_reward;
    }
    out
}

/// Violations found by [`audit_trace`], one counter per invariant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCounts {
    pub horizon: u64,
    pub double_play: u64,
    pub ineligible_play: u64,
    pub priority: u64,
    pub passive_play: u64,
    pub early_feedback: u64,
}

impl AuditCounts {
    pub fn total(&self) -> u64 {
        self.horizon + self.double_play + self.ineligible_play + self.priority + self.passive_play + self.early_feedback
    }

    pub fn add(&mut self, o: &AuditCounts) {
        self.horizon += o.horizon;
        self.double_play += o.double_play;
        self.ineligible_play += o.ineligible_play;
        self.priority += o.priority;
        self.passive_play += o.passive_play;
        self.early_feedback += o.early_feedback;
    }
}

/// Re-derive the execution invariants from an event log.
///
/// - no play at or after the horizon, at most one play per step;
/// - every play goes to the first eligible arm of its slot;
/// - an arm makes no play between the end of a block's plays and the
///   disclosure of all of them;
/// - no outcome is consumed before `play_step + δ + 1`.
pub fn audit_trace(trace: &[TraceEvent], delays: &[u32], horizon: u32) -> AuditCounts {
    let mut a = AuditCounts::default();
    let n = delays.len();
    let mut last_play_step: Option<u32> = None;
    let mut slot: Option<(u32, Vec<usize>)> = None;
    // Per arm: plays still to make in the open block, and outcomes of the
    // closed block not yet consumed.
    let mut block_left = vec![0u32; n];
    let mut awaiting: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut play_steps: Vec<Vec<u32>> = vec![Vec::new(); n];
    for e in trace {
        match e {
            TraceEvent::Slot { step, eligible } => slot = Some((*step, eligible.clone())),
            TraceEvent::Play { step, arm, kind, .. } => {
                if *step >= horizon {
                    a.horizon += 1;
                }
                if last_play_step == Some(*step) {
                    a.double_play += 1;
                }
                last_play_step = Some(*step);
                match &slot {
                    Some((s, eligible)) if s == step => match eligible.first() {
                        Some(first) if first == arm => {}
                        Some(_) if eligible.contains(arm) => a.priority += 1,
                        _ => a.ineligible_play += 1,
                    },
                    _ => a.ineligible_play += 1,
                }
                if !awaiting[*arm].is_empty() && block_left[*arm] == 0 {
                    a.passive_play += 1;
                }
                if *kind == PlayKind::Block {
                    if block_left[*arm] == 0 {
                        a.passive_play += 1;
                    } else {
                        block_left[*arm] -= 1;
                        awaiting[*arm].push(*step);
                    }
                }
                play_steps[*arm].push(*step);
            }
            TraceEvent::BlockStart { arm, plays, .. } => {
                if !awaiting[*arm].is_empty() {
                    a.passive_play += 1;
                }
                block_left[*arm] = *plays;
            }
            TraceEvent::Consume { step, arm, play_step } => {
                if !play_steps[*arm].contains(play_step) || step < &(play_step + delays[*arm] + 1) {
                    a.early_feedback += 1;
                }
                awaiting[*arm].retain(|s| s != play_step);
            }
            TraceEvent::Disclose { .. } | TraceEvent::Stop { .. } => {}
        }
    }
    a
}

/// Bidder-side settlement: bills are paid in order while budget remains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementLedger {
    pub budget: f64,
    pub accrued: Vec<f64>,
    pub payouts: Vec<f64>,
}

/// `Y_j = min(Z_j, max(B − Σ_{j'<j} Z_j', 0))`; returns the ledger.
pub fn settle(budget: f64, accrued: &[f64]) -> Result<SettlementLedger> {
    if accrued.iter().any(|&z| z < 0.0) || budget < 0.0 {
        return Err(invalid("settlement amounts must be nonnegative"));
    }
    let mut before = 0.0;
    let payouts = accrued
        .iter()
        .map(|&z| {
            let y = z.min((budget - before).max(0.0));
            before += z;
            y
        })
        .collect();
    Ok(SettlementLedger {
        budget,
        accrued: accrued.to_vec(),
        payouts,
    })
}

impl SettlementLedger {
    pub fn total(&self) -> f64 {
        self.payouts.iter().sum()
    }
}

/// Slack of the concave-chain inequality for a sequence with nonincreasing
/// `r_i / w_i`, using the first `k − 1` terms (1-based `k`).
pub fn concave_chain_slack(r: &[f64], w: &[f64], k: usize) -> Result<f64> {
    if r.len() != w.len() || k == 0 || k > r.len() + 1 {
        return Err(invalid("concave chain needs matching lengths and 1 ≤ k ≤ n+1"));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("weights must have positive total"));
    }
    let head = k - 1;
    let mut lhs = 0.0;
    let mut before = 0.0;
    for i in 0..head {
        lhs += r[i] * (1.0 - before / total);
        before += w[i];
    }
    let r_head: f64 = r[..head].iter().sum();
    let w_head: f64 = w[..head].iter().sum();
    let w_tail: f64 = w[head..].iter().sum();
    let small: f64 = (0..head).map(|i| r[i] * w[i]).sum();
    let rhs = r_head * w_head / (2.0 * total) + small / (2.0 * total) + r_head * w_tail / total;
    Ok(lhs - rhs)
}

/// Exact `E[min(B, Σ_j Z_j)] − ½ Σ_j E[Z_j]` for independent discrete `Z_j`
/// given as `(value, probability)` lists.
pub fn mincount_slack(budget: f64, supports: &[Vec<(f64, f64)>]) -> Result<f64> {
    for s in supports {
        let total: f64 = s.iter().map(|x| x.1).sum();
        if (total - 1.0).abs() > 1e-9 || s.iter().any(|x| x.0 < 0.0 || x.1 < 0.0) {
            return Err(invalid("supports must be nonnegative distributions"));
        }
    }
    let mean: f64 = supports.iter().map(|s| s.iter().map(|(z, p)| z * p).sum::<f64>()).sum();
    // Distribution of the partial sum, refined one variable at a time.
    let mut partial: Vec<(f64, f64)> = vec![(0.0, 1.0)];
    for s in supports {
        let mut next = Vec::with_capacity(partial.len() * s.len());
        for &(acc, p) in &partial {
            for &(z, q) in s {
                next.push((acc + z, p * q));
            }
        }
        partial = next;
    }
    let capped: f64 = partial.iter().map(|&(z, p)| z.min(budget) * p).sum();
    Ok(capped - 0.5 * mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settlement_examples() {
        assert_eq!(settle(5.0, &[1.0, 2.0]).unwrap().total(), 3.0);
        let l = settle(2.0, &[2.0, 1.5, 3.0]).unwrap();
        assert_eq!(l.payouts, vec![2.0, 0.0, 0.0]);
        assert!(settle(1.0, &[-1.0]).is_err());
    }

    #[test]
    fn concave_chain_equal_ratios_is_tight_for_full_chain() {
        let s = concave_chain_slack(&[1.0, 2.0], &[1.0, 2.0], 3).unwrap();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn mincount_point_masses() {
        let s = mincount_slack(1.0, &[vec![(1.0, 1.0)], vec![(0.0, 1.0)]]).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ratio_order_puts_idle_arms_last() {
        let v = |r: f64, n: f64| PolicyValue {
            reward: r,
            plays: n,
            node_mass: vec![],
        };
        let ids = vec!["a".to_string(), "b".into(), "c".into()];
        let order = ratio_order(&ids, &[v(0.0, 0.0), v(1.0, 4.0), v(1.0, 2.0)]);
        assert_eq!(order, vec![2, 1, 0]);
    }
}
