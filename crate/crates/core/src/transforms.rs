//! Structural rewrites of single-arm policies under delayed feedback.
//!
//! The pipeline is
//! 1. [`to_block_structured`]: step-level policy to blocks of at most `δ+1`
//!    plays, each followed by a wait for its feedback;
//! 2. [`to_delay_free`]: the first block with at least `max(1, ⌈cδ⌉)` plays
//!    switches the arm to continuous play;
//! 3. [`to_well_structured`]: small blocks are absorbed into earlier,
//!    inflated blocks whose extra outcomes are kept aside and replayed;
//! 4. [`truncate_half`]: execution is stopped at half the original horizon.
//!
//! Every step returns a [`TransformReport`] with the exact values before and
//! after and the slack of each inequality it is supposed to satisfy.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, structural, Error, Result};
use crate::planner::StructureParams;
use crate::policy::{Action, Branch, Child, NodeId, NodeTable, SingleArmPolicy, Structure, WellStructured};
use crate::prior_dag::{block_span, regular_play_cap, AdvanceCache, BlockState, Mode, Outcome, OutcomeDag, StateId};

/// Largest node count any rewrite may materialise.
pub const TRANSFORM_NODE_LIMIT: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    Play,
    Wait,
    Quit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepChild {
    /// Outcome disclosed at the end of the step, if any.
    pub disclosed: Option<Outcome>,
    pub node: NodeId,
}

/// Decision point of a step-level policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepNode {
    pub step: u32,
    /// Posterior given the disclosed outcomes.
    pub posterior: StateId,
    /// Steps of plays whose outcomes are not disclosed yet, oldest first.
    pub pending: Vec<u32>,
    pub action: StepAction,
    pub children: Vec<StepChild>,
}

/// A single-arm policy that decides one step at a time.
///
/// An outcome of a play at step `s` is disclosed at the end of step `s + δ`.
/// Nodes are shared between histories with the same step, disclosed
/// posterior and pending plays, so the tree stays polynomial in the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub delay: u32,
    pub horizon: u32,
    pub nodes: Vec<StepNode>,
}

/// What a decision rule sees.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a> {
    pub step: u32,
    pub posterior: StateId,
    pub pending: &'a [u32],
}

impl StepPolicy {
    /// Materialise the policy defined by `rule` over every reachable state.
    pub fn from_rule(
        dag: &OutcomeDag,
        delay: u32,
        horizon: u32,
        mut rule: impl FnMut(StepView<'_>) -> StepAction,
    ) -> Result<StepPolicy> {
        let mut nodes: Vec<StepNode> = Vec::new();
        let mut index: HashMap<(u32, StateId, Vec<u32>), NodeId> = HashMap::new();
        if horizon == 0 {
            nodes.push(StepNode {
                step: 0,
                posterior: dag.root(),
                pending: Vec::new(),
                action: StepAction::Quit,
                children: Vec::new(),
            });
            return Ok(StepPolicy { delay, horizon, nodes });
        }
        let mut queue = VecDeque::new();
        index.insert((0, dag.root(), Vec::new()), 0);
        nodes.push(StepNode {
            step: 0,
            posterior: dag.root(),
            pending: Vec::new(),
            action: StepAction::Quit,
            children: Vec::new(),
        });
        queue.push_back(0);
        while let Some(id) = queue.pop_front() {
            let (t, u, pending) = {
                let n = &nodes[id];
                (n.step, n.posterior, n.pending.clone())
            };
            let action = rule(StepView {
                step: t,
                posterior: u,
                pending: &pending,
            });
            nodes[id].action = action;
            if action == StepAction::Quit || t + 1 >= horizon {
                continue;
            }
            let mut next = pending.clone();
            if action == StepAction::Play {
                next.push(t);
            }
            let mut targets: Vec<(Option<Outcome>, StateId, Vec<u32>)> = Vec::new();
            if next.first().is_some_and(|&s| s + delay == t) {
                let rest = next[1..].to_vec();
                for o in [Outcome::Success, Outcome::Failure] {
                    match dag.child(u, o) {
                        Some((v, p)) if p > 0.0 => targets.push((Some(o), v, rest.clone())),
                        Some(_) => {}
                        None => {
                            return Err(structural(format!(
                                "DAG too shallow for a step policy of horizon {horizon}"
                            )))
                        }
                    }
                }
            } else {
                targets.push((None, u, next));
            }
            for (disclosed, v, pend) in targets {
                let key = (t + 1, v, pend.clone());
                let child = match index.get(&key) {
                    Some(&c) => c,
                    None => {
                        let c = nodes.len();
                        if c >= TRANSFORM_NODE_LIMIT {
                            return Err(Error::StateBudget {
                                size: c as u128,
                                limit: TRANSFORM_NODE_LIMIT as u128,
                            });
                        }
                        nodes.push(StepNode {
                            step: t + 1,
                            posterior: v,
                            pending: pend,
                            action: StepAction::Quit,
                            children: Vec::new(),
                        });
                        index.insert(key, c);
                        queue.push_back(c);
                        c
                    }
                };
                nodes[id].children.push(StepChild { disclosed, node: child });
            }
        }
        Ok(StepPolicy { delay, horizon, nodes })
    }

    /// Exact expected reward and plays.
    ///
    /// A play made with `q` undisclosed plays at disclosed posterior `u`
    /// earns `r(u, q+1) − r(u, q)`.
    pub fn evaluate(&self, dag: &OutcomeDag) -> Result<StepValue> {
        let mut cache = AdvanceCache::new();
        let mut mass = vec![0.0; self.nodes.len()];
        mass[0] = 1.0;
        let (mut reward, mut plays) = (0.0, 0.0);
        for (id, node) in self.nodes.iter().enumerate() {
            let m = mass[id];
            if m == 0.0 {
                continue;
            }
            if node.action == StepAction::Play {
                let q = node.pending.len() as u32;
                let hi = cache.get(dag, node.posterior, q + 1)?.reward;
                let lo = cache.get(dag, node.posterior, q)?.reward;
                reward += m * (hi - lo);
                plays += m;
            }
            for c in &node.children {
                if c.node <= id {
                    return Err(structural(format!("step node {id}: child {} out of order", c.node)));
                }
                let p = match c.disclosed {
                    None => 1.0,
                    Some(o) => dag
                        .child(node.posterior, o)
                        .map(|x| x.1)
                        .ok_or_else(|| structural(format!("step node {id}: no {o:?} child")))?,
                };
                mass[c.node] += m * p;
            }
        }
        Ok(StepValue { reward, plays })
    }

    /// Largest number of plays on any path.
    pub fn max_plays(&self) -> u32 {
        let mut best = vec![0u32; self.nodes.len()];
        for id in (0..self.nodes.len()).rev() {
            let n = &self.nodes[id];
            let below = n.children.iter().map(|c| best[c.node]).max().unwrap_or(0);
            best[id] = below + u32::from(n.action == StepAction::Play);
        }
        best[0]
    }

    fn next_known(&self, n: NodeId, known: &mut VecDeque<bool>) -> Result<Option<NodeId>> {
        let node = &self.nodes[n];
        match node.children.as_slice() {
            [] => Ok(None),
            [StepChild { disclosed: None, node }] => Ok(Some(*node)),
            kids => {
                let success = known
                    .pop_front()
                    .ok_or_else(|| structural(format!("step node {n}: disclosure of an unknown outcome")))?;
                let want = if success { Outcome::Success } else { Outcome::Failure };
                kids.iter()
                    .find(|c| c.disclosed == Some(want))
                    .map(|c| Some(c.node))
                    .ok_or_else(|| structural(format!("step node {n}: no child for {want:?}")))
            }
        }
    }

    fn child_on(&self, n: NodeId, success: bool) -> Result<NodeId> {
        let want = if success { Outcome::Success } else { Outcome::Failure };
        self.nodes[n]
            .children
            .iter()
            .find(|c| c.disclosed == Some(want))
            .map(|c| c.node)
            .ok_or_else(|| structural(format!("step node {n}: no child for {want:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepValue {
    pub reward: f64,
    pub plays: f64,
}

/// Exact values of a policy under both feedback semantics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValuePair {
    /// Reward with instantaneous feedback inside no-delay runs.
    pub reward: f64,
    pub plays: f64,
    /// Reward when no-delay runs decide on lag-`δ` feedback.
    pub lagged_reward: f64,
    pub lagged_plays: f64,
}

impl ValuePair {
    pub fn of(policy: &SingleArmPolicy, dag: &OutcomeDag) -> Result<Self> {
        let v = policy.evaluate(dag)?;
        let l = policy.evaluate_lagged(dag)?;
        Ok(ValuePair {
            reward: v.reward,
            plays: v.plays,
            lagged_reward: l.reward,
            lagged_plays: l.plays,
        })
    }

    pub fn of_step(value: StepValue) -> Self {
        ValuePair {
            reward: value.reward,
            plays: value.plays,
            lagged_reward: value.reward,
            lagged_plays: value.plays,
        }
    }
}

/// One inequality `lhs ≥ rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

impl BoundCheck {
    pub fn at_least(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        BoundCheck {
            name: name.into(),
            lhs,
            rhs,
            slack: lhs - rhs,
        }
    }

    pub fn at_most(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        BoundCheck {
            name: name.into(),
            lhs,
            rhs,
            slack: rhs - lhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub transform: String,
    pub input: ValuePair,
    pub output: ValuePair,
    pub checks: Vec<BoundCheck>,
}

impl TransformReport {
    pub fn worst_slack(&self) -> f64 {
        self.checks.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.worst_slack() >= -tol
    }
}

fn float_key(x: f64) -> u64 {
    x.to_bits()
}

/// Merge equal keys and sort, so equal mixtures intern to one node.
fn normalize_mixture<K: Ord + Clone>(items: Vec<(K, f64)>) -> Vec<(K, u64)> {
    let mut m: BTreeMap<K, f64> = BTreeMap::new();
    for (k, w) in items {
        if w > 0.0 {
            *m.entry(k).or_insert(0.0) += w;
        }
    }
    m.into_iter().map(|(k, w)| (k, float_key(w))).collect()
}

/// Merge every quit branch of a node into one.
fn tidy_branches(mut branches: Vec<Branch>) -> Vec<Branch> {
    let quit: f64 = branches.iter().filter(|b| b.action == Action::Quit).map(|b| b.weight).sum();
    branches.retain(|b| b.action != Action::Quit && b.weight > 0.0);
    if quit > 0.0 || branches.is_empty() {
        branches.push(Branch::quit(if branches.is_empty() { 1.0 } else { quit }));
    }
    let total: f64 = branches.iter().map(|b| b.weight).sum();
    for b in &mut branches {
        b.weight /= total;
    }
    branches
}

fn guard(len: usize) -> Result<()> {
    if len > TRANSFORM_NODE_LIMIT {
        return Err(Error::StateBudget {
            size: len as u128,
            limit: TRANSFORM_NODE_LIMIT as u128,
        });
    }
    Ok(())
}

/// Every positive-probability outcome sequence of `plays` plays from `u`.
fn sequences(dag: &OutcomeDag, u: StateId, plays: u32) -> Result<Vec<(Vec<bool>, f64, StateId)>> {
    let mut out = vec![(Vec::new(), 1.0, u)];
    for _ in 0..plays {
        let mut next = Vec::with_capacity(out.len() * 2);
        for (seq, p, v) in out {
            if dag.state(v).is_leaf() {
                return Err(structural("DAG too shallow for the rewrite"));
            }
            for (o, bit) in [(Outcome::Success, true), (Outcome::Failure, false)] {
                if let Some((w, q)) = dag.child(v, o) {
                    if q > 0.0 {
                        let mut s = seq.clone();
                        s.push(bit);
                        next.push((s, p * q, w));
                    }
                }
            }
        }
        out = next;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Block structuring

/// Position in the step policy with the outcomes of its pending plays.
type ChunkKey = (NodeId, Vec<bool>);

enum ChunkWalk {
    Quit,
    /// `plays` plays in the chunk; `last` is the node whose transition
    /// discloses the chunk's first play, when the step policy goes on.
    Block { plays: u32, last: Option<NodeId> },
}

struct Blocker<'a> {
    step: &'a StepPolicy,
    dag: &'a OutcomeDag,
    span: u32,
    table: NodeTable<(u32, StateId, Vec<(ChunkKey, u64)>)>,
}

impl Blocker<'_> {
    fn walk(&self, key: &ChunkKey) -> Result<ChunkWalk> {
        let mut n = key.0;
        let mut known: VecDeque<bool> = key.1.iter().copied().collect();
        loop {
            match self.step.nodes[n].action {
                StepAction::Quit => return Ok(ChunkWalk::Quit),
                StepAction::Play => break,
                StepAction::Wait => match self.step.next_known(n, &mut known)? {
                    Some(c) => n = c,
                    None => return Ok(ChunkWalk::Quit),
                },
            }
        }
        let delay = self.step.delay;
        let mut plays = 0;
        for k in 0..=delay {
            match self.step.nodes[n].action {
                StepAction::Quit => return Ok(ChunkWalk::Block { plays, last: None }),
                StepAction::Play => plays += 1,
                StepAction::Wait => {}
            }
            if k == delay {
                let last = (!self.step.nodes[n].children.is_empty()).then_some(n);
                return Ok(ChunkWalk::Block { plays, last });
            }
            match self.step.next_known(n, &mut known)? {
                Some(c) => n = c,
                None => return Ok(ChunkWalk::Block { plays, last: None }),
            }
        }
        unreachable!("the chunk loop returns on its last step")
    }

    fn node(&mut self, elapsed: u32, u: StateId, mixture: Vec<(ChunkKey, u64)>) -> Result<NodeId> {
        let state = BlockState::new(u, elapsed, Mode::Regular);
        let (id, fresh) = self.table.intern((elapsed, u, mixture.clone()), state);
        if !fresh {
            return Ok(id);
        }
        guard(self.table.nodes.len())?;
        let mut branches = Vec::new();
        for (key, w) in &mixture {
            let w = f64::from_bits(*w);
            match self.walk(key)? {
                ChunkWalk::Quit => branches.push(Branch::quit(w)),
                ChunkWalk::Block { plays, last } => {
                    let mut groups: BTreeMap<StateId, Vec<(Vec<bool>, f64)>> = BTreeMap::new();
                    for (seq, p, v) in sequences(self.dag, u, plays)? {
                        groups.entry(v).or_default().push((seq, p));
                    }
                    let mut children = Vec::with_capacity(groups.len());
                    for (v, group) in groups {
                        let total: f64 = group.iter().map(|g| g.1).sum();
                        let next = match last {
                            None => Vec::new(),
                            Some(n_last) => {
                                let mut items = Vec::with_capacity(group.len());
                                for (seq, p) in &group {
                                    let c = self.step.child_on(n_last, seq[0])?;
                                    items.push(((c, seq[1..].to_vec()), p / total));
                                }
                                normalize_mixture(items)
                            }
                        };
                        let node = self.node(elapsed + self.span, v, next)?;
                        children.push(Child { posterior: v, node });
                    }
                    branches.push(Branch {
                        weight: w,
                        action: Action::Play { plays },
                        children,
                    });
                }
            }
        }
        self.table.nodes[id].branches = tidy_branches(branches);
        Ok(id)
    }
}

/// Rewrite a step-level policy into blocks of at most `δ+1` plays, each
/// lasting `2δ+1` steps, on horizon `2T`.
///
/// Every chunk of `δ+1` consecutive steps starting at a play depends only
/// on outcomes from before the chunk, so the block replays exactly the plays
/// of the chunk. Once the block's outcomes are in, the policy draws an
/// outcome order consistent with the new posterior and continues the step
/// policy along it. Waits before a chunk cost nothing.
pub fn to_block_structured(step: &StepPolicy, dag: &OutcomeDag) -> Result<SingleArmPolicy> {
    let delay = step.delay;
    let mut b = Blocker {
        step,
        dag,
        span: 2 * delay + 1,
        table: NodeTable::new(),
    };
    let root = step.nodes[0].posterior;
    b.node(0, root, vec![((0, Vec::new()), float_key(1.0))])?;
    let policy = SingleArmPolicy {
        delay,
        horizon: 2 * step.horizon,
        structure: Structure {
            block_structured: true,
            ..Structure::default()
        },
        nodes: b.table.nodes,
    };
    Ok(policy.canonicalize())
}

pub fn block_structuring_report(step: &StepPolicy, dag: &OutcomeDag) -> Result<(SingleArmPolicy, TransformReport)> {
    let out = to_block_structured(step, dag)?;
    out.validate(dag)?;
    let input = ValuePair::of_step(step.evaluate(dag)?);
    let output = ValuePair::of(&out, dag)?;
    let report = TransformReport {
        transform: "block_structuring".into(),
        input,
        output,
        checks: vec![
            BoundCheck::at_least("reward not lower", output.reward, input.reward),
            BoundCheck::at_most("plays not higher", output.plays, input.plays),
        ],
    };
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Delay-free conversion

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum FreeKey {
    /// Original node, unchanged.
    Orig(NodeId),
    /// No-delay node after the switch of `branch` at `node`.
    SwitchTo(NodeId, usize),
    /// Inside block `branch` of `node`, after `done` plays.
    Run { node: NodeId, branch: usize, done: u32, posterior: StateId, elapsed: u32 },
    /// Original node reached in no-delay mode.
    At { node: NodeId, posterior: StateId, elapsed: u32 },
}

struct Freer<'a> {
    p: &'a SingleArmPolicy,
    dag: &'a OutcomeDag,
    threshold: u32,
    table: NodeTable<FreeKey>,
    cache: AdvanceCache,
}

impl Freer<'_> {
    fn orig(&mut self, id: NodeId) -> Result<NodeId> {
        let node = &self.p.nodes[id];
        let (nid, fresh) = self.table.intern(FreeKey::Orig(id), node.state);
        if !fresh {
            return Ok(nid);
        }
        guard(self.table.nodes.len())?;
        let s = node.state;
        let mut branches = Vec::with_capacity(node.branches.len());
        for (bi, b) in node.branches.iter().enumerate() {
            match b.action {
                Action::Play { plays } if s.mode == Mode::Regular && plays >= self.threshold => {
                    let nd = BlockState::new(s.posterior, s.elapsed, Mode::NoDelay);
                    let (sid, fresh) = self.table.intern(FreeKey::SwitchTo(id, bi), nd);
                    if fresh {
                        let run = self.run_branch(id, bi, s.posterior, s.elapsed)?;
                        self.table.nodes[sid].branches = vec![run];
                    }
                    branches.push(Branch {
                        weight: b.weight,
                        action: Action::Switch,
                        children: vec![Child {
                            posterior: s.posterior,
                            node: sid,
                        }],
                    });
                }
                _ => {
                    let mut children = Vec::with_capacity(b.children.len());
                    for c in &b.children {
                        children.push(Child {
                            posterior: c.posterior,
                            node: self.orig(c.node)?,
                        });
                    }
                    branches.push(Branch {
                        weight: b.weight,
                        action: b.action,
                        children,
                    });
                }
            }
        }
        self.table.nodes[nid].branches = branches;
        Ok(nid)
    }

    /// First play of block `branch` of `node`, made in no-delay mode.
    fn run_branch(&mut self, node: NodeId, branch: usize, u: StateId, elapsed: u32) -> Result<Branch> {
        let weight = 1.0;
        let adv = self.cache.get(self.dag, u, 1)?.dist.clone();
        let mut children = Vec::with_capacity(adv.len());
        for (v, _) in adv {
            children.push(Child {
                posterior: v,
                node: self.run_node(node, branch, 1, v, elapsed + 1)?,
            });
        }
        Ok(Branch {
            weight,
            action: Action::Play { plays: 1 },
            children,
        })
    }

    fn run_node(&mut self, node: NodeId, branch: usize, done: u32, v: StateId, elapsed: u32) -> Result<NodeId> {
        let b = &self.p.nodes[node].branches[branch];
        if done >= b.action.plays() {
            let child = b
                .child_for(v)
                .ok_or_else(|| structural(format!("node {node}: no child for posterior {v}")))?;
            return self.at(child, v, elapsed);
        }
        let key = FreeKey::Run {
            node,
            branch,
            done,
            posterior: v,
            elapsed,
        };
        let (id, fresh) = self.table.intern(key, BlockState::new(v, elapsed, Mode::NoDelay));
        if fresh {
            guard(self.table.nodes.len())?;
            let adv = self.cache.get(self.dag, v, 1)?.dist.clone();
            let mut children = Vec::with_capacity(adv.len());
            for (w, _) in adv {
                children.push(Child {
                    posterior: w,
                    node: self.run_node(node, branch, done + 1, w, elapsed + 1)?,
                });
            }
            self.table.nodes[id].branches = vec![Branch {
                weight: 1.0,
                action: Action::Play { plays: 1 },
                children,
            }];
        }
        Ok(id)
    }

    /// Original node `node` continued in no-delay mode.
    fn at(&mut self, node: NodeId, v: StateId, elapsed: u32) -> Result<NodeId> {
        let key = FreeKey::At {
            node,
            posterior: v,
            elapsed,
        };
        let (id, fresh) = self.table.intern(key, BlockState::new(v, elapsed, Mode::NoDelay));
        if fresh {
            guard(self.table.nodes.len())?;
            let mut branches = Vec::new();
            self.flatten(node, 1.0, v, elapsed, &mut branches)?;
            self.table.nodes[id].branches = tidy_branches(branches);
        }
        Ok(id)
    }

    /// Branches of `node` in no-delay mode; waits and switches fall through.
    fn flatten(&mut self, node: NodeId, scale: f64, v: StateId, elapsed: u32, out: &mut Vec<Branch>) -> Result<()> {
        let branches = self.p.nodes[node].branches.clone();
        for (bi, b) in branches.iter().enumerate() {
            let w = scale * b.weight;
            match b.action {
                Action::Quit => out.push(Branch::quit(w)),
                Action::Switch | Action::Play { plays: 0 } => {
                    let c = b.children.first().ok_or_else(|| structural("wait without child"))?;
                    self.flatten(c.node, w, v, elapsed, out)?;
                }
                Action::Play { .. } => {
                    let mut run = self.run_branch(node, bi, v, elapsed)?;
                    run.weight = w;
                    out.push(run);
                }
            }
        }
        Ok(())
    }
}

/// Switch to continuous play at the first block with at least
/// `max(1, ⌈cδ⌉)` plays, replaying the rest of the policy one play per step.
pub fn to_delay_free(p: &SingleArmPolicy, dag: &OutcomeDag, c: f64) -> Result<SingleArmPolicy> {
    if !(c > 0.0) || c > 1.0 {
        return Err(invalid(format!("delay-free fraction {c} outside (0, 1]")));
    }
    if !p.structure.block_structured {
        return Err(invalid("delay-free conversion needs a block-structured policy"));
    }
    let threshold = regular_play_cap(c, p.delay).max(1);
    let mut f = Freer {
        p,
        dag,
        threshold,
        table: NodeTable::new(),
        cache: AdvanceCache::new(),
    };
    f.orig(0)?;
    let out = SingleArmPolicy {
        delay: p.delay,
        horizon: p.horizon,
        structure: Structure {
            block_structured: true,
            delay_free: Some(c),
            well_structured: None,
        },
        nodes: f.table.nodes,
    };
    Ok(out.canonicalize())
}

pub fn delay_free_report(p: &SingleArmPolicy, dag: &OutcomeDag, c: f64) -> Result<(SingleArmPolicy, TransformReport)> {
    let out = to_delay_free(p, dag, c)?;
    out.validate(dag)?;
    let input = ValuePair::of(p, dag)?;
    let output = ValuePair::of(&out, dag)?;
    let report = TransformReport {
        transform: "delay_free".into(),
        input,
        output,
        checks: vec![
            BoundCheck::at_least("surrogate reward not lower", output.reward, input.reward),
            BoundCheck::at_least("lagged reward not lower", output.lagged_reward, input.reward),
            BoundCheck::at_most("lagged plays within (1+1/c)", output.lagged_plays, (1.0 + 1.0 / c) * input.lagged_plays),
        ],
    };
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Compaction

/// How strictly [`to_well_structured`] reads its premise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compaction {
    /// Input must be declared `c`-delay-free with `c ≤ α/(α+2)`.
    Strict,
    /// Any block-structured input; regular blocks may hold up to `δ+1` plays.
    Relaxed,
}

/// Stored outcomes of one inflated block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Pool {
    successes: u32,
    failures: u32,
    class: u32,
    uses_left: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct CompactKey {
    node: NodeId,
    pools: Vec<Pool>,
    /// Stored outcomes that will never be replayed.
    idle: (u32, u32),
    blocks_in: u32,
    blocks_out: u32,
}

impl CompactKey {
    fn offset(&self) -> (u32, u32) {
        self.pools
            .iter()
            .fold(self.idle, |acc, p| (acc.0 + p.successes, acc.1 + p.failures))
    }
}

enum Resolved {
    Quit,
    Switch { node: NodeId },
    Block { branch: usize, plays: u32 },
}

/// Per-path regular block counts of a compaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockAudit {
    pub paths: u64,
    pub violations: u64,
    /// Smallest `bound − blocks_out` over all paths.
    pub worst_slack: i64,
    pub max_blocks_in: u32,
    pub max_blocks_out: u32,
    /// Additive term of the bound.
    pub additive: u32,
}

fn size_class(plays: u32) -> u32 {
    31 - plays.leading_zeros()
}

fn ln_choose(n: u32, k: u32) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

/// `P(j of `draw` are successes)` when drawing without replacement from
/// `a` successes and `b` failures.
fn hypergeometric(a: u32, b: u32, draw: u32, j: u32) -> f64 {
    if j > a || draw < j || draw - j > b {
        return 0.0;
    }
    (ln_choose(a, j) + ln_choose(b, draw - j) - ln_choose(a + b, draw)).exp()
}

struct Compactor<'a> {
    p: &'a SingleArmPolicy,
    dag: &'a OutcomeDag,
    alpha: f64,
    uses: u32,
    bound_term: u32,
    table: NodeTable<CompactNodeKey>,
    cache: AdvanceCache,
    audit: BlockAudit,
    horizon: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum CompactNodeKey {
    Regular(u32, StateId, Vec<(CompactKey, u64)>),
    Free { node: NodeId, offset: (u32, u32), shift: i64 },
}

impl Compactor<'_> {
    fn counts(&self, u: StateId) -> (u32, u32) {
        let s = self.dag.state(u);
        (s.successes, s.failures())
    }

    fn at_counts(&self, c: (u32, u32)) -> Result<StateId> {
        self.dag
            .state_at_counts(c.0, c.1)
            .ok_or_else(|| structural(format!("DAG too shallow for compaction: no state with counts {c:?}")))
    }

    fn record_path(&mut self, key: &CompactKey) {
        let bound = ((self.alpha * key.blocks_in as f64) - 1e-9).ceil().max(0.0) as i64 + self.bound_term as i64;
        let slack = bound - key.blocks_out as i64;
        let a = &mut self.audit;
        a.paths += 1;
        if slack < 0 {
            a.violations += 1;
        }
        a.worst_slack = a.worst_slack.min(slack);
        a.max_blocks_in = a.max_blocks_in.max(key.blocks_in);
        a.max_blocks_out = a.max_blocks_out.max(key.blocks_out);
    }

    /// Follow the input policy from `key` until it quits, switches or makes
    /// a block no pool can absorb.
    fn resolve(&mut self, key: CompactKey, weight: f64, out: &mut Vec<(CompactKey, f64, Resolved)>) -> Result<()> {
        let node = &self.p.nodes[key.node];
        if node.state.mode != Mode::Regular {
            return Err(structural(format!("compaction reached no-delay node {} without a switch", key.node)));
        }
        let u = node.state.posterior;
        let branches = node.branches.clone();
        for (bi, b) in branches.iter().enumerate() {
            let w = weight * b.weight;
            if w <= 0.0 {
                continue;
            }
            match b.action {
                Action::Quit => {
                    self.record_path(&key);
                    out.push((key.clone(), w, Resolved::Quit));
                }
                Action::Switch => {
                    self.record_path(&key);
                    out.push((key.clone(), w, Resolved::Switch { node: b.children[0].node }));
                }
                Action::Play { plays: 0 } => {
                    let next = CompactKey {
                        node: b.children[0].node,
                        ..key.clone()
                    };
                    self.resolve(next, w, out)?;
                }
                Action::Play { plays } => {
                    let class = size_class(plays);
                    let pool = key.pools.iter().position(|p| {
                        p.uses_left > 0 && p.class >= class && p.successes + p.failures >= plays
                    });
                    match pool {
                        None => out.push((key.clone(), w, Resolved::Block { branch: bi, plays })),
                        Some(i) => {
                            let pl = key.pools[i];
                            let (s0, f0) = self.counts(u);
                            for j in 0..=plays {
                                let h = hypergeometric(pl.successes, pl.failures, plays, j);
                                if h <= 0.0 {
                                    continue;
                                }
                                let v = self.at_counts((s0 + j, f0 + plays - j))?;
                                let child = b.child_for(v).ok_or_else(|| {
                                    structural(format!("node {}: no child for posterior {v}", key.node))
                                })?;
                                let mut next = key.clone();
                                next.node = child;
                                next.blocks_in += 1;
                                let q = &mut next.pools[i];
                                q.successes -= j;
                                q.failures -= plays - j;
                                q.uses_left -= 1;
                                if q.uses_left == 0 {
                                    next.idle.0 += q.successes;
                                    next.idle.1 += q.failures;
                                    next.pools.remove(i);
                                }
                                self.resolve(next, w * h, out)?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn regular(&mut self, elapsed: u32, u_real: StateId, mixture: Vec<(CompactKey, u64)>) -> Result<NodeId> {
        let state = BlockState::new(u_real, elapsed, Mode::Regular);
        let (id, fresh) = self
            .table
            .intern(CompactNodeKey::Regular(elapsed, u_real, mixture.clone()), state);
        if !fresh {
            return Ok(id);
        }
        guard(self.table.nodes.len())?;
        let mut resolved = Vec::new();
        for (key, w) in mixture {
            self.resolve(key, f64::from_bits(w), &mut resolved)?;
        }
        let mut branches = Vec::with_capacity(resolved.len());
        for (key, w, r) in resolved {
            match r {
                Resolved::Quit => branches.push(Branch::quit(w)),
                Resolved::Switch { node } => {
                    let shift = elapsed as i64 - self.p.nodes[node].state.elapsed as i64;
                    let child = self.free(node, key.offset(), shift)?;
                    branches.push(Branch {
                        weight: w,
                        action: Action::Switch,
                        children: vec![Child {
                            posterior: u_real,
                            node: child,
                        }],
                    });
                }
                Resolved::Block { branch, plays } => {
                    branches.push(self.inflated(&key, w, branch, plays, elapsed, u_real)?);
                }
            }
        }
        self.table.nodes[id].branches = tidy_branches(branches);
        Ok(id)
    }

    /// Block of `plays` plus `⌊2·plays/α⌋` stored plays.
    fn inflated(&mut self, key: &CompactKey, weight: f64, branch: usize, plays: u32, elapsed: u32, u_real: StateId) -> Result<Branch> {
        let extra = ((2.0 * plays as f64 / self.alpha) + 1e-9).floor() as u32;
        let total = plays + extra;
        let b = self.p.nodes[key.node].branches[branch].clone();
        let u_in = self.p.nodes[key.node].state.posterior;
        let (s_in, f_in) = self.counts(u_in);
        let (s_real, _) = self.counts(u_real);
        let next_elapsed = elapsed + block_span(Mode::Regular, total, self.p.delay);
        self.horizon = self.horizon.max(elapsed + total);
        let dist = self.cache.get(self.dag, u_real, total)?.dist.clone();
        let mut children = Vec::with_capacity(dist.len());
        for (v, _) in dist {
            let successes = self.counts(v).0 - s_real;
            let mut items = Vec::new();
            for k in successes.saturating_sub(extra)..=successes.min(plays) {
                let h = hypergeometric(successes, total - successes, plays, k);
                if h <= 0.0 {
                    continue;
                }
                let own = self.at_counts((s_in + k, f_in + plays - k))?;
                let child = b
                    .child_for(own)
                    .ok_or_else(|| structural(format!("node {}: no child for posterior {own}", key.node)))?;
                let mut next = key.clone();
                next.node = child;
                next.blocks_in += 1;
                next.blocks_out += 1;
                next.pools.push(Pool {
                    successes: successes - k,
                    failures: extra - (successes - k),
                    class: size_class(plays),
                    uses_left: self.uses,
                });
                items.push((next, h));
            }
            let node = self.regular(next_elapsed, v, normalize_mixture(items))?;
            children.push(Child { posterior: v, node });
        }
        Ok(Branch {
            weight,
            action: Action::Play { plays: total },
            children,
        })
    }

    /// No-delay part of the input, shifted by stored outcomes and time.
    fn free(&mut self, node: NodeId, offset: (u32, u32), shift: i64) -> Result<NodeId> {
        let src = self.p.nodes[node].clone();
        let (s, f) = self.counts(src.state.posterior);
        let u_real = self.at_counts((s + offset.0, f + offset.1))?;
        let elapsed = u32::try_from(src.state.elapsed as i64 + shift).map_err(|_| structural("negative elapsed"))?;
        let state = BlockState::new(u_real, elapsed, src.state.mode);
        let (id, fresh) = self.table.intern(CompactNodeKey::Free { node, offset, shift }, state);
        if !fresh {
            return Ok(id);
        }
        guard(self.table.nodes.len())?;
        let mut branches = Vec::with_capacity(src.branches.len());
        for b in &src.branches {
            let plays = b.action.plays();
            if plays > 0 {
                self.horizon = self.horizon.max(elapsed + plays);
            }
            let mut children = Vec::with_capacity(b.children.len());
            if let Action::Play { plays } = b.action {
                let dist = self.cache.get(self.dag, u_real, plays)?.dist.clone();
                for (v_real, _) in dist {
                    let (vs, vf) = self.counts(v_real);
                    let v_in = self.at_counts((vs - offset.0, vf - offset.1))?;
                    let c = b
                        .child_for(v_in)
                        .ok_or_else(|| structural(format!("node {node}: no child for posterior {v_in}")))?;
                    children.push(Child {
                        posterior: v_real,
                        node: self.free(c, offset, shift)?,
                    });
                }
            } else {
                for c in &b.children {
                    children.push(Child {
                        posterior: u_real,
                        node: self.free(c.node, offset, shift)?,
                    });
                }
            }
            branches.push(Branch {
                weight: b.weight,
                action: b.action,
                children,
            });
        }
        self.table.nodes[id].branches = branches;
        Ok(id)
    }
}

/// Additive term of the per-path block bound.
pub fn block_bound_term(alpha: f64, delay: u32, mode: Compaction) -> u32 {
    let log_term = if delay <= 1 {
        0
    } else {
        (((delay as f64).log2() / alpha) - 1e-9).ceil() as u32
    };
    match mode {
        Compaction::Strict => log_term,
        // Blocks of 1..=δ+1 plays span this many size classes, and each
        // class can leave one block that absorbed too few others.
        Compaction::Relaxed => log_term.max(size_class(delay + 1) + 1),
    }
}

/// Absorb small blocks into earlier inflated ones.
///
/// Each block no pool can absorb is played with `⌊2ℓ/α⌋` extra plays whose
/// outcomes are put aside in a pool of its size class. Up to `⌊1/α⌋` later
/// blocks of the same or a smaller class are then served from the pool
/// without playing, drawing their outcomes without replacement. Requires an
/// exchangeable DAG deep enough for all inflated plays.
pub fn to_well_structured(
    p: &SingleArmPolicy,
    dag: &OutcomeDag,
    alpha: f64,
    c: f64,
    mode: Compaction,
) -> Result<(SingleArmPolicy, BlockAudit)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("compaction needs 0 < α < 1, got {alpha}")));
    }
    if !dag.is_exchangeable() {
        return Err(invalid("compaction needs an exchangeable posterior DAG"));
    }
    match mode {
        Compaction::Strict => {
            if c > alpha / (alpha + 2.0) + 1e-12 {
                return Err(invalid(format!("c = {c} exceeds α/(α+2) = {}", alpha / (alpha + 2.0))));
            }
            match p.structure.delay_free {
                Some(declared) if declared <= c + 1e-12 => {}
                _ => return Err(invalid(format!("compaction input must be {c}-delay-free"))),
            }
        }
        Compaction::Relaxed => {
            if !p.structure.block_structured {
                return Err(invalid("compaction needs a block-structured policy"));
            }
        }
    }
    let bound_term = block_bound_term(alpha, p.delay, mode);
    let mut k = Compactor {
        p,
        dag,
        alpha,
        uses: ((1.0 / alpha) + 1e-9).floor() as u32,
        bound_term,
        table: NodeTable::new(),
        cache: AdvanceCache::new(),
        audit: BlockAudit {
            paths: 0,
            violations: 0,
            worst_slack: i64::MAX,
            max_blocks_in: 0,
            max_blocks_out: 0,
            additive: bound_term,
        },
        horizon: p.horizon,
    };
    let root = CompactKey {
        node: 0,
        pools: Vec::new(),
        idle: (0, 0),
        blocks_in: 0,
        blocks_out: 0,
    };
    k.regular(0, p.root().state.posterior, vec![(root, float_key(1.0))])?;
    let structure = Structure {
        block_structured: false,
        delay_free: None,
        well_structured: (mode == Compaction::Strict).then_some(WellStructured { alpha, c }),
    };
    let out = SingleArmPolicy {
        delay: p.delay,
        horizon: k.horizon,
        structure,
        nodes: k.table.nodes,
    };
    Ok((out.canonicalize(), k.audit))
}

pub fn well_structured_report(
    p: &SingleArmPolicy,
    dag: &OutcomeDag,
    alpha: f64,
    c: f64,
    mode: Compaction,
) -> Result<(SingleArmPolicy, BlockAudit, TransformReport)> {
    let (out, audit) = to_well_structured(p, dag, alpha, c, mode)?;
    out.validate(dag)?;
    let input = ValuePair::of(p, dag)?;
    let output = ValuePair::of(&out, dag)?;
    let report = TransformReport {
        transform: "well_structured".into(),
        input,
        output,
        checks: vec![
            BoundCheck::at_least("reward not lower", output.reward, input.reward),
            BoundCheck::at_most("plays within (1+2/α)", output.plays, (1.0 + 2.0 / alpha) * input.plays),
            BoundCheck::at_least("per-path block bound", audit.worst_slack.min(0) as f64, 0.0),
        ],
    };
    Ok((out, audit, report))
}

// ---------------------------------------------------------------------------
// Half-horizon truncation

/// Stop a well-structured policy at elapsed time `⌊T/2⌋`, where `T` is the
/// horizon the pipeline started from. Returns the cut policy and the
/// smallest kept play fraction over cut paths.
pub fn truncate_half(p: &SingleArmPolicy, dag: &OutcomeDag, horizon: u32) -> Result<(SingleArmPolicy, f64)> {
    match p.structure.well_structured {
        Some(ws) if ws.alpha <= 0.125 + 1e-12 => {}
        Some(ws) => return Err(invalid(format!("half truncation needs α ≤ 1/8, policy declares {}", ws.alpha))),
        None => return Err(invalid("half truncation needs a well-structured policy")),
    }
    p.truncate_at_elapsed(dag, horizon / 2)
}

pub fn truncate_half_report(p: &SingleArmPolicy, dag: &OutcomeDag, horizon: u32) -> Result<(SingleArmPolicy, TransformReport)> {
    let (out, beta) = truncate_half(p, dag, horizon)?;
    out.validate(dag)?;
    let input = ValuePair::of(p, dag)?;
    let output = ValuePair::of(&out, dag)?;
    let report = TransformReport {
        transform: "truncate_half".into(),
        input,
        output,
        checks: vec![
            BoundCheck::at_least("reward at least an eighth", output.reward, input.reward / 8.0),
            BoundCheck::at_least("reward at least the kept fraction", output.reward, beta * input.reward),
            BoundCheck::at_most("plays not higher", output.plays, input.plays),
        ],
    };
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub block: SingleArmPolicy,
    pub delay_free: SingleArmPolicy,
    pub well_structured: SingleArmPolicy,
    pub truncated: SingleArmPolicy,
    pub audit: BlockAudit,
    pub reports: Vec<TransformReport>,
    /// End-to-end check against the step policy.
    pub composition: TransformReport,
}

impl PipelineResult {
    pub fn holds(&self, tol: f64) -> bool {
        self.reports.iter().all(|r| r.holds(tol)) && self.composition.holds(tol)
    }
}

/// Run all four rewrites with the strict premise.
pub fn run_pipeline(step: &StepPolicy, dag: &OutcomeDag, params: &StructureParams) -> Result<PipelineResult> {
    params.validate()?;
    let (block, r1) = block_structuring_report(step, dag)?;
    let (delay_free, r2) = delay_free_report(&block, dag, params.c)?;
    let (well, audit, r3) = well_structured_report(&delay_free, dag, params.alpha, params.c, Compaction::Strict)?;
    let (truncated, r4) = truncate_half_report(&well, dag, step.horizon)?;
    let input = ValuePair::of_step(step.evaluate(dag)?);
    let output = ValuePair::of(&truncated, dag)?;
    let composition = TransformReport {
        transform: "pipeline".into(),
        input,
        output,
        checks: vec![
            BoundCheck::at_least("reward at least α·input", output.reward, params.alpha * input.reward),
            BoundCheck::at_most("lagged plays within γ/2", output.lagged_plays, params.gamma / 2.0 * input.plays),
        ],
    };
    Ok(PipelineResult {
        block,
        delay_free,
        well_structured: well,
        truncated,
        audit,
        reports: vec![r1, r2, r3, r4],
        composition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beta(depth: u32) -> OutcomeDag {
        OutcomeDag::beta(1, 1, depth, 1.0).unwrap()
    }

    #[test]
    fn step_policy_single_play() {
        let dag = beta(4);
        let p = StepPolicy::from_rule(&dag, 1, 3, |v| {
            if v.step == 0 {
                StepAction::Play
            } else {
                StepAction::Quit
            }
        })
        .unwrap();
        let v = p.evaluate(&dag).unwrap();
        assert!((v.reward - 0.5).abs() < 1e-12 && (v.plays - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_chunk_is_one_block() {
        let dag = beta(8);
        let delay = 2;
        let p = StepPolicy::from_rule(&dag, delay, 6, |v| if v.step <= delay { StepAction::Play } else { StepAction::Quit }).unwrap();
        let (out, report) = block_structuring_report(&p, &dag).unwrap();
        assert_eq!(out.root().branches[0].action, Action::Play { plays: 3 });
        assert!(report.holds(1e-12));
        assert!((report.output.reward - report.input.reward).abs() < 1e-12);
    }

    #[test]
    fn zero_delay_keeps_values() {
        let dag = beta(8);
        let p = StepPolicy::from_rule(&dag, 0, 5, |v| {
            if dag.state(v.posterior).mean >= 0.5 {
                StepAction::Play
            } else {
                StepAction::Quit
            }
        })
        .unwrap();
        let (_, report) = block_structuring_report(&p, &dag).unwrap();
        assert!((report.output.reward - report.input.reward).abs() < 1e-12);
        assert!((report.output.plays - report.input.plays).abs() < 1e-12);
    }

    #[test]
    fn hypergeometric_sums_to_one() {
        let total: f64 = (0..=3).map(|j| hypergeometric(4, 5, 3, j)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_term_covers_unit_delay() {
        assert_eq!(block_bound_term(0.125, 1, Compaction::Strict), 0);
        assert_eq!(block_bound_term(0.125, 1, Compaction::Relaxed), 2);
        assert_eq!(block_bound_term(0.125, 2, Compaction::Relaxed), 8);
    }
}
