//! Single-arm policies over block states, exact evaluation and truncation.
//!
//! A policy is a DAG of nodes, each pinned to a [`BlockState`]. A node holds
//! one or more weighted branches (randomisation is explicit), and each branch
//! names an action plus the child node reached for every posterior in the
//! support of the block transition. Nodes are kept in topological order with
//! the root at index 0.
//!
//! Two run semantics are evaluated exactly:
//! - the surrogate, where no-delay blocks see their feedback instantly;
//! - the lagged execution, where a no-delay arm keeps playing while its
//!   stopping decision waits `δ` steps for feedback. Every stop reached with
//!   lagged information costs up to `δ` extra plays.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, structural, Result};
use crate::prior_dag::{block_span, AdvanceCache, BlockState, Mode, OutcomeDag, StateId, STRUCT_TOL};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Quit,
    /// A block of consecutive plays; `plays = 0` is an empty (waiting) block.
    Play { plays: u32 },
    /// Enter no-delay mode at the current posterior. Takes no time.
    Switch,
}

impl Action {
    pub fn plays(&self) -> u32 {
        match self {
            Action::Play { plays } => *plays,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Child {
    pub posterior: StateId,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub weight: f64,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<Child>,
}

impl Branch {
    pub fn quit(weight: f64) -> Self {
        Branch {
            weight,
            action: Action::Quit,
            children: Vec::new(),
        }
    }

    pub fn child_for(&self, posterior: StateId) -> Option<NodeId> {
        self.children
            .binary_search_by_key(&posterior, |c| c.posterior)
            .ok()
            .map(|i| self.children[i].node)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNode {
    pub state: BlockState,
    pub branches: Vec<Branch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WellStructured {
    pub alpha: f64,
    pub c: f64,
}

/// Structural promises a policy makes; checked by [`SingleArmPolicy::validate`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    /// Regular blocks hold at most `δ+1` plays.
    #[serde(default)]
    pub block_structured: bool,
    /// `Some(c)`: regular blocks hold fewer than `max(1, ⌈cδ⌉)` plays.
    #[serde(default)]
    pub delay_free: Option<f64>,
    #[serde(default)]
    pub well_structured: Option<WellStructured>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleArmPolicy {
    pub delay: u32,
    pub horizon: u32,
    #[serde(default)]
    pub structure: Structure,
    pub nodes: Vec<PolicyNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub reward: f64,
    pub plays: f64,
    /// Reach probability of every node.
    pub node_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaggedValue {
    pub reward: f64,
    pub plays: f64,
    pub surrogate_reward: f64,
    pub surrogate_plays: f64,
    pub extra_reward: f64,
    pub extra_plays: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopMass {
    pub posterior: StateId,
    /// Plays made on the way to this stop.
    pub length: u32,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalValue {
    pub true_mean: f64,
    pub stops: Vec<StopMass>,
    pub reward: f64,
    pub plays: f64,
    /// `|R(P(μ)) − Σ_v μ·b·y_μ(v)·length(v)|`; `None` when the DAG is budgeted.
    pub identity_gap: Option<f64>,
}

/// Assigns node ids to block states on first sight.
#[derive(Debug, Default)]
pub(crate) struct NodeTable<K> {
    pub nodes: Vec<PolicyNode>,
    index: HashMap<K, NodeId>,
}

impl<K: std::hash::Hash + Eq> NodeTable<K> {
    pub fn new() -> Self {
        NodeTable {
            nodes: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Returns the node id and whether it was newly created.
    pub fn intern(&mut self, key: K, state: BlockState) -> (NodeId, bool) {
        if let Some(&id) = self.index.get(&key) {
            return (id, false);
        }
        let id = self.nodes.len();
        self.nodes.push(PolicyNode {
            state,
            branches: Vec::new(),
        });
        self.index.insert(key, id);
        (id, true)
    }
}

impl SingleArmPolicy {
    /// The policy that never plays.
    pub fn quit_at(posterior: StateId, delay: u32, horizon: u32) -> Self {
        SingleArmPolicy {
            delay,
            horizon,
            structure: Structure {
                block_structured: true,
                ..Structure::default()
            },
            nodes: vec![PolicyNode {
                state: BlockState::new(posterior, 0, Mode::Regular),
                branches: vec![Branch::quit(1.0)],
            }],
        }
    }

    pub fn root(&self) -> &PolicyNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Plays made before reaching `node`, read from posterior depths.
    pub fn plays_before(&self, dag: &OutcomeDag, node: NodeId) -> u32 {
        dag.state(self.nodes[node].state.posterior).depth - dag.state(self.root().state.posterior).depth
    }

    /// Child-list for a block of `plays` from `u`, given a node factory.
    pub(crate) fn children_for(
        dag: &OutcomeDag,
        cache: &mut AdvanceCache,
        u: StateId,
        plays: u32,
        mut node_for: impl FnMut(StateId) -> NodeId,
    ) -> Result<Vec<Child>> {
        let adv = cache.get(dag, u, plays)?;
        Ok(adv
            .dist
            .iter()
            .map(|&(v, _)| Child {
                posterior: v,
                node: node_for(v),
            })
            .collect())
    }

    /// Largest number of plays on any path starting at each node.
    pub fn max_remaining(&self) -> Vec<u32> {
        let mut out = vec![0u32; self.nodes.len()];
        for id in (0..self.nodes.len()).rev() {
            let mut best = 0;
            for b in &self.nodes[id].branches {
                if b.weight <= 0.0 {
                    continue;
                }
                let below = b.children.iter().map(|c| out[c.node]).max().unwrap_or(0);
                best = best.max(b.action.plays() + below);
            }
            out[id] = best;
        }
        out
    }

    /// Structural reachability through positive-weight branches.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        if self.nodes.is_empty() {
            return seen;
        }
        seen[0] = true;
        for id in 0..self.nodes.len() {
            if !seen[id] {
                continue;
            }
            for b in &self.nodes[id].branches {
                if b.weight > 0.0 {
                    for c in &b.children {
                        if c.node < seen.len() {
                            seen[c.node] = true;
                        }
                    }
                }
            }
        }
        seen
    }

    /// Check every structural promise against the arm's DAG.
    pub fn validate(&self, dag: &OutcomeDag) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(structural("policy has no nodes"));
        }
        let mut cache = AdvanceCache::new();
        let delay = self.delay;
        let df_cap = self
            .structure
            .delay_free
            .map(|c| crate::prior_dag::regular_play_cap(c, delay).max(1));
        for (id, node) in self.nodes.iter().enumerate() {
            let s = node.state;
            if s.posterior >= dag.len() {
                return Err(structural(format!("node {id} refers to unknown posterior {}", s.posterior)));
            }
            if node.branches.is_empty() {
                return Err(structural(format!("node {id} has no branches")));
            }
            let total: f64 = node.branches.iter().map(|b| b.weight).sum();
            if node.branches.iter().any(|b| b.weight < 0.0) || (total - 1.0).abs() > STRUCT_TOL {
                return Err(structural(format!("node {id} branch weights sum to {total}")));
            }
            for b in &node.branches {
                match b.action {
                    Action::Quit => {
                        if !b.children.is_empty() {
                            return Err(structural(format!("node {id}: quit branch has children")));
                        }
                    }
                    Action::Switch => {
                        if s.mode != Mode::Regular {
                            return Err(invalid(format!("node {id}: switch outside regular mode")));
                        }
                        let [c] = b.children.as_slice() else {
                            return Err(structural(format!("node {id}: switch needs exactly one child")));
                        };
                        let expect = BlockState::new(s.posterior, s.elapsed, Mode::NoDelay);
                        if c.posterior != s.posterior || self.node_state(c.node)? != expect {
                            return Err(structural(format!("node {id}: switch child mismatch")));
                        }
                        if c.node <= id {
                            return Err(structural(format!("node {id}: child {} out of order", c.node)));
                        }
                    }
                    Action::Play { plays } => {
                        if s.mode == Mode::NoDelay && plays != 1 {
                            return Err(invalid(format!(
                                "node {id}: no-delay blocks make exactly one play, got {plays}"
                            )));
                        }
                        if plays > 0 && s.elapsed + plays > self.horizon {
                            return Err(structural(format!(
                                "node {id}: {plays} plays at elapsed {} overrun horizon {}",
                                s.elapsed, self.horizon
                            )));
                        }
                        if s.mode == Mode::Regular {
                            if self.structure.block_structured && plays > delay + 1 {
                                return Err(structural(format!(
                                    "node {id}: regular block of {plays} plays in a block-structured policy"
                                )));
                            }
                            if let Some(cap) = df_cap {
                                if plays >= cap {
                                    return Err(structural(format!(
                                        "node {id}: regular block of {plays} plays in a delay-free policy"
                                    )));
                                }
                            }
                        }
                        let adv = cache.get(dag, s.posterior, plays)?;
                        let support: Vec<StateId> = adv.dist.iter().map(|&(v, _)| v).collect();
                        let keys: Vec<StateId> = b.children.iter().map(|c| c.posterior).collect();
                        if support != keys {
                            return Err(structural(format!(
                                "node {id}: child keys {keys:?} differ from transition support {support:?}"
                            )));
                        }
                        let elapsed = s.elapsed + block_span(s.mode, plays, delay);
                        for c in &b.children {
                            if c.node <= id {
                                return Err(structural(format!("node {id}: child {} out of order", c.node)));
                            }
                            let expect = BlockState::new(c.posterior, elapsed, s.mode);
                            if self.node_state(c.node)? != expect {
                                return Err(structural(format!(
                                    "node {id}: child {} has state {:?}, expected {expect:?}",
                                    c.node,
                                    self.nodes[c.node].state
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn node_state(&self, id: NodeId) -> Result<BlockState> {
        self.nodes
            .get(id)
            .map(|n| n.state)
            .ok_or_else(|| structural(format!("dangling child node {id}")))
    }

    fn check_order(&self, id: NodeId, child: NodeId) -> Result<()> {
        if child <= id || child >= self.nodes.len() {
            return Err(structural(format!(
                "node {id}: child {child} breaks topological order; canonicalize first"
            )));
        }
        Ok(())
    }

    /// Exact `R(P)` and `N(P)` under surrogate semantics.
    pub fn evaluate(&self, dag: &OutcomeDag) -> Result<PolicyValue> {
        let mut cache = AdvanceCache::new();
        let n = self.nodes.len();
        let mut mass = vec![0.0; n];
        mass[0] = 1.0;
        let mut reward = 0.0;
        let mut plays = 0.0;
        for id in 0..n {
            let m = mass[id];
            if m == 0.0 {
                continue;
            }
            let u = self.nodes[id].state.posterior;
            for b in &self.nodes[id].branches {
                let w = m * b.weight;
                if w == 0.0 {
                    continue;
                }
                match b.action {
                    Action::Quit => {}
                    Action::Switch => {
                        let c = b.children.first().ok_or_else(|| structural("switch without child"))?;
                        self.check_order(id, c.node)?;
                        mass[c.node] += w;
                    }
                    Action::Play { plays: k } => {
                        let adv = cache.get(dag, u, k)?;
                        reward += w * adv.reward;
                        plays += w * k as f64;
                        for &(v, p) in &adv.dist {
                            let child = b.child_for(v).ok_or_else(|| {
                                structural(format!("node {id}: no child for posterior {v}"))
                            })?;
                            self.check_order(id, child)?;
                            mass[child] += w * p;
                        }
                    }
                }
            }
        }
        Ok(PolicyValue {
            reward,
            plays,
            node_mass: mass,
        })
    }

    /// Exact reward and plays when no-delay blocks run with lag-`δ` feedback.
    pub fn evaluate_lagged(&self, dag: &OutcomeDag) -> Result<LaggedValue> {
        let mut cache = AdvanceCache::new();
        let n = self.nodes.len();
        let mut fresh = vec![0.0; n];
        let mut lagged = vec![0.0; n];
        fresh[0] = 1.0;
        let (mut reward, mut plays, mut extra_reward, mut extra_plays) = (0.0, 0.0, 0.0, 0.0);
        for id in 0..n {
            let (mf, ml) = (fresh[id], lagged[id]);
            if mf == 0.0 && ml == 0.0 {
                continue;
            }
            let s = self.nodes[id].state;
            for b in &self.nodes[id].branches {
                let (wf, wl) = (mf * b.weight, ml * b.weight);
                if wf + wl == 0.0 {
                    continue;
                }
                match b.action {
                    Action::Quit => {
                        if wl > 0.0 && s.mode == Mode::NoDelay {
                            let e = self.delay.min(self.horizon.saturating_sub(s.elapsed));
                            let adv = cache.get(dag, s.posterior, e)?;
                            extra_reward += wl * adv.reward;
                            extra_plays += wl * e as f64;
                        }
                    }
                    Action::Switch => {
                        let c = b.children.first().ok_or_else(|| structural("switch without child"))?;
                        self.check_order(id, c.node)?;
                        fresh[c.node] += wf + wl;
                    }
                    Action::Play { plays: k } => {
                        let w = wf + wl;
                        let adv = cache.get(dag, s.posterior, k)?;
                        reward += w * adv.reward;
                        plays += w * k as f64;
                        for &(v, p) in &adv.dist {
                            let child = b.child_for(v).ok_or_else(|| {
                                structural(format!("node {id}: no child for posterior {v}"))
                            })?;
                            self.check_order(id, child)?;
                            match s.mode {
                                Mode::Regular => fresh[child] += w * p,
                                Mode::NoDelay => lagged[child] += w * p,
                            }
                        }
                    }
                }
            }
        }
        Ok(LaggedValue {
            reward: reward + extra_reward,
            plays: plays + extra_plays,
            surrogate_reward: reward,
            surrogate_plays: plays,
            extra_reward,
            extra_plays,
        })
    }

    /// Run the policy against Bernoulli(`mu`) outcomes.
    pub fn evaluate_conditional(&self, dag: &OutcomeDag, mu: f64) -> Result<ConditionalValue> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(invalid(format!("true mean {mu} outside [0, 1]")));
        }
        let n = self.nodes.len();
        let root_depth = dag.state(self.root().state.posterior).depth;
        let mut mass = vec![0.0; n];
        mass[0] = 1.0;
        let mut reward = 0.0;
        let mut plays = 0.0;
        let mut stops: BTreeMap<(StateId, u32), f64> = BTreeMap::new();
        let mut memo: HashMap<(StateId, u32), crate::prior_dag::Advance> = HashMap::new();
        for id in 0..n {
            let m = mass[id];
            if m == 0.0 {
                continue;
            }
            let u = self.nodes[id].state.posterior;
            for b in &self.nodes[id].branches {
                let w = m * b.weight;
                if w == 0.0 {
                    continue;
                }
                match b.action {
                    Action::Quit => {
                        let len = dag.state(u).depth - root_depth;
                        *stops.entry((u, len)).or_insert(0.0) += w;
                    }
                    Action::Switch => {
                        let c = b.children.first().ok_or_else(|| structural("switch without child"))?;
                        self.check_order(id, c.node)?;
                        mass[c.node] += w;
                    }
                    Action::Play { plays: k } => {
                        let adv = match memo.get(&(u, k)) {
                            Some(a) => a,
                            None => {
                                let a = dag.advance_given_mean(u, k, mu)?;
                                memo.entry((u, k)).or_insert(a)
                            }
                        };
                        reward += w * adv.reward;
                        plays += w * k as f64;
                        for &(v, p) in &adv.dist {
                            let child = b.child_for(v).ok_or_else(|| {
                                structural(format!("node {id}: no child for posterior {v}"))
                            })?;
                            self.check_order(id, child)?;
                            mass[child] += w * p;
                        }
                    }
                }
            }
        }
        let stops: Vec<StopMass> = stops
            .into_iter()
            .map(|((posterior, length), prob)| StopMass {
                posterior,
                length,
                prob,
            })
            .collect();
        let bid = dag.bid();
        let unbudgeted = dag.states().iter().all(|s| s.effective_reward == bid);
        let identity_gap = unbudgeted.then(|| {
            let rhs: f64 = stops.iter().map(|s| mu * bid * s.prob * s.length as f64).sum();
            (reward - rhs).abs()
        });
        Ok(ConditionalValue {
            true_mean: mu,
            stops,
            reward,
            plays,
            identity_gap,
        })
    }

    /// Keep only nodes reachable from the root and renumber them in
    /// `(elapsed, mode)` order, breaking ties by discovery order.
    pub fn canonicalize(&self) -> SingleArmPolicy {
        let n = self.nodes.len();
        let mut discovered = vec![usize::MAX; n];
        let mut order = Vec::new();
        let mut queue = VecDeque::from([0usize]);
        discovered[0] = 0;
        while let Some(id) = queue.pop_front() {
            order.push(id);
            for b in &self.nodes[id].branches {
                for c in &b.children {
                    if discovered[c.node] == usize::MAX {
                        discovered[c.node] = order.len() + queue.len();
                        queue.push_back(c.node);
                    }
                }
            }
        }
        order.sort_by_key(|&id| {
            let s = self.nodes[id].state;
            (s.elapsed, s.mode, discovered[id])
        });
        let mut remap = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let nodes = order
            .iter()
            .map(|&old| {
                let node = &self.nodes[old];
                PolicyNode {
                    state: node.state,
                    branches: node
                        .branches
                        .iter()
                        .map(|b| Branch {
                            weight: b.weight,
                            action: b.action,
                            children: b
                                .children
                                .iter()
                                .map(|c| Child {
                                    posterior: c.posterior,
                                    node: remap[c.node],
                                })
                                .collect(),
                        })
                        .collect(),
                }
            })
            .collect();
        SingleArmPolicy {
            delay: self.delay,
            horizon: self.horizon,
            structure: self.structure,
            nodes,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Replace branch `b` of `node` by a cut block of `keep` plays followed by
    /// quitting at every reached posterior.
    fn cut_branch(
        &self,
        dag: &OutcomeDag,
        cache: &mut AdvanceCache,
        leaves: &mut NodeTable<BlockState>,
        state: BlockState,
        weight: f64,
        keep: u32,
    ) -> Result<Branch> {
        let keep = if state.mode == Mode::NoDelay { keep.min(1) } else { keep };
        if keep == 0 {
            return Ok(Branch::quit(weight));
        }
        let elapsed = state.elapsed + block_span(state.mode, keep, self.delay);
        let children = Self::children_for(dag, cache, state.posterior, keep, |v| {
            let st = BlockState::new(v, elapsed, state.mode);
            let (id, fresh) = leaves.intern(st, st);
            if fresh {
                leaves.nodes[id].branches.push(Branch::quit(1.0));
            }
            id
        })?;
        Ok(Branch {
            weight,
            action: Action::Play { plays: keep },
            children,
        })
    }

    /// Append leaf nodes after the existing ones and restore canonical order.
    fn with_leaves(&self, nodes: Vec<PolicyNode>, leaves: NodeTable<BlockState>) -> SingleArmPolicy {
        let offset = nodes.len();
        let mut all = nodes;
        for mut leaf in leaves.nodes {
            for b in &mut leaf.branches {
                for c in &mut b.children {
                    c.node += offset;
                }
            }
            all.push(leaf);
        }
        let tmp = SingleArmPolicy {
            delay: self.delay,
            horizon: self.horizon,
            structure: self.structure,
            nodes: all,
        };
        tmp.topo_sorted().canonicalize()
    }

    /// Renumber an arbitrary acyclic node set into topological order.
    fn topo_sorted(&self) -> SingleArmPolicy {
        let n = self.nodes.len();
        let mut order: Vec<NodeId> = (0..n).collect();
        order.sort_by_key(|&id| {
            let s = self.nodes[id].state;
            (id != 0, s.elapsed, s.mode, id)
        });
        let mut remap = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let nodes = order
            .iter()
            .map(|&old| {
                let mut node = self.nodes[old].clone();
                for b in &mut node.branches {
                    for c in &mut b.children {
                        c.node = remap[c.node];
                    }
                }
                node
            })
            .collect();
        SingleArmPolicy {
            delay: self.delay,
            horizon: self.horizon,
            structure: self.structure,
            nodes,
        }
    }

    /// Cut every decision path to at least a `beta` fraction of its plays.
    ///
    /// The cut is non-anticipating: at a branch with `m` plays so far the
    /// quota is `⌈β·K⌉` where `K` is the largest play count of any path
    /// through the branch. A block that would overshoot the quota is
    /// shortened and the policy quits after it.
    pub fn truncate(&self, dag: &OutcomeDag, beta: f64) -> Result<SingleArmPolicy> {
        if !(beta > 0.0) || beta > 1.0 {
            return Err(invalid(format!("truncation fraction {beta} outside (0, 1]")));
        }
        let maxrem = self.max_remaining();
        let mut cache = AdvanceCache::new();
        let mut leaves: NodeTable<BlockState> = NodeTable::new();
        let base = self.nodes.len();
        let mut nodes = Vec::with_capacity(base);
        for (id, node) in self.nodes.iter().enumerate() {
            let m = self.plays_before(dag, id);
            let mut branches = Vec::with_capacity(node.branches.len());
            for b in &node.branches {
                let ell = b.action.plays();
                if ell == 0 {
                    branches.push(b.clone());
                    continue;
                }
                let below = b.children.iter().map(|c| maxrem[c.node]).max().unwrap_or(0);
                let total = m + ell + below;
                let quota = ceil_fraction(beta, total);
                let keep = quota.saturating_sub(m);
                if ell > keep {
                    let mut cut = self.cut_branch(dag, &mut cache, &mut leaves, node.state, b.weight, keep)?;
                    for c in &mut cut.children {
                        c.node += base;
                    }
                    branches.push(cut);
                } else {
                    branches.push(b.clone());
                }
            }
            nodes.push(PolicyNode {
                state: node.state,
                branches,
            });
        }
        Ok(self.with_leaves(nodes, leaves))
    }

    /// Stop every path at elapsed time `cut`.
    ///
    /// Returns the truncated policy and the smallest kept fraction
    /// `kept / (largest play count through the cut branch)` over all cuts,
    /// which is the fraction the truncation guarantee applies with.
    pub fn truncate_at_elapsed(&self, dag: &OutcomeDag, cut: u32) -> Result<(SingleArmPolicy, f64)> {
        let maxrem = self.max_remaining();
        let reach = self.reachable();
        let mut cache = AdvanceCache::new();
        let mut leaves: NodeTable<BlockState> = NodeTable::new();
        let base = self.nodes.len();
        let mut beta_min: f64 = 1.0;
        let mut nodes = Vec::with_capacity(base);
        for (id, node) in self.nodes.iter().enumerate() {
            let s = node.state;
            let m = self.plays_before(dag, id);
            let mut branches = Vec::with_capacity(node.branches.len());
            for b in &node.branches {
                let below = b.children.iter().map(|c| maxrem[c.node]).max().unwrap_or(0);
                let lost_fraction = |kept: u32, total: u32| -> f64 {
                    if total == 0 {
                        1.0
                    } else {
                        kept as f64 / total as f64
                    }
                };
                let ell = b.action.plays();
                let keep = if s.elapsed >= cut {
                    Some(0)
                } else if ell > 0 && s.elapsed + ell > cut {
                    Some(cut - s.elapsed)
                } else {
                    None
                };
                match (keep, b.action) {
                    (Some(_), Action::Quit) | (None, _) => branches.push(b.clone()),
                    (Some(k), _) => {
                        if reach[id] && b.weight > 0.0 {
                            beta_min = beta_min.min(lost_fraction(m + k, m + ell + below));
                        }
                        let mut cutb = self.cut_branch(dag, &mut cache, &mut leaves, s, b.weight, k)?;
                        for c in &mut cutb.children {
                            c.node += base;
                        }
                        branches.push(cutb);
                    }
                }
            }
            nodes.push(PolicyNode { state: s, branches });
        }
        let mut out = self.with_leaves(nodes, leaves);
        out.horizon = out.horizon.min(cut);
        Ok((out, beta_min))
    }
}

/// `⌈β·k⌉`, robust to `β·k` landing a rounding error above an integer.
pub fn ceil_fraction(beta: f64, k: u32) -> u32 {
    ((beta * k as f64) - 1e-9).ceil().max(0.0) as u32
}

/// Evaluate a policy and fail when it violates its declared structure.
pub fn evaluate_checked(policy: &SingleArmPolicy, dag: &OutcomeDag) -> Result<PolicyValue> {
    policy.validate(dag)?;
    policy.evaluate(dag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beta11(depth: u32) -> OutcomeDag {
        OutcomeDag::beta(1, 1, depth, 1.0).unwrap()
    }

    /// Play once; play again only after a success. Instantaneous feedback.
    pub(crate) fn play_again_on_success(dag: &OutcomeDag) -> SingleArmPolicy {
        let s = dag.state_at_counts(1, 0).unwrap();
        let f = dag.state_at_counts(0, 1).unwrap();
        let ss = dag.state_at_counts(2, 0).unwrap();
        let sf = dag.state_at_counts(1, 1).unwrap();
        let node = |p, t, branches| PolicyNode {
            state: BlockState::new(p, t, Mode::Regular),
            branches,
        };
        let play = |children: Vec<Child>| Branch {
            weight: 1.0,
            action: Action::Play { plays: 1 },
            children,
        };
        let mut kids = vec![Child { posterior: s, node: 1 }, Child { posterior: f, node: 2 }];
        kids.sort_by_key(|c| c.posterior);
        let mut kids2 = vec![Child { posterior: ss, node: 3 }, Child { posterior: sf, node: 4 }];
        kids2.sort_by_key(|c| c.posterior);
        SingleArmPolicy {
            delay: 0,
            horizon: 2,
            structure: Structure {
                block_structured: true,
                ..Structure::default()
            },
            nodes: vec![
                node(0, 0, vec![play(kids)]),
                node(s, 1, vec![play(kids2)]),
                node(f, 1, vec![Branch::quit(1.0)]),
                node(ss, 2, vec![Branch::quit(1.0)]),
                node(sf, 2, vec![Branch::quit(1.0)]),
            ],
        }
    }

    #[test]
    fn quit_policy_is_worth_nothing() {
        let dag = beta11(2);
        let v = SingleArmPolicy::quit_at(0, 0, 2).evaluate(&dag).unwrap();
        assert_eq!((v.reward, v.plays), (0.0, 0.0));
    }

    #[test]
    fn adaptive_two_play_policy() {
        let dag = beta11(2);
        let p = play_again_on_success(&dag);
        p.validate(&dag).unwrap();
        let v = p.evaluate(&dag).unwrap();
        assert!((v.reward - 5.0 / 6.0).abs() < 1e-12);
        assert!((v.plays - 1.5).abs() < 1e-12);
        assert_eq!(v.node_mass[0], 1.0);
    }

    #[test]
    fn truncation_identity_and_half() {
        let dag = beta11(2);
        let p = play_again_on_success(&dag);
        let same = p.truncate(&dag, 1.0).unwrap();
        assert_eq!(same.evaluate(&dag).unwrap().reward, p.evaluate(&dag).unwrap().reward);
        let half = p.truncate(&dag, 0.5).unwrap();
        half.validate(&dag).unwrap();
        assert!(half.evaluate(&dag).unwrap().reward >= 5.0 / 12.0 - 1e-12);
        assert!(p.truncate(&dag, 0.0).is_err());
    }

    #[test]
    fn conditional_extremes() {
        let dag = beta11(2);
        let p = play_again_on_success(&dag);
        assert_eq!(p.evaluate_conditional(&dag, 0.0).unwrap().reward, 0.0);
        let one = p.evaluate_conditional(&dag, 1.0).unwrap();
        assert!((one.reward - 2.0).abs() < 1e-12);
        let half = p.evaluate_conditional(&dag, 0.5).unwrap();
        assert!(half.identity_gap.unwrap() < 1e-12);
        let total: f64 = half.stops.iter().map(|s| s.prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(p.evaluate_conditional(&dag, 1.5).is_err());
    }

    #[test]
    fn dump_round_trip_is_byte_identical() {
        let dag = beta11(2);
        let p = play_again_on_success(&dag);
        let text = p.to_json().unwrap();
        let back = SingleArmPolicy::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn time_cut_reports_kept_fraction() {
        let dag = beta11(2);
        let p = play_again_on_success(&dag);
        let (cut, beta) = p.truncate_at_elapsed(&dag, 1).unwrap();
        cut.validate(&dag).unwrap();
        assert_eq!(cut.evaluate(&dag).unwrap().plays, 1.0);
        assert_eq!(beta, 0.5);
    }
}
