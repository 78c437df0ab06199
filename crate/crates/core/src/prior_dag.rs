//! Posterior-state DAGs for a single arm.
//!
//! Every vertex is a posterior belief reached after some sequence of
//! Bernoulli observations. Edges are labelled with the observed outcome and
//! weighted by its predictive probability, so the posterior mean is a
//! martingale along the DAG. Budgets are folded into the per-state reward
//! credited for a success, which lets every downstream component ignore them.
//!
//! Three prior families are first-class:
//! - `Beta(α1, α0)` with positive integer parameters,
//! - finite mixtures of Bernoulli hypotheses (`Σ w_h · δ_{θ_h}`),
//! - explicit DAGs loaded from an instance file.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, structural, Result};

pub type StateId = usize;

/// Identities that hold analytically are checked at this tolerance.
pub const EXACT_TOL: f64 = 1e-12;
/// Probabilities accumulated over many operations are checked at this tolerance.
pub const STRUCT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKey {
    Beta { alpha1: u32, alpha0: u32 },
    Counts { successes: u32, failures: u32 },
    Named(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub outcome: Outcome,
    pub prob: f64,
    pub child: StateId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    pub key: PosteriorKey,
    /// Successes observed since the root (prior pseudo-counts excluded).
    pub successes: u32,
    /// Observations made since the root.
    pub depth: u32,
    pub mean: f64,
    /// Reward credited for a success observed from this state.
    pub effective_reward: f64,
    pub edges: Vec<Edge>,
}

impl PosteriorState {
    pub fn is_leaf(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn failures(&self) -> u32 {
        self.depth - self.successes
    }

    /// Expected reward of one play from this state.
    pub fn play_reward(&self) -> f64 {
        self.mean * self.effective_reward
    }
}

/// A Bernoulli hypothesis inside a finite mixture prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub weight: f64,
    pub theta: f64,
}

/// Explicit DAG as written in instance files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitDag {
    pub root: String,
    pub states: Vec<ExplicitState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitState {
    pub id: String,
    pub mean: f64,
    #[serde(default)]
    pub edges: Vec<ExplicitEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitEdge {
    pub outcome: Outcome,
    pub prob: f64,
    pub child: String,
}

/// Prior of one arm. Serialised untagged, so instance files write
/// `{"alpha1": 1, "alpha0": 1}`, `{"hypotheses": [...]}` or `{"dag": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSpec {
    Beta { alpha1: u32, alpha0: u32 },
    Mixture { hypotheses: Vec<Hypothesis> },
    Dag { dag: ExplicitDag },
}

/// Static description of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub id: String,
    pub prior: PriorSpec,
    #[serde(default)]
    pub delay: u32,
    /// `None` means the budget never binds.
    #[serde(default)]
    pub budget: Option<f64>,
    /// Reward credited per success.
    #[serde(default = "default_bid", alias = "reward_per_success")]
    pub bid: f64,
}

fn default_bid() -> f64 {
    1.0
}

impl ArmSpec {
    pub fn beta(id: impl Into<String>, alpha1: u32, alpha0: u32) -> Self {
        ArmSpec {
            id: id.into(),
            prior: PriorSpec::Beta { alpha1, alpha0 },
            delay: 0,
            budget: None,
            bid: 1.0,
        }
    }

    pub fn with_delay(mut self, delay: u32) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_budget(mut self, budget: Option<f64>) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_bid(mut self, bid: f64) -> Self {
        self.bid = bid;
        self
    }

    pub fn budget_value(&self) -> f64 {
        self.budget.unwrap_or(f64::INFINITY)
    }

    /// Horizon ratio `Q = T / δ`; `None` without delay.
    pub fn block_ratio(&self, horizon: u32) -> Option<f64> {
        (self.delay > 0).then(|| horizon as f64 / self.delay as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bid > 0.0) || !self.bid.is_finite() {
            return Err(invalid(format!("arm {}: bid must be positive", self.id)));
        }
        if let Some(b) = self.budget {
            if !(b >= 0.0) {
                return Err(invalid(format!("arm {}: budget must be nonnegative", self.id)));
            }
        }
        Ok(())
    }

    /// Build the budget-folded posterior DAG of this arm.
    pub fn build_dag(&self, max_depth: u32) -> Result<OutcomeDag> {
        self.validate()?;
        let dag = match &self.prior {
            PriorSpec::Beta { alpha1, alpha0 } => {
                OutcomeDag::beta(*alpha1, *alpha0, max_depth, self.bid)?
            }
            PriorSpec::Mixture { hypotheses } => {
                OutcomeDag::mixture(hypotheses, max_depth, self.bid)?
            }
            PriorSpec::Dag { dag: explicit } => OutcomeDag::from_explicit(explicit, self.bid)?,
        };
        Ok(dag.fold_budget(self.budget_value(), self.bid))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Regular,
    NoDelay,
}

/// Start-of-block state `W(u, t)` of a single-arm run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockState {
    pub posterior: StateId,
    pub elapsed: u32,
    pub mode: Mode,
}

impl BlockState {
    pub fn new(posterior: StateId, elapsed: u32, mode: Mode) -> Self {
        BlockState {
            posterior,
            elapsed,
            mode,
        }
    }
}

/// Time steps consumed by a block of `plays` plays.
///
/// A regular block makes its plays back to back and then waits for the last
/// outcome, so it lasts `max(2δ+1, plays+δ)` steps. A no-delay block is one
/// step.
pub fn block_span(mode: Mode, plays: u32, delay: u32) -> u32 {
    match mode {
        Mode::Regular => (2 * delay + 1).max(plays + delay),
        Mode::NoDelay => 1,
    }
}

/// `⌈c·δ⌉`, the play cap of a regular block in the planner state space.
pub fn regular_play_cap(c: f64, delay: u32) -> u32 {
    ((c * delay as f64) - 1e-9).ceil().max(0.0) as u32
}

/// Distribution over posteriors after a run of plays without feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct Advance {
    /// Expected reward of the plays, budget folding applied path-wise.
    pub reward: f64,
    /// `(state, probability)` sorted by state id.
    pub dist: Vec<(StateId, f64)>,
}

impl Advance {
    pub fn prob_of(&self, state: StateId) -> f64 {
        self.dist
            .binary_search_by_key(&state, |&(s, _)| s)
            .map(|i| self.dist[i].1)
            .unwrap_or(0.0)
    }
}

/// One row of the block kernel: `r(σ, ℓ)` and `p(σ, ·, ℓ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRow {
    pub plays: u32,
    pub reward: f64,
    pub transitions: Vec<(BlockState, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDag {
    states: Vec<PosteriorState>,
    bid: f64,
    budget: f64,
    /// `(successes, failures)` → state, present when states are keyed by counts.
    #[serde(skip)]
    by_counts: HashMap<(u32, u32), StateId>,
    exchangeable: bool,
}

impl OutcomeDag {
    /// Conjugate Beta DAG with one state per reachable `(α1', α0')`.
    pub fn beta(alpha1: u32, alpha0: u32, max_depth: u32, bid: f64) -> Result<Self> {
        if alpha1 == 0 || alpha0 == 0 {
            return Err(invalid(format!(
                "Beta prior parameters must be positive, got ({alpha1}, {alpha0})"
            )));
        }
        let mut states = Vec::new();
        for depth in 0..=max_depth {
            for successes in 0..=depth {
                let a1 = alpha1 + successes;
                let a0 = alpha0 + depth - successes;
                let total = (a1 + a0) as f64;
                let edges = if depth < max_depth {
                    let base = ((depth + 1) * (depth + 2) / 2) as usize;
                    vec![
                        Edge {
                            outcome: Outcome::Success,
                            prob: a1 as f64 / total,
                            child: base + successes as usize + 1,
                        },
                        Edge {
                            outcome: Outcome::Failure,
                            prob: a0 as f64 / total,
                            child: base + successes as usize,
                        },
                    ]
                } else {
                    Vec::new()
                };
                states.push(PosteriorState {
                    key: PosteriorKey::Beta { alpha1: a1, alpha0: a0 },
                    successes,
                    depth,
                    mean: a1 as f64 / total,
                    effective_reward: bid,
                    edges,
                });
            }
        }
        Ok(Self::assemble(states, bid))
    }

    /// DAG of a finite mixture of Bernoulli hypotheses, keyed by counts.
    ///
    /// States with zero predictive probability are not materialised.
    pub fn mixture(hypotheses: &[Hypothesis], max_depth: u32, bid: f64) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(invalid("mixture prior needs at least one hypothesis"));
        }
        for h in hypotheses {
            if !(h.weight >= 0.0) || !(0.0..=1.0).contains(&h.theta) {
                return Err(invalid(format!(
                    "mixture hypothesis out of range: weight {} theta {}",
                    h.weight, h.theta
                )));
            }
        }
        let total_weight: f64 = hypotheses.iter().map(|h| h.weight).sum();
        if !(total_weight > 0.0) {
            return Err(invalid("mixture weights must have positive total"));
        }

        let mean_at = |s: u32, f: u32| -> Option<f64> {
            let logs: Vec<f64> = hypotheses
                .iter()
                .map(|h| {
                    let term = |n: u32, p: f64| if n == 0 { 0.0 } else { n as f64 * p.ln() };
                    h.weight.ln() + term(s, h.theta) + term(f, 1.0 - h.theta)
                })
                .collect();
            let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if top == f64::NEG_INFINITY {
                return None;
            }
            let mut norm = 0.0;
            let mut acc = 0.0;
            for (h, l) in hypotheses.iter().zip(&logs) {
                let w = (l - top).exp();
                norm += w;
                acc += w * h.theta;
            }
            Some(acc / norm)
        };

        let mut states: Vec<PosteriorState> = Vec::new();
        let mut index: HashMap<(u32, u32), StateId> = HashMap::new();
        let root_mean = mean_at(0, 0).ok_or_else(|| invalid("mixture prior has no mass"))?;
        states.push(PosteriorState {
            key: PosteriorKey::Counts { successes: 0, failures: 0 },
            successes: 0,
            depth: 0,
            mean: root_mean,
            effective_reward: bid,
            edges: Vec::new(),
        });
        index.insert((0, 0), 0);
        let mut layer = vec![0usize];
        for depth in 0..max_depth {
            let mut next = Vec::new();
            for &u in &layer {
                let (s, f) = (states[u].successes, states[u].failures());
                let p = states[u].mean;
                let mut edges = Vec::new();
                for (outcome, prob, counts) in [
                    (Outcome::Success, p, (s + 1, f)),
                    (Outcome::Failure, 1.0 - p, (s, f + 1)),
                ] {
                    if prob <= 0.0 {
                        continue;
                    }
                    let child = match index.get(&counts) {
                        Some(&c) => c,
                        None => {
                            let mean = mean_at(counts.0, counts.1).ok_or_else(|| {
                                structural("mixture posterior with positive predictive mass vanished")
                            })?;
                            let id = states.len();
                            states.push(PosteriorState {
                                key: PosteriorKey::Counts {
                                    successes: counts.0,
                                    failures: counts.1,
                                },
                                successes: counts.0,
                                depth: depth + 1,
                                mean,
                                effective_reward: bid,
                                edges: Vec::new(),
                            });
                            index.insert(counts, id);
                            next.push(id);
                            id
                        }
                    };
                    edges.push(Edge { outcome, prob, child });
                }
                states[u].edges = edges;
            }
            next.sort_by_key(|&id| states[id].successes);
            layer = next;
        }
        Ok(Self::assemble(states, bid))
    }

    /// Load an explicit DAG. Means and probabilities are taken as given; run
    /// [`OutcomeDag::validate_martingale`] to screen them.
    pub fn from_explicit(explicit: &ExplicitDag, bid: f64) -> Result<Self> {
        let mut by_id: HashMap<&str, usize> = HashMap::new();
        for (i, s) in explicit.states.iter().enumerate() {
            if by_id.insert(s.id.as_str(), i).is_some() {
                return Err(invalid(format!("duplicate state id {:?}", s.id)));
            }
        }
        let root = *by_id
            .get(explicit.root.as_str())
            .ok_or_else(|| structural(format!("root {:?} is not a declared state", explicit.root)))?;

        // BFS from the root assigns depth and success counts; every path to a
        // state must agree on both.
        let mut order: Vec<usize> = vec![root];
        let mut info: HashMap<usize, (u32, u32)> = HashMap::from([(root, (0, 0))]);
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            let (depth, succ) = info[&u];
            for e in &explicit.states[u].edges {
                let v = *by_id.get(e.child.as_str()).ok_or_else(|| {
                    structural(format!(
                        "state {:?} has dangling child {:?}",
                        explicit.states[u].id, e.child
                    ))
                })?;
                let expect = (depth + 1, succ + u32::from(e.outcome == Outcome::Success));
                match info.get(&v) {
                    Some(&seen) if seen != expect => {
                        return Err(structural(format!(
                            "state {:?} reached with inconsistent (depth, successes)",
                            explicit.states[v].id
                        )))
                    }
                    Some(_) => {}
                    None => {
                        info.insert(v, expect);
                        order.push(v);
                    }
                }
            }
        }
        let remap: HashMap<usize, StateId> =
            order.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let mut states = Vec::with_capacity(order.len());
        for &old in &order {
            let src = &explicit.states[old];
            let (depth, successes) = info[&old];
            let mut edges = Vec::new();
            for e in &src.edges {
                if !(0.0..=1.0 + STRUCT_TOL).contains(&e.prob) {
                    return Err(invalid(format!("edge probability {} out of range", e.prob)));
                }
                if edges.iter().any(|x: &Edge| x.outcome == e.outcome) {
                    return Err(invalid(format!("state {:?} repeats an outcome label", src.id)));
                }
                edges.push(Edge {
                    outcome: e.outcome,
                    prob: e.prob,
                    child: remap[&by_id[e.child.as_str()]],
                });
            }
            if !edges.is_empty() {
                let total: f64 = edges.iter().map(|e| e.prob).sum();
                if (total - 1.0).abs() > STRUCT_TOL {
                    return Err(invalid(format!(
                        "outgoing probabilities of {:?} sum to {total}",
                        src.id
                    )));
                }
            }
            states.push(PosteriorState {
                key: PosteriorKey::Named(src.id.clone()),
                successes,
                depth,
                mean: src.mean,
                effective_reward: bid,
                edges,
            });
        }
        Ok(Self::assemble(states, bid))
    }

    fn assemble(states: Vec<PosteriorState>, bid: f64) -> Self {
        let mut by_counts = HashMap::with_capacity(states.len());
        let mut exchangeable = true;
        for (id, s) in states.iter().enumerate() {
            if by_counts.insert((s.successes, s.failures()), id).is_some() {
                exchangeable = false;
            }
        }
        OutcomeDag {
            states,
            bid,
            budget: f64::INFINITY,
            by_counts,
            exchangeable,
        }
    }

    /// Fold a budget into the DAG: a success at `u` is worth `bid` while
    /// `successes(u) · bid < budget`, and nothing afterwards.
    pub fn fold_budget(&self, budget: f64, bid: f64) -> OutcomeDag {
        let mut out = self.clone();
        for s in &mut out.states {
            s.effective_reward = if s.successes as f64 * bid >= budget { 0.0 } else { bid };
        }
        out.bid = bid;
        out.budget = budget;
        out
    }

    pub fn root(&self) -> StateId {
        0
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, id: StateId) -> &PosteriorState {
        &self.states[id]
    }

    pub fn states(&self) -> &[PosteriorState] {
        &self.states
    }

    pub fn bid(&self) -> f64 {
        self.bid
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn max_depth(&self) -> u32 {
        self.states.iter().map(|s| s.depth).max().unwrap_or(0)
    }

    /// Whether at most one state exists per `(successes, failures)` pair.
    pub fn is_exchangeable(&self) -> bool {
        self.exchangeable
    }

    pub fn state_at_counts(&self, successes: u32, failures: u32) -> Option<StateId> {
        if !self.exchangeable {
            return None;
        }
        self.by_counts.get(&(successes, failures)).copied()
    }

    /// State reached from `u` after observing `extra` further outcomes.
    pub fn offset_state(&self, u: StateId, extra: (u32, u32)) -> Option<StateId> {
        let s = &self.states[u];
        self.state_at_counts(s.successes + extra.0, s.failures() + extra.1)
    }

    pub fn states_at_depth(&self, depth: u32) -> usize {
        self.states.iter().filter(|s| s.depth == depth).count()
    }

    pub fn child(&self, u: StateId, outcome: Outcome) -> Option<(StateId, f64)> {
        self.states[u]
            .edges
            .iter()
            .find(|e| e.outcome == outcome)
            .map(|e| (e.child, e.prob))
    }

    /// Largest `|r_u − Σ_v p_uv r_v|` over non-leaf states.
    pub fn validate_martingale(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (id, s) in self.states.iter().enumerate() {
            if s.is_leaf() {
                continue;
            }
            let mut acc = 0.0;
            for e in &s.edges {
                let child = self
                    .states
                    .get(e.child)
                    .ok_or_else(|| structural(format!("state {id} has dangling child {}", e.child)))?;
                acc += e.prob * child.mean;
            }
            worst = worst.max((s.mean - acc).abs());
        }
        Ok(worst)
    }

    /// Overwrite a posterior mean. Intended for fault-injection fixtures.
    pub fn set_mean(&mut self, id: StateId, mean: f64) {
        self.states[id].mean = mean;
    }

    /// Make `plays` consecutive plays from `u` without intermediate feedback.
    pub fn advance(&self, u: StateId, plays: u32) -> Result<Advance> {
        self.propagate(u, plays, None)
    }

    /// Same as [`OutcomeDag::advance`] with outcome probabilities fixed to a
    /// known true mean `mu`; posterior bookkeeping still follows the DAG.
    pub fn advance_given_mean(&self, u: StateId, plays: u32, mu: f64) -> Result<Advance> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(invalid(format!("true mean {mu} outside [0, 1]")));
        }
        self.propagate(u, plays, Some(mu))
    }

    fn propagate(&self, u: StateId, plays: u32, mu: Option<f64>) -> Result<Advance> {
        let mut layer: BTreeMap<StateId, f64> = BTreeMap::from([(u, 1.0)]);
        let mut reward = 0.0;
        for _ in 0..plays {
            let mut next: BTreeMap<StateId, f64> = BTreeMap::new();
            for (&v, &mass) in &layer {
                let s = &self.states[v];
                let success_prob = mu.unwrap_or(s.mean);
                reward += mass * success_prob * s.effective_reward;
                if s.is_leaf() {
                    return Err(structural(format!(
                        "DAG too shallow: state {v} at depth {} has no children",
                        s.depth
                    )));
                }
                for (outcome, p) in [
                    (Outcome::Success, success_prob),
                    (Outcome::Failure, 1.0 - success_prob),
                ] {
                    let p = match mu {
                        Some(_) => p,
                        None => match self.child(v, outcome) {
                            Some((_, q)) => q,
                            None => 0.0,
                        },
                    };
                    if p <= 0.0 {
                        continue;
                    }
                    let (child, _) = self.child(v, outcome).ok_or_else(|| {
                        structural(format!("state {v} has no {outcome:?} child but probability {p}"))
                    })?;
                    *next.entry(child).or_insert(0.0) += mass * p;
                }
            }
            layer = next;
        }
        Ok(Advance {
            reward,
            dist: layer.into_iter().collect(),
        })
    }

    /// Kernel rows `ℓ = 0..=max_plays` for a block starting at `sigma`.
    pub fn block_kernel(
        &self,
        sigma: BlockState,
        max_plays: u32,
        delay: u32,
        regular_cap: u32,
    ) -> Result<Vec<KernelRow>> {
        let cap = match sigma.mode {
            Mode::Regular => regular_cap,
            Mode::NoDelay => 1,
        };
        if max_plays > cap {
            return Err(invalid(format!(
                "block of {max_plays} plays exceeds the {:?} cap {cap}",
                sigma.mode
            )));
        }
        (0..=max_plays)
            .map(|plays| {
                let adv = self.advance(sigma.posterior, plays)?;
                let elapsed = sigma.elapsed + block_span(sigma.mode, plays, delay);
                Ok(KernelRow {
                    plays,
                    reward: adv.reward,
                    transitions: adv
                        .dist
                        .into_iter()
                        .map(|(v, p)| (BlockState::new(v, elapsed, sigma.mode), p))
                        .collect(),
                })
            })
            .collect()
    }

    /// Rebuild the count index after deserialisation.
    pub fn reindex(&mut self) {
        let states = std::mem::take(&mut self.states);
        let rebuilt = Self::assemble(states, self.bid);
        self.states = rebuilt.states;
        self.by_counts = rebuilt.by_counts;
        self.exchangeable = rebuilt.exchangeable;
    }
}

/// Multi-play kernel cache keyed by `(state, plays)`.
#[derive(Debug, Default)]
pub struct AdvanceCache {
    map: HashMap<(StateId, u32), Advance>,
}

impl AdvanceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, dag: &OutcomeDag, u: StateId, plays: u32) -> Result<&Advance> {
        use std::collections::hash_map::Entry;
        match self.map.entry((u, plays)) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => Ok(e.insert(dag.advance(u, plays)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beta11(depth: u32) -> OutcomeDag {
        OutcomeDag::beta(1, 1, depth, 1.0).unwrap()
    }

    #[test]
    fn uniform_prior_one_step() {
        let dag = beta11(1);
        let root = dag.state(dag.root());
        assert_eq!(root.mean, 0.5);
        let (child, p) = dag.child(dag.root(), Outcome::Success).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(dag.state(child).key, PosteriorKey::Beta { alpha1: 2, alpha0: 1 });
    }

    #[test]
    fn depth_zero_is_single_state() {
        let dag = OutcomeDag::beta(3, 5, 0, 1.0).unwrap();
        assert_eq!(dag.len(), 1);
        assert_eq!(dag.state(0).mean, 3.0 / 8.0);
        assert_eq!(dag.validate_martingale().unwrap(), 0.0);
    }

    #[test]
    fn two_paths_reach_beta22() {
        // SF: 1/2·1/3, FS: 1/2·1/3.
        let dag = beta11(2);
        let adv = dag.advance(dag.root(), 2).unwrap();
        let mid = dag.state_at_counts(1, 1).unwrap();
        assert!((adv.prob_of(mid) - 1.0 / 3.0).abs() < EXACT_TOL);
    }

    #[test]
    fn nonpositive_beta_parameters_rejected() {
        assert!(matches!(OutcomeDag::beta(0, 1, 2, 1.0), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn depth_layers_have_d_plus_one_states() {
        let dag = OutcomeDag::beta(2, 3, 6, 1.0).unwrap();
        for d in 0..=6 {
            assert_eq!(dag.states_at_depth(d), d as usize + 1);
        }
    }

    #[test]
    fn budget_folding_cases() {
        let dag = beta11(3);
        assert!(dag.fold_budget(0.0, 1.0).states().iter().all(|s| s.effective_reward == 0.0));
        assert!(dag
            .fold_budget(f64::INFINITY, 1.0)
            .states()
            .iter()
            .all(|s| s.effective_reward == 1.0));
        let folded = dag.fold_budget(1.5, 1.0);
        for s in folded.states() {
            let expect = if s.successes >= 2 { 0.0 } else { 1.0 };
            assert_eq!(s.effective_reward, expect, "{:?}", s.key);
        }
    }

    #[test]
    fn injected_fault_is_reported() {
        let mut dag = beta11(3);
        assert!(dag.validate_martingale().unwrap() < EXACT_TOL);
        let v = dag.state_at_counts(1, 0).unwrap();
        let m = dag.state(v).mean;
        dag.set_mean(v, m + 1e-3);
        let worst = dag.validate_martingale().unwrap();
        assert!((worst - 1e-3 * 0.5).abs() < 1e-12 || (worst - 1e-3).abs() < 1e-12, "{worst}");
    }

    #[test]
    fn kernel_rows() {
        let dag = beta11(3);
        let sigma = BlockState::new(dag.root(), 0, Mode::Regular);
        let rows = dag.block_kernel(sigma, 2, 1, 2).unwrap();
        assert_eq!(rows[0].reward, 0.0);
        assert_eq!(rows[0].transitions, vec![(BlockState::new(0, 3, Mode::Regular), 1.0)]);
        assert!((rows[2].reward - 1.0).abs() < STRUCT_TOL);
        for (state, p) in &rows[2].transitions {
            assert!((p - 1.0 / 3.0).abs() < 1e-12, "{state:?}");
        }
        assert!(dag.block_kernel(sigma, 3, 1, 2).is_err());
        let nd = BlockState::new(dag.root(), 0, Mode::NoDelay);
        assert!(dag.block_kernel(nd, 2, 1, 2).is_err());
    }

    #[test]
    fn mixture_with_degenerate_hypothesis() {
        let hyps = [
            Hypothesis { weight: 0.25, theta: 0.9 },
            Hypothesis { weight: 0.75, theta: 0.0 },
        ];
        let dag = OutcomeDag::mixture(&hyps, 4, 1.0).unwrap();
        assert!((dag.state(0).mean - 0.225).abs() < 1e-14);
        assert!(dag.validate_martingale().unwrap() < EXACT_TOL);
        // After one success the arm is certainly the good one.
        let s = dag.state_at_counts(1, 0).unwrap();
        assert!((dag.state(s).mean - 0.9).abs() < 1e-14);
    }

    #[test]
    fn explicit_dag_dangling_child() {
        let explicit = ExplicitDag {
            root: "a".into(),
            states: vec![ExplicitState {
                id: "a".into(),
                mean: 0.5,
                edges: vec![ExplicitEdge {
                    outcome: Outcome::Success,
                    prob: 1.0,
                    child: "missing".into(),
                }],
            }],
        };
        assert!(matches!(
            OutcomeDag::from_explicit(&explicit, 1.0),
            Err(crate::Error::Structural(_))
        ));
    }
}
