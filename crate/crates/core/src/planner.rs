//! Lagrangian planning over per-arm policies.
//!
//! Both relaxations couple the arms through one expected-play constraint, so
//! pricing plays at `λ` decouples them into independent single-arm problems
//! solved exactly by backward induction. A bisection on `λ` finds the price
//! where the play budget binds; mixing the two bracketing policies spends the
//! budget exactly, which makes the mixture an optimal LP solution.
//!
//! - The instantaneous relaxation plans over posterior states with one play
//!   per step.
//! - The block relaxation plans over block states `(u, t, mode)`: regular
//!   blocks of up to `⌈cδ⌉` plays followed by a wait for feedback, limited to
//!   `⌈αQ⌉` blocks, and a switch into no-delay mode where every step is a
//!   single play. The plan horizon is `⌊T/2⌋`.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::instance::ArmModel;
use crate::policy::{Action, Branch, Child, NodeTable, PolicyValue, SingleArmPolicy, Structure, WellStructured};
use crate::prior_dag::{block_span, regular_play_cap, AdvanceCache, BlockState, Mode, OutcomeDag, StateId};

/// Values closer than this are treated as ties; ties prefer fewer plays.
const TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureParams {
    pub alpha: f64,
    pub c: f64,
    pub gamma: f64,
}

impl Default for StructureParams {
    fn default() -> Self {
        let alpha = 0.125;
        StructureParams {
            alpha,
            c: 1.0 / 17.0,
            gamma: gamma_for(alpha),
        }
    }
}

/// `γ = 2(1+1/α)(1+2/α)`.
pub fn gamma_for(alpha: f64) -> f64 {
    2.0 * (1.0 + 1.0 / alpha) * (1.0 + 2.0 / alpha)
}

impl StructureParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.c > 0.0) || self.c > self.alpha / (self.alpha + 2.0) + 1e-12 {
            return Err(Error::Config(format!(
                "c = {} must lie in (0, α/(α+2)] = (0, {}]",
                self.c,
                self.alpha / (self.alpha + 2.0)
            )));
        }
        if !(self.gamma >= 1.0) {
            return Err(Error::Config(format!("gamma {} below 1", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// One play per step with instantaneous feedback, horizon `T`.
    Instant,
    /// Block states with the structural limits of [`StructureParams`].
    Block,
    /// Block states with the structural limits lifted: horizon `T`, blocks of
    /// up to `δ+1` plays, no block cap.
    BlockUnrestricted,
}

/// Shape of the block state space for one arm.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Geometry {
    plan_horizon: u32,
    span: u32,
    max_block: u32,
    regular_blocks: Option<u32>,
}

impl Geometry {
    fn new(relaxation: Relaxation, delay: u32, horizon: u32, params: &StructureParams) -> Self {
        let span = 2 * delay + 1;
        match relaxation {
            Relaxation::Instant => Geometry {
                plan_horizon: horizon,
                span: 1,
                max_block: 1,
                regular_blocks: None,
            },
            Relaxation::Block => Geometry {
                plan_horizon: horizon / 2,
                span,
                max_block: regular_play_cap(params.c, delay).min(delay + 1),
                regular_blocks: (delay > 0)
                    .then(|| ((params.alpha * horizon as f64 / delay as f64) - 1e-9).ceil().max(0.0) as u32),
            },
            Relaxation::BlockUnrestricted => Geometry {
                plan_horizon: horizon,
                span,
                max_block: delay + 1,
                regular_blocks: None,
            },
        }
    }

    fn regular_allowed(&self, block_index: u32) -> bool {
        self.regular_blocks.is_none_or(|cap| block_index < cap)
    }
}

/// Optimal single-arm policy for one play price.
#[derive(Debug, Clone)]
pub struct ArmPlan {
    pub policy: SingleArmPolicy,
    pub value: PolicyValue,
    /// `max_P w·R(P) − λ·N(P)`.
    pub lagrangian: f64,
}

/// Solve `max_P w·R(P) − λ·N(P)` for one arm.
pub fn solve_arm_dp(
    dag: &OutcomeDag,
    delay: u32,
    horizon: u32,
    lambda: f64,
    relaxation: Relaxation,
    params: &StructureParams,
    reward_weight: f64,
) -> Result<ArmPlan> {
    if !(lambda >= 0.0) {
        return Err(invalid(format!("play price {lambda} must be nonnegative")));
    }
    let (policy, lagrangian) = match relaxation {
        Relaxation::Instant => instant_dp(dag, horizon, lambda, reward_weight)?,
        _ => block_dp(
            dag,
            delay,
            Geometry::new(relaxation, delay, horizon, params),
            lambda,
            reward_weight,
            (relaxation == Relaxation::Block).then_some(*params),
        )?,
    };
    let value = policy.evaluate(dag)?;
    Ok(ArmPlan {
        policy,
        value,
        lagrangian,
    })
}

fn instant_dp(dag: &OutcomeDag, horizon: u32, lambda: f64, w: f64) -> Result<(SingleArmPolicy, f64)> {
    let n = dag.len();
    let mut value = vec![0.0; n];
    let mut play = vec![false; n];
    // States are stored in nondecreasing depth order.
    for u in (0..n).rev() {
        let s = dag.state(u);
        if s.depth >= horizon || s.is_leaf() {
            continue;
        }
        let cont: f64 = s.edges.iter().map(|e| e.prob * value[e.child]).sum();
        let q = w * s.play_reward() - lambda + cont;
        if q > TIE {
            value[u] = q;
            play[u] = true;
        }
    }
    if dag.state(0).depth < horizon && dag.state(0).is_leaf() && horizon > 0 {
        return Err(crate::error::structural("DAG too shallow for the horizon"));
    }
    let mut table: NodeTable<StateId> = NodeTable::new();
    let mut cache = AdvanceCache::new();
    let mut stack = vec![0usize];
    table.intern(0, BlockState::new(0, 0, Mode::Regular));
    while let Some(u) = stack.pop() {
        let (id, _) = table.intern(u, BlockState::new(u, dag.state(u).depth, Mode::Regular));
        let branch = if play[u] {
            let depth = dag.state(u).depth + 1;
            let mut fresh_children = Vec::new();
            let children = SingleArmPolicy::children_for(dag, &mut cache, u, 1, |v| {
                let (cid, fresh) = table.intern(v, BlockState::new(v, depth, Mode::Regular));
                if fresh {
                    fresh_children.push(v);
                }
                cid
            })?;
            stack.extend(fresh_children);
            Branch {
                weight: 1.0,
                action: Action::Play { plays: 1 },
                children,
            }
        } else {
            Branch::quit(1.0)
        };
        table.nodes[id].branches = vec![branch];
    }
    // Feedback is instantaneous in this relaxation.
    let policy = SingleArmPolicy {
        delay: 0,
        horizon,
        structure: Structure {
            block_structured: true,
            ..Structure::default()
        },
        nodes: table.nodes,
    }
    .canonicalize();
    Ok((policy, value[0]))
}

fn block_dp(
    dag: &OutcomeDag,
    delay: u32,
    g: Geometry,
    lambda: f64,
    w: f64,
    declared: Option<StructureParams>,
) -> Result<(SingleArmPolicy, f64)> {
    let n = dag.len();
    let h = g.plan_horizon;
    let mut cache = AdvanceCache::new();

    // No-delay values by elapsed time.
    let mut vn = vec![vec![0.0; n]; h as usize + 1];
    let mut dn = vec![vec![false; n]; h as usize + 1];
    for t in (0..h as usize).rev() {
        let (head, tail) = vn.split_at_mut(t + 1);
        let (cur, next) = (&mut head[t], &tail[0]);
        for u in 0..n {
            let s = dag.state(u);
            if s.depth as usize > t || s.is_leaf() {
                continue;
            }
            let cont: f64 = s.edges.iter().map(|e| e.prob * next[e.child]).sum();
            let q = w * s.play_reward() - lambda + cont;
            if q > TIE {
                cur[u] = q;
                dn[t][u] = true;
            }
        }
    }

    // Regular values by block index; time is `k·span`.
    let blocks = h / g.span + 1;
    let mut vr = vec![vec![0.0; n]; blocks as usize + 1];
    let mut dr = vec![vec![Action::Quit; n]; blocks as usize + 1];
    for k in (0..=blocks).rev() {
        let t = k * g.span;
        for u in 0..n {
            let s = dag.state(u);
            if s.depth > t {
                continue;
            }
            let mut best = 0.0;
            let mut act = Action::Quit;
            if t < h && g.regular_allowed(k) && k < blocks {
                for ell in 0..=g.max_block {
                    if ell > 0 && t + ell > h {
                        break;
                    }
                    if ell > 0 && s.depth + ell > dag.max_depth() {
                        break;
                    }
                    let adv = cache.get(dag, u, ell)?;
                    let next = &vr[k as usize + 1];
                    let cont: f64 = adv.dist.iter().map(|&(v, p)| p * next[v]).sum();
                    let q = w * adv.reward - lambda * ell as f64 + cont;
                    if q > best + TIE {
                        best = q;
                        act = Action::Play { plays: ell };
                    }
                }
            }
            if t < h {
                let q = vn[t as usize][u];
                if q > best + TIE {
                    best = q;
                    act = Action::Switch;
                }
            }
            vr[k as usize][u] = best;
            dr[k as usize][u] = act;
        }
    }

    let mut table: NodeTable<BlockState> = NodeTable::new();
    let root = BlockState::new(0, 0, Mode::Regular);
    table.intern(root, root);
    let mut stack = vec![root];
    while let Some(st) = stack.pop() {
        let (id, _) = table.intern(st, st);
        let t = st.elapsed;
        let action = match st.mode {
            Mode::Regular => {
                let k = (t / g.span) as usize;
                if t % g.span == 0 && k < dr.len() {
                    dr[k][st.posterior]
                } else {
                    Action::Quit
                }
            }
            Mode::NoDelay => {
                if t < h && dn[t as usize][st.posterior] {
                    Action::Play { plays: 1 }
                } else {
                    Action::Quit
                }
            }
        };
        let branch = match action {
            Action::Quit => Branch::quit(1.0),
            Action::Switch => {
                let child = BlockState::new(st.posterior, t, Mode::NoDelay);
                let (cid, fresh) = table.intern(child, child);
                if fresh {
                    stack.push(child);
                }
                Branch {
                    weight: 1.0,
                    action,
                    children: vec![Child {
                        posterior: st.posterior,
                        node: cid,
                    }],
                }
            }
            Action::Play { plays } => {
                let elapsed = t + block_span(st.mode, plays, delay);
                let mut fresh_states = Vec::new();
                let children = SingleArmPolicy::children_for(dag, &mut cache, st.posterior, plays, |v| {
                    let child = BlockState::new(v, elapsed, st.mode);
                    let (cid, fresh) = table.intern(child, child);
                    if fresh {
                        fresh_states.push(child);
                    }
                    cid
                })?;
                stack.extend(fresh_states);
                Branch {
                    weight: 1.0,
                    action,
                    children,
                }
            }
        };
        table.nodes[id].branches = vec![branch];
    }
    let policy = SingleArmPolicy {
        delay,
        horizon: h,
        structure: Structure {
            block_structured: true,
            delay_free: None,
            well_structured: declared.map(|p| WellStructured { alpha: p.alpha, c: p.c }),
        },
        nodes: table.nodes,
    }
    .canonicalize();
    Ok((policy, vr[0][0]))
}

/// Occupancy of one block state: `x` and `y` per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateOccupancy {
    pub state: BlockState,
    pub x: f64,
    pub y: Vec<(Action, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOccupancy {
    pub arm: String,
    pub delay: u32,
    /// Probability the arm's policy starts at all (1 unless scaled down).
    pub start_mass: f64,
    pub states: Vec<StateOccupancy>,
    pub reward: f64,
    pub plays: f64,
}

impl ArmOccupancy {
    fn from_policies(arm: &str, delay: u32, parts: &[(f64, &ArmPlan)]) -> Self {
        let mut acc: BTreeMap<BlockState, (f64, BTreeMap<Action, f64>)> = BTreeMap::new();
        let (mut reward, mut plays) = (0.0, 0.0);
        for &(weight, plan) in parts {
            if weight == 0.0 {
                continue;
            }
            reward += weight * plan.value.reward;
            plays += weight * plan.value.plays;
            for (id, node) in plan.policy.nodes.iter().enumerate() {
                let m = weight * plan.value.node_mass[id];
                if m == 0.0 {
                    continue;
                }
                let entry = acc.entry(node.state).or_default();
                entry.0 += m;
                for b in &node.branches {
                    if b.action != Action::Quit && b.weight > 0.0 {
                        *entry.1.entry(b.action).or_insert(0.0) += m * b.weight;
                    }
                }
            }
        }
        ArmOccupancy {
            arm: arm.to_string(),
            delay,
            start_mass: 1.0,
            states: acc
                .into_iter()
                .map(|(state, (x, y))| StateOccupancy {
                    state,
                    x,
                    y: y.into_iter().collect(),
                })
                .collect(),
            reward,
            plays,
        }
    }

    fn get(&self, state: &BlockState) -> Option<&StateOccupancy> {
        self.states
            .binary_search_by(|s| s.state.cmp(state))
            .ok()
            .map(|i| &self.states[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaProbe {
    pub lambda: f64,
    pub plays: f64,
    pub reward: f64,
    pub lagrangian: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub relaxation: Relaxation,
    pub horizon: u32,
    pub plan_horizon: u32,
    pub params: StructureParams,
    /// Expected-play budget the multiplier search targeted.
    pub budget: f64,
    pub lambda: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// Weight of the low-price (more playing) policies in the mixture.
    pub theta: f64,
    pub objective: f64,
    pub expected_plays: f64,
    /// `min_λ Σ_i V_i(λ) + λ·budget` over the probed prices.
    pub dual_bound: f64,
    pub duality_gap: f64,
    pub iterations: usize,
    pub trace: Vec<LambdaProbe>,
    /// Product of all scale-down factors applied.
    pub scale: f64,
    pub arms: Vec<ArmOccupancy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledConfig {
    pub horizon: u32,
    pub budget: f64,
    pub relaxation: Relaxation,
    pub params: StructureParams,
    /// Stopping width of the bisection, relative to the largest bid.
    pub tolerance: f64,
}

impl CoupledConfig {
    pub fn new(horizon: u32, budget: f64, relaxation: Relaxation) -> Self {
        CoupledConfig {
            horizon,
            budget,
            relaxation,
            params: StructureParams::default(),
            tolerance: 1e-9,
        }
    }
}

/// Per-arm DP at a fixed price with identical arms solved once.
pub(crate) struct PricedArms<'a> {
    models: &'a [ArmModel],
    weights: Vec<f64>,
    groups: Vec<usize>,
    representatives: Vec<usize>,
    cfg: CoupledConfig,
}

#[derive(Clone)]
pub(crate) struct Probe {
    pub lambda: f64,
    pub plans: Vec<ArmPlan>,
    pub plays: f64,
    pub reward: f64,
    pub lagrangian: f64,
}

impl<'a> PricedArms<'a> {
    pub fn new(models: &'a [ArmModel], weights: Vec<f64>, cfg: CoupledConfig) -> Self {
        let mut keys: HashMap<String, usize> = HashMap::new();
        let mut groups = Vec::with_capacity(models.len());
        let mut representatives = Vec::new();
        for (i, m) in models.iter().enumerate() {
            let mut spec = m.spec.clone();
            spec.id.clear();
            let key = format!(
                "{}|{:e}",
                serde_json::to_string(&spec).unwrap_or_default(),
                weights[i]
            );
            let g = *keys.entry(key).or_insert_with(|| {
                representatives.push(i);
                representatives.len() - 1
            });
            groups.push(g);
        }
        PricedArms {
            models,
            weights,
            groups,
            representatives,
            cfg,
        }
    }

    pub fn probe(&self, lambda: f64) -> Result<Probe> {
        let solved: Vec<ArmPlan> = self
            .representatives
            .par_iter()
            .map(|&i| {
                let m = &self.models[i];
                solve_arm_dp(
                    &m.dag,
                    m.spec.delay,
                    self.cfg.horizon,
                    lambda,
                    self.cfg.relaxation,
                    &self.cfg.params,
                    self.weights[i],
                )
            })
            .collect::<Result<_>>()?;
        let plans: Vec<ArmPlan> = self.groups.iter().map(|&g| solved[g].clone()).collect();
        let plays = plans.iter().map(|p| p.value.plays).sum();
        let reward = plans
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * p.value.reward)
            .sum();
        let lagrangian = plans.iter().map(|p| p.lagrangian).sum();
        Ok(Probe {
            lambda,
            plans,
            plays,
            reward,
            lagrangian,
        })
    }
}

/// Result of the price search before it is turned into occupancies.
pub(crate) struct PriceSearch {
    pub lo: Probe,
    pub hi: Probe,
    pub theta: f64,
    pub trace: Vec<LambdaProbe>,
}

pub(crate) fn price_search(arms: &PricedArms, budget: f64, tolerance: f64, lambda_max: f64) -> Result<PriceSearch> {
    let mut trace = Vec::new();
    let record = |p: &Probe, trace: &mut Vec<LambdaProbe>| {
        trace.push(LambdaProbe {
            lambda: p.lambda,
            plays: p.plays,
            reward: p.reward,
            lagrangian: p.lagrangian,
        })
    };
    let zero = arms.probe(0.0)?;
    record(&zero, &mut trace);
    if zero.plays <= budget + 1e-12 {
        return Ok(PriceSearch {
            hi: zero.clone(),
            lo: zero,
            theta: 1.0,
            trace,
        });
    }
    let mut lo = zero;
    let mut hi = arms.probe(lambda_max)?;
    record(&hi, &mut trace);
    let width = tolerance * lambda_max;
    while hi.lambda - lo.lambda > width {
        let mid = 0.5 * (lo.lambda + hi.lambda);
        let p = arms.probe(mid)?;
        record(&p, &mut trace);
        if p.plays > budget {
            lo = p;
        } else {
            hi = p;
        }
    }
    let theta = if lo.plays > hi.plays {
        ((budget - hi.plays) / (lo.plays - hi.plays)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(PriceSearch { lo, hi, theta, trace })
}

/// Solve the coupled relaxation over all arms.
pub fn solve_coupled(models: &[ArmModel], cfg: &CoupledConfig) -> Result<LpSolution> {
    solve_coupled_weighted(models, &vec![1.0; models.len()], cfg)
}

/// As [`solve_coupled`] with per-arm reward weights in the Lagrangian.
pub fn solve_coupled_weighted(models: &[ArmModel], weights: &[f64], cfg: &CoupledConfig) -> Result<LpSolution> {
    if models.is_empty() {
        return Err(invalid("no arms to plan"));
    }
    if !(cfg.budget > 0.0) {
        return Err(invalid(format!("play budget {} must be positive", cfg.budget)));
    }
    if cfg.relaxation == Relaxation::Block {
        cfg.params.validate()?;
    }
    let lambda_max = models
        .iter()
        .zip(weights)
        .map(|(m, w)| m.spec.bid * w)
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let priced = PricedArms::new(models, weights.to_vec(), *cfg);
    let search = price_search(&priced, cfg.budget, cfg.tolerance, lambda_max)?;
    Ok(assemble_solution(models, cfg, &search))
}

pub(crate) fn assemble_solution(models: &[ArmModel], cfg: &CoupledConfig, search: &PriceSearch) -> LpSolution {
    let theta = search.theta;
    let arms: Vec<ArmOccupancy> = models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            ArmOccupancy::from_policies(
                &m.spec.id,
                m.spec.delay,
                &[(theta, &search.lo.plans[i]), (1.0 - theta, &search.hi.plans[i])],
            )
        })
        .collect();
    let objective = arms.iter().map(|a| a.reward).sum();
    let expected_plays = arms.iter().map(|a| a.plays).sum();
    let dual_bound = search
        .trace
        .iter()
        .map(|p| p.lagrangian + p.lambda * cfg.budget)
        .fold(f64::INFINITY, f64::min);
    let plan_horizon = match cfg.relaxation {
        Relaxation::Block => cfg.horizon / 2,
        _ => cfg.horizon,
    };
    LpSolution {
        relaxation: cfg.relaxation,
        horizon: cfg.horizon,
        plan_horizon,
        params: cfg.params,
        budget: cfg.budget,
        lambda: search.hi.lambda,
        lambda_lo: search.lo.lambda,
        lambda_hi: search.hi.lambda,
        theta,
        objective,
        expected_plays,
        dual_bound,
        duality_gap: dual_bound - objective,
        iterations: search.trace.len(),
        trace: search.trace.clone(),
        scale: 1.0,
        arms,
    }
}

impl LpSolution {
    /// Divide every occupancy by `gamma`; the residual mass quits at the root.
    pub fn scale_down(&self, gamma: f64) -> Result<LpSolution> {
        if !(gamma >= 1.0) {
            return Err(invalid(format!("scale factor {gamma} below 1")));
        }
        let f = 1.0 / gamma;
        let mut out = self.clone();
        for arm in &mut out.arms {
            arm.start_mass *= f;
            arm.reward *= f;
            arm.plays *= f;
            for s in &mut arm.states {
                s.x *= f;
                for (_, y) in &mut s.y {
                    *y *= f;
                }
            }
        }
        out.objective *= f;
        out.expected_plays *= f;
        out.dual_bound *= f;
        out.duality_gap *= f;
        out.scale *= f;
        Ok(out)
    }

    /// Scale one arm's occupancies by `f ≤ 1`; the removed mass quits at the
    /// root.
    pub fn scale_arm(&mut self, arm: usize, f: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&f) {
            return Err(invalid(format!("arm scale {f} outside [0, 1]")));
        }
        let a = &mut self.arms[arm];
        self.objective -= (1.0 - f) * a.reward;
        self.expected_plays -= (1.0 - f) * a.plays;
        a.start_mass *= f;
        a.reward *= f;
        a.plays *= f;
        for s in &mut a.states {
            s.x *= f;
            for (_, y) in &mut s.y {
                *y *= f;
            }
        }
        Ok(())
    }

    /// Non-monotone steps of total plays along the price trace.
    pub fn monotonicity_violations(&self) -> usize {
        let mut probes = self.trace.clone();
        probes.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        probes.windows(2).filter(|w| w[1].plays > w[0].plays + 1e-9).count()
    }

    pub fn arm_index(&self, arm: &str) -> Option<usize> {
        self.arms.iter().position(|a| a.arm == arm)
    }

    /// Check flow conservation, per-state capacity, per-layer mass and the
    /// play budget against the arms' kernels.
    pub fn check_constraints(&self, models: &[ArmModel]) -> Result<ConstraintReport> {
        let mut report = ConstraintReport::default();
        for (arm, model) in self.arms.iter().zip(models) {
            let dag = &model.dag;
            let mut cache = AdvanceCache::new();
            let root = BlockState::new(dag.root(), 0, Mode::Regular);
            let mut inflow: BTreeMap<BlockState, f64> = BTreeMap::from([(root, arm.start_mass)]);
            let mut layers: BTreeMap<(u32, Mode), f64> = BTreeMap::new();
            for s in &arm.states {
                *layers.entry((s.state.elapsed, s.state.mode)).or_insert(0.0) += s.x;
                let out: f64 = s.y.iter().map(|(_, y)| y).sum();
                report.capacity = report.capacity.max(out - s.x);
                for &(action, y) in &s.y {
                    match action {
                        Action::Quit => {}
                        Action::Switch => {
                            let to = BlockState::new(s.state.posterior, s.state.elapsed, Mode::NoDelay);
                            *inflow.entry(to).or_insert(0.0) += y;
                        }
                        Action::Play { plays } => {
                            let adv = cache.get(dag, s.state.posterior, plays)?;
                            let elapsed = s.state.elapsed + block_span(s.state.mode, plays, arm.delay_for(self));
                            for &(v, p) in &adv.dist {
                                *inflow.entry(BlockState::new(v, elapsed, s.state.mode)).or_insert(0.0) += y * p;
                            }
                        }
                    }
                }
            }
            for (state, flow) in &inflow {
                let x = arm.get(state).map(|s| s.x).unwrap_or(0.0);
                report.flow = report.flow.max((x - flow).abs());
            }
            for s in &arm.states {
                if !inflow.contains_key(&s.state) {
                    report.flow = report.flow.max(s.x);
                }
            }
            report.layer_mass = layers.values().cloned().fold(report.layer_mass, f64::max);
        }
        report.total_plays = self.expected_plays;
        report.budget_excess = self.expected_plays - self.budget * self.scale;
        Ok(report)
    }

    /// Fig. 1 policy for one arm: at block state `σ` pick action `a` with
    /// probability `y_σa / x_σ`, quitting with the remainder. The root uses
    /// denominator 1 so a scaled-down solution quits there with the
    /// scaled-away mass.
    pub fn extract_randomized(&self, arm_index: usize, dag: &OutcomeDag) -> Result<SingleArmPolicy> {
        let arm = &self.arms[arm_index];
        let delay = arm.delay_for(self);
        let root = BlockState::new(dag.root(), 0, Mode::Regular);
        let mut table: NodeTable<BlockState> = NodeTable::new();
        let mut cache = AdvanceCache::new();
        table.intern(root, root);
        let mut stack = vec![root];
        while let Some(st) = stack.pop() {
            let (id, _) = table.intern(st, st);
            let occ = arm.get(&st);
            let denom = if st == root { 1.0 } else { occ.map(|o| o.x).unwrap_or(0.0) };
            let mut branches = Vec::new();
            let mut used = 0.0;
            if let Some(o) = occ {
                for &(action, y) in &o.y {
                    if y <= 0.0 || action == Action::Quit {
                        continue;
                    }
                    if denom <= 0.0 {
                        return Err(Error::Infeasible(format!(
                            "arm {}: state {st:?} has zero occupancy but action mass {y}",
                            arm.arm
                        )));
                    }
                    let weight = y / denom;
                    used += weight;
                    let mut fresh_states = Vec::new();
                    let children = match action {
                        Action::Switch => {
                            let child = BlockState::new(st.posterior, st.elapsed, Mode::NoDelay);
                            let (cid, fresh) = table.intern(child, child);
                            if fresh {
                                fresh_states.push(child);
                            }
                            vec![Child {
                                posterior: st.posterior,
                                node: cid,
                            }]
                        }
                        Action::Play { plays } => {
                            let elapsed = st.elapsed + block_span(st.mode, plays, delay);
                            SingleArmPolicy::children_for(dag, &mut cache, st.posterior, plays, |v| {
                                let child = BlockState::new(v, elapsed, st.mode);
                                let (cid, fresh) = table.intern(child, child);
                                if fresh {
                                    fresh_states.push(child);
                                }
                                cid
                            })?
                        }
                        Action::Quit => unreachable!(),
                    };
                    stack.extend(fresh_states);
                    branches.push(Branch {
                        weight,
                        action,
                        children,
                    });
                }
            }
            if used > 1.0 + 1e-9 {
                return Err(Error::Infeasible(format!(
                    "arm {}: action mass exceeds occupancy at {st:?} ({used})",
                    arm.arm
                )));
            }
            if used > 1.0 {
                for b in &mut branches {
                    b.weight /= used;
                }
            } else if used < 1.0 {
                branches.push(Branch::quit(1.0 - used));
            }
            table.nodes[id].branches = branches;
        }
        let structure = Structure {
            block_structured: true,
            delay_free: None,
            well_structured: (self.relaxation == Relaxation::Block).then_some(WellStructured {
                alpha: self.params.alpha,
                c: self.params.c,
            }),
        };
        Ok(SingleArmPolicy {
            delay,
            horizon: self.plan_horizon,
            structure,
            nodes: table.nodes,
        }
        .canonicalize())
    }
}

/// The delayed-feedback plan: the block relaxation at play budget `γT`, its
/// `1/γ` scale-down and one randomized policy per arm for Combine.
#[derive(Debug, Clone)]
pub struct DelayedPlan {
    pub relaxed: LpSolution,
    pub scaled: LpSolution,
    pub policies: Vec<SingleArmPolicy>,
}

impl DelayedPlan {
    /// Exact `R(P^r_i)` per arm.
    pub fn arm_rewards(&self) -> Vec<f64> {
        self.scaled.arms.iter().map(|a| a.reward).collect()
    }
}

pub fn solve_delayed(models: &[ArmModel], horizon: u32, params: &StructureParams) -> Result<DelayedPlan> {
    params.validate()?;
    let mut cfg = CoupledConfig::new(horizon, params.gamma * horizon as f64, Relaxation::Block);
    cfg.params = *params;
    let relaxed = solve_coupled(models, &cfg)?;
    delayed_from_relaxed(models, relaxed, params.gamma)
}

pub(crate) fn delayed_from_relaxed(models: &[ArmModel], relaxed: LpSolution, gamma: f64) -> Result<DelayedPlan> {
    let scaled = relaxed.scale_down(gamma)?;
    let policies = models
        .iter()
        .enumerate()
        .map(|(i, m)| scaled.extract_randomized(i, &m.dag))
        .collect::<Result<_>>()?;
    Ok(DelayedPlan {
        relaxed,
        scaled,
        policies,
    })
}

impl ArmOccupancy {
    fn delay_for(&self, sol: &LpSolution) -> u32 {
        match sol.relaxation {
            Relaxation::Instant => 0,
            _ => self.delay,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// Largest `|x_σ' − inflow(σ')|`.
    pub flow: f64,
    /// Largest `Σ_a y_σa − x_σ`.
    pub capacity: f64,
    /// Largest total occupancy of one `(elapsed, mode)` layer.
    pub layer_mass: f64,
    pub total_plays: f64,
    pub budget_excess: f64,
}

impl ConstraintReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.flow <= tol && self.capacity <= tol && self.layer_mass <= 1.0 + tol && self.budget_excess <= 1e-6
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior_dag::ArmSpec;

    fn model(a1: u32, a0: u32, depth: u32) -> ArmModel {
        ArmModel::new(ArmSpec::beta("a", a1, a0), depth).unwrap()
    }

    #[test]
    fn expensive_plays_quit() {
        let m = model(1, 1, 4);
        let plan = solve_arm_dp(&m.dag, 0, 4, 1.0, Relaxation::Instant, &StructureParams::default(), 1.0).unwrap();
        assert_eq!(plan.value.plays, 0.0);
        assert_eq!(plan.lagrangian, 0.0);
    }

    #[test]
    fn free_plays_fill_the_horizon() {
        let m = model(2, 3, 5);
        let plan = solve_arm_dp(&m.dag, 0, 5, 0.0, Relaxation::Instant, &StructureParams::default(), 1.0).unwrap();
        assert!((plan.value.reward - 5.0 * 0.4).abs() < 1e-12);
        assert_eq!(plan.value.plays, 5.0);
    }

    #[test]
    fn priced_two_step_example() {
        let m = model(1, 1, 2);
        let plan = solve_arm_dp(&m.dag, 0, 2, 0.4, Relaxation::Instant, &StructureParams::default(), 1.0).unwrap();
        let expect = (0.5 - 0.4) + 0.5 * (2.0 / 3.0 - 0.4);
        assert!((plan.lagrangian - expect).abs() < 1e-12);
        assert!((plan.value.reward - 0.4 * plan.value.plays - expect).abs() < 1e-12);
    }

    #[test]
    fn slack_budget_uses_zero_price() {
        let models = vec![model(1, 1, 4)];
        let sol = solve_coupled(&models, &CoupledConfig::new(4, 4.0, Relaxation::Instant)).unwrap();
        assert_eq!(sol.lambda, 0.0);
        assert!((sol.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_arm_list_rejected() {
        assert!(solve_coupled(&[], &CoupledConfig::new(4, 4.0, Relaxation::Instant)).is_err());
    }

    #[test]
    fn scale_down_divides_everything() {
        let models = vec![model(1, 1, 6), model(1, 2, 6)];
        let sol = solve_coupled(&models, &CoupledConfig::new(6, 3.0, Relaxation::Instant)).unwrap();
        let same = sol.scale_down(1.0).unwrap();
        assert_eq!(same.objective, sol.objective);
        let s = sol.scale_down(306.0).unwrap();
        assert!((s.objective - sol.objective / 306.0).abs() < 1e-15);
        for (i, m) in models.iter().enumerate() {
            let p = s.extract_randomized(i, &m.dag).unwrap();
            let v = p.evaluate(&m.dag).unwrap();
            assert!((v.plays - sol.arms[i].plays / 306.0).abs() < 1e-12);
        }
    }
}
