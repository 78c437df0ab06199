//! Budgeted allocation: impression types as parallel bandit instances whose
//! arms are (bidder, type) pairs, tied together by per-bidder budgets.
//!
//! Planning prices plays per type (`λ_j`) and reward per bidder (`μ_i`); an
//! arm of bidder `i` then solves `max (1 − μ_i)·R − λ_j·N`. The per-type
//! price comes from the planner's bisection and the bidder prices from a
//! coordinate-wise bisection until every bidder constraint holds. Execution
//! runs one Combine policy per type and settles each bidder's successes in
//! arrival order.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::instance::ArmModel;
use crate::planner::{
    assemble_solution, delayed_from_relaxed, price_search, CoupledConfig, DelayedPlan, LpSolution, PriceSearch,
    PricedArms, Relaxation, StructureParams,
};
use crate::prior_dag::{ArmSpec, Outcome, OutcomeDag, PriorSpec, StateId};
use crate::scheduler::{combine, execute, settle, ArmPlanEntry, GlobalPolicy, TraceEvent};
use crate::sim::{trial_rng, GroundTruth, MeanSe, Moments, ORACLE_STATE_LIMIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bidder {
    pub id: String,
    /// `None` means unlimited.
    #[serde(default)]
    pub budget: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionType {
    pub id: String,
    pub arrivals: u32,
}

/// One (bidder, type) arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub bidder: String,
    #[serde(rename = "type")]
    pub impression: String,
    pub bid: f64,
    #[serde(default)]
    pub delay: u32,
    pub prior: PriorSpec,
}

/// How arrivals of the different types interleave in time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ArrivalOrder {
    /// Smooth round-robin proportional to the arrival counts.
    #[default]
    RoundRobin,
    /// The round-robin sequence shuffled with a seed.
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationInstance {
    #[serde(default)]
    pub name: Option<String>,
    pub bidders: Vec<Bidder>,
    pub types: Vec<ImpressionType>,
    pub pairs: Vec<PairSpec>,
    #[serde(default)]
    pub arrival: ArrivalOrder,
}

impl AllocationInstance {
    pub fn from_json(text: &str) -> Result<Self> {
        let inst: AllocationInstance = serde_json::from_str(text)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::InvalidInput(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| "allocation".into())
    }

    /// Total arrivals `T = Σ_j T_j`.
    pub fn horizon(&self) -> u32 {
        self.types.iter().map(|t| t.arrivals).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for b in &self.bidders {
            if !seen.insert(b.id.as_str()) {
                return Err(invalid(format!("duplicate bidder {}", b.id)));
            }
            if let Some(x) = b.budget {
                if !(x >= 0.0) {
                    return Err(invalid(format!("bidder {}: budget must be nonnegative", b.id)));
                }
            }
        }
        let mut seen = HashSet::new();
        for t in &self.types {
            if !seen.insert(t.id.as_str()) {
                return Err(invalid(format!("duplicate impression type {}", t.id)));
            }
        }
        let mut seen = HashSet::new();
        for p in &self.pairs {
            self.bidder_index(&p.bidder)?;
            self.type_index(&p.impression)?;
            if !seen.insert((p.bidder.as_str(), p.impression.as_str())) {
                return Err(invalid(format!("duplicate pair ({}, {})", p.bidder, p.impression)));
            }
            self.pair_arm(p, None).validate()?;
        }
        Ok(())
    }

    pub fn bidder_index(&self, id: &str) -> Result<usize> {
        self.bidders
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| invalid(format!("unknown bidder {id}")))
    }

    pub fn type_index(&self, id: &str) -> Result<usize> {
        self.types
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| invalid(format!("unknown impression type {id}")))
    }

    /// The pair as a single arm with the given budget.
    pub fn pair_arm(&self, p: &PairSpec, budget: Option<f64>) -> ArmSpec {
        ArmSpec {
            id: format!("{}:{}", p.bidder, p.impression),
            prior: p.prior.clone(),
            delay: p.delay,
            budget,
            bid: p.bid,
        }
    }

    /// Type of every global arrival.
    pub fn schedule(&self) -> Vec<usize> {
        let total = self.horizon();
        let mut served = vec![0u32; self.types.len()];
        let mut out = Vec::with_capacity(total as usize);
        for t in 0..total {
            let mut best: Option<(f64, usize)> = None;
            for (j, ty) in self.types.iter().enumerate() {
                if served[j] >= ty.arrivals {
                    continue;
                }
                let deficit = ty.arrivals as f64 * (t + 1) as f64 / total as f64 - served[j] as f64;
                if best.is_none_or(|(d, _)| deficit > d + 1e-12) {
                    best = Some((deficit, j));
                }
            }
            let j = best.map(|b| b.1).unwrap_or(0);
            served[j] += 1;
            out.push(j);
        }
        if let ArrivalOrder::Shuffled { seed } = self.arrival {
            out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        out
    }
}

/// Integer multiple of `bid` not above `cap`.
fn whole_bids(cap: f64, bid: f64) -> f64 {
    bid * (cap / bid + 1e-9).floor()
}

/// How finite bidder budgets are split into pair budgets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowRule {
    /// Enough whole bids to cover the pair's reward in the plan without
    /// bidder budgets, capped at the bidder budget.
    #[default]
    LpShare,
    /// The bidder budget rounded down to whole bids.
    BidderBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowBudget {
    pub bidder: String,
    pub impression: String,
    pub bid: f64,
    /// `None` when the bidder is unlimited.
    pub budget: Option<f64>,
}

impl ShadowBudget {
    /// `B_ij / b_ij` is a whole number.
    pub fn is_integral(&self) -> bool {
        self.budget.is_none_or(|b| {
            let k = b / self.bid;
            (k - k.round()).abs() < 1e-9
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetedConfig {
    pub params: StructureParams,
    pub participation: f64,
    pub shadow: ShadowRule,
    /// Relative bisection width for both price families.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for BudgetedConfig {
    fn default() -> Self {
        BudgetedConfig {
            params: StructureParams::default(),
            participation: 0.25,
            shadow: ShadowRule::default(),
            tolerance: 1e-9,
            max_sweeps: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPlan {
    pub bidder: String,
    pub impression: String,
    pub shadow_budget: Option<f64>,
    /// Reward in the relaxed plan, before the `1/γ` scale-down.
    pub relaxed_reward: f64,
    pub relaxed_plays: f64,
    /// Exact `R(P^r)` of the executed policy.
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidderPlan {
    pub bidder: String,
    pub budget: Option<f64>,
    pub mu: f64,
    pub relaxed_reward: f64,
    /// Factor applied to the bidder's pairs when the price search ended
    /// slightly over budget.
    pub repair: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    pub impression: String,
    pub arrivals: u32,
    pub lambda: f64,
    pub relaxed_objective: f64,
    pub relaxed_plays: f64,
}

/// Serializable part of a [`BudgetedPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetedReport {
    pub instance: String,
    /// LP objective `M` over the relaxed per-type play budgets `γT_j`.
    pub objective: f64,
    /// `M/γ`, the expected reward of the executed policies before Combine.
    pub scaled_objective: f64,
    pub sweeps: usize,
    pub pairs: Vec<PairPlan>,
    pub bidders: Vec<BidderPlan>,
    pub types: Vec<TypeSummary>,
    pub shadow: Vec<ShadowBudget>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TypePlan {
    pub impression: String,
    pub arrivals: u32,
    /// Pair indices of this type, in arm order.
    pub pairs: Vec<usize>,
    pub models: Vec<ArmModel>,
    pub plan: DelayedPlan,
    pub policy: GlobalPolicy,
}

#[derive(Debug, Clone)]
pub struct BudgetedPlan {
    pub report: BudgetedReport,
    /// `None` for types without arrivals or pairs.
    pub types: Vec<Option<TypePlan>>,
    pub schedule: Vec<usize>,
    pub budgets: Vec<f64>,
    pair_bidder: Vec<usize>,
}

/// Arrival count of Theorem-6 style guarantees, used only for a warning.
fn arrival_threshold(delay: u32, arrivals: u32) -> f64 {
    48.0 * (8.0 * delay as f64 + 2.0) * (arrivals.max(1) as f64).ln()
}

struct TypeProblem {
    index: usize,
    pairs: Vec<usize>,
    models: Vec<ArmModel>,
    cfg: CoupledConfig,
}

impl TypeProblem {
    fn solve(&self, weights: &[f64], tolerance: f64) -> Result<PriceSearch> {
        let lambda_max = self
            .models
            .iter()
            .zip(weights)
            .map(|(m, w)| m.spec.bid * w)
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let priced = PricedArms::new(&self.models, weights.to_vec(), self.cfg);
        price_search(&priced, self.cfg.budget, tolerance, lambda_max)
    }
}

fn mixed_rewards(search: &PriceSearch) -> Vec<f64> {
    search
        .lo
        .plans
        .iter()
        .zip(&search.hi.plans)
        .map(|(l, h)| search.theta * l.value.reward + (1.0 - search.theta) * h.value.reward)
        .collect()
}

struct Coupling<'a> {
    problems: &'a [TypeProblem],
    pair_bidder: &'a [usize],
    tolerance: f64,
}

impl Coupling<'_> {
    fn weights(&self, p: &TypeProblem, mu: &[f64]) -> Vec<f64> {
        p.pairs.iter().map(|&k| (1.0 - mu[self.pair_bidder[k]]).max(0.0)).collect()
    }

    fn solve_all(&self, mu: &[f64]) -> Result<Vec<PriceSearch>> {
        self.problems
            .iter()
            .map(|p| p.solve(&self.weights(p, mu), self.tolerance))
            .collect()
    }

    fn bidder_reward(&self, searches: &[PriceSearch], bidder: usize) -> f64 {
        let mut total = 0.0;
        for (p, s) in self.problems.iter().zip(searches) {
            for (r, &k) in mixed_rewards(s).into_iter().zip(&p.pairs) {
                if self.pair_bidder[k] == bidder {
                    total += r;
                }
            }
        }
        total
    }

    /// Relaxed reward once every bidder is scaled down to its budget.
    fn capped_value(&self, searches: &[PriceSearch], budgets: &[f64]) -> f64 {
        (0..budgets.len()).map(|i| self.bidder_reward(searches, i).min(budgets[i])).sum()
    }

    /// Re-solve only the types where `bidder` has a pair.
    fn resolve_bidder(&self, searches: &mut [PriceSearch], mu: &[f64], bidder: usize) -> Result<()> {
        for (p, s) in self.problems.iter().zip(searches.iter_mut()) {
            if p.pairs.iter().any(|&k| self.pair_bidder[k] == bidder) {
                *s = p.solve(&self.weights(p, mu), self.tolerance)?;
            }
        }
        Ok(())
    }
}

/// Plan one randomized Combine-ready policy per pair.
pub fn plan_budgeted(inst: &AllocationInstance, cfg: &BudgetedConfig) -> Result<BudgetedPlan> {
    inst.validate()?;
    cfg.params.validate()?;
    if !(0.0..=1.0).contains(&cfg.participation) {
        return Err(invalid(format!("participation {} outside [0, 1]", cfg.participation)));
    }
    let pair_bidder: Vec<usize> = inst.pairs.iter().map(|p| inst.bidder_index(&p.bidder)).collect::<Result<_>>()?;
    let pair_type: Vec<usize> = inst.pairs.iter().map(|p| inst.type_index(&p.impression)).collect::<Result<_>>()?;
    let budgets: Vec<f64> = inst.bidders.iter().map(|b| b.budget.unwrap_or(f64::INFINITY)).collect();
    let mut warnings = Vec::new();
    for (k, p) in inst.pairs.iter().enumerate() {
        let arrivals = inst.types[pair_type[k]].arrivals;
        if arrivals == 0 {
            continue;
        }
        if arrivals / 2 < 2 * p.delay + 1 {
            return Err(Error::Config(format!(
                "pair ({}, {}): {} arrivals leave a plan horizon of {}, shorter than one block of span {}",
                p.bidder,
                p.impression,
                arrivals,
                arrivals / 2,
                2 * p.delay + 1
            )));
        }
        let threshold = arrival_threshold(p.delay, arrivals);
        if (arrivals as f64) < threshold {
            warnings.push(format!(
                "pair ({}, {}): {} arrivals below 48(8δ+2)·ln T_j = {:.0}; the constant-factor guarantee is not claimed",
                p.bidder, p.impression, arrivals, threshold
            ));
        }
    }
    let build = |budget_of: &dyn Fn(usize) -> Option<f64>| -> Result<Vec<TypeProblem>> {
        let mut out = Vec::new();
        for (j, ty) in inst.types.iter().enumerate() {
            let pairs: Vec<usize> = (0..inst.pairs.len()).filter(|&k| pair_type[k] == j).collect();
            if ty.arrivals == 0 || pairs.is_empty() {
                continue;
            }
            let models = pairs
                .iter()
                .map(|&k| ArmModel::new(inst.pair_arm(&inst.pairs[k], budget_of(k)), ty.arrivals))
                .collect::<Result<_>>()?;
            let mut ccfg = CoupledConfig::new(ty.arrivals, cfg.params.gamma * ty.arrivals as f64, Relaxation::Block);
            ccfg.params = cfg.params;
            ccfg.tolerance = cfg.tolerance;
            out.push(TypeProblem {
                index: j,
                pairs,
                models,
                cfg: ccfg,
            });
        }
        Ok(out)
    };

    // Pair reward shares with every pair folded at its bidder's budget.
    let folded = |k: usize| budgets[pair_bidder[k]].is_finite().then(|| whole_bids(budgets[pair_bidder[k]], inst.pairs[k].bid));
    let mu0 = vec![0.0; inst.bidders.len()];
    let mut share = vec![0.0; inst.pairs.len()];
    if cfg.shadow == ShadowRule::LpShare {
        let problems = build(&folded)?;
        let coupling = Coupling {
            problems: &problems,
            pair_bidder: &pair_bidder,
            tolerance: cfg.tolerance,
        };
        for (p, s) in problems.iter().zip(coupling.solve_all(&mu0)?) {
            for (r, &k) in mixed_rewards(&s).into_iter().zip(&p.pairs) {
                share[k] = r;
            }
        }
    }
    let shadow_of = |k: usize| -> Option<f64> {
        let b = budgets[pair_bidder[k]];
        if !b.is_finite() {
            return None;
        }
        let bid = inst.pairs[k].bid;
        let whole = whole_bids(b, bid);
        Some(match cfg.shadow {
            ShadowRule::BidderBudget => whole,
            ShadowRule::LpShare => whole.min(bid * (share[k] / bid - 1e-9).ceil().max(0.0)),
        })
    };
    let shadow: Vec<Option<f64>> = (0..inst.pairs.len()).map(shadow_of).collect();
    let problems = build(&|k| shadow[k])?;
    let coupling = Coupling {
        problems: &problems,
        pair_bidder: &pair_bidder,
        tolerance: cfg.tolerance,
    };

    let mut mu = mu0;
    let mut searches = coupling.solve_all(&mu)?;
    let feasible = |r: f64, b: f64| r <= b + 1e-12 * b.max(1.0);
    let mut scaled = vec![false; inst.bidders.len()];
    let mut sweeps = 0;
    for _ in 0..cfg.max_sweeps {
        sweeps += 1;
        let mut changed = false;
        for i in 0..inst.bidders.len() {
            let b = budgets[i];
            if !b.is_finite() {
                continue;
            }
            let old = mu[i];
            scaled[i] = false;
            mu[i] = 0.0;
            coupling.resolve_bidder(&mut searches, &mu, i)?;
            if !feasible(coupling.bidder_reward(&searches, i), b) {
                let (mut lo, mut hi) = (0.0, 1.0);
                while hi - lo > cfg.tolerance.sqrt().max(1e-12) {
                    mu[i] = 0.5 * (lo + hi);
                    coupling.resolve_bidder(&mut searches, &mu, i)?;
                    if feasible(coupling.bidder_reward(&searches, i), b) {
                        hi = mu[i];
                    } else {
                        lo = mu[i];
                    }
                }
                // The reward can jump past the budget just below `hi`; the
                // infeasible side scaled down to the budget may then be worth
                // more than the feasible side.
                mu[i] = lo;
                coupling.resolve_bidder(&mut searches, &mu, i)?;
                let below = coupling.capped_value(&searches, &budgets);
                mu[i] = hi;
                coupling.resolve_bidder(&mut searches, &mu, i)?;
                if below > coupling.capped_value(&searches, &budgets) + cfg.tolerance {
                    mu[i] = lo;
                    coupling.resolve_bidder(&mut searches, &mu, i)?;
                    scaled[i] = true;
                }
            }
            changed |= (mu[i] - old).abs() > 1e-9;
        }
        let all_feasible =
            (0..inst.bidders.len()).all(|i| scaled[i] || feasible(coupling.bidder_reward(&searches, i), budgets[i]));
        if !changed && all_feasible {
            break;
        }
    }

    let mut solutions: Vec<LpSolution> = problems
        .iter()
        .zip(&searches)
        .map(|(p, s)| assemble_solution(&p.models, &p.cfg, s))
        .collect();
    let mut bidder_reward = vec![0.0; inst.bidders.len()];
    for (p, sol) in problems.iter().zip(&solutions) {
        for (a, &k) in sol.arms.iter().zip(&p.pairs) {
            bidder_reward[pair_bidder[k]] += a.reward;
        }
    }
    let mut repair = vec![1.0; inst.bidders.len()];
    for i in 0..inst.bidders.len() {
        if bidder_reward[i] > budgets[i] {
            repair[i] = budgets[i] / bidder_reward[i];
            for (p, sol) in problems.iter().zip(solutions.iter_mut()) {
                for (a, &k) in p.pairs.iter().enumerate() {
                    if pair_bidder[k] == i {
                        sol.scale_arm(a, repair[i])?;
                    }
                }
            }
            bidder_reward[i] = budgets[i];
        }
    }

    let mut pair_plans: Vec<PairPlan> = inst
        .pairs
        .iter()
        .enumerate()
        .map(|(k, p)| PairPlan {
            bidder: p.bidder.clone(),
            impression: p.impression.clone(),
            shadow_budget: shadow[k],
            relaxed_reward: 0.0,
            relaxed_plays: 0.0,
            reward: 0.0,
        })
        .collect();
    let mut type_plans: Vec<Option<TypePlan>> = vec![None; inst.types.len()];
    let mut summaries = Vec::new();
    for ((p, sol), search) in problems.into_iter().zip(solutions).zip(&searches) {
        for (a, &k) in sol.arms.iter().zip(&p.pairs) {
            pair_plans[k].relaxed_reward = a.reward;
            pair_plans[k].relaxed_plays = a.plays;
        }
        let ty = &inst.types[p.index];
        summaries.push(TypeSummary {
            impression: ty.id.clone(),
            arrivals: ty.arrivals,
            lambda: search.hi.lambda,
            relaxed_objective: sol.objective,
            relaxed_plays: sol.expected_plays,
        });
        let plan = delayed_from_relaxed(&p.models, sol, cfg.params.gamma)?;
        for (a, &k) in plan.scaled.arms.iter().zip(&p.pairs) {
            pair_plans[k].reward = a.reward;
        }
        let entries = p
            .models
            .iter()
            .zip(&plan.policies)
            .map(|(m, pol)| ArmPlanEntry::new(m, pol.clone()))
            .collect();
        let policy = combine(entries, ty.arrivals, cfg.participation)?;
        type_plans[p.index] = Some(TypePlan {
            impression: ty.id.clone(),
            arrivals: ty.arrivals,
            pairs: p.pairs,
            models: p.models,
            plan,
            policy,
        });
    }
    let objective: f64 = summaries.iter().map(|t| t.relaxed_objective).sum();
    let report = BudgetedReport {
        instance: inst.label(),
        objective,
        scaled_objective: objective / cfg.params.gamma,
        sweeps,
        bidders: inst
            .bidders
            .iter()
            .enumerate()
            .map(|(i, b)| BidderPlan {
                bidder: b.id.clone(),
                budget: b.budget,
                mu: mu[i],
                relaxed_reward: bidder_reward[i],
                repair: repair[i],
            })
            .collect(),
        shadow: inst
            .pairs
            .iter()
            .zip(&shadow)
            .map(|(p, &s)| ShadowBudget {
                bidder: p.bidder.clone(),
                impression: p.impression.clone(),
                bid: p.bid,
                budget: s,
            })
            .collect(),
        pairs: pair_plans,
        types: summaries,
        warnings,
    };
    Ok(BudgetedPlan {
        report,
        types: type_plans,
        schedule: inst.schedule(),
        budgets,
        pair_bidder,
    })
}

/// Seed of type `j`'s trajectories; type 0 keeps the master seed.
pub fn type_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_add((j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One realized run of every type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetedTrial {
    /// Payout per bidder after settlement.
    pub revenue: Vec<f64>,
    /// `Z_ij` per pair before settlement.
    pub accrued: Vec<f64>,
    /// Settled payout per pair.
    pub paid: Vec<f64>,
}

impl BudgetedTrial {
    pub fn total_revenue(&self) -> f64 {
        self.revenue.iter().sum()
    }

    pub fn total_accrued(&self) -> f64 {
        self.accrued.iter().sum()
    }
}

impl BudgetedPlan {
    /// Global arrival time of each type's local steps.
    fn arrival_times(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.types.len()];
        for (t, &j) in self.schedule.iter().enumerate() {
            out[j].push(t);
        }
        out
    }

    /// Draw the truth of every type for one trial.
    pub fn draw(&self, seed: u64, trial: u64) -> Vec<Option<(GroundTruth, ChaCha8Rng)>> {
        self.types
            .iter()
            .enumerate()
            .map(|(j, tp)| {
                tp.as_ref().map(|tp| {
                    let mut rng = trial_rng(type_seed(seed, j), trial);
                    let truth = GroundTruth::draw(&tp.models, tp.arrivals, &mut rng);
                    (truth, rng)
                })
            })
            .collect()
    }

    /// Run each type's Combine policy on the given truths and settle every
    /// bidder's successes in arrival order.
    pub fn execute_with(&self, draws: Vec<Option<(GroundTruth, ChaCha8Rng)>>) -> Result<BudgetedTrial> {
        let times = self.arrival_times();
        let n_pairs = self.pair_bidder.len();
        let mut accrued = vec![0.0; n_pairs];
        let mut bills: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); self.budgets.len()];
        let mut trace = Vec::new();
        for (j, (tp, draw)) in self.types.iter().zip(draws).enumerate() {
            let (Some(tp), Some((truth, mut rng))) = (tp, draw) else { continue };
            trace.clear();
            execute(&tp.policy, &truth, &mut rng, Some(&mut trace));
            for e in &trace {
                if let TraceEvent::Play { step, arm, reward, .. } = *e {
                    if reward > 0.0 {
                        let k = tp.pairs[arm];
                        accrued[k] += reward;
                        bills[self.pair_bidder[k]].push((times[j][step as usize], k, reward));
                    }
                }
            }
        }
        let mut paid = vec![0.0; n_pairs];
        let mut revenue = vec![0.0; self.budgets.len()];
        for (i, bill) in bills.iter_mut().enumerate() {
            bill.sort_by_key(|b| b.0);
            let amounts: Vec<f64> = bill.iter().map(|b| b.2).collect();
            let ledger = settle(self.budgets[i], &amounts)?;
            for (b, y) in bill.iter().zip(&ledger.payouts) {
                paid[b.1] += y;
            }
            revenue[i] = ledger.total();
        }
        Ok(BudgetedTrial { revenue, accrued, paid })
    }
}

/// One trial of the budgeted pipeline under master seed `seed`.
pub fn execute_budgeted(plan: &BudgetedPlan, seed: u64, trial: u64) -> Result<BudgetedTrial> {
    plan.execute_with(plan.draw(seed, trial))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidderEstimate {
    pub bidder: String,
    pub budget: Option<f64>,
    pub revenue: MeanSe,
    pub accrued: MeanSe,
    /// Largest `revenue − B_i` over all trials.
    pub max_overspend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub bidder: String,
    pub impression: String,
    pub accrued: MeanSe,
    pub paid: MeanSe,
    /// Trials where `Z_ij` exceeded the pair's shadow budget.
    pub shadow_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetedEstimate {
    pub instance: String,
    pub trials: u64,
    pub seed: u64,
    pub revenue: MeanSe,
    pub accrued: MeanSe,
    /// Per-trial `revenue − ½·Σ Z_ij`.
    pub settlement_margin: MeanSe,
    pub bidders: Vec<BidderEstimate>,
    pub pairs: Vec<PairEstimate>,
}

#[derive(Clone)]
struct BudgetAccum {
    revenue: Moments,
    accrued: Moments,
    margin: Moments,
    bidder_revenue: Vec<Moments>,
    bidder_accrued: Vec<Moments>,
    overspend: Vec<f64>,
    pair_accrued: Vec<Moments>,
    pair_paid: Vec<Moments>,
    shadow_violations: Vec<u64>,
}

impl BudgetAccum {
    fn new(bidders: usize, pairs: usize) -> Self {
        BudgetAccum {
            revenue: Moments::default(),
            accrued: Moments::default(),
            margin: Moments::default(),
            bidder_revenue: vec![Moments::default(); bidders],
            bidder_accrued: vec![Moments::default(); bidders],
            overspend: vec![f64::NEG_INFINITY; bidders],
            pair_accrued: vec![Moments::default(); pairs],
            pair_paid: vec![Moments::default(); pairs],
            shadow_violations: vec![0; pairs],
        }
    }

    fn merge(mut self, o: BudgetAccum) -> Self {
        self.revenue.merge(&o.revenue);
        self.accrued.merge(&o.accrued);
        self.margin.merge(&o.margin);
        for i in 0..self.bidder_revenue.len() {
            self.bidder_revenue[i].merge(&o.bidder_revenue[i]);
            self.bidder_accrued[i].merge(&o.bidder_accrued[i]);
            self.overspend[i] = self.overspend[i].max(o.overspend[i]);
        }
        for k in 0..self.pair_accrued.len() {
            self.pair_accrued[k].merge(&o.pair_accrued[k]);
            self.pair_paid[k].merge(&o.pair_paid[k]);
            self.shadow_violations[k] += o.shadow_violations[k];
        }
        self
    }
}

/// Monte-Carlo revenue of a budgeted plan; deterministic for a given seed.
pub fn run_budgeted_mc(plan: &BudgetedPlan, inst: &AllocationInstance, trials: u64, seed: u64) -> Result<BudgetedEstimate> {
    if trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    let nb = plan.budgets.len();
    let np = plan.pair_bidder.len();
    let shadow: Vec<f64> = plan
        .report
        .shadow
        .iter()
        .map(|s| s.budget.unwrap_or(f64::INFINITY))
        .collect();
    let chunk = crate::sim::CHUNK;
    let parts: Vec<BudgetAccum> = (0..trials.div_ceil(chunk))
        .into_par_iter()
        .map(|c| -> Result<BudgetAccum> {
            let mut acc = BudgetAccum::new(nb, np);
            for trial in c * chunk..((c + 1) * chunk).min(trials) {
                let out = execute_budgeted(plan, seed, trial)?;
                let (rev, z) = (out.total_revenue(), out.total_accrued());
                acc.revenue.push(rev);
                acc.accrued.push(z);
                acc.margin.push(rev - 0.5 * z);
                let mut bz = vec![0.0; nb];
                for k in 0..np {
                    bz[plan.pair_bidder[k]] += out.accrued[k];
                    acc.pair_accrued[k].push(out.accrued[k]);
                    acc.pair_paid[k].push(out.paid[k]);
                    if out.accrued[k] > shadow[k] + 1e-9 {
                        acc.shadow_violations[k] += 1;
                    }
                }
                for i in 0..nb {
                    acc.bidder_revenue[i].push(out.revenue[i]);
                    acc.bidder_accrued[i].push(bz[i]);
                    acc.overspend[i] = acc.overspend[i].max(out.revenue[i] - plan.budgets[i]);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let acc = parts.into_iter().fold(BudgetAccum::new(nb, np), BudgetAccum::merge);
    Ok(BudgetedEstimate {
        instance: inst.label(),
        trials,
        seed,
        revenue: acc.revenue.finish(),
        accrued: acc.accrued.finish(),
        settlement_margin: acc.margin.finish(),
        bidders: inst
            .bidders
            .iter()
            .enumerate()
            .map(|(i, b)| BidderEstimate {
                bidder: b.id.clone(),
                budget: b.budget,
                revenue: acc.bidder_revenue[i].finish(),
                accrued: acc.bidder_accrued[i].finish(),
                max_overspend: acc.overspend[i],
            })
            .collect(),
        pairs: inst
            .pairs
            .iter()
            .enumerate()
            .map(|(k, p)| PairEstimate {
                bidder: p.bidder.clone(),
                impression: p.impression.clone(),
                accrued: acc.pair_accrued[k].finish(),
                paid: acc.pair_paid[k].finish(),
                shadow_violations: acc.shadow_violations[k],
            })
            .collect(),
    })
}

/// Exact optimum of the joint allocation problem: at every arrival choose one
/// of the type's pairs or skip, with feedback after `δ_ij` further arrivals
/// of the same type and bidder revenue capped at `B_i`.
pub fn allocation_opt(inst: &AllocationInstance) -> Result<f64> {
    inst.validate()?;
    let pair_type: Vec<usize> = inst.pairs.iter().map(|p| inst.type_index(&p.impression)).collect::<Result<_>>()?;
    let pair_bidder: Vec<usize> = inst.pairs.iter().map(|p| inst.bidder_index(&p.bidder)).collect::<Result<_>>()?;
    let dags: Vec<OutcomeDag> = inst
        .pairs
        .iter()
        .enumerate()
        .map(|(k, p)| inst.pair_arm(p, None).build_dag(inst.types[pair_type[k]].arrivals))
        .collect::<Result<_>>()?;
    let type_pairs: Vec<Vec<usize>> = (0..inst.types.len())
        .map(|j| (0..inst.pairs.len()).filter(|&k| pair_type[k] == j).collect())
        .collect();
    let window: Vec<usize> = type_pairs
        .iter()
        .map(|ps| ps.iter().map(|&k| inst.pairs[k].delay as usize).max().unwrap_or(0) + 1)
        .collect();
    let horizon = inst.horizon();
    // Pairs of one type share its arrivals, so their depths sum to at most T_j.
    let mut size = horizon.max(1) as u128;
    for (j, (ps, &w)) in type_pairs.iter().zip(&window).enumerate() {
        let cap = inst.types[j].arrivals as usize;
        let mut by_total = vec![0u128; cap + 1];
        by_total[0] = 1;
        for &k in ps {
            let mut next = vec![0u128; cap + 1];
            for (a, &c) in by_total.iter().enumerate() {
                for d in 0..=cap - a {
                    let n = dags[k].states_at_depth(d as u32) as u128;
                    next[a + d] = next[a + d].saturating_add(c.saturating_mul(n));
                }
            }
            by_total = next;
        }
        let configs = by_total.iter().fold(0u128, |a, &c| a.saturating_add(c));
        size = size
            .saturating_mul(configs)
            .saturating_mul(((ps.len() + 1) as u128).saturating_pow(w as u32 - 1));
    }
    if size > ORACLE_STATE_LIMIT {
        return Err(Error::StateBudget {
            size,
            limit: ORACLE_STATE_LIMIT,
        });
    }
    let mut oracle = AllocOracle {
        inst,
        dags,
        pair_bidder,
        type_pairs,
        budgets: inst.bidders.iter().map(|b| b.budget.unwrap_or(f64::INFINITY)).collect(),
        schedule: inst.schedule(),
        memo: HashMap::new(),
    };
    let posts: Vec<StateId> = oracle.dags.iter().map(|d| d.root()).collect();
    let hists: Vec<Vec<u8>> = window.iter().map(|&w| vec![0; w]).collect();
    oracle.value(0, posts, hists)
}

struct AllocOracle<'a> {
    inst: &'a AllocationInstance,
    dags: Vec<OutcomeDag>,
    pair_bidder: Vec<usize>,
    type_pairs: Vec<Vec<usize>>,
    budgets: Vec<f64>,
    schedule: Vec<usize>,
    /// Keyed after the disclosures of the arrival.
    memo: HashMap<(u32, Vec<StateId>, Vec<Vec<u8>>), f64>,
}

impl AllocOracle<'_> {
    fn spend(&self, posts: &[StateId], bidder: usize) -> f64 {
        (0..posts.len())
            .filter(|&k| self.pair_bidder[k] == bidder)
            .map(|k| self.dags[k].state(posts[k]).successes as f64 * self.inst.pairs[k].bid)
            .sum()
    }

    /// Expected revenue of disclosing `due` in order, then continuing with
    /// `then`.
    fn disclose(
        &mut self,
        posts: &mut Vec<StateId>,
        due: &[usize],
        then: &mut dyn FnMut(&mut Self, &mut Vec<StateId>) -> Result<f64>,
    ) -> Result<f64> {
        let Some((&k, rest)) = due.split_first() else {
            return then(self, posts);
        };
        let u = posts[k];
        let before = self.spend(posts, self.pair_bidder[k]);
        let cap = self.budgets[self.pair_bidder[k]];
        let mut total = 0.0;
        for o in [Outcome::Success, Outcome::Failure] {
            let Some((v, p)) = self.dags[k].child(u, o) else { continue };
            if p <= 0.0 {
                continue;
            }
            posts[k] = v;
            let gain = if o == Outcome::Success {
                (before + self.inst.pairs[k].bid).min(cap) - before.min(cap)
            } else {
                0.0
            };
            total += p * (gain + self.disclose(posts, rest, then)?);
        }
        posts[k] = u;
        Ok(total)
    }

    fn value(&mut self, t: u32, mut posts: Vec<StateId>, mut hists: Vec<Vec<u8>>) -> Result<f64> {
        if t as usize == self.schedule.len() {
            let mut pending = Vec::new();
            for (j, h) in hists.iter().enumerate() {
                for &e in h {
                    if e > 0 {
                        pending.push(self.type_pairs[j][e as usize - 1]);
                    }
                }
            }
            return self.disclose(&mut posts, &pending, &mut |_, _| Ok(0.0));
        }
        let j = self.schedule[t as usize];
        let mut due = Vec::new();
        for d in 0..hists[j].len() {
            let e = hists[j][d];
            if e > 0 {
                let k = self.type_pairs[j][e as usize - 1];
                if self.inst.pairs[k].delay as usize == d {
                    due.push(k);
                    hists[j][d] = 0;
                }
            }
        }
        self.disclose(&mut posts, &due, &mut |me: &mut Self, posts: &mut Vec<StateId>| me.decide(t, posts, &hists))
    }

    fn decide(&mut self, t: u32, posts: &[StateId], hists: &[Vec<u8>]) -> Result<f64> {
        let key = (t, posts.to_vec(), hists.to_vec());
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        let j = self.schedule[t as usize];
        let mut best = f64::NEG_INFINITY;
        for choice in 0..=self.type_pairs[j].len() {
            if choice > 0 && self.dags[self.type_pairs[j][choice - 1]].state(posts[self.type_pairs[j][choice - 1]]).is_leaf() {
                continue;
            }
            let mut next = hists.to_vec();
            next[j].pop();
            next[j].insert(0, choice as u8);
            best = best.max(self.value(t + 1, posts.to_vec(), next)?);
        }
        self.memo.insert(key, best);
        Ok(best)
    }
}

/// Two bidders and two impression types, small enough for [`allocation_opt`].
pub fn toy_instance() -> AllocationInstance {
    let pair = |bidder: &str, ty: &str, bid: f64, a1: u32, a0: u32| PairSpec {
        bidder: bidder.into(),
        impression: ty.into(),
        bid,
        delay: 1,
        prior: PriorSpec::Beta {
            alpha1: a1,
            alpha0: a0,
        },
    };
    AllocationInstance {
        name: Some("toy".into()),
        bidders: vec![
            Bidder {
                id: "b0".into(),
                budget: Some(1.0),
            },
            Bidder {
                id: "b1".into(),
                budget: Some(2.0),
            },
        ],
        types: vec![
            ImpressionType {
                id: "x".into(),
                arrivals: 6,
            },
            ImpressionType {
                id: "y".into(),
                arrivals: 6,
            },
        ],
        pairs: vec![
            pair("b0", "x", 1.0, 1, 1),
            pair("b0", "y", 1.0, 2, 1),
            pair("b1", "x", 1.0, 1, 2),
            pair("b1", "y", 1.0, 1, 1),
        ],
        arrival: ArrivalOrder::RoundRobin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_schedule_is_proportional() {
        let mut inst = toy_instance();
        inst.types[0].arrivals = 4;
        inst.types[1].arrivals = 2;
        let s = inst.schedule();
        assert_eq!(s.len(), 6);
        assert_eq!(s.iter().filter(|&&j| j == 0).count(), 4);
        assert_eq!(s, vec![0, 1, 0, 0, 1, 0]);
    }

    #[test]
    fn shadow_budgets_are_whole_bids() {
        let plan = plan_budgeted(&toy_instance(), &BudgetedConfig::default()).unwrap();
        for s in &plan.report.shadow {
            assert!(s.is_integral(), "{s:?}");
            assert!(s.budget.unwrap() <= 2.0);
        }
        for (b, inst) in plan.report.bidders.iter().zip(&toy_instance().bidders) {
            assert!(b.relaxed_reward <= inst.budget.unwrap() + 1e-12);
        }
    }

    #[test]
    fn zero_budget_quits_everywhere() {
        let mut inst = toy_instance();
        for b in &mut inst.bidders {
            b.budget = Some(0.0);
        }
        let plan = plan_budgeted(&inst, &BudgetedConfig::default()).unwrap();
        assert_eq!(plan.report.objective, 0.0);
        for t in plan.types.iter().flatten() {
            for p in &t.plan.policies {
                assert!(p.evaluate(&t.models[0].dag).unwrap().plays == 0.0);
            }
        }
    }

    #[test]
    fn short_type_is_a_config_error_naming_the_pair() {
        let mut inst = toy_instance();
        inst.types[1].arrivals = 4;
        let err = plan_budgeted(&inst, &BudgetedConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("(b0, y)"), "{err}");
    }

    #[test]
    fn revenue_never_exceeds_budgets() {
        let inst = toy_instance();
        let cfg = BudgetedConfig {
            participation: 1.0,
            ..BudgetedConfig::default()
        };
        let plan = plan_budgeted(&inst, &cfg).unwrap();
        let est = run_budgeted_mc(&plan, &inst, 3000, 1).unwrap();
        for b in &est.bidders {
            assert!(b.max_overspend <= 1e-12);
        }
        assert!(est.pairs.iter().all(|p| p.shadow_violations == 0));
    }
}
