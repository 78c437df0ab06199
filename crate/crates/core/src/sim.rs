//! Ground truth, Monte-Carlo evaluation, baselines and exact oracles.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::instance::{ArmModel, Instance};
use crate::prior_dag::{ArmSpec, Hypothesis, Outcome, OutcomeDag, PriorSpec, StateId};
use crate::scheduler::{audit_trace, execute, AuditCounts, GlobalPolicy, Ledger, PlayKind, TraceEvent, TrialOutcome};

/// Joint state limit for [`brute_force_opt`].
pub const ORACLE_STATE_LIMIT: u128 = 10_000_000;

/// Hidden truth of one trajectory: a success tape per arm.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Drawn mean per arm; `None` for explicit DAG priors, which are
    /// sampled through their predictive walk.
    pub theta: Vec<Option<f64>>,
    pub tapes: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn draw<R: Rng>(models: &[ArmModel], horizon: u32, rng: &mut R) -> Self {
        let mut theta = Vec::with_capacity(models.len());
        let mut tapes = Vec::with_capacity(models.len());
        for m in models {
            let (t, tape) = draw_arm(m, horizon as usize, rng);
            theta.push(t);
            tapes.push(tape);
        }
        GroundTruth { theta, tapes }
    }

    /// Truth with fixed means, for deterministic checks.
    pub fn with_means<R: Rng>(means: &[f64], horizon: u32, rng: &mut R) -> Self {
        let tapes = means
            .iter()
            .map(|&p| (0..horizon).map(|_| rng.random::<f64>() < p).collect())
            .collect();
        GroundTruth {
            theta: means.iter().map(|&p| Some(p)).collect(),
            tapes,
        }
    }

    /// Outcome of the `k`-th play of `arm`.
    pub fn outcome(&self, arm: usize, k: usize) -> bool {
        self.tapes[arm][k]
    }
}

fn draw_arm<R: Rng>(model: &ArmModel, len: usize, rng: &mut R) -> (Option<f64>, Vec<bool>) {
    let bernoulli = |p: f64, rng: &mut R| -> Vec<bool> { (0..len).map(|_| rng.random::<f64>() < p).collect() };
    match &model.spec.prior {
        PriorSpec::Beta { alpha1, alpha0 } => {
            let p = Beta::new(*alpha1 as f64, *alpha0 as f64)
                .map(|d| d.sample(rng))
                .unwrap_or(0.0);
            (Some(p), bernoulli(p, rng))
        }
        PriorSpec::Mixture { hypotheses } => {
            let p = pick_hypothesis(hypotheses, rng);
            (Some(p), bernoulli(p, rng))
        }
        PriorSpec::Dag { .. } => {
            let dag = &model.dag;
            let mut u = dag.root();
            let mut tape = Vec::with_capacity(len);
            for _ in 0..len {
                let p = dag.state(u).mean;
                let success = rng.random::<f64>() < p;
                tape.push(success);
                let o = if success { Outcome::Success } else { Outcome::Failure };
                if let Some((v, _)) = dag.child(u, o) {
                    u = v;
                }
            }
            (None, tape)
        }
    }
}

fn pick_hypothesis<R: Rng>(hypotheses: &[Hypothesis], rng: &mut R) -> f64 {
    let total: f64 = hypotheses.iter().map(|h| h.weight).sum();
    let mut x = rng.random::<f64>() * total;
    for h in hypotheses {
        if x < h.weight {
            return h.theta;
        }
        x -= h.weight;
    }
    hypotheses.last().map_or(0.0, |h| h.theta)
}

/// Anything that can be run for one trajectory.
pub trait Strategy: Sync {
    fn label(&self) -> String;
    fn run(&self, truth: &GroundTruth, rng: &mut ChaCha8Rng, trace: Option<&mut Vec<TraceEvent>>) -> TrialOutcome;
}

impl Strategy for GlobalPolicy {
    fn label(&self) -> String {
        match self.schedule {
            crate::scheduler::Schedule::Sequential => "sequential".into(),
            crate::scheduler::Schedule::Combine { .. } => "combine".into(),
        }
    }

    fn run(&self, truth: &GroundTruth, rng: &mut ChaCha8Rng, trace: Option<&mut Vec<TraceEvent>>) -> TrialOutcome {
        execute(self, truth, rng, trace)
    }
}

/// Plays the arm with the largest disclosed posterior mean times bid.
#[derive(Debug, Clone)]
pub struct Greedy {
    pub dags: Vec<std::sync::Arc<OutcomeDag>>,
    pub delays: Vec<u32>,
    pub horizon: u32,
}

impl Greedy {
    pub fn new(models: &[ArmModel], horizon: u32) -> Self {
        Greedy {
            dags: models.iter().map(|m| m.dag.clone()).collect(),
            delays: models.iter().map(|m| m.delay()).collect(),
            horizon,
        }
    }
}

/// Round-robin for a fraction of the horizon, then the empirically best arm.
#[derive(Debug, Clone)]
pub struct ExploreThenExploit {
    pub inner: Greedy,
    pub explore_fraction: f64,
}

impl ExploreThenExploit {
    pub fn new(models: &[ArmModel], horizon: u32, explore_fraction: f64) -> Self {
        ExploreThenExploit {
            inner: Greedy::new(models, horizon),
            explore_fraction: explore_fraction.clamp(0.0, 1.0),
        }
    }
}

/// Shared step loop of the baselines; `choose` picks an arm from the
/// disclosed posteriors and per-arm disclosed counts.
fn run_baseline(
    g: &Greedy,
    truth: &GroundTruth,
    mut trace: Option<&mut Vec<TraceEvent>>,
    mut choose: impl FnMut(u32, &[StateId], &[(u32, u32)]) -> usize,
) -> TrialOutcome {
    let n = g.dags.len();
    let mut out = TrialOutcome::new(n);
    let mut plays: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut disclosed = vec![0usize; n];
    let mut posterior: Vec<StateId> = g.dags.iter().map(|d| d.root()).collect();
    let mut counts = vec![(0u32, 0u32); n];
    let mut ledgers = vec![Ledger::default(); n];
    for step in 0..g.horizon {
        for i in 0..n {
            while disclosed[i] < plays[i].len() && plays[i][disclosed[i]] + g.delays[i] < step {
                let k = disclosed[i];
                let success = truth.outcome(i, k);
                if let Some(t) = trace.as_deref_mut() {
                    t.push(TraceEvent::Consume { step, arm: i, play_step: plays[i][k] });
                }
                let o = if success { Outcome::Success } else { Outcome::Failure };
                if let Some((v, _)) = g.dags[i].child(posterior[i], o) {
                    posterior[i] = v;
                }
                if success {
                    counts[i].0 += 1;
                } else {
                    counts[i].1 += 1;
                }
                disclosed[i] += 1;
            }
        }
        let arm = choose(step, &posterior, &counts);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceEvent::Slot { step, eligible: vec![arm] });
        }
        let success = truth.outcome(arm, plays[arm].len());
        let reward = ledgers[arm].credit(success, &g.dags[arm]);
        plays[arm].push(step);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceEvent::Play { step, arm, kind: PlayKind::Baseline, success, reward });
        }
        out.reward += reward;
        out.plays += 1;
        out.arm_reward[arm] += reward;
        out.arm_plays[arm] += 1;
        out.arm_surrogate_reward[arm] += reward;
    }
    out
}

fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

impl Strategy for Greedy {
    fn label(&self) -> String {
        "greedy".into()
    }

    fn run(&self, truth: &GroundTruth, _rng: &mut ChaCha8Rng, trace: Option<&mut Vec<TraceEvent>>) -> TrialOutcome {
        run_baseline(self, truth, trace, |_, post, _| {
            argmax_lowest(post.iter().zip(&self.dags).map(|(&u, d)| d.state(u).play_reward()))
        })
    }
}

impl Strategy for ExploreThenExploit {
    fn label(&self) -> String {
        "explore_then_exploit".into()
    }

    fn run(&self, truth: &GroundTruth, _rng: &mut ChaCha8Rng, trace: Option<&mut Vec<TraceEvent>>) -> TrialOutcome {
        let g = &self.inner;
        let n = g.dags.len();
        let explore = (self.explore_fraction * g.horizon as f64).ceil() as u32;
        let mut committed: Option<usize> = None;
        run_baseline(g, truth, trace, |step, post, counts| {
            if step < explore {
                return step as usize % n;
            }
            *committed.get_or_insert_with(|| {
                argmax_lowest((0..n).map(|i| {
                    let (s, f) = counts[i];
                    if s + f == 0 {
                        g.dags[i].state(post[i]).play_reward()
                    } else {
                        s as f64 / (s + f) as f64 * g.dags[i].bid()
                    }
                }))
            })
        })
    }
}

/// Monte-Carlo run settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub trials: u64,
    pub seed: u64,
    /// Record and audit every trajectory's event log.
    pub audit: bool,
}

impl McConfig {
    pub fn new(trials: u64, seed: u64) -> Self {
        McConfig {
            trials,
            seed,
            audit: false,
        }
    }

    pub fn audited(mut self) -> Self {
        self.audit = true;
        self
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmEstimate {
    pub arm: String,
    pub reward: MeanSe,
    /// Reward of the plays the instantaneous surrogate would also make.
    pub surrogate_reward: MeanSe,
    pub plays: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub policy: String,
    pub mean: f64,
    pub stderr: f64,
    pub trials: u64,
    pub seed: u64,
    pub plays: MeanSe,
    pub arms: Vec<ArmEstimate>,
    pub audit: Option<AuditCounts>,
    /// Trajectories that used more than the horizon.
    pub overruns: u64,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Moments {
    n: u64,
    sum: f64,
    sumsq: f64,
}

impl Moments {
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sumsq += x * x;
    }

    pub(crate) fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sumsq += o.sumsq;
    }

    pub(crate) fn finish(&self) -> MeanSe {
        if self.n == 0 {
            return MeanSe::default();
        }
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 {
            ((self.sumsq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        MeanSe {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Accum {
    total: Moments,
    plays: Moments,
    arm_reward: Vec<Moments>,
    arm_surrogate: Vec<Moments>,
    arm_plays: Vec<Moments>,
    audit: AuditCounts,
    overruns: u64,
}

impl Accum {
    fn new(n: usize) -> Self {
        Accum {
            arm_reward: vec![Moments::default(); n],
            arm_surrogate: vec![Moments::default(); n],
            arm_plays: vec![Moments::default(); n],
            ..Default::default()
        }
    }

    fn merge(mut self, o: Accum) -> Accum {
        self.total.merge(&o.total);
        self.plays.merge(&o.plays);
        for i in 0..self.arm_reward.len() {
            self.arm_reward[i].merge(&o.arm_reward[i]);
            self.arm_surrogate[i].merge(&o.arm_surrogate[i]);
            self.arm_plays[i].merge(&o.arm_plays[i]);
        }
        self.audit.add(&o.audit);
        self.overruns += o.overruns;
        self
    }
}

/// RNG of trial `trial` under master seed `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Run one trajectory and return it with its event log.
pub fn trace_trial<S: Strategy + ?Sized>(
    strategy: &S,
    models: &[ArmModel],
    horizon: u32,
    seed: u64,
    trial: u64,
) -> (TrialOutcome, Vec<TraceEvent>) {
    let mut rng = trial_rng(seed, trial);
    let truth = GroundTruth::draw(models, horizon, &mut rng);
    let mut trace = Vec::new();
    let out = strategy.run(&truth, &mut rng, Some(&mut trace));
    (out, trace)
}

pub(crate) const CHUNK: u64 = 2048;

/// Monte-Carlo estimate over independent trials. Results are identical for
/// a given seed regardless of the thread count.
pub fn run_mc<S: Strategy + ?Sized>(strategy: &S, models: &[ArmModel], horizon: u32, cfg: McConfig) -> Result<Estimate> {
    if cfg.trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    let n = models.len();
    let delays: Vec<u32> = models.iter().map(|m| m.delay()).collect();
    let chunks = cfg.trials.div_ceil(CHUNK);
    let parts: Vec<Accum> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Accum::new(n);
            let mut trace = Vec::new();
            for trial in c * CHUNK..((c + 1) * CHUNK).min(cfg.trials) {
                let mut rng = trial_rng(cfg.seed, trial);
                let truth = GroundTruth::draw(models, horizon, &mut rng);
                trace.clear();
                let out = strategy.run(&truth, &mut rng, cfg.audit.then_some(&mut trace));
                if cfg.audit {
                    acc.audit.add(&audit_trace(&trace, &delays, horizon));
                }
                if out.plays > horizon {
                    acc.overruns += 1;
                }
                acc.total.push(out.reward);
                acc.plays.push(out.plays as f64);
                for i in 0..n {
                    acc.arm_reward[i].push(out.arm_reward[i]);
                    acc.arm_surrogate[i].push(out.arm_surrogate_reward[i]);
                    acc.arm_plays[i].push(out.arm_plays[i] as f64);
                }
            }
            acc
        })
        .collect();
    let acc = parts.into_iter().fold(Accum::new(n), Accum::merge);
    let total = acc.total.finish();
    Ok(Estimate {
        policy: strategy.label(),
        mean: total.mean,
        stderr: total.stderr,
        trials: cfg.trials,
        seed: cfg.seed,
        plays: acc.plays.finish(),
        arms: (0..n)
            .map(|i| ArmEstimate {
                arm: models[i].spec.id.clone(),
                reward: acc.arm_reward[i].finish(),
                surrogate_reward: acc.arm_surrogate[i].finish(),
                plays: acc.arm_plays[i].finish(),
            })
            .collect(),
        audit: cfg.audit.then_some(acc.audit),
        overruns: acc.overruns,
    })
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    instance: &'a str,
    policy: &'a str,
    trials: u64,
    mean: f64,
    stderr: f64,
    seed: u64,
}

/// Write estimates as CSV with columns instance, policy, trials, mean,
/// stderr, seed.
pub fn write_estimates_csv<W: Write>(out: W, instance: &str, estimates: &[Estimate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in estimates {
        w.serialize(CsvRow {
            instance,
            policy: &e.policy,
            trials: e.trials,
            mean: e.mean,
            stderr: e.stderr,
            seed: e.seed,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Expected reward of the next play of an arm at posterior `u` with `pending`
/// undisclosed plays.
fn incremental_reward(dag: &OutcomeDag, cache: &mut HashMap<(StateId, u32), f64>, u: StateId, pending: u32) -> Result<f64> {
    let mut value = |q: u32| -> Result<f64> {
        if q == 0 {
            return Ok(0.0);
        }
        if let Some(&v) = cache.get(&(u, q)) {
            return Ok(v);
        }
        let v = dag.advance(u, q)?.reward;
        cache.insert((u, q), v);
        Ok(v)
    };
    Ok(value(pending + 1)? - value(pending)?)
}

/// Size of the joint state space [`brute_force_opt`] would explore.
pub fn oracle_state_count(models: &[ArmModel], horizon: u32) -> u128 {
    let window = models.iter().map(|m| m.delay()).max().unwrap_or(0);
    let mut size = horizon.max(1) as u128;
    for m in models {
        size = size.saturating_mul(m.dag.len() as u128);
    }
    for _ in 0..window {
        size = size.saturating_mul(models.len() as u128 + 1);
    }
    size
}

struct Oracle<'a> {
    models: &'a [ArmModel],
    horizon: u32,
    window: usize,
    memo: HashMap<(u32, Vec<StateId>, Vec<u8>), f64>,
    reward_cache: Vec<HashMap<(StateId, u32), f64>>,
}

const IDLE: u8 = u8::MAX;

impl Oracle<'_> {
    /// `hist[k]` is the arm played at step `t − window + k`, or [`IDLE`].
    fn value(&mut self, t: u32, post: &mut Vec<StateId>, hist: &[u8]) -> Result<f64> {
        if t >= self.horizon {
            return Ok(0.0);
        }
        let key = (t, post.clone(), hist.to_vec());
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        let n = self.models.len();
        let mut best = 0.0f64;
        for a in (0..n).map(|i| i as u8).chain(std::iter::once(IDLE)) {
            let mut immediate = 0.0;
            if a != IDLE {
                let i = a as usize;
                let delay = self.models[i].delay() as usize;
                let pending = hist
                    .iter()
                    .enumerate()
                    .filter(|&(k, &h)| h == a && self.window - k <= delay)
                    .count() as u32;
                immediate = incremental_reward(&self.models[i].dag, &mut self.reward_cache[i], post[i], pending)?;
            }
            let mut next_hist = hist.to_vec();
            next_hist.push(a);
            // Plays disclosed at the end of step t: an arm-i play at step
            // t − δ_i, which sits at offset window − δ_i of `next_hist`.
            let disclosures: Vec<usize> = (0..n)
                .filter(|&i| next_hist[self.window - self.models[i].delay() as usize] == i as u8)
                .collect();
            next_hist.remove(0);
            let future = if t + 1 < self.horizon {
                self.expand(t, post, &next_hist, &disclosures, 0)?
            } else {
                0.0
            };
            best = best.max(immediate + future);
        }
        self.memo.insert(key, best);
        Ok(best)
    }

    fn expand(&mut self, t: u32, post: &mut Vec<StateId>, hist: &[u8], disclosures: &[usize], k: usize) -> Result<f64> {
        if k == disclosures.len() {
            return self.value(t + 1, post, hist);
        }
        let i = disclosures[k];
        let u = post[i];
        let dag = self.models[i].dag.clone();
        let mut total = 0.0;
        let mut any = false;
        for o in [Outcome::Success, Outcome::Failure] {
            if let Some((v, p)) = dag.child(u, o) {
                any = true;
                if p <= 0.0 {
                    continue;
                }
                post[i] = v;
                total += p * self.expand(t, post, hist, disclosures, k + 1)?;
                post[i] = u;
            }
        }
        if !any {
            return Err(Error::Structural(format!(
                "arm {}: posterior DAG too shallow for the oracle horizon",
                self.models[i].spec.id
            )));
        }
        Ok(total)
    }
}

/// Exact optimal expected reward by backward induction over posteriors and
/// undisclosed plays.
pub fn brute_force_opt(models: &[ArmModel], horizon: u32) -> Result<f64> {
    if models.len() >= IDLE as usize {
        return Err(invalid("too many arms for the oracle"));
    }
    let size = oracle_state_count(models, horizon);
    if size > ORACLE_STATE_LIMIT {
        return Err(Error::StateBudget {
            size,
            limit: ORACLE_STATE_LIMIT,
        });
    }
    let window = models.iter().map(|m| m.delay()).max().unwrap_or(0) as usize;
    let mut oracle = Oracle {
        models,
        horizon,
        window,
        memo: HashMap::new(),
        reward_cache: vec![HashMap::new(); models.len()],
    };
    let mut post: Vec<StateId> = models.iter().map(|m| m.dag.root()).collect();
    oracle.value(0, &mut post, &vec![IDLE; window])
}

/// The instance on which the instantaneous relaxation is loose by a factor
/// close to 2: `n` arms, horizon `n`, each arm good (success probability
/// `1 − 1/n`) with probability `1/n²` and otherwise always failing.
pub fn make_tight_example(n: u32) -> Result<Instance> {
    if n < 2 {
        return Err(invalid("the tight example needs n ≥ 2"));
    }
    let nf = n as f64;
    let hypotheses = vec![
        Hypothesis {
            weight: 1.0 / (nf * nf),
            theta: 1.0 - 1.0 / nf,
        },
        Hypothesis {
            weight: 1.0 - 1.0 / (nf * nf),
            theta: 0.0,
        },
    ];
    let arms = (0..n)
        .map(|i| ArmSpec {
            id: format!("arm{i:03}"),
            prior: PriorSpec::Mixture {
                hypotheses: hypotheses.clone(),
            },
            delay: 0,
            budget: None,
            bid: 1.0,
        })
        .collect();
    Ok(Instance::new(format!("tight-{n}"), n, arms))
}

/// Exact value of "try fresh identical arms one play each until a success,
/// then keep playing that arm", for `arms` arms with posterior DAG `dag`.
pub fn play_once_then_exploit_value(dag: &OutcomeDag, arms: u32, horizon: u32) -> Result<f64> {
    let root = dag.root();
    let first = dag.state(root).play_reward();
    let (fail_p, success) = match (dag.child(root, Outcome::Failure), dag.child(root, Outcome::Success)) {
        (Some((_, pf)), Some((s, ps))) => (pf, Some((s, ps))),
        (Some((_, pf)), None) => (pf, None),
        (None, Some((s, ps))) => (0.0, Some((s, ps))),
        (None, None) => return Err(invalid("posterior DAG has no outcomes at the root")),
    };
    let mut total = 0.0;
    let mut survive = 1.0;
    for x in 0..horizon.min(arms) {
        let rest = horizon - x - 1;
        let exploit = match success {
            Some((s, ps)) if rest > 0 => ps * dag.advance(s, rest)?.reward,
            _ => 0.0,
        };
        total += survive * (first + exploit);
        survive *= fail_p;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior_dag::ArmSpec;

    fn beta_models(n: usize, horizon: u32, delay: u32) -> Vec<ArmModel> {
        (0..n)
            .map(|i| ArmModel::new(ArmSpec::beta(format!("a{i}"), 1, 1).with_delay(delay), horizon).unwrap())
            .collect()
    }

    #[test]
    fn oracle_two_beta_arms_two_steps() {
        let v = brute_force_opt(&beta_models(2, 2, 0), 2).unwrap();
        assert!((v - (0.5 + 0.5 * 2.0 / 3.0 + 0.5 * 0.5)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn oracle_with_delay_cannot_adapt() {
        // With δ = 1 and T = 2 the second play never sees the first outcome.
        let v = brute_force_opt(&beta_models(1, 2, 1), 2).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let models = beta_models(3, 40, 2);
        assert!(matches!(brute_force_opt(&models, 40), Err(Error::StateBudget { .. })));
    }

    #[test]
    fn tape_is_seed_determined() {
        let models = beta_models(2, 5, 0);
        let a = GroundTruth::draw(&models, 5, &mut trial_rng(7, 3));
        let b = GroundTruth::draw(&models, 5, &mut trial_rng(7, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_plays_the_only_arm() {
        let models = beta_models(1, 4, 1);
        let g = Greedy::new(&models, 4);
        let e = run_mc(&g, &models, 4, McConfig::new(200, 1)).unwrap();
        assert_eq!(e.plays.mean, 4.0);
    }

    #[test]
    fn zero_trials_rejected() {
        let models = beta_models(1, 2, 0);
        assert!(run_mc(&Greedy::new(&models, 2), &models, 2, McConfig::new(0, 1)).is_err());
    }

    #[test]
    fn tight_example_structure() {
        let inst = make_tight_example(20).unwrap();
        assert_eq!(inst.arms.len(), 20);
        assert_eq!(inst.horizon, 20);
        match &inst.arms[0].prior {
            PriorSpec::Mixture { hypotheses } => {
                assert_eq!(hypotheses.len(), 2);
                assert_eq!(hypotheses[1].theta, 0.0);
            }
            _ => panic!("mixture prior expected"),
        }
    }
}
