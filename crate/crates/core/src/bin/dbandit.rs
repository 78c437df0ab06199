use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use delayed_bandits::budgeted::{allocation_opt, plan_budgeted, run_budgeted_mc, AllocationInstance, BudgetedConfig, ShadowRule};
use delayed_bandits::gen::{random_step_policy, StepMix};
use delayed_bandits::instance::{ArmModel, Instance};
use delayed_bandits::planner::{gamma_for, solve_coupled, solve_delayed, CoupledConfig, Relaxation, StructureParams};
use delayed_bandits::policy::SingleArmPolicy;
use delayed_bandits::scheduler::{combine, round_sequential, ArmPlanEntry, GlobalPolicy};
use delayed_bandits::sim::{make_tight_example, run_mc, trace_trial, Estimate, ExploreThenExploit, Greedy, McConfig, Strategy};
use delayed_bandits::transforms::{
    block_structuring_report, run_pipeline, well_structured_report, Compaction, TransformReport,
};
use delayed_bandits::verify::{run_suite, tight_gap_values, Scale, VerifyConfig};
use delayed_bandits::{Error, Result};

#[derive(Parser)]
#[command(name = "dbandit", version, about = "Plan, transform, simulate and verify delayed-feedback bandit policies")]
struct Cli {
    #[command(flatten)]
    run: RunConfig,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct RunConfig {
    /// Block-count fraction of well-structured policies.
    #[arg(long, global = true, default_value_t = 0.125)]
    alpha: f64,
    /// Delay-free threshold fraction.
    #[arg(long, global = true, default_value_t = 1.0 / 17.0)]
    c: f64,
    /// Play-budget relaxation factor; defaults to 2(1+1/α)(1+2/α).
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Participation probability of each arm under Combine.
    #[arg(long, global = true, default_value_t = 0.25)]
    participation: f64,
    #[arg(long, global = true, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, global = true, env = "BANDIT_SEED", default_value_t = 0)]
    seed: u64,
    /// Bisection width and check tolerance.
    #[arg(long, global = true, default_value_t = 1e-9)]
    tolerance: f64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

impl RunConfig {
    fn params(&self) -> StructureParams {
        StructureParams {
            alpha: self.alpha,
            c: self.c,
            gamma: self.gamma.unwrap_or_else(|| gamma_for(self.alpha)),
        }
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RelaxationArg {
    /// Instantaneous when every delay is zero, block otherwise.
    Auto,
    Instant,
    Block,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    /// The solved plan: ratio-ordered sequential or Combine.
    Planned,
    Greedy,
    ExploreExploit,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the relaxation and report objective, price and per-arm values.
    Solve {
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = RelaxationArg::Auto)]
        relaxation: RelaxationArg,
        /// Expected-play budget of the instantaneous relaxation; defaults to T.
        #[arg(long)]
        play_budget: Option<f64>,
        /// Write the extracted policies here for `simulate --plan`.
        #[arg(long)]
        policies: Option<PathBuf>,
    },
    /// Monte-Carlo estimates of the plan and the baselines.
    Simulate {
        instance: PathBuf,
        /// Policies written by `solve --policies`; solved afresh when absent.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long = "policy", value_enum)]
        policy: Vec<PolicyArg>,
        /// Exploration share of the explore-then-exploit baseline.
        #[arg(long, default_value_t = 0.2)]
        explore: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the event log of one planned trajectory as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        trace_trial: u64,
    },
    /// Run the policy rewrites on random step policies of one arm.
    Transform {
        instance: PathBuf,
        /// Arm id; the first arm by default.
        #[arg(long)]
        arm: Option<String>,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Strict)]
        mode: ModeArg,
    },
    /// Run the invariant suite; exits nonzero when any check fails.
    Verify {
        #[arg(long, value_enum, default_value_t = ScaleArg::Full)]
        scale: ScaleArg,
        /// Add the corrupted DAG fixture to the martingale check.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Build the instance on which the instantaneous relaxation is loose.
    TightExample {
        #[arg(long, default_value_t = 50)]
        n: u32,
        /// Write the instance file here.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Plan and simulate a budgeted allocation instance.
    Budgeted {
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = ShadowArg::LpShare)]
        shadow: ShadowArg,
        /// Also compute the exact optimum (tiny instances only).
        #[arg(long)]
        oracle: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Strict,
    Relaxed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Quick,
    Full,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ShadowArg {
    LpShare,
    BidderBudget,
}

#[derive(Serialize)]
struct ArmRow {
    arm: String,
    reward: f64,
    plays: f64,
}

#[derive(Serialize)]
struct SolveReport {
    instance: String,
    relaxation: Relaxation,
    horizon: u32,
    play_budget: f64,
    objective: f64,
    /// Objective after the `1/γ` scale-down; block relaxation only.
    scaled_objective: Option<f64>,
    lambda: f64,
    duality_gap: f64,
    iterations: usize,
    arms: Vec<ArmRow>,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    instance: String,
    relaxation: Relaxation,
    /// Objective the planned policy is compared against.
    reference: f64,
    policies: Vec<SingleArmPolicy>,
}

struct Solved {
    report: SolveReport,
    plan: PlanFile,
}

fn solve(inst: &Instance, models: &[ArmModel], run: &RunConfig, relaxation: RelaxationArg, budget: Option<f64>) -> Result<Solved> {
    let delayed = inst.arms.iter().any(|a| a.delay > 0);
    let block = match relaxation {
        RelaxationArg::Auto => delayed,
        RelaxationArg::Instant => false,
        RelaxationArg::Block => true,
    };
    let h = inst.horizon;
    if block {
        let params = run.params();
        let plan = solve_delayed(models, h, &params)?;
        let rel = &plan.relaxed;
        let arms = plan
            .scaled
            .arms
            .iter()
            .map(|a| ArmRow {
                arm: a.arm.clone(),
                reward: a.reward,
                plays: a.plays,
            })
            .collect();
        Ok(Solved {
            report: SolveReport {
                instance: inst.label(),
                relaxation: Relaxation::Block,
                horizon: h,
                play_budget: rel.budget,
                objective: rel.objective,
                scaled_objective: Some(plan.scaled.objective),
                lambda: rel.lambda,
                duality_gap: rel.duality_gap,
                iterations: rel.iterations,
                arms,
            },
            plan: PlanFile {
                instance: inst.label(),
                relaxation: Relaxation::Block,
                reference: plan.scaled.objective,
                policies: plan.policies,
            },
        })
    } else {
        let mut cfg = CoupledConfig::new(h, budget.unwrap_or(h as f64), Relaxation::Instant);
        cfg.tolerance = run.tolerance;
        let lp = solve_coupled(models, &cfg)?;
        let policies = models
            .iter()
            .enumerate()
            .map(|(i, m)| lp.extract_randomized(i, &m.dag))
            .collect::<Result<Vec<_>>>()?;
        Ok(Solved {
            report: SolveReport {
                instance: inst.label(),
                relaxation: Relaxation::Instant,
                horizon: h,
                play_budget: lp.budget,
                objective: lp.objective,
                scaled_objective: None,
                lambda: lp.lambda,
                duality_gap: lp.duality_gap,
                iterations: lp.iterations,
                arms: lp
                    .arms
                    .iter()
                    .map(|a| ArmRow {
                        arm: a.arm.clone(),
                        reward: a.reward,
                        plays: a.plays,
                    })
                    .collect(),
            },
            plan: PlanFile {
                instance: inst.label(),
                relaxation: Relaxation::Instant,
                reference: lp.objective,
                policies,
            },
        })
    }
}

fn global_policy(plan: &PlanFile, models: &[ArmModel], horizon: u32, participation: f64) -> Result<GlobalPolicy> {
    if plan.policies.len() != models.len() {
        return Err(Error::InvalidInput(format!(
            "plan has {} policies for {} arms",
            plan.policies.len(),
            models.len()
        )));
    }
    let mut values = Vec::with_capacity(models.len());
    let mut entries = Vec::with_capacity(models.len());
    for (m, p) in models.iter().zip(&plan.policies) {
        values.push(p.evaluate(&m.dag)?);
        entries.push(ArmPlanEntry::new(m, p.clone()));
    }
    match plan.relaxation {
        Relaxation::Instant => round_sequential(entries, &values, horizon),
        _ => combine(entries, horizon, participation),
    }
}

fn out_writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct EstimateRow<'a> {
    instance: &'a str,
    policy: &'a str,
    trials: u64,
    mean: f64,
    stderr: f64,
    seed: u64,
    lp_objective: f64,
    ratio: f64,
}

fn cmd_simulate(
    run: &RunConfig,
    instance: &Path,
    plan_path: Option<&Path>,
    policies: &[PolicyArg],
    explore: f64,
    out: Option<&Path>,
    trace: Option<&Path>,
    trace_index: u64,
) -> Result<bool> {
    let inst = Instance::load(instance)?;
    let models = inst.models()?;
    let h = inst.horizon;
    let plan = match plan_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<PlanFile>(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))?
        }
        None => solve(&inst, &models, run, RelaxationArg::Auto, None)?.plan,
    };
    let requested = if policies.is_empty() {
        vec![PolicyArg::Planned, PolicyArg::Greedy, PolicyArg::ExploreExploit]
    } else {
        policies.to_vec()
    };
    let planned = global_policy(&plan, &models, h, run.participation)?;
    let cfg = McConfig::new(run.trials, run.seed);
    let mut estimates: Vec<Estimate> = Vec::new();
    for p in requested {
        let strategy: Box<dyn Strategy> = match p {
            PolicyArg::Planned => Box::new(planned.clone()),
            PolicyArg::Greedy => Box::new(Greedy::new(&models, h)),
            PolicyArg::ExploreExploit => Box::new(ExploreThenExploit::new(&models, h, explore)),
        };
        run.note(format!("simulating {} for {} trials", strategy.label(), run.trials));
        estimates.push(run_mc(strategy.as_ref(), &models, h, cfg)?);
    }
    if let Some(path) = trace {
        let (_, events) = trace_trial(&planned, &models, h, run.seed, trace_index);
        let mut w = BufWriter::new(File::create(path)?);
        for e in &events {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    let label = inst.label();
    match run.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out_writer(out)?);
            for e in &estimates {
                w.serialize(EstimateRow {
                    instance: &label,
                    policy: &e.policy,
                    trials: e.trials,
                    mean: e.mean,
                    stderr: e.stderr,
                    seed: e.seed,
                    lp_objective: plan.reference,
                    ratio: plan.reference / e.mean,
                })?;
            }
            w.flush()?;
        }
        Format::Json => {
            let mut w = out_writer(out)?;
            serde_json::to_writer_pretty(&mut w, &estimates)?;
            writeln!(w)?;
        }
    }
    Ok(true)
}

#[derive(Serialize)]
struct CheckRow<'a> {
    case: usize,
    transform: &'a str,
    check: &'a str,
    lhs: f64,
    rhs: f64,
    slack: f64,
}

fn cmd_transform(run: &RunConfig, instance: &Path, arm: Option<&str>, cases: usize, mode: ModeArg) -> Result<bool> {
    let inst = Instance::load(instance)?;
    let spec = match arm {
        Some(id) => inst
            .arms
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("no arm {id}")))?,
        None => &inst.arms[0],
    };
    let params = run.params();
    let depth = (1 + (2.0 / params.alpha).floor() as u32) * inst.horizon + 4;
    let dag = spec.build_dag(depth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut reports: Vec<(usize, TransformReport)> = Vec::new();
    for case in 0..cases {
        let step = random_step_policy(&dag, spec.delay, inst.horizon, StepMix::default(), &mut rng)?;
        match mode {
            ModeArg::Strict => {
                let res = run_pipeline(&step, &dag, &params)?;
                for r in res.reports {
                    reports.push((case, r));
                }
                reports.push((case, res.composition));
            }
            ModeArg::Relaxed => {
                let (block, r1) = block_structuring_report(&step, &dag)?;
                let (_, _, r2) = well_structured_report(&block, &dag, params.alpha, 0.0, Compaction::Relaxed)?;
                reports.push((case, r1));
                reports.push((case, r2));
            }
        }
        run.note(format!("case {case} done"));
    }
    let ok = reports.iter().all(|(_, r)| r.holds(run.tolerance));
    match run.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            for (case, r) in &reports {
                for c in &r.checks {
                    w.serialize(CheckRow {
                        case: *case,
                        transform: &r.transform,
                        check: &c.name,
                        lhs: c.lhs,
                        rhs: c.rhs,
                        slack: c.slack,
                    })?;
                }
            }
            w.flush()?;
        }
        Format::Json => {
            let rows: Vec<_> = reports.iter().map(|(case, r)| serde_json::json!({ "case": case, "report": r })).collect();
            print_json(&rows)?;
        }
    }
    Ok(ok)
}

fn cmd_verify(run: &RunConfig, scale: ScaleArg, inject_fault: bool) -> Result<bool> {
    let mut cfg = VerifyConfig::new(
        run.seed,
        match scale {
            ScaleArg::Quick => Scale::Quick,
            ScaleArg::Full => Scale::Full,
        },
    );
    cfg.params = run.params();
    cfg.inject_fault = inject_fault;
    let report = run_suite(&cfg)?;
    match run.format {
        Format::Csv => report.write_csv(io::stdout().lock())?,
        Format::Json => print_json(&report)?,
    }
    for name in report.failed() {
        eprintln!("FAILED: {name}");
    }
    Ok(report.passed())
}

#[derive(Serialize)]
struct TightReport {
    n: u32,
    lp_objective: f64,
    exact_value: f64,
    ratio: f64,
    lower: f64,
    upper: f64,
}

fn cmd_tight(n: u32, write: Option<&Path>) -> Result<bool> {
    let inst = make_tight_example(n)?;
    if let Some(p) = write {
        std::fs::write(p, inst.to_json()?)?;
    }
    let (lp, exact) = tight_gap_values(n)?;
    let report = TightReport {
        n,
        lp_objective: lp,
        exact_value: exact,
        ratio: lp / exact,
        lower: 2.0 - 10.0 / n as f64,
        upper: 2.0 + 1e-6,
    };
    print_json(&report)?;
    Ok(report.ratio >= report.lower && report.ratio <= report.upper)
}

fn cmd_budgeted(run: &RunConfig, instance: &Path, shadow: ShadowArg, oracle: bool) -> Result<bool> {
    let inst = AllocationInstance::load(instance)?;
    let cfg = BudgetedConfig {
        params: run.params(),
        participation: run.participation,
        shadow: match shadow {
            ShadowArg::LpShare => ShadowRule::LpShare,
            ShadowArg::BidderBudget => ShadowRule::BidderBudget,
        },
        tolerance: run.tolerance,
        ..BudgetedConfig::default()
    };
    let plan = plan_budgeted(&inst, &cfg)?;
    for w in &plan.report.warnings {
        eprintln!("warning: {w}");
    }
    let estimate = run_budgeted_mc(&plan, &inst, run.trials, run.seed)?;
    let opt = if oracle { Some(allocation_opt(&inst)?) } else { None };
    match run.format {
        Format::Json => print_json(&serde_json::json!({
            "plan": plan.report,
            "estimate": estimate,
            "opt": opt,
        }))?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.write_record(["scope", "bidder", "type", "accrued", "accrued_stderr", "paid", "paid_stderr"])?;
            for p in &estimate.pairs {
                w.write_record([
                    "pair".to_string(),
                    p.bidder.clone(),
                    p.impression.clone(),
                    p.accrued.mean.to_string(),
                    p.accrued.stderr.to_string(),
                    p.paid.mean.to_string(),
                    p.paid.stderr.to_string(),
                ])?;
            }
            for b in &estimate.bidders {
                w.write_record([
                    "bidder".to_string(),
                    b.bidder.clone(),
                    String::new(),
                    b.accrued.mean.to_string(),
                    b.accrued.stderr.to_string(),
                    b.revenue.mean.to_string(),
                    b.revenue.stderr.to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(estimate.bidders.iter().all(|b| b.max_overspend <= 1e-9))
}

fn dispatch(cli: Cli) -> Result<bool> {
    let run = cli.run;
    match cli.command {
        Command::Solve {
            instance,
            relaxation,
            play_budget,
            policies,
        } => {
            let inst = Instance::load(&instance)?;
            let models = inst.models()?;
            let solved = solve(&inst, &models, &run, relaxation, play_budget)?;
            if let Some(p) = policies {
                std::fs::write(p, serde_json::to_string(&solved.plan)?)?;
            }
            match run.format {
                Format::Json => print_json(&solved.report)?,
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(io::stdout().lock());
                    for a in &solved.report.arms {
                        w.serialize(a)?;
                    }
                    w.flush()?;
                }
            }
            Ok(true)
        }
        Command::Simulate {
            instance,
            plan,
            policy,
            explore,
            out,
            trace,
            trace_trial,
        } => {
            if run.trials == 0 {
                return Err(Error::InvalidInput("at least one trial is required".into()));
            }
            cmd_simulate(&run, &instance, plan.as_deref(), &policy, explore, out.as_deref(), trace.as_deref(), trace_trial)
        }
        Command::Transform {
            instance,
            arm,
            cases,
            mode,
        } => cmd_transform(&run, &instance, arm.as_deref(), cases, mode),
        Command::Verify { scale, inject_fault } => cmd_verify(&run, scale, inject_fault),
        Command::TightExample { n, write } => cmd_tight(n, write.as_deref()),
        Command::Budgeted {
            instance,
            shadow,
            oracle,
        } => cmd_budgeted(&run, &instance, shadow, oracle),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
