//! Simulated-teacher experiments: protocols, evaluation and result tables.
//!
//! # Config (TOML)
//!
//! ```toml
//! environment = "../environments/doorway.env"   # relative to the config file
//! algorithms = ["bam", "model-based-irl", "cloning"]
//! protocol = "demos-only"   # demos-only | demos+feedback | global-cost-comparison | feedback-only
//! rounds = 10
//! agents = 50
//! evaluation_episodes = 50
//! demos_per_task = 1
//! master_seed = 1
//! exec = "parallel"         # or "sequential"
//!
//! [model]                   # beta, steps, priors, link, [model.feedback]
//! beta = 5.0
//!
//! [schedule]                # outer, phi_steps, theta_steps, tol, initial_step
//! outer = 20
//! ```
//!
//! # Result table
//!
//! Tab separated, one header row, one row per (algorithm, agent, round):
//! `algorithm agent round total_return optimal_return percent_optimal
//! demo_pairs feedback_events transitions status`. The table holds no
//! timestamps, so reruns with the same seed are byte-identical; run metadata
//! goes to a separate manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, Algorithm, LearningContext};
use crate::checkpoint::fingerprint;
use crate::dataset::{TeacherDataset, Transition};
use crate::domains::Environment;
use crate::error::HarnessError;
use crate::exec::Exec;
use crate::learner::{ModelConfig, Schedule};
use crate::mdp::{evaluate_policy, summarize, DeterministicPolicy, Policy};
use crate::seed::{stream, Role};
use crate::teacher::{simulate_demonstration, simulate_feedback, DemoMode, TeacherPlans, SYNTHETIC_NOOP};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// One demonstration per task per round.
    #[default]
    #[serde(rename = "demos-only")]
    DemosOnly,
    /// Demonstrations, then one agent episode per task with feedback.
    #[serde(rename = "demos+feedback")]
    DemosFeedback,
    /// Demonstrations only; intended for BAM against the global-cost learner.
    #[serde(rename = "global-cost-comparison")]
    GlobalCostComparison,
    /// Agent episodes with feedback and no demonstrations.
    #[serde(rename = "feedback-only")]
    FeedbackOnly,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::DemosOnly => "demos-only",
            Protocol::DemosFeedback => "demos+feedback",
            Protocol::GlobalCostComparison => "global-cost-comparison",
            Protocol::FeedbackOnly => "feedback-only",
        }
    }

    fn has_demos(self) -> bool {
        self != Protocol::FeedbackOnly
    }

    fn has_agent_episodes(self) -> bool {
        matches!(self, Protocol::DemosFeedback | Protocol::FeedbackOnly)
    }
}

fn default_agents() -> usize {
    50
}
fn default_episodes() -> usize {
    50
}
fn default_demos() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: PathBuf,
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub protocol: Protocol,
    pub rounds: usize,
    #[serde(default = "default_agents")]
    pub agents: usize,
    #[serde(default = "default_episodes")]
    pub evaluation_episodes: usize,
    #[serde(default = "default_demos")]
    pub demos_per_task: usize,
    /// Evaluation and agent-episode length; defaults to the environment's.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub demo_mode: DemoMode,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub exec: Exec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: Schedule,
}

impl ExperimentConfig {
    pub fn new(environment: impl Into<PathBuf>, algorithms: Vec<Algorithm>, protocol: Protocol, rounds: usize) -> Self {
        Self {
            environment: environment.into(),
            algorithms,
            protocol,
            rounds,
            agents: default_agents(),
            evaluation_episodes: default_episodes(),
            demos_per_task: default_demos(),
            horizon: None,
            demo_mode: DemoMode::default(),
            master_seed: 0,
            exec: Exec::default(),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
        }
    }

    /// Parses TOML; a relative environment path is taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        if cfg.environment.is_relative() {
            cfg.environment = base.join(&cfg.environment);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&std::fs::read_to_string(path)?, base)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.algorithms.is_empty() {
            return bad("at least one algorithm is required");
        }
        if self.rounds == 0 || self.agents == 0 || self.evaluation_episodes == 0 {
            return bad("rounds, agents and evaluation_episodes must be positive");
        }
        if self.protocol.has_demos() && self.demos_per_task == 0 {
            return bad("demos_per_task must be positive for protocols with demonstrations");
        }
        if self.horizon == Some(0) {
            return bad("horizon must be positive");
        }
        if !(self.model.beta.is_finite() && self.model.beta >= 0.0) {
            return bad("beta must be finite and non-negative");
        }
        if !self.model.feedback.is_valid() {
            return bad("feedback parameters out of range");
        }
        if self.model.steps == Some(0) {
            return bad("steps must be positive");
        }
        Ok(())
    }

    /// Hash of everything that determines results: this config (minus the
    /// execution mode) and the environment's canonical text.
    pub fn hash(&self, env: &Environment) -> String {
        let mut c = self.clone();
        c.exec = Exec::Sequential;
        c.environment = PathBuf::new();
        fingerprint(&(c, env.spec.to_text()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub algorithm: Algorithm,
    pub agent: usize,
    pub round: usize,
    pub total_return: f64,
    pub optimal_return: f64,
    pub percent_optimal: f64,
    pub demo_pairs: usize,
    pub feedback_events: usize,
    pub transitions: usize,
    /// `ok`, or the reason the refit failed (parameters kept from before).
    pub status: String,
}

pub const RESULT_HEADER: &str =
    "algorithm\tagent\tround\ttotal_return\toptimal_return\tpercent_optimal\tdemo_pairs\tfeedback_events\ttransitions\tstatus";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// Rows sorted by (algorithm, agent, round).
    pub fn sorted(mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by(|a, b| (a.algorithm, a.agent, a.round).cmp(&(b.algorithm, b.agent, b.round)));
        Self { rows }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(RESULT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.algorithm,
                r.agent,
                r.round,
                r.total_return,
                r.optimal_return,
                r.percent_optimal,
                r.demo_pairs,
                r.feedback_events,
                r.transitions,
                r.status.replace(['\t', '\n'], " ")
            );
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines();
        if lines.next() != Some(RESULT_HEADER) {
            return Err(HarnessError::Config("result table header mismatch".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let err = || HarnessError::Config(format!("result table line {}: malformed", i + 2));
            if f.len() != 10 {
                return Err(err());
            }
            let num = |k: usize| f[k].parse::<usize>().map_err(|_| err());
            let real = |k: usize| f[k].parse::<f64>().map_err(|_| err());
            rows.push(ResultRow {
                algorithm: f[0].parse().map_err(|_| err())?,
                agent: num(1)?,
                round: num(2)?,
                total_return: real(3)?,
                optimal_return: real(4)?,
                percent_optimal: real(5)?,
                demo_pairs: num(6)?,
                feedback_events: num(7)?,
                transitions: num(8)?,
                status: f[9].to_string(),
            });
        }
        Ok(Self { rows })
    }

    /// Mean and standard error of `percent_optimal` per (algorithm, round).
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(Algorithm, usize)> = self.rows.iter().map(|r| (r.algorithm, r.round)).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|(algorithm, round)| {
                let rows: Vec<&ResultRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.algorithm == algorithm && r.round == round)
                    .collect();
                let pct: Vec<f64> = rows.iter().map(|r| r.percent_optimal).collect();
                let ret: Vec<f64> = rows.iter().map(|r| r.total_return).collect();
                let p = summarize(&pct);
                SummaryRow {
                    algorithm,
                    round,
                    agents: pct.len(),
                    mean_percent: p.mean,
                    std_err_percent: p.std_err,
                    mean_return: summarize(&ret).mean,
                    failures: rows.iter().filter(|r| r.status != "ok").count(),
                }
            })
            .collect()
    }

    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("algorithm\tround\tagents\tmean_percent\tstd_err_percent\tmean_return\tfailures\n");
        for s in self.summary() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.algorithm, s.round, s.agents, s.mean_percent, s.std_err_percent, s.mean_return, s.failures
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub algorithm: Algorithm,
    pub round: usize,
    pub agents: usize,
    pub mean_percent: f64,
    pub std_err_percent: f64,
    pub mean_return: f64,
    pub failures: usize,
}

impl SummaryRow {
    /// Looks up the row for `(algorithm, round)`.
    pub fn find(rows: &[SummaryRow], algorithm: Algorithm, round: usize) -> Option<&SummaryRow> {
        rows.iter().find(|r| r.algorithm == algorithm && r.round == round)
    }
}

/// Ground truth and fixed data shared by every agent in an experiment.
pub struct Setup {
    pub env: Environment,
    pub ctx: LearningContext,
    pub teacher: TeacherPlans,
    pub horizon: usize,
}

impl Setup {
    pub fn new(env: Environment, config: &ExperimentConfig) -> Result<Self, HarnessError> {
        let ctx = LearningContext::new(&env, config.model.clone(), config.schedule.clone());
        let teacher = TeacherPlans::new(&env, ctx.config.beta, ctx.steps)?;
        let horizon = config.horizon.unwrap_or(env.spec.horizon);
        Ok(Self {
            env,
            ctx,
            teacher,
            horizon,
        })
    }
}

/// Appends one teacher demonstration per task (times `count`) to `data`.
pub fn teacher_demonstrations<R: Rng>(setup: &Setup, count: usize, mode: DemoMode, rng: &mut R, data: &mut TeacherDataset) {
    for task in 0..setup.env.num_tasks() {
        for _ in 0..count {
            let start = setup.env.initial.sample(rng);
            let demo = simulate_demonstration(&setup.env, &setup.teacher, task, start, mode, rng, &mut data.transitions);
            data.add_demonstration(&demo, SYNTHETIC_NOOP);
        }
    }
}

/// Runs `policy` on the true dynamics from `start` until a goal of `task`
/// or the horizon; every step gets one simulated feedback event.
pub fn agent_episode<R: Rng, F: Rng>(
    setup: &Setup,
    policy: &DeterministicPolicy,
    task: usize,
    start: usize,
    act_rng: &mut R,
    feedback_rng: &mut F,
    data: &mut TeacherDataset,
) {
    let mut state = start;
    for _ in 0..setup.horizon {
        if setup.env.is_goal(task, state) {
            break;
        }
        let action = policy.act(state, act_rng);
        let next = setup.env.true_model.sample(state, action, act_rng);
        let step = data.feedback.len();
        data.feedback.push(simulate_feedback(
            task,
            state,
            action,
            &setup.teacher.soft[task],
            &setup.ctx.config.feedback,
            step,
            feedback_rng,
        ));
        data.transitions.push(Transition { state, action, next });
        state = next;
    }
}

/// Total expected return of one policy per task, estimated by Monte Carlo
/// with the evaluation stream of `(agent, round)`. Using the same streams for
/// every policy set gives common random numbers across learners.
pub fn total_return(
    setup: &Setup,
    policies: &[DeterministicPolicy],
    episodes: usize,
    master: u64,
    agent: usize,
    round: usize,
) -> Result<f64, HarnessError> {
    let mut total = 0.0;
    for (task, policy) in policies.iter().enumerate() {
        let mut rng = stream(master, agent as u64, round as u64, Role::Evaluation, task as u64);
        let est = evaluate_policy(
            policy,
            &setup.env.true_model,
            &setup.env.true_costs[task],
            episodes,
            setup.horizon,
            &setup.env.initial,
            &mut rng,
        )?;
        total += est.mean;
    }
    Ok(total)
}

/// One learner's state within an agent repetition.
pub struct Learner {
    pub agent: Agent,
    pub data: TeacherDataset,
    pub status: String,
}

fn refit(learner: &mut Learner, ctx: &LearningContext) {
    learner.status = match learner.agent.fit(ctx, &learner.data) {
        Ok(()) => "ok".into(),
        Err(e) => format!("fit-error: {e}"),
    };
}

/// Advances every learner of agent repetition `agent` by one round: teacher
/// demonstrations (shared by all learners), optional agent episodes with
/// feedback (per learner), and refits.
pub fn run_round(
    config: &ExperimentConfig,
    setup: &Setup,
    learners: &mut [Learner],
    agent: usize,
    round: usize,
) -> Result<(), HarnessError> {
    let (master, a, r) = (config.master_seed, agent as u64, round as u64);
    if config.protocol.has_demos() {
        let mut round_data = TeacherDataset::new(setup.env.num_tasks());
        let mut rng = stream(master, a, r, Role::Teacher, 0);
        teacher_demonstrations(setup, config.demos_per_task, config.demo_mode, &mut rng, &mut round_data);
        for l in learners.iter_mut() {
            l.data.demos.extend_from_slice(&round_data.demos);
            l.data.transitions.extend_from_slice(&round_data.transitions);
        }
    }
    for (k, l) in learners.iter_mut().enumerate() {
        if config.protocol.has_agent_episodes() {
            if config.protocol.has_demos() {
                refit(l, &setup.ctx);
            }
            let policies = l.agent.policies(&setup.ctx)?.to_vec();
            let tag = l.agent.algorithm as u64 * 1000 + k as u64;
            let mut act_rng = stream(master, a, r, Role::AgentEpisode, tag);
            let mut fb_rng = stream(master, a, r, Role::Feedback, tag);
            for (task, policy) in policies.iter().enumerate() {
                let start = setup.env.initial.sample(&mut act_rng);
                agent_episode(setup, policy, task, start, &mut act_rng, &mut fb_rng, &mut l.data);
            }
        }
        refit(l, &setup.ctx);
    }
    Ok(())
}

/// Result rows for every learner after round `round`.
pub fn evaluate_learners(
    config: &ExperimentConfig,
    setup: &Setup,
    learners: &mut [Learner],
    agent: usize,
    round: usize,
) -> Result<Vec<ResultRow>, HarnessError> {
    let episodes = config.evaluation_episodes;
    let optimal = total_return(setup, &setup.teacher.optimal, episodes, config.master_seed, agent, round)?;
    let mut rows = Vec::with_capacity(learners.len());
    for l in learners.iter_mut() {
        let policies = l.agent.policies(&setup.ctx)?;
        let total = total_return(setup, policies, episodes, config.master_seed, agent, round)?;
        rows.push(ResultRow {
            algorithm: l.agent.algorithm,
            agent,
            round,
            total_return: total,
            optimal_return: optimal,
            percent_optimal: percent_of(total, optimal),
            demo_pairs: l.data.demos.len(),
            feedback_events: l.data.feedback.len(),
            transitions: l.data.transitions.len(),
            status: l.status.clone(),
        });
    }
    Ok(rows)
}

/// `100 * total / optimal`; returns are non-positive costs negated, so the
/// optimal total is the largest achievable.
pub fn percent_of(total: f64, optimal: f64) -> f64 {
    if optimal == 0.0 {
        if total == 0.0 {
            100.0
        } else {
            0.0
        }
    } else {
        100.0 * total / optimal
    }
}

/// All rounds for one agent repetition.
pub fn run_agent(config: &ExperimentConfig, setup: &Setup, agent: usize) -> Result<Vec<ResultRow>, HarnessError> {
    let mut learners: Vec<Learner> = config
        .algorithms
        .iter()
        .map(|&alg| Learner {
            agent: Agent::new(alg, &setup.ctx),
            data: TeacherDataset::new(setup.env.num_tasks()),
            status: "ok".into(),
        })
        .collect();
    let mut rows = Vec::new();
    for round in 0..config.rounds {
        run_round(config, setup, &mut learners, agent, round)?;
        rows.extend(evaluate_learners(config, setup, &mut learners, agent, round)?);
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub table: ResultTable,
    pub config_hash: String,
    pub environment: String,
    pub warnings: Vec<String>,
}

/// Runs the full agents x rounds x algorithms grid. Agent repetitions run
/// through `config.exec`; results do not depend on scheduling.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let env = Environment::load(&config.environment)?;
    run_experiment_with(config, env)
}

/// [`run_experiment`] with an already loaded environment.
pub fn run_experiment_with(config: &ExperimentConfig, env: Environment) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let config_hash = config.hash(&env);
    let setup = Setup::new(env, config)?;
    let results = config.exec.map_range(config.agents, |k| run_agent(config, &setup, k));
    let mut rows = Vec::new();
    let mut warnings = setup.env.warnings.clone();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut rs) => rows.append(&mut rs),
            Err(e) => warnings.push(format!("agent {k} aborted: {e}")),
        }
    }
    Ok(ExperimentOutput {
        table: ResultTable::sorted(rows),
        config_hash,
        environment: setup.env.spec.name.clone(),
        warnings,
    })
}

/// Run metadata written beside the result table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub environment: String,
    pub protocol: String,
    pub crate_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub warnings: Vec<String>,
    pub config: ExperimentConfig,
}

/// Writes `results.tsv`, `summary.tsv` and `manifest.json` into `dir`.
pub fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    output: &ExperimentOutput,
    started_unix: u64,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    crate::dataset::write_atomic(&dir.join("results.tsv"), output.table.to_tsv().as_bytes())?;
    crate::dataset::write_atomic(&dir.join("summary.tsv"), output.table.summary_tsv().as_bytes())?;
    let manifest = Manifest {
        config_hash: output.config_hash.clone(),
        environment: output.environment.clone(),
        protocol: config.protocol.name().into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        started_unix,
        finished_unix: unix_now(),
        warnings: output.warnings.clone(),
        config: config.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    crate::dataset::write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(())
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
