//! A uniform wrapper over BAM and the baselines: fit on a dataset, then act
//! greedily per task.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{cloning_fit, cloning_policy, fit_dynamics_mle, global_cost_fit, ml_irl_fit, CloningTable};
use crate::dataset::TeacherDataset;
use crate::domains::{CellCostModel, DynamicsFamily, Environment};
use crate::error::LearnError;
use crate::exec::Exec;
use crate::learner::{fit, Blocks, LearnerState, ModelConfig, OptimizerState, Params, Problem, Schedule};
use crate::mdp::{greedy_policy, DeterministicPolicy, SoftPlan, TieBreak};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Bam,
    ModelBasedIrl,
    GlobalCostIrl,
    Cloning,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Bam,
        Algorithm::ModelBasedIrl,
        Algorithm::GlobalCostIrl,
        Algorithm::Cloning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bam => "bam",
            Algorithm::ModelBasedIrl => "model-based-irl",
            Algorithm::GlobalCostIrl => "global-cost-irl",
            Algorithm::Cloning => "cloning",
        }
    }

    /// Whether the learner estimates dynamics parameters at all.
    pub fn uses_dynamics(self) -> bool {
        self != Algorithm::Cloning
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}`"))
    }
}

/// Everything fixed about a learning problem: the environment's parameter
/// spaces and the shared hyperparameters.
#[derive(Clone, Debug)]
pub struct LearningContext {
    pub family: DynamicsFamily,
    pub costs: CellCostModel,
    pub config: ModelConfig,
    pub schedule: Schedule,
    pub steps: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub num_tasks: usize,
    /// Parallelism over tasks inside one fit.
    pub exec: Exec,
}

impl LearningContext {
    pub fn new(env: &Environment, config: ModelConfig, schedule: Schedule) -> Self {
        let steps = config.steps.unwrap_or_else(|| env.spec.default_steps());
        Self {
            family: env.family(),
            costs: env.cost_model(config.link),
            steps,
            num_states: env.num_states(),
            num_actions: env.true_model.num_actions(),
            num_tasks: env.num_tasks(),
            config,
            schedule,
            exec: Exec::Sequential,
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }
}

/// One learner instance with its current parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub algorithm: Algorithm,
    /// Dynamics parameters: fitted jointly with the costs (BAM) or by
    /// transition-only maximum likelihood (model-based learners). Empty for
    /// cloning.
    pub theta: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub global: Option<Vec<f64>>,
    pub optimizer: OptimizerState,
    pub tables: Vec<CloningTable>,
    #[serde(skip)]
    policies: Option<Vec<DeterministicPolicy>>,
}

impl PartialEq for Agent {
    fn eq(&self, other: &Self) -> bool {
        self.algorithm == other.algorithm
            && self.theta == other.theta
            && self.phi == other.phi
            && self.global == other.global
            && self.optimizer == other.optimizer
            && self.tables == other.tables
    }
}

impl Agent {
    /// Untrained learner: every parameter at its prior mode.
    pub fn new(algorithm: Algorithm, ctx: &LearningContext) -> Self {
        let (theta, phi, tables) = match algorithm {
            Algorithm::Cloning => (
                Vec::new(),
                Vec::new(),
                (0..ctx.num_tasks)
                    .map(|_| CloningTable::new(ctx.num_states, ctx.num_actions))
                    .collect(),
            ),
            _ => (
                vec![0.0; ctx.family.num_params()],
                vec![vec![0.0; ctx.costs.num_params()]; ctx.num_tasks],
                Vec::new(),
            ),
        };
        Self {
            algorithm,
            theta,
            phi,
            global: (algorithm == Algorithm::GlobalCostIrl).then(|| vec![0.0; ctx.costs.num_params()]),
            optimizer: OptimizerState::new(ctx.schedule.initial_step),
            tables,
            policies: None,
        }
    }

    fn cost_state(&self, theta: Vec<f64>) -> LearnerState {
        LearnerState::from_parts(
            Params {
                theta,
                phi: self.phi.clone(),
                global: self.global.clone(),
            },
            self.optimizer.clone(),
        )
    }

    fn store(&mut self, state: LearnerState) {
        let (params, optimizer) = state.into_parts();
        if self.algorithm == Algorithm::Bam {
            self.theta = params.theta;
        }
        self.phi = params.phi;
        self.global = params.global;
        self.optimizer = optimizer;
    }

    /// Refits on the full dataset, starting from the current parameters.
    /// On failure the last accepted parameters are kept.
    pub fn fit(&mut self, ctx: &LearningContext, data: &TeacherDataset) -> Result<(), LearnError> {
        self.policies = None;
        let (cfg, sch) = (&ctx.config, &ctx.schedule);
        match self.algorithm {
            Algorithm::Bam => {
                let problem = Problem::new(&ctx.family, &ctx.costs, cfg, ctx.steps, data).with_exec(ctx.exec);
                let mut state = self.cost_state(self.theta.clone());
                let result = fit(&mut state, &problem, sch, Blocks::BOTH);
                self.store(state);
                result.map(|_| ())
            }
            Algorithm::ModelBasedIrl | Algorithm::GlobalCostIrl => {
                self.theta = fit_dynamics_mle(&ctx.family, &data.transitions, cfg, sch, Some(&self.theta))?;
                let model = ctx.family.build(&self.theta)?;
                let mut state = self.cost_state(Vec::new());
                let result = if self.algorithm == Algorithm::GlobalCostIrl {
                    global_cost_fit(&model, &ctx.costs, data, cfg, sch, ctx.steps, &mut state, ctx.exec)
                } else {
                    ml_irl_fit(&model, &ctx.costs, data, cfg, sch, ctx.steps, &mut state, ctx.exec)
                };
                self.store(state);
                result.map(|_| ())
            }
            Algorithm::Cloning => {
                for (task, table) in self.tables.iter_mut().enumerate() {
                    cloning_fit(table, data, task, cfg, sch)?;
                }
                self.optimizer.fits += 1;
                Ok(())
            }
        }
    }

    /// Soft plans under the learned model; `None` for cloning.
    pub fn plans(&self, ctx: &LearningContext) -> Result<Option<Vec<SoftPlan>>, LearnError> {
        let empty = TeacherDataset::new(ctx.num_tasks);
        let params = |theta: Vec<f64>| Params {
            theta,
            phi: self.phi.clone(),
            global: self.global.clone(),
        };
        let plans = match self.algorithm {
            Algorithm::Cloning => return Ok(None),
            Algorithm::Bam => Problem::new(&ctx.family, &ctx.costs, &ctx.config, ctx.steps, &empty)
                .with_exec(ctx.exec)
                .plans(&params(self.theta.clone()))?,
            Algorithm::ModelBasedIrl | Algorithm::GlobalCostIrl => {
                let family = crate::baselines::fixed_family(&ctx.family.build(&self.theta)?);
                Problem::new(&family, &ctx.costs, &ctx.config, ctx.steps, &empty)
                    .with_global_cost(self.global.is_some())
                    .with_exec(ctx.exec)
                    .plans(&params(Vec::new()))?
            }
        };
        Ok(Some(plans))
    }

    /// Greedy policy per task, cached until the next fit.
    pub fn policies(&mut self, ctx: &LearningContext) -> Result<&[DeterministicPolicy], LearnError> {
        if self.policies.is_none() {
            let policies = match self.plans(ctx)? {
                Some(plans) => plans.iter().map(|p| greedy_policy(p, TieBreak::Random)).collect(),
                None => self.tables.iter().map(cloning_policy).collect(),
            };
            self.policies = Some(policies);
        }
        Ok(self.policies.as_deref().expect("just filled"))
    }
}
