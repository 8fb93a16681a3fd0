//! Comparison learners: model-based maximum-likelihood IRL, the same with a
//! task-shared global cost, and tabular behavioral cloning.

use serde::{Deserialize, Serialize};

use crate::dataset::{Signal, TeacherDataset, Transition};
use crate::domains::{CellCostModel, DynamicsFamily};
use crate::error::LearnError;
use crate::exec::Exec;
use crate::learner::{fit, Blocks, FitReport, LearnerState, ModelConfig, Params, Problem, Schedule};
use crate::mdp::{DeterministicPolicy, TieBreak, TransitionModel};
use crate::optim::ascend;
use crate::teacher::{
    advantage, demo_log_likelihood, demo_log_likelihood_grad, feedback_log_likelihood_and_slope,
    feedback_log_likelihood_grad,
};

/// Maximum-likelihood dynamics parameters from observed transitions alone.
/// Starts from `warm` when given, otherwise from the prior mode.
pub fn fit_dynamics_mle(
    family: &DynamicsFamily,
    transitions: &[Transition],
    config: &ModelConfig,
    schedule: &Schedule,
    warm: Option<&[f64]>,
) -> Result<Vec<f64>, LearnError> {
    let data = TeacherDataset {
        num_tasks: 0,
        transitions: transitions.to_vec(),
        ..TeacherDataset::default()
    };
    let costs = CellCostModel::new(Vec::new(), 0, config.link);
    let problem = Problem::new(family, &costs, config, 1, &data);
    let mut params = Params::zeros(family.num_params(), 0, 0, false);
    if let Some(w) = warm {
        params.theta.copy_from_slice(w);
    }
    let mut state = LearnerState::new(params, schedule);
    fit(&mut state, &problem, schedule, Blocks::THETA)?;
    Ok(state.theta().to_vec())
}

/// Known dynamics for cost-only learners.
pub fn fixed_family(model: &TransitionModel) -> DynamicsFamily {
    DynamicsFamily::Fixed(model.without_params())
}

/// Per-task costs under fixed dynamics. `state` holds cost parameters only
/// (an empty theta); it is updated in place so fits can be warm started.
pub fn ml_irl_fit(
    model: &TransitionModel,
    costs: &CellCostModel,
    data: &TeacherDataset,
    config: &ModelConfig,
    schedule: &Schedule,
    steps: usize,
    state: &mut LearnerState,
    exec: Exec,
) -> Result<FitReport, LearnError> {
    let family = fixed_family(model);
    let problem = Problem::new(&family, costs, config, steps, data).with_exec(exec);
    fit(state, &problem, schedule, Blocks::COSTS)
}

/// Per-task costs plus one task-shared cost under fixed dynamics. Every
/// task plans with `C_global + C_i`; `state` must carry a global block.
pub fn global_cost_fit(
    model: &TransitionModel,
    costs: &CellCostModel,
    data: &TeacherDataset,
    config: &ModelConfig,
    schedule: &Schedule,
    steps: usize,
    state: &mut LearnerState,
    exec: Exec,
) -> Result<FitReport, LearnError> {
    let family = fixed_family(model);
    let problem = Problem::new(&family, costs, config, steps, data)
        .with_global_cost(true)
        .with_exec(exec);
    fit(state, &problem, schedule, Blocks::COSTS)
}

/// Pseudo-Q values per state-action pair for one task, read as action
/// log-probabilities up to scale. Rows without data keep their initial value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloningTable {
    pub num_actions: usize,
    pub q: Vec<f64>,
}

impl CloningTable {
    pub const INITIAL_VALUE: f64 = 0.0;

    pub fn new(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_actions,
            q: vec![Self::INITIAL_VALUE; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.q.len() / self.num_actions.max(1)
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.q[state * self.num_actions..(state + 1) * self.num_actions]
    }
}

/// Row log-likelihood of demo counts and feedback under the teacher model,
/// plus the Gaussian prior, with gradient.
fn row_objective(
    row: &[f64],
    demos: &[(usize, f64)],
    feedback: &[(usize, Signal, f64)],
    config: &ModelConfig,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; row.len()];
    let mut value = 0.0;
    for &(a, n) in demos {
        value += n * demo_log_likelihood(row, a, config.beta);
        demo_log_likelihood_grad(row, a, config.beta, n, &mut grad);
    }
    for &(a, sig, n) in feedback {
        value += n * feedback_log_likelihood_and_slope(advantage(row, a), sig, &config.feedback).0;
        feedback_log_likelihood_grad(row, a, sig, &config.feedback, n, &mut grad);
    }
    if let Some(var) = config.phi_prior_variance {
        for (g, x) in grad.iter_mut().zip(row) {
            *g -= x / var;
        }
        value -= row.iter().map(|x| x * x).sum::<f64>() / (2.0 * var);
    }
    (value, grad)
}

/// Fits `table` for `task` by independent per-row ascent on the same demo
/// and feedback likelihoods the planning learners use. There is no coupling
/// between states, so unobserved states are left untouched.
pub fn cloning_fit(
    table: &mut CloningTable,
    data: &TeacherDataset,
    task: usize,
    config: &ModelConfig,
    schedule: &Schedule,
) -> Result<(), LearnError> {
    let na = table.num_actions;
    let mut demos: std::collections::BTreeMap<usize, Vec<(usize, f64)>> = Default::default();
    let mut feedback: std::collections::BTreeMap<usize, Vec<(usize, Signal, f64)>> = Default::default();
    for d in data.demos_for(task) {
        let row = demos.entry(d.state).or_default();
        match row.iter_mut().find(|(a, _)| *a == d.action) {
            Some(entry) => entry.1 += 1.0,
            None => row.push((d.action, 1.0)),
        }
    }
    for f in data.feedback_for(task) {
        let row = feedback.entry(f.state).or_default();
        match row.iter_mut().find(|(a, s, _)| *a == f.action && *s == f.signal) {
            Some(entry) => entry.2 += 1.0,
            None => row.push((f.action, f.signal, 1.0)),
        }
    }
    let mut states: Vec<usize> = demos.keys().chain(feedback.keys()).copied().collect();
    states.sort_unstable();
    states.dedup();
    let budget = schedule.outer * schedule.phi_steps;
    for s in states {
        let d = demos.get(&s).map_or(&[][..], |v| v.as_slice());
        let f = feedback.get(&s).map_or(&[][..], |v| v.as_slice());
        let mut x = table.row(s).to_vec();
        let mut step = 1.0;
        ascend(&mut x, |row| Ok(row_objective(row, d, f, config)), budget, &mut step, schedule.tol * 1e-3)?;
        table.q[s * na..(s + 1) * na].copy_from_slice(&x);
    }
    Ok(())
}

/// Greedy policy of a cloning table with uniform random tie-break.
pub fn cloning_policy(table: &CloningTable) -> DeterministicPolicy {
    DeterministicPolicy::from_q(&table.q, table.num_actions, TieBreak::Random)
}
