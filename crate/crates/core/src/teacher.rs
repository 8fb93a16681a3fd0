//! Teacher behaviour models and the simulated teacher.
//!
//! Demonstrated actions follow a Boltzmann distribution over the teacher's
//! Q-values. Feedback follows the advantage-based model: the chance of an
//! explicit positive (negative) signal grows (shrinks) with the advantage of
//! the most recent action over the uniform average of its state's Q-values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Demonstration, FeedbackEvent, Signal, Transition};
use crate::domains::{Environment, NOOP};
use crate::mdp::{
    argmax_set, boltzmann_row, hard_value_iteration, DeterministicPolicy, Policy, SoftPlan, StochasticPolicy,
    TieBreak,
};

/// Dropout, error rate and scale of the feedback model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackParams {
    pub mu_plus: f64,
    pub mu_minus: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

impl Default for FeedbackParams {
    fn default() -> Self {
        Self {
            mu_plus: 0.2,
            mu_minus: 0.2,
            epsilon: 0.05,
            alpha: 1.0,
        }
    }
}

impl FeedbackParams {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.mu_plus)
            && (0.0..=1.0).contains(&self.mu_minus)
            && (0.0..0.5).contains(&self.epsilon)
            && self.alpha > 0.0
            && self.alpha.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedbackProbs {
    pub positive: f64,
    pub negative: f64,
    pub none: f64,
}

impl FeedbackProbs {
    pub fn of(&self, signal: Signal) -> f64 {
        match signal {
            Signal::Positive => self.positive,
            Signal::Negative => self.negative,
            Signal::None => self.none,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln p(a|s)` under `p(a|s) ∝ exp(beta q)`, max-shifted.
pub fn demo_log_likelihood(q_row: &[f64], action: usize, beta: f64) -> f64 {
    let max = q_row.iter().fold(f64::NEG_INFINITY, |m, &q| m.max(beta * q));
    let z: f64 = q_row.iter().map(|&q| (beta * q - max).exp()).sum();
    beta * q_row[action] - max - z.ln()
}

/// Writes `d ln p(a|s) / d q_row` into `out` (accumulating) scaled by `weight`.
pub fn demo_log_likelihood_grad(q_row: &[f64], action: usize, beta: f64, weight: f64, out: &mut [f64]) {
    let mut pi = [0.0; 16];
    let mut heap;
    let pi: &mut [f64] = if q_row.len() <= pi.len() {
        &mut pi[..q_row.len()]
    } else {
        heap = vec![0.0; q_row.len()];
        &mut heap
    };
    boltzmann_row(q_row, beta, pi);
    for (b, o) in out.iter_mut().enumerate() {
        let indicator = if b == action { 1.0 } else { 0.0 };
        *o += weight * beta * (indicator - pi[b]);
    }
}

/// `Q(s, a) - mean_a' Q(s, a')`.
pub fn advantage(q_row: &[f64], action: usize) -> f64 {
    q_row[action] - q_row.iter().sum::<f64>() / q_row.len() as f64
}

/// Probabilities of a positive, negative, or absent signal given advantage
/// `delta`. The absent branch is evaluated as `mu+ A + mu- B` (the algebraic
/// complement) so it stays accurate when explicit feedback is nearly certain.
pub fn feedback_probabilities(delta: f64, params: &FeedbackParams) -> FeedbackProbs {
    let e = params.epsilon;
    let up = (1.0 - 2.0 * e) * sigmoid(params.alpha * delta) + e;
    let down = (1.0 - 2.0 * e) * sigmoid(-params.alpha * delta) + e;
    FeedbackProbs {
        positive: (1.0 - params.mu_plus) * up,
        negative: (1.0 - params.mu_minus) * down,
        none: params.mu_plus * up + params.mu_minus * down,
    }
}

/// Smallest probability whose log is taken; avoids `-inf` on impossible data.
pub const PROB_FLOOR: f64 = 1e-12;

/// `ln p(signal | delta)` and its derivative with respect to `delta`.
pub fn feedback_log_likelihood_and_slope(delta: f64, signal: Signal, params: &FeedbackParams) -> (f64, f64) {
    let probs = feedback_probabilities(delta, params);
    let e = params.epsilon;
    let s = sigmoid(params.alpha * delta);
    // d up / d delta = (1 - 2e) alpha s (1 - s); d down / d delta is its negation.
    let dup = (1.0 - 2.0 * e) * params.alpha * s * (1.0 - s);
    let dp = match signal {
        Signal::Positive => (1.0 - params.mu_plus) * dup,
        Signal::Negative => -(1.0 - params.mu_minus) * dup,
        Signal::None => (params.mu_plus - params.mu_minus) * dup,
    };
    let p = probs.of(signal);
    if p < PROB_FLOOR {
        (PROB_FLOOR.ln(), 0.0)
    } else {
        (p.ln(), dp / p)
    }
}

/// `ln p(f | s, a, Q(s))`.
pub fn feedback_log_likelihood(event: &FeedbackEvent, q_row: &[f64], params: &FeedbackParams) -> f64 {
    feedback_log_likelihood_and_slope(advantage(q_row, event.action), event.signal, params).0
}

/// Accumulates `weight * d ln p(f|s,a,Q(s)) / d Q(s, ·)` into `out`.
pub fn feedback_log_likelihood_grad(
    q_row: &[f64],
    action: usize,
    signal: Signal,
    params: &FeedbackParams,
    weight: f64,
    out: &mut [f64],
) {
    let (_, slope) = feedback_log_likelihood_and_slope(advantage(q_row, action), signal, params);
    let inv = 1.0 / q_row.len() as f64;
    for (b, o) in out.iter_mut().enumerate() {
        let d_delta = if b == action { 1.0 - inv } else { -inv };
        *o += weight * slope * d_delta;
    }
}

/// Draws a signal for an agent action from the teacher's Q-values.
pub fn sample_signal<R: Rng + ?Sized>(delta: f64, params: &FeedbackParams, rng: &mut R) -> Signal {
    let p = feedback_probabilities(delta, params);
    let u: f64 = rng.gen();
    if u < p.positive {
        Signal::Positive
    } else if u < p.positive + p.negative {
        Signal::Negative
    } else {
        Signal::None
    }
}

/// Feedback for an agent step `(state, action)` given the teacher's plan.
pub fn simulate_feedback<R: Rng + ?Sized>(
    task: usize,
    state: usize,
    action: usize,
    teacher_plan: &SoftPlan,
    params: &FeedbackParams,
    step: usize,
    rng: &mut R,
) -> FeedbackEvent {
    let delta = advantage(teacher_plan.q_row(state), action);
    FeedbackEvent {
        task,
        state,
        action,
        signal: sample_signal(delta, params, rng),
        step,
    }
}

/// How the simulated teacher picks demonstrated actions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoMode {
    /// Greedy with respect to hard-max value iteration on the true model.
    #[default]
    GreedyOptimal,
    /// Samples from the Boltzmann policy of the true soft plan.
    Boltzmann,
}

/// Ground-truth plans for every task of an environment.
#[derive(Clone, Debug)]
pub struct TeacherPlans {
    pub optimal: Vec<DeterministicPolicy>,
    pub soft: Vec<SoftPlan>,
}

impl TeacherPlans {
    /// `steps` soft backups with rationality `beta`; the optimal policies use
    /// hard backups over the evaluation horizon.
    pub fn new(env: &Environment, beta: f64, steps: usize) -> Result<Self, crate::error::MdpError> {
        let mut optimal = Vec::with_capacity(env.num_tasks());
        let mut soft = Vec::with_capacity(env.num_tasks());
        for cost in &env.true_costs {
            let q = hard_value_iteration(&env.true_model, cost, env.spec.horizon);
            optimal.push(DeterministicPolicy::from_q(&q, env.true_model.num_actions(), TieBreak::Random));
            soft.push(crate::mdp::soft_value_iteration(&env.true_model, cost, beta, steps)?);
        }
        Ok(Self { optimal, soft })
    }
}

/// Rolls out one demonstration of `task` from `start` on the true dynamics.
/// The demonstration stops once a goal state is reached and ends with the
/// synthetic no-op; every executed step is appended to `observed`.
pub fn simulate_demonstration<R: Rng>(
    env: &Environment,
    plans: &TeacherPlans,
    task: usize,
    start: usize,
    mode: DemoMode,
    rng: &mut R,
    observed: &mut Vec<Transition>,
) -> Demonstration {
    let boltzmann = match mode {
        DemoMode::Boltzmann => Some(crate::mdp::boltzmann_policy(&plans.soft[task])),
        DemoMode::GreedyOptimal => None,
    };
    let mut state = start;
    let mut steps = Vec::new();
    let mut truncated = true;
    for _ in 0..env.spec.horizon {
        if env.is_goal(task, state) {
            truncated = false;
            break;
        }
        let action = match &boltzmann {
            Some(pi) => <StochasticPolicy as Policy>::act(pi, state, rng),
            None => plans.optimal[task].act(state, rng),
        };
        let next = env.true_model.sample(state, action, rng);
        steps.push((state, action));
        observed.push(Transition { state, action, next });
        state = next;
    }
    if truncated && env.is_goal(task, state) {
        truncated = false;
    }
    Demonstration {
        task,
        steps,
        final_state: state,
        terminal_noop: true,
        truncated,
    }
}

/// States in which `action` is a greedy-optimal choice; used to sanity check
/// demonstrated paths.
pub fn is_optimal_action(plan_q: &[f64], num_actions: usize, state: usize, action: usize) -> bool {
    argmax_set(&plan_q[state * num_actions..(state + 1) * num_actions]).contains(&action)
}

pub const SYNTHETIC_NOOP: usize = NOOP;
