//! Joint maximum-likelihood estimation of dynamics parameters and per-task
//! cost parameters through differentiable soft value iteration.
//!
//! The objective is
//!
//! ```text
//! L = sum_i [ ln p(D_T^i | Q_i) + ln n(phi_i) ] + sum_{(s,a,s') in D_E} ln T(s,a,s') + ln m(theta)
//! ```
//!
//! where `Q_i` is the result of `steps` soft backups under `T_theta` and the
//! cost `C_phi_i`. Gradients come from exact differentiation of the
//! implemented recursion: a reverse sweep over the stored backups for
//! fitting, and a forward-mode sweep producing full Jacobian tensors for
//! inspection and testing. Both are checked against finite differences.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::dataset::{Signal, TeacherDataset};
use crate::domains::{CellCostModel, CostLink, DynamicsFamily};
use crate::error::{LearnError, MdpError};
use crate::exec::Exec;
use crate::mdp::{
    boltzmann_row, greedy_policy, soft_backups, soft_backups_flat, CostFunction, FlatModel, DeterministicPolicy, SoftPlan, SoftTrace, TieBreak,
    TransitionModel,
};
use crate::optim::{ascend, ascend_scaled, BlockReport};
use crate::teacher::{
    demo_log_likelihood, demo_log_likelihood_grad, feedback_log_likelihood_and_slope, feedback_log_likelihood_grad,
    advantage, FeedbackParams, PROB_FLOOR,
};

/// Everything about the teacher model and regularizers shared by all
/// learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub beta: f64,
    /// Soft backups per plan. `None` takes the environment default.
    pub steps: Option<usize>,
    pub feedback: FeedbackParams,
    /// Variance of the zero-mean Gaussian prior on theta; `None` is flat.
    pub theta_prior_variance: Option<f64>,
    /// Variance of the zero-mean Gaussian prior on each phi; `None` is flat.
    pub phi_prior_variance: Option<f64>,
    pub link: CostLink,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            beta: 5.0,
            steps: None,
            feedback: FeedbackParams::default(),
            theta_prior_variance: Some(10.0),
            phi_prior_variance: Some(10.0),
            link: CostLink::Softplus,
        }
    }
}

/// Alternating block-ascent schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub outer: usize,
    pub phi_steps: usize,
    pub theta_steps: usize,
    pub tol: f64,
    pub initial_step: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            outer: 20,
            phi_steps: 25,
            theta_steps: 25,
            tol: 1e-6,
            initial_step: 0.1,
        }
    }
}

/// Log-density (up to a constant) of a zero-mean Gaussian prior, and its
/// gradient accumulated into `grad`.
fn gaussian_prior(x: &[f64], variance: Option<f64>, grad: Option<&mut [f64]>) -> f64 {
    let Some(var) = variance else { return 0.0 };
    if let Some(g) = grad {
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi -= xi / var;
        }
    }
    -x.iter().map(|v| v * v).sum::<f64>() / (2.0 * var)
}

/// Demonstrations and feedback of one task, aggregated by record.
#[derive(Clone, Debug, Default)]
struct TaskData {
    demos: Vec<(usize, usize, f64)>,
    feedback: Vec<(usize, usize, Signal, f64)>,
}

fn aggregate<K: Ord + Copy>(keys: impl Iterator<Item = K>) -> Vec<(K, f64)> {
    let mut map = std::collections::BTreeMap::new();
    for k in keys {
        *map.entry(k).or_insert(0.0) += 1.0;
    }
    map.into_iter().collect()
}

fn signal_rank(s: Signal) -> u8 {
    match s {
        Signal::Positive => 0,
        Signal::Negative => 1,
        Signal::None => 2,
    }
}

/// Learner parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub theta: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    /// Task-shared cost parameters, present only for the global-cost learner.
    pub global: Option<Vec<f64>>,
}

impl Params {
    /// All-zero start.
    pub fn zeros(num_theta: usize, num_tasks: usize, num_phi: usize, global: bool) -> Self {
        Self {
            theta: vec![0.0; num_theta],
            phi: vec![vec![0.0; num_phi]; num_tasks],
            global: global.then(|| vec![0.0; num_phi]),
        }
    }

    fn cost_block(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.phi.iter().flatten().copied().collect();
        if let Some(g) = &self.global {
            v.extend_from_slice(g);
        }
        v
    }

    fn set_cost_block(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for phi in &mut self.phi {
            let n = phi.len();
            phi.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        if let Some(g) = &mut self.global {
            let n = g.len();
            g.copy_from_slice(&flat[offset..offset + n]);
        }
    }
}

/// Value of the objective and its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub theta: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub global: Option<Vec<f64>>,
    /// `D_E` transitions whose model probability fell below the floor.
    pub floored: usize,
}

/// Per-task contribution: log-likelihood and gradients.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Gradient {
    None,
    Costs,
    Full,
}

struct TaskTerms {
    value: f64,
    theta: Vec<f64>,
    cost: Vec<f64>,
}

/// A dataset bound to a model space, ready for repeated evaluation.
pub struct Problem<'a> {
    family: &'a DynamicsFamily,
    costs: &'a CellCostModel,
    config: &'a ModelConfig,
    steps: usize,
    tasks: Vec<TaskData>,
    transitions: Vec<((usize, usize, usize), f64)>,
    global_cost: bool,
    exec: Exec,
    /// Last built model, keyed by the theta it was built from.
    cache: Mutex<Option<(Vec<f64>, Arc<BuiltModel>)>>,
}

struct BuiltModel {
    model: TransitionModel,
    flat: FlatModel,
}

impl<'a> Problem<'a> {
    pub fn new(
        family: &'a DynamicsFamily,
        costs: &'a CellCostModel,
        config: &'a ModelConfig,
        steps: usize,
        data: &TeacherDataset,
    ) -> Self {
        let tasks = (0..data.num_tasks)
            .map(|i| TaskData {
                demos: aggregate(data.demos_for(i).map(|d| (d.state, d.action)))
                    .into_iter()
                    .map(|((s, a), n)| (s, a, n))
                    .collect(),
                feedback: aggregate(data.feedback_for(i).map(|f| (f.state, f.action, signal_rank(f.signal))))
                    .into_iter()
                    .map(|((s, a, r), n)| {
                        let sig = [Signal::Positive, Signal::Negative, Signal::None][r as usize];
                        (s, a, sig, n)
                    })
                    .collect(),
            })
            .collect();
        let transitions = aggregate(data.transitions.iter().map(|t| (t.state, t.action, t.next)));
        Self {
            family,
            costs,
            config,
            steps,
            tasks,
            transitions,
            global_cost: false,
            cache: Mutex::new(None),
            exec: Exec::Sequential,
        }
    }

    /// Adds a task-shared cost term to every task's cost.
    pub fn with_global_cost(mut self, on: bool) -> Self {
        self.global_cost = on;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn has_global_cost(&self) -> bool {
        self.global_cost
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn family(&self) -> &DynamicsFamily {
        self.family
    }

    pub fn initial_params(&self) -> Params {
        Params::zeros(
            self.family.num_params(),
            self.num_tasks(),
            self.costs.num_params(),
            self.global_cost,
        )
    }

    fn check(&self, params: &Params) -> Result<(), LearnError> {
        let mismatch = |what, expected, found| Err(LearnError::DimensionMismatch { what, expected, found });
        if params.theta.len() != self.family.num_params() {
            return mismatch("theta", self.family.num_params(), params.theta.len());
        }
        if params.phi.len() != self.num_tasks() {
            return mismatch("task count", self.num_tasks(), params.phi.len());
        }
        if params.global.is_some() != self.global_cost {
            return mismatch("global cost blocks", self.global_cost as usize, params.global.is_some() as usize);
        }
        Ok(())
    }

    fn task_cost(&self, params: &Params, task: usize) -> Result<CostFunction, MdpError> {
        match &params.global {
            Some(g) => self.costs.cost_with_global(&params.phi[task], g),
            None => self.costs.cost(&params.phi[task]),
        }
    }

    pub fn model(&self, params: &Params) -> Result<TransitionModel, LearnError> {
        let model = self.family.build(&params.theta)?;
        model.validate()?;
        Ok(model)
    }

    fn built(&self, theta: &[f64]) -> Result<Arc<BuiltModel>, LearnError> {
        let mut cache = self.cache.lock().expect("model cache poisoned");
        if let Some((key, built)) = cache.as_ref() {
            if key.iter().map(|v| v.to_bits()).eq(theta.iter().map(|v| v.to_bits())) {
                return Ok(built.clone());
            }
        }
        let model = self.family.build(theta)?;
        model.validate()?;
        let built = Arc::new(BuiltModel {
            flat: FlatModel::new(&model),
            model,
        });
        *cache = Some((theta.to_vec(), built.clone()));
        Ok(built)
    }

    /// Soft plan of every task under the current parameters.
    pub fn plans(&self, params: &Params) -> Result<Vec<SoftPlan>, LearnError> {
        self.check(params)?;
        let model = self.model(params)?;
        let out = self.exec.map_range(self.num_tasks(), |i| -> Result<SoftPlan, LearnError> {
            let cost = self.task_cost(params, i)?;
            cost.validate()?;
            Ok(soft_backups(&model, &cost, self.config.beta, self.steps, false).final_plan())
        });
        out.into_iter().collect()
    }

    /// `ln p(D_T^i | Q)` for a final Q table.
    fn teacher_log_likelihood(&self, task: usize, q: &[f64], na: usize) -> f64 {
        let data = &self.tasks[task];
        let beta = self.config.beta;
        let mut total = 0.0;
        for &(s, a, n) in &data.demos {
            total += n * demo_log_likelihood(&q[s * na..(s + 1) * na], a, beta);
        }
        for &(s, a, sig, n) in &data.feedback {
            let row = &q[s * na..(s + 1) * na];
            total += n * feedback_log_likelihood_and_slope(advantage(row, a), sig, &self.config.feedback).0;
        }
        total
    }

    /// `d ln p(D_T^i | Q) / d Q` for a final Q table.
    fn teacher_q_gradient(&self, task: usize, q: &[f64], na: usize) -> Vec<f64> {
        let data = &self.tasks[task];
        let mut g = vec![0.0; q.len()];
        for &(s, a, n) in &data.demos {
            demo_log_likelihood_grad(&q[s * na..(s + 1) * na], a, self.config.beta, n, &mut g[s * na..(s + 1) * na]);
        }
        for &(s, a, sig, n) in &data.feedback {
            let (row, out) = (&q[s * na..(s + 1) * na], &mut g[s * na..(s + 1) * na]);
            feedback_log_likelihood_grad(row, a, sig, &self.config.feedback, n, out);
        }
        g
    }

    fn task_terms(
        &self,
        model: &TransitionModel,
        flat: &FlatModel,
        params: &Params,
        task: usize,
        grad: Gradient,
    ) -> Result<TaskTerms, LearnError> {
        let cost = self.task_cost(params, task)?;
        cost.validate()?;
        let keep = grad != Gradient::None;
        let trace = soft_backups_flat(flat, cost.values(), self.config.beta, self.steps, keep);
        let q = trace.q.last().expect("at least one step");
        if let Some(step) = trace
            .q
            .iter()
            .position(|qt| qt.iter().any(|v| !v.is_finite()))
        {
            return Err(MdpError::NonFiniteStep { step: step + 1 }.into());
        }
        let na = model.num_actions();
        let value = self.teacher_log_likelihood(task, q, na);
        if !keep {
            return Ok(TaskTerms {
                value,
                theta: Vec::new(),
                cost: Vec::new(),
            });
        }
        let gq = self.teacher_q_gradient(task, q, na);
        let model = (grad == Gradient::Full).then_some(model);
        let (theta, cost_grad) = reverse_sweep(flat, model, &cost, &trace, gq);
        Ok(TaskTerms {
            value,
            theta,
            cost: cost_grad,
        })
    }

    /// Objective value, with gradients when `grad` is set.
    pub fn evaluate(&self, params: &Params, grad: bool) -> Result<Evaluation, LearnError> {
        self.evaluate_terms(params, if grad { Gradient::Full } else { Gradient::None }, true)
    }

    /// The objective without the terms that depend on theta alone (the `D_E`
    /// likelihood and the theta prior). Those are constant while only cost
    /// parameters move, so cost-block ascent uses this form; it makes a fit
    /// with frozen dynamics independent of how the dynamics are represented.
    /// The returned theta gradient is empty.
    pub fn cost_objective(&self, params: &Params, grad: bool) -> Result<Evaluation, LearnError> {
        self.evaluate_terms(params, if grad { Gradient::Costs } else { Gradient::None }, false)
    }

    fn evaluate_terms(&self, params: &Params, mode: Gradient, dynamics_terms: bool) -> Result<Evaluation, LearnError> {
        self.check(params)?;
        let built = self.built(&params.theta)?;
        let (model, flat) = (&built.model, &built.flat);
        let terms: Vec<Result<TaskTerms, LearnError>> =
            self.exec.map_range(self.num_tasks(), |i| self.task_terms(model, flat, params, i, mode));
        let grad = mode != Gradient::None;
        let nphi = self.costs.num_params();
        let mut eval = Evaluation {
            value: 0.0,
            theta: vec![0.0; if mode == Gradient::Full { params.theta.len() } else { 0 }],
            phi: Vec::with_capacity(self.num_tasks()),
            global: (grad && self.global_cost).then(|| vec![0.0; nphi]),
            floored: 0,
        };
        for (i, t) in terms.into_iter().enumerate() {
            let t = t?;
            eval.value += t.value;
            if grad {
                for (a, b) in eval.theta.iter_mut().zip(&t.theta) {
                    *a += b;
                }
                let mut phi_grad = t.cost[..nphi].to_vec();
                eval.value += gaussian_prior(&params.phi[i], self.config.phi_prior_variance, Some(&mut phi_grad));
                if let Some(g) = &mut eval.global {
                    for (a, b) in g.iter_mut().zip(&t.cost[nphi..]) {
                        *a += b;
                    }
                }
                eval.phi.push(phi_grad);
            } else {
                eval.value += gaussian_prior(&params.phi[i], self.config.phi_prior_variance, None);
            }
        }
        if let Some(global) = &params.global {
            eval.value += gaussian_prior(global, self.config.phi_prior_variance, eval.global.as_deref_mut());
        }
        if dynamics_terms {
            let (ll, floored) =
                transition_log_likelihood(model, &self.transitions, grad.then_some(&mut eval.theta[..]));
            eval.value += ll;
            eval.floored = floored;
            eval.value += gaussian_prior(
                &params.theta,
                self.config.theta_prior_variance,
                grad.then_some(&mut eval.theta[..]),
            );
        }
        Ok(eval)
    }

    /// Diagonal preconditioner for theta ascent: the inverse of a curvature
    /// bound built from the number of `D_E` records each parameter explains,
    /// plus the prior precision and one unit for teacher data.
    pub fn theta_scale(&self, params: &Params) -> Result<Vec<f64>, LearnError> {
        let model = self.model(params)?;
        let mut counts = vec![0.0; model.num_params()];
        let mut touched = Vec::new();
        for &((s, a, _), n) in &self.transitions {
            touched.clear();
            for o in model.support(s, a) {
                touched.extend(o.dprob.iter().map(|&(k, _)| k));
            }
            touched.sort_unstable();
            touched.dedup();
            for &k in &touched {
                counts[k] += n;
            }
        }
        let precision = self.config.theta_prior_variance.map_or(0.0, |v| 1.0 / v);
        Ok(counts.into_iter().map(|n| 1.0 / (precision + 0.25 * n + 1.0)).collect())
    }

    pub fn objective(&self, params: &Params) -> Result<f64, LearnError> {
        Ok(self.evaluate(params, false)?.value)
    }

    /// Gradient of `ln p(D_T^i | Q_i)` alone with respect to theta and the
    /// task's cost parameters (including the global block when present).
    pub fn teacher_data_gradient(&self, params: &Params, task: usize) -> Result<(Vec<f64>, Vec<f64>), LearnError> {
        self.check(params)?;
        let model = self.model(params)?;
        let t = self.task_terms(&model, &FlatModel::new(&model), params, task, Gradient::Full)?;
        Ok((t.theta, t.cost))
    }
}

/// `sum n ln T(s,a,s')` over aggregated transitions, with the gradient with
/// respect to theta accumulated into `grad`.
fn transition_log_likelihood(
    model: &TransitionModel,
    transitions: &[((usize, usize, usize), f64)],
    mut grad: Option<&mut [f64]>,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut floored = 0;
    for &((s, a, next), n) in transitions {
        let outcome = model.support(s, a).iter().find(|o| o.next == next);
        match outcome {
            Some(o) if o.prob >= PROB_FLOOR => {
                total += n * o.prob.ln();
                if let Some(g) = grad.as_deref_mut() {
                    for &(k, d) in &o.dprob {
                        g[k] += n * d / o.prob;
                    }
                }
            }
            _ => {
                total += n * PROB_FLOOR.ln();
                floored += n as usize;
            }
        }
    }
    (total, floored)
}

/// Reverse sweep through stored soft backups. Given `d L / d Q_final`,
/// returns `d L / d theta` and `d L / d phi` (indexed like the cost's
/// Jacobian).
pub fn backpropagate(
    model: &TransitionModel,
    cost: &CostFunction,
    trace: &SoftTrace,
    grad_q_final: Vec<f64>,
) -> (Vec<f64>, Vec<f64>) {
    reverse_sweep(&FlatModel::new(model), Some(model), cost, trace, grad_q_final)
}

/// Reverse sweep; theta derivatives are accumulated only when `model` is
/// given.
fn reverse_sweep(
    flat: &FlatModel,
    model: Option<&TransitionModel>,
    cost: &CostFunction,
    trace: &SoftTrace,
    grad_q_final: Vec<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let ns = flat.num_states;
    let na = flat.num_actions;
    let mut d_theta = vec![0.0; model.map_or(0, |m| m.num_params())];
    let mut d_cost = vec![0.0; cost.num_params()];
    let mut bar_q = grad_q_final;
    let mut bar_v = vec![0.0; ns];
    for t in (0..trace.steps()).rev() {
        // trace.q[t] is Q_{t+1} = -C + T V_t with V_t = trace.v[t].
        let v_prev = &trace.v[t];
        bar_v.iter_mut().for_each(|b| *b = 0.0);
        for s in 0..ns {
            let row_bar = &bar_q[s * na..(s + 1) * na];
            let total: f64 = row_bar.iter().sum();
            if total != 0.0 {
                for &(k, d) in cost.gradient(s) {
                    d_cost[k] -= total * d;
                }
            }
            for (a, &g) in row_bar.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let (next, prob) = flat.row(s * na + a);
                for (n, p) in next.iter().zip(prob) {
                    bar_v[*n] += g * p;
                }
                if let Some(m) = model {
                    for o in m.support(s, a) {
                        let w = g * v_prev[o.next];
                        for &(k, d) in &o.dprob {
                            d_theta[k] += w * d;
                        }
                    }
                }
            }
        }
        if t == 0 {
            break;
        }
        let dvdq = &trace.dvdq[t - 1];
        for s in 0..ns {
            let b = bar_v[s];
            for a in 0..na {
                bar_q[s * na + a] = b * dvdq[s * na + a];
            }
        }
    }
    (d_theta, d_cost)
}

/// Full Jacobians of the final Q and V tables.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTensors {
    /// `[state][action][theta]`
    pub dq_theta: Vec<f64>,
    /// `[state][action][phi]`
    pub dq_phi: Vec<f64>,
    /// `[state][theta]`
    pub dv_theta: Vec<f64>,
    /// `[state][phi]`
    pub dv_phi: Vec<f64>,
    pub num_theta: usize,
    pub num_phi: usize,
}

impl GradientTensors {
    pub fn dq_dtheta(&self, state: usize, action: usize, num_actions: usize, k: usize) -> f64 {
        self.dq_theta[(state * num_actions + action) * self.num_theta + k]
    }

    pub fn dq_dphi(&self, state: usize, action: usize, num_actions: usize, k: usize) -> f64 {
        self.dq_phi[(state * num_actions + action) * self.num_phi + k]
    }
}

/// Soft value iteration with forward-accumulated parameter derivatives.
/// Memory is `states * actions * params`; intended for small models.
pub fn plan_with_gradients(
    model: &TransitionModel,
    cost: &CostFunction,
    beta: f64,
    steps: usize,
) -> Result<(SoftPlan, GradientTensors), MdpError> {
    crate::mdp::soft_value_iteration(model, cost, beta, 1)?; // input validation only
    let ns = model.num_states();
    let na = model.num_actions();
    let (pt, pp) = (model.num_params(), cost.num_params());
    let mut v = vec![0.0; ns];
    let mut dv_t = vec![0.0; ns * pt];
    let mut dv_p = vec![0.0; ns * pp];
    let mut q = vec![0.0; ns * na];
    let mut dq_t = vec![0.0; ns * na * pt];
    let mut dq_p = vec![0.0; ns * na * pp];
    let mut weights = vec![0.0; na];
    for step in 1..=steps {
        for s in 0..ns {
            for a in 0..na {
                let i = s * na + a;
                let mut acc = -cost.cost(s);
                let qt = &mut dq_t[i * pt..(i + 1) * pt];
                let qp = &mut dq_p[i * pp..(i + 1) * pp];
                qt.iter_mut().for_each(|x| *x = 0.0);
                qp.iter_mut().for_each(|x| *x = 0.0);
                for &(k, d) in cost.gradient(s) {
                    qp[k] -= d;
                }
                for o in model.support(s, a) {
                    acc += o.prob * v[o.next];
                    for &(k, d) in &o.dprob {
                        qt[k] += d * v[o.next];
                    }
                    for k in 0..pt {
                        qt[k] += o.prob * dv_t[o.next * pt + k];
                    }
                    for k in 0..pp {
                        qp[k] += o.prob * dv_p[o.next * pp + k];
                    }
                }
                q[i] = acc;
            }
        }
        let mut new_v = vec![0.0; ns];
        for s in 0..ns {
            let row = &q[s * na..(s + 1) * na];
            let vs = boltzmann_row(row, beta, &mut weights);
            new_v[s] = vs;
            let dt = &mut dv_t[s * pt..(s + 1) * pt];
            dt.iter_mut().for_each(|x| *x = 0.0);
            let dp = &mut dv_p[s * pp..(s + 1) * pp];
            dp.iter_mut().for_each(|x| *x = 0.0);
            for a in 0..na {
                let w = weights[a] * (1.0 + beta * (row[a] - vs));
                let i = s * na + a;
                for k in 0..pt {
                    dt[k] += w * dq_t[i * pt + k];
                }
                for k in 0..pp {
                    dp[k] += w * dq_p[i * pp + k];
                }
            }
        }
        if q.iter().chain(&new_v).any(|x| !x.is_finite()) {
            return Err(MdpError::NonFiniteStep { step });
        }
        v = new_v;
    }
    Ok((
        SoftPlan {
            q,
            v,
            beta,
            steps,
            num_actions: na,
        },
        GradientTensors {
            dq_theta: dq_t,
            dq_phi: dq_p,
            dv_theta: dv_t,
            dv_phi: dv_p,
            num_theta: pt,
            num_phi: pp,
        },
    ))
}

/// Step sizes and counters carried across fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub theta_step: f64,
    pub phi_step: f64,
    pub outer_iterations: usize,
    pub fits: usize,
    pub last_objective: Option<f64>,
}

impl OptimizerState {
    pub fn new(initial_step: f64) -> Self {
        Self {
            theta_step: initial_step,
            phi_step: initial_step,
            outer_iterations: 0,
            fits: 0,
            last_objective: None,
        }
    }
}

/// Parameters plus optimizer bookkeeping; plans are cached until the
/// parameters change.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LearnerState {
    params: Params,
    pub optimizer: OptimizerState,
    #[serde(skip)]
    plans: Option<Vec<SoftPlan>>,
}

impl PartialEq for LearnerState {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.optimizer == other.optimizer
    }
}

impl LearnerState {
    pub fn new(params: Params, schedule: &Schedule) -> Self {
        Self {
            params,
            optimizer: OptimizerState::new(schedule.initial_step),
            plans: None,
        }
    }

    pub fn from_parts(params: Params, optimizer: OptimizerState) -> Self {
        Self {
            params,
            optimizer,
            plans: None,
        }
    }

    pub fn into_parts(self) -> (Params, OptimizerState) {
        (self.params, self.optimizer)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn set_params(&mut self, params: Params) {
        self.params = params;
        self.plans = None;
    }

    pub fn theta(&self) -> &[f64] {
        &self.params.theta
    }

    pub fn phi(&self) -> &[Vec<f64>] {
        &self.params.phi
    }

    /// Soft plans for every task, computed on first use.
    pub fn plans(&mut self, problem: &Problem) -> Result<&[SoftPlan], LearnError> {
        if self.plans.is_none() {
            self.plans = Some(problem.plans(&self.params)?);
        }
        Ok(self.plans.as_deref().expect("just filled"))
    }

    /// Greedy policy for every task.
    pub fn policies(&mut self, problem: &Problem) -> Result<Vec<DeterministicPolicy>, LearnError> {
        Ok(self
            .plans(problem)?
            .iter()
            .map(|p| greedy_policy(p, TieBreak::Random))
            .collect())
    }
}

/// Which parameter blocks a fit may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Blocks {
    pub theta: bool,
    pub costs: bool,
}

impl Blocks {
    pub const BOTH: Blocks = Blocks {
        theta: true,
        costs: true,
    };
    pub const COSTS: Blocks = Blocks {
        theta: false,
        costs: true,
    };
    pub const THETA: Blocks = Blocks {
        theta: true,
        costs: false,
    };
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub outer_iterations: usize,
    pub blocks: Vec<BlockReport>,
    pub start_value: f64,
    pub end_value: f64,
}

/// Alternating ascent: `phi_steps` on the cost block with theta frozen, then
/// `theta_steps` on theta with costs frozen, until an outer round gains less
/// than `tol` (relative) or `outer` rounds pass.
pub fn fit(state: &mut LearnerState, problem: &Problem, schedule: &Schedule, blocks: Blocks) -> Result<FitReport, LearnError> {
    let mut params = state.params.clone();
    let start_value = problem.objective(&params)?;
    if !start_value.is_finite() {
        return Err(LearnError::Diverged { iterations: 0 });
    }
    let mut report = FitReport {
        start_value,
        ..FitReport::default()
    };
    let result = (|| -> Result<(), LearnError> {
        for _ in 0..schedule.outer {
            let mut gain = 0.0;
            let mut level: f64 = 0.0;
            if blocks.costs {
                let mut x = params.cost_block();
                let base = params.clone();
                let r = ascend(
                    &mut x,
                    |flat| {
                        let mut p = base.clone();
                        p.set_cost_block(flat);
                        let e = problem.cost_objective(&p, true)?;
                        let mut g: Vec<f64> = e.phi.into_iter().flatten().collect();
                        if let Some(gg) = e.global {
                            g.extend(gg);
                        }
                        Ok((e.value, g))
                    },
                    schedule.phi_steps,
                    &mut state.optimizer.phi_step,
                    schedule.tol,
                )?;
                params.set_cost_block(&x);
                gain += r.end_value - r.start_value;
                level = r.end_value;
                report.blocks.push(r);
            }
            if blocks.theta && !params.theta.is_empty() {
                let mut x = params.theta.clone();
                let base = params.clone();
                let scale = problem.theta_scale(&params)?;
                let r = ascend_scaled(
                    &mut x,
                    |theta| {
                        let mut p = base.clone();
                        p.theta.copy_from_slice(theta);
                        let e = problem.evaluate(&p, true)?;
                        Ok((e.value, e.theta))
                    },
                    Some(&scale),
                    schedule.theta_steps,
                    &mut state.optimizer.theta_step,
                    schedule.tol,
                )?;
                params.theta = x;
                gain += r.end_value - r.start_value;
                level = r.end_value;
                report.blocks.push(r);
            }
            report.outer_iterations += 1;
            state.optimizer.outer_iterations += 1;
            if gain <= schedule.tol * level.abs().max(1.0) {
                break;
            }
        }
        Ok(())
    })();
    // Keep the last accepted iterate even when a later evaluation failed.
    let end_value = problem.objective(&params).unwrap_or(f64::NAN);
    state.set_params(params);
    state.optimizer.fits += 1;
    state.optimizer.last_objective = Some(end_value).filter(|v| v.is_finite());
    report.end_value = end_value;
    result.map(|_| report)
}
