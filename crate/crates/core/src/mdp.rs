//! Finite MDPs, soft value iteration and policy evaluation.
//!
//! Transition models are stored sparsely: each `(state, action)` row holds its
//! successor outcomes, and every outcome carries the derivative of its
//! probability with respect to the model parameters that produced it. Models
//! built directly from known probabilities simply carry empty derivative lists.

use rand::Rng;

use crate::error::MdpError;

/// Row-sum tolerance accepted for transition models.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// One successor of a `(state, action)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub prob: f64,
    /// Sparse `d prob / d theta_k` entries as `(k, derivative)`.
    pub dprob: Vec<(usize, f64)>,
}

impl Outcome {
    pub fn fixed(next: usize, prob: f64) -> Self {
        Self {
            next,
            prob,
            dprob: Vec::new(),
        }
    }
}

/// Per-action display names plus the designated no-op.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionSpace {
    pub labels: Vec<String>,
    pub noop: usize,
}

impl ActionSpace {
    pub fn new(labels: Vec<String>, noop: usize) -> Self {
        assert!(noop < labels.len(), "no-op index out of range");
        Self { labels, noop }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sparse tabular transition model `T(s, a, s')`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionModel {
    num_states: usize,
    num_actions: usize,
    num_params: usize,
    rows: Vec<Vec<Outcome>>,
}

impl TransitionModel {
    /// Every row starts empty; fill them with [`TransitionModel::set_row`].
    pub fn new(num_states: usize, num_actions: usize, num_params: usize) -> Self {
        Self {
            num_states,
            num_actions,
            num_params,
            rows: vec![Vec::new(); num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Dimension of the parameter vector the derivative entries index into.
    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Installs a row, merging outcomes that share a successor and dropping
    /// outcomes with zero probability and zero derivative.
    pub fn set_row(&mut self, state: usize, action: usize, outcomes: Vec<Outcome>) {
        let mut merged: Vec<Outcome> = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            if let Some(existing) = merged.iter_mut().find(|m| m.next == o.next) {
                existing.prob += o.prob;
                for (k, d) in o.dprob {
                    add_sparse(&mut existing.dprob, k, d);
                }
            } else {
                let mut fresh = Outcome {
                    next: o.next,
                    prob: o.prob,
                    dprob: Vec::with_capacity(o.dprob.len()),
                };
                for (k, d) in o.dprob {
                    add_sparse(&mut fresh.dprob, k, d);
                }
                merged.push(fresh);
            }
        }
        merged.retain(|o| o.prob != 0.0 || o.dprob.iter().any(|&(_, d)| d != 0.0));
        merged.sort_by_key(|o| o.next);
        let idx = self.index(state, action);
        self.rows[idx] = merged;
    }

    #[inline]
    fn index(&self, state: usize, action: usize) -> usize {
        state * self.num_actions + action
    }

    /// Successors of `(state, action)`, including zero-probability entries
    /// that still carry a parameter derivative.
    #[inline]
    pub fn support(&self, state: usize, action: usize) -> &[Outcome] {
        &self.rows[self.index(state, action)]
    }

    pub fn prob(&self, state: usize, action: usize, next: usize) -> f64 {
        self.support(state, action)
            .iter()
            .find(|o| o.next == next)
            .map_or(0.0, |o| o.prob)
    }

    /// `d ln T(s, a, s') / d theta` as sparse entries. Empty when the
    /// transition has zero probability.
    pub fn dln_prob(&self, state: usize, action: usize, next: usize) -> Vec<(usize, f64)> {
        match self.support(state, action).iter().find(|o| o.next == next) {
            Some(o) if o.prob > 0.0 => o.dprob.iter().map(|&(k, d)| (k, d / o.prob)).collect(),
            _ => Vec::new(),
        }
    }

    /// Checks that every row is a probability distribution.
    pub fn validate(&self) -> Result<(), MdpError> {
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let mut total = 0.0;
                for o in self.support(s, a) {
                    if !(0.0..=1.0).contains(&o.prob) || o.next >= self.num_states {
                        return Err(MdpError::InvalidProbability {
                            state: s,
                            action: a,
                            next: o.next,
                            prob: o.prob,
                        });
                    }
                    total += o.prob;
                }
                if (total - 1.0).abs() > NORMALIZATION_TOL {
                    return Err(MdpError::UnnormalizedRow {
                        state: s,
                        action: a,
                        sum: total,
                    });
                }
            }
        }
        Ok(())
    }

    /// Copy of this model with all parameter derivatives removed.
    pub fn without_params(&self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .filter(|o| o.prob > 0.0)
                    .map(|o| Outcome::fixed(o.next, o.prob))
                    .collect()
            })
            .collect();
        Self {
            num_states: self.num_states,
            num_actions: self.num_actions,
            num_params: 0,
            rows,
        }
    }

    /// True when every action leaves the state in place with probability one.
    pub fn is_absorbing(&self, state: usize) -> bool {
        (0..self.num_actions).all(|a| {
            let support = self.support(state, a);
            support
                .iter()
                .filter(|o| o.prob > 0.0)
                .all(|o| o.next == state && (o.prob - 1.0).abs() <= NORMALIZATION_TOL)
        })
    }

    /// Samples a successor using a single uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        let support = self.support(state, action);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = state;
        for o in support {
            if o.prob <= 0.0 {
                continue;
            }
            acc += o.prob;
            last = o.next;
            if u < acc {
                return o.next;
            }
        }
        last
    }
}

fn add_sparse(entries: &mut Vec<(usize, f64)>, k: usize, d: f64) {
    if let Some(e) = entries.iter_mut().find(|e| e.0 == k) {
        e.1 += d;
    } else {
        entries.push((k, d));
    }
}

/// State cost `C(s)` together with its sparse parameter Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct CostFunction {
    values: Vec<f64>,
    jacobian: Vec<Vec<(usize, f64)>>,
    num_params: usize,
}

impl CostFunction {
    /// A cost with no parameters.
    pub fn fixed(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            jacobian: vec![Vec::new(); n],
            num_params: 0,
        }
    }

    pub fn with_jacobian(values: Vec<f64>, jacobian: Vec<Vec<(usize, f64)>>, num_params: usize) -> Self {
        assert_eq!(values.len(), jacobian.len());
        Self {
            values,
            jacobian,
            num_params,
        }
    }

    #[inline]
    pub fn cost(&self, state: usize) -> f64 {
        self.values[state]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `d C(s) / d phi` as sparse entries.
    #[inline]
    pub fn gradient(&self, state: usize) -> &[(usize, f64)] {
        &self.jacobian[state]
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn num_states(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        match self.values.iter().position(|c| !c.is_finite()) {
            Some(state) => Err(MdpError::NonFiniteCost {
                state,
                value: self.values[state],
            }),
            None => Ok(()),
        }
    }
}

/// Result of `steps` soft Bellman backups.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPlan {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub beta: f64,
    pub steps: usize,
    pub num_actions: usize,
}

impl SoftPlan {
    #[inline]
    pub fn q_row(&self, state: usize) -> &[f64] {
        &self.q[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn num_states(&self) -> usize {
        self.v.len()
    }
}

/// Every intermediate `Q_t` and `V_t` of a soft value iteration run, kept for
/// reverse-mode differentiation. `v[0]` is the all-zero base case.
#[derive(Clone, Debug)]
pub struct SoftTrace {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// `dvdq[t]` holds `d V / d Q` at the step that produced `q[t]`.
    pub dvdq: Vec<Vec<f64>>,
    pub beta: f64,
    pub num_actions: usize,
}

impl SoftTrace {
    pub fn steps(&self) -> usize {
        self.q.len()
    }

    pub fn final_plan(&self) -> SoftPlan {
        SoftPlan {
            q: self.q.last().cloned().unwrap_or_default(),
            v: self.v.last().cloned().unwrap_or_default(),
            beta: self.beta,
            steps: self.q.len(),
            num_actions: self.num_actions,
        }
    }
}

/// Boltzmann weights of a Q row written into `out`; returns the weighted mean.
#[inline]
pub fn boltzmann_row(q_row: &[f64], beta: f64, out: &mut [f64]) -> f64 {
    let max = q_row.iter().fold(f64::NEG_INFINITY, |m, &q| m.max(beta * q));
    let mut z = 0.0;
    for (o, &q) in out.iter_mut().zip(q_row) {
        let e = (beta * q - max).exp();
        *o = e;
        z += e;
    }
    let mut mean = 0.0;
    for (o, &q) in out.iter_mut().zip(q_row) {
        *o /= z;
        mean += *o * q;
    }
    mean
}

fn check_inputs(model: &TransitionModel, cost: &CostFunction, beta: f64, steps: usize) -> Result<(), MdpError> {
    if steps == 0 {
        return Err(MdpError::ZeroSteps);
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(MdpError::InvalidBeta(beta));
    }
    if cost.num_states() != model.num_states() {
        return Err(MdpError::DimensionMismatch {
            what: "cost states",
            expected: model.num_states(),
            found: cost.num_states(),
        });
    }
    cost.validate()?;
    model.validate()
}

/// Soft value iteration from `V_0 = 0`, keeping every step.
pub fn soft_value_iteration_traced(
    model: &TransitionModel,
    cost: &CostFunction,
    beta: f64,
    steps: usize,
) -> Result<SoftTrace, MdpError> {
    check_inputs(model, cost, beta, steps)?;
    Ok(soft_backups(model, cost, beta, steps, true))
}

/// Soft value iteration: `steps` backups from `V_0 = 0`.
pub fn soft_value_iteration(
    model: &TransitionModel,
    cost: &CostFunction,
    beta: f64,
    steps: usize,
) -> Result<SoftPlan, MdpError> {
    check_inputs(model, cost, beta, steps)?;
    Ok(soft_backups(model, cost, beta, steps, false).final_plan())
}

/// Successor lists of a model packed into contiguous arrays.
pub(crate) struct FlatModel {
    offsets: Vec<usize>,
    next: Vec<usize>,
    prob: Vec<f64>,
    pub(crate) num_states: usize,
    pub(crate) num_actions: usize,
}

impl FlatModel {
    pub(crate) fn new(model: &TransitionModel) -> Self {
        let rows = model.num_states() * model.num_actions();
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut next = Vec::new();
        let mut prob = Vec::new();
        offsets.push(0);
        for s in 0..model.num_states() {
            for a in 0..model.num_actions() {
                for o in model.support(s, a) {
                    next.push(o.next);
                    prob.push(o.prob);
                }
                offsets.push(next.len());
            }
        }
        Self {
            offsets,
            next,
            prob,
            num_states: model.num_states(),
            num_actions: model.num_actions(),
        }
    }

    /// Successors and probabilities of row `state * num_actions + action`.
    #[inline]
    pub(crate) fn row(&self, index: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.offsets[index], self.offsets[index + 1]);
        (&self.next[a..b], &self.prob[a..b])
    }
}

/// Unchecked backups; callers validate once and reuse the model. Without
/// `keep_all` only the final `Q` and `V` are retained.
pub(crate) fn soft_backups(
    model: &TransitionModel,
    cost: &CostFunction,
    beta: f64,
    steps: usize,
    keep_all: bool,
) -> SoftTrace {
    soft_backups_flat(&FlatModel::new(model), cost.values(), beta, steps, keep_all)
}

pub(crate) fn soft_backups_flat(model: &FlatModel, cost: &[f64], beta: f64, steps: usize, keep_all: bool) -> SoftTrace {
    let ns = model.num_states;
    let na = model.num_actions;
    let cap = if keep_all { steps } else { 1 };
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(cap + 1);
    let mut qs: Vec<Vec<f64>> = Vec::with_capacity(cap);
    let mut dvdq: Vec<Vec<f64>> = Vec::with_capacity(if keep_all { steps } else { 0 });
    let mut weights = vec![0.0; na];
    let mut prev = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    let mut v = vec![0.0; ns];
    if keep_all {
        vs.push(prev.clone());
    }
    for step in 0..steps {
        let mut d = if keep_all { vec![0.0; ns * na] } else { Vec::new() };
        for s in 0..ns {
            let c = cost[s];
            let row = &mut q[s * na..(s + 1) * na];
            for (a, qa) in row.iter_mut().enumerate() {
                let (next, prob) = model.row(s * na + a);
                let mut acc = -c;
                for (n, p) in next.iter().zip(prob) {
                    acc += p * prev[*n];
                }
                *qa = acc;
            }
            let value = boltzmann_row(row, beta, &mut weights);
            v[s] = value;
            if keep_all {
                // d V(s) / d Q(s, a) = pi(s, a) (1 + beta (Q(s, a) - V(s)))
                for a in 0..na {
                    d[s * na + a] = weights[a] * (1.0 + beta * (row[a] - value));
                }
            }
        }
        if keep_all {
            qs.push(q.clone());
            vs.push(v.clone());
            dvdq.push(d);
        } else if step + 1 == steps {
            qs.push(q.clone());
            vs.push(v.clone());
        }
        std::mem::swap(&mut prev, &mut v);
    }
    if vs.is_empty() {
        vs.push(prev);
    }
    SoftTrace {
        q: qs,
        v: vs,
        dvdq,
        beta,
        num_actions: na,
    }
}

/// Standard (hard-max) finite-horizon value iteration from `V_0 = 0`.
/// Returns the final Q table.
pub fn hard_value_iteration(model: &TransitionModel, cost: &CostFunction, steps: usize) -> Vec<f64> {
    let ns = model.num_states();
    let na = model.num_actions();
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    for _ in 0..steps {
        for s in 0..ns {
            let c = cost.cost(s);
            for a in 0..na {
                let mut acc = -c;
                for o in model.support(s, a) {
                    acc += o.prob * v[o.next];
                }
                q[s * na + a] = acc;
            }
        }
        for s in 0..ns {
            v[s] = q[s * na..(s + 1) * na]
                .iter()
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        }
    }
    q
}

/// Per-state action distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticPolicy {
    pub probs: Vec<f64>,
    pub num_actions: usize,
}

impl StochasticPolicy {
    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.num_actions..(state + 1) * self.num_actions]
    }
}

/// `p(a|s) ∝ exp(beta Q(s, a))` for every state of a plan.
pub fn boltzmann_policy(plan: &SoftPlan) -> StochasticPolicy {
    let na = plan.num_actions;
    let mut probs = vec![0.0; plan.q.len()];
    for s in 0..plan.num_states() {
        boltzmann_row(plan.q_row(s), plan.beta, &mut probs[s * na..(s + 1) * na]);
    }
    StochasticPolicy {
        probs,
        num_actions: na,
    }
}

/// How ties between maximizing actions are resolved at execution time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieBreak {
    /// Uniform draw among maximizers.
    #[default]
    Random,
    /// Lowest action index among maximizers.
    First,
}

/// Greedy policy over a Q table; each state keeps its full set of maximizers.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicPolicy {
    maximizers: Vec<Vec<usize>>,
    tie_break: TieBreak,
}

/// Actions whose value is within a scale-relative tolerance of the row max.
pub fn argmax_set(row: &[f64]) -> Vec<usize> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let tol = 1e-9 * (1.0 + max.abs());
    row.iter()
        .enumerate()
        .filter(|(_, &x)| x >= max - tol)
        .map(|(a, _)| a)
        .collect()
}

impl DeterministicPolicy {
    pub fn from_q(q: &[f64], num_actions: usize, tie_break: TieBreak) -> Self {
        let maximizers = q.chunks(num_actions).map(argmax_set).collect();
        Self {
            maximizers,
            tie_break,
        }
    }

    pub fn num_states(&self) -> usize {
        self.maximizers.len()
    }

    pub fn maximizers(&self, state: usize) -> &[usize] {
        &self.maximizers[state]
    }

    pub fn tie_break(&self) -> TieBreak {
        self.tie_break
    }

    /// Action when the state has a unique maximizer.
    pub fn unique_action(&self, state: usize) -> Option<usize> {
        match self.maximizers[state].as_slice() {
            [a] => Some(*a),
            _ => None,
        }
    }
}

/// Greedy policy of a soft plan.
pub fn greedy_policy(plan: &SoftPlan, tie_break: TieBreak) -> DeterministicPolicy {
    DeterministicPolicy::from_q(&plan.q, plan.num_actions, tie_break)
}

/// Anything that picks an action in a state.
pub trait Policy {
    fn act(&self, state: usize, rng: &mut dyn rand::RngCore) -> usize;
}

impl Policy for DeterministicPolicy {
    fn act(&self, state: usize, rng: &mut dyn rand::RngCore) -> usize {
        let set = &self.maximizers[state];
        match (set.len(), self.tie_break) {
            (1, _) | (_, TieBreak::First) => set[0],
            (n, TieBreak::Random) => set[rng.gen_range(0..n)],
        }
    }
}

impl Policy for StochasticPolicy {
    fn act(&self, state: usize, rng: &mut dyn rand::RngCore) -> usize {
        let row = self.row(state);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        row.len() - 1
    }
}

/// Weighted distribution over initial states.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialDistribution {
    entries: Vec<(usize, f64)>,
    total: f64,
}

impl InitialDistribution {
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self, MdpError> {
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if entries.is_empty() || !(total > 0.0) {
            return Err(MdpError::EmptyInitialDistribution);
        }
        Ok(Self { entries, total })
    }

    pub fn uniform(states: &[usize]) -> Result<Self, MdpError> {
        Self::new(states.iter().map(|&s| (s, 1.0)).collect())
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(move |&(s, w)| (s, w / self.total))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen::<f64>() * self.total;
        let mut acc = 0.0;
        for &(s, w) in &self.entries {
            acc += w;
            if u < acc {
                return s;
            }
        }
        self.entries.last().expect("non-empty").0
    }
}

/// Monte-Carlo estimate of an undiscounted return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReturnEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub episodes: usize,
}

/// Mean of `sum_t -C(s_t)` over `episodes` rollouts truncated at `horizon`.
/// Once an absorbing state is reached the rest of the episode is added in
/// closed form. All start states are drawn before any action, so policies
/// evaluated with equal streams see the same starts.
pub fn evaluate_policy<P: Policy + ?Sized, R: rand::RngCore>(
    policy: &P,
    model: &TransitionModel,
    cost: &CostFunction,
    episodes: usize,
    horizon: usize,
    initial: &InitialDistribution,
    rng: &mut R,
) -> Result<ReturnEstimate, MdpError> {
    if episodes == 0 || horizon == 0 {
        return Err(MdpError::ZeroSteps);
    }
    let absorbing: Vec<bool> = (0..model.num_states()).map(|s| model.is_absorbing(s)).collect();
    let starts: Vec<usize> = (0..episodes).map(|_| initial.sample(rng)).collect();
    let mut returns = Vec::with_capacity(episodes);
    for mut s in starts {
        let mut total = 0.0;
        for t in 0..horizon {
            if absorbing[s] {
                total -= cost.cost(s) * (horizon - t) as f64;
                break;
            }
            total -= cost.cost(s);
            let a = policy.act(s, rng);
            s = model.sample(s, a, rng);
        }
        returns.push(total);
    }
    Ok(summarize(&returns))
}

/// Mean and standard error of the mean.
pub fn summarize(values: &[f64]) -> ReturnEstimate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    ReturnEstimate {
        mean,
        std_err,
        episodes: n,
    }
}
