//! One teaching session: a deterministic state machine over [`SessionEvent`]s.
//!
//! Recording rules:
//! - `teacher_action` samples the true dynamics, appends the transition to
//!   `D_E` and the (state, action) pair to the selected task's demonstrations.
//! - `end_demo` appends the synthetic no-op at the final state.
//! - Each `agent_step` takes one greedy action. Feedback events attach a
//!   signal to the most recent agent step; the latest one wins. A step's
//!   feedback event (possibly with no signal) is committed when the next
//!   tick arrives or the episode ends.
//! - An agent episode ends on the tick after a goal is reached, after the
//!   horizon, or on `reset`.
//! - `place_agent` moves the agent between episodes and records nothing.
//!
//! Every completed episode schedules a refit. Refits run on a background
//! thread, each starting from the previous refit's result, and the new
//! policy is swapped in when the next agent episode starts. The policy used
//! by an episode therefore depends only on the event log, so replaying a log
//! reproduces the dataset and the checkpoint exactly.

use std::sync::Arc;
use std::thread::JoinHandle;

use bam_core::agents::{Agent, Algorithm, LearningContext};
use bam_core::checkpoint::{fingerprint, Checkpoint};
use bam_core::dataset::{DemoPair, FeedbackEvent, Signal, TeacherDataset, Transition};
use bam_core::domains::{feature_implement, Cell, Direction, Domain, Environment, NUM_ACTIONS};
use bam_core::learner::{ModelConfig, Schedule};
use bam_core::mdp::{DeterministicPolicy, Policy};
use bam_core::seed::{stream, Role};
use bam_core::teacher::SYNTHETIC_NOOP;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    Counts, EpisodeKind, EpisodeStatus, EventKind, LearnerStatus, Mode, SessionEvent, Snapshot, PROTOCOL_VERSION,
};

/// Everything needed to recreate a session from its event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub environment: String,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: Schedule,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("{event} is not valid in mode {mode:?}")]
    Mode { event: &'static str, mode: Mode },
    #[error("sequence number {found} does not follow {last}")]
    Sequence { last: u64, found: u64 },
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("task {task} out of range ({count} tasks)")]
    Task { task: usize, count: usize },
    #[error("action {action} out of range ({count} actions)")]
    Action { action: usize, count: usize },
    #[error("cell ({x}, {y}) is outside the grid or blocked")]
    Cell { x: usize, y: usize },
    #[error("no agent step to rate yet")]
    NoStep,
    #[error("session is read-only: {0}")]
    ReadOnly(String),
    #[error("replay rejected event {index}: {reason}")]
    Replay { index: usize, reason: String },
}

struct Fitted {
    agent: Agent,
    policies: Vec<DeterministicPolicy>,
    version: usize,
    error: Option<String>,
}

impl Fitted {
    fn refit(mut self, ctx: &LearningContext, data: &TeacherDataset) -> Self {
        self.error = self.agent.fit(ctx, data).err().map(|e| e.to_string());
        match self.agent.policies(ctx) {
            Ok(p) => self.policies = p.to_vec(),
            Err(e) => self.error = Some(e.to_string()),
        }
        self.version += 1;
        self
    }
}

enum LearnerSlot {
    Ready(Box<Fitted>),
    Running(JoinHandle<Fitted>),
    Empty,
}

impl LearnerSlot {
    fn wait(self) -> Fitted {
        match self {
            LearnerSlot::Ready(f) => *f,
            LearnerSlot::Running(h) => h.join().expect("refit thread panicked"),
            LearnerSlot::Empty => unreachable!("learner slot is refilled before use"),
        }
    }
}

struct PendingStep {
    state: usize,
    action: usize,
    signal: Signal,
}

struct Episode {
    kind: EpisodeKind,
    steps: usize,
    last_action: Option<usize>,
    pending: Option<PendingStep>,
}

pub struct Session {
    id: String,
    config: SessionConfig,
    env: Arc<Environment>,
    ctx: Arc<LearningContext>,
    mode: Mode,
    task: usize,
    state: usize,
    episode: Option<Episode>,
    dataset: TeacherDataset,
    rng: ChaCha8Rng,
    last_seq: Option<u64>,
    log: Vec<SessionEvent>,
    boundary: usize,
    learner: LearnerSlot,
    refits: usize,
    policies: Vec<DeterministicPolicy>,
    policy_version: usize,
    last_error: Option<String>,
    read_only: Option<String>,
}

impl Session {
    pub fn new(id: impl Into<String>, config: SessionConfig, env: Arc<Environment>) -> Self {
        let ctx = Arc::new(LearningContext::new(&env, config.model.clone(), config.schedule.clone()));
        let mut agent = Agent::new(config.algorithm, &ctx);
        let (policies, error) = match agent.policies(&ctx) {
            Ok(p) => (p.to_vec(), None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
        let mut rng = stream(config.seed, 0, 0, Role::Session, 0);
        let state = env.initial.sample(&mut rng);
        Self {
            id: id.into(),
            dataset: TeacherDataset::new(env.num_tasks()),
            env,
            mode: Mode::Idle,
            task: 0,
            state,
            episode: None,
            rng,
            last_seq: None,
            log: Vec::new(),
            boundary: 0,
            learner: LearnerSlot::Ready(Box::new(Fitted {
                agent,
                policies: policies.clone(),
                version: 0,
                error: error.clone(),
            })),
            refits: 0,
            policies,
            policy_version: 0,
            last_error: error,
            read_only: None,
            ctx,
            config,
        }
    }

    /// Rebuilds a session by applying `events` in order.
    pub fn replay(
        id: impl Into<String>,
        config: SessionConfig,
        env: Arc<Environment>,
        events: &[SessionEvent],
    ) -> Result<Self, SessionError> {
        let mut s = Self::new(id, config, env);
        for (index, e) in events.iter().enumerate() {
            s.apply(e).map_err(|err| SessionError::Replay {
                index,
                reason: err.to_string(),
            })?;
        }
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dataset(&self) -> &TeacherDataset {
        &self.dataset
    }

    /// Accepted events, ticks included.
    pub fn log(&self) -> &[SessionEvent] {
        &self.log
    }

    /// Number of logged events up to the last completed episode boundary.
    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn set_read_only(&mut self, reason: impl Into<String>) {
        self.read_only = Some(reason.into());
    }

    /// Applies one event. A rejected event leaves the session unchanged.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<Snapshot, SessionError> {
        if let Some(reason) = &self.read_only {
            return Err(SessionError::ReadOnly(reason.clone()));
        }
        if event.v != PROTOCOL_VERSION {
            return Err(SessionError::Version(event.v));
        }
        if let (Some(last), Some(seq)) = (self.last_seq, event.seq) {
            if seq <= last {
                return Err(SessionError::Sequence { last, found: seq });
            }
        }
        self.check(&event.kind)?;
        self.execute(event.kind);
        if event.seq.is_some() {
            self.last_seq = event.seq;
        }
        self.log.push(*event);
        if self.at_boundary(&event.kind) {
            self.boundary = self.log.len();
        }
        Ok(self.snapshot())
    }

    fn at_boundary(&self, kind: &EventKind) -> bool {
        // An episode just closed, or nothing is in progress after a
        // between-episode event.
        self.episode.is_none() && !matches!(kind, EventKind::StartDemo | EventKind::StartAgentEpisode)
    }

    fn guard(&self, event: &'static str, allowed: &[Mode]) -> Result<(), SessionError> {
        if allowed.contains(&self.mode) {
            Ok(())
        } else {
            Err(SessionError::Mode { event, mode: self.mode })
        }
    }

    fn check(&self, kind: &EventKind) -> Result<(), SessionError> {
        use Mode::*;
        match *kind {
            EventKind::SelectTask { task } => {
                self.guard("select_task", &[Idle, TeacherControl, AgentControl])?;
                if task >= self.env.num_tasks() {
                    return Err(SessionError::Task {
                        task,
                        count: self.env.num_tasks(),
                    });
                }
                Ok(())
            }
            EventKind::StartDemo => self.guard("start_demo", &[Idle]),
            EventKind::TeacherAction { action } => {
                self.guard("teacher_action", &[TeacherControl])?;
                if action >= NUM_ACTIONS {
                    return Err(SessionError::Action {
                        action,
                        count: NUM_ACTIONS,
                    });
                }
                Ok(())
            }
            EventKind::EndDemo => self.guard("end_demo", &[TeacherControl]),
            EventKind::StartAgentEpisode => self.guard("start_agent_episode", &[Idle]),
            EventKind::AgentStep => self.guard("agent_step", &[AgentControl]),
            EventKind::FeedbackPositive | EventKind::FeedbackNegative => {
                self.guard("feedback", &[AgentControl])?;
                match self.episode.as_ref().and_then(|e| e.pending.as_ref()) {
                    Some(_) => Ok(()),
                    None => Err(SessionError::NoStep),
                }
            }
            EventKind::Reset => self.guard("reset", &[Idle, AgentControl]),
            EventKind::PlaceAgent { x, y } => {
                self.guard("place_agent", &[Idle])?;
                let spec = &self.env.spec;
                if x >= spec.width || y >= spec.height || spec.cell(spec.cell_index(x, y)) == Cell::Obstacle {
                    return Err(SessionError::Cell { x, y });
                }
                Ok(())
            }
            EventKind::EndSession => self.guard("end_session", &[Idle, TeacherControl, AgentControl]),
        }
    }

    fn execute(&mut self, kind: EventKind) {
        match kind {
            EventKind::SelectTask { task } => self.task = task,
            EventKind::StartDemo => self.begin(Mode::TeacherControl, EpisodeKind::Demonstration),
            EventKind::TeacherAction { action } => {
                let next = self.step(action);
                self.dataset.demos.push(DemoPair {
                    task: self.task,
                    state: self.state,
                    action,
                });
                self.state = next;
            }
            EventKind::EndDemo => self.finish_demo(),
            EventKind::StartAgentEpisode => {
                let fitted = std::mem::replace(&mut self.learner, LearnerSlot::Empty).wait();
                self.policies = fitted.policies.clone();
                self.policy_version = fitted.version;
                self.last_error = fitted.error.clone();
                self.learner = LearnerSlot::Ready(Box::new(fitted));
                self.begin(Mode::AgentControl, EpisodeKind::Agent);
            }
            EventKind::AgentStep => self.agent_step(),
            EventKind::FeedbackPositive | EventKind::FeedbackNegative => {
                let signal = if kind == EventKind::FeedbackPositive {
                    Signal::Positive
                } else {
                    Signal::Negative
                };
                if let Some(p) = self.episode.as_mut().and_then(|e| e.pending.as_mut()) {
                    p.signal = signal;
                }
            }
            EventKind::Reset => {
                if self.mode == Mode::AgentControl {
                    self.finish_agent_episode();
                }
                self.state = self.env.initial.sample(&mut self.rng);
            }
            EventKind::PlaceAgent { x, y } => {
                let (_, feature) = self.env.coding.decode(self.state);
                self.state = self.env.coding.encode(self.env.spec.cell_index(x, y), feature);
            }
            EventKind::EndSession => {
                match self.mode {
                    Mode::TeacherControl => self.finish_demo(),
                    Mode::AgentControl => self.finish_agent_episode(),
                    _ => {}
                }
                self.mode = Mode::Ended;
            }
        }
    }

    fn begin(&mut self, mode: Mode, kind: EpisodeKind) {
        self.mode = mode;
        self.episode = Some(Episode {
            kind,
            steps: 0,
            last_action: None,
            pending: None,
        });
    }

    /// Executes `action` on the true dynamics and records the transition.
    fn step(&mut self, action: usize) -> usize {
        let next = self.env.true_model.sample(self.state, action, &mut self.rng);
        self.dataset.transitions.push(Transition {
            state: self.state,
            action,
            next,
        });
        if let Some(e) = self.episode.as_mut() {
            e.steps += 1;
            e.last_action = Some(action);
        }
        next
    }

    fn agent_step(&mut self) {
        self.commit_feedback();
        let steps = self.episode.as_ref().map_or(0, |e| e.steps);
        if self.env.is_goal(self.task, self.state) || steps >= self.env.spec.horizon {
            self.finish_agent_episode();
            return;
        }
        let action = match self.policies.get(self.task) {
            Some(p) => p.act(self.state, &mut self.rng),
            None => SYNTHETIC_NOOP,
        };
        let state = self.state;
        self.state = self.step(action);
        if let Some(e) = self.episode.as_mut() {
            e.pending = Some(PendingStep {
                state,
                action,
                signal: Signal::None,
            });
        }
    }

    fn commit_feedback(&mut self) {
        if let Some(p) = self.episode.as_mut().and_then(|e| e.pending.take()) {
            let step = self.dataset.feedback.len();
            self.dataset.feedback.push(FeedbackEvent {
                task: self.task,
                state: p.state,
                action: p.action,
                signal: p.signal,
                step,
            });
        }
    }

    fn finish_demo(&mut self) {
        self.dataset.demos.push(DemoPair {
            task: self.task,
            state: self.state,
            action: SYNTHETIC_NOOP,
        });
        self.close_episode();
    }

    fn finish_agent_episode(&mut self) {
        self.commit_feedback();
        self.close_episode();
    }

    fn close_episode(&mut self) {
        self.episode = None;
        self.mode = Mode::Idle;
        self.schedule_refit();
    }

    fn schedule_refit(&mut self) {
        let previous = std::mem::replace(&mut self.learner, LearnerSlot::Empty);
        let ctx = self.ctx.clone();
        let data = self.dataset.clone();
        self.learner = LearnerSlot::Running(std::thread::spawn(move || previous.wait().refit(&ctx, &data)));
        self.refits += 1;
    }

    fn refitting(&self) -> bool {
        matches!(&self.learner, LearnerSlot::Running(h) if !h.is_finished())
    }

    /// Waits for pending refits and returns the learner checkpoint.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let fitted = std::mem::replace(&mut self.learner, LearnerSlot::Empty).wait();
        let cp = Checkpoint::new(
            fitted.agent.clone(),
            self.env.spec.name.clone(),
            fingerprint(&self.config),
        );
        self.learner = LearnerSlot::Ready(Box::new(fitted));
        cp
    }

    /// The checkpoint if no refit is running.
    pub fn try_checkpoint(&mut self) -> Option<Checkpoint> {
        (!self.refitting()).then(|| self.checkpoint())
    }

    pub fn snapshot(&self) -> Snapshot {
        let (cell, feature) = self.env.coding.decode(self.state);
        let (x, y) = self.env.spec.cell_xy(cell);
        let domain = self.env.spec.domain;
        Snapshot {
            v: PROTOCOL_VERSION,
            session_id: self.id.clone(),
            environment: self.env.spec.name.clone(),
            algorithm: self.config.algorithm,
            seq: self.last_seq,
            events: self.log.len(),
            mode: self.mode,
            task: self.task,
            tasks: self.env.spec.tasks.iter().map(|t| t.name.clone()).collect(),
            state: self.state,
            x,
            y,
            carrying: (domain == Domain::Farming)
                .then(|| feature_implement(feature).map_or("none", |i| i.name()).to_string()),
            gravity: (domain == Domain::Gravity).then(|| Direction::from_index(feature).name().to_string()),
            at_goal: self.env.is_goal(self.task, self.state),
            episode: self.episode.as_ref().map(|e| EpisodeStatus {
                kind: e.kind,
                steps: e.steps,
                last_action: e.last_action,
                pending_feedback: e.pending.as_ref().map(|p| p.signal),
            }),
            counts: Counts {
                demo_pairs: self.dataset.demos.len(),
                feedback_events: self.dataset.feedback.len(),
                transitions: self.dataset.transitions.len(),
            },
            learner: LearnerStatus {
                refits: self.refits,
                policy_version: self.policy_version,
                refitting: self.refitting(),
                last_error: self.last_error.clone(),
            },
            read_only: self.read_only.clone(),
        }
    }
}
