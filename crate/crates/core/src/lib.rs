//! Behavior-aware learning of environment dynamics and task costs.
//!
//! A learner watches a teacher demonstrate and critique several tasks that
//! share one environment. Because every task is planned under the same
//! dynamics, demonstrations and feedback carry information about the
//! dynamics as well as about each task's cost. [`learner`] fits both jointly
//! by differentiating through soft value iteration; [`baselines`] holds the
//! comparison learners and [`harness`] runs simulated-teacher experiments.

pub mod agents;
pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod domains;
pub mod error;
pub mod exec;
pub mod harness;
pub mod learner;
pub mod mdp;
pub mod optim;
pub mod seed;
pub mod teacher;
