//! Teacher data: demonstrated actions and feedback per task (`D_T`) and the
//! shared observed transitions (`D_E`).
//!
//! # Line format (version 1)
//!
//! ```text
//! bam-dataset 1 tasks=<n>
//! D <task> <state> <action> -            demonstrated action
//! F <task> <state> <action> <+|-|0> <i>  feedback signal for an action, step index i
//! T - <state> <action> <next>            observed transition
//! ```
//!
//! Fields are tab separated. Records keep their insertion order within each
//! kind; the writer emits all `D`, then `F`, then `T` records.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DatasetError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Positive,
    Negative,
    None,
}

impl Signal {
    fn code(self) -> &'static str {
        match self {
            Signal::Positive => "+",
            Signal::Negative => "-",
            Signal::None => "0",
        }
    }

    fn parse(s: &str) -> Option<Signal> {
        match s {
            "+" => Some(Signal::Positive),
            "-" => Some(Signal::Negative),
            "0" => Some(Signal::None),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DemoPair {
    pub task: usize,
    pub state: usize,
    pub action: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub task: usize,
    pub state: usize,
    pub action: usize,
    pub signal: Signal,
    /// Position of the feedback within the session or experiment.
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next: usize,
}

/// One teacher demonstration: the actions taken, then optionally a synthetic
/// no-op at the final state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Demonstration {
    pub task: usize,
    pub steps: Vec<(usize, usize)>,
    pub final_state: usize,
    pub terminal_noop: bool,
    /// The goal was not reached within the horizon.
    pub truncated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherDataset {
    pub num_tasks: usize,
    pub demos: Vec<DemoPair>,
    pub feedback: Vec<FeedbackEvent>,
    pub transitions: Vec<Transition>,
}

impl TeacherDataset {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty() && self.feedback.is_empty() && self.transitions.is_empty()
    }

    /// Adds the demonstrated pairs of `demo` (including the synthetic no-op).
    /// Transitions are recorded separately as they are observed.
    pub fn add_demonstration(&mut self, demo: &Demonstration, noop: usize) {
        for &(state, action) in &demo.steps {
            self.demos.push(DemoPair {
                task: demo.task,
                state,
                action,
            });
        }
        if demo.terminal_noop {
            self.demos.push(DemoPair {
                task: demo.task,
                state: demo.final_state,
                action: noop,
            });
        }
    }

    pub fn demos_for(&self, task: usize) -> impl Iterator<Item = &DemoPair> {
        self.demos.iter().filter(move |d| d.task == task)
    }

    pub fn feedback_for(&self, task: usize) -> impl Iterator<Item = &FeedbackEvent> {
        self.feedback.iter().filter(move |f| f.task == task)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("bam-dataset 1 tasks={}\n", self.num_tasks);
        for d in &self.demos {
            let _ = writeln!(out, "D\t{}\t{}\t{}\t-", d.task, d.state, d.action);
        }
        for f in &self.feedback {
            let _ = writeln!(
                out,
                "F\t{}\t{}\t{}\t{}\t{}",
                f.task,
                f.state,
                f.action,
                f.signal.code(),
                f.step
            );
        }
        for t in &self.transitions {
            let _ = writeln!(out, "T\t-\t{}\t{}\t{}", t.state, t.action, t.next);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or("");
        let num_tasks = header
            .strip_prefix("bam-dataset 1 tasks=")
            .ok_or_else(|| DatasetError::Version(header.to_string()))?
            .trim()
            .parse()
            .map_err(|_| DatasetError::Parse {
                line: 1,
                message: "bad task count".into(),
            })?;
        let mut data = TeacherDataset::new(num_tasks);
        for (i, line) in lines {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: &str| DatasetError::Parse {
                line: n,
                message: message.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let num = |idx: usize| -> Result<usize, DatasetError> {
                fields
                    .get(idx)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| err(&format!("field {idx} is not an index")))
            };
            match fields.first().copied() {
                Some("D") if fields.len() == 5 => {
                    let task = num(1)?;
                    if task >= num_tasks {
                        return Err(err("task out of range"));
                    }
                    data.demos.push(DemoPair {
                        task,
                        state: num(2)?,
                        action: num(3)?,
                    });
                }
                Some("F") if fields.len() == 6 => {
                    let task = num(1)?;
                    if task >= num_tasks {
                        return Err(err("task out of range"));
                    }
                    data.feedback.push(FeedbackEvent {
                        task,
                        state: num(2)?,
                        action: num(3)?,
                        signal: Signal::parse(fields[4]).ok_or_else(|| err("bad signal"))?,
                        step: num(5)?,
                    });
                }
                Some("T") if fields.len() == 5 => data.transitions.push(Transition {
                    state: num(2)?,
                    action: num(3)?,
                    next: num(4)?,
                }),
                _ => return Err(err("unrecognised record")),
            }
        }
        Ok(data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn store(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())?;
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)
}
