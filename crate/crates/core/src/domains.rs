//! Grid-world domain families: navigation, farming and gravity.
//!
//! An environment file describes the grid, the tasks (goal cell sets) and the
//! ground-truth dynamics. From it we build the true transition model, the true
//! per-task costs, and the parametric model space a learner searches over.
//!
//! # Environment file format
//!
//! ```text
//! bam-env 1
//! name: doorway
//! domain: navigation            # navigation | farming | gravity
//! size: 9 8                     # width height
//! horizon: 40                   # evaluation episode length (optional, default 100)
//! steps: 34                     # soft backups (optional, default 2 * (width + height))
//! start: rows 5 7               # all | rows <first> <last> | cells x,y x,y ...
//! implement: none               # farming: carried implement at start (optional)
//! gravity: down                 # gravity: direction at start (optional, default down)
//! color 0: up                   # gravity: true direction set by each color
//! task north: 4,0               # one line per task: name and goal cells x,y
//! grid:
//! ....#....
//! ```
//!
//! Header lines may appear in any order and `#` starts a comment in the
//! header. Grid rows are read verbatim, one character per cell, `y = 0` at the
//! top. Cell codes: `.` open, `#` obstacle, `d` dirt field, `i` immature crop,
//! `g` grown crop, `P`/`S`/`H` plow/sprinkler/harvester pickup, `0`-`9`
//! colored gravity cell. [`GridSpec::to_text`] writes the canonical form, which
//! parses back to an equal spec and re-serializes to identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::EnvError;
use crate::mdp::{ActionSpace, CostFunction, InitialDistribution, Outcome, TransitionModel};

/// Goal states cost `-GOAL_REWARD` under the true cost functions; all other
/// states cost zero.
pub const GOAL_REWARD: f64 = 1.0;

pub const ACTION_LABELS: [&str; 5] = ["up", "down", "left", "right", "no-op"];
pub const NOOP: usize = 4;
pub const NUM_ACTIONS: usize = 5;

pub fn action_space() -> ActionSpace {
    ActionSpace::new(ACTION_LABELS.iter().map(|s| s.to_string()).collect(), NOOP)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Direction {
        Self::ALL[i]
    }

    /// Movement direction of an action, `None` for the no-op.
    pub fn of_action(action: usize) -> Option<Direction> {
        (action < 4).then(|| Self::ALL[action])
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }

    pub fn name(self) -> &'static str {
        ACTION_LABELS[self.index()]
    }

    pub fn parse(s: &str) -> Option<Direction> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Navigation,
    Farming,
    Gravity,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Navigation => "navigation",
            Domain::Farming => "farming",
            Domain::Gravity => "gravity",
        }
    }

    fn parse(s: &str) -> Option<Domain> {
        [Domain::Navigation, Domain::Farming, Domain::Gravity]
            .into_iter()
            .find(|d| d.name() == s)
    }
}

/// Field types, in parameter order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Dirt,
    Immature,
    Grown,
}

/// Farm implements, in parameter order. The implement that works on field
/// kind `k` has the same index `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Implement {
    Plow,
    Sprinkler,
    Harvester,
}

impl Implement {
    pub const ALL: [Implement; 3] = [Implement::Plow, Implement::Sprinkler, Implement::Harvester];

    pub fn name(self) -> &'static str {
        match self {
            Implement::Plow => "plow",
            Implement::Sprinkler => "sprinkler",
            Implement::Harvester => "harvester",
        }
    }

    pub fn parse(s: &str) -> Option<Option<Implement>> {
        if s == "none" {
            return Some(None);
        }
        Self::ALL.into_iter().find(|i| i.name() == s).map(Some)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Open,
    Obstacle,
    Field(FieldKind),
    Pickup(Implement),
    Color(u8),
}

impl Cell {
    fn code(self) -> char {
        match self {
            Cell::Open => '.',
            Cell::Obstacle => '#',
            Cell::Field(FieldKind::Dirt) => 'd',
            Cell::Field(FieldKind::Immature) => 'i',
            Cell::Field(FieldKind::Grown) => 'g',
            Cell::Pickup(Implement::Plow) => 'P',
            Cell::Pickup(Implement::Sprinkler) => 'S',
            Cell::Pickup(Implement::Harvester) => 'H',
            Cell::Color(c) => char::from(b'0' + c),
        }
    }

    fn from_code(c: char) -> Option<Cell> {
        Some(match c {
            '.' => Cell::Open,
            '#' => Cell::Obstacle,
            'd' => Cell::Field(FieldKind::Dirt),
            'i' => Cell::Field(FieldKind::Immature),
            'g' => Cell::Field(FieldKind::Grown),
            'P' => Cell::Pickup(Implement::Plow),
            'S' => Cell::Pickup(Implement::Sprinkler),
            'H' => Cell::Pickup(Implement::Harvester),
            '0'..='9' => Cell::Color(c as u8 - b'0'),
            _ => return None,
        })
    }

    fn allowed_in(self, domain: Domain) -> bool {
        match (self, domain) {
            (Cell::Open | Cell::Obstacle, _) => true,
            (Cell::Field(_) | Cell::Pickup(_), Domain::Farming) => true,
            (Cell::Color(_), Domain::Gravity) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StartRegion {
    All,
    Rows(usize, usize),
    Cells(Vec<(usize, usize)>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub goals: Vec<(usize, usize)>,
}

/// Parsed environment file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub name: String,
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub steps: Option<usize>,
    pub start: StartRegion,
    pub start_implement: Option<Implement>,
    pub start_gravity: Direction,
    pub color_directions: Vec<(u8, Direction)>,
    pub tasks: Vec<TaskSpec>,
    pub cells: Vec<Cell>,
}

pub const DEFAULT_HORIZON: usize = 100;

fn syntax(line: usize, message: impl Into<String>) -> EnvError {
    EnvError::Syntax {
        line,
        message: message.into(),
    }
}

fn parse_xy(line: usize, s: &str) -> Result<(usize, usize), EnvError> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| syntax(line, format!("expected x,y but found `{s}`")))?;
    let x = x.trim().parse().map_err(|_| syntax(line, format!("bad x in `{s}`")))?;
    let y = y.trim().parse().map_err(|_| syntax(line, format!("bad y in `{s}`")))?;
    Ok((x, y))
}

fn parse_usize(line: usize, s: &str) -> Result<usize, EnvError> {
    s.trim()
        .parse()
        .map_err(|_| syntax(line, format!("expected a non-negative integer, found `{s}`")))
}

impl GridSpec {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == "bam-env 1" => {}
            Some((n, l)) => return Err(syntax(n, format!("expected `bam-env 1`, found `{l}`"))),
            None => return Err(syntax(1, "empty document")),
        }
        let mut name = None;
        let mut domain = None;
        let mut size = None;
        let mut horizon = DEFAULT_HORIZON;
        let mut steps = None;
        let mut start = StartRegion::All;
        let mut start_implement = None;
        let mut start_gravity = Direction::Down;
        let mut colors: Vec<(u8, Direction)> = Vec::new();
        let mut tasks: Vec<TaskSpec> = Vec::new();
        let mut rows: Vec<(usize, &str)> = Vec::new();
        let mut in_grid = false;

        for (n, raw) in lines {
            if in_grid {
                if !raw.trim().is_empty() {
                    rows.push((n, raw.trim_end()));
                }
                continue;
            }
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line == "grid:" {
                in_grid = true;
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| syntax(n, format!("expected `key: value`, found `{line}`")))?;
            let value = value.trim();
            let mut words = key.split_whitespace();
            match (words.next(), words.next()) {
                (Some("name"), None) => name = Some(value.to_string()),
                (Some("domain"), None) => {
                    domain = Some(Domain::parse(value).ok_or_else(|| syntax(n, format!("unknown domain `{value}`")))?)
                }
                (Some("size"), None) => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(syntax(n, "size needs width and height"));
                    }
                    let (w, h) = (parse_usize(n, parts[0])?, parse_usize(n, parts[1])?);
                    if w == 0 || h == 0 {
                        return Err(syntax(n, "grid dimensions must be positive"));
                    }
                    size = Some((w, h));
                }
                (Some("horizon"), None) => {
                    horizon = parse_usize(n, value)?;
                    if horizon == 0 {
                        return Err(syntax(n, "horizon must be positive"));
                    }
                }
                (Some("steps"), None) => {
                    let s = parse_usize(n, value)?;
                    if s == 0 {
                        return Err(syntax(n, "steps must be positive"));
                    }
                    steps = Some(s);
                }
                (Some("start"), None) => {
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    start = match parts.as_slice() {
                        ["all"] => StartRegion::All,
                        ["rows", a, b] => StartRegion::Rows(parse_usize(n, a)?, parse_usize(n, b)?),
                        ["cells", rest @ ..] if !rest.is_empty() => {
                            StartRegion::Cells(rest.iter().map(|c| parse_xy(n, c)).collect::<Result<_, _>>()?)
                        }
                        _ => return Err(syntax(n, format!("bad start region `{value}`"))),
                    };
                }
                (Some("implement"), None) => {
                    start_implement =
                        Implement::parse(value).ok_or_else(|| syntax(n, format!("unknown implement `{value}`")))?
                }
                (Some("gravity"), None) => {
                    start_gravity =
                        Direction::parse(value).ok_or_else(|| syntax(n, format!("unknown direction `{value}`")))?
                }
                (Some("color"), Some(c)) => {
                    let c: u8 = c
                        .parse()
                        .ok()
                        .filter(|c| *c < 10)
                        .ok_or_else(|| syntax(n, format!("bad color `{c}`")))?;
                    let d = Direction::parse(value).ok_or_else(|| syntax(n, format!("unknown direction `{value}`")))?;
                    if colors.iter().any(|(k, _)| *k == c) {
                        return Err(syntax(n, format!("color {c} defined twice")));
                    }
                    colors.push((c, d));
                }
                (Some("task"), Some(task)) => {
                    if tasks.iter().any(|t| t.name == task) {
                        return Err(syntax(n, format!("task `{task}` defined twice")));
                    }
                    let goals = value
                        .split_whitespace()
                        .map(|c| parse_xy(n, c))
                        .collect::<Result<Vec<_>, _>>()?;
                    tasks.push(TaskSpec {
                        name: task.to_string(),
                        goals,
                    });
                }
                _ => return Err(syntax(n, format!("unknown header field `{key}`"))),
            }
        }

        let name = name.ok_or(EnvError::MissingField("name"))?;
        let domain = domain.ok_or(EnvError::MissingField("domain"))?;
        let (width, height) = size.ok_or(EnvError::MissingField("size"))?;
        if !in_grid {
            return Err(EnvError::MissingField("grid"));
        }
        if rows.len() != height {
            return Err(EnvError::GridShape {
                expected: height,
                found: rows.len(),
                width,
            });
        }
        let mut cells = Vec::with_capacity(width * height);
        for (n, row) in &rows {
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != width {
                return Err(syntax(*n, format!("row has {} cells, expected {width}", chars.len())));
            }
            for ch in chars {
                let cell = Cell::from_code(ch).ok_or_else(|| syntax(*n, format!("unknown cell code `{ch}`")))?;
                if !cell.allowed_in(domain) {
                    return Err(syntax(*n, format!("cell `{ch}` not allowed in {} domain", domain.name())));
                }
                cells.push(cell);
            }
        }
        colors.sort_by_key(|c| c.0);
        let spec = GridSpec {
            name,
            domain,
            width,
            height,
            horizon,
            steps,
            start,
            start_implement,
            start_gravity,
            color_directions: colors,
            tasks,
            cells,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.tasks.is_empty() {
            return Err(EnvError::NoTasks);
        }
        for t in &self.tasks {
            if t.goals.is_empty() {
                return Err(EnvError::EmptyTask(t.name.clone()));
            }
            for &(x, y) in &t.goals {
                if x >= self.width || y >= self.height {
                    return Err(EnvError::GoalOutOfBounds {
                        task: t.name.clone(),
                        x,
                        y,
                        width: self.width,
                        height: self.height,
                    });
                }
            }
        }
        for c in &self.cells {
            if let Cell::Color(k) = c {
                if self.color_direction(*k).is_none() {
                    return Err(EnvError::UnknownColor(*k));
                }
            }
        }
        if self.start_cells().is_empty() {
            return Err(crate::error::MdpError::EmptyInitialDistribution.into());
        }
        Ok(())
    }

    /// Canonical text form.
    pub fn to_text(&self) -> String {
        let mut out = String::from("bam-env 1\n");
        let _ = writeln!(out, "name: {}", self.name);
        let _ = writeln!(out, "domain: {}", self.domain.name());
        let _ = writeln!(out, "size: {} {}", self.width, self.height);
        let _ = writeln!(out, "horizon: {}", self.horizon);
        if let Some(s) = self.steps {
            let _ = writeln!(out, "steps: {s}");
        }
        match &self.start {
            StartRegion::All => out.push_str("start: all\n"),
            StartRegion::Rows(a, b) => {
                let _ = writeln!(out, "start: rows {a} {b}");
            }
            StartRegion::Cells(cs) => {
                out.push_str("start: cells");
                for (x, y) in cs {
                    let _ = write!(out, " {x},{y}");
                }
                out.push('\n');
            }
        }
        if self.domain == Domain::Farming {
            let _ = writeln!(out, "implement: {}", self.start_implement.map_or("none", Implement::name));
        }
        if self.domain == Domain::Gravity {
            let _ = writeln!(out, "gravity: {}", self.start_gravity.name());
            for (c, d) in &self.color_directions {
                let _ = writeln!(out, "color {c}: {}", d.name());
            }
        }
        for t in &self.tasks {
            let _ = write!(out, "task {}:", t.name);
            for (x, y) in &t.goals {
                let _ = write!(out, " {x},{y}");
            }
            out.push('\n');
        }
        out.push_str("grid:\n");
        for row in self.cells.chunks(self.width) {
            out.extend(row.iter().map(|c| c.code()));
            out.push('\n');
        }
        out
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell_xy(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    pub fn cell(&self, cell: usize) -> Cell {
        self.cells[cell]
    }

    pub fn color_direction(&self, color: u8) -> Option<Direction> {
        self.color_directions.iter().find(|c| c.0 == color).map(|c| c.1)
    }

    pub fn num_colors(&self) -> usize {
        self.color_directions.iter().map(|c| c.0 as usize + 1).max().unwrap_or(0)
    }

    /// Neighbouring cell in a direction, `None` off the grid.
    pub fn neighbor(&self, cell: usize, dir: Direction) -> Option<usize> {
        let (x, y) = self.cell_xy(cell);
        let (nx, ny) = match dir {
            Direction::Up => (x as isize, y as isize - 1),
            Direction::Down => (x as isize, y as isize + 1),
            Direction::Left => (x as isize - 1, y as isize),
            Direction::Right => (x as isize + 1, y as isize),
        };
        if nx < 0 || ny < 0 || nx as usize >= self.width || ny as usize >= self.height {
            None
        } else {
            Some(self.cell_index(nx as usize, ny as usize))
        }
    }

    /// Open cells in the start region.
    pub fn start_cells(&self) -> Vec<usize> {
        let in_region = |cell: usize| {
            let (x, y) = self.cell_xy(cell);
            match &self.start {
                StartRegion::All => true,
                StartRegion::Rows(a, b) => (*a..=*b).contains(&y),
                StartRegion::Cells(cs) => cs.contains(&(x, y)),
            }
        };
        (0..self.num_cells())
            .filter(|&c| self.cells[c] == Cell::Open && in_region(c))
            .collect()
    }

    pub fn default_steps(&self) -> usize {
        self.steps.unwrap_or(2 * (self.width + self.height))
    }
}

/// Factorization of the state index into (cell, feature). The feature is the
/// carried implement (farming: 0 = none, 1 + implement index) or the gravity
/// direction (gravity); navigation has a single feature value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateCoding {
    pub num_cells: usize,
    pub features: usize,
}

impl StateCoding {
    pub fn for_spec(spec: &GridSpec) -> Self {
        let features = match spec.domain {
            Domain::Navigation => 1,
            Domain::Farming | Domain::Gravity => 4,
        };
        Self {
            num_cells: spec.num_cells(),
            features,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_cells * self.features
    }

    #[inline]
    pub fn encode(&self, cell: usize, feature: usize) -> usize {
        cell * self.features + feature
    }

    #[inline]
    pub fn decode(&self, state: usize) -> (usize, usize) {
        (state / self.features, state % self.features)
    }

    pub fn cell_of_state(&self) -> Vec<usize> {
        (0..self.num_states()).map(|s| self.decode(s).0).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Probability with its sparse parameter derivative.
type Weighted = (f64, Vec<(usize, f64)>);

fn scale(entries: &[(usize, f64)], by: f64) -> Vec<(usize, f64)> {
    entries.iter().map(|&(k, d)| (k, d * by)).collect()
}

/// Softmax entry `k` of the block starting at `offset`, with derivatives.
fn softmax_entry(params: &[f64], offset: usize, width: usize, k: usize) -> Weighted {
    let p = softmax(&params[offset..offset + width]);
    let grad = (0..width)
        .map(|m| (offset + m, p[k] * (if m == k { 1.0 } else { 0.0 } - p[m])))
        .collect();
    (p[k], grad)
}

/// The parametric space of dynamics models a learner searches over, or a
/// fixed known model.
#[derive(Clone, Debug)]
pub enum DynamicsFamily {
    /// One logit per cell; entering cell `i` fails with probability
    /// `sigmoid(theta_i)`.
    Navigation(GridSpec),
    /// Logits `[implement][field kind]`; each implement row is a softmax
    /// giving the probability it works on each field kind.
    Farming(GridSpec),
    /// Logits `[color][direction]`; softmax per color over the gravity
    /// direction it sets.
    Gravity(GridSpec),
    /// No free parameters.
    Fixed(TransitionModel),
}

impl DynamicsFamily {
    pub fn for_spec(spec: &GridSpec) -> Self {
        match spec.domain {
            Domain::Navigation => DynamicsFamily::Navigation(spec.clone()),
            Domain::Farming => DynamicsFamily::Farming(spec.clone()),
            Domain::Gravity => DynamicsFamily::Gravity(spec.clone()),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            DynamicsFamily::Navigation(spec) => spec.num_cells(),
            DynamicsFamily::Farming(_) => 9,
            DynamicsFamily::Gravity(spec) => 4 * spec.num_colors(),
            DynamicsFamily::Fixed(_) => 0,
        }
    }

    /// Builds `T_theta`, carrying `d T / d theta` on every outcome.
    pub fn build(&self, theta: &[f64]) -> Result<TransitionModel, crate::error::MdpError> {
        if theta.len() != self.num_params() {
            return Err(crate::error::MdpError::DimensionMismatch {
                what: "dynamics parameters",
                expected: self.num_params(),
                found: theta.len(),
            });
        }
        Ok(match self {
            DynamicsFamily::Navigation(spec) => navigation_model(spec, &Rules::Params(theta)),
            DynamicsFamily::Farming(spec) => farming_model(spec, &Rules::Params(theta)),
            DynamicsFamily::Gravity(spec) => gravity_model(spec, &Rules::Params(theta)),
            DynamicsFamily::Fixed(model) => model.clone(),
        })
    }
}

/// Source of the unknown probabilities when building a grid model.
enum Rules<'a> {
    Truth,
    Params(&'a [f64]),
}

/// Builds the transition model of a navigation grid.
fn navigation_model(spec: &GridSpec, rules: &Rules) -> TransitionModel {
    let n = spec.num_cells();
    let num_params = match rules {
        Rules::Truth => 0,
        Rules::Params(_) => n,
    };
    let mut model = TransitionModel::new(n, NUM_ACTIONS, num_params);
    for cell in 0..n {
        for a in 0..NUM_ACTIONS {
            let target = Direction::of_action(a).and_then(|d| spec.neighbor(cell, d));
            let outcomes = match target {
                None => vec![Outcome::fixed(cell, 1.0)],
                Some(t) => {
                    let (fail, dfail): Weighted = match rules {
                        Rules::Truth => (if spec.cell(t) == Cell::Obstacle { 1.0 } else { 0.0 }, vec![]),
                        Rules::Params(theta) => {
                            let f = sigmoid(theta[t]);
                            (f, vec![(t, f * (1.0 - f))])
                        }
                    };
                    vec![
                        Outcome {
                            next: t,
                            prob: 1.0 - fail,
                            dprob: scale(&dfail, -1.0),
                        },
                        Outcome {
                            next: cell,
                            prob: fail,
                            dprob: dfail,
                        },
                    ]
                }
            };
            model.set_row(cell, a, outcomes);
        }
    }
    model
}

/// Feature value of a carried implement.
pub fn implement_feature(imp: Option<Implement>) -> usize {
    imp.map_or(0, |i| i as usize + 1)
}

pub fn feature_implement(feature: usize) -> Option<Implement> {
    feature.checked_sub(1).map(|i| Implement::ALL[i])
}

fn farming_model(spec: &GridSpec, rules: &Rules) -> TransitionModel {
    let coding = StateCoding::for_spec(spec);
    let num_params = match rules {
        Rules::Truth => 0,
        Rules::Params(_) => 9,
    };
    let mut model = TransitionModel::new(coding.num_states(), NUM_ACTIONS, num_params);
    for cell in 0..coding.num_cells {
        for feature in 0..coding.features {
            let s = coding.encode(cell, feature);
            let carried = feature_implement(feature);
            for a in 0..NUM_ACTIONS {
                let target = Direction::of_action(a).and_then(|d| spec.neighbor(cell, d));
                let stay = vec![Outcome::fixed(s, 1.0)];
                let outcomes = match target.map(|t| (t, spec.cell(t))) {
                    None | Some((_, Cell::Obstacle)) => stay,
                    Some((t, Cell::Field(kind))) => match carried {
                        None => stay,
                        Some(imp) => {
                            let (p, dp): Weighted = match rules {
                                Rules::Truth => (if imp as usize == kind as usize { 1.0 } else { 0.0 }, vec![]),
                                Rules::Params(logits) => softmax_entry(logits, 3 * imp as usize, 3, kind as usize),
                            };
                            vec![
                                Outcome {
                                    next: coding.encode(t, feature),
                                    prob: p,
                                    dprob: dp.clone(),
                                },
                                Outcome {
                                    next: s,
                                    prob: 1.0 - p,
                                    dprob: scale(&dp, -1.0),
                                },
                            ]
                        }
                    },
                    Some((t, Cell::Pickup(imp))) => {
                        vec![Outcome::fixed(coding.encode(t, implement_feature(Some(imp))), 1.0)]
                    }
                    Some((t, _)) => vec![Outcome::fixed(coding.encode(t, feature), 1.0)],
                };
                model.set_row(s, a, outcomes);
            }
        }
    }
    model
}

fn gravity_model(spec: &GridSpec, rules: &Rules) -> TransitionModel {
    let coding = StateCoding::for_spec(spec);
    let num_params = match rules {
        Rules::Truth => 0,
        Rules::Params(_) => 4 * spec.num_colors(),
    };
    let mut model = TransitionModel::new(coding.num_states(), NUM_ACTIONS, num_params);
    for cell in 0..coding.num_cells {
        for g in 0..4 {
            let s = coding.encode(cell, g);
            let gravity = Direction::from_index(g);
            for a in 0..NUM_ACTIONS {
                let target = Direction::of_action(a)
                    .filter(|d| *d != gravity.opposite())
                    .and_then(|d| spec.neighbor(cell, d));
                let outcomes = match target.map(|t| (t, spec.cell(t))) {
                    None | Some((_, Cell::Obstacle)) => vec![Outcome::fixed(s, 1.0)],
                    Some((t, Cell::Color(color))) => (0..4)
                        .map(|d| {
                            let (p, dp): Weighted = match rules {
                                Rules::Truth => {
                                    let truth = spec.color_direction(color).expect("validated color");
                                    (if truth.index() == d { 1.0 } else { 0.0 }, vec![])
                                }
                                Rules::Params(logits) => softmax_entry(logits, 4 * color as usize, 4, d),
                            };
                            Outcome {
                                next: coding.encode(t, d),
                                prob: p,
                                dprob: dp,
                            }
                        })
                        .collect(),
                    Some((t, _)) => vec![Outcome::fixed(coding.encode(t, g), 1.0)],
                };
                model.set_row(s, a, outcomes);
            }
        }
    }
    model
}

/// Positivity link from a cell parameter to a cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostLink {
    /// `ln(1 + e^phi)`
    #[default]
    Softplus,
    /// `phi`
    Linear,
}

impl CostLink {
    /// Value and derivative at `phi`.
    #[inline]
    pub fn apply(self, phi: f64) -> (f64, f64) {
        match self {
            CostLink::Softplus => {
                let value = if phi > 30.0 { phi } else { phi.max(-700.0).exp().ln_1p() };
                (value, sigmoid(phi))
            }
            CostLink::Linear => (phi, 1.0),
        }
    }
}

/// Costs with one parameter per grid cell, shared by every state on that cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellCostModel {
    cell_of_state: Vec<usize>,
    num_cells: usize,
    link: CostLink,
}

impl CellCostModel {
    pub fn new(cell_of_state: Vec<usize>, num_cells: usize, link: CostLink) -> Self {
        Self {
            cell_of_state,
            num_cells,
            link,
        }
    }

    pub fn num_params(&self) -> usize {
        self.num_cells
    }

    pub fn num_states(&self) -> usize {
        self.cell_of_state.len()
    }

    pub fn link(&self) -> CostLink {
        self.link
    }

    pub fn cell_of_state(&self) -> &[usize] {
        &self.cell_of_state
    }

    fn check(&self, phi: &[f64]) -> Result<(), crate::error::MdpError> {
        if phi.len() != self.num_cells {
            return Err(crate::error::MdpError::DimensionMismatch {
                what: "cost parameters",
                expected: self.num_cells,
                found: phi.len(),
            });
        }
        Ok(())
    }

    /// `C(s) = g(phi[cell(s)])`.
    pub fn cost(&self, phi: &[f64]) -> Result<CostFunction, crate::error::MdpError> {
        self.check(phi)?;
        let mut values = Vec::with_capacity(self.num_states());
        let mut jac = Vec::with_capacity(self.num_states());
        for &cell in &self.cell_of_state {
            let (c, dc) = self.link.apply(phi[cell]);
            values.push(c);
            jac.push(vec![(cell, dc)]);
        }
        Ok(CostFunction::with_jacobian(values, jac, self.num_cells))
    }

    /// `C(s) = g(phi_task[cell]) + g(phi_global[cell])`; the Jacobian indexes
    /// the concatenation `[phi_task, phi_global]`.
    pub fn cost_with_global(&self, phi: &[f64], global: &[f64]) -> Result<CostFunction, crate::error::MdpError> {
        self.check(phi)?;
        self.check(global)?;
        let mut values = Vec::with_capacity(self.num_states());
        let mut jac = Vec::with_capacity(self.num_states());
        for &cell in &self.cell_of_state {
            let (c, dc) = self.link.apply(phi[cell]);
            let (cg, dcg) = self.link.apply(global[cell]);
            values.push(c + cg);
            jac.push(vec![(cell, dc), (self.num_cells + cell, dcg)]);
        }
        Ok(CostFunction::with_jacobian(values, jac, 2 * self.num_cells))
    }
}

/// A loaded environment with its ground truth.
#[derive(Clone, Debug)]
pub struct Environment {
    pub spec: GridSpec,
    pub coding: StateCoding,
    pub true_model: TransitionModel,
    pub true_costs: Vec<CostFunction>,
    /// Goal states per task.
    pub goal_states: Vec<Vec<bool>>,
    pub initial: InitialDistribution,
    pub initial_states: Vec<usize>,
    /// Non-fatal findings, e.g. goals unreachable under the true dynamics.
    pub warnings: Vec<String>,
}

impl Environment {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        Self::from_spec(GridSpec::from_path(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self, EnvError> {
        Self::from_spec(GridSpec::parse(text)?)
    }

    pub fn from_spec(spec: GridSpec) -> Result<Self, EnvError> {
        let coding = StateCoding::for_spec(&spec);
        let true_model = match spec.domain {
            Domain::Navigation => navigation_model(&spec, &Rules::Truth),
            Domain::Farming => farming_model(&spec, &Rules::Truth),
            Domain::Gravity => gravity_model(&spec, &Rules::Truth),
        };
        true_model.validate()?;
        let ns = coding.num_states();
        let goal_states: Vec<Vec<bool>> = spec
            .tasks
            .iter()
            .map(|t| {
                let goal_cells: Vec<usize> = t.goals.iter().map(|&(x, y)| spec.cell_index(x, y)).collect();
                (0..ns).map(|s| goal_cells.contains(&coding.decode(s).0)).collect()
            })
            .collect();
        let true_costs = goal_states
            .iter()
            .map(|g| CostFunction::fixed(g.iter().map(|&b| if b { -GOAL_REWARD } else { 0.0 }).collect()))
            .collect();
        let start_feature = match spec.domain {
            Domain::Navigation => 0,
            Domain::Farming => implement_feature(spec.start_implement),
            Domain::Gravity => spec.start_gravity.index(),
        };
        let initial_states: Vec<usize> = spec
            .start_cells()
            .into_iter()
            .map(|c| coding.encode(c, start_feature))
            .collect();
        let initial = InitialDistribution::uniform(&initial_states)?;

        let mut warnings = Vec::new();
        let reachable = reachable_states(&true_model, &initial_states);
        for (t, goals) in spec.tasks.iter().zip(&goal_states) {
            if !goals.iter().zip(&reachable).any(|(&g, &r)| g && r) {
                warnings.push(format!("task `{}`: no goal state is reachable from the start region", t.name));
            }
        }
        Ok(Self {
            spec,
            coding,
            true_model,
            true_costs,
            goal_states,
            initial,
            initial_states,
            warnings,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.spec.tasks.len()
    }

    pub fn num_states(&self) -> usize {
        self.coding.num_states()
    }

    pub fn family(&self) -> DynamicsFamily {
        DynamicsFamily::for_spec(&self.spec)
    }

    pub fn cost_model(&self, link: CostLink) -> CellCostModel {
        CellCostModel::new(self.coding.cell_of_state(), self.coding.num_cells, link)
    }

    /// Ground-truth parameters where the family can represent them
    /// (`±saturation` logits standing in for probabilities 0 and 1).
    pub fn planted_theta(&self, saturation: f64) -> Vec<f64> {
        match self.spec.domain {
            Domain::Navigation => self
                .spec
                .cells
                .iter()
                .map(|c| if *c == Cell::Obstacle { saturation } else { -saturation })
                .collect(),
            Domain::Farming => (0..9)
                .map(|i| if i / 3 == i % 3 { saturation } else { -saturation })
                .collect(),
            Domain::Gravity => {
                let mut theta = vec![-saturation; 4 * self.spec.num_colors()];
                for &(c, d) in &self.spec.color_directions {
                    theta[4 * c as usize + d.index()] = saturation;
                }
                theta
            }
        }
    }

    pub fn is_goal(&self, task: usize, state: usize) -> bool {
        self.goal_states[task][state]
    }

    /// Feature value a manually placed agent gets.
    pub fn start_feature(&self) -> usize {
        match self.spec.domain {
            Domain::Navigation => 0,
            Domain::Farming => implement_feature(self.spec.start_implement),
            Domain::Gravity => self.spec.start_gravity.index(),
        }
    }
}

fn reachable_states(model: &TransitionModel, from: &[usize]) -> Vec<bool> {
    let mut seen = vec![false; model.num_states()];
    let mut stack: Vec<usize> = from.to_vec();
    for &s in from {
        seen[s] = true;
    }
    while let Some(s) = stack.pop() {
        for a in 0..model.num_actions() {
            for o in model.support(s, a) {
                if o.prob > 0.0 && !seen[o.next] {
                    seen[o.next] = true;
                    stack.push(o.next);
                }
            }
        }
    }
    seen
}
