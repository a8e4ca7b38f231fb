//! Goal-navigation environment: episode layout, proximity sensing,
//! observation assembly, shaped rewards and termination.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{RngState, StreamRng};
use crate::rover::{
    step_pose, wrap_angle, BodyCommand, RoverGeometry, RoverLimits, RoverState, Traction,
};
use crate::terrain::{Heightfield, TerrainConfig};

/// Detection range of the avoidance filters.
pub const SENSOR_RANGE: f64 = 3.0;
/// Full angular width of each filter sector.
pub const SENSOR_SECTOR: f64 = 2.0 * PI / 3.0;
/// Minimum center distance between obstacles, start and goal.
pub const PLACEMENT_CLEARANCE: f64 = 1.5;
/// Start and goal are kept this far inside the arena edge.
pub const PLACEMENT_MARGIN: f64 = 1.0;
pub const PLACEMENT_ATTEMPTS: usize = 10_000;
/// Per-wheel speed above which the speed term turns negative.
pub const INSTABILITY_THRESHOLD: f64 = 2.0;
/// Filter activation above which the obstacle penalty fires.
pub const OBSTACLE_ACTIVATION: f64 = 0.5;
pub const DEFAULT_EPISODE_MAX_STEPS: usize = 1_000;

pub const R_ALIVE: f64 = 1.0;
pub const R_SUCCESS: f64 = 20.0;
pub const R_RESET: f64 = 2.0;
pub const R_FORWARD: f64 = 0.6;
pub const R_BACKWARD: f64 = 0.3;
pub const R_SPEED: f64 = 0.6;
pub const P_OBSTACLE: f64 = -1.0;

pub const OBS_DIM: usize = 12;
/// Scale for positions and goal offsets in the policy input.
pub const POSITION_SCALE: f64 = 15.0;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("episode placement infeasible: {0}")]
    Placement(String),
    #[error("environment is terminal; reset it before stepping")]
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObstacleKind {
    #[serde(rename = "tree")]
    TreeCylinder,
    #[serde(rename = "rock")]
    RockDome,
}

impl ObstacleKind {
    pub fn default_radius(self) -> f64 {
        match self {
            ObstacleKind::TreeCylinder => 0.3,
            ObstacleKind::RockDome => 0.5,
        }
    }
}

/// Goal placement policy. Text form: `random` or `fixed(x,y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GoalMode {
    RandomizedPerEpisode,
    Fixed(f64, f64),
}

impl fmt::Display for GoalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GoalMode::RandomizedPerEpisode => write!(f, "random"),
            GoalMode::Fixed(x, y) => write!(f, "fixed({x:?},{y:?})"),
        }
    }
}

impl FromStr for GoalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "random" {
            return Ok(GoalMode::RandomizedPerEpisode);
        }
        let inner = s
            .strip_prefix("fixed(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("goal must be `random` or `fixed(x,y)`, got `{s}`"))?;
        let mut parts = inner.split(',').map(|p| p.trim().parse::<f64>());
        match (parts.next(), parts.next(), parts.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) if x.is_finite() && y.is_finite() => {
                Ok(GoalMode::Fixed(x, y))
            }
            _ => Err(format!("cannot parse goal coordinates in `{s}`")),
        }
    }
}

impl TryFrom<String> for GoalMode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<GoalMode> for String {
    fn from(g: GoalMode) -> String {
        g.to_string()
    }
}

/// Physical and layout parameters distinguishing the farm and lunar domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainConfig {
    pub gravity: f64,
    pub friction: f64,
    pub obstacle_kind: ObstacleKind,
    pub obstacle_count: usize,
    pub obstacle_radius: f64,
    pub arena_size: f64,
    pub goal_mode: GoalMode,
    pub terrain: TerrainConfig,
}

impl DomainConfig {
    pub fn farm(terrain: TerrainConfig) -> Self {
        Self {
            gravity: 9.81,
            friction: 0.8,
            obstacle_kind: ObstacleKind::TreeCylinder,
            obstacle_count: 10,
            obstacle_radius: ObstacleKind::TreeCylinder.default_radius(),
            arena_size: 15.0,
            goal_mode: GoalMode::RandomizedPerEpisode,
            terrain,
        }
    }

    pub fn lunar(terrain: TerrainConfig) -> Self {
        Self {
            gravity: 1.62,
            friction: 0.45,
            obstacle_kind: ObstacleKind::RockDome,
            obstacle_radius: ObstacleKind::RockDome.default_radius(),
            goal_mode: GoalMode::Fixed(6.0, 6.0),
            ..Self::farm(terrain)
        }
    }

    pub fn traction(&self) -> Traction {
        Traction {
            gravity: self.gravity,
            friction: self.friction,
        }
    }

    pub fn half_extent(&self) -> f64 {
        0.5 * self.arena_size
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.gravity > 0.0) {
            return Err(format!("g must be > 0, got {}", self.gravity));
        }
        if !(self.friction > 0.0) {
            return Err(format!("mu must be > 0, got {}", self.friction));
        }
        if !(self.arena_size > 0.0) {
            return Err(format!("arena_size must be > 0, got {}", self.arena_size));
        }
        if !(self.obstacle_radius >= 0.0) {
            return Err(format!("obstacle_radius must be >= 0, got {}", self.obstacle_radius));
        }
        if let GoalMode::Fixed(x, y) = self.goal_mode {
            let lim = self.half_extent() - PLACEMENT_MARGIN;
            if x.abs() > lim || y.abs() > lim {
                return Err(format!("fixed goal ({x}, {y}) lies outside the placeable arena ±{lim}"));
            }
        }
        self.terrain.validate().map_err(|e| e.to_string())
    }
}

/// Everything an environment instance needs besides its RNG and terrain.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSettings {
    pub domain: DomainConfig,
    pub geometry: RoverGeometry,
    pub limits: RoverLimits,
    pub episode_max_steps: usize,
}

impl EnvSettings {
    pub fn new(domain: DomainConfig) -> Self {
        Self {
            domain,
            geometry: RoverGeometry::default(),
            limits: RoverLimits::default(),
            episode_max_steps: DEFAULT_EPISODE_MAX_STEPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    /// `(x, y, heading)`.
    pub start: (f64, f64, f64),
    pub goal: (f64, f64),
    pub obstacles: Vec<Obstacle>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Samples start, goal and obstacles for a new episode.
///
/// Start and goal are uniform within the arena inset by
/// [`PLACEMENT_MARGIN`] and at least half the arena diagonal apart.
/// Obstacles are uniform within the arena and keep [`PLACEMENT_CLEARANCE`]
/// (center distance) from start, goal and each other.
pub fn place_episode(domain: &DomainConfig, rng: &mut StreamRng) -> Result<Layout, EnvError> {
    let half = domain.half_extent();
    let inner = half - PLACEMENT_MARGIN;
    if inner <= 0.0 {
        return Err(EnvError::Placement(format!(
            "arena of {} m leaves no room inside the {PLACEMENT_MARGIN} m margin",
            domain.arena_size
        )));
    }
    let separation = domain.arena_size * std::f64::consts::SQRT_2 / 2.0;

    let mut placed = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let start = (rng.uniform_range(-inner, inner), rng.uniform_range(-inner, inner));
        let goal = match domain.goal_mode {
            GoalMode::Fixed(x, y) => (x, y),
            GoalMode::RandomizedPerEpisode => {
                (rng.uniform_range(-inner, inner), rng.uniform_range(-inner, inner))
            }
        };
        if dist(start, goal) >= separation {
            placed = Some((start, goal));
            break;
        }
    }
    let (start, goal) = placed.ok_or_else(|| {
        EnvError::Placement(format!(
            "no start/goal pair {separation:.3} m apart after {PLACEMENT_ATTEMPTS} attempts"
        ))
    })?;
    let heading = rng.uniform_range(-PI, PI);

    let r = domain.obstacle_radius;
    let span = half - r;
    let mut obstacles: Vec<Obstacle> = Vec::with_capacity(domain.obstacle_count);
    for i in 0..domain.obstacle_count {
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = (rng.uniform_range(-span, span), rng.uniform_range(-span, span));
            let clear = dist(c, start) >= PLACEMENT_CLEARANCE
                && dist(c, goal) >= PLACEMENT_CLEARANCE
                && obstacles
                    .iter()
                    .all(|o| dist(c, (o.x, o.y)) >= PLACEMENT_CLEARANCE);
            if clear {
                ok = Some(c);
                break;
            }
        }
        let (x, y) = ok.ok_or_else(|| {
            EnvError::Placement(format!(
                "obstacle {i} of {} found no clear spot after {PLACEMENT_ATTEMPTS} attempts",
                domain.obstacle_count
            ))
        })?;
        obstacles.push(Obstacle { x, y, radius: r });
    }

    Ok(Layout {
        start: (start.0, start.1, heading),
        goal,
        obstacles,
    })
}

/// Distance from the origin to the nearest point of the disk centered at
/// `(cx, cy)` that lies in the sensor wedge around `axis`. Infinite when the
/// disk misses the wedge.
fn wedge_distance(cx: f64, cy: f64, radius: f64, axis: f64) -> f64 {
    let half_width = 0.5 * SENSOR_SECTOR;
    let center = cx.hypot(cy);
    if center <= radius {
        return 0.0;
    }
    if wrap_angle(cy.atan2(cx) - axis).abs() <= half_width {
        return center - radius;
    }
    // Center outside the wedge: the disk can only enter through a boundary ray.
    [axis - half_width, axis + half_width]
        .iter()
        .filter_map(|&a| {
            let (ux, uy) = (a.cos(), a.sin());
            let along = cx * ux + cy * uy;
            let perp2 = center * center - along * along;
            let chord2 = radius * radius - perp2;
            (chord2 >= 0.0 && along >= 0.0).then(|| (along - chord2.sqrt()).max(0.0))
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sector {
    Front,
    Rear,
}

/// Proximity activation `max(0, 1 − d_min / R)` over a 120° sector, where
/// `d_min` is the distance from the rover center to the nearest point of any
/// obstacle disk that lies inside the sector wedge. An obstacle whose center
/// is outside the wedge still registers if its surface reaches into it.
pub fn avoidance_filter(state: &RoverState, obstacles: &[Obstacle], sector: Sector) -> f64 {
    let axis = match sector {
        Sector::Front => state.heading,
        Sector::Rear => state.heading + PI,
    };
    let d_min = obstacles
        .iter()
        .map(|o| wedge_distance(o.x - state.x, o.y - state.y, o.radius, axis))
        .fold(f64::INFINITY, f64::min);
    if d_min >= SENSOR_RANGE {
        0.0
    } else {
        (1.0 - d_min / SENSOR_RANGE).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
    /// Bearing of the goal relative to the heading.
    pub theta: f64,
    pub heading: f64,
    pub f_front: f64,
    pub f_rear: f64,
    pub wheel_speeds: [f64; 4],
}

impl Observation {
    pub fn to_array(&self) -> [f64; OBS_DIM] {
        let w = self.wheel_speeds;
        [
            self.x,
            self.y,
            self.dx,
            self.dy,
            self.theta,
            self.heading,
            self.f_front,
            self.f_rear,
            w[0],
            w[1],
            w[2],
            w[3],
        ]
    }

    /// Policy input: positions and offsets /15, angles /π, speeds /v_max.
    pub fn normalized(&self, v_max: f64) -> [f64; OBS_DIM] {
        let w = self.wheel_speeds;
        [
            self.x / POSITION_SCALE,
            self.y / POSITION_SCALE,
            self.dx / POSITION_SCALE,
            self.dy / POSITION_SCALE,
            self.theta / PI,
            self.heading / PI,
            self.f_front,
            self.f_rear,
            w[0] / v_max,
            w[1] / v_max,
            w[2] / v_max,
            w[3] / v_max,
        ]
    }

    pub fn goal_distance(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

pub fn compute_observation(state: &RoverState, goal: (f64, f64), obstacles: &[Obstacle]) -> Observation {
    let dx = goal.0 - state.x;
    let dy = goal.1 - state.y;
    Observation {
        x: state.x,
        y: state.y,
        dx,
        dy,
        theta: wrap_angle(dy.atan2(dx) - state.heading),
        heading: state.heading,
        f_front: avoidance_filter(state, obstacles, Sector::Front),
        f_rear: avoidance_filter(state, obstacles, Sector::Rear),
        wheel_speeds: state.wheel_speeds,
    }
}

/// `3 (0.8 − tanh(d / 15))`.
pub fn reward_distance(d: f64) -> f64 {
    3.0 * (0.8 - (d / 15.0).tanh())
}

/// `0.6 (−0.9 − tanh((θ − 1) / 0.1))`.
pub fn reward_angle(theta: f64) -> f64 {
    0.6 * (-0.9 - ((theta - 1.0) / 0.1).tanh())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeKind {
    Success,
    Collision,
    OutOfBounds,
    Timeout,
}

impl OutcomeKind {
    pub fn is_success(self) -> bool {
        self == OutcomeKind::Success
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Success => "success",
            OutcomeKind::Collision => "collision",
            OutcomeKind::OutOfBounds => "out_of_bounds",
            OutcomeKind::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Running,
    Terminal(OutcomeKind),
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Terminal(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub kind: OutcomeKind,
    pub steps: usize,
    pub final_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardBreakdown {
    pub r_alive: f64,
    pub r_distance: f64,
    pub r_angle: f64,
    pub r_success: f64,
    pub r_reset: f64,
    pub r_forward_backward: f64,
    pub r_speed: f64,
    pub p_obstacle: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.r_alive
            + self.r_distance
            + self.r_angle
            + self.r_success
            + self.r_reset
            + self.r_forward_backward
            + self.r_speed
            + self.p_obstacle
    }
}

/// Shaped reward for the transition `prev → cur`.
///
/// * alive: +1 unless the step is terminal
/// * distance, angle: the tanh-shaped terms at the new pose, angle on `|θ|`
/// * success +20; reset +2 on success, −2 on any failure
/// * forward: +0.6 when the goal distance strictly decreased
/// * backward: while reversing, +0.3 if a filter is active, −0.3 otherwise
/// * speed: when moving, +0.6 if every wheel is within the instability
///   threshold, −0.6 otherwise
/// * obstacle: −1 when a filter exceeds 0.5 or the step is a collision
pub fn compute_reward(
    prev: &RoverState,
    cur: &RoverState,
    obs: &Observation,
    goal: (f64, f64),
    track_width: f64,
    status: Status,
) -> RewardBreakdown {
    let outcome = match status {
        Status::Running => None,
        Status::Terminal(kind) => Some(kind),
    };
    let mut r = RewardBreakdown {
        r_alive: if outcome.is_none() { R_ALIVE } else { 0.0 },
        r_distance: reward_distance(obs.goal_distance()),
        r_angle: reward_angle(obs.theta.abs()),
        ..RewardBreakdown::default()
    };
    match outcome {
        Some(OutcomeKind::Success) => {
            r.r_success = R_SUCCESS;
            r.r_reset = R_RESET;
        }
        Some(_) => r.r_reset = -R_RESET,
        None => {}
    }

    let prev_d = dist((prev.x, prev.y), goal);
    if obs.goal_distance() < prev_d {
        r.r_forward_backward += R_FORWARD;
    }
    let (v, _) = cur.body_twist(track_width);
    let detecting = obs.f_front > 0.0 || obs.f_rear > 0.0;
    if v < 0.0 {
        r.r_forward_backward += if detecting { R_BACKWARD } else { -R_BACKWARD };
    }

    let moving = cur.wheel_speeds.iter().any(|w| *w != 0.0);
    if moving {
        let stable = cur
            .wheel_speeds
            .iter()
            .all(|w| w.abs() <= INSTABILITY_THRESHOLD);
        r.r_speed = if stable { R_SPEED } else { -R_SPEED };
    }

    if obs.f_front.max(obs.f_rear) > OBSTACLE_ACTIVATION || outcome == Some(OutcomeKind::Collision) {
        r.p_obstacle = P_OBSTACLE;
    }
    r.total = r.component_sum();
    r
}

/// Episode status with priority Success > Collision > OutOfBounds > Timeout.
pub fn check_termination(
    state: &RoverState,
    goal: (f64, f64),
    obstacles: &[Obstacle],
    step_count: usize,
    geometry: &RoverGeometry,
    arena_size: f64,
    episode_max_steps: usize,
) -> Status {
    let pos = (state.x, state.y);
    if dist(pos, goal) <= geometry.goal_radius {
        return Status::Terminal(OutcomeKind::Success);
    }
    let footprint = geometry.footprint_radius();
    if obstacles
        .iter()
        .any(|o| dist(pos, (o.x, o.y)) - o.radius - footprint <= 0.0)
    {
        return Status::Terminal(OutcomeKind::Collision);
    }
    let half = 0.5 * arena_size;
    if state.out_of_bounds || state.x.abs() > half || state.y.abs() > half {
        return Status::Terminal(OutcomeKind::OutOfBounds);
    }
    if step_count >= episode_max_steps {
        return Status::Terminal(OutcomeKind::Timeout);
    }
    Status::Running
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub status: Status,
    pub outcome: Option<EpisodeOutcome>,
}

/// Serializable mid-episode state of an [`Env`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub state: RoverState,
    pub goal: (f64, f64),
    pub obstacles: Vec<Obstacle>,
    pub step_count: usize,
    pub terminal: bool,
    pub rng: RngState,
}

/// One rover in one arena. Owns its RNG stream.
#[derive(Debug, Clone)]
pub struct Env {
    settings: Arc<EnvSettings>,
    terrain: Arc<Heightfield>,
    rng: StreamRng,
    state: RoverState,
    goal: (f64, f64),
    obstacles: Vec<Obstacle>,
    step_count: usize,
    terminal: bool,
}

impl Env {
    /// A new environment; it must be [`reset`](Env::reset) before stepping.
    pub fn new(settings: Arc<EnvSettings>, terrain: Arc<Heightfield>, rng: StreamRng) -> Self {
        let state = RoverState::at_rest(0.0, 0.0, 0.0, &terrain);
        Self {
            settings,
            terrain,
            rng,
            state,
            goal: (0.0, 0.0),
            obstacles: Vec::new(),
            step_count: 0,
            terminal: true,
        }
    }

    pub fn settings(&self) -> &EnvSettings {
        &self.settings
    }

    pub fn state(&self) -> &RoverState {
        &self.state
    }

    pub fn goal(&self) -> (f64, f64) {
        self.goal
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn observation(&self) -> Observation {
        compute_observation(&self.state, self.goal, &self.obstacles)
    }

    /// Places a new episode and returns its first observation.
    pub fn reset(&mut self) -> Result<Observation, EnvError> {
        let layout = place_episode(&self.settings.domain, &mut self.rng)?;
        self.load_layout(&layout);
        Ok(self.observation())
    }

    /// Starts an episode from an explicit layout.
    pub fn load_layout(&mut self, layout: &Layout) {
        let (x, y, heading) = layout.start;
        self.state = RoverState::at_rest(x, y, heading, &self.terrain);
        self.goal = layout.goal;
        self.obstacles = layout.obstacles.clone();
        self.step_count = 0;
        self.terminal = false;
    }

    pub fn layout(&self) -> Layout {
        Layout {
            start: (self.state.x, self.state.y, self.state.heading),
            goal: self.goal,
            obstacles: self.obstacles.clone(),
        }
    }

    /// Maps a normalized `[-1, 1]²` action onto the command limits and steps.
    pub fn step_normalized(&mut self, action: [f64; 2]) -> Result<Transition, EnvError> {
        let cmd = BodyCommand::from_normalized(action, &self.settings.limits);
        self.step(cmd)
    }

    pub fn step(&mut self, cmd: BodyCommand) -> Result<Transition, EnvError> {
        if self.terminal {
            return Err(EnvError::Terminal);
        }
        let s = &*self.settings;
        let cmd = cmd.clamped(&s.limits);
        let prev = self.state;
        self.state = step_pose(
            &prev,
            cmd,
            s.domain.traction(),
            &s.geometry,
            &self.terrain,
            s.limits.dt,
        );
        self.step_count += 1;
        let observation = compute_observation(&self.state, self.goal, &self.obstacles);
        let status = check_termination(
            &self.state,
            self.goal,
            &self.obstacles,
            self.step_count,
            &s.geometry,
            s.domain.arena_size,
            s.episode_max_steps,
        );
        let reward = compute_reward(
            &prev,
            &self.state,
            &observation,
            self.goal,
            s.geometry.track_width,
            status,
        );
        let outcome = match status {
            Status::Terminal(kind) => {
                self.terminal = true;
                Some(EpisodeOutcome {
                    kind,
                    steps: self.step_count,
                    final_distance: observation.goal_distance(),
                })
            }
            Status::Running => None,
        };
        Ok(Transition {
            observation,
            reward,
            status,
            outcome,
        })
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            state: self.state,
            goal: self.goal,
            obstacles: self.obstacles.clone(),
            step_count: self.step_count,
            terminal: self.terminal,
            rng: self.rng.state(),
        }
    }

    pub fn restore(&mut self, snap: &EnvSnapshot) {
        self.state = snap.state;
        self.goal = snap.goal;
        self.obstacles = snap.obstacles.clone();
        self.step_count = snap.step_count;
        self.terminal = snap.terminal;
        self.rng = StreamRng::from_state(snap.rng);
    }
}
