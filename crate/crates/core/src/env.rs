//! Continuous 2D three-corridor navigation task.
//!
//! The unit square holds a bottom chamber with the start, a top chamber with
//! the goal disc, and three vertical corridors (left, middle, right) joining
//! them. Each corridor has a blockade slot at mid-height that can be switched
//! on to cut it. Movement is kinematic: `position += step_size * action`,
//! resolved per axis (x first, then y); an axis move that would touch a wall
//! is cancelled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    fn hit_by_horizontal(&self, y: f64, xa: f64, xb: f64) -> bool {
        y >= self.y0 && y <= self.y1 && xa.min(xb) <= self.x1 && xa.max(xb) >= self.x0
    }

    fn hit_by_vertical(&self, x: f64, ya: f64, yb: f64) -> bool {
        x >= self.x0 && x <= self.x1 && ya.min(yb) <= self.y1 && ya.max(yb) >= self.y0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corridor {
    Left,
    Middle,
    Right,
}

impl Corridor {
    pub const ALL: [Corridor; 3] = [Corridor::Left, Corridor::Middle, Corridor::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Corridor::Left => "left",
            Corridor::Middle => "middle",
            Corridor::Right => "right",
        }
    }
}

impl std::str::FromStr for Corridor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Corridor::Left),
            "middle" => Ok(Corridor::Middle),
            "right" => Ok(Corridor::Right),
            other => Err(Error::Config(format!("unknown corridor `{other}`"))),
        }
    }
}

impl std::fmt::Display for Corridor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Tunable layout and dynamics. Defaults reproduce the three-path maze.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub corridor_centers: [f64; 3],
    pub corridor_width: f64,
    pub chamber_height: f64,
    pub blockade_height: f64,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub reset_noise: f64,
    pub step_size: f64,
    pub step_cap: usize,
    pub step_reward: f64,
    pub goal_reward: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            corridor_centers: [0.2, 0.5, 0.8],
            corridor_width: 0.12,
            chamber_height: 0.15,
            blockade_height: 0.06,
            start: [0.5, 0.075],
            goal: [0.5, 0.925],
            goal_radius: 0.05,
            reset_noise: 0.01,
            step_size: 0.03,
            step_cap: 300,
            step_reward: -0.1,
            goal_reward: 10.0,
        }
    }
}

impl EnvConfig {
    /// A degenerate layout whose goal disc covers the start region, so the
    /// first step of every episode reaches the goal.
    pub fn trivial() -> Self {
        let base = Self::default();
        Self {
            goal: base.start,
            goal_radius: 0.07,
            ..base
        }
    }
}

/// Static layout: bounds, walls, corridor bands, goal, start, blockade slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldGeometry {
    pub bounds: Rect,
    pub walls: Vec<Rect>,
    pub corridors: [Rect; 3],
    pub goal_center: [f64; 2],
    pub goal_radius: f64,
    pub start: [f64; 2],
    pub blockade_slots: [Rect; 3],
}

impl WorldGeometry {
    pub fn from_config(cfg: &EnvConfig) -> Result<Self> {
        let (lo, hi) = (cfg.chamber_height, 1.0 - cfg.chamber_height);
        if !(0.0 < lo && lo < hi) {
            return Err(Error::Config(format!(
                "chamber_height {} leaves no corridor band",
                cfg.chamber_height
            )));
        }
        let half = cfg.corridor_width / 2.0;
        let corridors = cfg
            .corridor_centers
            .map(|c| Rect::new(c - half, lo, c + half, hi));
        for pair in corridors.windows(2) {
            if pair[0].x1 > pair[1].x0 {
                return Err(Error::Config("corridors overlap or are unordered".into()));
            }
        }
        if corridors[0].x0 < 0.0 || corridors[2].x1 > 1.0 {
            return Err(Error::Config("corridor outside the unit square".into()));
        }

        // Solid blocks fill the corridor band between the corridors.
        let mut walls = Vec::new();
        let mut x = 0.0;
        for c in &corridors {
            if c.x0 > x {
                walls.push(Rect::new(x, lo, c.x0, hi));
            }
            x = c.x1;
        }
        if x < 1.0 {
            walls.push(Rect::new(x, lo, 1.0, hi));
        }

        let mid = 0.5 * (lo + hi);
        let bh = cfg.blockade_height / 2.0;
        let blockade_slots = corridors.map(|c| Rect::new(c.x0, mid - bh, c.x1, mid + bh));

        let geo = Self {
            bounds: Rect::new(0.0, 0.0, 1.0, 1.0),
            walls,
            corridors,
            goal_center: cfg.goal,
            goal_radius: cfg.goal_radius,
            start: cfg.start,
            blockade_slots,
        };
        if geo.blocked(cfg.start[0], cfg.start[1], &[false; 3]) {
            return Err(Error::Config("start lies inside a wall".into()));
        }
        if geo.walls.iter().any(|w| disc_hits_rect(cfg.goal, cfg.goal_radius, w)) {
            return Err(Error::Config("goal disc intersects a wall".into()));
        }
        Ok(geo)
    }

    /// True if the point is outside the bounds, in a wall, or in an active
    /// blockade.
    pub fn blocked(&self, x: f64, y: f64, blockades: &[bool; 3]) -> bool {
        !self.bounds.contains(x, y)
            || self.walls.iter().any(|w| w.contains(x, y))
            || self
                .blockade_slots
                .iter()
                .zip(blockades)
                .any(|(r, &on)| on && r.contains(x, y))
    }

    fn horizontal_blocked(&self, y: f64, xa: f64, xb: f64, blockades: &[bool; 3]) -> bool {
        !self.bounds.contains(xb, y)
            || self.walls.iter().any(|w| w.hit_by_horizontal(y, xa, xb))
            || self
                .blockade_slots
                .iter()
                .zip(blockades)
                .any(|(r, &on)| on && r.hit_by_horizontal(y, xa, xb))
    }

    fn vertical_blocked(&self, x: f64, ya: f64, yb: f64, blockades: &[bool; 3]) -> bool {
        !self.bounds.contains(x, yb)
            || self.walls.iter().any(|w| w.hit_by_vertical(x, ya, yb))
            || self
                .blockade_slots
                .iter()
                .zip(blockades)
                .any(|(r, &on)| on && r.hit_by_vertical(x, ya, yb))
    }

    pub fn in_goal(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.goal_center[0], y - self.goal_center[1]);
        dx * dx + dy * dy <= self.goal_radius * self.goal_radius
    }

    /// Corridor whose band contains the point. Bands are tested left to
    /// right with closed bounds, so a point on a shared boundary belongs to
    /// the lower-indexed corridor.
    pub fn corridor_of(&self, x: f64, y: f64) -> Option<Corridor> {
        Corridor::ALL
            .into_iter()
            .find(|c| self.corridors[c.index()].contains(x, y))
    }

    /// Mid-height of the corridor band.
    pub fn mid_height(&self) -> f64 {
        0.5 * (self.corridors[0].y0 + self.corridors[0].y1)
    }

    /// Stable textual fingerprint of the layout.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("geometry serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}

fn disc_hits_rect(c: [f64; 2], r: f64, rect: &Rect) -> bool {
    let nx = c[0].clamp(rect.x0, rect.x1);
    let ny = c[1].clamp(rect.y0, rect.y1);
    let (dx, dy) = (c[0] - nx, c[1] - ny);
    dx * dx + dy * dy <= r * r
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub steps_elapsed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub terminal: bool,
    /// The goal disc was entered on this step.
    pub reached_goal: bool,
    /// At least one axis move was cancelled by a wall.
    pub collided: bool,
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    geometry: WorldGeometry,
    blockades: [bool; 3],
    state: EnvState,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        let geometry = WorldGeometry::from_config(&cfg)?;
        let state = EnvState {
            position: cfg.start,
            steps_elapsed: 0,
        };
        Ok(Self {
            cfg,
            geometry,
            blockades: [false; 3],
            state,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &WorldGeometry {
        &self.geometry
    }

    pub fn blockades(&self) -> [bool; 3] {
        self.blockades
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    /// Start position plus seeded uniform noise in a disc.
    pub fn reset(&mut self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.cfg.reset_noise * rng.random::<f64>().sqrt();
        let theta = std::f64::consts::TAU * rng.random::<f64>();
        let [sx, sy] = self.cfg.start;
        let mut position = [sx + r * theta.cos(), sy + r * theta.sin()];
        if self.geometry.blocked(position[0], position[1], &self.blockades) {
            position = self.cfg.start;
        }
        self.state = EnvState {
            position,
            steps_elapsed: 0,
        };
        self.state
    }

    /// Pure transition from `state` under the current blockades.
    pub fn transition(&self, state: &EnvState, action: &[f64]) -> StepResult {
        let ax = action.first().copied().unwrap_or(0.0).clamp(-1.0, 1.0);
        let ay = action.get(1).copied().unwrap_or(0.0).clamp(-1.0, 1.0);
        let [mut x, mut y] = state.position;
        let mut collided = false;

        let nx = x + self.cfg.step_size * ax;
        if nx != x {
            if self.geometry.horizontal_blocked(y, x, nx, &self.blockades) {
                collided = true;
            } else {
                x = nx;
            }
        }
        let ny = y + self.cfg.step_size * ay;
        if ny != y {
            if self.geometry.vertical_blocked(x, y, ny, &self.blockades) {
                collided = true;
            } else {
                y = ny;
            }
        }

        let steps_elapsed = state.steps_elapsed + 1;
        let reached_goal = self.geometry.in_goal(x, y);
        let reward = self.cfg.step_reward + if reached_goal { self.cfg.goal_reward } else { 0.0 };
        StepResult {
            next_state: EnvState {
                position: [x, y],
                steps_elapsed,
            },
            reward,
            terminal: reached_goal || steps_elapsed >= self.cfg.step_cap,
            reached_goal,
            collided,
        }
    }

    pub fn step(&mut self, action: &[f64]) -> StepResult {
        let res = self.transition(&self.state, action);
        self.state = res.next_state;
        res
    }

    /// Replaces the state; fails if the position is not collision-free
    /// under the current blockades.
    pub fn set_state(&mut self, position: [f64; 2], steps_elapsed: usize) -> Result<EnvState> {
        let [x, y] = position;
        if !x.is_finite() || !y.is_finite() || self.geometry.blocked(x, y, &self.blockades) {
            return Err(Error::Collision { x, y });
        }
        self.state = EnvState {
            position,
            steps_elapsed,
        };
        Ok(self.state)
    }

    pub fn set_blockade(&mut self, corridor: Corridor, active: bool) {
        self.blockades[corridor.index()] = active;
    }

    pub fn corridor_of(&self, position: [f64; 2]) -> Option<Corridor> {
        self.geometry.corridor_of(position[0], position[1])
    }

    pub fn is_free(&self, position: [f64; 2]) -> bool {
        !self.geometry.blocked(position[0], position[1], &self.blockades)
    }
}

/// Geometry document consumed by the plot emitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryExport {
    pub format: String,
    pub version: u32,
    pub geometry: WorldGeometry,
    pub active_blockades: Vec<Corridor>,
}

impl GeometryExport {
    pub const FORMAT: &'static str = "novelty-sac/geometry";

    pub fn from_env(env: &Env) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: 1,
            geometry: env.geometry.clone(),
            active_blockades: Corridor::ALL
                .into_iter()
                .filter(|c| env.blockades[c.index()])
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("line {}: {e}", e.line())))?;
        if doc.format != Self::FORMAT || doc.version != 1 {
            return Err(Error::Parse(format!(
                "expected {} v1, found {} v{}",
                Self::FORMAT,
                doc.format,
                doc.version
            )));
        }
        Ok(doc)
    }
}
