//! Deterministic kinematic point maze.
//!
//! Cell `(row, col)` covers `x ∈ [col, col + 1]`, `y ∈ [row, row + 1]`.
//! Action `k` accelerates in direction `k · 45°`. Motion is resolved one axis
//! at a time so the point slides along walls instead of sticking to corners.

use rand::{Rng, RngCore};

use crate::envcore::{check_action, EnvSpec, Environment, GoalObservation, StepResult};
use crate::{Error, Result};

pub const MAZE_ACTIONS: usize = 8;

/// Keeps the point off the exact wall boundary so that every position lies
/// in the interior of a free cell.
const WALL_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MazeLayout {
    rows: usize,
    cols: usize,
    walls: Vec<bool>,
    start: (usize, usize),
    goal: (usize, usize),
}

impl MazeLayout {
    /// `#` wall, `.` free, `S` start cell, `G` default goal cell.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(Error::env("maze layout is empty"));
        }
        let cols = lines[0].chars().count();
        let rows = lines.len();
        let mut walls = Vec::with_capacity(rows * cols);
        let (mut start, mut goal) = (None, None);
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(Error::env(format!("maze row {} is not {cols} cells wide", r + 1)));
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' | 'G' => {
                        walls.push(false);
                        let slot = if ch == 'S' { &mut start } else { &mut goal };
                        if slot.replace((r, c)).is_some() {
                            return Err(Error::env(format!("maze has more than one `{ch}` cell")));
                        }
                    }
                    other => {
                        return Err(Error::env(format!(
                            "unknown maze cell `{other}` at row {}, column {}",
                            r + 1,
                            c + 1
                        )))
                    }
                }
            }
        }
        let layout = MazeLayout {
            rows,
            cols,
            walls,
            start: start.ok_or_else(|| Error::env("maze has no `S` cell"))?,
            goal: goal.ok_or_else(|| Error::env("maze has no `G` cell"))?,
        };
        for r in 0..rows {
            for c in 0..cols {
                let border = r == 0 || c == 0 || r + 1 == rows || c + 1 == cols;
                if border && !layout.is_wall(r as i64, c as i64) {
                    return Err(Error::env(format!(
                        "maze border cell at row {}, column {} is not a wall",
                        r + 1,
                        c + 1
                    )));
                }
            }
        }
        Ok(layout)
    }

    pub fn medium() -> Self {
        Self::parse(include_str!("../../data/maze_medium.txt")).expect("shipped layout is valid")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_wall(&self, row: i64, col: i64) -> bool {
        if row < 0 || col < 0 || row as usize >= self.rows || col as usize >= self.cols {
            return true;
        }
        self.walls[row as usize * self.cols + col as usize]
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.is_wall(r as i64, c as i64))
            .collect()
    }

    /// True when `p` lies strictly inside a wall cell.
    pub fn inside_wall(&self, p: [f64; 2]) -> bool {
        let (cx, cy) = (p[0].floor(), p[1].floor());
        let strict = p[0] > cx && p[1] > cy;
        strict && self.is_wall(cy as i64, cx as i64)
    }

    fn cell_center((r, c): (usize, usize)) -> [f64; 2] {
        [c as f64 + 0.5, r as f64 + 0.5]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MazeConfig {
    pub layout: MazeLayout,
    pub dt: f64,
    pub accel: f64,
    pub damping: f64,
    pub max_speed: f64,
    pub success_radius: f64,
    pub horizon: usize,
    /// Start from a random free cell instead of the `S` cell.
    pub random_start: bool,
    /// Always target the `G` cell instead of a random free cell.
    pub fixed_goal: bool,
    /// Uniform jitter around cell centres for start and goal positions.
    pub reset_noise: f64,
}

impl Default for MazeConfig {
    fn default() -> Self {
        MazeConfig {
            layout: MazeLayout::medium(),
            dt: 0.1,
            accel: 1.0,
            damping: 0.9,
            max_speed: 2.0,
            success_radius: 0.45,
            horizon: 300,
            random_start: true,
            fixed_goal: false,
            reset_noise: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MazeState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub t: usize,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct KinematicMaze {
    config: MazeConfig,
    spec: EnvSpec,
    free: Vec<(usize, usize)>,
    directions: [[f64; 2]; MAZE_ACTIONS],
}

impl KinematicMaze {
    pub fn new(config: MazeConfig) -> Result<Self> {
        let c = &config;
        if !(c.dt > 0.0 && c.accel >= 0.0 && c.max_speed > 0.0 && c.success_radius > 0.0) {
            return Err(Error::env("maze dt, max_speed and success_radius must be positive"));
        }
        if !(0.0..1.0).contains(&c.damping) {
            return Err(Error::env("maze damping must lie in [0, 1)"));
        }
        if c.horizon == 0 {
            return Err(Error::env("maze horizon must be positive"));
        }
        if !(0.0..0.5).contains(&c.reset_noise) {
            return Err(Error::env("maze reset_noise must lie in [0, 0.5)"));
        }
        let free = c.layout.free_cells();
        if free.len() < 2 {
            return Err(Error::env("maze needs at least two free cells"));
        }
        let directions = std::array::from_fn(|k| {
            let angle = (k as f64) * std::f64::consts::FRAC_PI_4;
            [angle.cos(), angle.sin()]
        });
        let spec = EnvSpec {
            action_count: MAZE_ACTIONS,
            horizon: c.horizon,
            feature_dim: 6,
            goal_dim: 2,
            value_scale: 1.0 / c.horizon as f64,
        };
        Ok(KinematicMaze {
            config,
            spec,
            free,
            directions,
        })
    }

    pub fn config(&self) -> &MazeConfig {
        &self.config
    }

    fn jitter(&self, cell: (usize, usize), rng: &mut dyn RngCore) -> [f64; 2] {
        let c = MazeLayout::cell_center(cell);
        let n = self.config.reset_noise;
        if n == 0.0 {
            return c;
        }
        [c[0] + rng.gen_range(-n..=n), c[1] + rng.gen_range(-n..=n)]
    }

    fn check_goal(&self, g: &[f64; 2]) -> Result<()> {
        let layout = &self.config.layout;
        let in_bounds = g.iter().all(|v| v.is_finite())
            && g[0] >= 0.0
            && g[1] >= 0.0
            && g[0] <= layout.cols as f64
            && g[1] <= layout.rows as f64;
        if !in_bounds || layout.is_wall(g[1].floor() as i64, g[0].floor() as i64) {
            return Err(Error::env(format!(
                "goal ({}, {}) is not inside a walkable cell",
                g[0], g[1]
            )));
        }
        Ok(())
    }

    fn distance(a: &[f64; 2], b: &[f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    /// Moves along one axis from `pos`, stopping at the boundary of a wall
    /// cell. Returns the new coordinate and whether the motion was blocked.
    fn slide(&self, pos: [f64; 2], axis: usize, delta: f64) -> (f64, bool) {
        let layout = &self.config.layout;
        let from = pos[axis];
        let to = from + delta;
        let cell = from.floor();
        let other = pos[1 - axis].floor() as i64;
        let wall_at = |c: f64| {
            let c = c as i64;
            if axis == 0 {
                layout.is_wall(other, c)
            } else {
                layout.is_wall(c, other)
            }
        };
        if delta > 0.0 && to >= cell + 1.0 && wall_at(cell + 1.0) {
            (cell + 1.0 - WALL_MARGIN, true)
        } else if delta < 0.0 && to < cell && wall_at(cell - 1.0) {
            (cell + WALL_MARGIN, true)
        } else {
            (to, false)
        }
    }
}

impl Environment for KinematicMaze {
    type State = MazeState;
    type Goal = [f64; 2];

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(
        &self,
        rng: &mut dyn RngCore,
        goal_override: Option<[f64; 2]>,
    ) -> Result<GoalObservation<MazeState, [f64; 2]>> {
        let goal = match goal_override {
            Some(g) => {
                self.check_goal(&g)?;
                g
            }
            None if self.config.fixed_goal => self.jitter(self.config.layout.goal, rng),
            None => self.jitter(self.free[rng.gen_range(0..self.free.len())], rng),
        };
        let pos = loop {
            let cell = if self.config.random_start {
                self.free[rng.gen_range(0..self.free.len())]
            } else {
                self.config.layout.start
            };
            let p = self.jitter(cell, rng);
            if Self::distance(&p, &goal) > self.config.success_radius {
                break p;
            }
            if !self.config.random_start && self.config.reset_noise == 0.0 {
                return Err(Error::env("goal lies within the success radius of the start"));
            }
        };
        let state = MazeState {
            pos,
            vel: [0.0; 2],
            t: 0,
            done: false,
        };
        Ok(self.observe(state, goal))
    }

    fn step(
        &self,
        state: &MazeState,
        desired: &[f64; 2],
        action: usize,
    ) -> Result<StepResult<MazeState, [f64; 2]>> {
        check_action(&self.spec, action)?;
        if state.done {
            return Err(Error::env("cannot step a terminal state"));
        }
        let c = &self.config;
        let dir = self.directions[action];
        let mut vel = [
            c.damping * state.vel[0] + c.accel * c.dt * dir[0],
            c.damping * state.vel[1] + c.accel * c.dt * dir[1],
        ];
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        if speed > c.max_speed {
            let s = c.max_speed / speed;
            vel = [vel[0] * s, vel[1] * s];
        }
        let mut pos = state.pos;
        for axis in 0..2 {
            let (p, blocked) = self.slide(pos, axis, vel[axis] * c.dt);
            pos[axis] = p;
            if blocked {
                vel[axis] = 0.0;
            }
        }
        let (reward, success) = self.compute_reward(&pos, desired)?;
        let t = state.t + 1;
        let terminal = success || t >= self.spec.horizon;
        let next = MazeState {
            pos,
            vel,
            t,
            done: terminal,
        };
        Ok(StepResult {
            observation: self.observe(next, *desired),
            reward,
            terminal,
            success,
        })
    }

    fn achieved_goal(&self, state: &MazeState) -> [f64; 2] {
        state.pos
    }

    fn compute_reward(&self, achieved: &[f64; 2], desired: &[f64; 2]) -> Result<(f64, bool)> {
        Ok(if Self::distance(achieved, desired) <= self.config.success_radius {
            (0.0, true)
        } else {
            (-1.0, false)
        })
    }

    fn legal_actions(&self, state: &MazeState) -> Result<Vec<bool>> {
        if state.done {
            return Err(Error::env("terminal state has no legal actions"));
        }
        Ok(vec![true; MAZE_ACTIONS])
    }

    fn encode(&self, state: &MazeState, desired: &[f64; 2]) -> Vec<f64> {
        let (w, h) = (self.config.layout.cols as f64, self.config.layout.rows as f64);
        let v = self.config.max_speed;
        vec![
            2.0 * state.pos[0] / w - 1.0,
            2.0 * state.pos[1] / h - 1.0,
            state.vel[0] / v,
            state.vel[1] / v,
            2.0 * desired[0] / w - 1.0,
            2.0 * desired[1] / h - 1.0,
        ]
    }

    /// `done` depends on the goal: a state that already achieves it is
    /// terminal.
    fn rebind_state(&self, state: &MazeState, goal: &[f64; 2]) -> MazeState {
        let reached = self.compute_reward(&state.pos, goal).map_or(false, |(_, ok)| ok);
        MazeState {
            done: reached || state.t >= self.spec.horizon,
            ..state.clone()
        }
    }

    fn is_terminal(&self, state: &MazeState) -> bool {
        state.done
    }

    fn elapsed(&self, state: &MazeState) -> usize {
        state.t
    }

    fn goal_distance(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        Self::distance(a, b)
    }
}
