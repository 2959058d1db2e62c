//! Deterministic gridworld built so that good behavior requires stitching two
//! kinds of suboptimal trajectories together.
//!
//! Layout (5x5, `y` grows upward):
//!
//! ```text
//!   y=4  . . # . G
//!   y=3  . . # . .
//!   y=2  . . M J .
//!   y=1  . . # . .
//!   y=0  S . # X .
//! ```
//!
//! A wall column with a single door `M` separates the start `S` from the goal
//! `G`, so every shortest S->G path crosses `M` and then the junction `J`.
//! `X` is a zero-reward terminal dead end, placed on the goal side as far from
//! `G` as possible.

use serde::Serialize;

use super::EnvError;
use crate::dataset::{Dataset, DatasetMeta, Obs, Transition};
use crate::envs::EnvSpec;
use crate::mdp::TabularMdp;

pub const ACTION_NAMES: [&str; 4] = ["up", "right", "down", "left"];
const MOVES: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
const UP: usize = 0;
const RIGHT: usize = 1;
const DOWN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone)]
pub struct StitchGrid {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    /// The door in the wall column.
    pub door: Cell,
    /// First cell past the door, where the two trajectory families diverge.
    pub junction: Cell,
    pub dead_end: Cell,
    pub walls: Vec<Cell>,
    pub mdp: TabularMdp,
}

impl StitchGrid {
    pub fn state(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    pub fn cell(&self, state: usize) -> Cell {
        Cell { x: state % self.width, y: state / self.width }
    }

    pub fn goal_state(&self) -> usize {
        self.state(self.goal)
    }

    /// Manhattan length of every shortest start-goal path.
    pub fn shortest_path_len(&self) -> usize {
        (self.goal.x - self.start.x) + (self.goal.y - self.start.y)
    }

    fn is_wall(&self, c: Cell) -> bool {
        self.walls.contains(&c)
    }

    fn apply(&self, c: Cell, action: usize) -> Cell {
        let (dx, dy) = MOVES[action];
        let (nx, ny) = (c.x as i64 + dx, c.y as i64 + dy);
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            return c;
        }
        let next = Cell { x: nx as usize, y: ny as usize };
        if self.is_wall(next) {
            c
        } else {
            next
        }
    }

    /// Scripted route of `(cell, action)` pairs, ending on the cell reached.
    fn walk(&self, from: Cell, moves: &[(usize, usize)]) -> (Vec<(Cell, usize)>, Cell) {
        let mut path = Vec::new();
        let mut c = from;
        for &(action, count) in moves {
            for _ in 0..count {
                path.push((c, action));
                c = self.apply(c, action);
            }
        }
        (path, c)
    }

    /// S -> door -> junction -> dead end.
    fn family_a(&self) -> Vec<(Cell, usize)> {
        let (path, end) = self.walk(
            self.start,
            &[
                (UP, self.door.y - self.start.y),
                (RIGHT, self.junction.x - self.start.x),
                (DOWN, self.junction.y - self.dead_end.y),
            ],
        );
        debug_assert_eq!(end, self.dead_end);
        path
    }

    /// From `from` (door or junction column) up to the top row, then right to G.
    fn family_b(&self, from: Cell) -> Vec<(Cell, usize)> {
        let (path, end) = self.walk(
            from,
            &[
                (RIGHT, self.junction.x.saturating_sub(from.x)),
                (UP, self.goal.y - self.junction.y),
                (RIGHT, self.goal.x - self.junction.x),
            ],
        );
        debug_assert_eq!(end, self.goal);
        path
    }
}

/// Builds the stitch gridworld. Width and height must both be at least 3.
pub fn build_gridworld_stitch(width: usize, height: usize, discount: f64) -> Result<StitchGrid, EnvError> {
    if width < 3 || height < 3 {
        return Err(EnvError::Params(format!("grid must be at least 3x3, got {width}x{height}")));
    }
    let start = Cell { x: 0, y: 0 };
    let goal = Cell { x: width - 1, y: height - 1 };
    let wall_x = width / 2;
    let door = Cell { x: wall_x, y: height / 2 };
    let junction = Cell { x: wall_x + 1, y: door.y };
    let walls: Vec<Cell> = (0..height).filter(|&y| y != door.y).map(|y| Cell { x: wall_x, y }).collect();
    // Farthest goal-side cell from G; ties go to the lowest (y, x).
    let dead_end = (0..height)
        .flat_map(|y| (wall_x + 1..width).map(move |x| Cell { x, y }))
        .filter(|c| *c != goal)
        .max_by_key(|c| ((goal.x - c.x) + (goal.y - c.y), std::cmp::Reverse((c.y, c.x))))
        .expect("goal side has at least two cells");

    let ns = width * height;
    let na = MOVES.len();
    let placeholder = TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![false], vec![1.0], 0.0)?;
    let mut grid = StitchGrid { width, height, start, goal, door, junction, dead_end, walls, mdp: placeholder };

    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    let mut terminal = vec![false; ns];
    terminal[grid.state(goal)] = true;
    terminal[grid.state(dead_end)] = true;
    for s in 0..ns {
        let c = grid.cell(s);
        for a in 0..na {
            let next = if terminal[s] { s } else { grid.state(grid.apply(c, a)) };
            transition[(s * na + a) * ns + next] = 1.0;
            if !terminal[s] && next == grid.state(goal) {
                reward[s * na + a] = 1.0;
            }
        }
    }
    let mut initial = vec![0.0; ns];
    initial[grid.state(start)] = 1.0;
    grid.mdp = TabularMdp::new(ns, na, transition, reward, terminal, initial, discount)?;
    Ok(grid)
}

/// Two scripted trajectory families whose union supports the optimal path
/// but none of which reaches G from S.
///
/// Family A (`n_per_family` trajectories) walks S -> door -> junction -> dead
/// end. Family B walks to G; even-indexed members start at the door and
/// odd-indexed members start one step past the junction (at the junction when
/// that step is already G). At the junction family A therefore outnumbers
/// family B about 2:1.
pub fn gen_stitch_dataset(grid: &StitchGrid, n_per_family: usize, seed: u64) -> Result<Dataset, EnvError> {
    if n_per_family == 0 {
        return Err(EnvError::NoEpisodes);
    }
    let a_path = grid.family_a();
    let b_from_door = grid.family_b(grid.door);
    let after_junction = grid.apply(grid.junction, b_from_door.iter().find(|(c, _)| *c == grid.junction).unwrap().1);
    let b_late = if after_junction == grid.goal {
        grid.family_b(grid.junction)
    } else {
        b_from_door.iter().skip_while(|(c, _)| *c != after_junction).copied().collect()
    };

    let mut transitions = Vec::new();
    let mut push = |id: u64, path: &[(Cell, usize)]| {
        for (t, &(c, a)) in path.iter().enumerate() {
            let s = grid.state(c);
            let next = grid.state(grid.apply(c, a));
            transitions.push(Transition {
                traj_id: id,
                step_index: t as u32,
                state: Obs::State(s),
                action: a,
                reward: grid.mdp.reward(s, a),
                next_state: Obs::State(next),
                done: t + 1 == path.len(),
            });
        }
    };
    for i in 0..n_per_family {
        push(i as u64, &a_path);
    }
    for i in 0..n_per_family {
        let path = if i % 2 == 0 { &b_from_door } else { &b_late };
        push((n_per_family + i) as u64, path);
    }
    let spec = EnvSpec::GridworldStitch { width: grid.width, height: grid.height, discount: grid.mdp.discount() };
    let meta = DatasetMeta {
        env: spec.name().into(),
        gamma: grid.mdp.discount(),
        reward_scale: 1.0,
        seed,
        num_trajectories: 2 * n_per_family,
        num_actions: MOVES.len(),
        env_spec: Some(spec),
        generator: Some(serde_json::json!({ "kind": "stitch-families", "n_per_family": n_per_family })),
    };
    Ok(Dataset::new(transitions, meta)?)
}
