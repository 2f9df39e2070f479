//! Grid discretization of the cooperative-navigation ("spread") task.
//!
//! Agents live on a `grid_size x grid_size` board and try to cover a set of
//! landmarks. The global state is the tuple of agent cells, encoded in mixed
//! radix with agent 0 as the least significant digit. Movement is
//! deterministic and clamped at the walls.
//!
//! Reward of agent `i` in state `s`:
//!
//! ```text
//! r^i(s) = - sum_l min_j dist(agent_j, l) / (grid_size - 1)
//!          + collision_penalty * #{j != i : cell_j == cell_i}
//!          + offset_i
//! ```
//!
//! where `offset_i` is a seeded per-agent constant in `[-heterogeneity, heterogeneity]`.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::mdp::NetworkedMdp;

/// no action, left, right, down, up
pub const ACTION_COUNT: usize = 5;

pub const NOOP: usize = 0;
pub const LEFT: usize = 1;
pub const RIGHT: usize = 2;
pub const DOWN: usize = 3;
pub const UP: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpreadSpec {
    pub grid_size: usize,
    pub num_agents: usize,
    pub num_landmarks: usize,
    #[serde(default = "default_collision_penalty")]
    pub collision_penalty: f64,
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_max_states")]
    pub max_states: u64,
    pub seed: u64,
}

fn default_collision_penalty() -> f64 {
    -1.0
}

fn default_heterogeneity() -> f64 {
    0.5
}

fn default_discount() -> f64 {
    0.9
}

fn default_max_states() -> u64 {
    1 << 40
}

impl GridSpreadSpec {
    pub fn new(grid_size: usize, num_agents: usize, num_landmarks: usize, collision_penalty: f64, seed: u64) -> Self {
        Self {
            grid_size,
            num_agents,
            num_landmarks,
            collision_penalty,
            heterogeneity: default_heterogeneity(),
            discount: default_discount(),
            max_states: default_max_states(),
            seed,
        }
    }

    pub fn with_discount(mut self, discount: f64) -> Self {
        self.discount = discount;
        self
    }

    pub fn build(&self) -> Result<NetworkedMdp> {
        let grid = GridSpread::new(self.clone())?;
        NetworkedMdp::from_grid(grid, self.discount)
    }
}

/// Generative grid-spread dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpread {
    spec: GridSpreadSpec,
    cells: usize,
    state_count: usize,
    landmarks: Vec<usize>,
    offsets: Vec<f64>,
}

impl GridSpread {
    fn new(spec: GridSpreadSpec) -> Result<Self> {
        if spec.grid_size < 2 {
            return config("grid_size must be at least 2");
        }
        if spec.num_agents == 0 {
            return config("num_agents must be at least 1");
        }
        if !(spec.heterogeneity >= 0.0) || !spec.collision_penalty.is_finite() {
            return config("heterogeneity must be non-negative and collision_penalty finite");
        }
        let cells = spec.grid_size * spec.grid_size;
        let states = (cells as u128).checked_pow(spec.num_agents as u32);
        let state_count = match states {
            Some(s) if s <= spec.max_states as u128 && s <= usize::MAX as u128 => s as usize,
            _ => {
                return Err(Error::Capacity {
                    what: "grid states",
                    size: states.unwrap_or(u128::MAX),
                    limit: spec.max_states as u128,
                })
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let landmarks = if spec.num_landmarks <= cells {
            sample(&mut rng, cells, spec.num_landmarks).into_vec()
        } else {
            (0..spec.num_landmarks).map(|_| rng.random_range(0..cells)).collect()
        };
        let h = spec.heterogeneity;
        let offsets = (0..spec.num_agents)
            .map(|_| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 })
            .collect();
        Ok(Self { spec, cells, state_count, landmarks, offsets })
    }

    pub fn spec(&self) -> &GridSpreadSpec {
        &self.spec
    }

    pub fn num_agents(&self) -> usize {
        self.spec.num_agents
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn landmarks(&self) -> &[usize] {
        &self.landmarks
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Cell `(x, y)` as a flat index.
    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.spec.grid_size + x
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.spec.grid_size, cell / self.spec.grid_size)
    }

    pub fn decode_state(&self, mut state: usize) -> Vec<usize> {
        (0..self.spec.num_agents)
            .map(|_| {
                let c = state % self.cells;
                state /= self.cells;
                c
            })
            .collect()
    }

    pub fn encode_state(&self, positions: &[usize]) -> usize {
        positions.iter().rev().fold(0, |acc, &c| acc * self.cells + c)
    }

    pub fn move_cell(&self, cell: usize, action: usize) -> usize {
        let (x, y) = self.coords(cell);
        let max = self.spec.grid_size - 1;
        let (nx, ny) = match action {
            LEFT => (x.saturating_sub(1), y),
            RIGHT => ((x + 1).min(max), y),
            DOWN => (x, y.saturating_sub(1)),
            UP => (x, (y + 1).min(max)),
            _ => (x, y),
        };
        self.cell(nx, ny)
    }

    pub fn next_state(&self, state: usize, action: &[usize]) -> usize {
        let mut state = state;
        let mut next = 0;
        let mut place = 1;
        for &a in action {
            let c = state % self.cells;
            state /= self.cells;
            next += self.move_cell(c, a) * place;
            place *= self.cells;
        }
        next
    }

    fn distance(&self, a: usize, b: usize) -> f64 {
        let (ax, ay) = self.coords(a);
        let (bx, by) = self.coords(b);
        let dx = ax as f64 - bx as f64;
        let dy = ay as f64 - by as f64;
        (dx * dx + dy * dy).sqrt() / (self.spec.grid_size - 1) as f64
    }

    pub fn rewards_into(&self, state: usize, out: &mut [f64]) {
        let positions = self.decode_state(state);
        let coverage: f64 = self
            .landmarks
            .iter()
            .map(|&l| {
                positions
                    .iter()
                    .map(|&p| self.distance(p, l))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        for (i, slot) in out.iter_mut().enumerate() {
            let collisions = positions
                .iter()
                .enumerate()
                .filter(|&(j, &p)| j != i && p == positions[i])
                .count();
            *slot = -coverage + self.spec.collision_penalty * collisions as f64 + self.offsets[i];
        }
    }

    /// Upper bound on `|r^i|`.
    pub fn reward_bound(&self) -> f64 {
        self.landmarks.len() as f64 * std::f64::consts::SQRT_2
            + self.spec.collision_penalty.abs() * (self.spec.num_agents - 1) as f64
            + self.spec.heterogeneity
    }
}

/// Seeded cooperative-navigation grid with five actions per agent.
pub fn make_grid_spread_env(
    grid_size: usize,
    num_agents: usize,
    num_landmarks: usize,
    collision_penalty: f64,
    seed: u64,
) -> Result<NetworkedMdp> {
    GridSpreadSpec::new(grid_size, num_agents, num_landmarks, collision_penalty, seed).build()
}
