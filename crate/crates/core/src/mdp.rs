//! Finite networked multi-agent MDPs and their exact analytic oracles.
//!
//! A [`NetworkedMdp`] has a single global state observed by every agent, one
//! action set per agent, a kernel over joint actions and one deterministic
//! reward function per agent. Two backends exist: an explicit tabular kernel
//! (used by the exact oracles and test fixtures) and the generative
//! grid-spread environment from [`crate::grid`], which only materializes
//! tables on request.
//!
//! Joint actions are indexed in mixed radix with agent 0 as the least
//! significant digit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config, Error, Result};
use crate::grid::{GridSpread, GridSpreadSpec};

/// Version tag written into every fixture file.
pub const SCHEMA_VERSION: u32 = 1;

const ROW_SUM_TOL: f64 = 1e-12;

/// Size guards for exact enumeration. Anything larger must use sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLimits {
    pub max_joint_actions: u64,
    pub max_states: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self { max_joint_actions: 1_000_000, max_states: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tabular {
    state_count: usize,
    joint_count: usize,
    /// `[(s * joint_count + a) * state_count + s']`
    transition: Vec<f64>,
    /// `[(s * joint_count + a) * num_agents + i]`
    rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Model {
    Tabular(Tabular),
    Grid(GridSpread),
}

/// A networked multi-agent MDP with deterministic per-agent rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkedMdp {
    action_counts: Vec<usize>,
    discount: f64,
    r_max: f64,
    model: Model,
}

/// One transition drawn by [`sample_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub action: Vec<usize>,
    pub next_state: usize,
    pub rewards: Vec<f64>,
}

fn joint_count_u128(action_counts: &[usize]) -> u128 {
    action_counts
        .iter()
        .fold(1u128, |acc, &m| acc.saturating_mul(m as u128))
}

impl NetworkedMdp {
    /// Builds a tabular MDP from flat arrays.
    ///
    /// `transition` is indexed `[(s * J + a) * S + s']` and `rewards`
    /// `[(s * J + a) * n + i]` where `J` is the joint action count. When
    /// `r_max` is `None` the tightest bound `max |r|` is used.
    pub fn tabular(
        state_count: usize,
        action_counts: Vec<usize>,
        discount: f64,
        transition: Vec<f64>,
        rewards: Vec<f64>,
        r_max: Option<f64>,
    ) -> Result<Self> {
        if state_count == 0 {
            return config("state_count must be positive");
        }
        validate_agents(&action_counts)?;
        validate_discount(discount)?;
        let joint = joint_count_u128(&action_counts);
        let limits = OracleLimits::default();
        if joint > limits.max_joint_actions as u128 {
            return Err(Error::Capacity {
                what: "joint actions",
                size: joint,
                limit: limits.max_joint_actions as u128,
            });
        }
        let joint_count = joint as usize;
        let n = action_counts.len();
        check_dim(state_count * joint_count * state_count, transition.len())?;
        check_dim(state_count * joint_count * n, rewards.len())?;
        for (row_idx, row) in transition.chunks(state_count).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return config(format!("transition row {row_idx} has an entry outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NotStochastic { row: row_idx, sum });
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return config("rewards must be finite");
        }
        let observed = rewards.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let r_max = match r_max {
            Some(bound) if bound < observed => {
                return config(format!("r_max {bound} is below the largest |reward| {observed}"))
            }
            Some(bound) => bound,
            None => observed,
        };
        Ok(Self {
            action_counts,
            discount,
            r_max,
            model: Model::Tabular(Tabular { state_count, joint_count, transition, rewards }),
        })
    }

    pub(crate) fn from_grid(grid: GridSpread, discount: f64) -> Result<Self> {
        validate_discount(discount)?;
        Ok(Self {
            action_counts: vec![crate::grid::ACTION_COUNT; grid.num_agents()],
            discount,
            r_max: grid.reward_bound(),
            model: Model::Grid(grid),
        })
    }

    pub fn num_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn state_count(&self) -> usize {
        match &self.model {
            Model::Tabular(t) => t.state_count,
            Model::Grid(g) => g.state_count(),
        }
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    /// Number of joint actions, saturating at `u128::MAX`.
    pub fn joint_action_count(&self) -> u128 {
        joint_count_u128(&self.action_counts)
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self.model, Model::Tabular(_))
    }

    pub fn grid(&self) -> Option<&GridSpread> {
        match &self.model {
            Model::Grid(g) => Some(g),
            Model::Tabular(_) => None,
        }
    }

    /// Same dynamics with the discount factor replaced.
    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        validate_discount(discount)?;
        self.discount = discount;
        Ok(self)
    }

    pub fn encode_action(&self, action: &[usize]) -> Result<usize> {
        check_dim(self.num_agents(), action.len())?;
        let mut index = 0usize;
        for (i, (&a, &m)) in action.iter().zip(&self.action_counts).enumerate().rev() {
            if a >= m {
                return config(format!("action {a} out of range for agent {i}"));
            }
            index = index * m + a;
        }
        Ok(index)
    }

    pub fn decode_action(&self, mut index: usize) -> Vec<usize> {
        self.action_counts
            .iter()
            .map(|&m| {
                let a = index % m;
                index /= m;
                a
            })
            .collect()
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state < self.state_count() {
            Ok(())
        } else {
            config(format!("state {state} out of range (|S| = {})", self.state_count()))
        }
    }

    /// Per-agent rewards `r^i(s, a)` written into `out`.
    pub fn rewards_into(&self, state: usize, action: &[usize], out: &mut [f64]) -> Result<()> {
        self.check_state(state)?;
        check_dim(self.num_agents(), out.len())?;
        match &self.model {
            Model::Tabular(t) => {
                let a = self.encode_action(action)?;
                let base = (state * t.joint_count + a) * self.num_agents();
                out.copy_from_slice(&t.rewards[base..base + self.num_agents()]);
            }
            Model::Grid(g) => {
                check_dim(self.num_agents(), action.len())?;
                g.rewards_into(state, out);
            }
        }
        Ok(())
    }

    pub fn rewards(&self, state: usize, action: &[usize]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_agents()];
        self.rewards_into(state, action, &mut out)?;
        Ok(out)
    }

    /// Calls `visit(s', P(s, a, s'))` for every successor with positive mass.
    pub fn for_each_successor(
        &self,
        state: usize,
        action: &[usize],
        mut visit: impl FnMut(usize, f64),
    ) -> Result<()> {
        self.check_state(state)?;
        match &self.model {
            Model::Tabular(t) => {
                let a = self.encode_action(action)?;
                let base = (state * t.joint_count + a) * t.state_count;
                for (next, &p) in t.transition[base..base + t.state_count].iter().enumerate() {
                    if p > 0.0 {
                        visit(next, p);
                    }
                }
            }
            Model::Grid(g) => {
                check_dim(self.num_agents(), action.len())?;
                visit(g.next_state(state, action), 1.0);
            }
        }
        Ok(())
    }

    fn sample_next<R: Rng + ?Sized>(&self, state: usize, action: &[usize], rng: &mut R) -> Result<usize> {
        match &self.model {
            Model::Tabular(t) => {
                let a = self.encode_action(action)?;
                let base = (state * t.joint_count + a) * t.state_count;
                Ok(sample_categorical(&t.transition[base..base + t.state_count], rng))
            }
            Model::Grid(g) => Ok(g.next_state(state, action)),
        }
    }

    /// Materializes the kernel and reward tables, refusing models above `limits`.
    pub fn to_tabular(&self, limits: OracleLimits) -> Result<NetworkedMdp> {
        if let Model::Tabular(_) = self.model {
            return Ok(self.clone());
        }
        let (s_count, j_count) = self.check_oracle_limits(limits)?;
        let n = self.num_agents();
        let mut transition = vec![0.0; s_count * j_count * s_count];
        let mut rewards = vec![0.0; s_count * j_count * n];
        for s in 0..s_count {
            for a in 0..j_count {
                let action = self.decode_action(a);
                let base = (s * j_count + a) * s_count;
                self.for_each_successor(s, &action, |next, p| transition[base + next] += p)?;
                let rbase = (s * j_count + a) * n;
                self.rewards_into(s, &action, &mut rewards[rbase..rbase + n])?;
            }
        }
        NetworkedMdp::tabular(
            s_count,
            self.action_counts.clone(),
            self.discount,
            transition,
            rewards,
            Some(self.r_max),
        )
    }

    /// A tabular copy whose rewards are replaced by `reward(agent, state, joint_action)`.
    pub fn with_rewards(&self, reward: impl Fn(usize, usize, &[usize]) -> f64) -> Result<NetworkedMdp> {
        let tab = self.to_tabular(OracleLimits::default())?;
        let Model::Tabular(t) = &tab.model else { unreachable!() };
        let n = tab.num_agents();
        let mut rewards = vec![0.0; t.rewards.len()];
        for s in 0..t.state_count {
            for a in 0..t.joint_count {
                let action = tab.decode_action(a);
                for i in 0..n {
                    rewards[(s * t.joint_count + a) * n + i] = reward(i, s, &action);
                }
            }
        }
        NetworkedMdp::tabular(
            t.state_count,
            tab.action_counts.clone(),
            tab.discount,
            t.transition.clone(),
            rewards,
            None,
        )
    }

    fn check_oracle_limits(&self, limits: OracleLimits) -> Result<(usize, usize)> {
        let joint = self.joint_action_count();
        if joint > limits.max_joint_actions as u128 {
            return Err(Error::Capacity {
                what: "joint actions",
                size: joint,
                limit: limits.max_joint_actions as u128,
            });
        }
        let states = self.state_count();
        if states > limits.max_states {
            return Err(Error::Capacity {
                what: "states",
                size: states as u128,
                limit: limits.max_states as u128,
            });
        }
        Ok((states, joint as usize))
    }

    pub fn to_fixture(&self) -> MdpFixture {
        match &self.model {
            Model::Tabular(t) => {
                let n = self.num_agents();
                let transition = (0..t.state_count)
                    .map(|s| {
                        (0..t.joint_count)
                            .map(|a| {
                                let base = (s * t.joint_count + a) * t.state_count;
                                t.transition[base..base + t.state_count].to_vec()
                            })
                            .collect()
                    })
                    .collect();
                let rewards = (0..t.state_count)
                    .map(|s| {
                        (0..t.joint_count)
                            .map(|a| {
                                let base = (s * t.joint_count + a) * n;
                                t.rewards[base..base + n].to_vec()
                            })
                            .collect()
                    })
                    .collect();
                MdpFixture {
                    schema_version: SCHEMA_VERSION,
                    discount: self.discount,
                    r_max: self.r_max,
                    model: ModelFixture::Tabular {
                        state_count: t.state_count,
                        action_counts: self.action_counts.clone(),
                        transition,
                        rewards,
                    },
                }
            }
            Model::Grid(g) => MdpFixture {
                schema_version: SCHEMA_VERSION,
                discount: self.discount,
                r_max: self.r_max,
                model: ModelFixture::GridSpread { spec: g.spec().clone() },
            },
        }
    }

    pub fn from_fixture(fixture: &MdpFixture) -> Result<Self> {
        if fixture.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                fixture.schema_version
            )));
        }
        match &fixture.model {
            ModelFixture::Tabular { state_count, action_counts, transition, rewards } => {
                check_dim(*state_count, transition.len())?;
                check_dim(*state_count, rewards.len())?;
                let flat_t: Vec<f64> = transition.iter().flatten().flatten().copied().collect();
                let flat_r: Vec<f64> = rewards.iter().flatten().flatten().copied().collect();
                NetworkedMdp::tabular(
                    *state_count,
                    action_counts.clone(),
                    fixture.discount,
                    flat_t,
                    flat_r,
                    Some(fixture.r_max),
                )
            }
            ModelFixture::GridSpread { spec } => {
                let mdp = spec.clone().with_discount(fixture.discount).build()?;
                Ok(mdp)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_fixture()).expect("fixture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fixture: MdpFixture =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        Self::from_fixture(&fixture)
    }
}

/// On-disk representation of an MDP.
///
/// Tabular kernels are stored as `transition[s][joint_action][s']` and rewards
/// as `rewards[s][joint_action][agent]`; grid environments store their
/// generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFixture {
    pub schema_version: u32,
    pub discount: f64,
    pub r_max: f64,
    pub model: ModelFixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelFixture {
    Tabular {
        state_count: usize,
        action_counts: Vec<usize>,
        transition: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<Vec<f64>>>,
    },
    GridSpread {
        spec: GridSpreadSpec,
    },
}

fn validate_agents(action_counts: &[usize]) -> Result<()> {
    if action_counts.is_empty() {
        return config("at least one agent is required");
    }
    if action_counts.iter().any(|&m| m == 0) {
        return config("every agent needs at least one action");
    }
    Ok(())
}

fn validate_discount(discount: f64) -> Result<()> {
    if discount > 0.0 && discount < 1.0 {
        Ok(())
    } else {
        config(format!("discount must lie in (0, 1), got {discount}"))
    }
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    // u landed in the rounding gap below 1.0
    last_positive
}

/// Local policy of a single agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentPolicy {
    Uniform,
    /// `probs[s][a]`
    Table { probs: Vec<Vec<f64>> },
}

/// Product policy `pi(a|s) = prod_i pi^i(a^i|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    action_counts: Vec<usize>,
    agents: Vec<AgentPolicy>,
}

impl JointPolicy {
    pub fn uniform(mdp: &NetworkedMdp) -> Self {
        Self {
            action_counts: mdp.action_counts().to_vec(),
            agents: vec![AgentPolicy::Uniform; mdp.num_agents()],
        }
    }

    pub fn new(mdp: &NetworkedMdp, agents: Vec<AgentPolicy>) -> Result<Self> {
        check_dim(mdp.num_agents(), agents.len())?;
        for (i, policy) in agents.iter().enumerate() {
            if let AgentPolicy::Table { probs } = policy {
                check_dim(mdp.state_count(), probs.len())?;
                for (s, row) in probs.iter().enumerate() {
                    check_dim(mdp.action_counts()[i], row.len())?;
                    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                        return config(format!("agent {i} state {s}: probability outside [0, 1]"));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return config(format!("agent {i} state {s}: probabilities sum to {sum}"));
                    }
                }
            }
        }
        Ok(Self { action_counts: mdp.action_counts().to_vec(), agents })
    }

    /// Every agent plays `choose(agent, state)` with probability one.
    pub fn deterministic(mdp: &NetworkedMdp, choose: impl Fn(usize, usize) -> usize) -> Result<Self> {
        let agents = (0..mdp.num_agents())
            .map(|i| {
                let probs = (0..mdp.state_count())
                    .map(|s| {
                        let mut row = vec![0.0; mdp.action_counts()[i]];
                        if let Some(slot) = row.get_mut(choose(i, s)) {
                            *slot = 1.0;
                        }
                        row
                    })
                    .collect();
                AgentPolicy::Table { probs }
            })
            .collect();
        Self::new(mdp, agents)
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agent(&self, i: usize) -> &AgentPolicy {
        &self.agents[i]
    }

    /// `pi^i(a^i | s)`
    pub fn prob(&self, agent: usize, state: usize, action: usize) -> f64 {
        match &self.agents[agent] {
            AgentPolicy::Uniform => 1.0 / self.action_counts[agent] as f64,
            AgentPolicy::Table { probs } => probs[state][action],
        }
    }

    /// `pi(a | s)` for a joint action.
    pub fn joint_prob(&self, state: usize, action: &[usize]) -> f64 {
        action
            .iter()
            .enumerate()
            .map(|(i, &a)| self.prob(i, state, a))
            .product()
    }

    fn sample_agent<R: Rng + ?Sized>(&self, agent: usize, state: usize, rng: &mut R) -> usize {
        match &self.agents[agent] {
            AgentPolicy::Uniform => rng.random_range(0..self.action_counts[agent]),
            AgentPolicy::Table { probs } => sample_categorical(&probs[state], rng),
        }
    }

    fn check_matches(&self, mdp: &NetworkedMdp) -> Result<()> {
        if self.action_counts != mdp.action_counts() {
            return config("policy action sets do not match the MDP");
        }
        for policy in &self.agents {
            if let AgentPolicy::Table { probs } = policy {
                check_dim(mdp.state_count(), probs.len())?;
            }
        }
        Ok(())
    }
}

/// Iterates `(joint_index, joint_action)` over all joint actions.
fn for_each_joint_action(action_counts: &[usize], joint_count: usize, mut visit: impl FnMut(usize, &[usize])) {
    let mut action = vec![0usize; action_counts.len()];
    for index in 0..joint_count {
        visit(index, &action);
        for (digit, &m) in action.iter_mut().zip(action_counts) {
            *digit += 1;
            if *digit < m {
                break;
            }
            *digit = 0;
        }
    }
}

/// State transition matrix `P_pi(s, s') = sum_a pi(a|s) P(s, a, s')`.
pub fn induced_chain(mdp: &NetworkedMdp, policy: &JointPolicy) -> Result<DMatrix<f64>> {
    induced_chain_with_limits(mdp, policy, OracleLimits::default())
}

pub fn induced_chain_with_limits(
    mdp: &NetworkedMdp,
    policy: &JointPolicy,
    limits: OracleLimits,
) -> Result<DMatrix<f64>> {
    policy.check_matches(mdp)?;
    let (s_count, j_count) = mdp.check_oracle_limits(limits)?;
    let mut chain = DMatrix::zeros(s_count, s_count);
    for s in 0..s_count {
        let mut err = None;
        for_each_joint_action(mdp.action_counts(), j_count, |_, action| {
            let weight = policy.joint_prob(s, action);
            if weight == 0.0 || err.is_some() {
                return;
            }
            if let Err(e) = mdp.for_each_successor(s, action, |next, p| chain[(s, next)] += weight * p) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(chain)
}

/// Policy-averaged weighted reward `r_alpha(s) = sum_a pi(a|s) sum_i alpha_i r^i(s, a)`.
pub fn expected_reward(mdp: &NetworkedMdp, policy: &JointPolicy, weights: &[f64]) -> Result<Vec<f64>> {
    policy.check_matches(mdp)?;
    check_dim(mdp.num_agents(), weights.len())?;
    let (s_count, j_count) = mdp.check_oracle_limits(OracleLimits::default())?;
    let mut out = vec![0.0; s_count];
    let mut buf = vec![0.0; mdp.num_agents()];
    for (s, slot) in out.iter_mut().enumerate() {
        let mut err = None;
        for_each_joint_action(mdp.action_counts(), j_count, |_, action| {
            let p = policy.joint_prob(s, action);
            if p == 0.0 || err.is_some() {
                return;
            }
            match mdp.rewards_into(s, action, &mut buf) {
                Ok(()) => *slot += p * buf.iter().zip(weights).map(|(r, w)| r * w).sum::<f64>(),
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(out)
}

fn check_row_stochastic(p: &DMatrix<f64>, tol: f64) -> Result<()> {
    if p.nrows() != p.ncols() {
        return Err(Error::Dimension { expected: p.nrows(), actual: p.ncols() });
    }
    for (row, r) in p.row_iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if r.iter().any(|&x| x < 0.0 || !x.is_finite()) || (sum - 1.0).abs() > tol {
            return Err(Error::NotStochastic { row, sum });
        }
    }
    Ok(())
}

/// Reachability from state 0 forward and backward over positive entries.
fn check_irreducible(p: &DMatrix<f64>) -> Result<()> {
    let n = p.nrows();
    for backward in [false, true] {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                let edge = if backward { p[(v, u)] } else { p[(u, v)] };
                if edge > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::NotIrreducible(missing));
        }
    }
    Ok(())
}

/// Iteration cap for [`stationary_distribution`].
pub const STATIONARY_MAX_ITERATIONS: usize = 1_000_000;
pub const STATIONARY_DEFAULT_TOL: f64 = 1e-10;

/// Stationary distribution of an irreducible aperiodic chain by power iteration.
///
/// Iteration starts from a point mass so that periodic chains oscillate and
/// are reported as [`Error::NotConverged`] rather than accepted.
pub fn stationary_distribution(p: &DMatrix<f64>, tol: f64) -> Result<Vec<f64>> {
    check_row_stochastic(p, 1e-10)?;
    check_irreducible(p)?;
    let n = p.nrows();
    let pt = p.transpose();
    let mut d = DVector::zeros(n);
    d[0] = 1.0;
    let mut next = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    for _ in 0..STATIONARY_MAX_ITERATIONS {
        pt.mul_to(&d, &mut next);
        let total: f64 = next.iter().sum();
        next /= total;
        residual = (&next - &d).amax();
        std::mem::swap(&mut d, &mut next);
        if residual <= tol {
            return Ok(d.iter().map(|x| x.max(0.0)).collect());
        }
    }
    Err(Error::NotConverged { iterations: STATIONARY_MAX_ITERATIONS, residual })
}

/// `d_pi` for the chain induced by `policy`.
pub fn policy_stationary_distribution(mdp: &NetworkedMdp, policy: &JointPolicy) -> Result<Vec<f64>> {
    stationary_distribution(&induced_chain(mdp, policy)?, STATIONARY_DEFAULT_TOL)
}

/// Solves `(I - gamma P_pi) V = r_alpha` for the weighted value function.
pub fn exact_value_function(mdp: &NetworkedMdp, policy: &JointPolicy, weights: &[f64]) -> Result<Vec<f64>> {
    check_dim(mdp.num_agents(), weights.len())?;
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return config("weights must be non-negative");
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return config(format!("weights must sum to 1, got {total}"));
    }
    let chain = induced_chain(mdp, policy)?;
    let reward = DVector::from_vec(expected_reward(mdp, policy, weights)?);
    let n = chain.nrows();
    let system = DMatrix::identity(n, n) - chain * mdp.discount();
    let value = system
        .clone()
        .lu()
        .solve(&reward)
        .ok_or_else(|| Error::Singular("I - gamma P_pi".into()))?;
    let residual = (&system * &value - &reward).amax();
    let scale = 1.0f64.max(reward.amax() / (1.0 - mdp.discount()));
    assert!(residual <= 1e-10 * scale, "value-function residual {residual:e} too large");
    Ok(value.iter().copied().collect())
}

/// Draws one environment transition: independent per-agent actions, the next
/// state from the kernel, and the deterministic rewards `r^i(s, a)`.
pub fn sample_step<R: Rng + ?Sized>(
    mdp: &NetworkedMdp,
    policy: &JointPolicy,
    state: usize,
    rng: &mut R,
) -> Result<Step> {
    mdp.check_state(state)?;
    let action: Vec<usize> = (0..mdp.num_agents())
        .map(|i| policy.sample_agent(i, state, rng))
        .collect();
    let next_state = mdp.sample_next(state, &action, rng)?;
    let rewards = mdp.rewards(state, &action)?;
    Ok(Step { action, next_state, rewards })
}

/// Parameters for [`make_random_mdp`] beyond the sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMdpSpec {
    pub state_count: usize,
    pub num_agents: usize,
    pub actions_per_agent: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    pub seed: u64,
}

fn default_discount() -> f64 {
    0.9
}

fn default_r_max() -> f64 {
    1.0
}

impl RandomMdpSpec {
    pub fn new(state_count: usize, num_agents: usize, actions_per_agent: usize, seed: u64) -> Self {
        Self {
            state_count,
            num_agents,
            actions_per_agent,
            discount: default_discount(),
            r_max: default_r_max(),
            seed,
        }
    }

    /// Transition rows are normalized `Exp(1) + 1e-3` draws (Dirichlet-like and
    /// strictly positive, hence irreducible and aperiodic under any policy);
    /// rewards are uniform in `[-r_max, r_max]`.
    pub fn build(&self) -> Result<NetworkedMdp> {
        if self.state_count == 0 || self.num_agents == 0 || self.actions_per_agent == 0 {
            return config("random MDP sizes must be positive");
        }
        if !(self.r_max > 0.0) {
            return config("r_max must be positive");
        }
        let action_counts = vec![self.actions_per_agent; self.num_agents];
        let joint = joint_count_u128(&action_counts);
        let limit = OracleLimits::default().max_joint_actions as u128;
        if joint > limit {
            return Err(Error::Capacity { what: "joint actions", size: joint, limit });
        }
        let joint = joint as usize;
        let s = self.state_count;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut transition = Vec::with_capacity(s * joint * s);
        for _ in 0..s * joint {
            let row: Vec<f64> = (0..s)
                .map(|_| Distribution::<f64>::sample(&Exp1, &mut rng) + 1e-3)
                .collect::<Vec<f64>>();
            let total: f64 = row.iter().sum();
            transition.extend(row.iter().map(|x| x / total));
        }
        // renormalization can leave rows a few ulps off
        for row in transition.chunks_mut(s) {
            let total: f64 = row.iter().sum();
            let last = row.len() - 1;
            row[last] += 1.0 - total;
        }
        let rewards = (0..s * joint * self.num_agents)
            .map(|_| rng.random_range(-self.r_max..=self.r_max))
            .collect();
        NetworkedMdp::tabular(s, action_counts, self.discount, transition, rewards, Some(self.r_max))
    }
}

/// Seeded random MDP with strictly positive kernel rows (discount 0.9, `r_max` 1).
pub fn make_random_mdp(
    state_count: usize,
    num_agents: usize,
    actions_per_agent: usize,
    seed: u64,
) -> Result<NetworkedMdp> {
    RandomMdpSpec::new(state_count, num_agents, actions_per_agent, seed).build()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state_one_agent() -> NetworkedMdp {
        // action 0 -> row (0.9, 0.1) / (0.5, 0.5); action 1 -> (0.3, 0.7) / (0.1, 0.9)
        let transition = vec![0.9, 0.1, 0.3, 0.7, 0.5, 0.5, 0.1, 0.9];
        let rewards = vec![0.0, 0.0, 1.0, 1.0];
        NetworkedMdp::tabular(2, vec![2], 0.9, transition, rewards, None).unwrap()
    }

    fn chain_mdp(rows: &[[f64; 2]; 2], rewards: [f64; 2], gamma: f64) -> NetworkedMdp {
        let transition = rows.iter().flatten().copied().collect();
        NetworkedMdp::tabular(2, vec![1], gamma, transition, rewards.to_vec(), None).unwrap()
    }

    #[test]
    fn single_state_chain_is_one() {
        let mdp = make_random_mdp(1, 2, 3, 7).unwrap();
        let p = induced_chain(&mdp, &JointPolicy::uniform(&mdp)).unwrap();
        assert_eq!(p.shape(), (1, 1));
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_policy_picks_kernel_row() {
        let mdp = two_state_one_agent();
        let policy = JointPolicy::deterministic(&mdp, |_, _| 1).unwrap();
        let p = induced_chain(&mdp, &policy).unwrap();
        assert_eq!(p.row(0).iter().copied().collect::<Vec<_>>(), vec![0.3, 0.7]);
        assert_eq!(p.row(1).iter().copied().collect::<Vec<_>>(), vec![0.1, 0.9]);
    }

    #[test]
    fn uniform_policy_averages_action_rows() {
        let mdp = two_state_one_agent();
        let p = induced_chain(&mdp, &JointPolicy::uniform(&mdp)).unwrap();
        // by hand: ((0.9+0.3)/2, (0.1+0.7)/2) and ((0.5+0.1)/2, (0.5+0.9)/2)
        let expected = [[0.6, 0.4], [0.3, 0.7]];
        for s in 0..2 {
            for t in 0..2 {
                assert!((p[(s, t)] - expected[s][t]).abs() < 1e-12);
            }
            assert!((p.row(s).sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn policy_dimension_mismatch_is_config_error() {
        let mdp = two_state_one_agent();
        let other = make_random_mdp(2, 1, 3, 1).unwrap();
        let policy = JointPolicy::uniform(&other);
        assert!(matches!(induced_chain(&mdp, &policy), Err(Error::Config(_))));
    }

    #[test]
    fn stationary_examples() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let d = stationary_distribution(&p, 1e-12).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);

        let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.5, 0.5]);
        let d = stationary_distribution(&p, 1e-13).unwrap();
        assert!((d[0] - 5.0 / 6.0).abs() < 1e-10);
        assert!((d[1] - 1.0 / 6.0).abs() < 1e-10);
        let dp = DVector::from_vec(d.clone()).transpose() * &p;
        assert!(dp.iter().zip(&d).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn periodic_chain_does_not_converge() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            stationary_distribution(&p, 1e-10),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5]);
        assert!(matches!(stationary_distribution(&p, 1e-10), Err(Error::NotIrreducible(_))));
    }

    #[test]
    fn geometric_value_single_state() {
        let mdp = NetworkedMdp::tabular(1, vec![1], 0.5, vec![1.0], vec![1.0], None).unwrap();
        let v = exact_value_function(&mdp, &JointPolicy::uniform(&mdp), &[1.0]).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_average_agent_values() {
        let mdp = make_random_mdp(4, 3, 2, 11).unwrap();
        let policy = JointPolicy::uniform(&mdp);
        let uniform = exact_value_function(&mdp, &policy, &[1.0 / 3.0; 3]).unwrap();
        let mut mean = vec![0.0; 4];
        for i in 0..3 {
            let mut e = vec![0.0; 3];
            e[i] = 1.0;
            let v = exact_value_function(&mdp, &policy, &e).unwrap();
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / 3.0;
            }
        }
        for (a, b) in uniform.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn value_matches_monte_carlo() {
        // chain (0.9, 0.1 / 0.5, 0.5), r(s) = s, gamma = 0.9
        let mdp = chain_mdp(&[[0.9, 0.1], [0.5, 0.5]], [0.0, 1.0], 0.9);
        let policy = JointPolicy::uniform(&mdp);
        let v = exact_value_function(&mdp, &policy, &[1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let rollouts = 100_000;
        let horizon = 200; // 0.9^200 * 10 < 1e-8
        for start in 0..2 {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..rollouts {
                let mut s = start;
                let mut ret = 0.0;
                let mut discount = 1.0;
                for _ in 0..horizon {
                    let step = sample_step(&mdp, &policy, s, &mut rng).unwrap();
                    ret += discount * step.rewards[0];
                    discount *= 0.9;
                    s = step.next_state;
                }
                sum += ret;
                sum_sq += ret * ret;
            }
            let mean = sum / rollouts as f64;
            let se = ((sum_sq / rollouts as f64 - mean * mean) / rollouts as f64).sqrt();
            assert!((mean - v[start]).abs() < 3.0 * se, "state {start}: {mean} vs {}", v[start]);
        }
    }

    #[test]
    fn truncated_sums_approach_value() {
        let mdp = make_random_mdp(5, 2, 2, 3).unwrap();
        let policy = JointPolicy::uniform(&mdp);
        let weights = [0.5, 0.5];
        let v = exact_value_function(&mdp, &policy, &weights).unwrap();
        let p = induced_chain(&mdp, &policy).unwrap();
        let r = DVector::from_vec(expected_reward(&mdp, &policy, &weights).unwrap());
        let gamma = mdp.discount();
        let horizon = 60;
        let mut partial = DVector::zeros(5);
        let mut term = r.clone();
        let mut discount = 1.0;
        for _ in 0..horizon {
            partial += &term * discount;
            term = &p * term;
            discount *= gamma;
        }
        let bound = gamma.powi(horizon) * mdp.r_max() / (1.0 - gamma);
        for s in 0..5 {
            assert!((partial[s] - v[s]).abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn deterministic_transition_is_fully_determined() {
        // two states swapping deterministically under the only action
        let mdp = NetworkedMdp::tabular(2, vec![1], 0.5, vec![0.0, 1.0, 1.0, 0.0], vec![3.0, -2.0], None)
            .unwrap();
        let policy = JointPolicy::uniform(&mdp);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let step = sample_step(&mdp, &policy, 0, &mut rng).unwrap();
            assert_eq!(step.next_state, 1);
            assert_eq!(step.rewards, vec![3.0]);
        }
    }

    #[test]
    fn sampled_frequencies_match_kernel() {
        let mdp = make_random_mdp(4, 1, 1, 5).unwrap();
        let policy = JointPolicy::uniform(&mdp);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..samples {
            counts[sample_step(&mdp, &policy, 2, &mut rng).unwrap().next_state] += 1;
        }
        let mut row = [0.0; 4];
        mdp.for_each_successor(2, &[0], |s, p| row[s] = p).unwrap();
        let tv: f64 = counts
            .iter()
            .zip(row)
            .map(|(&c, p)| (c as f64 / samples as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 1e-2, "total variation {tv}");
    }

    #[test]
    fn sampled_rewards_are_table_lookups() {
        let mdp = make_random_mdp(3, 3, 2, 9).unwrap();
        let policy = JointPolicy::uniform(&mdp);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = 0;
        for _ in 0..50 {
            let step = sample_step(&mdp, &policy, s, &mut rng).unwrap();
            assert_eq!(step.rewards, mdp.rewards(s, &step.action).unwrap());
            s = step.next_state;
        }
    }

    #[test]
    fn random_mdp_is_reproducible_and_positive() {
        let a = make_random_mdp(4, 2, 3, 99).unwrap();
        let b = make_random_mdp(4, 2, 3, 99).unwrap();
        assert_eq!(a, b);
        let Model::Tabular(t) = &a.model else { panic!() };
        assert!(t.transition.iter().all(|&p| p > 0.0));
        for row in t.transition.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert!(t.rewards.iter().all(|r| r.abs() <= a.r_max()));
    }

    #[test]
    fn random_mdps_have_stationary_distributions() {
        for seed in 0..100 {
            let mdp = make_random_mdp(6, 2, 2, seed).unwrap();
            let d = policy_stationary_distribution(&mdp, &JointPolicy::uniform(&mdp)).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_action_cap_is_enforced() {
        assert!(matches!(make_random_mdp(2, 21, 2, 0), Err(Error::Capacity { .. })));
    }

    #[test]
    fn action_encoding_round_trips() {
        let mdp = NetworkedMdp::tabular(1, vec![2, 3, 2], 0.5, vec![1.0; 12], vec![0.0; 36], None).unwrap();
        for index in 0..12 {
            let action = mdp.decode_action(index);
            assert_eq!(mdp.encode_action(&action).unwrap(), index);
        }
        assert_eq!(mdp.decode_action(1), vec![1, 0, 0]);
    }

    #[test]
    fn fixture_round_trip_and_version_check() {
        let mdp = make_random_mdp(3, 2, 2, 1).unwrap();
        let back = NetworkedMdp::from_json(&mdp.to_json()).unwrap();
        assert_eq!(mdp, back);
        let mut fixture = mdp.to_fixture();
        fixture.schema_version = 99;
        assert!(matches!(NetworkedMdp::from_fixture(&fixture), Err(Error::Schema(_))));
        let missing = r#"{"discount":0.5,"r_max":1,"model":{"kind":"tabular","state_count":1,"action_counts":[1],"transition":[[[1.0]]],"rewards":[[[0.0]]]}}"#;
        assert!(matches!(NetworkedMdp::from_json(missing), Err(Error::Schema(_))));
    }

    #[test]
    fn invalid_kernels_are_rejected() {
        assert!(NetworkedMdp::tabular(1, vec![1], 1.0, vec![1.0], vec![0.0], None).is_err());
        assert!(matches!(
            NetworkedMdp::tabular(2, vec![1], 0.5, vec![0.5, 0.6, 0.5, 0.5], vec![0.0; 2], None),
            Err(Error::NotStochastic { row: 0, .. })
        ));
        assert!(NetworkedMdp::tabular(1, vec![1], 0.5, vec![1.0], vec![2.0], Some(1.0)).is_err());
    }
}
