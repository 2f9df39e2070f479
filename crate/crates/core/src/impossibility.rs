//! Executable versions of the two impossibility constructions.
//!
//! Agent ids are 0-based here; agent `i` plays the role of agent `i + 1` in
//! the usual 1-based write-up, so "reward `i`" becomes `i + 1`.

use serde::Serialize;

use crate::adversary::AttackModel;
use crate::aggregation::AggregationRule;
use crate::error::{config, Error, Result};
use crate::features::{default_radius, FeatureMap, ParamVector};
use crate::mdp::{JointPolicy, NetworkedMdp};
use crate::metrics::{expected_feature, weighted_fixed_point, FixedPointSpec};
use crate::protocol::{run_bdtd, AgentRoster, ProtocolConfig, RunTrace, StepSchedule};

/// Simulation settings for the indistinguishability check.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinRunOptions {
    pub horizon: usize,
    pub seed: u64,
    /// Projection radius; derived from `phi_min` when `None`.
    pub radius: Option<f64>,
}

impl Default for TwinRunOptions {
    fn default() -> Self {
        Self { horizon: 2000, seed: 0, radius: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub n: usize,
    /// Fixed point with the first agent Byzantine.
    pub w1: ParamVector,
    /// Fixed point with the last agent Byzantine.
    pub w2: ParamVector,
    pub gap: ParamVector,
    pub expected_phi: ParamVector,
    /// `max_j |gap_j - E[phi]_j|`
    pub gap_error: f64,
    /// Whether agents `1..n-1` saw bit-identical trajectories in both executions.
    pub traces_identical: bool,
    /// Middle agents compared.
    pub middle_agents: Vec<usize>,
}

impl Theorem1Report {
    pub fn pass(&self, tol: f64) -> bool {
        self.gap_error <= tol && self.traces_identical
    }
}

fn bits(params: &[ParamVector]) -> Vec<u64> {
    params.iter().flat_map(|w| w.iter().map(|x| x.to_bits())).collect()
}

fn same_view(a: &RunTrace, b: &RunTrace, agent: usize) -> bool {
    let (Some(ta), Some(tb)) = (a.agent_trajectory(agent), b.agent_trajectory(agent)) else {
        return false;
    };
    bits(&ta) == bits(&tb)
        && a.rounds.iter().zip(&b.rounds).all(|(x, y)| {
            x.td_errors[agent].to_bits() == y.td_errors[agent].to_bits() && x.consensus[agent] == y.consensus[agent]
        })
}

/// Builds the two executions with rewards `r^i = i + 1`, computes both fixed
/// points exactly and runs the simulator on each with equal seeds, the
/// Byzantine agent behaving correctly.
pub fn impossibility_theorem1(
    n: usize,
    features: &FeatureMap,
    mdp: &NetworkedMdp,
    policy: &JointPolicy,
    options: &TwinRunOptions,
) -> Result<Theorem1Report> {
    if n < 3 {
        return config("the construction needs n >= 3");
    }
    if mdp.num_agents() != n {
        return Err(Error::Dimension { expected: n, actual: mdp.num_agents() });
    }
    let mdp = mdp.with_rewards(|i, _, _| (i + 1) as f64)?;
    let expected_phi = expected_feature(&mdp, policy, features)?;
    if expected_phi.iter().all(|&x| x == 0.0) {
        return config("E[phi] = 0: the construction is inapplicable to these features");
    }
    let w1 = weighted_fixed_point(&mdp, policy, features, &FixedPointSpec::uniform((1..n).collect())?)?;
    let w2 = weighted_fixed_point(&mdp, policy, features, &FixedPointSpec::uniform((0..n - 1).collect())?)?;
    let gap = ParamVector(w1.iter().zip(w2.iter()).map(|(a, b)| a - b).collect());
    let gap_error = gap
        .iter()
        .zip(expected_phi.iter())
        .map(|(g, e)| (g - e).abs())
        .fold(0.0, f64::max);

    let radius = match (options.radius, features.phi_min()) {
        (Some(r), _) => r,
        (None, Some(phi_min)) => default_radius(mdp.r_max(), phi_min, mdp.discount())?,
        (None, None) => return config("vector features need an explicit projection radius"),
    };
    let f = (n - 1) / 3;
    let f = f.max(1);
    if n < 3 * f + 1 {
        return config("the simulated executions need n >= 4");
    }
    let cfg = ProtocolConfig::new(
        AggregationRule::TrimmedMean,
        AttackModel::none(),
        StepSchedule::Harmonic { eta0: 1.0 },
        Some(radius),
        options.horizon,
    );
    let first = run_bdtd(&mdp, policy, features, &AgentRoster::zeros(n, f, vec![0], features.dim())?, &cfg, options.seed)?;
    let last = run_bdtd(&mdp, policy, features, &AgentRoster::zeros(n, f, vec![n - 1], features.dim())?, &cfg, options.seed)?;
    let middle_agents: Vec<usize> = (1..n - 1).collect();
    let traces_identical = middle_agents.iter().all(|&i| same_view(&first, &last, i));

    Ok(Theorem1Report { n, w1, w2, gap, expected_phi, gap_error, traces_identical, middle_agents })
}

/// How the weight-constraint system was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportSearch {
    /// Every non-empty support set checked for a strictly positive solution.
    Enumeration,
    /// Vertices (basic feasible solutions) of the feasible polytope. With two
    /// equality constraints each vertex has at most two non-zero weights.
    Vertices,
}

/// Largest `|N|` for which [`SupportSearch::Enumeration`] is used by default.
pub const ENUMERATION_LIMIT: usize = 13;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem2Report {
    pub n: usize,
    pub f: usize,
    pub q: usize,
    /// Rewards of all agents.
    pub rewards: Vec<f64>,
    /// Hull of normal rewards when the last `q` agents are Byzantine.
    pub case1_range: (f64, f64),
    /// Hull of normal rewards when the first `f` agents are Byzantine.
    pub case2_range: (f64, f64),
    /// The only value consistent with both cases.
    pub target: f64,
    /// Normal agents of the first case.
    pub normal: Vec<usize>,
    /// Normal agents whose weight is zero in every solution.
    pub forced_zero: Vec<usize>,
    /// Largest number of strictly positive weights over all solutions.
    pub max_support: usize,
    pub method: SupportSearch,
}

impl Theorem2Report {
    /// `alpha_i = 0` for the first `f` agents and max support `|N| - f`.
    pub fn pass(&self) -> bool {
        let expected: Vec<usize> = (0..self.f).collect();
        self.forced_zero == expected && self.max_support == self.normal.len() - self.f
    }
}

/// Rewards of the weight-support construction (0-based ids): agent `i` gets `i + 1` when `i < f` or
/// `i >= n - q`, and `f + 1` otherwise.
pub fn theorem2_rewards(n: usize, f: usize, q: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i < f || i >= n - q { (i + 1) as f64 } else { (f + 1) as f64 })
        .collect()
}

fn hull(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

/// Agents that can be strictly positive in some `alpha` on the simplex with
/// `sum alpha_i r_i = target`. The feasible set is convex, so the union of
/// such agents is itself the support of one solution.
pub fn positive_agents(rewards: &[f64], target: f64, method: SupportSearch) -> Result<Vec<bool>> {
    let m = rewards.len();
    let mut can = vec![false; m];
    match method {
        SupportSearch::Enumeration => {
            if m > 25 {
                return Err(Error::Capacity { what: "support subsets", size: 1u128 << m, limit: 1 << 25 });
            }
            for mask in 1u32..(1u32 << m) {
                let (lo, hi) = hull((0..m).filter(|&i| mask >> i & 1 == 1).map(|i| rewards[i]));
                // a strictly positive combination hits `target` iff it lies
                // strictly inside the hull, or the hull is the single point `target`
                let feasible = (lo < target && target < hi) || (lo == target && hi == target);
                if feasible {
                    for (i, c) in can.iter_mut().enumerate() {
                        *c |= mask >> i & 1 == 1;
                    }
                }
            }
        }
        SupportSearch::Vertices => {
            for i in 0..m {
                if rewards[i] == target {
                    can[i] = true;
                }
                for j in i + 1..m {
                    let (ri, rj) = (rewards[i], rewards[j]);
                    if ri == rj {
                        continue;
                    }
                    let a = (target - rj) / (ri - rj);
                    if a > 0.0 && a < 1.0 {
                        can[i] = true;
                        can[j] = true;
                    }
                }
            }
        }
    }
    Ok(can)
}

/// Solves `sum_{i in N} alpha_i r_i = f + 1` over the simplex for the first
/// case and reports which weights are forced to zero.
pub fn impossibility_theorem2(n: usize, f: usize, q: usize) -> Result<Theorem2Report> {
    let method = if n - q.min(n) <= ENUMERATION_LIMIT { SupportSearch::Enumeration } else { SupportSearch::Vertices };
    impossibility_theorem2_with(n, f, q, method)
}

pub fn impossibility_theorem2_with(n: usize, f: usize, q: usize, method: SupportSearch) -> Result<Theorem2Report> {
    if n < 3 * f + 1 || q == 0 || q > f {
        return config(format!("need n >= 3f + 1 and 0 < q <= f, got n = {n}, f = {f}, q = {q}"));
    }
    let rewards = theorem2_rewards(n, f, q);
    let case1_range = hull(rewards[..n - q].iter().copied());
    let case2_range = hull(rewards[f..].iter().copied());
    let (lo, hi) = (case1_range.0.max(case2_range.0), case1_range.1.min(case2_range.1));
    if lo != hi {
        return Err(Error::Config(format!("case ranges intersect in [{lo}, {hi}], not a single point")));
    }
    let target = lo;
    let normal: Vec<usize> = (0..n - q).collect();
    let normal_rewards: Vec<f64> = normal.iter().map(|&i| rewards[i]).collect();
    let can = positive_agents(&normal_rewards, target, method)?;
    let forced_zero = normal.iter().copied().filter(|&i| !can[i]).collect();
    let max_support = can.iter().filter(|&&c| c).count();
    Ok(Theorem2Report { n, f, q, rewards, case1_range, case2_range, target, normal, forced_zero, max_support, method })
}
