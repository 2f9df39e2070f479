//! Synchronous-round BDTD engine over a complete graph.
//!
//! Each round every agent sends its parameter to all others, normal agents
//! aggregate what they received, one shared environment transition is drawn,
//! and every agent takes a projected TD step with its own reward. Byzantine
//! agents run the same honest computation on a shadow parameter; the attack
//! only replaces what they send.
//!
//! Randomness is split into independent ChaCha streams (environment,
//! adversary, message delivery and one aggregation stream per agent), so an
//! attack never perturbs the environment trajectory.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{AttackModel, AttackPlan, RoundContext};
use crate::aggregation::AggregationRule;
use crate::error::{check_dim, config, Error, Result};
use crate::features::{inside_ball, project_in_place, td_error, FeatureMap, ParamVector, ProjectionMode};
use crate::mdp::{sample_step, JointPolicy, NetworkedMdp};
use crate::metrics::{consensus_error, msbe, msbe_series, sbe};

const ENV_STREAM: u64 = 1;
const ADVERSARY_STREAM: u64 = 2;
const NETWORK_STREAM: u64 = 3;
const AGGREGATION_STREAM_BASE: u64 = 1000;

/// Who is Byzantine and where everybody starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRoster {
    n: usize,
    f: usize,
    byzantine: Vec<usize>,
    initial: Vec<ParamVector>,
}

impl AgentRoster {
    /// Requires `n >= 3f + 1`, `|F| <= f` and distinct in-range ids.
    pub fn new(n: usize, f: usize, mut byzantine: Vec<usize>, initial: Vec<ParamVector>) -> Result<Self> {
        if n < 3 * f + 1 {
            return config(format!("need n >= 3f + 1, got n = {n}, f = {f}"));
        }
        byzantine.sort_unstable();
        byzantine.dedup();
        if byzantine.len() > f {
            return config(format!("{} Byzantine agents exceed the bound f = {f}", byzantine.len()));
        }
        if byzantine.iter().any(|&b| b >= n) {
            return config("Byzantine id out of range");
        }
        if byzantine.len() == n {
            return config("at least one normal agent is required");
        }
        check_dim(n, initial.len())?;
        if let Some(first) = initial.first() {
            for w in &initial {
                check_dim(first.dim(), w.dim())?;
            }
        }
        Ok(Self { n, f, byzantine, initial })
    }

    /// Every agent starts at the origin.
    pub fn zeros(n: usize, f: usize, byzantine: Vec<usize>, dim: usize) -> Result<Self> {
        Self::new(n, f, byzantine, vec![ParamVector::zeros(dim); n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn byzantine(&self) -> &[usize] {
        &self.byzantine
    }

    pub fn is_byzantine(&self, agent: usize) -> bool {
        self.byzantine.binary_search(&agent).is_ok()
    }

    pub fn normal(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| !self.is_byzantine(i)).collect()
    }

    pub fn initial(&self) -> &[ParamVector] {
        &self.initial
    }
}

/// Step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    /// `eta0 / k`
    Harmonic { eta0: f64 },
    Constant { eta: f64 },
}

/// `eta_k`; the harmonic schedule maps `k = 0` to `eta0`.
pub fn step_size(schedule: StepSchedule, k: usize) -> f64 {
    match schedule {
        StepSchedule::Harmonic { eta0 } => eta0 / k.max(1) as f64,
        StepSchedule::Constant { eta } => eta,
    }
}

/// Per-round messages for every ordered pair of distinct agents.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessageBuffer {
    n: usize,
    values: Vec<Option<ParamVector>>,
}

impl RoundMessageBuffer {
    pub fn new(n: usize) -> Self {
        Self { n, values: vec![None; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn deliver(&mut self, sender: usize, receiver: usize, value: ParamVector) {
        self.values[sender * self.n + receiver] = Some(value);
    }

    pub fn drop_message(&mut self, sender: usize, receiver: usize) {
        self.values[sender * self.n + receiver] = None;
    }

    pub fn is_delivered(&self, sender: usize, receiver: usize) -> bool {
        self.values[sender * self.n + receiver].is_some()
    }

    pub fn get(&self, sender: usize, receiver: usize) -> Option<&ParamVector> {
        self.values[sender * self.n + receiver].as_ref()
    }

    /// Replaces every undelivered off-diagonal entry with `default`.
    pub fn fill_undelivered(&mut self, default: &ParamVector) {
        for s in 0..self.n {
            for r in 0..self.n {
                if s != r && self.values[s * self.n + r].is_none() {
                    self.values[s * self.n + r] = Some(default.clone());
                }
            }
        }
    }
}

/// One receiver's local knowledge: which senders it still listens to and
/// its decremented `(n, f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalView {
    pub receiver: usize,
    pub active: Vec<bool>,
    pub n: usize,
    pub f: usize,
}

impl LocalView {
    pub fn new(receiver: usize, n: usize, f: usize) -> Self {
        Self { receiver, active: vec![true; n], n, f }
    }

    /// Active senders other than the receiver, ascending.
    pub fn senders(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.active.len()).filter(move |&s| s != self.receiver && self.active[s])
    }
}

/// Removes every sender whose value lies outside the projection ball from the
/// receiver's view, decrementing its local `n` and `f` (clamped at zero).
/// Returns the newly removed senders.
pub fn exclusion_filter(
    buffer: &RoundMessageBuffer,
    radius: f64,
    mode: ProjectionMode,
    view: &mut LocalView,
) -> Vec<usize> {
    let removed: Vec<usize> = view
        .senders()
        .filter(|&s| {
            buffer
                .get(s, view.receiver)
                .is_some_and(|v| !v.is_finite() || !inside_ball(v, radius, mode))
        })
        .collect();
    for &s in &removed {
        view.active[s] = false;
        view.n -= 1;
        if view.f == 0 {
            log::warn!("agent {} excluded sender {s} with local f already 0", view.receiver);
        } else {
            view.f -= 1;
        }
    }
    removed
}

/// Engine settings besides the model, roster and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub rule: AggregationRule,
    pub attack: AttackModel,
    pub schedule: StepSchedule,
    /// Projection radius; `None` disables projection (ablation only).
    pub radius: Option<f64>,
    #[serde(default)]
    pub projection: ProjectionMode,
    pub horizon: usize,
    /// Whether a receiver aggregates its own value with the received ones.
    #[serde(default = "default_true")]
    pub include_self: bool,
    /// Out-of-ball exclusion; by default only the trimmed-mean rule uses it.
    #[serde(default)]
    pub exclusion: Option<bool>,
    /// Substitute for undelivered messages; the zero vector by default.
    #[serde(default)]
    pub default_value: Option<Vec<f64>>,
    /// Probability that a single message is lost.
    #[serde(default)]
    pub delivery_loss: f64,
    /// Keep per-round parameter vectors in the trace.
    #[serde(default = "default_true")]
    pub record_params: bool,
}

fn default_true() -> bool {
    true
}

impl ProtocolConfig {
    pub fn new(rule: AggregationRule, attack: AttackModel, schedule: StepSchedule, radius: Option<f64>, horizon: usize) -> Self {
        Self {
            rule,
            attack,
            schedule,
            radius,
            projection: ProjectionMode::default(),
            horizon,
            include_self: true,
            exclusion: None,
            default_value: None,
            delivery_loss: 0.0,
            record_params: true,
        }
    }

    pub fn exclusion_enabled(&self) -> bool {
        self.radius.is_some() && self.exclusion.unwrap_or(matches!(self.rule, AggregationRule::TrimmedMean))
    }

    /// SHA-256 of the canonical JSON encoding (keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        hex::encode(digest)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.horizon == 0 {
            return config("horizon must be at least 1");
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) || !r.is_finite() {
                return config("projection radius must be positive and finite");
            }
        }
        let eta = match self.schedule {
            StepSchedule::Harmonic { eta0 } => eta0,
            StepSchedule::Constant { eta } => eta,
        };
        if !(eta > 0.0) || !eta.is_finite() {
            return config("step size must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.delivery_loss) {
            return config("delivery_loss must lie in [0, 1)");
        }
        if let Some(v) = &self.default_value {
            check_dim(dim, v.len())?;
        }
        if let AggregationRule::FedAvg { weights: Some(_) } = self.rule {
            if self.exclusion_enabled() || self.delivery_loss > 0.0 {
                return config("weighted fedavg cannot be combined with exclusion or message loss");
            }
        }
        Ok(())
    }
}

/// A sender removed from a receiver's view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub receiver: usize,
    pub sender: usize,
}

/// Everything that happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub state: usize,
    pub action: Vec<usize>,
    pub next_state: usize,
    /// Rewards of all agents.
    pub rewards: Vec<f64>,
    /// `w_k` of all agents (shadow parameters for Byzantine ones); empty
    /// unless parameters are recorded.
    pub params: Vec<ParamVector>,
    /// Post-consensus values of all agents; empty unless recorded.
    pub consensus: Vec<ParamVector>,
    pub td_errors: Vec<f64>,
    pub exclusions: Vec<Exclusion>,
    pub step_size: f64,
    /// Squared Bellman error of the normal agents at this sample, using `w_k`.
    pub sbe: f64,
    /// Consensus error of the normal agents after the update.
    pub ce: f64,
}

/// Result of [`run_bdtd`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub seed: u64,
    pub config_hash: String,
    pub normal: Vec<usize>,
    pub rounds: Vec<RoundRecord>,
    /// Parameters of all agents after the last round.
    pub final_params: Vec<ParamVector>,
}

impl RunTrace {
    pub fn horizon(&self) -> usize {
        self.rounds.len()
    }

    pub fn sbe_series(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.sbe).collect()
    }

    pub fn ce_series(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.ce).collect()
    }

    pub fn msbe_series(&self) -> Vec<f64> {
        msbe_series(&self.sbe_series())
    }

    /// Mean of the per-round SBE over rounds `1..=k`.
    pub fn msbe(&self, k: usize) -> Result<f64> {
        msbe(&self.sbe_series(), k)
    }

    /// Consensus error after round `k` (1-based).
    pub fn ce(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.rounds.get(i)).map(|r| r.ce)
    }

    pub fn final_normal_params(&self) -> Vec<ParamVector> {
        self.normal.iter().map(|&i| self.final_params[i].clone()).collect()
    }

    /// Trajectory `w_0, w_1, ..., w_H` of one agent, if parameters were recorded.
    pub fn agent_trajectory(&self, agent: usize) -> Option<Vec<ParamVector>> {
        let mut out = Vec::with_capacity(self.rounds.len() + 1);
        for r in &self.rounds {
            out.push(r.params.get(agent)?.clone());
        }
        out.push(self.final_params.get(agent)?.clone());
        Some(out)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn fedavg_weights_for(rule: &AggregationRule, senders: &[usize]) -> Result<AggregationRule> {
    match rule {
        AggregationRule::FedAvg { weights: Some(w) } => {
            let picked: Vec<f64> = senders
                .iter()
                .map(|&s| w.get(s).copied().ok_or(Error::Dimension { expected: s + 1, actual: w.len() }))
                .collect::<Result<_>>()?;
            let total: f64 = picked.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Aggregation("fedavg weights of the received senders sum to zero".into()));
            }
            Ok(AggregationRule::FedAvg { weights: Some(picked.iter().map(|x| x / total).collect()) })
        }
        other => Ok(other.clone()),
    }
}

/// Runs BDTD for `config.horizon` rounds. Deterministic given `seed`.
pub fn run_bdtd(
    mdp: &NetworkedMdp,
    policy: &JointPolicy,
    features: &FeatureMap,
    roster: &AgentRoster,
    config: &ProtocolConfig,
    seed: u64,
) -> Result<RunTrace> {
    let n = roster.n();
    let dim = features.dim();
    check_dim(n, mdp.num_agents())?;
    check_dim(n, policy.num_agents())?;
    check_dim(mdp.state_count(), features.state_count())?;
    for w in roster.initial() {
        check_dim(dim, w.dim())?;
    }
    config.validate(dim)?;
    if let Some(r) = config.radius {
        if roster.initial().iter().any(|w| !inside_ball(w, r, config.projection)) {
            return self::config("initial parameters must lie inside the projection ball");
        }
    }

    let gamma = mdp.discount();
    let normal = roster.normal();
    let exclusion = config.exclusion_enabled();
    let default_value = ParamVector(config.default_value.clone().unwrap_or_else(|| vec![0.0; dim]));
    let mut env_rng = stream_rng(seed, ENV_STREAM);
    let mut adv_rng = stream_rng(seed, ADVERSARY_STREAM);
    let mut net_rng = stream_rng(seed, NETWORK_STREAM);
    let mut agg_rngs: Vec<ChaCha8Rng> =
        (0..n as u64).map(|i| stream_rng(seed, AGGREGATION_STREAM_BASE + i)).collect();
    let mut views: Vec<LocalView> = (0..n).map(|i| LocalView::new(i, n, roster.f())).collect();

    let mut params: Vec<ParamVector> = roster.initial().to_vec();
    let mut state = env_rng.random_range(0..mdp.state_count());
    let mut rounds = Vec::with_capacity(config.horizon);
    let mut phi_s = vec![0.0; dim];
    let mut phi_next = vec![0.0; dim];

    for k in 0..config.horizon {
        let benign: Vec<ParamVector> = normal.iter().map(|&i| params[i].clone()).collect();
        let ctx = RoundContext {
            round: k,
            benign: &benign,
            byzantine: roster.byzantine(),
            f: roster.f(),
            radius: config.radius,
            dim,
        };
        let plan = AttackPlan::prepare(&config.attack, &ctx, &mut adv_rng)?;

        let mut buffer = RoundMessageBuffer::new(n);
        for &r in &normal {
            for s in (0..n).filter(|&s| s != r) {
                let value = if roster.is_byzantine(s) {
                    plan.poison_outgoing(s, r, &params[s], &mut adv_rng)
                } else {
                    params[s].clone()
                };
                let lost = config.delivery_loss > 0.0 && net_rng.random::<f64>() < config.delivery_loss;
                if !lost {
                    buffer.deliver(s, r, value);
                }
            }
        }
        buffer.fill_undelivered(&default_value);

        let mut exclusions = Vec::new();
        let mut consensus = Vec::with_capacity(n);
        for i in 0..n {
            let own = &params[i];
            let mut senders = Vec::with_capacity(n);
            let mut multiset = Vec::with_capacity(n);
            if config.include_self {
                senders.push(i);
                multiset.push(own.clone());
            }
            let local_f = if roster.is_byzantine(i) {
                // shadow computation: everybody's honest value, nothing excluded
                for s in (0..n).filter(|&s| s != i) {
                    senders.push(s);
                    multiset.push(params[s].clone());
                }
                roster.f()
            } else {
                let view = &mut views[i];
                if exclusion {
                    let radius = config.radius.expect("exclusion requires a radius");
                    for sender in exclusion_filter(&buffer, radius, config.projection, view) {
                        exclusions.push(Exclusion { receiver: i, sender });
                    }
                }
                for s in view.senders() {
                    senders.push(s);
                    multiset.push(buffer.get(s, i).expect("buffer filled").clone());
                }
                view.f
            };
            let rule = fedavg_weights_for(&config.rule, &senders)?;
            let w = rule.aggregate(own, &multiset, local_f, config.radius, &mut agg_rngs[i])?;
            if !w.is_finite() {
                return Err(Error::NonFinite { agent: i, round: k });
            }
            consensus.push(w);
        }

        let step = sample_step(mdp, policy, state, &mut env_rng)?;
        features.phi_into(state, &mut phi_s);
        features.phi_into(step.next_state, &mut phi_next);
        let eta = step_size(config.schedule, k + 1);

        let normal_rewards: Vec<f64> = normal.iter().map(|&i| step.rewards[i]).collect();
        let round_sbe = sbe(&benign, &phi_s, &phi_next, &normal_rewards, gamma)?;

        let mut td_errors = Vec::with_capacity(n);
        let mut next_params = Vec::with_capacity(n);
        for i in 0..n {
            let delta = td_error(step.rewards[i], &params[i], &phi_s, &phi_next, gamma)?;
            let mut w = consensus[i].clone();
            for (x, p) in w.iter_mut().zip(&phi_s) {
                *x += eta * delta * p;
            }
            if let Some(r) = config.radius {
                project_in_place(&mut w, r, config.projection);
            }
            if !w.is_finite() {
                log::error!("agent {i} produced a non-finite parameter at round {k}");
                return Err(Error::NonFinite { agent: i, round: k });
            }
            td_errors.push(delta);
            next_params.push(w);
        }

        let normal_next: Vec<ParamVector> = normal.iter().map(|&i| next_params[i].clone()).collect();
        let ce = consensus_error(&normal_next);
        let previous = std::mem::replace(&mut params, next_params);
        let (params_record, consensus_record) = if config.record_params {
            (previous, consensus)
        } else {
            (Vec::new(), Vec::new())
        };
        rounds.push(RoundRecord {
            state,
            action: step.action,
            next_state: step.next_state,
            rewards: step.rewards,
            params: params_record,
            consensus: consensus_record,
            td_errors,
            exclusions,
            step_size: eta,
            sbe: round_sbe,
            ce,
        });
        state = step.next_state;
    }

    Ok(RunTrace { seed, config_hash: config.hash(), normal, rounds, final_params: params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{AttackKind, Consistency};
    use crate::mdp::make_random_mdp;

    fn scalar_setup(states: usize, n: usize, seed: u64) -> (NetworkedMdp, JointPolicy, FeatureMap) {
        let mdp = make_random_mdp(states, n, 2, seed).unwrap();
        let policy = JointPolicy::uniform(&mdp);
        let features = FeatureMap::random_scalar(states, 0.5, seed).unwrap();
        (mdp, policy, features)
    }

    #[test]
    fn step_size_examples() {
        let h = StepSchedule::Harmonic { eta0: 1.0 };
        assert_eq!(step_size(h, 4), 0.25);
        assert_eq!(step_size(h, 0), 1.0);
        let c = StepSchedule::Constant { eta: 0.1 };
        assert_eq!(step_size(c, 0), 0.1);
        assert_eq!(step_size(c, 12345), 0.1);
        let harmonic: f64 = (1..=1_000_000).map(|k| step_size(h, k)).sum();
        assert!((harmonic - 14.392726722864).abs() < 1e-6, "{harmonic}");
        let squares: f64 = (1..=1_000_000).map(|k| step_size(h, k).powi(2)).sum();
        assert!(squares < std::f64::consts::PI.powi(2) / 6.0);
    }

    #[test]
    fn roster_validation() {
        assert!(AgentRoster::zeros(6, 2, vec![], 1).is_err());
        assert!(AgentRoster::zeros(7, 2, vec![0, 1, 2], 1).is_err());
        assert!(AgentRoster::zeros(7, 2, vec![7], 1).is_err());
        let roster = AgentRoster::zeros(7, 2, vec![5, 1, 5], 1).unwrap();
        assert_eq!(roster.byzantine(), &[1, 5]);
        assert_eq!(roster.normal(), vec![0, 2, 3, 4, 6]);
        assert!(AgentRoster::new(4, 1, vec![], vec![ParamVector::zeros(1); 3]).is_err());
    }

    #[test]
    fn exclusion_examples() {
        let mut buffer = RoundMessageBuffer::new(4);
        for s in 1..4 {
            buffer.deliver(s, 0, ParamVector::scalar(0.5));
        }
        let mut view = LocalView::new(0, 4, 1);
        assert!(exclusion_filter(&buffer, 1.0, ProjectionMode::L2, &mut view).is_empty());
        assert_eq!((view.n, view.f), (4, 1));

        buffer.deliver(2, 0, ParamVector::scalar(2.0));
        assert_eq!(exclusion_filter(&buffer, 1.0, ProjectionMode::L2, &mut view), vec![2]);
        assert_eq!((view.n, view.f), (3, 0));
        assert_eq!(view.senders().collect::<Vec<_>>(), vec![1, 3]);

        // f is clamped at zero
        buffer.deliver(3, 0, ParamVector::scalar(-5.0));
        assert_eq!(exclusion_filter(&buffer, 1.0, ProjectionMode::L2, &mut view), vec![3]);
        assert_eq!((view.n, view.f), (2, 0));
    }

    /// Every removal sequence from `n >= 3f + 1` keeps `n_local > 2 f_local`.
    #[test]
    fn trimmed_mean_precondition_survives_removals() {
        for n in 1..=13usize {
            for f in 0..=(n - 1) / 3 {
                let view = LocalView::new(0, n, f);
                let mut buffer = RoundMessageBuffer::new(n);
                for s in 1..n {
                    buffer.deliver(s, 0, ParamVector::scalar(0.0));
                }
                // remove the other senders one at a time, starting from each sender
                for start in 1..n {
                    let mut v = view.clone();
                    for step in 0..n - 1 {
                        let s = 1 + (start - 1 + step) % (n - 1);
                        buffer.deliver(s, 0, ParamVector::scalar(10.0));
                        exclusion_filter(&buffer, 1.0, ProjectionMode::L2, &mut v);
                        buffer.deliver(s, 0, ParamVector::scalar(0.0));
                        assert!(v.n > 2 * v.f, "n={n} f={f} after {} removals", step + 1);
                    }
                }
                assert!(view.n > 2 * view.f);
            }
        }
    }

    #[test]
    fn undelivered_messages_take_the_default() {
        let mut buffer = RoundMessageBuffer::new(3);
        buffer.deliver(1, 0, ParamVector::scalar(4.0));
        buffer.fill_undelivered(&ParamVector::scalar(0.0));
        assert_eq!(buffer.get(2, 0).unwrap().0, vec![0.0]);
        assert_eq!(buffer.get(1, 0).unwrap().0, vec![4.0]);
        assert!(buffer.get(0, 0).is_none());
    }

    #[test]
    fn symmetric_fault_free_run_stays_identical() {
        let mdp = make_random_mdp(1, 4, 2, 3).unwrap().with_rewards(|_, _, _| 0.7).unwrap();
        let policy = JointPolicy::uniform(&mdp);
        let features = FeatureMap::constant(1, 1.0).unwrap();
        let roster = AgentRoster::new(4, 0, vec![], vec![ParamVector::scalar(0.3); 4]).unwrap();
        let cfg = ProtocolConfig::new(
            AggregationRule::fedavg(),
            AttackModel::none(),
            StepSchedule::Harmonic { eta0: 1.0 },
            Some(10.0),
            200,
        );
        let trace = run_bdtd(&mdp, &policy, &features, &roster, &cfg, 5).unwrap();
        for round in &trace.rounds {
            assert!(round.params.windows(2).all(|w| w[0] == w[1]));
            assert_eq!(round.ce, 0.0);
        }
    }

    #[test]
    fn no_byzantine_agents_matches_fault_free_run() {
        let (mdp, policy, features) = scalar_setup(5, 7, 1);
        let base = ProtocolConfig::new(
            AggregationRule::TrimmedMean,
            AttackModel::new(AttackKind::Gaussian, Consistency::PerNeighbor),
            StepSchedule::Harmonic { eta0: 1.0 },
            Some(50.0),
            300,
        );
        let roster = AgentRoster::zeros(7, 2, vec![], 1).unwrap();
        let attacked = run_bdtd(&mdp, &policy, &features, &roster, &base, 9).unwrap();
        let clean_cfg = ProtocolConfig { attack: AttackModel::none(), ..base.clone() };
        let clean = run_bdtd(&mdp, &policy, &features, &roster, &clean_cfg, 9).unwrap();
        assert_eq!(attacked.rounds, clean.rounds);
        assert_eq!(attacked.final_params, clean.final_params);
    }

    #[test]
    fn runs_are_deterministic_and_attacks_leave_the_environment_alone() {
        let (mdp, policy, features) = scalar_setup(5, 10, 4);
        let roster = AgentRoster::zeros(10, 2, vec![3, 8], 1).unwrap();
        let cfg = ProtocolConfig::new(
            AggregationRule::TrimmedMean,
            AttackModel::new(AttackKind::Gaussian, Consistency::PerNeighbor),
            StepSchedule::Harmonic { eta0: 1.0 },
            Some(20.0),
            400,
        );
        let a = run_bdtd(&mdp, &policy, &features, &roster, &cfg, 17).unwrap();
        let b = run_bdtd(&mdp, &policy, &features, &roster, &cfg, 17).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

        let idle = ProtocolConfig { attack: AttackModel::none(), ..cfg.clone() };
        let c = run_bdtd(&mdp, &policy, &features, &roster, &idle, 17).unwrap();
        for (x, y) in a.rounds.iter().zip(&c.rounds) {
            assert_eq!((x.state, &x.action, x.next_state, &x.rewards), (y.state, &y.action, y.next_state, &y.rewards));
        }
        assert_ne!(a.final_params, c.final_params);
    }

    #[test]
    fn parameters_stay_inside_the_ball() {
        let (mdp, policy, features) = scalar_setup(5, 7, 2);
        let roster = AgentRoster::zeros(7, 2, vec![0, 6], 1).unwrap();
        for rule in [AggregationRule::TrimmedMean, AggregationRule::fedavg(), AggregationRule::krum()] {
            let cfg = ProtocolConfig::new(
                rule,
                AttackModel::new(AttackKind::FixedValue { value: vec![1e6] }, Consistency::Broadcast),
                StepSchedule::Constant { eta: 0.5 },
                Some(3.0),
                200,
            );
            let trace = run_bdtd(&mdp, &policy, &features, &roster, &cfg, 1).unwrap();
            for r in &trace.rounds {
                for &i in &trace.normal {
                    assert!(r.params[i].norm() <= 3.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_ball_senders_are_excluded_once() {
        let (mdp, policy, features) = scalar_setup(5, 7, 2);
        let roster = AgentRoster::zeros(7, 2, vec![0, 6], 1).unwrap();
        let cfg = ProtocolConfig::new(
            AggregationRule::TrimmedMean,
            AttackModel::new(AttackKind::FixedValue { value: vec![6.0] }, Consistency::Broadcast),
            StepSchedule::Constant { eta: 0.1 },
            Some(3.0),
            5,
        );
        let trace = run_bdtd(&mdp, &policy, &features, &roster, &cfg, 0).unwrap();
        assert_eq!(trace.rounds[0].exclusions.len(), 2 * 5);
        assert!(trace.rounds[1..].iter().all(|r| r.exclusions.is_empty()));
    }

    #[test]
    fn invalid_inputs_are_refused() {
        let (mdp, policy, features) = scalar_setup(5, 4, 2);
        let roster = AgentRoster::zeros(4, 1, vec![0], 1).unwrap();
        let mut cfg = ProtocolConfig::new(
            AggregationRule::TrimmedMean,
            AttackModel::none(),
            StepSchedule::Constant { eta: 0.1 },
            Some(3.0),
            0,
        );
        assert!(run_bdtd(&mdp, &policy, &features, &roster, &cfg, 0).is_err());
        cfg.horizon = 3;
        let far = AgentRoster::new(4, 1, vec![0], vec![ParamVector::scalar(9.0); 4]).unwrap();
        assert!(run_bdtd(&mdp, &policy, &features, &far, &cfg, 0).is_err());
        let wide = AgentRoster::zeros(4, 1, vec![0], 2).unwrap();
        assert!(matches!(run_bdtd(&mdp, &policy, &features, &wide, &cfg, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn unprojected_divergence_is_reported() {
        let (mdp, policy, features) = scalar_setup(5, 4, 2);
        let roster = AgentRoster::zeros(4, 1, vec![3], 1).unwrap();
        let cfg = ProtocolConfig::new(
            AggregationRule::fedavg(),
            AttackModel::new(AttackKind::FixedValue { value: vec![f64::MAX] }, Consistency::Broadcast),
            StepSchedule::Constant { eta: 0.1 },
            None,
            50,
        );
        assert!(matches!(
            run_bdtd(&mdp, &policy, &features, &roster, &cfg, 0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn config_hash_is_stable() {
        let cfg = ProtocolConfig::new(
            AggregationRule::TrimmedMean,
            AttackModel::none(),
            StepSchedule::Constant { eta: 0.1 },
            Some(3.0),
            10,
        );
        let reparsed: ProtocolConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg.hash(), reparsed.hash());
        let other = ProtocolConfig { horizon: 11, ..cfg.clone() };
        assert_ne!(cfg.hash(), other.hash());
    }
}
