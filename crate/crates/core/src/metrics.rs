//! Evaluation metrics and exact fixed points.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, config, Error, Result};
use crate::features::{dot, FeatureMap, ParamVector};
use crate::mdp::{expected_reward, induced_chain, policy_stationary_distribution, JointPolicy, NetworkedMdp};

/// Squared Bellman error of one sample averaged over agents:
/// `mean_i (r_bar + gamma phi(s')^T w^i - phi(s)^T w^i)^2`, where `r_bar` is
/// the mean of `rewards`.
pub fn sbe(params: &[ParamVector], phi_s: &[f64], phi_next: &[f64], rewards: &[f64], gamma: f64) -> Result<f64> {
    if params.is_empty() || rewards.is_empty() {
        return config("sbe needs at least one normal agent");
    }
    let r_bar = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let mut total = 0.0;
    for w in params {
        check_dim(phi_s.len(), w.dim())?;
        check_dim(phi_next.len(), w.dim())?;
        let residual = r_bar + gamma * dot(phi_next, w) - dot(phi_s, w);
        total += residual * residual;
    }
    Ok(total / params.len() as f64)
}

/// Running mean of the first `k` per-sample errors.
pub fn msbe(sbe: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > sbe.len() {
        return config(format!("msbe needs 1 <= k <= {}, got {k}", sbe.len()));
    }
    Ok(sbe[..k].iter().sum::<f64>() / k as f64)
}

/// `msbe(sbe, k)` for every `k`.
pub fn msbe_series(sbe: &[f64]) -> Vec<f64> {
    let mut total = 0.0;
    sbe.iter()
        .enumerate()
        .map(|(k, x)| {
            total += x;
            total / (k + 1) as f64
        })
        .collect()
}

/// Mean squared distance of the parameters from their average.
pub fn consensus_error(params: &[ParamVector]) -> f64 {
    let Some(first) = params.first() else {
        return 0.0;
    };
    let n = params.len() as f64;
    let mut mean = vec![0.0; first.dim()];
    for w in params {
        for (m, x) in mean.iter_mut().zip(w.iter()) {
            *m += x / n;
        }
    }
    params
        .iter()
        .map(|w| w.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Simplex weights over a set of normal agents.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointSpec {
    normal: Vec<usize>,
    alpha: Vec<f64>,
}

impl FixedPointSpec {
    pub fn new(normal: Vec<usize>, alpha: Vec<f64>) -> Result<Self> {
        check_dim(normal.len(), alpha.len())?;
        if normal.is_empty() {
            return config("fixed point needs at least one normal agent");
        }
        if alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return config("weights must be non-negative");
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return config(format!("weights must sum to 1, got {total}"));
        }
        let mut sorted = normal.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != normal.len() {
            return config("normal agents must be distinct");
        }
        Ok(Self { normal, alpha })
    }

    pub fn uniform(normal: Vec<usize>) -> Result<Self> {
        let alpha = vec![1.0 / normal.len().max(1) as f64; normal.len()];
        Self::new(normal, alpha)
    }

    /// All mass on one agent.
    pub fn single(agent: usize) -> Self {
        Self { normal: vec![agent], alpha: vec![1.0] }
    }

    pub fn normal(&self) -> &[usize] {
        &self.normal
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Number of agents with weight at least `xi`.
    pub fn support_at(&self, xi: f64) -> usize {
        self.alpha.iter().filter(|&&a| a >= xi).count()
    }

    /// Whether at least `nu` agents carry weight `>= xi`.
    pub fn is_admissible(&self, nu: usize, xi: f64) -> bool {
        self.support_at(xi) >= nu
    }

    /// Weights expanded to all `n` agents (zero outside the normal set).
    pub fn full_weights(&self, n: usize) -> Result<Vec<f64>> {
        let mut w = vec![0.0; n];
        for (&i, &a) in self.normal.iter().zip(&self.alpha) {
            if i >= n {
                return config(format!("agent {i} out of range for {n} agents"));
            }
            w[i] = a;
        }
        Ok(w)
    }
}

fn feature_rows(features: &FeatureMap, mdp: &NetworkedMdp) -> Result<DMatrix<f64>> {
    check_dim(mdp.state_count(), features.state_count())?;
    Ok(features.matrix())
}

/// `E_{s ~ d_pi, a ~ pi}[phi(s) sum_i alpha_i r^i(s, a)]`.
pub fn weighted_fixed_point(
    mdp: &NetworkedMdp,
    policy: &JointPolicy,
    features: &FeatureMap,
    spec: &FixedPointSpec,
) -> Result<ParamVector> {
    let phi = feature_rows(features, mdp)?;
    let d = policy_stationary_distribution(mdp, policy)?;
    let r = expected_reward(mdp, policy, &spec.full_weights(mdp.num_agents())?)?;
    let mut out = vec![0.0; features.dim()];
    for s in 0..mdp.state_count() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += d[s] * phi[(s, j)] * r[s];
        }
    }
    Ok(ParamVector(out))
}

/// `E_{d_pi}[phi(s)]`.
pub fn expected_feature(mdp: &NetworkedMdp, policy: &JointPolicy, features: &FeatureMap) -> Result<ParamVector> {
    let phi = feature_rows(features, mdp)?;
    let d = DVector::from_vec(policy_stationary_distribution(mdp, policy)?);
    Ok(ParamVector((phi.transpose() * d).iter().copied().collect()))
}

/// Projected-Bellman fixed point `A^{-1} b` with
/// `A = E[phi(s) (phi(s) - gamma phi(s'))^T]` and `b = E[phi(s) r_alpha(s, a)]`.
pub fn lstd_fixed_point(
    mdp: &NetworkedMdp,
    policy: &JointPolicy,
    features: &FeatureMap,
    spec: &FixedPointSpec,
) -> Result<ParamVector> {
    let phi = feature_rows(features, mdp)?;
    let chain = induced_chain(mdp, policy)?;
    let d = policy_stationary_distribution(mdp, policy)?;
    let r = DVector::from_vec(expected_reward(mdp, policy, &spec.full_weights(mdp.num_agents())?)?);
    let d_diag = DMatrix::from_diagonal(&DVector::from_vec(d));
    let next_phi = &chain * &phi * mdp.discount();
    let a = phi.transpose() * &d_diag * (&phi - next_phi);
    let b = phi.transpose() * &d_diag * r;
    let w = a
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("LSTD matrix A is singular".into()))?;
    let residual = (&a * &w - &b).amax();
    let scale = 1.0f64.max(b.amax()).max(a.amax() * w.amax());
    if !(residual <= 1e-10 * scale) {
        return Err(Error::Singular(format!("LSTD residual {residual:e} too large; A is ill-conditioned")));
    }
    Ok(ParamVector(w.iter().copied().collect()))
}
