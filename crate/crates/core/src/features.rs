//! Linear value-function approximation `V(s; w) = phi(s)^T w`.

use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config, Error, Result};
use crate::mdp::SCHEMA_VERSION;

const NORM_TOL: f64 = 1e-12;

/// Value-function parameter of one agent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn scalar(x: f64) -> Self {
        Self(vec![x])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    /// Row-major `|S| x d`.
    Table(Vec<f64>),
    /// `phi(s)` regenerated on demand from `(seed, s)`; for state spaces too
    /// large to tabulate.
    Hashed { seed: u64, state_count: usize },
}

/// State features `phi(s)` with `||phi(s)|| <= 1` and a full-rank feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dim: usize,
    storage: Storage,
    /// `min_s |phi(s)|` in scalar mode.
    phi_min: Option<f64>,
}

impl FeatureMap {
    /// Validates norms and rank of an explicit table.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return config("feature table needs at least one state");
        };
        let dim = first.len();
        if dim == 0 {
            return config("feature dimension must be positive");
        }
        let mut table = Vec::with_capacity(rows.len() * dim);
        for (s, row) in rows.iter().enumerate() {
            check_dim(dim, row.len())?;
            if row.iter().any(|x| !x.is_finite()) {
                return config(format!("feature of state {s} is not finite"));
            }
            let norm = l2_norm(row);
            if norm > 1.0 + NORM_TOL {
                return config(format!("||phi({s})|| = {norm} exceeds 1"));
            }
            table.extend_from_slice(row);
        }
        check_rank(&table, rows.len(), dim)?;
        let phi_min = (dim == 1).then(|| table.iter().fold(f64::INFINITY, |m, x| m.min(x.abs())));
        Ok(Self { dim, storage: Storage::Table(table), phi_min })
    }

    /// Scalar features `phi(s) = values[s]`.
    pub fn scalar(values: Vec<f64>) -> Result<Self> {
        Self::from_rows(values.into_iter().map(|x| vec![x]).collect())
    }

    /// Constant scalar feature on every state.
    pub fn constant(state_count: usize, value: f64) -> Result<Self> {
        Self::scalar(vec![value; state_count])
    }

    /// Seeded scalar features uniform in `[low, 1]`.
    pub fn random_scalar(state_count: usize, low: f64, seed: u64) -> Result<Self> {
        if !(low > 0.0 && low <= 1.0) {
            return config("scalar feature lower bound must lie in (0, 1]");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::scalar((0..state_count).map(|_| rng.random_range(low..=1.0)).collect())
    }

    /// One-hot features, `Phi = I`.
    pub fn tabular(state_count: usize) -> Result<Self> {
        Self::from_rows(
            (0..state_count)
                .map(|s| {
                    let mut row = vec![0.0; state_count];
                    row[s] = 1.0;
                    row
                })
                .collect(),
        )
    }

    /// Seeded random unit-norm features with non-negative entries, tabulated.
    pub fn random_table(state_count: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::from_rows((0..state_count).map(|s| hashed_feature(seed, s, dim)).collect())
    }

    /// Same construction as [`FeatureMap::random_table`] without storing the
    /// table. Rank is certified on the first `min(|S|, 4d)` states.
    pub fn hashed(state_count: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return config("feature dimension must be positive");
        }
        let probe = state_count.min(4 * dim);
        let table: Vec<f64> = (0..probe).flat_map(|s| hashed_feature(seed, s, dim)).collect();
        check_rank(&table, probe, dim)?;
        Ok(Self { dim, storage: Storage::Hashed { seed, state_count }, phi_min: None })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state_count(&self) -> usize {
        match &self.storage {
            Storage::Table(t) => t.len() / self.dim,
            Storage::Hashed { state_count, .. } => *state_count,
        }
    }

    pub fn phi_min(&self) -> Option<f64> {
        self.phi_min
    }

    /// Writes `phi(s)` into `out`.
    pub fn phi_into(&self, state: usize, out: &mut [f64]) {
        match &self.storage {
            Storage::Table(t) => out.copy_from_slice(&t[state * self.dim..(state + 1) * self.dim]),
            Storage::Hashed { seed, .. } => fill_hashed(*seed, state, out),
        }
    }

    pub fn phi(&self, state: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.phi_into(state, &mut out);
        out
    }

    /// Feature matrix `Phi` (only for tabulated maps or small hashed ones).
    pub fn matrix(&self) -> DMatrix<f64> {
        let s = self.state_count();
        DMatrix::from_fn(s, self.dim, |i, j| match &self.storage {
            Storage::Table(t) => t[i * self.dim + j],
            Storage::Hashed { .. } => self.phi(i)[j],
        })
    }

    pub fn to_fixture(&self) -> FeatureFixture {
        let storage = match &self.storage {
            Storage::Table(t) => FeatureStorage::Table { rows: t.chunks(self.dim).map(<[f64]>::to_vec).collect() },
            Storage::Hashed { seed, state_count } => {
                FeatureStorage::Hashed { seed: *seed, state_count: *state_count, dim: self.dim }
            }
        };
        FeatureFixture { schema_version: SCHEMA_VERSION, storage }
    }

    pub fn from_fixture(fixture: &FeatureFixture) -> Result<Self> {
        if fixture.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported schema_version {}", fixture.schema_version)));
        }
        match &fixture.storage {
            FeatureStorage::Table { rows } => Self::from_rows(rows.clone()),
            FeatureStorage::Hashed { seed, state_count, dim } => Self::hashed(*state_count, *dim, *seed),
        }
    }
}

/// On-disk representation of a [`FeatureMap`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFixture {
    pub schema_version: u32,
    pub storage: FeatureStorage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureStorage {
    Table { rows: Vec<Vec<f64>> },
    Hashed { seed: u64, state_count: usize, dim: usize },
}

fn fill_hashed(seed: u64, state: usize, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(state as u64);
    for x in out.iter_mut() {
        *x = rng.random::<f64>();
    }
    let norm = l2_norm(out);
    if norm > 0.0 {
        out.iter_mut().for_each(|x| *x /= norm);
    }
}

fn hashed_feature(seed: u64, state: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    fill_hashed(seed, state, &mut out);
    out
}

fn check_rank(table: &[f64], rows: usize, dim: usize) -> Result<()> {
    if rows < dim {
        return config(format!("feature matrix with {rows} states cannot have rank {dim}"));
    }
    let phi = DMatrix::from_row_slice(rows, dim, table);
    let rank = phi.rank(1e-10);
    if rank < dim {
        return config(format!("feature matrix has rank {rank} < {dim}"));
    }
    Ok(())
}

/// TD error `r + gamma phi(s')^T w - phi(s)^T w`.
pub fn td_error(reward: f64, w: &[f64], phi_s: &[f64], phi_next: &[f64], gamma: f64) -> Result<f64> {
    check_dim(w.len(), phi_s.len())?;
    check_dim(w.len(), phi_next.len())?;
    Ok(reward + gamma * dot(phi_next, w) - dot(phi_s, w))
}

/// Scalar-mode projection radius `2 r_max / (phi_min (1 - gamma)^{3/2})`.
pub fn default_radius(r_max: f64, phi_min: f64, gamma: f64) -> Result<f64> {
    if !(phi_min > 0.0) {
        return config("projection radius undefined for phi_min = 0");
    }
    if !(0.0..1.0).contains(&gamma) {
        return config(format!("discount must lie in [0, 1), got {gamma}"));
    }
    if !(r_max > 0.0) {
        return config("r_max must be positive");
    }
    Ok(2.0 * r_max / (phi_min * (1.0 - gamma).powf(1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Euclidean ball of radius `R`.
    #[default]
    L2,
    /// Each coordinate clamped to `[-R, R]`.
    Coordinate,
}

/// Projects onto the radius-`R` ball of the given mode.
pub fn project_ball(w: &ParamVector, radius: f64, mode: ProjectionMode) -> ParamVector {
    let mut out = w.clone();
    project_in_place(&mut out, radius, mode);
    out
}

pub fn project_in_place(w: &mut [f64], radius: f64, mode: ProjectionMode) {
    match mode {
        ProjectionMode::L2 => {
            let norm = l2_norm(w);
            if norm > radius {
                let scale = radius / norm;
                w.iter_mut().for_each(|x| *x *= scale);
            }
        }
        ProjectionMode::Coordinate => w.iter_mut().for_each(|x| *x = x.clamp(-radius, radius)),
    }
}

/// Whether `w` lies in the radius-`R` ball of the given mode.
pub fn inside_ball(w: &[f64], radius: f64, mode: ProjectionMode) -> bool {
    match mode {
        ProjectionMode::L2 => l2_norm(w) <= radius,
        ProjectionMode::Coordinate => w.iter().all(|x| x.abs() <= radius),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn td_error_examples() {
        assert_eq!(td_error(0.0, &[0.0], &[1.0], &[1.0], 0.9).unwrap(), 0.0);
        let gamma = 0.75;
        let w = 3.0 / (1.0 - gamma);
        assert!(td_error(3.0, &[w], &[1.0], &[1.0], gamma).unwrap().abs() < 1e-12);
        let delta = td_error(1.0, &[0.5], &[1.0], &[1.0], 0.9).unwrap();
        assert!((delta - 0.95).abs() < 1e-12);
        assert!(matches!(
            td_error(1.0, &[0.5, 0.5], &[1.0], &[1.0, 0.0], 0.9),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn default_radius_examples() {
        assert!((default_radius(1.0, 1.0, 0.0).unwrap() - 2.0).abs() < 1e-12);
        // 2 / 0.5^1.5 = 5.656854...
        assert!((default_radius(1.0, 1.0, 0.5).unwrap() - 5.656854249492381).abs() < 1e-9);
        let base = default_radius(1.0, 0.3, 0.7).unwrap();
        assert!((default_radius(2.0, 0.3, 0.7).unwrap() - 2.0 * base).abs() < 1e-12);
        assert!(default_radius(1.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn projection_examples() {
        let inside = ParamVector(vec![0.3, -0.4]);
        assert_eq!(project_ball(&inside, 1.0, ProjectionMode::L2), inside);
        assert_eq!(project_ball(&inside, 1.0, ProjectionMode::Coordinate), inside);
        let r = 1.5;
        for mode in [ProjectionMode::L2, ProjectionMode::Coordinate] {
            assert_eq!(project_ball(&ParamVector::scalar(2.0 * r), r, mode).0, vec![r]);
            assert_eq!(project_ball(&ParamVector::scalar(-2.0 * r), r, mode).0, vec![-r]);
        }
        assert_eq!(
            project_ball(&ParamVector(vec![3.0, -4.0]), 2.0, ProjectionMode::Coordinate).0,
            vec![2.0, -2.0]
        );
        let l2 = project_ball(&ParamVector(vec![3.0, -4.0]), 2.0, ProjectionMode::L2);
        assert!((l2[0] - 1.2).abs() < 1e-12 && (l2[1] + 1.6).abs() < 1e-12);
    }

    #[test]
    fn feature_validation() {
        assert!(FeatureMap::scalar(vec![0.5, 1.2]).is_err());
        assert!(FeatureMap::from_rows(vec![vec![1.0, 0.0], vec![0.5, 0.0]]).is_err());
        let f = FeatureMap::scalar(vec![0.5, -0.25, 1.0]).unwrap();
        assert_eq!(f.phi_min(), Some(0.25));
        let zero = FeatureMap::scalar(vec![0.0, 1.0]).unwrap();
        assert_eq!(zero.phi_min(), Some(0.0));
        assert!(FeatureMap::tabular(3).unwrap().phi_min().is_none());
    }

    #[test]
    fn hashed_matches_table() {
        let table = FeatureMap::random_table(50, 6, 42).unwrap();
        let hashed = FeatureMap::hashed(50, 6, 42).unwrap();
        for s in [0, 7, 49] {
            let phi = table.phi(s);
            assert_eq!(phi, hashed.phi(s));
            assert!((l2_norm(&phi) - 1.0).abs() < 1e-12);
            assert!(phi.iter().all(|&x| x >= 0.0));
        }
        assert!(FeatureMap::hashed(3, 6, 1).is_err());
    }

    #[test]
    fn feature_fixture_round_trip() {
        let f = FeatureMap::random_scalar(4, 0.2, 3).unwrap();
        let text = serde_json::to_string(&f.to_fixture()).unwrap();
        let back: FeatureFixture = serde_json::from_str(&text).unwrap();
        assert_eq!(FeatureMap::from_fixture(&back).unwrap(), f);
    }

    fn vec_in(dim: usize, bound: f64) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-bound..bound, dim)
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(w in vec_in(4, 20.0), r in 0.1f64..10.0) {
            for mode in [ProjectionMode::L2, ProjectionMode::Coordinate] {
                let once = project_ball(&ParamVector(w.clone()), r, mode);
                let twice = project_ball(&once, r, mode);
                prop_assert!(inside_ball(&once, r * (1.0 + 1e-12), mode));
                for (a, b) in once.iter().zip(twice.iter()) {
                    prop_assert!((a - b).abs() <= 1e-12 * r);
                }
            }
        }

        #[test]
        fn projection_is_non_expansive(w in vec_in(3, 20.0), v in vec_in(3, 1.0), r in 0.5f64..10.0) {
            for mode in [ProjectionMode::L2, ProjectionMode::Coordinate] {
                // scale v into the ball of this mode
                let v = project_ball(&ParamVector(v.iter().map(|x| x * r).collect()), r, mode);
                let p = project_ball(&ParamVector(w.clone()), r, mode);
                let before: Vec<f64> = w.iter().zip(v.iter()).map(|(a, b)| a - b).collect();
                let after: Vec<f64> = p.iter().zip(v.iter()).map(|(a, b)| a - b).collect();
                prop_assert!(l2_norm(&after) <= l2_norm(&before) + 1e-12);
            }
        }

        #[test]
        fn clamp_contracts_consensus(w in prop::collection::vec(-20.0f64..20.0, 1..12), r in 0.1f64..10.0) {
            let spread = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt()
            };
            let clamped: Vec<f64> = w.iter().map(|x| x.clamp(-r, r)).collect();
            prop_assert!(spread(&clamped) <= spread(&w) + 1e-12);
        }
    }
}
