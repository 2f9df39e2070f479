//! Consensus and robust aggregation rules.
//!
//! The f-trimmed mean is the rule run by normal agents in BDTD; the other
//! rules are the comparison baselines. All rules are pure functions of the
//! received multiset, except that the trimmed mean threads an rng for its
//! uniformly random tie order.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::features::{dot, l2_norm, ParamVector};

fn mean_of_sorted_slice(kept: &[f64]) -> f64 {
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    // rounding can push the mean one ulp outside the kept range
    mean.clamp(kept[0], kept[kept.len() - 1])
}

fn check_trim(n: usize, f: usize) -> Result<()> {
    if n > 2 * f {
        Ok(())
    } else {
        Err(Error::Aggregation(format!("trimmed mean needs n > 2f, got n = {n}, f = {f}")))
    }
}

/// Drops the `f` largest and `f` smallest values and averages the rest.
/// Ties are ordered uniformly at random.
pub fn trimmed_mean<R: Rng + ?Sized>(values: &[f64], f: usize, rng: &mut R) -> Result<f64> {
    check_trim(values.len(), f)?;
    let mut sorted = values.to_vec();
    sorted.shuffle(rng);
    sorted.sort_by(f64::total_cmp);
    Ok(mean_of_sorted_slice(&sorted[f..values.len() - f]))
}

/// Coordinate-wise trimmed mean. One random sender permutation is drawn per
/// call and shared by all coordinates; each coordinate's tie order is then
/// uniformly random.
pub fn trimmed_mean_vec<R: Rng + ?Sized>(values: &[ParamVector], f: usize, rng: &mut R) -> Result<ParamVector> {
    let dim = common_dim(values)?;
    check_trim(values.len(), f)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.shuffle(rng);
    let mut column = vec![0.0; values.len()];
    let out = (0..dim)
        .map(|c| {
            for (slot, &j) in column.iter_mut().zip(&order) {
                *slot = values[j][c];
            }
            column.sort_by(f64::total_cmp);
            mean_of_sorted_slice(&column[f..values.len() - f])
        })
        .collect();
    Ok(ParamVector(out))
}

fn common_dim(values: &[ParamVector]) -> Result<usize> {
    let Some(first) = values.first() else {
        return Err(Error::Aggregation("empty input".into()));
    };
    for v in values {
        check_dim(first.dim(), v.dim())?;
    }
    Ok(first.dim())
}

/// Weighted mean; uniform when `weights` is `None`.
pub fn fedavg(values: &[ParamVector], weights: Option<&[f64]>) -> Result<ParamVector> {
    let dim = common_dim(values)?;
    let mut out = vec![0.0; dim];
    match weights {
        Some(w) => {
            check_dim(values.len(), w.len())?;
            if w.iter().any(|&x| x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Aggregation("fedavg weights must be non-negative and sum to 1".into()));
            }
            for (v, &wj) in values.iter().zip(w) {
                for (o, x) in out.iter_mut().zip(v.iter()) {
                    *o += wj * x;
                }
            }
        }
        None => {
            let n = values.len() as f64;
            for v in values {
                for (o, x) in out.iter_mut().zip(v.iter()) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= n);
        }
    }
    Ok(ParamVector(out))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum scores: sum of squared distances to the `subset_size` nearest other values.
pub fn krum_scores(values: &[ParamVector], subset_size: usize) -> Vec<f64> {
    let n = values.len();
    let mut dists = vec![0.0; n.saturating_sub(1)];
    (0..n)
        .map(|j| {
            let mut k = 0;
            for (l, v) in values.iter().enumerate() {
                if l != j {
                    dists[k] = squared_distance(&values[j], v);
                    k += 1;
                }
            }
            dists.sort_by(f64::total_cmp);
            dists[..subset_size].iter().sum()
        })
        .collect()
}

/// Default Krum neighbourhood: `n - f`, capped at `n - 1`.
pub fn krum_default_subset(n: usize, f: usize) -> usize {
    n.saturating_sub(f).min(n.saturating_sub(1))
}

/// Index selected by Krum (lowest index among equal scores).
pub fn krum_index(values: &[ParamVector], f: usize, subset_size: Option<usize>) -> Result<usize> {
    common_dim(values)?;
    let n = values.len();
    if n < 2 {
        return Err(Error::Aggregation(format!("krum needs at least 2 values, got {n}")));
    }
    let subset = subset_size.unwrap_or_else(|| krum_default_subset(n, f));
    if subset == 0 || subset > n - 1 {
        return Err(Error::Aggregation(format!("krum subset size {subset} must lie in [1, {}]", n - 1)));
    }
    let scores = krum_scores(values, subset);
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = j;
        }
    }
    Ok(best)
}

pub fn krum(values: &[ParamVector], f: usize, subset_size: Option<usize>) -> Result<ParamVector> {
    krum_index(values, f, subset_size).map(|j| values[j].clone())
}

fn median_in_place(column: &mut [f64]) -> f64 {
    column.sort_by(f64::total_cmp);
    let n = column.len();
    if n % 2 == 1 {
        column[n / 2]
    } else {
        (column[n / 2 - 1] + column[n / 2]) / 2.0
    }
}

/// Coordinate-wise median; even counts average the two middle order statistics.
pub fn coordinate_median(values: &[ParamVector]) -> Result<ParamVector> {
    let dim = common_dim(values)?;
    let mut column = vec![0.0; values.len()];
    let out = (0..dim)
        .map(|c| {
            for (slot, v) in column.iter_mut().zip(values) {
                *slot = v[c];
            }
            median_in_place(&mut column)
        })
        .collect();
    Ok(ParamVector(out))
}

/// Cosine-trust weighted average of received values rescaled to `||own||`.
/// Falls back to `own` when it is zero or no value earns positive trust.
pub fn fltrust(own: &ParamVector, received: &[ParamVector]) -> Result<ParamVector> {
    for v in received {
        check_dim(own.dim(), v.dim())?;
    }
    let own_norm = own.norm();
    if own_norm == 0.0 {
        log::debug!("fltrust: zero reference parameter, keeping own value");
        return Ok(own.clone());
    }
    let mut out = vec![0.0; own.dim()];
    let mut total_trust = 0.0;
    for v in received {
        let norm = v.norm();
        if norm == 0.0 {
            continue;
        }
        let trust = (dot(own, v) / (own_norm * norm)).max(0.0);
        if trust == 0.0 {
            continue;
        }
        let scale = trust * own_norm / norm;
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += scale * x;
        }
        total_trust += trust;
    }
    if total_trust == 0.0 {
        log::debug!("fltrust: no received value has positive trust, keeping own value");
        return Ok(own.clone());
    }
    out.iter_mut().for_each(|o| *o /= total_trust);
    Ok(ParamVector(out))
}

/// `own + mean_j clip(v_j - own)` with `clip(x) = x * min(1, tau / ||x||)`.
pub fn scclip(own: &ParamVector, received: &[ParamVector], tau: f64) -> Result<ParamVector> {
    if !(tau > 0.0) {
        return Err(Error::Aggregation(format!("scclip threshold must be positive, got {tau}")));
    }
    for v in received {
        check_dim(own.dim(), v.dim())?;
    }
    if received.is_empty() {
        return Ok(own.clone());
    }
    let mut shift = vec![0.0; own.dim()];
    let mut diff = vec![0.0; own.dim()];
    for v in received {
        for ((d, x), o) in diff.iter_mut().zip(v.iter()).zip(own.iter()) {
            *d = x - o;
        }
        let norm = l2_norm(&diff);
        let scale = if norm > tau { tau / norm } else { 1.0 };
        for (s, d) in shift.iter_mut().zip(&diff) {
            *s += scale * d;
        }
    }
    let n = received.len() as f64;
    Ok(ParamVector(own.iter().zip(&shift).map(|(o, s)| o + s / n).collect()))
}

/// Aggregation rule selected for an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationRule {
    TrimmedMean,
    #[serde(rename = "fedavg")]
    FedAvg {
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    Krum {
        /// Defaults to `n - f`.
        #[serde(default)]
        subset_size: Option<usize>,
    },
    CoordinateMedian,
    #[serde(rename = "fltrust")]
    FlTrust,
    #[serde(rename = "scclip")]
    ScClip {
        /// Defaults to `R / 10`.
        #[serde(default)]
        tau: Option<f64>,
    },
}

impl AggregationRule {
    pub fn fedavg() -> Self {
        Self::FedAvg { weights: None }
    }

    pub fn krum() -> Self {
        Self::Krum { subset_size: None }
    }

    pub fn scclip() -> Self {
        Self::ScClip { tau: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TrimmedMean => "trimmed_mean",
            Self::FedAvg { .. } => "fedavg",
            Self::Krum { .. } => "krum",
            Self::CoordinateMedian => "coordinate_median",
            Self::FlTrust => "fltrust",
            Self::ScClip { .. } => "scclip",
        }
    }

    /// Applies the rule for one receiver.
    ///
    /// `multiset` is everything the receiver aggregates over (its own value
    /// included when the protocol says so); `own` is the receiver's current
    /// parameter, used as reference by FLTrust and SCCLIP. `f` is the
    /// receiver's local Byzantine bound and `radius` the projection radius
    /// (used for the default SCCLIP threshold).
    pub fn aggregate<R: Rng + ?Sized>(
        &self,
        own: &ParamVector,
        multiset: &[ParamVector],
        f: usize,
        radius: Option<f64>,
        rng: &mut R,
    ) -> Result<ParamVector> {
        match self {
            Self::TrimmedMean => trimmed_mean_vec(multiset, f, rng),
            Self::FedAvg { weights } => fedavg(multiset, weights.as_deref()),
            Self::Krum { subset_size } => krum(multiset, f, *subset_size),
            Self::CoordinateMedian => coordinate_median(multiset),
            Self::FlTrust => fltrust(own, multiset),
            Self::ScClip { tau } => {
                let tau = match (tau, radius) {
                    (Some(t), _) => *t,
                    (None, Some(r)) => r / 10.0,
                    (None, None) => {
                        return Err(Error::Aggregation(
                            "scclip needs tau when no projection radius is configured".into(),
                        ))
                    }
                };
                scclip(own, multiset, tau)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn scalars(xs: &[f64]) -> Vec<ParamVector> {
        xs.iter().map(|&x| ParamVector::scalar(x)).collect()
    }

    #[test]
    fn trimmed_mean_examples() {
        assert_eq!(trimmed_mean(&[1.0, 2.0, 3.0, 4.0, 5.0], 1, &mut rng()).unwrap(), 3.0);
        assert_eq!(trimmed_mean(&[2.5; 7], 3, &mut rng()).unwrap(), 2.5);
        let out = trimmed_mean(&[1.0, 2.0, 3.0, 1e9], 1, &mut rng()).unwrap();
        assert_eq!(out, 2.5);
        assert!((1.0..=3.0).contains(&out));
        assert!(matches!(trimmed_mean(&[1.0, 2.0], 1, &mut rng()), Err(Error::Aggregation(_))));
    }

    #[test]
    fn brute_force_hull_over_placements() {
        // honest {1, 2, 3}, one adversarial value anywhere on a coarse grid
        for k in -40..=40 {
            let bad = 10f64.powi(k / 4) * if k % 2 == 0 { 1.0 } else { -1.0 };
            let out = trimmed_mean(&[1.0, 2.0, 3.0, bad], 1, &mut rng()).unwrap();
            assert!((1.0..=3.0).contains(&out), "adversary {bad} -> {out}");
        }
    }

    #[test]
    fn trimmed_vec_matches_scalar_rule() {
        let mut r = rng();
        assert_eq!(
            trimmed_mean_vec(&scalars(&[5.0, 1.0, 3.0]), 1, &mut r).unwrap().0,
            vec![trimmed_mean(&[5.0, 1.0, 3.0], 1, &mut r).unwrap()]
        );
        let same = vec![ParamVector(vec![1.0, -2.0, 3.0]); 5];
        assert_eq!(trimmed_mean_vec(&same, 2, &mut r).unwrap(), same[0]);
        for _ in 0..100 {
            let n = r.random_range(3..12);
            let f = r.random_range(0..=(n - 1) / 2);
            let dim = r.random_range(1..5);
            let values: Vec<ParamVector> = (0..n)
                .map(|_| ParamVector((0..dim).map(|_| r.random_range(-5.0..5.0)).collect()))
                .collect();
            let out = trimmed_mean_vec(&values, f, &mut r).unwrap();
            for c in 0..dim {
                let column: Vec<f64> = values.iter().map(|v| v[c]).collect();
                assert_eq!(out[c], trimmed_mean(&column, f, &mut r).unwrap());
            }
        }
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg(&scalars(&[0.0, 2.0]), None).unwrap().0, vec![1.0]);
        assert_eq!(fedavg(&scalars(&[4.5]), None).unwrap().0, vec![4.5]);
        assert_eq!(fedavg(&scalars(&[4.0, 0.0]), Some(&[0.25, 0.75])).unwrap().0, vec![1.0]);
        assert!(matches!(fedavg(&scalars(&[4.0, 0.0]), Some(&[1.0])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn krum_examples() {
        let same = vec![ParamVector(vec![1.0, 2.0]); 4];
        assert_eq!(krum(&same, 1, None).unwrap(), same[0]);
        let values = scalars(&[0.0, 0.1, 0.2, 100.0]);
        let picked = krum(&values, 1, Some(2)).unwrap()[0];
        assert!([0.0, 0.1, 0.2].contains(&picked));
        let values = scalars(&[0.0, 1.0, 5.0]);
        assert_eq!(krum_scores(&values, 1), vec![1.0, 1.0, 16.0]);
        assert_eq!(krum_index(&values, 0, Some(1)).unwrap(), 0);
        assert!(krum(&scalars(&[1.0]), 0, None).is_err());
        assert!(krum(&values, 0, Some(3)).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(coordinate_median(&scalars(&[3.0, 1.0, 2.0])).unwrap().0, vec![2.0]);
        assert_eq!(coordinate_median(&scalars(&[1.0, 2.0, 3.0, 100.0])).unwrap().0, vec![2.5]);
        let values = vec![
            ParamVector(vec![1.0, 9.0]),
            ParamVector(vec![5.0, -1.0]),
            ParamVector(vec![3.0, 4.0]),
        ];
        let out = coordinate_median(&values).unwrap();
        for c in 0..2 {
            let mut column: Vec<f64> = values.iter().map(|v| v[c]).collect();
            column.sort_by(f64::total_cmp);
            assert_eq!(out[c], column[1]);
        }
        assert!(coordinate_median(&[]).is_err());
    }

    #[test]
    fn fltrust_examples() {
        let own = ParamVector(vec![1.0, 2.0]);
        assert_eq!(fltrust(&own, &[own.clone()]).unwrap(), own);
        let anti = vec![ParamVector(vec![-1.0, -2.0]), ParamVector(vec![-3.0, -0.5])];
        assert_eq!(fltrust(&own, &anti).unwrap(), own);
        // trusts {1, 0}; 4 rescaled to |own| = 2
        let out = fltrust(&ParamVector::scalar(2.0), &scalars(&[4.0, -3.0])).unwrap();
        assert_eq!(out.0, vec![2.0]);
        assert_eq!(fltrust(&ParamVector::scalar(0.0), &scalars(&[4.0])).unwrap().0, vec![0.0]);
    }

    #[test]
    fn scclip_examples() {
        let own = ParamVector(vec![0.5, -0.5]);
        assert_eq!(scclip(&own, &[own.clone(), own.clone()], 0.1).unwrap(), own);
        let near = ParamVector(vec![0.6, -0.4]);
        let out = scclip(&own, &[near.clone()], 1.0).unwrap();
        assert!(out.iter().zip(near.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(scclip(&ParamVector::scalar(0.0), &scalars(&[10.0]), 1.0).unwrap().0, vec![1.0]);
        assert!(scclip(&own, &[], 0.0).is_err());
    }

    #[test]
    fn rule_dispatch_uses_radius_for_scclip_default() {
        let own = ParamVector::scalar(0.0);
        let out = AggregationRule::scclip()
            .aggregate(&own, &scalars(&[10.0]), 0, Some(10.0), &mut rng())
            .unwrap();
        assert_eq!(out.0, vec![1.0]);
        assert!(AggregationRule::scclip().aggregate(&own, &scalars(&[1.0]), 0, None, &mut rng()).is_err());
    }

    fn multiset() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..9, 1usize..4).prop_flat_map(|(n, d)| {
            prop::collection::vec(prop::collection::vec(-100.0f64..100.0, d), n)
        })
    }

    fn to_params(raw: &[Vec<f64>]) -> Vec<ParamVector> {
        raw.iter().cloned().map(ParamVector).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
    }

    proptest! {
        #[test]
        fn rules_are_permutation_invariant(raw in multiset(), seed in any::<u64>()) {
            let values = to_params(&raw);
            let mut reversed = values.clone();
            reversed.reverse();
            let f = (values.len() - 1) / 2;
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let own = values[0].clone();
            prop_assert!(close(&trimmed_mean_vec(&values, f, &mut r).unwrap(), &trimmed_mean_vec(&reversed, f, &mut r).unwrap(), 1e-12));
            prop_assert!(close(&fedavg(&values, None).unwrap(), &fedavg(&reversed, None).unwrap(), 1e-12));
            prop_assert!(close(&coordinate_median(&values).unwrap(), &coordinate_median(&reversed).unwrap(), 0.0));
            prop_assert!(close(&fltrust(&own, &values).unwrap(), &fltrust(&own, &reversed).unwrap(), 1e-12));
            prop_assert!(close(&scclip(&own, &values, 3.0).unwrap(), &scclip(&own, &reversed, 3.0).unwrap(), 1e-12));
            let scores = krum_scores(&values, krum_default_subset(values.len(), f));
            let best = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            if scores.iter().filter(|&&s| s == best).count() == 1 {
                prop_assert_eq!(krum(&values, f, None).unwrap(), krum(&reversed, f, None).unwrap());
            }
        }

        #[test]
        fn translation_equivariance(raw in multiset(), c in -50.0f64..50.0, seed in any::<u64>()) {
            let values = to_params(&raw);
            let shifted: Vec<ParamVector> = values.iter().map(|v| ParamVector(v.iter().map(|x| x + c).collect())).collect();
            let f = (values.len() - 1) / 2;
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let plus_c = |v: ParamVector| v.iter().map(|x| x + c).collect::<Vec<f64>>();
            prop_assert!(close(&trimmed_mean_vec(&shifted, f, &mut r).unwrap(), &plus_c(trimmed_mean_vec(&values, f, &mut r).unwrap()), 1e-9));
            prop_assert!(close(&fedavg(&shifted, None).unwrap(), &plus_c(fedavg(&values, None).unwrap()), 1e-9));
            prop_assert!(close(&coordinate_median(&shifted).unwrap(), &plus_c(coordinate_median(&values).unwrap()), 1e-9));
        }

        #[test]
        fn untrimmed_mean_is_fedavg(raw in multiset(), seed in any::<u64>()) {
            let values = to_params(&raw);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            prop_assert!(close(&trimmed_mean_vec(&values, 0, &mut r).unwrap(), &fedavg(&values, None).unwrap(), 1e-12));
        }
    }
}
