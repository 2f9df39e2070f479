//! Randomized and analytic verification suites.
//!
//! Each suite has a fixed trial count and seed and lists its violations.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adversary::{AttackKind, AttackModel, Consistency};
use crate::aggregation::{trimmed_mean, AggregationRule};
use crate::error::{config, Result};
use crate::features::{default_radius, FeatureMap};
use crate::impossibility::{impossibility_theorem1, impossibility_theorem2, TwinRunOptions};
use crate::mdp::{exact_value_function, make_random_mdp, JointPolicy, RandomMdpSpec};
use crate::metrics::{lstd_fixed_point, FixedPointSpec};
use crate::protocol::{run_bdtd, AgentRoster, ProtocolConfig, StepSchedule};
use crate::stochastic::{delta_metric, deviation_norm, random_row_stochastic, verify_product_bound};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub trials: usize,
    pub violations: usize,
    /// One line per violation.
    pub examples: Vec<String>,
    pub notes: Vec<String>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        Self { suite: suite.into(), trials: 0, violations: 0, examples: Vec::new(), notes: Vec::new() }
    }

    fn violation(&mut self, what: String) {
        self.violations += 1;
        self.examples.push(what);
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.trials += 1;
        if !ok {
            self.violation(what());
        }
    }

    pub fn pass(&self) -> bool {
        self.violations == 0 && self.trials > 0
    }
}

/// Suite names accepted by [`run_suite`].
pub const SUITES: [&str; 6] = ["hull", "contraction", "product_bound", "impossibility", "oracle", "consensus"];

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "hull" => Ok(hull_suite(100_000, seed)),
        "contraction" => Ok(contraction_suite(100_000, seed)),
        "product_bound" => Ok(product_bound_suite(10_000, seed)),
        "impossibility" => impossibility_suite(seed),
        "oracle" => oracle_suite(&OracleSuiteOptions { seed, ..Default::default() }),
        "consensus" => consensus_suite(&ConsensusSuiteOptions { first_seed: seed, ..Default::default() }),
        other => config(format!("unknown suite `{other}`; expected one of {}", SUITES.join(", "))),
    }
}

fn honest_values(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.random_range(-6.0..6.0));
    if rng.random_bool(0.2) {
        // heavy ties
        let pool: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        (0..count).map(|_| *pool.choose(rng).expect("non-empty")).collect()
    } else {
        (0..count).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
    }
}

fn byzantine_values(rng: &mut ChaCha8Rng, count: usize, lo: f64, hi: f64) -> Vec<f64> {
    let strategy = rng.random_range(0..6);
    (0..count)
        .map(|_| match strategy {
            0 => rng.random_range(-1e9..=1e9),
            1 => 1e9,
            2 => -1e9,
            3 => {
                if rng.random_bool(0.5) {
                    1e9
                } else {
                    -1e9
                }
            }
            4 => {
                // just outside the honest range
                let width = (hi - lo).max(f64::MIN_POSITIVE);
                if rng.random_bool(0.5) {
                    hi + width * rng.random::<f64>()
                } else {
                    lo - width * rng.random::<f64>()
                }
            }
            _ => {
                if lo < hi {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            }
        })
        .collect()
}

/// Trimmed-mean output stays inside the hull of honest values.
pub fn hull_suite(trials: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("hull");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [7usize, 10, 13];
    for t in 0..trials {
        let n = sizes[t % sizes.len()];
        let f = (n - 1) / 3;
        let q = rng.random_range(0..=f);
        let honest = honest_values(&mut rng, n - q);
        let lo = honest.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = honest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut values = honest.clone();
        values.extend(byzantine_values(&mut rng, q, lo, hi));
        values.shuffle(&mut rng);
        match trimmed_mean(&values, f, &mut rng) {
            Ok(out) => report.check(out >= lo && out <= hi, || {
                format!("n={n} f={f} q={q}: output {out:e} outside [{lo:e}, {hi:e}]")
            }),
            Err(e) => report.check(false, || format!("n={n} f={f}: {e}")),
        }
    }
    report.notes.push("n in {7, 10, 13}, f = floor((n-1)/3), adversarial values up to 1e9".into());
    report
}

fn deviation(w: &[f64]) -> f64 {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt()
}

/// Clamping scalar parameters to `[-R, R]` never increases their spread.
pub fn contraction_suite(trials: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("contraction");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let n = rng.random_range(2..=13);
        let scale = rng.random_range(0.01..100.0);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let radius = rng.random_range(1e-3..1.5) * scale;
        let projected: Vec<f64> = w.iter().map(|x| x.clamp(-radius, radius)).collect();
        let (before, after) = (deviation(&w), deviation(&projected));
        report.check(after <= before + 1e-12, || format!("R={radius:e}: {after:e} > {before:e} for {w:?}"));
    }
    report
}

/// Product contraction bound and deviation bound on random row-stochastic matrices.
pub fn product_bound_suite(trials: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("product_bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deviation_checks = 0;
    let mut deviation_violations = 0;
    for _ in 0..trials {
        let n = rng.random_range(2..=6);
        let m = rng.random_range(1..=8);
        let sparsity = rng.random_range(0.0..0.8);
        let xs: Vec<_> = (0..m).map(|_| random_row_stochastic(n, sparsity, &mut rng)).collect();
        match verify_product_bound(&xs, 1e-10) {
            Ok(r) => report.check(r.pass, || {
                format!("n={n} m={m}: delta {:e} > prod lambda {:e}", r.delta_product, r.lambda_product)
            }),
            Err(e) => report.check(false, || e.to_string()),
        }
        for x in &xs {
            deviation_checks += 1;
            let d = delta_metric(x).expect("generated matrices are stochastic");
            let lhs = deviation_norm(x);
            if lhs > n as f64 * d + 1e-12 {
                deviation_violations += 1;
                report.violation(format!("n={n}: ||X - 1 xbar|| = {lhs:e} > n delta = {:e}", n as f64 * d));
            }
        }
    }
    report.notes.push(format!(
        "deviation bound ||X - 1 xbar|| <= n delta(X): {deviation_checks} matrices, {deviation_violations} violations"
    ));
    report
}

/// Twin executions at `n` in {4, 7, 10} with unit features, and the weight-support
/// construction at three `(n, f, q)` triples.
pub fn impossibility_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("impossibility");
    for n in [4usize, 7, 10] {
        let mdp = make_random_mdp(5, n, 2, seed.wrapping_add(n as u64))?;
        let policy = JointPolicy::uniform(&mdp);
        let phi = FeatureMap::constant(5, 1.0)?;
        let options = TwinRunOptions { horizon: 1000, seed, radius: None };
        let r = impossibility_theorem1(n, &phi, &mdp, &policy, &options)?;
        let nf = n as f64;
        let w1_expected = (nf * (nf + 1.0) - 2.0) / (2.0 * (nf - 1.0));
        let w2_expected = nf / 2.0;
        let exact = (r.w1[0] - w1_expected).abs() <= 1e-10 && (r.w2[0] - w2_expected).abs() <= 1e-10;
        report.check(exact, || format!("n={n}: w1={} (want {w1_expected}), w2={} (want {w2_expected})", r.w1[0], r.w2[0]));
        report.check(r.gap_error <= 1e-10, || format!("n={n}: gap error {:e}", r.gap_error));
        report.check(r.traces_identical, || format!("n={n}: middle-agent traces differ"));
        report.notes.push(format!("twin executions, n={n}: w1={} w2={} gap={}", r.w1[0], r.w2[0], r.gap[0]));
    }
    for (n, f, q) in [(7usize, 2usize, 2usize), (10, 3, 3), (4, 1, 1)] {
        let r = impossibility_theorem2(n, f, q)?;
        report.check(r.pass(), || {
            format!("(n,f,q)=({n},{f},{q}): forced zero {:?}, max support {}", r.forced_zero, r.max_support)
        });
        report.notes.push(format!(
            "weight support, (n,f,q)=({n},{f},{q}): forced zero {:?}, max support {} = |N| - f = {}",
            r.forced_zero,
            r.max_support,
            r.normal.len() - f
        ));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSuiteOptions {
    pub seed: u64,
    pub seeds: usize,
    pub steps: usize,
    pub eta0: f64,
    pub discount: f64,
    /// Random features of this dimension; `0` selects one-hot features.
    pub feature_dim: usize,
    pub tolerance: f64,
}

impl Default for OracleSuiteOptions {
    fn default() -> Self {
        Self { seed: 0, seeds: 5, steps: 100_000, eta0: 5.0, discount: 0.5, feature_dim: 0, tolerance: 1e-2 }
    }
}

/// Single-agent TD(0) against the LSTD solution, and LSTD with tabular
/// features against the exact value function.
pub fn oracle_suite(options: &OracleSuiteOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("oracle");
    let mut errors = Vec::with_capacity(options.seeds);
    for k in 0..options.seeds as u64 {
        let seed = options.seed.wrapping_add(k);
        let mdp = RandomMdpSpec { discount: options.discount, ..RandomMdpSpec::new(3, 1, 2, seed) }.build()?;
        let policy = JointPolicy::uniform(&mdp);
        let features = match options.feature_dim {
            0 => FeatureMap::tabular(3)?,
            d => FeatureMap::random_table(3, d, seed)?,
        };
        let target = lstd_fixed_point(&mdp, &policy, &features, &FixedPointSpec::single(0))?;
        let cfg = ProtocolConfig {
            record_params: false,
            ..ProtocolConfig::new(
                AggregationRule::fedavg(),
                AttackModel::none(),
                StepSchedule::Harmonic { eta0: options.eta0 },
                Some(100.0 * mdp.r_max() / (1.0 - mdp.discount())),
                options.steps,
            )
        };
        let trace = run_bdtd(&mdp, &policy, &features, &AgentRoster::zeros(1, 0, vec![], features.dim())?, &cfg, seed)?;
        let w = &trace.final_params[0];
        let err = w.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        errors.push(err);
        report.notes.push(format!("seed {seed}: |w_T - w_lstd|_inf = {err:.3e}"));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    report.check(mean <= options.tolerance, || format!("mean TD error {mean:e} above {}", options.tolerance));
    report.notes.push(format!("mean over {} seeds: {mean:.3e}", options.seeds));

    for k in 0..options.seeds as u64 {
        let seed = options.seed.wrapping_add(k);
        let mdp = make_random_mdp(6, 2, 2, seed)?;
        let policy = JointPolicy::uniform(&mdp);
        let spec = FixedPointSpec::uniform(vec![0, 1])?;
        let w = lstd_fixed_point(&mdp, &policy, &FeatureMap::tabular(6)?, &spec)?;
        let v = exact_value_function(&mdp, &policy, &[0.5, 0.5])?;
        let err = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        report.check(err <= 1e-6, || format!("seed {seed}: tabular LSTD differs from V by {err:e}"));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusSuiteOptions {
    pub first_seed: u64,
    pub seeds: usize,
    pub horizon: usize,
    pub checkpoint: usize,
    pub threshold: f64,
}

impl Default for ConsensusSuiteOptions {
    fn default() -> Self {
        Self { first_seed: 0, seeds: 10, horizon: 10_000, checkpoint: 100, threshold: 1e-4 }
    }
}

/// BDTD with scalar features, harmonic steps and the trimmed mean against a
/// per-neighbour Gaussian attack on a 5-state random MDP with 10 agents, 2 Byzantine.
pub fn consensus_suite(options: &ConsensusSuiteOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("consensus");
    let (n, f) = (10usize, 2usize);
    for k in 0..options.seeds as u64 {
        let seed = options.first_seed.wrapping_add(k);
        let mdp = make_random_mdp(5, n, 2, seed)?;
        let policy = JointPolicy::uniform(&mdp);
        let features = FeatureMap::random_scalar(5, 0.5, seed)?;
        let radius = default_radius(mdp.r_max(), features.phi_min().expect("scalar"), mdp.discount())?;
        let cfg = ProtocolConfig {
            record_params: false,
            ..ProtocolConfig::new(
                AggregationRule::TrimmedMean,
                AttackModel::new(AttackKind::Gaussian, Consistency::PerNeighbor),
                StepSchedule::Harmonic { eta0: 1.0 },
                Some(radius),
                options.horizon,
            )
        };
        let roster = AgentRoster::zeros(n, f, vec![3, 7], 1)?;
        let trace = run_bdtd(&mdp, &policy, &features, &roster, &cfg, seed)?;
        let early = trace.ce(options.checkpoint).unwrap_or(f64::NAN);
        let late = trace.ce(options.horizon).unwrap_or(f64::NAN);
        report.check(late < options.threshold && late < early, || {
            format!("seed {seed}: CE({})={late:e}, CE({})={early:e}", options.horizon, options.checkpoint)
        });
        report.notes.push(format!("seed {seed}: CE({})={early:.3e} CE({})={late:.3e}", options.checkpoint, options.horizon));
    }
    Ok(report)
}
