//! Byzantine message crafting.
//!
//! Attacks only change what Byzantine agents send. They never touch states,
//! actions or rewards, and they draw from their own rng stream so the
//! environment trajectory is independent of the attack.

use rand::Rng;
use rand::distr::Open01;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregation::{krum_default_subset, krum_index};
use crate::error::{Error, Result};
use crate::features::ParamVector;

/// Whether a Byzantine agent sends the same value to every neighbour in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consistency {
    Broadcast,
    #[default]
    PerNeighbor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackKind {
    /// Byzantine but idle: sends its true parameter.
    None,
    /// I.i.d. standard normal entries.
    Gaussian,
    /// Colluding copies of `mean - lambda * sign(mean)` tuned against Krum.
    KrumAttack {
        #[serde(default = "default_search_steps")]
        search_steps: usize,
        /// Upper end of the scale search; defaults to `10 R`.
        #[serde(default)]
        lambda_max: Option<f64>,
        /// Krum neighbourhood assumed by the attacker; defaults to `n - f`.
        #[serde(default)]
        subset_size: Option<usize>,
    },
    /// Values just beyond the benign extreme opposite to the benign mean.
    TrimAttack {
        #[serde(default = "default_band_width")]
        band_width: f64,
    },
    FixedValue { value: Vec<f64> },
}

fn default_search_steps() -> usize {
    30
}

fn default_band_width() -> f64 {
    4.0
}

impl AttackKind {
    pub fn krum_attack() -> Self {
        Self::KrumAttack { search_steps: default_search_steps(), lambda_max: None, subset_size: None }
    }

    pub fn trim_attack() -> Self {
        Self::TrimAttack { band_width: default_band_width() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Gaussian => "gaussian",
            Self::KrumAttack { .. } => "krum_attack",
            Self::TrimAttack { .. } => "trim_attack",
            Self::FixedValue { .. } => "fixed_value",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackModel {
    #[serde(flatten)]
    pub kind: AttackKind,
    #[serde(default)]
    pub consistency: Consistency,
}

impl AttackModel {
    pub fn new(kind: AttackKind, consistency: Consistency) -> Self {
        Self { kind, consistency }
    }

    pub fn none() -> Self {
        Self::new(AttackKind::None, Consistency::Broadcast)
    }
}

// `flatten` would silently accept unknown keys, so the consistency flag is
// split off by hand and the rest parsed strictly.
impl<'de> Deserialize<'de> for AttackModel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut map = serde_json::Map::<String, serde_json::Value>::deserialize(deserializer)?;
        let consistency = match map.remove("consistency") {
            Some(v) => Consistency::deserialize(v).map_err(D::Error::custom)?,
            None => Consistency::default(),
        };
        let kind = AttackKind::deserialize(serde_json::Value::Object(map.clone())).map_err(D::Error::custom)?;
        // unit variants of an internally tagged enum ignore extra keys
        let known = serde_json::to_value(&kind).map_err(D::Error::custom)?;
        if let Some(extra) = map.keys().find(|k| known.get(k.as_str()).is_none()) {
            return Err(D::Error::custom(format!("unknown attack field `{extra}`")));
        }
        Ok(Self { kind, consistency })
    }
}

/// Standard normal vector.
pub fn gaussian_attack<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> ParamVector {
    ParamVector((0..dim).map(|_| StandardNormal.sample(rng)).collect())
}

/// Per-coordinate benign statistics used by the Trim attack.
#[derive(Debug, Clone, PartialEq)]
pub struct BenignStats {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Population standard deviation, replaced by 1 where it is zero.
    pub std: Vec<f64>,
}

impl BenignStats {
    pub fn new(benign: &[ParamVector]) -> Result<Self> {
        let Some(first) = benign.first() else {
            return Err(Error::Config("attack needs at least one benign vector".into()));
        };
        let dim = first.dim();
        let n = benign.len() as f64;
        let mut stats = Self {
            mean: vec![0.0; dim],
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
            std: vec![0.0; dim],
        };
        for v in benign {
            crate::error::check_dim(dim, v.dim())?;
            for c in 0..dim {
                stats.mean[c] += v[c] / n;
                stats.min[c] = stats.min[c].min(v[c]);
                stats.max[c] = stats.max[c].max(v[c]);
            }
        }
        for c in 0..dim {
            let var = benign.iter().map(|v| (v[c] - stats.mean[c]).powi(2)).sum::<f64>() / n;
            stats.std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(stats)
    }

    /// One crafted Trim-attack vector.
    pub fn trim_vector<R: Rng + ?Sized>(&self, band_width: f64, rng: &mut R) -> ParamVector {
        ParamVector(
            (0..self.mean.len())
                .map(|c| {
                    let depth: f64 = Open01.sample(rng);
                    let offset = depth * band_width * self.std[c];
                    if self.mean[c] >= 0.0 {
                        self.min[c] - offset
                    } else {
                        self.max[c] + offset
                    }
                })
                .collect(),
        )
    }
}

/// `count` Trim-attack vectors: per coordinate inside `(min - w sigma, min)`
/// when the benign mean is non-negative, else inside `(max, max + w sigma)`.
pub fn trim_attack<R: Rng + ?Sized>(
    benign: &[ParamVector],
    count: usize,
    band_width: f64,
    rng: &mut R,
) -> Result<Vec<ParamVector>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let stats = BenignStats::new(benign)?;
    Ok((0..count).map(|_| stats.trim_vector(band_width, rng)).collect())
}

/// Krum-attack search settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrumAttackParams {
    /// Byzantine bound assumed by the defended Krum rule.
    pub f: usize,
    pub subset_size: Option<usize>,
    pub lambda_max: f64,
    pub search_steps: usize,
}

/// Result of the Krum-attack scale search.
#[derive(Debug, Clone, PartialEq)]
pub struct KrumCraft {
    pub vectors: Vec<ParamVector>,
    pub lambda: f64,
    /// Whether Krum selects a crafted vector at the returned scale.
    pub selected: bool,
}

fn krum_picks_crafted(benign: &[ParamVector], crafted: &ParamVector, count: usize, params: &KrumAttackParams) -> bool {
    let mut all = benign.to_vec();
    all.extend(std::iter::repeat_n(crafted.clone(), count));
    let subset = params
        .subset_size
        .unwrap_or_else(|| krum_default_subset(all.len(), params.f));
    match krum_index(&all, params.f, Some(subset.min(all.len() - 1))) {
        Ok(j) => j >= benign.len(),
        Err(_) => false,
    }
}

/// `count` identical vectors `mean - lambda * sign(mean)` with `lambda` the
/// largest scale (by bisection) at which Krum still selects a crafted vector;
/// `lambda_max / 2` when no scale in `(0, lambda_max]` succeeds.
pub fn krum_attack(benign: &[ParamVector], count: usize, params: &KrumAttackParams) -> Result<KrumCraft> {
    if count == 0 {
        return Ok(KrumCraft { vectors: Vec::new(), lambda: 0.0, selected: false });
    }
    if benign.len() + count < 2 {
        return Err(Error::Config("krum attack needs at least two values in total".into()));
    }
    let stats = BenignStats::new(benign)?;
    let direction: Vec<f64> = stats.mean.iter().map(|&m| if m >= 0.0 { 1.0 } else { -1.0 }).collect();
    let craft = |lambda: f64| {
        ParamVector(stats.mean.iter().zip(&direction).map(|(m, s)| m - lambda * s).collect())
    };
    let finish = |lambda: f64, selected: bool| {
        let v = craft(lambda);
        KrumCraft { vectors: vec![v; count], lambda, selected }
    };
    if krum_picks_crafted(benign, &craft(params.lambda_max), count, params) {
        return Ok(finish(params.lambda_max, true));
    }
    let (mut lo, mut hi) = (0.0, params.lambda_max);
    let mut found = false;
    for _ in 0..params.search_steps {
        let mid = 0.5 * (lo + hi);
        if krum_picks_crafted(benign, &craft(mid), count, params) {
            lo = mid;
            found = true;
        } else {
            hi = mid;
        }
    }
    if found {
        Ok(finish(lo, true))
    } else {
        let lambda = params.lambda_max / 2.0;
        let selected = krum_picks_crafted(benign, &craft(lambda), count, params);
        Ok(finish(lambda, selected))
    }
}

/// What the attacker knows when crafting the messages of one round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub round: usize,
    /// Current parameters of the normal agents.
    pub benign: &'a [ParamVector],
    /// Byzantine agent ids, ascending.
    pub byzantine: &'a [usize],
    /// Declared Byzantine bound of the defended rule.
    pub f: usize,
    pub radius: Option<f64>,
    pub dim: usize,
}

#[derive(Debug, Clone)]
enum Prepared {
    Truthful,
    Fixed(ParamVector),
    /// One value per Byzantine sender (index into `byzantine`).
    PerSender(Vec<ParamVector>),
    Gaussian,
    Trim { stats: BenignStats, band_width: f64 },
}

/// Messages of all Byzantine senders for one round.
#[derive(Debug, Clone)]
pub struct AttackPlan {
    prepared: Prepared,
    byzantine: Vec<usize>,
    dim: usize,
}

impl AttackPlan {
    /// Precomputes whatever is shared across the round's messages.
    pub fn prepare<R: Rng + ?Sized>(attack: &AttackModel, ctx: &RoundContext<'_>, rng: &mut R) -> Result<Self> {
        let broadcast = attack.consistency == Consistency::Broadcast;
        let q = ctx.byzantine.len();
        let prepared = match &attack.kind {
            AttackKind::None => Prepared::Truthful,
            AttackKind::FixedValue { value } => {
                crate::error::check_dim(ctx.dim, value.len())?;
                Prepared::Fixed(ParamVector(value.clone()))
            }
            AttackKind::Gaussian if broadcast => {
                Prepared::PerSender((0..q).map(|_| gaussian_attack(rng, ctx.dim)).collect())
            }
            AttackKind::Gaussian => Prepared::Gaussian,
            AttackKind::TrimAttack { band_width } => {
                let stats = BenignStats::new(ctx.benign)?;
                if broadcast {
                    Prepared::PerSender((0..q).map(|_| stats.trim_vector(*band_width, rng)).collect())
                } else {
                    Prepared::Trim { stats, band_width: *band_width }
                }
            }
            AttackKind::KrumAttack { search_steps, lambda_max, subset_size } => {
                let lambda_max = match (lambda_max, ctx.radius) {
                    (Some(l), _) => *l,
                    (None, Some(r)) => 10.0 * r,
                    (None, None) => {
                        return Err(Error::Config("krum attack needs lambda_max without a projection radius".into()))
                    }
                };
                let params = KrumAttackParams {
                    f: ctx.f,
                    subset_size: *subset_size,
                    lambda_max,
                    search_steps: *search_steps,
                };
                Prepared::PerSender(krum_attack(ctx.benign, q, &params)?.vectors)
            }
        };
        Ok(Self { prepared, byzantine: ctx.byzantine.to_vec(), dim: ctx.dim })
    }

    /// Value that Byzantine `sender` sends to `receiver` this round.
    /// `true_param` is the sender's honestly computed parameter.
    pub fn poison_outgoing<R: Rng + ?Sized>(
        &self,
        sender: usize,
        _receiver: usize,
        true_param: &ParamVector,
        rng: &mut R,
    ) -> ParamVector {
        match &self.prepared {
            Prepared::Truthful => true_param.clone(),
            Prepared::Fixed(v) => v.clone(),
            Prepared::PerSender(values) => {
                let slot = self
                    .byzantine
                    .iter()
                    .position(|&b| b == sender)
                    .expect("sender is Byzantine");
                values[slot].clone()
            }
            Prepared::Gaussian => gaussian_attack(rng, self.dim),
            Prepared::Trim { stats, band_width } => stats.trim_vector(*band_width, rng),
        }
    }
}
