//! Domain types and numeric helpers shared by every other module.
//!
//! Everything here is immutable once built, with the exception of
//! [`ExperienceBuffer`], which is append-only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Observation;
use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` for categorical inputs.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Default clamp applied to individual divergence terms when aggregating.
pub const DEFAULT_D_CAP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscreteAction(pub usize);

impl DiscreteAction {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn checked(index: usize, n_actions: usize) -> Result<Self> {
        if index < n_actions {
            Ok(DiscreteAction(index))
        } else {
            Err(Error::ActionOutOfRange { index, n_actions })
        }
    }
}

/// A candidate experiment: a non-empty action list no longer than the budget `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSequence {
    actions: Vec<DiscreteAction>,
}

impl ActionSequence {
    pub fn new(actions: Vec<DiscreteAction>, k_max: usize) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::invalid("action sequence must be non-empty"));
        }
        if actions.len() > k_max {
            return Err(Error::invalid(format!(
                "action sequence of length {} exceeds budget {k_max}",
                actions.len()
            )));
        }
        Ok(Self { actions })
    }

    pub fn from_indices(indices: &[usize], k_max: usize) -> Result<Self> {
        Self::new(indices.iter().copied().map(DiscreteAction).collect(), k_max)
    }

    pub fn actions(&self) -> &[DiscreteAction] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn first(&self) -> DiscreteAction {
        self.actions[0]
    }

    /// Compact `a-b-c` rendering used in trial logs.
    pub fn to_compact_string(&self) -> String {
        self.actions
            .iter()
            .map(|a| a.0.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

impl std::ops::Deref for ActionSequence {
    type Target = [DiscreteAction];

    fn deref(&self) -> &[DiscreteAction] {
        &self.actions
    }
}

/// A point in the shared latent space. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LatentPoint(Vec<f64>);

impl LatentPoint {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent coordinate {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for LatentPoint {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        LatentPoint::new(values)
    }
}

impl From<LatentPoint> for Vec<f64> {
    fn from(p: LatentPoint) -> Vec<f64> {
        p.0
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    mean: LatentPoint,
    variance: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mean: LatentPoint, variance: Vec<f64>) -> Result<Self> {
        if variance.len() != mean.dim() {
            return Err(Error::DimensionMismatch {
                expected: mean.dim(),
                got: variance.len(),
            });
        }
        if let Some(i) = variance.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "variance[{i}] = {} is not positive and finite",
                variance[i]
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn isotropic(mean: LatentPoint, variance: f64) -> Result<Self> {
        let d = mean.dim();
        Self::new(mean, vec![variance; d])
    }

    pub fn mean(&self) -> &LatentPoint {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    /// Log density at `x`.
    pub fn log_density(&self, x: &LatentPoint) -> Result<f64> {
        check_dims(self.dim(), x.dim())?;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(self
            .mean
            .as_slice()
            .iter()
            .zip(&self.variance)
            .zip(x.as_slice())
            .map(|((m, v), xi)| -0.5 * (ln_2pi + v.ln() + (xi - m) * (xi - m) / v))
            .sum())
    }
}

/// One environment transition in raw and encoded form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: Observation,
    pub action: DiscreteAction,
    pub reward: f64,
    pub next_state: Observation,
    pub terminal: bool,
    pub encoded_state: LatentPoint,
    pub encoded_next: LatentPoint,
}

/// Append-only transition store. Iteration order is insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperienceBuffer {
    records: Vec<TransitionRecord>,
    capacity: Option<usize>,
}

impl ExperienceBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_limit(capacity: usize) -> Self {
        Self {
            records: Vec::new(),
            capacity: Some(capacity),
        }
    }

    pub fn push(&mut self, record: TransitionRecord) -> Result<()> {
        if let Some(cap) = self.capacity {
            if self.records.len() >= cap {
                return Err(Error::BufferFull(cap));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn extend_from(&mut self, other: &ExperienceBuffer) -> Result<()> {
        for r in other.iter() {
            self.push(r.clone())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TransitionRecord> {
        self.records.iter()
    }

    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    /// The trailing `n` records (all of them when fewer exist).
    pub fn tail(&self, n: usize) -> &[TransitionRecord] {
        let start = self.records.len().saturating_sub(n);
        &self.records[start..]
    }
}

impl<'a> IntoIterator for &'a ExperienceBuffer {
    type Item = &'a TransitionRecord;
    type IntoIter = std::slice::Iter<'a, TransitionRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

impl FromIterator<TransitionRecord> for ExperienceBuffer {
    fn from_iter<I: IntoIterator<Item = TransitionRecord>>(iter: I) -> Self {
        Self {
            records: iter.into_iter().collect(),
            capacity: None,
        }
    }
}

/// Named, explicitly seeded random stream.
///
/// Equal `(seed, stream_id)` pairs always produce the same draws; distinct
/// stream ids select independent ChaCha streams under the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// Stream labels for the main consumers.
pub mod streams {
    pub const ENV: u64 = 1;
    pub const PLANNER: u64 = 2;
    pub const ACTOR: u64 = 3;
    pub const TRAINER: u64 = 4;
    pub const TASKS: u64 = 5;
    pub const RENDER: u64 = 6;
    pub const DATA: u64 = 7;
    pub const INIT: u64 = 8;
    pub const TRIALS: u64 = 9;
    pub const THEORY: u64 = 10;
    pub const EVAL: u64 = 11;
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A child stream; children with distinct labels are independent.
    pub fn derive(&self, label: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(splitmix64(self.stream_id) ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }

    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

pub fn squared_distance(a: &LatentPoint, b: &LatentPoint) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Euclidean distance between two latent points.
pub fn l2_distance(a: &LatentPoint, b: &LatentPoint) -> Result<f64> {
    squared_distance(a, b).map(f64::sqrt)
}

fn validate_categorical(p: &[f64], name: &str) -> Result<()> {
    if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{name}[{i}] = {} is negative or non-finite",
            p[i]
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidDistribution(format!(
            "{name} sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// `KL(p ‖ q)` in nats for categorical distributions.
///
/// Returns `f64::INFINITY` when `p` puts mass where `q` has none; callers clamp
/// with a `d_cap` when aggregating.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dims(p.len(), q.len())?;
    validate_categorical(p, "p")?;
    validate_categorical(q, "q")?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total.max(0.0))
}

/// Closed-form `KL(p ‖ q)` for diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gaussian(p: &LatentGaussian, q: &LatentGaussian) -> Result<f64> {
    check_dims(p.dim(), q.dim())?;
    let total: f64 = p
        .mean()
        .as_slice()
        .iter()
        .zip(p.variance())
        .zip(q.mean().as_slice().iter().zip(q.variance()))
        .map(|((mp, vp), (mq, vq))| 0.5 * ((vq / vp).ln() + (vp + (mp - mq) * (mp - mq)) / vq - 1.0))
        .sum();
    Ok(total.max(0.0))
}

/// Clamp a divergence term (possibly infinite) to `d_cap`.
pub fn clamp_divergence(d: f64, d_cap: f64) -> f64 {
    if d.is_nan() {
        d_cap
    } else {
        d.min(d_cap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn lp(v: &[f64]) -> LatentPoint {
        LatentPoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_distance(&lp(&[0.0, 0.0, 0.0]), &lp(&[0.0, 0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(l2_distance(&lp(&[1.0, 0.0]), &lp(&[0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(l2_distance(&lp(&[3.0, 4.0]), &lp(&[0.0, 0.0])).unwrap(), 5.0);
    }

    #[test]
    fn l2_dimension_mismatch_is_error() {
        assert!(matches!(
            l2_distance(&lp(&[1.0]), &lp(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn latent_rejects_non_finite() {
        assert!(LatentPoint::new(vec![0.0, f64::NAN]).is_err());
        assert!(LatentPoint::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn kl_categorical_examples() {
        assert_eq!(kl_categorical(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let d0 = kl_categorical(&[0.1, 0.9], &[0.9, 0.1]).unwrap();
        assert_abs_diff_eq!(d0, 0.8 * 9f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d0, 1.7578, epsilon = 1e-3);
        let d_bar = kl_categorical(&[0.7, 0.3], &[0.69, 0.31]).unwrap();
        assert_abs_diff_eq!(d_bar, 2.35e-4, epsilon = 1e-5);
    }

    #[test]
    fn kl_categorical_unsupported_is_infinite() {
        assert_eq!(kl_categorical(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        // zero mass in p where q is zero is fine
        assert_eq!(kl_categorical(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(clamp_divergence(f64::INFINITY, DEFAULT_D_CAP), DEFAULT_D_CAP);
    }

    #[test]
    fn kl_categorical_rejects_bad_inputs() {
        assert!(kl_categorical(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
        assert!(kl_categorical(&[0.5, 0.4], &[0.5, 0.5]).is_err());
        assert!(kl_categorical(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_gaussian_examples() {
        let g = |m: f64, v: f64| LatentGaussian::new(lp(&[m]), vec![v]).unwrap();
        assert_eq!(kl_diag_gaussian(&g(0.0, 1.0), &g(0.0, 1.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_diag_gaussian(&g(0.0, 1.0), &g(1.0, 1.0)).unwrap(), 0.5, epsilon = 1e-12);
        let expected = 0.5 * (4f64.ln() + 0.25 - 1.0);
        assert_abs_diff_eq!(kl_diag_gaussian(&g(0.0, 1.0), &g(0.0, 4.0)).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.3181, epsilon = 1e-4);
    }

    #[test]
    fn gaussian_rejects_non_positive_variance() {
        assert!(LatentGaussian::new(lp(&[0.0]), vec![0.0]).is_err());
        assert!(LatentGaussian::new(lp(&[0.0]), vec![-1.0]).is_err());
    }

    #[test]
    fn kl_categorical_nonnegative_and_zero_iff_equal() {
        let mut rng = RngStream::new(7, 0).generator();
        let mut draw = |n: usize| {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        for i in 0..1000 {
            let n = 2 + i % 5;
            let p = draw(n);
            let q = draw(n);
            let d = kl_categorical(&p, &q).unwrap();
            assert!(d > 0.0, "distinct pair gave {d}");
            assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn rng_streams_reproduce_and_separate() {
        let a: Vec<u64> = {
            let mut g = RngStream::new(42, 3).generator();
            (0..10_000).map(|_| g.gen()).collect()
        };
        let b: Vec<u64> = {
            let mut g = RngStream::new(42, 3).generator();
            (0..10_000).map(|_| g.gen()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<u64> = {
            let mut g = RngStream::new(42, 4).generator();
            (0..10_000).map(|_| g.gen()).collect()
        };
        assert_ne!(a, c);
        assert_ne!(RngStream::new(1, 0).derive(1), RngStream::new(1, 0).derive(2));
    }

    #[test]
    fn action_sequence_invariants() {
        assert!(ActionSequence::from_indices(&[], 3).is_err());
        assert!(ActionSequence::from_indices(&[0, 1, 2, 3], 3).is_err());
        let s = ActionSequence::from_indices(&[2, 0], 3).unwrap();
        assert_eq!(s.to_compact_string(), "2-0");
        assert_eq!(s.first(), DiscreteAction(2));
    }

    proptest! {
        #[test]
        fn l2_triangle_inequality(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            c in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let (a, b, c) = (lp(&a), lp(&b), lp(&c));
            let ab = l2_distance(&a, &b).unwrap();
            let bc = l2_distance(&b, &c).unwrap();
            let ac = l2_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!((ab - l2_distance(&b, &a).unwrap()).abs() < 1e-15);
        }
    }
}
