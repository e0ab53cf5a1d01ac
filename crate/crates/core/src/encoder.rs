//! Frozen synthetic encoders from observations into the latent space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::alchemy::AlchemyState;
use crate::envs::text::{decode_text, descriptor_tokens, vocabulary};
use crate::envs::Observation;
use crate::error::{Error, Result};
use crate::primitives::{fnv1a, l2_distance, LatentPoint, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    OneHot,
    RandomProjection,
    DescriptorHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    #[serde(default = "default_d_latent")]
    pub d_latent: usize,
    #[serde(default)]
    pub seed: u64,
    /// Noise radius for `random_projection`.
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn default_d_latent() -> usize {
    64
}

fn default_eta() -> f64 {
    0.02
}

impl EncoderSpec {
    pub fn new(kind: EncoderKind, d_latent: usize, seed: u64) -> Self {
        Self {
            kind,
            d_latent,
            seed,
            eta: default_eta(),
        }
    }
}

/// The set of underlying states an encoder must separate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateUniverse {
    Alchemy { n_features: usize },
    Discrete { n_states: usize },
}

impl StateUniverse {
    pub fn n_states(&self) -> usize {
        match self {
            StateUniverse::Alchemy { n_features } => 1 << n_features,
            StateUniverse::Discrete { n_states } => *n_states,
        }
    }
}

/// A constructed encoder with its per-state codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    universe: StateUniverse,
    /// Columns of the projection (`random_projection`) or descriptor token
    /// vectors laid out as `[feature][present]` (`descriptor_hash`).
    basis: Vec<Vec<f64>>,
    codebook: Vec<LatentPoint>,
    min_distance: f64,
}

fn uniform_vector(stream: RngStream, d: usize) -> Vec<f64> {
    let mut rng = stream.generator();
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl Encoder {
    /// Build the encoder and check that it separates every pair of states.
    pub fn new(spec: EncoderSpec, universe: StateUniverse) -> Result<Self> {
        let n = universe.n_states();
        let d = spec.d_latent;
        if d == 0 {
            return Err(Error::config("encoder.d_latent", "must be positive"));
        }
        if !(spec.eta.is_finite() && spec.eta >= 0.0) {
            return Err(Error::config("encoder.eta", "must be finite and non-negative"));
        }
        let root = RngStream::new(spec.seed, crate::primitives::streams::INIT);
        let basis = match spec.kind {
            EncoderKind::OneHot => {
                if d < n {
                    return Err(Error::config(
                        "encoder.d_latent",
                        format!("one_hot needs d_latent >= {n} states, got {d}"),
                    ));
                }
                Vec::new()
            }
            EncoderKind::RandomProjection => {
                let scale = (3.0 / d as f64).sqrt();
                (0..n)
                    .map(|s| {
                        uniform_vector(root.derive(s as u64), d)
                            .into_iter()
                            .map(|x| x * scale)
                            .collect()
                    })
                    .collect()
            }
            EncoderKind::DescriptorHash => {
                let StateUniverse::Alchemy { n_features } = universe else {
                    return Err(Error::config(
                        "encoder.kind",
                        "descriptor_hash needs text observations",
                    ));
                };
                if n_features > vocabulary().max_features() {
                    return Err(Error::invalid(format!("{n_features} features exceed the vocabulary")));
                }
                (0..2 * n_features)
                    .map(|i| uniform_vector(root.derive(1000 + i as u64), d))
                    .collect()
            }
        };
        let mut enc = Self {
            spec,
            universe,
            basis,
            codebook: Vec::new(),
            min_distance: f64::INFINITY,
        };
        enc.codebook = (0..n).map(|s| enc.canonical(s)).collect::<Result<_>>()?;
        for i in 0..n {
            for j in i + 1..n {
                enc.min_distance = enc.min_distance.min(l2_distance(&enc.codebook[i], &enc.codebook[j])?);
            }
        }
        let required = if enc.spec.kind == EncoderKind::RandomProjection {
            4.0 * enc.spec.eta
        } else {
            0.0
        };
        if n > 1 && enc.min_distance <= required {
            return Err(Error::NotInjective(enc.min_distance));
        }
        Ok(enc)
    }

    /// Noise-free encoding of state `s`.
    fn canonical(&self, s: usize) -> Result<LatentPoint> {
        let d = self.spec.d_latent;
        match self.spec.kind {
            EncoderKind::OneHot => {
                let mut v = vec![0.0; d];
                v[s] = 1.0;
                LatentPoint::new(v)
            }
            EncoderKind::RandomProjection => LatentPoint::new(self.basis[s].clone()),
            EncoderKind::DescriptorHash => {
                let StateUniverse::Alchemy { n_features } = self.universe else {
                    unreachable!("checked at construction")
                };
                let state = AlchemyState::new(n_features, s)?;
                let bits: Vec<bool> = (0..n_features).map(|i| state.bit(i)).collect();
                self.hash_features(&bits)
            }
        }
    }

    fn hash_features(&self, present: &[bool]) -> Result<LatentPoint> {
        let mut v = vec![0.0; self.spec.d_latent];
        for (i, p) in present.iter().enumerate() {
            let token = &self.basis[2 * i + usize::from(*p)];
            v.iter_mut().zip(token).for_each(|(a, b)| *a += b);
        }
        LatentPoint::new(normalize(v))
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn universe(&self) -> StateUniverse {
        self.universe
    }

    pub fn d_latent(&self) -> usize {
        self.spec.d_latent
    }

    pub fn n_states(&self) -> usize {
        self.codebook.len()
    }

    /// Noise-free encodings indexed by state id.
    pub fn codebook(&self) -> &[LatentPoint] {
        &self.codebook
    }

    pub fn min_distance(&self) -> f64 {
        self.min_distance
    }

    /// Half the minimum inter-state distance: the radius of each state's cluster.
    pub fn default_tol(&self) -> f64 {
        0.5 * self.min_distance
    }

    fn state_of(&self, obs: &Observation) -> Result<usize> {
        let id = match (obs, self.universe) {
            (Observation::Text(t), StateUniverse::Alchemy { n_features }) => decode_text(&t.text, n_features)?.index(),
            (Observation::Text(t), StateUniverse::Discrete { .. }) => {
                return Err(Error::Undecodable(format!("text observation for a discrete encoder: {:?}", t.text)))
            }
            (Observation::Discrete { id }, _) => *id,
        };
        if id >= self.n_states() {
            return Err(Error::invalid(format!("state id {id} out of range for {} states", self.n_states())));
        }
        Ok(id)
    }

    /// Encode an observation. Text is decoded from its descriptors, never
    /// read from the attached ground truth.
    pub fn encode(&self, obs: &Observation) -> Result<LatentPoint> {
        match (self.spec.kind, obs) {
            (EncoderKind::DescriptorHash, Observation::Text(t)) => {
                let StateUniverse::Alchemy { n_features } = self.universe else {
                    unreachable!("checked at construction")
                };
                let vocab = vocabulary();
                let tokens = descriptor_tokens(&t.text, n_features)?;
                let present: Vec<bool> = tokens
                    .iter()
                    .enumerate()
                    .map(|(i, tok)| *tok == vocab.features[i].present)
                    .collect();
                self.hash_features(&present)
            }
            (EncoderKind::RandomProjection, Observation::Text(t)) => {
                let s = self.state_of(obs)?;
                let mut rng = RngStream::new(self.spec.seed, fnv1a(t.text.as_bytes())).generator();
                let dir = normalize((0..self.spec.d_latent).map(|_| rng.gen_range(-1.0..1.0)).collect());
                let radius = self.spec.eta * rng.gen::<f64>();
                let v = self.codebook[s]
                    .as_slice()
                    .iter()
                    .zip(&dir)
                    .map(|(c, u)| c + radius * u)
                    .collect();
                LatentPoint::new(v)
            }
            _ => Ok(self.codebook[self.state_of(obs)?].clone()),
        }
    }

    /// Nearest codebook state to `z` and its distance; lowest id on ties.
    pub fn nearest_state(&self, z: &LatentPoint) -> Result<(usize, f64)> {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.codebook.iter().enumerate() {
            let d = l2_distance(z, c)?;
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::text::render_text;

    fn alchemy(kind: EncoderKind, n: usize) -> Encoder {
        Encoder::new(EncoderSpec::new(kind, 64, 7), StateUniverse::Alchemy { n_features: n }).unwrap()
    }

    #[test]
    fn one_hot_indicator() {
        let enc = alchemy(EncoderKind::OneHot, 3);
        let z = enc.encode(&Observation::Discrete { id: 3 }).unwrap();
        assert_eq!(z.dim(), 64);
        for (i, v) in z.as_slice().iter().enumerate() {
            assert_eq!(*v, if i == 3 { 1.0 } else { 0.0 });
        }
        assert!(Encoder::new(
            EncoderSpec::new(EncoderKind::OneHot, 50, 0),
            StateUniverse::Discrete { n_states: 100 }
        )
        .is_err());
    }

    #[test]
    fn descriptor_hash_ignores_surface_form() {
        let enc = alchemy(EncoderKind::DescriptorHash, 4);
        for code in 0..16 {
            let s = AlchemyState::new(4, code).unwrap();
            let a = Observation::Text(render_text(&s, RngStream::new(1, 0)));
            let b = Observation::Text(render_text(&s, RngStream::new(2, 0)));
            let za = enc.encode(&a).unwrap();
            assert_eq!(za, enc.encode(&b).unwrap());
            assert_eq!(za, enc.codebook()[code]);
            let norm: f64 = za.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_projection_stays_in_eta_ball_and_separates() {
        let enc = alchemy(EncoderKind::RandomProjection, 4);
        assert!(enc.min_distance() > 4.0 * enc.spec().eta);
        for code in 0..16 {
            let s = AlchemyState::new(4, code).unwrap();
            for seed in 0..20 {
                let obs = Observation::Text(render_text(&s, RngStream::new(seed, 3)));
                let z = enc.encode(&obs).unwrap();
                assert!(l2_distance(&z, &enc.codebook()[code]).unwrap() <= enc.spec().eta + 1e-12);
                assert_eq!(enc.nearest_state(&z).unwrap().0, code);
                assert_eq!(z, enc.encode(&obs).unwrap());
            }
        }
    }

    #[test]
    fn injectivity_is_enforced() {
        let spec = EncoderSpec {
            eta: 10.0,
            ..EncoderSpec::new(EncoderKind::RandomProjection, 64, 0)
        };
        assert!(matches!(
            Encoder::new(spec, StateUniverse::Alchemy { n_features: 3 }),
            Err(Error::NotInjective(_))
        ));
        for kind in [EncoderKind::OneHot, EncoderKind::RandomProjection, EncoderKind::DescriptorHash] {
            let enc = alchemy(kind, 4);
            assert!(enc.min_distance() > 0.0);
        }
    }

    #[test]
    fn undecodable_text_is_error() {
        let enc = alchemy(EncoderKind::DescriptorHash, 3);
        let mut obs = render_text(&AlchemyState::new(3, 0).unwrap(), RngStream::new(0, 0));
        obs.text = "A mysterious object.".into();
        assert!(matches!(enc.encode(&Observation::Text(obs)), Err(Error::Undecodable(_))));
    }

    #[test]
    fn descriptor_hash_rejects_discrete_universe() {
        assert!(Encoder::new(
            EncoderSpec::new(EncoderKind::DescriptorHash, 64, 0),
            StateUniverse::Discrete { n_states: 4 }
        )
        .is_err());
    }
}
