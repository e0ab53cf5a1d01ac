//! Natural-language rendering of Alchemy states.
//!
//! Each binary feature has an "absent" and a "present" descriptor. A sentence
//! is built from one of a handful of templates, a generic object noun and the
//! descriptors (in a shuffled order), so one underlying state has many surface
//! forms but decodes back uniquely.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::envs::alchemy::AlchemyState;
use crate::error::{Error, Result};
use crate::primitives::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextObservation {
    pub text: String,
    pub underlying: AlchemyState,
}

#[derive(Debug, Deserialize)]
pub struct FeatureDescriptors {
    pub absent: String,
    pub present: String,
}

#[derive(Debug, Deserialize)]
pub struct Vocabulary {
    pub features: Vec<FeatureDescriptors>,
    pub nouns: Vec<String>,
    pub templates: Vec<String>,
}

impl Vocabulary {
    pub fn max_features(&self) -> usize {
        self.features.len()
    }

    pub fn descriptor(&self, feature: usize, present: bool) -> &str {
        let f = &self.features[feature];
        if present {
            &f.present
        } else {
            &f.absent
        }
    }
}

pub fn vocabulary() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(|| {
        serde_json::from_str(include_str!("../../data/alchemy_vocab.json"))
            .expect("bundled vocabulary is valid JSON")
    })
}

/// Render `state` as a sentence. Deterministic in `(state, stream)`.
pub fn render_text(state: &AlchemyState, stream: RngStream) -> TextObservation {
    let vocab = vocabulary();
    let mut rng = stream.generator();
    let noun = vocab.nouns.choose(&mut rng).expect("non-empty noun pool");
    let template = vocab.templates.choose(&mut rng).expect("non-empty templates");
    let mut descriptors: Vec<&str> = (0..state.n_features())
        .map(|i| vocab.descriptor(i, state.bit(i)))
        .collect();
    descriptors.shuffle(&mut rng);
    let text = template
        .replace("{noun}", noun)
        .replace("{descriptors}", &descriptors.join(", "));
    TextObservation {
        text,
        underlying: *state,
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
}

/// The descriptor chosen for each of the first `n_features` features.
pub fn descriptor_tokens(text: &str, n_features: usize) -> Result<Vec<&'static str>> {
    let vocab = vocabulary();
    if n_features > vocab.max_features() {
        return Err(Error::invalid(format!(
            "{n_features} features requested, vocabulary has {}",
            vocab.max_features()
        )));
    }
    let ws: Vec<String> = words(text).collect();
    let has = |w: &str| ws.iter().any(|x| x == w);
    let mut out = Vec::with_capacity(n_features);
    for (i, f) in vocab.features.iter().enumerate() {
        let (a, p) = (has(&f.absent), has(&f.present));
        if i >= n_features {
            if a || p {
                return Err(Error::Undecodable(format!(
                    "descriptor for feature {i} present in {n_features}-feature text: {text:?}"
                )));
            }
            continue;
        }
        match (a, p) {
            (true, false) => out.push(f.absent.as_str()),
            (false, true) => out.push(f.present.as_str()),
            (false, false) => {
                return Err(Error::Undecodable(format!("no descriptor for feature {i} in {text:?}")))
            }
            (true, true) => {
                return Err(Error::Undecodable(format!(
                    "conflicting descriptors for feature {i} in {text:?}"
                )))
            }
        }
    }
    Ok(out)
}

/// Recover the underlying state from its text.
pub fn decode_text(text: &str, n_features: usize) -> Result<AlchemyState> {
    let vocab = vocabulary();
    let tokens = descriptor_tokens(text, n_features)?;
    let bits: Vec<u8> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| u8::from(*t == vocab.features[i].present))
        .collect();
    AlchemyState::from_bits(&bits)
}
