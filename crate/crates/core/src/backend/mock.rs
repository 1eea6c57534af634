use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, BackendIdentity, FirstTokenBackend, TokenDistribution, MIN_TOP_K};
use crate::dataset::Dataset;
use crate::prompting::{LabelStyle, RenderedPrompt, LETTERS};

/// Share of a letter's mass on the bare letter; the rest goes to the
/// space-prefixed variant.
const BARE_LETTER_SHARE: f64 = 0.8;

/// Non-answer tokens used to pad the mock's top-k list. They carry zero mass.
pub const FILLER_TOKENS: [&str; 10] = [
    "\n", " The", "The", "Answer", " answer", "I", " I", "Based", "**", "Option",
];

/// A synthetic model: fixed per-question choice preferences, a positional
/// preference per letter label and Gaussian logit noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockModelSpec {
    pub latents: BTreeMap<String, [f64; 3]>,
    /// Multiplier on the mass of whatever sits at label A, B, C.
    pub bias: [f64; 3],
    pub noise: f64,
    pub seed: u64,
}

impl MockModelSpec {
    pub fn new(
        latents: BTreeMap<String, [f64; 3]>,
        bias: [f64; 3],
        noise: f64,
        seed: u64,
    ) -> Result<Self, BackendError> {
        let spec = MockModelSpec {
            latents,
            bias,
            noise,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.bias.iter().any(|&b| !b.is_finite() || b <= 0.0) {
            return Err(BackendError::InvalidSpec(format!(
                "positional bias must be strictly positive, got {:?}",
                self.bias
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(BackendError::InvalidSpec(format!(
                "noise scale must be >= 0, got {}",
                self.noise
            )));
        }
        for (id, l) in &self.latents {
            let sum: f64 = l.iter().sum();
            if l.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(BackendError::InvalidSpec(format!(
                    "latent probabilities for `{id}` must be a distribution, got {l:?}"
                )));
            }
        }
        Ok(())
    }

    /// Latents equal to each question's student rates. Questions without
    /// rates get 0.6 on the correct answer and 0.2 on each distractor.
    pub fn from_student_rates(
        ds: &Dataset,
        bias: [f64; 3],
        noise: f64,
        seed: u64,
    ) -> Result<Self, BackendError> {
        let latents = ds
            .questions
            .iter()
            .map(|q| {
                let l = q.student_rates.map(normalize).unwrap_or_else(|| {
                    let mut l = [0.2; 3];
                    l[q.correct_index] = 0.6;
                    l
                });
                (q.id.clone(), l)
            })
            .collect();
        Self::new(latents, bias, noise, seed)
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let s: f64 = v.iter().sum();
    if s > 0.0 && (s - 1.0).abs() > 1e-12 {
        v.map(|x| x / s)
    } else {
        v
    }
}

fn noise_rng(seed: u64, prompt: &RenderedPrompt) -> ChaCha8Rng {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(prompt.question_id.as_bytes())
        .chain_update([0u8, prompt.phrasing.id(), prompt.permutation_id as u8])
        .finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(bytes)
}

/// Letter masses `∝ latent(choice at label) · bias(label) · exp(noise · z)`,
/// each split 80/20 between `"L"` and `" L"`, padded with zero-mass fillers.
pub fn mock_query(
    spec: &MockModelSpec,
    prompt: &RenderedPrompt,
    top_k: usize,
) -> Result<TokenDistribution, BackendError> {
    if top_k < MIN_TOP_K {
        return Err(BackendError::InvalidTopK(top_k));
    }
    let latent = spec
        .latents
        .get(&prompt.question_id)
        .ok_or_else(|| BackendError::UnknownQuestion(prompt.question_id.clone()))?;

    let mut weights: [f64; 3] =
        std::array::from_fn(|label| latent[prompt.permutation.targets[label]] * spec.bias[label]);
    if spec.noise > 0.0 {
        let mut rng = noise_rng(spec.seed, prompt);
        for w in &mut weights {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w *= (spec.noise * z).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    let masses = weights.map(|w| if total > 0.0 { w / total } else { 0.0 });

    let mut entries = Vec::with_capacity(6 + FILLER_TOKENS.len());
    for (letter, m) in LETTERS.iter().zip(masses) {
        entries.push((letter.to_string(), m * BARE_LETTER_SHARE));
        entries.push((format!(" {letter}"), m * (1.0 - BARE_LETTER_SHARE)));
    }
    entries.extend(FILLER_TOKENS.iter().map(|t| (t.to_string(), 0.0)));
    TokenDistribution::new(entries, top_k)
}

pub struct MockBackend {
    spec: MockModelSpec,
    identity: BackendIdentity,
}

impl MockBackend {
    pub fn new(spec: MockModelSpec, label_style: LabelStyle) -> Result<Self, BackendError> {
        spec.validate()?;
        let identity = BackendIdentity {
            model: "mock".into(),
            endpoint: format!(
                "mock://seed/{}?bias={},{},{}&noise={}",
                spec.seed, spec.bias[0], spec.bias[1], spec.bias[2], spec.noise
            ),
            label_style,
        };
        Ok(MockBackend { spec, identity })
    }

    pub fn spec(&self) -> &MockModelSpec {
        &self.spec
    }
}

impl FirstTokenBackend for MockBackend {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn query_first_token(
        &self,
        prompt: &RenderedPrompt,
        top_k: usize,
    ) -> Result<TokenDistribution, BackendError> {
        mock_query(&self.spec, prompt, top_k)
    }

    fn timestamps_probes(&self) -> bool {
        false
    }
}
